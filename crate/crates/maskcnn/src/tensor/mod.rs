//! Dense 4-D tensor engine with reverse-mode differentiation.
//!
//! Everything in the pipeline — the FCN segmenter, the four-stream network,
//! the pooling/FC baselines — is built from the operations in this module.
//! Design points:
//!
//! * Tensors are dense `(n, c, h, w)` arrays in row-major order. Vectors and
//!   per-sample feature rows are represented as `(n, d, 1, 1)`.
//! * Storage is generic over [`Scalar`] (`f32` for training/inference, `f64`
//!   for gradient checking). Checkpoints always serialize as 32-bit floats.
//! * Differentiation is tape-based: a [`graph::Graph`] records each forward
//!   op and replays them in reverse. Graphs are rebuilt per step
//!   (define-by-run); parameters live in a [`ParamStore`] and accumulate
//!   gradients across [`graph::Graph::backward`] calls until the optimizer
//!   consumes them.
//! * Any NaN/Inf produced by a forward or backward pass is a hard error, not
//!   a silent propagation.

mod gradcheck;
mod graph;
pub mod kernels;
mod sgd;

pub use gradcheck::{check_gradients, GradCheckReport};
pub use graph::{Binder, Graph, PoolMode, Var};
pub use sgd::{Sgd, SgdConfig};

use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Numeric scalar the engine is generic over. `f32` is the storage type used
/// by the pipeline; `f64` exists for finite-difference gradient checking.
pub trait Scalar:
    Copy
    + PartialOrd
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn abs(self) -> Self;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn is_finite(self) -> bool;
    fn maximum(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

/// Shape of a 4-D tensor: batch, channels, height, width.
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape4 { n, c, h, w }
    }

    /// Total element count.
    pub fn count(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Flat row-major index of `(n, c, h, w)`.
    #[inline]
    pub fn idx(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }
}

impl std::fmt::Display for Shape4 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Dense 4-D array. Gradients are not stored on the tensor itself: the graph
/// tracks per-node gradients during a backward pass, and long-lived gradient
/// accumulators live on [`Parameter`].
#[derive(Clone, PartialEq, Debug)]
pub struct Tensor<T: Scalar> {
    shape: Shape4,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape4) -> Self {
        Tensor {
            shape,
            data: vec![T::ZERO; shape.count()],
        }
    }

    pub fn filled(shape: Shape4, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.count()],
        }
    }

    /// Wrap an existing buffer; its length must match the shape product.
    pub fn from_vec(shape: Shape4, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.count() {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {} ({} elements)",
                data.len(),
                shape,
                shape.count()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut t = Tensor::zeros(shape);
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        t.data[shape.idx(n, c, h, w)] = f(n, c, h, w);
                    }
                }
            }
        }
        t
    }

    /// Concatenate along the batch axis; all items must share `(c, h, w)`.
    pub fn concat_batch(items: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = items
            .first()
            .ok_or_else(|| Error::Shape("cannot batch zero tensors".into()))?;
        let (c, h, w) = (first.shape.c, first.shape.h, first.shape.w);
        let mut n = 0;
        for item in items {
            let s = item.shape();
            if (s.c, s.h, s.w) != (c, h, w) {
                return Err(Error::Shape(format!(
                    "cannot batch {} with {}",
                    s, first.shape
                )));
            }
            n += s.n;
        }
        let mut data = Vec::with_capacity(n * c * h * w);
        for item in items {
            data.extend_from_slice(&item.data);
        }
        Tensor::from_vec(Shape4::new(n, c, h, w), data)
    }

    /// A `(1, 1, 1, 1)` tensor holding a single value.
    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Shape4::new(1, 1, 1, 1),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.shape.idx(n, c, h, w)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, h: usize, w: usize) -> &mut T {
        &mut self.data[self.shape.idx(n, c, h, w)]
    }

    /// Reinterpret as a different shape with the same element count.
    pub fn reshaped(mut self, shape: Shape4) -> Result<Self> {
        if shape.count() != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {} ({} elements) to {} ({} elements)",
                self.shape,
                self.data.len(),
                shape,
                shape.count()
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        self.map(|v| v.to_f64())
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        self.map(|v| v.to_f64() as f32)
    }

    /// Error out if any element is NaN or infinite. `context` names the
    /// producing operation for the diagnostic.
    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "{context}: non-finite value {v} at flat index {i} (shape {})",
                    self.shape
                )));
            }
        }
        Ok(())
    }
}

/// Class-index targets for the cross-entropy loss. Spatial shape `(n, h, w)`;
/// plain classification targets use `h = w = 1`. The value [`Labels::IGNORE`]
/// marks positions excluded from the loss and its gradient.
#[derive(Clone, Debug)]
pub struct Labels {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    data: Vec<i32>,
}

impl Labels {
    /// Sentinel for "no label here": the position contributes neither loss
    /// nor gradient.
    pub const IGNORE: i32 = -1;

    pub fn from_classes(classes: &[usize]) -> Self {
        Labels {
            n: classes.len(),
            h: 1,
            w: 1,
            data: classes.iter().map(|&c| c as i32).collect(),
        }
    }

    pub fn spatial(n: usize, h: usize, w: usize, data: Vec<i32>) -> Result<Self> {
        if data.len() != n * h * w {
            return Err(Error::Shape(format!(
                "label buffer length {} does not match (n={n}, h={h}, w={w})",
                data.len()
            )));
        }
        Ok(Labels { n, h, w, data })
    }

    #[inline]
    pub fn at(&self, n: usize, h: usize, w: usize) -> i32 {
        self.data[(n * self.h + h) * self.w + w]
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    /// Concatenate along the batch axis; all items must share `(h, w)`.
    pub fn concat_batch(items: &[&Labels]) -> Result<Labels> {
        let first = items
            .first()
            .ok_or_else(|| Error::Shape("cannot batch zero label sets".into()))?;
        let (h, w) = (first.h, first.w);
        let mut n = 0;
        let mut data = Vec::new();
        for item in items {
            if (item.h, item.w) != (h, w) {
                return Err(Error::Shape(format!(
                    "cannot batch ({}, {}) labels with ({h}, {w})",
                    item.h, item.w
                )));
            }
            n += item.n;
            data.extend_from_slice(&item.data);
        }
        Labels::spatial(n, h, w, data)
    }
}

/// A named, trainable tensor plus its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Parameter<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Handle into a [`ParamStore`].
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub struct ParamId(pub(crate) usize);

/// Ordered collection of named parameters. Names are unique; insertion order
/// is the iteration order (checkpoint writers sort by name independently).
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar> {
    params: Vec<Parameter<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter { name, value, grad });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(T::ZERO);
        }
    }

    /// Add `grad` into the accumulator of `id`.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.grad.shape() != grad.shape() {
            return Err(Error::Shape(format!(
                "gradient shape {} does not match parameter `{}` shape {}",
                grad.shape(),
                p.name,
                p.value.shape()
            )));
        }
        for (a, b) in p.grad.data_mut().iter_mut().zip(grad.data()) {
            *a += *b;
        }
        Ok(())
    }
}

/// Deterministic RNG stream for a seed.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive a sub-seed from a global seed and a textual tag (phase name,
/// stream name, image id, ...). FNV-1a over the tag mixed into the seed,
/// finalized with the splitmix64 mixer.
pub fn derive_seed(global: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = global ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// He-normal initialization: zero-mean normal with variance `2 / fan_in`.
pub fn he_normal<T: Scalar>(shape: Shape4, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v = T::from_f64(z * std);
    }
    t
}

/// 2-D bilinear interpolation kernel for a transposed convolution with
/// square kernel `k` and stride `s`: the 1-D profile is
/// `w[u] = 1 - |u - (k-1)/2| / s`, and the 2-D kernel is its outer product,
/// placed on the channel diagonal (zero across channels).
pub fn bilinear_kernel<T: Scalar>(channels: usize, k: usize, stride: usize) -> Tensor<T> {
    let center = (k as f64 - 1.0) / 2.0;
    let profile: Vec<f64> = (0..k)
        .map(|u| 1.0 - (u as f64 - center).abs() / stride as f64)
        .collect();
    let mut t = Tensor::zeros(Shape4::new(channels, channels, k, k));
    for c in 0..channels {
        for u in 0..k {
            for v in 0..k {
                *t.at_mut(c, c, u, v) = T::from_f64(profile[u] * profile[v]);
            }
        }
    }
    t
}
