//! Reverse-mode differentiation tape.
//!
//! A [`Graph`] records forward operations as nodes; [`Graph::backward`]
//! replays them in reverse creation order (a valid topological order, since
//! nodes only reference earlier nodes) and accumulates gradients. Graphs are
//! cheap and rebuilt for every training step; parameters persist outside the
//! graph in a [`ParamStore`](super::ParamStore) and are attached per step
//! through a [`Binder`].
//!
//! Every op validates shapes up front and checks its output for NaN/Inf —
//! a non-finite value anywhere is a hard error, never silent propagation.

use super::kernels;
use super::{Labels, ParamId, ParamStore, Scalar, Shape4, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub struct Var(usize);

/// Pooling mode for [`Graph::masked_global_pool`].
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum PoolMode {
    Average,
    Max,
}

const L2_EPS: f64 = 1e-12;

enum Op<T: Scalar> {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        pad: usize,
        cols: Vec<T>,
    },
    ConvTranspose2d {
        x: usize,
        w: usize,
        stride: usize,
        pad: usize,
    },
    Relu {
        x: usize,
    },
    MaxPool {
        x: usize,
        argmax: Vec<u32>,
    },
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    Flatten {
        x: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    MaskMul {
        x: usize,
        mask: Tensor<T>,
    },
    MaskedPool {
        x: usize,
        mode: PoolMode,
        /// Effective mask after the all-zero fallback (per-sample all-ones).
        mask_eff: Tensor<T>,
        counts: Vec<usize>,
        /// Flat input index of the kept maximum per (n, c); empty in
        /// average mode.
        argmax: Vec<u32>,
    },
    L2NormRows {
        x: usize,
        /// Raw (pre-epsilon) row norms.
        norms: Vec<T>,
    },
    Concat {
        parts: Vec<usize>,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        probs: Tensor<T>,
        labels: Labels,
        labeled: usize,
    },
    WeightedSum {
        x: usize,
        weights: Tensor<T>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    needs_grad: bool,
    op: Op<T>,
}

/// Define-by-run computation tape.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    warnings: Vec<String>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            warnings: Vec::new(),
        }
    }

    /// Degenerate-input fallbacks recorded during forward passes.
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if it was tracked.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool, ctx: &str) -> Result<Var> {
        value.ensure_finite(ctx)?;
        self.nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant leaf: data that never receives a gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Leaf, false, "input leaf")
    }

    /// Trainable leaf: gradients are tracked (parameters, or inputs under
    /// gradient checking).
    pub fn leaf(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Leaf, true, "leaf")
    }

    /// 2-D cross-correlation with square kernel. Weight `(c_out, c_in, k, k)`,
    /// bias `(1, c_out, 1, 1)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        let bs = self.value(b).shape();
        if ws.h != ws.w {
            return Err(Error::Shape(format!("conv2d kernel must be square, got {ws}")));
        }
        if ws.c != xs.c {
            return Err(Error::Shape(format!(
                "conv2d weight expects {} input channels but input has {} (input {xs}, weight {ws})",
                ws.c, xs.c
            )));
        }
        if bs != Shape4::new(1, ws.n, 1, 1) {
            return Err(Error::Shape(format!(
                "conv2d bias must be (1, {}, 1, 1), got {bs}",
                ws.n
            )));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be ≥ 1".into()));
        }
        if xs.h + 2 * pad < ws.h || xs.w + 2 * pad < ws.w {
            return Err(Error::Shape(format!(
                "conv2d output would be empty: input {xs}, kernel {}, stride {stride}, pad {pad}",
                ws.h
            )));
        }
        let (out, cols) = kernels::conv2d_forward(
            self.value(x),
            self.value(w),
            self.value(b),
            stride,
            pad,
        );
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(
            out,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.0,
                stride,
                pad,
                cols,
            },
            needs,
            "conv2d",
        )
    }

    /// Transposed convolution used for upsampling. Weight `(c_in, c_out, k, k)`.
    /// Padding is fixed to `(k - stride) / 2` so the output is exactly
    /// `stride ×` the input size; incompatible kernel/stride pairs are a
    /// config error.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        if ws.h != ws.w {
            return Err(Error::Shape(format!(
                "conv_transpose2d kernel must be square, got {ws}"
            )));
        }
        let k = ws.h;
        if ws.n != xs.c {
            return Err(Error::Shape(format!(
                "conv_transpose2d weight expects {} input channels but input has {}",
                ws.n, xs.c
            )));
        }
        if stride == 0 || k < stride || (k - stride) % 2 != 0 {
            return Err(Error::Config(format!(
                "conv_transpose2d kernel {k} incompatible with stride {stride}: \
                 need k ≥ stride and k − stride even so output = stride × input"
            )));
        }
        let pad = (k - stride) / 2;
        let out = kernels::conv_transpose2d_forward(self.value(x), self.value(w), stride, pad);
        let needs = self.needs(x) || self.needs(w);
        self.push(
            out,
            Op::ConvTranspose2d {
                x: x.0,
                w: w.0,
                stride,
                pad,
            },
            needs,
            "conv_transpose2d",
        )
    }

    /// Elementwise `max(x, 0)`. The backward pass gates strictly on `x > 0`
    /// (subgradient 0 at the kink).
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > T::ZERO { v } else { T::ZERO });
        let needs = self.needs(x);
        self.push(out, Op::Relu { x: x.0 }, needs, "relu")
    }

    /// Max-pool with truncation of windows that would overrun the edge.
    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let xs = self.value(x).shape();
        if k == 0 || stride == 0 {
            return Err(Error::Config("maxpool2d window and stride must be ≥ 1".into()));
        }
        if k > xs.h || k > xs.w {
            return Err(Error::Shape(format!(
                "maxpool2d window {k} larger than input {}×{}",
                xs.h, xs.w
            )));
        }
        let (out, argmax) = kernels::maxpool2d_forward(self.value(x), k, stride);
        let needs = self.needs(x);
        self.push(out, Op::MaxPool { x: x.0, argmax }, needs, "maxpool2d")
    }

    /// Reshape `(n, c, h, w)` to `(n, c·h·w, 1, 1)`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape();
        let out = self
            .value(x)
            .clone()
            .reshaped(Shape4::new(xs.n, xs.c * xs.h * xs.w, 1, 1))?;
        let needs = self.needs(x);
        self.push(out, Op::Flatten { x: x.0 }, needs, "flatten")
    }

    /// Fully connected layer over `(n, d, 1, 1)` rows. Weight `(o, d, 1, 1)`,
    /// bias `(1, o, 1, 1)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        let bs = self.value(b).shape();
        if xs.h != 1 || xs.w != 1 {
            return Err(Error::Shape(format!(
                "linear input must be flattened to (n, d, 1, 1), got {xs}"
            )));
        }
        if ws.h != 1 || ws.w != 1 || ws.c != xs.c {
            return Err(Error::Shape(format!(
                "linear weight must be (o, {}, 1, 1), got {ws}",
                xs.c
            )));
        }
        if bs != Shape4::new(1, ws.n, 1, 1) {
            return Err(Error::Shape(format!(
                "linear bias must be (1, {}, 1, 1), got {bs}",
                ws.n
            )));
        }
        let out = kernels::linear_forward(self.value(x), self.value(w), self.value(b));
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(
            out,
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.0,
            },
            needs,
            "linear",
        )
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape(format!("add shape mismatch: {sa} vs {sb}")));
        }
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += v;
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Add { a: a.0, b: b.0 }, needs, "add")
    }

    fn check_mask(&self, x: Var, mask: &Tensor<T>, op: &str) -> Result<()> {
        let xs = self.value(x).shape();
        let ms = mask.shape();
        if ms.n != xs.n || ms.c != 1 || ms.h != xs.h || ms.w != xs.w {
            return Err(Error::Shape(format!(
                "{op} mask must be ({}, 1, {}, {}), got {ms}",
                xs.n, xs.h, xs.w
            )));
        }
        for (i, &v) in mask.data().iter().enumerate() {
            if !(v == T::ZERO || v == T::ONE) {
                return Err(Error::Numeric(format!(
                    "{op} mask must be binary; found {v} at flat index {i}"
                )));
            }
        }
        Ok(())
    }

    /// Zero out activations wherever the binary mask is 0. The mask is data:
    /// it receives no gradient.
    pub fn mask_mul(&mut self, x: Var, mask: &Tensor<T>) -> Result<Var> {
        self.check_mask(x, mask, "elementwise_mask_mul")?;
        let xs = self.value(x).shape();
        let mut out = self.value(x).clone();
        for n in 0..xs.n {
            for c in 0..xs.c {
                for h in 0..xs.h {
                    for w in 0..xs.w {
                        let m = mask.at(n, 0, h, w);
                        let slot = out.at_mut(n, c, h, w);
                        *slot = *slot * m;
                    }
                }
            }
        }
        let needs = self.needs(x);
        self.push(
            out,
            Op::MaskMul {
                x: x.0,
                mask: mask.clone(),
            },
            needs,
            "elementwise_mask_mul",
        )
    }

    /// Pool each channel over the positions the binary mask keeps, yielding
    /// `(n, c, 1, 1)`.
    ///
    /// * `Average` divides by the **count of kept positions**, not the grid
    ///   size, so masking never dilutes the mean.
    /// * `Max` takes the maximum over kept positions and requires
    ///   nonnegative activations (it is meant to follow a relu); ties break
    ///   to the first position in row-major order for a deterministic
    ///   backward pass.
    /// * A sample whose mask is all zero falls back to pooling over all its
    ///   positions, and the fallback is recorded in [`Graph::warnings`].
    pub fn masked_global_pool(&mut self, x: Var, mask: &Tensor<T>, mode: PoolMode) -> Result<Var> {
        let xs = self.value(x).shape();
        if xs.count() == 0 {
            return Err(Error::Data("masked_global_pool: empty input".into()));
        }
        self.check_mask(x, mask, "masked_global_pool")?;
        if mode == PoolMode::Max {
            for (i, &v) in self.value(x).data().iter().enumerate() {
                if v < T::ZERO {
                    return Err(Error::Numeric(format!(
                        "masked_global_pool(max) expects nonnegative activations \
                         (use it after a relu); found {v} at flat index {i}"
                    )));
                }
            }
        }
        let hw = xs.h * xs.w;
        let mut mask_eff = mask.clone();
        let mut counts = vec![0usize; xs.n];
        for n in 0..xs.n {
            let m = &mask_eff.data()[n * hw..(n + 1) * hw];
            let cnt = m.iter().filter(|&&v| v == T::ONE).count();
            if cnt == 0 {
                mask_eff.data_mut()[n * hw..(n + 1) * hw].fill(T::ONE);
                counts[n] = hw;
                let msg = format!(
                    "masked_global_pool: sample {n} has an all-zero mask; pooling over all positions"
                );
                crate::warn::emit(&msg);
                self.warnings.push(msg);
            } else {
                counts[n] = cnt;
            }
        }

        let mut out = Tensor::zeros(Shape4::new(xs.n, xs.c, 1, 1));
        let mut argmax = Vec::new();
        match mode {
            PoolMode::Average => {
                for n in 0..xs.n {
                    let inv = T::from_f64(1.0 / counts[n] as f64);
                    for c in 0..xs.c {
                        let mut acc = T::ZERO;
                        for h in 0..xs.h {
                            for w in 0..xs.w {
                                if mask_eff.at(n, 0, h, w) == T::ONE {
                                    acc += self.value(x).at(n, c, h, w);
                                }
                            }
                        }
                        *out.at_mut(n, c, 0, 0) = acc * inv;
                    }
                }
            }
            PoolMode::Max => {
                argmax = vec![0u32; xs.n * xs.c];
                for n in 0..xs.n {
                    for c in 0..xs.c {
                        let mut best: Option<(T, usize)> = None;
                        for h in 0..xs.h {
                            for w in 0..xs.w {
                                if mask_eff.at(n, 0, h, w) != T::ONE {
                                    continue;
                                }
                                let v = self.value(x).at(n, c, h, w);
                                match best {
                                    None => best = Some((v, xs.idx(n, c, h, w))),
                                    Some((bv, _)) if v > bv => {
                                        best = Some((v, xs.idx(n, c, h, w)))
                                    }
                                    _ => {}
                                }
                            }
                        }
                        let (bv, bi) = best.expect("fallback guarantees a kept position");
                        *out.at_mut(n, c, 0, 0) = bv;
                        argmax[n * xs.c + c] = bi as u32;
                    }
                }
            }
        }
        let needs = self.needs(x);
        self.push(
            out,
            Op::MaskedPool {
                x: x.0,
                mode,
                mask_eff,
                counts,
                argmax,
            },
            needs,
            "masked_global_pool",
        )
    }

    /// Normalize each `(n, d)` row to unit ℓ2 norm; rows with norm below
    /// ε = 1e-12 stay zero (and, having been produced by fully masked-out
    /// activations, propagate no gradient).
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape();
        if xs.h != 1 || xs.w != 1 {
            return Err(Error::Shape(format!(
                "l2_normalize expects (n, d, 1, 1) rows, got {xs}"
            )));
        }
        let d = xs.c;
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(xs.n);
        for n in 0..xs.n {
            let row = &mut out.data_mut()[n * d..(n + 1) * d];
            let mut sq = T::ZERO;
            for &v in row.iter() {
                sq += v * v;
            }
            let norm = sq.sqrt();
            norms.push(norm);
            let denom = norm.maximum(T::from_f64(L2_EPS));
            for v in row.iter_mut() {
                *v = *v / denom;
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::L2NormRows { x: x.0, norms }, needs, "l2_normalize")
    }

    /// Concatenate `(n, d_i, 1, 1)` feature blocks along the channel axis,
    /// preserving order. The backward pass splits the gradient back into the
    /// blocks.
    pub fn concat_features(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_features: no inputs".into()));
        }
        let n = self.value(parts[0]).shape().n;
        let mut total = 0usize;
        for &p in parts {
            let s = self.value(p).shape();
            if s.h != 1 || s.w != 1 {
                return Err(Error::Shape(format!(
                    "concat_features expects (n, d, 1, 1) blocks, got {s}"
                )));
            }
            if s.n != n {
                return Err(Error::Shape(format!(
                    "concat_features batch mismatch: {} vs {}",
                    s.n, n
                )));
            }
            total += s.c;
        }
        let mut out = Tensor::zeros(Shape4::new(n, total, 1, 1));
        for row in 0..n {
            let mut off = 0usize;
            for &p in parts {
                let d = self.value(p).shape().c;
                let src = &self.value(p).data()[row * d..(row + 1) * d];
                out.data_mut()[row * total + off..row * total + off + d].copy_from_slice(src);
                off += d;
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(
            out,
            Op::Concat {
                parts: parts.iter().map(|p| p.0).collect(),
            },
            needs,
            "concat_features",
        )
    }

    /// Mean softmax cross-entropy over all labeled positions of
    /// `(n, k, h, w)` logits. Positions labeled [`Labels::IGNORE`] contribute
    /// neither loss nor gradient; the mean divides by the count of labeled
    /// positions. Returns a scalar node.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &Labels) -> Result<Var> {
        let ls = self.value(logits).shape();
        let k = ls.c;
        if labels.n != ls.n || labels.h != ls.h || labels.w != ls.w {
            return Err(Error::Shape(format!(
                "labels (n={}, h={}, w={}) do not match logits {ls}",
                labels.n, labels.h, labels.w
            )));
        }
        let mut probs = Tensor::zeros(ls);
        let mut labeled = 0usize;
        let mut loss = 0.0f64;
        for n in 0..ls.n {
            for h in 0..ls.h {
                for w in 0..ls.w {
                    let lab = labels.at(n, h, w);
                    // Softmax is computed everywhere (cheap), loss only where
                    // labeled.
                    let mut m = self.value(logits).at(n, 0, h, w);
                    for c in 1..k {
                        m = m.maximum(self.value(logits).at(n, c, h, w));
                    }
                    let mut sum = T::ZERO;
                    for c in 0..k {
                        let e = (self.value(logits).at(n, c, h, w) - m).exp();
                        *probs.at_mut(n, c, h, w) = e;
                        sum += e;
                    }
                    for c in 0..k {
                        let slot = probs.at_mut(n, c, h, w);
                        *slot = *slot / sum;
                    }
                    if lab == Labels::IGNORE {
                        continue;
                    }
                    if lab < 0 || lab as usize >= k {
                        return Err(Error::Data(format!(
                            "label {lab} out of range [0, {k}) at (n={n}, h={h}, w={w})"
                        )));
                    }
                    labeled += 1;
                    let lse = m.to_f64() + sum.ln().to_f64();
                    loss += lse - self.value(logits).at(n, lab as usize, h, w).to_f64();
                }
            }
        }
        if labeled == 0 {
            return Err(Error::Data(
                "softmax_cross_entropy: every position is ignore-labeled".into(),
            ));
        }
        let value = Tensor::scalar(T::from_f64(loss / labeled as f64));
        let needs = self.needs(logits);
        self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits: logits.0,
                probs,
                labels: labels.clone(),
                labeled,
            },
            needs,
            "softmax_cross_entropy",
        )
    }

    /// Scalar projection `Σ x ⊙ weights` (the weights are data). Used to
    /// scalarize arbitrary outputs for gradient checking.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor<T>) -> Result<Var> {
        if self.value(x).shape() != weights.shape() {
            return Err(Error::Shape(format!(
                "weighted_sum shape mismatch: {} vs {}",
                self.value(x).shape(),
                weights.shape()
            )));
        }
        let mut acc = T::ZERO;
        for (&a, &b) in self.value(x).data().iter().zip(weights.data()) {
            acc += a * b;
        }
        let needs = self.needs(x);
        self.push(
            Tensor::scalar(acc),
            Op::WeightedSum {
                x: x.0,
                weights: weights.clone(),
            },
            needs,
            "weighted_sum",
        )
    }

    /// Run reverse-mode accumulation from the scalar node `loss`. Gradients
    /// are queryable through [`Graph::grad`] afterwards; calling `backward`
    /// again replaces them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).shape() != Shape4::new(1, 1, 1, 1) {
            return Err(Error::Shape(format!(
                "backward target must be a scalar (1,1,1,1) node, got {}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::scalar(T::ONE));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.backprop_node(i, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(
        &self,
        i: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        /// Add a contribution into a parent's gradient slot (checking it for
        /// NaN/Inf on the way in).
        fn add_grad<T: Scalar>(
            slot: &mut Option<Tensor<T>>,
            contrib: Tensor<T>,
            ctx: &str,
        ) -> Result<()> {
            contrib.ensure_finite(ctx)?;
            match slot {
                None => *slot = Some(contrib),
                Some(t) => {
                    for (a, &b) in t.data_mut().iter_mut().zip(contrib.data()) {
                        *a += b;
                    }
                }
            }
            Ok(())
        }

        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            } => {
                if self.nodes[*w].needs_grad || self.nodes[*b].needs_grad {
                    let (gw, gb) =
                        kernels::conv2d_grad_wb(g, self.nodes[*w].value.shape(), cols);
                    if self.nodes[*w].needs_grad {
                        add_grad(&mut grads[*w], gw, "conv2d backward (weight)")?;
                    }
                    if self.nodes[*b].needs_grad {
                        add_grad(&mut grads[*b], gb, "conv2d backward (bias)")?;
                    }
                }
                if self.nodes[*x].needs_grad {
                    let gx = kernels::conv2d_grad_x(
                        g,
                        &self.nodes[*w].value,
                        self.nodes[*x].value.shape(),
                        *stride,
                        *pad,
                    );
                    add_grad(&mut grads[*x], gx, "conv2d backward (input)")?;
                }
            }
            Op::ConvTranspose2d { x, w, stride, pad } => {
                let (gx, gw) = kernels::conv_transpose2d_backward(
                    g,
                    &self.nodes[*x].value,
                    &self.nodes[*w].value,
                    *stride,
                    *pad,
                );
                if self.nodes[*x].needs_grad {
                    add_grad(&mut grads[*x], gx, "conv_transpose2d backward (input)")?;
                }
                if self.nodes[*w].needs_grad {
                    add_grad(&mut grads[*w], gw, "conv_transpose2d backward (weight)")?;
                }
            }
            Op::Relu { x } => {
                if self.nodes[*x].needs_grad {
                    let xv = &self.nodes[*x].value;
                    let mut gx = Tensor::zeros(xv.shape());
                    for ((o, &xi), &gi) in
                        gx.data_mut().iter_mut().zip(xv.data()).zip(g.data())
                    {
                        if xi > T::ZERO {
                            *o = gi;
                        }
                    }
                    add_grad(&mut grads[*x], gx, "relu backward")?;
                }
            }
            Op::MaxPool { x, argmax } => {
                if self.nodes[*x].needs_grad {
                    let gx =
                        kernels::maxpool2d_backward(g, self.nodes[*x].value.shape(), argmax);
                    add_grad(&mut grads[*x], gx, "maxpool2d backward")?;
                }
            }
            Op::Linear { x, w, b } => {
                let (gx, gw, gb) =
                    kernels::linear_backward(g, &self.nodes[*x].value, &self.nodes[*w].value);
                if self.nodes[*x].needs_grad {
                    add_grad(&mut grads[*x], gx, "linear backward (input)")?;
                }
                if self.nodes[*w].needs_grad {
                    add_grad(&mut grads[*w], gw, "linear backward (weight)")?;
                }
                if self.nodes[*b].needs_grad {
                    add_grad(&mut grads[*b], gb, "linear backward (bias)")?;
                }
            }
            Op::Flatten { x } => {
                if self.nodes[*x].needs_grad {
                    let gx = g.clone().reshaped(self.nodes[*x].value.shape())?;
                    add_grad(&mut grads[*x], gx, "flatten backward")?;
                }
            }
            Op::Add { a, b } => {
                if self.nodes[*a].needs_grad {
                    add_grad(&mut grads[*a], g.clone(), "add backward")?;
                }
                if self.nodes[*b].needs_grad {
                    add_grad(&mut grads[*b], g.clone(), "add backward")?;
                }
            }
            Op::MaskMul { x, mask } => {
                if self.nodes[*x].needs_grad {
                    let xs = self.nodes[*x].value.shape();
                    let mut gx = Tensor::zeros(xs);
                    for n in 0..xs.n {
                        for c in 0..xs.c {
                            for h in 0..xs.h {
                                for w in 0..xs.w {
                                    *gx.at_mut(n, c, h, w) = g.at(n, c, h, w) * mask.at(n, 0, h, w);
                                }
                            }
                        }
                    }
                    add_grad(&mut grads[*x], gx, "elementwise_mask_mul backward")?;
                }
            }
            Op::MaskedPool {
                x,
                mode,
                mask_eff,
                counts,
                argmax,
            } => {
                if self.nodes[*x].needs_grad {
                    let xs = self.nodes[*x].value.shape();
                    let mut gx = Tensor::zeros(xs);
                    match mode {
                        PoolMode::Average => {
                            for n in 0..xs.n {
                                let inv = T::from_f64(1.0 / counts[n] as f64);
                                for c in 0..xs.c {
                                    let go = g.at(n, c, 0, 0) * inv;
                                    for h in 0..xs.h {
                                        for w in 0..xs.w {
                                            if mask_eff.at(n, 0, h, w) == T::ONE {
                                                *gx.at_mut(n, c, h, w) = go;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                        PoolMode::Max => {
                            for n in 0..xs.n {
                                for c in 0..xs.c {
                                    let idx = argmax[n * xs.c + c] as usize;
                                    gx.data_mut()[idx] += g.at(n, c, 0, 0);
                                }
                            }
                        }
                    }
                    add_grad(&mut grads[*x], gx, "masked_global_pool backward")?;
                }
            }
            Op::L2NormRows { x, norms } => {
                if self.nodes[*x].needs_grad {
                    let xs = self.nodes[*x].value.shape();
                    let d = xs.c;
                    let y = &node.value; // normalized rows
                    let mut gx = Tensor::zeros(xs);
                    let eps = T::from_f64(L2_EPS);
                    for n in 0..xs.n {
                        let norm = norms[n];
                        if !(norm > eps) {
                            // Fully masked-out (zero) row: stays zero, sends
                            // no gradient. The true 1/ε-scale Jacobian would
                            // only amplify noise from a degenerate stream.
                            continue;
                        }
                        let grow = &g.data()[n * d..(n + 1) * d];
                        let yrow = &y.data()[n * d..(n + 1) * d];
                        let mut dot = T::ZERO;
                        for (&gv, &yv) in grow.iter().zip(yrow) {
                            dot += gv * yv;
                        }
                        let out = &mut gx.data_mut()[n * d..(n + 1) * d];
                        for ((o, &gv), &yv) in out.iter_mut().zip(grow).zip(yrow) {
                            *o = (gv - yv * dot) / norm;
                        }
                    }
                    add_grad(&mut grads[*x], gx, "l2_normalize backward")?;
                }
            }
            Op::Concat { parts } => {
                let n = node.value.shape().n;
                let total = node.value.shape().c;
                let mut off = 0usize;
                for &p in parts {
                    let d = self.nodes[p].value.shape().c;
                    if self.nodes[p].needs_grad {
                        let mut gp = Tensor::zeros(Shape4::new(n, d, 1, 1));
                        for row in 0..n {
                            gp.data_mut()[row * d..(row + 1) * d].copy_from_slice(
                                &g.data()[row * total + off..row * total + off + d],
                            );
                        }
                        add_grad(&mut grads[p], gp, "concat_features backward")?;
                    }
                    off += d;
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels,
                labeled,
            } => {
                if self.nodes[*logits].needs_grad {
                    let ls = probs.shape();
                    let k = ls.c;
                    let scale = g.data()[0] * T::from_f64(1.0 / *labeled as f64);
                    let mut gx = Tensor::zeros(ls);
                    for n in 0..ls.n {
                        for h in 0..ls.h {
                            for w in 0..ls.w {
                                let lab = labels.at(n, h, w);
                                if lab == Labels::IGNORE {
                                    continue;
                                }
                                for c in 0..k {
                                    let p = probs.at(n, c, h, w);
                                    let onehot = if c as i32 == lab { T::ONE } else { T::ZERO };
                                    *gx.at_mut(n, c, h, w) = (p - onehot) * scale;
                                }
                            }
                        }
                    }
                    add_grad(&mut grads[*logits], gx, "softmax_cross_entropy backward")?;
                }
            }
            Op::WeightedSum { x, weights } => {
                if self.nodes[*x].needs_grad {
                    let go = g.data()[0];
                    let gx = weights.map(|w| w * go);
                    add_grad(&mut grads[*x], gx, "weighted_sum backward")?;
                }
            }
        }
        Ok(())
    }
}

/// Per-graph memoized binding of [`ParamStore`] entries to leaf nodes, so a
/// parameter used twice in one graph (e.g. shared weights) gets a single
/// leaf whose gradient accumulates both uses.
pub struct Binder {
    bound: Vec<Option<Var>>,
}

impl Binder {
    pub fn new<T: Scalar>(store: &ParamStore<T>) -> Self {
        Binder {
            bound: vec![None; store.len()],
        }
    }

    /// Leaf node for parameter `id`, created on first use.
    pub fn var<T: Scalar>(
        &mut self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        id: ParamId,
    ) -> Result<Var> {
        if let Some(v) = self.bound[id.0] {
            return Ok(v);
        }
        let v = g.leaf(store.get(id).value.clone())?;
        self.bound[id.0] = Some(v);
        Ok(v)
    }

    /// After a backward pass, add every bound parameter's graph gradient into
    /// its store accumulator.
    pub fn accumulate_into<T: Scalar>(
        &self,
        g: &Graph<T>,
        store: &mut ParamStore<T>,
    ) -> Result<()> {
        for (i, v) in self.bound.iter().enumerate() {
            if let Some(var) = v {
                if let Some(grad) = g.grad(*var) {
                    store.accumulate_grad(ParamId(i), grad)?;
                }
            }
        }
        Ok(())
    }
}
