//! Post-hoc classification and compression on extracted features:
//! one-vs-all ℓ2-regularized logistic regression, and SVD whitening that
//! compresses features to a chosen dimensionality.
//!
//! Both trainers are deterministic: logistic regression minimizes a smooth
//! convex objective by gradient descent with backtracking line search (no
//! randomness, so the same features always give the same model), and the
//! whitening basis comes from a Jacobi eigendecomposition of the smaller
//! Gram matrix — at these scales a direct method is simpler and faster than
//! anything iterative. Both models round-trip through small versioned
//! binary files.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::dataio::FeatureSet;
use crate::error::{Error, Result};
use crate::warn;

pub const LR_MAGIC: &[u8; 4] = b"MCLR";
pub const LR_VERSION: u32 = 1;
pub const WHITEN_MAGIC: &[u8; 4] = b"MCWH";
pub const WHITEN_VERSION: u32 = 1;

/// Settings for the one-vs-all logistic regression trainer.
///
/// The penalty on each binary model is `(1 / (2·c_lr)) · ‖w‖²` added to the
/// summed logistic loss; the bias is never regularized. Larger `c_lr` means
/// weaker regularization.
#[derive(Clone, Debug, PartialEq)]
pub struct LrConfig {
    pub c_lr: f64,
    pub max_iters: usize,
    /// Stop once the gradient's ℓ2 norm falls below this.
    pub tolerance: f64,
}

impl Default for LrConfig {
    fn default() -> Self {
        LrConfig {
            c_lr: 1.0,
            max_iters: 500,
            tolerance: 1e-6,
        }
    }
}

impl LrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c_lr > 0.0 && self.c_lr.is_finite()) {
            return Err(Error::Config(format!(
                "c_lr must be a positive finite number, got {}",
                self.c_lr
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be positive".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Config(format!(
                "tolerance must be positive, got {}",
                self.tolerance
            )));
        }
        Ok(())
    }
}

/// One-vs-all logistic regression: one weight vector and bias per class,
/// scored independently; prediction is the argmax score.
#[derive(Clone, Debug, PartialEq)]
pub struct LrModel {
    classes: usize,
    dim: usize,
    /// Row-major `classes × dim`.
    weights: Vec<f64>,
    biases: Vec<f64>,
}

impl LrModel {
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Raw per-class scores `wₖ·x + bₖ` for one feature vector.
    pub fn score(&self, feature: &[f32]) -> Result<Vec<f64>> {
        if feature.len() != self.dim {
            return Err(Error::Shape(format!(
                "feature has {} coordinates, the model expects {}",
                feature.len(),
                self.dim
            )));
        }
        Ok((0..self.classes)
            .map(|k| {
                let w = &self.weights[k * self.dim..(k + 1) * self.dim];
                let dot: f64 = w
                    .iter()
                    .zip(feature)
                    .map(|(&wi, &xi)| wi * xi as f64)
                    .sum();
                dot + self.biases[k]
            })
            .collect())
    }

    /// Predicted class and scores; ties break toward the lowest index.
    pub fn predict(&self, feature: &[f32]) -> Result<(usize, Vec<f64>)> {
        let scores = self.score(feature)?;
        let mut best = 0;
        for k in 1..scores.len() {
            if scores[k] > scores[best] {
                best = k;
            }
        }
        Ok((best, scores))
    }

    /// Predicted class for every row of a feature set.
    pub fn predict_set(&self, set: &FeatureSet) -> Result<Vec<usize>> {
        (0..set.count()).map(|i| Ok(self.predict(set.row(i))?.0)).collect()
    }

    /// Fraction of rows whose prediction matches the stored label.
    pub fn accuracy(&self, set: &FeatureSet) -> Result<f64> {
        if set.count() == 0 {
            return Err(Error::Data("no rows to score".into()));
        }
        let hits = self
            .predict_set(set)?
            .iter()
            .zip(set.labels())
            .filter(|(&p, l)| p == *l)
            .count();
        Ok(hits as f64 / set.count() as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(LR_MAGIC).map_err(|e| Error::io(path, e))?;
        write_u32(&mut w, path, LR_VERSION)?;
        write_u32(&mut w, path, self.classes as u32)?;
        write_u32(&mut w, path, self.dim as u32)?;
        write_f64s(&mut w, path, &self.weights)?;
        write_f64s(&mut w, path, &self.biases)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<LrModel> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        check_header(&mut r, path, LR_MAGIC, LR_VERSION, "classifier")?;
        let classes = read_u32(&mut r, path, "class count")? as usize;
        let dim = read_u32(&mut r, path, "feature dim")? as usize;
        if classes < 2 || dim == 0 {
            return Err(fmt_err(
                path,
                format!("implausible header: {classes} classes × {dim} dims"),
            ));
        }
        let weights = read_f64s(&mut r, path, classes * dim, "weights")?;
        let biases = read_f64s(&mut r, path, classes, "biases")?;
        expect_eof(&mut r, path)?;
        Ok(LrModel {
            classes,
            dim,
            weights,
            biases,
        })
    }
}

/// Train one binary ℓ2-regularized logistic model by gradient descent with
/// Armijo backtracking. Returns the weights, bias, and the objective value
/// after every iteration (strictly non-increasing).
fn fit_binary(
    set: &FeatureSet,
    targets: &[f64],
    config: &LrConfig,
) -> (Vec<f64>, f64, Vec<f64>) {
    let n = set.count();
    let d = set.dim();
    let mut w = vec![0.0f64; d];
    let mut b = 0.0f64;

    // ln(1 + e^z) without overflow.
    let softplus = |z: f64| {
        if z > 0.0 {
            z + (-z).exp().ln_1p()
        } else {
            z.exp().ln_1p()
        }
    };
    let objective = |w: &[f64], b: f64| -> f64 {
        let mut loss = 0.0;
        for i in 0..n {
            let s: f64 = w
                .iter()
                .zip(set.row(i))
                .map(|(&wi, &xi)| wi * xi as f64)
                .sum::<f64>()
                + b;
            loss += softplus(-targets[i] * s);
        }
        loss + w.iter().map(|v| v * v).sum::<f64>() / (2.0 * config.c_lr)
    };

    let mut curve = Vec::new();
    let mut obj = objective(&w, b);
    for _ in 0..config.max_iters {
        // ∇ loss: −yᵢ·σ(−yᵢ sᵢ) per sample, plus w / c_lr.
        let mut gw = vec![0.0f64; d];
        let mut gb = 0.0f64;
        for i in 0..n {
            let s: f64 = w
                .iter()
                .zip(set.row(i))
                .map(|(&wi, &xi)| wi * xi as f64)
                .sum::<f64>()
                + b;
            let z = -targets[i] * s;
            // σ(z), stable on both tails.
            let sig = if z > 0.0 {
                1.0 / (1.0 + (-z).exp())
            } else {
                let e = z.exp();
                e / (1.0 + e)
            };
            let coef = -targets[i] * sig;
            for (g, &xi) in gw.iter_mut().zip(set.row(i)) {
                *g += coef * xi as f64;
            }
            gb += coef;
        }
        for (g, &wi) in gw.iter_mut().zip(&w) {
            *g += wi / config.c_lr;
        }
        let grad_sq = gw.iter().map(|g| g * g).sum::<f64>() + gb * gb;
        if grad_sq.sqrt() < config.tolerance {
            break;
        }

        // Backtrack until the Armijo condition holds; the objective is
        // smooth and convex, so this always terminates with a decrease.
        let mut step = 1.0f64;
        loop {
            let wt: Vec<f64> = w.iter().zip(&gw).map(|(&wi, &g)| wi - step * g).collect();
            let bt = b - step * gb;
            let next = objective(&wt, bt);
            if next <= obj - 0.25 * step * grad_sq || step < 1e-12 {
                w = wt;
                b = bt;
                obj = next;
                break;
            }
            step *= 0.5;
        }
        curve.push(obj);
    }
    (w, b, curve)
}

/// Fit one-vs-all logistic regression on a labeled feature set. The class
/// count is `max label + 1`; every class gets its own binary model against
/// the rest.
pub fn train_lr_ova(set: &FeatureSet, config: &LrConfig) -> Result<LrModel> {
    config.validate()?;
    if set.count() == 0 {
        return Err(Error::Data("feature set is empty".into()));
    }
    for i in 0..set.count() {
        if set.row(i).iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("row {i} has a non-finite coordinate")));
        }
    }
    let classes = set.labels().max().expect("non-empty") + 1;
    let distinct = {
        let mut seen = vec![false; classes];
        for l in set.labels() {
            seen[l] = true;
        }
        seen.iter().filter(|&&s| s).count()
    };
    if distinct < 2 {
        return Err(Error::Data(
            "all rows share one label; a classifier needs at least two classes".into(),
        ));
    }

    let dim = set.dim();
    let mut weights = Vec::with_capacity(classes * dim);
    let mut biases = Vec::with_capacity(classes);
    for k in 0..classes {
        let targets: Vec<f64> = set
            .labels()
            .map(|l| if l == k { 1.0 } else { -1.0 })
            .collect();
        let (w, b, curve) = fit_binary(set, &targets, config);
        if curve.len() == config.max_iters {
            warn::emit(&format!(
                "class {k}: logistic solver hit the iteration cap before reaching tolerance"
            ));
        }
        weights.extend(w);
        biases.push(b);
    }
    Ok(LrModel {
        classes,
        dim,
        weights,
        biases,
    })
}

// ---------------------------------------------------------------------------
// SVD whitening

/// A fitted whitening transform: center, project onto the top right singular
/// vectors, and rescale each coordinate to unit variance.
#[derive(Clone, Debug, PartialEq)]
pub struct WhiteningModel {
    /// Training-feature mean, length `d`.
    mean: Vec<f64>,
    /// Row-major `k × d`; each row is one orthonormal basis vector.
    basis: Vec<f64>,
    /// Top-`k` singular values of the centered training matrix, descending.
    singular: Vec<f64>,
    /// Number of training rows the model was fitted on.
    samples: usize,
    /// Guard added to each coordinate's scale so rank-deficient directions
    /// divide by something finite.
    epsilon: f64,
}

pub const WHITEN_EPSILON: f64 = 1e-8;

impl WhiteningModel {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.singular.len()
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular
    }

    /// Whiten one feature vector: subtract the mean, project onto the
    /// basis, and divide coordinate `i` by `σᵢ/√(n−1) + ε`.
    pub fn apply(&self, feature: &[f32]) -> Result<Vec<f32>> {
        let d = self.input_dim();
        if feature.len() != d {
            return Err(Error::Shape(format!(
                "feature has {} coordinates, the whitening model expects {d}",
                feature.len()
            )));
        }
        let centered: Vec<f64> = feature
            .iter()
            .zip(&self.mean)
            .map(|(&x, &m)| x as f64 - m)
            .collect();
        let denom = ((self.samples as f64 - 1.0).max(1.0)).sqrt();
        Ok((0..self.output_dim())
            .map(|i| {
                let row = &self.basis[i * d..(i + 1) * d];
                let proj: f64 = row.iter().zip(&centered).map(|(&b, &x)| b * x).sum();
                (proj / (self.singular[i] / denom + self.epsilon)) as f32
            })
            .collect())
    }

    /// Whiten every row of a feature set, keeping the labels.
    pub fn apply_set(&self, set: &FeatureSet) -> Result<FeatureSet> {
        let mut out = FeatureSet::new(self.output_dim())?;
        for i in 0..set.count() {
            out.push(&self.apply(set.row(i))?, set.label(i))?;
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(WHITEN_MAGIC).map_err(|e| Error::io(path, e))?;
        write_u32(&mut w, path, WHITEN_VERSION)?;
        write_u32(&mut w, path, self.input_dim() as u32)?;
        write_u32(&mut w, path, self.output_dim() as u32)?;
        write_u32(&mut w, path, self.samples as u32)?;
        write_f64s(&mut w, path, &[self.epsilon])?;
        write_f64s(&mut w, path, &self.mean)?;
        write_f64s(&mut w, path, &self.basis)?;
        write_f64s(&mut w, path, &self.singular)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<WhiteningModel> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        check_header(&mut r, path, WHITEN_MAGIC, WHITEN_VERSION, "whitening model")?;
        let d = read_u32(&mut r, path, "input dim")? as usize;
        let k = read_u32(&mut r, path, "output dim")? as usize;
        let samples = read_u32(&mut r, path, "sample count")? as usize;
        if d == 0 || k == 0 || k > d {
            return Err(fmt_err(
                path,
                format!("implausible header: {d} dims compressed to {k}"),
            ));
        }
        let epsilon = read_f64s(&mut r, path, 1, "epsilon")?[0];
        let mean = read_f64s(&mut r, path, d, "mean")?;
        let basis = read_f64s(&mut r, path, k * d, "basis")?;
        let singular = read_f64s(&mut r, path, k, "singular values")?;
        expect_eof(&mut r, path)?;
        Ok(WhiteningModel {
            mean,
            basis,
            singular,
            samples,
            epsilon,
        })
    }
}

/// Eigendecomposition of a symmetric matrix by the cyclic Jacobi method.
/// Returns eigenvalues (descending) and matching eigenvectors as rows.
/// Deterministic, and accurate to near machine precision at these sizes.
fn jacobi_eigen(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    // v starts as the identity; rotations accumulate so row i of v ends up
    // as the eigenvector of eigenvalue i.
    let mut v = vec![0.0f64; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let off = |a: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                s += a[i * n + j] * a[i * n + j];
            }
        }
        s
    };
    let scale: f64 = (0..n).map(|i| a[i * n + i].abs()).fold(off(&a).sqrt(), f64::max);
    let stop = (scale.max(1.0) * 1e-14).powi(2) * (n * n) as f64;

    for _sweep in 0..64 {
        if off(&a) <= stop {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for i in 0..n {
                    let aip = a[i * n + p];
                    let aiq = a[i * n + q];
                    a[i * n + p] = c * aip - s * aiq;
                    a[i * n + q] = s * aip + c * aiq;
                }
                for j in 0..n {
                    let apj = a[p * n + j];
                    let aqj = a[q * n + j];
                    a[p * n + j] = c * apj - s * aqj;
                    a[q * n + j] = s * apj + c * aqj;
                }
                for j in 0..n {
                    let vpj = v[p * n + j];
                    let vqj = v[q * n + j];
                    v[p * n + j] = c * vpj - s * vqj;
                    v[q * n + j] = s * vpj + c * vqj;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        a[j * n + j]
            .partial_cmp(&a[i * n + i])
            .expect("eigenvalues are finite")
    });
    let eigenvalues: Vec<f64> = order.iter().map(|&i| a[i * n + i]).collect();
    let mut eigenvectors = vec![0.0f64; n * n];
    for (row, &i) in order.iter().enumerate() {
        eigenvectors[row * n..(row + 1) * n].copy_from_slice(&v[i * n..(i + 1) * n]);
    }
    (eigenvalues, eigenvectors)
}

/// Extend `basis` (rows of length `d`, orthonormal) with deterministic
/// completions until it has `k` rows: standard basis vectors orthogonalized
/// against what's already there.
fn complete_basis(basis: &mut Vec<f64>, d: usize, k: usize) {
    let mut rows = basis.len() / d;
    let mut e = 0usize;
    while rows < k && e < d {
        let mut cand = vec![0.0f64; d];
        cand[e] = 1.0;
        e += 1;
        // Two Gram–Schmidt passes keep the result orthogonal to working
        // precision even when the candidate is nearly in the span.
        for _ in 0..2 {
            for r in 0..rows {
                let row = &basis[r * d..(r + 1) * d];
                let dot: f64 = row.iter().zip(&cand).map(|(&b, &c)| b * c).sum();
                for (ci, &bi) in cand.iter_mut().zip(row) {
                    *ci -= dot * bi;
                }
            }
        }
        let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.5 {
            for ci in cand.iter_mut() {
                *ci /= norm;
            }
            basis.extend(cand);
            rows += 1;
        }
    }
}

/// Fit an SVD whitening transform on training features.
///
/// The centered matrix's top-`k` right singular vectors come from an
/// eigendecomposition of whichever Gram matrix is smaller (`d×d` or `n×n`).
/// Directions with vanishing singular value — rank deficiency — get
/// deterministic orthonormal completions, and the ε in the scale keeps
/// their coordinates finite.
pub fn fit_svd_whitening(set: &FeatureSet, k: usize) -> Result<WhiteningModel> {
    let n = set.count();
    let d = set.dim();
    if k == 0 || k > n.min(d) {
        return Err(Error::Config(format!(
            "output dim must be in 1..={} for {n} samples of dim {d}, got {k}",
            n.min(d)
        )));
    }
    for i in 0..n {
        if set.row(i).iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("row {i} has a non-finite coordinate")));
        }
    }

    let mut mean = vec![0.0f64; d];
    for i in 0..n {
        for (m, &x) in mean.iter_mut().zip(set.row(i)) {
            *m += x as f64;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    // Centered data, row-major n × d.
    let mut x = vec![0.0f64; n * d];
    for i in 0..n {
        for (j, &v) in set.row(i).iter().enumerate() {
            x[i * d + j] = v as f64 - mean[j];
        }
    }

    let mut basis = Vec::with_capacity(k * d);
    let mut singular = Vec::with_capacity(k);
    if d <= n {
        // Right singular vectors are eigenvectors of XᵀX.
        let mut gram = vec![0.0f64; d * d];
        for r in 0..n {
            let row = &x[r * d..(r + 1) * d];
            for i in 0..d {
                for j in i..d {
                    gram[i * d + j] += row[i] * row[j];
                }
            }
        }
        for i in 0..d {
            for j in 0..i {
                gram[i * d + j] = gram[j * d + i];
            }
        }
        let (eigenvalues, eigenvectors) = jacobi_eigen(gram, d);
        for i in 0..k {
            singular.push(eigenvalues[i].max(0.0).sqrt());
            basis.extend_from_slice(&eigenvectors[i * d..(i + 1) * d]);
        }
    } else {
        // Eigenvectors u of XXᵀ give right singular vectors v = Xᵀu / σ.
        let mut gram = vec![0.0f64; n * n];
        for i in 0..n {
            for j in i..n {
                let dot: f64 = x[i * d..(i + 1) * d]
                    .iter()
                    .zip(&x[j * d..(j + 1) * d])
                    .map(|(&a, &b)| a * b)
                    .sum();
                gram[i * n + j] = dot;
                gram[j * n + i] = dot;
            }
        }
        let (eigenvalues, eigenvectors) = jacobi_eigen(gram, n);
        let sigma_max = eigenvalues[0].max(0.0).sqrt();
        for i in 0..k {
            let sigma = eigenvalues[i].max(0.0).sqrt();
            singular.push(sigma);
            if sigma > sigma_max * 1e-9 && sigma > 0.0 {
                let u = &eigenvectors[i * n..(i + 1) * n];
                let mut vrow = vec![0.0f64; d];
                for (r, &ur) in u.iter().enumerate() {
                    for (vj, &xj) in vrow.iter_mut().zip(&x[r * d..(r + 1) * d]) {
                        *vj += ur * xj;
                    }
                }
                for vj in vrow.iter_mut() {
                    *vj /= sigma;
                }
                basis.extend(vrow);
            }
        }
        // Vanishing directions can't be recovered from u; fill the basis
        // out deterministically instead.
        complete_basis(&mut basis, d, k);
    }

    Ok(WhiteningModel {
        mean,
        basis,
        singular,
        samples: n,
        epsilon: WHITEN_EPSILON,
    })
}

// ---------------------------------------------------------------------------
// Shared binary-file helpers

fn fmt_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

fn check_header(
    r: &mut impl Read,
    path: &Path,
    magic: &[u8; 4],
    version: u32,
    what: &str,
) -> Result<()> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| fmt_err(path, format!("truncated while reading the {what} magic")))?;
    if &buf != magic {
        return Err(fmt_err(path, format!("not a {what} file (bad magic)")));
    }
    let got = read_u32(r, path, "version")?;
    if got != version {
        return Err(fmt_err(
            path,
            format!("unsupported {what} version {got} (expected {version})"),
        ));
    }
    Ok(())
}

fn write_u32(w: &mut impl Write, path: &Path, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))
}

fn read_u32(r: &mut impl Read, path: &Path, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| fmt_err(path, format!("truncated while reading {what}")))?;
    Ok(u32::from_le_bytes(buf))
}

fn write_f64s(w: &mut impl Write, path: &Path, values: &[f64]) -> Result<()> {
    for &v in values {
        w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn read_f64s(r: &mut impl Read, path: &Path, count: usize, what: &str) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; count * 8];
    r.read_exact(&mut bytes)
        .map_err(|_| fmt_err(path, format!("truncated while reading {what}")))?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

fn expect_eof(r: &mut impl Read, path: &Path) -> Result<()> {
    let mut buf = [0u8; 1];
    match r.read(&mut buf) {
        Ok(0) => Ok(()),
        Ok(_) => Err(fmt_err(path, "trailing bytes after the last record")),
        Err(e) => Err(Error::io(path, e)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_rng;
    use rand_distr::{Distribution, StandardNormal};

    fn blob_set(per_class: usize, seed: u64) -> FeatureSet {
        // Two well-separated 2-D gaussian blobs.
        let mut rng = seeded_rng(seed);
        let mut set = FeatureSet::new(2).unwrap();
        for label in 0..2usize {
            let center = if label == 0 { -2.0f32 } else { 2.0 };
            for _ in 0..per_class {
                let dx: f64 = StandardNormal.sample(&mut rng);
                let dy: f64 = StandardNormal.sample(&mut rng);
                set.push(
                    &[center + 0.3 * dx as f32, center + 0.3 * dy as f32],
                    label,
                )
                .unwrap();
            }
        }
        set
    }

    #[test]
    fn separable_blobs_are_classified_perfectly() {
        let set = blob_set(20, 1);
        let model = train_lr_ova(&set, &LrConfig::default()).unwrap();
        assert_eq!(model.classes(), 2);
        assert_eq!(model.accuracy(&set).unwrap(), 1.0);
    }

    #[test]
    fn the_objective_decreases_monotonically() {
        let set = blob_set(15, 2);
        let targets: Vec<f64> = set.labels().map(|l| if l == 0 { 1.0 } else { -1.0 }).collect();
        let config = LrConfig::default();
        let (w, _, curve) = fit_binary(&set, &targets, &config);
        assert!(!curve.is_empty());
        for pair in curve.windows(2) {
            assert!(pair[1] <= pair[0], "objective rose: {} -> {}", pair[0], pair[1]);
        }
        assert!(w.iter().all(|v| v.is_finite()));
        assert!(
            curve.len() < config.max_iters,
            "solver should reach tolerance on an easy problem"
        );
    }

    #[test]
    fn identical_features_predict_the_majority_class() {
        let mut set = FeatureSet::new(3).unwrap();
        for i in 0..10 {
            set.push(&[0.5, -1.0, 2.0], usize::from(i >= 3)).unwrap();
        }
        let model = train_lr_ova(&set, &LrConfig::default()).unwrap();
        for i in 0..set.count() {
            assert_eq!(model.predict(set.row(i)).unwrap().0, 1);
        }
    }

    #[test]
    fn a_huge_penalty_drives_the_weights_to_zero() {
        let set = blob_set(20, 3);
        let tiny_c = LrConfig {
            c_lr: 1e-9,
            ..LrConfig::default()
        };
        let model = train_lr_ova(&set, &tiny_c).unwrap();
        let norm: f64 = model.weights.iter().map(|w| w * w).sum::<f64>().sqrt();
        assert!(norm < 1e-3, "weights should vanish, got norm {norm}");
    }

    #[test]
    fn exact_score_ties_go_to_the_lowest_class() {
        let model = LrModel {
            classes: 3,
            dim: 2,
            weights: vec![1.0, 0.0, 1.0, 0.0, 0.5, 0.5],
            biases: vec![0.0, 0.0, 0.0],
        };
        // Classes 0 and 1 score identically on any input.
        let (pred, scores) = model.predict(&[2.0, 1.0]).unwrap();
        assert_eq!(scores[0], scores[1]);
        assert_eq!(pred, 0);
        assert!(model.score(&[1.0]).is_err(), "dim mismatch");
    }

    #[test]
    fn classifiers_round_trip_through_their_file() {
        let dir = tempfile::tempdir().unwrap();
        let set = blob_set(10, 4);
        let model = train_lr_ova(&set, &LrConfig::default()).unwrap();
        let path = dir.path().join("model.mclr");
        model.save(&path).unwrap();
        assert_eq!(LrModel::load(&path).unwrap(), model);

        let bogus = dir.path().join("bogus.mclr");
        std::fs::write(&bogus, b"MCWH\x01\x00\x00\x00").unwrap();
        assert!(LrModel::load(&bogus).is_err(), "wrong magic");
        let truncated = dir.path().join("short.mclr");
        std::fs::write(&truncated, &std::fs::read(&path).unwrap()[..20]).unwrap();
        assert!(LrModel::load(&truncated).is_err());
    }

    #[test]
    fn degenerate_training_inputs_are_rejected() {
        let empty = FeatureSet::new(2).unwrap();
        assert!(train_lr_ova(&empty, &LrConfig::default()).is_err());

        let mut one_class = FeatureSet::new(2).unwrap();
        for _ in 0..5 {
            one_class.push(&[1.0, 2.0], 3).unwrap();
        }
        assert!(train_lr_ova(&one_class, &LrConfig::default()).is_err());

        let mut poisoned = FeatureSet::new(2).unwrap();
        poisoned.push(&[1.0, f32::NAN], 0).unwrap();
        poisoned.push(&[0.0, 1.0], 1).unwrap();
        assert!(train_lr_ova(&poisoned, &LrConfig::default()).is_err());

        let bad = LrConfig {
            c_lr: 0.0,
            ..LrConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn jacobi_recovers_a_known_spectrum() {
        // Symmetric 8×8 built from a known eigenbasis.
        let n = 8;
        let mut rng = seeded_rng(5);
        let mut a = vec![0.0f64; n * n];
        for i in 0..n {
            for j in i..n {
                let v: f64 = StandardNormal.sample(&mut rng);
                a[i * n + j] = v;
                a[j * n + i] = v;
            }
        }
        let trace: f64 = (0..n).map(|i| a[i * n + i]).sum();
        let (vals, vecs) = jacobi_eigen(a.clone(), n);
        assert!((vals.iter().sum::<f64>() - trace).abs() < 1e-10);
        for e in 0..n {
            // A·v − λ·v ≈ 0 for every pair.
            for i in 0..n {
                let av: f64 = (0..n).map(|j| a[i * n + j] * vecs[e * n + j]).sum();
                assert!(
                    (av - vals[e] * vecs[e * n + i]).abs() < 1e-9,
                    "eigenpair {e} residual"
                );
            }
        }
        for w in vals.windows(2) {
            assert!(w[0] >= w[1], "eigenvalues must be sorted descending");
        }
    }

    fn random_set(n: usize, d: usize, seed: u64, stretch: &[f64]) -> FeatureSet {
        let mut rng = seeded_rng(seed);
        let mut set = FeatureSet::new(d).unwrap();
        for i in 0..n {
            let row: Vec<f32> = (0..d)
                .map(|j| {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    (v * stretch[j % stretch.len()] + j as f64 * 0.1) as f32
                })
                .collect();
            set.push(&row, i % 2).unwrap();
        }
        set
    }

    fn basis_gram_is_identity(model: &WhiteningModel) {
        let d = model.input_dim();
        let k = model.output_dim();
        for i in 0..k {
            for j in 0..k {
                let dot: f64 = model.basis[i * d..(i + 1) * d]
                    .iter()
                    .zip(&model.basis[j * d..(j + 1) * d])
                    .map(|(&a, &b)| a * b)
                    .sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (dot - want).abs() < 1e-5,
                    "basis gram [{i}][{j}] = {dot}"
                );
            }
        }
    }

    #[test]
    fn whitening_produces_an_orthonormal_basis_on_both_gram_paths() {
        // d ≤ n: the d×d Gram path.
        let wide = fit_svd_whitening(&random_set(30, 8, 6, &[3.0, 1.0, 0.2]), 8).unwrap();
        basis_gram_is_identity(&wide);
        // d > n: the n×n Gram path.
        let tall = fit_svd_whitening(&random_set(8, 30, 7, &[2.0, 0.5]), 6).unwrap();
        basis_gram_is_identity(&tall);
    }

    #[test]
    fn full_rank_whitening_yields_identity_covariance() {
        let set = random_set(200, 5, 8, &[4.0, 2.0, 1.0, 0.5, 0.25]);
        let model = fit_svd_whitening(&set, 5).unwrap();
        let white = model.apply_set(&set).unwrap();
        let n = white.count();
        let mut mean = vec![0.0f64; 5];
        for i in 0..n {
            for (m, &v) in mean.iter_mut().zip(white.row(i)) {
                *m += v as f64 / n as f64;
            }
        }
        for a in 0..5 {
            for b in 0..5 {
                let mut cov = 0.0f64;
                for i in 0..n {
                    cov += (white.row(i)[a] as f64 - mean[a]) * (white.row(i)[b] as f64 - mean[b]);
                }
                cov /= n as f64 - 1.0;
                let want = if a == b { 1.0 } else { 0.0 };
                assert!(
                    (cov - want).abs() < 1e-3,
                    "whitened covariance [{a}][{b}] = {cov}"
                );
            }
        }
    }

    #[test]
    fn isotropic_data_keeps_unit_variance() {
        let mut rng = seeded_rng(9);
        let mut set = FeatureSet::new(4).unwrap();
        for i in 0..10000 {
            let row: Vec<f32> = (0..4)
                .map(|_| {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    v as f32
                })
                .collect();
            set.push(&row, i % 2).unwrap();
        }
        let model = fit_svd_whitening(&set, 4).unwrap();
        let white = model.apply_set(&set).unwrap();
        for j in 0..4 {
            let mut sum = 0.0f64;
            let mut sq = 0.0f64;
            for i in 0..white.count() {
                let v = white.row(i)[j] as f64;
                sum += v;
                sq += v * v;
            }
            let n = white.count() as f64;
            let var = (sq - sum * sum / n) / (n - 1.0);
            assert!((var - 1.0).abs() < 0.1, "coordinate {j} variance {var}");
        }
    }

    #[test]
    fn duplicate_columns_do_not_blow_up() {
        let mut rng = seeded_rng(10);
        let mut set = FeatureSet::new(4).unwrap();
        for i in 0..50 {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            let c: f64 = StandardNormal.sample(&mut rng);
            // Column 3 duplicates column 2 exactly: rank 3 data in 4 dims.
            set.push(&[a as f32, b as f32, c as f32, c as f32], i % 2)
                .unwrap();
        }
        let model = fit_svd_whitening(&set, 4).unwrap();
        assert!(
            model.singular_values()[3] < 1e-4 * model.singular_values()[0],
            "duplicate column must produce a vanishing singular value"
        );
        let white = model.apply_set(&set).unwrap();
        for i in 0..white.count() {
            assert!(white.row(i).iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn duplicate_rows_exercise_the_basis_completion() {
        // n < d with a repeated row: the n×n path sees a vanishing
        // eigenvalue and must complete the basis deterministically.
        let mut set = FeatureSet::new(12).unwrap();
        let mut rng = seeded_rng(11);
        let mut last = vec![0.0f32; 12];
        for i in 0..6 {
            let row: Vec<f32> = (0..12)
                .map(|_| {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    v as f32
                })
                .collect();
            set.push(&row, i % 2).unwrap();
            last = row;
        }
        set.push(&last, 0).unwrap(); // 7 rows, rank ≤ 6, and centering costs one more.
        let model = fit_svd_whitening(&set, 6).unwrap();
        basis_gram_is_identity(&model);
    }

    #[test]
    fn the_training_mean_whitens_to_zero() {
        let set = random_set(40, 6, 12, &[1.0, 2.0]);
        let model = fit_svd_whitening(&set, 3).unwrap();
        let mean_f32: Vec<f32> = model.mean.iter().map(|&m| m as f32).collect();
        for v in model.apply(&mean_f32).unwrap() {
            assert!(v.abs() < 1e-3, "mean maps to {v}, expected ~0");
        }
    }

    #[test]
    fn whitening_is_linear_around_the_mean() {
        let set = random_set(30, 5, 13, &[1.5, 0.7]);
        let model = fit_svd_whitening(&set, 4).unwrap();
        let mean: Vec<f64> = model.mean.clone();
        let u: Vec<f64> = vec![0.3, -1.0, 0.5, 2.0, -0.25];
        let v: Vec<f64> = vec![1.0, 0.25, -0.75, 0.1, 0.6];
        let shift = |coeff_u: f64, coeff_v: f64| -> Vec<f32> {
            (0..5)
                .map(|j| (mean[j] + coeff_u * u[j] + coeff_v * v[j]) as f32)
                .collect()
        };
        let fu = model.apply(&shift(1.0, 0.0)).unwrap();
        let fv = model.apply(&shift(0.0, 1.0)).unwrap();
        let fboth = model.apply(&shift(2.0, -1.0)).unwrap();
        for j in 0..4 {
            let expect = 2.0 * fu[j] as f64 - fv[j] as f64;
            assert!(
                (fboth[j] as f64 - expect).abs() < 1e-3,
                "coordinate {j}: {} vs {expect}",
                fboth[j]
            );
        }
    }

    #[test]
    fn whitening_models_round_trip_through_their_file() {
        let dir = tempfile::tempdir().unwrap();
        let set = random_set(20, 6, 14, &[1.0, 3.0]);
        let model = fit_svd_whitening(&set, 3).unwrap();
        let path = dir.path().join("whiten.mcwh");
        model.save(&path).unwrap();
        let loaded = WhiteningModel::load(&path).unwrap();
        assert_eq!(loaded, model);
        assert_eq!(
            loaded.apply(set.row(0)).unwrap(),
            model.apply(set.row(0)).unwrap()
        );

        assert!(WhiteningModel::load(&dir.path().join("missing")).is_err());
        let bogus = dir.path().join("bogus.mcwh");
        std::fs::write(&bogus, b"MCLR\x01\x00\x00\x00").unwrap();
        assert!(WhiteningModel::load(&bogus).is_err());
    }

    #[test]
    fn impossible_whitening_requests_are_rejected() {
        let set = random_set(10, 4, 15, &[1.0]);
        assert!(fit_svd_whitening(&set, 0).is_err());
        assert!(fit_svd_whitening(&set, 5).is_err(), "k > dim");
        let tiny = random_set(3, 8, 16, &[1.0]);
        assert!(fit_svd_whitening(&tiny, 4).is_err(), "k > sample count");
        let model = fit_svd_whitening(&set, 2).unwrap();
        assert!(model.apply(&[1.0, 2.0]).is_err(), "dim mismatch");
    }
}
