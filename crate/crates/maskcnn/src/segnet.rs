//! Three-class segmentation network (background / head / torso).
//!
//! The architecture is a small fully-convolutional net with skip fusion: a
//! conv-relu-maxpool encoder downsamples to stride 8, a zero-initialized 1×1
//! score head reads class scores off the deepest features, a learned 2×
//! transposed convolution lifts them to stride 4 where a second zero-init
//! head taps the shallower features, the two are fused by element-wise sum,
//! and a learned 4× transposed convolution returns to input resolution.
//! Upsampling weights start as bilinear interpolation and stay learnable.
//!
//! Zero-initialized heads mean the net starts out predicting exactly uniform
//! scores (loss ln 3), and fusion-by-sum means zeroing one branch reproduces
//! the other branch's prediction bit for bit — both are tested below.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::maskgen::LabelMap;
use crate::tensor::{
    bilinear_kernel, derive_seed, he_normal, seeded_rng, Binder, Graph, Labels, ParamStore,
    Scalar, SgdConfig, Shape4, Sgd, Tensor, Var,
};

/// Architecture and seeding for [`FcnModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct FcnConfig {
    /// Square input side; must be a positive multiple of 8.
    pub input_size: usize,
    /// Output channels of each encoder stage.
    pub widths: Vec<usize>,
    /// Pooling stride of each encoder stage (1 = no pooling). The running
    /// product must pass through 4 and end at 8.
    pub strides: Vec<usize>,
    /// Segmentation classes; this network is specifically three-class.
    pub classes: usize,
    pub seed: u64,
}

impl Default for FcnConfig {
    fn default() -> Self {
        FcnConfig {
            input_size: 96,
            widths: vec![16, 32, 64],
            strides: vec![2, 2, 2],
            classes: 3,
            seed: 0,
        }
    }
}

impl FcnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % 8 != 0 {
            return Err(Error::Config(format!(
                "input size must be a positive multiple of 8, got {}",
                self.input_size
            )));
        }
        if self.classes != 3 {
            return Err(Error::Config(format!(
                "segmentation is three-class (background/head/torso), got {}",
                self.classes
            )));
        }
        if self.widths.is_empty() || self.widths.len() != self.strides.len() {
            return Err(Error::Config(format!(
                "need one width per stride, got {} widths and {} strides",
                self.widths.len(),
                self.strides.len()
            )));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("stage widths must be positive".into()));
        }
        let mut cum = 1usize;
        let mut saw_4 = false;
        for &s in &self.strides {
            if s == 0 {
                return Err(Error::Config("strides must be positive".into()));
            }
            cum *= s;
            if cum == 4 {
                saw_4 = true;
            }
        }
        if cum != 8 || !saw_4 {
            return Err(Error::Config(format!(
                "encoder strides {:?} must reach exactly 8 and pass through 4 \
                 (where the skip branch taps)",
                self.strides
            )));
        }
        Ok(())
    }

    /// Channel width feeding the stride-4 score head: the width of the last
    /// stage whose cumulative stride is 4.
    fn skip_width(&self) -> usize {
        let mut cum = 1;
        let mut width = 0;
        for (&w, &s) in self.widths.iter().zip(&self.strides) {
            cum *= s;
            if cum == 4 {
                width = w;
            }
        }
        width
    }
}

/// Per-class score maps at input resolution.
#[derive(Clone, Debug)]
pub struct HeatMaps {
    scores: Tensor<f32>,
}

impl HeatMaps {
    pub fn new(scores: Tensor<f32>) -> Result<HeatMaps> {
        scores.ensure_finite("heat maps")?;
        if scores.shape().n != 1 {
            return Err(Error::Shape(format!(
                "heat maps hold one image, got batch {}",
                scores.shape().n
            )));
        }
        Ok(HeatMaps { scores })
    }

    pub fn classes(&self) -> usize {
        self.scores.shape().c
    }

    pub fn score(&self, class: usize, i: usize, j: usize) -> f32 {
        self.scores.at(0, class, i, j)
    }

    pub fn scores(&self) -> &Tensor<f32> {
        &self.scores
    }

    /// Per-pixel argmax; ties break toward the lowest class index, so
    /// all-equal scores read as background.
    pub fn to_label_map(&self) -> Result<LabelMap> {
        let s = self.scores.shape();
        let mut map = LabelMap::new(s.w, s.h)?;
        for i in 0..s.h {
            for j in 0..s.w {
                let mut best = 0usize;
                for c in 1..s.c {
                    if self.scores.at(0, c, i, j) > self.scores.at(0, best, i, j) {
                        best = c;
                    }
                }
                map.set(i, j, best as u8);
            }
        }
        Ok(map)
    }
}

fn init_store<T: Scalar>(config: &FcnConfig, rng: &mut ChaCha8Rng) -> Result<ParamStore<T>> {
    let mut store = ParamStore::new();
    let mut c_in = 3usize;
    for (i, &width) in config.widths.iter().enumerate() {
        let fan_in = c_in * 9;
        store.add(
            format!("enc{i}.conv.w"),
            he_normal(Shape4::new(width, c_in, 3, 3), fan_in, rng),
        )?;
        store.add(format!("enc{i}.conv.b"), Tensor::zeros(Shape4::new(1, width, 1, 1)))?;
        c_in = width;
    }
    let deep = *config.widths.last().unwrap();
    let skip = config.skip_width();
    let k = config.classes;
    // Score heads start at zero: the untrained net is exactly uniform.
    store.add("score8.w", Tensor::zeros(Shape4::new(k, deep, 1, 1)))?;
    store.add("score8.b", Tensor::zeros(Shape4::new(1, k, 1, 1)))?;
    store.add("score4.w", Tensor::zeros(Shape4::new(k, skip, 1, 1)))?;
    store.add("score4.b", Tensor::zeros(Shape4::new(1, k, 1, 1)))?;
    store.add("up2.w", bilinear_kernel(k, 4, 2))?;
    store.add("up4.w", bilinear_kernel(k, 8, 4))?;
    Ok(store)
}

/// Graph variables for every model parameter, in one bundle so the forward
/// pass is a pure function of them. Built either from a binder (training and
/// inference on the model's own store) or from a pre-made leaf slice (the
/// gradient checker hands parameters over in store order).
struct FcnVars {
    enc: Vec<(Var, Var)>,
    score8: (Var, Var),
    score4: (Var, Var),
    up2: Var,
    up4: Var,
}

impl FcnVars {
    fn bind<T: Scalar>(
        g: &mut Graph<T>,
        binder: &mut Binder,
        store: &ParamStore<T>,
        config: &FcnConfig,
    ) -> Result<FcnVars> {
        let var = |g: &mut Graph<T>, binder: &mut Binder, name: &str| -> Result<Var> {
            let id = store
                .lookup(name)
                .ok_or_else(|| Error::Config(format!("model store is missing `{name}`")))?;
            binder.var(g, store, id)
        };
        let mut enc = Vec::new();
        for i in 0..config.widths.len() {
            let w = var(g, binder, &format!("enc{i}.conv.w"))?;
            let b = var(g, binder, &format!("enc{i}.conv.b"))?;
            enc.push((w, b));
        }
        Ok(FcnVars {
            enc,
            score8: (var(g, binder, "score8.w")?, var(g, binder, "score8.b")?),
            score4: (var(g, binder, "score4.w")?, var(g, binder, "score4.b")?),
            up2: var(g, binder, "up2.w")?,
            up4: var(g, binder, "up4.w")?,
        })
    }

    /// Interpret a flat leaf slice laid out in the store's insertion order
    /// (the order [`init_store`] adds parameters).
    fn from_slice(config: &FcnConfig, params: &[Var]) -> Result<FcnVars> {
        let stages = config.widths.len();
        if params.len() != 2 * stages + 6 {
            return Err(Error::Shape(format!(
                "expected {} parameter vars, got {}",
                2 * stages + 6,
                params.len()
            )));
        }
        let enc = (0..stages).map(|i| (params[2 * i], params[2 * i + 1])).collect();
        let base = 2 * stages;
        Ok(FcnVars {
            enc,
            score8: (params[base], params[base + 1]),
            score4: (params[base + 2], params[base + 3]),
            up2: params[base + 4],
            up4: params[base + 5],
        })
    }
}

/// Build the score maps for a batch; works for any scalar type so the same
/// code path serves f32 training and f64 gradient checking.
fn forward_scores<T: Scalar>(
    g: &mut Graph<T>,
    config: &FcnConfig,
    vars: &FcnVars,
    x: Var,
) -> Result<Var> {
    let mut cur = x;
    let mut cum = 1usize;
    let mut skip_features = None;
    for (&stride, &(w, b)) in config.strides.iter().zip(&vars.enc) {
        cur = g.conv2d(cur, w, b, 1, 1)?;
        cur = g.relu(cur)?;
        if stride > 1 {
            cur = g.maxpool2d(cur, stride, stride)?;
        }
        cum *= stride;
        if cum == 4 {
            skip_features = Some(cur);
        }
    }
    let skip_features =
        skip_features.ok_or_else(|| Error::Config("no stride-4 stage to tap".into()))?;

    let score8 = g.conv2d(cur, vars.score8.0, vars.score8.1, 1, 0)?;
    let coarse = g.conv_transpose2d(score8, vars.up2, 2)?;
    let score4 = g.conv2d(skip_features, vars.score4.0, vars.score4.1, 1, 0)?;
    let fused = g.add(coarse, score4)?;
    g.conv_transpose2d(fused, vars.up4, 4)
}

/// The segmentation model: config plus parameter store.
pub struct FcnModel {
    config: FcnConfig,
    store: ParamStore<f32>,
}

impl FcnModel {
    pub fn build(config: FcnConfig) -> Result<FcnModel> {
        config.validate()?;
        let mut rng = seeded_rng(derive_seed(config.seed, "fcn-init"));
        let store = init_store(&config, &mut rng)?;
        Ok(FcnModel { config, store })
    }

    pub fn config(&self) -> &FcnConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.iter().map(|p| p.value.shape().count()).sum()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::dataio::save_checkpoint(path, &self.store)
    }

    pub fn load(config: FcnConfig, path: &std::path::Path) -> Result<FcnModel> {
        let mut model = FcnModel::build(config)?;
        crate::dataio::load_checkpoint_into(path, &mut model.store)?;
        Ok(model)
    }

    /// Score a batch `(n, 3, s, s)`; returns `(n, classes, s, s)`.
    pub fn forward(
        &self,
        g: &mut Graph<f32>,
        binder: &mut Binder,
        x: Var,
    ) -> Result<Var> {
        let vars = FcnVars::bind(g, binder, &self.store, &self.config)?;
        forward_scores(g, &self.config, &vars, x)
    }

    /// Segment one image `(1, 3, s, s)` at the configured size.
    pub fn predict(&self, image: &Tensor<f32>) -> Result<(LabelMap, HeatMaps)> {
        let s = image.shape();
        let size = self.config.input_size;
        if s.n != 1 || s.c != 3 || s.h != size || s.w != size {
            return Err(Error::Shape(format!(
                "expected one (1, 3, {size}, {size}) image, got {s}"
            )));
        }
        let mut g = Graph::new();
        let mut binder = Binder::new(&self.store);
        let x = g.input(image.clone())?;
        let scores = self.forward(&mut g, &mut binder, x)?;
        let maps = HeatMaps::new(g.value(scores).clone())?;
        let labels = maps.to_label_map()?;
        Ok((labels, maps))
    }
}

/// Per-step loss values from a training run.
#[derive(Clone, Debug, Default)]
pub struct TrainCurve {
    pub step_losses: Vec<f64>,
}

impl TrainCurve {
    pub fn initial(&self) -> Option<f64> {
        self.step_losses.first().copied()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.step_losses.last().copied()
    }
}

/// Minibatch SGD over (image, per-pixel labels) pairs. Shuffling is driven
/// by the model seed, so a given (model, data, epochs) is fully
/// reproducible. Any non-finite loss or gradient aborts with the offending
/// step in the message.
pub fn train_fcn(
    model: &mut FcnModel,
    data: &[(Tensor<f32>, Labels)],
    sgd: &SgdConfig,
    epochs: usize,
    batch_size: usize,
) -> Result<TrainCurve> {
    if data.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let size = model.config.input_size;
    for (i, (image, labels)) in data.iter().enumerate() {
        let s = image.shape();
        if s.n != 1 || s.c != 3 || s.h != size || s.w != size {
            return Err(Error::Shape(format!(
                "training image {i} has shape {s}, expected (1, 3, {size}, {size})"
            )));
        }
        if labels.n != 1 || labels.h != size || labels.w != size {
            return Err(Error::Shape(format!(
                "training labels {i} are ({}, {}, {}), expected (1, {size}, {size})",
                labels.n, labels.h, labels.w
            )));
        }
    }

    let mut optimizer = Sgd::new(sgd.clone());
    let mut rng = seeded_rng(derive_seed(model.config.seed, "fcn-train-shuffle"));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = TrainCurve::default();

    for epoch in 0..epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        for (step, chunk) in order.chunks(batch_size).enumerate() {
            let images: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &data[i].0).collect();
            let labels: Vec<&Labels> = chunk.iter().map(|&i| &data[i].1).collect();
            let x = Tensor::concat_batch(&images)?;
            let y = Labels::concat_batch(&labels)?;

            let mut g = Graph::new();
            let mut binder = Binder::new(&model.store);
            let xv = g.input(x)?;
            let vars = FcnVars::bind(&mut g, &mut binder, &model.store, &model.config)?;
            let scores = forward_scores(&mut g, &model.config, &vars, xv)?;
            let loss = g.softmax_cross_entropy(scores, &y)?;
            g.backward(loss)
                .map_err(|e| Error::Numeric(format!("epoch {epoch} step {step}: {e}")))?;
            curve.step_losses.push(g.value(loss).data()[0] as f64);
            binder.accumulate_into(&g, &mut model.store)?;
            optimizer
                .step(&mut model.store)
                .map_err(|e| Error::Numeric(format!("epoch {epoch} step {step}: {e}")))?;
        }
    }
    Ok(curve)
}

/// Training pixel accuracy of a model against its own training labels;
/// ignored positions don't count.
pub fn pixel_accuracy(model: &FcnModel, data: &[(Tensor<f32>, Labels)]) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (image, labels) in data {
        let (map, _) = model.predict(image)?;
        for i in 0..labels.h {
            for j in 0..labels.w {
                let want = labels.at(0, i, j);
                if want == Labels::IGNORE {
                    continue;
                }
                total += 1;
                if i32::from(map.at(i, j)) == want {
                    hits += 1;
                }
            }
        }
    }
    if total == 0 {
        return Err(Error::Data("no labeled pixels to score".into()));
    }
    Ok(hits as f64 / total as f64)
}
