//! Four-stream recognition over predicted part masks.
//!
//! Each training or test image is expanded into four views: the whole frame,
//! the head crop, the torso crop, and the full-object crop, where the crops
//! come from the bounding boxes of the predicted part masks. Every view runs
//! through its own small convolutional backbone; the resulting descriptor
//! grid is filtered by the view's mask (descriptors outside the region are
//! dropped), average- and max-pooled over the survivors, ℓ2-normalized, and
//! concatenated into one per-stream feature. The four stream features join
//! into a single vector feeding a shared linear classifier, and the whole
//! stack trains end to end.
//!
//! Two reference variants isolate what the mask selection buys: a pooling
//! variant that keeps every descriptor (masks forced to all-ones), and a
//! fully connected variant that replaces selection and pooling with two
//! dense layers per stream. All three share the same backbones, trainers,
//! and checkpoint format.
//!
//! Training runs in two stages: [`finetune_stream`] fits one backbone at a
//! time under a throwaway per-stream classifier, then [`joint_train`] adopts
//! the four backbones and fits everything together under the shared
//! classifier. Features for downstream classifiers come from
//! [`McnnModel::extract_features`], which averages each image with its
//! mirror; direct prediction averages softmax probabilities instead.

use std::ops::Range;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::dataio::{load_checkpoint, save_checkpoint};
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::maskgen::{BinaryMask, LabelMap};
use crate::segnet::TrainCurve;
use crate::tensor::{
    derive_seed, he_normal, seeded_rng, Binder, Graph, Labels, ParamStore, PoolMode, Scalar, Sgd,
    SgdConfig, Shape4, Tensor, Var,
};

/// The four input views, in their fixed concatenation order.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum StreamKind {
    WholeImage,
    Head,
    Torso,
    Object,
}

impl StreamKind {
    /// Every stream, in feature-block order.
    pub const ALL: [StreamKind; 4] = [
        StreamKind::WholeImage,
        StreamKind::Head,
        StreamKind::Torso,
        StreamKind::Object,
    ];

    /// Short name used in parameter names and checkpoints.
    pub fn as_str(self) -> &'static str {
        match self {
            StreamKind::WholeImage => "whole",
            StreamKind::Head => "head",
            StreamKind::Torso => "torso",
            StreamKind::Object => "object",
        }
    }

    fn index(self) -> usize {
        match self {
            StreamKind::WholeImage => 0,
            StreamKind::Head => 1,
            StreamKind::Torso => 2,
            StreamKind::Object => 3,
        }
    }
}

/// Which model family to build and train.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Keep only the descriptors inside each stream's predicted mask.
    Masked,
    /// Keep every descriptor: the grid masks are forced to all-ones.
    Pooling,
    /// Replace selection and pooling with two fully connected layers per
    /// stream.
    FullyConnected,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Masked => "mcnn",
            Variant::Pooling => "pooling",
            Variant::FullyConnected => "fcs",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "mcnn" => Ok(Variant::Masked),
            "pooling" => Ok(Variant::Pooling),
            "fcs" => Ok(Variant::FullyConnected),
            other => Err(Error::Config(format!(
                "unknown variant `{other}` (expected mcnn, pooling, or fcs)"
            ))),
        }
    }
}

/// Which descriptor grids contribute to an extracted feature.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum FeatureLayers {
    /// The pooled output of the final encoder stage only.
    Final,
    /// Final plus the last stage's pre-pool activation, doubling the
    /// dimension.
    Both,
}

impl FeatureLayers {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureLayers::Final => "final",
            FeatureLayers::Both => "both",
        }
    }

    pub fn parse(s: &str) -> Result<FeatureLayers> {
        match s {
            "final" => Ok(FeatureLayers::Final),
            "both" => Ok(FeatureLayers::Both),
            other => Err(Error::Config(format!(
                "unknown layer set `{other}` (expected final or both)"
            ))),
        }
    }
}

/// Architecture and seeding shared by all three variants.
///
/// The same backbone runs in every stream; only the input sizes differ
/// (whole frame vs part crops), so the descriptor grids differ too. The
/// last entry of `widths` is the descriptor width `C`: stream features are
/// `2·C`, the full feature `8·C` (or `16·C` with both layers).
#[derive(Clone, Debug, PartialEq)]
pub struct McnnConfig {
    pub classes: usize,
    /// Square input side of the whole-image stream.
    pub whole_size: usize,
    /// Square input side of the head/torso/object streams.
    pub part_size: usize,
    /// Output channels of each encoder stage.
    pub widths: Vec<usize>,
    /// Pooling stride of each encoder stage (1 = no pooling).
    pub strides: Vec<usize>,
    pub seed: u64,
}

impl Default for McnnConfig {
    fn default() -> Self {
        McnnConfig {
            classes: 8,
            whole_size: 96,
            part_size: 48,
            // Total stride 8: a 12×12 whole grid and a 6×6 part grid. The
            // part grid has to stay fine enough that a nearest-resized part
            // mask can actually drop the crop's corner cells — at 3×3 the
            // corner cell centers land inside an inscribed disk and masks
            // collapse to all-ones.
            widths: vec![8, 16, 32, 64],
            strides: vec![2, 2, 1, 2],
            seed: 0,
        }
    }
}

impl McnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "need at least two classes, got {}",
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
        if self.strides.iter().any(|&s| s == 0) {
            return Err(Error::Config("strides must be positive".into()));
        }
        let total = self.total_stride();
        for (name, size) in [("whole", self.whole_size), ("part", self.part_size)] {
            if size == 0 || size % total != 0 {
                return Err(Error::Config(format!(
                    "{name} input size must be a positive multiple of the \
                     total backbone stride {total}, got {size}"
                )));
            }
        }
        Ok(())
    }

    pub fn total_stride(&self) -> usize {
        self.strides.iter().product()
    }

    /// Descriptor width `C` (the final stage's channel count).
    pub fn channels(&self) -> usize {
        *self.widths.last().expect("config has at least one stage")
    }

    pub fn input_size(&self, kind: StreamKind) -> usize {
        match kind {
            StreamKind::WholeImage => self.whole_size,
            _ => self.part_size,
        }
    }

    /// Side of the stream's descriptor grid (final stage, after pooling).
    pub fn grid(&self, kind: StreamKind) -> usize {
        self.input_size(kind) / self.total_stride()
    }

    /// Side of the last stage's pre-pool grid: the final grid scaled back up
    /// by the last pooling stride. Same channel width as the final grid.
    pub fn penultimate_grid(&self, kind: StreamKind) -> usize {
        self.grid(kind) * self.strides.last().expect("config has at least one stage")
    }

    /// Per-stream feature width: ℓ2-normalized average half plus max half.
    pub fn stream_feature_dim(&self) -> usize {
        2 * self.channels()
    }

    /// Full concatenated feature width for the pooled variants.
    pub fn feature_dim(&self, layers: FeatureLayers) -> usize {
        match layers {
            FeatureLayers::Final => 4 * self.stream_feature_dim(),
            FeatureLayers::Both => 8 * self.stream_feature_dim(),
        }
    }

    /// Width of the fully connected variant's per-stream output.
    pub fn fc_stream_dim(&self) -> usize {
        4 * self.channels()
    }

    /// Input width of the shared classifier for a given variant.
    pub fn classifier_dim(&self, variant: Variant) -> usize {
        match variant {
            Variant::FullyConnected => 4 * self.fc_stream_dim(),
            _ => self.feature_dim(FeatureLayers::Final),
        }
    }

    /// Named coordinate ranges of an extracted feature, in concatenation
    /// order: the four final-layer blocks, then (for [`FeatureLayers::Both`])
    /// the four pre-pool blocks.
    pub fn feature_blocks(&self, layers: FeatureLayers) -> Vec<(String, Range<usize>)> {
        let d = self.stream_feature_dim();
        let mut blocks = Vec::new();
        let mut offset = 0;
        for kind in StreamKind::ALL {
            blocks.push((format!("{}.final", kind.as_str()), offset..offset + d));
            offset += d;
        }
        if layers == FeatureLayers::Both {
            for kind in StreamKind::ALL {
                blocks.push((format!("{}.pre_pool", kind.as_str()), offset..offset + d));
                offset += d;
            }
        }
        blocks
    }
}

// ---------------------------------------------------------------------------
// Stream preparation

/// One stream's network input: the cropped, resized image and the matching
/// mask kept at the crop's own resolution. Grid-sized masks are derived on
/// demand so the final and pre-pool grids can both be served from one crop.
#[derive(Clone, Debug)]
pub struct StreamInput {
    image: Tensor<f32>,
    mask: BinaryMask,
}

impl StreamInput {
    pub fn new(image: Tensor<f32>, mask: BinaryMask) -> Result<StreamInput> {
        let s = image.shape();
        if s.n != 1 || s.c != 3 || s.h != s.w || s.h == 0 {
            return Err(Error::Shape(format!(
                "stream input must be one square (1, 3, h, h) image, got {s}"
            )));
        }
        Ok(StreamInput { image, mask })
    }

    pub fn image(&self) -> &Tensor<f32> {
        &self.image
    }

    /// The region mask at crop resolution.
    pub fn mask(&self) -> &BinaryMask {
        &self.mask
    }

    /// The region mask resampled to a descriptor grid.
    pub fn grid_mask(&self, grid: usize) -> Result<BinaryMask> {
        self.mask.resize_nearest(grid, grid)
    }
}

/// The four prepared stream inputs of one image, in [`StreamKind::ALL`]
/// order.
#[derive(Clone, Debug)]
pub struct StreamSet {
    inputs: [StreamInput; 4],
}

impl StreamSet {
    pub fn new(inputs: [StreamInput; 4]) -> StreamSet {
        StreamSet { inputs }
    }

    pub fn get(&self, kind: StreamKind) -> &StreamInput {
        &self.inputs[kind.index()]
    }
}

/// One prepared training example: four stream inputs plus the class label.
#[derive(Clone, Debug)]
pub struct McnnSample {
    pub streams: StreamSet,
    pub label: usize,
}

/// Expand an image and its predicted label map into the four stream inputs.
///
/// The whole-image stream sees the full frame resized to the configured
/// size, with the object mask (head ∪ torso) as its region. Each part
/// stream crops the image at its mask's bounding box, resizes the crop, and
/// carries the identically cropped mask. Degenerate masks fall back per the
/// mask rules (empty mask → full-image box, with a warning), so preparation
/// itself never fails on content.
pub fn prepare_streams(
    config: &McnnConfig,
    image: &RgbImage,
    predicted: &LabelMap,
) -> Result<StreamSet> {
    config.validate()?;
    if predicted.width() != image.width() || predicted.height() != image.height() {
        return Err(Error::Shape(format!(
            "label map is {}×{} but the image is {}×{}",
            predicted.width(),
            predicted.height(),
            image.width(),
            image.height()
        )));
    }
    let (head, torso, object) = predicted.to_part_masks();
    let whole = StreamInput::new(
        image
            .resize_bilinear(config.whole_size, config.whole_size)?
            .to_tensor(),
        object.clone(),
    )?;
    let part_stream = |mask: &BinaryMask| -> Result<StreamInput> {
        let bb = mask.to_bbox();
        let crop = image.crop(bb.x_min, bb.y_min, bb.x_max, bb.y_max)?;
        StreamInput::new(
            crop.resize_bilinear(config.part_size, config.part_size)?
                .to_tensor(),
            mask.crop(&bb)?,
        )
    };
    Ok(StreamSet {
        inputs: [
            whole,
            part_stream(&head)?,
            part_stream(&torso)?,
            part_stream(&object)?,
        ],
    })
}

/// Prepare every (image, predicted map, label) triple and its horizontal
/// mirror, doubling the set.
///
/// Mirroring happens at the image level — the flipped image and map are
/// prepared from scratch — because crop-and-resize geometry is not exactly
/// mirror-equivariant, so flipping already-prepared tensors would not match.
pub fn prepare_training_set(
    config: &McnnConfig,
    items: &[(RgbImage, LabelMap, usize)],
) -> Result<Vec<McnnSample>> {
    config.validate()?;
    let mut out = Vec::with_capacity(items.len() * 2);
    for (i, (image, map, label)) in items.iter().enumerate() {
        if *label >= config.classes {
            return Err(Error::Data(format!(
                "item {i} has label {label}, but the model has {} classes",
                config.classes
            )));
        }
        out.push(McnnSample {
            streams: prepare_streams(config, image, map)?,
            label: *label,
        });
        out.push(McnnSample {
            streams: prepare_streams(
                config,
                &image.flipped_horizontal(),
                &map.flipped_horizontal(),
            )?,
            label: *label,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Parameters

fn add_backbone<T: Scalar>(
    store: &mut ParamStore<T>,
    config: &McnnConfig,
    kind: StreamKind,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let prefix = kind.as_str();
    let mut c_in = 3usize;
    for (i, &width) in config.widths.iter().enumerate() {
        store.add(
            format!("{prefix}.enc{i}.conv.w"),
            he_normal(Shape4::new(width, c_in, 3, 3), c_in * 9, rng),
        )?;
        store.add(
            format!("{prefix}.enc{i}.conv.b"),
            Tensor::zeros(Shape4::new(1, width, 1, 1)),
        )?;
        c_in = width;
    }
    Ok(())
}

fn add_fc_layers<T: Scalar>(
    store: &mut ParamStore<T>,
    config: &McnnConfig,
    kind: StreamKind,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let prefix = kind.as_str();
    let grid = config.grid(kind);
    let flat = config.channels() * grid * grid;
    let hidden = config.fc_stream_dim();
    store.add(
        format!("{prefix}.fc1.w"),
        he_normal(Shape4::new(hidden, flat, 1, 1), flat, rng),
    )?;
    store.add(
        format!("{prefix}.fc1.b"),
        Tensor::zeros(Shape4::new(1, hidden, 1, 1)),
    )?;
    store.add(
        format!("{prefix}.fc2.w"),
        he_normal(Shape4::new(hidden, hidden, 1, 1), hidden, rng),
    )?;
    store.add(
        format!("{prefix}.fc2.b"),
        Tensor::zeros(Shape4::new(1, hidden, 1, 1)),
    )?;
    Ok(())
}

/// All four backbones (plus per-stream dense layers for the fully connected
/// variant) and the zero-initialized shared classifier. Zero init means a
/// fresh model scores every class equally: training starts at loss ln K.
fn init_joint_store<T: Scalar>(
    config: &McnnConfig,
    variant: Variant,
    rng: &mut ChaCha8Rng,
) -> Result<ParamStore<T>> {
    let mut store = ParamStore::new();
    for kind in StreamKind::ALL {
        add_backbone(&mut store, config, kind, rng)?;
        if variant == Variant::FullyConnected {
            add_fc_layers(&mut store, config, kind, rng)?;
        }
    }
    let dim = config.classifier_dim(variant);
    store.add(
        "joint.fc.w",
        Tensor::zeros(Shape4::new(config.classes, dim, 1, 1)),
    )?;
    store.add(
        "joint.fc.b",
        Tensor::zeros(Shape4::new(1, config.classes, 1, 1)),
    )?;
    Ok(store)
}

/// One stream's backbone plus a throwaway classifier for per-stream
/// fine-tuning. The classifier is dropped by [`save_backbone`].
fn init_finetune_store(
    config: &McnnConfig,
    variant: Variant,
    kind: StreamKind,
) -> Result<ParamStore<f32>> {
    let tag = format!("finetune-init/{}", kind.as_str());
    let mut rng = seeded_rng(derive_seed(config.seed, &tag));
    let mut store = ParamStore::new();
    add_backbone(&mut store, config, kind, &mut rng)?;
    let dim = match variant {
        Variant::FullyConnected => {
            add_fc_layers(&mut store, config, kind, &mut rng)?;
            config.fc_stream_dim()
        }
        _ => config.stream_feature_dim(),
    };
    store.add(
        format!("{}.tmp_fc.w", kind.as_str()),
        Tensor::zeros(Shape4::new(config.classes, dim, 1, 1)),
    )?;
    store.add(
        format!("{}.tmp_fc.b", kind.as_str()),
        Tensor::zeros(Shape4::new(1, config.classes, 1, 1)),
    )?;
    Ok(store)
}

/// Graph variables for one stream's parameters.
struct StreamVars {
    enc: Vec<(Var, Var)>,
    fc1: Option<(Var, Var)>,
    fc2: Option<(Var, Var)>,
}

impl StreamVars {
    fn bind<T: Scalar>(
        g: &mut Graph<T>,
        binder: &mut Binder,
        store: &ParamStore<T>,
        config: &McnnConfig,
        variant: Variant,
        kind: StreamKind,
    ) -> Result<StreamVars> {
        let var = |g: &mut Graph<T>, binder: &mut Binder, name: String| -> Result<Var> {
            let id = store
                .lookup(&name)
                .ok_or_else(|| Error::Config(format!("model store is missing `{name}`")))?;
            binder.var(g, store, id)
        };
        let prefix = kind.as_str();
        let mut enc = Vec::new();
        for i in 0..config.widths.len() {
            let w = var(g, binder, format!("{prefix}.enc{i}.conv.w"))?;
            let b = var(g, binder, format!("{prefix}.enc{i}.conv.b"))?;
            enc.push((w, b));
        }
        let (fc1, fc2) = if variant == Variant::FullyConnected {
            (
                Some((
                    var(g, binder, format!("{prefix}.fc1.w"))?,
                    var(g, binder, format!("{prefix}.fc1.b"))?,
                )),
                Some((
                    var(g, binder, format!("{prefix}.fc2.w"))?,
                    var(g, binder, format!("{prefix}.fc2.b"))?,
                )),
            )
        } else {
            (None, None)
        };
        Ok(StreamVars { enc, fc1, fc2 })
    }
}

/// Graph variables for the whole joint model.
struct McnnVars {
    streams: Vec<StreamVars>,
    joint: (Var, Var),
}

impl McnnVars {
    fn bind<T: Scalar>(
        g: &mut Graph<T>,
        binder: &mut Binder,
        store: &ParamStore<T>,
        config: &McnnConfig,
        variant: Variant,
    ) -> Result<McnnVars> {
        let mut streams = Vec::with_capacity(4);
        for kind in StreamKind::ALL {
            streams.push(StreamVars::bind(g, binder, store, config, variant, kind)?);
        }
        let look = |name: &str| -> Result<_> {
            store
                .lookup(name)
                .ok_or_else(|| Error::Config(format!("model store is missing `{name}`")))
        };
        let w = binder.var(g, store, look("joint.fc.w")?)?;
        let b = binder.var(g, store, look("joint.fc.b")?)?;
        Ok(McnnVars {
            streams,
            joint: (w, b),
        })
    }

    /// Interpret a flat leaf slice laid out in the store's insertion order
    /// (the order [`init_joint_store`] adds parameters). Only the gradient
    /// checker binds parameters this way.
    #[cfg(test)]
    fn from_slice(config: &McnnConfig, variant: Variant, params: &[Var]) -> Result<McnnVars> {
        let stages = config.widths.len();
        let per_stream = 2 * stages
            + if variant == Variant::FullyConnected {
                4
            } else {
                0
            };
        let want = 4 * per_stream + 2;
        if params.len() != want {
            return Err(Error::Shape(format!(
                "expected {want} parameter vars, got {}",
                params.len()
            )));
        }
        let mut streams = Vec::with_capacity(4);
        let mut base = 0usize;
        for _ in 0..4 {
            let enc = (0..stages)
                .map(|i| (params[base + 2 * i], params[base + 2 * i + 1]))
                .collect();
            let mut off = base + 2 * stages;
            let (fc1, fc2) = if variant == Variant::FullyConnected {
                let pair1 = (params[off], params[off + 1]);
                let pair2 = (params[off + 2], params[off + 3]);
                off += 4;
                (Some(pair1), Some(pair2))
            } else {
                (None, None)
            };
            streams.push(StreamVars { enc, fc1, fc2 });
            base = off;
        }
        Ok(McnnVars {
            streams,
            joint: (params[base], params[base + 1]),
        })
    }
}

// ---------------------------------------------------------------------------
// Forward passes

/// Run one backbone. Returns the final pooled activation and the last
/// stage's pre-pool activation (same channel width, one pooling step
/// larger), which serves as the second descriptor grid for feature
/// extraction.
fn backbone_forward<T: Scalar>(
    g: &mut Graph<T>,
    strides: &[usize],
    enc: &[(Var, Var)],
    x: Var,
) -> Result<(Var, Var)> {
    let mut cur = x;
    let mut pre_pool = None;
    for (i, (&stride, &(w, b))) in strides.iter().zip(enc).enumerate() {
        cur = g.conv2d(cur, w, b, 1, 1)?;
        cur = g.relu(cur)?;
        if i + 1 == strides.len() {
            pre_pool = Some(cur);
        }
        if stride > 1 {
            cur = g.maxpool2d(cur, stride, stride)?;
        }
    }
    let pre_pool = pre_pool.ok_or_else(|| Error::Config("encoder has no stages".into()))?;
    Ok((cur, pre_pool))
}

/// Selection, pooling, and normalization over one descriptor grid: zero the
/// masked-out cells, average- and max-pool what's kept, ℓ2-normalize each
/// half, concatenate to `2·C`.
fn pooled_feature<T: Scalar>(g: &mut Graph<T>, act: Var, mask: &Tensor<T>) -> Result<Var> {
    let kept = g.mask_mul(act, mask)?;
    let avg = g.masked_global_pool(kept, mask, PoolMode::Average)?;
    let max = g.masked_global_pool(kept, mask, PoolMode::Max)?;
    let avg = g.l2_normalize_rows(avg)?;
    let max = g.l2_normalize_rows(max)?;
    g.concat_features(&[avg, max])
}

/// The fully connected variant's stream head: flatten the final grid and run
/// two relu'd dense layers to a `4·C` vector. Masks play no part.
fn fc_feature<T: Scalar>(g: &mut Graph<T>, sv: &StreamVars, pooled: Var) -> Result<Var> {
    let missing = || Error::Config("stream has no fully connected layers".into());
    let (w1, b1) = sv.fc1.ok_or_else(missing)?;
    let (w2, b2) = sv.fc2.ok_or_else(missing)?;
    let flat = g.flatten(pooled)?;
    let h = g.linear(flat, w1, b1)?;
    let h = g.relu(h)?;
    let h = g.linear(h, w2, b2)?;
    g.relu(h)
}

/// Concatenated per-stream features for a batch: four final-layer blocks in
/// [`StreamKind::ALL`] order, then (when `penult_masks` is given) the four
/// pre-pool blocks in the same order.
fn forward_features<T: Scalar>(
    g: &mut Graph<T>,
    config: &McnnConfig,
    variant: Variant,
    vars: &McnnVars,
    xs: &[Var],
    final_masks: &[Tensor<T>],
    penult_masks: Option<&[Tensor<T>]>,
) -> Result<Var> {
    if xs.len() != 4 || final_masks.len() != 4 || penult_masks.is_some_and(|m| m.len() != 4) {
        return Err(Error::Shape(format!(
            "all four streams must be present, got {} inputs and {} masks",
            xs.len(),
            final_masks.len()
        )));
    }
    if variant == Variant::FullyConnected && penult_masks.is_some() {
        return Err(Error::Config(
            "the fully connected variant keeps no descriptor grid to revisit".into(),
        ));
    }
    let mut finals = Vec::with_capacity(8);
    let mut penults = Vec::with_capacity(4);
    for (i, sv) in vars.streams.iter().enumerate() {
        let (last, pre_pool) = backbone_forward(g, &config.strides, &sv.enc, xs[i])?;
        if variant == Variant::FullyConnected {
            finals.push(fc_feature(g, sv, last)?);
        } else {
            finals.push(pooled_feature(g, last, &final_masks[i])?);
            if let Some(pm) = penult_masks {
                penults.push(pooled_feature(g, pre_pool, &pm[i])?);
            }
        }
    }
    finals.extend(penults);
    g.concat_features(&finals)
}

/// Class logits for a batch: the final-layer feature through the shared
/// classifier.
fn forward_logits<T: Scalar>(
    g: &mut Graph<T>,
    config: &McnnConfig,
    variant: Variant,
    vars: &McnnVars,
    xs: &[Var],
    final_masks: &[Tensor<T>],
) -> Result<Var> {
    let feat = forward_features(g, config, variant, vars, xs, final_masks, None)?;
    g.linear(feat, vars.joint.0, vars.joint.1)
}

// ---------------------------------------------------------------------------
// Batch assembly

/// One sample's `(1, 1, grid, grid)` mask tensor for a stream: the nearest-
/// resized region mask for the masked variant, all-ones for the others.
fn mask_tensor(input: &StreamInput, grid: usize, variant: Variant) -> Result<Tensor<f32>> {
    match variant {
        Variant::Masked => Ok(input.grid_mask(grid)?.to_tensor()),
        Variant::Pooling | Variant::FullyConnected => Tensor::from_vec(
            Shape4::new(1, 1, grid, grid),
            vec![1.0; grid * grid],
        ),
    }
}

/// Batched image inputs, one graph var per stream in [`StreamKind::ALL`]
/// order.
fn stream_image_batch(g: &mut Graph<f32>, sets: &[&StreamSet]) -> Result<Vec<Var>> {
    StreamKind::ALL
        .iter()
        .map(|&kind| {
            let images: Vec<&Tensor<f32>> = sets.iter().map(|s| s.get(kind).image()).collect();
            g.input(Tensor::concat_batch(&images)?)
        })
        .collect()
}

/// Batched grid masks, one tensor per stream. `penultimate` selects the
/// pre-pool grid size instead of the final one.
fn stream_mask_batch(
    config: &McnnConfig,
    variant: Variant,
    sets: &[&StreamSet],
    penultimate: bool,
) -> Result<Vec<Tensor<f32>>> {
    StreamKind::ALL
        .iter()
        .map(|&kind| {
            let grid = if penultimate {
                config.penultimate_grid(kind)
            } else {
                config.grid(kind)
            };
            let per: Vec<Tensor<f32>> = sets
                .iter()
                .map(|s| mask_tensor(s.get(kind), grid, variant))
                .collect::<Result<_>>()?;
            let refs: Vec<&Tensor<f32>> = per.iter().collect();
            Tensor::concat_batch(&refs)
        })
        .collect()
}

fn check_streams(config: &McnnConfig, set: &StreamSet, what: &str) -> Result<()> {
    for kind in StreamKind::ALL {
        let s = set.get(kind).image().shape();
        let want = config.input_size(kind);
        if s.n != 1 || s.c != 3 || s.h != want || s.w != want {
            return Err(Error::Shape(format!(
                "{what}: {} stream input is {s}, expected (1, 3, {want}, {want})",
                kind.as_str()
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// The model

/// A four-stream model: config, variant, and parameter store.
pub struct McnnModel {
    config: McnnConfig,
    variant: Variant,
    store: ParamStore<f32>,
}

impl McnnModel {
    pub fn build(config: McnnConfig, variant: Variant) -> Result<McnnModel> {
        config.validate()?;
        let mut rng = seeded_rng(derive_seed(config.seed, "mcnn-init"));
        let store = init_joint_store(&config, variant, &mut rng)?;
        Ok(McnnModel {
            config,
            variant,
            store,
        })
    }

    pub fn config(&self) -> &McnnConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.variant
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

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.store)
    }

    /// Restore a model whose checkpoint matches `config` and `variant`
    /// exactly (same parameter names and shapes).
    pub fn load(config: McnnConfig, variant: Variant, path: &Path) -> Result<McnnModel> {
        let mut model = McnnModel::build(config, variant)?;
        crate::dataio::load_checkpoint_into(path, &mut model.store)?;
        Ok(model)
    }

    /// Copy a per-stream checkpoint's parameters into this model by name.
    /// Every checkpoint entry must have a matching slot; parameters the
    /// checkpoint doesn't mention (other streams, the classifier) are left
    /// alone.
    pub fn adopt_backbone(&mut self, path: &Path) -> Result<()> {
        for (name, tensor) in load_checkpoint(path)? {
            let id = self.store.lookup(&name).ok_or_else(|| {
                Error::Config(format!(
                    "checkpoint parameter `{name}` has no slot in this model"
                ))
            })?;
            let param = self.store.get_mut(id);
            if param.value.shape() != tensor.shape() {
                return Err(Error::Shape(format!(
                    "checkpoint parameter `{name}` is {}, the model expects {}",
                    tensor.shape(),
                    param.value.shape()
                )));
            }
            param.value = tensor;
        }
        Ok(())
    }

    /// Raw classifier scores for a batch of prepared stream sets.
    fn batch_logits(&self, sets: &[&StreamSet]) -> Result<Tensor<f32>> {
        for set in sets {
            check_streams(&self.config, set, "logits")?;
        }
        let mut g = Graph::new();
        let mut binder = Binder::new(&self.store);
        let vars = McnnVars::bind(&mut g, &mut binder, &self.store, &self.config, self.variant)?;
        let xs = stream_image_batch(&mut g, sets)?;
        let masks = stream_mask_batch(&self.config, self.variant, sets, false)?;
        let logits = forward_logits(&mut g, &self.config, self.variant, &vars, &xs, &masks)?;
        Ok(g.value(logits).clone())
    }

    /// The concatenated feature of one prepared stream set, without flip
    /// averaging.
    pub fn sample_features(&self, streams: &StreamSet, layers: FeatureLayers) -> Result<Vec<f32>> {
        check_streams(&self.config, streams, "features")?;
        let sets = [streams];
        let mut g = Graph::new();
        let mut binder = Binder::new(&self.store);
        let vars = McnnVars::bind(&mut g, &mut binder, &self.store, &self.config, self.variant)?;
        let xs = stream_image_batch(&mut g, &sets)?;
        let final_masks = stream_mask_batch(&self.config, self.variant, &sets, false)?;
        let penult_masks = match layers {
            FeatureLayers::Final => None,
            FeatureLayers::Both => Some(stream_mask_batch(&self.config, self.variant, &sets, true)?),
        };
        let feat = forward_features(
            &mut g,
            &self.config,
            self.variant,
            &vars,
            &xs,
            &final_masks,
            penult_masks.as_deref(),
        )?;
        Ok(g.value(feat).data().to_vec())
    }

    /// The image's feature averaged with its horizontal mirror's feature.
    /// Both passes prepare their streams from scratch, so each side sees its
    /// own crops.
    pub fn extract_features(
        &self,
        image: &RgbImage,
        map: &LabelMap,
        layers: FeatureLayers,
    ) -> Result<Vec<f32>> {
        let a = self.sample_features(&prepare_streams(&self.config, image, map)?, layers)?;
        let mirrored = prepare_streams(
            &self.config,
            &image.flipped_horizontal(),
            &map.flipped_horizontal(),
        )?;
        let b = self.sample_features(&mirrored, layers)?;
        Ok(a.iter().zip(&b).map(|(&x, &y)| 0.5 * (x + y)).collect())
    }

    /// Predicted class and class probabilities, averaging the softmax of the
    /// image with that of its horizontal mirror. Ties break toward the
    /// lowest class index.
    pub fn predict(&self, image: &RgbImage, map: &LabelMap) -> Result<(usize, Vec<f64>)> {
        let a = self.batch_logits(&[&prepare_streams(&self.config, image, map)?])?;
        let mirrored = prepare_streams(
            &self.config,
            &image.flipped_horizontal(),
            &map.flipped_horizontal(),
        )?;
        let b = self.batch_logits(&[&mirrored])?;
        let pa = softmax_probs(a.data());
        let pb = softmax_probs(b.data());
        let probs: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| 0.5 * (x + y)).collect();
        let mut best = 0;
        for k in 1..probs.len() {
            if probs[k] > probs[best] {
                best = k;
            }
        }
        Ok((best, probs))
    }

    /// Fraction of items whose flip-averaged prediction matches the label.
    pub fn accuracy(&self, items: &[(RgbImage, LabelMap, usize)]) -> Result<f64> {
        if items.is_empty() {
            return Err(Error::Data("no items to score".into()));
        }
        let mut hits = 0usize;
        for (image, map, label) in items {
            let (pred, _) = self.predict(image, map)?;
            if pred == *label {
                hits += 1;
            }
        }
        Ok(hits as f64 / items.len() as f64)
    }
}

fn softmax_probs(logits: &[f32]) -> Vec<f64> {
    let m = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let exps: Vec<f64> = logits.iter().map(|&v| (v as f64 - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

// ---------------------------------------------------------------------------
// Training

/// Minibatch SGD over the whole four-stream model (all backbones plus the
/// shared classifier). Shuffling derives from the model seed, so a given
/// (model, samples, epochs) is fully reproducible.
pub fn joint_train(
    model: &mut McnnModel,
    samples: &[McnnSample],
    sgd: &SgdConfig,
    epochs: usize,
    batch_size: usize,
) -> Result<TrainCurve> {
    if samples.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    for (i, sample) in samples.iter().enumerate() {
        check_streams(&model.config, &sample.streams, &format!("sample {i}"))?;
        if sample.label >= model.config.classes {
            return Err(Error::Data(format!(
                "sample {i} has label {}, but the model has {} classes",
                sample.label, model.config.classes
            )));
        }
    }

    let mut optimizer = Sgd::new(sgd.clone());
    let mut rng = seeded_rng(derive_seed(model.config.seed, "mcnn-train-shuffle"));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut curve = TrainCurve::default();

    for epoch in 0..epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        for (step, chunk) in order.chunks(batch_size).enumerate() {
            let sets: Vec<&StreamSet> = chunk.iter().map(|&i| &samples[i].streams).collect();
            let classes: Vec<usize> = chunk.iter().map(|&i| samples[i].label).collect();
            let labels = Labels::from_classes(&classes);

            let mut g = Graph::new();
            let mut binder = Binder::new(&model.store);
            let vars =
                McnnVars::bind(&mut g, &mut binder, &model.store, &model.config, model.variant)?;
            let xs = stream_image_batch(&mut g, &sets)?;
            let masks = stream_mask_batch(&model.config, model.variant, &sets, false)?;
            let logits = forward_logits(&mut g, &model.config, model.variant, &vars, &xs, &masks)?;
            let loss = g.softmax_cross_entropy(logits, &labels)?;
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

/// Graph variables for one stream plus its throwaway classifier.
struct TuneVars {
    stream: StreamVars,
    tmp: (Var, Var),
}

impl TuneVars {
    fn bind(
        g: &mut Graph<f32>,
        binder: &mut Binder,
        store: &ParamStore<f32>,
        config: &McnnConfig,
        variant: Variant,
        kind: StreamKind,
    ) -> Result<TuneVars> {
        let stream = StreamVars::bind(g, binder, store, config, variant, kind)?;
        let look = |name: String| -> Result<_> {
            store
                .lookup(&name)
                .ok_or_else(|| Error::Config(format!("model store is missing `{name}`")))
        };
        let w = binder.var(g, store, look(format!("{}.tmp_fc.w", kind.as_str()))?)?;
        let b = binder.var(g, store, look(format!("{}.tmp_fc.b", kind.as_str()))?)?;
        Ok(TuneVars {
            stream,
            tmp: (w, b),
        })
    }
}

/// One stream's logits under the throwaway classifier.
fn tune_forward(
    g: &mut Graph<f32>,
    config: &McnnConfig,
    variant: Variant,
    vars: &TuneVars,
    x: Var,
    mask: &Tensor<f32>,
) -> Result<Var> {
    let (last, _) = backbone_forward(g, &config.strides, &vars.stream.enc, x)?;
    let feat = match variant {
        Variant::FullyConnected => fc_feature(g, &vars.stream, last)?,
        _ => pooled_feature(g, last, mask)?,
    };
    g.linear(feat, vars.tmp.0, vars.tmp.1)
}

/// Fit one stream's backbone under a temporary classifier, from a fresh
/// seeded initialization. Returns the trained store (backbone plus the
/// throwaway head) and the loss curve; [`save_backbone`] writes the
/// checkpoint the joint model later adopts.
pub fn finetune_stream(
    config: &McnnConfig,
    variant: Variant,
    kind: StreamKind,
    samples: &[McnnSample],
    sgd: &SgdConfig,
    epochs: usize,
    batch_size: usize,
) -> Result<(ParamStore<f32>, TrainCurve)> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let size = config.input_size(kind);
    for (i, sample) in samples.iter().enumerate() {
        let s = sample.streams.get(kind).image().shape();
        if s.n != 1 || s.c != 3 || s.h != size || s.w != size {
            return Err(Error::Shape(format!(
                "sample {i}: {} stream input is {s}, expected (1, 3, {size}, {size})",
                kind.as_str()
            )));
        }
        if sample.label >= config.classes {
            return Err(Error::Data(format!(
                "sample {i} has label {}, but the model has {} classes",
                sample.label, config.classes
            )));
        }
    }

    let mut store = init_finetune_store(config, variant, kind)?;
    let mut optimizer = Sgd::new(sgd.clone());
    let shuffle_tag = format!("finetune-shuffle/{}", kind.as_str());
    let mut rng = seeded_rng(derive_seed(config.seed, &shuffle_tag));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut curve = TrainCurve::default();
    let grid = config.grid(kind);

    for epoch in 0..epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        for (step, chunk) in order.chunks(batch_size).enumerate() {
            let images: Vec<&Tensor<f32>> = chunk
                .iter()
                .map(|&i| samples[i].streams.get(kind).image())
                .collect();
            let per_mask: Vec<Tensor<f32>> = chunk
                .iter()
                .map(|&i| mask_tensor(samples[i].streams.get(kind), grid, variant))
                .collect::<Result<_>>()?;
            let mask_refs: Vec<&Tensor<f32>> = per_mask.iter().collect();
            let mask = Tensor::concat_batch(&mask_refs)?;
            let classes: Vec<usize> = chunk.iter().map(|&i| samples[i].label).collect();
            let labels = Labels::from_classes(&classes);

            let mut g = Graph::new();
            let mut binder = Binder::new(&store);
            let x = g.input(Tensor::concat_batch(&images)?)?;
            let vars = TuneVars::bind(&mut g, &mut binder, &store, config, variant, kind)?;
            let logits = tune_forward(&mut g, config, variant, &vars, x, &mask)?;
            let loss = g.softmax_cross_entropy(logits, &labels)?;
            g.backward(loss)
                .map_err(|e| Error::Numeric(format!("epoch {epoch} step {step}: {e}")))?;
            curve.step_losses.push(g.value(loss).data()[0] as f64);
            binder.accumulate_into(&g, &mut store)?;
            optimizer
                .step(&mut store)
                .map_err(|e| Error::Numeric(format!("epoch {epoch} step {step}: {e}")))?;
        }
    }
    Ok((store, curve))
}

/// Write a fine-tuned stream's checkpoint with the throwaway classifier
/// stripped, leaving exactly what [`McnnModel::adopt_backbone`] expects.
pub fn save_backbone(store: &ParamStore<f32>, path: &Path) -> Result<()> {
    let mut kept = ParamStore::new();
    for p in store.iter() {
        if p.name.contains(".tmp_fc.") {
            continue;
        }
        kept.add(p.name.clone(), p.value.clone())?;
    }
    save_checkpoint(path, &kept)
}
