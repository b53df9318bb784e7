//! Part masks from keypoint annotations.
//!
//! Fifteen named bird keypoints split into a head set and a torso set (two
//! shared neck points appear in both). Each set's visible points span a
//! convex hull; the torso hull is rasterized as class 2 and the head hull
//! stamped over it as class 1, head winning in the overlap — the hulls
//! always touch at the shared neck points and a per-pixel segmentation
//! target needs one class per pixel. Everything else is background (0).
//!
//! Degenerate hulls (fewer than three non-collinear visible points) are
//! dilated to a radius-2 disk or stadium so a sparse annotation still yields
//! a usable mask. Rasterization tests pixel centers `(j+0.5, i+0.5)`,
//! boundary inclusive.

mod geometry;

pub use geometry::{convex_hull, cross, hull_covers, Hull, Point, DEGENERATE_DILATION_RADIUS};

use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{self, RgbImage};
use crate::tensor::{Labels, Scalar, Shape4, Tensor};

// ---------------------------------------------------------------------------
// Keypoints

/// The fifteen named keypoints, in canonical order.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum KeypointName {
    Beak,
    Forehead,
    Crown,
    LeftEye,
    RightEye,
    Nape,
    Throat,
    Back,
    Breast,
    Belly,
    LeftLeg,
    RightLeg,
    LeftWing,
    RightWing,
    Tail,
}

use KeypointName::*;

impl KeypointName {
    pub const ALL: [KeypointName; 15] = [
        Beak, Forehead, Crown, LeftEye, RightEye, Nape, Throat, Back, Breast, Belly, LeftLeg,
        RightLeg, LeftWing, RightWing, Tail,
    ];

    /// The head group: beak, forehead, crown, both eyes, and the shared neck
    /// points (nape, throat).
    pub const HEAD: [KeypointName; 7] = [Beak, Forehead, Crown, LeftEye, RightEye, Nape, Throat];

    /// The torso group: body, legs, wings, tail, and the same two shared
    /// neck points.
    pub const TORSO: [KeypointName; 10] = [
        Back, Breast, Belly, LeftLeg, RightLeg, LeftWing, RightWing, Tail, Nape, Throat,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Beak => "beak",
            Forehead => "forehead",
            Crown => "crown",
            LeftEye => "left_eye",
            RightEye => "right_eye",
            Nape => "nape",
            Throat => "throat",
            Back => "back",
            Breast => "breast",
            Belly => "belly",
            LeftLeg => "left_leg",
            RightLeg => "right_leg",
            LeftWing => "left_wing",
            RightWing => "right_wing",
            Tail => "tail",
        }
    }

    pub fn parse(s: &str) -> Option<KeypointName> {
        KeypointName::ALL.into_iter().find(|n| n.as_str() == s)
    }
}

/// One annotated point: pixel coordinates plus a visibility flag. Invisible
/// points take no part in any geometry.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

impl Keypoint {
    pub fn hidden() -> Self {
        Keypoint {
            x: 0.0,
            y: 0.0,
            visible: false,
        }
    }

    pub fn at(x: f64, y: f64) -> Self {
        Keypoint {
            x,
            y,
            visible: true,
        }
    }
}

/// The full fifteen-point annotation of one image.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct KeypointSet {
    points: [Keypoint; 15],
}

impl Default for KeypointSet {
    fn default() -> Self {
        Self::new_hidden()
    }
}

impl KeypointSet {
    /// All points invisible.
    pub fn new_hidden() -> Self {
        KeypointSet {
            points: [Keypoint::hidden(); 15],
        }
    }

    pub fn get(&self, name: KeypointName) -> Keypoint {
        self.points[name as usize]
    }

    pub fn set(&mut self, name: KeypointName, kp: Keypoint) {
        self.points[name as usize] = kp;
    }

    /// Visible members of the given name subset, as bare points.
    pub fn visible_points(&self, names: &[KeypointName]) -> Vec<Point> {
        names
            .iter()
            .map(|&n| self.get(n))
            .filter(|kp| kp.visible)
            .map(|kp| Point::new(kp.x, kp.y))
            .collect()
    }

    /// Mirror across the vertical axis of a width-`width` image: `x ↦ width
    /// − x`. Purely geometric — left/right names keep their coordinates'
    /// new positions, no semantic relabeling.
    pub fn flipped_horizontal(&self, width: usize) -> KeypointSet {
        let mut out = *self;
        for kp in out.points.iter_mut() {
            kp.x = width as f64 - kp.x;
        }
        out
    }

    /// Every visible point must lie within `[0, w] × [0, h]`.
    pub fn validate_in_bounds(&self, w: usize, h: usize) -> Result<()> {
        for name in KeypointName::ALL {
            let kp = self.get(name);
            if kp.visible
                && !(kp.x >= 0.0 && kp.x <= w as f64 && kp.y >= 0.0 && kp.y <= h as f64)
            {
                return Err(Error::Data(format!(
                    "keypoint `{}` at ({}, {}) outside {w}×{h} image",
                    name.as_str(),
                    kp.x,
                    kp.y
                )));
            }
        }
        Ok(())
    }
}

/// Visible head and torso point lists (nape and throat feed both).
pub fn split_keypoints(kps: &KeypointSet) -> (Vec<Point>, Vec<Point>) {
    (
        kps.visible_points(&KeypointName::HEAD),
        kps.visible_points(&KeypointName::TORSO),
    )
}

// ---------------------------------------------------------------------------
// Label maps and masks

pub const CLASS_BACKGROUND: u8 = 0;
pub const CLASS_HEAD: u8 = 1;
pub const CLASS_TORSO: u8 = 2;

/// Per-pixel class map: 0 background, 1 head, 2 torso.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Config(format!(
                "label map dimensions must be positive, got {width}×{height}"
            )));
        }
        Ok(LabelMap {
            width,
            height,
            data: vec![CLASS_BACKGROUND; width * height],
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> u8 {
        self.data[i * self.width + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, class: u8) {
        debug_assert!(class <= CLASS_TORSO);
        self.data[i * self.width + j] = class;
    }

    /// Stamp `class` on every pixel whose center the hull covers.
    pub fn stamp_hull(&mut self, hull: &Hull, class: u8) {
        let margin = if hull.degenerate {
            DEGENERATE_DILATION_RADIUS
        } else {
            0.0
        };
        let (mut x0, mut y0) = (f64::INFINITY, f64::INFINITY);
        let (mut x1, mut y1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for v in &hull.vertices {
            x0 = x0.min(v.x);
            y0 = y0.min(v.y);
            x1 = x1.max(v.x);
            y1 = y1.max(v.y);
        }
        let j_lo = ((x0 - margin - 1.0).floor().max(0.0)) as usize;
        let i_lo = ((y0 - margin - 1.0).floor().max(0.0)) as usize;
        let j_hi = (((x1 + margin + 1.0).ceil() as usize).max(1) - 1).min(self.width - 1);
        let i_hi = (((y1 + margin + 1.0).ceil() as usize).max(1) - 1).min(self.height - 1);
        for i in i_lo..=i_hi {
            for j in j_lo..=j_hi {
                if hull_covers(hull, Point::new(j as f64 + 0.5, i as f64 + 0.5)) {
                    self.set(i, j, class);
                }
            }
        }
    }

    /// Mirror left-right.
    pub fn flipped_horizontal(&self) -> LabelMap {
        let mut out = self.clone();
        for i in 0..self.height {
            for j in 0..self.width {
                out.set(i, j, self.at(i, self.width - 1 - j));
            }
        }
        out
    }

    /// Nearest-neighbor resample with center sampling: output `(i, j)` reads
    /// the source at `floor((i+0.5)·H/out_h), floor((j+0.5)·W/out_w)`.
    pub fn resize_nearest(&self, out_w: usize, out_h: usize) -> Result<LabelMap> {
        let mut out = LabelMap::new(out_w, out_h)?;
        for i in 0..out_h {
            let si = nearest_src(i, self.height, out_h);
            for j in 0..out_w {
                let sj = nearest_src(j, self.width, out_w);
                out.set(i, j, self.at(si, sj));
            }
        }
        Ok(out)
    }

    /// Split into (head, torso, object) binary masks: `lm==1`, `lm==2`, and
    /// their union.
    pub fn to_part_masks(&self) -> (BinaryMask, BinaryMask, BinaryMask) {
        let mut head = BinaryMask::new(self.width, self.height).expect("dims already validated");
        let mut torso = head.clone();
        let mut object = head.clone();
        for i in 0..self.height {
            for j in 0..self.width {
                match self.at(i, j) {
                    CLASS_HEAD => {
                        head.set(i, j, 1);
                        object.set(i, j, 1);
                    }
                    CLASS_TORSO => {
                        torso.set(i, j, 1);
                        object.set(i, j, 1);
                    }
                    _ => {}
                }
            }
        }
        (head, torso, object)
    }

    /// Class indices as a `(1, h, w)` label tensor for training.
    pub fn to_labels(&self) -> Labels {
        Labels::spatial(
            1,
            self.height,
            self.width,
            self.data.iter().map(|&c| c as i32).collect(),
        )
        .expect("label map buffer matches its dimensions")
    }

    /// Write as PGM with maxval 2 (raw class indices).
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        image::write_pgm_raw(path, self.width, self.height, CLASS_TORSO as u32, &self.data)
    }

    pub fn read_pgm(path: &Path) -> Result<LabelMap> {
        let (w, h, _maxval, data) = image::read_pgm_raw(path)?;
        if let Some(&bad) = data.iter().find(|&&v| v > CLASS_TORSO) {
            return Err(Error::Format {
                path: path.display().to_string(),
                msg: format!("label map value {bad} outside classes 0..=2"),
            });
        }
        Ok(LabelMap {
            width: w,
            height: h,
            data,
        })
    }
}

#[inline]
fn nearest_src(i: usize, src: usize, out: usize) -> usize {
    let f = ((i as f64 + 0.5) * src as f64 / out as f64).floor();
    (f as usize).min(src - 1)
}

/// Per-cell {0, 1} selection mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Config(format!(
                "mask dimensions must be positive, got {width}×{height}"
            )));
        }
        Ok(BinaryMask {
            width,
            height,
            data: vec![0; width * height],
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> u8 {
        self.data[i * self.width + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: u8) {
        debug_assert!(v <= 1);
        self.data[i * self.width + j] = v;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// Pointwise OR. Dimensions must match.
    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::Shape(format!(
                "mask union dimension mismatch: {}×{} vs {}×{}",
                self.width, self.height, other.width, other.height
            )));
        }
        let mut out = self.clone();
        for (o, &b) in out.data.iter_mut().zip(&other.data) {
            *o |= b;
        }
        Ok(out)
    }

    /// Copy the cells inside `bounds` (inclusive corners, like
    /// [`crate::image::RgbImage::crop`]).
    pub fn crop(&self, bounds: &Box) -> Result<BinaryMask> {
        if bounds.x_max >= self.width || bounds.y_max >= self.height
            || bounds.x_min > bounds.x_max || bounds.y_min > bounds.y_max
        {
            return Err(Error::Shape(format!(
                "crop box ({}, {})..({}, {}) does not fit a {}×{} mask",
                bounds.x_min, bounds.y_min, bounds.x_max, bounds.y_max,
                self.width, self.height
            )));
        }
        let mut out = BinaryMask::new(bounds.width(), bounds.height())?;
        for i in 0..out.height {
            for j in 0..out.width {
                out.set(i, j, self.at(bounds.y_min + i, bounds.x_min + j));
            }
        }
        Ok(out)
    }

    /// Same center-sampled nearest resample as [`LabelMap::resize_nearest`].
    pub fn resize_nearest(&self, out_w: usize, out_h: usize) -> Result<BinaryMask> {
        let mut out = BinaryMask::new(out_w, out_h)?;
        for i in 0..out_h {
            let si = nearest_src(i, self.height, out_h);
            for j in 0..out_w {
                let sj = nearest_src(j, self.width, out_w);
                out.set(i, j, self.at(si, sj));
            }
        }
        Ok(out)
    }

    /// Tightest box containing every 1-cell. An empty mask falls back to the
    /// full image (with a warning) so downstream crops always exist.
    pub fn to_bbox(&self) -> Box {
        let mut bb: Option<Box> = None;
        for i in 0..self.height {
            for j in 0..self.width {
                if self.at(i, j) == 1 {
                    match &mut bb {
                        None => {
                            bb = Some(Box {
                                x_min: j,
                                y_min: i,
                                x_max: j,
                                y_max: i,
                            })
                        }
                        Some(b) => {
                            b.x_min = b.x_min.min(j);
                            b.y_min = b.y_min.min(i);
                            b.x_max = b.x_max.max(j);
                            b.y_max = b.y_max.max(i);
                        }
                    }
                }
            }
        }
        bb.unwrap_or_else(|| {
            crate::warn::emit("empty mask: falling back to the full-image bounding box");
            Box {
                x_min: 0,
                y_min: 0,
                x_max: self.width - 1,
                y_max: self.height - 1,
            }
        })
    }

    /// `(1, 1, h, w)` tensor of exact zeros and ones.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(
            Shape4::new(1, 1, self.height, self.width),
            self.data
                .iter()
                .map(|&v| if v == 1 { T::ONE } else { T::ZERO })
                .collect(),
        )
        .expect("mask buffer matches its dimensions")
    }

    /// Write as PGM with values {0, 255}.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| v * 255).collect();
        image::write_pgm_raw(path, self.width, self.height, 255, &bytes)
    }

    pub fn read_pgm(path: &Path) -> Result<BinaryMask> {
        let (w, h, _maxval, bytes) = image::read_pgm_raw(path)?;
        let mut data = Vec::with_capacity(bytes.len());
        for &b in &bytes {
            data.push(match b {
                0 => 0,
                255 => 1,
                other => {
                    return Err(Error::Format {
                        path: path.display().to_string(),
                        msg: format!("mask value {other} is neither 0 nor 255"),
                    })
                }
            });
        }
        Ok(BinaryMask {
            width: w,
            height: h,
            data,
        })
    }
}

/// Inclusive pixel bounding box.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Box {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl Box {
    /// Width in pixels (inclusive coordinates: `x_max − x_min + 1`).
    pub fn width(&self) -> usize {
        self.x_max - self.x_min + 1
    }

    pub fn height(&self) -> usize {
        self.y_max - self.y_min + 1
    }
}

// ---------------------------------------------------------------------------
// Operations

/// Rasterize one hull onto a fresh canvas as `class`.
pub fn rasterize_hull(hull: &Hull, width: usize, height: usize, class: u8) -> Result<LabelMap> {
    let mut lm = LabelMap::new(width, height)?;
    lm.stamp_hull(hull, class);
    Ok(lm)
}

/// Ground-truth label map for one annotation: torso hull stamped first,
/// head hull over it (head wins in the overlap). No visible points at all
/// yields an all-background map and a warning.
pub fn build_label_map(kps: &KeypointSet, width: usize, height: usize) -> Result<LabelMap> {
    let mut lm = LabelMap::new(width, height)?;
    let (head, torso) = split_keypoints(kps);
    if head.is_empty() && torso.is_empty() {
        crate::warn::emit("no visible keypoints: label map is all background");
        return Ok(lm);
    }
    if !torso.is_empty() {
        lm.stamp_hull(&convex_hull(&torso)?, CLASS_TORSO);
    }
    if !head.is_empty() {
        lm.stamp_hull(&convex_hull(&head)?, CLASS_HEAD);
    }
    Ok(lm)
}

/// Crop a `crop × crop` patch from the middle of the image, zero-padding
/// symmetrically when the image is smaller. Keypoints are shifted into the
/// new frame; any that land outside are marked invisible.
pub fn center_crop(
    img: &RgbImage,
    kps: &KeypointSet,
    crop: usize,
) -> Result<(RgbImage, KeypointSet)> {
    if crop == 0 {
        return Err(Error::Config("crop size must be positive".into()));
    }
    // Per axis: source offset when cropping, destination offset when padding.
    let axis = |src: usize| -> (usize, usize, usize) {
        if src >= crop {
            ((src - crop) / 2, 0, crop)
        } else {
            (0, (crop - src) / 2, src)
        }
    };
    let (sx, dx, copy_w) = axis(img.width());
    let (sy, dy, copy_h) = axis(img.height());

    let mut out = RgbImage::new(crop, crop)?;
    for c in 0..3 {
        for i in 0..copy_h {
            for j in 0..copy_w {
                out.set(c, dy + i, dx + j, img.at(c, sy + i, sx + j));
            }
        }
    }

    let mut shifted = *kps;
    for name in KeypointName::ALL {
        let mut kp = shifted.get(name);
        if !kp.visible {
            continue;
        }
        kp.x = kp.x - sx as f64 + dx as f64;
        kp.y = kp.y - sy as f64 + dy as f64;
        let bound = crop as f64;
        kp.visible = kp.x >= 0.0 && kp.x <= bound && kp.y >= 0.0 && kp.y <= bound;
        shifted.set(name, kp);
    }
    Ok((out, shifted))
}
