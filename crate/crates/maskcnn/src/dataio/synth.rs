//! Synthetic bird scenes with exact keypoint annotations.
//!
//! Each image contains one procedurally drawn "bird" — a striped torso
//! ellipse with a head disk attached at the front — over a noisy background
//! littered with decoy shapes drawn from the same palette. Classes are a
//! head-pattern × stripe-pattern grid (plain/ringed head, stripes along or
//! across the body axis, coarse or fine period), so telling classes apart
//! requires local structure in the right place; global color statistics are
//! deliberately uninformative because the decoys reuse every bird color.
//!
//! Decoys come in two kinds: free-floating shapes with random attributes
//! anywhere in the frame, and corner decoys wearing the *opposite* of the
//! bird's attributes, tucked into the empty corners of the head and torso
//! bounding boxes. The corner decoys sit inside any tight crop of a part
//! but outside the part's silhouette, so features pooled over a whole crop
//! are actively misled while features restricted to the part's mask are
//! clean.
//!
//! Keypoints sit at fixed anatomical anchors expressed in the body frame.
//! Anchor offsets are capped at 0.85 of each shape's normalized radius, which
//! keeps every keypoint's pixel strictly inside its part's fill for any image
//! size this module accepts — the containment test below checks the rendered
//! pixels, not the math.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Manifest, Record, Split};
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::maskgen::{Keypoint, KeypointName, KeypointSet};
use crate::tensor::{derive_seed, seeded_rng};

/// Shared palette: every class and every decoy uses these four colors.
pub(crate) const HEAD_BASE: [f32; 3] = [0.90, 0.55, 0.15];
pub(crate) const HEAD_RING: [f32; 3] = [0.10, 0.20, 0.70];
pub(crate) const TORSO_A: [f32; 3] = [0.20, 0.65, 0.30];
pub(crate) const TORSO_B: [f32; 3] = [0.60, 0.30, 0.70];

const CLASS_NAMES: [&str; 8] = [
    "plain_along_coarse",
    "ringed_along_coarse",
    "plain_cross_coarse",
    "ringed_cross_coarse",
    "plain_along_fine",
    "ringed_along_fine",
    "plain_cross_fine",
    "ringed_cross_fine",
];

/// Parameters for [`generate_synthetic_dataset`].
#[derive(Clone, Debug)]
pub struct SynthConfig {
    /// Number of classes, drawn in order from the 8-way attribute grid.
    pub classes: usize,
    pub per_class_train: usize,
    pub per_class_test: usize,
    /// Square image side in pixels.
    pub size: usize,
    /// Decoy density. The free-floating decoy count is `round(clutter * 4)`;
    /// each of the eight part-box corner sites hosts a conflicting decoy
    /// with probability `0.5 * clutter` (head) or `0.75 * clutter` (torso),
    /// capped at 1. Zero means no decoys of either kind.
    pub clutter: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 8,
            per_class_train: 60,
            per_class_test: 30,
            size: 96,
            clutter: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.classes) {
            return Err(Error::Config(format!(
                "classes must be between 2 and 8, got {}",
                self.classes
            )));
        }
        if self.per_class_train == 0 {
            return Err(Error::Config("per-class train count must be positive".into()));
        }
        if self.size < 64 {
            return Err(Error::Config(format!(
                "image size must be at least 64 (got {}); smaller birds cannot hold every keypoint",
                self.size
            )));
        }
        if !self.clutter.is_finite() || self.clutter < 0.0 {
            return Err(Error::Config(format!(
                "clutter density must be finite and non-negative, got {}",
                self.clutter
            )));
        }
        Ok(())
    }
}

/// Pose and proportions of one rendered bird.
struct Bird {
    tx: f64,
    ty: f64,
    theta: f64,
    /// Torso semi-axis along the body axis.
    a: f64,
    /// Torso semi-axis across the body axis.
    b: f64,
    /// Head disk radius.
    r: f64,
}

impl Bird {
    /// Unit vector along the body axis (tail to head).
    fn u(&self) -> (f64, f64) {
        (self.theta.cos(), self.theta.sin())
    }

    /// Unit vector across the body axis; `-v` points toward the bird's back.
    fn v(&self) -> (f64, f64) {
        (-self.theta.sin(), self.theta.cos())
    }

    fn head_center(&self) -> (f64, f64) {
        let (ux, uy) = self.u();
        let d = self.a + 0.5 * self.r;
        (self.tx + d * ux, self.ty + d * uy)
    }

    /// Point at body-frame offset `(du, dv)` from `(ox, oy)`.
    fn offset(&self, ox: f64, oy: f64, du: f64, dv: f64) -> (f64, f64) {
        let (ux, uy) = self.u();
        let (vx, vy) = self.v();
        (ox + du * ux + dv * vx, oy + du * uy + dv * vy)
    }

    /// Axis-aligned half-extents of the torso ellipse's bounding box.
    fn torso_extents(&self) -> (f64, f64) {
        let (c, s) = (self.theta.cos(), self.theta.sin());
        let ex = ((self.a * c).powi(2) + (self.b * s).powi(2)).sqrt();
        let ey = ((self.a * s).powi(2) + (self.b * c).powi(2)).sqrt();
        (ex, ey)
    }

    /// Whether `(x, y)` lies inside the torso ellipse dilated by `pad`.
    fn in_torso(&self, x: f64, y: f64, pad: f64) -> bool {
        let (ux, uy) = self.u();
        let (vx, vy) = self.v();
        let dx = x - self.tx;
        let dy = y - self.ty;
        let du = dx * ux + dy * uy;
        let dv = dx * vx + dy * vy;
        (du / (self.a + pad)).powi(2) + (dv / (self.b + pad)).powi(2) <= 1.0
    }

    /// Whether `(x, y)` lies inside the head disk dilated by `pad`.
    fn in_head(&self, x: f64, y: f64, pad: f64) -> bool {
        let (hx, hy) = self.head_center();
        let r = self.r + pad;
        (x - hx).powi(2) + (y - hy).powi(2) <= r * r
    }
}

/// Generate the dataset under `out_dir` (`images/` plus `manifest.txt`) and
/// return the manifest. Output bytes are a pure function of the config.
pub fn generate_synthetic_dataset(config: &SynthConfig, out_dir: &Path) -> Result<Manifest> {
    config.validate()?;
    let image_dir = out_dir.join("images");
    std::fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;

    let classes: Vec<String> = CLASS_NAMES[..config.classes]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut manifest = Manifest::new(classes, config.size, out_dir.to_path_buf());

    for class in 0..config.classes {
        for (split, count) in [
            (Split::Train, config.per_class_train),
            (Split::Test, config.per_class_test),
        ] {
            for idx in 0..count {
                let tag = format!("img/{}/{}/{}", split.as_str(), class, idx);
                let mut rng = seeded_rng(derive_seed(config.seed, &tag));
                let (img, kps, _) = render_scene(config.size, config.clutter, class, &mut rng);
                let rel = format!("images/{}_{:02}_{:03}.ppm", split.as_str(), class, idx);
                img.write_ppm(&out_dir.join(&rel))?;
                manifest.records.push(Record {
                    image: rel,
                    label: class,
                    split,
                    keypoints: kps,
                });
            }
        }
    }

    manifest.save(&out_dir.join("manifest.txt"))?;
    Ok(manifest)
}

fn render_scene(
    size: usize,
    clutter: f64,
    class: usize,
    rng: &mut ChaCha8Rng,
) -> (RgbImage, KeypointSet, Bird) {
    let s = size as f64;
    let mut img = RgbImage::new(size, size).expect("size already validated");

    // Noisy background.
    let base: f64 = rng.gen_range(0.12..0.22);
    for i in 0..size {
        for j in 0..size {
            let noise = rng.gen_range(-0.05..0.05);
            let v = (base + noise).clamp(0.0, 1.0) as f32;
            img.put_rgb(i, j, [v, v, v]);
        }
    }

    // Decoys first, so the bird always draws over them.
    let bird = sample_bird(s, rng);
    let decoys = (clutter * 4.0).round() as usize;
    for _ in 0..decoys {
        draw_decoy(&mut img, s, rng);
    }
    draw_corner_decoys(&mut img, &bird, class, clutter, rng);
    draw_torso(&mut img, &bird, class);
    draw_head(&mut img, &bird, class);
    let kps = place_keypoints(&bird);
    (img, kps, bird)
}

fn sample_bird(s: f64, rng: &mut ChaCha8Rng) -> Bird {
    let tx = 0.5 * s + rng.gen_range(-0.08 * s..0.08 * s);
    let ty = 0.5 * s + rng.gen_range(-0.08 * s..0.08 * s);
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    let a = rng.gen_range(0.18 * s..0.24 * s);
    let b = rng.gen_range(0.10 * s..0.14 * s);
    let r = rng.gen_range(0.07 * s..0.10 * s);
    Bird { tx, ty, theta, a, b, r }
}

fn class_ringed(class: usize) -> bool {
    class & 1 == 1
}

fn class_cross(class: usize) -> bool {
    (class >> 1) & 1 == 1
}

fn class_wavelength(class: usize) -> f64 {
    if (class >> 2) & 1 == 1 {
        5.0
    } else {
        10.0
    }
}

fn draw_torso(img: &mut RgbImage, bird: &Bird, class: usize) {
    fill_striped_ellipse(
        img,
        bird.tx,
        bird.ty,
        bird.a,
        bird.b,
        bird.theta,
        class_cross(class),
        class_wavelength(class),
    );
}

fn draw_head(img: &mut RgbImage, bird: &Bird, class: usize) {
    let (hx, hy) = bird.head_center();
    fill_disk(img, hx, hy, bird.r, HEAD_BASE);
    if class_ringed(class) {
        fill_ring(img, hx, hy, 0.55 * bird.r, 0.80 * bird.r, HEAD_RING);
    }
}

/// Decoys tucked into the empty corners of the head and torso bounding
/// boxes, wearing the *opposite* of the bird's attributes. A tight crop
/// around either part necessarily includes its box corners, so these
/// contaminate whole-crop statistics while staying outside the part's own
/// silhouette — classifying the crop correctly requires ignoring them.
/// Corner sites that would collide with the bird itself are skipped.
fn draw_corner_decoys(
    img: &mut RgbImage,
    bird: &Bird,
    class: usize,
    clutter: f64,
    rng: &mut ChaCha8Rng,
) {
    let p_head = (0.5 * clutter).min(1.0);
    let p_torso = (0.75 * clutter).min(1.0);
    let corners = [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)];

    // Head box corners: disks with the ring bit flipped.
    let (hx, hy) = bird.head_center();
    let rad = 0.4 * bird.r;
    for (sx, sy) in corners {
        if p_head <= 0.0 || !rng.gen_bool(p_head) {
            continue;
        }
        let cx = hx + sx * 1.05 * bird.r;
        let cy = hy + sy * 1.05 * bird.r;
        if bird.in_torso(cx, cy, rad) {
            continue;
        }
        fill_disk(img, cx, cy, rad, HEAD_BASE);
        if !class_ringed(class) {
            fill_ring(img, cx, cy, 0.55 * rad, 0.80 * rad, HEAD_RING);
        }
    }

    // Torso box corners: stripe patches with both stripe bits flipped.
    let (ex, ey) = bird.torso_extents();
    let ea = 0.45 * bird.a;
    let eb = 0.45 * bird.b;
    for (sx, sy) in corners {
        if p_torso <= 0.0 || !rng.gen_bool(p_torso) {
            continue;
        }
        let cx = bird.tx + sx * 1.05 * ex;
        let cy = bird.ty + sy * 1.05 * ey;
        if bird.in_torso(cx, cy, eb) || bird.in_head(cx, cy, eb) {
            continue;
        }
        let theta = rng.gen_range(0.0..std::f64::consts::TAU);
        let wavelength = if class_wavelength(class) == 5.0 { 10.0 } else { 5.0 };
        fill_striped_ellipse(img, cx, cy, ea, eb, theta, !class_cross(class), wavelength);
    }
}

fn draw_decoy(img: &mut RgbImage, s: f64, rng: &mut ChaCha8Rng) {
    let cx = rng.gen_range(0.1 * s..0.9 * s);
    let cy = rng.gen_range(0.1 * s..0.9 * s);
    match rng.gen_range(0..3u32) {
        0 => {
            let rad = rng.gen_range(0.4..0.7) * 0.085 * s;
            fill_disk(img, cx, cy, rad, HEAD_BASE);
        }
        1 => {
            let rad = rng.gen_range(0.4..0.7) * 0.085 * s;
            fill_disk(img, cx, cy, rad, HEAD_BASE);
            fill_ring(img, cx, cy, 0.55 * rad, 0.80 * rad, HEAD_RING);
        }
        _ => {
            let ea = rng.gen_range(0.4..0.7) * 0.21 * s;
            let eb = rng.gen_range(0.4..0.7) * 0.12 * s;
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            let cross = rng.gen_bool(0.5);
            let wavelength = if rng.gen_bool(0.5) { 5.0 } else { 10.0 };
            fill_striped_ellipse(img, cx, cy, ea, eb, theta, cross, wavelength);
        }
    }
}

/// Loop bounds covering a disk or ellipse of outer radius `rad` at `(cx, cy)`.
fn span(c: f64, rad: f64, limit: usize) -> (usize, usize) {
    let lo = (c - rad - 1.0).floor().max(0.0) as usize;
    let hi = ((c + rad + 1.0).ceil() as usize).min(limit);
    (lo, hi.max(lo))
}

fn fill_disk(img: &mut RgbImage, cx: f64, cy: f64, r: f64, color: [f32; 3]) {
    let (i0, i1) = span(cy, r, img.height());
    let (j0, j1) = span(cx, r, img.width());
    for i in i0..i1 {
        for j in j0..j1 {
            let dx = (j as f64 + 0.5) - cx;
            let dy = (i as f64 + 0.5) - cy;
            if dx * dx + dy * dy <= r * r {
                img.put_rgb(i, j, color);
            }
        }
    }
}

fn fill_ring(img: &mut RgbImage, cx: f64, cy: f64, r0: f64, r1: f64, color: [f32; 3]) {
    let (i0, i1) = span(cy, r1, img.height());
    let (j0, j1) = span(cx, r1, img.width());
    for i in i0..i1 {
        for j in j0..j1 {
            let dx = (j as f64 + 0.5) - cx;
            let dy = (i as f64 + 0.5) - cy;
            let d2 = dx * dx + dy * dy;
            if d2 >= r0 * r0 && d2 <= r1 * r1 {
                img.put_rgb(i, j, color);
            }
        }
    }
}

/// Ellipse filled with a two-color square wave. The stripe coordinate lives
/// in the body frame (pixels along or across the axis), so stripe period is
/// independent of the ellipse's orientation.
#[allow(clippy::too_many_arguments)]
fn fill_striped_ellipse(
    img: &mut RgbImage,
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
    cross: bool,
    wavelength: f64,
) {
    let (ux, uy) = (theta.cos(), theta.sin());
    let (vx, vy) = (-theta.sin(), theta.cos());
    let rad = a.max(b);
    let (i0, i1) = span(cy, rad, img.height());
    let (j0, j1) = span(cx, rad, img.width());
    let half_period = 0.5 * wavelength;
    for i in i0..i1 {
        for j in j0..j1 {
            let dx = (j as f64 + 0.5) - cx;
            let dy = (i as f64 + 0.5) - cy;
            let tu = (dx * ux + dy * uy) / a;
            let tv = (dx * vx + dy * vy) / b;
            if tu * tu + tv * tv <= 1.0 {
                let coord = if cross {
                    dx * vx + dy * vy
                } else {
                    dx * ux + dy * uy
                };
                let band = (coord / half_period).floor() as i64;
                let color = if band.rem_euclid(2) == 0 { TORSO_A } else { TORSO_B };
                img.put_rgb(i, j, color);
            }
        }
    }
}

/// Anatomical anchors in body-frame units. Head anchors are in units of the
/// head radius, torso anchors in units of the torso semi-axes; every
/// normalized radius stays at or below 0.85 so the anchor's pixel is always
/// strictly inside the fill.
fn place_keypoints(bird: &Bird) -> KeypointSet {
    let (hx, hy) = bird.head_center();
    let mut kps = KeypointSet::new_hidden();

    let head = |du: f64, dv: f64| bird.offset(hx, hy, du * bird.r, dv * bird.r);
    let torso = |du: f64, dv: f64| bird.offset(bird.tx, bird.ty, du * bird.a, dv * bird.b);
    // Neck junction: on the body axis just inside the torso's front tip, and
    // 0.6 head radii behind the head center, so both part shapes hold it.
    let neck = |dv: f64| {
        bird.offset(
            bird.tx,
            bird.ty,
            bird.a - 0.1 * bird.r,
            dv * 0.2 * bird.r,
        )
    };

    let anchors: [(KeypointName, (f64, f64)); 15] = [
        (KeypointName::Beak, head(0.80, 0.0)),
        (KeypointName::Forehead, head(0.50, -0.40)),
        (KeypointName::Crown, head(-0.10, -0.60)),
        (KeypointName::LeftEye, head(0.35, -0.20)),
        (KeypointName::RightEye, head(0.25, -0.35)),
        (KeypointName::Nape, neck(-1.0)),
        (KeypointName::Throat, neck(1.0)),
        (KeypointName::Back, torso(-0.10, -0.70)),
        (KeypointName::Breast, torso(0.55, 0.45)),
        (KeypointName::Belly, torso(0.05, 0.75)),
        (KeypointName::LeftLeg, torso(-0.15, 0.80)),
        (KeypointName::RightLeg, torso(0.20, 0.78)),
        (KeypointName::LeftWing, torso(-0.35, -0.35)),
        (KeypointName::RightWing, torso(-0.30, 0.10)),
        (KeypointName::Tail, torso(-0.85, 0.0)),
    ];
    for (name, (x, y)) in anchors {
        kps.set(name, Keypoint::at(x, y));
    }
    kps
}
