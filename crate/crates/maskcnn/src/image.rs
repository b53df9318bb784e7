//! Planar RGB images and the PPM/PGM file formats.
//!
//! Images are stored channel-planar (all of R, then G, then B) as `f32` in
//! `[0, 1]`, which is already the NCHW layout the tensor engine wants — a
//! single image converts to a `(1, 3, h, w)` tensor by copying its buffer.
//!
//! File IO sticks to the binary netpbm formats (P6 for color, P5 for
//! single-channel maps) so the whole pipeline reads and writes images with
//! no decoder dependencies and byte-exact test fixtures.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor};

/// Channel-planar RGB image, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Config(format!(
                "image dimensions must be positive, got {width}×{height}"
            )));
        }
        Ok(RgbImage {
            width,
            height,
            data: vec![0.0; 3 * width * height],
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn at(&self, c: usize, i: usize, j: usize) -> f32 {
        self.data[(c * self.height + i) * self.width + j]
    }

    #[inline]
    pub fn set(&mut self, c: usize, i: usize, j: usize, v: f32) {
        self.data[(c * self.height + i) * self.width + j] = v;
    }

    /// All three channels of pixel `(i, j)` at once.
    #[inline]
    pub fn put_rgb(&mut self, i: usize, j: usize, rgb: [f32; 3]) {
        for (c, &v) in rgb.iter().enumerate() {
            self.set(c, i, j, v);
        }
    }

    #[inline]
    pub fn rgb(&self, i: usize, j: usize) -> [f32; 3] {
        [self.at(0, i, j), self.at(1, i, j), self.at(2, i, j)]
    }

    /// Copy into a `(1, 3, h, w)` tensor (same memory layout).
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(
            Shape4::new(1, 3, self.height, self.width),
            self.data.clone(),
        )
        .expect("image buffer length matches its dimensions")
    }

    /// Mirror left-right: column `j` swaps with `width−1−j`.
    pub fn flipped_horizontal(&self) -> RgbImage {
        let mut out = self.clone();
        for c in 0..3 {
            for i in 0..self.height {
                for j in 0..self.width {
                    out.set(c, i, j, self.at(c, i, self.width - 1 - j));
                }
            }
        }
        out
    }

    /// Extract the inclusive pixel rectangle `[x0, x1] × [y0, y1]`.
    pub fn crop(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> Result<RgbImage> {
        if x1 < x0 || y1 < y0 || x1 >= self.width || y1 >= self.height {
            return Err(Error::Shape(format!(
                "crop [{x0}, {x1}]×[{y0}, {y1}] outside {}×{} image",
                self.width, self.height
            )));
        }
        let mut out = RgbImage::new(x1 - x0 + 1, y1 - y0 + 1)?;
        for c in 0..3 {
            for i in 0..out.height {
                for j in 0..out.width {
                    out.set(c, i, j, self.at(c, y0 + i, x0 + j));
                }
            }
        }
        Ok(out)
    }

    /// Bilinear resample with half-pixel center alignment: output center
    /// `(i+0.5, j+0.5)` samples source coordinate `((i+0.5)·sy−0.5,
    /// (j+0.5)·sx−0.5)`, clamped. Identity when dimensions are unchanged.
    pub fn resize_bilinear(&self, out_w: usize, out_h: usize) -> Result<RgbImage> {
        if out_w == 0 || out_h == 0 {
            return Err(Error::Config(format!(
                "resize target must be positive, got {out_w}×{out_h}"
            )));
        }
        let mut out = RgbImage::new(out_w, out_h)?;
        let sx = self.width as f64 / out_w as f64;
        let sy = self.height as f64 / out_h as f64;
        for i in 0..out_h {
            let fy = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = (fy - y0 as f64) as f32;
            for j in 0..out_w {
                let fx = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = (fx - x0 as f64) as f32;
                for c in 0..3 {
                    let top = self.at(c, y0, x0) * (1.0 - wx) + self.at(c, y0, x1) * wx;
                    let bot = self.at(c, y1, x0) * (1.0 - wx) + self.at(c, y1, x1) * wx;
                    out.set(c, i, j, top * (1.0 - wy) + bot * wy);
                }
            }
        }
        Ok(out)
    }

    /// Write as binary PPM (P6, maxval 255), rounding to the nearest byte.
    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut bytes = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for i in 0..self.height {
            for j in 0..self.width {
                for c in 0..3 {
                    bytes.push((self.at(c, i, j).clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Read a binary PPM (P6, maxval 255).
    pub fn read_ppm(path: &Path) -> Result<RgbImage> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (w, h, maxval, pixels) = parse_netpbm(path, &bytes, b'6', 3)?;
        if maxval != 255 {
            return Err(Error::Format {
                path: path.display().to_string(),
                msg: format!("unsupported PPM maxval {maxval} (expected 255)"),
            });
        }
        let mut img = RgbImage::new(w, h)?;
        for i in 0..h {
            for j in 0..w {
                for c in 0..3 {
                    img.set(c, i, j, pixels[(i * w + j) * 3 + c] as f32 / 255.0);
                }
            }
        }
        Ok(img)
    }
}

/// Parse a binary netpbm payload: `P<kind>` magic, whitespace/comment
/// tolerant header of width, height, maxval, then raw samples
/// (`channels` bytes per pixel). Returns `(w, h, maxval, samples)`.
fn parse_netpbm<'a>(
    path: &Path,
    bytes: &'a [u8],
    kind: u8,
    channels: usize,
) -> Result<(usize, usize, u32, &'a [u8])> {
    let fmt_err = |msg: String| Error::Format {
        path: path.display().to_string(),
        msg,
    };
    if bytes.len() < 2 || bytes[0] != b'P' || bytes[1] != kind {
        return Err(fmt_err(format!(
            "not a P{} netpbm file",
            char::from(kind)
        )));
    }
    let mut pos = 2usize;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // Skip whitespace and `#` comments.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(fmt_err("truncated or malformed header".into()));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("digits are ASCII");
        *field = text
            .parse()
            .map_err(|_| fmt_err(format!("bad header field `{text}`")))?;
    }
    let (w, h, maxval) = (fields[0], fields[1], fields[2] as u32);
    if w == 0 || h == 0 {
        return Err(fmt_err(format!("zero dimension {w}×{h}")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(fmt_err(format!("unsupported maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the samples.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(fmt_err("missing separator before sample data".into()));
    }
    pos += 1;
    let need = w * h * channels;
    let data = &bytes[pos..];
    if data.len() < need {
        return Err(fmt_err(format!(
            "expected {need} sample bytes, found {}",
            data.len()
        )));
    }
    Ok((w, h, maxval, &data[..need]))
}

/// Write a binary PGM (P5) with the given maxval; `data` is row-major.
pub(crate) fn write_pgm_raw(
    path: &Path,
    width: usize,
    height: usize,
    maxval: u32,
    data: &[u8],
) -> Result<()> {
    assert_eq!(data.len(), width * height, "sample count matches dims");
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    out.write_all(format!("P5\n{width} {height}\n{maxval}\n").as_bytes())
        .and_then(|_| out.write_all(data))
        .map_err(|e| Error::io(path, e))
}

/// Read a binary PGM (P5). Returns `(width, height, maxval, samples)`.
pub(crate) fn read_pgm_raw(path: &Path) -> Result<(usize, usize, u32, Vec<u8>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let (w, h, maxval, data) = parse_netpbm(path, &bytes, b'5', 1)?;
    Ok((w, h, maxval, data.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_rng;
    use rand::Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> RgbImage {
        let mut rng = seeded_rng(seed);
        let mut img = RgbImage::new(w, h).unwrap();
        for c in 0..3 {
            for i in 0..h {
                for j in 0..w {
                    // Exact byte values so PPM roundtrips bit-for-bit.
                    img.set(c, i, j, rng.gen_range(0u32..=255) as f32 / 255.0);
                }
            }
        }
        img
    }

    #[test]
    fn ppm_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let img = random_image(13, 7, 42);
        img.write_ppm(&path).unwrap();
        let back = RgbImage::read_ppm(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn ppm_header_allows_comments() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ppm");
        fs::write(&path, b"P6\n# a comment\n2 1\n255\n\x01\x02\x03\x04\x05\x06").unwrap();
        let img = RgbImage::read_ppm(&path).unwrap();
        assert_eq!(img.width(), 2);
        assert_eq!(img.height(), 1);
        assert!((img.at(0, 0, 0) - 1.0 / 255.0).abs() < 1e-6);
    }

    #[test]
    fn ppm_rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let bad_magic = dir.path().join("bad.ppm");
        fs::write(&bad_magic, b"P5\n1 1\n255\n\x00").unwrap();
        assert!(matches!(
            RgbImage::read_ppm(&bad_magic),
            Err(Error::Format { .. })
        ));
        let short = dir.path().join("short.ppm");
        fs::write(&short, b"P6\n2 2\n255\n\x00\x00\x00").unwrap();
        assert!(matches!(
            RgbImage::read_ppm(&short),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn pgm_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.pgm");
        let data: Vec<u8> = (0..12).map(|i| (i % 3) as u8).collect();
        write_pgm_raw(&path, 4, 3, 2, &data).unwrap();
        let (w, h, maxval, back) = read_pgm_raw(&path).unwrap();
        assert_eq!((w, h, maxval), (4, 3, 2));
        assert_eq!(back, data);
    }

    #[test]
    fn flip_reverses_columns_and_is_involutive() {
        let img = random_image(5, 4, 7);
        let flipped = img.flipped_horizontal();
        for c in 0..3 {
            for i in 0..4 {
                for j in 0..5 {
                    assert_eq!(flipped.at(c, i, j), img.at(c, i, 4 - j));
                }
            }
        }
        assert_eq!(flipped.flipped_horizontal(), img);
    }

    #[test]
    fn crop_extracts_the_inclusive_rectangle() {
        let img = random_image(6, 5, 9);
        let c = img.crop(2, 1, 4, 3).unwrap();
        assert_eq!((c.width(), c.height()), (3, 3));
        for ch in 0..3 {
            for i in 0..3 {
                for j in 0..3 {
                    assert_eq!(c.at(ch, i, j), img.at(ch, 1 + i, 2 + j));
                }
            }
        }
        assert!(img.crop(4, 0, 3, 0).is_err());
        assert!(img.crop(0, 0, 6, 0).is_err());
    }

    #[test]
    fn resize_same_size_is_identity() {
        let img = random_image(8, 6, 11);
        let out = img.resize_bilinear(8, 6).unwrap();
        for (a, b) in img.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn resize_constant_image_stays_constant() {
        let mut img = RgbImage::new(7, 5).unwrap();
        for c in 0..3 {
            for i in 0..5 {
                for j in 0..7 {
                    img.set(c, i, j, 0.25 * (c as f32 + 1.0));
                }
            }
        }
        for (w, h) in [(3, 2), (14, 10), (1, 1), (20, 3)] {
            let out = img.resize_bilinear(w, h).unwrap();
            for c in 0..3 {
                for v in 0..h {
                    for u in 0..w {
                        assert!((out.at(c, v, u) - 0.25 * (c as f32 + 1.0)).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn resize_doubling_interpolates_midpoints() {
        // 2×1 image [a, b] → 4×1: centers at source x = {-0.25, 0.25, 0.75,
        // 1.25}, clamped → a, 0.75a+0.25b, 0.25a+0.75b, b.
        let mut img = RgbImage::new(2, 1).unwrap();
        img.set(0, 0, 0, 0.2);
        img.set(0, 0, 1, 1.0);
        let out = img.resize_bilinear(4, 1).unwrap();
        let want = [0.2, 0.75 * 0.2 + 0.25, 0.25 * 0.2 + 0.75, 1.0];
        for (j, &w) in want.iter().enumerate() {
            assert!((out.at(0, 0, j) - w).abs() < 1e-6, "j={j}");
        }
    }

    #[test]
    fn to_tensor_matches_layout() {
        let img = random_image(3, 2, 13);
        let t = img.to_tensor();
        assert_eq!(t.shape(), Shape4::new(1, 3, 2, 3));
        for c in 0..3 {
            for i in 0..2 {
                for j in 0..3 {
                    assert_eq!(t.at(0, c, i, j), img.at(c, i, j));
                }
            }
        }
    }
}
