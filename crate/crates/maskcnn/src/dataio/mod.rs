//! Dataset manifests, synthetic data generation, and binary persistence.
//!
//! The manifest is a line-oriented text file: two header lines (`classes=`
//! comma-separated names, `size=` the common image size, 0 for native), then
//! one record per line of space-separated `key=value` tokens — `image=`
//! (path relative to the manifest's directory, no whitespace), `label=`,
//! `split=`, and all fifteen `kp.<name>=<x>,<y>,<0|1>` fields. Unknown keys
//! are hard errors with line numbers, so a typo can never silently drop an
//! annotation.

mod cub;
mod persist;
mod synth;

pub use cub::load_cub;
pub use persist::{
    load_checkpoint, load_checkpoint_into, save_checkpoint, FeatureSet, CHECKPOINT_VERSION,
    FEATURES_VERSION,
};
pub use synth::{generate_synthetic_dataset, SynthConfig};

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::maskgen::{Keypoint, KeypointName, KeypointSet};

/// Which protocol split a record belongs to.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// One annotated image.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    /// Path relative to the manifest's directory.
    pub image: String,
    pub label: usize,
    pub split: Split,
    pub keypoints: KeypointSet,
}

/// A loaded dataset: class names, nominal image size (0 = native), records.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub classes: Vec<String>,
    pub size: usize,
    pub records: Vec<Record>,
    dir: PathBuf,
}

impl Manifest {
    pub fn new(classes: Vec<String>, size: usize, dir: PathBuf) -> Manifest {
        Manifest {
            classes,
            size,
            records: Vec::new(),
            dir,
        }
    }

    /// Directory image paths resolve against.
    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Absolute-ish path of a record's image file.
    pub fn image_path(&self, rec: &Record) -> PathBuf {
        self.dir.join(&rec.image)
    }

    pub fn split_records(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Write in the line-oriented text format. Paths and class names must be
    /// whitespace-free (and class names comma-free) to keep the format
    /// unambiguous.
    pub fn save(&self, path: &Path) -> Result<()> {
        for name in &self.classes {
            if name.is_empty() || name.contains([' ', '\t', ',']) {
                return Err(Error::Data(format!(
                    "class name `{name}` contains whitespace or commas"
                )));
            }
        }
        let mut out = String::new();
        writeln!(out, "classes={}", self.classes.join(",")).unwrap();
        writeln!(out, "size={}", self.size).unwrap();
        for rec in &self.records {
            if rec.image.contains(char::is_whitespace) {
                return Err(Error::Data(format!(
                    "image path `{}` contains whitespace",
                    rec.image
                )));
            }
            write!(
                out,
                "image={} label={} split={}",
                rec.image,
                rec.label,
                rec.split.as_str()
            )
            .unwrap();
            for name in KeypointName::ALL {
                let kp = rec.keypoints.get(name);
                write!(
                    out,
                    " kp.{}={},{},{}",
                    name.as_str(),
                    kp.x,
                    kp.y,
                    u8::from(kp.visible)
                )
                .unwrap();
            }
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Load and validate. Every malformed line is reported with its number.
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let perr = |line: usize, msg: String| Error::Parse {
            path: path.display().to_string(),
            line,
            msg,
        };

        let mut classes: Option<Vec<String>> = None;
        let mut size: Option<usize> = None;
        let mut records = Vec::new();

        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix("classes=") {
                if classes.is_some() {
                    return Err(perr(lineno, "duplicate `classes=` header".into()));
                }
                let names: Vec<String> = rest.split(',').map(str::to_string).collect();
                if names.iter().any(String::is_empty) {
                    return Err(perr(lineno, "empty class name".into()));
                }
                classes = Some(names);
                continue;
            }
            if let Some(rest) = line.strip_prefix("size=") {
                if size.is_some() {
                    return Err(perr(lineno, "duplicate `size=` header".into()));
                }
                size = Some(
                    rest.parse()
                        .map_err(|_| perr(lineno, format!("bad size `{rest}`")))?,
                );
                continue;
            }

            // Record line.
            let classes = classes
                .as_ref()
                .ok_or_else(|| perr(lineno, "record before `classes=` header".into()))?;
            let mut image: Option<String> = None;
            let mut label: Option<usize> = None;
            let mut split: Option<Split> = None;
            let mut kps = KeypointSet::new_hidden();
            let mut seen = [false; 15];

            for token in line.split_ascii_whitespace() {
                let (key, value) = token
                    .split_once('=')
                    .ok_or_else(|| perr(lineno, format!("token `{token}` is not key=value")))?;
                match key {
                    "image" => image = Some(value.to_string()),
                    "label" => {
                        let l: usize = value
                            .parse()
                            .map_err(|_| perr(lineno, format!("bad label `{value}`")))?;
                        if l >= classes.len() {
                            return Err(perr(
                                lineno,
                                format!("label {l} out of range for {} classes", classes.len()),
                            ));
                        }
                        label = Some(l);
                    }
                    "split" => {
                        split = Some(Split::parse(value).ok_or_else(|| {
                            perr(lineno, format!("split must be train or test, got `{value}`"))
                        })?)
                    }
                    _ => {
                        let kp_name = key.strip_prefix("kp.").and_then(KeypointName::parse);
                        let name = kp_name
                            .ok_or_else(|| perr(lineno, format!("unknown key `{key}`")))?;
                        if seen[name as usize] {
                            return Err(perr(
                                lineno,
                                format!("duplicate keypoint `{}`", name.as_str()),
                            ));
                        }
                        seen[name as usize] = true;
                        kps.set(name, parse_keypoint(value).map_err(|msg| perr(lineno, msg))?);
                    }
                }
            }

            let image = image.ok_or_else(|| perr(lineno, "missing `image=`".into()))?;
            let label = label.ok_or_else(|| perr(lineno, "missing `label=`".into()))?;
            let split = split.ok_or_else(|| perr(lineno, "missing `split=`".into()))?;
            if let Some(missing) = KeypointName::ALL.iter().find(|&&n| !seen[n as usize]) {
                return Err(perr(
                    lineno,
                    format!("missing keypoint `{}`", missing.as_str()),
                ));
            }
            records.push(Record {
                image,
                label,
                split,
                keypoints: kps,
            });
        }

        let classes = classes.ok_or_else(|| perr(0, "missing `classes=` header".into()))?;
        let size = size.ok_or_else(|| perr(0, "missing `size=` header".into()))?;
        let manifest = Manifest {
            classes,
            size,
            records,
            dir,
        };
        for rec in &manifest.records {
            let (head, torso) = crate::maskgen::split_keypoints(&rec.keypoints);
            if rec.split == Split::Train && (head.is_empty() || torso.is_empty()) {
                crate::warn::emit(&format!(
                    "train record `{}` has an empty part keypoint set; its masks will degrade",
                    rec.image
                ));
            }
        }
        Ok(manifest)
    }
}

fn parse_keypoint(value: &str) -> std::result::Result<Keypoint, String> {
    let parts: Vec<&str> = value.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("keypoint `{value}` is not x,y,visibility"));
    }
    let x: f64 = parts[0]
        .parse()
        .map_err(|_| format!("bad keypoint x `{}`", parts[0]))?;
    let y: f64 = parts[1]
        .parse()
        .map_err(|_| format!("bad keypoint y `{}`", parts[1]))?;
    let visible = match parts[2] {
        "0" => false,
        "1" => true,
        other => return Err(format!("keypoint visibility must be 0 or 1, got `{other}`")),
    };
    if !x.is_finite() || !y.is_finite() {
        return Err(format!("keypoint coordinates must be finite, got {x},{y}"));
    }
    Ok(Keypoint { x, y, visible })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_rng;
    use rand::Rng;

    fn random_manifest(dir: &Path, seed: u64) -> Manifest {
        let mut rng = seeded_rng(seed);
        let mut m = Manifest::new(
            vec!["sparrow".into(), "finch".into(), "wren".into()],
            96,
            dir.to_path_buf(),
        );
        for i in 0..6 {
            let mut kps = KeypointSet::new_hidden();
            for name in KeypointName::ALL {
                if rng.gen_bool(0.8) {
                    // Full-precision coordinates: round-tripping must be
                    // lossless even for ugly decimals.
                    kps.set(
                        name,
                        Keypoint::at(rng.gen::<f64>() * 96.0, rng.gen::<f64>() * 96.0),
                    );
                }
            }
            m.records.push(Record {
                image: format!("images/bird_{i:03}.ppm"),
                label: rng.gen_range(0..3),
                split: if i % 3 == 0 { Split::Test } else { Split::Train },
                keypoints: kps,
            });
        }
        m
    }

    #[test]
    fn manifest_roundtrip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let m = random_manifest(dir.path(), 1);
        let path = dir.path().join("manifest.txt");
        m.save(&path).unwrap();
        let back = Manifest::load(&path).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn unknown_keypoint_name_is_an_error_with_the_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let m = random_manifest(dir.path(), 2);
        let path = dir.path().join("manifest.txt");
        m.save(&path).unwrap();
        let mut text = std::fs::read_to_string(&path).unwrap();
        text = text.replacen("kp.beak=", "kp.wingspan=", 1);
        std::fs::write(&path, text).unwrap();
        let err = Manifest::load(&path).unwrap_err();
        match err {
            Error::Parse { line, ref msg, .. } => {
                assert_eq!(line, 3, "first record is line 3");
                assert!(msg.contains("kp.wingspan"), "{msg}");
            }
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn missing_field_and_bad_label_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.txt");

        // Missing one keypoint.
        let m = random_manifest(dir.path(), 3);
        m.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let butchered: String = text
            .lines()
            .map(|l| {
                let mut l = l.to_string();
                if l.starts_with("image=images/bird_000") {
                    let start = l.find(" kp.tail=").unwrap();
                    l.truncate(start);
                }
                l + "\n"
            })
            .collect();
        std::fs::write(&path, butchered).unwrap();
        let err = Manifest::load(&path).unwrap_err();
        assert!(err.to_string().contains("tail"), "{err}");

        // Label out of range.
        let mut m = random_manifest(dir.path(), 4);
        m.records[0].label = 17;
        m.save(&path).unwrap();
        let err = Manifest::load(&path).unwrap_err();
        assert!(err.to_string().contains("out of range"), "{err}");
    }

    #[test]
    fn record_before_headers_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.txt");
        std::fs::write(&path, "image=a.ppm label=0 split=train\n").unwrap();
        assert!(matches!(
            Manifest::load(&path),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let m = random_manifest(dir.path(), 5);
        let path = dir.path().join("m.txt");
        m.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, format!("# generated fixture\n\n{text}")).unwrap();
        assert_eq!(Manifest::load(&path).unwrap().records, m.records);
    }

    #[test]
    fn image_paths_resolve_against_the_manifest_directory() {
        let dir = tempfile::tempdir().unwrap();
        let m = random_manifest(dir.path(), 6);
        let path = dir.path().join("m.txt");
        m.save(&path).unwrap();
        let back = Manifest::load(&path).unwrap();
        assert_eq!(
            back.image_path(&back.records[0]),
            dir.path().join("images/bird_000.ppm")
        );
    }

    #[test]
    fn split_iteration_filters_correctly() {
        let dir = tempfile::tempdir().unwrap();
        let m = random_manifest(dir.path(), 7);
        let train = m.split_records(Split::Train).count();
        let test = m.split_records(Split::Test).count();
        assert_eq!(train + test, m.records.len());
        assert!(m.split_records(Split::Test).all(|r| r.split == Split::Test));
    }
}
