//! Adapter for the standard bird-benchmark annotation layout: a root
//! directory holding `images.txt`, `image_class_labels.txt`,
//! `train_test_split.txt`, `classes.txt`, and `parts/parts.txt` +
//! `parts/part_locs.txt`, with the images themselves under `images/`.
//!
//! Everything is converted into the same [`Manifest`] the synthetic
//! generator produces, so downstream stages never know which source fed
//! them. Labels become 0-based, part names map to keypoint names by
//! lowercasing and replacing spaces with underscores, and `size=0` marks the
//! images as native-resolution (the pipeline crops/resizes on load).

use std::collections::HashMap;
use std::path::Path;

use super::{Manifest, Record, Split};
use crate::error::{Error, Result};
use crate::maskgen::{Keypoint, KeypointName, KeypointSet};

/// Read one annotation file into (line number, whitespace-split fields).
fn read_rows(path: &Path, want_fields: usize) -> Result<Vec<(usize, Vec<String>)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<String> = line.split_whitespace().map(str::to_string).collect();
        if fields.len() < want_fields {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                msg: format!("expected {} fields, got {}", want_fields, fields.len()),
            });
        }
        rows.push((idx + 1, fields));
    }
    Ok(rows)
}

fn parse_id(path: &Path, line: usize, s: &str, what: &str) -> Result<usize> {
    s.parse().map_err(|_| Error::Parse {
        path: path.display().to_string(),
        line,
        msg: format!("bad {what} `{s}`"),
    })
}

/// Load a benchmark-layout annotation tree rooted at `root`.
pub fn load_cub(root: &Path) -> Result<Manifest> {
    // Class id -> name (1-based ids in the files).
    let classes_path = root.join("classes.txt");
    let mut classes: Vec<(usize, String)> = Vec::new();
    for (line, fields) in read_rows(&classes_path, 2)? {
        let id = parse_id(&classes_path, line, &fields[0], "class id")?;
        classes.push((id, fields[1].clone()));
    }
    classes.sort_by_key(|(id, _)| *id);
    for (pos, (id, _)) in classes.iter().enumerate() {
        if *id != pos + 1 {
            return Err(Error::Data(format!(
                "class ids must be contiguous from 1, found {id} at position {}",
                pos + 1
            )));
        }
    }
    let class_names: Vec<String> = classes.into_iter().map(|(_, n)| n).collect();

    // Part id -> keypoint name.
    let parts_path = root.join("parts/parts.txt");
    let mut part_names: HashMap<usize, KeypointName> = HashMap::new();
    for (line, fields) in read_rows(&parts_path, 2)? {
        let id = parse_id(&parts_path, line, &fields[0], "part id")?;
        let raw = fields[1..].join("_").to_lowercase();
        let name = KeypointName::parse(&raw).ok_or_else(|| Error::Parse {
            path: parts_path.display().to_string(),
            line,
            msg: format!("unknown part name `{}`", fields[1..].join(" ")),
        })?;
        part_names.insert(id, name);
    }
    if part_names.len() != 15 {
        return Err(Error::Data(format!(
            "parts list has {} entries, expected 15",
            part_names.len()
        )));
    }

    // Image id -> relative path.
    let images_path = root.join("images.txt");
    let mut image_paths: HashMap<usize, (usize, String)> = HashMap::new();
    let mut image_order: Vec<usize> = Vec::new();
    for (line, fields) in read_rows(&images_path, 2)? {
        let id = parse_id(&images_path, line, &fields[0], "image id")?;
        image_paths.insert(id, (line, format!("images/{}", fields[1])));
        image_order.push(id);
    }

    // Image id -> 0-based label.
    let labels_path = root.join("image_class_labels.txt");
    let mut labels: HashMap<usize, usize> = HashMap::new();
    for (line, fields) in read_rows(&labels_path, 2)? {
        let id = parse_id(&labels_path, line, &fields[0], "image id")?;
        let class = parse_id(&labels_path, line, &fields[1], "class id")?;
        if class == 0 || class > class_names.len() {
            return Err(Error::Parse {
                path: labels_path.display().to_string(),
                line,
                msg: format!("class id {class} out of range (1..={})", class_names.len()),
            });
        }
        labels.insert(id, class - 1);
    }

    // Image id -> split.
    let split_path = root.join("train_test_split.txt");
    let mut splits: HashMap<usize, Split> = HashMap::new();
    for (line, fields) in read_rows(&split_path, 2)? {
        let id = parse_id(&split_path, line, &fields[0], "image id")?;
        let split = match fields[1].as_str() {
            "1" => Split::Train,
            "0" => Split::Test,
            other => {
                return Err(Error::Parse {
                    path: split_path.display().to_string(),
                    line,
                    msg: format!("split flag must be 0 or 1, got `{other}`"),
                })
            }
        };
        splits.insert(id, split);
    }

    // Image id -> keypoints.
    let locs_path = root.join("parts/part_locs.txt");
    let mut keypoints: HashMap<usize, (KeypointSet, usize)> = HashMap::new();
    for (line, fields) in read_rows(&locs_path, 5)? {
        let image_id = parse_id(&locs_path, line, &fields[0], "image id")?;
        let part_id = parse_id(&locs_path, line, &fields[1], "part id")?;
        let name = *part_names.get(&part_id).ok_or_else(|| Error::Parse {
            path: locs_path.display().to_string(),
            line,
            msg: format!("part id {part_id} not in parts list"),
        })?;
        let x: f64 = fields[2].parse().map_err(|_| Error::Parse {
            path: locs_path.display().to_string(),
            line,
            msg: format!("bad x `{}`", fields[2]),
        })?;
        let y: f64 = fields[3].parse().map_err(|_| Error::Parse {
            path: locs_path.display().to_string(),
            line,
            msg: format!("bad y `{}`", fields[3]),
        })?;
        let visible = match fields[4].as_str() {
            "1" => true,
            "0" => false,
            other => {
                return Err(Error::Parse {
                    path: locs_path.display().to_string(),
                    line,
                    msg: format!("visibility must be 0 or 1, got `{other}`"),
                })
            }
        };
        let entry = keypoints
            .entry(image_id)
            .or_insert_with(|| (KeypointSet::new_hidden(), 0));
        entry.0.set(name, Keypoint { x, y, visible });
        entry.1 += 1;
    }

    let mut manifest = Manifest::new(class_names, 0, root.to_path_buf());
    for id in image_order {
        let (_, image) = image_paths[&id].clone();
        let label = *labels.get(&id).ok_or_else(|| {
            Error::Data(format!("image {id} has no entry in image_class_labels.txt"))
        })?;
        let split = *splits
            .get(&id)
            .ok_or_else(|| Error::Data(format!("image {id} has no entry in train_test_split.txt")))?;
        let (kps, count) = keypoints
            .get(&id)
            .ok_or_else(|| Error::Data(format!("image {id} has no keypoints in part_locs.txt")))?;
        if *count != 15 {
            return Err(Error::Data(format!(
                "image {id} has {count} keypoint rows (expected 15)"
            )));
        }
        manifest.records.push(Record {
            image,
            label,
            split,
            keypoints: kps.clone(),
        });
    }
    Ok(manifest)
}
