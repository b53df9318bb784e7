//! Binary containers for model parameters and extracted features.
//!
//! Both formats are little-endian throughout and carry a four-byte magic and
//! a `u32` version so stale files fail loudly instead of deserializing into
//! garbage. Checkpoint records are written in sorted name order, which makes
//! the bytes a pure function of the parameter values — two stores holding the
//! same tensors serialize identically no matter how they were built.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Shape4, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MCNN";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const FEATURES_MAGIC: &[u8; 4] = b"MCFT";
pub const FEATURES_VERSION: u32 = 1;

fn fmt_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        msg: msg.into(),
    }
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

fn read_f32s(r: &mut impl Read, path: &Path, count: usize, what: &str) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; count * 4];
    r.read_exact(&mut bytes)
        .map_err(|_| fmt_err(path, format!("truncated while reading {what}")))?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Serialize every parameter in the store, sorted by name.
pub fn save_checkpoint(path: &Path, store: &ParamStore<f32>) -> Result<()> {
    let mut params: Vec<(&str, &Tensor<f32>)> =
        store.iter().map(|p| (p.name.as_str(), &p.value)).collect();
    params.sort_by_key(|(name, _)| *name);

    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(CHECKPOINT_MAGIC).map_err(|e| Error::io(path, e))?;
    write_u32(&mut w, path, CHECKPOINT_VERSION)?;
    for (name, tensor) in params {
        write_u32(&mut w, path, name.len() as u32)?;
        w.write_all(name.as_bytes()).map_err(|e| Error::io(path, e))?;
        let s = tensor.shape();
        write_u32(&mut w, path, 4)?;
        for dim in [s.n, s.c, s.h, s.w] {
            write_u32(&mut w, path, dim as u32)?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read back every record, in the (sorted) order they appear in the file.
pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let size = file.metadata().map_err(|e| Error::io(path, e))?.len();
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| fmt_err(path, "truncated while reading magic"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(fmt_err(path, "not a checkpoint file (bad magic)"));
    }
    let version = read_u32(&mut r, path, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(fmt_err(
            path,
            format!("unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"),
        ));
    }

    let mut out = Vec::new();
    let mut consumed = 8u64;
    while consumed < size {
        let name_len = read_u32(&mut r, path, "parameter name length")? as usize;
        if name_len == 0 || name_len > 4096 {
            return Err(fmt_err(path, format!("implausible name length {name_len}")));
        }
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)
            .map_err(|_| fmt_err(path, "truncated while reading parameter name"))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| fmt_err(path, "parameter name is not UTF-8"))?;
        let rank = read_u32(&mut r, path, "rank")?;
        if rank != 4 {
            return Err(fmt_err(
                path,
                format!("parameter `{name}` has rank {rank} (expected 4)"),
            ));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = read_u32(&mut r, path, "dimension")? as usize;
        }
        let shape = Shape4::new(dims[0], dims[1], dims[2], dims[3]);
        let data = read_f32s(&mut r, path, shape.count(), &format!("data of `{name}`"))?;
        out.push((name, Tensor::from_vec(shape, data)?));
        consumed += 4 + name_len as u64 + 4 + 16 + 4 * shape.count() as u64;
    }
    Ok(out)
}

/// Load a checkpoint into a store built by the matching model constructor.
/// The parameter name sets must agree exactly and every shape must match;
/// anything else means the file belongs to a different architecture.
pub fn load_checkpoint_into(path: &Path, store: &mut ParamStore<f32>) -> Result<()> {
    let records = load_checkpoint(path)?;
    if records.len() != store.len() {
        return Err(fmt_err(
            path,
            format!(
                "checkpoint has {} parameters, model expects {}",
                records.len(),
                store.len()
            ),
        ));
    }
    for (name, tensor) in records {
        let id = store.lookup(&name).ok_or_else(|| {
            fmt_err(path, format!("checkpoint parameter `{name}` not in model"))
        })?;
        let param = store.get_mut(id);
        if param.value.shape() != tensor.shape() {
            return Err(fmt_err(
                path,
                format!(
                    "parameter `{name}` has shape {} in file but {} in model",
                    tensor.shape(),
                    param.value.shape()
                ),
            ));
        }
        param.value = tensor;
    }
    store.zero_grads();
    Ok(())
}

/// A table of feature rows with one class label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    dim: usize,
    rows: Vec<f32>,
    labels: Vec<u32>,
}

impl FeatureSet {
    pub fn new(dim: usize) -> Result<FeatureSet> {
        if dim == 0 {
            return Err(Error::Config("feature dimension must be positive".into()));
        }
        Ok(FeatureSet {
            dim,
            rows: Vec::new(),
            labels: Vec::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.labels.len()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels.iter().map(|&l| l as usize)
    }

    pub fn push(&mut self, row: &[f32], label: usize) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::Shape(format!(
                "feature row has {} values, set expects {}",
                row.len(),
                self.dim
            )));
        }
        self.rows.extend_from_slice(row);
        self.labels.push(label as u32);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(FEATURES_MAGIC).map_err(|e| Error::io(path, e))?;
        write_u32(&mut w, path, FEATURES_VERSION)?;
        write_u32(&mut w, path, self.count() as u32)?;
        write_u32(&mut w, path, self.dim as u32)?;
        for &v in &self.rows {
            w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
        }
        for &l in &self.labels {
            write_u32(&mut w, path, l)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<FeatureSet> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| fmt_err(path, "truncated while reading magic"))?;
        if &magic != FEATURES_MAGIC {
            return Err(fmt_err(path, "not a feature file (bad magic)"));
        }
        let version = read_u32(&mut r, path, "version")?;
        if version != FEATURES_VERSION {
            return Err(fmt_err(
                path,
                format!("unsupported feature file version {version} (expected {FEATURES_VERSION})"),
            ));
        }
        let count = read_u32(&mut r, path, "row count")? as usize;
        let dim = read_u32(&mut r, path, "dimension")? as usize;
        if dim == 0 {
            return Err(fmt_err(path, "feature dimension is zero"));
        }
        let rows = read_f32s(&mut r, path, count * dim, "feature rows")?;
        let mut labels = Vec::with_capacity(count);
        for _ in 0..count {
            labels.push(read_u32(&mut r, path, "label")?);
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
            return Err(fmt_err(path, "trailing bytes after final label"));
        }
        Ok(FeatureSet { dim, rows, labels })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_rng;
    use rand::Rng;

    fn store_with(names_in_order: &[&str], seed: u64) -> ParamStore<f32> {
        let mut rng = seeded_rng(seed);
        let mut store = ParamStore::new();
        for &name in names_in_order {
            let shape = Shape4::new(
                rng.gen_range(1..3),
                rng.gen_range(1..4),
                rng.gen_range(1..5),
                rng.gen_range(1..5),
            );
            let t = Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-2.0f32..2.0));
            store.add(name, t).unwrap();
        }
        store
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let mut store = store_with(&["conv1.w", "conv1.b", "head.w"], 1);
        // Values that stress the encoding: signed zero, subnormal, extremes.
        store.get_mut(store.lookup("head.w").unwrap()).value.data_mut()[0] = -0.0;
        store.get_mut(store.lookup("conv1.b").unwrap()).value.data_mut()[0] = f32::MIN_POSITIVE / 2.0;

        save_checkpoint(&path, &store).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.len(), 3);
        for (name, tensor) in &back {
            let orig = &store.get(store.lookup(name).unwrap()).value;
            assert_eq!(orig.shape(), tensor.shape());
            for (a, b) in orig.data().iter().zip(tensor.data()) {
                assert_eq!(a.to_bits(), b.to_bits(), "parameter {name}");
            }
        }
    }

    #[test]
    fn checkpoint_bytes_do_not_depend_on_insertion_order() {
        let dir = tempfile::tempdir().unwrap();
        let a_path = dir.path().join("a.bin");
        let b_path = dir.path().join("b.bin");

        // Same tensors, inserted in different orders.
        let a = store_with(&["p.one", "p.two", "p.three"], 2);
        let mut b = ParamStore::new();
        for name in ["p.three", "p.one", "p.two"] {
            let t = a.get(a.lookup(name).unwrap()).value.clone();
            b.add(name, t).unwrap();
        }

        save_checkpoint(&a_path, &a).unwrap();
        save_checkpoint(&b_path, &b).unwrap();
        assert_eq!(
            std::fs::read(&a_path).unwrap(),
            std::fs::read(&b_path).unwrap()
        );

        // And the on-disk order is sorted.
        let names: Vec<String> = load_checkpoint(&a_path)
            .unwrap()
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
    }

    #[test]
    fn truncated_checkpoint_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        save_checkpoint(&path, &store_with(&["w"], 3)).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        // Chop mid-record at several depths: inside the data, inside the
        // dims, inside the name.
        for cut in [bytes.len() - 3, bytes.len() - 11, 13, 9] {
            std::fs::write(&path, &bytes[..cut]).unwrap();
            let err = load_checkpoint(&path).unwrap_err();
            assert!(
                matches!(err, Error::Format { .. }),
                "cut at {cut}: {err}"
            );
            assert!(err.to_string().contains("truncated"), "cut at {cut}: {err}");
        }
    }

    #[test]
    fn wrong_magic_and_version_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        save_checkpoint(&path, &store_with(&["w"], 4)).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path).unwrap_err().to_string().contains("magic"));

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'M';
        bytes[4] = 9;
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn load_into_checks_names_and_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let src = store_with(&["w", "b"], 5);
        save_checkpoint(&path, &src).unwrap();

        // Happy path copies values.
        let mut dst = ParamStore::new();
        for p in src.iter() {
            dst.add(&p.name, Tensor::zeros(p.value.shape())).unwrap();
        }
        load_checkpoint_into(&path, &mut dst).unwrap();
        assert_eq!(
            dst.get(dst.lookup("w").unwrap()).value.data(),
            src.get(src.lookup("w").unwrap()).value.data()
        );

        // Name mismatch.
        let mut wrong_name = ParamStore::new();
        wrong_name
            .add("w", src.get(src.lookup("w").unwrap()).value.clone())
            .unwrap();
        wrong_name.add("bias", Tensor::zeros(Shape4::new(1, 1, 1, 1))).unwrap();
        assert!(load_checkpoint_into(&path, &mut wrong_name).is_err());

        // Shape mismatch.
        let mut wrong_shape = ParamStore::new();
        wrong_shape.add("w", Tensor::zeros(Shape4::new(9, 9, 1, 1))).unwrap();
        wrong_shape
            .add("b", src.get(src.lookup("b").unwrap()).value.clone())
            .unwrap();
        assert!(load_checkpoint_into(&path, &mut wrong_shape).is_err());

        // Parameter count mismatch.
        let mut too_few = ParamStore::new();
        too_few
            .add("w", src.get(src.lookup("w").unwrap()).value.clone())
            .unwrap();
        assert!(load_checkpoint_into(&path, &mut too_few).is_err());
    }

    #[test]
    fn feature_set_roundtrip_preserves_rows_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features.bin");
        let mut rng = seeded_rng(6);
        let mut set = FeatureSet::new(12).unwrap();
        for i in 0..9 {
            let row: Vec<f32> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            set.push(&row, i % 4).unwrap();
        }
        set.save(&path).unwrap();
        let back = FeatureSet::load(&path).unwrap();
        assert_eq!(set, back);
        assert_eq!(back.count(), 9);
        assert_eq!(back.dim(), 12);
        assert_eq!(back.label(5), 1);
    }

    #[test]
    fn feature_set_rejects_truncation_wrong_width_and_trailing_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features.bin");
        let mut set = FeatureSet::new(3).unwrap();
        set.push(&[1.0, 2.0, 3.0], 0).unwrap();
        assert!(set.push(&[1.0, 2.0], 1).is_err());
        set.save(&path).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(FeatureSet::load(&path).unwrap_err().to_string().contains("truncated"));

        let mut padded = bytes.clone();
        padded.push(0);
        std::fs::write(&path, &padded).unwrap();
        assert!(FeatureSet::load(&path).unwrap_err().to_string().contains("trailing"));
    }
}
