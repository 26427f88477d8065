//! Versioned named-tensor bundle used for model persistence.
//!
//! Byte layout (little-endian throughout): magic `"USTV"`, version
//! `u32 = 1`, tensor count `u32`, then per tensor `{name_len: u32,
//! name bytes, dtype: u8 (0 = f32, 1 = f64), ndim: u8, dims: u32 ×
//! ndim, raw element bytes}`. Tensors are stored in sorted name order,
//! so saving is deterministic.
//!
//! Training state rides on naming conventions inside the bundle:
//! parameters under their own hierarchical names, Adam moments under
//! `adam.m.<name>` / `adam.v.<name>`, the step counter under
//! `meta.step` and the architecture hash under `meta.config_hash`
//! (both as exact integer-valued f64 scalars).

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::params::Params;
use crate::tensor::Tensor;
use crate::training::optim::AdamState;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"USTV";
const VERSION: u32 = 1;

/// A stored tensor in either supported dtype.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl TensorData {
    fn dtype_byte(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::F64(_) => 1,
        }
    }

    fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(t) => t.shape(),
            TensorData::F64(t) => t.shape(),
        }
    }
}

/// In-memory checkpoint: a named-tensor bundle.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, TensorData>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Bundles parameters, optimizer state, the step counter and the
    /// architecture hash.
    pub fn from_training(params: &Params<f32>, opt: &AdamState, config_hash: u32) -> Self {
        let mut tensors = BTreeMap::new();
        for (name, t) in params.iter() {
            tensors.insert(name.clone(), TensorData::F32(t.clone()));
        }
        for (name, t) in &opt.m {
            tensors.insert(format!("adam.m.{name}"), TensorData::F32(t.clone()));
        }
        for (name, t) in &opt.v {
            tensors.insert(format!("adam.v.{name}"), TensorData::F32(t.clone()));
        }
        tensors.insert(
            "meta.step".into(),
            TensorData::F64(Tensor::scalar(opt.step as f64)),
        );
        tensors.insert(
            "meta.config_hash".into(),
            TensorData::F64(Tensor::scalar(config_hash as f64)),
        );
        Self { tensors }
    }

    /// Extracts the parameter tensors (everything outside the reserved
    /// `adam.` / `meta.` prefixes).
    pub fn params(&self) -> Result<Params<f32>> {
        let mut params = Params::new();
        for (name, data) in &self.tensors {
            if name.starts_with("adam.") || name.starts_with("meta.") {
                continue;
            }
            match data {
                TensorData::F32(t) => params.insert(name.clone(), t.clone()),
                TensorData::F64(_) => {
                    return Err(Error::Format(format!(
                        "parameter {name} stored as f64; training parameters are f32"
                    )))
                }
            }
        }
        Ok(params)
    }

    /// Extracts optimizer moments and the step counter.
    pub fn adam_state(&self) -> Result<AdamState> {
        let mut state = AdamState::new();
        for (name, data) in &self.tensors {
            let (target, key) = if let Some(k) = name.strip_prefix("adam.m.") {
                (&mut state.m, k)
            } else if let Some(k) = name.strip_prefix("adam.v.") {
                (&mut state.v, k)
            } else {
                continue;
            };
            match data {
                TensorData::F32(t) => {
                    target.insert(key.to_string(), t.clone());
                }
                TensorData::F64(_) => {
                    return Err(Error::Format(format!("{name} stored as f64")));
                }
            }
        }
        state.step = self.step().unwrap_or(0);
        Ok(state)
    }

    pub fn step(&self) -> Option<u64> {
        match self.tensors.get("meta.step") {
            Some(TensorData::F64(t)) => Some(t.data()[0] as u64),
            _ => None,
        }
    }

    pub fn config_hash(&self) -> Option<u32> {
        match self.tensors.get("meta.config_hash") {
            Some(TensorData::F64(t)) => Some(t.data()[0] as u32),
            _ => None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, data) in &self.tensors {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(data.dtype_byte());
            let shape = data.shape();
            buf.push(shape.len() as u8);
            for &d in shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match data {
                TensorData::F32(t) => {
                    for v in t.data() {
                        buf.extend_from_slice(&v.to_le_bytes());
                    }
                }
                TensorData::F64(t) => {
                    for v in t.data() {
                        buf.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        let mut r = Reader { bytes: &bytes, pos: 0, path };

        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Format(format!(
                "{}: bad checkpoint magic {:?}",
                path.display(),
                &magic[..]
            )));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "{}: unsupported checkpoint version {version} (expected {VERSION})",
                path.display()
            )));
        }
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Format(format!("{}: non-UTF-8 tensor name", path.display())))?;
            let dtype = r.u8()?;
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let data = match dtype {
                0 => {
                    let raw = r.take(n * 4)?;
                    let vals: Vec<f32> = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    TensorData::F32(Tensor::new(&shape, vals).map_err(|e| {
                        Error::Format(format!("{}: {e}", path.display()))
                    })?)
                }
                1 => {
                    let raw = r.take(n * 8)?;
                    let vals: Vec<f64> = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    TensorData::F64(Tensor::new(&shape, vals).map_err(|e| {
                        Error::Format(format!("{}: {e}", path.display()))
                    })?)
                }
                other => {
                    return Err(Error::Format(format!(
                        "{}: unknown dtype tag {other}",
                        path.display()
                    )))
                }
            };
            tensors.insert(name, data);
        }
        Ok(Self { tensors })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::io(
                self.path,
                std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "truncated checkpoint"),
            ));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_tensor_byte_layout_matches_a_hand_written_oracle() {
        // one 2-element f32 tensor "w" = [1.0, -1.0]
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ckpt");
        let mut ckpt = Checkpoint::new();
        ckpt.tensors.insert(
            "w".into(),
            TensorData::F32(Tensor::new(&[2], vec![1.0, -1.0]).unwrap()),
        );
        ckpt.save(&path).unwrap();

        let mut want: Vec<u8> = Vec::new();
        want.extend_from_slice(b"USTV");
        want.extend_from_slice(&1u32.to_le_bytes()); // version
        want.extend_from_slice(&1u32.to_le_bytes()); // count
        want.extend_from_slice(&1u32.to_le_bytes()); // name_len
        want.push(b'w');
        want.push(0); // dtype f32
        want.push(1); // ndim
        want.extend_from_slice(&2u32.to_le_bytes()); // dim
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-1.0f32).to_le_bytes());
        assert_eq!(std::fs::read(&path).unwrap(), want);
    }

    #[test]
    fn unsupported_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v2.ckpt");
        let mut bytes: Vec<u8> = Vec::new();
        bytes.extend_from_slice(b"USTV");
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_file_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cut.ckpt");
        let mut ckpt = Checkpoint::new();
        ckpt.tensors.insert(
            "w".into(),
            TensorData::F32(Tensor::new(&[4], vec![1.0; 4]).unwrap()),
        );
        ckpt.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Io { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn save_load_round_trip_is_bit_exact(seed in 0u64..500) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("rt.ckpt");
            let mut ckpt = Checkpoint::new();
            for i in 0..rng.gen_range(1..5) {
                let shape = vec![rng.gen_range(1..4usize), rng.gen_range(1..6usize)];
                if rng.gen_bool(0.5) {
                    ckpt.tensors.insert(
                        format!("t{i}"),
                        TensorData::F32(Tensor::from_fn(&shape, |_| rng.gen_range(-10.0..10.0))),
                    );
                } else {
                    ckpt.tensors.insert(
                        format!("t{i}"),
                        TensorData::F64(Tensor::from_fn(&shape, |_| rng.gen_range(-10.0..10.0))),
                    );
                }
            }
            ckpt.save(&path).unwrap();
            let back = Checkpoint::load(&path).unwrap();
            prop_assert_eq!(back.tensors, ckpt.tensors);
        }
    }

    #[test]
    fn training_state_round_trip() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut params = Params::new();
        crate::params::init_conv(&mut params, "net.c", 2, 3, 3, &mut rng, false);
        let mut opt = AdamState::new();
        opt.step = 42;
        opt.m.insert("net.c.weight".into(), Tensor::zeros(&[2, 3, 3, 3]));
        opt.v.insert("net.c.weight".into(), Tensor::zeros(&[2, 3, 3, 3]));

        let ckpt = Checkpoint::from_training(&params, &opt, 0xDEADBEEF);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.step(), Some(42));
        assert_eq!(back.config_hash(), Some(0xDEADBEEF));
        let p = back.params().unwrap();
        assert_eq!(
            p.get("net.c.weight").unwrap().data(),
            params.get("net.c.weight").unwrap().data()
        );
        let state = back.adam_state().unwrap();
        assert_eq!(state.step, 42);
        assert!(state.m.contains_key("net.c.weight"));
    }
}
