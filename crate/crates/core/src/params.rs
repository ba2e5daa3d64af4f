//! Named parameter storage and the on-disk checkpoint format.
//!
//! A checkpoint is a directory holding `manifest.json` and `tensors.bin`.
//! The manifest lists every tensor with its name, shape and element offset
//! into `tensors.bin`, which is a flat little-endian `f64` array. Values are
//! written bit-for-bit so a save/load round trip is exact.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn add_normal(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let normal = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data).expect("shape"))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Mutable access to every tensor, in registration order.
    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Total element count of parameters whose name starts with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(_, n, _)| n.starts_with(prefix))
            .map(|(_, _, t)| t.numel())
            .sum()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    /// Free-form model configuration needed to rebuild the parameter layout.
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub const CHECKPOINT_FORMAT: &str = "proxyvid-checkpoint/1";

pub fn save_checkpoint(dir: &Path, config: serde_json::Value, store: &ParamStore) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(store.len());
    let mut bytes = Vec::with_capacity(store.numel() * 8);
    let mut offset = 0;
    for (_, name, t) in store.iter() {
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            len: t.numel(),
        });
        offset += t.numel();
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest { format: CHECKPOINT_FORMAT.into(), config, tensors: entries };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    fs::write(dir.join("tensors.bin"), bytes)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(serde_json::Value, ParamStore)> {
    let manifest: CheckpointManifest =
        serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unknown format {}", manifest.format)));
    }
    let bytes = fs::read(dir.join("tensors.bin"))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Checkpoint("tensors.bin is not a whole number of f64".into()));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut store = ParamStore::new();
    for e in manifest.tensors {
        let end = e.offset + e.len;
        if end > values.len() {
            return Err(Error::Checkpoint(format!("tensor {} runs past end of data", e.name)));
        }
        let t = Tensor::new(e.shape, values[e.offset..end].to_vec())
            .map_err(|err| Error::Checkpoint(format!("{}: {err}", e.name)))?;
        store.add(e.name, t);
    }
    Ok((manifest.config, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        store.add_normal("a.w", &[3, 4], 0.02, &mut rng);
        store.add("a.b", Tensor::new(vec![2], vec![f64::MIN_POSITIVE, -0.0]).unwrap());
        store.add("tau", Tensor::scalar((1.0f64 / 0.07).ln()));
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), serde_json::json!({"k": 1}), &store).unwrap();
        let (cfg, loaded) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(cfg["k"], 1);
        assert_eq!(loaded.len(), store.len());
        for ((_, n1, t1), (_, n2, t2)) in store.iter().zip(loaded.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let b1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
    }

    #[test]
    fn truncated_data_is_rejected() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::zeros(&[4]));
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), serde_json::Value::Null, &store).unwrap();
        std::fs::write(dir.path().join("tensors.bin"), [0u8; 16]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Checkpoint(_))));
    }
}
