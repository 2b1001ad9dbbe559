use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors owned by one model instance.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
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

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Writes `manifest.json` (names, shapes, `extra`) and `params.f64`
    /// (all tensors concatenated, little-endian) into `dir`.
    pub fn save_snapshot<E: Serialize>(&self, dir: impl AsRef<Path>, extra: &E) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = Manifest {
            format: "dialogscore-params-v1".into(),
            tensors: self
                .names
                .iter()
                .zip(&self.tensors)
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    rows: t.rows(),
                    cols: t.cols(),
                })
                .collect(),
            extra: serde_json::to_value(extra)?,
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
        let blob: Vec<u8> = self.tensors.iter().flat_map(|t| t.data().iter().flat_map(|v| v.to_le_bytes())).collect();
        let path = dir.join("params.f64");
        fs::write(&path, blob).map_err(|e| Error::io(&path, e))
    }

    pub fn load_snapshot<E: for<'de> Deserialize<'de>>(dir: impl AsRef<Path>) -> Result<(ParamStore, E)> {
        let dir = dir.as_ref();
        let path = dir.join("manifest.json");
        let manifest: Manifest = serde_json::from_slice(&fs::read(&path).map_err(|e| Error::io(&path, e))?)?;
        let path = dir.join("params.f64");
        let blob = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let values = crate::linear::le_bytes_to_f64s(&blob)?;
        let expected: usize = manifest.tensors.iter().map(|t| t.rows * t.cols).sum();
        if values.len() != expected {
            return Err(Error::Schema(format!(
                "snapshot holds {} values, manifest describes {expected}",
                values.len()
            )));
        }
        let mut store = ParamStore::new();
        let mut offset = 0;
        for t in manifest.tensors {
            let n = t.rows * t.cols;
            store.add(t.name, Tensor::from_vec(t.rows, t.cols, values[offset..offset + n].to_vec())?);
            offset += n;
        }
        Ok((store, serde_json::from_value(manifest.extra)?))
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    tensors: Vec<TensorEntry>,
    extra: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

/// Uniform in `±sqrt(6 / (rows + cols))`.
pub fn xavier_uniform<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::from_vec(rows, cols, data).expect("shape")
}

pub fn normal<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::from_vec(rows, cols, data).expect("shape")
}
