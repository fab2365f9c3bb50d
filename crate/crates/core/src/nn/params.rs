//! Named parameter tensors and the on-disk checkpoint format.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::scalar::Scalar;
use crate::error::{Error, Result};

/// Magic string identifying checkpoint manifests.
pub const CHECKPOINT_MAGIC: &str = "FFORGE-CKPT-1";

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    /// Batch-norm running statistics are stored here too but never receive gradients.
    pub trainable: bool,
}

/// Ordered collection of named tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    pub params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<T>, trainable: bool) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.params.push(Param {
            name: name.into(),
            shape,
            data,
            trainable,
        });
        self.params.len() - 1
    }

    #[inline]
    pub fn get(&self, i: usize) -> &[T] {
        &self.params[i].data
    }

    #[inline]
    pub fn get_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.params[i].data
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalars in trainable tensors.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.data.iter().all(|v| v.is_finite()))
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|&v| U::of(v.f64())).collect(),
                    trainable: p.trainable,
                })
                .collect(),
        }
    }

    /// Zero-filled gradient buffers, one per tensor (empty for non-trainable ones).
    pub fn zeros_like(&self) -> Vec<Vec<T>> {
        self.params
            .iter()
            .map(|p| {
                if p.trainable {
                    vec![T::zero(); p.data.len()]
                } else {
                    Vec::new()
                }
            })
            .collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    magic: String,
    metadata: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Writes `dir/manifest.json` plus one little-endian f32 payload per tensor
/// under `dir/tensors/`. `metadata` carries configuration and hyperparameters.
pub fn save_checkpoint(dir: &Path, params: &ParamStore<f32>, metadata: serde_json::Value) -> Result<()> {
    let tensor_dir = dir.join("tensors");
    fs::create_dir_all(&tensor_dir).map_err(|e| Error::io(&tensor_dir, e))?;
    let mut entries = Vec::with_capacity(params.len());
    for p in &params.params {
        let file = format!("tensors/{}.f32", p.name);
        let mut bytes = Vec::with_capacity(p.data.len() * 4);
        for v in &p.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(TensorEntry {
            name: p.name.clone(),
            shape: p.shape.clone(),
            trainable: p.trainable,
            file,
        });
    }
    let manifest = Manifest {
        magic: CHECKPOINT_MAGIC.to_string(),
        metadata,
        tensors: entries,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Reads a checkpoint written by [`save_checkpoint`], returning the tensors and metadata.
pub fn load_checkpoint(dir: &Path) -> Result<(ParamStore<f32>, serde_json::Value)> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    if manifest.magic != CHECKPOINT_MAGIC {
        return Err(Error::invalid(format!(
            "{}: not a checkpoint (magic {:?})",
            path.display(),
            manifest.magic
        )));
    }
    let mut store = ParamStore::default();
    for t in manifest.tensors {
        let p = dir.join(&t.file);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        let n: usize = t.shape.iter().product();
        if bytes.len() != n * 4 {
            return Err(Error::shape(format!(
                "{}: {} bytes for shape {:?}",
                p.display(),
                bytes.len(),
                t.shape
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        store.push(t.name, t.shape, data, t.trainable);
    }
    Ok((store, manifest.metadata))
}
