//! Named parameters and the checkpoint archive.
//!
//! Archive layout (all integers little-endian):
//!
//! ```text
//! 8 bytes   magic "WFCKPT01"
//! 8 bytes   u64 manifest length in bytes
//! N bytes   UTF-8 JSON manifest
//! ...       raw little-endian float payloads, in manifest order
//! ```
//!
//! The manifest lists `name`, `shape`, `dtype`, `kind`, `offset` and `nbytes`
//! for each tensor, plus an optional free-form `metadata` object.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{numel, DType, Scalar, Tensor};

const MAGIC: &[u8; 8] = b"WFCKPT01";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Persistent state such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub kind: ParamKind,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Registers a tensor. Names are hierarchical (`stage0.block1.attn.qkv.weight`)
    /// and must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            value,
            grad: None,
            kind,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.kind == ParamKind::Trainable)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn num_trainable_elements(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn names(&self) -> Vec<&str> {
        self.params.iter().map(|p| p.name.as_str()).collect()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds the gradients from one backward pass into each parameter's slot.
    pub fn accumulate_grads(&mut self, grads: &crate::autograd::Gradients<T>) {
        for (id, g) in grads.params() {
            let p = &mut self.params[id.0];
            match &mut p.grad {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += *b;
                    }
                }
                slot => *slot = Some(g.clone()),
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.as_ref().map(Tensor::cast),
                    kind: p.kind,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Overwrites values from another store with the same names and shapes.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for p in &mut self.params {
            let src = other
                .by_name
                .get(&p.name)
                .map(|&i| &other.params[i])
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", p.name)))?;
            if src.value.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    p.name,
                    src.value.shape(),
                    p.value.shape()
                )));
            }
            p.value = src.value.clone();
        }
        if other.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model expects {}",
                other.len(),
                self.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub kind: ParamKind,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub params: Vec<ManifestEntry>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

/// A decoded checkpoint: parameters plus the metadata stored alongside them.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub params: ParamStore<T>,
    pub metadata: serde_json::Value,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn manifest(&self) -> Manifest {
        let mut offset = 0u64;
        let params = self
            .params
            .params
            .iter()
            .map(|p| {
                let nbytes = (p.value.numel() * T::DTYPE.size_of()) as u64;
                let e = ManifestEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    dtype: T::DTYPE,
                    kind: p.kind,
                    offset,
                    nbytes,
                };
                offset += nbytes;
                e
            })
            .collect();
        Manifest {
            format_version: 1,
            params,
            metadata: self.metadata.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest())?;
        let mut out = Vec::with_capacity(16 + manifest.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for p in &self.params.params {
            for v in p.value.data() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint archive".into()));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let payload_start = 16usize
            .checked_add(mlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[16..payload_start])?;
        let payload = &bytes[payload_start..];
        let mut params = ParamStore::new();
        for e in &manifest.params {
            if e.dtype != T::DTYPE {
                return Err(Error::Checkpoint(format!(
                    "parameter {} stored as {:?}, requested {:?}",
                    e.name,
                    e.dtype,
                    T::DTYPE
                )));
            }
            let size = T::DTYPE.size_of();
            let n = numel(&e.shape);
            let (start, end) = (e.offset as usize, (e.offset + e.nbytes) as usize);
            if n * size != e.nbytes as usize || end > payload.len() {
                return Err(Error::Checkpoint(format!("bad extent for {}", e.name)));
            }
            let data = payload[start..end].chunks_exact(size).map(T::read_le).collect();
            params.add(e.name.clone(), Tensor::new(e.shape.clone(), data)?, e.kind);
        }
        let expected: u64 = manifest.params.iter().map(|e| e.nbytes).sum();
        if expected as usize != payload.len() {
            return Err(Error::Checkpoint("trailing or missing payload bytes".into()));
        }
        Ok(Self {
            params,
            metadata: manifest.metadata,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add(
            "a.weight",
            Tensor::from_f64(&[2, 3], &[1.0, -2.5, 3.25, 0.0, 1e-7, -0.0]).unwrap(),
            ParamKind::Trainable,
        );
        s.add(
            "a.running_var",
            Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap(),
            ParamKind::Buffer,
        );
        s
    }

    #[test]
    fn archive_round_trip_is_byte_exact() {
        let ck = Checkpoint {
            params: store(),
            metadata: serde_json::json!({"model": {"embed_dim": 48}}),
        };
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.params.names(), vec!["a.weight", "a.running_var"]);
        assert_eq!(back.params.get(ParamId(1)).kind, ParamKind::Buffer);
        let manifest = back.manifest();
        assert_eq!(manifest.params[0].shape, vec![2, 3]);
        assert_eq!(manifest.params[0].dtype, DType::F32);
    }

    #[test]
    fn rejects_dtype_mismatch_and_garbage() {
        let ck = Checkpoint {
            params: store(),
            metadata: serde_json::Value::Null,
        };
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::<f64>::from_bytes(&bytes).is_err());
        assert!(Checkpoint::<f32>::from_bytes(b"nonsense").is_err());
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_panic() {
        let mut s = store();
        s.add("a.weight", Tensor::zeros(&[1]), ParamKind::Trainable);
    }
}
