//! Checkpoint file layout (little-endian):
//!
//! ```text
//! "MFCK" | u16 version | u32 metadata length | metadata JSON
//! f32 data of every tensor, in the order listed in the metadata
//! u32 CRC32 of every preceding byte
//! ```
//!
//! Tensors are listed sorted by name.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EpochRecord;
use crate::error::{Error, Result};
use crate::models::{MacroModel, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MFCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u16,
    pub model: ModelConfig,
    /// Number of completed epochs.
    pub epoch: usize,
    pub metrics: Option<EpochRecord>,
    pub matchup: Option<String>,
    pub tensors: Vec<TensorEntry>,
}

/// Model configuration plus a named parameter map.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub epoch: usize,
    pub metrics: Option<EpochRecord>,
    pub matchup: Option<String>,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn from_model(model: &MacroModel<f32>, epoch: usize, metrics: Option<EpochRecord>) -> Self {
        Checkpoint { model: model.config().clone(), epoch, metrics, matchup: None, params: model.params().clone() }
    }

    pub fn to_model(&self) -> Result<MacroModel<f32>> {
        MacroModel::from_params(&self.model, self.params.clone())
    }

    fn sorted(&self) -> Vec<(&str, &Tensor<f32>, bool)> {
        let mut v: Vec<_> = self.params.iter().map(|(_, p)| (p.name.as_str(), &p.value, p.frozen)).collect();
        v.sort_by(|a, b| a.0.cmp(b.0));
        v
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors = self.sorted();
        let meta = CheckpointMeta {
            format_version: CHECKPOINT_VERSION,
            model: self.model.clone(),
            epoch: self.epoch,
            metrics: self.metrics.clone(),
            matchup: self.matchup.clone(),
            tensors: tensors
                .iter()
                .map(|(n, t, f)| TensorEntry { name: n.to_string(), shape: t.shape().to_vec(), frozen: *f })
                .collect(),
        };
        let json = serde_json::to_vec(&meta)?;
        let len = u32::try_from(json.len()).map_err(|_| Error::Format("metadata too large".into()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t, _) in tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 14 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(trailer.try_into().unwrap()) {
            return Err(Error::Format("checkpoint checksum mismatch".into()));
        }
        let len = u32::from_le_bytes(body[6..10].try_into().unwrap()) as usize;
        let json = body.get(10..10 + len).ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let meta: CheckpointMeta =
            serde_json::from_slice(json).map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        let mut data = &body[10 + len..];
        let mut params = ParamStore::new();
        for entry in &meta.tensors {
            let n: usize = entry.shape.iter().product();
            if data.len() < 4 * n {
                return Err(Error::Format(format!("checkpoint truncated in {}", entry.name)));
            }
            let (chunk, rest) = data.split_at(4 * n);
            data = rest;
            let values = chunk.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let id = params
                .insert(entry.name.clone(), Tensor::from_vec(entry.shape.clone(), values)?)
                .map_err(|_| Error::Format(format!("duplicate tensor {}", entry.name)))?;
            params.get_mut(id).frozen = entry.frozen;
        }
        if !data.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after tensor data", data.len())));
        }
        Ok(Checkpoint { model: meta.model, epoch: meta.epoch, metrics: meta.metrics, matchup: meta.matchup, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io_at(path, e))?).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// CRC32 over the names, shapes and bytes of tensors whose name starts
    /// with one of `prefixes` (all tensors when empty).
    pub fn digest(&self, prefixes: &[&str]) -> String {
        let mut h = crc32fast::Hasher::new();
        for (name, t, _) in self.sorted() {
            if !prefixes.is_empty() && !prefixes.iter().any(|p| has_prefix(name, p)) {
                continue;
            }
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(&v.to_le_bytes());
            }
        }
        format!("{:08x}", h.finalize())
    }
}

/// `name` is `prefix` itself or lies under `prefix.`.
pub fn has_prefix(name: &str, prefix: &str) -> bool {
    name == prefix || name.strip_prefix(prefix).is_some_and(|rest| rest.starts_with('.'))
}
