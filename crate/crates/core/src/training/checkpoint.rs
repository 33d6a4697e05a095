//! Binary checkpoint format.
//!
//! ```text
//! "EMAE" | version: u16 | header_len: u32 | header: UTF-8 JSON | payload
//! ```
//!
//! The header holds the model config, feature statistics, training metadata
//! and a tensor directory (name, shape, byte offset into the payload). The
//! payload is every tensor as little-endian f32, in directory order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::FeatureStats;
use crate::error::{CheckpointFault, Error, Result};
use crate::model::ModelConfig;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"EMAE";
pub const VERSION: u16 = 1;

/// What a checkpoint's parameters parameterize.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Pre-trained encoder plus reconstruction decoder.
    Mae,
    /// Edge Transformer classifier.
    Classifier,
    /// A baseline, by its CLI name.
    Baseline(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub seed: u64,
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub stats: FeatureStats,
    pub meta: TrainMeta,
    pub params: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: ModelKind,
    model_config: ModelConfig,
    stats: FeatureStats,
    meta: TrainMeta,
    tensors: Vec<TensorEntry>,
}

fn bad_header() -> Error {
    Error::Checkpoint(CheckpointFault::BadHeader)
}

fn truncated() -> Error {
    Error::Checkpoint(CheckpointFault::Truncated)
}

impl Checkpoint {
    /// Builds a checkpoint, rounding parameters to the stored f32 precision
    /// so the value in memory equals what a reload yields.
    pub fn new(kind: ModelKind, config: ModelConfig, stats: FeatureStats, meta: TrainMeta, params: ParamStore) -> Self {
        let params = params
            .into_inner()
            .into_iter()
            .map(|(n, mut t)| {
                t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
                (n, t)
            })
            .collect();
        Checkpoint {
            kind,
            config,
            stats,
            meta,
            params,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let tensors = self
            .params
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += 4 * t.len();
                e
            })
            .collect();
        let header = Header {
            kind: self.kind.clone(),
            model_config: self.config.clone(),
            stats: self.stats.clone(),
            meta: self.meta.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Validation(format!("checkpoint header: {e}")))?;
        let header_len = u32::try_from(json.len()).map_err(|_| Error::Validation("checkpoint header too large".into()))?;

        let mut out = Vec::with_capacity(10 + json.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.params.iter() {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(if MAGIC.starts_with(bytes) { truncated() } else { Error::Checkpoint(CheckpointFault::BadMagic) });
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint(CheckpointFault::BadMagic));
        }
        let version = u16::from_le_bytes(bytes.get(4..6).ok_or_else(truncated)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(CheckpointFault::UnsupportedVersion(version)));
        }
        let header_len = u32::from_le_bytes(bytes.get(6..10).ok_or_else(truncated)?.try_into().unwrap()) as usize;
        let json = bytes.get(10..10 + header_len).ok_or_else(truncated)?;
        let header: Header = serde_json::from_slice(json).map_err(|_| bad_header())?;
        header.model_config.validate().map_err(|_| bad_header())?;
        let payload = &bytes[10 + header_len..];

        let mut params = ParamStore::new();
        let mut expected_offset = 0usize;
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            if entry.offset != expected_offset || params.contains(&entry.name) {
                return Err(bad_header());
            }
            let end = entry.offset.checked_add(4 * n).ok_or_else(bad_header)?;
            let raw = payload.get(entry.offset..end).ok_or_else(truncated)?;
            let data: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            let t = Tensor::new(entry.shape, data).map_err(|_| bad_header())?;
            if !t.is_finite() {
                return Err(bad_header());
            }
            params.insert(entry.name, t);
            expected_offset = end;
        }
        if payload.len() != expected_offset {
            return Err(bad_header());
        }
        Ok(Checkpoint {
            kind: header.kind,
            config: header.model_config,
            stats: header.stats,
            meta: header.meta,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
