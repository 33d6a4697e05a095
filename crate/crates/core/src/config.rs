//! Flat `key = value` run configuration over a closed schema.
//!
//! Lines are `key = value`; `#` starts a comment. Keys are namespaced
//! (`model.*`, `train.*`, `data.*`, `paths.*`, `eval.*`, `baseline.*`) plus
//! the top-level `seed`. Any key outside the schema is an error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::baselines::BaselineKind;
use crate::data::{DatasetSpec, FeatureWidths};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::{TrainConfig, TrainMode};

/// Every accepted key with a one-line description.
pub const SCHEMA: &[(&str, &str)] = &[
    ("seed", "run seed"),
    ("model.d_model", "token width"),
    ("model.n_heads", "attention heads"),
    ("model.n_encoder_layers", "encoder layers"),
    ("model.n_decoder_layers", "MAE decoder layers"),
    ("model.ffn_dim", "feed-forward hidden width"),
    ("model.mask_ratio", "fraction of feature tokens masked in pre-training"),
    ("model.dropout", "dropout rate during training"),
    ("train.learning_rate", "AdamW learning rate"),
    ("train.weight_decay", "decoupled weight decay"),
    ("train.batch_size", "edges per optimizer step"),
    ("train.epochs", "passes over the training edges"),
    ("train.beta1", "first-moment decay"),
    ("train.beta2", "second-moment decay"),
    ("train.eps", "AdamW denominator epsilon"),
    ("train.grad_clip", "global gradient-norm cap, or none"),
    ("data.n_heads", "number of head (active player) nodes"),
    ("data.candidates_min", "fewest candidates per head"),
    ("data.candidates_max", "most candidates per head"),
    ("data.dim_head", "head feature width"),
    ("data.dim_edge", "edge feature width"),
    ("data.dim_tail", "tail feature width"),
    ("data.signal_scale", "scale of the planted weights"),
    ("data.intimacy_weight", "planted weight of the intimacy column"),
    ("data.planted_bias", "planted logit bias"),
    ("data.unlabeled_fraction", "fraction of heads left unlabeled"),
    ("data.split_ratio", "fraction of heads in the training split"),
    ("data.latent_dim", "latent factor size, 0 for i.i.d. features"),
    ("data.latent_strength", "feature variance explained by latent factors"),
    ("paths.train", "training dataset CSV"),
    ("paths.val", "evaluation dataset CSV"),
    ("paths.init", "pre-trained checkpoint to fine-tune from"),
    ("eval.checkpoint", "checkpoint to evaluate"),
    ("eval.scorer", "checkpoint, intimacy or fresh"),
    ("baseline.kind", "edge_mlp, bilinear, distmult, transe or convkb"),
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

fn known(key: &str) -> bool {
    SCHEMA.iter().any(|(k, _)| *k == key)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected key = value, got '{line}'"),
            })?;
            cfg.set(k.trim(), v.trim()).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !known(key) {
            return Err(Error::Config(format!("unknown key '{key}'")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{pair}' is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        debug_assert!(known(key), "{key}");
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.raw(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::Config(format!("bad value '{v}' for {key}")))
            })
            .transpose()
    }

    fn or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.raw(key).map(PathBuf::from)
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf> {
        self.path(key)
            .ok_or_else(|| Error::Config(format!("{key} is required for this command")))
    }

    pub fn seed(&self) -> Result<u64> {
        self.or("seed", 0)
    }

    /// Canonical text: sorted `key = value` lines.
    pub fn canonical(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    pub fn model_config(&self, widths: FeatureWidths) -> Result<ModelConfig> {
        let d = ModelConfig::for_widths(widths);
        let cfg = ModelConfig {
            d_model: self.or("model.d_model", d.d_model)?,
            n_heads: self.or("model.n_heads", d.n_heads)?,
            n_encoder_layers: self.or("model.n_encoder_layers", d.n_encoder_layers)?,
            n_decoder_layers: self.or("model.n_decoder_layers", d.n_decoder_layers)?,
            ffn_dim: self.or("model.ffn_dim", d.ffn_dim)?,
            mask_ratio: self.or("model.mask_ratio", d.mask_ratio)?,
            dropout: self.or("model.dropout", d.dropout)?,
            ..d
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self, mode: TrainMode) -> Result<TrainConfig> {
        let d = TrainConfig::for_mode(mode);
        let grad_clip = match self.raw("train.grad_clip") {
            None => d.grad_clip,
            Some("none") => None,
            Some(_) => self.get("train.grad_clip")?,
        };
        let cfg = TrainConfig {
            optim: crate::training::AdamW {
                learning_rate: self.or("train.learning_rate", d.optim.learning_rate)?,
                weight_decay: self.or("train.weight_decay", d.optim.weight_decay)?,
                beta1: self.or("train.beta1", d.optim.beta1)?,
                beta2: self.or("train.beta2", d.optim.beta2)?,
                eps: self.or("train.eps", d.optim.eps)?,
            },
            batch_size: self.or("train.batch_size", d.batch_size)?,
            epochs: self.or("train.epochs", d.epochs)?,
            seed: self.seed()?,
            grad_clip,
            mode,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn dataset_spec(&self) -> Result<DatasetSpec> {
        let d = DatasetSpec::default();
        let spec = DatasetSpec {
            n_heads: self.or("data.n_heads", d.n_heads)?,
            candidates_min: self.or("data.candidates_min", d.candidates_min)?,
            candidates_max: self.or("data.candidates_max", d.candidates_max)?,
            widths: FeatureWidths {
                head: self.or("data.dim_head", d.widths.head)?,
                edge: self.or("data.dim_edge", d.widths.edge)?,
                tail: self.or("data.dim_tail", d.widths.tail)?,
            },
            planted: None,
            signal_scale: self.or("data.signal_scale", d.signal_scale)?,
            intimacy_weight: self.or("data.intimacy_weight", d.intimacy_weight)?,
            planted_bias: self.or("data.planted_bias", d.planted_bias)?,
            unlabeled_fraction: self.or("data.unlabeled_fraction", d.unlabeled_fraction)?,
            split_ratio: self.or("data.split_ratio", d.split_ratio)?,
            latent_dim: self.or("data.latent_dim", d.latent_dim)?,
            latent_strength: self.or("data.latent_strength", d.latent_strength)?,
            seed: self.seed()?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn baseline_kind(&self) -> Result<BaselineKind> {
        self.raw("baseline.kind")
            .ok_or_else(|| Error::Config("baseline.kind is required".into()))?
            .parse()
    }
}
