//! Edge Transformer and its masked-autoencoder pre-training.

pub mod mae;
pub mod transformer;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::{EdgeRecord, FeatureStats, FeatureWidths};
use crate::error::{Error, Result};
use crate::params::Bound;
use crate::tensor::Tensor;

pub use mae::{MaskPlan, TOKEN_COUNT};
pub use transformer::TokenSequence;

/// Architectural hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub ffn_dim: usize,
    pub dim_head_features: usize,
    pub dim_edge_features: usize,
    pub dim_tail_features: usize,
    pub mask_ratio: f64,
    pub dropout: f64,
}

/// Layer-norm epsilon used throughout.
pub const LN_EPS: f64 = 1e-5;
/// Standard deviation of the normal initializer.
pub const INIT_STD: f64 = 0.02;

impl Default for ModelConfig {
    /// Desk-scale defaults: three heads as in the reference setup, with a
    /// width divisible by three.
    fn default() -> Self {
        ModelConfig {
            d_model: 48,
            n_heads: 3,
            n_encoder_layers: 2,
            n_decoder_layers: 1,
            ffn_dim: 192,
            dim_head_features: 16,
            dim_edge_features: 4,
            dim_tail_features: 16,
            mask_ratio: 1.0 / 3.0,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    /// Default architecture sized for a dataset's feature widths.
    pub fn for_widths(w: FeatureWidths) -> Self {
        ModelConfig {
            dim_head_features: w.head,
            dim_edge_features: w.edge,
            dim_tail_features: w.tail,
            ..ModelConfig::default()
        }
    }

    pub fn widths(&self) -> FeatureWidths {
        FeatureWidths {
            head: self.dim_head_features,
            edge: self.dim_edge_features,
            tail: self.dim_tail_features,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_encoder_layers", self.n_encoder_layers),
            ("n_decoder_layers", self.n_decoder_layers),
            ("ffn_dim", self.ffn_dim),
            ("dim_head_features", self.dim_head_features),
            ("dim_edge_features", self.dim_edge_features),
            ("dim_tail_features", self.dim_tail_features),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config(format!("mask_ratio {} not in (0,1)", self.mask_ratio)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0,1)", self.dropout)));
        }
        Ok(())
    }

    /// Closed-form parameter count of the Edge Transformer classifier:
    ///
    /// ```text
    /// embed   = Σ_{w ∈ {d_h, d_r, d_t}} (w·D + D + D·D + D) + D + 4·D
    /// layer   = 4·(D·D + D) + 2·2·D + (D·F + F) + (F·D + D)
    /// head    = D + 1
    /// total   = embed + L·layer + head
    /// ```
    pub fn classifier_param_count(&self) -> usize {
        let d = self.d_model;
        let f = self.ffn_dim;
        let embed: usize = [self.dim_head_features, self.dim_edge_features, self.dim_tail_features]
            .iter()
            .map(|w| w * d + d + d * d + d)
            .sum::<usize>()
            + d
            + TOKEN_COUNT * d;
        embed + self.n_encoder_layers * layer_param_count(d, f) + d + 1
    }
}

pub(crate) fn layer_param_count(d: usize, f: usize) -> usize {
    4 * (d * d + d) + 4 * d + (d * f + f) + (f * d + d)
}

/// Standardized features for a batch of edges, one matrix per token type.
#[derive(Debug, Clone)]
pub struct EdgeInputs {
    pub head: Tensor,
    pub edge: Tensor,
    pub tail: Tensor,
}

impl EdgeInputs {
    pub fn new(edges: &[&EdgeRecord], stats: &FeatureStats) -> Result<Self> {
        if edges.is_empty() {
            return Err(Error::Validation("empty edge batch".into()));
        }
        let w = stats.widths();
        let n = edges.len();
        let mut h = Vec::with_capacity(n * w.head);
        let mut r = Vec::with_capacity(n * w.edge);
        let mut t = Vec::with_capacity(n * w.tail);
        for e in edges {
            w.check(e)?;
            let [xh, xr, xt] = stats.apply(e);
            h.extend(xh);
            r.extend(xr);
            t.extend(xt);
        }
        Ok(EdgeInputs {
            head: Tensor::new(vec![n, w.head], h)?,
            edge: Tensor::new(vec![n, w.edge], r)?,
            tail: Tensor::new(vec![n, w.tail], t)?,
        })
    }

    pub fn len(&self) -> usize {
        self.head.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Inputs in token order (head, edge, tail).
    pub fn parts(&self) -> [&Tensor; 3] {
        [&self.head, &self.edge, &self.tail]
    }
}

/// One forward pass: the graph, bound parameters, config, and an optional
/// dropout stream (absent at inference).
pub struct Forward<'a> {
    pub g: &'a mut Graph,
    pub p: &'a Bound,
    pub cfg: &'a ModelConfig,
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl Forward<'_> {
    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let rate = self.cfg.dropout;
        let Some(rng) = self.rng.as_deref_mut() else {
            return Ok(x);
        };
        if rate == 0.0 {
            return Ok(x);
        }
        use rand::Rng;
        let n = self.g.value(x).len();
        let keep: Vec<bool> = (0..n).map(|_| rng.random::<f64>() >= rate).collect();
        self.g.dropout(x, &keep, rate)
    }
}
