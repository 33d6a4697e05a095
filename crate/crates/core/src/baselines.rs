//! Link-prediction baselines scored on the same three-MLP token embeddings
//! as the main model, plus intimacy ranking.
//!
//! Learned baselines produce one logit per edge and train with the same BCE
//! loss and optimizer as the Edge Transformer.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::{EdgeRecord, FeatureStats};
use crate::error::{Error, Result};
use crate::model::transformer::{FEATURE_TOKENS, SCORE_CHUNK};
use crate::model::{EdgeInputs, ModelConfig, INIT_STD};
use crate::params::{linear, Bound, Gradients, Init, ParamStore};
use crate::tensor::Tensor;

/// Number of ConvKB filters.
pub const CONVKB_FILTERS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    EdgeMlp,
    Bilinear,
    DistMult,
    TransE,
    ConvKb,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 5] = [
        BaselineKind::EdgeMlp,
        BaselineKind::Bilinear,
        BaselineKind::DistMult,
        BaselineKind::TransE,
        BaselineKind::ConvKb,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::EdgeMlp => "edge_mlp",
            BaselineKind::Bilinear => "bilinear",
            BaselineKind::DistMult => "distmult",
            BaselineKind::TransE => "transe",
            BaselineKind::ConvKb => "convkb",
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BaselineKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown baseline '{s}'")))
    }
}

/// `E_h`, `E_r`, `E_t` for one edge.
#[derive(Debug, Clone, PartialEq)]
pub struct TripleEmbedding {
    pub head: Vec<f64>,
    pub edge: Vec<f64>,
    pub tail: Vec<f64>,
}

/// `−‖E_h + E_r − E_t‖₂`.
pub fn transe_score(e: &TripleEmbedding) -> f64 {
    -e.head
        .iter()
        .zip(&e.edge)
        .zip(&e.tail)
        .map(|((h, r), t)| (h + r - t).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// `Σᵢ E_h[i]·E_r[i]·E_t[i]`.
pub fn distmult_score(e: &TripleEmbedding) -> f64 {
    e.head.iter().zip(&e.edge).zip(&e.tail).map(|((h, r), t)| h * r * t).sum()
}

/// `E_hᵀ W E_t + b`.
pub fn bilinear_score(head: &[f64], tail: &[f64], w: &Tensor, b: f64) -> f64 {
    let mut s = b;
    for (i, h) in head.iter().enumerate() {
        s += h * w.row(i).iter().zip(tail).map(|(a, t)| a * t).sum::<f64>();
    }
    s
}

/// ConvKB: filters `[f×3]` slide over the rows of `[E_h | E_r | E_t]`, the
/// ReLU feature maps are concatenated filter by filter and passed through a
/// dense layer to one score.
pub fn convkb_score(e: &TripleEmbedding, filters: &Tensor, filter_bias: &[f64], dense_w: &[f64], dense_b: f64) -> f64 {
    let d = e.head.len();
    let mut s = dense_b;
    for k in 0..filters.rows() {
        let w = filters.row(k);
        for i in 0..d {
            let v = (w[0] * e.head[i] + w[1] * e.edge[i] + w[2] * e.tail[i] + filter_bias[k]).max(0.0);
            s += dense_w[k * d + i] * v;
        }
    }
    s
}

/// Orders candidates of one head by descending intimacy score
/// (`x_edge[intimacy_index]`), ties by ascending tail id.
pub fn intimacy_rank<'a>(candidates: &[&'a EdgeRecord], intimacy_index: usize) -> Result<Vec<&'a EdgeRecord>> {
    if let Some(first) = candidates.first() {
        if candidates.iter().any(|c| c.head_id != first.head_id) {
            return Err(Error::Validation("intimacy ranking needs candidates of one head".into()));
        }
    }
    if let Some(c) = candidates.iter().find(|c| intimacy_index >= c.x_edge.len()) {
        return Err(Error::Config(format!(
            "intimacy column {intimacy_index} missing: edge {} has {} edge features",
            c.edge_id,
            c.x_edge.len()
        )));
    }
    let mut out = candidates.to_vec();
    out.sort_by(|a, b| {
        b.x_edge[intimacy_index]
            .total_cmp(&a.x_edge[intimacy_index])
            .then(a.tail_id.cmp(&b.tail_id))
    });
    Ok(out)
}

pub fn init_baseline(kind: BaselineKind, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<ParamStore> {
    cfg.validate()?;
    let d = cfg.d_model;
    let (dh, dr, dt) = (cfg.dim_head_features, cfg.dim_edge_features, cfg.dim_tail_features);
    let mut store = ParamStore::new();
    let mut init = Init { store: &mut store, rng, std: INIT_STD };
    let mlp = |init: &mut Init<'_, ChaCha8Rng>, name: &str, w: usize| {
        init.linear(&format!("baseline.{name}.fc1"), w, d);
        init.linear(&format!("baseline.{name}.fc2"), d, d);
    };
    match kind {
        BaselineKind::EdgeMlp => {
            init.linear("baseline.mlp.fc1", dh + dr + dt, d);
            init.linear("baseline.mlp.fc2", d, d);
            init.linear("baseline.mlp.fc3", d, 1);
        }
        BaselineKind::Bilinear => {
            mlp(&mut init, "head", dh + dr);
            mlp(&mut init, "tail", dt);
            init.normal("baseline.bilinear.weight".into(), &[d, d]);
            init.zeros("baseline.bilinear.bias".into(), &[1]);
        }
        BaselineKind::DistMult | BaselineKind::TransE => {
            for (name, w) in FEATURE_TOKENS.iter().zip([dh, dr, dt]) {
                mlp(&mut init, name, w);
            }
        }
        BaselineKind::ConvKb => {
            for (name, w) in FEATURE_TOKENS.iter().zip([dh, dr, dt]) {
                mlp(&mut init, name, w);
            }
            // Filters start near the translation pattern [0.1, 0.1, -0.1].
            let mut filters = Tensor::randn(&[CONVKB_FILTERS, 3], INIT_STD, init.rng);
            for row in filters.data_mut().chunks_mut(3) {
                row[0] += 0.1;
                row[1] += 0.1;
                row[2] -= 0.1;
            }
            init.store.insert("baseline.conv.weight", filters);
            init.zeros("baseline.conv.bias".into(), &[CONVKB_FILTERS]);
            init.linear("baseline.dense", CONVKB_FILTERS * d, 1);
        }
    }
    Ok(store)
}

fn token_mlp(g: &mut Graph, p: &Bound, name: &str, x: &Tensor) -> Result<Var> {
    let x = g.constant(x.clone())?;
    let h = linear(g, p, &format!("baseline.{name}.fc1"), x)?;
    let h = g.relu(h)?;
    linear(g, p, &format!("baseline.{name}.fc2"), h)
}

fn concat_inputs(parts: &[&Tensor]) -> Result<Tensor> {
    let n = parts[0].rows();
    let width: usize = parts.iter().map(|t| t.cols()).sum();
    let mut data = Vec::with_capacity(n * width);
    for i in 0..n {
        for t in parts {
            data.extend_from_slice(t.row(i));
        }
    }
    Tensor::new(vec![n, width], data)
}

/// The `E_h, E_r, E_t` token embeddings `[B×D]` used by triple scorers.
/// For Bilinear, the head side consumes `[X_h; X_r]` and there is no edge
/// token, so `edge` is `None`.
pub fn embeddings(g: &mut Graph, p: &Bound, kind: BaselineKind, inputs: &EdgeInputs) -> Result<(Var, Option<Var>, Var)> {
    match kind {
        BaselineKind::EdgeMlp => Err(Error::Validation("edge_mlp has no token embeddings".into())),
        BaselineKind::Bilinear => {
            let hr = concat_inputs(&[&inputs.head, &inputs.edge])?;
            let h = token_mlp(g, p, "head", &hr)?;
            let t = token_mlp(g, p, "tail", &inputs.tail)?;
            Ok((h, None, t))
        }
        _ => {
            let h = token_mlp(g, p, "head", &inputs.head)?;
            let r = token_mlp(g, p, "edge", &inputs.edge)?;
            let t = token_mlp(g, p, "tail", &inputs.tail)?;
            Ok((h, Some(r), t))
        }
    }
}

/// Logits `[B×1]` for a batch.
pub fn baseline_logits(g: &mut Graph, p: &Bound, kind: BaselineKind, inputs: &EdgeInputs) -> Result<Var> {
    if kind == BaselineKind::EdgeMlp {
        let x = concat_inputs(&inputs.parts())?;
        let x = g.constant(x)?;
        let h = linear(g, p, "baseline.mlp.fc1", x)?;
        let h = g.relu(h)?;
        let h = linear(g, p, "baseline.mlp.fc2", h)?;
        let h = g.relu(h)?;
        return linear(g, p, "baseline.mlp.fc3", h);
    }
    let (h, r, t) = embeddings(g, p, kind, inputs)?;
    match kind {
        BaselineKind::TransE => {
            let hr = g.add(h, r.unwrap())?;
            let diff = g.sub(hr, t)?;
            let norm = g.row_norm(diff)?;
            g.scale(norm, -1.0)
        }
        BaselineKind::DistMult => {
            let hr = g.mul(h, r.unwrap())?;
            let hrt = g.mul(hr, t)?;
            g.row_sum(hrt)
        }
        BaselineKind::Bilinear => {
            let hw = g.matmul(h, p.var("baseline.bilinear.weight")?)?;
            let prod = g.mul(hw, t)?;
            let s = g.row_sum(prod)?;
            g.add_tiled(s, p.var("baseline.bilinear.bias")?)
        }
        BaselineKind::ConvKb => {
            let maps = g.conv_triple(h, r.unwrap(), t, p.var("baseline.conv.weight")?, p.var("baseline.conv.bias")?)?;
            let maps = g.relu(maps)?;
            linear(g, p, "baseline.dense", maps)
        }
        BaselineKind::EdgeMlp => unreachable!(),
    }
}

/// Mean BCE of a baseline's logits on a batch, with gradients.
pub fn baseline_loss(params: &ParamStore, kind: BaselineKind, inputs: &EdgeInputs, labels: &[f64]) -> Result<(f64, Gradients)> {
    let mut g = Graph::new();
    let p = Bound::new(&mut g, params)?;
    let z = baseline_logits(&mut g, &p, kind, inputs)?;
    let loss = g.bce_with_logits(z, labels)?;
    g.backward(loss)?;
    Ok((g.value(loss).item(), p.gradients(&mut g)))
}

pub fn baseline_scores(params: &ParamStore, kind: BaselineKind, stats: &FeatureStats, edges: &[&EdgeRecord]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(edges.len());
    for chunk in edges.chunks(SCORE_CHUNK) {
        let inputs = EdgeInputs::new(chunk, stats)?;
        let mut g = Graph::new();
        let p = Bound::frozen(&mut g, params)?;
        let z = baseline_logits(&mut g, &p, kind, &inputs)?;
        out.extend_from_slice(g.value(z).data());
    }
    Ok(out)
}

/// Logit of the Edge MLP on `[X_h; X_r; X_t]`.
pub fn edge_mlp_score(edge: &EdgeRecord, params: &ParamStore, stats: &FeatureStats) -> Result<f64> {
    Ok(baseline_scores(params, BaselineKind::EdgeMlp, stats, &[edge])?[0])
}

/// Token embeddings of one edge (Bilinear's `edge` is empty).
pub fn triple_embedding(edge: &EdgeRecord, params: &ParamStore, kind: BaselineKind, stats: &FeatureStats) -> Result<TripleEmbedding> {
    let inputs = EdgeInputs::new(&[edge], stats)?;
    let mut g = Graph::new();
    let p = Bound::frozen(&mut g, params)?;
    let (h, r, t) = embeddings(&mut g, &p, kind, &inputs)?;
    Ok(TripleEmbedding {
        head: g.value(h).data().to_vec(),
        edge: r.map(|r| g.value(r).data().to_vec()).unwrap_or_default(),
        tail: g.value(t).data().to_vec(),
    })
}
