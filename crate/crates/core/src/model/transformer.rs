//! Edge Transformer: three token-embedding MLPs, a learnable CLS token,
//! position embeddings, a post-norm Transformer encoder and a linear head on
//! the final CLS state.
//!
//! All forward functions work on a batch of `B` edges laid out as a
//! `[B·4 × D]` matrix, edge `b` occupying rows `4b..4b+4` in the order
//! `[CLS, head, edge, tail]`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{EdgeInputs, Forward, ModelConfig, INIT_STD, LN_EPS};
use crate::autodiff::{sigmoid, Graph, Var};
use crate::data::{EdgeRecord, FeatureStats};
use crate::error::{Error, Result};
use crate::params::{linear, Bound, Gradients, Init, ParamStore};
use crate::tensor::Tensor;

/// Names of the three feature tokens, in sequence order after CLS.
pub const FEATURE_TOKENS: [&str; 3] = ["head", "edge", "tail"];

/// The `4×D` input sequence of one edge: rows `[CLS, H_h, H_r, H_t]`, each
/// already carrying its position embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Tensor,
}

impl TokenSequence {
    pub fn cls(&self) -> &[f64] {
        self.tokens.row(0)
    }

    /// Row of feature token `i` (0 = head, 1 = edge, 2 = tail).
    pub fn feature(&self, i: usize) -> &[f64] {
        self.tokens.row(i + 1)
    }
}

pub(crate) fn init_embedding<R: Rng>(init: &mut Init<'_, R>, cfg: &ModelConfig) {
    let d = cfg.d_model;
    let widths = [cfg.dim_head_features, cfg.dim_edge_features, cfg.dim_tail_features];
    for (name, w) in FEATURE_TOKENS.iter().zip(widths) {
        init.linear(&format!("embed.{name}.fc1"), w, d);
        init.linear(&format!("embed.{name}.fc2"), d, d);
    }
    init.normal("embed.cls".into(), &[1, d]);
    init.normal("embed.pos".into(), &[super::TOKEN_COUNT, d]);
}

pub(crate) fn init_layers<R: Rng>(init: &mut Init<'_, R>, prefix: &str, n: usize, cfg: &ModelConfig) {
    let (d, f) = (cfg.d_model, cfg.ffn_dim);
    for i in 0..n {
        let l = format!("{prefix}.layers.{i}");
        for proj in ["query", "key", "value", "out"] {
            init.linear(&format!("{l}.attn.{proj}"), d, d);
        }
        init.layer_norm(&format!("{l}.ln1"), d);
        init.linear(&format!("{l}.ffn.fc1"), d, f);
        init.linear(&format!("{l}.ffn.fc2"), f, d);
        init.layer_norm(&format!("{l}.ln2"), d);
    }
}

pub(crate) fn init_head(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) {
    let mut init = Init { store, rng, std: INIT_STD };
    init.linear("head", cfg.d_model, 1);
}

/// Freshly initialized classifier parameters (embeddings, encoder, head).
pub fn init_classifier(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    {
        let mut init = Init { store: &mut store, rng, std: INIT_STD };
        init_embedding(&mut init, cfg);
        init_layers(&mut init, "encoder", cfg.n_encoder_layers, cfg);
    }
    init_head(&mut store, cfg, rng);
    Ok(store)
}

/// One-hidden-layer ReLU MLP mapping a feature block to width D.
fn token_mlp(fw: &mut Forward<'_>, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(fw.g, fw.p, &format!("{prefix}.fc1"), x)?;
    let h = fw.g.relu(h)?;
    linear(fw.g, fw.p, &format!("{prefix}.fc2"), h)
}

/// The three feature tokens `MLP_τ(X_τ)` without position embeddings.
pub fn feature_tokens(fw: &mut Forward<'_>, inputs: &EdgeInputs) -> Result<[Var; 3]> {
    let mut out = [None; 3];
    for (i, (name, x)) in FEATURE_TOKENS.iter().zip(inputs.parts()).enumerate() {
        let x = fw.g.constant(x.clone())?;
        out[i] = Some(token_mlp(fw, &format!("embed.{name}"), x)?);
    }
    Ok(out.map(Option::unwrap))
}

/// `[B·4 × D]` encoder input: `CLS+POS₀, MLP_h(X_h)+POS₁, MLP_r(X_r)+POS₂,
/// MLP_t(X_t)+POS₃` per edge.
pub fn embed_tokens(fw: &mut Forward<'_>, inputs: &EdgeInputs) -> Result<Var> {
    let [h, r, t] = feature_tokens(fw, inputs)?;
    let zeros = fw.g.constant(Tensor::zeros(&[inputs.len(), fw.cfg.d_model]))?;
    let cls = fw.g.add_tiled(zeros, fw.p.var("embed.cls")?)?;
    let seq = fw.g.interleave(&[cls, h, r, t])?;
    fw.g.add_tiled(seq, fw.p.var("embed.pos")?)
}

/// Multi-head self-attention over groups of `seq` rows, with query/key/value
/// and output projections.
pub fn multi_head_attention(fw: &mut Forward<'_>, prefix: &str, x: Var, seq: usize) -> Result<Var> {
    let heads = fw.cfg.n_heads;
    if heads == 0 || !fw.cfg.d_model.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "d_model {} is not divisible by n_heads {}",
            fw.cfg.d_model, heads
        )));
    }
    let q = linear(fw.g, fw.p, &format!("{prefix}.query"), x)?;
    let k = linear(fw.g, fw.p, &format!("{prefix}.key"), x)?;
    let v = linear(fw.g, fw.p, &format!("{prefix}.value"), x)?;
    let a = fw.g.attention(q, k, v, seq, heads)?;
    linear(fw.g, fw.p, &format!("{prefix}.out"), a)
}

/// Post-norm block: `x = LN(x + MHA(x))`, then `x = LN(x + FFN(x))`.
pub fn encoder_layer(fw: &mut Forward<'_>, prefix: &str, x: Var, seq: usize) -> Result<Var> {
    let a = multi_head_attention(fw, &format!("{prefix}.attn"), x, seq)?;
    let a = fw.dropout(a)?;
    let x = fw.g.add(x, a)?;
    let x = fw.g.layer_norm(
        x,
        fw.p.var(&format!("{prefix}.ln1.gamma"))?,
        fw.p.var(&format!("{prefix}.ln1.beta"))?,
        LN_EPS,
    )?;
    let h = linear(fw.g, fw.p, &format!("{prefix}.ffn.fc1"), x)?;
    let h = fw.g.gelu(h)?;
    let h = linear(fw.g, fw.p, &format!("{prefix}.ffn.fc2"), h)?;
    let h = fw.dropout(h)?;
    let x = fw.g.add(x, h)?;
    fw.g.layer_norm(
        x,
        fw.p.var(&format!("{prefix}.ln2.gamma"))?,
        fw.p.var(&format!("{prefix}.ln2.beta"))?,
        LN_EPS,
    )
}

/// Applies `n_layers` blocks named `{prefix}.layers.{i}`; zero layers is the
/// identity.
pub fn layer_stack(fw: &mut Forward<'_>, prefix: &str, n_layers: usize, mut x: Var, seq: usize) -> Result<Var> {
    for i in 0..n_layers {
        x = encoder_layer(fw, &format!("{prefix}.layers.{i}"), x, seq)?;
    }
    Ok(x)
}

/// Encoder over full 4-token sequences.
pub fn encoder_forward(fw: &mut Forward<'_>, tokens: Var) -> Result<Var> {
    let n = fw.cfg.n_encoder_layers;
    layer_stack(fw, "encoder", n, tokens, super::TOKEN_COUNT)
}

/// Classification logits `[B×1]` from the final CLS states.
pub fn classify_logits(fw: &mut Forward<'_>, inputs: &EdgeInputs) -> Result<Var> {
    let tokens = embed_tokens(fw, inputs)?;
    let hidden = encoder_forward(fw, tokens)?;
    let cls_rows: Vec<usize> = (0..inputs.len()).map(|b| b * super::TOKEN_COUNT).collect();
    let cls = fw.g.gather_rows(hidden, &cls_rows)?;
    linear(fw.g, fw.p, "head", cls)
}

/// Mean BCE of the classifier on a batch, with gradients for every parameter.
pub fn classifier_loss(
    params: &ParamStore,
    cfg: &ModelConfig,
    inputs: &EdgeInputs,
    labels: &[f64],
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Gradients)> {
    let mut g = Graph::new();
    let p = Bound::new(&mut g, params)?;
    let mut fw = Forward { g: &mut g, p: &p, cfg, rng };
    let logits = classify_logits(&mut fw, inputs)?;
    let loss = g.bce_with_logits(logits, labels)?;
    g.backward(loss)?;
    Ok((g.value(loss).item(), p.gradients(&mut g)))
}

/// Embeds one edge into its input token sequence.
pub fn embed_edge(edge: &EdgeRecord, params: &ParamStore, cfg: &ModelConfig, stats: &FeatureStats) -> Result<TokenSequence> {
    let inputs = EdgeInputs::new(&[edge], stats)?;
    let mut g = Graph::new();
    let p = Bound::frozen(&mut g, params)?;
    let mut fw = Forward { g: &mut g, p: &p, cfg, rng: None };
    let seq = embed_tokens(&mut fw, &inputs)?;
    Ok(TokenSequence { tokens: g.value(seq).clone() })
}

/// `(logit, σ(logit))` for one edge.
pub fn classify_edge(edge: &EdgeRecord, params: &ParamStore, cfg: &ModelConfig, stats: &FeatureStats) -> Result<(f64, f64)> {
    let z = classifier_logits(params, cfg, stats, &[edge])?[0];
    Ok((z, sigmoid(z)))
}

/// Inference batch size used when scoring many edges.
pub const SCORE_CHUNK: usize = 256;

/// Logits for many edges, evaluated in fixed-size chunks.
pub fn classifier_logits(params: &ParamStore, cfg: &ModelConfig, stats: &FeatureStats, edges: &[&EdgeRecord]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(edges.len());
    for chunk in edges.chunks(SCORE_CHUNK) {
        let inputs = EdgeInputs::new(chunk, stats)?;
        let mut g = Graph::new();
        let p = Bound::frozen(&mut g, params)?;
        let mut fw = Forward { g: &mut g, p: &p, cfg, rng: None };
        let z = classify_logits(&mut fw, &inputs)?;
        out.extend_from_slice(g.value(z).data());
    }
    Ok(out)
}
