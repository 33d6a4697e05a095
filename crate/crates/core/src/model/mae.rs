//! Masked-autoencoder pre-training of the Edge Transformer encoder.
//!
//! Per edge, a random subset of the three feature tokens is hidden. The
//! encoder sees CLS plus the visible tokens only. The decoder sees all four
//! slots: encoded visible tokens in their own slots and a shared learnable
//! mask token in the hidden ones, each slot plus a decoder position
//! embedding. Decoder outputs at hidden slots are projected back to the
//! token's feature width and scored with squared error against the
//! (standardized) original features.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::transformer::{embed_tokens, init_embedding, init_head, init_layers, layer_stack, FEATURE_TOKENS};
use super::{EdgeInputs, Forward, ModelConfig, INIT_STD};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{linear, Bound, Gradients, Init, ParamStore};

/// Sequence length: CLS plus three feature tokens.
pub const TOKEN_COUNT: usize = 4;

/// Which of the feature tokens (head, edge, tail) are hidden. CLS is never
/// masked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MaskPlan {
    pub masked: [bool; 3],
}

impl MaskPlan {
    pub fn count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    /// Sequence slots (0 = CLS) fed to the encoder, in order.
    pub fn visible_slots(&self) -> Vec<usize> {
        std::iter::once(0)
            .chain((0..3).filter(|&i| !self.masked[i]).map(|i| i + 1))
            .collect()
    }
}

/// Number of tokens hidden per edge: `round(3·ratio)`, at least one.
pub fn masked_count(ratio: f64) -> Result<usize> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("mask_ratio {ratio} not in (0,1)")));
    }
    let k = (ratio * 3.0).round() as usize;
    if k == 0 {
        log::warn!("mask ratio {ratio} rounds to zero masked tokens; masking one");
        return Ok(1);
    }
    Ok(k)
}

/// Masks `masked_count(ratio)` feature tokens chosen uniformly without
/// replacement.
pub fn sample_mask<R: Rng + ?Sized>(ratio: f64, rng: &mut R) -> Result<MaskPlan> {
    let k = masked_count(ratio)?;
    let mut masked = [false; 3];
    for i in sample(rng, 3, k) {
        masked[i] = true;
    }
    Ok(MaskPlan { masked })
}

/// Freshly initialized MAE parameters: the classifier's embedding and
/// encoder layout plus the `decoder.*` namespace.
pub fn init_mae(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut init = Init { store: &mut store, rng, std: INIT_STD };
    init_embedding(&mut init, cfg);
    init_layers(&mut init, "encoder", cfg.n_encoder_layers, cfg);
    let d = cfg.d_model;
    init.normal("decoder.mask_token".into(), &[1, d]);
    init.normal("decoder.pos".into(), &[TOKEN_COUNT, d]);
    init_layers(&mut init, "decoder", cfg.n_decoder_layers, cfg);
    let widths = [cfg.dim_head_features, cfg.dim_edge_features, cfg.dim_tail_features];
    for (name, w) in FEATURE_TOKENS.iter().zip(widths) {
        init.linear(&format!("decoder.recon.{name}"), d, w);
    }
    Ok(store)
}

/// Reconstruction loss over a batch: for each edge, the mean squared error
/// over every feature value of its masked tokens; averaged over edges.
pub fn mae_loss(fw: &mut Forward<'_>, inputs: &EdgeInputs, plans: &[MaskPlan]) -> Result<Var> {
    mae_loss_with_targets(fw, inputs, inputs, plans)
}

/// [`mae_loss`] with reconstruction targets given separately from the
/// encoder inputs. Only the rows of `targets` at masked slots are read.
pub fn mae_loss_with_targets(
    fw: &mut Forward<'_>,
    inputs: &EdgeInputs,
    targets: &EdgeInputs,
    plans: &[MaskPlan],
) -> Result<Var> {
    let b = inputs.len();
    if targets.len() != b {
        return Err(Error::Validation(format!("{} target rows for {b} edges", targets.len())));
    }
    if plans.len() != b {
        return Err(Error::Validation(format!("{} mask plans for {b} edges", plans.len())));
    }
    let k = plans[0].count();
    if k == 0 {
        return Err(Error::NoMaskedTokens);
    }
    if plans.iter().any(|p| p.count() != k) {
        return Err(Error::Validation("mask plans in one batch must hide the same number of tokens".into()));
    }
    let seq_vis = TOKEN_COUNT - k;

    let tokens = embed_tokens(fw, inputs)?;
    let mut vis_rows = Vec::with_capacity(b * seq_vis);
    for (i, plan) in plans.iter().enumerate() {
        vis_rows.extend(plan.visible_slots().into_iter().map(|s| i * TOKEN_COUNT + s));
    }
    let visible = fw.g.gather_rows(tokens, &vis_rows)?;
    let encoded = layer_stack(fw, "encoder", fw.cfg.n_encoder_layers, visible, seq_vis)?;

    let mask_token = fw.p.var("decoder.mask_token")?;
    let pool = fw.g.concat_rows(&[encoded, mask_token])?;
    let mask_row = b * seq_vis;
    let mut dec_rows = Vec::with_capacity(b * TOKEN_COUNT);
    for (i, plan) in plans.iter().enumerate() {
        let mut next = i * seq_vis;
        for slot in 0..TOKEN_COUNT {
            if slot > 0 && plan.masked[slot - 1] {
                dec_rows.push(mask_row);
            } else {
                dec_rows.push(next);
                next += 1;
            }
        }
    }
    let dec_in = fw.g.gather_rows(pool, &dec_rows)?;
    let dec_in = fw.g.add_tiled(dec_in, fw.p.var("decoder.pos")?)?;
    let decoded = layer_stack(fw, "decoder", fw.cfg.n_decoder_layers, dec_in, TOKEN_COUNT)?;

    let parts = targets.parts();
    let entries: Vec<f64> = plans
        .iter()
        .map(|p| (0..3).filter(|&t| p.masked[t]).map(|t| parts[t].cols()).sum::<usize>() as f64)
        .collect();
    let mut total: Option<Var> = None;
    for (t, name) in FEATURE_TOKENS.iter().enumerate() {
        let edges: Vec<usize> = (0..b).filter(|&i| plans[i].masked[t]).collect();
        if edges.is_empty() {
            continue;
        }
        let rows: Vec<usize> = edges.iter().map(|&i| i * TOKEN_COUNT + 1 + t).collect();
        let h = fw.g.gather_rows(decoded, &rows)?;
        let pred = linear(fw.g, fw.p, &format!("decoder.recon.{name}"), h)?;
        let target_rows: Vec<Vec<f64>> = edges.iter().map(|&i| parts[t].row(i).to_vec()).collect();
        let target = crate::tensor::Tensor::from_rows(&target_rows)?;
        let weights: Vec<f64> = edges.iter().map(|&i| 1.0 / (b as f64 * entries[i])).collect();
        let term = fw.g.weighted_sq_err(pred, &target, &weights)?;
        total = Some(match total {
            None => term,
            Some(acc) => fw.g.add(acc, term)?,
        });
    }
    total.ok_or(Error::NoMaskedTokens)
}

/// Batch reconstruction loss and its gradients for every MAE parameter.
pub fn mae_forward_loss(
    params: &ParamStore,
    cfg: &ModelConfig,
    inputs: &EdgeInputs,
    plans: &[MaskPlan],
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Gradients)> {
    let mut g = Graph::new();
    let p = Bound::new(&mut g, params)?;
    let mut fw = Forward { g: &mut g, p: &p, cfg, rng };
    let loss = mae_loss(&mut fw, inputs, plans)?;
    g.backward(loss)?;
    Ok((g.value(loss).item(), p.gradients(&mut g)))
}

/// Builds a fine-tuning parameter set from pre-trained MAE parameters: the
/// embedding and encoder tensors are copied bit for bit, the classification
/// head is freshly initialized, and the decoder is dropped.
pub fn transfer_encoder(pretrained: &ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<ParamStore> {
    let layout = super::transformer::init_classifier(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    let expected: BTreeSet<&String> = layout.names().filter(|n| !n.starts_with("head.")).collect();

    let mut missing = Vec::new();
    for name in &expected {
        match pretrained.get(name) {
            None => missing.push((*name).clone()),
            Some(t) if t.shape() != layout.get(name).unwrap().shape() => {
                missing.push(format!("{name} (shape {:?})", t.shape()));
            }
            Some(_) => {}
        }
    }
    let extra: Vec<String> = pretrained
        .names()
        .filter(|n| !n.starts_with("decoder.") && !expected.contains(n))
        .cloned()
        .collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(Error::Transfer { missing, extra });
    }

    let mut out: ParamStore = expected
        .iter()
        .map(|n| ((*n).clone(), pretrained.get(n).unwrap().clone()))
        .collect();
    init_head(&mut out, cfg, rng);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{EdgeRecord, FeatureStats, FeatureWidths, Label};
    use crate::tensor::Tensor;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_encoder_layers: 1,
            n_decoder_layers: 1,
            ffn_dim: 16,
            dim_head_features: 3,
            dim_edge_features: 2,
            dim_tail_features: 3,
            ..ModelConfig::default()
        }
    }

    fn edges(n: usize, seed: u64) -> Vec<EdgeRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| EdgeRecord {
                edge_id: i as u64,
                head_id: 0,
                tail_id: i as u64,
                label: Label::Unlabeled,
                x_head: Tensor::randn(&[3], 1.0, &mut rng).into_data(),
                x_edge: Tensor::randn(&[2], 1.0, &mut rng).into_data(),
                x_tail: Tensor::randn(&[3], 1.0, &mut rng).into_data(),
            })
            .collect()
    }

    fn inputs(es: &[EdgeRecord]) -> EdgeInputs {
        let refs: Vec<&EdgeRecord> = es.iter().collect();
        EdgeInputs::new(&refs, &FeatureStats::identity(FeatureWidths { head: 3, edge: 2, tail: 3 })).unwrap()
    }

    #[test]
    fn one_third_masks_exactly_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let p = sample_mask(1.0 / 3.0, &mut rng).unwrap();
            assert_eq!(p.count(), 1);
            assert_eq!(p.visible_slots().len(), 3);
            assert_eq!(p.visible_slots()[0], 0);
        }
    }

    #[test]
    fn tiny_ratio_clamps_to_one() {
        assert_eq!(masked_count(0.05).unwrap(), 1);
        assert_eq!(masked_count(0.5).unwrap(), 2);
        assert!(masked_count(0.0).is_err());
        assert!(masked_count(1.0).is_err());
    }

    #[test]
    fn masks_reproducible_from_seed() {
        let draw = |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            (0..50).map(|_| sample_mask(1.0 / 3.0, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
    }

    #[test]
    fn loss_ignores_unmasked_targets() {
        let c = cfg();
        let params = init_mae(&c, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let es = edges(2, 3);
        let plans = [MaskPlan { masked: [false, true, false] }, MaskPlan { masked: [true, false, false] }];
        let x = inputs(&es);
        let mut perturbed = es.clone();
        perturbed[0].x_head = vec![10.0, -10.0, 3.0];
        perturbed[0].x_tail = vec![7.0, 7.0, 7.0];
        perturbed[1].x_edge = vec![-4.0, 4.0];
        let y = inputs(&perturbed);
        let loss = |targets: &EdgeInputs| {
            let mut g = Graph::new();
            let p = Bound::frozen(&mut g, &params).unwrap();
            let mut fw = Forward { g: &mut g, p: &p, cfg: &c, rng: None };
            let l = mae_loss_with_targets(&mut fw, &x, targets, &plans).unwrap();
            g.value(l).item()
        };
        assert_eq!(loss(&x), loss(&y));
        assert_eq!(loss(&x), mae_forward_loss(&params, &c, &x, &plans, None).unwrap().0);
    }

    #[test]
    fn zeroed_projections_give_mean_square_of_targets() {
        let c = cfg();
        let mut params = init_mae(&c, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for (name, w) in [("head", 3), ("edge", 2), ("tail", 3)] {
            params.insert(format!("decoder.recon.{name}.weight"), Tensor::zeros(&[8, w]));
            params.insert(format!("decoder.recon.{name}.bias"), Tensor::zeros(&[w]));
        }
        let es = edges(3, 4);
        let plans = [
            MaskPlan { masked: [true, false, false] },
            MaskPlan { masked: [false, true, false] },
            MaskPlan { masked: [false, false, true] },
        ];
        let loss = mae_forward_loss(&params, &c, &inputs(&es), &plans, None).unwrap().0;
        let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
        let expected = (sq(&es[0].x_head) + sq(&es[1].x_edge) + sq(&es[2].x_tail)) / 3.0;
        assert!((loss - expected).abs() < 1e-14, "{loss} vs {expected}");
    }

    #[test]
    fn mixed_mask_counts_rejected() {
        let c = cfg();
        let params = init_mae(&c, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let es = edges(2, 3);
        let plans = [MaskPlan { masked: [true, true, false] }, MaskPlan { masked: [true, false, false] }];
        assert!(mae_forward_loss(&params, &c, &inputs(&es), &plans, None).is_err());
        let none = [MaskPlan { masked: [false; 3] }; 2];
        assert!(matches!(mae_forward_loss(&params, &c, &inputs(&es), &none, None), Err(Error::NoMaskedTokens)));
    }

    #[test]
    fn transfer_copies_encoder_and_drops_decoder() {
        let c = cfg();
        let mae = init_mae(&c, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let ft = transfer_encoder(&mae, &c, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(ft.names().all(|n| !n.starts_with("decoder.")));
        for (name, t) in ft.iter() {
            if name.starts_with("head.") {
                continue;
            }
            let src = mae.get(name).unwrap();
            assert!(t.data().iter().zip(src.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        assert_eq!(ft.numel(), c.classifier_param_count());
    }

    #[test]
    fn transfer_reports_layout_mismatch() {
        let c = cfg();
        let mut mae = init_mae(&c, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        mae.remove("encoder.layers.0.ln1.gamma");
        mae.insert("encoder.layers.7.extra.weight", Tensor::zeros(&[1, 1]));
        match transfer_encoder(&mae, &c, &mut ChaCha8Rng::seed_from_u64(2)) {
            Err(Error::Transfer { missing, extra }) => {
                assert_eq!(missing, ["encoder.layers.0.ln1.gamma"]);
                assert_eq!(extra, ["encoder.layers.7.extra.weight"]);
            }
            other => panic!("{other:?}"),
        }
    }
}
