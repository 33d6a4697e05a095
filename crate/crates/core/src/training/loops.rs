//! Epoch loops for pre-training, fine-tuning and baselines.
//!
//! Each batch is cut into fixed-size chunks whose gradients may be computed
//! on worker threads; chunk results are always summed in chunk order, so a
//! run is bitwise reproducible regardless of thread count.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::checkpoint::{Checkpoint, ModelKind, TrainMeta};
use super::optim::{adamw_step, clip_grad_norm, OptimState};
use super::{worker_pool, TrainConfig};
use crate::baselines::{baseline_loss, BaselineKind};
use crate::data::{Dataset, EdgeRecord, FeatureStats};
use crate::error::{Error, Result};
use crate::model::mae::{mae_forward_loss, sample_mask};
use crate::model::transformer::classifier_loss;
use crate::model::{EdgeInputs, MaskPlan, ModelConfig};
use crate::params::{Gradients, ParamStore};

/// Edges per gradient chunk.
pub const GRAD_CHUNK: usize = 64;

/// Result of a training loop: the final checkpoint and the mean training
/// loss of every epoch.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub trace: Vec<f64>,
    pub steps: u64,
}

/// Batch loss (mean over the batch) and gradients, as the edge-weighted
/// combination of per-chunk means. `f` gets the chunk's position range in
/// `batch` and a dropout seed.
fn chunked<F>(batch_len: usize, rng: &mut ChaCha8Rng, f: F) -> Result<(f64, Gradients)>
where
    F: Fn(std::ops::Range<usize>, u64) -> Result<(f64, Gradients)> + Sync,
{
    let jobs: Vec<(std::ops::Range<usize>, u64)> = (0..batch_len)
        .step_by(GRAD_CHUNK)
        .map(|s| (s..(s + GRAD_CHUNK).min(batch_len), rng.random()))
        .collect();
    let results: Vec<Result<(f64, Gradients)>> = if jobs.len() == 1 {
        jobs.into_iter().map(|(r, s)| f(r, s)).collect()
    } else {
        worker_pool().install(|| jobs.into_par_iter().map(|(r, s)| f(r, s)).collect())
    };

    let mut loss = 0.0;
    let mut total: Option<Gradients> = None;
    for (i, res) in results.into_iter().enumerate() {
        let (l, mut g) = res?;
        let len = GRAD_CHUNK.min(batch_len - i * GRAD_CHUNK);
        let w = len as f64 / batch_len as f64;
        loss += w * l;
        g.values_mut().for_each(|t| t.scale_assign(w));
        match total.as_mut() {
            None => total = Some(g),
            Some(acc) => {
                for (name, t) in g {
                    acc.get_mut(&name).expect("same parameter set").add_assign(&t);
                }
            }
        }
    }
    Ok((loss, total.expect("non-empty batch")))
}

/// Shared epoch loop. `batch_grad` maps the edge indices of one batch to
/// its mean loss and gradients.
fn run<F>(n: usize, tcfg: &TrainConfig, params: &mut ParamStore, mut batch_grad: F) -> Result<(Vec<f64>, u64)>
where
    F: FnMut(&ParamStore, &[usize], &mut ChaCha8Rng) -> Result<(f64, Gradients)>,
{
    tcfg.validate()?;
    if n == 0 {
        return Err(Error::Validation("training dataset is empty".into()));
    }
    let batch = tcfg.batch_size.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut state = OptimState::new(params);
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(tcfg.epochs);
    for epoch in 0..tcfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for idx in order.chunks(batch) {
            let (loss, mut grads) = batch_grad(params, idx, &mut rng)?;
            if let Some(c) = tcfg.grad_clip {
                clip_grad_norm(&mut grads, c);
            }
            adamw_step(params, &grads, &mut state, &tcfg.optim)?;
            sum += loss * idx.len() as f64;
        }
        let mean = sum / n as f64;
        log::info!("{} epoch {}/{}: loss {mean:.6}", tcfg.mode, epoch + 1, tcfg.epochs);
        trace.push(mean);
    }
    Ok((trace, state.t))
}

fn finish(kind: ModelKind, cfg: &ModelConfig, stats: &FeatureStats, tcfg: &TrainConfig, params: ParamStore, trace: Vec<f64>, steps: u64) -> TrainRun {
    let meta = TrainMeta {
        seed: tcfg.seed,
        epoch: trace.len(),
        loss: *trace.last().expect("at least one epoch"),
    };
    TrainRun {
        checkpoint: Checkpoint::new(kind, cfg.clone(), stats.clone(), meta, params),
        trace,
        steps,
    }
}

fn check_stats(data: &Dataset, stats: &FeatureStats) -> Result<()> {
    if stats.widths() != data.widths {
        return Err(Error::Schema(format!(
            "feature statistics have widths {:?}, dataset has {:?}",
            stats.widths(),
            data.widths
        )));
    }
    Ok(())
}

fn labels_of(data: &Dataset) -> Result<Vec<f64>> {
    data.edges
        .iter()
        .map(|e| {
            e.label.target().ok_or_else(|| {
                Error::Validation(format!("edge {} is unlabeled; supervised training needs labels", e.edge_id))
            })
        })
        .collect()
}

/// Masked-autoencoder pre-training. Labels are ignored; masks are drawn
/// per edge from the loop's seeded stream.
pub fn pretrain_loop(data: &Dataset, stats: &FeatureStats, cfg: &ModelConfig, tcfg: &TrainConfig, mut params: ParamStore) -> Result<TrainRun> {
    cfg.validate()?;
    check_stats(data, stats)?;
    let edges: Vec<&EdgeRecord> = data.edges.iter().collect();
    let (trace, steps) = run(edges.len(), tcfg, &mut params, |p, idx, rng| {
        let plans: Vec<MaskPlan> = idx
            .iter()
            .map(|_| sample_mask(cfg.mask_ratio, rng))
            .collect::<Result<_>>()?;
        chunked(idx.len(), rng, |r, seed| {
            let batch: Vec<&EdgeRecord> = idx[r.clone()].iter().map(|&i| edges[i]).collect();
            let inputs = EdgeInputs::new(&batch, stats)?;
            let mut drop = ChaCha8Rng::seed_from_u64(seed);
            mae_forward_loss(p, cfg, &inputs, &plans[r], Some(&mut drop))
        })
    })?;
    Ok(finish(ModelKind::Mae, cfg, stats, tcfg, params, trace, steps))
}

/// BCE fine-tuning of the full Edge Transformer from `init` (fresh or
/// transferred). Every edge must be labeled.
pub fn finetune_loop(data: &Dataset, stats: &FeatureStats, cfg: &ModelConfig, tcfg: &TrainConfig, mut init: ParamStore) -> Result<TrainRun> {
    cfg.validate()?;
    check_stats(data, stats)?;
    let labels = labels_of(data)?;
    let edges: Vec<&EdgeRecord> = data.edges.iter().collect();
    let (trace, steps) = run(edges.len(), tcfg, &mut init, |p, idx, rng| {
        chunked(idx.len(), rng, |r, seed| {
            let part = &idx[r];
            let batch: Vec<&EdgeRecord> = part.iter().map(|&i| edges[i]).collect();
            let y: Vec<f64> = part.iter().map(|&i| labels[i]).collect();
            let inputs = EdgeInputs::new(&batch, stats)?;
            let mut drop = ChaCha8Rng::seed_from_u64(seed);
            classifier_loss(p, cfg, &inputs, &y, Some(&mut drop))
        })
    })?;
    Ok(finish(ModelKind::Classifier, cfg, stats, tcfg, init, trace, steps))
}

/// BCE training of a baseline scorer.
pub fn baseline_loop(
    data: &Dataset,
    stats: &FeatureStats,
    cfg: &ModelConfig,
    kind: BaselineKind,
    tcfg: &TrainConfig,
    mut init: ParamStore,
) -> Result<TrainRun> {
    check_stats(data, stats)?;
    let labels = labels_of(data)?;
    let edges: Vec<&EdgeRecord> = data.edges.iter().collect();
    let (trace, steps) = run(edges.len(), tcfg, &mut init, |p, idx, rng| {
        chunked(idx.len(), rng, |r, _| {
            let part = &idx[r];
            let batch: Vec<&EdgeRecord> = part.iter().map(|&i| edges[i]).collect();
            let y: Vec<f64> = part.iter().map(|&i| labels[i]).collect();
            let inputs = EdgeInputs::new(&batch, stats)?;
            baseline_loss(p, kind, &inputs, &y)
        })
    })?;
    Ok(finish(ModelKind::Baseline(kind.name().into()), cfg, stats, tcfg, init, trace, steps))
}
