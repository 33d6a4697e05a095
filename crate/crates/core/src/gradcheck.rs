//! Central-difference verification of analytic gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{EdgeRecord, FeatureStats, Label};
use crate::error::{Error, Result};
use crate::model::mae::{init_mae, mae_forward_loss, sample_mask};
use crate::model::transformer::{classifier_loss, init_classifier};
use crate::model::{EdgeInputs, MaskPlan, ModelConfig};
use crate::params::{Gradients, ParamStore};
use crate::tensor::Tensor;

/// Outcome of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1, |numeric|)` over every scalar.
    pub max_rel_error: f64,
    /// Parameter holding the worst scalar.
    pub worst_param: String,
    pub checked: usize,
}

/// Compares the analytic gradient of `f` against central differences.
///
/// `f` returns the scalar loss together with its analytic gradients (keyed
/// like `params`). Every scalar of every parameter is perturbed by `±h`.
/// Fails if `f` is not deterministic or `h` is outside `[1e-6, 1e-4]`.
pub fn grad_check<F>(mut f: F, params: &ParamStore, h: f64) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<(f64, Gradients)>,
{
    if !(1e-6..=1e-4).contains(&h) {
        return Err(Error::Validation(format!("step {h} outside [1e-6, 1e-4]")));
    }
    let (first, analytic) = f(params)?;
    let (second, _) = f(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        checked: 0,
    };
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let grad = analytic
            .get(&name)
            .ok_or_else(|| Error::Validation(format!("no analytic gradient for {name}")))?
            .clone();
        for i in 0..grad.len() {
            let orig = work.get(&name).unwrap().data()[i];
            work.get_mut(&name).unwrap().data_mut()[i] = orig + h;
            let (plus, _) = f(&work)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig - h;
            let (minus, _) = f(&work)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let err = (grad.data()[i] - numeric).abs() / numeric.abs().max(1.0);
            if report.checked == 0 || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = name.clone();
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Worst relative errors of the classifier and MAE losses.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelGradCheck {
    pub classifier: f64,
    pub classifier_worst: String,
    pub mae: f64,
    pub mae_worst: String,
    pub checked: usize,
}

/// Spreads parameters away from their near-zero initialization so every
/// path through the network carries gradient of order one.
fn spread(mut p: ParamStore, rng: &mut ChaCha8Rng) -> ParamStore {
    for (_, t) in p.iter_mut() {
        let noise = Tensor::randn(t.shape(), 0.5, rng);
        t.add_assign(&noise);
    }
    p
}

/// Gradient check of the full classifier and MAE losses on `batch` random
/// edges, with dropout off.
pub fn model_grad_check(cfg: &ModelConfig, batch: usize, seed: u64, h: f64) -> Result<ModelGradCheck> {
    let cfg = ModelConfig { dropout: 0.0, ..cfg.clone() };
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = cfg.widths();
    let edges: Vec<EdgeRecord> = (0..batch.max(1))
        .map(|i| EdgeRecord {
            edge_id: i as u64,
            head_id: 0,
            tail_id: i as u64,
            label: if i % 2 == 0 { Label::Positive } else { Label::Negative },
            x_head: Tensor::randn(&[w.head], 1.0, &mut rng).into_data(),
            x_edge: Tensor::randn(&[w.edge], 1.0, &mut rng).into_data(),
            x_tail: Tensor::randn(&[w.tail], 1.0, &mut rng).into_data(),
        })
        .collect();
    let refs: Vec<&EdgeRecord> = edges.iter().collect();
    let inputs = EdgeInputs::new(&refs, &FeatureStats::identity(w))?;
    let labels: Vec<f64> = edges.iter().map(|e| e.label.target().unwrap()).collect();

    let clf = spread(init_classifier(&cfg, &mut rng)?, &mut rng);
    let c = grad_check(|p| classifier_loss(p, &cfg, &inputs, &labels, None), &clf, h)?;

    let mae = spread(init_mae(&cfg, &mut rng)?, &mut rng);
    let plans: Vec<MaskPlan> = edges
        .iter()
        .map(|_| sample_mask(cfg.mask_ratio, &mut rng))
        .collect::<Result<_>>()?;
    let m = grad_check(|p| mae_forward_loss(p, &cfg, &inputs, &plans, None), &mae, h)?;

    Ok(ModelGradCheck {
        classifier: c.max_rel_error,
        classifier_worst: c.worst_param,
        mae: m.max_rel_error,
        mae_worst: m.worst_param,
        checked: c.checked + m.checked,
    })
}
