//! AdamW with decoupled weight decay and global-norm gradient clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{decays, Gradients, ParamStore};
use crate::tensor::Tensor;

/// Hyperparameters of one AdamW update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            learning_rate: 1e-3,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamW {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be > 0", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay {} must be >= 0", self.weight_decay)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} {b} not in (0,1)")));
            }
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!("eps {} must be > 0", self.eps)));
        }
        Ok(())
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub t: u64,
}

impl OptimState {
    /// Zero moments shaped like `params`.
    pub fn new(params: &ParamStore) -> Self {
        let zeros: BTreeMap<String, Tensor> = params
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
            .collect();
        OptimState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

fn check_shape(kind: &str, name: &str, got: &Tensor, want: &Tensor) -> Result<()> {
    if got.shape() != want.shape() {
        return Err(Error::Validation(format!(
            "{kind} for {name} has shape {:?}, parameter has {:?}",
            got.shape(),
            want.shape()
        )));
    }
    Ok(())
}

/// One AdamW step over every parameter. Decay `θ ← θ(1 − lr·wd)` is applied
/// before the Adam update and only to parameters where [`decays`] holds.
/// Nothing is modified if any gradient or moment is missing or misshapen.
pub fn adamw_step(params: &mut ParamStore, grads: &Gradients, state: &mut OptimState, opt: &AdamW) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Validation(format!("no gradient for {name}")))?;
        check_shape("gradient", name, g, p)?;
        for (kind, map) in [("first moment", &state.m), ("second moment", &state.v)] {
            let s = map
                .get(name)
                .ok_or_else(|| Error::Validation(format!("no {kind} for {name}")))?;
            check_shape(kind, name, s, p)?;
        }
    }
    if let Some(extra) = grads.keys().find(|n| !params.contains(n)) {
        return Err(Error::Validation(format!("gradient for unknown parameter {extra}")));
    }

    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - opt.beta1.powi(t);
    let c2 = 1.0 - opt.beta2.powi(t);
    let lr = opt.learning_rate;
    for (name, p) in params.iter_mut() {
        let g = grads[name].data();
        let m = state.m.get_mut(name).unwrap().data_mut();
        for (mi, gi) in m.iter_mut().zip(g) {
            *mi = opt.beta1 * *mi + (1.0 - opt.beta1) * gi;
        }
        let v = state.v.get_mut(name).unwrap().data_mut();
        for (vi, gi) in v.iter_mut().zip(g) {
            *vi = opt.beta2 * *vi + (1.0 - opt.beta2) * gi * gi;
        }
        let shrink = if decays(name) { 1.0 - lr * opt.weight_decay } else { 1.0 };
        let (m, v) = (state.m[name].data(), state.v[name].data());
        for ((w, mi), vi) in p.data_mut().iter_mut().zip(m).zip(v) {
            let step = lr * (mi / c1) / ((vi / c2).sqrt() + opt.eps);
            *w = *w * shrink - step;
        }
    }
    Ok(())
}

/// Global L2 norm of a gradient set.
pub fn grad_norm(grads: &Gradients) -> f64 {
    grads.values().map(Tensor::sum_sq).sum::<f64>().sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        grads.values_mut().for_each(|g| g.scale_assign(s));
    }
    norm
}
