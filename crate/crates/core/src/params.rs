//! Named parameter collections shared by models, optimizer and checkpoints.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ordered map from parameter name to tensor. Iteration is by name, so it is
/// deterministic regardless of insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

/// Gradients keyed by parameter name.
pub type Gradients = BTreeMap<String, Tensor>;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Validation(format!("missing parameter {name}")))
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ParamStore) {
        self.tensors.extend(other.tensors);
    }

    pub fn into_inner(self) -> BTreeMap<String, Tensor> {
        self.tensors
    }
}

impl FromIterator<(String, Tensor)> for ParamStore {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        ParamStore {
            tensors: iter.into_iter().collect(),
        }
    }
}

/// Whether AdamW weight decay applies to a parameter. Only weight matrices
/// decay; biases, layer-norm gains/shifts, the CLS vector, position tables and
/// the mask token do not.
pub fn decays(name: &str) -> bool {
    name.ends_with(".weight")
}

/// Params of a store placed on a graph as gradient-carrying leaves.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn new(graph: &mut Graph, store: &ParamStore) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (name, t) in store.iter() {
            vars.insert(name.clone(), graph.variable(t.clone())?);
        }
        Ok(Bound { vars })
    }

    /// Binds every tensor as a constant (no gradients), for inference.
    pub fn frozen(graph: &mut Graph, store: &ParamStore) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (name, t) in store.iter() {
            vars.insert(name.clone(), graph.constant(t.clone())?);
        }
        Ok(Bound { vars })
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Validation(format!("missing parameter {name}")))
    }

    /// Collects the gradient of every bound parameter after `backward`;
    /// parameters the loss does not depend on get an explicit zero tensor.
    pub fn gradients(&self, graph: &mut Graph) -> Gradients {
        self.vars
            .iter()
            .map(|(name, &v)| {
                let g = graph
                    .take_grad(v)
                    .unwrap_or_else(|| Tensor::zeros(graph.value(v).shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

/// Initializer following the BERT convention: weights and embeddings from
/// N(0, 0.02²), biases zero, layer-norm gain one.
pub struct Init<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
    pub std: f64,
}

impl<R: Rng> Init<'_, R> {
    pub fn normal(&mut self, name: String, shape: &[usize]) {
        let t = Tensor::randn(shape, self.std, self.rng);
        self.store.insert(name, t);
    }

    pub fn zeros(&mut self, name: String, shape: &[usize]) {
        self.store.insert(name, Tensor::zeros(shape));
    }

    pub fn ones(&mut self, name: String, shape: &[usize]) {
        self.store.insert(name, Tensor::full(shape, 1.0));
    }

    /// `{prefix}.weight` `[fan_in×fan_out]` and `{prefix}.bias` `[fan_out]`.
    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        self.normal(format!("{prefix}.weight"), &[fan_in, fan_out]);
        self.zeros(format!("{prefix}.bias"), &[fan_out]);
    }

    pub fn layer_norm(&mut self, prefix: &str, width: usize) {
        self.ones(format!("{prefix}.gamma"), &[width]);
        self.zeros(format!("{prefix}.beta"), &[width]);
    }
}

/// `affine` using `{prefix}.weight` and `{prefix}.bias`.
pub fn linear(graph: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{prefix}.weight"))?;
    let b = p.var(&format!("{prefix}.bias"))?;
    graph.affine(x, w, Some(b))
}
