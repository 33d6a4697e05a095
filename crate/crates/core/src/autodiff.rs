//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied during a forward pass. Calling
//! [`Graph::backward`] on a scalar node replays the tape in reverse and leaves
//! the exact partial derivative of that scalar in every node that depends on a
//! gradient-carrying leaf.
//!
//! Every op checks its output for NaN/Inf and fails instead of propagating it.

use crate::error::{Error, Result};
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddTiled { x: Var, p: Var },
    Relu(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, seq: usize, heads: usize, probs: Vec<f64> },
    GatherRows { x: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Interleave(Vec<Var>),
    RowSum(Var),
    RowNorm(Var),
    ConvTriple { h: Var, r: Var, t: Var, filters: Var, bias: Var },
    Dropout { x: Var, mask: Vec<f64> },
    BceWithLogits { logits: Var, labels: Vec<f64> },
    MseMasked { pred: Var, target: Tensor, mask: Vec<bool>, count: usize },
    WeightedSqErr { pred: Var, target: Tensor, weights: Vec<f64> },
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn shape_err(op: &'static str, left: &Tensor, right: &Tensor) -> Error {
    Error::Shape {
        op,
        left: left.shape().to_vec(),
        right: right.shape().to_vec(),
    }
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Exact GELU, `x·Φ(x)` with Φ the standard normal CDF (erf form, not the
/// tanh approximation).
pub fn gelu_scalar(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

fn gelu_grad_scalar(x: f64) -> f64 {
    std_normal_cdf(x) + x * std_normal_pdf(x)
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn derived(&mut self, value: Tensor, op: Op, parents: &[Var], name: &'static str) -> Result<Var> {
        let needs = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push(value, op, needs, name)
    }

    /// Leaf that receives a gradient on backward.
    pub fn variable(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, true, "variable")
    }

    /// Leaf that never receives a gradient (inputs, targets).
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false, "constant")
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` root with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// `x[n×a]·W[a×b] + b[b]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.shape().len() != 2 || xv.cols() != wv.rows() {
            return Err(shape_err("affine", xv, wv));
        }
        let (n, a, m) = (xv.rows(), xv.cols(), wv.cols());
        let mut out = vec![0.0; n * m];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != m {
                return Err(shape_err("affine bias", wv, bv));
            }
            for row in out.chunks_mut(m) {
                row.copy_from_slice(bv.data());
            }
        }
        gemm_acc(xv.data(), wv.data(), &mut out, n, a, m);
        let value = Tensor::new(vec![n, m], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        self.derived(value, Op::Affine { x, w, b }, &parents, "affine")
    }

    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        self.affine(x, w, None)
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(name, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with(a, b, "add", |x, y| x + y)?;
        self.derived(v, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with(a, b, "sub", |x, y| x - y)?;
        self.derived(v, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with(a, b, "mul", |x, y| x * y)?;
        self.derived(v, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let mut v = self.value(x).clone();
        v.scale_assign(s);
        self.derived(v, Op::Scale(x, s), &[x], "scale")
    }

    /// Adds the rows of `p[s×d]` cyclically to the rows of `x[n×d]`
    /// (row `i` of `x` gets row `i mod s` of `p`). A length-`d` vector acts
    /// as a single row, which makes this a row-broadcast add.
    pub fn add_tiled(&mut self, x: Var, p: Var) -> Result<Var> {
        let (xv, pv) = (self.value(x), self.value(p));
        let d = xv.cols();
        if pv.cols() != d || xv.rows() % pv.rows() != 0 {
            return Err(shape_err("add_tiled", xv, pv));
        }
        let pd = pv.data();
        let period = pd.len();
        let mut out = xv.clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += pd[i % period];
        }
        self.derived(out, Op::AddTiled { x, p }, &[x, p], "add_tiled")
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        Tensor::new(xv.shape().to_vec(), data).expect("shape preserved")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.map(x, |a| a.max(0.0));
        self.derived(v, Op::Relu(x), &[x], "relu")
    }

    /// Exact GELU (`x·Φ(x)`, erf-based).
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let v = self.map(x, gelu_scalar);
        self.derived(v, Op::Gelu(x), &[x], "gelu")
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if !xv.is_finite() {
            return Err(Error::NonFinite("softmax_rows input"));
        }
        let m = xv.cols();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(m) {
            softmax_in_place(row);
        }
        self.derived(out, Op::SoftmaxRows(x), &[x], "softmax_rows")
    }

    /// Per-row layer normalization with population variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let d = xv.cols();
        if gv.len() != d || bv.len() != d {
            return Err(shape_err("layer_norm", xv, gv));
        }
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::Validation(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let n = xv.rows();
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[i * d + j] = h;
                out[i * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.derived(value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta], "layer_norm")
    }

    /// Scaled dot-product attention over independent groups of `seq`
    /// consecutive rows. `q`, `k`, `v` are `[n×D]` with `n` a multiple of
    /// `seq`; each of `heads` heads attends over its own `D/heads` column slice
    /// with scale `1/√(D/heads)`. Returns the concatenated head outputs.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq: usize, heads: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() {
            return Err(shape_err("attention", qv, kv));
        }
        let (n, d) = (qv.rows(), qv.cols());
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("model width {d} is not divisible by {heads} heads")));
        }
        if seq == 0 || n % seq != 0 {
            return Err(Error::Config(format!("{n} rows do not split into sequences of {seq}")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let groups = n / seq;
        let mut probs = vec![0.0; groups * heads * seq * seq];
        let mut out = vec![0.0; n * d];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        for g in 0..groups {
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..seq {
                    let qi = &qd[(g * seq + i) * d + c0..(g * seq + i) * d + c0 + dh];
                    let base = ((g * heads + h) * seq + i) * seq;
                    let p = &mut probs[base..base + seq];
                    for (j, pj) in p.iter_mut().enumerate() {
                        let kj = &kd[(g * seq + j) * d + c0..(g * seq + j) * d + c0 + dh];
                        *pj = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    }
                    softmax_in_place(p);
                    let orow = &mut out[(g * seq + i) * d + c0..(g * seq + i) * d + c0 + dh];
                    for (j, &pj) in p.iter().enumerate() {
                        let vj = &vd[(g * seq + j) * d + c0..(g * seq + j) * d + c0 + dh];
                        for (o, &vv) in orow.iter_mut().zip(vj) {
                            *o += pj * vv;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, d], out)?;
        self.derived(value, Op::Attention { q, k, v, seq, heads, probs }, &[q, k, v], "attention")
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        if idx.is_empty() {
            return Err(Error::Validation("gather_rows needs at least one index".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Validation(format!("row index {bad} out of range for {n} rows")));
        }
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(xv.row(i));
        }
        let value = Tensor::new(vec![idx.len(), d], out)?;
        self.derived(value, Op::GatherRows { x, idx: idx.to_vec() }, &[x], "gather_rows")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let d = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != d {
                return Err(shape_err("concat_rows", self.value(parts[0]), pv));
            }
            rows += pv.rows();
            out.extend_from_slice(pv.data());
        }
        let value = Tensor::new(vec![rows, d], out)?;
        self.derived(value, Op::ConcatRows(parts.to_vec()), parts, "concat_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).rows();
        for &p in parts {
            if self.value(p).rows() != n {
                return Err(shape_err("concat_cols", self.value(parts[0]), self.value(p)));
            }
        }
        let width: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(n * width);
        for i in 0..n {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::new(vec![n, width], out)?;
        self.derived(value, Op::ConcatCols(parts.to_vec()), parts, "concat_cols")
    }

    /// Interleaves `s` equally shaped `[B×d]` blocks into a `[B·s × d]`
    /// sequence batch: output row `b·s + i` is row `b` of block `i`.
    pub fn interleave(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]);
        let (b, d) = (first.rows(), first.cols());
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != b || pv.cols() != d {
                return Err(shape_err("interleave", self.value(parts[0]), pv));
            }
        }
        let s = parts.len();
        let mut out = Vec::with_capacity(b * s * d);
        for row in 0..b {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(row));
            }
        }
        let value = Tensor::new(vec![b * s, d], out)?;
        self.derived(value, Op::Interleave(parts.to_vec()), parts, "interleave")
    }

    /// `[n×m] → [n×1]` row sums.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let data: Vec<f64> = (0..xv.rows()).map(|i| xv.row(i).iter().sum()).collect();
        let value = Tensor::new(vec![data.len(), 1], data)?;
        self.derived(value, Op::RowSum(x), &[x], "row_sum")
    }

    /// `[n×m] → [n×1]` Euclidean row norms. The gradient at a zero row is 0.
    pub fn row_norm(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let data: Vec<f64> = (0..xv.rows())
            .map(|i| xv.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let value = Tensor::new(vec![data.len(), 1], data)?;
        self.derived(value, Op::RowNorm(x), &[x], "row_norm")
    }

    /// ConvKB-style convolution: each of the `f` filters `[w0, w1, w2]` slides
    /// over the `d` rows of the `d×3` matrix `[h | r | t]`. Output is
    /// `[n × f·d]`, filter-major (pre-activation).
    pub fn conv_triple(&mut self, h: Var, r: Var, t: Var, filters: Var, bias: Var) -> Result<Var> {
        let (hv, rv, tv) = (self.value(h), self.value(r), self.value(t));
        if hv.shape() != rv.shape() || hv.shape() != tv.shape() {
            return Err(shape_err("conv_triple", hv, rv));
        }
        let (fv, bv) = (self.value(filters), self.value(bias));
        if fv.cols() != 3 || bv.len() != fv.rows() {
            return Err(shape_err("conv_triple filters", fv, bv));
        }
        let (n, d, f) = (hv.rows(), hv.cols(), fv.rows());
        let mut out = vec![0.0; n * f * d];
        for b in 0..n {
            let (hr, rr, tr) = (hv.row(b), rv.row(b), tv.row(b));
            for k in 0..f {
                let w = fv.row(k);
                let bias_k = bv.data()[k];
                let o = &mut out[b * f * d + k * d..b * f * d + (k + 1) * d];
                for i in 0..d {
                    o[i] = w[0] * hr[i] + w[1] * rr[i] + w[2] * tr[i] + bias_k;
                }
            }
        }
        let value = Tensor::new(vec![n, f * d], out)?;
        self.derived(value, Op::ConvTriple { h, r, t, filters, bias }, &[h, r, t, filters, bias], "conv_triple")
    }

    /// Inverted dropout with a precomputed keep mask (entries 0 or 1).
    pub fn dropout(&mut self, x: Var, keep: &[bool], rate: f64) -> Result<Var> {
        let xv = self.value(x);
        if keep.len() != xv.len() {
            return Err(Error::Validation("dropout mask length mismatch".into()));
        }
        let s = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = keep.iter().map(|&k| if k { s } else { 0.0 }).collect();
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.derived(value, Op::Dropout { x, mask }, &[x], "dropout")
    }

    /// Mean binary cross-entropy on logits, in the stable
    /// `max(z,0) − z·y + ln(1 + e^{−|z|})` form.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let zv = self.value(logits);
        if zv.len() != labels.len() {
            return Err(Error::Shape {
                op: "bce_with_logits",
                left: zv.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        if let Some(bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(Error::Validation(format!("label {bad} is not binary")));
        }
        let n = labels.len() as f64;
        let total: f64 = zv
            .data()
            .iter()
            .zip(labels)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        let value = Tensor::scalar(total / n);
        self.derived(value, Op::BceWithLogits { logits, labels: labels.to_vec() }, &[logits], "bce_with_logits")
    }

    /// Mean squared error over the rows selected by `mask` (all columns).
    pub fn mse_masked(&mut self, pred: Var, target: &Tensor, mask: &[bool]) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() || mask.len() != pv.rows() {
            return Err(shape_err("mse_masked", pv, target));
        }
        let d = pv.cols();
        let rows = mask.iter().filter(|&&m| m).count();
        if rows == 0 {
            return Err(Error::NoMaskedTokens);
        }
        let count = rows * d;
        let mut total = 0.0;
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            total += pv
                .row(i)
                .iter()
                .zip(target.row(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        let value = Tensor::scalar(total / count as f64);
        let op = Op::MseMasked {
            pred,
            target: target.clone(),
            mask: mask.to_vec(),
            count,
        };
        self.derived(value, op, &[pred], "mse_masked")
    }

    /// `Σᵢ wᵢ Σⱼ (predᵢⱼ − targetᵢⱼ)²`.
    pub fn weighted_sq_err(&mut self, pred: Var, target: &Tensor, weights: &[f64]) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() || weights.len() != pv.rows() {
            return Err(shape_err("weighted_sq_err", pv, target));
        }
        let total: f64 = (0..pv.rows())
            .map(|i| {
                weights[i]
                    * pv.row(i)
                        .iter()
                        .zip(target.row(i))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
            })
            .sum();
        let op = Op::WeightedSqErr {
            pred,
            target: target.clone(),
            weights: weights.to_vec(),
        };
        self.derived(Tensor::scalar(total), op, &[pred], "weighted_sq_err")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let m = xv.data().iter().sum::<f64>() / xv.len() as f64;
        self.derived(Tensor::scalar(m), Op::Mean(x), &[x], "mean")
    }

    /// Reverse pass from a single-element node. Gradients from any previous
    /// backward call are discarded.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::Validation(format!(
                "backward root must be a scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (g, node) in grads.iter().zip(&self.nodes) {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(Error::NonFinite("backward"));
                }
                debug_assert_eq!(g.shape(), node.value.shape());
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let gd = g.data();
        // Lazily-allocated gradient accumulator for a parent.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape()));
            f(slot.data_mut());
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
                let (n, a, m) = (xv.rows(), xv.cols(), wv.cols());
                acc(*x, &mut |dx| gemm_nt_acc(gd, wv.data(), dx, n, a, m));
                acc(*w, &mut |dw| gemm_tn_acc(xv.data(), gd, dw, n, a, m));
                if let Some(b) = b {
                    acc(*b, &mut |db| {
                        for row in gd.chunks(m) {
                            for (d, r) in db.iter_mut().zip(row) {
                                *d += r;
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, gd));
                acc(*b, &mut |d| add_into(d, gd));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, gd));
                acc(*b, &mut |d| {
                    for (x, y) in d.iter_mut().zip(gd) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |d| {
                    for ((x, g), o) in d.iter_mut().zip(gd).zip(bv) {
                        *x += g * o;
                    }
                });
                acc(*b, &mut |d| {
                    for ((x, g), o) in d.iter_mut().zip(gd).zip(av) {
                        *x += g * o;
                    }
                });
            }
            Op::Scale(x, s) => acc(*x, &mut |d| {
                for (x, g) in d.iter_mut().zip(gd) {
                    *x += s * g;
                }
            }),
            Op::AddTiled { x, p } => {
                acc(*x, &mut |d| add_into(d, gd));
                acc(*p, &mut |d| {
                    let period = d.len();
                    for (k, g) in gd.iter().enumerate() {
                        d[k % period] += g;
                    }
                });
            }
            Op::Relu(x) => {
                let xv = nodes[x.0].value.data();
                acc(*x, &mut |d| {
                    for ((o, g), xi) in d.iter_mut().zip(gd).zip(xv) {
                        if *xi > 0.0 {
                            *o += g;
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = nodes[x.0].value.data();
                acc(*x, &mut |d| {
                    for ((o, g), xi) in d.iter_mut().zip(gd).zip(xv) {
                        *o += g * gelu_grad_scalar(*xi);
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let m = out.cols();
                acc(*x, &mut |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(m).zip(gd.chunks(m)).zip(out.data().chunks(m)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                        for ((o, g), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *o += y * (g - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gv = nodes[gamma.0].value.data();
                let d = gv.len();
                acc(*gamma, &mut |dg| {
                    for (grow, hrow) in gd.chunks(d).zip(xhat.chunks(d)) {
                        for ((o, g), h) in dg.iter_mut().zip(grow).zip(hrow) {
                            *o += g * h;
                        }
                    }
                });
                acc(*beta, &mut |db| {
                    for grow in gd.chunks(d) {
                        add_into(db, grow);
                    }
                });
                acc(*x, &mut |dx| {
                    let mut dxhat = vec![0.0; d];
                    for (r, ((dxrow, grow), hrow)) in
                        dx.chunks_mut(d).zip(gd.chunks(d)).zip(xhat.chunks(d)).enumerate()
                    {
                        for j in 0..d {
                            dxhat[j] = grow[j] * gv[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dh = dxhat.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dxrow[j] += rstd[r] * (dxhat[j] - mean_d - hrow[j] * mean_dh);
                        }
                    }
                });
            }
            Op::Attention { q, k, v, seq, heads, probs } => {
                let (qd, kd, vd) = (nodes[q.0].value.data(), nodes[k.0].value.data(), nodes[v.0].value.data());
                let (n, d) = (out.rows(), out.cols());
                let (seq, heads) = (*seq, *heads);
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = vec![0.0; n * d];
                let mut dk = vec![0.0; n * d];
                let mut dv = vec![0.0; n * d];
                let mut dp = vec![0.0; seq];
                for g_ in 0..n / seq {
                    for h in 0..heads {
                        let c0 = h * dh;
                        for i in 0..seq {
                            let ri = (g_ * seq + i) * d + c0;
                            let base = ((g_ * heads + h) * seq + i) * seq;
                            let p = &probs[base..base + seq];
                            let go = &gd[ri..ri + dh];
                            for j in 0..seq {
                                let rj = (g_ * seq + j) * d + c0;
                                dp[j] = go.iter().zip(&vd[rj..rj + dh]).map(|(a, b)| a * b).sum();
                                for c in 0..dh {
                                    dv[rj + c] += p[j] * go[c];
                                }
                            }
                            let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                            for j in 0..seq {
                                let ds = p[j] * (dp[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let rj = (g_ * seq + j) * d + c0;
                                for c in 0..dh {
                                    dq[ri + c] += ds * kd[rj + c];
                                    dk[rj + c] += ds * qd[ri + c];
                                }
                            }
                        }
                    }
                }
                acc(*q, &mut |o| add_into(o, &dq));
                acc(*k, &mut |o| add_into(o, &dk));
                acc(*v, &mut |o| add_into(o, &dv));
            }
            Op::GatherRows { x, idx } => {
                let d = out.cols();
                acc(*x, &mut |dx| {
                    for (r, &src) in idx.iter().enumerate() {
                        add_into(&mut dx[src * d..(src + 1) * d], &gd[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = nodes[p.0].value.len();
                    acc(*p, &mut |d| add_into(d, &gd[off..off + len]));
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let width = out.cols();
                let mut off = 0;
                for p in parts {
                    let w = nodes[p.0].value.cols();
                    acc(*p, &mut |d| {
                        for (drow, grow) in d.chunks_mut(w).zip(gd.chunks(width)) {
                            add_into(drow, &grow[off..off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::Interleave(parts) => {
                let s = parts.len();
                let d = out.cols();
                for (i, p) in parts.iter().enumerate() {
                    acc(*p, &mut |dp| {
                        for (b, drow) in dp.chunks_mut(d).enumerate() {
                            let r = b * s + i;
                            add_into(drow, &gd[r * d..(r + 1) * d]);
                        }
                    });
                }
            }
            Op::RowSum(x) => {
                let m = nodes[x.0].value.cols();
                acc(*x, &mut |d| {
                    for (drow, g) in d.chunks_mut(m).zip(gd) {
                        for o in drow {
                            *o += g;
                        }
                    }
                });
            }
            Op::RowNorm(x) => {
                let xv = &nodes[x.0].value;
                let m = xv.cols();
                acc(*x, &mut |d| {
                    for (r, drow) in d.chunks_mut(m).enumerate() {
                        let norm = out.data()[r];
                        if norm == 0.0 {
                            continue;
                        }
                        for (o, xi) in drow.iter_mut().zip(xv.row(r)) {
                            *o += gd[r] * xi / norm;
                        }
                    }
                });
            }
            Op::ConvTriple { h, r, t, filters, bias } => {
                let fv = &nodes[filters.0].value;
                let inputs = [&nodes[h.0].value, &nodes[r.0].value, &nodes[t.0].value];
                let (n, d) = (inputs[0].rows(), inputs[0].cols());
                let f = fv.rows();
                for (slot, var) in [*h, *r, *t].into_iter().enumerate() {
                    acc(var, &mut |dx| {
                        for b in 0..n {
                            for k in 0..f {
                                let w = fv.get(k, slot);
                                let go = &gd[b * f * d + k * d..b * f * d + (k + 1) * d];
                                for (o, g) in dx[b * d..(b + 1) * d].iter_mut().zip(go) {
                                    *o += w * g;
                                }
                            }
                        }
                    });
                }
                acc(*filters, &mut |dw| {
                    for b in 0..n {
                        for k in 0..f {
                            let go = &gd[b * f * d + k * d..b * f * d + (k + 1) * d];
                            for (slot, input) in inputs.iter().enumerate() {
                                dw[k * 3 + slot] += go.iter().zip(input.row(b)).map(|(a, c)| a * c).sum::<f64>();
                            }
                        }
                    }
                });
                acc(*bias, &mut |db| {
                    for b in 0..n {
                        for k in 0..f {
                            db[k] += gd[b * f * d + k * d..b * f * d + (k + 1) * d].iter().sum::<f64>();
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => acc(*x, &mut |d| {
                for ((o, g), m) in d.iter_mut().zip(gd).zip(mask) {
                    *o += g * m;
                }
            }),
            Op::BceWithLogits { logits, labels } => {
                let zv = nodes[logits.0].value.data();
                let n = labels.len() as f64;
                acc(*logits, &mut |d| {
                    for ((o, z), y) in d.iter_mut().zip(zv).zip(labels) {
                        *o += gd[0] * (sigmoid(*z) - y) / n;
                    }
                });
            }
            Op::MseMasked { pred, target, mask, count } => {
                let pv = &nodes[pred.0].value;
                let dcols = pv.cols();
                let c = 2.0 * gd[0] / *count as f64;
                acc(*pred, &mut |d| {
                    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                        for j in 0..dcols {
                            d[i * dcols + j] += c * (pv.get(i, j) - target.get(i, j));
                        }
                    }
                });
            }
            Op::WeightedSqErr { pred, target, weights } => {
                let pv = &nodes[pred.0].value;
                let dcols = pv.cols();
                acc(*pred, &mut |d| {
                    for (i, w) in weights.iter().enumerate() {
                        for j in 0..dcols {
                            d[i * dcols + j] += 2.0 * gd[0] * w * (pv.get(i, j) - target.get(i, j));
                        }
                    }
                });
            }
            Op::Mean(x) => {
                let n = nodes[x.0].value.len() as f64;
                acc(*x, &mut |d| {
                    for o in d {
                        *o += gd[0] / n;
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
