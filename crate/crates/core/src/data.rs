//! Friend-recall edge datasets: records, the planted synthetic generator,
//! head-grouped splits, CSV I/O and feature standardization.
//!
//! Heads are active players, tails are lost players. Every labeled head
//! contributes all of its candidate edges with labels drawn from a planted
//! logistic model; unlabeled heads contribute their edges to the pre-training
//! pool.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::sigmoid;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Positive,
    Negative,
    Unlabeled,
}

impl Label {
    pub fn token(self) -> &'static str {
        match self {
            Label::Positive => "1",
            Label::Negative => "0",
            Label::Unlabeled => "-1",
        }
    }

    pub fn parse(tok: &str) -> Option<Label> {
        match tok {
            "1" => Some(Label::Positive),
            "0" => Some(Label::Negative),
            "-1" => Some(Label::Unlabeled),
            _ => None,
        }
    }

    /// `1.0` / `0.0` for labeled edges.
    pub fn target(self) -> Option<f64> {
        match self {
            Label::Positive => Some(1.0),
            Label::Negative => Some(0.0),
            Label::Unlabeled => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeRecord {
    pub edge_id: u64,
    pub head_id: u64,
    pub tail_id: u64,
    pub label: Label,
    pub x_head: Vec<f64>,
    /// Index 0 is the intimacy score.
    pub x_edge: Vec<f64>,
    pub x_tail: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureWidths {
    pub head: usize,
    pub edge: usize,
    pub tail: usize,
}

impl FeatureWidths {
    pub fn total(&self) -> usize {
        self.head + self.edge + self.tail
    }

    pub fn check(&self, e: &EdgeRecord) -> Result<()> {
        for (field, got, want) in [
            ("x_head", e.x_head.len(), self.head),
            ("x_edge", e.x_edge.len(), self.edge),
            ("x_tail", e.x_tail.len(), self.tail),
        ] {
            if got != want {
                return Err(Error::Validation(format!(
                    "edge {}: {field} has width {got}, expected {want}",
                    e.edge_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub widths: FeatureWidths,
    pub edges: Vec<EdgeRecord>,
}

impl Dataset {
    pub fn new(widths: FeatureWidths, edges: Vec<EdgeRecord>) -> Result<Self> {
        for e in &edges {
            widths.check(e)?;
        }
        Ok(Dataset { widths, edges })
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn labeled(&self) -> Dataset {
        self.filtered(|e| e.label != Label::Unlabeled)
    }

    pub fn unlabeled(&self) -> Dataset {
        self.filtered(|e| e.label == Label::Unlabeled)
    }

    pub fn filtered(&self, keep: impl Fn(&EdgeRecord) -> bool) -> Dataset {
        Dataset {
            widths: self.widths,
            edges: self.edges.iter().filter(|e| keep(e)).cloned().collect(),
        }
    }

    pub fn head_ids(&self) -> BTreeSet<u64> {
        self.edges.iter().map(|e| e.head_id).collect()
    }

    /// Edges grouped by head, keyed and ordered by head id.
    pub fn groups(&self) -> BTreeMap<u64, Vec<&EdgeRecord>> {
        let mut m: BTreeMap<u64, Vec<&EdgeRecord>> = BTreeMap::new();
        for e in &self.edges {
            m.entry(e.head_id).or_default().push(e);
        }
        m
    }
}

/// The planted logistic return model: `P(positive) = σ(w·[x_h; x_r; x_t] + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl PlantedModel {
    pub fn logit(&self, e: &EdgeRecord) -> f64 {
        let x = e.x_head.iter().chain(&e.x_edge).chain(&e.x_tail);
        self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias
    }

    /// Logit of a concatenated `[x_h; x_r; x_t]` vector.
    pub fn logit_of(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub n_heads: usize,
    /// Candidates per head are uniform on `[candidates_min, candidates_max]`.
    pub candidates_min: usize,
    pub candidates_max: usize,
    pub widths: FeatureWidths,
    /// Explicit planted model; when `None` one is drawn from the seed using
    /// `signal_scale`, `intimacy_weight` and `planted_bias`.
    pub planted: Option<PlantedModel>,
    pub signal_scale: f64,
    pub intimacy_weight: f64,
    pub planted_bias: f64,
    /// Fraction of heads whose edges are all unlabeled.
    pub unlabeled_fraction: f64,
    pub split_ratio: f64,
    /// When non-zero, node features are noisy projections of per-node latent
    /// factors of this size, labels follow the planted model applied to the
    /// noise-free projections, and edge features depend on the head/tail latent
    /// interaction. Zero gives i.i.d. standard-normal features.
    pub latent_dim: usize,
    /// Share of feature variance explained by the latent factors.
    pub latent_strength: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_heads: 1000,
            candidates_min: 10,
            candidates_max: 10,
            widths: FeatureWidths {
                head: 16,
                edge: 4,
                tail: 16,
            },
            planted: None,
            signal_scale: 3.0,
            intimacy_weight: 1.0,
            planted_bias: -2.0,
            unlabeled_fraction: 0.0,
            split_ratio: 0.8,
            latent_dim: 0,
            latent_strength: 0.8,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let w = self.widths;
        if w.head == 0 || w.edge == 0 || w.tail == 0 {
            return Err(Error::Validation("feature widths must be >= 1".into()));
        }
        if self.n_heads == 0 {
            return Err(Error::Validation("n_heads must be >= 1".into()));
        }
        if self.candidates_min == 0 || self.candidates_min > self.candidates_max {
            return Err(Error::Validation(format!(
                "bad candidate range [{}, {}]",
                self.candidates_min, self.candidates_max
            )));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::Validation(format!("split ratio {} not in (0,1)", self.split_ratio)));
        }
        if !(0.0..=1.0).contains(&self.unlabeled_fraction) {
            return Err(Error::Validation("unlabeled_fraction must be in [0,1]".into()));
        }
        if !(0.0..=1.0).contains(&self.latent_strength) {
            return Err(Error::Validation("latent_strength must be in [0,1]".into()));
        }
        if let Some(p) = &self.planted {
            if p.weights.len() != w.total() {
                return Err(Error::Validation(format!(
                    "planted weights have length {}, expected {}",
                    p.weights.len(),
                    w.total()
                )));
            }
        }
        Ok(())
    }

    /// The planted model used for labels: the explicit one, or one drawn
    /// from the seed with a positive intimacy weight.
    pub fn planted_model(&self) -> PlantedModel {
        if let Some(p) = &self.planted {
            return p.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, 0x005e_ed0f_71a7));
        let d = self.widths.total();
        let s = self.signal_scale / (d as f64).sqrt();
        let mut weights: Vec<f64> = (0..d).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect();
        weights[self.widths.head] = self.intimacy_weight;
        PlantedModel {
            weights,
            bias: self.planted_bias,
        }
    }
}

/// SplitMix64 finalizer over `a ^ mix(b)`; used to derive independent
/// per-head streams from the run seed.
pub fn mix(a: u64, b: u64) -> u64 {
    fn sm(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    sm(a ^ sm(b))
}

/// Rounds to the 9 significant digits used by the CSV format, so generated
/// datasets equal their file form exactly.
pub fn quantize(x: f64) -> f64 {
    format_feature(x).parse().expect("formatted float parses")
}

pub fn format_feature(x: f64) -> String {
    format!("{x:.8e}")
}

struct Latents {
    head_load: Vec<Vec<f64>>,
    tail_load: Vec<Vec<f64>>,
    edge_load: Vec<Vec<f64>>,
}

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, k: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            let v: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

/// `(observed, noise-free)` projection of a latent vector.
fn noisy_projection(load: &[Vec<f64>], z: &[f64], strength: f64, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let (a, b) = (strength.sqrt(), (1.0 - strength).sqrt());
    load.iter()
        .map(|row| {
            let signal = a * row.iter().zip(z).map(|(l, v)| l * v).sum::<f64>();
            let noise: f64 = rng.sample(StandardNormal);
            (quantize(signal + b * noise), signal)
        })
        .unzip()
}

fn std_normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| quantize(rng.sample(StandardNormal))).collect()
}

/// Generates a dataset from the planted model. Deterministic in `spec.seed`;
/// each head draws from its own stream derived from the seed and head id.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let planted = spec.planted_model();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, 0x0dd_5eed));

    let n_unlabeled = (spec.unlabeled_fraction * spec.n_heads as f64).round() as usize;
    let mut order: Vec<usize> = (0..spec.n_heads).collect();
    order.shuffle(&mut rng);
    let mut unlabeled = vec![false; spec.n_heads];
    for &h in &order[..n_unlabeled] {
        unlabeled[h] = true;
    }

    let latents = (spec.latent_dim > 0).then(|| {
        let k = spec.latent_dim;
        Latents {
            head_load: unit_rows(&mut rng, spec.widths.head, k),
            tail_load: unit_rows(&mut rng, spec.widths.tail, k),
            edge_load: unit_rows(&mut rng, spec.widths.edge, k),
        }
    });

    let mut edges = Vec::new();
    for (head, &hidden) in unlabeled.iter().enumerate() {
        let mut hr = ChaCha8Rng::seed_from_u64(mix(spec.seed, head as u64 + 1));
        let n_cand = hr.random_range(spec.candidates_min..=spec.candidates_max);
        let (x_head, clean_head, z_head) = match &latents {
            None => (std_normal_vec(&mut hr, spec.widths.head), Vec::new(), Vec::new()),
            Some(l) => {
                let z: Vec<f64> = (0..spec.latent_dim).map(|_| hr.sample(StandardNormal)).collect();
                let (x, clean) = noisy_projection(&l.head_load, &z, spec.latent_strength, &mut hr);
                (x, clean, z)
            }
        };
        for _ in 0..n_cand {
            let edge_id = edges.len() as u64;
            let (x_edge, x_tail, clean) = match &latents {
                None => (
                    std_normal_vec(&mut hr, spec.widths.edge),
                    std_normal_vec(&mut hr, spec.widths.tail),
                    None,
                ),
                Some(l) => {
                    let z_tail: Vec<f64> = (0..spec.latent_dim).map(|_| hr.sample(StandardNormal)).collect();
                    let (x_tail, clean_tail) = noisy_projection(&l.tail_load, &z_tail, spec.latent_strength, &mut hr);
                    let inter: Vec<f64> = z_head.iter().zip(&z_tail).map(|(a, b)| a * b).collect();
                    let (x_edge, clean_edge) = noisy_projection(&l.edge_load, &inter, spec.latent_strength, &mut hr);
                    let clean: Vec<f64> = clean_head.iter().chain(&clean_edge).chain(&clean_tail).copied().collect();
                    (x_edge, x_tail, Some(clean))
                }
            };
            let mut e = EdgeRecord {
                edge_id,
                head_id: head as u64,
                tail_id: edge_id,
                label: Label::Unlabeled,
                x_head: x_head.clone(),
                x_edge,
                x_tail,
            };
            let u: f64 = hr.random();
            if !hidden {
                let z = match &clean {
                    None => planted.logit(&e),
                    Some(c) => planted.logit_of(c),
                };
                e.label = if u < sigmoid(z) {
                    Label::Positive
                } else {
                    Label::Negative
                };
            }
            edges.push(e);
        }
    }
    Dataset::new(spec.widths, edges)
}

/// Splits labeled edges by head: every head's edges land on one side.
/// `ratio` is the fraction of heads that go to training.
pub fn split_dataset(data: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Validation(format!("split ratio {ratio} not in (0,1)")));
    }
    let mut heads: Vec<u64> = data.head_ids().into_iter().collect();
    if heads.len() < 2 {
        return Err(Error::Validation(format!(
            "need at least 2 heads to split, found {}",
            heads.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0x0005_b117));
    heads.shuffle(&mut rng);
    let n_train = ((ratio * heads.len() as f64).round() as usize).clamp(1, heads.len() - 1);
    let train_heads: BTreeSet<u64> = heads[..n_train].iter().copied().collect();
    Ok((
        data.filtered(|e| train_heads.contains(&e.head_id)),
        data.filtered(|e| !train_heads.contains(&e.head_id)),
    ))
}

pub fn csv_header(w: FeatureWidths) -> String {
    let mut h = String::from("edge_id,head_id,tail_id,label");
    for (prefix, n) in [("h", w.head), ("r", w.edge), ("t", w.tail)] {
        for i in 0..n {
            let _ = write!(h, ",{prefix}_{i}");
        }
    }
    h
}

pub fn write_csv<W: Write>(data: &Dataset, mut out: W) -> std::io::Result<()> {
    writeln!(out, "{}", csv_header(data.widths))?;
    let mut line = String::new();
    for e in &data.edges {
        line.clear();
        let _ = write!(line, "{},{},{},{}", e.edge_id, e.head_id, e.tail_id, e.label.token());
        for v in e.x_head.iter().chain(&e.x_edge).chain(&e.x_tail) {
            line.push(',');
            line.push_str(&format_feature(*v));
        }
        writeln!(out, "{line}")?;
    }
    out.flush()
}

fn widths_from_header(header: &str) -> Result<FeatureWidths> {
    let cols: Vec<&str> = header.trim_end_matches('\r').split(',').collect();
    if cols.len() < 4 || cols[..4] != ["edge_id", "head_id", "tail_id", "label"] {
        return Err(Error::Schema(format!("unexpected header start: {header}")));
    }
    let count = |p: &str| cols.iter().filter(|c| c.starts_with(p)).count();
    let w = FeatureWidths {
        head: count("h_"),
        edge: count("r_"),
        tail: count("t_"),
    };
    if csv_header(w) != header.trim_end_matches('\r') {
        return Err(Error::Schema(format!("malformed feature columns in header: {header}")));
    }
    Ok(w)
}

/// Reads a dataset CSV. When `expected` is given, the header must declare
/// exactly those widths.
pub fn read_csv<R: BufRead>(input: R, expected: Option<FeatureWidths>) -> Result<Dataset> {
    let mut lines = input.lines();
    let header = match lines.next() {
        Some(h) => h.map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?,
        None => return Err(Error::Schema("empty file".into())),
    };
    let widths = widths_from_header(&header)?;
    if let Some(exp) = expected {
        if exp != widths {
            return Err(Error::Schema(format!("header declares widths {widths:?}, expected {exp:?}")));
        }
    }
    let ncols = 4 + widths.total();
    let mut edges = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.map_err(|e| Error::Parse { line: lineno, msg: e.to_string() })?;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != ncols {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected {ncols} columns, found {}", f.len()),
            });
        }
        let int = |s: &str, what: &str| {
            s.parse::<u64>().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("{what} '{s}' is not a non-negative integer"),
            })
        };
        let label = Label::parse(f[3]).ok_or_else(|| Error::Parse {
            line: lineno,
            msg: format!("unknown label token '{}'", f[3]),
        })?;
        let mut feats = Vec::with_capacity(widths.total());
        for s in &f[4..] {
            let v: f64 = s.parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("non-numeric feature '{s}'"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("non-finite feature '{s}'"),
                });
            }
            feats.push(v);
        }
        let x_tail = feats.split_off(widths.head + widths.edge);
        let x_edge = feats.split_off(widths.head);
        edges.push(EdgeRecord {
            edge_id: int(f[0], "edge_id")?,
            head_id: int(f[1], "head_id")?,
            tail_id: int(f[2], "tail_id")?,
            label,
            x_head: feats,
            x_edge,
            x_tail,
        });
    }
    Dataset::new(widths, edges)
}

pub fn save_csv(data: &Dataset, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(data, std::io::BufWriter::new(f)).map_err(|e| Error::io(path, e))
}

pub fn load_csv(path: &Path, expected: Option<FeatureWidths>) -> Result<Dataset> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(BufReader::new(f), expected)
}

/// Per-dimension z-score statistics for the three feature blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub head_mean: Vec<f64>,
    pub head_std: Vec<f64>,
    pub edge_mean: Vec<f64>,
    pub edge_std: Vec<f64>,
    pub tail_mean: Vec<f64>,
    pub tail_std: Vec<f64>,
}

fn moments<'a>(rows: impl Iterator<Item = &'a [f64]> + Clone, width: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.clone().count().max(1) as f64;
    let mut mean = vec![0.0; width];
    for r in rows.clone() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; width];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var
        .into_iter()
        .map(|s| {
            let sd = (s / n).sqrt();
            if sd > 1e-12 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

fn zscore(x: &[f64], mean: &[f64], std: &[f64]) -> Vec<f64> {
    x.iter().zip(mean).zip(std).map(|((v, m), s)| (v - m) / s).collect()
}

impl FeatureStats {
    /// Identity transform.
    pub fn identity(w: FeatureWidths) -> Self {
        FeatureStats {
            head_mean: vec![0.0; w.head],
            head_std: vec![1.0; w.head],
            edge_mean: vec![0.0; w.edge],
            edge_std: vec![1.0; w.edge],
            tail_mean: vec![0.0; w.tail],
            tail_std: vec![1.0; w.tail],
        }
    }

    pub fn fit(data: &Dataset) -> Self {
        let e = &data.edges;
        let (head_mean, head_std) = moments(e.iter().map(|e| e.x_head.as_slice()), data.widths.head);
        let (edge_mean, edge_std) = moments(e.iter().map(|e| e.x_edge.as_slice()), data.widths.edge);
        let (tail_mean, tail_std) = moments(e.iter().map(|e| e.x_tail.as_slice()), data.widths.tail);
        FeatureStats {
            head_mean,
            head_std,
            edge_mean,
            edge_std,
            tail_mean,
            tail_std,
        }
    }

    pub fn widths(&self) -> FeatureWidths {
        FeatureWidths {
            head: self.head_mean.len(),
            edge: self.edge_mean.len(),
            tail: self.tail_mean.len(),
        }
    }

    /// Standardized `(x_head, x_edge, x_tail)`.
    pub fn apply(&self, e: &EdgeRecord) -> [Vec<f64>; 3] {
        [
            zscore(&e.x_head, &self.head_mean, &self.head_std),
            zscore(&e.x_edge, &self.edge_mean, &self.edge_std),
            zscore(&e.x_tail, &self.tail_mean, &self.tail_std),
        ]
    }
}
