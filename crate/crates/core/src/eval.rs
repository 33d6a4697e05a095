//! Per-head candidate ranking, the ranking metric suite and the paired
//! t-test used to compare runs.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::baselines::{baseline_scores, BaselineKind};
use crate::data::{Dataset, EdgeRecord, FeatureStats, Label};
use crate::error::{Error, Result};
use crate::model::transformer::classifier_logits;
use crate::model::ModelConfig;
use crate::params::ParamStore;
use crate::training::{Checkpoint, ModelKind};

/// One scored candidate of a head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub tail_id: u64,
    pub score: f64,
    pub positive: bool,
}

/// 1-based rank of every entry (aligned with the input): descending score,
/// ties by ascending tail id.
pub fn rank_group(scores: &[(u64, f64)]) -> Result<Vec<usize>> {
    if scores.is_empty() {
        return Err(Error::Validation("cannot rank an empty group".into()));
    }
    if let Some((id, s)) = scores.iter().find(|(_, s)| !s.is_finite()) {
        return Err(Error::Validation(format!("candidate {id} has non-finite score {s}")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .1
            .total_cmp(&scores[a].1)
            .then(scores[a].0.cmp(&scores[b].0))
    });
    if let Some(w) = order.windows(2).find(|w| scores[w[0]].0 == scores[w[1]].0) {
        return Err(Error::Validation(format!("duplicate tail id {} in one group", scores[w[0]].0)));
    }
    let mut ranks = vec![0; scores.len()];
    for (pos, &i) in order.iter().enumerate() {
        ranks[i] = pos + 1;
    }
    Ok(ranks)
}

/// Ranking metrics over heads. Each head's rank is that of its
/// highest-ranked positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub hits1: f64,
    pub hits3: f64,
    pub hits5: f64,
    pub hits10: f64,
    pub mr: f64,
    pub mrr: f64,
    pub top5_back: u64,
    pub top10_back: u64,
    pub n_groups: usize,
    pub seed: u64,
    pub model: String,
    /// Groups dropped for having no positive.
    #[serde(skip)]
    pub excluded_groups: usize,
}

impl RankingReport {
    /// Single-line JSON form.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

pub fn compute_metrics(groups: &[Vec<Candidate>], seed: u64, model: &str) -> Result<RankingReport> {
    let mut first_ranks = Vec::with_capacity(groups.len());
    let (mut top5, mut top10) = (0u64, 0u64);
    let mut excluded = 0;
    for g in groups {
        if !g.iter().any(|c| c.positive) {
            excluded += 1;
            continue;
        }
        let pairs: Vec<(u64, f64)> = g.iter().map(|c| (c.tail_id, c.score)).collect();
        let ranks = rank_group(&pairs)?;
        let mut best = usize::MAX;
        for (c, &r) in g.iter().zip(&ranks) {
            if c.positive {
                best = best.min(r);
                top5 += (r <= 5) as u64;
                top10 += (r <= 10) as u64;
            }
        }
        first_ranks.push(best);
    }
    if first_ranks.is_empty() {
        return Err(Error::Validation(format!(
            "no group has a positive candidate ({excluded} groups excluded)"
        )));
    }
    let n = first_ranks.len() as f64;
    let hits = |k: usize| first_ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
    Ok(RankingReport {
        hits1: hits(1),
        hits3: hits(3),
        hits5: hits(5),
        hits10: hits(10),
        mr: first_ranks.iter().sum::<usize>() as f64 / n,
        mrr: first_ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
        top5_back: top5,
        top10_back: top10,
        n_groups: first_ranks.len(),
        seed,
        model: model.to_string(),
        excluded_groups: excluded,
    })
}

/// Outcome of a two-sided paired t-test on `a − b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub mean_diff: f64,
    pub t: f64,
    pub df: usize,
    /// `None` when the differences have zero variance but non-zero mean.
    pub p: Option<f64>,
    pub degenerate: bool,
}

pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::Validation(format!("paired samples differ in length: {} vs {}", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Validation("paired t-test needs at least 2 pairs".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite sample in t-test".into()));
    }
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    let df = n - 1;
    if var == 0.0 {
        if mean == 0.0 {
            return Ok(TTest {
                mean_diff: 0.0,
                t: 0.0,
                df,
                p: Some(1.0),
                degenerate: false,
            });
        }
        return Ok(TTest {
            mean_diff: mean,
            t: mean.signum() * f64::INFINITY,
            df,
            p: None,
            degenerate: true,
        });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df as f64).map_err(|e| Error::Validation(e.to_string()))?;
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TTest {
        mean_diff: mean,
        t,
        df,
        p: Some(p),
        degenerate: false,
    })
}

/// Anything that scores edges for ranking.
#[derive(Debug, Clone)]
pub enum Scorer {
    Classifier {
        params: ParamStore,
        config: ModelConfig,
        stats: FeatureStats,
    },
    Baseline {
        kind: BaselineKind,
        params: ParamStore,
        stats: FeatureStats,
    },
    /// Raw intimacy column `x_edge[index]`.
    Intimacy { index: usize },
}

impl Scorer {
    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        match &c.kind {
            ModelKind::Classifier => Ok(Scorer::Classifier {
                params: c.params.clone(),
                config: c.config.clone(),
                stats: c.stats.clone(),
            }),
            ModelKind::Baseline(name) => Ok(Scorer::Baseline {
                kind: name.parse()?,
                params: c.params.clone(),
                stats: c.stats.clone(),
            }),
            ModelKind::Mae => Err(Error::Validation(
                "a pre-training checkpoint has no classifier; fine-tune it first".into(),
            )),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Scorer::Classifier { .. } => "edge_transformer".into(),
            Scorer::Baseline { kind, .. } => kind.name().into(),
            Scorer::Intimacy { .. } => "intimacy".into(),
        }
    }

    pub fn scores(&self, edges: &[&EdgeRecord]) -> Result<Vec<f64>> {
        match self {
            Scorer::Classifier { params, config, stats } => classifier_logits(params, config, stats, edges),
            Scorer::Baseline { kind, params, stats } => baseline_scores(params, *kind, stats, edges),
            Scorer::Intimacy { index } => edges
                .iter()
                .map(|e| {
                    e.x_edge.get(*index).copied().ok_or_else(|| {
                        Error::Config(format!("intimacy column {index} missing on edge {}", e.edge_id))
                    })
                })
                .collect(),
        }
    }
}

/// Scores every labeled edge of `data` and computes the report over heads.
pub fn evaluate(scorer: &Scorer, data: &Dataset, seed: u64) -> Result<RankingReport> {
    let labeled = data.labeled();
    let edges: Vec<&EdgeRecord> = labeled.edges.iter().collect();
    if edges.is_empty() {
        return Err(Error::Validation("evaluation dataset has no labeled edges".into()));
    }
    let scores = scorer.scores(&edges)?;
    let mut groups: std::collections::BTreeMap<u64, Vec<Candidate>> = Default::default();
    for (e, s) in edges.iter().zip(scores) {
        groups.entry(e.head_id).or_default().push(Candidate {
            tail_id: e.tail_id,
            score: s,
            positive: e.label == Label::Positive,
        });
    }
    let groups: Vec<Vec<Candidate>> = groups.into_values().collect();
    compute_metrics(&groups, seed, &scorer.name())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(tail_id: u64, score: f64, positive: bool) -> Candidate {
        Candidate {
            tail_id,
            score,
            positive,
        }
    }

    #[test]
    fn ranks() {
        assert_eq!(rank_group(&[(1, 0.9), (2, 0.1), (3, 0.5)]).unwrap(), [1, 3, 2]);
        assert_eq!(rank_group(&[(9, 0.0), (2, 0.0), (5, 0.0)]).unwrap(), [3, 1, 2]);
        assert_eq!(rank_group(&[(4, -3.0)]).unwrap(), [1]);
        assert!(matches!(rank_group(&[(1, 0.3), (1, 0.2)]), Err(Error::Validation(_))));
        assert!(rank_group(&[]).is_err());
        assert!(rank_group(&[(1, f64::NAN)]).is_err());
    }

    #[test]
    fn worked_example() {
        let groups = vec![
            vec![c(1, 0.9, true), c(2, 0.1, false)],
            vec![c(1, 0.9, false), c(2, 0.5, false), c(3, 0.4, true), c(4, 0.1, false)],
        ];
        let r = compute_metrics(&groups, 0, "m").unwrap();
        assert_eq!((r.hits1, r.hits3, r.mr), (0.5, 1.0, 2.0));
        assert!((r.mrr - (1.0 + 1.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!((r.top5_back, r.top10_back, r.n_groups), (2, 2, 2));
    }

    #[test]
    fn first_positive_and_all_positive_counts() {
        let g = vec![vec![c(1, 0.1, true), c(2, 0.9, false), c(3, 0.5, true)]];
        let r = compute_metrics(&g, 0, "m").unwrap();
        assert_eq!((r.mr, r.top5_back), (2.0, 2));
    }

    #[test]
    fn groups_without_positives_are_excluded() {
        let g = vec![vec![c(1, 0.1, false)], vec![c(1, 0.3, true)]];
        let r = compute_metrics(&g, 0, "m").unwrap();
        assert_eq!((r.n_groups, r.excluded_groups, r.mrr), (1, 1, 1.0));
        assert!(compute_metrics(&g[..1], 0, "m").is_err());
    }

    #[test]
    fn report_json_keys() {
        let r = compute_metrics(&[vec![c(1, 0.3, true)]], 7, "edge_mlp").unwrap();
        let s = r.to_json();
        assert!(!s.contains('\n'));
        let v: serde_json::Value = serde_json::from_str(&s).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        let mut want = [
            "hits1", "hits3", "hits5", "hits10", "mr", "mrr", "top5_back", "top10_back", "n_groups", "seed", "model",
        ];
        want.sort();
        let mut keys = keys;
        keys.sort();
        assert_eq!(keys, want);
    }

    #[test]
    fn t_test_edge_cases() {
        let a = [0.3, 0.5, 0.2];
        let same = paired_t_test(&a, &a).unwrap();
        assert_eq!((same.t, same.p, same.degenerate), (0.0, Some(1.0), false));

        let b = [0.0; 3];
        let ones = [1.0; 3];
        let deg = paired_t_test(&ones, &b).unwrap();
        assert!(deg.degenerate && deg.p.is_none());

        let jitter = [1.0, 1.001, 0.999, 1.0005];
        let r = paired_t_test(&jitter, &[0.0; 4]).unwrap();
        assert!(r.p.unwrap() < 0.01);
        assert!(paired_t_test(&[1.0], &[0.0]).is_err());
        assert!(paired_t_test(&[1.0, 2.0], &[0.0]).is_err());
    }

    #[test]
    fn t_test_textbook_sleep_data() {
        // Student's sleep data: extra hours of sleep under two drugs
        let drug1 = [0.7, -1.6, -0.2, -1.2, -0.1, 3.4, 3.7, 0.8, 0.0, 2.0];
        let drug2 = [1.9, 0.8, 1.1, 0.1, -0.1, 4.4, 5.5, 1.6, 4.6, 3.4];
        let r = paired_t_test(&drug2, &drug1).unwrap();
        assert!((r.t - 4.0621).abs() < 1e-3, "{}", r.t);
        assert_eq!(r.df, 9);
        // two-sided 0.5% critical value of t(9) is 3.690, 0.2% is 4.297
        let p = r.p.unwrap();
        assert!(p < 0.005 && p > 0.002);
        assert!((p - 0.002833).abs() < 1e-3);
    }
}
