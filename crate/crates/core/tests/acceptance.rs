//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. A substring argument restricts the run
//! to matching criteria.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use edgeformer::baselines::{init_baseline, BaselineKind};
use edgeformer::cli::{execute, Cli, Command};
use edgeformer::data::{
    generate_dataset, read_csv, split_dataset, write_csv, Dataset, DatasetSpec, EdgeRecord, FeatureStats, FeatureWidths, Label,
};
use edgeformer::error::{CheckpointFault, Error};
use edgeformer::eval::{compute_metrics, evaluate, paired_t_test, Candidate, Scorer};
use edgeformer::gradcheck::model_grad_check;
use edgeformer::model::mae::{init_mae, mae_loss_with_targets, sample_mask, transfer_encoder};
use edgeformer::model::transformer::{classifier_logits, init_classifier};
use edgeformer::model::{EdgeInputs, Forward, MaskPlan, ModelConfig};
use edgeformer::params::Bound;
use edgeformer::autodiff::Graph;
use edgeformer::tensor::Tensor;
use edgeformer::training::{baseline_loop, finetune_loop, pretrain_loop, Checkpoint, TrainConfig, TrainMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn small_model(widths: FeatureWidths, d: usize) -> ModelConfig {
    ModelConfig {
        d_model: d,
        n_heads: 2,
        n_encoder_layers: 1,
        n_decoder_layers: 1,
        ffn_dim: 2 * d,
        ..ModelConfig::for_widths(widths)
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let cfg = small_model(FeatureWidths { head: 16, edge: 4, tail: 16 }, 8);
    let r = model_grad_check(&cfg, 4, 1, 1e-5).unwrap();
    let secs = start.elapsed().as_secs_f64();
    outcome(
        r.classifier < 1e-4 && r.mae < 1e-4 && secs < 30.0,
        format!(
            "classifier max rel err {:.2e}, mae {:.2e}, {} scalars in {secs:.1}s",
            r.classifier, r.mae, r.checked
        ),
    )
}

/// First-positive rank computed by counting, independent of sorting.
fn oracle(groups: &[Vec<Candidate>]) -> Option<[f64; 8]> {
    let mut ranks = Vec::new();
    let (mut top5, mut top10) = (0.0, 0.0);
    for g in groups {
        let rank_of = |c: &Candidate| {
            1 + g
                .iter()
                .filter(|o| o.score > c.score || (o.score == c.score && o.tail_id < c.tail_id))
                .count()
        };
        let pos: Vec<usize> = g.iter().filter(|c| c.positive).map(rank_of).collect();
        if pos.is_empty() {
            continue;
        }
        top5 += pos.iter().filter(|&&r| r <= 5).count() as f64;
        top10 += pos.iter().filter(|&&r| r <= 10).count() as f64;
        ranks.push(*pos.iter().min().unwrap());
    }
    if ranks.is_empty() {
        return None;
    }
    let n = ranks.len() as f64;
    let hits = |k| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
    Some([
        hits(1),
        hits(3),
        hits(5),
        hits(10),
        ranks.iter().map(|&r| r as f64).sum::<f64>() / n,
        ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
        top5,
        top10,
    ])
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut compared = 0;
    for _ in 0..1000 {
        let n_groups = rng.random_range(1..=8);
        let groups: Vec<Vec<Candidate>> = (0..n_groups)
            .map(|_| {
                let n = rng.random_range(1..=20);
                let mut ids: Vec<u64> = (0..40).collect();
                rand::seq::SliceRandom::shuffle(ids.as_mut_slice(), &mut rng);
                let coarse = rng.random_bool(0.5);
                (0..n)
                    .map(|i| Candidate {
                        tail_id: ids[i],
                        score: if coarse { rng.random_range(0..4) as f64 } else { rng.random() },
                        positive: rng.random_bool(0.3),
                    })
                    .collect()
            })
            .collect();
        let got = compute_metrics(&groups, 0, "x");
        match (oracle(&groups), got) {
            (None, Err(_)) => {}
            (Some(want), Ok(r)) => {
                let have = [
                    r.hits1,
                    r.hits3,
                    r.hits5,
                    r.hits10,
                    r.mr,
                    r.mrr,
                    r.top5_back as f64,
                    r.top10_back as f64,
                ];
                for (a, b) in have.iter().zip(want) {
                    worst = worst.max((a - b).abs());
                }
                compared += 1;
            }
            (w, g) => return outcome(false, format!("oracle {w:?} vs {:?}", g.map(|r| r.mrr))),
        }
    }
    let example = vec![
        vec![
            Candidate { tail_id: 1, score: 0.9, positive: true },
            Candidate { tail_id: 2, score: 0.1, positive: false },
        ],
        vec![
            Candidate { tail_id: 1, score: 0.9, positive: false },
            Candidate { tail_id: 2, score: 0.8, positive: false },
            Candidate { tail_id: 3, score: 0.2, positive: true },
        ],
    ];
    let r = compute_metrics(&example, 0, "x").unwrap();
    let example_ok = r.hits1 == 0.5 && r.hits3 == 1.0 && r.mr == 2.0 && (r.mrr - 0.6667).abs() < 1e-4;
    outcome(
        worst <= 1e-12 && example_ok,
        format!(
            "{compared} instances, max diff {worst:.1e}; example hits1 {} mr {} mrr {:.4}",
            r.hits1, r.mr, r.mrr
        ),
    )
}

fn masking_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut counts = [0usize; 3];
    let draws = 10_000;
    for _ in 0..draws {
        let m = sample_mask(1.0 / 3.0, &mut rng).unwrap();
        if m.count() != 1 || m.visible_slots()[0] != 0 {
            return outcome(false, format!("bad plan {m:?}"));
        }
        for (c, &hidden) in counts.iter_mut().zip(&m.masked) {
            *c += hidden as usize;
        }
    }
    let freqs: Vec<f64> = counts.iter().map(|&c| c as f64 / draws as f64).collect();
    let freq_ok = freqs.iter().all(|f| (f - 1.0 / 3.0).abs() <= 0.01);

    let w = FeatureWidths { head: 3, edge: 2, tail: 3 };
    let cfg = small_model(w, 8);
    let params = init_mae(&cfg, &mut rng).unwrap();
    let edges = random_edges(6, w, &mut rng);
    let refs: Vec<&EdgeRecord> = edges.iter().collect();
    let stats = FeatureStats::identity(w);
    let inputs = EdgeInputs::new(&refs, &stats).unwrap();
    let plans: Vec<MaskPlan> = (0..6).map(|_| sample_mask(1.0 / 3.0, &mut rng).unwrap()).collect();
    let loss_with = |targets: &EdgeInputs| {
        let mut g = Graph::new();
        let p = Bound::frozen(&mut g, &params).unwrap();
        let mut fw = Forward { g: &mut g, p: &p, cfg: &cfg, rng: None };
        let l = mae_loss_with_targets(&mut fw, &inputs, targets, &plans).unwrap();
        g.value(l).item()
    };
    let base = loss_with(&inputs);
    let mut perturbed = inputs.clone();
    for (i, plan) in plans.iter().enumerate() {
        let parts = [&mut perturbed.head, &mut perturbed.edge, &mut perturbed.tail];
        for (t, part) in parts.into_iter().enumerate() {
            if !plan.masked[t] {
                let cols = part.cols();
                for v in &mut part.data_mut()[i * cols..(i + 1) * cols] {
                    *v += 10.0;
                }
            }
        }
    }
    let invariant = loss_with(&perturbed) == base;
    outcome(
        freq_ok && invariant,
        format!(
            "token frequencies {:.4}/{:.4}/{:.4}; unmasked-target perturbation leaves loss unchanged: {invariant}",
            freqs[0], freqs[1], freqs[2]
        ),
    )
}

fn random_edges(n: usize, w: FeatureWidths, rng: &mut ChaCha8Rng) -> Vec<EdgeRecord> {
    (0..n)
        .map(|i| EdgeRecord {
            edge_id: i as u64,
            head_id: (i / 8) as u64,
            tail_id: i as u64,
            label: Label::Unlabeled,
            x_head: Tensor::randn(&[w.head], 1.0, rng).into_data(),
            x_edge: Tensor::randn(&[w.edge], 1.0, rng).into_data(),
            x_tail: Tensor::randn(&[w.tail], 1.0, rng).into_data(),
        })
        .collect()
}

fn overfit() -> Outcome {
    let start = Instant::now();
    let spec = DatasetSpec {
        n_heads: 4,
        candidates_min: 8,
        candidates_max: 8,
        planted_bias: 0.0,
        seed: 4,
        ..DatasetSpec::default()
    };
    let data = generate_dataset(&spec).unwrap();
    let cfg = small_model(spec.widths, 16);
    let stats = FeatureStats::fit(&data);
    let tcfg = TrainConfig {
        batch_size: 32,
        epochs: 300,
        seed: 4,
        ..TrainConfig::for_mode(TrainMode::Finetune)
    };
    let init = init_classifier(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let run = finetune_loop(&data, &stats, &cfg, &tcfg, init).unwrap();
    let refs: Vec<&EdgeRecord> = data.edges.iter().collect();
    let logits = classifier_logits(&run.checkpoint.params, &cfg, &stats, &refs).unwrap();
    let correct = data
        .edges
        .iter()
        .zip(&logits)
        .filter(|(e, &z)| (z > 0.0) == (e.label == Label::Positive))
        .count();
    let clf_secs = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let w = spec.widths;
    let one = random_edges(1, w, &mut ChaCha8Rng::seed_from_u64(5)).remove(0);
    let repeated = Dataset::new(w, vec![one; 8]).unwrap();
    let tcfg = TrainConfig {
        batch_size: 8,
        epochs: 200,
        seed: 5,
        ..TrainConfig::for_mode(TrainMode::Finetune)
    };
    let tcfg = TrainConfig {
        mode: TrainMode::Pretrain,
        ..tcfg
    };
    let init = init_mae(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let run_mae = pretrain_loop(&repeated, &FeatureStats::identity(w), &cfg, &tcfg, init).unwrap();
    let mae_loss = *run_mae.trace.last().unwrap();
    let mae_secs = start.elapsed().as_secs_f64();

    outcome(
        correct == 32 && run.steps <= 300 && mae_loss <= 1e-3 && run_mae.steps <= 200 && clf_secs < 120.0 && mae_secs < 120.0,
        format!(
            "classifier {correct}/32 correct after {} steps ({clf_secs:.1}s); MAE loss {mae_loss:.2e} after {} steps ({mae_secs:.1}s)",
            run.steps, run_mae.steps
        ),
    )
}

fn link_prediction_beats_intimacy() -> Outcome {
    let (mut et, mut mlp, mut int) = (vec![], vec![], vec![]);
    for seed in 0..10u64 {
        let spec = DatasetSpec {
            n_heads: 5000,
            candidates_min: 10,
            candidates_max: 10,
            seed,
            ..DatasetSpec::default()
        };
        let data = generate_dataset(&spec).unwrap();
        let (train, val) = split_dataset(&data, spec.split_ratio, seed).unwrap();
        let stats = FeatureStats::fit(&train);
        let cfg = small_model(spec.widths, 16);
        let tcfg = TrainConfig {
            epochs: 3,
            seed,
            ..TrainConfig::for_mode(TrainMode::Finetune)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = finetune_loop(&train, &stats, &cfg, &tcfg, init_classifier(&cfg, &mut rng).unwrap()).unwrap();
        let mlp_init = init_baseline(BaselineKind::EdgeMlp, &cfg, &mut rng).unwrap();
        let b = baseline_loop(&train, &stats, &cfg, BaselineKind::EdgeMlp, &tcfg, mlp_init).unwrap();
        et.push(evaluate(&Scorer::from_checkpoint(&a.checkpoint).unwrap(), &val, seed).unwrap().mrr);
        mlp.push(evaluate(&Scorer::from_checkpoint(&b.checkpoint).unwrap(), &val, seed).unwrap().mrr);
        int.push(evaluate(&Scorer::Intimacy { index: 0 }, &val, seed).unwrap().mrr);
    }
    let (et, mlp, int) = (mean(&et), mean(&mlp), mean(&int));
    outcome(
        et - int >= 0.05 && mlp - int >= 0.05,
        format!("mean MRR over 10 seeds: edge transformer {et:.4}, edge MLP {mlp:.4}, intimacy {int:.4}"),
    )
}

fn pretraining_helps() -> Outcome {
    let (mut tuned, mut scratch) = (vec![], vec![]);
    for seed in 100..110u64 {
        let spec = DatasetSpec {
            n_heads: 5000,
            latent_dim: 4,
            latent_strength: 0.3,
            seed,
            ..DatasetSpec::default()
        };
        let data = generate_dataset(&spec).unwrap();
        let (train, val) = split_dataset(&data, spec.split_ratio, seed).unwrap();
        let (labeled, rest) = split_dataset(&train, 0.02, seed + 1).unwrap();
        let mut pool = rest;
        pool.edges.iter_mut().for_each(|e| e.label = Label::Unlabeled);
        let stats = FeatureStats::fit(&train);
        let cfg = small_model(spec.widths, 16);

        let pre = TrainConfig {
            epochs: 20,
            seed,
            ..TrainConfig::for_mode(TrainMode::Pretrain)
        };
        let pre = TrainConfig {
            optim: edgeformer::training::AdamW {
                learning_rate: 1e-3,
                ..pre.optim
            },
            ..pre
        };
        let ft = TrainConfig {
            epochs: 10,
            batch_size: 64,
            seed,
            ..TrainConfig::for_mode(TrainMode::Finetune)
        };
        let mae = pretrain_loop(&pool, &stats, &cfg, &pre, init_mae(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()).unwrap();
        let head_rng = &mut ChaCha8Rng::seed_from_u64(seed + 2);
        let from_mae = finetune_loop(&labeled, &stats, &cfg, &ft, transfer_encoder(&mae.checkpoint.params, &cfg, head_rng).unwrap()).unwrap();
        let fresh = init_classifier(&cfg, &mut ChaCha8Rng::seed_from_u64(seed + 2)).unwrap();
        let from_scratch = finetune_loop(&labeled, &stats, &cfg, &ft, fresh).unwrap();
        tuned.push(evaluate(&Scorer::from_checkpoint(&from_mae.checkpoint).unwrap(), &val, seed).unwrap().mrr);
        scratch.push(evaluate(&Scorer::from_checkpoint(&from_scratch.checkpoint).unwrap(), &val, seed).unwrap().mrr);
    }
    let t = paired_t_test(&tuned, &scratch).unwrap();
    let (a, b) = (mean(&tuned), mean(&scratch));
    outcome(
        a >= b && t.p.is_some(),
        format!(
            "mean validation MRR: pre-trained {a:.4}, scratch {b:.4}; paired t = {:.3}, df {}, p = {:?}",
            t.t, t.df, t.p
        ),
    )
}

fn pipeline(out: &std::path::Path) -> (Vec<u8>, Vec<u8>, Vec<u8>) {
    let common = [
        "data.n_heads=60",
        "model.d_model=8",
        "model.n_heads=2",
        "model.n_encoder_layers=1",
        "model.ffn_dim=16",
        "train.epochs=2",
        "train.batch_size=64",
    ];
    let run = |command: Command, extra: &[String]| {
        let mut set: Vec<String> = common.iter().map(|s| s.to_string()).collect();
        set.extend_from_slice(extra);
        let cli = Cli {
            command,
            config: None,
            set,
            seed: Some(77),
            out: out.to_path_buf(),
        };
        let mut stdout = Vec::new();
        execute(&cli, &mut stdout).unwrap();
        stdout
    };
    let p = |k: &str, f: &str| format!("{k}={}", out.join(f).display());
    run(Command::Generate, &[]);
    run(Command::Pretrain, &[p("paths.train", "train.csv")]);
    run(Command::Finetune, &[p("paths.train", "train.csv"), p("paths.init", "pretrain.ckpt")]);
    let report = run(Command::Evaluate, &[p("paths.val", "val.csv"), p("eval.checkpoint", "finetune.ckpt")]);
    let pre = std::fs::read(out.join("pretrain.ckpt")).unwrap();
    let fine = std::fs::read(out.join("finetune.ckpt")).unwrap();
    (pre, fine, report)
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = pipeline(a.path());
    let rb = pipeline(b.path());
    outcome(
        ra == rb,
        format!(
            "two runs: pre-train checkpoints equal {}, fine-tune checkpoints equal {}, reports equal {}",
            ra.0 == rb.0,
            ra.1 == rb.1,
            ra.2 == rb.2
        ),
    )
}

fn fault(bytes: &[u8]) -> Option<CheckpointFault> {
    match Checkpoint::from_bytes(bytes) {
        Err(Error::Checkpoint(f)) => Some(f),
        _ => None,
    }
}

fn format_round_trips() -> Outcome {
    let mut checks: Vec<(&str, bool)> = Vec::new();
    let spec = DatasetSpec {
        n_heads: 30,
        unlabeled_fraction: 0.3,
        seed: 8,
        ..DatasetSpec::default()
    };
    let data = generate_dataset(&spec).unwrap();
    let mut buf = Vec::new();
    write_csv(&data, &mut buf).unwrap();
    let back = read_csv(buf.as_slice(), Some(spec.widths)).unwrap();
    checks.push(("dataset round trip", back == data));

    let cfg = small_model(spec.widths, 8);
    let stats = FeatureStats::fit(&data);
    let tcfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::for_mode(TrainMode::Pretrain)
    };
    let run = pretrain_loop(&data, &stats, &cfg, &tcfg, init_mae(&cfg, &mut ChaCha8Rng::seed_from_u64(8)).unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    run.checkpoint.save(&p1).unwrap();
    let loaded = Checkpoint::load(&p1).unwrap();
    loaded.save(&p2).unwrap();
    let bytes = std::fs::read(&p1).unwrap();
    checks.push(("checkpoint save/load/save", bytes == std::fs::read(&p2).unwrap() && loaded == run.checkpoint));

    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"ZIP!");
    checks.push(("bad magic", fault(&bad) == Some(CheckpointFault::BadMagic)));
    let mut v9 = bytes.clone();
    v9[4..6].copy_from_slice(&9u16.to_le_bytes());
    checks.push(("unknown version", fault(&v9) == Some(CheckpointFault::UnsupportedVersion(9))));
    checks.push(("truncated", fault(&bytes[..bytes.len() / 2]) == Some(CheckpointFault::Truncated)));

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let no_panic = catch_unwind(AssertUnwindSafe(|| {
        for _ in 0..2000 {
            let mut b = bytes.clone();
            match rng.random_range(0..3) {
                0 => b.truncate(rng.random_range(0..b.len())),
                1 => {
                    let i = rng.random_range(0..b.len());
                    b[i] = rng.random();
                }
                _ => b = (0..rng.random_range(0..64)).map(|_| rng.random()).collect(),
            }
            let _ = Checkpoint::from_bytes(&b);
        }
    }))
    .is_ok();
    checks.push(("corrupted checkpoints never panic", no_panic));

    let text = String::from_utf8(buf).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let row = lines[3].clone();
    let cols: Vec<&str> = row.split(',').collect();
    let with = |i: usize, v: &str| {
        let mut c = cols.clone();
        c[i] = v;
        c.join(",")
    };
    let parse_at = |replacement: String| {
        let mut l = lines.clone();
        l[3] = replacement;
        matches!(read_csv(l.join("\n").as_bytes(), None), Err(Error::Parse { line: 4, .. }))
    };
    checks.push(("unknown label token", parse_at(with(3, "2"))));
    checks.push(("non-numeric feature", parse_at(with(5, "abc"))));
    checks.push(("wrong column count", parse_at(format!("{row},1"))));
    lines[0] = lines[0].replace("r_3", "r_x");
    checks.push((
        "header mismatch",
        matches!(read_csv(lines.join("\n").as_bytes(), None), Err(Error::Schema(_))),
    ));
    let narrower = FeatureWidths { head: 15, ..spec.widths };
    checks.push((
        "declared width mismatch",
        matches!(read_csv(text.as_bytes(), Some(narrower)), Err(Error::Schema(_))),
    ));

    let failed: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    outcome(
        failed.is_empty(),
        if failed.is_empty() {
            format!("{} format checks passed", checks.len())
        } else {
            format!("failed: {}", failed.join(", "))
        },
    )
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [Criterion; 8] = [
        ("gradient integrity", gradient_integrity),
        ("metric oracle equivalence", metric_oracle),
        ("masking contract", masking_contract),
        ("overfit capability", overfit),
        ("link prediction beats intimacy", link_prediction_beats_intimacy),
        ("pre-training helps", pretraining_helps),
        ("determinism", determinism),
        ("format round trips", format_round_trips),
    ];
    let mut failures = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if !filters.is_empty() && !filters.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(f).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        failures += !result.pass as usize;
        println!(
            "criterion {} {name}: {} ({}; {:.1}s)",
            i + 1,
            if result.pass { "PASS" } else { "FAIL" },
            result.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failures > 0 {
        std::process::exit(1);
    }
}
