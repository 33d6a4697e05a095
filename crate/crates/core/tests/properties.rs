use edgeformer::autodiff::Graph;
use edgeformer::baselines::{distmult_score, transe_score, TripleEmbedding};
use edgeformer::data::{generate_dataset, read_csv, split_dataset, write_csv, DatasetSpec, EdgeRecord, FeatureStats, FeatureWidths};
use edgeformer::eval::{compute_metrics, rank_group, Candidate};
use edgeformer::gradcheck::{grad_check, model_grad_check};
use edgeformer::model::transformer::{classifier_loss, init_classifier};
use edgeformer::model::{EdgeInputs, ModelConfig};
use edgeformer::params::{Bound, Gradients, ParamStore};
use edgeformer::tensor::Tensor;
use edgeformer::training::{adamw_step, AdamW, OptimState};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn vec_f64(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0..3.0f64, n)
}

fn triple(d: usize) -> impl Strategy<Value = TripleEmbedding> {
    (vec_f64(d), vec_f64(d), vec_f64(d)).prop_map(|(head, edge, tail)| TripleEmbedding { head, edge, tail })
}

fn groups() -> impl Strategy<Value = Vec<Vec<(i32, bool)>>> {
    prop::collection::vec(prop::collection::vec((-5..5i32, any::<bool>()), 1..12), 1..6)
}

fn candidates(groups: &[Vec<(i32, bool)>], f: impl Fn(f64) -> f64) -> Vec<Vec<Candidate>> {
    groups
        .iter()
        .map(|g| {
            g.iter()
                .enumerate()
                .map(|(i, &(s, positive))| Candidate {
                    tail_id: (7 * i as u64) % 13 + 100 * i as u64,
                    score: f(s as f64),
                    positive,
                })
                .collect()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn distmult_is_symmetric(e in (1..8usize).prop_flat_map(triple)) {
        let swapped = TripleEmbedding { head: e.tail.clone(), edge: e.edge.clone(), tail: e.head.clone() };
        let (a, b) = (distmult_score(&e), distmult_score(&swapped));
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{} vs {}", a, b);
    }

    #[test]
    fn transe_is_non_positive(e in (1..8usize).prop_flat_map(triple)) {
        prop_assert!(transe_score(&e) <= 0.0);
    }

    #[test]
    fn hits_monotone_and_mrr_bounded(g in groups()) {
        let c = candidates(&g, |s| s);
        if let Ok(r) = compute_metrics(&c, 0, "p") {
            prop_assert!(r.hits1 <= r.hits3 && r.hits3 <= r.hits5 && r.hits5 <= r.hits10);
            let max_size = c.iter().map(Vec::len).max().unwrap() as f64;
            prop_assert!(r.mrr <= 1.0 && r.mrr >= 1.0 / max_size);
            prop_assert!(r.mr >= 1.0);
            prop_assert!(r.mrr <= r.hits1 + (1.0 - r.hits1) / 2.0 + 1e-15);
            prop_assert!(r.top5_back <= r.top10_back);
        }
    }

    #[test]
    fn metrics_invariant_under_monotone_maps(g in groups()) {
        let base = compute_metrics(&candidates(&g, |s| s), 0, "p");
        let cubed = compute_metrics(&candidates(&g, |s| s * s * s + 2.0 * s - 1.0), 0, "p");
        match (base, cubed) {
            (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "eligibility changed"),
        }
    }

    #[test]
    fn ranks_follow_the_candidates(scores in prop::collection::vec(-4..4i32, 1..15), seed in any::<u64>()) {
        let pairs: Vec<(u64, f64)> = scores.iter().enumerate().map(|(i, &s)| (i as u64, s as f64)).collect();
        let ranks = rank_group(&pairs).unwrap();
        let mut shuffled: Vec<usize> = (0..pairs.len()).collect();
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(seed));
        let permuted: Vec<(u64, f64)> = shuffled.iter().map(|&i| pairs[i]).collect();
        let again = rank_group(&permuted).unwrap();
        for (j, &i) in shuffled.iter().enumerate() {
            prop_assert_eq!(again[j], ranks[i]);
        }
        let mut sorted = ranks.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (1..=pairs.len()).collect::<Vec<_>>());
    }

    #[test]
    fn optimizer_state_mirrors_params(shapes in prop::collection::vec(prop::collection::vec(1..4usize, 1..3), 1..5), steps in 1..4u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(steps);
        let mut params: ParamStore = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| (format!("p{i}.weight"), Tensor::randn(s, 1.0, &mut rng)))
            .collect();
        let mut state = OptimState::new(&params);
        for _ in 0..steps {
            let grads: Gradients = params.iter().map(|(n, t)| (n.clone(), Tensor::randn(t.shape(), 1.0, &mut rng))).collect();
            adamw_step(&mut params, &grads, &mut state, &AdamW::default()).unwrap();
        }
        prop_assert_eq!(state.t, steps);
        for (n, t) in params.iter() {
            prop_assert_eq!(state.m[n].shape(), t.shape());
            prop_assert_eq!(state.v[n].shape(), t.shape());
        }
        prop_assert_eq!(state.m.len(), params.len());
    }

    #[test]
    fn dataset_round_trips(seed in any::<u64>(), heads in 2..12usize, unl in 0.0..1.0f64, latent in 0..3usize) {
        let spec = DatasetSpec {
            n_heads: heads,
            candidates_min: 1,
            candidates_max: 6,
            widths: FeatureWidths { head: 3, edge: 2, tail: 4 },
            unlabeled_fraction: unl,
            latent_dim: latent,
            seed,
            ..DatasetSpec::default()
        };
        let data = generate_dataset(&spec).unwrap();
        prop_assert_eq!(data.labeled().len() + data.unlabeled().len(), data.len());
        let mut buf = Vec::new();
        write_csv(&data, &mut buf).unwrap();
        prop_assert_eq!(read_csv(buf.as_slice(), Some(spec.widths)).unwrap(), data.clone());

        let (train, val) = split_dataset(&data, 0.7, seed).unwrap();
        prop_assert!(train.head_ids().is_disjoint(&val.head_ids()));
        prop_assert_eq!(train.len() + val.len(), data.len());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn model_gradients_match_finite_differences(
        d_half in 1..3usize,
        heads in 1..3usize,
        layers in 1..3usize,
        widths in (1..4usize, 1..3usize, 1..4usize),
        batch in 1..4usize,
        seed in any::<u64>(),
    ) {
        let cfg = ModelConfig {
            d_model: 2 * d_half * heads,
            n_heads: heads,
            n_encoder_layers: layers,
            n_decoder_layers: 1,
            ffn_dim: 3,
            dim_head_features: widths.0,
            dim_edge_features: widths.1,
            dim_tail_features: widths.2,
            ..ModelConfig::default()
        };
        let r = model_grad_check(&cfg, batch, seed, 1e-5).unwrap();
        prop_assert!(r.classifier < 1e-5 && r.mae < 1e-5, "{:?}", r);
    }

    #[test]
    fn layer_norm_and_attention_gradients(rows in 1..4usize, seq in 1..4usize, heads in 1..3usize, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 2 * heads;
        let n = rows * seq;
        let mut p = ParamStore::new();
        for name in ["q", "k", "v"] {
            p.insert(name, Tensor::randn(&[n, d], 1.0, &mut rng));
        }
        p.insert("gamma", Tensor::randn(&[d], 1.0, &mut rng));
        p.insert("beta", Tensor::randn(&[d], 1.0, &mut rng));
        let target = Tensor::randn(&[n, d], 1.0, &mut rng);
        let f = |p: &ParamStore| {
            let mut g = Graph::new();
            let b = Bound::new(&mut g, p)?;
            let a = g.attention(b.var("q")?, b.var("k")?, b.var("v")?, seq, heads)?;
            let y = g.layer_norm(a, b.var("gamma")?, b.var("beta")?, 1e-5)?;
            let loss = g.mse_masked(y, &target, &vec![true; n])?;
            g.backward(loss)?;
            Ok((g.value(loss).item(), b.gradients(&mut g)))
        };
        let r = grad_check(f, &p, 1e-5).unwrap();
        prop_assert!(r.max_rel_error < 1e-6, "{:?}", r);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn one_small_step_decreases_loss(seed in any::<u64>()) {
        let w = FeatureWidths { head: 3, edge: 2, tail: 3 };
        let cfg = ModelConfig { d_model: 8, n_heads: 2, n_encoder_layers: 1, ffn_dim: 16, ..ModelConfig::for_widths(w) };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = init_classifier(&cfg, &mut rng).unwrap();
        let edges: Vec<EdgeRecord> = (0..6)
            .map(|i| EdgeRecord {
                edge_id: i,
                head_id: 0,
                tail_id: i,
                label: edgeformer::data::Label::Negative,
                x_head: Tensor::randn(&[3], 1.0, &mut rng).into_data(),
                x_edge: Tensor::randn(&[2], 1.0, &mut rng).into_data(),
                x_tail: Tensor::randn(&[3], 1.0, &mut rng).into_data(),
            })
            .collect();
        let refs: Vec<&EdgeRecord> = edges.iter().collect();
        let inputs = EdgeInputs::new(&refs, &FeatureStats::identity(w)).unwrap();
        let labels = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        let (before, grads) = classifier_loss(&params, &cfg, &inputs, &labels, None).unwrap();
        let opt = AdamW { learning_rate: 1e-5, ..AdamW::default() };
        let mut state = OptimState::new(&params);
        adamw_step(&mut params, &grads, &mut state, &opt).unwrap();
        let (after, _) = classifier_loss(&params, &cfg, &inputs, &labels, None).unwrap();
        prop_assert!(after < before, "{} -> {}", before, after);
    }
}
