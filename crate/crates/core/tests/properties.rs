use proptest::prelude::*;
use steerlab::dola::{
    contrast_distribution, dola_contrast, jsd, make_buckets, score_positions, select_premature, vhead, BucketRegime, DolaConfig,
    LayerBucket, PositionLogits, ScoringMode, VheadReference,
};
use steerlab::logitlens::apathy;
use steerlab::metrics::{mc1, mc2, mc3, quantile_pass_rate, recovery, EvalRecord, McItem, RecoveryOutcome};

fn normalize(w: Vec<f64>) -> Vec<f64> {
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

fn distribution(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, n).prop_map(normalize)
}

fn jsd_oracle(p: &[f64], q: &[f64]) -> f64 {
    let mut total = 0.0;
    for (a, b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        if *a > 0.0 {
            total += 0.5 * a * (a / m).ln();
        }
        if *b > 0.0 {
            total += 0.5 * b * (b / m).ln();
        }
    }
    total
}

proptest! {
    #[test]
    fn jsd_is_symmetric_and_bounded(p in distribution(6), q in distribution(6)) {
        let a = jsd(&p, &q).unwrap();
        let b = jsd(&q, &p).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!(a >= -1e-15 && a <= std::f64::consts::LN_2 + 1e-12);
        prop_assert!((a - jsd_oracle(&p, &q)).abs() < 1e-12);
        prop_assert!(jsd(&p, &p).unwrap().abs() < 1e-15);
    }

    #[test]
    fn uniform_premature_with_zero_alpha_returns_final(q in distribution(12)) {
        let uniform = vec![1.0 / 12.0; 12];
        let p = contrast_distribution(&dola_contrast(&q, &uniform, 0.0, VheadReference::Mature).unwrap());
        let err = p.iter().zip(&q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(err < 1e-6);
    }

    #[test]
    fn vhead_shrinks_as_alpha_grows(q_l in distribution(10), q_p in distribution(10), a1 in 0.0f64..1.0, a2 in 0.0f64..1.0) {
        let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
        for reference in [VheadReference::Mature, VheadReference::Premature] {
            let wide = vhead(&q_l, &q_p, lo, reference);
            let narrow = vhead(&q_l, &q_p, hi, reference);
            prop_assert!(narrow.iter().zip(&wide).all(|(n, w)| !n || *w));
        }
    }

    #[test]
    fn contrast_is_a_distribution(q_l in distribution(8), q_p in distribution(8), alpha in 0.0f64..0.99) {
        let p = contrast_distribution(&dola_contrast(&q_l, &q_p, alpha, VheadReference::Mature).unwrap());
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn apathy_vanishes_at_equal_norms(r in prop::collection::vec(-3.0f32..3.0, 16), dir in prop::collection::vec(-3.0f32..3.0, 16)) {
        let rn = r.iter().map(|v| v * v).sum::<f32>().sqrt();
        let dn = dir.iter().map(|v| v * v).sum::<f32>().sqrt();
        prop_assume!(rn > 1e-2 && dn > 1e-2);
        let h: Vec<f32> = dir.iter().map(|v| v * rn / dn).collect();
        prop_assert!(apathy(&r, &h).unwrap().abs() < 1e-5 * rn as f64);
    }

    #[test]
    fn mc_metrics_ignore_constant_shifts(
        correct in prop::collection::vec(-8.0f64..0.0, 1..4),
        incorrect in prop::collection::vec(-8.0f64..0.0, 1..4),
        shift in -50.0f64..50.0,
    ) {
        let build = |s: f64| {
            let mut scores: Vec<(f64, bool)> = correct.iter().map(|&v| (v + s, true)).collect();
            scores.extend(incorrect.iter().map(|&v| (v + s, false)));
            McItem::new(scores).unwrap()
        };
        let (a, b) = (build(0.0), build(shift));
        prop_assert_eq!(mc1(&a).unwrap(), mc1(&b).unwrap());
        prop_assert!((mc2(&a).unwrap() - mc2(&b).unwrap()).abs() < 1e-9);
        prop_assert_eq!(mc3(&a).unwrap(), mc3(&b).unwrap());
        let m2 = mc2(&a).unwrap();
        prop_assert!((0.0..=1.0).contains(&m2));
    }

    #[test]
    fn quantile_pass_rate_is_monotone(peaks in prop::collection::vec(0.0f64..1.5, 1..20)) {
        let rates = quantile_pass_rate(&peaks, &[0.5, 0.75, 0.9, 1.0]).unwrap();
        prop_assert!(rates.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn recovery_is_homogeneous(accs in prop::collection::vec(0.0f64..0.5, 2..6), scale in 0.5f64..2.0) {
        let records = |factor: f64| -> Vec<EvalRecord> {
            accs.iter()
                .enumerate()
                .map(|(l, &a)| EvalRecord {
                    model_id: "m".into(),
                    task: "t".into(),
                    method: "tv".into(),
                    layer: Some(l),
                    lambda: Some(1.0),
                    n_heads: None,
                    k_shot: 0,
                    accuracy: a * factor,
                    seed: 0,
                })
                .collect()
        };
        let (RecoveryOutcome::Summary(a), RecoveryOutcome::Summary(b)) =
            (recovery(&records(1.0), 0.5).unwrap(), recovery(&records(scale), 0.5 * scale).unwrap())
        else {
            panic!("baseline above floor");
        };
        prop_assert!(a.peak >= a.avg);
        prop_assert!((a.peak - b.peak).abs() < 1e-9 && (a.avg - b.avg).abs() < 1e-9);
    }
}

#[test]
fn select_premature_matches_exhaustive_argmax() {
    use rand::Rng;
    let mut rng = steerlab::seed::stream(7, "stacks");
    for _ in 0..1000 {
        let n_layers = rng.random_range(4..12);
        let vocab = rng.random_range(2..9);
        let mut draw = || normalize((0..vocab).map(|_| rng.random_range(0.0..1.0)).collect());
        let stack: Vec<Vec<f64>> = (0..n_layers).map(|_| draw()).collect();
        let q_final = draw();
        let layers: Vec<usize> = (0..n_layers - 1).filter(|_| rng.random_bool(0.6)).collect();
        if layers.is_empty() {
            continue;
        }
        let bucket = LayerBucket::new("b", layers.clone(), n_layers).unwrap();
        let mut best = layers[0];
        for &l in &layers {
            if jsd_oracle(&q_final, &stack[l]) > jsd_oracle(&q_final, &stack[best]) {
                best = l;
            }
        }
        assert_eq!(select_premature(&stack, &q_final, &bucket).unwrap(), best);
    }
}

fn evens(start: usize, end: usize) -> Vec<usize> {
    (start..end).step_by(2).collect()
}

#[test]
fn buckets_match_hand_enumeration() {
    let cases: [(usize, [(usize, usize); 4], [(usize, usize); 4]); 5] = [
        (8, [(0, 3), (2, 5), (4, 7), (0, 7)], [(0, 1), (2, 3), (4, 5), (6, 7)]),
        (16, [(0, 8), (4, 12), (8, 15), (0, 15)], [(0, 4), (4, 8), (8, 12), (12, 15)]),
        (32, [(0, 16), (8, 24), (16, 31), (0, 31)], [(0, 8), (8, 16), (16, 24), (24, 31)]),
        (48, [(0, 24), (12, 36), (24, 47), (0, 47)], [(0, 12), (12, 24), (24, 36), (36, 47)]),
        (80, [(0, 40), (20, 60), (40, 79), (0, 79)], [(0, 20), (20, 40), (40, 60), (60, 79)]),
    ];
    let small_names = ["0-50%", "25-75%", "50-100%", "0-100%"];
    let large_names = ["0-25%", "25-50%", "50-75%", "75-100%"];
    for (l, small, large) in cases {
        for (regime, names, spans) in [(BucketRegime::Small, small_names, small), (BucketRegime::Large, large_names, large)] {
            let buckets = make_buckets(l, regime).unwrap();
            for ((b, name), (s, e)) in buckets.iter().zip(names).zip(spans) {
                assert_eq!(b.name, name);
                assert_eq!(b.layers, evens(s, e), "L={l} {name}");
            }
        }
    }
    assert_eq!(make_buckets(32, BucketRegime::Small).unwrap()[0].layers, vec![0, 2, 4, 6, 8, 10, 12, 14]);
    assert_eq!(make_buckets(8, BucketRegime::Large).unwrap()[3].layers, vec![6]);
}

/// Every position has final logits (2, 0, 0) and a premature distribution (0.9, 0.05, 0.05).
fn length_bias_positions(n: usize) -> Vec<PositionLogits> {
    let premature: Vec<f32> = [0.9f32, 0.05, 0.05].iter().map(|p| p.ln()).collect();
    vec![
        PositionLogits {
            output: vec![2.0, 0.0, 0.0],
            layers: vec![premature, vec![0.0; 3], vec![0.0; 3], vec![0.0; 3]],
        };
        n
    ]
}

fn length_bias_scores(scoring: ScoringMode) -> (f64, f64) {
    let cfg = DolaConfig {
        bucket: LayerBucket::new("0", vec![0], 4).unwrap(),
        alpha: 0.0,
        vhead_reference: VheadReference::Mature,
        scoring,
    };
    let short = score_positions(&length_bias_positions(1), &[0], &cfg).unwrap();
    let long = score_positions(&length_bias_positions(3), &[1, 1, 1], &cfg).unwrap();
    (short, long)
}

#[test]
fn length_bias_fixture_reproduces_both_sides() {
    let (s, l) = length_bias_scores(ScoringMode::Baseline);
    assert!(s > l);
    let (s, l) = length_bias_scores(ScoringMode::PostSoftmax);
    assert!(s > l);
    let (s, l) = length_bias_scores(ScoringMode::RawContrast);
    assert!(l > s);
    let (s, l) = length_bias_scores(ScoringMode::BaselineShift { c: 20.0 });
    assert!(l > s);
    assert!((s - 22.0).abs() < 1e-9 && (l - 60.0).abs() < 1e-9);
}

proptest! {
    #[test]
    fn baseline_shift_gap_is_linear_in_c(c in -30.0f64..30.0) {
        let (s0, l0) = length_bias_scores(ScoringMode::BaselineShift { c: 0.0 });
        let (s, l) = length_bias_scores(ScoringMode::BaselineShift { c });
        prop_assert!(((l - s) - (l0 - s0) - 2.0 * c).abs() < 1e-9);
    }
}

mod task_invariants {
    use proptest::prelude::*;
    use steerlab::tasks::{build_prompt, split_train_test, synthetic_tasks, Template};

    proptest! {
        #[test]
        fn splits_are_disjoint_on_inputs(seed in any::<u64>(), frac in 0.1f64..0.9) {
            let task = &synthetic_tasks(&["t"], 30, 1).unwrap()[0];
            let (train, test) = split_train_test(task, frac, seed).unwrap();
            prop_assert_eq!(train.len() + test.len(), task.len());
            prop_assert!(train.pairs.iter().all(|p| test.pairs.iter().all(|q| q.x != p.x)));
        }

        #[test]
        fn answer_never_follows_the_query(seed in any::<u64>(), k in 0usize..10, qi in 0usize..30) {
            let task = &synthetic_tasks(&["t"], 30, 1).unwrap()[0];
            let query = &task.pairs[qi];
            let text = build_prompt(task, k, &query.x, Template::Arrow, seed).unwrap().render();
            let tail = &text[text.rfind(&query.x).unwrap()..];
            prop_assert!(!tail.contains(&query.y));
            prop_assert!(!text.contains(&query.y));
        }
    }
}

#[test]
fn zero_vector_steering_equals_baseline() {
    use steerlab::model::{ModelConfig, ModelWeights, Transformer};
    use steerlab::steering::{evaluate_steered, icl_accuracy};
    use steerlab::tasks::{eval_prompts, split_train_test, synthetic_tasks, vocab_for};
    let tasks = synthetic_tasks(&["a", "b"], 20, 2).unwrap();
    let vocab = vocab_for(&tasks);
    let config = ModelConfig::new(3, 2, 8, 32, vocab.len(), 24);
    let model = Transformer::new(config.clone(), ModelWeights::init(&config, 4).unwrap()).unwrap();
    let (train, test) = split_train_test(&tasks[0], 0.7, 0).unwrap();
    let prompts = eval_prompts(&train, &test, 3, 12, 0).unwrap();
    let base = icl_accuracy(&model, &vocab, &prompts).unwrap();
    for layer in 0..3 {
        for lambda in [0.5f32, 1.0, 4.0] {
            let acc = evaluate_steered(&model, &vocab, &prompts, &vec![0.0; config.hidden_dim], layer, lambda, 1.0).unwrap();
            assert_eq!(acc, base);
        }
    }
}
