mod common;

use common::brute_force_cie_trial;
use steerlab::model::{ModelConfig, ModelWeights, Transformer};
use steerlab::steering::{build_fv, compute_cie, corrupted_prompt, mean_head_activations, rank_heads};
use steerlab::tasks::{synthetic_tasks, vocab_for};

const TRIALS: usize = 8;
const K: usize = 3;

#[test]
fn cie_equals_brute_force_loop() {
    let tasks = synthetic_tasks(&["alpha", "beta"], 12, 3).unwrap();
    let vocab = vocab_for(&tasks);
    let config = ModelConfig::new(2, 4, 4, 32, vocab.len(), 4 * K + 4);
    let model = Transformer::new(config.clone(), ModelWeights::init(&config, 11).unwrap()).unwrap();
    for task in &tasks {
        let means = mean_head_activations(&model, &vocab, task, 6, K, 5).unwrap();
        let table = compute_cie(&model, &vocab, task, &means, TRIALS, K, 9).unwrap();

        let mut sums = vec![vec![0.0f64; 4]; 2];
        for t in 0..TRIALS {
            let prompt = corrupted_prompt(task, K, t, 9).unwrap();
            let ids = prompt.spec.tokenize(&vocab).unwrap().ids;
            let answer = vocab.id(&prompt.answer).unwrap();
            for (row, deltas) in sums.iter_mut().zip(brute_force_cie_trial(&model, &ids, answer, &means.means)) {
                for (s, d) in row.iter_mut().zip(deltas) {
                    *s += d;
                }
            }
        }
        let expected: Vec<Vec<f64>> = sums
            .into_iter()
            .map(|row| row.into_iter().map(|s| s / TRIALS as f64).collect())
            .collect();
        assert_eq!(table.cie, expected, "task {}", task.name);
    }
}

#[test]
fn function_vector_sums_ranked_head_means() {
    let tasks = synthetic_tasks(&["alpha"], 12, 3).unwrap();
    let vocab = vocab_for(&tasks);
    let config = ModelConfig::new(2, 4, 4, 32, vocab.len(), 4 * K + 4);
    let model = Transformer::new(config.clone(), ModelWeights::init(&config, 11).unwrap()).unwrap();
    let means = mean_head_activations(&model, &vocab, &tasks[0], 6, K, 5).unwrap();
    let cie = compute_cie(&model, &vocab, &tasks[0], &means, 4, K, 9).unwrap();
    let ranked = rank_heads(&cie);
    for n in 1..=8 {
        let fv = build_fv(&cie, &means, n).unwrap();
        for o in 0..config.hidden_dim {
            let want: f64 = ranked[..n].iter().map(|&(l, j)| means.means[l][j][o] as f64).sum();
            assert!((fv.vector[o] as f64 - want).abs() < 1e-4);
        }
    }
    for w in ranked.windows(2) {
        assert!(cie.cie[w[0].0][w[0].1] >= cie.cie[w[1].0][w[1].1]);
    }
}
