use std::sync::Arc;

use keds_core::encoders::make_prompt;
use keds_core::evalkit::{evaluate_queries, rank_candidates, recall_at_k, EvalTask, RecallRow};
use keds_core::rng;
use keds_core::store::EmbeddingMatrix;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn unit_rows(n: usize, dim: usize, seed: u64) -> Arc<EmbeddingMatrix> {
    let mut r = rng::stream(seed, "eval");
    let vals: Vec<f32> = (0..n * dim).map(|_| rng::normal(&mut r)).collect();
    Arc::new(EmbeddingMatrix::normalized_from(dim, vals).unwrap())
}

fn task(reference: usize, candidates: Vec<usize>, target: usize) -> EvalTask {
    EvalTask {
        reference_id: reference,
        instruction: make_prompt(3),
        candidate_ids: candidates,
        target_ids: vec![target],
    }
}

/// Random queries against 100 candidates with one target each: every
/// target lands in the top ten with probability 1/10.
#[test]
fn random_queries_recall_at_ten_is_a_tenth() {
    let n_tasks = 4000;
    let images = unit_rows(100, 16, 1);
    let queries: Vec<Vec<f32>> = unit_rows(n_tasks, 16, 2).rows().map(<[f32]>::to_vec).collect();
    let mut r = rng::stream(3, "targets");
    let tasks: Vec<EvalTask> = (0..n_tasks)
        .map(|_| task(0, (0..100).collect(), r.random_range(0..100)))
        .collect();
    let row = evaluate_queries(&queries, &tasks, &images).unwrap();
    // Four standard deviations of a Bernoulli(0.1) mean over 4000 tasks.
    let sd = (0.1f64 * 0.9 / n_tasks as f64).sqrt();
    assert!((row.r10 - 0.1).abs() < 4.0 * sd, "R10 {}", row.r10);
    assert!((row.r1 - 0.01).abs() < 4.0 * (0.01f64 * 0.99 / n_tasks as f64).sqrt(), "R1 {}", row.r1);
    assert!(row.r50 >= row.r10);
}

#[test]
fn recall_counts_any_target_hit() {
    let rankings = vec![vec![4, 2, 9], vec![1, 0, 3]];
    let mut t = vec![task(0, vec![0, 1, 2, 3, 4, 9], 9), task(0, vec![0, 1, 3], 5)];
    t[1].target_ids = vec![5, 3];
    assert_eq!(recall_at_k(&rankings, &t, 1), 0.0);
    assert_eq!(recall_at_k(&rankings, &t, 2), 0.0);
    assert_eq!(recall_at_k(&rankings, &t, 3), 1.0);
    let row = RecallRow::from_rankings(&rankings, &t);
    assert_eq!(row.n_tasks, 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ranking_matches_sorted_scores(n in 1usize..60, seed in any::<u64>()) {
        let images = unit_rows(80, 6, seed);
        let q = unit_rows(1, 6, seed ^ 9);
        let mut candidates: Vec<usize> = (0..80).collect();
        candidates.shuffle(&mut rng::stream(seed, "cands"));
        candidates.truncate(n);
        let got = rank_candidates(q.row(0).unwrap(), &candidates, &images).unwrap();
        let mut want: Vec<(f64, usize)> = candidates
            .iter()
            .map(|&c| (images.row(c).unwrap().iter().zip(q.row(0).unwrap()).map(|(a, b)| (*a as f64) * (*b as f64)).sum(), c))
            .collect();
        want.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        prop_assert_eq!(got.len(), n);
        for (g, (score, w)) in got.iter().zip(&want) {
            if g != w {
                let sg: f64 = images.row(*g).unwrap().iter().zip(q.row(0).unwrap()).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
                prop_assert!((sg - score).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn recall_is_monotone_in_k(seed in any::<u64>()) {
        let images = unit_rows(30, 4, seed);
        let queries: Vec<Vec<f32>> = unit_rows(20, 4, seed ^ 5).rows().map(<[f32]>::to_vec).collect();
        let mut r = rng::stream(seed, "t");
        let tasks: Vec<EvalTask> = (0..20).map(|_| task(0, (0..30).collect(), r.random_range(0..30))).collect();
        let row = evaluate_queries(&queries, &tasks, &images).unwrap();
        prop_assert!(row.r1 <= row.r5 && row.r5 <= row.r10 && row.r10 <= row.r50);
        prop_assert_eq!(row.r50, 1.0);
    }
}
