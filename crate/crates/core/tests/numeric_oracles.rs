use keds_core::numeric::{AttnSegment, Graph, Tensor};
use keds_core::trainer::{AdamW, OptimizerState};
use keds_core::{rng, Error};
use proptest::prelude::*;

fn random(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    let mut r = rng::stream(seed, "numeric");
    Tensor::from_fn(rows, cols, |_, _| rng::normal(&mut r)).unwrap()
}

#[test]
fn matmul_matches_naive_triple_loop() {
    for (m, k, n) in [(1, 1, 1), (3, 5, 2), (17, 33, 9), (64, 64, 64), (70, 3, 129)] {
        let a = random(m, k, 1);
        let b = random(k, n, 2);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let c = g.matmul(va, vb).unwrap();
        let got = g.value(c);
        assert_eq!(got.shape(), &[m, n]);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|t| a.row(i)[t] * b.row(t)[j]).sum();
                assert!((got.row(i)[j] - want).abs() <= 1e-12 * (1.0 + want.abs()), "{m}x{k}x{n} at ({i},{j})");
            }
        }
    }
}

/// Softmax of rows with entries around ±700, where a naive `exp` overflows.
#[test]
fn softmax_is_stable_for_large_logits() {
    let rows = [vec![700.0, 699.0, -700.0, 0.0], vec![-745.0, -744.0, -746.0, -744.5], vec![1e-3, 0.0, -1e-3, 2e-3]];
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    let mut g = Graph::new();
    let x = g.constant(Tensor::matrix(3, 4, flat).unwrap());
    let s = g.softmax_rows(x);
    let l = g.log_softmax_rows(x);
    for (r, row) in rows.iter().enumerate() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        for (c, v) in row.iter().enumerate() {
            let want_log = v - max - z.ln();
            assert!((g.value(l).row(r)[c] - want_log).abs() < 1e-12);
            assert!((g.value(s).row(r)[c] - want_log.exp()).abs() < 1e-15);
        }
    }
}

fn attend_f32(keys: &[usize], k: &Tensor<f64>, v: &Tensor<f64>, q: &Tensor<f64>) -> Vec<f32> {
    let pick = |t: &Tensor<f64>| {
        let data = keys.iter().flat_map(|&i| t.row(i).iter().map(|&x| x as f32 * 6.0)).collect();
        Tensor::matrix(keys.len(), t.cols(), data).unwrap()
    };
    let mut g = Graph::<f32>::new();
    let qv = g.constant(Tensor::matrix(1, q.cols(), q.data().iter().map(|&x| x as f32 * 6.0).collect()).unwrap());
    let kv = g.constant(pick(k));
    let vv = g.constant(pick(v));
    let seg = AttnSegment {
        q_start: 0,
        q_len: 1,
        kv_start: 0,
        kv_len: keys.len(),
    };
    let out = g.attention(qv, kv, vv, 4, vec![seg]).unwrap();
    g.value(out).data().to_vec()
}

#[test]
fn single_precision_attention_ignores_key_order() {
    let (k, v, q) = (random(32, 16, 1), random(32, 16, 2), random(1, 16, 3));
    let ids: Vec<usize> = (0..32).collect();
    let base = attend_f32(&ids, &k, &v, &q);
    for shift in [1, 5, 11] {
        let perm: Vec<usize> = (0..32).map(|i| (i * 7 + shift) % 32).collect();
        assert_eq!(attend_f32(&perm, &k, &v, &q), base);
    }
}

#[test]
fn backward_runs_once() {
    let mut g = Graph::<f64>::new();
    let p = g.param(random(2, 2, 3));
    let s = g.sum(p);
    g.backward(s).unwrap();
    assert_eq!(g.grad(p).unwrap(), &[1.0; 4]);
    assert_eq!(g.backward(s), Err(Error::GraphConsumed));
}

#[test]
fn backward_needs_a_scalar() {
    let mut g = Graph::<f64>::new();
    let p = g.param(random(2, 3, 4));
    assert!(matches!(g.backward(p), Err(Error::Rank { .. })));
}

#[test]
fn normalize_rejects_zero_rows() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::matrix(2, 2, vec![3.0, 4.0, 0.0, 0.0]).unwrap());
    assert!(matches!(g.l2_normalize(x), Err(Error::DegenerateVector { .. })));
}

/// PyTorch `AdamW` written out by hand for three steps on two parameters, one
/// of which sits out the second step.
#[test]
fn adamw_matches_hand_computation() {
    let (lr, b1, b2, eps, wd) = (1e-2, 0.9, 0.999, 1e-8, 0.1);
    let opt = AdamW {
        beta1: b1,
        beta2: b2,
        eps,
        weight_decay: wd,
    };
    let mut p0 = Tensor::matrix(1, 3, vec![0.5, -1.0, 2.0]).unwrap();
    let mut p1 = Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap();
    let mut state = OptimizerState::new([&p0, &p1]).unwrap();
    let grads: [[Option<Vec<f64>>; 2]; 3] = [
        [Some(vec![0.1, -0.2, 0.3]), Some(vec![1.0, -1.0])],
        [Some(vec![-0.5, 0.0, 0.25]), None],
        [Some(vec![0.2, 0.2, -0.1]), Some(vec![0.5, 0.0])],
    ];

    let mut want = [vec![0.5, -1.0, 2.0], vec![1.0, 1.0]];
    let mut m = [vec![0.0; 3], vec![0.0; 2]];
    let mut v = [vec![0.0; 3], vec![0.0; 2]];
    for (t, gs) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        for i in 0..2 {
            let Some(g) = &gs[i] else { continue };
            for j in 0..g.len() {
                want[i][j] *= 1.0 - lr * wd;
                m[i][j] = b1 * m[i][j] + (1.0 - b1) * g[j];
                v[i][j] = b2 * v[i][j] + (1.0 - b2) * g[j] * g[j];
                let m_hat = m[i][j] / (1.0 - b1.powi(t));
                let v_hat = v[i][j] / (1.0 - b2.powi(t));
                want[i][j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        let refs: Vec<Option<&[f64]>> = gs.iter().map(|g| g.as_deref()).collect();
        opt.step(&mut [&mut p0, &mut p1], &refs, &mut state, lr).unwrap();
    }
    for (got, want) in [p0.data(), p1.data()].iter().zip(&want) {
        for (a, b) in got.iter().zip(want) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }
    assert_eq!(state.step, 3);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(
        vals in prop::collection::vec(-50.0f64..50.0, 12),
        shift in -100.0f64..100.0,
    ) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(3, 4, vals.clone()).unwrap());
        let y = g.constant(Tensor::matrix(3, 4, vals.iter().map(|v| v + shift).collect()).unwrap());
        let sx = g.softmax_rows(x);
        let sy = g.softmax_rows(y);
        for r in 0..3 {
            let total: f64 = g.value(sx).row(r).iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            for c in 0..4 {
                prop_assert!((g.value(sx).row(r)[c] - g.value(sy).row(r)[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn l2_normalize_gives_unit_rows(vals in prop::collection::vec(-10.0f64..10.0, 8)) {
        prop_assume!(vals[..4].iter().any(|v| v.abs() > 1e-3) && vals[4..].iter().any(|v| v.abs() > 1e-3));
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(2, 4, vals).unwrap());
        let n = g.l2_normalize(x).unwrap();
        for r in 0..2 {
            let norm: f64 = g.value(n).row(r).iter().map(|v| v * v).sum();
            prop_assert!((norm - 1.0).abs() < 1e-12);
        }
    }
}
