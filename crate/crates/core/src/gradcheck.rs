//! Central finite-difference checks of every differentiable piece, in double
//! precision.
//!
//! Each case builds a scalar from random inputs, takes the analytic gradient
//! with [`Graph::backward`], and compares it with `(f(x+h) − f(x−h)) / 2h` on
//! every coordinate (or a random sample of coordinates for large tensors).
//! The reported error is `‖g_analytic − g_numeric‖ / max(‖g_analytic‖, ‖g_numeric‖)`.

use alloc::string::String;
use alloc::vec::Vec;
use alloc::{format, vec};

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;

use crate::bkp::{BkpConfig, BkpParams, KnowledgeContext, Knockout};
use crate::encoders::{ComposerConfig, FrozenComposer, TokenItem, TokenSequence};
use crate::numeric::{AttnSegment, Graph, Tensor, Var};
use crate::trainer::{contrastive_loss, registration_loss};
use crate::{rng, Result};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Coordinates probed per tensor when a tensor is larger than this.
pub const MAX_PROBES: usize = 24;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub seed: u64,
    pub rel_error: f64,
    pub coordinates: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.rel_error < TOLERANCE
    }
}

/// Names of the cases run by [`run_case`].
pub const CASES: [&str; 13] = [
    "matmul",
    "transpose_add_sub",
    "mul_add_row_scale",
    "softmax_rows",
    "log_softmax_rows",
    "l2_normalize",
    "layer_norm",
    "gelu",
    "row_ops",
    "attention",
    "composer",
    "bkp_project",
    "losses",
];

fn random(r: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(rows, cols, |_, _| scale * rng::normal::<f64, _>(r)).expect("positive dims")
}

/// `Σ out ⊙ W` with `W` fixed by `seed`, turning any output into a scalar.
fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut r = rng::stream(seed, "gradcheck.projection");
    let w = Tensor::new(g.shape(out).to_vec(), (0..g.value(out).len()).map(|_| rng::normal(&mut r)).collect())?;
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

fn leaves(g: &mut Graph<f64>, xs: &[Tensor<f64>]) -> Vec<Var> {
    xs.iter().map(|t| g.param(t.clone())).collect()
}

/// Compares analytic and numeric gradients of the scalar built by `eval`.
///
/// `eval` receives the input tensors, registers them in the graph however it
/// needs, and returns the scalar root plus the leaf of each input in order.
pub fn check<E>(name: &str, seed: u64, inputs: Vec<Tensor<f64>>, eval: E) -> Result<CheckResult>
where
    E: Fn(&mut Graph<f64>, &[Tensor<f64>]) -> Result<(Var, Vec<Var>)>,
{
    let mut g = Graph::new();
    let (root, vars) = eval(&mut g, &inputs)?;
    g.backward(root)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&inputs)
        .map(|(&v, t)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    drop(g);

    let value = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let (root, _) = eval(&mut g, xs)?;
        Ok(g.value(root).data()[0])
    };
    let mut r = rng::stream(seed, name);
    let mut xs = inputs.clone();
    let (mut diff, mut an, mut nn, mut coords) = (0.0, 0.0, 0.0, 0);
    for t in 0..xs.len() {
        let n = xs[t].len();
        let picks: Vec<usize> = if n <= MAX_PROBES {
            (0..n).collect()
        } else {
            sample(&mut r, n, MAX_PROBES).into_vec()
        };
        for j in picks {
            let x0 = xs[t].data()[j];
            xs[t].data_mut()[j] = x0 + STEP;
            let up = value(&xs)?;
            xs[t].data_mut()[j] = x0 - STEP;
            let down = value(&xs)?;
            xs[t].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic[t][j];
            diff += (a - numeric) * (a - numeric);
            an += a * a;
            nn += numeric * numeric;
            coords += 1;
        }
    }
    let denom = num_traits::Float::sqrt(an).max(num_traits::Float::sqrt(nn)).max(1e-12);
    Ok(CheckResult {
        name: name.into(),
        seed,
        rel_error: num_traits::Float::sqrt(diff) / denom,
        coordinates: coords,
    })
}

fn small_composer(seed: u64) -> Result<FrozenComposer<f64>> {
    let c = FrozenComposer::new(
        ComposerConfig {
            dim: 8,
            vocab_size: 32,
            max_len: 8,
            layers: 2,
            heads: 2,
        },
        seed,
    )?;
    Ok(c.cast())
}

/// Runs one named case for one seed.
pub fn run_case(name: &str, seed: u64) -> Result<Vec<CheckResult>> {
    let mut r = rng::stream(seed, name);
    let ps = rng::derive_seed(seed, "projection");
    let one = |res: Result<CheckResult>| res.map(|c| vec![c]);
    match name {
        "matmul" => {
            let xs = vec![random(&mut r, 3, 4, 1.0), random(&mut r, 4, 5, 1.0)];
            one(check(name, seed, xs, |g, xs| {
                let v = leaves(g, xs);
                let y = g.matmul(v[0], v[1])?;
                Ok((project(g, y, ps)?, v))
            }))
        }
        "transpose_add_sub" => {
            let xs = vec![random(&mut r, 3, 4, 1.0), random(&mut r, 4, 3, 1.0), random(&mut r, 3, 4, 1.0)];
            one(check(name, seed, xs, |g, xs| {
                let v = leaves(g, xs);
                let t = g.transpose(v[1])?;
                let a = g.add(v[0], t)?;
                let s = g.sub(a, v[2])?;
                let s = g.mul(s, s)?;
                Ok((project(g, s, ps)?, v))
            }))
        }
        "mul_add_row_scale" => {
            let xs = vec![random(&mut r, 3, 4, 1.0), random(&mut r, 3, 4, 1.0), random(&mut r, 1, 4, 1.0)];
            one(check(name, seed, xs, |g, xs| {
                let v = leaves(g, xs);
                let m = g.mul(v[0], v[1])?;
                let b = g.add_row(m, v[2])?;
                let s = g.scale(b, -1.7);
                let mean = g.mean(s);
                let p = project(g, s, ps)?;
                Ok((g.add(p, mean)?, v))
            }))
        }
        "softmax_rows" => {
            let xs = vec![random(&mut r, 3, 5, 2.0)];
            one(check(name, seed, xs, |g, xs| {
                let v = leaves(g, xs);
                let y = g.softmax_rows(v[0]);
                Ok((project(g, y, ps)?, v))
            }))
        }
        "log_softmax_rows" => {
            let xs = vec![random(&mut r, 3, 5, 2.0)];
            one(check(name, seed, xs, |g, xs| {
                let v = leaves(g, xs);
                let y = g.log_softmax_rows(v[0]);
                Ok((project(g, y, ps)?, v))
            }))
        }
        "l2_normalize" => {
            let xs = vec![random(&mut r, 3, 6, 1.0)];
            one(check(name, seed, xs, |g, xs| {
                let v = leaves(g, xs);
                let y = g.l2_normalize(v[0])?;
                Ok((project(g, y, ps)?, v))
            }))
        }
        "layer_norm" => {
            let xs = vec![random(&mut r, 3, 6, 1.0)];
            one(check(name, seed, xs, |g, xs| {
                let v = leaves(g, xs);
                let y = g.layer_norm(v[0]);
                Ok((project(g, y, ps)?, v))
            }))
        }
        "gelu" => {
            let xs = vec![random(&mut r, 3, 6, 2.0)];
            one(check(name, seed, xs, |g, xs| {
                let v = leaves(g, xs);
                let y = g.gelu(v[0]);
                Ok((project(g, y, ps)?, v))
            }))
        }
        "row_ops" => {
            let xs = vec![random(&mut r, 4, 3, 1.0), random(&mut r, 2, 3, 1.0)];
            one(check(name, seed, xs, |g, xs| {
                let v = leaves(g, xs);
                let c = g.concat_rows(&[v[0], v[1]])?;
                let gathered = g.gather_rows(c, vec![5, 0, 0, 3, 2])?;
                let scattered = g.scatter_rows(gathered, 7, vec![(6, 0), (1, 1), (3, 4)])?;
                let seg = g.segment_mean(scattered, vec![3, 1, 3])?;
                let rs = g.row_sum(seg);
                let picked = g.pick(c, vec![0, 2, 1, 1, 0, 2])?;
                let a = project(g, rs, ps)?;
                let b = project(g, picked, ps ^ 1)?;
                Ok((g.add(a, b)?, v))
            }))
        }
        "attention" => {
            let xs = vec![random(&mut r, 4, 8, 1.0), random(&mut r, 6, 8, 1.0), random(&mut r, 6, 8, 1.0)];
            one(check(name, seed, xs, |g, xs| {
                let v = leaves(g, xs);
                let segments = vec![
                    AttnSegment { q_start: 0, q_len: 1, kv_start: 0, kv_len: 4 },
                    AttnSegment { q_start: 1, q_len: 3, kv_start: 2, kv_len: 4 },
                ];
                let y = g.attention(v[0], v[1], v[2], 2, segments)?;
                Ok((project(g, y, ps)?, v))
            }))
        }
        "composer" => {
            let composer = small_composer(seed)?;
            let seq = TokenSequence::new(vec![
                TokenItem::Token(1),
                TokenItem::Slot(0),
                TokenItem::Slot(1),
                TokenItem::Slot(2),
                TokenItem::Token(4),
            ]);
            let xs = vec![random(&mut r, 3, 8, 1.0)];
            one(check(name, seed, xs, |g, xs| {
                let v = leaves(g, xs);
                let cv = composer.bind(g);
                let y = composer.compose(g, &cv, &[&seq], Some(v[0]), 3)?;
                Ok((project(g, y, ps)?, v))
            }))
        }
        "bkp_project" => {
            let config = BkpConfig { dim: 8, layers: 2, heads: 2 };
            let params = BkpParams::<f32>::init(config, seed)?.cast::<f64>();
            let ctx = KnowledgeContext::new(random(&mut r, 4, 8, 1.0), random(&mut r, 4, 8, 1.0), vec![0, 1, 2, 3])?;
            let mut xs = vec![random(&mut r, 1, 8, 1.0)];
            xs.extend(params.named_tensors().into_iter().map(|(_, t)| t.clone()));
            one(check(name, seed, xs, |g, xs| {
                let mut p = params.clone();
                for (dst, src) in p.tensors_mut().into_iter().zip(&xs[1..]) {
                    *dst = src.clone();
                }
                let x = g.param(xs[0].clone());
                let vars = p.bind(g, true);
                let y = p.project_batch(g, &vars, x, &[&ctx], Knockout::default())?;
                let mut all = vec![x];
                all.extend(vars.params());
                Ok((project(g, y, ps)?, all))
            }))
        }
        "losses" => {
            let xs = vec![random(&mut r, 4, 6, 1.0), random(&mut r, 4, 6, 1.0)];
            let c = check("contrastive_loss", seed, xs, |g, xs| {
                let v = leaves(g, xs);
                Ok((contrastive_loss(g, v[0], v[1], 100.0)?, v))
            })?;
            let xs = (0..4).map(|_| random(&mut r, 3, 6, 1.0)).collect();
            let reg = check("registration_loss", seed, xs, |g, xs| {
                let v = leaves(g, xs);
                Ok((registration_loss(g, v[0], v[1], v[2], v[3], 0.7)?.total, v))
            })?;
            Ok(vec![c, reg])
        }
        _ => Err(crate::Error::Config(format!("unknown gradient check {name:?}"))),
    }
}

/// Every case for seeds `0..seeds`.
pub fn run_suite(seeds: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for name in CASES {
        for seed in 0..seeds {
            out.extend(run_case(name, seed)?);
        }
    }
    Ok(out)
}
