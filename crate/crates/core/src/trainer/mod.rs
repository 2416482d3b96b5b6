//! Dual-stream training: an image-only contrastive stream and a semantic
//! registration stream on mined pseudo-triplets, optimized with AdamW under a
//! warmup-then-cosine schedule.

mod adamw;
mod run;

pub use adamw::{AdamW, OptimizerState};
pub use run::{Checkpoint, Keds, RngState, StepLog, TrainData, Trainer};

use alloc::format;

use serde::{Deserialize, Serialize};

use crate::bkp::{BkpConfig, Knockout};
use crate::numeric::{Graph, Real, Tensor, Var};
use crate::{rng, Error, Result};

/// How the two streams share optimizer steps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamSchedule {
    /// Both losses on every batch, summed with unit weights.
    #[default]
    Joint,
    /// Contrastive stream on even steps, registration stream on odd steps.
    Alternating,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub warmup_steps: u64,
    /// Total optimizer steps; `0` derives the count from `epochs`.
    pub steps: u64,
    pub epochs: u64,
    pub batch_size: usize,
    /// Logit multiplier of the contrastive loss.
    pub tau: f64,
    /// Weight of the complementary-caption term.
    pub beta: f64,
    /// Retrieved neighbours per image.
    pub top_k: usize,
    pub schedule: StreamSchedule,
    pub knockout: Knockout,
    /// Train the registration stream on the bare prompt instead of the
    /// caption template.
    pub prompt_only_templates: bool,
    pub bkp: BkpConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Full-scale settings.
    pub fn full_scale() -> Self {
        TrainConfig {
            lr: 5e-5,
            weight_decay: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            warmup_steps: 10_000,
            steps: 0,
            epochs: 30,
            batch_size: 512,
            tau: 100.0,
            beta: 1.0,
            top_k: 16,
            schedule: StreamSchedule::Joint,
            knockout: Knockout::default(),
            prompt_only_templates: false,
            bkp: BkpConfig::full(),
        }
    }

    /// CPU-sized settings for the synthetic corpus.
    pub fn desk() -> Self {
        TrainConfig {
            lr: 1e-3,
            warmup_steps: 200,
            steps: 2000,
            batch_size: 64,
            bkp: BkpConfig::default(),
            ..Self::full_scale()
        }
    }

    /// Optimizer steps for a corpus of `items` training pairs.
    pub fn total_steps(&self, items: usize) -> u64 {
        if self.steps > 0 {
            self.steps
        } else {
            let per_epoch = items.div_ceil(self.batch_size.max(1)) as u64;
            self.epochs * per_epoch
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if !(self.tau > 0.0) {
            return bad("tau must be positive");
        }
        if !(self.beta >= 0.0) {
            return bad("beta must be non-negative");
        }
        if self.top_k == 0 {
            return bad("top_k must be at least 1");
        }
        if self.warmup_steps == 0 {
            return bad("warmup_steps must be at least 1");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("lr and weight_decay must be non-negative");
        }
        if self.steps == 0 && self.epochs == 0 {
            return bad("either steps or epochs must be positive");
        }
        self.bkp.validate()
    }

    /// Stable hash of every field, stored in checkpoints.
    pub fn digest(&self) -> u64 {
        rng::fnv1a(format!("{self:?}").as_bytes())
    }
}

/// Linear warmup to `lr`, then cosine decay to zero at `total`.
pub fn lr_at_step(step: u64, lr: f64, warmup: u64, total: u64) -> Result<f64> {
    if step > total {
        return Err(Error::Schedule { step, total });
    }
    if step < warmup {
        return Ok(lr * step as f64 / warmup as f64);
    }
    if total <= warmup {
        return Ok(lr);
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(lr * 0.5 * (1.0 + num_traits::Float::cos(core::f64::consts::PI * progress)))
}

/// Symmetric cross-entropy over the `τ`-scaled cosine similarities of
/// matched rows. Rows are normalized here.
pub fn contrastive_loss<F: Real>(g: &mut Graph<F>, img: Var, txt: Var, tau: F) -> Result<Var> {
    let b = g.value(img).rows();
    if b < 2 {
        return Err(Error::Batch(b));
    }
    if g.shape(img) != g.shape(txt) {
        return Err(Error::dim("contrastive_loss", g.shape(img), g.shape(txt)));
    }
    let i = g.l2_normalize(img)?;
    let t = g.l2_normalize(txt)?;
    let tt = g.transpose(t)?;
    let sim = g.matmul(i, tt)?;
    let logits = g.scale(sim, tau);
    let diag: alloc::vec::Vec<usize> = (0..b).collect();
    let i2t = g.log_softmax_rows(logits);
    let i2t = g.pick(i2t, diag.clone())?;
    let i2t = g.mean(i2t);
    let lt = g.transpose(logits)?;
    let t2i = g.log_softmax_rows(lt);
    let t2i = g.pick(t2i, diag)?;
    let t2i = g.mean(t2i);
    let s = g.add(i2t, t2i)?;
    Ok(g.scale(s, -F::one()))
}

/// The two registration terms and their combination, each averaged over rows.
#[derive(Clone, Copy, Debug)]
pub struct RegistrationTerms {
    pub cos: Var,
    pub sup: Var,
    pub total: Var,
}

fn mean_cosine<F: Real>(g: &mut Graph<F>, a: Var, b: Var) -> Result<Var> {
    let bn = g.l2_normalize(b)?;
    let p = g.mul(a, bn)?;
    let c = g.row_sum(p);
    Ok(g.mean(c))
}

/// `L_cos = 1 − cos(v, t)`, `L_sup = 1 − ½(cos(v, t_s) + cos(v, t'_s))`,
/// `L_r = L_cos + β·L_sup`, each averaged over the batch rows.
pub fn registration_loss<F: Real>(
    g: &mut Graph<F>,
    composed: Var,
    target: Var,
    comp_a: Var,
    comp_b: Var,
    beta: F,
) -> Result<RegistrationTerms> {
    let shape = g.shape(composed).to_vec();
    for v in [target, comp_a, comp_b] {
        if g.shape(v) != shape.as_slice() {
            return Err(Error::dim("registration_loss", &shape, g.shape(v)));
        }
    }
    let v = g.l2_normalize(composed)?;
    let one = g.constant(Tensor::scalar(F::one()));
    let c = mean_cosine(g, v, target)?;
    let cos = g.sub(one, c)?;
    let ca = mean_cosine(g, v, comp_a)?;
    let cb = mean_cosine(g, v, comp_b)?;
    let both = g.add(ca, cb)?;
    let half = g.scale(both, F::of(0.5));
    let sup = g.sub(one, half)?;
    let weighted = g.scale(sup, beta);
    let total = g.add(cos, weighted)?;
    Ok(RegistrationTerms { cos, sup, total })
}
