use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{contrastive_loss, lr_at_step, registration_loss, AdamW, OptimizerState, StreamSchedule, TrainConfig};
use crate::bkp::{BkpParams, BkpVars, KnowledgeContext};
use crate::encoders::{make_prompt, FrozenComposer, TokenSequence, PSEUDO_ROWS};
use crate::mining::PseudoTriplet;
use crate::numeric::{Graph, Tensor, Var};
use crate::store::{EmbeddingMatrix, KnowledgeBank};
use crate::{rng, Error, Result};

/// The trained model: the frozen composer and both projection networks.
#[derive(Clone, Debug, PartialEq)]
pub struct Keds {
    pub composer: Arc<FrozenComposer>,
    /// Contrastive-stream projection.
    pub phi_m: BkpParams,
    /// Registration-stream projection.
    pub phi_a: BkpParams,
}

/// Training pairs, mined triplets and the knowledge bank, with every
/// training image's neighbours retrieved once up front. The bank is
/// immutable, so this is the same as retrieving per step.
#[derive(Clone, Debug)]
pub struct TrainData {
    images: Arc<EmbeddingMatrix>,
    captions: Arc<EmbeddingMatrix>,
    triplets: Vec<PseudoTriplet>,
    bank: KnowledgeBank,
    neighbours: Vec<Vec<usize>>,
}

impl TrainData {
    pub fn new(
        images: Arc<EmbeddingMatrix>,
        captions: Arc<EmbeddingMatrix>,
        triplets: Vec<PseudoTriplet>,
        bank: KnowledgeBank,
        top_k: usize,
    ) -> Result<Self> {
        if triplets.is_empty() {
            return Err(Error::Mining("no training triplets".into()));
        }
        if images.dim() != bank.dim() || captions.dim() != bank.dim() {
            return Err(Error::dim("train data", &[images.dim(), captions.dim()], &[bank.dim()]));
        }
        for t in &triplets {
            t.validate()?;
            if t.image_id >= images.count() {
                return Err(Error::Lookup { what: "training image", id: t.image_id });
            }
            for id in [t.target, t.complements[0], t.complements[1]] {
                if id >= captions.count() {
                    return Err(Error::Lookup { what: "training caption", id });
                }
            }
        }
        let neighbours = images
            .rows()
            .map(|row| bank.retrieve(row, top_k))
            .collect::<Result<Vec<_>>>()?;
        if neighbours.iter().any(Vec::is_empty) {
            return Err(Error::EmptyContext);
        }
        Ok(TrainData {
            images,
            captions,
            triplets,
            bank,
            neighbours,
        })
    }

    pub fn triplets(&self) -> &[PseudoTriplet] {
        &self.triplets
    }

    pub fn images(&self) -> &Arc<EmbeddingMatrix> {
        &self.images
    }

    pub fn bank(&self) -> &KnowledgeBank {
        &self.bank
    }

    pub fn neighbours(&self, image_id: usize) -> &[usize] {
        &self.neighbours[image_id]
    }

    pub fn context(&self, image_id: usize) -> Result<KnowledgeContext> {
        self.bank.context_from_ids(&self.neighbours[image_id])
    }

    fn rows(&self, m: &EmbeddingMatrix, ids: impl Iterator<Item = usize>) -> Result<Tensor<f32>> {
        let mut data = Vec::new();
        let mut n = 0;
        for id in ids {
            data.extend_from_slice(m.row(id).ok_or(Error::Lookup { what: "feature row", id })?);
            n += 1;
        }
        Tensor::matrix(n, m.dim(), data)
    }
}

/// Resumable position of a ChaCha stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    fn capture(r: &ChaCha8Rng) -> Self {
        RngState {
            seed: r.get_seed(),
            stream: r.get_stream(),
            word_pos: r.get_word_pos(),
        }
    }

    fn restore(&self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::from_seed(self.seed);
        r.set_stream(self.stream);
        r.set_word_pos(self.word_pos);
        r
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Steps completed.
    pub step: u64,
    pub total_steps: u64,
    pub phi_m: BkpParams,
    pub phi_a: BkpParams,
    pub opt_m: OptimizerState,
    pub opt_a: OptimizerState,
    pub rng: RngState,
}

/// One line of the training log. A loss is `None` on steps where its stream
/// was idle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    #[serde(rename = "L_c")]
    pub l_c: Option<f32>,
    #[serde(rename = "L_r")]
    pub l_r: Option<f32>,
}

struct Forward {
    m: Option<(BkpVars, Var)>,
    a: Option<(BkpVars, Var)>,
}

pub struct Trainer {
    config: TrainConfig,
    model: Keds,
    optimizer: AdamW,
    opt_m: OptimizerState,
    opt_a: OptimizerState,
    rng: ChaCha8Rng,
    step: u64,
    total: u64,
}

impl Trainer {
    /// Fresh projections seeded from `seed`; `total_steps` fixes the schedule.
    pub fn new(config: TrainConfig, composer: Arc<FrozenComposer>, seed: u64, total_steps: u64) -> Result<Self> {
        config.validate()?;
        if config.bkp.dim != composer.dim() {
            return Err(Error::Config(format!(
                "projection width {} differs from composer width {}",
                config.bkp.dim,
                composer.dim()
            )));
        }
        let phi_m = BkpParams::init(config.bkp, rng::derive_seed(seed, "phi_m"))?;
        let phi_a = BkpParams::init(config.bkp, rng::derive_seed(seed, "phi_a"))?;
        let opt_m = OptimizerState::new(phi_m.named_tensors().into_iter().map(|(_, t)| t))?;
        let opt_a = OptimizerState::new(phi_a.named_tensors().into_iter().map(|(_, t)| t))?;
        Ok(Trainer {
            optimizer: optimizer(&config),
            config,
            model: Keds { composer, phi_m, phi_a },
            opt_m,
            opt_a,
            rng: rng::stream(seed, "trainer.batches"),
            step: 0,
            total: total_steps,
        })
    }

    pub fn resume(checkpoint: Checkpoint, composer: Arc<FrozenComposer>) -> Result<Self> {
        checkpoint.config.validate()?;
        if checkpoint.step > checkpoint.total_steps {
            return Err(Error::Schedule {
                step: checkpoint.step,
                total: checkpoint.total_steps,
            });
        }
        Ok(Trainer {
            optimizer: optimizer(&checkpoint.config),
            rng: checkpoint.rng.restore(),
            model: Keds {
                composer,
                phi_m: checkpoint.phi_m,
                phi_a: checkpoint.phi_a,
            },
            config: checkpoint.config,
            opt_m: checkpoint.opt_m,
            opt_a: checkpoint.opt_a,
            step: checkpoint.step,
            total: checkpoint.total_steps,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            total_steps: self.total,
            phi_m: self.model.phi_m.clone(),
            phi_a: self.model.phi_a.clone(),
            opt_m: self.opt_m.clone(),
            opt_a: self.opt_a.clone(),
            rng: RngState::capture(&self.rng),
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Keds {
        &self.model
    }

    pub fn into_model(self) -> Keds {
        self.model
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn total_steps(&self) -> u64 {
        self.total
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.total
    }

    fn active(&self, step: u64) -> (bool, bool) {
        match self.config.schedule {
            StreamSchedule::Joint => (true, true),
            StreamSchedule::Alternating => (step % 2 == 0, step % 2 == 1),
        }
    }

    fn forward(&self, g: &mut Graph, data: &TrainData, batch: &[usize], m: bool, a: bool) -> Result<Forward> {
        let triplets: Vec<&PseudoTriplet> = batch.iter().map(|&i| &data.triplets[i]).collect();
        let composer = &self.model.composer;
        let cv = composer.bind(g);
        let imgs = data.rows(&data.images, triplets.iter().map(|t| t.image_id))?;
        let imgs = g.constant(imgs);
        let contexts = triplets
            .iter()
            .map(|t| data.context(t.image_id))
            .collect::<Result<Vec<_>>>()?;
        let ctx_refs: Vec<&KnowledgeContext> = contexts.iter().collect();
        let knockout = self.config.knockout;
        let prompt = make_prompt(PSEUDO_ROWS);
        let mut out = Forward { m: None, a: None };
        if m {
            let vars = self.model.phi_m.bind(g, true);
            let v = self.model.phi_m.project_batch(g, &vars, imgs, &ctx_refs, knockout)?;
            let seqs = vec![&prompt; batch.len()];
            let feat = composer.compose(g, &cv, &seqs, Some(v), PSEUDO_ROWS)?;
            let loss = contrastive_loss(g, imgs, feat, self.config.tau as f32)?;
            out.m = Some((vars, loss));
        }
        if a {
            let vars = self.model.phi_a.bind(g, true);
            let v = self.model.phi_a.project_batch(g, &vars, imgs, &ctx_refs, knockout)?;
            let seqs: Vec<&TokenSequence> = if self.config.prompt_only_templates {
                vec![&prompt; batch.len()]
            } else {
                triplets.iter().map(|t| &t.template).collect()
            };
            let feat = composer.compose(g, &cv, &seqs, Some(v), PSEUDO_ROWS)?;
            let caps = &data.captions;
            let t = g.constant(data.rows(caps, triplets.iter().map(|t| t.target))?);
            let s = g.constant(data.rows(caps, triplets.iter().map(|t| t.complements[0]))?);
            let s2 = g.constant(data.rows(caps, triplets.iter().map(|t| t.complements[1]))?);
            let terms = registration_loss(g, feat, t, s, s2, self.config.beta as f32)?;
            out.a = Some((vars, terms.total));
        }
        Ok(out)
    }

    /// Both losses on a fixed batch of triplet indices, without updating.
    pub fn losses(&self, data: &TrainData, batch: &[usize]) -> Result<(f32, f32)> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, data, batch, true, true)?;
        let value = |v: Option<(BkpVars, Var)>| v.map(|(_, l)| g.value(l).data()[0]).unwrap_or(0.0);
        Ok((value(f.m), value(f.a)))
    }

    /// Samples a batch, runs both active streams and applies one AdamW update.
    pub fn train_step(&mut self, data: &TrainData) -> Result<StepLog> {
        if self.step >= self.total {
            return Err(Error::Schedule {
                step: self.step + 1,
                total: self.total,
            });
        }
        let lr = lr_at_step(self.step, self.config.lr, self.config.warmup_steps, self.total)?;
        let n = data.triplets.len();
        let batch: Vec<usize> = (0..self.config.batch_size).map(|_| self.rng.random_range(0..n)).collect();
        let (am, aa) = self.active(self.step);
        let mut g = Graph::new();
        let f = self.forward(&mut g, data, &batch, am, aa)?;
        let root = match (&f.m, &f.a) {
            (Some((_, lm)), Some((_, la))) => g.add(*lm, *la)?,
            (Some((_, l)), None) | (None, Some((_, l))) => *l,
            (None, None) => unreachable!("every schedule activates a stream"),
        };
        g.backward(root)?;
        let loss = |v: &Option<(BkpVars, Var)>| v.as_ref().map(|(_, l)| g.value(*l).data()[0]);
        let log = StepLog {
            step: self.step,
            lr,
            l_c: loss(&f.m),
            l_r: loss(&f.a),
        };
        if let Some((vars, _)) = &f.m {
            update(&self.optimizer, &mut self.model.phi_m, &mut self.opt_m, &g, vars, lr)?;
        }
        if let Some((vars, _)) = &f.a {
            update(&self.optimizer, &mut self.model.phi_a, &mut self.opt_a, &g, vars, lr)?;
        }
        self.step += 1;
        Ok(log)
    }

    /// Trains until the schedule ends, reporting each step.
    pub fn run(&mut self, data: &TrainData, mut on_step: impl FnMut(&StepLog)) -> Result<()> {
        while !self.is_finished() {
            let log = self.train_step(data)?;
            on_step(&log);
        }
        Ok(())
    }

    /// Gradient of the joint loss with respect to every parameter tensor of
    /// both projections, on a fixed batch.
    pub fn gradients(&self, data: &TrainData, batch: &[usize]) -> Result<(Vec<Option<Vec<f32>>>, Vec<Option<Vec<f32>>>)> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, data, batch, true, true)?;
        let (Some((vm, lm)), Some((va, la))) = (f.m, f.a) else {
            unreachable!("both streams requested")
        };
        let root = g.add(lm, la)?;
        g.backward(root)?;
        let collect = |vars: &BkpVars| vars.params().into_iter().map(|v| g.grad(v).map(<[f32]>::to_vec)).collect();
        Ok((collect(&vm), collect(&va)))
    }
}

fn optimizer(config: &TrainConfig) -> AdamW {
    AdamW {
        beta1: config.adam_beta1,
        beta2: config.adam_beta2,
        eps: config.adam_eps,
        weight_decay: config.weight_decay,
    }
}

fn update(
    opt: &AdamW,
    params: &mut BkpParams,
    state: &mut OptimizerState,
    g: &Graph,
    vars: &BkpVars,
    lr: f64,
) -> Result<()> {
    let grads: Vec<Option<&[f32]>> = vars.params().into_iter().map(|v| g.grad(v)).collect();
    let mut tensors = params.tensors_mut();
    opt.step(&mut tensors, &grads, state, lr)
}
