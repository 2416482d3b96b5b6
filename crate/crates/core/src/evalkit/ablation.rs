use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{baselines, compose_queries, evaluate_queries, Baseline, ComposedQueries, EvalTask, InferenceConfig, RecallRow, Streams};
use crate::encoders::synth::SynthCorpus;
use crate::encoders::FrozenComposer;
use crate::mining::{mine, PseudoTriplet};
use crate::store::{EmbeddingMatrix, FlatIndex, KnowledgeBank, KnowledgeRecord};
use crate::trainer::{Keds, StepLog, TrainConfig, TrainData, Trainer};
use crate::{Error, Result};

/// Hyperparameter axes of the ablation runner.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Alpha,
    Beta,
    TopK,
    DatabaseSize,
    Knockout,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Alpha => "alpha",
            Axis::Beta => "beta",
            Axis::TopK => "topk",
            Axis::DatabaseSize => "db_size",
            Axis::Knockout => "knockout",
        }
    }

    /// Whether changing this axis needs a newly trained model.
    pub fn retrains(self, value: &AxisValue) -> bool {
        match self {
            Axis::Alpha => false,
            Axis::Knockout => value.as_name() != Some("no_phi_a"),
            _ => true,
        }
    }
}

impl core::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(Axis::Alpha),
            "beta" => Ok(Axis::Beta),
            "topk" | "k" => Ok(Axis::TopK),
            "db_size" => Ok(Axis::DatabaseSize),
            "knockout" => Ok(Axis::Knockout),
            _ => Err(Error::Config(format!(
                "unknown ablation axis {s:?}; expected alpha, beta, topk, db_size or knockout"
            ))),
        }
    }
}

/// Knockout names accepted on the knockout axis.
pub const KNOCKOUTS: [&str; 6] = ["none", "no_topk_img", "no_topk_cap", "no_phi_a", "no_context", "no_extra"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AxisValue {
    Number(f64),
    Name(String),
}

impl AxisValue {
    pub fn as_number(&self) -> Option<f64> {
        match self {
            AxisValue::Number(x) => Some(*x),
            AxisValue::Name(_) => None,
        }
    }

    pub fn as_name(&self) -> Option<&str> {
        match self {
            AxisValue::Name(s) => Some(s),
            AxisValue::Number(_) => None,
        }
    }

    /// Numbers where they parse, names otherwise.
    pub fn parse(s: &str) -> Self {
        s.parse().map(AxisValue::Number).unwrap_or_else(|_| AxisValue::Name(s.to_string()))
    }
}

/// Everything that defines one trained-and-evaluated model.
#[derive(Clone, Debug, PartialEq)]
pub struct Setting {
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    /// Leading rows of the knowledge bank to keep; `None` keeps all.
    pub database_size: Option<usize>,
}

fn count(axis: Axis, value: &AxisValue) -> Result<usize> {
    match value.as_number() {
        Some(x) if x >= 1.0 && num_traits::Float::fract(x) == 0.0 => Ok(x as usize),
        _ => Err(Error::Config(format!("{} needs a positive integer, got {value:?}", axis.name()))),
    }
}

/// The setting obtained by moving `base` to `value` along `axis`.
pub fn apply_axis(axis: Axis, value: &AxisValue, base: &Setting) -> Result<Setting> {
    let mut s = base.clone();
    let number = || {
        value
            .as_number()
            .ok_or_else(|| Error::Config(format!("{} needs a number, got {value:?}", axis.name())))
    };
    match axis {
        Axis::Alpha => {
            s.inference.alpha = number()?;
            s.inference.streams = Streams::Both;
        }
        Axis::Beta => s.train.beta = number()?,
        Axis::TopK => {
            let k = count(axis, value)?;
            s.train.top_k = k;
            s.inference.top_k = k;
        }
        Axis::DatabaseSize => s.database_size = Some(count(axis, value)?),
        Axis::Knockout => match value.as_name() {
            Some("none") => {}
            Some("no_topk_img") => {
                s.train.knockout.image_branch = true;
                s.inference.knockout.image_branch = true;
            }
            Some("no_topk_cap") => {
                s.train.knockout.caption_branch = true;
                s.inference.knockout.caption_branch = true;
            }
            Some("no_phi_a") => s.inference.streams = Streams::M,
            Some("no_context") => s.train.prompt_only_templates = true,
            Some("no_extra") => s.train.beta = 0.0,
            _ => {
                return Err(Error::Config(format!(
                    "unknown knockout {value:?}; expected one of {KNOCKOUTS:?}"
                )))
            }
        },
    }
    s.train.validate()?;
    s.inference.validate()?;
    Ok(s)
}

/// One line of an ablation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub axis: String,
    pub value: AxisValue,
    #[serde(flatten)]
    pub recall: RecallRow,
    pub seed: u64,
}

/// Something that can score a setting, training whatever it needs.
pub trait Experiment {
    fn evaluate(&mut self, setting: &Setting) -> Result<RecallRow>;
}

/// Evaluates `base` moved to each value along `axis`.
pub fn ablation_sweep<E: Experiment + ?Sized>(
    axis: Axis,
    values: &[AxisValue],
    base: &Setting,
    experiment: &mut E,
    seed: u64,
) -> Result<Vec<ReportRow>> {
    values
        .iter()
        .map(|v| {
            let setting = apply_axis(axis, v, base)?;
            Ok(ReportRow {
                axis: axis.name().to_string(),
                value: v.clone(),
                recall: experiment.evaluate(&setting)?,
                seed,
            })
        })
        .collect()
}

/// Training pairs with caption metadata.
#[derive(Clone, Debug)]
pub struct TrainSet {
    pub images: Arc<EmbeddingMatrix>,
    pub captions: Arc<EmbeddingMatrix>,
    pub records: Vec<KnowledgeRecord>,
}

struct CachedModel {
    digest: u64,
    database_size: Option<usize>,
    model: Keds,
}

/// Mined training data, knowledge bank and evaluation tasks for repeated
/// train-and-evaluate runs. Trained models are cached by configuration.
pub struct Workbench {
    composer: Arc<FrozenComposer>,
    train: TrainSet,
    triplets: Vec<PseudoTriplet>,
    skipped: usize,
    bank: KnowledgeBank,
    eval_images: Arc<EmbeddingMatrix>,
    tasks: Vec<EvalTask>,
    seed: u64,
    cache: Vec<CachedModel>,
}

impl Workbench {
    pub fn new(
        composer: Arc<FrozenComposer>,
        train: TrainSet,
        bank: KnowledgeBank,
        eval_images: Arc<EmbeddingMatrix>,
        tasks: Vec<EvalTask>,
        seed: u64,
    ) -> Result<Self> {
        for t in &tasks {
            t.validate(eval_images.count())?;
        }
        let report = mine(&train.records, &FlatIndex::new(train.captions.clone()))?;
        Ok(Workbench {
            composer,
            train,
            triplets: report.triplets,
            skipped: report.skipped,
            bank,
            eval_images,
            tasks,
            seed,
            cache: Vec::new(),
        })
    }

    pub fn from_synth(corpus: &SynthCorpus, composer: Arc<FrozenComposer>, seed: u64) -> Result<Self> {
        let train = TrainSet {
            images: Arc::new(corpus.train.images.clone()),
            captions: Arc::new(corpus.train.captions.clone()),
            records: corpus.train.records.clone(),
        };
        let bank = KnowledgeBank::flat(
            Arc::new(corpus.database.images.clone()),
            Arc::new(corpus.database.captions.clone()),
        )?;
        Self::new(composer, train, bank, Arc::new(corpus.eval_images.clone()), corpus.tasks.clone(), seed)
    }

    pub fn composer(&self) -> &Arc<FrozenComposer> {
        &self.composer
    }

    pub fn triplets(&self) -> &[PseudoTriplet] {
        &self.triplets
    }

    /// Records skipped by mining for lack of a subject span.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn tasks(&self) -> &[EvalTask] {
        &self.tasks
    }

    pub fn eval_images(&self) -> &Arc<EmbeddingMatrix> {
        &self.eval_images
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn bank(&self, database_size: Option<usize>) -> Result<KnowledgeBank> {
        match database_size {
            Some(n) if n < self.bank.len() => self.bank.truncated(n),
            _ => Ok(self.bank.clone()),
        }
    }

    pub fn train_data(&self, config: &TrainConfig, database_size: Option<usize>) -> Result<TrainData> {
        TrainData::new(
            self.train.images.clone(),
            self.train.captions.clone(),
            self.triplets.clone(),
            self.bank(database_size)?,
            config.top_k,
        )
    }

    pub fn trainer(&self, config: &TrainConfig) -> Result<Trainer> {
        let total = config.total_steps(self.triplets.len());
        Trainer::new(config.clone(), self.composer.clone(), self.seed, total)
    }

    /// Trains a fresh model to the end of its schedule.
    pub fn train(&self, config: &TrainConfig, database_size: Option<usize>, on_step: impl FnMut(&StepLog)) -> Result<Keds> {
        let data = self.train_data(config, database_size)?;
        let mut trainer = self.trainer(config)?;
        trainer.run(&data, on_step)?;
        Ok(trainer.into_model())
    }

    pub fn queries(&self, model: &Keds, inference: &InferenceConfig, database_size: Option<usize>) -> Result<ComposedQueries> {
        let bank = self.bank(database_size)?;
        compose_queries(model, &bank, &self.eval_images, &self.tasks, inference.top_k, inference.knockout)
    }

    pub fn score(&self, queries: &ComposedQueries, inference: &InferenceConfig) -> Result<RecallRow> {
        inference.validate()?;
        let q = queries.hybrid(inference.effective_alpha())?;
        evaluate_queries(&q, &self.tasks, &self.eval_images)
    }

    pub fn evaluate_model(&self, model: &Keds, inference: &InferenceConfig, database_size: Option<usize>) -> Result<RecallRow> {
        let q = self.queries(model, inference, database_size)?;
        self.score(&q, inference)
    }

    pub fn baselines(&self) -> Result<Vec<(Baseline, RecallRow)>> {
        baselines(&self.composer, &self.eval_images, &self.tasks)
    }

    /// The model for `setting`, trained on first use.
    pub fn model(&mut self, setting: &Setting) -> Result<&Keds> {
        let digest = setting.train.digest();
        let pos = self
            .cache
            .iter()
            .position(|c| c.digest == digest && c.database_size == setting.database_size);
        let pos = match pos {
            Some(p) => p,
            None => {
                let model = self.train(&setting.train, setting.database_size, |_| {})?;
                self.cache.push(CachedModel {
                    digest,
                    database_size: setting.database_size,
                    model,
                });
                self.cache.len() - 1
            }
        };
        Ok(&self.cache[pos].model)
    }

    /// Seeds the cache with an already trained model.
    pub fn insert_model(&mut self, setting: &Setting, model: Keds) {
        self.cache.push(CachedModel {
            digest: setting.train.digest(),
            database_size: setting.database_size,
            model,
        });
    }
}

impl Experiment for Workbench {
    fn evaluate(&mut self, setting: &Setting) -> Result<RecallRow> {
        let model = self.model(setting)?.clone();
        self.evaluate_model(&model, &setting.inference, setting.database_size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    struct Echo(Vec<Setting>);

    impl Experiment for Echo {
        fn evaluate(&mut self, setting: &Setting) -> Result<RecallRow> {
            self.0.push(setting.clone());
            let a = setting.inference.effective_alpha();
            Ok(RecallRow {
                r1: a,
                r5: a,
                r10: a,
                r50: a,
                n_tasks: 1,
            })
        }
    }

    fn base() -> Setting {
        Setting {
            train: TrainConfig::desk(),
            inference: InferenceConfig::default(),
            database_size: None,
        }
    }

    #[test]
    fn alpha_axis_report_shape() {
        let values: Vec<AxisValue> = [0.0, 0.25, 0.5, 0.75, 1.0].map(AxisValue::Number).to_vec();
        let mut e = Echo(Vec::new());
        let rows = ablation_sweep(Axis::Alpha, &values, &base(), &mut e, 3).unwrap();
        assert_eq!(rows.len(), 5);
        assert_eq!(rows[4].recall.r10, 1.0);
        assert!(rows.iter().all(|r| r.axis == "alpha" && r.seed == 3));
    }

    #[test]
    fn no_phi_a_equals_alpha_one() {
        let a = apply_axis(Axis::Knockout, &AxisValue::parse("no_phi_a"), &base()).unwrap();
        let b = apply_axis(Axis::Alpha, &AxisValue::Number(1.0), &base()).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.inference.effective_alpha(), b.inference.effective_alpha());
    }

    #[test]
    fn knockout_semantics() {
        let s = |name| apply_axis(Axis::Knockout, &AxisValue::parse(name), &base()).unwrap();
        assert!(s("no_topk_img").train.knockout.image_branch);
        assert!(s("no_topk_cap").inference.knockout.caption_branch);
        assert!(s("no_context").train.prompt_only_templates);
        assert_eq!(s("no_extra").train.beta, 0.0);
        assert_eq!(s("none"), base());
        assert!(apply_axis(Axis::Knockout, &AxisValue::parse("bogus"), &base()).is_err());
    }

    #[test]
    fn axis_parsing_and_value_checks() {
        assert!("width".parse::<Axis>().is_err());
        assert_eq!("topk".parse::<Axis>().unwrap(), Axis::TopK);
        assert!(apply_axis(Axis::TopK, &AxisValue::Number(2.5), &base()).is_err());
        assert!(apply_axis(Axis::Alpha, &AxisValue::Number(1.5), &base()).is_err());
        let k = apply_axis(Axis::TopK, &AxisValue::Number(4.0), &base()).unwrap();
        assert_eq!((k.train.top_k, k.inference.top_k), (4, 4));
    }

    #[test]
    fn report_json_keys() {
        let row = ReportRow {
            axis: "alpha".into(),
            value: AxisValue::Number(0.5),
            recall: RecallRow {
                r1: 0.1,
                r5: 0.2,
                r10: 0.3,
                r50: 0.4,
                n_tasks: 500,
            },
            seed: 7,
        };
        let s = serde_json::to_string(&row).unwrap();
        assert_eq!(
            s,
            r#"{"axis":"alpha","value":0.5,"R1":0.1,"R5":0.2,"R10":0.3,"R50":0.4,"n_tasks":500,"seed":7}"#
        );
        assert_eq!(serde_json::from_str::<ReportRow>(&s).unwrap(), row);
        let v = vec![AxisValue::parse("no_extra"), AxisValue::parse("16")];
        assert_eq!(v[1], AxisValue::Number(16.0));
    }
}
