//! TOML run configuration. Every key has a default and unknown keys are
//! rejected; command-line flags are applied on top.

use std::path::{Path, PathBuf};

use keds_core::bkp::{BkpConfig, Knockout};
use keds_core::encoders::synth::SynthConfig;
use keds_core::encoders::ComposerConfig;
use keds_core::evalkit::{InferenceConfig, Streams};
use keds_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexKind {
    #[default]
    Flat,
    Ivf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StoreConfig {
    /// Directory for corpus files, triplets, checkpoints and reports.
    pub out: PathBuf,
    /// Knowledge database directory; defaults to `<out>/db`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub db: Option<PathBuf>,
    /// Keep only the first `db_size` database rows.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub db_size: Option<usize>,
    pub index: IndexKind,
    pub partitions: usize,
    /// Defaults to a quarter of the partitions, rounded up.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nprobe: Option<usize>,
    pub kmeans_iterations: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub training_sample: Option<usize>,
    /// Steps between intermediate checkpoints; 0 saves only the final one.
    pub checkpoint_every: u64,
}

impl Default for StoreConfig {
    fn default() -> Self {
        StoreConfig {
            out: PathBuf::from("runs/desk"),
            db: None,
            db_size: None,
            index: IndexKind::Flat,
            partitions: 64,
            nprobe: None,
            kmeans_iterations: 10,
            training_sample: None,
            checkpoint_every: 500,
        }
    }
}

impl StoreConfig {
    pub fn db_dir(&self) -> PathBuf {
        self.db.clone().unwrap_or_else(|| self.out.join("db"))
    }

    pub fn effective_nprobe(&self) -> usize {
        self.nprobe.unwrap_or(self.partitions.div_ceil(4))
    }
}

/// Projection shape plus the frozen composer. Both projections share the
/// composer width.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub composer: ComposerConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let b = BkpConfig::default();
        ModelConfig {
            dim: b.dim,
            layers: b.layers,
            heads: b.heads,
            composer: ComposerConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn bkp(&self) -> BkpConfig {
        BkpConfig {
            dim: self.dim,
            layers: self.layers,
            heads: self.heads,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub alpha: f64,
    pub top_k: usize,
    pub streams: Streams,
    pub knockout: Knockout,
    /// Task file; defaults to `<out>/tasks.jsonl`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tasks: Option<PathBuf>,
    /// Candidate and reference features; defaults to `<out>/eval_images.kedb`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub images: Option<PathBuf>,
    /// Worker threads for query composition.
    pub threads: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let i = InferenceConfig::default();
        EvalConfig {
            alpha: i.alpha,
            top_k: i.top_k,
            streams: i.streams,
            knockout: i.knockout,
            tasks: None,
            images: None,
            threads: 1,
        }
    }
}

impl EvalConfig {
    pub fn inference(&self) -> InferenceConfig {
        InferenceConfig {
            alpha: self.alpha,
            top_k: self.top_k,
            streams: self.streams,
            knockout: self.knockout,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub store: StoreConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            synth: SynthConfig::default(),
            store: StoreConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::desk(),
            eval: EvalConfig::default(),
        }
    }
}

/// Flag values that replace config entries when present.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub top_k: Option<usize>,
    pub db: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub streams: Option<Streams>,
    pub threads: Option<usize>,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config {
            path: origin.into(),
            source: Box::new(e),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Self::parse(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(a) = o.alpha {
            self.eval.alpha = a;
        }
        if let Some(b) = o.beta {
            self.train.beta = b;
        }
        if let Some(k) = o.top_k {
            self.train.top_k = k;
            self.eval.top_k = k;
        }
        if let Some(db) = &o.db {
            self.store.db = Some(db.clone());
        }
        if let Some(out) = &o.out {
            self.store.out = out.clone();
        }
        if let Some(s) = o.streams {
            self.eval.streams = s;
        }
        if let Some(t) = o.threads {
            self.eval.threads = t;
        }
    }

    /// The training config with the projection shape taken from `[model]`.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            bkp: self.model.bkp(),
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.dim != m.composer.dim {
            return Err(Error::Usage(format!(
                "model.dim {} differs from model.composer.dim {}",
                m.dim, m.composer.dim
            )));
        }
        if self.train.bkp != BkpConfig::default() && self.train.bkp != m.bkp() {
            return Err(Error::Usage("set the projection shape under [model], not [train.bkp]".into()));
        }
        self.synth.validate(m.composer.vocab_size, m.composer.max_len)?;
        self.train_config().validate()?;
        self.eval.inference().validate()?;
        if self.eval.threads == 0 {
            return Err(Error::Usage("eval.threads must be at least 1".into()));
        }
        let s = &self.store;
        if s.index == IndexKind::Ivf {
            let nprobe = s.effective_nprobe();
            if s.partitions == 0 || nprobe == 0 || nprobe > s.partitions {
                return Err(Error::Usage(format!(
                    "ivf needs 1 <= nprobe <= partitions, got nprobe {nprobe} of {}",
                    s.partitions
                )));
            }
        }
        Ok(())
    }
}
