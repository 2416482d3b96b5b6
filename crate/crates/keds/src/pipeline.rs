//! The pipeline stages behind each command, reading and writing files under
//! the run's output and database directories.

use std::fs::{self, OpenOptions};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;

use keds_core::encoders::synth::synth_generate;
use keds_core::encoders::FrozenComposer;
use keds_core::evalkit::{
    ablation_sweep, baselines, compose_queries, evaluate_queries, Axis, AxisValue, ComposedQueries, EvalTask,
    Experiment, InferenceConfig, RecallRow, ReportRow, Setting, TrainSet, Workbench, EVAL_CHUNK,
};
use keds_core::mining::{mine as mine_triplets, MiningReport, PseudoTriplet};
use keds_core::store::{EmbeddingMatrix, FlatIndex, IvfIndex, IvfParams, KnowledgeBank, SearchIndex};
use keds_core::trainer::{Keds, TrainData, Trainer};

use crate::checkpoint::{self, CheckpointFile, ComposerStamp};
use crate::config::{IndexKind, RunConfig};
use crate::error::{Error, Result};
use crate::jsonl::{self, JsonlWriter};
use crate::{index_file, kedb};

/// File locations of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct Workspace {
    pub out: PathBuf,
    pub db: PathBuf,
    tasks: Option<PathBuf>,
    eval_images: Option<PathBuf>,
}

impl Workspace {
    pub fn new(cfg: &RunConfig) -> Self {
        Workspace {
            out: cfg.store.out.clone(),
            db: cfg.store.db_dir(),
            tasks: cfg.eval.tasks.clone(),
            eval_images: cfg.eval.images.clone(),
        }
    }

    pub fn train_images(&self) -> PathBuf {
        self.out.join("train_images.kedb")
    }

    pub fn train_captions(&self) -> PathBuf {
        self.out.join("train_captions.kedb")
    }

    pub fn train_records(&self) -> PathBuf {
        self.out.join("train_records.jsonl")
    }

    pub fn db_images(&self) -> PathBuf {
        self.db.join("images.kedb")
    }

    pub fn db_captions(&self) -> PathBuf {
        self.db.join("captions.kedb")
    }

    pub fn db_records(&self) -> PathBuf {
        self.db.join("records.jsonl")
    }

    pub fn db_index(&self) -> PathBuf {
        self.db.join("index.kedi")
    }

    pub fn eval_images(&self) -> PathBuf {
        self.eval_images.clone().unwrap_or_else(|| self.out.join("eval_images.kedb"))
    }

    pub fn tasks(&self) -> PathBuf {
        self.tasks.clone().unwrap_or_else(|| self.out.join("tasks.jsonl"))
    }

    pub fn triplets(&self) -> PathBuf {
        self.out.join("triplets.jsonl")
    }

    pub fn train_log(&self) -> PathBuf {
        self.out.join("train_log.jsonl")
    }

    pub fn model(&self) -> PathBuf {
        self.out.join("model.kedc")
    }

    pub fn step_checkpoint(&self, step: u64) -> PathBuf {
        self.out.join("checkpoints").join(format!("step_{step:06}.kedc"))
    }

    pub fn report(&self) -> PathBuf {
        self.out.join("report.jsonl")
    }

    pub fn sweep_report(&self, axis: Axis) -> PathBuf {
        self.out.join(format!("sweep_{}.jsonl", axis.name()))
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(Error::io(path))
}

pub fn composer(cfg: &RunConfig) -> Result<Arc<FrozenComposer>> {
    Ok(Arc::new(FrozenComposer::new(cfg.model.composer, cfg.seed)?))
}

fn stamp(cfg: &RunConfig) -> ComposerStamp {
    ComposerStamp {
        config: cfg.model.composer,
        seed: cfg.seed,
    }
}

/// Row counts written by [`gen_synth`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthSummary {
    pub train: usize,
    pub database: usize,
    pub eval_images: usize,
    pub tasks: usize,
}

pub fn gen_synth(cfg: &RunConfig) -> Result<SynthSummary> {
    let ws = Workspace::new(cfg);
    create_dir(&ws.out)?;
    create_dir(&ws.db)?;
    let corpus = synth_generate(&cfg.synth, &*composer(cfg)?, cfg.seed)?;
    kedb::save(&ws.train_images(), &corpus.train.images)?;
    kedb::save(&ws.train_captions(), &corpus.train.captions)?;
    jsonl::save(&ws.train_records(), &corpus.train.records)?;
    kedb::save(&ws.db_images(), &corpus.database.images)?;
    kedb::save(&ws.db_captions(), &corpus.database.captions)?;
    jsonl::save(&ws.db_records(), &corpus.database.records)?;
    kedb::save(&ws.eval_images(), &corpus.eval_images)?;
    jsonl::save(&ws.tasks(), &corpus.tasks)?;
    let summary = SynthSummary {
        train: corpus.train.records.len(),
        database: corpus.database.records.len(),
        eval_images: corpus.eval_images.count(),
        tasks: corpus.tasks.len(),
    };
    log::info!("synthetic corpus written to {}: {summary:?}", ws.out.display());
    Ok(summary)
}

/// Loads a feature matrix, L2-normalizing rows of files not flagged as
/// normalized. Retrieval and training score by inner product on unit rows.
pub fn load_features(path: &Path) -> Result<EmbeddingMatrix> {
    let m = kedb::load(path)?;
    if m.is_normalized() {
        return Ok(m);
    }
    log::warn!("{} is not flagged normalized; normalizing rows", path.display());
    let dim = m.dim();
    EmbeddingMatrix::normalized_from(dim, m.into_values()).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))
}

fn load_pair(images: &Path, captions: &Path, limit: Option<usize>) -> Result<(EmbeddingMatrix, EmbeddingMatrix)> {
    let mut i = load_features(images)?;
    let mut c = load_features(captions)?;
    if i.count() != c.count() || i.dim() != c.dim() {
        return Err(Error::Usage(format!(
            "{} and {} disagree: {}x{} vs {}x{}",
            images.display(),
            captions.display(),
            i.count(),
            i.dim(),
            c.count(),
            c.dim()
        )));
    }
    if let Some(n) = limit {
        if n < i.count() {
            i = i.head(n);
            c = c.head(n);
        }
    }
    Ok((i, c))
}

/// Builds the configured index over the database images and saves it.
pub fn build_db(cfg: &RunConfig) -> Result<SearchIndex> {
    let ws = Workspace::new(cfg);
    let (images, _) = load_pair(&ws.db_images(), &ws.db_captions(), cfg.store.db_size)?;
    let images = Arc::new(images);
    let s = &cfg.store;
    let index = match s.index {
        IndexKind::Flat => SearchIndex::Flat(FlatIndex::new(images)),
        IndexKind::Ivf => {
            let params = IvfParams {
                training_sample: s.training_sample,
                ..IvfParams::new(s.partitions, s.kmeans_iterations, keds_core::rng::derive_seed(cfg.seed, "store"))
            };
            SearchIndex::Ivf {
                index: IvfIndex::build_with(images, &params)?,
                nprobe: s.effective_nprobe(),
            }
        }
    };
    index_file::save(&ws.db_index(), &index)?;
    log::info!("{:?} index over {} rows written to {}", s.index, index.matrix().count(), ws.db_index().display());
    Ok(index)
}

/// The database images, captions and saved index.
pub fn load_bank(cfg: &RunConfig) -> Result<KnowledgeBank> {
    let ws = Workspace::new(cfg);
    let (images, captions) = load_pair(&ws.db_images(), &ws.db_captions(), cfg.store.db_size)?;
    let images = Arc::new(images);
    let index = index_file::load(&ws.db_index(), images.clone())?;
    Ok(KnowledgeBank::new(images, Arc::new(captions), index)?)
}

pub fn mine(cfg: &RunConfig) -> Result<MiningReport> {
    let ws = Workspace::new(cfg);
    let captions = load_features(&ws.train_captions())?;
    let records = jsonl::load_records(&ws.train_records())?;
    if records.len() != captions.count() {
        return Err(Error::Usage(format!(
            "{} has {} records for {} caption rows",
            ws.train_records().display(),
            records.len(),
            captions.count()
        )));
    }
    let report = mine_triplets(&records, &FlatIndex::new(Arc::new(captions)))?;
    jsonl::save(&ws.triplets(), &report.triplets)?;
    log::info!("mined {} triplets, skipped {} records without a subject span", report.triplets.len(), report.skipped);
    Ok(report)
}

pub fn train_data(cfg: &RunConfig) -> Result<TrainData> {
    let ws = Workspace::new(cfg);
    let (images, captions) = load_pair(&ws.train_images(), &ws.train_captions(), None)?;
    let triplets: Vec<PseudoTriplet> = jsonl::load(&ws.triplets())?;
    Ok(TrainData::new(
        Arc::new(images),
        Arc::new(captions),
        triplets,
        load_bank(cfg)?,
        cfg.train.top_k,
    )?)
}

fn check_stamp(cfg: &RunConfig, found: &ComposerStamp, path: &Path) -> Result<()> {
    if *found != stamp(cfg) {
        return Err(Error::Usage(format!(
            "{} was trained against composer {found:?}, the config gives {:?}",
            path.display(),
            stamp(cfg)
        )));
    }
    Ok(())
}

/// Trains from scratch, or from `resume`, to the end of the schedule.
/// Log lines are appended to the training log; a fresh run truncates it.
pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<CheckpointFile> {
    let ws = Workspace::new(cfg);
    let data = train_data(cfg)?;
    let composer = composer(cfg)?;
    let config = cfg.train_config();
    let mut trainer = match resume {
        Some(path) => {
            let file = checkpoint::load(path)?;
            check_stamp(cfg, &file.composer, path)?;
            if file.checkpoint.config != config {
                return Err(Error::Usage(format!(
                    "{} holds a different training config than the run config",
                    path.display()
                )));
            }
            log::info!("resuming from {} at step {}", path.display(), file.checkpoint.step);
            Trainer::resume(file.checkpoint, composer)?
        }
        None => {
            let total = config.total_steps(data.triplets().len());
            Trainer::new(config, composer, cfg.seed, total)?
        }
    };
    let log_path = ws.train_log();
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(Error::io(&log_path))?;
    let mut log = JsonlWriter::new(BufWriter::new(file));
    let every = cfg.store.checkpoint_every;
    if every > 0 {
        create_dir(&ws.out.join("checkpoints"))?;
    }
    while !trainer.is_finished() {
        let line = trainer.train_step(&data)?;
        log.write(&line).map_err(Error::io(&log_path))?;
        let done = trainer.step_count();
        if done % 100 == 0 {
            log::info!("step {done}/{}: {line:?}", trainer.total_steps());
        }
        if every > 0 && done % every == 0 && !trainer.is_finished() {
            let path = ws.step_checkpoint(done);
            checkpoint::save(&path, &snapshot(cfg, &trainer))?;
            log::debug!("checkpoint {}", path.display());
        }
    }
    log.flush().map_err(Error::io(&log_path))?;
    let out = snapshot(cfg, &trainer);
    checkpoint::save(&ws.model(), &out)?;
    log::info!("model written to {}", ws.model().display());
    Ok(out)
}

pub fn snapshot(cfg: &RunConfig, trainer: &Trainer) -> CheckpointFile {
    CheckpointFile {
        checkpoint: trainer.checkpoint(),
        composer: stamp(cfg),
    }
}

/// Loads a checkpoint and pairs it with the run's composer.
pub fn load_model(cfg: &RunConfig, path: &Path) -> Result<Keds> {
    let file = checkpoint::load(path)?;
    check_stamp(cfg, &file.composer, path)?;
    Ok(Keds {
        composer: composer(cfg)?,
        phi_m: file.checkpoint.phi_m,
        phi_a: file.checkpoint.phi_a,
    })
}

/// [`compose_queries`] split across `threads` workers. Work is divided on
/// batch boundaries, so the result is bitwise the same for any thread count.
pub fn parallel_queries(
    model: &Keds,
    bank: &KnowledgeBank,
    images: &EmbeddingMatrix,
    tasks: &[EvalTask],
    inference: &InferenceConfig,
    threads: usize,
) -> keds_core::Result<ComposedQueries> {
    let batches = tasks.len().div_ceil(EVAL_CHUNK);
    let per_worker = batches.div_ceil(threads.max(1)).max(1) * EVAL_CHUNK;
    if threads <= 1 || tasks.len() <= per_worker {
        return compose_queries(model, bank, images, tasks, inference.top_k, inference.knockout);
    }
    let parts: Vec<keds_core::Result<ComposedQueries>> = thread::scope(|s| {
        let handles: Vec<_> = tasks
            .chunks(per_worker)
            .map(|part| s.spawn(move || compose_queries(model, bank, images, part, inference.top_k, inference.knockout)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("query worker panicked"))
            .collect()
    });
    let mut out = ComposedQueries {
        m: Vec::with_capacity(tasks.len()),
        a: Vec::with_capacity(tasks.len()),
    };
    for part in parts {
        let part = part?;
        out.m.extend(part.m);
        out.a.extend(part.a);
    }
    Ok(out)
}

fn eval_set(cfg: &RunConfig) -> Result<(EmbeddingMatrix, Vec<EvalTask>)> {
    let ws = Workspace::new(cfg);
    let images = load_features(&ws.eval_images())?;
    let tasks: Vec<EvalTask> = jsonl::load(&ws.tasks())?;
    for t in &tasks {
        t.validate(images.count())?;
    }
    Ok((images, tasks))
}

/// Scores the baselines and the model at the configured `α`, writing one
/// report row each.
pub fn eval(cfg: &RunConfig, model_path: Option<&Path>) -> Result<Vec<ReportRow>> {
    let ws = Workspace::new(cfg);
    let path = model_path.map(Path::to_path_buf).unwrap_or_else(|| ws.model());
    let model = load_model(cfg, &path)?;
    let bank = load_bank(cfg)?;
    let (images, tasks) = eval_set(cfg)?;
    let inference = cfg.eval.inference();
    let mut rows: Vec<ReportRow> = baselines(&model.composer, &images, &tasks)?
        .into_iter()
        .map(|(b, recall)| ReportRow {
            axis: "baseline".into(),
            value: AxisValue::Name(b.name().into()),
            recall,
            seed: cfg.seed,
        })
        .collect();
    let q = parallel_queries(&model, &bank, &images, &tasks, &inference, cfg.eval.threads)?;
    let alpha = inference.effective_alpha();
    let recall = evaluate_queries(&q.hybrid(alpha)?, &tasks, &images)?;
    rows.push(ReportRow {
        axis: "alpha".into(),
        value: AxisValue::Number(alpha),
        recall,
        seed: cfg.seed,
    });
    jsonl::save(&ws.report(), &rows)?;
    for r in &rows {
        log::info!("{} {:?}: {:?}", r.axis, r.value, r.recall);
    }
    Ok(rows)
}

struct ThreadedBench {
    bench: Workbench,
    threads: usize,
}

impl Experiment for ThreadedBench {
    fn evaluate(&mut self, setting: &Setting) -> keds_core::Result<RecallRow> {
        let model = self.bench.model(setting)?.clone();
        let bank = self.bench.bank(setting.database_size)?;
        let q = parallel_queries(
            &model,
            &bank,
            self.bench.eval_images(),
            self.bench.tasks(),
            &setting.inference,
            self.threads,
        )?;
        self.bench.score(&q, &setting.inference)
    }
}

/// Moves the run's setting along `axis`, retraining where the axis needs it.
/// The saved model, when present, stands in for the unmodified setting.
pub fn sweep(cfg: &RunConfig, axis: Axis, values: &[AxisValue]) -> Result<Vec<ReportRow>> {
    let ws = Workspace::new(cfg);
    let (train_images, train_captions) = load_pair(&ws.train_images(), &ws.train_captions(), None)?;
    let train = TrainSet {
        images: Arc::new(train_images),
        captions: Arc::new(train_captions),
        records: jsonl::load_records(&ws.train_records())?,
    };
    let (db_images, db_captions) = load_pair(&ws.db_images(), &ws.db_captions(), None)?;
    let db_images = Arc::new(db_images);
    let index = match cfg.store.db_size {
        // The saved index covers only the truncated rows.
        Some(n) if n < db_images.count() => SearchIndex::Flat(FlatIndex::new(db_images.clone())),
        _ => index_file::load(&ws.db_index(), db_images.clone())?,
    };
    let bank = KnowledgeBank::new(db_images, Arc::new(db_captions), index)?;
    let (images, tasks) = eval_set(cfg)?;
    let mut bench = Workbench::new(composer(cfg)?, train, bank, Arc::new(images), tasks, cfg.seed)?;
    let base = Setting {
        train: cfg.train_config(),
        inference: cfg.eval.inference(),
        database_size: cfg.store.db_size,
    };
    if ws.model().exists() {
        let file = checkpoint::load(&ws.model())?;
        if file.composer == stamp(cfg) && file.checkpoint.config == base.train {
            log::info!("reusing {} for the base setting", ws.model().display());
            bench.insert_model(
                &base,
                Keds {
                    composer: bench.composer().clone(),
                    phi_m: file.checkpoint.phi_m,
                    phi_a: file.checkpoint.phi_a,
                },
            );
        }
    }
    let mut exp = ThreadedBench {
        bench,
        threads: cfg.eval.threads,
    };
    let rows = ablation_sweep(axis, values, &base, &mut exp, cfg.seed)?;
    jsonl::save(&ws.sweep_report(axis), &rows)?;
    Ok(rows)
}
