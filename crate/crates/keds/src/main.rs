use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use keds::pipeline;
use keds::{Overrides, RunConfig};
use keds_core::evalkit::{Axis, AxisValue, Streams};
use keds_core::gradcheck;

#[derive(Parser)]
#[command(name = "keds", version, about = "Knowledge-enhanced dual-stream composed retrieval")]
struct Cli {
    #[command(flatten)]
    flags: Flags,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Flags {
    /// TOML run config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    beta: Option<f64>,
    #[arg(long, global = true)]
    topk: Option<usize>,
    /// Knowledge database directory.
    #[arg(long, global = true)]
    db: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// M, A or both.
    #[arg(long, global = true)]
    streams: Option<Streams>,
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic training split, knowledge database and tasks.
    GenSynth,
    /// Build and save the knowledge database index.
    BuildDb,
    /// Mine pseudo triplets from the training captions.
    Mine,
    /// Train both projections, writing checkpoints and the step log.
    Train {
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score the trained model and the baselines on the task file.
    Eval {
        /// Checkpoint to evaluate; defaults to the run's final model.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Evaluate along one hyperparameter axis.
    Sweep {
        /// alpha, beta, topk, db_size or knockout.
        #[arg(long)]
        axis: Axis,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
}

fn config(flags: &Flags) -> keds::Result<RunConfig> {
    let mut cfg = match &flags.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply(&Overrides {
        seed: flags.seed,
        alpha: flags.alpha,
        beta: flags.beta,
        top_k: flags.topk,
        db: flags.db.clone(),
        out: flags.out.clone(),
        streams: flags.streams,
        threads: flags.threads,
    });
    cfg.validate()?;
    log::info!("effective config:\n{}", cfg.to_toml());
    Ok(cfg)
}

fn run(cli: Cli) -> keds::Result<bool> {
    if let Command::Gradcheck { seeds } = cli.command {
        let results = gradcheck::run_suite(seeds)?;
        let failed: Vec<_> = results.iter().filter(|r| !r.passed()).collect();
        for r in &failed {
            log::error!("{} seed {}: relative error {:e}", r.name, r.seed, r.rel_error);
        }
        let worst = results.iter().map(|r| r.rel_error).fold(0.0, f64::max);
        println!("gradcheck: {} checks, {} failed, worst relative error {worst:e}", results.len(), failed.len());
        return Ok(failed.is_empty());
    }
    let cfg = config(&cli.flags)?;
    match cli.command {
        Command::GenSynth => {
            let s = pipeline::gen_synth(&cfg)?;
            println!("train {} database {} eval images {} tasks {}", s.train, s.database, s.eval_images, s.tasks);
        }
        Command::BuildDb => {
            let index = pipeline::build_db(&cfg)?;
            println!("indexed {} rows", index.matrix().count());
        }
        Command::Mine => {
            let r = pipeline::mine(&cfg)?;
            println!("{} triplets, {} skipped", r.triplets.len(), r.skipped);
        }
        Command::Train { resume } => {
            let f = pipeline::train(&cfg, resume.as_deref())?;
            println!("trained {} steps", f.checkpoint.step);
        }
        Command::Eval { model } => {
            for row in pipeline::eval(&cfg, model.as_deref())? {
                println!("{}", serde_json::to_string(&row).expect("report rows serialize"));
            }
        }
        Command::Sweep { axis, values } => {
            let values: Vec<AxisValue> = values.iter().map(|v| AxisValue::parse(v)).collect();
            for row in pipeline::sweep(&cfg, axis, &values)? {
                println!("{}", serde_json::to_string(&row).expect("report rows serialize"));
            }
        }
        Command::Gradcheck { .. } => unreachable!("handled above"),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("KEDS_LOG", "info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
