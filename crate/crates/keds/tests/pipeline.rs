use std::path::Path;
use std::process::Command;

use keds::config::IndexKind;
use keds::{checkpoint, jsonl, pipeline, RunConfig};
use keds_core::evalkit::{Axis, AxisValue, ReportRow};
use keds_core::trainer::StepLog;

const TINY: &str = r#"
seed = 5
[synth]
items = 240
database = 160
attributes = 5
subject_attributes = 3
tasks = 150
[model]
dim = 16
layers = 1
heads = 2
[model.composer]
dim = 16
vocab_size = 64
max_len = 16
layers = 1
heads = 2
[store]
index = "ivf"
partitions = 6
checkpoint_every = 10
[train]
steps = 24
warmup_steps = 4
batch_size = 16
top_k = 4
[eval]
top_k = 4
"#;

fn tiny(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::parse(TINY, Path::new("tiny.toml")).unwrap();
    cfg.store.out = out.to_path_buf();
    cfg.validate().unwrap();
    cfg
}

fn prepare(out: &Path) -> RunConfig {
    let cfg = tiny(out);
    let s = pipeline::gen_synth(&cfg).unwrap();
    assert_eq!((s.train, s.database, s.tasks), (240, 160, 150));
    assert_eq!(s.eval_images, 32 + 150);
    pipeline::build_db(&cfg).unwrap();
    let mined = pipeline::mine(&cfg).unwrap();
    assert_eq!(mined.triplets.len(), 240);
    cfg
}

fn log_lines(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path).unwrap().lines().map(str::to_owned).collect()
}

#[test]
fn end_to_end_run_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = prepare(dir.path());
    let ws = pipeline::Workspace::new(&cfg);
    let full = pipeline::train(&cfg, None).unwrap();
    assert_eq!(full.checkpoint.step, 24);
    assert!(ws.step_checkpoint(10).exists() && ws.step_checkpoint(20).exists());
    let logs: Vec<StepLog> = jsonl::load(&ws.train_log()).unwrap();
    assert_eq!(logs.len(), 24);
    assert_eq!(logs.iter().map(|l| l.step).collect::<Vec<_>>(), (0..24).collect::<Vec<_>>());
    let uninterrupted = log_lines(&ws.train_log());

    let resumed = pipeline::train(&cfg, Some(&ws.step_checkpoint(10))).unwrap();
    assert_eq!(resumed, full);
    assert_eq!(checkpoint::load(&ws.model()).unwrap(), full);
    let appended = log_lines(&ws.train_log());
    assert_eq!(appended.len(), 24 + 14);
    assert_eq!(appended[24..], uninterrupted[10..]);

    let rows = pipeline::eval(&cfg, None).unwrap();
    let names: Vec<String> = rows.iter().map(|r| format!("{}:{:?}", r.axis, r.value)).collect();
    assert_eq!(names.len(), 4, "{names:?}");
    assert!(rows[..3].iter().all(|r| r.axis == "baseline"));
    assert_eq!(rows[3].value, AxisValue::Number(0.5));
    for r in &rows {
        assert!((0.0..=1.0).contains(&r.recall.r1));
        assert!(r.recall.r1 <= r.recall.r5 && r.recall.r5 <= r.recall.r10 && r.recall.r10 <= r.recall.r50);
    }
    let saved: Vec<ReportRow> = jsonl::load(&ws.report()).unwrap();
    assert_eq!(saved, rows);

    // The sweep reuses the saved model, so its α=0.5 row equals the eval row.
    let sweep = pipeline::sweep(&cfg, Axis::Alpha, &[AxisValue::Number(0.0), AxisValue::Number(0.5)]).unwrap();
    assert_eq!(sweep.len(), 2);
    assert_eq!(sweep[1].recall, rows[3].recall);
    assert!(ws.sweep_report(Axis::Alpha).exists());
}

#[test]
fn resume_rejects_a_foreign_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = prepare(dir.path());
    let ws = pipeline::Workspace::new(&cfg);
    pipeline::train(&cfg, None).unwrap();
    let mut other = cfg.clone();
    other.train.lr *= 2.0;
    assert!(pipeline::train(&other, Some(&ws.step_checkpoint(10))).is_err());
    let mut reseeded = cfg.clone();
    reseeded.seed += 1;
    assert!(pipeline::load_model(&reseeded, &ws.model()).is_err());
}

#[test]
fn parallel_queries_match_single_thread_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = prepare(dir.path());
    let ws = pipeline::Workspace::new(&cfg);
    pipeline::train(&cfg, None).unwrap();
    let model = pipeline::load_model(&cfg, &ws.model()).unwrap();
    let bank = pipeline::load_bank(&cfg).unwrap();
    let images = keds::kedb::load(&ws.eval_images()).unwrap();
    let tasks = jsonl::load(&ws.tasks()).unwrap();
    let inference = cfg.eval.inference();
    let one = pipeline::parallel_queries(&model, &bank, &images, &tasks, &inference, 1).unwrap();
    for threads in [2, 3, 8] {
        let many = pipeline::parallel_queries(&model, &bank, &images, &tasks, &inference, threads).unwrap();
        let bits = |q: &Vec<Vec<f32>>| q.iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&many.m), bits(&one.m), "{threads} threads");
        assert_eq!(bits(&many.a), bits(&one.a), "{threads} threads");
    }
}

fn keds(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_keds"))
        .args(args)
        .env("KEDS_LOG", "warn")
        .output()
        .unwrap()
}

fn report_lines(o: &std::process::Output) -> Vec<ReportRow> {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone())
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn cli_alpha_one_is_the_meaning_stream() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(&dir.path().join("run"));
    cfg.store.index = IndexKind::Flat;
    let config = dir.path().join("tiny.toml");
    std::fs::write(&config, cfg.to_toml()).unwrap();
    let c = config.to_str().unwrap();
    for stage in ["gen-synth", "build-db", "mine", "train"] {
        let o = keds(&["--config", c, stage]);
        assert!(o.status.success(), "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let alpha = report_lines(&keds(&["--config", c, "eval", "--alpha", "1.0"]));
    let stream = report_lines(&keds(&["--config", c, "eval", "--streams", "M"]));
    assert_eq!(alpha, stream);
    assert_eq!(alpha.last().unwrap().value, AxisValue::Number(1.0));
}

#[test]
fn cli_reports_missing_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("empty");
    let o = keds(&["--out", out.to_str().unwrap(), "mine"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("train_captions.kedb"), "{err}");
    assert_eq!(err.matches("error:").count(), 1, "{err}");

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[store]\npartitons = 3\n").unwrap();
    let o = keds(&["--config", bad.to_str().unwrap(), "build-db"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.toml"));
}

#[test]
fn cli_gradcheck_passes() {
    let o = keds(&["gradcheck", "--seeds", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains(" 0 failed"));
}

#[test]
fn unflagged_features_are_normalized_on_load() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("raw.kedb");
    let raw = keds_core::store::EmbeddingMatrix::new(2, vec![3.0, 4.0, 0.0, -2.0], false).unwrap();
    keds::kedb::save(&path, &raw).unwrap();
    let m = pipeline::load_features(&path).unwrap();
    assert!(m.is_normalized());
    assert_eq!(m.values(), &[0.6, 0.8, 0.0, -1.0]);
    let zero = keds_core::store::EmbeddingMatrix::new(2, vec![0.0, 0.0], false).unwrap();
    keds::kedb::save(&path, &zero).unwrap();
    assert!(pipeline::load_features(&path).unwrap_err().to_string().contains("raw.kedb"));
}
