//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. The desk run is shared by criteria 4 to 7.

use std::path::Path;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use keds::{checkpoint, jsonl, pipeline, RunConfig};
use keds_core::bkp::{KnowledgeContext, Knockout};
use keds_core::encoders::FrozenComposer;
use keds_core::evalkit::{Axis, AxisValue, RecallRow, ReportRow};
use keds_core::numeric::{Graph, Real, Tensor};
use keds_core::rng;
use keds_core::store::{EmbeddingMatrix, FlatIndex, IvfIndex};
use keds_core::trainer::{contrastive_loss, registration_loss, Trainer};
use keds_core::gradcheck;

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Outcome {
            passed,
            detail: detail.into(),
        }
    }
}

fn report(id: usize, name: &str, o: &Outcome, took: Duration) -> bool {
    let verdict = if o.passed { "PASS" } else { "FAIL" };
    println!("criterion {id} [{verdict}] {name}: {} ({:.1} s)", o.detail, took.as_secs_f64());
    o.passed
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut results = Vec::new();
    let mut covered = true;
    for case in gradcheck::CASES {
        let before = results.len();
        for seed in 0..10 {
            results.extend(gradcheck::run_case(case, seed).expect("gradient case runs"));
        }
        covered &= results.len() - before >= 10;
    }
    let took = start.elapsed();
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{}#{}", r.name, r.seed))
        .collect();
    let worst = results.iter().map(|r| r.rel_error).fold(0.0, f64::max);
    Outcome::new(
        failed.is_empty() && covered && took < Duration::from_secs(60),
        format!(
            "{} checks over {} cases x 10 seeds, failed {:?}, worst relative error {worst:.2e} (< {:.0e}), {:.1} s (< 60 s)",
            results.len(),
            gradcheck::CASES.len(),
            failed,
            gradcheck::TOLERANCE,
            took.as_secs_f64()
        ),
    )
}

fn unit_rows(n: usize, dim: usize, seed: u64, stream: &str) -> EmbeddingMatrix {
    let mut r = rng::stream(seed, stream);
    EmbeddingMatrix::normalized_from(dim, (0..n * dim).map(|_| rng::normal(&mut r)).collect()).unwrap()
}

/// Full sort of f64 inner products, ties by id.
fn brute_force(m: &EmbeddingMatrix, q: &[f32], k: usize) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = m
        .rows()
        .enumerate()
        .map(|(id, row)| (row.iter().zip(q).map(|(&a, &b)| a as f64 * b as f64).sum(), id))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.into_iter().take(k).map(|(_, id)| id).collect()
}

const IVF_PARTITIONS: usize = 4096;

fn index() -> Outcome {
    let (n, d, k) = (100_000, 64, 16);
    let m = Arc::new(unit_rows(n, d, 1, "acceptance.store"));
    let queries = unit_rows(100, d, 1, "acceptance.queries");
    let flat = FlatIndex::new(m.clone());
    let ivf = IvfIndex::build(m.clone(), IVF_PARTITIONS, 10, 3).unwrap();
    let nprobe = IVF_PARTITIONS.div_ceil(4);
    let (mut exact, mut full, mut recall) = (0, 0, 0.0);
    for q in queries.rows() {
        let f: Vec<usize> = flat.search(q, k).unwrap().iter().map(|h| h.id).collect();
        exact += (f == brute_force(&m, q, k)) as usize;
        full += (ivf.search(q, k, IVF_PARTITIONS).unwrap() == flat.search(q, k).unwrap()) as usize;
        let approx = ivf.search(q, k, nprobe).unwrap();
        recall += approx.iter().filter(|h| f.contains(&h.id)).count() as f64 / k as f64;
    }
    recall /= 100.0;
    Outcome::new(
        exact == 100 && full == 100 && recall >= 0.9,
        format!(
            "flat equals brute force on {exact}/100 queries; IVF P={IVF_PARTITIONS} nprobe={nprobe} recall {recall:.4} (>= 0.9); nprobe=P equals flat on {full}/100"
        ),
    )
}

fn uniform_contrastive<F: Real>(b: usize) -> f64 {
    let mut g = Graph::<F>::new();
    let rows = Tensor::from_fn(b, 4, |_, c| F::of([0.3, -0.1, 0.8, 0.2][c])).unwrap();
    let i = g.constant(rows.clone());
    let t = g.constant(rows);
    let l = contrastive_loss(&mut g, i, t, F::of(100.0)).unwrap();
    g.value(l).data()[0].to_f64()
}

fn registration(beta: f32, inputs: &[Tensor<f32>; 4]) -> (f32, f32, f32) {
    let mut g = Graph::<f32>::new();
    let v: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let terms = registration_loss(&mut g, v[0], v[1], v[2], v[3], beta).unwrap();
    let s = |x| g.value(x).data()[0];
    (s(terms.total), s(terms.cos), s(terms.sup))
}

fn losses() -> Outcome {
    let mut worst_c: f64 = 0.0;
    for b in [2usize, 4, 8] {
        let target = 2.0 * (b as f64).ln();
        worst_c = worst_c
            .max((uniform_contrastive::<f32>(b) - target).abs())
            .max((uniform_contrastive::<f64>(b) - target).abs());
    }
    let mut r = rng::stream(7, "acceptance.losses");
    let inputs: [Tensor<f32>; 4] = std::array::from_fn(|_| Tensor::from_fn(8, 64, |_, _| rng::normal(&mut r)).unwrap());
    let (at0, cos, _) = registration(0.0, &inputs);
    let bitwise = at0.to_bits() == cos.to_bits();
    let (at1, _, _) = registration(1.0, &inputs);
    let mut worst_affine: f64 = 0.0;
    for beta in [0.0f32, 0.5, 1.0, 2.0] {
        let (total, _, _) = registration(beta, &inputs);
        let line = at0 as f64 + beta as f64 * (at1 as f64 - at0 as f64);
        worst_affine = worst_affine.max((total as f64 - line).abs());
    }
    Outcome::new(
        worst_c < 1e-6 && bitwise && worst_affine < 1e-7,
        format!(
            "max |L_c - 2 ln B| {worst_c:.2e} (< 1e-6); L_r(beta=0) bitwise L_cos: {bitwise}; max affine deviation {worst_affine:.2e} (< 1e-7)"
        ),
    )
}

fn desk_config(out: &Path) -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    let mut cfg = RunConfig::load(&path).unwrap();
    cfg.store.out = out.to_path_buf();
    cfg.eval.threads = 1;
    cfg.validate().unwrap();
    cfg
}

struct DeskRun {
    cfg: RunConfig,
    took: Duration,
    rows: Vec<ReportRow>,
    sweep: Vec<ReportRow>,
}

fn desk_run(out: &Path) -> DeskRun {
    let cfg = desk_config(out);
    let start = Instant::now();
    pipeline::gen_synth(&cfg).unwrap();
    pipeline::build_db(&cfg).unwrap();
    pipeline::mine(&cfg).unwrap();
    pipeline::train(&cfg, None).unwrap();
    let rows = pipeline::eval(&cfg, None).unwrap();
    let took = start.elapsed();
    let alphas: Vec<AxisValue> = [0.0, 0.25, 0.5, 0.75, 1.0].into_iter().map(AxisValue::Number).collect();
    let sweep = pipeline::sweep(&cfg, Axis::Alpha, &alphas).unwrap();
    DeskRun { cfg, took, rows, sweep }
}

fn psi_alone(model: &keds_core::bkp::BkpParams, image: &[f32]) -> Vec<f32> {
    let mut g = Graph::new();
    let psi = model.psi.bind(&mut g, false);
    let x = g.constant(Tensor::matrix(1, image.len(), image.to_vec()).unwrap());
    let y = psi.forward(&mut g, x).unwrap();
    g.value(y).data().to_vec()
}

fn structure(run: &DeskRun) -> Outcome {
    let cfg = &run.cfg;
    let ws = pipeline::Workspace::new(cfg);
    let file = checkpoint::load(&ws.model()).unwrap();
    let data = pipeline::train_data(cfg).unwrap();
    let images = data.images().clone();
    let (mut passthrough, mut worst_perm) = (0, 0.0f32);
    let probes = 50;
    for id in (0..images.count()).step_by(images.count() / probes).take(probes) {
        let image = images.row(id).unwrap();
        let ctx = data.context(id).unwrap();
        let k = ctx.len();
        let perm: Vec<usize> = (0..k).map(|i| (i * 7 + 3) % k).collect();
        let take = |t: &Tensor<f32>| {
            let d = t.shape()[1];
            Tensor::matrix(k, d, perm.iter().flat_map(|&i| t.row(i).to_vec()).collect()).unwrap()
        };
        let shuffled = KnowledgeContext::new(
            take(ctx.images()),
            take(ctx.captions()),
            perm.iter().map(|&i| ctx.ids()[i]).collect(),
        )
        .unwrap();
        for phi in [&file.checkpoint.phi_m, &file.checkpoint.phi_a] {
            let token = phi.project(image, &ctx, Knockout::default()).unwrap();
            let same = token
                .mapped_image()
                .iter()
                .zip(psi_alone(phi, image))
                .all(|(a, b)| a.to_bits() == b.to_bits());
            passthrough += same as usize;
            let other = phi.project(image, &shuffled, Knockout::default()).unwrap();
            for (a, b) in token.rows.data().iter().zip(other.rows.data()) {
                worst_perm = worst_perm.max((a - b).abs());
            }
        }
    }
    let fresh = FrozenComposer::new(cfg.model.composer, cfg.seed).unwrap();
    let trained = pipeline::load_model(cfg, &ws.model()).unwrap();
    let frozen = fresh.named_tensors().len() == trained.composer.named_tensors().len()
        && fresh
            .named_tensors()
            .iter()
            .zip(trained.composer.named_tensors())
            .all(|((na, a), (nb, b))| {
                na == &nb && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            });
    Outcome::new(
        file.checkpoint.step == 2000 && passthrough == 2 * probes && worst_perm < 1e-6 && frozen,
        format!(
            "after {} steps row 0 equals psi(i) bitwise on {passthrough}/{} projections; max permutation change {worst_perm:.2e} (< 1e-6); composer bitwise unchanged: {frozen}",
            file.checkpoint.step,
            2 * probes
        ),
    )
}

fn recall_of<'a>(rows: &'a [ReportRow], axis: &str, value: &AxisValue) -> &'a RecallRow {
    &rows.iter().find(|r| r.axis == axis && &r.value == value).unwrap().recall
}

fn desk(run: &DeskRun) -> Outcome {
    let keds = recall_of(&run.rows, "alpha", &AxisValue::Number(0.5));
    let mut beats = true;
    let mut parts = vec![format!("alpha=0.5 R1 {:.3} R10 {:.3} (>= 0.7)", keds.r1, keds.r10)];
    for name in ["image_only", "text_only", "image_text"] {
        let b = recall_of(&run.rows, "baseline", &AxisValue::Name(name.into()));
        beats &= keds.r1 > b.r1 && keds.r10 > b.r10;
        parts.push(format!("{name} R1 {:.3} R10 {:.3}", b.r1, b.r10));
    }
    let in_time = run.took < Duration::from_secs(600);
    parts.push(format!("pipeline {:.0} s (< 600 s)", run.took.as_secs_f64()));
    Outcome::new(keds.r10 >= 0.7 && beats && in_time, parts.join("; "))
}

fn hybrid(run: &DeskRun) -> Outcome {
    let r10 = |a: f64| recall_of(&run.sweep, "alpha", &AxisValue::Number(a)).r10;
    let mixed = [0.25, 0.5, 0.75].map(r10).into_iter().fold(f64::MIN, f64::max);
    let single = r10(0.0).max(r10(1.0));
    Outcome::new(
        mixed >= single,
        format!(
            "R10 by alpha 0/0.25/0.5/0.75/1: {:.3}/{:.3}/{:.3}/{:.3}/{:.3}; best mixed {mixed:.3} >= best single {single:.3}",
            r10(0.0),
            r10(0.25),
            r10(0.5),
            r10(0.75),
            r10(1.0)
        ),
    )
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

/// Reruns the desk pipeline in a second directory, driving the trainer by
/// hand so its state can be captured ten steps past a saved checkpoint.
fn determinism(run: &DeskRun, out: &Path) -> Outcome {
    let a = pipeline::Workspace::new(&run.cfg);
    let cfg = desk_config(out);
    let b = pipeline::Workspace::new(&cfg);
    pipeline::gen_synth(&cfg).unwrap();
    pipeline::build_db(&cfg).unwrap();
    pipeline::mine(&cfg).unwrap();
    let inputs = [
        (a.train_images(), b.train_images()),
        (a.train_captions(), b.train_captions()),
        (a.db_images(), b.db_images()),
        (a.db_index(), b.db_index()),
        (a.eval_images(), b.eval_images()),
        (a.tasks(), b.tasks()),
        (a.triplets(), b.triplets()),
    ];
    let same_inputs = inputs.iter().all(|(x, y)| read(x) == read(y));

    let data = pipeline::train_data(&cfg).unwrap();
    let config = cfg.train_config();
    let total = config.total_steps(data.triplets().len());
    let mut trainer = Trainer::new(config, pipeline::composer(&cfg).unwrap(), cfg.seed, total).unwrap();
    let mut log = jsonl::JsonlWriter::new(Vec::new());
    let resume_at = 1000;
    let mut at_resume_plus_10 = None;
    while !trainer.is_finished() {
        log.write(&trainer.train_step(&data).unwrap()).unwrap();
        if trainer.step_count() == resume_at + 10 {
            at_resume_plus_10 = Some(trainer.checkpoint());
        }
    }
    let log = log.into_inner();
    let same_log = log == read(&a.train_log());
    checkpoint::save(&b.model(), &pipeline::snapshot(&cfg, &trainer)).unwrap();
    let same_model = read(&b.model()) == read(&a.model());
    pipeline::eval(&cfg, None).unwrap();
    let same_report = read(&b.report()) == read(&a.report());

    let saved = checkpoint::load(&a.step_checkpoint(resume_at)).unwrap();
    let mut resumed = Trainer::resume(saved.checkpoint, pipeline::composer(&cfg).unwrap()).unwrap();
    let mut tail = jsonl::JsonlWriter::new(Vec::new());
    for _ in 0..10 {
        tail.write(&resumed.train_step(&data).unwrap()).unwrap();
    }
    let tail = tail.into_inner();
    let lines: Vec<&[u8]> = log.split_inclusive(|&c| c == b'\n').collect();
    let expected: Vec<u8> = lines[resume_at as usize..resume_at as usize + 10].concat();
    let same_resume = tail == expected && Some(resumed.checkpoint()) == at_resume_plus_10;

    Outcome::new(
        same_inputs && same_log && same_model && same_report && same_resume,
        format!(
            "rerun matches bitwise: corpus and index {same_inputs}, training log {same_log}, model {same_model}, eval report {same_report}; reload at step {resume_at} matches the uninterrupted run for 10 steps: {same_resume}"
        ),
    )
}

fn main() -> ExitCode {
    let mut all = true;
    let timed = |f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let o = f();
        (o, start.elapsed())
    };
    let (o, t) = timed(&mut gradients);
    all &= report(1, "gradient suite", &o, t);
    let (o, t) = timed(&mut index);
    all &= report(2, "index correctness", &o, t);
    let (o, t) = timed(&mut losses);
    all &= report(3, "loss identities", &o, t);

    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let run = desk_run(&dir.path().join("desk"));
    let desk_time = start.elapsed();
    let (o, t) = timed(&mut || structure(&run));
    all &= report(4, "structural invariants", &o, t);
    all &= report(5, "desk run", &desk(&run), desk_time);
    all &= report(6, "hybrid sweep", &hybrid(&run), Duration::ZERO);
    let (o, t) = timed(&mut || determinism(&run, &dir.path().join("rerun")));
    all &= report(7, "determinism", &o, t);

    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
