//! Composed retrieval with the trained streams, the reference baselines,
//! Recall@K and the ablation runner.

mod ablation;

pub use ablation::{
    ablation_sweep, apply_axis, Axis, AxisValue, Experiment, ReportRow, Setting, TrainSet, Workbench,
};

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::bkp::{KnowledgeContext, Knockout};
use crate::encoders::{FrozenComposer, TokenSequence, PSEUDO_ROWS};
use crate::numeric::kernels::dot_lanes;
use crate::numeric::{Graph, Tensor};
use crate::store::{normalize_row, rank_order, EmbeddingMatrix, Hit, KnowledgeBank};
use crate::trainer::Keds;
use crate::{Error, Result};

/// Tasks composed per graph.
pub const EVAL_CHUNK: usize = 64;

/// Recall cut-offs reported everywhere.
pub const RECALL_KS: [usize; 4] = [1, 5, 10, 50];

/// A reference image plus a modification, to be matched against candidates.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalTask {
    pub reference_id: usize,
    /// Modification text with pseudo slots where the reference goes.
    pub instruction: TokenSequence,
    pub candidate_ids: Vec<usize>,
    pub target_ids: Vec<usize>,
}

impl EvalTask {
    pub fn validate(&self, images: usize) -> Result<()> {
        if self.reference_id >= images {
            return Err(Error::Lookup { what: "reference image", id: self.reference_id });
        }
        if let Some(&c) = self.candidate_ids.iter().find(|&&c| c >= images) {
            return Err(Error::Lookup { what: "candidate image", id: c });
        }
        if self.target_ids.is_empty() || self.target_ids.iter().any(|t| !self.candidate_ids.contains(t)) {
            return Err(Error::Config(format!(
                "task on reference {} has targets outside its candidates",
                self.reference_id
            )));
        }
        if self.instruction.slot_count() != PSEUDO_ROWS {
            return Err(Error::Config(format!(
                "task on reference {} has {} pseudo slots",
                self.reference_id,
                self.instruction.slot_count()
            )));
        }
        Ok(())
    }
}

/// Which composed features feed the hybrid query.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Streams {
    #[serde(rename = "M")]
    M,
    #[serde(rename = "A")]
    A,
    #[default]
    #[serde(rename = "both")]
    Both,
}

impl core::str::FromStr for Streams {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "M" | "m" => Ok(Streams::M),
            "A" | "a" => Ok(Streams::A),
            "both" => Ok(Streams::Both),
            _ => Err(Error::Config(format!("unknown streams {s:?}, expected M, A or both"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    /// Weight of the contrastive stream.
    pub alpha: f64,
    pub top_k: usize,
    pub streams: Streams,
    pub knockout: Knockout,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            alpha: 0.5,
            top_k: 16,
            streams: Streams::Both,
            knockout: Knockout::default(),
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} is outside [0, 1]", self.alpha)));
        }
        if self.top_k == 0 {
            return Err(Error::Config("inference top_k must be at least 1".into()));
        }
        Ok(())
    }

    /// `α` after stream selection: `M` alone is `α = 1`, `A` alone is `α = 0`.
    pub fn effective_alpha(&self) -> f64 {
        match self.streams {
            Streams::M => 1.0,
            Streams::A => 0.0,
            Streams::Both => self.alpha,
        }
    }
}

/// `normalize(α·m + (1 − α)·a)`.
pub fn hybrid_feature(m: &[f32], a: &[f32], alpha: f64) -> Result<Vec<f32>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} is outside [0, 1]")));
    }
    if m.len() != a.len() {
        return Err(Error::dim("hybrid_feature", &[m.len()], &[a.len()]));
    }
    let wa = alpha as f32;
    let wb = (1.0 - alpha) as f32;
    let mut v: Vec<f32> = m.iter().zip(a).map(|(&x, &y)| wa * x + wb * y).collect();
    normalize_row(&mut v)?;
    Ok(v)
}

/// Candidates sorted by inner product with `query`, best first, ties by id.
pub fn rank_candidates(query: &[f32], candidates: &[usize], features: &EmbeddingMatrix) -> Result<Vec<usize>> {
    if query.len() != features.dim() {
        return Err(Error::dim("rank_candidates", &[query.len()], &[features.dim()]));
    }
    let mut hits = candidates
        .iter()
        .map(|&id| {
            let row = features.row(id).ok_or(Error::Lookup { what: "candidate image", id })?;
            Ok(Hit { id, score: dot_lanes(row, query) + 0.0 })
        })
        .collect::<Result<Vec<_>>>()?;
    hits.sort_by(rank_order);
    Ok(hits.into_iter().map(|h| h.id).collect())
}

/// Fraction of tasks with a target among the first `k` ranked ids.
pub fn recall_at_k(rankings: &[Vec<usize>], tasks: &[EvalTask], k: usize) -> f64 {
    if tasks.is_empty() {
        return 0.0;
    }
    let hits = rankings
        .iter()
        .zip(tasks)
        .filter(|(r, t)| r.iter().take(k).any(|id| t.target_ids.contains(id)))
        .count();
    hits as f64 / tasks.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallRow {
    #[serde(rename = "R1")]
    pub r1: f64,
    #[serde(rename = "R5")]
    pub r5: f64,
    #[serde(rename = "R10")]
    pub r10: f64,
    #[serde(rename = "R50")]
    pub r50: f64,
    pub n_tasks: usize,
}

impl RecallRow {
    pub fn from_rankings(rankings: &[Vec<usize>], tasks: &[EvalTask]) -> Self {
        let [r1, r5, r10, r50] = RECALL_KS.map(|k| recall_at_k(rankings, tasks, k));
        RecallRow {
            r1,
            r5,
            r10,
            r50,
            n_tasks: tasks.len(),
        }
    }
}

/// Scores every task's query against its candidates.
pub fn evaluate_queries(queries: &[Vec<f32>], tasks: &[EvalTask], images: &EmbeddingMatrix) -> Result<RecallRow> {
    let rankings = queries
        .iter()
        .zip(tasks)
        .map(|(q, t)| rank_candidates(q, &t.candidate_ids, images))
        .collect::<Result<Vec<_>>>()?;
    Ok(RecallRow::from_rankings(&rankings, tasks))
}

/// Per-task composed features of both streams.
#[derive(Clone, Debug, PartialEq)]
pub struct ComposedQueries {
    pub m: Vec<Vec<f32>>,
    pub a: Vec<Vec<f32>>,
}

impl ComposedQueries {
    pub fn hybrid(&self, alpha: f64) -> Result<Vec<Vec<f32>>> {
        self.m.iter().zip(&self.a).map(|(m, a)| hybrid_feature(m, a, alpha)).collect()
    }
}

/// Projects each task's reference image with both streams and composes the
/// pseudo tokens into the task instruction.
pub fn compose_queries(
    model: &Keds,
    bank: &KnowledgeBank,
    images: &EmbeddingMatrix,
    tasks: &[EvalTask],
    top_k: usize,
    knockout: Knockout,
) -> Result<ComposedQueries> {
    let d = images.dim();
    let mut out = ComposedQueries {
        m: Vec::with_capacity(tasks.len()),
        a: Vec::with_capacity(tasks.len()),
    };
    for chunk in tasks.chunks(EVAL_CHUNK) {
        let mut refs = Vec::with_capacity(chunk.len() * d);
        let mut contexts: Vec<KnowledgeContext> = Vec::with_capacity(chunk.len());
        for t in chunk {
            let row = images.row(t.reference_id).ok_or(Error::Lookup {
                what: "reference image",
                id: t.reference_id,
            })?;
            refs.extend_from_slice(row);
            contexts.push(bank.context(row, top_k)?);
        }
        let ctx: Vec<&KnowledgeContext> = contexts.iter().collect();
        let seqs: Vec<&TokenSequence> = chunk.iter().map(|t| &t.instruction).collect();
        let refs = Tensor::matrix(chunk.len(), d, refs)?;
        for (params, dest) in [(&model.phi_m, &mut out.m), (&model.phi_a, &mut out.a)] {
            let mut g = Graph::new();
            let cv = model.composer.bind(&mut g);
            let vars = params.bind(&mut g, false);
            let x = g.constant(refs.clone());
            let v = params.project_batch(&mut g, &vars, x, &ctx, knockout)?;
            let f = model.composer.compose(&mut g, &cv, &seqs, Some(v), PSEUDO_ROWS)?;
            let t = g.value(f);
            dest.extend((0..t.rows()).map(|r| t.row(r).to_vec()));
        }
    }
    Ok(out)
}

/// Reference retrieval methods that use no trained projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    ImageOnly,
    TextOnly,
    ImageText,
}

impl Baseline {
    pub const ALL: [Baseline; 3] = [Baseline::ImageOnly, Baseline::TextOnly, Baseline::ImageText];

    pub fn name(self) -> &'static str {
        match self {
            Baseline::ImageOnly => "image_only",
            Baseline::TextOnly => "text_only",
            Baseline::ImageText => "image_text",
        }
    }
}

/// Queries of the three baselines: the reference image feature, the
/// instruction text alone, and the renormalized average of the two.
pub fn baseline_queries(
    composer: &FrozenComposer,
    images: &EmbeddingMatrix,
    tasks: &[EvalTask],
) -> Result<[(Baseline, Vec<Vec<f32>>); 3]> {
    let mut image = Vec::with_capacity(tasks.len());
    for t in tasks {
        let row = images.row(t.reference_id).ok_or(Error::Lookup {
            what: "reference image",
            id: t.reference_id,
        })?;
        let mut v = row.to_vec();
        normalize_row(&mut v)?;
        image.push(v);
    }
    let texts: Vec<TokenSequence> = tasks.iter().map(|t| t.instruction.without_slots()).collect();
    let refs: Vec<&TokenSequence> = texts.iter().collect();
    let text = composer.encode_texts(&refs, EVAL_CHUNK)?;
    let both = image
        .iter()
        .zip(&text)
        .map(|(i, t)| {
            let mut v: Vec<f32> = i.iter().zip(t).map(|(a, b)| a + b).collect();
            normalize_row(&mut v)?;
            Ok(v)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok([
        (Baseline::ImageOnly, image),
        (Baseline::TextOnly, text),
        (Baseline::ImageText, both),
    ])
}

pub fn baselines(
    composer: &FrozenComposer,
    images: &EmbeddingMatrix,
    tasks: &[EvalTask],
) -> Result<Vec<(Baseline, RecallRow)>> {
    baseline_queries(composer, images, tasks)?
        .into_iter()
        .map(|(b, q)| Ok((b, evaluate_queries(&q, tasks, images)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn task(target: usize, candidates: Vec<usize>) -> EvalTask {
        EvalTask {
            reference_id: 0,
            instruction: crate::encoders::make_prompt(3),
            candidate_ids: candidates,
            target_ids: vec![target],
        }
    }

    #[test]
    fn hybrid_endpoints_and_midpoint() {
        let m = [0.0f32, 1.0];
        let a = [1.0f32, 0.0];
        assert_eq!(hybrid_feature(&m, &a, 1.0).unwrap(), vec![0.0, 1.0]);
        assert_eq!(hybrid_feature(&m, &a, 0.0).unwrap(), vec![1.0, 0.0]);
        let h = hybrid_feature(&[1.0, 0.0], &[0.0, 1.0], 0.5).unwrap();
        assert!((h[0] - 0.7071).abs() < 1e-4 && (h[1] - 0.7071).abs() < 1e-4);
        assert!(matches!(hybrid_feature(&m, &a, 1.5), Err(Error::Config(_))));
        assert!(matches!(hybrid_feature(&m, &a, -0.1), Err(Error::Config(_))));
    }

    #[test]
    fn recall_threshold() {
        let tasks = [task(6, (0..10).collect())];
        let ranking = vec![(0..10).collect::<Vec<_>>()];
        assert_eq!(recall_at_k(&ranking, &tasks, 5), 0.0);
        assert_eq!(recall_at_k(&ranking, &tasks, 10), 1.0);
        assert_eq!(recall_at_k(&[vec![6, 0]], &tasks, 1), 1.0);
    }

    #[test]
    fn ties_rank_lower_id_first() {
        let m = EmbeddingMatrix::new(2, vec![0.6, 0.8, 1.0, 0.0, 0.6, 0.8], true).unwrap();
        assert_eq!(rank_candidates(&[0.6, 0.8], &[2, 1, 0], &m).unwrap(), vec![0, 2, 1]);
        assert!(matches!(rank_candidates(&[0.6, 0.8], &[3], &m), Err(Error::Lookup { .. })));
    }

    #[test]
    fn streams_parse_and_pin_alpha() {
        assert_eq!("M".parse::<Streams>().unwrap(), Streams::M);
        assert_eq!("both".parse::<Streams>().unwrap(), Streams::Both);
        assert!("x".parse::<Streams>().is_err());
        let c = InferenceConfig {
            streams: Streams::M,
            alpha: 0.3,
            ..Default::default()
        };
        assert_eq!(c.effective_alpha(), 1.0);
    }

    #[test]
    fn task_validation() {
        let mut t = task(3, vec![1, 2, 3]);
        t.validate(4).unwrap();
        assert!(t.validate(3).is_err());
        t.target_ids = vec![0];
        assert!(t.validate(4).is_err());
    }
}
