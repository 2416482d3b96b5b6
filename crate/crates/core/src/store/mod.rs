//! The knowledge database: embedding banks with caption metadata and exact or
//! inverted-file top-K inner-product search.
//!
//! Results are ordered by descending score with ties broken by ascending id.
//! Indices return raw neighbors; excluding a query's own id is up to the caller.

mod bank;
mod flat;
mod ivf;

pub use bank::{KnowledgeBank, SearchIndex};
pub use flat::FlatIndex;
pub use ivf::{IvfIndex, IvfParams};

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::numeric::{kernels::dot_lanes, Tensor};
use crate::{Error, Result};

/// Allowed deviation from unit norm for rows of a normalized matrix.
pub const UNIT_NORM_TOLERANCE: f32 = 1e-5;

/// Default number of retrieved knowledge items.
pub const DEFAULT_TOP_K: usize = 16;

/// `count × dim` row-major block of embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    values: Vec<f32>,
    normalized: bool,
}

impl EmbeddingMatrix {
    /// Wraps existing values. With `normalized` set, every row must already
    /// have unit norm.
    pub fn new(dim: usize, values: Vec<f32>, normalized: bool) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidTensor("embedding dim must be positive".into()));
        }
        if values.len() % dim != 0 {
            return Err(Error::InvalidTensor(format!(
                "{} values do not fill rows of width {dim}",
                values.len()
            )));
        }
        let m = EmbeddingMatrix {
            dim,
            values,
            normalized,
        };
        if normalized {
            for (id, row) in m.rows().enumerate() {
                let n = num_traits::Float::sqrt(dot_lanes(row, row));
                if !((n - 1.0).abs() <= UNIT_NORM_TOLERANCE) {
                    return Err(Error::InvalidTensor(format!(
                        "row {id} has norm {n}, expected a unit row"
                    )));
                }
            }
        }
        Ok(m)
    }

    /// Scales every row to unit norm and sets the normalized flag.
    pub fn normalized_from(dim: usize, mut values: Vec<f32>) -> Result<Self> {
        if dim == 0 || values.len() % dim != 0 {
            return Self::new(dim, values, false);
        }
        for row in values.chunks_mut(dim) {
            normalize_row(row)?;
        }
        Ok(EmbeddingMatrix {
            dim,
            values,
            normalized: true,
        })
    }

    pub fn empty(dim: usize) -> Self {
        EmbeddingMatrix {
            dim,
            values: Vec::new(),
            normalized: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn row(&self, id: usize) -> Option<&[f32]> {
        self.values.get(id * self.dim..(id + 1) * self.dim)
    }

    pub fn rows(&self) -> core::slice::ChunksExact<'_, f32> {
        self.values.chunks_exact(self.dim)
    }

    /// Copies the given rows, in order, into a new matrix.
    pub fn select(&self, ids: &[usize]) -> Result<Self> {
        let mut values = Vec::with_capacity(ids.len() * self.dim);
        for &id in ids {
            let row = self.row(id).ok_or(Error::Lookup { what: "embedding row", id })?;
            values.extend_from_slice(row);
        }
        Ok(EmbeddingMatrix {
            dim: self.dim,
            values,
            normalized: self.normalized,
        })
    }

    /// First `n` rows (all rows when `n` exceeds the count).
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.count());
        EmbeddingMatrix {
            dim: self.dim,
            values: self.values[..n * self.dim].to_vec(),
            normalized: self.normalized,
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor<f32>> {
        Tensor::matrix(self.count(), self.dim, self.values.clone())
    }
}

pub(crate) fn normalize_row(row: &mut [f32]) -> Result<()> {
    let n = num_traits::Float::sqrt(dot_lanes(row, row));
    if !(n as f64 >= crate::numeric::NORM_EPS) {
        return Err(Error::DegenerateVector {
            norm: n as f64,
            eps: crate::numeric::NORM_EPS,
        });
    }
    for x in row.iter_mut() {
        *x /= n;
    }
    Ok(())
}

/// Caption metadata for one row of the knowledge database.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeRecord {
    pub id: usize,
    pub caption_tokens: Vec<u32>,
    /// Half-open token interval `[start, end)` of the caption's subject phrase.
    pub subject_span: Option<(usize, usize)>,
    #[serde(default)]
    pub text: Option<String>,
}

impl KnowledgeRecord {
    pub fn validate(&self) -> Result<()> {
        if let Some((start, end)) = self.subject_span {
            if !(start < end && end <= self.caption_tokens.len()) {
                return Err(Error::InvalidTensor(format!(
                    "record {}: subject span [{start}, {end}) is not inside {} tokens",
                    self.id,
                    self.caption_tokens.len()
                )));
            }
        }
        Ok(())
    }
}

/// One search result.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub id: usize,
    pub score: f32,
}

/// Descending score, then ascending id.
pub fn rank_order(a: &Hit, b: &Hit) -> Ordering {
    b.score.total_cmp(&a.score).then(a.id.cmp(&b.id))
}

/// Keeps the best `k` hits seen so far, sorted by [`rank_order`].
pub(crate) struct TopK {
    k: usize,
    hits: Vec<Hit>,
}

impl TopK {
    pub fn new(k: usize) -> Self {
        TopK {
            k,
            hits: Vec::with_capacity(k.min(1024) + 1),
        }
    }

    #[inline]
    pub fn push(&mut self, id: usize, score: f32) {
        if self.k == 0 {
            return;
        }
        // +0.0 folds a negative zero into positive zero so the two compare equal.
        let hit = Hit { id, score: score + 0.0 };
        if self.hits.len() == self.k {
            let worst = self.hits[self.k - 1];
            if rank_order(&hit, &worst) != Ordering::Less {
                return;
            }
            self.hits.pop();
        }
        let pos = self
            .hits
            .partition_point(|h| rank_order(h, &hit) == Ordering::Less);
        self.hits.insert(pos, hit);
    }

    pub fn into_sorted(self) -> Vec<Hit> {
        self.hits
    }
}

fn check_query(dim: usize, query: &[f32]) -> Result<()> {
    if query.len() != dim {
        return Err(Error::dim("search", &[dim], &[query.len()]));
    }
    Ok(())
}
