use alloc::sync::Arc;
use alloc::vec::Vec;

use super::{check_query, EmbeddingMatrix, Hit, TopK};
use crate::numeric::kernels::dot_lanes;
use crate::Result;

/// Exhaustive inner-product search over a shared matrix.
#[derive(Clone, Debug)]
pub struct FlatIndex {
    matrix: Arc<EmbeddingMatrix>,
}

impl FlatIndex {
    pub fn new(matrix: Arc<EmbeddingMatrix>) -> Self {
        FlatIndex { matrix }
    }

    pub fn matrix(&self) -> &Arc<EmbeddingMatrix> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    pub fn len(&self) -> usize {
        self.matrix.count()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.is_empty()
    }

    /// Exact top-`k` by inner product; returns `min(k, N)` hits.
    pub fn search(&self, query: &[f32], k: usize) -> Result<Vec<Hit>> {
        self.search_filtered(query, k, |_| true)
    }

    /// Exact top-`k` among the rows accepted by `keep`.
    pub fn search_filtered(&self, query: &[f32], k: usize, keep: impl Fn(usize) -> bool) -> Result<Vec<Hit>> {
        check_query(self.matrix.dim(), query)?;
        let mut top = TopK::new(k);
        for (id, row) in self.matrix.rows().enumerate() {
            if keep(id) {
                top.push(id, dot_lanes(row, query));
            }
        }
        Ok(top.into_sorted())
    }
}
