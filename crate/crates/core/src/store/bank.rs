use alloc::format;
use alloc::sync::Arc;
use alloc::vec::Vec;

use super::{EmbeddingMatrix, FlatIndex, Hit, IvfIndex};
use crate::bkp::KnowledgeContext;
use crate::{Error, Result};

/// Exact or inverted-file search over the image bank.
#[derive(Clone, Debug)]
pub enum SearchIndex {
    Flat(FlatIndex),
    Ivf { index: IvfIndex, nprobe: usize },
}

impl SearchIndex {
    pub fn search(&self, query: &[f32], k: usize) -> Result<Vec<Hit>> {
        match self {
            SearchIndex::Flat(f) => f.search(query, k),
            SearchIndex::Ivf { index, nprobe } => index.search(query, k, *nprobe),
        }
    }

    pub fn matrix(&self) -> &Arc<EmbeddingMatrix> {
        match self {
            SearchIndex::Flat(f) => f.matrix(),
            SearchIndex::Ivf { index, .. } => index.matrix(),
        }
    }
}

/// Paired image and caption banks searched by image feature.
///
/// Row `r` of the caption bank describes row `r` of the image bank.
#[derive(Clone, Debug)]
pub struct KnowledgeBank {
    images: Arc<EmbeddingMatrix>,
    captions: Arc<EmbeddingMatrix>,
    index: SearchIndex,
}

impl KnowledgeBank {
    pub fn new(images: Arc<EmbeddingMatrix>, captions: Arc<EmbeddingMatrix>, index: SearchIndex) -> Result<Self> {
        if images.count() != captions.count() || images.dim() != captions.dim() {
            return Err(Error::Config(format!(
                "image bank {}×{} and caption bank {}×{} do not pair up",
                images.count(),
                images.dim(),
                captions.count(),
                captions.dim()
            )));
        }
        if !Arc::ptr_eq(index.matrix(), &images) && **index.matrix() != *images {
            return Err(Error::Config("index is not built over the image bank".into()));
        }
        Ok(KnowledgeBank {
            images,
            captions,
            index,
        })
    }

    /// Bank with an exact index.
    pub fn flat(images: Arc<EmbeddingMatrix>, captions: Arc<EmbeddingMatrix>) -> Result<Self> {
        let index = SearchIndex::Flat(FlatIndex::new(images.clone()));
        Self::new(images, captions, index)
    }

    /// Exact bank over the first `n` rows.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        Self::flat(Arc::new(self.images.head(n)), Arc::new(self.captions.head(n)))
    }

    pub fn len(&self) -> usize {
        self.images.count()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.images.dim()
    }

    pub fn images(&self) -> &Arc<EmbeddingMatrix> {
        &self.images
    }

    pub fn captions(&self) -> &Arc<EmbeddingMatrix> {
        &self.captions
    }

    pub fn index(&self) -> &SearchIndex {
        &self.index
    }

    /// Ids of the `k` bank rows closest to the query image feature.
    pub fn retrieve(&self, query: &[f32], k: usize) -> Result<Vec<usize>> {
        Ok(self.index.search(query, k)?.into_iter().map(|h| h.id).collect())
    }

    /// Retrieves `k` items and gathers their image and caption features.
    pub fn context(&self, query: &[f32], k: usize) -> Result<KnowledgeContext> {
        let ids = self.retrieve(query, k)?;
        self.context_from_ids(&ids)
    }

    pub fn context_from_ids(&self, ids: &[usize]) -> Result<KnowledgeContext> {
        if ids.is_empty() {
            return Err(Error::EmptyContext);
        }
        let images = self.images.select(ids)?.to_tensor()?;
        let captions = self.captions.select(ids)?.to_tensor()?;
        KnowledgeContext::new(images, captions, ids.to_vec())
    }
}
