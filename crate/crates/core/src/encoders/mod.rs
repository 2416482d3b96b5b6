//! Frozen encoders: file-backed embedding providers, the seeded token composer
//! that stands in for a frozen text encoder, prompt and template builders, and
//! the synthetic corpus generator.

mod composer;
pub mod synth;

pub use composer::{ComposerConfig, ComposerVars, FrozenComposer};

use alloc::sync::Arc;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::store::{EmbeddingMatrix, KnowledgeRecord};
use crate::{Error, Result};

/// Number of sequence positions a pseudo-word token occupies.
pub const PSEUDO_ROWS: usize = 3;

/// Token ids with a fixed meaning in the composer vocabulary.
pub mod vocab {
    pub const A: u32 = 1;
    pub const PHOTO: u32 = 2;
    pub const OF: u32 = 3;
    pub const WITH: u32 = 4;
    /// First id available to corpus-specific words.
    pub const FIRST_FREE: u32 = 16;
}

/// One sequence position: a vocabulary token or a pseudo-token row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenItem {
    #[serde(rename = "tok")]
    Token(u32),
    #[serde(rename = "slot")]
    Slot(usize),
}

/// Ordered token items fed to the composer.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(Vec<TokenItem>);

impl TokenSequence {
    pub fn new(items: Vec<TokenItem>) -> Self {
        TokenSequence(items)
    }

    pub fn from_tokens(tokens: &[u32]) -> Self {
        TokenSequence(tokens.iter().map(|&t| TokenItem::Token(t)).collect())
    }

    pub fn items(&self) -> &[TokenItem] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn push(&mut self, item: TokenItem) {
        self.0.push(item);
    }

    pub fn slot_count(&self) -> usize {
        self.0.iter().filter(|t| matches!(t, TokenItem::Slot(_))).count()
    }

    /// Positions holding pseudo slots, in sequence order.
    pub fn slot_positions(&self) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .filter_map(|(i, t)| matches!(t, TokenItem::Slot(_)).then_some(i))
            .collect()
    }

    /// The same sequence with every pseudo slot dropped.
    pub fn without_slots(&self) -> Self {
        TokenSequence(self.0.iter().copied().filter(|t| matches!(t, TokenItem::Token(_))).collect())
    }
}

/// `a photo of` followed by `pseudo_rows` slots.
pub fn make_prompt(pseudo_rows: usize) -> TokenSequence {
    let mut items = Vec::with_capacity(3 + pseudo_rows);
    items.extend([vocab::A, vocab::PHOTO, vocab::OF].map(TokenItem::Token));
    items.extend((0..pseudo_rows).map(TokenItem::Slot));
    TokenSequence(items)
}

/// Replaces the caption's subject span with `pseudo_rows` slots.
pub fn inject_span(caption: &KnowledgeRecord, pseudo_rows: usize) -> Result<TokenSequence> {
    let (start, end) = caption
        .subject_span
        .ok_or_else(|| Error::Mining(alloc::format!("caption {} has no subject span", caption.id)))?;
    caption.validate()?;
    let tokens = &caption.caption_tokens;
    let mut items = Vec::with_capacity(tokens.len() - (end - start) + pseudo_rows);
    items.extend(tokens[..start].iter().map(|&t| TokenItem::Token(t)));
    items.extend((0..pseudo_rows).map(TokenItem::Slot));
    items.extend(tokens[end..].iter().map(|&t| TokenItem::Token(t)));
    Ok(TokenSequence(items))
}

/// Read-only id → feature lookup over a stored matrix.
#[derive(Clone, Debug)]
pub struct EmbeddingProvider {
    matrix: Arc<EmbeddingMatrix>,
}

impl EmbeddingProvider {
    pub fn new(matrix: Arc<EmbeddingMatrix>) -> Self {
        EmbeddingProvider { matrix }
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

    pub fn matrix(&self) -> &Arc<EmbeddingMatrix> {
        &self.matrix
    }

    pub fn lookup(&self, id: usize) -> Result<&[f32]> {
        self.matrix.row(id).ok_or(Error::Lookup { what: "feature", id })
    }
}
