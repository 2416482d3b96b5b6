//! Synthetic corpus with known ground truth.
//!
//! Every item carries a vector of binary attributes. The first
//! `subject_attributes` of them form the subject phrase of its caption and the
//! rest are context words, each mentioned with probability `context_keep`.
//! Image features are composer encodings of the canonical full description
//! plus isotropic noise, so image and caption features share one space the way
//! a contrastively pretrained dual encoder's do. Composed-retrieval tasks flip
//! one attribute of a reference item; the gallery holds one clean item per
//! attribute combination, which makes every target unique.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{vocab, FrozenComposer, TokenItem, TokenSequence, PSEUDO_ROWS};
use crate::evalkit::EvalTask;
use crate::store::{EmbeddingMatrix, KnowledgeRecord};
use crate::{rng, Error, Result};

const ENCODE_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Training pairs.
    pub items: usize,
    /// Knowledge database pairs, drawn independently of the training pairs.
    pub database: usize,
    pub attributes: usize,
    pub subject_attributes: usize,
    /// Composed-retrieval tasks, one held-out reference image each.
    pub tasks: usize,
    pub image_noise: f32,
    pub caption_noise: f32,
    pub context_keep: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            items: 5000,
            database: 4000,
            attributes: 8,
            subject_attributes: 6,
            tasks: 500,
            image_noise: 0.5,
            caption_noise: 0.1,
            context_keep: 0.5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self, composer_vocab: usize, composer_max_len: usize) -> Result<()> {
        if self.attributes == 0 || self.attributes > 12 {
            return Err(Error::Config(format!("synthetic attributes must be in 1..=12, got {}", self.attributes)));
        }
        if self.subject_attributes == 0 || self.subject_attributes > self.attributes {
            return Err(Error::Config("subject attributes must be in 1..=attributes".into()));
        }
        if word(self.attributes - 1, true) as usize >= composer_vocab {
            return Err(Error::Config("composer vocabulary too small for the attribute words".into()));
        }
        if self.attributes + 4 > composer_max_len {
            return Err(Error::Config("composer max_len too small for canonical descriptions".into()));
        }
        if self.subject_attributes < PSEUDO_ROWS {
            return Err(Error::Config(format!("instructions keep {PSEUDO_ROWS} subject words")));
        }
        if !(0.0..=1.0).contains(&self.context_keep) || self.image_noise < 0.0 || self.caption_noise < 0.0 {
            return Err(Error::Config("synthetic noise and keep rates out of range".into()));
        }
        Ok(())
    }

    pub fn gallery_size(&self) -> usize {
        1 << self.attributes
    }
}

/// Token for attribute `j` taking value `b`.
pub fn word(j: usize, b: bool) -> u32 {
    vocab::FIRST_FREE + 2 * j as u32 + b as u32
}

/// Image-caption pairs with their latent attributes.
#[derive(Clone, Debug)]
pub struct SynthSplit {
    pub attributes: Vec<Vec<bool>>,
    pub images: EmbeddingMatrix,
    pub captions: EmbeddingMatrix,
    pub records: Vec<KnowledgeRecord>,
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub train: SynthSplit,
    pub database: SynthSplit,
    /// Gallery rows `0..gallery_size` followed by the task reference images.
    pub eval_images: EmbeddingMatrix,
    /// Latent attributes of every `eval_images` row.
    pub eval_attributes: Vec<Vec<bool>>,
    pub tasks: Vec<EvalTask>,
}

/// "a photo of <subject words> with <context words>".
pub fn canonical(attrs: &[bool], subject: usize) -> TokenSequence {
    let mut t = alloc::vec![vocab::A, vocab::PHOTO, vocab::OF];
    t.extend((0..subject).map(|j| word(j, attrs[j])));
    if subject < attrs.len() {
        t.push(vocab::WITH);
        t.extend((subject..attrs.len()).map(|j| word(j, attrs[j])));
    }
    TokenSequence::from_tokens(&t)
}

fn caption<R: Rng>(attrs: &[bool], subject: usize, keep: f64, r: &mut R) -> Vec<u32> {
    let mut t = alloc::vec![vocab::A, vocab::PHOTO, vocab::OF];
    t.extend((0..subject).map(|j| word(j, attrs[j])));
    let ctx: Vec<u32> = (subject..attrs.len())
        .filter(|_| r.random_bool(keep))
        .map(|j| word(j, attrs[j]))
        .collect();
    if !ctx.is_empty() {
        t.push(vocab::WITH);
        t.extend(ctx);
    }
    t
}

/// "a photo of [slot0 slot1 slot2] with <new word>", the pseudo token standing
/// in for the reference image.
pub fn instruction(attribute: usize, value: bool) -> TokenSequence {
    let mut s = TokenSequence::from_tokens(&[vocab::A, vocab::PHOTO, vocab::OF]);
    for p in 0..PSEUDO_ROWS {
        s.push(TokenItem::Slot(p));
    }
    s.push(TokenItem::Token(vocab::WITH));
    s.push(TokenItem::Token(word(attribute, value)));
    s
}

fn attribute_bits(code: usize, n: usize) -> Vec<bool> {
    (0..n).map(|j| (code >> j) & 1 == 1).collect()
}

fn attribute_code(attrs: &[bool]) -> usize {
    attrs.iter().enumerate().map(|(j, &b)| (b as usize) << j).sum()
}

fn noisy_rows<R: Rng>(composer: &FrozenComposer, seqs: &[TokenSequence], sigma: f32, r: &mut R) -> Result<EmbeddingMatrix> {
    let d = composer.dim();
    let refs: Vec<&TokenSequence> = seqs.iter().collect();
    let clean = composer.encode_texts(&refs, ENCODE_CHUNK)?;
    let scale = sigma / num_traits::Float::sqrt(d as f32);
    let mut values = Vec::with_capacity(seqs.len() * d);
    for row in clean {
        values.extend(row.into_iter().map(|x| x + scale * rng::normal::<f32, _>(r)));
    }
    EmbeddingMatrix::normalized_from(d, values)
}

fn split<R: Rng>(config: &SynthConfig, composer: &FrozenComposer, n: usize, r: &mut R) -> Result<SynthSplit> {
    let attributes: Vec<Vec<bool>> = (0..n)
        .map(|_| (0..config.attributes).map(|_| r.random_bool(0.5)).collect())
        .collect();
    let s = config.subject_attributes;
    let canon: Vec<TokenSequence> = attributes.iter().map(|a| canonical(a, s)).collect();
    let images = noisy_rows(composer, &canon, config.image_noise, r)?;
    let records: Vec<KnowledgeRecord> = attributes
        .iter()
        .enumerate()
        .map(|(id, a)| KnowledgeRecord {
            id,
            caption_tokens: caption(a, s, config.context_keep, r),
            subject_span: Some((3, 3 + s)),
            text: None,
        })
        .collect();
    let seqs: Vec<TokenSequence> = records.iter().map(|c| TokenSequence::from_tokens(&c.caption_tokens)).collect();
    let captions = noisy_rows(composer, &seqs, config.caption_noise, r)?;
    Ok(SynthSplit {
        attributes,
        images,
        captions,
        records,
    })
}

/// Builds the training split, the knowledge database and the evaluation set.
pub fn synth_generate(config: &SynthConfig, composer: &FrozenComposer, seed: u64) -> Result<SynthCorpus> {
    config.validate(composer.config().vocab_size, composer.config().max_len)?;
    let train = split(config, composer, config.items, &mut rng::stream(seed, "synth.train"))?;
    let database = split(config, composer, config.database, &mut rng::stream(seed, "synth.database"))?;

    let mut r = rng::stream(seed, "synth.eval");
    let g = config.gallery_size();
    let mut eval_attributes: Vec<Vec<bool>> = (0..g).map(|c| attribute_bits(c, config.attributes)).collect();
    for _ in 0..config.tasks {
        eval_attributes.push((0..config.attributes).map(|_| r.random_bool(0.5)).collect());
    }
    let canon: Vec<TokenSequence> = eval_attributes
        .iter()
        .map(|a| canonical(a, config.subject_attributes))
        .collect();
    let eval_images = noisy_rows(composer, &canon, config.image_noise, &mut r)?;

    let candidates: Vec<usize> = (0..g).collect();
    let choices: Vec<usize> = (0..config.attributes).collect();
    let mut tasks = Vec::with_capacity(config.tasks);
    for t in 0..config.tasks {
        let reference = g + t;
        let j = *choices.choose(&mut r).expect("at least one attribute");
        let mut flipped = eval_attributes[reference].clone();
        flipped[j] = !flipped[j];
        tasks.push(EvalTask {
            reference_id: reference,
            instruction: instruction(j, flipped[j]),
            candidate_ids: candidates.clone(),
            target_ids: alloc::vec![attribute_code(&flipped)],
        });
    }
    Ok(SynthCorpus {
        train,
        database,
        eval_images,
        eval_attributes,
        tasks,
    })
}
