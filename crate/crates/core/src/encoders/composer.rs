use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{TokenItem, TokenSequence};
use crate::nn::{Block, BlockVars};
use crate::numeric::{AttnSegment, Graph, Real, Tensor, Var};
use crate::{rng, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComposerConfig {
    pub dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub layers: usize,
    pub heads: usize,
}

impl Default for ComposerConfig {
    fn default() -> Self {
        ComposerConfig {
            dim: 64,
            vocab_size: 1024,
            max_len: 32,
            layers: 2,
            heads: 4,
        }
    }
}

/// Seeded transformer that encodes token sequences, some of whose positions
/// carry continuous pseudo-token rows, into unit vectors.
///
/// Weights are fixed at construction and never bound as trainable, so
/// gradients flow through the composer into the pseudo rows only.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenComposer<F: Real = f32> {
    config: ComposerConfig,
    vocab: Tensor<F>,
    positions: Tensor<F>,
    blocks: Vec<Block<F>>,
}

/// Composer blocks bound as constants into one graph.
#[derive(Clone, Debug)]
pub struct ComposerVars {
    blocks: Vec<BlockVars>,
}

impl FrozenComposer<f32> {
    pub fn new(config: ComposerConfig, seed: u64) -> Result<Self> {
        if config.dim == 0 || config.heads == 0 || config.dim % config.heads != 0 {
            return Err(Error::Config(format!(
                "composer width {} is not divisible by {} heads",
                config.dim, config.heads
            )));
        }
        if config.vocab_size == 0 || config.max_len == 0 {
            return Err(Error::Config("composer vocabulary and length must be positive".into()));
        }
        let mut r = rng::stream(seed, "composer");
        let d = config.dim;
        let vocab = Tensor::from_fn(config.vocab_size, d, |_, _| rng::normal(&mut r))?;
        let positions = Tensor::from_fn(config.max_len, d, |_, _| 0.1 * rng::normal::<f32, _>(&mut r))?;
        let blocks = (0..config.layers)
            .map(|_| Block::init(&mut r, d))
            .collect::<Result<Vec<_>>>()?;
        Ok(FrozenComposer {
            config,
            vocab,
            positions,
            blocks,
        })
    }
}

impl<F: Real> FrozenComposer<F> {
    pub fn config(&self) -> &ComposerConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn cast<G: Real>(&self) -> FrozenComposer<G> {
        FrozenComposer {
            config: self.config,
            vocab: self.vocab.cast(),
            positions: self.positions.cast(),
            blocks: self.blocks.iter().map(Block::cast).collect(),
        }
    }

    /// Every weight tensor with a stable name.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = Vec::new();
        out.push((String::from("vocab"), &self.vocab));
        out.push((String::from("positions"), &self.positions));
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&format!("block{i}"), &mut out);
        }
        out
    }

    pub fn bind(&self, g: &mut Graph<F>) -> ComposerVars {
        ComposerVars {
            blocks: self.blocks.iter().map(|b| b.bind(g, false)).collect(),
        }
    }

    /// Encodes a batch of sequences.
    ///
    /// Sequence `b` reads its pseudo slots from rows `b·rows_per_seq ..` of
    /// `pseudo`. Returns a `[batch, dim]` matrix of unit rows.
    pub fn compose(
        &self,
        g: &mut Graph<F>,
        vars: &ComposerVars,
        seqs: &[&TokenSequence],
        pseudo: Option<Var>,
        rows_per_seq: usize,
    ) -> Result<Var> {
        let d = self.config.dim;
        let pseudo_rows = pseudo.map(|p| g.value(p).rows()).unwrap_or(0);
        if let Some(p) = pseudo {
            if g.value(p).cols() != d || pseudo_rows != seqs.len() * rows_per_seq {
                return Err(Error::dim("compose", g.shape(p), &[seqs.len() * rows_per_seq, d]));
            }
        }
        let total: usize = seqs.iter().map(|s| s.len()).sum();
        if seqs.is_empty() {
            return Err(Error::InvalidTensor("compose needs at least one sequence".into()));
        }
        let mut base = Vec::with_capacity(total * d);
        let mut pairs = Vec::new();
        let mut segments = Vec::with_capacity(seqs.len());
        let mut lengths = Vec::with_capacity(seqs.len());
        let mut row = 0;
        for (b, seq) in seqs.iter().enumerate() {
            if seq.is_empty() {
                return Err(Error::InvalidTensor("cannot compose an empty sequence".into()));
            }
            if seq.len() > self.config.max_len {
                return Err(Error::Length {
                    len: seq.len(),
                    max: self.config.max_len,
                });
            }
            for (pos, item) in seq.items().iter().enumerate() {
                let p = self.positions.row(pos);
                match *item {
                    TokenItem::Token(t) => {
                        let t = t as usize;
                        if t >= self.config.vocab_size {
                            return Err(Error::Lookup { what: "vocabulary token", id: t });
                        }
                        base.extend(self.vocab.row(t).iter().zip(p).map(|(&e, &q)| e + q));
                    }
                    TokenItem::Slot(s) => {
                        if s >= rows_per_seq || pseudo.is_none() {
                            let rows = if pseudo.is_some() { rows_per_seq } else { 0 };
                            return Err(Error::Injection { slot: s, rows });
                        }
                        base.extend_from_slice(p);
                        pairs.push((row + pos, b * rows_per_seq + s));
                    }
                }
            }
            segments.push(AttnSegment {
                q_start: row,
                q_len: seq.len(),
                kv_start: row,
                kv_len: seq.len(),
            });
            lengths.push(seq.len());
            row += seq.len();
        }
        let base = g.constant(Tensor::matrix(total, d, base)?);
        let mut x = match pseudo {
            Some(p) if !pairs.is_empty() => {
                let injected = g.scatter_rows(p, total, pairs)?;
                g.add(base, injected)?
            }
            _ => base,
        };
        for b in &vars.blocks {
            x = b.forward(g, x, None, self.config.heads, &segments)?;
        }
        let pooled = g.segment_mean(x, lengths)?;
        g.l2_normalize(pooled)
    }

    /// Encodes one sequence in a private graph and returns the unit vector.
    pub fn compose_one(&self, seq: &TokenSequence, pseudo: Option<&Tensor<F>>) -> Result<Vec<F>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let p = pseudo.map(|t| g.constant(t.clone()));
        let rows = pseudo.map(|t| t.rows()).unwrap_or(0);
        let out = self.compose(&mut g, &vars, &[seq], p, rows)?;
        Ok(g.value(out).data().to_vec())
    }

    /// Encodes discrete-only sequences in chunks, returning one row per sequence.
    pub fn encode_texts(&self, seqs: &[&TokenSequence], chunk: usize) -> Result<Vec<Vec<F>>> {
        let mut out = Vec::with_capacity(seqs.len());
        for part in seqs.chunks(chunk.max(1)) {
            let mut g = Graph::new();
            let vars = self.bind(&mut g);
            let v = self.compose(&mut g, &vars, part, None, 0)?;
            let t = g.value(v);
            out.extend((0..t.rows()).map(|r| t.row(r).to_vec()));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::make_prompt;
    use alloc::vec;

    fn small() -> FrozenComposer {
        FrozenComposer::new(
            ComposerConfig {
                dim: 16,
                vocab_size: 64,
                max_len: 12,
                layers: 2,
                heads: 4,
            },
            5,
        )
        .unwrap()
    }

    fn pseudo(seed: u64, rows: usize, d: usize) -> Tensor<f32> {
        let mut r = rng::stream(seed, "pseudo");
        Tensor::from_fn(rows, d, |_, _| rng::normal(&mut r)).unwrap()
    }

    #[test]
    fn deterministic_and_unit_norm() {
        let c = small();
        let p = pseudo(1, 3, 16);
        let a = c.compose_one(&make_prompt(3), Some(&p)).unwrap();
        let b = c.compose_one(&make_prompt(3), Some(&p)).unwrap();
        assert_eq!(a, b);
        let n: f32 = a.iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
        assert_eq!(small(), c);
    }

    #[test]
    fn different_pseudo_blocks_differ() {
        let c = small();
        let a = c.compose_one(&make_prompt(3), Some(&pseudo(1, 3, 16))).unwrap();
        let b = c.compose_one(&make_prompt(3), Some(&pseudo(2, 3, 16))).unwrap();
        let dist: f32 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f32>().sqrt();
        assert!(dist > 1e-3, "distance {dist}");
    }

    #[test]
    fn token_order_matters() {
        let c = small();
        let a = c.compose_one(&TokenSequence::from_tokens(&[5, 9, 20]), None).unwrap();
        let b = c.compose_one(&TokenSequence::from_tokens(&[9, 5, 20]), None).unwrap();
        let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
        assert!(diff > 1e-6);
    }

    #[test]
    fn freeze_contract() {
        let c = small();
        let mut g = Graph::<f32>::new();
        let vars = c.bind(&mut g);
        let p = g.param(pseudo(3, 3, 16));
        let seq = make_prompt(3);
        let out = c.compose(&mut g, &vars, &[&seq], Some(p), 3).unwrap();
        let s = g.sum(out);
        g.backward(s).unwrap();
        assert!(g.grad(p).is_some());
        for b in &vars.blocks {
            let mut vs = Vec::new();
            b.vars(&mut vs);
            assert!(vs.iter().all(|&v| g.grad(v).is_none()));
        }
    }

    #[test]
    fn injection_and_length_errors() {
        let c = small();
        let p = pseudo(1, 2, 16);
        let err = c.compose_one(&make_prompt(3), Some(&p)).unwrap_err();
        assert_eq!(err, Error::Injection { slot: 2, rows: 2 });
        let long = TokenSequence::from_tokens(&[1; 13]);
        assert_eq!(c.compose_one(&long, None).unwrap_err(), Error::Length { len: 13, max: 12 });
        assert!(c.compose_one(&TokenSequence::default(), None).is_err());
        assert!(c.compose_one(&TokenSequence::from_tokens(&[64]), None).is_err());
    }

    #[test]
    fn batch_rows_match_single_calls() {
        let c = small();
        let seqs = [make_prompt(3), TokenSequence::new(vec![TokenItem::Token(7), TokenItem::Slot(0), TokenItem::Slot(1), TokenItem::Slot(2), TokenItem::Token(8)])];
        let p0 = pseudo(4, 3, 16);
        let p1 = pseudo(5, 3, 16);
        let mut both = p0.data().to_vec();
        both.extend_from_slice(p1.data());
        let mut g = Graph::<f32>::new();
        let vars = c.bind(&mut g);
        let p = g.constant(Tensor::matrix(6, 16, both).unwrap());
        let out = c.compose(&mut g, &vars, &[&seqs[0], &seqs[1]], Some(p), 3).unwrap();
        let single0 = c.compose_one(&seqs[0], Some(&p0)).unwrap();
        let single1 = c.compose_one(&seqs[1], Some(&p1)).unwrap();
        assert_eq!(g.value(out).row(0), &single0[..]);
        assert_eq!(g.value(out).row(1), &single1[..]);
    }
}
