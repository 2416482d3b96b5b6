//! Parameter containers and transformer blocks shared by the frozen composer
//! and the projection network.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::numeric::{AttnSegment, Graph, Real, Tensor, Var};
use crate::{rng, Result};

/// Feed-forward expansion factor.
pub const FF_EXPANSION: usize = 4;

/// Affine map `x·W + b` with `W` stored as `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<F: Real = f32> {
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
}

impl<F: Real> Linear<F> {
    /// Weights uniform in `±1/sqrt(fan_in)`, zero bias.
    pub fn uniform<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Result<Self> {
        let bound = 1.0 / num_traits::Float::sqrt(fan_in as f64);
        let w = Tensor::from_fn(fan_in, fan_out, |_, _| rng::uniform(rng, -bound, bound))?;
        Ok(Linear {
            weight: w,
            bias: Tensor::zeros(alloc::vec![1, fan_out])?,
        })
    }

    /// Identity plus uniform noise small enough that `‖xW − x‖ ≈ 0.03‖x‖`.
    pub fn near_identity<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Result<Self> {
        let bound = 0.05 / num_traits::Float::sqrt(dim as f64);
        let w = Tensor::from_fn(dim, dim, |r, c| {
            let noise: F = rng::uniform(rng, -bound, bound);
            if r == c {
                F::one() + noise
            } else {
                noise
            }
        })?;
        Ok(Linear {
            weight: w,
            bias: Tensor::zeros(alloc::vec![1, dim])?,
        })
    }

    pub fn cast<G: Real>(&self) -> Linear<G> {
        Linear {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }

    pub fn bind(&self, g: &mut Graph<F>, trainable: bool) -> LinearVars {
        LinearVars {
            weight: g.leaf(self.weight.clone(), trainable),
            bias: g.leaf(self.bias.clone(), trainable),
        }
    }

    pub(crate) fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<F>)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    pub(crate) fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<F>>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl LinearVars {
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        let y = g.matmul(x, self.weight)?;
        g.add_row(y, self.bias)
    }

    pub(crate) fn vars(&self, out: &mut Vec<Var>) {
        out.push(self.weight);
        out.push(self.bias);
    }
}

/// Pre-norm attention block: `x + Attn(LN(x), kv)` followed by
/// `x + FF(LN(x))` with a GELU feed-forward of width `FF_EXPANSION·d`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<F: Real = f32> {
    pub query: Linear<F>,
    pub key: Linear<F>,
    pub value: Linear<F>,
    pub output: Linear<F>,
    pub ff_in: Linear<F>,
    pub ff_out: Linear<F>,
}

impl<F: Real> Block<F> {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Result<Self> {
        let hidden = FF_EXPANSION * dim;
        Ok(Block {
            query: Linear::uniform(rng, dim, dim)?,
            key: Linear::uniform(rng, dim, dim)?,
            value: Linear::uniform(rng, dim, dim)?,
            output: Linear::uniform(rng, dim, dim)?,
            ff_in: Linear::uniform(rng, dim, hidden)?,
            ff_out: Linear::uniform(rng, hidden, dim)?,
        })
    }

    pub fn cast<G: Real>(&self) -> Block<G> {
        Block {
            query: self.query.cast(),
            key: self.key.cast(),
            value: self.value.cast(),
            output: self.output.cast(),
            ff_in: self.ff_in.cast(),
            ff_out: self.ff_out.cast(),
        }
    }

    pub fn bind(&self, g: &mut Graph<F>, trainable: bool) -> BlockVars {
        BlockVars {
            query: self.query.bind(g, trainable),
            key: self.key.bind(g, trainable),
            value: self.value.bind(g, trainable),
            output: self.output.bind(g, trainable),
            ff_in: self.ff_in.bind(g, trainable),
            ff_out: self.ff_out.bind(g, trainable),
        }
    }

    pub(crate) fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<F>)>) {
        self.query.collect(&format!("{prefix}.query"), out);
        self.key.collect(&format!("{prefix}.key"), out);
        self.value.collect(&format!("{prefix}.value"), out);
        self.output.collect(&format!("{prefix}.output"), out);
        self.ff_in.collect(&format!("{prefix}.ff_in"), out);
        self.ff_out.collect(&format!("{prefix}.ff_out"), out);
    }

    pub(crate) fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<F>>) {
        self.query.collect_mut(out);
        self.key.collect_mut(out);
        self.value.collect_mut(out);
        self.output.collect_mut(out);
        self.ff_in.collect_mut(out);
        self.ff_out.collect_mut(out);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub query: LinearVars,
    pub key: LinearVars,
    pub value: LinearVars,
    pub output: LinearVars,
    pub ff_in: LinearVars,
    pub ff_out: LinearVars,
}

impl BlockVars {
    /// Runs one block on the residual stream `x`. Keys and values come from
    /// `kv`, which the caller has already layer-normalized; `None` means
    /// self-attention over `LN(x)`.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        x: Var,
        kv: Option<Var>,
        heads: usize,
        segments: &[AttnSegment],
    ) -> Result<Var> {
        let h = g.layer_norm(x);
        let kv = kv.unwrap_or(h);
        let q = self.query.forward(g, h)?;
        let k = self.key.forward(g, kv)?;
        let v = self.value.forward(g, kv)?;
        let a = g.attention(q, k, v, heads, segments.to_vec())?;
        let a = self.output.forward(g, a)?;
        let x = g.add(x, a)?;
        let h = g.layer_norm(x);
        let f = self.ff_in.forward(g, h)?;
        let f = g.gelu(f);
        let f = self.ff_out.forward(g, f)?;
        g.add(x, f)
    }

    pub(crate) fn vars(&self, out: &mut Vec<Var>) {
        self.query.vars(out);
        self.key.vars(out);
        self.value.vars(out);
        self.output.vars(out);
        self.ff_in.vars(out);
        self.ff_out.vars(out);
    }
}
