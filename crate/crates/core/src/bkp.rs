//! Knowledge-guided projection: maps an image feature and its retrieved
//! image/caption neighbours to a three-row pseudo-word token.
//!
//! The image feature goes through a shared linear block `ψ`, giving `î`. Two
//! cross-attention stacks use `î` as the query, one attending over `ψ` of the
//! retrieved image features and one over `ψ` of the retrieved caption
//! features. The token is the row stack `[î, v_i, v_c]`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::encoders::PSEUDO_ROWS;
use crate::nn::{Block, BlockVars, Linear, LinearVars};
use crate::numeric::{AttnSegment, Graph, Real, Tensor, Var};
use crate::{rng, Error, Result};

/// Retrieved neighbours of one query: `K` image rows and the `K` caption rows
/// paired with them.
#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeContext<F: Real = f32> {
    images: Tensor<F>,
    captions: Tensor<F>,
    ids: Vec<usize>,
}

impl<F: Real> KnowledgeContext<F> {
    pub fn new(images: Tensor<F>, captions: Tensor<F>, ids: Vec<usize>) -> Result<Self> {
        if images.shape().len() != 2 || images.shape() != captions.shape() {
            return Err(Error::dim("knowledge context", images.shape(), captions.shape()));
        }
        if ids.len() != images.rows() {
            return Err(Error::dim("knowledge context ids", &[ids.len()], images.shape()));
        }
        Ok(KnowledgeContext { images, captions, ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.images.cols()
    }

    pub fn images(&self) -> &Tensor<F> {
        &self.images
    }

    pub fn captions(&self) -> &Tensor<F> {
        &self.captions
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn cast<G: Real>(&self) -> KnowledgeContext<G> {
        KnowledgeContext {
            images: self.images.cast(),
            captions: self.captions.cast(),
            ids: self.ids.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BkpConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
}

impl Default for BkpConfig {
    fn default() -> Self {
        BkpConfig {
            dim: 64,
            layers: 3,
            heads: 4,
        }
    }
}

impl BkpConfig {
    /// Full-scale architecture.
    pub fn full() -> Self {
        BkpConfig {
            dim: 768,
            layers: 3,
            heads: 12,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "projection width {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Disables one cross-attention branch by replacing its output row with zeros.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Knockout {
    pub image_branch: bool,
    pub caption_branch: bool,
}

/// Three-row pseudo-word token `[î, v_i, v_c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoToken<F: Real = f32> {
    pub rows: Tensor<F>,
}

impl<F: Real> PseudoToken<F> {
    pub fn mapped_image(&self) -> &[F] {
        self.rows.row(0)
    }

    pub fn image_knowledge(&self) -> &[F] {
        self.rows.row(1)
    }

    pub fn caption_knowledge(&self) -> &[F] {
        self.rows.row(2)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BkpParams<F: Real = f32> {
    pub config: BkpConfig,
    pub psi: Linear<F>,
    pub image_stack: Vec<Block<F>>,
    pub caption_stack: Vec<Block<F>>,
}

#[derive(Clone, Debug)]
pub struct BkpVars {
    pub psi: LinearVars,
    pub image_stack: Vec<BlockVars>,
    pub caption_stack: Vec<BlockVars>,
}

impl BkpVars {
    /// Parameter handles in the order of [`BkpParams::named_tensors`].
    pub fn params(&self) -> Vec<Var> {
        let mut out = Vec::new();
        self.psi.vars(&mut out);
        for b in self.image_stack.iter().chain(&self.caption_stack) {
            b.vars(&mut out);
        }
        out
    }
}

impl<F: Real> BkpParams<F> {
    /// `ψ` starts near the identity; attention and feed-forward weights are
    /// uniform in `±1/sqrt(fan_in)`.
    pub fn init(config: BkpConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, "bkp");
        let d = config.dim;
        let psi = Linear::near_identity(&mut r, d)?;
        let image_stack = (0..config.layers).map(|_| Block::init(&mut r, d)).collect::<Result<_>>()?;
        let caption_stack = (0..config.layers).map(|_| Block::init(&mut r, d)).collect::<Result<_>>()?;
        Ok(BkpParams {
            config,
            psi,
            image_stack,
            caption_stack,
        })
    }

    pub fn cast<G: Real>(&self) -> BkpParams<G> {
        BkpParams {
            config: self.config,
            psi: self.psi.cast(),
            image_stack: self.image_stack.iter().map(Block::cast).collect(),
            caption_stack: self.caption_stack.iter().map(Block::cast).collect(),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = Vec::new();
        self.psi.collect("psi", &mut out);
        for (i, b) in self.image_stack.iter().enumerate() {
            b.collect(&format!("image.{i}"), &mut out);
        }
        for (i, b) in self.caption_stack.iter().enumerate() {
            b.collect(&format!("caption.{i}"), &mut out);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out = Vec::new();
        self.psi.collect_mut(&mut out);
        for b in self.image_stack.iter_mut().chain(self.caption_stack.iter_mut()) {
            b.collect_mut(&mut out);
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn bind(&self, g: &mut Graph<F>, trainable: bool) -> BkpVars {
        BkpVars {
            psi: self.psi.bind(g, trainable),
            image_stack: self.image_stack.iter().map(|b| b.bind(g, trainable)).collect(),
            caption_stack: self.caption_stack.iter().map(|b| b.bind(g, trainable)).collect(),
        }
    }

    /// Projects a batch of image features `[B, d]` with one context per row.
    ///
    /// Returns `[3B, d]` with rows `3b..3b+3` holding sample `b`'s token.
    pub fn project_batch(
        &self,
        g: &mut Graph<F>,
        vars: &BkpVars,
        images: Var,
        contexts: &[&KnowledgeContext<F>],
        knockout: Knockout,
    ) -> Result<Var> {
        let d = self.config.dim;
        let shape = g.shape(images);
        if shape.len() != 2 || shape[1] != d || shape[0] != contexts.len() {
            return Err(Error::dim("project", shape, &[contexts.len(), d]));
        }
        let b = contexts.len();
        let mut segments = Vec::with_capacity(b);
        let mut img_rows = Vec::new();
        let mut cap_rows = Vec::new();
        let mut start = 0;
        for (s, ctx) in contexts.iter().enumerate() {
            if ctx.is_empty() {
                return Err(Error::EmptyContext);
            }
            if ctx.dim() != d {
                return Err(Error::dim("project context", ctx.images().shape(), &[ctx.len(), d]));
            }
            img_rows.extend_from_slice(ctx.images().data());
            cap_rows.extend_from_slice(ctx.captions().data());
            segments.push(AttnSegment {
                q_start: s,
                q_len: 1,
                kv_start: start,
                kv_len: ctx.len(),
            });
            start += ctx.len();
        }
        let mapped = vars.psi.forward(g, images)?;
        let ctx_img = g.constant(Tensor::matrix(start, d, img_rows)?);
        let ctx_cap = g.constant(Tensor::matrix(start, d, cap_rows)?);
        let heads = self.config.heads;
        let vi = if knockout.image_branch {
            g.constant(Tensor::zeros(vec![b, d])?)
        } else {
            stack(g, &vars.psi, &vars.image_stack, mapped, ctx_img, heads, &segments)?
        };
        let vc = if knockout.caption_branch {
            g.constant(Tensor::zeros(vec![b, d])?)
        } else {
            stack(g, &vars.psi, &vars.caption_stack, mapped, ctx_cap, heads, &segments)?
        };
        let all = g.concat_rows(&[mapped, vi, vc])?;
        let order = (0..b).flat_map(|s| (0..PSEUDO_ROWS).map(move |r| r * b + s)).collect();
        g.gather_rows(all, order)
    }

    /// Projects one image feature through a private graph.
    pub fn project(&self, image: &[F], ctx: &KnowledgeContext<F>, knockout: Knockout) -> Result<PseudoToken<F>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let x = g.constant(Tensor::matrix(1, image.len(), image.to_vec())?);
        let out = self.project_batch(&mut g, &vars, x, &[ctx], knockout)?;
        Ok(PseudoToken {
            rows: g.value(out).clone(),
        })
    }
}

fn stack<F: Real>(
    g: &mut Graph<F>,
    psi: &LinearVars,
    blocks: &[BlockVars],
    query: Var,
    context: Var,
    heads: usize,
    segments: &[AttnSegment],
) -> Result<Var> {
    let kv = psi.forward(g, context)?;
    let kv = g.layer_norm(kv);
    let mut x = query;
    for b in blocks {
        x = b.forward(g, x, Some(kv), heads, segments)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx(seed: u64, k: usize, d: usize) -> KnowledgeContext<f32> {
        let mut r = rng::stream(seed, "ctx");
        let a = Tensor::from_fn(k, d, |_, _| rng::normal(&mut r)).unwrap();
        let b = Tensor::from_fn(k, d, |_, _| rng::normal(&mut r)).unwrap();
        KnowledgeContext::new(a, b, (0..k).collect()).unwrap()
    }

    fn config() -> BkpConfig {
        BkpConfig {
            dim: 16,
            layers: 2,
            heads: 4,
        }
    }

    fn image(seed: u64, d: usize) -> Vec<f32> {
        let mut r = rng::stream(seed, "img");
        (0..d).map(|_| rng::normal(&mut r)).collect()
    }

    #[test]
    fn shape_and_passthrough() {
        let p = BkpParams::<f32>::init(config(), 1).unwrap();
        let x = image(2, 16);
        let t = p.project(&x, &ctx(3, 5, 16), Knockout::default()).unwrap();
        assert_eq!(t.rows.shape(), &[3, 16]);
        let mut g = Graph::new();
        let v = p.psi.bind(&mut g, false);
        let xi = g.constant(Tensor::matrix(1, 16, x).unwrap());
        let y = v.forward(&mut g, xi).unwrap();
        assert_eq!(t.mapped_image(), g.value(y).data());
    }

    #[test]
    fn init_is_deterministic_and_psi_near_identity() {
        let a = BkpParams::<f32>::init(BkpConfig::default(), 7).unwrap();
        assert_eq!(a, BkpParams::init(BkpConfig::default(), 7).unwrap());
        assert_ne!(a, BkpParams::init(BkpConfig::default(), 8).unwrap());
        for s in 0..10 {
            let x = image(s, 64);
            let mut g = Graph::new();
            let v = a.psi.bind(&mut g, false);
            let xi = g.constant(Tensor::matrix(1, 64, x.clone()).unwrap());
            let y = v.forward(&mut g, xi).unwrap();
            let diff: f32 = g.value(y).data().iter().zip(&x).map(|(p, q)| (p - q) * (p - q)).sum::<f32>().sqrt();
            let n: f32 = x.iter().map(|q| q * q).sum::<f32>().sqrt();
            assert!(diff / n < 0.1, "relative change {}", diff / n);
        }
    }

    #[test]
    fn heads_must_divide_width() {
        let c = BkpConfig {
            dim: 10,
            layers: 1,
            heads: 4,
        };
        assert!(matches!(BkpParams::<f32>::init(c, 0), Err(Error::Config(_))));
    }

    #[test]
    fn empty_context_and_dim_errors() {
        let p = BkpParams::<f32>::init(config(), 1).unwrap();
        let empty = KnowledgeContext {
            images: Tensor::<f32>::zeros(vec![1, 16]).unwrap(),
            captions: Tensor::zeros(vec![1, 16]).unwrap(),
            ids: Vec::new(),
        };
        assert_eq!(p.project(&image(1, 16), &empty, Knockout::default()).unwrap_err(), Error::EmptyContext);
        assert!(matches!(
            p.project(&image(1, 8), &ctx(1, 2, 16), Knockout::default()),
            Err(Error::Dimension { .. })
        ));
        assert!(matches!(
            p.project(&image(1, 16), &ctx(1, 2, 8), Knockout::default()),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn knockouts_zero_their_row_only() {
        let p = BkpParams::<f32>::init(config(), 1).unwrap();
        let x = image(2, 16);
        let c = ctx(3, 4, 16);
        let full = p.project(&x, &c, Knockout::default()).unwrap();
        let no_img = p
            .project(&x, &c, Knockout { image_branch: true, caption_branch: false })
            .unwrap();
        assert!(no_img.image_knowledge().iter().all(|&v| v == 0.0));
        assert_eq!(no_img.caption_knowledge(), full.caption_knowledge());
        let no_cap = p
            .project(&x, &c, Knockout { image_branch: false, caption_branch: true })
            .unwrap();
        assert!(no_cap.caption_knowledge().iter().all(|&v| v == 0.0));
        assert_eq!(no_cap.image_knowledge(), full.image_knowledge());
    }

    #[test]
    fn batch_matches_single() {
        let p = BkpParams::<f32>::init(config(), 4).unwrap();
        let xs = [image(1, 16), image(2, 16)];
        let cs = [ctx(5, 3, 16), ctx(6, 7, 16)];
        let mut g = Graph::new();
        let vars = p.bind(&mut g, true);
        let mut flat = xs[0].clone();
        flat.extend_from_slice(&xs[1]);
        let x = g.constant(Tensor::matrix(2, 16, flat).unwrap());
        let out = p.project_batch(&mut g, &vars, x, &[&cs[0], &cs[1]], Knockout::default()).unwrap();
        for s in 0..2 {
            let single = p.project(&xs[s], &cs[s], Knockout::default()).unwrap();
            for r in 0..3 {
                assert_eq!(g.value(out).row(3 * s + r), single.rows.row(r));
            }
        }
    }

    #[test]
    fn separate_instances_share_nothing() {
        let mut m = BkpParams::<f32>::init(config(), 1).unwrap();
        let a = m.clone();
        for t in m.tensors_mut() {
            t.data_mut()[0] += 1.0;
        }
        assert_ne!(m, a);
        assert_eq!(a, BkpParams::init(config(), 1).unwrap());
        assert_eq!(m.named_tensors().len(), m.bind(&mut Graph::new(), true).params().len());
    }
}
