use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{gemm_acc, gemm_tn_acc, transpose};
use super::{Real, Tensor, LAYER_NORM_EPS, NORM_EPS};
use crate::{Error, Result};

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One attention group: query rows `q_start..q_start+q_len` attend to key/value
/// rows `kv_start..kv_start+kv_len`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnSegment {
    pub q_start: usize,
    pub q_len: usize,
    pub kv_start: usize,
    pub kv_len: usize,
}

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, F),
    Sum(Var),
    Mean(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    L2Normalize { x: Var, norms: Vec<F> },
    LayerNorm { x: Var, inv_std: Vec<F> },
    Gelu(Var),
    RowSum(Var),
    Pick { x: Var, cols: Vec<usize> },
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, rows: Vec<usize> },
    ScatterRows { x: Var, pairs: Vec<(usize, usize)> },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<AttnSegment>,
        probs: Vec<F>,
    },
    SegmentMean { x: Var, lengths: Vec<usize> },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
    grad: Option<Vec<F>>,
}

/// Ordered record of executed operations.
///
/// Nodes are appended in execution order, so the node index is a topological
/// order and the record is acyclic by construction.
pub struct Graph<F: Real = f32> {
    nodes: Vec<Node<F>>,
    consumed: bool,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the backward root with respect to a leaf, once `backward` ran.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<F>> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| {
            Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad mirrors value shape")
        })
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::dim(op, s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, data: Vec<F>, op: Op<F>) -> Var {
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        let t = Tensor::new(shape, data).expect("unary op preserves shape");
        self.push(t, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![F::zero(); m * n];
        gemm_acc(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "transpose")?;
        let out = transpose(m, n, self.value(a).data());
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::Transpose(a), rg))
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<F>, name: &'static str, f: impl Fn(F, F) -> F) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    /// Adds a row vector (`[n]` or `[1, n]`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let n = self.value(a).cols();
        if self.value(bias).len() != n {
            return Err(Error::dim("add_row", self.shape(a), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(n) {
            for (x, &y) in row.iter_mut().zip(b) {
                *x = *x + y;
            }
        }
        Ok(self.unary_pair(a, bias, data, Op::AddRow(a, bias)))
    }

    fn unary_pair(&mut self, a: Var, b: Var, data: Vec<F>, op: Op<F>) -> Var {
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        let t = Tensor::new(shape, data).expect("shape preserved");
        self.push(t, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let data = self.value(a).data().iter().map(|&x| x * c).collect();
        self.unary(a, data, Op::Scale(a, c))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let mut s = F::zero();
        for &x in self.value(a).data() {
            s = s + x;
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let mut s = F::zero();
        for &x in self.value(a).data() {
            s = s + x;
        }
        let n = F::of(self.value(a).len() as f64);
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s / n), Op::Mean(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        self.unary(a, data, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut s = F::zero();
            for &x in row.iter() {
                s = s + (x - max).exp();
            }
            // Subtracting the max first keeps the result exact at large logits.
            let ls = s.ln();
            for x in row.iter_mut() {
                *x = (*x - max) - ls;
            }
        }
        self.unary(a, data, Op::LogSoftmaxRows(a))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = t.cols();
        let eps = F::of(NORM_EPS);
        let mut data = t.data().to_vec();
        let mut norms = Vec::with_capacity(t.rows());
        for row in data.chunks_mut(n) {
            let nr = super::norm(row);
            if !(nr >= eps) {
                return Err(Error::DegenerateVector {
                    norm: nr.to_f64(),
                    eps: NORM_EPS,
                });
            }
            for x in row.iter_mut() {
                *x = *x / nr;
            }
            norms.push(nr);
        }
        Ok(self.unary(a, data, Op::L2Normalize { x: a, norms }))
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.cols();
        let nf = F::of(n as f64);
        let eps = F::of(LAYER_NORM_EPS);
        let mut data = t.data().to_vec();
        let mut inv_std = Vec::with_capacity(t.rows());
        for row in data.chunks_mut(n) {
            let mut mean = F::zero();
            for &x in row.iter() {
                mean = mean + x;
            }
            mean = mean / nf;
            let mut var = F::zero();
            for &x in row.iter() {
                var = var + (x - mean) * (x - mean);
            }
            var = var / nf;
            let inv = F::one() / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * inv;
            }
            inv_std.push(inv);
        }
        self.unary(a, data, Op::LayerNorm { x: a, inv_std })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|&x| gelu(x)).collect();
        self.unary(a, data, Op::Gelu(a))
    }

    /// Sums each row into a `[m, 1]` column.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.cols();
        let m = t.rows();
        let data = t
            .data()
            .chunks(n)
            .map(|r| r.iter().fold(F::zero(), |s, &x| s + x))
            .collect();
        let rg = self.rg(&[a]);
        self.push(Tensor::matrix(m, 1, data).expect("m ≥ 1"), Op::RowSum(a), rg)
    }

    /// Selects element `cols[i]` of every row `i`, giving a `[m, 1]` column.
    pub fn pick(&mut self, a: Var, cols: Vec<usize>) -> Result<Var> {
        let t = self.value(a);
        let n = t.cols();
        if cols.len() != t.rows() || cols.iter().any(|&c| c >= n) {
            return Err(Error::dim("pick", t.shape(), &[cols.len()]));
        }
        let data = cols.iter().enumerate().map(|(i, &c)| t.data()[i * n + c]).collect();
        let m = cols.len();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(m, 1, data)?, Op::Pick { x: a, cols }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::dim("concat_rows", &[], &[]))?;
        let n = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != n {
                return Err(Error::dim("concat_rows", self.shape(first), t.shape()));
            }
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::matrix(rows, n, data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Builds a matrix whose row `r` is row `rows[r]` of `a`.
    pub fn gather_rows(&mut self, a: Var, rows: Vec<usize>) -> Result<Var> {
        let t = self.value(a);
        let n = t.cols();
        if rows.is_empty() || rows.iter().any(|&r| r >= t.rows()) {
            return Err(Error::dim("gather_rows", t.shape(), &[rows.len()]));
        }
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in &rows {
            data.extend_from_slice(t.row(r));
        }
        let m = rows.len();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::GatherRows { x: a, rows }, rg))
    }

    /// Builds an `out_rows × n` matrix of zeros with row `dst` set to row `src`
    /// of `a` for every `(dst, src)` pair. Destinations must be distinct.
    pub fn scatter_rows(&mut self, a: Var, out_rows: usize, pairs: Vec<(usize, usize)>) -> Result<Var> {
        let t = self.value(a);
        let n = t.cols();
        let mut out = vec![F::zero(); out_rows * n];
        let mut seen = vec![false; out_rows];
        for &(dst, src) in &pairs {
            if dst >= out_rows || src >= t.rows() || seen[dst] {
                return Err(Error::dim("scatter_rows", t.shape(), &[out_rows, n]));
            }
            seen[dst] = true;
            out[dst * n..(dst + 1) * n].copy_from_slice(t.row(src));
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(out_rows, n, out)?, Op::ScatterRows { x: a, pairs }, rg))
    }

    /// Multi-head scaled dot-product attention over row segments.
    ///
    /// `q`, `k`, `v` are `[rows, d]` with `d` divisible by `heads`; head `h`
    /// uses columns `h·d/heads..(h+1)·d/heads`. The output has the shape of
    /// `q` with the heads concatenated back along the columns.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, segments: Vec<AttnSegment>) -> Result<Var> {
        let (nq, d) = self.matrix_dims(q, "attention")?;
        let (nk, dk) = self.matrix_dims(k, "attention")?;
        if self.shape(k) != self.shape(v) || dk != d {
            return Err(Error::dim("attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(alloc::format!("width {d} is not divisible by {heads} heads")));
        }
        for s in &segments {
            if s.q_len == 0 || s.kv_len == 0 || s.q_start + s.q_len > nq || s.kv_start + s.kv_len > nk {
                return Err(Error::dim("attention segment", &[s.q_start, s.q_len], &[s.kv_start, s.kv_len]));
            }
        }
        let dh = d / heads;
        let scale = F::of(1.0 / libm_sqrt(dh as f64));
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut out = vec![F::zero(); nq * d];
        let mut probs = Vec::new();
        let mut acc: Vec<f64> = Vec::with_capacity(dh);
        for s in &segments {
            for h in 0..heads {
                let c0 = h * dh;
                for a in 0..s.q_len {
                    let qrow = &qd[(s.q_start + a) * d + c0..(s.q_start + a) * d + c0 + dh];
                    let base = probs.len();
                    for b in 0..s.kv_len {
                        let krow = &kd[(s.kv_start + b) * d + c0..(s.kv_start + b) * d + c0 + dh];
                        probs.push(super::dot(qrow, krow) * scale);
                    }
                    softmax_in_place(&mut probs[base..]);
                    // Sums over keys run in f64 so the result does not depend
                    // on the order of the keys at single precision.
                    acc.clear();
                    acc.resize(dh, 0.0);
                    for b in 0..s.kv_len {
                        let p = probs[base + b].to_f64();
                        let vrow = &vd[(s.kv_start + b) * d + c0..(s.kv_start + b) * d + c0 + dh];
                        for (o, &x) in acc.iter_mut().zip(vrow) {
                            *o += p * x.to_f64();
                        }
                    }
                    let orow = &mut out[(s.q_start + a) * d + c0..(s.q_start + a) * d + c0 + dh];
                    for (o, &x) in orow.iter_mut().zip(&acc) {
                        *o = F::of(x);
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        let op = Op::Attention {
            q,
            k,
            v,
            heads,
            segments,
            probs,
        };
        Ok(self.push(Tensor::matrix(nq, d, out)?, op, rg))
    }

    /// Averages consecutive row groups of the given lengths.
    pub fn segment_mean(&mut self, a: Var, lengths: Vec<usize>) -> Result<Var> {
        let t = self.value(a);
        let n = t.cols();
        let total: usize = lengths.iter().sum();
        if total != t.rows() || lengths.iter().any(|&l| l == 0) {
            return Err(Error::dim("segment_mean", t.shape(), &[total]));
        }
        let mut out = vec![F::zero(); lengths.len() * n];
        let mut r = 0;
        for (s, &len) in lengths.iter().enumerate() {
            let o = &mut out[s * n..(s + 1) * n];
            for row in r..r + len {
                for (x, &y) in o.iter_mut().zip(t.row(row)) {
                    *x = *x + y;
                }
            }
            let inv = F::one() / F::of(len as f64);
            for x in o.iter_mut() {
                *x = *x * inv;
            }
            r += len;
        }
        let m = lengths.len();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::SegmentMean { x: a, lengths }, rg))
    }

    /// Populates gradients of the scalar `root` for every leaf that requires one.
    ///
    /// A graph supports one backward pass; later calls fail with
    /// [`Error::GraphConsumed`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if !self.value(root).is_scalar() {
            return Err(Error::Rank {
                shape: self.shape(root).to_vec(),
            });
        }
        self.consumed = true;
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.nodes[root.0].grad = Some(vec![F::one()]);
        for idx in (0..=root.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            let contributions = self.local_grads(idx, &g);
            for (p, pg) in contributions {
                let node = &mut self.nodes[p.0];
                match &mut node.grad {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&pg) {
                            *a = *a + *b;
                        }
                    }
                    None => node.grad = Some(pg),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, idx: usize, g: &[F]) -> Vec<(Var, Vec<F>)> {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                if needs(*a) {
                    let bt = transpose(k, n, val(*b).data());
                    let mut da = vec![F::zero(); m * k];
                    gemm_acc(m, n, k, g, &bt, &mut da);
                    res.push((*a, da));
                }
                if needs(*b) {
                    let mut db = vec![F::zero(); k * n];
                    gemm_tn_acc(m, k, n, val(*a).data(), g, &mut db);
                    res.push((*b, db));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (val(*a).shape()[0], val(*a).shape()[1]);
                res.push((*a, transpose(n, m, g)));
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    res.push((*a, g.to_vec()));
                }
                if needs(*b) {
                    res.push((*b, g.to_vec()));
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    res.push((*a, g.to_vec()));
                }
                if needs(*b) {
                    res.push((*b, g.iter().map(|&x| -x).collect()));
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    res.push((*a, g.iter().zip(val(*b).data()).map(|(&x, &y)| x * y).collect()));
                }
                if needs(*b) {
                    res.push((*b, g.iter().zip(val(*a).data()).map(|(&x, &y)| x * y).collect()));
                }
            }
            Op::AddRow(a, b) => {
                if needs(*a) {
                    res.push((*a, g.to_vec()));
                }
                if needs(*b) {
                    let n = val(*b).len();
                    let mut db = vec![F::zero(); n];
                    for row in g.chunks(n) {
                        for (x, &y) in db.iter_mut().zip(row) {
                            *x = *x + y;
                        }
                    }
                    res.push((*b, db));
                }
            }
            Op::Scale(a, c) => res.push((*a, g.iter().map(|&x| x * *c).collect())),
            Op::Sum(a) => res.push((*a, vec![g[0]; val(*a).len()])),
            Op::Mean(a) => {
                let n = val(*a).len();
                res.push((*a, vec![g[0] / F::of(n as f64); n]));
            }
            Op::SoftmaxRows(a) => {
                let n = node.value.cols();
                let mut dx = vec![F::zero(); out.len()];
                for ((y, gr), d) in out.chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)) {
                    let s = super::dot(y, gr);
                    for j in 0..n {
                        d[j] = y[j] * (gr[j] - s);
                    }
                }
                res.push((*a, dx));
            }
            Op::LogSoftmaxRows(a) => {
                let n = node.value.cols();
                let mut dx = vec![F::zero(); out.len()];
                for ((y, gr), d) in out.chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)) {
                    let s = gr.iter().fold(F::zero(), |acc, &x| acc + x);
                    for j in 0..n {
                        d[j] = gr[j] - y[j].exp() * s;
                    }
                }
                res.push((*a, dx));
            }
            Op::L2Normalize { x, norms } => {
                let n = node.value.cols();
                let mut dx = vec![F::zero(); out.len()];
                for (((y, gr), d), &nr) in out.chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)).zip(norms) {
                    let s = super::dot(y, gr);
                    for j in 0..n {
                        d[j] = (gr[j] - y[j] * s) / nr;
                    }
                }
                res.push((*x, dx));
            }
            Op::LayerNorm { x, inv_std } => {
                let n = node.value.cols();
                let nf = F::of(n as f64);
                let mut dx = vec![F::zero(); out.len()];
                for (((y, gr), d), &inv) in out.chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)).zip(inv_std) {
                    let mg = gr.iter().fold(F::zero(), |acc, &v| acc + v) / nf;
                    let mgy = super::dot(gr, y) / nf;
                    for j in 0..n {
                        d[j] = inv * (gr[j] - mg - y[j] * mgy);
                    }
                }
                res.push((*x, dx));
            }
            Op::Gelu(a) => {
                let dx = val(*a).data().iter().zip(g).map(|(&x, &gr)| gr * gelu_grad(x)).collect();
                res.push((*a, dx));
            }
            Op::RowSum(a) => {
                let n = val(*a).cols();
                let mut dx = Vec::with_capacity(val(*a).len());
                for &gr in g {
                    dx.extend(core::iter::repeat(gr).take(n));
                }
                res.push((*a, dx));
            }
            Op::Pick { x, cols } => {
                let n = val(*x).cols();
                let mut dx = vec![F::zero(); val(*x).len()];
                for (i, &c) in cols.iter().enumerate() {
                    dx[i * n + c] = g[i];
                }
                res.push((*x, dx));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).len();
                    if needs(p) {
                        res.push((p, g[off..off + len].to_vec()));
                    }
                    off += len;
                }
            }
            Op::GatherRows { x, rows } => {
                let n = val(*x).cols();
                let mut dx = vec![F::zero(); val(*x).len()];
                for (r, &src) in rows.iter().enumerate() {
                    for j in 0..n {
                        dx[src * n + j] = dx[src * n + j] + g[r * n + j];
                    }
                }
                res.push((*x, dx));
            }
            Op::ScatterRows { x, pairs } => {
                let n = val(*x).cols();
                let mut dx = vec![F::zero(); val(*x).len()];
                for &(dst, src) in pairs {
                    for j in 0..n {
                        dx[src * n + j] = dx[src * n + j] + g[dst * n + j];
                    }
                }
                res.push((*x, dx));
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            } => {
                let d = val(*q).cols();
                let dh = d / heads;
                let scale = F::of(1.0 / libm_sqrt(dh as f64));
                let (qd, kd, vd) = (val(*q).data(), val(*k).data(), val(*v).data());
                let mut dq = vec![F::zero(); qd.len()];
                let mut dk = vec![F::zero(); kd.len()];
                let mut dv = vec![F::zero(); vd.len()];
                let mut dp = Vec::new();
                let mut off = 0;
                for s in segments {
                    for h in 0..*heads {
                        let c0 = h * dh;
                        for a in 0..s.q_len {
                            let qr = (s.q_start + a) * d + c0;
                            let grow = &g[qr..qr + dh];
                            let p = &probs[off..off + s.kv_len];
                            dp.clear();
                            for b in 0..s.kv_len {
                                let vr = (s.kv_start + b) * d + c0;
                                dp.push(super::dot(grow, &vd[vr..vr + dh]));
                                for c in 0..dh {
                                    dv[vr + c] = dv[vr + c] + p[b] * grow[c];
                                }
                            }
                            let sdp = super::dot(p, &dp);
                            for b in 0..s.kv_len {
                                let ds = p[b] * (dp[b] - sdp) * scale;
                                let kr = (s.kv_start + b) * d + c0;
                                for c in 0..dh {
                                    dq[qr + c] = dq[qr + c] + ds * kd[kr + c];
                                    dk[kr + c] = dk[kr + c] + ds * qd[qr + c];
                                }
                            }
                            off += s.kv_len;
                        }
                    }
                }
                if needs(*q) {
                    res.push((*q, dq));
                }
                if needs(*k) {
                    res.push((*k, dk));
                }
                if needs(*v) {
                    res.push((*v, dv));
                }
            }
            Op::SegmentMean { x, lengths } => {
                let n = val(*x).cols();
                let mut dx = Vec::with_capacity(val(*x).len());
                for (s, &len) in lengths.iter().enumerate() {
                    let inv = F::one() / F::of(len as f64);
                    for _ in 0..len {
                        dx.extend(g[s * n..(s + 1) * n].iter().map(|&v| v * inv));
                    }
                }
                res.push((*x, dx));
            }
        }
        res.retain(|(v, _)| needs(*v));
        res
    }
}

pub(crate) fn softmax_in_place<F: Real>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut s = 0.0f64;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        s += x.to_f64();
    }
    let s = F::of(s);
    for x in row.iter_mut() {
        *x = *x / s;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<F: Real>(x: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let half = F::of(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let half = F::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::of(3.0) * a * x * x)
}

fn libm_sqrt(x: f64) -> f64 {
    num_traits::Float::sqrt(x)
}
