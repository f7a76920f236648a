//! Reverse-mode differentiation over a recorded operation tape.
//!
//! Every operation appends a node holding its output value and enough saved
//! state to run its vector-Jacobian product. [`Tape::backward`] walks the
//! nodes in reverse order once. Tensors carried on the tape are immutable.

use std::collections::HashMap;
use std::ops::Range;

use super::kernels::{gelu, gelu_grad, gemm, row_moments, softmax_rows_inplace};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Backward rule for operations defined outside this module.
///
/// Returns one gradient buffer per input (`None` when the input gets nothing).
pub trait CustomBackward: Send + Sync {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f32]) -> Vec<Option<Vec<f32>>>;
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, stats: Vec<(f32, f32)> },
    Softmax(Var),
    Attention { q: Var, k: Var, v: Var, probs: Vec<f32>, scale: f32 },
    SplitHeads(Var, usize),
    MergeHeads(Var, usize),
    PrependToken { x: Var, token: Var },
    SliceTokens { x: Var, start: usize },
    SelectColumns { x: Var, ranges: Vec<Range<usize>> },
    MeanTokens(Var),
    Concat(Vec<Var>),
    Reshape(Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    Mse { pred: Var, target: Var },
    Custom { inputs: Vec<Var>, rule: Box<dyn CustomBackward> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation graph for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by one backward pass, keyed by leaf and parameter.
#[derive(Debug)]
pub struct Gradients {
    leaves: HashMap<Var, Vec<f32>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of a leaf or parameter node, if it received one.
    pub fn wrt(&self, v: Var) -> Option<&[f32]> {
        self.leaves.get(&v).map(Vec::as_slice)
    }

    pub fn param(&self, id: ParamId) -> Option<&[f32]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.wrt(*v))
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f32])> {
        self.params
            .iter()
            .filter_map(|(p, v)| self.wrt(*v).map(|g| (*p, g)))
    }
}

/// Splits a shape `[.., t, d]` into `(batch, t, d)`; rank 2 means batch 1.
fn btd(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    match *shape {
        [t, d] => Ok((1, t, d)),
        [b, t, d] => Ok((b, t, d)),
        _ => Err(Error::dim(op, shape, &[])),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Leaf => value.requires_grad(),
            Op::Param => value.requires_grad(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => self.needs(*a) || self.needs(*b),
            Op::Linear { x, w, b } => {
                self.needs(*x) || self.needs(*w) || b.is_some_and(|b| self.needs(b))
            }
            Op::Scale(a, _)
            | Op::Gelu(a)
            | Op::Softmax(a)
            | Op::SplitHeads(a, _)
            | Op::MergeHeads(a, _)
            | Op::MeanTokens(a)
            | Op::Reshape(a)
            | Op::Transpose(a)
            | Op::Sum(a)
            | Op::Mean(a) => self.needs(*a),
            Op::SliceTokens { x, .. } | Op::SelectColumns { x, .. } => self.needs(*x),
            Op::LayerNorm { x, gain, bias, .. } => {
                self.needs(*x) || self.needs(*gain) || self.needs(*bias)
            }
            Op::Attention { q, k, v, .. } => self.needs(*q) || self.needs(*k) || self.needs(*v),
            Op::PrependToken { x, token } => self.needs(*x) || self.needs(*token),
            Op::Concat(parts) => parts.iter().any(|p| self.needs(*p)),
            Op::Mse { pred, target } => self.needs(*pred) || self.needs(*target),
            Op::Custom { inputs, .. } => inputs.iter().any(|p| self.needs(*p)),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf)
    }

    /// A leaf that receives a gradient when `t.requires_grad()` is set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Loads a parameter once per tape. Frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = store.get(id);
        let value = Tensor::new(t.shape().to_vec(), t.data().to_vec())
            .expect("stored tensor is valid")
            .with_requires_grad(t.requires_grad());
        let v = self.push(value, Op::Param);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(Error::dim("matmul", sa, sb)),
        };
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b)))
    }

    /// `x · w + b` applied over the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (k, n) = match sw[..] {
            [k, n] if sx.last() == Some(&k) => (k, n),
            _ => return Err(Error::dim("linear", &sx, &sw)),
        };
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(Error::dim("linear bias", self.shape(b), &[n]));
            }
        }
        let rows = self.value(x).len() / k.max(1);
        let mut out = vec![0.0; rows * n];
        if let Some(b) = b {
            let bias = self.value(b).data();
            out.chunks_mut(n).for_each(|r| r.copy_from_slice(bias));
        }
        gemm(rows, k, n, self.value(x).data(), false, self.value(w).data(), false, &mut out, b.is_some());
        let mut shape = sx;
        *shape.last_mut().unwrap() = n;
        Ok(self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b }))
    }

    /// Elementwise sum; `b` may broadcast over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::dim("add", sa, sb));
        }
        let bd = self.value(b).data();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_mut(bd.len()) {
            chunk.iter_mut().zip(bd).for_each(|(o, v)| *o += v);
        }
        let shape = sa.to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("mul", self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Var {
        let t = self.value(a);
        let out = t.data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        self.push(value, Op::Scale(a, factor))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = t.data().iter().map(|&x| gelu(x)).collect();
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        self.push(value, Op::Gelu(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gain)));
        }
        let xt = self.value(x);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut out = vec![0.0; xt.len()];
        let mut stats = Vec::with_capacity(xt.rows());
        for (row, o) in xt.data().chunks(d).zip(out.chunks_mut(d)) {
            let (mean, rstd) = row_moments(row, eps);
            for j in 0..d {
                o[j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
            stats.push((mean, rstd));
        }
        let shape = xt.shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::LayerNorm { x, gain, bias, stats }))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = t.data().to_vec();
        softmax_rows_inplace(&mut out, t.last_dim());
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        self.push(value, Op::Softmax(a))
    }

    /// Single-head scaled dot-product attention `softmax(q·kᵀ/√d)·v`, batched
    /// over a leading axis when the inputs are rank 3.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != sk.len() || sk.len() != sv.len() {
            return Err(Error::dim("attention", sq, sk));
        }
        let (bq, tq, d) = btd(sq, "attention")?;
        let (bk, tk, dk) = btd(sk, "attention")?;
        let (bv, tv, dv) = btd(sv, "attention")?;
        if bq != bk || d != dk {
            return Err(Error::dim("attention q/k", sq, sk));
        }
        if bk != bv || tk != tv {
            return Err(Error::dim("attention k/v", sk, sv));
        }
        if tk == 0 {
            return Err(Error::dim("attention k", sk, &[]));
        }
        let scale = 1.0 / (d as f32).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; bq * tq * tk];
        let mut out = vec![0.0; bq * tq * dv];
        for b in 0..bq {
            let p = &mut probs[b * tq * tk..(b + 1) * tq * tk];
            gemm(tq, d, tk, &qd[b * tq * d..], false, &kd[b * tk * d..], true, p, false);
            p.iter_mut().for_each(|s| *s *= scale);
            softmax_rows_inplace(p, tk);
            gemm(tq, tk, dv, p, false, &vd[b * tk * dv..], false, &mut out[b * tq * dv..], false);
        }
        let mut shape = sq.to_vec();
        *shape.last_mut().unwrap() = dv;
        Ok(self.push(Tensor::new(shape, out)?, Op::Attention { q, k, v, probs, scale }))
    }

    /// `[B, T, H·dh] -> [B·H, T, dh]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let (b, t, d) = btd(self.shape(x), "split_heads")?;
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
        }
        if heads == 1 && self.shape(x).len() == 3 {
            return Ok(x);
        }
        let dh = d / heads;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for bi in 0..b {
            for ti in 0..t {
                let row = &src[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                for h in 0..heads {
                    let dst = ((bi * heads + h) * t + ti) * dh;
                    out[dst..dst + dh].copy_from_slice(&row[h * dh..(h + 1) * dh]);
                }
            }
        }
        Ok(self.push(Tensor::new(vec![b * heads, t, dh], out)?, Op::SplitHeads(x, heads)))
    }

    /// `[B·H, T, dh] -> [B, T, H·dh]`.
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let (bh, t, dh) = btd(self.shape(x), "merge_heads")?;
        if heads == 0 || bh % heads != 0 {
            return Err(Error::dim("merge_heads", self.shape(x), &[heads]));
        }
        if heads == 1 {
            return Ok(x);
        }
        let b = bh / heads;
        let d = heads * dh;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for bi in 0..b {
            for ti in 0..t {
                for h in 0..heads {
                    let s = ((bi * heads + h) * t + ti) * dh;
                    let dst = (bi * t + ti) * d + h * dh;
                    out[dst..dst + dh].copy_from_slice(&src[s..s + dh]);
                }
            }
        }
        Ok(self.push(Tensor::new(vec![b, t, d], out)?, Op::MergeHeads(x, heads)))
    }

    /// Prepends the same `d`-vector token to every sequence of `x: [B, T, d]`.
    pub fn prepend_token(&mut self, x: Var, token: Var) -> Result<Var> {
        let (b, t, d) = match *self.shape(x) {
            [b, t, d] => (b, t, d),
            _ => return Err(Error::dim("prepend_token", self.shape(x), &[])),
        };
        if self.value(token).len() != d {
            return Err(Error::dim("prepend_token", self.shape(x), self.shape(token)));
        }
        let (xd, tok) = (self.value(x).data(), self.value(token).data());
        let mut out = Vec::with_capacity(b * (t + 1) * d);
        for bi in 0..b {
            out.extend_from_slice(tok);
            out.extend_from_slice(&xd[bi * t * d..(bi + 1) * t * d]);
        }
        Ok(self.push(Tensor::new(vec![b, t + 1, d], out)?, Op::PrependToken { x, token }))
    }

    /// Tokens `start..start+len` of every sequence in `x: [B, T, d]`.
    pub fn slice_tokens(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (b, t, d) = match *self.shape(x) {
            [b, t, d] => (b, t, d),
            _ => return Err(Error::dim("slice_tokens", self.shape(x), &[])),
        };
        if start + len > t {
            return Err(Error::dim("slice_tokens", self.shape(x), &[start, len]));
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(b * len * d);
        for bi in 0..b {
            out.extend_from_slice(&xd[(bi * t + start) * d..(bi * t + start + len) * d]);
        }
        Ok(self.push(Tensor::new(vec![b, len, d], out)?, Op::SliceTokens { x, start }))
    }

    /// Columns of a matrix `[R, C]` restricted to `ranges`, concatenated in
    /// the given order.
    pub fn select_columns(&mut self, x: Var, ranges: &[Range<usize>]) -> Result<Var> {
        let (r, c) = match *self.shape(x) {
            [r, c] => (r, c),
            _ => return Err(Error::dim("select_columns", self.shape(x), &[])),
        };
        if ranges.iter().any(|g| g.start > g.end || g.end > c) {
            return Err(Error::Input(format!("column ranges out of bounds for width {c}")));
        }
        let width: usize = ranges.iter().map(|g| g.len()).sum();
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(r * width);
        for ri in 0..r {
            for g in ranges {
                out.extend_from_slice(&xd[ri * c + g.start..ri * c + g.end]);
            }
        }
        let t = Tensor::new(vec![r, width], out)?;
        Ok(self.push(t, Op::SelectColumns { x, ranges: ranges.to_vec() }))
    }

    /// Token `index` of every sequence, as `[B, d]`.
    pub fn select_token(&mut self, x: Var, index: usize) -> Result<Var> {
        let s = self.slice_tokens(x, index, 1)?;
        let (b, d) = (self.shape(x)[0], self.shape(x)[2]);
        self.reshape(s, &[b, d])
    }

    /// Average over the token axis: `[B, T, d] -> [B, d]`.
    pub fn mean_tokens(&mut self, x: Var) -> Result<Var> {
        let (b, t, d) = match *self.shape(x) {
            [b, t, d] if t > 0 => (b, t, d),
            _ => return Err(Error::dim("mean_tokens", self.shape(x), &[])),
        };
        let xd = self.value(x).data();
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            for j in 0..d {
                let s: f64 = (0..t).map(|ti| xd[(bi * t + ti) * d + j] as f64).sum();
                out[bi * d + j] = (s / t as f64) as f32;
            }
        }
        Ok(self.push(Tensor::new(vec![b, d], out)?, Op::MeanTokens(x)))
    }

    /// Concatenation along the last axis; leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Input("concat of nothing".into()))?;
        let lead = &self.shape(*first)[..self.shape(*first).len() - 1];
        let rows: usize = lead.iter().product();
        let mut width = 0;
        for p in parts {
            let s = self.shape(*p);
            if &s[..s.len() - 1] != lead {
                return Err(Error::dim("concat", self.shape(*first), s));
            }
            width += s[s.len() - 1];
        }
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(r));
            }
        }
        let mut shape = lead.to_vec();
        shape.push(width);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(parts.to_vec())))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = match *self.shape(a) {
            [r, c] => (r, c),
            _ => return Err(Error::dim("transpose", self.shape(a), &[])),
        };
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().map(|&v| v as f64).sum();
        self.push(Tensor::scalar(s as f32), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: f64 = t.data().iter().map(|&v| v as f64).sum();
        let n = t.len().max(1) as f64;
        self.push(Tensor::scalar((s / n) as f32), Op::Mean(a))
    }

    /// Mean squared error between equally shaped tensors.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(Error::dim("mse", self.shape(pred), self.shape(target)));
        }
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let s: f64 = p
            .iter()
            .zip(t)
            .map(|(a, b)| {
                let d = (a - b) as f64;
                d * d
            })
            .sum();
        let n = p.len().max(1) as f64;
        Ok(self.push(Tensor::scalar((s / n) as f32), Op::Mse { pred, target }))
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, rule: Box<dyn CustomBackward>) -> Var {
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
        )
    }

    /// Gradients of the scalar `loss` with respect to every leaf and parameter
    /// that requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Input(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        let mut leaves = HashMap::new();
        if self.needs(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match node.op {
                Op::Leaf | Op::Param => {
                    leaves.insert(Var(i), g);
                }
                _ => {
                    for (v, contribution) in self.vjp(node, &g) {
                        if !self.needs(v) {
                            continue;
                        }
                        match &mut grads[v.0] {
                            Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                            slot @ None => *slot = Some(contribution),
                        }
                    }
                }
            }
        }
        let mut params: Vec<(ParamId, Var)> = self.params.iter().map(|(p, v)| (*p, *v)).collect();
        params.sort();
        Ok(Gradients { leaves, params })
    }

    /// Vector-Jacobian product of one node: contributions to its inputs.
    fn vjp(&self, node: &Node, g: &[f32]) -> Vec<(Var, Vec<f32>)> {
        let val = |v: Var| self.value(v);
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, val(*b).data(), true, &mut da, false);
                    out.push((*a, da));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, val(*a).data(), true, g, false, &mut db, false);
                    out.push((*b, db));
                }
            }
            Op::Linear { x, w, b } => {
                let (k, n) = (val(*w).shape()[0], val(*w).shape()[1]);
                let rows = g.len() / n.max(1);
                if self.needs(*x) {
                    let mut dx = vec![0.0; rows * k];
                    gemm(rows, n, k, g, false, val(*w).data(), true, &mut dx, false);
                    out.push((*x, dx));
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; k * n];
                    gemm(k, rows, n, val(*x).data(), true, g, false, &mut dw, false);
                    out.push((*w, dw));
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = vec![0.0f64; n];
                        for r in g.chunks(n) {
                            db.iter_mut().zip(r).for_each(|(a, v)| *a += *v as f64);
                        }
                        out.push((*b, db.into_iter().map(|v| v as f32).collect()));
                    }
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    out.push((*a, g.to_vec()));
                }
                if self.needs(*b) {
                    let n = val(*b).len();
                    let mut db = vec![0.0f64; n];
                    for chunk in g.chunks(n) {
                        db.iter_mut().zip(chunk).for_each(|(a, v)| *a += *v as f64);
                    }
                    out.push((*b, db.into_iter().map(|v| v as f32).collect()));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    out.push((*a, g.iter().zip(val(*b).data()).map(|(g, y)| g * y).collect()));
                }
                if self.needs(*b) {
                    out.push((*b, g.iter().zip(val(*a).data()).map(|(g, x)| g * x).collect()));
                }
            }
            Op::Scale(a, f) => out.push((*a, g.iter().map(|v| v * f).collect())),
            Op::Gelu(a) => out.push((
                *a,
                g.iter()
                    .zip(val(*a).data())
                    .map(|(g, &x)| g * gelu_grad(x))
                    .collect(),
            )),
            Op::LayerNorm { x, gain, bias, stats } => {
                let d = val(*x).last_dim();
                let gn = val(*gain).data();
                let xd = val(*x).data();
                let mut dx = vec![0.0; xd.len()];
                let mut dgain = vec![0.0f64; d];
                let mut dbias = vec![0.0f64; d];
                for (r, &(mean, rstd)) in stats.iter().enumerate() {
                    let xr = &xd[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mut s1 = 0.0f64;
                    let mut s2 = 0.0f64;
                    for j in 0..d {
                        let xhat = ((xr[j] - mean) * rstd) as f64;
                        let dxhat = (gr[j] * gn[j]) as f64;
                        s1 += dxhat;
                        s2 += dxhat * xhat;
                        dgain[j] += gr[j] as f64 * xhat;
                        dbias[j] += gr[j] as f64;
                    }
                    let (m1, m2) = (s1 / d as f64, s2 / d as f64);
                    for j in 0..d {
                        let xhat = ((xr[j] - mean) * rstd) as f64;
                        let dxhat = (gr[j] * gn[j]) as f64;
                        dx[r * d + j] = (rstd as f64 * (dxhat - m1 - xhat * m2)) as f32;
                    }
                }
                if self.needs(*x) {
                    out.push((*x, dx));
                }
                if self.needs(*gain) {
                    out.push((*gain, dgain.into_iter().map(|v| v as f32).collect()));
                }
                if self.needs(*bias) {
                    out.push((*bias, dbias.into_iter().map(|v| v as f32).collect()));
                }
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let c = node.value.last_dim();
                let mut da = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(c).zip(g.chunks(c)).zip(da.chunks_mut(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
                    for j in 0..c {
                        dr[j] = (yr[j] as f64 * (gr[j] as f64 - dot)) as f32;
                    }
                }
                out.push((*a, da));
            }
            Op::Attention { q, k, v, probs, scale } => {
                let (b, tq, d) = btd(val(*q).shape(), "attention").expect("checked");
                let (_, tk, _) = btd(val(*k).shape(), "attention").expect("checked");
                let dv = val(*v).last_dim();
                let (qd, kd, vd) = (val(*q).data(), val(*k).data(), val(*v).data());
                let mut dq = vec![0.0; qd.len()];
                let mut dk = vec![0.0; kd.len()];
                let mut dvv = vec![0.0; vd.len()];
                let mut dp = vec![0.0; tq * tk];
                for bi in 0..b {
                    let p = &probs[bi * tq * tk..(bi + 1) * tq * tk];
                    let gb = &g[bi * tq * dv..(bi + 1) * tq * dv];
                    gemm(tk, tq, dv, p, true, gb, false, &mut dvv[bi * tk * dv..], false);
                    gemm(tq, dv, tk, gb, false, &vd[bi * tk * dv..], true, &mut dp, false);
                    for r in 0..tq {
                        let pr = &p[r * tk..(r + 1) * tk];
                        let dr = &mut dp[r * tk..(r + 1) * tk];
                        let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
                        for j in 0..tk {
                            dr[j] = (pr[j] as f64 * (dr[j] as f64 - dot)) as f32 * scale;
                        }
                    }
                    gemm(tq, tk, d, &dp, false, &kd[bi * tk * d..], false, &mut dq[bi * tq * d..], false);
                    gemm(tk, tq, d, &dp, true, &qd[bi * tq * d..], false, &mut dk[bi * tk * d..], false);
                }
                if self.needs(*q) {
                    out.push((*q, dq));
                }
                if self.needs(*k) {
                    out.push((*k, dk));
                }
                if self.needs(*v) {
                    out.push((*v, dvv));
                }
            }
            Op::SplitHeads(x, heads) => {
                let (b, t, d) = btd(val(*x).shape(), "split_heads").expect("checked");
                let dh = d / heads;
                let mut dx = vec![0.0; g.len()];
                for bi in 0..b {
                    for ti in 0..t {
                        for h in 0..*heads {
                            let s = ((bi * heads + h) * t + ti) * dh;
                            let dst = (bi * t + ti) * d + h * dh;
                            dx[dst..dst + dh].copy_from_slice(&g[s..s + dh]);
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::MergeHeads(x, heads) => {
                let (bh, t, dh) = btd(val(*x).shape(), "merge_heads").expect("checked");
                let b = bh / heads;
                let d = heads * dh;
                let mut dx = vec![0.0; g.len()];
                for bi in 0..b {
                    for ti in 0..t {
                        for h in 0..*heads {
                            let dst = ((bi * heads + h) * t + ti) * dh;
                            let s = (bi * t + ti) * d + h * dh;
                            dx[dst..dst + dh].copy_from_slice(&g[s..s + dh]);
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::PrependToken { x, token } => {
                let (b, t1, d) = btd(node.value.shape(), "prepend_token").expect("checked");
                let t = t1 - 1;
                if self.needs(*x) {
                    let mut dx = Vec::with_capacity(b * t * d);
                    for bi in 0..b {
                        dx.extend_from_slice(&g[(bi * t1 + 1) * d..(bi + 1) * t1 * d]);
                    }
                    out.push((*x, dx));
                }
                if self.needs(*token) {
                    let mut dt = vec![0.0f64; d];
                    for bi in 0..b {
                        dt.iter_mut()
                            .zip(&g[bi * t1 * d..(bi * t1 + 1) * d])
                            .for_each(|(a, v)| *a += *v as f64);
                    }
                    out.push((*token, dt.into_iter().map(|v| v as f32).collect()));
                }
            }
            Op::SliceTokens { x, start } => {
                let (b, t, d) = btd(val(*x).shape(), "slice_tokens").expect("checked");
                let len = node.value.shape()[1];
                let mut dx = vec![0.0; b * t * d];
                for bi in 0..b {
                    let dst = (bi * t + start) * d;
                    dx[dst..dst + len * d].copy_from_slice(&g[bi * len * d..(bi + 1) * len * d]);
                }
                out.push((*x, dx));
            }
            Op::SelectColumns { x, ranges } => {
                let (r, c) = (val(*x).shape()[0], val(*x).shape()[1]);
                let width = node.value.shape()[1];
                let mut dx = vec![0.0; r * c];
                for ri in 0..r {
                    let mut off = ri * width;
                    for span in ranges {
                        dx[ri * c + span.start..ri * c + span.end].copy_from_slice(&g[off..off + span.len()]);
                        off += span.len();
                    }
                }
                out.push((*x, dx));
            }
            Op::MeanTokens(x) => {
                let (b, t, d) = btd(val(*x).shape(), "mean_tokens").expect("checked");
                let inv = 1.0 / t as f32;
                let mut dx = vec![0.0; b * t * d];
                for bi in 0..b {
                    for ti in 0..t {
                        for j in 0..d {
                            dx[(bi * t + ti) * d + j] = g[bi * d + j] * inv;
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::Concat(parts) => {
                let width = node.value.last_dim();
                let rows = node.value.rows();
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).last_dim();
                    if self.needs(*p) {
                        let mut dp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * width + offset..r * width + offset + w]);
                        }
                        out.push((*p, dp));
                    }
                    offset += w;
                }
            }
            Op::Reshape(a) => out.push((*a, g.to_vec())),
            Op::Transpose(a) => {
                let (r, c) = (val(*a).shape()[0], val(*a).shape()[1]);
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = g[j * r + i];
                    }
                }
                out.push((*a, da));
            }
            Op::Sum(a) => out.push((*a, vec![g[0]; val(*a).len()])),
            Op::Mean(a) => {
                let n = val(*a).len().max(1);
                out.push((*a, vec![g[0] / n as f32; n]));
            }
            Op::Mse { pred, target } => {
                let (p, t) = (val(*pred).data(), val(*target).data());
                let c = 2.0 * g[0] / p.len().max(1) as f32;
                let dp: Vec<f32> = p.iter().zip(t).map(|(a, b)| c * (a - b)).collect();
                if self.needs(*target) {
                    out.push((*target, dp.iter().map(|v| -v).collect()));
                }
                if self.needs(*pred) {
                    out.push((*pred, dp));
                }
            }
            Op::Custom { inputs, rule } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                let gs = rule.backward(&ins, &node.value, g);
                for (v, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        out.push((*v, gi));
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, shape: &[usize], data: Vec<f32>) -> Var {
        tape.leaf(Tensor::new(shape.to_vec(), data).unwrap().with_requires_grad(true))
    }

    #[test]
    fn matmul_hand_case() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = tape.constant(Tensor::from_rows(&[vec![5.0], vec![6.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[17.0, 39.0]);
        assert_eq!(tape.shape(c), &[2, 1]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        match tape.matmul(a, b) {
            Err(Error::Dimension { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn shared_input_gradients_accumulate() {
        // f(w) = sum(w * w) -> 2w
        let mut tape = Tape::new();
        let w = leaf(&mut tape, &[2], vec![1.0, 2.0]);
        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(w).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn split_merge_round_trip() {
        let mut tape = Tape::new();
        let data: Vec<f32> = (0..24).map(|v| v as f32).collect();
        let x = tape.constant(Tensor::new(vec![2, 3, 4], data.clone()).unwrap());
        let s = tape.split_heads(x, 2).unwrap();
        assert_eq!(tape.shape(s), &[4, 3, 2]);
        // batch 0, head 1, token 0 = x[0,0,2..4]
        assert_eq!(tape.value(s).row(3), &[2.0, 3.0]);
        let m = tape.merge_heads(s, 2).unwrap();
        assert_eq!(tape.value(m).data(), &data[..]);
    }

    #[test]
    fn broadcast_add_sums_gradient() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[3, 2], vec![0.0; 6]);
        let b = leaf(&mut tape, &[2], vec![1.0, 2.0]);
        let c = tape.add(a, b).unwrap();
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(b).unwrap(), &[3.0, 3.0]);
        assert_eq!(g.wrt(a).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let s = tape.sum(a);
        let g = tape.backward(s).unwrap();
        assert!(g.wrt(a).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[2], vec![1.0, 2.0]);
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn prepend_slice_mean_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 3, 2], (0..12).map(|v| v as f32).collect()).unwrap());
        let tok = tape.constant(Tensor::vector(vec![-1.0, -2.0]));
        let y = tape.prepend_token(x, tok).unwrap();
        assert_eq!(tape.shape(y), &[2, 4, 2]);
        assert_eq!(tape.value(y).row(4), &[-1.0, -2.0]);
        let s = tape.slice_tokens(y, 1, 3).unwrap();
        assert_eq!(tape.value(s).data(), tape.value(x).data());
        let m = tape.mean_tokens(x).unwrap();
        assert_eq!(tape.value(m).data(), &[2.0, 3.0, 8.0, 9.0]);
    }

    #[test]
    fn select_columns_gathers_and_scatters() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2, 5], (0..10).map(|v| v as f32).collect());
        let y = tape.select_columns(x, &[3..5, 0..1]).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 4.0, 0.0, 8.0, 9.0, 5.0]);
        let w = tape.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let p = tape.mul(y, w).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[3.0, 0.0, 0.0, 1.0, 2.0, 6.0, 0.0, 0.0, 4.0, 5.0]);
        assert!(tape.select_columns(x, &[4..6]).is_err());
    }
}
