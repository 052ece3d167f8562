//! Tape of executed operations and the reverse sweep over it.
//!
//! Every op appends a node holding its forward value and an [`Op`] record
//! naming its parents. Nodes are only ever appended, so the tape order is a
//! topological order and `backward` is a single reverse scan.

use std::collections::HashMap;
use std::sync::Arc;

use super::kernels::{broadcast_shape, for_each_broadcast, gemm, numel, split_axis, Conv3dGeom};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

const LN_EPS: f32 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy)]
enum UnOp {
    Neg,
    Scale(f32),
    AddScalar(f32),
    Relu,
    Gelu,
    Sigmoid,
    Softplus,
    Exp,
    Log,
    Clamp(f32, f32),
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Binary(BinOp, Var, Var),
    Unary(UnOp, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice { src: Var, axis: usize, start: usize },
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm(Var),
    Embedding(Var, Arc<Vec<usize>>),
    SumAll(Var),
    MeanAll(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    SqL2(Var),
    Pick(Var, Arc<Vec<usize>>),
    Conv3d { x: Var, w: Var, b: Var, geom: Conv3dGeom },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Binary(_, a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Unary(_, a)
            | Op::Transpose(a)
            | Op::Permute(a, _)
            | Op::Reshape(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::LayerNorm(a)
            | Op::Embedding(a, _)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::SumAxis(a, _)
            | Op::MeanAxis(a, _)
            | Op::SqL2(a)
            | Op::Pick(a, _) => vec![*a],
            Op::Slice { src, .. } => vec![*src],
            Op::Concat(vs, _) => vs.clone(),
            Op::Conv3d { x, w, b, .. } => vec![*x, *w, *b],
        }
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Arc<Vec<f32>>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

/// Reverse-mode tape. Build one per forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Gradients are tracked iff `t.requires_grad()`.
    pub fn input(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad();
        let shape = t.shape().to_vec();
        self.push(shape, Arc::new(t.into_data()), Op::Leaf, requires_grad)
    }

    /// Constant leaf from a shape and buffer.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f32>) -> Result<Var> {
        Ok(self.input(Tensor::new(shape.to_vec(), data)?))
    }

    /// Binds a stored parameter. Binding the same id twice returns the same
    /// node, so shared weights accumulate a single gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.shape().to_vec(), p.shared_value(), Op::Leaf, p.trainable());
        self.bound.insert(id, v);
        v
    }

    /// Node bound to `id`, if this graph has read it.
    pub fn bound_param(&self, id: ParamId) -> Option<Var> {
        self.bound.get(&id).copied()
    }

    /// Every parameter this graph has read, with its node.
    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound.iter().map(|(&id, &v)| (id, v))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Snapshot of a node as a [`Tensor`], gradient included.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        let mut t = Tensor::new(n.shape.clone(), n.value.to_vec())
            .expect("node shapes are valid")
            .with_requires_grad(n.requires_grad);
        t.set_grad(n.grad.clone());
        t
    }

    /// True when every node's parents precede it.
    pub fn is_topological(&self) -> bool {
        self.nodes
            .iter()
            .enumerate()
            .all(|(i, n)| n.op.parents().iter().all(|p| p.0 < i))
    }

    /// Resets accumulated gradients on every node.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Arc<Vec<f32>>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, shape: Vec<usize>, value: Vec<f32>, op: Op) -> Var {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(shape, Arc::new(value), op, requires_grad)
    }

    // ---- elementwise binary ops with numpy broadcasting ----

    fn binary(&mut self, name: &'static str, kind: BinOp, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out = broadcast_shape(&sa, &sb).ok_or_else(|| Error::shape(name, &sa, &sb))?;
        let (va, vb) = (self.value(a), self.value(b));
        let mut y = vec![0.0; numel(&out)];
        let f: fn(f32, f32) -> f32 = match kind {
            BinOp::Add => |x, y| x + y,
            BinOp::Sub => |x, y| x - y,
            BinOp::Mul => |x, y| x * y,
            BinOp::Div => |x, y| x / y,
        };
        for_each_broadcast(&out, &sa, &sb, |o, ia, ib| y[o] = f(va[ia], vb[ib]));
        Ok(self.derived(out, y, Op::Binary(kind, a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", BinOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", BinOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", BinOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", BinOp::Div, a, b)
    }

    // ---- elementwise unary ops ----

    fn unary(&mut self, kind: UnOp, a: Var) -> Var {
        let x = self.value(a);
        let y: Vec<f32> = match kind {
            UnOp::Neg => x.iter().map(|v| -v).collect(),
            UnOp::Scale(c) => x.iter().map(|v| v * c).collect(),
            UnOp::AddScalar(c) => x.iter().map(|v| v + c).collect(),
            UnOp::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
            UnOp::Gelu => x.iter().map(|&v| gelu(v)).collect(),
            UnOp::Sigmoid => x.iter().map(|&v| sigmoid(v)).collect(),
            UnOp::Softplus => x.iter().map(|&v| softplus(v)).collect(),
            UnOp::Exp => x.iter().map(|v| v.exp()).collect(),
            UnOp::Log => x.iter().map(|v| v.ln()).collect(),
            UnOp::Clamp(lo, hi) => x.iter().map(|v| v.clamp(lo, hi)).collect(),
        };
        let shape = self.shape(a).to_vec();
        self.derived(shape, y, Op::Unary(kind, a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnOp::Neg, a)
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        self.unary(UnOp::Scale(c), a)
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        self.unary(UnOp::AddScalar(c), a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnOp::Relu, a)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(UnOp::Gelu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnOp::Sigmoid, a)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(UnOp::Softplus, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnOp::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(UnOp::Log, a)
    }

    /// Clamp into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f32, hi: f32) -> Var {
        self.unary(UnOp::Clamp(lo, hi), a)
    }

    // ---- linear algebra and layout ----

    /// `[.., m, k] × [k, n]` (shared right operand) or batched
    /// `[B.., m, k] × [B.., k, n]` with identical batch extents.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        let mut y = vec![0.0; numel(&out_shape)];
        if sb.len() == 2 {
            let rows = va.len() / k;
            gemm(rows, k, n, va, false, vb, false, &mut y, false);
        } else {
            if sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(Error::shape("matmul", &sa, &sb));
            }
            let batch = numel(&sa[..sa.len() - 2]);
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &va[i * m * k..(i + 1) * m * k],
                    false,
                    &vb[i * k * n..(i + 1) * k * n],
                    false,
                    &mut y[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        Ok(self.derived(out_shape, y, Op::MatMul(a, b)))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("transpose", &s, &[]));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let x = self.value(a);
        let mut y = vec![0.0; x.len()];
        for (blk_in, blk_out) in x.chunks(r * c).zip(y.chunks_mut(r * c)) {
            transpose_block(blk_in, blk_out, r, c);
        }
        let mut out = s.clone();
        out.swap(s.len() - 2, s.len() - 1);
        Ok(self.derived(out, y, Op::Transpose(a)))
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", &s, perm));
        }
        let out: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let y = permute_data(self.value(a), &s, perm);
        Ok(self.derived(out, y, Op::Permute(a, perm.to_vec())))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let s = self.shape(a);
        if numel(s) != numel(shape) || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("reshape", s, shape));
        }
        let value = Arc::clone(&self.nodes[a.0].value);
        let requires_grad = self.nodes[a.0].requires_grad;
        Ok(self.push(shape.to_vec(), value, Op::Reshape(a), requires_grad))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut y = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let ext = self.shape(*p)[axis];
                let v = self.value(*p);
                y.extend_from_slice(&v[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let mut out = base;
        out[axis] = total;
        Ok(self.derived(out, y, Op::Concat(parts.to_vec(), axis)))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::shape("slice", &s, &[axis, start, len]));
        }
        let (outer, ext, inner) = split_axis(&s, axis);
        let x = self.value(a);
        let mut y = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            y.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut out = s;
        out[axis] = len;
        Ok(self.derived(out, y, Op::Slice { src: a, axis, start }))
    }

    // ---- normalisation ----

    /// Softmax along the last axis. Entries equal to `-inf` get weight 0.
    pub fn softmax(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        let c = *s.last().expect("rank >= 1");
        let mut y = self.value(a).to_vec();
        for row in y.chunks_mut(c) {
            softmax_in_place(row);
        }
        self.derived(s, y, Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        let c = *s.last().expect("rank >= 1");
        let mut y = self.value(a).to_vec();
        for row in y.chunks_mut(c) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f32>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.derived(s, y, Op::LogSoftmax(a))
    }

    /// Normalises the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        let c = *s.last().expect("rank >= 1");
        let mut y = self.value(a).to_vec();
        for row in y.chunks_mut(c) {
            let (mean, rstd) = moments(row);
            row.iter_mut().for_each(|v| *v = (*v - mean) * rstd);
        }
        self.derived(s, y, Op::LayerNorm(a))
    }

    // ---- gathers and reductions ----

    /// Rows of `table: [V, d]` selected by `ids`, shaped `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 || ids.is_empty() {
            return Err(Error::shape("embedding", &s, &[ids.len()]));
        }
        let (v, d) = (s[0], s[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Invalid(format!("embedding id {bad} out of range for {v} rows")));
        }
        let t = self.value(table);
        let mut y = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            y.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        Ok(self.derived(vec![ids.len(), d], y, Op::Embedding(table, Arc::new(ids.to_vec()))))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let y = vec![self.value(a).iter().sum()];
        self.derived(vec![1], y, Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let y = vec![x.iter().sum::<f32>() / x.len() as f32];
        self.derived(vec![1], y, Op::MeanAll(a))
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(Error::shape(if mean { "mean_axis" } else { "sum_axis" }, &s, &[axis]));
        }
        let (outer, ext, inner) = split_axis(&s, axis);
        let x = self.value(a);
        let mut y = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..ext {
                let src = &x[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                for (d, v) in y[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
        if mean {
            y.iter_mut().for_each(|v| *v /= ext as f32);
        }
        let mut out = s;
        out.remove(axis);
        if out.is_empty() {
            out.push(1);
        }
        let op = if mean { Op::MeanAxis(a, axis) } else { Op::SumAxis(a, axis) };
        Ok(self.derived(out, y, op))
    }

    /// Sum over `axis`, which is removed from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, false)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, true)
    }

    /// Squared L2 norm along the last axis.
    pub fn sq_l2(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        let c = *s.last().expect("rank >= 1");
        let y: Vec<f32> = self
            .value(a)
            .chunks(c)
            .map(|r| r.iter().map(|v| v * v).sum())
            .collect();
        let mut out = s[..s.len() - 1].to_vec();
        if out.is_empty() {
            out.push(1);
        }
        self.derived(out, y, Op::SqL2(a))
    }

    /// `out[i] = x[i, idx[i]]` along the last axis.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let c = *s.last().expect("rank >= 1");
        let rows = numel(&s) / c;
        if idx.len() != rows || idx.iter().any(|&i| i >= c) {
            return Err(Error::shape("pick", &s, &[idx.len()]));
        }
        let x = self.value(a);
        let y = idx.iter().enumerate().map(|(r, &i)| x[r * c + i]).collect();
        let mut out = s[..s.len() - 1].to_vec();
        if out.is_empty() {
            out.push(1);
        }
        Ok(self.derived(out, y, Op::Pick(a, Arc::new(idx.to_vec()))))
    }

    /// Padded strided 3-D convolution with a cubic kernel.
    /// `x: [B, Cin, D, H, W]`, `w: [Cout, Cin, k, k, k]`, `b: [Cout]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, stride: [usize; 3], pad: usize) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        let valid = sx.len() == 5
            && sw.len() == 5
            && sw[1] == sx[1]
            && sw[2] == sw[3]
            && sw[3] == sw[4]
            && sb == [sw[0]]
            && stride.iter().all(|&s| s > 0)
            && (0..3).all(|i| sx[2 + i] + 2 * pad >= sw[2]);
        if !valid {
            return Err(Error::shape("conv3d", &sx, &sw));
        }
        let (batch, cin, cout) = (sx[0], sx[1], sw[0]);
        let geom = Conv3dGeom::new(cin, [sx[2], sx[3], sx[4]], sw[2], stride, pad);
        let (rows, ov) = (geom.col_rows(), geom.out_voxels());
        let in_len = numel(&sx[1..]);
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let mut y = vec![0.0; batch * cout * ov];
        let mut cols = vec![0.0; rows * ov];
        for i in 0..batch {
            geom.im2col(&vx[i * in_len..(i + 1) * in_len], &mut cols);
            let yb = &mut y[i * cout * ov..(i + 1) * cout * ov];
            for (o, row) in yb.chunks_mut(ov).enumerate() {
                row.iter_mut().for_each(|v| *v = vb[o]);
            }
            gemm(cout, rows, ov, vw, false, &cols, false, yb, true);
        }
        let out = vec![batch, cout, geom.output[0], geom.output[1], geom.output[2]];
        Ok(self.derived(out, y, Op::Conv3d { x, w, b, geom }))
    }

    // ---- reverse sweep ----

    /// Accumulates d(loss)/d(node) into every gradient-tracking ancestor.
    /// Repeated calls add to existing gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if numel(shape) != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut send = |v: Var, f: &mut dyn FnMut(&mut [f32])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let out = &node.shape;
                send(*a, &mut |ga| {
                    for_each_broadcast(out, sa, sb, |o, ia, ib| {
                        ga[ia] += match kind {
                            BinOp::Add | BinOp::Sub => g[o],
                            BinOp::Mul => g[o] * vb[ib],
                            BinOp::Div => g[o] / vb[ib],
                        }
                    })
                });
                send(*b, &mut |gb| {
                    for_each_broadcast(out, sa, sb, |o, ia, ib| {
                        gb[ib] += match kind {
                            BinOp::Add => g[o],
                            BinOp::Sub => -g[o],
                            BinOp::Mul => g[o] * va[ia],
                            BinOp::Div => -g[o] * va[ia] / (vb[ib] * vb[ib]),
                        }
                    })
                });
            }
            Op::Unary(kind, a) => {
                let x = &self.nodes[a.0].value;
                send(*a, &mut |ga| {
                    for j in 0..ga.len() {
                        ga[j] += g[j]
                            * match *kind {
                                UnOp::Neg => -1.0,
                                UnOp::Scale(c) => c,
                                UnOp::AddScalar(_) => 1.0,
                                UnOp::Relu => {
                                    if x[j] > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                UnOp::Gelu => gelu_grad(x[j]),
                                UnOp::Sigmoid => y[j] * (1.0 - y[j]),
                                UnOp::Softplus => sigmoid(x[j]),
                                UnOp::Exp => y[j],
                                UnOp::Log => 1.0 / x[j],
                                UnOp::Clamp(lo, hi) => {
                                    if x[j] >= lo && x[j] <= hi {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                            };
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
                if sb.len() == 2 {
                    let rows = va.len() / k;
                    // dA = G · Bᵀ ; dB = Aᵀ · G
                    send(*a, &mut |ga| gemm(rows, n, k, g, false, vb, true, ga, true));
                    send(*b, &mut |gb| gemm(k, rows, n, va, true, g, false, gb, true));
                } else {
                    let batch = va.len() / (m * k);
                    send(*a, &mut |ga| {
                        for i in 0..batch {
                            gemm(
                                m,
                                n,
                                k,
                                &g[i * m * n..(i + 1) * m * n],
                                false,
                                &vb[i * k * n..(i + 1) * k * n],
                                true,
                                &mut ga[i * m * k..(i + 1) * m * k],
                                true,
                            );
                        }
                    });
                    send(*b, &mut |gb| {
                        for i in 0..batch {
                            gemm(
                                k,
                                m,
                                n,
                                &va[i * m * k..(i + 1) * m * k],
                                true,
                                &g[i * m * n..(i + 1) * m * n],
                                false,
                                &mut gb[i * k * n..(i + 1) * k * n],
                                true,
                            );
                        }
                    });
                }
            }
            Op::Transpose(a) => {
                let s = &node.shape;
                // output block is (c × r); its transpose restores (r × c)
                let (c, r) = (s[s.len() - 2], s[s.len() - 1]);
                send(*a, &mut |ga| {
                    let mut tmp = vec![0.0; c * r];
                    for (gi, go) in g.chunks(c * r).zip(ga.chunks_mut(c * r)) {
                        transpose_block(gi, &mut tmp, c, r);
                        go.iter_mut().zip(&tmp).for_each(|(d, v)| *d += v);
                    }
                });
            }
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let back = permute_data(g, &node.shape, &inv);
                send(*a, &mut |ga| ga.iter_mut().zip(&back).for_each(|(d, v)| *d += v));
            }
            Op::Reshape(a) => send(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(d, v)| *d += v)),
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                for p in parts {
                    let ext = self.nodes[p.0].shape[*axis];
                    send(*p, &mut |gp| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + ext) * inner];
                            gp[o * ext * inner..(o + 1) * ext * inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, v)| *d += v);
                        }
                    });
                    offset += ext;
                }
            }
            Op::Slice { src, axis, start } => {
                let (outer, ext, inner) = split_axis(&self.nodes[src.0].shape, *axis);
                let len = node.shape[*axis];
                send(*src, &mut |gs| {
                    for o in 0..outer {
                        let base = (o * ext + start) * inner;
                        gs[base..base + len * inner]
                            .iter_mut()
                            .zip(&g[o * len * inner..(o + 1) * len * inner])
                            .for_each(|(d, v)| *d += v);
                    }
                });
            }
            Op::Softmax(a) => {
                let c = *node.shape.last().unwrap();
                send(*a, &mut |ga| {
                    for ((yr, gr), dr) in y.chunks(c).zip(g.chunks(c)).zip(ga.chunks_mut(c)) {
                        let dot: f32 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let c = *node.shape.last().unwrap();
                send(*a, &mut |ga| {
                    for ((yr, gr), dr) in y.chunks(c).zip(g.chunks(c)).zip(ga.chunks_mut(c)) {
                        let total: f32 = gr.iter().sum();
                        for j in 0..c {
                            dr[j] += gr[j] - yr[j].exp() * total;
                        }
                    }
                });
            }
            Op::LayerNorm(a) => {
                let c = *node.shape.last().unwrap();
                let x = &self.nodes[a.0].value;
                send(*a, &mut |ga| {
                    for (((xr, yr), gr), dr) in x
                        .chunks(c)
                        .zip(y.chunks(c))
                        .zip(g.chunks(c))
                        .zip(ga.chunks_mut(c))
                    {
                        let (_, rstd) = moments(xr);
                        let mg = gr.iter().sum::<f32>() / c as f32;
                        let mgy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f32>() / c as f32;
                        for j in 0..c {
                            dr[j] += rstd * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                });
            }
            Op::Embedding(table, ids) => {
                let d = node.shape[1];
                send(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        gt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                            .for_each(|(a, v)| *a += v);
                    }
                });
            }
            Op::SumAll(a) => send(*a, &mut |ga| ga.iter_mut().for_each(|v| *v += g[0])),
            Op::MeanAll(a) => send(*a, &mut |ga| {
                let s = g[0] / ga.len() as f32;
                ga.iter_mut().for_each(|v| *v += s)
            }),
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let (outer, ext, inner) = split_axis(&self.nodes[a.0].shape, *axis);
                let s = if matches!(node.op, Op::MeanAxis(..)) { 1.0 / ext as f32 } else { 1.0 };
                send(*a, &mut |ga| {
                    for o in 0..outer {
                        for e in 0..ext {
                            let dst = &mut ga[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                            dst.iter_mut()
                                .zip(&g[o * inner..(o + 1) * inner])
                                .for_each(|(d, v)| *d += v * s);
                        }
                    }
                });
            }
            Op::SqL2(a) => {
                let c = *self.nodes[a.0].shape.last().unwrap();
                let x = &self.nodes[a.0].value;
                send(*a, &mut |ga| {
                    for (r, (xr, dr)) in x.chunks(c).zip(ga.chunks_mut(c)).enumerate() {
                        for j in 0..c {
                            dr[j] += 2.0 * xr[j] * g[r];
                        }
                    }
                });
            }
            Op::Pick(a, idx) => {
                let c = *self.nodes[a.0].shape.last().unwrap();
                send(*a, &mut |ga| {
                    for (r, &i) in idx.iter().enumerate() {
                        ga[r * c + i] += g[r];
                    }
                });
            }
            Op::Conv3d { x, w, b, geom } => {
                let batch = node.shape[0];
                let cout = node.shape[1];
                let (rows, ov) = (geom.col_rows(), geom.out_voxels());
                let vx = &self.nodes[x.0].value;
                let vw = &self.nodes[w.0].value;
                let in_len = vx.len() / batch;
                send(*b, &mut |gb| {
                    for i in 0..batch {
                        for o in 0..cout {
                            let base = (i * cout + o) * ov;
                            gb[o] += g[base..base + ov].iter().sum::<f32>();
                        }
                    }
                });
                let mut cols = vec![0.0; rows * ov];
                send(*w, &mut |gw| {
                    for i in 0..batch {
                        geom.im2col(&vx[i * in_len..(i + 1) * in_len], &mut cols);
                        let gy = &g[i * cout * ov..(i + 1) * cout * ov];
                        gemm(cout, ov, rows, gy, false, &cols, true, gw, true);
                    }
                });
                send(*x, &mut |gx| {
                    for i in 0..batch {
                        let gy = &g[i * cout * ov..(i + 1) * cout * ov];
                        gemm(rows, cout, ov, vw, true, gy, false, &mut cols, false);
                        geom.col2im(&cols, &mut gx[i * in_len..(i + 1) * in_len]);
                    }
                });
            }
        }
    }
}

fn transpose_block(src: &[f32], dst: &mut [f32], r: usize, c: usize) {
    for i in 0..r {
        for j in 0..c {
            dst[j * r + i] = src[i * c + j];
        }
    }
}

fn permute_data(x: &[f32], shape: &[usize], perm: &[usize]) -> Vec<f32> {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut y = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..x.len() {
        y.push(x[src]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    y
}

fn moments(row: &[f32]) -> (f32, f32) {
    let n = row.len() as f32;
    let mean = row.iter().sum::<f32>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
    (mean, 1.0 / (var + LN_EPS).sqrt())
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f32) -> f32 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
