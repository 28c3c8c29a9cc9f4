//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation eagerly: each call computes the forward
//! value immediately and pushes a node describing how to route gradients back
//! to its inputs. Nodes are only ever appended, so the tape order is already a
//! topological order and [`Graph::backward`] is a single reverse sweep.

use super::kernels::{gemm, MatMut, MatRef};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Slice { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Mean(Var),
    Sum(Var),
    Gelu(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Linear { x: Var, w: Var, b: Option<Var> },
    Attention { q: Var, k: Var, v: Var, heads: usize, seq: usize, probs: Vec<T> },
    GatherRows { x: Var, index: Vec<usize> },
    MaskedMse { pred: Var, target: Var, rows: Vec<usize> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Recorded computation.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn suffix_broadcast(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite value produced by {op:?}", op = std::mem::discriminant(&op));
        self.nodes.push(Node { value, op, requires_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter; its gradient can be accumulated back.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let v = self.variable(store.get(id).value.clone());
        self.nodes[v.0].param = Some(id);
        v
    }

    pub(crate) fn param_leaves(&self) -> impl Iterator<Item = (Var, ParamId)> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| n.param.map(|p| (Var(i), p)))
    }

    fn binary_broadcast(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !suffix_broadcast(sa, sb) {
            return Err(Error::ShapeMismatch(format!("{what}: {sa:?} with {sb:?}")));
        }
        Ok(())
    }

    /// Elementwise `a + b`; `b` may broadcast over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_broadcast(a, b, "add")?;
        let (va, vb) = (self.value(a), self.value(b));
        let nb = vb.numel().max(1);
        let data = va.data().iter().enumerate().map(|(i, &x)| x + vb.data()[i % nb]).collect();
        let out = Tensor::new(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Elementwise `a * b`; `b` may broadcast over leading axes of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_broadcast(a, b, "mul")?;
        let (va, vb) = (self.value(a), self.value(b));
        let nb = vb.numel().max(1);
        let data = va.data().iter().enumerate().map(|(i, &x)| x * vb.data()[i % nb]).collect();
        let out = Tensor::new(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            T::one(),
            MatRef::dense(self.value(a).data(), m, k),
            MatRef::dense(self.value(b).data(), k, n),
            T::zero(),
            MatMut::dense(&mut out, m, n),
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.shape();
        if s.len() < 2 {
            return Err(Error::ShapeMismatch(format!("transpose needs rank >= 2, got {s:?}")));
        }
        let out = transpose_last2(v);
        let rg = self.rg(a);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let v = self.value(a);
        let s = v.shape().to_vec();
        if axis >= s.len() || start > end || end > s[axis] {
            return Err(Error::ShapeMismatch(format!("slice {start}..{end} on axis {axis} of {s:?}")));
        }
        let (outer, len, inner) = axis_split(&s, axis);
        let w = end - start;
        let mut data = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            let base = o * len * inner;
            data.extend_from_slice(&v.data()[base + start * inner..base + end * inner]);
        }
        let mut shape = s;
        shape[axis] = w;
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Slice { x: a, axis, start }, rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::ShapeMismatch("concat of nothing".into()))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(Error::ShapeMismatch(format!("concat axis {axis} on {s0:?}")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let same_other = s.len() == s0.len() && s.iter().zip(&s0).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same_other {
                return Err(Error::ShapeMismatch(format!("concat {s0:?} with {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&s0, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let v = self.value(x);
                let len = v.shape()[axis];
                data.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(Tensor::new(&shape, data)?, Op::Concat { xs: xs.to_vec(), axis }, rg))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.numel() == 0 {
            return Err(Error::ShapeMismatch("mean of empty tensor".into()));
        }
        let m = v.data().iter().copied().sum::<T>() / T::of(v.numel() as f64);
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(m), Op::Mean(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Exact GELU, `x * Phi(x)` with the erf form of the normal CDF.
    pub fn gelu(&mut self, a: Var) -> Var {
        let half = T::of(0.5);
        let inv_sqrt2 = T::of(1.0 / SQRT_2);
        let out = self.value(a).map(|x| half * x * (T::one() + (x * inv_sqrt2).erf()));
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.value(a);
        if axis >= v.rank() {
            return Err(Error::ShapeMismatch(format!("softmax axis {axis} on {:?}", v.shape())));
        }
        let (outer, len, inner) = axis_split(v.shape(), axis);
        let mut out = v.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| out[idx(j)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for j in 0..len {
                    let e = (out[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[idx(j)] /= z;
                }
            }
        }
        let out = Tensor::new(v.shape(), out)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax { x: a, axis }, rg))
    }

    /// Normalizes over the last axis, then applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let v = self.value(x);
        let d = v.last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] || d == 0 {
            return Err(Error::ShapeMismatch(format!(
                "layer_norm over {:?} with gamma {:?}, beta {:?}",
                v.shape(),
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let rows = v.rows();
        let inv_d = T::of(1.0 / d as f64);
        let eps = T::of(eps);
        let mut xhat = Vec::with_capacity(v.numel());
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = v.row(r);
            let mu = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&a| (a - mu) * (a - mu)).sum::<T>() * inv_d;
            let rs = (var + eps).sqrt().recip();
            rstd.push(rs);
            xhat.extend(row.iter().map(|&a| (a - mu) * rs));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let data = xhat.iter().enumerate().map(|(i, &h)| h * g[i % d] + b[i % d]).collect();
        let out = Tensor::new(v.shape(), data)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    /// `x W + b` for `x: [.., in]`, `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let d_in = *sx.last().unwrap_or(&0);
        if sw.len() != 2 || sw[0] != d_in || sx.is_empty() {
            return Err(Error::ShapeMismatch(format!("linear {sx:?} x {sw:?}")));
        }
        let d_out = sw[1];
        if let Some(b) = b {
            if self.shape(b) != [d_out] {
                return Err(Error::ShapeMismatch(format!("linear bias {:?}, expected [{d_out}]", self.shape(b))));
            }
        }
        let m = self.value(x).rows();
        let mut out = vec![T::zero(); m * d_out];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(d_out.max(1)) {
                row.copy_from_slice(bias);
            }
        }
        gemm(
            T::one(),
            MatRef::dense(self.value(x).data(), m, d_in),
            MatRef::dense(self.value(w).data(), d_in, d_out),
            if b.is_some() { T::one() } else { T::zero() },
            MatMut::dense(&mut out, m, d_out),
        );
        let mut shape = sx;
        *shape.last_mut().unwrap() = d_out;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(&shape, out)?, Op::Linear { x, w, b }, rg))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `[batch * seq, dim]`; consecutive groups of `seq`
    /// rows form independent sequences. `dim` is split into `heads` equal
    /// slices and scores are scaled by `1 / sqrt(dim / heads)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, seq: usize) -> Result<Var> {
        let s = self.shape(q).to_vec();
        if s.len() != 2 || self.shape(k) != s.as_slice() || self.shape(v) != s.as_slice() {
            return Err(Error::ShapeMismatch(format!(
                "attention q {s:?}, k {:?}, v {:?}",
                self.shape(k),
                self.shape(v)
            )));
        }
        let (rows, dim) = (s[0], s[1]);
        if heads == 0 || dim % heads != 0 || seq == 0 || rows % seq != 0 {
            return Err(Error::ShapeMismatch(format!(
                "attention with {rows} rows, dim {dim}, {heads} heads, seq {seq}"
            )));
        }
        let batch = rows / seq;
        let dh = dim / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = vec![T::zero(); rows * dim];
        for bi in 0..batch {
            for h in 0..heads {
                let off = bi * seq * dim + h * dh;
                let p_off = (bi * heads + h) * seq * seq;
                let p = &mut probs[p_off..p_off + seq * seq];
                gemm(
                    scale,
                    head_view(qd, off, seq, dh, dim),
                    head_view(kd, off, seq, dh, dim).t(),
                    T::zero(),
                    MatMut::dense(p, seq, seq),
                );
                for row in p.chunks_mut(seq) {
                    softmax_in_place(row);
                }
                gemm(
                    T::one(),
                    MatRef::dense(p, seq, seq),
                    head_view(vd, off, seq, dh, dim),
                    T::zero(),
                    MatMut { data: &mut out, offset: off, rows: seq, cols: dh, rs: dim, cs: 1 },
                );
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(Tensor::new(&[rows, dim], out)?, Op::Attention { q, k, v, heads, seq, probs }, rg))
    }

    /// Row `i` of the result is row `index[i]` of `x` (viewed as `[rows, last_dim]`).
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let (rows, d) = (v.rows(), v.last_dim());
        if v.rank() < 1 {
            return Err(Error::ShapeMismatch("gather_rows on scalar".into()));
        }
        let mut data = Vec::with_capacity(index.len() * d);
        for &r in index {
            if r >= rows {
                return Err(Error::ShapeMismatch(format!("gather row {r} of {rows}")));
            }
            data.extend_from_slice(v.row(r));
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[index.len(), d], data)?, Op::GatherRows { x, index: index.to_vec() }, rg))
    }

    /// Mean squared error over the selected rows of `[rows, d]` tensors.
    pub fn masked_mse(&mut self, pred: Var, target: Var, rows: &[usize]) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() || p.rank() < 1 {
            return Err(Error::ShapeMismatch(format!("mse pred {:?} vs target {:?}", p.shape(), t.shape())));
        }
        if rows.is_empty() {
            return Err(Error::EmptyMask);
        }
        let (n, d) = (p.rows(), p.last_dim());
        if let Some(&r) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::ShapeMismatch(format!("mask row {r} of {n}")));
        }
        let mut acc = T::zero();
        for &r in rows {
            for (a, b) in p.row(r).iter().zip(t.row(r)) {
                acc += (*a - *b) * (*a - *b);
            }
        }
        let loss = acc / T::of((rows.len() * d) as f64);
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(Tensor::scalar(loss), Op::MaskedMse { pred, target, rows: rows.to_vec() }, rg))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[out.0].value;
        if root.numel() != 1 {
            return Err(Error::NonScalarBackward(root.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::new(root.shape(), vec![T::one()])?);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backward_node(i, &g, &mut grads);
            debug_assert!(g.all_finite(), "non-finite gradient at node {i}");
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        let t = slot.get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
        f(t.data_mut());
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |ga| ga.iter_mut().zip(gd).for_each(|(x, &y)| *x += y));
                let nb = self.value(*b).numel().max(1);
                self.acc(grads, *b, |gb| gd.iter().enumerate().for_each(|(j, &y)| gb[j % nb] += y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let nb = vb.len().max(1);
                self.acc(grads, *a, |ga| {
                    for (j, x) in ga.iter_mut().enumerate() {
                        *x += gd[j] * vb[j % nb];
                    }
                });
                self.acc(grads, *b, |gb| {
                    for (j, (&y, &x)) in gd.iter().zip(va).enumerate() {
                        gb[j % nb] += y * x;
                    }
                });
            }
            Op::Scale(a, s) => {
                self.acc(grads, *a, |ga| ga.iter_mut().zip(gd).for_each(|(x, &y)| *x += y * *s));
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |ga| {
                    gemm(T::one(), MatRef::dense(gd, m, n), MatRef::dense(vb, k, n).t(), T::one(), MatMut::dense(ga, m, k))
                });
                self.acc(grads, *b, |gb| {
                    gemm(T::one(), MatRef::dense(va, m, k).t(), MatRef::dense(gd, m, n), T::one(), MatMut::dense(gb, k, n))
                });
            }
            Op::Transpose(a) => {
                let back = transpose_last2(g);
                self.acc(grads, *a, |ga| ga.iter_mut().zip(back.data()).for_each(|(x, &y)| *x += y));
            }
            Op::Reshape(a) => {
                self.acc(grads, *a, |ga| ga.iter_mut().zip(gd).for_each(|(x, &y)| *x += y));
            }
            Op::Slice { x, axis, start } => {
                let (outer, len, inner) = axis_split(self.shape(*x), *axis);
                let w = g.shape()[*axis];
                self.acc(grads, *x, |gx| {
                    for o in 0..outer {
                        let dst = &mut gx[o * len * inner + start * inner..o * len * inner + (start + w) * inner];
                        dst.iter_mut().zip(&gd[o * w * inner..(o + 1) * w * inner]).for_each(|(x, &y)| *x += y);
                    }
                });
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = axis_split(g.shape(), *axis);
                let mut pos = 0;
                for &x in xs {
                    let len = self.shape(x)[*axis];
                    self.acc(grads, x, |gx| {
                        for o in 0..outer {
                            let src = &gd[o * total * inner + pos * inner..o * total * inner + (pos + len) * inner];
                            gx[o * len * inner..(o + 1) * len * inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, &y)| *x += y);
                        }
                    });
                    pos += len;
                }
            }
            Op::Mean(a) => {
                let n = T::of(self.value(*a).numel() as f64);
                let s = gd[0] / n;
                self.acc(grads, *a, |ga| ga.iter_mut().for_each(|x| *x += s));
            }
            Op::Sum(a) => {
                let s = gd[0];
                self.acc(grads, *a, |ga| ga.iter_mut().for_each(|x| *x += s));
            }
            Op::Gelu(a) => {
                let va = self.value(*a).data();
                let half = T::of(0.5);
                let inv_sqrt2 = T::of(1.0 / SQRT_2);
                let c = T::of(INV_SQRT_2PI);
                self.acc(grads, *a, |ga| {
                    for ((x, &y), &u) in ga.iter_mut().zip(gd).zip(va) {
                        let cdf = half * (T::one() + (u * inv_sqrt2).erf());
                        let pdf = c * (-half * u * u).exp();
                        *x += y * (cdf + u * pdf);
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                self.acc(grads, *x, |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| o * len * inner + j * inner + i;
                            let dot: T = (0..len).map(|j| gd[idx(j)] * y[idx(j)]).sum();
                            for j in 0..len {
                                gx[idx(j)] += y[idx(j)] * (gd[idx(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = self.value(*gamma).numel();
                let gam = self.value(*gamma).data();
                let inv_d = T::of(1.0 / d as f64);
                self.acc(grads, *x, |gx| {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &gd[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * gam[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        for j in 0..d {
                            let dh = gr[j] * gam[j];
                            gx[r * d + j] += rs * (dh - m1 - hr[j] * m2);
                        }
                    }
                });
                self.acc(grads, *gamma, |gg| {
                    for (j, (&y, &h)) in gd.iter().zip(xhat).enumerate() {
                        gg[j % d] += y * h;
                    }
                });
                self.acc(grads, *beta, |gb| {
                    for (j, &y) in gd.iter().enumerate() {
                        gb[j % d] += y;
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let sw = self.shape(*w);
                let (d_in, d_out) = (sw[0], sw[1]);
                let m = self.value(*x).rows();
                let (vx, vw) = (self.value(*x).data(), self.value(*w).data());
                self.acc(grads, *x, |gx| {
                    gemm(
                        T::one(),
                        MatRef::dense(gd, m, d_out),
                        MatRef::dense(vw, d_in, d_out).t(),
                        T::one(),
                        MatMut::dense(gx, m, d_in),
                    )
                });
                self.acc(grads, *w, |gw| {
                    gemm(
                        T::one(),
                        MatRef::dense(vx, m, d_in).t(),
                        MatRef::dense(gd, m, d_out),
                        T::one(),
                        MatMut::dense(gw, d_in, d_out),
                    )
                });
                if let Some(b) = b {
                    self.acc(grads, *b, |gb| {
                        for row in gd.chunks(d_out.max(1)) {
                            gb.iter_mut().zip(row).for_each(|(x, &y)| *x += y);
                        }
                    });
                }
            }
            Op::Attention { q, k, v, heads, seq, probs } => {
                self.attention_backward(gd, *q, *k, *v, *heads, *seq, probs, grads);
            }
            Op::GatherRows { x, index } => {
                let d = g.last_dim();
                self.acc(grads, *x, |gx| {
                    for (i, &r) in index.iter().enumerate() {
                        gx[r * d..(r + 1) * d].iter_mut().zip(&gd[i * d..(i + 1) * d]).for_each(|(x, &y)| *x += y);
                    }
                });
            }
            Op::MaskedMse { pred, target, rows } => {
                let (p, t) = (self.value(*pred), self.value(*target));
                let d = p.last_dim();
                let c = gd[0] * T::of(2.0 / (rows.len() * d) as f64);
                self.acc(grads, *pred, |gp| {
                    for &r in rows {
                        for j in 0..d {
                            gp[r * d + j] += c * (p.data()[r * d + j] - t.data()[r * d + j]);
                        }
                    }
                });
                self.acc(grads, *target, |gt| {
                    for &r in rows {
                        for j in 0..d {
                            gt[r * d + j] -= c * (p.data()[r * d + j] - t.data()[r * d + j]);
                        }
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        gd: &[T],
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq: usize,
        probs: &[T],
        grads: &mut [Option<Tensor<T>>],
    ) {
        let s = self.shape(q);
        let (rows, dim) = (s[0], s[1]);
        let batch = rows / seq;
        let dh = dim / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = vec![T::zero(); rows * dim];
        let mut dk = vec![T::zero(); rows * dim];
        let mut dv = vec![T::zero(); rows * dim];
        let mut dp = vec![T::zero(); seq * seq];
        for bi in 0..batch {
            for h in 0..heads {
                let off = bi * seq * dim + h * dh;
                let p_off = (bi * heads + h) * seq * seq;
                let p = &probs[p_off..p_off + seq * seq];
                let g_o = head_view(gd, off, seq, dh, dim);
                // dV = P^T dO
                gemm(
                    T::one(),
                    MatRef::dense(p, seq, seq).t(),
                    g_o,
                    T::zero(),
                    MatMut { data: &mut dv, offset: off, rows: seq, cols: dh, rs: dim, cs: 1 },
                );
                // dP = dO V^T
                gemm(T::one(), g_o, head_view(vd, off, seq, dh, dim).t(), T::zero(), MatMut::dense(&mut dp, seq, seq));
                // dS = P * (dP - rowsum(dP * P)), folded with the score scale
                for (prow, drow) in p.chunks(seq).zip(dp.chunks_mut(seq)) {
                    let dot: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                    for (d, &pp) in drow.iter_mut().zip(prow) {
                        *d = pp * (*d - dot) * scale;
                    }
                }
                gemm(
                    T::one(),
                    MatRef::dense(&dp, seq, seq),
                    head_view(kd, off, seq, dh, dim),
                    T::zero(),
                    MatMut { data: &mut dq, offset: off, rows: seq, cols: dh, rs: dim, cs: 1 },
                );
                gemm(
                    T::one(),
                    MatRef::dense(&dp, seq, seq).t(),
                    head_view(qd, off, seq, dh, dim),
                    T::zero(),
                    MatMut { data: &mut dk, offset: off, rows: seq, cols: dh, rs: dim, cs: 1 },
                );
            }
        }
        for (var, src) in [(q, dq), (k, dk), (v, dv)] {
            self.acc(grads, var, |gx| gx.iter_mut().zip(&src).for_each(|(x, &y)| *x += y));
        }
    }
}

fn head_view<T>(data: &[T], offset: usize, seq: usize, dh: usize, dim: usize) -> MatRef<'_, T> {
    MatRef { data, offset, rows: seq, cols: dh, rs: dim, cs: 1 }
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        z += *x;
    }
    for x in row.iter_mut() {
        *x /= z;
    }
}

fn transpose_last2<T: Scalar>(v: &Tensor<T>) -> Tensor<T> {
    let s = v.shape();
    let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
    let batch = v.numel() / (r * c).max(1);
    let mut data = vec![T::zero(); v.numel()];
    for b in 0..batch {
        let src = &v.data()[b * r * c..(b + 1) * r * c];
        let dst = &mut data[b * r * c..(b + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    let mut shape = s.to_vec();
    let n = shape.len();
    shape.swap(n - 2, n - 1);
    Tensor::new(&shape, data).expect("transpose preserves element count")
}
