//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation as a node in creation order, which is
//! already a topological order: an operation can only consume nodes that
//! exist when it is recorded. [`Tape::backward`] walks the nodes once in
//! reverse and accumulates gradients additively, so a tensor used by several
//! consumers receives the sum of their contributions.
//!
//! ```
//! use layerdistill::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.wrt(x).item(), 6.0);
//! ```
//!
//! Every operation checks its output for NaN/Inf and returns
//! [`Error::NonFinite`] instead of letting it propagate.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{broadcast_index_map, broadcast_shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var, Option<Vec<usize>>, Option<Vec<usize>>),
    Sub(Var, Var, Option<Vec<usize>>, Option<Vec<usize>>),
    Mul(Var, Var, Option<Vec<usize>>, Option<Vec<usize>>),
    Scale(Var, f64),
    MatMul(Var, Var, MatMulPlan),
    TransposeLast(Var),
    Reshape(Var),
    SliceLast { x: Var, start: usize },
    ConcatLast(Vec<Var>),
    StackAxis1(Vec<Var>),
    SelectAxis1 { x: Var, index: usize },
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GatherRows { table: Var, ids: Vec<usize> },
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    MaskedMse { a: Var, b: Var, mask: Vec<f64>, count: f64 },
    Dropout { x: Var, keep: Vec<f64> },
}

#[derive(Debug)]
struct MatMulPlan {
    p: usize,
    q: usize,
    r: usize,
    a_batch: Vec<usize>,
    b_batch: Vec<usize>,
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// A recording of tensor operations that can be differentiated in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one [`Tape::backward`] call.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    visited: usize,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }

    /// Number of nodes whose backward rule ran.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

fn same_or_map(input: &[usize], out: &[usize]) -> Option<Vec<usize>> {
    if input == out {
        None
    } else {
        Some(broadcast_index_map(input, out))
    }
}

fn check(op: &'static str, t: Tensor) -> Result<Tensor> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite(op))
    }
}

/// `c[p,r] += a[p,q] @ b[q,r]`
fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let crow = &mut c[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[k * r..(k + 1) * r];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
}

/// `c[p,q] += g[p,r] @ b[q,r]^T`
fn gemm_nt_acc(g: &[f64], b: &[f64], c: &mut [f64], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let grow = &g[i * r..(i + 1) * r];
        for k in 0..q {
            let brow = &b[k * r..(k + 1) * r];
            c[i * q + k] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `c[q,r] += a[p,q]^T @ g[p,r]`
fn gemm_tn_acc(a: &[f64], g: &[f64], c: &mut [f64], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let grow = &g[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            if aik == 0.0 {
                continue;
            }
            let crow = &mut c[k * r..(k + 1) * r];
            for (cv, gv) in crow.iter_mut().zip(grow) {
                *cv += aik * gv;
            }
        }
    }
}

fn softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        total += *d;
    }
    for d in dst.iter_mut() {
        *d /= total;
    }
}

fn log_softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = src.iter().map(|&s| (s - max).exp()).sum::<f64>().ln() + max;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = s - lse;
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

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Copies the value of `v` into a new constant leaf; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, Option<Vec<usize>>, Option<Vec<usize>>)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out = broadcast_shape(&sa, &sb).ok_or_else(|| Error::dim(name, &sa, &sb))?;
        let ma = same_or_map(&sa, &out);
        let mb = same_or_map(&sb, &out);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let n: usize = out.iter().product();
        let data = (0..n)
            .map(|i| {
                let x = da[ma.as_ref().map_or(i, |m| m[i])];
                let y = db[mb.as_ref().map_or(i, |m| m[i])];
                f(x, y)
            })
            .collect();
        let t = check(name, Tensor::new(out, data)?)?;
        Ok((t, ma, mb))
    }

    /// Elementwise `a + b` with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ma, mb) = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, rg, Op::Add(a, b, ma, mb)))
    }

    /// Elementwise `a - b` with broadcasting.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ma, mb) = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, rg, Op::Sub(a, b, ma, mb)))
    }

    /// Elementwise `a * b` with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ma, mb) = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, rg, Op::Mul(a, b, ma, mb)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = check("scale", self.value(a).map(|x| x * c))?;
        let rg = self.rg(a);
        Ok(self.push(t, rg, Op::Scale(a, c)))
    }

    /// Batched matrix product `[.., p, q] @ [.., q, r] -> [.., p, r]`; the
    /// batch dimensions broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let (p, q, r) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let a_batch = sa[..sa.len() - 2].to_vec();
        let b_batch = sb[..sb.len() - 2].to_vec();
        let batch =
            broadcast_shape(&a_batch, &b_batch).ok_or_else(|| Error::dim("matmul", &sa, &sb))?;
        let nb: usize = batch.iter().product();
        let map_a = broadcast_index_map(&a_batch, &batch);
        let map_b = broadcast_index_map(&b_batch, &batch);
        let mut out = vec![0.0; nb * p * r];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for bi in 0..nb {
                let (oa, ob) = (map_a[bi] * p * q, map_b[bi] * q * r);
                gemm_acc(
                    &da[oa..oa + p * q],
                    &db[ob..ob + q * r],
                    &mut out[bi * p * r..(bi + 1) * p * r],
                    p,
                    q,
                    r,
                );
            }
        }
        let mut shape = batch;
        shape.extend([p, r]);
        let t = check("matmul", Tensor::new(shape, out)?)?;
        let rg = self.rg(a) || self.rg(b);
        let plan = MatMulPlan {
            p,
            q,
            r,
            a_batch,
            b_batch,
        };
        Ok(self.push(t, rg, Op::MatMul(a, b, plan)))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(Error::Shape(format!("transpose of rank-{} tensor", s.len())));
        }
        let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for (blk_in, blk_out) in src.chunks(m * n).zip(out.chunks_mut(m * n)) {
            for i in 0..m {
                for j in 0..n {
                    blk_out[j * m + i] = blk_in[i * n + j];
                }
            }
        }
        let mut shape = s;
        let k = shape.len();
        shape.swap(k - 1, k - 2);
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(a);
        Ok(self.push(t, rg, Op::TransposeLast(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, rg, Op::Reshape(a)))
    }

    /// `x[..., start..start+len]`
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let last = *s.last().ok_or_else(|| Error::Shape("slice of scalar".into()))?;
        if len == 0 || start + len > last {
            return Err(Error::Shape(format!(
                "slice {start}..{} of last dimension {last}",
                start + len
            )));
        }
        let data: Vec<f64> = self
            .value(x)
            .data()
            .chunks(last)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(t, rg, Op::SliceLast { x, start }))
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(Error::dim("concat_last", self.shape(*first), s));
            }
            widths.push(*s.last().unwrap());
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let t = Tensor::new(shape, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(t, rg, Op::ConcatLast(parts.to_vec())))
    }

    /// Stacks `[b, rest..]` tensors into `[b, n, rest..]`.
    pub fn stack_axis1(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("stack of nothing".into()))?;
        let s0 = self.shape(*first).to_vec();
        if s0.is_empty() {
            return Err(Error::Shape("stack of scalars".into()));
        }
        for &p in parts {
            if self.shape(p) != &s0[..] {
                return Err(Error::dim("stack_axis1", &s0, self.shape(p)));
            }
        }
        let b = s0[0];
        let inner: usize = s0[1..].iter().product();
        let mut data = Vec::with_capacity(b * parts.len() * inner);
        for bi in 0..b {
            for &p in parts {
                data.extend_from_slice(&self.value(p).data()[bi * inner..(bi + 1) * inner]);
            }
        }
        let mut shape = vec![b, parts.len()];
        shape.extend_from_slice(&s0[1..]);
        let t = Tensor::new(shape, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(t, rg, Op::StackAxis1(parts.to_vec())))
    }

    /// `x[:, index, ...]` of a tensor with rank ≥ 2.
    pub fn select_axis1(&mut self, x: Var, index: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || index >= s[1] {
            return Err(Error::Shape(format!("select {index} on axis 1 of {s:?}")));
        }
        let inner: usize = s[2..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(s[0] * inner);
        for bi in 0..s[0] {
            let o = (bi * s[1] + index) * inner;
            data.extend_from_slice(&src[o..o + inner]);
        }
        let mut shape = vec![s[0]];
        shape.extend_from_slice(&s[2..]);
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(t, rg, Op::SelectAxis1 { x, index }))
    }

    /// Elementwise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        Ok(self.push(t, rg, Op::Relu(a)))
    }

    /// Softmax over the last axis, with max-subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let last = *src.shape().last().ok_or_else(|| Error::Shape("softmax of scalar".into()))?;
        let mut out = vec![0.0; src.numel()];
        for (s, d) in src.data().chunks(last).zip(out.chunks_mut(last)) {
            softmax_row(s, d);
        }
        let t = check("softmax_rows", Tensor::new(src.shape().to_vec(), out)?)?;
        let rg = self.rg(a);
        Ok(self.push(t, rg, Op::Softmax(a)))
    }

    /// Log-softmax over the last axis, computed directly as `x - logsumexp(x)`.
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let last = *src
            .shape()
            .last()
            .ok_or_else(|| Error::Shape("log_softmax of scalar".into()))?;
        let mut out = vec![0.0; src.numel()];
        for (s, d) in src.data().chunks(last).zip(out.chunks_mut(last)) {
            log_softmax_row(s, d);
        }
        let t = check("log_softmax_rows", Tensor::new(src.shape().to_vec(), out)?)?;
        let rg = self.rg(a);
        Ok(self.push(t, rg, Op::LogSoftmax(a)))
    }

    /// Per-row normalization over the last axis with learnable `gain` and
    /// `bias` (both shaped `[d]`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or_else(|| Error::Shape("layer_norm of scalar".into()))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::dim("layer_norm", &s, self.shape(gain)));
        }
        let src = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let t = check("layer_norm", Tensor::new(s, out)?)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            t,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Embedding lookup: rows of a `[V, d]` table, giving `[ids.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::Shape(format!("gather_rows from {s:?}")));
        }
        let (v, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Param(format!("row id {bad} out of range for table of {v} rows")));
        }
        if ids.is_empty() {
            return Err(Error::Shape("gather of zero rows".into()));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let t = Tensor::new([ids.len(), d], data)?;
        let rg = self.rg(table);
        Ok(self.push(
            t,
            rg,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let t = check("sum", Tensor::scalar(self.value(a).sum()))?;
        let rg = self.rg(a);
        Ok(self.push(t, rg, Op::Sum(a)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let t = check("mean", Tensor::scalar(v.sum() / v.numel() as f64))?;
        let rg = self.rg(a);
        Ok(self.push(t, rg, Op::Mean(a)))
    }

    /// Mean over all elements of `(a - b)²`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("mse", self.shape(a), self.shape(b)));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let total: f64 = da.iter().zip(db).map(|(x, y)| (x - y).powi(2)).sum();
        let t = check("mse", Tensor::scalar(total / da.len() as f64))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, rg, Op::Mse(a, b)))
    }

    /// Mean of `(a - b)²` over elements where `mask` is nonzero.
    ///
    /// `mask` has the shape of `a`; the mean divides by its number of nonzero
    /// entries. An all-zero mask yields 0.
    pub fn masked_mse(&mut self, a: Var, b: Var, mask: &Tensor) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("masked_mse", self.shape(a), self.shape(b)));
        }
        if mask.shape() != self.shape(a) {
            return Err(Error::dim("masked_mse", self.shape(a), mask.shape()));
        }
        let m: Vec<f64> = mask.data().iter().map(|&w| if w != 0.0 { 1.0 } else { 0.0 }).collect();
        let count: f64 = m.iter().sum();
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let total: f64 = da
            .iter()
            .zip(db)
            .zip(&m)
            .map(|((x, y), w)| w * (x - y).powi(2))
            .sum();
        let value = if count > 0.0 { total / count } else { 0.0 };
        let t = check("masked_mse", Tensor::scalar(value))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            t,
            rg,
            Op::MaskedMse {
                a,
                b,
                mask: m,
                count,
            },
        ))
    }

    /// Inverted dropout: zeroes each element with probability `p` and scales
    /// the survivors by `1 / (1 - p)`. `p == 0` returns `x` unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Param(format!("dropout probability {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let scale = 1.0 / (1.0 - p);
        let keep: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { scale })
            .collect();
        let src = self.value(x);
        let data = src.data().iter().zip(&keep).map(|(v, k)| v * k).collect();
        let t = Tensor::new(src.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(t, rg, Op::Dropout { x, keep }))
    }

    /// Soft cross-entropy `-Σ_c softmax(teacher/t)_c · log softmax(student/t)_c`,
    /// averaged over the leading (batch) axes. The teacher side is detached.
    pub fn soft_cross_entropy(&mut self, teacher: Var, student: Var, t: f64) -> Result<Var> {
        if !(t > 0.0) {
            return Err(Error::Param(format!("temperature must be positive, got {t}")));
        }
        if self.shape(teacher) != self.shape(student) {
            return Err(Error::dim("soft_cross_entropy", self.shape(teacher), self.shape(student)));
        }
        let target = {
            let z = self.value(teacher);
            let c = *z.shape().last().ok_or_else(|| Error::Shape("logits of scalar".into()))?;
            let mut probs = vec![0.0; z.numel()];
            let scaled: Vec<f64> = z.data().iter().map(|v| v / t).collect();
            for (s, d) in scaled.chunks(c).zip(probs.chunks_mut(c)) {
                softmax_row(s, d);
            }
            Tensor::new(z.shape().to_vec(), probs)?
        };
        self.cross_entropy_with_targets(&target, student, t)
    }

    /// Cross-entropy of `student / t` against fixed target distributions
    /// (one per row), averaged over rows whose target mass is nonzero.
    pub fn cross_entropy_with_targets(&mut self, target: &Tensor, student: Var, t: f64) -> Result<Var> {
        if target.shape() != self.shape(student) {
            return Err(Error::dim("cross_entropy", target.shape(), self.shape(student)));
        }
        let c = *target.shape().last().ok_or_else(|| Error::Shape("logits of scalar".into()))?;
        let rows = target
            .data()
            .chunks(c)
            .filter(|r| r.iter().any(|&p| p != 0.0))
            .count()
            .max(1);
        let scaled = if t == 1.0 { student } else { self.scale(student, 1.0 / t)? };
        let logp = self.log_softmax_rows(scaled)?;
        let tgt = self.constant(target.clone());
        let prod = self.mul(tgt, logp)?;
        let total = self.sum(prod)?;
        self.scale(total, -1.0 / rows as f64)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward from non-scalar tensor of shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut visited = 0;
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            visited += 1;
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.filter(|_| node.requires_grad)
                    .map(|g| Tensor::new(node.value.shape().to_vec(), g).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            visited,
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        let scatter = |slot: &mut [f64], map: &Option<Vec<usize>>, f: &dyn Fn(usize) -> f64| match map {
            None => slot.iter_mut().enumerate().for_each(|(i, s)| *s += f(i)),
            Some(m) => (0..g.len()).for_each(|i| slot[m[i]] += f(i)),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, ma, mb) => {
                acc(*a, &mut |s| scatter(s, ma, &|i| g[i]));
                acc(*b, &mut |s| scatter(s, mb, &|i| g[i]));
            }
            Op::Sub(a, b, ma, mb) => {
                acc(*a, &mut |s| scatter(s, ma, &|i| g[i]));
                acc(*b, &mut |s| scatter(s, mb, &|i| -g[i]));
            }
            Op::Mul(a, b, ma, mb) => {
                let (da, db) = (val(*a), val(*b));
                let ia = |i: usize| ma.as_ref().map_or(i, |m| m[i]);
                let ib = |i: usize| mb.as_ref().map_or(i, |m| m[i]);
                acc(*a, &mut |s| scatter(s, ma, &|i| g[i] * db[ib(i)]));
                acc(*b, &mut |s| scatter(s, mb, &|i| g[i] * da[ia(i)]));
            }
            Op::Scale(a, c) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += c * g)),
            Op::MatMul(a, b, plan) => {
                let MatMulPlan {
                    p,
                    q,
                    r,
                    a_batch,
                    b_batch,
                } = plan;
                let (p, q, r) = (*p, *q, *r);
                let batch = broadcast_shape(a_batch, b_batch).expect("checked in forward");
                let nb: usize = batch.iter().product();
                let map_a = broadcast_index_map(a_batch, &batch);
                let map_b = broadcast_index_map(b_batch, &batch);
                let (da, db) = (val(*a), val(*b));
                if wants(*a) {
                    acc(*a, &mut |s| {
                        for bi in 0..nb {
                            let (oa, ob) = (map_a[bi] * p * q, map_b[bi] * q * r);
                            gemm_nt_acc(
                                &g[bi * p * r..(bi + 1) * p * r],
                                &db[ob..ob + q * r],
                                &mut s[oa..oa + p * q],
                                p,
                                q,
                                r,
                            );
                        }
                    });
                }
                if wants(*b) {
                    acc(*b, &mut |s| {
                        for bi in 0..nb {
                            let (oa, ob) = (map_a[bi] * p * q, map_b[bi] * q * r);
                            gemm_tn_acc(
                                &da[oa..oa + p * q],
                                &g[bi * p * r..(bi + 1) * p * r],
                                &mut s[ob..ob + q * r],
                                p,
                                q,
                                r,
                            );
                        }
                    });
                }
            }
            Op::TransposeLast(a) => {
                let sh = node.value.shape();
                // node is [.., n, m]; input is [.., m, n]
                let (n, m) = (sh[sh.len() - 2], sh[sh.len() - 1]);
                acc(*a, &mut |s| {
                    for (blk_g, blk_s) in g.chunks(m * n).zip(s.chunks_mut(m * n)) {
                        for i in 0..m {
                            for j in 0..n {
                                blk_s[i * n + j] += blk_g[j * m + i];
                            }
                        }
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g)),
            Op::SliceLast { x, start } => {
                let len = *node.value.shape().last().unwrap();
                let last = *self.nodes[x.0].value.shape().last().unwrap();
                acc(*x, &mut |s| {
                    for (row_s, row_g) in s.chunks_mut(last).zip(g.chunks(len)) {
                        for (d, v) in row_s[*start..*start + len].iter_mut().zip(row_g) {
                            *d += v;
                        }
                    }
                });
            }
            Op::ConcatLast(parts) => {
                let total = *node.value.shape().last().unwrap();
                let mut offset = 0;
                for &p in parts {
                    let w = *self.nodes[p.0].value.shape().last().unwrap();
                    acc(p, &mut |s| {
                        for (row_s, row_g) in s.chunks_mut(w).zip(g.chunks(total)) {
                            for (d, v) in row_s.iter_mut().zip(&row_g[offset..offset + w]) {
                                *d += v;
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::StackAxis1(parts) => {
                let n = parts.len();
                let inner = self.nodes[parts[0].0].value.numel() / node.value.shape()[0];
                for (k, &p) in parts.iter().enumerate() {
                    acc(p, &mut |s| {
                        for (bi, chunk) in s.chunks_mut(inner).enumerate() {
                            let o = (bi * n + k) * inner;
                            chunk.iter_mut().zip(&g[o..o + inner]).for_each(|(d, v)| *d += v);
                        }
                    });
                }
            }
            Op::SelectAxis1 { x, index } => {
                let sx = self.nodes[x.0].value.shape();
                let (len1, inner) = (sx[1], sx[2..].iter().product::<usize>());
                acc(*x, &mut |s| {
                    for (bi, gv) in g.chunks(inner).enumerate() {
                        let o = (bi * len1 + index) * inner;
                        s[o..o + inner].iter_mut().zip(gv).for_each(|(d, v)| *d += v);
                    }
                });
            }
            Op::Relu(a) => {
                let da = val(*a);
                acc(*a, &mut |s| {
                    for i in 0..g.len() {
                        if da[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let c = *node.value.shape().last().unwrap();
                acc(*a, &mut |s| {
                    for ((srow, yrow), grow) in s.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                        let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                        for j in 0..c {
                            srow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let y = node.value.data();
                let c = *node.value.shape().last().unwrap();
                acc(*a, &mut |s| {
                    for ((srow, yrow), grow) in s.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                        let gsum: f64 = grow.iter().sum();
                        for j in 0..c {
                            srow[j] += grow[j] - yrow[j].exp() * gsum;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = *node.value.shape().last().unwrap();
                let gv = val(*gain);
                acc(*gain, &mut |s| {
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            s[j] += grow[j] * hrow[j];
                        }
                    }
                });
                acc(*bias, &mut |s| {
                    for grow in g.chunks(d) {
                        s.iter_mut().zip(grow).for_each(|(s, g)| *s += g);
                    }
                });
                acc(*x, &mut |s| {
                    let nd = d as f64;
                    for (r, ((srow, grow), hrow)) in
                        s.chunks_mut(d).zip(g.chunks(d)).zip(xhat.chunks(d)).enumerate()
                    {
                        let dh: Vec<f64> = grow.iter().zip(gv).map(|(g, w)| g * w).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hrow).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            srow[j] += inv_std[r] / nd * (nd * dh[j] - sum_dh - hrow[j] * sum_dh_h);
                        }
                    }
                });
            }
            Op::GatherRows { table, ids } => {
                let d = node.value.shape()[1];
                acc(*table, &mut |s| {
                    for (k, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            s[id * d + j] += g[k * d + j];
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.numel() as f64;
                acc(*a, &mut |s| s.iter_mut().for_each(|s| *s += g[0] / n));
            }
            Op::Mse(a, b) => {
                let (da, db) = (val(*a), val(*b));
                let k = 2.0 * g[0] / da.len() as f64;
                acc(*a, &mut |s| (0..s.len()).for_each(|i| s[i] += k * (da[i] - db[i])));
                acc(*b, &mut |s| (0..s.len()).for_each(|i| s[i] -= k * (da[i] - db[i])));
            }
            Op::MaskedMse { a, b, mask, count } => {
                if *count == 0.0 {
                    return;
                }
                let (da, db) = (val(*a), val(*b));
                let k = 2.0 * g[0] / count;
                acc(*a, &mut |s| (0..s.len()).for_each(|i| s[i] += k * mask[i] * (da[i] - db[i])));
                acc(*b, &mut |s| (0..s.len()).for_each(|i| s[i] -= k * mask[i] * (da[i] - db[i])));
            }
            Op::Dropout { x, keep } => {
                acc(*x, &mut |s| (0..s.len()).for_each(|i| s[i] += g[i] * keep[i]));
            }
        }
    }
}
