//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in creation
//! order. Creation order is a topological order, so [`Graph::backward`]
//! walks the node list once in reverse. Parameters are borrowed from a
//! [`ParamStore`] rather than copied; their gradients come back as a
//! [`Gradients`] map keyed by [`ParamId`].
//!
//! Broadcasting is limited to scalar constants (`add_scalar`, `mul_scalar`)
//! and the explicit [`Graph::broadcast_rows`]; every other shape mix fails.

use std::borrow::Cow;

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{self, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    MatMul(usize, usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Stack(Vec<usize>),
    Slice { input: usize, start: usize, len: usize },
    Row { input: usize, index: usize },
    BroadcastRows(usize),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Softmax(usize),
    LogSoftmax(usize),
    Sum(usize),
    Mean(usize),
    Max(usize),
    MaxScalar(usize, f64),
    Clamp(usize, f64, f64),
    Pick(usize, usize),
}

#[derive(Debug)]
struct Node<'p> {
    op: Op,
    value: Cow<'p, Tensor>,
    requires_grad: bool,
}

/// One forward computation and its tape. Confined to the thread that owns it.
#[derive(Debug)]
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node<'p>>,
    param_nodes: Vec<Option<usize>>,
    grad_enabled: bool,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(1024),
            param_nodes: vec![None; store.len()],
            grad_enabled: true,
        }
    }

    /// A graph that never records gradients; every node is a constant.
    pub fn inference(store: &'p ParamStore) -> Self {
        let mut g = Self::new(store);
        g.grad_enabled = false;
        g
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value: Cow::Owned(value),
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A constant leaf.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn constant_scalar(&mut self, value: f64) -> Var {
        self.input(Tensor::scalar(value))
    }

    /// The node for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(i) = self.param_nodes[id.0] {
            return Var(i);
        }
        let p = self.store.get(id);
        self.nodes.push(Node {
            op: Op::Param(id),
            value: Cow::Borrowed(&p.value),
            requires_grad: p.requires_grad && self.grad_enabled,
        });
        let i = self.nodes.len() - 1;
        self.param_nodes[id.0] = Some(i);
        Var(i)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn elementwise2(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: fn(usize, usize) -> Op,
    ) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let (ta, tb) = (self.val(a), self.val(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(make(a.0, b.0), out, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.val(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(a.0);
        self.push(op, out, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise2("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise2("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise2("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a.0))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::MulScalar(a.0, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, -1.0)
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let n = self.mul_scalar(a, -1.0);
        self.add_scalar(n, 1.0)
    }

    /// Matrix product with numpy-style handling of rank-1 operands:
    /// `[m,k]·[k,n]`, `[m,k]·[k]`, `[k]·[k,n]` and `[k]·[k]` (a dot product).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        let out = match (ta.shape(), tb.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => {
                let mut out = vec![0.0; m * n];
                let (ad, bd) = (ta.data(), tb.data());
                for i in 0..m {
                    let orow = &mut out[i * n..(i + 1) * n];
                    for p in 0..k {
                        let aip = ad[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        axpy(aip, &bd[p * n..(p + 1) * n], orow);
                    }
                }
                Tensor::from_parts(vec![m, n], out)
            }
            (&[m, k], &[k2]) if k == k2 => {
                let (ad, x) = (ta.data(), tb.data());
                let out = (0..m).map(|i| dot(&ad[i * k..(i + 1) * k], x)).collect();
                Tensor::from_parts(vec![m], out)
            }
            (&[k], &[k2, n]) if k == k2 => {
                let (x, bd) = (ta.data(), tb.data());
                let mut out = vec![0.0; n];
                for (p, &xp) in x.iter().enumerate() {
                    axpy(xp, &bd[p * n..(p + 1) * n], &mut out);
                }
                Tensor::from_parts(vec![n], out)
            }
            (&[k], &[k2]) if k == k2 => Tensor::scalar(dot(ta.data(), tb.data())),
            (sa, sb) => return Err(Error::shape("matmul", sa, sb)),
        };
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(Op::MatMul(a.0, b.0), out, rg))
    }

    /// Concatenate along `axis` (0 for vectors or rows; 1 for matrix columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::domain("concat", "no inputs"))?;
        let rank = self.shape(first).len();
        let out = match (rank, axis) {
            (1, 0) | (2, 0) => {
                let tail = &self.shape(first)[1..].to_vec();
                let mut lead = 0;
                let mut data = Vec::new();
                for &p in parts {
                    let s = self.shape(p);
                    if s.len() != rank || &s[1..] != tail.as_slice() {
                        return Err(Error::shape("concat", self.shape(first), s));
                    }
                    lead += s[0];
                    data.extend_from_slice(self.val(p).data());
                }
                let mut shape = vec![lead];
                shape.extend_from_slice(tail);
                Tensor::from_parts(shape, data)
            }
            (2, 1) => {
                let rows = self.shape(first)[0];
                let mut cols = 0;
                for &p in parts {
                    let s = self.shape(p);
                    if s.len() != 2 || s[0] != rows {
                        return Err(Error::shape("concat", self.shape(first), s));
                    }
                    cols += s[1];
                }
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for &p in parts {
                        data.extend_from_slice(self.val(p).row(r));
                    }
                }
                Tensor::from_parts(vec![rows, cols], data)
            }
            _ => {
                return Err(Error::domain(
                    "concat",
                    format!("unsupported axis {axis} for rank {rank}"),
                ))
            }
        };
        let rg = parts.iter().any(|p| self.rg(p.0));
        let inputs = parts.iter().map(|p| p.0).collect();
        Ok(self.push(Op::Concat { inputs, axis }, out, rg))
    }

    /// Stack equal-length vectors as the rows of a matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        let first = *rows.first().ok_or_else(|| Error::domain("stack", "no inputs"))?;
        let width = self.shape(first).to_vec();
        if width.len() != 1 {
            return Err(Error::shape("stack", &width, &[]));
        }
        let mut data = Vec::with_capacity(rows.len() * width[0]);
        for &r in rows {
            if self.shape(r) != width.as_slice() {
                return Err(Error::shape("stack", &width, self.shape(r)));
            }
            data.extend_from_slice(self.val(r).data());
        }
        let out = Tensor::from_parts(vec![rows.len(), width[0]], data);
        let rg = rows.iter().any(|r| self.rg(r.0));
        Ok(self.push(Op::Stack(rows.iter().map(|r| r.0).collect()), out, rg))
    }

    /// Entries `start..start+len` along axis 0.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.val(a);
        let lead = *ta
            .shape()
            .first()
            .ok_or_else(|| Error::domain("slice", "scalar input"))?;
        if start + len > lead || len == 0 {
            return Err(Error::OutOfRange {
                what: "slice",
                index: start + len,
                size: lead,
            });
        }
        let inner: usize = ta.shape()[1..].iter().product();
        let data = ta.data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = ta.shape().to_vec();
        shape[0] = len;
        let out = Tensor::from_parts(shape, data);
        let rg = self.rg(a.0);
        Ok(self.push(Op::Slice { input: a.0, start, len }, out, rg))
    }

    /// Row `index` of a matrix as a vector (an embedding lookup).
    pub fn row(&mut self, a: Var, index: usize) -> Result<Var> {
        let ta = self.val(a);
        if ta.rank() != 2 {
            return Err(Error::shape("row", ta.shape(), &[index]));
        }
        if index >= ta.rows() {
            return Err(Error::OutOfRange {
                what: "row",
                index,
                size: ta.rows(),
            });
        }
        let out = Tensor::vector(ta.row(index).to_vec());
        let rg = self.rg(a.0);
        Ok(self.push(Op::Row { input: a.0, index }, out, rg))
    }

    /// Repeat a vector as `rows` identical matrix rows.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let ta = self.val(a);
        if ta.rank() != 1 {
            return Err(Error::shape("broadcast_rows", ta.shape(), &[rows]));
        }
        let mut data = Vec::with_capacity(rows * ta.len());
        for _ in 0..rows {
            data.extend_from_slice(ta.data());
        }
        let out = Tensor::from_parts(vec![rows, ta.len()], data);
        let rg = self.rg(a.0);
        Ok(self.push(Op::BroadcastRows(a.0), out, rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, tensor::sigmoid, Op::Sigmoid(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a.0))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.val(a).data().iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(Error::domain("log", format!("non-positive input {bad}")));
        }
        Ok(self.unary(a, f64::ln, Op::Log(a.0)))
    }

    fn rowwise(&mut self, a: Var, f: fn(&[f64]) -> Vec<f64>, op: Op) -> Result<Var> {
        let ta = self.val(a);
        if ta.rank() == 0 || ta.is_empty() {
            return Err(Error::shape("softmax", ta.shape(), &[]));
        }
        let cols = ta.cols();
        let mut data = Vec::with_capacity(ta.len());
        for chunk in ta.data().chunks(cols) {
            data.extend(f(chunk));
        }
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(a.0);
        Ok(self.push(op, out, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.rowwise(a, tensor::softmax, Op::Softmax(a.0))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.rowwise(a, tensor::log_softmax, Op::LogSoftmax(a.0))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.val(a).data().iter().sum();
        let rg = self.rg(a.0);
        self.push(Op::Sum(a.0), Tensor::scalar(s), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.val(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(a.0);
        self.push(Op::Mean(a.0), Tensor::scalar(s), rg)
    }

    /// Maximum over all entries; the gradient goes to the first maximiser.
    pub fn max(&mut self, a: Var) -> Var {
        let t = self.val(a);
        let m = t.data()[t.argmax()];
        let rg = self.rg(a.0);
        self.push(Op::Max(a.0), Tensor::scalar(m), rg)
    }

    /// Elementwise `max(a, floor)`.
    pub fn max_scalar(&mut self, a: Var, floor: f64) -> Var {
        self.unary(a, |x| x.max(floor), Op::MaxScalar(a.0, floor))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a.0, lo, hi))
    }

    /// Entry `index` of a vector as a scalar.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var> {
        let t = self.val(a);
        if t.rank() != 1 {
            return Err(Error::shape("pick", t.shape(), &[index]));
        }
        if index >= t.len() {
            return Err(Error::OutOfRange {
                what: "pick",
                index,
                size: t.len(),
            });
        }
        let v = t.data()[index];
        let rg = self.rg(a.0);
        Ok(self.push(Op::Pick(a.0, index), Tensor::scalar(v), rg))
    }

    /// Sum of several same-shape nodes.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::domain("add_all", "no inputs"))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// Gradients of a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.backward_seeded(&[(loss, 1.0)])
    }

    /// Gradients of `Σ weight · node` for scalar nodes.
    pub fn backward_seeded(&self, seeds: &[(Var, f64)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut top = 0;
        for &(v, w) in seeds {
            let t = self.val(v);
            if t.len() != 1 || t.rank() != 0 {
                return Err(Error::shape("backward", t.shape(), &[]));
            }
            if !self.rg(v.0) || w == 0.0 {
                continue;
            }
            let g = grads[v.0].get_or_insert_with(|| vec![0.0]);
            g[0] += w;
            top = top.max(v.0 + 1);
        }

        let mut out: Vec<Option<Tensor>> = vec![None; self.store.len()];
        for i in (0..top).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    out[id.0] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                }
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, |d| add_into(d, &g));
                    self.acc(&mut grads, *b, |d| add_into(d, &g));
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *a, |d| add_into(d, &g));
                    self.acc(&mut grads, *b, |d| {
                        for (x, y) in d.iter_mut().zip(&g) {
                            *x -= y;
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                    self.acc(&mut grads, *a, |d| {
                        for ((x, gi), bi) in d.iter_mut().zip(&g).zip(vb) {
                            *x += gi * bi;
                        }
                    });
                    self.acc(&mut grads, *b, |d| {
                        for ((x, gi), ai) in d.iter_mut().zip(&g).zip(va) {
                            *x += gi * ai;
                        }
                    });
                }
                Op::AddScalar(a) => self.acc(&mut grads, *a, |d| add_into(d, &g)),
                Op::MulScalar(a, c) => self.acc(&mut grads, *a, |d| axpy(*c, &g, d)),
                Op::MatMul(a, b) => self.matmul_backward(&mut grads, *a, *b, &g),
                Op::Concat { inputs, axis } => {
                    let rank = node.value.rank();
                    if rank == 2 && *axis == 1 {
                        let total = node.value.cols();
                        let mut offset = 0;
                        for &p in inputs {
                            let pc = self.nodes[p].value.cols();
                            let rows = self.nodes[p].value.rows();
                            self.acc(&mut grads, p, |d| {
                                for r in 0..rows {
                                    add_into(
                                        &mut d[r * pc..(r + 1) * pc],
                                        &g[r * total + offset..r * total + offset + pc],
                                    );
                                }
                            });
                            offset += pc;
                        }
                    } else {
                        let mut offset = 0;
                        for &p in inputs {
                            let n = self.nodes[p].value.len();
                            self.acc(&mut grads, p, |d| add_into(d, &g[offset..offset + n]));
                            offset += n;
                        }
                    }
                }
                Op::Stack(rows) => {
                    let w = node.value.cols();
                    for (r, &p) in rows.iter().enumerate() {
                        self.acc(&mut grads, p, |d| add_into(d, &g[r * w..(r + 1) * w]));
                    }
                }
                Op::Slice { input, start, len } => {
                    let inner = node.value.len() / len;
                    self.acc(&mut grads, *input, |d| {
                        add_into(&mut d[start * inner..(start + len) * inner], &g)
                    });
                }
                Op::Row { input, index } => {
                    let w = g.len();
                    self.acc(&mut grads, *input, |d| add_into(&mut d[index * w..(index + 1) * w], &g));
                }
                Op::BroadcastRows(a) => {
                    let w = self.nodes[*a].value.len();
                    self.acc(&mut grads, *a, |d| {
                        for chunk in g.chunks(w) {
                            add_into(d, chunk);
                        }
                    });
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    self.acc(&mut grads, *a, |d| {
                        for ((x, gi), yi) in d.iter_mut().zip(&g).zip(y) {
                            *x += gi * yi * (1.0 - yi);
                        }
                    });
                }
                Op::Tanh(a) => {
                    let y = node.value.data();
                    self.acc(&mut grads, *a, |d| {
                        for ((x, gi), yi) in d.iter_mut().zip(&g).zip(y) {
                            *x += gi * (1.0 - yi * yi);
                        }
                    });
                }
                Op::Exp(a) => {
                    let y = node.value.data();
                    self.acc(&mut grads, *a, |d| {
                        for ((x, gi), yi) in d.iter_mut().zip(&g).zip(y) {
                            *x += gi * yi;
                        }
                    });
                }
                Op::Log(a) => {
                    let xin = self.nodes[*a].value.data();
                    self.acc(&mut grads, *a, |d| {
                        for ((x, gi), xi) in d.iter_mut().zip(&g).zip(xin) {
                            *x += gi / xi;
                        }
                    });
                }
                Op::Softmax(a) => {
                    let y = node.value.data();
                    let cols = node.value.cols();
                    self.acc(&mut grads, *a, |d| {
                        for ((dr, gr), yr) in d.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                            let s: f64 = gr.iter().zip(yr).map(|(gi, yi)| gi * yi).sum();
                            for ((x, gi), yi) in dr.iter_mut().zip(gr).zip(yr) {
                                *x += yi * (gi - s);
                            }
                        }
                    });
                }
                Op::LogSoftmax(a) => {
                    let y = node.value.data();
                    let cols = node.value.cols();
                    self.acc(&mut grads, *a, |d| {
                        for ((dr, gr), yr) in d.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                            let s: f64 = gr.iter().sum();
                            for ((x, gi), yi) in dr.iter_mut().zip(gr).zip(yr) {
                                *x += gi - yi.exp() * s;
                            }
                        }
                    });
                }
                Op::Sum(a) => self.acc(&mut grads, *a, |d| d.iter_mut().for_each(|x| *x += g[0])),
                Op::Mean(a) => {
                    let n = self.nodes[*a].value.len() as f64;
                    self.acc(&mut grads, *a, |d| d.iter_mut().for_each(|x| *x += g[0] / n));
                }
                Op::Max(a) => {
                    let idx = self.nodes[*a].value.argmax();
                    self.acc(&mut grads, *a, |d| d[idx] += g[0]);
                }
                Op::MaxScalar(a, floor) => {
                    let xin = self.nodes[*a].value.data();
                    self.acc(&mut grads, *a, |d| {
                        for ((x, gi), xi) in d.iter_mut().zip(&g).zip(xin) {
                            if xi > floor {
                                *x += gi;
                            }
                        }
                    });
                }
                Op::Clamp(a, lo, hi) => {
                    let xin = self.nodes[*a].value.data();
                    self.acc(&mut grads, *a, |d| {
                        for ((x, gi), xi) in d.iter_mut().zip(&g).zip(xin) {
                            if xi >= lo && xi <= hi {
                                *x += gi;
                            }
                        }
                    });
                }
                Op::Pick(a, index) => self.acc(&mut grads, *a, |d| d[*index] += g[0]),
            }
        }
        Ok(Gradients::from_vec(out))
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], i: usize, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[i].requires_grad {
            return;
        }
        let n = self.nodes[i].value.len();
        let d = grads[i].get_or_insert_with(|| vec![0.0; n]);
        f(d);
    }

    fn matmul_backward(&self, grads: &mut [Option<Vec<f64>>], a: usize, b: usize, g: &[f64]) {
        let (ta, tb) = (&*self.nodes[a].value, &*self.nodes[b].value);
        let (ad, bd) = (ta.data(), tb.data());
        match (ta.shape(), tb.shape()) {
            (&[m, k], &[_, n]) => {
                // dA = G·Bᵀ, dB = Aᵀ·G
                self.acc(grads, a, |d| {
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            d[i * k + p] += dot(gr, &bd[p * n..(p + 1) * n]);
                        }
                    }
                });
                self.acc(grads, b, |d| {
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = ad[i * k + p];
                            if aip != 0.0 {
                                axpy(aip, gr, &mut d[p * n..(p + 1) * n]);
                            }
                        }
                    }
                });
            }
            (&[m, k], &[_]) => {
                self.acc(grads, a, |d| {
                    for i in 0..m {
                        if g[i] != 0.0 {
                            axpy(g[i], bd, &mut d[i * k..(i + 1) * k]);
                        }
                    }
                });
                self.acc(grads, b, |d| {
                    for i in 0..m {
                        if g[i] != 0.0 {
                            axpy(g[i], &ad[i * k..(i + 1) * k], d);
                        }
                    }
                });
            }
            (&[k], &[_, n]) => {
                self.acc(grads, a, |d| {
                    for p in 0..k {
                        d[p] += dot(&bd[p * n..(p + 1) * n], g);
                    }
                });
                self.acc(grads, b, |d| {
                    for p in 0..k {
                        if ad[p] != 0.0 {
                            axpy(ad[p], g, &mut d[p * n..(p + 1) * n]);
                        }
                    }
                });
            }
            _ => {
                self.acc(grads, a, |d| axpy(g[0], bd, d));
                self.acc(grads, b, |d| axpy(g[0], ad, d));
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `y += a * x`
#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Dot product with four independent accumulators.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        s += x * y;
    }
    s
}
