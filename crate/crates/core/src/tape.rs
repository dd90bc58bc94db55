//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass together with its
//! output value. [`Tape::backward`] walks the record in reverse and returns
//! the gradient of a scalar with respect to every parameter leaf. A fresh
//! tape is built for every forward pass.
//!
//! Every node also carries a FLOP count (see [`crate::profiler::FLOP_CONVENTION`])
//! and the profiling scope that was active when it was recorded.

use std::cell::{Ref, RefCell};

use crate::error::{GtrsError, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

const FLOPS_SOFTMAX: u64 = 5;
const FLOPS_NORM: u64 = 8;

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    AddCol(usize, usize),
    MulRow(usize, usize),
    DivCol(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Gelu(usize),
    Sigmoid(usize),
    Abs(usize),
    SoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    MeanRows(usize),
    SumCols(usize),
    RowNorm(usize),
    Sum(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows { a: usize, start: usize },
    SliceCols { a: usize, start: usize },
    GatherRows { a: usize, idx: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    flops: u64,
    scope: usize,
}

struct Inner {
    nodes: Vec<Node>,
    scopes: Vec<String>,
    current_scope: usize,
}

pub struct Tape {
    inner: RefCell<Inner>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    id: usize,
    tape: &'t Tape,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, shape {:?})", self.id, self.shape())
    }
}

/// Restores the previous profiling scope when dropped.
pub struct ScopeGuard<'t> {
    tape: &'t Tape,
    previous: usize,
}

impl Drop for ScopeGuard<'_> {
    fn drop(&mut self) {
        self.tape.inner.borrow_mut().current_scope = self.previous;
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        [n] => (1, *n),
        [m, n] => (*m, *n),
        [a, b, c] => (a * b, *c),
        _ => unreachable!("tensor rank is validated at construction"),
    }
}

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows_into(x: &[f64], out: &mut [f64], n: usize) {
    for (row, out_row) in x.chunks(n).zip(out.chunks_mut(n)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (o, &v) in out_row.iter_mut().zip(row) {
            *o = (v - max).exp();
            total += *o;
        }
        for o in out_row.iter_mut() {
            *o /= total;
        }
    }
}

pub fn gelu(x: f64) -> f64 {
    gelu_scalar(x)
}

pub fn sigmoid(x: f64) -> f64 {
    sigmoid_scalar(x)
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                scopes: vec![String::new()],
                current_scope: 0,
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Attributes nodes recorded until the guard drops to `name`.
    pub fn scope(&self, name: &str) -> ScopeGuard<'_> {
        let mut inner = self.inner.borrow_mut();
        let previous = inner.current_scope;
        let idx = match inner.scopes.iter().position(|s| s == name) {
            Some(i) => i,
            None => {
                inner.scopes.push(name.to_string());
                inner.scopes.len() - 1
            }
        };
        inner.current_scope = idx;
        ScopeGuard {
            tape: self,
            previous,
        }
    }

    pub fn total_flops(&self) -> u64 {
        self.inner.borrow().nodes.iter().map(|n| n.flops).sum()
    }

    /// FLOPs per scope in first-use order; the unnamed scope is reported as "".
    pub fn flops_by_scope(&self) -> Vec<(String, u64)> {
        let inner = self.inner.borrow();
        let mut totals = vec![0u64; inner.scopes.len()];
        for node in &inner.nodes {
            totals[node.scope] += node.flops;
        }
        inner.scopes.iter().cloned().zip(totals).collect()
    }

    /// Sign (-1, 0, +1) of every input to an absolute-value node, in record
    /// order. Two evaluations with equal signatures lie on the same smooth
    /// piece of every L1 term.
    pub fn abs_signature(&self) -> Vec<i8> {
        let inner = self.inner.borrow();
        let mut out = Vec::new();
        for node in &inner.nodes {
            if let Op::Abs(a) = node.op {
                out.extend(inner.nodes[a].value.data().iter().map(|v| {
                    if *v > 0.0 {
                        1
                    } else if *v < 0.0 {
                        -1
                    } else {
                        0
                    }
                }));
            }
        }
        out
    }

    fn push(&self, value: Tensor, op: Op, flops: u64) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        let scope = inner.current_scope;
        inner.nodes.push(Node {
            value,
            op,
            flops,
            scope,
        });
        Var {
            id: inner.nodes.len() - 1,
            tape: self,
        }
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, 0)
    }

    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        self.push(store.value(id).clone(), Op::Param(id), 0)
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.inner.borrow(), |inner| &inner.nodes[id].value)
    }

    /// Gradients of the scalar `loss` with respect to every trainable
    /// parameter leaf recorded on this tape.
    pub fn backward(&self, loss: Var<'_>, store: &ParamStore) -> Result<Gradients> {
        let inner = self.inner.borrow();
        let nodes = &inner.nodes;
        if !nodes[loss.id].value.is_scalar() {
            return Err(GtrsError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);

        fn slot<'g>(
            grads: &'g mut [Option<Vec<f64>>],
            nodes: &[Node],
            id: usize,
        ) -> &'g mut Vec<f64> {
            grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.numel()])
        }

        let mut out = Gradients(vec![None; store.len()]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let y = node.value.data();
            match &node.op {
                Op::Leaf => {}
                Op::Param(pid) => {
                    if store.get(*pid).trainable {
                        let t = Tensor::new(node.value.shape(), g)?;
                        match &mut out.0[pid.0] {
                            Some(existing) => {
                                for (e, v) in existing.data_mut().iter_mut().zip(t.data()) {
                                    *e += v;
                                }
                            }
                            slot @ None => *slot = Some(t),
                        }
                    }
                }
                &Op::MatMul(a, b) => {
                    let (m, k) = dims(&nodes[a].value);
                    let (_, n) = dims(&nodes[b].value);
                    let bv = nodes[b].value.data();
                    let av = nodes[a].value.data();
                    gemm_nt(&g, bv, slot(&mut grads, nodes, a), m, n, k);
                    gemm_tn(av, &g, slot(&mut grads, nodes, b), k, m, n);
                }
                &Op::MatMulNt(a, b) => {
                    let (m, k) = dims(&nodes[a].value);
                    let (n, _) = dims(&nodes[b].value);
                    let bv = nodes[b].value.data();
                    let av = nodes[a].value.data();
                    gemm_nn(&g, bv, slot(&mut grads, nodes, a), m, n, k);
                    gemm_tn(&g, av, slot(&mut grads, nodes, b), n, m, k);
                }
                &Op::Add(a, b) => {
                    for (s, v) in slot(&mut grads, nodes, a).iter_mut().zip(&g) {
                        *s += v;
                    }
                    for (s, v) in slot(&mut grads, nodes, b).iter_mut().zip(&g) {
                        *s += v;
                    }
                }
                &Op::Sub(a, b) => {
                    for (s, v) in slot(&mut grads, nodes, a).iter_mut().zip(&g) {
                        *s += v;
                    }
                    for (s, v) in slot(&mut grads, nodes, b).iter_mut().zip(&g) {
                        *s -= v;
                    }
                }
                &Op::Mul(a, b) => {
                    let av = nodes[a].value.data();
                    let bv = nodes[b].value.data();
                    for ((s, v), w) in slot(&mut grads, nodes, a).iter_mut().zip(&g).zip(bv) {
                        *s += v * w;
                    }
                    for ((s, v), w) in slot(&mut grads, nodes, b).iter_mut().zip(&g).zip(av) {
                        *s += v * w;
                    }
                }
                &Op::AddRow(a, bias) => {
                    let (_, n) = dims(&nodes[a].value);
                    for (s, v) in slot(&mut grads, nodes, a).iter_mut().zip(&g) {
                        *s += v;
                    }
                    let gb = slot(&mut grads, nodes, bias);
                    for row in g.chunks(n) {
                        for (s, v) in gb.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                }
                &Op::AddCol(a, bias) => {
                    let (_, n) = dims(&nodes[a].value);
                    for (s, v) in slot(&mut grads, nodes, a).iter_mut().zip(&g) {
                        *s += v;
                    }
                    let gb = slot(&mut grads, nodes, bias);
                    for (s, row) in gb.iter_mut().zip(g.chunks(n)) {
                        *s += row.iter().sum::<f64>();
                    }
                }
                &Op::MulRow(a, gate) => {
                    let (_, n) = dims(&nodes[a].value);
                    let av = nodes[a].value.data();
                    let gv = nodes[gate].value.data();
                    {
                        let ga = slot(&mut grads, nodes, a);
                        for (grow, srow) in g.chunks(n).zip(ga.chunks_mut(n)) {
                            for ((s, v), w) in srow.iter_mut().zip(grow).zip(gv) {
                                *s += v * w;
                            }
                        }
                    }
                    let gg = slot(&mut grads, nodes, gate);
                    for (grow, arow) in g.chunks(n).zip(av.chunks(n)) {
                        for ((s, v), x) in gg.iter_mut().zip(grow).zip(arow) {
                            *s += v * x;
                        }
                    }
                }
                &Op::DivCol(a, s) => {
                    let (_, n) = dims(&nodes[a].value);
                    let av = nodes[a].value.data();
                    let sv = nodes[s].value.data();
                    {
                        let ga = slot(&mut grads, nodes, a);
                        for ((grow, garow), &d) in g.chunks(n).zip(ga.chunks_mut(n)).zip(sv) {
                            for (x, v) in garow.iter_mut().zip(grow) {
                                *x += v / d;
                            }
                        }
                    }
                    let gs = slot(&mut grads, nodes, s);
                    for (i, (grow, arow)) in g.chunks(n).zip(av.chunks(n)).enumerate() {
                        let dot: f64 = grow.iter().zip(arow).map(|(v, x)| v * x).sum();
                        gs[i] -= dot / (sv[i] * sv[i]);
                    }
                }
                &Op::Scale(a, c) => {
                    for (s, v) in slot(&mut grads, nodes, a).iter_mut().zip(&g) {
                        *s += c * v;
                    }
                }
                &Op::AddScalar(a) => {
                    for (s, v) in slot(&mut grads, nodes, a).iter_mut().zip(&g) {
                        *s += v;
                    }
                }
                &Op::Gelu(a) => {
                    let av = nodes[a].value.data();
                    for ((s, v), &x) in slot(&mut grads, nodes, a).iter_mut().zip(&g).zip(av) {
                        *s += v * gelu_grad(x);
                    }
                }
                &Op::Sigmoid(a) => {
                    for ((s, v), &o) in slot(&mut grads, nodes, a).iter_mut().zip(&g).zip(y) {
                        *s += v * o * (1.0 - o);
                    }
                }
                &Op::Abs(a) => {
                    let av = nodes[a].value.data();
                    for ((s, v), &x) in slot(&mut grads, nodes, a).iter_mut().zip(&g).zip(av) {
                        // subgradient 0 at the kink
                        if x > 0.0 {
                            *s += v;
                        } else if x < 0.0 {
                            *s -= v;
                        }
                    }
                }
                &Op::SoftmaxRows(a) => {
                    let (_, n) = dims(&node.value);
                    let ga = slot(&mut grads, nodes, a);
                    for ((grow, yrow), srow) in g.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(v, o)| v * o).sum();
                        for ((s, v), o) in srow.iter_mut().zip(grow).zip(yrow) {
                            *s += o * (v - dot);
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let (_, n) = dims(&nodes[*x].value);
                    let gainv = nodes[*gain].value.data();
                    {
                        let gg = slot(&mut grads, nodes, *gain);
                        for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                            for ((s, v), h) in gg.iter_mut().zip(grow).zip(hrow) {
                                *s += v * h;
                            }
                        }
                    }
                    {
                        let gb = slot(&mut grads, nodes, *bias);
                        for grow in g.chunks(n) {
                            for (s, v) in gb.iter_mut().zip(grow) {
                                *s += v;
                            }
                        }
                    }
                    let gx = slot(&mut grads, nodes, *x);
                    let mut ghat = vec![0.0; n];
                    for (r, ((grow, hrow), xrow)) in g
                        .chunks(n)
                        .zip(xhat.chunks(n))
                        .zip(gx.chunks_mut(n))
                        .enumerate()
                    {
                        for ((o, v), w) in ghat.iter_mut().zip(grow).zip(gainv) {
                            *o = v * w;
                        }
                        let mean_g = ghat.iter().sum::<f64>() / n as f64;
                        let mean_gh =
                            ghat.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for ((s, gh), h) in xrow.iter_mut().zip(&ghat).zip(hrow) {
                            *s += rstd[r] * (gh - mean_g - h * mean_gh);
                        }
                    }
                }
                &Op::MeanRows(a) => {
                    let (m, n) = dims(&nodes[a].value);
                    let ga = slot(&mut grads, nodes, a);
                    for row in ga.chunks_mut(n) {
                        for (s, v) in row.iter_mut().zip(&g) {
                            *s += v / m as f64;
                        }
                    }
                }
                &Op::SumCols(a) => {
                    let (_, n) = dims(&nodes[a].value);
                    let ga = slot(&mut grads, nodes, a);
                    for (row, v) in ga.chunks_mut(n).zip(&g) {
                        for s in row.iter_mut() {
                            *s += v;
                        }
                    }
                }
                &Op::RowNorm(a) => {
                    let (_, n) = dims(&nodes[a].value);
                    let av = nodes[a].value.data();
                    let ga = slot(&mut grads, nodes, a);
                    for (((row, arow), v), &norm) in
                        ga.chunks_mut(n).zip(av.chunks(n)).zip(&g).zip(y)
                    {
                        if norm > 0.0 {
                            for (s, x) in row.iter_mut().zip(arow) {
                                *s += v * x / norm;
                            }
                        }
                    }
                }
                &Op::Sum(a) => {
                    for s in slot(&mut grads, nodes, a).iter_mut() {
                        *s += g[0];
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = nodes[p].value.numel();
                        for (s, v) in slot(&mut grads, nodes, p)
                            .iter_mut()
                            .zip(&g[offset..offset + len])
                        {
                            *s += v;
                        }
                        offset += len;
                    }
                }
                Op::ConcatCols(parts) => {
                    let (_, n) = dims(&node.value);
                    let mut col = 0;
                    for &p in parts {
                        let (_, pn) = dims(&nodes[p].value);
                        let gp = slot(&mut grads, nodes, p);
                        for (prow, grow) in gp.chunks_mut(pn).zip(g.chunks(n)) {
                            for (s, v) in prow.iter_mut().zip(&grow[col..col + pn]) {
                                *s += v;
                            }
                        }
                        col += pn;
                    }
                }
                &Op::SliceRows { a, start } => {
                    let (_, n) = dims(&nodes[a].value);
                    let ga = slot(&mut grads, nodes, a);
                    for (s, v) in ga[start * n..start * n + g.len()].iter_mut().zip(&g) {
                        *s += v;
                    }
                }
                &Op::SliceCols { a, start } => {
                    let (_, n) = dims(&nodes[a].value);
                    let (_, w) = dims(&node.value);
                    let ga = slot(&mut grads, nodes, a);
                    for (arow, grow) in ga.chunks_mut(n).zip(g.chunks(w)) {
                        for (s, v) in arow[start..start + w].iter_mut().zip(grow) {
                            *s += v;
                        }
                    }
                }
                Op::GatherRows { a, idx } => {
                    let (_, n) = dims(&nodes[*a].value);
                    let ga = slot(&mut grads, nodes, *a);
                    for (&src, grow) in idx.iter().zip(g.chunks(n)) {
                        for (s, v) in ga[src * n..(src + 1) * n].iter_mut().zip(grow) {
                            *s += v;
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

macro_rules! same_shape {
    ($op:literal, $a:expr, $b:expr) => {
        if $a.shape() != $b.shape() {
            return Err(GtrsError::shape($op, $a.shape(), $b.shape()));
        }
    };
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        self.tape.value(self.id)
    }

    pub fn tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Value of a single-element variable.
    pub fn item(&self) -> f64 {
        self.value().data()[0]
    }

    fn same_tape(&self, other: &Var<'t>) {
        debug_assert!(std::ptr::eq(self.tape, other.tape), "variables from different tapes");
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64, flops_per: u64) -> Var<'t> {
        let out = self.value().map(f);
        let flops = flops_per * out.numel() as u64;
        self.tape.push(out, op, flops)
    }

    fn zip_with(&self, other: &Var<'t>, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let a = self.value();
        let b = other.value();
        let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(a.shape(), data).expect("shapes checked by caller")
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other);
        let out = {
            let a = self.value();
            let b = other.value();
            let (m, k) = a.dims2()?;
            let (k2, n) = b.dims2()?;
            if k != k2 {
                return Err(GtrsError::shape("matmul", a.shape(), b.shape()));
            }
            let mut out = vec![0.0; m * n];
            gemm_nn(a.data(), b.data(), &mut out, m, k, n);
            Tensor::new(&[m, n], out)?
        };
        let (m, n) = (out.rows(), out.cols());
        let k = self.value().cols();
        Ok(self
            .tape
            .push(out, Op::MatMul(self.id, other.id), 2 * (m * k * n) as u64))
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other);
        let (out, k) = {
            let a = self.value();
            let b = other.value();
            let (m, k) = a.dims2()?;
            let (n, k2) = b.dims2()?;
            if k != k2 {
                return Err(GtrsError::shape("matmul_nt", a.shape(), b.shape()));
            }
            let mut out = vec![0.0; m * n];
            gemm_nt(a.data(), b.data(), &mut out, m, k, n);
            (Tensor::new(&[m, n], out)?, k)
        };
        let flops = 2 * (out.numel() * k) as u64;
        Ok(self.tape.push(out, Op::MatMulNt(self.id, other.id), flops))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        same_shape!("add", self.value(), other.value());
        let out = self.zip_with(other, |a, b| a + b);
        let flops = out.numel() as u64;
        Ok(self.tape.push(out, Op::Add(self.id, other.id), flops))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        same_shape!("sub", self.value(), other.value());
        let out = self.zip_with(other, |a, b| a - b);
        let flops = out.numel() as u64;
        Ok(self.tape.push(out, Op::Sub(self.id, other.id), flops))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        same_shape!("mul", self.value(), other.value());
        let out = self.zip_with(other, |a, b| a * b);
        let flops = out.numel() as u64;
        Ok(self.tape.push(out, Op::Mul(self.id, other.id), flops))
    }

    /// Adds `bias` (n values) to every row of an m×n matrix.
    pub fn add_row(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        let out = {
            let a = self.value();
            let b = bias.value();
            let (_, n) = a.dims2()?;
            if b.numel() != n {
                return Err(GtrsError::shape("add_row", a.shape(), b.shape()));
            }
            let mut out = a.clone();
            for row in out.data_mut().chunks_mut(n) {
                for (o, v) in row.iter_mut().zip(b.data()) {
                    *o += v;
                }
            }
            out
        };
        let flops = out.numel() as u64;
        Ok(self.tape.push(out, Op::AddRow(self.id, bias.id), flops))
    }

    /// Adds `bias[i]` to every entry of row `i`.
    pub fn add_col(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        let out = {
            let a = self.value();
            let b = bias.value();
            let (m, n) = a.dims2()?;
            if b.numel() != m {
                return Err(GtrsError::shape("add_col", a.shape(), b.shape()));
            }
            let mut out = a.clone();
            for (row, v) in out.data_mut().chunks_mut(n).zip(b.data()) {
                for o in row.iter_mut() {
                    *o += v;
                }
            }
            out
        };
        let flops = out.numel() as u64;
        Ok(self.tape.push(out, Op::AddCol(self.id, bias.id), flops))
    }

    /// Multiplies every row elementwise by `gate` (n values).
    pub fn mul_row(&self, gate: &Var<'t>) -> Result<Var<'t>> {
        let out = {
            let a = self.value();
            let b = gate.value();
            let (_, n) = a.dims2()?;
            if b.numel() != n {
                return Err(GtrsError::shape("mul_row", a.shape(), b.shape()));
            }
            let mut out = a.clone();
            for row in out.data_mut().chunks_mut(n) {
                for (o, v) in row.iter_mut().zip(b.data()) {
                    *o *= v;
                }
            }
            out
        };
        let flops = out.numel() as u64;
        Ok(self.tape.push(out, Op::MulRow(self.id, gate.id), flops))
    }

    /// Divides row `i` by `divisor[i]`.
    pub fn div_col(&self, divisor: &Var<'t>) -> Result<Var<'t>> {
        let out = {
            let a = self.value();
            let d = divisor.value();
            let (m, n) = a.dims2()?;
            if d.numel() != m {
                return Err(GtrsError::shape("div_col", a.shape(), d.shape()));
            }
            let mut out = a.clone();
            for (row, v) in out.data_mut().chunks_mut(n).zip(d.data()) {
                for o in row.iter_mut() {
                    *o /= v;
                }
            }
            out
        };
        let flops = out.numel() as u64;
        Ok(self.tape.push(out, Op::DivCol(self.id, divisor.id), flops))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |x| c * x, 1)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |x| x + c, 1)
    }

    /// Exact GELU, `x * Φ(x)`.
    pub fn gelu(&self) -> Var<'t> {
        self.unary(Op::Gelu(self.id), gelu_scalar, 1)
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), sigmoid_scalar, 1)
    }

    pub fn abs(&self) -> Var<'t> {
        self.unary(Op::Abs(self.id), f64::abs, 1)
    }

    pub fn softmax_rows(&self) -> Result<Var<'t>> {
        let out = {
            let a = self.value();
            let (_, n) = a.dims2()?;
            let mut out = Tensor::zeros(a.shape());
            softmax_rows_into(a.data(), out.data_mut(), n);
            out
        };
        let flops = FLOPS_SOFTMAX * out.numel() as u64;
        Ok(self.tape.push(out, Op::SoftmaxRows(self.id), flops))
    }

    /// Per-row normalization to zero mean and unit variance (population
    /// variance plus [`LAYER_NORM_EPS`]), followed by `gain ⊙ · + bias`.
    pub fn layer_norm(&self, gain: &Var<'t>, bias: &Var<'t>) -> Result<Var<'t>> {
        let (out, xhat, rstd) = {
            let x = self.value();
            let (m, n) = x.dims2()?;
            if n < 2 {
                return Err(GtrsError::Contract(format!(
                    "layer_norm needs at least 2 features, got {n}"
                )));
            }
            let gv = gain.value();
            let bv = bias.value();
            if gv.numel() != n || bv.numel() != n {
                return Err(GtrsError::shape("layer_norm", x.shape(), gv.shape()));
            }
            let mut out = Tensor::zeros(x.shape());
            let mut xhat = vec![0.0; m * n];
            let mut rstd = vec![0.0; m];
            for (r, ((row, hrow), orow)) in x
                .data()
                .chunks(n)
                .zip(xhat.chunks_mut(n))
                .zip(out.data_mut().chunks_mut(n))
                .enumerate()
            {
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                rstd[r] = rs;
                for (((h, o), v), (g, b)) in hrow
                    .iter_mut()
                    .zip(orow.iter_mut())
                    .zip(row)
                    .zip(gv.data().iter().zip(bv.data()))
                {
                    *h = (v - mean) * rs;
                    *o = *h * g + b;
                }
            }
            (out, xhat, rstd)
        };
        let flops = FLOPS_NORM * out.numel() as u64;
        Ok(self.tape.push(
            out,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                rstd,
            },
            flops,
        ))
    }

    /// Mean over rows: m×n → 1×n.
    pub fn mean_rows(&self) -> Result<Var<'t>> {
        let (out, flops) = {
            let a = self.value();
            let (m, n) = a.dims2()?;
            let mut out = vec![0.0; n];
            for row in a.data().chunks(n) {
                for (o, v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            for o in out.iter_mut() {
                *o /= m as f64;
            }
            (Tensor::new(&[1, n], out)?, (m * n) as u64)
        };
        Ok(self.tape.push(out, Op::MeanRows(self.id), flops))
    }

    /// Sum over columns: m×n → m×1.
    pub fn sum_cols(&self) -> Result<Var<'t>> {
        let (out, flops) = {
            let a = self.value();
            let (m, n) = a.dims2()?;
            let data = a.data().chunks(n).map(|r| r.iter().sum()).collect();
            (Tensor::new(&[m, 1], data)?, (m * n) as u64)
        };
        Ok(self.tape.push(out, Op::SumCols(self.id), flops))
    }

    /// Euclidean norm of every row: m×n → m×1.
    pub fn row_norm(&self) -> Result<Var<'t>> {
        let (out, flops) = {
            let a = self.value();
            let (m, n) = a.dims2()?;
            let data = a
                .data()
                .chunks(n)
                .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect();
            (Tensor::new(&[m, 1], data)?, (2 * m * n) as u64)
        };
        Ok(self.tape.push(out, Op::RowNorm(self.id), flops))
    }

    pub fn sum(&self) -> Var<'t> {
        let (total, n) = {
            let a = self.value();
            (a.sum(), a.numel())
        };
        self.tape.push(Tensor::scalar(total), Op::Sum(self.id), n as u64)
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().numel();
        self.sum().scale(1.0 / n as f64)
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let out = {
            let a = self.value();
            let (m, n) = a.dims2()?;
            if start + len > m {
                return Err(GtrsError::shape("slice_rows", a.shape(), &[start, len]));
            }
            Tensor::new(&[len, n], a.data()[start * n..(start + len) * n].to_vec())?
        };
        Ok(self.tape.push(out, Op::SliceRows { a: self.id, start }, 0))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let out = {
            let a = self.value();
            let (m, n) = a.dims2()?;
            if start + len > n {
                return Err(GtrsError::shape("slice_cols", a.shape(), &[start, len]));
            }
            let mut data = Vec::with_capacity(m * len);
            for row in a.data().chunks(n) {
                data.extend_from_slice(&row[start..start + len]);
            }
            Tensor::new(&[m, len], data)?
        };
        Ok(self.tape.push(out, Op::SliceCols { a: self.id, start }, 0))
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t>> {
        let out = {
            let a = self.value();
            let (m, n) = a.dims2()?;
            let mut data = Vec::with_capacity(idx.len() * n);
            for &i in idx {
                if i >= m {
                    return Err(GtrsError::Contract(format!(
                        "row index {i} out of range for {m} rows"
                    )));
                }
                data.extend_from_slice(a.row(i));
            }
            Tensor::new(&[idx.len(), n], data)?
        };
        Ok(self.tape.push(
            out,
            Op::GatherRows {
                a: self.id,
                idx: idx.to_vec(),
            },
            0,
        ))
    }
}

/// Stacks matrices with equal column counts along the row axis.
pub fn concat_rows<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| GtrsError::Contract("concat_rows of nothing".into()))?;
    let tape = first.tape;
    let out = {
        let n = first.value().dims2()?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let v = p.value();
            let (m, pn) = v.dims2()?;
            if pn != n {
                return Err(GtrsError::shape("concat_rows", first.value().shape(), v.shape()));
            }
            rows += m;
            data.extend_from_slice(v.data());
        }
        Tensor::new(&[rows, n], data)?
    };
    Ok(tape.push(out, Op::ConcatRows(parts.iter().map(|p| p.id).collect()), 0))
}

/// Joins matrices with equal row counts side by side.
pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| GtrsError::Contract("concat_cols of nothing".into()))?;
    let tape = first.tape;
    let out = {
        let m = first.value().dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let v = p.value();
            let (pm, pn) = v.dims2()?;
            if pm != m {
                return Err(GtrsError::shape("concat_cols", first.value().shape(), v.shape()));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        for r in 0..m {
            for (v, &w) in values.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        Tensor::new(&[m, n], data)?
    };
    Ok(tape.push(out, Op::ConcatCols(parts.iter().map(|p| p.id).collect()), 0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn store_with(values: &[(&str, Tensor)]) -> (ParamStore, Vec<ParamId>) {
        let mut store = ParamStore::new();
        let ids = values
            .iter()
            .map(|(n, t)| store.add(*n, t.clone(), true))
            .collect();
        (store, ids)
    }

    #[test]
    fn square_gradient() {
        let (store, ids) = store_with(&[("x", Tensor::scalar(3.0))]);
        let tape = Tape::new();
        let x = tape.param(&store, ids[0]);
        let y = x.mul(&x).unwrap().sum();
        assert_eq!(y.item(), 9.0);
        let g = tape.backward(y, &store).unwrap();
        assert_eq!(g.get(ids[0]).unwrap().data(), &[6.0]);
    }

    #[test]
    fn sum_of_matmul_gradient_is_xt_ones() {
        let mut rng = Rng::new(1);
        let x = rng.normal_tensor(&[4, 3], 1.0);
        let w = rng.normal_tensor(&[3, 2], 1.0);
        let (store, ids) = store_with(&[("w", w)]);
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.param(&store, ids[0]);
        let loss = xv.matmul(&wv).unwrap().sum();
        let g = tape.backward(loss, &store).unwrap();
        let expected = x.transpose().unwrap().matmul(&Tensor::full(&[4, 2], 1.0)).unwrap();
        for (a, b) in g.get(ids[0]).unwrap().data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let store = ParamStore::new();
        let tape = Tape::new();
        let v = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(v, &store), Err(GtrsError::Contract(_))));
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[[0.0, 0.0], [1000.0, 0.0]]).unwrap());
        let y = x.softmax_rows().unwrap().tensor();
        assert_eq!(y.row(0), &[0.5, 0.5]);
        assert_eq!(y.get(1, 0), 1.0);
        assert!(y.get(1, 1) < 1e-300);
        assert!(y.all_finite());

        // exp/sum in a different evaluation order (ascending, no shift)
        let x = tape.constant(Tensor::from_rows(&[[1.0, 2.0, 3.0]]).unwrap());
        let y = x.softmax_rows().unwrap().tensor();
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let z: f64 = e.iter().sum();
        for (a, b) in y.data().iter().zip(&e) {
            assert!((a - b / z).abs() < 1e-12);
        }
    }

    fn erf_series(x: f64) -> f64 {
        // Maclaurin series, converges quickly for |x| <= 3
        let mut term = x;
        let mut total = x;
        for n in 1..80 {
            term *= -x * x / n as f64;
            total += term / (2 * n + 1) as f64;
        }
        2.0 / std::f64::consts::PI.sqrt() * total
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(10.0) - 10.0).abs() < 1e-9);
        let phi1 = 0.5 * (1.0 + erf_series(1.0 / std::f64::consts::SQRT_2));
        assert!((gelu(1.0) - phi1).abs() < 1e-10);
    }

    #[test]
    fn layer_norm_examples() {
        let (store, ids) = store_with(&[
            ("g", Tensor::full(&[2], 1.0)),
            ("b", Tensor::zeros(&[2])),
        ]);
        let tape = Tape::new();
        let g = tape.param(&store, ids[0]);
        let b = tape.param(&store, ids[1]);
        let x = tape.constant(Tensor::from_rows(&[[1.0, -1.0], [4.0, 4.0]]).unwrap());
        let y = x.layer_norm(&g, &b).unwrap().tensor();
        // var = 1, so 1/sqrt(1 + 1e-5)
        let expected = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.get(0, 0) - expected).abs() < 1e-15);
        assert!((y.get(0, 1) + expected).abs() < 1e-15);
        assert_eq!(y.row(1), &[0.0, 0.0]);

        let mut rng = Rng::new(4);
        let x = tape.constant(rng.normal_tensor(&[5, 2], 3.0));
        let y = x.layer_norm(&g, &b).unwrap().tensor();
        for r in 0..5 {
            assert!(y.row(r).iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn scopes_partition_flops() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[17, 128]));
        let b = tape.constant(Tensor::zeros(&[128, 128]));
        {
            let _s = tape.scope("mm");
            a.matmul(&b).unwrap();
        }
        a.scale(2.0);
        let by = tape.flops_by_scope();
        assert_eq!(by[1], ("mm".to_string(), 557_056));
        assert_eq!(by[0].1, 17 * 128);
        assert_eq!(tape.total_flops(), 557_056 + 17 * 128);
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::full(&[1], 2.0), false);
        let tape = Tape::new();
        let v = tape.param(&store, w);
        let loss = v.mul(&v).unwrap().sum();
        let g = tape.backward(loss, &store).unwrap();
        assert!(g.get(w).is_none());
    }
}
