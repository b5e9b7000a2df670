//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! borrowed from a [`ParamStore`] and constant inputs may be borrowed too,
//! so building a tape never copies weights or backbone features.
//! [`Tape::backward`] seeds output gradients and accumulates parameter
//! gradients into a [`Gradients`] buffer.

use super::matrix::{gemm, Op as G};
use super::{Gradients, Matrix, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Value<'a> {
    Owned(Matrix),
    Borrowed(&'a Matrix),
    Param(ParamId),
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    /// a · bᵀ
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    MeanRows(Var),
    ColSlice(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MulConst(Var, Matrix),
}

struct Node<'a> {
    value: Value<'a>,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<'a> {
    params: &'a ParamStore,
    nodes: Vec<Node<'a>>,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<'a> Tape<'a> {
    pub fn new(params: &'a ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        match &self.nodes[v.0].value {
            Value::Owned(m) => m,
            Value::Borrowed(m) => m,
            Value::Param(id) => self.params.get(*id),
        }
    }

    fn push(&mut self, value: Value<'a>, op: Op, needs_grad: bool) -> Var {
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

    fn derived(&mut self, value: Matrix, op: Op, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|&v| self.needs(v));
        self.push(Value::Owned(value), op, needs)
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(Value::Owned(m), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, m: &'a Matrix) -> Var {
        self.push(Value::Borrowed(m), Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.push(Value::Param(id), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Matrix::zeros(av.rows, bv.cols);
        gemm(1.0, av, G::N, bv, G::N, 0.0, &mut out);
        self.derived(out, Op::MatMul(a, b), &[a, b])
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Matrix::zeros(av.rows, bv.rows);
        gemm(1.0, av, G::N, bv, G::T, 0.0, &mut out);
        self.derived(out, Op::MatMulNt(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.value(b).shape(), "add shape mismatch");
        out.add_assign(self.value(b));
        self.derived(out, Op::Add(a, b), &[a, b])
    }

    /// Adds a `1 × cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let mut out = self.value(a).clone();
        let r = self.value(row);
        assert_eq!((1, out.cols), r.shape(), "add_row shape mismatch");
        for i in 0..out.rows {
            for (x, b) in out.row_mut(i).iter_mut().zip(&r.data) {
                *x += b;
            }
        }
        self.derived(out, Op::AddRow(a, row), &[a, row])
    }

    /// `x · w + b` for a weight `(in × out)` and bias `(1 × out)`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_row(h, b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.scale_assign(s);
        self.derived(out, Op::Scale(a, s), &[a])
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let data = src
            .data
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            .collect();
        let out = Matrix::from_vec(src.rows, src.cols, data);
        self.derived(out, Op::Gelu(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for i in 0..out.rows {
            let row = out.row_mut(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        self.derived(out, Op::SoftmaxRows(a), &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        assert_eq!((1, xv.cols), g.shape(), "layer_norm gamma shape");
        assert_eq!((1, xv.cols), b.shape(), "layer_norm beta shape");
        let n = xv.cols as f64;
        let mut xhat = Matrix::zeros(xv.rows, xv.cols);
        let mut out = Matrix::zeros(xv.rows, xv.cols);
        let mut inv_std = Vec::with_capacity(xv.rows);
        for i in 0..xv.rows {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(inv);
            for j in 0..xv.cols {
                let h = (row[j] - mean) * inv;
                xhat.set(i, j, h);
                out.set(i, j, h * g.data[j] + b.data[j]);
            }
        }
        self.derived(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Mean over rows, producing a `1 × cols` matrix.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut out = Matrix::zeros(1, src.cols);
        for i in 0..src.rows {
            for (o, x) in out.data.iter_mut().zip(src.row(i)) {
                *o += x;
            }
        }
        out.scale_assign(1.0 / src.rows as f64);
        self.derived(out, Op::MeanRows(a), &[a])
    }

    pub fn col_slice(&mut self, a: Var, start: usize, width: usize) -> Var {
        let src = self.value(a);
        assert!(start + width <= src.cols, "col_slice out of range");
        let mut out = Matrix::zeros(src.rows, width);
        for i in 0..src.rows {
            out.row_mut(i).copy_from_slice(&src.row(i)[start..start + width]);
        }
        self.derived(out, Op::ColSlice(a, start), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows, rows, "concat_cols row mismatch");
            for i in 0..rows {
                out.row_mut(i)[offset..offset + m.cols].copy_from_slice(m.row(i));
            }
            offset += m.cols;
        }
        self.derived(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&m.data);
        }
        let rows = data.len() / cols.max(1);
        self.derived(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Element-wise product with a constant (dropout masks).
    pub fn mul_const(&mut self, a: Var, mask: Matrix) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), mask.shape(), "mul_const shape mismatch");
        for (x, m) in out.data.iter_mut().zip(&mask.data) {
            *x *= m;
        }
        self.derived(out, Op::MulConst(a, mask), &[a])
    }

    /// Back-propagate `seeds` (gradients of some scalar w.r.t. the given
    /// vars) and accumulate parameter gradients into `out`.
    pub fn backward(&self, seeds: &[(Var, Matrix)], out: &mut Gradients) {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (v, g) in seeds {
            assert_eq!(self.value(*v).shape(), g.shape(), "seed gradient shape mismatch");
            accumulate(&mut grads[v.0], g);
            last = last.max(v.0);
        }
        for i in (0..=last).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(&node.op, i, &g, &mut grads, out);
        }
    }

    fn propagate(&self, op: &Op, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>], out: &mut Gradients) {
        match op {
            Op::Leaf => {}
            Op::Param(id) => out.grads[id.0].add_assign(g),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let slot = slot(grads, *a, av);
                    gemm(1.0, g, G::N, bv, G::T, 1.0, slot);
                }
                if self.needs(*b) {
                    let slot = slot(grads, *b, bv);
                    gemm(1.0, av, G::T, g, G::N, 1.0, slot);
                }
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let slot = slot(grads, *a, av);
                    gemm(1.0, g, G::N, bv, G::N, 1.0, slot);
                }
                if self.needs(*b) {
                    let slot = slot(grads, *b, bv);
                    gemm(1.0, g, G::T, av, G::N, 1.0, slot);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        accumulate(&mut grads[v.0], g);
                    }
                }
            }
            Op::AddRow(a, r) => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g);
                }
                if self.needs(*r) {
                    let slot = slot(grads, *r, self.value(*r));
                    for i in 0..g.rows {
                        for (s, x) in slot.data.iter_mut().zip(g.row(i)) {
                            *s += x;
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                let slot = slot(grads, *a, self.value(*a));
                for (d, x) in slot.data.iter_mut().zip(&g.data) {
                    *d += s * x;
                }
            }
            Op::Gelu(a) => {
                let xv = self.value(*a);
                let slot = slot(grads, *a, xv);
                for ((d, &x), gy) in slot.data.iter_mut().zip(&xv.data).zip(&g.data) {
                    let u = GELU_C * (x + GELU_A * x * x * x);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                    *d += gy * dy;
                }
            }
            Op::SoftmaxRows(a) => {
                let y = self.node_value(idx);
                let slot = slot(grads, *a, y);
                for i in 0..y.rows {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for (j, d) in slot.row_mut(i).iter_mut().enumerate() {
                        *d += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gamma);
                let n = xhat.cols as f64;
                if self.needs(*gamma) {
                    let slot = slot(grads, *gamma, gv);
                    for i in 0..g.rows {
                        for ((s, gy), h) in slot.data.iter_mut().zip(g.row(i)).zip(xhat.row(i)) {
                            *s += gy * h;
                        }
                    }
                }
                if self.needs(*beta) {
                    let slot = slot(grads, *beta, self.value(*beta));
                    for i in 0..g.rows {
                        for (s, gy) in slot.data.iter_mut().zip(g.row(i)) {
                            *s += gy;
                        }
                    }
                }
                if self.needs(*x) {
                    let slot = slot(grads, *x, xhat);
                    let mut dxhat = vec![0.0; xhat.cols];
                    for i in 0..g.rows {
                        let (gr, hr) = (g.row(i), xhat.row(i));
                        let mut sum = 0.0;
                        let mut sum_h = 0.0;
                        for j in 0..xhat.cols {
                            dxhat[j] = gr[j] * gv.data[j];
                            sum += dxhat[j];
                            sum_h += dxhat[j] * hr[j];
                        }
                        let inv = inv_std[i];
                        for (j, d) in slot.row_mut(i).iter_mut().enumerate() {
                            *d += inv / n * (n * dxhat[j] - sum - hr[j] * sum_h);
                        }
                    }
                }
            }
            Op::MeanRows(a) => {
                let av = self.value(*a);
                let inv = 1.0 / av.rows as f64;
                let slot = slot(grads, *a, av);
                for i in 0..av.rows {
                    for (d, x) in slot.row_mut(i).iter_mut().zip(&g.data) {
                        *d += x * inv;
                    }
                }
            }
            Op::ColSlice(a, start) => {
                let slot = slot(grads, *a, self.value(*a));
                for i in 0..g.rows {
                    for (d, x) in slot.row_mut(i)[*start..*start + g.cols].iter_mut().zip(g.row(i)) {
                        *d += x;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    if self.needs(p) {
                        let slot = slot(grads, p, pv);
                        for i in 0..g.rows {
                            for (d, x) in slot.row_mut(i).iter_mut().zip(&g.row(i)[offset..offset + pv.cols]) {
                                *d += x;
                            }
                        }
                    }
                    offset += pv.cols;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let n = pv.len();
                    if self.needs(p) {
                        let slot = slot(grads, p, pv);
                        for (d, x) in slot.data.iter_mut().zip(&g.data[offset..offset + n]) {
                            *d += x;
                        }
                    }
                    offset += n;
                }
            }
            Op::MulConst(a, mask) => {
                let slot = slot(grads, *a, mask);
                for ((d, x), m) in slot.data.iter_mut().zip(&g.data).zip(&mask.data) {
                    *d += x * m;
                }
            }
        }
    }

    fn node_value(&self, idx: usize) -> &Matrix {
        self.value(Var(idx))
    }
}

fn accumulate(slot: &mut Option<Matrix>, g: &Matrix) {
    match slot {
        Some(m) => m.add_assign(g),
        None => *slot = Some(g.clone()),
    }
}

fn slot<'g>(grads: &'g mut [Option<Matrix>], v: Var, like: &Matrix) -> &'g mut Matrix {
    grads[v.0].get_or_insert_with(|| Matrix::zeros(like.rows, like.cols))
}
