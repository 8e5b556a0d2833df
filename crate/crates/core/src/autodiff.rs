//! Minimal reverse-mode differentiation over dense row-major matrices.
//!
//! Operations are recorded on a [`Tape`] in evaluation order; [`Tape::backward`]
//! walks the tape in reverse and accumulates adjoints. Only the operations the
//! attention encoder needs are provided.
//!
//! Every output element of a matrix product is accumulated over the inner
//! dimension in a fixed order, so a row's value never depends on the other
//! rows or columns present. Causal-mask invariance relies on this.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor shape does not match data length");
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert_eq!(self.shape(), other.shape());
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// `self · other`
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols, other.rows, "matmul inner dimensions differ");
        let mut out = Tensor::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let o_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in a_row.iter().enumerate() {
                let b_row = other.row(k);
                o_row.iter_mut().zip(b_row).for_each(|(o, b)| *o += a * b);
            }
        }
        out
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols, other.cols, "matmul_t inner dimensions differ");
        let mut out = Tensor::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..other.rows {
                let b_row = other.row(j);
                let mut acc = 0.0;
                for k in 0..self.cols {
                    acc += a_row[k] * b_row[k];
                }
                out.data[i * other.rows + j] = acc;
            }
        }
        out
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.rows, other.rows, "t_matmul outer dimensions differ");
        let mut out = Tensor::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                let o_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                o_row.iter_mut().zip(b_row).for_each(|(o, b)| *o += a * b);
            }
        }
        out
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Tensor),
    Gelu(Var),
    Softplus(Var),
    GatherRows(Var, Vec<usize>),
    PrefixSoftmax(Var, Vec<usize>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Tensor,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    Sinusoid {
        scale: Var,
        times: Vec<f64>,
        phases: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints indexed by [`Var`]; `None` for nodes the seeds do not reach.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
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
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(self.value(b));
        self.push(value, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b))
    }

    /// Adds a `1 × cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows, 1);
        let mut value = self.value(a).clone();
        assert_eq!(value.cols, r.cols);
        for i in 0..value.rows {
            value.row_mut(i).iter_mut().zip(&r.data).for_each(|(x, b)| *x += b);
        }
        self.push(value, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.push(value, Op::Scale(a, factor))
    }

    /// Element-wise product with a constant (dropout masks).
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Var {
        let value = self.value(a).zip_map(&c, |x, y| x * y);
        self.push(value, Op::MulConst(a, c))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        self.push(value, Op::Gelu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus);
        self.push(value, Op::Softplus(a))
    }

    pub fn gather_rows(&mut self, table: Var, indices: Vec<usize>) -> Var {
        let t = self.value(table);
        let mut value = Tensor::zeros(indices.len(), t.cols);
        for (r, &i) in indices.iter().enumerate() {
            value.row_mut(r).copy_from_slice(t.row(i));
        }
        self.push(value, Op::GatherRows(table, indices))
    }

    /// Row-wise softmax restricted to the first `lens[r]` columns of row `r`;
    /// the remaining entries are exactly zero.
    pub fn prefix_softmax(&mut self, a: Var, lens: Vec<usize>) -> Var {
        let x = self.value(a);
        assert_eq!(lens.len(), x.rows);
        let mut value = Tensor::zeros(x.rows, x.cols);
        for (r, &len) in lens.iter().enumerate() {
            assert!(len >= 1 && len <= x.cols, "softmax row needs at least one valid column");
            let src = &x.row(r)[..len];
            let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut value.row_mut(r)[..len];
            let mut sum = 0.0;
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - max).exp();
                sum += *d;
            }
            dst.iter_mut().for_each(|d| *d /= sum);
        }
        self.push(value, Op::PrefixSoftmax(a, lens))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let cols = xv.cols;
        let mut normalized = Tensor::zeros(xv.rows, cols);
        let mut value = Tensor::zeros(xv.rows, cols);
        let mut inv_std = Vec::with_capacity(xv.rows);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for c in 0..cols {
                let n = (row[c] - mean) * is;
                normalized.set(r, c, n);
                value.set(r, c, n * g.data[c] + b.data[c]);
            }
        }
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
        )
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut value = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in &parts {
                let src = self.value(*p);
                assert_eq!(src.rows, rows);
                value.row_mut(r)[off..off + src.cols].copy_from_slice(src.row(r));
                off += src.cols;
            }
        }
        self.push(value, Op::ConcatCols(parts))
    }

    /// Sinusoidal code with trainable phase scale: entry `(r, k)` is
    /// `sin(base[r][k] + scale_k · times[r])` for even `k`, `cos(..)` for odd `k`.
    pub fn sinusoid(&mut self, base_phase: Tensor, scale: Var, times: Vec<f64>) -> Var {
        let s = self.value(scale);
        assert_eq!(s.rows, 1);
        assert_eq!(s.cols, base_phase.cols);
        assert_eq!(times.len(), base_phase.rows);
        let mut phases = base_phase;
        for (r, t) in times.iter().enumerate() {
            phases.row_mut(r).iter_mut().zip(&s.data).for_each(|(p, w)| *p += w * t);
        }
        let mut value = phases.clone();
        for r in 0..value.rows {
            for (k, v) in value.row_mut(r).iter_mut().enumerate() {
                *v = if k % 2 == 0 { v.sin() } else { v.cos() };
            }
        }
        self.push(
            value,
            Op::Sinusoid {
                scale,
                times,
                phases,
            },
        )
    }

    /// Propagates the given output adjoints back through the tape.
    pub fn backward(&self, seeds: Vec<(Var, Tensor)>) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut start = 0;
        for (v, g) in seeds {
            assert_eq!(g.shape(), self.value(v).shape(), "seed shape mismatch");
            accumulate(&mut grads, v, g);
            start = start.max(v.0);
        }
        for idx in (0..=start).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = g.matmul_t(self.value(*b));
                    let db = self.value(*a).t_matmul(&g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulT(a, b) => {
                    let da = g.matmul(self.value(*b));
                    let db = g.t_matmul(self.value(*a));
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::AddRow(a, row) => {
                    let mut db = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        db.data.iter_mut().zip(g.row(r)).for_each(|(d, x)| *d += x);
                    }
                    accumulate(&mut grads, *row, db);
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Scale(a, f) => accumulate(&mut grads, *a, g.map(|x| x * f)),
                Op::MulConst(a, c) => accumulate(&mut grads, *a, g.zip_map(c, |x, y| x * y)),
                Op::Gelu(a) => {
                    let d = self.value(*a).zip_map(&g, |x, gy| gelu_grad(x) * gy);
                    accumulate(&mut grads, *a, d);
                }
                Op::Softplus(a) => {
                    let d = self.value(*a).zip_map(&g, |x, gy| sigmoid(x) * gy);
                    accumulate(&mut grads, *a, d);
                }
                Op::GatherRows(table, idxs) => {
                    let t = self.value(*table);
                    let mut d = Tensor::zeros(t.rows, t.cols);
                    for (r, &i) in idxs.iter().enumerate() {
                        d.row_mut(i).iter_mut().zip(g.row(r)).for_each(|(a, b)| *a += b);
                    }
                    accumulate(&mut grads, *table, d);
                }
                Op::PrefixSoftmax(a, lens) => {
                    let p = &node.value;
                    let mut d = Tensor::zeros(p.rows, p.cols);
                    for (r, &len) in lens.iter().enumerate() {
                        let pr = &p.row(r)[..len];
                        let gr = &g.row(r)[..len];
                        let dot: f64 = pr.iter().zip(gr).map(|(x, y)| x * y).sum();
                        for (c, dst) in d.row_mut(r)[..len].iter_mut().enumerate() {
                            *dst = pr[c] * (gr[c] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    normalized,
                    inv_std,
                } => {
                    let gv = self.value(*gain);
                    let cols = g.cols;
                    let mut dgain = Tensor::zeros(1, cols);
                    let mut dbias = Tensor::zeros(1, cols);
                    let mut dx = Tensor::zeros(g.rows, cols);
                    for r in 0..g.rows {
                        let gr = g.row(r);
                        let nr = normalized.row(r);
                        let mut mean_d = 0.0;
                        let mut mean_dn = 0.0;
                        for c in 0..cols {
                            dgain.data[c] += gr[c] * nr[c];
                            dbias.data[c] += gr[c];
                            let dn = gr[c] * gv.data[c];
                            mean_d += dn;
                            mean_dn += dn * nr[c];
                        }
                        mean_d /= cols as f64;
                        mean_dn /= cols as f64;
                        for c in 0..cols {
                            let dn = gr[c] * gv.data[c];
                            dx.set(r, c, inv_std[r] * (dn - mean_d - nr[c] * mean_dn));
                        }
                    }
                    accumulate(&mut grads, *gain, dgain);
                    accumulate(&mut grads, *bias, dbias);
                    accumulate(&mut grads, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let cols = self.value(*p).cols;
                        let mut d = Tensor::zeros(g.rows, cols);
                        for r in 0..g.rows {
                            d.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                        }
                        off += cols;
                        accumulate(&mut grads, *p, d);
                    }
                }
                Op::Sinusoid {
                    scale,
                    times,
                    phases,
                } => {
                    let mut d = Tensor::zeros(1, g.cols);
                    for (r, t) in times.iter().enumerate() {
                        for (k, dk) in d.data.iter_mut().enumerate() {
                            let ph = phases.get(r, k);
                            let dphase = if k % 2 == 0 { ph.cos() } else { -ph.sin() };
                            *dk += g.get(r, k) * dphase * t;
                        }
                    }
                    accumulate(&mut grads, *scale, d);
                }
            }
            // leaves keep their adjoint for the caller
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
