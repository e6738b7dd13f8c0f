//! Reverse-mode differentiation over a recorded tape.
//!
//! A [`Graph`] borrows a [`ParamStore`] read-only, so several graphs (one per
//! sample) can be recorded concurrently against the same weights. Gradients are
//! returned as a [`Gradients`] value and merged by the caller in a fixed order.

use super::params::{Gradients, ParamId, ParamStore};
use super::real::Real;
use super::tensor::Tensor;
use super::NumericsError;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Tanh(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    Sum(Var),
    Mean(Var),
    SmoothL1 {
        pred: Var,
        diff: Vec<T>,
        beta: T,
    },
    L1 {
        pred: Var,
        diff: Vec<T>,
    },
}

struct Node<T> {
    value: Option<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<'s, T: Real> {
    store: &'s ParamStore<T>,
    nodes: Vec<Node<T>>,
}

impl<'s, T: Real> Graph<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Self {
            store,
            nodes: Vec::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => &self.store.get(*id).value,
            _ => unreachable!("node without value"),
        }
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let trainable = self.store.get(id).trainable;
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: trainable,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        assert_eq!(k, k2, "matmul: inner dimensions {k} vs {k2}");
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            (self.value(a).data(), k as isize, 1),
            (self.value(b).data(), n as isize, 1),
            T::zero(),
            (&mut out, n as isize, 1),
        );
        let rg = self.requires(a) || self.requires(b);
        self.push(Tensor::new(&[m, n], out), Op::MatMul(a, b), rg)
    }

    /// `a @ b^T` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.value(a).dims2();
        let (n, k2) = self.value(b).dims2();
        assert_eq!(k, k2, "matmul_nt: inner dimensions {k} vs {k2}");
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            (self.value(a).data(), k as isize, 1),
            (self.value(b).data(), 1, k as isize),
            T::zero(),
            (&mut out, n as isize, 1),
        );
        let rg = self.requires(a) || self.requires(b);
        self.push(Tensor::new(&[m, n], out), Op::MatMulNT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "add: shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let shape = ta.shape().to_vec();
        let rg = self.requires(a) || self.requires(b);
        self.push(Tensor::new(&shape, data), Op::Add(a, b), rg)
    }

    /// Adds a length-`n` vector to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (m, n) = self.value(a).dims2();
        assert_eq!(self.value(row).len(), n, "add_row: width mismatch");
        let r = self.value(row).data();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_mut(n) {
            chunk.iter_mut().zip(r).for_each(|(x, &b)| *x += b);
        }
        let rg = self.requires(a) || self.requires(row);
        self.push(Tensor::new(&[m, n], data), Op::AddRow(a, row), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "mul: shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let shape = ta.shape().to_vec();
        let rg = self.requires(a) || self.requires(b);
        self.push(Tensor::new(&shape, data), Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| x * factor).collect();
        let shape = t.shape().to_vec();
        let rg = self.requires(a);
        self.push(Tensor::new(&shape, data), Op::Scale(a, factor), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (c, k) = (T::from_f64(GELU_C), T::from_f64(GELU_A));
        let half = T::from_f64(0.5);
        let t = self.value(a);
        let data = t
            .data()
            .iter()
            .map(|&x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()))
            .collect();
        let shape = t.shape().to_vec();
        let rg = self.requires(a);
        self.push(Tensor::new(&shape, data), Op::Gelu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| x.tanh()).collect();
        let shape = t.shape().to_vec();
        let rg = self.requires(a);
        self.push(Tensor::new(&shape, data), Op::Tanh(a), rg)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (m, n) = self.value(x).dims2();
        assert_eq!(self.value(gamma).len(), n, "layer_norm: gamma width");
        assert_eq!(self.value(beta).len(), n, "layer_norm: beta width");
        let eps = T::from_f64(eps);
        let nf = T::from_f64(n as f64);
        let mut xhat = Vec::with_capacity(m * n);
        let mut rstd = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        {
            let xs = self.value(x).data();
            let g = self.value(gamma).data();
            let b = self.value(beta).data();
            for row in xs.chunks(n) {
                let mean = row.iter().copied().sum::<T>() / nf;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
                let rs = T::one() / (var + eps).sqrt();
                rstd.push(rs);
                for (j, &v) in row.iter().enumerate() {
                    let h = (v - mean) * rs;
                    xhat.push(h);
                    out.push(h * g[j] + b[j]);
                }
            }
        }
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        self.push(
            Tensor::new(&[m, n], out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.value(a).dims2();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        let rg = self.requires(a);
        self.push(Tensor::new(&[m, n], data), Op::Softmax(a), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.value(a).dims2();
        assert!(start + len <= n, "slice_cols out of range");
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(m * len);
        for row in src.chunks(n) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let rg = self.requires(a);
        self.push(Tensor::new(&[m, len], data), Op::SliceCols { x: a, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let m = self.value(parts[0]).dims2().0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (r, c) = self.value(p).dims2();
                assert_eq!(r, m, "concat_cols: row mismatch");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        self.push(Tensor::new(&[m, total], data), Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let (m, n) = self.value(a).dims2();
        let src = self.value(a);
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            assert!(r < m, "gather_rows: row {r} out of {m}");
            data.extend_from_slice(src.row(r));
        }
        let rg = self.requires(a);
        self.push(
            Tensor::new(&[rows.len(), n], data),
            Op::GatherRows {
                x: a,
                rows: rows.to_vec(),
            },
            rg,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let n = self.value(parts[0]).dims2().1;
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2();
            assert_eq!(c, n, "concat_rows: width mismatch");
            data.extend_from_slice(self.value(p).data());
            m += r;
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        self.push(Tensor::new(&[m, n], data), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        let rg = self.requires(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().copied().sum::<T>() / T::from_f64(t.len() as f64);
        let rg = self.requires(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Mean over elements of the Huber-style smooth L1 penalty.
    pub fn smooth_l1(&mut self, pred: Var, target: &Tensor<T>, beta: T) -> Var {
        let p = self.value(pred);
        assert_eq!(p.shape(), target.shape(), "smooth_l1: shape mismatch");
        let diff: Vec<T> = p.data().iter().zip(target.data()).map(|(&a, &b)| a - b).collect();
        let half = T::from_f64(0.5);
        let total = diff
            .iter()
            .map(|&d| {
                let a = d.abs();
                if a < beta {
                    half * d * d / beta
                } else {
                    a - half * beta
                }
            })
            .sum::<T>();
        let loss = total / T::from_f64(diff.len() as f64);
        let rg = self.requires(pred);
        self.push(Tensor::scalar(loss), Op::SmoothL1 { pred, diff, beta }, rg)
    }

    /// Mean absolute error.
    pub fn l1(&mut self, pred: Var, target: &Tensor<T>) -> Var {
        let p = self.value(pred);
        assert_eq!(p.shape(), target.shape(), "l1: shape mismatch");
        let diff: Vec<T> = p.data().iter().zip(target.data()).map(|(&a, &b)| a - b).collect();
        let loss = diff.iter().map(|d| d.abs()).sum::<T>() / T::from_f64(diff.len() as f64);
        let rg = self.requires(pred);
        self.push(Tensor::scalar(loss), Op::L1 { pred, diff }, rg)
    }

    /// Propagates d`loss`/d`node` back to every trainable parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NumericsError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NumericsError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut out = Gradients::empty(self.store.len());
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn propagate(
        &self,
        node: usize,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        out: &mut Gradients<T>,
    ) {
        match &self.nodes[node].op {
            Op::Leaf => {}
            Op::Param(id) => out.accumulate(*id, g),
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).dims2().1;
                if self.requires(*a) {
                    let da = slot(grads, *a, m * k);
                    // da += g @ b^T
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        (g, n as isize, 1),
                        (self.value(*b).data(), 1, n as isize),
                        T::one(),
                        (da, k as isize, 1),
                    );
                }
                if self.requires(*b) {
                    let db = slot(grads, *b, k * n);
                    // db += a^T @ g
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        (self.value(*a).data(), 1, k as isize),
                        (g, n as isize, 1),
                        T::one(),
                        (db, n as isize, 1),
                    );
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).dims2().0;
                if self.requires(*a) {
                    let da = slot(grads, *a, m * k);
                    // da += g @ b
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        (g, n as isize, 1),
                        (self.value(*b).data(), k as isize, 1),
                        T::one(),
                        (da, k as isize, 1),
                    );
                }
                if self.requires(*b) {
                    let db = slot(grads, *b, n * k);
                    // db += g^T @ a
                    T::gemm(
                        n,
                        m,
                        k,
                        T::one(),
                        (g, 1, n as isize),
                        (self.value(*a).data(), k as isize, 1),
                        T::one(),
                        (db, k as isize, 1),
                    );
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.requires(v) {
                        add_into(slot(grads, v, g.len()), g);
                    }
                }
            }
            Op::AddRow(a, row) => {
                if self.requires(*a) {
                    add_into(slot(grads, *a, g.len()), g);
                }
                if self.requires(*row) {
                    let n = self.value(*row).len();
                    let dr = slot(grads, *row, n);
                    for chunk in g.chunks(n) {
                        add_into(dr, chunk);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if self.requires(v) {
                        let o = self.value(other).data();
                        let d = slot(grads, v, g.len());
                        for ((d, &gi), &oi) in d.iter_mut().zip(g).zip(o) {
                            *d += gi * oi;
                        }
                    }
                }
            }
            Op::Scale(a, f) => {
                let d = slot(grads, *a, g.len());
                d.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi * *f);
            }
            Op::Gelu(a) => {
                let (c, k) = (T::from_f64(GELU_C), T::from_f64(GELU_A));
                let half = T::from_f64(0.5);
                let three = T::from_f64(3.0);
                let x = self.value(*a).data();
                let d = slot(grads, *a, g.len());
                for ((d, &gi), &xi) in d.iter_mut().zip(g).zip(x) {
                    let t = (c * (xi + k * xi * xi * xi)).tanh();
                    let dt = c * (T::one() + three * k * xi * xi);
                    let deriv = half * (T::one() + t) + half * xi * (T::one() - t * t) * dt;
                    *d += gi * deriv;
                }
            }
            Op::Tanh(a) => {
                let y = self.value(Var(node)).data();
                let d = slot(grads, *a, g.len());
                for ((d, &gi), &yi) in d.iter_mut().zip(g).zip(y) {
                    *d += gi * (T::one() - yi * yi);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = self.value(*gamma).len();
                if self.requires(*gamma) {
                    let dg = slot(grads, *gamma, n);
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if self.requires(*beta) {
                    let db = slot(grads, *beta, n);
                    for gr in g.chunks(n) {
                        add_into(db, gr);
                    }
                }
                if self.requires(*x) {
                    let gam = self.value(*gamma).data().to_vec();
                    let nf = T::from_f64(n as f64);
                    let dx = slot(grads, *x, g.len());
                    let mut dh = vec![T::zero(); n];
                    for (r, (gr, hr)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..n {
                            dh[j] = gr[j] * gam[j];
                            mean_dh += dh[j];
                            mean_dh_h += dh[j] * hr[j];
                        }
                        mean_dh /= nf;
                        mean_dh_h /= nf;
                        let row = &mut dx[r * n..(r + 1) * n];
                        for j in 0..n {
                            row[j] += rstd[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let n = self.value(*a).dims2().1;
                let y = self.value(Var(node)).data();
                let d = slot(grads, *a, g.len());
                for ((dr, gr), yr) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                    let dot = gr.iter().zip(yr).map(|(&u, &v)| u * v).sum::<T>();
                    for j in 0..n {
                        dr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = self.value(*x).dims2();
                let len = g.len() / m.max(1);
                let d = slot(grads, *x, m * n);
                for r in 0..m {
                    add_into(
                        &mut d[r * n + start..r * n + start + len],
                        &g[r * len..(r + 1) * len],
                    );
                }
            }
            Op::ConcatCols(parts) => {
                let m = self.value(parts[0]).dims2().0;
                let total = g.len() / m.max(1);
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).dims2().1;
                    if self.requires(p) {
                        let d = slot(grads, p, m * w);
                        for r in 0..m {
                            add_into(
                                &mut d[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    }
                    offset += w;
                }
            }
            Op::GatherRows { x, rows } => {
                let (m, n) = self.value(*x).dims2();
                let d = slot(grads, *x, m * n);
                for (i, &r) in rows.iter().enumerate() {
                    add_into(&mut d[r * n..(r + 1) * n], &g[i * n..(i + 1) * n]);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.requires(p) {
                        add_into(slot(grads, p, len), &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::Sum(a) => {
                let len = self.value(*a).len();
                let d = slot(grads, *a, len);
                d.iter_mut().for_each(|v| *v += g[0]);
            }
            Op::Mean(a) => {
                let len = self.value(*a).len();
                let s = g[0] / T::from_f64(len as f64);
                let d = slot(grads, *a, len);
                d.iter_mut().for_each(|v| *v += s);
            }
            Op::SmoothL1 { pred, diff, beta } => {
                let s = g[0] / T::from_f64(diff.len() as f64);
                let d = slot(grads, *pred, diff.len());
                for (d, &di) in d.iter_mut().zip(diff) {
                    let local = if di.abs() < *beta { di / *beta } else { di.signum() };
                    *d += s * local;
                }
            }
            Op::L1 { pred, diff } => {
                let s = g[0] / T::from_f64(diff.len() as f64);
                let d = slot(grads, *pred, diff.len());
                for (d, &di) in d.iter_mut().zip(diff) {
                    if di != T::zero() {
                        *d += s * di.signum();
                    }
                }
            }
        }
    }
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}
