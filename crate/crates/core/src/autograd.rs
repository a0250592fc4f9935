//! Reverse-mode automatic differentiation over 2-D tensors.
//!
//! A [`Graph`] records every operation applied to its variables; calling
//! [`Graph::backward`] on a scalar output returns gradients for the
//! parameters that were read through [`Graph::param`]. The op set is exactly
//! what the denoiser needs, nothing more.

use std::rc::Rc;

use crate::tensor::{gemm, Tensor};

const LN_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// One attention scope: every query row attends to exactly these key rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnGroup {
    pub queries: Vec<usize>,
    pub keys: Vec<usize>,
}

/// Query rows not covered by any group (or whose group has no keys) get a
/// zero output row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnLayout {
    pub groups: Vec<AttnGroup>,
}

enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Silu(Var),
    Gelu(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Modulate { x: Var, shift: Var, scale: Var },
    Gate { x: Var, gate: Var, active: Option<Rc<Vec<bool>>> },
    ColSlice { x: Var, start: usize },
    GatherRows { x: Var, index: Rc<Vec<usize>> },
    Attention { q: Var, k: Var, v: Var, heads: usize, layout: Rc<AttnLayout>, probs: Vec<f64> },
    MaskedMse { pred: Var, target: Rc<Vec<f64>>, include: Rc<Vec<bool>>, count: usize },
}

enum Value<'p> {
    Borrowed(&'p Tensor),
    Owned(Tensor),
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p [Tensor],
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node<'p>>,
}

/// Gradients of one backward pass, indexed like the parameter slice.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Vec<Option<Tensor>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p [Tensor]) -> Self {
        Graph {
            params,
            param_vars: vec![None; params.len()],
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Borrowed(t) => t,
            Value::Owned(t) => t,
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, idx: usize) -> Var {
        if let Some(v) = self.param_vars[idx] {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Borrowed(&self.params[idx]),
            op: Op::Param(idx),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[idx] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimension");
        let mut out = Tensor::zeros(m, n);
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, 0.0, out.data_mut());
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    /// `x[m, n] + row[1, n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a row vector");
        assert_eq!(r.cols(), self.value(x).cols(), "add_row width");
        let mut out = self.value(x).clone();
        let cols = out.cols();
        for chunk in out.data_mut().chunks_mut(cols) {
            for (o, b) in chunk.iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(x, row))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= sigmoid(*v));
        self.push(out, Op::Silu(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| {
            let u = GELU_C * (*v + GELU_A * *v * *v * *v);
            *v = 0.5 * *v * (1.0 + u.tanh());
        });
        self.push(out, Op::Gelu(x))
    }

    /// Per-row normalization to zero mean, unit variance; no affine.
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut out = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.rows());
        for row in out.data_mut().chunks_mut(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        self.push(out, Op::LayerNorm { x, inv_std })
    }

    /// `x * (1 + scale) + shift` with `[1, n]` shift/scale.
    pub fn modulate(&mut self, x: Var, shift: Var, scale: Var) -> Var {
        let sh = self.value(shift).data();
        let sc = self.value(scale).data();
        let xv = self.value(x);
        assert_eq!(sh.len(), xv.cols());
        assert_eq!(sc.len(), xv.cols());
        let cols = xv.cols();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(cols) {
            for j in 0..cols {
                row[j] = row[j] * (1.0 + sc[j]) + sh[j];
            }
        }
        self.push(out, Op::Modulate { x, shift, scale })
    }

    /// `x * gate` with a `[1, n]` gate; rows with `active[r] == false` are
    /// forced to exactly zero.
    pub fn gate(&mut self, x: Var, gate: Var, active: Option<Rc<Vec<bool>>>) -> Var {
        let g = self.value(gate).data();
        let xv = self.value(x);
        let cols = xv.cols();
        assert_eq!(g.len(), cols);
        if let Some(a) = &active {
            assert_eq!(a.len(), xv.rows());
        }
        let mut out = xv.clone();
        for (r, row) in out.data_mut().chunks_mut(cols).enumerate() {
            if active.as_ref().is_some_and(|a| !a[r]) {
                row.iter_mut().for_each(|v| *v = 0.0);
            } else {
                row.iter_mut().zip(g).for_each(|(v, g)| *v *= g);
            }
        }
        self.push(out, Op::Gate { x, gate, active })
    }

    pub fn col_slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.cols(), "col_slice out of range");
        let mut out = Tensor::zeros(xv.rows(), len);
        for r in 0..xv.rows() {
            out.row_mut(r).copy_from_slice(&xv.row(r)[start..start + len]);
        }
        self.push(out, Op::ColSlice { x, start })
    }

    /// `out[i] = x[index[i]]`.
    pub fn gather_rows(&mut self, x: Var, index: Rc<Vec<usize>>) -> Var {
        let xv = self.value(x);
        let mut out = Tensor::zeros(index.len(), xv.cols());
        for (i, &src) in index.iter().enumerate() {
            out.row_mut(i).copy_from_slice(xv.row(src));
        }
        self.push(out, Op::GatherRows { x, index })
    }

    /// Multi-head scaled dot-product attention restricted to `layout`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, layout: Rc<AttnLayout>) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        assert_eq!(qv.cols(), kv.cols(), "attention q/k width");
        assert_eq!(kv.shape(), vv.shape(), "attention k/v shape");
        let (out, probs) = attention_forward(qv, kv, vv, heads, &layout);
        self.push(out, Op::Attention { q, k, v, heads, layout, probs })
    }

    /// Mean of squared error over included elements; 0 when none are included.
    pub fn masked_mse(&mut self, pred: Var, target: Rc<Vec<f64>>, include: Rc<Vec<bool>>) -> Var {
        let p = self.value(pred).data();
        assert_eq!(p.len(), target.len());
        assert_eq!(p.len(), include.len());
        let (loss, count) = masked_mse_value(p, &target, &include);
        self.push(Tensor::from_vec(1, 1, vec![loss]), Op::MaskedMse { pred, target, include, count })
    }

    /// Gradients of the scalar `root` with respect to every parameter read
    /// through [`Graph::param`].
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(1, 1, 1.0));
        let mut out = Gradients {
            params: vec![None; self.params.len()],
        };
        for i in (0..=root.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            self.backprop_node(i, &dy, &mut grads, &mut out);
        }
        out
    }

    fn backprop_node(&self, i: usize, dy: &Tensor, grads: &mut [Option<Tensor>], out: &mut Gradients) {
        let y = self.value(Var(i));
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Param(idx) => accumulate(&mut out.params[*idx], dy.clone()),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                let mut da = Tensor::zeros(m, k);
                gemm(m, n, k, dy.data(), false, bv.data(), true, 0.0, da.data_mut());
                add_grad(grads, *a, da);
                let mut db = Tensor::zeros(k, n);
                gemm(k, m, n, av.data(), true, dy.data(), false, 0.0, db.data_mut());
                add_grad(grads, *b, db);
            }
            Op::Add(a, b) => {
                add_grad(grads, *a, dy.clone());
                add_grad(grads, *b, dy.clone());
            }
            Op::AddRow(x, row) => {
                add_grad(grads, *x, dy.clone());
                add_grad(grads, *row, column_sums(dy));
            }
            Op::Silu(x) => {
                let xv = self.value(*x);
                let d = map2(dy, xv, |g, x| {
                    let s = sigmoid(x);
                    g * s * (1.0 + x * (1.0 - s))
                });
                add_grad(grads, *x, d);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let d = map2(dy, xv, |g, x| {
                    let u = GELU_C * (x + GELU_A * x * x * x);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                    g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                });
                add_grad(grads, *x, d);
            }
            Op::LayerNorm { x, inv_std } => {
                let cols = y.cols();
                let mut dx = Tensor::zeros(y.rows(), cols);
                for (r, &s) in inv_std.iter().enumerate() {
                    let (yr, gr) = (y.row(r), dy.row(r));
                    let mg = gr.iter().sum::<f64>() / cols as f64;
                    let mgy = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / cols as f64;
                    for (j, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d = s * (gr[j] - mg - yr[j] * mgy);
                    }
                }
                add_grad(grads, *x, dx);
            }
            Op::Modulate { x, shift, scale } => {
                let xv = self.value(*x);
                let sc = self.value(*scale).data();
                let cols = xv.cols();
                let mut dx = dy.clone();
                let mut dscale = Tensor::zeros(1, cols);
                for r in 0..xv.rows() {
                    for j in 0..cols {
                        dscale.data_mut()[j] += dy.get(r, j) * xv.get(r, j);
                    }
                    for (j, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d *= 1.0 + sc[j];
                    }
                }
                add_grad(grads, *x, dx);
                add_grad(grads, *shift, column_sums(dy));
                add_grad(grads, *scale, dscale);
            }
            Op::Gate { x, gate, active } => {
                let xv = self.value(*x);
                let g = self.value(*gate).data();
                let cols = xv.cols();
                let mut dx = Tensor::zeros(xv.rows(), cols);
                let mut dg = Tensor::zeros(1, cols);
                for r in 0..xv.rows() {
                    if active.as_ref().is_some_and(|a| !a[r]) {
                        continue;
                    }
                    let (xr, gr) = (xv.row(r), dy.row(r));
                    for j in 0..cols {
                        dg.data_mut()[j] += gr[j] * xr[j];
                    }
                    for (j, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d = gr[j] * g[j];
                    }
                }
                add_grad(grads, *x, dx);
                add_grad(grads, *gate, dg);
            }
            Op::ColSlice { x, start } => {
                let (rows, cols) = self.shape(*x);
                let mut dx = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    dx.row_mut(r)[*start..*start + dy.cols()].copy_from_slice(dy.row(r));
                }
                add_grad(grads, *x, dx);
            }
            Op::GatherRows { x, index } => {
                let (rows, cols) = self.shape(*x);
                let mut dx = Tensor::zeros(rows, cols);
                for (i, &src) in index.iter().enumerate() {
                    for (d, g) in dx.row_mut(src).iter_mut().zip(dy.row(i)) {
                        *d += g;
                    }
                }
                add_grad(grads, *x, dx);
            }
            Op::Attention { q, k, v, heads, layout, probs } => {
                let (dq, dk, dv) =
                    attention_backward(self.value(*q), self.value(*k), self.value(*v), *heads, layout, probs, dy);
                add_grad(grads, *q, dq);
                add_grad(grads, *k, dk);
                add_grad(grads, *v, dv);
            }
            Op::MaskedMse { pred, target, include, count } => {
                let p = self.value(*pred);
                let g = dy.get(0, 0);
                let mut dp = Tensor::zeros(p.rows(), p.cols());
                if *count > 0 {
                    let s = 2.0 * g / *count as f64;
                    for (j, d) in dp.data_mut().iter_mut().enumerate() {
                        if include[j] {
                            *d = s * (p.data()[j] - target[j]);
                        }
                    }
                }
                add_grad(grads, *pred, dp);
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn add_grad(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    accumulate(&mut grads[v.0], g);
}

fn column_sums(t: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, t.cols());
    for r in 0..t.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(t.row(r)) {
            *o += v;
        }
    }
    out
}

fn map2(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data)
}

/// Returns `(loss, included count)`.
pub fn masked_mse_value(pred: &[f64], target: &[f64], include: &[bool]) -> (f64, usize) {
    let mut sum = 0.0;
    let mut count = 0;
    for ((p, t), &inc) in pred.iter().zip(target).zip(include) {
        if inc {
            sum += (p - t) * (p - t);
            count += 1;
        }
    }
    if count == 0 {
        (0.0, 0)
    } else {
        (sum / count as f64, count)
    }
}

fn attention_forward(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, layout: &AttnLayout) -> (Tensor, Vec<f64>) {
    let d = q.cols();
    assert!(heads > 0 && d.is_multiple_of(heads), "width must divide into heads");
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Tensor::zeros(q.rows(), d);
    let mut probs = Vec::new();
    let mut scores = Vec::new();
    for g in &layout.groups {
        if g.keys.is_empty() {
            continue;
        }
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for &qi in &g.queries {
                let qr = &q.row(qi)[cols.clone()];
                scores.clear();
                scores.extend(g.keys.iter().map(|&kj| dot(qr, &k.row(kj)[cols.clone()]) * scale));
                softmax_in_place(&mut scores);
                let orow = &mut out.row_mut(qi)[cols.clone()];
                for (&p, &kj) in scores.iter().zip(&g.keys) {
                    for (o, x) in orow.iter_mut().zip(&v.row(kj)[cols.clone()]) {
                        *o += p * x;
                    }
                }
                probs.extend_from_slice(&scores);
            }
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    layout: &AttnLayout,
    probs: &[f64],
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let d = q.cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Tensor::zeros(q.rows(), d);
    let mut dk = Tensor::zeros(k.rows(), d);
    let mut dv = Tensor::zeros(v.rows(), d);
    let mut dp = Vec::new();
    let mut pos = 0;
    for g in &layout.groups {
        if g.keys.is_empty() {
            continue;
        }
        let nk = g.keys.len();
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for &qi in &g.queries {
                let p = &probs[pos..pos + nk];
                pos += nk;
                let gr = &dy.row(qi)[cols.clone()];
                dp.clear();
                dp.extend(g.keys.iter().map(|&kj| dot(gr, &v.row(kj)[cols.clone()])));
                let pdp: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                for (j, &kj) in g.keys.iter().enumerate() {
                    for (d, x) in dv.row_mut(kj)[cols.clone()].iter_mut().zip(gr) {
                        *d += p[j] * x;
                    }
                    let ds = p[j] * (dp[j] - pdp) * scale;
                    for (d, x) in dq.row_mut(qi)[cols.clone()].iter_mut().zip(&k.row(kj)[cols.clone()]) {
                        *d += ds * x;
                    }
                    for (d, x) in dk.row_mut(kj)[cols.clone()].iter_mut().zip(&q.row(qi)[cols.clone()]) {
                        *d += ds * x;
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax_in_place(s: &mut [f64]) {
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in s.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    s.iter_mut().for_each(|v| *v /= sum);
}
