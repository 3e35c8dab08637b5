//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its forward value. [`Graph::backward`]
//! walks the tape in reverse and accumulates gradients for every node.
//! Parameters enter the tape through [`Graph::param`]; their gradients are
//! collected per [`ParamId`] by [`Gradients::params`].

use super::mask::AttentionMask;
use super::ops::{gelu, gelu_grad, row_stats, sigmoid, softmax_row};
use super::param::{ParamId, ParamStore};
use super::tensor::{gemm, gemm_at, Strided, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Input,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Gelu(Var),
    Sigmoid(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    MaskedSoftmax { x: Var },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    Gather { table: Var, ids: Vec<Option<usize>> },
    CrossEntropy { logits: Var, targets: Vec<(usize, usize)>, probs: Vec<f64> },
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: Vec<(ParamId, Var)>,
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{what}: shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input; receives a gradient but belongs to no parameter.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    /// Places a parameter on the tape (once per graph).
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.param_vars.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param);
        self.param_vars.push((id, v));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    fn zip(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same(ta, tb, what)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(out, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(&mut self, x: Var, v: Var, mul: bool) -> Result<Var> {
        let (tx, tv) = (self.value(x), self.value(v));
        let d = tx.cols();
        if tv.len() != d {
            return Err(Error::Dimension(format!(
                "row broadcast of {} over {:?}",
                tv.len(),
                tx.shape()
            )));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(d) {
            for (a, b) in row.iter_mut().zip(tv.data()) {
                if mul {
                    *a *= b;
                } else {
                    *a += b;
                }
            }
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        let op = if mul { Op::MulRow(x, v) } else { Op::AddRow(x, v) };
        Ok(self.push(out, op))
    }

    /// `x + v` with `v` broadcast over rows.
    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        self.row_broadcast(x, v, false)
    }

    /// `x ⊙ v` with `v` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var> {
        self.row_broadcast(x, v, true)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        self.push(out, Op::Square(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.push(out, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.cols();
        if tg.len() != d || tb.len() != d {
            return Err(Error::Dimension(format!("layer_norm gain/bias vs {d} features")));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = tx.row(r);
            let (mean, rs) = row_stats(row);
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), out);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }))
    }

    pub fn masked_softmax(&mut self, x: Var, mask: &AttentionMask) -> Result<Var> {
        let out = super::ops::masked_softmax(self.value(x), mask)?;
        Ok(self.push(out, Op::MaskedSoftmax { x }))
    }

    /// Multi-head scaled dot-product attention under `mask`.
    ///
    /// `q` is `Lq×d`, `k` and `v` are `Lk×d`; heads split `d` into contiguous slices.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: &AttentionMask, heads: usize) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (lq, d) = (tq.rows(), tq.cols());
        let lk = tk.rows();
        if tk.cols() != d || tv.cols() != d || tv.rows() != lk || heads == 0 || d % heads != 0 {
            return Err(Error::Dimension(format!(
                "attention q {:?} k {:?} v {:?} heads {heads}",
                tq.shape(),
                tk.shape(),
                tv.shape()
            )));
        }
        if mask.rows() != lq || mask.cols() != lk {
            return Err(Error::Dimension(format!(
                "attention mask {}x{} vs {lq}x{lk}",
                mask.rows(),
                mask.cols()
            )));
        }
        let (probs, out) = attention_forward(tq.data(), tk.data(), tv.data(), lq, lk, d, heads, mask)?;
        let out = Tensor::from_parts(vec![lq, d], out);
        Ok(self.push(out, Op::Attention { q, k, v, heads, probs }))
    }

    /// Per-head attention probabilities (`heads × Lq × Lk`, row-major) of an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Row lookup; `None` rows are zero.
    pub fn gather(&mut self, table: Var, ids: Vec<Option<usize>>) -> Result<Var> {
        let t = self.value(table);
        let (n, d) = (t.rows(), t.cols());
        let mut out = vec![0.0; ids.len() * d];
        for (r, id) in ids.iter().enumerate() {
            if let Some(id) = *id {
                if id >= n {
                    return Err(Error::Vocab { id, vocab: n });
                }
                out[r * d..(r + 1) * d].copy_from_slice(t.row(id));
            }
        }
        let out = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(out, Op::Gather { table, ids }))
    }

    /// Mean over `targets` of `-log softmax(logits[row])[class]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<(usize, usize)>) -> Result<Var> {
        if targets.is_empty() {
            return Err(Error::Parameter("cross entropy without targets".into()));
        }
        let t = self.value(logits);
        let v = t.cols();
        let mut probs = vec![0.0; targets.len() * v];
        let mut total = 0.0;
        let all = vec![true; v];
        for (i, &(row, class)) in targets.iter().enumerate() {
            if row >= t.rows() || class >= v {
                return Err(Error::Dimension(format!("target ({row}, {class}) outside {:?}", t.shape())));
            }
            let p = &mut probs[i * v..(i + 1) * v];
            softmax_row(t.row(row), &all, p).expect("non-empty row");
            total -= p[class].max(f64::MIN_POSITIVE).ln();
        }
        let loss = total / targets.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("cross entropy {loss}")));
        }
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, targets, probs }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::Dimension(format!("backward from non-scalar {:?}", lt.shape())));
        }
        if !lt.data()[0].is_finite() {
            return Err(Error::Numeric(format!("loss {}", lt.data()[0])));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(lt.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, param_vars: self.param_vars.clone() })
    }

    fn backprop(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
            f(slot.data_mut());
        };
        match &node.op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                // dA = dC · Bᵀ ; dB = Aᵀ · dC
                acc(*a, &mut |ga| {
                    gemm(m, n, k, Strided::row_major(g.data(), n), Strided::row_major(tb.data(), n).t(), ga, k, true)
                });
                acc(*b, &mut |gb| {
                    gemm(k, m, n, Strided::row_major(ta.data(), k).t(), Strided::row_major(g.data(), n), gb, n, true)
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g.data()));
                acc(*b, &mut |gb| add_into(gb, g.data()));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g.data()));
                acc(*b, &mut |gb| {
                    for (o, d) in gb.iter_mut().zip(g.data()) {
                        *o -= d;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                acc(*a, &mut |ga| {
                    for ((o, d), y) in ga.iter_mut().zip(g.data()).zip(tb.data()) {
                        *o += d * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, d), x) in gb.iter_mut().zip(g.data()).zip(ta.data()) {
                        *o += d * x;
                    }
                });
            }
            Op::AddRow(x, v) => {
                let d = self.value(*v).len();
                acc(*x, &mut |gx| add_into(gx, g.data()));
                acc(*v, &mut |gv| {
                    for row in g.data().chunks(d) {
                        add_into(gv, row);
                    }
                });
            }
            Op::MulRow(x, v) => {
                let (tx, tv) = (self.value(*x), self.value(*v));
                let d = tv.len();
                acc(*x, &mut |gx| {
                    for (grow, drow) in gx.chunks_mut(d).zip(g.data().chunks(d)) {
                        for j in 0..d {
                            grow[j] += drow[j] * tv.data()[j];
                        }
                    }
                });
                acc(*v, &mut |gv| {
                    for (xrow, drow) in tx.data().chunks(d).zip(g.data().chunks(d)) {
                        for j in 0..d {
                            gv[j] += drow[j] * xrow[j];
                        }
                    }
                });
            }
            Op::Scale(x, s) => acc(*x, &mut |gx| {
                for (o, d) in gx.iter_mut().zip(g.data()) {
                    *o += d * s;
                }
            }),
            Op::Square(x) => {
                let tx = self.value(*x);
                acc(*x, &mut |gx| {
                    for ((o, d), v) in gx.iter_mut().zip(g.data()).zip(tx.data()) {
                        *o += 2.0 * v * d;
                    }
                })
            }
            Op::Gelu(x) => {
                let tx = self.value(*x);
                acc(*x, &mut |gx| {
                    for ((o, d), v) in gx.iter_mut().zip(g.data()).zip(tx.data()) {
                        *o += d * gelu_grad(*v);
                    }
                })
            }
            Op::Sigmoid(x) => acc(*x, &mut |gx| {
                for ((o, d), y) in gx.iter_mut().zip(g.data()).zip(node.value.data()) {
                    *o += d * y * (1.0 - y);
                }
            }),
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let tg = self.value(*gain);
                let d = tg.len();
                acc(*gain, &mut |gg| {
                    for (hrow, drow) in xhat.chunks(d).zip(g.data().chunks(d)) {
                        for j in 0..d {
                            gg[j] += drow[j] * hrow[j];
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for drow in g.data().chunks(d) {
                        add_into(gb, drow);
                    }
                });
                acc(*x, &mut |gx| {
                    let mut dh = vec![0.0; d];
                    for (r, (grow, (hrow, drow))) in
                        gx.chunks_mut(d).zip(xhat.chunks(d).zip(g.data().chunks(d))).enumerate()
                    {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            dh[j] = drow[j] * tg.data()[j];
                            m1 += dh[j];
                            m2 += dh[j] * hrow[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            grow[j] += rstd[r] * (dh[j] - m1 - hrow[j] * m2);
                        }
                    }
                });
            }
            Op::MaskedSoftmax { x } => {
                let p = &node.value;
                let k = p.cols();
                acc(*x, &mut |gx| {
                    for ((grow, prow), drow) in gx.chunks_mut(k).zip(p.data().chunks(k)).zip(g.data().chunks(k)) {
                        let dot: f64 = prow.iter().zip(drow).map(|(a, b)| a * b).sum();
                        for j in 0..k {
                            grow[j] += prow[j] * (drow[j] - dot);
                        }
                    }
                });
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let (lq, d) = (tq.rows(), tq.cols());
                let lk = tk.rows();
                let mut dq = vec![0.0; lq * d];
                let mut dk = vec![0.0; lk * d];
                let mut dv = vec![0.0; lk * d];
                attention_backward(
                    tq.data(),
                    tk.data(),
                    tv.data(),
                    probs,
                    g.data(),
                    lq,
                    lk,
                    d,
                    *heads,
                    (&mut dq, &mut dk, &mut dv),
                );
                acc(*q, &mut |gq| add_into(gq, &dq));
                acc(*k, &mut |gk| add_into(gk, &dk));
                acc(*v, &mut |gv| add_into(gv, &dv));
            }
            Op::Gather { table, ids } => {
                let d = node.value.cols();
                acc(*table, &mut |gt| {
                    for (r, id) in ids.iter().enumerate() {
                        if let Some(id) = id {
                            add_into(&mut gt[id * d..(id + 1) * d], &g.data()[r * d..(r + 1) * d]);
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let v = self.value(*logits).cols();
                let scale = g.data()[0] / targets.len() as f64;
                acc(*logits, &mut |gl| {
                    for (i, &(row, class)) in targets.iter().enumerate() {
                        let p = &probs[i * v..(i + 1) * v];
                        let out = &mut gl[row * v..(row + 1) * v];
                        for j in 0..v {
                            out[j] += scale * p[j];
                        }
                        out[class] -= scale;
                    }
                });
            }
            Op::Sum(x) => {
                let d = g.data()[0];
                acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += d));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                let d = g.data()[0] / n;
                acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += d));
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (o, s) in dst.iter_mut().zip(src) {
        *o += s;
    }
}

/// Returns `(probs, out)`; probs is `heads × lq × lk`, out is `lq × d`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    lq: usize,
    lk: usize,
    d: usize,
    heads: usize,
    mask: &AttentionMask,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = vec![0.0; heads * lq * lk];
    let mut scores = vec![0.0; lq * lk];
    let mut out = vec![0.0; lq * d];
    for h in 0..heads {
        let col = h * dh;
        gemm(
            lq,
            dh,
            lk,
            Strided::cols_of(q, d, col),
            Strided::cols_of(k, d, col).t(),
            &mut scores,
            lk,
            false,
        );
        let p = &mut probs[h * lq * lk..(h + 1) * lq * lk];
        for r in 0..lq {
            let srow = &mut scores[r * lk..(r + 1) * lk];
            srow.iter_mut().for_each(|s| *s *= scale);
            softmax_row(srow, mask.row(r), &mut p[r * lk..(r + 1) * lk])
                .map_err(|_| Error::EmptyRow { row: r })?;
        }
        gemm_at(lq, lk, dh, Strided::row_major(p, lk), Strided::cols_of(v, d, col), &mut out, col, d, false);
    }
    Ok((probs, out))
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    lq: usize,
    lk: usize,
    d: usize,
    heads: usize,
    (dq, dk, dv): (&mut [f64], &mut [f64], &mut [f64]),
) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dp = vec![0.0; lq * lk];
    for h in 0..heads {
        let col = h * dh;
        let p = &probs[h * lq * lk..(h + 1) * lq * lk];
        // dV_h += Pᵀ · dO_h
        gemm_at(lk, lq, dh, Strided::row_major(p, lk).t(), Strided::cols_of(dout, d, col), dv, col, d, true);
        // dP = dO_h · V_hᵀ
        gemm(lq, dh, lk, Strided::cols_of(dout, d, col), Strided::cols_of(v, d, col).t(), &mut dp, lk, false);
        for r in 0..lq {
            let prow = &p[r * lk..(r + 1) * lk];
            let drow = &mut dp[r * lk..(r + 1) * lk];
            let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
            for j in 0..lk {
                drow[j] = prow[j] * (drow[j] - dot) * scale;
            }
        }
        // dQ_h += dS · K_h ; dK_h += dSᵀ · Q_h
        gemm_at(lq, lk, dh, Strided::row_major(&dp, lk), Strided::cols_of(k, d, col), dq, col, d, true);
        gemm_at(lk, lq, dh, Strided::row_major(&dp, lk).t(), Strided::cols_of(q, d, col), dk, col, d, true);
    }
}

/// Gradients of every tape node after a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    param_vars: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients indexed by `ParamId`, sized for a store of `n_params` entries.
    pub fn params(mut self, n_params: usize) -> Vec<Option<Tensor>> {
        let mut out: Vec<Option<Tensor>> = (0..n_params).map(|_| None).collect();
        for (id, v) in &self.param_vars {
            out[id.0] = self.grads[v.0].take();
        }
        out
    }
}
