//! Forward kernels shared by the autodiff graph and the inference paths.

use super::mask::AttentionMask;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Row-wise softmax over permitted keys; masked entries are exactly zero.
pub fn masked_softmax(scores: &Tensor, mask: &AttentionMask) -> Result<Tensor> {
    let (q, k) = (scores.rows(), scores.cols());
    if scores.shape().len() != 2 || mask.rows() != q || mask.cols() != k {
        return Err(Error::Dimension(format!(
            "scores {:?} vs mask {}x{}",
            scores.shape(),
            mask.rows(),
            mask.cols()
        )));
    }
    let mut out = vec![0.0; q * k];
    for r in 0..q {
        softmax_row(scores.row(r), mask.row(r), &mut out[r * k..(r + 1) * k])
            .map_err(|_| Error::EmptyRow { row: r })?;
    }
    Ok(Tensor::from_parts(vec![q, k], out))
}

/// Writes the masked softmax of `scores` into `out`. Errors when no key is permitted.
pub(crate) fn softmax_row(scores: &[f64], allow: &[bool], out: &mut [f64]) -> std::result::Result<(), ()> {
    let mut max = f64::NEG_INFINITY;
    for (s, &a) in scores.iter().zip(allow) {
        if a && *s > max {
            max = *s;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(());
    }
    let mut total = 0.0;
    for ((o, s), &a) in out.iter_mut().zip(scores).zip(allow) {
        if a {
            let e = (s - max).exp();
            *o = e;
            total += e;
        } else {
            *o = 0.0;
        }
    }
    let inv = 1.0 / total;
    for (o, &a) in out.iter_mut().zip(allow) {
        if a {
            *o *= inv;
        }
    }
    Ok(())
}

/// Normalizes each row over the last axis, then applies `gain` and `bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let d = x.cols();
    if gain.len() != d || bias.len() != d {
        return Err(Error::Dimension(format!(
            "layer_norm over {d} features with gain {} and bias {}",
            gain.len(),
            bias.len()
        )));
    }
    let mut out = vec![0.0; x.len()];
    for r in 0..x.rows() {
        let (mean, rstd) = row_stats(x.row(r));
        for j in 0..d {
            out[r * d + j] = (x.row(r)[j] - mean) * rstd * gain.data()[j] + bias.data()[j];
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Mean and reciprocal standard deviation (biased variance plus `LN_EPS`).
pub(crate) fn row_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LN_EPS).sqrt())
}

/// Tanh-approximated GeLU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044_715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044_715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044_715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
