//! Value-level kernels. The graph reuses these for its forward pass.

use crate::error::{precondition, Error, Result};
use crate::numeric::Tensor;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2();
    let (k2, n) = b.dims2();
    if k != k2 {
        return Err(Error::Dimension {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(Tensor::matrix(m, n, matmul_raw(a.data(), b.data(), m, k, n)).expect("shape"))
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a^T b` without materializing the transpose. `a: k x m`, `b: k x n`.
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for t in 0..k {
        let arow = &a[t * m..(t + 1) * m];
        let brow = &b[t * n..(t + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a b^T`. `a: m x k`, `b: n x k`.
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

pub fn logsumexp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_slice(v: &[f64], out: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(v) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Softmax of a vector, stabilized by max subtraction.
pub fn softmax(v: &Tensor) -> Result<Tensor> {
    if v.is_empty() {
        return precondition("softmax of an empty vector");
    }
    if !v.is_finite() {
        return precondition("softmax input must be finite");
    }
    let mut out = v.clone();
    out.clear_grad();
    softmax_slice(v.data(), out.data_mut());
    Ok(out)
}

/// Row-wise softmax of a matrix.
pub fn softmax_rows(m: &Tensor) -> Tensor {
    let (r, c) = m.dims2();
    let mut out = Tensor::zeros(&[r, c]);
    for i in 0..r {
        softmax_slice(m.row(i), &mut out.data_mut()[i * c..(i + 1) * c]);
    }
    out
}

pub fn gelu(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = inner.tanh();
    let dinner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

/// Scaled dot-product attention `softmax(Q K^T / sqrt(d)) V` with equal
/// query and key lengths.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (tq, d) = q.dims2();
    let (tk, dk) = k.dims2();
    let (tv, dv) = v.dims2();
    if d == 0 {
        return precondition("attention with zero feature dimension");
    }
    if tq != tk || tk != tv || d != dk || dk != dv {
        return Err(Error::Dimension {
            op: "attention",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut scores = matmul_nt(q.data(), k.data(), tq, d, tk);
    scores.iter_mut().for_each(|s| *s *= scale);
    let weights = softmax_rows(&Tensor::matrix(tq, tk, scores)?);
    matmul(&weights, v)
}

/// Mean squared error over all elements.
pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Dimension {
            op: "mse",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let n = pred.len() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n)
}

/// `-log softmax(logits)[target]` via logsumexp.
pub fn cross_entropy_with_logits(logits: &Tensor, target: usize) -> Result<f64> {
    let n = logits.len();
    if target >= n {
        return Err(Error::Index { index: target, len: n });
    }
    Ok(logsumexp(logits.data()) - logits.data()[target])
}

/// Per-row standardization: zero mean, unit variance over columns.
pub fn standardize_rows(m: &Tensor, eps: f64) -> Tensor {
    let (r, c) = m.dims2();
    let mut out = Tensor::zeros(&[r, c]);
    for i in 0..r {
        let row = m.row(i);
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for (o, &x) in out.data_mut()[i * c..(i + 1) * c].iter_mut().zip(row) {
            *o = (x - mean) * inv;
        }
    }
    out
}
