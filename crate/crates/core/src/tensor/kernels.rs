//! Forward and backward kernels over row-major buffers.
//!
//! Everything here is a pure function of its inputs. Matrix products go
//! through `matrixmultiply`, which is single-threaded and deterministic.

use super::{sigmoid, BinaryOp, ReduceOp, Tensor, UnaryOp};
use crate::error::{Error, Result};

/// `c = a · b + beta · c`, with arbitrary strides on `a` and `b` and a
/// row-major `m×n` output.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the buffer lengths are checked above and every stride pair
    // describes a view that stays inside its buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `a · b` (or `a · bᵀ` when `trans_b`), both rank 2.
pub fn matmul(a: &Tensor, b: &Tensor, trans_b: bool) -> Result<Tensor> {
    let (m, k, n) = matmul_dims(a.shape(), b.shape(), trans_b)?;
    let mut out = vec![0.0; m * n];
    let bs = if trans_b { (1, k) } else { (n, 1) };
    gemm(m, k, n, a.data(), (k, 1), b.data(), bs, 0.0, &mut out);
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize], trans_b: bool) -> Result<(usize, usize, usize)> {
    let bad = || {
        Error::dim(format!(
            "matmul of {a:?} and {b:?}{}",
            if trans_b { " (transposed)" } else { "" }
        ))
    };
    if a.len() != 2 || b.len() != 2 {
        return Err(bad());
    }
    let (m, k) = (a[0], a[1]);
    let (bk, n) = if trans_b { (b[1], b[0]) } else { (b[0], b[1]) };
    if k != bk {
        return Err(bad());
    }
    Ok((m, k, n))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Broadcast {
    Same,
    RhsScalar,
    LhsScalar,
    /// rhs is a row vector repeated over every row of lhs
    RhsRow,
    LhsRow,
}

fn is_row(shape: &[usize]) -> bool {
    shape.len() == 1 || (shape.len() == 2 && shape[0] == 1)
}

pub(crate) fn classify_broadcast(a: &[usize], b: &[usize]) -> Result<(Broadcast, Vec<usize>)> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b {
        return Ok((Broadcast::Same, a.to_vec()));
    }
    if nb == 1 {
        return Ok((Broadcast::RhsScalar, a.to_vec()));
    }
    if na == 1 {
        return Ok((Broadcast::LhsScalar, b.to_vec()));
    }
    if is_row(b) && a.len() >= 2 && a.last() == b.last() {
        return Ok((Broadcast::RhsRow, a.to_vec()));
    }
    if is_row(a) && b.len() >= 2 && a.last() == b.last() {
        return Ok((Broadcast::LhsRow, b.to_vec()));
    }
    Err(Error::dim(format!("cannot broadcast {a:?} with {b:?}")))
}

#[inline]
fn apply(op: BinaryOp, x: f64, y: f64) -> f64 {
    match op {
        BinaryOp::Add => x + y,
        BinaryOp::Sub => x - y,
        BinaryOp::Mul => x * y,
    }
}

pub fn binary(op: BinaryOp, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (bc, shape) = classify_broadcast(a.shape(), b.shape())?;
    let (x, y) = (a.data(), b.data());
    let data: Vec<f64> = match bc {
        Broadcast::Same => x.iter().zip(y).map(|(&p, &q)| apply(op, p, q)).collect(),
        Broadcast::RhsScalar => x.iter().map(|&p| apply(op, p, y[0])).collect(),
        Broadcast::LhsScalar => y.iter().map(|&q| apply(op, x[0], q)).collect(),
        Broadcast::RhsRow => {
            let c = y.len();
            x.iter()
                .enumerate()
                .map(|(i, &p)| apply(op, p, y[i % c]))
                .collect()
        }
        Broadcast::LhsRow => {
            let c = x.len();
            y.iter()
                .enumerate()
                .map(|(i, &q)| apply(op, x[i % c], q))
                .collect()
        }
    };
    Ok(Tensor::from_parts(shape, data))
}

/// Reduce a full-shape gradient onto a broadcast operand.
pub(crate) fn unbroadcast(grad: &[f64], operand_len: usize, repeated: bool) -> Vec<f64> {
    if !repeated {
        return grad.to_vec();
    }
    let mut out = vec![0.0; operand_len];
    for (i, g) in grad.iter().enumerate() {
        out[i % operand_len] += g;
    }
    out
}

pub fn unary(op: UnaryOp, a: &Tensor) -> Tensor {
    let f: Box<dyn Fn(f64) -> f64> = match op {
        UnaryOp::Silu => Box::new(super::silu),
        UnaryOp::Pow(p) => Box::new(move |x: f64| x.powf(p)),
        UnaryOp::Scale(c) => Box::new(move |x| c * x),
        UnaryOp::Neg => Box::new(|x: f64| -x),
    };
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())
}

pub(crate) fn unary_grad(op: UnaryOp, x: &[f64], g: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(g)
        .map(|(&x, &g)| match op {
            UnaryOp::Silu => {
                let s = sigmoid(x);
                g * (s + x * s * (1.0 - s))
            }
            UnaryOp::Pow(p) => g * p * x.powf(p - 1.0),
            UnaryOp::Scale(c) => g * c,
            UnaryOp::Neg => -g,
        })
        .collect()
}

/// `(outer, len, inner)` decomposition of `shape` around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn reduce(op: ReduceOp, a: &Tensor, axis: Option<usize>) -> Result<Tensor> {
    match axis {
        None => {
            let s: f64 = a.data().iter().sum();
            let v = match op {
                ReduceOp::Sum => s,
                ReduceOp::Mean => s / a.numel() as f64,
            };
            Ok(Tensor::scalar(v))
        }
        Some(ax) => {
            if ax >= a.rank() {
                return Err(Error::dim(format!(
                    "axis {ax} out of range for shape {:?}",
                    a.shape()
                )));
            }
            let (outer, len, inner) = axis_split(a.shape(), ax);
            let mut out = vec![0.0; outer * inner];
            let x = a.data();
            for o in 0..outer {
                for l in 0..len {
                    let base = (o * len + l) * inner;
                    for i in 0..inner {
                        out[o * inner + i] += x[base + i];
                    }
                }
            }
            if op == ReduceOp::Mean {
                out.iter_mut().for_each(|v| *v /= len as f64);
            }
            let mut shape = a.shape().to_vec();
            shape.remove(ax);
            Ok(Tensor::from_parts(shape, out))
        }
    }
}

pub(crate) fn norm_alpha_slice(v: &[f64], alpha: f64, eps: f64) -> f64 {
    let s: f64 = v.iter().map(|x| x * x).sum::<f64>() + eps;
    s.powf(alpha / 2.0)
}

/// Row-wise `(Σ v² + eps)^(α/2)` over the last axis.
pub fn norm_alpha_rows(a: &Tensor, alpha: f64, eps: f64) -> Tensor {
    let c = a.last_dim();
    let out: Vec<f64> = a
        .data()
        .chunks(c)
        .map(|r| norm_alpha_slice(r, alpha, eps))
        .collect();
    let shape = a.shape()[..a.rank().saturating_sub(1)].to_vec();
    Tensor::from_parts(shape, out)
}

pub(crate) fn norm_alpha_rows_grad(x: &[f64], c: usize, g: &[f64], alpha: f64, eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (r, row) in x.chunks(c).enumerate() {
        let s: f64 = row.iter().map(|v| v * v).sum::<f64>() + eps;
        if s == 0.0 {
            continue;
        }
        let k = g[r] * alpha * s.powf(alpha / 2.0 - 1.0);
        for (o, v) in out[r * c..(r + 1) * c].iter_mut().zip(row) {
            *o = k * v;
        }
    }
    out
}

/// Normalizes each row of the last axis; returns `(xhat, rstd)`.
pub fn layernorm(a: &Tensor, eps: f64) -> Result<(Tensor, Vec<f64>)> {
    let d = a.last_dim();
    if a.rank() == 0 || d < 2 {
        return Err(Error::dim(format!(
            "layernorm needs a trailing extent >= 2, got shape {:?}",
            a.shape()
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::param(format!("layernorm eps must be positive, got {eps}")));
    }
    let mut out = Vec::with_capacity(a.numel());
    let mut rstds = Vec::with_capacity(a.rows());
    for row in a.data().chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        out.extend(row.iter().map(|x| (x - mean) * rstd));
        rstds.push(rstd);
    }
    Ok((Tensor::from_parts(a.shape().to_vec(), out), rstds))
}

pub(crate) fn layernorm_grad(xhat: &[f64], rstd: &[f64], d: usize, g: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; xhat.len()];
    for (r, (xr, gr)) in xhat.chunks(d).zip(g.chunks(d)).enumerate() {
        let mg = gr.iter().sum::<f64>() / d as f64;
        let mgx = gr.iter().zip(xr).map(|(g, x)| g * x).sum::<f64>() / d as f64;
        for ((o, &gi), &xi) in out[r * d..(r + 1) * d].iter_mut().zip(gr).zip(xr) {
            *o = rstd[r] * (gi - mg - xi * mgx);
        }
    }
    out
}

/// Geometry of a batched multi-head attention call: `batch` sequences of
/// `seq` tokens, `heads` heads of width `head_dim`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnDims {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttnDims {
    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// Scaled dot-product attention without a mask. `q`, `k`, `v` are
/// `[batch·seq, heads·head_dim]`. Returns the output and the attention
/// probabilities laid out as `[batch, heads, seq, seq]`.
pub fn attention(q: &[f64], k: &[f64], v: &[f64], dims: AttnDims) -> (Vec<f64>, Vec<f64>) {
    let AttnDims {
        batch,
        seq,
        heads,
        head_dim,
    } = dims;
    let w = dims.width();
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut out = vec![0.0; batch * seq * w];
    let mut probs = vec![0.0; batch * heads * seq * seq];
    for b in 0..batch {
        for h in 0..heads {
            let off = h * head_dim;
            let p = &mut probs[((b * heads + h) * seq) * seq..((b * heads + h + 1) * seq) * seq];
            for i in 0..seq {
                let qi = &q[(b * seq + i) * w + off..][..head_dim];
                let prow = &mut p[i * seq..(i + 1) * seq];
                for (j, pj) in prow.iter_mut().enumerate() {
                    let kj = &k[(b * seq + j) * w + off..][..head_dim];
                    *pj = scale * qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>();
                }
                softmax_in_place(prow);
                let oi = &mut out[(b * seq + i) * w + off..][..head_dim];
                for (j, &pj) in prow.iter().enumerate() {
                    let vj = &v[(b * seq + j) * w + off..][..head_dim];
                    for (o, x) in oi.iter_mut().zip(vj) {
                        *o += pj * x;
                    }
                }
            }
        }
    }
    (out, probs)
}

/// Gradients of [`attention`] with respect to `(q, k, v)`.
pub(crate) fn attention_grad(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    g: &[f64],
    dims: AttnDims,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let AttnDims {
        batch,
        seq,
        heads,
        head_dim,
    } = dims;
    let w = dims.width();
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dp = vec![0.0; seq];
    for b in 0..batch {
        for h in 0..heads {
            let off = h * head_dim;
            let p = &probs[((b * heads + h) * seq) * seq..((b * heads + h + 1) * seq) * seq];
            for i in 0..seq {
                let gi = &g[(b * seq + i) * w + off..][..head_dim];
                let prow = &p[i * seq..(i + 1) * seq];
                for j in 0..seq {
                    let vj = &v[(b * seq + j) * w + off..][..head_dim];
                    dp[j] = gi.iter().zip(vj).map(|(a, c)| a * c).sum();
                    let dvj = &mut dv[(b * seq + j) * w + off..][..head_dim];
                    for (d, x) in dvj.iter_mut().zip(gi) {
                        *d += prow[j] * x;
                    }
                }
                let dot: f64 = prow.iter().zip(&dp).map(|(a, c)| a * c).sum();
                for j in 0..seq {
                    let ds = prow[j] * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &k[(b * seq + j) * w + off..][..head_dim];
                    let qi = &q[(b * seq + i) * w + off..][..head_dim];
                    let dqi = &mut dq[(b * seq + i) * w + off..][..head_dim];
                    for (d, x) in dqi.iter_mut().zip(kj) {
                        *d += ds * x;
                    }
                    let dkj = &mut dk[(b * seq + j) * w + off..][..head_dim];
                    for (d, x) in dkj.iter_mut().zip(qi) {
                        *d += ds * x;
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(classify_broadcast(&[2, 3], &[3]).unwrap().0, Broadcast::RhsRow);
        assert_eq!(classify_broadcast(&[1, 3], &[4, 3]).unwrap().0, Broadcast::LhsRow);
        assert_eq!(classify_broadcast(&[], &[4, 3]).unwrap().0, Broadcast::LhsScalar);
        assert!(classify_broadcast(&[2, 3], &[2, 1]).is_err());
        assert!(classify_broadcast(&[2, 3, 4], &[3, 4]).is_err());
    }

    #[test]
    fn layernorm_needs_two_columns() {
        assert!(layernorm(&Tensor::zeros(&[3, 1]), 1e-5).is_err());
    }

    #[test]
    fn transposed_matmul_matches_explicit() {
        let a = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::new(&[2, 3], vec![0.5, -1.0, 2.0, 1.0, 0.0, -2.0]).unwrap();
        let bt = Tensor::new(&[3, 2], vec![0.5, 1.0, -1.0, 0.0, 2.0, -2.0]).unwrap();
        assert_eq!(matmul(&a, &b, true).unwrap(), matmul(&a, &bt, false).unwrap());
    }
}
