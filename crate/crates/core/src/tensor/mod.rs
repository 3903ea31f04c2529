//! Dense f64 tensors with a small reverse-mode autodiff tape.
//!
//! [`Tensor`] is an immutable-by-convention value: a row-major buffer plus a
//! shape. Differentiable computation happens on a [`Tape`], which stores every
//! intermediate value together with the rule needed to push gradients back to
//! its inputs. Forward kernels live in [`kernels`] and are shared by the tape
//! and the plain tensor methods, so eager and recorded evaluation agree
//! bit-for-bit.

pub mod kernels;
mod rng;
mod tape;

pub use rng::{NoiseDist, Rng, RngState};
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};

/// Default stabilizer used by [`norm_alpha`] and the energy loss.
pub const DEFAULT_NORM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Internal constructor for kernel outputs whose shape is known to be consistent.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_parts(vec![], vec![v])
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::from_parts(vec![n], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_parts(shape.to_vec(), vec![0.0; shape.iter().product()])
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::from_parts(shape.to_vec(), vec![v; shape.iter().product()])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::dim("ragged rows"));
        }
        Self::new(&[r, c], rows.concat())
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::from_parts(vec![n, n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The trailing extent (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as a `[numel / last_dim, last_dim]` matrix.
    pub fn rows(&self) -> usize {
        self.numel() / self.last_dim()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.last_dim();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.last_dim() + c]
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::dim(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        kernels::matmul(self, other, false)
    }

    pub fn binary(&self, op: BinaryOp, other: &Tensor) -> Result<Tensor> {
        kernels::binary(op, self, other)
    }

    pub fn unary(&self, op: UnaryOp) -> Tensor {
        kernels::unary(op, self)
    }

    pub fn sum(&self, axis: Option<usize>) -> Result<Tensor> {
        kernels::reduce(ReduceOp::Sum, self, axis)
    }

    pub fn mean(&self, axis: Option<usize>) -> Result<Tensor> {
        kernels::reduce(ReduceOp::Mean, self, axis)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    Silu,
    /// `x^p` for a fixed exponent.
    Pow(f64),
    /// `c * x`.
    Scale(f64),
    Neg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// `(Σ vᵢ² + eps)^(α/2)` over the whole tensor.
pub fn norm_alpha(v: &Tensor, alpha: f64, eps: f64) -> Result<f64> {
    check_alpha(alpha, eps)?;
    Ok(kernels::norm_alpha_slice(v.data(), alpha, eps))
}

pub(crate) fn check_alpha(alpha: f64, eps: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 2.0) {
        return Err(Error::param(format!("alpha must lie in (0, 2], got {alpha}")));
    }
    if !(eps >= 0.0) {
        return Err(Error::param(format!("eps must be non-negative, got {eps}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[0, 3], vec![]).is_err());
    }

    #[test]
    fn identity_matmul() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(Tensor::eye(2).matmul(&x).unwrap(), x);
    }

    #[test]
    fn annihilating_product() {
        let a = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap(), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn silu_values() {
        assert_eq!(silu(0.0), 0.0);
        assert!((silu(1.0) - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-15);
        assert!((silu(1.0) - 0.731_058_578_630_004_9).abs() < 1e-12);
    }

    #[test]
    fn add_zeros_is_identity() {
        let x = Tensor::vector(vec![1.5, -2.0, 3.25]);
        assert_eq!(x.binary(BinaryOp::Add, &Tensor::zeros(&[3])).unwrap(), x);
    }

    #[test]
    fn incompatible_broadcast_is_dimension_error() {
        let x = Tensor::zeros(&[2, 3]);
        let y = Tensor::zeros(&[2]);
        assert!(matches!(
            x.binary(BinaryOp::Add, &y),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn reductions() {
        let x = Tensor::vector(vec![1.0, 2.0, 3.0]);
        assert_eq!(x.mean(None).unwrap().item().unwrap(), 2.0);
        assert_eq!(Tensor::zeros(&[4, 4]).sum(None).unwrap().item().unwrap(), 0.0);
        let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(m.sum(Some(0)).unwrap(), Tensor::vector(vec![4.0, 6.0]));
        assert_eq!(m.sum(Some(1)).unwrap(), Tensor::vector(vec![3.0, 7.0]));
        assert!(matches!(m.sum(Some(2)), Err(Error::Dimension(_))));
    }

    #[test]
    fn norm_alpha_values() {
        let v = Tensor::vector(vec![3.0, 4.0]);
        assert_eq!(norm_alpha(&v, 1.0, 0.0).unwrap(), 5.0);
        let z = Tensor::zeros(&[3]);
        assert!((norm_alpha(&z, 1.0, 1e-8).unwrap() - 1e-4).abs() < 1e-18);
        let o = Tensor::vector(vec![1.0, 1.0]);
        assert!((norm_alpha(&o, 0.5, 0.0).unwrap() - 2f64.powf(0.25)).abs() < 1e-15);
        assert!((norm_alpha(&o, 0.5, 0.0).unwrap() - 1.189_207_115).abs() < 1e-9);
    }

    #[test]
    fn norm_alpha_rejects_bad_alpha() {
        let v = Tensor::vector(vec![1.0]);
        for a in [0.0, -1.0, 2.5, f64::NAN] {
            assert!(matches!(norm_alpha(&v, a, 0.0), Err(Error::Parameter(_))));
        }
        assert!(norm_alpha(&v, 2.0, 0.0).is_ok());
    }
}
