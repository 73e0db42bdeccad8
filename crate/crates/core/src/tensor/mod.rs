//! Dense float64 tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain owned value: row-major `f64` storage plus an optional
//! gradient of the same shape. Differentiable computation goes through a
//! [`Tape`], which records operations as they execute and replays them in
//! reverse for gradients. Small symmetric linear algebra (eigendecomposition,
//! PSD matrix square root) lives in [`linalg`].

mod linalg;
mod tape;

pub use linalg::{sqrtm_psd, sym_eig, SymmetricMatrix};
pub use tape::{Tape, Var};

use crate::error::{Error, Result};

/// Dense n-dimensional array of 64-bit floats, row-major.
///
/// Invariants enforced at construction and mutation boundaries:
/// `product(shape) == data.len()`, all values finite, and the gradient
/// (when present) has the same length as the data.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Build a tensor from a shape and flat row-major data.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::dimension(format!(
                "zero extent in shape {shape:?}"
            )));
        }
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::dimension(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expect,
                data.len()
            )));
        }
        check_finite(&data, "tensor construction")?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    /// Scalar tensor of shape `[1]`.
    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(&[1], vec![value])
    }

    /// Rank-2 tensor from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::dimension("from_rows: no rows"));
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::dimension(format!(
                    "from_rows: row {} has {} values, expected {}",
                    i,
                    r.len(),
                    cols
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(&[rows.len(), cols], data)
    }

    pub fn requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn requires_grad_flag(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the raw values. The caller must keep them finite;
    /// boundaries that accept tensors re-validate.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::contract(format!(
                "item() on tensor of {} elements",
                self.data.len()
            )));
        }
        Ok(self.data[0])
    }

    /// Number of rows of a rank-2 tensor (or 1 for rank-1).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    /// Number of columns of a rank-2 tensor (or the length for rank-1).
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => 0,
        }
    }

    /// Row `i` of a rank-2 tensor as a slice.
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Attach a gradient; must match the data length and be finite.
    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::dimension(format!(
                "gradient of {} values for tensor of {}",
                grad.len(),
                self.data.len()
            )));
        }
        check_finite(&grad, "gradient")?;
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Maximum absolute difference to another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::dimension("max_abs_diff: shape mismatch"));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

/// Reject NaN/Inf; `ctx` names the boundary for the error message.
pub(crate) fn check_finite(values: &[f64], ctx: &str) -> Result<()> {
    for (i, v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite value {v} at index {i} in {ctx}"
            )));
        }
    }
    Ok(())
}

/// ELU: identity for positive inputs, `e^x - 1` otherwise.
pub(crate) fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

/// Derivative of ELU with respect to its input.
pub(crate) fn elu_prime(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_shape_product() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::new(&[2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn construction_rejects_non_finite() {
        let err = Tensor::new(&[2], vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        let err = Tensor::new(&[1], vec![f64::INFINITY]).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn grad_must_match_shape() {
        let mut t = Tensor::zeros(&[3]).unwrap();
        assert!(t.set_grad(vec![1.0, 2.0]).is_err());
        t.set_grad(vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn elu_matches_definition() {
        assert_eq!(elu(0.0), 0.0);
        assert_eq!(elu(1.5), 1.5);
        // e^{-1} - 1
        let expect = (-1.0f64).exp() - 1.0;
        assert!((elu(-1.0) - expect).abs() < 1e-15);
        assert!((expect - (-0.6321205588285577)).abs() < 1e-15);
    }
}
