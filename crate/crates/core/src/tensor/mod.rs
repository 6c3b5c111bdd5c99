//! Dense `f64` tensors with a tape-based reverse-mode autodiff engine.
//!
//! All tensors are row-major; image tensors use NCHW ordering throughout.

mod gradcheck;
mod kernels;
mod optim;
mod tape;

pub use gradcheck::{gradcheck, relative_error, GradcheckReport, REL_ERROR_FLOOR};
pub use optim::{Adam, AdamConfig};
pub use tape::{BatchStats, Norm, Tape, Var, BN_EPS, BN_MOMENTUM, L2_EPS};

use crate::error::{Error, Result};

/// A dense N-dimensional array of `f64` with an optional gradient buffer.
///
/// The gradient buffer exists iff the tensor requires gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(Error::dim("tensor", "shape", format!("zero extent in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(
                "tensor",
                "values",
                format!("shape {shape:?} holds {numel} values, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            grad: None,
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
            grad: None,
        }
    }

    /// Marks the tensor as trainable, allocating a zeroed gradient buffer.
    pub fn with_grad(mut self) -> Self {
        self.set_requires_grad(true);
        self
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        if on {
            if self.grad.is_none() {
                self.grad = Some(vec![0.0; self.data.len()]);
            }
        } else {
            self.grad = None;
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(0.0);
        }
    }

    /// Simultaneous mutable access to values and gradient.
    pub(crate) fn data_and_grad_mut(&mut self) -> (&mut [f64], Option<&mut [f64]>) {
        (&mut self.data, self.grad.as_deref_mut())
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.contains(&0) {
            return Err(Error::dim(
                "reshape",
                "shape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite()) && self.grad.iter().flatten().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_values() {
        assert!(Tensor::new([2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new([2, 3], vec![0.0; 5]),
            Err(Error::Dimension { .. })
        ));
        assert!(Tensor::new([0, 3], vec![]).is_err());
    }

    #[test]
    fn grad_slot_follows_requires_grad() {
        let mut t = Tensor::zeros([2, 2]);
        assert!(t.grad().is_none());
        t.set_requires_grad(true);
        assert_eq!(t.grad().unwrap().len(), 4);
        t.set_requires_grad(false);
        assert!(!t.requires_grad());
    }

    #[test]
    fn scalar_has_one_value() {
        let s = Tensor::scalar(2.5);
        assert_eq!(s.numel(), 1);
        assert!(s.shape().is_empty());
    }
}
