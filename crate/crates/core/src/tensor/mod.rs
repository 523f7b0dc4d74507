//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! The computation graph is rebuilt on every forward pass (define-by-run):
//! operations append nodes to a [`Graph`] and return [`NodeId`] handles,
//! `Graph::backward` then walks the tape in reverse. Everything is 64-bit
//! so finite-difference checks stay reliable.

pub mod adam;
pub mod checkpoint;
pub mod graph;
pub mod nn;

pub use adam::AdamState;
pub use graph::{Graph, NodeId};
pub use nn::{BatchNorm, Linear, Mlp, ParamId, ParamSet, Parameter};

use std::fmt;

/// Dense n-dimensional value, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Zero the gradient buffer, allocating it if absent.
    pub fn zero_grad(&mut self) {
        match self.grad {
            Some(ref mut g) => g.iter_mut().for_each(|v| *v = 0.0),
            None => self.grad = Some(vec![0.0; self.data.len()]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    ShapeDataMismatch { shape: Vec<usize>, len: usize },
    DimensionMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    InvalidAxis { axis: usize, rank: usize },
    NotScalar { op: &'static str, shape: Vec<usize> },
    LabelOutOfRange { label: usize, classes: usize },
    BatchTooSmall { rows: usize },
    MissingGrad { name: String },
    DuplicateName { name: String },
    UnknownName { name: String },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeDataMismatch { shape, len } => {
                write!(f, "shape {:?} does not describe a buffer of length {}", shape, len)
            }
            TensorError::DimensionMismatch { op, lhs, rhs } => {
                write!(f, "{}: incompatible shapes {:?} and {:?}", op, lhs, rhs)
            }
            TensorError::InvalidAxis { axis, rank } => {
                write!(f, "axis {} out of range for rank {}", axis, rank)
            }
            TensorError::NotScalar { op, shape } => {
                write!(f, "{}: expected a scalar, got shape {:?}", op, shape)
            }
            TensorError::LabelOutOfRange { label, classes } => {
                write!(f, "label {} out of range for {} classes", label, classes)
            }
            TensorError::BatchTooSmall { rows } => {
                write!(f, "batch norm in training mode needs at least 2 rows, got {}", rows)
            }
            TensorError::MissingGrad { name } => {
                write!(f, "parameter '{}' has no gradient", name)
            }
            TensorError::DuplicateName { name } => {
                write!(f, "parameter name '{}' already registered", name)
            }
            TensorError::UnknownName { name } => {
                write!(f, "no parameter named '{}'", name)
            }
        }
    }
}

impl std::error::Error for TensorError {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_must_match_buffer() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::ShapeDataMismatch { .. }));
    }

    #[test]
    fn zero_grad_allocates_matching_buffer() {
        let mut t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap().with_grad();
        assert!(t.grad.is_none());
        t.zero_grad();
        assert_eq!(t.grad.as_deref(), Some(&[0.0; 4][..]));
    }
}
