//! Dense f64 tensors and a reverse-mode autodiff tape.
//!
//! The engine is deliberately small: row-major contiguous storage, explicit
//! shapes, and exactly the operations the classifier needs. Everything runs
//! in f64 so analytic gradients can be checked against central finite
//! differences with tight tolerances.
//!
//! [`Tensor`] is plain data (shape + values + optional gradient buffer).
//! Differentiable computation happens on a [`Tape`]: leaves are copied in
//! with [`Tape::leaf`], operations return [`Var`] handles, and
//! [`Tape::backward`] fills gradient buffers by walking the recorded
//! operations in reverse. A tape is confined to one thread; data-parallel
//! work uses one tape per thread and sums gradients in a fixed order.

mod tape;

pub use tape::{Tape, Var, BCE_EPS};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised by tensor operations.
#[derive(Debug, Error)]
pub enum TensorError {
    /// Operand shapes are inconsistent with the operation's contract.
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    /// `backward` was called on a non-scalar value.
    #[error("backward target must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}

/// Dense tensor: contiguous f64 values in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
    #[serde(default)]
    requires_grad: bool,
}

impl Tensor {
    /// Tensor of zeros.
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            grad: None,
            requires_grad: false,
        }
    }

    /// Tensor from existing values; `data.len()` must equal the shape product.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        }
    }

    /// Rank-0 scalar.
    pub fn scalar(v: f64) -> Self {
        Tensor::from_vec(&[], vec![v])
    }

    /// Marks this tensor as a learnable leaf.
    pub fn requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Gradient buffer, present after a backward pass through this leaf.
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `delta` into the gradient buffer, allocating zeros on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        assert_eq!(delta.len(), self.data.len());
        let g = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    /// Drops the gradient buffer.
    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor with {} elements", self.data.len());
        self.data[0]
    }
}

/// Flat index into an `[N, C, W]` tensor.
#[inline(always)]
pub(crate) fn idx3(c_len: usize, w_len: usize, n: usize, c: usize, w: usize) -> usize {
    (n * c_len + c) * w_len + w
}
