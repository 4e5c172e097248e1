//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable row-major array of `F` (f32 for training,
//! f64 for verification) plus an optional link into the [`Tape`] that
//! recorded it. All arithmetic goes through `Tape` methods; an application
//! is recorded only when at least one operand requires gradients. One tape
//! serves one optimization step and is consumed by a single backward pass.

mod fd;
mod tape;

pub use fd::{finite_difference_check, FdCoord, FdReport};
pub use tape::{GradMap, Tape};

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Link from a tensor to the tape node that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeRef {
    pub(crate) tape: u64,
    pub(crate) index: usize,
}

/// Dense n-dimensional array. Cloning is cheap (shared storage). Tensors are
/// immutable after creation and may cross threads; tapes may not.
#[derive(Debug, Clone)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Arc<Vec<F>>,
    node: Option<NodeRef>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                op: "tensor-new",
                shape,
                reason: format!("shape wants {numel} elements, data has {}", data.len()),
            });
        }
        Ok(Tensor { shape, data: Arc::new(data), node: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![F::zero(); numel]), node: None }
    }

    pub fn full(shape: Vec<usize>, value: F) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![value; numel]), node: None }
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: F) -> Self {
        Tensor { shape: vec![], data: Arc::new(vec![value]), node: None }
    }

    pub fn from_f64s(shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| F::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<F>> {
        Arc::clone(&self.data)
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub(crate) fn node(&self) -> Option<NodeRef> {
        self.node
    }

    pub(crate) fn with_node(shape: Vec<usize>, data: Arc<Vec<F>>, node: Option<NodeRef>) -> Self {
        Tensor { shape, data, node }
    }

    /// Value-equal tensor with no tape link; gradients do not flow through it.
    pub fn detach(&self) -> Self {
        Tensor { shape: self.shape.clone(), data: Arc::clone(&self.data), node: None }
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> F {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn item_f64(&self) -> f64 {
        crate::scalar::Scalar::to_f64(self.item())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|&v| crate::scalar::Scalar::to_f64(v)).collect()
    }

    /// Element of a rank-2 tensor.
    pub fn at2(&self, row: usize, col: usize) -> F {
        assert_eq!(self.shape.len(), 2);
        self.data[row * self.shape[1] + col]
    }

    /// Replace one coordinate, producing a detached tensor. Used by the
    /// finite-difference driver.
    pub fn with_coord(&self, flat: usize, value: F) -> Self {
        let mut data = self.data.as_ref().clone();
        data[flat] = value;
        Tensor { shape: self.shape.clone(), data: Arc::new(data), node: None }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
