//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! The engine is deliberately small: a [`Tensor`] is a shape plus a flat
//! row-major buffer, and a [`Graph`] is a dynamic tape rebuilt on every
//! forward pass. Double precision keeps the finite-difference checks tight;
//! throughput is a non-goal at this scale.

mod checkpoint;
mod graph;
mod init;
mod params;
mod sgd;

pub use checkpoint::{load_into_store, read_checkpoint, write_checkpoint};
pub use graph::{Graph, ValueId};
pub use init::{kaiming_normal, standard_normal};
pub use params::{FreezeMask, ParamId, ParamStore};
pub use sgd::SgdState;

use crate::error::{Error, Result};

/// Dense n-dimensional array of f64 in row-major order, with an optional
/// gradient buffer of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
}

impl Tensor {
    /// Builds a tensor, checking that the extents multiply out to the buffer
    /// length and that every extent is positive.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid_argument(format!(
                "tensor shape {shape:?} has a zero extent"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid_argument(format!(
                "tensor shape {shape:?} implies {numel} elements but buffer holds {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data, grad: None, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], grad: None, requires_grad: false }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![value; numel], grad: None, requires_grad: false }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value], grad: None, requires_grad: false }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Marks the tensor as a trainable leaf and allocates its gradient buffer.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self.grad = Some(vec![0.0; self.data.len()]);
        self
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn add_to_grad(&mut self, delta: &[f64]) {
        let g = self
            .grad
            .get_or_insert_with(|| vec![0.0; self.data.len()]);
        debug_assert_eq!(g.len(), delta.len());
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    /// Hard error on NaN/Inf anywhere in the value buffer.
    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        ensure_finite(&self.data, context)
    }
}

pub(crate) fn ensure_finite(data: &[f64], context: &str) -> Result<()> {
    for (i, v) in data.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{context} (element {i} = {v})")));
        }
    }
    Ok(())
}
