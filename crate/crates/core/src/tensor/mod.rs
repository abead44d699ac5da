//! Dense `f64` tensors and a tape-based reverse-mode differentiation graph.
//!
//! Tensors are plain row-major buffers. Differentiation happens on a
//! [`Graph`]: every operation appends a node holding its output value and
//! enough bookkeeping to push gradients back to its inputs. A graph is built
//! for one forward pass and dropped afterwards; parameters live outside it.

mod gradcheck;
mod graph;
pub mod kernels;

pub use gradcheck::{grad_check, GradCheck};
pub use graph::{Graph, Var};
pub(crate) use graph::dice_sums;

use crate::error::{Error, Result};

/// Row-major dense tensor of 64-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {shape:?} holds {numel} values but {} were given",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
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

    /// Same buffer viewed under a new shape with the same element count.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks equally-shaped tensors along a new leading batch axis.
    pub fn stack(items: &[&Tensor]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot stack zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    left: first.shape.clone(),
                    right: t.shape.clone(),
                });
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = Vec::with_capacity(first.rank() + 1);
        shape.push(items.len());
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data })
    }

    /// Returns item `index` along the leading axis.
    pub fn index_batch(&self, index: usize) -> Self {
        let inner: usize = self.shape[1..].iter().product();
        Self {
            shape: self.shape[1..].to_vec(),
            data: self.data[index * inner..(index + 1) * inner].to_vec(),
        }
    }
}
