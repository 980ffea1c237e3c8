//! Dense row-major f64 tensor.
//!
//! Values are immutable once built; clones share the buffer. That keeps
//! taped graphs cheap to construct: every node stores its forward value
//! without copying.

use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<[f64]>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", &self.data[..])
        } else {
            write!(f, " [{}, {}, ...]", self.data[0], self.data[1])
        }
    }
}

impl Tensor {
    /// Builds a tensor from a shape and matching data. Every dimension must
    /// be positive and the data length must equal the shape's product.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Usage(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Usage(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: data.into(),
        })
    }

    pub fn scalar(x: f64) -> Tensor {
        Tensor {
            shape: vec![1],
            data: vec![x].into(),
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Tensor> {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_vector(&self) -> bool {
        self.shape.len() == 1
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Rows of a matrix, or 1 for a vector treated as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[0],
        }
    }

    /// Row `i` of a (rows, cols) matrix as a slice.
    pub fn row(&self, i: usize) -> Result<&[f64]> {
        if self.shape.len() != 2 {
            return Err(Error::Usage(format!(
                "row() on tensor of shape {:?}",
                self.shape
            )));
        }
        let cols = self.shape[1];
        if i >= self.shape[0] {
            return Err(Error::Usage(format!(
                "row {i} out of bounds for shape {:?}",
                self.shape
            )));
        }
        Ok(&self.data[i * cols..(i + 1) * cols])
    }

    /// A copy with one element replaced; used by the finite-difference probe.
    pub fn with_element(&self, idx: usize, value: f64) -> Result<Tensor> {
        if idx >= self.numel() {
            return Err(Error::Usage(format!(
                "element {idx} out of bounds for shape {:?}",
                self.shape
            )));
        }
        let mut data = self.data.to_vec();
        data[idx] = value;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: data.into(),
        })
    }
}
