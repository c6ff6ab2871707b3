//! Flat row-major `f64` storage with an optional gradient buffer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense array of 64-bit floats with a lazily allocated gradient of the same shape.
/// Equality and serialization cover shape and values only.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DenseArray {
    shape: Vec<usize>,
    values: Vec<f64>,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
}

impl PartialEq for DenseArray {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.values == other.values
    }
}

impl DenseArray {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: vec![0.0; len],
            grad: None,
        }
    }

    pub fn from_vec(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != values.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                len,
                values.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            values,
            grad: None,
        })
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Self {
            shape: vec![values.len()],
            values,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of rows (first dimension), or 1 for scalars.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Elements per row.
    pub fn row_width(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.row_width();
        &self.values[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let w = self.row_width();
        &mut self.values[i * w..(i + 1) * w]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated as zeros on first access.
    pub fn grad_mut(&mut self) -> &mut [f64] {
        let len = self.values.len();
        self.grad.get_or_insert_with(|| vec![0.0; len])
    }

    pub fn has_grad(&self) -> bool {
        self.grad.is_some()
    }

    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.values.len() {
            return Err(Error::Dimension(format!(
                "gradient of length {} for array of length {}",
                g.len(),
                self.values.len()
            )));
        }
        for (dst, src) in self.grad_mut().iter_mut().zip(g) {
            *dst += src;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
            && self
                .grad
                .as_ref()
                .is_none_or(|g| g.iter().all(|v| v.is_finite()))
    }

    pub fn check_finite(&self, what: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what))
        }
    }

    /// Builds a new array from rows of `self`; `None` sources become zero rows.
    /// Gradients are not carried over.
    pub fn gather_rows(&self, sources: &[Option<usize>]) -> Self {
        let w = self.row_width();
        let mut values = Vec::with_capacity(sources.len() * w);
        for src in sources {
            match src {
                Some(i) => values.extend_from_slice(self.row(*i)),
                None => values.extend(std::iter::repeat_n(0.0, w)),
            }
        }
        let mut shape = self.shape.clone();
        if shape.is_empty() {
            shape.push(sources.len());
        } else {
            shape[0] = sources.len();
        }
        Self {
            shape,
            values,
            grad: None,
        }
    }

    /// Appends rows; `row_values.len()` must be a multiple of the row width.
    pub fn push_rows(&mut self, row_values: &[f64]) -> Result<()> {
        let w = self.row_width().max(1);
        if !row_values.len().is_multiple_of(w) {
            return Err(Error::Dimension(format!(
                "cannot append {} values to rows of width {}",
                row_values.len(),
                w
            )));
        }
        self.values.extend_from_slice(row_values);
        if self.shape.is_empty() {
            self.shape.push(self.values.len());
        } else {
            self.shape[0] += row_values.len() / w;
        }
        if let Some(g) = self.grad.as_mut() {
            g.extend(std::iter::repeat_n(0.0, row_values.len()));
        }
        Ok(())
    }
}
