//! Dense row-major f32 tensors with shape metadata.
//!
//! `TensorRec` is the single value carrier of the engine: weights,
//! activations, gradients and dataset batches all use it. Storage is a flat
//! `Vec<f32>` in row-major order; the shape is a list of positive dimension
//! sizes whose product equals the data length.

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRec {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl TensorRec {
    /// Tensor filled with zeros.
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        TensorRec {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    /// Build from raw parts, checking that the element count matches the shape.
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let want: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(CoreError::InvalidGraph(format!(
                "zero-sized dimension in shape {shape:?}"
            )));
        }
        if want != data.len() {
            return Err(CoreError::InvalidGraph(format!(
                "shape {shape:?} wants {want} values, got {}",
                data.len()
            )));
        }
        Ok(TensorRec {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Reinterpret as a new shape with the same element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        Self::from_vec(shape, self.data.clone())
    }

    /// Dimension size along `axis`.
    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Error if any stored value is NaN or infinite.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(CoreError::NonFinite {
                context: context.to_string(),
            })
        }
    }

    /// Sum of absolute values over a contiguous row-major slice of leading
    /// index `i` (e.g. one conv filter out of `[N, C, K, K]`).
    pub fn slab_abs_sum(&self, i: usize) -> f64 {
        let stride = self.len() / self.shape[0];
        self.data[i * stride..(i + 1) * stride]
            .iter()
            .map(|v| v.abs() as f64)
            .sum()
    }

    /// Contiguous view of leading index `i`.
    pub fn slab(&self, i: usize) -> &[f32] {
        let stride = self.len() / self.shape[0];
        &self.data[i * stride..(i + 1) * stride]
    }

    pub fn slab_mut(&mut self, i: usize) -> &mut [f32] {
        let stride = self.len() / self.shape[0];
        &mut self.data[i * stride..(i + 1) * stride]
    }

    /// Keep only the leading-axis slabs whose index is in `keep` (in order).
    pub fn select_axis0(&self, keep: &[usize]) -> TensorRec {
        let stride = self.len() / self.shape[0];
        let mut data = Vec::with_capacity(keep.len() * stride);
        for &i in keep {
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = keep.len();
        TensorRec { shape, data }
    }

    /// Keep only axis-1 slices whose index is in `keep` (in order).
    /// Used to drop input channels of `[N, C, K, K]` conv weights and
    /// columns of `[out, in]` linear weights.
    pub fn select_axis1(&self, keep: &[usize]) -> TensorRec {
        let n = self.shape[0];
        let c = self.shape[1];
        let inner: usize = self.shape[2..].iter().product();
        let mut data = Vec::with_capacity(n * keep.len() * inner);
        for i in 0..n {
            let row = &self.data[i * c * inner..(i + 1) * c * inner];
            for &j in keep {
                data.extend_from_slice(&row[j * inner..(j + 1) * inner]);
            }
        }
        let mut shape = self.shape.clone();
        shape[1] = keep.len();
        TensorRec { shape, data }
    }
}
