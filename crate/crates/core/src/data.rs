//! In-memory labeled image datasets and deterministic batching.

use crate::error::{CoreError, Result};
use crate::tensor::TensorRec;

#[derive(Debug, Clone)]
pub struct Dataset {
    /// `[n, C, H, W]` images.
    pub images: TensorRec,
    pub labels: Vec<u32>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: TensorRec, labels: Vec<u32>, classes: usize) -> Result<Self> {
        if images.rank() != 4 {
            return Err(CoreError::InvalidTraining(format!(
                "dataset images must be [n, c, h, w], got {:?}",
                images.shape()
            )));
        }
        if images.dim(0) != labels.len() {
            return Err(CoreError::InvalidTraining(format!(
                "{} images but {} labels",
                images.dim(0),
                labels.len()
            )));
        }
        for &l in &labels {
            if l as usize >= classes {
                return Err(CoreError::LabelOutOfRange { label: l, classes });
            }
        }
        Ok(Dataset {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> (usize, usize, usize) {
        (self.images.dim(1), self.images.dim(2), self.images.dim(3))
    }

    /// Materialize the batch made of the given sample indices.
    pub fn gather(&self, indices: &[usize]) -> (TensorRec, Vec<u32>) {
        let (c, h, w) = self.sample_shape();
        let chw = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * chw);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * chw..(i + 1) * chw]);
            labels.push(self.labels[i]);
        }
        (
            TensorRec::from_vec(&[indices.len(), c, h, w], data).expect("consistent shape"),
            labels,
        )
    }
}
