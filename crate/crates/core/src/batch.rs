use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Inputs in `[0, 1]^D` (one row per example) with integer labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        if inputs.shape().len() < 2 || inputs.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "inputs {:?} vs {} labels",
                inputs.shape(),
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn select(&self, idx: &[usize]) -> Batch {
        Batch {
            inputs: self.inputs.gather_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Examples `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> Batch {
        let idx: Vec<usize> = (start..end.min(self.len())).collect();
        self.select(&idx)
    }

    /// Consecutive chunks of at most `size` examples.
    pub fn chunks(&self, size: usize) -> Vec<Batch> {
        let size = size.max(1);
        (0..self.len()).step_by(size).map(|s| self.slice(s, s + size)).collect()
    }

    pub fn with_inputs(&self, inputs: Tensor) -> Batch {
        Batch { inputs, labels: self.labels.clone() }
    }
}
