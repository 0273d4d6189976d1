//! Network parameters partitioned into layers, and weight-space directions.
//!
//! Weights and biases are separate entries. Batch-norm parameters are part of
//! the partition but flagged, so geometry operations can skip them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Weight,
    Bias,
    BnGamma,
    BnBeta,
    BnRunningMean,
    BnRunningVar,
}

impl Role {
    pub fn is_batchnorm(self) -> bool {
        !matches!(self, Role::Weight | Role::Bias)
    }

    /// Updated by gradient steps (running statistics are not).
    pub fn is_trainable(self) -> bool {
        !matches!(self, Role::BnRunningMean | Role::BnRunningVar)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    /// Index of the owning layer in the network spec.
    pub layer: usize,
    pub role: Role,
    pub value: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    entries: Vec<ParamEntry>,
}

impl ParamVector {
    pub fn new(entries: Vec<ParamEntry>) -> Self {
        Self { entries }
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn find(&self, layer: usize, role: Role) -> Option<usize> {
        self.entries.iter().position(|e| e.layer == layer && e.role == role)
    }

    /// L2 norm of every entry, in partition order.
    pub fn layer_norms(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.value.norm()).collect()
    }

    pub fn zeros_direction(&self) -> Direction {
        Direction::new(self.entries.iter().map(|e| Tensor::zeros(e.value.shape().to_vec())).collect())
    }

    pub fn check_layout(&self, dir: &Direction) -> Result<()> {
        if self.entries.len() != dir.parts.len() {
            return Err(Error::Partition(format!(
                "{} parameter entries vs {} direction entries",
                self.entries.len(),
                dir.parts.len()
            )));
        }
        for (i, (e, d)) in self.entries.iter().zip(&dir.parts).enumerate() {
            if e.value.shape() != d.shape() {
                return Err(Error::Partition(format!(
                    "entry {i}: shape {:?} vs {:?}",
                    e.value.shape(),
                    d.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.layer == b.layer && a.role == b.role && a.value.shape() == b.value.shape())
    }

    /// `self + s * dir` on non-batch-norm entries; batch-norm entries are copied.
    pub fn perturbed(&self, dir: &Direction, s: f64) -> Result<ParamVector> {
        self.check_layout(dir)?;
        let mut out = self.clone();
        for (e, d) in out.entries.iter_mut().zip(&dir.parts) {
            if !e.role.is_batchnorm() {
                e.value.axpy(s, d);
            }
        }
        Ok(out)
    }

    /// Flattened view of the values of every entry, in order.
    pub fn flat(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|e| e.value.data().iter().copied()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.is_finite())
    }
}

/// A displacement in weight space with the same partition as a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Direction {
    parts: Vec<Tensor>,
}

impl Direction {
    pub fn new(parts: Vec<Tensor>) -> Self {
        Self { parts }
    }

    pub fn parts(&self) -> &[Tensor] {
        &self.parts
    }

    pub fn parts_mut(&mut self) -> &mut [Tensor] {
        &mut self.parts
    }

    pub fn into_parts(self) -> Vec<Tensor> {
        self.parts
    }

    pub fn len(&self) -> usize {
        self.parts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }

    pub fn dot(&self, other: &Direction) -> f64 {
        self.parts.iter().zip(&other.parts).map(|(a, b)| tensor::dot(a.data(), b.data())).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        self.parts.iter_mut().for_each(|p| p.scale(s));
    }

    pub fn scaled(&self, s: f64) -> Direction {
        let mut out = self.clone();
        out.scale(s);
        out
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: f64, other: &Direction) {
        for (a, b) in self.parts.iter_mut().zip(&other.parts) {
            a.axpy(s, b);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.parts.iter().all(|p| p.is_finite())
    }

    /// Zeroes every entry that is a batch-norm parameter in `reference`.
    pub fn mask_batchnorm(&mut self, reference: &ParamVector) {
        for (p, e) in self.parts.iter_mut().zip(reference.entries()) {
            if e.role.is_batchnorm() {
                p.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.parts.iter().flat_map(|p| p.data().iter().copied()).collect()
    }
}
