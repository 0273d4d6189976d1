//! Labelled datasets with train / test / holdout split tags.

mod idx;
mod synthetic;
mod transform;

pub use idx::{load_idx, read_idx_images, read_idx_labels};
pub use synthetic::{make_synthetic, SyntheticKind, SyntheticSpec};
pub use transform::{augment, flip_horizontal, unwhiten, whiten, Whitening};

use serde::{Deserialize, Serialize};

use crate::batch::Batch;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    Holdout,
}

/// Channel-major image layout of each input row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
    pub num_classes: usize,
    pub image: Option<ImageShape>,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, splits: Vec<Split>, num_classes: usize, image: Option<ImageShape>) -> Result<Self> {
        let n = labels.len();
        if inputs.shape().len() != 2 || inputs.rows() != n || splits.len() != n {
            return Err(Error::Dataset(format!(
                "inputs {:?}, {} labels, {} split tags",
                inputs.shape(),
                n,
                splits.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange { label, classes: num_classes });
        }
        if let Some(img) = image {
            if img.len() != inputs.cols() {
                return Err(Error::Dataset(format!("image shape {img:?} does not match {} features", inputs.cols())));
            }
        }
        if inputs.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Dataset("inputs must lie in [0, 1]".into()));
        }
        Ok(Self { inputs, labels, splits, num_classes, image })
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

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn split(&self, split: Split) -> Batch {
        let idx = self.indices(split);
        Batch { inputs: self.inputs.gather_rows(&idx), labels: idx.iter().map(|&i| self.labels[i]).collect() }
    }

    /// Re-tags the last `count` train examples as test.
    pub fn split_off_test(mut self, count: usize) -> Result<Self> {
        let train = self.indices(Split::Train);
        if count > train.len() {
            return Err(Error::Dataset(format!("cannot take {count} test examples from {} train", train.len())));
        }
        for &i in &train[train.len() - count..] {
            self.splits[i] = Split::Test;
        }
        Ok(self)
    }

    /// Re-tags the last `count` test examples as holdout.
    pub fn with_holdout(mut self, count: usize) -> Result<Self> {
        let test = self.indices(Split::Test);
        if count >= test.len() && count > 0 {
            return Err(Error::Dataset(format!("holdout of {count} leaves no test examples (have {})", test.len())));
        }
        for &i in &test[test.len() - count..] {
            self.splits[i] = Split::Holdout;
        }
        Ok(self)
    }

    /// Concatenates a train and a test set.
    pub fn from_splits(train: &Batch, test: &Batch, num_classes: usize, image: Option<ImageShape>) -> Result<Self> {
        if train.dim() != test.dim() {
            return Err(Error::Dataset("train and test dimensions differ".into()));
        }
        let mut data = train.inputs.data().to_vec();
        data.extend_from_slice(test.inputs.data());
        let mut labels = train.labels.clone();
        labels.extend_from_slice(&test.labels);
        let mut splits = vec![Split::Train; train.len()];
        splits.extend(std::iter::repeat_n(Split::Test, test.len()));
        Self::new(Tensor::matrix(labels.len(), train.dim(), data)?, labels, splits, num_classes, image)
    }
}
