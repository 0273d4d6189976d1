//! Experiment configuration files (TOML).
//!
//! ```toml
//! seed = 7
//!
//! [model]
//! hidden = [64]
//! activation = "relu"
//! batchnorm = false
//! whiten = false
//!
//! [data]
//! source = "synthetic"
//! kind = "gaussians"
//! n_train = 256
//! n_test = 256
//! dim = 16
//! classes = 4
//!
//! [train]
//! epochs = 50
//! batch_size = 32
//! base_lr = 0.05
//! schedule = { kind = "multi_step", milestones = [20, 30, 40] }
//! attack = { epsilon = 0.1, steps = 7, step_size = 0.025 }
//! early_stop = { holdout_size = 64 }
//!
//! [flatness.average]
//! # any FlatnessConfig; the CLI selects a preset by name
//! ```
//!
//! Unknown keys are rejected everywhere.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::AttackConfig;
use crate::data::{self, Dataset, SyntheticKind, SyntheticSpec};
use crate::error::{Error, Result};
use crate::flatness::FlatnessConfig;
use crate::nn::{Activation, NetworkSpec};
use crate::rng;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Batch norm after every dense layer, including the output layer.
    #[serde(default)]
    pub batchnorm: bool,
    /// Standardize inputs with train-split statistics inside the network.
    #[serde(default)]
    pub whiten: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Synthetic {
        kind: SyntheticKind,
        n_train: usize,
        n_test: usize,
        dim: usize,
        classes: usize,
        #[serde(default = "default_margin")]
        margin: f64,
        #[serde(default = "default_noise")]
        noise: f64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        /// Use only the first `limit` examples of each file.
        #[serde(default)]
        limit: Option<usize>,
    },
}

fn default_margin() -> f64 {
    0.5
}

fn default_noise() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub flatness: BTreeMap<String, FlatnessConfig>,
    #[serde(default)]
    pub attacks: BTreeMap<String, AttackConfig>,
}

const TAG_DATA: u64 = 21;

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        for f in self.flatness.values() {
            f.validate()?;
        }
        for a in self.attacks.values() {
            a.validate()?;
        }
        if self.model.hidden.contains(&0) {
            return Err(Error::Config("hidden layer widths must be >= 1".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML serialization.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    /// Flatness settings by preset name: a `[flatness.<name>]` table, or one of
    /// the built-in presets at the training epsilon.
    pub fn flatness_preset(&self, name: &str) -> Result<FlatnessConfig> {
        match self.flatness.get(name) {
            Some(f) => Ok(*f),
            None => FlatnessConfig::preset(name, self.train.attack.epsilon),
        }
    }

    /// The dataset with train / test split tags (holdout is carved by training).
    pub fn dataset(&self) -> Result<Dataset> {
        match &self.data {
            DataConfig::Synthetic { kind, n_train, n_test, dim, classes, margin, noise } => {
                let spec = SyntheticSpec {
                    kind: *kind,
                    n: n_train + n_test,
                    dim: *dim,
                    classes: *classes,
                    margin: *margin,
                    noise: *noise,
                };
                data::make_synthetic(&spec, &mut rng::stream(self.seed, TAG_DATA, 0))?.split_off_test(*n_test)
            }
            DataConfig::Idx { train_images, train_labels, test_images, test_labels, limit } => {
                let cut = |b: crate::batch::Batch| match limit {
                    Some(n) => b.slice(0, *n),
                    None => b,
                };
                let train = data::load_idx(train_images, train_labels)?;
                let test = data::load_idx(test_images, test_labels)?;
                if train.image != test.image {
                    return Err(Error::Dataset("train and test images differ in shape".into()));
                }
                let classes = train.num_classes.max(test.num_classes);
                Dataset::from_splits(&cut(train.split(data::Split::Train)), &cut(test.split(data::Split::Train)), classes, train.image)
            }
        }
    }

    /// The network for `data`, with input standardization when `whiten` is set.
    pub fn network_spec(&self, data: &Dataset) -> Result<NetworkSpec> {
        let mut widths = vec![data.dim()];
        widths.extend(&self.model.hidden);
        widths.push(data.num_classes);
        let mut spec = if self.model.batchnorm {
            NetworkSpec::mlp_batchnorm(&widths, self.model.activation)
        } else {
            NetworkSpec::mlp(&widths, self.model.activation)
        };
        if self.model.whiten {
            let (_, stats) = data::whiten(data)?;
            spec.input_norm = Some(stats.input_norm());
        }
        spec.validate()?;
        Ok(spec)
    }
}
