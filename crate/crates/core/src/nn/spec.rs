use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::activation::Activation;

/// Architecture of a feed-forward network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub layers: Vec<LayerSpec>,
    /// Added to the variance in batch normalization.
    #[serde(default = "default_bn_eps")]
    pub bn_eps: f64,
    /// Weight of the newest batch statistics in the running averages.
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
    /// Fixed per-feature standardization applied before the first layer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_norm: Option<InputNorm>,
}

fn default_bn_eps() -> f64 {
    1e-14
}

fn default_bn_momentum() -> f64 {
    0.1
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
        #[serde(default = "default_true")]
        bias: bool,
    },
    BatchNorm {
        features: usize,
    },
    Activation {
        function: Activation,
    },
    Flatten,
}

/// `x' = (x - mean) / std`, per input feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NetworkSpec {
    /// Dense layers of the given widths with `activation` between them.
    pub fn mlp(widths: &[usize], activation: Activation) -> Self {
        Self::build(widths, activation, false, false)
    }

    /// Like [`NetworkSpec::mlp`] but every dense layer, including the last, is
    /// followed by batch normalization, so every weight layer is scale-free.
    pub fn mlp_batchnorm(widths: &[usize], activation: Activation) -> Self {
        Self::build(widths, activation, true, true)
    }

    fn build(widths: &[usize], activation: Activation, bn: bool, bn_last: bool) -> Self {
        assert!(widths.len() >= 2, "need input and output widths");
        let mut layers = Vec::new();
        let last = widths.len() - 2;
        for (i, pair) in widths.windows(2).enumerate() {
            layers.push(LayerSpec::Dense { inputs: pair[0], outputs: pair[1], bias: true });
            if bn && (i < last || bn_last) {
                layers.push(LayerSpec::BatchNorm { features: pair[1] });
            }
            if i < last {
                layers.push(LayerSpec::Activation { function: activation });
            }
        }
        Self {
            input_dim: widths[0],
            layers,
            bn_eps: default_bn_eps(),
            bn_momentum: default_bn_momentum(),
            input_norm: None,
        }
    }

    /// Checks dimension compatibility and returns the output width.
    pub fn validate(&self) -> Result<usize> {
        if self.input_dim == 0 {
            return Err(Error::Config("network input_dim must be positive".into()));
        }
        if !(self.bn_eps >= 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("bn_eps must be >= 0 and bn_momentum in [0, 1]".into()));
        }
        if let Some(norm) = &self.input_norm {
            if norm.mean.len() != self.input_dim || norm.std.len() != self.input_dim {
                return Err(Error::Config("input_norm length must equal input_dim".into()));
            }
            if norm.std.iter().any(|s| !(*s > 0.0)) {
                return Err(Error::Config("input_norm std must be positive".into()));
            }
        }
        let mut width = self.input_dim;
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Dense { inputs, outputs, .. } => {
                    if inputs != width {
                        return Err(Error::Config(format!(
                            "layer {i}: dense expects {inputs} inputs but receives {width}"
                        )));
                    }
                    if outputs == 0 {
                        return Err(Error::Config(format!("layer {i}: dense with zero outputs")));
                    }
                    width = outputs;
                }
                LayerSpec::BatchNorm { features } => {
                    if features != width {
                        return Err(Error::Config(format!(
                            "layer {i}: batch_norm over {features} features but receives {width}"
                        )));
                    }
                }
                LayerSpec::Activation { .. } | LayerSpec::Flatten => {}
            }
        }
        Ok(width)
    }

    /// Whether layer `index` is immediately followed by batch normalization.
    pub fn followed_by_batchnorm(&self, index: usize) -> bool {
        matches!(self.layers.get(index + 1), Some(LayerSpec::BatchNorm { .. }))
    }

    pub fn has_batchnorm(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, LayerSpec::BatchNorm { .. }))
    }

    /// Indices of dense layers followed by batch normalization.
    pub fn batchnorm_followed_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(i, l)| matches!(l, LayerSpec::Dense { .. }) && self.followed_by_batchnorm(*i))
            .map(|(i, _)| i)
            .collect()
    }

    /// Stable fingerprint of the architecture, used to tie checkpoints to specs.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}
