use rand::Rng;
use serde::{Deserialize, Serialize};
use tracing::warn;

use super::{Dataset, ImageShape, Split};
use crate::batch::Batch;
use crate::error::{Error, Result};
use crate::nn::InputNorm;
use crate::tensor::Tensor;

/// Per-channel mean and standard deviation of the train split. Vector data has
/// one channel per feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Whitening {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Features per channel.
    pub channel_len: usize,
}

impl Whitening {
    /// The same transform expressed per input feature, for a network's input layer.
    pub fn input_norm(&self) -> InputNorm {
        let expand = |v: &[f64]| v.iter().flat_map(|&x| std::iter::repeat_n(x, self.channel_len)).collect();
        InputNorm { mean: expand(&self.mean), std: expand(&self.std) }
    }

    fn channel(&self, feature: usize) -> usize {
        feature / self.channel_len
    }
}

fn channels(data: &Dataset) -> (usize, usize) {
    match data.image {
        Some(ImageShape { channels, height, width }) => (channels, height * width),
        None => (data.dim(), 1),
    }
}

/// Standardizes every channel with statistics of the train split. Channels with
/// zero spread get std 1.
pub fn whiten(data: &Dataset) -> Result<(Tensor, Whitening)> {
    let train = data.indices(Split::Train);
    if train.is_empty() {
        return Err(Error::Dataset("whitening needs a non-empty train split".into()));
    }
    let (nc, clen) = channels(data);
    let mut mean = vec![0.0; nc];
    let mut sq = vec![0.0; nc];
    let count = (train.len() * clen) as f64;
    for &i in &train {
        for (f, &v) in data.inputs.row(i).iter().enumerate() {
            mean[f / clen] += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for &i in &train {
        for (f, &v) in data.inputs.row(i).iter().enumerate() {
            sq[f / clen] += (v - mean[f / clen]).powi(2);
        }
    }
    let std: Vec<f64> = sq
        .iter()
        .enumerate()
        .map(|(c, s)| {
            let sd = (s / count).sqrt();
            if sd > 0.0 {
                sd
            } else {
                warn!(channel = c, "constant channel; std clamped to 1");
                1.0
            }
        })
        .collect();
    let stats = Whitening { mean, std, channel_len: clen };
    let out = data.inputs.map_indexed(|f, v| (v - stats.mean[stats.channel(f)]) / stats.std[stats.channel(f)]);
    Ok((out, stats))
}

pub fn unwhiten(inputs: &Tensor, stats: &Whitening) -> Tensor {
    inputs.map_indexed(|f, v| v * stats.std[stats.channel(f)] + stats.mean[stats.channel(f)])
}

/// Mirrors one image row left to right.
pub fn flip_horizontal(row: &mut [f64], shape: &ImageShape) {
    for c in 0..shape.channels {
        for y in 0..shape.height {
            let start = (c * shape.height + y) * shape.width;
            row[start..start + shape.width].reverse();
        }
    }
}

/// Random horizontal flip (probability 1/2) and random shift with zero padding
/// by up to `width / 8` pixels per side (4 pixels at width 32).
pub fn augment(batch: &Batch, shape: &ImageShape, rng: &mut impl Rng) -> Batch {
    let pad = (shape.width.max(shape.height) / 8).max(1) as i64;
    let mut inputs = batch.inputs.clone();
    for r in 0..inputs.rows() {
        let flip: bool = rng.random();
        let dy = rng.random_range(-pad..=pad) as isize;
        let dx = rng.random_range(-pad..=pad) as isize;
        let row = inputs.row_mut(r);
        if flip {
            flip_horizontal(row, shape);
        }
        let src = row.to_vec();
        let (h, w) = (shape.height as isize, shape.width as isize);
        for c in 0..shape.channels {
            let base = c * shape.height * shape.width;
            for y in 0..h {
                for x in 0..w {
                    let (sy, sx) = (y + dy, x + dx);
                    let v = if (0..h).contains(&sy) && (0..w).contains(&sx) {
                        src[base + (sy * w + sx) as usize]
                    } else {
                        0.0
                    };
                    row[base + (y * w + x) as usize] = v;
                }
            }
        }
    }
    batch.with_inputs(inputs)
}
