use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// One isotropic Gaussian blob per class.
    Gaussians,
    /// Interleaved spiral arms in the first two coordinates.
    Spirals,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub n: usize,
    pub dim: usize,
    pub classes: usize,
    /// Minimum distance between class means (gaussians).
    #[serde(default = "default_margin")]
    pub margin: f64,
    /// Per-coordinate noise standard deviation.
    #[serde(default = "default_noise")]
    pub noise: f64,
}

fn default_margin() -> f64 {
    0.5
}

fn default_noise() -> f64 {
    0.1
}

const MEAN_ATTEMPTS: usize = 10_000;

/// Draws a balanced, seeded synthetic dataset; every example is tagged train.
pub fn make_synthetic(spec: &SyntheticSpec, rng: &mut impl Rng) -> Result<Dataset> {
    let SyntheticSpec { kind, n, dim, classes, margin, noise } = *spec;
    if n == 0 || dim == 0 || classes == 0 {
        return Err(Error::Dataset(format!("synthetic data needs n, dim, classes >= 1 (got {n}, {dim}, {classes})")));
    }
    if !(noise >= 0.0) || !(margin >= 0.0) {
        return Err(Error::Dataset("noise and margin must be >= 0".into()));
    }
    let normal = Normal::new(0.0, noise).map_err(|e| Error::Dataset(e.to_string()))?;
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(rng);
    let mut data = Vec::with_capacity(n * dim);
    match kind {
        SyntheticKind::Gaussians => {
            let means = class_means(classes, dim, margin, rng)?;
            for &y in &labels {
                data.extend(means[y].iter().map(|m| (m + normal.sample(rng)).clamp(0.0, 1.0)));
            }
        }
        SyntheticKind::Spirals => {
            if dim < 2 {
                return Err(Error::Dataset("spirals need at least 2 dimensions".into()));
            }
            for &y in &labels {
                let t: f64 = rng.random();
                let angle = std::f64::consts::TAU * (y as f64 / classes as f64 + 1.25 * t);
                let r = 0.05 + 0.4 * t;
                data.push((0.5 + r * angle.cos() + normal.sample(rng)).clamp(0.0, 1.0));
                data.push((0.5 + r * angle.sin() + normal.sample(rng)).clamp(0.0, 1.0));
                data.extend((2..dim).map(|_| (0.5 + normal.sample(rng)).clamp(0.0, 1.0)));
            }
        }
    }
    Dataset::new(Tensor::matrix(n, dim, data)?, labels, vec![Split::Train; n], classes, None)
}

/// Class means in `[0.2, 0.8]^dim`, pairwise at least `margin` apart.
fn class_means(classes: usize, dim: usize, margin: f64, rng: &mut impl Rng) -> Result<Vec<Vec<f64>>> {
    let diameter = 0.6 * (dim as f64).sqrt();
    if classes > 1 && margin > diameter {
        return Err(Error::Dataset(format!(
            "{classes} classes with margin {margin} do not fit in {dim} dimensions (max distance {diameter:.3})"
        )));
    }
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(classes);
    let mut attempts = 0;
    while means.len() < classes {
        attempts += 1;
        if attempts > MEAN_ATTEMPTS {
            return Err(Error::Dataset(format!("could not place {classes} classes {margin} apart in {dim} dimensions")));
        }
        let m: Vec<f64> = (0..dim).map(|_| rng.random_range(0.2..=0.8)).collect();
        let ok = means.iter().all(|o| {
            let d2: f64 = o.iter().zip(&m).map(|(a, b)| (a - b) * (a - b)).sum();
            d2.sqrt() >= margin
        });
        if ok {
            means.push(m);
        }
    }
    Ok(means)
}
