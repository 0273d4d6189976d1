//! One-dimensional slices `s -> loss(w + s * length * d)` along normalized
//! directions `d`. Every point reuses the per-batch attack seeds of the
//! reference, so the row at `s = 0` is the reference loss.

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{joint_ascent, mean_increase, reference, FlatnessConfig, Landscape, Seeds};
use crate::error::{Error, Result};
use crate::geometry::{self, Granularity};
use crate::hessian::{self, GradientSource, PowerConfig};
use crate::nn::{Direction, ParamVector};
use crate::rng;
use crate::tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionKind {
    Random,
    Adversarial,
    HessianTop,
}

impl DirectionKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Random => "random",
            Self::Adversarial => "adversarial",
            Self::HessianTop => "hessian_top",
        }
    }

    pub fn default_length(self) -> f64 {
        match self {
            Self::Random | Self::HessianTop => 0.5,
            Self::Adversarial => 0.025,
        }
    }

    fn aggregate(self) -> &'static str {
        match self {
            Self::Random => "mean",
            Self::Adversarial => "max",
            Self::HessianTop => "single",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileConfig {
    pub kind: DirectionKind,
    pub s_grid: Vec<f64>,
    /// Number of directions aggregated (ignored for `hessian_top`).
    pub directions: usize,
    pub length: f64,
    pub granularity: Granularity,
    /// Attack for the loss at each point, and ball / joint-ascent settings for
    /// adversarial directions.
    pub flatness: FlatnessConfig,
    pub power: PowerConfig,
}

impl ProfileConfig {
    pub fn new(kind: DirectionKind, flatness: FlatnessConfig) -> Self {
        Self {
            kind,
            s_grid: default_grid(51),
            directions: 10,
            length: kind.default_length(),
            granularity: Granularity::PerLayer,
            flatness,
            power: PowerConfig::default(),
        }
    }
}

/// `steps` evenly spaced points in `[-1, 1]`.
pub fn default_grid(steps: usize) -> Vec<f64> {
    match steps {
        0 => vec![],
        1 => vec![0.0],
        n => (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub s: f64,
    pub loss: f64,
    pub direction_kind: DirectionKind,
    pub aggregate: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub reference_loss: f64,
    pub rows: Vec<ProfileRow>,
}

impl Profile {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("s,loss,direction_kind,aggregate\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.s, r.loss, r.direction_kind.name(), r.aggregate));
        }
        out
    }
}

const TAG_DIRECTION: u64 = 3;

fn random_direction(weights: &ParamVector, granularity: Granularity, rng: &mut impl rand::Rng) -> Result<Direction> {
    let mut d = weights.zeros_direction();
    for (p, e) in d.parts_mut().iter_mut().zip(weights.entries()) {
        if !e.role.is_batchnorm() {
            for x in p.data_mut() {
                *x = StandardNormal.sample(rng);
            }
        }
    }
    geometry::normalize(&d, weights, granularity)
}

fn directions<L: Landscape + GradientSource + ?Sized>(
    land: &L,
    weights: &ParamVector,
    cfg: &ProfileConfig,
    seeds: &Seeds,
) -> Result<Vec<Direction>> {
    let nb = land.num_batches();
    match cfg.kind {
        DirectionKind::Random => (0..cfg.directions)
            .map(|k| random_direction(weights, cfg.granularity, &mut rng::stream(seeds.base, TAG_DIRECTION, k as u64)))
            .collect(),
        DirectionKind::Adversarial => (0..cfg.directions)
            .into_par_iter()
            .map(|k| {
                let b = k % nb;
                let start = geometry::sample_in_ball(weights, &cfg.flatness.ball, &mut seeds.nu(b, k));
                let (nu, _) = joint_ascent(land, weights, &cfg.flatness, b, seeds.attack[b], k, start)?;
                geometry::normalize_or_zero(&nu, weights, cfg.granularity)
            })
            .collect(),
        DirectionKind::HessianTop => {
            let mut r = rng::stream(seeds.base, TAG_DIRECTION, 0);
            let top = hessian::max_eigenvalue(land, weights, &cfg.power, &mut r)?;
            Ok(vec![geometry::normalize(&top.vector, weights, cfg.granularity)?])
        }
    }
}

/// Loss along `cfg.kind` directions at each `s` in the grid, aggregated over
/// directions by mean (random), max (adversarial), or a single direction.
pub fn landscape_profile<L: Landscape + GradientSource + ?Sized>(
    land: &L,
    weights: &ParamVector,
    cfg: &ProfileConfig,
    rng: &mut impl RngCore,
) -> Result<Profile> {
    if cfg.s_grid.is_empty() {
        return Err(Error::Config("profile grid is empty".into()));
    }
    if cfg.directions == 0 && cfg.kind != DirectionKind::HessianTop {
        return Err(Error::Config("profile needs at least one direction".into()));
    }
    cfg.flatness.validate()?;
    let nb = land.num_batches();
    let seeds = Seeds::new(rng::fork(rng), nb);
    let reference = reference(land, weights, &seeds)?;
    let dirs = directions(land, weights, cfg, &seeds)?;
    let nd = dirs.len();
    let points: Vec<(usize, usize)> =
        (0..cfg.s_grid.len()).flat_map(|i| (0..nd).map(move |k| (i, k))).collect();
    let increases: Vec<f64> = points
        .par_iter()
        .map(|&(i, k)| {
            let at = weights.perturbed(&dirs[k], cfg.s_grid[i] * cfg.length)?;
            let losses = (0..nb).map(|b| land.inner_max(&at, b, seeds.attack[b])).collect::<Result<Vec<_>>>()?;
            Ok(mean_increase(&losses, &reference))
        })
        .collect::<Result<_>>()?;
    let rows = cfg
        .s_grid
        .iter()
        .zip(increases.chunks(nd))
        .map(|(&s, inc)| {
            let agg = match cfg.kind {
                DirectionKind::Random => tensor::mean(inc),
                _ => inc.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            };
            ProfileRow { s, loss: reference.mean + agg, direction_kind: cfg.kind, aggregate: cfg.kind.aggregate().into() }
        })
        .collect();
    Ok(Profile { reference_loss: reference.mean, rows })
}
