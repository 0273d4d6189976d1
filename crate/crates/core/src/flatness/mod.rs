//! Flatness of the (robust) loss landscape in the relative weight ball
//! `B_xi(w)`.
//!
//! Average case: mean over random `nu` in the ball of the inner-maximized loss
//! at `w + nu`, minus the same quantity at `w`. Worst case: maximum over joint
//! gradient ascent on `nu` and the inputs. Both are reported in loss units.
//!
//! Randomness: one base seed is drawn from the caller's rng. Batch `b` gets one
//! attack seed that every evaluation on `b` reuses (so `xi = 0` is exactly 0),
//! and weight sample `i` on batch `b` gets its own stream. Worst-case restart
//! `r` starts from average-case sample `r`.

mod landscape;
pub mod profile;

pub use landscape::{Evaluation, Landscape, NetworkObjective, QuadraticBowl};
pub use profile::{landscape_profile, DirectionKind, Profile, ProfileConfig, ProfileRow};

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::attacks::AttackConfig;
use crate::batch::Batch;
use crate::error::{Error, Result};
use crate::geometry::{self, BallSpec};
use crate::nn::{Direction, Network, ParamVector};
use crate::rng;
use crate::tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlatnessMode {
    Average,
    Worst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Robust,
    Clean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlatnessConfig {
    pub ball: BallSpec,
    pub mode: FlatnessMode,
    pub loss_kind: LossKind,
    /// Weight samples (average) or restarts (worst).
    pub samples: usize,
    /// Joint ascent iterations; match `attack.steps` so that `xi = 0` retraces
    /// the reference attack.
    #[serde(default = "default_joint_steps")]
    pub joint_steps: usize,
    /// Weight step per iteration, relative to each layer's norm.
    #[serde(default = "default_nu_step")]
    pub nu_step_size: f64,
    pub attack: AttackConfig,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
}

fn default_joint_steps() -> usize {
    20
}

fn default_nu_step() -> f64 {
    0.001
}

fn default_batch_size() -> usize {
    128
}

impl FlatnessConfig {
    /// Ten random samples with `xi = 0.5`.
    pub fn average(epsilon: f64) -> Self {
        Self {
            ball: BallSpec::per_layer(0.5),
            mode: FlatnessMode::Average,
            loss_kind: LossKind::Robust,
            samples: 10,
            joint_steps: 20,
            nu_step_size: 0.001,
            attack: AttackConfig::evaluation(epsilon),
            batch_size: default_batch_size(),
        }
    }

    /// Worst of ten joint-ascent restarts with `xi = 0.003`.
    pub fn worst(epsilon: f64) -> Self {
        Self { ball: BallSpec::per_layer(0.003), mode: FlatnessMode::Worst, ..Self::average(epsilon) }
    }

    /// As [`FlatnessConfig::worst`] with the smaller radius `xi = 0.00075`.
    pub fn worst_small(epsilon: f64) -> Self {
        Self { ball: BallSpec::per_layer(0.00075), ..Self::worst(epsilon) }
    }

    pub fn preset(name: &str, epsilon: f64) -> Result<Self> {
        match name {
            "average" => Ok(Self::average(epsilon)),
            "worst" => Ok(Self::worst(epsilon)),
            "worst_small" => Ok(Self::worst_small(epsilon)),
            other => Err(Error::Config(format!("unknown flatness preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ball.validate()?;
        self.attack.validate()?;
        if self.samples == 0 {
            return Err(Error::Config("flatness needs at least one sample".into()));
        }
        if self.mode == FlatnessMode::Worst && self.joint_steps == 0 {
            return Err(Error::Config("worst-case flatness needs joint_steps >= 1".into()));
        }
        if !(self.nu_step_size >= 0.0) || self.batch_size == 0 {
            return Err(Error::Config("nu_step_size must be >= 0 and batch_size >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatnessReport {
    pub mode: FlatnessMode,
    pub loss_kind: LossKind,
    pub xi: f64,
    pub value: f64,
    /// Population standard deviation of `per_sample`.
    pub std: f64,
    pub reference_loss: f64,
    /// Loss increase over the reference, one value per sample or restart.
    pub per_sample: Vec<f64>,
    pub config: FlatnessConfig,
}

const TAG_ATTACK: u64 = 1;
const TAG_NU: u64 = 2;

struct Seeds {
    base: u64,
    attack: Vec<u64>,
}

impl Seeds {
    fn new(base: u64, batches: usize) -> Self {
        let attack = (0..batches).map(|b| rng::stream(base, TAG_ATTACK, b as u64).next_u64()).collect();
        Self { base, attack }
    }

    fn nu(&self, batch: usize, sample: usize) -> rng::Rng {
        rng::stream(self.base, TAG_NU, ((batch as u64) << 32) | sample as u64)
    }
}

struct Reference {
    per_batch: Vec<Vec<f64>>,
    mean: f64,
}

fn reference<L: Landscape + ?Sized>(land: &L, weights: &ParamVector, seeds: &Seeds) -> Result<Reference> {
    let per_batch: Vec<Vec<f64>> = (0..land.num_batches())
        .into_par_iter()
        .map(|b| land.inner_max(weights, b, seeds.attack[b]))
        .collect::<Result<_>>()?;
    let all: Vec<f64> = per_batch.iter().flatten().copied().collect();
    if all.is_empty() {
        return Err(Error::Dataset("flatness needs at least one example".into()));
    }
    Ok(Reference { mean: tensor::mean(&all), per_batch })
}

/// Mean over all examples of `losses - reference`.
fn mean_increase(losses: &[Vec<f64>], reference: &Reference) -> f64 {
    let diffs: Vec<f64> = losses
        .iter()
        .zip(&reference.per_batch)
        .flat_map(|(l, r)| l.iter().zip(r).map(|(a, b)| a - b))
        .collect();
    tensor::mean(&diffs)
}

fn population_std(values: &[f64]) -> f64 {
    let m = tensor::mean(values);
    let sq: Vec<f64> = values.iter().map(|v| (v - m) * (v - m)).collect();
    tensor::mean(&sq).sqrt()
}

fn check_finite(weights: &ParamVector) -> Result<()> {
    if !weights.is_finite() {
        return Err(Error::NonFinite("weights".into()));
    }
    Ok(())
}

/// Inner-maximized losses at `w + nu_i` for every sample `i` and batch.
fn sampled_losses<L: Landscape + ?Sized>(
    land: &L,
    weights: &ParamVector,
    cfg: &FlatnessConfig,
    seeds: &Seeds,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let nb = land.num_batches();
    let flat: Vec<Vec<f64>> = (0..cfg.samples * nb)
        .into_par_iter()
        .map(|k| {
            let (i, b) = (k / nb, k % nb);
            let nu = geometry::sample_in_ball(weights, &cfg.ball, &mut seeds.nu(b, i));
            land.inner_max(&weights.perturbed(&nu, 1.0)?, b, seeds.attack[b])
        })
        .collect::<Result<_>>()?;
    Ok(flat.chunks(nb).map(|c| c.to_vec()).collect())
}

fn report(cfg: &FlatnessConfig, reference: &Reference, per_sample: Vec<f64>) -> FlatnessReport {
    let value = match cfg.mode {
        FlatnessMode::Average => tensor::mean(&per_sample),
        FlatnessMode::Worst => per_sample.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    };
    FlatnessReport {
        mode: cfg.mode,
        loss_kind: cfg.loss_kind,
        xi: cfg.ball.xi,
        value,
        std: population_std(&per_sample),
        reference_loss: reference.mean,
        per_sample,
        config: *cfg,
    }
}

/// Expected loss increase under random weight perturbations in the ball.
pub fn average_case_flatness<L: Landscape + ?Sized>(
    land: &L,
    weights: &ParamVector,
    cfg: &FlatnessConfig,
    rng: &mut impl RngCore,
) -> Result<FlatnessReport> {
    cfg.validate()?;
    check_finite(weights)?;
    let seeds = Seeds::new(rng::fork(rng), land.num_batches());
    let reference = reference(land, weights, &seeds)?;
    let per_sample = sampled_losses(land, weights, cfg, &seeds)?
        .iter()
        .map(|losses| mean_increase(losses, &reference))
        .collect();
    Ok(report(&FlatnessConfig { mode: FlatnessMode::Average, ..*cfg }, &reference, per_sample))
}

/// Joint ascent on `(nu, inputs)` for one restart on one batch. Returns the
/// final weight perturbation and per-example losses at the end point.
pub fn joint_ascent<L: Landscape + ?Sized>(
    land: &L,
    weights: &ParamVector,
    cfg: &FlatnessConfig,
    batch: usize,
    attack_seed: u64,
    restart: usize,
    start: Direction,
) -> Result<(Direction, Vec<f64>)> {
    let mut nu = start;
    let mut inputs = land.initial_inputs(batch, attack_seed, restart);
    for _ in 0..cfg.joint_steps {
        let at = weights.perturbed(&nu, 1.0)?;
        let e = land.evaluate(&at, batch, &inputs)?;
        land.step_inputs(batch, &mut inputs, &e.grad_inputs);
        let e = land.evaluate(&at, batch, &inputs)?;
        if !e.grad_weights.is_finite() || e.losses.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite(format!("joint ascent on batch {batch}, restart {restart}")));
        }
        let step = geometry::normalize_or_zero(&e.grad_weights, weights, cfg.ball.granularity)?;
        nu.axpy(cfg.nu_step_size, &step);
        nu = geometry::project_to_ball(&nu, weights, &cfg.ball)?;
    }
    let losses = land.evaluate(&weights.perturbed(&nu, 1.0)?, batch, &inputs)?.losses;
    Ok((nu, losses))
}

/// Largest loss increase found by joint ascent over the ball.
///
/// Each restart scores, per example, the best of: the inner maximization at its
/// starting `nu`, the joint-ascent end point, and a fresh inner maximization at
/// the final `nu`. The first term makes the result dominate the average case
/// computed with the same seed.
pub fn worst_case_flatness<L: Landscape + ?Sized>(
    land: &L,
    weights: &ParamVector,
    cfg: &FlatnessConfig,
    rng: &mut impl RngCore,
) -> Result<FlatnessReport> {
    cfg.validate()?;
    check_finite(weights)?;
    let nb = land.num_batches();
    let seeds = Seeds::new(rng::fork(rng), nb);
    let reference = reference(land, weights, &seeds)?;
    let flat: Vec<Vec<f64>> = (0..cfg.samples * nb)
        .into_par_iter()
        .map(|k| {
            let (r, b) = (k / nb, k % nb);
            let start = geometry::sample_in_ball(weights, &cfg.ball, &mut seeds.nu(b, r));
            let mut best = land.inner_max(&weights.perturbed(&start, 1.0)?, b, seeds.attack[b])?;
            match joint_ascent(land, weights, cfg, b, seeds.attack[b], r, start) {
                Ok((nu, end)) => {
                    let fresh = land.inner_max(&weights.perturbed(&nu, 1.0)?, b, seeds.attack[b])?;
                    for ((m, e), f) in best.iter_mut().zip(&end).zip(&fresh) {
                        *m = m.max(*e).max(*f);
                    }
                }
                Err(Error::NonFinite(what)) => warn!(%what, "joint ascent diverged; restart keeps its starting value"),
                Err(e) => return Err(e),
            }
            Ok(best)
        })
        .collect::<Result<_>>()?;
    let per_sample = flat.chunks(nb).map(|losses| mean_increase(losses, &reference)).collect();
    Ok(report(&FlatnessConfig { mode: FlatnessMode::Worst, ..*cfg }, &reference, per_sample))
}

/// Dispatches on `cfg.mode`.
pub fn measure<L: Landscape + ?Sized>(
    land: &L,
    weights: &ParamVector,
    cfg: &FlatnessConfig,
    rng: &mut impl RngCore,
) -> Result<FlatnessReport> {
    match cfg.mode {
        FlatnessMode::Average => average_case_flatness(land, weights, cfg, rng),
        FlatnessMode::Worst => worst_case_flatness(land, weights, cfg, rng),
    }
}

/// The objective `cfg` describes for `net` on `data`, split into batches.
pub fn objective<'a>(net: &'a Network, data: &Batch, cfg: &FlatnessConfig) -> NetworkObjective<'a> {
    let attack = match cfg.loss_kind {
        LossKind::Robust => Some(cfg.attack),
        LossKind::Clean => None,
    };
    NetworkObjective::new(net, data.chunks(cfg.batch_size), attack)
}

/// Flatness of a network's loss on `data`, as configured.
pub fn network_flatness(
    net: &Network,
    weights: &ParamVector,
    data: &Batch,
    cfg: &FlatnessConfig,
    rng: &mut impl RngCore,
) -> Result<FlatnessReport> {
    net.check_params(weights)?;
    measure(&objective(net, data, cfg), weights, cfg, rng)
}

/// Flatness of the clean cross-entropy (no inner maximization).
pub fn clean_flatness(
    net: &Network,
    weights: &ParamVector,
    data: &Batch,
    cfg: &FlatnessConfig,
    rng: &mut impl RngCore,
) -> Result<FlatnessReport> {
    network_flatness(net, weights, data, &FlatnessConfig { loss_kind: LossKind::Clean, ..*cfg }, rng)
}
