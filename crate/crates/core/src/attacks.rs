//! L-infinity PGD on inputs: the inner maximization of adversarial training,
//! and robust loss / robust error estimates built on it.
//!
//! Feasible points satisfy `|x~ - x|_inf <= epsilon` and `x~ in [0, 1]^D`; the
//! projection clips to the epsilon box first and then to the unit box. No
//! momentum and no backtracking.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::batch::Batch;
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    /// L-infinity radius in input units.
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default = "default_true")]
    pub signed_gradient: bool,
    #[serde(default = "default_true")]
    pub random_init: bool,
}

fn default_restarts() -> usize {
    1
}

fn default_true() -> bool {
    true
}

impl AttackConfig {
    /// PGD-7 with step size `epsilon / 4`, one random start: the training attack.
    pub fn training(epsilon: f64) -> Self {
        Self { epsilon, steps: 7, step_size: epsilon / 4.0, restarts: 1, signed_gradient: true, random_init: true }
    }

    /// PGD-20 with 10 restarts: the evaluation attack.
    pub fn evaluation(epsilon: f64) -> Self {
        Self { steps: 20, restarts: 10, ..Self::training(epsilon) }
    }

    pub fn none() -> Self {
        Self { epsilon: 0.0, steps: 0, step_size: 0.0, restarts: 1, signed_gradient: true, random_init: false }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !(self.step_size >= 0.0) {
            return Err(Error::Config("attack epsilon and step_size must be >= 0".into()));
        }
        if self.restarts == 0 {
            return Err(Error::Config("attack restarts must be >= 1".into()));
        }
        Ok(())
    }
}

/// Adversarial inputs with per-example loss and attack success.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub inputs: Tensor,
    pub losses: Vec<f64>,
    /// Prediction differs from the label at the emitted inputs.
    pub success: Vec<bool>,
}

impl AttackResult {
    pub fn mean_loss(&self) -> f64 {
        tensor::mean(&self.losses)
    }
}

/// Clips `adv` into the epsilon box around `clean`, then into `[0, 1]`.
pub fn project_linf(adv: &mut Tensor, clean: &Tensor, epsilon: f64) {
    for (a, &c) in adv.data_mut().iter_mut().zip(clean.data()) {
        let (lo, hi) = box_bounds(c, epsilon);
        *a = a.clamp(lo, hi).clamp(0.0, 1.0);
    }
}

/// `c -/+ epsilon`, pulled inward by an ulp where rounding would otherwise
/// leave `|bound - c| > epsilon` in floating point.
fn box_bounds(c: f64, epsilon: f64) -> (f64, f64) {
    let mut lo = c - epsilon;
    while c - lo > epsilon {
        lo = f64::from_bits(if lo > 0.0 { lo.to_bits() + 1 } else { lo.to_bits() - 1 });
    }
    let mut hi = c + epsilon;
    while hi - c > epsilon {
        hi = f64::from_bits(if hi > 0.0 { hi.to_bits() - 1 } else { hi.to_bits() + 1 });
    }
    (lo, hi)
}

pub fn uniform_start(clean: &Tensor, epsilon: f64, rng: &mut impl Rng) -> Tensor {
    let mut x = clean.clone();
    if epsilon > 0.0 {
        for v in x.data_mut() {
            *v += rng.random_range(-epsilon..=epsilon);
        }
    }
    project_linf(&mut x, clean, epsilon);
    x
}

/// Starting points for `count` restarts. The first always starts at the clean
/// inputs; the others are uniform in the epsilon box when `random_init` is set.
/// The sequence is prefix-stable: the first `k` starts do not depend on `count`.
pub fn restart_starts(clean: &Tensor, cfg: &AttackConfig, count: usize, rng: &mut impl Rng) -> Vec<Tensor> {
    (0..count)
        .map(|i| {
            if i > 0 && cfg.random_init {
                uniform_start(clean, cfg.epsilon, rng)
            } else {
                clean.clone()
            }
        })
        .collect()
}

/// One ascent step on `adv` followed by projection.
pub fn ascent_step(adv: &mut Tensor, clean: &Tensor, grad: &Tensor, cfg: &AttackConfig, active: Option<&[bool]>) {
    for r in 0..adv.rows() {
        if active.is_some_and(|a| !a[r]) {
            continue;
        }
        for (a, g) in adv.row_mut(r).iter_mut().zip(grad.row(r)) {
            *a += cfg.step_size * if cfg.signed_gradient { signum(*g) } else { *g };
        }
    }
    project_linf(adv, clean, cfg.epsilon);
}

fn signum(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Runs `cfg.steps` PGD iterations from `start`.
pub fn ascend(model: &Model<'_>, batch: &Batch, start: Tensor, cfg: &AttackConfig) -> Result<AttackResult> {
    let mut adv = start;
    project_linf(&mut adv, &batch.inputs, cfg.epsilon);
    for step in 0..cfg.steps {
        let g = model.input_grad(&adv, &batch.labels)?;
        if g.losses.iter().any(|l| !l.is_finite()) || !g.grad.is_finite() {
            return Err(Error::NonFinite(format!("PGD loss at step {step}")));
        }
        ascent_step(&mut adv, &batch.inputs, &g.grad, cfg, None);
    }
    finish(model, batch, adv)
}

pub(crate) fn finish(model: &Model<'_>, batch: &Batch, adv: Tensor) -> Result<AttackResult> {
    let logits = model.logits(&adv)?;
    let ce = crate::nn::loss::cross_entropy(&logits, &batch.labels)?;
    if ce.per_example.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("PGD final loss".into()));
    }
    let success = (0..logits.rows())
        .map(|r| crate::nn::loss::argmax(logits.row(r)) != batch.labels[r])
        .collect();
    Ok(AttackResult { inputs: adv, losses: ce.per_example, success })
}

/// A single PGD run; starts uniformly in the box when `cfg.random_init` is set.
pub fn pgd_linf(model: &Model<'_>, batch: &Batch, cfg: &AttackConfig, rng: &mut impl Rng) -> Result<AttackResult> {
    cfg.validate()?;
    let start =
        if cfg.random_init { uniform_start(&batch.inputs, cfg.epsilon, rng) } else { batch.inputs.clone() };
    ascend(model, batch, start, cfg)
}

/// Per-example worst case over `cfg.restarts` PGD runs (see [`restart_starts`]).
/// `success` is set if any restart flips the prediction.
pub fn best_of_restarts(model: &Model<'_>, batch: &Batch, cfg: &AttackConfig, rng: &mut impl Rng) -> Result<AttackResult> {
    cfg.validate()?;
    let starts = restart_starts(&batch.inputs, cfg, cfg.restarts, rng);
    let mut best: Option<AttackResult> = None;
    for start in starts {
        let run = ascend(model, batch, start, cfg)?;
        best = Some(match best {
            None => run,
            Some(mut acc) => {
                for i in 0..batch.len() {
                    if run.losses[i] > acc.losses[i] {
                        acc.losses[i] = run.losses[i];
                        acc.inputs.row_mut(i).copy_from_slice(run.inputs.row(i));
                    }
                    acc.success[i] |= run.success[i];
                }
                acc
            }
        });
    }
    Ok(best.expect("restarts >= 1"))
}

/// Mean per-example worst-case loss.
pub fn robust_loss(model: &Model<'_>, data: &Batch, cfg: &AttackConfig, rng: &mut impl Rng) -> Result<f64> {
    Ok(best_of_restarts(model, data, cfg, rng)?.mean_loss())
}

/// Fraction of examples that are misclassified or successfully attacked.
pub fn robust_error(model: &Model<'_>, data: &Batch, cfg: &AttackConfig, rng: &mut impl Rng) -> Result<f64> {
    Ok(evaluate(model, data, cfg, rng)?.robust_error)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustEval {
    pub clean_loss: f64,
    pub clean_error: f64,
    pub robust_loss: f64,
    pub robust_error: f64,
}

/// Clean and robust loss/error from one attack run.
pub fn evaluate(model: &Model<'_>, data: &Batch, cfg: &AttackConfig, rng: &mut impl Rng) -> Result<RobustEval> {
    if data.is_empty() {
        return Err(Error::Dataset("cannot evaluate on an empty set".into()));
    }
    let logits = model.logits(&data.inputs)?;
    let ce = crate::nn::loss::cross_entropy(&logits, &data.labels)?;
    let wrong: Vec<bool> =
        (0..data.len()).map(|r| crate::nn::loss::argmax(logits.row(r)) != data.labels[r]).collect();
    let adv = best_of_restarts(model, data, cfg, rng)?;
    let n = data.len() as f64;
    let clean_error = wrong.iter().filter(|w| **w).count() as f64 / n;
    let robust_error = wrong.iter().zip(&adv.success).filter(|(w, s)| **w || **s).count() as f64 / n;
    Ok(RobustEval { clean_loss: ce.mean, clean_error, robust_loss: adv.mean_loss(), robust_error })
}
