use rand::Rng;

use crate::attacks::{self, AttackConfig, AttackResult};
use crate::batch::Batch;
use crate::error::{Error, Result};
use crate::nn::Model;

/// PGD that stops each example `tau_stop` iterations after its prediction first
/// differs from the label. The prediction is checked before every step, so an
/// example misclassified at its start takes exactly `tau_stop` steps.
pub fn pgd_tau_attack(
    model: &Model<'_>,
    batch: &Batch,
    tau_stop: usize,
    cfg: &AttackConfig,
    rng: &mut impl Rng,
) -> Result<AttackResult> {
    cfg.validate()?;
    let clean = &batch.inputs;
    let mut adv = if cfg.random_init { attacks::uniform_start(clean, cfg.epsilon, rng) } else { clean.clone() };
    let n = batch.len();
    let mut flipped_at: Vec<Option<usize>> = vec![None; n];
    let mut active = vec![true; n];
    for t in 0..cfg.steps {
        let g = model.input_grad(&adv, &batch.labels)?;
        if g.losses.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite(format!("PGD loss at step {t}")));
        }
        for i in 0..n {
            if flipped_at[i].is_none() && g.predictions[i] != batch.labels[i] {
                flipped_at[i] = Some(t);
            }
            if flipped_at[i].is_some_and(|f| t - f >= tau_stop) {
                active[i] = false;
            }
        }
        if !active.iter().any(|a| *a) {
            break;
        }
        attacks::ascent_step(&mut adv, clean, &g.grad, cfg, Some(&active));
    }
    attacks::finish(model, batch, adv)
}
