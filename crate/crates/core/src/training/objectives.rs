use rand::Rng;

use crate::attacks::{self, AttackConfig};
use crate::batch::Batch;
use crate::error::Result;
use crate::geometry::{self, BallSpec, Granularity};
use crate::nn::{loss, Direction, Forward, Mode, Network, ParamVector};
use crate::tensor::Tensor;

/// Loss value, parameter gradient, and the forward pass whose batch statistics
/// feed the running averages.
pub struct StepLoss {
    pub loss: f64,
    pub grad: Direction,
    pub forward: Forward,
}

/// Mean soft-target cross-entropy at `inputs` and its parameter gradient.
pub fn soft_target_loss(
    net: &Network,
    params: &ParamVector,
    inputs: &Tensor,
    targets: &[Vec<f64>],
    mode: Mode,
) -> Result<StepLoss> {
    let forward = net.forward(params, inputs, mode)?;
    let n = targets.len() as f64;
    let (losses, dl) = loss::soft_cross_entropy(&forward.logits, targets, 1.0 / n)?;
    let (grad, _) = net.backward(params, &forward, &dl)?;
    Ok(StepLoss { loss: losses.iter().sum::<f64>() / n, grad, forward })
}

/// PGD on `sum_i KL(f(x_i) || f(x~_i))` over the epsilon box.
pub fn trades_attack(
    net: &Network,
    params: &ParamVector,
    clean: &Tensor,
    cfg: &AttackConfig,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let p_logits = net.logits(params, clean, mode)?;
    let mut adv = if cfg.random_init { attacks::uniform_start(clean, cfg.epsilon, rng) } else { clean.clone() };
    for _ in 0..cfg.steps {
        let fwd = net.forward(params, &adv, mode)?;
        let (_, _, grad_q) = loss::kl_divergence(&p_logits, &fwd.logits, 1.0)?;
        let (_, g) = net.backward(params, &fwd, &grad_q)?;
        attacks::ascent_step(&mut adv, clean, &g, cfg, None);
    }
    Ok(adv)
}

/// `CE(f(x), targets) + lambda * mean KL(f(x) || f(x~))` with its gradient.
pub fn trades_objective(
    net: &Network,
    params: &ParamVector,
    clean: &Tensor,
    adv: &Tensor,
    targets: &[Vec<f64>],
    lambda: f64,
    mode: Mode,
) -> Result<StepLoss> {
    let n = targets.len() as f64;
    let fc = net.forward(params, clean, mode)?;
    let fa = net.forward(params, adv, mode)?;
    let (ce, mut dl_clean) = loss::soft_cross_entropy(&fc.logits, targets, 1.0 / n)?;
    let (kl, grad_p, grad_q) = loss::kl_divergence(&fc.logits, &fa.logits, lambda / n)?;
    dl_clean.axpy(1.0, &grad_p);
    let (mut grad, _) = net.backward(params, &fc, &dl_clean)?;
    let (grad_adv, _) = net.backward(params, &fa, &grad_q)?;
    grad.axpy(1.0, &grad_adv);
    let loss = ce.iter().sum::<f64>() / n + lambda * kl.iter().sum::<f64>() / n;
    Ok(StepLoss { loss, grad, forward: fc })
}

/// The TRADES loss on a batch: adversarial inputs from [`trades_attack`], then
/// [`trades_objective`] with one-hot targets.
pub fn trades_loss(
    net: &Network,
    params: &ParamVector,
    batch: &Batch,
    lambda: f64,
    cfg: &AttackConfig,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<f64> {
    let adv = trades_attack(net, params, &batch.inputs, cfg, mode, rng)?;
    let targets = super::labels::smooth_labels(&batch.labels, 0.0, net.num_classes());
    Ok(trades_objective(net, params, &batch.inputs, &adv, &targets, lambda, mode)?.loss)
}

/// Adversarial weight perturbation: `iters` normalized ascent steps of size
/// `xi / iters` on the loss whose gradient `grad` returns, projected onto the
/// ball of radius `xi`. Layers with zero gradient get zero perturbation.
pub fn awp_step(
    weights: &ParamVector,
    xi: f64,
    iters: usize,
    granularity: Granularity,
    grad: impl Fn(&ParamVector) -> Result<Direction>,
) -> Result<Direction> {
    let mut nu = weights.zeros_direction();
    if xi == 0.0 || iters == 0 {
        return Ok(nu);
    }
    let ball = BallSpec { xi, granularity, ..BallSpec::per_layer(xi) };
    for _ in 0..iters {
        let g = grad(&weights.perturbed(&nu, 1.0)?)?;
        let step = geometry::normalize_or_zero(&g, weights, granularity)?;
        nu.axpy(xi / iters as f64, &step);
        nu = geometry::project_to_ball(&nu, weights, &ball)?;
    }
    Ok(nu)
}
