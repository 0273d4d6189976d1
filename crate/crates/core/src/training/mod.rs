//! Adversarial training with momentum SGD, plus the variants and hooks whose
//! effect on flatness the measurement modules compare.

mod early_stop;
mod hooks;
mod labels;
mod objectives;
mod pgd_tau;
mod schedule;

pub use early_stop::{early_stop_update, EarlyStopState, HoldoutMetrics};
pub use hooks::{clip_weights, update_weight_average};
pub use labels::{equivalent_smoothing, expected_noisy_distribution, inject_label_noise, noisy_count, smooth_labels};
pub use objectives::{awp_step, soft_target_loss, trades_attack, trades_loss, trades_objective, StepLoss};
pub use pgd_tau::pgd_tau_attack;
pub use schedule::{lr_at, Schedule};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use tracing::{debug, info};

use crate::attacks::{self, AttackConfig, RobustEval};
use crate::batch::Batch;
use crate::data::{self, Dataset, Split};
use crate::error::{Error, Result};
use crate::geometry::Granularity;
use crate::nn::{Direction, Mode, Model, Network, NetworkSpec, ParamVector};
use crate::rng::{self, RngState};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Variant {
    #[default]
    PlainAt,
    Trades {
        lambda: f64,
    },
    Awp {
        xi: f64,
        #[serde(default = "one")]
        inner_iters: usize,
    },
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStopConfig {
    #[serde(default = "default_every")]
    pub every: usize,
    /// Examples moved from the tail of the test split into the holdout.
    #[serde(default)]
    pub holdout_size: usize,
    /// Restarts of the holdout attack (otherwise the training attack).
    #[serde(default = "default_holdout_restarts")]
    pub restarts: usize,
}

fn default_every() -> usize {
    5
}

fn default_holdout_restarts() -> usize {
    5
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        Self { every: default_every(), holdout_size: 0, restarts: default_holdout_restarts() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub schedule: Schedule,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub attack: AttackConfig,
    #[serde(default)]
    pub variant: Variant,
    #[serde(default)]
    pub label_smoothing: f64,
    #[serde(default)]
    pub label_noise: f64,
    #[serde(default)]
    pub weight_clip: Option<f64>,
    #[serde(default)]
    pub clip_batchnorm: bool,
    #[serde(default)]
    pub weight_average: Option<f64>,
    #[serde(default)]
    pub early_stop: EarlyStopConfig,
    /// Stop each example's attack this many steps after its label flips.
    #[serde(default)]
    pub pgd_tau: Option<usize>,
    /// Flip/crop augmentation; only applies to image-shaped data.
    #[serde(default = "default_true")]
    pub augment: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_true() -> bool {
    true
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        self.schedule.validate()?;
        self.attack.validate()?;
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        for (name, v) in [("base_lr", self.base_lr), ("momentum", self.momentum), ("weight_decay", self.weight_decay)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a finite value >= 0")));
            }
        }
        for (name, v) in [
            ("label_smoothing", Some(self.label_smoothing)),
            ("label_noise", Some(self.label_noise)),
            ("weight_average", self.weight_average),
        ] {
            if let Some(v) = v {
                if !(0.0..1.0).contains(&v) {
                    return Err(Error::Config(format!("{name} must lie in [0, 1)")));
                }
            }
        }
        if self.weight_clip.is_some_and(|w| !(w > 0.0)) {
            return bad("weight_clip must be > 0");
        }
        if self.early_stop.every == 0 || self.early_stop.restarts == 0 {
            return bad("early_stop.every and early_stop.restarts must be >= 1");
        }
        match self.variant {
            Variant::Trades { lambda } if !(lambda >= 0.0) => bad("TRADES lambda must be >= 0"),
            Variant::Awp { xi, .. } if !(xi >= 0.0) => bad("AWP xi must be >= 0"),
            _ => Ok(()),
        }
    }
}

/// One row of the metrics log. Robust quantities use the training attack in
/// eval mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    /// Learning rate used during this epoch (0 for the initial row).
    pub lr: f64,
    pub train_ce: f64,
    pub train_rce: f64,
    pub test_ce: f64,
    pub test_rce: f64,
    pub train_err: f64,
    pub train_rerr: f64,
    pub test_err: f64,
    pub test_rerr: f64,
}

/// Everything needed to evaluate or resume a model at the end of an epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub epoch: usize,
    pub spec: NetworkSpec,
    pub params: ParamVector,
    pub average: Option<ParamVector>,
    pub momentum: Option<Direction>,
    pub rng: Option<RngState>,
    pub metrics: Option<MetricsRow>,
}

impl Checkpoint {
    pub fn new(spec: NetworkSpec, params: ParamVector) -> Self {
        Self { epoch: 0, spec, params, average: None, momentum: None, rng: None, metrics: None }
    }

    /// The weight average when present, otherwise the raw parameters.
    pub fn model_params(&self) -> &ParamVector {
        self.average.as_ref().unwrap_or(&self.params)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub final_checkpoint: Checkpoint,
    pub best_checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRow>,
    pub holdout: Vec<HoldoutMetrics>,
    pub early_stop: EarlyStopState,
}

const TAG_METRICS: u64 = 11;
const TAG_HOLDOUT: u64 = 12;

fn evaluate_split(model: &Model<'_>, data: &Batch, attack: &AttackConfig, seed: u64, tag: u64, epoch: usize) -> Result<RobustEval> {
    if data.is_empty() {
        let nan = f64::NAN;
        return Ok(RobustEval { clean_loss: nan, clean_error: nan, robust_loss: nan, robust_error: nan });
    }
    attacks::evaluate(model, data, attack, &mut rng::stream(seed, tag, epoch as u64))
}

fn metrics_row(net: &Network, params: &ParamVector, train: &Batch, test: &Batch, cfg: &TrainConfig, epoch: usize, lr: f64) -> Result<MetricsRow> {
    let model = Model::eval(net, params);
    let tr = evaluate_split(&model, train, &cfg.attack, cfg.seed, TAG_METRICS, 2 * epoch)?;
    let te = evaluate_split(&model, test, &cfg.attack, cfg.seed, TAG_METRICS, 2 * epoch + 1)?;
    Ok(MetricsRow {
        epoch,
        lr,
        train_ce: tr.clean_loss,
        train_rce: tr.robust_loss,
        test_ce: te.clean_loss,
        test_rce: te.robust_loss,
        train_err: tr.clean_error,
        train_rerr: tr.robust_error,
        test_err: te.clean_error,
        test_rerr: te.robust_error,
    })
}

fn diverged(epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(what) => Error::Diverged { epoch, reason: what },
        other => other,
    }
}

struct Step<'a> {
    net: &'a Network,
    cfg: &'a TrainConfig,
    classes: usize,
}

impl Step<'_> {
    /// Adversarial inputs for the update, generated in train mode without
    /// touching the running statistics.
    fn adversarial(&self, params: &ParamVector, batch: &Batch, rng: &mut rng::Rng) -> Result<crate::tensor::Tensor> {
        let model = Model::new(self.net, params, Mode::Train);
        let cfg = &self.cfg.attack;
        if cfg.epsilon == 0.0 || cfg.steps == 0 {
            return Ok(batch.inputs.clone());
        }
        Ok(match (self.cfg.variant, self.cfg.pgd_tau) {
            (Variant::Trades { .. }, _) => trades_attack(self.net, params, &batch.inputs, cfg, Mode::Train, rng)?,
            (_, Some(tau)) => pgd_tau_attack(&model, batch, tau, cfg, rng)?.inputs,
            (_, None) => attacks::pgd_linf(&model, batch, cfg, rng)?.inputs,
        })
    }

    fn loss(&self, params: &ParamVector, batch: &Batch, rng: &mut rng::Rng) -> Result<StepLoss> {
        let adv = self.adversarial(params, batch, rng)?;
        let labels = if self.cfg.label_noise > 0.0 {
            inject_label_noise(&batch.labels, self.cfg.label_noise, self.classes, rng)
        } else {
            batch.labels.clone()
        };
        let targets = smooth_labels(&labels, self.cfg.label_smoothing, self.classes);
        match self.cfg.variant {
            Variant::PlainAt => soft_target_loss(self.net, params, &adv, &targets, Mode::Train),
            Variant::Trades { lambda } => {
                trades_objective(self.net, params, &batch.inputs, &adv, &targets, lambda, Mode::Train)
            }
            Variant::Awp { xi, inner_iters } => {
                let nu = awp_step(params, xi, inner_iters, Granularity::PerLayer, |w| {
                    Ok(soft_target_loss(self.net, w, &adv, &targets, Mode::Train)?.grad)
                })?;
                soft_target_loss(self.net, &params.perturbed(&nu, 1.0)?, &adv, &targets, Mode::Train)
            }
        }
    }
}

/// `buf = momentum * buf + (g + wd * w)`, `w -= lr * buf` on trainable entries.
fn sgd_update(params: &mut ParamVector, grad: &Direction, buf: &mut Direction, lr: f64, momentum: f64, wd: f64) {
    for ((e, g), b) in params.entries_mut().iter_mut().zip(grad.parts()).zip(buf.parts_mut()) {
        if !e.role.is_trainable() {
            continue;
        }
        for ((w, &g), b) in e.value.data_mut().iter_mut().zip(g.data()).zip(b.data_mut()) {
            *b = momentum * *b + g + wd * *w;
            *w -= lr * *b;
        }
    }
}

/// Trains `net` on the train split of `data`.
///
/// `init` overrides the seeded initialization. `on_epoch` sees the checkpoint
/// after every epoch (epoch 0 included), so that the caller can persist it;
/// an error from it aborts training.
pub fn train(
    net: &Network,
    data: &Dataset,
    cfg: &TrainConfig,
    init: Option<ParamVector>,
    mut on_epoch: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let data = if data.indices(Split::Holdout).is_empty() && cfg.early_stop.holdout_size > 0 {
        data.clone().with_holdout(cfg.early_stop.holdout_size)?
    } else {
        data.clone()
    };
    let train_set = data.split(Split::Train);
    let test_set = data.split(Split::Test);
    let holdout = data.split(Split::Holdout);
    if train_set.is_empty() {
        return Err(Error::Dataset("empty train split".into()));
    }
    if data.num_classes != net.num_classes() || data.dim() != net.input_dim() {
        return Err(Error::Config(format!(
            "network expects {} inputs and {} classes; data has {} and {}",
            net.input_dim(),
            net.num_classes(),
            data.dim(),
            data.num_classes
        )));
    }

    let mut rng = rng::seeded(cfg.seed);
    let mut params = match init {
        Some(p) => {
            net.check_params(&p)?;
            p
        }
        None => net.init_params(&mut rng),
    };
    let mut momentum = params.zeros_direction();
    let mut average = cfg.weight_average.map(|_| params.clone());
    let step = Step { net, cfg, classes: data.num_classes };
    let holdout_attack = AttackConfig { restarts: cfg.early_stop.restarts, ..cfg.attack };
    let has_bn = net.spec().has_batchnorm();

    let mut metrics = Vec::with_capacity(cfg.epochs + 1);
    let mut holdout_log = Vec::new();
    let mut early = EarlyStopState::new(cfg.early_stop.every);

    let snapshot = |epoch: usize, params: &ParamVector, avg: &Option<ParamVector>, mom: &Direction, rng: &rng::Rng, row: MetricsRow| {
        Checkpoint {
            epoch,
            spec: net.spec().clone(),
            params: params.clone(),
            average: avg.clone(),
            momentum: Some(mom.clone()),
            rng: Some(RngState::capture(rng)),
            metrics: Some(row),
        }
    };

    let row = metrics_row(net, average.as_ref().unwrap_or(&params), &train_set, &test_set, cfg, 0, 0.0)?;
    metrics.push(row);
    let mut last = snapshot(0, &params, &average, &momentum, &rng, row);
    on_epoch(&last)?;
    let mut best = last.clone();

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs {
        let lr = lr_at(cfg.base_lr, &cfg.schedule, epoch - 1);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            if has_bn && chunk.len() < 2 {
                continue;
            }
            let mut batch = train_set.select(chunk);
            if let (true, Some(shape)) = (cfg.augment, data.image.as_ref()) {
                batch = data::augment(&batch, shape, &mut rng);
            }
            let out = step.loss(&params, &batch, &mut rng).map_err(diverged(epoch))?;
            if !out.loss.is_finite() || !out.grad.is_finite() {
                return Err(Error::Diverged { epoch, reason: format!("loss {}", out.loss) });
            }
            epoch_loss += out.loss * chunk.len() as f64;
            net.update_running_stats(&mut params, &out.forward);
            sgd_update(&mut params, &out.grad, &mut momentum, lr, cfg.momentum, cfg.weight_decay);
            if let Some(w_max) = cfg.weight_clip {
                params = clip_weights(&params, w_max, cfg.clip_batchnorm);
            }
            if let (Some(tau), Some(avg)) = (cfg.weight_average, average.as_mut()) {
                *avg = update_weight_average(avg, &params, tau)?;
            }
        }
        if !params.is_finite() {
            return Err(Error::Diverged { epoch, reason: "non-finite parameters".into() });
        }
        debug!(epoch, lr, loss = epoch_loss / train_set.len() as f64, "epoch done");

        let eval_params = average.as_ref().unwrap_or(&params);
        let row = metrics_row(net, eval_params, &train_set, &test_set, cfg, epoch, lr).map_err(diverged(epoch))?;
        metrics.push(row);
        last = snapshot(epoch, &params, &average, &momentum, &rng, row);
        on_epoch(&last)?;

        if !holdout.is_empty() && (early.due(epoch) || epoch == cfg.epochs) {
            let ev = evaluate_split(&Model::eval(net, eval_params), &holdout, &holdout_attack, cfg.seed, TAG_HOLDOUT, epoch)?;
            let hm = HoldoutMetrics { epoch, robust_loss: ev.robust_loss, robust_error: ev.robust_error };
            holdout_log.push(hm);
            let next = early_stop_update(&early, &hm);
            if next.best_epoch != early.best_epoch {
                best = last.clone();
            }
            early = next;
        }
    }
    if holdout.is_empty() {
        best = last.clone();
    }
    info!(epochs = cfg.epochs, best_epoch = ?early.best_epoch, "training finished");
    Ok(TrainOutput { final_checkpoint: last, best_checkpoint: best, metrics, holdout: holdout_log, early_stop: early })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, NetworkSpec};

    #[test]
    fn weight_decay_shrinks_by_one_minus_lr_times_decay() {
        let net = Network::new(NetworkSpec::mlp_batchnorm(&[3, 4, 2], Activation::Relu)).unwrap();
        let before = net.init_params(&mut rng::seeded(1));
        let mut params = before.clone();
        let zero = params.zeros_direction();
        let mut buf = params.zeros_direction();
        let (lr, wd) = (0.1, 0.05);
        sgd_update(&mut params, &zero, &mut buf, lr, 0.9, wd);
        for (a, b) in params.entries().iter().zip(before.entries()) {
            for (x, x0) in a.value.data().iter().zip(b.value.data()) {
                let want = if a.role.is_trainable() { x0 * (1.0 - lr * wd) } else { *x0 };
                assert!((x - want).abs() <= 1e-16 * x0.abs(), "{:?}", a.role);
            }
        }
    }
}
