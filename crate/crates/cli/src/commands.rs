use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use robflat::attacks::{self, RobustEval};
use robflat::checkpoint::{load_checkpoint, save_checkpoint};
use robflat::data::Split;
use robflat::flatness::profile::{default_grid, landscape_profile, DirectionKind, ProfileConfig};
use robflat::flatness::{self, FlatnessMode, LossKind, NetworkObjective};
use robflat::geometry;
use robflat::hessian::{eigen_report, PowerConfig};
use robflat::nn::Model;
use robflat::training;
use robflat::{AttackConfig, Batch, Checkpoint, EigenReport, Error, ExperimentConfig, FlatnessConfig, FlatnessReport, Mode, Network, ParamVector};

use crate::args::*;

/// What a command produced, for the manifest and the stdout summary.
pub struct Outcome {
    pub outputs: Vec<String>,
    pub inputs: Vec<PathBuf>,
    pub config_hash: Option<String>,
    pub seed: Option<u64>,
    pub summary: Value,
}

pub fn dispatch(cli: &Cli, out: &Path) -> Result<Outcome> {
    match &cli.command {
        Command::Train(a) => train(cli, a, out),
        Command::Eval(a) => eval(cli, a, out),
        Command::Flatness(a) => flatness_cmd(cli, a, out),
        Command::Landscape(a) => landscape(cli, a, out),
        Command::Hessian(a) => hessian(cli, a, out),
        Command::ScaleCheck(a) => scale_check(cli, a, out),
        Command::Report(a) => crate::report::run(a, out),
        Command::Replay(_) => unreachable!("replay is handled by the caller"),
    }
}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    Error::Config(msg.into()).into()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn train(cli: &Cli, a: &TrainArgs, out: &Path) -> Result<Outcome> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    if let Some(epochs) = a.epochs {
        cfg.train.epochs = epochs;
    }
    cfg.validate()?;
    let data = cfg.dataset()?;
    let net = Network::new(cfg.network_spec(&data)?)?;

    let mut outputs = vec!["config.toml".to_string(), "metrics.jsonl".to_string()];
    std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    let mut log = BufWriter::new(File::create(out.join("metrics.jsonl"))?);
    if a.save_every > 0 {
        std::fs::create_dir_all(out.join("checkpoints"))?;
    }
    let mut saved = Vec::new();
    let result = training::train(&net, &data, &cfg.train, None, |ck| {
        if let Some(row) = &ck.metrics {
            writeln!(log, "{}", serde_json::to_string(row)?)?;
            tracing::info!(epoch = row.epoch, lr = row.lr, train_rce = row.train_rce, test_rce = row.test_rce, "metrics");
        }
        if a.save_every > 0 && ck.epoch % a.save_every == 0 {
            let name = format!("checkpoints/epoch-{:04}.ckpt", ck.epoch);
            save_checkpoint(&out.join(&name), ck)?;
            saved.push(name);
        }
        Ok(())
    })?;
    log.flush()?;
    outputs.extend(saved);

    save_checkpoint(&out.join("final.ckpt"), &result.final_checkpoint)?;
    save_checkpoint(&out.join("best.ckpt"), &result.best_checkpoint)?;
    let mut holdout = String::new();
    for h in &result.holdout {
        holdout.push_str(&serde_json::to_string(h)?);
        holdout.push('\n');
    }
    std::fs::write(out.join("holdout.jsonl"), holdout)?;
    let summary = json!({
        "final_epoch": result.final_checkpoint.epoch,
        "best_epoch": result.best_checkpoint.epoch,
        "early_stop": result.early_stop,
        "final": result.final_checkpoint.metrics,
        "best": result.best_checkpoint.metrics,
    });
    write_json(&out.join("summary.json"), &summary)?;
    outputs.extend(["final.ckpt", "best.ckpt", "holdout.jsonl", "summary.json"].map(String::from));

    Ok(Outcome {
        outputs,
        inputs: vec![a.config.clone()],
        config_hash: Some(cfg.hash()?),
        seed: Some(cfg.train.seed),
        summary,
    })
}

/// A checkpoint together with the data slice it is measured on.
struct Loaded {
    cfg: ExperimentConfig,
    ck: Checkpoint,
    net: Network,
    data: Batch,
    seed: u64,
}

impl Loaded {
    fn weights(&self) -> &ParamVector {
        self.ck.model_params()
    }

    fn describe(&self, a: &DataArgs) -> Value {
        json!({
            "checkpoint": a.checkpoint.display().to_string(),
            "epoch": self.ck.epoch,
            "split": split_name(a.split),
            "examples": self.data.len(),
            "seed": self.seed,
        })
    }

    fn outcome(&self, a: &DataArgs, outputs: Vec<String>, summary: Value) -> Result<Outcome> {
        Ok(Outcome {
            outputs,
            inputs: vec![a.config.clone(), a.checkpoint.clone()],
            config_hash: Some(self.cfg.hash()?),
            seed: Some(self.seed),
            summary,
        })
    }
}

fn split_name(s: SplitArg) -> &'static str {
    match s {
        SplitArg::Train => "train",
        SplitArg::Test => "test",
        SplitArg::Holdout => "holdout",
    }
}

fn load(cli: &Cli, a: &DataArgs) -> Result<Loaded> {
    let cfg = ExperimentConfig::load(&a.config)?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let net = Network::new(ck.spec.clone())?;
    net.check_params(ck.model_params())?;

    // Carve the holdout exactly as training did, so that "test" means the same examples.
    let mut dataset = cfg.dataset()?;
    if cfg.train.early_stop.holdout_size > 0 {
        dataset = dataset.with_holdout(cfg.train.early_stop.holdout_size)?;
    }
    if dataset.dim() != net.input_dim() || dataset.num_classes != net.num_classes() {
        return Err(config_error(format!(
            "checkpoint expects {} inputs and {} classes, config data has {} and {}",
            net.input_dim(),
            net.num_classes(),
            dataset.dim(),
            dataset.num_classes
        )));
    }
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
        SplitArg::Holdout => Split::Holdout,
    };
    let mut data = dataset.split(split);
    if let Some(n) = a.limit {
        data = data.slice(0, n.min(data.len()));
    }
    if data.is_empty() {
        return Err(config_error(format!("the {} split is empty", split_name(a.split))));
    }
    let seed = cli.seed.unwrap_or(cfg.seed);
    Ok(Loaded { cfg, ck, net, data, seed })
}

fn apply_attack(base: AttackConfig, a: &AttackArgs) -> Result<AttackConfig> {
    let cfg = AttackConfig {
        epsilon: a.eps.unwrap_or(base.epsilon),
        steps: a.pgd_steps.unwrap_or(base.steps),
        step_size: a.pgd_lr.unwrap_or(base.step_size),
        restarts: a.restarts.unwrap_or(base.restarts),
        ..base
    };
    cfg.validate()?;
    Ok(cfg)
}

fn apply_flatness(mut f: FlatnessConfig, o: &FlatnessOverrides, attack: &AttackArgs) -> Result<FlatnessConfig> {
    if let Some(loss) = o.loss {
        f.loss_kind = match loss {
            LossArg::Robust => LossKind::Robust,
            LossArg::Clean => LossKind::Clean,
        };
    }
    if let Some(xi) = o.xi {
        f.ball.xi = xi;
    }
    f.samples = o.samples.unwrap_or(f.samples);
    f.joint_steps = o.joint_steps.unwrap_or(f.joint_steps);
    f.nu_step_size = o.nu_step.unwrap_or(f.nu_step_size);
    f.batch_size = o.batch_size.unwrap_or(f.batch_size);
    f.attack = apply_attack(f.attack, attack)?;
    f.validate()?;
    Ok(f)
}

fn eval(cli: &Cli, a: &EvalArgs, out: &Path) -> Result<Outcome> {
    let l = load(cli, &a.data)?;
    let base = l.cfg.attacks.get("eval").copied().unwrap_or(AttackConfig::evaluation(l.cfg.train.attack.epsilon));
    let attack = apply_attack(base, &a.attack)?;
    let model = Model::eval(&l.net, l.weights());
    let ev: RobustEval = attacks::evaluate(&model, &l.data, &attack, &mut robflat::rng::seeded(l.seed))?;
    let mut summary = l.describe(&a.data);
    summary["attack"] = serde_json::to_value(attack)?;
    summary["result"] = serde_json::to_value(ev)?;
    write_json(&out.join("eval.json"), &summary)?;
    l.outcome(&a.data, vec!["eval.json".into()], summary)
}

/// Contents of a `flatness*.json` file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlatnessOutput {
    pub checkpoint: String,
    pub epoch: usize,
    pub split: String,
    pub examples: usize,
    pub seed: u64,
    pub report: FlatnessReport,
}

fn flatness_preset(cfg: &ExperimentConfig, preset: Option<&str>, mode: Option<ModeArg>) -> Result<FlatnessConfig> {
    let name = match (preset, mode) {
        (Some(p), _) => p,
        (None, Some(ModeArg::Worst)) => "worst",
        (None, _) => "average",
    };
    let mut f = cfg.flatness_preset(name)?;
    if let Some(m) = mode {
        f.mode = match m {
            ModeArg::Average => FlatnessMode::Average,
            ModeArg::Worst => FlatnessMode::Worst,
        };
    }
    Ok(f)
}

fn flatness_cmd(cli: &Cli, a: &FlatnessArgs, out: &Path) -> Result<Outcome> {
    if a.output.contains(['/', '\\']) {
        return Err(config_error("--output must be a plain file name"));
    }
    let l = load(cli, &a.data)?;
    let f = apply_flatness(flatness_preset(&l.cfg, a.preset.as_deref(), a.mode)?, &a.flatness, &a.attack)?;
    let report = flatness::network_flatness(&l.net, l.weights(), &l.data, &f, &mut robflat::rng::seeded(l.seed))?;
    let result = FlatnessOutput {
        checkpoint: a.data.checkpoint.display().to_string(),
        epoch: l.ck.epoch,
        split: split_name(a.data.split).into(),
        examples: l.data.len(),
        seed: l.seed,
        report,
    };
    write_json(&out.join(&a.output), &result)?;
    let mut summary = l.describe(&a.data);
    summary["mode"] = serde_json::to_value(result.report.mode)?;
    summary["loss_kind"] = serde_json::to_value(result.report.loss_kind)?;
    summary["xi"] = json!(result.report.xi);
    summary["value"] = json!(result.report.value);
    summary["std"] = json!(result.report.std);
    summary["reference_loss"] = json!(result.report.reference_loss);
    l.outcome(&a.data, vec![a.output.clone()], summary)
}

fn landscape(cli: &Cli, a: &LandscapeArgs, out: &Path) -> Result<Outcome> {
    let l = load(cli, &a.data)?;
    let kind = match a.direction {
        DirectionArg::Random => DirectionKind::Random,
        DirectionArg::Adversarial => DirectionKind::Adversarial,
        DirectionArg::HessianTop => DirectionKind::HessianTop,
    };
    let default_preset = if kind == DirectionKind::Adversarial { "worst" } else { "average" };
    let preset = l.cfg.flatness_preset(a.preset.as_deref().unwrap_or(default_preset))?;
    let f = apply_flatness(preset, &a.flatness, &a.attack)?;
    let mut pcfg = ProfileConfig::new(kind, f);
    pcfg.s_grid = default_grid(a.steps);
    pcfg.directions = a.directions;
    pcfg.length = a.length.unwrap_or(pcfg.length);
    let land = flatness::objective(&l.net, &l.data, &f);
    let profile = landscape_profile(&land, l.weights(), &pcfg, &mut robflat::rng::seeded(l.seed))?;
    std::fs::write(out.join(&a.output), profile.to_csv())?;
    let mut summary = l.describe(&a.data);
    summary["direction"] = json!(kind.name());
    summary["reference_loss"] = json!(profile.reference_loss);
    summary["max_loss"] = json!(profile.rows.iter().map(|r| r.loss).fold(f64::NEG_INFINITY, f64::max));
    l.outcome(&a.data, vec![a.output.clone()], summary)
}

#[allow(clippy::neg_cmp_op_on_partial_ord)] // rejects NaN too
fn power_config(p: &PowerArgs) -> Result<PowerConfig> {
    if !(p.tol > 0.0) || p.max_iters == 0 {
        return Err(config_error("--tol must be > 0 and --max-iters >= 1"));
    }
    Ok(PowerConfig { tol: p.tol, max_iters: p.max_iters })
}

const HESSIAN_CHUNK: usize = 128;

fn eigen(l: &Loaded, weights: &ParamVector, power: &PowerConfig) -> Result<EigenReport> {
    let source = NetworkObjective::clean(&l.net, l.data.chunks(HESSIAN_CHUNK));
    Ok(eigen_report(&source, weights, power, &mut robflat::rng::seeded(l.seed))?)
}

fn hessian(cli: &Cli, a: &HessianArgs, out: &Path) -> Result<Outcome> {
    let l = load(cli, &a.data)?;
    let report = eigen(&l, l.weights(), &power_config(&a.power)?)?;
    let mut summary = l.describe(&a.data);
    summary["report"] = serde_json::to_value(&report)?;
    write_json(&out.join("hessian.json"), &summary)?;
    l.outcome(&a.data, vec!["hessian.json".into()], summary)
}

#[derive(Debug, Clone, Serialize)]
struct ScaleRow {
    scale: f64,
    clean_loss: f64,
    robust_loss: f64,
    robust_error: f64,
    /// Fraction of predictions equal to the unscaled network's.
    prediction_agreement: f64,
    average_flatness: f64,
    worst_flatness: f64,
    lambda_max: f64,
    lambda_min: f64,
    convexity_ratio: f64,
    hessian_converged: bool,
}

const SCALE_HEADER: &str = "scale,clean_loss,robust_loss,robust_error,prediction_agreement,average_flatness,worst_flatness,lambda_max,lambda_min,convexity_ratio,hessian_converged";

fn max_relative_spread(values: &[f64]) -> f64 {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scale = values.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        0.0
    } else {
        (hi - lo) / scale
    }
}

fn scale_check(cli: &Cli, a: &ScaleCheckArgs, out: &Path) -> Result<Outcome> {
    let l = load(cli, &a.data)?;
    if a.scales.is_empty() {
        return Err(config_error("--scales needs at least one value"));
    }
    let avg = apply_flatness(flatness_preset(&l.cfg, Some(&a.average_preset), Some(ModeArg::Average))?, &a.flatness, &a.attack)?;
    let worst = apply_flatness(flatness_preset(&l.cfg, Some(&a.worst_preset), Some(ModeArg::Worst))?, &a.flatness, &a.attack)?;
    let power = power_config(&a.power)?;
    let base = l.weights();
    let base_pred = l.net.predict(base, &l.data.inputs, Mode::Eval)?;
    let rng = || robflat::rng::seeded(l.seed);

    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for &s in &a.scales {
        let w = geometry::scale_all_batchnorm_layers(&l.ck.spec, base, s)?;
        let pred = l.net.predict(&w, &l.data.inputs, Mode::Eval)?;
        let agree = pred.iter().zip(&base_pred).filter(|(p, q)| p == q).count() as f64 / pred.len() as f64;
        let ev = attacks::evaluate(&Model::eval(&l.net, &w), &l.data, &avg.attack, &mut rng())?;
        let fa = flatness::network_flatness(&l.net, &w, &l.data, &avg, &mut rng())?;
        let fw = flatness::network_flatness(&l.net, &w, &l.data, &worst, &mut rng())?;
        let eig = eigen(&l, &w, &power)?;
        rows.push(ScaleRow {
            scale: s,
            clean_loss: ev.clean_loss,
            robust_loss: ev.robust_loss,
            robust_error: ev.robust_error,
            prediction_agreement: agree,
            average_flatness: fa.value,
            worst_flatness: fw.value,
            lambda_max: eig.lambda_max,
            lambda_min: eig.lambda_min,
            convexity_ratio: eig.convexity_ratio,
            hessian_converged: eig.converged,
        });
        reports.push(json!({ "scale": s, "average": fa, "worst": fw, "hessian": eig }));
    }

    let mut csv = format!("{SCALE_HEADER}\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.scale,
            r.clean_loss,
            r.robust_loss,
            r.robust_error,
            r.prediction_agreement,
            r.average_flatness,
            r.worst_flatness,
            r.lambda_max,
            r.lambda_min,
            r.convexity_ratio,
            r.hessian_converged
        ));
    }
    std::fs::write(out.join("scale_check.csv"), csv)?;

    let mut by_scale = rows.clone();
    by_scale.sort_by(|x, y| x.scale.total_cmp(&y.scale));
    let col = |f: fn(&ScaleRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    let mut summary = l.describe(&a.data);
    summary["rows"] = serde_json::to_value(&rows)?;
    summary["average_spread"] = json!(max_relative_spread(&col(|r| r.average_flatness)));
    summary["worst_spread"] = json!(max_relative_spread(&col(|r| r.worst_flatness)));
    summary["convexity_ratio_spread"] = json!(max_relative_spread(&col(|r| r.convexity_ratio)));
    summary["lambda_max_decreasing_in_scale"] = json!(by_scale.windows(2).all(|w| w[0].lambda_max > w[1].lambda_max));
    summary["predictions_identical"] = json!(rows.iter().all(|r| r.prediction_agreement == 1.0));
    write_json(&out.join("scale_check.json"), &json!({ "summary": summary, "reports": reports }))?;
    l.outcome(&a.data, vec!["scale_check.csv".into(), "scale_check.json".into()], summary)
}
