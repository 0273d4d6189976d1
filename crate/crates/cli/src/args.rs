use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Clone, Parser)]
#[command(name = "robflat", version, about = "Adversarial training and robust-loss flatness measurements")]
pub struct Cli {
    /// Seed for training (overrides `train.seed`) or for the measurement.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads; 1 gives bit-reproducible runs.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    /// Directory for outputs and the run manifest.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Adversarially train the configured network.
    Train(TrainArgs),
    /// Clean and robust loss / error of a checkpoint.
    Eval(EvalArgs),
    /// Average- or worst-case flatness of a checkpoint.
    Flatness(FlatnessArgs),
    /// Loss profile along random, adversarial or top-Hessian weight directions.
    Landscape(LandscapeArgs),
    /// Extreme Hessian eigenvalues of the clean loss.
    Hessian(HessianArgs),
    /// Rescale batch-norm-followed layers and compare measurements.
    ScaleCheck(ScaleCheckArgs),
    /// Join metrics logs and flatness reports of several runs into one CSV.
    Report(ReportArgs),
    /// Re-run a command from its manifest and compare the outputs byte for byte.
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Flatness(_) => "flatness",
            Command::Landscape(_) => "landscape",
            Command::Hessian(_) => "hessian",
            Command::ScaleCheck(_) => "scale-check",
            Command::Report(_) => "report",
            Command::Replay(_) => "replay",
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Override `train.epochs`.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Also write `checkpoints/epoch-NNNN.ckpt` every this many epochs.
    #[arg(long, default_value_t = 0)]
    pub save_every: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    Holdout,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Use only the first N examples of the split.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct AttackArgs {
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub pgd_steps: Option<usize>,
    #[arg(long)]
    pub pgd_lr: Option<f64>,
    #[arg(long)]
    pub restarts: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub attack: AttackArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Average,
    Worst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Robust,
    Clean,
}

#[derive(Debug, Clone, Default, Args)]
pub struct FlatnessOverrides {
    #[arg(long, value_enum)]
    pub loss: Option<LossArg>,
    #[arg(long)]
    pub xi: Option<f64>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub joint_steps: Option<usize>,
    #[arg(long)]
    pub nu_step: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct FlatnessArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Named preset from the config's `[flatness.*]` tables or a built-in one
    /// (`average`, `worst`, `worst_small`). Defaults to the value of `--mode`.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[command(flatten)]
    pub flatness: FlatnessOverrides,
    #[command(flatten)]
    pub attack: AttackArgs,
    /// Output file name inside the output directory.
    #[arg(long, default_value = "flatness.json")]
    pub output: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DirectionArg {
    Random,
    Adversarial,
    HessianTop,
}

#[derive(Debug, Clone, Args)]
pub struct LandscapeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value_t = DirectionArg::Random)]
    pub direction: DirectionArg,
    /// Grid points in [-1, 1].
    #[arg(long, default_value_t = 51)]
    pub steps: usize,
    #[arg(long, default_value_t = 10)]
    pub directions: usize,
    /// Direction length after per-layer normalization.
    #[arg(long)]
    pub length: Option<f64>,
    /// Flatness preset supplying the attack (and, for adversarial
    /// directions, the ball). Defaults to `worst` for adversarial directions
    /// and `average` otherwise.
    #[arg(long)]
    pub preset: Option<String>,
    #[command(flatten)]
    pub flatness: FlatnessOverrides,
    #[command(flatten)]
    pub attack: AttackArgs,
    #[arg(long, default_value = "landscape.csv")]
    pub output: String,
}

#[derive(Debug, Clone, Args)]
pub struct PowerArgs {
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value_t = 1000)]
    pub max_iters: usize,
}

#[derive(Debug, Clone, Args)]
pub struct HessianArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub power: PowerArgs,
}

#[derive(Debug, Clone, Args)]
pub struct ScaleCheckArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.5, 1.0, 2.0])]
    pub scales: Vec<f64>,
    /// Preset for the average-case column.
    #[arg(long, default_value = "average")]
    pub average_preset: String,
    /// Preset for the worst-case column.
    #[arg(long, default_value = "worst")]
    pub worst_preset: String,
    #[command(flatten)]
    pub flatness: FlatnessOverrides,
    #[command(flatten)]
    pub attack: AttackArgs,
    #[command(flatten)]
    pub power: PowerArgs,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Run directories, each holding `metrics.jsonl` and `flatness*.json` files.
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long, default_value = "report.csv")]
    pub output: String,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}
