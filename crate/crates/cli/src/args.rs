use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "elf",
    version,
    about = "Train and evaluate multi-exit networks on long-tailed data",
    after_help = "Every flag except --config may also be set as `key = value` in a config file \
                  given by --config; flags on the command line win."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a long-tailed training set and a balanced evaluation set
    #[command(args_override_self = true)]
    GenData(GenDataArgs),
    /// Train a multi-exit network and write a checkpoint and epoch log
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Evaluate a checkpoint: split accuracy, FLOPs, per-exit loss, histograms
    #[command(args_override_self = true)]
    Eval(EvalArgs),
    /// Sweep the inference threshold and write the accuracy-FLOP curve
    #[command(args_override_self = true)]
    Sweep(SweepArgs),
    /// Print a results table from eval summaries
    #[command(args_override_self = true)]
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Config file of `key = value` lines; `#` starts a comment line
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Leave out the timestamp header line of every output file
    #[arg(long)]
    pub no_timestamp: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims(pub [usize; 3]);

impl FromStr for Dims {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<usize> = s
            .split(['x', 'X', ','])
            .map(|p| p.trim().parse::<usize>().map_err(|e| format!("bad dimension {p:?}: {e}")))
            .collect::<Result<_, _>>()?;
        match parts[..] {
            [c, h, w] if c > 0 && h > 0 && w > 0 => Ok(Dims([c, h, w])),
            _ => Err(format!("expected CxHxW with positive sizes, got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct GenDataArgs {
    /// Number of classes
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    /// Example shape as CxHxW
    #[arg(long, default_value = "1x5x5")]
    pub dims: Dims,
    /// Head-to-tail class count ratio of the training set
    #[arg(long, default_value_t = 100.0)]
    pub ratio: f64,
    /// Training examples of the largest class
    #[arg(long, default_value_t = 5000)]
    pub n: usize,
    /// Per-element noise standard deviation around each class mean
    #[arg(long, default_value_t = 1.5)]
    pub sigma: f64,
    /// Examples per class in the balanced evaluation set
    #[arg(long, default_value_t = 500)]
    pub eval_per_class: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for train.elfd and eval.elfd
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossKind {
    Ce,
    Focal,
    Ldam,
}

/// A number, or `auto` for a default derived from other settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Auto<T> {
    Auto,
    Value(T),
}

impl<T: FromStr> FromStr for Auto<T>
where
    T::Err: std::fmt::Display,
{
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s.eq_ignore_ascii_case("auto") {
            Ok(Auto::Auto)
        } else {
            s.parse().map(Auto::Value).map_err(|e| format!("{s:?}: {e}"))
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct LossArgs {
    /// Per-exit loss
    #[arg(long, value_enum, default_value = "ce")]
    pub loss: LossKind,
    /// Effective-number beta for class reweighting
    #[arg(long, default_value_t = 0.9999)]
    pub beta: f64,
    /// Focal loss exponent
    #[arg(long, default_value_t = 0.5)]
    pub gamma: f64,
    /// LDAM margin of the rarest class
    #[arg(long, default_value_t = 0.5)]
    pub max_margin: f64,
    /// Training exit threshold; auto is 0.9 for ce and focal, 2/classes for ldam
    #[arg(long, default_value = "auto")]
    pub train_threshold: Auto<f64>,
}

/// Epoch list for learning-rate decay: `auto`, `none`, or `EPOCH:FACTOR,...`.
#[derive(Debug, Clone, PartialEq)]
pub enum DecaySpec {
    Auto,
    Steps(Vec<(usize, f64)>),
}

impl FromStr for DecaySpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "auto" => Ok(DecaySpec::Auto),
            "none" | "" => Ok(DecaySpec::Steps(Vec::new())),
            list => list
                .split(',')
                .map(|step| {
                    let (e, f) = step
                        .split_once(':')
                        .ok_or_else(|| format!("expected EPOCH:FACTOR, got {step:?}"))?;
                    let e = e.trim().parse().map_err(|err| format!("{e:?}: {err}"))?;
                    let f = f.trim().parse().map_err(|err| format!("{f:?}: {err}"))?;
                    Ok((e, f))
                })
                .collect::<Result<_, String>>()
                .map(DecaySpec::Steps),
        }
    }
}

/// DRW switch epoch: `auto`, `none`, or an epoch number.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DrwSpec {
    Auto,
    Disabled,
    Epoch(usize),
}

impl FromStr for DrwSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "auto" => Ok(DrwSpec::Auto),
            "none" => Ok(DrwSpec::Disabled),
            n => n.parse().map(DrwSpec::Epoch).map_err(|e| format!("{n:?}: {e}")),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Training set (ELFD)
    #[arg(long, default_value = "data/train.elfd")]
    pub data: PathBuf,
    /// Output directory for model.elfc and train_log.csv
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    #[command(flatten)]
    pub loss: LossArgs,
    /// Number of exits
    #[arg(long, default_value_t = 3)]
    pub exits: usize,
    /// Channel count of each backbone block
    #[arg(long, value_delimiter = ',', default_value = "16,32,64")]
    pub widths: Vec<usize>,
    #[arg(long, default_value_t = 40)]
    pub epochs: usize,
    /// Batch size
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    /// Peak learning rate
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    /// Weight decay
    #[arg(long, default_value_t = 2e-4)]
    pub wd: f64,
    /// Linear warmup epochs
    #[arg(long, default_value_t = 5)]
    pub warmup: usize,
    /// EPOCH:FACTOR list, none, or auto (x0.01 at 80% and 90% of the epochs)
    #[arg(long, default_value = "auto")]
    pub lr_decay: DecaySpec,
    /// Epoch at which class reweighting starts, none, or auto (80% of the epochs)
    #[arg(long, default_value = "auto")]
    pub drw_epoch: DrwSpec,
    /// Seed for initialization and shuffling
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WeightKind {
    Uniform,
    Effective,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Checkpoint (ELFC)
    #[arg(long, default_value = "run/model.elfc")]
    pub model: PathBuf,
    /// Balanced evaluation set (ELFD)
    #[arg(long, default_value = "data/eval.elfd")]
    pub data: PathBuf,
    /// Training set; its class counts define the splits
    #[arg(long, default_value = "data/train.elfd")]
    pub train_data: PathBuf,
    /// Output directory for the CSVs and summary.json
    #[arg(long, default_value = "run/eval")]
    pub out: PathBuf,
    #[command(flatten)]
    pub loss: LossArgs,
    /// Class weights of the per-exit loss statistics
    #[arg(long, value_enum, default_value = "effective")]
    pub class_weights: WeightKind,
    /// Inference exit threshold; auto uses the training threshold
    #[arg(long, default_value = "auto")]
    pub infer_threshold: Auto<f64>,
    /// Confidence histogram bins
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    /// Checkpoint (ELFC)
    #[arg(long, default_value = "run/model.elfc")]
    pub model: PathBuf,
    /// Evaluation set (ELFD)
    #[arg(long, default_value = "data/eval.elfd")]
    pub data: PathBuf,
    /// Output directory for curve.csv
    #[arg(long, default_value = "run/sweep")]
    pub out: PathBuf,
    /// Loss the checkpoint was trained with; picks the auto grid
    #[arg(long, value_enum, default_value = "ce")]
    pub loss: LossKind,
    /// Comma-separated thresholds, or auto (0.5..0.95 step 0.05; for ldam 1.5..1.75 step 0.05, divided by classes)
    #[arg(long, default_value = "auto")]
    pub grid: GridSpec,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, PartialEq)]
pub enum GridSpec {
    Auto,
    Values(Vec<f64>),
}

impl FromStr for GridSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s.trim() == "auto" {
            return Ok(GridSpec::Auto);
        }
        s.split(',')
            .filter(|v| !v.trim().is_empty())
            .map(|v| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}")))
            .collect::<Result<_, _>>()
            .map(GridSpec::Values)
    }
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// summary.json files written by eval
    #[arg(required = true)]
    pub summaries: Vec<PathBuf>,
    /// Also write the table to this file
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}
