//! The `connseg` command-line tool.

mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use connseg::PatternKind;

pub use config::{MetricOptions, RunConfig};

/// Process exit codes.
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_VERIFICATION: u8 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    /// Already rendered by clap.
    #[error("{0}")]
    Clap(#[from] clap::Error),
    #[error(transparent)]
    Data(#[from] connseg::Error),
    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Clap(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Verification(_) => EXIT_VERIFICATION,
        }
    }

    pub fn is_silent(&self) -> bool {
        matches!(self, CliError::Clap(_))
    }
}

#[derive(Debug, Parser)]
#[command(name = "connseg", version, about = "Salient segmentation by pixel connectivity")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a manifest.
    GenData(GenDataArgs),
    /// Encode a mask PNG into a connectivity cube.
    Encode(EncodeArgs),
    /// Decode a connectivity cube into a mask PNG.
    Decode(DecodeArgs),
    /// Train a model on a manifest.
    Train(TrainArgs),
    /// Predict masks with multi-scale flip fusion.
    Predict(PredictArgs),
    /// Score predictions against a ground-truth manifest.
    Eval(EvalArgs),
    /// Finite-difference check of every op and the full model.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    /// Generator spec (JSON); defaults are used for missing keys.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    count: Option<usize>,
}

#[derive(Debug, Args)]
struct EncodeArgs {
    #[arg(long)]
    mask: PathBuf,
    #[arg(long, default_value = "n8")]
    pattern: PatternKind,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DecodeArgs {
    #[arg(long)]
    cube: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    t: f64,
    #[arg(long, default_value_t = 1)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Run config (JSON with `model`, `train`, `fusion`, `metrics` sections).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest CSV.
    #[arg(long)]
    data: PathBuf,
    /// Run directory for checkpoints, log and the effective config.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    freeze_backbone_steps: Option<usize>,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("input").required(true).args(["image", "manifest"])))]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Single input image; requires --out.
    #[arg(long, requires = "out")]
    image: Option<PathBuf>,
    /// Predict every record of a manifest; requires --out-dir.
    #[arg(long, requires = "out_dir")]
    manifest: Option<PathBuf>,
    /// Fusion plan (JSON). Defaults to 5 scales with flips.
    #[arg(long)]
    fusion: Option<PathBuf>,
    /// Run config whose `model` section overrides the checkpoint sidecar.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output mask PNG.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fused probabilities: CCUB for connectivity heads, grayscale PNG otherwise.
    #[arg(long)]
    prob_out: Option<PathBuf>,
    /// Per-record outputs `<stem>.ccub` or `<stem>.png` (probabilities) and `<stem>.mask.png`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    t: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Directory with `<stem>.ccub` (connectivity) or `<stem>.png` (saliency) per record.
    #[arg(long)]
    pred_dir: PathBuf,
    #[arg(long)]
    gt_manifest: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Number of threshold midpoints.
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    dataset: Option<String>,
    /// Optional PR-curve CSV.
    #[arg(long)]
    pr_csv: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("CONNSEG_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("CONNSEG_THREADS must be a positive integer, got {v:?}")))?;
    // a second initialization in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            e.print().ok();
            return Ok(());
        }
        Err(e) => {
            e.print().ok();
            return Err(CliError::Clap(e));
        }
    };
    init_threads()?;
    match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Encode(a) => commands::encode(a),
        Command::Decode(a) => commands::decode(a),
        Command::Train(a) => commands::train(a),
        Command::Predict(a) => commands::predict(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    }
}
