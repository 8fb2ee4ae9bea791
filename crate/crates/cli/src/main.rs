use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] tos_core::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    fn exit_code(&self) -> u8 {
        use tos_core::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Core(e) => match e {
                E::Config(_) | E::Usage(_) | E::Generation(_) => 2,
                E::Io(_) => 3,
                E::Numerical(_) | E::Geometry(_) => 4,
                E::Parse { .. } | E::Json(_) | E::Checkpoint(_) => 5,
            },
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "tosmtl", version, about = "Activation-time estimation from strain matrices")]
struct Cli {
    /// TOML run configuration; command-line flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic strain dataset.
    Gen(GenArgs),
    /// Train a multi-task or regression-only network.
    Train(TrainArgs),
    /// Predict TOS (and LMA labels) with a trained network.
    Predict(PredictArgs),
    /// Active-contour TOS baseline.
    Snake(SnakeArgs),
    /// Grad-CAM map for one record and sector.
    Gradcam(GradcamArgs),
    /// Scar-stratified comparison of prediction files.
    Eval(EvalArgs),
    /// Interpolated 3D activation surface from per-slice TOS curves.
    Surface(SurfaceArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long)]
    pub patients: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub scar_prob: Option<f64>,
    #[arg(long, default_value = "data.jsonl")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TaskArg {
    Mtl,
    Reg,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "mtl")]
    pub task: TaskArg,
    #[arg(long, default_value = "model.ckpt")]
    pub out: PathBuf,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lambda_cls: Option<f64>,
    #[arg(long)]
    pub reg_l1: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Patients held out for testing (listed in `<out>.split.json`).
    #[arg(long)]
    pub test_patients: Option<usize>,
    #[arg(long)]
    pub split_seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "predictions.jsonl")]
    pub out: PathBuf,
    /// Restrict to the test patients of a split file written by `train`.
    #[arg(long)]
    pub split: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SnakeArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "snake.jsonl")]
    pub out: PathBuf,
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum CenterArg {
    Predicted,
    GroundTruth,
}

#[derive(Args, Debug)]
pub struct GradcamArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub record: String,
    /// Target sector, or `auto` for the centre of the LMA run.
    #[arg(long, default_value = "auto")]
    pub sector: String,
    /// Labels used by `--sector auto`.
    #[arg(long, value_enum, default_value = "predicted")]
    pub center: CenterArg,
    #[arg(long, default_value = tos_core::gradcam::DEFAULT_TARGET_LAYER)]
    pub layer: String,
    #[arg(long, default_value = "gradcam.json")]
    pub out: PathBuf,
    /// Defaults to the output path with `.svg` appended.
    #[arg(long)]
    pub svg: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Prediction files; repeat or comma-separate.
    #[arg(long, required = true, num_args = 1.., value_delimiter = ',')]
    pub pred: Vec<PathBuf>,
    #[arg(long, default_value = "eval")]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub split: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SurfaceArgs {
    /// Per-slice TOS curve files (JSON arrays, ms), apex to base.
    #[arg(long, num_args = 1.., value_delimiter = ',', conflicts_with_all = ["pred", "data", "patient"])]
    pub slices: Vec<PathBuf>,
    #[arg(long, requires_all = ["data", "patient"])]
    pub pred: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub patient: Option<String>,
    /// Method to use when the prediction file holds several.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long, default_value = "surface.json")]
    pub out: PathBuf,
    #[arg(long)]
    pub svg: Option<PathBuf>,
}

fn threads() -> Result<usize, CliError> {
    match std::env::var("TOSMTL_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::Usage(format!("TOSMTL_THREADS must be a positive integer, got {v:?}"))),
        },
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = config::RunConfig::load(cli.config.as_deref())?;
    let threads = threads()?;
    match cli.command {
        Command::Gen(a) => commands::gen(&cfg, &a),
        Command::Train(a) => commands::train(&cfg, &a),
        Command::Predict(a) => commands::predict(&cfg, &a, threads),
        Command::Snake(a) => commands::snake(&cfg, &a, threads),
        Command::Gradcam(a) => commands::gradcam(&cfg, &a),
        Command::Eval(a) => commands::eval(&cfg, &a),
        Command::Surface(a) => commands::surface(&cfg, &a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
