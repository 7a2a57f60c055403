//! `spx`: batch front end for the single-pixel sensing pipeline.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 non-convergence
//! under `--strict`.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use spx::SpxError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] SpxError),
    #[error("invalid usage: {0}")]
    Usage(String),
    #[error("cannot read input {0}")]
    Input(String),
    #[error("{0}")]
    NotConverged(String),
    #[error("check failed: {0}")]
    Check(String),
    #[error("manifest encoding: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => 2,
            Self::Core(SpxError::InvalidArgument(_)) => 2,
            Self::NotConverged(_) => 3,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "spx", version, about = "Single-pixel imaging simulator and privacy/behaviour sweeps")]
pub struct Cli {
    /// Verify existing outputs against their manifest instead of writing.
    #[arg(long, global = true)]
    pub check: bool,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a binary pattern library.
    GenPatterns(GenPatternsArgs),
    /// Render a synthetic dataset (scenes or sequences plus labels).
    Synth(SynthArgs),
    /// Measure scenes with the first M patterns of a library.
    Measure(MeasureArgs),
    /// Estimate offsets and gains from dark/reference frames and calibrate.
    Calibrate(CalibrateArgs),
    /// Reconstruct one frame from measurements.
    Reconstruct(ReconstructArgs),
    /// Spectrum and subspace-isometry diagnostics across rates.
    Diagnose(DiagnoseArgs),
    /// Accuracy-versus-rate sweep for one task.
    Sweep(SweepArgs),
    /// Critical rates and the safe interval from two curves.
    SafeInterval(SafeIntervalArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum KindArg {
    Speckle,
    Hadamard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskArg {
    Privacy,
    Behavior,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKindArg {
    None,
    Iid,
    Ar1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodArg {
    Ridge,
    Tv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RegularizerArg {
    Laplacian,
    Identity,
}

#[derive(Debug, Args, Serialize)]
pub struct GenPatternsArgs {
    #[arg(long, value_enum)]
    pub kind: KindArg,
    /// Number of patterns.
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub h: usize,
    #[arg(long)]
    pub w: usize,
    /// Ignored for Hadamard libraries.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SpecArgs {
    #[arg(long, default_value_t = 32)]
    pub h: usize,
    #[arg(long, default_value_t = 32)]
    pub w: usize,
    #[arg(long, default_value_t = 20)]
    pub identities: usize,
    #[arg(long, default_value_t = 4)]
    pub behaviors: usize,
    #[arg(long, default_value_t = 50)]
    pub samples_per_class: usize,
    /// Frames per behaviour sequence.
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    /// Measurement noise (iid Gaussian, effective units).
    #[arg(long, default_value_t = spx::synthdata::DEFAULT_NOISE_SIGMA)]
    pub noise_sigma: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, value_enum)]
    pub task: TaskArg,
    #[command(flatten)]
    #[serde(flatten)]
    pub spec: SpecArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (scenes.spmx, scenes.meta, labels.csv).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct NoiseArgs {
    #[arg(long, value_enum, default_value_t = NoiseKindArg::None)]
    pub noise: NoiseKindArg,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    /// AR(1) correlation between consecutive measurements.
    #[arg(long, default_value_t = 0.0)]
    pub phi: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct MeasureArgs {
    #[arg(long)]
    pub patterns: PathBuf,
    #[arg(long)]
    pub m: usize,
    /// Scenes file written by `synth` (N x frames).
    #[arg(long)]
    pub scenes: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub noise: NoiseArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Simulate a detector chain with this seed; also writes dark and reference frames.
    #[arg(long)]
    pub chain_seed: Option<u64>,
    #[arg(long, default_value_t = 0.5)]
    pub gain_lo: f64,
    #[arg(long, default_value_t = 2.0)]
    pub gain_hi: f64,
    #[arg(long, default_value_t = 1.0)]
    pub offset_sd: f64,
    #[arg(long, default_value_t = 256)]
    pub dark_frames: usize,
    #[arg(long, default_value_t = 256)]
    pub ref_frames: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub raw: PathBuf,
    #[arg(long)]
    pub dark: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub patterns: PathBuf,
    #[arg(long)]
    pub m: usize,
    /// Also whiten with the noise model recorded in the raw metadata; writes
    /// the whitened operator next to the output.
    #[arg(long)]
    pub whiten: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ReconstructArgs {
    /// Pattern library (used with --m).
    #[arg(long, requires = "m", conflicts_with = "operator")]
    pub patterns: Option<PathBuf>,
    #[arg(long)]
    pub m: Option<usize>,
    /// Dense operator written by `calibrate --whiten`.
    #[arg(long)]
    pub operator: Option<PathBuf>,
    #[arg(long)]
    pub meas: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub frame: usize,
    #[arg(long, value_enum, default_value_t = MethodArg::Ridge)]
    pub method: MethodArg,
    #[arg(long)]
    pub lambda: f64,
    #[arg(long, value_enum, default_value_t = RegularizerArg::Laplacian)]
    pub regularizer: RegularizerArg,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Exit with status 3 when the solver does not converge.
    #[arg(long)]
    pub strict: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub patterns: PathBuf,
    /// Measurement counts, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub rates: Vec<usize>,
    #[arg(long, default_value_t = spx::diagnostics::DEFAULT_EPS_RANK)]
    pub eps_rank: f64,
    #[arg(long, default_value_t = spx::diagnostics::DEFAULT_NUM_PROBES)]
    pub probes: usize,
    #[arg(long, default_value_t = 4)]
    pub subspace_dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = spx::diagnostics::DEFAULT_GRAM_LIMIT)]
    pub gram_limit: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub task: TaskArg,
    #[arg(long, value_delimiter = ',', required = true)]
    pub rates: Vec<usize>,
    /// Pattern library; a speckle library derived from --seed otherwise.
    #[arg(long)]
    pub patterns: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub spec: SpecArgs,
    #[arg(long, default_value_t = spx::recognisability::DEFAULT_TRIALS)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = spx::recognisability::DEFAULT_EPOCHS)]
    pub epochs: usize,
    #[arg(long, default_value_t = spx::recognisability::DEFAULT_LR)]
    pub lr: f64,
    #[arg(long, default_value_t = spx::recognisability::DEFAULT_L2)]
    pub l2: f64,
    /// Shuffle labels (chance-level control).
    #[arg(long)]
    pub permute_labels: bool,
    /// Worker threads; does not change results.
    #[arg(long, default_value_t = 1)]
    #[serde(skip)]
    pub jobs: usize,
    /// Defaults to curve_<task>.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SafeIntervalArgs {
    #[arg(long)]
    pub beh: PathBuf,
    #[arg(long = "priv")]
    pub privacy: PathBuf,
    #[arg(long)]
    pub alpha: f64,
    #[arg(long)]
    pub beta: f64,
    #[arg(long, default_value = "safe_interval.txt")]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.verbose {
            log::LevelFilter::Info
        } else {
            log::LevelFilter::Warn
        })
        .format_timestamp(None)
        .init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("spx: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
