// SPDX-License-Identifier: MIT OR Apache-2.0

//! `cotsteer`: corpus generation, toy-LM training, activation capture, probe
//! training, steered generation, sweeps and λ-bound reports.
//!
//! Exit codes: 0 success, 1 usage, 2 missing or unreadable artifact,
//! 3 runtime numeric failure.

mod commands;
mod config;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub const ARTIFACT_ROOT_ENV: &str = "COTSTEER_ARTIFACT_ROOT";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(cotsteer::Error),
}

impl From<cotsteer::Error> for CliError {
    fn from(e: cotsteer::Error) -> Self {
        CliError::Core(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) => core_exit_code(e),
        }
    }
}

fn core_exit_code(e: &cotsteer::Error) -> u8 {
    use cotsteer::Error as E;
    match e {
        E::InvalidArgument(_) | E::OutOfVocab(_) => 1,
        E::MissingArtifact(_)
        | E::Io(_)
        | E::Json(_)
        | E::Csv(_)
        | E::BadMagic { .. }
        | E::VersionMismatch { .. }
        | E::TruncatedRecord(_)
        | E::TruncatedHeader
        | E::InvalidEnum { .. } => 2,
        E::Generation { source, .. } => core_exit_code(source),
        _ => 3,
    }
}

#[derive(Debug, Parser)]
#[command(name = "cotsteer", version, about = "Hidden-state MAP steering on a synthetic two-mode testbed")]
pub struct Cli {
    /// TOML settings file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory that relative artifact paths resolve against.
    #[arg(long, global = true, env = ARTIFACT_ROOT_ENV, default_value = "artifacts")]
    pub artifact_root: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the two-mode arithmetic corpus.
    GenCorpus(GenCorpusArgs),
    /// Train the toy language model on a corpus.
    TrainLm(TrainLmArgs),
    /// Capture labeled hidden states at every (layer, site) into an activation file.
    CaptureToy(CaptureArgs),
    /// Train one probe per (layer, site) and print the F1 table.
    TrainProbes(TrainProbesArgs),
    /// Run one steering method over the evaluation set.
    Steer(SteerArgs),
    /// Sweep one hyperparameter and write one report row per grid point.
    Sweep(SweepArgs),
    /// Check stored optimizer traces against a λ value.
    BoundsReport(BoundsArgs),
    /// Print the structural summary of an activation file.
    Validate(ValidateArgs),
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    #[arg(long = "n")]
    pub n_problems: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub operand_min: Option<u32>,
    #[arg(long)]
    pub operand_max: Option<u32>,
    #[arg(long)]
    pub min_operands: Option<usize>,
    #[arg(long)]
    pub max_operands: Option<usize>,
    #[arg(long)]
    pub mode_mix: Option<f64>,
    #[arg(long, default_value = "corpus.jsonl")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainLmArgs {
    #[arg(long, default_value = "corpus.jsonl")]
    pub corpus: PathBuf,
    #[arg(long, default_value = "model.toylm")]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct CaptureArgs {
    #[arg(long, default_value = "model.toylm")]
    pub model: PathBuf,
    #[arg(long, default_value = "corpus.jsonl")]
    pub corpus: PathBuf,
    #[arg(long, default_value = "activations.actrec")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SiteArg {
    Attn,
    Mlp,
    IntLayer,
}

impl From<SiteArg> for cotsteer::Site {
    fn from(s: SiteArg) -> Self {
        match s {
            SiteArg::Attn => cotsteer::Site::Attn,
            SiteArg::Mlp => cotsteer::Site::Mlp,
            SiteArg::IntLayer => cotsteer::Site::IntLayer,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainProbesArgs {
    #[arg(long, default_value = "activations.actrec")]
    pub activations: PathBuf,
    #[arg(long, default_value = "probes")]
    pub out: PathBuf,
    #[arg(long)]
    pub top_fraction: Option<f64>,
    #[arg(long, value_enum)]
    pub site: Option<SiteArg>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub holdout: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    None,
    Optimize,
    CDim,
    CPca,
    CLr,
    PSvm,
    Da,
}

impl From<MethodArg> for cotsteer::pipeline::Method {
    fn from(m: MethodArg) -> Self {
        use cotsteer::pipeline::Method;
        match m {
            MethodArg::None => Method::None,
            MethodArg::Optimize => Method::Optimize,
            MethodArg::CDim => Method::CDim,
            MethodArg::CPca => Method::CPca,
            MethodArg::CLr => Method::CLr,
            MethodArg::PSvm => Method::PSvm,
            MethodArg::Da => Method::Da,
        }
    }
}

/// Inputs and hyperparameters shared by `steer` and `sweep`.
#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long, default_value = "model.toylm")]
    pub model: PathBuf,
    #[arg(long, default_value = "corpus.jsonl")]
    pub corpus: PathBuf,
    #[arg(long, default_value = "probes")]
    pub probes: PathBuf,
    #[arg(long, default_value = "activations.actrec")]
    pub activations: PathBuf,
    #[arg(long)]
    pub eval_size: Option<usize>,
    #[arg(long)]
    pub eval_seed: Option<u64>,
    #[arg(long)]
    pub top_fraction: Option<f64>,
    #[arg(long, value_enum)]
    pub site: Option<SiteArg>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub alpha0: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub noise: Option<bool>,
    #[arg(long)]
    pub strength: Option<f64>,
    #[arg(long)]
    pub max_new: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SteerArgs {
    #[arg(long, value_enum)]
    pub method: MethodArg,
    #[command(flatten)]
    pub run: RunArgs,
    /// Report CSV; defaults to `reports/<method>.csv`.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Trace directory; defaults to `traces/<method>`.
    #[arg(long)]
    pub traces: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    Lambda,
    Tau,
    Alpha0,
    MaxIters,
    Strength,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Lambda => "lambda",
            SweepParam::Tau => "tau",
            SweepParam::Alpha0 => "alpha0",
            SweepParam::MaxIters => "max_iters",
            SweepParam::Strength => "strength",
        }
    }

    pub fn default_grid(self) -> Vec<f64> {
        match self {
            SweepParam::Lambda => vec![0.0, 0.01, 0.1, 1.0, 5.0],
            SweepParam::Tau => vec![0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99],
            SweepParam::Alpha0 => vec![0.01, 0.05, 0.1, 0.5, 1.0],
            SweepParam::MaxIters => vec![10.0, 50.0, 100.0, 200.0],
            SweepParam::Strength => vec![0.5, 1.0, 2.0, 4.0, 8.0],
        }
    }
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub param: SweepParam,
    /// Comma-separated grid; defaults to the parameter's standard grid.
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
    #[arg(long, value_enum, default_value = "optimize")]
    pub method: MethodArg,
    #[command(flatten)]
    pub run: RunArgs,
    /// Defaults to `reports/sweep_<method>_<param>.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BoundsArgs {
    /// Directory of optimizer trace CSVs written by `steer`.
    #[arg(long, default_value = "traces/optimize")]
    pub traces: PathBuf,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, default_value = "reports/bounds.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    pub file: PathBuf,
}

/// Absolute paths pass through; relative ones hang off the artifact root.
pub fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
