//! `lfm-rff`: train, predict and inspect latent force models with random Fourier response features.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lfm_rff::LfmError;

use config::{KernelMode, ModelKind, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Model(#[from] LfmError),
    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
    #[error("{path}: invalid JSON: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::File { .. } | CliError::Json { .. } => 2,
            CliError::Model(e) => match e {
                LfmError::Parse { .. }
                | LfmError::InvalidData { .. }
                | LfmError::LengthMismatch { .. }
                | LfmError::InvalidSpec(_)
                | LfmError::Io(_) => 2,
                LfmError::NonFinite { .. }
                | LfmError::RootSeparation(..)
                | LfmError::RootFinding(_)
                | LfmError::Quadrature { .. }
                | LfmError::NotPositiveDefinite
                | LfmError::Numerical(_) => 3,
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "lfm-rff", version, about = "Latent force models with random Fourier response features")]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command; each overrides the matching config key.
#[derive(Debug, Args)]
struct CommonArgs {
    /// Model family: ode1, ode2, odeP or mogp.
    #[arg(long, global = true)]
    model: Option<ModelKind>,
    /// Number of frequency samples S per force.
    #[arg(long, global = true)]
    samples: Option<usize>,
    /// Number of latent forces Q.
    #[arg(long, global = true)]
    forces: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// key=value file with default settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Absolute tolerance of the quadrature oracle.
    #[arg(long, global = true)]
    oracle_tol: Option<f64>,
    /// Kernel evaluation mode: rff or oracle.
    #[arg(long, global = true)]
    mode: Option<KernelMode>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit hyperparameters to a training CSV.
    Train {
        data: PathBuf,
    },
    /// Predict outputs (and optionally latent forces) from a fit file.
    Predict {
        fit: PathBuf,
        test: PathBuf,
        /// Training data to condition on; defaults to the path recorded in the fit file.
        #[arg(long)]
        train: Option<PathBuf>,
        /// Time grid (header `t`) for latent-force predictions.
        #[arg(long)]
        latent_times: Option<PathBuf>,
        /// Report latent-function variance without observation noise.
        #[arg(long)]
        no_noise: bool,
    },
    /// Write the covariance matrix over a time grid for every output.
    KernelEval {
        times: PathBuf,
        /// Take hyperparameters from a fit file instead of the configured initial values.
        #[arg(long)]
        fit: Option<PathBuf>,
    },
    /// Time one objective-plus-gradient evaluation against the number of observations.
    Benchmark {
        #[arg(long, value_delimiter = ',', default_values_t = vec![1000, 2000, 4000, 8000])]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
    /// Write sampled frequencies and the feature matrix over a time grid.
    SampleFeatures {
        times: PathBuf,
    },
}

fn resolve(common: &CommonArgs) -> Result<RunConfig, CliError> {
    let mut c = RunConfig::load(common.config.as_deref())?;
    if let Some(v) = common.model {
        c.model = v;
    }
    if let Some(v) = common.samples {
        c.samples = v;
    }
    if let Some(v) = common.forces {
        c.forces = v;
    }
    if let Some(v) = common.seed {
        c.seed = v;
    }
    if let Some(v) = &common.out_dir {
        c.out_dir = v.clone();
    }
    if let Some(v) = common.oracle_tol {
        c.oracle_tol = v;
    }
    if let Some(v) = common.mode {
        c.mode = v;
    }
    c.validate()?;
    Ok(c)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config = resolve(&cli.common)?;
    std::fs::create_dir_all(&config.out_dir)
        .map_err(|source| CliError::File { path: config.out_dir.clone(), source })?;
    match cli.command {
        Command::Train { data } => commands::train(&config, &data),
        Command::Predict { fit, test, train, latent_times, no_noise } => {
            commands::predict(&config, &fit, &test, train.as_deref(), latent_times.as_deref(), !no_noise)
        }
        Command::KernelEval { times, fit } => commands::kernel_eval(&config, &times, fit.as_deref()),
        Command::Benchmark { sizes, reps } => commands::benchmark(&config, &sizes, reps),
        Command::SampleFeatures { times } => commands::sample_features(&config, &times),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
