//! Command-line orchestration: one TOML config drives every stage, flags
//! override it.
//!
//! Exit codes: 0 success, 1 planted-bias check failed, 2 configuration
//! error, 3 data error, 4 backend or transport error.

pub mod commands;
pub mod config;
pub mod simulate;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::RunConfig;
pub use simulate::{run_planted, PlantedRow, PlantedRun};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("backend error: {0}")]
    Backend(String),
    #[error("check failed: {0}")]
    Check(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Check(_) => 1,
            Self::Config(_) => 2,
            Self::Data(_) => 3,
            Self::Backend(_) => 4,
        }
    }
}

impl From<crate::dataset::DatasetError> for CliError {
    fn from(e: crate::dataset::DatasetError) -> Self {
        use crate::dataset::DatasetError as D;
        match e {
            D::UnknownAttribute(_) => Self::Config(e.to_string()),
            other => Self::Data(other.to_string()),
        }
    }
}

impl From<crate::codec::CodecError> for CliError {
    fn from(e: crate::codec::CodecError) -> Self {
        use crate::codec::CodecError as C;
        match e {
            C::Config(_) | C::UnknownAttribute(_) => Self::Config(e.to_string()),
            other => Self::Data(other.to_string()),
        }
    }
}

impl From<crate::synth::SynthError> for CliError {
    fn from(e: crate::synth::SynthError) -> Self {
        use crate::synth::SynthError as S;
        match e {
            S::TooFewPoints(_) | S::BadRange { .. } | S::NotSensitive(_) => Self::Config(e.to_string()),
            other => Self::Data(other.to_string()),
        }
    }
}

impl From<crate::probe::ProbeError> for CliError {
    fn from(e: crate::probe::ProbeError) -> Self {
        match e {
            crate::probe::ProbeError::Config(m) => Self::Config(m),
            other => Self::Backend(other.to_string()),
        }
    }
}

impl From<crate::probe::StoreError> for CliError {
    fn from(e: crate::probe::StoreError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<crate::slopes::SlopeError> for CliError {
    fn from(e: crate::slopes::SlopeError) -> Self {
        use crate::slopes::SlopeError as S;
        match e {
            S::Invalid(_) | S::EvenGrid(_) => Self::Config(e.to_string()),
            other => Self::Data(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "cfaudit", version, about = "Counterfactual sensitivity audits of image-labelling services")]
pub struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Root seed; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Redo work whose output already exists.
    #[arg(long, global = true)]
    pub force: bool,
    /// Validate inputs and report what would run, without writing.
    #[arg(long, global = true)]
    pub dry_run: bool,
    /// Probe backend: simulated, replay, google, amazon, ibm, clarifai.
    #[arg(long, global = true)]
    pub backend: Option<String>,
    /// Request rate limit (requests per second).
    #[arg(long, global = true)]
    pub rps: Option<f64>,
    /// Maximum concurrent backend requests.
    #[arg(long, global = true)]
    pub max_in_flight: Option<usize>,
    /// Probe store directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub store: Option<PathBuf>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the manifest if needed and train the codec.
    Train,
    /// Write a counterfactual series for every source image.
    Synthesize,
    /// Send every series image to the backend, through the store cache.
    Probe,
    /// Aggregate rates and fit slopes; writes analysis.json.
    Analyze,
    /// Write slope tables, curves, exclusions and metadata.
    Report {
        /// Report precomputed slopes (JSON) instead of analysis.json.
        #[arg(long, value_name = "FILE")]
        slopes: Option<PathBuf>,
        /// Output directory; defaults to the configured report dir.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Planted-bias end-to-end check with the simulated backend.
    Simulate {
        /// Series per seed.
        #[arg(long)]
        n_series: Option<usize>,
        /// Working directory for stores and results.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Per-keyword representation of an annotated attribute.
    Stats {
        /// Attribute to tabulate; defaults to the sensitive attribute.
        #[arg(long)]
        attribute: Option<String>,
    },
}

/// Loads the config named by `--config` and applies flag overrides.
pub fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config is required for this command".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(b) = &cli.backend {
        cfg.probe.backend = b.clone();
    }
    if let Some(r) = cli.rps {
        cfg.probe.rps = Some(r);
    }
    if let Some(m) = cli.max_in_flight {
        cfg.probe.max_in_flight = m;
    }
    if let Some(s) = &cli.store {
        cfg.paths.store = s.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs one command and returns the process exit code.
pub fn run(cli: &Cli) -> i32 {
    let result = match &cli.command {
        Command::Simulate { n_series, out } => commands::simulate(cli, *n_series, out.as_deref()),
        Command::Report { slopes, out } => commands::report(cli, slopes.as_deref(), out.as_deref()),
        other => load_config(cli).and_then(|cfg| match other {
            Command::Train => commands::train(&cfg, cli),
            Command::Synthesize => commands::synthesize(&cfg, cli),
            Command::Probe => commands::probe(&cfg, cli),
            Command::Analyze => commands::analyze(&cfg, cli),
            Command::Stats { attribute } => commands::stats(&cfg, cli, attribute.as_deref()),
            Command::Report { .. } | Command::Simulate { .. } => unreachable!("handled above"),
        }),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
