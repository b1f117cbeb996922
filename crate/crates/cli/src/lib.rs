//! Command-line front end and rating service.

pub mod commands;
pub mod service;

use std::path::PathBuf;

use angioqa::correlation::CorrelationError;
use angioqa::subjective::SubjectiveError;
use angioqa::synth::SynthError;
use angioqa::train::TrainError;
use angioqa::ModelError;
use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

/// Failure of a command. Data errors (bad or missing inputs) exit with 2,
/// everything else with 1.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Data(_) => 2,
            CliError::Internal(_) => 1,
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SubjectiveError> for CliError {
    fn from(e: SubjectiveError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CorrelationError> for CliError {
    fn from(e: CorrelationError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Tensor(_) => CliError::Internal(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(m) => m.into(),
            TrainError::Config(_)
            | TrainError::Data(_)
            | TrainError::Correlation { .. }
            | TrainError::Io(_)
            | TrainError::Json(_) => CliError::Data(e.to_string()),
            TrainError::Schedule { .. }
            | TrainError::NonFiniteGradient(_)
            | TrainError::NonFiniteLoss { .. } => CliError::Internal(e.to_string()),
        }
    }
}

/// Wraps an I/O error with the path it concerns.
pub fn io_error(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(
    name = "angioqa",
    version,
    about = "Quality assessment of synthetic angiography triplets"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic triplet dataset (PNG images, manifest, instruction records).
    GenData {
        #[arg(long, default_value_t = 2500)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.8)]
        train_fraction: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn a ratings log into MOS labels.
    Mos {
        #[arg(long)]
        ratings: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on the train split of a manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        overrides: TrainOverrides,
        /// Output directory for checkpoint.json and report.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-metric PLCC/SRCC of a checkpoint or a predictions file.
    Eval {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(
            long,
            conflicts_with = "predictions",
            required_unless_present = "predictions"
        )]
        checkpoint: Option<PathBuf>,
        /// CSV with columns id,vmc,vbd,oq.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Score against this MOS CSV instead of the manifest ground truth.
        #[arg(long)]
        mos: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Also write the table as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write per-triplet predicted scores as CSV.
    Predict {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::All)]
        split: SplitArg,
        /// Defaults to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train with and without the fusion module over several seeds.
    Ablate {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        overrides: TrainOverrides,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Train reports to reuse when their configuration matches a run.
        #[arg(long)]
        prior: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the rating API.
    Serve {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        ratings: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Number of leading manifest entries used for calibration.
        #[arg(long, default_value_t = 200)]
        calibration_size: usize,
    },
}

#[derive(Clone, Debug, Default, Args)]
pub struct TrainOverrides {
    /// JSON or key=value training configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub peak_lr: Option<f64>,
    /// Train the baseline without the fusion module.
    #[arg(long)]
    pub no_fusion: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    use commands as c;
    match cli.command {
        Command::GenData {
            n,
            seed,
            train_fraction,
            out,
        } => {
            let manifest = c::gen_data(n, seed, train_fraction, &out)?;
            println!("wrote {n} triplets to {}", manifest.display());
            Ok(())
        }
        Command::Mos { ratings, out } => c::mos(&ratings, &out, &mut std::io::stdout()).map(|_| ()),
        Command::Train {
            manifest,
            overrides,
            out,
        } => c::train(&manifest, &overrides, &out, &mut std::io::stdout()).map(|_| ()),
        Command::Eval {
            manifest,
            checkpoint,
            predictions,
            mos,
            split,
            out,
        } => {
            let source = match (checkpoint, predictions) {
                (Some(p), _) => c::PredictionSource::Checkpoint(p),
                (None, Some(p)) => c::PredictionSource::Csv(p),
                (None, None) => unreachable!("clap requires one of them"),
            };
            let table = c::eval(manifest.as_deref(), &source, mos.as_deref(), split)?;
            print!("{}", c::format_table(&table));
            if let Some(out) = out {
                let json = serde_json::to_string_pretty(&table)
                    .map_err(|e| CliError::Internal(e.to_string()))?;
                std::fs::write(&out, json).map_err(|e| io_error(&out, e))?;
            }
            Ok(())
        }
        Command::Predict {
            manifest,
            checkpoint,
            split,
            out,
        } => {
            let rows = c::predict(&manifest, &checkpoint, split)?;
            match out {
                Some(path) => {
                    let file = std::fs::File::create(&path).map_err(|e| io_error(&path, e))?;
                    c::write_predictions(&rows, file)
                }
                None => c::write_predictions(&rows, std::io::stdout()),
            }
        }
        Command::Ablate {
            manifest,
            overrides,
            seeds,
            prior,
            out,
        } => c::ablate(
            &manifest,
            &overrides,
            &seeds,
            &prior,
            &out,
            &mut std::io::stdout(),
        )
        .map(|_| ()),
        Command::Serve {
            manifest,
            ratings,
            port,
            host,
            calibration_size,
        } => {
            let config = service::ServiceConfig {
                manifest,
                ratings,
                calibration_size,
            };
            service::serve_blocking(config, &host, port)
        }
    }
}
