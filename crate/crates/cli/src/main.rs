mod artifacts;
mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "sinkscope", version, about = "Secondary attention sink analysis on synthetic and recorded traces")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Seed for scenario generation and random comparison sets.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON file with detector and analysis settings; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub tau_cos: Option<f64>,
    #[arg(long = "norm-gate", global = true)]
    pub norm_gate: Option<f64>,
    #[arg(long, global = true)]
    pub min_run: Option<usize>,
    /// Output directory, or `-` for standard output.
    #[arg(short = 'o', long = "output", global = true)]
    pub output: Option<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build a synthetic model with planted sinks.
    Generate {
        /// Scenario JSON; overrides --preset.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, value_enum)]
        preset: Option<Preset>,
    },
    /// Run a model over a token sequence and record activations.
    Trace {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        tokens: PathBuf,
        /// JSON list of interventions applied during the forward pass.
        #[arg(long)]
        interventions: Option<PathBuf>,
        #[arg(long)]
        capture: Option<String>,
    },
    /// Find sink runs, levels and position statistics.
    Detect {
        #[arg(long)]
        trace: PathBuf,
    },
    /// Sink-scores per layer and head.
    Score {
        #[arg(long)]
        trace: PathBuf,
        /// Key positions to score; all positions when omitted.
        #[arg(long = "position", value_delimiter = ',')]
        positions: Vec<usize>,
    },
    /// MLP cosine trace, PCA probe, separability and swap experiments.
    Formation {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        tokens: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        /// runs.json from `detect`; detection is rerun when omitted.
        #[arg(long)]
        runs: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        swap_layers: Vec<usize>,
    },
    /// Depth profiles, norm correlations and the BOS valley.
    Effect {
        #[arg(long = "trace", required = true)]
        traces: Vec<PathBuf>,
        /// One runs.json per trace, in the same order.
        #[arg(long = "runs")]
        runs: Vec<PathBuf>,
        /// Extra layers for the score-ratio fits.
        #[arg(long = "ratio-layer", value_delimiter = ',')]
        ratio_layers: Vec<usize>,
    },
    /// Check an SNKT trace or SNKM model file.
    Validate { file: PathBuf },
    /// Summarise pipeline outputs as markdown and CSV.
    Report {
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Detection,
    Null,
    Pca,
    Staged,
    Valley,
}

/// Problems with how the tool was invoked rather than with the data.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<sinkscope::Error>() {
            use sinkscope::Error::*;
            return match e {
                Numerics { .. } | DegenerateVector(_) | Calibration(_) | SingularFit(_) => 3,
                _ => 2,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
