//! Command-line surface. Parsing lives here; the work happens in
//! [`crate::experiment`]. Every command exits 0 on success, 2 on usage
//! errors, 3 on data/config errors, and 4 on numeric divergence, printing
//! a single machine-parseable `error: ...` line on failure.

use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::evaluation::MetricSpace;
use crate::experiment::{
    run_evaluate, run_forecast, run_ingest, run_report, run_synth, run_train, CliError,
    EvaluateArgs, ForecastArgs, IngestArgs, Overrides, ReportArgs, RunArgs, SynthArgs,
    EXIT_OK, EXIT_USAGE,
};

#[derive(Parser)]
#[command(
    name = "lobcast",
    about = "Forecast full limit order books with an attention encoder-decoder",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by the config-driven commands; each one overrides the
/// corresponding config-file field.
#[derive(Args, Clone)]
struct OverrideFlags {
    /// Experiment config file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the model: temporal, per_variable, compound, or linear.
    #[arg(long)]
    mode: Option<String>,
    /// Override the transform pipeline: percent, minmax, or both.
    #[arg(long)]
    transform: Option<String>,
    /// Override the context length L_c.
    #[arg(long)]
    context: Option<usize>,
    /// Override the target length L_t.
    #[arg(long)]
    target: Option<usize>,
}

impl OverrideFlags {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            mode: self.mode.clone(),
            transform: self.transform.clone(),
            context: self.context,
            target: self.target,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trading day and write the dataset format.
    Synth {
        /// Generator seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of book events to simulate.
        #[arg(long)]
        steps: usize,
        #[arg(long, default_value_t = 1)]
        tickers: usize,
        /// Book depth K.
        #[arg(long, default_value_t = 5)]
        levels: usize,
        /// Grid spacing in seconds.
        #[arg(long, default_value_t = 5.0)]
        interval: f64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Parse a LOBSTER orderbook/message pair onto the grid.
    Ingest {
        /// Orderbook CSV (4K columns, prices in 1e-4 dollars).
        #[arg(long)]
        orderbook: PathBuf,
        /// Message CSV (timestamps in column one).
        #[arg(long)]
        messages: PathBuf,
        /// Ticker label for the dataset header.
        #[arg(long)]
        ticker: String,
        #[arg(long, default_value_t = 5)]
        levels: usize,
        #[arg(long, default_value_t = 5.0)]
        interval: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the configured model; writes checkpoints and a metrics log.
    Train {
        #[command(flatten)]
        flags: OverrideFlags,
        /// Output directory for config.toml, checkpoints, metrics.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on the test windows (scaled and dollar rows).
    Evaluate {
        #[command(flatten)]
        flags: OverrideFlags,
        /// Model checkpoint (best.ckpt from a training run).
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export one test window's forecast in original units.
    Forecast {
        #[command(flatten)]
        flags: OverrideFlags,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test window index.
        #[arg(long, default_value_t = 0)]
        window: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Combine eval.csv rows from several runs into one comparison table.
    Report {
        /// Run directories containing eval.csv.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Which metric space to compare: scaled or dollars.
        #[arg(long, default_value = "dollars")]
        space: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth {
            seed,
            steps,
            tickers,
            levels,
            interval,
            out,
        } => run_synth(&SynthArgs {
            seed,
            steps,
            tickers,
            levels,
            interval,
            out,
        }),
        Command::Ingest {
            orderbook,
            messages,
            ticker,
            levels,
            interval,
            out,
        } => run_ingest(&IngestArgs {
            orderbook,
            messages,
            ticker,
            levels,
            interval,
            out,
        }),
        Command::Train { flags, out } => run_train(&RunArgs {
            config: flags.config.clone(),
            overrides: flags.overrides(),
            out,
        }),
        Command::Evaluate {
            flags,
            checkpoint,
            out,
        } => run_evaluate(&EvaluateArgs {
            config: flags.config.clone(),
            overrides: flags.overrides(),
            checkpoint,
            out,
        }),
        Command::Forecast {
            flags,
            checkpoint,
            window,
            out,
        } => run_forecast(&ForecastArgs {
            config: flags.config.clone(),
            overrides: flags.overrides(),
            checkpoint,
            window,
            out,
        }),
        Command::Report { runs, space, out } => {
            let space = MetricSpace::parse(&space).ok_or_else(|| {
                CliError::Usage(format!("unknown --space {space:?} (scaled|dollars)"))
            })?;
            run_report(&ReportArgs { runs, space, out })
        }
    }
}

/// Entry point behind `main`; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version are not failures.
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
