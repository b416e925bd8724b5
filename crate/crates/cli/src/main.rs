//! `rafter` — knowledge-base construction, retrieval, forecasting,
//! evaluation, and fault-precursor detection over regime stores.
//!
//! Exit codes: 0 success, 2 usage, 3 data error, 4 backend error.

mod commands;
mod config;
mod queryfile;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rafter_core::error::Error;

#[derive(Parser)]
#[command(name = "rafter", version, about = "Retrieval-augmented forecasting for operational regimes")]
struct Cli {
    /// TOML run configuration; flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for synthesis and query selection.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Knowledge-base store directory.
    #[arg(long, global = true)]
    kb: Option<PathBuf>,
    /// Worker threads (0 = automatic).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Scope prefix, e.g. B777 or B777/plane003.
    #[arg(long, global = true)]
    scope: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic fleet into the store layout plus labels.csv.
    Synth {
        /// Output directory (defaults to --kb).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        planes: Option<usize>,
        /// Flights per plane: a count `N` or a log-uniform range `MIN..MAX`.
        #[arg(long)]
        flights: Option<String>,
        /// Comma-separated plane indices to fault-inject.
        #[arg(long)]
        fault_planes: Option<String>,
        #[arg(long)]
        fault_onset: Option<usize>,
        #[arg(long)]
        fault_intermittency: Option<f64>,
        #[arg(long)]
        fault_magnitude: Option<f64>,
    },
    /// Validate sample CSVs under the store and write the metadata document.
    BuildKb {
        /// Directory to ingest (defaults to --kb).
        #[arg(long)]
        source: Option<PathBuf>,
        /// Target variable name; the remaining columns become covariates.
        #[arg(long, default_value = "MP")]
        target: String,
        /// Accept over-long samples by keeping their trailing rows.
        #[arg(long)]
        truncate_tail: bool,
        /// Histogram bins for the covariate-weight cache.
        #[arg(long)]
        bins: Option<usize>,
        #[arg(long)]
        regime_len: Option<usize>,
    },
    /// Rank the Top-K references for a query window.
    Retrieve {
        /// Query CSV: full window, future target cells may be empty.
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        multiplier: Option<usize>,
        /// Dump each retrieved regime as rank_<r>.csv into this directory.
        #[arg(long)]
        emit_regimes: Option<PathBuf>,
        /// Export the fused weight matrix as CSV.
        #[arg(long)]
        emit_weights: Option<PathBuf>,
    },
    /// Forecast a query window with calibrated or fixed context.
    Forecast {
        #[arg(long)]
        query: PathBuf,
        /// Context selection: `dynamic` or `fixed:<n>`.
        #[arg(long, default_value = "dynamic")]
        k: String,
        #[arg(long)]
        backend: Option<String>,
        #[arg(long)]
        metric: Option<String>,
        /// Write the spliced context (with synthetic uniform timestamps).
        #[arg(long)]
        emit_chain: Option<PathBuf>,
    },
    /// Run an ablation suite over the stored fleet.
    Evaluate {
        /// weighting | metric | kb-scope | context-k | covariate
        #[arg(long)]
        suite: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        queries: Option<usize>,
        #[arg(long)]
        force: bool,
    },
    /// Score deviations and fire rolling-window precursor alerts.
    Detect {
        /// CSV of (device,timestamp,deviation); omit to score the stored
        /// fleet inline.
        #[arg(long)]
        records: Option<PathBuf>,
        /// Policy TOML, or `default` to calibrate from the stream.
        #[arg(long, default_value = "default")]
        policy: String,
        #[arg(long)]
        alerts_out: Option<PathBuf>,
        #[arg(long)]
        timeline_out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
}

/// Wrapper distinguishing flag misuse (exit 2) from engine errors (3/4).
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    rafter_core::par::configure_threads(cli.threads);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Core(err)) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config = config::AppConfig::load(cli.config.as_deref())?;
    let ctx = commands::Context {
        config,
        seed: cli.seed,
        kb_dir: cli.kb,
        scope: match cli.scope.as_deref() {
            Some(text) => rafter_core::kb::HierarchicalPath::parse_prefix(text)?,
            None => Vec::new(),
        },
    };
    match cli.command {
        Command::Synth {
            out,
            planes,
            flights,
            fault_planes,
            fault_onset,
            fault_intermittency,
            fault_magnitude,
        } => commands::synth(
            ctx,
            out,
            planes,
            flights,
            fault_planes,
            fault_onset,
            fault_intermittency,
            fault_magnitude,
        ),
        Command::BuildKb {
            source,
            target,
            truncate_tail,
            bins,
            regime_len,
        } => commands::build_kb(ctx, source, target, truncate_tail, bins, regime_len),
        Command::Retrieve {
            query,
            k,
            multiplier,
            emit_regimes,
            emit_weights,
        } => commands::retrieve(ctx, query, k, multiplier, emit_regimes, emit_weights),
        Command::Forecast {
            query,
            k,
            backend,
            metric,
            emit_chain,
        } => commands::forecast(ctx, query, k, backend, metric, emit_chain),
        Command::Evaluate {
            suite,
            out,
            queries,
            force,
        } => commands::evaluate(ctx, suite, out, queries, force),
        Command::Detect {
            records,
            policy,
            alerts_out,
            timeline_out,
            force,
        } => commands::detect(ctx, records, policy, alerts_out, timeline_out, force),
    }
}
