//! `timecast` command-line front end.
//!
//! Exit codes:
//!   0  success
//!   1  unexpected failure
//!   2  bad command line (reported by the argument parser)
//!   3  unreadable or malformed input (I/O, CSV, JSON, schema, data rows)
//!   4  invalid argument or value outside a function's domain
//!   5  numerical failure (non-convergence, degenerate stage)

mod commands;
mod plot;
mod replay;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use timecast::TimecastError;

#[derive(Parser, Debug)]
#[command(name = "timecast", version, about = "Stage-aware time-to-event prediction for sensor streams")]
struct Cli {
    /// Run every loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Learn stage models from a labelled CSV collection.
    Train(TrainArgs),
    /// Replay streams tick by tick and write one prediction per line.
    Predict(PredictArgs),
    /// k-fold evaluation (or direct scoring with --folds 1).
    Evaluate(EvaluateArgs),
    /// Generate a synthetic collection with known stage paths.
    Synth(SynthArgs),
    /// Turn prediction lines into per-instance curves for plotting.
    PlotData(PlotArgs),
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Long-format CSV: instance_id, tick, sensor columns.
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated sensor columns (default: every other column).
    #[arg(long, value_delimiter = ',')]
    pub sensors: Option<Vec<String>>,
    #[arg(long, default_value = "instance_id")]
    pub instance_column: String,
    #[arg(long, default_value = "tick")]
    pub tick_column: String,
    /// Column holding each instance's event tick (default: last tick).
    #[arg(long)]
    pub event_column: Option<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.1)]
    pub beta: f64,
    /// Initial number of stages.
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// Window width in ticks, or `auto` for round(0.1 * mean length).
    #[arg(long, default_value = "1")]
    pub window: String,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 50)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Drop stages that stay empty for two iterations.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub prune_empty_stages: bool,
    /// Z-normalise each sequence per sensor before training and prediction.
    #[arg(long)]
    pub znormalize: bool,
    #[arg(long)]
    pub out: PathBuf,
    /// Fit report path (default: `<out stem>.report.json`).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum Insert {
    AfterWorst,
    Append,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// NDJSON records `{instance_id, tick, values, event?}` or a CSV file.
    #[arg(long)]
    pub stream: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Grow the model when a stream reaches its event.
    #[arg(long)]
    pub online_update: bool,
    /// Where the final model goes after online updates
    /// (default: `<model stem>.updated.json`).
    #[arg(long)]
    pub model_out: Option<PathBuf>,
    /// Update reports, one JSON line each (default: `<out stem>.updates.ndjson`).
    #[arg(long)]
    pub updates: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "after-worst")]
    pub insert: Insert,
    /// Attach density and survival at tau = 1..N to every prediction.
    #[arg(long)]
    pub curve_horizon: Option<usize>,
    /// Keep at most this many observations per stream for online updates.
    #[arg(long)]
    pub history_cap: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Trained model; its hyperparameters are reused when retraining folds.
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Brier horizon L (default: median event time).
    #[arg(long)]
    pub ibs_horizon: Option<usize>,
    /// Metric report path.
    #[arg(long, default_value = "metrics.json")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    #[arg(long)]
    pub preds: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Horizon for curves recomputed from the stored parameters.
    #[arg(long, default_value_t = 50)]
    pub horizon: usize,
    /// Keep a curve for every n-th tick.
    #[arg(long, default_value_t = 10)]
    pub every: usize,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<TimecastError>() {
            return match e {
                TimecastError::Io(_)
                | TimecastError::Csv(_)
                | TimecastError::Json(_)
                | TimecastError::MissingColumn(_)
                | TimecastError::Data { .. } => 3,
                TimecastError::Argument(_)
                | TimecastError::Domain(_)
                | TimecastError::Dimension { .. }
                | TimecastError::TickOutOfRange { .. } => 4,
                TimecastError::NotConverged { .. } | TimecastError::DegenerateStage(_) => 5,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() || cause.downcast_ref::<serde_json::Error>().is_some() {
            return 3;
        }
    }
    1
}

/// The error chain joined with `: `, skipping causes already quoted by
/// the message above them.
fn message(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if out.contains(&text) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&text);
    }
    out
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = timecast::exec::configure_threads_from_env() {
        log::debug!("worker threads capped at {n}");
    }
    let exec = if cli.sequential || std::env::var("TIMECAST_THREADS").is_ok_and(|v| v.trim() == "1") {
        timecast::Exec::Sequential
    } else {
        timecast::Exec::Parallel
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(a, exec),
        Command::Predict(a) => replay::predict(a),
        Command::Evaluate(a) => commands::evaluate(a, exec),
        Command::Synth(a) => commands::synth(a),
        Command::PlotData(a) => plot::plot_data(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", message(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
