use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod error;
mod evaluate;
mod hopgen;
mod output;
mod predict;
mod reconstruct;
mod simulate;

#[derive(Parser)]
#[command(
    name = "hopcast",
    version,
    about = "Reconstruct and forecast BLE connection hopping from single-channel captures"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TraceFormatArg {
    Csv,
    Jsonl,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a capture from a scenario file.
    Simulate {
        /// Scenario JSON.
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the scenario's rng_seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "csv")]
        trace_format: TraceFormatArg,
    },
    /// Recover interval, algorithm, counter and channel map per connection.
    Reconstruct {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Only use observations within this many seconds of the first one.
        #[arg(long)]
        until_seconds: Option<f64>,
        /// Estimator configuration JSON; missing fields use defaults.
        #[arg(long)]
        estimator: Option<PathBuf>,
    },
    /// Forecast channel accesses and track the held-out part of a capture.
    Predict {
        /// Report JSON from `reconstruct` (one report or an array).
        #[arg(long)]
        reports: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training length from the first observation; the rest is test data.
        #[arg(long, default_value_t = 100.0)]
        train_seconds: f64,
        /// Events to forecast after training. Defaults to the test span.
        #[arg(long)]
        horizon: Option<u64>,
        /// Only forecast accesses on this channel.
        #[arg(long)]
        channel: Option<u8>,
        /// Kalman configuration JSON; missing fields use defaults.
        #[arg(long)]
        kalman: Option<PathBuf>,
    },
    /// Score a forecast against a capture or simulated ground truth.
    Evaluate {
        #[arg(long)]
        forecast: PathBuf,
        /// Captured trace; matched by nearest prediction within half an interval.
        #[arg(
            long,
            conflicts_with = "timelines",
            required_unless_present = "timelines"
        )]
        trace: Option<PathBuf>,
        /// Simulated timelines JSONL from `simulate`.
        #[arg(long)]
        timelines: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump the hop sequence of one connection as CSV.
    Hopgen {
        /// Connection parameters JSON.
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        start_k: u64,
        #[arg(long, default_value_t = 100)]
        events: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate {
            scenario,
            out,
            seed,
            trace_format,
        } => simulate::run(&scenario, &out, seed, trace_format),
        Command::Reconstruct {
            trace,
            out,
            until_seconds,
            estimator,
        } => reconstruct::run(&trace, &out, until_seconds, estimator.as_deref()),
        Command::Predict {
            reports,
            trace,
            out,
            train_seconds,
            horizon,
            channel,
            kalman,
        } => predict::run(predict::Options {
            reports,
            trace,
            out,
            train_seconds,
            horizon,
            channel,
            kalman,
        }),
        Command::Evaluate {
            forecast,
            trace,
            timelines,
            out,
        } => evaluate::run(&forecast, trace.as_deref(), timelines.as_deref(), &out),
        Command::Hopgen {
            params,
            out,
            start_k,
            events,
        } => hopgen::run(&params, &out, start_k, events),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
