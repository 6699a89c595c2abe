use std::path::{Path, PathBuf};

use hopcast_core::predict::{
    forecast, track, ChannelFilter, EvalReport, Forecast, HopModel, KalmanConfig, SyncState,
};
use hopcast_core::reconstruct::EstimationReport;
use hopcast_core::trace::{split_by_connection, Nanos};
use hopcast_core::AccessAddress;
use serde::Serialize;
use serde_json::json;

use crate::error::{CliError, Result};
use crate::output::{read_config, read_json, read_trace, OutDir, RunManifest};

pub struct Options {
    pub reports: PathBuf,
    pub trace: PathBuf,
    pub out: PathBuf,
    pub train_seconds: f64,
    pub horizon: Option<u64>,
    pub channel: Option<u8>,
    pub kalman: Option<PathBuf>,
}

#[derive(Serialize)]
struct ConnectionSummary {
    access_address: AccessAddress,
    #[serde(skip_serializing_if = "Option::is_none")]
    rmse_ms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    p50_ms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    p95_ms: Option<f64>,
    forecast_events: usize,
    tracked: usize,
    rejected: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

pub fn run(opts: Options) -> Result<()> {
    if !opts.train_seconds.is_finite() || opts.train_seconds <= 0.0 {
        return Err(CliError::Config(format!(
            "--train-seconds must be positive, got {}",
            opts.train_seconds
        )));
    }
    if let Some(c) = opts.channel {
        if c >= 37 {
            return Err(CliError::Config(format!(
                "--channel {c} is not a data channel"
            )));
        }
    }
    let kcfg: KalmanConfig = read_config(opts.kalman.as_deref())?;
    let reports = read_reports(&opts.reports)?;
    let trace = read_trace(&opts.trace)?;
    let t0 = trace
        .observations
        .iter()
        .map(|o| o.timestamp_ns)
        .min()
        .unwrap_or(0);
    let split_at = t0 + (opts.train_seconds * 1e9).round() as Nanos;
    let per_connection = split_by_connection(&trace);
    let filter = opts.channel.map_or(ChannelFilter::All, ChannelFilter::Only);

    let mut dir = OutDir::create(&opts.out)?;
    let mut summaries = Vec::new();
    let mut all_errors = Vec::new();
    let mut problems = Vec::new();
    for report in &reports {
        let aa = report.access_address;
        if let Some(rec) = &report.reconstruction {
            if rec.last_timestamp_ns >= split_at {
                return Err(CliError::Config(format!(
                    "report for {aa} uses data past the {} s training split; rerun reconstruct with --until-seconds",
                    opts.train_seconds
                )));
            }
        }
        let Some(conn) = per_connection.get(&aa) else {
            problems.push(format!("{aa}: not present in trace"));
            continue;
        };
        let outcome = (|| -> std::result::Result<(Forecast, EvalReport, usize, usize), String> {
            let model = HopModel::from_report(report).map_err(|e| e.to_string())?;
            let rec = report
                .reconstruction
                .as_ref()
                .expect("model implies reconstruction");
            let training = conn.window(rec.first_timestamp_ns, rec.last_timestamp_ns + 1);
            let sync =
                SyncState::from_reconstruction(rec, &training, kcfg).map_err(|e| e.to_string())?;
            let test: Vec<Nanos> = conn.window(split_at, Nanos::MAX).timestamps().collect();
            let events_ahead = |t: Nanos| ((t as f64 - sync.phase_ns) / sync.interval_ns).round();
            let horizon = opts
                .horizon
                .unwrap_or_else(|| test.last().map_or(1, |&t| events_ahead(t).max(1.0) as u64));
            let mut fc = if horizon == 0 {
                Forecast::default()
            } else {
                forecast(&model, &sync, horizon, filter).map_err(|e| e.to_string())?
            };
            fc.access_address = Some(aa);
            let in_horizon: Vec<Nanos> = test
                .into_iter()
                .filter(|&t| events_ahead(t) <= horizon as f64)
                .collect();
            let tracked = track(&model, &sync, &in_horizon);
            let mut eval =
                EvalReport::from_errors(&tracked.errors_ns).map_err(|e| e.to_string())?;
            eval.unmatched_measurements = tracked.unmatched_measurements;
            Ok((fc, eval, tracked.predictions.len(), tracked.rejected))
        })();
        let name = aa.to_string();
        match outcome {
            Ok((fc, eval, tracked, rejected)) => {
                dir.write_json(&format!("forecast_{name}.json"), &fc)?;
                dir.write_json(&format!("eval_{name}.json"), &eval)?;
                dir.write_with(&format!("eccdf_{name}.csv"), |w| eval.write_eccdf_csv(w))?;
                println!(
                    "{aa} RMSE {:.4} ms p50 {:.4} ms p95 {:.4} ms over {tracked} accesses, {} forecast events",
                    eval.rmse_ns / 1e6,
                    eval.p50_ns / 1e6,
                    eval.p95_ns / 1e6,
                    fc.entries.len()
                );
                all_errors.extend(eval.abs_errors_ns.iter().copied());
                summaries.push(ConnectionSummary {
                    access_address: aa,
                    rmse_ms: Some(eval.rmse_ns / 1e6),
                    p50_ms: Some(eval.p50_ns / 1e6),
                    p95_ms: Some(eval.p95_ns / 1e6),
                    forecast_events: fc.entries.len(),
                    tracked,
                    rejected,
                    error: None,
                });
            }
            Err(e) => {
                eprintln!("{aa}: {e}");
                problems.push(format!("{aa}: {e}"));
                summaries.push(ConnectionSummary {
                    access_address: aa,
                    rmse_ms: None,
                    p50_ms: None,
                    p95_ms: None,
                    forecast_events: 0,
                    tracked: 0,
                    rejected: 0,
                    error: Some(e),
                });
            }
        }
    }
    if let Ok(combined) = EvalReport::from_errors(&all_errors) {
        dir.write_with("eccdf_all.csv", |w| combined.write_eccdf_csv(&mut *w))?;
    }
    dir.write_json("summary.json", &summaries)?;
    dir.finish(RunManifest::new(
        "predict",
        vec![opts.reports.clone(), opts.trace.clone()],
        json!({
            "train_seconds": opts.train_seconds,
            "horizon": opts.horizon,
            "channel": opts.channel,
            "kalman": kcfg,
        }),
    ))?;
    if problems.is_empty() {
        Ok(())
    } else {
        Err(CliError::Estimation(problems.join("; ")))
    }
}

/// Accepts a single report or an array of reports.
fn read_reports(path: &Path) -> Result<Vec<EstimationReport>> {
    let value: serde_json::Value = read_json(path)?;
    let parsed = if value.is_array() {
        serde_json::from_value(value)
    } else {
        serde_json::from_value(value).map(|r| vec![r])
    };
    parsed.map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}
