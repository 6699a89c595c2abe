use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use hopcast_core::predict::{evaluate, Forecast, Reference};
use hopcast_core::trace::{split_by_connection, EventTimeline, Nanos};
use serde::Serialize;
use serde_json::json;

use crate::error::{CliError, Result};
use crate::output::{read_json, read_trace, OutDir, RunManifest};

#[derive(Serialize)]
struct Evaluation<'a> {
    #[serde(flatten)]
    report: &'a hopcast_core::EvalReport,
    /// Forecast entries whose channel differs from the true one (timelines
    /// only).
    #[serde(skip_serializing_if = "Option::is_none")]
    channel_mismatches: Option<usize>,
}

pub fn run(
    forecast_path: &Path,
    trace: Option<&Path>,
    timelines: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let fc: Forecast = read_json(forecast_path)?;
    let interval_ns = fc
        .interval_ns
        .ok_or_else(|| CliError::Config("forecast has no interval".into()))?;
    let aa = fc.access_address;
    let (report, mismatches, input) = match (trace, timelines) {
        (Some(path), _) => {
            let sniff_channel = fc
                .sniff_channel
                .ok_or_else(|| CliError::Config("forecast has no sniff channel".into()))?;
            let t = read_trace(path)?;
            let per = split_by_connection(&t);
            let timestamps: Vec<Nanos> = aa
                .and_then(|aa| per.get(&aa))
                .map(|c| c.timestamps().collect())
                .unwrap_or_default();
            let r = evaluate(
                &fc,
                &Reference::Trace {
                    timestamps: &timestamps,
                    sniff_channel,
                    interval_ns,
                },
            );
            (r, None, path)
        }
        (None, Some(path)) => {
            let timeline = read_timelines(path)?
                .into_iter()
                .find(|t| Some(t.params.access_address) == aa)
                .ok_or_else(|| {
                    CliError::Config(format!("no timeline for {aa:?} in {}", path.display()))
                })?;
            let (pairs, mismatches) = match_truth(&fc, &timeline, interval_ns);
            (
                evaluate(&fc, &Reference::Events(&pairs)),
                Some(mismatches),
                path,
            )
        }
        (None, None) => return Err(CliError::Config("need --trace or --timelines".into())),
    };
    let report = report.map_err(|e| CliError::Estimation(e.to_string()))?;

    let mut dir = OutDir::create(out)?;
    dir.write_json(
        "eval.json",
        &Evaluation {
            report: &report,
            channel_mismatches: mismatches,
        },
    )?;
    dir.write_with("eccdf.csv", |w| report.write_eccdf_csv(w))?;
    println!(
        "RMSE {:.4} ms p50 {:.4} ms p95 {:.4} ms over {} matched accesses{}",
        report.rmse_ns / 1e6,
        report.p50_ns / 1e6,
        report.p95_ns / 1e6,
        report.matched,
        mismatches.map_or(String::new(), |m| format!(", {m} channel mismatches"))
    );
    dir.finish(RunManifest::new(
        "evaluate",
        vec![forecast_path.to_path_buf(), input.to_path_buf()],
        json!({ "reference": if trace.is_some() { "trace" } else { "timelines" } }),
    ))
}

pub fn read_timelines(path: &Path) -> Result<Vec<EventTimeline>> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CliError::Parse {
            path: path.to_path_buf(),
            reason: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}

/// Pairs each forecast entry with the true event nearest in time (within
/// half an interval). Counts entries whose channel or counter disagrees.
fn match_truth(
    fc: &Forecast,
    timeline: &EventTimeline,
    interval_ns: f64,
) -> (Vec<(u64, Nanos)>, usize) {
    let events = &timeline.events;
    let mut pairs = Vec::new();
    let mut mismatches = 0;
    for e in &fc.entries {
        let i = events.partition_point(|t| t.true_time_ns < e.predicted_time_ns);
        let nearest = [i.checked_sub(1), Some(i)]
            .into_iter()
            .flatten()
            .filter(|&j| j < events.len())
            .min_by_key(|&j| (events[j].true_time_ns - e.predicted_time_ns).abs());
        let Some(j) = nearest else { continue };
        let truth = events[j];
        if ((truth.true_time_ns - e.predicted_time_ns).abs() as f64) >= interval_ns / 2.0 {
            continue;
        }
        let counter_ok = e.k.is_none_or(|k| k == truth.event_counter());
        if truth.channel != e.channel || !counter_ok {
            mismatches += 1;
        }
        pairs.push((e.event, truth.true_time_ns));
    }
    (pairs, mismatches)
}
