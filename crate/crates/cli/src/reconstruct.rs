use std::path::Path;

use hopcast_core::reconstruct::{report_for, EstimationReport, EstimatorConfig};
use hopcast_core::trace::{split_by_connection, Nanos};
use serde_json::json;

use crate::error::{CliError, Result};
use crate::output::{read_config, read_trace, OutDir, RunManifest};

pub fn run(
    trace_path: &Path,
    out: &Path,
    until_seconds: Option<f64>,
    estimator: Option<&Path>,
) -> Result<()> {
    let cfg: EstimatorConfig = read_config(estimator)?;
    let mut trace = read_trace(trace_path)?;
    if let Some(s) = until_seconds {
        if !s.is_finite() || s <= 0.0 {
            return Err(CliError::Config(format!(
                "--until-seconds must be positive, got {s}"
            )));
        }
        if let Some(t0) = trace.observations.iter().map(|o| o.timestamp_ns).min() {
            trace = trace.window(t0, t0 + (s * 1e9).round() as Nanos);
        }
    }

    let reports: Vec<EstimationReport> = split_by_connection(&trace)
        .iter()
        .map(|(aa, t)| report_for(*aa, t, &cfg))
        .collect();

    let mut dir = OutDir::create(out)?;
    let mut problems = Vec::new();
    for r in &reports {
        dir.write_json(&format!("report_{}.json", r.access_address), r)?;
        let line = summary(r);
        println!("{line}");
        if let Some(p) = problem(r) {
            problems.push(format!("{}: {p}", r.access_address));
        }
    }
    dir.write_json("reports.json", &reports)?;
    dir.finish(RunManifest::new(
        "reconstruct",
        vec![trace_path.to_path_buf()],
        json!({ "estimator": cfg, "until_seconds": until_seconds }),
    ))?;
    if problems.is_empty() {
        Ok(())
    } else {
        Err(CliError::Estimation(problems.join("; ")))
    }
}

fn summary(r: &EstimationReport) -> String {
    let Some(rec) = &r.reconstruction else {
        return format!(
            "{} n={} error: {}",
            r.access_address,
            r.n_observations,
            r.error.as_deref().unwrap_or("unknown")
        );
    };
    let c = &rec.classification;
    let mut s = format!(
        "{} n={} {:?} c_int={:.3} ms (raw {:.4} ms)",
        r.access_address,
        r.n_observations,
        c.verdict,
        c.interval.c_int_hat_ns as f64 / 1e6,
        c.interval.raw_gcd_ns / 1e6
    );
    if let Some(a) = &rec.alignment {
        s += &format!(
            " k_init={}{}",
            a.k_init.0,
            if a.ambiguous { " (ambiguous)" } else { "" }
        );
    }
    if let Some(m) = &rec.map {
        s += &format!(" map={} converged={}", m.assumed_map, m.converged);
    }
    if let Some(e) = &rec.map_error {
        s += &format!(" map error: {e}");
    }
    s
}

/// Why a report cannot be used for prediction, if it cannot.
fn problem(r: &EstimationReport) -> Option<String> {
    let Some(rec) = &r.reconstruction else {
        return r.error.clone().or_else(|| Some("no reconstruction".into()));
    };
    if let Some(a) = &rec.alignment {
        if a.ambiguous {
            return Some(format!(
                "ambiguous counter alignment ({} candidates)",
                a.candidate_count
            ));
        }
    }
    rec.map_error.clone()
}
