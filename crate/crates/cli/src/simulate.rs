use std::path::Path;

use hopcast_core::simulator::{simulate, ScenarioConfig};
use hopcast_core::trace::{save_trace, TraceFormat};
use serde_json::json;

use crate::error::{CliError, Result};
use crate::output::{read_json, OutDir, RunManifest};
use crate::TraceFormatArg;

pub fn run(scenario: &Path, out: &Path, seed: Option<u64>, format: TraceFormatArg) -> Result<()> {
    let mut cfg: ScenarioConfig = read_json(scenario)?;
    if let Some(seed) = seed {
        cfg.rng_seed = seed;
    }
    let sim = simulate(&cfg).map_err(|e| CliError::Config(e.to_string()))?;

    let mut dir = OutDir::create(out)?;
    let (name, fmt) = match format {
        TraceFormatArg::Csv => ("trace.csv", TraceFormat::Csv),
        TraceFormatArg::Jsonl => ("trace.jsonl", TraceFormat::Jsonl),
    };
    dir.write_with(name, |w| {
        save_trace(&sim.trace, &mut *w, fmt).map_err(std::io::Error::other)
    })?;
    dir.write_with("timelines.jsonl", |w| {
        for t in &sim.timelines {
            serde_json::to_writer(&mut *w, t)?;
            writeln!(w)?;
        }
        Ok(())
    })?;

    println!(
        "simulated {} connection(s), {} observations on channel {}",
        cfg.connections.len(),
        sim.trace.len(),
        cfg.sniff_channel
    );
    let mut manifest = RunManifest::new(
        "simulate",
        vec![scenario.to_path_buf()],
        json!({ "scenario": cfg, "trace_format": name }),
    );
    manifest.rng_seed = Some(cfg.rng_seed);
    dir.finish(manifest)
}
