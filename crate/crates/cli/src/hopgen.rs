use std::path::Path;

use hopcast_core::csa::{ConnectionParams, EventCounter};
use serde_json::json;

use crate::error::{CliError, Result};
use crate::output::{read_json, OutDir, RunManifest};

pub fn run(params_path: &Path, out: &Path, start_k: u64, events: u64) -> Result<()> {
    let params: ConnectionParams = read_json(params_path)?;
    params
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let c_ns = params.interval.as_nanos();

    let mut dir = OutDir::create(out)?;
    dir.write_with("hops.csv", |w| {
        writeln!(w, "index,k,unmapped,channel,remapped,time_us")?;
        for i in 0..events {
            let index = start_k + i;
            let hop = params.hop_at(index);
            writeln!(
                w,
                "{index},{},{},{},{},{}",
                EventCounter::from_extended(index).0,
                hop.unmapped,
                hop.channel,
                hop.remapped() as u8,
                i as i64 * c_ns / 1000
            )?;
        }
        Ok(())
    })?;
    println!("wrote {events} hops for {}", params.access_address);
    dir.finish(RunManifest::new(
        "hopgen",
        vec![params_path.to_path_buf()],
        json!({ "params": params, "start_k": start_k, "events": events }),
    ))
}
