//! Fixtures shared by the benchmarks.

use hopcast_core::csa::{AccessAddress, ChannelMap, ConnInterval, ConnectionParams};
use hopcast_core::simulator::{simulate, ConnectionSpec, ImpairmentModel, ScenarioConfig};
use hopcast_core::trace::SniffTrace;

pub const SNIFF: u8 = 22;

/// One CSA#2 connection on the 10-channel map, 50 us jitter and 20 ppm
/// drift, captured on channel 22.
pub fn csa2_capture(duration_s: u64) -> (AccessAddress, SniffTrace) {
    let aa = AccessAddress(0xB0A1CD9D);
    let map: ChannelMap = "0x1E00E00700".parse().expect("valid map");
    let cfg = ScenarioConfig {
        connections: vec![ConnectionSpec {
            params: ConnectionParams::csa2(
                aa,
                ConnInterval::from_micros(12_500).expect("valid interval"),
                map,
            ),
            start_offset_us: 4_700,
            initial_k: 31_337,
            impairments: ImpairmentModel {
                timestamp_jitter_sigma_us: 50.0,
                clock_drift_ppm: 20.0,
                drift_random_walk_ppm: 0.0,
                miss_probability: 0.0,
                duration_us: duration_s * 1_000_000,
            },
        }],
        sniff_channel: SNIFF,
        rng_seed: 1,
    };
    (aa, simulate(&cfg).expect("valid scenario").trace)
}
