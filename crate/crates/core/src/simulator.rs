//! Ground-truth timelines for configured connections and the view a
//! passive sniffer parked on one channel gets of them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::csa::{ConnectionParams, EventCounter, ParamError, DATA_CHANNELS};
use crate::trace::{EventTimeline, Nanos, Observation, SniffTrace, TimelineEvent};

/// Sleep clock accuracy bound.
pub const MAX_DRIFT_PPM: f64 = 500.0;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("connection {index}: {source}")]
    Params { index: usize, source: ParamError },
    #[error("duplicate access address {0}")]
    DuplicateAccessAddress(crate::csa::AccessAddress),
    #[error("connection {index}: {reason}")]
    Impairment { index: usize, reason: String },
    #[error("sniff channel {0} is not a data channel")]
    SniffChannel(u8),
    #[error("n_ch = {0} outside 2..=37")]
    ChannelCount(u8),
}

/// Per-connection impairments. Durations are microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImpairmentModel {
    #[serde(default)]
    pub timestamp_jitter_sigma_us: f64,
    #[serde(default)]
    pub clock_drift_ppm: f64,
    /// Std dev of the drift random walk, ppm per sqrt(second). Zero keeps
    /// the drift constant.
    #[serde(default)]
    pub drift_random_walk_ppm: f64,
    #[serde(default)]
    pub miss_probability: f64,
    /// Capture length measured from capture start.
    pub duration_us: u64,
}

impl ImpairmentModel {
    pub fn ideal(duration_us: u64) -> Self {
        ImpairmentModel {
            timestamp_jitter_sigma_us: 0.0,
            clock_drift_ppm: 0.0,
            drift_random_walk_ppm: 0.0,
            miss_probability: 0.0,
            duration_us,
        }
    }

    fn validate(&self, index: usize) -> Result<(), SimError> {
        let bad = |reason: String| Err(SimError::Impairment { index, reason });
        if !self.timestamp_jitter_sigma_us.is_finite() || self.timestamp_jitter_sigma_us < 0.0 {
            return bad(format!(
                "jitter sigma {} must be >= 0",
                self.timestamp_jitter_sigma_us
            ));
        }
        if self.clock_drift_ppm.is_nan() || self.clock_drift_ppm.abs() > MAX_DRIFT_PPM {
            return bad(format!(
                "drift {} ppm exceeds {MAX_DRIFT_PPM} ppm",
                self.clock_drift_ppm
            ));
        }
        if !self.drift_random_walk_ppm.is_finite() || self.drift_random_walk_ppm < 0.0 {
            return bad(format!(
                "drift random walk {} must be >= 0",
                self.drift_random_walk_ppm
            ));
        }
        if !(0.0..1.0).contains(&self.miss_probability) {
            return bad(format!(
                "miss probability {} outside [0, 1)",
                self.miss_probability
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectionSpec {
    pub params: ConnectionParams,
    #[serde(default)]
    pub start_offset_us: u64,
    /// Counter value of the first simulated event.
    #[serde(default)]
    pub initial_k: u16,
    pub impairments: ImpairmentModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub connections: Vec<ConnectionSpec>,
    pub sniff_channel: u8,
    #[serde(default)]
    pub rng_seed: u64,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.sniff_channel >= DATA_CHANNELS {
            return Err(SimError::SniffChannel(self.sniff_channel));
        }
        let mut seen = std::collections::BTreeSet::new();
        for (index, c) in self.connections.iter().enumerate() {
            c.params
                .validate()
                .map_err(|source| SimError::Params { index, source })?;
            c.impairments.validate(index)?;
            if !seen.insert(c.params.access_address) {
                return Err(SimError::DuplicateAccessAddress(c.params.access_address));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub timelines: Vec<EventTimeline>,
    pub trace: SniffTrace,
}

pub fn simulate(config: &ScenarioConfig) -> Result<Simulation, SimError> {
    config.validate()?;
    let mut timelines = Vec::with_capacity(config.connections.len());
    let mut observations = Vec::new();
    for (index, spec) in config.connections.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        rng.set_stream(index as u64);
        let (timeline, obs) = simulate_connection(spec, config.sniff_channel, &mut rng);
        timelines.push(timeline);
        observations.extend(obs);
    }
    let mut trace = SniffTrace::new(config.sniff_channel);
    trace.observations = observations;
    trace.sort();
    trace
        .capture_meta
        .insert("source".into(), "simulator".into());
    trace
        .capture_meta
        .insert("rng_seed".into(), config.rng_seed.to_string());
    Ok(Simulation { timelines, trace })
}

fn simulate_connection(
    spec: &ConnectionSpec,
    sniff_channel: u8,
    rng: &mut ChaCha8Rng,
) -> (EventTimeline, Vec<Observation>) {
    let imp = &spec.impairments;
    let c_int = spec.params.interval.as_nanos();
    let c_int_s = c_int as f64 * 1e-9;
    let start = spec.start_offset_us as Nanos * 1000;
    let end = imp.duration_us as Nanos * 1000;
    let jitter = Normal::new(0.0, imp.timestamp_jitter_sigma_us * 1000.0).expect("sigma >= 0");
    let walk = Normal::new(0.0, imp.drift_random_walk_ppm * c_int_s.sqrt()).expect("sigma >= 0");

    let mut events = Vec::new();
    let mut observations = Vec::new();
    // Drift offset accumulated so far (random-walk mode only).
    let mut drift_ppm = imp.clock_drift_ppm;
    let mut walked_offset = 0.0f64;
    for n in 0u64.. {
        let offset = if imp.drift_random_walk_ppm > 0.0 {
            if n > 0 {
                walked_offset += c_int as f64 * drift_ppm * 1e-6;
                drift_ppm += walk.sample(rng);
            }
            walked_offset.round() as Nanos
        } else {
            (n as f64 * c_int as f64 * imp.clock_drift_ppm * 1e-6).round() as Nanos
        };
        let true_time = start + n as Nanos * c_int + offset;
        if true_time >= end {
            break;
        }
        let counter = spec.initial_k as u64 + n;
        let channel = spec.params.hop_at(counter).channel;
        events.push(TimelineEvent {
            counter,
            channel,
            true_time_ns: true_time,
        });
        if channel == sniff_channel {
            if imp.miss_probability > 0.0 && rng.gen_bool(imp.miss_probability) {
                continue;
            }
            let noise = if imp.timestamp_jitter_sigma_us > 0.0 {
                jitter.sample(rng).round() as Nanos
            } else {
                0
            };
            observations.push(Observation {
                timestamp_ns: true_time + noise,
                access_address: spec.params.access_address,
                channel,
                is_central: true,
            });
        }
    }
    (
        EventTimeline {
            params: spec.params,
            events,
        },
        observations,
    )
}

/// Expected number of connection events before every excluded channel has
/// been seen remapped onto the sniffed channel, assuming uniform mapping
/// and remapping. Rounded up; zero for a full map.
pub fn expected_reconstruction_budget(n_ch: u8) -> Result<u64, SimError> {
    match n_ch {
        37 => Ok(0),
        2..=36 => Ok(budget_f64(n_ch).ceil() as u64),
        _ => Err(SimError::ChannelCount(n_ch)),
    }
}

fn budget_f64(n_ch: u8) -> f64 {
    let n = n_ch as f64;
    let excluded = DATA_CHANNELS - n_ch;
    let harmonic: f64 = (1..=excluded).map(|i| 1.0 / i as f64).sum();
    let p_rem = excluded as f64 / DATA_CHANNELS as f64;
    n * excluded as f64 * harmonic / p_rem
}

/// Runs a CSA#2 connection from `start_k` and returns how many events pass
/// until every excluded channel has been remapped onto `sniff_channel` at
/// least once. `None` if that takes longer than `max_events`.
pub fn events_until_full_map_evidence(
    params: &ConnectionParams,
    sniff_channel: u8,
    start_k: EventCounter,
    max_events: u64,
) -> Option<u64> {
    let map = params.channel_map;
    let mut pending: u64 = map.excluded().fold(0, |m, ch| m | 1 << ch);
    if pending == 0 {
        return Some(0);
    }
    for n in 0..max_events {
        let hop = params.hop_at(start_k.0 as u64 + n);
        if hop.remapped() && hop.channel == sniff_channel {
            pending &= !(1 << hop.unmapped);
            if pending == 0 {
                return Some(n + 1);
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::csa::{AccessAddress, ChannelMap, ConnInterval};

    fn wide_map() -> ChannelMap {
        "0x1FFFFFFC00".parse().unwrap()
    }

    fn single(params: ConnectionParams, imp: ImpairmentModel, sniff: u8) -> ScenarioConfig {
        ScenarioConfig {
            connections: vec![ConnectionSpec {
                params,
                start_offset_us: 0,
                initial_k: 0,
                impairments: imp,
            }],
            sniff_channel: sniff,
            rng_seed: 7,
        }
    }

    #[test]
    fn csa1_channel_10_gap_pattern() {
        let iv = ConnInterval::from_micros(7500).unwrap();
        let p = ConnectionParams::csa1(AccessAddress(0x5065_1234), iv, wide_map(), 7, 0).unwrap();
        let sim = simulate(&single(p, ImpairmentModel::ideal(2_000_000), 10)).unwrap();
        let ts: Vec<_> = sim.trace.timestamps().collect();
        let gaps: Vec<i64> = ts
            .windows(2)
            .map(|w| (w[1] - w[0]) / iv.as_nanos())
            .collect();
        assert!(gaps.len() > 6);
        for w in gaps.windows(2) {
            assert_eq!(w[0] + w[1], 37);
            assert!(matches!(w[0], 12 | 25));
        }
        assert!(ts.iter().all(|t| t % iv.as_nanos() == 0));
    }

    #[test]
    fn ideal_trace_is_timeline_subsequence() {
        let iv = ConnInterval::from_micros(12_500).unwrap();
        let p = ConnectionParams::csa2(
            AccessAddress(0xB0A1_CD9D),
            iv,
            "0x1E00E00700".parse().unwrap(),
        );
        let mut cfg = single(p, ImpairmentModel::ideal(30_000_000), 22);
        cfg.connections[0].initial_k = 65_000;
        cfg.connections[0].start_offset_us = 1_000;
        let sim = simulate(&cfg).unwrap();
        let tl = &sim.timelines[0];
        let expected: Vec<Nanos> = tl
            .events
            .iter()
            .filter(|e| e.channel == 22)
            .map(|e| e.true_time_ns)
            .collect();
        let got: Vec<Nanos> = sim.trace.timestamps().collect();
        assert_eq!(got, expected);
        for (n, e) in tl.events.iter().enumerate() {
            assert_eq!(e.true_time_ns, 1_000_000 + n as Nanos * iv.as_nanos());
            assert_eq!(e.counter, 65_000 + n as u64);
        }
        assert!(tl
            .events
            .iter()
            .any(|e| e.event_counter() == EventCounter(0)));
    }

    #[test]
    fn drift_is_linear_skew() {
        let iv = ConnInterval::from_micros(7500).unwrap();
        let p = ConnectionParams::csa2(AccessAddress(1), iv, ChannelMap::all());
        let mut imp = ImpairmentModel::ideal(10_000_000);
        imp.clock_drift_ppm = 20.0;
        let sim = simulate(&single(p, imp, 0)).unwrap();
        let last = sim.timelines[0].events.last().unwrap();
        let n = last.counter as f64;
        let expected = n * 7.5e6 * (1.0 + 20e-6);
        assert!((last.true_time_ns as f64 - expected).abs() <= 0.5);
    }

    #[test]
    fn near_certain_miss_empties_trace() {
        let iv = ConnInterval::from_micros(7500).unwrap();
        let p = ConnectionParams::csa2(AccessAddress(1), iv, ChannelMap::all());
        let mut imp = ImpairmentModel::ideal(60_000_000);
        imp.miss_probability = 1.0 - 1e-9;
        let sim = simulate(&single(p, imp, 3)).unwrap();
        assert!(sim.trace.is_empty());
        assert!(!sim.timelines[0].events.is_empty());
    }

    #[test]
    fn same_seed_same_output() {
        let iv = ConnInterval::from_micros(7500).unwrap();
        let p = ConnectionParams::csa2(AccessAddress(1), iv, ChannelMap::all());
        let mut imp = ImpairmentModel::ideal(20_000_000);
        imp.timestamp_jitter_sigma_us = 50.0;
        imp.miss_probability = 0.1;
        imp.drift_random_walk_ppm = 0.5;
        let cfg = single(p, imp, 3);
        assert_eq!(simulate(&cfg).unwrap(), simulate(&cfg).unwrap());
        let mut other = cfg.clone();
        other.rng_seed += 1;
        assert_ne!(
            simulate(&cfg).unwrap().trace,
            simulate(&other).unwrap().trace
        );
    }

    #[test]
    fn validation_errors() {
        let iv = ConnInterval::from_micros(7500).unwrap();
        let p = ConnectionParams::csa2(AccessAddress(1), iv, ChannelMap::all());
        let mut cfg = single(p, ImpairmentModel::ideal(1_000_000), 3);
        cfg.connections.push(cfg.connections[0].clone());
        assert!(matches!(
            simulate(&cfg),
            Err(SimError::DuplicateAccessAddress(_))
        ));
        let mut imp = ImpairmentModel::ideal(1_000_000);
        imp.clock_drift_ppm = 600.0;
        assert!(simulate(&single(p, imp, 3)).is_err());
        imp.clock_drift_ppm = 0.0;
        imp.miss_probability = 1.0;
        assert!(simulate(&single(p, imp, 3)).is_err());
        imp.miss_probability = 0.0;
        imp.timestamp_jitter_sigma_us = -1.0;
        assert!(simulate(&single(p, imp, 3)).is_err());
        assert!(simulate(&single(p, ImpairmentModel::ideal(1), 37)).is_err());
    }

    #[test]
    fn empty_scenario() {
        let cfg: ScenarioConfig = serde_json::from_str(r#"{"sniff_channel": 22}"#).unwrap();
        let sim = simulate(&cfg).unwrap();
        assert!(sim.timelines.is_empty());
        assert!(sim.trace.is_empty());
    }

    #[test]
    fn budget_values() {
        let b28 = expected_reconstruction_budget(28).unwrap();
        assert!((b28 as i64 - 2932).abs() <= 2, "{b28}");
        // 7.5 ms events: about 22 s
        assert!((b28 as f64 * 7.5e-3 - 21.99).abs() < 0.02);
        assert_eq!(expected_reconstruction_budget(36).unwrap(), 1332);
        assert_eq!(expected_reconstruction_budget(37).unwrap(), 0);
        assert!(expected_reconstruction_budget(1).is_err());
        assert!(expected_reconstruction_budget(38).is_err());
        let worst = (2..=36u8)
            .max_by(|a, b| budget_f64(*a).total_cmp(&budget_f64(*b)))
            .unwrap();
        assert_eq!(worst, 28);
    }

    #[test]
    fn scenario_json_shape() {
        let json = r#"{
            "sniff_channel": 22,
            "rng_seed": 1,
            "connections": [{
                "params": {"access_address": "0xB0A1CD9D", "c_int_us": 12500,
                           "channel_map": "0x1E00E00700", "csa": "CSA2"},
                "initial_k": 31400,
                "impairments": {"timestamp_jitter_sigma_us": 50, "duration_us": 1000000}
            }]
        }"#;
        let cfg: ScenarioConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.connections[0].initial_k, 31400);
        assert!(cfg.connections[0].params.is_csa2());
        let back: ScenarioConfig =
            serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
