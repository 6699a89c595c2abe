//! Recovering connection parameters from the central messages of one
//! connection seen on one channel.
//!
//! The pipeline is: inter-arrival lattice (interval) -> CSA#1/#2 verdict ->
//! for CSA#2, counter alignment by circular cross-correlation against the
//! unmapped-channel indicator -> channel map from remap evidence.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::csa::{
    csa2_remap_index, prn_e, AccessAddress, ChannelIdentifier, ChannelMap, ConnInterval,
    EventCounter, COUNTER_PERIOD, DATA_CHANNELS, SLOT_NS,
};
use crate::simulator::expected_reconstruction_budget;
use crate::trace::{Nanos, SniffTrace};

/// CSA#1 hop pattern period in events.
pub const CSA1_PERIOD: u64 = 37;

const MAX_LISTED_CANDIDATES: usize = 256;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimateError {
    #[error("too few observations: {found} (need {needed})")]
    TooFewObservations { found: usize, needed: usize },
    #[error("trace has no sniff channel")]
    NoSniffChannel,
    #[error("no inter-arrival time lies on the 1.25 ms lattice")]
    NoLatticeFit,
    #[error("implausible connection interval {ns} ns")]
    ImplausibleInterval { ns: i64 },
    #[error("inter-arrival {index} is {residual_ns} ns off the interval lattice")]
    OffLattice { index: usize, residual_ns: i64 },
    #[error("observations {index} and {next} fall into the same connection event", next = index + 1)]
    SameEvent { index: usize },
    #[error("need a span of {needed} events to classify, have {span}")]
    InsufficientSpan { span: u64, needed: u64 },
    #[error("measurement vector has no observations")]
    EmptyMeasurement,
    #[error("counter alignment is ambiguous between {count} candidates")]
    AmbiguousAlignment { count: usize },
    #[error("remap evidence is inconsistent with every channel map")]
    InconsistentMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    /// Accepted deviation of an inter-arrival time from the 1.25 ms grid
    /// when computing the lattice GCD.
    pub grid_tolerance_ns: i64,
    /// Accepted deviation from an integer number of estimated intervals
    /// when assigning hop counts.
    pub hop_tolerance_ns: i64,
    /// Minimum fraction of hits that recur one CSA#1 period later.
    pub recurrence_threshold: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            grid_tolerance_ns: 300_000,
            hop_tolerance_ns: 1_000_000,
            recurrence_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalEstimate {
    /// Estimated event spacing on the 1.25 ms lattice.
    pub c_int_hat_ns: i64,
    /// Per-event spacing fitted to the timestamps, before snapping. Includes
    /// the relative clock drift.
    pub raw_gcd_ns: f64,
    /// Events between consecutive observations.
    pub hop_counts: Vec<u32>,
}

impl IntervalEstimate {
    pub fn slots(&self) -> u32 {
        (self.c_int_hat_ns / SLOT_NS) as u32
    }

    pub fn c_int_hat(&self) -> Option<ConnInterval> {
        ConnInterval::from_slots(self.slots()).ok()
    }

    /// Event offset of every observation relative to the first one.
    pub fn offsets(&self) -> Vec<u64> {
        let mut acc = 0u64;
        std::iter::once(0)
            .chain(self.hop_counts.iter().map(|&x| {
                acc += x as u64;
                acc
            }))
            .collect()
    }

    pub fn span_events(&self) -> u64 {
        self.hop_counts.iter().map(|&x| x as u64).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CsaVerdict {
    Csa1SingleHit,
    Csa1Repeating,
    Csa2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsaClassification {
    pub verdict: CsaVerdict,
    /// Event phases (mod 37, relative to the first observation) at which
    /// the sniffed channel is used. Empty for CSA#2.
    pub period_profile: Vec<u8>,
    /// Interval after classification; divided by 37 for single-hit CSA#1.
    pub interval: IntervalEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterAlignment {
    pub k_init: EventCounter,
    pub correlation_peak: u32,
    pub second_peak: u32,
    pub ambiguous: bool,
    /// Number of counter values reaching the peak.
    pub candidate_count: usize,
    /// Tied candidates, truncated to the first 256.
    pub candidates: Vec<EventCounter>,
    /// Higher-ranked counter values discarded because no channel map fits
    /// them.
    #[serde(default)]
    pub rejected_by_map: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapEstimate {
    pub proven_excluded: Vec<u8>,
    pub assumed_map: ChannelMap,
    /// Remap observations per channel, indexed by channel.
    pub evidence_count: Vec<u32>,
    /// Every remap observation matches the assumed map's remap index.
    pub consistent: bool,
    /// Map sizes compatible with the remap evidence.
    pub n_ch_candidates: Vec<u8>,
    pub converged: bool,
}

pub fn estimate_interval(
    trace: &SniffTrace,
    cfg: &EstimatorConfig,
) -> Result<IntervalEstimate, EstimateError> {
    let ts: Vec<Nanos> = trace.timestamps().collect();
    if ts.len() < 3 {
        return Err(EstimateError::TooFewObservations {
            found: ts.len(),
            needed: 3,
        });
    }
    let gaps: Vec<i64> = ts.windows(2).map(|w| w[1] - w[0]).collect();

    let mut g: u64 = 0;
    for &d in &gaps {
        let q = (d as f64 / SLOT_NS as f64).round() as i64;
        if q >= 1 && (d - q * SLOT_NS).abs() <= cfg.grid_tolerance_ns {
            g = gcd(g, q as u64);
        }
    }
    if g == 0 {
        return Err(EstimateError::NoLatticeFit);
    }
    if !plausible_slots(g) {
        return Err(EstimateError::ImplausibleInterval {
            ns: g as i64 * SLOT_NS,
        });
    }
    let lattice = g as f64 * SLOT_NS as f64;
    let coarse = hop_counts(&gaps, lattice, None)?;
    let raw = fit_period(&ts, &coarse);
    let hop_counts = hop_counts(&gaps, raw, Some(cfg.hop_tolerance_ns))?;
    let raw = fit_period(&ts, &hop_counts);
    Ok(IntervalEstimate {
        c_int_hat_ns: g as i64 * SLOT_NS,
        raw_gcd_ns: raw,
        hop_counts,
    })
}

fn plausible_slots(g: u64) -> bool {
    let range = ConnInterval::MIN_SLOTS as u64..=ConnInterval::MAX_SLOTS as u64;
    range.contains(&g) || (g.is_multiple_of(CSA1_PERIOD) && range.contains(&(g / CSA1_PERIOD)))
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

fn hop_counts(
    gaps: &[i64],
    period: f64,
    tolerance: Option<i64>,
) -> Result<Vec<u32>, EstimateError> {
    gaps.iter()
        .enumerate()
        .map(|(index, &d)| {
            let x = (d as f64 / period).round();
            if x < 1.0 {
                return Err(EstimateError::SameEvent { index });
            }
            let residual = (d as f64 - x * period).round() as i64;
            match tolerance {
                Some(tol) if residual.abs() > tol => Err(EstimateError::OffLattice {
                    index,
                    residual_ns: residual,
                }),
                _ => Ok(x as u32),
            }
        })
        .collect()
}

/// Least-squares slope of timestamp against event offset. Integer sums keep
/// noiseless input exact.
fn fit_period(ts: &[Nanos], hops: &[u32]) -> f64 {
    let n = ts.len() as i128;
    let mut e: i128 = 0;
    let (mut se, mut st, mut see, mut set) = (0i128, 0i128, 0i128, 0i128);
    for (i, &t) in ts.iter().enumerate() {
        if i > 0 {
            e += hops[i - 1] as i128;
        }
        let t = (t - ts[0]) as i128;
        se += e;
        st += t;
        see += e * e;
        set += e * t;
    }
    let num = n * set - se * st;
    let den = n * see - se * se;
    let q = num / den;
    let r = num % den;
    q as f64 + r as f64 / den as f64
}

pub fn classify_csa(
    trace: &SniffTrace,
    interval: &IntervalEstimate,
    cfg: &EstimatorConfig,
) -> Result<CsaClassification, EstimateError> {
    debug_assert_eq!(trace.len(), interval.hop_counts.len() + 1);
    let offsets = interval.offsets();
    let span = interval.span_events();
    let slots = interval.slots() as u64;

    let single_hit_slots =
        slots.is_multiple_of(CSA1_PERIOD) && slots / CSA1_PERIOD >= ConnInterval::MIN_SLOTS as u64;
    if single_hit_slots && span >= 2 {
        let unit = interval.hop_counts.iter().filter(|&&x| x == 1).count();
        if unit as f64 >= 0.75 * interval.hop_counts.len() as f64 {
            let p = CSA1_PERIOD as u32;
            return Ok(CsaClassification {
                verdict: CsaVerdict::Csa1SingleHit,
                period_profile: vec![0],
                interval: IntervalEstimate {
                    c_int_hat_ns: interval.c_int_hat_ns / CSA1_PERIOD as i64,
                    raw_gcd_ns: interval.raw_gcd_ns / CSA1_PERIOD as f64,
                    hop_counts: interval.hop_counts.iter().map(|x| x * p).collect(),
                },
            });
        }
    }
    if slots > ConnInterval::MAX_SLOTS as u64 {
        return Err(EstimateError::ImplausibleInterval {
            ns: interval.c_int_hat_ns,
        });
    }
    let needed = 2 * CSA1_PERIOD;
    if span < needed {
        return Err(EstimateError::InsufficientSpan { span, needed });
    }

    let hits: BTreeSet<u64> = offsets.iter().copied().collect();
    let eligible: Vec<u64> = offsets
        .iter()
        .copied()
        .filter(|&e| e + CSA1_PERIOD <= span)
        .collect();
    let recurring = eligible
        .iter()
        .filter(|&&e| hits.contains(&(e + CSA1_PERIOD)))
        .count();
    let recurrence = recurring as f64 / eligible.len().max(1) as f64;
    let density = offsets.len() as f64 / (span + 1) as f64;
    if recurrence >= cfg.recurrence_threshold && recurrence >= 1.5 * density {
        let profile: BTreeSet<u8> = offsets.iter().map(|&e| (e % CSA1_PERIOD) as u8).collect();
        return Ok(CsaClassification {
            verdict: CsaVerdict::Csa1Repeating,
            period_profile: profile.into_iter().collect(),
            interval: interval.clone(),
        });
    }
    Ok(CsaClassification {
        verdict: CsaVerdict::Csa2,
        period_profile: Vec::new(),
        interval: interval.clone(),
    })
}

/// Indicator of connection events (from the first observation) that carried
/// an observation.
pub fn build_meas_vector(
    trace: &SniffTrace,
    interval: &IntervalEstimate,
    cfg: &EstimatorConfig,
) -> Result<Vec<bool>, EstimateError> {
    let ts: Vec<Nanos> = trace.timestamps().collect();
    if ts.is_empty() {
        return Err(EstimateError::EmptyMeasurement);
    }
    let gaps: Vec<i64> = ts.windows(2).map(|w| w[1] - w[0]).collect();
    let hops = hop_counts(&gaps, interval.raw_gcd_ns, Some(cfg.hop_tolerance_ns))?;
    let span: u64 = hops.iter().map(|&x| x as u64).sum();
    let mut v = vec![false; span as usize + 1];
    let mut e = 0usize;
    v[0] = true;
    for x in hops {
        e += x as usize;
        v[e] = true;
    }
    Ok(v)
}

/// Indicator over all 65536 counter values of the unmapped CSA#2 channel
/// being the sniffed one.
pub fn build_ref_vector(ci: ChannelIdentifier, sniff_channel: u8) -> Vec<bool> {
    (0..COUNTER_PERIOD)
        .map(|k| prn_e(EventCounter(k as u16), ci) % DATA_CHANNELS as u16 == sniff_channel as u16)
        .collect()
}

/// Circular cross-correlation `r[k] = sum_m ref[(m + k) mod L] * meas[m]`.
/// Measurement vectors longer than the reference are folded modulo its
/// length first.
pub fn correlate(c_meas: &[bool], c_ref: &[bool]) -> Result<Vec<u32>, EstimateError> {
    let len = c_ref.len();
    assert!(
        len > 0 && len <= COUNTER_PERIOD as usize,
        "reference length {len}"
    );
    let mut folded = vec![false; len];
    for (m, _) in c_meas.iter().enumerate().filter(|(_, &b)| b) {
        folded[m % len] = true;
    }
    let meas_ones: Vec<usize> = ones(&folded);
    if meas_ones.is_empty() {
        return Err(EstimateError::EmptyMeasurement);
    }
    let ref_ones = ones(c_ref);
    let mut r = vec![0u32; len];
    for &m in &meas_ones {
        for &j in &ref_ones {
            r[(j + len - m) % len] += 1;
        }
    }
    Ok(r)
}

/// Argmax of the circular cross-correlation. Ties are reported as
/// ambiguous.
pub fn align_counter(c_meas: &[bool], c_ref: &[bool]) -> Result<CounterAlignment, EstimateError> {
    let r = correlate(c_meas, c_ref)?;
    let peak = r.iter().copied().max().unwrap_or(0);
    let tied: Vec<usize> = (0..r.len()).filter(|&k| r[k] == peak).collect();
    Ok(alignment_from(&r, &tied, 0))
}

fn alignment_from(r: &[u32], chosen: &[usize], rejected_by_map: usize) -> CounterAlignment {
    let best = chosen[0];
    let second_peak = if chosen.len() > 1 {
        r[best]
    } else {
        r.iter()
            .enumerate()
            .filter(|&(k, _)| k != best)
            .map(|(_, &v)| v)
            .max()
            .unwrap_or(0)
    };
    CounterAlignment {
        k_init: EventCounter(best as u16),
        correlation_peak: r[best],
        second_peak,
        ambiguous: chosen.len() > 1,
        candidate_count: chosen.len(),
        candidates: chosen
            .iter()
            .take(MAX_LISTED_CANDIDATES)
            .map(|&k| EventCounter(k as u16))
            .collect(),
        rejected_by_map,
    }
}

/// Alignment screened by channel-map feasibility. Candidates are visited in
/// decreasing correlation; counter values whose remap observations admit no
/// channel map are discarded, and the highest correlation level with at
/// least one feasible candidate wins. Falls back to the plain argmax when
/// no counter value is feasible.
pub fn align_counter_screened(
    c_meas: &[bool],
    ci: ChannelIdentifier,
    sniff_channel: u8,
) -> Result<(CounterAlignment, Result<MapEstimate, EstimateError>), EstimateError> {
    let c_ref = build_ref_vector(ci, sniff_channel);
    let r = correlate(c_meas, &c_ref)?;
    let mut order: Vec<usize> = (0..r.len()).collect();
    order.sort_by_key(|&k| (std::cmp::Reverse(r[k]), k));

    let mut rejected = 0;
    let mut i = 0;
    while i < order.len() {
        let level = r[order[i]];
        let mut feasible = Vec::new();
        while i < order.len() && r[order[i]] == level {
            let k = order[i];
            i += 1;
            match infer_channel_map(c_meas, EventCounter(k as u16), ci, sniff_channel) {
                Ok(map) => feasible.push((k, map)),
                Err(_) => rejected += 1,
            }
        }
        if let Some((_, map)) = feasible.first().cloned() {
            let ks: Vec<usize> = feasible.iter().map(|(k, _)| *k).collect();
            let a = alignment_from(&r, &ks, rejected);
            let map = if a.ambiguous {
                Err(EstimateError::AmbiguousAlignment { count: ks.len() })
            } else {
                Ok(map)
            };
            return Ok((a, map));
        }
    }
    let peak = r[order[0]];
    let tied: Vec<usize> = order
        .iter()
        .copied()
        .take_while(|&k| r[k] == peak)
        .collect();
    Ok((
        alignment_from(&r, &tied, rejected),
        Err(EstimateError::InconsistentMap),
    ))
}

fn ones(v: &[bool]) -> Vec<usize> {
    v.iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .map(|(i, _)| i)
        .collect()
}

/// Channel map from remap evidence: an observation at an event whose
/// unmapped channel is not the sniffed one proves that channel excluded.
/// Absence of an observation proves nothing.
pub fn infer_channel_map(
    c_meas: &[bool],
    k_init: EventCounter,
    ci: ChannelIdentifier,
    sniff_channel: u8,
) -> Result<MapEstimate, EstimateError> {
    let mut evidence = vec![0u32; DATA_CHANNELS as usize];
    let mut excluded = 0u64;
    let mut last_new = None;
    let mut remap_prns = Vec::new();
    for (m, _) in c_meas.iter().enumerate().filter(|(_, &b)| b) {
        let prn = prn_e(k_init.wrapping_add(m as u64), ci);
        let unmapped = (prn % DATA_CHANNELS as u16) as u8;
        if unmapped == sniff_channel {
            continue;
        }
        evidence[unmapped as usize] += 1;
        if excluded & (1 << unmapped) == 0 {
            excluded |= 1 << unmapped;
            last_new = Some(m as u64);
        }
        remap_prns.push(prn);
    }

    let all = ChannelMap::all().mask();
    let assumed_map =
        ChannelMap::from_mask(all & !excluded).map_err(|_| EstimateError::InconsistentMap)?;
    let feasible = feasible_map_sizes(excluded, sniff_channel, &remap_prns);
    if feasible.is_empty() {
        return Err(EstimateError::InconsistentMap);
    }
    let pos = assumed_map
        .index_of(sniff_channel)
        .expect("sniff channel is never excluded");
    let consistent = remap_prns
        .iter()
        .all(|&p| csa2_remap_index(p, assumed_map.n_ch()) == pos);

    let span = c_meas.len().saturating_sub(1) as u64;
    let budget =
        expected_reconstruction_budget(assumed_map.n_ch().min(36)).expect("n_ch within 2..=36");
    let quiet = last_new.map_or(span, |m| span - m);
    Ok(MapEstimate {
        proven_excluded: (0..DATA_CHANNELS)
            .filter(|ch| excluded & (1 << ch) != 0)
            .collect(),
        assumed_map,
        evidence_count: evidence,
        consistent,
        n_ch_candidates: feasible,
        converged: consistent && span > budget && quiet >= budget,
    })
}

/// Map sizes for which some superset of the proven exclusions sends every
/// remap observation to the sniffed channel. Channels not yet proven
/// excluded may still be hidden exclusions, below or above the sniff
/// channel.
fn feasible_map_sizes(excluded: u64, sniff: u8, prns: &[u16]) -> Vec<u8> {
    let below_mask = (1u64 << sniff) - 1;
    let excl_below = (excluded & below_mask).count_ones() as usize;
    let excl_total = excluded.count_ones() as usize;
    let open_below = sniff as usize - excl_below;
    let open_above = (DATA_CHANNELS as usize - 1 - sniff as usize) - (excl_total - excl_below);
    let mut sizes = BTreeSet::new();
    for hidden_below in 0..=open_below {
        for hidden_above in 0..=open_above {
            let n_ch = DATA_CHANNELS as usize - excl_total - hidden_below - hidden_above;
            if n_ch < 2 {
                continue;
            }
            let pos = sniff as usize - excl_below - hidden_below;
            if prns.iter().all(|&p| csa2_remap_index(p, n_ch as u8) == pos) {
                sizes.insert(n_ch as u8);
            }
        }
    }
    sizes.into_iter().collect()
}

/// Everything recovered for one connection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reconstruction {
    pub classification: CsaClassification,
    pub channel_identifier: Option<ChannelIdentifier>,
    pub alignment: Option<CounterAlignment>,
    pub map: Option<MapEstimate>,
    /// Why the map step failed, when it did.
    pub map_error: Option<String>,
    pub first_timestamp_ns: Nanos,
    pub last_timestamp_ns: Nanos,
}

/// Per-connection estimation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationReport {
    pub access_address: AccessAddress,
    pub sniff_channel: Option<u8>,
    pub n_observations: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reconstruction: Option<Reconstruction>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl EstimationReport {
    pub fn interval(&self) -> Option<&IntervalEstimate> {
        self.reconstruction
            .as_ref()
            .map(|r| &r.classification.interval)
    }
}

/// Runs the whole estimation on the central messages of one connection.
pub fn reconstruct(
    access_address: AccessAddress,
    trace: &SniffTrace,
    cfg: &EstimatorConfig,
) -> Result<Reconstruction, EstimateError> {
    let sniff = trace.sniff_channel.ok_or(if trace.is_empty() {
        EstimateError::TooFewObservations {
            found: 0,
            needed: 3,
        }
    } else {
        EstimateError::NoSniffChannel
    })?;
    let interval = estimate_interval(trace, cfg)?;
    let classification = classify_csa(trace, &interval, cfg)?;
    let first = trace.observations[0].timestamp_ns;
    let last = trace.observations[trace.len() - 1].timestamp_ns;
    let mut out = Reconstruction {
        classification,
        channel_identifier: None,
        alignment: None,
        map: None,
        map_error: None,
        first_timestamp_ns: first,
        last_timestamp_ns: last,
    };
    if out.classification.verdict != CsaVerdict::Csa2 {
        return Ok(out);
    }
    let ci = access_address.channel_identifier();
    let c_meas = build_meas_vector(trace, &out.classification.interval, cfg)?;
    let (alignment, map) = align_counter_screened(&c_meas, ci, sniff)?;
    out.channel_identifier = Some(ci);
    match map {
        Ok(map) => out.map = Some(map),
        Err(e) => out.map_error = Some(e.to_string()),
    }
    out.alignment = Some(alignment);
    Ok(out)
}

pub fn report_for(
    access_address: AccessAddress,
    trace: &SniffTrace,
    cfg: &EstimatorConfig,
) -> EstimationReport {
    let (reconstruction, error) = match reconstruct(access_address, trace, cfg) {
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(e.to_string())),
    };
    EstimationReport {
        access_address,
        sniff_channel: trace.sniff_channel,
        n_observations: trace.len(),
        reconstruction,
        error,
    }
}
