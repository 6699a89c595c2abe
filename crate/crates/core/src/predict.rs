//! Channel access forecasts from recovered parameters, and a two-state
//! (anchor time, interval) Kalman filter that keeps them in step with the
//! connection's clock.
//!
//! Events are addressed by their offset from the first observation used
//! during reconstruction; for CSA#2 the on-air counter is
//! `k_init + offset mod 65536`.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::csa::{remap_csa2, AccessAddress, ChannelIdentifier, ChannelMap, EventCounter};
use crate::reconstruct::{CsaVerdict, EstimationReport, Reconstruction, CSA1_PERIOD};
use crate::trace::{Nanos, SniffTrace};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PredictError {
    #[error("horizon must be at least one event")]
    InvalidHorizon,
    #[error("hops since last update must be at least 1")]
    InvalidHops,
    #[error("counter alignment is ambiguous; candidates {candidates:?}")]
    Ambiguous { candidates: Vec<EventCounter> },
    #[error("report has no usable reconstruction: {0}")]
    Unusable(String),
    #[error("forecast and reference do not overlap")]
    EmptyOverlap,
    #[error("no training observations")]
    NoTraining,
}

/// What is known about a connection's hopping after reconstruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "csa", rename_all = "UPPERCASE")]
pub enum HopModel {
    /// Only the sniffed channel is predictable: it recurs at the profile
    /// phases every 37 events.
    Csa1 {
        sniff_channel: u8,
        period_profile: Vec<u8>,
    },
    Csa2 {
        sniff_channel: u8,
        channel_identifier: ChannelIdentifier,
        channel_map: ChannelMap,
        k_init: EventCounter,
    },
}

impl HopModel {
    pub fn from_report(report: &EstimationReport) -> Result<Self, PredictError> {
        let r = report.reconstruction.as_ref().ok_or_else(|| {
            PredictError::Unusable(report.error.clone().unwrap_or_else(|| "missing".into()))
        })?;
        let sniff_channel = report
            .sniff_channel
            .ok_or_else(|| PredictError::Unusable("no sniff channel".into()))?;
        match r.classification.verdict {
            CsaVerdict::Csa1SingleHit | CsaVerdict::Csa1Repeating => Ok(HopModel::Csa1 {
                sniff_channel,
                period_profile: r.classification.period_profile.clone(),
            }),
            CsaVerdict::Csa2 => {
                let a = r
                    .alignment
                    .as_ref()
                    .ok_or_else(|| PredictError::Unusable("no counter alignment".into()))?;
                if a.ambiguous {
                    return Err(PredictError::Ambiguous {
                        candidates: a.candidates.clone(),
                    });
                }
                let map = r.map.as_ref().ok_or_else(|| {
                    PredictError::Unusable(r.map_error.clone().unwrap_or_else(|| "no map".into()))
                })?;
                Ok(HopModel::Csa2 {
                    sniff_channel,
                    channel_identifier: r
                        .channel_identifier
                        .unwrap_or_else(|| report.access_address.channel_identifier()),
                    channel_map: map.assumed_map,
                    k_init: a.k_init,
                })
            }
        }
    }

    pub fn sniff_channel(&self) -> u8 {
        match self {
            HopModel::Csa1 { sniff_channel, .. } | HopModel::Csa2 { sniff_channel, .. } => {
                *sniff_channel
            }
        }
    }

    /// Counter and channel at an event offset; `None` where the model
    /// cannot say (CSA#1 events off the sniffed channel).
    pub fn channel_at(&self, offset: u64) -> Option<(Option<EventCounter>, u8)> {
        match self {
            HopModel::Csa1 {
                sniff_channel,
                period_profile,
            } => period_profile
                .contains(&((offset % CSA1_PERIOD) as u8))
                .then_some((None, *sniff_channel)),
            HopModel::Csa2 {
                channel_identifier,
                channel_map,
                k_init,
                ..
            } => {
                let k = k_init.wrapping_add(offset);
                Some((Some(k), remap_csa2(k, *channel_identifier, channel_map)))
            }
        }
    }

    pub fn hits_sniff_channel(&self, offset: u64) -> bool {
        matches!(self.channel_at(offset), Some((_, ch)) if ch == self.sniff_channel())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KalmanConfig {
    /// Timestamp measurement variance, ns^2.
    pub measurement_noise_var: f64,
    /// Anchor-time process noise, ns^2 per event.
    pub phase_process_var: f64,
    /// Interval random-walk process noise, ns^2 per event.
    pub interval_process_var: f64,
    /// Innovations beyond this many standard deviations are rejected.
    pub gate_sigma: f64,
    /// The interval estimate is clamped to this relative deviation from
    /// the nominal interval.
    pub max_interval_deviation: f64,
    /// Initial interval standard deviation, relative to the interval.
    pub initial_interval_std: f64,
}

impl Default for KalmanConfig {
    fn default() -> Self {
        KalmanConfig {
            measurement_noise_var: 100_000.0f64.powi(2),
            phase_process_var: 1.0,
            interval_process_var: 1e-4,
            gate_sigma: 6.0,
            max_interval_deviation: 1e-3,
            initial_interval_std: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum UpdateOutcome {
    Accepted {
        innovation_ns: f64,
    },
    /// Outside the gate; the state was advanced without correction.
    Rejected {
        innovation_ns: f64,
    },
}

/// Constant-velocity timing state: time of the anchor event and the
/// per-event interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyncState {
    pub anchor_event: u64,
    pub phase_ns: f64,
    pub interval_ns: f64,
    pub covariance: [[f64; 2]; 2],
    pub nominal_interval_ns: f64,
    pub config: KalmanConfig,
}

impl SyncState {
    pub fn new(
        anchor_event: u64,
        anchor_time: Nanos,
        interval_ns: f64,
        nominal_interval_ns: f64,
        config: KalmanConfig,
    ) -> Self {
        let iv_std = interval_ns * config.initial_interval_std;
        SyncState {
            anchor_event,
            phase_ns: anchor_time as f64,
            interval_ns,
            covariance: [[config.measurement_noise_var, 0.0], [0.0, iv_std * iv_std]],
            nominal_interval_ns,
            config,
        }
    }

    /// Starts at the first training observation and filters through the
    /// rest. `offsets` are event offsets matching `times`.
    pub fn from_training(
        times: &[Nanos],
        offsets: &[u64],
        interval_ns: f64,
        nominal_interval_ns: f64,
        config: KalmanConfig,
    ) -> Result<Self, PredictError> {
        let (&t0, &e0) = times
            .first()
            .zip(offsets.first())
            .ok_or(PredictError::NoTraining)?;
        let mut s = SyncState::new(e0, t0, interval_ns, nominal_interval_ns, config);
        for (&t, &e) in times.iter().zip(offsets).skip(1) {
            if e > s.anchor_event {
                s.update(t, (e - s.anchor_event) as u32)?;
            }
        }
        Ok(s)
    }

    /// Filters through the observations a reconstruction was computed
    /// from, starting from its fitted interval.
    pub fn from_reconstruction(
        reconstruction: &Reconstruction,
        training: &SniffTrace,
        config: KalmanConfig,
    ) -> Result<Self, PredictError> {
        let iv = &reconstruction.classification.interval;
        let times: Vec<Nanos> = training.timestamps().collect();
        if times.len() != iv.hop_counts.len() + 1 {
            return Err(PredictError::Unusable(format!(
                "reconstruction covers {} observations, training trace has {}",
                iv.hop_counts.len() + 1,
                times.len()
            )));
        }
        SyncState::from_training(
            &times,
            &iv.offsets(),
            iv.raw_gcd_ns,
            iv.c_int_hat_ns as f64,
            config,
        )
    }

    /// Predicted time and its standard deviation at `event` (at or after
    /// the anchor).
    pub fn predict(&self, event: u64) -> (f64, f64) {
        let n = event.saturating_sub(self.anchor_event) as f64;
        let mean = self.phase_ns + n * self.interval_ns;
        let p = self.propagated(n).0;
        (mean, p[0][0].max(0.0).sqrt())
    }

    fn propagated(&self, n: f64) -> ([[f64; 2]; 2], [f64; 2]) {
        let p = self.covariance;
        let q_p = self.config.phase_process_var;
        let q_c = self.config.interval_process_var;
        // F P F^T with F = [[1, n], [0, 1]], plus discretised process noise
        let p00 =
            p[0][0] + n * (p[0][1] + p[1][0]) + n * n * p[1][1] + q_p * n + q_c * n * n * n / 3.0;
        let p01 = p[0][1] + n * p[1][1] + q_c * n * n / 2.0;
        let p11 = p[1][1] + q_c * n;
        (
            [[p00, p01], [p01, p11]],
            [self.phase_ns + n * self.interval_ns, self.interval_ns],
        )
    }

    pub fn update(
        &mut self,
        measured_time: Nanos,
        hops_since_last: u32,
    ) -> Result<UpdateOutcome, PredictError> {
        if hops_since_last == 0 {
            return Err(PredictError::InvalidHops);
        }
        let n = hops_since_last as f64;
        let (p, x) = self.propagated(n);
        self.anchor_event += hops_since_last as u64;
        self.phase_ns = x[0];
        self.interval_ns = x[1];
        self.covariance = p;

        let r = self.config.measurement_noise_var;
        let innovation = measured_time as f64 - x[0];
        let s = p[0][0] + r;
        if innovation.abs() > self.config.gate_sigma * s.sqrt() {
            return Ok(UpdateOutcome::Rejected {
                innovation_ns: innovation,
            });
        }
        let k0 = p[0][0] / s;
        let k1 = p[1][0] / s;
        self.phase_ns += k0 * innovation;
        self.interval_ns += k1 * innovation;
        // Joseph form keeps the covariance symmetric PSD.
        let a = [[1.0 - k0, 0.0], [-k1, 1.0]];
        let mut np = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                let mut v = 0.0;
                for m in 0..2 {
                    for l in 0..2 {
                        v += a[i][m] * p[m][l] * a[j][l];
                    }
                }
                let kk = [k0, k1];
                np[i][j] = v + kk[i] * r * kk[j];
            }
        }
        let off = 0.5 * (np[0][1] + np[1][0]);
        self.covariance = [[np[0][0], off], [off, np[1][1]]];

        let lim = self.nominal_interval_ns * self.config.max_interval_deviation;
        self.interval_ns = self.interval_ns.clamp(
            self.nominal_interval_ns - lim,
            self.nominal_interval_ns + lim,
        );
        Ok(UpdateOutcome::Accepted {
            innovation_ns: innovation,
        })
    }
}

/// Functional form of [`SyncState::update`].
pub fn kalman_update(
    sync: &SyncState,
    measured_time: Nanos,
    hops_since_last: u32,
) -> Result<(SyncState, UpdateOutcome), PredictError> {
    let mut next = *sync;
    let outcome = next.update(measured_time, hops_since_last)?;
    Ok((next, outcome))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForecastEntry {
    /// Offset from the first reconstruction observation.
    pub event: u64,
    /// On-air counter; unknown for CSA#1.
    pub k: Option<EventCounter>,
    pub channel: u8,
    pub predicted_time_ns: Nanos,
    pub time_std_ns: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Forecast {
    pub access_address: Option<AccessAddress>,
    pub sniff_channel: Option<u8>,
    /// Per-event interval the forecast was extrapolated with.
    pub interval_ns: Option<f64>,
    pub entries: Vec<ForecastEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChannelFilter {
    All,
    Only(u8),
}

/// CSA#1 forecast: the sniffed channel at every profile phase in the next
/// `horizon` events after the anchor.
pub fn predict_csa1(
    period_profile: &[u8],
    sniff_channel: u8,
    sync: &SyncState,
    horizon: u64,
) -> Result<Forecast, PredictError> {
    let model = HopModel::Csa1 {
        sniff_channel,
        period_profile: period_profile.to_vec(),
    };
    forecast(&model, sync, horizon, ChannelFilter::All)
}

/// CSA#2 forecast of every event (or one channel) in the next `horizon`
/// events after the anchor.
pub fn predict_csa2(
    model: &HopModel,
    sync: &SyncState,
    horizon: u64,
    filter: ChannelFilter,
) -> Result<Forecast, PredictError> {
    forecast(model, sync, horizon, filter)
}

pub fn forecast(
    model: &HopModel,
    sync: &SyncState,
    horizon: u64,
    filter: ChannelFilter,
) -> Result<Forecast, PredictError> {
    if horizon == 0 {
        return Err(PredictError::InvalidHorizon);
    }
    let start = sync.anchor_event + 1;
    let entries = (start..start + horizon)
        .filter_map(|event| {
            let (k, channel) = model.channel_at(event)?;
            if let ChannelFilter::Only(c) = filter {
                if c != channel {
                    return None;
                }
            }
            let (mean, std) = sync.predict(event);
            Some(ForecastEntry {
                event,
                k,
                channel,
                predicted_time_ns: mean.round() as Nanos,
                time_std_ns: std,
            })
        })
        .collect();
    Ok(Forecast {
        access_address: None,
        sniff_channel: Some(model.sniff_channel()),
        interval_ns: Some(sync.interval_ns),
        entries,
    })
}

/// What a forecast is scored against.
pub enum Reference<'a> {
    /// Ground-truth `(event offset, time)` pairs, matched by event.
    Events(&'a [(u64, Nanos)]),
    /// Measured sniff-channel timestamps, matched to the nearest predicted
    /// sniff-channel access within half an interval.
    Trace {
        timestamps: &'a [Nanos],
        sniff_channel: u8,
        interval_ns: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rmse_ns: f64,
    pub abs_errors_ns: Vec<f64>,
    /// `(error, P(|e| > error))` at every distinct error value.
    pub eccdf: Vec<(f64, f64)>,
    pub p50_ns: f64,
    pub p95_ns: f64,
    pub matched: usize,
    /// Predictions with nothing measured near them.
    pub missed_predictions: usize,
    /// Measurements inside the forecast window that matched no prediction.
    pub unmatched_measurements: usize,
}

impl EvalReport {
    pub fn from_errors(errors_ns: &[f64]) -> Result<Self, PredictError> {
        if errors_ns.is_empty() {
            return Err(PredictError::EmptyOverlap);
        }
        let n = errors_ns.len() as f64;
        let rmse = (errors_ns.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
        let abs: Vec<f64> = errors_ns.iter().map(|e| e.abs()).collect();
        let mut sorted = abs.clone();
        sorted.sort_by(f64::total_cmp);
        let mut eccdf = Vec::new();
        for (i, &v) in sorted.iter().enumerate() {
            if sorted.get(i + 1) != Some(&v) {
                eccdf.push((v, (sorted.len() - i - 1) as f64 / n));
            }
        }
        Ok(EvalReport {
            rmse_ns: rmse,
            abs_errors_ns: abs,
            eccdf,
            p50_ns: quantile(&sorted, 0.5),
            p95_ns: quantile(&sorted, 0.95),
            matched: errors_ns.len(),
            missed_predictions: 0,
            unmatched_measurements: 0,
        })
    }

    pub fn write_eccdf_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "abs_error_ns,probability")?;
        for (e, p) in &self.eccdf {
            writeln!(w, "{e},{p}")?;
        }
        Ok(())
    }
}

/// Nearest-rank quantile of sorted data.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let rank = (p * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn evaluate(
    forecast: &Forecast,
    reference: &Reference<'_>,
) -> Result<EvalReport, PredictError> {
    match reference {
        Reference::Events(truth) => {
            let by_event: std::collections::HashMap<u64, Nanos> = truth.iter().copied().collect();
            let mut errors = Vec::new();
            let mut missed = 0;
            for e in &forecast.entries {
                match by_event.get(&e.event) {
                    Some(&t) => errors.push((t - e.predicted_time_ns) as f64),
                    None => missed += 1,
                }
            }
            let mut r = EvalReport::from_errors(&errors)?;
            r.missed_predictions = missed;
            Ok(r)
        }
        Reference::Trace {
            timestamps,
            sniff_channel,
            interval_ns,
        } => {
            let preds: Vec<Nanos> = forecast
                .entries
                .iter()
                .filter(|e| e.channel == *sniff_channel)
                .map(|e| e.predicted_time_ns)
                .collect();
            let (Some(&lo), Some(&hi)) = (preds.first(), preds.last()) else {
                return Err(PredictError::EmptyOverlap);
            };
            let half = interval_ns / 2.0;
            let mut used = vec![false; preds.len()];
            let mut errors = Vec::new();
            let mut unmatched = 0;
            for &t in timestamps.iter() {
                if (t as f64) < lo as f64 - half || (t as f64) > hi as f64 + half {
                    continue;
                }
                let i = preds.partition_point(|&p| p < t);
                let nearest = [i.checked_sub(1), Some(i)]
                    .into_iter()
                    .flatten()
                    .filter(|&j| j < preds.len())
                    .min_by_key(|&j| (preds[j] - t).abs());
                match nearest {
                    Some(j) if ((preds[j] - t).abs() as f64) < half && !used[j] => {
                        used[j] = true;
                        errors.push((t - preds[j]) as f64);
                    }
                    _ => unmatched += 1,
                }
            }
            let mut r = EvalReport::from_errors(&errors)?;
            r.missed_predictions = used.iter().filter(|u| !**u).count();
            r.unmatched_measurements = unmatched;
            Ok(r)
        }
    }
}

/// Result of following a connection through held-out measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingResult {
    /// Prediction made for each measurement before it was used to update.
    pub predictions: Vec<ForecastEntry>,
    /// Signed `measured - predicted`, aligned with `predictions`.
    pub errors_ns: Vec<f64>,
    pub rejected: usize,
    pub unmatched_measurements: usize,
    pub final_state: SyncState,
}

/// One-step-ahead tracking: predict each measured sniff-channel access,
/// score it, then feed it to the filter.
pub fn track(model: &HopModel, sync: &SyncState, timestamps: &[Nanos]) -> TrackingResult {
    let mut s = *sync;
    let mut predictions = Vec::new();
    let mut errors = Vec::new();
    let mut rejected = 0;
    let mut unmatched = 0;
    for &t in timestamps {
        let ahead = ((t as f64 - s.phase_ns) / s.interval_ns).round();
        if ahead < 1.0 {
            unmatched += 1;
            continue;
        }
        let event = s.anchor_event + ahead as u64;
        let Some((k, channel)) = model.channel_at(event) else {
            unmatched += 1;
            continue;
        };
        if channel != model.sniff_channel() {
            unmatched += 1;
            continue;
        }
        let (mean, std) = s.predict(event);
        let predicted = mean.round() as Nanos;
        predictions.push(ForecastEntry {
            event,
            k,
            channel,
            predicted_time_ns: predicted,
            time_std_ns: std,
        });
        errors.push((t - predicted) as f64);
        if let Ok(UpdateOutcome::Rejected { .. }) = s.update(t, ahead as u32) {
            rejected += 1;
        }
    }
    TrackingResult {
        predictions,
        errors_ns: errors,
        rejected,
        unmatched_measurements: unmatched,
        final_state: s,
    }
}
