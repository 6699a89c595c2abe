//! Sniffer observations on a single channel, and their CSV/JSONL forms.
//!
//! CSV layout (header required):
//!
//! ```text
//! # sniffer_clock_hz=4000000
//! timestamp_ns,access_address_hex,channel,is_central
//! 1250000,0xB0A1CD9D,22,true
//! ```
//!
//! Leading `# key=value` lines carry capture metadata. A `timestamp_us`
//! first column is accepted and scaled to nanoseconds on ingest.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::csa::{AccessAddress, ConnectionParams, EventCounter, DATA_CHANNELS};

/// Integer nanoseconds since capture start.
pub type Nanos = i64;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {row}, column {column}: {reason}")]
    Parse {
        row: usize,
        column: String,
        reason: String,
    },
    #[error("line {row}: channel {found} differs from sniff channel {expected}")]
    MixedChannels { row: usize, expected: u8, found: u8 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceFormat {
    Csv,
    Jsonl,
}

impl TraceFormat {
    /// Guess from a file extension; anything but `.jsonl`/`.json` is CSV.
    pub fn from_path(path: &std::path::Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => TraceFormat::Jsonl,
            _ => TraceFormat::Csv,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Observation {
    pub timestamp_ns: Nanos,
    #[serde(rename = "access_address_hex")]
    pub access_address: AccessAddress,
    pub channel: u8,
    pub is_central: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SniffTrace {
    /// `None` only for a trace without observations.
    pub sniff_channel: Option<u8>,
    pub observations: Vec<Observation>,
    pub capture_meta: BTreeMap<String, String>,
}

impl SniffTrace {
    pub fn new(sniff_channel: u8) -> Self {
        SniffTrace {
            sniff_channel: Some(sniff_channel),
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn timestamps(&self) -> impl Iterator<Item = Nanos> + '_ {
        self.observations.iter().map(|o| o.timestamp_ns)
    }

    /// Stable sort by timestamp, ties broken by access address.
    pub fn sort(&mut self) {
        self.observations
            .sort_by_key(|o| (o.timestamp_ns, o.access_address));
    }

    /// Observations with `start <= t < end`.
    pub fn window(&self, start: Nanos, end: Nanos) -> SniffTrace {
        SniffTrace {
            sniff_channel: self.sniff_channel,
            observations: self
                .observations
                .iter()
                .filter(|o| (start..end).contains(&o.timestamp_ns))
                .copied()
                .collect(),
            capture_meta: self.capture_meta.clone(),
        }
    }
}

/// Ground-truth event of one simulated connection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimelineEvent {
    /// Epoch-extended counter; the on-air value is `counter mod 65536`.
    pub counter: u64,
    pub channel: u8,
    pub true_time_ns: Nanos,
}

impl TimelineEvent {
    pub fn event_counter(&self) -> EventCounter {
        EventCounter::from_extended(self.counter)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventTimeline {
    pub params: ConnectionParams,
    pub events: Vec<TimelineEvent>,
}

#[derive(Deserialize)]
struct CsvRow {
    timestamp: String,
    access_address_hex: String,
    channel: String,
    is_central: String,
}

pub fn load_trace<R: Read>(source: R, format: TraceFormat) -> Result<SniffTrace, TraceError> {
    let mut trace = match format {
        TraceFormat::Csv => load_csv(source)?,
        TraceFormat::Jsonl => load_jsonl(source)?,
    };
    trace.sort();
    Ok(trace)
}

fn parse_err(row: usize, column: &str, reason: impl Into<String>) -> TraceError {
    TraceError::Parse {
        row,
        column: column.to_owned(),
        reason: reason.into(),
    }
}

fn parse_bool(row: usize, s: &str) -> Result<bool, TraceError> {
    match s.trim().to_ascii_lowercase().as_str() {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        other => Err(parse_err(
            row,
            "is_central",
            format!("not a boolean: {other:?}"),
        )),
    }
}

fn parse_channel(row: usize, s: &str) -> Result<u8, TraceError> {
    let ch: u8 = s
        .trim()
        .parse()
        .map_err(|_| parse_err(row, "channel", format!("not a channel index: {s:?}")))?;
    if ch >= DATA_CHANNELS {
        return Err(parse_err(
            row,
            "channel",
            format!("{ch} is not a data channel"),
        ));
    }
    Ok(ch)
}

fn parse_micros(row: usize, s: &str) -> Result<Nanos, TraceError> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| parse_err(row, "timestamp_us", format!("not a number: {s:?}")))?;
    if !v.is_finite() {
        return Err(parse_err(row, "timestamp_us", "not finite"));
    }
    Ok((v * 1000.0).round() as Nanos)
}

fn load_csv<R: Read>(source: R) -> Result<SniffTrace, TraceError> {
    let mut text = String::new();
    BufReader::new(source).read_to_string(&mut text)?;
    let mut trace = SniffTrace::default();
    let mut body_start = 0usize;
    let mut header_line = 0usize;
    for (i, line) in text.split_inclusive('\n').enumerate() {
        let t = line.trim();
        if let Some(meta) = t.strip_prefix('#') {
            if let Some((k, v)) = meta.split_once('=') {
                trace
                    .capture_meta
                    .insert(k.trim().to_owned(), v.trim().to_owned());
            }
            body_start += line.len();
            header_line = i + 1;
        } else if t.is_empty() {
            body_start += line.len();
            header_line = i + 1;
        } else {
            break;
        }
    }
    let body = text.get(body_start..).unwrap_or("");
    if body.trim().is_empty() {
        return Ok(trace);
    }
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(body.as_bytes());
    let headers = reader.headers()?.clone();
    let micros = match headers.get(0) {
        Some("timestamp_ns") => false,
        Some("timestamp_us") => true,
        other => {
            return Err(parse_err(
                header_line + 1,
                "timestamp_ns",
                format!("unexpected header {other:?}"),
            ))
        }
    };
    let renamed: csv::StringRecord = headers
        .iter()
        .enumerate()
        .map(|(i, h)| if i == 0 { "timestamp" } else { h })
        .collect();
    reader.set_headers(renamed.clone());
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        // 1-based file line of this data row
        let row = record
            .position()
            .map(|p| header_line + p.line() as usize)
            .unwrap_or(header_line + i + 2);
        let raw: CsvRow = record
            .deserialize(Some(&renamed))
            .map_err(|e| parse_err(row, "*", e.to_string()))?;
        let timestamp_ns = if micros {
            parse_micros(row, &raw.timestamp)?
        } else {
            raw.timestamp.trim().parse().map_err(|_| {
                parse_err(
                    row,
                    "timestamp_ns",
                    format!("not an integer: {:?}", raw.timestamp),
                )
            })?
        };
        let access_address =
            raw.access_address_hex
                .parse()
                .map_err(|e: crate::csa::ParamError| {
                    parse_err(row, "access_address_hex", e.to_string())
                })?;
        let obs = Observation {
            timestamp_ns,
            access_address,
            channel: parse_channel(row, &raw.channel)?,
            is_central: parse_bool(row, &raw.is_central)?,
        };
        push_checked(&mut trace, obs, row)?;
    }
    Ok(trace)
}

fn push_checked(trace: &mut SniffTrace, obs: Observation, row: usize) -> Result<(), TraceError> {
    match trace.sniff_channel {
        None => trace.sniff_channel = Some(obs.channel),
        Some(expected) if expected != obs.channel => {
            return Err(TraceError::MixedChannels {
                row,
                expected,
                found: obs.channel,
            })
        }
        Some(_) => {}
    }
    trace.observations.push(obs);
    Ok(())
}

fn load_jsonl<R: Read>(source: R) -> Result<SniffTrace, TraceError> {
    let mut trace = SniffTrace::default();
    for (i, line) in BufReader::new(source).lines().enumerate() {
        let line = line?;
        let row = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let obs: Observation =
            serde_json::from_str(&line).map_err(|e| parse_err(row, "*", e.to_string()))?;
        if obs.channel >= DATA_CHANNELS {
            return Err(parse_err(
                row,
                "channel",
                format!("{} is not a data channel", obs.channel),
            ));
        }
        push_checked(&mut trace, obs, row)?;
    }
    Ok(trace)
}

pub fn save_trace<W: Write>(
    trace: &SniffTrace,
    mut sink: W,
    format: TraceFormat,
) -> Result<(), TraceError> {
    match format {
        TraceFormat::Csv => {
            for (k, v) in &trace.capture_meta {
                writeln!(sink, "# {k}={v}")?;
            }
            writeln!(sink, "timestamp_ns,access_address_hex,channel,is_central")?;
            for o in &trace.observations {
                writeln!(
                    sink,
                    "{},{},{},{}",
                    o.timestamp_ns, o.access_address, o.channel, o.is_central
                )?;
            }
        }
        TraceFormat::Jsonl => {
            for o in &trace.observations {
                serde_json::to_writer(&mut sink, o)?;
                sink.write_all(b"\n")?;
            }
        }
    }
    sink.flush()?;
    Ok(())
}

/// Partition by access address, keeping only central (event-opening)
/// messages. Every address seen gets an entry, even if nothing survives
/// the filter.
pub fn split_by_connection(trace: &SniffTrace) -> BTreeMap<AccessAddress, SniffTrace> {
    let mut out: BTreeMap<AccessAddress, SniffTrace> = BTreeMap::new();
    for o in &trace.observations {
        let part = out.entry(o.access_address).or_insert_with(|| SniffTrace {
            sniff_channel: trace.sniff_channel,
            observations: Vec::new(),
            capture_meta: trace.capture_meta.clone(),
        });
        if o.is_central {
            part.observations.push(*o);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(t: Nanos, aa: u32, central: bool) -> Observation {
        Observation {
            timestamp_ns: t,
            access_address: AccessAddress(aa),
            channel: 22,
            is_central: central,
        }
    }

    #[test]
    fn empty_file_is_empty_trace() {
        let t = load_trace("".as_bytes(), TraceFormat::Csv).unwrap();
        assert!(t.is_empty());
        let t = load_trace(
            "timestamp_ns,access_address_hex,channel,is_central\n".as_bytes(),
            TraceFormat::Csv,
        )
        .unwrap();
        assert!(t.is_empty());
        assert!(load_trace("".as_bytes(), TraceFormat::Jsonl)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn csv_rows_are_sorted_and_parsed() {
        let csv = "timestamp_ns,access_address_hex,channel,is_central\n\
                   300,0xB0A1CD9D,22,true\n\
                   100,0xB0A1CD9D,22,true\n\
                   200,0x12345678,22,false\n";
        let t = load_trace(csv.as_bytes(), TraceFormat::Csv).unwrap();
        let ts: Vec<_> = t.timestamps().collect();
        assert_eq!(ts, [100, 200, 300]);
        assert_eq!(t.observations[0].access_address, AccessAddress(0xB0A1_CD9D));
        assert_eq!(t.sniff_channel, Some(22));
        assert!(!t.observations[1].is_central);
    }

    #[test]
    fn micros_are_scaled() {
        let csv = "timestamp_us,access_address_hex,channel,is_central\n12.5,0x1,3,1\n";
        let t = load_trace(csv.as_bytes(), TraceFormat::Csv).unwrap();
        assert_eq!(t.observations[0].timestamp_ns, 12_500);
    }

    #[test]
    fn malformed_rows_report_position() {
        let csv = "timestamp_ns,access_address_hex,channel,is_central\n\
                   100,0x1,22,true\n\
                   abc,0x1,22,true\n";
        match load_trace(csv.as_bytes(), TraceFormat::Csv) {
            Err(TraceError::Parse { row, column, .. }) => {
                assert_eq!(row, 3);
                assert_eq!(column, "timestamp_ns");
            }
            other => panic!("unexpected {other:?}"),
        }
        let csv = "timestamp_ns,access_address_hex,channel,is_central\n100,0xZZ,22,true\n";
        assert!(matches!(
            load_trace(csv.as_bytes(), TraceFormat::Csv),
            Err(TraceError::Parse { row: 2, .. })
        ));
        let csv = "timestamp_ns,access_address_hex,channel,is_central\n100,0x1,40,true\n";
        assert!(load_trace(csv.as_bytes(), TraceFormat::Csv).is_err());
    }

    #[test]
    fn mixed_channels_rejected() {
        let csv = "timestamp_ns,access_address_hex,channel,is_central\n\
                   100,0x1,22,true\n\
                   200,0x1,21,true\n";
        assert!(matches!(
            load_trace(csv.as_bytes(), TraceFormat::Csv),
            Err(TraceError::MixedChannels {
                row: 3,
                expected: 22,
                found: 21
            })
        ));
    }

    #[test]
    fn meta_and_both_formats_round_trip() {
        let mut t = SniffTrace::new(22);
        t.capture_meta.insert("center_mhz".into(), "2450".into());
        t.observations = vec![
            obs(-5, 0xB0A1_CD9D, true),
            obs(7_500_123, 0xFFFF_FFFF, false),
        ];
        let mut buf = Vec::new();
        save_trace(&t, &mut buf, TraceFormat::Csv).unwrap();
        assert_eq!(load_trace(buf.as_slice(), TraceFormat::Csv).unwrap(), t);
        let mut buf = Vec::new();
        save_trace(&t, &mut buf, TraceFormat::Jsonl).unwrap();
        let back = load_trace(buf.as_slice(), TraceFormat::Jsonl).unwrap();
        assert_eq!(back.observations, t.observations);
        assert_eq!(back.sniff_channel, Some(22));
    }

    #[test]
    fn split_filters_centrals() {
        let mut t = SniffTrace::new(22);
        t.observations = vec![
            obs(1, 1, true),
            obs(2, 2, false),
            obs(3, 1, false),
            obs(4, 1, true),
        ];
        let parts = split_by_connection(&t);
        assert_eq!(parts.len(), 2);
        assert_eq!(parts[&AccessAddress(1)].len(), 2);
        assert!(parts[&AccessAddress(2)].is_empty());
        let single = split_by_connection(&SniffTrace {
            observations: vec![obs(1, 9, true)],
            ..SniffTrace::new(22)
        });
        assert_eq!(single.len(), 1);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_obs() -> impl Strategy<Value = Observation> {
            (any::<i64>(), any::<u32>(), any::<bool>()).prop_map(|(t, aa, c)| Observation {
                timestamp_ns: t,
                access_address: AccessAddress(aa),
                channel: 9,
                is_central: c,
            })
        }

        proptest! {
            #[test]
            fn csv_round_trip(mut v in proptest::collection::vec(arb_obs(), 1..40)) {
                let mut t = SniffTrace::new(9);
                t.observations.append(&mut v);
                t.sort();
                let mut buf = Vec::new();
                save_trace(&t, &mut buf, TraceFormat::Csv).unwrap();
                let back = load_trace(buf.as_slice(), TraceFormat::Csv).unwrap();
                prop_assert_eq!(back, t);
            }

            #[test]
            fn split_is_partition(v in proptest::collection::vec(arb_obs(), 0..60)) {
                let t = SniffTrace { observations: v.clone(), ..SniffTrace::new(9) };
                let parts = split_by_connection(&t);
                let kept: usize = parts.values().map(|p| p.len()).sum();
                prop_assert_eq!(kept, v.iter().filter(|o| o.is_central).count());
                for (aa, p) in &parts {
                    let expected: Vec<_> = v.iter().filter(|o| o.access_address == *aa && o.is_central).copied().collect();
                    prop_assert_eq!(&p.observations, &expected);
                }
            }
        }
    }
}
