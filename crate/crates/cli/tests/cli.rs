use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hopcast_core::reconstruct::{report_for, CsaVerdict, EstimationReport, EstimatorConfig};
use hopcast_core::trace::{load_trace, split_by_connection, TraceFormat};
use serde_json::Value;
use tempfile::TempDir;

fn hopcast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hopcast"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

fn scenario(duration_s: u64) -> String {
    let imp = format!(
        r#"{{"timestamp_jitter_sigma_us": 50, "clock_drift_ppm": 20, "duration_us": {}}}"#,
        duration_s * 1_000_000
    );
    format!(
        r#"{{
  "sniff_channel": 22,
  "rng_seed": 7,
  "connections": [
    {{"params": {{"access_address": "0x50654C32", "c_int_us": 18750, "channel_map": "0x1FFFFFFC00", "csa": "CSA1", "hop_increment": 7, "initial_channel": 0}}, "start_offset_us": 1100, "impairments": {imp}}},
    {{"params": {{"access_address": "0xB0A1CD9D", "c_int_us": 12500, "channel_map": "0x1E00E00700", "csa": "CSA2"}}, "start_offset_us": 4700, "initial_k": 31337, "impairments": {imp}}},
    {{"params": {{"access_address": "0x8E89BED6", "c_int_us": 7500, "channel_map": "0x1FFFFFFC00", "csa": "CSA2"}}, "start_offset_us": 2300, "initial_k": 65000, "impairments": {imp}}}
  ]
}}"#
    )
}

fn simulate(tmp: &Path, duration_s: u64) -> PathBuf {
    let sc = write(tmp, "scenario.json", &scenario(duration_s));
    let out = tmp.join("sim");
    let o = hopcast(&["simulate", "--scenario", p(&sc), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn simulate_writes_trace_timelines_and_manifest() {
    let tmp = TempDir::new().unwrap();
    let sim = simulate(tmp.path(), 30);
    let timelines = fs::read_to_string(sim.join("timelines.jsonl")).unwrap();
    assert_eq!(timelines.lines().count(), 3);
    let manifest = json(&sim.join("manifest.json"));
    assert_eq!(manifest["subcommand"], "simulate");
    assert_eq!(manifest["rng_seed"], 7);
    assert_eq!(
        manifest["outputs"],
        serde_json::json!(["trace.csv", "timelines.jsonl", "manifest.json"])
    );
    let trace = load_trace(
        fs::File::open(sim.join("trace.csv")).unwrap(),
        TraceFormat::Csv,
    )
    .unwrap();
    assert_eq!(split_by_connection(&trace).len(), 3);
}

#[test]
fn simulate_is_deterministic_per_seed() {
    let tmp = TempDir::new().unwrap();
    let sc = write(tmp.path(), "s.json", &scenario(20));
    let read = |dir: &str, seed: &str| {
        let out = tmp.path().join(dir);
        assert_eq!(
            code(&hopcast(&[
                "simulate",
                "--scenario",
                p(&sc),
                "--out",
                p(&out),
                "--seed",
                seed
            ])),
            0
        );
        (
            fs::read(out.join("trace.csv")).unwrap(),
            fs::read(out.join("timelines.jsonl")).unwrap(),
        )
    };
    let a = read("a", "11");
    let b = read("b", "11");
    let c = read("c", "12");
    assert_eq!(a, b);
    assert_ne!(a.0, c.0);
    assert_eq!(
        a.1, c.1,
        "ground truth does not depend on the seed without drift walk"
    );
}

#[test]
fn empty_scenario_gives_empty_trace() {
    let tmp = TempDir::new().unwrap();
    let sc = write(tmp.path(), "empty.json", r#"{"sniff_channel": 22}"#);
    let out = tmp.path().join("o");
    assert_eq!(
        code(&hopcast(&[
            "simulate",
            "--scenario",
            p(&sc),
            "--out",
            p(&out)
        ])),
        0
    );
    let trace = load_trace(
        fs::File::open(out.join("trace.csv")).unwrap(),
        TraceFormat::Csv,
    )
    .unwrap();
    assert!(trace.is_empty());
}

#[test]
fn exit_codes_by_error_class() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("o");
    let bad = write(tmp.path(), "bad.json", r#"{"sniff_channel": 40}"#);
    assert_eq!(
        code(&hopcast(&[
            "simulate",
            "--scenario",
            p(&bad),
            "--out",
            p(&out)
        ])),
        2
    );
    let garbled = write(tmp.path(), "garbled.json", "{ not json");
    assert_eq!(
        code(&hopcast(&[
            "simulate",
            "--scenario",
            p(&garbled),
            "--out",
            p(&out)
        ])),
        2
    );
    let trace = write(
        tmp.path(),
        "t.csv",
        "timestamp_ns,access_address_hex,channel,is_central\n12,0xZZ,22,true\n",
    );
    let o = hopcast(&["reconstruct", "--trace", p(&trace), "--out", p(&out)]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
    let missing = tmp.path().join("missing.csv");
    assert_eq!(
        code(&hopcast(&[
            "reconstruct",
            "--trace",
            p(&missing),
            "--out",
            p(&out)
        ])),
        5
    );
}

#[test]
fn reconstruct_flags_insufficient_data() {
    let tmp = TempDir::new().unwrap();
    let trace = write(
        tmp.path(),
        "t.csv",
        "timestamp_ns,access_address_hex,channel,is_central\n0,0x12345678,22,true\n7500000,0x12345678,22,true\n",
    );
    let out = tmp.path().join("rec");
    let o = hopcast(&["reconstruct", "--trace", p(&trace), "--out", p(&out)]);
    assert_eq!(code(&o), 4);
    let report = json(&out.join("report_0x12345678.json"));
    assert!(report["error"].as_str().unwrap().contains("observations"));
    assert!(out.join("manifest.json").exists());
}

#[test]
fn reconstruct_matches_library_and_recovers_parameters() {
    let tmp = TempDir::new().unwrap();
    let sim = simulate(tmp.path(), 60);
    let out = tmp.path().join("rec");
    let o = hopcast(&[
        "reconstruct",
        "--trace",
        p(&sim.join("trace.csv")),
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let reports: Vec<EstimationReport> =
        serde_json::from_str(&fs::read_to_string(out.join("reports.json")).unwrap()).unwrap();
    let trace = load_trace(
        fs::File::open(sim.join("trace.csv")).unwrap(),
        TraceFormat::Csv,
    )
    .unwrap();
    let direct: Vec<EstimationReport> = split_by_connection(&trace)
        .iter()
        .map(|(aa, t)| report_for(*aa, t, &EstimatorConfig::default()))
        .collect();
    assert_eq!(reports, direct);

    let by_aa = |aa: &str| {
        reports
            .iter()
            .find(|r| r.access_address.to_string() == aa)
            .unwrap()
    };
    let csa1 = by_aa("0x50654C32").reconstruction.as_ref().unwrap();
    assert_eq!(csa1.classification.verdict, CsaVerdict::Csa1SingleHit);
    assert_eq!(csa1.classification.interval.c_int_hat_ns, 18_750_000);
    let csa2 = by_aa("0xB0A1CD9D").reconstruction.as_ref().unwrap();
    assert_eq!(csa2.classification.verdict, CsaVerdict::Csa2);
    assert_eq!(csa2.classification.interval.c_int_hat_ns, 12_500_000);
    assert_eq!(
        csa2.map.as_ref().unwrap().assumed_map.to_string(),
        "0x1E00E00700"
    );
}

#[test]
fn predict_pipeline_and_filters() {
    let tmp = TempDir::new().unwrap();
    let sim = simulate(tmp.path(), 160);
    let trace = sim.join("trace.csv");
    let rec = tmp.path().join("rec");
    assert_eq!(
        code(&hopcast(&[
            "reconstruct",
            "--trace",
            p(&trace),
            "--out",
            p(&rec),
            "--until-seconds",
            "60"
        ])),
        0
    );
    let reports = rec.join("reports.json");

    let pred = tmp.path().join("pred");
    let o = hopcast(&[
        "predict",
        "--reports",
        p(&reports),
        "--trace",
        p(&trace),
        "--out",
        p(&pred),
        "--train-seconds",
        "60",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary = json(&pred.join("summary.json"));
    for s in summary.as_array().unwrap() {
        assert!(s["rmse_ms"].as_f64().unwrap() <= 0.15, "{s}");
    }
    let eccdf = fs::read_to_string(pred.join("eccdf_all.csv")).unwrap();
    assert!(eccdf.starts_with("abs_error_ns,probability\n"));

    // forecast restricted to the sniffed channel is a subset of the full one
    let only = tmp.path().join("only");
    let single = "report_0xB0A1CD9D.json";
    let o = hopcast(&[
        "predict",
        "--reports",
        p(&rec.join(single)),
        "--trace",
        p(&trace),
        "--out",
        p(&only),
        "--train-seconds",
        "60",
        "--channel",
        "22",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let full = json(&pred.join("forecast_0xB0A1CD9D.json"));
    let filtered = json(&only.join("forecast_0xB0A1CD9D.json"));
    let expected: Vec<&Value> = full["entries"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|e| e["channel"] == 22)
        .collect();
    let got: Vec<&Value> = filtered["entries"].as_array().unwrap().iter().collect();
    assert!(!got.is_empty());
    assert_eq!(got, expected);

    // open-loop forecast against the simulator's ground truth
    let ev = tmp.path().join("ev");
    let o = hopcast(&[
        "evaluate",
        "--forecast",
        p(&pred.join("forecast_0xB0A1CD9D.json")),
        "--timelines",
        p(&sim.join("timelines.jsonl")),
        "--out",
        p(&ev),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let eval = json(&ev.join("eval.json"));
    assert_eq!(eval["channel_mismatches"], 0);
    assert!(eval["rmse_ns"].as_f64().unwrap() < 50_000.0);

    let ev2 = tmp.path().join("ev2");
    let o = hopcast(&[
        "evaluate",
        "--forecast",
        p(&pred.join("forecast_0x50654C32.json")),
        "--trace",
        p(&trace),
        "--out",
        p(&ev2),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn predict_horizon_zero_and_split_errors() {
    let tmp = TempDir::new().unwrap();
    let sim = simulate(tmp.path(), 40);
    let trace = sim.join("trace.csv");
    let rec = tmp.path().join("rec");
    assert_eq!(
        code(&hopcast(&[
            "reconstruct",
            "--trace",
            p(&trace),
            "--out",
            p(&rec),
            "--until-seconds",
            "20"
        ])),
        0
    );
    let report = rec.join("report_0xB0A1CD9D.json");

    let out = tmp.path().join("zero");
    let o = hopcast(&[
        "predict",
        "--reports",
        p(&report),
        "--trace",
        p(&trace),
        "--out",
        p(&out),
        "--train-seconds",
        "20",
        "--horizon",
        "0",
    ]);
    assert_eq!(code(&o), 4);
    assert!(String::from_utf8_lossy(&o.stderr).contains("do not overlap"));

    let full_rec = tmp.path().join("full");
    assert_eq!(
        code(&hopcast(&[
            "reconstruct",
            "--trace",
            p(&trace),
            "--out",
            p(&full_rec)
        ])),
        0
    );
    let o = hopcast(&[
        "predict",
        "--reports",
        p(&full_rec.join("reports.json")),
        "--trace",
        p(&trace),
        "--out",
        p(&out),
        "--train-seconds",
        "20",
    ]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--until-seconds"));
}

#[test]
fn hopgen_reproduces_remap_behaviour() {
    let tmp = TempDir::new().unwrap();
    let remap_targets = |params: &str| {
        let pf = write(tmp.path(), "params.json", params);
        let out = tmp.path().join("hops");
        let o = hopcast(&[
            "hopgen",
            "--params",
            p(&pf),
            "--out",
            p(&out),
            "--events",
            "370",
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let csv = fs::read_to_string(out.join("hops.csv")).unwrap();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next(),
            Some("index,k,unmapped,channel,remapped,time_us")
        );
        let mut per_unmapped =
            std::collections::BTreeMap::<u8, std::collections::BTreeSet<u8>>::new();
        for l in lines {
            let f: Vec<&str> = l.split(',').collect();
            if f[4] == "1" {
                per_unmapped
                    .entry(f[2].parse().unwrap())
                    .or_default()
                    .insert(f[3].parse().unwrap());
            }
        }
        per_unmapped
    };
    let csa1 = remap_targets(
        r#"{"access_address": "0xB0A1CD9D", "c_int_us": 7500, "channel_map": "0x1FFFFFFC00", "csa": "CSA1", "hop_increment": 7, "initial_channel": 0}"#,
    );
    assert_eq!(csa1.len(), 10);
    assert!(csa1.values().all(|s| s.len() == 1));
    let csa2 = remap_targets(
        r#"{"access_address": "0xB0A1CD9D", "c_int_us": 7500, "channel_map": "0x1FFFFFFC00", "csa": "CSA2"}"#,
    );
    assert!(csa2.values().any(|s| s.len() > 1));

    let bad = write(
        tmp.path(),
        "bad.json",
        r#"{"access_address": "0x1", "c_int_us": 7500, "channel_map": "0x1FFFFFFC00", "csa": "CSA1", "hop_increment": 3, "initial_channel": 0}"#,
    );
    assert_eq!(
        code(&hopcast(&[
            "hopgen",
            "--params",
            p(&bad),
            "--out",
            p(&tmp.path().join("x"))
        ])),
        2
    );
}
