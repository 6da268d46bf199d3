use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hdpsim_cli::{run_scenario, CliError, Scenario};
use serde_json::{json, Value};

fn hdpsim(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hdpsim"))
        .current_dir(dir)
        .env_remove("SIM_LOG_LEVEL")
        .args(args)
        .output()
        .unwrap()
}

fn stderr_json(out: &Output) -> Value {
    let text = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(text.lines().count(), 1, "{text}");
    serde_json::from_str(text.trim()).unwrap()
}

fn packaged() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/pulsemeter.json")
}

fn addr(v: u64) -> String {
    let b = v.to_be_bytes();
    b[2..]
        .iter()
        .map(|o| format!("{o:02X}"))
        .collect::<Vec<_>>()
        .join(":")
}

/// One master, nine neighbours, and eight pages from the master.
fn crowded_scenario() -> Value {
    let devices: Vec<Value> = (1..=10)
        .map(|v| json!({ "address": addr(v), "position": { "x": (v % 3) as f64, "y": 0.0 } }))
        .collect();
    let mut timeline = vec![json!({ "at_us": 0, "action": {
        "type": "start_inquiry", "device": addr(1), "duration_us": 200_000, "max_responses": 9 } })];
    for v in 2..=9 {
        timeline.push(json!({ "at_us": 1_000_000, "action": { "type": "page", "master": addr(1), "target": addr(v) } }));
    }
    json!({ "devices": devices, "timeline": timeline, "duration_us": 3_000_000 })
}

#[test]
fn validate_accepts_packaged_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let out = hdpsim(
        dir.path(),
        &["validate", "--scenario", packaged().to_str().unwrap()],
    );
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("2 devices"));
}

#[test]
fn malformed_json_exits_2_with_position() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.json"), "{\n  \"devices\": [}\n").unwrap();
    let out = hdpsim(dir.path(), &["validate", "--scenario", "bad.json"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_json(&out);
    assert_eq!(err["error"], "parse");
    assert_eq!(err["line"], 2);
}

#[test]
fn undefined_address_exits_2_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let text = json!({
        "devices": [{ "address": addr(1) }],
        "timeline": [{ "at_us": 0, "action": { "type": "move_device", "device": addr(7), "position": { "x": 1.0, "y": 0.0 } } }]
    });
    fs::write(dir.path().join("s.json"), text.to_string()).unwrap();
    let out = hdpsim(
        dir.path(),
        &[
            "simulate",
            "--scenario",
            "s.json",
            "--seed",
            "1",
            "--trace",
            "t",
            "--metrics",
            "m",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_json(&out);
    assert_eq!(err["error"], "validation");
    assert_eq!(err["field"], "timeline[0].action.device");
    assert_eq!(err["rule"], "undefined address 00:00:00:00:00:07");
    assert!(!dir.path().join("t").exists());
}

#[test]
fn missing_file_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let out = hdpsim(dir.path(), &["validate", "--scenario", "nope.json"]);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(stderr_json(&out)["error"], "io");
}

#[test]
fn unwritable_trace_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let out = hdpsim(
        dir.path(),
        &["demo", "pulsemeter", "--trace", "no/such/dir/trace.jsonl"],
    );
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn bad_flags_exit_2_with_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = hdpsim(dir.path(), &["simulate", "--seed", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"], "usage");
}

#[test]
fn bad_log_level_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_hdpsim"))
        .current_dir(dir.path())
        .env("SIM_LOG_LEVEL", "loud")
        .args(["validate", "--scenario", packaged().to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"], "usage");
}

#[test]
fn debug_logging_goes_to_stderr_only() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_hdpsim"))
        .current_dir(dir.path())
        .env("SIM_LOG_LEVEL", "debug")
        .args(["demo", "pulsemeter"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(!out.stderr.is_empty());
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 1);
}

#[test]
fn eighth_page_is_one_piconet_full_event() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("crowd.json"),
        crowded_scenario().to_string(),
    )
    .unwrap();
    let out = hdpsim(
        dir.path(),
        &[
            "simulate",
            "--scenario",
            "crowd.json",
            "--seed",
            "8",
            "--trace",
            "t.jsonl",
            "--metrics",
            "m.json",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let trace = fs::read_to_string(dir.path().join("t.jsonl")).unwrap();
    let full: Vec<Value> = trace
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap())
        .filter(|r| r["ev"] == "error" && r["detail"]["error"] == "PiconetFull")
        .collect();
    assert_eq!(full.len(), 1);
    assert_eq!(full[0]["detail"]["op"], "page");
    let metrics: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("m.json")).unwrap()).unwrap();
    assert_eq!(metrics["errors"], json!({ "PiconetFull": 1 }));
    assert_eq!(
        metrics["piconets"][0]["slaves"].as_array().unwrap().len(),
        7
    );
}

#[test]
fn pulsemeter_delivers_everything_after_reconnect() {
    let run = run_scenario(&hdpsim_cli::pulsemeter(), 42, None).unwrap();
    let m = &run.metrics;
    assert_eq!(m.measurements.sent, 60);
    assert_eq!(m.measurements.delivered, 60);
    assert_eq!(m.measurements.evicted, 0);
    assert_eq!(m.measurements.in_flight, 0);
    assert!(
        m.measurements.buffered > 0,
        "the walk out of range should buffer readings"
    );
    assert_eq!(run.trace.count("link_lost"), 1);
    assert_eq!(run.trace.count("link_restored"), 1);
    assert_eq!(m.sync[0].offset_us, 1500);
    assert!(m.violations.is_empty());
    assert_eq!(m.discovery_latency_us.len(), 1);
}

#[test]
fn pulsemeter_is_deterministic_per_seed() {
    let s = hdpsim_cli::pulsemeter();
    let a = run_scenario(&s, 7, None).unwrap();
    let b = run_scenario(&s, 7, None).unwrap();
    assert_eq!(a.trace.to_jsonl(), b.trace.to_jsonl());
    assert_eq!(a.metrics.to_json(), b.metrics.to_json());
    let c = run_scenario(&s, 8, None).unwrap();
    assert_eq!(c.metrics.measurements.delivered, 60);
}

#[test]
fn until_stops_early_and_skips_later_steps() {
    let s = hdpsim_cli::pulsemeter();
    let run = run_scenario(&s, 42, Some(10_000_000)).unwrap();
    assert_eq!(run.metrics.end_us, 10_000_000);
    assert_eq!(run.trace.count("link_lost"), 0);
    assert!(run.metrics.measurements.sent <= 6);
}

#[test]
fn unequal_pins_fail_association_in_the_trace() {
    let mut s: Value = serde_json::from_str(hdpsim_cli::PULSEMETER_SCENARIO).unwrap();
    s["security"]["pins"][0]["peer_pin"] = json!("9999");
    let s = Scenario::from_json(&s.to_string()).unwrap();
    let run = run_scenario(&s, 42, None).unwrap();
    assert_eq!(run.trace.count("auth_fail"), 1);
    assert_eq!(run.trace.count("assoc"), 0);
    assert_eq!(run.metrics.measurements.sent, 0);
    assert!(run.metrics.errors.contains_key("AuthRequired"));
}

#[test]
fn empty_run_has_zero_counters() {
    let s =
        Scenario::from_json(&json!({ "devices": [{ "address": addr(1) }] }).to_string()).unwrap();
    let run = run_scenario(&s, 0, None).unwrap();
    assert_eq!(run.metrics.end_us, 0);
    assert_eq!(run.metrics.measurements, Default::default());
    assert!(run.check().is_ok());
}

#[test]
fn recorded_violation_maps_to_exit_3() {
    let s =
        Scenario::from_json(&json!({ "devices": [{ "address": addr(1) }] }).to_string()).unwrap();
    let mut run = run_scenario(&s, 0, None).unwrap();
    run.metrics.violations.push(hdpsim::InvariantViolation {
        invariant: "piconet_size".into(),
        t_us: 12,
        detail: "8 slaves".into(),
    });
    let err = run.check().unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert!(matches!(err, CliError::Invariant { t_us: 12, .. }));
}
