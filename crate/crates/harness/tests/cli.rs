use std::fs;
use std::process::{Command, Output};

use serde_json::Value;

fn harness(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_versiontree-harness"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| {
        panic!("stdout is not JSON ({e}): {}", String::from_utf8_lossy(&o.stdout))
    })
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&harness(&["--help"])), 0);
    assert_eq!(code(&harness(&["stress", "--help"])), 0);
    assert_eq!(code(&harness(&[])), 3);
    assert_eq!(code(&harness(&["fly"])), 3);
    assert_eq!(code(&harness(&["stress", "--keys", "9:3"])), 3);
    assert_eq!(code(&harness(&["stress", "--mix", "1:2:3"])), 3);
    assert_eq!(code(&harness(&["stress", "--mix", "50:50:50:0"])), 3);
    assert_eq!(code(&harness(&["stress", "--threads", "0"])), 3);
    assert_eq!(code(&harness(&["stepper", "--threads", "4", "--ops", "1"])), 3);
    assert_eq!(code(&harness(&["lincheck", "--history", "/nonexistent/h.jsonl"])), 3);
}

#[test]
fn stress_history_feeds_lincheck() {
    let dir = tempfile::tempdir().unwrap();
    let hist = dir.path().join("h.jsonl");
    let hist = hist.to_str().unwrap();
    let o = harness(&[
        "stress", "--threads", "3", "--ops", "30", "--keys", "0:8", "--seed", "4", "--check",
        "--out", hist,
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary = stdout_json(&o);
    assert_eq!(summary["passed"], true);
    assert_eq!(summary["verdict"]["verdict"], "linearizable");
    assert_eq!(fs::read_to_string(hist).unwrap().lines().count(), 180);

    let o = harness(&["lincheck", "--history", hist]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout_json(&o)["verdict"], "linearizable");

    let o = harness(&["lincheck", "--history", hist, "--max-nodes", "1"]);
    assert_eq!(code(&o), 2);
    assert_eq!(stdout_json(&o)["verdict"], "inconclusive");
}

#[test]
fn lincheck_rejects_impossible_history() {
    let dir = tempfile::tempdir().unwrap();
    let hist = dir.path().join("bad.jsonl");
    fs::write(
        &hist,
        concat!(
            r#"{"kind":"invoke","thread":2,"op":"contains","args":[1],"index":0}"#,
            "\n",
            r#"{"kind":"respond","thread":2,"op":"contains","args":[1],"result":true,"index":1}"#,
            "\n",
            r#"{"kind":"invoke","thread":1,"op":"add","args":[1],"index":2}"#,
            "\n",
            r#"{"kind":"respond","thread":1,"op":"add","args":[1],"result":true,"index":3}"#,
            "\n",
        ),
    )
    .unwrap();
    let h = hist.to_str().unwrap();
    let o = harness(&["lincheck", "--history", h]);
    assert_eq!(code(&o), 1);
    let v = stdout_json(&o);
    assert_eq!(v["verdict"], "not_linearizable");
    assert_eq!(v["prefix"].as_array().unwrap().len(), 2);
    // with 1 already present the same history is fine
    assert_eq!(code(&harness(&["lincheck", "--history", h, "--initial", "1,5"])), 1);
    let o = harness(&["lincheck", "--history", h, "--initial", "7"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn stepper_schedule_replays_identically() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first.json");
    let second = dir.path().join("second.json");
    let o = harness(&[
        "stepper", "--threads", "3", "--ops", "3", "--keys", "0:4", "--seed", "11",
        "--schedules", "10", "--out", first.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let a = stdout_json(&o);
    let o = harness(&[
        "stepper", "--schedule", first.to_str().unwrap(), "--out", second.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let b = stdout_json(&o);
    assert_eq!(a["final_hash"], b["final_hash"]);
    assert_eq!(a["steps"], b["steps"]);
    assert_eq!(fs::read(&first).unwrap(), fs::read(&second).unwrap());
}

#[test]
fn stepper_rejects_tampered_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.json");
    let o = harness(&[
        "stepper", "--threads", "2", "--ops", "2", "--keys", "0:3", "--out", path.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    let mut sched: Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
    let steps = sched["steps"].as_array_mut().unwrap();
    let n = steps.len();
    steps.truncate(n / 2);
    fs::write(&path, serde_json::to_vec(&sched).unwrap()).unwrap();
    let o = harness(&["stepper", "--schedule", path.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert_eq!(stdout_json(&o)["stop"]["reason"], "schedule_exhausted");
}

#[test]
fn stepper_exhaustive_small_script() {
    let o = harness(&[
        "stepper", "--threads", "2", "--ops", "1", "--keys", "0:2", "--mix", "0:100:0:0",
        "--exhaustive",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert_eq!(stdout_json(&o)["exhausted"], true);
}

#[test]
fn bench_report_has_schema() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bench.json");
    let o = harness(&[
        "bench", "--threads", "2", "--ops", "2000", "--keys", "0:256", "--disjoint", "--out",
        path.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
    assert_eq!(report["schema"], "versiontree-bench/1");
    let runs = report["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 2);
    assert!(runs.iter().all(|r| r["ops_per_sec"].as_f64().unwrap() > 0.0));
}
