use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn evdet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evdet"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write_json(path: &Path, v: &Value) {
    std::fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
}

#[test]
fn config_init_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let first = ok(evdet(&["config", "init", "--out", "a.json"], dir.path()));
    assert!(first.stdout.is_empty());
    ok(evdet(
        &["--config", "a.json", "config", "init", "--out", "b.json"],
        dir.path(),
    ));
    let a = std::fs::read_to_string(dir.path().join("a.json")).unwrap();
    let b = std::fs::read_to_string(dir.path().join("b.json")).unwrap();
    assert_eq!(a, b);
    let v: Value = serde_json::from_str(&a).unwrap();
    assert_eq!(v["network"]["window_samples"], 2560);
    assert_eq!(v["train"]["batch_size"], 32);
}

#[test]
fn indivisible_window_is_an_invalid_config() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg: Value =
        serde_json::from_slice(&ok(evdet(&["config", "init"], dir.path())).stdout).unwrap();
    cfg["network"]["window_samples"] = json!(2500);
    write_json(&dir.path().join("bad.json"), &cfg);
    let out = evdet(&["--config", "bad.json", "generate"], dir.path());
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("InvalidConfig: "), "{err}");
}

#[test]
fn missing_file_reports_io() {
    let dir = tempfile::tempdir().unwrap();
    let out = evdet(&["--config", "nope.json", "generate"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("Io: "));
}

#[test]
fn empty_detections_score_zero() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("det.jsonl"), "").unwrap();
    std::fs::write(
        dir.path().join("ann.jsonl"),
        "{\"record_id\":\"a\",\"start\":1.0,\"duration\":1.0,\"label\":1}\n\
         {\"record_id\":\"a\",\"start\":5.0,\"duration\":0.8,\"label\":2}\n",
    )
    .unwrap();
    ok(evdet(
        &[
            "evaluate",
            "--detections",
            "det.jsonl",
            "--annotations",
            "ann.jsonl",
            "--out",
            "eval",
        ],
        dir.path(),
    ));
    let summary: Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("eval/summary.json")).unwrap(),
    )
    .unwrap();
    let rows = summary["summary"].as_array().unwrap();
    assert_eq!(rows.len(), 2 * 9);
    assert!(rows.iter().all(|r| r["f1"] == json!(0.0)));
    let csv = std::fs::read_to_string(dir.path().join("eval/metrics.csv")).unwrap();
    assert!(csv.starts_with("record_id,label,delta,precision,recall,f1,tp,fp,fn\n"));
    assert!(dir.path().join("eval/f1_vs_delta.csv").exists());
}

#[test]
fn consensus_of_three_scorers() {
    let dir = tempfile::tempdir().unwrap();
    let line = |s: f64, d: f64| {
        format!("{{\"record_id\":\"r\",\"start\":{s},\"duration\":{d},\"label\":1}}\n")
    };
    std::fs::write(dir.path().join("s1.jsonl"), line(1.0, 2.0)).unwrap();
    std::fs::write(dir.path().join("s2.jsonl"), line(2.0, 2.0)).unwrap();
    std::fs::write(dir.path().join("s3.jsonl"), line(8.0, 1.0)).unwrap();
    ok(evdet(
        &[
            "consensus",
            "--kappa",
            "0.6",
            "--resolution",
            "0.5",
            "--duration",
            "10",
            "--out",
            "c.jsonl",
            "s1.jsonl",
            "s2.jsonl",
            "s3.jsonl",
        ],
        dir.path(),
    ));
    let text = std::fs::read_to_string(dir.path().join("c.jsonl")).unwrap();
    let lines: Vec<Value> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 1);
    assert_eq!(lines[0]["start"], json!(2.0));
    assert_eq!(lines[0]["duration"], json!(1.0));
}

#[test]
fn generate_train_calibrate_detect_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let mut cfg: Value = serde_json::from_slice(&ok(evdet(&["config", "init"], p)).stdout).unwrap();
    // shrink the run so the pipeline finishes quickly
    cfg["n_records"] = json!(3);
    cfg["synth"]["record_seconds"] = json!(120.0);
    cfg["train"]["max_epochs"] = json!(2);
    cfg["train"]["steps_per_epoch"] = json!(2);
    cfg["train"]["batch_size"] = json!(8);
    write_json(&p.join("cfg.json"), &cfg);
    let run = |args: &[&str]| {
        let mut all = vec!["--config", "cfg.json", "--seed", "5", "--threads", "1"];
        all.extend_from_slice(args);
        ok(evdet(&all, p))
    };
    run(&["generate", "--out", "data"]);
    assert!(p.join("data/split.json").exists());
    assert_eq!(
        std::fs::read_dir(p.join("data/records")).unwrap().count(),
        3
    );

    run(&["train", "--data", "data", "--out", "run"]);
    let log = std::fs::read_to_string(p.join("run/train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(p.join("run/model.dsm").exists());

    run(&[
        "calibrate",
        "--checkpoint",
        "run/model.dsm",
        "--data",
        "data",
        "--out",
        "theta.json",
    ]);
    let theta: Value =
        serde_json::from_str(&std::fs::read_to_string(p.join("theta.json")).unwrap()).unwrap();
    assert!(theta["theta"]["1"].is_number() && theta["theta"]["2"].is_number());

    let split: Value =
        serde_json::from_str(&std::fs::read_to_string(p.join("data/split.json")).unwrap()).unwrap();
    let test_id = split["test"][0].as_str().unwrap().to_string();
    let record = format!("data/records/{test_id}.dsr");
    run(&[
        "detect",
        "--checkpoint",
        "run/model.dsm",
        "--thresholds",
        "theta.json",
        "--out",
        "det.jsonl",
        &record,
    ]);
    let det = std::fs::read_to_string(p.join("det.jsonl")).unwrap();
    for l in det.lines() {
        let v: Value = serde_json::from_str(l).unwrap();
        assert_eq!(v["record_id"], json!(test_id));
        assert!(v["start"].as_f64().unwrap() >= 0.0);
        assert!(v["start"].as_f64().unwrap() + v["duration"].as_f64().unwrap() <= 120.0 + 1e-9);
    }

    run(&[
        "evaluate",
        "--detections",
        "det.jsonl",
        "--annotations",
        "data/annotations.jsonl",
        "--records",
        &test_id,
        "--out",
        "eval",
    ]);
    let summary: Value =
        serde_json::from_str(&std::fs::read_to_string(p.join("eval/summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["records"], json!(1));

    // deterministic given config and seed
    run(&[
        "detect",
        "--checkpoint",
        "run/model.dsm",
        "--thresholds",
        "theta.json",
        "--out",
        "det2.jsonl",
        &record,
    ]);
    assert_eq!(det, std::fs::read_to_string(p.join("det2.jsonl")).unwrap());
}
