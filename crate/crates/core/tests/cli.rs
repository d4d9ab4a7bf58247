use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_support-policy")).args(args).output().unwrap()
}

fn synth(dir: &Path) {
    let out = bin(&["synth", "--out", dir.to_str().unwrap(), "--seed", "7", "--count", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn count_lines(dir: &Path) -> usize {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| fs::read_to_string(e.unwrap().path()).unwrap().lines().count())
        .sum()
}

#[test]
fn run_writes_outputs_and_report_reads_them() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    let cfg = tmp.path().join("config.json");
    let out_dir = tmp.path().join("out");
    let out = bin(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--seeds",
        "0..1",
        "--horizon",
        "40",
        "--policy",
        "thread-knn",
        "--policy",
        "fixed:model",
        "--policy",
        "oracle",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("thread-knn") && table.contains("fixed:model"));

    for f in ["metrics.csv", "run.json", "summary.txt", "summary.json"] {
        assert!(out_dir.join(f).is_file(), "missing {f}");
    }
    let metrics = fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    let header = metrics.lines().next().unwrap();
    assert!(header.starts_with("task,policy_kind,estimator,lambda,seed,profile_class,T,excess_loss"));
    // 3 policies × 3 profiles × 2 seeds.
    assert_eq!(metrics.lines().count() - 1, 18);
    assert_eq!(count_lines(&out_dir.join("logs")), 40 * 18);

    let report = bin(&["report", "--in", out_dir.to_str().unwrap()]);
    assert!(report.status.success());
    assert_eq!(String::from_utf8(report.stdout).unwrap(), table);
}

#[test]
fn heldout_protocol_runs() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    let cfg = tmp.path().join("config.json");
    let out_dir = tmp.path().join("held");
    let out = bin(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--seeds",
        "3",
        "--eval",
        "heldout",
        "--heldout-size",
        "50",
        "--policy",
        "thread-linucb",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert!(summary["protocol"].as_str().unwrap().starts_with("held-out set of 50 items"));
}

#[test]
fn sweep_writes_every_strategy() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    let cfg = tmp.path().join("config.json");
    let out_dir = tmp.path().join("sweep");
    let out = bin(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--strategy",
        "B",
        "--epsilon",
        "0.1",
        "--grid-step",
        "0.25",
        "--sweep-seeds",
        "0",
        "--horizon",
        "40",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8(out.stdout).unwrap().starts_with("strategy B selects"));
    let v: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("sweep.json")).unwrap()).unwrap();
    assert_eq!(v["sweep"]["grid"].as_array().unwrap().len(), 5);
    assert_eq!(v["sweep"]["cells"].as_array().unwrap().len(), 15);
    assert_eq!(v["sweep"]["epsilon"], 0.1);
    let strategies: Vec<&str> = v["selections"].as_array().unwrap().iter().map(|s| s["strategy"].as_str().unwrap()).collect();
    assert_eq!(strategies, ["MostLikely", "MostLikelyLowestCost", "Conservative"]);
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    let cfg = tmp.path().join("config.json");
    let cfg = cfg.to_str().unwrap();
    let out = tmp.path().join("o");
    let out = out.to_str().unwrap();

    assert_eq!(bin(&["run", "--config", "/nonexistent.json", "--out", out]).status.code(), Some(2));
    assert_eq!(bin(&["run", "--config", cfg, "--lambda", "1.5", "--out", out]).status.code(), Some(2));
    assert_eq!(bin(&["run", "--config", cfg, "--policy", "mystery", "--out", out]).status.code(), Some(2));
    assert_eq!(bin(&["run", "--config", cfg, "--seeds", "4..1"]).status.code(), Some(2));
    assert_eq!(bin(&["sweep", "--config", cfg, "--strategy", "Z"]).status.code(), Some(2));

    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"dataset": "dataset.json", "unknown_field": 1}"#).unwrap();
    assert_eq!(bin(&["run", "--config", bad.to_str().unwrap()]).status.code(), Some(2));

    let broken = tmp.path().join("broken.json");
    fs::write(tmp.path().join("ds.json"), "{not json").unwrap();
    fs::write(&broken, r#"{"dataset": "ds.json", "out": "x"}"#).unwrap();
    assert_eq!(bin(&["run", "--config", broken.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn report_on_empty_directory_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(bin(&["report", "--in", tmp.path().to_str().unwrap()]).status.code(), Some(3));
}
