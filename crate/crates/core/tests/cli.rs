use std::path::Path;
use std::process::{Command, Output};

use dualmatch::data::{make_blobs, save_dataset, split_ssl, Dataset};
use serde_json::Value;

fn dualmatch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualmatch"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn stderr_json(out: &Output) -> Value {
    assert!(!out.status.success());
    serde_json::from_slice(&out.stderr).unwrap()
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("quick.toml");
    std::fs::write(&path, "steps = 4\neval_every = 2\nbatch_size = 8\nmu = 2\n").unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn train_on_synthetic_data_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out_dir = dir.path().join("run");
    let out = dualmatch(&[
        "train",
        "--config",
        &cfg,
        "--seed",
        "3",
        "--synthetic",
        "blobs:classes=4,dim=3,spread=0.3",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    let summary = stdout_json(&out);
    assert_eq!(summary["seed"], 3);
    assert!(summary["test_error_ema"].as_f64().is_some());
    for f in ["history.csv", "model.ckpt", "ema.ckpt", "config.toml", "summary.json"] {
        assert!(out_dir.join(f).exists(), "missing {f}");
    }
    let history = std::fs::read_to_string(out_dir.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 5);
    let resolved = std::fs::read_to_string(out_dir.join("config.toml")).unwrap();
    assert!(resolved.contains("classes = 4"));
}

#[test]
fn train_and_eval_from_dataset_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let ds = make_blobs(3, 2, 20, 0.4, 1).unwrap();
    let split = split_ssl(&ds, 3, 1).unwrap();
    let mut examples = split.labeled.clone();
    examples.extend(split.unlabeled.iter().cloned());
    let train_path = dir.path().join("train.txt");
    save_dataset(&Dataset::new(3, 2, examples).unwrap(), &train_path).unwrap();
    let test_path = dir.path().join("test.txt");
    save_dataset(&make_blobs(3, 2, 10, 0.4, 2).unwrap(), &test_path).unwrap();
    let ckpt = dir.path().join("custom.ckpt");

    let out = dualmatch(&[
        "train",
        "--config",
        &cfg,
        "--dataset",
        train_path.to_str().unwrap(),
        "--test",
        test_path.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    let summary = stdout_json(&out);
    let trained = summary["test_error_ema"].as_f64().unwrap();
    // labels are not persisted for the unlabeled rows, so there is no
    // pseudo-label error to report
    let history = std::fs::read_to_string(dir.path().join("run/history.csv")).unwrap();
    let row: Vec<&str> = history.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[7], "");

    let eval = stdout_json(&dualmatch(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--dataset",
        test_path.to_str().unwrap(),
    ]));
    assert_eq!(eval["test_error"].as_f64().unwrap(), trained);
}

#[test]
fn suite_writes_report_and_curves() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out_dir = dir.path().join("suite");
    let summary = stdout_json(&dualmatch(&[
        "suite",
        "--config",
        &cfg,
        "--seeds",
        "1,2",
        "--out",
        out_dir.to_str().unwrap(),
    ]));
    assert!(summary["std"].as_f64().is_some());
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["runs"].as_array().unwrap().len(), 2);
    assert_eq!(report["fingerprint"], summary["fingerprint"]);
    for f in ["curves.csv", "history_seed1.csv", "history_seed2.csv"] {
        assert!(out_dir.join(f).exists(), "missing {f}");
    }
}

#[test]
fn errors_are_reported_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "stepz = 3\n").unwrap();
    let err = stderr_json(&dualmatch(&[
        "train",
        "--config",
        bad.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]));
    assert_eq!(err["error"], "config");

    let garbage = dir.path().join("garbage.txt");
    std::fs::write(&garbage, "2 2 1\n0 1.0 oops\n").unwrap();
    let err = stderr_json(&dualmatch(&[
        "train",
        "--dataset",
        garbage.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]));
    assert_eq!(err["error"], "parse");

    let err = stderr_json(&dualmatch(&[
        "eval",
        "--checkpoint",
        dir.path().join("missing.ckpt").to_str().unwrap(),
        "--dataset",
        garbage.to_str().unwrap(),
    ]));
    assert_eq!(err["error"], "io");
}

#[test]
fn unknown_synthetic_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let err = stderr_json(&dualmatch(&[
        "train",
        "--synthetic",
        "blobs:colour=3",
        "--out",
        dir.path().to_str().unwrap(),
    ]));
    assert_eq!(err["error"], "config");
}
