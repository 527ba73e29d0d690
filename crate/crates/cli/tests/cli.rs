use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use multiattn::train::{FINAL_CHECKPOINT, LOSS_LOG};
use multiattn::Checkpoint;

fn multiattn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_multiattn")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = multiattn(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().display().to_string(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

/// `key=value` lines of a report.
fn key_values(report: &str) -> BTreeMap<String, String> {
    report
        .lines()
        .filter_map(|l| l.split_once('='))
        .filter(|(k, _)| !k.contains(' '))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

#[test]
fn generate_data_splits_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let msg = ok(&["generate-data", "--out", p(&a), "--seed", "42", "--n", "64", "--profile", "tiny"]);
    assert!(msg.contains("train=38 val=13 test=13"), "{msg}");
    ok(&["generate-data", "--out", p(&b), "--seed", "42", "--n", "64", "--profile", "tiny"]);
    let ta = tree(&a);
    assert_eq!(ta.len(), 65);
    assert_eq!(ta, tree(&b));
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    assert_eq!(multiattn(&["generate-data", "--out", p(&d), "--n", "0"]).status.code(), Some(2));
    assert_eq!(multiattn(&["generate-data", "--out", p(&d), "--n", "4", "--profile", "huge"]).status.code(), Some(2));
    assert_eq!(multiattn(&["bogus"]).status.code(), Some(2));

    let missing = dir.path().join("missing");
    let out = multiattn(&["train", "--data", p(&missing), "--out", p(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));

    // Unwritable output: a regular file stands where a directory is needed.
    let file = dir.path().join("file");
    fs::write(&file, b"x").unwrap();
    let out = multiattn(&["generate-data", "--out", p(&file.join("d")), "--n", "2"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn train_writes_loss_log_checkpoint_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run) = (dir.path().join("d"), dir.path().join("run"));
    ok(&["generate-data", "--out", p(&data), "--n", "6", "--split", "4,1,1"]);
    let report = ok(&["train", "--data", p(&data), "--out", p(&run), "--epochs", "30", "--batch-size", "4"]);

    let log = fs::read_to_string(run.join(LOSS_LOG)).unwrap();
    assert_eq!(log.lines().count(), 30);
    let ck = Checkpoint::load(&run.join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(ck.epoch, 30);
    assert_eq!(ck.config.train.learning_rate, 1e-3);
    assert_eq!(ck.config.train.epochs, 30);

    let kv = key_values(&report);
    assert_eq!(kv["n_samples"], "1");
    assert!(report.contains("# run config") && report.contains("learning_rate = 0.001"), "{report}");
    assert_eq!(fs::read_to_string(run.join("val_report.txt")).unwrap(), report);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run) = (dir.path().join("d"), dir.path().join("run"));
    ok(&["generate-data", "--out", p(&data), "--n", "3", "--split", "1,0,0"]);
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "[train]\nepochs = 2\nlearning_rate = 0.005\nbatch_size = 2\n").unwrap();
    ok(&["train", "--data", p(&data), "--config", p(&cfg), "--out", p(&run), "--lr", "0.002"]);
    let ck = Checkpoint::load(&run.join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!((ck.config.train.epochs, ck.config.train.learning_rate, ck.config.train.batch_size), (2, 0.002, 2));

    fs::write(&cfg, "[model]\nclasses = 3\n").unwrap();
    let out = multiattn(&["train", "--data", p(&data), "--config", p(&cfg), "--out", p(&run)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.classes"));

    fs::write(&cfg, "[train]\nepoch = 2\n").unwrap();
    let out = multiattn(&["train", "--data", p(&data), "--config", p(&cfg), "--out", p(&run)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn overfit_then_evaluate_predict_and_dump() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run) = (dir.path().join("d"), dir.path().join("run"));
    ok(&["generate-data", "--out", p(&data), "--n", "1", "--split", "1,0,0", "--seed", "42"]);
    ok(&["train", "--data", p(&data), "--out", p(&run), "--epochs", "200", "--batch-size", "1"]);
    let ck = run.join(FINAL_CHECKPOINT);

    let report = ok(&["evaluate", "--data", p(&data), "--checkpoint", p(&ck), "--split", "train"]);
    let kv = key_values(&report);
    assert_eq!((kv["recall"].as_str(), kv["f1"].as_str(), kv["f2"].as_str()), ("1", "1", "1"), "{report}");
    assert!(report.contains("[model]"));

    let manifest = fs::read_to_string(data.join("manifest.toml")).unwrap();
    let pred = ok(&["predict", "--data", p(&data), "--checkpoint", p(&ck), "--split", "train"]);
    let line = pred.lines().find(|l| !l.starts_with('#')).unwrap();
    let (id, labels) = line.split_once('\t').unwrap();
    assert_eq!(id, "s00000");
    assert!(labels.split(',').all(|c| manifest.contains(&format!("\"{c}\""))), "{labels}");
    assert_ne!(labels, "<none>");

    let dump = ok(&["attn-dump", "--data", p(&data), "--checkpoint", p(&ck), "--split", "train"]);
    let rows: Vec<Vec<f64>> = dump
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("sample"))
        .map(|l| l.split('\t').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 4);
    for row in rows {
        assert_eq!(row.len(), 16);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
    }
}

#[test]
fn high_threshold_predicts_empty_sets_and_mismatch_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run) = (dir.path().join("d"), dir.path().join("run"));
    ok(&["generate-data", "--out", p(&data), "--n", "4", "--split", "2,0,2"]);
    ok(&["train", "--data", p(&data), "--out", p(&run), "--epochs", "1"]);
    let ck = run.join(FINAL_CHECKPOINT);

    let pred = ok(&["predict", "--data", p(&data), "--checkpoint", p(&ck), "--threshold", "0.99"]);
    let lines: Vec<&str> = pred.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(lines.len(), 2);
    assert!(lines.iter().all(|l| l.ends_with("\t<none>")), "{pred}");
    assert!(pred.contains("# threshold = 0.99"));

    let other = dir.path().join("other");
    ok(&["generate-data", "--out", p(&other), "--n", "2", "--classes", "5"]);
    for cmd in ["evaluate", "predict", "attn-dump"] {
        let out = multiattn(&[cmd, "--data", p(&other), "--checkpoint", p(&ck)]);
        assert_eq!(out.status.code(), Some(2), "{cmd}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("model.classes"));
    }
    let out = multiattn(&["evaluate", "--data", p(&data), "--checkpoint", p(&dir.path().join("none.mac"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_with_exit_zero() {
    let out = ok(&["gradcheck", "--seed", "7"]);
    assert!(out.contains("result=pass"), "{out}");
}
