use std::path::Path;
use std::process::{Command, Output};

use elf_cli::commands::read_dataset;

fn elf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_elf")).args(args).output().unwrap()
}

fn code(args: &[&str]) -> i32 {
    elf(args).status.code().unwrap()
}

fn path(dir: &Path, rel: &str) -> String {
    dir.join(rel).display().to_string()
}

/// Small data set and a briefly trained 3-exit model under `dir`.
fn small_run(dir: &Path) {
    let data = path(dir, "data");
    assert_eq!(
        code(&["gen-data", "--n", "200", "--ratio", "10", "--eval-per-class", "20", "--out", &data, "--no-timestamp"]),
        0
    );
    let args = [
        "train", "--data", &path(dir, "data/train.elfd"), "--out", &path(dir, "run"),
        "--epochs", "3", "--warmup", "1", "--widths", "4,8,16", "--no-timestamp",
    ];
    assert_eq!(code(&args), 0);
}

#[test]
fn gen_data_follows_the_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let out = path(dir.path(), "d");
    assert_eq!(code(&["gen-data", "--n", "500", "--ratio", "100", "--out", &out]), 0);
    let ds = read_dataset(&dir.path().join("d/train.elfd")).unwrap();
    let counts = ds.class_counts();
    assert_eq!(counts[0], 500);
    assert!((ds.imbalance_ratio() - 100.0).abs() <= 5.0, "{counts:?}");
    let eval = read_dataset(&dir.path().join("d/eval.elfd")).unwrap();
    assert!(eval.class_counts().iter().all(|&n| n == 500));

    assert_eq!(code(&["gen-data", "--n", "80", "--ratio", "1", "--out", &out]), 0);
    let ds = read_dataset(&dir.path().join("d/train.elfd")).unwrap();
    assert_eq!(ds.class_counts(), vec![80; 10]);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&["train", "--bogus"]), 1);
    let config = dir.path().join("bad.cfg");
    std::fs::write(&config, "colour = blue\n").unwrap();
    assert_eq!(code(&["gen-data", "--config", config.to_str().unwrap()]), 1);
    assert_eq!(code(&["train", "--data", &path(dir.path(), "missing.elfd")]), 3);
    std::fs::write(dir.path().join("junk.elfd"), b"not a data file").unwrap();
    assert_eq!(code(&["train", "--data", &path(dir.path(), "junk.elfd")]), 3);
    assert_eq!(code(&["--help"]), 0);

    small_run(dir.path());
    let train = path(dir.path(), "data/train.elfd");
    assert_eq!(code(&["train", "--data", &train, "--warmup", "5", "--epochs", "3"]), 1);
    let args = [
        "train", "--data", &train, "--out", &path(dir.path(), "nan"),
        "--epochs", "3", "--warmup", "1", "--widths", "4,8,16", "--lr", "1e200",
    ];
    let out = elf(&args);
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("epoch") && msg.contains("batch") && msg.contains("lr"), "{msg}");
}

#[test]
fn command_line_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("gen.cfg");
    std::fs::write(&config, "# small set\nn = 60\nratio = 1\nno-timestamp = true\n").unwrap();
    let cfg = config.to_str().unwrap();
    let out = path(dir.path(), "d");
    assert_eq!(code(&["gen-data", "--config", cfg, "--out", &out]), 0);
    let counts = read_dataset(&dir.path().join("d/train.elfd")).unwrap().class_counts();
    assert_eq!(counts, vec![60; 10]);
    assert_eq!(code(&["gen-data", "--n", "30", "--config", cfg, "--out", &out]), 0);
    let counts = read_dataset(&dir.path().join("d/train.elfd")).unwrap().class_counts();
    assert_eq!(counts, vec![30; 10]);
}

#[test]
fn help_lists_defaults() {
    let out = elf(&["train", "--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for want in ["[default: 40]", "[default: 64]", "[default: 0.1]", "[default: 16,32,64]", "[default: auto]"] {
        assert!(text.contains(want), "missing {want}");
    }
}

#[test]
fn sweep_and_eval_flops() {
    let dir = tempfile::tempdir().unwrap();
    small_run(dir.path());
    let model = path(dir.path(), "run/model.elfc");
    let eval_data = path(dir.path(), "data/eval.elfd");
    let sweep = [
        "sweep", "--model", &model, "--data", &eval_data, "--grid", "0,1",
        "--out", &path(dir.path(), "sweep"), "--no-timestamp",
    ];
    assert_eq!(code(&sweep), 0);
    let curve = std::fs::read_to_string(dir.path().join("sweep/curve.csv")).unwrap();
    let rows: Vec<Vec<&str>> = curve.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows[0], ["s", "top1", "mean_flops", "exit_1", "exit_2", "exit_3"]);
    assert_eq!(rows.len(), 3);
    let flops = |r: &[&str]| r[2].parse::<f64>().unwrap();
    assert!(flops(&rows[1]) < flops(&rows[2]));

    let eval = [
        "eval", "--model", &model, "--data", &eval_data, "--train-data", &path(dir.path(), "data/train.elfd"),
        "--infer-threshold", "1", "--out", &path(dir.path(), "eval"), "--no-timestamp",
    ];
    assert_eq!(code(&eval), 0);
    let text = std::fs::read_to_string(dir.path().join("eval/summary.json")).unwrap();
    let summary: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(summary["relative_flops"].as_f64(), Some(0.0));
    assert!(summary.get("generated").is_none());
    for file in ["splits.csv", "property1.csv", "histogram.csv", "exits.csv"] {
        let text = std::fs::read_to_string(dir.path().join("eval").join(file)).unwrap();
        assert!(!text.starts_with('#'), "{file}");
    }

    let report = ["report", &path(dir.path(), "eval/summary.json")];
    let out = elf(&report);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains('|'));
}

#[test]
fn timestamp_header_by_default() {
    let dir = tempfile::tempdir().unwrap();
    small_run(dir.path());
    let args = [
        "sweep", "--model", &path(dir.path(), "run/model.elfc"), "--data", &path(dir.path(), "data/eval.elfd"),
        "--out", &path(dir.path(), "sweep"),
    ];
    assert_eq!(code(&args), 0);
    let curve = std::fs::read_to_string(dir.path().join("sweep/curve.csv")).unwrap();
    assert!(curve.starts_with("# generated "), "{curve}");
}
