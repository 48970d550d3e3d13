use std::path::Path;
use std::process::{Command, Output};

fn crossview(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crossview"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = crossview(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_with_zero_count_writes_an_empty_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("empty.jsonl");
    ok(&["gen-data", "--out", s(&out), "--count", "0"]);
    assert_eq!(std::fs::read(&out).unwrap().len(), 0);
}

#[test]
fn zero_epochs_still_writes_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    let run = dir.path().join("run");
    ok(&["gen-data", "--out", s(&data), "--count", "4"]);
    ok(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&run),
        "--epochs",
        "0",
        "--embedding-size",
        "8",
        "--hidden-size",
        "8",
    ]);
    for f in ["last.ckpt", "best.ckpt", "history.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
}

#[test]
fn full_pipeline_produces_reports_and_plots() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    let run = dir.path().join("run");
    let report = dir.path().join("report.json");
    let preds = dir.path().join("preds.jsonl");
    let plots = dir.path().join("plots");
    ok(&["gen-data", "--out", s(&data), "--count", "6", "--seed", "3"]);
    ok(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&run),
        "--epochs",
        "1",
        "--batch-size",
        "2",
        "--embedding-size",
        "8",
        "--hidden-size",
        "8",
    ]);
    let ckpt = run.join("best.ckpt");
    ok(&[
        "eval",
        "--data",
        s(&data),
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&report),
    ]);
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(json["n"], 6);
    ok(&[
        "predict",
        "--data",
        s(&data),
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&preds),
        "--limit",
        "3",
    ]);
    assert_eq!(std::fs::read_to_string(&preds).unwrap().lines().count(), 3);
    ok(&["plot", "--predictions", s(&preds), "--out", s(&plots)]);
    let pngs = std::fs::read_dir(&plots)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count();
    assert_eq!(pngs, 6);
}

#[test]
fn unknown_flag_fails_with_one_line() {
    let out = crossview(&["gen-data", "--bogus"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
}

#[test]
fn missing_data_file_is_a_clean_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = crossview(&[
        "train",
        "--data",
        s(&dir.path().join("nope.jsonl")),
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}
