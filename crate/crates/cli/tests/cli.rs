use std::path::Path;
use std::process::{Command, Output};

fn ciac(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ciac"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn error_json(out: &Output) -> serde_json::Value {
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(err.lines().last().unwrap()).unwrap()
}

#[test]
fn dataset_train_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&ciac(&["gen-data", "--out", "a", "--recordings", "2", "--throws", "1", "--seed", "4"], d));
    ok(&ciac(&["gen-data", "--out", "b", "--recordings", "2", "--throws", "1", "--seed", "4"], d));
    for f in ["recording_00.csv", "recording_01.csv"] {
        assert_eq!(std::fs::read(d.join("a").join(f)).unwrap(), std::fs::read(d.join("b").join(f)).unwrap());
    }
    let cfg = std::fs::read_to_string(d.join("a/config.toml")).unwrap();
    assert!(cfg.contains("recordings = 2"));
    let seeds: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("a/seeds.json")).unwrap()).unwrap();
    assert_eq!(seeds["seed"], 4);
    assert_eq!(seeds["recordings"].as_array().unwrap().len(), 2);

    ok(&ciac(
        &["train", "--data", "a", "--out", "m", "--folds", "2", "--epochs", "1", "--stride", "30", "--set", "train.model.d_model=16"],
        d,
    ));
    assert!(d.join("m/model.json").exists());
    let kfold: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("m/kfold.json")).unwrap()).unwrap();
    assert_eq!(kfold["folds"].as_array().unwrap().len(), 2);

    let text = ok(&ciac(&["eval", "--model", "m/model.json", "--data", "a", "--stride", "10", "--out", "e"], d));
    assert!(text.starts_with("accuracy"));
    let ev: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("e/eval.json")).unwrap()).unwrap();
    assert!(ev["accuracy"].as_f64().unwrap() >= 0.0);

    ok(&ciac(&["suture", "--out", "s", "--seeds", "1", "--throws", "1", "--model", "m/model.json"], d));
    ok(&ciac(&["replay", "s/logs/seed0000_ciac.ndjson"], d));
}

#[test]
fn reach_reports_and_replays() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let text = ok(&ciac(&["reach", "--out", "r", "--seeds", "3", "--format", "json"], d));
    let report: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(report["runs"].as_array().unwrap().len(), 6);
    assert_eq!(report["comparisons"][0]["metric"], "total_time");
    for ext in ["txt", "json", "csv"] {
        assert!(d.join(format!("r/reach.{ext}")).exists());
    }
    let replayed = ok(&ciac(&["replay", "r/logs/seed0001_traditional.ndjson", "--out", "again"], d));
    let v: serde_json::Value = serde_json::from_str(&replayed).unwrap();
    assert_eq!(v["resimulated"], true);
    assert_eq!(
        std::fs::read(d.join("r/logs/seed0001_traditional.ndjson")).unwrap(),
        std::fs::read(d.join("again/replay.ndjson")).unwrap()
    );

    let log = std::fs::read_to_string(d.join("r/logs/seed0002_ciac.ndjson")).unwrap();
    let mut lines: Vec<String> = log.lines().map(String::from).collect();
    let mut rec: serde_json::Value = serde_json::from_str(&lines[20]).unwrap();
    rec["lambda"] = serde_json::json!(0.123);
    lines[20] = rec.to_string();
    std::fs::write(d.join("bad.ndjson"), lines.join("\n") + "\n").unwrap();
    let err = error_json(&ciac(&["replay", "bad.ndjson"], d));
    assert!(err["error"]["message"].as_str().unwrap().contains("differs"));
}

#[test]
fn failures_emit_error_json() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let e = error_json(&ciac(&["gen-data", "--out", "x", "--set", "dataset.throws=lots"], d));
    assert_eq!(e["error"]["kind"], "config");
    let e = error_json(&ciac(&["gen-data", "--out", "x", "--throws", "0"], d));
    assert_eq!(e["error"]["kind"], "core");
    let e = error_json(&ciac(&["replay", "missing.ndjson"], d));
    assert_eq!(e["error"]["kind"], "io");
    let e = error_json(&ciac(&["serve", "--addr", "nowhere"], d));
    assert_eq!(e["error"]["kind"], "usage");
    std::fs::write(d.join("c.toml"), "[reach]\nseeds = [0, 1]\n").unwrap();
    let text = ok(&ciac(&["reach", "--config", "c.toml", "--out", "r", "--format", "csv"], d));
    assert_eq!(text.lines().count(), 5);
}
