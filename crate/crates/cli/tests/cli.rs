use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const CONFIG: &str = r#"
seeds = [0, 1, 2]

[paths]
scenario = "scenario"
checkpoints = "ckpt"
reports = "reports"

[train]
epochs = 1
k = 4
n = 2
"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcpersona"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
    dir
}

#[test]
fn build_dataset_is_deterministic() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["build-dataset", "--out", "a", "--images", "2", "--seed", "4"]);
    ok(d, &["build-dataset", "--out", "b", "--images", "2", "--seed", "4"]);
    let meta = |p: &str| fs::read(d.join(p).join("meta.json")).unwrap();
    assert_eq!(meta("a"), meta("b"));
    assert_eq!(fs::read(d.join("a/qa/train.json")).unwrap(), fs::read(d.join("b/qa/train.json")).unwrap());
    assert_eq!(fs::read(d.join("a/concepts/c2/train/001.png")).unwrap(), fs::read(d.join("b/concepts/c2/train/001.png")).unwrap());
    let suite = json(&d.join("a/qa/suite.json"));
    // m = 2: 5m^2 + 5(m+1) + 100 recognition items
    assert_eq!(suite["recognition"].as_array().unwrap().len(), 135);
}

#[test]
fn usage_and_validation_errors_have_distinct_codes() {
    let dir = workspace();
    let d = dir.path();
    assert_eq!(run(d, &["build-dataset", "--concepts", "5"]).status.code(), Some(1));
    assert_eq!(run(d, &["build-dataset", "--concepts", "0"]).status.code(), Some(1));
    assert_eq!(run(d, &["no-such-command"]).status.code(), Some(1));
    assert_eq!(run(d, &["--help"]).status.code(), Some(0));
    fs::write(d.join("bad.toml"), "[train]\nepochs = 0\n").unwrap();
    assert_eq!(run(d, &["--config", "bad.toml", "train"]).status.code(), Some(2));
    fs::write(d.join("typo.toml"), "[train]\nepoch = 3\n").unwrap();
    assert_eq!(run(d, &["--config", "typo.toml", "train"]).status.code(), Some(2));
    assert_eq!(run(d, &["--tau", "2.0", "train"]).status.code(), Some(2));
    // nothing to train on yet
    let out = run(d, &["--config", "run.toml", "train"]);
    assert!(!out.status.success());
    assert!(!d.join("ckpt").exists() || fs::read_dir(d.join("ckpt")).unwrap().next().is_none());
}

#[test]
fn full_pipeline() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["--config", "run.toml", "build-dataset", "--images", "2"]);

    // evaluation without checkpoints fails cleanly
    assert!(!run(d, &["--config", "run.toml", "evaluate"]).status.success());

    ok(d, &["--config", "run.toml", "train"]);
    for s in 0..3 {
        assert!(d.join(format!("ckpt/seed-{s}.json")).exists());
        assert!(d.join(format!("ckpt/seed-{s}.bin")).exists());
    }
    let manifest = json(&d.join("ckpt/seed-0.json"));
    assert_eq!(manifest["config"]["init"], "kmeans");

    // the init flag reaches the trainer
    ok(d, &["--config", "run.toml", "--init", "random", "--seed", "9", "train"]);
    assert_eq!(json(&d.join("ckpt/seed-9.json"))["config"]["init"], "random");
    fs::remove_file(d.join("ckpt/seed-9.json")).unwrap();
    fs::remove_file(d.join("ckpt/seed-9.bin")).unwrap();

    ok(d, &["--config", "run.toml", "evaluate"]);
    let suite = json(&d.join("scenario/qa/suite.json"));
    let items: usize = ["recognition", "grounding", "choice", "vqa", "caption"]
        .iter()
        .map(|k| suite[k].as_array().unwrap().len())
        .sum();
    let mut overall = Vec::new();
    for s in 0..3 {
        let report = json(&d.join(format!("reports/seed-{s}.json")));
        overall.push(report["recognition_overall"].as_f64().unwrap());
        let audit = fs::read_to_string(d.join(format!("reports/seed-{s}.audit.jsonl"))).unwrap();
        assert_eq!(audit.lines().count(), items);
        for line in audit.lines() {
            let v: Value = serde_json::from_str(line).unwrap();
            assert!(v["verdict"].is_string() && v["query"].is_string());
        }
    }
    let summary = json(&d.join("reports/summary.json"));
    let mean = overall.iter().sum::<f64>() / 3.0;
    assert!((summary["recognition_overall"].as_f64().unwrap() - mean).abs() < 1e-12);
    assert_eq!(summary["seeds"], serde_json::json!([0, 1, 2]));

    // grounding a two-concept image marks both concepts
    ok(d, &["--config", "run.toml", "ground", "--image", "scenario/test/multi/000.png", "--out", "g2"]);
    let det = json(&d.join("g2/detections.json"));
    let present: Vec<bool> = det["detections"].as_array().unwrap().iter().map(|x| x["present"].as_bool().unwrap()).collect();
    assert_eq!(present, vec![true, true]);
    let prompt = fs::read_to_string(d.join("g2/prompt.txt")).unwrap();
    assert!(prompt.contains("<sks1>") && prompt.contains("<sks2>"));
    assert!(d.join("g2/annotated.png").exists());

    // a distractor-only image gets no marks
    ok(d, &["--config", "run.toml", "ground", "--image", "scenario/test/external_multi/000.png", "--out", "g0"]);
    let det = json(&d.join("g0/detections.json"));
    assert!(det["detections"].as_array().unwrap().iter().all(|x| x["present"] == false));
    assert_eq!(fs::read_to_string(d.join("g0/prompt.txt")).unwrap().trim(), "");
    let original = fs::read(d.join("scenario/test/external_multi/000.png")).unwrap();
    let annotated = fs::read(d.join("g0/annotated.png")).unwrap();
    assert_eq!(original, annotated, "unmarked image must be unchanged");

    // a missing image fails without writing anything
    let out = run(d, &["--config", "run.toml", "ground", "--image", "nope.png", "--out", "gx"]);
    assert!(!out.status.success());
    assert!(!d.join("gx").exists() || fs::read_dir(d.join("gx")).unwrap().next().is_none());

    // a missing checkpoint fails
    fs::remove_file(d.join("ckpt/seed-0.bin")).unwrap();
    let out = run(d, &["--config", "run.toml", "ground", "--image", "scenario/test/multi/000.png", "--out", "gy"]);
    assert!(!out.status.success());
    assert!(!d.join("gy").exists() || fs::read_dir(d.join("gy")).unwrap().next().is_none());

    // a missing suite fails evaluation
    fs::remove_file(d.join("scenario/qa/suite.json")).unwrap();
    assert!(!run(d, &["--config", "run.toml", "evaluate"]).status.success());
}
