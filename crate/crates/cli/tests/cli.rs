use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn prefunify(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prefunify")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn eval_fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

fn workspace() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let mut binary = String::new();
    for i in 0..24 {
        binary.push_str(&format!(
            "{}\n",
            json!({"prompt": format!("Explain topic {} to a beginner, part {i}", i % 5), "chosen": "A clear answer.", "rejected": "A vague answer."})
        ));
    }
    let mut scored = String::new();
    for i in 0..16 {
        for r in 0..3 {
            scored.push_str(&format!(
                "{}\n",
                json!({"prompt": format!("Question {i} about cooking"), "response": format!("Answer {r}"), "scores": {"toxicity": ((i + 3 * r) % 7) as f64 / 10.0}})
            ));
        }
    }
    fs::write(dir.path().join("binary.jsonl"), binary).unwrap();
    fs::write(dir.path().join("scored.jsonl"), scored).unwrap();
    let config = json!({
        "sources": [
            {"source_id": "pairs", "supervision": "binary", "filter_policy": "passthrough", "path": "binary.jsonl"},
            {"source_id": "ratings", "supervision": "scored", "quality_label": "toxicity",
             "label_direction": "lower_is_better", "filter_policy": "quality", "path": "scored.jsonl"}
        ],
        "embedding": {"provider": "hashed", "dim": 32},
        "selection": {"fraction": 0.5, "k": 3, "restarts": 3, "seed": 2},
        "output_dir": "out"
    });
    let path = dir.path().join("config.json");
    fs::write(&path, config.to_string()).unwrap();
    (dir, path)
}

fn sha_line(out: &Output) -> String {
    stdout(out).lines().find(|l| l.starts_with("sha256")).unwrap().to_owned()
}

#[test]
fn pipeline_is_reproducible() {
    let (dir, config) = workspace();
    let config = config.to_str().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let first = prefunify(&["pipeline", "--config", config, "--out", a.to_str().unwrap()]);
    assert_eq!(code(&first), 0, "{}", String::from_utf8_lossy(&first.stderr));
    let second = prefunify(&["pipeline", "--config", config, "--out", b.to_str().unwrap()]);
    assert_eq!(sha_line(&first), sha_line(&second));
    assert_eq!(fs::read(a.join("d_train.jsonl")).unwrap(), fs::read(b.join("d_train.jsonl")).unwrap());
    for stage in ["sft", "reward", "rlhf"] {
        assert!(a.join(format!("manifest_{stage}.json")).exists());
    }
    // a different seed is still a valid run
    let other = prefunify(&["pipeline", "--config", config, "--seed", "99", "--out", dir.path().join("c").to_str().unwrap()]);
    assert_eq!(code(&other), 0);
}

#[test]
fn stages_run_one_by_one() {
    let (dir, config) = workspace();
    let config = config.to_str().unwrap();
    for stage in ["ingest", "unify", "embed", "cluster", "select"] {
        let out = prefunify(&[stage, "--config", config]);
        assert_eq!(code(&out), 0, "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = dir.path().join("out");
    for file in ["ingest_report.json", "unified.jsonl", "embeddings.jsonl", "cluster_model.json", "d_train.jsonl"] {
        assert!(out.join(file).exists(), "{file} missing");
    }
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&prefunify(&[])), 1);
    assert_eq!(code(&prefunify(&["pipeline"])), 1);
    assert_eq!(code(&prefunify(&["frobnicate"])), 1);
    assert_eq!(code(&prefunify(&["pipeline", "--config", "c.json", "--seed", "minus-one"])), 1);
    assert_eq!(code(&prefunify(&["--help"])), 0);
}

#[test]
fn validation_errors_exit_2() {
    let (_dir, config) = workspace();
    let config = config.to_str().unwrap();
    let bad_fraction = prefunify(&["pipeline", "--config", config, "--fraction", "1.5"]);
    assert_eq!(code(&bad_fraction), 2);
    assert!(String::from_utf8_lossy(&bad_fraction.stderr).contains("1.5"));
    assert_eq!(code(&prefunify(&["manifest", "--stage", "dpo", "--dataset", "d.jsonl"])), 2);

    let (dir, config) = workspace();
    let mut text = fs::read_to_string(dir.path().join("scored.jsonl")).unwrap();
    text.push_str("{\"prompt\": \"p\", \"response\": \"r\", \"scores\": {\"toxicity\": \"high\"}}\n");
    fs::write(dir.path().join("scored.jsonl"), text).unwrap();
    let out = prefunify(&["ingest", "--config", config.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("49"), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn runtime_errors_exit_3() {
    let (dir, config) = workspace();
    fs::remove_file(dir.path().join("binary.jsonl")).unwrap();
    assert_eq!(code(&prefunify(&["pipeline", "--config", config.to_str().unwrap()])), 3);
    assert_eq!(code(&prefunify(&["pipeline", "--config", "/nonexistent/config.json"])), 3);
}

#[test]
fn eval_prints_and_writes_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let out = prefunify(&[
        "eval",
        "--items",
        eval_fixture("eval_items.jsonl").to_str().unwrap(),
        "--dumps",
        eval_fixture("eval_dumps.jsonl").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--label",
        "base",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("base"));
    let metrics: Value = serde_json::from_slice(&fs::read(dir.path().join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["n_items"], 10);
    assert_eq!(metrics["accuracy"], 0.6);
}

#[test]
fn eval_with_missing_dumps_fails() {
    let dir = tempfile::tempdir().unwrap();
    let dumps = fs::read_to_string(eval_fixture("eval_dumps.jsonl")).unwrap();
    let path = dir.path().join("dumps.jsonl");
    fs::write(&path, dumps.lines().skip(1).collect::<Vec<_>>().join("\n")).unwrap();
    let out = prefunify(&[
        "eval",
        "--items",
        eval_fixture("eval_items.jsonl").to_str().unwrap(),
        "--dumps",
        path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("wb01"));
    assert_eq!(code(&prefunify(&["eval", "--items", "x.jsonl"])), 1);
}

#[test]
fn manifest_to_stdout_and_file() {
    let out = prefunify(&["manifest", "--stage", "rlhf", "--dataset", "data/d_train.jsonl"]);
    assert_eq!(code(&out), 0);
    let manifest: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(manifest["hyperparameters"]["learning_rate"], 1.41e-5);
    assert_eq!(manifest["hyperparameters"]["max_steps"], 20000);
    assert_eq!(manifest["dataset_path"], "data/d_train.jsonl");

    let (dir, config) = workspace();
    let file = dir.path().join("reward.json");
    let out = prefunify(&["manifest", "--stage", "reward", "--config", config.to_str().unwrap(), "--out", file.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let manifest: Value = serde_json::from_slice(&fs::read(&file).unwrap()).unwrap();
    assert_eq!(manifest["adapter"]["rank"], 8);
    assert!(manifest["dataset_path"].as_str().unwrap().ends_with("d_train.jsonl"));
}
