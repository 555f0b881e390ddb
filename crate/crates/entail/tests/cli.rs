//! The `entail` binary end to end on a barely trained backbone.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

fn entail(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_entail")).args(args).env_remove("ENTAIL_OUT").output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = entail(args);
    assert_eq!(out.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Datasets, a 5-step base checkpoint and a two-fold sentiment run.
struct World {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl World {
    fn path(&self, rel: &str) -> String {
        s(&self.root.join(rel))
    }
}

fn world() -> &'static World {
    static W: OnceLock<World> = OnceLock::new();
    W.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let data = s(&root.join("data"));
        for task in ["sentiment", "pairs"] {
            ok(&["gen-data", "--task", task, "--n", "80", "--seed", "3", "--out", &data]);
        }
        ok(&["pretrain", "--steps", "5", "--out", &s(&root.join("base"))]);
        ok(&[
            "fewshot", "--checkpoint", &s(&root.join("base")), "--task-spec", &s(&root.join("data/sentiment.task.json")),
            "--data", &s(&root.join("data/sentiment.jsonl")), "--k", "4", "--folds", "2", "--epochs", "1",
            "--pseudotokens", "2", "--out", &s(&root.join("run")),
        ]);
        World { _dir: dir, root }
    })
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(entail(&["--help"]).status.code(), Some(0));
    assert_eq!(entail(&["fewshot", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(entail(&[]).status.code(), Some(1));
    let missing = entail(&["inspect", "/definitely/not/here"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("does not exist"));
}

#[test]
fn broken_artifact_is_a_run_failure() {
    let w = world();
    let broken = w.root.join("broken");
    std::fs::create_dir_all(&broken).unwrap();
    std::fs::copy(w.root.join("base/manifest.json"), broken.join("manifest.json")).unwrap();
    std::fs::write(broken.join("weights.bin"), [0u8; 12]).unwrap();
    let out = entail(&["inspect", &s(&broken)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("weights.bin"));
}

#[test]
fn fewshot_writes_report_deltas_and_config_echo() {
    let w = world();
    let report = json(&w.root.join("run/report.json"));
    assert_eq!(report["scores"].as_array().unwrap().len(), 2);
    assert!(w.root.join("run/fold-0/delta/weights.bin").exists());
    assert!(w.root.join("run/fold-1/delta/manifest.json").exists());
    let echo = json(&w.root.join("run/run_config.json"));
    assert_eq!(echo["command"], "fewshot");
    assert_eq!(echo["train"]["k"], 4);
}

#[test]
fn eval_rescores_saved_deltas() {
    let w = world();
    let out = w.root.join("eval");
    ok(&[
        "eval", "--checkpoint", &w.path("base"), "--task-spec", &w.path("data/sentiment.task.json"), "--data",
        &w.path("data/sentiment.jsonl"), "--deltas", &w.path("run/fold-0/delta"), &w.path("run/fold-1/delta"),
        "--out", &s(&out),
    ]);
    let eval = json(&out.join("eval.json"));
    let report = json(&w.root.join("run/report.json"));
    assert_eq!(eval["scores"], report["scores"]);
}

#[test]
fn inspect_reports_checkpoint_and_delta() {
    let w = world();
    let ck: Value = serde_json::from_slice(&ok(&["inspect", &w.path("base")]).stdout).unwrap();
    assert!(ck["parameters"].as_u64().unwrap() > 0);
    assert_eq!(ck["lineage"].as_array().unwrap().len(), 1);
    assert_eq!(ck["modes"].as_array().unwrap().len(), 3);
    let delta: Value = serde_json::from_slice(&ok(&["inspect", &w.path("run/fold-0/delta")]).stdout).unwrap();
    assert_eq!(delta["task"], "sentiment");
    assert_eq!(delta["fingerprint"], ck["fingerprint"]);
}

#[test]
fn infer_orders_by_id_and_reports_unknown_tasks() {
    let w = world();
    let batch = w.root.join("requests.jsonl");
    std::fs::write(
        &batch,
        concat!(
            "{\"id\": 9, \"task\": \"sentiment\", \"s1\": \"the plot was dull\"}\n",
            "{\"id\": 2, \"task\": \"nope\", \"s1\": \"the plot was dull\"}\n",
            "{\"id\": 5, \"task\": \"sentiment\", \"s1\": \"the acting was superb\"}\n",
        ),
    )
    .unwrap();
    let out = w.root.join("infer");
    ok(&[
        "infer", "--checkpoint", &w.path("base"), "--deltas", &w.path("run/fold-0/delta"), "--batch", &s(&batch),
        "--max-batch", "2", "--out", &s(&out),
    ]);
    let lines: Vec<Value> = std::fs::read_to_string(out.join("results.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let ids: Vec<u64> = lines.iter().map(|l| l["id"].as_u64().unwrap()).collect();
    assert_eq!(ids, [2, 5, 9]);
    assert!(lines[0]["error"].as_str().unwrap().contains("not registered"));
    for l in &lines[1..] {
        let p: Vec<f64> = l["probabilities"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn out_directory_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_entail"))
        .args(["gen-data", "--task", "pairs", "--n", "20"])
        .env("ENTAIL_OUT", dir.path())
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(0));
    assert!(dir.path().join("pairs.jsonl").exists());
    assert!(dir.path().join("pairs.task.json").exists());
}
