use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn fedpdpo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedpdpo"))
        .args(args)
        .env_remove("FEDPDPO_OUTPUT_ROOT")
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let cfg = json!({
        "name": "cli",
        "federation": {"n_clients": 2, "total_rounds": 2, "batch_size": 4},
        "model": {"backbone": {"hidden_dim": 8, "max_seq_len": 8}},
        "data": {"kind": "synthetic", "spec": {"vocab_size": 8, "n_samples": 40, "prompt_len": 2, "response_len": 3}},
        "seeds": [3],
        "output_dir": dir.join("out"),
    });
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

#[test]
fn gradcheck_passes_and_rejects_bad_dims() {
    let out = fedpdpo(&["gradcheck", "--dim", "8"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = stdout_json(&out);
    assert_eq!(report["pass"], true);
    assert!(report["max_rel_err"].as_f64().unwrap() < 1e-4);
    assert_eq!(fedpdpo(&["gradcheck", "--dim", "1"]).status.code(), Some(2));
}

#[test]
fn verify_theorems_emits_both_grids() {
    let out = fedpdpo(&["verify-theorems", "--n", "20000", "--seed", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = stdout_json(&out);
    assert_eq!(report["preference"].as_array().unwrap().len(), 5);
    assert_eq!(report["shifted"].as_array().unwrap().len(), 9);
    assert_eq!(fedpdpo(&["verify-theorems", "--n", "10"]).status.code(), Some(2));
}

#[test]
fn partition_dry_run_prints_the_plan() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = fedpdpo(&["partition", cfg.to_str().unwrap(), "--dry-run"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let plan = stdout_json(&out);
    assert_eq!(plan["strategy"], "reward_margin");
    assert_eq!(plan["assignment"].as_array().unwrap().len(), 40);
    assert_eq!(plan["seed"], 3);
    assert!(!dir.path().join("out").exists(), "dry run must not write outputs");
    assert_eq!(fedpdpo(&["partition", cfg.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn bad_config_fails() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"federation": {"rounds": 3}}"#).unwrap();
    let out = fedpdpo(&["run", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("rounds"));
}

#[test]
fn run_then_eval_final_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = fedpdpo(&["run", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = stdout_json(&out);
    assert_eq!(summary["seeds"][0]["rounds"], 2);
    let seed_dir = dir.path().join("out/seed_3");
    let metrics = std::fs::read_to_string(seed_dir.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 4);

    let data = dir.path().join("eval.jsonl");
    std::fs::write(
        &data,
        "{\"prompt\":\"t0 t1\",\"chosen\":\"t0 t1 t2\",\"rejected\":\"t5 t6 t7\"}\n\
         {\"prompt\":\"t2\",\"chosen\":\"t3 t0 t1\",\"rejected\":\"t4 t7 t6\"}\n",
    )
    .unwrap();
    let ckpt = seed_dir.join("checkpoints/final/client_0.json");
    let out = fedpdpo(&["eval", ckpt.to_str().unwrap(), data.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = stdout_json(&out);
    assert_eq!(report["n_samples"], 2);
    let acc = report["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn output_root_resolves_relative_dirs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "federation": {"n_clients": 2, "total_rounds": 1, "batch_size": 4},
        "model": {"backbone": {"hidden_dim": 8, "max_seq_len": 8}},
        "data": {"kind": "synthetic", "spec": {"vocab_size": 8, "n_samples": 40, "prompt_len": 2, "response_len": 3}},
        "seeds": [1],
        "output_dir": "rel",
    });
    let path = dir.path().join("c.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_fedpdpo"))
        .args(["run", path.to_str().unwrap()])
        .env("FEDPDPO_OUTPUT_ROOT", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("rel/summary.json").is_file());
}

#[test]
fn shipped_config_matches_the_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.json");
    let out = fedpdpo(&["partition", path.to_str().unwrap(), "--dry-run"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout_json(&out)["n_clients"], 3);

    let shipped = fedpdpo_core::harness::ExperimentConfig::load(&path).unwrap();
    let defaults = fedpdpo_core::harness::ExperimentConfig {
        name: "desk".into(),
        output_dir: Some("runs/desk".into()),
        ..Default::default()
    };
    assert_eq!(shipped, defaults);
}
