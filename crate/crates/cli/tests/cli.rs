use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"{
  "model": {"dim": 16, "template_tokens": 4, "vertices": 30, "mrm_blocks": 2, "fixed_blocks": 1, "learnable_blocks": 2},
  "optim": {"pretrain_steps": 4, "train_steps": 3, "eval_every": 2},
  "data": {"samples": 10}
}"#;

fn gtrs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gtrs")).args(args).output().unwrap()
}

fn gtrs_env(args: &[&str], key: &str, value: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gtrs"))
        .args(args)
        .env(key, value)
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn setup() -> (tempfile::TempDir, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.json");
    std::fs::write(&config, TINY).unwrap();
    (dir, config)
}

fn trained(dir: &Path, config: &Path) -> std::path::PathBuf {
    let out = gtrs(&["--config", s(config), "--out", s(dir), "train"]);
    assert!(out.status.success(), "{}", stderr(&out));
    dir.join("model.ckpt.json")
}

#[test]
fn pretrain_writes_one_row_per_step() {
    let (dir, config) = setup();
    let out = gtrs(&["--config", s(&config), "--out", s(dir.path()), "pretrain", "--steps", "7"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = std::fs::read_to_string(dir.path().join("pretrain_loss.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 7);
    assert!(rows[0].starts_with("1,") && rows[6].starts_with("7,"));
}

#[test]
fn dataset_required_without_generation() {
    let (dir, _) = setup();
    let config = dir.path().join("nodata.json");
    std::fs::write(&config, r#"{"data": {"generate": false}}"#).unwrap();
    let out = gtrs(&["--config", s(&config), "--out", s(dir.path()), "pretrain"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));

    std::fs::write(&config, r#"{"data": {"generate": false, "dataset": "/nonexistent/set.jsonl"}}"#).unwrap();
    let out = gtrs(&["--config", s(&config), "--out", s(dir.path()), "pretrain"]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn invalid_config_exits_2() {
    let (dir, _) = setup();
    let config = dir.path().join("bad.json");
    std::fs::write(&config, r#"{"model": {"heads": 3}}"#).unwrap();
    let out = gtrs(&["--config", s(&config), "--out", s(dir.path()), "profile"]);
    assert_eq!(out.status.code(), Some(2));
    std::fs::write(&config, r#"{"modle": {}}"#).unwrap();
    let out = gtrs(&["--config", s(&config), "--out", s(dir.path()), "profile"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn resume_continues_step_counter() {
    let (dir, config) = setup();
    let ckpt = trained(dir.path(), &config);
    let out = gtrs(&["--config", s(&config), "--out", s(dir.path()), "train", "--resume", s(&ckpt), "--steps", "2"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let summary: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("train_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["start_step"], 3);
    assert_eq!(summary["end_step"], 5);
    let csv = std::fs::read_to_string(dir.path().join("train_loss.csv")).unwrap();
    let steps: Vec<u64> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(steps, vec![4, 5]);
}

#[test]
fn resume_and_pam_checkpoint_are_exclusive() {
    let (dir, config) = setup();
    let out = gtrs(&[
        "--config", s(&config), "--out", s(dir.path()), "train", "--resume", "a", "--pam-checkpoint", "b",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn checkpoint_dimension_mismatch_exits_2() {
    let (dir, config) = setup();
    let ckpt = trained(dir.path(), &config);
    let other = dir.path().join("wide.json");
    std::fs::write(&other, TINY.replace("\"dim\": 16", "\"dim\": 32")).unwrap();
    let out = gtrs(&["--config", s(&other), "--out", s(dir.path()), "eval", "--checkpoint", s(&ckpt)]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    let out = gtrs(&["--config", s(&other), "--out", s(dir.path()), "train", "--resume", s(&ckpt)]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn eval_of_empty_dataset_exits_2() {
    let (dir, config) = setup();
    let ckpt = trained(dir.path(), &config);
    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let out = gtrs(&["--out", s(dir.path()), "eval", "--checkpoint", s(&ckpt), "--dataset", s(&empty)]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn oracle_eval_reports_zero_error() {
    let (dir, config) = setup();
    let ckpt = trained(dir.path(), &config);
    let out = gtrs(&["--out", s(dir.path()), "eval", "--checkpoint", s(&ckpt), "--oracle"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let m: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(m["mpjpe"].as_f64(), Some(0.0));
    assert_eq!(m["mpve"].as_f64(), Some(0.0));
    assert!(m["pa_mpjpe"].as_f64().unwrap() < 1e-12);
}

#[test]
fn export_writes_one_line_per_vertex_deterministically() {
    let (dir, config) = setup();
    let ckpt = trained(dir.path(), &config);
    let pose = dir.path().join("pose.json");
    let joints: Vec<[f64; 2]> = (0..17).map(|j| [0.02 * j as f64, 0.1]).collect();
    std::fs::write(&pose, serde_json::to_string(&joints).unwrap()).unwrap();
    let objs = ["a.obj", "b.obj"].map(|n| dir.path().join(n));
    for obj in &objs {
        let out = gtrs(&["--out", s(dir.path()), "export", "--checkpoint", s(&ckpt), "--pose", s(&pose), "--obj", s(obj)]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    let a = std::fs::read_to_string(&objs[0]).unwrap();
    assert_eq!(a.lines().filter(|l| l.starts_with("v ")).count(), 30);
    assert_eq!(a, std::fs::read_to_string(&objs[1]).unwrap());
}

#[test]
fn malformed_pose_reports_location() {
    let (dir, config) = setup();
    let ckpt = trained(dir.path(), &config);
    let pose = dir.path().join("pose.json");
    std::fs::write(&pose, "[[0.1, 0.2],\n [0.3 0.4]]").unwrap();
    let out = gtrs(&["--out", s(dir.path()), "export", "--checkpoint", s(&ckpt), "--pose", s(&pose), "--obj", "x.obj"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("line 2"), "{err}");
}

#[test]
fn budget_violation_exits_4() {
    let (dir, _) = setup();
    let config = dir.path().join("huge.json");
    std::fs::write(&config, r#"{"model": {"dim": 512}}"#).unwrap();
    let out = gtrs(&["--config", s(&config), "--out", s(dir.path()), "profile", "--assert-budget"]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
    let out = gtrs(&["--config", s(&config), "--out", s(dir.path()), "profile"]);
    assert!(out.status.success());
}

#[test]
fn thread_count_does_not_change_results() {
    let (dir, config) = setup();
    let ckpt = trained(dir.path(), &config);
    let run = |threads: &str| {
        let out = gtrs_env(&["--out", s(dir.path()), "eval", "--checkpoint", s(&ckpt)], "GTRS_THREADS", threads);
        assert!(out.status.success(), "{}", stderr(&out));
        out.stdout
    };
    assert_eq!(run("1"), run("3"));
    let bad = gtrs_env(&["--out", s(dir.path()), "eval", "--checkpoint", s(&ckpt)], "GTRS_THREADS", "many");
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn seed_flag_overrides_config() {
    let (dir, config) = setup();
    let profile = |seed: &str| {
        let out = gtrs(&["--config", s(&config), "--seed", seed, "--out", s(dir.path()), "pretrain", "--steps", "1"]);
        assert!(out.status.success(), "{}", stderr(&out));
        std::fs::read_to_string(dir.path().join("pretrain_loss.csv")).unwrap()
    };
    assert_ne!(profile("1"), profile("2"));
    assert_eq!(profile("1"), profile("1"));
}
