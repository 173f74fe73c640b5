use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn igpn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_igpn")).current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = igpn(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn small_data(dir: &Path) {
    ok(dir, &["synth", "--classes", "3", "--per-class", "3", "--frames", "8", "--out", "train.json"]);
    ok(dir, &["synth", "--classes", "3", "--per-class", "2", "--frames", "8", "--seed", "5", "--split", "test", "--out", "test.json"]);
}

const TINY: &[&str] = &[
    "--channels", "4,4,4", "--kernel", "3", "--frames", "8", "--epochs", "2", "--warmup", "0", "--decay-steps", "1",
    "--batch-size", "4", "--lr", "0.05", "--ism-width", "2",
];

fn train_tiny(dir: &Path, out: &str, extra: &[&str]) -> String {
    let mut args = vec!["train", "--data", "train.json", "--eval", "test.json", "--out", out];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    ok(dir, &args)
}

#[test]
fn help_works_for_every_subcommand() {
    let dir = TempDir::new().unwrap();
    for sub in ["synth", "train", "eval", "flops", "gradcheck", "fuse", "export-topology", "dump-attention"] {
        let text = ok(dir.path(), &[sub, "--help"]);
        assert!(text.contains("Usage"), "{sub}");
    }
}

#[test]
fn train_eval_fuse_round_trip() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    small_data(d);
    train_tiny(d, "joint", &[]);
    train_tiny(d, "motion", &["--stream", "motion"]);
    for f in ["config.json", "metrics.csv", "model.ckpt", "scores.csv"] {
        assert!(d.join("joint").join(f).exists(), "{f}");
    }
    let metrics = fs::read_to_string(d.join("joint/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    assert!(metrics.starts_with("epoch,lr,train_loss,train_acc,eval_acc"));

    // Re-scoring the checkpoint reproduces the scores written by `train`.
    ok(d, &["eval", "--checkpoint", "joint/model.ckpt", "--data", "test.json", "--batch-size", "4", "--out", "again.csv"]);
    assert_eq!(fs::read_to_string(d.join("again.csv")).unwrap(), fs::read_to_string(d.join("joint/scores.csv")).unwrap());

    let text = ok(d, &["fuse", "--scores", "joint/scores.csv", "--scores", "motion/scores.csv", "--weights", "1,1", "--out", "fused.csv"]);
    assert!(text.contains("fused accuracy"));
    let fused = fs::read_to_string(d.join("fused.csv")).unwrap();
    assert_eq!(fused.lines().count(), 1 + 6);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    small_data(d);
    fs::write(d.join("run.json"), r#"{"model": {"variant": "heavy", "reduction": 2}, "train": {"momentum": 0.5}}"#).unwrap();
    train_tiny(d, "run", &["--config", "run.json", "--variant", "light"]);
    let resolved: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("run/config.json")).unwrap()).unwrap();
    assert_eq!(resolved["model"]["variant"], "light");
    assert_eq!(resolved["model"]["reduction"], 2);
    assert_eq!(resolved["model"]["classes"], 3);
    assert_eq!(resolved["train"]["momentum"], 0.5);
    assert_eq!(resolved["train"]["epochs"], 2);
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    small_data(d);
    train_tiny(d, "a", &["--seed", "3"]);
    train_tiny(d, "b", &["--seed", "3"]);
    assert_eq!(fs::read(d.join("a/model.ckpt")).unwrap(), fs::read(d.join("b/model.ckpt")).unwrap());
}

#[test]
fn flops_reports_ratio_against_control() {
    let dir = TempDir::new().unwrap();
    let text = ok(dir.path(), &["flops", "--out", "report.json"]);
    let ratio: f64 = text.lines().find(|l| l.starts_with("ratio")).unwrap().split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!(ratio > 0.0 && ratio <= 0.45, "{ratio}");
    assert!(dir.path().join("report.json").exists());
    let text = ok(dir.path(), &["flops", "--no-pooling"]);
    assert!(text.contains("ratio            1.0000"));
}

#[test]
fn exported_topology_can_drive_synthesis() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    ok(d, &["export-topology", "--topology", "uwa15", "--out", "uwa.json"]);
    ok(d, &["synth", "--topology", "uwa.json", "--classes", "2", "--per-class", "1", "--frames", "4", "--out", "x.json"]);
    let ds: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("x.json")).unwrap()).unwrap();
    assert_eq!(ds["samples"][0]["frames"][0].as_array().unwrap().len(), 15);
}

#[test]
fn attention_dump_has_one_row_per_site_frame_node() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    small_data(d);
    train_tiny(d, "run", &["--variant", "heavy"]);
    ok(d, &["dump-attention", "--checkpoint", "run/model.ckpt", "--data", "test.json", "--out", "att.csv"]);
    let text = fs::read_to_string(d.join("att.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("id,site,frame,node,value"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| r.len() == 5 && r[4].parse::<f64>().unwrap().is_finite()));
}

#[test]
fn exit_codes_follow_error_class() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    small_data(d);
    let code = |args: &[&str]| igpn(d, args).status.code();
    assert_eq!(code(&["train", "--data", "train.json", "--variant", "huge", "--out", "x"]), Some(2));
    assert_eq!(code(&["train", "--data", "train.json", "--kernel", "4", "--out", "x"]), Some(2));
    assert_eq!(code(&["synth", "--bogus", "--out", "x"]), Some(2));
    assert_eq!(code(&["gradcheck", "--precision", "f32"]), Some(2));
    assert_eq!(code(&["eval", "--checkpoint", "missing.ckpt", "--data", "test.json", "--out", "s.csv"]), Some(3));
    fs::write(d.join("junk.ckpt"), b"not a checkpoint").unwrap();
    assert_eq!(code(&["eval", "--checkpoint", "junk.ckpt", "--data", "test.json", "--out", "s.csv"]), Some(3));
    fs::write(d.join("bad.json"), "{").unwrap();
    assert_eq!(code(&["train", "--data", "bad.json", "--out", "x"]), Some(3));
}
