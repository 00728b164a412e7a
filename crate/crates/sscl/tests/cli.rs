//! The `sscl` binary: exit codes, locking, dry runs, purity table.

use std::path::PathBuf;
use std::process::{Command, Output};

fn sscl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sscl")).args(args).env_remove("SSCL_OUTPUT_ROOT").output().unwrap()
}

fn tiny() -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.toml").display().to_string()
}

#[test]
fn training_verbs_need_a_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    for verb in ["pretrain", "probe", "eval", "ablate"] {
        let o = sscl(&["--out", out, verb]);
        assert_eq!(o.status.code(), Some(2), "{verb}");
        assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"), "{verb}");
    }
}

#[test]
fn missing_config_file_exits_2() {
    let o = sscl(&["--config", "/nonexistent/run.toml", "--dry-run", "gen-data"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_override_exits_1() {
    let o = sscl(&["--config", &tiny(), "--set", "pretrain.epochz=3", "--dry-run", "pretrain"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("epochz"));
}

#[test]
fn dry_run_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("run");
    let o = sscl(&["--config", &tiny(), "--out", root.to_str().unwrap(), "--dry-run", "ablate"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("[pretrain]"));
    assert!(!root.exists());
}

#[test]
fn held_lock_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join(".sscl.lock"), "1").unwrap();
    let o = sscl(&["--out", dir.path().to_str().unwrap(), "gen-data"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("lock"));
}

#[test]
fn purity_table() {
    let o = sscl(&["purity", "--pool", "505", "--positives", "5", "--draw", "16"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("n,p_exactly,p_at_most"));
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|x| x.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 6);
    assert!((rows[1][2] - 0.991).abs() < 1e-3);
    assert!((rows[5][2] - 1.0).abs() < 1e-12);

    let bad = sscl(&["purity", "--pool", "5", "--positives", "6", "--draw", "2"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn report_without_metrics_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = sscl(&["report", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}
