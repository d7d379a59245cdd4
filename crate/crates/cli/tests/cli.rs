use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn xvec(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xvec"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    xvec(dir, args).status.code().unwrap()
}

#[test]
fn usage_errors_exit_with_one() {
    let d = TempDir::new().unwrap();
    assert_eq!(code(d.path(), &["--help"]), 0);
    assert_eq!(code(d.path(), &[]), 1);
    assert_eq!(code(d.path(), &["bogus"]), 1);
    assert_eq!(code(d.path(), &["run", "--from", "nope"]), 1);
    std::fs::write(d.path().join("bad.toml"), "seed = \"x\"").unwrap();
    assert_eq!(code(d.path(), &["--config", "bad.toml", "run"]), 1);
}

#[test]
fn data_errors_exit_with_two() {
    let d = TempDir::new().unwrap();
    assert_eq!(code(d.path(), &["score"]), 2);
    assert_eq!(code(d.path(), &["--config", "missing.toml", "run"]), 2);
}

#[test]
fn validate_spec_reports_dimensions() {
    let d = TempDir::new().unwrap();
    let out = xvec(d.path(), &["validate-spec", "ftdnn"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("embedding dim 1024"));
}

#[test]
fn grad_check_passes() {
    let d = TempDir::new().unwrap();
    assert_eq!(code(d.path(), &["grad-check", "--arch", "etdnn", "--loss", "softmax"]), 0);
}

#[test]
fn run_then_evaluate_a_single_score_file() {
    let d = TempDir::new().unwrap();
    let cfg = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/tests/tiny.toml");
    assert_eq!(code(d.path(), &["--config", cfg, "--workdir", "w", "run"]), 0);
    assert!(d.path().join("w/report.txt").exists());
    let out = xvec(
        d.path(),
        &["evaluate", "--scores", "w/a/calibrated_eval.txt", "--key", "w/data/trials_eval.key"],
    );
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("EER"));
}
