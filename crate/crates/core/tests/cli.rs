//! End-to-end checks of the experiment runner binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn abcdr(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_abcdr"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) {
    fs::write(dir.join(name), body).unwrap();
}

const BASE_CONFIG: &str = r#"{
  "model": {"model_id": "gaussian-toy"},
  "n_sims": 1200,
  "seed": 7,
  "acceptance_fraction": 0.03,
  "n_star": 6,
  "pipelines": [
    {"reduction": "none", "adjustment": "homoscedastic"},
    {"reduction": "bic", "adjustment": "none"}
  ],
  "output_dir": "out"
}"#;

#[test]
fn run_writes_all_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), "cfg.json", BASE_CONFIG);
    let out = abcdr(&["run", "cfg.json"], tmp.path());
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));

    let report = fs::read_to_string(tmp.path().join("out/report.csv")).unwrap();
    let lines: Vec<&str> = report.trim().lines().collect();
    assert_eq!(lines[0], "params,reduction,adjustment,mean_rsse,relative_pct,n_eff,flags");
    // baseline is prepended ahead of the two configured pipelines
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("theta,none,none,"));
    assert!(lines[1].contains(",0.0,"));

    assert!(tmp.path().join("out/table.csv").exists());
    assert!(tmp.path().join("out/selection_traces/1_bic.csv").exists());
    let manifest = fs::read_to_string(tmp.path().join("out/run_manifest.json")).unwrap();
    assert!(manifest.contains("\"n\": 1200"));
    assert!(manifest.contains("\"version\""));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), "cfg.json", BASE_CONFIG);
    assert!(abcdr(&["run", "cfg.json", "--output-dir", "a"], tmp.path()).status.success());
    assert!(abcdr(&["run", "cfg.json", "--output-dir", "b", "--threads", "1"], tmp.path())
        .status
        .success());
    let a = fs::read(tmp.path().join("a/report.csv")).unwrap();
    let b = fs::read(tmp.path().join("b/report.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn table_reuse_reproduces_the_generating_run() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), "cfg.json", BASE_CONFIG);
    assert!(abcdr(&["run", "cfg.json"], tmp.path()).status.success());
    let reuse = BASE_CONFIG
        .replace("\"model\": {\"model_id\": \"gaussian-toy\"},\n  \"n_sims\": 1200,", "\"table_path\": \"out/table.csv\",")
        .replace("\"output_dir\": \"out\"", "\"output_dir\": \"out2\"");
    write_config(tmp.path(), "cfg2.json", &reuse);
    let out = abcdr(&["run", "cfg2.json"], tmp.path());
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let a = fs::read(tmp.path().join("out/report.csv")).unwrap();
    let b = fs::read(tmp.path().join("out2/report.csv")).unwrap();
    assert_eq!(a, b);
    // the reusing run never generates a table of its own
    assert!(!tmp.path().join("out2/table.csv").exists());
}

#[test]
fn seed_override_changes_the_report() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), "cfg.json", BASE_CONFIG);
    assert!(abcdr(&["run", "cfg.json", "--output-dir", "a"], tmp.path()).status.success());
    assert!(abcdr(&["run", "cfg.json", "--output-dir", "b", "--seed", "8"], tmp.path())
        .status
        .success());
    let a = fs::read(tmp.path().join("a/report.csv")).unwrap();
    let b = fs::read(tmp.path().join("b/report.csv")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn collinearity_block_writes_condition_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = r#"{
      "model": {"model_id": "gaussian-toy", "k_dup": 2, "dup_sd": 1e-7},
      "n_sims": 800,
      "seed": 3,
      "acceptance_fraction": 0.05,
      "n_star": 3,
      "pipelines": [{"reduction": "none", "adjustment": "none"}],
      "collinearity": {"n_pseudo": 8},
      "output_dir": "out"
    }"#;
    write_config(tmp.path(), "cfg.json", cfg);
    let out = abcdr(&["run", "cfg.json"], tmp.path());
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let cond = fs::read_to_string(tmp.path().join("out/condition.csv")).unwrap();
    let lines: Vec<&str> = cond.trim().lines().collect();
    assert_eq!(lines[0], "kappa,rel_rsse_wls,rel_rsse_ridge");
    assert_eq!(lines.len(), 9);
}

#[test]
fn validate_accepts_good_and_rejects_bad_configs() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), "good.json", BASE_CONFIG);
    let out = abcdr(&["validate", "good.json"], tmp.path());
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok");

    write_config(
        tmp.path(),
        "zero_fraction.json",
        &BASE_CONFIG.replace("\"acceptance_fraction\": 0.03", "\"acceptance_fraction\": 0.0"),
    );
    let out = abcdr(&["validate", "zero_fraction.json"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("acceptance_fraction"));

    // eps-sufficiency needs a univariate parameter; stereology has three
    let cfg = r#"{
      "model": {"model_id": "stereology"},
      "n_sims": 100,
      "seed": 1,
      "pipelines": [{"reduction": "eps-sufficiency", "adjustment": "none"}],
      "output_dir": "out"
    }"#;
    write_config(tmp.path(), "eps.json", cfg);
    let out = abcdr(&["validate", "eps.json"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("univariate"));
}

#[test]
fn config_errors_exit_one_before_any_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    // both model and table_path given
    let cfg = BASE_CONFIG.replace(
        "\"model\": {\"model_id\": \"gaussian-toy\"},",
        "\"model\": {\"model_id\": \"gaussian-toy\"},\n  \"table_path\": \"x.csv\",",
    );
    write_config(tmp.path(), "cfg.json", &cfg);
    let out = abcdr(&["run", "cfg.json"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(!tmp.path().join("out").exists());

    // malformed json carries a line-anchored message
    write_config(tmp.path(), "broken.json", "{\n  \"seed\": ,\n}");
    let out = abcdr(&["run", "broken.json"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}
