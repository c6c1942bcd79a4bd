use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lab(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lidao-lab"))
        .args(args)
        .current_dir(cwd)
        .env("LIDAO_LAB_THREADS", "2")
        .output()
        .expect("binary runs")
}

#[test]
fn verify_passes_and_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = lab(&["verify", "--out", "report.json"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    let checks = report.as_array().unwrap();
    assert!(checks.len() >= 10);
    for c in checks {
        assert!(c["check_name"].is_string());
        assert!(c["instances"].is_u64());
        assert!(c["max_residual"].is_f64() || c["max_residual"].is_u64());
        assert_eq!(c["pass"], true);
    }
}

#[test]
fn toy_world_through_generate_evaluate_and_experiment() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(lab(&["make-toy", "--seed", "2", "--out", "toy"], d).status.success());
    for f in ["vocab.json", "model.json", "eval_model.json", "prompts.jsonl", "config.toml"] {
        assert!(d.join("toy").join(f).exists(), "{f}");
    }

    let gen = lab(&["generate", "--config", "toy/config.toml", "--methods", "none,lidao_min", "--out", "run"], d);
    assert!(gen.status.success(), "{}", String::from_utf8_lossy(&gen.stderr));
    let lines = fs::read_to_string(d.join("run/generations.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 2 * 8 * 10);

    let ev = lab(&["evaluate", "--config", "toy/config.toml", "--out", "run", "--mode", "joint"], d);
    assert!(ev.status.success(), "{}", String::from_utf8_lossy(&ev.stderr));
    let csv = fs::read_to_string(d.join("run/report.csv")).unwrap();
    assert!(csv.starts_with("method,task,mode,group_stat_m,group_stat_f,bias_x100,mean_ppl,n,n_sanitized"));
    assert!(csv.lines().skip(1).all(|l| l.split(',').nth(2) == Some("joint")));
    assert_eq!(csv.lines().count(), 1 + 2 * 3);

    let a = lab(&["experiment", "--config", "toy/config.toml", "--out", "a", "--seed", "9"], d);
    let b = lab(&["experiment", "--config", "toy/config.toml", "--out", "b", "--seed", "9"], d);
    assert!(a.status.success() && b.status.success());
    for f in ["generations.jsonl", "failures.jsonl", "report.json", "report.csv", "infoth_summary.json"] {
        assert_eq!(fs::read(d.join("toy/a").join(f)).ok(), fs::read(d.join("toy/b").join(f)).ok(), "{f}");
    }
}

#[test]
fn config_problems_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(lab(&["experiment", "--config", "missing.toml"], d).status.code(), Some(2));

    assert!(lab(&["make-toy", "--out", "toy"], d).status.success());
    let bad_method = lab(&["generate", "--config", "toy/config.toml", "--methods", "nope"], d);
    assert_eq!(bad_method.status.code(), Some(2));

    fs::write(d.join("toy/bad.toml"), "methods = []\n").unwrap();
    assert_eq!(lab(&["experiment", "--config", "toy/bad.toml"], d).status.code(), Some(2));

    assert_eq!(lab(&["make-toy", "--bias-strength", "3"], d).status.code(), Some(2));
    assert_eq!(lab(&["evaluate", "--config", "toy/config.toml", "--mode", "both"], d).status.code(), Some(2));
}
