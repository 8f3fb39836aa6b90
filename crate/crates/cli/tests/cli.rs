use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn config(name: &str) -> Value {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Small version of the Markovian singular experiment.
fn small_markovian() -> Value {
    let mut c = config("markovian_singular.json");
    c["n_paths"] = json!(300);
    c["grid"]["steps"] = json!(64);
    c["solver"]["levels"] = json!([10, 100]);
    c["probes"]["continuity"]["times"] = json!([0.5, 0.75, 0.875]);
    c["probes"]["blowup"]["eps"] = json!([0.0625, 0.03125, 0.015625]);
    c["probes"]["liminf"]["eps"] = json!([0.0625, 0.015625]);
    c
}

fn write_config(dir: &Path, cfg: &Value) -> PathBuf {
    let path = dir.join("config.in.json");
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn sbsde(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sbsde"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn toy_experiment_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &config("toy_deterministic_singular.json"));
    let out = dir.path().join("out");
    let o = sbsde(&["run"], &cfg, &out);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("apriori") && stdout.contains("PASS"), "{stdout}");
    assert!(out.join("manifest.json").exists());
}

#[test]
fn overlapping_support_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small_markovian();
    c["probes"]["continuity"]["support"] = json!([-0.5, 2.0]);
    let cfg = write_config(dir.path(), &c);
    let o = sbsde(&["run"], &cfg, &dir.path().join("out"));
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("support"));
}

#[test]
fn later_stage_without_inputs_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_markovian());
    for sub in ["solve", "continuity-probe"] {
        let o = sbsde(&[sub], &cfg, &dir.path().join(sub));
        assert_eq!(code(&o), 2, "{sub}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let o = sbsde(
        &["liquidate"],
        &write_config(dir.path(), &config("liquidation_stochastic_alpha.json")),
        &dir.path().join("l"),
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn reruns_and_split_stages_reproduce_every_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_markovian());
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    assert_eq!(code(&sbsde(&["run", "--workers", "1"], &cfg, &a)), 0);
    assert_eq!(code(&sbsde(&["run", "--workers", "3"], &cfg, &b)), 0);
    for sub in ["simulate-forward", "solve"] {
        assert_eq!(code(&sbsde(&[sub], &cfg, &c)), 0, "{sub}");
    }
    let mut csvs: Vec<String> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    csvs.sort();
    assert!(csvs.len() >= 6, "{csvs:?}");
    for name in &csvs {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    for name in ["ensemble.csv", "increments.csv", "ladder.csv"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(c.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn seed_override_changes_the_sample() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_markovian());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&sbsde(&["simulate-forward"], &cfg, &a)), 0);
    assert_eq!(code(&sbsde(&["simulate-forward", "--seed", "8"], &cfg, &b)), 0);
    assert_ne!(fs::read(a.join("ensemble.csv")).unwrap(), fs::read(b.join("ensemble.csv")).unwrap());
}

#[test]
fn frozen_volatility_gives_constant_paths() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small_markovian();
    c["model"]["sigma"] = json!(0.0);
    c["probes"] = json!({});
    let cfg = write_config(dir.path(), &c);
    let out = dir.path().join("out");
    assert_eq!(code(&sbsde(&["simulate-forward"], &cfg, &out)), 0);
    let text = fs::read_to_string(out.join("ensemble.csv")).unwrap();
    for line in text.lines().skip(1) {
        let x: f64 = line.split(',').nth(3).unwrap().parse().unwrap();
        assert_eq!(x, 1.0, "{line}");
    }
}

#[test]
fn verify_ito_maps_verdicts_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    for (functional, expected) in
        [(json!({"name": "state", "index": 0}), 0), (json!({"name": "qv_integral", "time_weight": 1.0}), 3)]
    {
        let mut c = config("brownian_ito.json");
        c["probes"]["ito"]["functionals"] = json!([functional]);
        c["probes"]["ito"]["paths"] = json!(50);
        let cfg = write_config(dir.path(), &c);
        let out = dir.path().join(format!("out{expected}"));
        let o = sbsde(&["verify-ito"], &cfg, &out);
        assert_eq!(code(&o), expected, "{}", String::from_utf8_lossy(&o.stdout));
        assert!(out.join("ito.csv").exists());
    }
}
