use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn campaign(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../campaigns").join(name)
}

fn forge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_forge")).args(args).output().unwrap()
}

fn out_arg(dir: &Path) -> String {
    format!("output={}", dir.display())
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    files
        .into_iter()
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

#[test]
fn all_is_reproducible_across_processes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = campaign("linear_k020.json");
    let cfg = cfg.to_str().unwrap();
    let out = out_arg(dir.path());
    let run = || {
        let o = forge(&["all", cfg, "--set", &out, "--set", "simulation.duration=2"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        read_dir_sorted(&dir.path().join("linear_k020"))
    };
    let a = run();
    let b = run();
    assert!(a.iter().any(|(n, _)| n == "trajectory.csv"));
    assert!(a.iter().any(|(n, _)| n == "synthesis.json"));
    assert_eq!(a, b);
}

#[test]
fn json_artifacts_carry_config_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = campaign("stiffening.json");
    let o = forge(&["synth", cfg.to_str().unwrap(), "--set", &out_arg(dir.path())]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(dir.path().join("stiffening/synthesis.json")).unwrap();
    let doc: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(doc["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(doc["config"]["name"], "stiffening");
    let manifest: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("stiffening/manifest_synth.json")).unwrap()).unwrap();
    assert_eq!(manifest["config_hash"], doc["config_hash"]);
}

#[test]
fn infeasible_design_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = campaign("linear_k020.json");
    let o = forge(&["synth", cfg.to_str().unwrap(), "--set", &out_arg(dir.path()), "--set", "synthesis.lambda=1e-9"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&o.stderr).is_empty());
}

#[test]
fn bad_input_exits_1() {
    assert_eq!(forge(&["synth", "/nonexistent/campaign.json"]).status.code(), Some(1));
    let cfg = campaign("linear_k020.json");
    let o = forge(&["synth", cfg.to_str().unwrap(), "--set", "synthesis.no_such_key=3"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(forge(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn overwhelming_force_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = campaign("linear_k020.json");
    let cfg = cfg.to_str().unwrap();
    let out = out_arg(dir.path());
    assert!(forge(&["synth", cfg, "--set", &out]).status.success());
    let res = dir.path().join("linear_k020/synthesis.json");
    let o = forge(&[
        "sim",
        cfg,
        "--result",
        res.to_str().unwrap(),
        "--set",
        &out,
        "--set",
        "simulation.signal={\"kind\":\"constant\",\"value\":50}",
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("last sample"));
}
