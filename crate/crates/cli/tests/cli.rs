//! Exit codes and output files of the `sdevl` binary.

use std::path::Path;
use std::process::{Command, Output};

fn sdevl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdevl")).args(args).env("SDEVL_THREADS", "2").output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn passing_experiment_exits_zero_and_writes_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "evl.json",
        r#"{"experiment_id": "small-evl", "kind": "evl", "sampling": {"n": 300, "trials": 4000}}"#,
    );
    let out = dir.path().join("out");
    let res = sdevl(&["evl", "--config", &cfg, "--seed", "3", "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stdout));
    let csv = std::fs::read_to_string(out.join("small-evl.csv")).unwrap();
    assert!(csv.starts_with("experiment_id,kind,tau,h,n,trials,p_hat,histogram,stderr,target,pass\n"));
    let result: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("small-evl.result.json")).unwrap()).unwrap();
    assert_eq!(result["config"]["sampling"]["seed"], 3);
    assert!(result["version"].as_str().unwrap().starts_with("sdevl-cli"));

    // same seed, same bytes
    let again = dir.path().join("again");
    sdevl(&["evl", "--config", &cfg, "--seed", "3", "--out", again.to_str().unwrap()]);
    assert_eq!(csv, std::fs::read_to_string(again.join("small-evl.csv")).unwrap());
}

#[test]
fn failing_check_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    // at a grid-resolvable radius the truncated q-sum stays far above 0.1
    let cfg = write(
        dir.path(),
        "kl.json",
        r#"{"experiment_id": "kl", "kind": "kl", "grid": {"m": 256}, "params": {"radii": [0.05]}}"#,
    );
    let res = sdevl(&["kl", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stdout).contains("FAIL q_sum_small"));
    assert!(dir.path().join("kl.spectral.jsonl").exists());
}

#[test]
fn configuration_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(
        dir.path(),
        "bad.json",
        r#"{"experiment_id": "b", "kind": "evl", "model": {"name": "uo"}, "params": {"tau": [-1]}}"#,
    );
    let res = sdevl(&["evl", "--config", &bad]);
    assert_eq!(res.status.code(), Some(2));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("params.tau[0]") && err.contains("available: ou, ou_shift"), "{err}");

    let other = write(dir.path(), "spec.json", r#"{"experiment_id": "s", "kind": "spectrum"}"#);
    assert_eq!(sdevl(&["evl", "--config", &other]).status.code(), Some(2));
    assert_eq!(sdevl(&["evl", "--config", "/nonexistent.json"]).status.code(), Some(2));
    assert_eq!(sdevl(&["evl"]).status.code(), Some(2));
}

#[test]
fn shipped_configs_are_valid() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut count = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            let text = std::fs::read_to_string(&path).unwrap();
            sdevl_cli::parse_config(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            count += 1;
        }
    }
    assert!(count >= 8);
}
