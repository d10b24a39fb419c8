//! End-to-end smoke tests for the binary: exit codes, artifacts, stdout
//! shape. Uses a small step count so the whole file stays fast.

use std::path::PathBuf;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_steadystate"))
}

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("steadystate-cli-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn small_ou_config() -> serde_json::Value {
    serde_json::json!({
        "model": {"kind": "ou", "a": 1.0, "sigma": 1.4142135623730951, "d": 1},
        "scheme": "euler",
        "schedule": {"kind": "power", "gamma1": 0.5, "theta": 0.3333333333333333,
                     "weights": {"kind": "gamma"}},
        "functionals": ["m1", "m2"],
        "lyapunov": {"v": "quadratic", "p": 2.0, "a": 1.0, "s": 2.0,
                     "alpha": 1.0, "beta": 24.0, "growth_c": 2.5},
        "run": {"n_steps": 20000, "seed": 9, "reservoir_capacity": 4096},
        "oracle": {"kind": "ou"},
        "tolerances": {"m1": 0.2, "m2_rel": 0.2, "w1": 0.2, "occupation": 0.05,
                       "residual_rel": 0.5, "tightness": 0.5}
    })
}

#[test]
fn run_produces_artifacts_and_exits_zero() {
    let dir = temp_dir("run");
    let cfg = dir.join("cfg.json");
    std::fs::write(&cfg, small_ou_config().to_string()).unwrap();

    let out = bin().arg("run").arg(&cfg).arg("--out-dir").arg(dir.join("out")).output().unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));

    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("out/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["n_steps"], 20000);
    assert!(summary["clauses"].as_array().unwrap().iter().any(|c| c["name"] == "m2"));
    for file in ["functionals.csv", "reservoir.csv", "checks.json"] {
        assert!(dir.join("out").join(file).exists(), "{file} missing");
    }
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("m2:"), "stdout: {stdout}");
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn seed_override_changes_summary() {
    let dir = temp_dir("seed");
    let cfg = dir.join("cfg.json");
    std::fs::write(&cfg, small_ou_config().to_string()).unwrap();

    let run = |seed: &str, sub: &str| {
        let out = bin().arg("run").arg(&cfg).arg("--seed").arg(seed).arg("--out-dir").arg(dir.join(sub)).output().unwrap();
        assert!(out.status.success());
        std::fs::read(dir.join(sub).join("summary.json")).unwrap()
    };
    let a = run("9", "a");
    let b = run("9", "b");
    let c = run("10", "c");
    assert_eq!(a, b, "same seed must give byte-identical summaries");
    assert_ne!(a, c, "different seed must change the summary");
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn invalid_theta_fails_with_field_path() {
    let dir = temp_dir("badtheta");
    let cfg = dir.join("cfg.json");
    let mut doc = small_ou_config();
    doc["schedule"]["theta"] = serde_json::json!(1.5);
    std::fs::write(&cfg, doc.to_string()).unwrap();

    let out = bin().arg("run").arg(&cfg).output().unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("schedule.theta"), "stderr: {stderr}");
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn check_prints_verdicts() {
    let dir = temp_dir("check");
    let cfg = dir.join("cfg.json");
    std::fs::write(&cfg, small_ou_config().to_string()).unwrap();

    let out = bin().arg("check").arg(&cfg).output().unwrap();
    assert!(out.status.success());
    let doc: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(doc["sw1"]["verdict"], "admissible");
    assert_eq!(doc["pass"], true);
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn simulate_writes_trace() {
    let dir = temp_dir("trace");
    let cfg = dir.join("cfg.json");
    std::fs::write(&cfg, small_ou_config().to_string()).unwrap();

    let out = bin()
        .arg("simulate")
        .arg(&cfg)
        .arg("--out-dir")
        .arg(dir.join("out"))
        .arg("--trace-every")
        .arg("5000")
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let trace = std::fs::read_to_string(dir.join("out/trace.csv")).unwrap();
    let mut lines = trace.lines();
    assert_eq!(lines.next(), Some("n,Gamma_n,X_1,zeta"));
    // 1, 5000, 10000, 15000, 20000
    assert_eq!(lines.count(), 5);
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn oracle_prints_moments() {
    let dir = temp_dir("oracle");
    let cfg = dir.join("cfg.json");
    std::fs::write(&cfg, small_ou_config().to_string()).unwrap();

    let out = bin().arg("oracle").arg(&cfg).output().unwrap();
    assert!(out.status.success());
    let doc: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let m2 = doc["m2"].as_f64().unwrap();
    assert!((m2 - 1.0).abs() < 1e-12, "m2 = {m2}");
}
