use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_miv-att"));
    c.env_remove("MIV_ATT_WORKERS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

/// Every (a, z) cell has an even count and untreated outcomes are constant
/// within each arm, so both stratified training folds see the same means.
const HAND_CSV: &str = "y,a,z,x1
3,1,1,0.1
5,1,1,0.7
2,1,1,0.3
6,1,1,0.9
4,0,1,0.2
4,0,1,0.6
6,1,0,0.5
8,1,0,0.8
1,0,0,0.4
1,0,0,0.15
1,0,0,0.35
1,0,0,0.95
";

/// Intercept-only nuisances with two stratified folds, so every training
/// fold sees the same cell counts and the Wald plug-in is hand-computable.
const HAND_CONFIG: &str = r#"{
  "estimators": ["wald", "eif"],
  "run": {
    "k": 2, "repeats": 1, "stratified": true,
    "learners": {
      "propensity": {"kind": "glm", "lambda": 0.0, "basis": "intercept"},
      "instrument": {"kind": "glm", "lambda": 0.0, "basis": "intercept"},
      "outcome": {"kind": "glm", "lambda": 0.0, "basis": "intercept"}
    }
  }
}"#;

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn hand_crafted_wald() {
    let dir = TempDir::new().unwrap();
    let data = write(dir.path(), "d.csv", HAND_CSV);
    let cfg = write(dir.path(), "c.json", HAND_CONFIG);
    let out = dir.path().join("r.json");
    let o = run(&[
        "estimate",
        "--data",
        data.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = json(&out);
    assert_eq!(r["estimator"], "wald");
    // p̂₁ = 2/3, p̂₀ = 1/3, ê₁ = 4/3, ê₀ = 2/3, so δ = 2 everywhere.
    // ψ = mean(A (Y + 2)) / P(A) = (42 / 12) / 0.5 = 7.
    let psi = r["psi_hat"].as_f64().unwrap();
    assert!((psi - 7.0).abs() < 1e-6, "psi = {psi}");
    let ci = r["ci"].as_array().unwrap();
    assert!(ci[0].as_f64().unwrap() <= psi && psi <= ci[1].as_f64().unwrap());
    let rows = r["baselines"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["estimator"], "wald");
    assert_eq!(rows[1]["estimator"], "eif");
}

#[test]
fn missing_column_exits_2() {
    let dir = TempDir::new().unwrap();
    let data = write(dir.path(), "d.csv", "y,a,x1\n1,0,2\n2,1,3\n");
    let o = run(&["estimate", "--data", data.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("'z'"), "{}", stderr(&o));
}

#[test]
fn invalid_codes_exit_2() {
    let dir = TempDir::new().unwrap();
    let data = write(dir.path(), "d.csv", "y,a,z\n1,0,1\n2,2,0\n");
    let o = run(&["estimate", "--data", data.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("non-binary treatment (row 1)"), "{}", stderr(&o));
}

#[test]
fn unknown_estimator_exits_2() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        dir.path(),
        "c.json",
        r#"{"simulate": {"scenarios": [{"n": 300, "replicates": 2, "estimators": ["lasso"]}]}}"#,
    );
    let o = run(&["simulate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("lasso"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "c.json", r#"{"run": {"kfolds": 3}}"#);
    let o = run(&["generate", "--n", "5", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn estimation_failure_exits_3() {
    // Z carries no information about A: the instrument is flat everywhere.
    let mut text = String::from("y,a,z\n");
    for i in 0..40 {
        text.push_str(&format!("{},{},{}\n", i % 5, i % 2, (i / 2) % 2));
    }
    let dir = TempDir::new().unwrap();
    let data = write(dir.path(), "d.csv", &text);
    let cfg = write(
        dir.path(),
        "c.json",
        r#"{"estimators": ["tsls"]}"#,
    );
    let o = run(&["estimate", "--data", data.to_str().unwrap(), "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn generate_dgp4_shape() {
    let o = run(&["generate", "--n", "100", "--seed", "9"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "y,a,z,x1,x2");
    assert_eq!(lines.len(), 101);
    for l in &lines[1..] {
        let f: Vec<&str> = l.split(',').collect();
        assert!(f[1] == "0" || f[1] == "1");
        assert!(f[2] == "0" || f[2] == "1");
    }
}

#[test]
fn generate_then_estimate_round_trip() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("g.csv");
    let cfg = write(
        dir.path(),
        "c.json",
        r#"{"generate": {"dgp": {"kind": "glim", "variant": "multiplicative", "g": [0.5, 1.0], "u_range": [0.25, 1.0]}, "n": 1000},
            "run": {"repeats": 1, "learners": {"propensity": {"kind": "glm"}, "instrument": {"kind": "glm"}, "outcome": {"kind": "glm"}}}}"#,
    );
    let o = run(&["generate", "--config", cfg.to_str().unwrap(), "--out", data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("r.json");
    let o = run(&[
        "estimate",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = json(&out);
    assert_eq!(r["n"], 1000);
    assert_eq!(r["baselines"].as_array().unwrap().len(), 4);
}

#[test]
fn simulate_summary_columns() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        dir.path(),
        "c.json",
        r#"{"seed": 1, "simulate": {"scenarios": [{"n": 300, "replicates": 5, "estimators": ["eif_fw", "wald"],
            "config": {"repeats": 1, "stratified": true}}]}}"#,
    );
    let out = dir.path().join("s.csv");
    let o = run(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "estimator,N,replicates,bias,ase,ese,coverage,failures");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("eif_fw,300,5,"));
    assert!(lines[2].starts_with("wald,300,5,"));
}

#[test]
fn workers_env_fallback() {
    let o = bin().args(["generate", "--n", "10"]).env("MIV_ATT_WORKERS", "2").output().unwrap();
    assert!(o.status.success());
    let o = bin().args(["generate", "--n", "10"]).env("MIV_ATT_WORKERS", "two").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}
