use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tcvolterra"))
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn run(args: &[&str], config: &Path, out: &Path) -> Output {
    bin()
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .arg("--quiet")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(|v| v.parse::<f64>().unwrap()).collect())
        .collect();
    (header, rows)
}

const SIMULATE: &str = r#"
[grid]
horizon = 1.0
steps = 16

[rates.gauss]
kind = "mean_reverting_sqrt"
initial = 1.0
speed = 2.0
mean = 1.0
vol = 0.5

[rates.jump]
kind = "constant"
level = 0.5

[marks]
z = [-0.5, 0.5]
weights = [0.5, 0.5]

[ensemble]
paths = 2000
seed = 3
"#;

#[test]
fn simulate_writes_artifacts_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SIMULATE);
    let out = dir.path().join("out");
    let o = run(&["simulate"], &cfg, &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["moments.csv", "pairs.csv", "summary.json", "manifest.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "simulate");
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["n_paths"], 2000);
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    let files: Vec<&str> = manifest["files"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert_eq!(files, ["manifest.json", "moments.csv", "pairs.csv", "summary.json"]);
}

#[test]
fn overrides_reach_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SIMULATE);
    let out = dir.path().join("out");
    let o = bin()
        .args(["simulate", "--seed", "9", "--paths", "1500", "--quiet", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(o.status.success());
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 9);
    assert_eq!(manifest["n_paths"], 1500);
}

#[test]
fn deterministic_harvest_matches_scalar_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = run(&["harvest"], &fixture("harvest_deterministic.toml"), &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (header, scan) = read_csv(&out.join("scan.csv"));
    assert_eq!(header, ["u", "J", "se", "gap", "gap_se"]);
    let (_, oracle) = read_csv(&fixture("harvest_oracle.csv"));
    assert_eq!(scan.len(), oracle.len());
    // growth 0.9, K = 1, x0 = 1, δ = 0.2, T = 2, 200 steps; left-point quadrature of
    // f(t) = u e^{−δT} e^{a t} errs by at most ½ Δt T |a| sup f
    let (c, k, delta, horizon, dt) = (0.9, 1.0, 0.2, 2.0, 0.01);
    for (row, want) in scan.iter().zip(&oracle) {
        let (u, j) = (row[0], row[1]);
        assert!((u - want[0]).abs() < 1e-12);
        let a: f64 = delta + c - k * u;
        let sup_f = u * (-delta * horizon as f64).exp() * (a * horizon).exp().max(1.0);
        let bound = 1e-8 + 0.5 * dt * horizon * a.abs() * sup_f;
        assert!((j - want[1]).abs() <= bound, "u = {u}: {j} vs {}", want[1]);
        assert!(row[2] < 1e-12, "σ = 0 must give no spread");
    }
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let best = oracle.iter().map(|r| r[1]).fold(f64::NEG_INFINITY, f64::max);
    assert!(summary["j_candidate"].as_f64().unwrap() >= best - 1e-3);
}

#[test]
fn negative_catchability_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(fixture("harvest_deterministic.toml")).unwrap().replace("catchability = 1.0", "catchability = -1.0");
    let cfg = write_config(dir.path(), &text);
    let o = run(&["harvest"], &cfg, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("catchability"));
}

#[test]
fn unknown_field_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{SIMULATE}\n[output]\ndir = \"x\"\ncolour = 1\n"));
    let o = run(&["simulate"], &cfg, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("colour"));
}

#[test]
fn wrong_model_for_command_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["check-mp"], &fixture("harvest_deterministic.toml"), &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SIMULATE);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(run(&["simulate"], &cfg, &a).status.success());
    assert!(run(&["simulate"], &cfg, &b).status.success());
    for f in ["moments.csv", "pairs.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}
