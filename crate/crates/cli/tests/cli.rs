//! End-to-end runs of the `riesz-dml` binary on the shipped samples.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn samples() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../samples")
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_riesz-dml")).args(args).output().expect("binary runs")
}

fn sample(name: &str) -> String {
    samples().join(name).to_str().unwrap().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

/// Writes `text` as a config next to the shipped data so relative paths
/// resolve, returning its path.
fn config_in(dir: &tempfile::TempDir, name: &str, text: &str) -> String {
    for f in ["sample.csv", "population.csv"] {
        let target = dir.path().join(f);
        if !target.exists() {
            std::fs::copy(samples().join(f), target).unwrap();
        }
    }
    let p = dir.path().join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn shipped_config(name: &str) -> String {
    std::fs::read_to_string(samples().join(name)).unwrap()
}

#[test]
fn estimate_matches_golden_files() {
    for (cfg, golden) in [
        ("estimate.toml", "golden/estimate.json"),
        ("att.toml", "golden/estimate_att.json"),
        ("ate_ds.toml", "golden/estimate_ate_ds.json"),
    ] {
        let o = run(&["estimate", "--config", &sample(cfg)]);
        assert_eq!(o.status.code(), Some(0), "{cfg}: {}", stderr(&o));
        assert_eq!(stdout(&o), std::fs::read_to_string(samples().join(golden)).unwrap(), "{cfg}");
    }
}

#[test]
fn tune_matches_golden_file_and_is_deterministic() {
    let a = run(&["tune", "--config", &sample("estimate.toml")]);
    let b = run(&["tune", "--config", &sample("estimate.toml")]);
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    assert_eq!(stdout(&a), stdout(&b));
    assert_eq!(stdout(&a), std::fs::read_to_string(samples().join("golden/tune.json")).unwrap());
}

#[test]
fn tuned_levels_agree_with_estimate() {
    let tune: serde_json::Value = serde_json::from_str(&stdout(&run(&["tune", "--config", &sample("estimate.toml")]))).unwrap();
    let est: serde_json::Value = serde_json::from_str(&stdout(&run(&["estimate", "--config", &sample("estimate.toml")]))).unwrap();
    assert_eq!(tune["lambda_gamma"], est["lambda_gamma"]);
    assert_eq!(tune["lambda_alpha"], est["lambda_alpha"]);
}

#[test]
fn singleton_grid_is_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let text = shipped_config("estimate.toml").replace(
        "grid_min = 1e-6\ngrid_max = 1e2\ngrid_points = 10",
        "grid = [0.00123]",
    );
    let o = run(&["tune", "--config", &config_in(&dir, "c.toml", &text)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["lambda_gamma"], 0.00123);
    assert_eq!(v["lambda_alpha"], 0.00123);
}

#[test]
fn json_numbers_round_trip() {
    let text = std::fs::read_to_string(samples().join("golden/tune.json")).unwrap();
    serde_json::from_str::<serde_json::Value>(&text).unwrap();
    // Every number token must be the shortest representation of its value,
    // so parsing and re-printing reproduces it exactly.
    let tokens: Vec<&str> = text
        .split(|c: char| !(c.is_ascii_digit() || matches!(c, '.' | '-' | 'e' | '+')))
        .filter(|t| t.chars().any(|c| c.is_ascii_digit()))
        .collect();
    assert!(tokens.len() > 20);
    for t in tokens {
        if !t.contains(['.', 'e']) {
            t.parse::<u64>().expect("integer field");
            continue;
        }
        let v: f64 = t.parse().unwrap();
        assert_eq!(serde_json::to_string(&v).unwrap(), t);
        assert_eq!(format!("{v:.11e}").parse::<f64>().unwrap(), v, "{t} has more than 12 significant digits");
    }
}

#[test]
fn missing_column_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = shipped_config("estimate.toml").replace("\"x5\"", "\"x7\"");
    let o = run(&["estimate", "--config", &config_in(&dir, "c.toml", &text)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("\"x7\""), "{}", stderr(&o));
}

#[test]
fn bad_level_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = shipped_config("estimate.toml").replace("level = 0.95", "level = 1.5");
    let o = run(&["estimate", "--config", &config_in(&dir, "c.toml", &text)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("dml.level"), "{}", stderr(&o));
}

#[test]
fn malformed_data_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_in(&dir, "c.toml", &shipped_config("estimate.toml"));
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "y,d,x1,x2,x3,x4,x5\n1,0,0,0,0,0,oops\n").unwrap();
    let o = run(&["estimate", "--config", &cfg, "--data", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("\"x5\""), "{}", stderr(&o));
}

#[test]
fn output_does_not_depend_on_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let text = shipped_config("estimate.toml").replace("threads = 0", "threads = 2");
    let o = run(&["estimate", "--config", &config_in(&dir, "c.toml", &text)]);
    assert_eq!(stdout(&o), std::fs::read_to_string(samples().join("golden/estimate.json")).unwrap());
}

#[test]
fn fixed_lambdas_skip_tuning() {
    let dir = tempfile::tempdir().unwrap();
    let text = shipped_config("estimate.toml")
        .replace("lambda_gamma = \"cv\"", "lambda_gamma = 0.001")
        .replace("lambda_alpha = \"cv\"", "lambda_alpha = [0.01, 0.01, 0.02, 0.02, 0.03]");
    let o = run(&["estimate", "--config", &config_in(&dir, "c.toml", &text)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["lambda_gamma"], 0.001);
    assert_eq!(v["lambda_alpha"], serde_json::json!([0.01, 0.01, 0.02, 0.02, 0.03]));
}

#[test]
fn simulate_smoke_run_is_fast_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    let start = std::time::Instant::now();
    let o = run(&["simulate", "--config", &sample("simulate.toml"), "--out", a.to_str().unwrap()]);
    assert!(start.elapsed().as_secs_f64() < 10.0);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    run(&["simulate", "--config", &sample("simulate.toml"), "--out", b.to_str().unwrap()]);
    let (ta, tb) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(!ta.is_empty());
    assert_eq!(ta, tb);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(v["coverage"] == 0.0 || v["coverage"] == 1.0);
}

#[test]
fn unknown_process_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = shipped_config("simulate.toml").replace("binary_ate", "probit");
    let out = dir.path().join("o.csv");
    let o = run(&["simulate", "--config", &config_in(&dir, "s.toml", &text), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("simulate.dgp"), "{}", stderr(&o));
}

#[test]
fn verify_passes_standalone_and_detects_perturbation() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_riesz-dml")).arg("verify").current_dir(dir.path()).output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("0 failed"));
    let p = run(&["verify", "--perturb", "1e-3"]);
    assert_eq!(p.status.code(), Some(1));
    assert!(stdout(&p).contains("FAIL"));
}
