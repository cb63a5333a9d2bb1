use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;

const S0_CONFIG: &str = "S = [0]\nK_normal = 8\nL_angle = 6\neps = 1e-4\ngamma = 0.1\ntau = 3\nomega = [0.6]\n\n[tolerances]\ndelta2 = 2.0\n";

fn kamtor() -> Command {
    Command::new(env!("CARGO_BIN_EXE_kamtor"))
}

fn setup(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, body).unwrap();
    p
}

fn run(dir: &Path, args: &[&str]) -> (i32, String) {
    let out = kamtor().current_dir(dir).args(args).output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn json(path: PathBuf) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn solve_unperturbed_writes_single_zero_row() {
    let d = tempfile::tempdir().unwrap();
    setup(d.path(), &S0_CONFIG.replace("eps = 1e-4", "eps = 0.0"));
    let (code, err) = run(d.path(), &["solve", "--config", "run.toml", "--out", "out"]);
    assert_eq!(code, 0, "{err}");
    let mut rdr = csv::Reader::from_path(d.path().join("out/residuals.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 1);
    let col = headers.iter().position(|h| h == "residual").unwrap();
    // zero up to the rounding of xi(omega)
    assert!(rows[0][col].parse::<f64>().unwrap() <= 1e-14);
    let rep = json(d.path().join("out/solve.json"));
    assert_eq!(rep["status"], "converged");
    assert_eq!(rep["schema_version"], 1);
    assert_eq!(rep["config"]["tau"], 3.0);
}

#[test]
fn solve_converges_and_is_reproducible() {
    let d = tempfile::tempdir().unwrap();
    setup(d.path(), S0_CONFIG);
    for out in ["a", "b"] {
        let (code, err) = run(d.path(), &["solve", "--config", "run.toml", "--out", out]);
        assert_eq!(code, 0, "{err}");
    }
    let a = fs::read(d.path().join("a/solve.json")).unwrap();
    let b = fs::read(d.path().join("b/solve.json")).unwrap();
    assert_eq!(a, b);
    assert_eq!(fs::read(d.path().join("a/residuals.csv")).unwrap(), fs::read(d.path().join("b/residuals.csv")).unwrap());
    let rep = json(d.path().join("a/solve.json"));
    assert!(rep["result"]["final_residual"].as_f64().unwrap() <= 1e-10);
}

#[test]
fn resonant_omega_exits_with_two_and_witness() {
    let d = tempfile::tempdir().unwrap();
    setup(d.path(), S0_CONFIG);
    // 6 omega equals the first normal frequency
    let om = format!("{}", std::f64::consts::PI.powi(2));
    let (code, err) = run(d.path(), &["solve", "--config", "run.toml", "--out", "out", "--omega", &om]);
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("not in the admissible set"));
    let rep = json(d.path().join("out/solve.json"));
    assert_eq!(rep["status"], "excluded");
    assert_eq!(rep["result"]["witness"]["ell"], serde_json::json!([-6]));
    assert_eq!(rep["config"]["omega"][0].as_f64().unwrap(), std::f64::consts::PI.powi(2));
}

#[test]
fn operational_errors_exit_with_one() {
    let d = tempfile::tempdir().unwrap();
    setup(d.path(), &S0_CONFIG.replace("eps = 1e-4\n", ""));
    let (code, err) = run(d.path(), &["solve", "--config", "run.toml"]);
    assert_eq!(code, 1);
    assert!(err.contains("eps"), "{err}");
    let (code, _) = run(d.path(), &["solve", "--config", "missing.toml"]);
    assert_eq!(code, 1);
    setup(d.path(), S0_CONFIG);
    let (code, err) = run(d.path(), &["solve", "--config", "run.toml", "--omega", "-1.0"]);
    assert_eq!(code, 1, "{err}");
    let (code, _) = run(d.path(), &["solve", "--config", "run.toml", "--sweep", "delta=1:2:3"]);
    assert_eq!(code, 1);
}

#[test]
fn measure_sweep_is_monotone() {
    let d = tempfile::tempdir().unwrap();
    let cfg = "S = [-1, 0, 1]\nK_normal = 6\nL_angle = 4\neps = 1e-5\ngamma = 1e-2\nxi = [1.0, 1.0, 1.0]\ntau = 3\n\n[measure]\nn_samples = 1024\n";
    setup(d.path(), cfg);
    let (code, err) =
        run(d.path(), &["measure", "--config", "run.toml", "--out", "m", "--sweep", "gamma=1e-3:1e-1:5", "--seed", "11", "--threads", "1"]);
    assert_eq!(code, 0, "{err}");
    let mut rdr = csv::Reader::from_path(d.path().join("m/measure.csv")).unwrap();
    let mut by_cond: std::collections::BTreeMap<String, Vec<(f64, f64)>> = Default::default();
    for r in rdr.records() {
        let r = r.unwrap();
        by_cond.entry(r[2].to_string()).or_default().push((r[0].parse().unwrap(), r[5].parse().unwrap()));
    }
    assert!(by_cond.contains_key("total") && by_cond.contains_key("diophantine"));
    for (cond, mut v) in by_cond {
        assert_eq!(v.len(), 5);
        v.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        assert!(v.windows(2).all(|w| w[0].1 <= w[1].1), "{cond}: {v:?}");
    }
    let rep = json(d.path().join("m/measure.json"));
    assert_eq!(rep["config"]["seed"], 11);
    assert!(rep["result"]["scaling_fits"]["diophantine"].is_number());
}

#[test]
fn reduce_and_stability_write_artifacts() {
    let d = tempfile::tempdir().unwrap();
    let cfg = format!("{S0_CONFIG}\n[stability]\nhorizons = [10.0, 20.0]\nn_samples = 2\nn_times = 100\n");
    setup(d.path(), &cfg);
    let (code, err) = run(d.path(), &["reduce", "--config", "run.toml", "--out", "r"]);
    assert_eq!(code, 0, "{err}");
    let rep = json(d.path().join("r/reduce.json"));
    assert!(rep["result"]["selfadjoint_defect"].as_f64().unwrap() <= 1e-10);
    assert!(fs::read_to_string(d.path().join("r/eigenvalues.csv")).unwrap().starts_with("site,lambda_minus,lambda_plus"));
    let (code, err) = run(d.path(), &["stability", "--config", "run.toml", "--out", "s"]);
    assert_eq!(code, 0, "{err}");
    let rep = json(d.path().join("s/stability.json"));
    let reports = rep["result"]["reports"].as_array().unwrap();
    assert_eq!(reports.len(), 2);
    for r in reports {
        assert_eq!(r["upsilon_drift"].as_f64().unwrap(), 0.0);
        assert!(r["sup_ratio"].as_f64().unwrap() <= r["frame_bound"].as_f64().unwrap());
    }
}

#[test]
fn eps_sweep_reports_linear_size() {
    let d = tempfile::tempdir().unwrap();
    setup(d.path(), S0_CONFIG);
    let (code, err) = run(d.path(), &["solve", "--config", "run.toml", "--out", "w", "--sweep", "eps=1e-6:1e-4:3"]);
    assert_eq!(code, 0, "{err}");
    let rep = json(d.path().join("w/solve.json"));
    let y = rep["result"]["y_slope"].as_f64().unwrap();
    assert!((y - 1.0).abs() < 0.05, "{y}");
}
