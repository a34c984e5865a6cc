use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sweep_cli::output::read_trajectory_csv;
use sweep_core::crowd::{corridor_geometry, CorridorConfig};
use sweep_core::dynamics::{verify_feasibility, PerturbationMap, Sign};
use sweep_core::linalg::Vector;
use tempfile::TempDir;

fn sweep(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sweep")).args(args).env_remove("SWEEP_THREADS").output().expect("binary runs")
}

fn config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/corridor_tau1.toml")
}

fn manifest_files(dir: &Path) -> Vec<String> {
    let text = std::fs::read_to_string(dir.join("manifest.json")).unwrap();
    let json: serde_json::Value = serde_json::from_str(&text).unwrap();
    let mut files: Vec<String> = json["files"].as_array().unwrap().iter().map(|v| v.as_str().unwrap().to_string()).collect();
    files.sort();
    files
}

fn dir_files(dir: &Path) -> Vec<String> {
    let mut files: Vec<String> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    files.sort();
    files
}

#[test]
fn table1_matches_all_rows() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("t1");
    let res = sweep(&["table1", "--out", out.to_str().unwrap(), "--quiet"]);
    assert_eq!(res.status.code(), Some(0));
    let csv = std::fs::read_to_string(out.join("table1.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 10);
    assert!(rows.iter().all(|r| r.ends_with(",true")));
    assert_eq!(manifest_files(&out), dir_files(&out));
}

#[test]
fn missing_config_writes_nothing() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("none");
    let res = sweep(&["simulate", "--config", tmp.path().join("absent.toml").to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn negative_tau_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "[crowd]\nx_dest = 0.0\nx1_init = -48.0\nx2_init = -24.0\nl1 = 3.0\nl2 = 3.0\ntau = -1.0\n").unwrap();
    let out = tmp.path().join("o");
    let res = sweep(&["crowd", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("tau"));
    assert!(!out.exists());
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(sweep(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(sweep(&["table1", "--bogus"]).status.code(), Some(2));
    let res = Command::new(env!("CARGO_BIN_EXE_sweep")).args(["table1", "--quiet"]).env("SWEEP_THREADS", "many").output().unwrap();
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn zero_duals_fail_nontriviality() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("c");
    let cfg = config_path();
    let res = sweep(&["check", "--config", cfg.to_str().unwrap(), "--duals", "zero", "--k", "50", "--out", out.to_str().unwrap(), "--quiet"]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stdout).contains("nontriviality"));
    let csv = std::fs::read_to_string(out.join("residuals.csv")).unwrap();
    assert!(csv.starts_with("condition,residual,tolerance,pass\n"));
    assert!(csv.lines().any(|l| l.starts_with("nontriviality,") && l.ends_with(",false")));
}

#[test]
fn dual_family_passes_check() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("c");
    let cfg = config_path();
    let res = sweep(&["check", "--config", cfg.to_str().unwrap(), "--k", "100", "--out", out.to_str().unwrap(), "--quiet"]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stdout));
}

#[test]
fn crowd_outputs_are_deterministic_and_round_trip() {
    let tmp = TempDir::new().unwrap();
    let cfg = config_path();
    let run = |name: &str| {
        let out = tmp.path().join(name);
        let res = sweep(&["crowd", "--config", cfg.to_str().unwrap(), "--k", "300", "--out", out.to_str().unwrap(), "--quiet"]);
        assert_eq!(res.status.code(), Some(0));
        out
    };
    let (a, b) = (run("a"), run("b"));
    for file in ["trajectory.csv", "positions.csv", "summary.csv"] {
        assert_eq!(std::fs::read(a.join(file)).unwrap(), std::fs::read(b.join(file)).unwrap(), "{file}");
    }
    assert_eq!(manifest_files(&a), dir_files(&a));

    let corridor = CorridorConfig::standard(1.0);
    let set = corridor_geometry(&corridor).unwrap();
    let speeds = Vector::from_vec(vec![48.0 / 1440f64.sqrt(), 24.0 / 1440f64.sqrt()]);
    let f = PerturbationMap::control_scaled(speeds, 1.0);
    let text = std::fs::read_to_string(a.join("trajectory.csv")).unwrap();
    let traj = read_trajectory_csv(&text, &set, &f, Sign::Plus).unwrap();
    assert_eq!(traj.k(), 300);
    let check = verify_feasibility(&set, &traj, 1e-9);
    assert!(check.passes);
    assert_eq!(sweep_cli::output::trajectory_csv(&traj).lines().next(), text.lines().next());
    let reread = read_trajectory_csv(&sweep_cli::output::trajectory_csv(&traj), &set, &f, Sign::Plus).unwrap();
    assert_eq!(reread.states, traj.states);
    assert_eq!(verify_feasibility(&set, &reread, 1e-9), check);
}

#[test]
fn crowd_flags_override_the_configuration() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("c");
    let res = sweep(&["crowd", "--tau", "10", "--k", "100", "--out", out.to_str().unwrap(), "--quiet"]);
    assert_eq!(res.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&res.stdout);
    assert!(stdout.lines().any(|l| l.starts_with("T_opt") && l.contains("12.000000")));
}

const GENERIC: &str = r#"
[run]
k = 40

[problem]
x0 = [0.0, 10.0]
epsilon = 10.0
constraints = [{ kind = "affine", a = [-1.0, 1.0], b = -6.0 }]
constants = { m1 = 1.4, m2 = 1.5, m3 = 0.0, beta = 1.4, rho = 1.0, c = 1e6 }
dynamics = { kind = "control_scaled", speeds = [1.0, 1.0], growth = 1.0 }
terminal = { kind = "progress", target = [20.0, 20.0], tau = 0.5 }

[problem.reference]
times = [0.0, 2.0]
x = [[0.0, 10.0], [2.0, 12.0]]
u = [[0.0, 0.0], [0.0, 0.0]]
a = [[1.0, 1.0]]
mu = 1.0
"#;

#[test]
fn generic_problem_simulates_and_approximates() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("generic.toml");
    std::fs::write(&cfg, GENERIC).unwrap();
    for cmd in ["simulate", "approximate"] {
        let out = tmp.path().join(cmd);
        let res = sweep(&[cmd, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--quiet"]);
        assert_eq!(res.status.code(), Some(0), "{cmd}: {}", String::from_utf8_lossy(&res.stderr));
        assert!(out.join("trajectory.csv").exists());
        assert_eq!(manifest_files(&out), dir_files(&out));
    }
}
