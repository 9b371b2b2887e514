use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CONFIG: &str = include_str!("../data/ieee12.cfg");
const SCENARIO: &str = include_str!("../data/ieee12_scenario.toml");

fn mgsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mgsim")).args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_config_is_a_usage_error() {
    let o = mgsim(&["oracle", "--config", "/nonexistent/grid.cfg"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/grid.cfg"), "{}", stderr(&o));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(mgsim(&["run", "--bogus"]).status.code(), Some(2));
    assert_eq!(mgsim(&["--help"]).status.code(), Some(0));
}

#[test]
fn negative_inertia_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.cfg", &CONFIG.replacen("M = 26.1", "M = -26.1", 1));
    let o = mgsim(&["oracle", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("bad.cfg"));
}

#[test]
fn oracle_writes_every_level() {
    let dir = tempfile::tempdir().unwrap();
    let o = mgsim(&["oracle", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let kkt = fs::read_to_string(dir.path().join("kkt.csv")).unwrap();
    let mut levels: Vec<&str> = kkt.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    levels.dedup();
    assert_eq!(levels.len(), 9);
}

#[test]
fn infeasible_cap_is_a_solver_error() {
    let dir = tempfile::tempdir().unwrap();
    let sc = write(dir.path(), "tight.toml", &SCENARIO.replacen("p_max = 0.6", "p_max = 0.05", 1));
    let o = mgsim(&["oracle", "--scenario", sc.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn coarse_step_is_rejected() {
    let o = mgsim(&["run", "--dt", "0.5", "--horizon", "1", "--out", "/tmp/unused"]);
    assert_eq!(o.status.code(), Some(2));
}

fn short_run(out: &Path) -> Output {
    mgsim(&["run", "--horizon", "300", "--dt", "0.002", "--record", "1", "--no-plots", "--out", out.to_str().unwrap()])
}

#[test]
fn short_run_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = short_run(dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let traj = fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    let header = traj.lines().next().unwrap();
    assert!(header.starts_with("t,omega_1,"));
    assert!(header.ends_with(",Phi,V_lyap"));
    assert_eq!(traj.lines().count(), 1 + 301);
    // One event inside the horizon gives two windows.
    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 2);
    assert!(!dir.path().join("plots").exists());
}

#[test]
fn output_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_eq!(short_run(a.path()).status.code(), Some(0));
    assert_eq!(short_run(b.path()).status.code(), Some(0));
    for f in ["trajectory.csv", "metrics.csv"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn analysis_and_plots() {
    let dir = tempfile::tempdir().unwrap();
    let o = mgsim(&["run", "--horizon", "50", "--record", "1", "--analysis", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["conditions.csv", "lyapunov.csv", "plots/frequency.svg", "plots/voltage.dat"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
}

#[test]
fn quick_check_passes() {
    let o = mgsim(&["check", "--quick", "--halving-horizon", "5"]);
    assert_eq!(o.status.code(), Some(0), "{}\n{}", String::from_utf8_lossy(&o.stdout), stderr(&o));
}
