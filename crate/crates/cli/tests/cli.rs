use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_laa-sim"))
}

fn shipped_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/paper_defaults.toml")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn validate_shipped_config() {
    let out = run(&["validate", "--config", shipped_config().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(stdout(&out).trim(), "valid");
}

#[test]
fn missing_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["run", "--config", "/definitely/not/here.toml", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cannot read"));
}

#[test]
fn invalid_config_exits_one_with_report() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "[network]\nunlicensed_power_cap_dbm = 50\n").unwrap();
    let out = run(&["validate", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("P_u > P_total"));
}

#[test]
fn sweep_writes_one_row_per_v() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["sweep", "--V", "5,10,20,40", "--slots", "5", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(dir.path().join("tradeoff.csv")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 5);
    assert!(rows[0].starts_with("V,avg_power,avg_delay"));
    let series = std::fs::read_to_string(dir.path().join("series.csv")).unwrap();
    assert_eq!(series.lines().count(), 1 + 4 * 5);
    assert!(dir.path().join("tradeoff.json").exists());
}

#[test]
fn outputs_are_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        let out = run(&["run", "--policy", "proposed:5", "--slots", "6", "--seed", "9", "--per-user", "--out", dir.path().to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0));
    }
    for name in ["series.csv", "run.json"] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert_eq!(x, y, "{name} differs");
    }
}

#[test]
fn seed_changes_the_stream() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for (dir, seed) in [(&a, "1"), (&b, "2")] {
        run(&["run", "--policy", "zero", "--slots", "5", "--seed", seed, "--out", dir.path().to_str().unwrap()]);
    }
    let x = std::fs::read(a.path().join("series.csv")).unwrap();
    let y = std::fs::read(b.path().join("series.csv")).unwrap();
    assert_ne!(x, y);
}

#[test]
fn csma_table_rows() {
    let out = run(&["csma-table", "--n-max", "4"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "N,tau_w,tau_l,p_w,p_l,P_suc");
    assert_eq!(lines.len(), 6);
    // No contenders: the SBS wins every attempt, P_suc = tau_l.
    let first: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(first[2], first[5]);
}

#[test]
fn unknown_policy_is_rejected() {
    let out = run(&["run", "--policy", "greedy", "--slots", "1"]);
    assert_ne!(out.status.code(), Some(0));
}
