//! The command-line binary end to end: files, summaries and exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn preset(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(format!("{name}.ini"))
}

fn run(scenario: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tunnelshock"))
        .arg("--scenario")
        .arg(scenario)
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .unwrap()
}

fn table(dir: &Path, name: &str) -> (Vec<String>, Vec<Vec<String>>) {
    let text = std::fs::read_to_string(dir.join(name)).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    (header, rows)
}

fn column(header: &[String], name: &str) -> usize {
    header.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"))
}

#[test]
fn evolve_writes_the_rarefaction_density() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&preset("rarefaction"), dir.path(), &["evolve"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (h, rows) = table(dir.path(), "density.csv");
    let (t, r) = (column(&h, "t"), column(&h, "R"));
    let at_one: Vec<f64> = rows
        .iter()
        .filter(|row| row[t].parse::<f64>().unwrap() == 1.0)
        .map(|row| row[r].parse().unwrap())
        .collect();
    assert_eq!(at_one.len(), 81);
    assert!(at_one.iter().all(|r| (r - 0.5).abs() <= 1e-6));
    for name in ["fan.csv", "essential.csv", "masses.csv", "manifest.txt"] {
        assert!(dir.path().join(name).exists(), "{name} missing");
    }
}

#[test]
fn singularity_summary_reports_the_focal_time() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&preset("tanh"), dir.path(), &["singularity"]);
    assert!(out.status.success());
    let (h, rows) = table(dir.path(), "singularity.csv");
    let t: f64 = rows[0][column(&h, "t_star")].parse().unwrap();
    let x: f64 = rows[0][column(&h, "x_star")].parse().unwrap();
    assert!((t - 1.0).abs() <= 1e-3 && x.abs() <= 1e-3, "t* = {t}, x* = {x}");
}

#[test]
fn manifest_records_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&preset("merge"), dir.path(), &["--seed", "42", "shock"]);
    assert!(out.status.success());
    let m = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
    assert!(m.contains("subcommand = shock") && m.contains("seed = 42"), "{m}");
    for name in ["shocks.csv", "amplitudes.csv", "merges.csv"] {
        assert!(m.contains(&format!("file = {name}")), "{m}");
    }
    assert!(m.contains("x0_points = 4801"));
    let (h, rows) = table(dir.path(), "merges.csv");
    assert_eq!(rows.len(), 1);
    let e = |c: &str| rows[0][column(&h, c)].parse::<f64>().unwrap();
    assert!((e("e_child") - e("e_left") - e("e_right")).abs() <= 1e-3 * e("e_child"));
}

#[test]
fn oracle_subcommands_run() {
    let cases = [
        ("tanh", "hopf-lax", "hopf_lax.csv"),
        ("riemann", "godunov", "godunov_summary.csv"),
        ("gaussian", "kf-lattice", "lattice.csv"),
        ("quadratic", "tunnel-compare", "tunnel.csv"),
    ];
    for (scenario, kind, file) in cases {
        let dir = tempfile::tempdir().unwrap();
        let out = run(&preset(scenario), dir.path(), &["oracle", kind]);
        assert!(out.status.success(), "{kind}: {}", String::from_utf8_lossy(&out.stderr));
        let (_, rows) = table(dir.path(), file);
        assert!(!rows.is_empty(), "{kind}: empty {file}");
    }
}

#[test]
fn malformed_expression_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(preset("rarefaction")).unwrap().replace("p0 = x", "p0 = x+");
    let bad = dir.path().join("bad.ini");
    std::fs::write(&bad, text).unwrap();
    let out = run(&bad, &dir.path().join("out"), &["evolve"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("p0") && err.contains("offset 2"), "{err}");
    assert!(!dir.path().join("out").exists());
}

#[test]
fn usage_and_missing_input_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&preset("tanh"), dir.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(64));
    let out = run(&dir.path().join("absent.ini"), dir.path(), &["evolve"]);
    assert_eq!(out.status.code(), Some(66));
    let no_scenario = Command::new(env!("CARGO_BIN_EXE_tunnelshock")).arg("evolve").output().unwrap();
    assert_eq!(no_scenario.status.code(), Some(64));
}

#[test]
fn limit_study_writes_schedule_and_surgery() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&preset("tanh"), dir.path(), &["limit-study"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (h, rows) = table(dir.path(), "limit.csv");
    assert_eq!(rows.len(), 3);
    let r: Vec<f64> = rows.iter().map(|row| row[column(&h, "sup_R_error")].parse().unwrap()).collect();
    assert!(r.windows(2).all(|w| w[1] < w[0]), "{r:?}");
    let (h, rows) = table(dir.path(), "surgery.csv");
    assert!(!rows.is_empty());
    for row in &rows {
        let g: f64 = row[column(&h, "gap_over_beta")].parse().unwrap();
        assert!((0.1..=10.0).contains(&g));
    }
}
