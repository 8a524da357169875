use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dyngam_cli::export::{read_curve_csv, read_dependence_json, read_elbo_trace, read_state_json};
use dyngam_cli::io::read_panel_csv;

fn dyngam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dyngam")).args(args).output().expect("binary runs")
}

fn simulate(dir: &Path, dims: &str, seed: &str) -> String {
    let data = dir.join("data.csv");
    let out = dyngam(&["simulate", "--dims", dims, "--seed", seed, "--out", data.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    data.to_str().unwrap().to_string()
}

#[test]
fn simulate_fit_and_reload_every_export() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "2,2,3,2,4", "4");
    assert_eq!(read_panel_csv(Path::new(&data)).unwrap().dims().n_rows(), 96);
    let out = dir.path().join("fit");
    let run = dyngam(&["fit", &data, "--out", out.to_str().unwrap()]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));

    let trace = read_elbo_trace(&out.join("elbo_trace.csv")).unwrap();
    assert!(trace.len() >= 2);
    let state = read_state_json(&out.join("variational_state.json")).unwrap();
    assert_eq!(state.phi.len(), 4);
    let dep = read_dependence_json(&out.join("dependence.json")).unwrap();
    assert_eq!(dep.adjacency_l.len(), 2);
    let curve = read_curve_csv(&out.join("smooths/r.csv"), "r", None).unwrap();
    assert_eq!(curve.grid.len(), 100);
    for name in ["a", "kr_1", "ka_1", "ga_1"] {
        assert!(out.join(format!("smooths/{name}.csv")).exists(), "{name}");
    }
    let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.contains("converged:"));
}

#[test]
fn same_seed_gives_identical_state_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "2,2,3,2,3", "9");
    let mut files = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let r = dyngam(&["fit", &data, "--seed", "3", "--out", out.to_str().unwrap()]);
        assert!(r.status.success());
        files.push(fs::read(out.join("variational_state.json")).unwrap());
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn unconverged_fit_exits_zero_with_warning() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "2,2,3,2,3", "1");
    let cfg = dir.path().join("fit.cfg");
    fs::write(&cfg, "max_sweeps = 1\n").unwrap();
    let out = dir.path().join("fit");
    let r = dyngam(&["fit", &data, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("warning: not converged"));
}

#[test]
fn unknown_config_key_fails_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "2,2,3,2,3", "1");
    let cfg = dir.path().join("fit.cfg");
    fs::write(&cfg, "# priors\nbeta_lambda = 1000\nlambda_rate = 2\n").unwrap();
    let r = dyngam(&["fit", &data, "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert!(!r.status.success());
    let err = String::from_utf8_lossy(&r.stderr);
    assert!(err.contains("line 3") && err.contains("lambda_rate"), "{err}");
}

#[test]
fn dropping_a_cause_renumbers_the_rest() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "2,3,3,2,3", "2");
    let out = dir.path().join("fit");
    let r = dyngam(&["fit", &data, "--drop-cause", "1", "--out", out.to_str().unwrap()]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let dep = read_dependence_json(&out.join("dependence.json")).unwrap();
    assert_eq!(dep.d_qk.len(), 2);
}

#[test]
fn malformed_data_reports_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("bad.csv");
    fs::write(&data, "region,cause,age_group,gender,month,count,offset,stringency\n0,0,0,0,0,2,10.0,0.5\n0,0,0,0,1,x,10.0,0.5\n").unwrap();
    let r = dyngam(&["fit", data.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("line 3"));
}

#[test]
fn simulate_writes_truth() {
    let dir = tempfile::tempdir().unwrap();
    let truth = dir.path().join("truth.json");
    let data = dir.path().join("d.csv");
    let r = dyngam(&[
        "simulate", "--dims", "3,2,2,2,5", "--seed", "1", "--phi", "-0.4",
        "--out", data.to_str().unwrap(), "--truth", truth.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let t: dyngam_cli::commands::TruthExport = serde_json::from_str(&fs::read_to_string(truth).unwrap()).unwrap();
    assert!(t.phi.iter().all(|&p| p == -0.4));
    assert_eq!(t.latent_path.len(), 5);
}

#[test]
fn check_passes() {
    let r = dyngam(&["check"]);
    assert!(r.status.success());
    let table = String::from_utf8_lossy(&r.stdout);
    assert_eq!(table.lines().filter(|l| l.starts_with("[PASS]")).count(), 5, "{table}");
}
