use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_densefield"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

/// Compares against a stored file; `UPDATE_GOLDEN=1` rewrites it.
fn check_golden(name: &str, actual: &str) {
    let path = golden(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, actual).unwrap();
    }
    let expected = std::fs::read_to_string(&path).unwrap();
    assert_eq!(actual, expected, "output drifted from {}", path.display());
}

/// Data rows of a CSV with a leading config comment.
fn csv_rows(text: &str) -> (Vec<String>, Vec<Vec<String>>) {
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# config: {"));
    let header: Vec<String> = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    (header, rows)
}

fn col(header: &[String], rows: &[Vec<String>], name: &str) -> Vec<f64> {
    let i = header.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"));
    rows.iter().map(|r| r[i].parse().unwrap()).collect()
}

#[test]
fn golden_pmax_curve() {
    check_golden("pmax_sinc.csv", &stdout(&["pmax-curve", "--model", "sinc", "--n", "64,128,256"]));
}

#[test]
fn golden_rates_in_bits() {
    check_golden(
        "rates_exp_bits.csv",
        &stdout(&["rates", "--model", "exp", "--n", "64,128", "--units", "bits"]),
    );
}

#[test]
fn golden_p2p() {
    check_golden("p2p_exp.json", &stdout(&["p2p", "--model", "exp", "--n", "48"]));
}

#[test]
fn pmax_curve_shapes() {
    let (h, rows) = csv_rows(&stdout(&["pmax-curve", "--model", "sinc", "--n", "64,128,256"]));
    assert_eq!(h, ["N", "d_prime", "p_max", "p_max_over_n", "feasible"]);
    let per_n = col(&h, &rows, "p_max_over_n");
    let (lo, hi) = per_n.iter().fold((f64::MAX, f64::MIN), |(a, b), &x| (a.min(x), b.max(x)));
    assert!(hi / lo < 1.3 / 0.7, "{per_n:?}");

    let (h, rows) = csv_rows(&stdout(&["pmax-curve", "--model", "exp", "--n-range", "64:256:64"]));
    let p = col(&h, &rows, "p_max");
    assert_eq!(p.len(), 4);
    assert!(p.windows(2).all(|w| w[1] > w[0]), "{p:?}");
}

#[test]
fn infeasible_n_is_flagged() {
    let (h, rows) = csv_rows(&stdout(&["pmax-curve", "--model", "exp", "--n", "2,64"]));
    let feasible = h.iter().position(|c| c == "feasible").unwrap();
    assert_eq!(rows[0][feasible], "false");
    assert_eq!(rows[0][2], "");
    assert_eq!(rows[1][feasible], "true");
}

#[test]
fn rates_rows_are_ordered_and_flat() {
    let (h, rows) = csv_rows(&stdout(&["rates", "--model", "sinc", "--n-range", "50:500:50"]));
    let dsc = col(&h, &rows, "dsc_rate_nats");
    let central = col(&h, &rows, "centralized_rate_nats");
    assert!(dsc.iter().zip(&central).all(|(d, c)| c <= d));
    let (lo, hi) = dsc.iter().fold((f64::MAX, f64::MIN), |(a, b), &x| (a.min(x), b.max(x)));
    assert!(hi / lo <= 1.25, "{dsc:?}");
}

#[test]
fn bits_are_nats_over_ln2() {
    let nats = stdout(&["rates", "--model", "sinc", "--n", "64"]);
    let bits = stdout(&["rates", "--model", "sinc", "--n", "64", "--units", "bits"]);
    let (hn, rn) = csv_rows(&nats);
    let (hb, rb) = csv_rows(&bits);
    let n = col(&hn, &rn, "dsc_rate_nats")[0];
    let b = col(&hb, &rb, "dsc_rate_bits")[0];
    assert!((b - n / std::f64::consts::LN_2).abs() < 1e-9 * b);
}

#[test]
fn rates_json_matches_csv() {
    let v: Value = serde_json::from_str(&stdout(&["rates", "--model", "exp", "--n", "128", "--format", "json"])).unwrap();
    assert_eq!(v["config"]["command"], "rates");
    let row = &v["result"][0];
    let (h, rows) = csv_rows(&stdout(&["rates", "--model", "exp", "--n", "128"]));
    let csv_rate = col(&h, &rows, "dsc_rate_nats")[0];
    assert!((row["dsc_rate_nats"].as_f64().unwrap() - csv_rate).abs() < 1e-9);
}

#[test]
fn p2p_reports_headline_values() {
    for (model, k, rate) in [("sinc", 7, 11.77), ("exp", 24, 46.92)] {
        let v: Value = serde_json::from_str(&stdout(&["p2p", "--model", model])).unwrap();
        let r = &v["result"];
        assert_eq!(r["k_star"], k);
        assert!((r["sum_rate_nats"].as_f64().unwrap() - rate).abs() <= 0.02);
        assert!(r["delta_bits"].as_f64().unwrap() < 1.0);
        assert!(r["quantizer_distortion"].as_f64().unwrap() <= r["d_k"].as_f64().unwrap());
    }
}

#[test]
fn simulate_dsc_default() {
    let v: Value = serde_json::from_str(&stdout(&["simulate", "--model", "exp", "--n", "64"])).unwrap();
    assert_eq!(v["result"]["verdict"], "within");
    assert_eq!(v["result"]["meets_d_net"], true);
    assert_eq!(v["config"]["m"], 20000);
}

#[test]
fn simulate_p2p_end_to_end() {
    let v: Value =
        serde_json::from_str(&stdout(&["simulate", "--scheme", "p2p", "--model", "exp", "--n", "48", "--k", "24"]))
            .unwrap();
    let r = &v["result"];
    let j = r["j_mse"].as_f64().unwrap();
    let se = r["stderr_jmse"].as_f64().unwrap();
    assert!(j <= 0.1 + 3.0 * se);
    assert_eq!(r["verdict"], "within");
}

#[test]
fn simulate_is_repeatable() {
    let args = ["simulate", "--model", "sinc", "--n", "12", "--m", "2000", "--seed", "5"];
    assert_eq!(stdout(&args), stdout(&args));
    let other = stdout(&["simulate", "--model", "sinc", "--n", "12", "--m", "2000", "--seed", "6"]);
    assert_ne!(stdout(&args), other);
}

#[test]
fn simulate_log_and_out() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.json");
    let log = dir.path().join("log.csv");
    for _ in 0..2 {
        let o = run(&[
            "simulate", "--model", "exp", "--n", "8", "--p", "0.5", "--m", "500",
            "--out", out.to_str().unwrap(), "--log", log.to_str().unwrap(),
        ]);
        assert!(o.status.success());
    }
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v["result"]["n_snapshots"], 500);
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 3);
}

#[test]
fn exit_codes() {
    // usage
    assert_eq!(run(&["pmax-curve", "--model", "sinc"]).status.code(), Some(2));
    assert_eq!(run(&["rates", "--model", "cosine", "--n", "4"]).status.code(), Some(2));
    assert_eq!(run(&["rates", "--dnet", "1.5", "--n", "4"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["p2p", "--format", "csv"]).status.code(), Some(2));
    // infeasible
    assert_eq!(run(&["p2p", "--model", "exp", "--k-max", "5"]).status.code(), Some(3));
    assert_eq!(run(&["simulate", "--model", "exp", "--n", "2"]).status.code(), Some(3));
    assert_eq!(
        run(&["simulate", "--scheme", "p2p", "--model", "exp", "--n", "10", "--k", "4"]).status.code(),
        Some(3)
    );
}

#[test]
fn bound_violation_exits_4() {
    // rho dips to 0 and recovers, so rho(1/K) no longer bounds rho(s - r) from below
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bumpy.csv");
    std::fs::write(&path, "0,1\n0.25,0\n0.5,0.9\n1,0.9\n").unwrap();
    let spec = format!("table:{}", path.display());
    let o = run(&[
        "simulate", "--scheme", "p2p", "--model", &spec, "--n", "4", "--k", "2",
        "--levels", "64", "--m-prime", "200",
    ]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["result"]["verdict"], "violated-high");
}

#[test]
fn table_model() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rho.csv");
    let rows: String = (0..=1000)
        .map(|i| {
            let t = i as f64 / 1000.0;
            format!("{t},{}\n", (-t).exp())
        })
        .collect();
    std::fs::write(&path, format!("tau,rho\n{rows}")).unwrap();
    let spec = format!("table:{}", path.display());
    let (h, rows) = csv_rows(&stdout(&["rates", "--model", &spec, "--n", "64"]));
    let (he, re) = csv_rows(&stdout(&["rates", "--model", "exp", "--n", "64"]));
    let a = col(&h, &rows, "p_max")[0];
    let b = col(&he, &re, "p_max")[0];
    assert!((a - b).abs() / b < 1e-3, "{a} vs {b}");
    assert_eq!(run(&["rates", "--model", "table:/nonexistent.csv", "--n", "4"]).status.code(), Some(1));
}
