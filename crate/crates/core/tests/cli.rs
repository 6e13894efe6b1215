use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use evqr::cli::{load_problem, read_matrix_csv, InputArgs};
use evqr::{solver, SolverOptions};
use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn evqr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evqr")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn solve_args<'a>(mu: &'a str, nu: &'a str, eps: &'a str) -> Vec<&'a str> {
    vec!["solve", "--mu", mu, "--nu", nu, "--epsilon", eps]
}

#[test]
fn validate_exit_codes() {
    let mu = fixture("product_mu.csv");
    let ok = evqr(&["validate", "--mu", path_str(&mu), "--nu", path_str(&fixture("product_nu.csv"))]);
    assert_eq!(code(&ok), 0, "{}", stderr(&ok));
    let report: Value = serde_json::from_slice(&ok.stdout).unwrap();
    assert_eq!(report["feasible"], Value::Bool(true));

    let bad = evqr(&["validate", "--mu", path_str(&mu), "--nu", path_str(&fixture("rank_deficient_nu.csv"))]);
    assert_eq!(code(&bad), 2);
    let report: Value = serde_json::from_slice(&bad.stdout).unwrap();
    assert_eq!(report["feasible"], Value::Bool(false));

    let broken = evqr(&["validate", "--mu", path_str(&mu), "--nu", path_str(&fixture("malformed_nu.csv"))]);
    assert_eq!(code(&broken), 4);
    assert!(stderr(&broken).contains("line 3"), "{}", stderr(&broken));

    let missing = evqr(&["validate", "--mu", "/nonexistent/mu.csv", "--nu", path_str(&fixture("product_nu.csv"))]);
    assert_eq!(code(&missing), 4);
}

#[test]
fn solve_product_fixture_writes_everything() {
    let dir = tempfile::tempdir().unwrap();
    let (mu, nu) = (fixture("product_mu.csv"), fixture("product_nu.csv"));
    let coupling = dir.path().join("pi.csv");
    let pots = dir.path().join("pots.csv");
    let report = dir.path().join("report.json");
    let mut args = solve_args(path_str(&mu), path_str(&nu), "0.5");
    args.extend([
        "--out-coupling",
        path_str(&coupling),
        "--out-potentials",
        path_str(&pots),
        "--report",
        path_str(&report),
    ]);
    let out = evqr(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let pi = read_matrix_csv(&coupling).unwrap();
    assert_eq!(pi.shape(), (2, 2));
    assert!(pi.add_scalar(-0.25).amax() < 1e-12);

    let fg = std::fs::read_to_string(&pots).unwrap();
    assert_eq!(fg.lines().next().unwrap(), "f,g1");
    assert_eq!(fg.lines().count(), 3);
    let h = std::fs::read_to_string(dir.path().join("pots_h.csv")).unwrap();
    assert_eq!(h.lines().next().unwrap(), "h");
    assert_eq!(h.lines().count(), 3);

    let doc = read_json(&report);
    for key in [
        "sweeps",
        "primal_value",
        "dual_value",
        "duality_gap",
        "marginal_residual",
        "mean_indep_residual",
        "schrodinger_residual",
        "converged",
    ] {
        assert!(doc["solve"].get(key).is_some(), "missing {key}");
    }
    assert_eq!(doc["solve"]["converged"], Value::Bool(true));
    assert_eq!(doc["problem"]["n"], 2);
    assert_eq!(doc["config"]["epsilon"].as_f64(), Some(0.5));
}

#[test]
fn csv_roundtrip_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let (mu, nu) = (fixture("random_mu.csv"), fixture("random_nu.csv"));
    let coupling = dir.path().join("pi.csv");
    let mut args = solve_args(path_str(&mu), path_str(&nu), "0.3");
    args.extend(["--out-coupling", path_str(&coupling)]);
    let out = evqr(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let input = InputArgs { mu, nu };
    let p = load_problem(&input, 0.3).unwrap();
    let sol = solver::solve(&p, &SolverOptions::default()).unwrap();
    let from_file = read_matrix_csv(&coupling).unwrap();
    assert_eq!(from_file, sol.coupling.pi);
}

#[test]
fn tiny_epsilon_warns_but_succeeds() {
    let (mu, nu) = (fixture("product_mu.csv"), fixture("product_nu.csv"));
    let out = evqr(&solve_args(path_str(&mu), path_str(&nu), "1e-8"));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stderr(&out).contains("warn"), "{}", stderr(&out));
}

#[test]
fn sweep_budget_exhaustion_still_reports() {
    let dir = tempfile::tempdir().unwrap();
    let (mu, nu) = (fixture("random_mu.csv"), fixture("random_nu.csv"));
    let report = dir.path().join("report.json");
    let mut args = solve_args(path_str(&mu), path_str(&nu), "0.3");
    args.extend(["--max-sweeps", "1", "--report", path_str(&report)]);
    let out = evqr(&args);
    assert_eq!(code(&out), 3);
    let doc = read_json(&report);
    assert_eq!(doc["solve"]["converged"], Value::Bool(false));
}

#[test]
fn invalid_parameters_exit_2() {
    let (mu, nu) = (fixture("product_mu.csv"), fixture("product_nu.csv"));
    let out = evqr(&solve_args(path_str(&mu), path_str(&nu), "-1"));
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    let out = evqr(&solve_args(path_str(&mu), path_str(&fixture("rank_deficient_nu.csv")), "1"));
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn gaussian_scalar_report() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("g.json");
    let model = fixture("scalar_model.json");
    let out = evqr(&[
        "gaussian",
        "--model",
        path_str(&model),
        "--epsilon",
        "0.3",
        "--report",
        path_str(&report),
        "--mc-draws",
        "20000",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let doc = read_json(&report);
    let lambda = doc["lambda"][0][0].as_f64().unwrap();
    assert!((lambda - 0.663_941_0).abs() < 5e-8);
    assert!(doc["riccati_residual"].as_f64().unwrap() < 1e-10);
    assert!((doc["w2_first_order_coefficient"].as_f64().unwrap() - 0.4).abs() < 1e-14);
    assert!(doc["limit"]["monte_carlo"]["max_abs_z"].is_f64());

    let bad = evqr(&["gaussian", "--model", path_str(&fixture("non_pd_model.json")), "--epsilon", "0.3"]);
    assert_eq!(code(&bad), 2, "{}", stderr(&bad));
}

#[test]
fn sweep_table() {
    let model = fixture("scalar_model.json");
    let out = evqr(&["sweep", "--model", path_str(&model), "--eps-grid", "1e-2,1e-4,1e-3"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "epsilon,w2_exact,first_order,ratio,residual_over_eps2");
    assert_eq!(lines.len(), 4);
    let eps: Vec<f64> = lines[1..].iter().map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(eps, [1e-2, 1e-4, 1e-3]);
    let ratio: f64 = lines[2].split(',').nth(3).unwrap().parse().unwrap();
    assert!((0.99..=1.01).contains(&ratio), "{ratio}");

    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("sweep.csv");
    let out = evqr(&["sweep", "--model", path_str(&model), "--eps-grid", "0.1", "--out", path_str(&file)]);
    assert_eq!(code(&out), 0);
    assert_eq!(std::fs::read_to_string(&file).unwrap().lines().count(), 2);
}

#[test]
fn oracle_command() {
    let (mu, nu) = (fixture("product_mu.csv"), fixture("product_nu.csv"));
    let out = evqr(&["oracle", "--mu", path_str(&mu), "--nu", path_str(&nu), "--epsilon", "0.5"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let doc: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(doc["passed"], Value::Bool(true));

    let out = evqr(&[
        "oracle",
        "--mu",
        path_str(&fixture("random_mu.csv")),
        "--nu",
        path_str(&fixture("random_nu.csv")),
        "--epsilon",
        "1",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let out = evqr(&[
        "oracle",
        "--mu",
        path_str(&mu),
        "--nu",
        path_str(&fixture("rank_deficient_nu.csv")),
        "--epsilon",
        "1",
    ]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn oracle_size_guard() {
    let dir = tempfile::tempdir().unwrap();
    let mu = dir.path().join("mu.csv");
    let nu = dir.path().join("nu.csv");
    let mut mu_text = String::from("w,u1\n");
    for i in 0..15 {
        mu_text.push_str(&format!("{},{}\n", 1.0 / 15.0, i as f64 * 0.1));
    }
    let mut nu_text = String::from("w,x1,y1\n");
    for j in 0..14 {
        nu_text.push_str(&format!("{},{},{}\n", 1.0 / 14.0, j as f64 - 6.5, (j * j) as f64 * 0.01));
    }
    std::fs::write(&mu, mu_text).unwrap();
    std::fs::write(&nu, nu_text).unwrap();
    let out = evqr(&["oracle", "--mu", path_str(&mu), "--nu", path_str(&nu), "--epsilon", "1"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("210"), "{}", stderr(&out));
}
