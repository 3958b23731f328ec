use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn models() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../models")
}

fn mfeq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfeq")).args(args).output().unwrap()
}

fn model(name: &str) -> String {
    models().join(name).to_str().unwrap().to_string()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn assert_ok(o: &Output) {
    assert_eq!(code(o), 0, "stdout: {}\nstderr: {}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr));
}

/// Closed-form Lambda of the bundled mean-variance model.
fn mv_lambda(tau: f64, t: f64) -> f64 {
    let a = 0.04 / 0.1;
    0.5 / (2.0 - tau) * (-a * (1.0 - t)).exp()
}

#[test]
fn solve_partition_reproduces_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = mfeq(&["solve", "--model", &model("ex1.json"), "--method", "partition", "--grid", "200", "--out", out]);
    assert_ok(&o);
    let text = std::fs::read_to_string(dir.path().join("lambda.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("tau,t,block,i,j,value"));
    let (mut err, mut scale, mut rows) = (0.0f64, 0.0f64, 0);
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[2], "Lambda");
        let (tau, t, v): (f64, f64, f64) = (f[0].parse().unwrap(), f[1].parse().unwrap(), f[5].parse().unwrap());
        let want = mv_lambda(tau, t);
        err = err.max((v - want).abs());
        scale = scale.max(want.abs());
        rows += 1;
    }
    assert_eq!(rows, 201 * 202 / 2);
    assert!(err / scale <= 1e-4, "{}", err / scale);
    let rep = json(&dir.path().join("riccati_report.json"));
    assert_eq!(rep["method"], "partition");
    assert!(rep["report"]["pd_conditions"]["passed"].as_bool().unwrap());
    assert!(rep["residual_max"]["lambda"].as_f64().unwrap() < 1e-6);
    let riccati = std::fs::read_to_string(dir.path().join("riccati.csv")).unwrap();
    for block in ["Lambda", "beta", "gamma", "kappa"] {
        assert!(riccati.contains(&format!(",{block},")));
    }
}

fn strip_stamp(mut v: Value) -> Value {
    assert!(v.as_object_mut().unwrap().remove("generated_at").is_some());
    v
}

#[test]
fn outputs_are_reproducible_across_runs_and_thread_counts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for (dir, threads) in [(&a, "1"), (&b, "3")] {
        let out = dir.path().to_str().unwrap();
        assert_ok(&mfeq(&["--threads", threads, "solve", "--model", &model("ex2.json"), "--grid", "40", "--out", out]));
        assert_ok(&mfeq(&[
            "--threads",
            threads,
            "simulate",
            "--model",
            &model("ex1.json"),
            "--grid",
            "40",
            "--particles",
            "200",
            "--paths",
            "6",
            "--dt",
            "0.01",
            "--seed",
            "17",
            "--keep-particles",
            "2",
            "--thin",
            "5",
            "--out",
            out,
        ]));
    }
    for f in ["riccati.csv", "lambda.csv", "cost.json", "paths.csv"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let (ra, rb) = (json(&a.path().join("riccati_report.json")), json(&b.path().join("riccati_report.json")));
    assert_eq!(strip_stamp(ra), strip_stamp(rb));
    let cost = json(&a.path().join("cost.json"));
    for key in ["mean", "stderr", "N", "M", "dt", "seed"] {
        assert!(cost.get(key).is_some(), "{key}");
    }
}

#[test]
fn verify_with_equilibrium_map_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = mfeq(&[
        "verify",
        "--model",
        &model("ex2.json"),
        "--grid",
        "50",
        "--only-equilibrium",
        "--particles",
        "300",
        "--paths",
        "16",
        "--dt",
        "0.005",
        "--perturbations",
        "100",
        "--seed",
        "3",
        "--out",
        out,
    ]);
    assert_ok(&o);
    let rep = json(&dir.path().join("delta_report.json"));
    assert_eq!(rep["passed"], true);
    assert_eq!(rep["probes"].as_array().unwrap().len(), 1);
    assert!(rep["probes"][0]["analytic_gamma"].as_f64().unwrap().abs() <= 1e-10);
    assert!(rep["certificate"]["passed"].as_bool().unwrap());
    let scan = std::fs::read_to_string(dir.path().join("gamma_scan.csv")).unwrap();
    assert!(scan.starts_with("t,perturbation_id,gamma,analytic_min_check\n"));
}

#[test]
fn indefinite_model_exits_with_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"dims":{"d":1,"m":1,"n":1,"k":1},"horizon":1.0,"costs":{"R":{"kind":"constant","value":-1.0}}}"#).unwrap();
    let out = dir.path().join("out");
    let o = mfeq(&["solve", "--model", path.to_str().unwrap(), "--grid", "20", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    let err = json(&out.join("error.json"));
    assert_eq!(err["kind"], "ConditionsViolated");
    assert_eq!(err["exit_code"], 3);
    let checks = err["detail"]["checks"].as_array().unwrap();
    assert!(checks.iter().any(|c| c["name"] == "R" && c["passed"] == false));
}

#[test]
fn malformed_input_exits_with_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.json");
    std::fs::write(&path, r#"{"dims":{"d":1,"m":1,"n":1,"k":1},"horizon":-1.0}"#).unwrap();
    let out = dir.path().join("out");
    let o = mfeq(&["solve", "--model", path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let err = json(&out.join("error.json"));
    assert_eq!(err["kind"], "ModelError");

    let o = mfeq(&["simulate", "--model", &model("ex1.json"), "--dt", "0.5", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(json(&out.join("error.json"))["message"].as_str().unwrap().contains("--dt"));

    let o = mfeq(&["solve", "--model", &model("ex1.json"), "--grid", "1", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert_eq!(json(&out.join("error.json"))["kind"], "InvalidGrid");
}

#[test]
fn examples_run_against_their_oracles() {
    for (name, grid) in [("mean-variance", "50"), ("systemic-risk", "400"), ("nonlq", "100")] {
        let dir = tempfile::tempdir().unwrap();
        let o = mfeq(&["example", name, "--grid", grid, "--out", dir.path().to_str().unwrap()]);
        assert_ok(&o);
        let rep = json(&dir.path().join("example_report.json"));
        assert_eq!(rep["passed"], true, "{name}");
        assert!(dir.path().join("oracle.csv").exists());
    }
    let dir = tempfile::tempdir().unwrap();
    let o = mfeq(&["example", "nonlq", "--params", &model("systemic_risk.json"), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn coarse_fixed_point_example_fails_its_gate() {
    let dir = tempfile::tempdir().unwrap();
    let o = mfeq(&["example", "mean-variance", "--method", "fixed-point", "--grid", "3", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert_eq!(json(&dir.path().join("example_report.json"))["passed"], false);
}

#[test]
fn multiplicative_model_runs_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let m = model("nonlq.json");
    assert_ok(&mfeq(&["solve", "--model", &m, "--grid", "50", "--out", out]));
    assert!(dir.path().join("strategy.csv").exists());
    assert_ok(&mfeq(&["residuals", "--model", &m, "--grid", "50", "--out", out]));
    assert!(json(&dir.path().join("residual_report.json"))["max_a_residual"].as_f64().unwrap() < 1e-6);
    assert_ok(&mfeq(&["simulate", "--model", &m, "--particles", "500", "--paths", "16", "--dt", "0.01", "--seed", "2", "--out", out]));
    let c = json(&dir.path().join("cost.json"));
    let (mean, se, v) = (c["mean"].as_f64().unwrap(), c["stderr"].as_f64().unwrap(), c["value"].as_f64().unwrap());
    assert!((mean - v).abs() <= 4.0 * se, "{mean} +- {se} vs {v}");
}

#[test]
fn residuals_table_covers_interior_nodes() {
    let dir = tempfile::tempdir().unwrap();
    let o = mfeq(&["residuals", "--model", &model("mean_variance.json"), "--grid", "30", "--out", dir.path().to_str().unwrap()]);
    assert_ok(&o);
    let text = std::fs::read_to_string(dir.path().join("residuals.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 30 * 31 / 2);
    let rep = json(&dir.path().join("residual_report.json"));
    assert!(rep["master_equation_scaled_max"].as_f64().unwrap() < 1e-5);
}
