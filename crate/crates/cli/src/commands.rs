use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use mfeq_core::equilibrium::{equilibrium_affine, gamma_scan, master_residual, value, write_gamma_scan, AffinePerturbation, FeedbackStrategy, MeasureMoments};
use mfeq_core::examples::{
    mean_variance_model, nonlq_solution, nonlq_verify, parse_params, systemic_risk_equilibrium, systemic_risk_model, ExampleParams, MeanVarianceParams,
    NonLQParams, NonLQVerifyConfig, SystemicRiskParams,
};
use mfeq_core::linalg::{Mat, Vector};
use mfeq_core::mckv_sim::{self, estimate_cost, CostSpec, InitLaw, SimConfig, SimModel, StrategySpec};
use mfeq_core::riccati::{max_residuals, residual_at, solve_fixed_point, solve_partition_on, systemic_risk_residual, FixedPointOptions, SystemicRiskConstants};
use mfeq_core::verifier::{equilibrium_certificate, estimate_delta, DeltaConfig};
use mfeq_core::{parse_model, LQModel, RiccatiSolution, TriangularGrid};
use serde_json::{json, Value};

use crate::error::CliError;
use crate::{ExampleArgs, ExampleName, Method, SimArgs, SimulateArgs, SolveArgs, VerifyArgs};

type Res<T> = Result<T, CliError>;

/// What a model file describes.
enum Problem {
    Lq(LQModel),
    NonLq(NonLQParams),
}

pub fn set_threads(threads: Option<usize>) -> Res<()> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::input("--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::input(e.to_string()))?;
    }
    Ok(())
}

fn load(path: &Path) -> Res<Problem> {
    let text = fs::read_to_string(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let has_kind = serde_json::from_str::<Value>(&text).ok().is_some_and(|v| v.get("kind").is_some());
    if !has_kind {
        return Ok(Problem::Lq(parse_model(&text)?));
    }
    Ok(match parse_params(&text)? {
        ExampleParams::MeanVariance(p) => Problem::Lq(mean_variance_model(&p)),
        ExampleParams::SystemicRisk(p) => Problem::Lq(systemic_risk_model(&p)),
        ExampleParams::NonLQ(p) => Problem::NonLq(p),
    })
}

fn horizon(p: &Problem) -> f64 {
    match p {
        Problem::Lq(m) => m.horizon,
        Problem::NonLq(p) => p.horizon,
    }
}

fn grid(horizon: f64, n: usize) -> Res<TriangularGrid> {
    Ok(TriangularGrid::uniform(horizon, n)?)
}

fn solve_lq(model: &LQModel, method: Method, n: usize, substeps: usize) -> Res<RiccatiSolution> {
    if substeps == 0 {
        return Err(CliError::input("--substeps must be positive"));
    }
    let g = grid(model.horizon, n)?;
    let sol = match method {
        Method::Partition => solve_partition_on(model, g, substeps)?,
        Method::FixedPoint => solve_fixed_point(model, &g, FixedPointOptions { substeps, ..FixedPointOptions::default() })?,
    };
    log::info!("solved on {n} cells with {:?}", method);
    Ok(sol)
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::Partition => "partition",
        Method::FixedPoint => "fixed-point",
    }
}

/// Seconds since the epoch; the only non-reproducible field of any report.
fn stamp() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn create(dir: &Path, name: &str) -> Res<BufWriter<File>> {
    fs::create_dir_all(dir)?;
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn write_json(dir: &Path, name: &str, mut v: Value) -> Res<()> {
    if let Value::Object(m) = &mut v {
        m.insert("generated_at".into(), json!(stamp()));
    }
    let mut f = create(dir, name)?;
    serde_json::to_writer_pretty(&mut f, &v).map_err(|e| CliError::input(e.to_string()))?;
    writeln!(f)?;
    f.flush()?;
    Ok(())
}

fn write_plain_json(dir: &Path, name: &str, v: &Value) -> Res<()> {
    let mut f = create(dir, name)?;
    serde_json::to_writer_pretty(&mut f, v).map_err(|e| CliError::input(e.to_string()))?;
    writeln!(f)?;
    f.flush()?;
    Ok(())
}

fn check_sim(sim: &SimArgs, horizon: f64, t0: f64) -> Res<()> {
    if sim.particles == 0 || sim.paths == 0 {
        return Err(CliError::input("--particles and --paths must be positive"));
    }
    if !(sim.dt > 0.0) || sim.dt > (horizon - t0) / 10.0 {
        return Err(CliError::input(format!("--dt must lie in (0, (T - t0)/10] = (0, {}]", (horizon - t0) / 10.0)));
    }
    Ok(())
}

fn init_law(sim: &SimArgs, problem: &Problem) -> Res<InitLaw> {
    if let Some(text) = &sim.init {
        return serde_json::from_str(text).map_err(|e| CliError::input(format!("--init: {e}")));
    }
    Ok(match problem {
        Problem::Lq(m) => {
            let d = m.dims.d;
            InitLaw::Gaussian { mean: vec![1.0; d], cov: (0..d).map(|i| (0..d).map(|j| if i == j { 0.25 } else { 0.0 }).collect()).collect() }
        }
        Problem::NonLq(_) => InitLaw::LogNormal { log_mean: 0.0, log_sd: 0.2 },
    })
}

pub fn solve(a: &SolveArgs) -> Res<bool> {
    match load(&a.model)? {
        Problem::Lq(model) => {
            let sol = solve_lq(&model, a.method, a.grid, a.substeps)?;
            sol.write_csv(create(&a.out, "riccati.csv")?, &["Lambda", "beta", "gamma", "kappa"])?;
            sol.write_csv(create(&a.out, "lambda.csv")?, &["Lambda"])?;
            let res = max_residuals(&model, &sol)?;
            write_json(
                &a.out,
                "riccati_report.json",
                json!({
                    "method": method_name(a.method),
                    "grid": a.grid,
                    "report": sol.report,
                    "residual_max": res,
                }),
            )?;
            println!("solved: lambda sup {:.6e}, max Lambda residual {:.3e}", sol.report.lambda_sup, res.lambda);
        }
        Problem::NonLq(p) => {
            let g = grid(p.horizon, a.grid)?;
            let s = nonlq_solution(&p, &g);
            let mut f = create(&a.out, "strategy.csv")?;
            writeln!(f, "t,alpha")?;
            for (t, al) in s.times.iter().zip(&s.alpha) {
                writeln!(f, "{t},{al}")?;
            }
            f.flush()?;
            let mut f = create(&a.out, "value_coefficient.csv")?;
            writeln!(f, "tau,t,A")?;
            for (i, row) in s.a.iter().enumerate() {
                for (k, v) in row.iter().enumerate() {
                    writeln!(f, "{},{},{v}", s.times[i], s.times[i + k])?;
                }
            }
            f.flush()?;
            write_json(&a.out, "solution_report.json", json!({ "grid": a.grid, "max_a_residual": nonlq_max_residual(&p, &s.times) }))?;
            println!("solved: equilibrium proportion at t=0 is {:.6}", s.alpha[0]);
        }
    }
    Ok(true)
}

fn nonlq_max_residual(p: &NonLQParams, times: &[f64]) -> f64 {
    let n = times.len();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in i + 1..n - 1 {
            worst = worst.max(p.a_residual(times[i], times[j], 1e-4).abs());
        }
    }
    worst
}

pub fn simulate(a: &SimulateArgs) -> Res<bool> {
    let problem = load(&a.solve.model)?;
    let t0 = a.t0;
    let t_end = horizon(&problem);
    if !(0.0..t_end).contains(&t0) {
        return Err(CliError::input(format!("--t0 must lie in [0, {t_end})")));
    }
    check_sim(&a.sim, t_end, t0)?;
    if a.thin == 0 {
        return Err(CliError::input("--thin must be positive"));
    }
    let init = init_law(&a.sim, &problem)?;
    let mut cfg = SimConfig::new(t0, a.sim.particles, a.sim.paths, a.sim.dt, a.sim.seed);
    cfg.keep_particles = a.keep_particles;
    cfg.thin = a.thin;
    let (ens, cost, reference) = match &problem {
        Problem::Lq(model) => {
            let sol = solve_lq(model, a.solve.method, a.solve.grid, a.solve.substeps)?;
            let fb = Arc::new(FeedbackStrategy::from_solution(model, &sol)?);
            let ens = mckv_sim::simulate(SimModel::Lq(model), &StrategySpec::LqFeedback(fb), &init, &cfg)?;
            let c = estimate_cost(&ens, &CostSpec::Lq { model, tau: t0 });
            (ens, c, value(&sol, t0, t0, &init.moments()))
        }
        Problem::NonLq(p) => {
            let ens = mckv_sim::simulate(SimModel::NonLq(p), &StrategySpec::ScalarLinear(p.alpha_hat_fn(2000)), &init, &cfg)?;
            let c = estimate_cost(&ens, &CostSpec::NonLq { params: p, tau: t0 });
            (ens, c, p.cost(&init, t0, t0, &|s| p.alpha_hat(s), &[]))
        }
    };
    if a.keep_particles > 0 {
        let mut f = create(&a.solve.out, "paths.csv")?;
        ens.write_paths_csv(&mut f)?;
        f.flush()?;
    }
    write_plain_json(
        &a.solve.out,
        "cost.json",
        &json!({
            "mean": cost.mean,
            "stderr": cost.stderr,
            "N": a.sim.particles,
            "M": a.sim.paths,
            "dt": a.sim.dt,
            "seed": a.sim.seed,
            "t0": t0,
            "value": reference,
        }),
    )?;
    println!("cost {:.6} +- {:.6} (value {:.6})", cost.mean, cost.stderr, reference);
    Ok(true)
}

fn parse_offset_pair(s: &str) -> Res<(f64, f64)> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let num = |x: &str| x.parse::<f64>().ok().filter(|v| v.is_finite());
    match parts.as_slice() {
        [a, c] => match (num(a), num(c)) {
            (Some(a), Some(c)) => Ok((a, c)),
            _ => Err(CliError::input(format!("--offset {s}: expected two numbers"))),
        },
        _ => Err(CliError::input(format!("--offset {s}: expected dA,dc"))),
    }
}

pub fn verify(a: &VerifyArgs) -> Res<bool> {
    let problem = load(&a.solve.model)?;
    let t = a.t;
    let t_end = horizon(&problem);
    if !(0.0..t_end).contains(&t) {
        return Err(CliError::input(format!("--t must lie in [0, {t_end})")));
    }
    check_sim(&a.sim, t_end, t)?;
    if !(a.tol > 0.0) || a.perturbations == 0 {
        return Err(CliError::input("--tol and --perturbations must be positive"));
    }
    let init = init_law(&a.sim, &problem)?;
    let eps = if a.eps.is_empty() { DeltaConfig::default_eps(t_end, t) } else { a.eps.clone() };
    let dcfg = DeltaConfig { particles: a.sim.particles, paths: a.sim.paths, dt: a.sim.dt, seed: a.sim.seed, eps };

    match &problem {
        Problem::Lq(model) => {
            let offsets = if a.only_equilibrium {
                vec![]
            } else if a.offsets.is_empty() {
                vec![(2.0, 0.0), (0.0, -3.0)]
            } else {
                a.offsets.iter().map(|s| parse_offset_pair(s)).collect::<Res<Vec<_>>>()?
            };
            let sol = solve_lq(model, a.solve.method, a.solve.grid, a.solve.substeps)?;
            let fb = Arc::new(FeedbackStrategy::from_solution(model, &sol)?);
            let mu = init.moments();
            if mu.mean.len() != model.dims.d {
                return Err(CliError::input("initial law has the wrong dimension"));
            }

            let times: Vec<f64> = (0..10).map(|i| t_end * (0.05 + 0.09 * i as f64)).collect();
            let shifted = MeasureMoments { mean: mu.mean.map(|x| x + 1.0), cov: &mu.cov * 2.0 };
            let cert = equilibrium_certificate(model, &sol, &times, &[mu.clone(), shifted], a.perturbations, a.tol, a.sim.seed)?;

            let star = equilibrium_affine(model, &sol, t, &mu)?;
            let (m, d) = star.A.shape();
            let mut perts = vec![star.clone()];
            for (da, dc) in &offsets {
                perts.push(AffinePerturbation::new(&star.A + Mat::from_element(m, d, *da), &star.c + Vector::from_element(m, *dc)));
            }
            let rows = gamma_scan(model, &sol, &[t], &mu, &perts)?;
            let mut f = create(&a.solve.out, "gamma_scan.csv")?;
            write_gamma_scan(&mut f, &rows)?;
            f.flush()?;

            let mut reports = Vec::new();
            for (id, v) in perts.iter().enumerate() {
                let r = estimate_delta(model, &sol, &fb, v, t, &init, &dcfg, id)?;
                println!(
                    "probe {id}: Delta {:.5} +- {:.5} (combined {:.5}), Gamma {:.5}, {}",
                    r.extrapolated,
                    r.extrapolated_stderr,
                    r.combined_stderr,
                    r.analytic_gamma,
                    if r.within_combined_band { "within band" } else { "OUTSIDE band" }
                );
                reports.push(r);
            }
            let passed = cert.passed && reports.iter().all(|r| r.within_combined_band);
            println!("certificate: min Gamma {:.3e}, {}", cert.min_gamma, if cert.passed { "passed" } else { "FAILED" });
            write_json(&a.solve.out, "delta_report.json", json!({ "t": t, "passed": passed, "certificate": cert, "probes": reports }))?;
            Ok(passed)
        }
        Problem::NonLq(p) => {
            let offsets = if a.only_equilibrium {
                vec![]
            } else if a.offsets.is_empty() {
                vec![2.5, -2.5]
            } else {
                a.offsets
                    .iter()
                    .map(|s| s.trim().parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| CliError::input(format!("--offset {s}: expected a number"))))
                    .collect::<Res<Vec<_>>>()?
            };
            let r = nonlq_verify(p, &NonLQVerifyConfig { t0: t, init, delta: dcfg, offsets })?;
            let passed = r.value_within_band && r.unperturbed.within_combined_band && r.perturbed.iter().all(|d| d.within_combined_band);
            println!("value {:.5} +- {:.5} vs {:.5}", r.value_mc, r.value_stderr, r.value_exact);
            for d in &r.perturbed {
                println!("probe {}: Delta {:.5} +- {:.5}, analytic {:.5}", d.perturbation_id, d.extrapolated, d.extrapolated_stderr, d.analytic_gamma);
            }
            write_json(&a.solve.out, "delta_report.json", json!({ "t": t, "passed": passed, "verification": r }))?;
            Ok(passed)
        }
    }
}

pub fn example(a: &ExampleArgs) -> Res<bool> {
    let params = match &a.params {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
            Some(parse_params(&text)?)
        }
        None => None,
    };
    let mismatch = || CliError::input("parameter file kind does not match the example");
    match a.name {
        ExampleName::MeanVariance => {
            let p = match params {
                None => MeanVarianceParams::demo(),
                Some(ExampleParams::MeanVariance(p)) => p,
                _ => return Err(mismatch()),
            };
            mean_variance_example(&p, a)
        }
        ExampleName::SystemicRisk => {
            let p = match params {
                None => SystemicRiskParams::demo(),
                Some(ExampleParams::SystemicRisk(p)) => p,
                _ => return Err(mismatch()),
            };
            systemic_risk_example(&p, a)
        }
        ExampleName::Nonlq => {
            let p = match params {
                None => NonLQParams::demo(),
                Some(ExampleParams::NonLQ(p)) => p,
                _ => return Err(mismatch()),
            };
            nonlq_example(&p, a)
        }
    }
}

fn mean_variance_example(p: &MeanVarianceParams, a: &ExampleArgs) -> Res<bool> {
    let n = a.grid.unwrap_or(200);
    let model = mean_variance_model(p);
    let sol = solve_lq(&model, a.method, n, 4)?;
    let nodes = sol.nodes().to_vec();
    let mut f = create(&a.out, "oracle.csv")?;
    writeln!(f, "tau,t,lambda_exact,lambda,gamma_exact,gamma,kappa_exact,kappa")?;
    let mut err = [0.0f64; 3];
    let mut scale = [0.0f64; 3];
    let mut beta_max = 0.0f64;
    for (i, j, l) in sol.lambda.iter() {
        let (tau, t) = (nodes[i], nodes[j]);
        let exact = [p.lambda_exact(tau, t), p.gamma_exact(tau, t), p.kappa_exact(tau, t)];
        let got = [l[(0, 0)], sol.gamma.get(i, j)[(0, 0)], *sol.kappa.get(i, j)];
        writeln!(f, "{tau},{t},{},{},{},{},{},{}", exact[0], got[0], exact[1], got[1], exact[2], got[2])?;
        for k in 0..3 {
            err[k] = err[k].max((got[k] - exact[k]).abs());
            scale[k] = scale[k].max(exact[k].abs());
        }
        beta_max = beta_max.max(sol.beta.get(i, j).amax());
    }
    f.flush()?;
    let rel: Vec<f64> = (0..3).map(|k| err[k] / scale[k].max(f64::MIN_POSITIVE)).collect();
    let passed = rel.iter().all(|e| *e <= 1e-4) && beta_max == 0.0;
    write_json(
        &a.out,
        "example_report.json",
        json!({
            "example": "mean-variance",
            "grid": n,
            "method": method_name(a.method),
            "relative_error": { "lambda": rel[0], "gamma": rel[1], "kappa": rel[2] },
            "beta_max": beta_max,
            "gain_at_0": p.gain(0.0),
            "offset_at_0": p.offset(0.0),
            "passed": passed,
        }),
    )?;
    println!("mean-variance: relative errors Lambda {:.2e}, gamma {:.2e}, kappa {:.2e}", rel[0], rel[1], rel[2]);
    Ok(passed)
}

fn systemic_risk_example(p: &SystemicRiskParams, a: &ExampleArgs) -> Res<bool> {
    let n = a.grid.unwrap_or(400);
    let g = grid(p.horizon, n)?;
    let eq = systemic_risk_equilibrium(p, &g, 1e-12)?;
    let nodes = g.nodes();
    let mut f = create(&a.out, "oracle.csv")?;
    writeln!(f, "tau,t,Lambda,kappa,residual")?;
    let mut worst = 0.0f64;
    for (r, j, v) in eq.solution.lambda.iter() {
        let k = eq.kappa.get(r, j);
        if j < n {
            let res = systemic_risk_residual(p, &eq.solution, r, j);
            worst = worst.max(res.abs());
            writeln!(f, "{},{},{v},{k},{res}", nodes[r], nodes[j])?;
        } else {
            // terminal values are assigned
            writeln!(f, "{},{},{v},{k},0", nodes[r], nodes[j])?;
        }
    }
    f.flush()?;
    let c = SystemicRiskConstants::new(p);
    let passed = worst <= 1e-6;
    write_json(
        &a.out,
        "example_report.json",
        json!({
            "example": "systemic-risk",
            "grid": n,
            "constants": c,
            "threshold": c.threshold(),
            "report": eq.solution.report,
            "max_residual": worst,
            "passed": passed,
        }),
    )?;
    println!("systemic-risk: max residual {worst:.3e}");
    Ok(passed)
}

fn nonlq_example(p: &NonLQParams, a: &ExampleArgs) -> Res<bool> {
    let n = a.grid.unwrap_or(200);
    let g = grid(p.horizon, n)?;
    let s = nonlq_solution(p, &g);
    let mut f = create(&a.out, "oracle.csv")?;
    writeln!(f, "tau,t,A,residual")?;
    let mut worst = 0.0f64;
    for (i, row) in s.a.iter().enumerate() {
        for (k, v) in row.iter().enumerate() {
            let (tau, t) = (s.times[i], s.times[i + k]);
            let res = if k > 0 && i + k < n { p.a_residual(tau, t, 1e-4) } else { 0.0 };
            worst = worst.max(res.abs());
            writeln!(f, "{tau},{t},{v},{res}")?;
        }
    }
    f.flush()?;
    let mut f = create(&a.out, "strategy.csv")?;
    writeln!(f, "t,alpha")?;
    for (t, al) in s.times.iter().zip(&s.alpha) {
        writeln!(f, "{t},{al}")?;
    }
    f.flush()?;
    let passed = worst <= 1e-6;
    write_json(&a.out, "example_report.json", json!({ "example": "nonlq", "grid": n, "max_residual": worst, "passed": passed }))?;
    println!("nonlq: max value-coefficient residual {worst:.3e}");
    Ok(passed)
}

pub fn residuals(a: &SolveArgs) -> Res<bool> {
    match load(&a.model)? {
        Problem::Lq(model) => {
            let sol = solve_lq(&model, a.method, a.grid, a.substeps)?;
            let nodes = sol.nodes().to_vec();
            let n = sol.grid.cells();
            let mut f = create(&a.out, "residuals.csv")?;
            writeln!(f, "tau,t,lambda,beta,gamma,kappa")?;
            for r in 0..n {
                for j in r..n {
                    let x = residual_at(&model, &sol, r, j)?;
                    writeln!(f, "{},{},{},{},{},{}", nodes[r], nodes[j], x.lambda, x.beta, x.gamma, x.kappa)?;
                }
            }
            f.flush()?;
            let max = max_residuals(&model, &sol)?;
            let d = model.dims.d;
            let mu = MeasureMoments { mean: Vector::from_element(d, 1.0), cov: Mat::identity(d, d) * 0.25 };
            let mut master = 0.0f64;
            for i in 0..10 {
                for j in i..10 {
                    let (tau, t) = (model.horizon * i as f64 / 10.0, model.horizon * j as f64 / 10.0);
                    let r = master_residual(&model, &sol, tau, t, &mu)?;
                    master = master.max(r / (1.0 + value(&sol, tau, t, &mu).abs()));
                }
            }
            write_json(
                &a.out,
                "residual_report.json",
                json!({ "method": method_name(a.method), "grid": a.grid, "max": max, "master_equation_scaled_max": master }),
            )?;
            println!("max residuals: Lambda {:.3e}, beta {:.3e}, gamma {:.3e}, kappa {:.3e}; master {:.3e}", max.lambda, max.beta, max.gamma, max.kappa, master);
        }
        Problem::NonLq(p) => {
            let g = grid(p.horizon, a.grid)?;
            let nodes = g.nodes();
            let mut f = create(&a.out, "residuals.csv")?;
            writeln!(f, "tau,t,a")?;
            let n = nodes.len();
            for i in 0..n {
                for j in i + 1..n - 1 {
                    writeln!(f, "{},{},{}", nodes[i], nodes[j], p.a_residual(nodes[i], nodes[j], 1e-4))?;
                }
            }
            f.flush()?;
            let worst = nonlq_max_residual(&p, nodes);
            write_json(&a.out, "residual_report.json", json!({ "grid": a.grid, "max_a_residual": worst }))?;
            println!("max value-coefficient residual {worst:.3e}");
        }
    }
    Ok(true)
}
