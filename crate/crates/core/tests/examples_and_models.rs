mod common;

use mfeq_core::examples::{
    mean_variance_model, nonlq_solution, parse_params, systemic_risk_equilibrium, systemic_risk_model, ExampleParams, MeanVarianceParams, NonLQParams,
    SystemicRiskParams,
};
use mfeq_core::linalg::Mat;
use mfeq_core::model::{check_monotonicity, eval_two_time, load_model, parse_model, DiscountFn, Segment, TimeFn, TwoTimeFn};
use mfeq_core::riccati::{systemic_risk_residual, SystemicRiskConstants, TriangularGrid};
use proptest::prelude::*;

fn models_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../models")
}

#[test]
fn bundled_model_files_match_builders() {
    let ex1 = load_model(&models_dir().join("ex1.json")).unwrap();
    let ex2 = load_model(&models_dir().join("ex2.json")).unwrap();
    let b1 = mean_variance_model(&MeanVarianceParams::demo());
    let b2 = systemic_risk_model(&SystemicRiskParams::demo());
    for (file, built) in [(&ex1, &b1), (&ex2, &b2)] {
        assert_eq!(file.dims, built.dims);
        for (tau, t) in [(0.0, 0.0), (0.1, 0.6), (0.5, 1.0)] {
            let (a, b) = (file.coeffs_at(t), built.coeffs_at(t));
            assert!((a.B - b.B).amax() + (a.Bbar - b.Bbar).amax() + (a.C - b.C).amax() < 1e-15);
            assert!((a.F - b.F).amax() + (a.F0 - b.F0).amax() + (a.theta - b.theta).amax() + (a.theta0 - b.theta0).amax() < 1e-15);
            let (ka, kb) = (file.kernels_at(tau, t), built.kernels_at(tau, t));
            assert!((ka.Q - kb.Q).amax() + (ka.R - kb.R).amax() + (ka.M - kb.M).amax() + (ka.Mbar - kb.Mbar).amax() < 1e-15);
            let (ta, tb) = (file.terminal_at(tau), built.terminal_at(tau));
            assert!((ta.P - tb.P).amax() + (ta.Pbar - tb.Pbar).amax() + (ta.p - tb.p).amax() < 1e-15);
        }
    }
    // Example 2 reads B = -k, Bbar = k, C = 1
    let c = ex2.coeffs_at(0.3);
    assert_eq!((c.B[(0, 0)], c.Bbar[(0, 0)], c.C[(0, 0)]), (-2.0, 2.0, 1.0));
    // Example 1 has no mean-field drift terms
    assert!(ex1.coeffs_at(0.3).Bbar.amax() == 0.0 && ex1.coeffs_at(0.3).Cbar.amax() == 0.0);
}

#[test]
fn bundled_parameter_files_parse() {
    for (file, kind) in [("mean_variance.json", 0), ("systemic_risk.json", 1), ("nonlq.json", 2)] {
        let text = std::fs::read_to_string(models_dir().join(file)).unwrap();
        let p = parse_params(&text).unwrap();
        let got = match p {
            ExampleParams::MeanVariance(p) => {
                assert_eq!(p, MeanVarianceParams::demo());
                0
            }
            ExampleParams::SystemicRisk(p) => {
                assert_eq!(p, SystemicRiskParams::demo());
                1
            }
            ExampleParams::NonLQ(p) => {
                assert_eq!(p, NonLQParams::demo());
                2
            }
        };
        assert_eq!(got, kind);
    }
}

#[test]
fn segment_gap_is_located() {
    let text = r#"{"dims":{"d":1,"m":1,"n":1,"k":1},"horizon":1.0,
        "dynamics":{"B":{"kind":"poly","segments":[{"start":0,"end":0.4,"coeffs":[1]},{"start":0.5,"end":1,"coeffs":[1]}]}},
        "costs":{"R":{"kind":"constant","value":1}}}"#;
    let e = parse_model(text).unwrap_err();
    assert_eq!(e.location, "dynamics.B");
    assert!(e.message.contains("gap at t=0.4"), "{}", e.message);
}

#[test]
fn time_varying_parameters_are_accepted() {
    let text = r#"{"kind":"mean-variance","horizon":1,"r":{"kind":"poly","segments":[{"start":0,"end":1,"coeffs":[0.01,0.02]}]},
        "rho":0.2,"theta":0.3,"theta0":0.1,"eta":1}"#;
    match parse_params(text).unwrap() {
        ExampleParams::MeanVariance(p) => assert!((p.r.eval_scalar(0.5) - 0.02).abs() < 1e-15),
        _ => panic!("wrong kind"),
    }
}

#[test]
fn systemic_risk_residual_and_terminal_row() {
    let p = SystemicRiskParams::demo();
    let grid = TriangularGrid::uniform(1.0, 400).unwrap();
    let eq = systemic_risk_equilibrium(&p, &grid, 1e-12).unwrap();
    let n = grid.cells();
    let nodes = grid.nodes();
    let mut worst = 0.0f64;
    for r in 0..n {
        for j in r..n {
            worst = worst.max(systemic_risk_residual(&p, &eq.solution, r, j).abs());
        }
        assert_eq!(*eq.solution.lambda.get(r, n), 0.5 * p.c * p.lambda.eval(1.0 - nodes[r]));
    }
    assert!(worst <= 1e-6, "{worst}");
    assert_eq!(eq.kappa.get(n, n), &0.0);
}

#[test]
fn systemic_risk_reduces_to_classical_riccati() {
    // y = Lambda + q/2 solves y' = 2y^2 + 2ky - (kq + eta/2), y(T) = (c+q)/2
    let mut p = SystemicRiskParams::demo();
    p.lambda = DiscountFn::one();
    let (k, q, eta) = (p.k, p.q, p.eta);
    let disc = (4.0 * k * k + 8.0 * (k * q + 0.5 * eta)).sqrt();
    let (r1, r2) = ((-2.0 * k - disc) / 4.0, (-2.0 * k + disc) / 4.0);
    let yt = 0.5 * (p.c + q);
    let cc = (yt - r2) / (yt - r1);
    let y = |t: f64| {
        let e = (2.0 * (r2 - r1) * (t - 1.0)).exp();
        (r2 - r1 * cc * e) / (1.0 - cc * e)
    };
    let grid = TriangularGrid::uniform(1.0, 200).unwrap();
    let eq = systemic_risk_equilibrium(&p, &grid, 1e-12).unwrap();
    let nodes = grid.nodes();
    let err = eq.solution.lambda.iter().map(|(_, j, v)| (v + 0.5 * q - y(nodes[j])).abs()).fold(0.0, f64::max);
    assert!(err <= 1e-6, "{err}");
}

#[test]
fn systemic_risk_constants_are_reported() {
    let p = SystemicRiskParams::demo();
    let c = SystemicRiskConstants::new(&p);
    assert!((c.c1 - 0.75).abs() < 1e-12);
    assert!(c.threshold() >= 1.0);
    let eq = systemic_risk_equilibrium(&p, &TriangularGrid::uniform(1.0, 50).unwrap(), 1e-12).unwrap();
    assert_eq!(eq.solution.report.precondition_met, p.k > c.threshold());
}

#[test]
fn full_relative_weight_gives_zero_strategy() {
    let mut p = NonLQParams::demo();
    p.theta = 1.0;
    let sol = nonlq_solution(&p, &TriangularGrid::uniform(1.0, 20).unwrap());
    assert!(sol.alpha.iter().all(|a| *a == 0.0));
}

#[test]
fn value_coefficient_solves_its_ode() {
    for delta in [0.5, 1.0, 2.0, 4.0] {
        let mut p = NonLQParams::demo();
        p.delta = delta;
        for (tau, t) in [(0.0, 0.2), (0.3, 0.5), (0.6, 0.9)] {
            let r = p.a_residual(tau, t, 1e-4);
            assert!(r.abs() <= 1e-8, "delta={delta}: {r}");
        }
        assert!((p.a_coef(0.2, 1.0) + p.lambda.eval(0.8)).abs() < 1e-14);
    }
}

#[test]
fn equilibrium_proportion_maximizes_growth() {
    for delta in [0.5, 1.0, 3.0] {
        let mut p = NonLQParams::demo();
        p.delta = delta;
        let a = p.alpha_hat(0.4);
        let h = p.growth(a, 0.4);
        let sign = if p.log_case() || p.power() > 0.0 { 1.0 } else { -1.0 };
        for d in [-0.5, -0.01, 0.01, 0.5] {
            // J = -lambda/p F exp(int h): the cost falls as p h rises
            assert!(sign * (p.growth(a + d, 0.4) - h) < 0.0, "delta={delta} d={d}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn separable_kernel_on_the_diagonal(rate in 0.0f64..2.0, c0 in -2.0f64..2.0, c1 in -2.0f64..2.0, tau in 0.0f64..1.0) {
        let base = TimeFn::Poly(vec![Segment { start: 0.0, end: 1.0, coeffs: vec![Mat::from_element(1, 1, c0), Mat::from_element(1, 1, c1)] }]);
        let k = TwoTimeFn::Separable { lambda: DiscountFn::Exponential { rate }, base: base.clone() };
        prop_assert!((eval_two_time(&k, tau, tau) - base.eval(tau)).amax() <= 1e-14);
    }

    #[test]
    fn continuous_kernels_are_continuous_at_breakpoints(v0 in -2.0f64..2.0, s1 in -3.0f64..3.0, s2 in -3.0f64..3.0, b in 0.1f64..0.9, tau in 0.0f64..0.1) {
        let v1 = v0 + s1 * b;
        let base = TimeFn::Poly(vec![
            Segment { start: 0.0, end: b, coeffs: vec![Mat::from_element(1, 1, v0), Mat::from_element(1, 1, s1)] },
            Segment { start: b, end: 1.0, coeffs: vec![Mat::from_element(1, 1, v1), Mat::from_element(1, 1, s2)] },
        ]);
        let k = TwoTimeFn::Separable { lambda: DiscountFn::Hyperbolic { a: 1.0, b: 0.5 }, base };
        let h = 1e-12;
        prop_assert!((eval_two_time(&k, tau, b - h) - eval_two_time(&k, tau, b + h)).amax() <= 1e-10);
    }

    #[test]
    fn recipe_models_pass_monotonicity(seed in 0u64..1000, n in 3usize..40) {
        let model = common::random_model(seed);
        let nodes: Vec<f64> = (0..=n).map(|i| i as f64 / n as f64).collect();
        prop_assert!(check_monotonicity(&model, &nodes).passed);
    }

    #[test]
    fn parse_params_never_panics(text in ".{0,200}") {
        let _ = parse_params(&text);
        let _ = parse_model(&text);
    }
}
