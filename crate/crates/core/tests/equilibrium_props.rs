mod common;

use std::sync::OnceLock;

use mfeq_core::equilibrium::{
    equilibrium_affine, g_functional, gamma, gamma_quadratic, gamma_scan, master_residual, terminal_value, value, value_at_node, write_gamma_scan,
    AffinePerturbation, FeedbackStrategy, MeasureMoments,
};
use mfeq_core::examples::{mean_variance_model, systemic_risk_equilibrium, systemic_risk_model, MeanVarianceParams, SystemicRiskParams};
use mfeq_core::linalg::{Mat, Vector};
use mfeq_core::model::{Dims, LQModel};
use mfeq_core::riccati::{solve_fixed_point, FixedPointOptions, RiccatiSolution, TriangularGrid};
use proptest::prelude::*;

struct Solved {
    model: LQModel,
    sol: RiccatiSolution,
}

fn mean_variance() -> &'static Solved {
    static S: OnceLock<Solved> = OnceLock::new();
    S.get_or_init(|| {
        let model = mean_variance_model(&MeanVarianceParams::demo());
        let sol = solve_fixed_point(&model, &TriangularGrid::uniform(1.0, 100).unwrap(), FixedPointOptions::default()).unwrap();
        Solved { model, sol }
    })
}

fn systemic_risk() -> &'static Solved {
    static S: OnceLock<Solved> = OnceLock::new();
    S.get_or_init(|| {
        let p = SystemicRiskParams::demo();
        let eq = systemic_risk_equilibrium(&p, &TriangularGrid::uniform(1.0, 200).unwrap(), 1e-12).unwrap();
        Solved { model: systemic_risk_model(&p), sol: eq.riccati_solution(&p).unwrap() }
    })
}

fn random_solved() -> &'static Solved {
    static S: OnceLock<Solved> = OnceLock::new();
    S.get_or_init(|| {
        let model = common::random_model(14);
        let sol = solve_fixed_point(&model, &TriangularGrid::uniform(1.0, 60).unwrap(), FixedPointOptions::default()).unwrap();
        Solved { model, sol }
    })
}

fn moments(d: usize, mean: &[f64], chol: &[f64]) -> MeasureMoments {
    let l = Mat::from_fn(d, d, |i, j| if j <= i { chol[i * 3 + j] } else { 0.0 });
    MeasureMoments::new(Vector::from_fn(d, |i, _| mean[i]), &l * l.transpose()).unwrap()
}

fn affine(m: usize, d: usize, a: &[f64], c: &[f64]) -> AffinePerturbation {
    AffinePerturbation::new(Mat::from_fn(m, d, |i, j| a[i * 3 + j]), Vector::from_fn(m, |i, _| c[i]))
}

fn cases() -> [&'static Solved; 3] {
    [mean_variance(), systemic_risk(), random_solved()]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gamma_is_nonnegative_and_both_routes_agree(
        which in 0usize..3,
        t in 0.0f64..0.99,
        mean in prop::collection::vec(-3.0f64..3.0, 3),
        chol in prop::collection::vec(-1.0f64..1.0, 9),
        a in prop::collection::vec(-5.0f64..5.0, 9),
        c in prop::collection::vec(-5.0f64..5.0, 3),
    ) {
        let s = cases()[which];
        let (d, m) = (s.model.dims.d, s.model.dims.m);
        let mu = moments(d, &mean, &chol);
        let v = affine(m, d, &a, &c);
        let g = gamma(&s.model, &s.sol, t, &mu, &v).unwrap();
        let q = gamma_quadratic(&s.model, &s.sol, t, &mu, &v).unwrap();
        prop_assert!(g >= -1e-10 * (1.0 + q.abs()), "{g}");
        prop_assert!((g - q).abs() <= 1e-9 * (1.0 + q.abs()), "{g} vs {q}");
    }

    #[test]
    fn equilibrium_map_is_a_stationary_point(
        which in 0usize..3,
        t in 0.0f64..0.99,
        mean in prop::collection::vec(-2.0f64..2.0, 3),
        chol in prop::collection::vec(-1.0f64..1.0, 9),
    ) {
        let s = cases()[which];
        let (d, m) = (s.model.dims.d, s.model.dims.m);
        let mu = moments(d, &mean, &chol);
        let star = equilibrium_affine(&s.model, &s.sol, t, &mu).unwrap();
        let g0 = g_functional(&s.model, &s.sol, t, t, &mu, &star).unwrap();
        prop_assert!(gamma(&s.model, &s.sol, t, &mu, &star).unwrap().abs() <= 1e-10);
        let h = 1e-5;
        let mut grad2 = 0.0;
        for k in 0..m * d + m {
            let bump = |sign: f64| {
                let mut v = star.clone();
                if k < m * d { v.A[(k / d, k % d)] += sign * h } else { v.c[k - m * d] += sign * h }
                g_functional(&s.model, &s.sol, t, t, &mu, &v).unwrap()
            };
            let dk = (bump(1.0) - bump(-1.0)) / (2.0 * h);
            grad2 += dk * dk;
        }
        prop_assert!(grad2.sqrt() <= 1e-6 * (1.0 + g0.abs()), "{}", grad2.sqrt());
    }
}

proptest! {
    // each case re-solves the model
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn scaling_costs_keeps_gains_and_scales_gamma(
        k in 0.1f64..10.0,
        t in 0.0f64..0.95,
        mean in prop::collection::vec(-2.0f64..2.0, 3),
        a in prop::collection::vec(-2.0f64..2.0, 9),
        c in prop::collection::vec(-2.0f64..2.0, 3),
    ) {
        let s = mean_variance();
        let scaled = s.model.with_costs_scaled(k);
        let sol = solve_fixed_point(&scaled, &s.sol.grid, FixedPointOptions::default()).unwrap();
        let f0 = FeedbackStrategy::from_solution(&s.model, &s.sol).unwrap();
        let f1 = FeedbackStrategy::from_solution(&scaled, &sol).unwrap();
        let (a0, b0, _) = f0.gains_at(t);
        let (a1, b1, _) = f1.gains_at(t);
        prop_assert!((a0 - a1).amax() <= 1e-9 && (b0 - b1).amax() <= 1e-9);
        let mu = MeasureMoments::new(Vector::from_element(1, mean[0]), Mat::from_element(1, 1, 0.3)).unwrap();
        let v = affine(1, 1, &a, &c);
        let g0 = gamma(&s.model, &s.sol, t, &mu, &v).unwrap();
        let g1 = gamma(&scaled, &sol, t, &mu, &v).unwrap();
        prop_assert!((g1 - k * g0).abs() <= 1e-8 * (1.0 + g1.abs()));
    }
}

#[test]
fn value_at_horizon_is_terminal_cost() {
    for s in cases() {
        let d = s.model.dims.d;
        let mu = moments(d, &[0.4, -1.0, 2.0], &[0.7, 0.0, 0.0, 0.2, 0.5, 0.0, -0.1, 0.3, 0.9]);
        let n = s.sol.nodes().len();
        for r in [0, n / 3, n - 1] {
            let tau = s.sol.nodes()[r];
            assert_eq!(value_at_node(&s.sol, r, n - 1, &mu), terminal_value(&s.model, tau, &mu));
            assert_eq!(master_residual(&s.model, &s.sol, tau, 1.0, &mu).unwrap(), 0.0);
        }
    }
}

#[test]
fn master_equation_holds_on_solved_models() {
    for s in cases() {
        let d = s.model.dims.d;
        for (k, (tau, t)) in [(0.0, 0.1), (0.2, 0.55), (0.5, 0.5), (0.7, 0.93)].iter().enumerate() {
            let x = k as f64 * 0.3 - 0.4;
            let mu = moments(d, &[x, 1.0, -x], &[0.5, 0.0, 0.0, 0.1, 0.6, 0.0, 0.2, -0.3, 0.4]);
            let res = master_residual(&s.model, &s.sol, *tau, *t, &mu).unwrap();
            let v = value(&s.sol, *tau, *t, &mu);
            assert!(res <= 1e-5 * (1.0 + v.abs()), "{res} at ({tau}, {t})");
        }
    }
}

#[test]
fn zero_model_master_residual_vanishes() {
    let model = LQModel::zero(Dims { d: 1, m: 1, n: 1, k: 1 }, 1.0, 1.0);
    let sol = solve_fixed_point(&model, &TriangularGrid::uniform(1.0, 10).unwrap(), FixedPointOptions::default()).unwrap();
    let mu = MeasureMoments::new(Vector::from_element(1, 0.3), Mat::from_element(1, 1, 2.0)).unwrap();
    assert_eq!(master_residual(&model, &sol, 0.2, 0.6, &mu).unwrap(), 0.0);
}

#[test]
fn gamma_scan_rows_and_csv() {
    let s = mean_variance();
    let mu = MeasureMoments::point(Vector::from_element(1, 1.0));
    let star = equilibrium_affine(&s.model, &s.sol, 0.5, &mu).unwrap();
    let perts = vec![star.clone(), AffinePerturbation::new(&star.A * 2.0, star.c.clone())];
    let rows = gamma_scan(&s.model, &s.sol, &[0.5], &mu, &perts).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].gamma.abs() < 1e-12);
    assert!(rows[1].gamma > 0.0 && (rows[1].gamma - rows[1].analytic_min_check).abs() < 1e-12);
    let mut buf = Vec::new();
    write_gamma_scan(&mut buf, &rows).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("t,perturbation_id,gamma,analytic_min_check\n"));
    assert_eq!(text.lines().count(), 3);
}
