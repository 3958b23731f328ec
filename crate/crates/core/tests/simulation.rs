use std::sync::Arc;

use mfeq_core::equilibrium::{AffinePerturbation, FeedbackStrategy};
use mfeq_core::examples::{mean_variance_closed_form, mean_variance_model, systemic_risk_equilibrium, systemic_risk_model, MeanVarianceParams, NonLQParams, SystemicRiskParams};
use mfeq_core::linalg::{Mat, Vector};
use mfeq_core::mckv_sim::{estimate_cost, simulate, spike, summarize, CostSpec, EmpiricalMeasure, InitLaw, SimConfig, SimError, SimModel, StrategySpec};
use mfeq_core::model::{DiscountFn, TimeFn};
use mfeq_core::riccati::TriangularGrid;

fn mean_variance_strategy() -> (mfeq_core::LQModel, Arc<FeedbackStrategy>) {
    let p = MeanVarianceParams::demo();
    let (_, fb) = mean_variance_closed_form(&p, &TriangularGrid::uniform(1.0, 100).unwrap()).unwrap();
    (mean_variance_model(&p), Arc::new(fb))
}

#[test]
fn runs_are_bitwise_reproducible() {
    let (model, fb) = mean_variance_strategy();
    let init = InitLaw::Gaussian { mean: vec![1.0], cov: vec![vec![0.25]] };
    let mut cfg = SimConfig::new(0.0, 200, 6, 0.01, 42);
    cfg.keep_particles = 3;
    let a = simulate(SimModel::Lq(&model), &StrategySpec::LqFeedback(fb.clone()), &init, &cfg).unwrap();
    let b = simulate(SimModel::Lq(&model), &StrategySpec::LqFeedback(fb), &init, &cfg).unwrap();
    assert_eq!(a, b);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let (model2, fb2) = mean_variance_strategy();
    let c = pool.install(|| simulate(SimModel::Lq(&model2), &StrategySpec::LqFeedback(fb2), &init, &cfg).unwrap());
    assert_eq!(a.mean, c.mean);
    assert_eq!(a.terminal, c.terminal);
}

#[test]
fn empirical_moments_ignore_particle_order() {
    let (model, fb) = mean_variance_strategy();
    let init = InitLaw::Gaussian { mean: vec![1.0], cov: vec![vec![0.25]] };
    let ens = simulate(SimModel::Lq(&model), &StrategySpec::LqFeedback(fb), &init, &SimConfig::new(0.0, 101, 2, 0.02, 7)).unwrap();
    let m = ens.terminal_measure(1);
    let mut rev = m.samples.clone();
    rev.reverse();
    rev.rotate_left(17);
    let (a, b) = (m.moments(), EmpiricalMeasure { samples: rev }.moments());
    assert!((a.mean - b.mean).amax() <= 1e-12 && (a.cov - b.cov).amax() <= 1e-12);
}

#[test]
fn spike_by_base_changes_nothing() {
    let (model, fb) = mean_variance_strategy();
    let base = StrategySpec::LqFeedback(fb);
    let spiked = spike(base.clone(), base.clone(), 0.2, 0.1, 1.0).unwrap();
    let init = InitLaw::Point { x: vec![1.0] };
    let cfg = SimConfig::new(0.0, 50, 4, 0.01, 3);
    let a = simulate(SimModel::Lq(&model), &base, &init, &cfg).unwrap();
    let b = simulate(SimModel::Lq(&model), &spiked, &init, &cfg).unwrap();
    assert_eq!(a.terminal, b.terminal);
}

#[test]
fn spike_diverges_only_inside_and_after_window() {
    let (model, fb) = mean_variance_strategy();
    let base = StrategySpec::LqFeedback(fb);
    let v = StrategySpec::Affine(AffinePerturbation::new(Mat::zeros(1, 1), Vector::from_element(1, 5.0)));
    let spiked = spike(base.clone(), v, 0.3, 0.1, 1.0).unwrap();
    let init = InitLaw::Point { x: vec![1.0] };
    let mut cfg = SimConfig::new(0.0, 20, 1, 0.01, 9);
    cfg.keep_particles = 2;
    let a = simulate(SimModel::Lq(&model), &base, &init, &cfg).unwrap();
    let b = simulate(SimModel::Lq(&model), &spiked, &init, &cfg).unwrap();
    for (x, y) in a.kept.iter().zip(&b.kept) {
        let t = a.times[x.2];
        if t <= 0.3 + 1e-12 {
            assert_eq!(x.3, y.3, "t={t}");
        } else {
            assert_ne!(x.3, y.3, "t={t}");
        }
    }
    // after the window both follow the base rule, from different states
    let s = a.times.iter().position(|t| *t > 0.5).unwrap();
    let (ga, gb) = (a.gain_at(0, s), b.gain_at(0, s));
    assert_eq!(ga.0, gb.0);
    assert_ne!(ga.1, gb.1);
}

#[test]
fn invalid_spike_windows_are_rejected() {
    let base = StrategySpec::ScalarLinear(TimeFn::scalar(0.0));
    assert!(matches!(spike(base.clone(), base.clone(), 0.95, 0.1, 1.0), Err(SimError::InvalidConfig(_))));
    assert!(matches!(spike(base.clone(), base, 0.2, 0.0, 1.0), Err(SimError::InvalidConfig(_))));
}

fn conditional_mean_rms(particles: usize, seed: u64) -> f64 {
    let p = SystemicRiskParams::demo();
    let eq = systemic_risk_equilibrium(&p, &TriangularGrid::uniform(1.0, 100).unwrap(), 1e-12).unwrap();
    let model = systemic_risk_model(&p);
    let init = InitLaw::Gaussian { mean: vec![0.5], cov: vec![vec![0.2]] };
    let cfg = SimConfig::new(0.0, particles, 16, 0.01, seed);
    let ens = simulate(SimModel::Lq(&model), &StrategySpec::LqFeedback(Arc::new(eq.feedback)), &init, &cfg).unwrap();
    let mut acc = 0.0;
    let mut count = 0.0;
    for path in 0..ens.paths {
        let w = ens.common_path(path);
        let x0 = ens.mean[path][0];
        for s in 0..=ens.steps {
            let e = ens.mean[path][s] - x0 - p.sigma * p.rho * w[s];
            acc += e * e;
            count += 1.0;
        }
    }
    (acc / count).sqrt()
}

#[test]
fn doubling_particles_shrinks_mean_discrepancy() {
    // the discrepancy is the average idiosyncratic noise, of size N^(-1/2)
    let seeds = [1u64, 2, 3, 4];
    let small: f64 = seeds.iter().map(|s| conditional_mean_rms(500, *s)).sum::<f64>();
    let large: f64 = seeds.iter().map(|s| conditional_mean_rms(1000, *s + 100)).sum::<f64>();
    let ratio = small / large;
    assert!((1.1..2.0).contains(&ratio), "{ratio}");
}

#[test]
fn common_random_numbers_reduce_variance() {
    let (model, fb) = mean_variance_strategy();
    let base = StrategySpec::LqFeedback(fb);
    let v = StrategySpec::Affine(AffinePerturbation::new(Mat::from_element(1, 1, -1.0), Vector::from_element(1, 2.0)));
    let spiked = spike(base.clone(), v, 0.2, 0.1, 1.0).unwrap();
    let init = InitLaw::Gaussian { mean: vec![1.0], cov: vec![vec![0.25]] };
    let cost = CostSpec::Lq { model: &model, tau: 0.2 };
    let run = |s: &StrategySpec, seed| {
        let cfg = SimConfig::new(0.2, 1000, 32, 0.01, seed);
        estimate_cost(&simulate(SimModel::Lq(&model), s, &init, &cfg).unwrap(), &cost).per_path
    };
    let b = run(&base, 1);
    let crn: Vec<f64> = run(&spiked, 1).iter().zip(&b).map(|(x, y)| x - y).collect();
    let ind: Vec<f64> = run(&spiked, 2).iter().zip(&b).map(|(x, y)| x - y).collect();
    let (_, se_crn) = summarize(&crn, false);
    let (_, se_ind) = summarize(&ind, false);
    assert!(se_crn < se_ind, "{se_crn} vs {se_ind}");
}

#[test]
fn log_utility_cost_matches_closed_form() {
    let p = NonLQParams {
        mu: TimeFn::scalar(0.08),
        sigma: TimeFn::scalar(0.25),
        sigma0: TimeFn::scalar(0.1),
        theta: 0.4,
        delta: 1.0,
        lambda: DiscountFn::Hyperbolic { a: 1.0, b: 1.0 },
        horizon: 1.0,
    };
    let t0 = 0.1;
    let init = InitLaw::Point { x: vec![2.0] };
    let a = p.alpha_hat(0.5);
    let exact = -p.lambda.eval(1.0 - t0) * ((1.0 - p.theta) * 2f64.ln() + (1.0 - t0) * ((1.0 - p.theta) * a * 0.08 - 0.5 * a * a * (0.0625 + 0.6 * 0.01)));
    assert!((p.cost(&init, t0, t0, &|_| a, &[]) - exact).abs() < 1e-10);
    let cfg = SimConfig::new(t0, 2000, 32, 0.01, 5);
    let ens = simulate(SimModel::NonLq(&p), &StrategySpec::ScalarLinear(TimeFn::scalar(a)), &init, &cfg).unwrap();
    let c = estimate_cost(&ens, &CostSpec::NonLq { params: &p, tau: t0 });
    assert!((c.mean - exact).abs() <= 3.0 * c.stderr, "{} ± {} vs {exact}", c.mean, c.stderr);
    assert!(ens.terminal.iter().flatten().all(|x| *x > 0.0));
}

#[test]
fn rejects_bad_configurations() {
    let (model, fb) = mean_variance_strategy();
    let s = StrategySpec::LqFeedback(fb);
    let init = InitLaw::Point { x: vec![1.0] };
    for cfg in [SimConfig::new(0.0, 10, 2, 0.3, 1), SimConfig::new(0.0, 0, 2, 0.01, 1), SimConfig::new(1.0, 10, 2, 0.01, 1)] {
        assert!(simulate(SimModel::Lq(&model), &s, &init, &cfg).is_err());
    }
    let wrong_dim = InitLaw::Point { x: vec![1.0, 2.0] };
    assert!(simulate(SimModel::Lq(&model), &s, &wrong_dim, &SimConfig::new(0.0, 10, 2, 0.01, 1)).is_err());
}
