//! Shared fixtures for the integration tests.

#![allow(dead_code, non_snake_case)]

use mfeq_core::linalg::Mat;
use mfeq_core::model::{Dims, DiscountFn, LQModel, TimeFn, TwoTimeFn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Mat {
    Mat::from_fn(r, c, |_, _| scale * rng.random_range(-1.0..1.0))
}

fn gram(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Mat {
    let k = rand_mat(rng, d, d, scale);
    &k * k.transpose()
}

fn constant(m: Mat) -> TimeFn {
    TimeFn::Constant(m)
}

/// Random model with decreasing discount and PSD separable cost bases, so
/// that it passes both the positivity and the monotonicity checks.
pub fn random_model(seed: u64) -> LQModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(1..=3);
    let m = rng.random_range(1..=3);
    let mut model = LQModel::zero(Dims { d, m, n: 1, k: 1 }, 1.0, 1.0);
    let s = 0.3;
    let dy = &mut model.dynamics;
    dy.b0 = constant(rand_mat(&mut rng, d, 1, s));
    dy.B = constant(rand_mat(&mut rng, d, d, s));
    dy.Bbar = constant(rand_mat(&mut rng, d, d, s));
    dy.C = constant(rand_mat(&mut rng, d, m, s));
    dy.Cbar = constant(rand_mat(&mut rng, d, m, s));
    dy.theta = constant(rand_mat(&mut rng, d, 1, s));
    dy.D = constant(rand_mat(&mut rng, d, d, s));
    dy.Dbar = constant(rand_mat(&mut rng, d, d, s));
    dy.F = constant(rand_mat(&mut rng, d, m, s));
    dy.Fbar = constant(rand_mat(&mut rng, d, m, s));
    dy.theta0 = constant(rand_mat(&mut rng, d, 1, s));
    dy.D0 = constant(rand_mat(&mut rng, d, d, s));
    dy.D0bar = constant(rand_mat(&mut rng, d, d, s));
    dy.F0 = constant(rand_mat(&mut rng, d, m, s));
    dy.F0bar = constant(rand_mat(&mut rng, d, m, s));

    let lambda = if rng.random_bool(0.5) {
        DiscountFn::Exponential { rate: rng.random_range(0.2..1.0) }
    } else {
        DiscountFn::Hyperbolic { a: rng.random_range(0.5..2.0), b: rng.random_range(0.2..1.0) }
    };
    let sep = |b: Mat| TwoTimeFn::separable(lambda.clone(), b);
    let delta = 0.5;
    let q0 = gram(&mut rng, d, 0.7);
    let qbar0 = &q0 * -0.5 + gram(&mut rng, d, 0.4);
    let g = gram(&mut rng, m, 0.5);
    let r0 = Mat::identity(m, m) * delta + &g;
    let rbar0 = &g * -0.3 + gram(&mut rng, m, 0.4);
    let p0 = gram(&mut rng, d, 0.7);
    let pbar0 = &p0 * -0.5 + gram(&mut rng, d, 0.4);
    let c = &mut model.costs;
    c.Q = sep(q0);
    c.Qbar = sep(qbar0);
    c.R = sep(r0);
    c.Rbar = sep(rbar0);
    c.P = sep(p0);
    c.Pbar = sep(pbar0);
    c.q = sep(rand_mat(&mut rng, d, 1, s));
    c.qbar = sep(rand_mat(&mut rng, d, 1, s));
    c.r = sep(rand_mat(&mut rng, m, 1, s));
    c.rbar = sep(rand_mat(&mut rng, m, 1, s));
    c.p = sep(rand_mat(&mut rng, d, 1, s));
    c.pbar = sep(rand_mat(&mut rng, d, 1, s));
    model
}

/// Largest entrywise difference over every stored node pair.
pub fn tri_gap(a: &mfeq_core::riccati::Tri<Mat>, b: &mfeq_core::riccati::Tri<Mat>) -> f64 {
    a.iter().map(|(i, j, x)| (x - b.get(i, j)).amax()).fold(0.0, f64::max)
}
