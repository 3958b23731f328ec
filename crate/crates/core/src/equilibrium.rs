//! Equilibrium feedback, quadratic value function and the first-order
//! functional `Gamma` for the LQ class.
//!
//! Measures enter only through their mean and covariance. A perturbation is
//! an affine map `v(x) = A x + c`; the functional `G(tau; t, v)` then has a
//! closed form in the moments, and `Gamma(t, mu; v) = G(t; t, v) - G(t; t, a*)`
//! where `a*` is the equilibrium feedback frozen at `(t, mu)`.

#![allow(non_snake_case)]

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::linalg::{min_eig, spd_inverse, Mat, Vector};
use crate::model::LQModel;
use crate::riccati::{block, row_derivative, Frozen, RiccatiError, RiccatiSolution, UWSZYBlock, PD_GUARD};

/// Mean and covariance of a measure on `R^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureMoments {
    pub mean: Vector,
    pub cov: Mat,
}

impl MeasureMoments {
    /// Returns `None` unless `cov` is square, symmetric and PSD to `1e-10`.
    pub fn new(mean: Vector, cov: Mat) -> Option<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return None;
        }
        if (&cov - cov.transpose()).amax() > 1e-10 * (1.0 + cov.amax()) || min_eig(&cov) < -1e-10 {
            return None;
        }
        Some(Self { mean, cov })
    }

    pub fn point(mean: Vector) -> Self {
        let d = mean.len();
        Self { mean, cov: Mat::zeros(d, d) }
    }

    /// Second moment `|mean|^2 + tr(cov)`.
    pub fn second_moment(&self) -> f64 {
        self.mean.norm_squared() + self.cov.trace()
    }
}

/// An affine map `x -> A x + c` from states to controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinePerturbation {
    pub A: Mat,
    pub c: Vector,
}

impl AffinePerturbation {
    pub fn new(A: Mat, c: Vector) -> Self {
        assert_eq!(A.nrows(), c.len(), "A and c disagree on the control dimension");
        Self { A, c }
    }

    pub fn eval(&self, x: &Vector) -> Vector {
        &self.A * x + &self.c
    }

    /// Mean of the push-forward of `mu`.
    pub fn pushed_mean(&self, mu: &MeasureMoments) -> Vector {
        &self.A * &mu.mean + &self.c
    }
}

/// Gains of the equilibrium feedback on the grid nodes.
///
/// The action is `a = -theta (x - xbar) - theta_hat xbar - c`, where `c`
/// already contains the factor one half.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackStrategy {
    pub times: Vec<f64>,
    pub theta: Vec<Mat>,
    pub theta_hat: Vec<Mat>,
    pub c: Vec<Vector>,
}

impl FeedbackStrategy {
    /// Gains from the diagonal of a solved Riccati system.
    pub fn from_solution(model: &LQModel, sol: &RiccatiSolution) -> Result<Self, RiccatiError> {
        let nodes = sol.nodes();
        let mut theta = Vec::with_capacity(nodes.len());
        let mut theta_hat = Vec::with_capacity(nodes.len());
        let mut c = Vec::with_capacity(nodes.len());
        for (j, &t) in nodes.iter().enumerate() {
            let blk = diag_block(model, sol, j);
            let (uinv, winv) = inverses(&blk, t)?;
            theta.push(uinv * blk.S.transpose());
            theta_hat.push(&winv * blk.Z.transpose());
            c.push(Vector::from_column_slice((winv * &blk.Y * 0.5).as_slice()));
        }
        Ok(Self { times: nodes.to_vec(), theta, theta_hat, c })
    }

    /// Gains linearly interpolated at `t` (clamped to the grid).
    pub fn gains_at(&self, t: f64) -> (Mat, Mat, Vector) {
        let n = self.times.len();
        if t <= self.times[0] {
            return (self.theta[0].clone(), self.theta_hat[0].clone(), self.c[0].clone());
        }
        if t >= self.times[n - 1] {
            return (self.theta[n - 1].clone(), self.theta_hat[n - 1].clone(), self.c[n - 1].clone());
        }
        let i = self.times.partition_point(|&g| g <= t) - 1;
        let w = (t - self.times[i]) / (self.times[i + 1] - self.times[i]);
        (
            &self.theta[i] * (1.0 - w) + &self.theta[i + 1] * w,
            &self.theta_hat[i] * (1.0 - w) + &self.theta_hat[i + 1] * w,
            &self.c[i] * (1.0 - w) + &self.c[i + 1] * w,
        )
    }

    /// The feedback frozen at `(t, mu)` as an affine map of the state.
    pub fn as_affine(&self, t: f64, mean: &Vector) -> AffinePerturbation {
        let (th, thh, c) = self.gains_at(t);
        let k0 = (&th - &thh) * mean - c;
        AffinePerturbation { A: -th, c: k0 }
    }
}

/// `-theta(t)(x - xbar) - theta_hat(t) xbar - c(t)`.
pub fn feedback(strategy: &FeedbackStrategy, t: f64, x: &Vector, moments: &MeasureMoments) -> Vector {
    let (th, thh, c) = strategy.gains_at(t);
    -(th * (x - &moments.mean)) - thh * &moments.mean - c
}

/// `tr(Lambda cov) + xbar' beta xbar + gamma . xbar + kappa` at `(tau, t)`.
pub fn value(sol: &RiccatiSolution, tau: f64, t: f64, moments: &MeasureMoments) -> f64 {
    let l = sol.lambda_at(tau, t);
    let b = sol.beta_at(tau, t);
    let g = sol.gamma_at(tau, t);
    quad_value(&l, &b, &g, sol.kappa_at(tau, t), moments)
}

fn quad_value(l: &Mat, b: &Mat, g: &Mat, k: f64, mu: &MeasureMoments) -> f64 {
    (l * &mu.cov).trace() + mu.mean.dot(&(b * &mu.mean)) + g.column(0).dot(&mu.mean) + k
}

/// Terminal functional `tr(P cov) + xbar'(P + Pbar) xbar + (p + pbar) . xbar`.
pub fn terminal_value(model: &LQModel, tau: f64, moments: &MeasureMoments) -> f64 {
    let p = model.terminal_at(tau);
    quad_value(&p.P, &(&p.P + &p.Pbar), &(&p.p + &p.pbar), 0.0, moments)
}

fn diag_block(model: &LQModel, sol: &RiccatiSolution, j: usize) -> UWSZYBlock {
    let t = sol.nodes()[j];
    block(&Frozen::new(model, t), &model.kernels_at(t, t), sol.lambda.get(j, j), sol.beta.get(j, j), sol.gamma.get(j, j))
}

fn inverses(blk: &UWSZYBlock, t: f64) -> Result<(Mat, Mat), RiccatiError> {
    let u = spd_inverse(&blk.U, PD_GUARD).ok_or(RiccatiError::IllConditioned { t, min_eig: min_eig(&blk.U) })?;
    let w = spd_inverse(&blk.W, PD_GUARD).ok_or(RiccatiError::IllConditioned { t, min_eig: min_eig(&blk.W) })?;
    Ok((u.0, w.0))
}

/// The block at `(tau, t)` from the interpolated solution.
pub fn block_at(model: &LQModel, sol: &RiccatiSolution, tau: f64, t: f64) -> UWSZYBlock {
    block(
        &Frozen::new(model, t),
        &model.kernels_at(tau, t),
        &sol.lambda_at(tau, t),
        &sol.beta_at(tau, t),
        &sol.gamma_at(tau, t),
    )
}

/// `G` of an affine map given the block.
pub fn g_of_block(blk: &UWSZYBlock, moments: &MeasureMoments, v: &AffinePerturbation) -> f64 {
    let m = v.pushed_mean(moments);
    let ac = &v.A * &moments.cov;
    let var = (&blk.U * &ac * v.A.transpose()).trace();
    let cross = (&blk.S * &ac).trace();
    var + m.dot(&(&blk.W * &m)) + 2.0 * cross + 2.0 * moments.mean.dot(&(&blk.Z * &m)) + blk.Y.column(0).dot(&m)
}

/// `G(tau; t, v)` for an affine `v`.
pub fn g_functional(
    model: &LQModel,
    sol: &RiccatiSolution,
    tau: f64,
    t: f64,
    moments: &MeasureMoments,
    v: &AffinePerturbation,
) -> Result<f64, RiccatiError> {
    let d = block_at(model, sol, t, t);
    inverses(&d, t)?;
    Ok(g_of_block(&block_at(model, sol, tau, t), moments, v))
}

/// The minimizer of `G(t; t, .)` at `mu`, from the interpolated diagonal.
pub fn equilibrium_affine(model: &LQModel, sol: &RiccatiSolution, t: f64, moments: &MeasureMoments) -> Result<AffinePerturbation, RiccatiError> {
    let blk = block_at(model, sol, t, t);
    let (uinv, winv) = inverses(&blk, t)?;
    let th = uinv * blk.S.transpose();
    let thh = &winv * blk.Z.transpose();
    let c = (&th - &thh) * &moments.mean - Vector::from_column_slice((winv * &blk.Y * 0.5).as_slice());
    Ok(AffinePerturbation { A: -th, c })
}

/// `Gamma(t, mu; v) = G(t; t, v) - G(t; t, a*)`.
pub fn gamma(model: &LQModel, sol: &RiccatiSolution, t: f64, moments: &MeasureMoments, v: &AffinePerturbation) -> Result<f64, RiccatiError> {
    let blk = block_at(model, sol, t, t);
    let star = equilibrium_affine(model, sol, t, moments)?;
    Ok(g_of_block(&blk, moments, v) - g_of_block(&blk, moments, &star))
}

/// `Gamma` computed as the quadratic form of `v - a*`; equal to [`gamma`]
/// because the first variation of `G` vanishes at the minimizer.
pub fn gamma_quadratic(model: &LQModel, sol: &RiccatiSolution, t: f64, moments: &MeasureMoments, v: &AffinePerturbation) -> Result<f64, RiccatiError> {
    let blk = block_at(model, sol, t, t);
    let star = equilibrium_affine(model, sol, t, moments)?;
    let da = &v.A - &star.A;
    let dm = &da * &moments.mean + (&v.c - &star.c);
    Ok((&blk.U * &da * &moments.cov * da.transpose()).trace() + dm.dot(&(&blk.W * &dm)))
}

/// Absolute value of the master equation at the node pair nearest
/// `(tau, t)`, with row derivatives by finite differences.
pub fn master_residual(model: &LQModel, sol: &RiccatiSolution, tau: f64, t: f64, moments: &MeasureMoments) -> Result<f64, RiccatiError> {
    let nodes = sol.nodes();
    let n = nodes.len() - 1;
    let r = sol.grid.nearest(tau);
    let j = sol.grid.nearest(t).max(r);
    let (tau, t) = (nodes[r], nodes[j]);
    if j == n {
        return Ok((value_node(sol, r, j, moments) - terminal_value(model, tau, moments)).abs());
    }
    let f = Frozen::new(model, t);
    let c = &f.c;
    let k = model.kernels_at(tau, t);
    let (l, b, g) = (sol.lambda.get(r, j), sol.beta.get(r, j), sol.gamma.get(r, j));
    let dl: Mat = row_derivative(nodes, r, j, |i, q| sol.lambda.get(i, q).clone());
    let db: Mat = row_derivative(nodes, r, j, |i, q| sol.beta.get(i, q).clone());
    let dg: Mat = row_derivative(nodes, r, j, |i, q| sol.gamma.get(i, q).clone());
    let dk: f64 = row_derivative(nodes, r, j, |i, q| *sol.kappa.get(i, q));

    let lam_part = dl + &k.Q + c.D.tr_mul(&(l * &c.D)) + c.D0.tr_mul(&(l * &c.D0)) + l * &c.B + c.B.tr_mul(l);
    let beta_part = db
        + &k.Q
        + &k.Qbar
        + f.Dh.tr_mul(&(l * &f.Dh))
        + f.D0h.tr_mul(&(b * &f.D0h))
        + b * &f.Bh
        + f.Bh.tr_mul(b);
    let gamma_part = dg + &k.q + &k.qbar + f.Bh.tr_mul(g) + f.Dh.tr_mul(&(l * &c.theta)) * 2.0 + f.D0h.tr_mul(&(b * &c.theta0)) * 2.0
        + b * &c.b0 * 2.0;
    let rest = dk + c.b0.dot(g) + c.theta.dot(&(l * &c.theta)) + c.theta0.dot(&(b * &c.theta0));

    // the equilibrium map uses the node diagonal
    let dblk = diag_block(model, sol, j);
    let (uinv, winv) = inverses(&dblk, t)?;
    let th = uinv * dblk.S.transpose();
    let thh = &winv * dblk.Z.transpose();
    let cc = (&th - &thh) * &moments.mean - Vector::from_column_slice((winv * &dblk.Y * 0.5).as_slice());
    let star = AffinePerturbation { A: -th, c: cc };
    let blk = block(&f, &k, l, b, g);
    let gv = g_of_block(&blk, moments, &star);

    let lhs = (&moments.cov * lam_part).trace() + gv + moments.mean.dot(&(beta_part * &moments.mean)) + gamma_part.column(0).dot(&moments.mean) + rest;
    Ok(lhs.abs())
}

fn value_node(sol: &RiccatiSolution, r: usize, j: usize, mu: &MeasureMoments) -> f64 {
    quad_value(sol.lambda.get(r, j), sol.beta.get(r, j), sol.gamma.get(r, j), *sol.kappa.get(r, j), mu)
}

/// Value at a node pair, without interpolation.
pub fn value_at_node(sol: &RiccatiSolution, r: usize, j: usize, moments: &MeasureMoments) -> f64 {
    value_node(sol, r, j, moments)
}

/// One row of `gamma_scan.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaScanRow {
    pub t: f64,
    pub perturbation_id: usize,
    pub gamma: f64,
    /// The same quantity from the quadratic form of `v - a*`.
    pub analytic_min_check: f64,
}

/// Evaluate `Gamma` for each perturbation at each time.
pub fn gamma_scan(
    model: &LQModel,
    sol: &RiccatiSolution,
    times: &[f64],
    moments: &MeasureMoments,
    perturbations: &[AffinePerturbation],
) -> Result<Vec<GammaScanRow>, RiccatiError> {
    let mut out = Vec::with_capacity(times.len() * perturbations.len());
    for &t in times {
        for (i, v) in perturbations.iter().enumerate() {
            out.push(GammaScanRow {
                t,
                perturbation_id: i,
                gamma: gamma(model, sol, t, moments, v)?,
                analytic_min_check: gamma_quadratic(model, sol, t, moments, v)?,
            });
        }
    }
    Ok(out)
}

pub fn write_gamma_scan<W: Write>(mut out: W, rows: &[GammaScanRow]) -> std::io::Result<()> {
    writeln!(out, "t,perturbation_id,gamma,analytic_min_check")?;
    for r in rows {
        writeln!(out, "{},{},{:e},{:e}", r.t, r.perturbation_id, r.gamma, r.analytic_min_check)?;
    }
    Ok(())
}
