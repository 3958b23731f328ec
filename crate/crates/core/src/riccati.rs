//! Solvers for the non-local Riccati system of the LQ equilibrium.
//!
//! The unknowns are two-time families `Lambda(tau; t)`, `beta(tau; t)`,
//! `gamma(tau; t)` and `kappa(tau; t)` on the triangle `tau <= t`. Each row
//! `tau = const` is an ODE in `t` whose coefficients depend on the diagonal
//! `Lambda(t; t)`, which makes the system non-local.
//!
//! Two algorithms are provided:
//!
//! * [`solve_partition`] marches backward cell by cell. On `(t_k, t_{k+1}]`
//!   the row `tau = t_k` is integrated as a classical Riccati equation with
//!   frozen first argument, and its feedback gain drives the linear
//!   (Lyapunov) equations of every earlier row. The scheme is first order in
//!   the cell width.
//! * [`solve_fixed_point`] Picard-iterates the diagonal on backward windows,
//!   integrating all rows as linear ODEs for a given diagonal guess.
//!
//! Both integrate with classical RK4 and a fixed number of substeps per cell.

#![allow(non_snake_case)]

use serde::{Deserialize, Serialize};

use crate::examples::SystemicRiskParams;
use crate::interp::{cumulative_tail_integral, derivative_weights, stencil, weights};
use crate::linalg::{asym_defect, min_eig, op_norm, spd_inverse, sup, sym_norm, symmetrize, Mat};
use crate::model::{check_monotonicity, check_pd_conditions, Coeffs, ConditionReport, Kernels, LQModel};

/// Minimum eigenvalue below which `U(t;t)` or `W(t;t)` count as singular.
pub const PD_GUARD: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RiccatiError {
    #[error("positivity conditions violated: {}", describe_failures(.0))]
    ConditionsViolated(ConditionReport),
    #[error("U or W lost positive definiteness at t={t} (minimum eigenvalue {min_eig:e})")]
    IllConditioned { t: f64, min_eig: f64 },
    #[error("fixed-point iteration did not converge on window {window}")]
    NotConverged { window: usize },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
}

fn describe_failures(rep: &ConditionReport) -> String {
    rep.failures()
        .iter()
        .map(|c| format!("{} (min eigenvalue {:e} at tau={}, t={})", c.name, c.min_eigenvalue, c.worst_tau, c.worst_t))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Strictly increasing time nodes from `0` to the horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriangularGrid {
    nodes: Vec<f64>,
}

impl TriangularGrid {
    /// `n` equal cells on `[0, horizon]`.
    pub fn uniform(horizon: f64, n: usize) -> Result<Self, RiccatiError> {
        if n < 2 {
            return Err(RiccatiError::InvalidGrid(format!("need at least 2 cells, got {n}")));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(RiccatiError::InvalidGrid("horizon must be positive".into()));
        }
        let mut nodes: Vec<f64> = (0..=n).map(|i| horizon * i as f64 / n as f64).collect();
        nodes[n] = horizon;
        Ok(Self { nodes })
    }

    pub fn from_nodes(nodes: Vec<f64>) -> Result<Self, RiccatiError> {
        if nodes.len() < 3 {
            return Err(RiccatiError::InvalidGrid("need at least 3 nodes".into()));
        }
        if nodes[0] != 0.0 {
            return Err(RiccatiError::InvalidGrid("first node must be 0".into()));
        }
        if nodes.windows(2).any(|w| !(w[1] > w[0])) || !nodes.iter().all(|t| t.is_finite()) {
            return Err(RiccatiError::InvalidGrid("nodes must be finite and strictly increasing".into()));
        }
        Ok(Self { nodes })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Number of cells `N`; nodes are indexed `0..=N`.
    pub fn cells(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        self.nodes[self.nodes.len() - 1]
    }

    /// Index of the node closest to `t`.
    pub fn nearest(&self, t: f64) -> usize {
        let i = self.nodes.partition_point(|&g| g < t);
        if i == 0 {
            0
        } else if i >= self.nodes.len() {
            self.nodes.len() - 1
        } else if (t - self.nodes[i - 1]) <= (self.nodes[i] - t) {
            i - 1
        } else {
            i
        }
    }
}

/// Values on the node pairs `(i, j)` with `i <= j`; reads with `j < i`
/// return the diagonal entry `(i, i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tri<T> {
    n: usize,
    data: Vec<T>,
}

impl<T: Clone> Tri<T> {
    pub fn filled(nodes: usize, v: T) -> Self {
        Self { n: nodes, data: vec![v; nodes * (nodes + 1) / 2] }
    }

    fn idx(&self, i: usize, j: usize) -> usize {
        let j = j.max(i);
        i * (2 * self.n - i + 1) / 2 + (j - i)
    }

    pub fn get(&self, i: usize, j: usize) -> &T {
        &self.data[self.idx(i, j)]
    }

    pub fn set(&mut self, i: usize, j: usize, v: T) {
        let k = self.idx(i, j);
        self.data[k] = v;
    }

    pub fn nodes(&self) -> usize {
        self.n
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, &T)> {
        (0..self.n).flat_map(move |i| (i..self.n).map(move |j| (i, j, self.get(i, j))))
    }
}

/// The five blocks entering the feedback map and its Hamiltonian.
#[derive(Debug, Clone, PartialEq)]
pub struct UWSZYBlock {
    pub U: Mat,
    pub W: Mat,
    pub S: Mat,
    pub Z: Mat,
    pub Y: Mat,
}

/// Dynamics coefficients frozen at `t` together with their sums with the
/// mean-field counterparts.
#[derive(Debug, Clone)]
pub(crate) struct Frozen {
    pub c: Coeffs,
    pub Bh: Mat,
    pub Ch: Mat,
    pub Dh: Mat,
    pub Fh: Mat,
    pub D0h: Mat,
    pub F0h: Mat,
}

impl Frozen {
    pub fn new(model: &LQModel, t: f64) -> Self {
        let c = model.coeffs_at(t);
        Self { Bh: c.Bh(), Ch: c.Ch(), Dh: c.Dh(), Fh: c.Fh(), D0h: c.D0h(), F0h: c.F0h(), c }
    }
}

pub(crate) fn block(f: &Frozen, k: &Kernels, lam: &Mat, beta: &Mat, gamma: &Mat) -> UWSZYBlock {
    let c = &f.c;
    let lf = lam * &c.F;
    let lf0 = lam * &c.F0;
    let U = c.F.tr_mul(&lf) + c.F0.tr_mul(&lf0) + &k.R;
    let S = c.D.tr_mul(&lf) + c.D0.tr_mul(&lf0) + lam * &c.C + &k.M;
    let lfh = lam * &f.Fh;
    let bf0h = beta * &f.F0h;
    let W = f.Fh.tr_mul(&lfh) + f.F0h.tr_mul(&bf0h) + &k.R + &k.Rbar;
    let Z = f.Dh.tr_mul(&lfh) + f.D0h.tr_mul(&bf0h) + beta * &f.Ch + &k.M + &k.Mbar;
    let Y = f.Ch.tr_mul(gamma) + f.Fh.tr_mul(&(lam * &c.theta)) * 2.0 + f.F0h.tr_mul(&(beta * &c.theta0)) * 2.0 + &k.r + &k.rbar;
    UWSZYBlock { U, W, S, Z, Y }
}

/// Evaluate the block at `(tau, t)` for the given slice of the solution.
pub fn uwszy(model: &LQModel, lambda: &Mat, beta: &Mat, gamma: &Mat, tau: f64, t: f64) -> UWSZYBlock {
    block(&Frozen::new(model, t), &model.kernels_at(tau, t), lambda, beta, gamma)
}

fn inv_guard(a: &Mat, t: f64) -> Result<Mat, RiccatiError> {
    spd_inverse(a, PD_GUARD).map(|x| x.0).ok_or(RiccatiError::IllConditioned { t, min_eig: min_eig(a) })
}

/// Gain `Theta = U^{-1} S^T` from the diagonal value of `Lambda`.
pub(crate) fn lambda_gain(model: &LQModel, f: &Frozen, tau: f64, t: f64, lam: &Mat) -> Result<Mat, RiccatiError> {
    let c = &f.c;
    let R = model.costs.R.eval(tau, t);
    let M = model.costs.M.eval(tau, t);
    let lf = lam * &c.F;
    let lf0 = lam * &c.F0;
    let U = c.F.tr_mul(&lf) + c.F0.tr_mul(&lf0) + R;
    let S = c.D.tr_mul(&lf) + c.D0.tr_mul(&lf0) + lam * &c.C + M;
    Ok(inv_guard(&U, t)? * S.transpose())
}

/// Mean-field gain `Theta_hat = W^{-1} Z^T` from diagonal `Lambda`, `beta`.
pub(crate) fn beta_gain(model: &LQModel, f: &Frozen, tau: f64, t: f64, lam: &Mat, beta: &Mat) -> Result<(Mat, Mat), RiccatiError> {
    let Rh = model.costs.R.eval(tau, t) + model.costs.Rbar.eval(tau, t);
    let Mh = model.costs.M.eval(tau, t) + model.costs.Mbar.eval(tau, t);
    let lfh = lam * &f.Fh;
    let bf0h = beta * &f.F0h;
    let W = f.Fh.tr_mul(&lfh) + f.F0h.tr_mul(&bf0h) + Rh;
    let Z = f.Dh.tr_mul(&lfh) + f.D0h.tr_mul(&bf0h) + beta * &f.Ch + Mh;
    let winv = inv_guard(&W, t)?;
    let th = &winv * Z.transpose();
    Ok((th, winv))
}

/// `d Lambda(tau; .) / dt` for one row given the diagonal gain.
pub(crate) fn lambda_rhs(model: &LQModel, f: &Frozen, tau: f64, t: f64, l: &Mat, theta: &Mat) -> Mat {
    let c = &f.c;
    let Q = model.costs.Q.eval(tau, t);
    let R = model.costs.R.eval(tau, t);
    let M = model.costs.M.eval(tau, t);
    let lf = l * &c.F;
    let lf0 = l * &c.F0;
    let U = c.F.tr_mul(&lf) + c.F0.tr_mul(&lf0) + R;
    let S = c.D.tr_mul(&lf) + c.D0.tr_mul(&lf0) + l * &c.C + M;
    let st = S * theta;
    let g = Q + c.D.tr_mul(&(l * &c.D)) + c.D0.tr_mul(&(l * &c.D0)) + l * &c.B + c.B.tr_mul(l) + theta.tr_mul(&(U * theta))
        - &st
        - st.transpose();
    -g
}

/// `d beta(tau; .) / dt` for one row given the row of `Lambda` and the diagonal gain.
pub(crate) fn beta_rhs(model: &LQModel, f: &Frozen, tau: f64, t: f64, l: &Mat, b: &Mat, th: &Mat) -> Mat {
    let Qh = model.costs.Q.eval(tau, t) + model.costs.Qbar.eval(tau, t);
    let Rh = model.costs.R.eval(tau, t) + model.costs.Rbar.eval(tau, t);
    let Mh = model.costs.M.eval(tau, t) + model.costs.Mbar.eval(tau, t);
    let lfh = l * &f.Fh;
    let bf0h = b * &f.F0h;
    let W = f.Fh.tr_mul(&lfh) + f.F0h.tr_mul(&bf0h) + Rh;
    let Z = f.Dh.tr_mul(&lfh) + f.D0h.tr_mul(&bf0h) + b * &f.Ch + Mh;
    let zt = Z * th;
    let g = Qh + f.Dh.tr_mul(&(l * &f.Dh)) + f.D0h.tr_mul(&(b * &f.D0h)) + b * &f.Bh + f.Bh.tr_mul(b) + th.tr_mul(&(W * th))
        - &zt
        - zt.transpose();
    -g
}

/// `d gamma(tau; .) / dt`; `cv = W(t;t)^{-1} Y(t;t)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gamma_rhs(model: &LQModel, f: &Frozen, tau: f64, t: f64, l: &Mat, b: &Mat, g: &Mat, th: &Mat, cv: &Mat) -> Mat {
    let c = &f.c;
    let k = model.kernels_at(tau, t);
    let blk = block(f, &k, l, b, g);
    let lt = l * &c.theta;
    let bt0 = b * &c.theta0;
    let rhs = &k.q + &k.qbar + f.Bh.tr_mul(g) + f.Dh.tr_mul(&lt) * 2.0 + f.D0h.tr_mul(&bt0) * 2.0 + b * &c.b0 * 2.0
        + th.tr_mul(&(&blk.W * cv))
        - &blk.Z * cv
        - th.tr_mul(&blk.Y);
    -rhs
}

/// `d kappa(tau; .) / dt` at a node.
fn kappa_rate(model: &LQModel, f: &Frozen, tau: f64, t: f64, l: &Mat, b: &Mat, g: &Mat, cv: &Mat) -> f64 {
    let c = &f.c;
    let k = model.kernels_at(tau, t);
    let blk = block(f, &k, l, b, g);
    let v = c.b0.dot(g) + c.theta.dot(&(l * &c.theta)) + c.theta0.dot(&(b * &c.theta0)) + 0.25 * cv.dot(&(&blk.W * cv))
        - 0.5 * blk.Y.dot(cv);
    -v
}

/// Diagnostics attached to a solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub method: String,
    pub cells: usize,
    pub substeps: usize,
    pub pd_conditions: ConditionReport,
    pub monotonicity: ConditionReport,
    /// Largest `delta` with `R, R+Rbar >= delta I` on the grid.
    pub admissible_delta: f64,
    /// Cross kernels present: the positivity guarantee does not cover the model.
    pub outside_scope: bool,
    /// Picard iterations per window for Lambda, beta, gamma (empty blocks are skipped).
    pub iterations: Vec<Vec<usize>>,
    pub window_halved: bool,
    pub min_eig_u_diag: f64,
    pub min_eig_w_diag: f64,
    pub max_asymmetry: f64,
    /// Largest spectral norm of the Lambda samples and the a-priori bound `K1 exp(K2 T)`.
    pub lambda_sup: f64,
    pub lambda_bound: f64,
}

/// The solved quadruple on a triangular grid.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub grid: TriangularGrid,
    pub lambda: Tri<Mat>,
    pub beta: Tri<Mat>,
    pub gamma: Tri<Mat>,
    pub kappa: Tri<f64>,
    pub report: SolveReport,
}

/// Evaluate row `r` of a field at `t` by cubic interpolation on its nodes.
pub(crate) fn row_at(tri: &Tri<Mat>, nodes: &[f64], r: usize, t: f64) -> Mat {
    let last = nodes.len() - 1;
    let (s, w) = stencil(nodes, r, last, t, 4);
    let wt = weights(&nodes[s..s + w], t);
    let mut acc = tri.get(r, s) * wt[0];
    for (k, wk) in wt.iter().enumerate().skip(1) {
        acc += tri.get(r, s + k) * *wk;
    }
    acc
}

fn row_at_f(tri: &Tri<f64>, nodes: &[f64], r: usize, t: f64) -> f64 {
    let last = nodes.len() - 1;
    let (s, w) = stencil(nodes, r, last, t, 4);
    let wt = weights(&nodes[s..s + w], t);
    wt.iter().enumerate().map(|(k, wk)| wk * tri.get(r, s + k)).sum()
}

/// Interpolate a list of node values (valid on `lo..`) at `t`.
fn diag_at(diag: &[Mat], nodes: &[f64], lo: usize, t: f64) -> Mat {
    let (s, w) = stencil(nodes, lo, nodes.len() - 1, t, 4);
    let wt = weights(&nodes[s..s + w], t);
    let mut acc = &diag[s] * wt[0];
    for (k, wk) in wt.iter().enumerate().skip(1) {
        acc += &diag[s + k] * *wk;
    }
    acc
}

/// Smooth evaluation at arbitrary `(tau, t)`: cubic in `t` along each row,
/// then cubic across rows.
fn field_at(tri: &Tri<Mat>, nodes: &[f64], tau: f64, t: f64) -> Mat {
    let t = t.max(tau);
    let last = nodes.len() - 1;
    let (s, w) = stencil(nodes, 0, last, tau, 4);
    let wt = weights(&nodes[s..s + w], tau);
    let mut acc = row_at(tri, nodes, s, t) * wt[0];
    for (k, wk) in wt.iter().enumerate().skip(1) {
        acc += row_at(tri, nodes, s + k, t) * *wk;
    }
    acc
}

impl RiccatiSolution {
    pub fn nodes(&self) -> &[f64] {
        self.grid.nodes()
    }

    pub fn lambda_at(&self, tau: f64, t: f64) -> Mat {
        field_at(&self.lambda, self.nodes(), tau, t)
    }

    pub fn beta_at(&self, tau: f64, t: f64) -> Mat {
        field_at(&self.beta, self.nodes(), tau, t)
    }

    pub fn gamma_at(&self, tau: f64, t: f64) -> Mat {
        field_at(&self.gamma, self.nodes(), tau, t)
    }

    pub fn kappa_at(&self, tau: f64, t: f64) -> f64 {
        let nodes = self.nodes();
        let t = t.max(tau);
        let (s, w) = stencil(nodes, 0, nodes.len() - 1, tau, 4);
        let wt = weights(&nodes[s..s + w], tau);
        wt.iter().enumerate().map(|(k, wk)| wk * row_at_f(&self.kappa, nodes, s + k, t)).sum()
    }

    /// Write `tau,t,block,i,j,value` rows; `blocks` selects among
    /// `Lambda`, `beta`, `gamma`, `kappa`.
    pub fn write_csv<W: std::io::Write>(&self, mut out: W, blocks: &[&str]) -> std::io::Result<()> {
        writeln!(out, "tau,t,block,i,j,value")?;
        let nodes = self.nodes();
        for (i, j, l) in self.lambda.iter() {
            let (tau, t) = (nodes[i], nodes[j]);
            if blocks.contains(&"Lambda") {
                write_mat(&mut out, tau, t, "Lambda", l)?;
            }
            if blocks.contains(&"beta") {
                write_mat(&mut out, tau, t, "beta", self.beta.get(i, j))?;
            }
            if blocks.contains(&"gamma") {
                write_mat(&mut out, tau, t, "gamma", self.gamma.get(i, j))?;
            }
            if blocks.contains(&"kappa") {
                writeln!(out, "{tau},{t},kappa,0,0,{}", self.kappa.get(i, j))?;
            }
        }
        Ok(())
    }
}

fn write_mat<W: std::io::Write>(out: &mut W, tau: f64, t: f64, name: &str, m: &Mat) -> std::io::Result<()> {
    for a in 0..m.nrows() {
        for b in 0..m.ncols() {
            writeln!(out, "{tau},{t},{name},{a},{b},{}", m[(a, b)])?;
        }
    }
    Ok(())
}

/// Options of [`solve_fixed_point`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPointOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Window length; `None` means a tenth of the horizon.
    pub window: Option<f64>,
    pub substeps: usize,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 200, window: None, substeps: 4 }
    }
}

struct Prelude {
    pd: ConditionReport,
    mono: ConditionReport,
    delta: f64,
    outside_scope: bool,
}

fn prelude(model: &LQModel, grid: &TriangularGrid) -> Result<Prelude, RiccatiError> {
    let nodes = grid.nodes();
    if (grid.horizon() - model.horizon).abs() > 1e-12 * (1.0 + model.horizon) {
        return Err(RiccatiError::InvalidGrid("grid does not end at the model horizon".into()));
    }
    let pd = check_pd_conditions(model, nodes, 0.0);
    let mono = check_monotonicity(model, nodes);
    let delta = pd
        .checks
        .iter()
        .filter(|c| c.name.starts_with('R'))
        .map(|c| c.min_eigenvalue)
        .fold(f64::INFINITY, f64::min);
    if !pd.passed {
        return Err(RiccatiError::ConditionsViolated(pd));
    }
    let outside_scope = !model.cross_terms_vanish();
    if outside_scope {
        log::warn!("cross cost terms M, Mbar are non-zero: well-posedness is not guaranteed");
    }
    Ok(Prelude { pd, mono, delta, outside_scope })
}

/// Backward-marching fine time points of cell `j`: `t_j + q h / 2`.
fn fine_times(nodes: &[f64], j: usize, s: usize) -> Vec<f64> {
    let h = (nodes[j + 1] - nodes[j]) / s as f64;
    let mut v: Vec<f64> = (0..=2 * s).map(|q| nodes[j] + 0.5 * h * q as f64).collect();
    v[2 * s] = nodes[j + 1];
    v
}

/// Windowed Picard iteration of a family of linear row ODEs whose
/// coefficients depend on the diagonal.
struct Picard<'a> {
    nodes: &'a [f64],
    substeps: usize,
    tol: f64,
    max_iter: usize,
    window: f64,
    symmetric: bool,
}

struct PicardOut {
    values: Tri<Mat>,
    iterations: Vec<usize>,
    halved: bool,
}

impl<'a> Picard<'a> {
    /// `terminal[r]` is row `r` at `T`; `ctx(t, diag)` prepares the
    /// diagonal-dependent coefficients; `rhs(r, t, state, ctx)` returns the
    /// time derivative of row `r`.
    fn run<C, FC, FR>(&self, terminal: Vec<Mat>, ctx: FC, rhs: FR) -> Result<PicardOut, RiccatiError>
    where
        FC: Fn(f64, &Mat) -> Result<C, RiccatiError>,
        FR: Fn(usize, f64, &Mat, &C) -> Mat,
    {
        let nodes = self.nodes;
        let n = nodes.len() - 1;
        let s = self.substeps;
        let mut values = Tri::filled(n + 1, terminal[0].clone() * 0.0);
        for (r, v) in terminal.iter().enumerate() {
            values.set(r, n, v.clone());
        }
        let mut states = terminal.clone();
        let mut diag: Vec<Mat> = terminal.clone();
        let mut iterations = Vec::new();
        let mut window = self.window;
        let mut halved = false;
        let mut b = n;
        let mut widx = 0;
        while b > 0 {
            let start = nodes[b] - window;
            let mut a = nodes.partition_point(|&t| t < start - 1e-12 * (1.0 + nodes[n]));
            a = a.min(b - 1);
            for r in a..b {
                diag[r] = states[r].clone();
            }
            let mut converged = false;
            let mut used = 0;
            let mut cache: Vec<Vec<C>> = Vec::new();
            for it in 1..=self.max_iter {
                used = it;
                cache.clear();
                for j in a..b {
                    let ft = fine_times(nodes, j, s);
                    let mut row = Vec::with_capacity(ft.len());
                    for &t in &ft {
                        row.push(ctx(t, &diag_at(&diag, nodes, a, t))?);
                    }
                    cache.push(row);
                }
                let mut change: f64 = 0.0;
                let mut scale: f64 = 0.0;
                let mut new_diag = Vec::with_capacity(b - a);
                for r in a..b {
                    let mut y = states[r].clone();
                    self.sweep(r, &mut y, a, b, r, &cache, &rhs, |j, v| values.set(r, j, v.clone()));
                    if !y.iter().all(|x| x.is_finite()) {
                        return Err(RiccatiError::NotConverged { window: widx });
                    }
                    change = change.max(sup(&(&y - &diag[r])));
                    scale = scale.max(sup(&y));
                    new_diag.push(y);
                }
                for (r, v) in (a..b).zip(new_diag) {
                    diag[r] = v;
                }
                if change <= self.tol * (1.0 + scale) {
                    converged = true;
                    break;
                }
            }
            if !converged {
                if !halved {
                    halved = true;
                    window *= 0.5;
                    for r in a..b {
                        diag[r] = states[r].clone();
                    }
                    continue;
                }
                return Err(RiccatiError::NotConverged { window: widx });
            }
            iterations.push(used);
            // Rows below the window see a converged diagonal.
            for r in 0..a {
                let mut y = states[r].clone();
                self.sweep(r, &mut y, a, b, a, &cache, &rhs, |j, v| values.set(r, j, v.clone()));
                states[r] = y;
            }
            b = a;
            widx += 1;
        }
        Ok(PicardOut { values, iterations, halved })
    }

    /// Integrate row `r` from `t_hi` down to `t_stop`, recording node values.
    #[allow(clippy::too_many_arguments)]
    fn sweep<C, FR>(&self, r: usize, y: &mut Mat, a: usize, hi: usize, stop: usize, cache: &[Vec<C>], rhs: &FR, mut record: impl FnMut(usize, &Mat))
    where
        FR: Fn(usize, f64, &Mat, &C) -> Mat,
    {
        let s = self.substeps;
        for j in (stop..hi).rev() {
            let ft = fine_times(self.nodes, j, s);
            let cx = &cache[j - a];
            for p in (0..s).rev() {
                let (q0, q1, q2) = (2 * p, 2 * p + 1, 2 * p + 2);
                let h = ft[q2] - ft[q0];
                let k1 = rhs(r, ft[q2], y, &cx[q2]);
                let k2 = rhs(r, ft[q1], &(&*y - &k1 * (0.5 * h)), &cx[q1]);
                let k3 = rhs(r, ft[q1], &(&*y - &k2 * (0.5 * h)), &cx[q1]);
                let k4 = rhs(r, ft[q0], &(&*y - &k3 * h), &cx[q0]);
                *y -= (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
                if self.symmetric {
                    symmetrize(y);
                }
            }
            record(j, y);
        }
    }
}

/// Solve for `gamma` (by windowed Picard) and `kappa` (by quadrature) once
/// `Lambda` and `beta` are known.
fn solve_gamma_kappa(
    model: &LQModel,
    nodes: &[f64],
    lam: &Tri<Mat>,
    beta: &Tri<Mat>,
    opts: &FixedPointOptions,
) -> Result<(Tri<Mat>, Tri<f64>, Vec<usize>, bool), RiccatiError> {
    let n = nodes.len() - 1;
    let T = model.horizon;
    let lam_diag: Vec<Mat> = (0..=n).map(|j| lam.get(j, j).clone()).collect();
    let beta_diag: Vec<Mat> = (0..=n).map(|j| beta.get(j, j).clone()).collect();
    let terminal: Vec<Mat> = (0..=n)
        .map(|r| {
            let p = model.terminal_at(nodes[r]);
            p.p + p.pbar
        })
        .collect();
    struct GCtx {
        f: Frozen,
        th: Mat,
        cv: Mat,
    }
    let picard = Picard {
        nodes,
        substeps: opts.substeps,
        tol: opts.tol,
        max_iter: opts.max_iter,
        window: opts.window.unwrap_or(T / 10.0),
        symmetric: false,
    };
    let out = picard.run(
        terminal,
        |t, g| {
            let f = Frozen::new(model, t);
            let l = diag_at(&lam_diag, nodes, 0, t);
            let b = diag_at(&beta_diag, nodes, 0, t);
            let (th, winv) = beta_gain(model, &f, t, t, &l, &b)?;
            let blk = block(&f, &model.kernels_at(t, t), &l, &b, g);
            let cv = winv * blk.Y;
            Ok(GCtx { f, th, cv })
        },
        |r, t, g, cx: &GCtx| {
            let l = row_at(lam, nodes, r, t);
            let b = row_at(beta, nodes, r, t);
            gamma_rhs(model, &cx.f, nodes[r], t, &l, &b, g, &cx.th, &cx.cv)
        },
    )?;
    let gamma = out.values;
    // kappa rows by quadrature of node rates
    let mut cvs = Vec::with_capacity(n + 1);
    let mut fz = Vec::with_capacity(n + 1);
    for j in 0..=n {
        let t = nodes[j];
        let f = Frozen::new(model, t);
        let (_, winv) = beta_gain(model, &f, t, t, lam.get(j, j), beta.get(j, j))?;
        let blk = block(&f, &model.kernels_at(t, t), lam.get(j, j), beta.get(j, j), gamma.get(j, j));
        cvs.push(winv * blk.Y);
        fz.push(f);
    }
    let mut kappa = Tri::filled(n + 1, 0.0);
    for r in 0..n {
        let rates: Vec<f64> = (r..=n)
            .map(|j| -kappa_rate(model, &fz[j], nodes[r], nodes[j], lam.get(r, j), beta.get(r, j), gamma.get(r, j), &cvs[j]))
            .collect();
        let tail = cumulative_tail_integral(&nodes[r..], &rates);
        for (k, v) in tail.into_iter().enumerate() {
            kappa.set(r, r + k, v);
        }
    }
    kappa.set(n, n, 0.0);
    Ok((gamma, kappa, out.iterations, out.halved))
}

/// Sup norms entering the a-priori bound on Lambda: `K1 = |P| + |Q| T` and
/// `K2 = 2|B| + |D|^2 + |D0|^2`.
pub fn lambda_bound(model: &LQModel, nodes: &[f64]) -> (f64, f64) {
    let T = model.horizon;
    let mut p: f64 = 0.0;
    let mut q: f64 = 0.0;
    let (mut b, mut d, mut d0): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for (i, &tau) in nodes.iter().enumerate() {
        p = p.max(sym_norm(&model.terminal_at(tau).P));
        for &t in &nodes[i..] {
            q = q.max(sym_norm(&model.costs.Q.eval(tau, t)));
        }
        let c = model.coeffs_at(tau);
        b = b.max(op_norm(&c.B));
        d = d.max(op_norm(&c.D));
        d0 = d0.max(op_norm(&c.D0));
    }
    (p + q * T, 2.0 * b + d * d + d0 * d0)
}

#[allow(clippy::too_many_arguments)]
fn finish(
    model: &LQModel,
    grid: TriangularGrid,
    pre: Prelude,
    method: &str,
    substeps: usize,
    lambda: Tri<Mat>,
    beta: Tri<Mat>,
    gamma: Tri<Mat>,
    kappa: Tri<f64>,
    iterations: Vec<Vec<usize>>,
    halved: bool,
) -> Result<RiccatiSolution, RiccatiError> {
    let nodes = grid.nodes();
    let mut min_u = f64::INFINITY;
    let mut min_w = f64::INFINITY;
    for (j, &t) in nodes.iter().enumerate() {
        let blk = uwszy(model, lambda.get(j, j), beta.get(j, j), gamma.get(j, j), t, t);
        let (u, w) = (min_eig(&blk.U), min_eig(&blk.W));
        if !(u > PD_GUARD) {
            return Err(RiccatiError::IllConditioned { t, min_eig: u });
        }
        if !(w > PD_GUARD) {
            return Err(RiccatiError::IllConditioned { t, min_eig: w });
        }
        min_u = min_u.min(u);
        min_w = min_w.min(w);
    }
    let mut asym: f64 = 0.0;
    let mut lsup: f64 = 0.0;
    for (i, j, l) in lambda.iter() {
        asym = asym.max(asym_defect(l)).max(asym_defect(beta.get(i, j)));
        lsup = lsup.max(sym_norm(l));
    }
    let (k1, k2) = lambda_bound(model, nodes);
    let report = SolveReport {
        method: method.to_string(),
        cells: grid.cells(),
        substeps,
        pd_conditions: pre.pd,
        monotonicity: pre.mono,
        admissible_delta: pre.delta,
        outside_scope: pre.outside_scope,
        iterations,
        window_halved: halved,
        min_eig_u_diag: min_u,
        min_eig_w_diag: min_w,
        max_asymmetry: asym,
        lambda_sup: lsup,
        lambda_bound: k1 * (k2 * model.horizon).exp(),
    };
    Ok(RiccatiSolution { grid, lambda, beta, gamma, kappa, report })
}

/// Wrap externally computed samples (e.g. from closed forms) as a solution,
/// running the same checks and diagnostics as the solvers.
pub fn assemble(
    model: &LQModel,
    grid: TriangularGrid,
    lambda: Tri<Mat>,
    beta: Tri<Mat>,
    gamma: Tri<Mat>,
    kappa: Tri<f64>,
    method: &str,
) -> Result<RiccatiSolution, RiccatiError> {
    let pre = prelude(model, &grid)?;
    finish(model, grid, pre, method, 0, lambda, beta, gamma, kappa, vec![], false)
}

/// Partition scheme on `n` equal cells with `substeps` RK4 steps per cell.
/// `gamma` uses the windowed fixed point with default options.
pub fn solve_partition(model: &LQModel, n: usize, substeps: usize) -> Result<RiccatiSolution, RiccatiError> {
    let grid = TriangularGrid::uniform(model.horizon, n)?;
    solve_partition_on(model, grid, substeps)
}

/// [`solve_partition`] on a user-supplied grid.
pub fn solve_partition_on(model: &LQModel, grid: TriangularGrid, substeps: usize) -> Result<RiccatiSolution, RiccatiError> {
    let substeps = substeps.max(1);
    let pre = prelude(model, &grid)?;
    let nodes = grid.nodes().to_vec();
    let n = nodes.len() - 1;
    let d = model.dims.d;
    let mut lam = Tri::filled(n + 1, Mat::zeros(d, d));
    let mut beta = Tri::filled(n + 1, Mat::zeros(d, d));
    let mut rows: Vec<(Mat, Mat)> = (0..=n)
        .map(|r| {
            let p = model.terminal_at(nodes[r]);
            (p.P.clone(), &p.P + &p.Pbar)
        })
        .collect();
    for (r, (l, b)) in rows.iter().enumerate() {
        lam.set(r, n, l.clone());
        beta.set(r, n, b.clone());
    }
    for k in (0..n).rev() {
        let tk = nodes[k];
        let ft = fine_times(&nodes, k, substeps);
        let eval = |t: f64, st: &[(Mat, Mat)]| -> Result<Vec<(Mat, Mat)>, RiccatiError> {
            let f = Frozen::new(model, t);
            let (lk, bk) = &st[k];
            let theta = lambda_gain(model, &f, tk, t, lk)?;
            let (th, _) = beta_gain(model, &f, tk, t, lk, bk)?;
            Ok(st
                .iter()
                .enumerate()
                .map(|(l, (ll, bl))| {
                    let tau = nodes[l];
                    (lambda_rhs(model, &f, tau, t, ll, &theta), beta_rhs(model, &f, tau, t, ll, bl, &th))
                })
                .collect())
        };
        let axpy = |st: &[(Mat, Mat)], ks: &[(Mat, Mat)], h: f64| -> Vec<(Mat, Mat)> {
            st.iter().zip(ks).map(|((a, b), (ka, kb))| (a - ka * h, b - kb * h)).collect()
        };
        let active = &mut rows[..=k];
        for p in (0..substeps).rev() {
            let (q0, q1, q2) = (2 * p, 2 * p + 1, 2 * p + 2);
            let h = ft[q2] - ft[q0];
            let k1 = eval(ft[q2], active)?;
            let k2 = eval(ft[q1], &axpy(active, &k1, 0.5 * h))?;
            let k3 = eval(ft[q1], &axpy(active, &k2, 0.5 * h))?;
            let k4 = eval(ft[q0], &axpy(active, &k3, h))?;
            for (i, (l, b)) in active.iter_mut().enumerate() {
                *l -= (&k1[i].0 + &k2[i].0 * 2.0 + &k3[i].0 * 2.0 + &k4[i].0) * (h / 6.0);
                *b -= (&k1[i].1 + &k2[i].1 * 2.0 + &k3[i].1 * 2.0 + &k4[i].1) * (h / 6.0);
                symmetrize(l);
                symmetrize(b);
            }
        }
        if active.iter().any(|(l, b)| !(l.iter().chain(b.iter()).all(|x| x.is_finite()))) {
            return Err(RiccatiError::IllConditioned { t: tk, min_eig: f64::NAN });
        }
        for (l, (ll, bl)) in active.iter().enumerate() {
            lam.set(l, k, ll.clone());
            beta.set(l, k, bl.clone());
        }
    }
    // Diagonal at T is the terminal value of the last row.
    let opts = FixedPointOptions { substeps, ..FixedPointOptions::default() };
    let (gamma, kappa, it_g, halved) = solve_gamma_kappa(model, &nodes, &lam, &beta, &opts)?;
    finish(model, grid, pre, "partition", substeps, lam, beta, gamma, kappa, vec![vec![], vec![], it_g], halved)
}

/// Windowed Picard iteration on the diagonal for Lambda, then beta, then gamma.
pub fn solve_fixed_point(model: &LQModel, grid: &TriangularGrid, opts: FixedPointOptions) -> Result<RiccatiSolution, RiccatiError> {
    let pre = prelude(model, grid)?;
    let nodes = grid.nodes();
    let n = nodes.len() - 1;
    let T = model.horizon;
    let picard = Picard {
        nodes,
        substeps: opts.substeps.max(1),
        tol: opts.tol,
        max_iter: opts.max_iter,
        window: opts.window.unwrap_or(T / 10.0),
        symmetric: true,
    };
    let term_l: Vec<Mat> = (0..=n).map(|r| model.terminal_at(nodes[r]).P).collect();
    struct LCtx {
        f: Frozen,
        theta: Mat,
    }
    let lam_out = picard.run(
        term_l,
        |t, diag| {
            let f = Frozen::new(model, t);
            let theta = lambda_gain(model, &f, t, t, diag)?;
            Ok(LCtx { f, theta })
        },
        |r, t, y, cx: &LCtx| lambda_rhs(model, &cx.f, nodes[r], t, y, &cx.theta),
    )?;
    let lam = lam_out.values;
    let lam_diag: Vec<Mat> = (0..=n).map(|j| lam.get(j, j).clone()).collect();
    let term_b: Vec<Mat> = (0..=n)
        .map(|r| {
            let p = model.terminal_at(nodes[r]);
            p.P + p.Pbar
        })
        .collect();
    let beta_out = picard.run(
        term_b,
        |t, diag| {
            let f = Frozen::new(model, t);
            let l = diag_at(&lam_diag, nodes, 0, t);
            let (th, _) = beta_gain(model, &f, t, t, &l, diag)?;
            Ok(LCtx { f, theta: th })
        },
        |r, t, y, cx: &LCtx| {
            let l = row_at(&lam, nodes, r, t);
            beta_rhs(model, &cx.f, nodes[r], t, &l, y, &cx.theta)
        },
    )?;
    let beta = beta_out.values;
    let (gamma, kappa, it_g, halved_g) = solve_gamma_kappa(model, nodes, &lam, &beta, &opts)?;
    let halved = lam_out.halved || beta_out.halved || halved_g;
    finish(
        model,
        grid.clone(),
        pre,
        "fixed-point",
        picard.substeps,
        lam,
        beta,
        gamma,
        kappa,
        vec![lam_out.iterations, beta_out.iterations, it_g],
        halved,
    )
}

/// One application of the diagonal map on the whole horizon: integrate every
/// row as a linear ODE with the gain built from `diag` and return the new
/// diagonal.
pub fn picard_map_lambda(model: &LQModel, grid: &TriangularGrid, diag: &[Mat], substeps: usize) -> Result<Vec<Mat>, RiccatiError> {
    let nodes = grid.nodes();
    let n = nodes.len() - 1;
    let picard = Picard { nodes, substeps, tol: 0.0, max_iter: 1, window: 0.0, symmetric: true };
    let mut cache = Vec::new();
    for j in 0..n {
        let mut row = Vec::new();
        for t in fine_times(nodes, j, substeps) {
            let f = Frozen::new(model, t);
            let theta = lambda_gain(model, &f, t, t, &diag_at(diag, nodes, 0, t))?;
            row.push((f, theta));
        }
        cache.push(row);
    }
    let mut out = Vec::with_capacity(n + 1);
    for r in 0..=n {
        let mut y = model.terminal_at(nodes[r]).P;
        picard.sweep(r, &mut y, 0, n, r, &cache, &|r, t, y: &Mat, cx: &(Frozen, Mat)| {
            lambda_rhs(model, &cx.0, nodes[r], t, y, &cx.1)
        }, |_, _| {});
        out.push(y);
    }
    Ok(out)
}

/// Residual norms of the four equations at the grid node nearest `(tau, t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    pub lambda: f64,
    pub beta: f64,
    pub gamma: f64,
    pub kappa: f64,
}

/// Finite-difference derivative along row `r` at node `j` (five-point,
/// one-sided near the ends of the row). `get(i, k)` reads node pair
/// `(i, k)`. Rows with fewer than five nodes use a total-degree-four fit
/// over the last triangle of nodes instead, which is unisolvent.
pub(crate) fn row_derivative<T, F>(nodes: &[f64], r: usize, j: usize, get: F) -> T
where
    F: Fn(usize, usize) -> T,
    T: std::ops::Mul<f64, Output = T> + std::ops::Add<Output = T>,
{
    let last = nodes.len() - 1;
    if last - r < 4 && last >= 4 {
        return corner_derivative(nodes, r, j, get);
    }
    let (s, w) = stencil(nodes, r, last, nodes[j], 5);
    let (s, w) = center(nodes, r, last, j, s, w);
    let dw = derivative_weights(&nodes[s..s + w], nodes[j]);
    let mut acc = get(r, s) * dw[0];
    for (k, wk) in dw.iter().enumerate().skip(1) {
        acc = acc + get(r, s + k) * *wk;
    }
    acc
}

fn corner_derivative<T, F>(nodes: &[f64], r: usize, j: usize, get: F) -> T
where
    F: Fn(usize, usize) -> T,
    T: std::ops::Mul<f64, Output = T> + std::ops::Add<Output = T>,
{
    let last = nodes.len() - 1;
    let a = last - 4;
    let h = nodes[last] - nodes[a];
    let pts: Vec<(usize, usize)> = (a..=last).flat_map(|i| (i..=last).map(move |k| (i, k))).collect();
    let mons: Vec<(i32, i32)> = (0..=4).flat_map(|p| (0..=4 - p).map(move |q| (p, q))).collect();
    let v = Mat::from_fn(pts.len(), mons.len(), |row, col| {
        let ((i, k), (p, q)) = (pts[row], mons[col]);
        ((nodes[i] - nodes[r]) / h).powi(p) * ((nodes[k] - nodes[j]) / h).powi(q)
    });
    // weights of the d/dt coefficient: solve V^T w = e_(0,1)
    let col = mons.iter().position(|m| *m == (0, 1)).unwrap_or(1);
    let mut e = Mat::zeros(mons.len(), 1);
    e[(col, 0)] = 1.0;
    let w = v.transpose().lu().solve(&e).unwrap_or_else(|| Mat::zeros(mons.len(), 1));
    let mut acc = get(pts[0].0, pts[0].1) * (w[(0, 0)] / h);
    for (m, &(i, k)) in pts.iter().enumerate().skip(1) {
        acc = acc + get(i, k) * (w[(m, 0)] / h);
    }
    acc
}

fn center(_nodes: &[f64], lo: usize, hi: usize, j: usize, s: usize, w: usize) -> (usize, usize) {
    // Prefer a stencil symmetric about j when the row allows it.
    let half = w / 2;
    if j >= lo + half && j + half <= hi {
        (j - half, w)
    } else {
        (s, w)
    }
}

/// Residuals of the four equations at the node nearest `(tau, t)`, with
/// time derivatives from finite differences along the stored rows.
pub fn residual(model: &LQModel, sol: &RiccatiSolution, tau: f64, t: f64) -> Result<Residuals, RiccatiError> {
    let r = sol.grid.nearest(tau);
    let j = sol.grid.nearest(t.max(tau)).max(r);
    residual_at(model, sol, r, j)
}

/// Residuals at the node pair `(r, j)`.
pub fn residual_at(model: &LQModel, sol: &RiccatiSolution, r: usize, j: usize) -> Result<Residuals, RiccatiError> {
    let nodes = sol.nodes();
    let (tau, t) = (nodes[r], nodes[j]);
    if r == nodes.len() - 1 {
        return Ok(Residuals { lambda: 0.0, beta: 0.0, gamma: 0.0, kappa: 0.0 });
    }
    let f = Frozen::new(model, t);
    let (lt, bt, gt) = (sol.lambda.get(j, j), sol.beta.get(j, j), sol.gamma.get(j, j));
    let (l, b, g) = (sol.lambda.get(r, j), sol.beta.get(r, j), sol.gamma.get(r, j));
    let theta = lambda_gain(model, &f, t, t, lt)?;
    let (th, winv) = beta_gain(model, &f, t, t, lt, bt)?;
    let cv = winv * block(&f, &model.kernels_at(t, t), lt, bt, gt).Y;
    let dl: Mat = row_derivative(nodes, r, j, |i, k| sol.lambda.get(i, k).clone());
    let db: Mat = row_derivative(nodes, r, j, |i, k| sol.beta.get(i, k).clone());
    let dg: Mat = row_derivative(nodes, r, j, |i, k| sol.gamma.get(i, k).clone());
    let dk: f64 = row_derivative(nodes, r, j, |i, k| *sol.kappa.get(i, k));
    Ok(Residuals {
        lambda: sup(&(dl - lambda_rhs(model, &f, tau, t, l, &theta))),
        beta: sup(&(db - beta_rhs(model, &f, tau, t, l, b, &th))),
        gamma: sup(&(dg - gamma_rhs(model, &f, tau, t, l, b, g, &th, &cv))),
        kappa: (dk - kappa_rate(model, &f, tau, t, l, b, g, &cv)).abs(),
    })
}

/// Largest residuals over all interior node pairs.
pub fn max_residuals(model: &LQModel, sol: &RiccatiSolution) -> Result<Residuals, RiccatiError> {
    let n = sol.grid.cells();
    let mut m = Residuals { lambda: 0.0, beta: 0.0, gamma: 0.0, kappa: 0.0 };
    for r in 0..n {
        for j in r..n {
            let x = residual_at(model, sol, r, j)?;
            m.lambda = m.lambda.max(x.lambda);
            m.beta = m.beta.max(x.beta);
            m.gamma = m.gamma.max(x.gamma);
            m.kappa = m.kappa.max(x.kappa);
        }
    }
    Ok(m)
}

/// Constants of the a-priori bound for the systemic-risk equation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemicRiskConstants {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub c5: f64,
}

impl SystemicRiskConstants {
    pub fn new(p: &SystemicRiskParams) -> Self {
        let n = 4000;
        let (mut lam, mut inv, mut der): (f64, f64, f64) = (0.0, 0.0, 0.0);
        for i in 0..=n {
            let s = p.horizon * i as f64 / n as f64;
            let v = p.lambda.eval(s);
            lam = lam.max(v.abs());
            inv = inv.max(1.0 / v.abs());
            der = der.max(p.lambda.derivative(s).abs());
        }
        let c1 = 0.5 * (p.c + p.q) * lam;
        let c2 = inv.max(lam);
        let c3 = 0.5 * p.eta * lam + 0.5 * p.q * der;
        let c4 = p.q * lam;
        let c5 = (c1 + 0.5 * c3 + 0.5 * c4).max(4.0 * c2);
        Self { c1, c2, c3, c4, c5 }
    }

    /// Mean-reversion rate above which the a-priori bound applies.
    pub fn threshold(&self) -> f64 {
        (4.0 * self.c5 * self.c5).max(1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemicRiskReport {
    pub constants: SystemicRiskConstants,
    pub precondition_met: bool,
    /// Largest `|Lambda + (q/2) lambda(t - tau)|` over all iterates.
    pub max_abs_shifted: f64,
    pub iterations: Vec<usize>,
    pub window_halved: bool,
}

#[derive(Debug, Clone)]
pub struct SystemicRiskSolution {
    pub grid: TriangularGrid,
    pub lambda: Tri<f64>,
    pub report: SystemicRiskReport,
}

/// Solve the scalar systemic-risk equation by Picard iteration on the
/// shifted unknown `Lambda + (q/2) lambda(t - tau)`, over backward
/// trapezoids `{tau <= t, t in [a, b]}`.
pub fn solve_systemic_risk(p: &SystemicRiskParams, grid: &TriangularGrid, tol: f64, max_iter: usize) -> Result<SystemicRiskSolution, RiccatiError> {
    solve_systemic_risk_with(p, grid, tol, max_iter, 4, None)
}

pub fn solve_systemic_risk_with(
    p: &SystemicRiskParams,
    grid: &TriangularGrid,
    tol: f64,
    max_iter: usize,
    substeps: usize,
    window: Option<f64>,
) -> Result<SystemicRiskSolution, RiccatiError> {
    let nodes = grid.nodes();
    let n = nodes.len() - 1;
    let T = p.horizon;
    if (grid.horizon() - T).abs() > 1e-12 * (1.0 + T) {
        return Err(RiccatiError::InvalidGrid("grid does not end at the horizon".into()));
    }
    let consts = SystemicRiskConstants::new(p);
    let precondition_met = p.k > consts.threshold();
    if !precondition_met {
        log::warn!("mean reversion k={} is below the a-priori threshold {}", p.k, consts.threshold());
    }
    let lam = |s: f64| p.lambda.eval(s);
    let dlam = |s: f64| p.lambda.derivative(s);
    let src = |tau: f64, t: f64| (0.5 * p.eta + p.k * p.q) * lam(t - tau) - 0.5 * p.q * dlam(t - tau);
    let s = substeps.max(1);
    let mut v = Tri::filled(n + 1, 0.0);
    for r in 0..=n {
        v.set(r, n, 0.5 * (p.c + p.q) * lam(T - nodes[r]));
    }
    let mut max_abs: f64 = (0..=n).map(|r| v.get(r, n).abs()).fold(0.0, f64::max);
    let mut window = window.unwrap_or(T / 10.0);
    let mut halved = false;
    let mut iterations = Vec::new();
    let mut b = n;
    let mut widx = 0;
    while b > 0 {
        let a = nodes.partition_point(|&t| t < nodes[b] - window - 1e-12 * (1.0 + T)).min(b - 1);
        // initial guess: each row frozen at its value at t_b
        for r in 0..b {
            let vb = *v.get(r, b);
            for j in a.max(r)..b {
                v.set(r, j, vb);
            }
        }
        let mut converged = false;
        let mut used = 0;
        for it in 1..=max_iter {
            used = it;
            let mut next = v.clone();
            let mut change: f64 = 0.0;
            for r in 0..b {
                let tau = nodes[r];
                let mut y = *v.get(r, b);
                // the row enters linearly, so only the diagonal is interpolated
                let coef = |t: f64| {
                    let vd = diag_f(&v, nodes, a, t);
                    (2.0 * p.k + 4.0 * vd, -2.0 * lam(t - tau) * vd * vd - src(tau, t))
                };
                for j in (a.max(r)..b).rev() {
                    let ft = fine_times(nodes, j, s);
                    for q in (0..s).rev() {
                        let (q0, q1, q2) = (2 * q, 2 * q + 1, 2 * q + 2);
                        let h = ft[q2] - ft[q0];
                        let (c2, c1, c0) = (coef(ft[q2]), coef(ft[q1]), coef(ft[q0]));
                        let rhs = |y: f64, c: (f64, f64)| c.0 * y + c.1;
                        let k1 = rhs(y, c2);
                        let k2 = rhs(y - 0.5 * h * k1, c1);
                        let k3 = rhs(y - 0.5 * h * k2, c1);
                        let k4 = rhs(y - h * k3, c0);
                        y -= h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
                    }
                    if !y.is_finite() {
                        return Err(RiccatiError::NotConverged { window: widx });
                    }
                    change = change.max((y - v.get(r, j)).abs());
                    max_abs = max_abs.max(y.abs());
                    next.set(r, j, y);
                }
            }
            v = next;
            if change <= tol {
                converged = true;
                break;
            }
        }
        if !converged {
            if !halved {
                halved = true;
                window *= 0.5;
                continue;
            }
            return Err(RiccatiError::NotConverged { window: widx });
        }
        iterations.push(used);
        b = a;
        widx += 1;
    }
    let mut out = Tri::filled(n + 1, 0.0);
    for (r, j, x) in v.iter() {
        let val = if j == n { 0.5 * p.c * lam(T - nodes[r]) } else { x - 0.5 * p.q * lam(nodes[j] - nodes[r]) };
        out.set(r, j, val);
    }
    Ok(SystemicRiskSolution {
        grid: grid.clone(),
        lambda: out,
        report: SystemicRiskReport { constants: consts, precondition_met, max_abs_shifted: max_abs, iterations, window_halved: halved },
    })
}

fn diag_f(v: &Tri<f64>, nodes: &[f64], lo: usize, t: f64) -> f64 {
    let (s, w) = stencil(nodes, lo, nodes.len() - 1, t, 4);
    let wt = weights(&nodes[s..s + w], t);
    wt.iter().enumerate().map(|(k, wk)| wk * v.get(s + k, s + k)).sum()
}

/// Residual of the systemic-risk equation at node pair `(r, j)`.
pub fn systemic_risk_residual(p: &SystemicRiskParams, sol: &SystemicRiskSolution, r: usize, j: usize) -> f64 {
    let nodes = sol.grid.nodes();
    let (tau, t) = (nodes[r], nodes[j]);
    let l = |s: f64| p.lambda.eval(s);
    let dl: f64 = row_derivative(nodes, r, j, |i, k| *sol.lambda.get(i, k));
    let lt = *sol.lambda.get(j, j) + 0.5 * p.q;
    let lr = *sol.lambda.get(r, j);
    dl - 2.0 * p.k * lr + 2.0 * l(t - tau) * lt * lt - 4.0 * (lr + 0.5 * p.q * l(t - tau)) * lt + 0.5 * p.eta * l(t - tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Dims;

    #[test]
    fn tri_indexing_roundtrip() {
        let mut t = Tri::filled(5, 0usize);
        let mut k = 0;
        for i in 0..5 {
            for j in i..5 {
                t.set(i, j, k);
                k += 1;
            }
        }
        let mut k = 0;
        for i in 0..5 {
            for j in i..5 {
                assert_eq!(*t.get(i, j), k);
                k += 1;
            }
        }
        assert_eq!(t.get(3, 1), t.get(3, 3));
    }

    #[test]
    fn degenerate_grids_rejected() {
        assert!(TriangularGrid::uniform(1.0, 1).is_err());
        assert!(TriangularGrid::from_nodes(vec![0.0, 1.0]).is_err());
        assert!(TriangularGrid::from_nodes(vec![0.0, 0.5, 0.5, 1.0]).is_err());
    }

    #[test]
    fn zero_dynamics_block() {
        let mut m = LQModel::zero(Dims { d: 2, m: 2, n: 1, k: 1 }, 1.0, 1.0);
        m.costs.r = crate::model::TwoTimeFn::constant(Mat::from_column_slice(2, 1, &[0.5, -1.0]));
        m.costs.rbar = crate::model::TwoTimeFn::constant(Mat::from_column_slice(2, 1, &[1.0, 2.0]));
        let l = Mat::identity(2, 2) * 3.0;
        let blk = uwszy(&m, &l, &l, &Mat::from_element(2, 1, 1.0), 0.2, 0.7);
        assert_eq!(blk.U, Mat::identity(2, 2));
        assert_eq!(blk.W, Mat::identity(2, 2));
        assert_eq!(blk.S, Mat::zeros(2, 2));
        assert_eq!(blk.Z, Mat::zeros(2, 2));
        assert_eq!(blk.Y, Mat::from_column_slice(2, 1, &[1.5, 1.0]));
    }
}
