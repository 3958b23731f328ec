//! Model builders and closed-form solutions of three reference problems:
//! conditional mean-variance portfolio selection, an inter-bank systemic
//! risk model with non-exponential discounting, and a multiplicative
//! (non-LQ) wealth model with a relative-performance utility.

#![allow(non_snake_case)]

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::equilibrium::{FeedbackStrategy, MeasureMoments};
use crate::interp::{adaptive_simpson, cumulative_tail_integral};
use crate::linalg::{Mat, Vector};
use crate::mckv_sim::{estimate_cost, simulate, CostSpec, InitLaw, SimConfig, SimModel, StrategySpec};
use crate::model::{parse_discount, parse_time_fn, Dims, DiscountFn, LQModel, ModelError, Segment, TimeFn, TwoTimeFn};
use crate::riccati::{assemble, solve_systemic_risk_with, RiccatiError, RiccatiSolution, SystemicRiskSolution, Tri, TriangularGrid};
use crate::verifier::{report, slope_probe, DeltaConfig, DeltaReport, VerifyError};

const QUAD_TOL: f64 = 1e-10;

fn scalar(v: f64) -> Mat {
    Mat::from_element(1, 1, v)
}

fn sep(lambda: &DiscountFn, v: f64) -> TwoTimeFn {
    TwoTimeFn::separable(lambda.clone(), scalar(v))
}

fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    adaptive_simpson(f, a, b, QUAD_TOL)
}

/// Conditional mean-variance portfolio selection with a discounted target.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanVarianceParams {
    /// Risk-free rate.
    pub r: TimeFn,
    /// Excess return of the risky asset.
    pub rho: TimeFn,
    /// Idiosyncratic and common volatilities.
    pub theta: TimeFn,
    pub theta0: TimeFn,
    /// Risk aversion.
    pub eta: f64,
    pub lambda: DiscountFn,
    pub horizon: f64,
}

impl MeanVarianceParams {
    /// `r = 0`, `rho = 0.2`, `theta = 0.3`, `theta0 = 0.1`, `eta = 1`, `T = 1`,
    /// hyperbolic discount `1 / (1 + s)`.
    pub fn demo() -> Self {
        Self {
            r: TimeFn::scalar(0.0),
            rho: TimeFn::scalar(0.2),
            theta: TimeFn::scalar(0.3),
            theta0: TimeFn::scalar(0.1),
            eta: 1.0,
            lambda: DiscountFn::Hyperbolic { a: 1.0, b: 1.0 },
            horizon: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        positive(self.horizon, "horizon")?;
        positive(self.eta, "eta")?;
        check_lambda(&self.lambda, self.horizon)?;
        for i in 0..=200 {
            let t = self.horizon * i as f64 / 200.0;
            if !(self.theta.eval_scalar(t) > 0.0) {
                return Err(ModelError::new("theta", format!("must be positive, fails at t={t}")));
            }
            if !(self.theta0.eval_scalar(t) >= 0.0) {
                return Err(ModelError::new("theta0", format!("must be non-negative, fails at t={t}")));
            }
        }
        Ok(())
    }

    fn ratio(&self, s: f64) -> f64 {
        let (th, th0) = (self.theta.eval_scalar(s), self.theta0.eval_scalar(s));
        self.rho.eval_scalar(s).powi(2) / (th * th + th0 * th0)
    }

    /// `int_t^T rho^2 / (theta^2 + theta0^2)`.
    fn int_ratio(&self, t: f64) -> f64 {
        integrate(&|s| self.ratio(s), t, self.horizon)
    }

    fn int_r(&self, t: f64) -> f64 {
        integrate(&|s| self.r.eval_scalar(s), t, self.horizon)
    }

    /// `int_t^T (rho^2 / theta^2) exp(int_s^T ratio)`.
    fn kappa_integral(&self, t: f64) -> f64 {
        integrate(
            &|s| {
                let th = self.theta.eval_scalar(s);
                self.rho.eval_scalar(s).powi(2) / (th * th) * self.int_ratio(s).exp()
            },
            t,
            self.horizon,
        )
    }

    pub fn lambda_exact(&self, tau: f64, t: f64) -> f64 {
        let t = t.max(tau);
        0.5 * self.eta * self.lambda.eval(self.horizon - tau) * (2.0 * self.int_r(t) - self.int_ratio(t)).exp()
    }

    pub fn gamma_exact(&self, tau: f64, t: f64) -> f64 {
        let t = t.max(tau);
        -self.lambda.eval(self.horizon - tau) * self.int_r(t).exp()
    }

    pub fn kappa_exact(&self, tau: f64, t: f64) -> f64 {
        let t = t.max(tau);
        -self.lambda.eval(self.horizon - tau) / (2.0 * self.eta) * self.kappa_integral(t)
    }

    /// Gain on `x - xbar` in the equilibrium feedback.
    pub fn gain(&self, t: f64) -> f64 {
        let (th, th0) = (self.theta.eval_scalar(t), self.theta0.eval_scalar(t));
        -self.rho.eval_scalar(t) / (th * th + th0 * th0)
    }

    /// State-independent part of the equilibrium feedback.
    pub fn offset(&self, t: f64) -> f64 {
        let th = self.theta.eval_scalar(t);
        self.rho.eval_scalar(t) / (self.eta * th * th) * (self.int_ratio(t) - self.int_r(t)).exp()
    }
}

fn positive(v: f64, loc: &str) -> Result<(), ModelError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(ModelError::new(loc, "must be positive and finite"))
    }
}

fn check_lambda(l: &DiscountFn, horizon: f64) -> Result<(), ModelError> {
    for i in 0..=1000 {
        let s = horizon * i as f64 / 1000.0;
        let v = l.eval(s);
        if !(v.is_finite() && v > 0.0) {
            return Err(ModelError::new("discount", format!("not positive at s={s}")));
        }
    }
    Ok(())
}

/// LQ form: `B = r`, `C = rho`, `F = theta`, `F0 = theta0`, no running cost,
/// `P = (eta/2) lambda`, `Pbar = -P`, `p = -lambda`.
pub fn mean_variance_model(p: &MeanVarianceParams) -> LQModel {
    let mut m = LQModel::zero(Dims { d: 1, m: 1, n: 1, k: 1 }, p.horizon, 0.0);
    m.dynamics.B = p.r.clone();
    m.dynamics.C = p.rho.clone();
    m.dynamics.F = p.theta.clone();
    m.dynamics.F0 = p.theta0.clone();
    m.costs.R = TwoTimeFn::zeros(1, 1);
    m.costs.P = sep(&p.lambda, 0.5 * p.eta);
    m.costs.Pbar = sep(&p.lambda, -0.5 * p.eta);
    m.costs.p = sep(&p.lambda, -1.0);
    m
}

/// Closed-form solution sampled on `grid`, and the equilibrium gains.
pub fn mean_variance_closed_form(p: &MeanVarianceParams, grid: &TriangularGrid) -> Result<(RiccatiSolution, FeedbackStrategy), RiccatiError> {
    let model = mean_variance_model(p);
    let nodes = grid.nodes();
    let n = nodes.len();
    let T = p.horizon;
    // every field is lambda(T - tau) times a function of t
    let lt: Vec<f64> = nodes.iter().map(|&t| 0.5 * p.eta * (2.0 * p.int_r(t) - p.int_ratio(t)).exp()).collect();
    let gt: Vec<f64> = nodes.iter().map(|&t| -p.int_r(t).exp()).collect();
    let kt: Vec<f64> = nodes.iter().map(|&t| -p.kappa_integral(t) / (2.0 * p.eta)).collect();
    let mut lam = Tri::filled(n, Mat::zeros(1, 1));
    let mut gam = Tri::filled(n, Mat::zeros(1, 1));
    let mut kap = Tri::filled(n, 0.0);
    for i in 0..n {
        let w = p.lambda.eval(T - nodes[i]);
        for j in i..n {
            lam.set(i, j, scalar(w * lt[j]));
            gam.set(i, j, scalar(w * gt[j]));
            kap.set(i, j, w * kt[j]);
        }
    }
    kap.set(n - 1, n - 1, 0.0);
    let sol = assemble(&model, grid.clone(), lam, Tri::filled(n, Mat::zeros(1, 1)), gam, kap, "closed-form")?;
    let fb = FeedbackStrategy {
        times: nodes.to_vec(),
        theta: nodes.iter().map(|&t| scalar(-p.gain(t))).collect(),
        theta_hat: nodes.iter().map(|_| scalar(0.0)).collect(),
        c: nodes.iter().map(|&t| Vector::from_element(1, -p.offset(t))).collect(),
    };
    Ok((sol, fb))
}

/// Inter-bank lending with mean reversion `k` towards the average reserve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemicRiskParams {
    pub k: f64,
    pub sigma: f64,
    /// Correlation with the common noise.
    pub rho: f64,
    pub q: f64,
    pub eta: f64,
    pub c: f64,
    pub lambda: DiscountFn,
    pub horizon: f64,
}

impl SystemicRiskParams {
    pub fn demo() -> Self {
        Self { k: 2.0, sigma: 0.5, rho: 0.5, q: 0.5, eta: 2.0, c: 1.0, lambda: DiscountFn::Exponential { rate: 0.5 }, horizon: 1.0 }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        positive(self.horizon, "horizon")?;
        if !(self.k >= 0.0 && self.k.is_finite()) {
            return Err(ModelError::new("k", "must be non-negative"));
        }
        if !(self.rho >= 0.0 && self.rho <= 1.0) {
            return Err(ModelError::new("rho", "must lie in [0, 1]"));
        }
        for (v, n) in [(self.q, "q"), (self.eta, "eta"), (self.c, "c")] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ModelError::new(n, "must be non-negative"));
            }
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(ModelError::new("sigma", "must be non-negative"));
        }
        check_lambda(&self.lambda, self.horizon)
    }
}

/// LQ form of the systemic-risk model.
pub fn systemic_risk_model(p: &SystemicRiskParams) -> LQModel {
    let mut m = LQModel::zero(Dims { d: 1, m: 1, n: 1, k: 1 }, p.horizon, 0.0);
    m.dynamics.B = TimeFn::scalar(-p.k);
    m.dynamics.Bbar = TimeFn::scalar(p.k);
    m.dynamics.C = TimeFn::scalar(1.0);
    m.dynamics.theta = TimeFn::scalar(p.sigma * (1.0 - p.rho * p.rho).max(0.0).sqrt());
    m.dynamics.theta0 = TimeFn::scalar(p.sigma * p.rho);
    let l = &p.lambda;
    m.costs.Q = sep(l, 0.5 * p.eta);
    m.costs.Qbar = sep(l, -0.5 * p.eta);
    m.costs.R = sep(l, 0.5);
    m.costs.M = sep(l, 0.5 * p.q);
    m.costs.Mbar = sep(l, -0.5 * p.q);
    m.costs.P = sep(l, 0.5 * p.c);
    m.costs.Pbar = sep(l, -0.5 * p.c);
    m
}

/// Equilibrium of the systemic-risk model: `Lambda` from the dedicated
/// solver, `beta = gamma = 0`, and `kappa` by quadrature.
#[derive(Debug, Clone)]
pub struct SystemicRiskEquilibrium {
    pub solution: SystemicRiskSolution,
    pub kappa: Tri<f64>,
    pub feedback: FeedbackStrategy,
}

impl SystemicRiskEquilibrium {
    /// The same data as a generic solution of the LQ form.
    pub fn riccati_solution(&self, p: &SystemicRiskParams) -> Result<RiccatiSolution, RiccatiError> {
        let n = self.solution.grid.nodes().len();
        let mut lam = Tri::filled(n, Mat::zeros(1, 1));
        for (i, j, v) in self.solution.lambda.iter() {
            lam.set(i, j, scalar(*v));
        }
        let z = Tri::filled(n, Mat::zeros(1, 1));
        assemble(&systemic_risk_model(p), self.solution.grid.clone(), lam, z.clone(), z, self.kappa.clone(), "systemic-risk")
    }
}

pub fn systemic_risk_equilibrium(p: &SystemicRiskParams, grid: &TriangularGrid, tol: f64) -> Result<SystemicRiskEquilibrium, RiccatiError> {
    let solution = solve_systemic_risk_with(p, grid, tol, 200, 4, None)?;
    let nodes = grid.nodes();
    let n = nodes.len();
    let scale = p.sigma * p.sigma * (1.0 - p.rho * p.rho);
    let mut kappa = Tri::filled(n, 0.0);
    for r in 0..n {
        let row: Vec<f64> = (r..n).map(|j| scale * solution.lambda.get(r, j)).collect();
        for (k, v) in cumulative_tail_integral(&nodes[r..], &row).into_iter().enumerate() {
            kappa.set(r, r + k, v);
        }
    }
    let feedback = FeedbackStrategy {
        times: nodes.to_vec(),
        theta: (0..n).map(|j| scalar(2.0 * (solution.lambda.get(j, j) + 0.5 * p.q))).collect(),
        theta_hat: (0..n).map(|_| scalar(0.0)).collect(),
        c: (0..n).map(|_| Vector::zeros(1)).collect(),
    };
    Ok(SystemicRiskEquilibrium { solution, kappa, feedback })
}

/// Multiplicative wealth `dX = X a (mu dt + sigma dB + sigma0 dW0)` with
/// utility of `X_T / E[X_T | W0]^theta`.
#[derive(Debug, Clone, PartialEq)]
pub struct NonLQParams {
    pub mu: TimeFn,
    pub sigma: TimeFn,
    pub sigma0: TimeFn,
    /// Weight of the relative-performance term, in `(0, 1]`.
    pub theta: f64,
    /// Elasticity; `delta = 1` is the logarithmic case.
    pub delta: f64,
    pub lambda: DiscountFn,
    pub horizon: f64,
}

impl NonLQParams {
    pub fn demo() -> Self {
        Self {
            mu: TimeFn::scalar(0.1),
            sigma: TimeFn::scalar(0.2),
            sigma0: TimeFn::scalar(0.15),
            theta: 0.5,
            delta: 2.0,
            lambda: DiscountFn::Hyperbolic { a: 1.0, b: 1.0 },
            horizon: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        positive(self.horizon, "horizon")?;
        positive(self.delta, "delta")?;
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return Err(ModelError::new("theta", "must lie in (0, 1]"));
        }
        check_lambda(&self.lambda, self.horizon)?;
        for i in 0..=200 {
            let t = self.horizon * i as f64 / 200.0;
            if !(self.denominator(t) > 0.0) {
                return Err(ModelError::new("sigma", format!("effective variance vanishes at t={t}")));
            }
        }
        Ok(())
    }

    /// `1 - 1/delta`.
    pub fn power(&self) -> f64 {
        1.0 - 1.0 / self.delta
    }

    pub fn log_case(&self) -> bool {
        (self.delta - 1.0).abs() < 1e-12
    }

    /// `sigma^2 + (1 - theta)(1 - theta + delta theta) sigma0^2`.
    pub fn denominator(&self, t: f64) -> f64 {
        let (s, s0) = (self.sigma.eval_scalar(t), self.sigma0.eval_scalar(t));
        let th = self.theta;
        s * s + (1.0 - th) * (1.0 - th + self.delta * th) * s0 * s0
    }

    /// Equilibrium proportion `alpha(t)`; the control is `alpha(t) x`.
    pub fn alpha_hat(&self, t: f64) -> f64 {
        self.delta * (1.0 - self.theta) * self.mu.eval_scalar(t) / self.denominator(t)
    }

    /// Coefficient `A(tau; t)` of the value function.
    pub fn a_coef(&self, tau: f64, t: f64) -> f64 {
        let t = t.max(tau);
        let th = self.theta;
        let rate = |s: f64| 0.5 * self.delta * self.power() * (1.0 - th).powi(2) * self.mu.eval_scalar(s).powi(2) / self.denominator(s);
        -self.lambda.eval(self.horizon - tau) * integrate(&rate, t, self.horizon).exp()
    }

    /// Finite-difference residual of the linear ODE satisfied by `A(tau; .)`.
    pub fn a_residual(&self, tau: f64, t: f64, h: f64) -> f64 {
        let th = self.theta;
        let dA = (self.a_coef(tau, t + h) - self.a_coef(tau, t - h)) / (2.0 * h);
        let k = 0.5 * self.delta * (1.0 - th).powi(2) * self.mu.eval_scalar(t).powi(2) / self.denominator(t);
        dA + self.power() * k * self.a_coef(tau, t)
    }

    /// The utility of the relative wealth.
    pub fn utility(&self, x: f64) -> f64 {
        if self.log_case() {
            x.ln()
        } else {
            let p = self.power();
            x.powf(p) / p
        }
    }

    /// Log-growth of `E[(X/Xbar^theta)^p]` per unit time under proportion `a`
    /// (or of `E log(X/Xbar^theta)` in the logarithmic case).
    pub fn growth(&self, a: f64, t: f64) -> f64 {
        let (mu, s, s0) = (self.mu.eval_scalar(t), self.sigma.eval_scalar(t), self.sigma0.eval_scalar(t));
        let th = self.theta;
        if self.log_case() {
            return (1.0 - th) * a * mu - 0.5 * a * a * (s * s + (1.0 - th) * s0 * s0);
        }
        let p = self.power();
        p * ((1.0 - th) * a * mu - 0.5 * a * a * (s * s + s0 * s0) + 0.5 * th * a * a * s0 * s0)
            + 0.5 * p * p * a * a * (s * s + (1.0 - th).powi(2) * s0 * s0)
    }

    /// `E[(xi / E xi^theta)^p]`, or `E log(xi / E xi^theta)` in the log case.
    pub fn init_factor(&self, init: &InitLaw) -> f64 {
        let th = self.theta;
        let (m, s2) = match init {
            InitLaw::Point { x } => (x[0].ln(), 0.0),
            InitLaw::LogNormal { log_mean, log_sd } => (*log_mean, log_sd * log_sd),
            InitLaw::Gaussian { .. } => return f64::NAN,
        };
        if self.log_case() {
            return m - th * (m + 0.5 * s2);
        }
        let p = self.power();
        (p * m + 0.5 * p * p * s2 - p * th * (m + 0.5 * s2)).exp()
    }

    /// Exact cost at evaluation time `tau` of the strategy `a(.)` started
    /// at `t0` from `init`; `breaks` are the discontinuities of `a`.
    pub fn cost(&self, init: &InitLaw, tau: f64, t0: f64, a: &dyn Fn(f64) -> f64, breaks: &[f64]) -> f64 {
        let mut pts = vec![t0];
        pts.extend(breaks.iter().copied().filter(|b| *b > t0 && *b < self.horizon));
        pts.push(self.horizon);
        pts.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let g = |s: f64| self.growth(a(s), s);
        // left-continuous pieces: sample just inside each piece
        let mut total = 0.0;
        for w in pts.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            let mid = 0.5 * (lo + hi);
            let av = a(mid);
            let _ = av;
            total += integrate(&|s: f64| g(s.clamp(lo + 1e-14, hi - 1e-14)), lo, hi);
        }
        let lam = self.lambda.eval(self.horizon - tau);
        let f = self.init_factor(init);
        if self.log_case() {
            -lam * (f + total)
        } else {
            -lam / self.power() * f * total.exp()
        }
    }

    /// Tabulated `alpha_hat` as a piecewise-linear function on `cells` pieces.
    pub fn alpha_hat_fn(&self, cells: usize) -> TimeFn {
        let h = self.horizon / cells as f64;
        let segs = (0..cells)
            .map(|i| {
                let (a, b) = (i as f64 * h, if i + 1 == cells { self.horizon } else { (i + 1) as f64 * h });
                let (fa, fb) = (self.alpha_hat(a), self.alpha_hat(b));
                Segment { start: a, end: b, coeffs: vec![scalar(fa), scalar((fb - fa) / (b - a))] }
            })
            .collect();
        TimeFn::Poly(segs)
    }
}

/// `A(tau; t)` and the equilibrium proportion on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct NonLQSolution {
    pub times: Vec<f64>,
    /// `a[i][j - i] = A(t_i; t_j)`.
    pub a: Vec<Vec<f64>>,
    pub alpha: Vec<f64>,
}

pub fn nonlq_solution(p: &NonLQParams, grid: &TriangularGrid) -> NonLQSolution {
    let nodes = grid.nodes();
    NonLQSolution {
        times: nodes.to_vec(),
        a: (0..nodes.len()).map(|i| (i..nodes.len()).map(|j| p.a_coef(nodes[i], nodes[j])).collect()).collect(),
        alpha: nodes.iter().map(|&t| p.alpha_hat(t)).collect(),
    }
}

/// Monte Carlo checks of the multiplicative model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonLQVerification {
    pub value_mc: f64,
    pub value_stderr: f64,
    pub value_exact: f64,
    pub value_within_band: bool,
    /// Spikes by constant proportions, one per offset.
    pub perturbed: Vec<DeltaReport>,
    /// Spike by the equilibrium proportion itself.
    pub unperturbed: DeltaReport,
}

/// Simulation settings for [`nonlq_verify`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonLQVerifyConfig {
    pub t0: f64,
    pub init: InitLaw,
    pub delta: DeltaConfig,
    /// Constants added to the equilibrium proportion in the perturbed spikes.
    pub offsets: Vec<f64>,
}

pub fn nonlq_verify(p: &NonLQParams, cfg: &NonLQVerifyConfig) -> Result<NonLQVerification, VerifyError> {
    let t = cfg.t0;
    let base = StrategySpec::ScalarLinear(p.alpha_hat_fn(2000));
    let cost = CostSpec::NonLq { params: p, tau: t };
    let sim = SimModel::NonLq(p);
    let d = &cfg.delta;
    let sc = SimConfig::new(t, d.particles, d.paths, d.dt, d.seed);
    let ens = simulate(sim, &base, &cfg.init, &sc)?;
    let c = estimate_cost(&ens, &cost);
    drop(ens);
    let value_exact = p.cost(&cfg.init, t, t, &|s| p.alpha_hat(s), &[]);
    let moments = cfg.init.moments();

    let a_star = p.alpha_hat(t);
    let mut perturbed = Vec::new();
    for (i, off) in cfg.offsets.iter().enumerate() {
        let v = a_star + off;
        let pert = StrategySpec::ScalarLinear(TimeFn::scalar(v));
        let slope = slope_probe(sim, &base, &pert, cost, t, p.horizon, &cfg.init, d)?;
        perturbed.push(report(slope, value_exact_slope(p, &cfg.init, t, v), t, moments.clone(), i + 1, d));
    }

    let same = StrategySpec::ScalarLinear(TimeFn::scalar(a_star));
    let slope0 = slope_probe(sim, &base, &same, cost, t, p.horizon, &cfg.init, d)?;
    let unperturbed = report(slope0, value_exact_slope(p, &cfg.init, t, a_star), t, moments, 0, d);
    Ok(NonLQVerification {
        value_mc: c.mean,
        value_stderr: c.stderr,
        value_exact,
        value_within_band: (c.mean - value_exact).abs() <= 3.0 * c.stderr,
        perturbed,
        unperturbed,
    })
}

/// Limit of `(J(spiked) - J(base)) / eps` for a constant proportion `v`.
fn value_exact_slope(p: &NonLQParams, init: &InitLaw, t: f64, v: f64) -> f64 {
    let dh = p.growth(v, t) - p.growth(p.alpha_hat(t), t);
    if p.log_case() {
        -p.lambda.eval(p.horizon - t) * dh
    } else {
        p.cost(init, t, t, &|s| p.alpha_hat(s), &[]) * dh
    }
}

/// Parameter files: a JSON object with a `kind` of `mean-variance`,
/// `systemic-risk` or `nonlq`. Scalar functions of time may be numbers or
/// time-function objects in the model-file format.
#[derive(Debug, Clone, PartialEq)]
pub enum ExampleParams {
    MeanVariance(MeanVarianceParams),
    SystemicRisk(SystemicRiskParams),
    NonLQ(NonLQParams),
}

pub fn parse_params(text: &str) -> Result<ExampleParams, ModelError> {
    let root: Value = serde_json::from_str(text).map_err(|e| ModelError::new("json", e.to_string()))?;
    let obj = root.as_object().ok_or_else(|| ModelError::new("$", "expected an object"))?;
    let kind = obj.get("kind").and_then(Value::as_str).ok_or_else(|| ModelError::new("kind", "missing"))?;
    let horizon = num(obj, "horizon")?;
    positive(horizon, "horizon")?;
    let lambda = match obj.get("discount") {
        None | Some(Value::Null) => DiscountFn::one(),
        Some(v) => parse_discount(v, "discount")?,
    };
    let allowed: &[&str] = match kind {
        "mean-variance" => &["kind", "horizon", "discount", "r", "rho", "theta", "theta0", "eta"],
        "systemic-risk" => &["kind", "horizon", "discount", "k", "sigma", "rho", "q", "eta", "c"],
        "nonlq" => &["kind", "horizon", "discount", "mu", "sigma", "sigma0", "theta", "delta"],
        other => return Err(ModelError::new("kind", format!("unknown kind \"{other}\""))),
    };
    if let Some(k) = obj.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(ModelError::new(k, "unknown key"));
    }
    let f = |name: &str| -> Result<TimeFn, ModelError> {
        match obj.get(name) {
            None => Err(ModelError::new(name, "missing")),
            Some(Value::Number(x)) => Ok(TimeFn::scalar(x.as_f64().unwrap_or(f64::NAN))),
            Some(v) => parse_time_fn(v, name, 1, 1, horizon),
        }
    };
    let out = match kind {
        "mean-variance" => {
            let p = MeanVarianceParams { r: f("r")?, rho: f("rho")?, theta: f("theta")?, theta0: f("theta0")?, eta: num(obj, "eta")?, lambda, horizon };
            p.validate()?;
            ExampleParams::MeanVariance(p)
        }
        "systemic-risk" => {
            let p = SystemicRiskParams {
                k: num(obj, "k")?,
                sigma: num(obj, "sigma")?,
                rho: num(obj, "rho")?,
                q: num(obj, "q")?,
                eta: num(obj, "eta")?,
                c: num(obj, "c")?,
                lambda,
                horizon,
            };
            p.validate()?;
            ExampleParams::SystemicRisk(p)
        }
        _ => {
            let p = NonLQParams {
                mu: f("mu")?,
                sigma: f("sigma")?,
                sigma0: f("sigma0")?,
                theta: num(obj, "theta")?,
                delta: num(obj, "delta")?,
                lambda,
                horizon,
            };
            p.validate()?;
            ExampleParams::NonLQ(p)
        }
    };
    Ok(out)
}

fn num(obj: &serde_json::Map<String, Value>, key: &str) -> Result<f64, ModelError> {
    let v = obj.get(key).and_then(Value::as_f64).ok_or_else(|| ModelError::new(key, "missing or not a number"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(ModelError::new(key, "must be finite"))
    }
}

/// Moments of the initial law used by the examples' default runs.
pub fn default_moments() -> MeasureMoments {
    MeasureMoments { mean: Vector::from_element(1, 1.0), cov: Mat::from_element(1, 1, 0.25) }
}

/// Shared handle to a strategy built from the systemic-risk equilibrium.
pub fn systemic_risk_strategy(eq: &SystemicRiskEquilibrium) -> Arc<FeedbackStrategy> {
    Arc::new(eq.feedback.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn demo_parameters_validate() {
        MeanVarianceParams::demo().validate().unwrap();
        SystemicRiskParams::demo().validate().unwrap();
        NonLQParams::demo().validate().unwrap();
    }

    #[test]
    fn mean_variance_gain_and_offset() {
        let p = MeanVarianceParams::demo();
        assert!((p.gain(0.0) + 2.0).abs() < 1e-12);
        assert!((p.offset(0.0) - 0.2 / 0.09 * 0.4f64.exp()).abs() < 1e-8);
    }

    #[test]
    fn systemic_risk_coefficients() {
        let mut p = SystemicRiskParams::demo();
        p.rho = 0.0;
        let m = systemic_risk_model(&p);
        assert_eq!(m.dynamics.theta0.eval_scalar(0.3), 0.0);
        for (tau, t) in [(0.0, 0.5), (0.2, 0.9)] {
            let s = m.costs.Q.eval(tau, t) + m.costs.Qbar.eval(tau, t);
            assert_eq!(s[(0, 0)], 0.0);
        }
    }

    #[test]
    fn parse_params_kinds() {
        let t = r#"{"kind":"nonlq","horizon":1,"mu":0.1,"sigma":0.2,"sigma0":0.1,"theta":0.5,"delta":2}"#;
        assert!(matches!(parse_params(t).unwrap(), ExampleParams::NonLQ(_)));
        let bad = r#"{"kind":"nonlq","horizon":1,"mu":0.1,"sigma":0.2,"sigma0":0.1,"theta":1.5,"delta":2}"#;
        assert_eq!(parse_params(bad).unwrap_err().location, "theta");
        let extra = r#"{"kind":"systemic-risk","horizon":1,"k":1,"sigma":1,"rho":0,"q":1,"eta":1,"c":1,"zz":1}"#;
        assert_eq!(parse_params(extra).unwrap_err().location, "zz");
    }
}
