//! Coefficients of the linear conditional McKean-Vlasov dynamics and the
//! quadratic two-time cost kernels.
//!
//! Every function of time is either constant or piecewise polynomial. Cost
//! kernels depend on an evaluation time `tau` and a running time `t`; for
//! `t < tau` they are extended by `K(tau; t) = K(tau; tau)`. Terminal kernels
//! are two-time kernels read at `t = T`, so `P(tau) = K(tau; T)`.
//!
//! The state has dimension `d`, the control dimension `m`, and one scalar
//! idiosyncratic and one scalar common Brownian motion drive the state, so the
//! diffusion coefficients are `d`-vectors.

#![allow(non_snake_case)]

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::linalg::{min_eig, Mat};

/// Tolerance on minimum eigenvalues in the PSD checks.
pub const PSD_TOL: f64 = 1e-10;
const BREAK_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{location}: {message}")]
pub struct ModelError {
    pub location: String,
    pub message: String,
}

impl ModelError {
    pub fn new(location: impl Into<String>, message: impl Into<String>) -> Self {
        Self { location: location.into(), message: message.into() }
    }
}

/// Positive discount function `lambda(s)` of elapsed time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DiscountFn {
    /// `exp(-rate * s)`; a negative rate gives an increasing function.
    Exponential { rate: f64 },
    /// `(1 + a s)^(-b / a)` with `a > 0`.
    Hyperbolic { a: f64, b: f64 },
    /// `(1 + s)^exponent`.
    Power { exponent: f64 },
    /// Piecewise-linear interpolation, constant outside the table.
    Tabulated { times: Vec<f64>, values: Vec<f64> },
}

impl DiscountFn {
    pub fn one() -> Self {
        DiscountFn::Exponential { rate: 0.0 }
    }

    pub fn eval(&self, s: f64) -> f64 {
        let s = s.max(0.0);
        match self {
            DiscountFn::Exponential { rate } => (-rate * s).exp(),
            DiscountFn::Hyperbolic { a, b } => (1.0 + a * s).powf(-b / a),
            DiscountFn::Power { exponent } => (1.0 + s).powf(*exponent),
            DiscountFn::Tabulated { times, values } => {
                let (i, w) = locate(times, s);
                values[i] * (1.0 - w) + values[(i + 1).min(values.len() - 1)] * w
            }
        }
    }

    /// Derivative `lambda'(s)`; one-sided (right) at table breakpoints.
    pub fn derivative(&self, s: f64) -> f64 {
        let s = s.max(0.0);
        match self {
            DiscountFn::Exponential { rate } => -rate * (-rate * s).exp(),
            DiscountFn::Hyperbolic { a, b } => -b * (1.0 + a * s).powf(-b / a - 1.0),
            DiscountFn::Power { exponent } => exponent * (1.0 + s).powf(exponent - 1.0),
            DiscountFn::Tabulated { times, values } => {
                if times.len() < 2 || s >= times[times.len() - 1] {
                    return 0.0;
                }
                let (i, _) = locate(times, s);
                (values[i + 1] - values[i]) / (times[i + 1] - times[i])
            }
        }
    }

    fn validate(&self, horizon: f64, loc: &str) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::new(loc, m));
        match self {
            DiscountFn::Exponential { rate } if !rate.is_finite() => return bad("rate must be finite"),
            DiscountFn::Hyperbolic { a, b } if !(*a > 0.0 && b.is_finite()) => {
                return bad("hyperbolic discount needs a > 0 and finite b")
            }
            DiscountFn::Power { exponent } if !exponent.is_finite() => return bad("exponent must be finite"),
            DiscountFn::Tabulated { times, values } => {
                if times.is_empty() || times.len() != values.len() {
                    return bad("times and values must be non-empty and of equal length");
                }
                if times.windows(2).any(|w| !(w[1] > w[0])) || times.iter().any(|t| !t.is_finite()) {
                    return bad("times must be finite and strictly increasing");
                }
                if values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                    return bad("tabulated discount values must be positive");
                }
            }
            _ => {}
        }
        let n = 1000;
        for i in 0..=n {
            let s = horizon * i as f64 / n as f64;
            let v = self.eval(s);
            if !(v.is_finite() && v > 0.0) {
                return Err(ModelError::new(loc, format!("discount not positive at s={s}")));
            }
        }
        Ok(())
    }

    /// Whether `lambda` is non-increasing on `[0, horizon]`.
    pub fn is_nonincreasing(&self, horizon: f64) -> bool {
        let n = 2000;
        (0..n).all(|i| {
            let a = horizon * i as f64 / n as f64;
            let b = horizon * (i + 1) as f64 / n as f64;
            self.eval(b) <= self.eval(a) + 1e-14
        })
    }
}

/// Index `i` and weight `w` such that `x` lies between `grid[i]` and `grid[i+1]`.
pub(crate) fn locate(grid: &[f64], x: f64) -> (usize, f64) {
    let n = grid.len();
    if n < 2 || x <= grid[0] {
        return (0, 0.0);
    }
    if x >= grid[n - 1] {
        return (n - 2, 1.0);
    }
    let i = grid.partition_point(|&g| g <= x).saturating_sub(1).min(n - 2);
    let w = (x - grid[i]) / (grid[i + 1] - grid[i]);
    (i, w)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
    /// Coefficients of `(t - start)^k`, lowest power first.
    pub coeffs: Vec<Mat>,
}

/// Deterministic function of time.
#[derive(Debug, Clone, PartialEq)]
pub enum TimeFn {
    Constant(Mat),
    Poly(Vec<Segment>),
}

impl TimeFn {
    pub fn scalar(v: f64) -> Self {
        TimeFn::Constant(Mat::from_element(1, 1, v))
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        TimeFn::Constant(Mat::zeros(rows, cols))
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            TimeFn::Constant(m) => m.shape(),
            TimeFn::Poly(s) => s[0].coeffs[0].shape(),
        }
    }

    pub fn eval(&self, t: f64) -> Mat {
        match self {
            TimeFn::Constant(m) => m.clone(),
            TimeFn::Poly(segs) => {
                let seg = segs.iter().find(|s| t <= s.end).unwrap_or(&segs[segs.len() - 1]);
                let u = t - seg.start;
                let mut acc = seg.coeffs[seg.coeffs.len() - 1].clone();
                for c in seg.coeffs.iter().rev().skip(1) {
                    acc = acc * u + c;
                }
                acc
            }
        }
    }

    pub fn eval_scalar(&self, t: f64) -> f64 {
        self.eval(t)[(0, 0)]
    }

    pub fn is_zero(&self) -> bool {
        match self {
            TimeFn::Constant(m) => m.iter().all(|v| *v == 0.0),
            TimeFn::Poly(segs) => segs.iter().all(|s| s.coeffs.iter().all(|c| c.iter().all(|v| *v == 0.0))),
        }
    }

    fn scaled(&self, k: f64) -> TimeFn {
        match self {
            TimeFn::Constant(m) => TimeFn::Constant(m * k),
            TimeFn::Poly(segs) => TimeFn::Poly(
                segs.iter()
                    .map(|s| Segment { start: s.start, end: s.end, coeffs: s.coeffs.iter().map(|c| c * k).collect() })
                    .collect(),
            ),
        }
    }

    fn coefficient_mats(&self) -> Vec<&Mat> {
        match self {
            TimeFn::Constant(m) => vec![m],
            TimeFn::Poly(segs) => segs.iter().flat_map(|s| s.coeffs.iter()).collect(),
        }
    }
}

/// Kernel of an evaluation time `tau` and a running time `t`.
#[derive(Debug, Clone, PartialEq)]
pub enum TwoTimeFn {
    TauIndependent(TimeFn),
    /// `lambda(t - tau) * base(t)`.
    Separable { lambda: DiscountFn, base: TimeFn },
    /// Values on a triangular node set; `values[i][j - i]` is `K(times[i]; times[j])`.
    Tabulated { times: Vec<f64>, values: Vec<Vec<Mat>> },
}

impl TwoTimeFn {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        TwoTimeFn::TauIndependent(TimeFn::zeros(rows, cols))
    }

    pub fn constant(m: Mat) -> Self {
        TwoTimeFn::TauIndependent(TimeFn::Constant(m))
    }

    pub fn separable(lambda: DiscountFn, base: Mat) -> Self {
        TwoTimeFn::Separable { lambda, base: TimeFn::Constant(base) }
    }

    pub fn eval(&self, tau: f64, t: f64) -> Mat {
        eval_two_time(self, tau, t)
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            TwoTimeFn::TauIndependent(f) => f.shape(),
            TwoTimeFn::Separable { base, .. } => base.shape(),
            TwoTimeFn::Tabulated { values, .. } => values[0][0].shape(),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            TwoTimeFn::TauIndependent(f) => f.is_zero(),
            TwoTimeFn::Separable { base, .. } => base.is_zero(),
            TwoTimeFn::Tabulated { values, .. } => values.iter().flatten().all(|m| m.iter().all(|v| *v == 0.0)),
        }
    }

    /// The same kernel multiplied by `k`.
    pub fn scaled(&self, k: f64) -> TwoTimeFn {
        match self {
            TwoTimeFn::TauIndependent(f) => TwoTimeFn::TauIndependent(f.scaled(k)),
            TwoTimeFn::Separable { lambda, base } => TwoTimeFn::Separable { lambda: lambda.clone(), base: base.scaled(k) },
            TwoTimeFn::Tabulated { times, values } => TwoTimeFn::Tabulated {
                times: times.clone(),
                values: values.iter().map(|r| r.iter().map(|m| m * k).collect()).collect(),
            },
        }
    }

    fn coefficient_mats(&self) -> Vec<&Mat> {
        match self {
            TwoTimeFn::TauIndependent(f) => f.coefficient_mats(),
            TwoTimeFn::Separable { base, .. } => base.coefficient_mats(),
            TwoTimeFn::Tabulated { values, .. } => values.iter().flatten().collect(),
        }
    }
}

/// `K(tau; max(t, tau))`.
pub fn eval_two_time(k: &TwoTimeFn, tau: f64, t: f64) -> Mat {
    let t = t.max(tau);
    match k {
        TwoTimeFn::TauIndependent(f) => f.eval(t),
        TwoTimeFn::Separable { lambda, base } => base.eval(t) * lambda.eval(t - tau),
        TwoTimeFn::Tabulated { times, values } => {
            let node = |i: usize, j: usize| &values[i][j.max(i) - i];
            let (i, wi) = locate(times, tau);
            let (j, wj) = locate(times, t);
            let i1 = (i + 1).min(times.len() - 1);
            let j1 = (j + 1).min(times.len() - 1);
            node(i, j) * ((1.0 - wi) * (1.0 - wj))
                + node(i, j1) * ((1.0 - wi) * wj)
                + node(i1, j) * (wi * (1.0 - wj))
                + node(i1, j1) * (wi * wj)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub d: usize,
    pub m: usize,
    pub n: usize,
    pub k: usize,
}

/// Drift `b0 + B x + Bbar xbar + C a + Cbar abar`, idiosyncratic diffusion
/// `theta + D x + Dbar xbar + F a + Fbar abar` and the common-noise analogue.
#[derive(Debug, Clone, PartialEq)]
pub struct Dynamics {
    pub b0: TimeFn,
    pub B: TimeFn,
    pub Bbar: TimeFn,
    pub C: TimeFn,
    pub Cbar: TimeFn,
    pub theta: TimeFn,
    pub D: TimeFn,
    pub Dbar: TimeFn,
    pub F: TimeFn,
    pub Fbar: TimeFn,
    pub theta0: TimeFn,
    pub D0: TimeFn,
    pub D0bar: TimeFn,
    pub F0: TimeFn,
    pub F0bar: TimeFn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Costs {
    pub Q: TwoTimeFn,
    pub Qbar: TwoTimeFn,
    pub R: TwoTimeFn,
    pub Rbar: TwoTimeFn,
    pub M: TwoTimeFn,
    pub Mbar: TwoTimeFn,
    pub q: TwoTimeFn,
    pub qbar: TwoTimeFn,
    pub r: TwoTimeFn,
    pub rbar: TwoTimeFn,
    pub P: TwoTimeFn,
    pub Pbar: TwoTimeFn,
    pub p: TwoTimeFn,
    pub pbar: TwoTimeFn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LQModel {
    pub dims: Dims,
    pub horizon: f64,
    pub dynamics: Dynamics,
    pub costs: Costs,
}

/// Dynamics coefficients frozen at one time.
#[derive(Debug, Clone)]
pub struct Coeffs {
    pub b0: Mat,
    pub B: Mat,
    pub Bbar: Mat,
    pub C: Mat,
    pub Cbar: Mat,
    pub theta: Mat,
    pub D: Mat,
    pub Dbar: Mat,
    pub F: Mat,
    pub Fbar: Mat,
    pub theta0: Mat,
    pub D0: Mat,
    pub D0bar: Mat,
    pub F0: Mat,
    pub F0bar: Mat,
}

impl Coeffs {
    pub fn Bh(&self) -> Mat {
        &self.B + &self.Bbar
    }
    pub fn Ch(&self) -> Mat {
        &self.C + &self.Cbar
    }
    pub fn Dh(&self) -> Mat {
        &self.D + &self.Dbar
    }
    pub fn Fh(&self) -> Mat {
        &self.F + &self.Fbar
    }
    pub fn D0h(&self) -> Mat {
        &self.D0 + &self.D0bar
    }
    pub fn F0h(&self) -> Mat {
        &self.F0 + &self.F0bar
    }
}

/// Running-cost kernels frozen at one `(tau, t)`.
#[derive(Debug, Clone)]
pub struct Kernels {
    pub Q: Mat,
    pub Qbar: Mat,
    pub R: Mat,
    pub Rbar: Mat,
    pub M: Mat,
    pub Mbar: Mat,
    pub q: Mat,
    pub qbar: Mat,
    pub r: Mat,
    pub rbar: Mat,
}

/// Terminal kernels at one `tau`.
#[derive(Debug, Clone)]
pub struct Terminal {
    pub P: Mat,
    pub Pbar: Mat,
    pub p: Mat,
    pub pbar: Mat,
}

impl LQModel {
    /// Model with zero dynamics and zero costs except `R = r_scale * I`.
    pub fn zero(dims: Dims, horizon: f64, r_scale: f64) -> Self {
        let (d, m) = (dims.d, dims.m);
        let z = |r, c| TimeFn::zeros(r, c);
        let zk = |r, c| TwoTimeFn::zeros(r, c);
        LQModel {
            dims,
            horizon,
            dynamics: Dynamics {
                b0: z(d, 1),
                B: z(d, d),
                Bbar: z(d, d),
                C: z(d, m),
                Cbar: z(d, m),
                theta: z(d, 1),
                D: z(d, d),
                Dbar: z(d, d),
                F: z(d, m),
                Fbar: z(d, m),
                theta0: z(d, 1),
                D0: z(d, d),
                D0bar: z(d, d),
                F0: z(d, m),
                F0bar: z(d, m),
            },
            costs: Costs {
                Q: zk(d, d),
                Qbar: zk(d, d),
                R: TwoTimeFn::constant(Mat::identity(m, m) * r_scale),
                Rbar: zk(m, m),
                M: zk(d, m),
                Mbar: zk(d, m),
                q: zk(d, 1),
                qbar: zk(d, 1),
                r: zk(m, 1),
                rbar: zk(m, 1),
                P: zk(d, d),
                Pbar: zk(d, d),
                p: zk(d, 1),
                pbar: zk(d, 1),
            },
        }
    }

    pub fn coeffs_at(&self, t: f64) -> Coeffs {
        let y = &self.dynamics;
        Coeffs {
            b0: y.b0.eval(t),
            B: y.B.eval(t),
            Bbar: y.Bbar.eval(t),
            C: y.C.eval(t),
            Cbar: y.Cbar.eval(t),
            theta: y.theta.eval(t),
            D: y.D.eval(t),
            Dbar: y.Dbar.eval(t),
            F: y.F.eval(t),
            Fbar: y.Fbar.eval(t),
            theta0: y.theta0.eval(t),
            D0: y.D0.eval(t),
            D0bar: y.D0bar.eval(t),
            F0: y.F0.eval(t),
            F0bar: y.F0bar.eval(t),
        }
    }

    pub fn kernels_at(&self, tau: f64, t: f64) -> Kernels {
        let c = &self.costs;
        Kernels {
            Q: c.Q.eval(tau, t),
            Qbar: c.Qbar.eval(tau, t),
            R: c.R.eval(tau, t),
            Rbar: c.Rbar.eval(tau, t),
            M: c.M.eval(tau, t),
            Mbar: c.Mbar.eval(tau, t),
            q: c.q.eval(tau, t),
            qbar: c.qbar.eval(tau, t),
            r: c.r.eval(tau, t),
            rbar: c.rbar.eval(tau, t),
        }
    }

    pub fn terminal_at(&self, tau: f64) -> Terminal {
        let c = &self.costs;
        let t = self.horizon;
        Terminal { P: c.P.eval(tau, t), Pbar: c.Pbar.eval(tau, t), p: c.p.eval(tau, t), pbar: c.pbar.eval(tau, t) }
    }

    /// True when the cross kernels `M`, `Mbar` vanish identically.
    pub fn cross_terms_vanish(&self) -> bool {
        self.costs.M.is_zero() && self.costs.Mbar.is_zero()
    }

    /// Every cost kernel multiplied by `k`.
    pub fn with_costs_scaled(&self, k: f64) -> LQModel {
        let c = &self.costs;
        let mut out = self.clone();
        out.costs = Costs {
            Q: c.Q.scaled(k),
            Qbar: c.Qbar.scaled(k),
            R: c.R.scaled(k),
            Rbar: c.Rbar.scaled(k),
            M: c.M.scaled(k),
            Mbar: c.Mbar.scaled(k),
            q: c.q.scaled(k),
            qbar: c.qbar.scaled(k),
            r: c.r.scaled(k),
            rbar: c.rbar.scaled(k),
            P: c.P.scaled(k),
            Pbar: c.Pbar.scaled(k),
            p: c.p.scaled(k),
            pbar: c.pbar.scaled(k),
        };
        out
    }

    /// Check shapes, symmetry of the quadratic kernels and the horizon.
    pub fn validate(&self) -> Result<(), ModelError> {
        let Dims { d, m, n, k } = self.dims;
        if d == 0 || m == 0 {
            return Err(ModelError::new("dims", "d and m must be positive"));
        }
        if n != 1 || k != 1 {
            return Err(ModelError::new("dims", "only one idiosyncratic and one common Brownian motion (n = k = 1) are supported"));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(ModelError::new("horizon", "horizon must be positive and finite"));
        }
        let y = &self.dynamics;
        let dyn_shapes: [(&str, &TimeFn, (usize, usize)); 15] = [
            ("b0", &y.b0, (d, 1)),
            ("B", &y.B, (d, d)),
            ("Bbar", &y.Bbar, (d, d)),
            ("C", &y.C, (d, m)),
            ("Cbar", &y.Cbar, (d, m)),
            ("theta", &y.theta, (d, 1)),
            ("D", &y.D, (d, d)),
            ("Dbar", &y.Dbar, (d, d)),
            ("F", &y.F, (d, m)),
            ("Fbar", &y.Fbar, (d, m)),
            ("theta0", &y.theta0, (d, 1)),
            ("D0", &y.D0, (d, d)),
            ("D0bar", &y.D0bar, (d, d)),
            ("F0", &y.F0, (d, m)),
            ("F0bar", &y.F0bar, (d, m)),
        ];
        for (name, f, shape) in dyn_shapes {
            if f.coefficient_mats().iter().any(|c| c.shape() != shape) {
                return Err(ModelError::new(format!("dynamics.{name}"), format!("expected shape {}x{}", shape.0, shape.1)));
            }
        }
        let c = &self.costs;
        let cost_shapes: [(&str, &TwoTimeFn, (usize, usize), bool); 14] = [
            ("Q", &c.Q, (d, d), true),
            ("Qbar", &c.Qbar, (d, d), true),
            ("R", &c.R, (m, m), true),
            ("Rbar", &c.Rbar, (m, m), true),
            ("M", &c.M, (d, m), false),
            ("Mbar", &c.Mbar, (d, m), false),
            ("q", &c.q, (d, 1), false),
            ("qbar", &c.qbar, (d, 1), false),
            ("r", &c.r, (m, 1), false),
            ("rbar", &c.rbar, (m, 1), false),
            ("P", &c.P, (d, d), true),
            ("Pbar", &c.Pbar, (d, d), true),
            ("p", &c.p, (d, 1), false),
            ("pbar", &c.pbar, (d, 1), false),
        ];
        for (name, f, shape, symmetric) in cost_shapes {
            let loc = format!("costs.{name}");
            for cm in f.coefficient_mats() {
                if cm.shape() != shape {
                    return Err(ModelError::new(loc, format!("expected shape {}x{}", shape.0, shape.1)));
                }
                if symmetric && (cm - cm.transpose()).amax() > BREAK_TOL {
                    return Err(ModelError::new(loc, "kernel must be symmetric"));
                }
            }
            if let TwoTimeFn::Separable { lambda, .. } = f {
                lambda.validate(self.horizon, &format!("{loc}.lambda"))?;
            }
        }
        Ok(())
    }
}

/// Outcome of one family of matrix inequalities over a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionCheck {
    pub name: String,
    pub passed: bool,
    /// Smallest eigenvalue seen, after subtracting the required bound.
    pub min_eigenvalue: f64,
    pub worst_tau: f64,
    pub worst_t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub passed: bool,
    pub checks: Vec<ConditionCheck>,
}

impl ConditionReport {
    fn from_checks(checks: Vec<ConditionCheck>) -> Self {
        Self { passed: checks.iter().all(|c| c.passed), checks }
    }

    pub fn check(&self, name: &str) -> Option<&ConditionCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn failures(&self) -> Vec<&ConditionCheck> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

struct Tracker {
    name: &'static str,
    min: f64,
    at: (f64, f64),
}

impl Tracker {
    fn new(name: &'static str) -> Self {
        Self { name, min: f64::INFINITY, at: (f64::NAN, f64::NAN) }
    }
    fn see(&mut self, v: f64, tau: f64, t: f64) {
        if v < self.min || v.is_nan() {
            self.min = v;
            self.at = (tau, t);
        }
    }
    fn finish(self) -> ConditionCheck {
        ConditionCheck {
            name: self.name.to_string(),
            passed: self.min >= -PSD_TOL,
            min_eigenvalue: self.min,
            worst_tau: self.at.0,
            worst_t: self.at.1,
        }
    }
}

/// Check `Q, Q+Qbar >= 0`, `R, R+Rbar >= delta I` on all node pairs
/// `tau <= t` and `P, P+Pbar >= 0` on all nodes.
pub fn check_pd_conditions(model: &LQModel, grid: &[f64], delta: f64) -> ConditionReport {
    let mut tr = [Tracker::new("Q"), Tracker::new("Q+Qbar"), Tracker::new("R"), Tracker::new("R+Rbar")];
    let mut tp = [Tracker::new("P"), Tracker::new("P+Pbar")];
    for (i, &tau) in grid.iter().enumerate() {
        for &t in &grid[i..] {
            let k = model.kernels_at(tau, t);
            tr[0].see(min_eig(&k.Q), tau, t);
            tr[1].see(min_eig(&(&k.Q + &k.Qbar)), tau, t);
            tr[2].see(min_eig(&k.R) - delta, tau, t);
            tr[3].see(min_eig(&(&k.R + &k.Rbar)) - delta, tau, t);
        }
        let p = model.terminal_at(tau);
        tp[0].see(min_eig(&p.P), tau, model.horizon);
        tp[1].see(min_eig(&(&p.P + &p.Pbar)), tau, model.horizon);
    }
    ConditionReport::from_checks(tr.into_iter().chain(tp).map(Tracker::finish).collect())
}

/// Largest `delta` for which the `R` conditions hold on `grid`.
pub fn admissible_delta(model: &LQModel, grid: &[f64]) -> f64 {
    let rep = check_pd_conditions(model, grid, 0.0);
    let r = rep.check("R").map(|c| c.min_eigenvalue).unwrap_or(0.0);
    let rr = rep.check("R+Rbar").map(|c| c.min_eigenvalue).unwrap_or(0.0);
    r.min(rr)
}

/// Check that every kernel grows in `tau`: `K(t; s) <= K(tau; s)` for
/// `t <= tau <= s`. Only consecutive grid pairs are tested, which implies
/// every triple by transitivity.
pub fn check_monotonicity(model: &LQModel, grid: &[f64]) -> ConditionReport {
    let mut tr = [Tracker::new("Q"), Tracker::new("Q+Qbar"), Tracker::new("R"), Tracker::new("R+Rbar")];
    let mut tp = [Tracker::new("P"), Tracker::new("P+Pbar")];
    for i in 0..grid.len().saturating_sub(1) {
        let (lo, hi) = (grid[i], grid[i + 1]);
        for &s in &grid[i + 1..] {
            let a = model.kernels_at(lo, s);
            let b = model.kernels_at(hi, s);
            tr[0].see(min_eig(&(&b.Q - &a.Q)), lo, s);
            tr[1].see(min_eig(&(&b.Q + &b.Qbar - &a.Q - &a.Qbar)), lo, s);
            tr[2].see(min_eig(&(&b.R - &a.R)), lo, s);
            tr[3].see(min_eig(&(&b.R + &b.Rbar - &a.R - &a.Rbar)), lo, s);
        }
        let a = model.terminal_at(lo);
        let b = model.terminal_at(hi);
        tp[0].see(min_eig(&(&b.P - &a.P)), lo, model.horizon);
        tp[1].see(min_eig(&(&b.P + &b.Pbar - &a.P - &a.Pbar)), lo, model.horizon);
    }
    if grid.len() < 2 {
        for t in tr.iter_mut().chain(tp.iter_mut()) {
            t.min = 0.0;
        }
    }
    ConditionReport::from_checks(tr.into_iter().chain(tp).map(Tracker::finish).collect())
}

/// Read and validate a model file.
pub fn load_model(path: impl AsRef<Path>) -> Result<LQModel, ModelError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| ModelError::new(path.display().to_string(), e.to_string()))?;
    parse_model(&text)
}

/// Parse and validate a model from JSON text.
pub fn parse_model(text: &str) -> Result<LQModel, ModelError> {
    let root: Value = serde_json::from_str(text).map_err(|e| ModelError::new("json", e.to_string()))?;
    let obj = root.as_object().ok_or_else(|| ModelError::new("$", "expected an object"))?;
    let dims_v = obj.get("dims").ok_or_else(|| ModelError::new("dims", "missing"))?;
    let dims: Dims = serde_json::from_value(dims_v.clone()).map_err(|e| ModelError::new("dims", e.to_string()))?;
    if dims.d == 0 || dims.m == 0 || dims.d > 64 || dims.m > 64 {
        return Err(ModelError::new("dims", "d and m must lie in 1..=64"));
    }
    let horizon = obj
        .get("horizon")
        .and_then(Value::as_f64)
        .ok_or_else(|| ModelError::new("horizon", "missing or not a number"))?;
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(ModelError::new("horizon", "horizon must be positive and finite"));
    }
    let default_discount = match obj.get("discount") {
        None | Some(Value::Null) => None,
        Some(v) => Some(parse_discount(v, "discount")?),
    };
    let ctx = Ctx { horizon, default_discount };
    let empty = serde_json::Map::new();
    let section = |name: &str| -> Result<&serde_json::Map<String, Value>, ModelError> {
        match obj.get(name) {
            None => Ok(&empty),
            Some(Value::Object(o)) => Ok(o),
            Some(_) => Err(ModelError::new(name, "expected an object")),
        }
    };
    let dy = section("dynamics")?;
    let co = section("costs")?;
    for (sec, map, allowed) in [
        ("dynamics", dy, &DYN_KEYS[..]),
        ("costs", co, &COST_KEYS[..]),
    ] {
        if let Some(k) = map.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(ModelError::new(format!("{sec}.{k}"), "unknown key"));
        }
    }
    let (d, m) = (dims.d, dims.m);
    let tf = |name: &str, r: usize, c: usize| -> Result<TimeFn, ModelError> {
        match dy.get(name) {
            None => Ok(TimeFn::zeros(r, c)),
            Some(v) => ctx.time_fn(v, &format!("dynamics.{name}"), r, c),
        }
    };
    let kf = |name: &str, r: usize, c: usize| -> Result<TwoTimeFn, ModelError> {
        match co.get(name) {
            None => Ok(TwoTimeFn::zeros(r, c)),
            Some(v) => ctx.two_time_fn(v, &format!("costs.{name}"), r, c),
        }
    };
    let model = LQModel {
        dims,
        horizon,
        dynamics: Dynamics {
            b0: tf("b0", d, 1)?,
            B: tf("B", d, d)?,
            Bbar: tf("Bbar", d, d)?,
            C: tf("C", d, m)?,
            Cbar: tf("Cbar", d, m)?,
            theta: tf("theta", d, 1)?,
            D: tf("D", d, d)?,
            Dbar: tf("Dbar", d, d)?,
            F: tf("F", d, m)?,
            Fbar: tf("Fbar", d, m)?,
            theta0: tf("theta0", d, 1)?,
            D0: tf("D0", d, d)?,
            D0bar: tf("D0bar", d, d)?,
            F0: tf("F0", d, m)?,
            F0bar: tf("F0bar", d, m)?,
        },
        costs: Costs {
            Q: kf("Q", d, d)?,
            Qbar: kf("Qbar", d, d)?,
            R: kf("R", m, m)?,
            Rbar: kf("Rbar", m, m)?,
            M: kf("M", d, m)?,
            Mbar: kf("Mbar", d, m)?,
            q: kf("q", d, 1)?,
            qbar: kf("qbar", d, 1)?,
            r: kf("r", m, 1)?,
            rbar: kf("rbar", m, 1)?,
            P: kf("P", d, d)?,
            Pbar: kf("Pbar", d, d)?,
            p: kf("p", d, 1)?,
            pbar: kf("pbar", d, 1)?,
        },
    };
    model.validate()?;
    Ok(model)
}

const DYN_KEYS: [&str; 15] =
    ["b0", "B", "Bbar", "C", "Cbar", "theta", "D", "Dbar", "F", "Fbar", "theta0", "D0", "D0bar", "F0", "F0bar"];
const COST_KEYS: [&str; 14] =
    ["Q", "Qbar", "R", "Rbar", "M", "Mbar", "q", "qbar", "r", "rbar", "P", "Pbar", "p", "pbar"];

pub(crate) fn parse_discount(v: &Value, loc: &str) -> Result<DiscountFn, ModelError> {
    serde_json::from_value(v.clone()).map_err(|e| ModelError::new(loc, e.to_string()))
}

struct Ctx {
    horizon: f64,
    default_discount: Option<DiscountFn>,
}

impl Ctx {
    fn time_fn(&self, v: &Value, loc: &str, r: usize, c: usize) -> Result<TimeFn, ModelError> {
        parse_time_fn(v, loc, r, c, self.horizon)
    }

    fn two_time_fn(&self, v: &Value, loc: &str, r: usize, c: usize) -> Result<TwoTimeFn, ModelError> {
        let kind = v.get("kind").and_then(Value::as_str).ok_or_else(|| ModelError::new(loc, "missing \"kind\""))?;
        match kind {
            "constant" | "poly" => Ok(TwoTimeFn::TauIndependent(self.time_fn(v, loc, r, c)?)),
            "separable" => {
                let lambda = match v.get("lambda") {
                    None | Some(Value::Null) => self
                        .default_discount
                        .clone()
                        .ok_or_else(|| ModelError::new(format!("{loc}.lambda"), "missing and no default discount"))?,
                    Some(Value::String(s)) if s == "default" => self
                        .default_discount
                        .clone()
                        .ok_or_else(|| ModelError::new(format!("{loc}.lambda"), "no default discount"))?,
                    Some(l) => parse_discount(l, &format!("{loc}.lambda"))?,
                };
                lambda.validate(self.horizon, &format!("{loc}.lambda"))?;
                let base = v.get("base").ok_or_else(|| ModelError::new(format!("{loc}.base"), "missing"))?;
                let base = self.time_fn(base, &format!("{loc}.base"), r, c)?;
                Ok(TwoTimeFn::Separable { lambda, base })
            }
            "tabulated" => {
                let times = number_list(v.get("times"), &format!("{loc}.times"))?;
                check_grid(&times, self.horizon, &format!("{loc}.times"))?;
                let rows = v
                    .get("values")
                    .and_then(Value::as_array)
                    .ok_or_else(|| ModelError::new(format!("{loc}.values"), "expected an array"))?;
                if rows.len() != times.len() {
                    return Err(ModelError::new(format!("{loc}.values"), "one row per node expected"));
                }
                let mut values = Vec::with_capacity(rows.len());
                for (i, row) in rows.iter().enumerate() {
                    let row = row
                        .as_array()
                        .ok_or_else(|| ModelError::new(format!("{loc}.values[{i}]"), "expected an array"))?;
                    if row.len() != times.len() - i {
                        return Err(ModelError::new(
                            format!("{loc}.values[{i}]"),
                            format!("row must hold {} entries (t >= tau)", times.len() - i),
                        ));
                    }
                    let parsed = row
                        .iter()
                        .enumerate()
                        .map(|(j, e)| parse_value(e, &format!("{loc}.values[{i}][{j}]"), r, c))
                        .collect::<Result<Vec<_>, _>>()?;
                    values.push(parsed);
                }
                Ok(TwoTimeFn::Tabulated { times, values })
            }
            other => Err(ModelError::new(loc, format!("unknown kind \"{other}\""))),
        }
    }
}

fn number_list(v: Option<&Value>, loc: &str) -> Result<Vec<f64>, ModelError> {
    v.and_then(Value::as_array)
        .ok_or_else(|| ModelError::new(loc, "expected an array of numbers"))?
        .iter()
        .map(|x| x.as_f64().ok_or_else(|| ModelError::new(loc, "expected a number")))
        .collect()
}

fn check_grid(times: &[f64], horizon: f64, loc: &str) -> Result<(), ModelError> {
    if times.len() < 2 {
        return Err(ModelError::new(loc, "need at least two nodes"));
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(ModelError::new(loc, "nodes must be strictly increasing"));
    }
    if times[0].abs() > BREAK_TOL || (times[times.len() - 1] - horizon).abs() > BREAK_TOL * (1.0 + horizon) {
        return Err(ModelError::new(loc, "nodes must run from 0 to the horizon"));
    }
    Ok(())
}

/// Parse a scalar, a flat array (vector) or a row-major nested array.
pub(crate) fn parse_value(v: &Value, loc: &str, r: usize, c: usize) -> Result<Mat, ModelError> {
    let shape_err = || ModelError::new(loc, format!("expected shape {r}x{c}"));
    let num = |x: &Value| -> Result<f64, ModelError> {
        let f = x.as_f64().ok_or_else(|| ModelError::new(loc, "expected a number"))?;
        if f.is_finite() {
            Ok(f)
        } else {
            Err(ModelError::new(loc, "non-finite number"))
        }
    };
    match v {
        Value::Number(_) if r == 1 && c == 1 => Ok(Mat::from_element(1, 1, num(v)?)),
        Value::Array(items) if items.iter().all(|x| !x.is_array()) => {
            if c == 1 && items.len() == r || r == 1 && items.len() == c {
                let vals = items.iter().map(num).collect::<Result<Vec<_>, _>>()?;
                Ok(Mat::from_row_slice(r, c, &vals))
            } else {
                Err(shape_err())
            }
        }
        Value::Array(rows) => {
            if rows.len() != r {
                return Err(shape_err());
            }
            let mut vals = Vec::with_capacity(r * c);
            for row in rows {
                let row = row.as_array().ok_or_else(shape_err)?;
                if row.len() != c {
                    return Err(shape_err());
                }
                for x in row {
                    vals.push(num(x)?);
                }
            }
            Ok(Mat::from_row_slice(r, c, &vals))
        }
        _ => Err(shape_err()),
    }
}

pub(crate) fn parse_time_fn(v: &Value, loc: &str, r: usize, c: usize, horizon: f64) -> Result<TimeFn, ModelError> {
    let kind = v.get("kind").and_then(Value::as_str).ok_or_else(|| ModelError::new(loc, "missing \"kind\""))?;
    match kind {
        "constant" => {
            let val = v.get("value").ok_or_else(|| ModelError::new(format!("{loc}.value"), "missing"))?;
            Ok(TimeFn::Constant(parse_value(val, &format!("{loc}.value"), r, c)?))
        }
        "poly" => {
            let segs = v
                .get("segments")
                .and_then(Value::as_array)
                .ok_or_else(|| ModelError::new(format!("{loc}.segments"), "expected an array"))?;
            if segs.is_empty() {
                return Err(ModelError::new(format!("{loc}.segments"), "no segments"));
            }
            let mut out: Vec<Segment> = Vec::with_capacity(segs.len());
            for (i, s) in segs.iter().enumerate() {
                let sl = format!("{loc}.segments[{i}]");
                let start = s.get("start").and_then(Value::as_f64).ok_or_else(|| ModelError::new(&sl, "missing start"))?;
                let end = s.get("end").and_then(Value::as_f64).ok_or_else(|| ModelError::new(&sl, "missing end"))?;
                if !(start.is_finite() && end.is_finite() && end > start) {
                    return Err(ModelError::new(&sl, "segment needs finite start < end"));
                }
                let coeffs = s
                    .get("coeffs")
                    .and_then(Value::as_array)
                    .ok_or_else(|| ModelError::new(format!("{sl}.coeffs"), "expected an array"))?;
                if coeffs.is_empty() || coeffs.len() > 4 {
                    return Err(ModelError::new(format!("{sl}.coeffs"), "polynomial degree must be 0..=3"));
                }
                let coeffs = coeffs
                    .iter()
                    .enumerate()
                    .map(|(k, x)| parse_value(x, &format!("{sl}.coeffs[{k}]"), r, c))
                    .collect::<Result<Vec<_>, _>>()?;
                out.push(Segment { start, end, coeffs });
            }
            check_segments(&out, horizon, loc)?;
            Ok(TimeFn::Poly(out))
        }
        other => Err(ModelError::new(loc, format!("unknown kind \"{other}\""))),
    }
}

fn check_segments(segs: &[Segment], horizon: f64, loc: &str) -> Result<(), ModelError> {
    let tol = BREAK_TOL * (1.0 + horizon);
    if segs[0].start > tol {
        return Err(ModelError::new(loc, format!("gap at t={}", 0.0)));
    }
    if segs[0].start < -tol {
        return Err(ModelError::new(loc, "segment starts before t=0"));
    }
    for w in segs.windows(2) {
        if w[1].start > w[0].end + tol {
            return Err(ModelError::new(loc, format!("gap at t={}", w[0].end)));
        }
        if w[1].start < w[0].end - tol {
            return Err(ModelError::new(loc, format!("overlap at t={}", w[1].start)));
        }
        let left = TimeFn::Poly(vec![w[0].clone()]).eval(w[0].end);
        let right = w[1].coeffs[0].clone();
        let scale = 1.0 + left.amax().max(right.amax());
        if (left - right).amax() > BREAK_TOL * scale {
            return Err(ModelError::new(loc, format!("discontinuity at t={}", w[0].end)));
        }
    }
    let last = segs[segs.len() - 1].end;
    if last < horizon - tol {
        return Err(ModelError::new(loc, format!("gap at t={last}")));
    }
    if last > horizon + tol {
        return Err(ModelError::new(loc, "segment extends past the horizon"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_model_json(extra_dyn: &str) -> String {
        format!(
            r#"{{"dims":{{"d":1,"m":1,"n":1,"k":1}},"horizon":1.0,
               "dynamics":{{{extra_dyn}}},
               "costs":{{"R":{{"kind":"constant","value":1.0}}}}}}"#
        )
    }

    #[test]
    fn separable_kernel_at_unit_gap() {
        let k = TwoTimeFn::separable(DiscountFn::Exponential { rate: 1.0 }, Mat::from_element(1, 1, 1.0));
        let v = eval_two_time(&k, 0.0, 1.0)[(0, 0)];
        assert!((v - 0.367_879_441_171_442_3).abs() < 1e-15);
    }

    #[test]
    fn extension_below_diagonal() {
        let k = TwoTimeFn::Separable {
            lambda: DiscountFn::Hyperbolic { a: 1.0, b: 2.0 },
            base: TimeFn::Poly(vec![Segment {
                start: 0.0,
                end: 1.0,
                coeffs: vec![Mat::from_element(1, 1, 1.0), Mat::from_element(1, 1, 3.0)],
            }]),
        };
        assert_eq!(eval_two_time(&k, 0.6, 0.2), eval_two_time(&k, 0.6, 0.6));
        // K(tau; tau) = lambda(0) K0(tau)
        assert!((eval_two_time(&k, 0.6, 0.6)[(0, 0)] - 2.8).abs() < 1e-14);
    }

    #[test]
    fn identity_tau_independent() {
        let k = TwoTimeFn::constant(Mat::identity(3, 3));
        assert_eq!(eval_two_time(&k, 0.2, 0.9), Mat::identity(3, 3));
    }

    #[test]
    fn tabulated_kernel_interpolates_and_extends() {
        let times = vec![0.0, 0.5, 1.0];
        let e = |x: f64| Mat::from_element(1, 1, x);
        let values = vec![vec![e(1.0), e(2.0), e(3.0)], vec![e(4.0), e(5.0)], vec![e(6.0)]];
        let k = TwoTimeFn::Tabulated { times, values };
        assert_eq!(k.eval(0.0, 0.25)[(0, 0)], 1.5);
        assert_eq!(k.eval(1.0, 1.0)[(0, 0)], 6.0);
        assert_eq!(k.eval(0.5, 0.1)[(0, 0)], 4.0);
    }

    #[test]
    fn negative_q_fails_with_minimum_eigenvalue() {
        let mut m = LQModel::zero(Dims { d: 2, m: 1, n: 1, k: 1 }, 1.0, 1.0);
        m.costs.Q = TwoTimeFn::constant(-Mat::identity(2, 2));
        let grid: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        let rep = check_pd_conditions(&m, &grid, 0.5);
        assert!(!rep.passed);
        let q = rep.check("Q").unwrap();
        assert!(!q.passed);
        assert!((q.min_eigenvalue + 1.0).abs() < 1e-12);
        assert!(rep.check("R").unwrap().passed);
    }

    #[test]
    fn zero_cost_model_passes() {
        let m = LQModel::zero(Dims { d: 1, m: 2, n: 1, k: 1 }, 2.0, 0.3);
        let grid: Vec<f64> = (0..=8).map(|i| i as f64 / 4.0).collect();
        assert!(check_pd_conditions(&m, &grid, 0.3).passed);
        assert!(check_monotonicity(&m, &grid).passed);
    }

    #[test]
    fn increasing_discount_breaks_monotonicity() {
        let mut m = LQModel::zero(Dims { d: 1, m: 1, n: 1, k: 1 }, 1.0, 1.0);
        m.costs.Q = TwoTimeFn::separable(DiscountFn::Exponential { rate: -0.5 }, Mat::from_element(1, 1, 1.0));
        let grid: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        let rep = check_monotonicity(&m, &grid);
        assert!(!rep.check("Q").unwrap().passed);
        m.costs.Q = TwoTimeFn::separable(DiscountFn::Exponential { rate: 0.5 }, Mat::from_element(1, 1, 1.0));
        assert!(check_monotonicity(&m, &grid).passed);
    }

    #[test]
    fn segment_gap_is_reported() {
        let dynamics = r#""B":{"kind":"poly","segments":[
            {"start":0.0,"end":0.4,"coeffs":[1.0]},
            {"start":0.5,"end":1.0,"coeffs":[1.0]}]}"#;
        let err = parse_model(&scalar_model_json(dynamics)).unwrap_err();
        assert_eq!(err.location, "dynamics.B");
        assert!(err.message.starts_with("gap at t=0.4"), "{}", err.message);
    }

    #[test]
    fn segment_jump_is_rejected() {
        let dynamics = r#""B":{"kind":"poly","segments":[
            {"start":0.0,"end":0.5,"coeffs":[1.0, 1.0]},
            {"start":0.5,"end":1.0,"coeffs":[1.0]}]}"#;
        let err = parse_model(&scalar_model_json(dynamics)).unwrap_err();
        assert!(err.message.contains("discontinuity"));
    }

    #[test]
    fn continuous_pieces_evaluate_across_breakpoint() {
        let dynamics = r#""B":{"kind":"poly","segments":[
            {"start":0.0,"end":0.5,"coeffs":[1.0, 2.0]},
            {"start":0.5,"end":1.0,"coeffs":[2.0, 0.0, 4.0]}]}"#;
        let m = parse_model(&scalar_model_json(dynamics)).unwrap();
        let b = &m.dynamics.B;
        assert!((b.eval_scalar(0.5 - 1e-13) - b.eval_scalar(0.5 + 1e-13)).abs() < 1e-10);
        assert!((b.eval_scalar(0.75) - 2.25).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_located() {
        let dynamics = r#""B":{"kind":"constant","value":[1.0, 2.0]}"#;
        let err = parse_model(&scalar_model_json(dynamics)).unwrap_err();
        assert_eq!(err.location, "dynamics.B.value");
    }

    #[test]
    fn asymmetric_q_rejected() {
        let text = r#"{"dims":{"d":2,"m":1,"n":1,"k":1},"horizon":1.0,
            "costs":{"Q":{"kind":"constant","value":[[1,2],[0,1]]}}}"#;
        let err = parse_model(text).unwrap_err();
        assert_eq!(err.location, "costs.Q");
    }

    #[test]
    fn discount_shapes() {
        let h = DiscountFn::Hyperbolic { a: 2.0, b: 1.0 };
        assert!((h.eval(1.0) - 3f64.powf(-0.5)).abs() < 1e-15);
        let p = DiscountFn::Power { exponent: 0.5 };
        assert!((p.derivative(3.0) - 0.25).abs() < 1e-15);
        let t = DiscountFn::Tabulated { times: vec![0.0, 1.0], values: vec![1.0, 0.5] };
        assert_eq!(t.eval(0.5), 0.75);
        assert_eq!(t.derivative(0.5), -0.5);
        assert!(t.is_nonincreasing(1.0));
    }
}
