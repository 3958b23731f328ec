//! Interacting-particle simulation of the conditional McKean-Vlasov dynamics.
//!
//! Each common-noise path carries `N` particles that share the common
//! Brownian increments; the conditional law is replaced by the empirical
//! measure of those particles. Paths are independent and are simulated in
//! parallel. Every path draws from its own ChaCha stream, so results do not
//! depend on the number of worker threads.
//!
//! Because every strategy used here is affine in the state, the control
//! moments follow from the state moments in closed form and only the first
//! and second empirical moments of the state are recorded per step.

#![allow(non_snake_case)]

use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::equilibrium::{AffinePerturbation, FeedbackStrategy, MeasureMoments};
use crate::examples::NonLQParams;
use crate::linalg::{Mat, Vector};
use crate::model::{LQModel, TimeFn};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("simulation diverged on path {path} at step {step}")]
    SimulationDiverged { path: usize, step: usize },
    #[error("state left the positive half-line: {0}")]
    DomainViolation(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// A closed-loop strategy, resolved at each step to an affine rule
/// `a = K x + k0` that may depend on the current empirical mean.
#[derive(Debug, Clone)]
pub enum StrategySpec {
    LqFeedback(Arc<FeedbackStrategy>),
    /// The same affine map at all times.
    Affine(AffinePerturbation),
    /// `a = alpha(t) x` for a scalar state.
    ScalarLinear(TimeFn),
    /// `v` on `[start, end)` and `base` elsewhere.
    Spiked { base: Box<StrategySpec>, v: Box<StrategySpec>, start: f64, end: f64 },
}

impl StrategySpec {
    /// `(K, k0)` at time `t` given the empirical mean of the state.
    pub fn resolve(&self, t: f64, mean: &Vector) -> (Mat, Vector) {
        match self {
            StrategySpec::LqFeedback(f) => {
                let a = f.as_affine(t, mean);
                (a.A, a.c)
            }
            StrategySpec::Affine(a) => (a.A.clone(), a.c.clone()),
            StrategySpec::ScalarLinear(f) => (Mat::from_element(1, 1, f.eval_scalar(t)), Vector::zeros(1)),
            StrategySpec::Spiked { base, v, start, end } => {
                if in_window(t, *start, *end) {
                    v.resolve(t, mean)
                } else {
                    base.resolve(t, mean)
                }
            }
        }
    }

    fn window(&self) -> Option<(f64, f64)> {
        match self {
            StrategySpec::Spiked { start, end, .. } => Some((*start, *end)),
            _ => None,
        }
    }
}

fn in_window(t: f64, start: f64, end: f64) -> bool {
    let tol = 1e-9 * (1.0 + end.abs());
    t >= start - tol && t < end - tol
}

/// `v` on `[t, t + eps)` and `base` elsewhere.
pub fn spike(base: StrategySpec, v: StrategySpec, t: f64, eps: f64, horizon: f64) -> Result<StrategySpec, SimError> {
    if !(eps > 0.0) || !(t >= 0.0) || t + eps > horizon + 1e-12 * (1.0 + horizon) {
        return Err(SimError::InvalidConfig(format!("spike window [{t}, {}) not inside [0, {horizon})", t + eps)));
    }
    Ok(StrategySpec::Spiked { base: Box::new(base), v: Box::new(v), start: t, end: t + eps })
}

/// Law of the initial state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InitLaw {
    Point { x: Vec<f64> },
    Gaussian { mean: Vec<f64>, cov: Vec<Vec<f64>> },
    /// `exp(N(log_mean, log_sd^2))` for a scalar state.
    LogNormal { log_mean: f64, log_sd: f64 },
}

impl InitLaw {
    pub fn dim(&self) -> usize {
        match self {
            InitLaw::Point { x } => x.len(),
            InitLaw::Gaussian { mean, .. } => mean.len(),
            InitLaw::LogNormal { .. } => 1,
        }
    }

    pub fn moments(&self) -> MeasureMoments {
        match self {
            InitLaw::Point { x } => MeasureMoments::point(Vector::from_column_slice(x)),
            InitLaw::Gaussian { mean, cov } => {
                let d = mean.len();
                MeasureMoments { mean: Vector::from_column_slice(mean), cov: Mat::from_fn(d, d, |i, j| cov[i][j]) }
            }
            InitLaw::LogNormal { log_mean, log_sd } => {
                let s2 = log_sd * log_sd;
                let m = (log_mean + 0.5 * s2).exp();
                MeasureMoments { mean: Vector::from_element(1, m), cov: Mat::from_element(1, 1, m * m * (s2.exp() - 1.0)) }
            }
        }
    }

    fn factor(&self) -> Result<Option<Mat>, SimError> {
        match self {
            InitLaw::Gaussian { mean, cov } => {
                let d = mean.len();
                if cov.len() != d || cov.iter().any(|r| r.len() != d) {
                    return Err(SimError::InvalidConfig("initial covariance shape".into()));
                }
                let c = Mat::from_fn(d, d, |i, j| cov[i][j]);
                let ev = c.clone().symmetric_eigen();
                if ev.eigenvalues.iter().any(|&l| l < -1e-12) {
                    return Err(SimError::InvalidConfig("initial covariance is not PSD".into()));
                }
                let sq = Mat::from_diagonal(&ev.eigenvalues.map(|l| l.max(0.0).sqrt()));
                Ok(Some(&ev.eigenvectors * sq))
            }
            _ => Ok(None),
        }
    }
}

/// Which increments the odd member of an antithetic pair negates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Antithetic {
    Off,
    All,
    /// Only increments of steps starting in `[start, end)`.
    Window(f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub t0: f64,
    /// Particles per common-noise path.
    pub particles: usize,
    /// Common-noise paths.
    pub paths: usize,
    pub dt: f64,
    pub seed: u64,
    pub antithetic: Antithetic,
    /// Particles per path kept for `paths.csv`.
    pub keep_particles: usize,
    /// Keep every `thin`-th step of those particles.
    pub thin: usize,
}

impl SimConfig {
    pub fn new(t0: f64, particles: usize, paths: usize, dt: f64, seed: u64) -> Self {
        Self { t0, particles, paths, dt, seed, antithetic: Antithetic::Off, keep_particles: 0, thin: 1 }
    }
}

/// Model driving the simulation.
#[derive(Debug, Clone, Copy)]
pub enum SimModel<'a> {
    Lq(&'a LQModel),
    /// Scalar state `dX = X alpha (mu dt + sigma dB + sigma0 dW0)`, simulated in log coordinates.
    NonLq(&'a NonLQParams),
}

impl SimModel<'_> {
    fn horizon(&self) -> f64 {
        match self {
            SimModel::Lq(m) => m.horizon,
            SimModel::NonLq(p) => p.horizon,
        }
    }

    fn dims(&self) -> (usize, usize) {
        match self {
            SimModel::Lq(m) => (m.dims.d, m.dims.m),
            SimModel::NonLq(_) => (1, 1),
        }
    }
}

/// Empirical mean and covariance of samples stored row by row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    pub samples: Vec<Vector>,
}

impl EmpiricalMeasure {
    pub fn moments(&self) -> MeasureMoments {
        let n = self.samples.len() as f64;
        let d = self.samples[0].len();
        let mut mean = Vector::zeros(d);
        for s in &self.samples {
            mean += s;
        }
        mean /= n;
        let mut cov = Mat::zeros(d, d);
        for s in &self.samples {
            let c = s - &mean;
            cov += &c * c.transpose();
        }
        cov /= n;
        MeasureMoments { mean, cov }
    }
}

/// Output of [`simulate`]. Per-path arrays are indexed `[path][step]`
/// with `steps + 1` entries per path.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    pub particles: usize,
    pub paths: usize,
    pub d: usize,
    pub m: usize,
    pub dt: f64,
    pub t0: f64,
    pub steps: usize,
    pub seed: u64,
    pub antithetic: Antithetic,
    pub times: Vec<f64>,
    /// Empirical mean of the state, `d` per step.
    pub mean: Vec<Vec<f64>>,
    /// Empirical second moment `E[x x^T]`, column-major `d*d` per step.
    pub second: Vec<Vec<f64>>,
    /// Resolved strategy `a = K x + k0`: `m*d` then `m` entries per step.
    pub gain_k: Vec<Vec<f64>>,
    pub gain_k0: Vec<Vec<f64>>,
    /// Common-noise increments per step.
    pub dw0: Vec<Vec<f64>>,
    /// Terminal states, `particles * d` per path.
    pub terminal: Vec<Vec<f64>>,
    /// Kept trajectories: `(path, particle, step, state)`.
    pub kept: Vec<(usize, usize, usize, Vec<f64>)>,
}

impl ParticleEnsemble {
    pub fn moments_at(&self, path: usize, step: usize) -> MeasureMoments {
        let d = self.d;
        let mean = Vector::from_column_slice(&self.mean[path][step * d..(step + 1) * d]);
        let sec = Mat::from_column_slice(d, d, &self.second[path][step * d * d..(step + 1) * d * d]);
        let cov = sec - &mean * mean.transpose();
        MeasureMoments { mean, cov }
    }

    pub fn gain_at(&self, path: usize, step: usize) -> (Mat, Vector) {
        let (d, m) = (self.d, self.m);
        (
            Mat::from_column_slice(m, d, &self.gain_k[path][step * m * d..(step + 1) * m * d]),
            Vector::from_column_slice(&self.gain_k0[path][step * m..(step + 1) * m]),
        )
    }

    /// Terminal empirical measure of one path.
    pub fn terminal_measure(&self, path: usize) -> EmpiricalMeasure {
        let d = self.d;
        EmpiricalMeasure { samples: self.terminal[path].chunks(d).map(Vector::from_column_slice).collect() }
    }

    /// Common Brownian motion `W0(t_step) - W0(t0)` on one path.
    pub fn common_path(&self, path: usize) -> Vec<f64> {
        let mut w = Vec::with_capacity(self.steps + 1);
        let mut acc = 0.0;
        w.push(0.0);
        for x in &self.dw0[path] {
            acc += x;
            w.push(acc);
        }
        w
    }

    /// Write the kept trajectories as `path,particle,t,x_0..x_{d-1}`.
    pub fn write_paths_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let cols: Vec<String> = (0..self.d).map(|i| format!("x_{i}")).collect();
        writeln!(out, "path,particle,t,{}", cols.join(","))?;
        for (p, i, s, x) in &self.kept {
            let xs: Vec<String> = x.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{p},{i},{},{}", self.times[*s], xs.join(","))?;
        }
        Ok(())
    }
}

struct PathOut {
    mean: Vec<f64>,
    second: Vec<f64>,
    gain_k: Vec<f64>,
    gain_k0: Vec<f64>,
    dw0: Vec<f64>,
    terminal: Vec<f64>,
    kept: Vec<(usize, usize, usize, Vec<f64>)>,
}

/// Number of Euler steps from `t0` to the horizon, if `dt` divides it.
pub fn step_count(horizon: f64, t0: f64, dt: f64) -> Result<usize, SimError> {
    if !(dt > 0.0 && dt.is_finite()) || !(t0 >= 0.0 && t0 < horizon) {
        return Err(SimError::InvalidConfig(format!("need dt > 0 and 0 <= t0 < T, got dt={dt}, t0={t0}")));
    }
    let span = horizon - t0;
    let n = (span / dt).round();
    if n < 1.0 || (n * dt - span).abs() > 1e-9 * (1.0 + span) {
        return Err(SimError::InvalidConfig(format!("dt={dt} does not divide T - t0 = {span}")));
    }
    Ok(n as usize)
}

/// Euler-Maruyama simulation of the closed-loop dynamics from `t0` to `T`.
pub fn simulate(model: SimModel<'_>, strategy: &StrategySpec, init: &InitLaw, cfg: &SimConfig) -> Result<ParticleEnsemble, SimError> {
    let horizon = model.horizon();
    let steps = step_count(horizon, cfg.t0, cfg.dt)?;
    let (d, m) = model.dims();
    if cfg.particles < 2 || cfg.paths < 1 {
        return Err(SimError::InvalidConfig("need at least 2 particles and 1 path".into()));
    }
    if init.dim() != d {
        return Err(SimError::InvalidConfig(format!("initial law has dimension {}, state has {d}", init.dim())));
    }
    if cfg.antithetic != Antithetic::Off && cfg.paths % 2 != 0 {
        return Err(SimError::InvalidConfig("antithetic sampling needs an even number of paths".into()));
    }
    if let SimModel::NonLq(_) = model {
        match init {
            InitLaw::Point { x } if x[0] > 0.0 => {}
            InitLaw::LogNormal { .. } => {}
            _ => return Err(SimError::DomainViolation("initial law must be supported on the positive reals".into())),
        }
        check_scalar_linear(strategy)?;
    }
    let times: Vec<f64> = (0..=steps).map(|s| if s == steps { horizon } else { cfg.t0 + s as f64 * cfg.dt }).collect();
    let chol = init.factor()?;
    let coeffs: Option<Vec<crate::model::Coeffs>> = match model {
        SimModel::Lq(mm) => Some(times.iter().map(|&t| mm.coeffs_at(t)).collect()),
        SimModel::NonLq(_) => None,
    };
    let outs: Vec<Result<PathOut, SimError>> = (0..cfg.paths)
        .into_par_iter()
        .map(|j| run_path(model, strategy, init, chol.as_ref(), cfg, &times, coeffs.as_deref(), j, d, m))
        .collect();
    let mut ens = ParticleEnsemble {
        particles: cfg.particles,
        paths: cfg.paths,
        d,
        m,
        dt: cfg.dt,
        t0: cfg.t0,
        steps,
        seed: cfg.seed,
        antithetic: cfg.antithetic,
        times,
        mean: Vec::with_capacity(cfg.paths),
        second: Vec::with_capacity(cfg.paths),
        gain_k: Vec::with_capacity(cfg.paths),
        gain_k0: Vec::with_capacity(cfg.paths),
        dw0: Vec::with_capacity(cfg.paths),
        terminal: Vec::with_capacity(cfg.paths),
        kept: Vec::new(),
    };
    for o in outs {
        let o = o?;
        ens.mean.push(o.mean);
        ens.second.push(o.second);
        ens.gain_k.push(o.gain_k);
        ens.gain_k0.push(o.gain_k0);
        ens.dw0.push(o.dw0);
        ens.terminal.push(o.terminal);
        ens.kept.extend(o.kept);
    }
    Ok(ens)
}

fn check_scalar_linear(s: &StrategySpec) -> Result<(), SimError> {
    match s {
        StrategySpec::ScalarLinear(_) => Ok(()),
        StrategySpec::Spiked { base, v, .. } => {
            check_scalar_linear(base)?;
            check_scalar_linear(v)
        }
        _ => Err(SimError::InvalidConfig("the multiplicative model only accepts scalar-linear strategies".into())),
    }
}

fn negate(anti: Antithetic, odd: bool, t: f64) -> bool {
    odd && match anti {
        Antithetic::Off => false,
        Antithetic::All => true,
        Antithetic::Window(a, b) => in_window(t, a, b),
    }
}

#[allow(clippy::too_many_arguments)]
fn run_path(
    model: SimModel<'_>,
    strategy: &StrategySpec,
    init: &InitLaw,
    chol: Option<&Mat>,
    cfg: &SimConfig,
    times: &[f64],
    coeffs: Option<&[crate::model::Coeffs]>,
    j: usize,
    d: usize,
    m: usize,
) -> Result<PathOut, SimError> {
    let n = cfg.particles;
    let steps = times.len() - 1;
    let anti = cfg.antithetic != Antithetic::Off;
    let stream = if anti { j / 2 } else { j } as u64;
    let odd = anti && j % 2 == 1;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let sdt = cfg.dt.sqrt();
    let log_coords = matches!(model, SimModel::NonLq(_));

    // initial states; the odd antithetic member mirrors the Gaussian draws
    let flip0 = if negate(cfg.antithetic, odd, times[0]) { -1.0 } else { 1.0 };
    let mut x = vec![0.0; n * d];
    let mut z = vec![0.0; d];
    for i in 0..n {
        match init {
            InitLaw::Point { x: p } => x[i * d..(i + 1) * d].copy_from_slice(p),
            InitLaw::Gaussian { mean, .. } => {
                for zk in z.iter_mut() {
                    *zk = flip0 * rng.sample::<f64, _>(StandardNormal);
                }
                let l = chol.expect("gaussian factor");
                for a in 0..d {
                    let mut v = mean[a];
                    for b in 0..d {
                        v += l[(a, b)] * z[b];
                    }
                    x[i * d + a] = v;
                }
            }
            InitLaw::LogNormal { log_mean, log_sd } => {
                let zz: f64 = flip0 * rng.sample::<f64, _>(StandardNormal);
                x[i] = log_mean + log_sd * zz;
            }
        }
        if log_coords && matches!(init, InitLaw::Point { .. }) {
            x[i] = x[i].ln();
        }
    }

    let mut out = PathOut {
        mean: Vec::with_capacity((steps + 1) * d),
        second: Vec::with_capacity((steps + 1) * d * d),
        gain_k: Vec::with_capacity((steps + 1) * m * d),
        gain_k0: Vec::with_capacity((steps + 1) * m),
        dw0: Vec::with_capacity(steps),
        terminal: Vec::new(),
        kept: Vec::new(),
    };
    let keep = cfg.keep_particles.min(n);
    let thin = cfg.thin.max(1);
    let mut mean = Vector::zeros(d);
    let mut sec = Mat::zeros(d, d);
    let mut e = vec![0.0; d];
    let mut g = vec![0.0; d];
    let mut h = vec![0.0; d];
    let mut E = vec![0.0; d * d];
    let mut G = vec![0.0; d * d];
    let mut H = vec![0.0; d * d];
    for s in 0..=steps {
        let t = times[s];
        state_moments(&x, n, d, log_coords, &mut mean, &mut sec);
        if !(mean.iter().all(|v| v.is_finite()) && sec.iter().all(|v| v.is_finite())) {
            return Err(SimError::SimulationDiverged { path: j, step: s });
        }
        out.mean.extend(mean.iter());
        out.second.extend(sec.iter());
        if keep > 0 && (s % thin == 0 || s == steps) {
            for i in 0..keep {
                let st: Vec<f64> = if log_coords { vec![x[i].exp()] } else { x[i * d..(i + 1) * d].to_vec() };
                out.kept.push((j, i, s, st));
            }
        }
        let (K, k0) = strategy.resolve(t, &mean);
        out.gain_k.extend(K.iter());
        out.gain_k0.extend(k0.iter());
        if s == steps {
            break;
        }
        let dt = times[s + 1] - t;
        let sd = if s + 1 == steps { dt.sqrt() } else { sdt };
        let sign = if negate(cfg.antithetic, odd, t) { -1.0 } else { 1.0 };
        let dw0 = sign * sd * rng.sample::<f64, _>(StandardNormal);
        out.dw0.push(dw0);
        match model {
            SimModel::NonLq(p) => {
                let a = K[(0, 0)];
                let (mu, sg, sg0) = (p.mu.eval_scalar(t), p.sigma.eval_scalar(t), p.sigma0.eval_scalar(t));
                let drift = (a * mu - 0.5 * a * a * (sg * sg + sg0 * sg0)) * dt + a * sg0 * dw0;
                let vol = a * sg;
                for xi in x.iter_mut() {
                    let db: f64 = sign * sd * rng.sample::<f64, _>(StandardNormal);
                    *xi += drift + vol * db;
                }
            }
            SimModel::Lq(_) => {
                let c = &coeffs.expect("lq coefficients")[s];
                let abar = &K * &mean + &k0;
                // x' = x + (E x + e) dt + (G x + g) dB + (H x + h) dW0
                let Em = &c.B + &c.C * &K;
                let Gm = &c.D + &c.F * &K;
                let Hm = &c.D0 + &c.F0 * &K;
                let ev = &c.b0.column(0) + &c.Bbar * &mean + &c.C * &k0 + &c.Cbar * &abar;
                let gv = &c.theta.column(0) + &c.Dbar * &mean + &c.F * &k0 + &c.Fbar * &abar;
                let hv = &c.theta0.column(0) + &c.D0bar * &mean + &c.F0 * &k0 + &c.F0bar * &abar;
                E.copy_from_slice(Em.as_slice());
                G.copy_from_slice(Gm.as_slice());
                H.copy_from_slice(Hm.as_slice());
                e.copy_from_slice(ev.as_slice());
                g.copy_from_slice(gv.as_slice());
                h.copy_from_slice(hv.as_slice());
                let mut y = vec![0.0; d];
                for i in 0..n {
                    let db: f64 = sign * sd * rng.sample::<f64, _>(StandardNormal);
                    let xi = &mut x[i * d..(i + 1) * d];
                    for a in 0..d {
                        let (mut ex, mut gx, mut hx) = (e[a], g[a], h[a]);
                        for b in 0..d {
                            ex += E[a + b * d] * xi[b];
                            gx += G[a + b * d] * xi[b];
                            hx += H[a + b * d] * xi[b];
                        }
                        y[a] = xi[a] + ex * dt + gx * db + hx * dw0;
                    }
                    xi.copy_from_slice(&y);
                }
            }
        }
    }
    out.terminal = if log_coords { x.iter().map(|v| v.exp()).collect() } else { x };
    Ok(out)
}

fn state_moments(x: &[f64], n: usize, d: usize, log_coords: bool, mean: &mut Vector, sec: &mut Mat) {
    mean.fill(0.0);
    sec.fill(0.0);
    if log_coords {
        let (mut s1, mut s2) = (0.0, 0.0);
        for &y in x {
            let v = y.exp();
            s1 += v;
            s2 += v * v;
        }
        mean[0] = s1 / n as f64;
        sec[(0, 0)] = s2 / n as f64;
        return;
    }
    for i in 0..n {
        let xi = &x[i * d..(i + 1) * d];
        for a in 0..d {
            mean[a] += xi[a];
            for b in 0..=a {
                sec[(a, b)] += xi[a] * xi[b];
            }
        }
    }
    let inv = 1.0 / n as f64;
    *mean *= inv;
    for a in 0..d {
        for b in 0..=a {
            let v = sec[(a, b)] * inv;
            sec[(a, b)] = v;
            sec[(b, a)] = v;
        }
    }
}

/// What to evaluate on an ensemble.
#[derive(Debug, Clone, Copy)]
pub enum CostSpec<'a> {
    Lq { model: &'a LQModel, tau: f64 },
    NonLq { params: &'a NonLQParams, tau: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub mean: f64,
    pub stderr: f64,
    /// Cost per common-noise path.
    pub per_path: Vec<f64>,
}

/// Mean and standard error of per-path values; antithetic pairs are
/// averaged first.
pub fn summarize(per_path: &[f64], paired: bool) -> (f64, f64) {
    let vals: Vec<f64> = if paired { per_path.chunks(2).map(|c| 0.5 * (c[0] + c[1])).collect() } else { per_path.to_vec() };
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    if vals.len() < 2 {
        return (mean, 0.0);
    }
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Per-path cost: left-point quadrature of the running cost plus the
/// terminal cost, from the recorded empirical moments.
pub fn estimate_cost(ens: &ParticleEnsemble, cost: &CostSpec<'_>) -> CostEstimate {
    let per_path = match cost {
        CostSpec::Lq { model, tau } => lq_costs(ens, model, *tau),
        CostSpec::NonLq { params, tau } => nonlq_costs(ens, params, *tau),
    };
    let (mean, stderr) = summarize(&per_path, ens.antithetic != Antithetic::Off);
    CostEstimate { mean, stderr, per_path }
}

fn lq_costs(ens: &ParticleEnsemble, model: &LQModel, tau: f64) -> Vec<f64> {
    let kernels: Vec<_> = ens.times[..ens.steps].iter().map(|&t| model.kernels_at(tau, t)).collect();
    let term = model.terminal_at(tau);
    (0..ens.paths)
        .map(|p| {
            let mut acc = 0.0;
            for (s, k) in kernels.iter().enumerate() {
                let mu = ens.moments_at(p, s);
                let sec = &mu.cov + &mu.mean * mu.mean.transpose();
                let (K, k0) = ens.gain_at(p, s);
                let abar = &K * &mu.mean + &k0;
                // E[a a^T] and E[x a^T] for a = K x + k0
                let kx = &K * &mu.mean;
                let aa = &K * &sec * K.transpose() + &kx * k0.transpose() + &k0 * kx.transpose() + &k0 * k0.transpose();
                let xa = &sec * K.transpose() + &mu.mean * k0.transpose();
                let f = (&k.Q * &sec).trace()
                    + mu.mean.dot(&(&k.Qbar * &mu.mean))
                    + (&k.R * &aa).trace()
                    + abar.dot(&(&k.Rbar * &abar))
                    + 2.0 * k.M.component_mul(&xa).sum()
                    + 2.0 * mu.mean.dot(&(&k.Mbar * &abar))
                    + k.q.column(0).dot(&mu.mean)
                    + k.qbar.column(0).dot(&mu.mean)
                    + k.r.column(0).dot(&abar)
                    + k.rbar.column(0).dot(&abar);
                acc += f * (ens.times[s + 1] - ens.times[s]);
            }
            let mu = ens.moments_at(p, ens.steps);
            let sec = &mu.cov + &mu.mean * mu.mean.transpose();
            acc + (&term.P * &sec).trace()
                + mu.mean.dot(&(&term.Pbar * &mu.mean))
                + term.p.column(0).dot(&mu.mean)
                + term.pbar.column(0).dot(&mu.mean)
        })
        .collect()
}

fn nonlq_costs(ens: &ParticleEnsemble, p: &NonLQParams, tau: f64) -> Vec<f64> {
    let scale = -p.lambda.eval(p.horizon - tau);
    (0..ens.paths)
        .map(|j| {
            let xs = &ens.terminal[j];
            let xbar = xs.iter().sum::<f64>() / xs.len() as f64;
            let denom = xbar.powf(p.theta);
            let u = xs.iter().map(|x| p.utility(x / denom)).sum::<f64>() / xs.len() as f64;
            scale * u
        })
        .collect()
}

/// Steps of the ensemble grid whose left point lies in the strategy's spike
/// window, times `dt`: the effective window length.
pub fn effective_window(strategy: &StrategySpec, horizon: f64, t0: f64, dt: f64) -> Result<f64, SimError> {
    let steps = step_count(horizon, t0, dt)?;
    let Some((a, b)) = strategy.window() else { return Ok(0.0) };
    let k = (0..steps).filter(|&s| in_window(t0 + s as f64 * dt, a, b)).count();
    Ok(k as f64 * dt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Dims;

    fn zero_model() -> LQModel {
        LQModel::zero(Dims { d: 2, m: 1, n: 1, k: 1 }, 1.0, 1.0)
    }

    #[test]
    fn zero_dynamics_keep_states() {
        let m = zero_model();
        let s = StrategySpec::Affine(AffinePerturbation::new(Mat::zeros(1, 2), Vector::zeros(1)));
        let init = InitLaw::Gaussian { mean: vec![1.0, -2.0], cov: vec![vec![1.0, 0.3], vec![0.3, 0.5]] };
        let cfg = SimConfig::new(0.0, 50, 3, 0.1, 7);
        let e = simulate(SimModel::Lq(&m), &s, &init, &cfg).unwrap();
        for p in 0..3 {
            let first = e.moments_at(p, 0);
            let last = e.moments_at(p, e.steps);
            assert_eq!(first, last);
        }
    }

    #[test]
    fn deterministic_across_runs() {
        let mut m = zero_model();
        m.dynamics.theta = TimeFn::Constant(Mat::from_column_slice(2, 1, &[0.3, 0.1]));
        m.dynamics.theta0 = TimeFn::Constant(Mat::from_column_slice(2, 1, &[0.2, 0.2]));
        let s = StrategySpec::Affine(AffinePerturbation::new(Mat::from_row_slice(1, 2, &[0.1, -0.2]), Vector::zeros(1)));
        let init = InitLaw::Point { x: vec![0.0, 1.0] };
        let mut cfg = SimConfig::new(0.0, 20, 4, 0.05, 11);
        cfg.antithetic = Antithetic::All;
        let a = simulate(SimModel::Lq(&m), &s, &init, &cfg).unwrap();
        let b = simulate(SimModel::Lq(&m), &s, &init, &cfg).unwrap();
        assert_eq!(a, b);
        // the odd member of each pair sees mirrored common noise
        assert_eq!(a.dw0[0][3], -a.dw0[1][3]);
    }

    #[test]
    fn rejects_bad_configs() {
        let m = zero_model();
        let s = StrategySpec::Affine(AffinePerturbation::new(Mat::zeros(1, 2), Vector::zeros(1)));
        let init = InitLaw::Point { x: vec![0.0, 1.0] };
        assert!(simulate(SimModel::Lq(&m), &s, &init, &SimConfig::new(0.0, 10, 1, 0.3, 1)).is_err());
        assert!(simulate(SimModel::Lq(&m), &s, &init, &SimConfig::new(0.0, 1, 1, 0.1, 1)).is_err());
        assert!(spike(s.clone(), s.clone(), 0.95, 0.1, 1.0).is_err());
        assert!(spike(s.clone(), s, 0.5, 0.0, 1.0).is_err());
    }

    #[test]
    fn empirical_measure_matches_samples() {
        let e = EmpiricalMeasure { samples: vec![Vector::from_vec(vec![1.0]), Vector::from_vec(vec![3.0])] };
        let mm = e.moments();
        assert_eq!(mm.mean[0], 2.0);
        assert_eq!(mm.cov[(0, 0)], 1.0);
    }
}
