//! Statistical and analytic checks of the equilibrium property.
//!
//! [`estimate_delta`] compares the cost of the equilibrium strategy with the
//! cost of the same strategy spiked by a perturbation `v` on `[t, t + eps)`.
//! Both runs use the same random numbers, so the per-path difference is
//! `O(eps)` and the ratio estimates the slope `Delta(t, mu; v)`. A two-point
//! linear extrapolation in `eps` removes the first-order remainder.
//! [`equilibrium_certificate`] checks the sign of `Gamma` over random affine
//! perturbations without any simulation.

#![allow(non_snake_case)]

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::equilibrium::{equilibrium_affine, gamma, AffinePerturbation, FeedbackStrategy, MeasureMoments};
use crate::linalg::{Mat, Vector};
use crate::mckv_sim::{effective_window, estimate_cost, simulate, spike, summarize, Antithetic, CostSpec, InitLaw, SimConfig, SimError, SimModel, StrategySpec};
use crate::model::LQModel;
use crate::riccati::{RiccatiError, RiccatiSolution};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum VerifyError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Riccati(#[from] RiccatiError),
    #[error("invalid epsilon schedule: {0}")]
    Schedule(String),
}

/// Monte Carlo settings of a slope probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaConfig {
    pub particles: usize,
    /// Common-noise paths; antithetic pairs, so must be even.
    pub paths: usize,
    pub dt: f64,
    pub seed: u64,
    /// Nominal window lengths, strictly decreasing, at least three.
    pub eps: Vec<f64>,
}

impl DeltaConfig {
    /// Windows `{0.2, 0.1, 0.05, 0.025} (T - t)`.
    pub fn default_eps(horizon: f64, t: f64) -> Vec<f64> {
        [0.2, 0.1, 0.05, 0.025].iter().map(|f| f * (horizon - t)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub t: f64,
    pub moments: MeasureMoments,
    pub perturbation_id: usize,
    /// Effective window lengths (whole Euler steps).
    pub eps: Vec<f64>,
    pub estimates: Vec<f64>,
    pub stderrs: Vec<f64>,
    pub extrapolated: f64,
    pub extrapolated_stderr: f64,
    /// Remainder estimate of the extrapolation from its last two values.
    pub extrapolation_error: f64,
    /// `sqrt(stderr^2 + extrapolation_error^2)`.
    pub combined_stderr: f64,
    pub analytic_gamma: f64,
    /// `|extrapolated - analytic| <= 3 stderr`.
    pub within_band: bool,
    /// `|extrapolated - analytic| <= 3 combined_stderr`.
    pub within_combined_band: bool,
    /// `extrapolated > 3 stderr`.
    pub positive: bool,
    /// Every per-window estimate within 3 stderr of the analytic value.
    pub all_within_band: bool,
    pub particles: usize,
    pub paths: usize,
    pub dt: f64,
    pub seed: u64,
}

/// Simulated slope without the analytic benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct SlopeEstimate {
    pub eps: Vec<f64>,
    pub estimates: Vec<f64>,
    pub stderrs: Vec<f64>,
    pub extrapolated: f64,
    pub extrapolated_stderr: f64,
    pub extrapolation_error: f64,
}

/// Spiked-minus-base cost slopes under common random numbers.
pub fn slope_probe(
    model: SimModel<'_>,
    base: &StrategySpec,
    v: &StrategySpec,
    cost: CostSpec<'_>,
    t: f64,
    horizon: f64,
    init: &InitLaw,
    cfg: &DeltaConfig,
) -> Result<SlopeEstimate, VerifyError> {
    if cfg.eps.len() < 3 || cfg.eps.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(VerifyError::Schedule("need at least three strictly decreasing windows".into()));
    }
    if t + cfg.eps[0] >= horizon {
        return Err(VerifyError::Schedule(format!("t + eps = {} must stay below T = {horizon}", t + cfg.eps[0])));
    }
    let mut sc = SimConfig::new(t, cfg.particles, cfg.paths, cfg.dt, cfg.seed);
    sc.antithetic = Antithetic::All;
    let base_ens = simulate(model, base, init, &sc)?;
    let base_cost = estimate_cost(&base_ens, &cost);
    drop(base_ens);
    let mut eps_eff = Vec::new();
    let mut per_eps: Vec<Vec<f64>> = Vec::new();
    for &e in &cfg.eps {
        let spiked = spike(base.clone(), v.clone(), t, e, horizon)?;
        let eff = effective_window(&spiked, horizon, t, cfg.dt)?;
        if eff <= 0.0 {
            return Err(VerifyError::Schedule(format!("window {e} is shorter than one step")));
        }
        let ens = simulate(model, &spiked, init, &sc)?;
        let c = estimate_cost(&ens, &cost);
        per_eps.push(c.per_path.iter().zip(&base_cost.per_path).map(|(a, b)| (a - b) / eff).collect());
        eps_eff.push(eff);
    }
    let mut estimates = Vec::new();
    let mut stderrs = Vec::new();
    for d in &per_eps {
        let (m, s) = summarize(d, true);
        estimates.push(m);
        stderrs.push(s);
    }
    let k = eps_eff.len();
    let (e1, e2) = (eps_eff[k - 2], eps_eff[k - 1]);
    let rich: Vec<f64> = per_eps[k - 2].iter().zip(&per_eps[k - 1]).map(|(d1, d2)| (e1 * d2 - e2 * d1) / (e1 - e2)).collect();
    let (extrapolated, extrapolated_stderr) = summarize(&rich, true);
    // with an eps^2 remainder the error of the last extrapolation is a third
    // of its change from the previous pair
    let (e0, m0, m1, m2) = (eps_eff[k - 3], estimates[k - 3], estimates[k - 2], estimates[k - 1]);
    let prev = (e0 * m1 - e1 * m0) / (e0 - e1);
    let last = (e1 * m2 - e2 * m1) / (e1 - e2);
    let extrapolation_error = (last - prev).abs() / 3.0;
    Ok(SlopeEstimate { eps: eps_eff, estimates, stderrs, extrapolated, extrapolated_stderr, extrapolation_error })
}

/// Assemble a report from a simulated slope and its analytic benchmark.
pub fn report(slope: SlopeEstimate, analytic: f64, t: f64, moments: MeasureMoments, id: usize, cfg: &DeltaConfig) -> DeltaReport {
    let within = |x: f64, se: f64| (x - analytic).abs() <= 3.0 * se;
    let combined = slope.extrapolated_stderr.hypot(slope.extrapolation_error);
    DeltaReport {
        t,
        moments,
        perturbation_id: id,
        within_band: within(slope.extrapolated, slope.extrapolated_stderr),
        within_combined_band: within(slope.extrapolated, combined),
        combined_stderr: combined,
        extrapolation_error: slope.extrapolation_error,
        positive: slope.extrapolated > 3.0 * slope.extrapolated_stderr,
        all_within_band: slope.estimates.iter().zip(&slope.stderrs).all(|(x, s)| within(*x, *s)),
        eps: slope.eps,
        estimates: slope.estimates,
        stderrs: slope.stderrs,
        extrapolated: slope.extrapolated,
        extrapolated_stderr: slope.extrapolated_stderr,
        analytic_gamma: analytic,
        particles: cfg.particles,
        paths: cfg.paths,
        dt: cfg.dt,
        seed: cfg.seed,
    }
}

/// Monte Carlo slope of the cost at `tau = t` when the equilibrium feedback
/// is replaced by `v` near `t`, compared with the analytic `Gamma`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_delta(
    model: &LQModel,
    sol: &RiccatiSolution,
    strategy: &Arc<FeedbackStrategy>,
    v: &AffinePerturbation,
    t: f64,
    init: &InitLaw,
    cfg: &DeltaConfig,
    id: usize,
) -> Result<DeltaReport, VerifyError> {
    let moments = init.moments();
    let analytic = gamma(model, sol, t, &moments, v)?;
    let base = StrategySpec::LqFeedback(strategy.clone());
    let pert = StrategySpec::Affine(v.clone());
    let slope = slope_probe(SimModel::Lq(model), &base, &pert, CostSpec::Lq { model, tau: t }, t, model.horizon, init, cfg)?;
    Ok(report(slope, analytic, t, moments, id, cfg))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateProbe {
    pub t: f64,
    pub sample: usize,
    /// `Gamma` at the equilibrium map itself.
    pub gamma_equilibrium: f64,
    /// Smallest `Gamma` over the random perturbations.
    pub min_gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub tol: f64,
    pub perturbations: usize,
    pub probes: Vec<CertificateProbe>,
    pub min_gamma: f64,
    pub max_gamma_equilibrium: f64,
    pub passed: bool,
}

/// Random affine map around `center`: entries perturbed by `scale N(0,1)`.
pub fn random_affine(rng: &mut impl Rng, center: &AffinePerturbation, scale: f64) -> AffinePerturbation {
    let (m, d) = center.A.shape();
    let A = &center.A + Mat::from_fn(m, d, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
    let c = &center.c + Vector::from_fn(m, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
    AffinePerturbation { A, c }
}

/// Check `Gamma(t, mu; a*) <= tol` and `Gamma(t, mu; v) >= -tol` for
/// `count` random affine `v` at every `(t, mu)` pair.
pub fn equilibrium_certificate(
    model: &LQModel,
    sol: &RiccatiSolution,
    times: &[f64],
    samples: &[MeasureMoments],
    count: usize,
    tol: f64,
    seed: u64,
) -> Result<Certificate, RiccatiError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probes = Vec::new();
    for &t in times {
        for (k, mu) in samples.iter().enumerate() {
            let star = equilibrium_affine(model, sol, t, mu)?;
            let g0 = gamma(model, sol, t, mu, &star)?;
            let mut lo = f64::INFINITY;
            for i in 0..count {
                // mix local and far perturbations
                let scale = [1e-3, 0.1, 1.0, 10.0][i % 4];
                let v = random_affine(&mut rng, &star, scale);
                lo = lo.min(gamma(model, sol, t, mu, &v)?);
            }
            probes.push(CertificateProbe { t, sample: k, gamma_equilibrium: g0, min_gamma: lo });
        }
    }
    let min_gamma = probes.iter().map(|p| p.min_gamma).fold(f64::INFINITY, f64::min);
    let max_eq = probes.iter().map(|p| p.gamma_equilibrium.abs()).fold(0.0, f64::max);
    Ok(Certificate { tol, perturbations: count, passed: min_gamma >= -tol && max_eq <= tol, probes, min_gamma, max_gamma_equilibrium: max_eq })
}
