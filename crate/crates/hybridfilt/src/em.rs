//! EM algorithm under partial observation.
//!
//! The E-step filters the four exponential-family statistics. Each filtered
//! statistic solves an augmented vector recursion sharing the filter's
//! homogeneous part `dF = ε^{-2} diag(F) C^{θ0}(Y)^T dY + Q^{θ0}(Y) F dt`
//! with its own source term:
//!
//! 1. counts `N^{ji}`:        `e_j · q^{θ0}_{ji}(Y_s) ⟨e_i, σ_s⟩ ds`
//! 2. occupation integrals:   `e_i · q^{θ0}_{ji}(Y_s) ⟨e_i, σ_s⟩ ds`
//! 3. drift/observation dots: `diag(σ_s) C^l(Y_s)^T dY_s`
//! 4. Gram integrals:         `diag(σ_s) D^{l,m}(Y_s) ds`
//!
//! where `σ` is the unnormalized filter. All recursions are integrated in
//! one pass, in the filter's rescaled representation with shared per-step
//! scale factors, so memory stays O(states × statistics) with no trajectory
//! storage. The conditional expectation of a statistic is the total mass of
//! its vector at the horizon divided by the filter mass — in the rescaled
//! frame simply the final component sum.
//!
//! The M-step is the exponential-family maximizer of
//! [`crate::suffstats::maximize_expansion`] applied to the filtered
//! statistics; iterating the two steps is [`em_run`].

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::filter::{self, FilterParams, FilterScheme, PathCache, StepWork};
use crate::model::ModelSpec;
use crate::path::YPath;
use crate::suffstats::{self, MStepOutcome, SuffStatsView};

/// Conditional expectations of the sufficient statistics given the observed
/// path, under the parameter `theta_ref`.
#[derive(Debug, Clone)]
pub struct FilteredStats {
    /// Entry `(j, i)`: `E[N^{ji}_T | F^Y_T]`.
    pub n_count: DMatrix<f64>,
    /// Entry `(j, i)`: filtered occupation integral.
    pub occupation: DMatrix<f64>,
    /// Entry `l`: filtered drift/observation integral.
    pub drift_lin: DVector<f64>,
    /// Entry `(l, m)`: filtered Gram integral, symmetric by construction.
    pub gram: DMatrix<f64>,
    pub theta_ref: Vec<f64>,
    /// Log filter mass at the horizon (the θ0-run normalizer).
    pub log_mass: f64,
    /// Positivity clampings across the filter and all augmented recursions.
    pub floor_events: u64,
}

impl<'a> From<&'a FilteredStats> for SuffStatsView<'a> {
    fn from(stats: &'a FilteredStats) -> Self {
        SuffStatsView {
            n_count: &stats.n_count,
            occupation: &stats.occupation,
            drift_lin: &stats.drift_lin,
            gram: &stats.gram,
            theta_ref: &stats.theta_ref,
        }
    }
}

/// Filter the four statistic families along the observed path.
pub fn e_step(observed: &YPath, spec: &ModelSpec, theta0: &[f64]) -> Result<FilteredStats> {
    let cache = PathCache::build(observed, spec)?;
    e_step_cached(&cache, spec, theta0)
}

pub(crate) fn e_step_cached(cache: &PathCache, spec: &ModelSpec, theta0: &[f64]) -> Result<FilteredStats> {
    let params = FilterParams::new(spec, theta0)?;
    let k = cache.k;
    let l = cache.l;
    let np = filter::n_pairs(l);

    // Off-diagonal pair list in (from, to) order.
    let mut pairs = Vec::with_capacity(k * (k - 1));
    for from in 0..k {
        for to in 0..k {
            if to != from {
                pairs.push((to, from));
            }
        }
    }

    let mut sigma = spec.init_dist.clone();
    let mut work = StepWork::new(k);
    let mut floor_events = 0u64;
    let mut log_mass = 0.0;

    // One k-vector per statistic, all starting at zero.
    let mut f_count = vec![0.0; pairs.len() * k];
    let mut f_occ = vec![0.0; pairs.len() * k];
    let mut f_drift = vec![0.0; l * k];
    let mut f_gram = vec![0.0; np * k];
    let mut hom = vec![0.0; k];

    let mut sigma_prev = vec![0.0; k];
    for m in 0..cache.n_steps {
        let dtm = cache.dt[m];
        cache.obs_dot(m, &params.psi, &mut work.cdy);

        // Homogeneous part of every augmented recursion, written back in
        // place; sources are added after the shared rescaling so that they
        // consume the rescaled filter directly (keeping the k = 1 case, where
        // conditioning is vacuous, exact).
        let mut homogeneous = |f: &mut [f64]| {
            for i in 0..k {
                hom[i] = f[i] * (1.0 + params.inv_eps2 * work.cdy[i]);
            }
            cache.add_q_action(m, &params.phi, dtm, f, &mut hom);
            f.copy_from_slice(&hom);
        };
        for pidx in 0..pairs.len() {
            homogeneous(&mut f_count[pidx * k..(pidx + 1) * k]);
            homogeneous(&mut f_occ[pidx * k..(pidx + 1) * k]);
        }
        for lidx in 0..l {
            homogeneous(&mut f_drift[lidx * k..(lidx + 1) * k]);
        }
        for pidx in 0..np {
            homogeneous(&mut f_gram[pidx * k..(pidx + 1) * k]);
        }

        // Advance the filter; all augmented vectors share its mass factor.
        sigma_prev.copy_from_slice(&sigma);
        let mass = filter::sigma_step(cache, m, &params, FilterScheme::Euler, &mut sigma, &mut work, &mut floor_events);
        log_mass += mass.ln();

        let mut commit = |f: &mut [f64], src: &mut dyn FnMut(usize) -> f64, clamp: bool| {
            for i in 0..k {
                let v = f[i] / mass + src(i);
                f[i] = if clamp && v < 0.0 {
                    floor_events += 1;
                    0.0
                } else {
                    v
                };
            }
        };
        let q_base = m * k * k;
        for (pidx, (to, from)) in pairs.iter().enumerate() {
            let rate = params.phi[to * k + from] * cache.q0[q_base + to * k + from];
            let weight = rate * sigma_prev[*from] * dtm;
            commit(&mut f_count[pidx * k..(pidx + 1) * k], &mut |i| if i == *to { weight } else { 0.0 }, true);
            commit(&mut f_occ[pidx * k..(pidx + 1) * k], &mut |i| if i == *from { weight } else { 0.0 }, true);
        }
        for lidx in 0..l {
            let row = &cache.bdy[(m * l + lidx) * k..(m * l + lidx + 1) * k];
            commit(&mut f_drift[lidx * k..(lidx + 1) * k], &mut |i| sigma_prev[i] * row[i], false);
        }
        for pidx in 0..np {
            let row = &cache.gram[(m * np + pidx) * k..(m * np + pidx + 1) * k];
            commit(&mut f_gram[pidx * k..(pidx + 1) * k], &mut |i| sigma_prev[i] * row[i] * dtm, true);
        }
    }

    let sum_of = |f: &[f64], idx: usize| -> f64 { f[idx * k..(idx + 1) * k].iter().sum() };

    let mut n_count = DMatrix::zeros(k, k);
    let mut occupation = DMatrix::zeros(k, k);
    for (pidx, (to, from)) in pairs.iter().enumerate() {
        n_count[(*to, *from)] = sum_of(&f_count, pidx);
        occupation[(*to, *from)] = sum_of(&f_occ, pidx);
    }
    let drift_lin = DVector::from_fn(l, |lidx, _| sum_of(&f_drift, lidx));
    let mut gram = DMatrix::zeros(l, l);
    for a in 0..l {
        for b in a..l {
            let v = sum_of(&f_gram, filter::pair_idx(a, b, l));
            gram[(a, b)] = v;
            gram[(b, a)] = v;
        }
    }
    if floor_events > 0 {
        log::warn!("e-step clamped {floor_events} entries; decrease dt");
    }
    Ok(FilteredStats {
        n_count,
        occupation,
        drift_lin,
        gram,
        theta_ref: theta0.to_vec(),
        log_mass,
        floor_events,
    })
}

/// EM surrogate objective `Q(θ, θ_ref)`: the exponential-family expansion
/// with every complete-data statistic replaced by its filtered value.
pub fn q_function(stats: &FilteredStats, spec: &ModelSpec, theta: &[f64]) -> Result<f64> {
    spec.require_admissible(theta)?;
    Ok(suffstats::family_expansion(spec, stats.into(), theta))
}

/// Exponential-family M-step on filtered statistics.
pub fn m_step(stats: &FilteredStats, spec: &ModelSpec) -> Result<MStepOutcome> {
    suffstats::maximize_expansion(spec, stats.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// Parameter increment fell below tolerance.
    Tol,
    /// Iteration budget exhausted.
    MaxIter,
    /// Recorded likelihood decreased by more than the slack — a
    /// discretization symptom, not a bug in exact arithmetic; rerun with a
    /// smaller dt.
    NonIncrease,
}

/// Slack allowed per EM step before a likelihood decrease aborts the run.
pub const MONOTONICITY_SLACK: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct EmIterate {
    pub theta: Vec<f64>,
    /// `L^Y(θ_n, θ_init)`, measured as a filter log-mass difference.
    pub loglik: f64,
    pub stats: FilteredStats,
}

#[derive(Debug, Clone)]
pub struct EMTrace {
    pub iterates: Vec<EmIterate>,
    pub converged: bool,
    pub stop_reason: StopReason,
}

impl EMTrace {
    pub fn final_theta(&self) -> &[f64] {
        &self.iterates.last().expect("at least one iterate").theta
    }
}

/// Iterate `θ_{n+1} = m_step(e_step(θ_n))`, recording the partial
/// log-likelihood against the starting parameter (any reference yields the
/// same maximizer). Stops on a small parameter increment, the iteration
/// budget, or a likelihood decrease beyond [`MONOTONICITY_SLACK`].
pub fn em_run(
    observed: &YPath,
    spec: &ModelSpec,
    theta_init: &[f64],
    max_iter: usize,
    tol: f64,
) -> Result<EMTrace> {
    if max_iter == 0 {
        return Err(Error::invalid("max_iter must be at least 1"));
    }
    if !(tol > 0.0) {
        return Err(Error::invalid("tol must be positive"));
    }
    spec.require_admissible(theta_init)?;
    let cache = PathCache::build(observed, spec)?;

    let mut iterates: Vec<EmIterate> = Vec::new();
    let mut theta = theta_init.to_vec();
    let mut ll_ref = 0.0;
    let mut converged = false;
    let mut stop_reason = StopReason::MaxIter;

    for n in 0..max_iter {
        let stats = e_step_cached(&cache, spec, &theta)?;
        if n == 0 {
            ll_ref = stats.log_mass;
        }
        let loglik = stats.log_mass - ll_ref;
        if let Some(prev) = iterates.last() {
            if loglik < prev.loglik - MONOTONICITY_SLACK {
                log::warn!(
                    "EM likelihood decreased from {} to {loglik}; stopping (decrease signals discretization trouble)",
                    prev.loglik
                );
                iterates.push(EmIterate { theta: theta.clone(), loglik, stats });
                stop_reason = StopReason::NonIncrease;
                return Ok(EMTrace { iterates, converged: false, stop_reason });
            }
        }
        let next = m_step(&stats, spec)?;
        iterates.push(EmIterate { theta: theta.clone(), loglik, stats });
        let delta = next
            .theta
            .iter()
            .zip(&theta)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if delta < tol {
            converged = true;
            stop_reason = StopReason::Tol;
            break;
        }
        theta = next.theta;
    }

    Ok(EMTrace { iterates, converged, stop_reason })
}
