//! Path simulation and complete-data sufficient statistics.
//!
//! The hidden chain is generated by competing exponential clocks: in state
//! `i`, each target `j` owns an Exp(1) variable `E_j` and fires when the
//! accumulated rate integral `∫ q^θ_{ji}(Y_s) ds` crosses it. The integrals
//! are accumulated with the trapezoid rule along the Euler–Maruyama
//! discretization of `Y`; when a clock fires strictly inside a step, the
//! firing time is located by linear interpolation of the accumulated
//! integral, the step is split there, and the jump time is inserted into the
//! grid. All clocks restart after every jump.
//!
//! Between firings, `Y` advances by `Y_{t+h} = Y_t + μ^θ(X_t, Y_t) h + ε √h ξ`.
//! The drift switches from the jump time onward (`X` is right-continuous).
//!
//! Clock randomness and diffusion noise come from separate RNG streams, so a
//! diffusion draw can be replayed against re-seeded switching.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::path::{HybridPath, JumpRecord, YPath};
use crate::rng;

/// Fraction of a step beyond which a located firing time is snapped to the
/// step's endpoint instead of inserting a nearly-duplicate grid point.
const FIRE_AT_END: f64 = 1.0 - 1e-9;

struct Clocks {
    /// Exp(1) thresholds per target state (entry for the current state unused).
    thresholds: Vec<f64>,
    /// Accumulated rate integrals since the last restart.
    accum: Vec<f64>,
}

impl Clocks {
    fn restart(&mut self, k: usize, current: usize, rng: &mut impl Rng) {
        self.thresholds.clear();
        self.accum.clear();
        for j in 0..k {
            // Drawing in ascending target order keeps the stream layout fixed.
            let e: f64 = if j == current { f64::INFINITY } else { rng.sample(Exp1) };
            self.thresholds.push(e);
            self.accum.push(0.0);
        }
    }
}

/// Simulate one path of `(X, Y)` under the parameter `theta`. Deterministic
/// given `(spec, theta, horizon, dt, seed)`.
pub fn simulate_path(
    spec: &ModelSpec,
    theta: &[f64],
    horizon: f64,
    dt: f64,
    seed: u64,
) -> Result<HybridPath> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::invalid("dt must be positive"));
    }
    if !(horizon >= dt) || !horizon.is_finite() {
        return Err(Error::invalid("horizon must be at least dt"));
    }
    spec.require_admissible(theta)?;

    let k = spec.dims.n_states;
    let d = spec.dims.y_dim;
    let phi = spec.phi_table(theta)?;
    let psi = spec.psi(theta);
    let eps = spec.epsilon;

    let mut rng_y = rng::stream(seed, rng::STREAM_DIFFUSION);
    let mut rng_clock = rng::stream(seed, rng::STREAM_CLOCKS);

    // Initial discrete state from the initial law.
    let u: f64 = rng_clock.gen();
    let mut x_cur = k - 1;
    let mut acc = 0.0;
    for (i, p) in spec.init_dist.iter().enumerate() {
        acc += p;
        if u < acc {
            x_cur = i;
            break;
        }
    }

    let est_len = (horizon / dt).ceil() as usize + 2;
    let mut times = Vec::with_capacity(est_len);
    let mut x_idx = Vec::with_capacity(est_len);
    let mut y = Vec::with_capacity(est_len * d);
    let mut jumps = Vec::new();

    let mut t_cur = 0.0;
    let mut y_cur = spec.y0.clone();
    times.push(0.0);
    x_idx.push(x_cur);
    y.extend_from_slice(&y_cur);

    let mut clocks = Clocks { thresholds: Vec::new(), accum: Vec::new() };
    clocks.restart(k, x_cur, &mut rng_clock);

    let mut drift = vec![0.0; d];
    let mut scratch = vec![0.0; d];
    let mut y_next = vec![0.0; d];
    let mut xi = vec![0.0; d];
    let mut rate0 = vec![0.0; k];
    let mut delta = vec![0.0; k];

    let rate = |from: usize, to: usize, yv: &[f64]| phi[to * k + from] * spec.family.base_rates.rate(from, to, yv);

    let mut base = 1u64;
    let mut next_base = dt;
    if next_base >= horizon - dt * 1e-9 {
        next_base = horizon;
    }

    loop {
        let h = next_base - t_cur;
        debug_assert!(h > 0.0);

        for v in xi.iter_mut() {
            *v = rng_y.sample(StandardNormal);
        }
        spec.drift_into(&psi, x_cur, &y_cur, &mut drift, &mut scratch);
        let sq = eps * h.sqrt();
        for r in 0..d {
            y_next[r] = y_cur[r] + drift[r] * h + sq * xi[r];
            if !y_next[r].is_finite() {
                return Err(Error::ModelEval {
                    from: x_cur,
                    to: x_cur,
                    y: y_cur.clone(),
                    what: "non-finite diffusion step".into(),
                });
            }
        }

        // Trapezoid increments of each clock integral across the step.
        for j in 0..k {
            if j == x_cur {
                rate0[j] = 0.0;
                delta[j] = 0.0;
                continue;
            }
            let r0 = rate(x_cur, j, &y_cur);
            let r1 = rate(x_cur, j, &y_next);
            if !r0.is_finite() || !r1.is_finite() || r0 < 0.0 || r1 < 0.0 {
                return Err(Error::ModelEval {
                    from: x_cur,
                    to: j,
                    y: y_cur.clone(),
                    what: format!("rate pair ({r0}, {r1})"),
                });
            }
            rate0[j] = r0;
            delta[j] = 0.5 * h * (r0 + r1);
        }

        // Earliest firing, located by linear interpolation of the integral;
        // float ties break toward the smallest target index.
        let mut fire: Option<(usize, f64)> = None;
        for j in 0..k {
            if j == x_cur || delta[j] <= 0.0 {
                continue;
            }
            let remaining = clocks.thresholds[j] - clocks.accum[j];
            if delta[j] >= remaining {
                let s = (remaining / delta[j]).clamp(1e-12, 1.0);
                if fire.map(|(_, s0)| s < s0).unwrap_or(true) {
                    fire = Some((j, s));
                }
            }
        }

        match fire {
            Some((target, s)) if s < FIRE_AT_END => {
                // Split the step at the interpolated firing time, reusing the
                // step's Gaussian draw for the shortened increment.
                let h1 = s * h;
                let t_jump = t_cur + h1;
                let sq1 = eps * h1.sqrt();
                for r in 0..d {
                    y_cur[r] += drift[r] * h1 + sq1 * xi[r];
                }
                t_cur = t_jump;
                times.push(t_cur);
                jumps.push(JumpRecord { time: t_cur, from: x_cur, to: target });
                x_cur = target;
                x_idx.push(x_cur);
                y.extend_from_slice(&y_cur);
                clocks.restart(k, x_cur, &mut rng_clock);
            }
            fired => {
                // Commit the full step; if a clock fired within float slack
                // of the endpoint, the jump lands on the grid point itself.
                y_cur.copy_from_slice(&y_next);
                t_cur = next_base;
                times.push(t_cur);
                if let Some((target, _)) = fired {
                    jumps.push(JumpRecord { time: t_cur, from: x_cur, to: target });
                    x_cur = target;
                    clocks.restart(k, x_cur, &mut rng_clock);
                } else {
                    for j in 0..k {
                        clocks.accum[j] += delta[j];
                    }
                }
                x_idx.push(x_cur);
                y.extend_from_slice(&y_cur);
                if t_cur >= horizon {
                    break;
                }
                base += 1;
                next_base = base as f64 * dt;
                if next_base >= horizon - dt * 1e-9 {
                    next_base = horizon;
                }
            }
        }
    }

    let path = HybridPath { times, x_idx, y, y_dim: d, jumps, seed, dt };
    path.validate()?;
    Ok(path)
}

/// Simulate independent replicates (one seed each). Replicates are
/// independent tasks; results do not depend on the worker count.
pub fn simulate_batch(
    spec: &ModelSpec,
    theta: &[f64],
    horizon: f64,
    dt: f64,
    seeds: &[u64],
) -> Result<Vec<HybridPath>> {
    seeds
        .par_iter()
        .map(|seed| simulate_path(spec, theta, horizon, dt, *seed))
        .collect()
}

/// Count transitions: entry `(j, i)` is the number of recorded `i → j` jumps.
pub fn extract_counting(path: &HybridPath, n_states: usize) -> DMatrix<u64> {
    let mut counts = DMatrix::zeros(n_states, n_states);
    for jump in &path.jumps {
        counts[(jump.to, jump.from)] += 1;
    }
    counts
}

/// Complete-data sufficient statistics of the exponential family, evaluated
/// at the reference parameter `theta_ref`.
#[derive(Debug, Clone)]
pub struct CompleteStats {
    /// Entry `(j, i)`: transition count `i → j` (integer-valued).
    pub n_count: DMatrix<f64>,
    /// Entry `(j, i)`: `∫ q^θref_{ji}(Y_t) 1{X_t = i} dt`.
    pub occupation: DMatrix<f64>,
    /// Entry `l`: `∫ ⟨μ^l(Z_t), dY_t − μ^θref(Z_t) dt⟩`.
    pub drift_lin: DVector<f64>,
    /// Entry `(l, m)`: `∫ ⟨μ^l(Z_t), μ^m(Z_t)⟩ dt`.
    pub gram: DMatrix<f64>,
    pub theta_ref: Vec<f64>,
}

/// Accumulate the four statistic families along a path with left-endpoint
/// (Itô-consistent) Riemann sums; the `dY` integral weights the raw increment
/// `Y_{t_{m+1}} − Y_{t_m}` by the left-endpoint basis drift.
pub fn complete_stats(path: &HybridPath, spec: &ModelSpec, theta_ref: &[f64]) -> Result<CompleteStats> {
    spec.require_admissible(theta_ref)?;
    let k = spec.dims.n_states;
    let d = spec.dims.y_dim;
    let n_basis = spec.dims.n_basis;
    let phi = spec.phi_table(theta_ref)?;
    let psi = spec.psi(theta_ref);

    let mut occupation = DMatrix::zeros(k, k);
    let mut drift_lin = DVector::zeros(n_basis);
    let mut gram = DMatrix::zeros(n_basis, n_basis);

    let mut basis_vals = vec![0.0; n_basis * d];
    let mut mu_ref = vec![0.0; d];

    for m in 0..path.len() - 1 {
        let step = path.times[m + 1] - path.times[m];
        let x = path.x_idx[m];
        let yv = path.y_at(m);
        let y_next = &path.y[(m + 1) * d..(m + 2) * d];

        for j in 0..k {
            if j == x {
                continue;
            }
            occupation[(j, x)] += phi[j * k + x] * spec.family.base_rates.rate(x, j, yv) * step;
        }

        if n_basis > 0 {
            mu_ref.fill(0.0);
            for (l, field) in spec.family.drift_basis.iter().enumerate() {
                field.drift_into(x, yv, &mut basis_vals[l * d..(l + 1) * d]);
                for r in 0..d {
                    mu_ref[r] += psi[l] * basis_vals[l * d + r];
                }
            }
            for l in 0..n_basis {
                let mut dot = 0.0;
                for r in 0..d {
                    let incr = y_next[r] - yv[r];
                    dot += basis_vals[l * d + r] * (incr - mu_ref[r] * step);
                }
                drift_lin[l] += dot;
                for lm in l..n_basis {
                    let mut g = 0.0;
                    for r in 0..d {
                        g += basis_vals[l * d + r] * basis_vals[lm * d + r];
                    }
                    gram[(l, lm)] += g * step;
                }
            }
        }
    }
    // Mirror the upper triangle so symmetry is bit-exact.
    for l in 0..n_basis {
        for lm in 0..l {
            gram[(l, lm)] = gram[(lm, l)];
        }
    }

    let counts = extract_counting(path, k);
    let n_count = DMatrix::from_fn(k, k, |r, c| counts[(r, c)] as f64);
    Ok(CompleteStats { n_count, occupation, drift_lin, gram, theta_ref: theta_ref.to_vec() })
}

/// Identify the diffusion amplitude from the quadratic variation:
/// `sqrt(Σ_m |ΔY_m|² / (d·T))`.
pub fn estimate_epsilon(observed: &YPath) -> Result<f64> {
    if observed.len() < 2 {
        return Err(Error::invalid("epsilon estimation needs at least two grid points"));
    }
    let horizon = observed.horizon();
    if !(horizon > 0.0) {
        return Err(Error::invalid("degenerate path with zero horizon"));
    }
    let d = observed.y_dim;
    let mut qv = 0.0;
    for m in 0..observed.len() - 1 {
        let a = observed.y_at(m);
        let b = observed.y_at(m + 1);
        for r in 0..d {
            let incr = b[r] - a[r];
            qv += incr * incr;
        }
    }
    Ok((qv / (d as f64 * horizon)).sqrt())
}
