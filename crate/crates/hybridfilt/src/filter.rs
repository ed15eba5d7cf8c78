//! Finite-dimensional filtering along an observed continuous path.
//!
//! The unnormalized filter vector `σ_t = E^0_t[Λ_t X_t]` solves the linear
//! recursion
//!
//! ```text
//! dσ = ε^{-2} diag(σ) C(Y)^T dY + Q(Y) σ dt
//! ```
//!
//! and its total mass `⟨1, σ_t⟩ = E^0_t[Λ_t]` is the Bayes normalizer. The
//! recursion is integrated in a rescaled representation: after every step the
//! vector is renormalized to unit sum and the log of the sum is accumulated
//! separately, which keeps arbitrarily long runs inside the floating-point
//! range. Entries driven negative by a coarse step are clamped to a tiny
//! positivity floor and the event is counted; a nonzero count is the signal
//! to lower `dt`.
//!
//! Two schemes are provided. `Euler` integrates the recursion exactly as
//! printed (Itô form, no correction terms). `GaussianUpdate` replaces the
//! observation factor by the per-step exact Gaussian emission ratio
//! `exp(ε^{-2}⟨μ_i, ΔY⟩ − ε^{-2}|μ_i|²Δt/2)`; it is the construction the
//! discrete-HMM reference in [`crate::oracle`] uses, and keeping both in-tree
//! makes the convergence cross-checks self-contained.

use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::path::{fmt_f64, YPath};

/// Positivity floor for rescaled filter entries.
pub const POSITIVITY_FLOOR: f64 = 1e-300;

/// Integration scheme for the filter recursions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FilterScheme {
    /// Itô-form Euler discretization, exactly as the recursion is written.
    #[default]
    Euler,
    /// Per-step exact Gaussian observation update (discrete-HMM step).
    GaussianUpdate,
}

/// Per-step path data that does not depend on θ. The exponential-family
/// structure (`q^θ = φ(θ) q0`, `μ^θ = Σ_l ψ_l(θ) μ^l`) makes this cache exact
/// for every parameter value, so estimator loops evaluate the fields once and
/// then sweep θ for free.
pub(crate) struct PathCache {
    pub n_steps: usize,
    pub k: usize,
    pub l: usize,
    pub d: usize,
    /// Step widths, `n_steps`.
    pub dt: Vec<f64>,
    /// Raw increments, `n_steps × d`.
    pub dy: Vec<f64>,
    /// Base rates at left endpoints, `n_steps × k × k`, `[to*k + from]`.
    pub q0: Vec<f64>,
    /// Basis drift values at left endpoints, `n_steps × l × k × d`.
    pub basis: Vec<f64>,
    /// `⟨μ^l(e_i, Y_m), ΔY_m⟩`, `n_steps × l × k`.
    pub bdy: Vec<f64>,
    /// `⟨μ^a(e_i, Y_m), μ^b(e_i, Y_m)⟩` for pairs `a ≤ b`, `n_steps × npairs × k`.
    pub gram: Vec<f64>,
}

/// Index of the unordered pair `(a, b)`, `a ≤ b`, among `l` basis fields.
#[inline]
pub(crate) fn pair_idx(a: usize, b: usize, l: usize) -> usize {
    debug_assert!(a <= b && b < l);
    a * l - a * (a + 1) / 2 + b
}

pub(crate) fn n_pairs(l: usize) -> usize {
    l * (l + 1) / 2
}

impl PathCache {
    pub fn build(observed: &YPath, spec: &ModelSpec) -> Result<PathCache> {
        observed.validate()?;
        if observed.y_dim != spec.dims.y_dim {
            return Err(Error::invalid("observed path dimension differs from the model"));
        }
        let n_steps = observed.len() - 1;
        let k = spec.dims.n_states;
        let l = spec.dims.n_basis;
        let d = spec.dims.y_dim;
        let np = n_pairs(l);

        let mut cache = PathCache {
            n_steps,
            k,
            l,
            d,
            dt: Vec::with_capacity(n_steps),
            dy: Vec::with_capacity(n_steps * d),
            q0: vec![0.0; n_steps * k * k],
            basis: vec![0.0; n_steps * l * k * d],
            bdy: vec![0.0; n_steps * l * k],
            gram: vec![0.0; n_steps * np * k],
        };

        for m in 0..n_steps {
            let y = observed.y_at(m);
            let y_next = observed.y_at(m + 1);
            let step = observed.times[m + 1] - observed.times[m];
            cache.dt.push(step);
            for r in 0..d {
                cache.dy.push(y_next[r] - y[r]);
            }
            let q_base = m * k * k;
            for from in 0..k {
                for to in 0..k {
                    if to == from {
                        continue;
                    }
                    let r = spec.family.base_rates.rate(from, to, y);
                    if !r.is_finite() || r < 0.0 {
                        return Err(Error::ModelEval {
                            from,
                            to,
                            y: y.to_vec(),
                            what: format!("base rate = {r}"),
                        });
                    }
                    cache.q0[q_base + to * k + from] = r;
                }
            }
            for (lidx, field) in spec.family.drift_basis.iter().enumerate() {
                for i in 0..k {
                    let off = ((m * l + lidx) * k + i) * d;
                    field.drift_into(i, y, &mut cache.basis[off..off + d]);
                    let mut dot = 0.0;
                    for r in 0..d {
                        let v = cache.basis[off + r];
                        if !v.is_finite() {
                            return Err(Error::ModelEval {
                                from: i,
                                to: lidx,
                                y: y.to_vec(),
                                what: "non-finite drift basis value".into(),
                            });
                        }
                        dot += v * cache.dy[m * d + r];
                    }
                    cache.bdy[(m * l + lidx) * k + i] = dot;
                }
            }
            for a in 0..l {
                for b in a..l {
                    let p = pair_idx(a, b, l);
                    for i in 0..k {
                        let off_a = ((m * l + a) * k + i) * d;
                        let off_b = ((m * l + b) * k + i) * d;
                        let mut g = 0.0;
                        for r in 0..d {
                            g += cache.basis[off_a + r] * cache.basis[off_b + r];
                        }
                        cache.gram[(m * np + p) * k + i] = g;
                    }
                }
            }
        }
        Ok(cache)
    }

    /// `⟨C^θ(Y_m) e_i, ΔY_m⟩` for every state, given ψ(θ).
    #[inline]
    pub fn obs_dot(&self, m: usize, psi: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for lidx in 0..self.l {
            let w = psi[lidx];
            let row = &self.bdy[(m * self.l + lidx) * self.k..(m * self.l + lidx + 1) * self.k];
            for i in 0..self.k {
                out[i] += w * row[i];
            }
        }
    }

    /// `|μ^θ(e_i, Y_m)|²` for every state, given ψ(θ).
    #[inline]
    pub fn drift_sq(&self, m: usize, psi: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let np = n_pairs(self.l);
        for a in 0..self.l {
            for b in a..self.l {
                let w = if a == b { psi[a] * psi[b] } else { 2.0 * psi[a] * psi[b] };
                let row = &self.gram[(m * np + pair_idx(a, b, self.l)) * self.k..];
                for i in 0..self.k {
                    out[i] += w * row[i];
                }
            }
        }
    }

    /// Apply the generator term: `acc += dt · Q^θ(Y_m) v`, with the diagonal
    /// derived from the off-diagonal column sums.
    #[inline]
    pub fn add_q_action(&self, m: usize, phi: &[f64], dtm: f64, v: &[f64], acc: &mut [f64]) {
        let k = self.k;
        let q_base = m * k * k;
        for from in 0..k {
            let vf = v[from];
            if vf == 0.0 {
                continue;
            }
            let mut exit = 0.0;
            for to in 0..k {
                if to == from {
                    continue;
                }
                let rate = phi[to * k + from] * self.q0[q_base + to * k + from];
                exit += rate;
                acc[to] += dtm * rate * vf;
            }
            acc[from] -= dtm * exit * vf;
        }
    }
}

/// Time-indexed rescaled filter: unit-sum direction `sigma_hat` per grid
/// point plus the accumulated `log_mass`, so that
/// `exp(log_mass[m]) · sigma_hat[m]` reconstructs the unnormalized filter.
#[derive(Debug, Clone)]
pub struct FilterTrajectory {
    pub times: Vec<f64>,
    /// Flat `n × k`, unit sum per grid point.
    pub sigma_hat: Vec<f64>,
    pub log_mass: Vec<f64>,
    pub theta: Vec<f64>,
    pub n_states: usize,
    /// Number of positivity-floor clampings; nonzero means `dt` is too coarse.
    pub floor_events: u64,
    pub scheme: FilterScheme,
}

impl FilterTrajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    #[inline]
    pub fn probs_at(&self, idx: usize) -> &[f64] {
        &self.sigma_hat[idx * self.n_states..(idx + 1) * self.n_states]
    }

    pub fn terminal_probs(&self) -> &[f64] {
        self.probs_at(self.len() - 1)
    }

    /// Index of the grid point nearest to `tau`.
    pub fn nearest_index(&self, tau: f64) -> usize {
        let mut best = 0;
        let mut dist = f64::INFINITY;
        for (m, t) in self.times.iter().enumerate() {
            let d = (t - tau).abs();
            if d < dist {
                dist = d;
                best = m;
            }
        }
        best
    }

    /// Write the trajectory as CSV with header `t,log_mass,p_1..p_k`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut w = BufWriter::new(file);
        let mut render = || -> std::io::Result<()> {
            write!(w, "t,log_mass")?;
            for i in 1..=self.n_states {
                write!(w, ",p_{i}")?;
            }
            writeln!(w)?;
            for m in 0..self.len() {
                write!(w, "{},{}", fmt_f64(self.times[m]), fmt_f64(self.log_mass[m]))?;
                for v in self.probs_at(m) {
                    write!(w, ",{}", fmt_f64(*v))?;
                }
                writeln!(w)?;
            }
            w.flush()
        };
        render().map_err(|e| Error::Io { path: path.display().to_string(), source: e })
    }
}

pub(crate) struct FilterParams {
    pub phi: Vec<f64>,
    pub psi: Vec<f64>,
    pub inv_eps2: f64,
}

impl FilterParams {
    pub fn new(spec: &ModelSpec, theta: &[f64]) -> Result<FilterParams> {
        spec.require_admissible(theta)?;
        Ok(FilterParams {
            phi: spec.phi_table(theta)?,
            psi: spec.psi(theta),
            inv_eps2: 1.0 / (spec.epsilon * spec.epsilon),
        })
    }
}

/// One filter step in the rescaled representation. `sigma` enters unit-sum
/// and leaves unit-sum; the returned value is the raw mass factor of the
/// step (the caller accumulates its log). Augmented recursions divide by the
/// same factor so shared rescaling is exact.
#[inline]
pub(crate) fn sigma_step(
    cache: &PathCache,
    m: usize,
    params: &FilterParams,
    scheme: FilterScheme,
    sigma: &mut [f64],
    work: &mut StepWork,
    floor_events: &mut u64,
) -> f64 {
    let k = cache.k;
    let dtm = cache.dt[m];
    cache.obs_dot(m, &params.psi, &mut work.cdy);
    match scheme {
        FilterScheme::Euler => {
            for i in 0..k {
                work.next[i] = sigma[i] * (1.0 + params.inv_eps2 * work.cdy[i]);
            }
            cache.add_q_action(m, &params.phi, dtm, sigma, &mut work.next);
        }
        FilterScheme::GaussianUpdate => {
            cache.drift_sq(m, &params.psi, &mut work.m2);
            for i in 0..k {
                let g = params.inv_eps2 * work.cdy[i] - 0.5 * params.inv_eps2 * work.m2[i] * dtm;
                work.weighted[i] = sigma[i] * g.exp();
            }
            work.next.copy_from_slice(&work.weighted);
            cache.add_q_action(m, &params.phi, dtm, &work.weighted, &mut work.next);
        }
    }
    let mut mass = 0.0;
    for i in 0..k {
        if work.next[i] < POSITIVITY_FLOOR {
            work.next[i] = POSITIVITY_FLOOR;
            *floor_events += 1;
        }
        mass += work.next[i];
    }
    for i in 0..k {
        sigma[i] = work.next[i] / mass;
    }
    mass
}

pub(crate) struct StepWork {
    pub cdy: Vec<f64>,
    pub m2: Vec<f64>,
    pub next: Vec<f64>,
    pub weighted: Vec<f64>,
}

impl StepWork {
    pub fn new(k: usize) -> StepWork {
        StepWork {
            cdy: vec![0.0; k],
            m2: vec![0.0; k],
            next: vec![0.0; k],
            weighted: vec![0.0; k],
        }
    }
}

pub(crate) fn run_filter_cached(
    cache: &PathCache,
    times: &[f64],
    spec: &ModelSpec,
    theta: &[f64],
    init: &[f64],
    scheme: FilterScheme,
) -> Result<FilterTrajectory> {
    let params = FilterParams::new(spec, theta)?;
    let k = cache.k;
    if init.len() != k || init.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::invalid("filter initial vector must be nonnegative"));
    }
    let init_mass: f64 = init.iter().sum();
    if !(init_mass > 0.0) {
        return Err(Error::invalid("filter initial vector must have positive mass"));
    }

    let n = cache.n_steps + 1;
    let mut traj = FilterTrajectory {
        times: times.to_vec(),
        sigma_hat: Vec::with_capacity(n * k),
        log_mass: Vec::with_capacity(n),
        theta: theta.to_vec(),
        n_states: k,
        floor_events: 0,
        scheme,
    };
    let mut sigma: Vec<f64> = init.iter().map(|v| v / init_mass).collect();
    let mut log_mass = init_mass.ln();
    traj.sigma_hat.extend_from_slice(&sigma);
    traj.log_mass.push(log_mass);

    let mut work = StepWork::new(k);
    for m in 0..cache.n_steps {
        log_mass += sigma_step(cache, m, &params, scheme, &mut sigma, &mut work, &mut traj.floor_events).ln();
        traj.sigma_hat.extend_from_slice(&sigma);
        traj.log_mass.push(log_mass);
    }
    if traj.floor_events > 0 {
        log::warn!(
            "filter clamped {} entries to the positivity floor; decrease dt",
            traj.floor_events
        );
    }
    Ok(traj)
}

/// Run the filter recursion along `observed` at parameter `theta` with the
/// default Euler scheme.
pub fn run_filter(observed: &YPath, spec: &ModelSpec, theta: &[f64]) -> Result<FilterTrajectory> {
    run_filter_scheme(observed, spec, theta, FilterScheme::Euler)
}

pub fn run_filter_scheme(
    observed: &YPath,
    spec: &ModelSpec,
    theta: &[f64],
    scheme: FilterScheme,
) -> Result<FilterTrajectory> {
    let cache = PathCache::build(observed, spec)?;
    run_filter_cached(&cache, &observed.times, spec, theta, &spec.init_dist, scheme)
}

/// Terminal log normalizer `log E^0_T[Λ_T]`.
pub fn log_total_mass(traj: &FilterTrajectory) -> f64 {
    *traj.log_mass.last().expect("nonempty trajectory")
}

/// Lean variant for optimizer loops: terminal log mass only, no trajectory
/// storage.
pub(crate) fn log_mass_cached(
    cache: &PathCache,
    spec: &ModelSpec,
    theta: &[f64],
    scheme: FilterScheme,
) -> Result<f64> {
    let params = FilterParams::new(spec, theta)?;
    let k = cache.k;
    let mut sigma = spec.init_dist.clone();
    let mut log_mass = 0.0;
    let mut work = StepWork::new(k);
    let mut floor_events = 0u64;
    for m in 0..cache.n_steps {
        log_mass += sigma_step(cache, m, &params, scheme, &mut sigma, &mut work, &mut floor_events).ln();
    }
    Ok(log_mass)
}

/// Run the vector recursion and, alongside it, the scalar mass recursion of
/// the normalizer driven by the same filter direction. The two log masses
/// agree up to float roundoff because the generator's columns sum to zero.
pub fn mass_consistency(observed: &YPath, spec: &ModelSpec, theta: &[f64]) -> Result<(f64, f64)> {
    let cache = PathCache::build(observed, spec)?;
    let params = FilterParams::new(spec, theta)?;
    let k = cache.k;
    let mut sigma = spec.init_dist.clone();
    let mut work = StepWork::new(k);
    let mut floor_events = 0u64;
    let mut vec_mass = 0.0;
    let mut scalar_mass = 0.0;
    for m in 0..cache.n_steps {
        cache.obs_dot(m, &params.psi, &mut work.cdy);
        let mut incr = 0.0;
        for i in 0..k {
            incr += sigma[i] * work.cdy[i];
        }
        scalar_mass += (1.0 + params.inv_eps2 * incr).ln();
        vec_mass += sigma_step(&cache, m, &params, FilterScheme::Euler, &mut sigma, &mut work, &mut floor_events).ln();
    }
    Ok((vec_mass, scalar_mass))
}

/// Conditional law of the hidden state at `tau` given the whole record.
#[derive(Debug, Clone)]
pub struct SmootherResult {
    /// Query time after snapping to the nearest grid point.
    pub tau: f64,
    pub probs: Vec<f64>,
}

/// Solve the smoothing recursion: initialize with the filter at `tau` and
/// propagate `dG_i = ε^{-2} G_i ⟨C(Y_t) e_i, dY_t⟩` over `(tau, T]` — no
/// generator term — then normalize by the total mass, which equals the Bayes
/// normalizer. Off-grid `tau` is snapped to the nearest grid point.
pub fn run_smoother(
    observed: &YPath,
    spec: &ModelSpec,
    theta: &[f64],
    tau: f64,
) -> Result<SmootherResult> {
    let cache = PathCache::build(observed, spec)?;
    let traj = run_filter_cached(&cache, &observed.times, spec, theta, &spec.init_dist, FilterScheme::Euler)?;
    smoother_from(&cache, &traj, spec, theta, tau)
}

pub(crate) fn smoother_from(
    cache: &PathCache,
    traj: &FilterTrajectory,
    spec: &ModelSpec,
    theta: &[f64],
    tau: f64,
) -> Result<SmootherResult> {
    let horizon = *traj.times.last().expect("nonempty trajectory");
    if !(0.0..=horizon).contains(&tau) {
        return Err(Error::invalid(format!("tau = {tau} outside [0, {horizon}]")));
    }
    let params = FilterParams::new(spec, theta)?;
    let idx = traj.nearest_index(tau);
    let snapped = traj.times[idx];
    if snapped != tau {
        log::info!("smoother query {tau} snapped to grid point {snapped}");
    }
    let k = cache.k;
    let mut g: Vec<f64> = traj.probs_at(idx).to_vec();
    let mut cdy = vec![0.0; k];
    for m in idx..cache.n_steps {
        cache.obs_dot(m, &params.psi, &mut cdy);
        let mut mass = 0.0;
        for i in 0..k {
            g[i] *= 1.0 + params.inv_eps2 * cdy[i];
            if g[i] < POSITIVITY_FLOOR {
                g[i] = POSITIVITY_FLOOR;
            }
            mass += g[i];
        }
        let inv = 1.0 / mass;
        for v in g.iter_mut() {
            *v *= inv;
        }
    }
    let total: f64 = g.iter().sum();
    for v in g.iter_mut() {
        *v /= total;
    }
    Ok(SmootherResult { tau: snapped, probs: g })
}
