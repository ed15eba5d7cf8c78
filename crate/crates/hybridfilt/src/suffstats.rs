//! Exponential-family machinery shared by the complete-data MLE and the EM
//! M-step.
//!
//! With rates `q^θ_{ji} = φ_{ji}(θ) q0_{ji}` and drift `μ^θ = Σ_l ψ_l(θ) μ^l`,
//! the complete-data log-likelihood ratio against a reference parameter is
//! log-linear in four statistic families: transition counts, occupation
//! integrals, drift/observation inner products, and the drift Gram matrix.
//! The same expansion consumes either the pathwise statistics (complete
//! observation) or their filtered conditional expectations (EM), so the
//! maximizer is written once against a borrowed view.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{LinkEntry, ModelSpec, ParamLink};
use crate::optimize::{self, SimplexOptions};
use crate::simulate::CompleteStats;

/// Borrowed view of one set of sufficient statistics, complete or filtered,
/// together with the parameter they were evaluated at.
#[derive(Clone, Copy)]
pub struct SuffStatsView<'a> {
    /// Entry `(j, i)`: (expected) count of `i → j` transitions.
    pub n_count: &'a DMatrix<f64>,
    /// Entry `(j, i)`: (expected) `∫ q^θref_{ji}(Y) 1{X = i} dt`.
    pub occupation: &'a DMatrix<f64>,
    /// Entry `l`: (expected) `∫ ⟨μ^l, dY − μ^θref dt⟩`.
    pub drift_lin: &'a DVector<f64>,
    /// Entry `(l, m)`: (expected) `∫ ⟨μ^l, μ^m⟩ dt`.
    pub gram: &'a DMatrix<f64>,
    pub theta_ref: &'a [f64],
}

impl<'a> From<&'a CompleteStats> for SuffStatsView<'a> {
    fn from(stats: &'a CompleteStats) -> Self {
        SuffStatsView {
            n_count: &stats.n_count,
            occupation: &stats.occupation,
            drift_lin: &stats.drift_lin,
            gram: &stats.gram,
            theta_ref: &stats.theta_ref,
        }
    }
}

/// The log-likelihood-ratio expansion `L(θ, θ_ref)` assembled from the
/// statistics. Pairs with neither counts nor occupation weight are skipped,
/// which implements the `0/0 = 1` convention for rates that vanish
/// identically along the path.
pub fn family_expansion(spec: &ModelSpec, view: SuffStatsView<'_>, theta: &[f64]) -> f64 {
    let k = spec.dims.n_states;
    let inv_eps2 = 1.0 / (spec.epsilon * spec.epsilon);
    let mut total = 0.0;
    for from in 0..k {
        for to in 0..k {
            if to == from {
                continue;
            }
            let n = view.n_count[(to, from)];
            let occ = view.occupation[(to, from)];
            if n == 0.0 && occ == 0.0 {
                continue;
            }
            let ratio = spec.phi(theta, from, to) / spec.phi(view.theta_ref, from, to);
            if ratio < 0.0 {
                return f64::NEG_INFINITY;
            }
            total += n * ratio.ln() - (ratio - 1.0) * occ;
        }
    }
    let l = spec.dims.n_basis;
    if l > 0 {
        let psi = spec.psi(theta);
        let psi_ref = spec.psi(view.theta_ref);
        let delta: Vec<f64> = psi.iter().zip(&psi_ref).map(|(a, b)| a - b).collect();
        let mut linear = 0.0;
        let mut quad = 0.0;
        for a in 0..l {
            linear += delta[a] * view.drift_lin[a];
            for b in 0..l {
                quad += delta[a] * delta[b] * view.gram[(a, b)];
            }
        }
        total += inv_eps2 * linear - 0.5 * inv_eps2 * quad;
    }
    total
}

/// Result of maximizing the expansion: the estimate (projected into the box)
/// and a flag raised when the drift normal equations were rank-deficient and
/// a minimum-norm solution was substituted.
#[derive(Debug, Clone)]
pub struct MStepOutcome {
    pub theta: Vec<f64>,
    pub gram_rank_deficient: bool,
}

/// Maximize `θ ↦ family_expansion(θ, θ_ref)` over the admissible box.
/// Canonical links use the closed form: rate coordinates are count-to-
/// occupation ratios, drift coordinates solve the symmetric normal equations
/// `gram · (ψ̂ − ψ_ref) = drift_lin`. Other links fall back to the simplex
/// maximizer.
pub fn maximize_expansion(spec: &ModelSpec, view: SuffStatsView<'_>) -> Result<MStepOutcome> {
    match &spec.family.link {
        ParamLink::Canonical(_) => canonical_mstep(spec, view),
        ParamLink::Custom(_) => numeric_mstep(spec, view),
    }
}

fn canonical_mstep(spec: &ModelSpec, view: SuffStatsView<'_>) -> Result<MStepOutcome> {
    let link = match &spec.family.link {
        ParamLink::Canonical(link) => link,
        ParamLink::Custom(_) => unreachable!("caller dispatches on link kind"),
    };
    let k = spec.dims.n_states;
    let p = spec.dims.n_params;
    let mut theta = view.theta_ref.to_vec();

    // Rate coordinates: pool the statistics of every pair tied to the same
    // coordinate; the stationarity condition is φ̂ = φ_ref · ΣN / ΣOcc.
    let mut pooled_n = vec![0.0; p];
    let mut pooled_occ = vec![0.0; p];
    let mut is_rate = vec![false; p];
    for from in 0..k {
        for to in 0..k {
            if to == from {
                continue;
            }
            if let LinkEntry::Coord(c) = link.phi[to][from] {
                is_rate[c] = true;
                pooled_n[c] += view.n_count[(to, from)];
                pooled_occ[c] += view.occupation[(to, from)];
            }
        }
    }
    for c in 0..p {
        if !is_rate[c] {
            continue;
        }
        if pooled_occ[c] > 0.0 {
            theta[c] = view.theta_ref[c] * pooled_n[c] / pooled_occ[c];
        } else if pooled_n[c] > 0.0 {
            return Err(Error::SingularStats(format!(
                "coordinate {c}: {} transitions observed with zero occupation weight",
                pooled_n[c]
            )));
        }
        // No counts and no occupation: the data are silent, keep the
        // reference value.
    }

    // Drift coordinates: solve the normal equations restricted to the free
    // coordinates (fixed ψ entries drop out of the difference).
    let mut free: Vec<usize> = link
        .psi
        .iter()
        .filter_map(|e| match e {
            LinkEntry::Coord(c) => Some(*c),
            LinkEntry::Fixed(_) => None,
        })
        .collect();
    free.sort_unstable();
    free.dedup();
    let mut rank_deficient = false;
    if !free.is_empty() {
        let l = spec.dims.n_basis;
        let nf = free.len();
        let mut selection = DMatrix::zeros(l, nf);
        for (lidx, entry) in link.psi.iter().enumerate() {
            if let LinkEntry::Coord(c) = entry {
                let col = free.binary_search(c).expect("coordinate collected above");
                selection[(lidx, col)] = 1.0;
            }
        }
        let m = selection.transpose() * view.gram * &selection;
        let rhs = selection.transpose() * view.drift_lin;
        let svd = m.svd(true, true);
        let max_sv = svd.singular_values.iter().cloned().fold(0.0, f64::max);
        let tol = 1e-10 * max_sv.max(1e-300);
        let rank = svd.singular_values.iter().filter(|s| **s > tol).count();
        if rank < nf {
            rank_deficient = true;
            log::warn!("drift normal equations rank {rank} < {nf}; returning the minimum-norm solution");
        }
        let delta = svd
            .solve(&rhs, tol)
            .map_err(|e| Error::SingularStats(format!("drift normal equations: {e}")))?;
        for (col, c) in free.iter().enumerate() {
            theta[*c] = view.theta_ref[*c] + delta[col];
        }
    }

    Ok(MStepOutcome { theta: spec.param_box.project(&theta), gram_rank_deficient: rank_deficient })
}

fn numeric_mstep(spec: &ModelSpec, view: SuffStatsView<'_>) -> Result<MStepOutcome> {
    let result = optimize::maximize(
        |theta| family_expansion(spec, view, theta),
        &spec.param_box,
        view.theta_ref,
        &SimplexOptions::default(),
    )?;
    Ok(MStepOutcome { theta: result.x, gram_rank_deficient: false })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        CanonicalLink, CustomLink, DriftField, ExponentialFamily, ModelDims, ModelSpec, ParamBox,
        RateField,
    };
    use std::sync::Arc;

    fn canonical_spec() -> ModelSpec {
        let rates = RateField::new(1.0, |_, _, _y: &[f64]| 1.0);
        let drift = DriftField::new(1.0, |state, _y: &[f64], out: &mut [f64]| {
            out[0] = if state == 0 { 1.0 } else { -1.0 };
        });
        ModelSpec::new(
            ModelDims { n_states: 2, y_dim: 1, n_basis: 1, n_params: 3 },
            ExponentialFamily {
                base_rates: rates,
                drift_basis: vec![drift],
                link: ParamLink::Canonical(CanonicalLink {
                    phi: vec![
                        vec![LinkEntry::Fixed(1.0), LinkEntry::Coord(1)],
                        vec![LinkEntry::Coord(0), LinkEntry::Fixed(1.0)],
                    ],
                    psi: vec![LinkEntry::Coord(2)],
                }),
            },
            1.0,
            vec![0.5, 0.5],
            vec![0.0],
            ParamBox::new(vec![0.01, 0.01, -5.0], vec![50.0, 50.0, 5.0]).unwrap(),
        )
        .unwrap()
    }

    fn stats(n21: f64, occ21: f64, b: f64, g: f64, theta_ref: Vec<f64>) -> CompleteStats {
        let mut n_count = DMatrix::zeros(2, 2);
        n_count[(1, 0)] = n21;
        n_count[(0, 1)] = 3.0;
        let mut occupation = DMatrix::zeros(2, 2);
        occupation[(1, 0)] = occ21;
        occupation[(0, 1)] = 3.0;
        CompleteStats {
            n_count,
            occupation,
            drift_lin: DVector::from_vec(vec![b]),
            gram: DMatrix::from_element(1, 1, g),
            theta_ref,
        }
    }

    #[test]
    fn rate_ratio_closed_form() {
        let spec = canonical_spec();
        let s = stats(20.0, 10.0, 0.0, 1.0, vec![1.0, 1.0, 0.0]);
        let out = maximize_expansion(&spec, (&s).into()).unwrap();
        assert_eq!(out.theta[0], 2.0);
        assert_eq!(out.theta[1], 1.0);
        assert!(!out.gram_rank_deficient);
    }

    #[test]
    fn scalar_normal_equation() {
        let spec = canonical_spec();
        let (t_g, b) = (4.0, 1.2);
        let s = stats(1.0, 1.0, b, t_g, vec![1.0, 1.0, 0.0]);
        let out = maximize_expansion(&spec, (&s).into()).unwrap();
        assert!((out.theta[2] - b / t_g).abs() < 1e-14);
    }

    #[test]
    fn expansion_vanishes_at_reference() {
        let spec = canonical_spec();
        let s = stats(5.0, 4.0, 0.7, 2.0, vec![1.3, 0.8, 0.4]);
        let v = family_expansion(&spec, (&s).into(), &[1.3, 0.8, 0.4]);
        assert_eq!(v, 0.0);
    }

    #[test]
    fn expansion_gradient_vanishes_at_closed_form_maximizer() {
        let spec = canonical_spec();
        let s = stats(17.0, 6.0, -0.9, 3.5, vec![1.0, 1.0, 0.2]);
        let out = maximize_expansion(&spec, (&s).into()).unwrap();
        let h = 1e-5;
        for c in 0..3 {
            let mut up = out.theta.clone();
            let mut dn = out.theta.clone();
            up[c] += h;
            dn[c] -= h;
            let grad = (family_expansion(&spec, (&s).into(), &up)
                - family_expansion(&spec, (&s).into(), &dn))
                / (2.0 * h);
            assert!(grad.abs() < 1e-6, "coordinate {c}: gradient {grad}");
        }
    }

    #[test]
    fn occupation_zero_with_counts_is_singular() {
        let spec = canonical_spec();
        let s = stats(4.0, 0.0, 0.0, 1.0, vec![1.0, 1.0, 0.0]);
        assert!(matches!(
            maximize_expansion(&spec, (&s).into()),
            Err(Error::SingularStats(_))
        ));
    }

    #[test]
    fn silent_coordinate_keeps_reference_value() {
        let spec = canonical_spec();
        let mut s = stats(0.0, 0.0, 0.0, 1.0, vec![1.7, 1.0, 0.0]);
        s.n_count[(0, 1)] = 0.0;
        s.occupation[(0, 1)] = 0.0;
        let out = maximize_expansion(&spec, (&s).into()).unwrap();
        assert_eq!(out.theta[0], 1.7);
        assert_eq!(out.theta[1], 1.0);
    }

    #[test]
    fn rank_deficient_gram_is_flagged() {
        // Two identical basis fields make the Gram matrix singular.
        let drift = DriftField::new(1.0, |_, _y: &[f64], out: &mut [f64]| out[0] = 1.0);
        let spec = ModelSpec::new(
            ModelDims { n_states: 1, y_dim: 1, n_basis: 2, n_params: 2 },
            ExponentialFamily {
                base_rates: RateField::new(0.0, |_, _, _| 0.0),
                drift_basis: vec![drift.clone(), drift],
                link: ParamLink::Canonical(CanonicalLink {
                    phi: vec![vec![LinkEntry::Fixed(1.0)]],
                    psi: vec![LinkEntry::Coord(0), LinkEntry::Coord(1)],
                }),
            },
            1.0,
            vec![1.0],
            vec![0.0],
            ParamBox::new(vec![-5.0, -5.0], vec![5.0, 5.0]).unwrap(),
        )
        .unwrap();
        let stats = CompleteStats {
            n_count: DMatrix::zeros(1, 1),
            occupation: DMatrix::zeros(1, 1),
            drift_lin: DVector::from_vec(vec![2.0, 2.0]),
            gram: DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]),
            theta_ref: vec![0.0, 0.0],
        };
        let out = maximize_expansion(&spec, (&stats).into()).unwrap();
        assert!(out.gram_rank_deficient);
        // Minimum-norm split of the total coefficient 2.0.
        assert!((out.theta[0] - 1.0).abs() < 1e-10);
        assert!((out.theta[1] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn numeric_fallback_matches_grid_argmax() {
        // Non-canonical link φ_{21}(θ) = exp(θ_0): the numeric fallback must
        // land within one cell of a 201-point grid over the box.
        let rates = RateField::new(1.0, |_, _, _y: &[f64]| 1.0);
        let spec = ModelSpec::new(
            ModelDims { n_states: 2, y_dim: 1, n_basis: 0, n_params: 1 },
            ExponentialFamily {
                base_rates: rates,
                drift_basis: vec![],
                link: ParamLink::Custom(CustomLink {
                    phi: Arc::new(|theta: &[f64], to, from| {
                        if to == 1 && from == 0 {
                            theta[0].exp()
                        } else {
                            1.0
                        }
                    }),
                    psi: Arc::new(|_, _| 0.0),
                }),
            },
            1.0,
            vec![0.5, 0.5],
            vec![0.0],
            ParamBox::new(vec![-2.0], vec![2.0]).unwrap(),
        )
        .unwrap();
        let mut n_count = DMatrix::zeros(2, 2);
        n_count[(1, 0)] = 12.0;
        n_count[(0, 1)] = 11.0;
        let mut occupation = DMatrix::zeros(2, 2);
        occupation[(1, 0)] = 6.0;
        occupation[(0, 1)] = 7.0;
        let stats = CompleteStats {
            n_count,
            occupation,
            drift_lin: DVector::zeros(0),
            gram: DMatrix::zeros(0, 0),
            theta_ref: vec![0.0],
        };
        let out = maximize_expansion(&spec, (&stats).into()).unwrap();
        let view: SuffStatsView<'_> = (&stats).into();
        let mut best = (f64::NEG_INFINITY, 0.0);
        for i in 0..=200 {
            let t = -2.0 + 4.0 * i as f64 / 200.0;
            let v = family_expansion(&spec, view, &[t]);
            if v > best.0 {
                best = (v, t);
            }
        }
        assert!(
            (out.theta[0] - best.1).abs() <= 4.0 / 200.0,
            "numeric {} vs grid {}",
            out.theta[0],
            best.1
        );
        // Analytic argmax: exp(θ) = N/occ → θ = ln(2).
        assert!((out.theta[0] - (2.0f64).ln()).abs() < 1e-3);
    }
}
