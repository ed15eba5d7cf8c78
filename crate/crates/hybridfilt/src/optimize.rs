//! Box-constrained derivative-free maximization (Nelder–Mead simplex).
//!
//! Every candidate vertex is projected coordinatewise into the admissible
//! box before evaluation, so the objective is never probed outside it.
//! Deterministic given the options; restarts jitter the starting point with
//! a seeded stream and the best final value wins, ties going to the earliest
//! restart.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::ParamBox;
use crate::rng;

const ALPHA: f64 = 1.0; // reflection
const GAMMA: f64 = 2.0; // expansion
const RHO: f64 = 0.5; // contraction
const SHRINK: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct SimplexOptions {
    /// Stop when the objective spread over the simplex falls below this.
    pub tol: f64,
    /// Iteration budget per restart.
    pub max_iter: usize,
    /// Additional jittered restarts around the starting point.
    pub restarts: u32,
    pub seed: u64,
    /// Initial vertex displacement as a fraction of the box width.
    pub init_step: f64,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        SimplexOptions { tol: 1e-8, max_iter: 500, restarts: 3, seed: 0x5eed, init_step: 0.05 }
    }
}

/// A visited point on the accepted-improvement trace.
#[derive(Debug, Clone)]
pub struct TracePoint {
    pub x: Vec<f64>,
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct SimplexResult {
    pub x: Vec<f64>,
    pub value: f64,
    /// Total iterations across restarts.
    pub iterations: usize,
    pub converged: bool,
    /// Points at which the best objective so far improved, in order.
    pub trace: Vec<TracePoint>,
}

struct Vertex {
    x: Vec<f64>,
    value: f64,
}

/// Maximize `f` over the box starting from `x0`.
pub fn maximize<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    bounds: &ParamBox,
    x0: &[f64],
    opts: &SimplexOptions,
) -> Result<SimplexResult> {
    let p = bounds.dim();
    if x0.len() != p {
        return Err(Error::invalid("starting point dimension differs from the box"));
    }
    if bounds.lower.iter().zip(&bounds.upper).any(|(l, u)| !l.is_finite() || !u.is_finite()) {
        return Err(Error::invalid("simplex optimization needs a finite box"));
    }
    let start = bounds.project(x0);

    let mut eval = |x: &[f64]| -> f64 {
        let v = f(x);
        if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            v
        }
    };

    let mut best: Option<SimplexResult> = None;
    let mut trace: Vec<TracePoint> = Vec::new();
    let mut global_best = f64::NEG_INFINITY;
    let mut total_iterations = 0usize;

    for restart in 0..=opts.restarts {
        let origin = if restart == 0 {
            start.clone()
        } else {
            let mut jitter_rng = rng::stream(opts.seed, 100 + restart as u64);
            let jittered: Vec<f64> = start
                .iter()
                .enumerate()
                .map(|(c, v)| {
                    let w = bounds.width(c);
                    v + w * 0.05 * (2.0 * jitter_rng.gen::<f64>() - 1.0)
                })
                .collect();
            bounds.project(&jittered)
        };

        // Initial simplex: origin plus one displaced vertex per coordinate,
        // pushed away from the nearer box face.
        let mut simplex: Vec<Vertex> = Vec::with_capacity(p + 1);
        let v0 = eval(&origin);
        simplex.push(Vertex { x: origin.clone(), value: v0 });
        for c in 0..p {
            let w = bounds.width(c);
            let mut h = opts.init_step * w;
            if h == 0.0 {
                h = 1e-8 * (origin[c].abs() + 1.0);
            }
            if origin[c] + h > bounds.upper[c] {
                h = -h;
            }
            let mut x = origin.clone();
            x[c] = (x[c] + h).clamp(bounds.lower[c], bounds.upper[c]);
            let value = eval(&x);
            simplex.push(Vertex { x, value });
        }

        let mut converged = false;
        let mut iterations = 0usize;
        for _ in 0..opts.max_iter {
            iterations += 1;
            // Descending by value: best first.
            simplex.sort_by(|a, b| b.value.partial_cmp(&a.value).unwrap_or(std::cmp::Ordering::Equal));
            if simplex[0].value > global_best {
                global_best = simplex[0].value;
                trace.push(TracePoint { x: simplex[0].x.clone(), value: simplex[0].value });
            }
            let spread = simplex[0].value - simplex[p].value;
            if spread.abs() < opts.tol {
                converged = true;
                break;
            }

            // Centroid of all but the worst vertex.
            let mut centroid = vec![0.0; p];
            for v in &simplex[..p] {
                for (c, xc) in v.x.iter().enumerate() {
                    centroid[c] += xc / p as f64;
                }
            }
            let worst = simplex[p].value;
            let second_worst = simplex[p - 1].value;
            let best_val = simplex[0].value;

            let blend = |t: f64| -> Vec<f64> {
                let x: Vec<f64> = centroid
                    .iter()
                    .zip(&simplex[p].x)
                    .map(|(c, w)| c + t * (c - w))
                    .collect();
                bounds.project(&x)
            };

            let reflected = blend(ALPHA);
            let fr = eval(&reflected);
            if fr > best_val {
                let expanded = blend(GAMMA);
                let fe = eval(&expanded);
                if fe > fr {
                    simplex[p] = Vertex { x: expanded, value: fe };
                } else {
                    simplex[p] = Vertex { x: reflected, value: fr };
                }
                continue;
            }
            if fr > second_worst {
                simplex[p] = Vertex { x: reflected, value: fr };
                continue;
            }
            // Contraction: outside if the reflection improved on the worst,
            // inside otherwise.
            let contracted = if fr > worst { blend(RHO) } else { blend(-RHO) };
            let fc = eval(&contracted);
            if fc > worst.max(fr) {
                simplex[p] = Vertex { x: contracted, value: fc };
                continue;
            }
            // Shrink toward the best vertex.
            let best_x = simplex[0].x.clone();
            for v in simplex.iter_mut().skip(1) {
                let x: Vec<f64> = best_x
                    .iter()
                    .zip(&v.x)
                    .map(|(b, w)| b + SHRINK * (w - b))
                    .collect();
                let x = bounds.project(&x);
                let value = eval(&x);
                *v = Vertex { x, value };
            }
        }

        simplex.sort_by(|a, b| b.value.partial_cmp(&a.value).unwrap_or(std::cmp::Ordering::Equal));
        if simplex[0].value > global_best {
            global_best = simplex[0].value;
            trace.push(TracePoint { x: simplex[0].x.clone(), value: simplex[0].value });
        }
        total_iterations += iterations;
        let candidate = SimplexResult {
            x: simplex[0].x.clone(),
            value: simplex[0].value,
            iterations: 0,
            converged,
            trace: Vec::new(),
        };
        let replace = match &best {
            None => true,
            Some(b) => candidate.value > b.value,
        };
        if replace {
            best = Some(candidate);
        }
    }

    let mut out = best.expect("at least one restart ran");
    out.iterations = total_iterations;
    out.trace = trace;
    Ok(out)
}
