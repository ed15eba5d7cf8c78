//! Model family for switching diffusions.
//!
//! A model couples a hidden finite-state chain with a continuous diffusion:
//! the chain jumps from state `i` to state `j` with rate
//! `q^θ_{ji}(y) = φ_{ji}(θ) · q0_{ji}(y)` depending on the current diffusion
//! value `y`, and the diffusion drifts with `μ^θ(i, y) = Σ_l ψ_l(θ) μ^l(i, y)`
//! plus isotropic noise of amplitude `ε`.
//!
//! Orientation convention, inherited by every other module: the generator
//! matrix `Q(y)` acts on column state-vectors and its entry `(j, i)` (row
//! `j`, column `i`) holds the `i → j` rate, so columns sum to zero. Diagonal
//! entries are always derived from the off-diagonals, never taken as input.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Shape of a model: `n_states` discrete states, `y_dim`-dimensional
/// continuous state, `n_basis` drift basis fields and `n_params` parameter
/// coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelDims {
    pub n_states: usize,
    pub y_dim: usize,
    pub n_basis: usize,
    pub n_params: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.n_states == 0 {
            return Err(Error::invalid("n_states must be >= 1"));
        }
        if self.y_dim == 0 {
            return Err(Error::invalid("y_dim must be >= 1"));
        }
        if self.n_params == 0 {
            return Err(Error::invalid("n_params must be >= 1"));
        }
        Ok(())
    }
}

type RateFn = dyn Fn(usize, usize, &[f64]) -> f64 + Send + Sync;
type DriftFn = dyn Fn(usize, &[f64], &mut [f64]) + Send + Sync;

/// Base transition-rate field `q0_{ji}(y)`: an evaluable function together
/// with a declared finite bound. Boundedness and nonnegativity are checked by
/// sampling in [`validate_model`]; no symbolic analysis is attempted.
#[derive(Clone)]
pub struct RateField {
    eval: Arc<RateFn>,
    bound: f64,
}

impl RateField {
    pub fn new(bound: f64, eval: impl Fn(usize, usize, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        RateField { eval: Arc::new(eval), bound }
    }

    /// Base rate of the `from → to` transition at the point `y`.
    #[inline]
    pub fn rate(&self, from: usize, to: usize, y: &[f64]) -> f64 {
        (self.eval)(from, to, y)
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }
}

impl std::fmt::Debug for RateField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RateField").field("bound", &self.bound).finish()
    }
}

/// A drift basis field `μ^l(i, y) ∈ R^d` with a declared bound on its
/// Euclidean norm.
#[derive(Clone)]
pub struct DriftField {
    eval: Arc<DriftFn>,
    bound: f64,
}

impl DriftField {
    pub fn new(bound: f64, eval: impl Fn(usize, &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        DriftField { eval: Arc::new(eval), bound }
    }

    /// Write `μ(state, y)` into `out` (length `y_dim`).
    #[inline]
    pub fn drift_into(&self, state: usize, y: &[f64], out: &mut [f64]) {
        (self.eval)(state, y, out)
    }

    pub fn drift(&self, state: usize, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; y.len()];
        self.drift_into(state, y, &mut out);
        out
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }
}

impl std::fmt::Debug for DriftField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DriftField").field("bound", &self.bound).finish()
    }
}

/// One entry of a canonical link: either a coordinate of θ or a fixed value.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkEntry {
    Coord(usize),
    Fixed(f64),
}

/// Canonical (coordinate-projection) link: every rate multiplier `φ_{ji}` and
/// drift coefficient `ψ_l` is either a θ coordinate or a constant. This is
/// the parametrization under which the complete-data model is an exponential
/// family with a closed-form maximizer.
#[derive(Debug, Clone)]
pub struct CanonicalLink {
    /// `phi[to][from]`; diagonal entries must be `Fixed(1.0)` placeholders
    /// and are never read.
    pub phi: Vec<Vec<LinkEntry>>,
    /// `psi[l]` for each drift basis field.
    pub psi: Vec<LinkEntry>,
}

/// Arbitrary pure link functions, for parametrizations that are not
/// coordinate projections. Estimators fall back to derivative-free
/// maximization in this case.
#[derive(Clone)]
pub struct CustomLink {
    pub phi: Arc<dyn Fn(&[f64], usize, usize) -> f64 + Send + Sync>,
    pub psi: Arc<dyn Fn(&[f64], usize) -> f64 + Send + Sync>,
}

impl std::fmt::Debug for CustomLink {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("CustomLink")
    }
}

#[derive(Debug, Clone)]
pub enum ParamLink {
    Canonical(CanonicalLink),
    Custom(CustomLink),
}

impl ParamLink {
    pub fn is_canonical(&self) -> bool {
        matches!(self, ParamLink::Canonical(_))
    }
}

/// The exponential-family structure: base rates, drift basis and the link
/// from θ to the rate multipliers `φ` and drift coefficients `ψ`.
#[derive(Debug, Clone)]
pub struct ExponentialFamily {
    pub base_rates: RateField,
    pub drift_basis: Vec<DriftField>,
    pub link: ParamLink,
}

/// Admissible parameter set: a per-coordinate box. Optimizers project into
/// it; rate multipliers must stay positive, which the box encodes by keeping
/// rate-coordinate lower bounds above zero.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ParamBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ParamBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::invalid("parameter box bounds differ in length"));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l <= u)) {
            return Err(Error::invalid("parameter box has lower > upper"));
        }
        Ok(ParamBox { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta.len() == self.dim()
            && theta
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(t, (l, u))| t.is_finite() && *t >= *l && *t <= *u)
    }

    /// Coordinatewise clamp into the box.
    pub fn project(&self, theta: &[f64]) -> Vec<f64> {
        theta
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(t, (l, u))| t.clamp(*l, *u))
            .collect()
    }

    pub fn width(&self, coord: usize) -> f64 {
        self.upper[coord] - self.lower[coord]
    }
}

/// A fully specified model: dimensions, family, diffusion amplitude, initial
/// law of the hidden state and initial continuous state.
///
/// Immutable after construction; all evaluation functions must be pure, so a
/// spec can be shared freely across threads.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub dims: ModelDims,
    pub family: ExponentialFamily,
    pub epsilon: f64,
    pub init_dist: Vec<f64>,
    pub y0: Vec<f64>,
    pub param_box: ParamBox,
}

impl ModelSpec {
    pub fn new(
        dims: ModelDims,
        family: ExponentialFamily,
        epsilon: f64,
        init_dist: Vec<f64>,
        y0: Vec<f64>,
        param_box: ParamBox,
    ) -> Result<Self> {
        dims.validate()?;
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::invalid("epsilon must be positive and finite"));
        }
        if init_dist.len() != dims.n_states {
            return Err(Error::invalid("init_dist length differs from n_states"));
        }
        if init_dist.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::invalid("init_dist entries must be nonnegative"));
        }
        let total: f64 = init_dist.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!(
                "init_dist sums to {total}, expected 1 within 1e-12"
            )));
        }
        if y0.len() != dims.y_dim {
            return Err(Error::invalid("y0 length differs from y_dim"));
        }
        if family.drift_basis.len() != dims.n_basis {
            return Err(Error::invalid("drift basis count differs from n_basis"));
        }
        if param_box.dim() != dims.n_params {
            return Err(Error::invalid("parameter box dimension differs from n_params"));
        }
        if let ParamLink::Canonical(link) = &family.link {
            validate_canonical(link, &dims)?;
        }
        Ok(ModelSpec { dims, family, epsilon, init_dist, y0, param_box })
    }

    pub fn is_canonical(&self) -> bool {
        self.family.link.is_canonical()
    }

    pub fn require_admissible(&self, theta: &[f64]) -> Result<()> {
        if !self.param_box.contains(theta) {
            return Err(Error::invalid(format!(
                "theta {theta:?} outside the admissible box"
            )));
        }
        Ok(())
    }

    /// Rate multiplier `φ_{to,from}(θ)`.
    pub fn phi(&self, theta: &[f64], from: usize, to: usize) -> f64 {
        match &self.family.link {
            ParamLink::Canonical(link) => match link.phi[to][from] {
                LinkEntry::Coord(c) => theta[c],
                LinkEntry::Fixed(v) => v,
            },
            ParamLink::Custom(link) => (link.phi)(theta, to, from),
        }
    }

    /// Drift coefficient vector `ψ(θ)`.
    pub fn psi(&self, theta: &[f64]) -> Vec<f64> {
        match &self.family.link {
            ParamLink::Canonical(link) => link
                .psi
                .iter()
                .map(|e| match e {
                    LinkEntry::Coord(c) => theta[*c],
                    LinkEntry::Fixed(v) => *v,
                })
                .collect(),
            ParamLink::Custom(link) => {
                (0..self.dims.n_basis).map(|l| (link.psi)(theta, l)).collect()
            }
        }
    }

    /// All rate multipliers as a `n_states × n_states` row-major table
    /// indexed `[to * k + from]`; diagonal entries are zero.
    pub fn phi_table(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let k = self.dims.n_states;
        let mut table = vec![0.0; k * k];
        for from in 0..k {
            for to in 0..k {
                if to == from {
                    continue;
                }
                let v = self.phi(theta, from, to);
                if !v.is_finite() {
                    return Err(Error::ModelEval {
                        from,
                        to,
                        y: vec![],
                        what: format!("phi(theta) = {v}"),
                    });
                }
                table[to * k + from] = v;
            }
        }
        Ok(table)
    }

    /// Effective rate `q^θ_{to,from}(y)`.
    pub fn rate(&self, theta: &[f64], from: usize, to: usize, y: &[f64]) -> f64 {
        self.phi(theta, from, to) * self.family.base_rates.rate(from, to, y)
    }

    /// Effective drift `μ^θ(state, y)`, accumulated into `out`.
    pub fn drift_into(&self, psi: &[f64], state: usize, y: &[f64], out: &mut [f64], scratch: &mut [f64]) {
        out.fill(0.0);
        for (l, field) in self.family.drift_basis.iter().enumerate() {
            field.drift_into(state, y, scratch);
            for (o, s) in out.iter_mut().zip(scratch.iter()) {
                *o += psi[l] * *s;
            }
        }
    }
}

fn validate_canonical(link: &CanonicalLink, dims: &ModelDims) -> Result<()> {
    let k = dims.n_states;
    let p = dims.n_params;
    if link.phi.len() != k || link.phi.iter().any(|row| row.len() != k) {
        return Err(Error::invalid("canonical phi table is not n_states x n_states"));
    }
    if link.psi.len() != dims.n_basis {
        return Err(Error::invalid("canonical psi table length differs from n_basis"));
    }
    let mut rate_coords = vec![false; p];
    for (to, row) in link.phi.iter().enumerate() {
        for (from, entry) in row.iter().enumerate() {
            if to == from {
                continue;
            }
            match entry {
                LinkEntry::Coord(c) if *c >= p => {
                    return Err(Error::invalid(format!("phi coord {c} out of range")))
                }
                LinkEntry::Coord(c) => rate_coords[*c] = true,
                LinkEntry::Fixed(v) if !(*v > 0.0) => {
                    return Err(Error::invalid("fixed phi entries must be positive"))
                }
                LinkEntry::Fixed(_) => {}
            }
        }
    }
    for entry in &link.psi {
        match entry {
            LinkEntry::Coord(c) if *c >= p => {
                return Err(Error::invalid(format!("psi coord {c} out of range")))
            }
            LinkEntry::Coord(c) if rate_coords[*c] => {
                return Err(Error::invalid(format!(
                    "theta coordinate {c} used both as a rate multiplier and a drift coefficient"
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

/// Assemble `Q^θ(y)`: entry `(to, from)` is `φ_{to,from}(θ) q0_{to,from}(y)`
/// for `to ≠ from`; each diagonal entry stores the exact negation of its
/// column's off-diagonal sum, accumulated in ascending row order.
pub fn build_q_matrix(spec: &ModelSpec, theta: &[f64], y: &[f64]) -> Result<DMatrix<f64>> {
    spec.require_admissible(theta)?;
    let k = spec.dims.n_states;
    let mut q = DMatrix::zeros(k, k);
    for from in 0..k {
        let mut col_sum = 0.0;
        for to in 0..k {
            if to == from {
                continue;
            }
            let rate = spec.rate(theta, from, to, y);
            if !rate.is_finite() {
                return Err(Error::ModelEval {
                    from,
                    to,
                    y: y.to_vec(),
                    what: format!("rate = {rate}"),
                });
            }
            q[(to, from)] = rate;
            col_sum += rate;
        }
        q[(from, from)] = -col_sum;
    }
    Ok(q)
}

/// Assemble `C^θ(y)` (`y_dim × n_states`): column `j` is the effective drift
/// `μ^θ(j, y)`, so `C(y) x` picks the drift of the state indicated by `x`.
pub fn build_c_matrix(spec: &ModelSpec, theta: &[f64], y: &[f64]) -> Result<DMatrix<f64>> {
    spec.require_admissible(theta)?;
    let d = spec.dims.y_dim;
    let k = spec.dims.n_states;
    let psi = spec.psi(theta);
    if psi.iter().any(|v| !v.is_finite()) {
        return Err(Error::ModelEval { from: 0, to: 0, y: y.to_vec(), what: "psi not finite".into() });
    }
    let mut c = DMatrix::zeros(d, k);
    let mut scratch = vec![0.0; d];
    for state in 0..k {
        for (l, field) in spec.family.drift_basis.iter().enumerate() {
            field.drift_into(state, y, &mut scratch);
            for r in 0..d {
                if !scratch[r].is_finite() {
                    return Err(Error::ModelEval {
                        from: state,
                        to: l,
                        y: y.to_vec(),
                        what: format!("drift basis {l} component {r} = {}", scratch[r]),
                    });
                }
                c[(r, state)] += psi[l] * scratch[r];
            }
        }
    }
    Ok(c)
}

/// One sampled violation of the model's mathematical preconditions.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub what: String,
}

/// Outcome of sampling-based model validation. Violations are data, not
/// errors: an empty list is a pass.
#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn pass(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, what: String) {
        self.violations.push(Violation { what });
    }
}

/// Check nonnegativity and the declared bounds of the rate and drift fields
/// on `sample_grid`, and positivity of the rate multipliers at each probe
/// parameter. Sampling cannot certify the bounds globally; it catches
/// misdeclared fields on the region the caller cares about.
pub fn validate_model(spec: &ModelSpec, sample_grid: &[Vec<f64>], theta_probe: &[Vec<f64>]) -> Result<ValidationReport> {
    if sample_grid.is_empty() || theta_probe.is_empty() {
        return Err(Error::invalid("validation needs nonempty sample grid and theta probes"));
    }
    let k = spec.dims.n_states;
    let d = spec.dims.y_dim;
    let mut report = ValidationReport::default();
    let rate_bound = spec.family.base_rates.bound();
    let mut scratch = vec![0.0; d];
    for y in sample_grid {
        if y.len() != d {
            return Err(Error::invalid("sample grid point has wrong dimension"));
        }
        for from in 0..k {
            for to in 0..k {
                if to == from {
                    continue;
                }
                let r = spec.family.base_rates.rate(from, to, y);
                if !r.is_finite() {
                    report.push(format!("q0[{to},{from}] not finite at y={y:?}"));
                } else if r < 0.0 {
                    report.push(format!("q0[{to},{from}] = {r} < 0 at y={y:?}"));
                } else if r > rate_bound {
                    report.push(format!("q0[{to},{from}] = {r} exceeds bound {rate_bound} at y={y:?}"));
                }
            }
        }
        for (l, field) in spec.family.drift_basis.iter().enumerate() {
            for state in 0..k {
                field.drift_into(state, y, &mut scratch);
                let norm = scratch.iter().map(|v| v * v).sum::<f64>().sqrt();
                if !norm.is_finite() {
                    report.push(format!("drift basis {l} not finite at state {state}, y={y:?}"));
                } else if norm > field.bound() {
                    report.push(format!(
                        "drift basis {l} norm {norm} exceeds bound {} at state {state}, y={y:?}",
                        field.bound()
                    ));
                }
            }
        }
    }
    for theta in theta_probe {
        if theta.len() != spec.dims.n_params {
            return Err(Error::invalid("theta probe has wrong dimension"));
        }
        for from in 0..k {
            for to in 0..k {
                if to == from {
                    continue;
                }
                let phi = spec.phi(theta, from, to);
                if !phi.is_finite() || phi <= 0.0 {
                    report.push(format!("phi[{to},{from}] = {phi} not positive at theta={theta:?}"));
                }
            }
        }
        let psi = spec.psi(theta);
        if psi.iter().any(|v| !v.is_finite()) {
            report.push(format!("psi not finite at theta={theta:?}"));
        }
    }
    Ok(report)
}
