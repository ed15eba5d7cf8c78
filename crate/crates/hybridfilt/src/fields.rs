//! Built-in rate/drift field families and the JSON model configuration.
//!
//! A model file stores dimensions, `epsilon`, the initial law, the parameter
//! box, a registry key selecting a field family per component, and the
//! canonical link table. Families are versioned: readers reject versions they
//! do not understand.
//!
//! Matrix-shaped coefficient arrays follow the crate-wide orientation: rate
//! tables are indexed `[to][from]` (entry `[j][i]` is the `i → j` rate) and
//! diagonals must be zero — they are always derived, never read.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{
    CanonicalLink, DriftField, ExponentialFamily, LinkEntry, ModelDims, ModelSpec, ParamBox,
    ParamLink, RateField,
};

pub const FAMILY_VERSION: u32 = 1;

/// Rate field families available from configuration files.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum RateFamilyConfig {
    /// `q0_{ji}(y) = rates[j][i]`.
    Constant {
        version: u32,
        rates: Vec<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bound: Option<f64>,
    },
    /// `q0_{ji}(y) = constant[j][i] + Σ_r slope[j][i][r] y_r`.
    Affine {
        version: u32,
        constant: Vec<Vec<f64>>,
        slope: Vec<Vec<Vec<f64>>>,
        bound: f64,
    },
    /// `q0_{ji}(y) = constant[j][i] + Σ_r slope[j][i][r] y_r + Σ_r curvature[j][i][r] y_r²`.
    Quadratic {
        version: u32,
        constant: Vec<Vec<f64>>,
        slope: Vec<Vec<Vec<f64>>>,
        curvature: Vec<Vec<Vec<f64>>>,
        bound: f64,
    },
    /// One-dimensional `y` only: linear interpolation of `values[j][i]` on a
    /// strictly increasing `grid`, constant beyond its ends.
    Tabulated {
        version: u32,
        grid: Vec<f64>,
        values: Vec<Vec<Vec<f64>>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bound: Option<f64>,
    },
}

/// Drift field families; coefficients are per discrete state.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum DriftFamilyConfig {
    /// `μ(i, y) = values[i]` (a `y_dim` vector per state).
    Constant {
        version: u32,
        values: Vec<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bound: Option<f64>,
    },
    /// `μ(i, y)_r = constant[i][r] + Σ_s slope[i][r][s] y_s`.
    Affine {
        version: u32,
        constant: Vec<Vec<f64>>,
        slope: Vec<Vec<Vec<f64>>>,
        bound: f64,
    },
    /// Affine plus `Σ_s curvature[i][r][s] y_s²`.
    Quadratic {
        version: u32,
        constant: Vec<Vec<f64>>,
        slope: Vec<Vec<Vec<f64>>>,
        curvature: Vec<Vec<Vec<f64>>>,
        bound: f64,
    },
    /// One-dimensional `y` and drift: interpolation of `values[i]` on `grid`.
    Tabulated {
        version: u32,
        grid: Vec<f64>,
        values: Vec<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bound: Option<f64>,
    },
}

/// Serialized form of one canonical-link entry. For `phi`, `null` means the
/// multiplier is fixed at 1; diagonal entries must be `null`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkEntryConfig {
    Coord(usize),
    Fixed(f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinkConfig {
    pub phi: Vec<Vec<Option<LinkEntryConfig>>>,
    pub psi: Vec<LinkEntryConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamBoxConfig {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// On-disk model description; [`ModelConfig::build`] turns it into a
/// [`ModelSpec`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dims: ModelDims,
    pub epsilon: f64,
    pub init_dist: Vec<f64>,
    pub y0: Vec<f64>,
    pub param_box: ParamBoxConfig,
    pub base_rates: RateFamilyConfig,
    pub drift_basis: Vec<DriftFamilyConfig>,
    pub link: LinkConfig,
}

fn check_version(version: u32) -> Result<()> {
    if version != FAMILY_VERSION {
        return Err(Error::invalid(format!(
            "unsupported field family version {version}, this build understands {FAMILY_VERSION}"
        )));
    }
    Ok(())
}

fn check_rate_table(name: &str, table: &[Vec<f64>], k: usize, require_zero_diag: bool) -> Result<()> {
    if table.len() != k || table.iter().any(|row| row.len() != k) {
        return Err(Error::invalid(format!("{name} must be {k}x{k}")));
    }
    if require_zero_diag {
        for (j, row) in table.iter().enumerate() {
            if row[j] != 0.0 {
                return Err(Error::invalid(format!(
                    "{name} has nonzero diagonal entry at [{j}][{j}]; diagonals are derived, not input"
                )));
            }
        }
    }
    Ok(())
}

fn check_rate_cube(name: &str, cube: &[Vec<Vec<f64>>], k: usize, d: usize) -> Result<()> {
    if cube.len() != k || cube.iter().any(|row| row.len() != k) {
        return Err(Error::invalid(format!("{name} must be {k}x{k}x{d}")));
    }
    for row in cube {
        for entry in row {
            if entry.len() != d {
                return Err(Error::invalid(format!("{name} must be {k}x{k}x{d}")));
            }
        }
    }
    Ok(())
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.len() < 2 {
        return Err(Error::invalid("tabulated grid needs at least two points"));
    }
    if grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::invalid("tabulated grid must be strictly increasing"));
    }
    Ok(())
}

/// Piecewise-linear interpolation with constant extrapolation; `grid` is
/// strictly increasing.
fn interp(grid: &[f64], values: &[f64], x: f64) -> f64 {
    if x <= grid[0] {
        return values[0];
    }
    if x >= grid[grid.len() - 1] {
        return values[values.len() - 1];
    }
    let idx = match grid.binary_search_by(|g| g.partial_cmp(&x).unwrap()) {
        Ok(i) => return values[i],
        Err(i) => i,
    };
    let (x0, x1) = (grid[idx - 1], grid[idx]);
    let w = (x - x0) / (x1 - x0);
    values[idx - 1] * (1.0 - w) + values[idx] * w
}

impl RateFamilyConfig {
    fn build(&self, dims: &ModelDims) -> Result<RateField> {
        let k = dims.n_states;
        let d = dims.y_dim;
        match self {
            RateFamilyConfig::Constant { version, rates, bound } => {
                check_version(*version)?;
                check_rate_table("constant rates", rates, k, true)?;
                let max = rates.iter().flatten().cloned().fold(0.0, f64::max);
                let bound = bound.unwrap_or(max);
                let rates = rates.clone();
                Ok(RateField::new(bound, move |from, to, _y| rates[to][from]))
            }
            RateFamilyConfig::Affine { version, constant, slope, bound } => {
                check_version(*version)?;
                check_rate_table("affine constant", constant, k, true)?;
                check_rate_cube("affine slope", slope, k, d)?;
                let (constant, slope) = (constant.clone(), slope.clone());
                Ok(RateField::new(*bound, move |from, to, y| {
                    let mut v = constant[to][from];
                    for (s, yr) in slope[to][from].iter().zip(y) {
                        v += s * yr;
                    }
                    v
                }))
            }
            RateFamilyConfig::Quadratic { version, constant, slope, curvature, bound } => {
                check_version(*version)?;
                check_rate_table("quadratic constant", constant, k, true)?;
                check_rate_cube("quadratic slope", slope, k, d)?;
                check_rate_cube("quadratic curvature", curvature, k, d)?;
                let (constant, slope, curvature) = (constant.clone(), slope.clone(), curvature.clone());
                Ok(RateField::new(*bound, move |from, to, y| {
                    let mut v = constant[to][from];
                    for ((s, c), yr) in slope[to][from].iter().zip(&curvature[to][from]).zip(y) {
                        v += s * yr + c * yr * yr;
                    }
                    v
                }))
            }
            RateFamilyConfig::Tabulated { version, grid, values, bound } => {
                check_version(*version)?;
                if d != 1 {
                    return Err(Error::invalid("tabulated rate fields require y_dim = 1"));
                }
                check_grid(grid)?;
                if values.len() != k || values.iter().any(|row| row.len() != k) {
                    return Err(Error::invalid("tabulated values must be n_states x n_states"));
                }
                for row in values {
                    for cell in row {
                        if !cell.is_empty() && cell.len() != grid.len() {
                            return Err(Error::invalid("tabulated values must match grid length"));
                        }
                    }
                }
                let max = values
                    .iter()
                    .flatten()
                    .flatten()
                    .cloned()
                    .fold(0.0, f64::max);
                let bound = bound.unwrap_or(max);
                let (grid, values) = (grid.clone(), values.clone());
                Ok(RateField::new(bound, move |from, to, y| {
                    let cell = &values[to][from];
                    if cell.is_empty() {
                        0.0
                    } else {
                        interp(&grid, cell, y[0])
                    }
                }))
            }
        }
    }
}

impl DriftFamilyConfig {
    fn build(&self, dims: &ModelDims) -> Result<DriftField> {
        let k = dims.n_states;
        let d = dims.y_dim;
        let check_state_table = |name: &str, table: &[Vec<f64>]| -> Result<()> {
            if table.len() != k || table.iter().any(|row| row.len() != d) {
                return Err(Error::invalid(format!("{name} must be {k}x{d}")));
            }
            Ok(())
        };
        let check_state_cube = |name: &str, cube: &[Vec<Vec<f64>>]| -> Result<()> {
            if cube.len() != k
                || cube
                    .iter()
                    .any(|rows| rows.len() != d || rows.iter().any(|r| r.len() != d))
            {
                return Err(Error::invalid(format!("{name} must be {k}x{d}x{d}")));
            }
            Ok(())
        };
        match self {
            DriftFamilyConfig::Constant { version, values, bound } => {
                check_version(*version)?;
                check_state_table("constant drift values", values)?;
                let max = values
                    .iter()
                    .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
                    .fold(0.0, f64::max);
                let bound = bound.unwrap_or(max);
                let values = values.clone();
                Ok(DriftField::new(bound, move |state, _y, out| {
                    out.copy_from_slice(&values[state]);
                }))
            }
            DriftFamilyConfig::Affine { version, constant, slope, bound } => {
                check_version(*version)?;
                check_state_table("affine drift constant", constant)?;
                check_state_cube("affine drift slope", slope)?;
                let (constant, slope) = (constant.clone(), slope.clone());
                Ok(DriftField::new(*bound, move |state, y, out| {
                    for r in 0..out.len() {
                        let mut v = constant[state][r];
                        for (s, ys) in slope[state][r].iter().zip(y) {
                            v += s * ys;
                        }
                        out[r] = v;
                    }
                }))
            }
            DriftFamilyConfig::Quadratic { version, constant, slope, curvature, bound } => {
                check_version(*version)?;
                check_state_table("quadratic drift constant", constant)?;
                check_state_cube("quadratic drift slope", slope)?;
                check_state_cube("quadratic drift curvature", curvature)?;
                let (constant, slope, curvature) = (constant.clone(), slope.clone(), curvature.clone());
                Ok(DriftField::new(*bound, move |state, y, out| {
                    for r in 0..out.len() {
                        let mut v = constant[state][r];
                        for ((s, c), ys) in slope[state][r].iter().zip(&curvature[state][r]).zip(y) {
                            v += s * ys + c * ys * ys;
                        }
                        out[r] = v;
                    }
                }))
            }
            DriftFamilyConfig::Tabulated { version, grid, values, bound } => {
                check_version(*version)?;
                if d != 1 {
                    return Err(Error::invalid("tabulated drift fields require y_dim = 1"));
                }
                check_grid(grid)?;
                if values.len() != k || values.iter().any(|row| row.len() != grid.len()) {
                    return Err(Error::invalid("tabulated drift values must be n_states x grid length"));
                }
                let max = values.iter().flatten().map(|v| v.abs()).fold(0.0, f64::max);
                let bound = bound.unwrap_or(max);
                let (grid, values) = (grid.clone(), values.clone());
                Ok(DriftField::new(bound, move |state, y, out| {
                    out[0] = interp(&grid, &values[state], y[0]);
                }))
            }
        }
    }
}

impl LinkConfig {
    fn build(&self, dims: &ModelDims) -> Result<CanonicalLink> {
        let k = dims.n_states;
        if self.phi.len() != k || self.phi.iter().any(|row| row.len() != k) {
            return Err(Error::invalid("link phi table must be n_states x n_states"));
        }
        let mut phi = vec![vec![LinkEntry::Fixed(1.0); k]; k];
        for (to, row) in self.phi.iter().enumerate() {
            for (from, entry) in row.iter().enumerate() {
                if to == from {
                    if entry.is_some() {
                        return Err(Error::invalid("link phi diagonal entries must be null"));
                    }
                    continue;
                }
                phi[to][from] = match entry {
                    None => LinkEntry::Fixed(1.0),
                    Some(LinkEntryConfig::Coord(c)) => LinkEntry::Coord(*c),
                    Some(LinkEntryConfig::Fixed(v)) => LinkEntry::Fixed(*v),
                };
            }
        }
        let psi = self
            .psi
            .iter()
            .map(|e| match e {
                LinkEntryConfig::Coord(c) => LinkEntry::Coord(*c),
                LinkEntryConfig::Fixed(v) => LinkEntry::Fixed(*v),
            })
            .collect();
        Ok(CanonicalLink { phi, psi })
    }
}

impl ModelConfig {
    pub fn build(&self) -> Result<ModelSpec> {
        let base_rates = self.base_rates.build(&self.dims)?;
        let drift_basis = self
            .drift_basis
            .iter()
            .map(|cfg| cfg.build(&self.dims))
            .collect::<Result<Vec<_>>>()?;
        let link = ParamLink::Canonical(self.link.build(&self.dims)?);
        ModelSpec::new(
            self.dims,
            ExponentialFamily { base_rates, drift_basis, link },
            self.epsilon,
            self.init_dist.clone(),
            self.y0.clone(),
            ParamBox::new(self.param_box.lower.clone(), self.param_box.upper.clone())?,
        )
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| Error::Parse { path: "<model json>".into(), what: e.to_string() })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model config serializes")
    }
}

/// A model loaded from disk together with its content digest (SHA-256 of the
/// file bytes), used to stamp derived artifacts.
pub struct LoadedModel {
    pub spec: ModelSpec,
    pub config: ModelConfig,
    pub digest: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn load_model_file(path: &Path) -> Result<LoadedModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let config: ModelConfig = serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        what: e.to_string(),
    })?;
    let spec = config.build()?;
    Ok(LoadedModel { spec, config, digest: sha256_hex(&bytes) })
}

/// Programmatic model constructors used across the test and verification
/// suites.
pub mod builders {
    use super::*;

    /// Constant-rate chain with no drift: a one-coordinate dummy parameter
    /// (all multipliers fixed at 1) keeps the parameter box nonempty.
    /// `rates[j][i]` is the `i → j` rate.
    pub fn constant_rate_model(k: usize, rates: Vec<Vec<f64>>) -> ModelSpec {
        let max = rates.iter().flatten().cloned().fold(0.0, f64::max);
        let rates_field = RateField::new(max, move |from, to, _y: &[f64]| rates[to][from]);
        let phi = vec![vec![LinkEntry::Fixed(1.0); k]; k];
        ModelSpec::new(
            ModelDims { n_states: k, y_dim: 1, n_basis: 0, n_params: 1 },
            ExponentialFamily {
                base_rates: rates_field,
                drift_basis: vec![],
                link: ParamLink::Canonical(CanonicalLink { phi, psi: vec![] }),
            },
            1.0,
            vec![1.0 / k as f64; k],
            vec![0.0],
            ParamBox::new(vec![0.0], vec![1.0]).unwrap(),
        )
        .unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wonham_json() -> String {
        r#"{
            "dims": {"n_states": 2, "y_dim": 1, "n_basis": 1, "n_params": 3},
            "epsilon": 0.3,
            "init_dist": [0.5, 0.5],
            "y0": [0.0],
            "param_box": {"lower": [0.05, 0.05, 0.05], "upper": [20.0, 20.0, 5.0]},
            "base_rates": {"family": "constant", "version": 1, "rates": [[0.0, 1.0], [1.0, 0.0]]},
            "drift_basis": [
                {"family": "constant", "version": 1, "values": [[1.0], [-1.0]]}
            ],
            "link": {
                "phi": [[null, {"coord": 1}], [{"coord": 0}, null]],
                "psi": [{"coord": 2}]
            }
        }"#
        .to_string()
    }

    #[test]
    fn wonham_config_round_trips() {
        let config = ModelConfig::from_json(&wonham_json()).unwrap();
        let text = config.to_json();
        let config2 = ModelConfig::from_json(&text).unwrap();
        let spec = config2.build().unwrap();
        assert_eq!(spec.dims.n_states, 2);
        assert_eq!(spec.rate(&[2.0, 1.0, 1.0], 0, 1, &[0.0]), 2.0);
        assert_eq!(spec.psi(&[2.0, 1.0, 0.7]), vec![0.7]);
    }

    #[test]
    fn quadratic_rate_family() {
        let cfg = RateFamilyConfig::Quadratic {
            version: 1,
            constant: vec![vec![0.0, 1.0], vec![1.0, 0.0]],
            slope: vec![vec![vec![0.0], vec![0.0]], vec![vec![0.0], vec![0.0]]],
            curvature: vec![vec![vec![0.0], vec![0.0]], vec![vec![1.0], vec![0.0]]],
            bound: 100.0,
        };
        let dims = ModelDims { n_states: 2, y_dim: 1, n_basis: 0, n_params: 1 };
        let field = cfg.build(&dims).unwrap();
        // q0_{21}(y) = 1 + y^2, q0_{12}(y) = 1.
        assert_eq!(field.rate(0, 1, &[2.0]), 5.0);
        assert_eq!(field.rate(1, 0, &[2.0]), 1.0);
    }

    #[test]
    fn tabulated_interpolates_and_extrapolates() {
        let cfg = RateFamilyConfig::Tabulated {
            version: 1,
            grid: vec![0.0, 1.0, 2.0],
            values: vec![
                vec![vec![], vec![3.0, 3.0, 3.0]],
                vec![vec![1.0, 2.0, 4.0], vec![]],
            ],
            bound: None,
        };
        let dims = ModelDims { n_states: 2, y_dim: 1, n_basis: 0, n_params: 1 };
        let field = cfg.build(&dims).unwrap();
        assert_eq!(field.rate(0, 1, &[0.5]), 1.5);
        assert_eq!(field.rate(0, 1, &[1.5]), 3.0);
        assert_eq!(field.rate(0, 1, &[-7.0]), 1.0);
        assert_eq!(field.rate(0, 1, &[9.0]), 4.0);
        assert_eq!(field.rate(1, 0, &[0.5]), 3.0);
        assert_eq!(field.bound(), 4.0);
    }

    #[test]
    fn rejects_nonzero_diagonal() {
        let cfg = RateFamilyConfig::Constant {
            version: 1,
            rates: vec![vec![0.5, 1.0], vec![1.0, 0.0]],
            bound: None,
        };
        let dims = ModelDims { n_states: 2, y_dim: 1, n_basis: 0, n_params: 1 };
        assert!(cfg.build(&dims).is_err());
    }

    #[test]
    fn rejects_unknown_version() {
        let cfg = RateFamilyConfig::Constant {
            version: 7,
            rates: vec![vec![0.0, 1.0], vec![1.0, 0.0]],
            bound: None,
        };
        let dims = ModelDims { n_states: 2, y_dim: 1, n_basis: 0, n_params: 1 };
        assert!(cfg.build(&dims).is_err());
    }

    #[test]
    fn digest_is_stable() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
