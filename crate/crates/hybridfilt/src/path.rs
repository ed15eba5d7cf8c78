//! Sample-path containers and their on-disk representation.
//!
//! A simulated path is stored as a CSV time series with header
//! `t,x_idx,y_1..y_d` plus a JSON sidecar holding the exact jump records and
//! the run metadata (seed, step size, model digest). Floats are serialized
//! with 17 significant digits, which round-trips `f64` bit-exactly. Discrete
//! state indices are 1-based in files (matching the `p_1..p_k` column naming
//! of filter output) and 0-based in memory.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One transition of the hidden chain; `from`/`to` are 0-based.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JumpRecord {
    pub time: f64,
    pub from: usize,
    pub to: usize,
}

/// A discretized sample path of the hybrid system on the grid
/// `t_0 = 0 < t_1 < … < t_n = T` (uniform step `dt` plus inserted jump
/// times). `x_idx` is right-continuous: at a jump time the new state is
/// recorded.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridPath {
    pub times: Vec<f64>,
    pub x_idx: Vec<usize>,
    /// Flat row-major continuous states, `y_dim` per grid point.
    pub y: Vec<f64>,
    pub y_dim: usize,
    pub jumps: Vec<JumpRecord>,
    pub seed: u64,
    pub dt: f64,
}

impl HybridPath {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap_or(&0.0)
    }

    #[inline]
    pub fn y_at(&self, idx: usize) -> &[f64] {
        &self.y[idx * self.y_dim..(idx + 1) * self.y_dim]
    }

    /// Check the structural invariants: strictly increasing grid starting at
    /// zero, `x_idx` constant between jumps, and each jump record matching
    /// the states straddling its (grid) time.
    pub fn validate(&self) -> Result<()> {
        let n = self.times.len();
        if n == 0 {
            return Err(Error::invalid("path has no grid points"));
        }
        if self.x_idx.len() != n || self.y.len() != n * self.y_dim {
            return Err(Error::invalid("path arrays have inconsistent lengths"));
        }
        if self.times[0] != 0.0 {
            return Err(Error::invalid("path must start at t = 0"));
        }
        if self.times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::invalid("path grid must be strictly increasing"));
        }
        let mut jump_iter = self.jumps.iter().peekable();
        for m in 1..n {
            let changed = self.x_idx[m] != self.x_idx[m - 1];
            match jump_iter.peek() {
                Some(j) if j.time == self.times[m] => {
                    let j = jump_iter.next().unwrap();
                    if j.from == j.to {
                        return Err(Error::invalid("jump record with from == to"));
                    }
                    if self.x_idx[m - 1] != j.from || self.x_idx[m] != j.to {
                        return Err(Error::invalid(format!(
                            "jump record at t={} does not match straddling states",
                            j.time
                        )));
                    }
                }
                _ => {
                    if changed {
                        return Err(Error::invalid(format!(
                            "state changes at t={} without a jump record",
                            self.times[m]
                        )));
                    }
                }
            }
        }
        if jump_iter.next().is_some() {
            return Err(Error::invalid("jump record at a time not on the grid"));
        }
        Ok(())
    }

    /// The observable part of the path.
    pub fn observed(&self) -> YPath {
        YPath { times: self.times.clone(), y: self.y.clone(), y_dim: self.y_dim }
    }

    /// The observable part restricted to the uniform base grid (multiples of
    /// `dt`), dropping inserted jump times. Oracle code that requires a
    /// uniform grid runs on this restriction; the retained `y` values are the
    /// simulated ones, no interpolation happens.
    pub fn observed_base_grid(&self) -> YPath {
        let tol = self.dt * 1e-6;
        let mut times = Vec::new();
        let mut y = Vec::new();
        for (m, &t) in self.times.iter().enumerate() {
            let ratio = t / self.dt;
            if (ratio - ratio.round()).abs() * self.dt <= tol {
                times.push(t);
                y.extend_from_slice(self.y_at(m));
            }
        }
        YPath { times, y, y_dim: self.y_dim }
    }
}

/// An observed continuous path on a finite grid (no hidden-state column).
#[derive(Debug, Clone, PartialEq)]
pub struct YPath {
    pub times: Vec<f64>,
    pub y: Vec<f64>,
    pub y_dim: usize,
}

impl YPath {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap_or(&0.0)
    }

    #[inline]
    pub fn y_at(&self, idx: usize) -> &[f64] {
        &self.y[idx * self.y_dim..(idx + 1) * self.y_dim]
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.is_empty() {
            return Err(Error::invalid("observed path has no grid points"));
        }
        if self.y.len() != self.times.len() * self.y_dim {
            return Err(Error::invalid("observed path arrays have inconsistent lengths"));
        }
        if self.times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::invalid("observed path grid must be strictly increasing"));
        }
        if self.y.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("observed path contains non-finite values"));
        }
        Ok(())
    }
}

/// Serialize `x` with 17 significant digits; parsing the result recovers the
/// exact bit pattern.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse_f64(field: &str, path: &str, line: usize) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| Error::Parse {
        path: path.to_string(),
        what: format!("bad float {field:?} on line {line}"),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct JumpMeta {
    time: f64,
    /// 1-based in files.
    from: usize,
    to: usize,
}

/// Sidecar metadata written next to a path CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathMeta {
    pub seed: u64,
    pub dt: f64,
    pub horizon: f64,
    pub spec_digest: String,
    jumps: Vec<JumpMeta>,
}

impl PathMeta {
    pub fn of(path: &HybridPath, spec_digest: &str) -> Self {
        PathMeta {
            seed: path.seed,
            dt: path.dt,
            horizon: path.horizon(),
            spec_digest: spec_digest.to_string(),
            jumps: path
                .jumps
                .iter()
                .map(|j| JumpMeta { time: j.time, from: j.from + 1, to: j.to + 1 })
                .collect(),
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.display().to_string(), source }
}

/// Write the path CSV (`t,x_idx,y_1..y_d`) and its JSON sidecar.
pub fn write_path_files(path: &HybridPath, spec_digest: &str, csv_path: &Path, meta_path: &Path) -> Result<()> {
    let file = std::fs::File::create(csv_path).map_err(|e| io_err(csv_path, e))?;
    let mut w = BufWriter::new(file);
    let mut render = || -> std::io::Result<()> {
        write!(w, "t,x_idx")?;
        for r in 1..=path.y_dim {
            write!(w, ",y_{r}")?;
        }
        writeln!(w)?;
        for m in 0..path.len() {
            write!(w, "{},{}", fmt_f64(path.times[m]), path.x_idx[m] + 1)?;
            for v in path.y_at(m) {
                write!(w, ",{}", fmt_f64(*v))?;
            }
            writeln!(w)?;
        }
        w.flush()
    };
    render().map_err(|e| io_err(csv_path, e))?;

    let meta = PathMeta::of(path, spec_digest);
    let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    std::fs::write(meta_path, text).map_err(|e| io_err(meta_path, e))?;
    Ok(())
}

/// Read a path CSV plus sidecar back into a validated [`HybridPath`].
pub fn read_path_files(csv_path: &Path, meta_path: &Path) -> Result<HybridPath> {
    let meta_text = std::fs::read_to_string(meta_path).map_err(|e| io_err(meta_path, e))?;
    let meta: PathMeta = serde_json::from_str(&meta_text).map_err(|e| Error::Parse {
        path: meta_path.display().to_string(),
        what: e.to_string(),
    })?;
    let (times, x_idx, y, y_dim) = read_csv_columns(csv_path, true)?;
    let x_idx = x_idx.expect("x column requested");
    let jumps = meta
        .jumps
        .iter()
        .map(|j| {
            if j.from == 0 || j.to == 0 {
                return Err(Error::Parse {
                    path: meta_path.display().to_string(),
                    what: "jump state indices are 1-based".into(),
                });
            }
            Ok(JumpRecord { time: j.time, from: j.from - 1, to: j.to - 1 })
        })
        .collect::<Result<Vec<_>>>()?;
    let path = HybridPath { times, x_idx, y, y_dim, jumps, seed: meta.seed, dt: meta.dt };
    path.validate()?;
    Ok(path)
}

/// Read a path CSV without its sidecar, reconstructing jump records from the
/// `x_idx` transitions (every jump time is a grid point, so nothing is lost);
/// the base step is inferred as the largest grid spacing.
pub fn read_path_csv(csv_path: &Path) -> Result<HybridPath> {
    let (times, x_idx, y, y_dim) = read_csv_columns(csv_path, true)?;
    let x_idx = x_idx.expect("x column requested");
    let mut jumps = Vec::new();
    for m in 1..times.len() {
        if x_idx[m] != x_idx[m - 1] {
            jumps.push(JumpRecord { time: times[m], from: x_idx[m - 1], to: x_idx[m] });
        }
    }
    let dt = times
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(0.0, f64::max);
    let path = HybridPath { times, x_idx, y, y_dim, jumps, seed: 0, dt };
    path.validate()?;
    Ok(path)
}

/// Read an observed path: accepts both `t,y_1..` and full `t,x_idx,y_1..`
/// CSVs (the hidden-state column is ignored).
pub fn read_y_csv(csv_path: &Path) -> Result<YPath> {
    let text = std::fs::read_to_string(csv_path).map_err(|e| io_err(csv_path, e))?;
    let has_x = text
        .lines()
        .next()
        .map(|h| h.split(',').nth(1).map(|c| c.trim() == "x_idx").unwrap_or(false))
        .unwrap_or(false);
    let (times, _x, y, y_dim) = read_csv_columns(csv_path, has_x)?;
    let path = YPath { times, y, y_dim };
    path.validate()?;
    Ok(path)
}

#[allow(clippy::type_complexity)]
fn read_csv_columns(csv_path: &Path, with_x: bool) -> Result<(Vec<f64>, Option<Vec<usize>>, Vec<f64>, usize)> {
    let display = csv_path.display().to_string();
    let file = std::fs::File::open(csv_path).map_err(|e| io_err(csv_path, e))?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(h) => h.map_err(|e| io_err(csv_path, e))?,
        None => return Err(Error::Parse { path: display, what: "empty file".into() }),
    };
    let cols: Vec<&str> = header.trim_end_matches('\r').split(',').map(|c| c.trim()).collect();
    let expected_prefix: &[&str] = if with_x { &["t", "x_idx"] } else { &["t"] };
    if cols.len() < expected_prefix.len() + 1
        || cols[..expected_prefix.len()] != *expected_prefix
    {
        return Err(Error::Parse {
            path: display,
            what: format!("unexpected header {header:?}"),
        });
    }
    let y_dim = cols.len() - expected_prefix.len();
    let mut times = Vec::new();
    let mut x_idx = if with_x { Some(Vec::new()) } else { None };
    let mut y = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line.map_err(|e| io_err(csv_path, e))?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::Parse {
                path: display,
                what: format!("line {} has {} fields, expected {}", lineno + 2, fields.len(), cols.len()),
            });
        }
        times.push(parse_f64(fields[0], &display, lineno + 2)?);
        let mut next = 1;
        if let Some(xs) = x_idx.as_mut() {
            let raw: usize = fields[1].trim().parse().map_err(|_| Error::Parse {
                path: display.clone(),
                what: format!("bad state index {:?} on line {}", fields[1], lineno + 2),
            })?;
            if raw == 0 {
                return Err(Error::Parse {
                    path: display.clone(),
                    what: format!("state index 0 on line {} (file indices are 1-based)", lineno + 2),
                });
            }
            xs.push(raw - 1);
            next = 2;
        }
        for field in &fields[next..] {
            y.push(parse_f64(field, &display, lineno + 2)?);
        }
    }
    Ok((times, x_idx, y, y_dim))
}
