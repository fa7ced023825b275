//! Precomputed bound tables.
//!
//! A table stores solved bounds on a probability grid. Queries interpolate the
//! bound on the new probability, `Q = p * r`, linearly between neighbouring
//! grid points and divide by `p`. `Q` stays within `[0, 1]` and is smooth at
//! both ends of the grid, whereas `r` itself grows like `1/p` as `p -> 0`.
//! On each segment the interpolant is monotone whenever the stored node
//! values are, so query results inherit the monotonicity of the bounds.
//!
//! # File layout
//!
//! All integers and floats little-endian:
//!
//! ```text
//! magic        4 bytes  "BNDT"
//! version      u32      1
//! kind length  u32
//! kind         utf-8    "kl" | "tv" | "chi2"
//! delta        f64
//! points       u64
//! grid         points x f64
//! lowers       points x f64
//! uppers       points x f64
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::divergence::DivergenceKind;
use crate::error::{Error, Result};
use crate::solver::{batch_solve, RatioBounds, SolverConfig, TrustRegion};

const MAGIC: &[u8; 4] = b"BNDT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Spacing {
    Linear,
    /// Uniform in `ln p`.
    Logarithmic,
    /// Uniform in `ln(p / (1 - p))`; dense near both 0 and 1.
    LogOdds,
}

impl std::str::FromStr for Spacing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Spacing> {
        match s {
            "linear" => Ok(Spacing::Linear),
            "log" => Ok(Spacing::Logarithmic),
            "logit" => Ok(Spacing::LogOdds),
            other => Err(Error::Parse(format!(
                "unknown grid spacing `{other}` (expected linear, log or logit)"
            ))),
        }
    }
}

impl std::fmt::Display for Spacing {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Spacing::Linear => "linear",
            Spacing::Logarithmic => "log",
            Spacing::LogOdds => "logit",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub min_p: f64,
    pub max_p: f64,
    pub points: usize,
    pub spacing: Spacing,
}

impl Default for GridSpec {
    fn default() -> GridSpec {
        GridSpec {
            min_p: 1e-6,
            max_p: 1.0 - 1e-4,
            points: 4096,
            spacing: Spacing::LogOdds,
        }
    }
}

fn logit(p: f64) -> f64 {
    p.ln() - (-p).ln_1p()
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_p > 0.0 && self.max_p < 1.0 && self.min_p < self.max_p) {
            return Err(Error::Domain(format!(
                "grid range must satisfy 0 < min_p < max_p < 1, got [{}, {}]",
                self.min_p, self.max_p
            )));
        }
        if self.points < 2 {
            return Err(Error::Domain(format!(
                "grid needs at least 2 points, got {}",
                self.points
            )));
        }
        Ok(())
    }

    /// Grid points, with both endpoints exact.
    pub fn generate(&self) -> Result<Vec<f64>> {
        self.validate()?;
        let n = self.points;
        let last = (n - 1) as f64;
        let (a, b, to_p): (f64, f64, fn(f64) -> f64) = match self.spacing {
            Spacing::Linear => (self.min_p, self.max_p, |x| x),
            Spacing::Logarithmic => (self.min_p.ln(), self.max_p.ln(), f64::exp),
            Spacing::LogOdds => (logit(self.min_p), logit(self.max_p), logistic),
        };
        let mut grid: Vec<f64> = (0..n).map(|i| to_p(a + (b - a) * (i as f64 / last))).collect();
        grid[0] = self.min_p;
        grid[n - 1] = self.max_p;
        if grid.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Domain(format!(
                "{n} points over [{}, {}] exceed floating-point resolution",
                self.min_p, self.max_p
            )));
        }
        Ok(grid)
    }
}

/// Bounds tabulated on a probability grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundTable {
    kind: DivergenceKind,
    delta: f64,
    spec: GridSpec,
    grid: Vec<f64>,
    lowers: Vec<f64>,
    uppers: Vec<f64>,
}

pub fn build_table(tr: &TrustRegion, spec: &GridSpec, cfg: &SolverConfig) -> Result<BoundTable> {
    let grid = spec.generate()?;
    let bounds = batch_solve(tr, &grid, cfg).map_err(|err| match err {
        Error::AtIndex { index, source } => Error::TableBuild { p: grid[index], source },
        other => other,
    })?;
    let (lowers, uppers) = bounds.iter().map(|b| (b.lower, b.upper)).unzip();
    let table = BoundTable {
        kind: tr.kind(),
        delta: tr.delta(),
        spec: *spec,
        grid,
        lowers,
        uppers,
    };
    table.validate()?;
    Ok(table)
}

impl BoundTable {
    pub fn kind(&self) -> DivergenceKind {
        self.kind
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn lowers(&self) -> &[f64] {
        &self.lowers
    }

    pub fn uppers(&self) -> &[f64] {
        &self.uppers
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    /// Checks grid ordering, simplex consistency and monotonicity.
    pub fn validate(&self) -> Result<()> {
        let n = self.grid.len();
        if n < 2 || self.lowers.len() != n || self.uppers.len() != n {
            return Err(Error::Validation(format!(
                "need >= 2 points and equal column lengths (grid {n}, lowers {}, uppers {})",
                self.lowers.len(),
                self.uppers.len()
            )));
        }
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return Err(Error::Validation(format!(
                "delta must be finite and > 0, got {}",
                self.delta
            )));
        }
        for (i, ((&p, &lo), &up)) in self.grid.iter().zip(&self.lowers).zip(&self.uppers).enumerate() {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::Validation(format!("grid[{i}] = {p} outside (0, 1)")));
            }
            if !((0.0..=1.0).contains(&lo) && (1.0..=1.0 / p).contains(&up)) {
                return Err(Error::Validation(format!(
                    "entry {i} (p = {p}) violates 0 <= {lo} <= 1 <= {up} <= 1/p"
                )));
            }
        }
        for i in 1..n {
            if !(self.grid[i - 1] < self.grid[i]) {
                return Err(Error::Validation(format!("grid not strictly increasing at index {i}")));
            }
            if self.lowers[i] < self.lowers[i - 1] {
                return Err(Error::Validation(format!("lower bounds decrease at index {i}")));
            }
            if self.uppers[i] > self.uppers[i - 1] {
                return Err(Error::Validation(format!("upper bounds increase at index {i}")));
            }
        }
        Ok(())
    }

    /// Interpolated bounds at `p`. No extrapolation outside the grid.
    pub fn query(&self, p: f64) -> Result<RatioBounds> {
        let (min_p, max_p) = (self.grid[0], self.grid[self.grid.len() - 1]);
        if !(p >= min_p && p <= max_p) {
            return Err(Error::OutOfRange { p, min_p, max_p });
        }
        // first index with grid[hi] >= p
        let hi = self.grid.partition_point(|&x| x < p);
        if self.grid[hi] == p {
            return Ok(self.node(hi));
        }
        let lo = hi - 1;
        let (p0, p1) = (self.grid[lo], self.grid[hi]);
        let t = (p - p0) / (p1 - p0);
        let interp = |r0: f64, r1: f64| {
            let q = (1.0 - t) * (r0 * p0) + t * (r1 * p1);
            q / p
        };
        let r_max = 1.0 / p;
        let lower_saturated = self.lowers[lo] == 0.0 && self.lowers[hi] == 0.0;
        let upper_saturated = self.uppers[lo] == 1.0 / p0 && self.uppers[hi] == 1.0 / p1;
        let lower = if lower_saturated {
            0.0
        } else {
            interp(self.lowers[lo], self.lowers[hi]).clamp(self.lowers[lo], self.lowers[hi])
        };
        let upper = if upper_saturated {
            r_max
        } else {
            interp(self.uppers[lo], self.uppers[hi])
                .clamp(self.uppers[hi], self.uppers[lo])
                .min(r_max)
        };
        Ok(RatioBounds {
            lower: lower.min(1.0),
            upper: upper.max(1.0),
            lower_saturated,
            upper_saturated,
        })
    }

    fn node(&self, i: usize) -> RatioBounds {
        RatioBounds {
            lower: self.lowers[i],
            upper: self.uppers[i],
            lower_saturated: self.lowers[i] == 0.0,
            upper_saturated: self.uppers[i] == 1.0 / self.grid[i],
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let token = self.kind.token().as_bytes();
        let n = self.grid.len();
        let mut out = Vec::with_capacity(4 + 4 + 4 + token.len() + 8 + 8 + 24 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(token.len() as u32).to_le_bytes());
        out.extend_from_slice(token);
        out.extend_from_slice(&self.delta.to_le_bytes());
        out.extend_from_slice(&(n as u64).to_le_bytes());
        for column in [&self.grid, &self.lowers, &self.uppers] {
            for v in column.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses and re-validates a table. The grid spacing is recovered by
    /// regenerating each known spacing and comparing bit for bit.
    pub fn from_bytes(bytes: &[u8]) -> Result<BoundTable> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let len = cur.u32()? as usize;
        let token =
            std::str::from_utf8(cur.take(len)?).map_err(|_| Error::Format("divergence token is not utf-8".into()))?;
        let kind: DivergenceKind = token
            .parse()
            .map_err(|_| Error::Format(format!("unknown divergence `{token}`")))?;
        let delta = cur.f64()?;
        let n = usize::try_from(cur.u64()?).map_err(|_| Error::Format("point count overflows".into()))?;
        let expected = n
            .checked_mul(24)
            .ok_or_else(|| Error::Format("point count overflows".into()))?;
        if bytes.len() - cur.pos != expected {
            return Err(Error::Format(format!(
                "expected {expected} bytes of column data for {n} points, found {}",
                bytes.len() - cur.pos
            )));
        }
        let mut column = || (0..n).map(|_| cur.f64()).collect::<Result<Vec<f64>>>();
        let grid = column()?;
        let lowers = column()?;
        let uppers = column()?;
        if n < 2 {
            return Err(Error::Validation(format!("need >= 2 points, got {n}")));
        }
        let spec = detect_spacing(&grid)?;
        let table = BoundTable {
            kind,
            delta,
            spec,
            grid,
            lowers,
            uppers,
        };
        table.validate()?;
        Ok(table)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut file = fs::File::create(path)?;
        file.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<BoundTable> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        BoundTable::from_bytes(&bytes)
    }
}

fn detect_spacing(grid: &[f64]) -> Result<GridSpec> {
    let (min_p, max_p) = (grid[0], grid[grid.len() - 1]);
    for spacing in [Spacing::LogOdds, Spacing::Logarithmic, Spacing::Linear] {
        let spec = GridSpec {
            min_p,
            max_p,
            points: grid.len(),
            spacing,
        };
        if let Ok(generated) = spec.generate() {
            if generated.iter().zip(grid).all(|(a, b)| a.to_bits() == b.to_bits()) {
                return Ok(spec);
            }
        }
    }
    Err(Error::Validation(
        "grid does not match linear, log or logit spacing".into(),
    ))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn query_table(table: &BoundTable, p: f64) -> Result<RatioBounds> {
    table.query(p)
}

pub fn save_table(table: &BoundTable, path: impl AsRef<Path>) -> Result<()> {
    table.save(path)
}

pub fn load_table(path: impl AsRef<Path>) -> Result<BoundTable> {
    BoundTable::load(path)
}
