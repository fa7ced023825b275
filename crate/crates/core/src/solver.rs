//! Ratio bounds obtained by projecting an f-divergence trust region onto the
//! target action's probability ratio.
//!
//! Uniformly rescaling the complement of the target action reduces the
//! trust-region constraint to the scalar inequality `g(p, r) <= delta` with
//!
//! ```text
//! g(p, r) = p f(r) + (1 - p) f((1 - r p) / (1 - p)),   r in [0, 1/p]
//! ```
//!
//! `g` is convex in `r` with minimum `0` at `r = 1`, so the bounds are the two
//! roots of `g = delta` on either side of `1`, or the simplex limits `0` and
//! `1/p` when the trust region reaches past them (saturation).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::divergence::{DivergenceKind, ExtendedReal};
use crate::error::{Error, Result};

/// Divergence kind plus radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrustRegion {
    kind: DivergenceKind,
    delta: f64,
}

impl TrustRegion {
    pub fn new(kind: DivergenceKind, delta: f64) -> Result<TrustRegion> {
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(Error::Domain(format!(
                "trust-region radius must be finite and > 0, got {delta}"
            )));
        }
        Ok(TrustRegion { kind, delta })
    }

    pub fn kind(&self) -> DivergenceKind {
        self.kind
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }
}

/// Bisection settings. `tolerance` is the bracket width at which iteration
/// stops.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl SolverConfig {
    pub fn new(tolerance: f64, max_iterations: usize) -> Result<SolverConfig> {
        if !(tolerance > 0.0) || !tolerance.is_finite() {
            return Err(Error::Domain(format!(
                "solver tolerance must be finite and > 0, got {tolerance}"
            )));
        }
        if max_iterations == 0 {
            return Err(Error::Domain("max_iterations must be positive".into()));
        }
        Ok(SolverConfig {
            tolerance,
            max_iterations,
        })
    }
}

impl Default for SolverConfig {
    fn default() -> SolverConfig {
        SolverConfig {
            tolerance: 1e-10,
            max_iterations: 200,
        }
    }
}

/// Lower and upper ratio bounds for one action probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioBounds {
    pub lower: f64,
    pub upper: f64,
    pub lower_saturated: bool,
    pub upper_saturated: bool,
}

impl RatioBounds {
    /// Checks `0 <= lower <= 1 <= upper <= 1/p` and the saturation flags.
    pub fn is_consistent(&self, p: f64) -> bool {
        let r_max = 1.0 / p;
        0.0 <= self.lower
            && self.lower <= 1.0
            && 1.0 <= self.upper
            && self.upper <= r_max
            && (!self.lower_saturated || self.lower == 0.0)
            && (!self.upper_saturated || self.upper == r_max)
    }

    pub fn clip(&self, ratio: f64) -> f64 {
        ratio.clamp(self.lower, self.upper)
    }
}

pub(crate) fn check_probability(p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("probability must lie in (0, 1), got {p}")))
    }
}

/// The scalarized divergence `g(p, r)`.
pub fn g_scalar(kind: DivergenceKind, p: f64, r: f64) -> Result<ExtendedReal> {
    check_probability(p)?;
    let r_max = 1.0 / p;
    if !(r >= 0.0 && r <= r_max) {
        return Err(Error::Domain(format!(
            "ratio must lie in [0, 1/p] = [0, {r_max}], got {r}"
        )));
    }
    Ok(g_unchecked(kind, p, r))
}

/// `g(p, r)` without argument validation. The complement term is evaluated
/// through `c - 1 = p (1 - r) / (1 - p)`, which is exact at `r = 1`.
fn g_unchecked(kind: DivergenceKind, p: f64, r: f64) -> ExtendedReal {
    let complement_shift = if r == 1.0 / p { -1.0 } else { p * (1.0 - r) / (1.0 - p) };
    let target = kind.eval_shifted(r - 1.0).scale(p);
    let complement = kind.eval_shifted(complement_shift).scale(1.0 - p);
    target + complement
}

/// Bisection for the upper root on `[1, 1/p]`.
///
/// Keeps the invariant `g(L) <= delta < g(R)` and returns `L`, so the result
/// never leaves the trust region.
pub fn bisect_upper(kind: DivergenceKind, delta: f64, p: f64, cfg: &SolverConfig) -> Result<f64> {
    check_bisection_args(kind, delta, p)?;
    let r_max = 1.0 / p;
    if g_unchecked(kind, p, r_max).le(delta) {
        return Err(Error::Precondition(format!(
            "upper bound is saturated at p = {p}, delta = {delta}; no interior root"
        )));
    }
    let (mut lo, mut hi) = (1.0, r_max);
    let mut iterations = 0;
    while hi - lo >= cfg.tolerance {
        if iterations == cfg.max_iterations {
            return Err(Error::Convergence {
                tolerance: cfg.tolerance,
                max_iterations: cfg.max_iterations,
            });
        }
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            // bracket is down to adjacent floats
            break;
        }
        if g_unchecked(kind, p, mid).le(delta) {
            lo = mid;
        } else {
            hi = mid;
        }
        iterations += 1;
    }
    Ok(lo)
}

/// Bisection for the lower root on `[0, 1]`, returning `R`. The update rule
/// is mirrored relative to [`bisect_upper`] because `g` decreases here.
pub fn bisect_lower(kind: DivergenceKind, delta: f64, p: f64, cfg: &SolverConfig) -> Result<f64> {
    check_bisection_args(kind, delta, p)?;
    if g_unchecked(kind, p, 0.0).le(delta) {
        return Err(Error::Precondition(format!(
            "lower bound is saturated at p = {p}, delta = {delta}; no interior root"
        )));
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    let mut iterations = 0;
    while hi - lo >= cfg.tolerance {
        if iterations == cfg.max_iterations {
            return Err(Error::Convergence {
                tolerance: cfg.tolerance,
                max_iterations: cfg.max_iterations,
            });
        }
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if g_unchecked(kind, p, mid).le(delta) {
            hi = mid;
        } else {
            lo = mid;
        }
        iterations += 1;
    }
    Ok(hi)
}

fn check_bisection_args(kind: DivergenceKind, delta: f64, p: f64) -> Result<()> {
    check_probability(p)?;
    if !kind.is_strictly_convex() {
        return Err(Error::Precondition(format!(
            "{kind} is not strictly convex; use the closed form"
        )));
    }
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::Domain(format!(
            "trust-region radius must be finite and > 0, got {delta}"
        )));
    }
    Ok(())
}

/// Closed-form bounds for TV and Pearson chi-squared, clamped to `[0, 1/p]`.
pub fn closed_form_bounds(kind: DivergenceKind, delta: f64, p: f64) -> Result<RatioBounds> {
    check_probability(p)?;
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::Domain(format!(
            "trust-region radius must be finite and > 0, got {delta}"
        )));
    }
    let r_max = 1.0 / p;
    // g at the simplex limits and the half-width of the band, both in closed form
    let (g_at_zero, g_at_max, half_width) = match kind {
        DivergenceKind::Tv => (p, 1.0 - p, delta / p),
        DivergenceKind::PearsonChi2 => (p / (1.0 - p), (1.0 - p) / p, (delta * (1.0 - p) / p).sqrt()),
        DivergenceKind::Kl => return Err(Error::UnsupportedKind(kind)),
    };
    let lower_saturated = g_at_zero <= delta;
    let upper_saturated = g_at_max <= delta;
    let lower = if lower_saturated {
        0.0
    } else {
        (1.0 - half_width).max(0.0)
    };
    let upper = if upper_saturated {
        r_max
    } else {
        (1.0 + half_width).min(r_max)
    };
    Ok(RatioBounds {
        lower,
        upper,
        lower_saturated,
        upper_saturated,
    })
}

/// Bounds through the saturation check and bisection, for strictly convex
/// kinds. [`solve_bounds`] uses this for KL; it is public so the closed forms
/// can be cross-checked against it.
pub fn solve_bounds_numeric(kind: DivergenceKind, delta: f64, p: f64, cfg: &SolverConfig) -> Result<RatioBounds> {
    check_bisection_args(kind, delta, p)?;
    let r_max = 1.0 / p;
    let upper_saturated = g_unchecked(kind, p, r_max).le(delta);
    let lower_saturated = g_unchecked(kind, p, 0.0).le(delta);
    let upper = if upper_saturated {
        r_max
    } else {
        bisect_upper(kind, delta, p, cfg)?
    };
    let lower = if lower_saturated {
        0.0
    } else {
        bisect_lower(kind, delta, p, cfg)?
    };
    Ok(RatioBounds {
        lower,
        upper,
        lower_saturated,
        upper_saturated,
    })
}

/// Ratio bounds for action probability `p` under `tr`.
pub fn solve_bounds(tr: &TrustRegion, p: f64, cfg: &SolverConfig) -> Result<RatioBounds> {
    match tr.kind {
        DivergenceKind::Tv | DivergenceKind::PearsonChi2 => closed_form_bounds(tr.kind, tr.delta, p),
        DivergenceKind::Kl => solve_bounds_numeric(tr.kind, tr.delta, p, cfg),
    }
}

/// `lim_{p -> 1} lower(p)`, the root of `f(r) + (1 - r) C_inf = delta`.
pub fn asymptotic_lower_limit(kind: DivergenceKind, delta: f64) -> Result<f64> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::Domain(format!(
            "trust-region radius must be finite and > 0, got {delta}"
        )));
    }
    Ok(match kind {
        DivergenceKind::Kl => (-delta).exp(),
        DivergenceKind::Tv => (1.0 - delta).max(0.0),
        DivergenceKind::PearsonChi2 => 1.0,
    })
}

/// [`solve_bounds`] over a slice, in parallel, preserving order. The first
/// failing element (by index) determines the error.
pub fn batch_solve(tr: &TrustRegion, ps: &[f64], cfg: &SolverConfig) -> Result<Vec<RatioBounds>> {
    let results: Vec<Result<RatioBounds>> = ps.par_iter().map(|&p| solve_bounds(tr, p, cfg)).collect();
    results
        .into_iter()
        .enumerate()
        .map(|(index, res)| {
            res.map_err(|source| Error::AtIndex {
                index,
                source: Box::new(source),
            })
        })
        .collect()
}

/// Batch entry point over flat buffers: divergence token, radius,
/// probabilities and tolerance in, `(lowers, uppers)` out.
pub fn band_bounds_batch(kind: &str, delta: f64, probs: &[f64], tolerance: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let tr = TrustRegion::new(kind.parse()?, delta)?;
    let cfg = SolverConfig::new(tolerance, SolverConfig::default().max_iterations)?;
    let bounds = batch_solve(&tr, probs, &cfg)?;
    Ok(bounds.iter().map(|b| (b.lower, b.upper)).unzip())
}
