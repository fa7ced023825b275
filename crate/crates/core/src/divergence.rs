//! Convex generator functions for the supported f-divergences.
//!
//! Every generator satisfies `f(1) = 0`. KL and Pearson chi-squared are
//! strictly convex; total variation is convex with a kink at `u = 1` and is
//! only ever handled through its closed form.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A real number or `+∞`.
///
/// KL's generator diverges at zero, so `f_KL(0)` and anything built from it
/// is carried as [`ExtendedReal::PosInfinity`] instead of an IEEE infinity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExtendedReal {
    Finite(f64),
    PosInfinity,
}

impl ExtendedReal {
    pub fn is_finite(self) -> bool {
        matches!(self, ExtendedReal::Finite(_))
    }

    /// The finite value, or `None` for `+∞`.
    pub fn finite(self) -> Option<f64> {
        match self {
            ExtendedReal::Finite(v) => Some(v),
            ExtendedReal::PosInfinity => None,
        }
    }

    /// Lossy conversion to `f64`, mapping `+∞` to `f64::INFINITY`.
    pub fn to_f64(self) -> f64 {
        match self {
            ExtendedReal::Finite(v) => v,
            ExtendedReal::PosInfinity => f64::INFINITY,
        }
    }

    /// `self <= bound` for a finite bound.
    pub fn le(self, bound: f64) -> bool {
        match self {
            ExtendedReal::Finite(v) => v <= bound,
            ExtendedReal::PosInfinity => false,
        }
    }

    /// Scales by a nonnegative finite weight. `0 · ∞` is not defined and
    /// never arises in callers, which only weight by probabilities in (0, 1].
    pub fn scale(self, weight: f64) -> ExtendedReal {
        match self {
            ExtendedReal::Finite(v) => ExtendedReal::Finite(weight * v),
            ExtendedReal::PosInfinity => ExtendedReal::PosInfinity,
        }
    }
}

impl std::ops::Add for ExtendedReal {
    type Output = ExtendedReal;

    fn add(self, rhs: ExtendedReal) -> ExtendedReal {
        match (self, rhs) {
            (ExtendedReal::Finite(a), ExtendedReal::Finite(b)) => ExtendedReal::Finite(a + b),
            _ => ExtendedReal::PosInfinity,
        }
    }
}

impl PartialOrd for ExtendedReal {
    fn partial_cmp(&self, other: &ExtendedReal) -> Option<Ordering> {
        match (self, other) {
            (ExtendedReal::Finite(a), ExtendedReal::Finite(b)) => a.partial_cmp(b),
            (ExtendedReal::Finite(_), ExtendedReal::PosInfinity) => Some(Ordering::Less),
            (ExtendedReal::PosInfinity, ExtendedReal::Finite(_)) => Some(Ordering::Greater),
            (ExtendedReal::PosInfinity, ExtendedReal::PosInfinity) => Some(Ordering::Equal),
        }
    }
}

impl fmt::Display for ExtendedReal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExtendedReal::Finite(v) => write!(f, "{v}"),
            ExtendedReal::PosInfinity => f.write_str("+inf"),
        }
    }
}

/// The f-divergences with analyzed generators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DivergenceKind {
    /// `f(u) = u - 1 - ln u`
    #[serde(rename = "kl")]
    Kl,
    /// `f(u) = |u - 1| / 2`
    #[serde(rename = "tv")]
    Tv,
    /// `f(u) = (u - 1)^2`
    #[serde(rename = "chi2")]
    PearsonChi2,
}

impl DivergenceKind {
    pub const ALL: [DivergenceKind; 3] = [DivergenceKind::Kl, DivergenceKind::Tv, DivergenceKind::PearsonChi2];

    /// Lowercase token used on the command line and in table files.
    pub fn token(self) -> &'static str {
        match self {
            DivergenceKind::Kl => "kl",
            DivergenceKind::Tv => "tv",
            DivergenceKind::PearsonChi2 => "chi2",
        }
    }

    pub fn is_strictly_convex(self) -> bool {
        !matches!(self, DivergenceKind::Tv)
    }

    /// Evaluates the generator at `u >= 0`.
    pub fn eval_f(self, u: f64) -> Result<ExtendedReal> {
        if !(u >= 0.0) || !u.is_finite() {
            return Err(Error::Domain(format!(
                "generator argument must be finite and >= 0, got {u}"
            )));
        }
        Ok(self.eval_shifted(u - 1.0))
    }

    /// Evaluates `f(1 + x)` for `x >= -1` without forming `1 + x`.
    ///
    /// Near `u = 1` this keeps KL's `x - ln(1 + x)` free of cancellation.
    pub(crate) fn eval_shifted(self, x: f64) -> ExtendedReal {
        match self {
            DivergenceKind::Kl => {
                if x <= -1.0 {
                    ExtendedReal::PosInfinity
                } else {
                    ExtendedReal::Finite(x - x.ln_1p())
                }
            }
            DivergenceKind::Tv => ExtendedReal::Finite(0.5 * x.abs()),
            DivergenceKind::PearsonChi2 => ExtendedReal::Finite(x * x),
        }
    }

    /// First derivative at `u > 0`. TV has no derivative at `u = 1`.
    pub fn eval_f_prime(self, u: f64) -> Result<f64> {
        if !(u > 0.0) || !u.is_finite() {
            return Err(Error::Domain(format!(
                "derivative argument must be finite and > 0, got {u}"
            )));
        }
        match self {
            DivergenceKind::Kl => Ok(1.0 - 1.0 / u),
            DivergenceKind::Tv => match u.partial_cmp(&1.0) {
                Some(Ordering::Less) => Ok(-0.5),
                Some(Ordering::Greater) => Ok(0.5),
                _ => Err(Error::Kink),
            },
            DivergenceKind::PearsonChi2 => Ok(2.0 * (u - 1.0)),
        }
    }

    /// Second derivative at `u > 0`; zero almost everywhere for TV.
    pub fn eval_f_second(self, u: f64) -> Result<f64> {
        if !(u > 0.0) || !u.is_finite() {
            return Err(Error::Domain(format!(
                "derivative argument must be finite and > 0, got {u}"
            )));
        }
        match self {
            DivergenceKind::Kl => Ok(1.0 / (u * u)),
            DivergenceKind::Tv if u == 1.0 => Err(Error::Kink),
            DivergenceKind::Tv => Ok(0.0),
            DivergenceKind::PearsonChi2 => Ok(2.0),
        }
    }

    /// Asymptotic linear growth rate `lim f(u)/u` as `u -> ∞`.
    pub fn c_infinity(self) -> ExtendedReal {
        match self {
            DivergenceKind::Kl => ExtendedReal::Finite(1.0),
            DivergenceKind::Tv => ExtendedReal::Finite(0.5),
            DivergenceKind::PearsonChi2 => ExtendedReal::PosInfinity,
        }
    }
}

impl fmt::Display for DivergenceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for DivergenceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<DivergenceKind> {
        match s {
            "kl" => Ok(DivergenceKind::Kl),
            "tv" => Ok(DivergenceKind::Tv),
            "chi2" => Ok(DivergenceKind::PearsonChi2),
            other => Err(Error::Parse(format!(
                "unknown divergence `{other}` (expected kl, tv or chi2)"
            ))),
        }
    }
}

/// Free-function form of [`DivergenceKind::eval_f`].
pub fn eval_f(kind: DivergenceKind, u: f64) -> Result<ExtendedReal> {
    kind.eval_f(u)
}

/// Free-function form of [`DivergenceKind::eval_f_prime`].
pub fn eval_f_prime(kind: DivergenceKind, u: f64) -> Result<f64> {
    kind.eval_f_prime(u)
}

/// Free-function form of [`DivergenceKind::c_infinity`].
pub fn c_infinity(kind: DivergenceKind) -> ExtendedReal {
    kind.c_infinity()
}
