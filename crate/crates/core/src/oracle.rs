//! Brute-force extremal ratios over the full probability simplex.
//!
//! For a small vocabulary this solves
//!
//! ```text
//! max / min  Q(a) / P(a)   subject to  D_f(Q || P) <= delta,  Q in simplex
//! ```
//!
//! directly: an outer bisection on the target ratio `r`, where each candidate
//! is feasible iff the best allocation of the remaining mass `1 - r p` over
//! the other actions keeps the divergence within `delta`. That inner problem
//! is solved by exponentiated-gradient (mirror) descent from a randomly
//! perturbed start. Nothing here assumes the complement is rescaled
//! uniformly; the optimizer's complement ratio spread reports whether it was.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::divergence::{DivergenceKind, ExtendedReal};
use crate::error::{Error, Result};
use crate::solver::{solve_bounds, SolverConfig, TrustRegion};

/// A probability vector over `V >= 2` actions.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    probs: Vec<f64>,
}

const SUM_TOLERANCE: f64 = 1e-12;

impl Distribution {
    /// A full-support distribution: every entry strictly positive.
    pub fn new(probs: Vec<f64>) -> Result<Distribution> {
        let d = Distribution::on_simplex(probs)?;
        if !d.has_full_support() {
            return Err(Error::Domain("distribution must have full support".into()));
        }
        Ok(d)
    }

    /// A point on the simplex; zero entries allowed.
    pub fn on_simplex(probs: Vec<f64>) -> Result<Distribution> {
        if probs.len() < 2 {
            return Err(Error::Domain(format!(
                "distribution needs at least 2 entries, got {}",
                probs.len()
            )));
        }
        if probs.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(Error::Domain("distribution entries must be finite and >= 0".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::Domain(format!("distribution sums to {sum}, not 1")));
        }
        Ok(Distribution { probs })
    }

    /// Normalizes positive weights.
    pub fn from_weights(weights: &[f64]) -> Result<Distribution> {
        let total: f64 = weights.iter().sum();
        Distribution::new(weights.iter().map(|w| w / total).collect())
    }

    pub fn uniform(size: usize) -> Result<Distribution> {
        Distribution::from_weights(&vec![1.0; size])
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn has_full_support(&self) -> bool {
        self.probs.iter().all(|&x| x > 0.0)
    }
}

/// `D_f(Q || P) = sum_a P(a) f(Q(a) / P(a))`.
pub fn divergence_full(kind: DivergenceKind, q: &Distribution, p: &Distribution) -> Result<ExtendedReal> {
    if q.len() != p.len() {
        return Err(Error::Domain(format!("size mismatch: {} vs {}", q.len(), p.len())));
    }
    if !p.has_full_support() {
        return Err(Error::Domain("reference distribution must have full support".into()));
    }
    q.probs
        .iter()
        .zip(&p.probs)
        .try_fold(ExtendedReal::Finite(0.0), |acc, (&qa, &pa)| {
            Ok(acc + kind.eval_f(qa / pa)?.scale(pa))
        })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleConfig {
    /// Bracket width at which the outer bisection on `r` stops.
    pub outer_tolerance: f64,
    /// Largest log-ratio change of the next mirror step at which the inner
    /// minimization counts as converged.
    pub inner_tolerance: f64,
    pub max_inner_iterations: usize,
    /// Relative size of the random perturbation of the inner starting point.
    pub perturbation: f64,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> OracleConfig {
        OracleConfig {
            outer_tolerance: 1e-7,
            inner_tolerance: 1e-9,
            max_inner_iterations: 100_000,
            perturbation: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub r_min: f64,
    pub r_max: f64,
    /// Optimizer at `r_max`.
    pub q_star_max: Distribution,
    /// `max - min` of `Q*(b) / P(b)` over `b != a` at `r_max`.
    pub complement_ratio_spread: f64,
    /// The same spread at `r_min`.
    pub lower_complement_ratio_spread: f64,
    pub lower_saturated: bool,
    pub upper_saturated: bool,
}

/// Allocation of the non-target mass and its divergence contribution.
struct Allocation {
    q: Vec<f64>,
    value: ExtendedReal,
}

struct Problem<'a> {
    kind: DivergenceKind,
    reference: &'a [f64],
    target: usize,
    cfg: &'a OracleConfig,
}

impl Problem<'_> {
    fn p(&self) -> f64 {
        self.reference[self.target]
    }

    /// Full divergence at target ratio `r`, minimized over the complement.
    fn evaluate(&self, r: f64, rng: &mut ChaCha8Rng) -> Result<Allocation> {
        let p = self.p();
        let mass = (1.0 - r * p).max(0.0);
        let complement: Vec<f64> = self
            .reference
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != self.target)
            .map(|(_, &x)| x)
            .collect();
        let target_term = self.kind.eval_f(r)?.scale(p);
        let q_complement = if mass == 0.0 {
            vec![0.0; complement.len()]
        } else if complement.len() == 1 {
            vec![mass]
        } else {
            self.minimize_complement(&complement, mass, rng)?
        };
        let mut value = target_term;
        for (&q, &pb) in q_complement.iter().zip(&complement) {
            value = value + self.kind.eval_f(q / pb)?.scale(pb);
        }
        let mut q = Vec::with_capacity(self.reference.len());
        let mut it = q_complement.into_iter();
        for i in 0..self.reference.len() {
            q.push(if i == self.target { r * p } else { it.next().unwrap() });
        }
        Ok(Allocation { q, value })
    }

    /// `f'(u)` up to an additive constant. Constants cancel against the mean
    /// in the mirror step, and dropping them keeps tiny ratios resolvable
    /// (e.g. `2(u - 1)` cannot distinguish `u` values near 1e-16).
    fn slope(&self, u: f64) -> Result<f64> {
        match self.kind {
            DivergenceKind::Kl => Ok(-1.0 / u),
            DivergenceKind::PearsonChi2 => Ok(2.0 * u),
            DivergenceKind::Tv => Err(Error::UnsupportedKind(DivergenceKind::Tv)),
        }
    }

    /// Minimizes `sum_b P(b) f(q_b / P(b))` over `q >= 0`, `sum q = mass` by
    /// exponentiated-gradient steps. The step is the inverse of the largest
    /// curvature in log coordinates, `max_b u_b f''(u_b)`.
    fn minimize_complement(&self, complement: &[f64], mass: f64, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let mut q: Vec<f64> = complement
            .iter()
            .map(|&pb| {
                let noise = 1.0 + self.cfg.perturbation * (2.0 * rng.random::<f64>() - 1.0);
                pb * noise
            })
            .collect();
        normalize(&mut q, mass);

        let mut grad = vec![0.0; q.len()];
        for _ in 0..self.cfg.max_inner_iterations {
            let mut max_curvature: f64 = 0.0;
            for ((g, &qb), &pb) in grad.iter_mut().zip(&q).zip(complement) {
                let u = qb / pb;
                *g = self.slope(u)?;
                max_curvature = max_curvature.max(u * self.kind.eval_f_second(u)?);
            }
            let mean: f64 = grad.iter().zip(&q).map(|(g, qb)| g * qb).sum::<f64>() / mass;
            let step = 1.0 / max_curvature;
            // size of the mirror step, i.e. the gradient measured in log-ratio units
            let deviation = grad.iter().map(|g| (g - mean).abs()).fold(0.0, f64::max) * step;
            if deviation < self.cfg.inner_tolerance {
                return Ok(q);
            }
            for (qb, g) in q.iter_mut().zip(&grad) {
                *qb *= (-step * (g - mean)).exp();
            }
            normalize(&mut q, mass);
        }
        Err(Error::Oracle(format!(
            "inner mirror descent did not converge in {} iterations",
            self.cfg.max_inner_iterations
        )))
    }
}

fn normalize(q: &mut [f64], mass: f64) {
    let total: f64 = q.iter().sum();
    for x in q.iter_mut() {
        *x *= mass / total;
    }
}

fn complement_spread(q: &[f64], reference: &[f64], target: usize) -> f64 {
    let ratios = q
        .iter()
        .zip(reference)
        .enumerate()
        .filter(|&(i, _)| i != target)
        .map(|(_, (&qb, &pb))| qb / pb);
    let (lo, hi) = ratios.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
    hi - lo
}

/// Solves both extremal problems for action `target` of `reference`.
pub fn solve_extremal_full(
    kind: DivergenceKind,
    delta: f64,
    reference: &Distribution,
    target: usize,
    cfg: &OracleConfig,
) -> Result<OracleResult> {
    if !kind.is_strictly_convex() {
        return Err(Error::Precondition(format!(
            "{kind} is not smooth; the oracle handles kl and chi2 only"
        )));
    }
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::Domain(format!(
            "trust-region radius must be finite and > 0, got {delta}"
        )));
    }
    if !reference.has_full_support() {
        return Err(Error::Domain("reference distribution must have full support".into()));
    }
    if target >= reference.len() {
        return Err(Error::Domain(format!(
            "action {target} out of range for V = {}",
            reference.len()
        )));
    }
    if reference.len() > 64 {
        return Err(Error::Domain(format!(
            "oracle supports V <= 64, got {}",
            reference.len()
        )));
    }
    let problem = Problem {
        kind,
        reference: &reference.probs,
        target,
        cfg,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let p = problem.p();
    let r_cap = 1.0 / p;

    // upper: feasible set is [.., r_max] with 1 always feasible
    let at_cap = problem.evaluate(r_cap, &mut rng)?;
    let (r_max, q_max, upper_saturated) = if at_cap.value.le(delta) {
        (r_cap, at_cap.q, true)
    } else {
        let mut best = problem.evaluate(1.0, &mut rng)?;
        let (mut lo, mut hi) = (1.0, r_cap);
        while hi - lo > cfg.outer_tolerance {
            let mid = 0.5 * (lo + hi);
            let alloc = problem.evaluate(mid, &mut rng)?;
            if alloc.value.le(delta) {
                lo = mid;
                best = alloc;
            } else {
                hi = mid;
            }
        }
        (lo, best.q, false)
    };

    let at_zero = problem.evaluate(0.0, &mut rng)?;
    let (r_min, q_min, lower_saturated) = if at_zero.value.le(delta) {
        (0.0, at_zero.q, true)
    } else {
        let mut best = problem.evaluate(1.0, &mut rng)?;
        let (mut lo, mut hi) = (0.0, 1.0);
        while hi - lo > cfg.outer_tolerance {
            let mid = 0.5 * (lo + hi);
            let alloc = problem.evaluate(mid, &mut rng)?;
            if alloc.value.le(delta) {
                hi = mid;
                best = alloc;
            } else {
                lo = mid;
            }
        }
        (hi, best.q, false)
    };

    Ok(OracleResult {
        r_min,
        r_max,
        complement_ratio_spread: complement_spread(&q_max, &reference.probs, target),
        lower_complement_ratio_spread: complement_spread(&q_min, &reference.probs, target),
        q_star_max: Distribution { probs: q_max },
        lower_saturated,
        upper_saturated,
    })
}

/// True iff the optimizer rescaled the complement uniformly, to within `tol`.
pub fn verify_complement_rescaling(result: &OracleResult, tol: f64) -> bool {
    result.complement_ratio_spread <= tol
}

/// Thresholds for one verification case.
pub const BOUND_RESIDUAL_LIMIT: f64 = 1e-5;
pub const SPREAD_LIMIT: f64 = 1e-4;
pub const FEASIBILITY_SLACK: f64 = 1e-8;

#[derive(Debug, Clone, Serialize)]
pub struct CaseReport {
    pub case: usize,
    pub kind: DivergenceKind,
    pub size: usize,
    pub action: usize,
    pub p: f64,
    pub delta: f64,
    pub oracle_upper: f64,
    pub scalar_upper: f64,
    pub oracle_lower: f64,
    pub scalar_lower: f64,
    /// Larger of the two bound discrepancies.
    pub residual: f64,
    /// Larger of the two complement spreads.
    pub spread: f64,
    /// `D_f(Q* || P) - delta` at the upper optimizer.
    pub feasibility_excess: f64,
    pub interior: bool,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub cases: Vec<CaseReport>,
    pub max_residual: f64,
    pub max_spread: f64,
}

impl VerifyReport {
    pub fn passed(&self) -> usize {
        self.cases.iter().filter(|c| c.pass).count()
    }

    pub fn all_passed(&self) -> bool {
        self.passed() == self.cases.len()
    }
}

/// Randomized scalarization check: KL and chi-squared alternately,
/// `V in {3, 5, 10}`, `delta in {0.01, 0.05, 0.1}`, random `P` and action.
///
/// `scalar_offset` is added to every scalarized bound before comparison; it is
/// zero except when deliberately exercising the failure path.
pub fn run_verification(seed: u64, cases: usize, scalar_offset: f64) -> Result<VerifyReport> {
    const SIZES: [usize; 3] = [3, 5, 10];
    const DELTAS: [f64; 3] = [0.01, 0.05, 0.1];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let solver_cfg = SolverConfig::default();
    let mut reports = Vec::with_capacity(cases);
    for case in 0..cases {
        let kind = if case % 2 == 0 {
            DivergenceKind::Kl
        } else {
            DivergenceKind::PearsonChi2
        };
        let size = SIZES[rng.random_range(0..SIZES.len())];
        let delta = DELTAS[rng.random_range(0..DELTAS.len())];
        let weights: Vec<f64> = (0..size).map(|_| rng.random_range(0.05..1.0)).collect();
        let reference = Distribution::from_weights(&weights)?;
        let action = rng.random_range(0..size);
        let cfg = OracleConfig {
            seed: rng.random(),
            ..OracleConfig::default()
        };
        let oracle = solve_extremal_full(kind, delta, &reference, action, &cfg)?;
        let p = reference.probs[action];
        let scalar = solve_bounds(&TrustRegion::new(kind, delta)?, p, &solver_cfg)?;
        let scalar_upper = scalar.upper + scalar_offset;
        let scalar_lower = scalar.lower + scalar_offset;
        let residual = (oracle.r_max - scalar_upper)
            .abs()
            .max((oracle.r_min - scalar_lower).abs());
        let spread = oracle.complement_ratio_spread.max(oracle.lower_complement_ratio_spread);
        let feasibility_excess = divergence_full(kind, &oracle.q_star_max, &reference)?.to_f64() - delta;
        let interior = oracle.upper_saturated || oracle.q_star_max.has_full_support();
        let pass = residual < BOUND_RESIDUAL_LIMIT
            && spread < SPREAD_LIMIT
            && feasibility_excess <= FEASIBILITY_SLACK
            && interior;
        reports.push(CaseReport {
            case,
            kind,
            size,
            action,
            p,
            delta,
            oracle_upper: oracle.r_max,
            scalar_upper,
            oracle_lower: oracle.r_min,
            scalar_lower,
            residual,
            spread,
            feasibility_excess,
            interior,
            pass,
        });
    }
    let max_residual = reports.iter().map(|c| c.residual).fold(0.0, f64::max);
    let max_spread = reports.iter().map(|c| c.spread).fold(0.0, f64::max);
    Ok(VerifyReport {
        seed,
        cases: reports,
        max_residual,
        max_spread,
    })
}
