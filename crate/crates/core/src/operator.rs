//! Ratio clipping modes and the clipped per-token surrogate objective.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::solver::{solve_bounds, RatioBounds, SolverConfig, TrustRegion};

/// How the importance ratio is clipped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClipMode {
    /// `[1 - eps, 1 + eps]`
    FixedSymmetric(f64),
    /// `[1 - low, 1 + high]`, the Clip-Higher baseline when `high > low`.
    FixedAsymmetric { low: f64, high: f64 },
    /// Bounds projected from a trust region at the old probability.
    Band(TrustRegion),
    /// Band bounds with the upper bound raised to at least `1 + high`.
    RelaxedBand { region: TrustRegion, high: f64 },
}

impl ClipMode {
    pub fn fixed_symmetric(eps: f64) -> Result<ClipMode> {
        check_eps(eps)?;
        Ok(ClipMode::FixedSymmetric(eps))
    }

    pub fn fixed_asymmetric(low: f64, high: f64) -> Result<ClipMode> {
        check_eps(low)?;
        check_eps(high)?;
        Ok(ClipMode::FixedAsymmetric { low, high })
    }

    pub fn relaxed_band(region: TrustRegion, high: f64) -> Result<ClipMode> {
        check_eps(high)?;
        Ok(ClipMode::RelaxedBand { region, high })
    }

    /// Clipping interval for an action whose old probability is `old_prob`.
    pub fn bounds(&self, old_prob: f64, cfg: &SolverConfig) -> Result<RatioBounds> {
        match *self {
            ClipMode::FixedSymmetric(eps) => Ok(fixed(eps, eps)),
            ClipMode::FixedAsymmetric { low, high } => Ok(fixed(low, high)),
            ClipMode::Band(region) => solve_bounds(&region, old_prob, cfg),
            ClipMode::RelaxedBand { region, high } => {
                let mut bounds = solve_bounds(&region, old_prob, cfg)?;
                let relaxed = 1.0 + high;
                if relaxed > bounds.upper {
                    bounds.upper = relaxed;
                    bounds.upper_saturated = false;
                }
                Ok(bounds)
            }
        }
    }
}

fn fixed(low: f64, high: f64) -> RatioBounds {
    RatioBounds {
        lower: 1.0 - low,
        upper: 1.0 + high,
        lower_saturated: false,
        upper_saturated: false,
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("clip range must be finite and > 0, got {eps}")))
    }
}

impl fmt::Display for ClipMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClipMode::FixedSymmetric(eps) => write!(f, "clip:{eps}"),
            ClipMode::FixedAsymmetric { low, high } => write!(f, "clip:{low}:{high}"),
            ClipMode::Band(region) => write!(f, "band:{}:{}", region.kind(), region.delta()),
            ClipMode::RelaxedBand { region, high } => {
                write!(f, "relaxed-band:{}:{}:{high}", region.kind(), region.delta())
            }
        }
    }
}

impl FromStr for ClipMode {
    type Err = Error;

    /// Parses `clip:EPS`, `clip:LOW:HIGH`, `band:KIND:DELTA` or
    /// `relaxed-band:KIND:DELTA:HIGH`.
    fn from_str(s: &str) -> Result<ClipMode> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |t: &str| -> Result<f64> {
            t.parse::<f64>()
                .map_err(|_| Error::Parse(format!("`{t}` is not a number in clip mode `{s}`")))
        };
        match parts.as_slice() {
            ["clip", eps] => ClipMode::fixed_symmetric(num(eps)?),
            ["clip", low, high] => ClipMode::fixed_asymmetric(num(low)?, num(high)?),
            ["band", kind, delta] => Ok(ClipMode::Band(TrustRegion::new(kind.parse()?, num(delta)?)?)),
            ["relaxed-band", kind, delta, high] => {
                ClipMode::relaxed_band(TrustRegion::new(kind.parse()?, num(delta)?)?, num(high)?)
            }
            _ => Err(Error::Parse(format!(
                "unrecognized clip mode `{s}` (expected clip:EPS, clip:LOW:HIGH, band:KIND:DELTA \
                 or relaxed-band:KIND:DELTA:HIGH)"
            ))),
        }
    }
}

/// Per-token inputs to the surrogate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenContext {
    pub ratio: f64,
    pub old_prob: f64,
    pub advantage: f64,
    /// Per-token KL to the reference policy, computed by the caller.
    pub kl_penalty: f64,
    pub beta: f64,
}

impl TokenContext {
    pub fn new(ratio: f64, old_prob: f64, advantage: f64) -> TokenContext {
        TokenContext {
            ratio,
            old_prob,
            advantage,
            kl_penalty: 0.0,
            beta: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ratio >= 0.0) || !self.ratio.is_finite() {
            return Err(Error::Domain(format!(
                "ratio must be finite and >= 0, got {}",
                self.ratio
            )));
        }
        crate::solver::check_probability(self.old_prob)?;
        if !self.advantage.is_finite() {
            return Err(Error::Domain(format!(
                "advantage must be finite, got {}",
                self.advantage
            )));
        }
        if !(self.kl_penalty >= 0.0) || !(self.beta >= 0.0) {
            return Err(Error::Domain("kl_penalty and beta must be >= 0".into()));
        }
        Ok(())
    }
}

/// Result of clipping one ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipOutcome {
    pub clipped_ratio: f64,
    pub bounds: RatioBounds,
    pub clipped_high: bool,
    pub clipped_low: bool,
}

impl ClipOutcome {
    /// Derivative of `min(r A, clip(r) A)` with respect to `r`, with the
    /// clipped branch treated as a constant.
    pub fn surrogate_slope(&self, ratio: f64, advantage: f64) -> f64 {
        if ratio * advantage <= self.clipped_ratio * advantage {
            advantage
        } else {
            0.0
        }
    }
}

pub fn clip_ratio(mode: &ClipMode, ctx: &TokenContext, cfg: &SolverConfig) -> Result<ClipOutcome> {
    ctx.validate()?;
    let bounds = mode.bounds(ctx.old_prob, cfg)?;
    Ok(ClipOutcome {
        clipped_ratio: bounds.clip(ctx.ratio),
        bounds,
        clipped_high: ctx.ratio > bounds.upper,
        clipped_low: ctx.ratio < bounds.lower,
    })
}

/// `min(r A, clip(r) A) - beta * kl_penalty`.
pub fn token_objective(mode: &ClipMode, ctx: &TokenContext, cfg: &SolverConfig) -> Result<f64> {
    let outcome = clip_ratio(mode, ctx, cfg)?;
    let surrogate = (ctx.ratio * ctx.advantage).min(outcome.clipped_ratio * ctx.advantage);
    Ok(surrogate - ctx.beta * ctx.kl_penalty)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::divergence::DivergenceKind;
    use proptest::prelude::*;

    fn cfg() -> SolverConfig {
        SolverConfig::default()
    }

    fn band(kind: DivergenceKind, delta: f64) -> ClipMode {
        ClipMode::Band(TrustRegion::new(kind, delta).unwrap())
    }

    #[test]
    fn clip_higher_caps_ratio() {
        let mode = ClipMode::fixed_asymmetric(0.2, 0.28).unwrap();
        let out = clip_ratio(&mode, &TokenContext::new(1.5, 0.3, 1.0), &cfg()).unwrap();
        assert!((out.clipped_ratio - 1.28).abs() < 1e-15);
        assert!(out.clipped_high && !out.clipped_low);
    }

    #[test]
    fn unit_ratio_is_never_clipped() {
        let mode = band(DivergenceKind::Kl, 0.05);
        for &p in &[1e-4, 0.01, 0.3, 0.9, 0.9999] {
            let out = clip_ratio(&mode, &TokenContext::new(1.0, p, 1.0), &cfg()).unwrap();
            assert_eq!(out.clipped_ratio, 1.0);
            assert!(!out.clipped_high && !out.clipped_low);
        }
    }

    #[test]
    fn tv_band_leaves_room_for_tail_tokens() {
        let out = clip_ratio(
            &band(DivergenceKind::Tv, 0.1),
            &TokenContext::new(2.0, 0.08, 1.0),
            &cfg(),
        )
        .unwrap();
        assert_eq!(out.bounds.lower, 0.0);
        assert!((out.bounds.upper - 2.25).abs() < 1e-12);
        assert_eq!(out.clipped_ratio, 2.0);
        assert!(!out.clipped_high);
    }

    #[test]
    fn token_objective_examples() {
        let clip = ClipMode::fixed_asymmetric(0.2, 0.28).unwrap();
        for mode in [
            clip,
            band(DivergenceKind::Kl, 0.05),
            ClipMode::fixed_symmetric(0.2).unwrap(),
        ] {
            let v = token_objective(&mode, &TokenContext::new(1.0, 0.4, 1.0), &cfg()).unwrap();
            assert_eq!(v, 1.0);
        }
        let v = token_objective(&clip, &TokenContext::new(1.5, 0.4, 2.0), &cfg()).unwrap();
        assert!((v - 2.56).abs() < 1e-12);
        let v = token_objective(&clip, &TokenContext::new(0.5, 0.4, -1.0), &cfg()).unwrap();
        assert!((v + 0.8).abs() < 1e-12);
        let ctx = TokenContext {
            kl_penalty: 0.5,
            beta: 0.1,
            ..TokenContext::new(1.0, 0.4, 1.0)
        };
        assert!((token_objective(&clip, &ctx, &cfg()).unwrap() - 0.95).abs() < 1e-15);
    }

    #[test]
    fn relaxed_band_raises_only_the_upper_bound() {
        let region = TrustRegion::new(DivergenceKind::Kl, 0.05).unwrap();
        let relaxed = ClipMode::relaxed_band(region, 0.28).unwrap();
        let plain = ClipMode::Band(region);
        // high probability: band upper is below 1.28
        let b = plain.bounds(0.9, &cfg()).unwrap();
        let r = relaxed.bounds(0.9, &cfg()).unwrap();
        assert!(b.upper < 1.28);
        assert!((r.upper - 1.28).abs() < 1e-15);
        assert_eq!(r.lower, b.lower);
        // low probability: band upper already exceeds it
        let b = plain.bounds(0.01, &cfg()).unwrap();
        assert_eq!(relaxed.bounds(0.01, &cfg()).unwrap(), b);
    }

    #[test]
    fn band_admits_larger_tail_updates_than_clip_higher() {
        let b = band(DivergenceKind::Kl, 0.05).bounds(0.01, &cfg()).unwrap();
        assert!(b.upper > 1.28, "{}", b.upper);
    }

    #[test]
    fn mode_strings_round_trip() {
        for s in [
            "clip:0.2",
            "clip:0.2:0.28",
            "band:kl:0.05",
            "relaxed-band:kl:0.05:0.28",
            "band:chi2:0.1",
        ] {
            let mode: ClipMode = s.parse().unwrap();
            assert_eq!(mode.to_string(), s);
        }
        for bad in ["clip", "clip:-0.2", "band:kl", "band:js:0.1", "band:kl:x", "other:1"] {
            assert!(bad.parse::<ClipMode>().is_err(), "{bad}");
        }
    }

    #[test]
    fn invalid_context_is_rejected() {
        let mode = ClipMode::fixed_symmetric(0.2).unwrap();
        assert!(clip_ratio(&mode, &TokenContext::new(-1.0, 0.5, 1.0), &cfg()).is_err());
        assert!(clip_ratio(&mode, &TokenContext::new(1.0, 1.0, 1.0), &cfg()).is_err());
    }

    #[test]
    fn slope_matches_finite_differences() {
        let modes = [
            ClipMode::fixed_asymmetric(0.2, 0.28).unwrap(),
            band(DivergenceKind::Kl, 0.05),
        ];
        for mode in &modes {
            for &p in &[0.05, 0.5] {
                for &adv in &[1.3, -0.7] {
                    let bounds = mode.bounds(p, &cfg()).unwrap();
                    // interior points and points beyond either bound
                    for r in [1.0, 0.5 * (1.0 + bounds.upper), bounds.upper + 0.3, 0.5 * bounds.lower] {
                        let ctx = TokenContext::new(r, p, adv);
                        let out = clip_ratio(mode, &ctx, &cfg()).unwrap();
                        let surrogate = |x: f64| token_objective(mode, &TokenContext::new(x, p, adv), &cfg()).unwrap();
                        let h = 1e-7;
                        let fd = (surrogate(r + h) - surrogate(r - h)) / (2.0 * h);
                        let slope = out.surrogate_slope(r, adv);
                        assert!((fd - slope).abs() < 1e-6, "{mode} p={p} A={adv} r={r}: {fd} vs {slope}");
                        if out.clipped_high && adv > 0.0 {
                            assert_eq!(slope, 0.0);
                        }
                        if !out.clipped_high && !out.clipped_low {
                            assert_eq!(slope, adv);
                        }
                    }
                }
            }
        }
    }

    fn any_mode() -> impl Strategy<Value = ClipMode> {
        let kind = prop_oneof![
            Just(DivergenceKind::Kl),
            Just(DivergenceKind::Tv),
            Just(DivergenceKind::PearsonChi2)
        ];
        prop_oneof![
            (0.01f64..0.5).prop_map(ClipMode::FixedSymmetric),
            (0.01f64..0.5, 0.01f64..0.5).prop_map(|(low, high)| ClipMode::FixedAsymmetric { low, high }),
            (kind.clone(), 0.001f64..1.0).prop_map(|(k, d)| ClipMode::Band(TrustRegion::new(k, d).unwrap())),
            (kind, 0.001f64..1.0, 0.01f64..0.5).prop_map(|(k, d, high)| ClipMode::RelaxedBand {
                region: TrustRegion::new(k, d).unwrap(),
                high
            }),
        ]
    }

    proptest! {
        #[test]
        fn clipped_ratio_stays_in_bounds(mode in any_mode(), ratio in 0.0f64..50.0, p in 1e-4f64..0.9999, adv in -5.0f64..5.0) {
            let ctx = TokenContext::new(ratio, p, adv);
            let out = clip_ratio(&mode, &ctx, &cfg()).unwrap();
            prop_assert!(out.clipped_ratio >= out.bounds.lower && out.clipped_ratio <= out.bounds.upper);
            if ratio >= out.bounds.lower && ratio <= out.bounds.upper {
                prop_assert_eq!(out.clipped_ratio, ratio);
            }
            let obj = token_objective(&mode, &ctx, &cfg()).unwrap();
            prop_assert!(obj <= ratio * adv);
            if adv > 0.0 {
                prop_assert!(obj <= out.bounds.upper * adv + 1e-12);
            }
        }
    }
}
