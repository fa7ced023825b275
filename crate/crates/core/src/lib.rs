//! Probability-aware ratio clipping.
//!
//! Each action's importance ratio is clipped to the interval a single
//! f-divergence trust region allows for that action's old probability:
//! wide for rare actions and narrow for likely ones, never leaving the
//! probability simplex.
//!
//! - [`divergence`]: generator functions for KL, total variation and Pearson chi-squared.
//! - [`solver`]: bound computation (closed forms, bisection, saturation).
//! - [`operator`]: clipping modes and the per-token surrogate objective.
//! - [`table`]: precomputed bound tables with interpolated queries.
//! - [`oracle`]: brute-force extremal solver over the full simplex.
//! - [`sim`]: softmax-bandit training loop for comparing clip modes.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` deliberately rejects NaN

pub mod divergence;
pub mod error;
pub mod operator;
pub mod oracle;
pub mod sim;
pub mod solver;
pub mod table;

pub use divergence::{DivergenceKind, ExtendedReal};
pub use error::{Error, Result};
pub use operator::{ClipMode, ClipOutcome, TokenContext};
pub use solver::{RatioBounds, SolverConfig, TrustRegion};
pub use table::{BoundTable, GridSpec, Spacing};
