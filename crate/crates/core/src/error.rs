use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("total variation generator has no derivative at u = 1")]
    Kink,

    #[error("bisection did not reach tolerance {tolerance:e} within {max_iterations} iterations")]
    Convergence { tolerance: f64, max_iterations: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("{0} has no closed-form bounds")]
    UnsupportedKind(crate::divergence::DivergenceKind),

    #[error("element {index}: {source}")]
    AtIndex {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("table build failed at p = {p}: {source}")]
    TableBuild {
        p: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("p = {p} lies outside the table range [{min_p}, {max_p}]")]
    OutOfRange { p: f64, min_p: f64, max_p: f64 },

    #[error("malformed table file: {0}")]
    Format(String),

    #[error("table invariant violated: {0}")]
    Validation(String),

    #[error("oracle failed: {0}")]
    Oracle(String),

    #[error("training diverged at step {step}: non-finite logits")]
    Diverged { step: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
