//! Error type shared across the crate.

use thiserror::Error;

/// Everything that can go wrong in model construction, simulation,
/// weighting and filtering.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument was outside its admissible range (bad time, bad
    /// probability vector, shape mismatch, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A model failed one of the structural conditions. The report lists
    /// each violated condition.
    #[error("model validation failed: {0}")]
    Validation(crate::chain::ValidationReport),

    /// A path jumped through a transition the reference chain cannot make
    /// (reference rate zero), so the likelihood ratio is undefined.
    #[error("absolute continuity violated: jump {from}->{to} at t={at} has zero reference rate")]
    AbsoluteContinuity { from: usize, to: usize, at: f64 },

    /// A rejection-sampling weight exceeded the caller-certified bound C.
    /// The result would be biased, so the run is aborted.
    #[error("weight bound violated: observed A={observed} > C={bound}")]
    BoundViolation { observed: f64, bound: f64 },

    /// The rejection sampler used up its attempt budget.
    #[error("rejection budget exhausted after {attempts} attempts (running acceptance estimate {acceptance_estimate:.3e})")]
    Budget {
        attempts: u64,
        acceptance_estimate: f64,
    },

    /// Every particle received zero offspring; the ensemble died.
    #[error("ensemble degenerated to zero particles at t={at}; weight snapshot: {weights:?}")]
    EmptyEnsemble { at: f64, weights: Vec<f64> },

    /// The filter mass vanished (model inconsistent with the observations).
    #[error("degenerate filter: {0}")]
    DegenerateFilter(String),

    /// API misuse: mixing ensembles run on different observations,
    /// malformed observation segments, and similar caller mistakes.
    #[error("usage error: {0}")]
    Usage(String),

    /// Models being compared do not share an observation space and
    /// reference rates, so their Bayes factors are not comparable.
    #[error("model mismatch: {0}")]
    Mismatch(String),

    /// A supplied transition function was not stochastic.
    #[error("oracle error: {0}")]
    Oracle(String),

    /// A numerical guard tripped (negative filter mass, overflow, unstable
    /// integration step).
    #[error("numerical error: {0}")]
    Numerical(String),

    /// File / serialization problems surfaced by the CLI layer.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// Input file had the wrong shape or unparsable content.
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
