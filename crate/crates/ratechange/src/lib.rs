//! Sampling and filtering tools for continuous-time Markov chains whose
//! rates are changed by an explicit likelihood-ratio weight.
//!
//! A chain is simulated under simple constant *reference* rates and converted
//! into a chain with elaborate *target* rates (time-dependent, or dependent
//! on a hidden Markov signal) by weighting, rejection sampling, particle
//! filtering, or by solving the filtering equations directly:
//!
//! - [`chain`] — state spaces, cadlag paths, rate families, validation.
//! - [`sampler`] — reference-chain simulation, the likelihood weight,
//!   rejection sampling and weighted Monte Carlo.
//! - [`model`] — joint hidden-signal/observation models (CMOM and CTHMM).
//! - [`particle`] — weighted and residual-branching particle filters with
//!   Bayes-factor output.
//! - [`direct`] — exact finite-state solver for the unnormalized filtering
//!   equation (Trotter product evolution plus multiplicative jump updates).
//! - [`oracles`] — slow, independent reference implementations used to check
//!   everything else.
//! - [`cli`] — the command-line front end (`simulate`, `reject-sample`,
//!   `weight`, `filter`, `compare`, `validate`).
//!
//! The `examples/` directory has one runnable program per capability; start
//! with `cargo run --example direct_filter_run`.

pub mod chain;
pub mod cli;
pub mod direct;
pub mod error;
pub mod model;
pub mod oracles;
pub mod particle;
pub mod sampler;

pub use error::{Error, Result};
