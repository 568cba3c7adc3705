//! Hidden Markov model estimation toolkit.
//!
//! Estimates Poisson and Gaussian HMMs by direct numerical maximization of the
//! likelihood, with exact gradients and Hessians from a built-in reverse-mode
//! AD engine. On top of the fitted model it provides Wald-type confidence
//! intervals for parameters and smoothing probabilities (delta method), a
//! parametric bootstrap, a suite of optimizers including a hybrid
//! Nelder-Mead-then-Newton scheme, and a simulation-study harness for
//! comparing optimizer speed, accuracy, and robustness to initial values.

pub mod adcore;
pub mod error;
pub mod inference;
pub mod likelihood;
pub mod optim;
pub mod params;
pub(crate) mod stats;
pub mod studies;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{HmmError, Result};
