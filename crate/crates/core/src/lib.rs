//! Random-matrix laboratory for rotationally invariant covariance estimation.
//!
//! The crate studies how well spectrum-cleaning estimators recover a true
//! covariance matrix from noisy sample covariances, measured by Gaussian
//! Kullback-Leibler divergence and Frobenius error. It provides:
//!
//! - [`matrix`]: symmetric-matrix primitives (eigendecomposition, SPD solves).
//! - [`sampling`]: white Wishart, white inverse Wishart, and Gaussian data
//!   samplers with reproducible, stream-splittable randomness.
//! - [`estimators`]: the oracle rotationally invariant estimator and linear
//!   shrinkage toward the identity.
//! - [`divergence`]: KL divergence and Frobenius error between covariances.
//! - [`analytics`]: closed-form large-n predictions for the losses above,
//!   their series expansions, and convergence-region helpers.
//! - [`montecarlo`]: seeded, parallel replicate experiments that confront the
//!   closed forms with finite-n simulation.
//! - [`symreg`]: a small genetic-programming symbolic regressor that searches
//!   for the closed forms from Monte Carlo data alone.
//! - [`cli`]: the `rmtkl` command-line interface over all of the above.

pub mod analytics;
pub mod cli;
pub mod divergence;
pub mod error;
pub mod estimators;
pub mod matrix;
pub mod montecarlo;
pub mod sampling;
pub mod symreg;

pub use error::{Error, Result};
