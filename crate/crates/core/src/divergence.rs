//! Discrepancy metrics between covariance matrices: the Gaussian
//! Kullback-Leibler divergence, its per-dimension normalization, and the
//! normalized squared Frobenius error.
//!
//! All logarithms are natural; every value is in nats. KL values a hair
//! below zero from round-off are reported as-is (never clamped) so that
//! downstream statistics stay unbiased.

use crate::error::{Error, Result};
use crate::matrix::CovarianceMatrix;

/// KL divergence, its normalized form, and the Frobenius error of one
/// (population, estimate) pair, computed together so the expensive solve is
/// shared.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DivergenceResult {
    /// KL(C || S) in nats.
    pub kl: f64,
    /// kl / n.
    pub kl_normalized: f64,
    /// tau((S - C)^2), the squared Frobenius distance over n.
    pub frobenius: f64,
}

impl DivergenceResult {
    /// Computes all three metrics for population C and estimate S.
    pub fn compute(c: &CovarianceMatrix, s: &CovarianceMatrix) -> Result<Self> {
        let kl = kl_gaussian(c, s)?;
        Ok(Self {
            kl,
            kl_normalized: kl / c.dim() as f64,
            frobenius: frobenius_error(c, s)?,
        })
    }
}

/// KL(C || S) between centered Gaussians with covariances C and S:
/// (Tr(S^-1 C) + ln det S - ln det C - n) / 2.
///
/// Computed through a Cholesky solve and two Cholesky log-determinants, with
/// no explicit inverse. A singular S is an error; it usually means a
/// sample covariance with q >= 1 was passed where an invertible estimate is
/// required.
pub fn kl_gaussian(c: &CovarianceMatrix, s: &CovarianceMatrix) -> Result<f64> {
    if c.dim() != s.dim() {
        return Err(Error::DimensionMismatch {
            expected: c.dim(),
            found: s.dim(),
        });
    }
    let n = c.dim() as f64;
    let sinv_c = s.solve_spd(c.as_matrix())?;
    let log_det_s = s.log_det()?;
    let log_det_c = c.log_det()?;
    Ok(0.5 * (sinv_c.trace() + log_det_s - log_det_c - n))
}

/// KL(C || S) / n, the per-dimension divergence.
pub fn kl_normalized(c: &CovarianceMatrix, s: &CovarianceMatrix) -> Result<f64> {
    Ok(kl_gaussian(c, s)? / c.dim() as f64)
}

/// tau((S - C)^2) = (1/n) sum_ij (S_ij - C_ij)^2.
pub fn frobenius_error(c: &CovarianceMatrix, s: &CovarianceMatrix) -> Result<f64> {
    if c.dim() != s.dim() {
        return Err(Error::DimensionMismatch {
            expected: c.dim(),
            found: s.dim(),
        });
    }
    let n = c.dim() as f64;
    let mut sum = 0.0;
    for (a, b) in c.as_matrix().iter().zip(s.as_matrix().iter()) {
        let d = b - a;
        sum += d * d;
    }
    Ok(sum / n)
}
