//! Closed-form large-dimension predictions for the losses measured by the
//! Monte Carlo harness: expected KL divergences for raw and cleaned sample
//! covariances, expected log-determinants and inverse traces of white
//! Wishart matrices, the alternating series for the oracle KL with its
//! convergence region, and the expected Frobenius error of the oracle.
//!
//! Populations are white inverse Wishart, parameterized interchangeably by
//! the spread p > 0 or by q* = p/(1+p) in (0,1); outputs that depend on the
//! population record both. Ratios q may exceed 1 wherever the quantity stays
//! defined (the oracle family); quantities that require an invertible sample
//! covariance demand q < 1.
//!
//! Formulas with removable (1/q) ln(1/(1-q)) singularities switch to a
//! three-term Taylor branch below q = 1e-6 to avoid catastrophic
//! cancellation near zero.

use crate::error::{Error, Result};
use crate::estimators::ShrinkageCoefficient;

/// Below this ratio the Taylor branches replace direct evaluation.
const SERIES_BRANCH: f64 = 1e-6;

/// The large-n prediction for the oracle's normalized KL at one (p, q).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleKlPrediction {
    pub p: f64,
    pub q: f64,
    /// q* = p/(1+p), recorded alongside p to prevent unit confusion.
    pub qstar: f64,
    /// Large-n limit of r q.
    pub rq: f64,
    /// p q / (4p + 4q + p q). Always the algebraic value; it represents the
    /// series limit only where `converges` is true.
    pub closed_form: f64,
    /// Whether the alternating series converges (r q < 4). Outside the
    /// region no quantitative claim ties `closed_form` to the actual KL.
    pub converges: bool,
}

fn check_ratio_open_unit(q: f64, name: &str) -> Result<()> {
    if !q.is_finite() || q <= 0.0 || q >= 1.0 {
        return Err(Error::InvalidParameter(format!(
            "{name} must lie in (0, 1), got {q}"
        )));
    }
    Ok(())
}

fn check_spread(p: f64) -> Result<()> {
    if !p.is_finite() || p <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "spread parameter p must be positive and finite, got {p}"
        )));
    }
    Ok(())
}

fn check_ratio_nonnegative(q: f64) -> Result<()> {
    if !q.is_finite() || q < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "aspect ratio q must be nonnegative and finite, got {q}"
        )));
    }
    Ok(())
}

/// q* = p/(1+p).
pub fn qstar_from_p(p: f64) -> Result<f64> {
    check_spread(p)?;
    Ok(p / (1.0 + p))
}

/// p = q*/(1-q*).
pub fn p_from_qstar(qstar: f64) -> Result<f64> {
    check_ratio_open_unit(qstar, "qstar")?;
    Ok(qstar / (1.0 - qstar))
}

/// ln(1/(1-q)), accurate for small q.
fn log_inv_1m(q: f64) -> f64 {
    -(-q).ln_1p()
}

/// A(q) = (1-q)/(2q) ln(1/(1-q)), extended by its limit A(0) = 1/2.
fn half_log_term(q: f64) -> f64 {
    if q < SERIES_BRANCH {
        0.5 - q / 4.0 - q * q / 12.0 - q * q * q / 24.0
    } else {
        (1.0 - q) / (2.0 * q) * log_inv_1m(q)
    }
}

/// Expected normalized KL between the population and the raw sample
/// covariance at ratio q: (1-q)/(2q) ln(1/(1-q)) + 1/(2(1-q)) - 1.
/// Vanishes as q -> 0 (perfect recovery) and diverges as q -> 1.
pub fn expected_kl_sample(q: f64) -> Result<f64> {
    check_ratio_open_unit(q, "aspect ratio q")?;
    if q < SERIES_BRANCH {
        return Ok(q / 4.0 + 5.0 * q * q / 12.0 + 11.0 * q * q * q / 24.0);
    }
    Ok(half_log_term(q) + 0.5 / (1.0 - q) - 1.0)
}

/// E[tau(W^-1)] = 1/(1-q) for a white Wishart at ratio q < 1.
pub fn expected_tau_inv_wishart(q: f64) -> Result<f64> {
    check_ratio_open_unit(q, "aspect ratio q")?;
    Ok(1.0 / (1.0 - q))
}

/// E[(1/n) ln det W] = ((1-q)/q) ln(1/(1-q)) - 1 for a white Wishart.
pub fn expected_log_det_wishart(q: f64) -> Result<f64> {
    check_ratio_open_unit(q, "aspect ratio q")?;
    if q < SERIES_BRANCH {
        return Ok(-q / 2.0 - q * q / 6.0 - q * q * q / 12.0);
    }
    Ok((1.0 - q) / q * log_inv_1m(q) - 1.0)
}

/// Expected normalized KL between two sample covariances of the same
/// population, one observed at ratio q_in and one at q_out. At q_out = 0 the
/// out-of-sample matrix is the population itself and the value reduces to
/// [`expected_kl_sample`]; at q_in = q_out it does not vanish.
pub fn expected_kl_in_out(q_in: f64, q_out: f64) -> Result<f64> {
    check_ratio_open_unit(q_in, "in-sample ratio q_in")?;
    if !q_out.is_finite() || q_out < 0.0 || q_out >= 1.0 {
        return Err(Error::InvalidParameter(format!(
            "out-of-sample ratio q_out must lie in [0, 1), got {q_out}"
        )));
    }
    Ok(half_log_term(q_in) - half_log_term(q_out) + 0.5 / (1.0 - q_in) - 0.5)
}

/// Large-n limit of r q for population q* = p/(1+p) observed at ratio q:
/// q* q / (q* + q - q* q).
pub fn oracle_rq_from_qstar(qstar: f64, q: f64) -> Result<f64> {
    check_ratio_open_unit(qstar, "qstar")?;
    check_ratio_nonnegative(q)?;
    Ok(qstar * q / (qstar + q - qstar * q))
}

/// [`oracle_rq_from_qstar`] with the population given as p.
pub fn oracle_rq(p: f64, q: f64) -> Result<f64> {
    oracle_rq_from_qstar(qstar_from_p(p)?, q)
}

/// Partial sum of the alternating series for the oracle's normalized KL:
/// sum_{j=1..order} (-1)^(j-1) (rq/4)^j. Divergent regimes simply produce
/// growing partial sums.
pub fn oracle_kl_partial_sum(p: f64, q: f64, order: usize) -> Result<f64> {
    if order == 0 {
        return Err(Error::InvalidParameter(
            "series order must be at least 1".into(),
        ));
    }
    let x = oracle_rq(p, q)? / 4.0;
    let mut term = x;
    let mut sum = x;
    for _ in 1..order {
        term *= -x;
        sum += term;
    }
    Ok(sum)
}

/// Closed form p q / (4p + 4q + p q) for the oracle's normalized KL in the
/// large-n limit, with the convergence flag rq < 4. The algebraic value is
/// returned even outside the region, flagged false.
pub fn oracle_kl_closed(p: f64, q: f64) -> Result<OracleKlPrediction> {
    check_spread(p)?;
    check_ratio_nonnegative(q)?;
    let qstar = p / (1.0 + p);
    let rq = oracle_rq_from_qstar(qstar, q)?;
    Ok(OracleKlPrediction {
        p,
        q,
        qstar,
        rq,
        closed_form: p * q / (4.0 * p + 4.0 * q + p * q),
        converges: rq < 4.0,
    })
}

/// Expected Frobenius error (1-r)^2 p + q r^2 of the shrinkage estimator
/// r E + (1-r) I against a white inverse Wishart population. With the
/// asymptotic weight r = p/(p+q) this reduces to pq/(p+q).
pub fn expected_frobenius_oracle(p: f64, q: f64, r: &ShrinkageCoefficient) -> Result<f64> {
    check_spread(p)?;
    check_ratio_nonnegative(q)?;
    let r = r.value();
    Ok((1.0 - r) * (1.0 - r) * p + q * r * r)
}

/// The first-order KL term rq/4 and a quarter of the asymptotic Frobenius
/// error. The two agree to machine precision for every (p, q); to first
/// order, one nat of KL costs four units of Frobenius error.
pub fn kl_frobenius_link(p: f64, q: f64) -> Result<(f64, f64)> {
    check_spread(p)?;
    check_ratio_nonnegative(q)?;
    if q == 0.0 {
        return Ok((0.0, 0.0));
    }
    let first_order_kl = oracle_kl_partial_sum(p, q, 1)?;
    let r = crate::estimators::shrinkage_r_asymptotic(p, q)?;
    let quarter_frobenius = expected_frobenius_oracle(p, q, &r)? / 4.0;
    Ok((first_order_kl, quarter_frobenius))
}

/// The q* on the convergence boundary rq = 4 at ratio q: q* = 4q/(5q - 4),
/// defined for q > 4 and tending to 4/5 as q grows. None when no q* in
/// (0, 1) puts (q*, q) on the boundary.
pub fn convergence_boundary_qstar(q: f64) -> Option<f64> {
    if q > 4.0 && q.is_finite() {
        Some(4.0 * q / (5.0 * q - 4.0))
    } else {
        None
    }
}

/// The q on the convergence boundary rq = 4 at population q*: q = 4q*/(5q* - 4),
/// defined for q* > 4/5 and tending to 4 as q* -> 1.
pub fn convergence_boundary_q(qstar: f64) -> Option<f64> {
    if qstar > 0.8 && qstar < 1.0 {
        Some(4.0 * qstar / (5.0 * qstar - 4.0))
    } else {
        None
    }
}
