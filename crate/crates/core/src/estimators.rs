//! Rotationally invariant estimators of a population covariance from a
//! sample covariance: the oracle estimator, which keeps the sample
//! eigenbasis but replaces each eigenvalue by the population's projection
//! onto that eigenvector, and optimal linear shrinkage toward the identity
//! for white inverse Wishart populations.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::matrix::{CovarianceMatrix, Definiteness};

/// Floor below which an oracle eigenvalue is treated as evidence of a broken
/// decomposition rather than clamped: diag(V' C V) is mathematically positive
/// for positive definite C.
const ORACLE_EIGENVALUE_FLOOR: f64 = 1e-12;

/// The oracle estimate: the sample eigenbasis V with eigenvalues replaced by
/// diag(V' C V), reconstructed into a matrix. It is the rotationally
/// invariant estimator closest to C in Frobenius norm.
#[derive(Debug, Clone)]
pub struct OracleEstimate {
    basis: DMatrix<f64>,
    oracle_eigenvalues: Vec<f64>,
    matrix: CovarianceMatrix,
}

impl OracleEstimate {
    /// Eigenvector basis of the sample covariance (columns, ascending order
    /// of the sample eigenvalues).
    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    /// Oracle eigenvalues, paired index-by-index with the basis columns.
    /// They are NOT sorted independently; reordering them alone would
    /// scramble the eigenvector pairing.
    pub fn oracle_eigenvalues(&self) -> &[f64] {
        &self.oracle_eigenvalues
    }

    /// The reconstructed estimator V diag(oracle) V'.
    pub fn matrix(&self) -> &CovarianceMatrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> CovarianceMatrix {
        self.matrix
    }
}

/// Whether a shrinkage coefficient is the exact finite-n expression or its
/// large-n limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShrinkageRegime {
    FiniteN,
    Asymptotic,
}

/// Weight r of the sample covariance in the shrinkage r E + (1-r) I.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShrinkageCoefficient {
    r: f64,
    regime: ShrinkageRegime,
}

impl ShrinkageCoefficient {
    pub fn value(&self) -> f64 {
        self.r
    }

    pub fn regime(&self) -> ShrinkageRegime {
        self.regime
    }
}

/// diag(V' C V) in the column order of V: the population variance captured
/// along each sample eigenvector.
pub fn oracle_eigenvalues(v: &DMatrix<f64>, c: &CovarianceMatrix) -> Result<Vec<f64>> {
    if v.nrows() != v.ncols() {
        return Err(Error::NonSquare {
            rows: v.nrows(),
            cols: v.ncols(),
        });
    }
    if v.nrows() != c.dim() {
        return Err(Error::DimensionMismatch {
            expected: c.dim(),
            found: v.nrows(),
        });
    }
    let cv = c.as_matrix() * v;
    let n = c.dim();
    let mut diag = Vec::with_capacity(n);
    for j in 0..n {
        let mut s = 0.0;
        for i in 0..n {
            s += v[(i, j)] * cv[(i, j)];
        }
        diag.push(s);
    }
    Ok(diag)
}

/// Builds the oracle estimator of C in the eigenbasis of E. E may be
/// singular (aspect ratios q >= 1); the oracle itself never is, because its
/// eigenvalues inherit positivity from C.
pub fn oracle_estimator(e: &CovarianceMatrix, c: &CovarianceMatrix) -> Result<OracleEstimate> {
    if e.dim() != c.dim() {
        return Err(Error::DimensionMismatch {
            expected: c.dim(),
            found: e.dim(),
        });
    }
    let eig = e.spectral_decompose()?;
    let lambda = oracle_eigenvalues(&eig.eigenvectors, c)?;
    for (index, &value) in lambda.iter().enumerate() {
        if value <= ORACLE_EIGENVALUE_FLOOR {
            return Err(Error::OracleEigenvalueFloor { index, value });
        }
    }
    let matrix = eig.reconstruct(&lambda)?;
    Ok(OracleEstimate {
        basis: eig.eigenvectors,
        oracle_eigenvalues: lambda,
        matrix: CovarianceMatrix::from_product(matrix, Definiteness::Positive),
    })
}

/// Exact finite-n shrinkage weight n p / (n (p+q) - p q) for a white inverse
/// Wishart population with spread p observed at aspect ratio q.
pub fn shrinkage_r(n: usize, p: f64, q: f64) -> Result<ShrinkageCoefficient> {
    validate_pq(p, q)?;
    if n == 0 {
        return Err(Error::InvalidParameter(
            "dimension must be at least 1".into(),
        ));
    }
    let nf = n as f64;
    let r = nf * p / (nf * (p + q) - p * q);
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "shrinkage weight {r} falls outside (0, 1]; requires p <= n (n = {n}, p = {p}, q = {q})"
        )));
    }
    Ok(ShrinkageCoefficient {
        r,
        regime: ShrinkageRegime::FiniteN,
    })
}

/// Large-n limit p/(p+q) of the shrinkage weight.
pub fn shrinkage_r_asymptotic(p: f64, q: f64) -> Result<ShrinkageCoefficient> {
    validate_pq(p, q)?;
    Ok(ShrinkageCoefficient {
        r: p / (p + q),
        regime: ShrinkageRegime::Asymptotic,
    })
}

fn validate_pq(p: f64, q: f64) -> Result<()> {
    if !p.is_finite() || p <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "spread parameter p must be positive and finite, got {p}"
        )));
    }
    if !q.is_finite() || q <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "aspect ratio q must be positive and finite, got {q}"
        )));
    }
    Ok(())
}

/// r E + (1-r) I: linear shrinkage of the sample covariance toward the
/// identity. Shares E's eigenvectors; each eigenvalue maps to r l + (1-r).
pub fn linear_shrinkage(e: &CovarianceMatrix, r: &ShrinkageCoefficient) -> CovarianceMatrix {
    let n = e.dim();
    let mut m = e.as_matrix() * r.value();
    let shift = 1.0 - r.value();
    for i in 0..n {
        m[(i, i)] += shift;
    }
    let definiteness = if r.value() < 1.0 || e.definiteness() == Definiteness::Positive {
        Definiteness::Positive
    } else {
        Definiteness::Semidefinite
    };
    CovarianceMatrix::from_product(m, definiteness)
}
