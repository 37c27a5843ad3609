//! Dense symmetric-matrix primitives: construction with definiteness checks,
//! spectral decomposition, log-determinants, and SPD solves.
//!
//! Every covariance-like object in this crate (population matrices, sample
//! covariances, Wishart draws, cleaned estimators) is a [`CovarianceMatrix`].
//! Construction symmetrizes through (A + A')/2 to absorb round-off from
//! products such as X X'/t, and records which definiteness check the input
//! passed. The tag is a construction-time sanity check, not a guarantee of
//! invertibility: factorization failures surface as
//! "singular or indefinite matrix" at the point where an inverse is actually
//! required.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Relative asymmetry tolerated before construction rejects the input.
const SYMMETRY_RTOL: f64 = 1e-8;

/// Which definiteness check a [`CovarianceMatrix`] passed at construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Definiteness {
    /// Spectrum passed the positive-definite tolerance.
    Positive,
    /// Spectrum passed the semidefinite tolerance; the matrix may be singular.
    Semidefinite,
}

/// Dense symmetric matrix with a definiteness tag.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceMatrix {
    data: DMatrix<f64>,
    definiteness: Definiteness,
}

/// Eigenvalues (ascending) and the matching orthonormal eigenvector basis.
#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    /// Eigenvalues sorted ascending; ties keep the solver's output order.
    pub eigenvalues: Vec<f64>,
    /// Column i is the eigenvector paired with `eigenvalues[i]`.
    pub eigenvectors: DMatrix<f64>,
}

impl SpectralDecomposition {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Rebuilds V diag(lambda) V' with an arbitrary eigenvalue list on this basis.
    pub fn reconstruct(&self, eigenvalues: &[f64]) -> Result<DMatrix<f64>> {
        if eigenvalues.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: eigenvalues.len(),
            });
        }
        let mut scaled = self.eigenvectors.clone();
        for (j, lam) in eigenvalues.iter().enumerate() {
            scaled.column_mut(j).scale_mut(*lam);
        }
        let mut m = &scaled * self.eigenvectors.transpose();
        symmetrize_in_place(&mut m);
        Ok(m)
    }
}

fn symmetrize_in_place(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

fn check_square_finite(data: &DMatrix<f64>) -> Result<()> {
    if data.nrows() != data.ncols() || data.nrows() == 0 {
        return Err(Error::NonSquare {
            rows: data.nrows(),
            cols: data.ncols(),
        });
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    Ok(())
}

fn check_symmetry(data: &DMatrix<f64>) -> Result<()> {
    let n = data.nrows();
    let mut max_asym = 0.0f64;
    let mut max_abs = 0.0f64;
    for i in 0..n {
        for j in i..n {
            max_abs = max_abs.max(data[(i, j)].abs()).max(data[(j, i)].abs());
            max_asym = max_asym.max((data[(i, j)] - data[(j, i)]).abs());
        }
    }
    if max_asym > SYMMETRY_RTOL * max_abs.max(1.0) {
        return Err(Error::NotSymmetric { max_asym });
    }
    Ok(())
}

/// Spectrum floor used by both definiteness checks: lambda_min must not fall
/// below -n * eps * |lambda_max|.
fn spectrum_floor(n: usize, lambda_max_abs: f64) -> f64 {
    -(n as f64) * f64::EPSILON * lambda_max_abs
}

impl CovarianceMatrix {
    /// The n x n identity, tagged positive definite.
    pub fn identity(n: usize) -> Self {
        assert!(n >= 1, "dimension must be at least 1");
        Self {
            data: DMatrix::identity(n, n),
            definiteness: Definiteness::Positive,
        }
    }

    /// Validates symmetry and the positive-definite spectrum tolerance, then
    /// wraps the symmetrized input.
    pub fn try_positive_definite(data: DMatrix<f64>) -> Result<Self> {
        let mut data = data;
        check_square_finite(&data)?;
        check_symmetry(&data)?;
        symmetrize_in_place(&mut data);
        let cov = Self {
            data,
            definiteness: Definiteness::Positive,
        };
        let eigs = cov.spectral_decompose()?;
        let min = eigs.eigenvalues[0];
        let max_abs = eigs
            .eigenvalues
            .iter()
            .fold(0.0f64, |a, &l| a.max(l.abs()));
        if min < spectrum_floor(cov.dim(), max_abs) {
            return Err(Error::NotPositiveDefinite {
                min_eigenvalue: min,
            });
        }
        Ok(cov)
    }

    /// Validates symmetry and the semidefinite spectrum tolerance. Eigenvalues
    /// in (-tol, 0) are clamped to zero by reconstruction; matrices meant to
    /// be inverted must go through [`Self::try_positive_definite`] instead,
    /// which never clamps.
    pub fn try_positive_semidefinite(data: DMatrix<f64>) -> Result<Self> {
        let mut data = data;
        check_square_finite(&data)?;
        check_symmetry(&data)?;
        symmetrize_in_place(&mut data);
        let mut cov = Self {
            data,
            definiteness: Definiteness::Semidefinite,
        };
        let eigs = cov.spectral_decompose()?;
        let min = eigs.eigenvalues[0];
        let max_abs = eigs
            .eigenvalues
            .iter()
            .fold(0.0f64, |a, &l| a.max(l.abs()));
        if min < spectrum_floor(cov.dim(), max_abs) {
            return Err(Error::NotPositiveSemidefinite {
                min_eigenvalue: min,
            });
        }
        if min < 0.0 {
            let clamped: Vec<f64> = eigs
                .eigenvalues
                .iter()
                .map(|&l| if l < 0.0 { 0.0 } else { l })
                .collect();
            cov.data = eigs.reconstruct(&clamped)?;
        }
        Ok(cov)
    }

    /// Internal constructor for matrices whose symmetry and definiteness are
    /// guaranteed by construction (factor products from the samplers and the
    /// estimators). Symmetrizes cheaply and skips the spectrum check.
    pub(crate) fn from_product(mut data: DMatrix<f64>, definiteness: Definiteness) -> Self {
        symmetrize_in_place(&mut data);
        Self { data, definiteness }
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn definiteness(&self) -> Definiteness {
        self.definiteness
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    /// Tr(M)/n, the normalized trace.
    pub fn normalized_trace(&self) -> f64 {
        self.data.trace() / self.dim() as f64
    }

    /// Full symmetric eigendecomposition with eigenvalues sorted ascending.
    /// Ties keep the solver's output order (stable sort), so identical input
    /// bits always produce identical output bits.
    pub fn spectral_decompose(&self) -> Result<SpectralDecomposition> {
        let n = self.dim();
        let eig = self
            .data
            .clone()
            .try_symmetric_eigen(f64::EPSILON, 100_000)
            .ok_or(Error::EigenNonConvergence { dim: n })?;
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[a]
                .partial_cmp(&eig.eigenvalues[b])
                .expect("symmetric eigenvalues are finite")
        });
        let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
        let mut eigenvectors = DMatrix::zeros(n, n);
        for (dst, &src) in order.iter().enumerate() {
            eigenvectors
                .column_mut(dst)
                .copy_from(&eig.eigenvectors.column(src));
        }
        Ok(SpectralDecomposition {
            eigenvalues,
            eigenvectors,
        })
    }

    /// ln det M through a Cholesky factorization.
    pub fn log_det(&self) -> Result<f64> {
        let chol = self
            .data
            .clone()
            .cholesky()
            .ok_or(Error::SingularOrIndefinite)?;
        Ok(chol.ln_determinant())
    }

    /// Solves M X = B for SPD M without forming an explicit inverse.
    pub fn solve_spd(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if b.nrows() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: b.nrows(),
            });
        }
        let chol = self
            .data
            .clone()
            .cholesky()
            .ok_or(Error::SingularOrIndefinite)?;
        Ok(chol.solve(b))
    }
}
