//! Random-matrix samplers: white Wishart, white inverse Wishart population
//! matrices, Gaussian data conditioned on a covariance, and the centered
//! sample covariance.
//!
//! Reproducibility contract: every sampler is a pure function of its spec and
//! an [`RngStream`]. A stream is a (master seed, stream id) pair; the same
//! pair yields bit-identical draws regardless of thread count or call site,
//! and distinct pairs are independent. Replicate-level parallelism hands each
//! replicate its own stream id.
//!
//! Draw-order and factor conventions are fixed once for the whole crate:
//! matrices fill column by column, and Gaussian data uses the lower Cholesky
//! factor of the population covariance.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::matrix::{CovarianceMatrix, Definiteness};

/// Cap on derived observation counts so a tiny aspect ratio cannot demand an
/// absurd allocation.
const MAX_OBSERVATIONS: usize = 100_000_000;

/// A reproducible, splittable random stream: a master seed plus a stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream {
    master_seed: u64,
    stream_id: u64,
}

impl RngStream {
    /// Stream 0 under the given master seed.
    pub fn new(master_seed: u64) -> Self {
        Self {
            master_seed,
            stream_id: 0,
        }
    }

    /// A specific (master seed, stream id) pair.
    pub fn with_stream(master_seed: u64, stream_id: u64) -> Self {
        Self {
            master_seed,
            stream_id,
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// The stream directly after this one. Used for the documented one-shot
    /// resample inside [`sample_inverse_wishart`] and for splitting a logical
    /// draw into independent parts.
    pub fn next_substream(&self) -> Self {
        Self {
            master_seed: self.master_seed,
            stream_id: self.stream_id.wrapping_add(1),
        }
    }

    /// Instantiates the generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

/// Dimension and aspect ratio of a Wishart or sample-covariance draw.
///
/// The observation count is t = floor(n/q), so the ratio actually realized is
/// n/t, slightly below the requested q. Both are kept.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleSpec {
    n: usize,
    q: f64,
}

impl SampleSpec {
    pub fn new(n: usize, q: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter(
                "dimension must be at least 1".into(),
            ));
        }
        if !q.is_finite() || q <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "aspect ratio q must be positive and finite, got {q}"
            )));
        }
        let t = (n as f64 / q).floor();
        if t < 2.0 {
            return Err(Error::InvalidParameter(format!(
                "observation count floor(n/q) = {t} is below 2 (n = {n}, q = {q})"
            )));
        }
        if t > MAX_OBSERVATIONS as f64 {
            return Err(Error::InvalidParameter(format!(
                "observation count floor(n/q) = {t} exceeds the supported maximum"
            )));
        }
        Ok(Self { n, q })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// The requested aspect ratio.
    pub fn q(&self) -> f64 {
        self.q
    }

    /// t = floor(n/q).
    pub fn observations(&self) -> usize {
        (self.n as f64 / self.q).floor() as usize
    }

    /// The ratio n/t actually realized after the floor.
    pub fn effective_q(&self) -> f64 {
        self.n as f64 / self.observations() as f64
    }
}

/// Dimension and spread parameter of a white inverse Wishart population.
///
/// The population matrix is (1-q*) W^-1 with W a white Wishart of aspect
/// ratio q* = p/(1+p); its generating observation count t* = floor(n/q*)
/// must exceed n so that W is invertible.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PopulationSpec {
    n: usize,
    p: f64,
}

impl PopulationSpec {
    pub fn new(n: usize, p: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidParameter(
                "population dimension must be at least 2".into(),
            ));
        }
        if !p.is_finite() || p <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "spread parameter p must be positive and finite, got {p}"
            )));
        }
        let qstar = p / (1.0 + p);
        let tstar = (n as f64 / qstar).floor();
        if tstar < (n + 1) as f64 {
            return Err(Error::InvalidParameter(format!(
                "generating observation count floor(n/qstar) = {tstar} must be at least n+1 \
                 (n = {n}, p = {p}); reduce p or increase n"
            )));
        }
        if tstar > MAX_OBSERVATIONS as f64 {
            return Err(Error::InvalidParameter(format!(
                "generating observation count floor(n/qstar) = {tstar} exceeds the supported \
                 maximum; increase p or reduce n"
            )));
        }
        Ok(Self { n, p })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    /// q* = p/(1+p), the aspect ratio of the generating Wishart.
    pub fn qstar(&self) -> f64 {
        self.p / (1.0 + self.p)
    }

    /// t* = floor(n/q*).
    pub fn generating_observations(&self) -> usize {
        (self.n as f64 / self.qstar()).floor() as usize
    }
}

/// Fills an n x t matrix with iid standard normals, drawing column by column.
/// The explicit loop pins the draw order independently of storage layout.
fn standard_normal_matrix(n: usize, t: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, t);
    for j in 0..t {
        for i in 0..n {
            m[(i, j)] = rng.sample(StandardNormal);
        }
    }
    m
}

/// Draws a white Wishart matrix W = (1/t) M M' with M an n x t matrix of iid
/// standard normals and t = floor(n/q). E[tau(W)] = 1. For q >= 1 the result
/// is singular by construction and is tagged semidefinite.
pub fn sample_white_wishart(n: usize, q: f64, rng: &RngStream) -> Result<CovarianceMatrix> {
    let spec = SampleSpec::new(n, q)?;
    let t = spec.observations();
    let mut gen = rng.rng();
    let m = standard_normal_matrix(n, t, &mut gen);
    let w = (&m * m.transpose()) / t as f64;
    let definiteness = if t >= n {
        Definiteness::Positive
    } else {
        Definiteness::Semidefinite
    };
    Ok(CovarianceMatrix::from_product(w, definiteness))
}

fn inverse_wishart_attempt(spec: &PopulationSpec, rng: &RngStream) -> Result<CovarianceMatrix> {
    let w = sample_white_wishart(spec.n(), spec.qstar(), rng)?;
    let chol = w
        .as_matrix()
        .clone()
        .cholesky()
        .ok_or(Error::SingularOrIndefinite)?;
    let c = chol.inverse() * (1.0 - spec.qstar());
    Ok(CovarianceMatrix::from_product(c, Definiteness::Positive))
}

/// Draws a white inverse Wishart population matrix C = (1-q*) W^-1 with W a
/// white Wishart of aspect ratio q* = p/(1+p). E[tau(C)] = 1; the eigenvalue
/// spread grows with p and vanishes as p -> 0.
///
/// If the generating Wishart comes out numerically singular the draw is
/// retried once on the next substream; a second failure is an error rather
/// than a silent resample loop, so tail statistics stay unbiased.
pub fn sample_inverse_wishart(spec: &PopulationSpec, rng: &RngStream) -> Result<CovarianceMatrix> {
    match inverse_wishart_attempt(spec, rng) {
        Err(Error::SingularOrIndefinite) => inverse_wishart_attempt(spec, &rng.next_substream())
            .map_err(|_| Error::DegenerateSample),
        other => other,
    }
}

/// Draws an n x t data matrix whose columns are iid N(0, C), as L Z with L
/// the lower Cholesky factor of C (the factor convention fixed crate-wide)
/// and Z iid standard normal.
pub fn sample_gaussian_data(
    c: &CovarianceMatrix,
    t: usize,
    rng: &RngStream,
) -> Result<DMatrix<f64>> {
    if t == 0 {
        return Err(Error::InvalidParameter(
            "observation count must be at least 1".into(),
        ));
    }
    let chol = c
        .as_matrix()
        .clone()
        .cholesky()
        .ok_or(Error::SingularOrIndefinite)?;
    let mut gen = rng.rng();
    let z = standard_normal_matrix(c.dim(), t, &mut gen);
    Ok(chol.l() * z)
}

/// Centered sample covariance E = (1/t) X X' after removing each feature's
/// mean across the t observations. Centering costs one degree of freedom, so
/// the rank is at most min(n, t-1) and the result is tagged semidefinite.
pub fn sample_covariance(x: &DMatrix<f64>) -> Result<CovarianceMatrix> {
    let (n, t) = (x.nrows(), x.ncols());
    if n == 0 {
        return Err(Error::InvalidParameter(
            "data matrix must have at least 1 feature row".into(),
        ));
    }
    if t < 2 {
        return Err(Error::InvalidParameter(format!(
            "sample covariance needs at least 2 observations, got {t}"
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    let mut centered = x.clone();
    for i in 0..n {
        let mean = centered.row(i).sum() / t as f64;
        for j in 0..t {
            centered[(i, j)] -= mean;
        }
    }
    let e = (&centered * centered.transpose()) / t as f64;
    Ok(CovarianceMatrix::from_product(e, Definiteness::Semidefinite))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    const SEED: u64 = 915;

    /// First four spectral moments tau(M^k) via traces; exact for symmetric M.
    fn spectral_moments(m: &DMatrix<f64>) -> [f64; 4] {
        let n = m.nrows() as f64;
        let m2 = m * m;
        let t1 = m.trace() / n;
        let t2 = m2.trace() / n;
        let t3 = m2.component_mul(m).sum() / n;
        let t4 = m2.component_mul(&m2).sum() / n;
        [t1, t2, t3, t4]
    }

    fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
        let r = values.len() as f64;
        let mean = values.iter().sum::<f64>() / r;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1.0);
        (mean, (var / r).sqrt())
    }

    #[test]
    fn spec_validation() {
        assert!(SampleSpec::new(500, 0.5).is_ok());
        assert!(SampleSpec::new(0, 0.5).is_err());
        assert!(SampleSpec::new(500, 0.0).is_err());
        assert!(SampleSpec::new(500, -1.0).is_err());
        assert!(SampleSpec::new(500, f64::NAN).is_err());
        // floor(3/2.0) = 1 observation: too few to center
        assert!(SampleSpec::new(3, 2.0).is_err());
        assert!(SampleSpec::new(500, 1e-9).is_err());

        let spec = SampleSpec::new(10, 0.3).unwrap();
        assert_eq!(spec.observations(), 33);
        assert!((spec.effective_q() - 10.0 / 33.0).abs() < 1e-15);

        assert!(PopulationSpec::new(500, 1.0).is_ok());
        assert!(PopulationSpec::new(1, 1.0).is_err());
        assert!(PopulationSpec::new(500, 0.0).is_err());
        assert!(PopulationSpec::new(500, -0.5).is_err());
        // p so large that floor(n/qstar) = n: generating Wishart would be
        // right at the invertibility edge
        assert!(PopulationSpec::new(200, 1000.0).is_err());
        let pop = PopulationSpec::new(500, 1.0).unwrap();
        assert_eq!(pop.qstar(), 0.5);
        assert_eq!(pop.generating_observations(), 1000);
    }

    #[test]
    fn samplers_bit_deterministic() {
        let stream = RngStream::with_stream(SEED, 7);
        let a = sample_white_wishart(40, 0.5, &stream).unwrap();
        let b = sample_white_wishart(40, 0.5, &stream).unwrap();
        assert_eq!(a.as_matrix(), b.as_matrix());

        let pop = PopulationSpec::new(40, 1.0).unwrap();
        let c1 = sample_inverse_wishart(&pop, &stream).unwrap();
        let c2 = sample_inverse_wishart(&pop, &stream).unwrap();
        assert_eq!(c1.as_matrix(), c2.as_matrix());

        let x1 = sample_gaussian_data(&c1, 80, &stream).unwrap();
        let x2 = sample_gaussian_data(&c2, 80, &stream).unwrap();
        assert_eq!(x1, x2);

        // distinct streams decorrelate
        let other = sample_white_wishart(40, 0.5, &stream.next_substream()).unwrap();
        assert_ne!(a.as_matrix(), other.as_matrix());
    }

    #[test]
    fn wishart_trace_means() {
        let reps = 100;
        let mut traces = Vec::with_capacity(reps);
        let mut inverse_traces = Vec::with_capacity(reps);
        for i in 0..reps {
            let w = sample_white_wishart(500, 0.5, &RngStream::with_stream(SEED, i as u64))
                .unwrap();
            traces.push(w.normalized_trace());
            let winv = w
                .solve_spd(&DMatrix::identity(500, 500))
                .unwrap();
            inverse_traces.push(winv.trace() / 500.0);
        }
        let (mean, _) = mean_and_stderr(&traces);
        assert!((mean - 1.0).abs() <= 0.01, "tau(W) mean {mean}");
        // large-n limit 1/(1-q) = 2; the exact finite-t mean is t/(t-n-1)
        let (inv_mean, _) = mean_and_stderr(&inverse_traces);
        assert!((inv_mean - 2.0).abs() <= 0.05, "tau(W^-1) mean {inv_mean}");
        let exact = 1000.0 / (1000.0 - 501.0);
        assert!((inv_mean - exact).abs() <= 0.01, "tau(W^-1) mean {inv_mean} vs exact {exact}");
    }

    #[test]
    fn inverse_wishart_trace_mean() {
        let pop = PopulationSpec::new(500, 1.0).unwrap();
        let reps = 100;
        let mut traces = Vec::with_capacity(reps);
        for i in 0..reps {
            let c = sample_inverse_wishart(&pop, &RngStream::with_stream(SEED, i as u64)).unwrap();
            traces.push(c.normalized_trace());
        }
        let (mean, _) = mean_and_stderr(&traces);
        assert!((mean - 1.0).abs() <= 0.02, "tau(C) mean {mean}");
    }

    #[test]
    fn inverse_wishart_spread_grows_with_p() {
        let stream = RngStream::with_stream(SEED, 3);
        let mut ratios = Vec::new();
        for p in [0.01, 0.1, 1.0, 5.0] {
            let pop = PopulationSpec::new(200, p).unwrap();
            let c = sample_inverse_wishart(&pop, &stream).unwrap();
            let eig = c.spectral_decompose().unwrap();
            let ratio = eig.eigenvalues[199] / eig.eigenvalues[0];
            ratios.push(ratio);
        }
        assert!(
            ratios[0] < 1.5,
            "eigenvalue spread at p=0.01 should be nearly flat, got {}",
            ratios[0]
        );
        for w in ratios.windows(2) {
            assert!(w[0] < w[1], "spread should grow with p: {ratios:?}");
        }
    }

    #[test]
    fn gaussian_data_entrywise_covariance() {
        let c = CovarianceMatrix::identity(200);
        let x = sample_gaussian_data(&c, 10_000, &RngStream::with_stream(SEED, 11)).unwrap();
        assert_eq!(x.shape(), (200, 10_000));
        let e = sample_covariance(&x).unwrap();
        let mut max_dev = 0.0f64;
        for i in 0..200 {
            for j in 0..200 {
                let want = if i == j { 1.0 } else { 0.0 };
                max_dev = max_dev.max((e.as_matrix()[(i, j)] - want).abs());
            }
        }
        assert!(max_dev <= 0.05, "entrywise deviation {max_dev}");
    }

    #[test]
    fn gaussian_data_single_column() {
        let c = CovarianceMatrix::identity(5);
        let x = sample_gaussian_data(&c, 1, &RngStream::new(SEED)).unwrap();
        assert_eq!(x.shape(), (5, 1));
        assert!(x.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn gaussian_data_rejects_singular_population() {
        let c = CovarianceMatrix::from_product(
            dmatrix![1.0, 1.0; 1.0, 1.0],
            Definiteness::Semidefinite,
        );
        let err = sample_gaussian_data(&c, 4, &RngStream::new(SEED)).unwrap_err();
        assert_eq!(err.to_string(), "singular or indefinite matrix");
    }

    #[test]
    fn sample_covariance_hand_examples() {
        // identical columns: centering annihilates everything
        let x = dmatrix![3.0, 3.0, 3.0; -1.0, -1.0, -1.0];
        let e = sample_covariance(&x).unwrap();
        assert!(e.as_matrix().iter().all(|v| v.abs() < 1e-15));

        let x = dmatrix![1.0, -1.0; 1.0, -1.0];
        let e = sample_covariance(&x).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((e.as_matrix()[(i, j)] - 1.0).abs() < 1e-15);
            }
        }

        assert!(sample_covariance(&dmatrix![1.0; 2.0]).is_err());
        assert!(sample_covariance(&dmatrix![1.0, f64::NAN; 0.0, 1.0]).is_err());
    }

    #[test]
    fn sample_covariance_trace_mean() {
        let c = CovarianceMatrix::identity(500);
        let reps = 100;
        let mut traces = Vec::with_capacity(reps);
        for i in 0..reps {
            let x = sample_gaussian_data(&c, 1000, &RngStream::with_stream(SEED, i as u64))
                .unwrap();
            traces.push(sample_covariance(&x).unwrap().normalized_trace());
        }
        let (mean, _) = mean_and_stderr(&traces);
        assert!((mean - 1.0).abs() <= 0.02, "tau(E) mean {mean}");
    }

    #[test]
    fn sample_covariance_rank_deficiency() {
        let c = CovarianceMatrix::identity(50);
        let x = sample_gaussian_data(&c, 30, &RngStream::with_stream(SEED, 21)).unwrap();
        let e = sample_covariance(&x).unwrap();
        let eig = e.spectral_decompose().unwrap();
        let lam_max = *eig.eigenvalues.last().unwrap();
        // rank min(50, 29): the smallest 21 eigenvalues vanish
        for k in 0..21 {
            assert!(eig.eigenvalues[k].abs() < 1e-10 * lam_max);
        }
        assert!(eig.eigenvalues[21] > 1e-10 * lam_max);

        let x = sample_gaussian_data(&CovarianceMatrix::identity(30), 100,
            &RngStream::with_stream(SEED, 22)).unwrap();
        let e = sample_covariance(&x).unwrap();
        let eig = e.spectral_decompose().unwrap();
        let lam_max = *eig.eigenvalues.last().unwrap();
        assert!(eig.eigenvalues[0] > 1e-10 * lam_max, "full rank when t-1 >= n");
    }

    #[test]
    fn wishart_eigenvalues_within_bulk_support() {
        let w = sample_white_wishart(1000, 0.25, &RngStream::with_stream(SEED, 31)).unwrap();
        let eig = w.spectral_decompose().unwrap();
        let q: f64 = 1000.0 / 4000.0;
        let lower = (1.0 - q.sqrt()).powi(2) - 0.05;
        let upper = (1.0 + q.sqrt()).powi(2) + 0.05;
        assert!(eig.eigenvalues[0] >= lower, "lambda_min {}", eig.eigenvalues[0]);
        assert!(eig.eigenvalues[999] <= upper, "lambda_max {}", eig.eigenvalues[999]);
    }

    /// The centered sample covariance of N(0,I) data matches a white Wishart
    /// in distribution. Centering costs one observation, so the sharp
    /// comparison pairs t-observation sample covariances with ((t-1)/t) times
    /// a (t-1)-observation Wishart; the literal same-(n,q) comparison is also
    /// checked, with an explicit O(1/t) allowance for the centering bias.
    #[test]
    fn sample_covariance_matches_wishart_moments() {
        let n = 500usize;
        let t = 1000usize;
        let reps = 50usize;
        let c = CovarianceMatrix::identity(n);

        let mut cov_moments = vec![Vec::with_capacity(reps); 4];
        let mut matched_moments = vec![Vec::with_capacity(reps); 4];
        let mut literal_moments = vec![Vec::with_capacity(reps); 4];
        for i in 0..reps {
            let x = sample_gaussian_data(&c, t, &RngStream::with_stream(SEED, i as u64)).unwrap();
            let e = sample_covariance(&x).unwrap();
            for (k, m) in spectral_moments(e.as_matrix()).into_iter().enumerate() {
                cov_moments[k].push(m);
            }

            // q chosen so floor(n/q) = t-1 robustly
            let q_matched = n as f64 / (t as f64 - 0.5);
            let w = sample_white_wishart(n, q_matched, &RngStream::with_stream(SEED, 1000 + i as u64))
                .unwrap();
            let scaled = w.as_matrix() * ((t - 1) as f64 / t as f64);
            for (k, m) in spectral_moments(&scaled).into_iter().enumerate() {
                matched_moments[k].push(m);
            }

            let w = sample_white_wishart(n, 0.5, &RngStream::with_stream(SEED, 2000 + i as u64))
                .unwrap();
            for (k, m) in spectral_moments(w.as_matrix()).into_iter().enumerate() {
                literal_moments[k].push(m);
            }
        }

        for k in 0..4 {
            let (cov_mean, cov_se) = mean_and_stderr(&cov_moments[k]);
            let (mat_mean, mat_se) = mean_and_stderr(&matched_moments[k]);
            let tol = 3.0 * cov_se.hypot(mat_se);
            assert!(
                (cov_mean - mat_mean).abs() <= tol,
                "moment {}: sample-cov {cov_mean} vs matched Wishart {mat_mean}, tol {tol}",
                k + 1
            );

            let (lit_mean, lit_se) = mean_and_stderr(&literal_moments[k]);
            let bias_allowance = (k + 1) as f64 * 1.5 * lit_mean / t as f64;
            let tol = 3.0 * cov_se.hypot(lit_se) + bias_allowance;
            assert!(
                (cov_mean - lit_mean).abs() <= tol,
                "moment {}: sample-cov {cov_mean} vs literal Wishart {lit_mean}, tol {tol}",
                k + 1
            );
        }
    }
}
