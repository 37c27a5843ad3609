//! Python bindings for the rmtkl core crate.
//!
//! Matrices cross the boundary as plain lists of row lists so the module
//! works without a fixed numpy ABI; wrap results in `numpy.array(...)` when
//! needed. Every function raises ValueError on invalid parameters, mirroring
//! the Rust error type's messages.

use std::str::FromStr;

use nalgebra::DMatrix;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use rmtkl::matrix::CovarianceMatrix;
use rmtkl::montecarlo::{self, ExperimentConfig, Metric, PopulationModel, RegressionRow};
use rmtkl::sampling::{self, PopulationSpec, RngStream};
use rmtkl::symreg::{self, GpConfig};
use rmtkl::{analytics, divergence, estimators};

fn value_error(e: rmtkl::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_matrix(rows: Vec<Vec<f64>>) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(PyValueError::new_err(
            "matrix must be a non-empty square list of row lists",
        ));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

fn to_covariance(rows: Vec<Vec<f64>>) -> PyResult<CovarianceMatrix> {
    CovarianceMatrix::try_positive_definite(to_matrix(rows)?).map_err(value_error)
}

fn from_matrix(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Mean normalized KL loss of the raw sample covariance at aspect ratio q.
#[pyfunction]
fn expected_kl_sample(q: f64) -> PyResult<f64> {
    analytics::expected_kl_sample(q).map_err(value_error)
}

/// Mean normalized trace of the inverse white Wishart at aspect ratio q.
#[pyfunction]
fn expected_tau_inv_wishart(q: f64) -> PyResult<f64> {
    analytics::expected_tau_inv_wishart(q).map_err(value_error)
}

/// Mean normalized log determinant of the white Wishart at aspect ratio q.
#[pyfunction]
fn expected_log_det_wishart(q: f64) -> PyResult<f64> {
    analytics::expected_log_det_wishart(q).map_err(value_error)
}

/// Mean normalized KL between two independent white Wisharts, the held-out
/// one (aspect ratio q_out) taken as the reference distribution.
#[pyfunction]
fn expected_kl_in_out(q_in: f64, q_out: f64) -> PyResult<f64> {
    analytics::expected_kl_in_out(q_in, q_out).map_err(value_error)
}

/// Population spread ratio q* = p / (1 + p).
#[pyfunction]
fn qstar_from_p(p: f64) -> PyResult<f64> {
    analytics::qstar_from_p(p).map_err(value_error)
}

/// Inverse of qstar_from_p.
#[pyfunction]
fn p_from_qstar(qstar: f64) -> PyResult<f64> {
    analytics::p_from_qstar(qstar).map_err(value_error)
}

/// Series ratio rq = pq / (p + q) controlling oracle-KL convergence.
#[pyfunction]
fn oracle_rq(p: f64, q: f64) -> PyResult<f64> {
    analytics::oracle_rq(p, q).map_err(value_error)
}

/// Closed-form mean oracle KL with its convergence diagnostics.
#[pyfunction]
fn oracle_kl_closed<'py>(py: Python<'py>, p: f64, q: f64) -> PyResult<Bound<'py, PyDict>> {
    let prediction = analytics::oracle_kl_closed(p, q).map_err(value_error)?;
    let out = PyDict::new(py);
    out.set_item("p", prediction.p)?;
    out.set_item("q", prediction.q)?;
    out.set_item("qstar", prediction.qstar)?;
    out.set_item("rq", prediction.rq)?;
    out.set_item("closed_form", prediction.closed_form)?;
    out.set_item("converges", prediction.converges)?;
    Ok(out)
}

/// Partial sum of the oracle-KL series truncated after `order` terms.
#[pyfunction]
fn oracle_kl_partial_sum(p: f64, q: f64, order: usize) -> PyResult<f64> {
    analytics::oracle_kl_partial_sum(p, q, order).map_err(value_error)
}

/// Largest convergent q* for a given q, or None when every q* converges.
#[pyfunction]
fn convergence_boundary_qstar(q: f64) -> Option<f64> {
    analytics::convergence_boundary_qstar(q)
}

/// Largest convergent q for a given q*, or None when every q converges.
#[pyfunction]
fn convergence_boundary_q(qstar: f64) -> Option<f64> {
    analytics::convergence_boundary_q(qstar)
}

/// (first-order oracle KL term, quarter of the mean Frobenius loss); the
/// two coincide for all valid (p, q).
#[pyfunction]
fn kl_frobenius_link(p: f64, q: f64) -> PyResult<(f64, f64)> {
    analytics::kl_frobenius_link(p, q).map_err(value_error)
}

/// Asymptotic linear shrinkage coefficient r = p / (p + q).
#[pyfunction]
fn shrinkage_r(p: f64, q: f64) -> PyResult<f64> {
    estimators::shrinkage_r_asymptotic(p, q)
        .map(|r| r.value())
        .map_err(value_error)
}

/// Finite-size shrinkage coefficient at dimension n.
#[pyfunction]
fn shrinkage_r_finite(n: usize, p: f64, q: f64) -> PyResult<f64> {
    estimators::shrinkage_r(n, p, q)
        .map(|r| r.value())
        .map_err(value_error)
}

/// One white Wishart sample of dimension n and aspect ratio q.
#[pyfunction]
#[pyo3(signature = (n, q, seed, stream = 0))]
fn sample_white_wishart(n: usize, q: f64, seed: u64, stream: u64) -> PyResult<Vec<Vec<f64>>> {
    let rng = RngStream::with_stream(seed, stream);
    sampling::sample_white_wishart(n, q, &rng)
        .map(|w| from_matrix(w.as_matrix()))
        .map_err(value_error)
}

/// One white inverse Wishart population sample with spread p.
#[pyfunction]
#[pyo3(signature = (n, p, seed, stream = 0))]
fn sample_inverse_wishart(n: usize, p: f64, seed: u64, stream: u64) -> PyResult<Vec<Vec<f64>>> {
    let spec = PopulationSpec::new(n, p).map_err(value_error)?;
    let rng = RngStream::with_stream(seed, stream);
    sampling::sample_inverse_wishart(&spec, &rng)
        .map(|c| from_matrix(c.as_matrix()))
        .map_err(value_error)
}

/// Normalized KL divergence between two covariance matrices, the first
/// taken as the reference distribution.
#[pyfunction]
fn kl_normalized(truth: Vec<Vec<f64>>, estimate: Vec<Vec<f64>>) -> PyResult<f64> {
    divergence::kl_normalized(&to_covariance(truth)?, &to_covariance(estimate)?)
        .map_err(value_error)
}

/// Normalized squared Frobenius distance between two covariance matrices.
#[pyfunction]
fn frobenius_error(truth: Vec<Vec<f64>>, estimate: Vec<Vec<f64>>) -> PyResult<f64> {
    divergence::frobenius_error(&to_covariance(truth)?, &to_covariance(estimate)?)
        .map_err(value_error)
}

/// Oracle rotationally invariant estimate built from the sample covariance's
/// eigenvectors and the true population covariance.
#[pyfunction]
fn oracle_estimate(sample: Vec<Vec<f64>>, population: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let e = to_covariance(sample)?;
    let c = to_covariance(population)?;
    estimators::oracle_estimator(&e, &c)
        .map(|estimate| from_matrix(estimate.into_matrix().as_matrix()))
        .map_err(value_error)
}

/// Runs one Monte Carlo cell and returns its record as a dict. `p=None`
/// selects the identity population; `metrics=None` evaluates all metrics
/// valid for the cell.
#[pyfunction]
#[pyo3(signature = (n, q, replicates, seed, p = None, metrics = None))]
fn run_cell<'py>(
    py: Python<'py>,
    n: usize,
    q: f64,
    replicates: usize,
    seed: u64,
    p: Option<f64>,
    metrics: Option<Vec<String>>,
) -> PyResult<Bound<'py, PyDict>> {
    let metrics = match metrics {
        Some(names) => names
            .iter()
            .map(|name| Metric::from_str(name))
            .collect::<Result<Vec<_>, _>>()
            .map_err(value_error)?,
        None if q < 1.0 => Metric::ALL.to_vec(),
        None => vec![Metric::KlOracle, Metric::FrobeniusOracle],
    };
    let config = ExperimentConfig {
        n,
        q,
        population: match p {
            Some(p) => PopulationModel::InverseWishart { p },
            None => PopulationModel::Identity,
        },
        metrics,
        replicates,
        master_seed: seed,
    };
    let record = montecarlo::run_cell(&config).map_err(value_error)?;

    let out = PyDict::new(py);
    out.set_item("n", record.n)?;
    out.set_item("q", record.q)?;
    out.set_item("effective_q", record.effective_q)?;
    out.set_item("p", record.p)?;
    out.set_item("qstar", record.qstar)?;
    out.set_item("replicates", record.replicates)?;
    out.set_item("seed", record.seed)?;
    let summaries = PyDict::new(py);
    for summary in &record.metrics {
        let entry = PyDict::new(py);
        entry.set_item("mean", summary.mean)?;
        entry.set_item("stderr", summary.stderr)?;
        summaries.set_item(summary.metric.to_string(), entry)?;
    }
    out.set_item("metrics", summaries)?;
    Ok(out)
}

/// An arithmetic expression over the variables q and r.
#[pyclass(name = "Expression", frozen)]
struct PyExpression {
    inner: symreg::Expression,
}

#[pymethods]
impl PyExpression {
    /// Parses the prefix form, e.g. "(mul 0.25 (mul q r))".
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        symreg::Expression::parse_prefix(text)
            .map(|inner| PyExpression { inner })
            .map_err(value_error)
    }

    fn evaluate(&self, q: f64, r: f64) -> f64 {
        self.inner.evaluate(q, r)
    }

    fn size(&self) -> usize {
        self.inner.size()
    }

    fn depth(&self) -> usize {
        self.inner.depth()
    }

    fn prefix(&self) -> String {
        self.inner.to_prefix()
    }

    fn infix(&self) -> String {
        self.inner.to_infix()
    }

    fn simplified(&self) -> Self {
        PyExpression {
            inner: symreg::simplify(&self.inner),
        }
    }

    fn __repr__(&self) -> String {
        format!("Expression({})", self.inner.to_prefix())
    }
}

/// Evolves formulas against rows of (q, r, target) tuples and returns the
/// per-round winners plus the overall best. Defaults match the CLI.
#[pyfunction]
#[pyo3(signature = (
    rows,
    population_size = 5000,
    generations = 40,
    parsimony = 1e-4,
    seed = 0,
    rounds = 1,
))]
fn evolve<'py>(
    py: Python<'py>,
    rows: Vec<(f64, f64, f64)>,
    population_size: usize,
    generations: usize,
    parsimony: f64,
    seed: u64,
    rounds: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let dataset = montecarlo::RegressionDataset {
        rows: rows
            .into_iter()
            .map(|(q, r, target)| RegressionRow {
                q,
                qstar: 0.0,
                r_finite: r,
                r_asymptotic: r,
                target_kl_norm: target,
                stderr: 0.0,
            })
            .collect(),
    };
    let config = GpConfig {
        population_size,
        generations,
        parsimony,
        seed,
        independent_runs: rounds,
        ..GpConfig::default()
    };
    let results = symreg::evolve_rounds(&config, &dataset).map_err(value_error)?;

    let round_list = PyList::empty(py);
    let mut best: Option<(f64, usize, usize)> = None;
    for result in &results {
        let report = result.history.last().expect("history is never empty");
        let entry = PyDict::new(py);
        entry.set_item("round", result.round)?;
        entry.set_item("seed", result.seed)?;
        entry.set_item("prefix", result.best.to_prefix())?;
        entry.set_item("raw_mse", report.raw_mse)?;
        entry.set_item("penalized_fitness", report.penalized_fitness)?;
        entry.set_item("size", report.size)?;
        round_list.append(entry)?;
        let key = (report.raw_mse, report.size, result.round);
        if best.is_none_or(|current| key < current) {
            best = Some(key);
        }
    }
    let (_, _, winner) = best.expect("at least one round");
    let winner = &results[winner];

    let out = PyDict::new(py);
    out.set_item("rounds", round_list)?;
    out.set_item(
        "best",
        PyExpression {
            inner: winner.best.clone(),
        },
    )?;
    out.set_item("best_round", winner.round)?;
    Ok(out)
}

#[pymodule]
fn rmtkl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyExpression>()?;
    m.add_function(wrap_pyfunction!(expected_kl_sample, m)?)?;
    m.add_function(wrap_pyfunction!(expected_tau_inv_wishart, m)?)?;
    m.add_function(wrap_pyfunction!(expected_log_det_wishart, m)?)?;
    m.add_function(wrap_pyfunction!(expected_kl_in_out, m)?)?;
    m.add_function(wrap_pyfunction!(qstar_from_p, m)?)?;
    m.add_function(wrap_pyfunction!(p_from_qstar, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_rq, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_kl_closed, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_kl_partial_sum, m)?)?;
    m.add_function(wrap_pyfunction!(convergence_boundary_qstar, m)?)?;
    m.add_function(wrap_pyfunction!(convergence_boundary_q, m)?)?;
    m.add_function(wrap_pyfunction!(kl_frobenius_link, m)?)?;
    m.add_function(wrap_pyfunction!(shrinkage_r, m)?)?;
    m.add_function(wrap_pyfunction!(shrinkage_r_finite, m)?)?;
    m.add_function(wrap_pyfunction!(sample_white_wishart, m)?)?;
    m.add_function(wrap_pyfunction!(sample_inverse_wishart, m)?)?;
    m.add_function(wrap_pyfunction!(kl_normalized, m)?)?;
    m.add_function(wrap_pyfunction!(frobenius_error, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_estimate, m)?)?;
    m.add_function(wrap_pyfunction!(run_cell, m)?)?;
    m.add_function(wrap_pyfunction!(evolve, m)?)?;
    Ok(())
}
