//! Reproducible Monte Carlo harness. A cell draws (population C, sample
//! covariance E) pairs replicate by replicate, evaluates the requested loss
//! metrics, and aggregates them into a record; grids of cells run with
//! independently derived seeds and collect per-cell failures without
//! aborting the remaining cells.
//!
//! Determinism contract: replicate i of a cell seeded s uses streams
//! (s, 4i..4i+3) — population draw, its documented retry, data draw, and a
//! spare. Aggregation is compensated summation in fixed replicate order, so
//! records are bit-identical across runs and worker counts. The wall-time
//! CSV column is reserved (always 0.0) for the same reason; timing belongs
//! on stderr, not in reproducible artifacts.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::divergence::{frobenius_error, kl_normalized};
use crate::error::{Error, Result};
use crate::estimators::{oracle_estimator, shrinkage_r, shrinkage_r_asymptotic};
use crate::matrix::CovarianceMatrix;
use crate::sampling::{
    sample_covariance, sample_gaussian_data, sample_inverse_wishart, PopulationSpec, RngStream,
    SampleSpec,
};

/// Header of the records CSV.
pub const RECORDS_HEADER: &str =
    "schema,n,q,effective_q,p,qstar,replicates,seed,metric,mean,stderr,walltime_s";
/// Schema tag of the records CSV.
pub const RECORDS_SCHEMA: &str = "rmtkl-1";
/// Header of the regression-dataset CSV.
pub const DATASET_HEADER: &str = "schema,q,qstar,r_finite,r_asymptotic,target_kl_norm,stderr";
/// Schema tag of the regression-dataset CSV.
pub const DATASET_SCHEMA: &str = "rmtds-1";

/// Formats a float with 17 significant decimal digits, enough to round-trip
/// every finite f64 bit-exactly.
pub(crate) fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

pub(crate) fn parse_float(s: &str, line: usize) -> Result<f64> {
    s.parse::<f64>().map_err(|_| Error::Parse {
        line,
        message: format!("expected a float, got {s:?}"),
    })
}

fn parse_int<T: FromStr>(s: &str, line: usize, what: &str) -> Result<T> {
    s.parse::<T>().map_err(|_| Error::Parse {
        line,
        message: format!("expected {what}, got {s:?}"),
    })
}

/// Loss metrics a cell can evaluate. KL metrics are per-dimension
/// (normalized by n).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    /// Normalized KL(C || E) of the raw sample covariance. Requires q < 1.
    KlSample,
    /// Normalized KL(C || oracle estimate). Finite for every q.
    KlOracle,
    /// Frobenius error tau((oracle estimate - C)^2).
    FrobeniusOracle,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::KlSample, Metric::KlOracle, Metric::FrobeniusOracle];
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Metric::KlSample => "kl_sample",
            Metric::KlOracle => "kl_oracle",
            Metric::FrobeniusOracle => "frobenius_oracle",
        };
        f.write_str(name)
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kl_sample" => Ok(Metric::KlSample),
            "kl_oracle" => Ok(Metric::KlOracle),
            "frobenius_oracle" => Ok(Metric::FrobeniusOracle),
            other => Err(Error::InvalidParameter(format!(
                "unknown metric {other:?}; expected kl_sample, kl_oracle, or frobenius_oracle"
            ))),
        }
    }
}

/// The population covariance a cell draws its data from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PopulationModel {
    /// White inverse Wishart with spread p > 0.
    InverseWishart { p: f64 },
    /// The identity matrix: the zero-spread limit. Recorded as p = 0,
    /// qstar = 0 in outputs.
    Identity,
}

impl PopulationModel {
    /// (p, q*) as echoed into records; (0, 0) for the identity population.
    pub fn parameters(&self) -> (f64, f64) {
        match self {
            PopulationModel::InverseWishart { p } => (*p, p / (1.0 + p)),
            PopulationModel::Identity => (0.0, 0.0),
        }
    }
}

/// One Monte Carlo cell: a parameter point, the metrics to evaluate, the
/// replicate budget, and the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub n: usize,
    pub q: f64,
    pub population: PopulationModel,
    pub metrics: Vec<Metric>,
    pub replicates: usize,
    pub master_seed: u64,
}

impl ExperimentConfig {
    /// Checks every config invariant; run_cell and run_grid call this before
    /// touching the RNG.
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::InvalidParameter(
                "dimension n must be at least 2".into(),
            ));
        }
        if self.replicates == 0 {
            return Err(Error::InvalidParameter(
                "replicate count must be at least 1".into(),
            ));
        }
        if self.metrics.is_empty() {
            return Err(Error::InvalidParameter(
                "at least one metric must be requested".into(),
            ));
        }
        for (i, m) in self.metrics.iter().enumerate() {
            if self.metrics[..i].contains(m) {
                return Err(Error::InvalidParameter(format!(
                    "metric {m} requested more than once"
                )));
            }
        }
        SampleSpec::new(self.n, self.q)?;
        if self.metrics.contains(&Metric::KlSample) && self.q >= 1.0 {
            return Err(Error::InvalidParameter(format!(
                "kl_sample needs an invertible sample covariance, so q must be below 1, got {}",
                self.q
            )));
        }
        if let PopulationModel::InverseWishart { p } = self.population {
            PopulationSpec::new(self.n, p)?;
        }
        Ok(())
    }
}

/// Mean and standard error of one metric over a cell's replicates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSummary {
    pub metric: Metric,
    pub mean: f64,
    pub stderr: f64,
}

/// Aggregated result of one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRecord {
    pub n: usize,
    pub q: f64,
    /// n/floor(n/q): the ratio actually realized.
    pub effective_q: f64,
    /// Population spread; 0 for the identity population.
    pub p: f64,
    /// q* = p/(1+p); 0 for the identity population.
    pub qstar: f64,
    pub replicates: usize,
    pub seed: u64,
    pub metrics: Vec<MetricSummary>,
    /// Reserved; always 0.0 so records stay byte-reproducible across worker
    /// counts. The CLI reports real timings on stderr.
    pub walltime_s: f64,
}

/// One (inputs, target) row for the symbolic regressor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionRow {
    pub q: f64,
    pub qstar: f64,
    pub r_finite: f64,
    pub r_asymptotic: f64,
    pub target_kl_norm: f64,
    pub stderr: f64,
}

/// Rows of (q, q*, r, target KL) pairs distilled from oracle-KL records.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RegressionDataset {
    pub rows: Vec<RegressionRow>,
}

/// A cell that failed inside run_grid, with its position in the grid.
#[derive(Debug)]
pub struct CellFailure {
    pub index: usize,
    pub error: Error,
}

/// Outcome of a grid run: completed records in grid order plus the failures
/// that did not stop the remaining cells.
#[derive(Debug, Default)]
pub struct GridReport {
    pub records: Vec<ExperimentRecord>,
    pub failures: Vec<CellFailure>,
}

fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for v in values {
        let y = v - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    sum
}

/// Mean and standard error (stddev/sqrt(R), zero for a single replicate) in
/// fixed input order with compensated sums.
fn summarize(values: &[f64]) -> (f64, f64) {
    let r = values.len();
    let mean = compensated_sum(values.iter().copied()) / r as f64;
    if r < 2 {
        return (mean, 0.0);
    }
    let var = compensated_sum(values.iter().map(|v| (v - mean) * (v - mean))) / (r - 1) as f64;
    (mean, (var / r as f64).sqrt())
}

/// Runs `eval` for each replicate index in parallel, then reduces each
/// statistic in replicate order. The first failing replicate (by index)
/// aborts the whole call; nothing is silently resampled.
pub fn aggregate_replicates<F>(replicates: usize, eval: F) -> Result<Vec<(f64, f64)>>
where
    F: Fn(usize) -> Result<Vec<f64>> + Sync,
{
    if replicates == 0 {
        return Err(Error::InvalidParameter(
            "replicate count must be at least 1".into(),
        ));
    }
    let results: Vec<Result<Vec<f64>>> = (0..replicates).into_par_iter().map(&eval).collect();
    let mut rows = Vec::with_capacity(replicates);
    for (replicate, result) in results.into_iter().enumerate() {
        match result {
            Ok(row) => rows.push(row),
            Err(source) => {
                return Err(Error::ReplicateFailed {
                    replicate,
                    source: Box::new(source),
                })
            }
        }
    }
    let width = rows[0].len();
    debug_assert!(rows.iter().all(|r| r.len() == width));
    let mut out = Vec::with_capacity(width);
    for k in 0..width {
        let column: Vec<f64> = rows.iter().map(|r| r[k]).collect();
        out.push(summarize(&column));
    }
    Ok(out)
}

/// Derives an independent per-cell seed from the run's master seed and the
/// cell index (splitmix-style finalizer).
pub fn derive_cell_seed(master_seed: u64, cell_index: usize) -> u64 {
    let mut z = master_seed
        ^ (cell_index as u64)
            .wrapping_add(1)
            .wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs one cell: per replicate i, draw the population on stream 4i (its
/// retry is 4i+1), draw Gaussian data on stream 4i+2, form the sample
/// covariance, and evaluate the requested metrics. Stream 4i+3 stays free
/// for callers that extend the pipeline.
pub fn run_cell(config: &ExperimentConfig) -> Result<ExperimentRecord> {
    config.validate()?;
    let spec = SampleSpec::new(config.n, config.q)?;
    let t = spec.observations();
    let needs_oracle = config
        .metrics
        .iter()
        .any(|m| matches!(m, Metric::KlOracle | Metric::FrobeniusOracle));

    let stats = aggregate_replicates(config.replicates, |i| {
        let base = 4 * i as u64;
        let c = match config.population {
            PopulationModel::InverseWishart { p } => {
                let pop = PopulationSpec::new(config.n, p)?;
                sample_inverse_wishart(&pop, &RngStream::with_stream(config.master_seed, base))?
            }
            PopulationModel::Identity => CovarianceMatrix::identity(config.n),
        };
        let x = sample_gaussian_data(&c, t, &RngStream::with_stream(config.master_seed, base + 2))?;
        let e = sample_covariance(&x)?;
        let oracle = if needs_oracle {
            Some(oracle_estimator(&e, &c)?)
        } else {
            None
        };
        let mut row = Vec::with_capacity(config.metrics.len());
        for metric in &config.metrics {
            let value = match metric {
                Metric::KlSample => kl_normalized(&c, &e)?,
                Metric::KlOracle => {
                    kl_normalized(&c, oracle.as_ref().expect("oracle computed").matrix())?
                }
                Metric::FrobeniusOracle => {
                    frobenius_error(&c, oracle.as_ref().expect("oracle computed").matrix())?
                }
            };
            row.push(value);
        }
        Ok(row)
    })?;

    let (p, qstar) = config.population.parameters();
    Ok(ExperimentRecord {
        n: config.n,
        q: config.q,
        effective_q: spec.effective_q(),
        p,
        qstar,
        replicates: config.replicates,
        seed: config.master_seed,
        metrics: config
            .metrics
            .iter()
            .zip(stats)
            .map(|(&metric, (mean, stderr))| MetricSummary {
                metric,
                mean,
                stderr,
            })
            .collect(),
        walltime_s: 0.0,
    })
}

/// Runs a grid of cells. Each cell runs under a seed derived from
/// (master_seed, cell index), replacing the seed in the cell's own config,
/// so grids are reproducible as a whole without hand-assigning seeds. A
/// failing cell is recorded and the remaining cells still run.
pub fn run_grid(master_seed: u64, grid: &[ExperimentConfig]) -> Result<GridReport> {
    if grid.is_empty() {
        return Err(Error::InvalidParameter(
            "grid must contain at least one cell".into(),
        ));
    }
    let mut report = GridReport::default();
    for (index, cell) in grid.iter().enumerate() {
        let mut cell = cell.clone();
        cell.master_seed = derive_cell_seed(master_seed, index);
        match run_cell(&cell) {
            Ok(record) => report.records.push(record),
            Err(error) => report.failures.push(CellFailure { index, error }),
        }
    }
    Ok(report)
}

/// Distills oracle-KL records into regressor rows, computing both shrinkage
/// weights per row. Records without a kl_oracle metric, without an inverse
/// Wishart population, or with non-finite statistics are skipped; the count
/// of skipped records is returned alongside the dataset.
pub fn build_regression_dataset(records: &[ExperimentRecord]) -> (RegressionDataset, usize) {
    let mut rows = Vec::new();
    let mut skipped = 0usize;
    for record in records {
        let summary = record
            .metrics
            .iter()
            .find(|m| m.metric == Metric::KlOracle);
        let usable = summary
            .filter(|s| s.mean.is_finite() && s.stderr.is_finite())
            .and_then(|s| {
                if record.p > 0.0 {
                    let r_finite = shrinkage_r(record.n, record.p, record.q).ok()?;
                    let r_asymptotic = shrinkage_r_asymptotic(record.p, record.q).ok()?;
                    Some(RegressionRow {
                        q: record.q,
                        qstar: record.qstar,
                        r_finite: r_finite.value(),
                        r_asymptotic: r_asymptotic.value(),
                        target_kl_norm: s.mean,
                        stderr: s.stderr,
                    })
                } else {
                    None
                }
            });
        match usable {
            Some(row) => rows.push(row),
            None => skipped += 1,
        }
    }
    (RegressionDataset { rows }, skipped)
}

/// Renders records as CSV text (header plus one line per cell and metric).
pub fn records_to_csv(records: &[ExperimentRecord]) -> String {
    let mut out = String::from(RECORDS_HEADER);
    out.push('\n');
    for r in records {
        for m in &r.metrics {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                RECORDS_SCHEMA,
                r.n,
                format_float(r.q),
                format_float(r.effective_q),
                format_float(r.p),
                format_float(r.qstar),
                r.replicates,
                r.seed,
                m.metric,
                format_float(m.mean),
                format_float(m.stderr),
                format_float(r.walltime_s),
            ));
        }
    }
    out
}

/// Parses records CSV text, grouping consecutive rows that echo the same
/// cell back into one record per cell.
pub fn records_from_csv(text: &str) -> Result<Vec<ExperimentRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == RECORDS_HEADER => {}
        Some((_, header)) => {
            return Err(Error::SchemaMismatch {
                expected: RECORDS_HEADER.into(),
                found: header.into(),
            })
        }
        None => {
            return Err(Error::SchemaMismatch {
                expected: RECORDS_HEADER.into(),
                found: String::new(),
            })
        }
    }
    let mut records: Vec<ExperimentRecord> = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 12 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected 12 fields, got {}", fields.len()),
            });
        }
        if fields[0] != RECORDS_SCHEMA {
            return Err(Error::SchemaMismatch {
                expected: RECORDS_SCHEMA.into(),
                found: fields[0].into(),
            });
        }
        let n: usize = parse_int(fields[1], lineno, "a dimension")?;
        let q = parse_float(fields[2], lineno)?;
        let effective_q = parse_float(fields[3], lineno)?;
        let p = parse_float(fields[4], lineno)?;
        let qstar = parse_float(fields[5], lineno)?;
        let replicates: usize = parse_int(fields[6], lineno, "a replicate count")?;
        let seed: u64 = parse_int(fields[7], lineno, "a seed")?;
        let metric: Metric = fields[8].parse().map_err(|e: Error| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let summary = MetricSummary {
            metric,
            mean: parse_float(fields[9], lineno)?,
            stderr: parse_float(fields[10], lineno)?,
        };
        let walltime_s = parse_float(fields[11], lineno)?;

        let same_cell = records.last().is_some_and(|r: &ExperimentRecord| {
            r.n == n
                && r.q == q
                && r.effective_q == effective_q
                && r.p == p
                && r.qstar == qstar
                && r.replicates == replicates
                && r.seed == seed
                && r.walltime_s == walltime_s
        });
        if same_cell {
            records.last_mut().unwrap().metrics.push(summary);
        } else {
            records.push(ExperimentRecord {
                n,
                q,
                effective_q,
                p,
                qstar,
                replicates,
                seed,
                metrics: vec![summary],
                walltime_s,
            });
        }
    }
    Ok(records)
}

/// Renders a regression dataset as CSV text.
pub fn dataset_to_csv(dataset: &RegressionDataset) -> String {
    let mut out = String::from(DATASET_HEADER);
    out.push('\n');
    for row in &dataset.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            DATASET_SCHEMA,
            format_float(row.q),
            format_float(row.qstar),
            format_float(row.r_finite),
            format_float(row.r_asymptotic),
            format_float(row.target_kl_norm),
            format_float(row.stderr),
        ));
    }
    out
}

/// Parses a regression dataset from CSV text.
pub fn dataset_from_csv(text: &str) -> Result<RegressionDataset> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == DATASET_HEADER => {}
        Some((_, header)) => {
            return Err(Error::SchemaMismatch {
                expected: DATASET_HEADER.into(),
                found: header.into(),
            })
        }
        None => {
            return Err(Error::SchemaMismatch {
                expected: DATASET_HEADER.into(),
                found: String::new(),
            })
        }
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected 7 fields, got {}", fields.len()),
            });
        }
        if fields[0] != DATASET_SCHEMA {
            return Err(Error::SchemaMismatch {
                expected: DATASET_SCHEMA.into(),
                found: fields[0].into(),
            });
        }
        rows.push(RegressionRow {
            q: parse_float(fields[1], lineno)?,
            qstar: parse_float(fields[2], lineno)?,
            r_finite: parse_float(fields[3], lineno)?,
            r_asymptotic: parse_float(fields[4], lineno)?,
            target_kl_norm: parse_float(fields[5], lineno)?,
            stderr: parse_float(fields[6], lineno)?,
        });
    }
    Ok(RegressionDataset { rows })
}

/// Writes records CSV to disk.
pub fn persist_records(records: &[ExperimentRecord], path: &Path) -> Result<()> {
    fs::write(path, records_to_csv(records))?;
    Ok(())
}

/// Reads records CSV from disk.
pub fn load_records(path: &Path) -> Result<Vec<ExperimentRecord>> {
    records_from_csv(&fs::read_to_string(path)?)
}

/// Writes a regression dataset CSV to disk.
pub fn persist_dataset(dataset: &RegressionDataset, path: &Path) -> Result<()> {
    fs::write(path, dataset_to_csv(dataset))?;
    Ok(())
}

/// Reads a regression dataset CSV from disk.
pub fn load_dataset(path: &Path) -> Result<RegressionDataset> {
    dataset_from_csv(&fs::read_to_string(path)?)
}
