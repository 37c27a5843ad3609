//! Command-line interface: Monte Carlo validation of the analytic loss
//! formulas, series sweeps, convergence-region maps, regression-dataset
//! generation, and symbolic regression.
//!
//! Every subcommand writes a `manifest.json` (schema `rmtman-1`) with the
//! fully resolved configuration before any computation starts; rerunning the
//! subcommand with the recorded values reproduces every output byte for
//! byte at any worker count. Timings go to stderr only, so stdout and all
//! files stay deterministic.
//!
//! Exit codes: 0 success, 1 statistical validation failure, 2 usage or
//! configuration error.

use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analytics::{
    expected_frobenius_oracle, expected_kl_in_out, expected_kl_sample, expected_log_det_wishart,
    expected_tau_inv_wishart, oracle_kl_closed, oracle_kl_partial_sum, oracle_rq_from_qstar,
    p_from_qstar,
};
use crate::divergence::kl_normalized;
use crate::error::{Error, Result};
use crate::estimators::shrinkage_r_asymptotic;
use crate::montecarlo::{
    aggregate_replicates, build_regression_dataset, derive_cell_seed, format_float,
    persist_dataset, persist_records, run_grid, ExperimentConfig, ExperimentRecord, GridReport,
    Metric, PopulationModel,
};
use crate::sampling::{sample_white_wishart, PopulationSpec, RngStream, SampleSpec};
use crate::symreg::{evolve_rounds, fitness, history_to_csv, simplify, FitnessReport, GpConfig};

/// Manifest schema tag.
pub const MANIFEST_SCHEMA: &str = "rmtman-1";
/// Sweep CSV header.
pub const SWEEP_HEADER: &str =
    "schema,q,qstar,order,partial_sum,closed_form,empirical_mean,stderr";
/// Sweep CSV schema tag.
pub const SWEEP_SCHEMA: &str = "sweep-1";
/// Region CSV header.
pub const REGION_HEADER: &str = "schema,q,qstar,rq,converges,boundary";
/// Region CSV schema tag.
pub const REGION_SCHEMA: &str = "region-1";

/// A z-score past this bound fails validation.
const Z_BOUND: f64 = 4.0;
/// Aspect ratios of the fixed sample-covariance checks.
const DEFAULT_Q_LIST: [f64; 3] = [0.25, 0.5, 0.75];
/// Population spreads of the oracle-loss grid.
const ORACLE_GRID_P: [f64; 3] = [0.5, 1.0, 3.0];
/// Aspect ratios of the oracle-loss grid.
const ORACLE_GRID_Q: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
/// In-sample and held-out aspect ratios of the two-Wishart KL check.
const TWO_SAMPLE_Q: (f64, f64) = (0.5, 0.9);
/// Parameter box for generated regression datasets.
const DATASET_QSTAR_RANGE: (f64, f64) = (0.05, 0.95);
const DATASET_Q_RANGE: (f64, f64) = (0.1, 7.0);
/// Cells with |rq - 4| within this band are flagged as boundary cells.
const REGION_BOUNDARY_BAND: f64 = 0.05;

#[derive(Debug, Parser)]
#[command(
    name = "rmtkl",
    version,
    about = "Random-matrix laboratory: losses of rotationally invariant covariance estimators"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate the analytic loss formulas against Monte Carlo
    Validate(ValidateArgs),
    /// Tabulate series partial sums against the closed form over a grid
    Sweep(SweepArgs),
    /// Map the series convergence region over the (q, q*) box
    Region(RegionArgs),
    /// Generate a regression dataset of Monte Carlo oracle losses
    Dataset(DatasetArgs),
    /// Search for the loss formula by genetic programming
    Symreg(SymregArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// Master seed; every random draw derives from it deterministically
    #[arg(long, default_value_t = 915)]
    seed: u64,
    /// Worker threads (0 = all logical cores); never affects output bytes
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Output directory, created if missing
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Full-scale run: n=1000, 500 replicates, GP population 50000
    #[arg(long)]
    paper_scale: bool,
}

impl CommonArgs {
    fn n_default(&self) -> usize {
        if self.paper_scale {
            1000
        } else {
            200
        }
    }

    fn replicates_default(&self) -> usize {
        if self.paper_scale {
            500
        } else {
            100
        }
    }
}

#[derive(Debug, Args)]
struct ValidateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Matrix dimension
    #[arg(long)]
    n: Option<usize>,
    /// Replicates per Monte Carlo cell
    #[arg(long)]
    replicates: Option<usize>,
    /// Aspect ratios for the sample-covariance and Wishart checks
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    q: Option<Vec<f64>>,
    /// Restrict the run to one metric family
    /// (kl_sample, kl_oracle, frobenius_oracle)
    #[arg(long)]
    metric: Option<String>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Series truncation orders
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    orders: Option<Vec<usize>>,
    /// Grid cells along q in (0, 7)
    #[arg(long, default_value_t = 50)]
    grid_q: usize,
    /// Grid cells along q* in (0, 1)
    #[arg(long, default_value_t = 20)]
    grid_qstar: usize,
    /// Matrix dimension for the optional empirical column
    #[arg(long)]
    n: Option<usize>,
    /// Replicates per cell for the empirical column (0 = analytic only)
    #[arg(long, default_value_t = 0)]
    replicates: usize,
}

#[derive(Debug, Args)]
struct RegionArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Grid cells along q in (0, 7)
    #[arg(long, default_value_t = 100)]
    grid_q: usize,
    /// Grid cells along q* in (0, 1)
    #[arg(long, default_value_t = 100)]
    grid_qstar: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DatasetMode {
    /// Cell centers of a near-square grid over the parameter box
    Grid,
    /// Uniform draws over the parameter box
    Random,
}

#[derive(Debug, Args)]
struct DatasetArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Placement of the (q*, q) cells
    #[arg(long, value_enum, default_value_t = DatasetMode::Grid)]
    mode: DatasetMode,
    /// Number of parameter cells
    #[arg(long, default_value_t = 100)]
    cells: usize,
    /// Matrix dimension
    #[arg(long)]
    n: Option<usize>,
    /// Replicates per cell
    #[arg(long)]
    replicates: Option<usize>,
}

#[derive(Debug, Args)]
struct SymregArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Regression dataset CSV (schema rmtds-1)
    #[arg(long)]
    data: PathBuf,
    /// Independent evolution rounds
    #[arg(long, default_value_t = 4)]
    rounds: usize,
    /// Population size (default 5000, or 50000 at --paper-scale)
    #[arg(long)]
    population: Option<usize>,
    /// Generations per round
    #[arg(long, default_value_t = 40)]
    generations: usize,
    /// Per-node parsimony penalty
    #[arg(long, default_value_t = 1e-4)]
    parsimony: f64,
}

/// Parses the process arguments and runs the selected subcommand, returning
/// the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => code,
        Err(error) => {
            eprintln!("error: {error}");
            2
        }
    }
}

fn execute(cli: Cli) -> Result<i32> {
    let started = Instant::now();
    let (name, code) = match cli.command {
        Command::Validate(args) => ("validate", cmd_validate(args)?),
        Command::Sweep(args) => ("sweep", cmd_sweep(args)?),
        Command::Region(args) => ("region", cmd_region(args)?),
        Command::Dataset(args) => ("dataset", cmd_dataset(args)?),
        Command::Symreg(args) => ("symreg", cmd_symreg(args)?),
    };
    eprintln!("{name} finished in {:.1}s", started.elapsed().as_secs_f64());
    Ok(code)
}

fn install_workers(workers: usize) -> Result<()> {
    if workers == 0 {
        return Ok(());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build_global()
        .map_err(|e| Error::InvalidParameter(format!("worker pool: {e}")))
}

fn write_manifest(
    common: &CommonArgs,
    subcommand: &str,
    config: serde_json::Value,
    outputs: &[String],
) -> Result<()> {
    fs::create_dir_all(&common.out)?;
    let manifest = serde_json::json!({
        "schema": MANIFEST_SCHEMA,
        "tool_version": env!("CARGO_PKG_VERSION"),
        "subcommand": subcommand,
        "seed": common.seed,
        "workers": common.workers,
        "paper_scale": common.paper_scale,
        "config": config,
        "outputs": outputs,
    });
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(common.out.join("manifest.json"), text + "\n")?;
    Ok(())
}

fn fail_on_cell_failures(report: &GridReport) -> Result<()> {
    match report.failures.first() {
        Some(failure) => Err(Error::InvalidParameter(format!(
            "grid cell {} failed: {}",
            failure.index, failure.error
        ))),
        None => Ok(()),
    }
}

/// One validation check: an analytic prediction against a Monte Carlo mean.
///
/// The allowance is an empirically calibrated finite-size term (each scales
/// like 1/n, so z-scores stay roughly n-independent); the z-score divides the
/// deviation by the allowance and the Monte Carlo standard error combined in
/// quadrature.
struct Check {
    family: &'static str,
    params: String,
    analytic: f64,
    empirical: f64,
    stderr: f64,
    allowance: f64,
}

impl Check {
    fn z(&self) -> f64 {
        (self.empirical - self.analytic) / self.stderr.hypot(self.allowance)
    }
}

fn allowance_kl_sample(q: f64, n: usize) -> f64 {
    2.0 * q / ((1.0 - q).powi(2) * n as f64)
}

fn allowance_tau_inv(q: f64, n: usize) -> f64 {
    2.0 * q / ((1.0 - q).powi(2) * n as f64)
}

fn allowance_log_det(q: f64, n: usize) -> f64 {
    ((1.0 - q).ln().abs() + 1.0) / n as f64
}

fn allowance_two_sample(n: usize) -> f64 {
    5.0 / n as f64
}

fn allowance_kl_oracle(analytic: f64, n: usize) -> f64 {
    (20.0 * analytic.abs() + 2.0) / n as f64
}

fn allowance_frobenius(analytic: f64, n: usize) -> f64 {
    14.0 * analytic.abs() / n as f64
}

fn parse_metric_filter(raw: &Option<String>) -> Result<Option<Metric>> {
    match raw {
        None => Ok(None),
        Some(text) => text.parse::<Metric>().map(Some),
    }
}

/// Effective q* and p realized by the integer generating-sample count.
fn effective_population(n: usize, p: f64) -> Result<(f64, f64)> {
    let spec = PopulationSpec::new(n, p)?;
    let qstar_eff = n as f64 / spec.generating_observations() as f64;
    Ok((qstar_eff, p_from_qstar(qstar_eff)?))
}

fn cmd_validate(args: ValidateArgs) -> Result<i32> {
    install_workers(args.common.workers)?;
    let n = args.n.unwrap_or_else(|| args.common.n_default());
    let replicates = args.replicates.unwrap_or_else(|| args.common.replicates_default());
    let q_list = args.q.clone().unwrap_or_else(|| DEFAULT_Q_LIST.to_vec());
    let filter = parse_metric_filter(&args.metric)?;
    let run_family = |metric: Metric| filter.is_none() || filter == Some(metric);
    let full_mode = filter.is_none();

    if replicates < 2 {
        return Err(Error::InvalidParameter(
            "validation needs at least 2 replicates per cell".into(),
        ));
    }
    if q_list.is_empty() {
        return Err(Error::InvalidParameter("empty q list".into()));
    }
    for &q in &q_list {
        SampleSpec::new(n, q)?;
        if run_family(Metric::KlSample) && q >= 1.0 {
            return Err(Error::InvalidParameter(format!(
                "sample-covariance KL needs q < 1 (the sample covariance is \
                 singular otherwise), got q={q}"
            )));
        }
    }

    write_manifest(
        &args.common,
        "validate",
        serde_json::json!({
            "n": n,
            "replicates": replicates,
            "q": q_list,
            "metric": args.metric,
            "z_bound": Z_BOUND,
        }),
        &["report.txt".into(), "records.csv".into()],
    )?;

    let seed = args.common.seed;
    let mut checks: Vec<Check> = Vec::new();
    let mut all_records: Vec<ExperimentRecord> = Vec::new();

    // sample-covariance KL against its closed form
    if run_family(Metric::KlSample) {
        let grid: Vec<ExperimentConfig> = q_list
            .iter()
            .map(|&q| ExperimentConfig {
                n,
                q,
                population: PopulationModel::InverseWishart { p: 1.0 },
                metrics: vec![Metric::KlSample],
                replicates,
                master_seed: 0,
            })
            .collect();
        let report = run_grid(derive_cell_seed(seed, 0), &grid)?;
        fail_on_cell_failures(&report)?;
        for record in report.records {
            let q_eff = record.effective_q;
            let analytic = expected_kl_sample(q_eff)?;
            let summary = record.metrics[0];
            checks.push(Check {
                family: "kl_sample",
                params: format!("n={} q={}", record.n, record.q),
                analytic,
                empirical: summary.mean,
                stderr: summary.stderr,
                allowance: allowance_kl_sample(q_eff, record.n),
            });
            all_records.push(record);
        }
    }

    // white Wishart inverse-trace and log-determinant moments
    if full_mode {
        for (cell, &q) in q_list.iter().enumerate() {
            let spec = SampleSpec::new(n, q)?;
            let q_eff = spec.effective_q();
            let base = derive_cell_seed(derive_cell_seed(seed, 1), cell);
            let stats = aggregate_replicates(replicates, |i| {
                let stream = RngStream::with_stream(base, 4 * i as u64);
                let w = sample_white_wishart(n, q, &stream)?;
                let eig = w.spectral_decompose()?;
                let mut inv_trace = 0.0;
                let mut log_det = 0.0;
                for &lambda in &eig.eigenvalues {
                    if lambda <= 0.0 {
                        return Err(Error::SingularOrIndefinite);
                    }
                    inv_trace += 1.0 / lambda;
                    log_det += lambda.ln();
                }
                Ok(vec![inv_trace / n as f64, log_det / n as f64])
            })?;
            checks.push(Check {
                family: "tau_inv_wishart",
                params: format!("n={n} q={q}"),
                analytic: expected_tau_inv_wishart(q_eff)?,
                empirical: stats[0].0,
                stderr: stats[0].1,
                allowance: allowance_tau_inv(q_eff, n),
            });
            checks.push(Check {
                family: "log_det_wishart",
                params: format!("n={n} q={q}"),
                analytic: expected_log_det_wishart(q_eff)?,
                empirical: stats[1].0,
                stderr: stats[1].1,
                allowance: allowance_log_det(q_eff, n),
            });
        }
    }

    // KL of an in-sample Wishart estimate against an independent held-out
    // Wishart reference; the reference plays the population role, which is
    // what reduces to the one-sample formula at q_out = 0
    if full_mode {
        let (q_in, q_out) = TWO_SAMPLE_Q;
        let q_in_eff = SampleSpec::new(n, q_in)?.effective_q();
        let q_out_eff = SampleSpec::new(n, q_out)?.effective_q();
        let base = derive_cell_seed(seed, 2);
        let stats = aggregate_replicates(replicates, |i| {
            let w_in = sample_white_wishart(n, q_in, &RngStream::with_stream(base, 4 * i as u64))?;
            let w_out =
                sample_white_wishart(n, q_out, &RngStream::with_stream(base, 4 * i as u64 + 2))?;
            Ok(vec![kl_normalized(&w_out, &w_in)?])
        })?;
        checks.push(Check {
            family: "kl_two_sample",
            params: format!("n={n} q_in={q_in} q_out={q_out}"),
            analytic: expected_kl_in_out(q_in_eff, q_out_eff)?,
            empirical: stats[0].0,
            stderr: stats[0].1,
            allowance: allowance_two_sample(n),
        });
    }

    // oracle estimator losses over the (p, q) grid
    let oracle_metrics: Vec<Metric> = [Metric::KlOracle, Metric::FrobeniusOracle]
        .into_iter()
        .filter(|&m| run_family(m))
        .collect();
    if !oracle_metrics.is_empty() {
        let mut grid = Vec::new();
        for &p in &ORACLE_GRID_P {
            for &q in &ORACLE_GRID_Q {
                grid.push(ExperimentConfig {
                    n,
                    q,
                    population: PopulationModel::InverseWishart { p },
                    metrics: oracle_metrics.clone(),
                    replicates,
                    master_seed: 0,
                });
            }
        }
        let report = run_grid(derive_cell_seed(seed, 3), &grid)?;
        fail_on_cell_failures(&report)?;
        for record in report.records {
            let (_, p_eff) = effective_population(record.n, record.p)?;
            let q_eff = record.effective_q;
            for summary in &record.metrics {
                match summary.metric {
                    Metric::KlOracle => {
                        let prediction = oracle_kl_closed(p_eff, q_eff)?;
                        if !prediction.converges {
                            return Err(Error::InvalidParameter(format!(
                                "oracle KL cell p={} q={} lies outside the series \
                                 convergence region",
                                record.p, record.q
                            )));
                        }
                        checks.push(Check {
                            family: "kl_oracle",
                            params: format!("n={} p={} q={}", record.n, record.p, record.q),
                            analytic: prediction.closed_form,
                            empirical: summary.mean,
                            stderr: summary.stderr,
                            allowance: allowance_kl_oracle(prediction.closed_form, record.n),
                        });
                    }
                    Metric::FrobeniusOracle => {
                        let r = shrinkage_r_asymptotic(p_eff, q_eff)?;
                        let analytic = expected_frobenius_oracle(p_eff, q_eff, &r)?;
                        checks.push(Check {
                            family: "frobenius_oracle",
                            params: format!("n={} p={} q={}", record.n, record.p, record.q),
                            analytic,
                            empirical: summary.mean,
                            stderr: summary.stderr,
                            allowance: allowance_frobenius(analytic, record.n),
                        });
                    }
                    Metric::KlSample => {}
                }
            }
            all_records.push(record);
        }
    }

    // deterministic report: same bytes to stdout and report.txt
    let mut text = format!(
        "{:<18} {:<28} {:>24} {:>24} {:>24} {:>9} {}\n",
        "metric", "params", "analytic", "empirical", "stderr", "z", "status"
    );
    let mut failures = 0usize;
    for check in &checks {
        let z = check.z();
        let pass = z.abs() <= Z_BOUND;
        if !pass {
            failures += 1;
        }
        text.push_str(&format!(
            "{:<18} {:<28} {:>24} {:>24} {:>24} {:>9} {}\n",
            check.family,
            check.params,
            format_float(check.analytic),
            format_float(check.empirical),
            format_float(check.stderr),
            format!("{:+.2}", z),
            if pass { "ok" } else { "FAIL" },
        ));
    }
    if failures == 0 {
        text.push_str(&format!(
            "result: PASS ({}/{} checks within {} sigma)\n",
            checks.len(),
            checks.len(),
            Z_BOUND
        ));
    } else {
        text.push_str(&format!(
            "result: FAIL ({failures} of {} checks outside {} sigma)\n",
            checks.len(),
            Z_BOUND
        ));
    }
    print!("{text}");
    fs::write(args.common.out.join("report.txt"), &text)?;
    persist_records(&all_records, &args.common.out.join("records.csv"))?;

    Ok(if failures == 0 { 0 } else { 1 })
}

/// Cell centers of a 1-d grid over the open interval (low, high).
fn grid_centers(low: f64, high: f64, cells: usize) -> Vec<f64> {
    (0..cells)
        .map(|i| low + (high - low) * (i as f64 + 0.5) / cells as f64)
        .collect()
}

fn cmd_sweep(args: SweepArgs) -> Result<i32> {
    install_workers(args.common.workers)?;
    let orders = args.orders.clone().unwrap_or_else(|| vec![1, 2, 4, 8, 16]);
    if orders.is_empty() {
        return Err(Error::InvalidParameter("empty order list".into()));
    }
    if orders.iter().any(|&k| k == 0) {
        return Err(Error::InvalidParameter(
            "series orders must be at least 1".into(),
        ));
    }
    if args.grid_q == 0 || args.grid_qstar == 0 {
        return Err(Error::InvalidParameter("grids need at least one cell".into()));
    }
    let n = args.n.unwrap_or_else(|| args.common.n_default());
    if args.replicates == 1 {
        return Err(Error::InvalidParameter(
            "empirical sweeps need at least 2 replicates (or 0 to skip)".into(),
        ));
    }

    write_manifest(
        &args.common,
        "sweep",
        serde_json::json!({
            "orders": orders,
            "grid_q": args.grid_q,
            "grid_qstar": args.grid_qstar,
            "n": n,
            "replicates": args.replicates,
        }),
        &["sweep.csv".into()],
    )?;

    let q_values = grid_centers(0.0, 7.0, args.grid_q);
    let qstar_values = grid_centers(0.0, 1.0, args.grid_qstar);

    // optional empirical column: one oracle-KL cell per (q, q*) point
    let cell_count = args.grid_q * args.grid_qstar;
    let mut empirical = vec![(f64::NAN, f64::NAN); cell_count];
    if args.replicates > 0 {
        let mut grid = Vec::with_capacity(cell_count);
        for &q in &q_values {
            for &qstar in &qstar_values {
                grid.push(ExperimentConfig {
                    n,
                    q,
                    population: PopulationModel::InverseWishart {
                        p: p_from_qstar(qstar)?,
                    },
                    metrics: vec![Metric::KlOracle],
                    replicates: args.replicates,
                    master_seed: 0,
                });
            }
        }
        let report = run_grid(args.common.seed, &grid)?;
        fail_on_cell_failures(&report)?;
        for (slot, record) in empirical.iter_mut().zip(report.records.iter()) {
            *slot = (record.metrics[0].mean, record.metrics[0].stderr);
        }
    }

    let mut csv = String::from(SWEEP_HEADER);
    csv.push('\n');
    for &order in &orders {
        for (iq, &q) in q_values.iter().enumerate() {
            for (js, &qstar) in qstar_values.iter().enumerate() {
                let p = p_from_qstar(qstar)?;
                let partial = oracle_kl_partial_sum(p, q, order)?;
                let closed = oracle_kl_closed(p, q)?.closed_form;
                let (mean, stderr) = empirical[iq * args.grid_qstar + js];
                csv.push_str(&format!(
                    "{},{},{},{},{},{},{},{}\n",
                    SWEEP_SCHEMA,
                    format_float(q),
                    format_float(qstar),
                    order,
                    format_float(partial),
                    format_float(closed),
                    format_float(mean),
                    format_float(stderr),
                ));
            }
        }
    }
    fs::write(args.common.out.join("sweep.csv"), csv)?;
    Ok(0)
}

fn cmd_region(args: RegionArgs) -> Result<i32> {
    install_workers(args.common.workers)?;
    if args.grid_q == 0 || args.grid_qstar == 0 {
        return Err(Error::InvalidParameter("grids need at least one cell".into()));
    }

    write_manifest(
        &args.common,
        "region",
        serde_json::json!({
            "grid_q": args.grid_q,
            "grid_qstar": args.grid_qstar,
            "boundary_band": REGION_BOUNDARY_BAND,
        }),
        &["region.csv".into()],
    )?;

    let mut csv = String::from(REGION_HEADER);
    csv.push('\n');
    for &q in &grid_centers(0.0, 7.0, args.grid_q) {
        for &qstar in &grid_centers(0.0, 1.0, args.grid_qstar) {
            let rq = oracle_rq_from_qstar(qstar, q)?;
            csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                REGION_SCHEMA,
                format_float(q),
                format_float(qstar),
                format_float(rq),
                rq < 4.0,
                (rq - 4.0).abs() <= REGION_BOUNDARY_BAND,
            ));
        }
    }
    fs::write(args.common.out.join("region.csv"), csv)?;
    Ok(0)
}

/// (q*, q) cell centers of a near-square grid over the dataset box,
/// truncated to exactly `cells` points.
fn dataset_grid_points(cells: usize) -> Vec<(f64, f64)> {
    let rows_qstar = ((cells as f64).sqrt().floor() as usize).max(1);
    let rows_q = cells.div_ceil(rows_qstar);
    let qstar_values = grid_centers(DATASET_QSTAR_RANGE.0, DATASET_QSTAR_RANGE.1, rows_qstar);
    let q_values = grid_centers(DATASET_Q_RANGE.0, DATASET_Q_RANGE.1, rows_q);
    let mut points = Vec::with_capacity(cells);
    'fill: for &qstar in &qstar_values {
        for &q in &q_values {
            if points.len() == cells {
                break 'fill;
            }
            points.push((qstar, q));
        }
    }
    points
}

/// Uniform (q*, q) draws over the dataset box. The generator seed is derived
/// outside the per-cell seed sequence, so placement and cell randomness never
/// collide.
fn dataset_random_points(cells: usize, seed: u64) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_cell_seed(seed, usize::MAX));
    (0..cells)
        .map(|_| {
            (
                rng.random_range(DATASET_QSTAR_RANGE.0..DATASET_QSTAR_RANGE.1),
                rng.random_range(DATASET_Q_RANGE.0..DATASET_Q_RANGE.1),
            )
        })
        .collect()
}

fn cmd_dataset(args: DatasetArgs) -> Result<i32> {
    install_workers(args.common.workers)?;
    if args.cells == 0 {
        return Err(Error::InvalidParameter(
            "dataset generation needs at least one cell".into(),
        ));
    }
    let n = args.n.unwrap_or_else(|| args.common.n_default());
    let replicates = args.replicates.unwrap_or_else(|| args.common.replicates_default());
    if replicates < 2 {
        return Err(Error::InvalidParameter(
            "dataset generation needs at least 2 replicates per cell".into(),
        ));
    }

    write_manifest(
        &args.common,
        "dataset",
        serde_json::json!({
            "mode": match args.mode { DatasetMode::Grid => "grid", DatasetMode::Random => "random" },
            "cells": args.cells,
            "n": n,
            "replicates": replicates,
            "qstar_range": [DATASET_QSTAR_RANGE.0, DATASET_QSTAR_RANGE.1],
            "q_range": [DATASET_Q_RANGE.0, DATASET_Q_RANGE.1],
        }),
        &["dataset.csv".into()],
    )?;

    let points = match args.mode {
        DatasetMode::Grid => dataset_grid_points(args.cells),
        DatasetMode::Random => dataset_random_points(args.cells, args.common.seed),
    };
    let mut grid = Vec::with_capacity(points.len());
    for &(qstar, q) in &points {
        grid.push(ExperimentConfig {
            n,
            q,
            population: PopulationModel::InverseWishart {
                p: p_from_qstar(qstar)?,
            },
            metrics: vec![Metric::KlOracle],
            replicates,
            master_seed: 0,
        });
    }
    let report = run_grid(args.common.seed, &grid)?;
    for failure in &report.failures {
        eprintln!("cell {} failed: {}", failure.index, failure.error);
    }
    let (dataset, skipped) = build_regression_dataset(&report.records);
    if dataset.rows.is_empty() {
        return Err(Error::InvalidParameter(
            "no dataset rows survived; every cell failed or was skipped".into(),
        ));
    }
    persist_dataset(&dataset, &args.common.out.join("dataset.csv"))?;
    println!(
        "dataset rows: {} (skipped {}, failed cells {})",
        dataset.rows.len(),
        skipped,
        report.failures.len()
    );
    Ok(0)
}

fn final_report(history: &[FitnessReport]) -> FitnessReport {
    *history.last().expect("evolution history is never empty")
}

fn expression_file(
    round: usize,
    seed: u64,
    best: &crate::symreg::Expression,
    report: FitnessReport,
) -> String {
    format!(
        "round: {round}\nseed: {seed}\nprefix: {}\ninfix: {}\nsimplified: {}\nraw_mse: {}\npenalized_fitness: {}\nsize: {}\n",
        best.to_prefix(),
        best.to_infix(),
        simplify(best).to_prefix(),
        format_float(report.raw_mse),
        format_float(report.penalized_fitness),
        report.size,
    )
}

fn cmd_symreg(args: SymregArgs) -> Result<i32> {
    install_workers(args.common.workers)?;
    let dataset = crate::montecarlo::load_dataset(&args.data)?;
    if dataset.rows.is_empty() {
        return Err(Error::InvalidParameter(format!(
            "dataset {} has no rows",
            args.data.display()
        )));
    }
    let config = GpConfig {
        population_size: args
            .population
            .unwrap_or(if args.common.paper_scale { 50000 } else { 5000 }),
        generations: args.generations,
        parsimony: args.parsimony,
        seed: args.common.seed,
        independent_runs: args.rounds,
        ..GpConfig::default()
    };
    config.validate()?;

    let mut outputs: Vec<String> = Vec::new();
    for round in 0..config.independent_runs {
        outputs.push(format!("round_{round}_expression.txt"));
        outputs.push(format!("round_{round}_history.csv"));
    }
    outputs.push("best_expression.txt".into());
    write_manifest(
        &args.common,
        "symreg",
        serde_json::json!({
            "data": args.data.display().to_string(),
            "gp": config,
        }),
        &outputs,
    )?;

    let rounds = evolve_rounds(&config, &dataset)?;
    let mut best_round = 0;
    for (i, round) in rounds.iter().enumerate() {
        let report = final_report(&round.history);
        fs::write(
            args.common.out.join(format!("round_{i}_expression.txt")),
            expression_file(i, round.seed, &round.best, report),
        )?;
        fs::write(
            args.common.out.join(format!("round_{i}_history.csv")),
            history_to_csv(&round.history),
        )?;
        println!(
            "round {i}: raw_mse={} size={}",
            format_float(report.raw_mse),
            report.size
        );
        let current = final_report(&rounds[best_round].history);
        if (report.raw_mse, report.size, i) < (current.raw_mse, current.size, best_round) {
            best_round = i;
        }
    }
    let winner = &rounds[best_round];
    let winner_report = fitness(&winner.best, &dataset, config.parsimony)?;
    fs::write(
        args.common.out.join("best_expression.txt"),
        expression_file(best_round, winner.seed, &winner.best, winner_report),
    )?;
    println!(
        "best round {best_round}: raw_mse={} prefix={}",
        format_float(winner_report.raw_mse),
        winner.best.to_prefix()
    );
    Ok(0)
}
