//! Experiment driver: configuration, data generation, runs with trace files,
//! trace comparison and the verify suite.

mod config;
mod trace;
mod verify;

pub use config::{defaults_toml, Algorithm, ExperimentConfig, InitPolicy, SystemSource, VerifyConfig};
pub use trace::{tail_log_linear_fit, LogLinearFit, TraceFile, FIT_FLOOR, TRACE_COLUMNS, TRACE_MAGIC};
pub use verify::{cmd_verify, cmd_verify_file, CheckResult, VerifyReport};

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::certificates::riccati_oracle;
use crate::data::{self, gaussian_batch, DataMatrices, SystemModel};
use crate::error::{Error, Result};
use crate::optimizer::{run_deepo, OptimizerConfig, OptimizerTrace, StopReason};
use crate::policy::{initial_policy_from_gain, recover_gain, LqrProblem, PolicyG};
use config::{matrix_to_rows, rows_to_matrix};

/// Stream offset for the initial-policy perturbation, so it never shares
/// draws with the data batch.
const INIT_STREAM: u64 = 0x1d1e_5eed;

/// Slack allowed on step-to-step increases of the relative error.
pub const MONOTONE_SLACK: f64 = 1e-12;

#[derive(Clone, Debug, Serialize)]
pub struct GenDataReport {
    pub path: PathBuf,
    pub seed: u64,
    pub data_length: usize,
    pub rank: usize,
    pub sigma_min_d: f64,
    pub rank_tolerance: f64,
}

pub fn generate_data(config: &ExperimentConfig) -> Result<(SystemModel, DataMatrices)> {
    config.validate()?;
    let system = config.system_model()?;
    let data = gaussian_batch(&system, config.data_length, config.seed)?;
    Ok((system, data))
}

/// Draws the data batch and writes it to `path`.
pub fn cmd_gen_data(config: &ExperimentConfig, path: &Path) -> Result<GenDataReport> {
    let (system, data) = generate_data(config)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    data::save(&data, path)?;
    Ok(GenDataReport {
        path: path.to_path_buf(),
        seed: config.seed,
        data_length: data.len(),
        rank: system.n() + system.m(),
        sigma_min_d: data.sigma_min_d(),
        rank_tolerance: data::rank_tolerance(&data),
    })
}

/// Loads a data file and checks it against the configured system.
pub fn load_data(config: &ExperimentConfig, path: &Path) -> Result<(SystemModel, DataMatrices)> {
    config.validate()?;
    let system = config.system_model()?;
    let data = data::load(path)?;
    if data.n() != system.n() || data.m() != system.m() {
        return Err(Error::DimensionMismatch(format!(
            "data has n = {}, m = {}, configured system has n = {}, m = {}",
            data.n(),
            data.m(),
            system.n(),
            system.m()
        )));
    }
    Ok((system, data))
}

/// Initial policy of `algorithm` under the configured init rule.
pub fn initial_policy(config: &ExperimentConfig, algorithm: Algorithm, data: &DataMatrices) -> Result<PolicyG> {
    let (n, m) = (data.n(), data.m());
    let zero = DMatrix::zeros(m, n);
    let perturbed = |variance: f64| -> Result<PolicyG> {
        let base = initial_policy_from_gain(&zero, data, config.stability_margin)?;
        let normal = Normal::new(0.0, variance.sqrt()).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ INIT_STREAM);
        let noise = DMatrix::from_fn(data.len(), n, |_, _| normal.sample(&mut rng));
        Ok(PolicyG::new(base.matrix() + data.pi_d().matrix() * noise))
    };
    match &config.init {
        InitPolicy::Auto if algorithm == Algorithm::DeepoCe => perturbed(0.01),
        InitPolicy::Auto | InitPolicy::ZeroGain => initial_policy_from_gain(&zero, data, config.stability_margin),
        InitPolicy::GivenGain { gain } => initial_policy_from_gain(&rows_to_matrix(gain), data, config.stability_margin),
        InitPolicy::Perturbed { variance } => perturbed(*variance),
    }
}

/// Summary figures derived from a finished run.
#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub status: String,
    /// Relative error never increases by more than the monotonicity slack.
    pub monotone: bool,
    pub max_increase: f64,
    pub tail_fit: Option<LogLinearFit>,
    pub max_null_norm: f64,
    pub final_proj_grad_norm: f64,
    pub max_constraint_residual: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub algorithm: Algorithm,
    pub final_gain: Vec<Vec<f64>>,
    pub optimal_gain: Vec<Vec<f64>>,
    /// `||K - K*||_F` against the Riccati solution.
    pub gain_error: f64,
    /// `J*` of the Riccati solution.
    pub j_star: f64,
    /// Reference optimum of the objective actually minimized.
    pub j_ref: f64,
    pub final_rel_err: f64,
    pub iterations: usize,
    pub wall_time_s: f64,
    pub trace_path: PathBuf,
    pub summary: RunSummary,
}

/// Result of one run kept in memory.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub report: RunReport,
    pub trace: OptimizerTrace,
    pub trace_file: TraceFile,
}

fn optimizer_config(eta: f64, max_iter: usize, grad_tol: f64) -> OptimizerConfig {
    OptimizerConfig::fixed(eta, max_iter, grad_tol)
}

fn status_name(s: StopReason) -> &'static str {
    match s {
        StopReason::Converged => "converged",
        StopReason::MaxIterations => "max-iterations",
        StopReason::LineSearchStalled => "line-search-stalled",
    }
}

/// Runs `algorithm` on `data` and builds the trace and report, without
/// touching the file system.
pub fn execute_run(config: &ExperimentConfig, algorithm: Algorithm, system: &SystemModel, data: &DataMatrices) -> Result<RunOutcome> {
    config.validate()?;
    let oracle = riccati_oracle(system, data)?;
    let reg = config.regularization(algorithm);
    let problem = LqrProblem::regularized(data, system.q().clone(), system.r().clone(), reg)?
        .with_stability_margin(config.stability_margin);
    let g0 = initial_policy(config, algorithm, data)?;

    let start = Instant::now();
    let trace = run_deepo(&problem, &g0, &optimizer_config(config.eta, config.max_iter, config.grad_tol))?;
    let wall_time_s = start.elapsed().as_secs_f64();

    let j_ref = if reg.is_none() {
        oracle.j_star
    } else {
        let mut cfg = optimizer_config(config.eta, config.reference_max_iter, config.reference_grad_tol);
        cfg.keep_iterates = false;
        run_deepo(&problem, &g0, &cfg)?.last().cost
    };

    let (n, m) = (data.n(), data.m());
    let mut columns: Vec<String> = TRACE_COLUMNS.iter().map(|s| s.to_string()).collect();
    for i in 0..m {
        for j in 0..n {
            columns.push(format!("K_{i}_{j}"));
        }
    }
    let mut file = TraceFile::new(columns);
    file.set("algorithm", algorithm);
    file.set("seed", config.seed);
    file.set("n", n);
    file.set("m", m);
    file.set("T", data.len());
    file.set("lambda", format!("{:.17e}", reg.lambda_ce));
    file.set("gamma", format!("{:.17e}", reg.gamma_rob));
    file.set("j_star", format!("{:.17e}", oracle.j_star));
    file.set("j_ref", format!("{:.17e}", j_ref));
    let kstar: Vec<String> = oracle.k_star.transpose().iter().map(|v| format!("{v:.17e}")).collect();
    file.set("k_star", kstar.join(" "));
    file.set("status", status_name(trace.status));
    file.set("wall_time_s", format!("{wall_time_s:.6}"));

    let mut rel = Vec::with_capacity(trace.records.len());
    let mut max_constraint_residual: f64 = 0.0;
    for r in &trace.records {
        let g = PolicyG::new(r.iterate.clone().expect("iterates are kept"));
        max_constraint_residual = max_constraint_residual.max(g.constraint_residual(data));
        let k = recover_gain(&g, data);
        let e = (r.cost - j_ref) / j_ref;
        rel.push(e);
        let mut row = vec![r.k as f64, e, r.lqr_cost, r.cost, r.proj_grad_norm, r.null_norm, r.step];
        row.extend(k.transpose().iter());
        file.rows.push(row);
    }

    let max_increase = rel.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
    let final_gain = recover_gain(&trace.final_policy, data);
    let report = RunReport {
        config: config.clone(),
        algorithm,
        final_gain: matrix_to_rows(&final_gain),
        optimal_gain: matrix_to_rows(&oracle.k_star),
        gain_error: (&final_gain - &oracle.k_star).norm(),
        j_star: oracle.j_star,
        j_ref,
        final_rel_err: *rel.last().expect("trace has records"),
        iterations: trace.iterations(),
        wall_time_s,
        trace_path: config.trace_path(algorithm),
        summary: RunSummary {
            status: status_name(trace.status).into(),
            monotone: rel.len() < 2 || max_increase <= MONOTONE_SLACK,
            max_increase: max_increase.max(0.0),
            tail_fit: tail_log_linear_fit(&rel, FIT_FLOOR),
            max_null_norm: trace.records.iter().map(|r| r.null_norm).fold(0.0, f64::max),
            final_proj_grad_norm: trace.last().proj_grad_norm,
            max_constraint_residual,
        },
    };
    Ok(RunOutcome {
        report,
        trace,
        trace_file: file,
    })
}

/// Runs `algorithm` on the data file and writes the trace and a JSON report
/// into the output directory.
pub fn cmd_run(config: &ExperimentConfig, algorithm: Algorithm, data_path: &Path) -> Result<RunReport> {
    let (system, data) = load_data(config, data_path)?;
    let outcome = execute_run(config, algorithm, &system, &data)?;
    std::fs::create_dir_all(&config.output_dir)?;
    outcome.trace_file.save(&outcome.report.trace_path)?;
    let json = serde_json::to_string_pretty(&outcome.report).expect("report serializes");
    std::fs::write(config.report_path(algorithm), json)?;
    Ok(outcome.report)
}

/// Recomputes the headline numbers of a report from a trace file alone:
/// `(final K, ||K - K*||_F, final relative error, iterations)`.
pub fn summarize_trace(file: &TraceFile) -> Result<(DMatrix<f64>, f64, f64, usize)> {
    let n: usize = file.get_f64("n")? as usize;
    let m: usize = file.get_f64("m")? as usize;
    let last = file.rows.len() - 1;
    let k = file.gain_at(last, m, n)?;
    let kstar: Vec<f64> = file
        .get("k_star")?
        .split_whitespace()
        .map(|v| v.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Parse {
            line: 0,
            message: format!("bad k_star: {e}"),
        })?;
    if kstar.len() != m * n {
        return Err(Error::MissingTrace("k_star has the wrong size".into()));
    }
    let kstar = DMatrix::from_row_slice(m, n, &kstar);
    let rel = file.column("rel_err")?;
    Ok((k.clone(), (k - kstar).norm(), rel[last], last))
}

#[derive(Clone, Debug, Serialize)]
pub struct RateSummary {
    pub label: String,
    pub iterations: usize,
    pub final_rel_err: f64,
    pub fit: Option<LogLinearFit>,
}

#[derive(Clone, Debug, Serialize)]
pub struct CompareReport {
    pub labels: Vec<String>,
    /// `k,<label>,<label>,...` with empty cells past the end of a shorter trace.
    pub table: String,
    pub rates: Vec<RateSummary>,
}

impl CompareReport {
    /// One line per trace: fitted slope of `ln(rel_err)` per iteration.
    pub fn rate_text(&self) -> String {
        let mut out = String::new();
        for r in &self.rates {
            match &r.fit {
                Some(f) => {
                    let _ = writeln!(
                        out,
                        "{}: slope {:.6e} per iteration (R^2 {:.6}, {} points from k = {}), final rel_err {:.3e} after {} iterations",
                        r.label, f.slope, f.r_squared, f.points, f.first_k, r.final_rel_err, r.iterations
                    );
                }
                None => {
                    let _ = writeln!(
                        out,
                        "{}: too few points above {:.0e} for a rate fit, final rel_err {:.3e} after {} iterations",
                        r.label, FIT_FLOOR, r.final_rel_err, r.iterations
                    );
                }
            }
        }
        let mut fitted: Vec<&RateSummary> = self.rates.iter().filter(|r| r.fit.is_some()).collect();
        fitted.sort_by(|a, b| a.fit.unwrap().slope.total_cmp(&b.fit.unwrap().slope));
        let order: Vec<&str> = fitted.iter().map(|r| r.label.as_str()).collect();
        let _ = writeln!(out, "observed ordering, fastest first: {}", order.join(", "));
        out
    }
}

/// Aligns relative-error columns of finished runs by iteration.
pub fn compare_traces(traces: &[TraceFile]) -> Result<CompareReport> {
    if traces.len() < 2 {
        return Err(Error::MissingTrace(format!("compare needs at least two traces, got {}", traces.len())));
    }
    let mut labels = Vec::new();
    let mut columns = Vec::new();
    let mut rates = Vec::new();
    for (i, t) in traces.iter().enumerate() {
        let base = t.get("algorithm").unwrap_or("trace").to_string();
        let label = if labels.contains(&base) { format!("{base}-{i}") } else { base };
        let rel = t.column("rel_err")?;
        rates.push(RateSummary {
            label: label.clone(),
            iterations: rel.len() - 1,
            final_rel_err: *rel.last().expect("non-empty"),
            fit: tail_log_linear_fit(&rel, FIT_FLOOR),
        });
        labels.push(label);
        columns.push(rel);
    }
    let len = columns.iter().map(Vec::len).max().unwrap_or(0);
    let mut table = String::new();
    let _ = writeln!(table, "k,{}", labels.join(","));
    for k in 0..len {
        let cells: Vec<String> = columns
            .iter()
            .map(|c| c.get(k).map(|v| format!("{v:.17e}")).unwrap_or_default())
            .collect();
        let _ = writeln!(table, "{k},{}", cells.join(","));
    }
    Ok(CompareReport { labels, table, rates })
}

pub fn cmd_compare(paths: &[PathBuf]) -> Result<CompareReport> {
    if paths.len() < 2 {
        return Err(Error::MissingTrace(format!("compare needs at least two traces, got {}", paths.len())));
    }
    let traces = paths.iter().map(TraceFile::load).collect::<Result<Vec<_>>>()?;
    compare_traces(&traces)
}
