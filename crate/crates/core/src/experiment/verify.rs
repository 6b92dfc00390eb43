//! The certificate suite behind `deepo verify`.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::Serialize;

use super::config::ExperimentConfig;
use super::trace::{tail_log_linear_fit, FIT_FLOOR};
use super::{initial_policy, load_data, Algorithm, MONOTONE_SLACK};
use crate::certificates::{
    curvature_probes, estimate_gradient_dominance, estimate_strong_convexity, finite_difference_gradient,
    finite_difference_second, random_feasible_direction, random_nullspace_direction, riccati_oracle, sample_sublevel,
    solution_set_probe, ConvexPoint, OracleSolution, FD_STEP, FD_STEP_SECOND,
};
use crate::data::{DataMatrices, SystemModel};
use crate::error::{Error, Result};
use crate::linalg::operator_norm;
use crate::optimizer::{run_deepo, OptimizerConfig, OptimizerTrace, StopReason};
use crate::policy::{initial_policy_from_gain, recover_gain, smoothness_bound, LqrProblem, PolicyG, FEASIBILITY_TOL};
use crate::regularized::{implicit_regularization_audit, orthogonality_identity_check, regularizer_terms, Regularization};

const GRADIENT_TOL: f64 = 1e-5;
const HESSIAN_TOL: f64 = 1e-4;
const HOMOGENEITY_TOL: f64 = 1e-10;
const IDENTITY_TOL: f64 = 1e-8;
const ROUND_TRIP_TOL: f64 = 1e-10;
const CONVEXITY_TOL: f64 = 1e-10;
const NULLSPACE_TOL: f64 = 1e-8;
const SUBSPACE_TOL: f64 = 1e-9;
const STEP_DRIFT_TOL: f64 = 1e-10;
const FLAT_COST_TOL: f64 = 1e-8;
const FLAT_GAIN_TOL: f64 = 1e-10;
const GAIN_TOL: f64 = 1e-4;
const BIAS_SLACK: f64 = 1e-9;
const FIT_R2_MIN: f64 = 0.99;
/// Gradient tolerance of the runs whose limit is compared with `K*`.
const LIMIT_GRAD_TOL: f64 = 1e-9;
/// Absolute round-off allowance, relative to `1 + J*`, on cost gaps.
const GAP_SLACK: f64 = 1e-12;
/// Perturbation size of the sublevel sampler relative to its base point.
const SAMPLE_SCALE: f64 = 0.5;
const PROBE_SCALES: [f64; 3] = [1e-1, 1e-2, 1e-3];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Worst observed value of the checked quantity.
    pub value: f64,
    pub threshold: f64,
    pub samples: usize,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub data_length: usize,
    pub sigma_min_d: f64,
    pub j_star: f64,
    pub alpha_hat: f64,
    pub mu_hat: f64,
    pub smoothness_constant: f64,
    pub checks: Vec<CheckResult>,
    pub wall_time_s: f64,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "deepo verify report");
        let _ = writeln!(out, "seed {}", self.seed);
        let _ = writeln!(out, "T {}", self.data_length);
        let _ = writeln!(out, "sigma_min_D {:.6e}", self.sigma_min_d);
        let _ = writeln!(out, "J_star {:.12e}", self.j_star);
        let _ = writeln!(out, "alpha_hat {:.6e}", self.alpha_hat);
        let _ = writeln!(out, "mu_hat {:.6e}", self.mu_hat);
        let _ = writeln!(out, "smoothness_constant {:.6e}", self.smoothness_constant);
        for c in &self.checks {
            let _ = writeln!(
                out,
                "check {:<28} {} worst {:.3e} threshold {:.3e} samples {}{}",
                c.name,
                if c.passed { "PASS" } else { "FAIL" },
                c.value,
                c.threshold,
                c.samples,
                if c.detail.is_empty() { String::new() } else { format!(" ({})", c.detail) }
            );
        }
        let passed = self.checks.iter().filter(|c| c.passed).count();
        let _ = writeln!(out, "summary {passed}/{} checks passed", self.checks.len());
        let _ = writeln!(out, "wall_time_s {:.3}", self.wall_time_s);
        out
    }
}

fn check(name: &str, value: f64, threshold: f64, samples: usize, passed: bool, detail: impl Into<String>) -> CheckResult {
    CheckResult {
        name: name.into(),
        passed,
        value,
        threshold,
        samples,
        detail: detail.into(),
    }
}

/// `value <= threshold`, treating NaN as failure.
fn below(name: &str, value: f64, threshold: f64, samples: usize, detail: impl Into<String>) -> CheckResult {
    check(name, value, threshold, samples, value <= threshold, detail)
}

fn failed(name: &str, err: &Error) -> CheckResult {
    check(name, f64::NAN, f64::NAN, 0, false, err.to_string())
}

struct Context<'a> {
    config: &'a ExperimentConfig,
    system: &'a SystemModel,
    data: &'a DataMatrices,
    problem: LqrProblem<'a>,
    oracle: OracleSolution,
    g0: PolicyG,
    j0: f64,
    /// The plain run with the configured stepsize and iteration cap.
    run: OptimizerTrace,
    anchors: Vec<DMatrix<f64>>,
}

impl Context<'_> {
    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(stream);
        rng
    }

    fn samples(&self, count: usize, stream: u64) -> Vec<PolicyG> {
        let mut rng = self.rng(stream);
        sample_sublevel(&self.problem, &self.anchors, self.j0, count, SAMPLE_SCALE, &mut rng)
    }

    fn converge(&self, reg: Regularization, g0: &PolicyG) -> Result<OptimizerTrace> {
        let problem = LqrProblem::regularized(self.data, self.system.q().clone(), self.system.r().clone(), reg)?
            .with_stability_margin(self.config.stability_margin);
        let mut cfg = OptimizerConfig::fixed(self.config.eta, self.config.reference_max_iter, LIMIT_GRAD_TOL);
        cfg.keep_iterates = false;
        run_deepo(&problem, g0, &cfg)
    }
}

fn short(name: &str, got: usize, want: usize) -> Option<CheckResult> {
    (got < want).then(|| {
        check(
            name,
            got as f64,
            want as f64,
            got,
            false,
            format!("sampler produced {got} of {want} feasible points"),
        )
    })
}

fn gradient_check(ctx: &Context<'_>) -> Result<CheckResult> {
    let name = "gradient-finite-difference";
    let want = ctx.config.verify.gradient_samples;
    let samples = ctx.samples(want, 1);
    if let Some(c) = short(name, samples.len(), want) {
        return Ok(c);
    }
    let mut worst: f64 = 0.0;
    for g in &samples {
        let analytic = ctx.problem.gradient(g)?;
        let fd = finite_difference_gradient(|x| ctx.problem.evaluate_relaxed(x).map(|e| e.cost), g.matrix(), FD_STEP)?;
        worst = worst.max((fd - &analytic).norm() / analytic.norm());
    }
    Ok(below(name, worst, GRADIENT_TOL, samples.len(), "relative Frobenius error"))
}

fn regularized_gradient_check(ctx: &Context<'_>) -> Result<CheckResult> {
    let name = "regularized-gradient";
    let want = ctx.config.verify.gradient_samples;
    let samples = ctx.samples(want, 11);
    if let Some(c) = short(name, samples.len(), want) {
        return Ok(c);
    }
    let mut worst: f64 = 0.0;
    for reg in [
        Regularization::certainty_equivalence(ctx.config.lambda_ce),
        Regularization::robustness(ctx.config.gamma_rob),
    ] {
        let problem = LqrProblem::regularized(ctx.data, ctx.system.q().clone(), ctx.system.r().clone(), reg)?;
        for g in &samples {
            let analytic = problem.gradient(g)?;
            let fd = finite_difference_gradient(|x| problem.evaluate_relaxed(x).map(|e| e.cost), g.matrix(), FD_STEP)?;
            worst = worst.max((fd - &analytic).norm() / analytic.norm());
        }
    }
    Ok(below(
        name,
        worst,
        GRADIENT_TOL,
        2 * samples.len(),
        "relative Frobenius error with lambda and with gamma",
    ))
}

fn hessian_checks(ctx: &Context<'_>) -> Result<Vec<CheckResult>> {
    let want = ctx.config.verify.hessian_samples;
    let samples = ctx.samples(want, 2);
    if let Some(c) = short("hessian-finite-difference", samples.len(), want) {
        return Ok(vec![c]);
    }
    let mut rng = ctx.rng(3);
    let mut worst_fd: f64 = 0.0;
    let mut worst_hom: f64 = 0.0;
    for g in &samples {
        let z = random_nullspace_direction(ctx.data, &mut rng);
        let analytic = ctx.problem.hessian_action(g, &z)?;
        let fd = finite_difference_second(|x| ctx.problem.cost(&PolicyG::new(x.clone())), g.matrix(), &z, FD_STEP_SECOND)?;
        worst_fd = worst_fd.max((fd - analytic).abs() / analytic.abs());
        for c in [-3.0, 0.5, 2.5] {
            let scaled = ctx.problem.hessian_action(g, &(&z * c))?;
            worst_hom = worst_hom.max((scaled - c * c * analytic).abs() / (c * c * analytic).abs());
        }
    }
    Ok(vec![
        below("hessian-finite-difference", worst_fd, HESSIAN_TOL, samples.len(), "relative error of the quadratic form"),
        below("hessian-homogeneity", worst_hom, HOMOGENEITY_TOL, samples.len() * 3, "relative error of H[cZ] = c^2 H[Z]"),
    ])
}

fn smoothness_check(ctx: &Context<'_>) -> Result<Vec<CheckResult>> {
    let want = ctx.config.verify.smoothness_samples;
    let samples = ctx.samples(want, 4);
    if let Some(c) = short("smoothness-bound", samples.len(), want) {
        return Ok(vec![c]);
    }
    let l = smoothness_bound(ctx.j0, ctx.data, ctx.system.q(), ctx.system.r());
    let q_min = ctx.system.q().min_eigenvalue();
    let mut rng = ctx.rng(5);
    let mut worst_ratio: f64 = 0.0;
    let mut violations = 0;
    let mut worst_aux: f64 = f64::NEG_INFINITY;
    for g in &samples {
        let z = random_nullspace_direction(ctx.data, &mut rng);
        let h = ctx.problem.hessian_action(g, &z)?.abs();
        if h > l {
            violations += 1;
        }
        worst_ratio = worst_ratio.max(h / l);
        let eval = ctx.problem.evaluate(g)?;
        let slack = GAP_SLACK * (1.0 + eval.cost);
        let trace_gap = eval.sigma.trace() - eval.cost / q_min;
        let norm_gap = eval.p.max_eigenvalue() - eval.cost;
        worst_aux = worst_aux.max(trace_gap.max(norm_gap) - slack);
    }
    Ok(vec![
        check(
            "smoothness-bound",
            worst_ratio,
            1.0,
            samples.len(),
            violations == 0,
            format!("max |H[Z,Z]| / l(J(G0)) with l = {l:.6e}, {violations} violations"),
        ),
        below(
            "smoothness-auxiliary-bounds",
            worst_aux,
            0.0,
            samples.len(),
            "max of Tr(Sigma) - J/sigma_min(Q) and ||P|| - J",
        ),
    ])
}

fn convex_identity_checks(ctx: &Context<'_>) -> Result<Vec<CheckResult>> {
    let want = ctx.config.verify.identity_samples;
    let samples = ctx.samples(want, 6);
    if let Some(c) = short("convex-identity", samples.len(), want) {
        return Ok(vec![c]);
    }
    let mut worst_f: f64 = 0.0;
    let mut worst_lin: f64 = 0.0;
    let mut min_lmi = f64::INFINITY;
    let mut worst_trip: f64 = 0.0;
    for g in &samples {
        let j = ctx.problem.cost(g)?;
        let point = ConvexPoint::from_policy(&ctx.problem, g)?;
        let f = point.evaluate_f(ctx.data, ctx.system.q(), ctx.system.r())?;
        worst_f = worst_f.max((f - j).abs() / (1.0 + j));
        let feas = point.feasibility(ctx.data);
        worst_lin = worst_lin.max(feas.linear_residual);
        min_lmi = min_lmi.min(feas.lmi_min_eigenvalue);
        let back = point.to_policy()?;
        worst_trip = worst_trip.max((back.matrix() - g.matrix()).norm() / g.matrix().norm().max(1.0));
    }
    let n = samples.len();
    Ok(vec![
        below("convex-identity", worst_f, IDENTITY_TOL, n, "|f(G Sigma_G, Sigma_G) - J(G)| / (1 + J)"),
        below("convex-linear-constraint", worst_lin, IDENTITY_TOL, n, "||Sigma - X_- L||_F"),
        below("convex-lmi", -min_lmi, IDENTITY_TOL, n, "negated smallest eigenvalue of the LMI block"),
        below("convex-round-trip", worst_trip, ROUND_TRIP_TOL, n, "relative change of G through (L, Sigma)"),
    ])
}

/// Returns the checks and `(alpha_hat, mu_hat)`.
fn landscape_checks(ctx: &Context<'_>) -> Result<(Vec<CheckResult>, f64, f64)> {
    let want = ctx.config.verify.convexity_samples;
    let samples = ctx.samples(want, 7);
    if let Some(c) = short("convex-hessian", samples.len(), want) {
        return Ok((vec![c], f64::NAN, f64::NAN));
    }
    let mut rng = ctx.rng(8);
    let mut pairs = Vec::with_capacity(samples.len());
    for g in &samples {
        let point = ConvexPoint::from_policy(&ctx.problem, g)?;
        let dir = random_feasible_direction(ctx.data, &mut rng)?;
        pairs.push((point, dir));
    }
    let convex = estimate_strong_convexity(&pairs, ctx.data, ctx.system.r())?;

    let probes = curvature_probes(&ctx.problem, &ctx.oracle.g_star, &PROBE_SCALES)?;
    let probe_count = probes.len();
    let mut points = samples;
    points.extend(probes);
    let dominance = estimate_gradient_dominance(&ctx.problem, &points, ctx.oracle.j_star)?;
    let mu = dominance.mu_hat;

    let slack = GAP_SLACK * (1.0 + ctx.oracle.j_star);
    let mut worst_excess = f64::NEG_INFINITY;
    let mut worst_k = 0;
    for r in &ctx.run.records {
        let excess = (r.lqr_cost - ctx.oracle.j_star) - mu * r.proj_grad_norm * r.proj_grad_norm;
        if excess > worst_excess {
            worst_excess = excess;
            worst_k = r.k;
        }
    }
    let checks = vec![
        check(
            "convex-hessian",
            -convex.min_hessian,
            CONVEXITY_TOL,
            pairs.len(),
            convex.min_hessian >= -CONVEXITY_TOL,
            "negated smallest Hessian quadratic form",
        ),
        check(
            "strong-convexity-estimate",
            convex.alpha_hat,
            0.0,
            pairs.len(),
            convex.alpha_hat > 0.0 && convex.alpha_hat.is_finite(),
            "alpha_hat must be positive",
        ),
        check(
            "dominance-estimate",
            mu,
            0.0,
            dominance.samples_used,
            mu.is_finite() && mu > 0.0,
            format!("{} sublevel samples and {probe_count} curvature probes, {} skipped", want, dominance.skipped),
        ),
        check(
            "dominance-along-iterates",
            worst_excess,
            slack,
            ctx.run.records.len(),
            worst_excess <= slack,
            format!("max of J(G^k) - J* - mu_hat ||Pi grad J||^2, attained at k = {worst_k}"),
        ),
    ];
    Ok((checks, convex.alpha_hat, mu))
}

fn implicit_regularization_checks(ctx: &Context<'_>) -> Result<Vec<CheckResult>> {
    let g0 = initial_policy_from_gain(&DMatrix::zeros(ctx.data.m(), ctx.data.n()), ctx.data, ctx.config.stability_margin)?;
    let iterations = ctx.config.verify.audit_iterations;
    let cfg = OptimizerConfig::fixed(ctx.config.eta, iterations, f64::MIN_POSITIVE);
    let trace = run_deepo(&ctx.problem, &g0, &cfg)?;
    let audit = implicit_regularization_audit(&trace, ctx.data, NULLSPACE_TOL);

    let perturbed = initial_policy(ctx.config, Algorithm::DeepoCe, ctx.data)?;
    let frozen = implicit_regularization_audit(&run_deepo(&ctx.problem, &perturbed, &cfg)?, ctx.data, NULLSPACE_TOL);

    let want = ctx.config.verify.subspace_samples;
    let samples = ctx.samples(want, 9);
    let mut out = vec![
        check(
            "implicit-regularization",
            audit.max_null_norm,
            NULLSPACE_TOL,
            trace.records.len(),
            !audit.violated,
            format!("max ||Pi_D G^k||_F over {} iterations", trace.iterations()),
        ),
        check(
            "nullspace-component-frozen",
            frozen.max_drift,
            NULLSPACE_TOL,
            frozen.null_norms.len(),
            frozen.max_drift <= NULLSPACE_TOL && frozen.max_step_drift <= STEP_DRIFT_TOL,
            format!(
                "max ||Pi_D (G^k - G^0)||_F from a perturbed start; max per-step drift {:.3e}",
                frozen.max_step_drift
            ),
        ),
    ];
    if let Some(c) = short("nullspace-orthogonality", samples.len(), want) {
        out.push(c);
        return Ok(out);
    }
    let mut worst: f64 = 0.0;
    for g in &samples {
        let grad = ctx.problem.gradient(g)?.norm();
        worst = worst.max(orthogonality_identity_check(&ctx.problem, g)? / grad);
    }
    out.push(below(
        "nullspace-orthogonality",
        worst,
        SUBSPACE_TOL,
        samples.len(),
        "||Pi_D Pi_X grad J||_F / ||grad J||_F",
    ));
    Ok(out)
}

fn flatness_check(ctx: &Context<'_>) -> Result<CheckResult> {
    let probes = solution_set_probe(&ctx.oracle.g_star, ctx.data, ctx.config.verify.flatness_probes, ctx.config.seed);
    let kscale = ctx.oracle.k_star.norm().max(1.0);
    let mut worst_k: f64 = 0.0;
    let mut worst_j: f64 = 0.0;
    for g in &probes {
        worst_k = worst_k.max((recover_gain(g, ctx.data) - &ctx.oracle.k_star).norm() / kscale);
        worst_j = worst_j.max((ctx.problem.cost(g)? - ctx.oracle.j_star).abs() / ctx.oracle.j_star);
    }
    Ok(check(
        "solution-set-flatness",
        worst_j,
        FLAT_COST_TOL,
        probes.len(),
        worst_j <= FLAT_COST_TOL && worst_k <= FLAT_GAIN_TOL,
        format!("|J - J*| / J*; max relative gain change {worst_k:.3e}"),
    ))
}

fn oracle_check(ctx: &Context<'_>) -> Result<CheckResult> {
    let j = ctx.problem.cost(&ctx.oracle.g_star)?;
    let gap = (j - ctx.oracle.j_star).abs() / ctx.oracle.j_star;
    let residual = ctx.oracle.g_star.constraint_residual(ctx.data);
    Ok(check(
        "oracle-consistency",
        gap,
        FLAT_COST_TOL,
        1,
        gap <= FLAT_COST_TOL && residual <= FEASIBILITY_TOL,
        format!("|J(G*) - J*| / J* for the lifted Riccati gain; constraint residual {residual:.3e}"),
    ))
}

fn descent_checks(ctx: &Context<'_>) -> Result<Vec<CheckResult>> {
    let j_star = ctx.oracle.j_star;
    let rel: Vec<f64> = ctx.run.records.iter().map(|r| (r.cost - j_star) / j_star).collect();
    let max_increase = rel.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
    let max_residual = ctx
        .run
        .iterates()
        .map(|g| PolicyG::new(g.clone()).constraint_residual(ctx.data))
        .fold(0.0, f64::max);
    let fit = tail_log_linear_fit(&rel, FIT_FLOOR);
    let (r2, fit_points) = fit.map_or((f64::NAN, 0), |f| (f.r_squared, f.points));

    let limit = ctx.converge(Regularization::none(), &ctx.g0)?;
    let k_err = (recover_gain(&limit.final_policy, ctx.data) - &ctx.oracle.k_star).norm();
    Ok(vec![
        below(
            "descent-monotone",
            max_increase,
            MONOTONE_SLACK,
            rel.len(),
            "largest step-to-step increase of (J - J*) / J*",
        ),
        below(
            "descent-feasibility",
            max_residual,
            FEASIBILITY_TOL,
            rel.len(),
            "max ||X_- G^k - I||_F",
        ),
        check(
            "descent-linear-rate",
            r2,
            FIT_R2_MIN,
            fit_points,
            r2 >= FIT_R2_MIN,
            format!("R^2 of the log-linear tail fit, slope {:.4e}", fit.map_or(f64::NAN, |f| f.slope)),
        ),
        check(
            "descent-limit-gain",
            k_err,
            GAIN_TOL,
            limit.iterations(),
            limit.status == StopReason::Converged && k_err <= GAIN_TOL,
            format!("||U_- G - K*||_F after converging to {LIMIT_GRAD_TOL:e}"),
        ),
    ])
}

fn regularizer_checks(ctx: &Context<'_>) -> Result<Vec<CheckResult>> {
    let cfg = ctx.config;
    let j_star = ctx.oracle.j_star;
    let mut out = Vec::new();

    let g_ce = initial_policy(cfg, Algorithm::DeepoCe, ctx.data)?;
    let ce = ctx.converge(cfg.regularization(Algorithm::DeepoCe), &g_ce)?;
    let costs = ce.costs();
    let ce_increase = costs.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
    let ce_err = (recover_gain(&ce.final_policy, ctx.data) - &ctx.oracle.k_star).norm();
    out.push(check(
        "certainty-equivalence-limit",
        ce_err,
        GAIN_TOL,
        ce.iterations(),
        ce.status == StopReason::Converged && ce_err <= GAIN_TOL && ce_increase <= MONOTONE_SLACK * (1.0 + costs[0]),
        format!("||U_- G_lambda - K*||_F; largest objective increase {ce_increase:.3e}"),
    ));

    let g_rob = initial_policy(cfg, Algorithm::DeepoRob, ctx.data)?;
    let rob = ctx.converge(cfg.regularization(Algorithm::DeepoRob), &g_rob)?;
    let j_rob = rob.last().lqr_cost;
    out.push(check(
        "robustness-bias",
        j_star - j_rob,
        BIAS_SLACK,
        rob.iterations(),
        rob.status == StopReason::Converged && j_rob >= j_star - BIAS_SLACK,
        format!("J* - J(G_gamma), J(G_gamma) = {j_rob:.9e}"),
    ));

    let zero = LqrProblem::regularized(ctx.data, ctx.system.q().clone(), ctx.system.r().clone(), Regularization::default())?
        .with_stability_margin(cfg.stability_margin);
    let plain_cfg = OptimizerConfig::fixed(cfg.eta, cfg.max_iter, cfg.grad_tol);
    let zero_trace = run_deepo(&zero, &ctx.g0, &plain_cfg)?;
    let mut worst: f64 = if zero_trace.records.len() == ctx.run.records.len() { 0.0 } else { f64::INFINITY };
    for (a, b) in zero_trace.records.iter().zip(&ctx.run.records) {
        let da = (a.cost - b.cost).abs() / (1.0 + b.cost);
        let dg = match (&a.iterate, &b.iterate) {
            (Some(x), Some(y)) => (x - y).norm(),
            _ => 0.0,
        };
        worst = worst.max(da).max(dg);
    }
    out.push(below(
        "zero-weight-equivalence",
        worst,
        MONOTONE_SLACK,
        ctx.run.records.len(),
        "per-iterate difference between lambda = gamma = 0 and the plain run",
    ));

    let both = Regularization {
        lambda_ce: cfg.lambda_ce,
        gamma_rob: cfg.gamma_rob,
    };
    let reg_problem = LqrProblem::regularized(ctx.data, ctx.system.q().clone(), ctx.system.r().clone(), both)?;
    let samples = ctx.samples(ctx.config.verify.identity_samples, 10);
    let mut worst_fold: f64 = 0.0;
    for g in samples.iter().chain(std::iter::once(&g_ce)) {
        let terms = regularizer_terms(&reg_problem, g)?;
        let folded = reg_problem.cost(g)?;
        worst_fold = worst_fold.max((terms.total() - folded).abs() / (1.0 + folded));
    }
    out.push(below(
        "regularizer-folding",
        worst_fold,
        IDENTITY_TOL,
        samples.len() + 1,
        "|J + regularizers - J_reg| / (1 + J_reg)",
    ));
    Ok(out)
}

fn data_check(system: &SystemModel, data: &DataMatrices) -> CheckResult {
    let residual = data.dynamics_residual(system);
    let scale = 1.0 + operator_norm(data.x_plus());
    check(
        "data-certification",
        residual / scale,
        1e-10,
        data.len(),
        residual <= 1e-10 * scale,
        format!("rank(D_-) = {}, sigma_min(D_-) = {:.4e}; value is the relative dynamics residual", data.n() + data.m(), data.sigma_min_d()),
    )
}

fn push<T>(checks: &mut Vec<CheckResult>, name: &str, r: Result<T>, add: impl FnOnce(&mut Vec<CheckResult>, T)) {
    match r {
        Ok(v) => add(checks, v),
        Err(e) => checks.push(failed(name, &e)),
    }
}

/// Runs every certificate on a data batch of the configured system.
///
/// Randomness comes only from the config seed, so a rerun reproduces every
/// reported number except the wall time.
pub fn cmd_verify(config: &ExperimentConfig, system: &SystemModel, data: &DataMatrices) -> Result<VerifyReport> {
    config.validate()?;
    let start = Instant::now();
    let problem = LqrProblem::new(data, system.q().clone(), system.r().clone())?.with_stability_margin(config.stability_margin);
    let oracle = riccati_oracle(system, data)?;
    let g0 = initial_policy(config, Algorithm::Deepo, data)?;
    let j0 = problem.cost(&g0)?;
    let run = run_deepo(&problem, &g0, &OptimizerConfig::fixed(config.eta, config.max_iter, config.grad_tol))?;
    let mut anchors: Vec<DMatrix<f64>> = run.iterates().cloned().collect();
    anchors.push(oracle.g_star.matrix().clone());
    let ctx = Context {
        config,
        system,
        data,
        problem,
        oracle,
        g0,
        j0,
        run,
        anchors,
    };

    let mut checks = vec![data_check(system, data)];
    push(&mut checks, "oracle-consistency", oracle_check(&ctx), |c, v| c.push(v));
    push(&mut checks, "gradient-finite-difference", gradient_check(&ctx), |c, v| c.push(v));
    push(&mut checks, "regularized-gradient", regularized_gradient_check(&ctx), |c, v| c.push(v));
    push(&mut checks, "hessian-finite-difference", hessian_checks(&ctx), |c, v| c.extend(v));
    push(&mut checks, "smoothness-bound", smoothness_check(&ctx), |c, v| c.extend(v));
    push(&mut checks, "convex-identity", convex_identity_checks(&ctx), |c, v| c.extend(v));
    let mut alpha_hat = f64::NAN;
    let mut mu_hat = f64::NAN;
    push(&mut checks, "convex-hessian", landscape_checks(&ctx), |c, (v, a, m)| {
        c.extend(v);
        alpha_hat = a;
        mu_hat = m;
    });
    push(&mut checks, "implicit-regularization", implicit_regularization_checks(&ctx), |c, v| c.extend(v));
    push(&mut checks, "solution-set-flatness", flatness_check(&ctx), |c, v| c.push(v));
    push(&mut checks, "descent-monotone", descent_checks(&ctx), |c, v| c.extend(v));
    push(&mut checks, "certainty-equivalence-limit", regularizer_checks(&ctx), |c, v| c.extend(v));

    Ok(VerifyReport {
        seed: config.seed,
        data_length: data.len(),
        sigma_min_d: data.sigma_min_d(),
        j_star: ctx.oracle.j_star,
        alpha_hat,
        mu_hat,
        smoothness_constant: smoothness_bound(j0, data, system.q(), system.r()),
        checks,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Loads the data file, then runs [`cmd_verify`]. A batch that fails the rank
/// certificate yields a report with a failed `data-certification` check.
pub fn cmd_verify_file(config: &ExperimentConfig, path: &Path) -> Result<VerifyReport> {
    match load_data(config, path) {
        Ok((system, data)) => cmd_verify(config, &system, &data),
        Err(e @ (Error::RankDeficient { .. } | Error::InsufficientData { .. })) => Ok(VerifyReport {
            seed: config.seed,
            data_length: 0,
            sigma_min_d: f64::NAN,
            j_star: f64::NAN,
            alpha_hat: f64::NAN,
            mu_hat: f64::NAN,
            smoothness_constant: f64::NAN,
            checks: vec![failed("data-certification", &e)],
            wall_time_s: 0.0,
        }),
        Err(e) => Err(e),
    }
}
