//! Certainty-equivalence and robustness regularization, and the checks around
//! implicit regularization of the unregularized iteration.
//!
//! Both regularizers are quadratic in `G` weighted by `Sigma_G`:
//!
//! * certainty equivalence: `lambda ||Pi_{D_-} G Sigma_G^{1/2}||_F^2 = lambda Tr{G^T Pi_{D_-} G Sigma_G}`
//! * robustness: `gamma Tr{G Sigma_G G^T} = gamma Tr{G^T G Sigma_G}`
//!
//! so they fold into the input weight of the LQR objective,
//! `W = U_-^T R U_- + lambda Pi_{D_-} + gamma I_T`, and the value-matrix,
//! gradient and Hessian formulas carry over unchanged with `W` in place of
//! `U_-^T R U_-`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::DataMatrices;
use crate::error::{Error, Result};
use crate::linalg::{sym_sqrt, SymMatrix};
use crate::optimizer::{run_deepo, OptimizerConfig, OptimizerTrace};
use crate::policy::{gradient_from_eval, LqrProblem, PolicyG};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Regularization {
    /// Certainty-equivalence weight `lambda`.
    pub lambda_ce: f64,
    /// Robustness weight `gamma`.
    pub gamma_rob: f64,
}

impl Regularization {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn certainty_equivalence(lambda: f64) -> Self {
        Self {
            lambda_ce: lambda,
            gamma_rob: 0.0,
        }
    }

    pub fn robustness(gamma: f64) -> Self {
        Self {
            lambda_ce: 0.0,
            gamma_rob: gamma,
        }
    }

    pub fn is_none(&self) -> bool {
        self.lambda_ce == 0.0 && self.gamma_rob == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_ce >= 0.0 && self.lambda_ce.is_finite() && self.gamma_rob >= 0.0 && self.gamma_rob.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "regularization weights must be nonnegative (lambda = {}, gamma = {})",
                self.lambda_ce, self.gamma_rob
            )));
        }
        Ok(())
    }

    /// `U_-^T R U_- + lambda Pi_{D_-} + gamma I_T`.
    pub fn effective_input_weight(&self, data: &DataMatrices, lqr_weight: &SymMatrix) -> Result<SymMatrix> {
        if self.is_none() {
            return Ok(lqr_weight.clone());
        }
        let t = data.len();
        let w = lqr_weight.as_matrix()
            + data.pi_d().matrix() * self.lambda_ce
            + DMatrix::<f64>::identity(t, t) * self.gamma_rob;
        SymMatrix::new(w)
    }
}

/// Regularizer values computed directly from their defining expressions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegularizerTerms {
    pub lqr_cost: f64,
    /// `lambda ||Pi_{D_-} G Sigma_G^{1/2}||_F^2`
    pub certainty_equivalence: f64,
    /// `gamma Tr{G Sigma_G G^T}`
    pub robustness: f64,
}

impl RegularizerTerms {
    pub fn total(&self) -> f64 {
        self.lqr_cost + self.certainty_equivalence + self.robustness
    }
}

/// Evaluates `J(G)` and the two regularizers separately, using the matrix
/// square root of `Sigma_G` for the certainty-equivalence term.
pub fn regularizer_terms(problem: &LqrProblem<'_>, g: &PolicyG) -> Result<RegularizerTerms> {
    let reg = problem.regularization();
    let eval = problem.unregularized().evaluate(g)?;
    let root = sym_sqrt(&eval.sigma)?;
    let ce = (problem.data().pi_d().matrix() * g.matrix() * root.as_matrix()).norm_squared();
    let rob = (g.matrix() * eval.sigma.as_matrix() * g.matrix().transpose()).trace();
    Ok(RegularizerTerms {
        lqr_cost: eval.cost,
        certainty_equivalence: reg.lambda_ce * ce,
        robustness: reg.gamma_rob * rob,
    })
}

/// Regularized projected gradient descent. Identical to the plain iteration
/// when both weights are zero.
pub fn run_regularized(problem: &LqrProblem<'_>, g0: &PolicyG, cfg: &OptimizerConfig) -> Result<OptimizerTrace> {
    run_deepo(problem, g0, cfg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImplicitRegularizationAudit {
    /// `||Pi_{D_-} G^k||_F` per iterate.
    pub null_norms: Vec<f64>,
    pub max_null_norm: f64,
    /// `max_k ||Pi_{D_-} (G^k - G^0)||_F`.
    pub max_drift: f64,
    /// `max_k ||Pi_{D_-} (G^{k+1} - G^k)||_F`.
    pub max_step_drift: f64,
    pub tolerance: f64,
    /// True when `max_null_norm` exceeds `tolerance`.
    pub violated: bool,
}

/// Scans the iterates of a trace for their component in the nullspace of `D_-`.
///
/// Falls back to the recorded norms when the trace did not keep iterates
/// (drift figures are then NaN).
pub fn implicit_regularization_audit(trace: &OptimizerTrace, data: &DataMatrices, tolerance: f64) -> ImplicitRegularizationAudit {
    let pi_d = data.pi_d().matrix();
    let components: Vec<DMatrix<f64>> = trace.iterates().map(|g| pi_d * g).collect();
    let (null_norms, max_drift, max_step_drift) = if components.len() == trace.records.len() && !components.is_empty() {
        let norms: Vec<f64> = components.iter().map(|c| c.norm()).collect();
        let first = &components[0];
        let drift = components.iter().map(|c| (c - first).norm()).fold(0.0, f64::max);
        let step = components
            .windows(2)
            .map(|w| (&w[1] - &w[0]).norm())
            .fold(0.0, f64::max);
        (norms, drift, step)
    } else {
        (trace.records.iter().map(|r| r.null_norm).collect(), f64::NAN, f64::NAN)
    };
    let max_null_norm = null_norms.iter().copied().fold(0.0, f64::max);
    ImplicitRegularizationAudit {
        violated: max_null_norm > tolerance,
        null_norms,
        max_null_norm,
        max_drift,
        max_step_drift,
        tolerance,
    }
}

/// `||Pi_{D_-} Pi_{X_-} grad J(G)||_F`. The projected gradient lies in the
/// row space of `D_-`, so this vanishes for every feasible `G`.
pub fn orthogonality_identity_check(problem: &LqrProblem<'_>, g: &PolicyG) -> Result<f64> {
    let eval = problem.evaluate(g)?;
    let data = problem.data();
    let pg = data.pi_x().matrix() * gradient_from_eval(&eval);
    Ok((data.pi_d().matrix() * pg).norm())
}
