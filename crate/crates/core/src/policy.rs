//! The data-driven LQR objective over the policy parameter `G` (T x n).
//!
//! For `G` with `X_- G = I_n` and `rho(X_+ G) < 1` the closed loop is
//! `x(t+1) = X_+ G x(t)` with input `u = U_- G x`. The cost is
//! `J(G) = Tr P_G = Tr{(Q + G^T W G) Sigma_G}` where `W` is the input weight
//! over the data columns (`U_-^T R U_-` for plain LQR, plus regularization
//! terms otherwise), `P_G` solves `P = Q + G^T W G + A_cl^T P A_cl` and
//! `Sigma_G` solves `S = I + A_cl S A_cl^T`.

use nalgebra::DMatrix;

use crate::data::DataMatrices;
use crate::error::{Error, Result};
use crate::linalg::{self, operator_norm, SymMatrix, STABILITY_MARGIN};
use crate::regularized::Regularization;

/// Tolerance on `||X_- G - I||_F` for a policy to count as feasible.
pub const FEASIBILITY_TOL: f64 = 1e-8;

/// Smallest admissible `sigma_min(Q)`; the smoothness bound divides by it.
pub const MIN_STATE_WEIGHT: f64 = 1e-12;

/// Decision variable `G`, with `K = U_- G`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyG(DMatrix<f64>);

impl PolicyG {
    pub fn new(g: DMatrix<f64>) -> Self {
        PolicyG(g)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    /// `||X_- G - I_n||_F`.
    pub fn constraint_residual(&self, data: &DataMatrices) -> f64 {
        let n = data.n();
        (data.x_minus() * &self.0 - DMatrix::<f64>::identity(n, n)).norm()
    }

    /// Data-driven closed-loop matrix `X_+ G`.
    pub fn closed_loop(&self, data: &DataMatrices) -> DMatrix<f64> {
        data.x_plus() * &self.0
    }

    /// `||Pi_{D_-} G||_F`, the component in the nullspace of the data.
    pub fn nullspace_norm(&self, data: &DataMatrices) -> f64 {
        (data.pi_d().matrix() * &self.0).norm()
    }
}

/// Everything computed while evaluating `J` at one policy.
#[derive(Clone, Debug)]
pub struct ClosedLoopEval {
    /// Value matrix `P_G` of the objective being evaluated.
    pub p: SymMatrix,
    /// State covariance `Sigma_G`.
    pub sigma: SymMatrix,
    /// `E_G = (W + X_+^T P_G X_+) G`.
    pub e: DMatrix<f64>,
    /// Objective value `Tr P_G` (regularized when the problem is).
    pub cost: f64,
    /// Plain LQR cost `Tr{(Q + G^T U_-^T R U_- G) Sigma_G}`.
    pub lqr_cost: f64,
    pub a_cl: DMatrix<f64>,
    pub spectral_radius: f64,
}

/// The optimization problem: a data batch plus penalties and an optional
/// regularization folded into the input weight.
#[derive(Clone, Debug)]
pub struct LqrProblem<'a> {
    data: &'a DataMatrices,
    q: SymMatrix,
    r: SymMatrix,
    lqr_weight: SymMatrix,
    input_weight: SymMatrix,
    regularization: Regularization,
    stability_margin: f64,
}

impl<'a> LqrProblem<'a> {
    pub fn new(data: &'a DataMatrices, q: SymMatrix, r: SymMatrix) -> Result<Self> {
        Self::regularized(data, q, r, Regularization::none())
    }

    /// Objective `Tr{(Q + G^T W G) Sigma_G}` with
    /// `W = U_-^T R U_- + lambda Pi_{D_-} + gamma I_T`.
    pub fn regularized(data: &'a DataMatrices, q: SymMatrix, r: SymMatrix, reg: Regularization) -> Result<Self> {
        reg.validate()?;
        if q.dim() != data.n() || r.dim() != data.m() {
            return Err(Error::DimensionMismatch(format!(
                "Q is {0}x{0} and R is {1}x{1} for n = {2}, m = {3}",
                q.dim(),
                r.dim(),
                data.n(),
                data.m()
            )));
        }
        let q_min = q.min_eigenvalue();
        if q_min <= MIN_STATE_WEIGHT {
            return Err(Error::InvalidConfig(format!("Q must be positive definite (sigma_min = {q_min:e})")));
        }
        if r.min_eigenvalue() <= 0.0 {
            return Err(Error::InvalidConfig("R must be positive definite".into()));
        }
        let lqr_weight = SymMatrix::new(data.u_minus().transpose() * r.as_matrix() * data.u_minus())?;
        let input_weight = reg.effective_input_weight(data, &lqr_weight)?;
        Ok(Self {
            data,
            q,
            r,
            lqr_weight,
            input_weight,
            regularization: reg,
            stability_margin: STABILITY_MARGIN,
        })
    }

    pub fn with_stability_margin(mut self, margin: f64) -> Self {
        self.stability_margin = margin;
        self
    }

    pub fn data(&self) -> &'a DataMatrices {
        self.data
    }

    pub fn q(&self) -> &SymMatrix {
        &self.q
    }

    pub fn r(&self) -> &SymMatrix {
        &self.r
    }

    /// `U_-^T R U_-`.
    pub fn lqr_weight(&self) -> &SymMatrix {
        &self.lqr_weight
    }

    /// The T x T input weight actually optimized.
    pub fn input_weight(&self) -> &SymMatrix {
        &self.input_weight
    }

    pub fn regularization(&self) -> Regularization {
        self.regularization
    }

    pub fn stability_margin(&self) -> f64 {
        self.stability_margin
    }

    /// Same data and penalties without regularization.
    pub fn unregularized(&self) -> LqrProblem<'a> {
        LqrProblem {
            input_weight: self.lqr_weight.clone(),
            regularization: Regularization::none(),
            ..self.clone()
        }
    }

    fn check_shape(&self, g: &DMatrix<f64>) -> Result<()> {
        let expected = (self.data.len(), self.data.n());
        if g.shape() != expected {
            return Err(Error::DimensionMismatch(format!(
                "policy must be {}x{}, got {}x{}",
                expected.0,
                expected.1,
                g.nrows(),
                g.ncols()
            )));
        }
        Ok(())
    }

    /// Checks membership in the feasible set (linear constraint and stability).
    pub fn check_feasible(&self, g: &PolicyG) -> Result<f64> {
        self.check_shape(g.matrix())?;
        let residual = g.constraint_residual(self.data);
        if residual > FEASIBILITY_TOL {
            return Err(Error::Infeasible { residual });
        }
        let rho = linalg::spectral_radius(&g.closed_loop(self.data))?;
        if rho >= 1.0 - self.stability_margin {
            return Err(Error::Unstable { rho });
        }
        Ok(rho)
    }

    pub fn evaluate(&self, g: &PolicyG) -> Result<ClosedLoopEval> {
        self.check_shape(g.matrix())?;
        let residual = g.constraint_residual(self.data);
        if residual > FEASIBILITY_TOL {
            return Err(Error::Infeasible { residual });
        }
        self.evaluate_relaxed(g.matrix())
    }

    /// Evaluates the cost formula at any `G` with `rho(X_+ G) < 1`, without
    /// enforcing `X_- G = I`. Finite-difference oracles probe along arbitrary
    /// directions through this.
    pub fn evaluate_relaxed(&self, g: &DMatrix<f64>) -> Result<ClosedLoopEval> {
        self.check_shape(g)?;
        let data = self.data;
        let a_cl = data.x_plus() * g;
        let rho = linalg::spectral_radius(&a_cl)?;
        if rho >= 1.0 - self.stability_margin {
            return Err(Error::Unstable { rho });
        }
        let gt = g.transpose();
        let w = SymMatrix::new(self.q.as_matrix() + &gt * self.input_weight.as_matrix() * g)?;
        let p = linalg::lyapunov_obs_prechecked(&a_cl, &w)?;
        let sigma = linalg::lyapunov_ctrl_prechecked(&a_cl, &SymMatrix::identity(data.n()))?;
        let e = (self.input_weight.as_matrix() + data.x_plus().transpose() * p.as_matrix() * data.x_plus()) * g;
        let cost = p.trace();
        let lqr_cost = if self.regularization.is_none() {
            cost
        } else {
            ((self.q.as_matrix() + &gt * self.lqr_weight.as_matrix() * g) * sigma.as_matrix()).trace()
        };
        if !cost.is_finite() {
            return Err(Error::SolveFailure("non-finite cost".into()));
        }
        Ok(ClosedLoopEval {
            p,
            sigma,
            e,
            cost,
            lqr_cost,
            a_cl,
            spectral_radius: rho,
        })
    }

    pub fn cost(&self, g: &PolicyG) -> Result<f64> {
        Ok(self.evaluate(g)?.cost)
    }

    /// `grad J(G) = 2 E_G Sigma_G`.
    pub fn gradient(&self, g: &PolicyG) -> Result<DMatrix<f64>> {
        let eval = self.evaluate(g)?;
        Ok(gradient_from_eval(&eval))
    }

    /// `Pi_{X_-} grad J(G)`.
    pub fn projected_gradient(&self, g: &PolicyG) -> Result<DMatrix<f64>> {
        Ok(self.data.pi_x().matrix() * self.gradient(g)?)
    }

    /// `G+ = G - eta Pi_{X_-} grad J(G)`, re-certified for stability.
    pub fn projected_gradient_step(&self, g: &PolicyG, eta: f64) -> Result<PolicyG> {
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(Error::InvalidConfig(format!("stepsize must be nonnegative, got {eta}")));
        }
        let grad = self.gradient(g)?;
        let next = PolicyG::new(g.matrix() - self.data.pi_x().matrix() * grad * eta);
        let rho = linalg::spectral_radius(&next.closed_loop(self.data))?;
        if rho >= 1.0 - self.stability_margin {
            return Err(Error::StepUnstable { iteration: 0, rho });
        }
        Ok(next)
    }

    /// Second directional derivative `d^2/dt^2 J(G + tZ)` at `t = 0`.
    pub fn hessian_action(&self, g: &PolicyG, z: &DMatrix<f64>) -> Result<f64> {
        let eval = self.evaluate(g)?;
        self.hessian_action_from_eval(g.matrix(), &eval, z)
    }

    /// Same as [`hessian_action`](Self::hessian_action) at an arbitrary stable
    /// `G` (no linear constraint).
    pub fn hessian_action_relaxed(&self, g: &DMatrix<f64>, z: &DMatrix<f64>) -> Result<f64> {
        let eval = self.evaluate_relaxed(g)?;
        self.hessian_action_from_eval(g, &eval, z)
    }

    pub(crate) fn hessian_action_from_eval(&self, g: &DMatrix<f64>, eval: &ClosedLoopEval, z: &DMatrix<f64>) -> Result<f64> {
        self.check_shape(z)?;
        let xp = self.data.x_plus();
        let zt = z.transpose();
        let curvature = self.input_weight.as_matrix() + xp.transpose() * eval.p.as_matrix() * xp;
        let first = 2.0 * (&zt * curvature * z * eval.sigma.as_matrix()).trace();
        // P'[Z] = (Z^T E + E^T Z) + A_cl^T P'[Z] A_cl
        let forcing = SymMatrix::new(&zt * &eval.e + eval.e.transpose() * z)?;
        let dp = linalg::lyapunov_obs_prechecked(&eval.a_cl, &forcing)?;
        let second = 4.0 * (&zt * xp.transpose() * dp.as_matrix() * xp * g * eval.sigma.as_matrix()).trace();
        Ok(first + second)
    }
}

pub fn gradient_from_eval(eval: &ClosedLoopEval) -> DMatrix<f64> {
    &eval.e * eval.sigma.as_matrix() * 2.0
}

/// Closed-form bound on `sup_{||Z||_F = 1} |Hessian[Z, Z]|` over the sublevel
/// set `{G : J(G) <= a}`:
///
/// `l(a) = 2 ||U||^2 ||R|| a / s + (xi + 2) ||X_+||_F^2 a^2 / s`,
/// `xi = (||U||^2 ||R|| + ||X_+||^2 a + a) / s - 1`, with `s = sigma_min(Q)`.
pub fn smoothness_bound(a: f64, data: &DataMatrices, q: &SymMatrix, r: &SymMatrix) -> f64 {
    let s = q.min_eigenvalue();
    let u2 = operator_norm(data.u_minus()).powi(2);
    let r_norm = r.max_eigenvalue();
    let xp2 = operator_norm(data.x_plus()).powi(2);
    let xp_f2 = data.x_plus().norm_squared();
    let xi = (u2 * r_norm + xp2 * a + a) / s - 1.0;
    2.0 * u2 * r_norm * a / s + (xi + 2.0) * xp_f2 * a * a / s
}

/// `G_0 = D_-^+ [K_0; I_n]`, certified stabilizing through `rho(X_+ G_0)`.
pub fn initial_policy_from_gain(k0: &DMatrix<f64>, data: &DataMatrices, stability_margin: f64) -> Result<PolicyG> {
    let g = PolicyG::new(data.lift_gain(k0)?);
    let rho = linalg::spectral_radius(&g.closed_loop(data))?;
    if rho >= 1.0 - stability_margin {
        return Err(Error::Unstable { rho });
    }
    Ok(g)
}

/// `K = U_- G`.
pub fn recover_gain(g: &PolicyG, data: &DataMatrices) -> DMatrix<f64> {
    data.u_minus() * g.matrix()
}
