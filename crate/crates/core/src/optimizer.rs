//! Projected gradient iteration `G+ = G - eta Pi_{X_-} grad J(G)`.

use std::io::Write;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::spectral_radius;
use crate::policy::{gradient_from_eval, LqrProblem, PolicyG};
use crate::regularized::Regularization;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepRule {
    Fixed(f64),
    /// Start at twice the previously accepted step (capped at `initial`),
    /// multiply by `shrink` until the trial is stable and
    /// `J(G+) <= J(G) - c eta ||Pi grad||^2`.
    Backtracking {
        initial: f64,
        shrink: f64,
        sufficient_decrease: f64,
        max_halvings: usize,
    },
}

impl StepRule {
    pub fn backtracking(initial: f64) -> Self {
        StepRule::Backtracking {
            initial,
            shrink: 0.5,
            sufficient_decrease: 1e-4,
            max_halvings: 60,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub step: StepRule,
    pub max_iter: usize,
    /// Stop once `||Pi_{X_-} grad J||_F <= grad_tol`.
    pub grad_tol: f64,
    /// Keep every iterate `G^k` in the trace.
    pub keep_iterates: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            step: StepRule::Fixed(2e-3),
            max_iter: 100_000,
            grad_tol: 1e-8,
            keep_iterates: true,
        }
    }
}

impl OptimizerConfig {
    pub fn fixed(eta: f64, max_iter: usize, grad_tol: f64) -> Self {
        Self {
            step: StepRule::Fixed(eta),
            max_iter,
            grad_tol,
            keep_iterates: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.step {
            StepRule::Fixed(eta) if !(eta > 0.0 && eta.is_finite()) => {
                return Err(Error::InvalidConfig(format!("fixed stepsize must be positive, got {eta}")))
            }
            StepRule::Backtracking {
                initial,
                shrink,
                sufficient_decrease,
                ..
            } if !(initial > 0.0 && shrink > 0.0 && shrink < 1.0 && (0.0..1.0).contains(&sufficient_decrease)) => {
                return Err(Error::InvalidConfig("invalid backtracking parameters".into()))
            }
            _ => {}
        }
        if !(self.grad_tol > 0.0) {
            return Err(Error::InvalidConfig(format!("grad_tol must be positive, got {}", self.grad_tol)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub k: usize,
    /// Objective value (regularized when the problem is).
    pub cost: f64,
    /// Plain LQR cost `J(G^k)`.
    pub lqr_cost: f64,
    pub proj_grad_norm: f64,
    /// `||Pi_{D_-} G^k||_F`.
    pub null_norm: f64,
    /// Stepsize used to move from `G^k` to `G^{k+1}`; zero on the last record.
    pub step: f64,
    pub iterate: Option<DMatrix<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Converged,
    MaxIterations,
    /// Backtracking found no acceptable step (round-off floor).
    LineSearchStalled,
}

#[derive(Clone, Debug)]
pub struct OptimizerTrace {
    pub records: Vec<IterationRecord>,
    pub status: StopReason,
    pub final_policy: PolicyG,
    pub regularization: Regularization,
}

impl OptimizerTrace {
    pub fn iterations(&self) -> usize {
        self.records.len().saturating_sub(1)
    }

    pub fn costs(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.cost).collect()
    }

    pub fn last(&self) -> &IterationRecord {
        self.records.last().expect("trace has at least the initial record")
    }

    /// Iterates `G^k`, if they were kept.
    pub fn iterates(&self) -> impl Iterator<Item = &DMatrix<f64>> {
        self.records.iter().filter_map(|r| r.iterate.as_ref())
    }

    /// CSV with header `k,J,proj_grad_norm,null_norm,eta`, plus
    /// `lambda,gamma,J_reg` for regularized runs.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let reg = !self.regularization.is_none();
        if reg {
            writeln!(out, "k,J,proj_grad_norm,null_norm,eta,lambda,gamma,J_reg")?;
        } else {
            writeln!(out, "k,J,proj_grad_norm,null_norm,eta")?;
        }
        for r in &self.records {
            write!(
                out,
                "{},{:.17e},{:.17e},{:.17e},{:.17e}",
                r.k, r.lqr_cost, r.proj_grad_norm, r.null_norm, r.step
            )?;
            if reg {
                write!(
                    out,
                    ",{:.17e},{:.17e},{:.17e}",
                    self.regularization.lambda_ce, self.regularization.gamma_rob, r.cost
                )?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

struct Point {
    g: PolicyG,
    cost: f64,
    lqr_cost: f64,
    proj_grad: DMatrix<f64>,
}

fn point(problem: &LqrProblem<'_>, g: PolicyG) -> Result<Point> {
    let eval = problem.evaluate(&g)?;
    let proj_grad = problem.data().pi_x().matrix() * gradient_from_eval(&eval);
    Ok(Point {
        g,
        cost: eval.cost,
        lqr_cost: eval.lqr_cost,
        proj_grad,
    })
}

/// Runs projected gradient descent from a feasible `G0`.
///
/// Every iterate is re-certified (linear constraint and stability). With a
/// fixed step, leaving the stability region aborts with `StepUnstable`.
pub fn run_deepo(problem: &LqrProblem<'_>, g0: &PolicyG, cfg: &OptimizerConfig) -> Result<OptimizerTrace> {
    cfg.validate()?;
    let data = problem.data();
    let mut current = point(problem, g0.clone()).map_err(|e| Error::InfeasibleStart(Box::new(e)))?;
    let mut records = Vec::new();
    let mut status = StopReason::MaxIterations;
    let mut last_eta = f64::INFINITY;

    let record = |k: usize, p: &Point, step: f64| IterationRecord {
        k,
        cost: p.cost,
        lqr_cost: p.lqr_cost,
        proj_grad_norm: p.proj_grad.norm(),
        null_norm: p.g.nullspace_norm(data),
        step,
        iterate: cfg.keep_iterates.then(|| p.g.matrix().clone()),
    };

    for k in 0..=cfg.max_iter {
        let gnorm = current.proj_grad.norm();
        if gnorm <= cfg.grad_tol {
            status = StopReason::Converged;
            break;
        }
        if k == cfg.max_iter {
            break;
        }
        let (next, eta) = match cfg.step {
            StepRule::Fixed(eta) => {
                let trial = PolicyG::new(current.g.matrix() - &current.proj_grad * eta);
                // stability first: a huge step also blows up round-off in X_- G
                let rho = spectral_radius(&trial.closed_loop(data))?;
                if rho >= 1.0 - problem.stability_margin() {
                    return Err(Error::StepUnstable { iteration: k, rho });
                }
                match point(problem, trial) {
                    Ok(p) => (p, eta),
                    Err(Error::Unstable { rho }) => return Err(Error::StepUnstable { iteration: k, rho }),
                    Err(e) => return Err(e),
                }
            }
            StepRule::Backtracking {
                initial,
                shrink,
                sufficient_decrease,
                max_halvings,
            } => {
                let mut eta = initial.min(2.0 * last_eta);
                let mut accepted = None;
                for _ in 0..=max_halvings {
                    let trial = PolicyG::new(current.g.matrix() - &current.proj_grad * eta);
                    if let Ok(p) = point(problem, trial) {
                        if p.cost <= current.cost - sufficient_decrease * eta * gnorm * gnorm {
                            accepted = Some(p);
                            break;
                        }
                    }
                    eta *= shrink;
                }
                match accepted {
                    Some(p) => {
                        last_eta = eta;
                        (p, eta)
                    }
                    None => {
                        status = StopReason::LineSearchStalled;
                        break;
                    }
                }
            }
        };
        records.push(record(k, &current, eta));
        current = next;
    }
    records.push(record(records.len(), &current, 0.0));
    Ok(OptimizerTrace {
        records,
        status,
        final_policy: current.g,
        regularization: problem.regularization(),
    })
}
