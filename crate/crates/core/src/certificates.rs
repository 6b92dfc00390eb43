//! Numerical certificates for the optimization landscape.
//!
//! * the convex parameterization `(L, Sigma) = (G Sigma_G, Sigma_G)` with
//!   `f(L, Sigma) = Tr{Q Sigma} + Tr{L Sigma^{-1} L^T U_-^T R U_-}`,
//! * its Hessian quadratic form and a Monte-Carlo strong-convexity estimate,
//! * a Monte-Carlo estimate of the projected gradient-dominance ratio,
//! * model-based reference solutions and the flat solution set `G* + N(D_-)`,
//! * central finite-difference oracles.
//!
//! The estimates are sample extrema, not the constants of any theorem.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{DataMatrices, SystemModel};
use crate::error::{Error, Result};
use crate::linalg::{self, right_pseudoinverse, spd_inverse, sym_sqrt, SymMatrix};
use crate::policy::{LqrProblem, PolicyG};

/// `Sigma` with smallest eigenvalue below this is treated as singular.
pub const SINGULAR_SIGMA_TOL: f64 = 1e-10;

/// First-order finite-difference step.
pub const FD_STEP: f64 = 1e-6;
/// Second-order finite-difference step.
pub const FD_STEP_SECOND: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvexPoint {
    pub l: DMatrix<f64>,
    pub sigma: SymMatrix,
}

/// Direction `(L~, Sigma~)` in the convex parameterization.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvexDirection {
    pub l: DMatrix<f64>,
    pub sigma: SymMatrix,
}

impl ConvexDirection {
    /// `||[L~, Sigma~]||_F`.
    pub fn norm(&self) -> f64 {
        (self.l.norm_squared() + self.sigma.norm_squared()).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvexFeasibility {
    /// `||Sigma - X_- L||_F`.
    pub linear_residual: f64,
    /// Smallest eigenvalue of `[Sigma - I, X_+ L; L^T X_+^T, Sigma]`.
    pub lmi_min_eigenvalue: f64,
}

impl ConvexPoint {
    /// `(G Sigma_G, Sigma_G)` for a feasible policy.
    pub fn from_policy(problem: &LqrProblem<'_>, g: &PolicyG) -> Result<Self> {
        let eval = problem.evaluate(g)?;
        Ok(ConvexPoint {
            l: g.matrix() * eval.sigma.as_matrix(),
            sigma: eval.sigma,
        })
    }

    /// `G = L Sigma^{-1}`. Feasibility of the result is not checked here.
    pub fn to_policy(&self) -> Result<PolicyG> {
        let inv = self.sigma_inverse()?;
        Ok(PolicyG::new(&self.l * inv.as_matrix()))
    }

    fn sigma_inverse(&self) -> Result<SymMatrix> {
        let min_eigenvalue = self.sigma.min_eigenvalue();
        if min_eigenvalue <= SINGULAR_SIGMA_TOL {
            return Err(Error::SingularSigma { min_eigenvalue });
        }
        spd_inverse(&self.sigma)
    }

    pub fn feasibility(&self, data: &DataMatrices) -> ConvexFeasibility {
        let n = data.n();
        let linear_residual = (self.sigma.as_matrix() - data.x_minus() * &self.l).norm();
        let xl = data.x_plus() * &self.l;
        let mut block = DMatrix::zeros(2 * n, 2 * n);
        block
            .view_mut((0, 0), (n, n))
            .copy_from(&(self.sigma.as_matrix() - DMatrix::<f64>::identity(n, n)));
        block.view_mut((0, n), (n, n)).copy_from(&xl);
        block.view_mut((n, 0), (n, n)).copy_from(&xl.transpose());
        block.view_mut((n, n), (n, n)).copy_from(self.sigma.as_matrix());
        let lmi_min_eigenvalue = SymMatrix::new(block).map(|b| b.min_eigenvalue()).unwrap_or(f64::NAN);
        ConvexFeasibility {
            linear_residual,
            lmi_min_eigenvalue,
        }
    }

    /// `Tr{Q Sigma} + Tr{L Sigma^{-1} L^T U_-^T R U_-}`.
    pub fn evaluate_f(&self, data: &DataMatrices, q: &SymMatrix, r: &SymMatrix) -> Result<f64> {
        let inv = self.sigma_inverse()?;
        let ul = data.u_minus() * &self.l;
        let quad = (r.as_matrix() * &ul * inv.as_matrix() * ul.transpose()).trace();
        Ok((q.as_matrix() * self.sigma.as_matrix()).trace() + quad)
    }

    /// `2 ||R^{1/2} (U_- L~ - U_- L Sigma^{-1} Sigma~) Sigma^{-1/2}||_F^2`.
    pub fn convex_hessian_action(&self, dir: &ConvexDirection, data: &DataMatrices, r: &SymMatrix) -> Result<f64> {
        let inv = self.sigma_inverse()?;
        let inv_root = sym_sqrt(&inv)?;
        let r_root = sym_sqrt(r)?;
        let u = data.u_minus();
        let inner = u * &dir.l - u * &self.l * inv.as_matrix() * dir.sigma.as_matrix();
        Ok(2.0 * (r_root.as_matrix() * inner * inv_root.as_matrix()).norm_squared())
    }

    pub fn step(&self, dir: &ConvexDirection, t: f64) -> Result<ConvexPoint> {
        Ok(ConvexPoint {
            l: &self.l + &dir.l * t,
            sigma: SymMatrix::new(self.sigma.as_matrix() + dir.sigma.as_matrix() * t)?,
        })
    }
}

fn gaussian<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Unit-norm direction with symmetric `Sigma~` and `Sigma~ = X_- L~` exactly:
/// `L~ = X_-^+ Sigma~ + Pi_{X_-} N` for Gaussian `Sigma~`, `N`.
pub fn random_feasible_direction<R: Rng>(data: &DataMatrices, rng: &mut R) -> Result<ConvexDirection> {
    let n = data.n();
    let x_pinv = right_pseudoinverse(data.x_minus())?;
    let sigma = SymMatrix::new(gaussian(rng, n, n))?;
    let l = &x_pinv * sigma.as_matrix() + data.pi_x().matrix() * gaussian(rng, data.len(), n);
    let dir = ConvexDirection { l, sigma };
    let norm = dir.norm();
    Ok(ConvexDirection {
        l: dir.l / norm,
        sigma: SymMatrix::new(dir.sigma.into_matrix() / norm)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StrongConvexityEstimate {
    /// `min` over samples of half the Hessian quadratic form.
    pub alpha_hat: f64,
    /// Smallest raw Hessian value seen (convexity requires it to be >= 0).
    pub min_hessian: f64,
    pub argmin: usize,
    pub samples: usize,
}

pub fn estimate_strong_convexity(
    samples: &[(ConvexPoint, ConvexDirection)],
    data: &DataMatrices,
    r: &SymMatrix,
) -> Result<StrongConvexityEstimate> {
    let mut best = StrongConvexityEstimate {
        alpha_hat: f64::INFINITY,
        min_hessian: f64::INFINITY,
        argmin: 0,
        samples: samples.len(),
    };
    for (i, (point, dir)) in samples.iter().enumerate() {
        let h = point.convex_hessian_action(dir, data, r)?;
        if h < best.min_hessian {
            best.min_hessian = h;
            best.alpha_hat = h / 2.0;
            best.argmin = i;
        }
    }
    Ok(best)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DominanceEstimate {
    /// `max (J(G) - J*) / ||Pi_{X_-} grad J(G)||_F^2` over the samples.
    pub mu_hat: f64,
    pub argmax: usize,
    pub samples_used: usize,
    /// Samples dropped because their projected gradient was numerically zero.
    pub skipped: usize,
}

/// Projected gradients at or below this are treated as stationary.
pub const STATIONARY_TOL: f64 = 1e-12;

const SAMPLE_DECADES: f64 = 6.0;

pub fn estimate_gradient_dominance(problem: &LqrProblem<'_>, points: &[PolicyG], j_star: f64) -> Result<DominanceEstimate> {
    let mut est = DominanceEstimate {
        mu_hat: 0.0,
        argmax: 0,
        samples_used: 0,
        skipped: 0,
    };
    for (i, g) in points.iter().enumerate() {
        let eval = problem.evaluate(g)?;
        let pg = (problem.data().pi_x().matrix() * crate::policy::gradient_from_eval(&eval)).norm();
        if pg <= STATIONARY_TOL {
            est.skipped += 1;
            continue;
        }
        est.samples_used += 1;
        let ratio = (eval.cost - j_star) / (pg * pg);
        if ratio > est.mu_hat {
            est.mu_hat = ratio;
            est.argmax = i;
        }
    }
    Ok(est)
}

/// Points `G + t v` along the eigenvectors `v` of the Hessian at `G`,
/// restricted to the directions that change the gain (`Z = D_-^+ [dK; 0]`),
/// for every `t` in `scales` and both signs.
///
/// Near a minimizer the ratio `(J - J*) / ||Pi grad J||^2` is largest along
/// the flattest of these directions, which uniform sampling rarely hits.
pub fn curvature_probes(problem: &LqrProblem<'_>, g: &PolicyG, scales: &[f64]) -> Result<Vec<PolicyG>> {
    let data = problem.data();
    let (t, n, m) = (data.len(), data.n(), data.m());
    let dim = m * n;
    let mut basis = DMatrix::<f64>::zeros(t * n, dim);
    for i in 0..m {
        for j in 0..n {
            let mut dk = DMatrix::<f64>::zeros(m + n, n);
            dk[(i, j)] = 1.0;
            let z = data.d_pinv() * dk;
            basis.set_column(i * n + j, &nalgebra::DVector::from_column_slice(z.as_slice()));
        }
    }
    let q = basis.qr().q();
    let column = |v: &nalgebra::DVector<f64>| DMatrix::from_column_slice(t, n, (&q * v).as_slice());
    let eval = problem.evaluate(g)?;
    let form = |z: &DMatrix<f64>| problem.hessian_action_from_eval(g.matrix(), &eval, z);
    let mut h = DMatrix::<f64>::zeros(dim, dim);
    for a in 0..dim {
        let ea = column(&nalgebra::DVector::from_fn(dim, |k, _| f64::from(u8::from(k == a))));
        h[(a, a)] = form(&ea)?;
        for b in 0..a {
            let eb = column(&nalgebra::DVector::from_fn(dim, |k, _| f64::from(u8::from(k == b))));
            let v = (form(&(&ea + &eb))? - form(&(&ea - &eb))?) / 4.0;
            h[(a, b)] = v;
            h[(b, a)] = v;
        }
    }
    let eig = h.symmetric_eigen();
    let mut out = Vec::with_capacity(2 * dim * scales.len());
    for k in 0..dim {
        let dir = column(&eig.eigenvectors.column(k).into_owned());
        for &s in scales {
            for sign in [1.0, -1.0] {
                let p = PolicyG::new(g.matrix() + &dir * (sign * s));
                if problem.check_feasible(&p).is_ok() {
                    out.push(p);
                }
            }
        }
    }
    Ok(out)
}

/// Model-based optimum, lifted into the data parameterization.
#[derive(Clone, Debug)]
pub struct OracleSolution {
    pub k_star: DMatrix<f64>,
    pub p_star: SymMatrix,
    /// `Tr P*` (the initial state has identity covariance).
    pub j_star: f64,
    /// `D_-^+ [K*; I_n]`.
    pub g_star: PolicyG,
}

pub fn riccati_oracle(system: &SystemModel, data: &DataMatrices) -> Result<OracleSolution> {
    let (p_star, k_star) = linalg::solve_dare(system.a(), system.b(), system.q(), system.r())?;
    let g_star = PolicyG::new(data.lift_gain(&k_star)?);
    Ok(OracleSolution {
        j_star: p_star.trace(),
        k_star,
        p_star,
        g_star,
    })
}

/// `count` points `G* + Pi_{D_-} N` with Gaussian `N`; the first probe uses `N = 0`.
pub fn solution_set_probe(g_star: &PolicyG, data: &DataMatrices, count: usize, seed: u64) -> Vec<PolicyG> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            if i == 0 {
                g_star.clone()
            } else {
                let delta = data.pi_d().matrix() * gaussian(&mut rng, data.len(), data.n());
                PolicyG::new(g_star.matrix() + delta)
            }
        })
        .collect()
}

/// Random feasible policies `J(G) <= level`, anchored on known feasible
/// points: a random convex combination of two anchors plus a random
/// perturbation in `N(X_-)`. The perturbation size is log-uniform between
/// `scale * 1e-6` and `scale`, relative to the base point.
pub fn sample_sublevel<R: Rng>(
    problem: &LqrProblem<'_>,
    anchors: &[DMatrix<f64>],
    level: f64,
    count: usize,
    scale: f64,
    rng: &mut R,
) -> Vec<PolicyG> {
    let mut out = Vec::with_capacity(count);
    if anchors.is_empty() {
        return out;
    }
    let data = problem.data();
    let max_attempts = 200 * count.max(1);
    for _ in 0..max_attempts {
        if out.len() == count {
            break;
        }
        let a = &anchors[rng.random_range(0..anchors.len())];
        let b = &anchors[rng.random_range(0..anchors.len())];
        let theta: f64 = rng.random();
        let base = a * theta + b * (1.0 - theta);
        let dir = data.pi_x().matrix() * gaussian(rng, data.len(), data.n());
        let dn = dir.norm();
        let decades: f64 = rng.random_range(0.0..SAMPLE_DECADES);
        let magnitude = scale * 10f64.powf(-decades) * base.norm().max(1.0);
        let g = if dn > 0.0 { base + dir * (magnitude / dn) } else { base };
        let g = PolicyG::new(g);
        if let Ok(eval) = problem.evaluate(&g) {
            if eval.cost <= level {
                out.push(g);
            }
        }
    }
    out
}

/// Unit-Frobenius random direction in `N(X_-)`.
pub fn random_nullspace_direction<R: Rng>(data: &DataMatrices, rng: &mut R) -> DMatrix<f64> {
    let z = data.pi_x().matrix() * gaussian(rng, data.len(), data.n());
    let norm = z.norm();
    z / norm
}

/// Unit-Frobenius Gaussian direction with no constraint.
pub fn random_direction<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    let z = gaussian(rng, rows, cols);
    let norm = z.norm();
    z / norm
}

fn with_retry<T>(h: f64, mut f: impl FnMut(f64) -> Result<T>) -> Result<T> {
    match f(h) {
        Ok(v) => Ok(v),
        Err(_) => f(h / 2.0).map_err(|_| Error::InfeasiblePerturbation),
    }
}

/// Entrywise central differences `(c(G + h E_ij) - c(G - h E_ij)) / 2h`.
///
/// Retries once with `h / 2` if a probe fails.
pub fn finite_difference_gradient<F>(mut costfn: F, g: &DMatrix<f64>, h: f64) -> Result<DMatrix<f64>>
where
    F: FnMut(&DMatrix<f64>) -> Result<f64>,
{
    with_retry(h, |h| {
        let mut grad = DMatrix::zeros(g.nrows(), g.ncols());
        let mut probe = g.clone();
        for j in 0..g.ncols() {
            for i in 0..g.nrows() {
                let orig = probe[(i, j)];
                probe[(i, j)] = orig + h;
                let plus = costfn(&probe)?;
                probe[(i, j)] = orig - h;
                let minus = costfn(&probe)?;
                probe[(i, j)] = orig;
                grad[(i, j)] = (plus - minus) / (2.0 * h);
            }
        }
        Ok(grad)
    })
}

/// `(c(G + hZ) - c(G - hZ)) / 2h`.
pub fn finite_difference_directional<F>(mut costfn: F, g: &DMatrix<f64>, z: &DMatrix<f64>, h: f64) -> Result<f64>
where
    F: FnMut(&DMatrix<f64>) -> Result<f64>,
{
    with_retry(h, |h| Ok((costfn(&(g + z * h))? - costfn(&(g - z * h))?) / (2.0 * h)))
}

/// `(c(G + hZ) - 2 c(G) + c(G - hZ)) / h^2`.
pub fn finite_difference_second<F>(mut costfn: F, g: &DMatrix<f64>, z: &DMatrix<f64>, h: f64) -> Result<f64>
where
    F: FnMut(&DMatrix<f64>) -> Result<f64>,
{
    let center = costfn(g)?;
    with_retry(h, |h| Ok((costfn(&(g + z * h))? - 2.0 * center + costfn(&(g - z * h))?) / (h * h)))
}
