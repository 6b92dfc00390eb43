//! Dense kernels shared by the rest of the crate: discrete Lyapunov and
//! Riccati solvers, right pseudoinverses, nullspace projectors and a few
//! spectral helpers.
//!
//! Everything works on `nalgebra::DMatrix<f64>`. Problem sizes are small
//! (a handful of states, tens of data columns), so the Lyapunov solvers use a
//! direct Kronecker-vectorized LU solve. That costs O(n^6) time and O(n^4)
//! memory and is meant for n up to about 50.

use std::ops::Deref;

use nalgebra::{DMatrix, DVector, Schur};

use crate::error::{Error, Result};

/// Lyapunov solves require `rho(A_cl) < 1 - STABILITY_MARGIN`.
pub const STABILITY_MARGIN: f64 = 1e-9;

/// Relative singular-value tolerance for rank decisions.
pub const RANK_TOL: f64 = 1e-8;

/// Eigenvalues above `-PSD_TOL` are treated as zero in PSD checks.
pub const PSD_TOL: f64 = 1e-10;

const RICCATI_TOL: f64 = 1e-12;
const RICCATI_MAX_ITER: usize = 100_000;
const SCHUR_MAX_ITER: usize = 10_000;

/// A real symmetric matrix. The constructor symmetrizes its input.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::DimensionMismatch(format!(
                "symmetric matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        Ok(Self::symmetrize(m))
    }

    fn symmetrize(m: DMatrix<f64>) -> Self {
        let t = m.transpose();
        SymMatrix((m + t) * 0.5)
    }

    pub fn identity(n: usize) -> Self {
        SymMatrix(DMatrix::identity(n, n))
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        SymMatrix(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = self.0.clone().symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues().first().copied().unwrap_or(0.0)
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues().last().copied().unwrap_or(0.0)
    }
}

impl Deref for SymMatrix {
    type Target = DMatrix<f64>;

    fn deref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// Orthogonal projector onto the nullspace of some full-row-rank matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Projector {
    matrix: DMatrix<f64>,
    source: String,
}

impl Projector {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Name of the matrix whose nullspace this projects onto.
    pub fn source(&self) -> &str {
        &self.source
    }

    /// Rank, read off the trace (eigenvalues are 0 or 1).
    pub fn rank(&self) -> usize {
        self.matrix.trace().round().max(0.0) as usize
    }

    pub fn apply(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        &self.matrix * m
    }
}

impl Deref for Projector {
    type Target = DMatrix<f64>;

    fn deref(&self) -> &DMatrix<f64> {
        &self.matrix
    }
}

fn require_square(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.is_square() {
        Ok(())
    } else {
        Err(Error::DimensionMismatch(format!(
            "{what} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )))
    }
}

/// Largest eigenvalue modulus, over complex eigenvalues.
pub fn spectral_radius(m: &DMatrix<f64>) -> Result<f64> {
    require_square(m, "matrix")?;
    if m.nrows() == 0 {
        return Ok(0.0);
    }
    let schur = Schur::try_new(m.clone(), f64::EPSILON, SCHUR_MAX_ITER).ok_or(Error::EigenFailure)?;
    let rho = schur
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0_f64, f64::max);
    if rho.is_finite() {
        Ok(rho)
    } else {
        Err(Error::EigenFailure)
    }
}

fn check_stable(a_cl: &DMatrix<f64>, margin: f64) -> Result<f64> {
    let rho = spectral_radius(a_cl)?;
    if rho >= 1.0 - margin {
        return Err(Error::Unstable { rho });
    }
    Ok(rho)
}

/// Solves `(I - K) vec(X) = vec(W)` for a Kronecker operator `K`.
fn solve_vectorized(kron: DMatrix<f64>, w: &SymMatrix) -> Result<SymMatrix> {
    let n = w.dim();
    let nn = n * n;
    let system = DMatrix::<f64>::identity(nn, nn) - kron;
    let rhs = DVector::from_column_slice(w.as_slice());
    let sol = system
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::SolveFailure("singular Lyapunov operator".into()))?;
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(Error::SolveFailure("non-finite Lyapunov solution".into()));
    }
    SymMatrix::new(DMatrix::from_column_slice(n, n, sol.as_slice()))
}

fn check_lyapunov_dims(a_cl: &DMatrix<f64>, w: &SymMatrix) -> Result<()> {
    require_square(a_cl, "closed-loop matrix")?;
    if a_cl.nrows() != w.dim() {
        return Err(Error::DimensionMismatch(format!(
            "closed-loop matrix is {}x{} but weight is {}x{}",
            a_cl.nrows(),
            a_cl.ncols(),
            w.dim(),
            w.dim()
        )));
    }
    Ok(())
}

/// Solves `P = W + A_cl^T P A_cl` (value / observability form).
pub fn solve_discrete_lyapunov_obs(a_cl: &DMatrix<f64>, w: &SymMatrix) -> Result<SymMatrix> {
    check_lyapunov_dims(a_cl, w)?;
    check_stable(a_cl, STABILITY_MARGIN)?;
    lyapunov_obs_prechecked(a_cl, w)
}

/// Solves `S = W + A_cl S A_cl^T` (covariance / controllability form).
pub fn solve_discrete_lyapunov_ctrl(a_cl: &DMatrix<f64>, w: &SymMatrix) -> Result<SymMatrix> {
    check_lyapunov_dims(a_cl, w)?;
    check_stable(a_cl, STABILITY_MARGIN)?;
    lyapunov_ctrl_prechecked(a_cl, w)
}

/// Observability-form solve for callers that already certified stability.
pub(crate) fn lyapunov_obs_prechecked(a_cl: &DMatrix<f64>, w: &SymMatrix) -> Result<SymMatrix> {
    let at = a_cl.transpose();
    // vec(A^T P A) = (A^T kron A^T) vec(P) in column-major order.
    solve_vectorized(at.kronecker(&at), w)
}

pub(crate) fn lyapunov_ctrl_prechecked(a_cl: &DMatrix<f64>, w: &SymMatrix) -> Result<SymMatrix> {
    solve_vectorized(a_cl.kronecker(a_cl), w)
}

/// Optimal LQR gain for a given value matrix: `-(R + B^T P B)^{-1} B^T P A`.
pub fn lqr_gain(a: &DMatrix<f64>, b: &DMatrix<f64>, r: &SymMatrix, p: &SymMatrix) -> Result<DMatrix<f64>> {
    let btp = b.transpose() * p.as_matrix();
    let s = r.as_matrix() + &btp * b;
    let rhs = &btp * a;
    let chol = s
        .cholesky()
        .ok_or_else(|| Error::SolveFailure("R + B^T P B is not positive definite".into()))?;
    Ok(-chol.solve(&rhs))
}

/// Discrete algebraic Riccati equation by value iteration from `P_0 = Q`.
///
/// Returns the stabilizing solution `P*` and the optimal gain
/// `K* = -(R + B^T P* B)^{-1} B^T P* A` (so `u = K* x`).
pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &SymMatrix,
    r: &SymMatrix,
) -> Result<(SymMatrix, DMatrix<f64>)> {
    require_square(a, "A")?;
    let n = a.nrows();
    if b.nrows() != n || q.dim() != n || r.dim() != b.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "DARE dimensions: A {n}x{n}, B {}x{}, Q {}x{}, R {}x{}",
            b.nrows(),
            b.ncols(),
            q.dim(),
            q.dim(),
            r.dim(),
            r.dim()
        )));
    }
    let at = a.transpose();
    let mut p = q.clone();
    let mut last_update = f64::INFINITY;
    for _ in 0..RICCATI_MAX_ITER {
        // A^T P A + Q - A^T P B (R + B^T P B)^{-1} B^T P A
        let k = lqr_gain(a, b, r, &p)?;
        let pa = p.as_matrix() * a;
        let pb = p.as_matrix() * b;
        let next = &at * &pa + q.as_matrix() + &at * &pb * &k;
        let next = SymMatrix::new(next)?;
        last_update = (next.as_matrix() - p.as_matrix()).norm();
        let scale = next.as_matrix().norm().max(1.0);
        p = next;
        if !(last_update.is_finite() && scale.is_finite()) {
            break;
        }
        if last_update <= RICCATI_TOL * scale {
            let k = lqr_gain(a, b, r, &p)?;
            // value iteration can stall on a non-stabilizing fixed point
            if spectral_radius(&(a + b * &k))? >= 1.0 {
                break;
            }
            return Ok((p, k));
        }
    }
    Err(Error::NoConvergence {
        iterations: RICCATI_MAX_ITER,
        residual: last_update,
    })
}

/// Singular values in descending order.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut sv: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Spectral (operator 2-) norm.
pub fn operator_norm(m: &DMatrix<f64>) -> f64 {
    singular_values(m).first().copied().unwrap_or(0.0)
}

/// Smallest singular value among the first `min(p, q)`.
pub fn min_singular_value(m: &DMatrix<f64>) -> f64 {
    singular_values(m).last().copied().unwrap_or(0.0)
}

/// Right inverse `M^T (M M^T)^{-1}` of a full-row-rank `p x q` matrix.
///
/// Computed through the SVD. Fails with `RankDeficient` if
/// `sigma_min <= RANK_TOL * max(1, sigma_max)`.
pub fn right_pseudoinverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (p, q) = m.shape();
    if p > q {
        return Err(Error::DimensionMismatch(format!(
            "right inverse needs a wide matrix, got {p}x{q}"
        )));
    }
    if p == 0 {
        return Ok(DMatrix::zeros(q, 0));
    }
    let svd = m.clone().svd(true, true);
    let sigma = &svd.singular_values;
    let smax = sigma.max();
    let smin = sigma.min();
    if smin <= RANK_TOL * smax.max(1.0) {
        return Err(Error::RankDeficient { sigma_min: smin });
    }
    let u = svd.u.as_ref().ok_or(Error::EigenFailure)?;
    let vt = svd.v_t.as_ref().ok_or(Error::EigenFailure)?;
    // M = U S V^T with V^T p x q  =>  M^+ = V S^{-1} U^T
    let mut v_scaled = vt.transpose();
    for (j, s) in sigma.iter().enumerate() {
        v_scaled.column_mut(j).scale_mut(1.0 / s);
    }
    Ok(v_scaled * u.transpose())
}

/// Projector `I - M^+ M` onto the nullspace of a full-row-rank `M`.
pub fn nullspace_projector(m: &DMatrix<f64>, source: impl Into<String>) -> Result<Projector> {
    let pinv = right_pseudoinverse(m)?;
    let q = m.ncols();
    let proj = DMatrix::<f64>::identity(q, q) - pinv * m;
    let proj = SymMatrix::new(proj)?.into_matrix();
    Ok(Projector {
        matrix: proj,
        source: source.into(),
    })
}

/// Symmetric PSD square root via the eigendecomposition. Eigenvalues in
/// `[-PSD_TOL, 0)` are clamped to zero.
pub fn sym_sqrt(m: &SymMatrix) -> Result<SymMatrix> {
    let eig = m.as_matrix().clone().symmetric_eigen();
    let lmin = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if lmin < -PSD_TOL {
        return Err(Error::NotPsd { min_eigenvalue: lmin });
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    SymMatrix::new(v * DMatrix::from_diagonal(&roots) * v.transpose())
}

/// Inverse of a symmetric positive definite matrix.
pub fn spd_inverse(m: &SymMatrix) -> Result<SymMatrix> {
    let chol = m.as_matrix().clone().cholesky().ok_or(Error::NotPsd {
        min_eigenvalue: m.min_eigenvalue(),
    })?;
    SymMatrix::new(chol.inverse())
}

/// `[B, AB, ..., A^{n-1} B]`.
pub fn controllability_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let m = b.ncols();
    let mut out = DMatrix::zeros(n, n * m);
    let mut block = b.clone();
    for i in 0..n {
        out.view_mut((0, i * m), (n, m)).copy_from(&block);
        block = a * &block;
    }
    out
}

/// Numerical rank with the relative tolerance `RANK_TOL * max(1, sigma_max)`.
pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    let sv = singular_values(m);
    let smax = sv.first().copied().unwrap_or(0.0);
    let tol = RANK_TOL * smax.max(1.0);
    sv.iter().filter(|&&s| s > tol).count()
}
