use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not Schur stable (spectral radius {rho})")]
    Unstable { rho: f64 },

    #[error("linear solve failed: {0}")]
    SolveFailure(String),

    #[error("Riccati iteration did not converge after {iterations} iterations (last update {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("matrix is rank deficient (smallest singular value {sigma_min:e})")]
    RankDeficient { sigma_min: f64 },

    #[error("eigenvalue iteration failed to converge")]
    EigenFailure,

    #[error("matrix is not positive semidefinite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("insufficient data: T = {t} but at least {required} columns are needed")]
    InsufficientData { t: usize, required: usize },

    #[error("invalid system: {0}")]
    InvalidSystem(String),

    #[error("random system generation failed after {attempts} attempts")]
    GenerationFailure { attempts: usize },

    #[error("policy violates X_- G = I (residual {residual:e})")]
    Infeasible { residual: f64 },

    #[error("step at iteration {iteration} left the stability region (spectral radius {rho})")]
    StepUnstable { iteration: usize, rho: f64 },

    #[error("initial policy is not feasible: {0}")]
    InfeasibleStart(#[source] Box<Error>),

    #[error("covariance matrix is singular (smallest eigenvalue {min_eigenvalue:e})")]
    SingularSigma { min_eigenvalue: f64 },

    #[error("finite-difference probe left the feasible set")]
    InfeasiblePerturbation,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("missing trace: {0}")]
    MissingTrace(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
