use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{paper_example_system, random_system, SystemModel};
use crate::error::{Error, Result};
use crate::regularized::Regularization;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SystemSource {
    /// The 4-state, 2-input benchmark with `Q = I`, `R = I`.
    PaperExample,
    /// Gaussian `(A, B)` with `A` rescaled to spectral radius `target_rho`.
    Random { n: usize, m: usize, target_rho: f64, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitPolicy {
    /// Zero gain for `deepo` and `deepo-rob`, perturbed zero gain (variance
    /// 0.01) for `deepo-ce`.
    Auto,
    /// `G0 = D_-^+ [0; I]`.
    ZeroGain,
    /// `G0 = D_-^+ [K0; I]`, `gain` given row by row (m x n).
    GivenGain { gain: Vec<Vec<f64>> },
    /// `G0 = D_-^+ [0; I] + Pi_{D_-} M` with i.i.d. `N(0, variance)` entries in `M`.
    Perturbed { variance: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Deepo,
    DeepoCe,
    DeepoRob,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::Deepo, Algorithm::DeepoCe, Algorithm::DeepoRob];

    pub fn as_str(&self) -> &'static str {
        match self {
            Algorithm::Deepo => "deepo",
            Algorithm::DeepoCe => "deepo-ce",
            Algorithm::DeepoRob => "deepo-rob",
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown algorithm '{s}' (expected deepo, deepo-ce or deepo-rob)")))
    }
}

/// Sample counts for the verify suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub gradient_samples: usize,
    pub hessian_samples: usize,
    pub smoothness_samples: usize,
    pub identity_samples: usize,
    pub convexity_samples: usize,
    pub subspace_samples: usize,
    pub flatness_probes: usize,
    pub audit_iterations: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            gradient_samples: 20,
            hessian_samples: 20,
            smoothness_samples: 100,
            identity_samples: 20,
            convexity_samples: 200,
            subspace_samples: 50,
            flatness_probes: 10,
            audit_iterations: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemSource,
    /// Number of samples `T` in the data batch.
    pub data_length: usize,
    pub eta: f64,
    pub max_iter: usize,
    pub grad_tol: f64,
    pub lambda_ce: f64,
    pub gamma_rob: f64,
    pub init: InitPolicy,
    /// Iterates need `rho(X_+ G) < 1 - stability_margin`.
    pub stability_margin: f64,
    /// Gradient tolerance of the run that fixes the reference optimum of a
    /// regularized objective.
    pub reference_grad_tol: f64,
    pub reference_max_iter: usize,
    pub output_dir: PathBuf,
    /// Seeds the data batch and every random draw derived from it.
    pub seed: u64,
    pub verify: VerifyConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            system: SystemSource::PaperExample,
            data_length: 10,
            eta: 2e-3,
            max_iter: 1000,
            grad_tol: 1e-8,
            lambda_ce: 10.0,
            gamma_rob: 10.0,
            init: InitPolicy::Auto,
            stability_margin: crate::linalg::STABILITY_MARGIN,
            reference_grad_tol: 1e-11,
            reference_max_iter: 1_000_000,
            output_dir: PathBuf::from("out"),
            seed: 1,
            verify: VerifyConfig::default(),
        }
    }
}

/// Default configuration as commented TOML.
pub fn defaults_toml() -> String {
    let c = ExperimentConfig::default();
    format!(
        r#"# deepo experiment configuration. All quantities are dimensionless.

# Number of samples T in the data batch (T >= n + m).
data_length = {}
# Fixed stepsize of the projected gradient iteration.
eta = {:e}
# Iteration cap of a run.
max_iter = {}
# A run stops once the Frobenius norm of the projected gradient is below this.
grad_tol = {:e}
# Certainty-equivalence weight (deepo-ce).
lambda_ce = {:?}
# Robustness weight (deepo-rob).
gamma_rob = {:?}
# Closed-loop spectral radius must stay below 1 - stability_margin.
stability_margin = {:e}
# Reference optimum of regularized objectives: converge to this gradient norm.
reference_grad_tol = {:e}
reference_max_iter = {}
# Directory for data, traces and reports.
output_dir = "{}"
# Seed of the data batch and every derived random draw.
seed = {}

# kind = "paper-example" | "random" (random also needs n, m, target_rho, seed)
[system]
kind = "paper-example"

# kind = "auto" | "zero-gain" | "given-gain" (gain = [[...], ...]) | "perturbed" (variance = 0.01)
[init]
kind = "auto"

# Sample counts of the verify suite.
[verify]
gradient_samples = {}
hessian_samples = {}
smoothness_samples = {}
identity_samples = {}
convexity_samples = {}
subspace_samples = {}
flatness_probes = {}
audit_iterations = {}
"#,
        c.data_length,
        c.eta,
        c.max_iter,
        c.grad_tol,
        c.lambda_ce,
        c.gamma_rob,
        c.stability_margin,
        c.reference_grad_tol,
        c.reference_max_iter,
        c.output_dir.display(),
        c.seed,
        c.verify.gradient_samples,
        c.verify.hessian_samples,
        c.verify.smoothness_samples,
        c.verify.identity_samples,
        c.verify.convexity_samples,
        c.verify.subspace_samples,
        c.verify.flatness_probes,
        c.verify.audit_iterations,
    )
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// `(n, m)` of the configured system.
    pub fn dimensions(&self) -> (usize, usize) {
        match self.system {
            SystemSource::PaperExample => (4, 2),
            SystemSource::Random { n, m, .. } => (n, m),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        let (n, m) = self.dimensions();
        if n == 0 || m == 0 {
            return bad("system dimensions must be positive".into());
        }
        if let SystemSource::Random { target_rho, .. } = self.system {
            if !(target_rho > 0.0 && target_rho.is_finite()) {
                return bad(format!("target_rho must be positive, got {target_rho}"));
            }
        }
        if self.data_length < n + m {
            return Err(Error::InsufficientData {
                t: self.data_length,
                required: n + m,
            });
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be positive, got {}", self.eta));
        }
        if !(self.grad_tol > 0.0) || !(self.reference_grad_tol > 0.0) {
            return bad("gradient tolerances must be positive".into());
        }
        if !(0.0..1.0).contains(&self.stability_margin) {
            return bad(format!("stability_margin must lie in [0, 1), got {}", self.stability_margin));
        }
        Regularization {
            lambda_ce: self.lambda_ce,
            gamma_rob: self.gamma_rob,
        }
        .validate()?;
        match &self.init {
            InitPolicy::GivenGain { gain } => {
                if gain.len() != m || gain.iter().any(|row| row.len() != n) {
                    return bad(format!("init gain must be {m}x{n}"));
                }
            }
            InitPolicy::Perturbed { variance } if !(*variance >= 0.0 && variance.is_finite()) => {
                return bad(format!("perturbation variance must be nonnegative, got {variance}"));
            }
            _ => {}
        }
        Ok(())
    }

    pub fn system_model(&self) -> Result<SystemModel> {
        match self.system {
            SystemSource::PaperExample => Ok(paper_example_system()),
            SystemSource::Random { n, m, target_rho, seed } => random_system(n, m, target_rho, seed),
        }
    }

    /// Regularizer weights used by `algorithm`.
    pub fn regularization(&self, algorithm: Algorithm) -> Regularization {
        match algorithm {
            Algorithm::Deepo => Regularization::none(),
            Algorithm::DeepoCe => Regularization::certainty_equivalence(self.lambda_ce),
            Algorithm::DeepoRob => Regularization::robustness(self.gamma_rob),
        }
    }

    pub fn data_path(&self) -> PathBuf {
        self.output_dir.join("data.txt")
    }

    pub fn trace_path(&self, algorithm: Algorithm) -> PathBuf {
        self.output_dir.join(format!("trace-{algorithm}.csv"))
    }

    pub fn report_path(&self, algorithm: Algorithm) -> PathBuf {
        self.output_dir.join(format!("report-{algorithm}.json"))
    }
}

pub(crate) fn rows_to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let ncols = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j])
}

pub(crate) fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}
