#![allow(dead_code)]

use deepo::certificates::{riccati_oracle, OracleSolution};
use deepo::data::{gaussian_batch, paper_example_system};
use deepo::policy::initial_policy_from_gain;
use deepo::{DataMatrices, LqrProblem, PolicyG, SystemModel};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub struct Bench {
    pub system: SystemModel,
    pub data: DataMatrices,
    pub oracle: OracleSolution,
}

impl Bench {
    pub fn new(seed: u64) -> Self {
        let system = paper_example_system();
        let data = gaussian_batch(&system, 10, seed).unwrap();
        let oracle = riccati_oracle(&system, &data).unwrap();
        Self { system, data, oracle }
    }

    pub fn problem(&self) -> LqrProblem<'_> {
        LqrProblem::new(&self.data, self.system.q().clone(), self.system.r().clone()).unwrap()
    }

    pub fn g0(&self) -> PolicyG {
        initial_policy_from_gain(&DMatrix::zeros(2, 4), &self.data, 1e-9).unwrap()
    }

    /// Feasible policy `G* + s Pi_X N`, shrunk until stable.
    pub fn random_feasible(&self, rng: &mut ChaCha8Rng, scale: f64) -> PolicyG {
        let problem = self.problem();
        let mut s = scale;
        loop {
            let n = gaussian(rng, self.data.len(), self.data.n());
            let g = PolicyG::new(self.oracle.g_star.matrix() + self.data.pi_x().matrix() * n * s);
            if problem.check_feasible(&g).is_ok() {
                return g;
            }
            s *= 0.5;
        }
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// `sum_{i=0}^{N} (A^T)^i W A^i` until the terms drop below machine precision.
pub fn observability_series(a: &DMatrix<f64>, w: &DMatrix<f64>) -> DMatrix<f64> {
    let mut term = w.clone();
    let mut sum = w.clone();
    for _ in 0..100_000 {
        term = a.transpose() * &term * a;
        sum += &term;
        if term.norm() <= 1e-18 * sum.norm() {
            break;
        }
    }
    sum
}

/// `sum_{i=0}^{N} A^i W (A^T)^i`.
pub fn controllability_series(a: &DMatrix<f64>, w: &DMatrix<f64>) -> DMatrix<f64> {
    observability_series(&a.transpose(), w)
}

/// Model-based LQR cost `Tr P_K` with `P_K = Q + K^T R K + (A+BK)^T P_K (A+BK)`,
/// summed as a series.
pub fn model_cost(system: &SystemModel, k: &DMatrix<f64>) -> f64 {
    let acl = system.a() + system.b() * k;
    let w = system.q().as_matrix() + k.transpose() * system.r().as_matrix() * k;
    observability_series(&acl, &w).trace()
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}
