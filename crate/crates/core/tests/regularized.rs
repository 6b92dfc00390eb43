mod common;

use common::{controllability_series, gaussian, Bench};
use deepo::certificates::finite_difference_directional;
use deepo::data::{gaussian_batch, paper_example_system};
use deepo::policy::recover_gain;
use deepo::regularized::{implicit_regularization_audit, orthogonality_identity_check, regularizer_terms, run_regularized};
use deepo::{run_deepo, LqrProblem, OptimizerConfig, PolicyG, Regularization, StopReason};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn problem_with(b: &Bench, reg: Regularization) -> LqrProblem<'_> {
    LqrProblem::regularized(&b.data, b.system.q().clone(), b.system.r().clone(), reg).unwrap()
}

/// `G^0 + Pi_{D_-} M` with entries of `M` drawn with variance 0.01.
fn perturbed_g0(b: &Bench, seed: u64) -> PolicyG {
    let m = gaussian(&mut common::rng(seed), 10, 4) * 0.1;
    PolicyG::new(b.g0().matrix() + b.data.pi_d().matrix() * m)
}

fn eigen_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

#[test]
fn zero_weights_reduce_to_plain_cost() {
    let b = Bench::new(1);
    let plain = b.problem();
    let zero = problem_with(&b, Regularization::none());
    let mut rng = common::rng(1);
    for _ in 0..10 {
        let g = b.random_feasible(&mut rng, 0.3);
        let (a, z) = (plain.evaluate(&g).unwrap(), zero.evaluate(&g).unwrap());
        assert!((a.cost - z.cost).abs() <= 1e-12 * a.cost);
        let (ga, gz) = (plain.gradient(&g).unwrap(), zero.gradient(&g).unwrap());
        assert!((ga - &gz).norm() <= 1e-12 * gz.norm());
    }
}

#[test]
fn regularizers_vanish_in_range_of_pseudoinverse() {
    let b = Bench::new(1);
    let j0 = b.problem().cost(&b.g0()).unwrap();
    for lambda in [0.1, 1.0, 10.0, 1000.0] {
        let p = problem_with(&b, Regularization::certainty_equivalence(lambda));
        assert!((p.cost(&b.g0()).unwrap() - j0).abs() <= 1e-10 * j0);
    }
}

#[test]
fn regularized_cost_splits_into_independent_terms() {
    let b = Bench::new(1);
    let mut rng = common::rng(2);
    let ce = problem_with(&b, Regularization::certainty_equivalence(10.0));
    let rob = problem_with(&b, Regularization::robustness(10.0));
    for _ in 0..10 {
        let base = b.random_feasible(&mut rng, 0.2);
        let g = PolicyG::new(base.matrix() + b.data.pi_d().matrix() * gaussian(&mut rng, 10, 4) * 0.1);
        let j = b.problem().cost(&g).unwrap();
        let sigma = controllability_series(&g.closed_loop(&b.data), &DMatrix::identity(4, 4));
        let root = eigen_sqrt(&sigma);
        let ce_term = 10.0 * (b.data.pi_d().matrix() * g.matrix() * &root).norm_squared();
        let rob_term = 10.0 * (g.matrix() * &sigma * g.matrix().transpose()).trace();
        assert!(ce_term > 0.0);
        let jl = ce.cost(&g).unwrap();
        let jg = rob.cost(&g).unwrap();
        assert!(((jl - j) - ce_term).abs() <= 1e-9 * (1.0 + jl));
        assert!(((jg - j) - rob_term).abs() <= 1e-9 * (1.0 + jg));
        let terms = regularizer_terms(&ce, &g).unwrap();
        assert!((terms.total() - jl).abs() <= 1e-9 * jl);
        assert!((terms.certainty_equivalence - ce_term).abs() <= 1e-9 * (1.0 + ce_term));
        assert_eq!(terms.robustness, 0.0);
        assert!((ce.evaluate(&g).unwrap().lqr_cost - j).abs() <= 1e-10 * j);
    }
}

#[test]
fn regularized_gradients_match_central_differences() {
    let b = Bench::new(1);
    let mut rng = common::rng(3);
    for reg in [Regularization::certainty_equivalence(10.0), Regularization::robustness(10.0)] {
        let p = problem_with(&b, reg);
        for _ in 0..10 {
            let base = b.random_feasible(&mut rng, 0.2);
            let g = PolicyG::new(base.matrix() + b.data.pi_d().matrix() * gaussian(&mut rng, 10, 4) * 0.1);
            let grad = p.gradient(&g).unwrap();
            let z = gaussian(&mut rng, 10, 4);
            let z = &z / z.norm();
            let fd = finite_difference_directional(|x| Ok(p.evaluate_relaxed(x)?.cost), g.matrix(), &z, 1e-6).unwrap();
            let analytic = grad.dot(&z);
            assert!((analytic - fd).abs() <= 1e-5 * analytic.abs().max(1e-3 * grad.norm()), "{reg:?}: {analytic} vs {fd}");
        }
    }
}

#[test]
fn zero_weight_run_matches_plain_run() {
    let b = Bench::new(1);
    let cfg = OptimizerConfig::fixed(2e-3, 300, 1e-9);
    let g0 = perturbed_g0(&b, 5);
    let plain = run_deepo(&b.problem(), &g0, &cfg).unwrap();
    let zero = run_regularized(&problem_with(&b, Regularization::none()), &g0, &cfg).unwrap();
    assert_eq!(plain.records.len(), zero.records.len());
    for (a, z) in plain.iterates().zip(zero.iterates()) {
        assert!((a - z).norm() <= 1e-12 * (1.0 + a.norm()));
    }
}

#[test]
fn certainty_equivalence_run_is_unbiased() {
    let b = Bench::new(1);
    let p = problem_with(&b, Regularization::certainty_equivalence(10.0));
    let g0 = perturbed_g0(&b, 1);
    let trace = run_regularized(&p, &g0, &OptimizerConfig::fixed(2e-3, 100_000, 1e-9)).unwrap();
    assert_eq!(trace.status, StopReason::Converged);
    let costs = trace.costs();
    let slack = 1e-12 * (1.0 + costs[0]);
    assert!(costs.windows(2).all(|w| w[1] <= w[0] + slack));
    let k = recover_gain(&trace.final_policy, &b.data);
    assert!((k - &b.oracle.k_star).norm() <= 1e-4);
    // the explicit regularizer drives the nullspace component out
    let audit = implicit_regularization_audit(&trace, &b.data, 1e-8);
    let first = audit.null_norms[0];
    let last = *audit.null_norms.last().unwrap();
    assert!(first > 0.1 && last < 1e-6 * first, "{first} -> {last}");
    let rises = audit.null_norms.windows(2).filter(|w| w[1] > w[0] * (1.0 + 1e-9)).count();
    assert_eq!(rises, 0);
}

#[test]
fn robustness_run_is_biased_upward() {
    let b = Bench::new(1);
    let p = problem_with(&b, Regularization::robustness(10.0));
    let trace = run_regularized(&p, &b.g0(), &OptimizerConfig::fixed(2e-3, 100_000, 1e-9)).unwrap();
    assert_eq!(trace.status, StopReason::Converged);
    let j = trace.last().lqr_cost;
    assert!(j >= b.oracle.j_star - 1e-9);
    assert!(j > b.oracle.j_star + 1e-3, "regularizer should move the optimum: {j}");
}

#[test]
fn plain_iteration_never_leaves_range_of_pseudoinverse() {
    let b = Bench::new(1);
    let cfg = OptimizerConfig::fixed(2e-3, 1000, f64::MIN_POSITIVE);
    let trace = run_deepo(&b.problem(), &b.g0(), &cfg).unwrap();
    let audit = implicit_regularization_audit(&trace, &b.data, 1e-8);
    assert_eq!(audit.null_norms.len(), 1001);
    assert!(!audit.violated, "{}", audit.max_null_norm);
    assert!(audit.max_null_norm <= 1e-8);
}

#[test]
fn plain_iteration_freezes_nullspace_component() {
    let b = Bench::new(1);
    let g0 = perturbed_g0(&b, 9);
    let trace = run_deepo(&b.problem(), &g0, &OptimizerConfig::fixed(2e-3, 1000, f64::MIN_POSITIVE)).unwrap();
    let audit = implicit_regularization_audit(&trace, &b.data, 1e-8);
    assert!(audit.violated);
    assert!(audit.max_drift <= 1e-8);
    assert!(audit.max_step_drift <= 1e-10);
}

#[test]
fn projected_gradient_lies_in_row_space_of_data() {
    let b = Bench::new(1);
    let p = b.problem();
    let mut rng = common::rng(12);
    for _ in 0..50 {
        let base = b.random_feasible(&mut rng, 0.3);
        let g = PolicyG::new(base.matrix() + b.data.pi_d().matrix() * gaussian(&mut rng, 10, 4) * 0.1);
        let grad = p.gradient(&g).unwrap().norm();
        assert!(orthogonality_identity_check(&p, &g).unwrap() <= 1e-9 * grad);
    }
    assert!(orthogonality_identity_check(&p, &b.oracle.g_star).unwrap() <= 1e-9);
}

#[test]
fn square_data_has_empty_nullspace() {
    let sys = paper_example_system();
    let data = gaussian_batch(&sys, 6, 4).unwrap();
    assert!(data.pi_d().matrix().norm() <= 1e-12);
    let p = LqrProblem::new(&data, sys.q().clone(), sys.r().clone()).unwrap();
    let g = deepo::policy::initial_policy_from_gain(&DMatrix::zeros(2, 4), &data, 1e-9).unwrap();
    assert!(orthogonality_identity_check(&p, &g).unwrap() <= 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn effective_weight_dominates_lqr_weight(lambda in 0.0f64..50.0, gamma in 0.0f64..50.0, seed in 1u64..4) {
        let b = Bench::new(seed);
        let reg = Regularization { lambda_ce: lambda, gamma_rob: gamma };
        let p = problem_with(&b, reg);
        let diff = p.input_weight().as_matrix() - p.lqr_weight().as_matrix();
        prop_assert!((&diff - diff.transpose()).norm() == 0.0);
        let min = diff.symmetric_eigen().eigenvalues.min();
        prop_assert!(min >= -1e-10 * (1.0 + lambda + gamma));
        let g = perturbed_g0(&b, seed);
        prop_assert!(p.cost(&g).unwrap() >= b.problem().cost(&g).unwrap() - 1e-12);
    }
}
