mod common;

use common::{controllability_series, observability_series, Bench};
use deepo::linalg::*;
use deepo::{Error, SymMatrix};
use nalgebra::{dmatrix, DMatrix};
use proptest::prelude::*;

#[test]
fn lyapunov_obs_zero_dynamics() {
    let p = solve_discrete_lyapunov_obs(&DMatrix::zeros(2, 2), &SymMatrix::identity(2)).unwrap();
    assert!((p.as_matrix() - DMatrix::<f64>::identity(2, 2)).norm() < 1e-15);
}

#[test]
fn lyapunov_obs_scalar() {
    let p = solve_discrete_lyapunov_obs(&dmatrix![0.5], &SymMatrix::from_diagonal(&[1.0])).unwrap();
    assert!((p[(0, 0)] - 1.0 / (1.0 - 0.25)).abs() < 1e-14);
}

#[test]
fn lyapunov_ctrl_examples() {
    let s = solve_discrete_lyapunov_ctrl(&DMatrix::zeros(3, 3), &SymMatrix::identity(3)).unwrap();
    assert!((s.as_matrix() - DMatrix::<f64>::identity(3, 3)).norm() < 1e-15);
    let s = solve_discrete_lyapunov_ctrl(&dmatrix![0.9], &SymMatrix::from_diagonal(&[1.0])).unwrap();
    assert!((s[(0, 0)] - 1.0 / (1.0 - 0.81)).abs() < 1e-12);
}

#[test]
fn lyapunov_on_benchmark_closed_loop_matches_series() {
    let b = Bench::new(1);
    let g0 = b.g0();
    let acl = g0.closed_loop(&b.data);
    let ug = b.data.u_minus() * g0.matrix();
    let w = b.system.q().as_matrix() + ug.transpose() * b.system.r().as_matrix() * &ug;
    let p = solve_discrete_lyapunov_obs(&acl, &SymMatrix::new(w.clone()).unwrap()).unwrap();
    let series = observability_series(&acl, &w);
    assert!((p.as_matrix() - &series).norm() <= 1e-10 * (1.0 + series.norm()));
    let residual = p.as_matrix() - &w - acl.transpose() * p.as_matrix() * &acl;
    assert!(residual.norm() <= 1e-10 * (1.0 + p.norm()));
    assert!(p.min_eigenvalue() > 0.0);
    assert!((p.trace() - b.problem().cost(&g0).unwrap()).abs() < 1e-12 * p.trace());

    // Two-sided cost identity: Tr{W Sigma} = Tr{P}.
    let sigma = solve_discrete_lyapunov_ctrl(&acl, &SymMatrix::identity(4)).unwrap();
    let sigma_series = controllability_series(&acl, &DMatrix::identity(4, 4));
    assert!((sigma.as_matrix() - &sigma_series).norm() <= 1e-10 * (1.0 + sigma_series.norm()));
    let two_sided = (&w * sigma.as_matrix()).trace();
    assert!((two_sided - p.trace()).abs() <= 1e-8 * (1.0 + p.trace()));
}

#[test]
fn lyapunov_rejects_unstable() {
    let err = solve_discrete_lyapunov_obs(&dmatrix![1.2, 0.0; 0.0, 0.1], &SymMatrix::identity(2)).unwrap_err();
    assert!(matches!(err, Error::Unstable { rho } if (rho - 1.2).abs() < 1e-12));
    assert!(solve_discrete_lyapunov_ctrl(&dmatrix![1.0], &SymMatrix::identity(1)).is_err());
}

#[test]
fn dare_zero_dynamics() {
    let n = 3;
    let (p, k) = solve_dare(
        &DMatrix::zeros(n, n),
        &DMatrix::identity(n, n),
        &SymMatrix::identity(n),
        &SymMatrix::identity(n),
    )
    .unwrap();
    assert!((p.as_matrix() - DMatrix::<f64>::identity(n, n)).norm() < 1e-14);
    assert!(k.norm() < 1e-14);
}

#[test]
fn dare_scalar_matches_quadratic_root() {
    // p = q + a^2 p - a^2 p^2 / (r + p)  <=>  p^2 + (r - q - a^2 r) p - q r = 0
    let (a, b, q, r) = (0.5f64, 1.0, 1.0, 1.0);
    let lin = r - q - a * a * r;
    let root = (-lin + (lin * lin + 4.0 * q * r).sqrt()) / 2.0;
    let (p, k) = solve_dare(
        &dmatrix![a],
        &dmatrix![b],
        &SymMatrix::from_diagonal(&[q]),
        &SymMatrix::from_diagonal(&[r]),
    )
    .unwrap();
    assert!((p[(0, 0)] - root).abs() < 1e-12);
    assert!((k[(0, 0)] + b * root * a / (r + b * b * root)).abs() < 1e-12);
}

#[test]
fn dare_benchmark_is_fixed_point_and_locally_optimal() {
    let b = Bench::new(1);
    let (a, bm) = (b.system.a(), b.system.b());
    let (q, r) = (b.system.q(), b.system.r());
    let (p, k) = solve_dare(a, bm, q, r).unwrap();
    let btpb = r.as_matrix() + bm.transpose() * p.as_matrix() * bm;
    let rhs = a.transpose() * p.as_matrix() * a + q.as_matrix()
        - a.transpose() * p.as_matrix() * bm * btpb.clone().try_inverse().unwrap() * bm.transpose() * p.as_matrix() * a;
    assert!((p.as_matrix() - rhs).norm() <= 1e-9 * (1.0 + p.norm()));
    let k_formula = -btpb.try_inverse().unwrap() * bm.transpose() * p.as_matrix() * a;
    assert!((&k - k_formula).norm() <= 1e-9);
    assert!(spectral_radius(&(a + bm * &k)).unwrap() < 1.0);

    let j_star = common::model_cost(&b.system, &k);
    assert!((j_star - p.trace()).abs() < 1e-10 * j_star);
    let mut rng = common::rng(3);
    for _ in 0..20 {
        let d = common::gaussian(&mut rng, 2, 4) * 1e-3;
        assert!(common::model_cost(&b.system, &(&k + d)) > j_star);
    }
}

#[test]
fn dare_unstabilizable_does_not_converge() {
    let a = dmatrix![2.0, 0.0; 0.0, 0.5];
    let b = dmatrix![0.0; 1.0];
    let err = solve_dare(&a, &b, &SymMatrix::identity(2), &SymMatrix::identity(1)).unwrap_err();
    assert!(matches!(err, Error::NoConvergence { .. }));
}

#[test]
fn pseudoinverse_examples() {
    let i3 = DMatrix::<f64>::identity(3, 3);
    assert!((right_pseudoinverse(&i3).unwrap() - &i3).norm() < 1e-15);
    let m = dmatrix![1.0, 0.0, 0.0; 0.0, 2.0, 0.0];
    let expected = dmatrix![1.0, 0.0; 0.0, 0.5; 0.0, 0.0];
    assert!((right_pseudoinverse(&m).unwrap() - expected).norm() < 1e-15);
    let b = Bench::new(1);
    let d = b.data.d_minus();
    assert!((d * b.data.d_pinv() - DMatrix::<f64>::identity(6, 6)).norm() <= 1e-10);
    let err = right_pseudoinverse(&dmatrix![1.0, 2.0; 2.0, 4.0]).unwrap_err();
    assert!(matches!(err, Error::RankDeficient { .. }));
}

#[test]
fn projector_examples() {
    let p = nullspace_projector(&dmatrix![2.0, 1.0; 0.0, 1.0], "square").unwrap();
    assert!(p.matrix().norm() < 1e-14);
    assert_eq!(p.rank(), 0);
    let p = nullspace_projector(&dmatrix![1.0, 0.0], "e1").unwrap();
    assert!((p.matrix() - dmatrix![0.0, 0.0; 0.0, 1.0]).norm() < 1e-15);
    assert_eq!(p.source(), "e1");
    let b = Bench::new(1);
    let pi = b.data.pi_x();
    assert_eq!(pi.rank(), 6);
    let eigs = SymMatrix::new(pi.matrix().clone()).unwrap().eigenvalues();
    assert_eq!(eigs.iter().filter(|e| (*e - 1.0).abs() < 1e-8).count(), 6);
    assert_eq!(eigs.iter().filter(|e| e.abs() < 1e-8).count(), 4);
}

#[test]
fn spectral_radius_examples() {
    assert!((spectral_radius(&dmatrix![0.3, 0.0; 0.0, -0.9]).unwrap() - 0.9).abs() < 1e-15);
    assert!((spectral_radius(&dmatrix![0.0, -1.0; 1.0, 0.0]).unwrap() - 1.0).abs() < 1e-14);
}

#[test]
fn sym_sqrt_examples() {
    let s = sym_sqrt(&SymMatrix::identity(4)).unwrap();
    assert!((s.as_matrix() - DMatrix::<f64>::identity(4, 4)).norm() < 1e-14);
    let s = sym_sqrt(&SymMatrix::from_diagonal(&[4.0, 9.0])).unwrap();
    assert!((s.as_matrix() - dmatrix![2.0, 0.0; 0.0, 3.0]).norm() < 1e-14);
    let b = Bench::new(1);
    let sigma = b.problem().evaluate(&b.g0()).unwrap().sigma;
    let root = sym_sqrt(&sigma).unwrap();
    assert!((root.as_matrix() * root.as_matrix() - sigma.as_matrix()).norm() <= 1e-9 * (1.0 + sigma.norm()));
    assert!(matches!(
        sym_sqrt(&SymMatrix::from_diagonal(&[1.0, -1e-3])),
        Err(Error::NotPsd { .. })
    ));
}

fn stable_matrix(n: usize, rho: f64, entries: Vec<f64>) -> DMatrix<f64> {
    let m = DMatrix::from_vec(n, n, entries);
    let r = spectral_radius(&m).unwrap();
    if r == 0.0 {
        m
    } else {
        m * (rho / r)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lyapunov_matches_series(n in 1usize..6, rho in 0.0f64..0.95, seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let a = stable_matrix(n, rho, common::gaussian(&mut rng, n, n).as_slice().to_vec());
        let f = common::gaussian(&mut rng, n, n);
        let w = &f * f.transpose() + DMatrix::<f64>::identity(n, n);
        let p = solve_discrete_lyapunov_obs(&a, &SymMatrix::new(w.clone()).unwrap()).unwrap();
        let series = observability_series(&a, &w);
        prop_assert!((p.as_matrix() - &series).norm() <= 1e-8 * (1.0 + series.norm()));
        prop_assert!(p.min_eigenvalue() >= 0.0);
        let s = solve_discrete_lyapunov_ctrl(&a, &SymMatrix::new(w.clone()).unwrap()).unwrap();
        let series = controllability_series(&a, &w);
        prop_assert!((s.as_matrix() - &series).norm() <= 1e-8 * (1.0 + series.norm()));
    }

    #[test]
    fn pseudoinverse_and_projector_invariants(p in 1usize..5, extra in 0usize..5, seed in any::<u64>()) {
        let q = p + extra;
        let mut rng = common::rng(seed);
        let m = common::gaussian(&mut rng, p, q);
        let pinv = right_pseudoinverse(&m).unwrap();
        prop_assert!((&m * &pinv - DMatrix::<f64>::identity(p, p)).norm() <= 1e-10);
        let proj = nullspace_projector(&m, "m").unwrap();
        let pm = proj.matrix();
        prop_assert!((&m * pm).norm() <= 1e-10);
        prop_assert!((pm * pm - pm).norm() <= 1e-10);
        prop_assert!((pm - pm.transpose()).norm() <= 1e-10);
        prop_assert_eq!(proj.rank(), q - p);
        // Minimal norm: the pseudoinverse has no component in the nullspace.
        prop_assert!((pm * &pinv).norm() <= 1e-10);
    }

    #[test]
    fn symmetrization_bound(n in 1usize..6, seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let s = SymMatrix::new(common::gaussian(&mut rng, n, n)).unwrap();
        let asym = s.as_matrix() - s.transpose();
        prop_assert!(asym.amax() <= 1e-12);
    }

    #[test]
    fn sym_sqrt_reconstructs(n in 1usize..6, seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let f = common::gaussian(&mut rng, n, n);
        let m = SymMatrix::new(&f * f.transpose()).unwrap();
        let s = sym_sqrt(&m).unwrap();
        prop_assert!((s.as_matrix() * s.as_matrix() - m.as_matrix()).norm() <= 1e-9 * (1.0 + m.norm()));
        prop_assert!(s.min_eigenvalue() >= -1e-12);
    }
}
