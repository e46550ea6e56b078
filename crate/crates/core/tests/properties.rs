mod common;

use knr::controller::{
    derivative_fdm, derivative_sensitivity, nr_step, ControllerConfig, PredictorEval,
};
use knr::linalg::{expm, input_integral, pinv, Matrix};
use knr::ode::{sensitivity_propagate, simulate_final};
use knr::systems::{self, basis_by_name, system_by_name};
use proptest::prelude::*;

use common::{mixed_rank, random_matrix, random_vec, rel_frob, rng};

fn config() -> ProptestConfig {
    ProptestConfig::with_cases(64)
}

/// Central differences of `f` with respect to each coordinate of `at`.
fn central_jacobian(f: impl Fn(&[f64]) -> Vec<f64>, at: &[f64], h: f64) -> Matrix {
    let rows = f(at).len();
    let mut jac = Matrix::zeros(rows, at.len());
    let mut p = at.to_vec();
    for j in 0..at.len() {
        p[j] = at[j] + h;
        let plus = f(&p);
        p[j] = at[j] - h;
        let minus = f(&p);
        p[j] = at[j];
        for i in 0..rows {
            jac[(i, j)] = (plus[i] - minus[i]) / (2.0 * h);
        }
    }
    jac
}

/// Relative Frobenius closeness; the absolute floor only covers exact zeros.
fn close(a: &Matrix, b: &Matrix, rel: f64) -> bool {
    (a - b).norm() <= rel * b.norm() + 1e-12
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn pinv_penrose_identities(seed in any::<u64>(), rank in 1usize..=5) {
        let mut r = rng(seed);
        let m = mixed_rank(&mut r, 5, rank);
        let p = pinv(&m, 0.0).unwrap();
        prop_assert!(rel_frob(&(&m * &p * &m), &m) <= 1e-10);
        prop_assert!(rel_frob(&(&p * &m * &p), &p) <= 1e-10);
    }

    #[test]
    fn expm_of_commuting_sum_factors(seed in any::<u64>()) {
        let mut r = rng(seed);
        let basis = Matrix::identity(3, 3) + random_matrix(&mut r, 3, 3) * 0.3;
        let inv = basis.clone().try_inverse().unwrap();
        let d1 = Matrix::from_diagonal(&random_matrix(&mut r, 3, 1).column(0).into_owned());
        let d2 = Matrix::from_diagonal(&random_matrix(&mut r, 3, 1).column(0).into_owned());
        let a = &basis * d1 * &inv;
        let b = &basis * d2 * &inv;
        let lhs = expm(&(&a + &b)).unwrap();
        let rhs = expm(&a).unwrap() * expm(&b).unwrap();
        prop_assert!(rel_frob(&lhs, &rhs) <= 1e-10);
    }

    #[test]
    fn input_integral_inverts_the_exponential(seed in any::<u64>(), t in 0.05f64..2.0) {
        let mut r = rng(seed);
        let a = random_matrix(&mut r, 4, 4) - Matrix::identity(4, 4) * 2.0;
        let lhs = input_integral(&a, t).unwrap() * &a + Matrix::identity(4, 4);
        let rhs = expm(&(&a * t)).unwrap();
        prop_assert!((lhs - rhs).amax() <= 1e-9);
    }

    #[test]
    fn simulate_composes_over_horizons(
        x0 in prop::collection::vec(-2.0f64..2.0, 2),
        u in -2.0f64..2.0,
        steps in 1usize..100,
    ) {
        let sys = systems::vdp();
        let input = [u];
        let flow = sys.flow(&input);
        let h = steps as f64 * 0.01;
        let half = simulate_final(&flow, &x0, 0.0, h, 0.01).unwrap();
        let twice = simulate_final(&flow, &half, h, h, 0.01).unwrap();
        let whole = simulate_final(&flow, &x0, 0.0, 2.0 * h, 0.01).unwrap();
        for (a, b) in twice.iter().zip(&whole) {
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn car_drives_straight_on_equal_wheels(
        x0 in prop::collection::vec(-5.0f64..5.0, 3),
        w in -10.0f64..10.0,
    ) {
        let sys = systems::car(Default::default()).unwrap();
        let input = [w, w];
        let end = simulate_final(&sys.flow(&input), &x0, 0.0, 2.0, 0.01).unwrap();
        prop_assert_eq!(end[2], x0[2]);
        // Displacement stays on the initial heading line.
        let (dx, dy) = (end[0] - x0[0], end[1] - x0[1]);
        let cross = dx * x0[2].sin() - dy * x0[2].cos();
        prop_assert!(cross.abs() <= 1e-12);
        let dist = (dx * dx + dy * dy).sqrt();
        prop_assert!((dist - (0.1 * w * 2.0).abs()).abs() <= 1e-12);
    }

    #[test]
    fn lift_keeps_the_state(
        x in prop::collection::vec(-3.0f64..3.0, 4),
        u in prop::collection::vec(-10.0f64..10.0, 2),
    ) {
        for (name, n, m) in [("vdp", 2, 1), ("crane", 4, 1), ("car", 3, 2)] {
            let basis = basis_by_name(name, n, m).unwrap();
            prop_assert_eq!(&basis.lift(&x[..n], &u[..m])[..n], &x[..n]);
        }
    }

    #[test]
    fn nr_step_moves_along_the_newton_direction(
        seed in any::<u64>(),
        alpha in 0.5f64..50.0,
    ) {
        let mut r = rng(seed);
        let dg = random_matrix(&mut r, 2, 2) + Matrix::identity(2, 2) * 2.0;
        let g = random_vec(&mut r, &[(-1.0, 1.0); 2]);
        let target = random_vec(&mut r, &[(-1.0, 1.0); 2]);
        let u = random_vec(&mut r, &[(-1.0, 1.0); 2]);
        let cfg = ControllerConfig { alpha, ..ControllerConfig::default() };
        let eval = PredictorEval::new(g.clone(), dg.clone()).unwrap();
        let up = nr_step(&u, &target, &eval, &cfg, 0.0).unwrap();
        prop_assert!(!up.pinv_fallback && !up.damped_retry);
        let du = Matrix::from_iterator(2, 1, up.u.iter().zip(&u).map(|(a, b)| a - b));
        let implied = dg * du / (cfg.dt * alpha);
        for i in 0..2 {
            prop_assert!((implied[(i, 0)] - (target[i] - g[i])).abs() <= 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn analytic_jacobians_match_central_differences(
        x in prop::collection::vec(-3.0f64..3.0, 4),
        u in prop::collection::vec(-10.0f64..10.0, 2),
    ) {
        for name in ["vdp", "crane", "car"] {
            let sys = system_by_name(name).unwrap();
            let (x, u) = (&x[..sys.n], &u[..sys.m]);
            let fd_x = central_jacobian(|p| sys.eval(p, u), x, 1e-6);
            let fd_u = central_jacobian(|p| sys.eval(x, p), u, 1e-6);
            prop_assert!(close(&sys.jac_x(x, u), &fd_x, 1e-5), "{} jac_x", name);
            prop_assert!(close(&sys.jac_u(x, u), &fd_u, 1e-5), "{} jac_u", name);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn sensitivity_matches_differences_of_simulate(
        x in prop::collection::vec(-3.0f64..3.0, 3),
        u in prop::collection::vec(-10.0f64..10.0, 2),
    ) {
        for (name, horizon) in [("vdp", 0.15), ("car", 0.5)] {
            let sys = system_by_name(name).unwrap();
            let (x, u) = (&x[..sys.n], &u[..sys.m]);
            let xi = sensitivity_propagate(
                &sys.flow(u),
                |x, u| sys.jac_x(x, u),
                |x, u| sys.jac_u(x, u),
                x,
                u,
                horizon,
                0.01,
            )
            .unwrap();
            let fd = central_jacobian(
                |p| simulate_final(&sys.flow(p), x, 0.0, horizon, 0.01).unwrap(),
                u,
                1e-5,
            );
            prop_assert!(close(&xi, &fd, 1e-4), "{}", name);
        }
    }

    #[test]
    fn fdm_and_sensitivity_agree(
        x in prop::collection::vec(-3.0f64..3.0, 4),
        u in prop::collection::vec(-10.0f64..10.0, 2),
        long in any::<bool>(),
    ) {
        let horizon = if long { 0.5 } else { 0.15 };
        for name in ["vdp", "crane", "car"] {
            let sys = system_by_name(name).unwrap();
            let (x, u) = (&x[..sys.n], &u[..sys.m]);
            let fdm = derivative_fdm(&sys, x, u, horizon, 0.01, 1e-6).unwrap();
            let sens = derivative_sensitivity(&sys, x, u, horizon, 0.01).unwrap();
            prop_assert!(close(&fdm, &sens, 1e-4), "{}", name);
        }
    }
}
