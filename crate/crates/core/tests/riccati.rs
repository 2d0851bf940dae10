use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sabra_core::riccati::{
    coercivity_bounds, critical_gamma, finite_horizon_riccati_ode, solve_game_are, solve_stabilization_are, AreProblem,
};

fn scalar(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

/// Positive root of `q r^2 + 2 a r - 1 = 0` (system convention `du/dt + a u`).
fn scalar_root(a: f64, q: f64) -> f64 {
    if q == 0.0 {
        1.0 / (2.0 * a)
    } else {
        (-a + (a * a + q).sqrt()) / q
    }
}

#[test]
fn scalar_closed_forms() {
    let lqr = solve_stabilization_are(&AreProblem::new(scalar(-1.0), scalar(1.0), scalar(1.0)).unwrap()).unwrap();
    assert!((lqr.r[(0, 0)] - (1.0 + 2f64.sqrt())).abs() < 1e-12);
    assert!((lqr.r[(0, 0)] - scalar_root(-1.0, 1.0)).abs() < 1e-12);
    let lyap = solve_stabilization_are(&AreProblem::new(scalar(1.0), scalar(0.0), scalar(1.0)).unwrap()).unwrap();
    assert!((lyap.r[(0, 0)] - 0.5).abs() < 1e-12);
    let game = AreProblem::new(scalar(-1.0), scalar(1.0), scalar(1.0))
        .unwrap()
        .with_disturbance(scalar(1.0), 2.0)
        .unwrap();
    let g = solve_game_are(&game).unwrap().r[(0, 0)];
    assert!((g - (2.0 + 6f64.sqrt())).abs() < 1e-10);
    assert!((g - scalar_root(-1.0, 0.5)).abs() < 1e-10);
}

#[test]
fn large_gamma_recovers_lqr() {
    let base = AreProblem::new(scalar(-1.0), scalar(1.0), scalar(1.0)).unwrap();
    let mut prev = f64::INFINITY;
    for gamma in [10.0, 100.0, 1e4, 1e6] {
        let g = solve_game_are(&base.clone().with_disturbance(scalar(1.0), gamma).unwrap()).unwrap().r[(0, 0)];
        assert!(g < prev);
        prev = g;
    }
    assert!((prev - (1.0 + 2f64.sqrt())).abs() < 1e-5);
}

#[test]
fn absent_disturbance_reduces_to_lqr() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = DMatrix::from_fn(5, 5, |_, _| rng.random_range(-1.0..1.0));
    let b = DMatrix::from_fn(5, 2, |_, _| rng.random_range(-1.0..1.0));
    let p = AreProblem::new(a, b, DMatrix::identity(5, 5)).unwrap();
    let lqr = solve_stabilization_are(&p).unwrap();
    let game = solve_game_are(&p.clone().with_disturbance(DMatrix::zeros(5, 1), 3.0).unwrap()).unwrap();
    assert!((&lqr.r - &game.r).norm() <= 1e-10 * lqr.r.norm());
}

#[test]
fn ode_oracle() {
    let p = AreProblem::new(scalar(-1.0), scalar(1.0), scalar(1.0)).unwrap();
    assert_eq!(finite_horizon_riccati_ode(&p, 0.0, 10).unwrap().last()[(0, 0)], 0.0);
    let ode = finite_horizon_riccati_ode(&p, 10.0, 2000).unwrap();
    assert!((ode.last()[(0, 0)] - (1.0 + 2f64.sqrt())).abs() <= 1e-6);
    assert_eq!(ode.values[0][(0, 0)], 0.0);
}

#[test]
fn ode_approaches_are_as_horizon_doubles() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut a = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
    for i in 0..4 {
        a[(i, i)] += 1.5;
    }
    let b = DMatrix::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0));
    let p = AreProblem::new(a, b, DMatrix::identity(4, 4)).unwrap();
    let are = solve_stabilization_are(&p).unwrap();
    let mut last = f64::INFINITY;
    for t in [0.5, 1.0, 2.0, 4.0, 8.0, 16.0] {
        let ode = finite_horizon_riccati_ode(&p, t, (400.0 * t) as usize).unwrap();
        let err = (ode.last() - &are.r).norm();
        assert!(err < last, "T {t}: {err} after {last}");
        last = err;
    }
    assert!(last <= 1e-6);
}

#[test]
fn critical_gamma_of_scalar_problem() {
    // 2 a r + (1 - 1/g) r^2 - 1 = 0 has a real root iff g >= 1/(1 + a^2)
    for a in [0.5, 1.0, 2.0] {
        let p = AreProblem::new(scalar(a), scalar(1.0), scalar(1.0))
            .unwrap()
            .with_disturbance(scalar(1.0), 1.0)
            .unwrap();
        let c = critical_gamma(&p, (0.05, 2.0), 1e-9).unwrap();
        assert!((c.gamma_star - 1.0 / (1.0 + a * a)).abs() < 1e-6, "a {a}: {}", c.gamma_star);
    }
}

#[test]
fn game_solution_decreases_in_gamma() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let a = DMatrix::from_fn(6, 6, |_, _| rng.random_range(-1.0..1.0));
    let b1 = DMatrix::identity(6, 6);
    let b2 = DMatrix::from_fn(6, 2, |_, _| rng.random_range(-1.0..1.0));
    let p = AreProblem::new(a, b1, DMatrix::identity(6, 6)).unwrap().with_disturbance(b2, 1.0).unwrap();
    let c = critical_gamma(&p, (0.01, 4.0), 1e-8).unwrap();
    let levels = [1.1, 1.5, 2.0, 4.0, 16.0].map(|f| f * c.gamma_star.max(1e-3));
    let sols: Vec<_> = levels.iter().map(|&g| solve_game_are(&p.with_gamma(g)).unwrap().r).collect();
    for w in sols.windows(2) {
        let (lo, _) = coercivity_bounds(&(&w[0] - &w[1]));
        assert!(lo >= -1e-10 * w[0].norm());
    }
}

fn problem() -> impl Strategy<Value = (DMatrix<f64>, DMatrix<f64>, f64)> {
    (prop::collection::vec(-1.0..1.0f64, 36), prop::collection::vec(-1.0..1.0f64, 12), -1.0..2.0f64).prop_map(
        |(a, b, shift)| {
            let mut a = DMatrix::from_vec(6, 6, a);
            for i in 0..6 {
                a[(i, i)] += shift;
            }
            (a, DMatrix::from_vec(6, 2, b), shift)
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn returned_solutions_are_valid((a, b, _) in problem()) {
        let p = AreProblem::new(a.clone(), b.clone(), DMatrix::identity(6, 6)).unwrap();
        if let Ok(s) = solve_stabilization_are(&p) {
            let r = &s.r;
            let scale = r.norm();
            prop_assert!((r - r.transpose()).norm() <= 1e-12 * scale);
            prop_assert!(s.min_eigenvalue >= -1e-10 * scale);
            prop_assert!(s.residual_frobenius <= 1e-8 * (1.0 + scale * scale));
            // identity weight: strictly coercive
            let (b1, b2) = coercivity_bounds(r);
            prop_assert!(b1 > 0.0 && b2 >= b1);
            prop_assert!(s.closed_loop_margin > 0.0);
        }
    }

    #[test]
    fn shifted_problems_meet_the_shift((a, b, _) in problem(), beta in 0.1..3.0f64) {
        let p = AreProblem::new(a, b, DMatrix::identity(6, 6)).unwrap().with_shift(beta);
        if let Ok(s) = solve_stabilization_are(&p) {
            prop_assert!(s.closed_loop_margin > beta - 1e-8);
        }
    }
}
