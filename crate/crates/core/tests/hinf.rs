use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sabra_core::hinf::{
    cost_against_control, cost_against_disturbance, disturbance_ladder, energy_identity, gamma0_power_iteration,
    gamma_star, optimal_disturbance, robust_loop_linear, smooth_disturbance, smooth_initial, synthesize_robust,
    value_decomposition, FeedbackSign, HinfContext,
};

fn scalar_ctx(alpha: f64) -> HinfContext {
    let one = DMatrix::from_element(1, 1, 1.0);
    HinfContext::new(DMatrix::from_element(1, 1, alpha), one.clone(), one).unwrap()
}

/// A small coupled system with a slow unstable mode.
fn small_ctx() -> HinfContext {
    let a = DMatrix::from_row_slice(4, 4, &[
        -0.5, 1.0, 0.0, 0.0,
        -1.0, 2.0, 0.5, 0.0,
        0.0, 0.3, 8.0, 1.0,
        0.0, 0.0, -1.0, 30.0,
    ]);
    let b1 = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    let b2 = DMatrix::from_row_slice(4, 1, &[0.5, 0.0, 1.0, 0.2]);
    HinfContext::new(a, b1, b2).unwrap()
}

#[test]
fn scalar_critical_levels_agree() {
    for alpha in [0.5, 1.0] {
        let ctx = scalar_ctx(alpha);
        let want = 1.0 / (1.0 + alpha * alpha);
        let gs = gamma_star(&ctx, 1e-9).unwrap();
        assert!((gs.gamma_star - want).abs() < 1e-6);
        let g0 = gamma0_power_iteration(&ctx, &ctx.grid(2e-3), 1e-10, 3, 500).unwrap();
        assert!(g0.converged);
        assert!((g0.gamma0 - want).abs() <= 0.05 * want, "alpha {alpha}: {}", g0.gamma0);
    }
}

#[test]
fn missing_disturbance_channel() {
    let one = DMatrix::from_element(1, 1, 1.0);
    let ctx = HinfContext::new(one.clone(), one, DMatrix::zeros(1, 1)).unwrap();
    assert_eq!(gamma_star(&ctx, 1e-6).unwrap().gamma_star, 0.0);
    assert_eq!(gamma0_power_iteration(&ctx, &ctx.grid(1e-2), 1e-8, 1, 10).unwrap().gamma0, 0.0);
}

#[test]
fn structure_of_the_coupled_system() {
    let ctx = small_ctx();
    let grid = ctx.grid(5e-4);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut solver = ctx.solver();
    for _ in 0..3 {
        let u0 = smooth_initial(&ctx, 1.0, &mut rng);
        let w = smooth_disturbance(&grid, 1, 1.0, &mut rng).unwrap();
        let v = smooth_disturbance(&grid, 1, 1.0, &mut rng).unwrap();
        let (qw, qv) = (solver.apply_q(&w).unwrap(), solver.apply_q(&v).unwrap());
        let sym = (w.inner(&qv).unwrap() - v.inner(&qw).unwrap()).abs() / (w.norm() * v.norm());
        assert!(sym <= 1e-6);
        assert!(w.inner(&qw).unwrap() > 0.0);
        let sol = solver.solve(&u0, &w).unwrap();
        let (l, r) = energy_identity(&ctx, &sol, &w);
        assert!((l - r).abs() <= 1e-5 * l.abs().max(r.abs()));
        let d = value_decomposition(&mut solver, &u0, &w, 3.0).unwrap();
        assert!(d.relative_error <= 1e-5 && d.duality_error <= 1e-5);
    }
}

#[test]
fn saddle_point() {
    let ctx = small_ctx();
    let gs = gamma_star(&ctx, 1e-8).unwrap().gamma_star;
    let ctrl = synthesize_robust(&ctx, 1.5 * gs).unwrap();
    let grid = ctrl.grid(5e-4).unwrap();
    let u0 = DVector::from_vec(vec![1.0, -0.5, 0.2, 0.1]);
    let best = optimal_disturbance(&ctrl, &u0, &grid).unwrap();
    assert!((best.cost - best.value).abs() <= 1e-4 * best.value, "{} vs {}", best.cost, best.value);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..4 {
        let dw = smooth_disturbance(&grid, 1, 0.3, &mut rng).unwrap();
        let w = best.disturbance.axpy(1.0, &dw).unwrap();
        assert!(cost_against_disturbance(&ctrl, &u0, &w).unwrap() <= best.cost * (1.0 + 1e-6));
        // the deviation adds exactly half its squared norm
        let dv = smooth_disturbance(&grid, 2, 0.3, &mut rng).unwrap();
        let c = cost_against_control(&ctrl, &u0, &dv).unwrap();
        assert!((c - best.cost - 0.5 * dv.norm().powi(2)).abs() <= 1e-4 * best.cost, "{c}");
    }
}

#[test]
fn attenuation_above_critical_level() {
    let ctx = small_ctx();
    let gs = gamma_star(&ctx, 1e-8).unwrap().gamma_star;
    let ctrl = synthesize_robust(&ctx, 1.25 * gs).unwrap();
    assert!(ctrl.loop_margin(FeedbackSign::Derived).unwrap() > 0.0);
    assert!(ctrl.loop_margin(FeedbackSign::Flipped).unwrap() < 0.0);
    let grid = ctrl.grid(1e-3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let u0 = smooth_initial(&ctx, 1.0, &mut rng);
        let w = smooth_disturbance(&grid, 1, 1.0, &mut rng).unwrap();
        let (_, rep) = robust_loop_linear(&ctrl, &u0, &w).unwrap();
        assert!(rep.pass, "ratio {}", rep.ratio);
    }
}

#[test]
fn below_critical_level_the_ladder_blows_up() {
    let ctx = small_ctx();
    let grid = ctx.grid(1e-3);
    let est = gamma0_power_iteration(&ctx, &grid, 1e-10, 5, 500).unwrap();
    let w = est.direction.unwrap();
    let u0 = DVector::from_vec(vec![0.1, 0.0, 0.0, 0.0]);
    let mut solver = ctx.solver();
    let phi = solver.solve(&DVector::zeros(4), &w).unwrap();
    let w = if u0.dot(&phi.r[0]) < 0.0 { w.scale(-1.0) } else { w };
    let ladder = disturbance_ladder(&mut solver, &u0, &w, 0.8 * est.gamma0, 8).unwrap();
    assert!(ladder.strictly_increasing && ladder.superlinear);
    let above = disturbance_ladder(&mut solver, &u0, &w, 1.2 * est.gamma0, 8).unwrap();
    assert!(!above.strictly_increasing);
}
