use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use sabra_core::model::{ShellParams, ShellState};
use sabra_core::sim::{
    energy_budget, fit_decay_rate_series, integrate, step_halving_difference, IntegratorConfig, LinearPart, Rhs, Scheme,
};
use sabra_core::Error;

fn cfg(scheme: Scheme, dt: f64, t_end: f64) -> IntegratorConfig {
    IntegratorConfig {
        scheme,
        dt,
        t_end,
        record_every: 1,
        tolerance: 1e-8,
    }
}

fn soft_params() -> ShellParams {
    ShellParams::new(1.0, -0.5, 2.0, 1.0, 1e-3, 6).unwrap()
}

fn soft_initial() -> ShellState {
    ShellState::from_vec((1..=6).map(|n| Complex64::new(1.0, 0.5 * n as f64) / (1u32 << n) as f64).collect()).unwrap()
}

#[test]
fn etd_is_exact_on_pure_decay() {
    let p = ShellParams::default();
    let zero = ShellState::zeros(16);
    let rhs = Rhs::open_loop(&p, &zero);
    let tr = integrate(&rhs, &ShellState::unit(16, 1).unwrap(), &cfg(Scheme::EtdRk2, 1e-3, 1.0)).unwrap();
    for (t, n) in tr.times.iter().zip(tr.h_norms()) {
        assert!((n - (-4.0 * t).exp()).abs() <= 1e-8);
    }
    let still = integrate(&rhs, &zero, &cfg(Scheme::EtdRk2, 1e-3, 0.1)).unwrap();
    assert!(still.states.iter().all(|s| s.h_norm() == 0.0));
}

#[test]
fn step_halving_matches_scheme_order() {
    let p = soft_params();
    let f = ShellState::unit(6, 1).unwrap();
    let rhs = Rhs::open_loop(&p, &f);
    let u0 = soft_initial();
    for (scheme, dt) in [(Scheme::ImexCnAb2, 4e-3), (Scheme::EtdRk2, 4e-3), (Scheme::Rk4Explicit, 2e-2)] {
        let d1 = step_halving_difference(&rhs, &u0, &cfg(scheme, dt, 1.0)).unwrap();
        let d2 = step_halving_difference(&rhs, &u0, &cfg(scheme, dt / 2.0, 1.0)).unwrap();
        let observed = (d1 / d2).log2();
        assert!((observed - scheme.order() as f64).abs() < 0.3, "{}: {observed}", scheme.name());
    }
}

#[test]
fn imex_and_rk4_agree_on_soft_runs() {
    let p = soft_params();
    let f = ShellState::zeros(6);
    let rhs = Rhs::open_loop(&p, &f);
    let u0 = soft_initial();
    let a = integrate(&rhs, &u0, &cfg(Scheme::ImexCnAb2, 1e-4, 0.5)).unwrap();
    let b = integrate(&rhs, &u0, &cfg(Scheme::Rk4Explicit, 1e-3, 0.5)).unwrap();
    let (x, y) = (a.last().unwrap(), b.last().unwrap());
    assert!(x.sub(y).h_norm() <= 1e-6 * y.h_norm());
}

#[test]
fn fitting_examples() {
    let times: Vec<f64> = (0..=8000).map(|i| i as f64 * 1e-3).collect();
    let exact: Vec<f64> = times.iter().map(|t| (-4.0 * t).exp()).collect();
    let (rate, r2) = fit_decay_rate_series(&times, &exact, (1e-2, 1e-10)).unwrap();
    assert!((rate - 4.0).abs() < 1e-6 && r2 >= 1.0 - 1e-10);
    let wobble: Vec<f64> = times.iter().map(|t| (-4.0 * t).exp() * (1.0 + 0.01 * t.sin())).collect();
    let (rate, _) = fit_decay_rate_series(&times, &wobble, (1e-2, 1e-10)).unwrap();
    assert!((rate - 4.0).abs() < 0.02);
    let flat = vec![1.0; times.len()];
    assert!(matches!(fit_decay_rate_series(&times, &flat, (1e-2, 1e-10)), Err(Error::EmptyWindow)));
}

#[test]
fn energy_budget_examples() {
    let p = ShellParams::default();
    let zero = ShellState::zeros(16);
    // linear-only ETD run: shells decouple and the budget closes exactly
    let u0 = ShellState::unit(16, 1).unwrap().add(&ShellState::unit(16, 4).unwrap().scale(0.5));
    let rhs = Rhs::open_loop(&p, &zero);
    let tr = integrate(&rhs, &u0, &cfg(Scheme::EtdRk2, 1e-3, 0.2)).unwrap();
    let b = energy_budget(&tr, &p, &zero).unwrap();
    assert!(b.max_residual <= 1e-10);
    // unforced nonlinear run dissipates
    let soft = soft_params();
    let z6 = ShellState::zeros(6);
    let tr = integrate(&Rhs::open_loop(&soft, &z6), &soft_initial(), &cfg(Scheme::EtdRk2, 1e-3, 1.0)).unwrap();
    assert!(tr.h_norms().windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
    let b = energy_budget(&tr, &soft, &z6).unwrap();
    assert!(b.max_relative <= 1e-6, "{}", b.max_relative);
    let still = integrate(&rhs, &zero, &cfg(Scheme::EtdRk2, 1e-3, 0.01)).unwrap();
    assert_eq!(energy_budget(&still, &p, &zero).unwrap().max_residual, 0.0);
}

fn bits(t: &sabra_core::Trajectory) -> Vec<u64> {
    let states = t.states.iter().flat_map(|s| s.to_real().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    t.times.iter().map(|x| x.to_bits()).chain(states).collect()
}

#[test]
fn runs_are_bit_identical() {
    let p = soft_params();
    let f = ShellState::unit(6, 2).unwrap();
    let rhs = Rhs::open_loop(&p, &f);
    for scheme in [Scheme::ImexCnAb2, Scheme::EtdRk2, Scheme::Rk4Explicit] {
        let a = integrate(&rhs, &soft_initial(), &cfg(scheme, 1e-3, 0.3)).unwrap();
        let b = integrate(&rhs, &soft_initial(), &cfg(scheme, 1e-3, 0.3)).unwrap();
        assert_eq!(bits(&a), bits(&b));
    }
}

#[test]
fn growth_is_reported_with_partial_record() {
    let grow = DMatrix::from_diagonal(&DVector::from_element(2, -20.0));
    let rhs = Rhs::linear(LinearPart::Dense(grow));
    let u0 = ShellState::unit(1, 1).unwrap();
    match integrate(&rhs, &u0, &cfg(Scheme::EtdRk2, 1e-3, 5.0)) {
        Err(Error::Instability { time, partial, .. }) => {
            assert!(time < 1.0);
            assert!(!partial.is_empty());
            assert!(partial.states.iter().all(|s| s.is_finite()));
        }
        other => panic!("expected instability, got {other:?}"),
    }
}
