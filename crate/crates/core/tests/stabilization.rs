use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sabra_core::equilibrium::solve_steady;
use sabra_core::model::{self, ShellParams, ShellState};
use sabra_core::riccati::StateWeight;
use sabra_core::stabilization::{
    closed_loop_rhs_linear, closed_loop_rhs_nonlinear, energy_certificate, estimate_basin, linear_decay,
    riccati_identity_defect, shell_mask, smooth_perturbation, synthesize, truncated_b, FeedbackLaw,
};
use sabra_core::Execution;

fn forcing() -> ShellState {
    let mut f = ShellState::zeros(16);
    f.amps_mut()[0] = Complex64::new(100.0, 0.0);
    f
}

fn default_law(weight: StateWeight) -> FeedbackLaw {
    let p = ShellParams::default();
    let u_e = solve_steady(&p, &forcing(), 1e-11, 50).unwrap().u_e;
    synthesize(&p, &u_e, 10.0, &shell_mask(&p, None).unwrap(), weight).unwrap()
}

#[test]
fn slow_mode_decays_at_beta() {
    let p = ShellParams::default();
    let law = synthesize(&p, &ShellState::zeros(16), 10.0, &shell_mask(&p, None).unwrap(), StateWeight::Enstrophy).unwrap();
    let phi = ShellState::unit(16, 1).unwrap();
    let run = linear_decay(&law, &phi, false, 1e-3).unwrap();
    assert!(run.rate >= 10.0 * 0.98, "rate {}", run.rate);
    assert!(closed_loop_rhs_linear(&law, &ShellState::zeros(16), false).h_norm() == 0.0);
}

#[test]
fn empty_law_is_open_loop() {
    let p = ShellParams::default();
    let law = synthesize(&p, &ShellState::zeros(16), 2.0, &shell_mask(&p, None).unwrap(), StateWeight::Identity).unwrap();
    let u = ShellState::from_vec((1..=16).map(|n| Complex64::new(1.0, -0.5) / n as f64).collect()).unwrap();
    let lin = closed_loop_rhs_linear(&law, &u, false);
    let open = model::apply_a(&p, &u, 1.0).unwrap().scale(-p.nu());
    assert_eq!(lin, open);
    // energy argument: the unforced loop is globally stable
    let report = estimate_basin(&law, &ShellState::zeros(16), &[1e-2, 1.0, 10.0], 3, 1, 1e-3, Execution::Parallel).unwrap();
    assert!(report.levels.iter().all(|l| l.converged == l.trials));
}

#[test]
fn nonlinear_loop_at_equilibrium_and_nearby() {
    let law = default_law(StateWeight::Enstrophy);
    let at_rest = closed_loop_rhs_nonlinear(&law, &law.u_e, &forcing()).unwrap();
    assert!(at_rest.h_norm() < 1e-9);

    let p = ShellParams::default();
    let zero_law = synthesize(&p, &ShellState::zeros(16), 10.0, &shell_mask(&p, None).unwrap(), StateWeight::Enstrophy).unwrap();
    let dir = ShellState::from_vec((1..=16).map(|n| Complex64::new(0.3, 0.4) / (n * n) as f64).collect()).unwrap();
    let remainder = |eps: f64| {
        let u = dir.scale(eps);
        let nl = closed_loop_rhs_nonlinear(&zero_law, &u, &ShellState::zeros(16)).unwrap();
        nl.sub(&closed_loop_rhs_linear(&zero_law, &u, false)).h_norm()
    };
    let ratio = remainder(1e-2) / remainder(5e-3);
    assert!((ratio - 4.0).abs() < 1e-6, "ratio {ratio}");
}

#[test]
fn feedback_lives_in_the_actuated_span() {
    let law = default_law(StateWeight::Enstrophy);
    assert!(law.gain_rank() <= law.n_slow);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut cols = Vec::new();
    for _ in 0..10 {
        let u = law.u_e.add(&smooth_perturbation(&law.params, 1.0, &mut rng));
        cols.push(law.control(&u).to_real());
    }
    let m = nalgebra::DMatrix::from_columns(&cols);
    let rank = m.singular_values().iter().filter(|&&s| s > 1e-10 * m.norm()).count();
    assert!(rank <= law.n_slow);
}

#[test]
fn truncation_is_continuous() {
    let p = ShellParams::default();
    let u = ShellState::from_vec((1..=16).map(|n| Complex64::new(1.0, 0.2) / (n * n) as f64).collect()).unwrap();
    let level = model::norm(&p, &u, 1.0).unwrap();
    let inside = truncated_b(&p, &u, level * (1.0 + 1e-12)).unwrap();
    let outside = truncated_b(&p, &u, level * (1.0 - 1e-12)).unwrap();
    assert!(inside.sub(&outside).h_norm() <= 1e-10 * inside.h_norm());
    assert_eq!(truncated_b(&p, &u, 2.0 * level).unwrap(), model::bilinear_b(&p, &u, &u).unwrap());
    let half = truncated_b(&p, &u, 0.5 * level).unwrap();
    assert!(half.sub(&inside.scale(0.25)).h_norm() <= 1e-14 * inside.h_norm());
    assert!(truncated_b(&p, &u, 0.0).is_err());
}

#[test]
fn energy_certificate_is_non_increasing() {
    let law = default_law(StateWeight::Enstrophy);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..3 {
        let y0 = smooth_perturbation(&law.params, 1.0, &mut rng);
        let rep = energy_certificate(&law, &y0, 1e-3, 2.0, 1e-6).unwrap();
        assert!(rep.pass, "max increase {}", rep.max_increase);
    }
}

#[test]
fn riccati_identity_under_enstrophy_weight() {
    let law = default_law(StateWeight::Enstrophy);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let u = smooth_perturbation(&law.params, 1.0, &mut rng);
        let (defect, scale) = riccati_identity_defect(&law, &u);
        assert!(defect <= 1e-7 * scale, "{defect} vs {scale}");
    }
}

#[test]
fn basin_probe_is_execution_independent() {
    let law = default_law(StateWeight::Enstrophy);
    let run = |exec| estimate_basin(&law, &forcing(), &[1e-3, 1e-2], 4, 77, 1e-3, exec).unwrap();
    let (a, b) = (run(Execution::Sequential), run(Execution::Parallel));
    for (x, y) in a.levels.iter().zip(&b.levels) {
        assert_eq!(x.converged, y.converged);
        assert_eq!(x.min_rate.to_bits(), y.min_rate.to_bits());
    }
    assert_eq!(a.largest_converging, Some(1e-2));
}
