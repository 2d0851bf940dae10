use num_complex::Complex64;
use proptest::prelude::*;
use sabra_core::model::{self, ShellParams, ShellState};

const M: usize = 16;

/// Term-by-term evaluation on a zero-padded copy (two ghosts on each side).
fn direct_b(p: &ShellParams, u: &ShellState, v: &ShellState) -> Vec<Complex64> {
    let pad = |x: &ShellState| {
        let mut out = vec![Complex64::new(0.0, 0.0); M + 5];
        out[2..M + 2].copy_from_slice(x.amps());
        out
    };
    let (up, vp) = (pad(u), pad(v));
    let at = |x: &Vec<Complex64>, n: i64| x[(n + 1) as usize];
    let k = |n: i64| p.k0() * p.lambda().powi(n as i32);
    let (a, b) = (p.a(), p.b());
    (1..=M as i64)
        .map(|n| {
            let s = a * k(n + 1) * at(&vp, n + 2) * at(&up, n + 1).conj()
                + b * k(n) * at(&vp, n + 1) * at(&up, n - 1).conj()
                + a * k(n - 1) * at(&up, n - 1) * at(&vp, n - 2)
                + b * k(n - 1) * at(&vp, n - 1) * at(&up, n - 2);
            Complex64::new(0.0, -1.0) * s
        })
        .collect()
}

fn state() -> impl Strategy<Value = ShellState> {
    (prop::collection::vec(-1.0..1.0f64, 2 * M), -0.5..2.5f64).prop_map(|(raw, slope)| {
        let amps = (0..M)
            .map(|n| Complex64::new(raw[n], raw[M + n]) * 2f64.powf(-slope * (n + 1) as f64))
            .collect();
        ShellState::from_vec(amps).unwrap()
    })
}

fn rel(a: f64, scale: f64) -> f64 {
    if scale == 0.0 {
        a
    } else {
        a / scale
    }
}

#[test]
fn bilinear_matches_direct_sum() {
    let p = ShellParams::default();
    let e = |n| ShellState::unit(M, n).unwrap();
    for (u, v) in [(e(1), e(2)), (e(2), e(1)), (e(1), e(3)), (e(3), e(1)), (e(15), e(16))] {
        let lib = model::bilinear_b(&p, &u, &v).unwrap();
        let want = direct_b(&p, &u, &v);
        for (a, b) in lib.amps().iter().zip(&want) {
            assert!((a - b).norm() < 1e-14);
        }
    }
}

#[test]
fn linearization_examples() {
    let p = ShellParams::default();
    let e1 = ShellState::unit(M, 1).unwrap();
    let e2 = ShellState::unit(M, 2).unwrap();
    let e3 = ShellState::unit(M, 3).unwrap();
    let lin = model::linearized_b(&p, &e1, &e2).unwrap();
    let want: Vec<_> = direct_b(&p, &e1, &e2).iter().zip(direct_b(&p, &e2, &e1)).map(|(x, y)| x + y).collect();
    for (a, b) in lin.amps().iter().zip(&want) {
        assert!((a - b).norm() < 1e-14);
    }
    // adjoint at (e1, e3) tested against every realified direction
    let adj = model::adjoint_linearized_b(&p, &e1, &e3).unwrap();
    let cand = model::closed_form_adjoint_candidate(&p, &e1, &e3).unwrap();
    for j in 0..2 * M {
        let mut x = nalgebra::DVector::zeros(2 * M);
        x[j] = 1.0;
        let v = ShellState::from_real(&x);
        let lhs = model::linearized_b(&p, &e1, &v).unwrap().inner(&e3).re;
        assert!((lhs - v.inner(&adj).re).abs() < 1e-14);
    }
    assert!(adj.sub(&cand).h_norm() > 1.0);
}

#[test]
fn closed_form_fails_for_complex_states() {
    // the two-term closed form is not the real adjoint once phases enter
    let p = ShellParams::default();
    let u = ShellState::from_vec((0..M).map(|n| Complex64::new(0.3, 0.7) / (n + 1) as f64).collect()).unwrap();
    let v = ShellState::from_vec((0..M).map(|n| Complex64::new(-0.2, 0.4) / (n + 2) as f64).collect()).unwrap();
    let w = ShellState::from_vec((0..M).map(|n| Complex64::new(0.5, -0.1) / (n + 1) as f64).collect()).unwrap();
    let lhs = model::linearized_b(&p, &u, &v).unwrap().inner(&w).re;
    let cand = v.inner(&model::closed_form_adjoint_candidate(&p, &u, &w).unwrap()).re;
    let adj = v.inner(&model::adjoint_linearized_b(&p, &u, &w).unwrap()).re;
    assert!((lhs - adj).abs() < 1e-13);
    assert!((lhs - cand).abs() > 1e-3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn energy_is_conserved(u in state(), v in state()) {
        let p = ShellParams::default();
        let b = model::trilinear_b(&p, &u, &v, &v).unwrap();
        let scale = u.h_norm() * model::norm(&p, &v, 1.0).unwrap().powi(2);
        prop_assert!(rel(b.re.abs(), scale) <= 1e-13);
    }

    #[test]
    fn bilinear_agrees_with_direct_sum(u in state(), v in state()) {
        let p = ShellParams::default();
        let lib = model::bilinear_b(&p, &u, &v).unwrap();
        let want = ShellState::from_vec(direct_b(&p, &u, &v)).unwrap();
        prop_assert!(lib.sub(&want).h_norm() <= 1e-14 * (1.0 + want.h_norm()));
    }

    #[test]
    fn operator_bounds(u in state(), v in state()) {
        let p = ShellParams::default();
        let (c1, c2, c3) = p.bound_constants();
        let n = |x: &ShellState, s: f64| model::norm(&p, x, s).unwrap();
        let b = model::bilinear_b(&p, &u, &v).unwrap();
        let slack = 1.0 + 1e-12;
        prop_assert!(n(&b, 0.0) <= c1 * n(&u, 0.0) * n(&v, 1.0) * slack);
        prop_assert!(n(&b, 0.0) <= c2 * n(&u, 1.0) * n(&v, 0.0) * slack);
        prop_assert!(n(&b, 1.0) <= c3 * n(&u, 0.0) * n(&v, 2.0) * slack);
    }

    #[test]
    fn diagonal_form_matches(u in state()) {
        let p = ShellParams::default();
        let full = model::bilinear_b(&p, &u, &u).unwrap();
        let short = model::bilinear_b_diagonal(&p, &u).unwrap();
        prop_assert!(full.sub(&short).h_norm() <= 1e-13 * full.h_norm().max(f64::MIN_POSITIVE));
    }

    #[test]
    fn derivative_is_real_linear(ue in state(), v in state(), w in state(), a in -3.0..3.0f64, b in -3.0..3.0f64) {
        let p = ShellParams::default();
        let lhs = model::linearized_b(&p, &ue, &v.scale(a).add(&w.scale(b))).unwrap();
        let rhs = model::linearized_b(&p, &ue, &v).unwrap().scale(a)
            .add(&model::linearized_b(&p, &ue, &w).unwrap().scale(b));
        prop_assert!(lhs.sub(&rhs).h_norm() <= 1e-12 * (1.0 + rhs.h_norm()));
    }

    #[test]
    fn derivative_from_polarization(ue in state(), v in state()) {
        // B(u+v,u+v) - B(u,u) - B(v,v) = B'(u)v
        let p = ShellParams::default();
        let s = ue.add(&v);
        let pol = model::bilinear_b(&p, &s, &s).unwrap()
            .sub(&model::bilinear_b(&p, &ue, &ue).unwrap())
            .sub(&model::bilinear_b(&p, &v, &v).unwrap());
        let lin = model::linearized_b(&p, &ue, &v).unwrap();
        let scale = model::norm(&p, &s, 1.0).unwrap().powi(2) + model::norm(&p, &ue, 1.0).unwrap().powi(2) + model::norm(&p, &v, 1.0).unwrap().powi(2);
        prop_assert!(pol.sub(&lin).h_norm() <= 1e-13 * scale);
    }

    #[test]
    fn adjoint_identity(ue in state(), v in state(), w in state()) {
        let p = ShellParams::default();
        let lhs = model::linearized_b(&p, &ue, &v).unwrap().inner(&w).re;
        let rhs = v.inner(&model::adjoint_linearized_b(&p, &ue, &w).unwrap()).re;
        let scale = model::norm(&p, &ue, 1.0).unwrap() * v.h_norm() * w.h_norm();
        prop_assert!(rel((lhs - rhs).abs(), scale) <= 1e-12);
    }

    #[test]
    fn realification_round_trip(u in state()) {
        let back = ShellState::from_real(&u.to_real());
        prop_assert_eq!(back, u);
    }

    #[test]
    fn antisymmetry_real_parts(u in state(), v in state(), w in state()) {
        // on complex inputs only the real parts of the swap identities vanish
        let p = ShellParams::default();
        let r = model::antisymmetry_report(&p, &u, &v, &w).unwrap();
        let scale = (model::norm(&p, &u, 1.0).unwrap() * model::norm(&p, &v, 1.0).unwrap() * model::norm(&p, &w, 1.0).unwrap()).max(f64::MIN_POSITIVE);
        prop_assert!(r.diagonal.re.abs() / scale <= 1e-13);
        let _ = r.swap_first_second;
        let _ = r.swap_second_third;
    }
}
