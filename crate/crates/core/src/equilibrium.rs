//! Steady states `nu A u + B(u, u) = f` of the truncated model.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec::{stream, Execution};
use crate::model::{self, ShellParams, ShellState};

#[derive(Debug, Clone, Serialize)]
pub struct SteadySolution {
    pub u_e: ShellState,
    /// H-norm of `nu A u_e + B(u_e, u_e) - f`.
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// `nu^2 > C1 ||f||_{V'}`.
    pub unique_certified: bool,
    /// `||u_e||_V`.
    pub bound_v: f64,
    /// `||f||_{V'} / nu`.
    pub a_priori_bound: f64,
    /// `|A u_e|`.
    pub a_norm: f64,
}

/// H-norm of `nu A u + B(u, u) - f`.
pub fn steady_residual(params: &ShellParams, u: &ShellState, f: &ShellState) -> Result<f64> {
    Ok(model::rhs_open_loop(params, u, f)?.h_norm())
}

fn residual_real(params: &ShellParams, x: &DVector<f64>, f: &ShellState) -> DVector<f64> {
    let u = ShellState::from_real(x);
    // rhs_open_loop is f - nu A u - B(u,u); flip the sign.
    -model::rhs_open_loop(params, &u, f)
        .expect("lengths checked by caller")
        .to_real()
}

fn jacobian(params: &ShellParams, x: &DVector<f64>) -> DMatrix<f64> {
    let u = ShellState::from_real(x);
    let mut j = model::linearized_b_matrix(params, &u).expect("lengths checked by caller");
    let d = params.realified_a_diagonal(1.0);
    for i in 0..j.nrows() {
        j[(i, i)] += params.nu() * d[i];
    }
    j
}

/// `(nu A)^{-1} g` on realified coordinates.
fn inv_nu_a(params: &ShellParams, g: &DVector<f64>) -> DVector<f64> {
    let d = params.realified_a_diagonal(1.0);
    g.component_div(&(d * params.nu()))
}

fn condition_estimate(j: &DMatrix<f64>) -> f64 {
    let sv = j.clone().singular_values();
    let hi = sv.max();
    let lo = sv.min();
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Newton's method from `(nu A)^{-1} f`.
pub fn solve_steady(params: &ShellParams, f: &ShellState, tol: f64, max_iter: usize) -> Result<SteadySolution> {
    let guess = ShellState::from_real(&inv_nu_a(params, &f.to_real()));
    solve_steady_from(params, f, &guess, tol, max_iter)
}

/// Newton iteration on the realified Jacobian `nu A + B'(u)`. A step that
/// increases the residual is replaced by a Picard step
/// `u <- (nu A)^{-1}(f - B(u,u))`, and if that also fails, by a backtracked
/// Newton step.
pub fn solve_steady_from(
    params: &ShellParams,
    f: &ShellState,
    guess: &ShellState,
    tol: f64,
    max_iter: usize,
) -> Result<SteadySolution> {
    if !(tol > 0.0) {
        return Err(Error::InvalidParams(format!("tolerance must be positive, got {tol}")));
    }
    if f.len() != params.m() || guess.len() != params.m() {
        return Err(Error::DimensionMismatch {
            expected: params.m(),
            found: if f.len() != params.m() { f.len() } else { guess.len() },
        });
    }
    if !f.is_finite() || !guess.is_finite() {
        return Err(Error::NonFinite("steady-state input"));
    }
    let fr = f.to_real();
    let mut x = guess.to_real();
    let mut r = residual_real(params, &x, f);
    let mut rn = r.norm();
    let mut iterations = 0;
    while rn > tol && iterations < max_iter {
        iterations += 1;
        let j = jacobian(params, &x);
        let step = match j.clone().lu().solve(&(-&r)) {
            Some(s) if s.iter().all(|v| v.is_finite()) => s,
            _ => {
                return Err(Error::SingularJacobian {
                    condition: condition_estimate(&j),
                })
            }
        };
        let trial = &x + &step;
        let tr = residual_real(params, &trial, f);
        if tr.norm() < rn {
            x = trial;
            r = tr;
            rn = r.norm();
            continue;
        }
        let u = ShellState::from_real(&x);
        let bu = model::bilinear_b(params, &u, &u)?.to_real();
        let picard = inv_nu_a(params, &(&fr - bu));
        let pr = residual_real(params, &picard, f);
        if pr.norm() < rn {
            x = picard;
            r = pr;
            rn = r.norm();
            continue;
        }
        let mut damping = 0.5;
        let mut improved = false;
        while damping > 1e-4 {
            let trial = &x + &step * damping;
            let tr = residual_real(params, &trial, f);
            if tr.norm() < rn {
                x = trial;
                r = tr;
                rn = r.norm();
                improved = true;
                break;
            }
            damping *= 0.5;
        }
        if !improved {
            break;
        }
    }
    let u_e = ShellState::from_real(&x);
    finish(params, f, u_e, rn, iterations, rn <= tol)
}

fn finish(
    params: &ShellParams,
    f: &ShellState,
    u_e: ShellState,
    residual_norm: f64,
    iterations: usize,
    converged: bool,
) -> Result<SteadySolution> {
    let (c1, _, _) = params.bound_constants();
    let f_dual = model::norm(params, f, -1.0)?;
    let nu = params.nu();
    Ok(SteadySolution {
        bound_v: model::norm(params, &u_e, 1.0)?,
        a_norm: model::norm(params, &u_e, 2.0)?,
        u_e,
        residual_norm,
        iterations,
        converged,
        unique_certified: nu * nu > c1 * f_dual,
        a_priori_bound: f_dual / nu,
    })
}

/// Distinct steady states reached from `starts` random initial guesses of
/// V-norm up to `spread` around `(nu A)^{-1} f`, sorted by V-norm.
/// Solutions closer than `merge_tol` (in H) are merged.
#[allow(clippy::too_many_arguments)]
pub fn multistart(
    params: &ShellParams,
    f: &ShellState,
    starts: usize,
    spread: f64,
    seed: u64,
    tol: f64,
    max_iter: usize,
    merge_tol: f64,
    exec: Execution,
) -> Result<Vec<SteadySolution>> {
    let base = inv_nu_a(params, &f.to_real());
    let dim = params.real_dim();
    let kv = params.realified_a_diagonal(0.5);
    let runs: Vec<Result<SteadySolution>> = exec.map_range(starts, |i| {
        let mut rng = stream(seed, i as u64);
        let mut z = DVector::from_fn(dim, |j, _| rng.sample::<f64, _>(StandardNormal) / kv[j]);
        let zn = z.component_mul(&kv).norm();
        let radius = spread * rng.random::<f64>();
        if zn > 0.0 {
            z *= radius / zn;
        }
        let guess = ShellState::from_real(&(&base + z));
        solve_steady_from(params, f, &guess, tol, max_iter)
    });
    let mut found: Vec<SteadySolution> = Vec::new();
    for run in runs {
        match run {
            Ok(s) if s.converged => {
                if !found.iter().any(|o| o.u_e.sub(&s.u_e).h_norm() <= merge_tol) {
                    found.push(s);
                }
            }
            Ok(_) | Err(Error::SingularJacobian { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    found.sort_by(|a, b| a.bound_v.total_cmp(&b.bound_v));
    Ok(found)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;

    #[test]
    fn zero_forcing_gives_zero() {
        let p = ShellParams::default();
        let s = solve_steady(&p, &ShellState::zeros(16), 1e-12, 20).unwrap();
        assert_eq!(s.residual_norm, 0.0);
        assert!(s.unique_certified && s.converged);
        assert_eq!(s.u_e.h_norm(), 0.0);
    }

    #[test]
    fn residual_of_unit_shell() {
        let p = ShellParams::default();
        let e1 = ShellState::unit(16, 1).unwrap();
        let r = steady_residual(&p, &e1, &ShellState::zeros(16)).unwrap();
        assert!((r - 4.0).abs() < 1e-15);
    }

    #[test]
    fn single_shell_forcing_is_exact() {
        let p = ShellParams::default();
        let mut f = ShellState::zeros(16);
        f.amps_mut()[0] = Complex64::new(100.0, 0.0);
        let s = solve_steady(&p, &f, 1e-10, 10).unwrap();
        assert!((s.u_e.amps()[0].re - 25.0).abs() < 1e-13);
        assert_eq!(s.iterations, 0);
    }
}
