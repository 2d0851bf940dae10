//! Algebraic Riccati equations of the stabilization and disturbance-attenuation
//! problems on the realified system, plus a finite-horizon Riccati ODE used as
//! an independent check.
//!
//! For `du/dt + A u = B1 U + B2 w` (possibly with `A` replaced by `A - shift I`)
//! the equation solved is
//!
//! `A^T R + R A + R S R - Q = 0`, `S = B1 B1^T - B2 B2^T / gamma`,
//!
//! whose stabilizing solution makes `A + S R` have spectrum in `Re > 0`.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, LyapunovSolver};
use crate::model::ShellParams;
use crate::spectral;

/// State weight of the quadratic cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
pub enum StateWeight {
    /// `|u|^2`
    #[default]
    Identity,
    /// `|A^{1/2} u|^2 = sum k_n^2 |u_n|^2`
    Enstrophy,
}

impl StateWeight {
    pub fn matrix(self, params: &ShellParams) -> DMatrix<f64> {
        match self {
            StateWeight::Identity => DMatrix::identity(params.real_dim(), params.real_dim()),
            StateWeight::Enstrophy => DMatrix::from_diagonal(&params.realified_a_diagonal(0.5)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AreProblem {
    pub a: DMatrix<f64>,
    pub b1: DMatrix<f64>,
    pub b2: Option<DMatrix<f64>>,
    pub gamma: Option<f64>,
    pub q: DMatrix<f64>,
    pub shift: f64,
}

impl AreProblem {
    pub fn new(a: DMatrix<f64>, b1: DMatrix<f64>, q: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        for (m, what) in [(&a, "system matrix"), (&q, "state weight")] {
            if m.nrows() != n || m.ncols() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    found: if m.nrows() != n { m.nrows() } else { m.ncols() },
                });
            }
            if m.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(what));
            }
        }
        if b1.nrows() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: b1.nrows(),
            });
        }
        if (&q - q.transpose()).norm() > 1e-12 * q.norm() {
            return Err(Error::InvalidParams("state weight must be symmetric".into()));
        }
        let (lo, hi) = linalg::sym_extreme_eigenvalues(&q);
        if lo < -1e-12 * hi.abs().max(1.0) {
            return Err(Error::InvalidParams(format!(
                "state weight must be positive semidefinite (smallest eigenvalue {lo:e})"
            )));
        }
        Ok(AreProblem {
            a,
            b1,
            b2: None,
            gamma: None,
            q,
            shift: 0.0,
        })
    }

    pub fn with_shift(mut self, shift: f64) -> Self {
        self.shift = shift;
        self
    }

    pub fn with_disturbance(mut self, b2: DMatrix<f64>, gamma: f64) -> Result<Self> {
        if b2.nrows() != self.a.nrows() {
            return Err(Error::DimensionMismatch {
                expected: self.a.nrows(),
                found: b2.nrows(),
            });
        }
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::InvalidParams(format!("gamma must be positive, got {gamma}")));
        }
        self.b2 = Some(b2);
        self.gamma = Some(gamma);
        Ok(self)
    }

    pub fn with_gamma(&self, gamma: f64) -> Self {
        let mut p = self.clone();
        p.gamma = Some(gamma);
        p
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    /// `A - shift I`.
    pub fn shifted_a(&self) -> DMatrix<f64> {
        let n = self.dim();
        &self.a - DMatrix::identity(n, n) * self.shift
    }

    fn has_disturbance(&self) -> bool {
        matches!(&self.b2, Some(b2) if b2.iter().any(|x| *x != 0.0))
    }

    /// `B1 B1^T - B2 B2^T / gamma` (the second term only when `game`).
    pub fn s_matrix(&self, game: bool) -> DMatrix<f64> {
        let mut s = &self.b1 * self.b1.transpose();
        if game {
            if let (Some(b2), Some(g)) = (&self.b2, self.gamma) {
                s -= b2 * b2.transpose() / g;
            }
        }
        s
    }

    /// `A_s^T R + R A_s + R S R - Q` with `A_s` the shifted matrix.
    pub fn residual(&self, r: &DMatrix<f64>, game: bool) -> DMatrix<f64> {
        let a = self.shifted_a();
        let s = self.s_matrix(game);
        a.transpose() * r + r * &a + r * s * r - &self.q
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum AreMethod {
    NewtonKleinman,
    HamiltonianSchur,
}

#[derive(Debug, Clone, Serialize)]
pub struct AreSolution {
    #[serde(skip)]
    pub r: DMatrix<f64>,
    pub residual_frobenius: f64,
    /// Residual over `|Q| + 2|A||R| + |S||R|^2`.
    pub residual_relative: f64,
    /// `min Re spec(A + B1 B1^T R)` for the unshifted `A`.
    pub closed_loop_margin: f64,
    pub method: AreMethod,
    pub iterations: usize,
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
}

fn min_real_part(m: &DMatrix<f64>) -> Result<f64> {
    let (vals, _) = linalg::eig(m)?;
    Ok(vals.iter().map(|z| z.re).fold(f64::INFINITY, f64::min))
}

/// Newton corrections `(A_s + S R)^T D + D (A_s + S R) = -res(R)`, kept
/// while the residual decreases. Unlike re-solving for `R`, the correction
/// form is not limited by the Schur rounding of the full iterate.
fn polish(p: &AreProblem, r: DMatrix<f64>, game: bool) -> DMatrix<f64> {
    let a = p.shifted_a();
    let s = p.s_matrix(game);
    let mut r = linalg::symmetrize(&r);
    let mut res = p.residual(&r, game);
    let mut rn = res.norm();
    for _ in 0..6 {
        let step = LyapunovSolver::new(&(&a + &s * &r)).and_then(|l| l.solve(&(-&res)));
        let Ok(d) = step else { break };
        let next = linalg::symmetrize(&(&r + d));
        let nres = p.residual(&next, game);
        let nn = nres.norm();
        if !(nn < rn) {
            break;
        }
        r = next;
        res = nres;
        rn = nn;
    }
    r
}

fn finalize(p: &AreProblem, r: DMatrix<f64>, game: bool, method: AreMethod, iterations: usize) -> Result<AreSolution> {
    let r = polish(p, r, game);
    let res = p.residual(&r, game);
    let a = p.shifted_a();
    let s = p.s_matrix(game);
    let rn = r.norm();
    let scale = p.q.norm() + 2.0 * a.norm() * rn + s.norm() * rn * rn;
    let (lo, hi) = linalg::sym_extreme_eigenvalues(&r);
    let bb = &p.b1 * p.b1.transpose();
    let closed_loop_margin = min_real_part(&(&p.a + bb * &r))?;
    Ok(AreSolution {
        residual_frobenius: res.norm(),
        residual_relative: if scale > 0.0 { res.norm() / scale } else { 0.0 },
        closed_loop_margin,
        method,
        iterations,
        min_eigenvalue: lo,
        max_eigenvalue: hi,
        r,
    })
}

/// Hautus test on the modes of the shifted matrix that are not strictly
/// stable.
fn check_stabilizable(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    let (vals, _) = linalg::eig(a)?;
    let n = a.nrows();
    let ac = linalg::to_complex(a);
    let bc = linalg::to_complex(b);
    let m = b.ncols();
    let tol = 1e-12;
    for (k, lam) in vals.iter().enumerate() {
        if lam.re > tol * a.norm() {
            continue;
        }
        let mut aug = linalg::CMatrix::zeros(n, n + m);
        aug.view_mut((0, 0), (n, n)).copy_from(&ac);
        for i in 0..n {
            aug[(i, i)] -= lam;
        }
        aug.view_mut((0, n), (n, m)).copy_from(&bc);
        if linalg::rank(&aug, 1e-12) < n {
            return Err(Error::Unstabilizable {
                mode: k,
                re: lam.re,
                im: lam.im,
            });
        }
    }
    Ok(())
}

/// Gain `K` (so that `U = -K x`) moving every non-stable eigenvalue `l` of
/// `a` to `|Re l| + 1 + i Im l` and leaving the rest in place.
pub fn modal_placement_gain(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<Option<DMatrix<f64>>> {
    let (vals, _) = linalg::eig(a)?;
    let mut re: Vec<f64> = vals.iter().map(|z| z.re).collect();
    re.sort_by(f64::total_cmp);
    let k = re.iter().filter(|&&x| x <= 0.0).count();
    if k == 0 {
        return Ok(Some(DMatrix::zeros(b.ncols(), a.nrows())));
    }
    let split = if k == re.len() {
        re[k - 1] + 1.0
    } else {
        0.5 * (re[k - 1] + re[k])
    };
    let decomp = match spectral::eigensplit(a, split) {
        Ok(d) => d,
        Err(_) => return Ok(None),
    };
    let psi = decomp.slow_left();
    let g = psi.adjoint() * linalg::to_complex(b);
    let d = linalg::CMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        decomp.n_slow,
        decomp
            .slow_eigenvalues()
            .iter()
            .map(|l| Complex64::new(l.re.abs() + 1.0, l.im) - l),
    ));
    let svd = g.clone().svd(true, true);
    let smax = svd.singular_values.max();
    if svd.singular_values.min() <= 1e-10 * smax || svd.singular_values.len() < decomp.n_slow {
        return Ok(None);
    }
    let ginv = match svd.pseudo_inverse(1e-12 * smax) {
        Ok(x) => x,
        Err(_) => return Ok(None),
    };
    let kc = ginv * d * psi.adjoint();
    Ok(Some(kc.map(|z| z.re)))
}

fn newton_kleinman(p: &AreProblem, k0: DMatrix<f64>) -> Result<(DMatrix<f64>, usize)> {
    let a = p.shifted_a();
    let mut k = k0;
    let mut r_prev: Option<DMatrix<f64>> = None;
    let mut last_change = f64::INFINITY;
    for it in 1..=60 {
        let ak = &a + &p.b1 * &k;
        let rhs = &p.q + k.transpose() * &k;
        let r = LyapunovSolver::new(&ak)?.solve(&rhs)?;
        if r.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("Newton-Kleinman iterate"));
        }
        k = p.b1.transpose() * &r;
        if let Some(prev) = &r_prev {
            let change = (&r - prev).norm();
            // quadratic convergence has ended once the change stops shrinking
            if change <= 1e-14 * r.norm().max(1e-300) || (it > 8 && change >= 0.5 * last_change) {
                return Ok((r, it));
            }
            last_change = change;
        }
        r_prev = Some(r);
    }
    let r = r_prev.expect("at least one iteration");
    let res = p.residual(&r, false).norm();
    let scale = p.q.norm() + 2.0 * a.norm() * r.norm();
    if res <= 1e-10 * scale {
        Ok((r, 60))
    } else {
        Err(Error::RiccatiStagnation(format!("Newton-Kleinman residual {res:e} after 60 iterations")))
    }
}

/// Stable invariant subspace of the Hamiltonian
/// `[[-A, -S], [-Q, A^T]]` via an ordered complex Schur form.
fn hamiltonian_schur(p: &AreProblem, game: bool) -> Result<DMatrix<f64>> {
    let n = p.dim();
    let a = p.shifted_a();
    let s = p.s_matrix(game);
    let mut h = DMatrix::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(&(-&a));
    h.view_mut((0, n), (n, n)).copy_from(&(-&s));
    h.view_mut((n, 0), (n, n)).copy_from(&(-&p.q));
    h.view_mut((n, n), (n, n)).copy_from(&a.transpose());
    let hnorm = h.norm();
    let (mut z, mut t) = linalg::schur(&linalg::to_complex(&h));
    let axis_tol = 1e3 * f64::EPSILON * hnorm;
    if let Some(k) = (0..2 * n).find(|&k| t[(k, k)].re.abs() <= axis_tol) {
        let lam = t[(k, k)];
        return Err(Error::GammaBelowCritical {
            gamma: p.gamma.unwrap_or(f64::INFINITY),
            reason: format!("Hamiltonian eigenvalue {:e}{:+e}i on the imaginary axis", lam.re, lam.im),
        });
    }
    let stable = linalg::reorder_schur(&mut z, &mut t, |l| l.re < 0.0);
    if stable != n {
        return Err(Error::RiccatiStagnation(format!(
            "Hamiltonian has {stable} stable eigenvalues, expected {n}"
        )));
    }
    let x1 = z.view((0, 0), (n, n)).into_owned();
    let x2 = z.view((n, 0), (n, n)).into_owned();
    let sv = x1.clone().singular_values();
    if sv.min() <= 1e-13 * sv.max() {
        return Err(Error::GammaBelowCritical {
            gamma: p.gamma.unwrap_or(f64::INFINITY),
            reason: "stable subspace is not a graph (X1 singular)".into(),
        });
    }
    // R = X2 X1^{-1}  <=>  X1^T R^T = X2^T
    let rt = x1
        .transpose()
        .lu()
        .solve(&x2.transpose())
        .ok_or(Error::SingularJacobian { condition: sv.max() / sv.min() })?;
    Ok(linalg::symmetrize(&rt.transpose().map(|z| z.re)))
}

/// Newton refinement of a Riccati iterate; steps are kept only while the
/// residual decreases.
fn refine(p: &AreProblem, mut r: DMatrix<f64>, game: bool) -> Result<(DMatrix<f64>, usize)> {
    let a = p.shifted_a();
    let s = p.s_matrix(game);
    let mut res = p.residual(&r, game).norm();
    let mut its = 0;
    for _ in 0..8 {
        let ak = &a + &s * &r;
        let rhs = &p.q + &r * &s * &r;
        let next = match LyapunovSolver::new(&ak).and_then(|l| l.solve(&rhs)) {
            Ok(x) => x,
            Err(_) => break,
        };
        let nres = p.residual(&next, game).norm();
        if !(nres < res) {
            break;
        }
        its += 1;
        let done = nres > 0.5 * res;
        r = next;
        res = nres;
        if done {
            break;
        }
    }
    Ok((r, its))
}

fn check_psd(sol: &AreSolution) -> Result<()> {
    let scale = sol.max_eigenvalue.abs().max(sol.min_eigenvalue.abs());
    if sol.min_eigenvalue < -1e-10 * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::IndefiniteSolution {
            min_eigenvalue: sol.min_eigenvalue,
        });
    }
    Ok(())
}

/// Stabilizing solution of `A_s^T R + R A_s + R B1 B1^T R - Q = 0`.
///
/// Newton-Kleinman from a modal pole-placement gain, falling back to the
/// Hamiltonian Schur method when the initial gain cannot be built or the
/// iteration stalls.
pub fn solve_stabilization_are(p: &AreProblem) -> Result<AreSolution> {
    let a = p.shifted_a();
    check_stabilizable(&a, &p.b1)?;
    if let Some(k0) = modal_placement_gain(&a, &p.b1)? {
        let stable = min_real_part(&(&a + &p.b1 * &k0))? > 0.0;
        if stable {
            if let Ok((r, its)) = newton_kleinman(p, k0) {
                let sol = finalize(p, r, false, AreMethod::NewtonKleinman, its)?;
                check_psd(&sol)?;
                return Ok(sol);
            }
        }
    }
    let r = hamiltonian_schur(p, false)?;
    let (r, its) = refine(p, r, false)?;
    let sol = finalize(p, r, false, AreMethod::HamiltonianSchur, its)?;
    check_psd(&sol)?;
    Ok(sol)
}

/// Stabilizing solution of `A_s^T R + R A_s + R (B1 B1^T - B2 B2^T/gamma) R - Q = 0`.
pub fn solve_game_are(p: &AreProblem) -> Result<AreSolution> {
    let gamma = p
        .gamma
        .ok_or_else(|| Error::InvalidParams("game problem needs gamma".into()))?;
    if !p.has_disturbance() {
        return solve_stabilization_are(p);
    }
    let r = hamiltonian_schur(p, true)?;
    let (r, its) = refine(p, r, true)?;
    let sol = finalize(p, r, true, AreMethod::HamiltonianSchur, its)?;
    check_psd(&sol).map_err(|e| match e {
        Error::IndefiniteSolution { min_eigenvalue } => Error::GammaBelowCritical {
            gamma,
            reason: format!("candidate solution is indefinite (smallest eigenvalue {min_eigenvalue:e})"),
        },
        e => e,
    })?;
    let a = p.shifted_a();
    let worst = min_real_part(&(&a + p.s_matrix(true) * &sol.r))?;
    if !(worst > 0.0) || !(sol.closed_loop_margin - p.shift > 0.0) {
        return Err(Error::GammaBelowCritical {
            gamma,
            reason: format!("closed loop not stable (margin {:e})", worst.min(sol.closed_loop_margin)),
        });
    }
    Ok(sol)
}

/// `R(tau)` of `dR/dtau = Q - A_s^T R - R A_s - R S R`, `R(0) = 0`, where
/// `tau` is time to go; `R(T)` is the value of the horizon-`T` problem.
#[derive(Debug, Clone)]
pub struct RiccatiOdeSolution {
    pub times: Vec<f64>,
    pub values: Vec<DMatrix<f64>>,
}

impl RiccatiOdeSolution {
    pub fn last(&self) -> &DMatrix<f64> {
        self.values.last().expect("non-empty")
    }
}

fn riccati_field(a: &DMatrix<f64>, s: &DMatrix<f64>, q: &DMatrix<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
    q - a.transpose() * x - x * a - x * s * x
}

/// Solve `X - c h F(X) - base = 0` by Newton, where each step is a Lyapunov
/// solve with `(c h)(A + S X) + I/2`.
fn implicit_stage(
    a: &DMatrix<f64>,
    s: &DMatrix<f64>,
    q: &DMatrix<f64>,
    base: &DMatrix<f64>,
    ch: f64,
    time: f64,
) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let mut x = base + riccati_field(a, s, q, base) * ch;
    let scale = |x: &DMatrix<f64>| x.norm() + ch * (q.norm() + 2.0 * a.norm() * x.norm()) + 1e-300;
    for _ in 0..30 {
        let phi = &x - riccati_field(a, s, q, &x) * ch - base;
        if phi.norm() <= 1e-14 * scale(&x) {
            return Ok(linalg::symmetrize(&x));
        }
        let ahat = (a + s * &x) * ch + DMatrix::identity(n, n) * 0.5;
        let delta = LyapunovSolver::new(&ahat)
            .and_then(|l| l.solve(&(-&phi)))
            .map_err(|_| Error::FiniteEscape { time })?;
        x = linalg::symmetrize(&(x + delta));
        if x.iter().any(|v| !v.is_finite()) || x.norm() > 1e15 {
            return Err(Error::FiniteEscape { time });
        }
    }
    let phi = &x - riccati_field(a, s, q, &x) * ch - base;
    if phi.norm() <= 1e-10 * scale(&x) {
        Ok(x)
    } else {
        Err(Error::FiniteEscape { time })
    }
}

/// Implicit-midpoint integration of the Riccati ODE over `[0, T]` in time to
/// go, started with two pairs of backward-Euler half steps so that stiff
/// components are damped.
pub fn finite_horizon_riccati_ode(p: &AreProblem, horizon: f64, steps: usize) -> Result<RiccatiOdeSolution> {
    let n = p.dim();
    let zero = DMatrix::zeros(n, n);
    if horizon == 0.0 {
        return Ok(RiccatiOdeSolution {
            times: vec![0.0],
            values: vec![zero],
        });
    }
    if !(horizon > 0.0) || steps == 0 {
        return Err(Error::InvalidParams(format!(
            "horizon must be positive and steps nonzero (T = {horizon}, steps = {steps})"
        )));
    }
    let game = p.gamma.is_some() && p.has_disturbance();
    let a = p.shifted_a();
    let s = p.s_matrix(game);
    let q = &p.q;
    let h = horizon / steps as f64;
    let mut times = vec![0.0];
    let mut values = vec![zero.clone()];
    let mut x = zero;
    let startup = steps.min(2);
    for i in 0..steps {
        let t = i as f64 * h;
        if i < startup {
            for half in 0..2 {
                // backward Euler half step: X - (h/2) F(X) = X_prev
                let tt = t + 0.5 * h * (half + 1) as f64;
                x = implicit_stage(&a, &s, q, &x.clone(), 0.5 * h, tt)?;
            }
        } else {
            // midpoint: M - (h/2) F(M) - X_n = 0, X_{n+1} = 2 M - X_n
            let m = implicit_stage(&a, &s, q, &x, 0.5 * h, t + 0.5 * h)?;
            x = linalg::symmetrize(&(m * 2.0 - &x));
        }
        times.push((i + 1) as f64 * h);
        values.push(x.clone());
    }
    Ok(RiccatiOdeSolution { times, values })
}

#[derive(Debug, Clone, Serialize)]
pub struct CriticalGamma {
    pub gamma_star: f64,
    pub lower: f64,
    pub upper: f64,
    pub bisections: usize,
    pub note: Option<String>,
}

/// Bisection on solvability of the game equation.
pub fn critical_gamma(p: &AreProblem, bracket: (f64, f64), tol: f64) -> Result<CriticalGamma> {
    let (mut lo, mut hi) = bracket;
    if !(lo > 0.0 && hi > lo && tol > 0.0) {
        return Err(Error::InvalidParams(format!(
            "need 0 < lo < hi and tol > 0, got ({lo}, {hi}), tol {tol}"
        )));
    }
    if !p.has_disturbance() {
        return Ok(CriticalGamma {
            gamma_star: 0.0,
            lower: 0.0,
            upper: 0.0,
            bisections: 0,
            note: Some("no disturbance channel".into()),
        });
    }
    let solvable = |g: f64| solve_game_are(&p.with_gamma(g)).is_ok();
    let mut expansions = 0;
    while !solvable(hi) {
        lo = hi;
        hi *= 2.0;
        expansions += 1;
        if expansions > 60 {
            return Err(Error::GammaBelowCritical {
                gamma: hi,
                reason: "game equation unsolvable on the whole probed range".into(),
            });
        }
    }
    let floor = 1e-12 * hi;
    while solvable(lo) {
        hi = lo;
        lo *= 0.5;
        if lo < floor {
            return Ok(CriticalGamma {
                gamma_star: 0.0,
                lower: 0.0,
                upper: hi,
                bisections: 0,
                note: Some("game equation solvable for every probed level".into()),
            });
        }
    }
    let mut bisections = 0;
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if solvable(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
        bisections += 1;
    }
    Ok(CriticalGamma {
        gamma_star: 0.5 * (lo + hi),
        lower: lo,
        upper: hi,
        bisections,
        note: None,
    })
}

/// Extreme eigenvalues `(b1, b2)` with `b1 |u|^2 <= (R u, u) <= b2 |u|^2`.
pub fn coercivity_bounds(r: &DMatrix<f64>) -> (f64, f64) {
    let e = SymmetricEigen::new(linalg::symmetrize(r)).eigenvalues;
    (e.min(), e.max())
}
