//! Finite-rank Riccati feedback around a steady state.
//!
//! The actuator is `B1 W` where the columns of `W` are a real orthonormal
//! basis of the span of the slow left eigenvectors of the linearization; the
//! feedback `-B1 W W^T B1^T R0 (u - u_e)` therefore has rank at most `N`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec::{stream, Execution};
use crate::linalg;
use crate::model::{self, ShellParams, ShellState};
use crate::riccati::{self, AreProblem, AreSolution, StateWeight};
use crate::sim::{self, IntegratorConfig, LinearPart, Rhs, Scheme};
use crate::spectral::{self, GramianCertificate, SpectralDecomposition};

/// Horizon used for the null-controllability certificate of the slow block.
pub const CONTROL_HORIZON: f64 = 1.0;

#[derive(Debug, Clone, Serialize)]
pub struct FeedbackLaw {
    #[serde(skip)]
    pub params: ShellParams,
    pub u_e: ShellState,
    pub beta: f64,
    pub n_slow: usize,
    pub weight: StateWeight,
    /// Realified linearization at `u_e` (unshifted).
    #[serde(skip)]
    pub linearization: DMatrix<f64>,
    #[serde(skip)]
    pub b1: DMatrix<f64>,
    /// Orthonormal basis of the slow left-mode span, `2M x N`.
    #[serde(skip)]
    pub basis: DMatrix<f64>,
    /// `B1 W`.
    #[serde(skip)]
    pub actuator: DMatrix<f64>,
    /// `(B1 W)^T R0`, so the modal coefficients are `-gain (u - u_e)`.
    #[serde(skip)]
    pub gain: DMatrix<f64>,
    pub are: AreSolution,
    pub controllability: GramianCertificate,
    /// `min Re spec(A + B1 W W^T B1^T R0)`.
    pub closed_loop_min_re: f64,
    pub open_loop_min_re: f64,
    pub slow_eigenvalues: Vec<(f64, f64)>,
}

impl FeedbackLaw {
    pub fn r0(&self) -> &DMatrix<f64> {
        &self.are.r
    }

    /// The full feedback operator `B1 W W^T B1^T R0` on realified states.
    pub fn gain_matrix(&self) -> DMatrix<f64> {
        &self.actuator * &self.gain
    }

    pub fn gain_rank(&self) -> usize {
        linalg::rank_real(&self.gain_matrix(), 1e-10)
    }

    /// `A + B1 W W^T B1^T R0`, optionally shifted by `-beta`.
    pub fn closed_loop_matrix(&self, shifted: bool) -> DMatrix<f64> {
        let n = self.linearization.nrows();
        let mut m = &self.linearization + self.gain_matrix();
        if shifted {
            m -= DMatrix::identity(n, n) * self.beta;
        }
        m
    }

    /// Coefficients `a_j = -<B1 w_j, R0 (u - u_e)>`.
    pub fn modal_coefficients(&self, u: &ShellState) -> DVector<f64> {
        -(&self.gain * (u.to_real() - self.u_e.to_real()))
    }

    /// Control `U = sum_j a_j B1 w_j` as a state vector.
    pub fn control(&self, u: &ShellState) -> ShellState {
        ShellState::from_real(&(&self.actuator * self.modal_coefficients(u)))
    }

    /// Shells on which the slow basis has weight above `tol`.
    pub fn slow_shells(&self, tol: f64) -> Vec<usize> {
        slow_shells(&self.basis, self.params.m(), tol)
    }
}

fn slow_shells(basis: &DMatrix<f64>, m: usize, tol: f64) -> Vec<usize> {
    (0..m)
        .filter(|&n| {
            let w: f64 = (0..basis.ncols())
                .map(|j| basis[(n, j)].powi(2) + basis[(n + m, j)].powi(2))
                .sum();
            w > tol
        })
        .map(|n| n + 1)
        .collect()
}

/// Realified actuator acting on the shells in `mask` (1-based); `None` is
/// the identity.
pub fn shell_mask(params: &ShellParams, mask: Option<&[usize]>) -> Result<DMatrix<f64>> {
    let m = params.m();
    let n = 2 * m;
    match mask {
        None => Ok(DMatrix::identity(n, n)),
        Some(shells) => {
            let mut d = DVector::zeros(n);
            for &s in shells {
                if s == 0 || s > m {
                    return Err(Error::IndexOutOfRange { index: s, max: m });
                }
                d[s - 1] = 1.0;
                d[s - 1 + m] = 1.0;
            }
            Ok(DMatrix::from_diagonal(&d))
        }
    }
}

/// Feedback law stabilizing the linearization at `u_e` with decay rate
/// `beta`, for the actuator `b1` (realified, `2M x m`).
pub fn synthesize(
    params: &ShellParams,
    u_e: &ShellState,
    beta: f64,
    b1: &DMatrix<f64>,
    weight: StateWeight,
) -> Result<FeedbackLaw> {
    if !beta.is_finite() {
        return Err(Error::InvalidParams(format!("beta must be finite, got {beta}")));
    }
    let a = spectral::assemble_linearization(params, u_e)?;
    let decomp = spectral::eigensplit(&a, beta)?;
    synthesize_from(params, u_e, &decomp, b1, weight)
}

pub fn synthesize_from(
    params: &ShellParams,
    u_e: &ShellState,
    decomp: &SpectralDecomposition,
    b1: &DMatrix<f64>,
    weight: StateWeight,
) -> Result<FeedbackLaw> {
    let dim = params.real_dim();
    if b1.nrows() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: b1.nrows(),
        });
    }
    let beta = decomp.beta;
    let cert = spectral::null_controllability_check(decomp, b1, CONTROL_HORIZON)?;
    if !cert.pass {
        return Err(Error::Uncontrollable {
            offending_mode: cert.offending_mode,
        });
    }
    let basis = decomp.slow_left_basis()?;
    let actuator = b1 * &basis;
    let problem = AreProblem::new(decomp.matrix.clone(), actuator.clone(), weight.matrix(params))?.with_shift(beta);
    let are = riccati::solve_stabilization_are(&problem)?;
    let gain = actuator.transpose() * &are.r;
    let closed = &decomp.matrix + &actuator * &gain;
    let (cl, _) = linalg::eig(&closed)?;
    let closed_loop_min_re = cl.iter().map(|z| z.re).fold(f64::INFINITY, f64::min);
    let open_loop_min_re = decomp.eigenvalues.iter().map(|z| z.re).fold(f64::INFINITY, f64::min);
    Ok(FeedbackLaw {
        params: params.clone(),
        u_e: u_e.clone(),
        beta,
        n_slow: decomp.n_slow,
        weight,
        linearization: decomp.matrix.clone(),
        b1: b1.clone(),
        basis,
        actuator,
        gain,
        are,
        controllability: cert,
        closed_loop_min_re,
        open_loop_min_re,
        slow_eigenvalues: decomp.slow_eigenvalues().iter().map(|z| (z.re, z.im)).collect(),
    })
}

/// `-(A - shift) u - B1 W W^T B1^T R0 u` on a deviation `u`; `shifted`
/// selects `shift = beta`, otherwise `0`.
pub fn closed_loop_rhs_linear(law: &FeedbackLaw, u: &ShellState, shifted: bool) -> ShellState {
    ShellState::from_real(&-(law.closed_loop_matrix(shifted) * u.to_real()))
}

/// `f - nu A u - B(u, u) - B1 W W^T B1^T R0 (u - u_e)`.
pub fn closed_loop_rhs_nonlinear(law: &FeedbackLaw, u: &ShellState, f: &ShellState) -> Result<ShellState> {
    let open = model::rhs_open_loop(&law.params, u, f)?;
    Ok(open.add(&law.control(u)))
}

/// `B(u, u)`, scaled by `(level / ||u||_V)^2` outside the V-ball of radius
/// `level`.
pub fn truncated_b(params: &ShellParams, u: &ShellState, level: f64) -> Result<ShellState> {
    if !(level > 0.0) {
        return Err(Error::InvalidParams(format!("truncation level must be positive, got {level}")));
    }
    let b = model::bilinear_b(params, u, u)?;
    let v = model::norm(params, u, 1.0)?;
    Ok(if v <= level { b } else { b.scale((level / v).powi(2)) })
}

/// Linear closed loop on deviations, `dx/dt = -(A - shift + G) x`.
pub fn linear_rhs(law: &FeedbackLaw, shifted: bool) -> Rhs<'_> {
    let gain = law.gain.clone();
    let act = law.actuator.clone();
    Rhs::linear(LinearPart::Dense(law.closed_loop_matrix(shifted))).with_control(Box::new(move |_, x| -(&act * (&gain * x))))
}

/// Nonlinear closed loop in deviation coordinates `v = u - u_e`:
/// `dv/dt = -(A + G) v - B(v, v) + (f - nu A u_e - B(u_e, u_e))`.
pub fn nonlinear_deviation_rhs<'a>(law: &'a FeedbackLaw, f: &ShellState) -> Result<Rhs<'a>> {
    let p = &law.params;
    let steady = model::rhs_open_loop(p, &law.u_e, f)?.to_real();
    let gain = law.gain.clone();
    let act = law.actuator.clone();
    Ok(Rhs::linear(LinearPart::Dense(law.closed_loop_matrix(false)))
        .with_nonlinear(Box::new(move |_, x| {
            let v = ShellState::from_real(x);
            &steady - model::bilinear_unchecked(p, &v, &v).to_real()
        }))
        .with_control(Box::new(move |_, x| -(&act * (&gain * x)))))
}

/// Fitting window on `|u(t)| / |u(0)|`.
pub const DECAY_WINDOW: (f64, f64) = (1e-2, 1e-10);

/// Time for a decay at `rate` to cross the lower end of the fitting window,
/// with margin.
pub fn decay_horizon(rate: f64) -> f64 {
    1.5 * (1e12f64).ln() / rate.max(1e-6)
}

#[derive(Debug, Clone, Serialize)]
pub struct DecayRun {
    pub rate: f64,
    pub r_squared: f64,
    pub final_ratio: f64,
}

/// Integrate the linear closed loop from the deviation `x0` and fit the
/// decay rate of `|x(t)|`.
pub fn linear_decay(law: &FeedbackLaw, x0: &ShellState, shifted: bool, dt: f64) -> Result<DecayRun> {
    let rhs = linear_rhs(law, shifted);
    let rate_guess = if shifted { 1.0 } else { law.beta.max(1.0) };
    let cfg = IntegratorConfig {
        scheme: Scheme::EtdRk2,
        dt,
        t_end: decay_horizon(rate_guess),
        record_every: 1,
        tolerance: 1e-8,
    };
    let tr = sim::integrate(&rhs, x0, &cfg)?;
    let norms = tr.h_norms();
    let (rate, r_squared) = sim::fit_decay_rate_series(&tr.times, &norms, DECAY_WINDOW)?;
    Ok(DecayRun {
        rate,
        r_squared,
        final_ratio: norms[norms.len() - 1] / norms[0],
    })
}

/// Random deviation of H-norm `radius` with amplitudes weighted by `1/k_n`,
/// which keeps the stiff shells quiet.
pub fn smooth_perturbation(params: &ShellParams, radius: f64, rng: &mut impl Rng) -> ShellState {
    let w = params.realified_a_diagonal(-0.5);
    let x = DVector::from_fn(params.real_dim(), |i, _| rng.sample::<f64, _>(StandardNormal) * w[i]);
    let n = x.norm();
    ShellState::from_real(&(x * (radius / n)))
}

#[derive(Debug, Clone, Serialize)]
pub struct BasinLevel {
    pub radius: f64,
    pub trials: usize,
    pub converged: usize,
    pub fraction: f64,
    pub min_rate: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BasinReport {
    pub levels: Vec<BasinLevel>,
    pub largest_converging: Option<f64>,
}

/// One nonlinear trial: `Some(rate)` when the deviation decays into and
/// through the fitting window at rate `>= 0.95 beta`, else `None`.
pub fn nonlinear_trial(law: &FeedbackLaw, f: &ShellState, v0: &ShellState, dt: f64) -> Result<Option<f64>> {
    let rhs = nonlinear_deviation_rhs(law, f)?;
    let cfg = IntegratorConfig {
        scheme: Scheme::EtdRk2,
        dt,
        t_end: decay_horizon(law.beta),
        record_every: 1,
        tolerance: 1e-8,
    };
    let tr = match sim::integrate(&rhs, v0, &cfg) {
        Ok(t) => t,
        Err(Error::Instability { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let norms = tr.h_norms();
    let last = norms[norms.len() - 1] / norms[0];
    match sim::fit_decay_rate_series(&tr.times, &norms, DECAY_WINDOW) {
        Ok((rate, _)) if last < DECAY_WINDOW.1 * 10.0 => Ok(Some(rate)),
        Ok(_) | Err(Error::EmptyWindow) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Basin probe: `trials` smooth random deviations of size `rho` for every
/// radius. Trial `i` at level `l` draws from stream `l * trials + i`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_basin(
    law: &FeedbackLaw,
    f: &ShellState,
    radii: &[f64],
    trials: usize,
    seed: u64,
    dt: f64,
    exec: Execution,
) -> Result<BasinReport> {
    let threshold = 0.95 * law.beta;
    let mut levels = Vec::with_capacity(radii.len());
    for (l, &rho) in radii.iter().enumerate() {
        let runs = exec.map_range(trials, |i| {
            let mut rng = stream(seed, (l * trials + i) as u64);
            let v0 = smooth_perturbation(&law.params, rho, &mut rng);
            nonlinear_trial(law, f, &v0, dt)
        });
        let mut converged = 0;
        let mut min_rate = f64::INFINITY;
        for r in runs {
            match r? {
                Some(rate) if rate >= threshold => {
                    converged += 1;
                    min_rate = min_rate.min(rate);
                }
                Some(rate) => min_rate = min_rate.min(rate),
                None => {}
            }
        }
        levels.push(BasinLevel {
            radius: rho,
            trials,
            converged,
            fraction: if trials > 0 { converged as f64 / trials as f64 } else { 0.0 },
            min_rate,
        });
    }
    let largest_converging = levels
        .iter()
        .filter(|l| l.trials > 0 && l.converged == l.trials)
        .map(|l| l.radius)
        .fold(None, |acc: Option<f64>, r| Some(acc.map_or(r, |a| a.max(r))));
    Ok(BasinReport {
        levels,
        largest_converging,
    })
}

/// `(A_beta u, R0 u) + 1/2 |(B1 W)^T R0 u|^2 - 1/2 (Q u, u)` and the scale
/// `(Q u, u) + |(A_beta u, R0 u)|`.
pub fn riccati_identity_defect(law: &FeedbackLaw, u: &ShellState) -> (f64, f64) {
    let x = u.to_real();
    let n = x.len();
    let ab = &law.linearization - DMatrix::identity(n, n) * law.beta;
    let rx = law.r0() * &x;
    let q = law.weight.matrix(&law.params);
    let t1 = (&ab * &x).dot(&rx);
    let t2 = 0.5 * (&law.gain * &x).norm_squared();
    let t3 = 0.5 * (&q * &x).dot(&x);
    ((t1 + t2 - t3).abs(), 2.0 * t3 + t1.abs())
}

#[derive(Debug, Clone, Serialize)]
pub struct CertificateReport {
    pub values: Vec<f64>,
    /// Largest increase between consecutive samples.
    pub max_increase: f64,
    pub initial: f64,
    pub pass: bool,
}

/// `(R0 y, y) + int_0^t e^{-2 beta s} (Q y, y) ds` along the shifted closed
/// loop started at `y0`. The integral is taken coordinate-wise with the
/// logarithmic mean. Pass when no step increases it by more than
/// `tol * initial`.
pub fn energy_certificate(law: &FeedbackLaw, y0: &ShellState, dt: f64, t_end: f64, tol: f64) -> Result<CertificateReport> {
    let rhs = linear_rhs(law, true);
    let cfg = IntegratorConfig {
        scheme: Scheme::EtdRk2,
        dt,
        t_end,
        record_every: 1,
        tolerance: tol,
    };
    let tr = sim::integrate(&rhs, y0, &cfg)?;
    let qd = law.weight.matrix(&law.params).diagonal();
    let beta = law.beta;
    let xs: Vec<DVector<f64>> = tr.states.iter().map(|s| s.to_real()).collect();
    let mut acc = 0.0;
    let mut values = Vec::with_capacity(xs.len());
    for i in 0..xs.len() {
        if i > 0 {
            let h = tr.times[i] - tr.times[i - 1];
            let (w0, w1) = ((-2.0 * beta * tr.times[i - 1]).exp(), (-2.0 * beta * tr.times[i]).exp());
            for j in 0..qd.len() {
                let f0 = w0 * qd[j] * xs[i - 1][j].powi(2);
                let f1 = w1 * qd[j] * xs[i][j].powi(2);
                acc += log_mean_integral(f0, f1, h);
            }
        }
        values.push((law.r0() * &xs[i]).dot(&xs[i]) + acc);
    }
    let initial = values[0];
    let max_increase = values.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
    Ok(CertificateReport {
        pass: max_increase <= tol * initial,
        max_increase,
        initial,
        values,
    })
}

fn log_mean_integral(f0: f64, f1: f64, h: f64) -> f64 {
    if f0 <= 0.0 || f1 <= 0.0 || ((f1 / f0) - 1.0).abs() < 1e-6 {
        0.5 * h * (f0 + f1)
    } else {
        h * (f1 - f0) / (f1 / f0).ln()
    }
}
