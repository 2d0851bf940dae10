//! Robust (H-infinity) state feedback for `du/dt + A u = B1 U + B2 w`.
//!
//! The stabilizing Riccati matrix `R0` of the identity-weight problem gives
//! the coupled forward/backward system
//!
//! ```text
//!   -dp/dt + (A + B1 B1^T R0)^T p = R0 B2 w,        p(T) = 0
//!    du/dt + (A + B1 B1^T R0) u   = -B1 B1^T p + B2 w, u(0) = u0
//! ```
//!
//! with `r = R0 u + p`, the optimal control `U = -B1^T r`, and
//! `Q(w) = B2^T r` for `u0 = 0`.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec::stream;
use crate::linalg;
use crate::model::{self, ShellParams, ShellState};
use crate::riccati::{self, AreProblem, AreSolution, CriticalGamma};
use crate::sim::{self, trapezoid, IntegratorConfig, LinearPart, Propagator, Rhs, Scheme};

pub use crate::sim::DisturbanceSignal;

/// Required tail factor `e^{-margin T}`.
pub const TAIL_TARGET: f64 = 1e-8;

/// Smallest horizon with `e^{-margin T} <= TAIL_TARGET`.
pub fn horizon_for(margin: f64) -> f64 {
    -TAIL_TARGET.ln() / margin
}

#[derive(Debug, Clone)]
pub struct ModelAnchor {
    pub params: ShellParams,
    pub u_e: ShellState,
}

/// System matrices, the stabilizing `R0` and the closed loop
/// `A + B1 B1^T R0`.
#[derive(Debug, Clone)]
pub struct HinfContext {
    pub a: DMatrix<f64>,
    pub b1: DMatrix<f64>,
    pub b2: DMatrix<f64>,
    pub lqr: AreSolution,
    pub closed: DMatrix<f64>,
    pub margin: f64,
    pub anchor: Option<ModelAnchor>,
}

impl HinfContext {
    pub fn new(a: DMatrix<f64>, b1: DMatrix<f64>, b2: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if b2.nrows() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: b2.nrows(),
            });
        }
        let problem = AreProblem::new(a.clone(), b1.clone(), DMatrix::identity(n, n))?;
        let lqr = riccati::solve_stabilization_are(&problem)?;
        let closed = &a + &b1 * b1.transpose() * &lqr.r;
        let margin = lqr.closed_loop_margin;
        Ok(HinfContext {
            a,
            b1,
            b2,
            lqr,
            closed,
            margin,
            anchor: None,
        })
    }

    /// Linearization of the shell model at `u_e` with realified channels.
    pub fn for_model(params: &ShellParams, u_e: &ShellState, b1: DMatrix<f64>, b2: DMatrix<f64>) -> Result<Self> {
        let a = crate::spectral::assemble_linearization(params, u_e)?;
        let mut ctx = Self::new(a, b1, b2)?;
        ctx.anchor = Some(ModelAnchor {
            params: params.clone(),
            u_e: u_e.clone(),
        });
        Ok(ctx)
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn r0(&self) -> &DMatrix<f64> {
        &self.lqr.r
    }

    pub fn horizon(&self) -> f64 {
        horizon_for(self.margin)
    }

    /// Uniform grid on `[0, horizon]` with step at most `h`.
    pub fn grid(&self, h: f64) -> Vec<f64> {
        let t = self.horizon();
        sim::uniform_grid(t, (t / h).ceil().max(1.0) as usize)
    }

    pub fn has_disturbance(&self) -> bool {
        self.b2.iter().any(|x| *x != 0.0)
    }

    pub fn game_problem(&self, gamma: f64) -> Result<AreProblem> {
        let n = self.dim();
        AreProblem::new(self.a.clone(), self.b1.clone(), DMatrix::identity(n, n))?.with_disturbance(self.b2.clone(), gamma)
    }

    pub fn solver(&self) -> CoupledSolver<'_> {
        CoupledSolver {
            ctx: self,
            forward: PropagatorCache::new(LinearPart::Dense(self.closed.clone())),
            backward: PropagatorCache::new(LinearPart::Dense(self.closed.transpose())),
        }
    }
}

/// Propagators keyed by step length rounded to about 1e-12 relative, so a
/// uniform grid needs one or two factorizations.
pub(crate) struct PropagatorCache {
    l: LinearPart,
    cache: HashMap<u64, Propagator>,
}

impl PropagatorCache {
    pub(crate) fn new(l: LinearPart) -> Self {
        PropagatorCache {
            l,
            cache: HashMap::new(),
        }
    }

    fn get(&mut self, h: f64) -> &Propagator {
        let l = &self.l;
        self.cache
            .entry(h.to_bits() & !0xFFF)
            .or_insert_with(|| Propagator::new(l, h))
    }

    /// Exact solution of `dx/dt = -L x + g` with `g` linear between samples.
    pub(crate) fn solve(&mut self, x0: &DVector<f64>, grid: &[f64], g: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let mut out = Vec::with_capacity(grid.len());
        let mut x = x0.clone();
        out.push(x.clone());
        for i in 0..grid.len() - 1 {
            let p = self.get(grid[i + 1] - grid[i]);
            x = p.exp(&x) + p.phi1(&g[i]) + p.phi2(&(&g[i + 1] - &g[i]));
            out.push(x.clone());
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct CoupledSolution {
    pub grid: Vec<f64>,
    pub u: Vec<DVector<f64>>,
    pub p: Vec<DVector<f64>>,
    /// `R0 u + p`.
    pub r: Vec<DVector<f64>>,
}

pub struct CoupledSolver<'a> {
    ctx: &'a HinfContext,
    forward: PropagatorCache,
    backward: PropagatorCache,
}

impl CoupledSolver<'_> {
    pub fn context(&self) -> &HinfContext {
        self.ctx
    }

    /// Backward sweep for `p`, then forward sweep for `u`.
    pub fn solve(&mut self, u0: &DVector<f64>, w: &DisturbanceSignal) -> Result<CoupledSolution> {
        let ctx = self.ctx;
        let n = ctx.dim();
        if u0.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: u0.len(),
            });
        }
        if w.dim() != ctx.b2.ncols() {
            return Err(Error::DimensionMismatch {
                expected: ctx.b2.ncols(),
                found: w.dim(),
            });
        }
        let horizon = w.horizon() - w.grid[0];
        if (-ctx.margin * horizon).exp() > TAIL_TARGET * (1.0 + 1e-9) {
            return Err(Error::HorizonTooShort {
                horizon,
                margin: ctx.margin,
                target: TAIL_TARGET,
            });
        }
        let grid = &w.grid;
        let m = grid.len();
        let t_end = grid[m - 1];
        let b2w: Vec<DVector<f64>> = w.values.iter().map(|v| &ctx.b2 * v).collect();
        // time to go s = T - t
        let s: Vec<f64> = grid.iter().rev().map(|t| t_end - t).collect();
        let g_back: Vec<DVector<f64>> = b2w.iter().rev().map(|v| ctx.r0() * v).collect();
        let mut p = self.backward.solve(&DVector::zeros(n), &s, &g_back);
        p.reverse();
        let bb = &ctx.b1 * ctx.b1.transpose();
        let g_fwd: Vec<DVector<f64>> = p.iter().zip(&b2w).map(|(pi, bw)| bw - &bb * pi).collect();
        let u = self.forward.solve(u0, grid, &g_fwd);
        let r = u.iter().zip(&p).map(|(ui, pi)| ctx.r0() * ui + pi).collect();
        Ok(CoupledSolution {
            grid: grid.clone(),
            u,
            p,
            r,
        })
    }

    /// `Q(w) = B2^T r_{0,w}`.
    pub fn apply_q(&mut self, w: &DisturbanceSignal) -> Result<DisturbanceSignal> {
        let sol = self.solve(&DVector::zeros(self.ctx.dim()), w)?;
        let b2t = self.ctx.b2.transpose();
        Ok(DisturbanceSignal {
            grid: sol.grid,
            values: sol.r.iter().map(|r| &b2t * r).collect(),
        })
    }

    /// `P(u0, w) = 1/2 int |u|^2 + 1/2 int |B1^T r|^2 - gamma/2 int |w|^2`
    /// along the coupled solution.
    pub fn value(&mut self, u0: &DVector<f64>, w: &DisturbanceSignal, gamma: f64) -> Result<f64> {
        let sol = self.solve(u0, w)?;
        Ok(value_of(self.ctx, &sol, w, gamma))
    }
}

pub fn value_of(ctx: &HinfContext, sol: &CoupledSolution, w: &DisturbanceSignal, gamma: f64) -> f64 {
    let b1t = ctx.b1.transpose();
    let f: Vec<f64> = sol
        .u
        .iter()
        .zip(&sol.r)
        .zip(&w.values)
        .map(|((u, r), wv)| 0.5 * u.norm_squared() + 0.5 * (&b1t * r).norm_squared() - 0.5 * gamma * wv.norm_squared())
        .collect();
    trapezoid(&sol.grid, &f)
}

/// Both sides of `int |u|^2 + int |B1^T r|^2 = int (B2 w, r) + (u0, r(0))`.
pub fn energy_identity(ctx: &HinfContext, sol: &CoupledSolution, w: &DisturbanceSignal) -> (f64, f64) {
    let b1t = ctx.b1.transpose();
    let lhs: Vec<f64> = sol
        .u
        .iter()
        .zip(&sol.r)
        .map(|(u, r)| u.norm_squared() + (&b1t * r).norm_squared())
        .collect();
    let rhs: Vec<f64> = w.values.iter().zip(&sol.r).map(|(wv, r)| (&ctx.b2 * wv).dot(r)).collect();
    (trapezoid(&sol.grid, &lhs), trapezoid(&sol.grid, &rhs) + sol.u[0].dot(&sol.r[0]))
}

#[derive(Debug, Clone, Serialize)]
pub struct Decomposition {
    pub full: f64,
    pub initial_only: f64,
    pub disturbance_only: f64,
    /// `full - initial_only - disturbance_only`.
    pub cross: f64,
    /// `(u0, phi_w(0))`.
    pub cross_initial: f64,
    /// `int (w, B2^T phi_0)`.
    pub cross_dual: f64,
    pub relative_error: f64,
    pub duality_error: f64,
}

/// `P(u0, w) = P(u0, 0) + T(u0, w) + P(0, w)` with `T` evaluated two ways.
pub fn value_decomposition(
    solver: &mut CoupledSolver<'_>,
    u0: &DVector<f64>,
    w: &DisturbanceSignal,
    gamma: f64,
) -> Result<Decomposition> {
    let ctx = solver.context();
    let zero_w = DisturbanceSignal::zeros(&w.grid, w.dim());
    let zero_u = DVector::zeros(ctx.dim());
    let full_sol = solver.solve(u0, w)?;
    let init_sol = solver.solve(u0, &zero_w)?;
    let dist_sol = solver.solve(&zero_u, w)?;
    let ctx = solver.context();
    let full = value_of(ctx, &full_sol, w, gamma);
    let initial_only = value_of(ctx, &init_sol, &zero_w, gamma);
    let disturbance_only = value_of(ctx, &dist_sol, w, gamma);
    let cross = full - initial_only - disturbance_only;
    let cross_initial = u0.dot(&dist_sol.r[0]);
    let b2t = ctx.b2.transpose();
    let dual: Vec<f64> = w.values.iter().zip(&init_sol.r).map(|(wv, r)| wv.dot(&(&b2t * r))).collect();
    let cross_dual = trapezoid(&w.grid, &dual);
    let scale = full.abs().max(initial_only.abs()).max(disturbance_only.abs()).max(f64::MIN_POSITIVE);
    Ok(Decomposition {
        full,
        initial_only,
        disturbance_only,
        cross,
        cross_initial,
        cross_dual,
        relative_error: (cross - cross_initial).abs() / scale,
        duality_error: (cross_initial - cross_dual).abs() / (u0.norm() * dist_sol.r[0].norm()).max(f64::MIN_POSITIVE),
    })
}

/// Smooth random disturbance `sum_k c_k e^{-t} sin(omega_k t + phase_k)`
/// directions, scaled to L2 norm `size`.
pub fn smooth_disturbance(grid: &[f64], dim: usize, size: f64, rng: &mut impl Rng) -> Result<DisturbanceSignal> {
    let modes = 3;
    let coef: Vec<DVector<f64>> = (0..modes)
        .map(|_| DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let omega: Vec<f64> = (0..modes).map(|_| 4.0 * rng.random::<f64>()).collect();
    let phase: Vec<f64> = (0..modes).map(|_| std::f64::consts::TAU * rng.random::<f64>()).collect();
    let w = DisturbanceSignal::from_fn(grid, |t| {
        let mut v = DVector::zeros(dim);
        for k in 0..modes {
            v += &coef[k] * ((-t).exp() * (omega[k] * t + phase[k]).sin());
        }
        v
    })?;
    let n = w.norm();
    Ok(if n > 0.0 { w.scale(size / n) } else { w })
}

/// Random initial deviation with amplitudes `~ k_n^{-2}` (or unit weights
/// for a bare matrix problem), scaled to `size`.
pub fn smooth_initial(ctx: &HinfContext, size: f64, rng: &mut impl Rng) -> DVector<f64> {
    let weights = match &ctx.anchor {
        Some(a) => a.params.realified_a_diagonal(-1.0),
        None => DVector::from_element(ctx.dim(), 1.0),
    };
    let x = DVector::from_fn(ctx.dim(), |i, _| rng.sample::<f64, _>(StandardNormal) * weights[i]);
    let n = x.norm();
    if n > 0.0 {
        x * (size / n)
    } else {
        x
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Gamma0Estimate {
    pub gamma0: f64,
    pub iterations: usize,
    pub converged: bool,
    pub rayleigh: Vec<f64>,
    #[serde(skip)]
    pub direction: Option<DisturbanceSignal>,
}

/// Largest eigenvalue of the discretized `Q` by power iteration, stopped at
/// relative Rayleigh-quotient change `tol`.
pub fn gamma0_power_iteration(
    ctx: &HinfContext,
    grid: &[f64],
    tol: f64,
    seed: u64,
    max_iter: usize,
) -> Result<Gamma0Estimate> {
    if !ctx.has_disturbance() {
        return Ok(Gamma0Estimate {
            gamma0: 0.0,
            iterations: 0,
            converged: true,
            rayleigh: vec![],
            direction: None,
        });
    }
    let mut rng = stream(seed, 0);
    let mut w = smooth_disturbance(grid, ctx.b2.ncols(), 1.0, &mut rng)?;
    let mut solver = ctx.solver();
    let mut rayleigh = Vec::new();
    for it in 1..=max_iter {
        let qw = solver.apply_q(&w)?;
        let rho = w.inner(&qw)? / w.inner(&w)?;
        let done = rayleigh
            .last()
            .is_some_and(|&prev: &f64| (rho - prev).abs() <= tol * rho.abs());
        rayleigh.push(rho);
        let n = qw.norm();
        if n == 0.0 {
            return Ok(Gamma0Estimate {
                gamma0: 0.0,
                iterations: it,
                converged: true,
                rayleigh,
                direction: Some(w),
            });
        }
        w = qw.scale(1.0 / n);
        if done {
            return Ok(Gamma0Estimate {
                gamma0: rho,
                iterations: it,
                converged: true,
                rayleigh,
                direction: Some(w),
            });
        }
    }
    Err(Error::NonConvergence {
        what: "power iteration for gamma0",
        iterations: max_iter,
        residual: rayleigh
            .windows(2)
            .last()
            .map_or(f64::NAN, |p| (p[1] - p[0]).abs() / p[1].abs()),
    })
}

/// Bisection threshold of game-ARE solvability.
pub fn gamma_star(ctx: &HinfContext, tol: f64) -> Result<CriticalGamma> {
    if !ctx.has_disturbance() {
        return Ok(CriticalGamma {
            gamma_star: 0.0,
            lower: 0.0,
            upper: 0.0,
            bisections: 0,
            note: Some("no disturbance channel".into()),
        });
    }
    riccati::critical_gamma(&ctx.game_problem(1.0)?, (0.5, 2.0), tol)
}

#[derive(Debug, Clone)]
pub struct RobustController {
    pub gamma: f64,
    pub gamma0_estimate: Option<f64>,
    pub gamma_star: Option<f64>,
    pub are: AreSolution,
    pub ctx: HinfContext,
}

impl RobustController {
    pub fn r(&self) -> &DMatrix<f64> {
        &self.are.r
    }

    /// `A + B1 B1^T R`.
    pub fn closed_loop(&self) -> DMatrix<f64> {
        &self.ctx.a + &self.ctx.b1 * self.ctx.b1.transpose() * self.r()
    }

    /// `A + B1 B1^T R - B2 B2^T R / gamma`.
    pub fn worst_case_loop(&self) -> DMatrix<f64> {
        self.closed_loop() - &self.ctx.b2 * self.ctx.b2.transpose() * self.r() / self.gamma
    }

    pub fn closed_loop_margin(&self) -> Result<f64> {
        let (v, _) = linalg::eig(&self.closed_loop())?;
        Ok(v.iter().map(|z| z.re).fold(f64::INFINITY, f64::min))
    }

    /// Loop operator when both feedback signs are flipped
    /// (`U = +B1^T R u`, `w = -B2^T R u / gamma`).
    pub fn loop_matrix(&self, sign: FeedbackSign) -> DMatrix<f64> {
        match sign {
            FeedbackSign::Derived => self.worst_case_loop(),
            FeedbackSign::Flipped => {
                &self.ctx.a - (&self.ctx.b1 * self.ctx.b1.transpose() - &self.ctx.b2 * self.ctx.b2.transpose() / self.gamma) * self.r()
            }
        }
    }

    /// `min Re spec` of [`Self::loop_matrix`]; negative means the loop grows.
    pub fn loop_margin(&self, sign: FeedbackSign) -> Result<f64> {
        let (v, _) = linalg::eig(&self.loop_matrix(sign))?;
        Ok(v.iter().map(|z| z.re).fold(f64::INFINITY, f64::min))
    }

    /// Grid for runs of this controller: long enough for the slower of the
    /// two loops.
    pub fn grid(&self, h: f64) -> Result<Vec<f64>> {
        let (v, _) = linalg::eig(&self.worst_case_loop())?;
        let worst = v.iter().map(|z| z.re).fold(f64::INFINITY, f64::min);
        let margin = worst.min(self.closed_loop_margin()?).min(self.ctx.margin);
        let t = horizon_for(margin);
        Ok(sim::uniform_grid(t, (t / h).ceil().max(1.0) as usize))
    }
}

/// Sign of the feedback terms in the game loop. `Flipped` is kept only for
/// comparison; it is not stabilizing in general.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackSign {
    #[default]
    Derived,
    Flipped,
}

impl std::str::FromStr for FeedbackSign {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "derived" => Ok(FeedbackSign::Derived),
            "flipped" => Ok(FeedbackSign::Flipped),
            other => Err(Error::InvalidParams(format!("unknown feedback sign '{other}' (derived|flipped)"))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RobustSummary {
    pub gamma: f64,
    pub gamma0_estimate: Option<f64>,
    pub gamma_star: Option<f64>,
    pub are: AreSolution,
    pub lqr_margin: f64,
}

impl From<&RobustController> for RobustSummary {
    fn from(c: &RobustController) -> Self {
        RobustSummary {
            gamma: c.gamma,
            gamma0_estimate: c.gamma0_estimate,
            gamma_star: c.gamma_star,
            are: c.are.clone(),
            lqr_margin: c.ctx.margin,
        }
    }
}

/// Game-Riccati controller at level `gamma`.
pub fn synthesize_robust(ctx: &HinfContext, gamma: f64) -> Result<RobustController> {
    let are = riccati::solve_game_are(&ctx.game_problem(gamma)?)?;
    Ok(RobustController {
        gamma,
        gamma0_estimate: None,
        gamma_star: None,
        are,
        ctx: ctx.clone(),
    })
}

/// Trapezoidal `1/2 int |u|^2 + 1/2 int |U|^2 - gamma/2 int |w|^2`.
pub fn cost_from_samples(
    grid: &[f64],
    u: &[DVector<f64>],
    control: &[DVector<f64>],
    w: &[DVector<f64>],
    gamma: f64,
) -> Result<f64> {
    let m = grid.len();
    if u.len() != m || control.len() != m || w.len() != m {
        return Err(Error::GridMismatch("cost samples differ in length".into()));
    }
    let f: Vec<f64> = (0..m)
        .map(|i| 0.5 * u[i].norm_squared() + 0.5 * control[i].norm_squared() - 0.5 * gamma * w[i].norm_squared())
        .collect();
    Ok(trapezoid(grid, &f))
}

/// The cost on a recorded trajectory; missing controls count as zero.
pub fn cost_functional(traj: &model::Trajectory, w: &DisturbanceSignal, gamma: f64) -> Result<f64> {
    if traj.times != w.grid {
        return Err(Error::GridMismatch("trajectory and disturbance grids differ".into()));
    }
    let u: Vec<DVector<f64>> = traj.states.iter().map(ShellState::to_real).collect();
    let c: Vec<DVector<f64>> = match &traj.controls {
        Some(c) => c.iter().map(ShellState::to_real).collect(),
        None => vec![DVector::zeros(u.first().map_or(0, |x| x.len())); u.len()],
    };
    cost_from_samples(&traj.times, &u, &c, &w.values, gamma)
}

#[derive(Debug, Clone)]
pub struct OptimalRun {
    pub grid: Vec<f64>,
    pub u: Vec<DVector<f64>>,
    pub control: Vec<DVector<f64>>,
    pub disturbance: DisturbanceSignal,
    pub cost: f64,
    /// `1/2 (u0, R u0)`.
    pub value: f64,
}

/// Saddle-point run: `U = -B1^T R u`, `w = B2^T R u / gamma`.
pub fn optimal_disturbance(ctrl: &RobustController, u0: &DVector<f64>, grid: &[f64]) -> Result<OptimalRun> {
    let n = ctrl.ctx.dim();
    let mut prop = PropagatorCache::new(LinearPart::Dense(ctrl.worst_case_loop()));
    let zeros = vec![DVector::zeros(n); grid.len()];
    let u = prop.solve(u0, grid, &zeros);
    let r = ctrl.r();
    let b1t = ctrl.ctx.b1.transpose();
    let b2t = ctrl.ctx.b2.transpose();
    let control: Vec<_> = u.iter().map(|x| -(&b1t * (r * x))).collect();
    let wv: Vec<_> = u.iter().map(|x| &b2t * (r * x) / ctrl.gamma).collect();
    let disturbance = DisturbanceSignal::new(grid.to_vec(), wv)?;
    let cost = cost_from_samples(grid, &u, &control, &disturbance.values, ctrl.gamma)?;
    Ok(OptimalRun {
        grid: grid.to_vec(),
        value: 0.5 * u0.dot(&(r * u0)),
        u,
        control,
        disturbance,
        cost,
    })
}

/// Cost with the feedback control `U = -B1^T R u` against an open-loop `w`.
pub fn cost_against_disturbance(ctrl: &RobustController, u0: &DVector<f64>, w: &DisturbanceSignal) -> Result<f64> {
    let mut prop = PropagatorCache::new(LinearPart::Dense(ctrl.closed_loop()));
    let g: Vec<_> = w.values.iter().map(|v| &ctrl.ctx.b2 * v).collect();
    let u = prop.solve(u0, &w.grid, &g);
    let b1t = ctrl.ctx.b1.transpose();
    let control: Vec<_> = u.iter().map(|x| -(&b1t * (ctrl.r() * x))).collect();
    cost_from_samples(&w.grid, &u, &control, &w.values, ctrl.gamma)
}

/// Cost with the worst-case feedback `w = B2^T R u / gamma` against the
/// control `U = -B1^T R u + v` for an open-loop deviation `v`.
pub fn cost_against_control(ctrl: &RobustController, u0: &DVector<f64>, deviation: &DisturbanceSignal) -> Result<f64> {
    let mut prop = PropagatorCache::new(LinearPart::Dense(ctrl.worst_case_loop()));
    let g: Vec<_> = deviation.values.iter().map(|v| &ctrl.ctx.b1 * v).collect();
    let u = prop.solve(u0, &deviation.grid, &g);
    let b1t = ctrl.ctx.b1.transpose();
    let b2t = ctrl.ctx.b2.transpose();
    let control: Vec<_> = u.iter().zip(&deviation.values).map(|(x, v)| v - &b1t * (ctrl.r() * x)).collect();
    let w: Vec<_> = u.iter().map(|x| &b2t * (ctrl.r() * x) / ctrl.gamma).collect();
    cost_from_samples(&deviation.grid, &u, &control, &w, ctrl.gamma)
}

#[derive(Debug, Clone, Serialize)]
pub struct AttenuationReport {
    /// `int |u|^2 + int |B1^T R u|^2`
    pub lhs: f64,
    /// `(R u0, u0) + gamma int |w|^2`
    pub rhs: f64,
    pub ratio: f64,
    pub pass: bool,
    pub final_norm: f64,
}

/// Linear robust loop `du/dt + (A + B1 B1^T R) u = B2 w` on the grid of `w`.
pub fn robust_loop_linear(
    ctrl: &RobustController,
    u0: &DVector<f64>,
    w: &DisturbanceSignal,
) -> Result<(Vec<DVector<f64>>, AttenuationReport)> {
    let mut prop = PropagatorCache::new(LinearPart::Dense(ctrl.closed_loop()));
    let g: Vec<_> = w.values.iter().map(|v| &ctrl.ctx.b2 * v).collect();
    let u = prop.solve(u0, &w.grid, &g);
    let report = attenuation(ctrl, u0, &w.grid, &u, w);
    Ok((u, report))
}

fn attenuation(
    ctrl: &RobustController,
    u0: &DVector<f64>,
    grid: &[f64],
    u: &[DVector<f64>],
    w: &DisturbanceSignal,
) -> AttenuationReport {
    let b1t = ctrl.ctx.b1.transpose();
    let r = ctrl.r();
    let f: Vec<f64> = u.iter().map(|x| x.norm_squared() + (&b1t * (r * x)).norm_squared()).collect();
    let lhs = trapezoid(grid, &f);
    let rhs = u0.dot(&(r * u0)) + ctrl.gamma * w.norm().powi(2);
    AttenuationReport {
        lhs,
        rhs,
        ratio: if rhs > 0.0 { lhs / rhs } else { 0.0 },
        pass: lhs <= rhs * (1.0 + 1e-3),
        final_norm: u.last().map_or(0.0, |x| x.norm()),
    }
}

/// `sup_t |u(t)| / (|u0| + ||w||)` over linear robust runs.
pub fn measured_solve_constant(ctrl: &RobustController, samples: &[(DVector<f64>, DisturbanceSignal)]) -> Result<f64> {
    let mut c: f64 = 0.0;
    for (u0, w) in samples {
        let (u, _) = robust_loop_linear(ctrl, u0, w)?;
        let size = u0.norm() + w.norm();
        if size > 0.0 {
            let sup = u.iter().map(|x| x.norm()).fold(0.0, f64::max);
            c = c.max(sup / size);
        }
    }
    Ok(c)
}

/// `kappa_0 = 1/(2 C C1)`, `kappa = kappa_0 / 2`, budget `pi = kappa/(2C)`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SmallnessBudget {
    pub c: f64,
    pub c1: f64,
    pub kappa0: f64,
    pub kappa: f64,
    pub budget: f64,
}

impl SmallnessBudget {
    pub fn new(c: f64, c1: f64) -> Self {
        let kappa0 = 1.0 / (2.0 * c * c1);
        let kappa = 0.5 * kappa0;
        SmallnessBudget {
            c,
            c1,
            kappa0,
            kappa,
            budget: kappa / (2.0 * c),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct NonlinearRobustReport {
    pub sup_norm: f64,
    /// `int ||u||_V^2`
    pub v_energy: f64,
    pub in_sigma: bool,
    pub escape_time: Option<f64>,
    pub lhs: f64,
    pub rhs: f64,
    /// `2 C1 kappa^3`
    pub cubic: f64,
    pub ratio: f64,
    pub pass: bool,
}

/// Nonlinear robust loop on deviations `v = u - u_e`:
/// `dv/dt + (A + B1 B1^T R) v + B(v, v) = B2 w + (f - nu A u_e - B(u_e, u_e))`.
pub fn robust_loop_nonlinear(
    ctrl: &RobustController,
    f: &ShellState,
    v0: &DVector<f64>,
    w: &DisturbanceSignal,
    kappa: f64,
) -> Result<NonlinearRobustReport> {
    let anchor = ctrl
        .ctx
        .anchor
        .as_ref()
        .ok_or_else(|| Error::InvalidParams("nonlinear loop needs a model anchor".into()))?;
    let params = &anchor.params;
    let steady = model::rhs_open_loop(params, &anchor.u_e, f)?.to_real();
    let b2 = ctrl.ctx.b2.clone();
    let rhs = Rhs::linear(LinearPart::Dense(ctrl.closed_loop())).with_nonlinear(Box::new(move |t, x| {
        let v = ShellState::from_real(x);
        &steady + &b2 * w.at(t) - model::bilinear_unchecked(params, &v, &v).to_real()
    }));
    let grid = &w.grid;
    let steps = grid.len() - 1;
    let cfg = IntegratorConfig {
        scheme: Scheme::EtdRk2,
        dt: w.horizon() / steps as f64,
        t_end: w.horizon(),
        record_every: 1,
        tolerance: 1e-8,
    };
    let (c1, _, _) = params.bound_constants();
    let cubic = 2.0 * c1 * kappa.powi(3);
    let tr = match sim::integrate(&rhs, &ShellState::from_real(v0), &cfg) {
        Ok(t) => t,
        Err(Error::Instability { time, partial, .. }) => {
            let sup = partial.h_norms().into_iter().fold(0.0, f64::max);
            let rhs = v0.dot(&(ctrl.r() * v0)) + ctrl.gamma * w.norm().powi(2);
            return Ok(NonlinearRobustReport {
                sup_norm: sup,
                v_energy: f64::INFINITY,
                in_sigma: false,
                escape_time: Some(time),
                lhs: f64::INFINITY,
                rhs,
                cubic,
                ratio: f64::INFINITY,
                pass: false,
            });
        }
        Err(e) => return Err(e),
    };
    let u: Vec<DVector<f64>> = tr.states.iter().map(ShellState::to_real).collect();
    let norms: Vec<f64> = u.iter().map(|x| x.norm()).collect();
    let sup_norm = norms.iter().cloned().fold(0.0, f64::max);
    let escape_time = norms.iter().position(|&n| n > kappa).map(|i| tr.times[i]);
    let kd = params.realified_a_diagonal(0.5);
    let ve: Vec<f64> = u.iter().map(|x| x.component_mul(&kd).dot(x)).collect();
    let w_on = DisturbanceSignal::from_fn(&tr.times, |t| w.at(t))?;
    let att = attenuation(ctrl, v0, &tr.times, &u, &w_on);
    let bound = att.rhs + cubic;
    Ok(NonlinearRobustReport {
        sup_norm,
        v_energy: trapezoid(&tr.times, &ve),
        in_sigma: escape_time.is_none(),
        escape_time,
        lhs: att.lhs,
        rhs: att.rhs,
        cubic,
        ratio: if bound > 0.0 { att.lhs / bound } else { 0.0 },
        pass: escape_time.is_none() && att.lhs <= bound * (1.0 + 1e-2),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct LadderReport {
    pub values: Vec<f64>,
    pub strictly_increasing: bool,
    /// Positive second differences.
    pub superlinear: bool,
}

/// `P(u0, n w)` for `n = 1..=n_max`.
pub fn disturbance_ladder(
    solver: &mut CoupledSolver<'_>,
    u0: &DVector<f64>,
    w: &DisturbanceSignal,
    gamma: f64,
    n_max: usize,
) -> Result<LadderReport> {
    let values = (1..=n_max)
        .map(|n| solver.value(u0, &w.scale(n as f64), gamma))
        .collect::<Result<Vec<f64>>>()?;
    let strictly_increasing = values.windows(2).all(|p| p[1] > p[0]);
    let superlinear = values.windows(3).all(|p| p[2] - 2.0 * p[1] + p[0] > 0.0);
    Ok(LadderReport {
        values,
        strictly_increasing,
        superlinear,
    })
}
