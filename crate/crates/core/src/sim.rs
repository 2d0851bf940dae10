//! Time integration on realified coordinates and trajectory diagnostics.
//!
//! Every right-hand side is split as `dx/dt = -L x + N(t, x)` with `L` either
//! diagonal (the dissipation) or a dense constant matrix (a linearized closed
//! loop); `N` carries the quadratic term, forcing and disturbances.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{self, ShellParams, ShellState, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    ImexCnAb2,
    EtdRk2,
    Rk4Explicit,
}

impl Scheme {
    /// Largest admissible `dt * stiffness`.
    pub fn step_limit(self) -> f64 {
        match self {
            Scheme::ImexCnAb2 => 50.0,
            Scheme::EtdRk2 => f64::INFINITY,
            Scheme::Rk4Explicit => 0.5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scheme::ImexCnAb2 => "imex_cn_ab2",
            Scheme::EtdRk2 => "etd_rk2",
            Scheme::Rk4Explicit => "rk4_explicit",
        }
    }

    pub fn order(self) -> u32 {
        match self {
            Scheme::ImexCnAb2 | Scheme::EtdRk2 => 2,
            Scheme::Rk4Explicit => 4,
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "imex_cn_ab2" => Ok(Scheme::ImexCnAb2),
            "etd_rk2" => Ok(Scheme::EtdRk2),
            "rk4_explicit" => Ok(Scheme::Rk4Explicit),
            other => Err(format!("unknown scheme '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub scheme: Scheme,
    pub dt: f64,
    pub t_end: f64,
    pub record_every: usize,
    /// Target for step-halving validation.
    pub tolerance: f64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            scheme: Scheme::EtdRk2,
            dt: 1e-3,
            t_end: 1.0,
            record_every: 1,
            tolerance: 1e-6,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidParams(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(Error::InvalidParams(format!("t_end must be positive, got {}", self.t_end)));
        }
        if self.record_every == 0 {
            return Err(Error::InvalidParams("record_every must be at least 1".into()));
        }
        Ok(())
    }

    /// Number of steps and the step actually taken (`t_end / steps`).
    pub fn steps(&self) -> (usize, f64) {
        let n = (self.t_end / self.dt).round().max(1.0) as usize;
        (n, self.t_end / n as f64)
    }
}

#[derive(Debug, Clone)]
pub enum LinearPart {
    Diagonal(DVector<f64>),
    Dense(DMatrix<f64>),
}

impl LinearPart {
    pub fn dim(&self) -> usize {
        match self {
            LinearPart::Diagonal(d) => d.len(),
            LinearPart::Dense(m) => m.nrows(),
        }
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            LinearPart::Diagonal(d) => d.component_mul(x),
            LinearPart::Dense(m) => m * x,
        }
    }

    /// Largest diagonal magnitude, used for the explicit step limits.
    pub fn stiffness(&self) -> f64 {
        match self {
            LinearPart::Diagonal(d) => d.amax(),
            LinearPart::Dense(m) => m.diagonal().amax(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            LinearPart::Diagonal(d) => DMatrix::from_diagonal(d),
            LinearPart::Dense(m) => m.clone(),
        }
    }
}

pub type Term<'a> = Box<dyn Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync + 'a>;

/// Right-hand side `dx/dt = -L x + N(t, x)` with the physical state
/// `u = anchor + x`. `control` and `disturbance` are evaluated only for the
/// record; whatever they contribute to the dynamics must already be part of
/// `L` or `N`.
pub struct Rhs<'a> {
    pub linear: LinearPart,
    pub nonlinear: Option<Term<'a>>,
    pub anchor: Option<DVector<f64>>,
    pub control: Option<Term<'a>>,
    pub disturbance: Option<Term<'a>>,
}

impl<'a> Rhs<'a> {
    pub fn linear(linear: LinearPart) -> Self {
        Rhs {
            linear,
            nonlinear: None,
            anchor: None,
            control: None,
            disturbance: None,
        }
    }

    /// `du/dt = f - nu A u - B(u, u)`.
    pub fn open_loop(params: &'a ShellParams, f: &ShellState) -> Self {
        let fr = f.to_real();
        let d = params.realified_a_diagonal(1.0) * params.nu();
        let mut rhs = Rhs::linear(LinearPart::Diagonal(d));
        rhs.nonlinear = Some(Box::new(move |_, x| {
            let u = ShellState::from_real(x);
            &fr - model::bilinear_unchecked(params, &u, &u).to_real()
        }));
        rhs
    }

    pub fn with_nonlinear(mut self, n: Term<'a>) -> Self {
        self.nonlinear = Some(n);
        self
    }

    pub fn with_anchor(mut self, anchor: DVector<f64>) -> Self {
        self.anchor = Some(anchor);
        self
    }

    pub fn with_control(mut self, c: Term<'a>) -> Self {
        self.control = Some(c);
        self
    }

    pub fn with_disturbance(mut self, d: Term<'a>) -> Self {
        self.disturbance = Some(d);
        self
    }

    pub fn dim(&self) -> usize {
        self.linear.dim()
    }

    fn n(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        match &self.nonlinear {
            Some(f) => f(t, x),
            None => DVector::zeros(x.len()),
        }
    }

    /// Full derivative `-L x + N(t, x)`.
    pub fn eval(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        self.n(t, x) - self.linear.apply(x)
    }
}

/// `exp(-L h)`, `h phi_1(-L h)`, `h phi_2(-L h)`.
#[derive(Debug, Clone)]
pub enum Propagator {
    Diagonal {
        e: DVector<f64>,
        p1: DVector<f64>,
        p2: DVector<f64>,
    },
    Dense {
        e: DMatrix<f64>,
        p1: DMatrix<f64>,
        p2: DMatrix<f64>,
    },
}

impl Propagator {
    pub fn new(l: &LinearPart, h: f64) -> Self {
        match l {
            LinearPart::Diagonal(d) => {
                let n = d.len();
                let mut e = DVector::zeros(n);
                let mut p1 = DVector::zeros(n);
                let mut p2 = DVector::zeros(n);
                for i in 0..n {
                    let z = -d[i] * h;
                    let (f1, f2) = linalg::phi12(z);
                    e[i] = z.exp();
                    p1[i] = h * f1;
                    p2[i] = h * f2;
                }
                Propagator::Diagonal { e, p1, p2 }
            }
            LinearPart::Dense(m) => {
                let (e, p1, p2) = linalg::exp_phi(m, h);
                Propagator::Dense {
                    e,
                    p1: p1 * h,
                    p2: p2 * h,
                }
            }
        }
    }

    pub fn exp(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Propagator::Diagonal { e, .. } => e.component_mul(x),
            Propagator::Dense { e, .. } => e * x,
        }
    }

    pub fn phi1(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Propagator::Diagonal { p1, .. } => p1.component_mul(x),
            Propagator::Dense { p1, .. } => p1 * x,
        }
    }

    pub fn phi2(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Propagator::Diagonal { p2, .. } => p2.component_mul(x),
            Propagator::Dense { p2, .. } => p2 * x,
        }
    }
}

enum Stepper {
    Etd(Propagator),
    Imex {
        /// `(I + h/2 L)` factorised, and `(I - h/2 L)`.
        lhs: Box<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
        rhs: DMatrix<f64>,
        /// Half-step pair used to bootstrap the multistep method.
        half_lhs: Box<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
        half_rhs: DMatrix<f64>,
    },
    Rk4,
}

fn cn_pair(l: &DMatrix<f64>, h: f64) -> (nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>, DMatrix<f64>) {
    let n = l.nrows();
    let id = DMatrix::identity(n, n);
    ((&id + l * (0.5 * h)).lu(), &id - l * (0.5 * h))
}

fn finite(x: &DVector<f64>) -> bool {
    x.iter().all(|v| v.is_finite())
}

/// Integrate `rhs` from `u0` over `[0, t_end]`.
pub fn integrate(rhs: &Rhs<'_>, u0: &ShellState, config: &IntegratorConfig) -> Result<Trajectory> {
    config.validate()?;
    let n = rhs.dim();
    if u0.len() * 2 != n {
        return Err(Error::DimensionMismatch {
            expected: n / 2,
            found: u0.len(),
        });
    }
    let (steps, h) = config.steps();
    let stiffness = rhs.linear.stiffness();
    let limit = config.scheme.step_limit();
    if h * stiffness > limit {
        return Err(Error::StepTooLarge {
            scheme: config.scheme.name(),
            dt: h,
            stiffness: h * stiffness,
            limit,
        });
    }
    let anchor = rhs.anchor.clone().unwrap_or_else(|| DVector::zeros(n));
    let mut x = u0.to_real() - &anchor;
    if !finite(&x) {
        return Err(Error::NonFinite("initial state"));
    }
    // growth is measured against max(|x0|, 1) so runs from rest are not flagged
    let x0_norm = x.norm().max(1.0);

    let stepper = match config.scheme {
        Scheme::EtdRk2 => Stepper::Etd(Propagator::new(&rhs.linear, h)),
        Scheme::ImexCnAb2 => {
            let l = rhs.linear.to_dense();
            let (lhs, r) = cn_pair(&l, h);
            let (hl, hr) = cn_pair(&l, 0.5 * h);
            Stepper::Imex {
                lhs: Box::new(lhs),
                rhs: r,
                half_lhs: Box::new(hl),
                half_rhs: hr,
            }
        }
        Scheme::Rk4Explicit => Stepper::Rk4,
    };

    let mut rec = Recorder::new(rhs, &anchor);
    rec.push(0.0, &x);
    let mut n_prev: Option<DVector<f64>> = None;
    for k in 0..steps {
        let t = k as f64 * h;
        let next = match &stepper {
            Stepper::Etd(p) => {
                let n0 = rhs.n(t, &x);
                let a = p.exp(&x) + p.phi1(&n0);
                let n1 = rhs.n(t + h, &a);
                a + p.phi2(&(n1 - &n0))
            }
            Stepper::Imex {
                lhs,
                rhs: r,
                half_lhs,
                half_rhs,
            } => {
                let n0 = rhs.n(t, &x);
                let out = match &n_prev {
                    Some(np) => {
                        let b = r * &x + (&n0 * 1.5 - np * 0.5) * h;
                        lhs.solve(&b)
                    }
                    None => {
                        // two Crank-Nicolson half steps with explicit Euler
                        // treatment of N
                        let b = half_rhs * &x + &n0 * (0.5 * h);
                        half_lhs.solve(&b).and_then(|mid| {
                            let nm = rhs.n(t + 0.5 * h, &mid);
                            half_lhs.solve(&(half_rhs * &mid + nm * (0.5 * h)))
                        })
                    }
                };
                n_prev = Some(n0);
                out.ok_or(Error::SingularJacobian {
                    condition: f64::INFINITY,
                })?
            }
            Stepper::Rk4 => {
                let k1 = rhs.eval(t, &x);
                let k2 = rhs.eval(t + 0.5 * h, &(&x + &k1 * (0.5 * h)));
                let k3 = rhs.eval(t + 0.5 * h, &(&x + &k2 * (0.5 * h)));
                let k4 = rhs.eval(t + h, &(&x + &k3 * h));
                &x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
            }
        };
        let growth = next.norm() / x0_norm;
        if !finite(&next) || growth > 1e6 {
            let partial = rec.finish()?;
            return Err(Error::Instability {
                time: t + h,
                growth,
                partial: Box::new(partial),
            });
        }
        x = next;
        if (k + 1) % config.record_every == 0 || k + 1 == steps {
            rec.push((k + 1) as f64 * h, &x);
        }
    }
    rec.finish()
}

struct Recorder<'r, 'a> {
    rhs: &'r Rhs<'a>,
    anchor: &'r DVector<f64>,
    times: Vec<f64>,
    states: Vec<ShellState>,
    controls: Vec<ShellState>,
    disturbances: Vec<ShellState>,
}

impl<'r, 'a> Recorder<'r, 'a> {
    fn new(rhs: &'r Rhs<'a>, anchor: &'r DVector<f64>) -> Self {
        Recorder {
            rhs,
            anchor,
            times: Vec::new(),
            states: Vec::new(),
            controls: Vec::new(),
            disturbances: Vec::new(),
        }
    }

    fn push(&mut self, t: f64, x: &DVector<f64>) {
        self.times.push(t);
        self.states.push(ShellState::from_real(&(x + self.anchor)));
        if let Some(c) = &self.rhs.control {
            self.controls.push(ShellState::from_real(&c(t, x)));
        }
        if let Some(d) = &self.rhs.disturbance {
            self.disturbances.push(ShellState::from_real(&d(t, x)));
        }
    }

    fn finish(self) -> Result<Trajectory> {
        let mut tr = Trajectory::new(self.times, self.states)?;
        if self.rhs.control.is_some() {
            tr.controls = Some(self.controls);
        }
        if self.rhs.disturbance.is_some() {
            tr.disturbances = Some(self.disturbances);
        }
        Ok(tr)
    }
}

/// Exact solution of `dx/dt = -L x + g(t)` on an arbitrary grid, with `g`
/// linear between grid points. Propagators are cached per distinct step.
pub struct ExactLinearIntegrator {
    l: LinearPart,
    cache: HashMap<u64, Propagator>,
}

impl ExactLinearIntegrator {
    pub fn new(l: LinearPart) -> Self {
        ExactLinearIntegrator {
            l,
            cache: HashMap::new(),
        }
    }

    fn prop(&mut self, h: f64) -> &Propagator {
        let l = &self.l;
        self.cache.entry(h.to_bits()).or_insert_with(|| Propagator::new(l, h))
    }

    /// States at every grid point; `g[i]` is the forcing at `grid[i]`.
    pub fn solve(&mut self, x0: &DVector<f64>, grid: &[f64], g: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        if grid.len() != g.len() || grid.is_empty() {
            return Err(Error::GridMismatch(format!(
                "{} grid points but {} forcing samples",
                grid.len(),
                g.len()
            )));
        }
        let mut out = Vec::with_capacity(grid.len());
        let mut x = x0.clone();
        out.push(x.clone());
        for i in 0..grid.len() - 1 {
            let h = grid[i + 1] - grid[i];
            if !(h > 0.0) {
                return Err(Error::GridMismatch("grid must be strictly increasing".into()));
            }
            let p = self.prop(h);
            let dg = &g[i + 1] - &g[i];
            // x' = e x + h phi1 g_i + h phi2 (g_{i+1} - g_i)
            x = p.exp(&x) + p.phi1(&g[i]) + p.phi2(&dg);
            out.push(x.clone());
        }
        Ok(out)
    }
}

/// Uniform grid of `n + 1` points on `[0, horizon]`.
pub fn uniform_grid(horizon: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|i| horizon * i as f64 / n as f64).collect()
}

/// Sampled disturbance on `[0, T]`, linear between samples and zero past
/// `T`. Values are realified.
#[derive(Debug, Clone, PartialEq)]
pub struct DisturbanceSignal {
    pub grid: Vec<f64>,
    pub values: Vec<DVector<f64>>,
}

impl DisturbanceSignal {
    pub fn new(grid: Vec<f64>, values: Vec<DVector<f64>>) -> Result<Self> {
        if grid.len() != values.len() || grid.is_empty() {
            return Err(Error::GridMismatch(format!(
                "{} grid points but {} values",
                grid.len(),
                values.len()
            )));
        }
        if grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::GridMismatch("grid must be strictly increasing".into()));
        }
        let dim = values[0].len();
        if values.iter().any(|v| v.len() != dim) {
            return Err(Error::GridMismatch("disturbance samples differ in dimension".into()));
        }
        if values.iter().any(|v| !finite(v)) {
            return Err(Error::NonFinite("disturbance signal"));
        }
        Ok(DisturbanceSignal { grid, values })
    }

    pub fn zeros(grid: &[f64], dim: usize) -> Self {
        DisturbanceSignal {
            grid: grid.to_vec(),
            values: vec![DVector::zeros(dim); grid.len()],
        }
    }

    pub fn from_fn(grid: &[f64], mut f: impl FnMut(f64) -> DVector<f64>) -> Result<Self> {
        let values = grid.iter().map(|&t| f(t)).collect();
        Self::new(grid.to_vec(), values)
    }

    pub fn horizon(&self) -> f64 {
        *self.grid.last().expect("non-empty grid")
    }

    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    pub fn at(&self, t: f64) -> DVector<f64> {
        let g = &self.grid;
        if t <= g[0] {
            return self.values[0].clone();
        }
        if t > self.horizon() {
            return DVector::zeros(self.dim());
        }
        let i = g.partition_point(|&x| x <= t).min(g.len() - 1).max(1);
        let s = (t - g[i - 1]) / (g[i] - g[i - 1]);
        &self.values[i - 1] * (1.0 - s) + &self.values[i] * s
    }

    fn same_grid(&self, other: &Self) -> Result<()> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch("signals live on different grids".into()));
        }
        Ok(())
    }

    /// Trapezoidal `int (w(t), v(t)) dt`.
    pub fn inner(&self, other: &Self) -> Result<f64> {
        self.same_grid(other)?;
        let f: Vec<f64> = self.values.iter().zip(&other.values).map(|(a, b)| a.dot(b)).collect();
        Ok(trapezoid(&self.grid, &f))
    }

    pub fn norm(&self) -> f64 {
        self.inner(self).expect("same grid").max(0.0).sqrt()
    }

    pub fn scale(&self, s: f64) -> Self {
        DisturbanceSignal {
            grid: self.grid.clone(),
            values: self.values.iter().map(|v| v * s).collect(),
        }
    }

    pub fn axpy(&self, s: f64, other: &Self) -> Result<Self> {
        self.same_grid(other)?;
        Ok(DisturbanceSignal {
            grid: self.grid.clone(),
            values: self.values.iter().zip(&other.values).map(|(a, b)| a + b * s).collect(),
        })
    }

    pub fn map(&self, f: impl Fn(&DVector<f64>) -> DVector<f64>) -> Self {
        DisturbanceSignal {
            grid: self.grid.clone(),
            values: self.values.iter().map(f).collect(),
        }
    }
}

/// Trapezoidal rule on a possibly non-uniform grid.
pub fn trapezoid(grid: &[f64], f: &[f64]) -> f64 {
    grid.windows(2)
        .zip(f.windows(2))
        .map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1]))
        .sum()
}

/// Least-squares slope of `-log|u(t)|` over the part of the record where
/// `|u(t)|/|u(0)|` lies between the two window bounds (either order);
/// returns `(rate, r_squared)`.
pub fn fit_decay_rate_series(times: &[f64], norms: &[f64], window: (f64, f64)) -> Result<(f64, f64)> {
    let (rel_lo, rel_hi) = (window.0.min(window.1), window.0.max(window.1));
    if times.len() != norms.len() || norms.is_empty() {
        return Err(Error::GridMismatch("times and norms differ in length".into()));
    }
    let n0 = norms[0];
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(norms)
        .filter(|(_, &v)| n0 > 0.0 && v / n0 <= rel_hi && v / n0 >= rel_lo && v > 0.0)
        .map(|(&t, &v)| (t, v.ln()))
        .collect();
    if pts.len() < 3 {
        return Err(Error::EmptyWindow);
    }
    let k = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::EmptyWindow);
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok((-slope, r2))
}

pub fn fit_decay_rate(traj: &Trajectory, window: (f64, f64)) -> Result<(f64, f64)> {
    fit_decay_rate_series(&traj.times, &traj.h_norms(), window)
}

#[derive(Debug, Clone, Serialize)]
pub struct EnergyBudget {
    /// Residual of `|u_{k+1}|^2 - |u_k|^2 = int (-2 nu ||u||^2 + 2 Re(g, u))`
    /// on each recorded interval, `g` being forcing plus recorded control and
    /// disturbance.
    pub residuals: Vec<f64>,
    pub max_residual: f64,
    /// `max_residual / max |u|^2`.
    pub max_relative: f64,
    pub energy: Vec<f64>,
}

/// `int_a^b f` for a positive quantity sampled at both ends, exact for
/// exponentials.
fn log_mean(f0: f64, f1: f64, h: f64) -> f64 {
    if f0 <= 0.0 || f1 <= 0.0 {
        return 0.5 * h * (f0 + f1);
    }
    let r = f1 / f0;
    if (r - 1.0).abs() < 1e-6 {
        0.5 * h * (f0 + f1)
    } else {
        h * (f1 - f0) / r.ln()
    }
}

/// Discrete energy identity along a trajectory. The dissipation integral is
/// computed shell by shell with the logarithmic mean (exact for pure
/// exponential decay), the work terms with the trapezoidal rule.
pub fn energy_budget(traj: &Trajectory, params: &ShellParams, f: &ShellState) -> Result<EnergyBudget> {
    let m = params.m();
    let nu = params.nu();
    let k2: Vec<f64> = (1..=m).map(|n| params.wavenumber(n).map(|k| k * k)).collect::<Result<_>>()?;
    let work = |i: usize| -> f64 {
        let u = &traj.states[i];
        let mut g = f.clone();
        if let Some(c) = &traj.controls {
            g = g.add(&c[i]);
        }
        if let Some(d) = &traj.disturbances {
            g = g.add(&d[i]);
        }
        2.0 * g.inner(u).re
    };
    let energy: Vec<f64> = traj.states.iter().map(|u| u.h_norm().powi(2)).collect();
    let mut residuals = Vec::with_capacity(traj.len().saturating_sub(1));
    for i in 0..traj.len().saturating_sub(1) {
        let h = traj.times[i + 1] - traj.times[i];
        let (a, b) = (&traj.states[i], &traj.states[i + 1]);
        let diss: f64 = (0..m)
            .map(|n| 2.0 * nu * k2[n] * log_mean(a.amps()[n].norm_sqr(), b.amps()[n].norm_sqr(), h))
            .sum();
        let w = 0.5 * h * (work(i) + work(i + 1));
        residuals.push((energy[i + 1] - energy[i] + diss - w).abs());
    }
    let max_residual = residuals.iter().cloned().fold(0.0, f64::max);
    let emax = energy.iter().cloned().fold(0.0, f64::max);
    Ok(EnergyBudget {
        max_relative: if emax > 0.0 { max_residual / emax } else { 0.0 },
        residuals,
        max_residual,
        energy,
    })
}

/// Maximum H-distance between a run at `dt` and one at `dt/2`, compared on
/// the coarse record.
pub fn step_halving_difference(rhs: &Rhs<'_>, u0: &ShellState, config: &IntegratorConfig) -> Result<f64> {
    let coarse = integrate(rhs, u0, config)?;
    let mut fine_cfg = config.clone();
    fine_cfg.dt = config.steps().1 * 0.5;
    fine_cfg.record_every = config.record_every * 2;
    let fine = integrate(rhs, u0, &fine_cfg)?;
    if fine.len() != coarse.len() {
        return Err(Error::GridMismatch("halved run recorded on a different grid".into()));
    }
    Ok(coarse
        .states
        .iter()
        .zip(&fine.states)
        .map(|(a, b)| a.sub(b).h_norm())
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_exact_exponential() {
        let t: Vec<f64> = (0..2000).map(|i| i as f64 * 0.01).collect();
        let v: Vec<f64> = t.iter().map(|t| (-4.0 * t).exp()).collect();
        let (rate, r2) = fit_decay_rate_series(&t, &v, (1e-2, 1e-10)).unwrap();
        assert!((rate - 4.0).abs() < 1e-10);
        assert!(r2 > 1.0 - 1e-10);
    }

    #[test]
    fn constant_signal_has_empty_window() {
        let t: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let v = vec![1.0; 10];
        assert!(matches!(fit_decay_rate_series(&t, &v, (1e-2, 1e-10)), Err(Error::EmptyWindow)));
    }

    #[test]
    fn step_limit_enforced() {
        let p = ShellParams::default();
        let rhs = Rhs::open_loop(&p, &ShellState::zeros(16));
        let cfg = IntegratorConfig {
            scheme: Scheme::Rk4Explicit,
            dt: 1e-3,
            t_end: 1.0,
            record_every: 1,
            tolerance: 1e-6,
        };
        assert!(matches!(
            integrate(&rhs, &ShellState::zeros(16), &cfg),
            Err(Error::StepTooLarge { .. })
        ));
    }

    #[test]
    fn signal_interpolates_and_pairs() {
        let grid = uniform_grid(1.0, 4);
        let w = DisturbanceSignal::from_fn(&grid, |t| DVector::from_element(2, t)).unwrap();
        assert!((w.at(0.3)[0] - 0.3).abs() < 1e-15);
        assert_eq!(w.at(1.5)[0], 0.0);
        let one = DisturbanceSignal::from_fn(&grid, |_| DVector::from_vec(vec![1.0, 0.0])).unwrap();
        assert!((one.norm() - 1.0).abs() < 1e-15);
        assert!((w.inner(&one).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn exact_integrator_reproduces_linear_forcing() {
        // x' = -2 x + t, x(0) = 0  =>  x = t/2 - 1/4 + e^{-2t}/4
        let mut ex = ExactLinearIntegrator::new(LinearPart::Diagonal(DVector::from_element(1, 2.0)));
        let grid = [0.0, 0.3, 0.5, 1.5];
        let g: Vec<_> = grid.iter().map(|&t| DVector::from_element(1, t)).collect();
        let xs = ex.solve(&DVector::zeros(1), &grid, &g).unwrap();
        for (t, x) in grid.iter().zip(xs) {
            let exact = t / 2.0 - 0.25 + (-2.0 * t).exp() / 4.0;
            assert!((x[0] - exact).abs() < 1e-15);
        }
    }
}
