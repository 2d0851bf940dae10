//! Truncated sabra shell model: state space, dissipation and the quadratic
//! interaction together with its derivative and adjoint.
//!
//! Shells are indexed `1..=M`. Amplitudes outside that range (the two ghost
//! shells below shell 1 and the two above shell `M`) are identically zero.
//!
//! The inner product is `(u, v) = sum_n u_n conj(v_n)`. The derivative of the
//! interaction is only real-linear, so every adjoint in this crate is taken
//! with respect to `Re (u, v)`, which coincides with the Euclidean product of
//! the realified coordinates `[Re u_1 .. Re u_M, Im u_1 .. Im u_M]`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// Model constants and truncation level.
///
/// `c` is never stored: it is always `-a - b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams", into = "RawParams")]
pub struct ShellParams {
    a: f64,
    b: f64,
    lambda: f64,
    k0: f64,
    nu: f64,
    m: usize,
    /// `k[n] = k0 * lambda^n` for `n = 0..=m+2`.
    k: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawParams {
    a: f64,
    b: f64,
    lambda: f64,
    k0: f64,
    nu: f64,
    m: usize,
}

impl TryFrom<RawParams> for ShellParams {
    type Error = Error;
    fn try_from(r: RawParams) -> Result<Self> {
        ShellParams::new(r.a, r.b, r.lambda, r.k0, r.nu, r.m)
    }
}

impl From<ShellParams> for RawParams {
    fn from(p: ShellParams) -> Self {
        RawParams {
            a: p.a,
            b: p.b,
            lambda: p.lambda,
            k0: p.k0,
            nu: p.nu,
            m: p.m,
        }
    }
}

impl Default for ShellParams {
    /// Desk-scale defaults: `a = 1, b = -1/2, lambda = 2, k0 = 1, nu = 1, M = 16`.
    fn default() -> Self {
        ShellParams::new(1.0, -0.5, 2.0, 1.0, 1.0, 16).expect("default parameters are valid")
    }
}

impl ShellParams {
    pub fn new(a: f64, b: f64, lambda: f64, k0: f64, nu: f64, m: usize) -> Result<Self> {
        if !(a.is_finite() && b.is_finite()) {
            return Err(Error::InvalidParams("a and b must be finite".into()));
        }
        if !(lambda > 1.0 && lambda.is_finite()) {
            return Err(Error::InvalidParams(format!("lambda must exceed 1, got {lambda}")));
        }
        if !(k0 > 0.0 && k0.is_finite()) {
            return Err(Error::InvalidParams(format!("k0 must be positive, got {k0}")));
        }
        if !(nu > 0.0 && nu.is_finite()) {
            return Err(Error::InvalidParams(format!("nu must be positive, got {nu}")));
        }
        if m < 4 {
            return Err(Error::InvalidParams(format!("M must be at least 4, got {m}")));
        }
        let k = (0..=m + 2).map(|n| k0 * lambda.powi(n as i32)).collect();
        Ok(ShellParams {
            a,
            b,
            lambda,
            k0,
            nu,
            m,
            k,
        })
    }

    /// Same constants with a different viscosity.
    pub fn with_nu(&self, nu: f64) -> Result<Self> {
        ShellParams::new(self.a, self.b, self.lambda, self.k0, nu, self.m)
    }

    /// Same constants with a different truncation level.
    pub fn with_m(&self, m: usize) -> Result<Self> {
        ShellParams::new(self.a, self.b, self.lambda, self.k0, self.nu, m)
    }

    pub fn a(&self) -> f64 {
        self.a
    }
    pub fn b(&self) -> f64 {
        self.b
    }
    pub fn c(&self) -> f64 {
        -self.a - self.b
    }
    pub fn lambda(&self) -> f64 {
        self.lambda
    }
    pub fn k0(&self) -> f64 {
        self.k0
    }
    pub fn nu(&self) -> f64 {
        self.nu
    }
    /// Number of retained shells.
    pub fn m(&self) -> usize {
        self.m
    }
    /// Dimension of the realified state space, `2M`.
    pub fn real_dim(&self) -> usize {
        2 * self.m
    }

    /// `k_n = k0 * lambda^n` for `1 <= n <= M + 2`.
    pub fn wavenumber(&self, n: usize) -> Result<f64> {
        if n == 0 || n > self.m + 2 {
            return Err(Error::IndexOutOfRange {
                index: n,
                max: self.m + 2,
            });
        }
        Ok(self.k[n])
    }

    #[inline]
    fn kn(&self, n: usize) -> f64 {
        self.k[n]
    }

    /// Largest retained dissipation rate `nu * k_M^2`.
    pub fn stiffness(&self) -> f64 {
        self.nu * self.k[self.m] * self.k[self.m]
    }

    /// Realified diagonal of `A^s`, i.e. `k_n^{2s}` repeated for the real and
    /// imaginary coordinates.
    pub fn realified_a_diagonal(&self, s: f64) -> DVector<f64> {
        let m = self.m;
        DVector::from_fn(2 * m, |i, _| self.k[i % m + 1].powf(2.0 * s))
    }

    /// `(C1, C2, C3)` of the operator bounds on the interaction.
    pub fn bound_constants(&self) -> (f64, f64, f64) {
        let (a, b, l) = (self.a.abs(), self.b.abs(), self.lambda);
        let c1 = a * (1.0 / l + l) + b * (1.0 / l + 1.0);
        let c2 = 2.0 * a + 2.0 * l * b;
        let c3 = a * (l.powi(3) + l.powi(-3)) + b * (l + l.powi(-2));
        (c1, c2, c3)
    }
}

/// Complex shell amplitudes `u_1..u_M`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShellState {
    amps: Vec<Complex64>,
}

impl ShellState {
    pub fn zeros(m: usize) -> Self {
        ShellState {
            amps: vec![Complex64::new(0.0, 0.0); m],
        }
    }

    pub fn from_vec(amps: Vec<Complex64>) -> Result<Self> {
        if amps.iter().any(|z| !(z.re.is_finite() && z.im.is_finite())) {
            return Err(Error::NonFinite("shell state"));
        }
        Ok(ShellState { amps })
    }

    /// Unit amplitude on shell `n` (1-based).
    pub fn unit(m: usize, n: usize) -> Result<Self> {
        if n == 0 || n > m {
            return Err(Error::IndexOutOfRange { index: n, max: m });
        }
        let mut s = Self::zeros(m);
        s.amps[n - 1] = Complex64::new(1.0, 0.0);
        Ok(s)
    }

    /// Build from realified coordinates `[Re u; Im u]`.
    pub fn from_real(x: &DVector<f64>) -> Self {
        let m = x.len() / 2;
        ShellState {
            amps: (0..m).map(|i| Complex64::new(x[i], x[m + i])).collect(),
        }
    }

    pub fn to_real(&self) -> DVector<f64> {
        let m = self.amps.len();
        DVector::from_fn(2 * m, |i, _| {
            if i < m {
                self.amps[i].re
            } else {
                self.amps[i - m].im
            }
        })
    }

    pub fn len(&self) -> usize {
        self.amps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.amps.is_empty()
    }

    pub fn amps(&self) -> &[Complex64] {
        &self.amps
    }

    pub fn amps_mut(&mut self) -> &mut [Complex64] {
        &mut self.amps
    }

    /// Amplitude of shell `n`, zero for ghost shells.
    #[inline]
    pub fn get(&self, n: isize) -> Complex64 {
        if n >= 1 && (n as usize) <= self.amps.len() {
            self.amps[n as usize - 1]
        } else {
            Complex64::new(0.0, 0.0)
        }
    }

    pub fn is_finite(&self) -> bool {
        self.amps.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn scale(&self, s: f64) -> Self {
        ShellState {
            amps: self.amps.iter().map(|z| z * s).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        ShellState {
            amps: self.amps.iter().zip(&other.amps).map(|(x, y)| x + y).collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        ShellState {
            amps: self.amps.iter().zip(&other.amps).map(|(x, y)| x - y).collect(),
        }
    }

    /// `self + s * other`
    pub fn axpy(&self, s: f64, other: &Self) -> Self {
        ShellState {
            amps: self
                .amps
                .iter()
                .zip(&other.amps)
                .map(|(x, y)| x + y * s)
                .collect(),
        }
    }

    /// `(self, other) = sum_n self_n conj(other_n)`.
    pub fn inner(&self, other: &Self) -> Complex64 {
        self.amps
            .iter()
            .zip(&other.amps)
            .map(|(x, y)| x * y.conj())
            .sum()
    }

    /// H-norm `|u|`.
    pub fn h_norm(&self) -> f64 {
        self.amps.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }
}

fn check_len(params: &ShellParams, u: &ShellState) -> Result<()> {
    if u.len() != params.m {
        return Err(Error::DimensionMismatch {
            expected: params.m,
            found: u.len(),
        });
    }
    Ok(())
}

/// `k_n = k0 * lambda^n`.
pub fn wavenumber(params: &ShellParams, n: usize) -> Result<f64> {
    params.wavenumber(n)
}

/// Component-wise `k_n^{2s} u_n`.
pub fn apply_a(params: &ShellParams, u: &ShellState, s: f64) -> Result<ShellState> {
    check_len(params, u)?;
    let amps = u
        .amps
        .iter()
        .enumerate()
        .map(|(i, z)| z * params.kn(i + 1).powf(2.0 * s))
        .collect();
    Ok(ShellState { amps })
}

/// `(sum_n k_n^{2s} |u_n|^2)^{1/2}`: `s = 0` is the H-norm, `s = 1` the
/// V-norm and `s = -1` the V'-norm.
pub fn norm(params: &ShellParams, u: &ShellState, s: f64) -> Result<f64> {
    check_len(params, u)?;
    Ok(u
        .amps
        .iter()
        .enumerate()
        .map(|(i, z)| params.kn(i + 1).powf(2.0 * s) * z.norm_sqr())
        .sum::<f64>()
        .sqrt())
}

/// The quadratic interaction in its general two-argument form
///
/// `B(u,v)_n = -i (a k_{n+1} v_{n+2} u*_{n+1} + b k_n v_{n+1} u*_{n-1}
///               + a k_{n-1} u_{n-1} v_{n-2} + b k_{n-1} v_{n-1} u_{n-2})`.
pub fn bilinear_b(params: &ShellParams, u: &ShellState, v: &ShellState) -> Result<ShellState> {
    check_len(params, u)?;
    check_len(params, v)?;
    Ok(bilinear_unchecked(params, u, v))
}

pub(crate) fn bilinear_unchecked(params: &ShellParams, u: &ShellState, v: &ShellState) -> ShellState {
    let (a, b) = (params.a, params.b);
    let m = params.m;
    let mut out = Vec::with_capacity(m);
    for n in 1..=m {
        let ni = n as isize;
        let mut s = v.get(ni + 2) * u.get(ni + 1).conj() * (a * params.kn(n + 1))
            + v.get(ni + 1) * u.get(ni - 1).conj() * (b * params.kn(n));
        if n >= 2 {
            s += u.get(ni - 1) * v.get(ni - 2) * (a * params.kn(n - 1))
                + v.get(ni - 1) * u.get(ni - 2) * (b * params.kn(n - 1));
        }
        out.push(-I * s);
    }
    ShellState { amps: out }
}

/// Diagonal form `B(u,u)` with the `-c` coefficient; coincides with
/// `bilinear_b(u, u)` whenever `a + b + c = 0`.
pub fn bilinear_b_diagonal(params: &ShellParams, u: &ShellState) -> Result<ShellState> {
    check_len(params, u)?;
    let (a, b, c) = (params.a, params.b, params.c());
    let amps = (1..=params.m)
        .map(|n| {
            let ni = n as isize;
            let mut s = u.get(ni + 2) * u.get(ni + 1).conj() * (a * params.kn(n + 1))
                + u.get(ni + 1) * u.get(ni - 1).conj() * (b * params.kn(n));
            if n >= 2 {
                s -= u.get(ni - 1) * u.get(ni - 2) * (c * params.kn(n - 1));
            }
            -I * s
        })
        .collect();
    Ok(ShellState { amps })
}

/// `b(u,v,w) = (B(u,v), w)`.
pub fn trilinear_b(
    params: &ShellParams,
    u: &ShellState,
    v: &ShellState,
    w: &ShellState,
) -> Result<Complex64> {
    check_len(params, w)?;
    Ok(bilinear_b(params, u, v)?.inner(w))
}

/// `B'(u_e) v = B(u_e, v) + B(v, u_e)`; real-linear in `v` only.
pub fn linearized_b(params: &ShellParams, u_e: &ShellState, v: &ShellState) -> Result<ShellState> {
    check_len(params, u_e)?;
    check_len(params, v)?;
    Ok(bilinear_unchecked(params, u_e, v).add(&bilinear_unchecked(params, v, u_e)))
}

/// Adjoint of `v -> B'(u_e) v` with respect to `Re (., .)`:
/// `Re (B'(u_e) v, w) = Re (v, B'(u_e)^* w)` for all `v, w`.
///
/// The first half is `-B(u_e, w)` (energy conservation). The adjoint of
/// `v -> B(v, u_e)` has no expression in terms of `B` for complex states and
/// is written out term by term.
pub fn adjoint_linearized_b(params: &ShellParams, u_e: &ShellState, w: &ShellState) -> Result<ShellState> {
    check_len(params, u_e)?;
    check_len(params, w)?;
    let first = bilinear_unchecked(params, u_e, w);
    let (a, b) = (params.a, params.b);
    let u = u_e;
    let amps = (1..=params.m)
        .map(|m| {
            let mi = m as isize;
            let km = params.kn(m);
            let km1 = params.kn(m + 1);
            let x = -I * a * km * u.get(mi + 1) * w.get(mi - 1).conj()
                - I * b * km1 * u.get(mi + 2) * w.get(mi + 1).conj()
                + I * a * km * u.get(mi - 1).conj() * w.get(mi + 1)
                + I * b * km1 * u.get(mi + 1).conj() * w.get(mi + 2);
            x - first.amps[m - 1]
        })
        .collect();
    Ok(ShellState { amps })
}

/// The closed form `-B(u_e, w) - B(w, u_e)`. It is the adjoint of `B'(u_e)`
/// only for real-valued states; for complex states use
/// [`adjoint_linearized_b`].
pub fn closed_form_adjoint_candidate(
    params: &ShellParams,
    u_e: &ShellState,
    w: &ShellState,
) -> Result<ShellState> {
    Ok(linearized_b(params, u_e, w)?.scale(-1.0))
}

/// `(C1, C2, C3)`.
pub fn bound_constants(params: &ShellParams) -> (f64, f64, f64) {
    params.bound_constants()
}

/// `f - nu A u - B(u, u)`.
pub fn rhs_open_loop(params: &ShellParams, u: &ShellState, f: &ShellState) -> Result<ShellState> {
    check_len(params, u)?;
    check_len(params, f)?;
    let bu = bilinear_unchecked(params, u, u);
    let amps = (0..params.m)
        .map(|i| f.amps[i] - u.amps[i] * (params.nu * params.kn(i + 1).powi(2)) - bu.amps[i])
        .collect();
    Ok(ShellState { amps })
}

/// Realified matrix of `v -> B'(u_e) v` (size `2M x 2M`).
pub fn linearized_b_matrix(params: &ShellParams, u_e: &ShellState) -> Result<DMatrix<f64>> {
    check_len(params, u_e)?;
    let n = params.real_dim();
    let mut mat = DMatrix::zeros(n, n);
    let mut e = DVector::zeros(n);
    for j in 0..n {
        e[j] = 1.0;
        let v = ShellState::from_real(&e);
        let col = linearized_b(params, u_e, &v)?.to_real();
        mat.set_column(j, &col);
        e[j] = 0.0;
    }
    Ok(mat)
}

/// Residuals of the three antisymmetry identities of the trilinear form.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct AntisymmetryReport {
    /// `b(u,v,w) + b(v,u,w)`
    pub swap_first_second: Complex64,
    /// `b(v,u,w) + b(v,w,u)`
    pub swap_second_third: Complex64,
    /// `b(u,v,v)`
    pub diagonal: Complex64,
}

pub fn antisymmetry_report(
    params: &ShellParams,
    u: &ShellState,
    v: &ShellState,
    w: &ShellState,
) -> Result<AntisymmetryReport> {
    Ok(AntisymmetryReport {
        swap_first_second: trilinear_b(params, u, v, w)? + trilinear_b(params, v, u, w)?,
        swap_second_third: trilinear_b(params, v, u, w)? + trilinear_b(params, v, w, u)?,
        diagonal: trilinear_b(params, u, v, v)?,
    })
}

/// Time-stamped sequence of states with optional control and disturbance
/// records on the same grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<ShellState>,
    pub controls: Option<Vec<ShellState>>,
    pub disturbances: Option<Vec<ShellState>>,
}

impl Trajectory {
    pub fn new(times: Vec<f64>, states: Vec<ShellState>) -> Result<Self> {
        if times.len() != states.len() {
            return Err(Error::GridMismatch(format!(
                "{} times but {} states",
                times.len(),
                states.len()
            )));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::GridMismatch("times must be strictly increasing".into()));
        }
        Ok(Trajectory {
            times,
            states,
            controls: None,
            disturbances: None,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn h_norms(&self) -> Vec<f64> {
        self.states.iter().map(ShellState::h_norm).collect()
    }

    pub fn last(&self) -> Option<&ShellState> {
        self.states.last()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: Complex64, b: Complex64) -> bool {
        (a - b).norm() < 1e-13
    }

    #[test]
    fn wavenumbers() {
        let p = ShellParams::default();
        assert_eq!(p.wavenumber(1).unwrap(), 2.0);
        assert_eq!(p.wavenumber(6).unwrap(), 64.0);
        let q = ShellParams::new(1.0, -0.5, 1.5, 0.5, 1.0, 4).unwrap();
        assert!((q.wavenumber(2).unwrap() - 1.125).abs() < 1e-15);
        assert!(p.wavenumber(0).is_err());
        assert!(p.wavenumber(19).is_err());
        assert!(p.wavenumber(18).is_ok());
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(ShellParams::new(1.0, -0.5, 1.0, 1.0, 1.0, 8).is_err());
        assert!(ShellParams::new(1.0, -0.5, 2.0, 0.0, 1.0, 8).is_err());
        assert!(ShellParams::new(1.0, -0.5, 2.0, 1.0, 0.0, 8).is_err());
        assert!(ShellParams::new(1.0, -0.5, 2.0, 1.0, 1.0, 3).is_err());
        assert_eq!(ShellParams::default().c(), -0.5);
    }

    #[test]
    fn dissipation_and_norms() {
        let p = ShellParams::default();
        let e3 = ShellState::unit(16, 3).unwrap();
        assert!(close(apply_a(&p, &e3, 1.0).unwrap().get(3), Complex64::new(64.0, 0.0)));
        let back = apply_a(&p, &apply_a(&p, &e3, -1.0).unwrap(), 1.0).unwrap();
        assert!(back.sub(&e3).h_norm() < 1e-15);
        let e1 = ShellState::unit(16, 1).unwrap();
        assert_eq!(norm(&p, &e1, 0.0).unwrap(), 1.0);
        assert_eq!(norm(&p, &e1, 1.0).unwrap(), 2.0);
        assert_eq!(norm(&p, &ShellState::zeros(16), 0.0).unwrap(), 0.0);
    }

    #[test]
    fn bilinear_examples() {
        let p = ShellParams::default();
        let e1 = ShellState::unit(16, 1).unwrap();
        let e2 = ShellState::unit(16, 2).unwrap();
        let b = bilinear_b(&p, &e1, &e2).unwrap();
        assert!(close(b.get(3), Complex64::new(0.0, 2.0)));
        assert!((b.h_norm() - 2.0).abs() < 1e-14);
        let u = e1.add(&e2);
        let bu = bilinear_b(&p, &u, &u).unwrap();
        assert!(close(bu.get(3), Complex64::new(0.0, -2.0)));
        assert!((bu.h_norm() - 2.0).abs() < 1e-14);
        let e3 = ShellState::unit(16, 3).unwrap();
        assert!(close(trilinear_b(&p, &e1, &e2, &e3).unwrap(), Complex64::new(0.0, 2.0)));
        assert_eq!(bilinear_b(&p, &ShellState::zeros(16), &u).unwrap().h_norm(), 0.0);
    }

    #[test]
    fn bound_constant_values() {
        let p = ShellParams::default();
        let (c1, c2, _) = p.bound_constants();
        assert_eq!((c1, c2), (3.25, 4.0));
        let z = ShellParams::new(0.0, 0.0, 2.0, 1.0, 1.0, 8).unwrap();
        assert_eq!(z.bound_constants(), (0.0, 0.0, 0.0));
    }

    #[test]
    fn open_loop_residual_of_first_shell() {
        let p = ShellParams::default();
        let e1 = ShellState::unit(16, 1).unwrap();
        let r = rhs_open_loop(&p, &e1, &ShellState::zeros(16)).unwrap();
        assert!(r.sub(&e1.scale(-4.0)).h_norm() < 1e-15);
    }

    #[test]
    fn linearization_at_the_state_doubles() {
        let p = ShellParams::default();
        let u = ShellState::from_vec((1..=16).map(|n| Complex64::new(1.0 / n as f64, 0.5)).collect()).unwrap();
        let l = linearized_b(&p, &u, &u).unwrap();
        let b = bilinear_b(&p, &u, &u).unwrap().scale(2.0);
        assert!(l.sub(&b).h_norm() <= 1e-13 * b.h_norm());
        assert_eq!(linearized_b(&p, &ShellState::zeros(16), &u).unwrap().h_norm(), 0.0);
        assert_eq!(adjoint_linearized_b(&p, &ShellState::zeros(16), &u).unwrap().h_norm(), 0.0);
    }

    #[test]
    fn length_mismatch_is_reported() {
        let p = ShellParams::default();
        let short = ShellState::zeros(8);
        assert!(matches!(
            bilinear_b(&p, &short, &short),
            Err(Error::DimensionMismatch { expected: 16, found: 8 })
        ));
    }

    #[test]
    fn trajectory_needs_increasing_times() {
        let s = vec![ShellState::zeros(4); 2];
        assert!(Trajectory::new(vec![0.0, 0.0], s.clone()).is_err());
        assert!(Trajectory::new(vec![0.0], s.clone()).is_err());
        assert!(Trajectory::new(vec![0.0, 1.0], s).is_ok());
    }
}
