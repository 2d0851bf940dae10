//! Dense linear algebra on top of nalgebra: complex Schur based eigenvectors,
//! Sylvester/Lyapunov solvers (Bartels-Stewart), Schur reordering and the
//! exponential-integrator functions `phi_1`, `phi_2`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type CMatrix = DMatrix<Complex64>;
pub type CVector = DVector<Complex64>;

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };
const ONE: Complex64 = Complex64 { re: 1.0, im: 0.0 };

pub fn to_complex(a: &DMatrix<f64>) -> CMatrix {
    a.map(|x| Complex64::new(x, 0.0))
}

fn check_finite(a: &DMatrix<f64>, what: &'static str) -> Result<()> {
    if a.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Complex Schur form `A = Q T Q^H` with `T` upper triangular.
pub fn schur(a: &CMatrix) -> (CMatrix, CMatrix) {
    let (q, mut t) = a.clone().schur().unpack();
    // nalgebra leaves round-off below the diagonal; the solvers rely on exact zeros.
    let n = t.nrows();
    for j in 0..n {
        for i in j + 1..n {
            t[(i, j)] = ZERO;
        }
    }
    (q, t)
}

/// Eigenvalues and unit right eigenvectors of a real square matrix, in the
/// order produced by the Schur form.
pub fn eig(a: &DMatrix<f64>) -> Result<(Vec<Complex64>, CMatrix)> {
    check_finite(a, "eigenproblem input")?;
    let (q, t) = schur(&to_complex(a));
    let n = t.nrows();
    let tnorm = t.norm().max(f64::MIN_POSITIVE);
    let smin = f64::EPSILON * tnorm;
    let mut vecs = CMatrix::zeros(n, n);
    let mut x = CVector::zeros(n);
    for k in 0..n {
        let lam = t[(k, k)];
        x.fill(ZERO);
        x[k] = ONE;
        for i in (0..k).rev() {
            let mut s = ZERO;
            for j in i + 1..=k {
                s += t[(i, j)] * x[j];
            }
            if s == ZERO {
                continue;
            }
            let mut d = t[(i, i)] - lam;
            if d.norm() < smin {
                d = Complex64::new(smin, 0.0);
            }
            x[i] = -s / d;
        }
        let v = &q * &x;
        let nv = v.norm();
        vecs.set_column(k, &(v / Complex64::new(nv, 0.0)));
    }
    let vals = (0..n).map(|k| t[(k, k)]).collect();
    Ok((vals, vecs))
}

/// Solve `A X + X B = C` for square `A` (n x n) and `B` (m x m).
pub fn sylvester(a: &CMatrix, b: &CMatrix, c: &CMatrix) -> Result<CMatrix> {
    let (u, t) = schur(a);
    let (v, s) = schur(b);
    let ct = u.adjoint() * c * &v;
    let y = sylvester_triangular(&t, &s, &ct)?;
    Ok(&u * y * v.adjoint())
}

/// `T Y + Y S = C` with `T`, `S` upper triangular.
fn sylvester_triangular(t: &CMatrix, s: &CMatrix, c: &CMatrix) -> Result<CMatrix> {
    let n = t.nrows();
    let m = s.nrows();
    let scale = t.norm() + s.norm();
    let mut y = CMatrix::zeros(n, m);
    let mut rhs = CVector::zeros(n);
    for k in 0..m {
        for i in 0..n {
            let mut r = c[(i, k)];
            for j in 0..k {
                r -= y[(i, j)] * s[(j, k)];
            }
            rhs[i] = r;
        }
        let skk = s[(k, k)];
        for i in (0..n).rev() {
            let mut r = rhs[i];
            for j in i + 1..n {
                r -= t[(i, j)] * y[(j, k)];
            }
            let d = t[(i, i)] + skk;
            if d.norm() <= f64::EPSILON * scale {
                return Err(Error::SingularJacobian {
                    condition: f64::INFINITY,
                });
            }
            y[(i, k)] = r / d;
        }
    }
    Ok(y)
}

/// Precomputed Schur factorisation of a real matrix for repeated Lyapunov
/// solves `A^T X + X A = C`.
pub struct LyapunovSolver {
    q: CMatrix,
    t: CMatrix,
}

impl LyapunovSolver {
    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        check_finite(a, "Lyapunov coefficient")?;
        let (q, t) = schur(&to_complex(a));
        Ok(LyapunovSolver { q, t })
    }

    /// Solve `A^T X + X A = C`. For symmetric `C` the result is symmetrised.
    pub fn solve(&self, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        // A^T = A^H = Q T^H Q^H, so with Y = Q^H X Q: T^H Y + Y T = Q^H C Q.
        let t = &self.t;
        let n = t.nrows();
        let ct = self.q.adjoint() * to_complex(c) * &self.q;
        let scale = t.norm();
        let mut y = CMatrix::zeros(n, n);
        let mut rhs = CVector::zeros(n);
        for k in 0..n {
            for i in 0..n {
                let mut r = ct[(i, k)];
                for j in 0..k {
                    r -= y[(i, j)] * t[(j, k)];
                }
                rhs[i] = r;
            }
            let tkk = t[(k, k)];
            // (T^H + t_kk I) is lower triangular: forward substitution.
            for i in 0..n {
                let mut r = rhs[i];
                for j in 0..i {
                    r -= t[(j, i)].conj() * y[(j, k)];
                }
                let d = t[(i, i)].conj() + tkk;
                if d.norm() <= f64::EPSILON * scale {
                    return Err(Error::SingularJacobian {
                        condition: f64::INFINITY,
                    });
                }
                y[(i, k)] = r / d;
            }
        }
        let x = (&self.q * y * self.q.adjoint()).map(|z| z.re);
        Ok(symmetrize(&x))
    }
}

/// One-shot `A^T X + X A = C`.
pub fn lyapunov(a: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    LyapunovSolver::new(a)?.solve(c)
}

pub fn symmetrize(x: &DMatrix<f64>) -> DMatrix<f64> {
    (x + x.transpose()) * 0.5
}

/// `(c, s, r)` with `[c s; -conj(s) c] [f; g] = [r; 0]`, `c` real.
fn givens(f: Complex64, g: Complex64) -> (f64, Complex64) {
    if g == ZERO {
        return (1.0, ZERO);
    }
    if f == ZERO {
        return (0.0, g.conj() / g.norm());
    }
    let fa = f.norm();
    let nrm = fa.hypot(g.norm());
    let phase = f / fa;
    (fa / nrm, phase * g.conj() / nrm)
}

/// `x <- c x + s y`, `y <- c y - conj(s) x`.
#[inline]
fn rot(x: &mut Complex64, y: &mut Complex64, c: f64, s: Complex64) {
    let tx = *x * c + s * *y;
    *y = *y * c - s.conj() * *x;
    *x = tx;
}

/// Swap diagonal entries `k` and `k+1` of a complex Schur form in place.
fn swap_adjacent(q: &mut CMatrix, t: &mut CMatrix, k: usize) {
    let n = t.nrows();
    let t11 = t[(k, k)];
    let t22 = t[(k + 1, k + 1)];
    let (c, s) = givens(t[(k, k + 1)], t22 - t11);
    for j in k + 2..n {
        let (mut x, mut y) = (t[(k, j)], t[(k + 1, j)]);
        rot(&mut x, &mut y, c, s);
        t[(k, j)] = x;
        t[(k + 1, j)] = y;
    }
    for i in 0..k {
        let (mut x, mut y) = (t[(i, k)], t[(i, k + 1)]);
        rot(&mut x, &mut y, c, s.conj());
        t[(i, k)] = x;
        t[(i, k + 1)] = y;
    }
    t[(k, k)] = t22;
    t[(k + 1, k + 1)] = t11;
    for i in 0..n {
        let (mut x, mut y) = (q[(i, k)], q[(i, k + 1)]);
        rot(&mut x, &mut y, c, s.conj());
        q[(i, k)] = x;
        q[(i, k + 1)] = y;
    }
}

/// Reorder a complex Schur form so that the eigenvalues accepted by
/// `select` occupy the leading diagonal positions. Returns how many were
/// selected.
pub fn reorder_schur(q: &mut CMatrix, t: &mut CMatrix, select: impl Fn(Complex64) -> bool) -> usize {
    let n = t.nrows();
    let mut placed = 0;
    for k in 0..n {
        if select(t[(k, k)]) {
            let mut j = k;
            while j > placed {
                swap_adjacent(q, t, j - 1);
                j -= 1;
            }
            placed += 1;
        }
    }
    placed
}

/// Extreme eigenvalues of a symmetric matrix.
pub fn sym_extreme_eigenvalues(a: &DMatrix<f64>) -> (f64, f64) {
    let e = SymmetricEigen::new(symmetrize(a)).eigenvalues;
    let lo = e.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

/// Numerical rank with relative singular-value threshold.
pub fn rank(a: &CMatrix, rel_tol: f64) -> usize {
    if a.is_empty() {
        return 0;
    }
    let sv = a.clone().singular_values();
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * smax).count()
}

pub fn rank_real(a: &DMatrix<f64>, rel_tol: f64) -> usize {
    rank(&to_complex(a), rel_tol)
}

/// `(e^X, phi_1(X), phi_2(X))` for `X = -L h`, from the exponential of the
/// block matrix `[[X, I, 0], [0, 0, I], [0, 0, 0]]`.
pub fn exp_phi(l: &DMatrix<f64>, h: f64) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let n = l.nrows();
    let mut z = DMatrix::zeros(3 * n, 3 * n);
    z.view_mut((0, 0), (n, n)).copy_from(&(l * (-h)));
    for i in 0..n {
        z[(i, n + i)] = 1.0;
        z[(n + i, 2 * n + i)] = 1.0;
    }
    let e = z.exp();
    (
        e.view((0, 0), (n, n)).into_owned(),
        e.view((0, n), (n, n)).into_owned(),
        e.view((0, 2 * n), (n, n)).into_owned(),
    )
}

/// Scalar `phi_1(z) = (e^z - 1)/z` and `phi_2(z) = (e^z - 1 - z)/z^2`,
/// accurate near zero.
pub fn phi12(z: f64) -> (f64, f64) {
    if z.abs() < 1e-3 {
        let p1 = 1.0 + z / 2.0 + z * z / 6.0 + z * z * z / 24.0 + z.powi(4) / 120.0;
        let p2 = 0.5 + z / 6.0 + z * z / 24.0 + z * z * z / 120.0 + z.powi(4) / 720.0;
        (p1, p2)
    } else {
        let em1 = z.exp_m1();
        (em1 / z, (em1 - z) / (z * z))
    }
}
