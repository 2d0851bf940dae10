//! Realified linearization `nu A + B'(u_e)`, its bi-orthonormal eigen-system,
//! the slow/fast split at a level `beta`, and controllability certificates
//! for the slow block.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, CMatrix};
use crate::model::{self, ShellParams, ShellState};

/// Relative distance under which eigenvalues are treated as one cluster.
pub const CLUSTER_TOL: f64 = 1e-8;
/// Minimal distance between `beta` and any eigenvalue real part.
pub const SPLIT_TOL: f64 = 1e-8;

/// `v -> nu A v + B'(u_e) v` on `[Re u, Im u]` coordinates.
pub fn assemble_linearization(params: &ShellParams, u_e: &ShellState) -> Result<DMatrix<f64>> {
    let mut m = model::linearized_b_matrix(params, u_e)?;
    let d = params.realified_a_diagonal(1.0);
    for i in 0..m.nrows() {
        m[(i, i)] += params.nu() * d[i];
    }
    Ok(m)
}

#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    pub matrix: DMatrix<f64>,
    /// Sorted by ascending real part; conjugate partners are adjacent with
    /// the negative imaginary part first.
    pub eigenvalues: Vec<Complex64>,
    /// Columns are unit right eigenvectors.
    pub right_modes: CMatrix,
    /// Columns satisfy `left^H right = I`.
    pub left_modes: CMatrix,
    pub beta: f64,
    pub n_slow: usize,
    /// `(start, len)` of each eigenvalue cluster in sorted order.
    pub clusters: Vec<(usize, usize)>,
}

fn sort_key_cmp(a: &Complex64, b: &Complex64, tol: f64) -> std::cmp::Ordering {
    if (a.re - b.re).abs() <= tol {
        a.im.total_cmp(&b.im)
    } else {
        a.re.total_cmp(&b.re)
    }
}

/// Eigen-decomposition of a real matrix and the split at `beta`: `n_slow`
/// counts eigenvalues with `Re < beta` (modes decaying slower than `beta`
/// under `du/dt + A u = 0`).
pub fn eigensplit(matrix: &DMatrix<f64>, beta: f64) -> Result<SpectralDecomposition> {
    let n = matrix.nrows();
    if matrix.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: matrix.ncols(),
        });
    }
    let (vals, vecs) = linalg::eig(matrix)?;
    let scale = matrix.norm().max(1.0);
    let roundoff = 100.0 * f64::EPSILON * scale;

    let mut order: Vec<usize> = (0..n).collect();
    let mut re_sorted = order.clone();
    re_sorted.sort_by(|&i, &j| vals[i].re.total_cmp(&vals[j].re));
    order.clear();
    // group by (nearly) equal real part, then order each group by imaginary part
    let mut k = 0;
    while k < n {
        let mut e = k + 1;
        while e < n && (vals[re_sorted[e]].re - vals[re_sorted[e - 1]].re).abs() <= roundoff {
            e += 1;
        }
        let mut group = re_sorted[k..e].to_vec();
        group.sort_by(|&i, &j| sort_key_cmp(&vals[i], &vals[j], f64::INFINITY));
        order.extend(group);
        k = e;
    }
    let eigenvalues: Vec<Complex64> = order.iter().map(|&i| vals[i]).collect();
    let mut right = CMatrix::zeros(n, n);
    for (c, &i) in order.iter().enumerate() {
        right.set_column(c, &vecs.column(i));
    }

    let gap = eigenvalues
        .iter()
        .map(|l| (l.re - beta).abs())
        .fold(f64::INFINITY, f64::min);
    if gap <= SPLIT_TOL * beta.abs().max(1.0) {
        return Err(Error::IllConditionedSplit { beta, gap });
    }

    // clusters of numerically coincident eigenvalues (contiguous after sorting
    // unless separated by a conjugate partner; handled by a full scan)
    let close = |a: Complex64, b: Complex64| {
        (a - b).norm() <= CLUSTER_TOL * a.norm().max(b.norm()) + roundoff
    };
    let mut assigned = vec![false; n];
    let mut perm: Vec<usize> = Vec::with_capacity(n);
    let mut clusters = Vec::new();
    for i in 0..n {
        if assigned[i] {
            continue;
        }
        let start = perm.len();
        assigned[i] = true;
        perm.push(i);
        let mut grew = true;
        while grew {
            grew = false;
            for j in i + 1..n {
                if !assigned[j] && perm[start..].iter().any(|&p| close(eigenvalues[p], eigenvalues[j])) {
                    assigned[j] = true;
                    perm.push(j);
                    grew = true;
                }
            }
        }
        clusters.push((start, perm.len() - start));
    }
    let eigenvalues: Vec<Complex64> = perm.iter().map(|&i| eigenvalues[i]).collect();
    let mut phi = CMatrix::zeros(n, n);
    for (c, &i) in perm.iter().enumerate() {
        phi.set_column(c, &right.column(i));
    }

    for (ci, &(start, len)) in clusters.iter().enumerate() {
        if len == 1 {
            continue;
        }
        let block = phi.columns(start, len).into_owned();
        let sv = block.clone().singular_values();
        let cond = sv.max() / sv.min();
        if !(cond < 1e8) {
            return Err(Error::DefectiveCluster {
                index: ci,
                condition: cond,
            });
        }
        let q = block.qr().q();
        phi.columns_mut(start, len).copy_from(&q);
    }

    let inv = phi
        .clone()
        .try_inverse()
        .ok_or(Error::DefectiveCluster {
            index: 0,
            condition: f64::INFINITY,
        })?;
    let left = inv.adjoint();
    let n_slow = eigenvalues.iter().filter(|l| l.re < beta).count();
    Ok(SpectralDecomposition {
        matrix: matrix.clone(),
        eigenvalues,
        right_modes: phi,
        left_modes: left,
        beta,
        n_slow,
        clusters,
    })
}

impl SpectralDecomposition {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `max_{ij} |(phi_j, psi_i) - delta_ij|`.
    pub fn biorthogonality_residual(&self) -> f64 {
        let g = self.left_modes.adjoint() * &self.right_modes;
        let n = self.dim();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let d = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g[(i, j)] - Complex64::new(d, 0.0)).norm());
            }
        }
        worst
    }

    /// `max_j |A phi_j - lambda_j phi_j|`.
    pub fn eigen_residual(&self) -> f64 {
        let a = linalg::to_complex(&self.matrix);
        (0..self.dim())
            .map(|j| {
                let v = self.right_modes.column(j);
                (&a * v - v * self.eigenvalues[j]).norm()
            })
            .fold(0.0, f64::max)
    }

    /// `max_j |A^T psi_j - conj(lambda_j) psi_j|`.
    pub fn left_residual(&self) -> f64 {
        let at = linalg::to_complex(&self.matrix.transpose());
        (0..self.dim())
            .map(|j| {
                let v = self.left_modes.column(j);
                (&at * v - v * self.eigenvalues[j].conj()).norm()
            })
            .fold(0.0, f64::max)
    }

    pub fn slow_eigenvalues(&self) -> &[Complex64] {
        &self.eigenvalues[..self.n_slow]
    }

    pub fn slow_left(&self) -> CMatrix {
        self.left_modes.columns(0, self.n_slow).into_owned()
    }

    pub fn slow_right(&self) -> CMatrix {
        self.right_modes.columns(0, self.n_slow).into_owned()
    }

    /// `P_N = sum_{j < N} phi_j psi_j^H`, real because the slow set is closed
    /// under conjugation.
    pub fn projection(&self) -> DMatrix<f64> {
        let p = self.slow_right() * self.slow_left().adjoint();
        p.map(|z| z.re)
    }

    /// Real orthonormal basis (columns) of `span{psi_1, .., psi_N}`.
    pub fn slow_left_basis(&self) -> Result<DMatrix<f64>> {
        real_span_basis(&self.slow_left(), self.n_slow)
    }
}

/// Orthonormal real basis of the real span of the real and imaginary parts of
/// the columns of `v`, which must have real dimension `dim`.
pub fn real_span_basis(v: &CMatrix, dim: usize) -> Result<DMatrix<f64>> {
    let n = v.nrows();
    if dim == 0 {
        return Ok(DMatrix::zeros(n, 0));
    }
    let k = v.ncols();
    let mut stacked = DMatrix::zeros(n, 2 * k);
    for j in 0..k {
        for i in 0..n {
            stacked[(i, j)] = v[(i, j)].re;
            stacked[(i, k + j)] = v[(i, j)].im;
        }
    }
    let svd = stacked.svd(true, false);
    let u = svd.u.expect("requested U");
    let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
    idx.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let smax = svd.singular_values[idx[0]];
    if dim > idx.len() || svd.singular_values[idx[dim - 1]] <= 1e-10 * smax {
        return Err(Error::DefectiveCluster {
            index: dim,
            condition: f64::INFINITY,
        });
    }
    let mut basis = DMatrix::zeros(n, dim);
    for (c, &i) in idx.iter().take(dim).enumerate() {
        basis.set_column(c, &u.column(i));
    }
    Ok(basis)
}

#[derive(Debug, Clone, Serialize)]
pub struct ControllabilityReport {
    /// `C_ij = (B1 psi_j, psi_i)` over slow modes.
    #[serde(skip)]
    pub matrix: CMatrix,
    pub det_abs: f64,
    /// `rank [A - lambda_j I | B1]` for each slow eigenvalue.
    pub hautus_ranks: Vec<usize>,
    pub full_rank: usize,
    /// First slow mode failing the rank test.
    pub hautus_failure: Option<usize>,
}

pub fn controllability_matrix(decomp: &SpectralDecomposition, b1: &DMatrix<f64>) -> Result<ControllabilityReport> {
    let n = decomp.dim();
    if b1.nrows() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: b1.nrows(),
        });
    }
    let psi = decomp.slow_left();
    let b1c = linalg::to_complex(b1);
    let matrix = psi.adjoint() * &b1c * &psi;
    let det_abs = if decomp.n_slow == 0 {
        1.0
    } else {
        matrix.clone().determinant().norm()
    };
    let a = linalg::to_complex(&decomp.matrix);
    let m = b1.ncols();
    let mut hautus_ranks = Vec::with_capacity(decomp.n_slow);
    for &lam in decomp.slow_eigenvalues() {
        let mut aug = CMatrix::zeros(n, n + m);
        aug.view_mut((0, 0), (n, n)).copy_from(&a);
        for i in 0..n {
            aug[(i, i)] -= lam;
        }
        aug.view_mut((0, n), (n, m)).copy_from(&b1c);
        hautus_ranks.push(linalg::rank(&aug, 1e-12));
    }
    let hautus_failure = hautus_ranks.iter().position(|&r| r < n);
    Ok(ControllabilityReport {
        matrix,
        det_abs,
        hautus_ranks,
        full_rank: n,
        hautus_failure,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct GramianCertificate {
    pub pass: bool,
    pub horizon: f64,
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
    /// Smallest eigenvalue of the unit-diagonal (correlation) form.
    pub scaled_min_eigenvalue: f64,
    pub offending_mode: Option<usize>,
    pub note: Option<String>,
}

/// Composite Simpson quadrature of `int_0^T e^{-L s} C C^H e^{-L^H s} ds`
/// with `L = diag(lambda_slow)` and `intervals` (made even) sub-intervals.
pub fn controllability_gramian(lambdas: &[Complex64], c: &CMatrix, horizon: f64, intervals: usize) -> CMatrix {
    let n = lambdas.len();
    let cc = c * c.adjoint();
    let steps = intervals.max(2).next_multiple_of(2);
    let h = horizon / steps as f64;
    let mut g = CMatrix::zeros(n, n);
    for k in 0..=steps {
        let s = k as f64 * h;
        let w = if k == 0 || k == steps {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let e: Vec<Complex64> = lambdas.iter().map(|l| (-l * s).exp()).collect();
        for i in 0..n {
            for j in 0..n {
                g[(i, j)] += e[i] * cc[(i, j)] * e[j].conj() * (w * h / 3.0);
            }
        }
    }
    g
}

/// Null controllability of the slow block in time `horizon`, decided by the
/// rank of the controllability Gramian of `(diag(lambda_slow), C)`.
pub fn null_controllability_check(
    decomp: &SpectralDecomposition,
    b1: &DMatrix<f64>,
    horizon: f64,
) -> Result<GramianCertificate> {
    if !(horizon > 0.0) {
        return Err(Error::InvalidParams(format!("horizon must be positive, got {horizon}")));
    }
    if decomp.n_slow == 0 {
        return Ok(GramianCertificate {
            pass: true,
            horizon,
            min_eigenvalue: 0.0,
            max_eigenvalue: 0.0,
            scaled_min_eigenvalue: 1.0,
            offending_mode: None,
            note: Some("no slow modes: vacuously controllable".into()),
        });
    }
    let report = controllability_matrix(decomp, b1)?;
    let g = controllability_gramian(decomp.slow_eigenvalues(), &report.matrix, horizon, 2000);
    Ok(gramian_decision(&g, horizon))
}

pub(crate) fn gramian_decision(g: &CMatrix, horizon: f64) -> GramianCertificate {
    let n = g.nrows();
    let herm = (g + g.adjoint()) * Complex64::new(0.5, 0.0);
    let raw = SymmetricEigen::new(herm.clone()).eigenvalues;
    let min_eigenvalue = raw.min();
    let max_eigenvalue = raw.max();
    let diag: Vec<f64> = (0..n).map(|i| herm[(i, i)].re).collect();
    let scale_floor: f64 = 1e-300;
    if let Some(j) = diag.iter().position(|&d| d <= scale_floor.max(1e-14 * max_eigenvalue)) {
        return GramianCertificate {
            pass: false,
            horizon,
            min_eigenvalue,
            max_eigenvalue,
            scaled_min_eigenvalue: 0.0,
            offending_mode: Some(j),
            note: Some(format!("slow mode {j} receives no actuation")),
        };
    }
    let d = DVector::from_iterator(n, diag.iter().map(|x| Complex64::new(1.0 / x.sqrt(), 0.0)));
    let scaled = DMatrix::from_fn(n, n, |i, j| herm[(i, j)] * d[i] * d[j]);
    let eig = SymmetricEigen::new(scaled);
    let (imin, smin) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
    let smax = eig.eigenvalues.max();
    let pass = smin > 1e-12 * smax;
    let offending_mode = if pass {
        None
    } else {
        let v = eig.eigenvectors.column(imin);
        (0..n).max_by(|&a, &b| v[a].norm().total_cmp(&v[b].norm()))
    };
    GramianCertificate {
        pass,
        horizon,
        min_eigenvalue,
        max_eigenvalue,
        scaled_min_eigenvalue: smin,
        offending_mode,
        note: None,
    }
}
