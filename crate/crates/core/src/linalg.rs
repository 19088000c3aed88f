//! Small dense linear algebra helpers shared by the control and observer code.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

/// Relative singular value threshold used for every numerical rank decision.
pub const RANK_TOL: f64 = 1e-8;

/// Singular values of `m`, sorted descending.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut sv: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Numerical rank: number of singular values above `rel_tol * sigma_max`.
pub fn rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    rank_of(&singular_values(m), rel_tol)
}

fn rank_of(sv: &[f64], rel_tol: f64) -> usize {
    match sv.first() {
        Some(&max) if max > 0.0 => sv.iter().filter(|&&s| s > rel_tol * max).count(),
        _ => 0,
    }
}

pub fn complex_rank(m: &DMatrix<Complex64>, rel_tol: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * max).count()
}

/// Moore-Penrose pseudo-inverse with the crate's rank tolerance.
pub fn pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return DMatrix::zeros(m.ncols(), m.nrows());
    }
    let svd = m.clone().svd(true, true);
    let max = svd.singular_values.max();
    let eps = (RANK_TOL * max).max(f64::MIN_POSITIVE);
    svd.pseudo_inverse(eps).expect("svd computed with both factors")
}

/// Matrix sign function by scaled Newton iteration. `None` when an
/// eigenvalue sits on the imaginary axis or the iteration stalls.
pub fn matrix_sign(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = m.nrows();
    let mut x = m.clone();
    for _ in 0..100 {
        let lu = x.clone().lu();
        let inv = lu.try_inverse()?;
        let det = x.clone().lu().determinant().abs();
        let mu = if det > 0.0 && det.is_finite() { det.powf(-1.0 / n as f64) } else { 1.0 };
        let next = (&x * mu + inv / mu) * 0.5;
        let delta = (&next - &x).norm();
        x = next;
        if delta <= 1e-13 * x.norm() {
            return Some(x);
        }
    }
    None
}

/// Orthonormal basis of the invariant subspace of `a` belonging to the
/// eigenvalues with real part above `-shift`.
pub fn slow_subspace(a: &DMatrix<f64>, shift: f64) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let sign = matrix_sign(&(a + DMatrix::identity(n, n) * shift))?;
    let proj = (DMatrix::identity(n, n) + sign) * 0.5;
    let q = proj.trace().round().max(0.0) as usize;
    let svd = proj.svd(true, false);
    let u = svd.u.expect("left factor requested");
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    Some(DMatrix::from_fn(n, q, |r, c| u[(r, order[c])]))
}

/// Orthonormal split of R^n induced by the row space of `c`.
pub struct RowSpaceSplit {
    /// n x r basis of the row space of `c`.
    pub range: DMatrix<f64>,
    /// n x (n - r) basis of the null space of `c`.
    pub kernel: DMatrix<f64>,
    /// r x p map with `recover * c == range^T`.
    pub recover: DMatrix<f64>,
}

pub fn row_space_split(c: &DMatrix<f64>, rel_tol: f64) -> RowSpaceSplit {
    let max = singular_values(c).first().copied().unwrap_or(0.0);
    row_space_split_abs(c, rel_tol * max)
}

/// Like [`row_space_split`] but keeps singular values strictly above `abs_tol`.
pub fn row_space_split_abs(c: &DMatrix<f64>, abs_tol: f64) -> RowSpaceSplit {
    let n = c.ncols();
    let p = c.nrows();
    if p == 0 || n == 0 {
        return RowSpaceSplit {
            range: DMatrix::zeros(n, 0),
            kernel: DMatrix::identity(n, n),
            recover: DMatrix::zeros(0, p),
        };
    }
    let svd = c.clone().svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    // nalgebra does not sort singular values; keep the ones above tolerance.
    let sv = &svd.singular_values;
    let keep: Vec<usize> = (0..sv.len()).filter(|&i| sv[i] > 0.0 && sv[i] > abs_tol).collect();
    let r = keep.len();
    let mut range = DMatrix::zeros(n, r);
    let mut recover = DMatrix::zeros(r, p);
    for (col, &i) in keep.iter().enumerate() {
        range.set_column(col, &v_t.row(i).transpose());
        let ui = u.column(i);
        for j in 0..p {
            recover[(col, j)] = ui[j] / sv[i];
        }
    }
    let kernel = complement(&range);
    RowSpaceSplit { range, kernel, recover }
}

/// Orthonormal basis of the orthogonal complement of the (orthonormal) columns of `q1`.
pub fn complement(q1: &DMatrix<f64>) -> DMatrix<f64> {
    let n = q1.nrows();
    let r = q1.ncols();
    if r == 0 {
        return DMatrix::identity(n, n);
    }
    let mut stacked = DMatrix::zeros(n, r + n);
    stacked.view_mut((0, 0), (n, r)).copy_from(q1);
    stacked.view_mut((0, r), (n, n)).copy_from(&DMatrix::<f64>::identity(n, n));
    let q = stacked.qr().q();
    q.columns(r, n - r).into_owned()
}

/// Column-stacks the given vectors.
pub fn hstack(cols: &[DVector<f64>], nrows: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(nrows, cols.len());
    for (j, c) in cols.iter().enumerate() {
        m.set_column(j, c);
    }
    m
}

/// Block-diagonal real matrix with the requested real poles on its diagonal.
pub fn diag_poles(poles: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_column_slice(poles))
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

/// Largest real part among the eigenvalues of `m`.
pub fn spectral_abscissa(m: &DMatrix<f64>) -> f64 {
    eigenvalues(m).iter().map(|e| e.re).fold(f64::NEG_INFINITY, f64::max)
}

/// Eigenvalues through an iteration-capped real Schur form. Matrices on
/// which the f64 iteration stalls go through the extended precision solver.
pub fn eigenvalues(m: &DMatrix<f64>) -> Vec<Complex64> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    let max_niter = 200 * m.nrows();
    match nalgebra::Schur::try_new(m.clone(), f64::EPSILON, max_niter) {
        Some(schur) => schur.complex_eigenvalues().iter().copied().collect(),
        None => crate::spectrum::eigenvalues_precise(m).expect("both eigenvalue iterations failed to converge"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_of_selection_and_zero() {
        let c = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(rank(&c, RANK_TOL), 2);
        assert_eq!(rank(&DMatrix::zeros(3, 2), RANK_TOL), 0);
    }

    #[test]
    fn row_space_split_is_orthonormal_and_recovers_rows() {
        let c = DMatrix::from_row_slice(2, 4, &[1.0, 2.0, 0.0, 0.0, 2.0, 4.0, 0.0, 1.0]);
        let s = row_space_split(&c, RANK_TOL);
        assert_eq!(s.range.ncols(), 2);
        assert_eq!(s.kernel.ncols(), 2);
        let q = {
            let mut q = DMatrix::zeros(4, 4);
            q.view_mut((0, 0), (4, 2)).copy_from(&s.range);
            q.view_mut((0, 2), (4, 2)).copy_from(&s.kernel);
            q
        };
        assert!(max_abs(&(q.transpose() * &q - DMatrix::identity(4, 4))) < 1e-12);
        assert!(max_abs(&(&s.recover * &c - s.range.transpose())) < 1e-12);
        assert!(max_abs(&(&c * &s.kernel)) < 1e-12);
    }

    #[test]
    fn pinv_of_column() {
        let e = DMatrix::from_column_slice(3, 1, &[0.0, 2.0, 0.0]);
        let p = pinv(&e);
        assert!((p[(0, 1)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sign_of_split_diagonal() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![-2.0, 3.0, 0.5]));
        let s = matrix_sign(&m).unwrap();
        let expected = DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, 1.0, 1.0]));
        assert!((s - expected).norm() < 1e-12);
        assert!(matrix_sign(&DMatrix::zeros(2, 2)).is_none());
    }

    #[test]
    fn slow_subspace_keeps_modes_right_of_shift() {
        let a = DMatrix::from_row_slice(3, 3, &[-5.0, 1.0, 0.0, 0.0, -0.1, 0.0, 0.0, 0.0, 1.0]);
        let w = slow_subspace(&a, 0.45).unwrap();
        assert_eq!(w.ncols(), 2);
        assert!((w.transpose() * &w - DMatrix::identity(2, 2)).norm() < 1e-12);
        // invariant: A W = W (W^T A W)
        let m = w.transpose() * &a * &w;
        assert!((&a * &w - &w * m).norm() < 1e-10);
    }
}
