//! Full-order unknown input observers.
//!
//! For `x' = A x + w + E d`, `y = C x` with known input `w` and unknown `d`,
//! the observer
//!
//! ```text
//! z' = F z + T w + P y,    x_hat = z + H y
//! ```
//!
//! has error dynamics `e' = F e` independent of `d` when
//! `(HC - I)E = 0`, `T = I - HC`, `F = TA - P1 C` and `P = P1 + FH`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, RANK_TOL};

/// Real parts above `-STABILITY_MARGIN` count as not asymptotically stable.
pub const STABILITY_MARGIN: f64 = 1e-7;

/// Largest accepted `||P1||`, relative to `max(||A1||, 1)`.
pub const GAIN_CEILING: f64 = 1e2;

/// Partial placement shifts tried in order when full placement is too stiff.
pub const SLOW_SHIFTS: [f64; 7] = [0.9, 0.45, 0.225, 0.1125, 0.05625, 0.028125, 0.0140625];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UioError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("unknown-input matrix has no columns")]
    EmptyUnknownInput,
    #[error("unknown-input matrix is rank deficient (rank {rank} < {cols} columns)")]
    RankDeficientE { rank: usize, cols: usize },
    #[error("rank(CE) = {rank_ce} differs from rank(E) = {rank_e}")]
    RankMismatch { rank_ce: usize, rank_e: usize },
    #[error("pair (C, A1) is not detectable; unobservable modes {modes:?}")]
    Undetectable { modes: Vec<(f64, f64)> },
    #[error("requested observer pole {0} is not in the open left half plane")]
    UnstablePole(f64),
    #[error("no observer gain below the conditioning ceiling (full placement needs {gain:.3e})")]
    IllConditioned { gain: f64 },
    #[error("pole list is empty")]
    NoPoles,
}

/// Outcome of the existence test for a `(A, E, C)` triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExistenceCertificate {
    pub rank_ce: usize,
    pub rank_e: usize,
    pub detectable: bool,
    /// Rosenbrock matrix `[sI - A, E; C, 0]` keeps full column rank at every
    /// closed right half plane candidate `s`.
    pub transmission_rank_ok: bool,
    pub singular_values_ce: Vec<f64>,
    /// Modes of `A1` not visible through `C`, as `(re, im)`.
    pub unobservable_modes: Vec<(f64, f64)>,
}

impl ExistenceCertificate {
    pub fn is_valid(&self) -> bool {
        self.rank_ce == self.rank_e && self.detectable
    }
}

/// Result of a staircase observer pole placement.
#[derive(Debug, Clone)]
pub struct Placement {
    /// Output injection `P` with `eig(A - P C)` = placed poles plus unobservable modes.
    pub gain: DMatrix<f64>,
    pub unobservable_modes: Vec<Complex64>,
    pub placed: Vec<f64>,
}

/// Absolute rank threshold for the staircase, scaled by the size of `A`.
fn staircase_tol(a: &DMatrix<f64>, c: &DMatrix<f64>) -> f64 {
    RANK_TOL * a.norm().max(c.norm()).max(1.0)
}

/// Places the observable eigenvalues of `A - P C` at `poles` (cycled).
///
/// The state is split orthogonally into the row space of `C`, which is
/// measured directly, and its complement, which is seen only through the
/// coupling block `A12`. The complement is handled recursively with `A12`
/// as its measurement; whatever is left when `A12` vanishes is unobservable
/// and keeps its own eigenvalues.
pub fn place_observer(a: &DMatrix<f64>, c: &DMatrix<f64>, poles: &[f64]) -> Result<Placement, UioError> {
    if poles.is_empty() {
        return Err(UioError::NoPoles);
    }
    if let Some(&bad) = poles.iter().find(|p| !(**p < 0.0)) {
        return Err(UioError::UnstablePole(bad));
    }
    if a.nrows() != a.ncols() || c.ncols() != a.nrows() {
        return Err(UioError::Dimension(format!("A is {}x{}, C is {}x{}", a.nrows(), a.ncols(), c.nrows(), c.ncols())));
    }
    let tol = staircase_tol(a, c);
    let mut cycle = poles.iter().copied().cycle();
    let mut placed = Vec::new();
    let mut unobservable = None;
    let gain = place_rec(a, c, tol, &mut cycle, &mut placed, &mut unobservable);
    let unobservable_modes = unobservable.map(|m| linalg::eigenvalues(&m)).unwrap_or_default();
    Ok(Placement { gain, unobservable_modes, placed })
}

fn place_rec(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    tol: f64,
    poles: &mut impl Iterator<Item = f64>,
    placed: &mut Vec<f64>,
    unobservable: &mut Option<DMatrix<f64>>,
) -> DMatrix<f64> {
    let n = a.nrows();
    let p = c.nrows();
    if n == 0 {
        return DMatrix::zeros(0, p);
    }
    let split = linalg::row_space_split_abs(c, tol);
    let r = split.range.ncols();
    if r == 0 {
        *unobservable = Some(a.clone());
        return DMatrix::zeros(n, p);
    }
    let mut q = DMatrix::zeros(n, n);
    q.view_mut((0, 0), (n, r)).copy_from(&split.range);
    q.view_mut((0, r), (n, n - r)).copy_from(&split.kernel);
    let at = q.transpose() * a * &q;
    let m = n - r;
    let a11 = at.view((0, 0), (r, r)).into_owned();
    let a12 = at.view((0, r), (r, m)).into_owned();
    let a21 = at.view((r, 0), (m, r)).into_owned();
    let a22 = at.view((r, r), (m, m)).into_owned();

    let l = place_rec(&a22, &a12, tol, poles, placed, unobservable);
    let chosen: Vec<f64> = poles.take(r).collect();
    placed.extend_from_slice(&chosen);
    let g = linalg::diag_poles(&chosen);
    let x = &g - &a12 * &l;
    let y = &l * &x + &l * &a12 * &l - &a22 * &l;
    let mut pt = DMatrix::zeros(n, r);
    pt.view_mut((0, 0), (r, r)).copy_from(&(a11 - x));
    pt.view_mut((r, 0), (m, r)).copy_from(&(a21 - y));
    q * pt * split.recover
}

/// Moves only the modes of `A` with real part above `-shift` to `poles`
/// and leaves the faster ones where they are.
pub fn place_observer_partial(a: &DMatrix<f64>, c: &DMatrix<f64>, poles: &[f64], shift: f64) -> Result<Placement, UioError> {
    let w = linalg::slow_subspace(a, shift).ok_or_else(|| UioError::Dimension("no spectral split at the requested shift".into()))?;
    if w.ncols() == 0 {
        return Ok(Placement { gain: DMatrix::zeros(a.nrows(), c.nrows()), unobservable_modes: Vec::new(), placed: Vec::new() });
    }
    let m = w.transpose() * a * &w;
    let inner = place_observer(&m, &(c * &w), poles)?;
    Ok(Placement { gain: &w * inner.gain, unobservable_modes: inner.unobservable_modes, placed: inner.placed })
}

fn check_dims(a: &DMatrix<f64>, e: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<(), UioError> {
    let n = a.nrows();
    if a.ncols() != n || e.nrows() != n || c.ncols() != n {
        return Err(UioError::Dimension(format!(
            "A {}x{}, E {}x{}, C {}x{}",
            a.nrows(),
            a.ncols(),
            e.nrows(),
            e.ncols(),
            c.nrows(),
            c.ncols()
        )));
    }
    if e.ncols() == 0 {
        return Err(UioError::EmptyUnknownInput);
    }
    let rank_e = linalg::rank(e, RANK_TOL);
    if rank_e < e.ncols() {
        return Err(UioError::RankDeficientE { rank: rank_e, cols: e.ncols() });
    }
    Ok(())
}

/// Minimum-norm decoupler `H = E (CE)^+` and `A1 = (I - HC) A`.
fn decoupler(a: &DMatrix<f64>, e: &DMatrix<f64>, c: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let h = e * linalg::pinv(&(c * e));
    let t = DMatrix::identity(n, n) - &h * c;
    let a1 = &t * a;
    (h, t, a1)
}

/// Evaluates rank, detectability and Rosenbrock conditions for `(A, E, C)`.
pub fn check_existence(a: &DMatrix<f64>, e: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<ExistenceCertificate, UioError> {
    check_dims(a, e, c)?;
    let ce = c * e;
    let singular_values_ce = linalg::singular_values(&ce);
    let rank_e = e.ncols();
    let rank_ce = linalg::rank(&ce, RANK_TOL);
    let (_, _, a1) = decoupler(a, e, c);
    let placement = place_observer(&a1, c, &[-1.0])?;
    let unobservable_modes: Vec<(f64, f64)> = placement.unobservable_modes.iter().map(|z| (z.re, z.im)).collect();
    let detectable = rank_ce == rank_e && unobservable_modes.iter().all(|&(re, _)| re < -STABILITY_MARGIN);
    let transmission_rank_ok = rosenbrock_ok(a, e, c, &placement.unobservable_modes);
    Ok(ExistenceCertificate {
        rank_ce,
        rank_e,
        detectable,
        transmission_rank_ok,
        singular_values_ce,
        unobservable_modes,
    })
}

/// Full column rank of `[sI - A, E; C, 0]` at `s = 0` and at every
/// candidate with nonnegative real part.
fn rosenbrock_ok(a: &DMatrix<f64>, e: &DMatrix<f64>, c: &DMatrix<f64>, candidates: &[Complex64]) -> bool {
    let n = a.nrows();
    let q = e.ncols();
    let p = c.nrows();
    let mut points: Vec<Complex64> = candidates.iter().copied().filter(|s| s.re >= -STABILITY_MARGIN).collect();
    points.push(Complex64::new(0.0, 0.0));
    points.iter().all(|s| {
        let mut m = DMatrix::<Complex64>::zeros(n + p, n + q);
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = Complex64::new(-a[(i, j)], 0.0);
            }
            m[(i, i)] += s;
            for j in 0..q {
                m[(i, n + j)] = Complex64::new(e[(i, j)], 0.0);
            }
        }
        for i in 0..p {
            for j in 0..n {
                m[(n + i, j)] = Complex64::new(c[(i, j)], 0.0);
            }
        }
        // rank deficiency at a repeated zero is judged against an absolute floor
        let sv: Vec<f64> = m.svd(false, false).singular_values.iter().copied().collect();
        let floor = 1e-7 * a.norm().max(1.0);
        sv.iter().filter(|&&v| v > floor).count() == n + q
    })
}

/// Synthesized observer matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UioDesign {
    pub f: DMatrix<f64>,
    pub t: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub p1: DMatrix<f64>,
    pub p2: DMatrix<f64>,
    pub h: DMatrix<f64>,
    /// System matrix the observer was built for.
    pub a: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub e: DMatrix<f64>,
    /// Poles assigned on the observable part.
    pub poles: Vec<f64>,
    /// Set when only the modes with real part above `-shift` were moved.
    pub slow_shift: Option<f64>,
    pub certificate: ExistenceCertificate,
}

/// Builds an observer for `(A, E, C)` with observable poles taken cyclically from `poles`.
pub fn synthesize(a: &DMatrix<f64>, e: &DMatrix<f64>, c: &DMatrix<f64>, poles: &[f64]) -> Result<UioDesign, UioError> {
    let certificate = check_existence(a, e, c)?;
    if certificate.rank_ce != certificate.rank_e {
        return Err(UioError::RankMismatch { rank_ce: certificate.rank_ce, rank_e: certificate.rank_e });
    }
    if !certificate.detectable {
        return Err(UioError::Undetectable { modes: certificate.unobservable_modes.clone() });
    }
    let (h, t, a1) = decoupler(a, e, c);
    let (placement, slow_shift) = conditioned_placement(&a1, c, poles)?;
    let p1 = placement.gain;
    let f = &a1 - &p1 * c;
    let p2 = &f * &h;
    let p = &p1 + &p2;
    Ok(UioDesign {
        f,
        t,
        p,
        p1,
        p2,
        h,
        a: a.clone(),
        c: c.clone(),
        e: e.clone(),
        poles: placement.placed,
        slow_shift,
        certificate,
    })
}

/// Full placement when its gain stays moderate, otherwise the largest
/// shift of [`SLOW_SHIFTS`] whose partial placement does. Moving weakly
/// observable modes far to the left takes gains that wreck the observer
/// in floating point.
fn conditioned_placement(a1: &DMatrix<f64>, c: &DMatrix<f64>, poles: &[f64]) -> Result<(Placement, Option<f64>), UioError> {
    let ceiling = GAIN_CEILING * a1.norm().max(1.0);
    let acceptable = |pl: &Placement| {
        pl.gain.norm() <= ceiling && linalg::spectral_abscissa(&(a1 - &pl.gain * c)) < -STABILITY_MARGIN
    };
    let full = place_observer(a1, c, poles)?;
    if acceptable(&full) {
        return Ok((full, None));
    }
    for shift in SLOW_SHIFTS {
        if let Ok(pl) = place_observer_partial(a1, c, poles, shift) {
            if acceptable(&pl) {
                return Ok((pl, Some(shift)));
            }
        }
    }
    Err(UioError::IllConditioned { gain: full.gain.norm() })
}

/// Max-abs residuals of the four defining identities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentityResiduals {
    pub decoupling: f64,
    pub transfer: f64,
    pub state_matrix: f64,
    pub injection: f64,
}

impl IdentityResiduals {
    pub fn max(&self) -> f64 {
        self.decoupling.max(self.transfer).max(self.state_matrix).max(self.injection)
    }
}

impl UioDesign {
    pub fn state_dim(&self) -> usize {
        self.f.nrows()
    }

    pub fn identity_residuals(&self) -> IdentityResiduals {
        let n = self.state_dim();
        let eye = DMatrix::<f64>::identity(n, n);
        let hc = &self.h * &self.c;
        IdentityResiduals {
            decoupling: linalg::max_abs(&((&hc - &eye) * &self.e)),
            transfer: linalg::max_abs(&(&self.t - (&eye - &hc))),
            state_matrix: linalg::max_abs(&(&self.f - (&self.a - &hc * &self.a - &self.p1 * &self.c))),
            injection: linalg::max_abs(&(&self.p2 - &self.f * &self.h)),
        }
    }

    /// Largest real part of `eig(F)`.
    pub fn spectral_abscissa(&self) -> f64 {
        linalg::spectral_abscissa(&self.f)
    }

    /// Observer state matching the estimate `x_hat0` for measurement `y0`.
    pub fn init_state(&self, x_hat0: &DVector<f64>, y0: &DVector<f64>) -> DVector<f64> {
        x_hat0 - &self.h * y0
    }

    /// `T w` for a known additive input `w`.
    pub fn project_known(&self, w: &DVector<f64>) -> DVector<f64> {
        &self.t * w
    }

    /// `z' = F z + T w + P y` with `tw = T w` precomputed.
    pub fn z_dot(&self, z: &DVector<f64>, tw: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        &self.f * z + tw + &self.p * y
    }

    pub fn estimate(&self, z: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        z + &self.h * y
    }

    /// Output residual `y - C x_hat`.
    pub fn residual(&self, z: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        y - &self.c * self.estimate(z, y)
    }

    /// One RK4 step with `y` and the known input held over the step.
    /// Returns the new observer state and its estimate.
    pub fn step(&self, z: &DVector<f64>, tw: &DVector<f64>, y: &DVector<f64>, dt: f64) -> (DVector<f64>, DVector<f64>) {
        let k1 = self.z_dot(z, tw, y);
        let k2 = self.z_dot(&(z + &k1 * (0.5 * dt)), tw, y);
        let k3 = self.z_dot(&(z + &k2 * (0.5 * dt)), tw, y);
        let k4 = self.z_dot(&(z + &k3 * dt), tw, y);
        let z1 = z + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        let xh = self.estimate(&z1, y);
        (z1, xh)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_passthrough() {
        let a = DMatrix::from_element(1, 1, -1.0);
        let one = DMatrix::from_element(1, 1, 1.0);
        let d = synthesize(&a, &one, &one, &[-3.0]).unwrap();
        assert!((d.h[(0, 0)] - 1.0).abs() < 1e-15);
        assert!(d.t[(0, 0)].abs() < 1e-15);
        // A1 = 0 with C = 1: the single observable pole goes to -3.
        assert!((d.f[(0, 0)] + 3.0).abs() < 1e-12);
        let y = DVector::from_element(1, 4.2);
        let (_, xh) = d.step(&DVector::zeros(1), &DVector::zeros(1), &y, 0.01);
        // P = P1 + F H = 3 - 3 = 0, so z stays at zero and x_hat = y.
        assert!(d.p[(0, 0)].abs() < 1e-12);
        assert!((xh[0] - 4.2).abs() < 1e-12);
    }

    #[test]
    fn empty_unknown_input_rejected() {
        let a = DMatrix::from_element(2, 2, 0.0);
        let c = DMatrix::identity(2, 2);
        assert_eq!(check_existence(&a, &DMatrix::zeros(2, 0), &c), Err(UioError::EmptyUnknownInput));
        assert!(matches!(check_existence(&a, &DMatrix::zeros(2, 1), &c), Err(UioError::RankDeficientE { .. })));
    }

    #[test]
    fn blind_measurement_is_rank_mismatch() {
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -2.0]);
        let e = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let c = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let cert = check_existence(&a, &e, &c).unwrap();
        assert_eq!((cert.rank_ce, cert.rank_e), (0, 1));
        assert!(!cert.is_valid());
        assert!(matches!(synthesize(&a, &e, &c, &[-10.0]), Err(UioError::RankMismatch { .. })));
    }

    #[test]
    fn placement_on_observable_chain() {
        // Triple integrator observed at the first state: fully observable.
        let a = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        let c = DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]);
        let pl = place_observer(&a, &c, &[-1.0, -2.0, -3.0]).unwrap();
        assert!(pl.unobservable_modes.is_empty());
        let mut ev: Vec<f64> = linalg::eigenvalues(&(&a - &pl.gain * &c)).iter().map(|z| z.re).collect();
        ev.sort_by(f64::total_cmp);
        for (got, want) in ev.iter().zip([-3.0, -2.0, -1.0]) {
            assert!((got - want).abs() < 1e-8, "{ev:?}");
        }
    }

    #[test]
    fn unobservable_mode_is_kept() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, -4.0]);
        let c = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let pl = place_observer(&a, &c, &[-10.0]).unwrap();
        assert_eq!(pl.unobservable_modes.len(), 1);
        assert!((pl.unobservable_modes[0].re + 4.0).abs() < 1e-12);
        let a_bad = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 0.5]);
        let e = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        assert!(matches!(synthesize(&a_bad, &e, &c, &[-10.0]), Err(UioError::Undetectable { .. })));
    }

    #[test]
    fn unstable_pole_rejected() {
        let a = DMatrix::from_element(1, 1, 0.0);
        let c = DMatrix::from_element(1, 1, 1.0);
        assert_eq!(place_observer(&a, &c, &[0.0]).unwrap_err(), UioError::UnstablePole(0.0));
        assert_eq!(place_observer(&a, &c, &[]).unwrap_err(), UioError::NoPoles);
    }

    #[test]
    fn partial_placement_leaves_fast_modes() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![-5.0, 0.5]));
        let c = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let p = place_observer_partial(&a, &c, &[-2.0], 0.45).unwrap();
        let mut ev: Vec<f64> = (&a - &p.gain * &c).complex_eigenvalues().iter().map(|z| z.re).collect();
        ev.sort_by(|x, y| x.total_cmp(y));
        assert!((ev[0] + 5.0).abs() < 1e-9 && (ev[1] + 2.0).abs() < 1e-9, "{ev:?}");
    }
}
