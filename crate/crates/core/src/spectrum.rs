//! Eigenvalues of small dense real matrices in double-double arithmetic.
//!
//! Consensus closed loops built from double integrators carry a defective
//! eigenvalue at zero (one Jordan block per spatial axis). A backward-stable
//! solver in plain `f64` perturbs such eigenvalues by roughly `sqrt(eps)`,
//! about 1e-8, so spectrum comparisons at that tolerance need more working
//! precision. This module runs balancing, Hessenberg reduction and the
//! Francis double-shift QR iteration over a ~106-bit float.

use std::cmp::Ordering;
use std::ops::{Add, Div, Mul, Neg, Sub};

use nalgebra::DMatrix;
use num_complex::Complex64;

/// Unevaluated sum `hi + lo` with `|lo| <= ulp(hi) / 2`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DoubleDouble {
    hi: f64,
    lo: f64,
}

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

#[inline]
fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl DoubleDouble {
    pub const ZERO: Self = Self { hi: 0.0, lo: 0.0 };

    pub fn new(v: f64) -> Self {
        Self { hi: v, lo: 0.0 }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    pub fn abs(self) -> Self {
        if self.hi < 0.0 || (self.hi == 0.0 && self.lo < 0.0) {
            -self
        } else {
            self
        }
    }

    pub fn sqrt(self) -> Self {
        if self.hi <= 0.0 {
            return Self::ZERO;
        }
        let y = Self::new(self.hi.sqrt());
        y + (self - y * y) / (y * Self::new(2.0))
    }
}

impl Add for DoubleDouble {
    type Output = Self;
    fn add(self, b: Self) -> Self {
        let (s, e) = two_sum(self.hi, b.hi);
        let (t, f) = two_sum(self.lo, b.lo);
        let (s, e) = quick_two_sum(s, e + t);
        let (hi, lo) = quick_two_sum(s, e + f);
        Self { hi, lo }
    }
}

impl Neg for DoubleDouble {
    type Output = Self;
    fn neg(self) -> Self {
        Self { hi: -self.hi, lo: -self.lo }
    }
}

impl Sub for DoubleDouble {
    type Output = Self;
    fn sub(self, b: Self) -> Self {
        self + (-b)
    }
}

impl Mul for DoubleDouble {
    type Output = Self;
    fn mul(self, b: Self) -> Self {
        let (p, e) = two_prod(self.hi, b.hi);
        let (hi, lo) = quick_two_sum(p, e + (self.hi * b.lo + self.lo * b.hi));
        Self { hi, lo }
    }
}

impl Div for DoubleDouble {
    type Output = Self;
    fn div(self, b: Self) -> Self {
        let q1 = self.hi / b.hi;
        let r = self - b * Self::new(q1);
        let q2 = r.hi / b.hi;
        let r = r - b * Self::new(q2);
        let q3 = r.hi / b.hi;
        let (hi, lo) = quick_two_sum(q1, q2);
        Self { hi, lo } + Self::new(q3)
    }
}

impl PartialOrd for DoubleDouble {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match self.hi.partial_cmp(&other.hi) {
            Some(Ordering::Equal) => self.lo.partial_cmp(&other.lo),
            o => o,
        }
    }
}

type Dd = DoubleDouble;

fn dd(v: f64) -> Dd {
    Dd::new(v)
}

fn sign(a: Dd, b: Dd) -> Dd {
    if b >= Dd::ZERO {
        a.abs()
    } else {
        -a.abs()
    }
}

/// Relative precision of the working type.
const DD_EPS: f64 = 1e-31;

/// Error raised when the QR iteration fails to deflate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("QR iteration did not converge for a {0}x{0} matrix")]
pub struct NoConvergence(pub usize);

/// All eigenvalues of the square matrix `m`, sorted by (real, imaginary).
pub fn eigenvalues_precise(m: &DMatrix<f64>) -> Result<Vec<Complex64>, NoConvergence> {
    assert!(m.is_square(), "eigenvalues need a square matrix");
    let n = m.nrows();
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut a = m.clone();
    balance(&mut a);
    // 1-based storage mirrors the classic formulation of the algorithm.
    let mut h = vec![vec![Dd::ZERO; n + 1]; n + 1];
    for i in 0..n {
        for j in 0..n {
            h[i + 1][j + 1] = dd(a[(i, j)]);
        }
    }
    hessenberg(&mut h, n);
    for i in 1..=n {
        for j in 1..i.saturating_sub(1) {
            h[i][j] = Dd::ZERO;
        }
    }
    let mut out = francis_qr(&mut h, n)?;
    out.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    Ok(out)
}

/// Diagonal similarity with powers of two (exact in floating point).
fn balance(a: &mut DMatrix<f64>) {
    const RADIX: f64 = 2.0;
    let n = a.nrows();
    let sqrdx = RADIX * RADIX;
    let mut done = false;
    while !done {
        done = true;
        for i in 0..n {
            let mut r = 0.0;
            let mut c = 0.0;
            for j in 0..n {
                if j != i {
                    c += a[(j, i)].abs();
                    r += a[(i, j)].abs();
                }
            }
            if c != 0.0 && r != 0.0 {
                let mut g = r / RADIX;
                let mut f = 1.0;
                let s = c + r;
                while c < g {
                    f *= RADIX;
                    c *= sqrdx;
                }
                g = r * RADIX;
                while c > g {
                    f /= RADIX;
                    c /= sqrdx;
                }
                if (c + r) / f < 0.95 * s {
                    done = false;
                    let g = 1.0 / f;
                    for j in 0..n {
                        a[(i, j)] *= g;
                    }
                    for j in 0..n {
                        a[(j, i)] *= f;
                    }
                }
            }
        }
    }
}

/// Reduction to upper Hessenberg form by stabilized elementary similarities.
fn hessenberg(a: &mut [Vec<Dd>], n: usize) {
    for m in 2..n {
        let mut x = Dd::ZERO;
        let mut i = m;
        for j in m..=n {
            if a[j][m - 1].abs() > x.abs() {
                x = a[j][m - 1];
                i = j;
            }
        }
        if i != m {
            for j in (m - 1)..=n {
                let t = a[i][j];
                a[i][j] = a[m][j];
                a[m][j] = t;
            }
            for row in a.iter_mut().take(n + 1).skip(1) {
                row.swap(i, m);
            }
        }
        if x != Dd::ZERO {
            for i in (m + 1)..=n {
                let mut y = a[i][m - 1];
                if y != Dd::ZERO {
                    y = y / x;
                    a[i][m - 1] = y;
                    for j in m..=n {
                        let t = a[m][j];
                        a[i][j] = a[i][j] - y * t;
                    }
                    for row in a.iter_mut().take(n + 1).skip(1) {
                        let t = row[i];
                        row[m] = row[m] + y * t;
                    }
                }
            }
        }
    }
}

fn negligible(small: Dd, reference: Dd) -> bool {
    small.to_f64().abs() <= DD_EPS * reference.to_f64().abs()
}

fn francis_qr(a: &mut [Vec<Dd>], n: usize) -> Result<Vec<Complex64>, NoConvergence> {
    let mut wr = vec![Dd::ZERO; n + 1];
    let mut wi = vec![Dd::ZERO; n + 1];
    let mut anorm = Dd::ZERO;
    for i in 1..=n {
        for j in i.saturating_sub(1).max(1)..=n {
            anorm = anorm + a[i][j].abs();
        }
    }
    let mut nn = n as isize;
    let mut t = Dd::ZERO;
    let (mut p, mut q, mut r): (Dd, Dd, Dd);
    let (mut x, mut y, mut z, mut w);
    while nn >= 1 {
        let mut its = 0;
        loop {
            let nu = nn as usize;
            let mut l = 1usize;
            let mut ll = nu;
            while ll >= 2 {
                let mut s = a[ll - 1][ll - 1].abs() + a[ll][ll].abs();
                if s == Dd::ZERO {
                    s = anorm;
                }
                if negligible(a[ll][ll - 1], s) {
                    a[ll][ll - 1] = Dd::ZERO;
                    l = ll;
                    break;
                }
                ll -= 1;
            }
            x = a[nu][nu];
            if l == nu {
                wr[nu] = x + t;
                wi[nu] = Dd::ZERO;
                nn -= 1;
                break;
            }
            y = a[nu - 1][nu - 1];
            w = a[nu][nu - 1] * a[nu - 1][nu];
            if l == nu - 1 {
                p = (y - x) * dd(0.5);
                q = p * p + w;
                z = q.abs().sqrt();
                x = x + t;
                if q >= Dd::ZERO {
                    z = p + sign(z, p);
                    wr[nu - 1] = x + z;
                    wr[nu] = x + z;
                    if z != Dd::ZERO {
                        wr[nu] = x - w / z;
                    }
                    wi[nu - 1] = Dd::ZERO;
                    wi[nu] = Dd::ZERO;
                } else {
                    wr[nu - 1] = x + p;
                    wr[nu] = x + p;
                    wi[nu - 1] = -z;
                    wi[nu] = z;
                }
                nn -= 2;
                break;
            }
            if its == 90 {
                return Err(NoConvergence(n));
            }
            if its % 10 == 0 && its > 0 {
                // exceptional shift
                t = t + x;
                for i in 1..=nu {
                    a[i][i] = a[i][i] - x;
                }
                let s = a[nu][nu - 1].abs() + a[nu - 1][nu - 2].abs();
                x = s * dd(0.75);
                y = x;
                w = dd(-0.4375) * s * s;
            }
            its += 1;
            let mut m = nu - 2;
            loop {
                z = a[m][m];
                r = x - z;
                let s = y - z;
                p = (r * s - w) / a[m + 1][m] + a[m][m + 1];
                q = a[m + 1][m + 1] - z - r - s;
                r = a[m + 2][m + 1];
                let s = p.abs() + q.abs() + r.abs();
                p = p / s;
                q = q / s;
                r = r / s;
                if m == l {
                    break;
                }
                let u = a[m][m - 1].abs() * (q.abs() + r.abs());
                let v = p.abs() * (a[m - 1][m - 1].abs() + z.abs() + a[m + 1][m + 1].abs());
                if negligible(u, v) {
                    break;
                }
                m -= 1;
            }
            for i in (m + 2)..=nu {
                a[i][i - 2] = Dd::ZERO;
                if i != m + 2 {
                    a[i][i - 3] = Dd::ZERO;
                }
            }
            let mut k = m;
            while k < nu {
                if k != m {
                    p = a[k][k - 1];
                    q = a[k + 1][k - 1];
                    r = Dd::ZERO;
                    if k != nu - 1 {
                        r = a[k + 2][k - 1];
                    }
                    x = p.abs() + q.abs() + r.abs();
                    if x != Dd::ZERO {
                        p = p / x;
                        q = q / x;
                        r = r / x;
                    }
                }
                let s = sign((p * p + q * q + r * r).sqrt(), p);
                if s != Dd::ZERO {
                    if k == m {
                        if l != m {
                            a[k][k - 1] = -a[k][k - 1];
                        }
                    } else {
                        a[k][k - 1] = -s * x;
                    }
                    p = p + s;
                    x = p / s;
                    y = q / s;
                    z = r / s;
                    q = q / p;
                    r = r / p;
                    for j in k..=nu {
                        p = a[k][j] + q * a[k + 1][j];
                        if k != nu - 1 {
                            p = p + r * a[k + 2][j];
                            a[k + 2][j] = a[k + 2][j] - p * z;
                        }
                        a[k + 1][j] = a[k + 1][j] - p * y;
                        a[k][j] = a[k][j] - p * x;
                    }
                    let mmin = if nu < k + 3 { nu } else { k + 3 };
                    for i in l..=mmin {
                        p = x * a[i][k] + y * a[i][k + 1];
                        if k != nu - 1 {
                            p = p + z * a[i][k + 2];
                            a[i][k + 2] = a[i][k + 2] - p * r;
                        }
                        a[i][k + 1] = a[i][k + 1] - p * q;
                        a[i][k] = a[i][k] - p;
                    }
                }
                k += 1;
            }
            if (l as isize) >= nn - 1 {
                break;
            }
        }
    }
    Ok((1..=n)
        .map(|i| Complex64::new(wr[i].to_f64(), wi[i].to_f64()))
        .collect())
}

/// Greedy bipartite matching of two eigenvalue multisets; returns the largest
/// pairwise distance, or `None` when the lengths differ.
pub fn max_matching_distance(a: &[Complex64], b: &[Complex64]) -> Option<f64> {
    if a.len() != b.len() {
        return None;
    }
    let mut used = vec![false; b.len()];
    let mut worst: f64 = 0.0;
    for x in a {
        let (idx, dist) = b
            .iter()
            .enumerate()
            .filter(|(i, _)| !used[*i])
            .map(|(i, y)| (i, (x - y).norm()))
            .min_by(|p, q| p.1.total_cmp(&q.1))?;
        used[idx] = true;
        worst = worst.max(dist);
    }
    Some(worst)
}
