//! Second-order UAV dynamics, formation offsets and the consensus control law.
//!
//! Each UAV moves in `d` spatial dimensions with state ordered per axis as
//! `(position, velocity)`, so a planar UAV has state `[x, vx, y, vy]`.
//! The consensus law averages the offset differences over the neighbors:
//!
//! ```text
//! u_i = K_i / |N_i| * sum_{j in N_i} [(x_i - h_i) - (x_j - h_j)]
//! ```
//!
//! Stacked over the fleet this is `x' = A x + B K (Ln (x) I_n)(x - h)` with
//! `Ln = D^-1 L` the degree-normalized Laplacian.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::topology::{FormationGraph, TopologyError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormationError {
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("node {0} has no neighbors; consensus input is undefined")]
    IsolatedNode(usize),
    #[error("expected {expected} formation offsets, got {got}")]
    OffsetCount { expected: usize, got: usize },
    #[error("offset of node index {index} has dimension {got}, expected {expected}")]
    OffsetDimension { index: usize, expected: usize, got: usize },
    #[error("state vector has length {got}, expected {expected}")]
    StateLength { expected: usize, got: usize },
    #[error("spatial dimension must be positive")]
    ZeroDimension,
    #[error("alpha/beta need one entry per axis ({0})")]
    AxisParameters(usize),
    #[error("Laplacian eigenvalue list needs at least one positive entry")]
    NoPositiveEigenvalue,
    #[error("no stabilizing gain found; eigenvalue {lambda} keeps max real part {max_real}")]
    NoStabilizingGain { lambda: f64, max_real: f64 },
}

/// Per-UAV linear model: `A_i = diag([[0,1],[alpha_j, beta_j]])`, `B_i = I_d (x) [0;1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UavModel {
    pub spatial_dim: usize,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl UavModel {
    /// Pure double integrator in `d` dimensions.
    pub fn double_integrator(spatial_dim: usize) -> Self {
        UavModel { spatial_dim, alpha: vec![0.0; spatial_dim], beta: vec![0.0; spatial_dim] }
    }

    pub fn validate(&self) -> Result<(), FormationError> {
        if self.spatial_dim == 0 {
            return Err(FormationError::ZeroDimension);
        }
        if self.alpha.len() != self.spatial_dim || self.beta.len() != self.spatial_dim {
            return Err(FormationError::AxisParameters(self.spatial_dim));
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        2 * self.spatial_dim
    }

    pub fn a(&self) -> DMatrix<f64> {
        let n = self.state_dim();
        let mut a = DMatrix::zeros(n, n);
        for j in 0..self.spatial_dim {
            a[(2 * j, 2 * j + 1)] = 1.0;
            a[(2 * j + 1, 2 * j)] = self.alpha[j];
            a[(2 * j + 1, 2 * j + 1)] = self.beta[j];
        }
        a
    }

    pub fn b(&self) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(self.state_dim(), self.spatial_dim);
        for j in 0..self.spatial_dim {
            b[(2 * j + 1, j)] = 1.0;
        }
        b
    }

    /// Local observation matrix; the full local state is available.
    pub fn c(&self) -> DMatrix<f64> {
        DMatrix::identity(self.state_dim(), self.state_dim())
    }

    /// State indices of the position coordinates.
    pub fn position_indices(&self) -> Vec<usize> {
        (0..self.spatial_dim).map(|j| 2 * j).collect()
    }
}

/// Feedback gain `K_i = I_d (x) [k_pos, k_vel]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gain {
    pub k_pos: f64,
    pub k_vel: f64,
}

impl Gain {
    pub fn matrix(&self, spatial_dim: usize) -> DMatrix<f64> {
        let mut k = DMatrix::zeros(spatial_dim, 2 * spatial_dim);
        for j in 0..spatial_dim {
            k[(j, 2 * j)] = self.k_pos;
            k[(j, 2 * j + 1)] = self.k_vel;
        }
        k
    }
}

/// Stability certificate of a gain against a list of Laplacian eigenvalues.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainCertificate {
    pub gain: Gain,
    /// Largest real part of `eig(A_i + lambda B_i K_i)` over the nonzero eigenvalues.
    pub max_real_part: f64,
    /// Eigenvalue attaining `max_real_part`.
    pub worst_lambda: f64,
    pub stable: bool,
}

/// Zero tolerance for the consensus eigenvalue.
const ZERO_EIG: f64 = 1e-9;

/// Eigenvalues of `A_i + lambda B_i K_i`, from the per-axis 2x2 companion blocks.
///
/// Each axis contributes the roots of `s^2 - (beta + lambda k_vel) s - (alpha + lambda k_pos)`.
pub fn block_eigenvalues(uav: &UavModel, gain: &Gain, lambda: f64) -> Vec<Complex64> {
    let mut out = Vec::with_capacity(uav.state_dim());
    for j in 0..uav.spatial_dim {
        let b = -(uav.beta[j] + lambda * gain.k_vel);
        let c = -(uav.alpha[j] + lambda * gain.k_pos);
        let disc = b * b - 4.0 * c;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            // numerically stable pair
            let sgn = if b >= 0.0 { 1.0 } else { -1.0 };
            let q = -0.5 * (b + sgn * sq);
            let (r1, r2) = if q != 0.0 { (q, c / q) } else { (0.0, -b) };
            out.push(Complex64::new(r1, 0.0));
            out.push(Complex64::new(r2, 0.0));
        } else {
            let sq = (-disc).sqrt();
            out.push(Complex64::new(-0.5 * b, 0.5 * sq));
            out.push(Complex64::new(-0.5 * b, -0.5 * sq));
        }
    }
    out
}

/// Certifies `gain` against every nonzero eigenvalue in `laplacian_eigs`.
pub fn certify_gain(uav: &UavModel, gain: Gain, laplacian_eigs: &[f64]) -> GainCertificate {
    let mut max_real = f64::NEG_INFINITY;
    let mut worst = f64::NAN;
    for &lambda in laplacian_eigs.iter().filter(|l| l.abs() > ZERO_EIG) {
        let m = block_eigenvalues(uav, &gain, lambda).iter().map(|e| e.re).fold(f64::NEG_INFINITY, f64::max);
        if m > max_real {
            max_real = m;
            worst = lambda;
        }
    }
    GainCertificate { gain, max_real_part: max_real, worst_lambda: worst, stable: max_real < 0.0 }
}

/// Bounds of the gain search box, both coordinates.
const GAIN_LO: f64 = -10.0;
const GAIN_HI: f64 = -0.1;
const GRID: usize = 25;

/// Finds `K_i = I_d (x) [k_pos, k_vel]` stabilizing `A_i + lambda B_i K_i`
/// for every nonzero eigenvalue.
///
/// A deterministic grid over `[-10, -0.1]^2` picks the gain with the smallest
/// spectral abscissa; each coordinate is then refined by interval halving.
/// The zero eigenvalue (rigid consensus motion) is exempt.
pub fn design_gain(uav: &UavModel, laplacian_eigs: &[f64]) -> Result<GainCertificate, FormationError> {
    uav.validate()?;
    if !laplacian_eigs.iter().any(|&l| l > ZERO_EIG) {
        return Err(FormationError::NoPositiveEigenvalue);
    }
    let score = |kp: f64, kv: f64| certify_gain(uav, Gain { k_pos: kp, k_vel: kv }, laplacian_eigs).max_real_part;
    let grid: Vec<f64> = (0..GRID)
        .map(|i| GAIN_LO + (GAIN_HI - GAIN_LO) * i as f64 / (GRID - 1) as f64)
        .collect();
    let mut best = (grid[0], grid[0], f64::INFINITY);
    for &kp in &grid {
        for &kv in &grid {
            let s = score(kp, kv);
            if s < best.2 {
                best = (kp, kv, s);
            }
        }
    }
    let (mut kp, mut kv, mut s) = best;
    let mut step = (GAIN_HI - GAIN_LO) / (GRID - 1) as f64;
    for _ in 0..40 {
        step *= 0.5;
        for (dkp, dkv) in [(step, 0.0), (-step, 0.0), (0.0, step), (0.0, -step)] {
            let (np, nv) = ((kp + dkp).clamp(GAIN_LO, GAIN_HI), (kv + dkv).clamp(GAIN_LO, GAIN_HI));
            let ns = score(np, nv);
            if ns < s {
                kp = np;
                kv = nv;
                s = ns;
            }
        }
    }
    let cert = certify_gain(uav, Gain { k_pos: kp, k_vel: kv }, laplacian_eigs);
    if !cert.stable {
        return Err(FormationError::NoStabilizingGain { lambda: cert.worst_lambda, max_real: cert.max_real_part });
    }
    Ok(cert)
}

/// Desired planar (or d-dimensional) offsets `h~_i`, one per UAV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormationSpec {
    pub offsets: Vec<Vec<f64>>,
}

impl FormationSpec {
    /// Regular hexagon of the given radius: vertices at angles 0, -60, ..., -300
    /// degrees, i.e. (2,0), (1,-1.73), (-1,-1.73), (-2,0), (-1,1.73), (1,1.73)
    /// for radius 2 about the origin.
    pub fn hexagon(center: [f64; 2], radius: f64) -> Self {
        Self::polygon(6, center, radius)
    }

    pub fn polygon(sides: usize, center: [f64; 2], radius: f64) -> Self {
        let offsets = (0..sides)
            .map(|i| {
                let ang = -2.0 * std::f64::consts::PI * i as f64 / sides as f64;
                vec![center[0] + radius * ang.cos(), center[1] + radius * ang.sin()]
            })
            .collect();
        FormationSpec { offsets }
    }

    /// Stacked `h = [h_1; ...; h_N]` with `h_i = h~_i (x) [1, 0]`.
    pub fn lifted(&self) -> DVector<f64> {
        let d = self.offsets.first().map_or(0, |o| o.len());
        let mut h = DVector::zeros(self.offsets.len() * 2 * d);
        for (i, o) in self.offsets.iter().enumerate() {
            for (j, &v) in o.iter().enumerate() {
                h[i * 2 * d + 2 * j] = v;
            }
        }
        h
    }
}

/// Homogeneous fleet: one graph, one UAV model, one gain, one formation.
#[derive(Debug, Clone, PartialEq)]
pub struct FleetModel {
    pub graph: FormationGraph,
    pub uav: UavModel,
    pub gain: Gain,
    pub formation: FormationSpec,
}

impl FleetModel {
    pub fn new(graph: FormationGraph, uav: UavModel, gain: Gain, formation: FormationSpec) -> Result<Self, FormationError> {
        uav.validate()?;
        if formation.offsets.len() != graph.n_nodes() {
            return Err(FormationError::OffsetCount { expected: graph.n_nodes(), got: formation.offsets.len() });
        }
        for (index, o) in formation.offsets.iter().enumerate() {
            if o.len() != uav.spatial_dim {
                return Err(FormationError::OffsetDimension { index, expected: uav.spatial_dim, got: o.len() });
            }
        }
        Ok(FleetModel { graph, uav, gain, formation })
    }

    pub fn n_nodes(&self) -> usize {
        self.graph.n_nodes()
    }

    /// Per-UAV state dimension `n = 2d`.
    pub fn node_dim(&self) -> usize {
        self.uav.state_dim()
    }

    pub fn state_dim(&self) -> usize {
        self.n_nodes() * self.node_dim()
    }

    /// Index range of node-index `i` inside the stacked state.
    pub fn block(&self, i: usize) -> std::ops::Range<usize> {
        let n = self.node_dim();
        i * n..(i + 1) * n
    }

    /// `A = I_N (x) A_i`.
    pub fn a(&self) -> DMatrix<f64> {
        DMatrix::<f64>::identity(self.n_nodes(), self.n_nodes()).kronecker(&self.uav.a())
    }

    /// `B = I_N (x) B_i`.
    pub fn b(&self) -> DMatrix<f64> {
        DMatrix::<f64>::identity(self.n_nodes(), self.n_nodes()).kronecker(&self.uav.b())
    }

    /// `K = I_N (x) K_i`.
    pub fn k(&self) -> DMatrix<f64> {
        DMatrix::<f64>::identity(self.n_nodes(), self.n_nodes()).kronecker(&self.gain.matrix(self.uav.spatial_dim))
    }

    /// `L = (D^-1 L_G) (x) I_n`.
    pub fn coupling(&self) -> DMatrix<f64> {
        let n = self.node_dim();
        self.graph.normalized_laplacian().kronecker(&DMatrix::<f64>::identity(n, n))
    }

    /// `B K L`, the map from stacked offsets `x - h` to state derivatives.
    ///
    /// Each neighbor block is `BK / d_i` rounded so that `d_i` copies sum
    /// exactly to the diagonal block; block rows then sum to exactly zero and
    /// the consensus mode stays at the origin in floating point.
    pub fn feedback(&self) -> DMatrix<f64> {
        let n = self.node_dim();
        let bk = self.uav.b() * self.gain.matrix(self.uav.spatial_dim);
        let mut out = DMatrix::zeros(self.state_dim(), self.state_dim());
        for i in 0..self.n_nodes() {
            let neighbors = self.graph.neighbor_indices(i);
            let d = neighbors.len();
            if d == 0 {
                continue;
            }
            let share = bk.map(|v| exact_share(v, d));
            for &j in &neighbors {
                let mut blk = out.view_mut((i * n, j * n), (n, n));
                blk -= &share;
            }
            out.view_mut((i * n, i * n), (n, n)).copy_from(&(&share * d as f64));
        }
        out
    }

    /// Closed loop `(A + BKL, -BKL h)`.
    pub fn closed_loop(&self) -> (DMatrix<f64>, DVector<f64>) {
        let bkl = self.feedback();
        let drift = -(&bkl * self.formation.lifted());
        (self.a() + bkl, drift)
    }

    /// Consensus input of the node labelled `id` for stacked state `x`.
    pub fn control_input(&self, x: &DVector<f64>, id: usize) -> Result<DVector<f64>, FormationError> {
        if x.len() != self.state_dim() {
            return Err(FormationError::StateLength { expected: self.state_dim(), got: x.len() });
        }
        let i = self.graph.index_of(id)?;
        let h = self.formation.lifted();
        let neighbors = self.graph.neighbor_indices(i);
        if neighbors.is_empty() {
            return Err(FormationError::IsolatedNode(id));
        }
        let own = x.rows(self.block(i).start, self.node_dim()) - h.rows(self.block(i).start, self.node_dim());
        let others: Vec<DVector<f64>> = neighbors
            .iter()
            .map(|&j| x.rows(self.block(j).start, self.node_dim()) - h.rows(self.block(j).start, self.node_dim()))
            .collect();
        Ok(consensus_input(&self.gain.matrix(self.uav.spatial_dim), &own, &others))
    }

    /// Formation error of every node: `x_pos,i - h~_i - mean_j(x_pos,j - h~_j)`.
    pub fn formation_error(&self, x: &DVector<f64>) -> Vec<DVector<f64>> {
        let d = self.uav.spatial_dim;
        let n = self.n_nodes();
        let raw: Vec<DVector<f64>> = (0..n)
            .map(|i| {
                DVector::from_fn(d, |j, _| x[i * 2 * d + 2 * j] - self.formation.offsets[i][j])
            })
            .collect();
        let mean = raw.iter().fold(DVector::zeros(d), |acc, r| acc + r) / n as f64;
        raw.into_iter().map(|r| r - &mean).collect()
    }

    /// Largest Euclidean norm of the per-node formation error.
    pub fn max_formation_error(&self, x: &DVector<f64>) -> f64 {
        self.formation_error(x).iter().map(|e| e.norm()).fold(0.0, f64::max)
    }

    pub fn certificate(&self) -> GainCertificate {
        certify_gain(&self.uav, self.gain, &self.graph.normalized_spectrum())
    }
}

/// `K / |N| * sum_j (own - other_j)`, with every argument already offset by `h`.
pub fn consensus_input(gain: &DMatrix<f64>, own: &DVector<f64>, others: &[DVector<f64>]) -> DVector<f64> {
    let mut acc = DVector::zeros(own.len());
    for o in others {
        acc += own - o;
    }
    gain * acc / others.len() as f64
}

/// `v / d` rounded to a precision at which `d * share` is exact.
fn exact_share(v: f64, d: usize) -> f64 {
    let q = v / d as f64;
    if q == 0.0 || !q.is_finite() {
        return q;
    }
    let spare = (usize::BITS - d.leading_zeros()) as i32;
    let ulp = 2f64.powi(q.abs().log2().floor() as i32 - (52 - spare));
    (q / ulp).round() * ulp
}
