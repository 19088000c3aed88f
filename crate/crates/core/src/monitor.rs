//! Per-UAV banks of unknown input observers and the isolation logic.
//!
//! Host `i` measures its own state and the broadcasts of its neighbors.
//! It runs one observer per target `k` in `N_i` and one for itself, each
//! blind to an attack originating at its target. Under a single attack at
//! `k` the `k` residual stays at zero while every other one reacts.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formation::FleetModel;
use crate::linalg::{self, RANK_TOL};
use crate::uio::{self, ExistenceCertificate, UioDesign, UioError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackModel {
    /// Fault in the target's own dynamics.
    Node,
    /// Fault in the messages the target sends.
    Broadcast,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MonitorError {
    #[error("host {0} has no neighbors to monitor")]
    NoNeighbors(usize),
    #[error("host {host}, target {target}: {source}")]
    Design { host: usize, target: usize, source: UioError },
    #[error("host {host}, target {target}: no observer exists (rank CE {rank_ce}, rank E {rank_e}, detectable {detectable})")]
    Certificate { host: usize, target: usize, rank_ce: usize, rank_e: usize, detectable: bool },
    #[error("host {host}: no measurement received from node {node} (communication loss)")]
    MissingMeasurement { host: usize, node: usize },
    #[error("host {host}: measurement of node {node} has length {got}, expected {expected}")]
    MeasurementLength { host: usize, node: usize, expected: usize, got: usize },
    #[error("unknown node {0}")]
    UnknownNode(usize),
    #[error("channel {0} outside the UAV state")]
    Channel(usize),
    #[error("fault direction for target {0} vanishes")]
    NullDirection(usize),
}

/// Observer settings shared by every bank of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorConfig {
    pub attack_model: AttackModel,
    /// Observable poles of every observer, used cyclically.
    pub poles: Vec<f64>,
    /// Channel of the target's local state the attack enters.
    pub channel: usize,
    /// Pole of the host's local consistency observer.
    pub self_check_pole: f64,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        MonitorConfig { attack_model: AttackModel::Node, poles: vec![-10.0], channel: 0, self_check_pole: -10.0 }
    }
}

/// Indices of the nodes host `host_idx` measures: itself and its neighbors, ascending.
pub fn measured_nodes(fleet: &FleetModel, host_idx: usize) -> Vec<usize> {
    let mut v = fleet.graph.neighbor_indices(host_idx);
    v.push(host_idx);
    v.sort_unstable();
    v
}

/// Selection matrix reading the full local state of each node in `nodes`.
pub fn selection_matrix(fleet: &FleetModel, nodes: &[usize]) -> DMatrix<f64> {
    let n = fleet.node_dim();
    let mut c = DMatrix::zeros(nodes.len() * n, fleet.state_dim());
    for (row, &j) in nodes.iter().enumerate() {
        for s in 0..n {
            c[(row * n + s, j * n + s)] = 1.0;
        }
    }
    c
}

/// Unknown-input directions for an attack at `target_idx` as seen by `host_idx`.
///
/// * Node attack: the unit vector of the target's channel.
/// * Broadcast by a neighbor: the host sees the neighbor's state shifted by
///   `f` along the channel. In those apparent coordinates the fault enters
///   the neighbor's block along the channel and along the closed-loop image
///   of the channel.
/// * Broadcast by the host itself: the corrupted message perturbs the
///   neighbors' inputs; the direction is the feedback column of the
///   host's channel with the host's own rows removed.
pub fn unknown_input_matrix(
    fleet: &FleetModel,
    a_cl: &DMatrix<f64>,
    host_idx: usize,
    target_idx: usize,
    model: AttackModel,
    channel: usize,
) -> Result<DMatrix<f64>, MonitorError> {
    let n = fleet.node_dim();
    if channel >= n {
        return Err(MonitorError::Channel(channel));
    }
    let dim = fleet.state_dim();
    let col = target_idx * n + channel;
    let block = fleet.block(target_idx);
    let e = match model {
        AttackModel::Node => {
            let mut e = DMatrix::zeros(dim, 1);
            e[(col, 0)] = 1.0;
            e
        }
        AttackModel::Broadcast if target_idx != host_idx => {
            let mut first = DVector::zeros(dim);
            first[col] = 1.0;
            let mut second = DVector::zeros(dim);
            for r in block.clone() {
                second[r] = a_cl[(r, col)];
            }
            let both = linalg::hstack(&[first.clone(), second], dim);
            if linalg::rank(&both, RANK_TOL) == 2 {
                both
            } else {
                linalg::hstack(&[first], dim)
            }
        }
        AttackModel::Broadcast => {
            let feedback = fleet.feedback();
            let mut g = feedback.column(col).into_owned();
            for r in block {
                g[r] = 0.0;
            }
            if g.amax() == 0.0 {
                return Err(MonitorError::NullDirection(fleet.graph.node_ids()[target_idx]));
            }
            linalg::hstack(&[g], dim)
        }
    };
    Ok(e)
}

/// Observers hosted by one UAV.
#[derive(Debug, Clone)]
pub struct MonitorBank {
    pub host: usize,
    pub host_idx: usize,
    /// Target ids: neighbors ascending, then the host.
    pub targets: Vec<usize>,
    pub target_idx: Vec<usize>,
    /// Node indices read by the measurement, ascending.
    pub measured: Vec<usize>,
    pub designs: Vec<UioDesign>,
    /// `T w` per design, with `w` the formation drift.
    pub known: Vec<DVector<f64>>,
    pub model: AttackModel,
}

/// Builds the bank of host `host` over the closed loop of `fleet`.
pub fn build_bank(fleet: &FleetModel, host: usize, cfg: &MonitorConfig) -> Result<MonitorBank, MonitorError> {
    let host_idx = fleet.graph.index_of(host).map_err(|_| MonitorError::UnknownNode(host))?;
    let mut target_idx = fleet.graph.neighbor_indices(host_idx);
    if target_idx.is_empty() {
        return Err(MonitorError::NoNeighbors(host));
    }
    target_idx.push(host_idx);
    let ids = fleet.graph.node_ids();
    let targets: Vec<usize> = target_idx.iter().map(|&j| ids[j]).collect();
    let measured = measured_nodes(fleet, host_idx);
    let c = selection_matrix(fleet, &measured);
    let (a_cl, drift) = fleet.closed_loop();
    let mut designs = Vec::with_capacity(target_idx.len());
    let mut known = Vec::with_capacity(target_idx.len());
    for (&k, &kid) in target_idx.iter().zip(&targets) {
        let e = unknown_input_matrix(fleet, &a_cl, host_idx, k, cfg.attack_model, cfg.channel)?;
        let cert = uio::check_existence(&a_cl, &e, &c).map_err(|source| MonitorError::Design { host, target: kid, source })?;
        if !cert.is_valid() {
            return Err(MonitorError::Certificate {
                host,
                target: kid,
                rank_ce: cert.rank_ce,
                rank_e: cert.rank_e,
                detectable: cert.detectable,
            });
        }
        let design = uio::synthesize(&a_cl, &e, &c, &cfg.poles).map_err(|source| MonitorError::Design { host, target: kid, source })?;
        known.push(design.project_known(&drift));
        designs.push(design);
    }
    Ok(MonitorBank { host, host_idx, targets, target_idx, measured, designs, known, model: cfg.attack_model })
}

/// Existence certificates of every target of `host`, without synthesizing.
pub fn bank_certificates(fleet: &FleetModel, host: usize, cfg: &MonitorConfig) -> Result<Vec<(usize, ExistenceCertificate)>, MonitorError> {
    let host_idx = fleet.graph.index_of(host).map_err(|_| MonitorError::UnknownNode(host))?;
    let mut target_idx = fleet.graph.neighbor_indices(host_idx);
    if target_idx.is_empty() {
        return Err(MonitorError::NoNeighbors(host));
    }
    target_idx.push(host_idx);
    let c = selection_matrix(fleet, &measured_nodes(fleet, host_idx));
    let (a_cl, _) = fleet.closed_loop();
    let ids = fleet.graph.node_ids();
    target_idx
        .iter()
        .map(|&k| {
            let e = unknown_input_matrix(fleet, &a_cl, host_idx, k, cfg.attack_model, cfg.channel)?;
            let cert = uio::check_existence(&a_cl, &e, &c).map_err(|source| MonitorError::Design { host, target: ids[k], source })?;
            Ok((ids[k], cert))
        })
        .collect()
}

/// Norm of one observer's output residual at time `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualRecord {
    pub t: f64,
    pub host: usize,
    pub target: usize,
    pub norm: f64,
}

impl MonitorBank {
    pub fn node_dim(&self) -> usize {
        self.designs[0].c.nrows() / self.measured.len()
    }

    /// Stacked measurement from a map of node id to received local state.
    pub fn measurement(&self, ids: &[usize], snapshot: &BTreeMap<usize, DVector<f64>>) -> Result<DVector<f64>, MonitorError> {
        let n = self.node_dim();
        let mut y = DVector::zeros(self.measured.len() * n);
        for (row, &j) in self.measured.iter().enumerate() {
            let id = ids[j];
            let v = snapshot.get(&id).ok_or(MonitorError::MissingMeasurement { host: self.host, node: id })?;
            if v.len() != n {
                return Err(MonitorError::MeasurementLength { host: self.host, node: id, expected: n, got: v.len() });
            }
            y.rows_mut(row * n, n).copy_from(v);
        }
        Ok(y)
    }

    /// Measurement read from a full stacked state as seen by the host.
    pub fn measurement_from_view(&self, view: &DVector<f64>) -> DVector<f64> {
        let n = self.node_dim();
        let mut y = DVector::zeros(self.measured.len() * n);
        for (row, &j) in self.measured.iter().enumerate() {
            y.rows_mut(row * n, n).copy_from(&view.rows(j * n, n));
        }
        y
    }

    /// Observer states consistent with the estimate `x_hat` and measurement `y`.
    pub fn init_states(&self, x_hat: &DVector<f64>, y: &DVector<f64>) -> Vec<DVector<f64>> {
        self.designs.iter().map(|d| d.init_state(x_hat, y)).collect()
    }

    pub fn residual_norms(&self, z: &[DVector<f64>], y: &DVector<f64>) -> Vec<f64> {
        self.designs.iter().zip(z).map(|(d, zk)| d.residual(zk, y).norm()).collect()
    }

    /// Steps every observer once with the snapshot held over the step and
    /// returns the residuals after the step.
    pub fn update(
        &self,
        z: &mut [DVector<f64>],
        ids: &[usize],
        snapshot: &BTreeMap<usize, DVector<f64>>,
        t: f64,
        dt: f64,
    ) -> Result<Vec<ResidualRecord>, MonitorError> {
        let y = self.measurement(ids, snapshot)?;
        for ((d, zk), tw) in self.designs.iter().zip(z.iter_mut()).zip(&self.known) {
            *zk = d.step(zk, tw, &y, dt).0;
        }
        Ok(self
            .residual_norms(z, &y)
            .into_iter()
            .zip(&self.targets)
            .map(|(norm, &target)| ResidualRecord { t: t + dt, host: self.host, target, norm })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Decision {
    NoFault,
    Identified(usize),
    Inconclusive,
}

impl std::fmt::Display for Decision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Decision::NoFault => write!(f, "NoFault"),
            Decision::Identified(k) => write!(f, "Identified({k})"),
            Decision::Inconclusive => write!(f, "Inconclusive"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttackClass {
    NodeOrIncoming,
    OutgoingBroadcast,
    Unknown,
}

impl std::fmt::Display for AttackClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            AttackClass::NodeOrIncoming => "NodeOrIncoming",
            AttackClass::OutgoingBroadcast => "OutgoingBroadcast",
            AttackClass::Unknown => "Unknown",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub t: f64,
    pub host: usize,
    pub decision: Decision,
    pub attack_class: AttackClass,
}

/// Threshold rule over one record per target.
///
/// All residuals below their thresholds means no fault; exactly one below
/// isolates that target; anything else is inconclusive. A host that
/// isolates itself while its local consistency check passes is sending
/// corrupted broadcasts without a fault in its own dynamics.
pub fn decide(host: usize, t: f64, records: &[ResidualRecord], thresholds: &BTreeMap<usize, f64>, self_check_ok: bool) -> Verdict {
    let below: Vec<usize> = records
        .iter()
        .filter(|r| r.norm < thresholds.get(&r.target).copied().unwrap_or(f64::INFINITY))
        .map(|r| r.target)
        .collect();
    let decision = if below.len() == records.len() {
        Decision::NoFault
    } else if below.len() == 1 {
        Decision::Identified(below[0])
    } else {
        Decision::Inconclusive
    };
    let attack_class = match decision {
        Decision::Identified(k) if k == host && self_check_ok => AttackClass::OutgoingBroadcast,
        Decision::Identified(_) => AttackClass::NodeOrIncoming,
        _ => AttackClass::Unknown,
    };
    Verdict { t, host, decision, attack_class }
}

/// Thresholds per target from fault-free residual histories.
///
/// `history` holds `(t, norms)` samples with one norm per target. Samples
/// before `cutoff` are discarded; the threshold is `margin` times the
/// largest remaining norm, never below `floor`.
pub fn thresholds_from_history(
    targets: &[usize],
    history: &[(f64, Vec<f64>)],
    margin: f64,
    cutoff: f64,
    floor: f64,
) -> BTreeMap<usize, f64> {
    let mut max = vec![0.0f64; targets.len()];
    for (t, norms) in history {
        if *t < cutoff {
            continue;
        }
        for (m, v) in max.iter_mut().zip(norms) {
            *m = m.max(*v);
        }
    }
    targets.iter().zip(max).map(|(&k, m)| (k, (margin * m).max(floor))).collect()
}

/// Luenberger observer of the host's own state from its internal
/// measurement and its known control input; error dynamics `e' = -p e`.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfCheck {
    pub a: DMatrix<f64>,
    pub l: DMatrix<f64>,
}

impl SelfCheck {
    pub fn new(a_local: &DMatrix<f64>, pole: f64) -> Self {
        let n = a_local.nrows();
        let l = a_local + DMatrix::<f64>::identity(n, n) * (-pole);
        SelfCheck { a: a_local.clone(), l }
    }

    /// `x_hat' = A x_hat + B u + L (theta - x_hat)` with `bu = B u`.
    pub fn derivative(&self, x_hat: &DVector<f64>, bu: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64> {
        &self.a * x_hat + bu + &self.l * (theta - x_hat)
    }

    pub fn residual(x_hat: &DVector<f64>, theta: &DVector<f64>) -> f64 {
        (theta - x_hat).norm()
    }
}

/// Confirms an isolation once it has persisted for `hold` seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct Debouncer {
    pub hold: f64,
    candidate: Option<(usize, f64)>,
    fired: bool,
}

impl Debouncer {
    pub fn new(hold: f64) -> Self {
        Debouncer { hold, candidate: None, fired: false }
    }

    /// Feeds the decision at `t`; returns the target once per persistent streak.
    pub fn observe(&mut self, t: f64, decision: Decision) -> Option<usize> {
        match decision {
            Decision::Identified(k) => {
                match self.candidate {
                    Some((c, _)) if c == k => {}
                    _ => {
                        self.candidate = Some((k, t));
                        self.fired = false;
                    }
                }
                let (_, start) = self.candidate.expect("candidate set above");
                if !self.fired && t - start >= self.hold - 1e-9 {
                    self.fired = true;
                    return Some(k);
                }
                None
            }
            _ => {
                self.candidate = None;
                self.fired = false;
                None
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formation::{FormationSpec, Gain, UavModel};
    use crate::topology::FormationGraph;

    pub(crate) fn hexagon() -> FleetModel {
        let graph = FormationGraph::cycle(6).unwrap().with_ids((1..=6).collect()).unwrap();
        FleetModel::new(
            graph,
            UavModel::double_integrator(2),
            Gain { k_pos: -1.0, k_vel: -2.0 },
            FormationSpec::hexagon([0.0, 0.0], 2.0),
        )
        .unwrap()
    }

    fn rec(target: usize, norm: f64) -> ResidualRecord {
        ResidualRecord { t: 1.0, host: 1, target, norm }
    }

    fn th(v: f64) -> BTreeMap<usize, f64> {
        [(2, v), (6, v), (1, v)].into_iter().collect()
    }

    #[test]
    fn hexagon_host_one_targets() {
        let fleet = hexagon();
        for model in [AttackModel::Node, AttackModel::Broadcast] {
            let cfg = MonitorConfig { attack_model: model, ..Default::default() };
            let bank = build_bank(&fleet, 1, &cfg).unwrap();
            assert_eq!(bank.targets, vec![2, 6, 1]);
            assert_eq!(bank.measured, vec![0, 1, 5]);
            for d in &bank.designs {
                assert!(d.identity_residuals().max() < 1e-9);
                assert!(d.spectral_abscissa() < 0.0);
            }
        }
    }

    #[test]
    fn isolated_host_rejected() {
        let graph = FormationGraph::from_edges(3, &[(0, 1)]).unwrap();
        let fleet = FleetModel::new(
            graph,
            UavModel::double_integrator(1),
            Gain { k_pos: -1.0, k_vel: -2.0 },
            FormationSpec { offsets: vec![vec![0.0]; 3] },
        )
        .unwrap();
        assert_eq!(build_bank(&fleet, 2, &MonitorConfig::default()).unwrap_err(), MonitorError::NoNeighbors(2));
    }

    #[test]
    fn decision_rule_examples() {
        let v = decide(1, 1.0, &[rec(2, 0.001), rec(6, 0.002), rec(1, 0.0007)], &th(0.05), false);
        assert_eq!(v.decision, Decision::NoFault);
        assert_eq!(v.attack_class, AttackClass::Unknown);
        let v = decide(1, 1.0, &[rec(2, 0.001), rec(6, 0.4), rec(1, 0.3)], &th(0.05), false);
        assert_eq!(v.decision, Decision::Identified(2));
        assert_eq!(v.attack_class, AttackClass::NodeOrIncoming);
        let v = decide(1, 1.0, &[rec(2, 0.001), rec(6, 0.002), rec(1, 0.4)], &th(0.05), false);
        assert_eq!(v.decision, Decision::Inconclusive);
        let v = decide(1, 1.0, &[rec(2, 0.4), rec(6, 0.4), rec(1, 0.001)], &th(0.05), true);
        assert_eq!(v.decision, Decision::Identified(1));
        assert_eq!(v.attack_class, AttackClass::OutgoingBroadcast);
    }

    #[test]
    fn decision_truth_table_is_order_free() {
        for mask in 0..8u32 {
            let recs: Vec<_> = [2, 6, 1]
                .iter()
                .enumerate()
                .map(|(b, &k)| rec(k, if mask & (1 << b) != 0 { 0.001 } else { 1.0 }))
                .collect();
            let below = mask.count_ones();
            let expected = match below {
                3 => Decision::NoFault,
                1 => Decision::Identified([2, 6, 1][mask.trailing_zeros() as usize]),
                _ => Decision::Inconclusive,
            };
            let mut rev = recs.clone();
            rev.reverse();
            assert_eq!(decide(1, 0.0, &recs, &th(0.05), false).decision, expected);
            assert_eq!(decide(1, 0.0, &rev, &th(0.05), false).decision, expected);
        }
    }

    #[test]
    fn threshold_calibration_rules() {
        let hist = vec![(0.5, vec![9.0, 9.0]), (1.5, vec![0.2, 0.0]), (2.0, vec![0.1, 0.0])];
        let t = thresholds_from_history(&[2, 6], &hist, 3.0, 1.0, 1e-6);
        assert!((t[&2] - 0.6).abs() < 1e-15);
        assert_eq!(t[&6], 1e-6);
        let t1 = thresholds_from_history(&[2, 6], &hist, 1.0, 1.0, 1e-6);
        assert_eq!(t1[&2], 0.2);
    }

    #[test]
    fn debounce_requires_persistence() {
        let mut d = Debouncer::new(0.2);
        let mut fired = Vec::new();
        for i in 0..50 {
            let t = i as f64 * 0.01;
            let dec = if (10..15).contains(&i) || i >= 20 { Decision::Identified(2) } else { Decision::NoFault };
            if let Some(k) = d.observe(t, dec) {
                fired.push((i, k));
            }
        }
        assert_eq!(fired, vec![(40, 2)]);
    }

    #[test]
    fn measurement_requires_every_neighbor() {
        let fleet = hexagon();
        let bank = build_bank(&fleet, 1, &MonitorConfig::default()).unwrap();
        let mut snap = BTreeMap::new();
        snap.insert(1, DVector::zeros(4));
        snap.insert(2, DVector::zeros(4));
        let mut z = bank.init_states(&DVector::zeros(24), &DVector::zeros(12));
        let err = bank.update(&mut z, fleet.graph.node_ids(), &snap, 0.0, 0.01).unwrap_err();
        assert_eq!(err, MonitorError::MissingMeasurement { host: 1, node: 6 });
        snap.insert(6, DVector::zeros(4));
        let recs = bank.update(&mut z, fleet.graph.node_ids(), &snap, 0.0, 0.01).unwrap();
        assert_eq!(recs.len(), 3);
        assert!(recs.iter().all(|r| r.norm >= 0.0));
    }
}
