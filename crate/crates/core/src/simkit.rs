//! Fixed-step simulation of the fleet, its attackers, monitors and recovery.
//!
//! The plant, every observer and every local consistency check are
//! integrated together as one linear system with the fault value held over
//! the step. Since each observer's error `T x - z` obeys `e' = F e` for
//! that joint system, a polynomial integrator such as RK4 keeps decoupled
//! residuals at round-off level.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attack::{AttackError, AttackKind, AttackScenario, FaultSource};
use crate::formation::{FleetModel, Gain};
use crate::monitor::{self, AttackClass, Debouncer, Decision, MonitorBank, MonitorConfig, MonitorError, ResidualRecord, SelfCheck, Verdict};
use crate::recovery::{self, RecoveryError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Monitor(#[from] MonitorError),
    #[error(transparent)]
    Recovery(#[from] RecoveryError),
    #[error("state norm {norm:e} exceeded the divergence bound at t = {t}")]
    Divergence { t: f64, norm: f64 },
    #[error("calibration run of {duration} s is shorter than the {cutoff} s transient cutoff")]
    CalibrationTooShort { duration: f64, cutoff: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    Rk4,
    Euler,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObserverInit {
    /// Observers start from the true state.
    Exact,
    /// Observers start from the measurement, unmeasured states at zero.
    Measured,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialState {
    /// Stacked state vector.
    Given(Vec<f64>),
    /// Positions uniform in `[-half_width, half_width]` per axis, zero velocity.
    RandomBox { half_width: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdConfig {
    pub margin: f64,
    pub transient_cutoff: f64,
    pub floor: f64,
    pub calibration_duration: f64,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        ThresholdConfig { margin: 3.0, transient_cutoff: 1.0, floor: 1e-6, calibration_duration: 5.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    pub duration: f64,
    pub integrator: Integrator,
    pub initial_state: InitialState,
    pub seed: u64,
    pub observer_init: ObserverInit,
    pub removal: bool,
    /// Verdicts start after this time; `None` means none for exact observer
    /// initialization and the transient cutoff otherwise.
    pub warmup: Option<f64>,
    pub debounce: f64,
    pub thresholds: ThresholdConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt: 0.01,
            duration: 20.0,
            integrator: Integrator::Rk4,
            initial_state: InitialState::RandomBox { half_width: 5.0 },
            seed: 0,
            observer_init: ObserverInit::Exact,
            removal: false,
            warmup: None,
            debounce: 0.2,
            thresholds: ThresholdConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(SimError::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.duration >= self.dt) {
            return Err(SimError::Config(format!("duration {} must be at least dt {}", self.duration, self.dt)));
        }
        if self.debounce < 0.0 {
            return Err(SimError::Config("debounce must be nonnegative".into()));
        }
        let th = &self.thresholds;
        if !(th.margin > 0.0 && th.floor > 0.0 && th.transient_cutoff >= 0.0) {
            return Err(SimError::Config("threshold margin and floor must be positive".into()));
        }
        if let InitialState::RandomBox { half_width } = self.initial_state {
            if !(half_width >= 0.0 && half_width.is_finite()) {
                return Err(SimError::Config("random box half width must be nonnegative".into()));
            }
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.duration / self.dt).round() as usize
    }

    pub fn effective_warmup(&self) -> f64 {
        self.warmup.unwrap_or(match self.observer_init {
            ObserverInit::Exact => 0.0,
            ObserverInit::Measured => self.thresholds.transient_cutoff,
        })
    }

    /// Initial stacked state for `fleet`.
    pub fn initial_vector(&self, fleet: &FleetModel) -> Result<DVector<f64>, SimError> {
        match &self.initial_state {
            InitialState::Given(v) => {
                if v.len() != fleet.state_dim() {
                    return Err(SimError::Config(format!("initial state has {} entries, expected {}", v.len(), fleet.state_dim())));
                }
                Ok(DVector::from_column_slice(v))
            }
            InitialState::RandomBox { half_width } => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                let d = fleet.uav.spatial_dim;
                let mut x = DVector::zeros(fleet.state_dim());
                for i in 0..fleet.n_nodes() {
                    for j in 0..d {
                        x[i * 2 * d + 2 * j] = if *half_width > 0.0 { rng.random_range(-half_width..=*half_width) } else { 0.0 };
                    }
                }
                Ok(x)
            }
        }
    }
}

/// Thresholds of every bank and local check, keyed by node id.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Thresholds {
    pub residual: BTreeMap<usize, BTreeMap<usize, f64>>,
    pub self_check: BTreeMap<usize, f64>,
}

/// How the active fault enters the joint system.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Injection {
    None,
    /// Added to the plant derivative at this stacked index.
    Node { col: usize },
    /// Added to the broadcast of node index `target` at this stacked index.
    Broadcast { target: usize, col: usize },
}

/// Everything that depends on the current graph.
struct Phase {
    fleet: FleetModel,
    a_local: DMatrix<f64>,
    feedback: DMatrix<f64>,
    h: DVector<f64>,
    banks: Vec<MonitorBank>,
    checks: Vec<SelfCheck>,
    injection: Injection,
    /// Offsets of each bank's observers inside the joint state.
    z_offsets: Vec<Vec<usize>>,
    s_offset: usize,
    len: usize,
}

impl Phase {
    fn new(fleet: FleetModel, banks: Vec<MonitorBank>, mcfg: &MonitorConfig, attack: Option<&AttackScenario>) -> Self {
        let ids = fleet.graph.node_ids().to_vec();
        let n = fleet.node_dim();
        let dim = fleet.state_dim();
        let a_local = fleet.a();
        let feedback = fleet.feedback();
        let h = fleet.formation.lifted();
        let checks = ids.iter().map(|_| SelfCheck::new(&fleet.uav.a(), mcfg.self_check_pole)).collect();
        let injection = match attack {
            Some(s) => match ids.iter().position(|&id| id == s.target) {
                Some(k) if s.kind == AttackKind::NodeAttack => Injection::Node { col: k * n + s.channel },
                Some(k) => Injection::Broadcast { target: k, col: k * n + s.channel },
                None => Injection::None,
            },
            None => Injection::None,
        };
        let mut off = dim;
        let mut z_offsets = Vec::with_capacity(banks.len());
        for b in &banks {
            let mut v = Vec::with_capacity(b.designs.len());
            for _ in &b.designs {
                v.push(off);
                off += dim;
            }
            z_offsets.push(v);
        }
        let s_offset = off;
        let len = off + ids.len() * n;
        Phase { fleet, a_local, feedback, h, banks, checks, injection, z_offsets, s_offset, len }
    }

    fn node_dim(&self) -> usize {
        self.fleet.node_dim()
    }

    fn dim(&self) -> usize {
        self.fleet.state_dim()
    }

    /// States as broadcast, with the fault applied to the attacked sender.
    fn broadcast_view(&self, x: &DVector<f64>, f: f64) -> DVector<f64> {
        let mut y = x.clone();
        if let Injection::Broadcast { col, .. } = self.injection {
            if f != 0.0 {
                y[col] += f;
            }
        }
        y
    }

    /// Measurement of host `b`: its own clean state, received neighbor states.
    fn host_measurement(&self, b: usize, x: &DVector<f64>, view: &DVector<f64>) -> DVector<f64> {
        let bank = &self.banks[b];
        let n = self.node_dim();
        let mut y = DVector::zeros(bank.measured.len() * n);
        for (row, &j) in bank.measured.iter().enumerate() {
            let src = if j == bank.host_idx { x } else { view };
            y.rows_mut(row * n, n).copy_from(&src.rows(j * n, n));
        }
        y
    }

    /// `B u` for every node, each using its clean own state and received neighbor states.
    fn inputs(&self, x: &DVector<f64>, view: &DVector<f64>) -> DVector<f64> {
        let mut bu = &self.feedback * (view - &self.h);
        if let Injection::Broadcast { target, .. } = self.injection {
            let n = self.node_dim();
            let clean = self.feedback.rows(target * n, n) * (x - &self.h);
            bu.rows_mut(target * n, n).copy_from(&clean);
        }
        bu
    }

    fn derivative(&self, s: &DVector<f64>, f: f64) -> DVector<f64> {
        let dim = self.dim();
        let n = self.node_dim();
        let x = s.rows(0, dim).into_owned();
        let view = self.broadcast_view(&x, f);
        let bu = self.inputs(&x, &view);
        let mut out = DVector::zeros(self.len);
        let mut xdot = &self.a_local * &x + &bu;
        if let Injection::Node { col } = self.injection {
            if f != 0.0 {
                xdot[col] += f;
            }
        }
        out.rows_mut(0, dim).copy_from(&xdot);
        for (b, bank) in self.banks.iter().enumerate() {
            let y = self.host_measurement(b, &x, &view);
            for (d, (design, tw)) in bank.designs.iter().zip(&bank.known).enumerate() {
                let off = self.z_offsets[b][d];
                let z = s.rows(off, dim).into_owned();
                out.rows_mut(off, dim).copy_from(&design.z_dot(&z, tw, &y));
            }
        }
        for (i, check) in self.checks.iter().enumerate() {
            let off = self.s_offset + i * n;
            let xh = s.rows(off, n).into_owned();
            let theta = x.rows(i * n, n).into_owned();
            let bui = bu.rows(i * n, n).into_owned();
            out.rows_mut(off, n).copy_from(&check.derivative(&xh, &bui, &theta));
        }
        out
    }

    fn step(&self, s: &DVector<f64>, f: f64, dt: f64, integrator: Integrator) -> DVector<f64> {
        match integrator {
            Integrator::Euler => s + self.derivative(s, f) * dt,
            Integrator::Rk4 => {
                let k1 = self.derivative(s, f);
                let k2 = self.derivative(&(s + &k1 * (0.5 * dt)), f);
                let k3 = self.derivative(&(s + &k2 * (0.5 * dt)), f);
                let k4 = self.derivative(&(s + &k3 * dt), f);
                s + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
            }
        }
    }

    /// Joint state with observers and checks started from `x_hat` (per bank) and `x`.
    fn initial_joint(&self, x: &DVector<f64>, estimates: &[DVector<f64>], check_states: &[DVector<f64>]) -> DVector<f64> {
        let dim = self.dim();
        let n = self.node_dim();
        let mut s = DVector::zeros(self.len);
        s.rows_mut(0, dim).copy_from(x);
        let view = self.broadcast_view(x, 0.0);
        for (b, bank) in self.banks.iter().enumerate() {
            let y = self.host_measurement(b, x, &view);
            for (d, z0) in bank.init_states(&estimates[b], &y).into_iter().enumerate() {
                s.rows_mut(self.z_offsets[b][d], dim).copy_from(&z0);
            }
        }
        for (i, c) in check_states.iter().enumerate() {
            s.rows_mut(self.s_offset + i * n, n).copy_from(c);
        }
        s
    }

    fn plant(&self, s: &DVector<f64>) -> DVector<f64> {
        s.rows(0, self.dim()).into_owned()
    }

    /// Residual norms per bank and local check residuals, with fault `f` on the broadcasts.
    fn residuals(&self, s: &DVector<f64>, f: f64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let dim = self.dim();
        let n = self.node_dim();
        let x = self.plant(s);
        let view = self.broadcast_view(&x, f);
        let res = self
            .banks
            .iter()
            .enumerate()
            .map(|(b, bank)| {
                let y = self.host_measurement(b, &x, &view);
                bank.designs
                    .iter()
                    .enumerate()
                    .map(|(d, design)| design.residual(&s.rows(self.z_offsets[b][d], dim).into_owned(), &y).norm())
                    .collect()
            })
            .collect();
        let checks = (0..self.checks.len())
            .map(|i| SelfCheck::residual(&s.rows(self.s_offset + i * n, n).into_owned(), &x.rows(i * n, n).into_owned()))
            .collect();
        (res, checks)
    }

    /// Estimate of the full stacked state held by observer `d` of bank `b`.
    fn estimate(&self, s: &DVector<f64>, b: usize, d: usize, f: f64) -> DVector<f64> {
        let x = self.plant(s);
        let view = self.broadcast_view(&x, f);
        let y = self.host_measurement(b, &x, &view);
        self.banks[b].designs[d].estimate(&s.rows(self.z_offsets[b][d], self.dim()).into_owned(), &y)
    }

    fn check_states(&self, s: &DVector<f64>) -> Vec<DVector<f64>> {
        let n = self.node_dim();
        (0..self.checks.len()).map(|i| s.rows(self.s_offset + i * n, n).into_owned()).collect()
    }

    /// Observer start estimates for a plant state `x`.
    fn start_estimates(&self, x: &DVector<f64>, init: ObserverInit) -> Vec<DVector<f64>> {
        let view = self.broadcast_view(x, 0.0);
        (0..self.banks.len())
            .map(|b| match init {
                ObserverInit::Exact => x.clone(),
                ObserverInit::Measured => self.banks[b].designs[0].c.transpose() * self.host_measurement(b, x, &view),
            })
            .collect()
    }
}

/// Time of step `k`, snapped to a nanosecond grid so that logged times stay short.
fn grid_time(k: usize, dt: f64) -> f64 {
    (k as f64 * dt * 1e9).round() / 1e9
}

/// Runs the fault-free system from `x0` and derives thresholds from it.
pub fn calibrate_thresholds(
    fleet: &FleetModel,
    banks: &[MonitorBank],
    mcfg: &MonitorConfig,
    cfg: &SimConfig,
    x0: &DVector<f64>,
) -> Result<Thresholds, SimError> {
    let th = &cfg.thresholds;
    if th.calibration_duration < th.transient_cutoff {
        return Err(SimError::CalibrationTooShort { duration: th.calibration_duration, cutoff: th.transient_cutoff });
    }
    let phase = Phase::new(fleet.clone(), banks.to_vec(), mcfg, None);
    // the local check reads its own full state, so it always starts exact
    let check0: Vec<DVector<f64>> = (0..fleet.n_nodes()).map(|i| x0.rows(i * fleet.node_dim(), fleet.node_dim()).into_owned()).collect();
    let mut s = phase.initial_joint(x0, &phase.start_estimates(x0, cfg.observer_init), &check0);
    let steps = (th.calibration_duration / cfg.dt).round() as usize;
    let mut hist: Vec<Vec<(f64, Vec<f64>)>> = vec![Vec::with_capacity(steps); banks.len()];
    let mut check_hist: Vec<(f64, Vec<f64>)> = Vec::with_capacity(steps);
    for step in 0..=steps {
        let t = grid_time(step, cfg.dt);
        let (res, chk) = phase.residuals(&s, 0.0);
        for (b, r) in res.into_iter().enumerate() {
            hist[b].push((t, r));
        }
        check_hist.push((t, chk));
        if step < steps {
            s = phase.step(&s, 0.0, cfg.dt, cfg.integrator);
        }
    }
    let mut out = Thresholds::default();
    for (b, bank) in banks.iter().enumerate() {
        out.residual.insert(
            bank.host,
            monitor::thresholds_from_history(&bank.targets, &hist[b], th.margin, th.transient_cutoff, th.floor),
        );
    }
    let ids = fleet.graph.node_ids();
    out.self_check = monitor::thresholds_from_history(ids, &check_hist, th.margin, th.transient_cutoff, th.floor);
    Ok(out)
}

/// Per-node sample of one trace step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSample {
    pub id: usize,
    pub state: Vec<f64>,
    /// Formation error position components over the current survivors.
    pub error: Vec<f64>,
    /// `(target, norm)` for each observer of this node's bank.
    pub residuals: Vec<(usize, f64)>,
    pub self_check: f64,
    pub verdict: Option<Verdict>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub t: f64,
    pub attack_active: bool,
    pub fault: f64,
    pub nodes: Vec<NodeSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    AttackStart,
    AttackEnd,
    VerdictChange,
    Identified,
    Removal,
    RemovalRefused,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t: f64,
    pub kind: EventKind,
    pub host: Option<usize>,
    pub node: Option<usize>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovalRecord {
    pub t: f64,
    pub node: usize,
    pub identified_by: usize,
    pub survivors: Vec<usize>,
    pub adjacency: Vec<Vec<u8>>,
    pub gain: Gain,
    pub gain_redesigned: bool,
}

/// Complete record of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTrace {
    pub spatial_dim: usize,
    pub node_ids: Vec<usize>,
    pub steps: Vec<TraceStep>,
    pub events: Vec<Event>,
    pub removals: Vec<RemovalRecord>,
    /// Thresholds in force, one entry per phase start time.
    pub thresholds: Vec<(f64, Thresholds)>,
}

impl SimTrace {
    pub fn final_step(&self) -> &TraceStep {
        self.steps.last().expect("trace has at least the initial step")
    }

    /// Largest formation error norm over the nodes of one step.
    pub fn max_formation_error(step: &TraceStep) -> f64 {
        step.nodes.iter().map(|n| n.error.iter().map(|e| e * e).sum::<f64>().sqrt()).fold(0.0, f64::max)
    }

    /// Residual norm series of `(host, target)`.
    pub fn residual_series(&self, host: usize, target: usize) -> Vec<(f64, f64)> {
        self.steps
            .iter()
            .filter_map(|s| {
                let node = s.nodes.iter().find(|n| n.id == host)?;
                let (_, v) = node.residuals.iter().find(|(k, _)| *k == target)?;
                Some((s.t, *v))
            })
            .collect()
    }

    pub fn verdicts(&self, host: usize) -> Vec<Verdict> {
        self.steps
            .iter()
            .filter_map(|s| s.nodes.iter().find(|n| n.id == host).and_then(|n| n.verdict))
            .collect()
    }

    /// Debounced identifications as `(t, host, target)`.
    pub fn identifications(&self) -> Vec<(f64, usize, usize)> {
        self.events
            .iter()
            .filter(|e| e.kind == EventKind::Identified)
            .filter_map(|e| Some((e.t, e.host?, e.node?)))
            .collect()
    }

    /// Thresholds that applied at time `t`.
    pub fn thresholds_at(&self, t: f64) -> &Thresholds {
        let mut cur = &self.thresholds[0].1;
        for (start, th) in &self.thresholds {
            if *start <= t + 1e-12 {
                cur = th;
            }
        }
        cur
    }

    fn axis_names(&self) -> Vec<String> {
        let names = ["x", "y", "z"];
        (0..self.spatial_dim)
            .map(|j| names.get(j).map_or_else(|| format!("p{j}"), |s| s.to_string()))
            .collect()
    }

    /// Column names of the long-format CSV.
    pub fn csv_columns(&self) -> Vec<String> {
        let axes = self.axis_names();
        let mut cols = vec!["t".to_string(), "node".into(), "alive".into()];
        cols.extend(axes.iter().cloned());
        cols.extend(axes.iter().map(|a| format!("v{a}")));
        cols.extend(axes.iter().map(|a| format!("e{a}")));
        cols.extend(["attack_active", "verdict", "class", "self_check"].map(String::from));
        cols.extend(self.node_ids.iter().map(|k| format!("r_{k}")));
        cols
    }

    /// Long-format CSV: one row per step and live node. Residual column
    /// `r_k` of a row for host `i` holds the norm of `i`'s observer blind
    /// to `k`, empty when `k` is not one of `i`'s targets.
    pub fn to_csv(&self) -> String {
        let d = self.spatial_dim;
        let mut out = self.csv_columns().join(",");
        out.push('\n');
        for s in &self.steps {
            for n in &s.nodes {
                let _ = write!(out, "{},{},1", s.t, n.id);
                for j in 0..d {
                    let _ = write!(out, ",{}", n.state[2 * j]);
                }
                for j in 0..d {
                    let _ = write!(out, ",{}", n.state[2 * j + 1]);
                }
                for e in &n.error {
                    let _ = write!(out, ",{e}");
                }
                let (verdict, class) = match n.verdict {
                    Some(v) => (v.decision.to_string(), v.attack_class.to_string()),
                    None => (String::new(), String::new()),
                };
                let _ = write!(out, ",{},{},{},{}", u8::from(s.attack_active), verdict, class, n.self_check);
                for k in &self.node_ids {
                    match n.residuals.iter().find(|(t, _)| t == k) {
                        Some((_, v)) => {
                            let _ = write!(out, ",{v}");
                        }
                        None => out.push(','),
                    }
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn events_csv(&self) -> String {
        let mut out = String::from("t,kind,host,node,detail\n");
        for e in &self.events {
            let kind = serde_json::to_value(&e.kind).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
            let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{},\"{}\"", e.t, kind, opt(e.host), opt(e.node), e.detail.replace('"', "'"));
        }
        out
    }

    /// SHA-256 over the trace and event CSVs.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_csv().as_bytes());
        h.update(self.events_csv().as_bytes());
        hex::encode(h.finalize())
    }
}

/// Everything needed to run a scenario.
#[derive(Debug, Clone)]
pub struct RunSetup {
    pub fleet: FleetModel,
    pub attack: Option<AttackScenario>,
    pub monitors: MonitorConfig,
    pub config: SimConfig,
}

/// Integrates the fleet with the optional attack, monitors every node and,
/// when enabled, removes the first node isolated by one of its neighbors.
pub fn run(setup: &RunSetup) -> Result<SimTrace, SimError> {
    let cfg = &setup.config;
    cfg.validate()?;
    if let Some(a) = &setup.attack {
        a.validate(setup.fleet.node_dim())?;
        if !setup.fleet.graph.contains(a.target) {
            return Err(SimError::Config(format!("attack target {} is not in the graph", a.target)));
        }
    }
    let mcfg = &setup.monitors;
    let x0 = cfg.initial_vector(&setup.fleet)?;
    let banks = recovery::rebuild_banks(&setup.fleet, mcfg)?;
    let thresholds = calibrate_thresholds(&setup.fleet, &banks, mcfg, cfg, &x0)?;
    let mut phase = Phase::new(setup.fleet.clone(), banks, mcfg, setup.attack.as_ref());
    let n = phase.node_dim();
    let check0: Vec<DVector<f64>> = (0..phase.fleet.n_nodes()).map(|i| x0.rows(i * n, n).into_owned()).collect();
    let mut s = phase.initial_joint(&x0, &phase.start_estimates(&x0, cfg.observer_init), &check0);

    let mut trace = SimTrace {
        spatial_dim: setup.fleet.uav.spatial_dim,
        node_ids: setup.fleet.graph.node_ids().to_vec(),
        steps: Vec::with_capacity(cfg.steps() + 1),
        events: Vec::new(),
        removals: Vec::new(),
        thresholds: vec![(0.0, thresholds.clone())],
    };
    let mut thresholds = thresholds;
    let mut source = setup.attack.clone().map(FaultSource::new);
    let mut debouncers: BTreeMap<usize, Debouncer> = phase.fleet.graph.node_ids().iter().map(|&id| (id, Debouncer::new(cfg.debounce))).collect();
    let mut last_decision: BTreeMap<usize, Decision> = BTreeMap::new();
    let warmup = cfg.effective_warmup();
    let steps = cfg.steps();
    let mut was_active = false;

    record_step(&mut trace, &phase, &s, 0.0, false, 0.0, &thresholds, false, &mut last_decision);
    for step in 0..steps {
        let t = grid_time(step, cfg.dt);
        let t_next = grid_time(step + 1, cfg.dt);
        let target_alive = setup.attack.as_ref().is_some_and(|a| phase.fleet.graph.contains(a.target));
        let f = match source.as_mut() {
            Some(src) if target_alive => src.sample(t),
            _ => 0.0,
        };
        let active = target_alive && setup.attack.as_ref().is_some_and(|a| a.is_active(t));
        if active != was_active {
            let a = setup.attack.as_ref().expect("activity implies an attack");
            trace.events.push(Event {
                t,
                kind: if active { EventKind::AttackStart } else { EventKind::AttackEnd },
                host: None,
                node: Some(a.target),
                detail: format!("{:?} on channel {}", a.kind, a.channel),
            });
            was_active = active;
        }
        s = phase.step(&s, f, cfg.dt, cfg.integrator);
        let norm = phase.plant(&s).norm();
        if !norm.is_finite() || norm > 1e9 {
            return Err(SimError::Divergence { t: t_next, norm });
        }
        let decide_now = t_next >= warmup - 1e-12;
        let verdicts = record_step(&mut trace, &phase, &s, t_next, active, f, &thresholds, decide_now, &mut last_decision);

        let mut trigger = None;
        for v in &verdicts {
            let Some(deb) = debouncers.get_mut(&v.host) else { continue };
            if let Some(k) = deb.observe(v.t, v.decision) {
                trace.events.push(Event {
                    t: v.t,
                    kind: EventKind::Identified,
                    host: Some(v.host),
                    node: Some(k),
                    detail: v.attack_class.to_string(),
                });
                let adjacent = k != v.host && phase.fleet.graph.neighbors(v.host).is_ok_and(|nb| nb.contains(&k));
                if cfg.removal && adjacent && trigger.is_none() {
                    trigger = Some((v.host, k));
                }
            }
        }
        if let Some((host, k)) = trigger {
            match recovery::remove_and_reconfigure(&phase.fleet, k) {
                Ok(reconf) => {
                    let b = phase.banks.iter().position(|bk| bk.host == host).expect("host has a bank");
                    let d = phase.banks[b].targets.iter().position(|&tk| tk == k).expect("k is a target of its neighbor");
                    let est_full = phase.estimate(&s, b, d, f);
                    let x_full = phase.plant(&s);
                    let old_fleet = phase.fleet.clone();
                    let survivors = reconf.fleet.graph.node_ids().to_vec();
                    let x_new = recovery::restrict_state(&old_fleet, &reconf.fleet, &x_full);
                    let est = recovery::restrict_state(&old_fleet, &reconf.fleet, &est_full);
                    let checks_old = phase.check_states(&s);
                    let checks_new: Vec<DVector<f64>> = survivors
                        .iter()
                        .map(|id| checks_old[old_fleet.graph.index_of(*id).expect("survivor")].clone())
                        .collect();
                    let banks = recovery::rebuild_banks(&reconf.fleet, mcfg)?;
                    let mut cal_cfg = cfg.clone();
                    cal_cfg.observer_init = ObserverInit::Exact;
                    thresholds = calibrate_thresholds(&reconf.fleet, &banks, mcfg, &cal_cfg, &x_new)?;
                    trace.thresholds.push((t_next, thresholds.clone()));
                    phase = Phase::new(reconf.fleet.clone(), banks, mcfg, setup.attack.as_ref());
                    let estimates = vec![est; phase.banks.len()];
                    s = phase.initial_joint(&x_new, &estimates, &checks_new);
                    debouncers = survivors.iter().map(|&id| (id, Debouncer::new(cfg.debounce))).collect();
                    last_decision.remove(&k);
                    trace.events.push(Event {
                        t: t_next,
                        kind: EventKind::Removal,
                        host: Some(host),
                        node: Some(k),
                        detail: format!(
                            "survivors {:?}; gain {} (k_pos {}, k_vel {})",
                            survivors,
                            if reconf.gain_redesigned { "redesigned" } else { "kept" },
                            reconf.fleet.gain.k_pos,
                            reconf.fleet.gain.k_vel
                        ),
                    });
                    trace.removals.push(RemovalRecord {
                        t: t_next,
                        node: k,
                        identified_by: host,
                        survivors,
                        adjacency: reconf.fleet.graph.adjacency_rows(),
                        gain: reconf.fleet.gain,
                        gain_redesigned: reconf.gain_redesigned,
                    });
                    log::info!("removed node {k} at t = {t_next:.2} after identification by {host}");
                }
                Err(e) => {
                    log::warn!("{e}");
                    trace.events.push(Event {
                        t: t_next,
                        kind: EventKind::RemovalRefused,
                        host: Some(host),
                        node: Some(k),
                        detail: e.to_string(),
                    });
                }
            }
        }
    }
    Ok(trace)
}

/// Appends the samples at time `t`; returns the verdicts when deciding.
#[allow(clippy::too_many_arguments)]
fn record_step(
    trace: &mut SimTrace,
    phase: &Phase,
    s: &DVector<f64>,
    t: f64,
    attack_active: bool,
    f: f64,
    thresholds: &Thresholds,
    decide: bool,
    last_decision: &mut BTreeMap<usize, Decision>,
) -> Vec<Verdict> {
    let n = phase.node_dim();
    let x = phase.plant(s);
    let errors = phase.fleet.formation_error(&x);
    let (res, checks) = phase.residuals(s, f);
    let mut verdicts = Vec::new();
    let mut nodes = Vec::with_capacity(phase.banks.len());
    for (i, bank) in phase.banks.iter().enumerate() {
        let residuals: Vec<(usize, f64)> = bank.targets.iter().copied().zip(res[i].iter().copied()).collect();
        let verdict = decide.then(|| {
            let records: Vec<ResidualRecord> = residuals.iter().map(|&(target, norm)| ResidualRecord { t, host: bank.host, target, norm }).collect();
            let empty = BTreeMap::new();
            let th = thresholds.residual.get(&bank.host).unwrap_or(&empty);
            let check_ok = checks[i] < thresholds.self_check.get(&bank.host).copied().unwrap_or(f64::INFINITY);
            monitor::decide(bank.host, t, &records, th, check_ok)
        });
        if let Some(v) = verdict {
            if last_decision.get(&bank.host) != Some(&v.decision) {
                if last_decision.contains_key(&bank.host) || v.decision != Decision::NoFault {
                    trace.events.push(Event {
                        t,
                        kind: EventKind::VerdictChange,
                        host: Some(bank.host),
                        node: None,
                        detail: v.decision.to_string(),
                    });
                }
                last_decision.insert(bank.host, v.decision);
            }
            verdicts.push(v);
        }
        nodes.push(NodeSample {
            id: bank.host,
            state: x.rows(i * n, n).iter().copied().collect(),
            error: errors[i].iter().copied().collect(),
            residuals,
            self_check: checks[i],
            verdict,
        });
    }
    trace.steps.push(TraceStep { t, attack_active, fault: f, nodes });
    verdicts
}

/// Counts of verdicts per host after warm-up.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct HostSummary {
    pub no_fault: usize,
    pub inconclusive: usize,
    pub identified: BTreeMap<usize, usize>,
    /// First debounced identification: `(t, target, class)`.
    pub first_identification: Option<(f64, usize, AttackClass)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub digest: String,
    pub final_time: f64,
    pub final_formation_error: f64,
    pub hosts: BTreeMap<usize, HostSummary>,
    pub removals: Vec<RemovalRecord>,
}

pub fn summarize(trace: &SimTrace) -> RunSummary {
    let mut hosts: BTreeMap<usize, HostSummary> = BTreeMap::new();
    for s in &trace.steps {
        for n in &s.nodes {
            let Some(v) = n.verdict else { continue };
            let h = hosts.entry(n.id).or_default();
            match v.decision {
                Decision::NoFault => h.no_fault += 1,
                Decision::Inconclusive => h.inconclusive += 1,
                Decision::Identified(k) => *h.identified.entry(k).or_default() += 1,
            }
        }
    }
    for e in trace.events.iter().filter(|e| e.kind == EventKind::Identified) {
        let (Some(host), Some(k)) = (e.host, e.node) else { continue };
        let class = match e.detail.as_str() {
            "OutgoingBroadcast" => AttackClass::OutgoingBroadcast,
            "NodeOrIncoming" => AttackClass::NodeOrIncoming,
            _ => AttackClass::Unknown,
        };
        let h = hosts.entry(host).or_default();
        if h.first_identification.is_none() {
            h.first_identification = Some((e.t, k, class));
        }
    }
    let last = trace.final_step();
    RunSummary {
        digest: trace.digest(),
        final_time: last.t,
        final_formation_error: SimTrace::max_formation_error(last),
        hosts,
        removals: trace.removals.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formation::{FormationSpec, Gain, UavModel};
    use crate::topology::FormationGraph;

    fn hexagon() -> FleetModel {
        FleetModel::new(
            FormationGraph::cycle(6).unwrap().with_ids((1..=6).collect()).unwrap(),
            UavModel::double_integrator(2),
            Gain { k_pos: -1.0, k_vel: -2.0 },
            FormationSpec::hexagon([0.0, 0.0], 2.0),
        )
        .unwrap()
    }

    fn setup(attack: Option<AttackScenario>, duration: f64) -> RunSetup {
        RunSetup {
            fleet: hexagon(),
            attack,
            monitors: MonitorConfig::default(),
            config: SimConfig { duration, seed: 3, ..Default::default() },
        }
    }

    #[test]
    fn config_validation() {
        let mut c = SimConfig::default();
        assert!(c.validate().is_ok());
        c.dt = 0.0;
        assert!(c.validate().is_err());
        c.dt = 0.1;
        c.duration = 0.05;
        assert!(c.validate().is_err());
    }

    #[test]
    fn random_box_is_seeded() {
        let fleet = hexagon();
        let c = SimConfig { seed: 11, ..Default::default() };
        let a = c.initial_vector(&fleet).unwrap();
        assert_eq!(a, c.initial_vector(&fleet).unwrap());
        assert!(a.iter().all(|v| v.abs() <= 5.0));
        assert!((0..6).all(|i| a[4 * i + 1] == 0.0 && a[4 * i + 3] == 0.0));
    }

    #[test]
    fn short_fault_free_run_has_tiny_residuals() {
        let trace = run(&setup(None, 2.0)).unwrap();
        assert_eq!(trace.steps.len(), 201);
        for s in &trace.steps {
            for n in &s.nodes {
                assert!(n.residuals.iter().all(|(_, v)| *v < 1e-9));
                assert_eq!(n.verdict.map(|v| v.decision).unwrap_or(Decision::NoFault), Decision::NoFault);
            }
        }
        assert!(trace.steps.windows(2).all(|w| w[1].t > w[0].t));
    }

    #[test]
    fn node_attack_isolated_by_neighbor() {
        let attack = AttackScenario { kind: AttackKind::NodeAttack, target: 2, window: [0.5, 2.0], channel: 0, magnitude: 2.0, seed: 0 };
        let trace = run(&setup(Some(attack), 2.0)).unwrap();
        let ids = trace.identifications();
        assert!(ids.iter().any(|&(_, h, k)| h == 1 && k == 2), "{ids:?}");
        assert!(ids.iter().all(|&(_, _, k)| k == 2));
    }

    #[test]
    fn csv_has_one_row_per_node_and_step() {
        let trace = run(&setup(None, 0.1)).unwrap();
        let csv = trace.to_csv();
        assert_eq!(csv.lines().count(), 1 + 11 * 6);
        assert!(csv.starts_with("t,node,alive,x,y,vx,vy,ex,ey,attack_active,verdict,class,self_check,r_1"));
    }
}
