//! JSON scenario files.
//!
//! ```json
//! {
//!   "name": "hexagon_node_attack",
//!   "graph": { "cycle": 6 },
//!   "formation": { "hexagon": { "center": [0, 0], "radius": 2 } },
//!   "gains": { "k_pos": -1.0, "k_vel": -2.0 },
//!   "attack": { "kind": "node", "target": 2, "window": [0.5, 4.0], "magnitude": 2.0 },
//!   "monitors": { "attack_model": "node" },
//!   "sim": { "duration": 10.0, "seed": 1 }
//! }
//! ```
//!
//! Node labels default to `1..=N`. Unknown keys are rejected everywhere.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::{AttackKind, AttackScenario};
use crate::formation::{self, FleetModel, FormationSpec, Gain, UavModel};
use crate::monitor::{AttackModel, MonitorConfig};
use crate::simkit::{InitialState, Integrator, ObserverInit, RunSetup, SimConfig, ThresholdConfig};
use crate::topology::FormationGraph;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed scenario: {0}")]
    Parse(serde_json::Error),
    #[error("{field}: {message}")]
    Field { field: String, message: String },
}

impl From<serde_json::Error> for ScenarioError {
    fn from(e: serde_json::Error) -> Self {
        ScenarioError::Parse(e)
    }
}

fn field_err(field: &str, message: impl ToString) -> ScenarioError {
    ScenarioError::Field { field: field.to_string(), message: message.to_string() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: Option<String>,
    pub graph: GraphSection,
    pub formation: FormationSection,
    #[serde(default)]
    pub gains: Option<GainSection>,
    #[serde(default)]
    pub attack: Option<AttackSection>,
    pub monitors: MonitorSection,
    pub sim: SimSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSection {
    #[serde(default)]
    pub cycle: Option<usize>,
    #[serde(default)]
    pub adjacency: Option<Vec<Vec<u8>>>,
    #[serde(default)]
    pub labels: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HexagonSection {
    pub center: [f64; 2],
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FormationSection {
    #[serde(default)]
    pub hexagon: Option<HexagonSection>,
    #[serde(default)]
    pub offsets: Option<Vec<Vec<f64>>>,
    /// Per-axis position and velocity feedback of the open-loop UAV.
    #[serde(default)]
    pub alpha: Option<Vec<f64>>,
    #[serde(default)]
    pub beta: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainSection {
    pub k_pos: f64,
    pub k_vel: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKindName {
    Node,
    BroadcastOffset,
    BroadcastNoise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub kind: AttackKindName,
    pub target: usize,
    pub window: [f64; 2],
    #[serde(default)]
    pub channel: usize,
    pub magnitude: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonitorSection {
    pub attack_model: AttackModel,
    #[serde(default)]
    pub poles: Option<Vec<f64>>,
    #[serde(default)]
    pub channel: Option<usize>,
    #[serde(default)]
    pub self_check_pole: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialStateSection {
    #[serde(default)]
    pub random_box: Option<f64>,
    #[serde(default)]
    pub given: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    #[serde(default)]
    pub dt: Option<f64>,
    pub duration: f64,
    #[serde(default)]
    pub integrator: Option<Integrator>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub initial_state: Option<InitialStateSection>,
    #[serde(default)]
    pub observer_init: Option<ObserverInit>,
    #[serde(default)]
    pub removal: Option<bool>,
    #[serde(default)]
    pub warmup: Option<f64>,
    #[serde(default)]
    pub debounce: Option<f64>,
    #[serde(default)]
    pub threshold_margin: Option<f64>,
    #[serde(default)]
    pub transient_cutoff: Option<f64>,
    #[serde(default)]
    pub threshold_floor: Option<f64>,
    #[serde(default)]
    pub calibration_duration: Option<f64>,
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub dt: Option<f64>,
    pub no_removal: bool,
}

impl Scenario {
    pub fn from_path(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn graph(&self) -> Result<FormationGraph, ScenarioError> {
        let g = &self.graph;
        let graph = match (g.cycle, &g.adjacency) {
            (Some(n), None) => FormationGraph::cycle(n).map_err(|e| field_err("graph.cycle", e))?,
            (None, Some(rows)) => FormationGraph::from_adjacency(rows).map_err(|e| field_err("graph.adjacency", e))?,
            _ => return Err(field_err("graph", "exactly one of `cycle` or `adjacency` is required")),
        };
        let labels = g.labels.clone().unwrap_or_else(|| (1..=graph.n_nodes()).collect());
        graph.with_ids(labels).map_err(|e| field_err("graph.labels", e))
    }

    pub fn formation(&self) -> Result<FormationSpec, ScenarioError> {
        let f = &self.formation;
        match (&f.hexagon, &f.offsets) {
            (Some(h), None) => {
                if !(h.radius > 0.0 && h.radius.is_finite()) {
                    return Err(field_err("formation.hexagon.radius", "must be positive"));
                }
                Ok(FormationSpec::hexagon(h.center, h.radius))
            }
            (None, Some(o)) => {
                let d = o.first().map_or(0, |v| v.len());
                if d == 0 {
                    return Err(field_err("formation.offsets", "needs at least one nonempty offset"));
                }
                if let Some(i) = o.iter().position(|v| v.len() != d) {
                    return Err(field_err("formation.offsets", format!("entry {i} has dimension {}, expected {d}", o[i].len())));
                }
                if o.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(field_err("formation.offsets", "entries must be finite"));
                }
                Ok(FormationSpec { offsets: o.clone() })
            }
            _ => Err(field_err("formation", "exactly one of `hexagon` or `offsets` is required")),
        }
    }

    pub fn uav(&self, spatial_dim: usize) -> Result<UavModel, ScenarioError> {
        let alpha = self.formation.alpha.clone().unwrap_or_else(|| vec![0.0; spatial_dim]);
        let beta = self.formation.beta.clone().unwrap_or_else(|| vec![0.0; spatial_dim]);
        if alpha.len() != spatial_dim {
            return Err(field_err("formation.alpha", format!("needs {spatial_dim} entries")));
        }
        if beta.len() != spatial_dim {
            return Err(field_err("formation.beta", format!("needs {spatial_dim} entries")));
        }
        Ok(UavModel { spatial_dim, alpha, beta })
    }

    /// Fleet with the declared gain, or a designed one when none is given.
    pub fn fleet(&self) -> Result<FleetModel, ScenarioError> {
        let graph = self.graph()?;
        let formation = self.formation()?;
        if formation.offsets.len() != graph.n_nodes() {
            return Err(field_err(
                "formation",
                format!("{} offsets for {} nodes", formation.offsets.len(), graph.n_nodes()),
            ));
        }
        let uav = self.uav(formation.offsets[0].len())?;
        let gain = match self.gains {
            Some(g) => {
                if !(g.k_pos.is_finite() && g.k_vel.is_finite()) {
                    return Err(field_err("gains", "entries must be finite"));
                }
                Gain { k_pos: g.k_pos, k_vel: g.k_vel }
            }
            None => formation::design_gain(&uav, &graph.normalized_spectrum()).map_err(|e| field_err("gains", e))?.gain,
        };
        FleetModel::new(graph, uav, gain, formation).map_err(|e| field_err("formation", e))
    }

    pub fn attack(&self, node_dim: usize, graph: &FormationGraph) -> Result<Option<AttackScenario>, ScenarioError> {
        let Some(a) = &self.attack else { return Ok(None) };
        let kind = match a.kind {
            AttackKindName::Node => AttackKind::NodeAttack,
            AttackKindName::BroadcastOffset => AttackKind::BroadcastOffset,
            AttackKindName::BroadcastNoise => AttackKind::BroadcastNoise,
        };
        let s = AttackScenario { kind, target: a.target, window: a.window, channel: a.channel, magnitude: a.magnitude, seed: a.seed };
        s.validate(node_dim).map_err(|e| {
            let field = match e {
                crate::attack::AttackError::Channel { .. } => "attack.channel",
                crate::attack::AttackError::Magnitude | crate::attack::AttackError::NegativeNoise => "attack.magnitude",
                _ => "attack.window",
            };
            field_err(field, e)
        })?;
        if !graph.contains(a.target) {
            return Err(field_err("attack.target", format!("node {} is not in the graph", a.target)));
        }
        Ok(Some(s))
    }

    pub fn monitors(&self, node_dim: usize) -> Result<MonitorConfig, ScenarioError> {
        let m = &self.monitors;
        let poles = m.poles.clone().unwrap_or_else(|| vec![-10.0]);
        if poles.is_empty() || poles.iter().any(|p| !(*p < 0.0 && p.is_finite())) {
            return Err(field_err("monitors.poles", "must be a nonempty list of negative numbers"));
        }
        let channel = m.channel.or(self.attack.as_ref().map(|a| a.channel)).unwrap_or(0);
        if channel >= node_dim {
            return Err(field_err("monitors.channel", format!("must be below {node_dim}")));
        }
        let self_check_pole = m.self_check_pole.unwrap_or(-10.0);
        if !(self_check_pole < 0.0 && self_check_pole.is_finite()) {
            return Err(field_err("monitors.self_check_pole", "must be negative"));
        }
        Ok(MonitorConfig { attack_model: m.attack_model, poles, channel, self_check_pole })
    }

    pub fn sim_config(&self, overrides: &Overrides) -> Result<SimConfig, ScenarioError> {
        let s = &self.sim;
        let defaults = SimConfig::default();
        let th_default = ThresholdConfig::default();
        let initial_state = match &s.initial_state {
            None => defaults.initial_state.clone(),
            Some(InitialStateSection { random_box: Some(w), given: None }) => InitialState::RandomBox { half_width: *w },
            Some(InitialStateSection { random_box: None, given: Some(v) }) => InitialState::Given(v.clone()),
            Some(_) => return Err(field_err("sim.initial_state", "exactly one of `random_box` or `given` is required")),
        };
        let cfg = SimConfig {
            dt: overrides.dt.or(s.dt).unwrap_or(defaults.dt),
            duration: s.duration,
            integrator: s.integrator.unwrap_or(defaults.integrator),
            initial_state,
            seed: overrides.seed.or(s.seed).unwrap_or(defaults.seed),
            observer_init: s.observer_init.unwrap_or(defaults.observer_init),
            removal: s.removal.unwrap_or(defaults.removal) && !overrides.no_removal,
            warmup: s.warmup,
            debounce: s.debounce.unwrap_or(defaults.debounce),
            thresholds: ThresholdConfig {
                margin: s.threshold_margin.unwrap_or(th_default.margin),
                transient_cutoff: s.transient_cutoff.unwrap_or(th_default.transient_cutoff),
                floor: s.threshold_floor.unwrap_or(th_default.floor),
                calibration_duration: s.calibration_duration.unwrap_or(th_default.calibration_duration),
            },
        };
        if !(cfg.dt > 0.0 && cfg.dt.is_finite()) {
            return Err(field_err("sim.dt", "must be positive"));
        }
        if !(cfg.duration >= cfg.dt && cfg.duration.is_finite()) {
            return Err(field_err("sim.duration", "must be finite and at least dt"));
        }
        if cfg.debounce < 0.0 {
            return Err(field_err("sim.debounce", "must be nonnegative"));
        }
        if !(cfg.thresholds.margin > 0.0) {
            return Err(field_err("sim.threshold_margin", "must be positive"));
        }
        if !(cfg.thresholds.floor > 0.0) {
            return Err(field_err("sim.threshold_floor", "must be positive"));
        }
        if cfg.thresholds.calibration_duration < cfg.thresholds.transient_cutoff {
            return Err(field_err("sim.calibration_duration", "must cover the transient cutoff"));
        }
        if let InitialState::RandomBox { half_width } = cfg.initial_state {
            if !(half_width >= 0.0 && half_width.is_finite()) {
                return Err(field_err("sim.initial_state.random_box", "must be nonnegative"));
            }
        }
        Ok(cfg)
    }

    /// Fully validated run inputs.
    pub fn resolve(&self, overrides: &Overrides) -> Result<RunSetup, ScenarioError> {
        let fleet = self.fleet()?;
        let node_dim = fleet.node_dim();
        let attack = self.attack(node_dim, &fleet.graph)?;
        let monitors = self.monitors(node_dim)?;
        let config = self.sim_config(overrides)?;
        if let InitialState::Given(v) = &config.initial_state {
            if v.len() != fleet.state_dim() {
                return Err(field_err("sim.initial_state.given", format!("needs {} entries", fleet.state_dim())));
            }
        }
        Ok(RunSetup { fleet, attack, monitors, config })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"{
        "graph": { "cycle": 6 },
        "formation": { "hexagon": { "center": [0, 0], "radius": 2 } },
        "gains": { "k_pos": -1.0, "k_vel": -2.0 },
        "attack": { "kind": "node", "target": 2, "window": [0.5, 4.0], "magnitude": 2.0 },
        "monitors": { "attack_model": "node" },
        "sim": { "duration": 10.0, "seed": 1 }
    }"#;

    #[test]
    fn base_resolves() {
        let s = Scenario::from_json(BASE).unwrap();
        let setup = s.resolve(&Overrides::default()).unwrap();
        assert_eq!(setup.fleet.graph.node_ids(), &[1, 2, 3, 4, 5, 6]);
        assert_eq!(setup.attack.unwrap().target, 2);
        assert_eq!(setup.config.dt, 0.01);
        let over = s.resolve(&Overrides { seed: Some(9), dt: Some(0.005), no_removal: true }).unwrap();
        assert_eq!((over.config.seed, over.config.dt, over.config.removal), (9, 0.005, false));
    }

    #[test]
    fn unknown_key_rejected() {
        let bad = BASE.replace("\"sim\": {", "\"sim\": { \"speed\": 3,");
        let err = Scenario::from_json(&bad).unwrap_err().to_string();
        assert!(err.contains("unknown field `speed`"), "{err}");
    }

    #[test]
    fn reversed_window_names_field() {
        let bad = BASE.replace("[0.5, 4.0]", "[4.0, 0.5]");
        let err = Scenario::from_json(&bad).unwrap().resolve(&Overrides::default()).unwrap_err().to_string();
        assert!(err.starts_with("attack.window"), "{err}");
    }

    #[test]
    fn missing_gain_is_designed() {
        let text = BASE.replace("\"gains\": { \"k_pos\": -1.0, \"k_vel\": -2.0 },", "");
        let setup = Scenario::from_json(&text).unwrap().resolve(&Overrides::default()).unwrap();
        assert!(setup.fleet.certificate().stable);
    }
}
