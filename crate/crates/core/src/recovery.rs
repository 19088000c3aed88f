//! Removal of a compromised UAV and reconfiguration of the survivors.

use nalgebra::DVector;
use thiserror::Error;

use crate::formation::{self, FleetModel, FormationError, FormationSpec, GainCertificate};
use crate::monitor::{self, MonitorBank, MonitorConfig, MonitorError};
use crate::topology::TopologyError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RecoveryError {
    #[error("removal of node {node} refused: {source}")]
    Refused { node: usize, source: TopologyError },
    #[error(transparent)]
    Formation(#[from] FormationError),
    #[error(transparent)]
    Monitor(#[from] MonitorError),
}

/// Survivor fleet plus what changed.
#[derive(Debug, Clone)]
pub struct Reconfiguration {
    pub fleet: FleetModel,
    pub removed: usize,
    /// The gain changed in the redesign.
    pub gain_redesigned: bool,
    /// Certificate of the new gain on the survivor spectrum.
    pub certificate: GainCertificate,
    /// Certificate of the previous gain on the survivor spectrum.
    pub carried: GainCertificate,
    /// The graph was 2-connected before removal.
    pub was_two_connected: bool,
}

/// Removes node `k`, keeps the survivors' offsets and re-calculates the
/// gain for the survivor spectrum. The previous gain is kept only when the
/// search finds nothing better.
pub fn remove_and_reconfigure(fleet: &FleetModel, k: usize) -> Result<Reconfiguration, RecoveryError> {
    let was_two_connected = fleet.graph.is_two_connected();
    let graph = fleet.graph.remove_node(k).map_err(|source| RecoveryError::Refused { node: k, source })?;
    let removed_idx = fleet.graph.index_of(k).map_err(|source| RecoveryError::Refused { node: k, source })?;
    let offsets = fleet
        .formation
        .offsets
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != removed_idx)
        .map(|(_, o)| o.clone())
        .collect();
    let spectrum = graph.normalized_spectrum();
    let carried = formation::certify_gain(&fleet.uav, fleet.gain, &spectrum);
    let certificate = match formation::design_gain(&fleet.uav, &spectrum) {
        Ok(c) if !carried.stable || c.max_real_part < carried.max_real_part => c,
        Ok(_) => carried.clone(),
        Err(e) if !carried.stable => return Err(e.into()),
        Err(_) => carried.clone(),
    };
    let gain_redesigned = certificate.gain != fleet.gain;
    let fleet = FleetModel::new(graph, fleet.uav.clone(), certificate.gain, FormationSpec { offsets })?;
    Ok(Reconfiguration { fleet, removed: k, gain_redesigned, certificate, carried, was_two_connected })
}

/// Rebuilds one bank per node of `fleet`.
pub fn rebuild_banks(fleet: &FleetModel, cfg: &MonitorConfig) -> Result<Vec<MonitorBank>, MonitorError> {
    fleet.graph.node_ids().iter().map(|&id| monitor::build_bank(fleet, id, cfg)).collect()
}

/// Restricts a stacked vector of `old` to the nodes still present in `new`.
pub fn restrict_state(old: &FleetModel, new: &FleetModel, x: &DVector<f64>) -> DVector<f64> {
    let n = old.node_dim();
    let mut out = DVector::zeros(new.state_dim());
    for (j, &id) in new.graph.node_ids().iter().enumerate() {
        let i = old.graph.index_of(id).expect("survivor present in the old fleet");
        out.rows_mut(j * n, n).copy_from(&x.rows(i * n, n));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formation::{Gain, UavModel};
    use crate::topology::FormationGraph;

    fn fleet(graph: FormationGraph) -> FleetModel {
        let n = graph.n_nodes();
        FleetModel::new(
            graph,
            UavModel::double_integrator(2),
            Gain { k_pos: -1.0, k_vel: -2.0 },
            FormationSpec::polygon(n, [0.0, 0.0], 2.0),
        )
        .unwrap()
    }

    #[test]
    fn hexagon_loses_node_two() {
        let hex = fleet(FormationGraph::cycle(6).unwrap().with_ids((1..=6).collect()).unwrap());
        let r = remove_and_reconfigure(&hex, 2).unwrap();
        assert_eq!(r.fleet.graph.node_ids(), &[1, 3, 4, 5, 6]);
        assert!(r.fleet.graph.is_connected());
        assert_eq!(r.fleet.graph.degrees(), vec![1, 1, 2, 2, 2]);
        assert_eq!(r.fleet.formation.offsets[1], hex.formation.offsets[2]);
        assert!(r.certificate.stable);
        assert!(r.carried.stable);
        assert!(r.certificate.max_real_part <= r.carried.max_real_part);
        // no survivor input depends on the removed node any more
        let bkl = r.fleet.feedback();
        assert_eq!(bkl.nrows(), 20);
        let banks = rebuild_banks(&r.fleet, &MonitorConfig::default()).unwrap();
        assert_eq!(banks[0].targets, vec![6, 1]);
    }

    #[test]
    fn triangle_to_edge() {
        let k3 = fleet(FormationGraph::complete(3).unwrap());
        let r = remove_and_reconfigure(&k3, 0).unwrap();
        let banks = rebuild_banks(&r.fleet, &MonitorConfig::default()).unwrap();
        assert_eq!(banks.len(), 2);
        for b in banks {
            assert_eq!(b.targets.len(), 2);
        }
    }

    #[test]
    fn second_removal_on_path_refused() {
        let hex = fleet(FormationGraph::cycle(6).unwrap().with_ids((1..=6).collect()).unwrap());
        let p5 = remove_and_reconfigure(&hex, 2).unwrap().fleet;
        assert!(!p5.graph.is_two_connected());
        assert!(matches!(remove_and_reconfigure(&p5, 4), Err(RecoveryError::Refused { node: 4, .. })));
    }

    #[test]
    fn restriction_keeps_survivor_blocks() {
        let hex = fleet(FormationGraph::cycle(6).unwrap().with_ids((1..=6).collect()).unwrap());
        let r = remove_and_reconfigure(&hex, 2).unwrap();
        let x = DVector::from_fn(24, |i, _| i as f64);
        let xs = restrict_state(&hex, &r.fleet, &x);
        assert_eq!(xs.rows(0, 4), x.rows(0, 4));
        assert_eq!(xs.rows(4, 4), x.rows(8, 4));
    }
}
