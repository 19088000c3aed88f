//! Time-windowed cyber attacks on a single UAV.
//!
//! A node attack adds `f(t)` to one channel of the target's state derivative.
//! A broadcast attack adds `f(t)` to one channel of the state the target
//! sends to its neighbors; its own internal measurement stays clean.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttackKind {
    NodeAttack,
    BroadcastOffset,
    BroadcastNoise,
}

impl AttackKind {
    pub fn is_broadcast(self) -> bool {
        matches!(self, AttackKind::BroadcastOffset | AttackKind::BroadcastNoise)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttackError {
    #[error("attack window start {start} must be before its end {end}")]
    Window { start: f64, end: f64 },
    #[error("attack window bounds must be finite and nonnegative")]
    WindowBounds,
    #[error("channel {channel} is outside the {dim}-dimensional UAV state")]
    Channel { channel: usize, dim: usize },
    #[error("magnitude must be finite")]
    Magnitude,
    #[error("noise magnitude (standard deviation) must be nonnegative")]
    NegativeNoise,
}

/// One attack on node `target`, active for `window[0] <= t < window[1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackScenario {
    pub kind: AttackKind,
    pub target: usize,
    pub window: [f64; 2],
    /// Index into the target's local state (`0` is the x position).
    pub channel: usize,
    /// Offset size, or standard deviation for noise.
    pub magnitude: f64,
    pub seed: u64,
}

impl AttackScenario {
    pub fn validate(&self, node_dim: usize) -> Result<(), AttackError> {
        let [start, end] = self.window;
        if !start.is_finite() || !end.is_finite() || start < 0.0 {
            return Err(AttackError::WindowBounds);
        }
        if start >= end {
            return Err(AttackError::Window { start, end });
        }
        if self.channel >= node_dim {
            return Err(AttackError::Channel { channel: self.channel, dim: node_dim });
        }
        if !self.magnitude.is_finite() {
            return Err(AttackError::Magnitude);
        }
        if self.kind == AttackKind::BroadcastNoise && self.magnitude < 0.0 {
            return Err(AttackError::NegativeNoise);
        }
        Ok(())
    }

    /// Whether a sample taken at `t` falls inside the window. The small slack
    /// absorbs round-off in accumulated step times.
    pub fn is_active(&self, t: f64) -> bool {
        let eps = 1e-9;
        t >= self.window[0] - eps && t < self.window[1] - eps
    }

    /// Unit direction of the fault in the target's local state.
    pub fn direction(&self, node_dim: usize) -> DVector<f64> {
        let mut d = DVector::zeros(node_dim);
        d[self.channel] = 1.0;
        d
    }
}

/// Fault signal generator; one sample per integration step, held over the step.
#[derive(Debug, Clone)]
pub struct FaultSource {
    scenario: AttackScenario,
    rng: ChaCha8Rng,
}

impl FaultSource {
    pub fn new(scenario: AttackScenario) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(scenario.seed);
        FaultSource { scenario, rng }
    }

    pub fn scenario(&self) -> &AttackScenario {
        &self.scenario
    }

    /// Fault value for the step starting at `t`. Noise draws happen only
    /// inside the window, so the stream position depends on active steps alone.
    pub fn sample(&mut self, t: f64) -> f64 {
        if !self.scenario.is_active(t) {
            return 0.0;
        }
        match self.scenario.kind {
            AttackKind::NodeAttack | AttackKind::BroadcastOffset => self.scenario.magnitude,
            AttackKind::BroadcastNoise => {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                self.scenario.magnitude * z
            }
        }
    }
}

/// Target's local state derivative with the node fault `f` added inside the window.
pub fn apply_node_attack(scenario: &AttackScenario, t: f64, f: f64, xdot_k: &DVector<f64>) -> DVector<f64> {
    let mut out = xdot_k.clone();
    if scenario.kind == AttackKind::NodeAttack && scenario.is_active(t) && f != 0.0 {
        out[scenario.channel] += f;
    }
    out
}

/// Broadcast leaving the target, corrupted by `f` inside the window.
pub fn apply_broadcast_attack(scenario: &AttackScenario, t: f64, f: f64, y_k: &DVector<f64>) -> DVector<f64> {
    let mut out = y_k.clone();
    if scenario.kind.is_broadcast() && scenario.is_active(t) && f != 0.0 {
        out[scenario.channel] += f;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scenario(kind: AttackKind, window: [f64; 2]) -> AttackScenario {
        AttackScenario { kind, target: 2, window, channel: 0, magnitude: 1.5, seed: 7 }
    }

    #[test]
    fn node_attack_windowing() {
        let s = scenario(AttackKind::NodeAttack, [0.5, 4.0]);
        let xd = DVector::from_vec(vec![0.1, 0.2, 0.3, 0.4]);
        assert_eq!(apply_node_attack(&s, 0.2, 1.5, &xd), xd);
        assert_eq!(apply_node_attack(&s, 4.5, 1.5, &xd), xd);
        let hit = apply_node_attack(&s, 1.0, 1.5, &xd);
        assert_eq!(hit[0], 1.6);
        assert_eq!(hit.rows(1, 3), xd.rows(1, 3));
    }

    #[test]
    fn zero_magnitude_is_identity_bitwise() {
        let mut s = scenario(AttackKind::NodeAttack, [0.0, 10.0]);
        s.magnitude = 0.0;
        let mut src = FaultSource::new(s.clone());
        let xd = DVector::from_vec(vec![-0.0, 1.0, 2.0, 3.0]);
        let out = apply_node_attack(&s, 1.0, src.sample(1.0), &xd);
        assert_eq!(out[0].to_bits(), xd[0].to_bits());
    }

    #[test]
    fn broadcast_only_inside_window() {
        let s = scenario(AttackKind::BroadcastOffset, [4.0, 20.0]);
        let mut src = FaultSource::new(s.clone());
        let y = DVector::from_vec(vec![1.0, 0.0, 2.0, 0.0]);
        assert_eq!(apply_broadcast_attack(&s, 3.99, src.sample(3.99), &y), y);
        assert_eq!(apply_broadcast_attack(&s, 4.0, src.sample(4.0), &y)[0], 2.5);
        // node-attack scenarios never touch broadcasts
        let n = scenario(AttackKind::NodeAttack, [0.0, 20.0]);
        assert_eq!(apply_broadcast_attack(&n, 5.0, 1.0, &y), y);
    }

    #[test]
    fn noise_stream_is_reproducible() {
        let s = scenario(AttackKind::BroadcastNoise, [2.0, 5.0]);
        let draw = || {
            let mut src = FaultSource::new(s.clone());
            (0..800).map(|i| src.sample(i as f64 * 0.01)).collect::<Vec<_>>()
        };
        let (a, b) = (draw(), draw());
        assert_eq!(a, b);
        assert!(a[..200].iter().all(|&v| v == 0.0));
        assert!(a[200..500].iter().any(|&v| v != 0.0));
        assert!(a[500..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn validation() {
        assert!(scenario(AttackKind::NodeAttack, [4.0, 0.5]).validate(4).is_err());
        let mut s = scenario(AttackKind::NodeAttack, [0.5, 4.0]);
        assert!(s.validate(4).is_ok());
        s.channel = 4;
        assert_eq!(s.validate(4), Err(AttackError::Channel { channel: 4, dim: 4 }));
        let mut n = scenario(AttackKind::BroadcastNoise, [2.0, 5.0]);
        n.magnitude = -1.0;
        assert_eq!(n.validate(4), Err(AttackError::NegativeNoise));
    }
}
