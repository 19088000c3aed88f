//! Consensus formation flight of UAVs with distributed cyber attack
//! detection, isolation and removal of the compromised vehicle.
//!
//! * [`topology`]: communication graph, Laplacians, connectivity.
//! * [`formation`]: UAV dynamics, consensus law, gain design.
//! * [`uio`]: unknown input observer synthesis and existence tests.
//! * [`attack`]: node and broadcast attacks.
//! * [`monitor`]: per-UAV observer banks and the isolation rule.
//! * [`recovery`]: removal of an isolated UAV.
//! * [`simkit`]: the joint fixed-step simulation and its trace.
//! * [`cli`]: scenario files and commands.

pub mod attack;
pub mod cli;
pub mod formation;
pub mod linalg;
pub mod monitor;
pub mod recovery;
pub mod simkit;
pub mod spectrum;
pub mod topology;
pub mod uio;
