//! Transient simulation of a transmission grid with synchronous generators
//! and grid-forming storage, under droop, consensus or safety-consensus
//! secondary control.
//!
//! The numerical core is generic over the scalar type; the aliases below fix
//! it to `f64`, which the CLI uses.

// `!(x > 0)` is deliberate throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod control;
pub mod devices;
mod linalg;
pub mod netmodel;
pub mod scalar;
pub mod scenario_io;
pub mod simulator;

pub use scalar::Scalar;

pub type GridModel64 = netmodel::GridModel<f64>;
pub type NetworkSolution64 = netmodel::NetworkSolution<f64>;
pub type SgParams64 = devices::SgParams<f64>;
pub type GfmParams64 = devices::GfmParams<f64>;
pub type ControlConfig64 = control::ControlConfig<f64>;
pub type DeviceSet64 = simulator::DeviceSet<f64>;
pub type SystemSpec64 = scenario_io::SystemSpec<f64>;
pub type ScenarioScript64 = scenario_io::ScenarioScript<f64>;
pub type TrajectoryLog64 = simulator::TrajectoryLog<f64>;
pub type Simulator64 = simulator::Simulator<f64>;

pub type GridModel32 = netmodel::GridModel<f32>;
pub type TrajectoryLog32 = simulator::TrajectoryLog<f32>;
