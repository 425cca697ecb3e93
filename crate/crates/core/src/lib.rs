//! Cooperative intersection crossing: a finite-time formation controller on
//! a virtual platoon, a publish/subscribe traffic manager, vehicle agents,
//! transports and the metrics that evaluate a run.

pub mod agent;
pub mod control;
pub mod distsim;
pub mod io;
pub mod junction;
pub mod live;
pub mod manager;
pub mod metrics;
pub mod net;
pub mod protocol;
pub mod runner;
pub mod scenario;
pub mod sim;
pub mod topology;

pub use agent::{AgentConfig, ControlDecision, ControlMode, VehicleAgent};
pub use control::{
    control_input, desired_gap, sig, ControlError, ControllerParams, Neighbor, NeighborView, SpacingMode,
    SpacingPolicy, VehicleState,
};
pub use junction::{CollisionClass, JunctionGeometry, PlatoonOrder, VehicleSpec};
pub use manager::Registry;
pub use metrics::{DelayKind, DelaySample, DelayStats, RunReport};
pub use net::LatencyModel;
pub use protocol::{Frame, StatusMessage, TrafficUpdate};
pub use runner::{simulate, RunArtifacts, RunMode, RunOptions};
pub use scenario::Scenario;
pub use sim::{Integrator, SimConfig, TrajectoryLog};
pub use topology::{CommGraph, TopologySpec};
