//! Scenario files: TOML describing the fleet, junction, controller,
//! integration settings and network model of one run.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{AgentConfig, DEFAULT_CONTROL_RATE_HZ, DEFAULT_SAFE_DECELERATION_MPS2, DEFAULT_SEND_RATE_HZ};
use crate::control::{ControllerParams, SpacingMode, SpacingPolicy, VehicleState};
use crate::junction::{assign_crossing_order, JunctionGeometry, PlatoonOrder, VehicleSpec};
use crate::manager::{DEFAULT_BROADCAST_RATE_HZ, DEFAULT_STALE_TIMEOUT_MS};
use crate::net::LatencyModel;
use crate::protocol::VehicleType;
use crate::sim::{FleetMember, SimConfig};
use crate::topology::{CommGraph, TopologySpec};

/// The bundled three-vehicle scenario, embedded for tests.
pub const TABLE2_SCENARIO: &str = include_str!("../../../scenarios/table2.scenario");

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("scenario parse error: {0}")]
    Parse(String),
    #[error("invalid `{field}`: {message}")]
    Field { field: String, message: String },
}

fn field(name: impl Into<String>, message: impl ToString) -> ScenarioError {
    ScenarioError::Field { field: name.into(), message: message.to_string() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleEntry {
    pub id: String,
    pub length_m: f64,
    pub p0: f64,
    pub v0: f64,
    #[serde(default = "default_entry")]
    pub entry_road: u32,
    #[serde(default = "default_exit")]
    pub exit_road: u32,
    #[serde(default = "default_vehicle_type")]
    pub vehicle_type: VehicleType,
}

fn default_entry() -> u32 {
    1
}
fn default_exit() -> u32 {
    3
}
fn default_vehicle_type() -> VehicleType {
    VehicleType::Autonomous
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSection {
    pub alpha: f64,
    pub r: f64,
    pub h: f64,
    #[serde(default = "default_mode")]
    pub mode: SpacingMode,
    /// Only read in `constant_gap` mode; defaults to the mean initial speed.
    #[serde(default)]
    pub reference_speed_mps: Option<f64>,
}

fn default_mode() -> SpacingMode {
    SpacingMode::HeadwayLiteral
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolSection {
    pub broadcast_rate_hz: f64,
    pub send_rate_hz: f64,
    pub control_rate_hz: f64,
    pub stale_timeout_ms: u64,
    pub safe_deceleration_mps2: f64,
}

impl Default for ProtocolSection {
    fn default() -> Self {
        Self {
            broadcast_rate_hz: DEFAULT_BROADCAST_RATE_HZ,
            send_rate_hz: DEFAULT_SEND_RATE_HZ,
            control_rate_hz: DEFAULT_CONTROL_RATE_HZ,
            stale_timeout_ms: DEFAULT_STALE_TIMEOUT_MS,
            safe_deceleration_mps2: DEFAULT_SAFE_DECELERATION_MPS2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub topology: TopologySpec,
    pub junction: JunctionGeometry,
    pub controller: ControllerSection,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub network: LatencyModel,
    #[serde(default)]
    pub protocol: ProtocolSection,
    pub vehicles: Vec<VehicleEntry>,
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn table2() -> Self {
        Self::from_toml_str(TABLE2_SCENARIO).expect("bundled scenario is valid")
    }

    /// Runs every module-level validation, naming the offending field.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        self.params()?;
        self.spacing()?;
        self.junction.validate().map_err(|e| field("junction", e))?;
        self.sim.validate().map_err(|e| field("sim", e))?;
        self.network.validate().map_err(|e| field("network", e))?;
        let p = &self.protocol;
        for (name, v) in [
            ("protocol.broadcast_rate_hz", p.broadcast_rate_hz),
            ("protocol.send_rate_hz", p.send_rate_hz),
            ("protocol.control_rate_hz", p.control_rate_hz),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(field(name, "must be positive"));
            }
        }
        if p.stale_timeout_ms as f64 <= 1000.0 / p.broadcast_rate_hz {
            return Err(field("protocol.stale_timeout_ms", "must exceed the broadcast interval"));
        }
        if !(p.safe_deceleration_mps2.is_finite() && p.safe_deceleration_mps2 <= 0.0) {
            return Err(field("protocol.safe_deceleration_mps2", "must be <= 0"));
        }
        if self.vehicles.is_empty() {
            return Err(field("vehicles", "at least one vehicle is required"));
        }
        for (k, v) in self.vehicles.iter().enumerate() {
            let at = |f: &str| format!("vehicles[{k}].{f}");
            if v.id.is_empty() {
                return Err(field(at("id"), "must not be empty"));
            }
            if self.vehicles[..k].iter().any(|o| o.id == v.id) {
                return Err(field(at("id"), format!("duplicate id `{}`", v.id)));
            }
            if !(v.length_m.is_finite() && v.length_m > 0.0) {
                return Err(field(at("length_m"), "must be positive"));
            }
            if !v.p0.is_finite() {
                return Err(field(at("p0"), "must be finite"));
            }
            if !(v.v0.is_finite() && v.v0 >= 0.0) {
                return Err(field(at("v0"), "must be finite and >= 0"));
            }
            for (name, road) in [("entry_road", v.entry_road), ("exit_road", v.exit_road)] {
                if road == 0 || road > self.junction.roads {
                    return Err(field(at(name), format!("must lie in 1..={}", self.junction.roads)));
                }
            }
        }
        self.graph().map_err(|e| field("topology", e))?;
        Ok(())
    }

    pub fn params(&self) -> Result<ControllerParams, ScenarioError> {
        ControllerParams::new(self.controller.alpha).map_err(|e| field("controller.alpha", e))
    }

    pub fn spacing(&self) -> Result<SpacingPolicy, ScenarioError> {
        let c = &self.controller;
        let vref = match c.mode {
            SpacingMode::HeadwayLiteral => 0.0,
            SpacingMode::ConstantGap => c.reference_speed_mps.unwrap_or_else(|| {
                self.vehicles.iter().map(|v| v.v0).sum::<f64>() / self.vehicles.len().max(1) as f64
            }),
        };
        if !(c.r.is_finite() && c.r > 0.0) {
            return Err(field("controller.r", "must be positive"));
        }
        if !(c.h.is_finite() && c.h >= 0.0) {
            return Err(field("controller.h", "must be >= 0"));
        }
        SpacingPolicy::new(c.r, c.h, c.mode, vref).map_err(|e| field("controller.reference_speed_mps", e))
    }

    pub fn ids(&self) -> Vec<String> {
        self.vehicles.iter().map(|v| v.id.clone()).collect()
    }

    pub fn specs(&self) -> Vec<VehicleSpec> {
        self.vehicles
            .iter()
            .map(|v| VehicleSpec { id: v.id.clone(), length_m: v.length_m, entry_road: v.entry_road, exit_road: v.exit_road })
            .collect()
    }

    pub fn members(&self) -> Vec<FleetMember> {
        self.specs()
            .into_iter()
            .zip(&self.vehicles)
            .map(|(spec, v)| FleetMember { spec, initial: VehicleState::new(v.p0, v.v0) })
            .collect()
    }

    pub fn initial_order(&self) -> PlatoonOrder {
        let states: Vec<(String, VehicleState)> =
            self.vehicles.iter().map(|v| (v.id.clone(), VehicleState::new(v.p0, v.v0))).collect();
        assign_crossing_order(&states)
    }

    pub fn graph(&self) -> Result<CommGraph, crate::topology::TopologyError> {
        self.topology.resolve(self.vehicles.len(), &self.initial_order())
    }

    pub fn agent_config(&self, id: &str) -> Result<AgentConfig, ScenarioError> {
        let v = self
            .vehicles
            .iter()
            .find(|v| v.id == id)
            .ok_or_else(|| field("vehicles", format!("no vehicle with id `{id}`")))?;
        let spec = self.specs().into_iter().find(|s| s.id == id).expect("found above");
        Ok(AgentConfig {
            id: v.id.clone(),
            name: v.id.clone(),
            vehicle_type: v.vehicle_type,
            send_rate_hz: self.protocol.send_rate_hz,
            control_rate_hz: self.protocol.control_rate_hz,
            params: self.params()?,
            spacing: self.spacing()?,
            fleet: self.ids(),
            topology: self.topology.clone(),
            spec,
            geometry: self.junction,
            stale_timeout_ms: self.protocol.stale_timeout_ms,
            safe_deceleration_mps2: self.protocol.safe_deceleration_mps2,
        })
    }
}
