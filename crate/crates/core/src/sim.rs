//! Fixed-step integration of the double-integrator fleet.
//!
//! `run_closed_loop` is the zero-delay baseline: every vehicle sees the exact
//! current state of its neighbours. The networked variant lives in
//! [`crate::distsim`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{
    self, desired_gap, ControlError, ControllerParams, EdgeError, Neighbor, NeighborView,
    SpacingPolicy, VehicleState,
};
use crate::junction::{PlatoonOrder, VehicleSpec};
use crate::topology::CommGraph;

pub const DIVERGENCE_SPEED_MPS: f64 = 100.0;
pub const DEFAULT_INPUT_CLAMP_MPS2: f64 = 4.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("non-finite input for vehicle {0}")]
    NonFiniteInput(String),
    #[error("vehicle {id} diverged at t={time_s:.3}s (|v| = {speed:.1} m/s)")]
    Diverged { id: String, time_s: f64, speed: f64 },
    #[error("communication graph is not connected")]
    Disconnected,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Control(#[from] ControlError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    #[default]
    SemiImplicitEuler,
    Rk4,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub dt_s: f64,
    pub duration_s: f64,
    pub integrator: Integrator,
    pub input_clamp_mps2: Option<f64>,
    pub seed: u64,
    /// Run even when the graph is disconnected.
    pub allow_disconnected: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt_s: 0.01,
            duration_s: 30.0,
            integrator: Integrator::SemiImplicitEuler,
            input_clamp_mps2: Some(DEFAULT_INPUT_CLAMP_MPS2),
            seed: 0,
            allow_disconnected: false,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.dt_s.is_finite() && self.dt_s > 0.0) {
            return Err(SimError::Config("dt_s must be positive".into()));
        }
        if !(self.duration_s.is_finite() && self.duration_s >= self.dt_s) {
            return Err(SimError::Config("duration_s must be at least dt_s".into()));
        }
        if let Some(c) = self.input_clamp_mps2 {
            if !(c.is_finite() && c > 0.0) {
                return Err(SimError::Config("input_clamp_mps2 must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.duration_s / self.dt_s).round() as usize
    }

    /// Applies the actuator limit, if any.
    pub fn clamped(&self, u: f64) -> f64 {
        self.clamp(u)
    }

    fn clamp(&self, u: f64) -> f64 {
        match self.input_clamp_mps2 {
            Some(c) => u.clamp(-c, c),
            None => u,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FleetMember {
    pub spec: VehicleSpec,
    pub initial: VehicleState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FleetState {
    pub time_s: f64,
    pub vehicles: Vec<VehicleState>,
}

/// Advances every vehicle by one step with the inputs held constant.
pub fn step(
    fleet: &FleetState,
    ids: &[String],
    inputs: &[f64],
    cfg: &SimConfig,
) -> Result<FleetState, SimError> {
    if inputs.len() != fleet.vehicles.len() {
        return Err(SimError::Config("one input per vehicle required".into()));
    }
    let dt = cfg.dt_s;
    let mut next = Vec::with_capacity(inputs.len());
    for (k, (s, &u)) in fleet.vehicles.iter().zip(inputs).enumerate() {
        if !u.is_finite() {
            let id = ids.get(k).cloned().unwrap_or_else(|| k.to_string());
            return Err(SimError::NonFiniteInput(id));
        }
        let u = cfg.clamp(u);
        let (p, v) = match cfg.integrator {
            Integrator::SemiImplicitEuler => {
                let v = s.speed_mps + u * dt;
                (s.progress_m + v * dt, v)
            }
            // Four stages of ṗ = v, v̇ = u with u frozen over the step.
            Integrator::Rk4 => {
                let (k1p, k1v) = (s.speed_mps, u);
                let (k2p, k2v) = (s.speed_mps + 0.5 * dt * k1v, u);
                let (k3p, k3v) = (s.speed_mps + 0.5 * dt * k2v, u);
                let (k4p, k4v) = (s.speed_mps + dt * k3v, u);
                (
                    s.progress_m + dt / 6.0 * (k1p + 2.0 * k2p + 2.0 * k3p + k4p),
                    s.speed_mps + dt / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v),
                )
            }
        };
        next.push(VehicleState { progress_m: p, speed_mps: v, input_mps2: u });
    }
    Ok(FleetState { time_s: fleet.time_s + dt, vehicles: next })
}

/// Per-step record of a run. Vehicle-indexed vectors follow scenario order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrajectoryLog {
    pub ids: Vec<String>,
    pub times: Vec<f64>,
    pub progress: Vec<Vec<f64>>,
    pub speed: Vec<Vec<f64>>,
    pub input: Vec<Vec<f64>>,
    /// `(follower, leader)` scenario indices, one per undirected graph edge.
    pub edges: Vec<(usize, usize)>,
    pub edge_errors: Vec<Vec<f64>>,
    /// Error of each vehicle w.r.t. its crossing-order predecessor.
    pub pred_errors: Vec<Vec<Option<f64>>>,
    pub lyapunov: Option<Vec<f64>>,
    pub global_seq_used: Option<Vec<Vec<Option<u64>>>>,
}

impl TrajectoryLog {
    fn new(ids: Vec<String>, edges: Vec<(usize, usize)>, with_lyapunov: bool) -> Self {
        let n = ids.len();
        let m = edges.len();
        Self {
            ids,
            times: Vec::new(),
            progress: vec![Vec::new(); n],
            speed: vec![Vec::new(); n],
            input: vec![Vec::new(); n],
            edges,
            edge_errors: vec![Vec::new(); m],
            pred_errors: vec![Vec::new(); n],
            lyapunov: with_lyapunov.then(Vec::new),
            global_seq_used: None,
        }
    }

    /// Empty log laid out for the edges and diagnostics of `formation`.
    pub fn for_formation(ids: Vec<String>, formation: &Formation<'_>) -> Self {
        Self::new(ids, formation.oriented_edges(), formation.spacing.is_constant())
    }

    /// Appends one sample.
    pub fn push(&mut self, formation: Option<&Formation<'_>>, fleet: &FleetState, inputs: &[f64]) -> Result<(), SimError> {
        record(self, formation, fleet, inputs)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Largest `|e_ij|` over all edges at each sample.
    pub fn max_abs_edge_error(&self) -> Vec<f64> {
        (0..self.times.len())
            .map(|k| self.edge_errors.iter().map(|e| e[k].abs()).fold(0.0, f64::max))
            .collect()
    }

    pub fn final_state(&self, vehicle: usize) -> VehicleState {
        let k = self.times.len() - 1;
        VehicleState {
            progress_m: self.progress[vehicle][k],
            speed_mps: self.speed[vehicle][k],
            input_mps2: self.input[vehicle][k],
        }
    }
}

/// Everything needed to evaluate the closed-loop field.
#[derive(Debug, Clone)]
pub struct Formation<'a> {
    pub order: &'a PlatoonOrder,
    pub graph: &'a CommGraph,
    pub params: ControllerParams,
    pub spacing: SpacingPolicy,
}

impl Formation<'_> {
    /// Desired gap `p*_ij` between scenario indices `i` and `j`, using the
    /// speed of whichever of the two crosses later.
    pub fn pair_gap(&self, i: usize, j: usize, speed_i: f64, speed_j: f64) -> Result<f64, ControlError> {
        let (ri, rj) = (self.order.rank_at(i), self.order.rank_at(j));
        let follower_speed = if ri > rj { speed_i } else { speed_j };
        desired_gap(&self.spacing, follower_speed, rj as i64 - ri as i64)
    }

    pub fn pair_error(&self, states: &[VehicleState], i: usize, j: usize) -> Result<f64, ControlError> {
        let gap = self.pair_gap(i, j, states[i].speed_mps, states[j].speed_mps)?;
        Ok(states[i].progress_m - states[j].progress_m - gap)
    }

    /// Undirected edges oriented as `(follower, leader)`, sorted by follower rank.
    pub fn oriented_edges(&self) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = self
            .graph
            .edges()
            .into_iter()
            .map(|(a, b)| {
                let (a, b) = (a - 1, b - 1);
                if self.order.rank_at(a) > self.order.rank_at(b) {
                    (a, b)
                } else {
                    (b, a)
                }
            })
            .collect();
        out.sort_by_key(|&(f, l)| (self.order.rank_at(f), self.order.rank_at(l)));
        out
    }

    pub fn inputs(&self, states: &[VehicleState]) -> Result<Vec<f64>, ControlError> {
        (0..states.len())
            .map(|i| {
                let view: NeighborView = self
                    .graph
                    .neighbors(i + 1)
                    .map_err(|e| ControlError::Config(e.to_string()))?
                    .into_iter()
                    .map(|j1| {
                        let j = j1 - 1;
                        Ok(Neighbor {
                            id: j,
                            progress_m: states[j].progress_m,
                            speed_mps: states[j].speed_mps,
                            desired_gap_m: self.pair_gap(i, j, states[i].speed_mps, states[j].speed_mps)?,
                        })
                    })
                    .collect::<Result<_, ControlError>>()?;
                control::control_input(&states[i], &view, &self.params)
            })
            .collect()
    }

    /// Lyapunov value with each edge once and speeds relative to the mean.
    pub fn lyapunov(&self, states: &[VehicleState]) -> Result<f64, ControlError> {
        let errors: Vec<EdgeError> = self
            .oriented_edges()
            .into_iter()
            .map(|(f, l)| self.pair_error(states, f, l).map(EdgeError::new))
            .collect::<Result<_, _>>()?;
        let mean = states.iter().map(|s| s.speed_mps).sum::<f64>() / states.len() as f64;
        let rel: Vec<f64> = states.iter().map(|s| s.speed_mps - mean).collect();
        control::lyapunov_value(&errors, &rel, &self.params, &self.spacing)
    }
}

fn record(
    log: &mut TrajectoryLog,
    formation: Option<&Formation<'_>>,
    fleet: &FleetState,
    inputs: &[f64],
) -> Result<(), SimError> {
    log.times.push(fleet.time_s);
    for (i, s) in fleet.vehicles.iter().enumerate() {
        log.progress[i].push(s.progress_m);
        log.speed[i].push(s.speed_mps);
        log.input[i].push(inputs[i]);
    }
    if let Some(f) = formation {
        for (k, &(fo, le)) in log.edges.iter().enumerate() {
            log.edge_errors[k].push(f.pair_error(&fleet.vehicles, fo, le)?);
        }
        let by_rank = f.order.indices_by_rank();
        for (pos, &i) in by_rank.iter().enumerate() {
            let e = if pos == 0 {
                None
            } else {
                Some(f.pair_error(&fleet.vehicles, i, by_rank[pos - 1])?)
            };
            log.pred_errors[i].push(e);
        }
        if let Some(v) = log.lyapunov.as_mut() {
            v.push(f.lyapunov(&fleet.vehicles)?);
        }
    }
    Ok(())
}

fn check_divergence(ids: &[String], fleet: &FleetState) -> Result<(), SimError> {
    for (id, s) in ids.iter().zip(&fleet.vehicles) {
        if !s.speed_mps.is_finite() || s.speed_mps.abs() > DIVERGENCE_SPEED_MPS {
            return Err(SimError::Diverged {
                id: id.clone(),
                time_s: fleet.time_s,
                speed: s.speed_mps.abs(),
            });
        }
    }
    Ok(())
}

fn initial_fleet(members: &[FleetMember]) -> FleetState {
    FleetState { time_s: 0.0, vehicles: members.iter().map(|m| m.initial).collect() }
}

/// Zero-delay closed-loop run of the distributed controller.
pub fn run_closed_loop(
    members: &[FleetMember],
    formation: &Formation<'_>,
    cfg: &SimConfig,
) -> Result<TrajectoryLog, SimError> {
    cfg.validate()?;
    if !formation.graph.is_connected() {
        if cfg.allow_disconnected {
            log::warn!("running on a disconnected communication graph");
        } else {
            return Err(SimError::Disconnected);
        }
    }
    let ids: Vec<String> = members.iter().map(|m| m.spec.id.clone()).collect();
    let mut log = TrajectoryLog::new(ids.clone(), formation.oriented_edges(), formation.spacing.is_constant());
    let mut fleet = initial_fleet(members);
    let steps = cfg.steps();
    for k in 0..=steps {
        let raw = formation.inputs(&fleet.vehicles)?;
        if let Some(i) = raw.iter().position(|u| !u.is_finite()) {
            return Err(SimError::NonFiniteInput(ids[i].clone()));
        }
        let applied: Vec<f64> = raw.iter().map(|&u| cfg.clamp(u)).collect();
        record(&mut log, Some(formation), &fleet, &applied)?;
        if k == steps {
            break;
        }
        fleet = match cfg.integrator {
            Integrator::SemiImplicitEuler => step(&fleet, &ids, &applied, cfg)?,
            Integrator::Rk4 => rk4_closed_loop(&fleet, formation, cfg)?,
        };
        fleet.time_s = (k + 1) as f64 * cfg.dt_s;
        check_divergence(&ids, &fleet)?;
    }
    Ok(log)
}

fn rk4_closed_loop(
    fleet: &FleetState,
    formation: &Formation<'_>,
    cfg: &SimConfig,
) -> Result<FleetState, SimError> {
    let dt = cfg.dt_s;
    let field = |states: &[VehicleState]| -> Result<Vec<(f64, f64)>, SimError> {
        let u = formation.inputs(states)?;
        Ok(states.iter().zip(u).map(|(s, u)| (s.speed_mps, cfg.clamp(u))).collect())
    };
    let shifted = |k: &[(f64, f64)], h: f64| -> Vec<VehicleState> {
        fleet
            .vehicles
            .iter()
            .zip(k)
            .map(|(s, &(dp, dv))| VehicleState::new(s.progress_m + h * dp, s.speed_mps + h * dv))
            .collect()
    };
    let k1 = field(&fleet.vehicles)?;
    let k2 = field(&shifted(&k1, dt / 2.0))?;
    let k3 = field(&shifted(&k2, dt / 2.0))?;
    let k4 = field(&shifted(&k3, dt))?;
    let vehicles = fleet
        .vehicles
        .iter()
        .enumerate()
        .map(|(i, s)| VehicleState {
            progress_m: s.progress_m + dt / 6.0 * (k1[i].0 + 2.0 * k2[i].0 + 2.0 * k3[i].0 + k4[i].0),
            speed_mps: s.speed_mps + dt / 6.0 * (k1[i].1 + 2.0 * k2[i].1 + 2.0 * k3[i].1 + k4[i].1),
            input_mps2: k1[i].1,
        })
        .collect();
    Ok(FleetState { time_s: fleet.time_s + dt, vehicles })
}

/// Constant-velocity rollout (`u ≡ 0`).
pub fn run_uncontrolled(
    members: &[FleetMember],
    formation: Option<&Formation<'_>>,
    cfg: &SimConfig,
) -> Result<TrajectoryLog, SimError> {
    cfg.validate()?;
    let ids: Vec<String> = members.iter().map(|m| m.spec.id.clone()).collect();
    let edges = formation.map(|f| f.oriented_edges()).unwrap_or_default();
    let mut log = TrajectoryLog::new(ids.clone(), edges, false);
    let zeros = vec![0.0; members.len()];
    let steps = cfg.steps();
    for k in 0..=steps {
        let t = k as f64 * cfg.dt_s;
        let fleet = FleetState {
            time_s: t,
            vehicles: members
                .iter()
                .map(|m| VehicleState::new(m.initial.progress_m + m.initial.speed_mps * t, m.initial.speed_mps))
                .collect(),
        };
        record(&mut log, formation, &fleet, &zeros)?;
    }
    Ok(log)
}
