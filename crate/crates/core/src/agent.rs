//! Mobile-node client logic.
//!
//! The agent owns no I/O. Its three activities (status sender, update
//! receiver, control loop) are methods driven by whichever runtime hosts it:
//! the virtual-clock simulation or the socket client.

use thiserror::Error;

use crate::control::{self, desired_gap, ControlError, ControllerParams, Neighbor, NeighborView, SpacingPolicy, VehicleState};
use crate::junction::{assign_crossing_order, JunctionGeometry, PlatoonOrder, VehicleSpec};
use crate::protocol::{
    ConnectionStatus, Frame, PacketDecision, ProtocolError, SequenceCounter, SequenceFilter, StatusMessage,
    SubscriptionAck, SubscriptionRequest, TrafficUpdate, VehicleType,
};
use crate::topology::{CommGraph, TopologySpec};

pub const DEFAULT_SEND_RATE_HZ: f64 = 20.0;
pub const DEFAULT_CONTROL_RATE_HZ: f64 = 100.0;
pub const DEFAULT_SAFE_DECELERATION_MPS2: f64 = -2.0;

/// Reference point of the synthetic GNSS frame.
const ORIGIN_LAT_DEG: f64 = 57.7089;
const ORIGIN_LON_DEG: f64 = 11.9746;
const EARTH_RADIUS_M: f64 = 6_371_000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error("invalid agent configuration: {0}")]
    Config(String),
    #[error("subscription rejected: {0}")]
    Rejected(String),
    #[error("not subscribed")]
    NotSubscribed,
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Control(#[from] ControlError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    pub id: String,
    pub name: String,
    pub vehicle_type: VehicleType,
    pub send_rate_hz: f64,
    pub control_rate_hz: f64,
    pub params: ControllerParams,
    pub spacing: SpacingPolicy,
    /// Ids of every vehicle in the crossing, in scenario order.
    pub fleet: Vec<String>,
    pub topology: TopologySpec,
    pub spec: VehicleSpec,
    pub geometry: JunctionGeometry,
    pub stale_timeout_ms: u64,
    pub safe_deceleration_mps2: f64,
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |m: String| Err(AgentError::Config(m));
        if !(self.send_rate_hz.is_finite() && self.send_rate_hz > 0.0) {
            return bad("send_rate_hz must be positive".into());
        }
        if !(self.control_rate_hz.is_finite() && self.control_rate_hz > 0.0) {
            return bad("control_rate_hz must be positive".into());
        }
        if !self.fleet.contains(&self.id) {
            return bad(format!("id `{}` is not part of the fleet", self.id));
        }
        if !(self.safe_deceleration_mps2.is_finite() && self.safe_deceleration_mps2 <= 0.0) {
            return bad("safe deceleration must be <= 0".into());
        }
        Ok(())
    }
}

/// The newest accepted update and when it arrived.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficSnapshot {
    pub update: TrafficUpdate,
    pub received_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlMode {
    /// No complete snapshot yet; the last command is held.
    Waiting,
    Nominal,
    StaleFallback,
    /// Own echo absent from the snapshot; the last command is held.
    HoldMissingSelf,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlDecision {
    pub input_mps2: f64,
    pub mode: ControlMode,
    pub global_seq: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GnssFix {
    pub lat_deg: f64,
    pub lon_deg: f64,
    pub heading_deg: f64,
    /// North and east velocity components.
    pub speed_lat: f64,
    pub speed_lon: f64,
}

/// Places the vehicle on its entry road before the centre and on its exit
/// road afterwards. Road `k` leaves the centre at bearing `360 (k-1) / roads`.
pub fn synthetic_gnss(state: &VehicleState, spec: &VehicleSpec, geom: &JunctionGeometry) -> GnssFix {
    let bearing = |road: u32| 360.0 * f64::from(road.saturating_sub(1) % geom.roads.max(1)) / f64::from(geom.roads.max(1));
    let p = state.progress_m;
    let (radial_bearing, distance, heading) = if p < 0.0 {
        let b = bearing(spec.entry_road);
        (b, -p, (b + 180.0) % 360.0)
    } else {
        let b = bearing(spec.exit_road);
        (b, p, b)
    };
    let r = radial_bearing.to_radians();
    let (north, east) = (distance * r.cos(), distance * r.sin());
    let lat_deg = ORIGIN_LAT_DEG + (north / EARTH_RADIUS_M).to_degrees();
    let lon_deg = ORIGIN_LON_DEG + (east / (EARTH_RADIUS_M * ORIGIN_LAT_DEG.to_radians().cos())).to_degrees();
    let h = heading.to_radians();
    GnssFix {
        lat_deg,
        lon_deg,
        heading_deg: heading,
        speed_lat: state.speed_mps * h.cos(),
        speed_lon: state.speed_mps * h.sin(),
    }
}

#[derive(Debug, Clone)]
pub struct VehicleAgent {
    cfg: AgentConfig,
    index: usize,
    subscribed: bool,
    local_seq: SequenceCounter,
    global_filter: SequenceFilter,
    snapshot: Option<TrafficSnapshot>,
    base_order: Option<PlatoonOrder>,
    order: Option<PlatoonOrder>,
    graph: Option<CommGraph>,
    priority: Option<String>,
    last_command: f64,
    last_rtt_seq: Option<u64>,
    /// `(receive_ms, global_sequence)` of every accepted update.
    pub accepted_log: Vec<(u64, u64)>,
    /// `(receive_ms, state_rtt_ms)`.
    pub state_rtt_log: Vec<(u64, f64)>,
    pub discarded_updates: usize,
    pub decode_errors: usize,
}

impl VehicleAgent {
    pub fn new(cfg: AgentConfig) -> Result<Self, AgentError> {
        cfg.validate()?;
        let index = cfg.fleet.iter().position(|x| *x == cfg.id).expect("validated");
        Ok(Self {
            cfg,
            index,
            subscribed: false,
            local_seq: SequenceCounter::new(),
            global_filter: SequenceFilter::default(),
            snapshot: None,
            base_order: None,
            order: None,
            graph: None,
            priority: None,
            last_command: 0.0,
            last_rtt_seq: None,
            accepted_log: Vec::new(),
            state_rtt_log: Vec::new(),
            discarded_updates: 0,
            decode_errors: 0,
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.cfg
    }

    pub fn is_subscribed(&self) -> bool {
        self.subscribed
    }

    pub fn snapshot(&self) -> Option<&TrafficSnapshot> {
        self.snapshot.as_ref()
    }

    pub fn order(&self) -> Option<&PlatoonOrder> {
        self.order.as_ref()
    }

    pub fn subscribe_frame(&self) -> Frame {
        Frame::Subscribe(SubscriptionRequest { id: self.cfg.id.clone(), name: self.cfg.name.clone() })
    }

    /// A fresh connection restarts the local sequence at 0.
    pub fn on_ack(&mut self, ack: &SubscriptionAck) -> Result<(), AgentError> {
        if !ack.accepted {
            self.subscribed = false;
            return Err(AgentError::Rejected(ack.reason.clone().unwrap_or_else(|| "no reason given".into())));
        }
        self.subscribed = true;
        self.local_seq = SequenceCounter::new();
        self.last_rtt_seq = None;
        Ok(())
    }

    pub fn on_disconnect(&mut self) {
        self.subscribed = false;
    }

    /// Status for the current local state, stamped with `now_ms`.
    pub fn sender_tick(&mut self, state: &VehicleState, now_ms: u64) -> Result<StatusMessage, AgentError> {
        if !self.subscribed {
            return Err(AgentError::NotSubscribed);
        }
        let fix = synthetic_gnss(state, &self.cfg.spec, &self.cfg.geometry);
        let latency_ms = self.state_rtt_log.last().map_or(0.0, |&(_, v)| v);
        Ok(StatusMessage {
            vehicle_type: self.cfg.vehicle_type,
            vehicle_name: self.cfg.id.clone(),
            gnss_lat: fix.lat_deg,
            gnss_lon: fix.lon_deg,
            gnss_heading: fix.heading_deg,
            speed_lat: fix.speed_lat,
            speed_lon: fix.speed_lon,
            proximity_m: state.progress_m,
            connection_status: ConnectionStatus::Active,
            latency_ms,
            local_timestamp_ms: now_ms,
            local_sequence: self.local_seq.next_sequence()?,
        })
    }

    /// Applies the late-predecessor rule on the global sequence.
    pub fn on_traffic_update(&mut self, update: TrafficUpdate, now_ms: u64) -> PacketDecision {
        let decision = self.global_filter.offer(update.global_sequence);
        if decision == PacketDecision::Discard {
            self.discarded_updates += 1;
            log::debug!("event=discard_update id={} seq={}", self.cfg.id, update.global_sequence);
            return decision;
        }
        self.accepted_log.push((now_ms, update.global_sequence));
        if let Some(rtt) = self.measure_state_rtt(&update, now_ms) {
            self.state_rtt_log.push((now_ms, rtt));
        }
        self.refresh_order(&update);
        self.snapshot = Some(TrafficSnapshot { update, received_ms: now_ms });
        decision
    }

    /// Round trip of this agent's own echoed status. Each local sequence is
    /// measured at most once.
    pub fn measure_state_rtt(&mut self, update: &TrafficUpdate, now_ms: u64) -> Option<f64> {
        let echo = update.vehicle(&self.cfg.id)?;
        if self.last_rtt_seq.is_some_and(|s| echo.local_sequence <= s) {
            return None;
        }
        self.last_rtt_seq = Some(echo.local_sequence);
        Some(now_ms.saturating_sub(echo.local_timestamp_ms) as f64)
    }

    /// Freezes the crossing order once every fleet member has reported, and
    /// re-ranks whenever the manager names a different priority vehicle.
    fn refresh_order(&mut self, update: &TrafficUpdate) {
        if self.base_order.is_none() {
            let states: Option<Vec<(String, VehicleState)>> = self
                .cfg
                .fleet
                .iter()
                .map(|id| update.vehicle(id).map(|s| (id.clone(), VehicleState::new(s.proximity_m, s.speed_mps()))))
                .collect();
            let Some(states) = states else { return };
            let order = assign_crossing_order(&states);
            log::info!("event=order_frozen id={} order={:?}", self.cfg.id, order.ids_by_rank());
            self.base_order = Some(order);
            self.priority = None;
            self.order = None;
        }
        let wanted = update.priority_vehicle().map(str::to_string);
        if self.order.is_some() && wanted == self.priority {
            return;
        }
        let base = self.base_order.as_ref().expect("set above");
        let order = match &wanted {
            Some(p) => base.with_priority(p),
            None => base.clone(),
        };
        match self.cfg.topology.resolve(self.cfg.fleet.len(), &order) {
            Ok(g) => {
                self.graph = Some(g);
                self.order = Some(order);
                self.priority = wanted;
            }
            Err(e) => log::error!("event=topology_error id={} error={e}", self.cfg.id),
        }
    }

    /// Commanded acceleration from the newest snapshot. Neighbour positions
    /// are extrapolated over their report age with the reported speed held.
    pub fn control_tick(&mut self, own: &VehicleState, now_ms: u64) -> Result<ControlDecision, AgentError> {
        let (Some(snap), Some(order), Some(graph)) = (&self.snapshot, &self.order, &self.graph) else {
            return Ok(self.hold(ControlMode::Waiting, None));
        };
        let seq = Some(snap.update.global_sequence);
        if snap.update.vehicle(&self.cfg.id).is_none() {
            log::warn!("event=self_missing id={} seq={}", self.cfg.id, snap.update.global_sequence);
            return Ok(self.hold(ControlMode::HoldMissingSelf, seq));
        }
        let my_rank = order.rank_at(self.index);
        let mut neighbors = Vec::new();
        let mut stale = false;
        for j1 in graph.neighbors(self.index + 1).map_err(|e| AgentError::Config(e.to_string()))? {
            let j = j1 - 1;
            let Some(s) = snap.update.vehicle(&self.cfg.fleet[j]) else {
                stale = true;
                continue;
            };
            let age_ms = now_ms.saturating_sub(s.local_timestamp_ms);
            if age_ms > self.cfg.stale_timeout_ms || s.connection_status == ConnectionStatus::Inactive {
                stale = true;
            }
            let v_j = s.speed_mps();
            let p_j = s.proximity_m + v_j * age_ms as f64 / 1000.0;
            let rank_j = order.rank_at(j);
            let follower_speed = if my_rank > rank_j { own.speed_mps } else { v_j };
            neighbors.push(Neighbor {
                id: j,
                progress_m: p_j,
                speed_mps: v_j,
                desired_gap_m: desired_gap(&self.cfg.spacing, follower_speed, rank_j as i64 - my_rank as i64)?,
            });
        }
        if stale {
            log::warn!("event=stale_fallback id={} seq={}", self.cfg.id, snap.update.global_sequence);
            self.last_command = self.cfg.safe_deceleration_mps2;
            return Ok(ControlDecision { input_mps2: self.last_command, mode: ControlMode::StaleFallback, global_seq: seq });
        }
        let u = control::control_input(own, &NeighborView::new(neighbors), &self.cfg.params)?;
        self.last_command = u;
        Ok(ControlDecision { input_mps2: u, mode: ControlMode::Nominal, global_seq: seq })
    }

    /// Spacing error to the crossing-order predecessor as this agent sees it.
    pub fn predecessor_error(&self, own: &VehicleState, now_ms: u64) -> Option<f64> {
        let (snap, order) = (self.snapshot.as_ref()?, self.order.as_ref()?);
        let my_rank = order.rank_at(self.index);
        let pred = order.ids_by_rank().get(my_rank.checked_sub(2)?)?.clone();
        let s = snap.update.vehicle(&pred)?;
        let age_s = now_ms.saturating_sub(s.local_timestamp_ms) as f64 / 1000.0;
        let p_pred = s.proximity_m + s.speed_mps() * age_s;
        let gap = desired_gap(&self.cfg.spacing, own.speed_mps, -1).ok()?;
        Some(own.progress_m - p_pred - gap)
    }

    fn hold(&self, mode: ControlMode, global_seq: Option<u64>) -> ControlDecision {
        ControlDecision { input_mps2: self.last_command, mode, global_seq }
    }
}
