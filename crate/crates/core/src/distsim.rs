//! Manager plus one agent per vehicle over the simulated network.
//!
//! Time advances in 1 ms ticks. Within a tick: due deliveries are handled,
//! then the manager broadcasts (on its phase), then agents send status (each
//! on its own phase of the physics grid), run the controller and integrate.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::agent::{AgentError, ControlMode, VehicleAgent};
use crate::control::VehicleState;
use crate::manager::{ManagerError, Registry};
use crate::metrics::{DelayKind, DelaySample};
use crate::net::{LatencyModel, NetError, NodeId, SimNetwork, VirtualClock};
use crate::protocol::{self, Frame};
use crate::scenario::{Scenario, ScenarioError};
use crate::sim::{self, FleetState, Formation, SimError, TrajectoryLog, DIVERGENCE_SPEED_MPS};

const MANAGER: NodeId = 0;

#[derive(Debug, Error)]
pub enum DistSimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Manager(#[from] ManagerError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Protocol(#[from] crate::protocol::ProtocolError),
    #[error("timing: {0}")]
    Timing(String),
}

#[derive(Debug, Clone)]
pub struct DistSimOutput {
    pub log: TrajectoryLog,
    pub delays: Vec<DelaySample>,
    /// Accepted `(receive_ms, global_sequence)` per vehicle id.
    pub accepted: BTreeMap<String, Vec<(u64, u64)>>,
    pub broadcast_times_ms: Vec<u64>,
    pub fallback_ticks: usize,
    pub protocol_violations: usize,
}

fn interval_ms(rate_hz: f64, what: &str) -> Result<u64, DistSimError> {
    let ms = 1000.0 / rate_hz;
    if (ms - ms.round()).abs() > 1e-9 || ms < 1.0 {
        return Err(DistSimError::Timing(format!("{what} interval {ms} ms is not a whole number of ms")));
    }
    Ok(ms.round() as u64)
}

/// Runs the scenario end to end with `network` on every link.
pub fn run_distributed(scenario: &Scenario, network: &LatencyModel) -> Result<DistSimOutput, DistSimError> {
    scenario.validate()?;
    let cfg = scenario.sim;
    let dt_ms = interval_ms(1.0 / cfg.dt_s, "physics")?;
    let send_ms = interval_ms(scenario.protocol.send_rate_hz, "send")?;
    let control_ms = interval_ms(scenario.protocol.control_rate_hz, "control")?;
    let bcast_ms = interval_ms(scenario.protocol.broadcast_rate_hz, "broadcast")?;
    if control_ms % dt_ms != 0 || send_ms % dt_ms != 0 {
        return Err(DistSimError::Timing("send and control intervals must be multiples of dt".into()));
    }
    let duration_ms = (cfg.duration_s * 1000.0).round() as u64;

    let clock = VirtualClock::new(0);
    let mut net = SimNetwork::new(*network, clock.clone())?;
    let mut registry = Registry::new(scenario.protocol.broadcast_rate_hz, scenario.protocol.stale_timeout_ms)?;
    let ids = scenario.ids();
    let n = ids.len();
    let mut agents = ids
        .iter()
        .map(|id| Ok(VehicleAgent::new(scenario.agent_config(id)?)?))
        .collect::<Result<Vec<_>, DistSimError>>()?;

    // Evaluation uses the true states under the initial crossing order.
    let order = scenario.initial_order();
    let graph = scenario.graph().map_err(|e| ScenarioError::Field { field: "topology".into(), message: e.to_string() })?;
    if !graph.is_connected() && !cfg.allow_disconnected {
        return Err(SimError::Disconnected.into());
    }
    let spacing = scenario.spacing()?;
    let formation = Formation { order: &order, graph: &graph, params: scenario.params()?, spacing };
    let mut log = TrajectoryLog::for_formation(ids.clone(), &formation);
    let mut seq_used: Vec<Vec<Option<u64>>> = vec![Vec::new(); n];

    let mut fleet = FleetState {
        time_s: 0.0,
        vehicles: scenario.vehicles.iter().map(|v| VehicleState::new(v.p0, v.v0)).collect(),
    };
    let mut inputs = vec![0.0; n];
    let mut used = vec![None; n];
    let mut receive_times: Vec<Vec<u64>> = vec![Vec::new(); n];
    let mut broadcast_times_ms = Vec::new();
    let mut fallback_ticks = 0;
    let mut protocol_violations = 0;

    for (k, a) in agents.iter().enumerate() {
        net.send(k as NodeId + 1, MANAGER, protocol::encode(&a.subscribe_frame())?)?;
    }

    let mut t_ms = 0;
    loop {
        clock.advance_to(t_ms * 1000);
        for d in net.drain_due(t_ms * 1000) {
            if d.to == MANAGER {
                let session = u64::from(d.from);
                match protocol::decode(&d.payload) {
                    Ok(Frame::Subscribe(req)) => {
                        let out = registry.handle_subscribe(session, &req, t_ms);
                        net.send(MANAGER, d.from, protocol::encode(&Frame::SubscribeAck(out.ack))?)?;
                        if out.close_session {
                            registry.disconnect(session);
                        }
                    }
                    Ok(Frame::Status(msg)) => {
                        if let Err(e) = registry.handle_status(session, msg, t_ms) {
                            log::warn!("event=protocol_violation session={session} error={e}");
                            protocol_violations += 1;
                        }
                    }
                    Ok(other) => {
                        log::warn!("event=protocol_violation session={session} frame={other:?}");
                        protocol_violations += 1;
                    }
                    Err(e) => {
                        log::warn!("event=decode_error session={session} error={e}");
                        protocol_violations += 1;
                    }
                }
            } else {
                let k = (d.to - 1) as usize;
                let agent = &mut agents[k];
                match protocol::decode(&d.payload) {
                    Ok(Frame::SubscribeAck(ack)) => agent.on_ack(&ack)?,
                    Ok(Frame::TrafficUpdate(u)) => {
                        receive_times[k].push(t_ms);
                        agent.on_traffic_update(u, t_ms);
                    }
                    Ok(other) => {
                        log::warn!("event=protocol_violation agent={} frame={other:?}", ids[k]);
                        protocol_violations += 1;
                    }
                    Err(e) => {
                        log::warn!("event=decode_error agent={} error={e}", ids[k]);
                        agent.decode_errors += 1;
                    }
                }
            }
        }

        if t_ms % bcast_ms == 0 {
            registry.stale_check(t_ms, scenario.protocol.stale_timeout_ms);
            if let Some(b) = registry.broadcast_tick(t_ms)? {
                broadcast_times_ms.push(t_ms);
                for s in b.recipients {
                    net.send(MANAGER, s as NodeId, b.frame.clone())?;
                }
            }
        }

        if t_ms % dt_ms == 0 {
            let step_index = t_ms / dt_ms;
            for (k, agent) in agents.iter_mut().enumerate() {
                let phase = (k as u64 * dt_ms) % send_ms;
                if agent.is_subscribed() && t_ms % send_ms == phase {
                    let msg = agent.sender_tick(&fleet.vehicles[k], t_ms)?;
                    net.send(k as NodeId + 1, MANAGER, protocol::encode(&Frame::Status(msg))?)?;
                }
                if t_ms % control_ms == 0 {
                    let d = agent.control_tick(&fleet.vehicles[k], t_ms)?;
                    if d.mode == ControlMode::StaleFallback {
                        fallback_ticks += 1;
                    }
                    inputs[k] = d.input_mps2;
                    used[k] = d.global_seq;
                }
            }
            let applied: Vec<f64> = inputs.iter().map(|&u| cfg.clamped(u)).collect();
            log.push(Some(&formation), &fleet, &applied)?;
            for (k, u) in used.iter().enumerate() {
                seq_used[k].push(*u);
            }
            if t_ms >= duration_ms {
                break;
            }
            fleet = sim::step(&fleet, &ids, &inputs, &cfg)?;
            fleet.time_s = (step_index + 1) as f64 * cfg.dt_s;
            for (id, s) in ids.iter().zip(&fleet.vehicles) {
                if !s.speed_mps.is_finite() || s.speed_mps.abs() > DIVERGENCE_SPEED_MPS {
                    return Err(SimError::Diverged { id: id.clone(), time_s: fleet.time_s, speed: s.speed_mps.abs() }.into());
                }
            }
        }
        t_ms += 1;
    }
    log.global_seq_used = Some(seq_used);

    let mut delays = Vec::new();
    let mut accepted = BTreeMap::new();
    for (k, agent) in agents.iter().enumerate() {
        for &(ts, v) in &agent.state_rtt_log {
            delays.push(DelaySample { kind: DelayKind::StateRtt, vehicle_id: ids[k].clone(), timestamp_ms: ts, value_ms: v });
        }
        for w in receive_times[k].windows(2) {
            delays.push(DelaySample {
                kind: DelayKind::Ttp,
                vehicle_id: ids[k].clone(),
                timestamp_ms: w[1],
                value_ms: (w[1] - w[0]) as f64,
            });
        }
        accepted.insert(ids[k].clone(), agent.accepted_log.clone());
    }
    Ok(DistSimOutput { log, delays, accepted, broadcast_times_ms, fallback_ticks, protocol_violations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{detect_settling, sequence_progression, stats};

    fn short(duration_s: f64) -> Scenario {
        let mut s = Scenario::table2();
        s.sim.duration_s = duration_s;
        s
    }

    #[test]
    fn zero_delay_run_converges() {
        let out = run_distributed(&short(20.0), &LatencyModel::constant(0.0)).unwrap();
        assert_eq!(out.protocol_violations, 0);
        assert_eq!(out.fallback_ticks, 0);
        let t = detect_settling(&out.log.times, &out.log.edge_errors, 0.1, 2.0).unwrap();
        assert!(t.is_some());
        for seqs in out.accepted.values() {
            assert!(sequence_progression(seqs).monotone);
        }
    }

    #[test]
    fn same_seed_is_bit_reproducible() {
        let model = LatencyModel { reorder_probability: 0.05, ..LatencyModel::normal(35.0, 10.0, 3) };
        let a = run_distributed(&short(5.0), &model).unwrap();
        let b = run_distributed(&short(5.0), &model).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.delays, b.delays);
    }

    #[test]
    fn broadcast_runs_at_twenty_hertz() {
        let out = run_distributed(&short(3.0), &LatencyModel::constant(0.0)).unwrap();
        let gaps: Vec<f64> = out.broadcast_times_ms.windows(2).map(|w| (w[1] - w[0]) as f64).collect();
        assert!(gaps.iter().all(|&g| g == 50.0));
        let ttp: Vec<f64> = out.delays.iter().filter(|d| d.kind == DelayKind::Ttp).map(|d| d.value_ms).collect();
        assert!((stats(&ttp).unwrap().mean - 50.0).abs() < 1e-9);
    }

    #[test]
    fn zero_delay_state_rtt_is_bounded_by_two_intervals() {
        let out = run_distributed(&short(3.0), &LatencyModel::constant(0.0)).unwrap();
        let rtt: Vec<f64> = out.delays.iter().filter(|d| d.kind == DelayKind::StateRtt).map(|d| d.value_ms).collect();
        assert!(!rtt.is_empty());
        assert!(rtt.iter().all(|&r| (0.0..=100.0 + 2.0).contains(&r)), "{rtt:?}");
    }
}
