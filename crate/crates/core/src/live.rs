//! Real-time runtimes over TCP: the traffic-manager server and the agent
//! client. Both wrap the same registry and agent types the simulation uses.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{AgentConfig, AgentError, ControlMode, VehicleAgent};
use crate::control::VehicleState;
use crate::io::TrajectoryRow;
use crate::junction::occupies;
use crate::manager::{ManagerError, Registry, SessionId};
use crate::metrics::{DelayKind, DelaySample};
use crate::net::{NetError, SocketEndpoint, Transport, TransportEvent};
use crate::protocol::{self, Frame, ProtocolError};

#[derive(Debug, Error)]
pub enum LiveError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Manager(#[from] ManagerError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("manager at {0} is unreachable")]
    Unreachable(String),
    #[error("timed out waiting for {0}")]
    Timeout(&'static str),
    #[error("server thread panicked")]
    Panicked,
}

pub fn unix_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub bind: String,
    pub broadcast_rate_hz: f64,
    pub stale_timeout_ms: u64,
    /// Stop once every session has left, after at least one joined.
    pub exit_when_idle: bool,
    pub max_runtime: Option<Duration>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ServeSummary {
    pub broadcasts: u64,
    /// Gaps between consecutive broadcasts, measured on the server clock.
    pub tick_intervals_ms: Vec<f64>,
    pub protocol_violations: usize,
    pub sessions_seen: u64,
    pub rejected_subscriptions: usize,
}

enum Event {
    Connected(SessionId, Sender<Outgoing>),
    Frame(SessionId, Vec<u8>),
    Closed(SessionId),
}

enum Outgoing {
    Frame(Arc<Vec<u8>>),
    Close,
}

pub struct ServerHandle {
    pub addr: SocketAddr,
    stop: Arc<AtomicBool>,
    join: JoinHandle<Result<ServeSummary, LiveError>>,
}

impl ServerHandle {
    pub fn stop(&self) {
        self.stop.store(true, Ordering::SeqCst);
    }

    pub fn join(self) -> Result<ServeSummary, LiveError> {
        self.join.join().map_err(|_| LiveError::Panicked)?
    }
}

fn spawn_session(id: SessionId, stream: TcpStream, events: Sender<Event>) -> std::io::Result<()> {
    stream.set_nodelay(true)?;
    let reader = stream.try_clone()?;
    let mut writer = stream;
    let (tx, rx) = mpsc::channel::<Outgoing>();
    let ev = events.clone();
    thread::spawn(move || {
        let mut lines = BufReader::new(reader);
        let mut buf = Vec::new();
        loop {
            buf.clear();
            match lines.read_until(b'\n', &mut buf) {
                Ok(0) | Err(_) => break,
                Ok(_) => {
                    while buf.last() == Some(&b'\n') || buf.last() == Some(&b'\r') {
                        buf.pop();
                    }
                    if !buf.is_empty() && ev.send(Event::Frame(id, buf.clone())).is_err() {
                        return;
                    }
                }
            }
        }
        let _ = ev.send(Event::Closed(id));
    });
    // Each session drains its own queue, so a slow peer only delays itself.
    thread::spawn(move || {
        for out in rx {
            match out {
                Outgoing::Frame(f) => {
                    if crate::net::socket_write(&mut writer, &f).is_err() {
                        break;
                    }
                }
                Outgoing::Close => break,
            }
        }
        let _ = writer.shutdown(Shutdown::Both);
    });
    events.send(Event::Connected(id, tx)).map_err(|_| std::io::Error::other("server stopped"))
}

/// Binds and starts the manager on background threads.
pub fn start_server(opts: ServeOptions) -> Result<ServerHandle, LiveError> {
    let mut registry = Registry::new(opts.broadcast_rate_hz, opts.stale_timeout_ms)?;
    let listener = TcpListener::bind(&opts.bind)?;
    let addr = listener.local_addr()?;
    listener.set_nonblocking(true)?;
    let stop = Arc::new(AtomicBool::new(false));
    let (events_tx, events) = mpsc::channel::<Event>();

    let accept_stop = stop.clone();
    let next_id = Arc::new(AtomicU64::new(1));
    thread::spawn(move || {
        while !accept_stop.load(Ordering::SeqCst) {
            match listener.accept() {
                Ok((stream, peer)) => {
                    let id = next_id.fetch_add(1, Ordering::SeqCst);
                    log::info!("event=connect session={id} peer={peer}");
                    if stream.set_nonblocking(false).is_err() || spawn_session(id, stream, events_tx.clone()).is_err() {
                        break;
                    }
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(2)),
                Err(e) => {
                    log::error!("event=accept_error error={e}");
                    break;
                }
            }
        }
    });

    let loop_stop = stop.clone();
    let join = thread::spawn(move || {
        let start = Instant::now();
        let interval = Duration::from_secs_f64(1.0 / opts.broadcast_rate_hz);
        let mut next_tick = start + interval;
        let mut last_broadcast: Option<(u64, Instant)> = None;
        let mut tick_index = 0u64;
        let mut writers: BTreeMap<SessionId, Sender<Outgoing>> = BTreeMap::new();
        let mut summary = ServeSummary::default();
        let now_ms = || start.elapsed().as_millis() as u64;
        loop {
            if loop_stop.load(Ordering::SeqCst) {
                break;
            }
            if opts.max_runtime.is_some_and(|m| start.elapsed() >= m) {
                break;
            }
            if opts.exit_when_idle && summary.sessions_seen > 0 && writers.is_empty() {
                break;
            }
            let now = Instant::now();
            if now >= next_tick {
                tick_index += 1;
                registry.stale_check(now_ms(), opts.stale_timeout_ms);
                if let Some(b) = registry.broadcast_tick(now_ms())? {
                    if let Some((prev_index, prev)) = last_broadcast {
                        if prev_index + 1 == tick_index {
                            summary.tick_intervals_ms.push(now.duration_since(prev).as_secs_f64() * 1000.0);
                        }
                    }
                    last_broadcast = Some((tick_index, now));
                    summary.broadcasts += 1;
                    let frame = Arc::new(b.frame);
                    for s in b.recipients {
                        if let Some(w) = writers.get(&s) {
                            let _ = w.send(Outgoing::Frame(frame.clone()));
                        }
                    }
                }
                next_tick += interval;
                while next_tick <= Instant::now() {
                    log::warn!("event=tick_overrun");
                    next_tick += interval;
                    tick_index += 1;
                }
                continue;
            }
            let ev = match events.recv_timeout(next_tick - now) {
                Ok(ev) => ev,
                Err(RecvTimeoutError::Timeout) => continue,
                Err(RecvTimeoutError::Disconnected) => break,
            };
            match ev {
                Event::Connected(id, w) => {
                    registry.connect(id);
                    writers.insert(id, w);
                    summary.sessions_seen += 1;
                }
                Event::Closed(id) => {
                    registry.disconnect(id);
                    writers.remove(&id);
                    log::info!("event=disconnect session={id}");
                }
                Event::Frame(id, bytes) => match protocol::decode(&bytes) {
                    Ok(Frame::Subscribe(req)) => {
                        let out = registry.handle_subscribe(id, &req, now_ms());
                        let ack = protocol::encode(&Frame::SubscribeAck(out.ack))?;
                        if let Some(w) = writers.get(&id) {
                            let _ = w.send(Outgoing::Frame(Arc::new(ack)));
                            if out.close_session {
                                summary.rejected_subscriptions += 1;
                                let _ = w.send(Outgoing::Close);
                            }
                        }
                    }
                    Ok(Frame::Status(msg)) => {
                        if let Err(e) = registry.handle_status(id, msg, now_ms()) {
                            log::warn!("event=protocol_violation session={id} error={e}");
                            summary.protocol_violations += 1;
                        }
                    }
                    Ok(_) => {
                        log::warn!("event=protocol_violation session={id} error=unexpected frame");
                        summary.protocol_violations += 1;
                    }
                    Err(e) => {
                        log::warn!("event=decode_error session={id} error={e}");
                        summary.protocol_violations += 1;
                    }
                },
            }
        }
        loop_stop.store(true, Ordering::SeqCst);
        for w in writers.values() {
            let _ = w.send(Outgoing::Close);
        }
        Ok(summary)
    });
    Ok(ServerHandle { addr, stop, join })
}

/// Where the agent's own state comes from.
pub enum StateSource {
    /// Integrate the double integrator locally from `initial`.
    Simulated { initial: VehicleState },
    /// Latest state read from an external feed.
    External(Receiver<VehicleState>),
}

#[derive(Debug, Clone)]
pub struct LiveAgentOptions {
    pub manager: String,
    /// Run length for simulated state; external feeds run until closed.
    pub duration_s: f64,
    pub input_clamp_mps2: Option<f64>,
    pub ack_timeout: Duration,
}

#[derive(Debug, Clone, Default)]
pub struct LiveAgentOutput {
    pub rows: Vec<TrajectoryRow>,
    pub delays: Vec<DelaySample>,
    pub accepted: Vec<(u64, u64)>,
    pub fallback_ticks: usize,
    pub decode_errors: usize,
    pub reconnects: usize,
}

fn subscribe(agent: &mut VehicleAgent, manager: &str, timeout: Duration) -> Result<SocketEndpoint, LiveError> {
    let mut ep = SocketEndpoint::connect(manager).map_err(|_| LiveError::Unreachable(manager.to_string()))?;
    ep.send(&protocol::encode(&agent.subscribe_frame())?)?;
    let deadline = Instant::now() + timeout;
    loop {
        let left = deadline.saturating_duration_since(Instant::now());
        if left.is_zero() {
            return Err(LiveError::Timeout("subscription ack"));
        }
        match ep.recv_timeout(left) {
            Some(TransportEvent::Message(bytes)) => {
                if let Ok(Frame::SubscribeAck(ack)) = protocol::decode(&bytes) {
                    agent.on_ack(&ack)?;
                    return Ok(ep);
                }
            }
            Some(TransportEvent::Disconnected) => return Err(LiveError::Unreachable(manager.to_string())),
            None => {}
        }
    }
}

/// Runs one agent against a live manager, calling `on_row` after every
/// control tick.
pub fn run_live_agent(
    cfg: AgentConfig,
    source: StateSource,
    opts: &LiveAgentOptions,
    mut on_row: impl FnMut(&TrajectoryRow),
) -> Result<LiveAgentOutput, LiveError> {
    let mut agent = VehicleAgent::new(cfg)?;
    let id = agent.config().id.clone();
    let spec = agent.config().spec.clone();
    let geom = agent.config().geometry;
    let dt = 1.0 / agent.config().control_rate_hz;
    let send_every = (agent.config().control_rate_hz / agent.config().send_rate_hz).round().max(1.0) as u64;
    let mut ep = subscribe(&mut agent, &opts.manager, opts.ack_timeout)?;

    let (mut state, external) = match source {
        StateSource::Simulated { initial } => (initial, None),
        StateSource::External(rx) => {
            let first = rx.recv().map_err(|_| LiveError::Timeout("first external state"))?;
            (first, Some(rx))
        }
    };
    let steps = (opts.duration_s / dt).round() as u64;
    let epoch_ms = unix_ms();
    let start = Instant::now();
    let mut out = LiveAgentOutput::default();
    let mut receive_times: Vec<u64> = Vec::new();
    let mut k = 0u64;
    loop {
        if external.is_none() && k > steps {
            break;
        }
        let stamp_ms = epoch_ms + (k as f64 * dt * 1000.0).round() as u64;
        if let Some(rx) = &external {
            loop {
                match rx.try_recv() {
                    Ok(s) => state = s,
                    Err(mpsc::TryRecvError::Empty) => break,
                    Err(mpsc::TryRecvError::Disconnected) => {
                        ep.close();
                        return Ok(finish(out, agent, receive_times, &id));
                    }
                }
            }
        }
        while let Some(ev) = ep.try_recv() {
            match ev {
                TransportEvent::Message(bytes) => match protocol::decode(&bytes) {
                    Ok(Frame::TrafficUpdate(u)) => {
                        let now = unix_ms();
                        receive_times.push(now);
                        agent.on_traffic_update(u, now);
                    }
                    Ok(_) => {}
                    Err(e) => {
                        log::warn!("event=decode_error id={id} error={e}");
                        agent.decode_errors += 1;
                    }
                },
                TransportEvent::Disconnected => {
                    agent.on_disconnect();
                    log::warn!("event=manager_lost id={id}");
                }
            }
        }
        if !agent.is_subscribed() {
            // Latest-only: statuses produced while down are simply not sent.
            if let Ok(e) = subscribe(&mut agent, &opts.manager, opts.ack_timeout) {
                ep = e;
                out.reconnects += 1;
            }
        }
        if k % send_every == 0 && agent.is_subscribed() {
            let msg = agent.sender_tick(&state, stamp_ms)?;
            if ep.send(&protocol::encode(&Frame::Status(msg))?).is_err() {
                agent.on_disconnect();
            }
        }
        let d = agent.control_tick(&state, stamp_ms)?;
        if d.mode == ControlMode::StaleFallback {
            out.fallback_ticks += 1;
        }
        let u = match opts.input_clamp_mps2 {
            Some(c) => d.input_mps2.clamp(-c, c),
            None => d.input_mps2,
        };
        let row = TrajectoryRow {
            t_s: k as f64 * dt,
            vehicle_id: id.clone(),
            p_m: state.progress_m,
            v_mps: state.speed_mps,
            u_mps2: u,
            e_pred_m: agent.predecessor_error(&state, stamp_ms),
            in_ca: occupies(state.progress_m, spec.length_m, &geom),
            global_seq_used: d.global_seq,
        };
        on_row(&row);
        out.rows.push(row);
        if external.is_none() {
            let v = state.speed_mps + u * dt;
            state = VehicleState { progress_m: state.progress_m + v * dt, speed_mps: v, input_mps2: u };
        }
        k += 1;
        let target = start + Duration::from_secs_f64(k as f64 * dt);
        if let Some(wait) = target.checked_duration_since(Instant::now()) {
            thread::sleep(wait);
        }
    }
    ep.close();
    Ok(finish(out, agent, receive_times, &id))
}

fn finish(mut out: LiveAgentOutput, agent: VehicleAgent, receive_times: Vec<u64>, id: &str) -> LiveAgentOutput {
    for &(ts, v) in &agent.state_rtt_log {
        out.delays.push(DelaySample { kind: DelayKind::StateRtt, vehicle_id: id.to_string(), timestamp_ms: ts, value_ms: v });
    }
    for w in receive_times.windows(2) {
        out.delays.push(DelaySample {
            kind: DelayKind::Ttp,
            vehicle_id: id.to_string(),
            timestamp_ms: w[1],
            value_ms: (w[1] - w[0]) as f64,
        });
    }
    out.accepted = agent.accepted_log.clone();
    out.decode_errors = agent.decode_errors;
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{StatusMessage, SubscriptionRequest};
    use crate::scenario::Scenario;

    fn server() -> ServerHandle {
        start_server(ServeOptions {
            bind: "127.0.0.1:0".into(),
            broadcast_rate_hz: 20.0,
            stale_timeout_ms: 500,
            exit_when_idle: true,
            max_runtime: Some(Duration::from_secs(30)),
        })
        .unwrap()
    }

    fn recv_frame(ep: &mut SocketEndpoint) -> Option<Frame> {
        match ep.recv_timeout(Duration::from_secs(5))? {
            TransportEvent::Message(b) => Some(protocol::decode(&b).unwrap()),
            TransportEvent::Disconnected => None,
        }
    }

    #[test]
    fn duplicate_id_is_rejected_and_disconnected() {
        let srv = server();
        let sub = |ep: &mut SocketEndpoint| {
            let f = Frame::Subscribe(SubscriptionRequest { id: "xc90".into(), name: "XC90".into() });
            ep.send(&protocol::encode(&f).unwrap()).unwrap();
        };
        let mut a = SocketEndpoint::connect(srv.addr).unwrap();
        sub(&mut a);
        assert!(matches!(recv_frame(&mut a), Some(Frame::SubscribeAck(ack)) if ack.accepted));
        let mut b = SocketEndpoint::connect(srv.addr).unwrap();
        sub(&mut b);
        assert!(matches!(recv_frame(&mut b), Some(Frame::SubscribeAck(ack)) if !ack.accepted));
        let mut closed = false;
        for _ in 0..10 {
            if b.recv_timeout(Duration::from_secs(1)) == Some(TransportEvent::Disconnected) {
                closed = true;
                break;
            }
        }
        assert!(closed);
        a.close();
        let summary = srv.join().unwrap();
        assert_eq!(summary.rejected_subscriptions, 1);
    }

    #[test]
    fn status_before_subscribe_counts_as_violation() {
        let srv = server();
        let mut a = SocketEndpoint::connect(srv.addr).unwrap();
        let s: StatusMessage = crate::protocol::tests::status("x", 0);
        a.send(&protocol::encode(&Frame::Status(s)).unwrap()).unwrap();
        thread::sleep(Duration::from_millis(100));
        a.close();
        assert_eq!(srv.join().unwrap().protocol_violations, 1);
    }

    #[test]
    fn three_agents_exchange_state_over_loopback() {
        let srv = server();
        let scenario = Scenario::table2();
        let addr = srv.addr.to_string();
        let handles: Vec<_> = scenario
            .vehicles
            .iter()
            .map(|v| {
                let cfg = scenario.agent_config(&v.id).unwrap();
                let initial = VehicleState::new(v.p0, v.v0);
                let opts = LiveAgentOptions {
                    manager: addr.clone(),
                    duration_s: 2.0,
                    input_clamp_mps2: Some(4.0),
                    ack_timeout: Duration::from_secs(5),
                };
                thread::spawn(move || run_live_agent(cfg, StateSource::Simulated { initial }, &opts, |_| {}))
            })
            .collect();
        for h in handles {
            let out = h.join().unwrap().unwrap();
            assert!(!out.accepted.is_empty());
            assert!(out.accepted.windows(2).all(|w| w[1].1 > w[0].1));
            assert!(out.rows.iter().any(|r| r.global_seq_used.is_some()));
        }
        let summary = srv.join().unwrap();
        assert_eq!(summary.protocol_violations, 0);
        assert!(summary.broadcasts > 10);
    }
}
