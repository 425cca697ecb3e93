//! Traffic-manager registry.
//!
//! The registry is transport-agnostic: callers feed it session events and
//! clock readings, and it returns what to send. The simulated network and
//! the socket server both drive the same type.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::protocol::{
    self, ConnectionStatus, Frame, PacketDecision, ProtocolError, SequenceCounter, StatusMessage,
    SubscriptionAck, SubscriptionRequest, TrafficUpdate, VehicleType,
};

pub const DEFAULT_BROADCAST_RATE_HZ: f64 = 20.0;
pub const DEFAULT_STALE_TIMEOUT_MS: u64 = 500;

pub type SessionId = u64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ManagerError {
    #[error("session {0} sent a status before subscribing")]
    NotSubscribed(SessionId),
    #[error("session {0} is unknown")]
    UnknownSession(SessionId),
    #[error("invalid manager configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MobileNodeRecord {
    pub id: String,
    pub name: String,
    pub session: SessionId,
    pub latest: Option<StatusMessage>,
    pub last_seen_ms: u64,
    pub last_accepted_local_sequence: Option<u64>,
    pub stale: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubscribeOutcome {
    pub ack: SubscriptionAck,
    /// The session must be closed after the ack is sent.
    pub close_session: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatusOutcome {
    Applied,
    Discarded,
}

/// One serialized update fanned out unchanged to every listed session.
#[derive(Debug, Clone, PartialEq)]
pub struct Broadcast {
    pub update: TrafficUpdate,
    pub frame: Vec<u8>,
    pub recipients: Vec<SessionId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Registry {
    nodes: BTreeMap<String, MobileNodeRecord>,
    sessions: BTreeMap<SessionId, Option<String>>,
    counter: SequenceCounter,
    broadcast_rate_hz: f64,
    stale_timeout_ms: u64,
    control_side_info: BTreeMap<String, String>,
}

impl Default for Registry {
    fn default() -> Self {
        Self::new(DEFAULT_BROADCAST_RATE_HZ, DEFAULT_STALE_TIMEOUT_MS).expect("defaults are valid")
    }
}

impl Registry {
    pub fn new(broadcast_rate_hz: f64, stale_timeout_ms: u64) -> Result<Self, ManagerError> {
        if !(broadcast_rate_hz.is_finite() && broadcast_rate_hz > 0.0) {
            return Err(ManagerError::Config("broadcast rate must be positive".into()));
        }
        let interval_ms = 1000.0 / broadcast_rate_hz;
        if stale_timeout_ms as f64 <= interval_ms {
            return Err(ManagerError::Config(format!(
                "stale timeout {stale_timeout_ms} ms must exceed the broadcast interval {interval_ms} ms"
            )));
        }
        Ok(Self {
            nodes: BTreeMap::new(),
            sessions: BTreeMap::new(),
            counter: SequenceCounter::new(),
            broadcast_rate_hz,
            stale_timeout_ms,
            control_side_info: BTreeMap::new(),
        })
    }

    pub fn broadcast_interval_ms(&self) -> f64 {
        1000.0 / self.broadcast_rate_hz
    }

    pub fn stale_timeout_ms(&self) -> u64 {
        self.stale_timeout_ms
    }

    pub fn connect(&mut self, session: SessionId) {
        self.sessions.insert(session, None);
    }

    /// Drops the session and frees its id for re-subscription.
    pub fn disconnect(&mut self, session: SessionId) -> Option<String> {
        let id = self.sessions.remove(&session).flatten()?;
        if self.nodes.get(&id).is_some_and(|r| r.session == session) {
            self.nodes.remove(&id);
            log::info!("event=unsubscribe id={id} session={session}");
        }
        Some(id)
    }

    pub fn session_count(&self) -> usize {
        self.sessions.len()
    }

    pub fn record(&self, id: &str) -> Option<&MobileNodeRecord> {
        self.nodes.get(id)
    }

    pub fn handle_subscribe(
        &mut self,
        session: SessionId,
        request: &SubscriptionRequest,
        now_ms: u64,
    ) -> SubscribeOutcome {
        self.sessions.entry(session).or_insert(None);
        if self.nodes.contains_key(&request.id) || request.id.is_empty() {
            log::warn!("event=subscribe_rejected id={} session={session}", request.id);
            return SubscribeOutcome {
                ack: SubscriptionAck {
                    accepted: false,
                    reason: Some(format!("id `{}` is already subscribed", request.id)),
                },
                close_session: true,
            };
        }
        if let Some(Some(old)) = self.sessions.get(&session) {
            self.nodes.remove(old);
        }
        self.sessions.insert(session, Some(request.id.clone()));
        self.nodes.insert(
            request.id.clone(),
            MobileNodeRecord {
                id: request.id.clone(),
                name: request.name.clone(),
                session,
                latest: None,
                last_seen_ms: now_ms,
                last_accepted_local_sequence: None,
                stale: false,
            },
        );
        log::info!("event=subscribe id={} name={} session={session}", request.id, request.name);
        SubscribeOutcome { ack: SubscriptionAck { accepted: true, reason: None }, close_session: false }
    }

    pub fn handle_status(
        &mut self,
        session: SessionId,
        msg: StatusMessage,
        now_ms: u64,
    ) -> Result<StatusOutcome, ManagerError> {
        let id = match self.sessions.get(&session) {
            Some(Some(id)) => id.clone(),
            Some(None) => return Err(ManagerError::NotSubscribed(session)),
            None => return Err(ManagerError::UnknownSession(session)),
        };
        msg.validate()?;
        let record = self.nodes.get_mut(&id).ok_or(ManagerError::NotSubscribed(session))?;
        match protocol::accept_packet(record.last_accepted_local_sequence, msg.local_sequence) {
            PacketDecision::Discard => {
                log::debug!(
                    "event=discard id={id} seq={} last={:?}",
                    msg.local_sequence,
                    record.last_accepted_local_sequence
                );
                Ok(StatusOutcome::Discarded)
            }
            PacketDecision::Accept => {
                record.last_accepted_local_sequence = Some(msg.local_sequence);
                record.last_seen_ms = record.last_seen_ms.max(now_ms);
                if record.stale {
                    log::info!("event=resumed id={id}");
                }
                record.stale = false;
                record.latest = Some(msg);
                Ok(StatusOutcome::Applied)
            }
        }
    }

    /// Builds the next update, or `None` when nobody is connected.
    pub fn broadcast_tick(&mut self, now_ms: u64) -> Result<Option<Broadcast>, ManagerError> {
        if self.sessions.is_empty() {
            return Ok(None);
        }
        let vehicles: Vec<StatusMessage> = self
            .nodes
            .values()
            .filter_map(|r| {
                let mut s = r.latest.clone()?;
                if s.vehicle_type == VehicleType::Monitor {
                    return None;
                }
                if r.stale {
                    s.connection_status = ConnectionStatus::Inactive;
                }
                Some(s)
            })
            .collect();
        let update = TrafficUpdate {
            connected_nodes: self.nodes.len() as u32,
            global_sequence: self.counter.next_sequence()?,
            global_timestamp_ms: now_ms,
            control_side_info: self.control_side_info.clone(),
            vehicles,
        };
        let frame = protocol::encode(&Frame::TrafficUpdate(update.clone()))?;
        Ok(Some(Broadcast { update, frame, recipients: self.sessions.keys().copied().collect() }))
    }

    /// Flags nodes silent for longer than `timeout_ms`.
    pub fn stale_check(&mut self, now_ms: u64, timeout_ms: u64) -> Vec<String> {
        let mut flagged = Vec::new();
        for r in self.nodes.values_mut() {
            if now_ms.saturating_sub(r.last_seen_ms) > timeout_ms {
                if !r.stale {
                    log::warn!("event=stale id={} silent_ms={}", r.id, now_ms - r.last_seen_ms);
                }
                r.stale = true;
                flagged.push(r.id.clone());
            }
        }
        flagged
    }

    pub fn set_control_side_info(&mut self, key: impl Into<String>, value: Option<String>) {
        let key = key.into();
        match value {
            Some(v) => {
                self.control_side_info.insert(key, v);
            }
            None => {
                self.control_side_info.remove(&key);
            }
        }
    }

    pub fn global_sequences_issued(&self) -> u64 {
        self.counter.issued()
    }
}
