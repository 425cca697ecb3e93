//! Traffic-manager wire protocol.
//!
//! One UTF-8 JSON object per transport frame, tagged by `type`. Vehicles send
//! `status` frames carrying a per-connection local sequence number; the
//! manager answers with `traffic_update` frames carrying a global sequence
//! number that lives as long as the server process. Receivers drop any
//! packet whose sequence number is not larger than the last one accepted.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Reserved `control_side_info` key naming a vehicle that must cross first.
pub const PRIORITY_VEHICLE_KEY: &str = "priority_vehicle";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("malformed frame at byte {offset}: {message}")]
    Decode { offset: usize, message: String },
    #[error("field `{field}` out of range: {message}")]
    Validation { field: &'static str, message: String },
    #[error("sequence counter overflow")]
    SequenceOverflow,
}

fn invalid(field: &'static str, message: impl Into<String>) -> ProtocolError {
    ProtocolError::Validation { field, message: message.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VehicleType {
    Autonomous,
    HumanDrivenConnected,
    Monitor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConnectionStatus {
    #[default]
    Active,
    Inactive,
}

/// Vehicle status ("to5GPoC") message.
///
/// `proximity_m` is the signed progress along the vehicle's trajectory
/// relative to the intersection centre (negative while approaching).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusMessage {
    pub vehicle_type: VehicleType,
    pub vehicle_name: String,
    pub gnss_lat: f64,
    pub gnss_lon: f64,
    pub gnss_heading: f64,
    pub speed_lat: f64,
    pub speed_lon: f64,
    pub proximity_m: f64,
    pub connection_status: ConnectionStatus,
    pub latency_ms: f64,
    pub local_timestamp_ms: u64,
    pub local_sequence: u64,
}

impl StatusMessage {
    /// Scalar speed: Euclidean norm of the two speed components.
    pub fn speed_mps(&self) -> f64 {
        self.speed_lat.hypot(self.speed_lon)
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        if self.vehicle_name.is_empty() {
            return Err(invalid("vehicle_name", "must not be empty"));
        }
        if !(self.gnss_lat.is_finite() && (-90.0..=90.0).contains(&self.gnss_lat)) {
            return Err(invalid("gnss_lat", format!("{} not in [-90, 90]", self.gnss_lat)));
        }
        if !(self.gnss_lon.is_finite() && (-180.0..=180.0).contains(&self.gnss_lon)) {
            return Err(invalid("gnss_lon", format!("{} not in [-180, 180]", self.gnss_lon)));
        }
        if !(self.gnss_heading.is_finite() && (0.0..360.0).contains(&self.gnss_heading)) {
            return Err(invalid("gnss_heading", format!("{} not in [0, 360)", self.gnss_heading)));
        }
        for (field, v) in [
            ("speed_lat", self.speed_lat),
            ("speed_lon", self.speed_lon),
            ("proximity_m", self.proximity_m),
        ] {
            if !v.is_finite() {
                return Err(invalid(field, "must be finite"));
            }
        }
        if !(self.latency_ms.is_finite() && self.latency_ms >= 0.0) {
            return Err(invalid("latency_ms", "must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficUpdate {
    pub connected_nodes: u32,
    pub global_sequence: u64,
    pub global_timestamp_ms: u64,
    #[serde(default)]
    pub control_side_info: BTreeMap<String, String>,
    pub vehicles: Vec<StatusMessage>,
}

impl TrafficUpdate {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        self.vehicles.iter().try_for_each(StatusMessage::validate)
    }

    pub fn vehicle(&self, name: &str) -> Option<&StatusMessage> {
        self.vehicles.iter().find(|v| v.vehicle_name == name)
    }

    pub fn priority_vehicle(&self) -> Option<&str> {
        self.control_side_info.get(PRIORITY_VEHICLE_KEY).map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubscriptionRequest {
    pub id: String,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubscriptionAck {
    pub accepted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Frame {
    Subscribe(SubscriptionRequest),
    SubscribeAck(SubscriptionAck),
    Status(StatusMessage),
    TrafficUpdate(TrafficUpdate),
}

impl Frame {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        match self {
            Frame::Subscribe(r) if r.id.is_empty() => Err(invalid("id", "must not be empty")),
            Frame::Status(s) => s.validate(),
            Frame::TrafficUpdate(u) => u.validate(),
            _ => Ok(()),
        }
    }
}

pub fn encode(frame: &Frame) -> Result<Vec<u8>, ProtocolError> {
    frame.validate()?;
    serde_json::to_vec(frame).map_err(|e| ProtocolError::Decode { offset: 0, message: e.to_string() })
}

pub fn decode(bytes: &[u8]) -> Result<Frame, ProtocolError> {
    let frame: Frame = serde_json::from_slice(bytes).map_err(|e| ProtocolError::Decode {
        offset: byte_offset(bytes, e.line(), e.column()),
        message: e.to_string(),
    })?;
    frame.validate()?;
    Ok(frame)
}

fn byte_offset(bytes: &[u8], line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (n, l) in bytes.split(|&b| b == b'\n').enumerate() {
        if n + 1 == line {
            return offset + column.saturating_sub(1).min(l.len());
        }
        offset += l.len() + 1;
    }
    bytes.len()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PacketDecision {
    Accept,
    Discard,
}

/// Late-predecessor rule: accept only strictly newer sequence numbers.
pub fn accept_packet(last_accepted: Option<u64>, incoming: u64) -> PacketDecision {
    match last_accepted {
        Some(last) if incoming <= last => PacketDecision::Discard,
        _ => PacketDecision::Accept,
    }
}

/// Stateful wrapper around [`accept_packet`] for one stream.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SequenceFilter {
    last: Option<u64>,
}

impl SequenceFilter {
    pub fn offer(&mut self, seq: u64) -> PacketDecision {
        let d = accept_packet(self.last, seq);
        if d == PacketDecision::Accept {
            self.last = Some(seq);
        }
        d
    }

    pub fn last(&self) -> Option<u64> {
        self.last
    }
}

/// Monotone counter starting at 0.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SequenceCounter {
    next: u64,
    exhausted: bool,
}

impl SequenceCounter {
    pub fn new() -> Self {
        Self::default()
    }

    #[cfg(test)]
    fn starting_at(next: u64) -> Self {
        Self { next, exhausted: false }
    }

    pub fn next_sequence(&mut self) -> Result<u64, ProtocolError> {
        if self.exhausted {
            return Err(ProtocolError::SequenceOverflow);
        }
        let n = self.next;
        match self.next.checked_add(1) {
            Some(v) => self.next = v,
            None => self.exhausted = true,
        }
        Ok(n)
    }

    /// Number of values handed out so far.
    pub fn issued(&self) -> u64 {
        self.next
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn status(name: &str, seq: u64) -> StatusMessage {
        StatusMessage {
            vehicle_type: VehicleType::Autonomous,
            vehicle_name: name.into(),
            gnss_lat: 57.78,
            gnss_lon: 12.77,
            gnss_heading: 90.0,
            speed_lat: 0.0,
            speed_lon: 10.0,
            proximity_m: -220.0,
            connection_status: ConnectionStatus::Active,
            latency_ms: 0.0,
            local_timestamp_ms: 1000 + seq,
            local_sequence: seq,
        }
    }

    #[test]
    fn heading_out_of_range_is_rejected() {
        let mut s = status("xc90", 1);
        s.gnss_heading = 361.0;
        let err = encode(&Frame::Status(s)).unwrap_err();
        assert_eq!(
            err,
            ProtocolError::Validation { field: "gnss_heading", message: "361 not in [0, 360)".into() }
        );
    }

    #[test]
    fn truncated_payload_is_a_decode_error() {
        let bytes = encode(&Frame::Status(status("xc90", 3))).unwrap();
        let cut = &bytes[..bytes.len() / 2];
        match decode(cut) {
            Err(ProtocolError::Decode { offset, .. }) => assert!(offset <= cut.len()),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn decode_reports_offset_of_garbage() {
        let err = decode(br#"{"type": "status", @}"#).unwrap_err();
        assert!(matches!(err, ProtocolError::Decode { offset: 19, .. }), "{err:?}");
    }

    #[test]
    fn unknown_fields_are_ignored() {
        let mut v = serde_json::to_value(Frame::Status(status("s90", 2))).unwrap();
        v["future_field"] = serde_json::json!({"x": 1});
        let bytes = serde_json::to_vec(&v).unwrap();
        assert_eq!(decode(&bytes).unwrap(), Frame::Status(status("s90", 2)));
    }

    #[test]
    fn wire_field_names_are_snake_case() {
        let bytes = encode(&Frame::Status(status("xc90", 1))).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
        for key in [
            "type",
            "vehicle_type",
            "vehicle_name",
            "gnss_lat",
            "gnss_lon",
            "gnss_heading",
            "speed_lat",
            "speed_lon",
            "proximity_m",
            "connection_status",
            "latency_ms",
            "local_timestamp_ms",
            "local_sequence",
        ] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["type"], "status");
        assert_eq!(v["vehicle_type"], "autonomous");
    }

    #[test]
    fn accept_packet_examples() {
        assert_eq!(accept_packet(Some(5), 4), PacketDecision::Discard);
        assert_eq!(accept_packet(None, 0), PacketDecision::Accept);
        assert_eq!(accept_packet(Some(5), 5), PacketDecision::Discard);
        assert_eq!(accept_packet(Some(5), 6), PacketDecision::Accept);
    }

    #[test]
    fn global_counter_examples() {
        let mut c = SequenceCounter::new();
        let first: Vec<u64> = (0..3).map(|_| c.next_sequence().unwrap()).collect();
        assert_eq!(first, vec![0, 1, 2]);
        let mut c = SequenceCounter::new();
        for _ in 0..1000 {
            c.next_sequence().unwrap();
        }
        assert_eq!(c.next_sequence().unwrap(), 1000);
    }

    #[test]
    fn counter_overflow_is_an_error() {
        let mut c = SequenceCounter::starting_at(u64::MAX);
        assert_eq!(c.next_sequence().unwrap(), u64::MAX);
        assert_eq!(c.next_sequence().unwrap_err(), ProtocolError::SequenceOverflow);
    }

    fn arb_status() -> impl Strategy<Value = StatusMessage> {
        (
            "[a-z0-9]{1,12}",
            -90.0f64..=90.0,
            -180.0f64..=180.0,
            0.0f64..360.0,
            -50.0f64..50.0,
            -50.0f64..50.0,
            -1e4f64..1e4,
            0.0f64..1e4,
            any::<u64>(),
            any::<u64>(),
            prop_oneof![
                Just(VehicleType::Autonomous),
                Just(VehicleType::HumanDrivenConnected),
                Just(VehicleType::Monitor)
            ],
        )
            .prop_map(|(name, lat, lon, hdg, sl, so, prox, lat_ms, ts, seq, vt)| StatusMessage {
                vehicle_type: vt,
                vehicle_name: name,
                gnss_lat: lat,
                gnss_lon: lon,
                gnss_heading: hdg,
                speed_lat: sl,
                speed_lon: so,
                proximity_m: prox,
                connection_status: ConnectionStatus::Active,
                latency_ms: lat_ms,
                local_timestamp_ms: ts,
                local_sequence: seq,
            })
    }

    proptest! {
        #[test]
        fn status_round_trips(s in arb_status()) {
            let f = Frame::Status(s);
            prop_assert_eq!(decode(&encode(&f).unwrap()).unwrap(), f);
        }

        #[test]
        fn update_round_trips(vs in proptest::collection::vec(arb_status(), 0..5), g in any::<u64>(), t in any::<u64>()) {
            let mut info = BTreeMap::new();
            info.insert(PRIORITY_VEHICLE_KEY.to_string(), "s90".to_string());
            let f = Frame::TrafficUpdate(TrafficUpdate {
                connected_nodes: vs.len() as u32,
                global_sequence: g,
                global_timestamp_ms: t,
                control_side_info: info,
                vehicles: vs,
            });
            prop_assert_eq!(decode(&encode(&f).unwrap()).unwrap(), f);
        }

        #[test]
        fn accepted_subsequence_is_increasing(perm in Just((0u64..50).collect::<Vec<_>>()).prop_shuffle()) {
            let mut filter = SequenceFilter::default();
            let accepted: Vec<u64> = perm.iter().copied().filter(|&s| filter.offer(s) == PacketDecision::Accept).collect();
            prop_assert!(accepted.windows(2).all(|w| w[0] < w[1]));
            prop_assert_eq!(accepted.last().copied(), Some(49));
        }
    }
}
