//! Transports: a deterministic simulated network under a virtual clock and a
//! newline-framed TCP transport. Both carry opaque frame bytes.

mod clock;
mod latency;
mod sim_link;
mod socket;

use thiserror::Error;

pub use clock::VirtualClock;
pub use latency::{DelayDistribution, LatencyModel, LatencySampler};
pub use sim_link::{simulated_link, Delivery, NodeId, SimEndpoint, SimNetwork};
pub use socket::{loopback_socket_link, SocketEndpoint};
pub(crate) use socket::write_frame as socket_write;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid latency model: {0}")]
    Model(String),
    #[error("endpoint is disconnected")]
    Disconnected,
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportEvent {
    Message(Vec<u8>),
    Disconnected,
}

/// One side of a reliable bidirectional stream.
pub trait Transport {
    fn send(&mut self, frame: &[u8]) -> Result<(), NetError>;
    /// Next delivered event, if any is ready.
    fn try_recv(&mut self) -> Option<TransportEvent>;
    fn is_connected(&self) -> bool;
}
