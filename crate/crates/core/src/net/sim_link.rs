use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use super::{LatencyModel, LatencySampler, NetError, Transport, TransportEvent, VirtualClock};

pub type NodeId = u32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub time_us: u64,
    pub sent_us: u64,
    pub from: NodeId,
    pub to: NodeId,
    pub seq: u64,
    pub payload: Vec<u8>,
}

/// Ordering key: delivery time, then sender, then sender sequence.
type Key = (u64, NodeId, u64);

#[derive(Debug)]
struct Link {
    sampler: LatencySampler,
    last_key: Option<Key>,
    last_time_us: u64,
}

/// Reliable in-process network. Every directed link is FIFO unless the
/// model's reorder probability swaps two adjacent deliveries.
#[derive(Debug)]
pub struct SimNetwork {
    clock: VirtualClock,
    model: LatencyModel,
    links: BTreeMap<(NodeId, NodeId), Link>,
    pending: BTreeMap<Key, (NodeId, u64, Vec<u8>)>,
    next_seq: BTreeMap<NodeId, u64>,
    closed: Vec<NodeId>,
}

impl SimNetwork {
    pub fn new(model: LatencyModel, clock: VirtualClock) -> Result<Self, NetError> {
        model.validate()?;
        Ok(Self {
            clock,
            model,
            links: BTreeMap::new(),
            pending: BTreeMap::new(),
            next_seq: BTreeMap::new(),
            closed: Vec::new(),
        })
    }

    pub fn clock(&self) -> &VirtualClock {
        &self.clock
    }

    /// Queues `payload` and returns its scheduled delivery time.
    pub fn send(&mut self, from: NodeId, to: NodeId, payload: Vec<u8>) -> Result<u64, NetError> {
        if self.closed.contains(&from) || self.closed.contains(&to) {
            return Err(NetError::Disconnected);
        }
        let now = self.clock.now_us();
        let link = match self.links.entry((from, to)) {
            std::collections::btree_map::Entry::Occupied(e) => e.into_mut(),
            std::collections::btree_map::Entry::Vacant(e) => e.insert(Link {
                sampler: self.model.sampler(((from as u64) << 32) | to as u64)?,
                last_key: None,
                last_time_us: 0,
            }),
        };
        let seq_slot = self.next_seq.entry(from).or_insert(0);
        let seq = *seq_slot;
        *seq_slot += 1;

        // A stream transport never overtakes itself.
        let time = (now + link.sampler.sample_us()).max(link.last_time_us);
        link.last_time_us = time;
        let mut key = (time, from, seq);
        let mut latest = key;
        if link.sampler.reorder() {
            if let Some(prev) = link.last_key.filter(|k| self.pending.contains_key(k)) {
                let entry = self.pending.remove(&prev).expect("checked");
                latest = (time, prev.1, prev.2);
                self.pending.insert(latest, entry);
                key = (prev.0, from, seq);
            }
        }
        link.last_key = Some(latest);
        self.pending.insert(key, (to, now, payload));
        Ok(key.0)
    }

    pub fn next_delivery_time(&self) -> Option<u64> {
        self.pending.keys().next().map(|k| k.0)
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    /// Removes and returns every delivery due at or before `now_us`, in order.
    pub fn drain_due(&mut self, now_us: u64) -> Vec<Delivery> {
        let later = self.pending.split_off(&(now_us + 1, 0, 0));
        let due = std::mem::replace(&mut self.pending, later);
        due.into_iter()
            .map(|((time_us, from, seq), (to, sent_us, payload))| Delivery { time_us, sent_us, from, to, seq, payload })
            .collect()
    }

    fn pop_due_for(&mut self, node: NodeId, now_us: u64) -> Option<Delivery> {
        let key = *self.pending.iter().find(|(k, v)| k.0 <= now_us && v.0 == node)?.0;
        let (to, sent_us, payload) = self.pending.remove(&key)?;
        Some(Delivery { time_us: key.0, sent_us, from: key.1, to, seq: key.2, payload })
    }

    fn has_pending_for(&self, node: NodeId) -> bool {
        self.pending.values().any(|v| v.0 == node)
    }

    /// Closes a node; its peers see a disconnect after draining.
    pub fn close(&mut self, node: NodeId) {
        if !self.closed.contains(&node) {
            self.closed.push(node);
        }
    }

    pub fn is_closed(&self, node: NodeId) -> bool {
        self.closed.contains(&node)
    }
}

/// One side of a two-node simulated link.
#[derive(Debug, Clone)]
pub struct SimEndpoint {
    net: Rc<RefCell<SimNetwork>>,
    me: NodeId,
    peer: NodeId,
    reported_disconnect: bool,
}

/// Builds a connected pair of endpoints sharing one simulated network.
pub fn simulated_link(model: LatencyModel, clock: VirtualClock) -> Result<(SimEndpoint, SimEndpoint), NetError> {
    let net = Rc::new(RefCell::new(SimNetwork::new(model, clock)?));
    let a = SimEndpoint { net: net.clone(), me: 0, peer: 1, reported_disconnect: false };
    let b = SimEndpoint { net, me: 1, peer: 0, reported_disconnect: false };
    Ok((a, b))
}

impl SimEndpoint {
    pub fn close(&mut self) {
        self.net.borrow_mut().close(self.me);
    }
}

impl Transport for SimEndpoint {
    fn send(&mut self, frame: &[u8]) -> Result<(), NetError> {
        self.net.borrow_mut().send(self.me, self.peer, frame.to_vec()).map(|_| ())
    }

    fn try_recv(&mut self) -> Option<TransportEvent> {
        let mut net = self.net.borrow_mut();
        let now = net.clock.now_us();
        if let Some(d) = net.pop_due_for(self.me, now) {
            return Some(TransportEvent::Message(d.payload));
        }
        if net.is_closed(self.peer) && !net.has_pending_for(self.me) && !self.reported_disconnect {
            self.reported_disconnect = true;
            return Some(TransportEvent::Disconnected);
        }
        None
    }

    fn is_connected(&self) -> bool {
        let net = self.net.borrow();
        !net.is_closed(self.me) && !net.is_closed(self.peer)
    }
}
