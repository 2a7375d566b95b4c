use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::net::SocketAddr;

use crate::endpoint::{ProcessId, SocketId};
use crate::netsim::NodeId;
use crate::packet::Packet;

/// Simulated time.
pub type Tick = u64;

/// A packet in flight, plus simulator bookkeeping that never reaches the wire.
#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub packet: Packet,
    pub flight: u64,
    /// Socket that originated the connection this packet opens, if a SYN.
    pub(crate) opener: Option<SocketId>,
    pub(crate) probe: bool,
    pub(crate) path: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProcessAction {
    /// Open a connection, write one request, read one response, close.
    Request { client: ProcessId, target: SocketAddr, payload: Vec<u8> },
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventKind {
    Arrival {
        node: NodeId,
        iface: Option<usize>,
        envelope: Envelope,
    },
    Process(ProcessAction),
    /// Marker with no side effect.
    Timer {
        label: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimEvent {
    pub time: Tick,
    pub seq: u64,
    pub kind: EventKind,
}

struct Queued(SimEvent);

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        (self.0.time, self.0.seq) == (other.0.time, other.0.seq)
    }
}

impl Eq for Queued {}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Queued {
    // min-heap on (time, seq)
    fn cmp(&self, other: &Self) -> Ordering {
        (other.0.time, other.0.seq).cmp(&(self.0.time, self.0.seq))
    }
}

#[derive(Default)]
pub struct EventQueue {
    heap: BinaryHeap<Queued>,
    next_seq: u64,
}

impl EventQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, time: Tick, kind: EventKind) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Queued(SimEvent { time, seq, kind }));
        seq
    }

    pub fn pop(&mut self) -> Option<SimEvent> {
        self.heap.pop().map(|q| q.0)
    }

    pub fn peek_time(&self) -> Option<Tick> {
        self.heap.peek().map(|q| q.0.time)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn timer(l: &str) -> EventKind {
        EventKind::Timer { label: l.into() }
    }

    fn label(e: SimEvent) -> String {
        match e.kind {
            EventKind::Timer { label } => label,
            _ => unreachable!(),
        }
    }

    #[test]
    fn earliest_first() {
        let mut q = EventQueue::new();
        q.push(5, timer("five"));
        q.push(3, timer("three"));
        assert_eq!(label(q.pop().unwrap()), "three");
        assert_eq!(label(q.pop().unwrap()), "five");
    }

    #[test]
    fn ties_keep_insertion_order() {
        let mut q = EventQueue::new();
        for l in ["a", "b", "c", "d"] {
            q.push(7, timer(l));
        }
        let order: Vec<_> = std::iter::from_fn(|| q.pop()).map(label).collect();
        assert_eq!(order, ["a", "b", "c", "d"]);
    }

    #[test]
    fn empty_pops_nothing() {
        assert!(EventQueue::new().pop().is_none());
    }
}
