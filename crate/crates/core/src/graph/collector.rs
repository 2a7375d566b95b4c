use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};

use crate::agent::{DiscoveryEvent, Role};
use crate::baselines::{AddressDirectory, Direction, FlowRecord, ObserverKind, Resolution};
use crate::endpoint::SocketSide;
use crate::packet::{DiscoveryIdentifier, FiveTuple};

use super::{DependencyGraph, EdgeSource, GraphNode, Record};

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum CollectorError {
    #[error("identifier {id} reported twice by a {role:?}")]
    ProtocolViolation { id: DiscoveryIdentifier, role: Role },
}

#[derive(Debug, Clone, Default)]
pub struct Collected {
    pub graph: DependencyGraph,
    /// Sender events whose identifier never reached an instrumented reader.
    pub unpaired_senders: usize,
    pub unpaired_receivers: usize,
}

/// Joins discovery events on their identifier and flow records on their
/// tuples.
#[derive(Debug, Default)]
pub struct Collector {
    graph: DependencyGraph,
    senders: HashMap<DiscoveryIdentifier, DiscoveryEvent>,
    receivers: HashMap<DiscoveryIdentifier, DiscoveryEvent>,
    joined: HashSet<DiscoveryIdentifier>,
    flows: Vec<FlowRecord>,
}

impl Collector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn ingest(&mut self, record: Record) -> Result<(), CollectorError> {
        match record {
            Record::Discovery(e) => self.ingest_discovery(e),
            Record::Flow(f) => {
                self.flows.push(f);
                Ok(())
            }
        }
    }

    pub fn ingest_all(&mut self, records: impl IntoIterator<Item = Record>) -> Result<(), CollectorError> {
        records.into_iter().try_for_each(|r| self.ingest(r))
    }

    fn ingest_discovery(&mut self, e: DiscoveryEvent) -> Result<(), CollectorError> {
        let id = e.id;
        let (mine, other) = match e.role {
            Role::Sender => (&mut self.senders, &mut self.receivers),
            Role::Receiver => (&mut self.receivers, &mut self.senders),
        };
        if mine.contains_key(&id) || (self.joined.contains(&id) && !other.contains_key(&id)) {
            return Err(CollectorError::ProtocolViolation { id, role: e.role });
        }
        match other.remove(&id) {
            Some(peer) => {
                let (s, r) = if e.role == Role::Sender { (e, peer) } else { (peer, e) };
                self.joined.insert(id);
                let from = self.graph.add_node(GraphNode::process(&s.endpoint));
                let to = self.graph.add_node(GraphNode::process(&r.endpoint));
                self.graph.observe(from, to, EdgeSource::Ripple, s.time.max(r.time), s.side == SocketSide::Client);
            }
            None => {
                mine.insert(id, e);
            }
        }
        Ok(())
    }

    fn resolved_edge(&mut self, f: &FlowRecord, directory: &AddressDirectory, source: EdgeSource) {
        let from = self.graph.add_node(GraphNode::process(&f.local_process));
        let to = match directory.resolve(&f.host, f.tuple.dst) {
            Resolution::Process(p) => self.graph.add_node(GraphNode::process(&p)),
            Resolution::Unresolved { label, machine } => self.graph.add_node(GraphNode::address(label, machine)),
        };
        self.graph.observe(from, to, source, f.time, true);
    }

    /// Resolves pending flow records and returns the graph.
    pub fn finish(mut self, directory: &AddressDirectory) -> Collected {
        let flows = std::mem::take(&mut self.flows);
        let mut inbound: BTreeMap<FiveTuple, VecDeque<&FlowRecord>> = BTreeMap::new();
        for f in flows.iter().filter(|f| f.direction == Direction::Inbound && f.observer == ObserverKind::Conntrack) {
            inbound.entry(f.tuple).or_default().push_back(f);
        }
        for f in flows.iter().filter(|f| f.direction == Direction::Outbound) {
            match f.observer {
                ObserverKind::Fivetuple => self.resolved_edge(f, directory, EdgeSource::Fivetuple),
                ObserverKind::Conntrack => match inbound.get_mut(&f.tuple).and_then(|q| q.pop_front()) {
                    Some(peer) => {
                        let from = self.graph.add_node(GraphNode::process(&f.local_process));
                        let to = self.graph.add_node(GraphNode::process(&peer.local_process));
                        self.graph.observe(from, to, EdgeSource::Conntrack, f.time.max(peer.time), true);
                    }
                    None => self.resolved_edge(f, directory, EdgeSource::Conntrack),
                },
            }
        }
        Collected { unpaired_senders: self.senders.len(), unpaired_receivers: self.receivers.len(), graph: self.graph }
    }
}
