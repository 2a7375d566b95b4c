//! Process-level dependency graph.

mod collector;
mod export;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::agent::DiscoveryEvent;
use crate::baselines::FlowRecord;
use crate::endpoint::ProcessRef;
use crate::netsim::Tick;

pub use collector::{Collected, Collector, CollectorError};
pub use export::{export_dot, export_json, import_json, ImportError, GRAPH_SCHEMA};

/// Telemetry emitted by instrumentation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase")]
pub enum Record {
    Discovery(DiscoveryEvent),
    Flow(FlowRecord),
}

impl From<DiscoveryEvent> for Record {
    fn from(e: DiscoveryEvent) -> Self {
        Record::Discovery(e)
    }
}

impl From<FlowRecord> for Record {
    fn from(r: FlowRecord) -> Self {
        Record::Flow(r)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeKey {
    Process {
        host: String,
        pid: u32,
    },
    /// Synthetic node for an address no workload could be found for.
    Address(String),
}

impl NodeKey {
    pub fn of(p: &ProcessRef) -> Self {
        NodeKey::Process { host: p.host.clone(), pid: p.pid }
    }
}

impl fmt::Display for NodeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeKey::Process { host, pid } => write!(f, "{host}/{pid}"),
            NodeKey::Address(label) => write!(f, "addr:{label}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphNode {
    pub key: NodeKey,
    pub name: String,
    pub machine: Option<String>,
    pub cgroup: Option<String>,
}

impl GraphNode {
    pub fn process(p: &ProcessRef) -> Self {
        GraphNode {
            key: NodeKey::of(p),
            name: p.name.clone(),
            machine: Some(p.host.clone()),
            cgroup: Some(p.cgroup.clone()),
        }
    }

    pub fn address(label: String, machine: Option<String>) -> Self {
        GraphNode { key: NodeKey::Address(label.clone()), name: label, machine, cgroup: None }
    }
}

/// Which mechanism produced an edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeSource {
    Ripple,
    Fivetuple,
    Conntrack,
}

impl fmt::Display for EdgeSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ripple => "ripple",
            Self::Fivetuple => "fivetuple",
            Self::Conntrack => "conntrack",
        })
    }
}

/// A directed dependency. `forward` counts observations where the sender
/// opened the connection; `reverse` counts ones where it accepted it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphEdge {
    pub from: NodeKey,
    pub to: NodeKey,
    pub source: EdgeSource,
    pub first_seen: Tick,
    pub forward: u32,
    pub reverse: u32,
    /// Observation times, ascending.
    pub seen: Vec<Tick>,
}

impl GraphEdge {
    pub fn is_forward(&self) -> bool {
        self.forward > 0
    }

    pub fn connections(&self) -> u32 {
        self.forward + self.reverse
    }

    pub fn active_in(&self, start: Tick, end: Tick) -> bool {
        let i = self.seen.partition_point(|&t| t < start);
        self.seen.get(i).is_some_and(|&t| t <= end)
    }
}

pub type EdgeKey = (NodeKey, NodeKey, EdgeSource);

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DependencyGraph {
    pub nodes: BTreeMap<NodeKey, GraphNode>,
    pub edges: BTreeMap<EdgeKey, GraphEdge>,
    pub metadata: BTreeMap<String, String>,
    /// Analysis window for the active flag of exported edges.
    pub window: Option<(Tick, Tick)>,
}

impl DependencyGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, node: GraphNode) -> NodeKey {
        let key = node.key.clone();
        self.nodes.entry(key.clone()).or_insert(node);
        key
    }

    /// Records one observation of `from -> to`.
    pub fn observe(&mut self, from: NodeKey, to: NodeKey, source: EdgeSource, time: Tick, forward: bool) {
        debug_assert!(self.nodes.contains_key(&from) && self.nodes.contains_key(&to));
        let e = self.edges.entry((from.clone(), to.clone(), source)).or_insert_with(|| GraphEdge {
            from,
            to,
            source,
            first_seen: time,
            forward: 0,
            reverse: 0,
            seen: Vec::new(),
        });
        e.first_seen = e.first_seen.min(time);
        if forward {
            e.forward += 1;
        } else {
            e.reverse += 1;
        }
        let at = e.seen.partition_point(|&t| t <= time);
        e.seen.insert(at, time);
    }

    fn merge_edge(&mut self, edge: GraphEdge) {
        match self.edges.get_mut(&(edge.from.clone(), edge.to.clone(), edge.source)) {
            Some(e) => {
                e.first_seen = e.first_seen.min(edge.first_seen);
                e.forward += edge.forward;
                e.reverse += edge.reverse;
                e.seen.extend(edge.seen);
                e.seen.sort_unstable();
            }
            None => {
                self.edges.insert((edge.from.clone(), edge.to.clone(), edge.source), edge);
            }
        }
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// (sender name, receiver name) of forward edges; every edge when
    /// `undirected`, with each pair normalised so the smaller name is first.
    pub fn named_pairs(&self, undirected: bool) -> BTreeSet<(String, String)> {
        self.edges
            .values()
            .filter(|e| undirected || e.is_forward())
            .map(|e| {
                let a = self.nodes[&e.from].name.clone();
                let b = self.nodes[&e.to].name.clone();
                if undirected && b < a {
                    (b, a)
                } else {
                    (a, b)
                }
            })
            .collect()
    }

    pub fn process_keys(&self) -> BTreeSet<NodeKey> {
        self.nodes.keys().filter(|k| matches!(k, NodeKey::Process { .. })).cloned().collect()
    }

    /// Node keys reachable from `from` along edges of any direction flag.
    pub fn reachable(&self, from: &NodeKey) -> BTreeSet<NodeKey> {
        let mut seen = BTreeSet::new();
        let mut stack = vec![from.clone()];
        while let Some(k) = stack.pop() {
            for e in self.edges.values().filter(|e| e.from == k) {
                if seen.insert(e.to.clone()) {
                    stack.push(e.to.clone());
                }
            }
        }
        seen
    }
}

/// Removes forwarder nodes, composing every in-edge with every out-edge.
/// A composed edge is forward only when both halves are; its first
/// observation is the later of the two.
pub fn abstract_forwarders(g: &DependencyGraph, forwarders: &BTreeSet<NodeKey>) -> DependencyGraph {
    let mut out = g.clone();
    for f in forwarders {
        if out.nodes.remove(f).is_none() {
            continue;
        }
        let (touching, kept): (Vec<_>, Vec<_>) =
            std::mem::take(&mut out.edges).into_iter().partition(|(k, _)| k.0 == *f || k.1 == *f);
        out.edges = kept.into_iter().collect();
        let ins: Vec<&GraphEdge> = touching.iter().map(|(_, e)| e).filter(|e| e.to == *f && e.from != *f).collect();
        let outs: Vec<&GraphEdge> = touching.iter().map(|(_, e)| e).filter(|e| e.from == *f && e.to != *f).collect();
        for a in &ins {
            for b in outs.iter().filter(|b| b.source == a.source && b.to != a.from) {
                let forward = if a.is_forward() && b.is_forward() { a.forward.min(b.forward) } else { 0 };
                let reverse = if forward == 0 { a.reverse.min(b.reverse).max(1) } else { a.reverse.min(b.reverse) };
                let first_seen = a.first_seen.max(b.first_seen);
                let mut seen: Vec<Tick> = a.seen.iter().chain(&b.seen).copied().filter(|&t| t >= first_seen).collect();
                seen.sort_unstable();
                seen.dedup();
                if seen.is_empty() {
                    seen.push(first_seen);
                }
                out.merge_edge(GraphEdge {
                    from: a.from.clone(),
                    to: b.to.clone(),
                    source: a.source,
                    first_seen,
                    forward,
                    reverse,
                    seen,
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(name: &str, pid: u32) -> ProcessRef {
        ProcessRef { host: "vm1".into(), pid, cgroup: format!("docker/{name}"), name: name.into() }
    }

    fn chain(names: &[&str]) -> (DependencyGraph, Vec<NodeKey>) {
        let mut g = DependencyGraph::new();
        let keys: Vec<NodeKey> =
            names.iter().enumerate().map(|(i, n)| g.add_node(GraphNode::process(&p(n, 1000 + i as u32)))).collect();
        for (i, w) in keys.windows(2).enumerate() {
            g.observe(w[0].clone(), w[1].clone(), EdgeSource::Ripple, 10 * (i as u64 + 1), true);
        }
        (g, keys)
    }

    #[test]
    fn proxy_is_contracted() {
        let (g, k) = chain(&["a", "docker-proxy", "b"]);
        let h = abstract_forwarders(&g, &BTreeSet::from([k[1].clone()]));
        assert_eq!(h.named_pairs(false), BTreeSet::from([("a".to_string(), "b".to_string())]));
        assert_eq!(h.edges.values().next().unwrap().first_seen, 20);
        assert_eq!(h.nodes.len(), 2);
    }

    #[test]
    fn no_forwarders_is_identity() {
        let (g, _) = chain(&["a", "b", "c"]);
        assert_eq!(abstract_forwarders(&g, &BTreeSet::new()), g);
    }

    #[test]
    fn proxy_chain_contracts_transitively() {
        let (g, k) = chain(&["a", "p1", "p2", "b"]);
        let h = abstract_forwarders(&g, &BTreeSet::from([k[1].clone(), k[2].clone()]));
        assert_eq!(h.named_pairs(false), BTreeSet::from([("a".to_string(), "b".to_string())]));
    }

    #[test]
    fn dangling_forwarder_disappears() {
        let (g, k) = chain(&["p", "b"]);
        let h = abstract_forwarders(&g, &BTreeSet::from([k[0].clone()]));
        assert!(h.edges.is_empty());
        assert_eq!(h.nodes.len(), 1);
    }

    #[test]
    fn repeated_observations_collapse() {
        let (mut g, k) = chain(&["a", "b"]);
        g.observe(k[0].clone(), k[1].clone(), EdgeSource::Ripple, 5, true);
        g.observe(k[0].clone(), k[1].clone(), EdgeSource::Ripple, 30, false);
        let e = g.edges.values().next().unwrap();
        assert_eq!((e.first_seen, e.forward, e.reverse), (5, 2, 1));
        assert_eq!(e.seen, [5, 10, 30]);
        assert!(e.active_in(6, 10));
        assert!(!e.active_in(11, 29));
    }

    #[test]
    fn reverse_only_edges_are_not_scored() {
        let (mut g, k) = chain(&["a", "b"]);
        g.observe(k[1].clone(), k[0].clone(), EdgeSource::Ripple, 12, false);
        assert_eq!(g.named_pairs(false).len(), 1);
        assert_eq!(g.named_pairs(true).len(), 1);
        assert_eq!(g.edge_count(), 2);
    }
}
