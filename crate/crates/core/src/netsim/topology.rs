//! Declarative topology description and its validated, indexed form.

use std::collections::{BTreeSet, HashMap};
use std::net::IpAddr;

use ipnet::IpNet;
use serde::{Deserialize, Serialize};

use super::event::Tick;
use super::nat::{NatRule, NatTable};

fn one() -> Tick {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentSpec {
    pub name: String,
    #[serde(default = "one")]
    pub latency: Tick,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterfaceSpec {
    pub name: String,
    pub segment: String,
    /// Address with its on-link prefix.
    pub addr: IpNet,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteSpec {
    pub dest: IpNet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub via: Option<IpAddr>,
    /// Outgoing interface; inferred from `via` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iface: Option<String>,
}

/// A network namespace: a host, a container, or a router.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub name: String,
    /// Physical machine the namespace lives on; defaults to the node name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub machine: Option<String>,
    #[serde(default)]
    pub forwarding: bool,
    pub interfaces: Vec<InterfaceSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub routes: Vec<RouteSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub nat: Vec<NatRule>,
    /// Drop non-standard TCP options from forwarded packets.
    #[serde(default)]
    pub strip_options: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySpec {
    pub segments: Vec<SegmentSpec>,
    pub nodes: Vec<NodeSpec>,
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum TopologyError {
    #[error("duplicate node name {0}")]
    DuplicateNode(String),
    #[error("duplicate segment name {0}")]
    DuplicateSegment(String),
    #[error("duplicate interface {iface} on {node}")]
    DuplicateInterface { node: String, iface: String },
    #[error("interface {node}:{iface} references unknown segment {segment}")]
    UnknownSegment { node: String, iface: String, segment: String },
    #[error("route on {node} references unknown interface {iface}")]
    UnknownInterface { node: String, iface: String },
    #[error("route on {node} via {via} has no on-link interface")]
    UnreachableGateway { node: String, via: IpAddr },
    #[error("address {addr} assigned twice on segment {segment}")]
    DuplicateAddress { segment: String, addr: IpAddr },
    #[error("unknown node {0}")]
    UnknownNode(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SegmentId(pub usize);

#[derive(Debug, Clone)]
pub struct Interface {
    pub name: String,
    pub addr: IpNet,
    pub segment: SegmentId,
}

#[derive(Debug, Clone)]
pub struct Route {
    pub dest: IpNet,
    pub via: Option<IpAddr>,
    pub iface: usize,
}

#[derive(Debug, Clone)]
pub struct Node {
    pub name: String,
    pub machine: usize,
    pub forwarding: bool,
    pub interfaces: Vec<Interface>,
    pub routes: Vec<Route>,
    pub nat: Option<NatTable>,
    pub strip_options: bool,
}

impl Node {
    pub fn owns(&self, ip: IpAddr) -> bool {
        ip.is_loopback() || self.interfaces.iter().any(|i| i.addr.addr() == ip)
    }

    pub fn iface_name(&self, iface: Option<usize>) -> &str {
        iface.map_or("lo", |i| self.interfaces[i].name.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct Segment {
    pub name: String,
    pub latency: Tick,
}

/// Result of a routing lookup.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NextHop {
    pub iface: usize,
    pub gateway: IpAddr,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub nodes: Vec<Node>,
    pub segments: Vec<Segment>,
    pub machines: Vec<String>,
    by_name: HashMap<String, NodeId>,
    neighbors: HashMap<(usize, IpAddr), (NodeId, usize)>,
}

impl Network {
    pub fn build(spec: &TopologySpec) -> Result<Network, TopologyError> {
        let mut seg_index = HashMap::new();
        let mut segments = Vec::new();
        for s in &spec.segments {
            if seg_index.insert(s.name.clone(), segments.len()).is_some() {
                return Err(TopologyError::DuplicateSegment(s.name.clone()));
            }
            segments.push(Segment { name: s.name.clone(), latency: s.latency });
        }

        let mut by_name = HashMap::new();
        let mut machines: Vec<String> = Vec::new();
        let mut nodes = Vec::new();
        let mut neighbors = HashMap::new();
        for (id, n) in spec.nodes.iter().enumerate() {
            if by_name.insert(n.name.clone(), NodeId(id)).is_some() {
                return Err(TopologyError::DuplicateNode(n.name.clone()));
            }
            let machine_name = n.machine.clone().unwrap_or_else(|| n.name.clone());
            let machine = match machines.iter().position(|m| *m == machine_name) {
                Some(i) => i,
                None => {
                    machines.push(machine_name);
                    machines.len() - 1
                }
            };

            let mut interfaces: Vec<Interface> = Vec::new();
            for i in &n.interfaces {
                if interfaces.iter().any(|x| x.name == i.name) {
                    return Err(TopologyError::DuplicateInterface { node: n.name.clone(), iface: i.name.clone() });
                }
                let seg = *seg_index.get(&i.segment).ok_or_else(|| TopologyError::UnknownSegment {
                    node: n.name.clone(),
                    iface: i.name.clone(),
                    segment: i.segment.clone(),
                })?;
                if neighbors.insert((seg, i.addr.addr()), (NodeId(id), interfaces.len())).is_some() {
                    return Err(TopologyError::DuplicateAddress { segment: i.segment.clone(), addr: i.addr.addr() });
                }
                interfaces.push(Interface { name: i.name.clone(), addr: i.addr, segment: SegmentId(seg) });
            }

            let mut routes: Vec<Route> = interfaces
                .iter()
                .enumerate()
                .map(|(idx, i)| Route { dest: i.addr.trunc(), via: None, iface: idx })
                .collect();
            for r in &n.routes {
                let iface = match (&r.iface, r.via) {
                    (Some(name), _) => interfaces
                        .iter()
                        .position(|i| i.name == *name)
                        .ok_or_else(|| TopologyError::UnknownInterface { node: n.name.clone(), iface: name.clone() })?,
                    (None, Some(via)) => interfaces
                        .iter()
                        .enumerate()
                        .filter(|(_, i)| i.addr.contains(&via))
                        .max_by_key(|(_, i)| i.addr.prefix_len())
                        .map(|(idx, _)| idx)
                        .ok_or(TopologyError::UnreachableGateway { node: n.name.clone(), via })?,
                    (None, None) => {
                        return Err(TopologyError::UnknownInterface { node: n.name.clone(), iface: String::new() })
                    }
                };
                routes.push(Route { dest: r.dest, via: r.via, iface });
            }

            let nat = (!n.nat.is_empty()).then(|| NatTable::new(n.name.clone(), n.nat.clone()));
            nodes.push(Node {
                name: n.name.clone(),
                machine,
                forwarding: n.forwarding,
                interfaces,
                routes,
                nat,
                strip_options: n.strip_options,
            });
        }
        Ok(Network { nodes, segments, machines, by_name, neighbors })
    }

    pub fn node_id(&self, name: &str) -> Result<NodeId, TopologyError> {
        self.by_name.get(name).copied().ok_or_else(|| TopologyError::UnknownNode(name.to_string()))
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn machine_of(&self, id: NodeId) -> &str {
        &self.machines[self.nodes[id.0].machine]
    }

    /// Longest-prefix match; earlier routes win ties.
    pub fn lookup(&self, node: NodeId, dst: IpAddr) -> Option<NextHop> {
        let n = &self.nodes[node.0];
        let mut best: Option<&Route> = None;
        for r in &n.routes {
            if r.dest.contains(&dst) && best.is_none_or(|b| r.dest.prefix_len() > b.dest.prefix_len()) {
                best = Some(r);
            }
        }
        best.map(|r| NextHop { iface: r.iface, gateway: r.via.unwrap_or(dst) })
    }

    /// The interface on `node`'s segment that answers for `addr`.
    pub fn neighbor(&self, node: NodeId, iface: usize, addr: IpAddr) -> Option<(NodeId, usize)> {
        let seg = self.nodes[node.0].interfaces[iface].segment.0;
        self.neighbors.get(&(seg, addr)).copied().filter(|(n, _)| *n != node)
    }

    pub fn latency(&self, node: NodeId, iface: usize) -> Tick {
        self.segments[self.nodes[node.0].interfaces[iface].segment.0].latency
    }

    /// Nodes placed on `machine` that run NAT.
    pub fn nat_nodes_on(&self, machine: &str) -> impl Iterator<Item = &Node> + '_ {
        let m = self.machines.iter().position(|x| x == machine);
        self.nodes.iter().filter(move |n| Some(n.machine) == m && n.nat.is_some())
    }

    pub fn machine_names(&self) -> BTreeSet<&str> {
        self.machines.iter().map(String::as_str).collect()
    }
}
