//! Passive flow observers used as comparison points.
//!
//! Both record one flow per socket through the same hooks the discovery
//! agent uses, oriented client to server. The five-tuple observer keeps the
//! tuple as the socket sees it; the conntrack observer rewrites it to the
//! tuple that crosses the machine boundary, using only NAT state that lives
//! on its own machine.

use std::collections::{BTreeMap, HashSet};
use std::net::{IpAddr, SocketAddr};

use serde::{Deserialize, Serialize};

use crate::endpoint::{HookContext, Instrumentation, ProcessRef, SocketId, SocketRef, SocketSide, SocketState};
use crate::netsim::{ConntrackView, Tick, World};
use crate::packet::FiveTuple;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObserverKind {
    Fivetuple,
    Conntrack,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Outbound,
    Inbound,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowRecord {
    pub host: String,
    pub local_process: ProcessRef,
    /// Client-to-server tuple.
    pub tuple: FiveTuple,
    pub direction: Direction,
    pub time: Tick,
    pub observer: ObserverKind,
}

fn oriented(socket: &SocketRef) -> Option<(FiveTuple, Direction)> {
    let remote = socket.remote?;
    match socket.side {
        SocketSide::Client => Some((FiveTuple::tcp(socket.local, remote), Direction::Outbound)),
        SocketSide::Server => Some((FiveTuple::tcp(remote, socket.local), Direction::Inbound)),
        SocketSide::Listener => None,
    }
}

pub fn fivetuple_observe(host: &str, process: &ProcessRef, socket: &SocketRef, time: Tick) -> Option<FlowRecord> {
    let (tuple, direction) = oriented(socket)?;
    Some(FlowRecord {
        host: host.to_string(),
        local_process: process.clone(),
        tuple,
        direction,
        time,
        observer: ObserverKind::Fivetuple,
    })
}

pub fn conntrack_observe(
    view: ConntrackView<'_>,
    process: &ProcessRef,
    socket: &SocketRef,
    time: Tick,
) -> Option<FlowRecord> {
    let (tuple, direction) = oriented(socket)?;
    Some(FlowRecord {
        host: view.machine().to_string(),
        local_process: process.clone(),
        tuple: view.to_host_boundary(tuple),
        direction,
        time,
        observer: ObserverKind::Conntrack,
    })
}

#[derive(Debug, Clone)]
pub struct FlowObserver {
    kind: ObserverKind,
    seen: HashSet<SocketId>,
}

impl FlowObserver {
    pub fn new(kind: ObserverKind) -> Self {
        FlowObserver { kind, seen: HashSet::new() }
    }

    pub fn kind(&self) -> ObserverKind {
        self.kind
    }

    fn observe(&mut self, ctx: &mut HookContext<'_>, process: &ProcessRef, socket: &SocketRef) {
        if socket.side == SocketSide::Listener || self.seen.contains(&socket.id) {
            return;
        }
        // a client writing before the handshake has not crossed the host NAT
        // yet, so there is no entry to resolve against
        if self.kind == ObserverKind::Conntrack && socket.state != SocketState::Established {
            return;
        }
        self.seen.insert(socket.id);
        let rec = match self.kind {
            ObserverKind::Fivetuple => fivetuple_observe(ctx.machine, process, socket, ctx.time),
            ObserverKind::Conntrack => conntrack_observe(ctx.conntrack(), process, socket, ctx.time),
        };
        if let Some(r) = rec {
            ctx.emit(r);
        }
    }
}

impl Instrumentation for FlowObserver {
    fn on_send(&mut self, ctx: &mut HookContext<'_>, process: &ProcessRef, socket: &SocketRef) {
        self.observe(ctx, process, socket);
    }

    fn on_recv(&mut self, ctx: &mut HookContext<'_>, process: &ProcessRef, socket: &SocketRef) {
        self.observe(ctx, process, socket);
    }
}

/// Outcome of mapping a remote address to a known workload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Resolution {
    Process(ProcessRef),
    /// Synthetic `host:ip:port` label; `host` is `*` when no namespace owns the address.
    Unresolved {
        label: String,
        machine: Option<String>,
    },
}

#[derive(Debug, Clone)]
struct Namespace {
    node: String,
    machine: String,
    addrs: Vec<IpAddr>,
}

/// Catalog of service workloads: which namespace owns which address and
/// which service listens on which port there. Infrastructure processes such
/// as port forwarders are not listed.
#[derive(Debug, Clone, Default)]
pub struct AddressDirectory {
    namespaces: Vec<Namespace>,
    services: BTreeMap<(String, u16), ProcessRef>,
}

impl AddressDirectory {
    /// `services` lists (process, node, listen port).
    pub fn new(world: &World, services: &[(ProcessRef, String, u16)]) -> Self {
        let net = world.network();
        let namespaces = net
            .nodes
            .iter()
            .map(|n| Namespace {
                node: n.name.clone(),
                machine: net.machines[n.machine].clone(),
                addrs: n.interfaces.iter().map(|i| i.addr.addr()).collect(),
            })
            .collect();
        let services = services.iter().map(|(p, node, port)| ((node.clone(), *port), p.clone())).collect();
        AddressDirectory { namespaces, services }
    }

    /// Namespaces on the observer's machine are consulted first, then any
    /// namespace that owns the address unambiguously.
    pub fn resolve(&self, observer: &str, remote: SocketAddr) -> Resolution {
        let ip = remote.ip();
        let owners: Vec<&Namespace> = self.namespaces.iter().filter(|n| n.addrs.contains(&ip)).collect();
        let local: Vec<&Namespace> = owners.iter().copied().filter(|n| n.machine == observer).collect();
        let ns = match (local.as_slice(), owners.as_slice()) {
            ([one], _) => Some(*one),
            ([], [one]) => Some(*one),
            _ => None,
        };
        match ns {
            Some(ns) => match self.services.get(&(ns.node.clone(), remote.port())) {
                Some(p) => Resolution::Process(p.clone()),
                None => Resolution::Unresolved {
                    label: format!("{}:{remote}", ns.machine),
                    machine: Some(ns.machine.clone()),
                },
            },
            None => Resolution::Unresolved { label: format!("*:{remote}"), machine: None },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netsim::{materialize, NetworkTemplate, Placement};

    fn world(t: NetworkTemplate) -> (World, Vec<(ProcessRef, String, u16)>) {
        let placements = vec![
            Placement { name: "a".into(), host: 0, port: None, published: None },
            Placement { name: "b".into(), host: 1, port: None, published: None },
        ];
        let d = materialize(t, 2, 1, false, &placements);
        let mut w = World::new(&d.topology, 1).unwrap();
        let mut svc = Vec::new();
        for s in &d.services {
            let p = w.spawn_process(&s.node, &s.name, "docker").unwrap();
            svc.push((w.process(p).clone(), s.node.clone(), s.listen.port()));
        }
        (w, svc)
    }

    #[test]
    fn nat_free_resolves_service() {
        let (w, svc) = world(NetworkTemplate::NatFree);
        let dir = AddressDirectory::new(&w, &svc);
        assert_eq!(dir.resolve("vm1", "192.168.2.2:8001".parse().unwrap()), Resolution::Process(svc[1].0.clone()));
    }

    #[test]
    fn internal_nat_resolves_to_machine_only() {
        let (w, svc) = world(NetworkTemplate::InternalNat);
        let dir = AddressDirectory::new(&w, &svc);
        assert_eq!(
            dir.resolve("vm1", "192.168.2.2:5001".parse().unwrap()),
            Resolution::Unresolved { label: "vm2:192.168.2.2:5001".into(), machine: Some("vm2".into()) }
        );
    }

    #[test]
    fn gateway_address_resolves_to_gateway_only() {
        let (w, svc) = world(NetworkTemplate::ExternalNat);
        let dir = AddressDirectory::new(&w, &svc);
        assert!(matches!(
            dir.resolve("vm1", "8.8.8.8:5001".parse().unwrap()),
            Resolution::Unresolved { machine: Some(m), .. } if m == "gw2"
        ));
    }

    #[test]
    fn overlapping_lan_address_prefers_local_machine() {
        let (w, svc) = world(NetworkTemplate::ExternalNat);
        let dir = AddressDirectory::new(&w, &svc);
        match dir.resolve("vm2", "192.168.2.2:5001".parse().unwrap()) {
            Resolution::Unresolved { machine, .. } => assert_eq!(machine.as_deref(), Some("vm2")),
            other => panic!("{other:?}"),
        }
    }
}
