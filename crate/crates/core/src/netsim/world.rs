use std::fmt;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::event::{Envelope, EventKind, EventQueue, ProcessAction, SimEvent, Tick};
use super::nat::{ConntrackEntry, CtMark};
use super::topology::{Network, NodeId, TopologyError, TopologySpec};
use crate::endpoint::{Instrumentation, Stack};
use crate::packet::{FiveTuple, Packet};
use crate::Record;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DropReason {
    NoRoute,
    TtlExpired,
    NoNeighbor,
    NotForwarding,
    NatPortsExhausted,
}

impl fmt::Display for DropReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::NoRoute => "no route",
            Self::TtlExpired => "ttl exhausted",
            Self::NoNeighbor => "next hop unreachable",
            Self::NotForwarding => "not addressed to node",
            Self::NatPortsExhausted => "nat ports exhausted",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropEvent {
    pub time: Tick,
    pub node: String,
    pub reason: DropReason,
    pub tuple: FiveTuple,
}

/// Where a probed packet ended up.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DeliveryTarget {
    Delivered { node: String, iface: String, tuple: FiveTuple, path: Vec<String> },
    Dropped(DropEvent),
}

/// Raw bytes seen arriving on an interface.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireCapture {
    pub time: Tick,
    pub node: String,
    pub iface: String,
    pub bytes: Vec<u8>,
}

/// Read-only conntrack access scoped to the nodes of one machine.
#[derive(Clone, Copy)]
pub struct ConntrackView<'a> {
    net: &'a Network,
    machine: usize,
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
#[error("conntrack of {node} is not visible from {machine}")]
pub struct AccessDenied {
    pub machine: String,
    pub node: String,
}

impl<'a> ConntrackView<'a> {
    pub(crate) fn new(net: &'a Network, machine: usize) -> Self {
        ConntrackView { net, machine }
    }

    pub fn machine(&self) -> &'a str {
        &self.net.machines[self.machine]
    }

    pub fn entries(&self, node: &str) -> Result<&'a [ConntrackEntry], AccessDenied> {
        let denied = || AccessDenied { machine: self.machine().to_string(), node: node.to_string() };
        let id = self.net.node_id(node).map_err(|_| denied())?;
        let n = self.net.node(id);
        if n.machine != self.machine {
            return Err(denied());
        }
        Ok(n.nat.as_ref().map_or(&[][..], |t| t.entries()))
    }

    /// Rewrites a client-to-server tuple observed inside this machine into the
    /// tuple it carries when crossing the machine's NAT.
    pub fn to_host_boundary(&self, tuple: FiveTuple) -> FiveTuple {
        let mut t = tuple;
        for n in self.net.nat_nodes_on(self.machine()) {
            let table = n.nat.as_ref().expect("filtered to NAT nodes");
            if let Some(x) = table.boundary(&t) {
                t = x;
            }
        }
        t
    }
}

pub struct World {
    pub(crate) net: Network,
    pub(crate) now: Tick,
    pub(crate) queue: EventQueue,
    digest: Sha256,
    pub(crate) rng: ChaCha8Rng,
    next_flight: u64,
    drops: Vec<DropEvent>,
    trace: Option<Vec<String>>,
    capture: Option<Vec<WireCapture>>,
    checksum_failures: u64,
    probe_result: Option<DeliveryTarget>,
    executed: u64,
    pub(crate) stack: Stack,
    pub(crate) instruments: Vec<Option<Box<dyn Instrumentation>>>,
    pub(crate) records: Vec<Record>,
}

impl World {
    pub fn new(spec: &TopologySpec, seed: u64) -> Result<World, TopologyError> {
        let net = Network::build(spec)?;
        let instruments = (0..net.machines.len()).map(|_| None).collect();
        let stack = Stack::new(net.nodes.len());
        Ok(World {
            net,
            now: 0,
            queue: EventQueue::new(),
            digest: Sha256::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            next_flight: 0,
            drops: Vec::new(),
            trace: None,
            capture: None,
            checksum_failures: 0,
            probe_result: None,
            executed: 0,
            stack,
            instruments,
            records: Vec::new(),
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn now(&self) -> Tick {
        self.now
    }

    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn trace_lines(&self) -> &[String] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn enable_capture(&mut self) {
        self.capture.get_or_insert_with(Vec::new);
    }

    pub fn captures(&self) -> &[WireCapture] {
        self.capture.as_deref().unwrap_or(&[])
    }

    /// Arrivals whose IP or TCP checksum did not verify.
    pub fn checksum_failures(&self) -> u64 {
        self.checksum_failures
    }

    pub fn drops(&self) -> &[DropEvent] {
        &self.drops
    }

    pub fn executed_events(&self) -> u64 {
        self.executed
    }

    /// Hex SHA-256 over every executed event.
    pub fn trace_digest(&self) -> String {
        let d = self.digest.clone().finalize();
        d.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn conntrack(&self, machine: &str) -> Option<ConntrackView<'_>> {
        let m = self.net.machines.iter().position(|x| x == machine)?;
        Some(ConntrackView::new(&self.net, m))
    }

    pub fn schedule(&mut self, time: Tick, kind: EventKind) -> u64 {
        debug_assert!(time >= self.now, "scheduling into the past");
        self.queue.push(time.max(self.now), kind)
    }

    pub fn pending_events(&self) -> usize {
        self.queue.len()
    }

    /// Executes the earliest pending event.
    pub fn step(&mut self) -> Option<SimEvent> {
        let ev = self.queue.pop()?;
        self.now = ev.time;
        self.executed += 1;
        self.absorb(&ev);
        match ev.kind.clone() {
            EventKind::Arrival { node, iface, envelope } => self.arrive(node, iface, envelope),
            EventKind::Process(ProcessAction::Request { client, target, payload }) => {
                self.start_request(client, target, payload)
            }
            EventKind::Timer { .. } => {}
        }
        Some(ev)
    }

    /// Runs until no events remain. Returns the number executed.
    pub fn run(&mut self) -> u64 {
        let start = self.executed;
        while self.step().is_some() {}
        self.executed - start
    }

    /// Runs every event scheduled at or before `t`.
    pub fn run_until(&mut self, t: Tick) {
        while self.queue.peek_time().is_some_and(|x| x <= t) {
            self.step();
        }
        self.now = self.now.max(t);
    }

    fn absorb(&mut self, ev: &SimEvent) {
        self.digest.update(ev.time.to_be_bytes());
        self.digest.update(ev.seq.to_be_bytes());
        match &ev.kind {
            EventKind::Arrival { node, iface, envelope } => {
                self.digest.update([0u8]);
                self.digest.update((node.0 as u64).to_be_bytes());
                self.digest.update(iface.map_or(u64::MAX, |i| i as u64).to_be_bytes());
                if let Ok(bytes) = envelope.packet.serialize() {
                    self.digest.update(&bytes);
                }
            }
            EventKind::Process(a) => {
                self.digest.update([1u8]);
                self.digest.update(format!("{a:?}").as_bytes());
            }
            EventKind::Timer { label } => {
                self.digest.update([2u8]);
                self.digest.update(label.as_bytes());
            }
        }
    }

    /// Sends `packet` from `node` and runs the world until its fate is
    /// known. The packet is not handed to any socket.
    pub fn route(&mut self, node: &str, packet: Packet) -> Result<DeliveryTarget, TopologyError> {
        let id = self.net.node_id(node)?;
        self.probe_result = None;
        let env = self.envelope(packet, None, true);
        self.output(id, env);
        while self.probe_result.is_none() && self.step().is_some() {}
        Ok(self.probe_result.take().expect("probe resolves before the queue drains"))
    }

    pub(crate) fn envelope(
        &mut self,
        packet: Packet,
        opener: Option<crate::endpoint::SocketId>,
        probe: bool,
    ) -> Envelope {
        self.next_flight += 1;
        Envelope { packet, flight: self.next_flight, opener, probe, path: Vec::new() }
    }

    fn drop_packet(&mut self, node: NodeId, env: &Envelope, reason: DropReason) {
        let ev = DropEvent {
            time: self.now,
            node: self.net.node(node).name.clone(),
            reason,
            tuple: env.packet.five_tuple(),
        };
        log::debug!("drop at {} t={}: {} ({})", ev.node, ev.time, ev.tuple, reason);
        if env.probe {
            self.probe_result = Some(DeliveryTarget::Dropped(ev.clone()));
        }
        self.drops.push(ev);
    }

    /// Local output from a socket on `node`.
    pub(crate) fn output(&mut self, node: NodeId, env: Envelope) {
        let dst = env.packet.dst().ip();
        if self.net.node(node).owns(dst) {
            let t = self.now + 1;
            self.schedule(t, EventKind::Arrival { node, iface: None, envelope: env });
            return;
        }
        self.forward(node, env, None);
    }

    fn forward(&mut self, node: NodeId, mut env: Envelope, mark: Option<CtMark>) {
        let Some(hop) = self.net.lookup(node, env.packet.dst().ip()) else {
            return self.drop_packet(node, &env, DropReason::NoRoute);
        };
        let n = &mut self.net.nodes[node.0];
        let out_name = n.interfaces[hop.iface].name.clone();
        if let Some(nat) = n.nat.as_mut() {
            if nat.postrouting(&mut env.packet, Some(&out_name), mark).is_err() {
                return self.drop_packet(node, &env, DropReason::NatPortsExhausted);
            }
        }
        let Some((peer, peer_iface)) = self.net.neighbor(node, hop.iface, hop.gateway) else {
            return self.drop_packet(node, &env, DropReason::NoNeighbor);
        };
        let t = self.now + self.net.latency(node, hop.iface);
        self.schedule(t, EventKind::Arrival { node: peer, iface: Some(peer_iface), envelope: env });
    }

    fn arrive(&mut self, node: NodeId, iface: Option<usize>, mut env: Envelope) {
        if let Some(cap) = self.capture.as_mut() {
            let n = &self.net.nodes[node.0];
            cap.push(WireCapture {
                time: self.now,
                node: n.name.clone(),
                iface: n.iface_name(iface).to_string(),
                bytes: env.packet.serialize().unwrap_or_default(),
            });
        }
        if !env.packet.checksums_valid() {
            self.checksum_failures += 1;
            log::warn!("checksum mismatch arriving at {}", self.net.nodes[node.0].name);
        }
        if env.probe {
            env.path.push(self.net.nodes[node.0].name.clone());
        }

        let before = env.packet.five_tuple();
        let n = &mut self.net.nodes[node.0];
        let in_name = n.iface_name(iface).to_string();
        let mark = match (iface, n.nat.as_mut()) {
            (Some(_), Some(nat)) => Some(nat.prerouting(&mut env.packet, Some(&in_name))),
            _ => None,
        };
        if let Some(lines) = self.trace.as_mut() {
            lines.push(format!(
                "{} {}:{} {} => {} opt={}",
                self.now,
                n.name,
                in_name,
                before,
                env.packet.five_tuple(),
                u8::from(env.packet.has_discovery_option()),
            ));
        }

        if n.owns(env.packet.dst().ip()) {
            if env.probe {
                self.probe_result = Some(DeliveryTarget::Delivered {
                    node: n.name.clone(),
                    iface: in_name,
                    tuple: env.packet.five_tuple(),
                    path: std::mem::take(&mut env.path),
                });
                return;
            }
            return self.deliver_local(node, env);
        }
        if !n.forwarding {
            return self.drop_packet(node, &env, DropReason::NotForwarding);
        }
        if n.strip_options {
            env.packet.strip_unknown_options();
        }
        if !env.packet.decrement_ttl() {
            return self.drop_packet(node, &env, DropReason::TtlExpired);
        }
        self.forward(node, env, mark);
    }
}
