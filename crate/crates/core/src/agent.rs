//! In-band discovery agent.
//!
//! A target process's first payload-bearing packet on each connection gets
//! a fresh identifier in a TCP option. The agent on the receiving machine
//! picks the identifier up when the segment is queued, attributes it to the
//! process that reads the socket, and makes that process a target too.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::endpoint::{HookContext, Instrumentation, ProcessRef, SocketId, SocketRef, SocketSide};
use crate::netsim::Tick;
use crate::packet::{DiscoveryIdentifier, Packet, PacketError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Sender,
    Receiver,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscoveryEvent {
    pub id: DiscoveryIdentifier,
    pub endpoint: ProcessRef,
    pub role: Role,
    /// Connection end the endpoint's socket sits on.
    pub side: SocketSide,
    pub time: Tick,
}

/// How a process came to be targeted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "via", content = "id")]
pub enum Provenance {
    Manual,
    Discovered(DiscoveryIdentifier),
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum AgentError {
    #[error("process {process} runs on {process_host}, not {agent_host}")]
    ForeignProcess { process: String, process_host: String, agent_host: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AgentStats {
    pub injected: u64,
    pub no_room: u64,
    pub detected: u64,
}

#[derive(Debug, Clone)]
pub struct RippleAgent {
    machine: String,
    nonce: u64,
    counter: u64,
    targets: BTreeMap<ProcessRef, Provenance>,
    owned: HashMap<SocketId, ProcessRef>,
    sent: HashSet<SocketId>,
    pending: HashMap<SocketId, DiscoveryIdentifier>,
    stats: AgentStats,
}

impl RippleAgent {
    /// The identifier nonce is derived from `seed` and the machine name, so
    /// agents in one run never share a nonce prefix by accident.
    pub fn new(machine: impl Into<String>, seed: u64) -> Self {
        let machine = machine.into();
        // FNV-1a, stable across toolchains
        let salt =
            machine.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3));
        let nonce = ChaCha8Rng::seed_from_u64(seed ^ salt).gen();
        RippleAgent {
            machine,
            nonce,
            counter: 0,
            targets: BTreeMap::new(),
            owned: HashMap::new(),
            sent: HashSet::new(),
            pending: HashMap::new(),
            stats: AgentStats::default(),
        }
    }

    pub fn machine(&self) -> &str {
        &self.machine
    }

    pub fn register_target(&mut self, process: &ProcessRef) -> Result<(), AgentError> {
        if process.host != self.machine {
            return Err(AgentError::ForeignProcess {
                process: process.to_string(),
                process_host: process.host.clone(),
                agent_host: self.machine.clone(),
            });
        }
        self.targets.entry(process.clone()).or_insert(Provenance::Manual);
        Ok(())
    }

    pub fn is_target(&self, process: &ProcessRef) -> bool {
        self.targets.contains_key(process)
    }

    pub fn targets(&self) -> &BTreeMap<ProcessRef, Provenance> {
        &self.targets
    }

    pub fn stats(&self) -> &AgentStats {
        &self.stats
    }

    fn peek_identifier(&self) -> DiscoveryIdentifier {
        DiscoveryIdentifier::from_parts(self.nonce, self.counter)
    }
}

impl Instrumentation for RippleAgent {
    fn on_send(&mut self, _ctx: &mut HookContext<'_>, process: &ProcessRef, socket: &SocketRef) {
        if self.targets.contains_key(process) {
            self.owned.entry(socket.id).or_insert_with(|| process.clone());
        }
    }

    fn on_transmit(&mut self, ctx: &mut HookContext<'_>, socket: &SocketRef, packet: Packet) -> Packet {
        if packet.payload.is_empty() || self.sent.contains(&socket.id) {
            return packet;
        }
        let Some(owner) = self.owned.get(&socket.id) else {
            return packet;
        };
        let id = self.peek_identifier();
        match packet.inject_identifier(&id) {
            Ok(tagged) => {
                self.counter += 1;
                self.sent.insert(socket.id);
                self.stats.injected += 1;
                log::trace!("{}: tagged {} with {id}", self.machine, tagged.five_tuple());
                ctx.emit(DiscoveryEvent {
                    id,
                    endpoint: owner.clone(),
                    role: Role::Sender,
                    side: socket.side,
                    time: ctx.time,
                });
                tagged
            }
            Err(PacketError::NoRoom { .. }) => {
                self.stats.no_room += 1;
                packet
            }
            Err(e) => {
                log::debug!("{}: not tagging {}: {e}", self.machine, packet.five_tuple());
                packet
            }
        }
    }

    fn on_data_queued(&mut self, _ctx: &mut HookContext<'_>, socket: &SocketRef, packet: &Packet) {
        if let Some(id) = packet.extract_identifier() {
            self.stats.detected += 1;
            self.pending.insert(socket.id, id);
        }
    }

    fn on_recv(&mut self, ctx: &mut HookContext<'_>, process: &ProcessRef, socket: &SocketRef) {
        let Some(id) = self.pending.remove(&socket.id) else {
            return;
        };
        ctx.emit(DiscoveryEvent {
            id,
            endpoint: process.clone(),
            role: Role::Receiver,
            side: socket.side,
            time: ctx.time,
        });
        self.targets.entry(process.clone()).or_insert(Provenance::Discovered(id));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn proc(host: &str, pid: u32) -> ProcessRef {
        ProcessRef { host: host.into(), pid, cgroup: "docker/x".into(), name: "x".into() }
    }

    #[test]
    fn registration_is_idempotent_and_local() {
        let mut a = RippleAgent::new("vm1", 3);
        let p = proc("vm1", 1001);
        a.register_target(&p).unwrap();
        a.register_target(&p).unwrap();
        assert_eq!(a.targets().len(), 1);
        assert_eq!(a.targets()[&p], Provenance::Manual);
        assert!(matches!(a.register_target(&proc("vm2", 1001)), Err(AgentError::ForeignProcess { .. })));
    }

    #[test]
    fn nonces_differ_per_machine_and_are_seeded() {
        let a = RippleAgent::new("vm1", 3);
        let b = RippleAgent::new("vm2", 3);
        assert_ne!(a.nonce, b.nonce);
        assert_eq!(a.nonce, RippleAgent::new("vm1", 3).nonce);
    }

    #[test]
    fn provenance_serializes_with_identifier() {
        let p = Provenance::Discovered(DiscoveryIdentifier::from_parts(1, 2));
        assert_eq!(
            serde_json::to_string(&p).unwrap(),
            r#"{"via":"discovered","id":"00000000000000010000000000000002"}"#
        );
        assert_eq!(serde_json::to_string(&Provenance::Manual).unwrap(), r#"{"via":"manual"}"#);
    }
}
