//! Processes, simplified TCP sockets, and the hook points agents attach to.
//!
//! Hook order per data packet: `on_send` when the process writes, then
//! `on_transmit` as the packet leaves the socket. On the receiving side
//! `on_data_queued` fires when the segment is queued and `on_recv` when the
//! owning process reads it, which happens immediately.

mod stack;

use std::any::Any;
use std::cmp::Ordering;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::net::SocketAddr;

use serde::{Deserialize, Serialize};

use crate::netsim::{ConntrackView, Tick};
use crate::packet::Packet;
use crate::Record;

pub(crate) use stack::Stack;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ProcessId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SocketId(pub usize);

/// Identity is (host, pid); cgroup and name are labels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProcessRef {
    pub host: String,
    pub pid: u32,
    pub cgroup: String,
    pub name: String,
}

impl PartialEq for ProcessRef {
    fn eq(&self, other: &Self) -> bool {
        self.host == other.host && self.pid == other.pid
    }
}

impl Eq for ProcessRef {}

impl Hash for ProcessRef {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.host.hash(state);
        self.pid.hash(state);
    }
}

impl PartialOrd for ProcessRef {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for ProcessRef {
    fn cmp(&self, other: &Self) -> Ordering {
        (&self.host, self.pid).cmp(&(&other.host, other.pid))
    }
}

impl fmt::Display for ProcessRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}/{}", self.name, self.host, self.pid)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SocketState {
    Listening,
    Connecting,
    Established,
    Closed,
}

/// Which end of the connection a socket is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SocketSide {
    Listener,
    /// Actively opened.
    Client,
    /// Accepted from a listener.
    Server,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SocketRef {
    pub id: SocketId,
    pub owner: ProcessRef,
    pub local: SocketAddr,
    pub remote: Option<SocketAddr>,
    pub state: SocketState,
    pub side: SocketSide,
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum EndpointError {
    #[error("address {0} already in use")]
    AddressInUse(SocketAddr),
    #[error("no route to {0}")]
    NoRoute(SocketAddr),
    #[error("socket {0:?} is closed")]
    SocketClosed(SocketId),
    #[error("socket {0:?} is not connected")]
    NotConnected(SocketId),
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("unknown machine {0}")]
    UnknownMachine(String),
    #[error("ephemeral ports exhausted")]
    PortsExhausted,
}

/// What a hook may see and emit.
pub struct HookContext<'a> {
    pub time: Tick,
    pub machine: &'a str,
    conntrack: ConntrackView<'a>,
    sink: &'a mut Vec<Record>,
}

impl<'a> HookContext<'a> {
    pub(crate) fn new(time: Tick, machine: &'a str, conntrack: ConntrackView<'a>, sink: &'a mut Vec<Record>) -> Self {
        HookContext { time, machine, conntrack, sink }
    }

    /// Conntrack state of NAT nodes on this machine only.
    pub fn conntrack(&self) -> ConntrackView<'a> {
        self.conntrack
    }

    pub fn emit(&mut self, record: impl Into<Record>) {
        self.sink.push(record.into());
    }
}

/// Per-machine observer attached to every socket on that machine. Hooks
/// observe traffic and may replace an outbound packet; they cannot drop it.
pub trait Instrumentation: Any + Send {
    fn on_send(&mut self, _ctx: &mut HookContext<'_>, _process: &ProcessRef, _socket: &SocketRef) {}

    fn on_transmit(&mut self, _ctx: &mut HookContext<'_>, _socket: &SocketRef, packet: Packet) -> Packet {
        packet
    }

    fn on_data_queued(&mut self, _ctx: &mut HookContext<'_>, _socket: &SocketRef, _packet: &Packet) {}

    fn on_recv(&mut self, _ctx: &mut HookContext<'_>, _process: &ProcessRef, _socket: &SocketRef) {}
}

impl dyn Instrumentation {
    pub fn downcast_ref<T: Instrumentation>(&self) -> Option<&T> {
        (self as &dyn Any).downcast_ref()
    }

    pub fn downcast_mut<T: Instrumentation>(&mut self) -> Option<&mut T> {
        (self as &mut dyn Any).downcast_mut()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum AppEventKind {
    Connected { local: SocketAddr, remote: SocketAddr },
    Accepted { local: SocketAddr, remote: SocketAddr },
    Refused { target: SocketAddr },
    Sent { bytes: Vec<u8> },
    Received { bytes: Vec<u8> },
    PeerClosed,
    Reset,
    Closed,
}

/// Application-visible behavior, independent of any instrumentation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppEvent {
    pub time: Tick,
    pub process: ProcessId,
    pub socket: SocketId,
    #[serde(flatten)]
    pub kind: AppEventKind,
}
