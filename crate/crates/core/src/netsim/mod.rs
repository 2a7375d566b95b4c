//! Deterministic discrete-event network simulation.

pub mod event;
pub mod nat;
pub mod templates;
pub mod topology;
mod world;

pub use event::{Envelope, EventKind, EventQueue, ProcessAction, SimEvent, Tick};
pub use nat::{Chain, ConntrackEntry, NatError, NatMatch, NatRule, NatStage, NatTable, NatTarget, SNAT_PORT_BASE};
pub use templates::{materialize, Deployment, ForwarderSpec, NetworkTemplate, Placement, ServiceEndpoint};
pub use topology::{InterfaceSpec, Network, NodeId, NodeSpec, RouteSpec, SegmentSpec, TopologyError, TopologySpec};
pub use world::{AccessDenied, ConntrackView, DeliveryTarget, DropEvent, DropReason, WireCapture, World};
