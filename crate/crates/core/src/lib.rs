//! Simulation toolkit for in-band service dependency discovery.
//!
//! A deterministic packet-level network simulator (hosts, container
//! bridges, NAT with connection tracking) hosts simplified TCP endpoints.
//! Agents attach to socket hooks: the in-band discovery agent tags the
//! first data packet of each connection with an identifier carried in a TCP
//! option, while two passive observers infer dependencies from five-tuples,
//! one of them with access to local conntrack state. The harness runs
//! benchmark-shaped scenarios and scores the resulting graphs.

pub mod agent;
pub mod baselines;
pub mod endpoint;
pub mod graph;
pub mod harness;
pub mod netsim;
pub mod packet;
pub mod par;

pub use graph::Record;
pub use par::Execution;
