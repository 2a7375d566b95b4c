//! Built-in network configurations: a flat LAN, per-host container bridges
//! with host NAT, and per-host LANs behind NAT gateways.

use std::fmt;
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::str::FromStr;

use ipnet::IpNet;
use serde::{Deserialize, Serialize};

use super::event::Tick;
use super::nat::{NatMatch, NatRule};
use super::topology::{InterfaceSpec, NodeSpec, RouteSpec, SegmentSpec, TopologySpec};
use crate::packet::PROTO_TCP;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NetworkTemplate {
    NatFree,
    InternalNat,
    ExternalNat,
}

impl NetworkTemplate {
    pub const ALL: [NetworkTemplate; 3] = [Self::NatFree, Self::InternalNat, Self::ExternalNat];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::NatFree => "nat-free",
            Self::InternalNat => "internal-nat",
            Self::ExternalNat => "external-nat",
        }
    }
}

impl fmt::Display for NetworkTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NetworkTemplate {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL.into_iter().find(|t| t.as_str() == s).ok_or_else(|| format!("unknown network template {s}"))
    }
}

/// Where one service runs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Placement {
    pub name: String,
    pub host: usize,
    /// Port the service process listens on.
    pub port: Option<u16>,
    /// Host port published through NAT, for container templates.
    pub published: Option<u16>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceEndpoint {
    pub name: String,
    pub node: String,
    pub listen: SocketAddr,
    /// Address callers dial.
    pub reach: SocketAddr,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForwarderSpec {
    pub node: String,
    pub listen_port: u16,
    pub target: SocketAddr,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Deployment {
    pub topology: TopologySpec,
    pub services: Vec<ServiceEndpoint>,
    pub forwarders: Vec<ForwarderSpec>,
}

pub const BRIDGE: &str = "docker0";

fn net(s: &str) -> IpNet {
    s.parse().expect("static prefix")
}

fn v4(a: u8, b: u8, c: u8, d: u8) -> IpAddr {
    IpAddr::V4(Ipv4Addr::new(a, b, c, d))
}

/// Public addresses for the gateways of the external-NAT template.
pub fn gateway_address(i: usize) -> IpAddr {
    const FIRST: [u8; 4] = [1, 8, 9, 4];
    match FIRST.get(i) {
        Some(&o) => v4(o, o, o, o),
        None => {
            let o = 10 + (i - FIRST.len()) as u8;
            v4(o, o, o, o)
        }
    }
}

fn host_name(i: usize) -> String {
    format!("vm{}", i + 1)
}

fn iface(name: &str, segment: &str, addr: IpAddr, prefix: u8) -> InterfaceSpec {
    InterfaceSpec { name: name.into(), segment: segment.into(), addr: IpNet::new(addr, prefix).expect("valid prefix") }
}

fn plain_node(name: String, machine: Option<String>, interfaces: Vec<InterfaceSpec>) -> NodeSpec {
    NodeSpec { name, machine, forwarding: false, interfaces, routes: vec![], nat: vec![], strip_options: false }
}

fn default_route(via: IpAddr) -> RouteSpec {
    RouteSpec { dest: net("0.0.0.0/0"), via: Some(via), iface: None }
}

/// Adds a container bridge to `host` and one container per service placed
/// there, recording each service endpoint and its host-port forwarder.
#[allow(clippy::too_many_arguments)]
fn containerize(
    host: &mut NodeSpec,
    host_ip: IpAddr,
    placements: &[Placement],
    host_idx: usize,
    latency: Tick,
    topo: &mut TopologySpec,
    deployment_services: &mut Vec<(usize, ServiceEndpoint)>,
    forwarders: &mut Vec<ForwarderSpec>,
) {
    let bridge_seg = format!("{}-{BRIDGE}", host.name);
    topo.segments.push(SegmentSpec { name: bridge_seg.clone(), latency });
    host.interfaces.push(iface(BRIDGE, &bridge_seg, v4(172, 17, 0, 1), 16));
    host.forwarding = true;

    let mut dnat = Vec::new();
    for (next, (idx, p)) in (2u8..).zip(placements.iter().enumerate().filter(|(_, p)| p.host == host_idx)) {
        let addr = v4(172, 17, 0, next);
        let port = p.port.unwrap_or(8080);
        let published = p.published.unwrap_or(5000 + idx as u16);
        let container = format!("{}/{}", host.name, p.name);
        let mut c = plain_node(container.clone(), Some(host.name.clone()), vec![iface("eth0", &bridge_seg, addr, 16)]);
        c.routes.push(default_route(v4(172, 17, 0, 1)));
        topo.nodes.push(c);

        let target = SocketAddr::new(addr, port);
        dnat.push(NatRule::dnat(
            NatMatch {
                in_iface: Some(format!("!{BRIDGE}")),
                protocol: Some(PROTO_TCP),
                dst: Some(IpNet::new(host_ip, 32).expect("host prefix")),
                dst_port: Some(published),
                ..Default::default()
            },
            target,
        ));
        forwarders.push(ForwarderSpec { node: host.name.clone(), listen_port: published, target });
        deployment_services.push((
            idx,
            ServiceEndpoint {
                name: p.name.clone(),
                node: container,
                listen: SocketAddr::new(v4(0, 0, 0, 0), port),
                reach: SocketAddr::new(host_ip, published),
            },
        ));
    }
    host.nat.extend(dnat);
    host.nat.push(NatRule::snat(
        NatMatch { out_iface: Some(format!("!{BRIDGE}")), src: Some(net("172.17.0.0/16")), ..Default::default() },
        host_ip,
    ));
}

/// Builds the deployment for `template` with `hosts` machines.
pub fn materialize(
    template: NetworkTemplate,
    hosts: usize,
    latency: Tick,
    strip_options: bool,
    placements: &[Placement],
) -> Deployment {
    let mut topo = TopologySpec::default();
    let mut services = Vec::new();
    let mut forwarders = Vec::new();
    match template {
        NetworkTemplate::NatFree => {
            topo.segments.push(SegmentSpec { name: "lan".into(), latency });
            for h in 0..hosts {
                let ip = v4(192, 168, 2, h as u8 + 1);
                topo.nodes.push(plain_node(host_name(h), None, vec![iface("eth0", "lan", ip, 24)]));
            }
            for (idx, p) in placements.iter().enumerate() {
                let port = p.port.unwrap_or(8000 + idx as u16);
                let ip = v4(192, 168, 2, p.host as u8 + 1);
                services.push((
                    idx,
                    ServiceEndpoint {
                        name: p.name.clone(),
                        node: host_name(p.host),
                        listen: SocketAddr::new(v4(0, 0, 0, 0), port),
                        reach: SocketAddr::new(ip, port),
                    },
                ));
            }
        }
        NetworkTemplate::InternalNat => {
            topo.segments.push(SegmentSpec { name: "lan".into(), latency });
            for h in 0..hosts {
                let ip = v4(192, 168, 2, h as u8 + 1);
                let mut host = plain_node(host_name(h), None, vec![iface("eth0", "lan", ip, 24)]);
                containerize(&mut host, ip, placements, h, latency, &mut topo, &mut services, &mut forwarders);
                host.strip_options = strip_options;
                topo.nodes.push(host);
            }
        }
        NetworkTemplate::ExternalNat => {
            topo.segments.push(SegmentSpec { name: "internet".into(), latency });
            for h in 0..hosts {
                let lan = format!("lan{}", h + 1);
                topo.segments.push(SegmentSpec { name: lan.clone(), latency });
                let public = gateway_address(h);
                let inner = v4(192, 168, 2, 2);
                let mut gw = plain_node(
                    format!("gw{}", h + 1),
                    None,
                    vec![iface("lan0", &lan, v4(192, 168, 2, 1), 24), iface("wan0", "internet", public, 0)],
                );
                gw.forwarding = true;
                gw.strip_options = strip_options;

                let mut host = plain_node(host_name(h), None, vec![iface("eth0", &lan, inner, 24)]);
                host.routes.push(default_route(v4(192, 168, 2, 1)));
                let first = services.len();
                containerize(&mut host, inner, placements, h, latency, &mut topo, &mut services, &mut forwarders);
                for (_, s) in &mut services[first..] {
                    let port = s.reach.port();
                    gw.nat.push(NatRule::dnat(
                        NatMatch {
                            protocol: Some(PROTO_TCP),
                            dst: Some(IpNet::new(public, 32).expect("host prefix")),
                            dst_port: Some(port),
                            ..Default::default()
                        },
                        SocketAddr::new(inner, port),
                    ));
                    s.reach = SocketAddr::new(public, port);
                }
                // no interface restriction, so LAN-internal traffic to the
                // public address hairpins through the gateway
                gw.nat.push(NatRule::snat(NatMatch { src: Some(net("192.168.2.0/24")), ..Default::default() }, public));
                topo.nodes.push(gw);
                topo.nodes.push(host);
            }
        }
    }
    services.sort_by_key(|(idx, _)| *idx);
    Deployment { topology: topo, services: services.into_iter().map(|(_, s)| s).collect(), forwarders }
}
