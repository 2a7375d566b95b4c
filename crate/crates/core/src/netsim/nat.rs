//! Rule-based NAT with connection tracking.
//!
//! DNAT rules are evaluated at pre-routing and SNAT rules at post-routing,
//! first match wins, and only for packets that do not belong to a tracked
//! connection. Tracked packets are translated from their conntrack entry in
//! either direction, so replies are reversed without consulting the rules.

use std::collections::HashMap;
use std::fmt;
use std::net::{IpAddr, SocketAddr};

use ipnet::IpNet;
use serde::{Deserialize, Serialize};

use crate::packet::{FiveTuple, Packet};

/// First port handed out by source NAT.
pub const SNAT_PORT_BASE: u16 = 32768;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Chain {
    Dnat,
    Snat,
}

/// Packet predicate. Interface patterns follow iptables: a leading `!`
/// negates the match.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NatMatch {
    #[serde(default, rename = "in", skip_serializing_if = "Option::is_none")]
    pub in_iface: Option<String>,
    #[serde(default, rename = "out", skip_serializing_if = "Option::is_none")]
    pub out_iface: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub protocol: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub src: Option<IpNet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dst: Option<IpNet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dst_port: Option<u16>,
}

fn iface_matches(pattern: &Option<String>, iface: Option<&str>) -> bool {
    match pattern {
        None => true,
        Some(p) => match p.strip_prefix('!') {
            Some(neg) => iface != Some(neg),
            None => iface == Some(p.as_str()),
        },
    }
}

impl NatMatch {
    fn matches(&self, t: &FiveTuple, in_iface: Option<&str>, out_iface: Option<&str>) -> bool {
        iface_matches(&self.in_iface, in_iface)
            && iface_matches(&self.out_iface, out_iface)
            && self.protocol.is_none_or(|p| p == t.protocol)
            && self.src.is_none_or(|n| n.contains(&t.src.ip()))
            && self.dst.is_none_or(|n| n.contains(&t.dst.ip()))
            && self.dst_port.is_none_or(|p| p == t.dst.port())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NatTarget {
    pub addr: IpAddr,
    /// DNAT: replacement destination port (kept when absent).
    /// SNAT: requested source port; allocated sequentially when absent or taken.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub port: Option<u16>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NatRule {
    pub chain: Chain,
    #[serde(default, rename = "match")]
    pub matcher: NatMatch,
    pub to: NatTarget,
}

impl NatRule {
    pub fn dnat(matcher: NatMatch, to: SocketAddr) -> Self {
        NatRule { chain: Chain::Dnat, matcher, to: NatTarget { addr: to.ip(), port: Some(to.port()) } }
    }

    pub fn snat(matcher: NatMatch, addr: IpAddr) -> Self {
        NatRule { chain: Chain::Snat, matcher, to: NatTarget { addr, port: None } }
    }
}

impl fmt::Display for NatRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let chain = match self.chain {
            Chain::Dnat => "DNAT",
            Chain::Snat => "SNAT",
        };
        write!(f, "{chain}")?;
        let m = &self.matcher;
        if let Some(i) = &m.in_iface {
            write!(f, " in {i}")?;
        }
        if let Some(o) = &m.out_iface {
            write!(f, " out {o}")?;
        }
        if let Some(s) = &m.src {
            write!(f, " src {s}")?;
        }
        if let Some(d) = &m.dst {
            write!(f, " dst {d}")?;
        }
        if let Some(p) = m.dst_port {
            write!(f, " dpt:{p}")?;
        }
        match self.to.port {
            Some(p) => write!(f, " to:{}", SocketAddr::new(self.to.addr, p)),
            None => write!(f, " to:{}", self.to.addr),
        }
    }
}

/// Per-connection translation state. `reply` is the tuple a reply packet
/// carries when it reaches this node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConntrackEntry {
    pub orig: FiveTuple,
    pub reply: FiveTuple,
    /// Name of the node holding the entry.
    pub owner: String,
}

impl ConntrackEntry {
    /// The orig-direction tuple after full translation.
    pub fn translated(&self) -> FiveTuple {
        self.reply.reversed()
    }

    pub fn is_translated(&self) -> bool {
        self.orig != self.translated()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CtDir {
    Orig,
    Reply,
}

/// Conntrack association carried by a packet while a node processes it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CtMark {
    entry: usize,
    dir: CtDir,
    /// Source NAT still has to be decided at post-routing.
    fresh: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NatStage<'a> {
    Prerouting { in_iface: Option<&'a str> },
    Postrouting { out_iface: Option<&'a str> },
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum NatError {
    #[error("source NAT ports exhausted on {0}")]
    PortsExhausted(String),
}

#[derive(Debug, Clone)]
pub struct NatTable {
    owner: String,
    rules: Vec<NatRule>,
    entries: Vec<ConntrackEntry>,
    by_orig: HashMap<FiveTuple, usize>,
    by_reply: HashMap<FiveTuple, usize>,
    // tuples as they look between pre- and post-routing
    mid_orig: HashMap<FiveTuple, usize>,
    mid_reply: HashMap<FiveTuple, usize>,
    next_port: u16,
}

impl NatTable {
    pub fn new(owner: impl Into<String>, rules: Vec<NatRule>) -> Self {
        NatTable {
            owner: owner.into(),
            rules,
            entries: Vec::new(),
            by_orig: HashMap::new(),
            by_reply: HashMap::new(),
            mid_orig: HashMap::new(),
            mid_reply: HashMap::new(),
            next_port: SNAT_PORT_BASE,
        }
    }

    pub fn rules(&self) -> &[NatRule] {
        &self.rules
    }

    pub fn entries(&self) -> &[ConntrackEntry] {
        &self.entries
    }

    /// Looks up a tuple as seen on arrival at this node.
    pub fn lookup(&self, t: &FiveTuple) -> Option<(&ConntrackEntry, CtDir)> {
        if let Some(&i) = self.by_orig.get(t) {
            return Some((&self.entries[i], CtDir::Orig));
        }
        self.by_reply.get(t).map(|&i| (&self.entries[i], CtDir::Reply))
    }

    /// Maps a client-to-server tuple seen on either side of this node to the
    /// other side.
    pub fn boundary(&self, t: &FiveTuple) -> Option<FiveTuple> {
        if let Some(&i) = self.by_orig.get(t) {
            return Some(self.entries[i].translated());
        }
        self.by_reply.get(&t.reversed()).map(|&i| self.entries[i].orig)
    }

    fn mid_tuples(e: &ConntrackEntry) -> (FiveTuple, FiveTuple) {
        // orig after DNAT: (orig.src -> reply.src); reply after reverse DNAT: (reply.src -> orig.src)
        let fwd = FiveTuple { protocol: e.orig.protocol, src: e.orig.src, dst: e.reply.src };
        let rev = FiveTuple { protocol: e.orig.protocol, src: e.reply.src, dst: e.orig.src };
        (fwd, rev)
    }

    fn insert(&mut self, entry: ConntrackEntry) -> usize {
        let i = self.entries.len();
        let (mid_fwd, mid_rev) = Self::mid_tuples(&entry);
        self.by_orig.insert(entry.orig, i);
        self.by_reply.insert(entry.reply, i);
        self.mid_orig.insert(mid_fwd, i);
        self.mid_reply.insert(mid_rev, i);
        self.entries.push(entry);
        i
    }

    fn set_reply_dst(&mut self, i: usize, dst: SocketAddr) {
        let old = self.entries[i].reply;
        self.by_reply.remove(&old);
        self.entries[i].reply.dst = dst;
        self.by_reply.insert(self.entries[i].reply, i);
    }

    fn port_in_use(&self, reply: &FiveTuple) -> bool {
        self.by_reply.contains_key(reply) || self.by_orig.contains_key(&reply.reversed())
    }

    fn allocate(
        &mut self,
        reply_src: SocketAddr,
        addr: IpAddr,
        requested: Option<u16>,
        protocol: u8,
    ) -> Result<u16, NatError> {
        let candidate = |port| FiveTuple { protocol, src: reply_src, dst: SocketAddr::new(addr, port) };
        if let Some(p) = requested {
            if !self.port_in_use(&candidate(p)) {
                return Ok(p);
            }
        }
        let span = u32::from(u16::MAX - SNAT_PORT_BASE) + 1;
        for _ in 0..span {
            let port = self.next_port;
            self.next_port = if port == u16::MAX { SNAT_PORT_BASE } else { port + 1 };
            if !self.port_in_use(&candidate(port)) {
                return Ok(port);
            }
        }
        Err(NatError::PortsExhausted(self.owner.clone()))
    }

    /// Pre-routing: translates tracked packets' destinations, or evaluates
    /// DNAT rules and opens an entry for a new connection.
    pub fn prerouting(&mut self, p: &mut Packet, in_iface: Option<&str>) -> CtMark {
        let t = p.five_tuple();
        if let Some(&i) = self.by_orig.get(&t) {
            let to = self.entries[i].reply.src;
            if to != t.dst {
                rewrite_dst(p, to);
            }
            return CtMark { entry: i, dir: CtDir::Orig, fresh: false };
        }
        if let Some(&i) = self.by_reply.get(&t) {
            let to = self.entries[i].orig.src;
            if to != t.dst {
                rewrite_dst(p, to);
            }
            return CtMark { entry: i, dir: CtDir::Reply, fresh: false };
        }
        let dnat = self
            .rules
            .iter()
            .filter(|r| r.chain == Chain::Dnat)
            .find(|r| r.matcher.matches(&t, in_iface, None))
            .map(|r| SocketAddr::new(r.to.addr, r.to.port.unwrap_or(t.dst.port())))
            .filter(|to| to.is_ipv4() == t.dst.is_ipv4());
        let new_dst = dnat.unwrap_or(t.dst);
        let entry = ConntrackEntry {
            orig: t,
            reply: FiveTuple { protocol: t.protocol, src: new_dst, dst: t.src },
            owner: self.owner.clone(),
        };
        let i = self.insert(entry);
        if new_dst != t.dst {
            rewrite_dst(p, new_dst);
        }
        CtMark { entry: i, dir: CtDir::Orig, fresh: true }
    }

    /// Post-routing: translates tracked packets' sources, or evaluates SNAT
    /// rules for a new connection. `mark` is the association returned by
    /// [`prerouting`](Self::prerouting) for forwarded packets and `None` for
    /// locally generated ones.
    pub fn postrouting(
        &mut self,
        p: &mut Packet,
        out_iface: Option<&str>,
        mark: Option<CtMark>,
    ) -> Result<(), NatError> {
        let t = p.five_tuple();
        let mark = match mark {
            Some(m) => m,
            None => {
                if let Some(&i) = self.mid_orig.get(&t) {
                    CtMark { entry: i, dir: CtDir::Orig, fresh: false }
                } else if let Some(&i) = self.mid_reply.get(&t) {
                    CtMark { entry: i, dir: CtDir::Reply, fresh: false }
                } else {
                    let entry = ConntrackEntry { orig: t, reply: t.reversed(), owner: self.owner.clone() };
                    CtMark { entry: self.insert(entry), dir: CtDir::Orig, fresh: true }
                }
            }
        };
        if mark.fresh {
            let rule = self
                .rules
                .iter()
                .filter(|r| r.chain == Chain::Snat)
                .find(|r| r.matcher.matches(&t, None, out_iface))
                .map(|r| r.to)
                .filter(|to| to.addr.is_ipv4() == t.src.is_ipv4());
            if let Some(to) = rule {
                let reply_src = self.entries[mark.entry].reply.src;
                let port = self.allocate(reply_src, to.addr, to.port, t.protocol)?;
                self.set_reply_dst(mark.entry, SocketAddr::new(to.addr, port));
            }
        }
        let e = &self.entries[mark.entry];
        let to = match mark.dir {
            CtDir::Orig => e.reply.dst,
            CtDir::Reply => e.orig.dst,
        };
        if to != t.src {
            rewrite_src(p, to);
        }
        Ok(())
    }

    /// Single-stage translation, for callers that do not route between the
    /// two hooks. Tracked packets are recognised by their tuple.
    pub fn apply(&mut self, mut p: Packet, stage: NatStage<'_>) -> Result<Packet, NatError> {
        match stage {
            NatStage::Prerouting { in_iface } => {
                self.prerouting(&mut p, in_iface);
            }
            NatStage::Postrouting { out_iface } => self.postrouting(&mut p, out_iface, None)?,
        }
        Ok(p)
    }
}

fn rewrite_dst(p: &mut Packet, to: SocketAddr) {
    // family checked when the rule was selected
    p.set_destination(to).expect("NAT target family matches packet");
}

fn rewrite_src(p: &mut Packet, to: SocketAddr) {
    p.set_source(to).expect("NAT source family matches packet");
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::packet::{DiscoveryIdentifier, TcpFlags};

    fn sa(s: &str) -> SocketAddr {
        s.parse().unwrap()
    }

    fn pkt(src: &str, dst: &str) -> Packet {
        Packet::tcp(sa(src), sa(dst), TcpFlags::ACK | TcpFlags::PSH, 1, 1, b"data".to_vec()).unwrap()
    }

    fn host_masquerade() -> NatTable {
        NatTable::new(
            "vm1",
            vec![NatRule::snat(
                NatMatch {
                    out_iface: Some("!docker0".into()),
                    src: Some("172.17.0.0/16".parse().unwrap()),
                    ..Default::default()
                },
                "192.168.2.1".parse().unwrap(),
            )],
        )
    }

    fn host_publish() -> NatTable {
        NatTable::new(
            "vm2",
            vec![NatRule::dnat(
                NatMatch {
                    in_iface: Some("!docker0".into()),
                    protocol: Some(6),
                    dst: Some("192.168.2.2/32".parse().unwrap()),
                    dst_port: Some(80),
                    ..Default::default()
                },
                sa("172.17.0.2:80"),
            )],
        )
    }

    #[test]
    fn egress_snat() {
        let mut nat = host_masquerade();
        let mut p = pkt("172.17.0.2:49152", "192.168.2.2:80");
        let mark = nat.prerouting(&mut p, Some("docker0"));
        nat.postrouting(&mut p, Some("eth0"), Some(mark)).unwrap();
        assert_eq!(p.src(), sa("192.168.2.1:32768"));
        assert_eq!(p.dst(), sa("192.168.2.2:80"));
        assert!(p.checksums_valid());
    }

    #[test]
    fn ingress_dnat() {
        let mut nat = host_publish();
        let mut p = pkt("192.168.2.1:32768", "192.168.2.2:80");
        nat.prerouting(&mut p, Some("eth0"));
        assert_eq!(p.dst(), sa("172.17.0.2:80"));
        assert_eq!(p.src(), sa("192.168.2.1:32768"));
    }

    #[test]
    fn negated_interface_skips_bridge_traffic() {
        let mut nat = host_publish();
        let mut p = pkt("172.17.0.3:40000", "192.168.2.2:80");
        nat.prerouting(&mut p, Some("docker0"));
        assert_eq!(p.dst(), sa("192.168.2.2:80"));
    }

    #[test]
    fn reply_restores_original_tuple() {
        let mut nat = host_masquerade();
        let mut p = pkt("172.17.0.2:49152", "192.168.2.2:80");
        let orig = p.five_tuple();
        let mark = nat.prerouting(&mut p, Some("docker0"));
        nat.postrouting(&mut p, Some("eth0"), Some(mark)).unwrap();
        let mut reply = pkt(&p.dst().to_string(), &p.src().to_string());
        let mark = nat.prerouting(&mut reply, Some("eth0"));
        nat.postrouting(&mut reply, Some("docker0"), Some(mark)).unwrap();
        assert_eq!(reply.five_tuple(), orig.reversed());
    }

    #[test]
    fn first_match_wins() {
        let rules = vec![
            NatRule::dnat(NatMatch { dst_port: Some(5000), ..Default::default() }, sa("172.21.0.6:8080")),
            NatRule::dnat(NatMatch::default(), sa("10.0.0.1:1")),
        ];
        let mut nat = NatTable::new("n", rules);
        let mut p = pkt("1.2.3.4:1000", "192.168.2.2:5000");
        nat.prerouting(&mut p, Some("eth0"));
        assert_eq!(p.dst(), sa("172.21.0.6:8080"));
    }

    #[test]
    fn sequential_ports_from_base() {
        let mut nat = host_masquerade();
        for (i, sport) in [40000u16, 40001, 40002].iter().enumerate() {
            let mut p = pkt(&format!("172.17.0.2:{sport}"), "192.168.2.2:80");
            let m = nat.prerouting(&mut p, Some("docker0"));
            nat.postrouting(&mut p, Some("eth0"), Some(m)).unwrap();
            assert_eq!(p.src().port(), SNAT_PORT_BASE + i as u16);
        }
        assert_eq!(nat.entries().len(), 3);
    }

    #[test]
    fn options_survive_translation() {
        let mut nat = host_masquerade();
        let mut p = pkt("172.17.0.2:49152", "192.168.2.2:80")
            .inject_identifier(&DiscoveryIdentifier::from_parts(5, 6))
            .unwrap();
        let before = p.tcp.options.clone();
        let m = nat.prerouting(&mut p, Some("docker0"));
        nat.postrouting(&mut p, Some("eth0"), Some(m)).unwrap();
        assert_eq!(p.tcp.options, before);
        assert!(p.checksums_valid());
    }

    #[test]
    fn no_match_leaves_packet_alone() {
        let mut nat = host_publish();
        let p = pkt("10.0.0.1:1", "10.0.0.2:2");
        let q = nat.apply(p.clone(), NatStage::Prerouting { in_iface: Some("eth0") }).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn single_stage_apply_tracks_replies() {
        let mut snat = host_masquerade();
        let p = pkt("172.17.0.2:49152", "192.168.2.2:80");
        let out = snat.apply(p.clone(), NatStage::Postrouting { out_iface: Some("eth0") }).unwrap();
        let reply = pkt(&out.dst().to_string(), &out.src().to_string());
        let back = snat.apply(reply, NatStage::Prerouting { in_iface: Some("eth0") }).unwrap();
        assert_eq!(back.dst(), p.src());
    }

    #[test]
    fn rule_serde_uses_iptables_style_interfaces() {
        let json = r#"{"chain":"dnat","match":{"in":"!br-0cf265a146ac","protocol":6,"dst_port":5000},"to":{"addr":"172.21.0.6","port":8080}}"#;
        let rule: NatRule = serde_json::from_str(json).unwrap();
        assert_eq!(rule.to_string(), "DNAT in !br-0cf265a146ac dpt:5000 to:172.21.0.6:8080");
        assert_eq!(serde_json::to_string(&rule).unwrap(), json);
    }
}
