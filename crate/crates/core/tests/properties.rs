mod common;

use std::collections::BTreeSet;
use std::net::SocketAddr;

use depsim::endpoint::ProcessRef;
use depsim::graph::{abstract_forwarders, DependencyGraph, EdgeSource, GraphNode, NodeKey};
use depsim::harness::{
    compute_metrics, run_scenario, AgentKind, DependencyEdge, EdgeSchedule, NetworkSpec, Scenario, ServiceSpec,
    TemplateNetwork, WorkloadSpec,
};
use depsim::netsim::{NatMatch, NatRule, NatTable, NetworkTemplate};
use depsim::packet::{DiscoveryIdentifier, Packet, PacketError};
use ipnet::IpNet;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{packet_checksums_ok, random_addr, random_packet};

fn packet_from(seed: u64, budget: usize) -> Packet {
    random_packet(&mut ChaCha8Rng::seed_from_u64(seed), budget)
}

fn host_net(a: SocketAddr) -> IpNet {
    IpNet::new(a.ip(), if a.is_ipv4() { 32 } else { 128 }).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn serialize_parse_roundtrip(seed: u64) {
        let p = packet_from(seed, 40);
        let bytes = p.serialize().unwrap();
        let back = Packet::parse(&bytes).unwrap();
        prop_assert_eq!(&back, &p);
        prop_assert_eq!(back.serialize().unwrap(), bytes);
        prop_assert!(packet_checksums_ok(&p));
    }

    #[test]
    fn tagging_is_one_shot(seed: u64, nonce: u64, counter: u64) {
        let p = packet_from(seed, 40);
        let id = DiscoveryIdentifier::from_parts(nonce, counter);
        match p.inject_identifier(&id) {
            Ok(tagged) => {
                prop_assert!(p.tcp.header_len() + 20 <= 60);
                prop_assert_eq!(tagged.extract_identifier(), Some(id));
                prop_assert_eq!(&tagged.payload, &p.payload);
                prop_assert_eq!(tagged.tcp.header_len(), p.tcp.header_len() + 20);
                prop_assert!(packet_checksums_ok(&tagged));
                prop_assert_eq!(tagged.inject_identifier(&id), Err(PacketError::AlreadyTagged));
                let reparsed = Packet::parse(&tagged.serialize().unwrap()).unwrap();
                prop_assert_eq!(reparsed.extract_identifier(), Some(id));
            }
            Err(PacketError::NoRoom { header_len }) => prop_assert!(header_len + 20 > 60),
            Err(e) => prop_assert!(false, "unexpected {e}"),
        }
    }

    /// A forward packet and its reply through the same table: the reply comes
    /// back addressed as the reverse of the original, options untouched.
    #[test]
    fn conntrack_translation_inverts(seed: u64, dnat: bool, snat: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_packet(&mut rng, 40);
        let v6 = p.src().is_ipv6();
        let mut rules = Vec::new();
        if dnat {
            rules.push(NatRule::dnat(NatMatch { dst: Some(host_net(p.dst())), ..Default::default() }, random_addr(&mut rng, v6)));
        }
        if snat {
            rules.push(NatRule::snat(NatMatch { src: Some(host_net(p.src())), ..Default::default() }, random_addr(&mut rng, v6).ip()));
        }
        let mut table = NatTable::new("box", rules);
        let mut q = p.clone();
        let mark = table.prerouting(&mut q, Some("eth0"));
        table.postrouting(&mut q, Some("eth1"), Some(mark)).unwrap();
        prop_assert_eq!(&q.tcp.options, &p.tcp.options);
        prop_assert_eq!(&q.payload, &p.payload);
        prop_assert!(packet_checksums_ok(&q));
        prop_assert_eq!(table.boundary(&p.five_tuple()), Some(q.five_tuple()));

        let mut r = Packet::tcp(q.dst(), q.src(), q.tcp.flags, 1, 2, b"reply".to_vec()).unwrap();
        let mark = table.prerouting(&mut r, Some("eth1"));
        table.postrouting(&mut r, Some("eth0"), Some(mark)).unwrap();
        prop_assert_eq!(r.five_tuple(), p.five_tuple().reversed());
        prop_assert!(packet_checksums_ok(&r));
    }

    #[test]
    fn scoring_is_order_independent(
        found in proptest::collection::vec((0u8..6, 0u8..6), 0..20),
        truth in proptest::collection::vec((0u8..6, 0u8..6), 0..20),
    ) {
        let f: BTreeSet<_> = found.iter().copied().collect();
        let t: BTreeSet<_> = truth.iter().copied().collect();
        let f_rev: BTreeSet<_> = found.iter().rev().copied().collect();
        let a = compute_metrics(&f, &t);
        let b = compute_metrics(&f_rev, &t);
        prop_assert_eq!(a.to_json(), b.to_json());
        // swapping the roles swaps precision and recall
        let c = compute_metrics(&t, &f);
        prop_assert_eq!(a.precision.to_bits(), c.recall.to_bits());
        for x in [a.precision, a.recall, a.f1] {
            prop_assert!(x.is_nan() || (0.0..=1.0).contains(&x));
        }
    }

    /// Contracting forwarders preserves reachability among the remaining
    /// processes.
    #[test]
    fn abstraction_preserves_reachability(
        n in 2usize..10,
        edges in proptest::collection::vec((0usize..10, 0usize..10), 0..30),
        fwd_mask: u16,
    ) {
        let mut g = DependencyGraph::new();
        let keys: Vec<NodeKey> = (0..n)
            .map(|i| g.add_node(GraphNode::process(&ProcessRef {
                host: "vm1".into(),
                pid: 1000 + i as u32,
                cgroup: String::new(),
                name: format!("s{i}"),
            })))
            .collect();
        for (t, &(a, b)) in edges.iter().enumerate() {
            let (a, b) = (a % n, b % n);
            if a != b {
                g.observe(keys[a].clone(), keys[b].clone(), EdgeSource::Ripple, t as u64, true);
            }
        }
        let forwarders: BTreeSet<NodeKey> =
            keys.iter().enumerate().filter(|(i, _)| fwd_mask & (1 << i) != 0).map(|(_, k)| k.clone()).collect();
        let h = abstract_forwarders(&g, &forwarders);
        for k in keys.iter().filter(|k| !forwarders.contains(*k)) {
            let mut want = g.reachable(k);
            want.retain(|x| !forwarders.contains(x) && x != k);
            let mut got = h.reachable(k);
            got.remove(k);
            prop_assert_eq!(got, want);
        }
        prop_assert!(h.edges.values().all(|e| !forwarders.contains(&e.from) && !forwarders.contains(&e.to)));
    }
}

fn chain_scenario(n: usize, hosts: usize, template: NetworkTemplate, seed: u64) -> Scenario {
    let names: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
    let edges: Vec<DependencyEdge> = names.windows(2).map(|w| DependencyEdge::new(&w[0], &w[1])).collect();
    Scenario {
        id: "chain".into(),
        benchmark: None,
        network: NetworkSpec::Template(TemplateNetwork { template, hosts, link_latency: 1, strip_options: false }),
        services: names
            .iter()
            .enumerate()
            .map(|(i, s)| ServiceSpec { name: s.clone(), host: Some(i % hosts), ..Default::default() })
            .collect(),
        workload: WorkloadSpec {
            edges: edges
                .iter()
                .enumerate()
                .map(|(i, e)| EdgeSchedule {
                    from: e.from.clone(),
                    to: e.to.clone(),
                    start: 5 * i as u64,
                    period: 40,
                    count: 4,
                })
                .collect(),
            ..Default::default()
        },
        ground_truth: edges,
        bootstrap: vec!["s0".into()],
        agent: AgentKind::Ripple,
        agent_hosts: None,
        seed,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Instrumenting a superset of machines never lowers recall.
    #[test]
    fn more_agents_never_lower_recall(n in 3usize..8, hosts in 1usize..4, small: u8, extra: u8, t in 0usize..3, seed: u64) {
        let template = NetworkTemplate::ALL[t];
        let base = chain_scenario(n, hosts, template, seed);
        let machines: Vec<String> = (0..hosts).map(|h| format!("vm{}", h + 1)).collect();
        let pick = |mask: u8| -> Vec<String> {
            machines.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, m)| m.clone()).collect()
        };
        let fewer = Scenario { agent_hosts: Some(pick(small)), ..base.clone() };
        let more = Scenario { agent_hosts: Some(pick(small | extra)), ..base };
        let r1 = run_scenario(&fewer).unwrap().metrics.recall;
        let r2 = run_scenario(&more).unwrap().metrics.recall;
        prop_assert!(r1 <= r2, "{} > {}", r1, r2);
    }

    /// Neither passive observer alters traffic: the executed event stream is
    /// the same as without instrumentation.
    #[test]
    fn observers_are_passive(n in 2usize..6, hosts in 1usize..4, t in 0usize..3, seed: u64) {
        let base = chain_scenario(n, hosts, NetworkTemplate::ALL[t], seed);
        let bare = run_scenario(&Scenario { agent_hosts: Some(Vec::new()), ..base.clone() }).unwrap();
        for agent in [AgentKind::Fivetuple, AgentKind::Conntrack] {
            let watched = run_scenario(&base.with_agent(agent)).unwrap();
            prop_assert_eq!(&watched.trace_digest, &bare.trace_digest);
        }
    }
}
