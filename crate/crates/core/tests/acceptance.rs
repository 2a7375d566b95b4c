//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

mod common;

use std::collections::BTreeSet;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use depsim::endpoint::AppEventKind;
use depsim::graph::{export_dot, export_json};
use depsim::harness::{
    benchmark_scenario, combine, load_suite, run_matrix, run_scenario, AgentKind, BenchmarkKind, DependencyEdge,
    EdgeSchedule, MatrixRow, NetworkSpec, Scenario, ServiceSpec, TemplateNetwork, WorkloadSpec, DEFAULT_HOSTS,
};
use depsim::netsim::{NatMatch, NatRule, NatTable, NetworkTemplate};
use depsim::packet::{DiscoveryIdentifier, Packet};
use depsim::Execution;
use ipnet::IpNet;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{random_addr, random_packet, wire_checksums_ok};

type Outcome = Result<String, String>;
type Criterion = (&'static str, &'static str, fn() -> Outcome);

fn suite() -> Vec<Scenario> {
    load_suite(&PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")).expect("shipped scenarios load")
}

fn cell<'a>(rows: &'a [MatrixRow], kind: BenchmarkKind, network: &str, agent: AgentKind) -> &'a MatrixRow {
    rows.iter()
        .find(|r| r.benchmark == Some(kind) && r.network == network && r.agent == agent)
        .unwrap_or_else(|| panic!("missing row {kind} {network} {agent}"))
}

fn check(failures: &mut Vec<String>, ok: bool, what: impl FnOnce() -> String) {
    if !ok {
        failures.push(what());
    }
}

fn verdict(summary: String, failures: Vec<String>) -> Outcome {
    if failures.is_empty() {
        Ok(summary)
    } else {
        Err(failures.join("; "))
    }
}

fn ripple_matrix() -> Outcome {
    let scenarios = suite();
    let t0 = Instant::now();
    let rows = run_matrix(&scenarios, &[AgentKind::Ripple], Execution::default()).map_err(|e| e.to_string())?;
    let elapsed = t0.elapsed();
    let mut failures = Vec::new();
    for kind in BenchmarkKind::ALL {
        for t in NetworkTemplate::ALL {
            let m = &cell(&rows, kind, t.as_str(), AgentKind::Ripple).metrics;
            let recall_ok = match kind {
                BenchmarkKind::Media => (m.recall - 0.71).abs() <= 0.01,
                _ => m.recall == 1.0,
            };
            check(&mut failures, m.precision == 1.0 && recall_ok, || {
                format!("{kind}/{t}: P={} R={}", m.precision, m.recall)
            });
        }
    }
    check(&mut failures, elapsed.as_secs_f64() < 60.0, || format!("matrix took {elapsed:?}"));
    verdict(format!("3x3 ripple matrix reproduced in {:.2}s", elapsed.as_secs_f64()), failures)
}

fn baseline_failure_modes() -> Outcome {
    let rows = run_matrix(&suite(), &[AgentKind::Fivetuple, AgentKind::Conntrack], Execution::default())
        .map_err(|e| e.to_string())?;
    let mut failures = Vec::new();
    for kind in BenchmarkKind::ALL {
        let five = |t: NetworkTemplate| &cell(&rows, kind, t.as_str(), AgentKind::Fivetuple).metrics;
        let ct = |t: NetworkTemplate| &cell(&rows, kind, t.as_str(), AgentKind::Conntrack).metrics;
        let m = five(NetworkTemplate::NatFree);
        check(&mut failures, m.f1 == 1.0, || format!("fivetuple {kind}/nat-free F1={}", m.f1));
        for t in [NetworkTemplate::InternalNat, NetworkTemplate::ExternalNat] {
            let m = five(t);
            check(&mut failures, m.correct_edges == 0 && m.recall == 0.0, || {
                format!("fivetuple {kind}/{t}: {} correct", m.correct_edges)
            });
        }
        let m = ct(NetworkTemplate::InternalNat);
        check(&mut failures, m.f1 == 1.0, || format!("conntrack {kind}/internal-nat F1={}", m.f1));
        let m = ct(NetworkTemplate::ExternalNat);
        check(&mut failures, m.precision < 0.5 && m.recall < 0.3, || {
            format!("conntrack {kind}/external-nat P={} R={}", m.precision, m.recall)
        });
        // regression fixture from the first verified run: every edge the
        // observer reports is between gateway addresses
        check(&mut failures, m.precision == 0.0 && m.recall == 0.0 && m.discovered_edges > 0, || {
            format!("conntrack {kind}/external-nat drifted from fixture: {}", m.to_json())
        });
    }
    verdict("fivetuple and conntrack degrade as expected under NAT".into(), failures)
}

fn bootstrap_machine(s: &Scenario) -> String {
    let boot = &s.bootstrap[0];
    let svc = s.services.iter().find(|x| &x.name == boot).expect("bootstrap service exists");
    format!("vm{}", svc.host.expect("benchmark placements are explicit") + 1)
}

fn graceful_deployment() -> Outcome {
    let mut failures = Vec::new();
    let mut compared = 0;
    for s in suite() {
        let bare = run_scenario(&Scenario { agent_hosts: Some(Vec::new()), ..s.clone() }).map_err(|e| e.to_string())?;
        check(
            &mut failures,
            !bare.app_trace.iter().any(|e| matches!(e.kind, AppEventKind::Refused { .. } | AppEventKind::Reset)),
            || format!("{}: uninstrumented run has failed connections", s.id),
        );
        for hosts in [Some(vec![bootstrap_machine(&s)]), None] {
            let label = if hosts.is_some() { "sender only" } else { "everywhere" };
            let run = run_scenario(&Scenario { agent_hosts: hosts, ..s.clone() }).map_err(|e| e.to_string())?;
            check(&mut failures, run.agent_stats.injected > 0, || format!("{} {label}: nothing tagged", s.id));
            check(&mut failures, run.app_trace == bare.app_trace, || {
                format!("{} {label}: application trace differs", s.id)
            });
            compared += 1;
        }
    }
    verdict(format!("{compared} instrumented runs match their uninstrumented traces"), failures)
}

fn host_net(a: SocketAddr) -> IpNet {
    IpNet::new(a.ip(), if a.is_ipv4() { 32 } else { 128 }).unwrap()
}

fn packet_mechanics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut failures = Vec::new();
    for i in 0..1000 {
        let original = random_packet(&mut rng, 20);
        let id = DiscoveryIdentifier::from_parts(rng.gen(), i);
        let tagged = match original.inject_identifier(&id) {
            Ok(p) => p,
            Err(e) => {
                failures.push(format!("packet {i}: inject failed: {e}"));
                continue;
            }
        };
        let v6 = original.src().is_ipv6();
        let to = random_addr(&mut rng, v6);
        let mut dnat = NatTable::new(
            "nat1",
            vec![NatRule::dnat(NatMatch { dst: Some(host_net(original.dst())), ..Default::default() }, to)],
        );
        let mut snat = NatTable::new(
            "nat2",
            vec![NatRule::snat(
                NatMatch { src: Some(host_net(original.src())), ..Default::default() },
                random_addr(&mut rng, v6).ip(),
            )],
        );
        let mut hops = vec![tagged.clone()];
        let mut p = tagged.clone();
        for table in [&mut dnat, &mut snat] {
            let mark = table.prerouting(&mut p, Some("eth0"));
            if let Err(e) = table.postrouting(&mut p, Some("eth1"), Some(mark)) {
                failures.push(format!("packet {i}: {e}"));
            }
            hops.push(p.clone());
        }
        check(&mut failures, p.dst() == to && p.src().ip() != original.src().ip(), || {
            format!("packet {i}: not translated")
        });
        for (h, hop) in hops.iter().enumerate() {
            let wire = hop.serialize().map_err(|e| e.to_string())?;
            let back = Packet::parse(&wire).map_err(|e| e.to_string())?;
            check(&mut failures, wire_checksums_ok(&wire), || format!("packet {i} hop {h}: bad checksum"));
            check(&mut failures, back.extract_identifier() == Some(id), || format!("packet {i} hop {h}: id lost"));
            check(&mut failures, back.payload == original.payload, || format!("packet {i} hop {h}: payload changed"));
        }
    }
    verdict("1000 packets survive inject, two NAT hops and extract".into(), failures)
}

const SLOT: u64 = 50;

struct RandomDag {
    scenario: Scenario,
    requests: Vec<(u64, String, String)>,
}

fn random_dag(rng: &mut ChaCha8Rng, case: u64) -> RandomDag {
    let n = rng.gen_range(2..=30);
    let hosts = rng.gen_range(1..=4);
    let template = NetworkTemplate::ALL[rng.gen_range(0..3)];
    let names: Vec<String> = (0..n).map(|i| format!("n{i}")).collect();
    let density = rng.gen_range(0.03..0.25);
    let mut edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if rng.gen_bool(density) {
                // a < b keeps it acyclic; relabeling below hides the order
                edges.push((a, b));
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let edges: Vec<DependencyEdge> =
        edges.iter().map(|&(a, b)| DependencyEdge::new(&names[order[a]], &names[order[b]])).collect();
    let e = edges.len() as u64;
    let mut slots: Vec<u64> = (0..e).collect();
    slots.shuffle(rng);
    let mut schedule = Vec::new();
    let mut requests = Vec::new();
    for (edge, &slot) in edges.iter().zip(&slots) {
        let count: u32 = rng.gen_range(0..=3);
        let (start, period) = (slot * SLOT, e * SLOT);
        for k in 0..count as u64 {
            requests.push((start + k * period, edge.from.clone(), edge.to.clone()));
        }
        schedule.push(EdgeSchedule { from: edge.from.clone(), to: edge.to.clone(), start, period, count });
    }
    requests.sort();
    let picks = rng.gen_range(1..=2);
    let mut boot: Vec<String> = names.choose_multiple(rng, picks).cloned().collect();
    boot.sort();
    let scenario = Scenario {
        id: format!("dag-{case}"),
        benchmark: None,
        network: NetworkSpec::Template(TemplateNetwork { template, hosts, link_latency: 1, strip_options: false }),
        services: names
            .iter()
            .map(|s| ServiceSpec { name: s.clone(), host: Some(rng.gen_range(0..hosts)), ..Default::default() })
            .collect(),
        ground_truth: edges,
        workload: WorkloadSpec { edges: schedule, ..Default::default() },
        bootstrap: boot,
        agent: AgentKind::Ripple,
        agent_hosts: None,
        seed: case,
    };
    RandomDag { scenario, requests }
}

/// Brute force: replay requests in time order; a request whose caller or
/// callee is already reached reaches both (the callee via the request, the
/// caller via the response).
fn time_respecting_reach(dag: &RandomDag) -> BTreeSet<String> {
    let mut reached: BTreeSet<String> = dag.scenario.bootstrap.iter().cloned().collect();
    for (_, from, to) in &dag.requests {
        if reached.contains(from) || reached.contains(to) {
            reached.insert(from.clone());
            reached.insert(to.clone());
        }
    }
    reached
}

fn propagation_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xda6);
    let mut failures = Vec::new();
    let mut requests = 0;
    for case in 0..100 {
        let dag = random_dag(&mut rng, case);
        requests += dag.requests.len();
        let out = run_scenario(&dag.scenario).map_err(|e| format!("case {case}: {e}"))?;
        let got: BTreeSet<String> =
            out.targets.iter().map(|(p, _)| p.name.clone()).filter(|n| n != "docker-proxy").collect();
        let want = time_respecting_reach(&dag);
        check(&mut failures, got == want, || {
            format!(
                "case {case}: extra {:?} missing {:?}",
                got.difference(&want).collect::<Vec<_>>(),
                want.difference(&got).collect::<Vec<_>>()
            )
        });
    }
    verdict(format!("100 random DAGs ({requests} requests) match the reachability oracle"), failures)
}

fn forwarder_visibility() -> Outcome {
    let mut failures = Vec::new();
    let pair = Scenario {
        id: "co-located".into(),
        benchmark: None,
        network: NetworkSpec::Template(TemplateNetwork {
            template: NetworkTemplate::InternalNat,
            hosts: 2,
            link_latency: 1,
            strip_options: false,
        }),
        services: ["a", "b"]
            .iter()
            .map(|s| ServiceSpec { name: (*s).into(), host: Some(1), ..Default::default() })
            .collect(),
        ground_truth: vec![DependencyEdge::new("a", "b")],
        workload: WorkloadSpec::default(),
        bootstrap: vec!["a".into()],
        agent: AgentKind::Ripple,
        agent_hosts: None,
        seed: 3,
    };
    let boutique = benchmark_scenario(BenchmarkKind::Boutique, NetworkTemplate::InternalNat, DEFAULT_HOSTS, 1);
    for (s, from, to) in [(&pair, "a", "b"), (&boutique, "frontend", "shipping")] {
        let out = run_scenario(s).map_err(|e| e.to_string())?;
        let raw = out.raw.named_pairs(false);
        let via =
            raw.contains(&(from.into(), "docker-proxy".into())) && raw.contains(&("docker-proxy".into(), to.into()));
        check(&mut failures, via, || format!("{}: no {from} -> docker-proxy -> {to} path", s.id));
        check(&mut failures, !raw.contains(&(from.into(), to.into())), || {
            format!("{}: raw graph has direct edge", s.id)
        });
        check(&mut failures, out.graph.named_pairs(false).contains(&(from.into(), to.into())), || {
            format!("{}: abstraction lost {from} -> {to}", s.id)
        });
        check(&mut failures, out.metrics.f1 == 1.0, || format!("{}: F1={}", s.id, out.metrics.f1));
    }
    verdict("docker-proxy sits on co-located paths and abstracts away".into(), failures)
}

fn with_period(mut s: Scenario, period: u64) -> Scenario {
    s.workload.period = period;
    s
}

fn completion_ordering() -> Outcome {
    let mut failures = Vec::new();
    let mut summary = Vec::new();
    for t in NetworkTemplate::ALL {
        let part = |k, seed| benchmark_scenario(k, t, DEFAULT_HOSTS, seed);
        let large = combine(
            "dense-large",
            &[with_period(part(BenchmarkKind::Boutique, 1), 10), with_period(part(BenchmarkKind::Media, 2), 10)],
        )
        .map_err(|e| e.to_string())?;
        let small = combine(
            "sparse-small",
            &[with_period(part(BenchmarkKind::Boutique, 1), 400), with_period(part(BenchmarkKind::Social, 2), 400)],
        )
        .map_err(|e| e.to_string())?;
        let l = run_scenario(&large).map_err(|e| e.to_string())?;
        let s = run_scenario(&small).map_err(|e| e.to_string())?;
        let bigger = large.services.len() > small.services.len() && large.ground_truth.len() > small.ground_truth.len();
        check(&mut failures, bigger, || format!("{t}: large scenario is not larger"));
        match (l.metrics.time_to_completion, s.metrics.time_to_completion) {
            (Some(a), Some(b)) => {
                check(&mut failures, a < b, || format!("{t}: large {a} >= small {b}"));
                summary.push(format!("{t} {a}<{b}"));
            }
            other => failures.push(format!("{t}: completion undefined {other:?}")),
        }
    }
    verdict(format!("denser larger graph completes first ({})", summary.join(", ")), failures)
}

fn determinism() -> Outcome {
    let mut failures = Vec::new();
    let mut runs = 0;
    for s in suite() {
        for agent in AgentKind::ALL {
            let s = s.with_agent(agent);
            let a = run_scenario(&s).map_err(|e| e.to_string())?;
            let b = run_scenario(&s).map_err(|e| e.to_string())?;
            let same = a.metrics.to_json() == b.metrics.to_json()
                && export_json(&a.graph) == export_json(&b.graph)
                && export_dot(&a.graph) == export_dot(&b.graph)
                && export_json(&a.raw) == export_json(&b.raw)
                && a.trace_digest == b.trace_digest;
            check(&mut failures, same, || format!("{} {agent}: outputs differ", s.id));
            runs += 1;
        }
    }
    let scenarios = suite();
    let par = run_matrix(&scenarios, &AgentKind::ALL, Execution::Parallel).map_err(|e| e.to_string())?;
    let seq = run_matrix(&scenarios, &AgentKind::ALL, Execution::Sequential).map_err(|e| e.to_string())?;
    let json = |rows: &[MatrixRow]| serde_json::to_string(rows).unwrap();
    check(&mut failures, json(&par) == json(&seq), || "parallel and sequential matrices differ".into());
    verdict(format!("{runs} repeated runs and both matrix executions are byte-identical"), failures)
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("AC1", "ripple matrix precision/recall and runtime", ripple_matrix),
        ("AC2", "baseline observers under NAT", baseline_failure_modes),
        ("AC3", "partial deployment leaves traffic unchanged", graceful_deployment),
        ("AC4", "option survives injection and double NAT", packet_mechanics),
        ("AC5", "discovery equals time-respecting reachability", propagation_oracle),
        ("AC6", "forwarder visible and abstractable", forwarder_visibility),
        ("AC7", "time to completion follows traffic density", completion_ordering),
        ("AC8", "same seed, same bytes", determinism),
    ];
    let mut failed = 0;
    for (tag, title, f) in criteria {
        match f() {
            Ok(detail) => println!("{tag} PASS  {title}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("{tag} FAIL  {title}: {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 8 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
