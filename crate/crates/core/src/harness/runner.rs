use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::metrics::{compute_metrics, MetricsReport};
use super::scenario::{AgentKind, NetworkSpec, Scenario};
use super::HarnessError;
use crate::agent::{AgentStats, Provenance, RippleAgent};
use crate::baselines::{AddressDirectory, FlowObserver, ObserverKind};
use crate::endpoint::{AppEvent, Instrumentation, ProcessId, ProcessRef};
use crate::graph::{abstract_forwarders, Collector, DependencyGraph, NodeKey};
use crate::netsim::{NetworkTemplate, Tick, World};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Score unordered pairs instead of caller-to-callee edges.
    pub undirected: bool,
    /// Analysis window recorded on the exported graphs.
    pub window: Option<(Tick, Tick)>,
    /// Keep the per-packet delivery log.
    pub trace: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub scenario: String,
    pub agent: AgentKind,
    /// Graph as collected, forwarders included.
    pub raw: DependencyGraph,
    /// Graph that was scored.
    pub graph: DependencyGraph,
    pub metrics: MetricsReport,
    pub app_trace: Vec<AppEvent>,
    pub trace_digest: String,
    pub trace_lines: Vec<String>,
    /// Ripple target sets merged across machines.
    pub targets: Vec<(ProcessRef, Provenance)>,
    pub forwarders: Vec<ProcessRef>,
    pub agent_stats: AgentStats,
    pub end_time: Tick,
}

pub fn run_scenario(s: &Scenario) -> Result<RunOutput, HarnessError> {
    run_scenario_with(s, &RunOptions::default())
}

fn cgroup_for(s: &Scenario, name: &str) -> String {
    match s.network {
        NetworkSpec::Template(ref t) if t.template != NetworkTemplate::NatFree => format!("docker/{name}"),
        _ => format!("system.slice/{name}.service"),
    }
}

fn instrumentation_for(agent: AgentKind, machine: &str, seed: u64) -> Box<dyn Instrumentation> {
    match agent {
        AgentKind::Ripple => Box::new(RippleAgent::new(machine, seed)),
        AgentKind::Fivetuple => Box::new(FlowObserver::new(ObserverKind::Fivetuple)),
        AgentKind::Conntrack => Box::new(FlowObserver::new(ObserverKind::Conntrack)),
    }
}

pub fn run_scenario_with(s: &Scenario, opts: &RunOptions) -> Result<RunOutput, HarnessError> {
    s.validate()?;
    let deployment = s.deploy();
    let mut world = World::new(&deployment.topology, s.seed)?;
    if opts.trace {
        world.enable_trace();
    }

    let mut procs: HashMap<&str, ProcessId> = HashMap::new();
    let mut reach = HashMap::new();
    let mut directory_entries = Vec::new();
    for svc in &deployment.services {
        let pid = world.spawn_process(&svc.node, &svc.name, &cgroup_for(s, &svc.name))?;
        world.serve(pid, svc.listen)?;
        procs.insert(svc.name.as_str(), pid);
        reach.insert(svc.name.as_str(), svc.reach);
        directory_entries.push((world.process(pid).clone(), svc.node.clone(), svc.listen.port()));
    }
    let mut forwarders = Vec::new();
    for f in &deployment.forwarders {
        let pid = world.spawn_forwarder(&f.node, f.listen_port, f.target)?;
        forwarders.push(world.process(pid).clone());
    }

    let machines: Vec<String> = world.network().machine_names().into_iter().map(String::from).collect();
    let instrumented: Vec<String> = match &s.agent_hosts {
        None => machines.clone(),
        Some(hosts) => {
            if let Some(h) = hosts.iter().find(|h| !machines.contains(h)) {
                return Err(HarnessError::Invalid(format!("{}: agent host {h} is not a machine", s.id)));
            }
            hosts.clone()
        }
    };
    for m in &instrumented {
        world.install(m, instrumentation_for(s.agent, m, s.seed))?;
    }
    if s.agent == AgentKind::Ripple {
        for b in &s.bootstrap {
            let p = world.process(procs[b.as_str()]).clone();
            match world.instrumentation_mut(&p.host).and_then(|i| i.downcast_mut::<RippleAgent>()) {
                Some(agent) => agent.register_target(&p)?,
                None => log::debug!("bootstrap {p} runs on an uninstrumented machine"),
            }
        }
    }

    for sch in s.schedules() {
        let (client, target) = (procs[sch.from.as_str()], reach[sch.to.as_str()]);
        for (k, t) in sch.times().enumerate() {
            world.schedule_request(t, client, target, format!("GET /{} #{k}", sch.to).into_bytes());
        }
    }
    world.run();

    let mut collector = Collector::new();
    collector.ingest_all(world.take_records())?;
    let collected = collector.finish(&AddressDirectory::new(&world, &directory_entries));
    let mut raw = collected.graph;
    raw.metadata.insert("scenario".into(), s.id.clone());
    raw.metadata.insert("agent".into(), s.agent.to_string());
    raw.metadata.insert("seed".into(), s.seed.to_string());
    raw.window = opts.window;
    let forwarder_keys: BTreeSet<NodeKey> = forwarders.iter().map(NodeKey::of).collect();
    let graph = if forwarder_keys.is_empty() { raw.clone() } else { abstract_forwarders(&raw, &forwarder_keys) };

    let found = graph.named_pairs(opts.undirected);
    let truth: BTreeSet<(String, String)> = s
        .ground_truth
        .iter()
        .map(|e| {
            if opts.undirected && e.to < e.from {
                (e.to.clone(), e.from.clone())
            } else {
                (e.from.clone(), e.to.clone())
            }
        })
        .collect();
    let mut metrics = compute_metrics(&found, &truth);
    // bootstrap registration happens before the first tick
    metrics.time_to_completion =
        graph.edges.values().filter(|e| opts.undirected || e.is_forward()).map(|e| e.first_seen).max();
    metrics.unpaired_events = collected.unpaired_senders + collected.unpaired_receivers;
    metrics.undiscoverable = s.silent_edges().iter().map(ToString::to_string).collect();

    let mut targets = BTreeMap::new();
    let mut agent_stats = AgentStats::default();
    for m in &instrumented {
        if let Some(a) = world.instrumentation(m).and_then(|i| i.downcast_ref::<RippleAgent>()) {
            targets.extend(a.targets().iter().map(|(p, v)| (p.clone(), *v)));
            let st = a.stats();
            agent_stats.injected += st.injected;
            agent_stats.no_room += st.no_room;
            agent_stats.detected += st.detected;
        }
    }

    Ok(RunOutput {
        scenario: s.id.clone(),
        agent: s.agent,
        raw,
        graph,
        metrics,
        app_trace: world.app_trace().to_vec(),
        trace_digest: world.trace_digest(),
        trace_lines: world.trace_lines().to_vec(),
        targets: targets.into_iter().collect(),
        forwarders,
        agent_stats,
        end_time: world.now(),
    })
}

/// Ticks from bootstrap until the ripple graph stops growing, or `None`
/// when nothing is discovered.
pub fn measure_time_to_completion(s: &Scenario) -> Result<Option<Tick>, HarnessError> {
    if s.agent != AgentKind::Ripple {
        return Err(HarnessError::Invalid(format!("{}: completion time needs the ripple agent", s.id)));
    }
    Ok(run_scenario(s)?.metrics.time_to_completion)
}
