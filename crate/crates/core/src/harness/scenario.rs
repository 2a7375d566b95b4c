use std::collections::BTreeSet;
use std::fmt;
use std::net::{Ipv4Addr, SocketAddr};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::benchmarks::BenchmarkKind;
use super::HarnessError;
use crate::netsim::{
    materialize, Deployment, ForwarderSpec, NetworkTemplate, Placement, ServiceEndpoint, Tick, TopologySpec,
};

pub const DEFAULT_PERIOD: Tick = 50;
pub const DEFAULT_COUNT: u32 = 40;

/// Which instrumentation a run installs on each machine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentKind {
    Ripple,
    Fivetuple,
    Conntrack,
}

impl AgentKind {
    pub const ALL: [AgentKind; 3] = [Self::Ripple, Self::Fivetuple, Self::Conntrack];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Ripple => "ripple",
            Self::Fivetuple => "fivetuple",
            Self::Conntrack => "conntrack",
        }
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AgentKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL.into_iter().find(|a| a.as_str() == s).ok_or_else(|| format!("unknown agent {s}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateNetwork {
    pub template: NetworkTemplate,
    pub hosts: usize,
    #[serde(default = "one")]
    pub link_latency: Tick,
    /// Gateways and container hosts drop unknown TCP options when forwarding.
    #[serde(default)]
    pub strip_options: bool,
}

fn one() -> Tick {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplicitNetwork {
    pub topology: TopologySpec,
    #[serde(default)]
    pub forwarders: Vec<ForwarderSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NetworkSpec {
    Template(TemplateNetwork),
    Explicit(ExplicitNetwork),
}

impl NetworkSpec {
    pub fn label(&self) -> String {
        match self {
            NetworkSpec::Template(t) => t.template.to_string(),
            NetworkSpec::Explicit(_) => "custom".into(),
        }
    }

    pub fn template(&self) -> Option<NetworkTemplate> {
        match self {
            NetworkSpec::Template(t) => Some(t.template),
            NetworkSpec::Explicit(_) => None,
        }
    }
}

/// One service. Template networks place it by `host` index; explicit
/// topologies name the `node` and the address clients dial (`reach`).
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub host: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub port: Option<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub published: Option<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reach: Option<SocketAddr>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DependencyEdge {
    pub from: String,
    pub to: String,
}

impl DependencyEdge {
    pub fn new(from: impl Into<String>, to: impl Into<String>) -> Self {
        DependencyEdge { from: from.into(), to: to.into() }
    }
}

impl fmt::Display for DependencyEdge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.from, self.to)
    }
}

/// Requests from `from` to `to` at `start`, `start + period`, ...
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeSchedule {
    pub from: String,
    pub to: String,
    pub start: Tick,
    pub period: Tick,
    pub count: u32,
}

impl EdgeSchedule {
    pub fn times(&self) -> impl Iterator<Item = Tick> + '_ {
        (0..self.count as u64).map(move |k| self.start + k * self.period)
    }
}

/// Edges without an explicit schedule fire `count` requests every
/// `period` ticks from a seeded offset in `[0, period)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    #[serde(default = "default_period")]
    pub period: Tick,
    #[serde(default = "default_count")]
    pub count: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub edges: Vec<EdgeSchedule>,
}

fn default_period() -> Tick {
    DEFAULT_PERIOD
}

fn default_count() -> u32 {
    DEFAULT_COUNT
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec { period: DEFAULT_PERIOD, count: DEFAULT_COUNT, edges: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub benchmark: Option<BenchmarkKind>,
    pub network: NetworkSpec,
    pub services: Vec<ServiceSpec>,
    pub ground_truth: Vec<DependencyEdge>,
    #[serde(default)]
    pub workload: WorkloadSpec,
    #[serde(default)]
    pub bootstrap: Vec<String>,
    pub agent: AgentKind,
    /// Machines that get instrumentation; all of them when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent_hosts: Option<Vec<String>>,
    pub seed: u64,
}

fn invalid(msg: impl Into<String>) -> HarnessError {
    HarnessError::Invalid(msg.into())
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Scenario, HarnessError> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| invalid(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Scenario, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(path.display().to_string(), e))?;
        Self::from_json(&text).map_err(|e| match e {
            HarnessError::Invalid(m) => invalid(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("scenario serializes");
        s.push('\n');
        s
    }

    pub fn with_agent(&self, agent: AgentKind) -> Scenario {
        Scenario { agent, ..self.clone() }
    }

    pub fn service_names(&self) -> BTreeSet<&str> {
        self.services.iter().map(|s| s.name.as_str()).collect()
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.id.is_empty() {
            return Err(invalid("scenario id is empty"));
        }
        let names = self.service_names();
        if names.len() != self.services.len() {
            return Err(invalid(format!("{}: duplicate service name", self.id)));
        }
        for s in &self.services {
            if s.name.is_empty() || s.name.contains('/') {
                return Err(invalid(format!("{}: bad service name {:?}", self.id, s.name)));
            }
            match &self.network {
                NetworkSpec::Template(t) => {
                    if t.hosts == 0 || t.hosts > 200 {
                        return Err(invalid(format!("{}: host count must be in 1..=200", self.id)));
                    }
                    match s.host {
                        Some(h) if h < t.hosts => {}
                        _ => {
                            return Err(invalid(format!(
                                "{}: service {} needs a host below {}",
                                self.id, s.name, t.hosts
                            )))
                        }
                    }
                    if s.node.is_some() || s.reach.is_some() {
                        return Err(invalid(format!(
                            "{}: service {} sets node/reach on a template network",
                            self.id, s.name
                        )));
                    }
                }
                NetworkSpec::Explicit(n) => {
                    let known = n.topology.nodes.iter().any(|x| Some(&x.name) == s.node.as_ref());
                    if !known || s.port.is_none() || s.reach.is_none() {
                        return Err(invalid(format!(
                            "{}: service {} needs a known node, a port and a reach address",
                            self.id, s.name
                        )));
                    }
                }
            }
        }
        let mut seen = BTreeSet::new();
        for e in &self.ground_truth {
            for end in [&e.from, &e.to] {
                if !names.contains(end.as_str()) {
                    return Err(invalid(format!("{}: ground truth edge {e} names unknown service {end}", self.id)));
                }
            }
            if e.from == e.to {
                return Err(invalid(format!("{}: self edge {e}", self.id)));
            }
            if !seen.insert(e) {
                return Err(invalid(format!("{}: duplicate ground truth edge {e}", self.id)));
            }
        }
        for b in &self.bootstrap {
            if !names.contains(b.as_str()) {
                return Err(invalid(format!("{}: bootstrap names unknown service {b}", self.id)));
            }
        }
        if self.workload.period == 0 && self.workload.count > 1 {
            return Err(invalid(format!("{}: default period must be positive", self.id)));
        }
        for w in &self.workload.edges {
            for end in [&w.from, &w.to] {
                if !names.contains(end.as_str()) {
                    return Err(invalid(format!(
                        "{}: schedule {}->{} names unknown service {end}",
                        self.id, w.from, w.to
                    )));
                }
            }
            if w.period == 0 && w.count > 1 {
                return Err(invalid(format!("{}: schedule {}->{} repeats with period 0", self.id, w.from, w.to)));
            }
        }
        Ok(())
    }

    /// Every request schedule: explicit ones first, then seeded defaults for
    /// ground-truth edges without one.
    pub fn schedules(&self) -> Vec<EdgeSchedule> {
        let mut out = self.workload.edges.clone();
        let explicit: BTreeSet<(&str, &str)> =
            self.workload.edges.iter().map(|w| (w.from.as_str(), w.to.as_str())).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let period = self.workload.period;
        for e in &self.ground_truth {
            let offset = rng.gen_range(0..period.max(1));
            if explicit.contains(&(e.from.as_str(), e.to.as_str())) {
                continue;
            }
            out.push(EdgeSchedule {
                from: e.from.clone(),
                to: e.to.clone(),
                start: offset,
                period,
                count: self.workload.count,
            });
        }
        out
    }

    /// Ground-truth edges no request ever exercises.
    pub fn silent_edges(&self) -> BTreeSet<DependencyEdge> {
        let active: BTreeSet<DependencyEdge> =
            self.schedules().into_iter().filter(|s| s.count > 0).map(|s| DependencyEdge::new(s.from, s.to)).collect();
        self.ground_truth.iter().filter(|e| !active.contains(e)).cloned().collect()
    }

    /// Concrete nodes, addresses and forwarders for this scenario's network.
    pub fn deploy(&self) -> Deployment {
        match &self.network {
            NetworkSpec::Template(t) => {
                let placements: Vec<Placement> = self
                    .services
                    .iter()
                    .map(|s| Placement {
                        name: s.name.clone(),
                        host: s.host.unwrap_or(0),
                        port: s.port,
                        published: s.published,
                    })
                    .collect();
                materialize(t.template, t.hosts, t.link_latency, t.strip_options, &placements)
            }
            NetworkSpec::Explicit(n) => Deployment {
                topology: n.topology.clone(),
                services: self
                    .services
                    .iter()
                    .map(|s| {
                        let port = s.port.expect("validated");
                        ServiceEndpoint {
                            name: s.name.clone(),
                            node: s.node.clone().expect("validated"),
                            listen: SocketAddr::new(Ipv4Addr::UNSPECIFIED.into(), port),
                            reach: s.reach.expect("validated"),
                        }
                    })
                    .collect(),
                forwarders: n.forwarders.clone(),
            },
        }
    }
}

/// Unions scenarios on the same template network into one. Services keep
/// their names, so they must not collide, and default ports are renumbered
/// by position. Each part's schedules are resolved with its own seed first.
pub fn combine(id: &str, parts: &[Scenario]) -> Result<Scenario, HarnessError> {
    let first = parts.first().ok_or_else(|| invalid("nothing to combine"))?;
    let NetworkSpec::Template(base) = &first.network else {
        return Err(invalid("only template networks can be combined"));
    };
    let mut net = base.clone();
    let mut out = Scenario {
        id: id.to_string(),
        benchmark: None,
        network: NetworkSpec::Template(base.clone()),
        services: Vec::new(),
        ground_truth: Vec::new(),
        workload: WorkloadSpec { edges: Vec::new(), ..first.workload.clone() },
        bootstrap: Vec::new(),
        agent: first.agent,
        agent_hosts: None,
        seed: first.seed,
    };
    for p in parts {
        match &p.network {
            NetworkSpec::Template(t) if t.template == base.template && t.link_latency == base.link_latency => {
                net.hosts = net.hosts.max(t.hosts);
                net.strip_options |= t.strip_options;
            }
            _ => return Err(invalid(format!("{} does not share the network of {}", p.id, first.id))),
        }
        out.services.extend(p.services.iter().cloned());
        out.ground_truth.extend(p.ground_truth.iter().cloned());
        out.workload.edges.extend(p.schedules());
        out.bootstrap.extend(p.bootstrap.iter().cloned());
    }
    out.network = NetworkSpec::Template(net);
    out.validate()?;
    Ok(out)
}
