//! Synthetic service graphs shaped like three well-known microservice
//! benchmarks: same service and dependency counts, same connectivity.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::scenario::{AgentKind, DependencyEdge, NetworkSpec, Scenario, ServiceSpec, TemplateNetwork, WorkloadSpec};
use crate::netsim::NetworkTemplate;

pub const DEFAULT_HOSTS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchmarkKind {
    Boutique,
    Social,
    Media,
}

impl BenchmarkKind {
    pub const ALL: [BenchmarkKind; 3] = [Self::Boutique, Self::Social, Self::Media];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Boutique => "boutique",
            Self::Social => "social",
            Self::Media => "media",
        }
    }

    fn edges(self) -> &'static [(&'static str, &'static str)] {
        match self {
            Self::Boutique => BOUTIQUE,
            Self::Social => SOCIAL,
            Self::Media => MEDIA,
        }
    }

    fn entry(self) -> &'static str {
        match self {
            Self::Boutique => "frontend",
            Self::Social => "nginx-thrift",
            Self::Media => "nginx-web-server",
        }
    }
}

impl fmt::Display for BenchmarkKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BenchmarkKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL.into_iter().find(|b| b.as_str() == s).ok_or_else(|| format!("unknown benchmark {s}"))
    }
}

const BOUTIQUE: &[(&str, &str)] = &[
    ("loadgenerator", "frontend"),
    ("frontend", "cart"),
    ("frontend", "productcatalog"),
    ("frontend", "currency"),
    ("frontend", "shipping"),
    ("frontend", "checkout"),
    ("frontend", "recommendation"),
    ("frontend", "ad"),
    ("checkout", "cart"),
    ("checkout", "productcatalog"),
    ("checkout", "currency"),
    ("checkout", "shipping"),
    ("checkout", "email"),
    ("checkout", "payment"),
    ("recommendation", "productcatalog"),
    ("cart", "redis-cart"),
];

const SOCIAL: &[(&str, &str)] = &[
    ("nginx-thrift", "compose-post"),
    ("nginx-thrift", "home-timeline"),
    ("nginx-thrift", "user-timeline"),
    ("nginx-thrift", "user"),
    ("compose-post", "unique-id"),
    ("compose-post", "media"),
    ("compose-post", "text"),
    ("compose-post", "user"),
    ("compose-post", "post-storage"),
    ("compose-post", "user-timeline"),
    ("compose-post", "write-home-timeline"),
    ("text", "url-shorten"),
    ("text", "user-mention"),
    ("home-timeline", "post-storage"),
    ("home-timeline", "home-timeline-redis"),
    ("user-timeline", "post-storage"),
    ("user-timeline", "user-timeline-mongodb"),
    ("user-timeline", "user-timeline-redis"),
    ("post-storage", "post-storage-mongodb"),
    ("post-storage", "post-storage-memcached"),
    ("write-home-timeline", "social-graph"),
    ("write-home-timeline", "home-timeline-redis"),
    ("social-graph", "social-graph-mongodb"),
    ("social-graph", "social-graph-redis"),
    ("user", "user-mongodb"),
];

/// The main component (17 services, 24 dependencies) followed by three
/// components with no path from it.
const MEDIA: &[(&str, &str)] = &[
    ("nginx-web-server", "compose-review"),
    ("nginx-web-server", "user"),
    ("nginx-web-server", "movie-id"),
    ("nginx-web-server", "text"),
    ("nginx-web-server", "unique-id"),
    ("nginx-web-server", "rating"),
    ("compose-review", "review-storage"),
    ("compose-review", "user-review"),
    ("compose-review", "movie-review"),
    ("movie-id", "compose-review"),
    ("movie-id", "movie-id-mongodb"),
    ("movie-id", "rating"),
    ("text", "compose-review"),
    ("user", "compose-review"),
    ("unique-id", "compose-review"),
    ("rating", "compose-review"),
    ("review-storage", "review-storage-mongodb"),
    ("review-storage", "review-storage-memcached"),
    ("user-review", "user-review-mongodb"),
    ("user-review", "user-review-redis"),
    ("user-review", "review-storage"),
    ("movie-review", "movie-review-mongodb"),
    ("movie-review", "movie-review-redis"),
    ("movie-review", "review-storage"),
    ("cast-info-loader", "cast-info"),
    ("cast-info-loader", "cast-info-mongodb"),
    ("cast-info", "cast-info-mongodb"),
    ("cast-info", "cast-info-memcached"),
    ("movie-info-loader", "movie-info"),
    ("movie-info", "movie-info-mongodb"),
    ("movie-info", "movie-info-memcached"),
    ("plot-loader", "plot"),
    ("plot", "plot-mongodb"),
    ("plot", "plot-memcached"),
];

/// Services, dependencies and a bootstrap entry point for `kind`, with
/// services placed round-robin across `hosts` in order of first mention.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BenchmarkGraph {
    pub kind: BenchmarkKind,
    pub services: Vec<ServiceSpec>,
    pub ground_truth: Vec<DependencyEdge>,
    pub bootstrap: Vec<String>,
}

pub fn generate_benchmark(kind: BenchmarkKind, hosts: usize) -> BenchmarkGraph {
    assert!(hosts >= 1, "at least one host");
    let mut names: Vec<&str> = Vec::new();
    for &(a, b) in kind.edges() {
        for n in [a, b] {
            if !names.contains(&n) {
                names.push(n);
            }
        }
    }
    BenchmarkGraph {
        kind,
        services: names
            .iter()
            .enumerate()
            .map(|(i, n)| ServiceSpec { name: n.to_string(), host: Some(i % hosts), ..Default::default() })
            .collect(),
        ground_truth: kind.edges().iter().map(|&(a, b)| DependencyEdge::new(a, b)).collect(),
        bootstrap: vec![kind.entry().to_string()],
    }
}

/// A ready-to-run scenario with the default workload.
pub fn benchmark_scenario(kind: BenchmarkKind, template: NetworkTemplate, hosts: usize, seed: u64) -> Scenario {
    let g = generate_benchmark(kind, hosts);
    Scenario {
        id: format!("{kind}-{template}"),
        benchmark: Some(kind),
        network: NetworkSpec::Template(TemplateNetwork { template, hosts, link_latency: 1, strip_options: false }),
        services: g.services,
        ground_truth: g.ground_truth,
        workload: WorkloadSpec::default(),
        bootstrap: g.bootstrap,
        agent: AgentKind::Ripple,
        agent_hosts: None,
        seed,
    }
}

#[cfg(test)]
mod tests {
    use std::collections::{BTreeMap, BTreeSet};

    use super::*;

    fn components(g: &BenchmarkGraph) -> Vec<(BTreeSet<String>, usize)> {
        let mut comp: BTreeMap<String, usize> =
            g.services.iter().enumerate().map(|(i, s)| (s.name.clone(), i)).collect();
        loop {
            let mut changed = false;
            for e in &g.ground_truth {
                let (a, b) = (comp[&e.from], comp[&e.to]);
                if a != b {
                    let m = a.min(b);
                    comp.insert(e.from.clone(), m);
                    comp.insert(e.to.clone(), m);
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        let mut out: BTreeMap<usize, (BTreeSet<String>, usize)> = BTreeMap::new();
        for (n, c) in &comp {
            out.entry(*c).or_default().0.insert(n.clone());
        }
        for e in &g.ground_truth {
            out.get_mut(&comp[&e.from]).unwrap().1 += 1;
        }
        out.into_values().collect()
    }

    #[test]
    fn counts_match_the_originals() {
        for (kind, nodes, edges) in
            [(BenchmarkKind::Boutique, 12, 16), (BenchmarkKind::Social, 21, 25), (BenchmarkKind::Media, 29, 34)]
        {
            let g = generate_benchmark(kind, 3);
            assert_eq!((g.services.len(), g.ground_truth.len()), (nodes, edges), "{kind}");
            let distinct: BTreeSet<_> = g.ground_truth.iter().collect();
            assert_eq!(distinct.len(), edges);
        }
    }

    #[test]
    fn boutique_and_social_are_connected() {
        for kind in [BenchmarkKind::Boutique, BenchmarkKind::Social] {
            assert_eq!(components(&generate_benchmark(kind, 2)).len(), 1, "{kind}");
        }
    }

    #[test]
    fn media_has_three_detached_components() {
        let g = generate_benchmark(BenchmarkKind::Media, 2);
        let comps = components(&g);
        assert_eq!(comps.len(), 4);
        let main = comps.iter().find(|(n, _)| n.contains("nginx-web-server")).unwrap();
        assert_eq!((main.0.len(), main.1), (17, 24));
        assert!(comps.iter().all(|(n, _)| n.len() == 4 || n.len() == 17));
    }

    #[test]
    fn round_robin_placement() {
        let g = generate_benchmark(BenchmarkKind::Boutique, 4);
        let hosts: Vec<usize> = g.services.iter().map(|s| s.host.unwrap()).collect();
        assert_eq!(&hosts[..5], [0, 1, 2, 3, 0]);
        assert_eq!(g.services[1].name, "frontend");
    }

    #[test]
    fn scenarios_validate() {
        for kind in BenchmarkKind::ALL {
            for t in NetworkTemplate::ALL {
                benchmark_scenario(kind, t, DEFAULT_HOSTS, 1).validate().unwrap();
            }
        }
    }
}
