use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::benchmarks::BenchmarkKind;
use super::metrics::{fmt_ratio, MetricsReport};
use super::runner::run_scenario;
use super::scenario::{AgentKind, Scenario};
use super::HarnessError;
use crate::netsim::NetworkTemplate;
use crate::par::{self, Execution};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub scenario: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub benchmark: Option<BenchmarkKind>,
    pub network: String,
    pub agent: AgentKind,
    pub metrics: MetricsReport,
}

/// Every `*.json` scenario in `dir`, sorted by file name.
pub fn load_suite(dir: &Path) -> Result<Vec<Scenario>, HarnessError> {
    let entries = std::fs::read_dir(dir).map_err(|e| HarnessError::Io(dir.display().to_string(), e))?;
    let mut paths = Vec::new();
    for e in entries {
        let p = e.map_err(|e| HarnessError::Io(dir.display().to_string(), e))?.path();
        if p.extension().is_some_and(|x| x == "json") {
            paths.push(p);
        }
    }
    paths.sort();
    paths.iter().map(|p| Scenario::load(p)).collect()
}

/// Runs each scenario once per agent. Runs are independent and may execute
/// in parallel; rows come back ordered by scenario id, then agent.
pub fn run_matrix(
    scenarios: &[Scenario],
    agents: &[AgentKind],
    exec: Execution,
) -> Result<Vec<MatrixRow>, HarnessError> {
    let jobs: Vec<Scenario> = scenarios.iter().flat_map(|s| agents.iter().map(|&a| s.with_agent(a))).collect();
    let mut rows = par::map(&jobs, exec, |s| {
        run_scenario(s).map(|out| MatrixRow {
            scenario: s.id.clone(),
            benchmark: s.benchmark,
            network: s.network.label(),
            agent: s.agent,
            metrics: out.metrics,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    rows.sort_by(|a, b| (&a.scenario, a.agent).cmp(&(&b.scenario, b.agent)));
    Ok(rows)
}

fn network_rank(label: &str) -> usize {
    NetworkTemplate::ALL.iter().position(|t| t.as_str() == label).unwrap_or(NetworkTemplate::ALL.len())
}

/// One line per (agent, benchmark) with precision / recall / F1 per
/// network column.
pub fn render_table(rows: &[MatrixRow]) -> String {
    let mut networks: Vec<&str> = rows.iter().map(|r| r.network.as_str()).collect();
    networks.sort_by_key(|n| (network_rank(n), n.to_string()));
    networks.dedup();
    let mut cells: BTreeMap<(AgentKind, String), BTreeMap<&str, String>> = BTreeMap::new();
    for r in rows {
        let label = r.benchmark.map(|b| b.to_string()).unwrap_or_else(|| r.scenario.clone());
        let m = &r.metrics;
        cells.entry((r.agent, label)).or_default().insert(
            r.network.as_str(),
            format!("{} / {} / {}", fmt_ratio(m.precision), fmt_ratio(m.recall), fmt_ratio(m.f1)),
        );
    }
    let label_width = cells.keys().map(|(_, l)| l.len()).max().unwrap_or(0).max(9);
    let cell_width = 18;
    let mut out = String::new();
    let _ = write!(out, "{:<10} {:<label_width$}", "agent", "benchmark");
    for n in &networks {
        let _ = write!(out, "  {n:<cell_width$}");
    }
    out.push('\n');
    let _ = write!(out, "{:<10} {:<label_width$}", "", "");
    for _ in &networks {
        let _ = write!(out, "  {:<cell_width$}", "P / R / F1");
    }
    out.push('\n');
    for ((agent, label), row) in &cells {
        let _ = write!(out, "{:<10} {label:<label_width$}", agent.as_str());
        for n in &networks {
            let _ = write!(out, "  {:<cell_width$}", row.get(n).map(String::as_str).unwrap_or("-"));
        }
        out.push('\n');
    }
    out.lines().map(str::trim_end).collect::<Vec<_>>().join("\n") + "\n"
}
