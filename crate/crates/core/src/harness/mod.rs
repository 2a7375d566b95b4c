//! Scenarios, benchmark-shaped service graphs, workload, runs and scores.

mod benchmarks;
mod matrix;
mod metrics;
mod runner;
mod scenario;

pub use benchmarks::{benchmark_scenario, generate_benchmark, BenchmarkGraph, BenchmarkKind, DEFAULT_HOSTS};
pub use matrix::{load_suite, render_table, run_matrix, MatrixRow};
pub use metrics::{compute_metrics, fmt_ratio, MetricsReport};
pub use runner::{measure_time_to_completion, run_scenario, run_scenario_with, RunOptions, RunOutput};
pub use scenario::{
    combine, AgentKind, DependencyEdge, EdgeSchedule, ExplicitNetwork, NetworkSpec, Scenario, ServiceSpec,
    TemplateNetwork, WorkloadSpec, DEFAULT_COUNT, DEFAULT_PERIOD,
};

use crate::agent::AgentError;
use crate::endpoint::EndpointError;
use crate::graph::CollectorError;
use crate::netsim::TopologyError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("cannot read {0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Endpoint(#[from] EndpointError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Collector(#[from] CollectorError),
}
