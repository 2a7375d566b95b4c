use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use depsim::graph::{export_dot, export_json};
use depsim::harness::{
    benchmark_scenario, load_suite, render_table, run_matrix, run_scenario_with, AgentKind, BenchmarkKind, RunOptions,
    Scenario, DEFAULT_HOSTS,
};
use depsim::netsim::{NetworkTemplate, Tick};
use depsim::Execution;

#[derive(Parser)]
#[command(name = "depsim", version, about = "Simulate service dependency discovery and score the graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the scenario's agent.
        #[arg(long)]
        agent: Option<AgentKind>,
        /// Graph output; `.dot` selects Graphviz, anything else JSON.
        #[arg(long)]
        out_graph: Option<PathBuf>,
        /// Metrics JSON output; printed to stdout when absent.
        #[arg(long)]
        out_metrics: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Per-packet delivery log.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Marks edges idle in `start:end` as inactive.
        #[arg(long, value_parser = parse_window)]
        window: Option<(Tick, Tick)>,
        /// Score unordered service pairs.
        #[arg(long)]
        undirected: bool,
        /// Write the graph before forwarder abstraction.
        #[arg(long)]
        raw: bool,
    },
    /// Run every scenario in a directory under each agent.
    Matrix {
        #[arg(long)]
        suite: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "ripple,fivetuple,conntrack")]
        agents: Vec<AgentKind>,
        /// Summary rows as JSON.
        #[arg(long)]
        out_json: Option<PathBuf>,
        #[arg(long)]
        sequential: bool,
    },
    /// Emit benchmark scenario files.
    Gen {
        /// Omit together with --network to write all nine combinations to --out-dir.
        #[arg(long)]
        benchmark: Option<BenchmarkKind>,
        #[arg(long)]
        network: Option<NetworkTemplate>,
        #[arg(long, default_value_t = DEFAULT_HOSTS)]
        hosts: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn parse_window(s: &str) -> Result<(Tick, Tick), String> {
    let (a, b) = s.split_once(':').ok_or("expected start:end")?;
    let a: Tick = a.parse().map_err(|e| format!("bad start: {e}"))?;
    let b: Tick = b.parse().map_err(|e| format!("bad end: {e}"))?;
    if a > b {
        return Err("start after end".into());
    }
    Ok((a, b))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn main() -> Result<()> {
    env_logger::init();
    match Cli::parse().command {
        Command::Run { scenario, agent, out_graph, out_metrics, seed, trace, window, undirected, raw } => {
            let mut s = Scenario::load(&scenario)?;
            if let Some(a) = agent {
                s.agent = a;
            }
            if let Some(seed) = seed {
                s.seed = seed;
            }
            let opts = RunOptions { undirected, window, trace: trace.is_some() };
            let out = run_scenario_with(&s, &opts)?;
            if let Some(path) = out_graph {
                let g = if raw { &out.raw } else { &out.graph };
                let text = if path.extension().is_some_and(|e| e == "dot") { export_dot(g) } else { export_json(g) };
                write(&path, &text)?;
            }
            if let Some(path) = trace {
                write(&path, &(out.trace_lines.join("\n") + "\n"))?;
            }
            match out_metrics {
                Some(path) => write(&path, &out.metrics.to_json())?,
                None => print!("{}", out.metrics.to_json()),
            }
        }
        Command::Matrix { suite, agents, out_json, sequential } => {
            let scenarios = load_suite(&suite)?;
            if scenarios.is_empty() {
                bail!("no scenario files in {}", suite.display());
            }
            let exec = if sequential { Execution::Sequential } else { Execution::Parallel };
            let rows = run_matrix(&scenarios, &agents, exec)?;
            print!("{}", render_table(&rows));
            if let Some(path) = out_json {
                write(&path, &(serde_json::to_string_pretty(&rows)? + "\n"))?;
            }
        }
        Command::Gen { benchmark, network, hosts, seed, out_dir } => {
            if hosts == 0 {
                bail!("--hosts must be at least 1");
            }
            match (benchmark, network, out_dir) {
                (Some(b), Some(n), None) => print!("{}", benchmark_scenario(b, n, hosts, seed).to_json()),
                (Some(b), Some(n), Some(dir)) => {
                    let s = benchmark_scenario(b, n, hosts, seed);
                    write(&dir.join(format!("{}.json", s.id)), &s.to_json())?;
                }
                (None, None, Some(dir)) => {
                    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
                    for b in BenchmarkKind::ALL {
                        for n in NetworkTemplate::ALL {
                            let s = benchmark_scenario(b, n, hosts, seed);
                            write(&dir.join(format!("{}.json", s.id)), &s.to_json())?;
                        }
                    }
                }
                _ => bail!("pass --benchmark and --network, or --out-dir alone for the full set"),
            }
        }
    }
    Ok(())
}
