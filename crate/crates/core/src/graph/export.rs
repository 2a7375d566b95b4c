//! DOT and JSON renderings. Both are deterministic: nodes and edges come
//! out in key order.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{DependencyGraph, EdgeSource, GraphEdge, GraphNode, NodeKey};
use crate::netsim::Tick;

pub const GRAPH_SCHEMA: &str = "depsim.graph/v1";

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

fn node_label(n: &GraphNode) -> String {
    match &n.key {
        NodeKey::Process { pid, .. } => {
            format!("{}\ncgroup {}\npid {pid}", n.name, n.cgroup.as_deref().unwrap_or("-"))
        }
        NodeKey::Address(_) => n.name.clone(),
    }
}

fn node_line(n: &GraphNode) -> String {
    let shape = match n.key {
        NodeKey::Process { .. } => "shape=box",
        NodeKey::Address(_) => "shape=ellipse, style=dashed",
    };
    format!("{} [label={}, {shape}];", quote(&n.key.to_string()), quote(&node_label(n)))
}

/// Graphviz rendering with one cluster per machine. Reverse-only edges are
/// dashed; edges idle in the analysis window are dotted.
pub fn export_dot(g: &DependencyGraph) -> String {
    let mut out = String::from("digraph dependencies {\n  rankdir=LR;\n");
    let mut clusters: BTreeMap<&str, Vec<&GraphNode>> = BTreeMap::new();
    let mut loose = Vec::new();
    for n in g.nodes.values() {
        match n.machine.as_deref() {
            Some(m) => clusters.entry(m).or_default().push(n),
            None => loose.push(n),
        }
    }
    for (m, nodes) in &clusters {
        let _ = writeln!(out, "  subgraph {} {{", quote(&format!("cluster_{m}")));
        let _ = writeln!(out, "    label={};", quote(m));
        for n in nodes {
            let _ = writeln!(out, "    {}", node_line(n));
        }
        out.push_str("  }\n");
    }
    for n in loose {
        let _ = writeln!(out, "  {}", node_line(n));
    }
    for e in g.edges.values() {
        let mut attrs = vec![format!("label={}", quote(&e.source.to_string()))];
        if let Some((s, t)) = g.window {
            if !e.active_in(s, t) {
                attrs.push("style=dotted".into());
            }
        }
        if !e.is_forward() && !attrs.iter().any(|a| a.starts_with("style")) {
            attrs.push("style=dashed".into());
        }
        let _ =
            writeln!(out, "  {} -> {} [{}];", quote(&e.from.to_string()), quote(&e.to.to_string()), attrs.join(", "));
    }
    out.push_str("}\n");
    out
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonGraph {
    schema: String,
    metadata: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    window: Option<[Tick; 2]>,
    nodes: Vec<JsonNode>,
    edges: Vec<JsonEdge>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonNode {
    id: String,
    kind: String,
    name: String,
    machine: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cgroup: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pid: Option<u32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonEdge {
    from: String,
    to: String,
    source: EdgeSource,
    first_seen: Tick,
    forward: u32,
    reverse: u32,
    seen: Vec<Tick>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    active: Option<bool>,
}

pub fn export_json(g: &DependencyGraph) -> String {
    let doc = JsonGraph {
        schema: GRAPH_SCHEMA.to_string(),
        metadata: g.metadata.clone(),
        window: g.window.map(|(a, b)| [a, b]),
        nodes: g
            .nodes
            .values()
            .map(|n| JsonNode {
                id: n.key.to_string(),
                kind: match n.key {
                    NodeKey::Process { .. } => "process".into(),
                    NodeKey::Address(_) => "address".into(),
                },
                name: n.name.clone(),
                machine: n.machine.clone(),
                cgroup: n.cgroup.clone(),
                pid: match n.key {
                    NodeKey::Process { pid, .. } => Some(pid),
                    NodeKey::Address(_) => None,
                },
            })
            .collect(),
        edges: g
            .edges
            .values()
            .map(|e| JsonEdge {
                from: e.from.to_string(),
                to: e.to.to_string(),
                source: e.source,
                first_seen: e.first_seen,
                forward: e.forward,
                reverse: e.reverse,
                seen: e.seen.clone(),
                active: g.window.map(|(s, t)| e.active_in(s, t)),
            })
            .collect(),
    };
    let mut s = serde_json::to_string_pretty(&doc).expect("graph serializes");
    s.push('\n');
    s
}

#[derive(Debug, thiserror::Error)]
pub enum ImportError {
    #[error("malformed graph document: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported schema {0}")]
    Schema(String),
    #[error("edge references unknown node {0}")]
    UnknownNode(String),
    #[error("bad node {0}")]
    BadNode(String),
}

pub fn import_json(text: &str) -> Result<DependencyGraph, ImportError> {
    let doc: JsonGraph = serde_json::from_str(text)?;
    if doc.schema != GRAPH_SCHEMA {
        return Err(ImportError::Schema(doc.schema));
    }
    let mut g =
        DependencyGraph { metadata: doc.metadata, window: doc.window.map(|[a, b]| (a, b)), ..Default::default() };
    let mut ids = BTreeMap::new();
    for n in doc.nodes {
        let key = match (n.kind.as_str(), n.pid, &n.machine) {
            ("process", Some(pid), Some(host)) => NodeKey::Process { host: host.clone(), pid },
            ("address", None, _) => NodeKey::Address(n.name.clone()),
            _ => return Err(ImportError::BadNode(n.id)),
        };
        if key.to_string() != n.id {
            return Err(ImportError::BadNode(n.id));
        }
        ids.insert(n.id, key.clone());
        g.nodes.insert(key.clone(), GraphNode { key, name: n.name, machine: n.machine, cgroup: n.cgroup });
    }
    for e in doc.edges {
        let from = ids.get(&e.from).cloned().ok_or_else(|| ImportError::UnknownNode(e.from.clone()))?;
        let to = ids.get(&e.to).cloned().ok_or_else(|| ImportError::UnknownNode(e.to.clone()))?;
        g.edges.insert(
            (from.clone(), to.clone(), e.source),
            GraphEdge {
                from,
                to,
                source: e.source,
                first_seen: e.first_seen,
                forward: e.forward,
                reverse: e.reverse,
                seen: e.seen,
            },
        );
    }
    Ok(g)
}
