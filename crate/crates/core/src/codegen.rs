//! Netlist emission: the actor graph of a quantized network as a JSON
//! document that can be loaded back, and as a Graphviz drawing.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{build_actor_graph, Actor, ActorGraph, ActorKind, Channel, Endpoint};
use crate::model::{QuantizedNetwork, Topology, SCHEMA_VERSION};

const NETLIST_KIND: &str = "dataflow_netlist";

/// Actor counts a graph must have for a topology.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActorCounts {
    pub conv: usize,
    pub sum: usize,
    pub relu: usize,
    pub pool_h: usize,
    pub pool_v: usize,
    pub fc: usize,
    pub argmax: usize,
}

impl ActorCounts {
    /// `conv = sum N(l-1) N(l)`, `sum = relu = sum N(l)`, one poolH and one
    /// poolV per channel of layers 1 and 2, one fc, one argmax.
    pub fn closed_form(t: &Topology) -> Self {
        let n = t.channels();
        ActorCounts {
            conv: (0..3).map(|l| n[l] * n[l + 1]).sum(),
            sum: t.total_neurons(),
            relu: t.total_neurons(),
            pool_h: t.n1 + t.n2,
            pool_v: t.n1 + t.n2,
            fc: 1,
            argmax: 1,
        }
    }

    pub fn of(graph: &ActorGraph) -> Self {
        ActorCounts {
            conv: graph.count(ActorKind::Conv),
            sum: graph.count(ActorKind::Sum),
            relu: graph.count(ActorKind::Relu),
            pool_h: graph.count(ActorKind::PoolH),
            pool_v: graph.count(ActorKind::PoolV),
            fc: graph.count(ActorKind::Fc),
            argmax: graph.count(ActorKind::Argmax),
        }
    }

    pub fn total(&self) -> usize {
        self.conv + self.sum + self.relu + self.pool_h + self.pool_v + self.fc + self.argmax
    }
}

/// On-disk netlist layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    schema_version: u32,
    kind: String,
    topology: Topology,
    bits: u32,
    input_side: usize,
    counts: ActorCounts,
    actors: Vec<Actor>,
    channels: Vec<Channel>,
}

/// A loaded netlist.
#[derive(Debug, Clone, PartialEq)]
pub struct Netlist {
    pub topology: Topology,
    pub bits: u32,
    pub graph: ActorGraph,
}

/// Fails unless `graph` is exactly the graph `net` builds.
pub fn check_consistency(graph: &ActorGraph, net: &QuantizedNetwork) -> Result<()> {
    let expected = build_actor_graph(net, graph.input_side);
    if graph.actors.len() != expected.actors.len() || graph.channels.len() != expected.channels.len() {
        return Err(Error::Consistency(format!(
            "graph has {} actors and {} channels; network {} needs {} and {}",
            graph.actors.len(),
            graph.channels.len(),
            net.topology,
            expected.actors.len(),
            expected.channels.len()
        )));
    }
    if let Some((a, _)) = graph.actors.iter().zip(&expected.actors).find(|(a, b)| a != b) {
        return Err(Error::Consistency(format!(
            "actor {} does not match the network parameters",
            a.name
        )));
    }
    if let Some((c, _)) = graph.channels.iter().zip(&expected.channels).find(|(a, b)| a != b) {
        return Err(Error::Consistency(format!(
            "channel {} does not match the network",
            c.id
        )));
    }
    Ok(())
}

/// Pretty JSON netlist of `graph`, which must have been built from `net`.
pub fn emit_netlist_json(graph: &ActorGraph, net: &QuantizedNetwork) -> Result<String> {
    check_consistency(graph, net)?;
    let doc = Document {
        schema_version: SCHEMA_VERSION,
        kind: NETLIST_KIND.into(),
        topology: net.topology,
        bits: net.bits,
        input_side: graph.input_side,
        counts: ActorCounts::of(graph),
        actors: graph.actors.clone(),
        channels: graph.channels.clone(),
    };
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    Ok(text)
}

/// Loads a netlist and checks its structure and header.
pub fn parse_netlist_json(text: &str) -> Result<Netlist> {
    let doc: Document = serde_json::from_str(text)?;
    if doc.kind != NETLIST_KIND {
        return Err(Error::Consistency(format!(
            "document kind is {:?}, expected {NETLIST_KIND:?}",
            doc.kind
        )));
    }
    if doc.schema_version != SCHEMA_VERSION {
        return Err(Error::Consistency(format!(
            "schema version {} is not supported (expected {SCHEMA_VERSION})",
            doc.schema_version
        )));
    }
    let graph = ActorGraph {
        input_side: doc.input_side,
        actors: doc.actors,
        channels: doc.channels,
    };
    graph.validate()?;
    let counts = ActorCounts::of(&graph);
    if counts != doc.counts || counts != ActorCounts::closed_form(&doc.topology) {
        return Err(Error::Consistency(format!(
            "actor counts {counts:?} disagree with the header of topology {}",
            doc.topology
        )));
    }
    Ok(Netlist {
        topology: doc.topology,
        bits: doc.bits,
        graph,
    })
}

fn node_id(e: Endpoint) -> String {
    match e {
        Endpoint::Input => "input".into(),
        Endpoint::Output => "output".into(),
        Endpoint::Port { actor, .. } => format!("a{actor}"),
    }
}

/// Graphviz digraph: one node per actor labelled `kind/id`, one edge per
/// channel labelled with its capacity. The external stream endpoints appear
/// only when some channel uses them.
pub fn emit_dot(graph: &ActorGraph) -> String {
    let mut out = String::from("digraph dataflow {\n  rankdir=LR;\n  node [shape=box, fontname=\"Helvetica\"];\n");
    let uses = |e: Endpoint| graph.channels.iter().any(|c| c.from == e || c.to == e);
    if uses(Endpoint::Input) {
        out.push_str("  input [shape=invhouse, label=\"pixels\"];\n");
    }
    for a in &graph.actors {
        let _ = writeln!(
            out,
            "  a{} [label=\"{}/{}\", tooltip=\"{}\"];",
            a.id,
            a.kind(),
            a.id,
            a.name
        );
    }
    if uses(Endpoint::Output) {
        out.push_str("  output [shape=house, label=\"class\"];\n");
    }
    for c in &graph.channels {
        let _ = writeln!(
            out,
            "  {} -> {} [label=\"{}\"];",
            node_id(c.from),
            node_id(c.to),
            c.capacity
        );
    }
    out.push_str("}\n");
    out
}
