use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{stage_sides, FixedPointFormat, QuantizedNetwork, Topology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ActorKind {
    Conv,
    Sum,
    Relu,
    PoolH,
    PoolV,
    Fc,
    Argmax,
}

impl ActorKind {
    pub const ALL: [ActorKind; 7] = [
        ActorKind::Conv,
        ActorKind::Sum,
        ActorKind::Relu,
        ActorKind::PoolH,
        ActorKind::PoolV,
        ActorKind::Fc,
        ActorKind::Argmax,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ActorKind::Conv => "conv",
            ActorKind::Sum => "sum",
            ActorKind::Relu => "ReLu",
            ActorKind::PoolH => "poolH",
            ActorKind::PoolV => "poolV",
            ActorKind::Fc => "fc",
            ActorKind::Argmax => "argmax",
        }
    }
}

impl fmt::Display for ActorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Per-kind actor parameters. Layers are numbered from 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum ActorParams {
    /// 3x3 correlation of one input channel for one output neuron, over a
    /// raster stream of `width x height` codes.
    #[serde(rename = "conv")]
    Conv {
        layer: usize,
        input: usize,
        output: usize,
        kernel: [i32; 9],
        weight_format: FixedPointFormat,
        width: usize,
        height: usize,
        /// Codes held in the two-row line buffer.
        line_buffer: usize,
    },
    /// Adds the partial sums of all input channels and the neuron bias.
    #[serde(rename = "sum")]
    Sum {
        layer: usize,
        neuron: usize,
        inputs: usize,
        bias: i32,
        bias_format: FixedPointFormat,
    },
    /// Rectifies and requantizes to the next activation stage.
    #[serde(rename = "relu")]
    Relu { layer: usize, neuron: usize },
    #[serde(rename = "poolH")]
    PoolH {
        layer: usize,
        channel: usize,
        width: usize,
        height: usize,
    },
    /// Input stream is `width x height` (already halved horizontally).
    #[serde(rename = "poolV")]
    PoolV {
        layer: usize,
        channel: usize,
        width: usize,
        height: usize,
    },
    /// Inner product over `inputs` synchronized streams of `positions` codes.
    #[serde(rename = "fc")]
    Fc {
        inputs: usize,
        positions: usize,
        outputs: usize,
        weights: Vec<i32>,
        weight_format: FixedPointFormat,
        biases: Vec<i32>,
        bias_format: FixedPointFormat,
    },
    #[serde(rename = "argmax")]
    Argmax { classes: usize },
}

impl ActorParams {
    pub fn kind(&self) -> ActorKind {
        match self {
            ActorParams::Conv { .. } => ActorKind::Conv,
            ActorParams::Sum { .. } => ActorKind::Sum,
            ActorParams::Relu { .. } => ActorKind::Relu,
            ActorParams::PoolH { .. } => ActorKind::PoolH,
            ActorParams::PoolV { .. } => ActorKind::PoolV,
            ActorParams::Fc { .. } => ActorKind::Fc,
            ActorParams::Argmax { .. } => ActorKind::Argmax,
        }
    }

    /// Number of input ports the actor reads from.
    pub fn input_ports(&self) -> usize {
        match self {
            ActorParams::Sum { inputs, .. } | ActorParams::Fc { inputs, .. } => *inputs,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Actor {
    pub id: usize,
    pub name: String,
    #[serde(flatten)]
    pub params: ActorParams,
}

impl Actor {
    pub fn kind(&self) -> ActorKind {
        self.params.kind()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    /// The external pixel stream.
    Input,
    /// The classification result.
    Output,
    Port {
        actor: usize,
        port: usize,
    },
}

/// A unidirectional FIFO. Actors with several output channels broadcast each
/// token to all of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Channel {
    pub id: usize,
    pub from: Endpoint,
    pub to: Endpoint,
    pub capacity: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActorGraph {
    pub input_side: usize,
    pub actors: Vec<Actor>,
    pub channels: Vec<Channel>,
}

impl ActorGraph {
    pub fn count(&self, kind: ActorKind) -> usize {
        self.actors.iter().filter(|a| a.kind() == kind).count()
    }

    /// Input channel ids of each actor, indexed by port.
    pub fn input_channels(&self) -> Vec<Vec<usize>> {
        let mut ins: Vec<Vec<Option<usize>>> = self.actors.iter().map(|a| vec![None; a.params.input_ports()]).collect();
        for c in &self.channels {
            if let Endpoint::Port { actor, port } = c.to {
                if let Some(slot) = ins.get_mut(actor).and_then(|p| p.get_mut(port)) {
                    *slot = Some(c.id);
                }
            }
        }
        ins.into_iter()
            .map(|ports| ports.into_iter().flatten().collect())
            .collect()
    }

    /// Output channel ids of each actor, in port order.
    pub fn output_channels(&self) -> Vec<Vec<usize>> {
        let mut outs: Vec<Vec<(usize, usize)>> = vec![Vec::new(); self.actors.len()];
        for c in &self.channels {
            if let Endpoint::Port { actor, port } = c.from {
                if let Some(o) = outs.get_mut(actor) {
                    o.push((port, c.id));
                }
            }
        }
        outs.into_iter()
            .map(|mut o| {
                o.sort();
                o.into_iter().map(|(_, c)| c).collect()
            })
            .collect()
    }

    /// Structural checks: ids are dense, every input port has exactly one
    /// producer, the graph is acyclic, and every actor lies on a path from
    /// the input stream to the output.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Consistency(m));
        for (i, a) in self.actors.iter().enumerate() {
            if a.id != i {
                return bad(format!("actor at position {i} has id {}", a.id));
            }
            if let ActorParams::Fc {
                inputs,
                positions,
                outputs,
                weights,
                biases,
                ..
            } = &a.params
            {
                if weights.len() != inputs * positions * outputs || biases.len() != *outputs {
                    return bad(format!("fc actor {} has inconsistent weight counts", a.name));
                }
            }
        }
        let n = self.actors.len();
        let mut in_count: Vec<Vec<usize>> = self.actors.iter().map(|a| vec![0; a.params.input_ports()]).collect();
        let mut out_ports: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut outputs = 0;
        let mut inputs = 0;
        for (i, c) in self.channels.iter().enumerate() {
            if c.id != i {
                return bad(format!("channel at position {i} has id {}", c.id));
            }
            if c.capacity == 0 {
                return bad(format!("channel {i} has zero capacity"));
            }
            match c.from {
                Endpoint::Input => inputs += 1,
                Endpoint::Output => return bad(format!("channel {i} is produced by the output")),
                Endpoint::Port { actor, port } => match out_ports.get_mut(actor) {
                    Some(p) => p.push(port),
                    None => return bad(format!("channel {i} from unknown actor {actor}")),
                },
            }
            match c.to {
                Endpoint::Output => outputs += 1,
                Endpoint::Input => return bad(format!("channel {i} feeds the input")),
                Endpoint::Port { actor, port } => match in_count.get_mut(actor).and_then(|p| p.get_mut(port)) {
                    Some(slot) => *slot += 1,
                    None => return bad(format!("channel {i} into unknown port {actor}:{port}")),
                },
            }
        }
        if inputs == 0 || outputs != 1 {
            return bad(format!("graph has {inputs} input and {outputs} output channels"));
        }
        for (a, ports) in in_count.iter().enumerate() {
            if let Some(p) = ports.iter().position(|&c| c != 1) {
                return bad(format!(
                    "port {p} of actor {} has {} producers",
                    self.actors[a].name, ports[p]
                ));
            }
        }
        for (a, ports) in out_ports.iter_mut().enumerate() {
            ports.sort();
            if ports.is_empty() || ports.iter().enumerate().any(|(i, &p)| i != p) {
                return bad(format!("actor {} has bad output ports {ports:?}", self.actors[a].name));
            }
        }

        // Kahn's algorithm over actors; everything must drain.
        let mut indeg: Vec<usize> = self.actors.iter().map(|a| a.params.input_ports()).collect();
        let mut succ: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut queue = VecDeque::new();
        for c in &self.channels {
            match (c.from, c.to) {
                (Endpoint::Port { actor: f, .. }, Endpoint::Port { actor: t, .. }) => succ[f].push(t),
                (Endpoint::Input, Endpoint::Port { actor: t, .. }) => {
                    indeg[t] -= 1;
                    if indeg[t] == 0 {
                        queue.push_back(t);
                    }
                }
                _ => {}
            }
        }
        let mut seen = 0;
        while let Some(a) = queue.pop_front() {
            seen += 1;
            for &t in &succ[a] {
                indeg[t] -= 1;
                if indeg[t] == 0 {
                    queue.push_back(t);
                }
            }
        }
        if seen != n {
            return bad(format!(
                "{} actors lie on a cycle or are unreachable from the input",
                n - seen
            ));
        }
        // Every actor reaches the output (reverse search).
        let mut reaches = vec![false; n];
        let mut stack: Vec<usize> = self
            .channels
            .iter()
            .filter_map(|c| match (c.from, c.to) {
                (Endpoint::Port { actor, .. }, Endpoint::Output) => Some(actor),
                _ => None,
            })
            .collect();
        let mut pred: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (f, ts) in succ.iter().enumerate() {
            for &t in ts {
                pred[t].push(f);
            }
        }
        while let Some(a) = stack.pop() {
            if !reaches[a] {
                reaches[a] = true;
                stack.extend(&pred[a]);
            }
        }
        if let Some(a) = reaches.iter().position(|r| !r) {
            return bad(format!("actor {} does not reach the output", self.actors[a].name));
        }
        Ok(())
    }
}

struct Builder {
    actors: Vec<Actor>,
    channels: Vec<Channel>,
    next_out_port: Vec<usize>,
}

impl Builder {
    fn actor(&mut self, name: String, params: ActorParams) -> usize {
        let id = self.actors.len();
        self.actors.push(Actor { id, name, params });
        self.next_out_port.push(0);
        id
    }

    fn connect(&mut self, from: Option<usize>, to: Option<(usize, usize)>, capacity: usize) {
        let from = match from {
            Some(a) => {
                let port = self.next_out_port[a];
                self.next_out_port[a] += 1;
                Endpoint::Port { actor: a, port }
            }
            None => Endpoint::Input,
        };
        let to = match to {
            Some((actor, port)) => Endpoint::Port { actor, port },
            None => Endpoint::Output,
        };
        let id = self.channels.len();
        self.channels.push(Channel { id, from, to, capacity });
    }
}

/// Dataflow graph of `net` for an `image_width x image_width` pixel stream.
///
/// Per conv layer `l`: `N(l-1) * N(l)` conv actors, `N(l)` sum and `N(l)`
/// ReLu actors; after layers 1 and 2 a poolH/poolV pair per channel; then
/// one fc and one argmax actor. FIFOs hold two rows of their stream.
pub fn build_actor_graph(net: &QuantizedNetwork, image_width: usize) -> ActorGraph {
    let ch = net.topology.channels();
    let sides = stage_sides(image_width);
    let mut b = Builder {
        actors: Vec::new(),
        channels: Vec::new(),
        next_out_port: Vec::new(),
    };
    // Producers feeding the current layer, one per input channel; None is the
    // external stream.
    let mut sources: Vec<Option<usize>> = vec![None; ch[0]];
    let mut last_relus = Vec::new();

    for l in 0..3 {
        let (cin, cout, side) = (ch[l], ch[l + 1], sides[l]);
        let layer = &net.conv[l];
        let lnum = l + 1;
        let convs: Vec<Vec<usize>> = (0..cin)
            .map(|i| {
                (0..cout)
                    .map(|o| {
                        let base = (i * cout + o) * 9;
                        let mut kernel = [0i32; 9];
                        kernel.copy_from_slice(&layer.weights[base..base + 9]);
                        b.actor(
                            format!("conv{lnum}_{i}_{o}"),
                            ActorParams::Conv {
                                layer: lnum,
                                input: i,
                                output: o,
                                kernel,
                                weight_format: layer.weight_format,
                                width: side,
                                height: side,
                                line_buffer: 2 * side,
                            },
                        )
                    })
                    .collect()
            })
            .collect();
        let sums: Vec<usize> = (0..cout)
            .map(|o| {
                b.actor(
                    format!("sum{lnum}_{o}"),
                    ActorParams::Sum {
                        layer: lnum,
                        neuron: o,
                        inputs: cin,
                        bias: layer.biases[o],
                        bias_format: layer.bias_format,
                    },
                )
            })
            .collect();
        let relus: Vec<usize> = (0..cout)
            .map(|o| b.actor(format!("relu{lnum}_{o}"), ActorParams::Relu { layer: lnum, neuron: o }))
            .collect();

        for (src, row) in sources.iter().zip(&convs) {
            for &conv in row {
                b.connect(*src, Some((conv, 0)), 2 * side);
            }
        }
        for o in 0..cout {
            for (i, row) in convs.iter().enumerate() {
                b.connect(Some(row[o]), Some((sums[o], i)), 2 * side);
            }
            b.connect(Some(sums[o]), Some((relus[o], 0)), 2 * side);
        }

        if l < 2 {
            let half = side / 2;
            sources = (0..cout)
                .map(|c| {
                    let ph = b.actor(
                        format!("poolH{lnum}_{c}"),
                        ActorParams::PoolH {
                            layer: lnum,
                            channel: c,
                            width: side,
                            height: side,
                        },
                    );
                    let pv = b.actor(
                        format!("poolV{lnum}_{c}"),
                        ActorParams::PoolV {
                            layer: lnum,
                            channel: c,
                            width: half,
                            height: side,
                        },
                    );
                    b.connect(Some(relus[c]), Some((ph, 0)), 2 * side);
                    b.connect(Some(ph), Some((pv, 0)), 2 * half.max(1));
                    Some(pv)
                })
                .collect();
        } else {
            last_relus = relus;
        }
    }

    let positions = sides[2] * sides[2];
    let fc = b.actor(
        "fc".into(),
        ActorParams::Fc {
            inputs: ch[3],
            positions,
            outputs: Topology::CLASSES,
            weights: net.fc.weights.clone(),
            weight_format: net.fc.weight_format,
            biases: net.fc.biases.clone(),
            bias_format: net.fc.bias_format,
        },
    );
    let argmax = b.actor(
        "argmax".into(),
        ActorParams::Argmax {
            classes: Topology::CLASSES,
        },
    );
    for (c, &r) in last_relus.iter().enumerate() {
        b.connect(Some(r), Some((fc, c)), 2 * sides[2].max(1));
    }
    b.connect(Some(fc), Some((argmax, 0)), Topology::CLASSES);
    b.connect(Some(argmax), None, 1);

    ActorGraph {
        input_side: image_width,
        actors: b.actors,
        channels: b.channels,
    }
}
