use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::LabeledImage;
use crate::error::{Error, Result};

use super::graph::{ActorGraph, ActorParams, Endpoint};
use super::DatapathConfig;

/// Order in which ready actors are fired. Any policy yields the same tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchedulePolicy {
    /// Each sweep fires every actor at most once, source first, in id order.
    RoundRobin,
    /// Sweeps actors from the sink backwards, firing each until it blocks.
    ReverseGreedy,
    /// Each sweep fires every actor at most once in a seeded random order.
    Random(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamRun {
    pub class: usize,
    /// Accumulators emitted by the fc actor, in class order.
    pub fc_outputs: Vec<i64>,
    /// Tokens that went through each channel, indexed by channel id.
    pub channel_tokens: Vec<u64>,
    pub firings: u64,
}

struct Fifo {
    buf: VecDeque<i64>,
    capacity: usize,
    pushed: u64,
}

impl Fifo {
    fn has_space(&self) -> bool {
        self.buf.len() < self.capacity
    }
}

enum State {
    Conv {
        kernel: [i64; 9],
        width: usize,
        height: usize,
        /// Sliding window over the raster: the two previous rows plus the
        /// 3x3 window taps.
        window: VecDeque<i64>,
        window_cap: usize,
        /// Raster index of `window[0]`.
        base: usize,
        received: usize,
        emitted: usize,
    },
    Sum {
        bias: i64,
    },
    Relu {
        from: i32,
        to: i32,
    },
    PoolH {
        width: usize,
        count: usize,
        held: i64,
    },
    PoolV {
        width: usize,
        height: usize,
        count: usize,
        row: Vec<i64>,
    },
    Fc {
        positions: usize,
        weights: Vec<i64>,
        acc: Vec<i64>,
        consumed: usize,
        emitted: usize,
    },
    Argmax {
        classes: usize,
        seen: usize,
        best: (i64, usize),
        done: bool,
    },
}

struct Node {
    name: String,
    stage: String,
    state: State,
    ins: Vec<usize>,
    outs: Vec<usize>,
}

fn can_push(fifos: &[Fifo], outs: &[usize]) -> bool {
    outs.iter().all(|&c| fifos[c].has_space())
}

fn push(fifos: &mut [Fifo], outs: &[usize], v: i64) {
    for &c in outs {
        fifos[c].buf.push_back(v);
        fifos[c].pushed += 1;
    }
}

impl Node {
    /// Performs at most one firing; returns whether anything moved.
    fn fire(&mut self, fifos: &mut [Fifo], dp: &DatapathConfig, fc_log: &mut Vec<i64>) -> Result<bool> {
        let ins = &self.ins;
        let outs = &self.outs;
        match &mut self.state {
            State::Conv {
                kernel,
                width,
                height,
                window,
                window_cap,
                base,
                received,
                emitted,
            } => {
                let (w, h) = (*width, *height);
                if *emitted < w * h {
                    let (y, x) = (*emitted / w, *emitted % w);
                    let last_needed = (y + 1).min(h - 1) * w + (x + 1).min(w - 1);
                    if *received > last_needed {
                        if !can_push(fifos, outs) {
                            return Ok(false);
                        }
                        let mut acc = 0i64;
                        for (t, &k) in kernel.iter().enumerate() {
                            let sy = y as isize + (t / 3) as isize - 1;
                            let sx = x as isize + (t % 3) as isize - 1;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            let idx = sy as usize * w + sx as usize;
                            acc = dp.mac(acc, k, window[idx - *base], &self.stage)?;
                        }
                        push(fifos, outs, acc);
                        *emitted += 1;
                        // Drop what no later output can reach.
                        if *emitted < w * h {
                            let (ny, nx) = (*emitted / w, *emitted % w);
                            // Row 0 stays whole until row 1 starts.
                            let oldest = if ny == 0 {
                                0
                            } else {
                                (ny - 1) * w + nx.saturating_sub(1)
                            };
                            while *base < oldest && !window.is_empty() {
                                window.pop_front();
                                *base += 1;
                            }
                        } else {
                            *base += window.len();
                            window.clear();
                        }
                        return Ok(true);
                    }
                }
                if *received < w * h && window.len() < *window_cap {
                    if let Some(v) = fifos[ins[0]].buf.pop_front() {
                        window.push_back(v);
                        *received += 1;
                        return Ok(true);
                    }
                }
                Ok(false)
            }
            State::Sum { bias } => {
                if !ins.iter().all(|&c| !fifos[c].buf.is_empty()) || !can_push(fifos, outs) {
                    return Ok(false);
                }
                let mut acc = *bias;
                for &c in ins {
                    let v = fifos[c].buf.pop_front().unwrap();
                    acc = dp.mac(acc, 1, v, &self.stage)?;
                }
                push(fifos, outs, acc);
                Ok(true)
            }
            State::Relu { from, to } => {
                if fifos[ins[0]].buf.is_empty() || !can_push(fifos, outs) {
                    return Ok(false);
                }
                let v = fifos[ins[0]].buf.pop_front().unwrap();
                push(fifos, outs, dp.requantize(v, *from, *to));
                Ok(true)
            }
            State::PoolH { width, count, held } => {
                let Some(&v) = fifos[ins[0]].buf.front() else {
                    return Ok(false);
                };
                let x = *count % *width;
                let pairs = *width / 2;
                if x < 2 * pairs && x % 2 == 1 {
                    if !can_push(fifos, outs) {
                        return Ok(false);
                    }
                    push(fifos, outs, (*held).max(v));
                } else {
                    *held = v;
                }
                fifos[ins[0]].buf.pop_front();
                *count += 1;
                Ok(true)
            }
            State::PoolV {
                width,
                height,
                count,
                row,
            } => {
                let Some(&v) = fifos[ins[0]].buf.front() else {
                    return Ok(false);
                };
                let (y, x) = (*count / *width, *count % *width);
                if y < 2 * (*height / 2) {
                    if y % 2 == 1 {
                        if !can_push(fifos, outs) {
                            return Ok(false);
                        }
                        push(fifos, outs, row[x].max(v));
                    } else {
                        row[x] = v;
                    }
                }
                fifos[ins[0]].buf.pop_front();
                *count += 1;
                Ok(true)
            }
            State::Fc {
                positions,
                weights,
                acc,
                consumed,
                emitted,
            } => {
                if *consumed < *positions {
                    if !ins.iter().all(|&c| !fifos[c].buf.is_empty()) {
                        return Ok(false);
                    }
                    let fan_in = ins.len() * *positions;
                    for (c, &ch) in ins.iter().enumerate() {
                        let a = fifos[ch].buf.pop_front().unwrap();
                        for (k, slot) in acc.iter_mut().enumerate() {
                            let w = weights[k * fan_in + c * *positions + *consumed];
                            *slot = dp.mac(*slot, w, a, &self.stage)?;
                        }
                    }
                    *consumed += 1;
                    return Ok(true);
                }
                if *emitted < acc.len() && can_push(fifos, outs) {
                    push(fifos, outs, acc[*emitted]);
                    fc_log.push(acc[*emitted]);
                    *emitted += 1;
                    return Ok(true);
                }
                Ok(false)
            }
            State::Argmax {
                classes,
                seen,
                best,
                done,
            } => {
                if *done {
                    return Ok(false);
                }
                if *seen == *classes {
                    if !can_push(fifos, outs) {
                        return Ok(false);
                    }
                    push(fifos, outs, best.1 as i64);
                    *done = true;
                    return Ok(true);
                }
                let Some(v) = fifos[ins[0]].buf.pop_front() else {
                    return Ok(false);
                };
                if *seen == 0 || v > best.0 {
                    *best = (v, *seen);
                }
                *seen += 1;
                Ok(true)
            }
        }
    }

    fn finished(&self) -> bool {
        match &self.state {
            State::Conv {
                width, height, emitted, ..
            } => *emitted == width * height,
            State::Fc { acc, emitted, .. } => *emitted == acc.len(),
            State::Argmax { done, .. } => *done,
            _ => true,
        }
    }
}

struct Source {
    codes: Vec<i64>,
    next: usize,
    outs: Vec<usize>,
}

impl Source {
    fn fire(&mut self, fifos: &mut [Fifo]) -> bool {
        if self.next < self.codes.len() && can_push(fifos, &self.outs) {
            push(fifos, &self.outs, self.codes[self.next]);
            self.next += 1;
            return true;
        }
        false
    }
}

fn instantiate(graph: &ActorGraph, dp: &DatapathConfig) -> Result<Vec<Node>> {
    let e = dp.activation_exponents;
    // Accumulator exponent of each conv layer (1-based index).
    let mut acc_exp = [None::<i32>; 4];
    for a in &graph.actors {
        if let ActorParams::Conv {
            layer, weight_format, ..
        } = &a.params
        {
            if !(1..=3).contains(layer) {
                return Err(Error::Consistency(format!("conv actor {} in layer {layer}", a.name)));
            }
            let exp = e[layer - 1] + weight_format.exponent;
            match acc_exp[*layer] {
                Some(x) if x != exp => {
                    return Err(Error::Consistency(format!(
                        "conv actors of layer {layer} disagree on the weight format"
                    )))
                }
                _ => acc_exp[*layer] = Some(exp),
            }
        }
    }
    let layer_exp = |layer: usize, name: &str| {
        acc_exp
            .get(layer)
            .copied()
            .flatten()
            .ok_or_else(|| Error::Consistency(format!("actor {name} refers to layer {layer} without conv actors")))
    };

    let ins = graph.input_channels();
    let outs = graph.output_channels();
    graph
        .actors
        .iter()
        .map(|a| {
            let state = match &a.params {
                ActorParams::Conv {
                    kernel, width, height, ..
                } => State::Conv {
                    kernel: kernel.map(|k| k as i64),
                    width: *width,
                    height: *height,
                    window: VecDeque::with_capacity(2 * width + 3),
                    window_cap: 2 * width + 3,
                    base: 0,
                    received: 0,
                    emitted: 0,
                },
                ActorParams::Sum {
                    layer,
                    bias,
                    bias_format,
                    ..
                } => State::Sum {
                    bias: dp.align_bias(*bias as i64, bias_format.exponent, layer_exp(*layer, &a.name)?, &a.name)?,
                },
                ActorParams::Relu { layer, .. } => State::Relu {
                    from: layer_exp(*layer, &a.name)?,
                    to: e[*layer],
                },
                ActorParams::PoolH { width, .. } => State::PoolH {
                    width: *width,
                    count: 0,
                    held: 0,
                },
                ActorParams::PoolV { width, height, .. } => State::PoolV {
                    width: *width,
                    height: *height,
                    count: 0,
                    row: vec![0; *width],
                },
                ActorParams::Fc {
                    positions,
                    weights,
                    weight_format,
                    biases,
                    bias_format,
                    ..
                } => {
                    let exp = e[3] + weight_format.exponent;
                    State::Fc {
                        positions: *positions,
                        weights: weights.iter().map(|&w| w as i64).collect(),
                        acc: biases
                            .iter()
                            .map(|&b| dp.align_bias(b as i64, bias_format.exponent, exp, &a.name))
                            .collect::<Result<_>>()?,
                        consumed: 0,
                        emitted: 0,
                    }
                }
                ActorParams::Argmax { classes } => State::Argmax {
                    classes: *classes,
                    seen: 0,
                    best: (0, 0),
                    done: false,
                },
            };
            Ok(Node {
                name: a.name.clone(),
                stage: a.name.clone(),
                state,
                ins: ins[a.id].clone(),
                outs: outs[a.id].clone(),
            })
        })
        .collect()
}

pub fn simulate_stream(graph: &ActorGraph, dp: &DatapathConfig, image: &LabeledImage) -> Result<usize> {
    simulate_stream_with(graph, dp, image, SchedulePolicy::RoundRobin).map(|r| r.class)
}

/// Streams `image` in raster order through `graph` until no actor can fire.
pub fn simulate_stream_with(
    graph: &ActorGraph,
    dp: &DatapathConfig,
    image: &LabeledImage,
    policy: SchedulePolicy,
) -> Result<StreamRun> {
    graph.validate()?;
    if image.side() != graph.input_side {
        return Err(Error::Argument(format!(
            "image side {} does not match graph input side {}",
            image.side(),
            graph.input_side
        )));
    }
    let mut fifos: Vec<Fifo> = graph
        .channels
        .iter()
        .map(|c| Fifo {
            buf: VecDeque::with_capacity(c.capacity),
            capacity: c.capacity,
            pushed: 0,
        })
        .collect();
    let mut nodes = instantiate(graph, dp)?;
    let mut source = Source {
        codes: image.pixels.data.iter().map(|&p| dp.input_code(p)).collect(),
        next: 0,
        outs: graph
            .channels
            .iter()
            .filter(|c| c.from == Endpoint::Input)
            .map(|c| c.id)
            .collect(),
    };
    let output = graph
        .channels
        .iter()
        .find(|c| c.to == Endpoint::Output)
        .map(|c| c.id)
        .expect("validated graph has an output");

    let n = nodes.len();
    let mut firings = 0u64;
    let mut fc_log = Vec::new();
    let mut rng = match policy {
        SchedulePolicy::Random(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
        _ => None,
    };
    // Index n stands for the source.
    let mut order: Vec<usize> = (0..=n).collect();
    loop {
        let mut progress = false;
        match policy {
            SchedulePolicy::RoundRobin => {
                if source.fire(&mut fifos) {
                    firings += 1;
                    progress = true;
                }
                for node in nodes.iter_mut() {
                    if node.fire(&mut fifos, dp, &mut fc_log)? {
                        firings += 1;
                        progress = true;
                    }
                }
            }
            SchedulePolicy::ReverseGreedy => {
                for node in nodes.iter_mut().rev() {
                    while node.fire(&mut fifos, dp, &mut fc_log)? {
                        firings += 1;
                        progress = true;
                    }
                }
                while source.fire(&mut fifos) {
                    firings += 1;
                    progress = true;
                }
            }
            SchedulePolicy::Random(_) => {
                order.shuffle(rng.as_mut().unwrap());
                for &i in &order {
                    let fired = if i == n {
                        source.fire(&mut fifos)
                    } else {
                        nodes[i].fire(&mut fifos, dp, &mut fc_log)?
                    };
                    if fired {
                        firings += 1;
                        progress = true;
                    }
                }
            }
        }
        if !progress {
            break;
        }
    }

    let drained = fifos.iter().enumerate().all(|(i, f)| i == output || f.buf.is_empty());
    let out = &fifos[output].buf;
    if out.len() != 1 || !drained || source.next < source.codes.len() || !nodes.iter().all(Node::finished) {
        let blocked = nodes
            .iter()
            .filter(|nd| !nd.finished() || nd.ins.iter().any(|&c| !fifos[c].buf.is_empty()))
            .map(|nd| nd.name.clone())
            .collect();
        return Err(Error::Deadlock { blocked });
    }
    Ok(StreamRun {
        class: out[0] as usize,
        fc_outputs: fc_log,
        channel_tokens: fifos.iter().map(|f| f.pushed).collect(),
        firings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::{build_actor_graph, reference_trace};
    use crate::model::{FloatNetwork, QuantizedNetwork, Topology};
    use crate::quantizer::quantize;
    use crate::trainer::initialize;
    use rand::Rng;

    fn dp() -> DatapathConfig {
        DatapathConfig {
            activation_bits: 8,
            accumulator_bits: 32,
            activation_exponents: [-7, -5, -4, -3],
        }
    }

    fn random_image(side: usize, seed: u64) -> LabeledImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px = (0..side * side).map(|_| rng.random_range(0.0..1.0)).collect();
        LabeledImage::new(side, px, 0).unwrap()
    }

    fn qnet(t: Topology, side: usize, bits: u32, seed: u64) -> QuantizedNetwork {
        let mut net = initialize(t, side, seed);
        for (i, b) in net.conv_biases.iter_mut().flatten().enumerate() {
            *b = ((i * 7 % 5) as f64 - 2.0) * 0.05;
        }
        quantize(&net, bits).unwrap()
    }

    #[test]
    fn zero_image_gives_class_zero_and_side_squared_tokens() {
        let net = quantize(&FloatNetwork::zeros(Topology::new(2, 3, 4).unwrap(), 28), 5).unwrap();
        let g = build_actor_graph(&net, 28);
        let img = LabeledImage::new(28, vec![0.0; 784], 3).unwrap();
        let run = simulate_stream_with(&g, &dp(), &img, SchedulePolicy::RoundRobin).unwrap();
        assert_eq!(run.class, 0);
        for c in g.channels.iter().filter(|c| c.from == Endpoint::Input) {
            assert_eq!(run.channel_tokens[c.id], 784);
        }
        let out = g.channels.iter().find(|c| c.to == Endpoint::Output).unwrap();
        assert_eq!(run.channel_tokens[out.id], 1);
    }

    #[test]
    fn matches_reference_on_odd_sides() {
        // 9 -> 4 -> 2 exercises the floor rule in both pool actors
        for side in [9, 12, 28] {
            let net = qnet(Topology::new(2, 3, 2).unwrap(), side, 5, side as u64);
            let g = build_actor_graph(&net, side);
            for s in 0..3 {
                let img = random_image(side, s);
                let reference = reference_trace(&net, &dp(), &img).unwrap();
                let run = simulate_stream_with(&g, &dp(), &img, SchedulePolicy::RoundRobin).unwrap();
                assert_eq!(run.fc_outputs, reference.fc, "side {side}");
                assert_eq!(run.class, reference.class());
            }
        }
    }

    #[test]
    fn schedule_does_not_change_result() {
        let net = qnet(Topology::new(3, 5, 7).unwrap(), 28, 3, 4);
        let g = build_actor_graph(&net, 28);
        let img = random_image(28, 9);
        let runs: Vec<_> = [
            SchedulePolicy::RoundRobin,
            SchedulePolicy::ReverseGreedy,
            SchedulePolicy::Random(17),
        ]
        .into_iter()
        .map(|p| simulate_stream_with(&g, &dp(), &img, p).unwrap())
        .collect();
        for r in &runs[1..] {
            assert_eq!(r.fc_outputs, runs[0].fc_outputs);
            assert_eq!(r.channel_tokens, runs[0].channel_tokens);
        }
    }

    #[test]
    fn starved_actor_reports_deadlock() {
        let net = qnet(Topology::new(2, 2, 2).unwrap(), 8, 5, 1);
        let mut g = build_actor_graph(&net, 8);
        let img = random_image(8, 2);
        for c in &mut g.channels {
            c.capacity = 1;
        }
        // single-slot FIFOs slow the stream down but cannot block it
        assert!(simulate_stream(&g, &dp(), &img).is_ok());
        for a in &mut g.actors {
            if let ActorParams::Fc {
                positions,
                weights,
                inputs,
                ..
            } = &mut a.params
            {
                *positions += 1;
                *weights = vec![0; 10 * *inputs * *positions];
            }
        }
        match simulate_stream(&g, &dp(), &img) {
            Err(Error::Deadlock { blocked }) => assert!(blocked.iter().any(|b| b.starts_with("fc"))),
            other => panic!("expected deadlock, got {other:?}"),
        }
    }
}
