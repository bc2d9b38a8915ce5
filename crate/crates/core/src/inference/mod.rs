//! Bit-true integer inference.
//!
//! Two backends compute the same function: [`forward_reference`] walks whole
//! feature maps layer by layer, [`simulate_stream`] pushes a raster pixel
//! stream through the actor graph built by [`build_actor_graph`]. Both share
//! only the scalar arithmetic defined here (input coding, bias alignment,
//! requantization, overflow checks).

mod graph;
mod reference;
mod stream;

pub use graph::{build_actor_graph, Actor, ActorGraph, ActorKind, ActorParams, Channel, Endpoint};
pub use reference::{forward_reference, reference_trace, ReferenceTrace};
pub use stream::{simulate_stream, simulate_stream_with, SchedulePolicy, StreamRun};

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, LabeledImage};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::{stage_sides, ActivationStats, QuantizedNetwork, Topology};

pub const DEFAULT_ACTIVATION_BITS: u32 = 8;
pub const DEFAULT_ACCUMULATOR_BITS: u32 = 32;

/// Integer datapath: unsigned activation codes, signed accumulators, and the
/// power-of-two scale of each activation stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatapathConfig {
    pub activation_bits: u32,
    pub accumulator_bits: u32,
    /// `[input, relu1, relu2, relu3]`: activation value = code * 2^exponent.
    pub activation_exponents: [i32; 4],
}

impl DatapathConfig {
    /// Picks each stage's exponent as the smallest one whose largest code
    /// covers the measured maximum.
    pub fn calibrate(stats: &ActivationStats, activation_bits: u32, accumulator_bits: u32) -> Result<Self> {
        if !(1..=30).contains(&activation_bits) {
            return Err(Error::Argument(format!(
                "activation width {activation_bits} outside 1..=30"
            )));
        }
        if !(2..=63).contains(&accumulator_bits) {
            return Err(Error::Argument(format!(
                "accumulator width {accumulator_bits} outside 2..=63"
            )));
        }
        let qmax = ((1u64 << activation_bits) - 1) as f64;
        let exponents = stats.max.map(|max| {
            if !(max > 0.0 && max.is_finite()) {
                return 0;
            }
            let fits = |e: i32| max <= qmax * 2f64.powi(e);
            let mut e = (max / qmax).log2().ceil() as i32;
            while !fits(e) {
                e += 1;
            }
            while fits(e - 1) {
                e -= 1;
            }
            e
        });
        Ok(DatapathConfig {
            activation_bits,
            accumulator_bits,
            activation_exponents: exponents,
        })
    }

    /// Calibrates from the activation statistics carried by `net`.
    pub fn for_network(net: &QuantizedNetwork, activation_bits: u32, accumulator_bits: u32) -> Result<Self> {
        let stats = net
            .activation_stats
            .as_ref()
            .ok_or_else(|| Error::Argument("network carries no activation statistics; calibrate it first".into()))?;
        let dp = Self::calibrate(stats, activation_bits, accumulator_bits)?;
        dp.validate(net)?;
        Ok(dp)
    }

    /// Accumulator width that rules out overflow of any product sum for this
    /// network: activation bits + parameter bits + ceil(log2(max fan-in)).
    pub fn required_accumulator_bits(topology: &Topology, input_side: usize, bits: u32, activation_bits: u32) -> u32 {
        let ch = topology.channels();
        let conv_fan_in = 9 * ch[..3].iter().max().copied().unwrap_or(1);
        let s = stage_sides(input_side)[2];
        let fan_in = conv_fan_in.max(topology.n3 * s * s).max(1);
        activation_bits + bits + (fan_in as f64).log2().ceil() as u32
    }

    pub fn validate(&self, net: &QuantizedNetwork) -> Result<()> {
        let need = Self::required_accumulator_bits(&net.topology, net.input_side, net.bits, self.activation_bits);
        if self.accumulator_bits < need {
            return Err(Error::Argument(format!(
                "accumulator of {} bits is narrower than the {need} bits needed for {} at B={}",
                self.accumulator_bits, net.topology, net.bits
            )));
        }
        Ok(())
    }

    fn max_activation(&self) -> i64 {
        (1i64 << self.activation_bits) - 1
    }

    pub(crate) fn check(&self, value: i64, stage: &str) -> Result<i64> {
        let lim = 1i64 << (self.accumulator_bits - 1);
        if value < -lim || value >= lim {
            return Err(Error::Overflow {
                stage: stage.to_string(),
                value,
                bits: self.accumulator_bits,
            });
        }
        Ok(value)
    }

    /// Checked accumulate.
    #[inline]
    pub(crate) fn mac(&self, acc: i64, w: i64, a: i64, stage: &str) -> Result<i64> {
        let v = w
            .checked_mul(a)
            .and_then(|p| acc.checked_add(p))
            .ok_or_else(|| Error::Overflow {
                stage: stage.to_string(),
                value: i64::MAX,
                bits: self.accumulator_bits,
            })?;
        self.check(v, stage)
    }

    /// Pixel in `[0, 1]` to an input activation code.
    pub fn input_code(&self, pixel: f64) -> i64 {
        let scaled = (pixel / 2f64.powi(self.activation_exponents[0])).round();
        scaled.clamp(0.0, self.max_activation() as f64) as i64
    }

    /// Rescales a non-negative accumulator with exponent `from` to an
    /// activation code with exponent `to` (round half up, saturate).
    pub(crate) fn requantize(&self, acc: i64, from: i32, to: i32) -> i64 {
        let acc = acc.max(0);
        let shift = to - from;
        let v = if shift > 0 {
            if shift >= 63 {
                0
            } else {
                (acc + (1i64 << (shift - 1))) >> shift
            }
        } else {
            let s = (-shift) as u32;
            if s >= 63 || acc > (i64::MAX >> s) {
                i64::MAX
            } else {
                acc << s
            }
        };
        v.min(self.max_activation())
    }

    /// Bias code with exponent `from` expressed in accumulator units of
    /// exponent `to`; right shifts round half away from zero.
    pub(crate) fn align_bias(&self, code: i64, from: i32, to: i32, stage: &str) -> Result<i64> {
        let shift = from - to;
        let v = if shift >= 0 {
            let s = shift as u32;
            if code != 0 && (s >= 63 || code.abs() > (i64::MAX >> s)) {
                return Err(Error::Overflow {
                    stage: stage.to_string(),
                    value: code,
                    bits: self.accumulator_bits,
                });
            }
            code << s
        } else {
            let s = (-shift) as u32;
            if s >= 63 {
                0
            } else {
                code.signum() * ((code.abs() + (1i64 << (s - 1))) >> s)
            }
        };
        self.check(v, stage)
    }
}

/// Which backend computes the prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    #[default]
    Reference,
    Stream,
}

/// Predicted class for every image, in dataset order.
pub fn predict_all(
    net: &QuantizedNetwork,
    dp: &DatapathConfig,
    data: &Dataset,
    backend: Backend,
    exec: Execution,
) -> Result<Vec<usize>> {
    dp.validate(net)?;
    let graph = match backend {
        Backend::Stream => Some(build_actor_graph(net, net.input_side)),
        Backend::Reference => None,
    };
    exec.map(&data.images, |img: &LabeledImage| match &graph {
        Some(g) => simulate_stream(g, dp, img),
        None => forward_reference(net, dp, img),
    })
    .into_iter()
    .collect()
}

/// Top-1 accuracy of the integer reference pass.
pub fn evaluate_tpr(net: &QuantizedNetwork, dp: &DatapathConfig, data: &Dataset) -> Result<f64> {
    evaluate_tpr_with(net, dp, data, Execution::Parallel)
}

pub fn evaluate_tpr_with(net: &QuantizedNetwork, dp: &DatapathConfig, data: &Dataset, exec: Execution) -> Result<f64> {
    data.ensure_non_empty()?;
    let preds = predict_all(net, dp, data, Backend::Reference, exec)?;
    Ok(accuracy(&preds, data))
}

pub fn accuracy(predictions: &[usize], data: &Dataset) -> f64 {
    let hits = predictions
        .iter()
        .zip(&data.images)
        .filter(|(p, img)| **p == img.label as usize)
        .count();
    hits as f64 / data.len().max(1) as f64
}
