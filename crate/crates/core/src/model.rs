//! Network description shared by every stage of the flow: topology,
//! fixed-point formats, float and quantized parameter sets, and their JSON
//! documents.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn;

/// Version written into every network document.
pub const SCHEMA_VERSION: u32 = 1;

/// Side of the digit images the networks are trained on.
pub const DEFAULT_INPUT_SIDE: usize = 28;

/// Neuron counts of the three convolution layers.
///
/// Depth, kernel size, pooling and classifier width are fixed for this
/// network family; only the per-layer widths vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Topology {
    pub n1: usize,
    pub n2: usize,
    pub n3: usize,
}

impl Topology {
    pub const KERNEL: usize = 3;
    pub const POOL: usize = 2;
    pub const CLASSES: usize = 10;
    pub const INPUT_CHANNELS: usize = 1;

    pub fn new(n1: usize, n2: usize, n3: usize) -> Result<Self> {
        let t = Topology { n1, n2, n3 };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n1 == 0 || self.n2 == 0 || self.n3 == 0 {
            return Err(Error::Argument(format!("topology {self} has an empty layer")));
        }
        Ok(())
    }

    /// Channel counts `[N0, N1, N2, N3]` with `N0 = 1`.
    pub fn channels(&self) -> [usize; 4] {
        [Self::INPUT_CHANNELS, self.n1, self.n2, self.n3]
    }

    pub fn total_neurons(&self) -> usize {
        self.n1 + self.n2 + self.n3
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.n1, self.n2, self.n3)
    }
}

impl std::str::FromStr for Topology {
    type Err = Error;

    /// Parses `n1,n2,n3`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().trim_matches(['(', ')']).split(',').collect();
        if parts.len() != 3 {
            return Err(Error::Argument(format!("topology must be n1,n2,n3, got {s:?}")));
        }
        let mut n = [0usize; 3];
        for (slot, p) in n.iter_mut().zip(&parts) {
            *slot = p
                .trim()
                .parse()
                .map_err(|_| Error::Argument(format!("bad neuron count {p:?} in {s:?}")))?;
        }
        Topology::new(n[0], n[1], n[2])
    }
}

/// Side of the feature maps after each pooling stage: `[s, s/2, s/4]`.
pub fn stage_sides(input_side: usize) -> [usize; 3] {
    let s1 = input_side / Topology::POOL;
    [input_side, s1, s1 / Topology::POOL]
}

/// Number of inputs to the fully connected layer.
pub fn fc_input_size(topology: &Topology, input_side: usize) -> usize {
    let s = stage_sides(input_side)[2];
    topology.n3 * s * s
}

/// Dense row-major array of reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let t = Tensor {
            shape: shape.to_vec(),
            data,
        };
        t.check()?;
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn check(&self) -> Result<()> {
        let n: usize = self.shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Consistency(format!(
                "tensor of shape {:?} holds {} values",
                self.shape,
                self.data.len()
            )));
        }
        Ok(())
    }
}

/// Signed fixed-point format: `value = code * 2^exponent`, `bits` wide
/// including the sign.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FixedPointFormat {
    pub bits: u32,
    pub exponent: i32,
}

impl FixedPointFormat {
    pub const MIN_BITS: u32 = 2;
    pub const MAX_BITS: u32 = 16;

    pub fn new(bits: u32, exponent: i32) -> Result<Self> {
        check_bits(bits)?;
        Ok(FixedPointFormat { bits, exponent })
    }

    pub fn min_code(&self) -> i64 {
        -(1i64 << (self.bits - 1))
    }

    pub fn max_code(&self) -> i64 {
        (1i64 << (self.bits - 1)) - 1
    }

    pub fn contains(&self, code: i64) -> bool {
        (self.min_code()..=self.max_code()).contains(&code)
    }

    pub fn step(&self) -> f64 {
        2f64.powi(self.exponent)
    }

    pub fn real_value(&self, code: i64) -> Result<f64> {
        if !self.contains(code) {
            return Err(Error::Range {
                code,
                min: self.min_code(),
                max: self.max_code(),
            });
        }
        Ok(code as f64 * self.step())
    }
}

pub fn check_bits(bits: u32) -> Result<()> {
    if !(FixedPointFormat::MIN_BITS..=FixedPointFormat::MAX_BITS).contains(&bits) {
        return Err(Error::Argument(format!(
            "bit width {bits} outside [{}, {}]",
            FixedPointFormat::MIN_BITS,
            FixedPointFormat::MAX_BITS
        )));
    }
    Ok(())
}

/// Free-function form of [`FixedPointFormat::real_value`].
pub fn real_value(code: i64, fmt: FixedPointFormat) -> Result<f64> {
    fmt.real_value(code)
}

/// Largest activation seen at the network input and after each ReLU,
/// measured with the float network on a calibration subset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivationStats {
    /// `[input, relu1, relu2, relu3]`
    pub max: [f64; 4],
    pub images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloatNetwork {
    pub topology: Topology,
    pub input_side: usize,
    /// Layer `l` is shaped `[N(l-1), N(l), 3, 3]`.
    pub conv_weights: [Tensor; 3],
    pub conv_biases: [Vec<f64>; 3],
    /// Shaped `[10, N3 * s * s]`, inputs flattened channel-major.
    pub fc_weights: Tensor,
    pub fc_biases: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation_stats: Option<ActivationStats>,
}

impl FloatNetwork {
    pub fn zeros(topology: Topology, input_side: usize) -> Self {
        let ch = topology.channels();
        let k = Topology::KERNEL;
        let conv_weights = [0, 1, 2].map(|l| Tensor::zeros(&[ch[l], ch[l + 1], k, k]));
        let conv_biases = [0, 1, 2].map(|l| vec![0.0; ch[l + 1]]);
        FloatNetwork {
            topology,
            input_side,
            conv_weights,
            conv_biases,
            fc_weights: Tensor::zeros(&[Topology::CLASSES, fc_input_size(&topology, input_side)]),
            fc_biases: vec![0.0; Topology::CLASSES],
            activation_stats: None,
        }
    }

    /// Checks every tensor against the topology and that all values are finite.
    pub fn validate(&self) -> Result<()> {
        self.topology.validate()?;
        let expected = FloatNetwork::zeros(self.topology, self.input_side);
        for l in 0..3 {
            self.conv_weights[l].check()?;
            if self.conv_weights[l].shape != expected.conv_weights[l].shape
                || self.conv_biases[l].len() != expected.conv_biases[l].len()
            {
                return Err(Error::Consistency(format!(
                    "conv layer {} does not match topology {}",
                    l + 1,
                    self.topology
                )));
            }
        }
        self.fc_weights.check()?;
        if self.fc_weights.shape != expected.fc_weights.shape || self.fc_biases.len() != Topology::CLASSES {
            return Err(Error::Consistency(format!(
                "fc layer does not match topology {} at input side {}",
                self.topology, self.input_side
            )));
        }
        let finite = self.parameters().all(|p| p.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::Consistency("network holds non-finite values".into()));
        }
        Ok(())
    }

    /// All parameter groups in a fixed order: conv weights/biases per layer,
    /// then fc weights, fc biases.
    pub fn parameters(&self) -> impl Iterator<Item = &[f64]> {
        (0..3)
            .flat_map(move |l| [&self.conv_weights[l].data[..], &self.conv_biases[l][..]])
            .chain([&self.fc_weights.data[..], &self.fc_biases[..]])
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        let [w0, w1, w2] = &mut self.conv_weights;
        let [b0, b1, b2] = &mut self.conv_biases;
        vec![
            &mut w0.data[..],
            &mut b0[..],
            &mut w1.data[..],
            &mut b1[..],
            &mut w2.data[..],
            &mut b2[..],
            &mut self.fc_weights.data[..],
            &mut self.fc_biases[..],
        ]
    }

    /// Float logits (pre-softmax) for one `side x side` image.
    pub fn logits(&self, pixels: &[f64]) -> Vec<f64> {
        nn::forward(self, pixels).logits
    }

    pub fn predict(&self, pixels: &[f64]) -> usize {
        argmax(&self.logits(pixels))
    }

    pub fn to_json(&self) -> Result<String> {
        to_document("float_network", self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let net: FloatNetwork = from_document("float_network", text)?;
        net.validate()?;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_json()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&read_text(path)?)
    }
}

/// One layer of integer parameter codes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedLayer {
    pub weight_shape: Vec<usize>,
    pub weights: Vec<i32>,
    pub weight_format: FixedPointFormat,
    pub biases: Vec<i32>,
    pub bias_format: FixedPointFormat,
}

impl QuantizedLayer {
    fn validate(&self, name: &str) -> Result<()> {
        let n: usize = self.weight_shape.iter().product();
        if n != self.weights.len() {
            return Err(Error::Consistency(format!(
                "{name}: shape {:?} but {} weight codes",
                self.weight_shape,
                self.weights.len()
            )));
        }
        for (codes, fmt) in [(&self.weights, self.weight_format), (&self.biases, self.bias_format)] {
            check_bits(fmt.bits)?;
            if let Some(&c) = codes.iter().find(|&&c| !fmt.contains(c as i64)) {
                return Err(Error::Range {
                    code: c as i64,
                    min: fmt.min_code(),
                    max: fmt.max_code(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedNetwork {
    pub topology: Topology,
    pub input_side: usize,
    pub bits: u32,
    /// Same layout as [`FloatNetwork::conv_weights`].
    pub conv: [QuantizedLayer; 3],
    pub fc: QuantizedLayer,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation_stats: Option<ActivationStats>,
}

impl QuantizedNetwork {
    pub fn validate(&self) -> Result<()> {
        self.topology.validate()?;
        check_bits(self.bits)?;
        let reference = FloatNetwork::zeros(self.topology, self.input_side);
        for (l, layer) in self.conv.iter().enumerate() {
            layer.validate(&format!("conv{}", l + 1))?;
            if layer.weight_shape != reference.conv_weights[l].shape
                || layer.biases.len() != reference.conv_biases[l].len()
            {
                return Err(Error::Consistency(format!(
                    "conv{} does not match topology {}",
                    l + 1,
                    self.topology
                )));
            }
        }
        self.fc.validate("fc")?;
        if self.fc.weight_shape != reference.fc_weights.shape || self.fc.biases.len() != Topology::CLASSES {
            return Err(Error::Consistency("fc layer does not match topology".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        to_document("quantized_network", self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let net: QuantizedNetwork = from_document("quantized_network", text)?;
        net.validate()?;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_json()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&read_text(path)?)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Serialize)]
struct DocumentOut<'a, T> {
    schema_version: u32,
    kind: &'a str,
    #[serde(flatten)]
    body: &'a T,
}

#[derive(Deserialize)]
struct DocumentIn<T> {
    schema_version: u32,
    kind: String,
    #[serde(flatten)]
    body: T,
}

pub(crate) fn to_document<T: Serialize>(kind: &str, body: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(&DocumentOut {
        schema_version: SCHEMA_VERSION,
        kind,
        body,
    })?;
    s.push('\n');
    Ok(s)
}

pub(crate) fn from_document<T: serde::de::DeserializeOwned>(kind: &str, text: &str) -> Result<T> {
    let doc: DocumentIn<T> = serde_json::from_str(text)?;
    if doc.schema_version != SCHEMA_VERSION {
        return Err(Error::Consistency(format!(
            "unsupported schema_version {} (expected {SCHEMA_VERSION})",
            doc.schema_version
        )));
    }
    if doc.kind != kind {
        return Err(Error::Consistency(format!(
            "expected a {kind} document, found {}",
            doc.kind
        )));
    }
    Ok(doc.body)
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
