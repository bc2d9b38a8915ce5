//! Mini-batch SGD with momentum on softmax cross-entropy.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, LabeledImage};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::{argmax, ActivationStats, FloatNetwork, Topology};
use crate::nn;

/// Images used to record activation ranges after training.
pub const CALIBRATION_IMAGES: usize = 100;

/// Mean epoch loss above which training is considered to have diverged; a
/// uniform guess over ten classes costs ln 10.
const DIVERGED_LOSS: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 15,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Argument("epochs and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Argument(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Argument(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        Ok(())
    }
}

/// Parameter gradients, one group per entry of [`FloatNetwork::parameters`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub groups: Vec<Vec<f64>>,
}

impl Gradients {
    pub const GROUP_NAMES: [&'static str; 8] = [
        "conv1.weights",
        "conv1.biases",
        "conv2.weights",
        "conv2.biases",
        "conv3.weights",
        "conv3.biases",
        "fc.weights",
        "fc.biases",
    ];

    pub fn zeros_like(net: &FloatNetwork) -> Self {
        Gradients {
            groups: net.parameters().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    fn add(&mut self, other: &Gradients) {
        for (a, b) in self.groups.iter_mut().zip(&other.groups) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    fn scale(&mut self, s: f64) {
        self.groups.iter_mut().flatten().for_each(|v| *v *= s);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.epochs {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

struct SampleResult {
    loss: f64,
    correct: bool,
    grads: Gradients,
}

fn sample(net: &FloatNetwork, img: &LabeledImage) -> SampleResult {
    let trace = nn::forward(net, &img.pixels.data);
    let correct = argmax(&trace.logits) == img.label as usize;
    let mut grads = Gradients::zeros_like(net);
    let loss = nn::backward(net, &trace, img.label as usize, &mut grads.groups);
    SampleResult { loss, correct, grads }
}

fn batch_gradients(net: &FloatNetwork, batch: &[&LabeledImage], exec: Execution) -> (f64, usize, Gradients) {
    let per_sample = exec.map(batch, |img| sample(net, img));
    let mut total = Gradients::zeros_like(net);
    let mut loss = 0.0;
    let mut correct = 0;
    for s in &per_sample {
        total.add(&s.grads);
        loss += s.loss;
        correct += s.correct as usize;
    }
    let inv = 1.0 / batch.len() as f64;
    total.scale(inv);
    (loss * inv, correct, total)
}

/// Mean cross-entropy over `batch` and its gradient for every parameter.
pub fn loss_and_gradients(net: &FloatNetwork, batch: &[LabeledImage]) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    check_sides(net.input_side, batch)?;
    let refs: Vec<&LabeledImage> = batch.iter().collect();
    let (loss, _, g) = batch_gradients(net, &refs, Execution::Sequential);
    Ok((loss, g))
}

fn check_sides(side: usize, images: &[LabeledImage]) -> Result<()> {
    if let Some(img) = images.iter().find(|i| i.side() != side) {
        return Err(Error::Argument(format!(
            "image side {} does not match network input side {side}",
            img.side()
        )));
    }
    Ok(())
}

/// Xavier-uniform weights, zero biases.
pub fn initialize(topology: Topology, input_side: usize, seed: u64) -> FloatNetwork {
    let mut net = FloatNetwork::zeros(topology, input_side);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ch = topology.channels();
    let k2 = Topology::KERNEL * Topology::KERNEL;
    for l in 0..3 {
        let limit = (6.0 / ((ch[l] + ch[l + 1]) * k2) as f64).sqrt();
        for w in &mut net.conv_weights[l].data {
            *w = rng.random_range(-limit..limit);
        }
    }
    let fan_in = net.fc_weights.shape[1];
    let limit = (6.0 / (fan_in + Topology::CLASSES) as f64).sqrt();
    for w in &mut net.fc_weights.data {
        *w = rng.random_range(-limit..limit);
    }
    net
}

pub fn train(topology: Topology, data: &Dataset, cfg: &TrainConfig) -> Result<FloatNetwork> {
    train_with_log(topology, data, cfg, Execution::Sequential).map(|(net, _)| net)
}

/// Trains a network; the result depends only on `(topology, data, cfg)`,
/// never on `exec`.
pub fn train_with_log(
    topology: Topology,
    data: &Dataset,
    cfg: &TrainConfig,
    exec: Execution,
) -> Result<(FloatNetwork, TrainLog)> {
    cfg.validate()?;
    topology.validate()?;
    data.ensure_non_empty()?;

    let mut net = initialize(topology, data.side, cfg.seed);
    let mut velocity = Gradients::zeros_like(&net);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x05ee_d0fb_a7c4);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = TrainLog::default();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&LabeledImage> = chunk.iter().map(|&i| &data.images[i]).collect();
            let (loss, ok, grads) = batch_gradients(&net, &batch, exec);
            if !loss.is_finite() {
                return Err(Error::Training { epoch, loss });
            }
            loss_sum += loss * batch.len() as f64;
            correct += ok;
            for ((param, vel), grad) in net
                .parameters_mut()
                .into_iter()
                .zip(&mut velocity.groups)
                .zip(&grads.groups)
            {
                for ((p, v), g) in param.iter_mut().zip(vel.iter_mut()).zip(grad) {
                    *v = cfg.momentum * *v - cfg.learning_rate * g;
                    *p += *v;
                }
            }
        }
        let loss = loss_sum / data.len() as f64;
        if !loss.is_finite() || loss > DIVERGED_LOSS || net.parameters().any(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::Training { epoch, loss });
        }
        log.epochs.push(EpochLog {
            epoch,
            loss,
            train_acc: correct as f64 / data.len() as f64,
        });
    }

    let calib = &data.images[..data.len().min(CALIBRATION_IMAGES)];
    net.activation_stats = Some(measure_activations(&net, calib));
    Ok((net, log))
}

/// Per-stage maxima of the float network's activations over `images`.
pub fn measure_activations(net: &FloatNetwork, images: &[LabeledImage]) -> ActivationStats {
    let mut max = [0.0f64; 4];
    for img in images {
        let t = nn::forward(net, &img.pixels.data);
        let stages = [&t.input, &t.act[0], &t.act[1], &t.act[2]];
        for (m, s) in max.iter_mut().zip(stages) {
            *m = s.iter().cloned().fold(*m, f64::max);
        }
    }
    ActivationStats {
        max,
        images: images.len(),
    }
}

/// Float top-1 accuracy.
pub fn float_accuracy(net: &FloatNetwork, data: &Dataset, exec: Execution) -> Result<f64> {
    data.ensure_non_empty()?;
    let hits = exec.map(&data.images, |img| {
        (net.predict(&img.pixels.data) == img.label as usize) as usize
    });
    Ok(hits.iter().sum::<usize>() as f64 / data.len() as f64)
}

/// Writes `net` as JSON and the training log next to it as CSV.
pub fn save_with_log(net: &FloatNetwork, log: &TrainLog, net_path: &Path, log_path: &Path) -> Result<()> {
    net.save(net_path)?;
    log.write_csv(log_path)?;
    Ok(())
}
