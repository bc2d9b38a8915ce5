use crate::dataset::LabeledImage;
use crate::error::{Error, Result};
use crate::model::{argmax, stage_sides, QuantizedLayer, QuantizedNetwork, Topology};

use super::DatapathConfig;

/// Every intermediate integer map of one reference pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTrace {
    pub input: Vec<i64>,
    /// Activation codes after ReLU + requantization, per conv layer.
    pub activations: [Vec<i64>; 3],
    /// Pooled codes after layers 1 and 2.
    pub pooled: [Vec<i64>; 2],
    /// FC accumulators (exponent: last activation exponent + fc weight exponent).
    pub fc: Vec<i64>,
}

impl ReferenceTrace {
    pub fn class(&self) -> usize {
        argmax(&self.fc)
    }
}

pub fn forward_reference(net: &QuantizedNetwork, dp: &DatapathConfig, image: &LabeledImage) -> Result<usize> {
    Ok(reference_trace(net, dp, image)?.class())
}

pub fn reference_trace(net: &QuantizedNetwork, dp: &DatapathConfig, image: &LabeledImage) -> Result<ReferenceTrace> {
    if image.side() != net.input_side {
        return Err(Error::Argument(format!(
            "image side {} does not match network input side {}",
            image.side(),
            net.input_side
        )));
    }
    let ch = net.topology.channels();
    let sides = stage_sides(net.input_side);
    let e = dp.activation_exponents;

    let input: Vec<i64> = image.pixels.data.iter().map(|&p| dp.input_code(p)).collect();
    let a1 = conv_layer(dp, &net.conv[0], &input, ch[0], ch[1], sides[0], e[0], e[1], "conv1")?;
    let p1 = max_pool(&a1, ch[1], sides[0]);
    let a2 = conv_layer(dp, &net.conv[1], &p1, ch[1], ch[2], sides[1], e[1], e[2], "conv2")?;
    let p2 = max_pool(&a2, ch[2], sides[1]);
    let a3 = conv_layer(dp, &net.conv[2], &p2, ch[2], ch[3], sides[2], e[2], e[3], "conv3")?;

    let fc = &net.fc;
    let acc_exp = e[3] + fc.weight_format.exponent;
    let fan_in = a3.len();
    let mut logits = Vec::with_capacity(Topology::CLASSES);
    for k in 0..Topology::CLASSES {
        let mut acc = dp.align_bias(fc.biases[k] as i64, fc.bias_format.exponent, acc_exp, "fc")?;
        let row = &fc.weights[k * fan_in..(k + 1) * fan_in];
        for (&w, &a) in row.iter().zip(&a3) {
            acc = dp.mac(acc, w as i64, a, "fc")?;
        }
        logits.push(acc);
    }

    Ok(ReferenceTrace {
        input,
        activations: [a1, a2, a3],
        pooled: [p1, p2],
        fc: logits,
    })
}

/// Sum over input channels of 3x3 zero-padded correlations, plus bias, then
/// ReLU and requantization to the next stage's exponent.
#[allow(clippy::too_many_arguments)]
fn conv_layer(
    dp: &DatapathConfig,
    layer: &QuantizedLayer,
    input: &[i64],
    cin: usize,
    cout: usize,
    side: usize,
    in_exp: i32,
    out_exp: i32,
    stage: &str,
) -> Result<Vec<i64>> {
    let acc_exp = in_exp + layer.weight_format.exponent;
    let area = side * side;
    let mut out = vec![0i64; cout * area];
    for o in 0..cout {
        let bias = dp.align_bias(layer.biases[o] as i64, layer.bias_format.exponent, acc_exp, stage)?;
        for y in 0..side {
            for x in 0..side {
                let mut acc = bias;
                for i in 0..cin {
                    let kernel = &layer.weights[(i * cout + o) * 9..(i * cout + o + 1) * 9];
                    let src = &input[i * area..(i + 1) * area];
                    for (t, &w) in kernel.iter().enumerate() {
                        let sy = y as isize + (t / 3) as isize - 1;
                        let sx = x as isize + (t % 3) as isize - 1;
                        if sy < 0 || sx < 0 || sy >= side as isize || sx >= side as isize {
                            continue;
                        }
                        acc = dp.mac(acc, w as i64, src[sy as usize * side + sx as usize], stage)?;
                    }
                }
                out[o * area + y * side + x] = dp.requantize(acc, acc_exp, out_exp);
            }
        }
    }
    Ok(out)
}

fn max_pool(input: &[i64], channels: usize, side: usize) -> Vec<i64> {
    let half = side / 2;
    let mut out = Vec::with_capacity(channels * half * half);
    for c in 0..channels {
        let m = &input[c * side * side..(c + 1) * side * side];
        for y in 0..half {
            for x in 0..half {
                let (r0, r1) = (2 * y * side, (2 * y + 1) * side);
                out.push(
                    m[r0 + 2 * x]
                        .max(m[r0 + 2 * x + 1])
                        .max(m[r1 + 2 * x])
                        .max(m[r1 + 2 * x + 1]),
                );
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FixedPointFormat, FloatNetwork};
    use crate::quantizer::quantize;

    fn zero_qnet(t: Topology, side: usize) -> QuantizedNetwork {
        quantize(&FloatNetwork::zeros(t, side), 5).unwrap()
    }

    fn dp() -> DatapathConfig {
        DatapathConfig {
            activation_bits: 8,
            accumulator_bits: 32,
            activation_exponents: [-7, -7, -7, -7],
        }
    }

    #[test]
    fn zero_image_zero_net_is_class_zero() {
        let net = zero_qnet(Topology::new(3, 5, 7).unwrap(), 28);
        let img = LabeledImage::new(28, vec![0.0; 784], 4).unwrap();
        let t = reference_trace(&net, &dp(), &img).unwrap();
        assert!(t.fc.iter().all(|&v| v == 0));
        assert_eq!(t.class(), 0);
    }

    #[test]
    fn delta_kernel_passes_codes_through() {
        let mut net = zero_qnet(Topology::new(1, 1, 1).unwrap(), 8);
        for layer in &mut net.conv {
            layer.weights[4] = 1;
            layer.weight_format = FixedPointFormat::new(5, 0).unwrap();
        }
        let px: Vec<f64> = (0..64).map(|i| (i % 17) as f64 / 16.0).collect();
        let img = LabeledImage::new(8, px, 0).unwrap();
        let t = reference_trace(&net, &dp(), &img).unwrap();
        assert_eq!(t.activations[0], t.input);
        assert_eq!(t.activations[1], t.pooled[0]);
        assert_eq!(t.activations[2], t.pooled[1]);
        assert_eq!(t.pooled[0], max_pool(&t.input, 1, 8));
    }

    #[test]
    fn side_mismatch_is_rejected() {
        let net = zero_qnet(Topology::new(1, 1, 1).unwrap(), 8);
        let img = LabeledImage::new(4, vec![0.0; 16], 0).unwrap();
        assert!(forward_reference(&net, &dp(), &img).is_err());
    }

    #[test]
    fn overflow_is_reported() {
        let mut net = zero_qnet(Topology::new(1, 1, 1).unwrap(), 4);
        net.conv[0].weights = vec![15; 9];
        let narrow = DatapathConfig {
            accumulator_bits: 10,
            ..dp()
        };
        let img = LabeledImage::new(4, vec![1.0; 16], 0).unwrap();
        assert!(matches!(
            forward_reference(&net, &narrow, &img),
            Err(Error::Overflow { .. })
        ));
    }
}
