//! Post-training fixed-point quantization with per-layer power-of-two scales.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{check_bits, FixedPointFormat, FloatNetwork, QuantizedLayer, QuantizedNetwork, Tensor};

/// Smallest exponent `f` with `max|v| <= (2^(B-1) - 1) * 2^f`; `f = 0` for an
/// all-zero tensor.
pub fn choose_format(values: &[f64], bits: u32) -> Result<FixedPointFormat> {
    check_bits(bits)?;
    let max = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max == 0.0 {
        return FixedPointFormat::new(bits, 0);
    }
    let qmax = ((1i64 << (bits - 1)) - 1) as f64;
    let fits = |f: i32| max <= qmax * 2f64.powi(f);
    let mut f = (max / qmax).log2().ceil() as i32;
    while !fits(f) {
        f += 1;
    }
    while fits(f - 1) {
        f -= 1;
    }
    FixedPointFormat::new(bits, f)
}

/// Round half away from zero, then saturate.
pub fn quantize_value(v: f64, fmt: FixedPointFormat) -> i32 {
    let scaled = (v / fmt.step()).round();
    scaled.clamp(fmt.min_code() as f64, fmt.max_code() as f64) as i32
}

fn quantize_group(values: &[f64], bits: u32) -> Result<(Vec<i32>, FixedPointFormat)> {
    let fmt = choose_format(values, bits)?;
    Ok((values.iter().map(|&v| quantize_value(v, fmt)).collect(), fmt))
}

fn quantize_layer(weights: &Tensor, biases: &[f64], bits: u32) -> Result<QuantizedLayer> {
    let (w, wf) = quantize_group(&weights.data, bits)?;
    let (b, bf) = quantize_group(biases, bits)?;
    Ok(QuantizedLayer {
        weight_shape: weights.shape.clone(),
        weights: w,
        weight_format: wf,
        biases: b,
        bias_format: bf,
    })
}

/// Quantizes every layer's weights and biases to `bits`, each group with its
/// own format.
pub fn quantize(net: &FloatNetwork, bits: u32) -> Result<QuantizedNetwork> {
    check_bits(bits)?;
    net.validate()?;
    let conv = [
        quantize_layer(&net.conv_weights[0], &net.conv_biases[0], bits)?,
        quantize_layer(&net.conv_weights[1], &net.conv_biases[1], bits)?,
        quantize_layer(&net.conv_weights[2], &net.conv_biases[2], bits)?,
    ];
    Ok(QuantizedNetwork {
        topology: net.topology,
        input_side: net.input_side,
        bits,
        conv,
        fc: quantize_layer(&net.fc_weights, &net.fc_biases, bits)?,
        activation_stats: net.activation_stats,
    })
}

fn dequantize_codes(codes: &[i32], fmt: FixedPointFormat) -> Vec<f64> {
    codes.iter().map(|&c| c as f64 * fmt.step()).collect()
}

/// Real-valued network holding exactly the values the codes represent.
pub fn dequantize(q: &QuantizedNetwork) -> FloatNetwork {
    let layer = |l: &QuantizedLayer| {
        (
            Tensor {
                shape: l.weight_shape.clone(),
                data: dequantize_codes(&l.weights, l.weight_format),
            },
            dequantize_codes(&l.biases, l.bias_format),
        )
    };
    let [(w0, b0), (w1, b1), (w2, b2)] = [layer(&q.conv[0]), layer(&q.conv[1]), layer(&q.conv[2])];
    let (fw, fb) = layer(&q.fc);
    FloatNetwork {
        topology: q.topology,
        input_side: q.input_side,
        conv_weights: [w0, w1, w2],
        conv_biases: [b0, b1, b2],
        fc_weights: fw,
        fc_biases: fb,
        activation_stats: q.activation_stats,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodeClass {
    Zero,
    PowerOfTwo,
    Generic,
}

/// Zero and `±2^k` constants reduce to wires and shifts in hardware.
pub fn classify_code(code: i64) -> CodeClass {
    match code.unsigned_abs() {
        0 => CodeClass::Zero,
        m if m.is_power_of_two() => CodeClass::PowerOfTwo,
        _ => CodeClass::Generic,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Topology;
    use crate::trainer::initialize;
    use proptest::prelude::*;

    #[test]
    fn choose_format_examples() {
        assert_eq!(choose_format(&[0.2, -1.0, 0.5], 5).unwrap().exponent, -3);
        assert_eq!(choose_format(&[0.0, 0.0], 3).unwrap().exponent, 0);
        assert_eq!(choose_format(&[], 7).unwrap().exponent, 0);
        assert_eq!(choose_format(&[15.0], 5).unwrap().exponent, 0);
        assert_eq!(choose_format(&[15.000001], 5).unwrap().exponent, 1);
        assert!(choose_format(&[1.0], 1).is_err());
    }

    #[test]
    fn quantize_value_examples() {
        let f = FixedPointFormat::new(5, -4).unwrap();
        assert_eq!(quantize_value(0.30, f), 5);
        assert_eq!(quantize_value(0.0, f), 0);
        assert_eq!(quantize_value(-0.0, f), 0);
        // half away from zero
        assert_eq!(quantize_value(0.03125, f), 1);
        assert_eq!(quantize_value(-0.03125, f), -1);
        // saturation
        assert_eq!(quantize_value(5.0, f), 15);
        assert_eq!(quantize_value(-5.0, f), -16);
    }

    #[test]
    fn classify_examples() {
        assert_eq!(classify_code(0), CodeClass::Zero);
        assert_eq!(classify_code(-8), CodeClass::PowerOfTwo);
        assert_eq!(classify_code(1), CodeClass::PowerOfTwo);
        assert_eq!(classify_code(-1), CodeClass::PowerOfTwo);
        assert_eq!(classify_code(6), CodeClass::Generic);
        assert_eq!(classify_code(-15), CodeClass::Generic);
    }

    fn network(seed: u64) -> FloatNetwork {
        let mut net = initialize(Topology::new(3, 5, 7).unwrap(), 28, seed);
        for (i, b) in net.conv_biases.iter_mut().flatten().enumerate() {
            *b = ((i * 37 % 11) as f64 - 5.0) * 0.013;
        }
        net
    }

    fn mean_abs_error(net: &FloatNetwork, bits: u32) -> f64 {
        let q = dequantize(&quantize(net, bits).unwrap());
        let (mut s, mut n) = (0.0, 0usize);
        for (a, b) in net.parameters().zip(q.parameters()) {
            for (x, y) in a.iter().zip(b) {
                s += (x - y).abs();
                n += 1;
            }
        }
        s / n as f64
    }

    #[test]
    fn refinement_is_monotone() {
        let net = network(5);
        for bits in 3..7 {
            assert!(mean_abs_error(&net, bits + 1) <= mean_abs_error(&net, bits));
        }
    }

    #[test]
    fn requantization_is_idempotent() {
        let net = network(8);
        for bits in [3, 5, 7, 16] {
            let q = quantize(&net, bits).unwrap();
            let again = quantize(&dequantize(&q), bits).unwrap();
            assert_eq!(q, again);
        }
    }

    #[test]
    fn negation_negates_codes() {
        let net = network(2);
        let mut neg = net.clone();
        for group in neg.parameters_mut() {
            group.iter_mut().for_each(|v| *v = -*v);
        }
        let (q, qn) = (quantize(&net, 5).unwrap(), quantize(&neg, 5).unwrap());
        let codes = |q: &QuantizedNetwork| -> Vec<i32> {
            q.conv
                .iter()
                .chain([&q.fc])
                .flat_map(|l| l.weights.iter().chain(&l.biases).copied())
                .collect()
        };
        for (a, b) in codes(&q).iter().zip(codes(&qn)) {
            assert_eq!(*a, -b);
        }
    }

    proptest! {
        #[test]
        fn max_magnitude_never_saturates(values in prop::collection::vec(-50.0f64..50.0, 1..64), bits in 2u32..=16) {
            let fmt = choose_format(&values, bits).unwrap();
            let qmax = fmt.max_code();
            for &v in &values {
                let c = quantize_value(v, fmt) as i64;
                prop_assert!(c.abs() <= qmax);
                // round-to-nearest error bound holds for every value
                prop_assert!((v - c as f64 * fmt.step()).abs() <= fmt.step() / 2.0 + 1e-12);
            }
            if values.iter().any(|v| *v != 0.0) {
                // and the exponent is the smallest that fits
                let max = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                prop_assert!(max > qmax as f64 * 2f64.powi(fmt.exponent - 1));
            }
        }
    }
}
