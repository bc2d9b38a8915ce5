//! Float forward and backward passes (conv -> ReLU -> max-pool ladder, inner
//! product, softmax cross-entropy).

use crate::model::{stage_sides, FloatNetwork, Topology};

/// Intermediate values of one forward pass, kept for backpropagation.
pub(crate) struct Trace {
    pub input: Vec<f64>,
    /// Post-ReLU conv outputs per layer.
    pub act: [Vec<f64>; 3],
    /// Pool outputs after layers 1 and 2, with the flat index of each max.
    pub pooled: [Vec<f64>; 2],
    pub pool_src: [Vec<usize>; 2],
    pub logits: Vec<f64>,
}

pub(crate) fn forward(net: &FloatNetwork, pixels: &[f64]) -> Trace {
    let ch = net.topology.channels();
    let sides = stage_sides(net.input_side);
    let a1 = relu(conv_forward(
        pixels,
        ch[0],
        sides[0],
        &net.conv_weights[0].data,
        &net.conv_biases[0],
        ch[1],
    ));
    let (p1, s1) = pool_forward(&a1, ch[1], sides[0]);
    let a2 = relu(conv_forward(
        &p1,
        ch[1],
        sides[1],
        &net.conv_weights[1].data,
        &net.conv_biases[1],
        ch[2],
    ));
    let (p2, s2) = pool_forward(&a2, ch[2], sides[1]);
    let a3 = relu(conv_forward(
        &p2,
        ch[2],
        sides[2],
        &net.conv_weights[2].data,
        &net.conv_biases[2],
        ch[3],
    ));
    let fan_in = a3.len();
    let logits = (0..Topology::CLASSES)
        .map(|k| {
            let row = &net.fc_weights.data[k * fan_in..(k + 1) * fan_in];
            net.fc_biases[k] + dot(row, &a3)
        })
        .collect();
    Trace {
        input: pixels.to_vec(),
        act: [a1, a2, a3],
        pooled: [p1, p2],
        pool_src: [s1, s2],
        logits,
    }
}

/// Softmax cross-entropy loss of one sample and its gradient with respect to
/// every parameter group, accumulated into `grads` (laid out as
/// [`FloatNetwork::parameters`]).
pub(crate) fn backward(net: &FloatNetwork, trace: &Trace, label: usize, grads: &mut [Vec<f64>]) -> f64 {
    let ch = net.topology.channels();
    let sides = stage_sides(net.input_side);

    let probs = softmax(&trace.logits);
    let z = &trace.logits;
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let loss = m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln() - z[label];
    let mut dlogits = probs;
    dlogits[label] -= 1.0;

    // Inner product.
    let a3 = &trace.act[2];
    let fan_in = a3.len();
    let mut da3 = vec![0.0; fan_in];
    for (k, &g) in dlogits.iter().enumerate() {
        let row = &net.fc_weights.data[k * fan_in..(k + 1) * fan_in];
        let grow = &mut grads[6][k * fan_in..(k + 1) * fan_in];
        for j in 0..fan_in {
            grow[j] += g * a3[j];
            da3[j] += g * row[j];
        }
        grads[7][k] += g;
    }

    // Layer 3.
    relu_backward(&mut da3, a3);
    let dp2 = conv_backward(
        &trace.pooled[1],
        ch[2],
        sides[2],
        &net.conv_weights[2].data,
        ch[3],
        &da3,
        grads,
        4,
        true,
    );

    // Pool 2 and layer 2.
    let mut da2 = pool_backward(&dp2, &trace.pool_src[1], trace.act[1].len());
    relu_backward(&mut da2, &trace.act[1]);
    let dp1 = conv_backward(
        &trace.pooled[0],
        ch[1],
        sides[1],
        &net.conv_weights[1].data,
        ch[2],
        &da2,
        grads,
        2,
        true,
    );

    // Pool 1 and layer 1.
    let mut da1 = pool_backward(&dp1, &trace.pool_src[0], trace.act[0].len());
    relu_backward(&mut da1, &trace.act[0]);
    conv_backward(
        &trace.input,
        ch[0],
        sides[0],
        &net.conv_weights[0].data,
        ch[1],
        &da1,
        grads,
        0,
        false,
    );
    loss
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn relu(mut v: Vec<f64>) -> Vec<f64> {
    for x in &mut v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
    v
}

fn relu_backward(grad: &mut [f64], act: &[f64]) {
    for (g, &a) in grad.iter_mut().zip(act) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Valid output range for a tap offset `d` in {-1, 0, 1} with zero padding.
#[inline]
fn tap_range(d: isize, side: usize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (side as isize - d.max(0)).max(0) as usize;
    (lo, hi)
}

/// 3x3 "same" cross-correlation. Weights are `[cin, cout, 3, 3]`.
pub(crate) fn conv_forward(input: &[f64], cin: usize, side: usize, w: &[f64], b: &[f64], cout: usize) -> Vec<f64> {
    let area = side * side;
    let mut out = vec![0.0; cout * area];
    for o in 0..cout {
        let dst = &mut out[o * area..(o + 1) * area];
        dst.fill(b[o]);
        for i in 0..cin {
            let src = &input[i * area..(i + 1) * area];
            let kernel = &w[(i * cout + o) * 9..(i * cout + o + 1) * 9];
            for (t, &wt) in kernel.iter().enumerate() {
                if wt == 0.0 {
                    continue;
                }
                let dy = (t / 3) as isize - 1;
                let dx = (t % 3) as isize - 1;
                let (y0, y1) = tap_range(dy, side);
                let (x0, x1) = tap_range(dx, side);
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let drow = &mut dst[y * side + x0..y * side + x1];
                    let sx0 = (x0 as isize + dx) as usize;
                    let srow = &src[sy * side + sx0..sy * side + sx0 + (x1 - x0)];
                    for (d, s) in drow.iter_mut().zip(srow) {
                        *d += wt * s;
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight and bias gradients into `grads[group]` and
/// `grads[group + 1]`; returns the input gradient when `want_input`.
#[allow(clippy::too_many_arguments)]
fn conv_backward(
    input: &[f64],
    cin: usize,
    side: usize,
    w: &[f64],
    cout: usize,
    gout: &[f64],
    grads: &mut [Vec<f64>],
    group: usize,
    want_input: bool,
) -> Vec<f64> {
    let area = side * side;
    let mut gin = if want_input { vec![0.0; cin * area] } else { Vec::new() };
    for o in 0..cout {
        let g = &gout[o * area..(o + 1) * area];
        grads[group + 1][o] += g.iter().sum::<f64>();
        for i in 0..cin {
            let src = &input[i * area..(i + 1) * area];
            let widx = (i * cout + o) * 9;
            for t in 0..9 {
                let dy = (t / 3) as isize - 1;
                let dx = (t % 3) as isize - 1;
                let (y0, y1) = tap_range(dy, side);
                let (x0, x1) = tap_range(dx, side);
                let wt = w[widx + t];
                let mut acc = 0.0;
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let sx0 = (x0 as isize + dx) as usize;
                    let grow = &g[y * side + x0..y * side + x1];
                    let base = i * area + sy * side + sx0;
                    let srow = &src[sy * side + sx0..sy * side + sx0 + (x1 - x0)];
                    acc += dot(grow, srow);
                    if want_input && wt != 0.0 {
                        for (gi, &gv) in gin[base..base + (x1 - x0)].iter_mut().zip(grow) {
                            *gi += wt * gv;
                        }
                    }
                }
                grads[group][widx + t] += acc;
            }
        }
    }
    gin
}

/// 2x2 stride-2 max pool, flooring odd sides. Ties keep the first element in
/// scan order.
pub(crate) fn pool_forward(input: &[f64], channels: usize, side: usize) -> (Vec<f64>, Vec<usize>) {
    let half = side / Topology::POOL;
    let mut out = Vec::with_capacity(channels * half * half);
    let mut src = Vec::with_capacity(channels * half * half);
    for c in 0..channels {
        let base = c * side * side;
        for y in 0..half {
            for x in 0..half {
                let mut best = base + 2 * y * side + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * side + 2 * x + dx;
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                src.push(best);
            }
        }
    }
    (out, src)
}

fn pool_backward(gout: &[f64], src: &[usize], input_len: usize) -> Vec<f64> {
    let mut gin = vec![0.0; input_len];
    for (&g, &s) in gout.iter().zip(src) {
        gin[s] += g;
    }
    gin
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_delta_kernel_is_identity() {
        let side = 4;
        let input: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        assert_eq!(conv_forward(&input, 1, side, &w, &[0.0], 1), input);
    }

    #[test]
    fn conv_zero_padding_at_corner() {
        // all-ones kernel over all-ones 3x3 image: corner sees 4 taps, edge 6,
        // center 9
        let out = conv_forward(&[1.0; 9], 1, 3, &[1.0; 9], &[0.5], 1);
        assert_eq!(out, vec![4.5, 6.5, 4.5, 6.5, 9.5, 6.5, 4.5, 6.5, 4.5]);
    }

    #[test]
    fn pool_floors_odd_sides() {
        let input: Vec<f64> = (0..25).map(|v| v as f64).collect();
        let (out, src) = pool_forward(&input, 1, 5);
        assert_eq!(out, vec![6.0, 8.0, 16.0, 18.0]);
        assert_eq!(src, vec![6, 8, 16, 18]);
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1.0, 2.0, 3.0, 1000.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p[3] > 0.999);
    }
}
