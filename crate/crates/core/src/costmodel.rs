//! DSP-block cost estimation and its calibration against published
//! synthesis results.
//!
//! A constant-coefficient multiplier whose code is zero or `±2^k` reduces to
//! wires and shifts, so only "generic" codes need a DSP block. Several narrow
//! multipliers share one block; `p(B)` is how many fit at width `B`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{fc_input_size, QuantizedNetwork, Topology, DEFAULT_INPUT_SIDE};
use crate::quantizer::{classify_code, CodeClass};

/// Published `(topology, B, DSP)` rows shipped with the crate.
pub const PUBLISHED_CALIBRATION_CSV: &str = include_str!("../data/dsp_calibration_v1.csv");

/// Resolution of the overhead grid searched by [`calibrate`].
pub const OVERHEAD_GRID_STEP: f64 = 0.05;

/// Widths covered by default and filled in after calibration.
pub const EXPLORED_BITS: std::ops::RangeInclusive<u32> = 3..=7;

/// Multipliers of the convolution layers: one per kernel tap per
/// input/output channel pair.
pub fn mac_count(topology: &Topology) -> u64 {
    let n = topology.channels();
    (0..3).map(|l| (n[l] * n[l + 1] * 9) as u64).sum()
}

/// Multipliers of the fully connected layer.
pub fn fc_mac_count(topology: &Topology, input_side: usize) -> u64 {
    (Topology::CLASSES * fc_input_size(topology, input_side)) as u64
}

/// Every constant multiplier of the network, convolutions and classifier.
pub fn multiplier_count(topology: &Topology, input_side: usize) -> u64 {
    mac_count(topology) + fc_mac_count(topology, input_side)
}

/// Share of generic codes when codes are uniform over the symmetric range
/// `[-(2^(B-1)-1), 2^(B-1)-1]`: of its `2^B - 1` codes, zero and
/// `±2^k` for `k < B-1` are free, leaving `(2^B - 2B) / (2^B - 1)`.
pub fn generic_fraction(bits: u32) -> f64 {
    let codes = (1u64 << bits) as f64 - 1.0;
    let free = (2 * bits - 1) as f64;
    (codes - free) / codes
}

/// Generic-code multipliers actually present in a quantized network.
pub fn generic_multipliers(net: &QuantizedNetwork) -> u64 {
    net.conv
        .iter()
        .chain([&net.fc])
        .flat_map(|l| &l.weights)
        .filter(|&&c| classify_code(c as i64) == CodeClass::Generic)
        .count() as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMode {
    /// Expected generic multipliers under uniformly distributed codes.
    #[default]
    Analytic,
    /// Generic multipliers counted on the network's actual codes.
    Empirical,
}

impl std::str::FromStr for CostMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "analytic" => Ok(CostMode::Analytic),
            "empirical" => Ok(CostMode::Empirical),
            _ => Err(Error::Argument(format!(
                "cost mode must be analytic or empirical, got {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub n1: usize,
    pub n2: usize,
    pub n3: usize,
    pub bits: u32,
    pub dsp: f64,
}

impl CalibrationRow {
    pub fn topology(&self) -> Result<Topology> {
        Topology::new(self.n1, self.n2, self.n3)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CalibrationSet {
    pub rows: Vec<CalibrationRow>,
}

impl CalibrationSet {
    /// The rows bundled with the crate.
    pub fn published() -> Self {
        Self::parse(Path::new("dsp_calibration_v1.csv"), PUBLISHED_CALIBRATION_CSV)
            .expect("bundled calibration data is well formed")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(path, &text)
    }

    /// Reads `n1,n2,n3,bits,dsp` rows; lines starting with `#` are comments.
    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut rows = Vec::new();
        for (i, rec) in reader.deserialize::<CalibrationRow>().enumerate() {
            let row = rec.map_err(|e| Error::Format {
                path: path.into(),
                reason: format!("row {}: {e}", i + 1),
            })?;
            row.topology()?;
            if !(row.dsp.is_finite() && row.dsp > 0.0) {
                return Err(Error::Format {
                    path: path.into(),
                    reason: format!("row {}: DSP count {} must be positive", i + 1, row.dsp),
                });
            }
            rows.push(row);
        }
        Ok(CalibrationSet { rows })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRow {
    pub n1: usize,
    pub n2: usize,
    pub n3: usize,
    pub bits: u32,
    pub dsp: f64,
    pub estimate: u64,
    /// `(estimate - dsp) / dsp`.
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Widths with enough rows to get their own packing factor.
    pub fitted_bits: Vec<u32>,
    pub rows: Vec<FitRow>,
    pub mean_abs_relative_error: f64,
    /// Sum of squared relative errors of the continuous model at the optimum.
    pub objective: f64,
    /// Rank correlation between estimates and published counts.
    pub spearman: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    /// `p(B)`: generic multipliers packed into one DSP block.
    pub packing: BTreeMap<u32, f64>,
    pub overhead: f64,
    pub calibrated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitReport>,
}

impl Default for CostParams {
    /// One multiplier per block and no overhead; marked uncalibrated.
    fn default() -> Self {
        CostParams {
            packing: EXPLORED_BITS.map(|b| (b, 1.0)).collect(),
            overhead: 0.0,
            calibrated: false,
            fit: None,
        }
    }
}

impl CostParams {
    /// Parameters fitted to the bundled calibration rows.
    pub fn published() -> Self {
        calibrate(&CalibrationSet::published()).expect("bundled calibration data fits")
    }

    /// Packing factor for `bits`, falling back to the closest narrower width
    /// present, or failing that the closest wider one.
    pub fn packing_for(&self, bits: u32) -> Result<f64> {
        let p = self
            .packing
            .range(..=bits)
            .next_back()
            .or_else(|| self.packing.range(bits..).next())
            .map(|(_, &p)| p)
            .ok_or_else(|| Error::Argument("cost parameters define no packing factor".into()))?;
        if !(p > 0.0 && p.is_finite()) {
            return Err(Error::Argument(format!(
                "packing factor {p} for B={bits} must be positive"
            )));
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn dsp_for(&self, generic: f64, bits: u32) -> Result<u64> {
        let p = self.packing_for(bits)?;
        if self.overhead < 0.0 || !self.overhead.is_finite() {
            return Err(Error::Argument(format!("overhead {} must be >= 0", self.overhead)));
        }
        Ok((generic / p).ceil() as u64 + self.overhead.round() as u64)
    }
}

/// `ceil(multipliers * generic_fraction(B) / p(B)) + round(overhead)`.
pub fn analytic_dsp(topology: &Topology, input_side: usize, bits: u32, params: &CostParams) -> Result<u64> {
    let generic = multiplier_count(topology, input_side) as f64 * generic_fraction(bits);
    params.dsp_for(generic, bits)
}

/// Same packing rule as [`analytic_dsp`] applied to the counted generic codes.
pub fn empirical_dsp(net: &QuantizedNetwork, params: &CostParams) -> Result<u64> {
    params.dsp_for(generic_multipliers(net) as f64, net.bits)
}

/// Estimates the DSP blocks of `net`. In `strict` mode uncalibrated
/// parameters are refused.
pub fn estimate_dsp(net: &QuantizedNetwork, params: &CostParams, mode: CostMode, strict: bool) -> Result<u64> {
    if strict && !params.calibrated {
        return Err(Error::CalibrationRequired);
    }
    match mode {
        CostMode::Analytic => analytic_dsp(&net.topology, net.input_side, net.bits, params),
        CostMode::Empirical => empirical_dsp(net, params),
    }
}

/// Running sums of a least-squares block: minimising
/// `sum(((x q + o - d) / d)^2)` over `q` gives `q = sxy / sxx`.
#[derive(Debug, Clone, Copy)]
struct Block {
    sxy: f64,
    sxx: f64,
    widths: usize,
}

impl Block {
    fn q(&self) -> f64 {
        self.sxy / self.sxx
    }
}

/// Pool-adjacent-violators over widths in ascending order, enforcing
/// non-decreasing `q = 1/p`. Returns one `q` per input block.
fn isotonic(blocks: &[Block]) -> Vec<f64> {
    let mut stack: Vec<Block> = Vec::with_capacity(blocks.len());
    for &b in blocks {
        let mut cur = b;
        while let Some(prev) = stack.last() {
            if prev.q() <= cur.q() {
                break;
            }
            cur = Block {
                sxy: prev.sxy + cur.sxy,
                sxx: prev.sxx + cur.sxx,
                widths: prev.widths + cur.widths,
            };
            stack.pop();
        }
        stack.push(cur);
    }
    stack
        .iter()
        .flat_map(|b| std::iter::repeat_n(b.q(), b.widths))
        .collect()
}

/// Fits one packing factor per width having at least two rows, plus a
/// single overhead, minimising squared relative error of the analytic
/// estimate. The overhead is searched on a grid; for each candidate the
/// per-width factors have a closed form, constrained to be non-increasing
/// in `B` by isotonic pooling.
pub fn calibrate(set: &CalibrationSet) -> Result<CostParams> {
    if set.rows.is_empty() {
        return Err(Error::Calibration("calibration set is empty".into()));
    }
    let mut by_bits: BTreeMap<u32, Vec<(f64, f64)>> = BTreeMap::new();
    for row in &set.rows {
        let x = multiplier_count(&row.topology()?, DEFAULT_INPUT_SIDE) as f64 * generic_fraction(row.bits);
        by_bits.entry(row.bits).or_default().push((x, row.dsp));
    }
    by_bits.retain(|_, rows| rows.len() >= 2);
    if by_bits.is_empty() {
        return Err(Error::Calibration(
            "no bit width has the two rows needed for a fit".into(),
        ));
    }
    let fitted: Vec<u32> = by_bits.keys().copied().collect();
    let min_dsp = by_bits
        .values()
        .flatten()
        .map(|&(_, d)| d)
        .fold(f64::INFINITY, f64::min);

    let mut best: Option<(f64, f64, Vec<f64>)> = None;
    let steps = (min_dsp / OVERHEAD_GRID_STEP).floor() as u64;
    for i in 0..steps {
        let o = i as f64 * OVERHEAD_GRID_STEP;
        let blocks: Vec<Block> = by_bits
            .values()
            .map(|rows| Block {
                sxy: rows.iter().map(|&(x, d)| x * (d - o) / (d * d)).sum(),
                sxx: rows.iter().map(|&(x, d)| (x / d) * (x / d)).sum(),
                widths: 1,
            })
            .collect();
        if blocks.iter().any(|b| b.sxx == 0.0) {
            return Err(Error::Calibration("a fitted width has no generic multipliers".into()));
        }
        let qs = isotonic(&blocks);
        if qs.iter().any(|&q| q <= 0.0) {
            continue;
        }
        let err: f64 = by_bits
            .values()
            .zip(&qs)
            .flat_map(|(rows, &q)| rows.iter().map(move |&(x, d)| ((x * q + o - d) / d).powi(2)))
            .sum();
        if best.as_ref().is_none_or(|(e, _, _)| err < *e) {
            best = Some((err, o, qs));
        }
    }
    let (objective, overhead, qs) =
        best.ok_or_else(|| Error::Calibration("every candidate fit has a non-positive packing factor".into()))?;

    let fitted_p: BTreeMap<u32, f64> = fitted.iter().zip(&qs).map(|(&b, &q)| (b, 1.0 / q)).collect();
    let mut packing = fitted_p.clone();
    let widths: Vec<u32> = EXPLORED_BITS.chain(set.rows.iter().map(|r| r.bits)).collect();
    for b in widths {
        let p = fitted_p
            .range(..=b)
            .next_back()
            .or_else(|| fitted_p.range(b..).next())
            .map(|(_, &p)| p)
            .expect("at least one fitted width");
        packing.entry(b).or_insert(p);
    }

    let mut params = CostParams {
        packing,
        overhead,
        calibrated: true,
        fit: None,
    };
    let rows = set
        .rows
        .iter()
        .map(|r| {
            let estimate = analytic_dsp(&r.topology()?, DEFAULT_INPUT_SIDE, r.bits, &params)?;
            Ok(FitRow {
                n1: r.n1,
                n2: r.n2,
                n3: r.n3,
                bits: r.bits,
                dsp: r.dsp,
                estimate,
                relative_error: (estimate as f64 - r.dsp) / r.dsp,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let est: Vec<f64> = rows.iter().map(|r| r.estimate as f64).collect();
    let pub_dsp: Vec<f64> = rows.iter().map(|r| r.dsp).collect();
    params.fit = Some(FitReport {
        fitted_bits: fitted,
        mean_abs_relative_error: rows.iter().map(|r| r.relative_error.abs()).sum::<f64>() / rows.len() as f64,
        objective,
        spearman: spearman(&est, &pub_dsp),
        rows,
    });
    Ok(params)
}

/// Classifications per second of a pipeline consuming one pixel per clock.
pub fn estimate_throughput(clock_hz: f64, width: usize, height: usize) -> Result<u64> {
    if !(clock_hz > 0.0 && clock_hz.is_finite()) || width == 0 || height == 0 {
        return Err(Error::Argument(format!(
            "throughput needs a positive clock and resolution, got {clock_hz} Hz at {width}x{height}"
        )));
    }
    Ok((clock_hz / (width * height) as f64).floor() as u64)
}

/// Ranks starting at 1; tied values share their average rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (Pearson correlation of average ranks).
/// Returns NaN when either side is constant or the lengths differ.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() || a.len() < 2 {
        return f64::NAN;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FloatNetwork;
    use crate::quantizer::quantize;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn t(a: usize, b: usize, c: usize) -> Topology {
        Topology::new(a, b, c).unwrap()
    }

    #[test]
    fn mac_counts() {
        assert_eq!(mac_count(&t(4, 6, 8)), 684);
        assert_eq!(mac_count(&t(3, 5, 7)), 477);
        assert_eq!(mac_count(&t(1, 1, 1)), 27);
        assert_eq!(fc_mac_count(&t(4, 6, 8), 28), 10 * 8 * 49);
        assert_eq!(multiplier_count(&t(1, 1, 1), 8), 27 + 10 * 4);
    }

    #[test]
    fn generic_fraction_counts_codes() {
        // brute force over the symmetric code range
        for bits in 2..=10u32 {
            let m = (1i64 << (bits - 1)) - 1;
            let generic = (-m..=m).filter(|&c| classify_code(c) == CodeClass::Generic).count();
            assert_relative_eq!(generic_fraction(bits), generic as f64 / (2 * m + 1) as f64);
        }
        assert_relative_eq!(generic_fraction(5), 22.0 / 31.0);
    }

    #[test]
    fn throughput_examples() {
        assert_eq!(estimate_throughput(57.93e6, 256, 256).unwrap(), 883);
        assert_eq!(estimate_throughput(65536.0, 256, 256).unwrap(), 1);
        assert_eq!(estimate_throughput(1e6, 28, 28).unwrap(), 1275);
        assert!(estimate_throughput(0.0, 28, 28).is_err());
        assert!(estimate_throughput(1e6, 0, 28).is_err());
    }

    #[test]
    fn zero_network_costs_overhead_only() {
        let q = quantize(&FloatNetwork::zeros(t(4, 6, 8), 28), 5).unwrap();
        let params = CostParams {
            overhead: 12.4,
            ..CostParams::default()
        };
        assert_eq!(empirical_dsp(&q, &params).unwrap(), 12);
    }

    #[test]
    fn power_of_two_weights_cost_overhead_only() {
        let mut q = quantize(&FloatNetwork::zeros(t(3, 5, 7), 28), 5).unwrap();
        for l in q.conv.iter_mut().chain([&mut q.fc]) {
            for (i, w) in l.weights.iter_mut().enumerate() {
                *w = [1, -2, 4, -8, 0][i % 5];
            }
        }
        let params = CalibrationSet::published();
        let params = calibrate(&params).unwrap();
        assert_eq!(
            estimate_dsp(&q, &params, CostMode::Empirical, true).unwrap(),
            params.overhead.round() as u64
        );
    }

    #[test]
    fn strict_mode_requires_calibration() {
        let q = quantize(&FloatNetwork::zeros(t(3, 5, 7), 28), 5).unwrap();
        assert!(matches!(
            estimate_dsp(&q, &CostParams::default(), CostMode::Analytic, true),
            Err(Error::CalibrationRequired)
        ));
        assert!(estimate_dsp(&q, &CostParams::default(), CostMode::Analytic, false).is_ok());
    }

    #[test]
    fn published_set_has_fifteen_rows() {
        let set = CalibrationSet::published();
        assert_eq!(set.rows.len(), 15);
        assert_eq!(
            set.rows[0],
            CalibrationRow {
                n1: 4,
                n2: 6,
                n3: 8,
                bits: 5,
                dsp: 161.0
            }
        );
    }

    #[test]
    fn empty_and_degenerate_sets_fail() {
        assert!(matches!(
            calibrate(&CalibrationSet::default()),
            Err(Error::Calibration(_))
        ));
        let one = CalibrationSet {
            rows: vec![CalibrationRow {
                n1: 3,
                n2: 5,
                n3: 7,
                bits: 5,
                dsp: 100.0,
            }],
        };
        assert!(matches!(calibrate(&one), Err(Error::Calibration(_))));
    }

    #[test]
    fn recovers_known_packing() {
        for (p, o) in [(3.7, 0.0), (12.25, 20.0), (0.8, 7.5)] {
            let rows = [t(3, 5, 7), t(4, 6, 8), t(5, 9, 12), t(3, 9, 14)]
                .iter()
                .map(|tp| CalibrationRow {
                    n1: tp.n1,
                    n2: tp.n2,
                    n3: tp.n3,
                    bits: 6,
                    dsp: multiplier_count(tp, 28) as f64 * generic_fraction(6) / p + o,
                })
                .collect();
            let params = calibrate(&CalibrationSet { rows }).unwrap();
            assert!((params.packing[&6] - p).abs() < 1e-9, "{} vs {p}", params.packing[&6]);
            assert!((params.overhead - o).abs() < 1e-9);
            // other widths borrow the only fitted factor
            assert_eq!(params.packing[&3], params.packing[&6]);
        }
    }

    #[test]
    fn isotonic_pools_violators() {
        let b = |q: f64| Block {
            sxy: q,
            sxx: 1.0,
            widths: 1,
        };
        assert_eq!(isotonic(&[b(1.0), b(3.0), b(2.0)]), vec![1.0, 2.5, 2.5]);
        assert_eq!(isotonic(&[b(3.0), b(2.0), b(1.0)]), vec![2.0, 2.0, 2.0]);
        assert_eq!(isotonic(&[b(1.0), b(2.0)]), vec![1.0, 2.0]);
    }

    #[test]
    fn published_fit_is_frozen() {
        let params = CostParams::published();
        let fit = params.fit.as_ref().unwrap();
        assert_eq!(fit.fitted_bits, vec![5, 6, 7]);
        let ps: Vec<f64> = EXPLORED_BITS.map(|b| params.packing[&b]).collect();
        for w in ps.windows(2) {
            assert!(w[0] >= w[1]);
        }
        let est: Vec<u64> = fit.rows.iter().map(|r| r.estimate).collect();
        assert_eq!(est, GOLDEN_ESTIMATES);
        assert_relative_eq!(params.overhead, GOLDEN_OVERHEAD);
        assert!((fit.mean_abs_relative_error - GOLDEN_MEAN_ERROR).abs() < 1e-9);
        assert!(fit.spearman >= 0.9);
    }

    // Frozen from the first fit; a change here means the model changed.
    const GOLDEN_ESTIMATES: [u64; 15] = [162, 66, 416, 240, 247, 276, 285, 294, 291, 320, 416, 429, 443, 439, 484];
    const GOLDEN_OVERHEAD: f64 = 16.45;
    const GOLDEN_MEAN_ERROR: f64 = 0.05020226774024406;

    #[test]
    fn fitted_trend_over_widths() {
        let params = CostParams::published();
        let d: Vec<f64> = (5..=7)
            .map(|b| analytic_dsp(&t(4, 8, 12), 28, b, &params).unwrap() as f64)
            .collect();
        assert!(d[0] < d[1] && d[1] < d[2]);
        assert!(d[2] - 2.0 * d[1] + d[0] >= 0.0);
    }

    #[test]
    fn spearman_examples() {
        assert_relative_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), 1.0);
        assert_relative_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), -1.0);
        // ties: ranks [1.5, 1.5, 3] vs [1, 2, 3]
        assert_relative_eq!(
            spearman(&[5.0, 5.0, 9.0], &[1.0, 2.0, 3.0]),
            0.8660254037844387,
            epsilon = 1e-12
        );
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_nan());
    }

    #[test]
    fn params_round_trip_json() {
        let params = CostParams::published();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cost.json");
        params.save(&path).unwrap();
        assert_eq!(CostParams::load(&path).unwrap(), params);
    }

    proptest! {
        #[test]
        fn analytic_is_monotone_in_neurons(n1 in 1usize..8, n2 in 1usize..12, n3 in 1usize..16, bits in 3u32..=7, which in 0usize..3) {
            let params = CostParams::published();
            let base = t(n1, n2, n3);
            let mut bigger = base;
            match which {
                0 => bigger.n1 += 1,
                1 => bigger.n2 += 1,
                _ => bigger.n3 += 1,
            }
            prop_assert!(analytic_dsp(&bigger, 28, bits, &params).unwrap() >= analytic_dsp(&base, 28, bits, &params).unwrap());
        }

        #[test]
        fn analytic_is_affine_in_multipliers(n1 in 1usize..8, n2 in 1usize..12, n3 in 1usize..16, bits in 3u32..=7) {
            let params = CostParams::published();
            let tp = t(n1, n2, n3);
            let exact = multiplier_count(&tp, 28) as f64 * generic_fraction(bits) / params.packing[&bits];
            let dsp = analytic_dsp(&tp, 28, bits, &params).unwrap();
            prop_assert_eq!(dsp, exact.ceil() as u64 + params.overhead.round() as u64);
        }
    }
}
