use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{EvaluationRecord, Exploration, PointFailure};

/// Per-width statistics. Standard deviations are population ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BitStats {
    pub bits: u32,
    pub count: usize,
    pub tpr_mean: f64,
    pub tpr_std: f64,
    pub dsp_mean: f64,
    pub dsp_std: f64,
    pub tdr_mean: f64,
}

/// Means over all topologies with the same total neuron count at one width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronStats {
    pub neurons: usize,
    pub bits: u32,
    pub count: usize,
    pub tpr_mean: f64,
    pub dsp_mean: f64,
    pub tdr_mean: f64,
}

/// How much a single-axis search would have missed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HolisticGap {
    /// The widest explored width, where a topology-only search would sit.
    pub fixed_bits: Option<u32>,
    /// Best record overall and best record at `fixed_bits`.
    pub global_best: Option<EvaluationRecord>,
    pub fixed_best: Option<EvaluationRecord>,
    /// `100 * (global - fixed) / global`, in percent.
    pub tdr_loss_percent: Option<f64>,
    /// Largest TPR difference between topologies sharing a width, in
    /// percentage points, and the width where it occurs.
    pub tpr_spread_points: f64,
    pub tpr_spread_bits: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub points: usize,
    pub failures: usize,
    /// Highest TDR, highest TPR and fewest DSP blocks. Ties go to the first
    /// record in key order.
    pub best_tdr: Option<EvaluationRecord>,
    pub max_tpr: Option<EvaluationRecord>,
    pub min_dsp: Option<EvaluationRecord>,
    pub by_bits: Vec<BitStats>,
    pub pareto: Vec<EvaluationRecord>,
    pub holistic_gap: Option<HolisticGap>,
    pub failed_points: Vec<PointFailure>,
}

fn first_best(
    records: &[EvaluationRecord],
    better: impl Fn(&EvaluationRecord, &EvaluationRecord) -> bool,
) -> Option<&EvaluationRecord> {
    records
        .iter()
        .fold(None, |best: Option<&EvaluationRecord>, r| match best {
            Some(b) if !better(r, b) => Some(b),
            _ => Some(r),
        })
}

fn mean_std(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = v.clone().count() as f64;
    let mean = v.clone().sum::<f64>() / n;
    let var = v.map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn by_bits(records: &[EvaluationRecord]) -> Vec<BitStats> {
    let mut groups: BTreeMap<u32, Vec<&EvaluationRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.bits).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(bits, rs)| {
            let (tpr_mean, tpr_std) = mean_std(rs.iter().map(|r| r.tpr_primary));
            let (dsp_mean, dsp_std) = mean_std(rs.iter().map(|r| r.dsp as f64));
            let (tdr_mean, _) = mean_std(rs.iter().map(|r| r.tdr));
            BitStats {
                bits,
                count: rs.len(),
                tpr_mean,
                tpr_std,
                dsp_mean,
                dsp_std,
                tdr_mean,
            }
        })
        .collect()
}

pub fn by_neurons(records: &[EvaluationRecord]) -> Vec<NeuronStats> {
    let mut groups: BTreeMap<(usize, u32), Vec<&EvaluationRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.topology().total_neurons(), r.bits))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((neurons, bits), rs)| NeuronStats {
            neurons,
            bits,
            count: rs.len(),
            tpr_mean: mean_std(rs.iter().map(|r| r.tpr_primary)).0,
            dsp_mean: mean_std(rs.iter().map(|r| r.dsp as f64)).0,
            tdr_mean: mean_std(rs.iter().map(|r| r.tdr)).0,
        })
        .collect()
}

fn dominates(a: &EvaluationRecord, b: &EvaluationRecord) -> bool {
    a.tpr_primary >= b.tpr_primary && a.dsp <= b.dsp && (a.tpr_primary > b.tpr_primary || a.dsp < b.dsp)
}

/// Records not dominated in (higher TPR, fewer DSP blocks), in input order.
pub fn pareto_front(records: &[EvaluationRecord]) -> Vec<EvaluationRecord> {
    records
        .iter()
        .filter(|r| !records.iter().any(|o| dominates(o, r)))
        .cloned()
        .collect()
}

/// Compares the global optimum with what a topology-only search at the
/// widest width would find, and measures how much topology alone moves
/// accuracy.
pub fn holistic_gap_report(records: &[EvaluationRecord]) -> Result<HolisticGap> {
    if records.len() < 2 {
        return Err(Error::Argument("a gap report needs at least two records".into()));
    }
    let mut spread = (f64::NEG_INFINITY, 0);
    for s in by_bits(records) {
        let rs = records.iter().filter(|r| r.bits == s.bits);
        let hi = rs.clone().map(|r| r.tpr_primary).fold(f64::NEG_INFINITY, f64::max);
        let lo = rs.map(|r| r.tpr_primary).fold(f64::INFINITY, f64::min);
        if 100.0 * (hi - lo) > spread.0 {
            spread = (100.0 * (hi - lo), s.bits);
        }
    }
    let widths: Vec<u32> = by_bits(records).iter().map(|s| s.bits).collect();
    let mut gap = HolisticGap {
        fixed_bits: None,
        global_best: None,
        fixed_best: None,
        tdr_loss_percent: None,
        tpr_spread_points: spread.0,
        tpr_spread_bits: spread.1,
    };
    if widths.len() >= 2 {
        let fixed_bits = *widths.last().unwrap();
        let slice: Vec<EvaluationRecord> = records.iter().filter(|r| r.bits == fixed_bits).cloned().collect();
        let global = first_best(records, |a, b| a.tdr > b.tdr).unwrap().clone();
        let fixed = first_best(&slice, |a, b| a.tdr > b.tdr).unwrap().clone();
        gap.tdr_loss_percent = Some(if global.tdr > 0.0 {
            100.0 * (global.tdr - fixed.tdr) / global.tdr
        } else {
            0.0
        });
        gap.fixed_bits = Some(fixed_bits);
        gap.global_best = Some(global);
        gap.fixed_best = Some(fixed);
    }
    Ok(gap)
}

/// Summary of records already sorted by key.
pub fn summarize(records: &[EvaluationRecord], failures: &[PointFailure]) -> Summary {
    Summary {
        points: records.len(),
        failures: failures.len(),
        best_tdr: first_best(records, |a, b| a.tdr > b.tdr).cloned(),
        max_tpr: first_best(records, |a, b| a.tpr_primary > b.tpr_primary).cloned(),
        min_dsp: first_best(records, |a, b| a.dsp < b.dsp).cloned(),
        by_bits: by_bits(records),
        pareto: pareto_front(records),
        holistic_gap: holistic_gap_report(records).ok(),
        failed_points: failures.to_vec(),
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct Timing {
    n1: usize,
    n2: usize,
    n3: usize,
    bits: u32,
    wall_time_s: f64,
}

/// Writes `records.csv`, `timings.csv`, `summary.json`, `pareto.csv`,
/// `by_bits.csv`, `by_neurons.csv` and `tdr_heat.csv` into `dir`.
pub fn write_outputs(dir: &Path, ex: &Exploration) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let header_only = |name: &str, header: &str| -> Result<()> {
        let p = dir.join(name);
        std::fs::write(&p, format!("{header}\n")).map_err(|e| Error::io(&p, e))
    };
    const RECORD_HEADER: &str = "n1,n2,n3,bits,tpr_primary,tpr_secondary,dsp,tdr,float_tpr";

    if ex.records.is_empty() {
        header_only("records.csv", RECORD_HEADER)?;
        header_only("pareto.csv", RECORD_HEADER)?;
        header_only("timings.csv", "n1,n2,n3,bits,wall_time_s")?;
        header_only("by_bits.csv", "bits,count,tpr_mean,tpr_std,dsp_mean,dsp_std,tdr_mean")?;
        header_only("by_neurons.csv", "neurons,bits,count,tpr_mean,dsp_mean,tdr_mean")?;
        header_only("tdr_heat.csv", "neurons")?;
    } else {
        write_csv(&dir.join("records.csv"), &ex.records)?;
        write_csv(&dir.join("pareto.csv"), &ex.summary.pareto)?;
        write_csv(
            &dir.join("timings.csv"),
            ex.records.iter().map(|r| Timing {
                n1: r.n1,
                n2: r.n2,
                n3: r.n3,
                bits: r.bits,
                wall_time_s: r.wall_time,
            }),
        )?;
        write_csv(&dir.join("by_bits.csv"), &ex.summary.by_bits)?;
        let neurons = by_neurons(&ex.records);
        write_csv(&dir.join("by_neurons.csv"), &neurons)?;
        write_tdr_heat(&dir.join("tdr_heat.csv"), &neurons)?;
    }

    let path = dir.join("summary.json");
    let mut text = serde_json::to_string_pretty(&ex.summary)?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Mean TDR as a matrix: one row per total neuron count, one column per
/// width; empty cells where no topology of that size exists.
fn write_tdr_heat(path: &Path, stats: &[NeuronStats]) -> Result<()> {
    let mut widths: Vec<u32> = stats.iter().map(|s| s.bits).collect();
    widths.sort_unstable();
    widths.dedup();
    let mut rows: BTreeMap<usize, BTreeMap<u32, f64>> = BTreeMap::new();
    for s in stats {
        rows.entry(s.neurons).or_default().insert(s.bits, s.tdr_mean);
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["neurons".to_string()];
    header.extend(widths.iter().map(|b| format!("b{b}")));
    w.write_record(&header)?;
    for (n, cells) in rows {
        let mut rec = vec![n.to_string()];
        rec.extend(
            widths
                .iter()
                .map(|b| cells.get(b).map(|v| v.to_string()).unwrap_or_default()),
        );
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::Execution;
    use crate::explorer::{explore, Boundaries, PointEvaluator};
    use crate::model::Topology;
    use proptest::prelude::*;

    fn rec(n1: usize, bits: u32, tpr: f64, dsp: u64) -> EvaluationRecord {
        EvaluationRecord::new(
            Topology {
                n1,
                n2: n1 + 2,
                n3: n1 + 4,
            },
            bits,
            tpr,
            None,
            dsp,
            0.99,
        )
        .unwrap()
    }

    #[test]
    fn dominant_point_gives_singleton_front() {
        let rs = vec![rec(3, 3, 0.9, 100), rec(4, 3, 0.8, 120), rec(5, 3, 0.85, 101)];
        assert_eq!(pareto_front(&rs), vec![rs[0].clone()]);
    }

    #[test]
    fn gap_on_published_optimum() {
        // global best 0.298, best at the widest width 0.171
        let rs = vec![rec(4, 5, 0.73, 245), rec(4, 7, 0.7318, 428)];
        let g = holistic_gap_report(&rs).unwrap();
        assert_eq!(g.fixed_bits, Some(7));
        let expected = 100.0 * (rs[0].tdr - rs[1].tdr) / rs[0].tdr;
        assert!((g.tdr_loss_percent.unwrap() - expected).abs() < 1e-12);
        assert!((g.tdr_loss_percent.unwrap() - 42.6).abs() < 0.1);
    }

    #[test]
    fn gap_edge_cases() {
        assert!(holistic_gap_report(&[rec(3, 3, 0.5, 10)]).is_err());
        let single_width = vec![rec(3, 5, 0.5, 10), rec(4, 5, 0.6, 10)];
        let g = holistic_gap_report(&single_width).unwrap();
        assert_eq!(g.tdr_loss_percent, None);
        assert!((g.tpr_spread_points - 10.0).abs() < 1e-9);
        let flat = vec![rec(3, 5, 0.5, 10), rec(3, 7, 0.5, 10)];
        assert_eq!(holistic_gap_report(&flat).unwrap().tdr_loss_percent, Some(0.0));
    }

    #[test]
    fn width_statistics() {
        let rs = vec![rec(3, 5, 0.5, 10), rec(4, 5, 0.7, 30), rec(3, 7, 0.9, 50)];
        let s = by_bits(&rs);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].count, 2);
        assert!((s[0].tpr_mean - 0.6).abs() < 1e-12);
        assert!((s[0].tpr_std - 0.1).abs() < 1e-12);
        assert!((s[0].dsp_std - 10.0).abs() < 1e-12);
        assert_eq!(s[1].dsp_std, 0.0);
    }

    struct Grid;

    impl PointEvaluator for Grid {
        fn evaluate(&self, t: Topology, bits: u32) -> Result<EvaluationRecord> {
            EvaluationRecord::new(
                t,
                bits,
                0.5 + 0.01 * (t.n3 + bits as usize) as f64,
                None,
                (t.n1 * 40 + bits as usize * 7) as u64,
                0.9,
            )
        }
    }

    #[test]
    fn writes_every_output() {
        let b = Boundaries {
            n1_range: [3, 4],
            n2_range: [5, 6],
            n3_range: [7, 8],
            b_range: [3, 7],
            step: 2,
            b_step: 2,
        };
        let ex = explore(&Grid, &b, Execution::Sequential).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_outputs(dir.path(), &ex).unwrap();
        let records = std::fs::read_to_string(dir.path().join("records.csv")).unwrap();
        assert_eq!(records.lines().count(), 13);
        assert!(records.starts_with("n1,n2,n3,bits,tpr_primary,tpr_secondary,dsp,tdr,float_tpr\n"));
        let heat = std::fs::read_to_string(dir.path().join("tdr_heat.csv")).unwrap();
        assert!(heat.starts_with("neurons,b3,b5,b7\n"));
        let summary: Summary =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
        assert_eq!(summary, ex.summary);
        for f in ["timings.csv", "pareto.csv", "by_bits.csv", "by_neurons.csv"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
    }

    #[test]
    fn empty_space_still_writes() {
        let b = Boundaries {
            n1_range: [5, 5],
            n2_range: [5, 6],
            ..Boundaries::default()
        };
        let ex = explore(&Grid, &b, Execution::Sequential).unwrap();
        assert_eq!(ex.summary.points, 0);
        let dir = tempfile::tempdir().unwrap();
        write_outputs(dir.path(), &ex).unwrap();
        let records = std::fs::read_to_string(dir.path().join("records.csv")).unwrap();
        assert_eq!(records.lines().count(), 1);
    }

    proptest! {
        #[test]
        fn front_is_exactly_the_non_dominated_set(pts in prop::collection::vec((0u32..20, 1u64..30), 1..40)) {
            let rs: Vec<EvaluationRecord> = pts
                .iter()
                .enumerate()
                .map(|(i, &(t, d))| rec(1 + i, 3, t as f64 / 20.0, d))
                .collect();
            let front = pareto_front(&rs);
            for f in &front {
                prop_assert!(!rs.iter().any(|o| dominates(o, f)));
            }
            for r in rs.iter().filter(|r| !front.contains(r)) {
                prop_assert!(front.iter().any(|f| dominates(f, r)));
            }
        }
    }
}
