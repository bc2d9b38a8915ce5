//! Design-space exploration over topology and parameter width.
//!
//! Every design point is a topology plus a width `B`. A [`PointEvaluator`]
//! turns a point into an [`EvaluationRecord`]; [`Pipeline`] is the real one
//! (train once per topology, quantize, run the integer datapath, estimate
//! DSP blocks). [`explore`] sweeps the whole space and [`hill_climb`] walks
//! it greedily.

mod report;

pub use report::{
    holistic_gap_report, pareto_front, summarize, write_outputs, BitStats, HolisticGap, NeuronStats, Summary,
};

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::costmodel::{estimate_dsp, CostMode, CostParams};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::inference::{evaluate_tpr_with, DatapathConfig, DEFAULT_ACCUMULATOR_BITS, DEFAULT_ACTIVATION_BITS};
use crate::model::{check_bits, FloatNetwork, Topology};
use crate::quantizer::quantize;
use crate::trainer::{float_accuracy, train_with_log, TrainConfig};

/// Bounds of the explored space. `step` is the minimum growth in neurons
/// from one layer to the next; loops themselves advance by one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Boundaries {
    pub n1_range: [usize; 2],
    pub n2_range: [usize; 2],
    pub n3_range: [usize; 2],
    pub b_range: [u32; 2],
    pub step: usize,
    /// Increment between explored widths.
    pub b_step: u32,
}

impl Default for Boundaries {
    fn default() -> Self {
        Boundaries {
            n1_range: [3, 5],
            n2_range: [5, 10],
            n3_range: [7, 14],
            b_range: [3, 7],
            step: 2,
            b_step: 1,
        }
    }
}

impl Boundaries {
    pub fn validate(&self) -> Result<()> {
        for (name, [lo, hi]) in [("n1", self.n1_range), ("n2", self.n2_range), ("n3", self.n3_range)] {
            if lo == 0 || lo > hi {
                return Err(Error::Argument(format!("{name} range [{lo}, {hi}] is invalid")));
            }
        }
        let [blo, bhi] = self.b_range;
        if blo > bhi {
            return Err(Error::Argument(format!("bit range [{blo}, {bhi}] is invalid")));
        }
        check_bits(blo)?;
        check_bits(bhi)?;
        if self.step == 0 || self.b_step == 0 {
            return Err(Error::Argument("step and b_step must be >= 1".into()));
        }
        Ok(())
    }

    pub fn bit_widths(&self) -> Vec<u32> {
        (self.b_range[0]..=self.b_range[1])
            .step_by(self.b_step as usize)
            .collect()
    }

    pub fn contains(&self, t: &Topology, bits: u32) -> bool {
        let within = |v: usize, [lo, hi]: [usize; 2]| lo <= v && v <= hi;
        within(t.n1, self.n1_range)
            && within(t.n2, self.n2_range)
            && within(t.n3, self.n3_range)
            && t.n2 >= t.n1 + self.step
            && t.n3 >= t.n2 + self.step
            && self.bit_widths().contains(&bits)
    }
}

/// All topologies of the space in lexicographic order.
pub fn enumerate_topologies(b: &Boundaries) -> Vec<Topology> {
    let mut out = Vec::new();
    for n1 in b.n1_range[0]..=b.n1_range[1] {
        for n2 in b.n2_range[0].max(n1 + b.step)..=b.n2_range[1] {
            for n3 in b.n3_range[0].max(n2 + b.step)..=b.n3_range[1] {
                out.push(Topology { n1, n2, n3 });
            }
        }
    }
    out
}

/// Every `(topology, B)` pair, topology-major.
pub fn design_points(b: &Boundaries) -> Vec<(Topology, u32)> {
    let widths = b.bit_widths();
    enumerate_topologies(b)
        .into_iter()
        .flat_map(|t| widths.iter().map(move |&bits| (t, bits)))
        .collect()
}

/// Accuracy per DSP block: `tpr_percent / dsp`.
pub fn tdr(tpr_percent: f64, dsp: u64) -> Result<f64> {
    if dsp == 0 {
        return Err(Error::Argument("TDR is undefined for zero DSP blocks".into()));
    }
    if !(0.0..=100.0).contains(&tpr_percent) {
        return Err(Error::Argument(format!("TPR {tpr_percent}% outside [0, 100]")));
    }
    Ok(tpr_percent / dsp as f64)
}

/// One evaluated design point. Rates are fractions in `[0, 1]`; `tdr` is in
/// percent per DSP block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub n1: usize,
    pub n2: usize,
    pub n3: usize,
    pub bits: u32,
    pub tpr_primary: f64,
    pub tpr_secondary: Option<f64>,
    pub dsp: u64,
    pub tdr: f64,
    pub float_tpr: f64,
    /// Seconds spent on this point; kept out of serialized records so that
    /// outputs stay reproducible.
    #[serde(skip)]
    pub wall_time: f64,
}

impl EvaluationRecord {
    pub fn new(
        topology: Topology,
        bits: u32,
        tpr_primary: f64,
        tpr_secondary: Option<f64>,
        dsp: u64,
        float_tpr: f64,
    ) -> Result<Self> {
        Ok(EvaluationRecord {
            n1: topology.n1,
            n2: topology.n2,
            n3: topology.n3,
            bits,
            tpr_primary,
            tpr_secondary,
            dsp,
            tdr: tdr(100.0 * tpr_primary, dsp)?,
            float_tpr,
            wall_time: 0.0,
        })
    }

    pub fn topology(&self) -> Topology {
        Topology {
            n1: self.n1,
            n2: self.n2,
            n3: self.n3,
        }
    }

    pub fn key(&self) -> (Topology, u32) {
        (self.topology(), self.bits)
    }
}

/// A point whose evaluation failed; exploration carries on without it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointFailure {
    pub n1: usize,
    pub n2: usize,
    pub n3: usize,
    pub bits: u32,
    pub error: String,
}

pub trait PointEvaluator: Sync {
    fn evaluate(&self, topology: Topology, bits: u32) -> Result<EvaluationRecord>;

    /// Called once before a sweep with every topology it will touch, so that
    /// expensive per-topology work can run in parallel up front.
    fn prepare(&self, _topologies: &[Topology], _exec: Execution) {}
}

/// Settings of the real evaluation pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub train: TrainConfig,
    pub activation_bits: u32,
    pub accumulator_bits: u32,
    pub cost_mode: CostMode,
    /// Refuse uncalibrated cost parameters.
    pub strict_cost: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            train: TrainConfig::default(),
            activation_bits: DEFAULT_ACTIVATION_BITS,
            accumulator_bits: DEFAULT_ACCUMULATOR_BITS,
            cost_mode: CostMode::Analytic,
            strict_cost: true,
        }
    }
}

pub struct Datasets {
    pub train: Dataset,
    pub test: Dataset,
    pub secondary: Option<Dataset>,
}

/// A trained float network with its float accuracy on the primary test set.
#[derive(Debug, Clone)]
pub struct Trained {
    pub net: FloatNetwork,
    pub float_tpr: f64,
}

type Slot = Arc<OnceLock<std::result::Result<Arc<Trained>, String>>>;

/// Trained networks keyed by `(topology, seed)`, so a width sweep reuses one
/// training run. Concurrent requests for the same key train once.
#[derive(Default)]
pub struct TrainingCache {
    slots: Mutex<HashMap<(Topology, u64), Slot>>,
}

impl TrainingCache {
    pub fn get_or_train(
        &self,
        topology: Topology,
        seed: u64,
        train: impl FnOnce() -> Result<Trained>,
    ) -> Result<Arc<Trained>> {
        let slot = self
            .slots
            .lock()
            .expect("cache lock poisoned")
            .entry((topology, seed))
            .or_default()
            .clone();
        slot.get_or_init(|| train().map(Arc::new).map_err(|e| e.to_string()))
            .clone()
            .map_err(|e| Error::Argument(format!("training {topology} failed: {e}")))
    }

    pub fn len(&self) -> usize {
        self.slots.lock().expect("cache lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Train, quantize, run the integer datapath, estimate cost.
pub struct Pipeline<'a> {
    pub config: PipelineConfig,
    pub data: &'a Datasets,
    pub cost: CostParams,
    pub cache: TrainingCache,
}

impl<'a> Pipeline<'a> {
    pub fn new(config: PipelineConfig, data: &'a Datasets, cost: CostParams) -> Self {
        Pipeline {
            config,
            data,
            cost,
            cache: TrainingCache::default(),
        }
    }

    pub fn trained(&self, topology: Topology) -> Result<Arc<Trained>> {
        let cfg = &self.config.train;
        self.cache.get_or_train(topology, cfg.seed, || {
            let (net, _) = train_with_log(topology, &self.data.train, cfg, Execution::Sequential)?;
            let float_tpr = float_accuracy(&net, &self.data.test, Execution::Sequential)?;
            Ok(Trained { net, float_tpr })
        })
    }
}

impl PointEvaluator for Pipeline<'_> {
    fn evaluate(&self, topology: Topology, bits: u32) -> Result<EvaluationRecord> {
        evaluate_point(self, topology, bits)
    }

    fn prepare(&self, topologies: &[Topology], exec: Execution) {
        // Failures stay in the cache and surface per point.
        exec.map(topologies, |&t| self.trained(t).ok());
    }
}

/// Evaluates one design point with the pipeline's cached float network.
pub fn evaluate_point(p: &Pipeline<'_>, topology: Topology, bits: u32) -> Result<EvaluationRecord> {
    let start = Instant::now();
    let trained = p.trained(topology)?;
    let q = quantize(&trained.net, bits)?;
    let dp = DatapathConfig::for_network(&q, p.config.activation_bits, p.config.accumulator_bits)?;
    let tpr = evaluate_tpr_with(&q, &dp, &p.data.test, Execution::Sequential)?;
    let secondary = p
        .data
        .secondary
        .as_ref()
        .map(|d| evaluate_tpr_with(&q, &dp, d, Execution::Sequential))
        .transpose()?;
    let dsp = estimate_dsp(&q, &p.cost, p.config.cost_mode, p.config.strict_cost)?;
    let mut rec = EvaluationRecord::new(topology, bits, tpr, secondary, dsp, trained.float_tpr)?;
    rec.wall_time = start.elapsed().as_secs_f64();
    Ok(rec)
}

/// Records (sorted by key), failures (sorted by key) and their summary.
#[derive(Debug, Clone, PartialEq)]
pub struct Exploration {
    pub records: Vec<EvaluationRecord>,
    pub failures: Vec<PointFailure>,
    pub summary: Summary,
}

/// Evaluates every point of `b`. The result does not depend on `exec`.
pub fn explore(evaluator: &dyn PointEvaluator, b: &Boundaries, exec: Execution) -> Result<Exploration> {
    b.validate()?;
    let points = design_points(b);
    evaluator.prepare(&enumerate_topologies(b), exec);
    let results = exec.map(&points, |&(t, bits)| evaluator.evaluate(t, bits));
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for ((t, bits), r) in points.into_iter().zip(results) {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => failures.push(PointFailure {
                n1: t.n1,
                n2: t.n2,
                n3: t.n3,
                bits,
                error: e.to_string(),
            }),
        }
    }
    records.sort_by_key(EvaluationRecord::key);
    let summary = summarize(&records, &failures);
    Ok(Exploration {
        records,
        failures,
        summary,
    })
}

/// Outcome of a greedy walk.
#[derive(Debug, Clone, PartialEq)]
pub struct Climb {
    pub best: EvaluationRecord,
    /// Accepted points from the start to the local maximum.
    pub trace: Vec<EvaluationRecord>,
    /// Distinct points evaluated, neighbors included.
    pub evaluations: usize,
}

impl Climb {
    pub fn moves(&self) -> usize {
        self.trace.len() - 1
    }
}

/// The up-to-8 neighbors `n_i ± 1`, `B ± b_step` that lie inside `b`.
pub fn neighbors(b: &Boundaries, t: Topology, bits: u32) -> Vec<(Topology, u32)> {
    let mut out = Vec::with_capacity(8);
    for layer in 0..3 {
        for delta in [-1isize, 1] {
            let mut n = [t.n1, t.n2, t.n3];
            let v = n[layer] as isize + delta;
            if v < 1 {
                continue;
            }
            n[layer] = v as usize;
            out.push((
                Topology {
                    n1: n[0],
                    n2: n[1],
                    n3: n[2],
                },
                bits,
            ));
        }
    }
    if let Some(lower) = bits.checked_sub(b.b_step) {
        out.push((t, lower));
    }
    out.push((t, bits + b.b_step));
    out.retain(|(t, bits)| b.contains(t, *bits));
    out
}

/// Greedy best-neighbor ascent on TDR from `start`. Neighbors whose
/// evaluation fails are skipped; ties keep the earlier neighbor.
pub fn hill_climb(evaluator: &dyn PointEvaluator, start: (Topology, u32), b: &Boundaries) -> Result<Climb> {
    b.validate()?;
    if !b.contains(&start.0, start.1) {
        return Err(Error::Argument(format!(
            "start {} at B={} lies outside the boundaries",
            start.0, start.1
        )));
    }
    let mut current = evaluator.evaluate(start.0, start.1)?;
    let mut seen: BTreeMap<(Topology, u32), Option<EvaluationRecord>> = BTreeMap::new();
    seen.insert(start, Some(current.clone()));
    let mut eval = |key: (Topology, u32)| -> Option<EvaluationRecord> {
        seen.entry(key)
            .or_insert_with(|| evaluator.evaluate(key.0, key.1).ok())
            .clone()
    };
    let mut trace = vec![current.clone()];
    loop {
        let mut best: Option<EvaluationRecord> = None;
        for key in neighbors(b, current.topology(), current.bits) {
            if let Some(r) = eval(key) {
                if best.as_ref().is_none_or(|bst| r.tdr > bst.tdr) {
                    best = Some(r);
                }
            }
        }
        match best {
            Some(r) if r.tdr > current.tdr => {
                current = r;
                trace.push(current.clone());
            }
            _ => break,
        }
    }
    Ok(Climb {
        best: current,
        trace,
        evaluations: seen.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    /// Cheap synthetic landscape: accuracy grows with size and width, cost
    /// with neurons times width.
    struct Synthetic {
        calls: AtomicUsize,
    }

    impl Synthetic {
        fn new() -> Self {
            Synthetic {
                calls: AtomicUsize::new(0),
            }
        }
    }

    impl PointEvaluator for Synthetic {
        fn evaluate(&self, t: Topology, bits: u32) -> Result<EvaluationRecord> {
            self.calls.fetch_add(1, Ordering::Relaxed);
            let size = t.total_neurons() as f64;
            let tpr = 1.0 - 0.5 / (size * bits as f64).sqrt() - 0.01 * ((t.n2 * 7 + t.n3 * 3) % 5) as f64;
            let dsp = (t.total_neurons() as u64) * bits as u64 * bits as u64 + 20;
            EvaluationRecord::new(t, bits, tpr, None, dsp, 0.99)
        }
    }

    fn small() -> Boundaries {
        Boundaries {
            n1_range: [3, 4],
            n2_range: [5, 6],
            n3_range: [7, 8],
            b_range: [3, 7],
            step: 2,
            b_step: 2,
        }
    }

    #[test]
    fn default_space_has_76_topologies_and_380_points() {
        let b = Boundaries::default();
        assert_eq!(enumerate_topologies(&b).len(), 76);
        assert_eq!(design_points(&b).len(), 380);
    }

    #[test]
    fn small_spaces() {
        let single = Boundaries {
            n1_range: [3, 3],
            n2_range: [5, 5],
            n3_range: [7, 7],
            ..Boundaries::default()
        };
        assert_eq!(enumerate_topologies(&single), vec![Topology { n1: 3, n2: 5, n3: 7 }]);
        let got: Vec<(usize, usize, usize)> = enumerate_topologies(&small())
            .iter()
            .map(|t| (t.n1, t.n2, t.n3))
            .collect();
        assert_eq!(got, vec![(3, 5, 7), (3, 5, 8), (3, 6, 8), (4, 6, 8)]);
        assert_eq!(small().bit_widths(), vec![3, 5, 7]);
        let empty = Boundaries {
            n1_range: [5, 5],
            n2_range: [5, 6],
            ..Boundaries::default()
        };
        assert!(enumerate_topologies(&empty).is_empty());
    }

    #[test]
    fn tdr_examples() {
        assert!((tdr(64.8, 161).unwrap() - 0.4025).abs() < 5e-5);
        assert!((tdr(73.0, 245).unwrap() - 0.2980).abs() < 5e-5);
        assert_eq!(tdr(0.0, 17).unwrap(), 0.0);
        assert!(tdr(50.0, 0).is_err());
        assert!(tdr(101.0, 3).is_err());
    }

    #[test]
    fn boundaries_validation() {
        assert!(Boundaries::default().validate().is_ok());
        let bad = Boundaries {
            n2_range: [6, 5],
            ..Boundaries::default()
        };
        assert!(bad.validate().is_err());
        let bad = Boundaries {
            b_range: [1, 7],
            ..Boundaries::default()
        };
        assert!(bad.validate().is_err());
        let bad = Boundaries {
            step: 0,
            ..Boundaries::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn explore_visits_every_point_once() {
        let ev = Synthetic::new();
        let out = explore(&ev, &Boundaries::default(), Execution::Sequential).unwrap();
        assert_eq!(out.records.len(), 380);
        assert_eq!(ev.calls.load(Ordering::Relaxed), 380);
        assert!(out.failures.is_empty());
    }

    #[test]
    fn explore_is_independent_of_execution() {
        let a = explore(&Synthetic::new(), &small(), Execution::Sequential).unwrap();
        let b = explore(&Synthetic::new(), &small(), Execution::Parallel).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.records.len(), 12);
        let best = a.records.iter().max_by(|x, y| x.tdr.total_cmp(&y.tdr)).unwrap();
        assert_eq!(a.summary.best_tdr.as_ref().unwrap().key(), best.key());
    }

    struct Failing;

    impl PointEvaluator for Failing {
        fn evaluate(&self, t: Topology, bits: u32) -> Result<EvaluationRecord> {
            if bits == 5 {
                return Err(Error::Argument("synthetic failure".into()));
            }
            Synthetic::new().evaluate(t, bits)
        }
    }

    #[test]
    fn failures_are_recorded_and_skipped() {
        let out = explore(&Failing, &small(), Execution::Sequential).unwrap();
        assert_eq!(out.records.len(), 8);
        assert_eq!(out.failures.len(), 4);
        assert!(out.failures.iter().all(|f| f.bits == 5));
        assert_eq!(out.summary.failures, 4);
    }

    #[test]
    fn climb_from_every_start_never_loses() {
        let b = small();
        let all = explore(&Synthetic::new(), &b, Execution::Sequential).unwrap();
        let global = all.summary.best_tdr.clone().unwrap();
        for rec in &all.records {
            let ev = Synthetic::new();
            let c = hill_climb(&ev, rec.key(), &b).unwrap();
            assert!(c.best.tdr >= rec.tdr);
            assert!(c.evaluations <= all.records.len());
            assert_eq!(ev.calls.load(Ordering::Relaxed), c.evaluations);
            for w in c.trace.windows(2) {
                assert!(w[1].tdr > w[0].tdr);
            }
            if rec.key() == global.key() {
                assert_eq!(c.moves(), 0);
            }
        }
    }

    #[test]
    fn climb_rejects_outside_start() {
        let t = Topology { n1: 3, n2: 4, n3: 7 };
        assert!(hill_climb(&Synthetic::new(), (t, 3), &small()).is_err());
        let t = Topology { n1: 3, n2: 5, n3: 7 };
        assert!(hill_climb(&Synthetic::new(), (t, 4), &small()).is_err());
    }

    #[test]
    fn neighbors_respect_gap() {
        let b = Boundaries::default();
        let n = neighbors(&b, Topology { n1: 3, n2: 5, n3: 7 }, 3);
        let keys: Vec<_> = n.iter().map(|(t, bits)| (t.n1, t.n2, t.n3, *bits)).collect();
        // every other move leaves a range or breaks the inter-layer gap
        assert_eq!(keys, vec![(3, 5, 8, 3), (3, 5, 7, 4)]);
    }

    #[test]
    fn cache_trains_once_per_key() {
        let cache = TrainingCache::default();
        let calls = AtomicUsize::new(0);
        let t = Topology { n1: 1, n2: 1, n3: 1 };
        let make = || {
            calls.fetch_add(1, Ordering::Relaxed);
            Ok(Trained {
                net: FloatNetwork::zeros(t, 8),
                float_tpr: 0.5,
            })
        };
        cache.get_or_train(t, 1, make).unwrap();
        cache.get_or_train(t, 1, make).unwrap();
        cache.get_or_train(t, 2, make).unwrap();
        assert_eq!(calls.load(Ordering::Relaxed), 2);
        assert_eq!(cache.len(), 2);
    }

    /// Nested-range count: for each (n1, n2) the number of valid n3.
    fn count_formula(b: &Boundaries) -> usize {
        let mut total = 0;
        for n1 in b.n1_range[0]..=b.n1_range[1] {
            let lo2 = b.n2_range[0].max(n1 + b.step);
            for n2 in lo2..=b.n2_range[1] {
                let lo3 = b.n3_range[0].max(n2 + b.step);
                total += (b.n3_range[1] + 1).saturating_sub(lo3);
            }
        }
        total
    }

    proptest! {
        #[test]
        fn enumeration_matches_brute_force(
            a in 1usize..6, da in 0usize..4,
            c in 1usize..10, dc in 0usize..6,
            e in 1usize..14, de in 0usize..6,
            step in 1usize..4,
        ) {
            let b = Boundaries {
                n1_range: [a, a + da],
                n2_range: [c, c + dc],
                n3_range: [e, e + de],
                step,
                ..Boundaries::default()
            };
            let mut brute = Vec::new();
            for n1 in 1..=20 {
                for n2 in 1..=20 {
                    for n3 in 1..=20 {
                        let t = Topology { n1, n2, n3 };
                        if b.contains(&t, 3) {
                            brute.push(t);
                        }
                    }
                }
            }
            let listed = enumerate_topologies(&b);
            prop_assert_eq!(&listed, &brute);
            prop_assert_eq!(listed.len(), count_formula(&b));
        }

        #[test]
        fn tdr_argmax_survives_scaling(tprs in prop::collection::vec(0.0f64..1.0, 2..20), j in 0i32..6) {
            // power-of-two factors keep the comparison free of rounding ties
            let k = 2f64.powi(-j);
            let dsps: Vec<u64> = (0..tprs.len() as u64).map(|i| 100 + 37 * i % 90).collect();
            let arg = |scale: f64| {
                let v: Vec<f64> = tprs.iter().zip(&dsps).map(|(t, &d)| tdr(100.0 * t * scale, d).unwrap()).collect();
                crate::model::argmax(&v)
            };
            prop_assert_eq!(arg(1.0), arg(k));
        }
    }
}
