//! Replaying scenarios against quantizers, and the single-insert I/O cost
//! experiment.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::eval::{ground_truth, normalize, recall_at};
use super::scenario::Scenario;
use super::vecs::Vectors;
use crate::baselines::{DeDriftPq, DedriftConfig, FrozenPq, OnlinePq, PqConfig, RebuildPq};
use crate::codeq::{Codeq, CodeqConfig};
use crate::error::{invalid, Error, Result};
use crate::quadsketch::{QsParams, QuadSketch};
use crate::quantizer::{Neighbor, PointId, Quantizer};
use crate::rng::{derive, rng_for};
use crate::store::{IoLedger, IoReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Codeq,
    FrozenPq,
    RebuildPq,
    OnlinePq,
    DeDriftPq,
    QuadSketch,
}

impl Method {
    pub const ALL: [Method; 6] =
        [Method::Codeq, Method::FrozenPq, Method::RebuildPq, Method::OnlinePq, Method::DeDriftPq, Method::QuadSketch];

    pub fn name(self) -> &'static str {
        match self {
            Method::Codeq => "codeq",
            Method::FrozenPq => "frozenpq",
            Method::RebuildPq => "rebuildpq",
            Method::OnlinePq => "onlinepq",
            Method::DeDriftPq => "dedriftpq",
            Method::QuadSketch => "quadsketch",
        }
    }

    /// Whether `blocks` and `bits` mean anything to this method.
    pub fn uses_codebooks(self) -> bool {
        self != Method::QuadSketch
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

/// Everything needed to build any method on a given dimension.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    pub blocks: usize,
    pub bits: usize,
    pub seed: u64,
    /// RebuildPQ retrains after this many batches.
    pub rebuild_period: usize,
    pub dedrift: DedriftConfig,
    pub qs_epsilon: f64,
    pub qs_delta: f64,
}

impl MethodConfig {
    pub fn new(blocks: usize, bits: usize, seed: u64) -> Self {
        MethodConfig {
            blocks,
            bits,
            seed,
            rebuild_period: 1,
            dedrift: DedriftConfig::new(dedrift_m(bits)),
            qs_epsilon: 0.5,
            qs_delta: 0.1,
        }
    }
}

/// Smallest `m ≥ 1` that splits at least 2% of the `2^bits` clusters.
pub fn dedrift_m(bits: usize) -> usize {
    ((0.02 * (1u64 << bits) as f64).ceil() as usize).max(1)
}

fn gather(data: &Vectors<f32>, ids: &[PointId]) -> Vec<f32> {
    let mut out = Vec::with_capacity(ids.len() * data.dim);
    for &id in ids {
        out.extend_from_slice(data.row(id as usize));
    }
    out
}

/// Builds `method` on the rows `ids` of `data`.
///
/// QuadSketch needs points on a grid of unit minimum spacing, so its input is
/// translated and scaled using the whole of `data`; see [`Rescaled`].
pub fn build_method(method: Method, cfg: &MethodConfig, data: &Vectors<f32>, ids: &[PointId]) -> Result<Box<dyn Quantizer>> {
    let d = data.dim;
    if let Some(&bad) = ids.iter().find(|&&id| id as usize >= data.len()) {
        return Err(invalid(format!("id {bad} is outside the {} rows", data.len())));
    }
    let rows = gather(data, ids);
    let pq = PqConfig::new(d, cfg.blocks, cfg.bits, cfg.seed);
    Ok(match method {
        Method::Codeq => Box::new(Codeq::build(CodeqConfig::new(d, cfg.blocks, cfg.bits, cfg.seed), ids, &rows)?),
        Method::FrozenPq => Box::new(FrozenPq::build(pq, ids, &rows)?),
        Method::RebuildPq => Box::new(RebuildPq::build(pq, ids, &rows, cfg.rebuild_period)?),
        Method::OnlinePq => Box::new(OnlinePq::build(pq, ids, &rows)?),
        Method::DeDriftPq => Box::new(DeDriftPq::build(pq, ids, &rows, cfg.dedrift)?),
        Method::QuadSketch => {
            let (offset, scale, phi) = unit_spacing(data)?;
            let params = QsParams::new(cfg.qs_epsilon, cfg.qs_delta, phi, cfg.seed);
            let mapped: Vec<f32> = rows.chunks(d).flat_map(|x| map_point(x, &offset, scale)).collect();
            Box::new(Rescaled { inner: QuadSketch::build(d, params, ids, &mapped)?, offset, scale })
        }
    })
}

fn map_point(x: &[f32], offset: &[f64], scale: f64) -> Vec<f32> {
    x.iter().zip(offset).map(|(&v, &o)| ((v as f64 - o) * scale) as f32).collect()
}

/// Per-coordinate minimum, the factor taking the closest pair to distance 1,
/// and the resulting bound on coordinates and aspect ratio.
fn unit_spacing(data: &Vectors<f32>) -> Result<(Vec<f64>, f64, f64)> {
    let d = data.dim;
    if data.len() < 2 {
        return Err(Error::Data("at least two vectors are needed to fix the grid scale".into()));
    }
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for i in 0..data.len() {
        for (j, &v) in data.row(i).iter().enumerate() {
            lo[j] = lo[j].min(v as f64);
            hi[j] = hi[j].max(v as f64);
        }
    }
    // Closest pair by a sweep along the first coordinate.
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by(|&a, &b| data.row(a)[0].total_cmp(&data.row(b)[0]));
    let mut best = f64::INFINITY;
    for (p, &a) in order.iter().enumerate() {
        let xa = data.row(a);
        for &b in &order[p + 1..] {
            let xb = data.row(b);
            let gap = xb[0] as f64 - xa[0] as f64;
            if gap * gap >= best {
                break;
            }
            best = best.min(xa.iter().zip(xb).map(|(&u, &v)| (u as f64 - v as f64).powi(2)).sum());
        }
    }
    if best == 0.0 {
        return Err(Error::Data("duplicate vectors cannot share a quadtree leaf".into()));
    }
    let scale = 1.0 / best.sqrt();
    let diag = lo.iter().zip(&hi).map(|(a, b)| (b - a).powi(2)).sum::<f64>().sqrt();
    Ok((lo, scale, (diag * scale).max(2.0)))
}

/// A quantizer fed translated and uniformly scaled vectors. Neighbor order is
/// unchanged; reported distances are mapped back to input units.
pub struct Rescaled<Q> {
    inner: Q,
    offset: Vec<f64>,
    scale: f64,
}

impl<Q> Rescaled<Q> {
    pub fn inner(&self) -> &Q {
        &self.inner
    }

    fn unscale(&self, mut found: Vec<Neighbor>) -> Vec<Neighbor> {
        found.iter_mut().for_each(|n| n.distance /= self.scale);
        found
    }
}

impl<Q: Quantizer> Quantizer for Rescaled<Q> {
    fn name(&self) -> &'static str {
        self.inner.name()
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn len(&self) -> usize {
        self.inner.len()
    }

    fn insert(&mut self, id: PointId, x: &[f32]) -> Result<()> {
        let y = map_point(x, &self.offset, self.scale);
        self.inner.insert(id, &y)
    }

    fn delete(&mut self, id: PointId, x: &[f32]) -> Result<()> {
        let y = map_point(x, &self.offset, self.scale);
        self.inner.delete(id, &y)
    }

    fn finish_batch(&mut self) -> Result<()> {
        self.inner.finish_batch()
    }

    fn knn_query(&self, q: &[f32], k: usize) -> Result<Vec<Neighbor>> {
        let found = self.inner.knn_query(&map_point(q, &self.offset, self.scale), k)?;
        Ok(self.unscale(found))
    }

    fn knn_rerank(&self, q: &[f32], k: usize, k_prime: usize) -> Result<Vec<Neighbor>> {
        let found = self.inner.knn_rerank(&map_point(q, &self.offset, self.scale), k, k_prime)?;
        Ok(self.unscale(found))
    }

    fn ledger(&self) -> &IoLedger {
        self.inner.ledger()
    }
}

/// Exact top-`k` ids for every query of every step.
pub struct Truth {
    pub k: usize,
    pub per_step: Vec<Vec<Vec<PointId>>>,
}

impl Truth {
    pub fn compute(data: &Vectors<f32>, scenario: &Scenario, k: usize) -> Result<Self> {
        check_rows(data, scenario)?;
        let mut live = BTreeSet::new();
        let mut per_step = Vec::with_capacity(scenario.steps.len());
        for s in &scenario.steps {
            for id in &s.deletes {
                live.remove(id);
            }
            live.extend(s.inserts.iter().copied());
            let ids: Vec<PointId> = live.iter().copied().collect();
            let step = s
                .queries
                .iter()
                .map(|&q| ground_truth(data, &ids, data.row(q as usize), k))
                .collect::<Result<_>>()?;
            per_step.push(step);
        }
        Ok(Truth { k, per_step })
    }
}

fn check_rows(data: &Vectors<f32>, scenario: &Scenario) -> Result<()> {
    if scenario.rows != data.len() {
        return Err(Error::Data(format!("scenario refers to {} rows, the vector file has {}", scenario.rows, data.len())));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    /// Vectors inserted so far, counting the initial set.
    pub vectors_streamed: usize,
    /// Mean over the step's queries.
    pub recall_at_k: f64,
    pub recall_at_kprime: f64,
    /// I/O of the step's update windows.
    pub update_io: IoReport,
    /// Reads attributed to the step's `knn_query` calls.
    pub query_io: IoReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub method: String,
    pub k: usize,
    pub k_prime: usize,
    pub steps: Vec<StepRecord>,
}

impl RecallReport {
    pub fn recall_at_k(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.recall_at_k).collect()
    }

    pub fn recall_at_kprime(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.recall_at_kprime).collect()
    }

    pub fn query_reads(&self) -> u64 {
        self.steps.iter().map(|s| s.query_io.read_rounds).sum()
    }
}

/// Replays `scenario` on `quantizer`, which must already hold `X_0`.
pub fn run_scenario(
    quantizer: &mut dyn Quantizer,
    data: &Vectors<f32>,
    scenario: &Scenario,
    k: usize,
    k_prime: usize,
) -> Result<RecallReport> {
    let truth = Truth::compute(data, scenario, k)?;
    run_scenario_with(quantizer, data, scenario, &truth, k_prime)
}

/// As [`run_scenario`], reusing ground truth shared between methods.
///
/// Each step applies the deletes, then the inserts, closes the batch, and
/// finally answers the queries. Recall is computed from the in-memory
/// `knn_query` candidates, so queries never read the disk.
pub fn run_scenario_with(
    quantizer: &mut dyn Quantizer,
    data: &Vectors<f32>,
    scenario: &Scenario,
    truth: &Truth,
    k_prime: usize,
) -> Result<RecallReport> {
    check_rows(data, scenario)?;
    let k = truth.k;
    if k_prime < k {
        return Err(Error::Config(format!("k' = {k_prime} is below k = {k}")));
    }
    let first = &scenario.steps.first().ok_or_else(|| Error::Data("scenario has no steps".into()))?.inserts;
    if quantizer.len() != first.len() {
        return Err(invalid(format!("quantizer holds {} points, the initial set has {}", quantizer.len(), first.len())));
    }
    let mut streamed = 0;
    let mut steps = Vec::with_capacity(scenario.steps.len());
    for (s, expected) in scenario.steps.iter().zip(&truth.per_step) {
        let before = quantizer.ledger().updates();
        if s.t > 0 {
            for &id in &s.deletes {
                quantizer.delete(id, data.row(id as usize))?;
            }
            for &id in &s.inserts {
                quantizer.insert(id, data.row(id as usize))?;
            }
            quantizer.finish_batch()?;
        }
        streamed += s.inserts.len();
        let update_io = quantizer.ledger().updates().since(&before);

        let before = quantizer.ledger().query_reads();
        let (mut at_k, mut at_kp) = (0.0, 0.0);
        for (&q, exact) in s.queries.iter().zip(expected) {
            let found: Vec<PointId> = quantizer.knn_query(data.row(q as usize), k_prime)?.iter().map(|n| n.id).collect();
            at_k += recall_at(&found, exact, k, k)?;
            at_kp += recall_at(&found, exact, k, k_prime)?;
        }
        let nq = s.queries.len().max(1) as f64;
        steps.push(StepRecord {
            t: s.t,
            vectors_streamed: streamed,
            recall_at_k: at_k / nq,
            recall_at_kprime: at_kp / nq,
            update_io,
            query_io: quantizer.ledger().query_reads().since(&before),
        });
    }
    Ok(RecallReport { method: quantizer.name().to_string(), k, k_prime, steps })
}

/// Writes the recall CSV, one row per method and step. With a reference
/// report, recall columns are ratios to the reference at the same step.
pub fn write_recall_csv<W: Write>(mut out: W, reports: &[RecallReport], reference: Option<&RecallReport>) -> Result<()> {
    writeln!(out, "t,vectors_streamed,method,recall_k_at_k,recall_k_at_kprime,read_rounds,words_read")?;
    for r in reports {
        let (at_k, at_kp) = match reference {
            Some(base) => {
                if base.steps.len() != r.steps.len() {
                    return Err(invalid("reference report covers a different scenario"));
                }
                (normalize(&r.recall_at_k(), &base.recall_at_k()), normalize(&r.recall_at_kprime(), &base.recall_at_kprime()))
            }
            None => (r.recall_at_k(), r.recall_at_kprime()),
        };
        for (i, s) in r.steps.iter().enumerate() {
            writeln!(
                out,
                "{},{},{},{:.6},{:.6},{},{}",
                s.t, s.vectors_streamed, r.method, at_k[i], at_kp[i], s.update_io.read_rounds, s.update_io.words_read
            )?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IoCostRow {
    pub n: usize,
    pub bits: usize,
    pub method: Method,
    /// Full-precision vectors needed by each trial insert.
    pub samples: Vec<usize>,
    pub mean: f64,
    pub std_error: f64,
}

impl IoCostRow {
    fn new(n: usize, bits: usize, method: Method, samples: Vec<usize>) -> Self {
        let t = samples.len() as f64;
        let mean = samples.iter().sum::<usize>() as f64 / t;
        let var = if samples.len() > 1 {
            samples.iter().map(|&s| (s as f64 - mean).powi(2)).sum::<f64>() / (t - 1.0)
        } else {
            0.0
        };
        IoCostRow { n, bits, method, samples, mean, std_error: (var / t).sqrt() }
    }
}

pub fn write_io_csv<W: Write>(mut out: W, rows: &[IoCostRow]) -> Result<()> {
    writeln!(out, "n,bits,method,trials,mean_vectors_read,std_error")?;
    for r in rows {
        writeln!(out, "{},{},{},{},{:.4},{:.4}", r.n, r.bits, r.method, r.samples.len(), r.mean, r.std_error)?;
    }
    Ok(())
}

/// Vectors each method needs from disk for one insert into a quantizer built
/// on `n` sampled rows, for every `n` in `sizes` and every codebook size.
///
/// CoDEQ counts the heaps an insert changes; DeDriftPQ counts the distinct
/// ids in the clusters its trigger flags. Each trial inserts a different
/// held-out row into the same built index, as a dry run.
pub fn io_cost_experiment(
    data: &Vectors<f32>,
    sizes: &[usize],
    bits: &[usize],
    blocks: usize,
    trials: usize,
    seed: u64,
) -> Result<Vec<IoCostRow>> {
    if trials == 0 {
        return Err(Error::Config("at least one trial is needed".into()));
    }
    let mut rows = Vec::new();
    for &n in sizes {
        if n + trials > data.len() {
            return Err(Error::Data(format!("{n} points plus {trials} trial inserts exceed the {} rows", data.len())));
        }
        let picked: Vec<PointId> =
            sample(&mut rng_for(seed, n as u64), data.len(), n + trials).into_iter().map(|i| i as PointId).collect();
        let (base, held) = picked.split_at(n);
        let x = gather(data, base);
        for &b in bits {
            let build_seed = derive(seed, b as u64);
            let codeq = Codeq::build(CodeqConfig::new(data.dim, blocks, b, build_seed), base, &x)?;
            let samples = held.iter().map(|&id| codeq.insert_cost(data.row(id as usize))).collect::<Result<_>>()?;
            rows.push(IoCostRow::new(n, b, Method::Codeq, samples));
            drop(codeq);

            let pq = PqConfig::new(data.dim, blocks, b, build_seed);
            let dd = DeDriftPq::build(pq, base, &x, DedriftConfig::new(dedrift_m(b)))?;
            let samples = held.iter().map(|&id| dd.insert_cost(data.row(id as usize))).collect::<Result<_>>()?;
            rows.push(IoCostRow::new(n, b, Method::DeDriftPq, samples));
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::scenario::{construct_stream, StreamParams};
    use crate::stream::synth::{drifting_mixture, MixtureConfig};

    fn setup(n: usize) -> (Vectors<f32>, Scenario) {
        let mut cfg = MixtureConfig::new(n, 8, 5, 4);
        cfg.drift = 6.0;
        let x = drifting_mixture(&cfg).unwrap().0;
        let p = StreamParams { clusters: 5, n0: n / 5, fq: 0.1, tau: 3, alpha: 1.0, fd: 1.0, seed: 2 };
        let sc = construct_stream(&x, &p).unwrap();
        (x, sc)
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("ivf".parse::<Method>().is_err());
        assert_eq!((dedrift_m(4), dedrift_m(6), dedrift_m(12)), (1, 2, 82));
    }

    #[test]
    fn rebuild_normalized_by_itself_is_one() {
        let (x, sc) = setup(1500);
        let cfg = MethodConfig::new(2, 4, 1);
        let mut q = build_method(Method::RebuildPq, &cfg, &x, &sc.steps[0].inserts).unwrap();
        let report = run_scenario(q.as_mut(), &x, &sc, 10, 50).unwrap();
        assert_eq!(report.steps.len(), sc.steps.len());
        let ratio = normalize(&report.recall_at_k(), &report.recall_at_k());
        assert!(ratio.iter().all(|&r| r == 1.0));
        let mut csv = Vec::new();
        write_recall_csv(&mut csv, std::slice::from_ref(&report), Some(&report)).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), sc.steps.len() + 1);
        assert!(text.lines().skip(1).all(|l| l.split(',').nth(3) == Some("1.000000")));
    }

    #[test]
    fn every_method_runs_without_query_reads() {
        let (x, sc) = setup(1200);
        let truth = Truth::compute(&x, &sc, 10).unwrap();
        let cfg = MethodConfig::new(2, 3, 5);
        for m in Method::ALL {
            let mut q = build_method(m, &cfg, &x, &sc.steps[0].inserts).unwrap();
            let a = run_scenario_with(q.as_mut(), &x, &sc, &truth, 50).unwrap();
            assert_eq!(a.query_reads(), 0, "{m}");
            for s in &a.steps {
                assert!((0.0..=1.0).contains(&s.recall_at_k));
                assert!(s.recall_at_kprime >= s.recall_at_k, "{m} step {}", s.t);
            }
            // Deterministic under the same seeds.
            let mut again = build_method(m, &cfg, &x, &sc.steps[0].inserts).unwrap();
            assert_eq!(run_scenario_with(again.as_mut(), &x, &sc, &truth, 50).unwrap(), a, "{m}");
            let reads: u64 = a.steps.iter().map(|s| s.update_io.read_rounds).sum();
            match m {
                Method::FrozenPq | Method::OnlinePq => assert_eq!(reads, 0),
                Method::RebuildPq => assert_eq!(reads, sc.steps.len() as u64 - 1),
                _ => {}
            }
        }
    }

    #[test]
    fn io_costs_are_reported_per_size() {
        let x = drifting_mixture(&MixtureConfig::new(700, 8, 4, 1)).unwrap().0;
        let rows = io_cost_experiment(&x, &[100, 600], &[2], 2, 10, 3).unwrap();
        assert_eq!(rows.len(), 4);
        for r in &rows {
            assert_eq!(r.samples.len(), 10);
            assert!(r.std_error >= 0.0);
        }
        assert_eq!(rows, io_cost_experiment(&x, &[100, 600], &[2], 2, 10, 3).unwrap());
        assert!(io_cost_experiment(&x, &[695], &[2], 2, 10, 3).is_err());
    }

    #[test]
    fn std_error_matches_hand_computation() {
        let r = IoCostRow::new(1, 1, Method::Codeq, vec![1, 2, 3, 4]);
        assert_eq!(r.mean, 2.5);
        // Sample variance 5/3, over 4 trials.
        assert!((r.std_error - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn mismatched_quantizer_is_rejected() {
        let (x, sc) = setup(800);
        let cfg = MethodConfig::new(2, 3, 5);
        let mut q = build_method(Method::FrozenPq, &cfg, &x, &sc.steps[1].inserts).unwrap();
        assert!(run_scenario(q.as_mut(), &x, &sc, 10, 50).is_err());
    }
}
