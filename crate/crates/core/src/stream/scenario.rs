//! Streaming scenarios: a sequence of (update, query) steps over a fixed
//! vector file, built by clustering the file and replaying it cluster by
//! cluster so that both data and queries drift.

use std::collections::{HashSet, VecDeque};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vecs::Vectors;
use crate::baselines::kmeans::kmeans;
use crate::error::{Error, Result};
use crate::quantizer::{squared_distance, PointId};
use crate::rng::rng_for;

pub const SCENARIO_VERSION: u32 = 1;

// Substreams of the scenario seed. Query sampling has its own stream so the
// data sequence is identical for every freshness value.
const KMEANS: u64 = 1;
const ORDER: u64 = 2;
const FIRST_QUERIES: u64 = 3;
const CANDIDATES: u64 = 4;
const PARTS: u64 = 5;
const TIES: u64 = 6;
const QUERIES: u64 = 7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamParams {
    /// Number of k-means clusters `c`.
    pub clusters: usize,
    /// Minimum size of the initial set, `n_0`.
    pub n0: usize,
    /// Query fraction `f_q`.
    pub fq: f64,
    /// Steps per cluster `τ`.
    pub tau: usize,
    /// Query freshness `α`.
    pub alpha: f64,
    /// Delete fraction `f_d`.
    pub fd: f64,
    pub seed: u64,
}

impl StreamParams {
    /// The recall-experiment defaults for a dataset of `n` vectors:
    /// `n_0 = n/10`, `c = τ = 10`, `f_q = 0.1`, `f_d = 1`, `α = 1`.
    pub fn defaults(n: usize, seed: u64) -> Self {
        StreamParams { clusters: 10, n0: n / 10, fq: 0.1, tau: 10, alpha: 1.0, fd: 1.0, seed }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if !(self.fq > 0.0 && self.fq < 1.0) {
            return cfg(format!("query fraction {} is outside (0, 1)", self.fq));
        }
        if !(0.0..=1.0).contains(&self.fd) {
            return cfg(format!("delete fraction {} is outside [0, 1]", self.fd));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return cfg(format!("freshness {} is outside [0, 1]", self.alpha));
        }
        if self.n0 == 0 || self.n0 >= n {
            return cfg(format!("initial size {} must lie in [1, {n})", self.n0));
        }
        if self.clusters == 0 || self.clusters > n {
            return cfg(format!("cannot form {} clusters from {n} vectors", self.clusters));
        }
        if self.tau == 0 {
            return cfg("at least one step per cluster is needed".into());
        }
        Ok(())
    }
}

/// One `(U_t, Q_t)` pair. Ids are row indices of the vector file.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub t: usize,
    pub inserts: Vec<PointId>,
    pub deletes: Vec<PointId>,
    pub queries: Vec<PointId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub params: StreamParams,
    /// Rows in the vector file the ids refer to.
    pub rows: usize,
    /// Free-form provenance (tool, vector file) kept in the file header.
    pub source: Option<String>,
    pub steps: Vec<Step>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    rows: usize,
    params: StreamParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source: Option<String>,
}

fn ceil_frac(f: f64, n: usize) -> usize {
    (f * n as f64).ceil() as usize
}

fn mean_of(data: &Vectors<f32>, ids: &[PointId]) -> Vec<f64> {
    let mut m = vec![0.0; data.dim];
    for &i in ids {
        for (a, &v) in m.iter_mut().zip(data.row(i as usize)) {
            *a += v as f64;
        }
    }
    m.iter_mut().for_each(|a| *a /= ids.len() as f64);
    m
}

fn shuffled<R: Rng>(mut ids: Vec<PointId>, rng: &mut R) -> Vec<PointId> {
    ids.sort_unstable();
    ids.shuffle(rng);
    ids
}

/// Splits `ids` into `parts` consecutive chunks whose sizes differ by at most one.
fn split_even(ids: &[PointId], parts: usize) -> Vec<Vec<PointId>> {
    let (q, r) = (ids.len() / parts, ids.len() % parts);
    let mut out = Vec::with_capacity(parts);
    let mut at = 0;
    for p in 0..parts {
        let len = q + usize::from(p < r);
        out.push(ids[at..at + len].to_vec());
        at += len;
    }
    out
}

/// Weighted sampling without replacement (Efraimidis–Spirakis): every item
/// with positive weight draws the key `ln(u)/w` and the `size` largest win.
fn weighted_sample<R: Rng>(items: &[(PointId, f64)], size: usize, rng: &mut R) -> Result<Vec<PointId>> {
    let mut keyed: Vec<(f64, PointId)> = items
        .iter()
        .filter(|(_, w)| *w > 0.0)
        .map(|&(id, w)| {
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            (u.ln() / w, id)
        })
        .collect();
    if keyed.len() < size {
        return Err(Error::Config(format!("cannot sample {size} queries from {} candidates", keyed.len())));
    }
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(keyed[..size].iter().map(|k| k.1).collect())
}

/// `(1-α)^|j-i|` with `0^0 = 1`.
fn freshness_weight(alpha: f64, gap: usize) -> f64 {
    if gap == 0 {
        1.0
    } else {
        (1.0 - alpha).powi(gap as i32)
    }
}

/// Builds the streaming scenario for `data`.
///
/// Clusters come from k-means on the full vectors. The first clusters in a
/// shuffled order form the initial set (minus its queries); the rest are
/// visited by increasing distance from the initial set's mean, each one
/// inserted in `τ` near-even parts. Deletes remove the oldest live points,
/// with ties between points inserted in the same step broken at random.
pub fn construct_stream(data: &Vectors<f32>, params: &StreamParams) -> Result<Scenario> {
    let n = data.len();
    params.validate(n)?;
    let d = data.dim;

    let flat: Vec<f64> = data.data.iter().map(|&v| v as f64).collect();
    let fit = kmeans(&flat, d, params.clusters, &mut rng_for(params.seed, KMEANS))?;
    drop(flat);
    let mut clusters: Vec<Vec<PointId>> = vec![Vec::new(); params.clusters];
    for (i, &a) in fit.assignment.iter().enumerate() {
        clusters[a as usize].push(i as PointId);
    }
    clusters.retain(|c| !c.is_empty());
    clusters.shuffle(&mut rng_for(params.seed, ORDER));

    let mut total = 0;
    let j = clusters
        .iter()
        .position(|c| {
            total += c.len();
            total >= params.n0
        })
        .expect("n0 < n");
    let initial: Vec<PointId> = clusters[..=j].concat();
    let initial = shuffled(initial, &mut rng_for(params.seed, FIRST_QUERIES));
    let q0 = ceil_frac(params.fq, initial.len());
    if q0 >= initial.len() {
        return Err(Error::Config(format!("{q0} queries leave no initial points out of {}", initial.len())));
    }
    let (first_queries, first_inserts) = initial.split_at(q0);

    let center = mean_of(data, first_inserts);
    let mut rest: Vec<(f64, Vec<PointId>)> =
        clusters.drain(j + 1..).map(|c| (squared_distance(&mean_of(data, &c), &center), c)).collect();
    rest.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut cand_rng = rng_for(params.seed, CANDIDATES);
    let mut part_rng = rng_for(params.seed, PARTS);
    let mut candidates = vec![first_queries.to_vec()];
    let mut parts = Vec::with_capacity(rest.len());
    for (_, c) in rest {
        let c = shuffled(c, &mut cand_rng);
        let q = ceil_frac(params.fq, c.len());
        if c.len() - q.min(c.len()) < params.tau {
            return Err(Error::Config(format!(
                "a cluster of {} points cannot be split into {} non-empty parts after sampling {q} queries",
                c.len(),
                params.tau
            )));
        }
        candidates.push(c[..q].to_vec());
        let remainder = shuffled(c[q..].to_vec(), &mut part_rng);
        parts.push(split_even(&remainder, params.tau));
    }

    let mut tie_rng = rng_for(params.seed, TIES);
    let mut query_rng = rng_for(params.seed, QUERIES);
    let mut queue: VecDeque<PointId> = shuffled(first_inserts.to_vec(), &mut tie_rng).into();
    let mut steps = vec![Step {
        t: 0,
        inserts: first_inserts.to_vec(),
        deletes: Vec::new(),
        queries: first_queries.to_vec(),
    }];
    for (i, cluster_parts) in parts.into_iter().enumerate() {
        let i = i + 1;
        let pool: Vec<(PointId, f64)> = candidates[..=i]
            .iter()
            .enumerate()
            .flat_map(|(jj, c)| {
                let w = freshness_weight(params.alpha, i - jj);
                c.iter().map(move |&id| (id, w))
            })
            .collect();
        for inserts in cluster_parts {
            let t = steps.len();
            // A part can outnumber the live set; then every live point goes.
            let dels = ceil_frac(params.fd, inserts.len()).min(queue.len());
            let deletes: Vec<PointId> = queue.drain(..dels).collect();
            let queries = weighted_sample(&pool, ceil_frac(params.fq, inserts.len()), &mut query_rng)?;
            queue.extend(shuffled(inserts.clone(), &mut tie_rng));
            steps.push(Step { t, inserts, deletes, queries });
        }
    }
    Ok(Scenario { params: *params, rows: n, source: None, steps })
}

impl Scenario {
    pub fn iterations(&self) -> usize {
        self.steps.len()
    }

    /// Checks ids and update validity: every insert is new, every delete is
    /// live, and queries never touch the indexed set.
    pub fn validate(&self) -> Result<()> {
        let mut live: HashSet<PointId> = HashSet::new();
        let in_range = |id: &PointId| (*id as usize) < self.rows;
        for (t, s) in self.steps.iter().enumerate() {
            let bad = |m: &str| Err(Error::Data(format!("step {t}: {m}")));
            if s.t != t {
                return bad("steps are out of order");
            }
            if !s.inserts.iter().chain(&s.deletes).chain(&s.queries).all(in_range) {
                return bad("id outside the vector file");
            }
            for id in &s.deletes {
                if !live.remove(id) {
                    return bad("deletes a point that is not live");
                }
            }
            for &id in &s.inserts {
                if !live.insert(id) {
                    return bad("inserts a live point");
                }
            }
            if s.queries.iter().any(|q| live.contains(q)) {
                return bad("queries an indexed point");
            }
        }
        Ok(())
    }

    /// Live ids after step `t`, ascending.
    pub fn live_after(&self, t: usize) -> Vec<PointId> {
        let mut live = HashSet::new();
        for s in &self.steps[..=t] {
            for id in &s.deletes {
                live.remove(id);
            }
            live.extend(s.inserts.iter().copied());
        }
        let mut ids: Vec<_> = live.into_iter().collect();
        ids.sort_unstable();
        ids
    }

    /// JSON lines: a header with the version and parameters, then one step per line.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        let header = Header { version: SCENARIO_VERSION, rows: self.rows, params: self.params, source: self.source.clone() };
        serde_json::to_writer(&mut out, &header).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
        for s in &self.steps {
            serde_json::to_writer(&mut out, s).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let first = lines.next().ok_or_else(|| Error::Data("empty scenario file".into()))??;
        let header: Header = serde_json::from_str(&first).map_err(|e| Error::Data(format!("scenario header: {e}")))?;
        if header.version != SCENARIO_VERSION {
            return Err(Error::Data(format!("unsupported scenario version {}", header.version)));
        }
        let mut steps = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            steps.push(serde_json::from_str(&line).map_err(|e| Error::Data(format!("scenario line {}: {e}", i + 2)))?);
        }
        let sc = Scenario { params: header.params, rows: header.rows, source: header.source, steps };
        sc.validate()?;
        Ok(sc)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_jsonl(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_jsonl(BufReader::new(File::open(path)?))
    }
}
