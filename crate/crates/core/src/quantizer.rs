//! The interface shared by every streaming quantizer, and the asymmetric
//! distance computation (ADC) they all answer queries with.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::store::{decode_f64s, DiskAddress, DiskStore, IoLedger};

pub type PointId = u64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: PointId,
    pub distance: f64,
}

/// A quantizer maintained under a stream of inserts and deletes.
///
/// Deletes are handed the vector being removed, as a streaming system would
/// have it at hand; methods that need it from disk ignore the argument.
pub trait Quantizer {
    fn name(&self) -> &'static str;
    fn dim(&self) -> usize;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn insert(&mut self, id: PointId, x: &[f32]) -> Result<()>;
    fn delete(&mut self, id: PointId, x: &[f32]) -> Result<()>;
    /// Called once after every batch of updates.
    fn finish_batch(&mut self) -> Result<()> {
        Ok(())
    }
    /// `k` approximate nearest neighbors using memory only.
    fn knn_query(&self, q: &[f32], k: usize) -> Result<Vec<Neighbor>>;
    /// Re-ranks `k_prime` ADC candidates by exact distance with one read round.
    fn knn_rerank(&self, q: &[f32], k: usize, k_prime: usize) -> Result<Vec<Neighbor>>;
    fn ledger(&self) -> &IoLedger;
}

pub(crate) fn to_f64(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

pub(crate) fn check_vector(x: &[f32], dim: usize) -> Result<()> {
    if x.len() != dim {
        return Err(invalid(format!("vector has {} components, expected {dim}", x.len())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(invalid("vector has a non-finite component"));
    }
    Ok(())
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Clone, Copy, PartialEq)]
struct Candidate {
    dist: f64,
    id: PointId,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist.total_cmp(&other.dist).then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// The `k` smallest `(id, squared distance)` pairs, ordered by (distance, id),
/// with distances converted to Euclidean.
pub fn top_k(items: impl IntoIterator<Item = (PointId, f64)>, k: usize) -> Vec<Neighbor> {
    if k == 0 {
        return Vec::new();
    }
    let mut heap = BinaryHeap::with_capacity(k + 1);
    for (id, dist) in items {
        let c = Candidate { dist, id };
        if heap.len() < k {
            heap.push(c);
        } else if c < *heap.peek().unwrap() {
            heap.pop();
            heap.push(c);
        }
    }
    heap.into_sorted_vec().into_iter().map(|c| Neighbor { id: c.id, distance: c.dist.sqrt() }).collect()
}

/// Per-block lookup tables of squared distances from a query to every codeword.
pub struct AdcTable {
    k: usize,
    table: Vec<f64>,
}

impl AdcTable {
    /// `codebooks[m]` is a row-major `k × width` matrix for block `m`; blocks
    /// cover consecutive slices of `q` of width `q.len() / codebooks.len()`.
    pub fn new(q: &[f64], codebooks: &[&[f64]], k: usize) -> Self {
        let width = q.len() / codebooks.len();
        let mut table = Vec::with_capacity(codebooks.len() * k);
        for (m, cb) in codebooks.iter().enumerate() {
            let qs = &q[m * width..(m + 1) * width];
            for c in cb.chunks_exact(width) {
                table.push(squared_distance(qs, c));
            }
        }
        AdcTable { k, table }
    }

    pub fn distance_sq(&self, code: &[u32]) -> f64 {
        code.iter().enumerate().map(|(m, &c)| self.table[m * self.k + c as usize]).sum()
    }
}

/// Concatenates the codewords named by `code`.
pub fn decompress(codebooks: &[&[f64]], width: usize, code: &[u32]) -> Vec<f64> {
    let mut out = Vec::with_capacity(width * code.len());
    for (cb, &c) in codebooks.iter().zip(code) {
        out.extend_from_slice(&cb[c as usize * width..(c as usize + 1) * width]);
    }
    out
}

/// Reads the full vectors of `candidates` in one round and keeps the `k` closest.
///
/// Records must start with the `dim` components of the vector as f64 words.
pub(crate) fn rerank(
    store: &DiskStore,
    q: &[f64],
    candidates: &[Neighbor],
    addr_of: impl Fn(PointId) -> DiskAddress,
    k: usize,
) -> Result<Vec<Neighbor>> {
    let addrs: Vec<_> = candidates.iter().map(|c| addr_of(c.id)).collect();
    let blobs = store.read_bypass(&addrs)?;
    let mut scored = Vec::with_capacity(blobs.len());
    for (c, blob) in candidates.iter().zip(blobs) {
        let x = decode_f64s(&blob[..q.len() * 8])?;
        scored.push((c.id, squared_distance(q, &x)));
    }
    Ok(top_k(scored, k))
}
