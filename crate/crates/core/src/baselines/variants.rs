use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::kmeans::kmeans;
use super::pq::{block_rows, sorted_rows, train, PqConfig, PqIndex};
use crate::error::{Error, Result};
use crate::kd::CompensatedSum;
use crate::quantizer::{check_vector, to_f64, Neighbor, PointId, Quantizer};
use crate::rng::{derive, rng_for};
use crate::store::{IoLedger, WriteBatch};

macro_rules! delegate_queries {
    () => {
        fn dim(&self) -> usize {
            self.pq.config().dim
        }

        fn len(&self) -> usize {
            self.pq.len()
        }

        fn knn_query(&self, q: &[f32], k: usize) -> Result<Vec<Neighbor>> {
            self.pq.knn_query(q, k)
        }

        fn knn_rerank(&self, q: &[f32], k: usize, k_prime: usize) -> Result<Vec<Neighbor>> {
            self.pq.knn_rerank(q, k, k_prime)
        }

        fn ledger(&self) -> &IoLedger {
            self.pq.store().ledger()
        }
    };
}

/// Codebooks trained once on the initial data and never changed.
pub struct FrozenPq {
    pq: PqIndex,
}

impl FrozenPq {
    pub fn build(config: PqConfig, ids: &[PointId], data: &[f32]) -> Result<Self> {
        Ok(FrozenPq { pq: PqIndex::build(config, ids, data)? })
    }

    pub fn index(&self) -> &PqIndex {
        &self.pq
    }
}

impl Quantizer for FrozenPq {
    fn name(&self) -> &'static str {
        "frozenpq"
    }

    fn insert(&mut self, id: PointId, x: &[f32]) -> Result<()> {
        check_vector(x, self.pq.config().dim)?;
        let x = to_f64(x);
        let code = self.pq.encode(&x);
        self.pq.add(id, &x, &code)
    }

    fn delete(&mut self, id: PointId, _x: &[f32]) -> Result<()> {
        self.pq.remove(id).map(|_| ())
    }

    delegate_queries!();
}

/// Retrains from scratch on the live set every `period` batches, reading
/// every stored vector to do so. In between it behaves like [`FrozenPq`].
pub struct RebuildPq {
    pq: PqIndex,
    period: usize,
    batches: usize,
}

impl RebuildPq {
    pub fn build(config: PqConfig, ids: &[PointId], data: &[f32], period: usize) -> Result<Self> {
        if period == 0 {
            return Err(Error::Config("rebuild period must be positive".into()));
        }
        Ok(RebuildPq { pq: PqIndex::build(config, ids, data)?, period, batches: 0 })
    }

    pub fn index(&self) -> &PqIndex {
        &self.pq
    }

    /// Reads the live set in one round and retrains on it in ascending id order.
    pub fn rebuild(&mut self) -> Result<()> {
        let ids = self.pq.ids();
        self.pq.store_mut().begin_update()?;
        let rows = match self.pq.read_vectors(&ids) {
            Ok(rows) => rows,
            Err(e) => {
                self.pq.store_mut().abort_update();
                return Err(e);
            }
        };
        self.pq.store_mut().end_update()?;
        let fits = train(self.pq.config(), &rows)?;
        self.pq.set_codebooks(fits.iter().map(|f| f.centroids.clone()).collect());
        for (i, &id) in ids.iter().enumerate() {
            for (m, f) in fits.iter().enumerate() {
                self.pq.set_code(id, m, f.assignment[i]);
            }
        }
        Ok(())
    }
}

impl Quantizer for RebuildPq {
    fn name(&self) -> &'static str {
        "rebuildpq"
    }

    fn insert(&mut self, id: PointId, x: &[f32]) -> Result<()> {
        check_vector(x, self.pq.config().dim)?;
        let x = to_f64(x);
        let code = self.pq.encode(&x);
        self.pq.add(id, &x, &code)
    }

    fn delete(&mut self, id: PointId, _x: &[f32]) -> Result<()> {
        self.pq.remove(id).map(|_| ())
    }

    fn finish_batch(&mut self) -> Result<()> {
        self.batches += 1;
        if self.batches.is_multiple_of(self.period) {
            self.rebuild()?;
        }
        Ok(())
    }

    delegate_queries!();
}

/// Moves each centroid to the running mean of the points assigned to it.
/// Memberships are fixed at insertion time.
pub struct OnlinePq {
    pq: PqIndex,
    sums: Vec<Vec<CompensatedSum>>,
    counts: Vec<Vec<u64>>,
}

impl OnlinePq {
    /// Trains like [`PqIndex::build`], then sets every non-empty centroid to
    /// the mean of its members so later updates keep exact running means.
    pub fn build(config: PqConfig, ids: &[PointId], data: &[f32]) -> Result<Self> {
        let (ids, rows) = sorted_rows(&config, ids, data)?;
        let fits = train(&config, &rows)?;
        let pq = PqIndex::from_fits(config, &ids, &rows, &fits)?;
        let w = config.width();
        let mut sums: Vec<Vec<CompensatedSum>> =
            (0..config.blocks).map(|_| (0..config.k()).map(|_| CompensatedSum::zeros(w)).collect()).collect();
        for (i, x) in rows.iter().enumerate() {
            for (m, f) in fits.iter().enumerate() {
                sums[m][f.assignment[i] as usize].add(&x[m * w..(m + 1) * w]);
            }
        }
        let counts = fits.iter().map(|f| f.counts.clone()).collect();
        let mut online = OnlinePq { pq, sums, counts };
        for m in 0..config.blocks {
            for c in 0..config.k() as u32 {
                online.refresh(m, c);
            }
        }
        Ok(online)
    }

    pub fn index(&self) -> &PqIndex {
        &self.pq
    }

    pub fn count(&self, m: usize, c: u32) -> u64 {
        self.counts[m][c as usize]
    }

    fn refresh(&mut self, m: usize, c: u32) {
        let n = self.counts[m][c as usize];
        if n > 0 {
            let mean: Vec<f64> = self.sums[m][c as usize].value().iter().map(|s| s / n as f64).collect();
            self.pq.set_centroid(m, c, &mean);
        }
    }
}

impl Quantizer for OnlinePq {
    fn name(&self) -> &'static str {
        "onlinepq"
    }

    fn insert(&mut self, id: PointId, x: &[f32]) -> Result<()> {
        check_vector(x, self.pq.config().dim)?;
        let x = to_f64(x);
        let code = self.pq.encode(&x);
        self.pq.add(id, &x, &code)?;
        let w = self.pq.config().width();
        for (m, &c) in code.iter().enumerate() {
            self.sums[m][c as usize].add(&x[m * w..(m + 1) * w]);
            self.counts[m][c as usize] += 1;
            self.refresh(m, c);
        }
        Ok(())
    }

    /// Uses the supplied vector to take the point's contribution back out.
    fn delete(&mut self, id: PointId, x: &[f32]) -> Result<()> {
        check_vector(x, self.pq.config().dim)?;
        let code = self.pq.remove(id)?;
        let x = to_f64(x);
        let w = self.pq.config().width();
        for (m, &c) in code.iter().enumerate() {
            self.sums[m][c as usize].sub(&x[m * w..(m + 1) * w]);
            self.counts[m][c as usize] -= 1;
            self.refresh(m, c);
        }
        Ok(())
    }

    delegate_queries!();
}

/// When reclustering is considered.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Schedule {
    EveryInsert,
    PerBatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DedriftConfig {
    /// Number of largest clusters to split.
    pub largest: usize,
    /// Number of smallest clusters merged back in so the codebook size stays fixed.
    pub smallest: usize,
    /// A block reclusters once some cluster holds more than `(1 + gamma)` times the mean size.
    pub gamma: f64,
    pub schedule: Schedule,
}

impl DedriftConfig {
    pub fn new(m: usize) -> Self {
        DedriftConfig { largest: m, smallest: m, gamma: 0.5, schedule: Schedule::EveryInsert }
    }
}

/// Assigns new points to the nearest centroid and, when a block's clusters
/// grow unbalanced, reclusters the members of its largest and smallest
/// clusters after fetching them from disk.
pub struct DeDriftPq {
    pq: PqIndex,
    cfg: DedriftConfig,
    counts: Vec<Vec<u64>>,
    epoch: u64,
    last_fetch: usize,
}

impl DeDriftPq {
    pub fn build(config: PqConfig, ids: &[PointId], data: &[f32], cfg: DedriftConfig) -> Result<Self> {
        if !(cfg.gamma >= 0.0) {
            return Err(Error::Config(format!("gamma must be non-negative, got {}", cfg.gamma)));
        }
        let (ids, rows) = sorted_rows(&config, ids, data)?;
        let fits = train(&config, &rows)?;
        let pq = PqIndex::from_fits(config, &ids, &rows, &fits)?;
        let counts = fits.iter().map(|f| f.counts.clone()).collect();
        Ok(DeDriftPq { pq, cfg, counts, epoch: 0, last_fetch: 0 })
    }

    pub fn index(&self) -> &PqIndex {
        &self.pq
    }

    pub fn config(&self) -> &DedriftConfig {
        &self.cfg
    }

    pub fn count(&self, m: usize, c: u32) -> u64 {
        self.counts[m][c as usize]
    }

    /// Vectors fetched from disk by the most recent update.
    pub fn last_fetch(&self) -> usize {
        self.last_fetch
    }

    /// Per block, the clusters that would be reclustered given `counts`, or
    /// nothing when the block is balanced enough.
    fn flagged(&self, counts: &[Vec<u64>], n: usize) -> Vec<Vec<u32>> {
        let k = self.pq.config().k();
        let limit = (1.0 + self.cfg.gamma) * n as f64 / k as f64;
        counts
            .iter()
            .map(|cs| {
                if self.cfg.largest == 0 || !cs.iter().any(|&c| c as f64 > limit) {
                    return Vec::new();
                }
                let mut order: Vec<u32> = (0..k as u32).collect();
                order.sort_by_key(|&c| (std::cmp::Reverse(cs[c as usize]), c));
                let mut pick: BTreeSet<u32> = order.iter().take(self.cfg.largest).copied().collect();
                pick.extend(order.iter().rev().take(self.cfg.smallest));
                pick.into_iter().collect()
            })
            .collect()
    }

    /// Ids in the flagged clusters, per block and as a sorted union.
    fn members(&self, flagged: &[Vec<u32>], skip: Option<PointId>) -> (Vec<Vec<PointId>>, Vec<PointId>) {
        let mut per_block = vec![Vec::new(); flagged.len()];
        let mut union = BTreeSet::new();
        for (id, code) in self.pq.entries() {
            for (m, f) in flagged.iter().enumerate() {
                if f.binary_search(&code[m]).is_ok() {
                    per_block[m].push(id);
                    if Some(id) != skip {
                        union.insert(id);
                    }
                }
            }
        }
        for ids in &mut per_block {
            ids.sort_unstable();
        }
        (per_block, union.into_iter().collect())
    }

    /// Vectors an insert of `x` would fetch, without changing anything.
    pub fn insert_cost(&self, x: &[f32]) -> Result<usize> {
        check_vector(x, self.pq.config().dim)?;
        let code = self.pq.encode(&to_f64(x));
        let mut counts = self.counts.clone();
        for (m, &c) in code.iter().enumerate() {
            counts[m][c as usize] += 1;
        }
        let flagged = self.flagged(&counts, self.pq.len() + 1);
        if flagged.iter().all(|f| f.is_empty()) {
            return Ok(0);
        }
        // The new point is flagged too whenever its cluster is, but it is in memory.
        Ok(self.members(&flagged, None).1.len())
    }

    /// Reclusters unbalanced blocks inside the open window. `fresh` is a
    /// point whose vector is already in memory and need not be read.
    fn recluster(&mut self, fresh: Option<(PointId, &[f64])>) -> Result<usize> {
        let flagged = self.flagged(&self.counts, self.pq.len());
        if flagged.iter().all(|f| f.is_empty()) {
            return Ok(0);
        }
        let (per_block, union) = self.members(&flagged, fresh.map(|f| f.0));
        let fetched = self.pq.read_vectors(&union)?;
        let vector_of = |id: PointId| -> &[f64] {
            match fresh {
                Some((f, x)) if f == id => x,
                _ => &fetched[union.binary_search(&id).unwrap()],
            }
        };
        self.epoch += 1;
        let w = self.pq.config().width();
        let seed = derive(self.pq.config().seed, self.epoch);
        for (m, clusters) in flagged.iter().enumerate() {
            let ids = &per_block[m];
            if clusters.is_empty() || ids.len() < clusters.len() {
                continue;
            }
            let rows: Vec<Vec<f64>> = ids.iter().map(|&id| vector_of(id).to_vec()).collect();
            let fit = kmeans(&block_rows(&rows, m, w), w, clusters.len(), &mut rng_for(seed, m as u64))?;
            for (j, &c) in clusters.iter().enumerate() {
                self.pq.set_centroid(m, c, fit.centroid(j));
                self.counts[m][c as usize] = fit.counts[j];
            }
            for (i, &id) in ids.iter().enumerate() {
                self.pq.set_code(id, m, clusters[fit.assignment[i] as usize]);
            }
        }
        Ok(union.len())
    }

    fn run_window(&mut self, writes: WriteBatch, fresh: Option<(PointId, &[f64])>) -> Result<()> {
        self.pq.store_mut().begin_update()?;
        let fetched = match self.recluster(fresh) {
            Ok(f) => f,
            Err(e) => {
                self.pq.store_mut().abort_update();
                return Err(e);
            }
        };
        let res = self.pq.store_mut().write_batch(writes);
        self.pq.finish_window(res)?;
        self.last_fetch = fetched;
        Ok(())
    }
}

impl Quantizer for DeDriftPq {
    fn name(&self) -> &'static str {
        "dedriftpq"
    }

    fn insert(&mut self, id: PointId, x: &[f32]) -> Result<()> {
        check_vector(x, self.pq.config().dim)?;
        let x = to_f64(x);
        let code = self.pq.encode(&x);
        let mut writes = WriteBatch::new();
        self.pq.stage_insert(id, &x, &code, &mut writes)?;
        for (m, &c) in code.iter().enumerate() {
            self.counts[m][c as usize] += 1;
        }
        if self.cfg.schedule == Schedule::EveryInsert {
            self.run_window(writes, Some((id, &x)))
        } else {
            self.last_fetch = 0;
            self.pq.commit(writes)
        }
    }

    fn delete(&mut self, id: PointId, _x: &[f32]) -> Result<()> {
        let mut writes = WriteBatch::new();
        let code = self.pq.stage_remove(id, &mut writes)?;
        for (m, &c) in code.iter().enumerate() {
            self.counts[m][c as usize] -= 1;
        }
        self.last_fetch = 0;
        self.pq.commit(writes)
    }

    fn finish_batch(&mut self) -> Result<()> {
        if self.cfg.schedule == Schedule::PerBatch {
            self.run_window(WriteBatch::new(), None)?;
        }
        Ok(())
    }

    delegate_queries!();
}
