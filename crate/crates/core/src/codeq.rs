//! Product CoDEQ: one rotated kd-tree per contiguous block of coordinates,
//! sharing a single disk record per point.
//!
//! The record of point `i` is a block of `1 + M·L` addresses. The first holds
//! the full vector followed by its rotated subvectors; the rest are locators
//! pointing at the heap node holding `i` in each (block, level). With `M = 1`
//! this is a plain kd-tree quantizer.
//!
//! Updates are planned for every block from memory, then all heap operations
//! of all blocks run together: three read rounds and one write round in total,
//! whatever `M` is. The vectors of points that change leaf are fetched in the
//! first round alongside the heap locators.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::heap::{run_batch, HeapOp, HeapPQ};
use crate::kd::{BlockPlan, Entry, KdTree};
use crate::quantizer::{check_vector, rerank, to_f64, top_k, AdcTable, Neighbor, PointId, Quantizer};
use crate::rng::rng_for;
use crate::store::{decode_f64s, DiskAddress, DiskStore, IoLedger, RecordWriter, StoreImage, WriteBatch};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeqConfig {
    pub dim: usize,
    pub blocks: usize,
    pub bits: usize,
    pub seed: u64,
}

impl CodeqConfig {
    pub fn new(dim: usize, blocks: usize, bits: usize, seed: u64) -> Self {
        CodeqConfig { dim, blocks, bits, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.blocks) {
            return Err(Error::Config(format!("{} blocks do not divide dimension {}", self.blocks, self.dim)));
        }
        if self.bits > self.width() {
            return Err(Error::Config(format!(
                "{} bits per block need as many coordinates, blocks have {}",
                self.bits,
                self.width()
            )));
        }
        Ok(())
    }

    /// Coordinates per block.
    pub fn width(&self) -> usize {
        self.dim / self.blocks
    }

    pub fn bits_per_dim(&self) -> f64 {
        (self.blocks * self.bits) as f64 / self.dim as f64
    }

    fn record_len(&self) -> u64 {
        1 + (self.blocks * self.bits) as u64
    }
}

/// Rotation and split coordinates of one block.
pub type Geometry = (Vec<f64>, Vec<usize>);

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
struct Slot {
    id: PointId,
    addr: DiskAddress,
}

/// What the most recent update did.
#[derive(Clone, Debug, Default)]
pub struct UpdateStats {
    pub heaps_changed: usize,
    /// Full-precision vectors fetched from disk.
    pub vectors_read: usize,
    pub plans: Vec<BlockPlan>,
}

pub struct Codeq {
    config: CodeqConfig,
    store: DiskStore,
    trees: Vec<KdTree>,
    slots: Vec<Option<Slot>>,
    index: HashMap<PointId, usize>,
    codes: Vec<u32>,
    free_slots: Vec<usize>,
    last: UpdateStats,
}

const MAGIC: &[u8; 8] = b"CODEQIDX";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Snapshot {
    magic: [u8; 8],
    version: u32,
    config: CodeqConfig,
    trees: Vec<KdTree>,
    slots: Vec<Option<Slot>>,
    codes: Vec<u32>,
    free_slots: Vec<usize>,
    store: StoreImage,
}

impl Codeq {
    /// Builds over the rows of `data` (row-major, `ids.len() × dim`) in a fresh in-memory store.
    pub fn build(config: CodeqConfig, ids: &[PointId], data: &[f32]) -> Result<Self> {
        Self::build_in(DiskStore::in_memory(), config, ids, data)
    }

    pub fn build_in(store: DiskStore, config: CodeqConfig, ids: &[PointId], data: &[f32]) -> Result<Self> {
        config.validate()?;
        let geometry = (0..config.blocks)
            .map(|m| KdTree::sample_geometry(config.width(), config.bits, &mut rng_for(config.seed, m as u64)))
            .collect::<Result<Vec<_>>>()?;
        Self::build_with_geometry(store, config, geometry, ids, data)
    }

    /// Builds with caller-chosen rotations and splits instead of seeded ones.
    pub fn build_with_geometry(
        mut store: DiskStore,
        config: CodeqConfig,
        geometry: Vec<Geometry>,
        ids: &[PointId],
        data: &[f32],
    ) -> Result<Self> {
        config.validate()?;
        let (d, w, n) = (config.dim, config.width(), ids.len());
        if geometry.len() != config.blocks
            || geometry.iter().any(|(r, s)| r.len() != w * w || s.len() != config.bits || s.iter().any(|&c| c >= w))
        {
            return Err(Error::Config("geometry does not match the configuration".into()));
        }
        if data.len() != n * d {
            return Err(invalid(format!("{} values for {n} points of dimension {d}", data.len())));
        }
        if n < 1 << config.bits {
            return Err(invalid(format!("{n} points cannot fill {} leaves", 1u64 << config.bits)));
        }
        let mut index = HashMap::with_capacity(n);
        for (i, &id) in ids.iter().enumerate() {
            check_vector(&data[i * d..(i + 1) * d], d)?;
            if index.insert(id, i).is_some() {
                return Err(Error::Duplicate(id));
            }
        }

        let xs: Vec<Vec<f64>> = data.chunks_exact(d).map(to_f64).collect();
        let rotated: Vec<Vec<Vec<f64>>> = geometry
            .iter()
            .enumerate()
            .map(|(m, (rot, _))| xs.iter().map(|x| crate::kd::rotate(rot, &x[m * w..(m + 1) * w])).collect())
            .collect();

        let mut slots = Vec::with_capacity(n);
        let mut writes = WriteBatch::new();
        for (i, &id) in ids.iter().enumerate() {
            let addr = store.alloc_block(config.record_len())?;
            let mut rec = RecordWriter::with_words(2 * d);
            rec.f64s(&xs[i]);
            for block in &rotated {
                rec.f64s(&block[i]);
            }
            writes.put(addr, rec.finish());
            slots.push(Some(Slot { id, addr }));
        }
        store.write_batch(writes)?;

        let mut codes = vec![0u32; n * config.blocks];
        let mut trees = Vec::with_capacity(config.blocks);
        for (m, (rot, splits)) in geometry.into_iter().enumerate() {
            let points: Vec<_> = (0..n)
                .map(|i| (ids[i], slots[i].unwrap().addr, rotated[m][i].as_slice(), &xs[i][m * w..(m + 1) * w]))
                .collect();
            let mut writes = WriteBatch::new();
            let (tree, leaves) = KdTree::build(&mut store, rot, splits, (m * config.bits) as u64, &points, &mut writes)?;
            store.write_batch(writes)?;
            for (i, leaf) in leaves.into_iter().enumerate() {
                codes[i * config.blocks + m] = leaf;
            }
            trees.push(tree);
        }
        Ok(Codeq { config, store, trees, slots, index, codes, free_slots: Vec::new(), last: UpdateStats::default() })
    }

    pub fn config(&self) -> &CodeqConfig {
        &self.config
    }

    pub fn store(&self) -> &DiskStore {
        &self.store
    }

    pub fn trees(&self) -> &[KdTree] {
        &self.trees
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn contains(&self, id: PointId) -> bool {
        self.index.contains_key(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = PointId> + '_ {
        self.slots.iter().flatten().map(|s| s.id)
    }

    /// Leaf of `id` in every block.
    pub fn code(&self, id: PointId) -> Option<&[u32]> {
        let m = self.config.blocks;
        self.index.get(&id).map(|&s| &self.codes[s * m..(s + 1) * m])
    }

    pub fn last_update(&self) -> &UpdateStats {
        &self.last
    }

    /// Leaf means of each block.
    pub fn codebooks(&self) -> Vec<&[f64]> {
        self.trees.iter().map(|t| t.means()).collect()
    }

    fn rotate_blocks(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let w = self.config.width();
        self.trees.iter().enumerate().map(|(m, t)| t.rotate(&x[m * w..(m + 1) * w])).collect()
    }

    /// Routes a vector that is not stored through every block.
    pub fn encode(&self, x: &[f32]) -> Result<Vec<u32>> {
        check_vector(x, self.config.dim)?;
        let rot = self.rotate_blocks(&to_f64(x));
        Ok(self.trees.iter().zip(&rot).map(|(t, r)| t.route(r, u64::MAX)).collect())
    }

    /// The current reconstruction of `id`: its leaf mean in every block.
    pub fn proxy(&self, id: PointId) -> Result<Vec<f64>> {
        let code = self.code(id).ok_or(Error::NotFound(id))?;
        let w = self.config.width();
        let mut out = Vec::with_capacity(self.config.dim);
        for (t, &c) in self.trees.iter().zip(code) {
            out.extend_from_slice(&t.means()[c as usize * w..(c as usize + 1) * w]);
        }
        Ok(out)
    }

    fn leaf_of(&self, m: usize) -> impl Fn(u64) -> u32 + '_ {
        move |id| self.codes[self.index[&id] * self.config.blocks + m]
    }

    fn plan_insert(&self, id: PointId, owner: DiskAddress, rotated: &[Vec<f64>]) -> Vec<BlockPlan> {
        self.trees
            .iter()
            .enumerate()
            .map(|(m, t)| {
                let e = Entry { id, owner, rotated: rotated[m].clone(), leaf: 0 };
                t.plan(Some(e), None, &self.leaf_of(m))
            })
            .collect()
    }

    /// Heaps an insert of `x` would change across all blocks, computed from memory alone.
    pub fn insert_cost(&self, x: &[f32]) -> Result<usize> {
        check_vector(x, self.config.dim)?;
        let id = self.ids().max().map_or(0, |m| m + 1);
        let rot = self.rotate_blocks(&to_f64(x));
        Ok(self.plan_insert(id, DiskAddress::NONE, &rot).iter().map(|p| p.heaps_changed()).sum())
    }

    pub fn insert(&mut self, id: PointId, x: &[f32]) -> Result<()> {
        check_vector(x, self.config.dim)?;
        if self.index.contains_key(&id) {
            return Err(Error::Duplicate(id));
        }
        self.store.begin_update()?;
        let result = self.insert_in_window(id, to_f64(x));
        self.store.abort_update();
        result
    }

    fn insert_in_window(&mut self, id: PointId, x: Vec<f64>) -> Result<()> {
        let addr = self.store.alloc_block(self.config.record_len())?;
        let rotated = self.rotate_blocks(&x);
        let plans = self.plan_insert(id, addr, &rotated);
        let mut writes = WriteBatch::new();
        let mut rec = RecordWriter::with_words(2 * self.config.dim);
        rec.f64s(&x);
        for r in &rotated {
            rec.f64s(r);
        }
        writes.put(addr, rec.finish());
        self.execute(plans, Some((Slot { id, addr }, x)), None, writes)
    }

    pub fn delete(&mut self, id: PointId) -> Result<()> {
        let &slot = self.index.get(&id).ok_or(Error::NotFound(id))?;
        let addr = self.slots[slot].unwrap().addr;
        let plans = self
            .trees
            .iter()
            .enumerate()
            .map(|(m, t)| {
                let e = Entry { id, owner: addr, rotated: Vec::new(), leaf: self.codes[slot * self.config.blocks + m] };
                t.plan(None, Some(e), &self.leaf_of(m))
            })
            .collect();
        let mut writes = WriteBatch::new();
        for k in 0..self.config.record_len() {
            writes.free(addr.add(k));
        }
        self.store.begin_update()?;
        let result = self.execute(plans, None, Some(id), writes);
        self.store.abort_update();
        result
    }

    /// Runs the heap operations of every block, applies the plans and commits.
    fn execute(
        &mut self,
        plans: Vec<BlockPlan>,
        inserted: Option<(Slot, Vec<f64>)>,
        deleted: Option<PointId>,
        mut writes: WriteBatch,
    ) -> Result<()> {
        let (d, w, nb) = (self.config.dim, self.config.width(), self.config.blocks);
        let mut need: Vec<PointId> = plans.iter().flat_map(|p| p.leaf_out.iter().map(|&(_, id)| id)).collect();
        need.sort_unstable();
        need.dedup();
        let addrs: Vec<_> = need.iter().map(|id| self.slots[self.index[id]].unwrap().addr).collect();

        let trees = &self.trees;
        let tasks: Vec<(&HeapPQ, &HeapOp)> = trees.iter().zip(&plans).flat_map(|(t, p)| t.plan_tasks(p)).collect();
        let outcome = run_batch(&mut self.store, &tasks, &addrs, &mut writes)?;
        drop(tasks);

        let mut vectors: HashMap<PointId, Vec<f64>> = HashMap::with_capacity(need.len() + 1);
        for (id, blob) in need.iter().zip(&outcome.extra) {
            vectors.insert(*id, decode_f64s(&blob[..d * 8])?);
        }
        if let Some((slot, x)) = inserted {
            vectors.insert(slot.id, x);
            let s = match self.free_slots.pop() {
                Some(s) => {
                    self.slots[s] = Some(slot);
                    s
                }
                None => {
                    self.slots.push(Some(slot));
                    self.codes.extend(std::iter::repeat_n(0, nb));
                    self.slots.len() - 1
                }
            };
            self.index.insert(slot.id, s);
        }

        let mut offset = 0;
        for (m, plan) in plans.iter().enumerate() {
            let states = &outcome.states[offset..offset + plan.heap_ops.len()];
            offset += plan.heap_ops.len();
            self.trees[m].apply(plan, states, &|id| vectors[&id][m * w..(m + 1) * w].to_vec());
            for &(leaf, id) in &plan.leaf_in {
                let s = self.index[&id];
                self.codes[s * nb + m] = leaf;
            }
        }
        self.store.write_batch(writes)?;
        self.store.end_update()?;

        if let Some(id) = deleted {
            let s = self.index.remove(&id).unwrap();
            self.slots[s] = None;
            self.free_slots.push(s);
        }

        let heaps_changed = plans.iter().map(|p| p.heaps_changed()).sum();
        debug_assert!(self.config.bits == 0 || need.len() <= heaps_changed);
        self.last = UpdateStats { heaps_changed, vectors_read: need.len(), plans };
        Ok(())
    }

    pub fn knn_query(&self, q: &[f32], k: usize) -> Result<Vec<Neighbor>> {
        if self.is_empty() {
            return Err(invalid("query against an empty index"));
        }
        check_vector(q, self.config.dim)?;
        let table = AdcTable::new(&to_f64(q), &self.codebooks(), 1 << self.config.bits);
        let nb = self.config.blocks;
        let scored = self
            .slots
            .iter()
            .enumerate()
            .filter_map(|(s, slot)| slot.map(|sl| (sl.id, table.distance_sq(&self.codes[s * nb..(s + 1) * nb]))));
        Ok(top_k(scored, k))
    }

    /// Answers every row of `queries` (row-major).
    pub fn knn_query_batch(&self, queries: &[f32], k: usize) -> Result<Vec<Vec<Neighbor>>> {
        queries.chunks(self.config.dim).map(|q| self.knn_query(q, k)).collect()
    }

    pub fn knn_rerank(&self, q: &[f32], k: usize, k_prime: usize) -> Result<Vec<Neighbor>> {
        let candidates = self.knn_query(q, k_prime.max(k))?;
        rerank(&self.store, &to_f64(q), &candidates, |id| self.slots[self.index[&id]].unwrap().addr, k)
    }

    /// Full consistency check against a scan of the disk. Does not touch the ledger.
    pub fn validate(&self) -> Result<()> {
        let (d, w, nb) = (self.config.dim, self.config.width(), self.config.blocks);
        for t in &self.trees {
            t.validate(&self.store)?;
        }
        let mut sums: Vec<Vec<Vec<f64>>> = self.trees.iter().map(|t| vec![vec![0.0; w]; t.leaves()]).collect();
        for (s, slot) in self.slots.iter().enumerate() {
            let Some(slot) = slot else { continue };
            let rec = decode_f64s(&self.store.inspect(slot.addr)?)?;
            for (m, t) in self.trees.iter().enumerate() {
                let code = self.codes[s * nb + m];
                let rot = &rec[d + m * w..d + (m + 1) * w];
                if t.route(rot, slot.id) != code {
                    return Err(invalid(format!("point {} in block {m} is stored under the wrong leaf", slot.id)));
                }
                for (acc, v) in sums[m][code as usize].iter_mut().zip(&rec[m * w..(m + 1) * w]) {
                    *acc += v;
                }
            }
        }
        for (m, t) in self.trees.iter().enumerate() {
            for (leaf, exact) in sums[m].iter().enumerate() {
                let got = t.leaf_sum(leaf);
                let scale = exact.iter().map(|v| v.abs()).fold(1.0, f64::max);
                if got.iter().zip(exact).any(|(a, b)| (a - b).abs() > 1e-9 * scale) {
                    return Err(invalid(format!("block {m} leaf {leaf} sum drifted")));
                }
            }
        }
        Ok(())
    }

    /// Writes the in-memory state and the disk contents to `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let snap = Snapshot {
            magic: *MAGIC,
            version: VERSION,
            config: self.config,
            trees: self.trees.clone(),
            slots: self.slots.clone(),
            codes: self.codes.clone(),
            free_slots: self.free_slots.clone(),
            store: self.store.export()?,
        };
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        bincode::serialize_into(file, &snap).map_err(|e| Error::Data(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let snap: Snapshot = bincode::deserialize_from(file).map_err(|e| Error::Data(e.to_string()))?;
        if &snap.magic != MAGIC {
            return Err(Error::Data("not an index snapshot".into()));
        }
        if snap.version != VERSION {
            return Err(Error::Data(format!("snapshot version {} is not supported", snap.version)));
        }
        let index = snap.slots.iter().enumerate().filter_map(|(s, sl)| sl.map(|sl| (sl.id, s))).collect();
        Ok(Codeq {
            config: snap.config,
            store: DiskStore::import(snap.store)?,
            trees: snap.trees,
            slots: snap.slots,
            index,
            codes: snap.codes,
            free_slots: snap.free_slots,
            last: UpdateStats::default(),
        })
    }
}

impl Quantizer for Codeq {
    fn name(&self) -> &'static str {
        "codeq"
    }

    fn dim(&self) -> usize {
        self.config.dim
    }

    fn len(&self) -> usize {
        Codeq::len(self)
    }

    fn insert(&mut self, id: PointId, x: &[f32]) -> Result<()> {
        Codeq::insert(self, id, x)
    }

    fn delete(&mut self, id: PointId, _x: &[f32]) -> Result<()> {
        Codeq::delete(self, id)
    }

    fn knn_query(&self, q: &[f32], k: usize) -> Result<Vec<Neighbor>> {
        Codeq::knn_query(self, q, k)
    }

    fn knn_rerank(&self, q: &[f32], k: usize, k_prime: usize) -> Result<Vec<Neighbor>> {
        Codeq::knn_rerank(self, q, k, k_prime)
    }

    fn ledger(&self) -> &IoLedger {
        self.store.ledger()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::{decompress, squared_distance};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity_1d() -> Vec<Geometry> {
        vec![(vec![1.0], vec![0])]
    }

    fn build_1d(values: &[f32], ids: &[u64]) -> Codeq {
        Codeq::build_with_geometry(DiskStore::in_memory(), CodeqConfig::new(1, 1, 1, 0), identity_1d(), ids, values)
            .unwrap()
    }

    fn leaf_members(q: &Codeq, leaf: u32) -> Vec<u64> {
        let mut v: Vec<_> = q.ids().filter(|&id| q.code(id).unwrap()[0] == leaf).collect();
        v.sort();
        v
    }

    #[test]
    fn one_dimensional_median_split() {
        let q = build_1d(&[0.0, 1.0, 2.0, 3.0], &[0, 1, 2, 3]);
        assert_eq!(leaf_members(&q, 0), vec![0, 1]);
        assert_eq!(leaf_members(&q, 1), vec![2, 3]);
        assert_eq!(q.codebooks()[0], &[0.5, 2.5]);
        q.validate().unwrap();
    }

    #[test]
    fn insert_below_moves_the_left_maximum_right() {
        let mut q = build_1d(&[1.0, 2.0, 3.0, 4.0], &[1, 2, 3, 4]);
        q.insert(0, &[0.0]).unwrap();
        assert_eq!(leaf_members(&q, 0), vec![0, 1]);
        assert_eq!(leaf_members(&q, 1), vec![2, 3, 4]);
        assert_eq!(q.last_update().vectors_read, 1);
        q.validate().unwrap();
    }

    #[test]
    fn zero_bits_is_the_centroid() {
        let q = Codeq::build(CodeqConfig::new(2, 1, 0, 3), &[0, 1, 2], &[0.0, 0.0, 3.0, 0.0, 0.0, 6.0]).unwrap();
        assert_eq!(q.codebooks()[0], &[1.0, 2.0]);
    }

    #[test]
    fn config_errors() {
        assert!(Codeq::build(CodeqConfig::new(5, 2, 1, 0), &[0, 1], &[0.0; 10]).is_err());
        assert!(Codeq::build(CodeqConfig::new(2, 1, 3, 0), &[0; 8], &[0.0; 16]).is_err());
        assert!(Codeq::build(CodeqConfig::new(2, 1, 2, 0), &[0, 1, 2], &[0.0; 6]).is_err());
        assert!(matches!(Codeq::build(CodeqConfig::new(1, 1, 1, 0), &[4, 4], &[0.0, 1.0]), Err(Error::Duplicate(4))));
    }

    #[test]
    fn paper_table_bit_rates() {
        assert_eq!(CodeqConfig::new(96, 8, 12, 0).bits_per_dim(), 1.0);
        assert_eq!(CodeqConfig::new(128, 8, 12, 0).bits_per_dim(), 0.75);
        assert_eq!(CodeqConfig::new(200, 10, 12, 0).bits_per_dim(), 0.6);
    }

    fn random_data(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<f32> {
        (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn insert_then_delete_restores_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data = random_data(&mut rng, 64, 8);
        let ids: Vec<u64> = (0..64).collect();
        let mut q = Codeq::build(CodeqConfig::new(8, 2, 3, 5), &ids, &data).unwrap();
        let before: Vec<Vec<u32>> = ids.iter().map(|&i| q.code(i).unwrap().to_vec()).collect();
        let sums: Vec<Vec<f64>> = q.codebooks().iter().map(|c| c.to_vec()).collect();
        let x = random_data(&mut rng, 1, 8);
        q.insert(1000, &x).unwrap();
        q.validate().unwrap();
        q.delete(1000).unwrap();
        q.validate().unwrap();
        for (&i, b) in ids.iter().zip(&before) {
            assert_eq!(q.code(i).unwrap(), b.as_slice());
        }
        for (a, b) in q.codebooks().iter().zip(&sums) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-6 * y.abs().max(1.0));
            }
        }
    }

    #[test]
    fn updates_use_three_reads_and_one_write() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = random_data(&mut rng, 200, 8);
        let ids: Vec<u64> = (0..200).collect();
        let mut q = Codeq::build(CodeqConfig::new(8, 4, 2, 1), &ids, &data).unwrap();
        for step in 0..100u64 {
            if step % 2 == 0 {
                q.insert(500 + step, &random_data(&mut rng, 1, 8)).unwrap();
            } else {
                q.delete(step).unwrap();
            }
            let r = *q.store().ledger().history().last().unwrap();
            assert!(r.read_rounds <= 3 && r.write_rounds == 1, "{r:?}");
        }
        q.validate().unwrap();
    }

    #[test]
    fn adc_matches_decompression_and_queries_do_no_io() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = random_data(&mut rng, 300, 12);
        let ids: Vec<u64> = (0..300).collect();
        let q = Codeq::build(CodeqConfig::new(12, 3, 3, 9), &ids, &data).unwrap();
        let before = q.store().ledger().query_reads();
        let query = random_data(&mut rng, 1, 12);
        let got = q.knn_query(&query, 300).unwrap();
        assert_eq!(q.store().ledger().query_reads(), before);
        let books = q.codebooks();
        let q64 = to_f64(&query);
        for n in got.iter().take(100) {
            let x = decompress(&books, 4, q.code(n.id).unwrap());
            let direct = squared_distance(&q64, &x).sqrt();
            assert!((n.distance - direct).abs() <= 1e-9 * direct.max(1e-12));
        }
    }

    #[test]
    fn rerank_with_everything_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data = random_data(&mut rng, 100, 4);
        let ids: Vec<u64> = (0..100).collect();
        let q = Codeq::build(CodeqConfig::new(4, 2, 2, 1), &ids, &data).unwrap();
        let query = random_data(&mut rng, 1, 4);
        let got = q.knn_rerank(&query, 5, 100).unwrap();
        let exact = top_k(
            (0..100).map(|i| (i as u64, squared_distance(&to_f64(&query), &to_f64(&data[i * 4..i * 4 + 4])))),
            5,
        );
        assert_eq!(got, exact);
        assert_eq!(q.store().ledger().query_reads().read_rounds, 1);
    }

    #[test]
    fn encode_matches_stored_codes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = random_data(&mut rng, 128, 6);
        let ids: Vec<u64> = (0..128).collect();
        let q = Codeq::build(CodeqConfig::new(6, 2, 3, 4), &ids, &data).unwrap();
        for i in 0..128 {
            let row = &data[i * 6..(i + 1) * 6];
            let rot = q.rotate_blocks(&to_f64(row));
            let routed: Vec<u32> = q.trees.iter().zip(&rot).map(|(t, r)| t.route(r, i as u64)).collect();
            assert_eq!(routed, q.code(i as u64).unwrap());
        }
    }

    #[test]
    fn singleton_leaf_proxy_is_the_point() {
        let q = build_1d(&[5.0, 7.0], &[0, 1]);
        assert_eq!(q.proxy(1).unwrap(), vec![7.0]);
        assert!(q.proxy(9).is_err());
    }

    #[test]
    fn save_and_load_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data = random_data(&mut rng, 40, 4);
        let ids: Vec<u64> = (0..40).collect();
        let mut q = Codeq::build(CodeqConfig::new(4, 2, 2, 7), &ids, &data).unwrap();
        q.delete(3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("idx.bin");
        q.save(&path).unwrap();
        let mut r = Codeq::load(&path).unwrap();
        r.validate().unwrap();
        let x = random_data(&mut rng, 1, 4);
        q.insert(77, &x).unwrap();
        r.insert(77, &x).unwrap();
        for id in q.ids() {
            assert_eq!(q.code(id), r.code(id));
        }
        std::fs::write(&path, b"garbage").unwrap();
        assert!(Codeq::load(&path).is_err());
    }
}
