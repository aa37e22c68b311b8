use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::kmeans::{kmeans, nearest, KMeans};
use crate::error::{invalid, Error, Result};
use crate::quantizer::{check_vector, rerank, to_f64, top_k, AdcTable, Neighbor, PointId};
use crate::rng::rng_for;
use crate::store::{decode_f64s, encode_f64s, DiskAddress, DiskStore, WriteBatch};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PqConfig {
    pub dim: usize,
    pub blocks: usize,
    /// Codebooks hold `2^bits` centroids.
    pub bits: usize,
    pub seed: u64,
}

impl PqConfig {
    pub fn new(dim: usize, blocks: usize, bits: usize, seed: u64) -> Self {
        PqConfig { dim, blocks, bits, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.blocks) {
            return Err(Error::Config(format!("{} blocks do not divide dimension {}", self.blocks, self.dim)));
        }
        if self.bits > 24 {
            return Err(Error::Config(format!("{} bits per block is too many", self.bits)));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.dim / self.blocks
    }

    pub fn k(&self) -> usize {
        1 << self.bits
    }
}

/// Copies block `m` of every row into a dense `n × width` matrix.
pub(crate) fn block_rows(rows: &[Vec<f64>], m: usize, width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * width);
    for r in rows {
        out.extend_from_slice(&r[m * width..(m + 1) * width]);
    }
    out
}

/// Runs k-means in every block of `rows`, seeded per block.
pub fn train(config: &PqConfig, rows: &[Vec<f64>]) -> Result<Vec<KMeans>> {
    config.validate()?;
    if rows.len() < config.k() {
        return Err(invalid(format!("{} points cannot train {} centroids", rows.len(), config.k())));
    }
    let w = config.width();
    (0..config.blocks)
        .map(|m| kmeans(&block_rows(rows, m, w), w, config.k(), &mut rng_for(config.seed, m as u64)))
        .collect()
}

#[derive(Clone, Copy, Debug)]
struct Slot {
    id: PointId,
    addr: DiskAddress,
}

/// Codebooks, in-memory codes, and full vectors on disk.
///
/// Each point owns a one-address record holding its vector. The variants in
/// this module differ only in how they keep the codebooks current.
pub struct PqIndex {
    config: PqConfig,
    store: DiskStore,
    books: Vec<Vec<f64>>,
    slots: Vec<Option<Slot>>,
    index: HashMap<PointId, usize>,
    codes: Vec<u32>,
    free_slots: Vec<usize>,
}

impl PqIndex {
    /// Trains on the rows of `data` in ascending id order and stores every vector.
    pub fn build(config: PqConfig, ids: &[PointId], data: &[f32]) -> Result<Self> {
        let (ids, rows) = sorted_rows(&config, ids, data)?;
        let fits = train(&config, &rows)?;
        Self::from_fits(config, &ids, &rows, &fits)
    }

    pub(crate) fn from_fits(config: PqConfig, ids: &[PointId], rows: &[Vec<f64>], fits: &[KMeans]) -> Result<Self> {
        let mut pq = PqIndex {
            config,
            store: DiskStore::in_memory(),
            books: fits.iter().map(|f| f.centroids.clone()).collect(),
            slots: Vec::new(),
            index: HashMap::new(),
            codes: Vec::new(),
            free_slots: Vec::new(),
        };
        let mut writes = WriteBatch::new();
        for (i, (&id, x)) in ids.iter().zip(rows).enumerate() {
            let code: Vec<u32> = fits.iter().map(|f| f.assignment[i]).collect();
            pq.stage_insert(id, x, &code, &mut writes)?;
        }
        pq.store.write_batch(writes)?;
        Ok(pq)
    }

    pub fn config(&self) -> &PqConfig {
        &self.config
    }

    pub fn store(&self) -> &DiskStore {
        &self.store
    }

    pub(crate) fn store_mut(&mut self) -> &mut DiskStore {
        &mut self.store
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

    /// Live ids in ascending order.
    pub fn ids(&self) -> Vec<PointId> {
        let mut ids: Vec<_> = self.index.keys().copied().collect();
        ids.sort_unstable();
        ids
    }

    pub fn code(&self, id: PointId) -> Option<&[u32]> {
        let nb = self.config.blocks;
        self.index.get(&id).map(|&s| &self.codes[s * nb..(s + 1) * nb])
    }

    pub fn codebooks(&self) -> Vec<&[f64]> {
        self.books.iter().map(|b| b.as_slice()).collect()
    }

    pub fn centroid(&self, m: usize, c: u32) -> &[f64] {
        let w = self.config.width();
        &self.books[m][c as usize * w..(c as usize + 1) * w]
    }

    pub(crate) fn set_centroid(&mut self, m: usize, c: u32, value: &[f64]) {
        let w = self.config.width();
        self.books[m][c as usize * w..(c as usize + 1) * w].copy_from_slice(value);
    }

    pub(crate) fn set_codebooks(&mut self, books: Vec<Vec<f64>>) {
        self.books = books;
    }

    pub(crate) fn set_code(&mut self, id: PointId, m: usize, c: u32) {
        let s = self.index[&id];
        self.codes[s * self.config.blocks + m] = c;
    }

    /// Nearest centroid in every block.
    pub fn encode(&self, x: &[f64]) -> Vec<u32> {
        let w = self.config.width();
        self.books.iter().enumerate().map(|(m, b)| nearest(b, w, &x[m * w..(m + 1) * w]).0).collect()
    }

    /// Every live (id, code) pair, in slot order.
    pub fn entries(&self) -> impl Iterator<Item = (PointId, &[u32])> + '_ {
        let nb = self.config.blocks;
        self.slots.iter().enumerate().filter_map(move |(s, sl)| sl.map(|sl| (sl.id, &self.codes[s * nb..(s + 1) * nb])))
    }

    /// Registers `id` in memory and queues its record write.
    pub(crate) fn stage_insert(&mut self, id: PointId, x: &[f64], code: &[u32], writes: &mut WriteBatch) -> Result<()> {
        if self.index.contains_key(&id) {
            return Err(Error::Duplicate(id));
        }
        let addr = self.store.alloc()?;
        writes.put(addr, encode_f64s(x));
        let slot = Slot { id, addr };
        let nb = self.config.blocks;
        let s = match self.free_slots.pop() {
            Some(s) => {
                self.slots[s] = Some(slot);
                self.codes[s * nb..(s + 1) * nb].copy_from_slice(code);
                s
            }
            None => {
                self.slots.push(Some(slot));
                self.codes.extend_from_slice(code);
                self.slots.len() - 1
            }
        };
        self.index.insert(id, s);
        Ok(())
    }

    /// Drops `id` from memory and queues the free of its record. Returns its code.
    pub(crate) fn stage_remove(&mut self, id: PointId, writes: &mut WriteBatch) -> Result<Vec<u32>> {
        let s = self.index.remove(&id).ok_or(Error::NotFound(id))?;
        let slot = self.slots[s].take().unwrap();
        self.free_slots.push(s);
        writes.free(slot.addr);
        let nb = self.config.blocks;
        Ok(self.codes[s * nb..(s + 1) * nb].to_vec())
    }

    /// Stores `x` under `code` with one write round and no reads.
    pub fn add(&mut self, id: PointId, x: &[f64], code: &[u32]) -> Result<()> {
        let mut writes = WriteBatch::new();
        self.stage_insert(id, x, code, &mut writes)?;
        self.commit(writes)
    }

    /// Drops `id` and frees its record with one write round. Returns its code.
    pub fn remove(&mut self, id: PointId) -> Result<Vec<u32>> {
        let mut writes = WriteBatch::new();
        let code = self.stage_remove(id, &mut writes)?;
        self.commit(writes)?;
        Ok(code)
    }

    /// Applies `writes` as a complete update window with no reads.
    pub(crate) fn commit(&mut self, writes: WriteBatch) -> Result<()> {
        self.store.begin_update()?;
        let res = self.store.write_batch(writes);
        self.finish_window(res)
    }

    pub(crate) fn finish_window(&mut self, res: std::result::Result<(), crate::store::StoreError>) -> Result<()> {
        match res {
            Ok(()) => {
                self.store.end_update()?;
                Ok(())
            }
            Err(e) => {
                self.store.abort_update();
                Err(e.into())
            }
        }
    }

    /// Fetches the vectors of `ids` in one read round of the open window.
    pub(crate) fn read_vectors(&mut self, ids: &[PointId]) -> Result<Vec<Vec<f64>>> {
        let addrs: Vec<_> = ids
            .iter()
            .map(|id| self.index.get(id).map(|&s| self.slots[s].unwrap().addr).ok_or(Error::NotFound(*id)))
            .collect::<Result<_>>()?;
        let blobs = self.store.read_batch(&addrs)?;
        blobs.iter().map(|b| Ok(decode_f64s(b)?)).collect()
    }

    pub fn knn_query(&self, q: &[f32], k: usize) -> Result<Vec<Neighbor>> {
        if self.is_empty() {
            return Err(invalid("query against an empty index"));
        }
        check_vector(q, self.config.dim)?;
        let table = AdcTable::new(&to_f64(q), &self.codebooks(), self.config.k());
        Ok(top_k(self.entries().map(|(id, code)| (id, table.distance_sq(code))), k))
    }

    pub fn knn_rerank(&self, q: &[f32], k: usize, k_prime: usize) -> Result<Vec<Neighbor>> {
        let candidates = self.knn_query(q, k_prime.max(k))?;
        rerank(&self.store, &to_f64(q), &candidates, |id| self.slots[self.index[&id]].unwrap().addr, k)
    }
}

/// Pairs ids with their rows, sorted by id, rejecting duplicates and bad rows.
pub(crate) fn sorted_rows(config: &PqConfig, ids: &[PointId], data: &[f32]) -> Result<(Vec<PointId>, Vec<Vec<f64>>)> {
    config.validate()?;
    let d = config.dim;
    if data.len() != ids.len() * d {
        return Err(invalid(format!("{} values for {} points of dimension {d}", data.len(), ids.len())));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by_key(|&i| ids[i]);
    if order.windows(2).any(|w| ids[w[0]] == ids[w[1]]) {
        return Err(invalid("duplicate ids"));
    }
    let mut rows = Vec::with_capacity(ids.len());
    for &i in &order {
        let x = &data[i * d..(i + 1) * d];
        check_vector(x, d)?;
        rows.push(to_f64(x));
    }
    Ok((order.iter().map(|&i| ids[i]).collect(), rows))
}
