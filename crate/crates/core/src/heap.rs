//! Binary heaps stored on disk, updated in three dependent read rounds and
//! one write round.
//!
//! Position `i` of a heap lives at offset `i` of the heap's own region, so
//! parents, children and siblings are computable from an index. Each node
//! record holds its key (value, id, owner address, payload) plus its
//! *deletion path*: the positions from the root down to the node, then
//! onwards through the preferred child down to a leaf. The root record also
//! keeps the insertion path (root to the parent of the first vacant slot) and
//! the position of the last leaf.
//!
//! Every element has an owner block in region 0. Word `1 + locator_slot` of
//! that block holds the address of the node currently holding the element,
//! which is how a delete finds its node without scanning.
//!
//! An update reads (1) the owner's locator, (2) the node it points to, or the
//! root for an insert, and (3) the off-by-one tree around the relevant path
//! plus the last leaf. Everything else happens in memory before a single
//! write batch.
//!
//! When the last leaf is removed, nodes on its branch keep deletion paths
//! that may end at the vacated slot. Such paths are normalized against the
//! current size when read instead of being rewritten, which keeps the write
//! set inside the off-by-one tree.

use std::cmp::Ordering;
use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{corrupt, invalid, Result};
use crate::store::{DiskAddress, DiskStore, RecordReader, RecordWriter, WriteBatch};

/// Total order on (value, id) pairs shared by heaps and kd splits.
pub fn key_cmp(a_value: f64, a_id: u64, b_value: f64, b_id: u64) -> Ordering {
    a_value.total_cmp(&b_value).then(a_id.cmp(&b_id))
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Polarity {
    Max,
    Min,
}

impl Polarity {
    /// Whether `a` belongs above `b`.
    pub fn above(self, a: &HeapKey, b: &HeapKey) -> bool {
        match self {
            Polarity::Max => a.cmp_key(b) == Ordering::Greater,
            Polarity::Min => a.cmp_key(b) == Ordering::Less,
        }
    }
}

/// Payloads are short subvectors, so they usually stay inline.
pub type Payload = SmallVec<[f64; 16]>;

/// Heap positions along a path; inline for heaps of fewer than 2^16 nodes.
type Path = SmallVec<[u64; 16]>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeapKey {
    pub value: f64,
    pub id: u64,
    pub owner: DiskAddress,
    pub payload: Payload,
}

impl HeapKey {
    pub fn new(value: f64, id: u64, owner: DiskAddress, payload: &[f64]) -> Self {
        HeapKey { value, id, owner, payload: Payload::from_slice(payload) }
    }

    pub fn cmp_key(&self, other: &HeapKey) -> Ordering {
        key_cmp(self.value, self.id, other.value, other.id)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum HeapOp {
    Insert(HeapKey),
    Delete { id: u64, owner: DiskAddress },
    /// Removes `id` and inserts `key` without changing the size.
    Replace { id: u64, owner: DiskAddress, key: HeapKey },
}

impl HeapOp {
    fn target(&self) -> Option<(u64, DiskAddress)> {
        match self {
            HeapOp::Insert(_) => None,
            HeapOp::Delete { id, owner } | HeapOp::Replace { id, owner, .. } => Some((*id, *owner)),
        }
    }
}

/// In-memory state of a heap after an operation.
#[derive(Clone, Debug, PartialEq)]
pub struct HeapState {
    pub len: u64,
    pub top: Option<HeapKey>,
}

#[derive(Debug, Default)]
pub struct BatchOutcome {
    pub states: Vec<HeapState>,
    /// Blobs for the caller's extra round-one addresses, in order.
    pub extra: Vec<Vec<u8>>,
    /// Per task, the number of distinct nodes in the fetched off-by-one tree,
    /// counting the node read in round two.
    pub tree_sizes: Vec<usize>,
}

fn parent(i: u64) -> u64 {
    (i - 1) / 2
}

fn sibling(i: u64) -> u64 {
    if i % 2 == 1 {
        i + 1
    } else {
        i - 1
    }
}

fn depth(i: u64) -> usize {
    (63 - (i + 1).leading_zeros()) as usize
}

/// Number of levels of a heap holding `n` elements.
pub fn height(n: u64) -> usize {
    if n == 0 {
        0
    } else {
        depth(n - 1) + 1
    }
}

/// Positions from the root down to `i`, inclusive.
fn root_path(i: u64) -> Path {
    let mut p = Path::new();
    let mut x = i;
    loop {
        p.push(x);
        if x == 0 {
            break;
        }
        x = parent(x);
    }
    p.reverse();
    p
}

fn insertion_path(len: u64) -> Path {
    if len == 0 {
        Path::new()
    } else {
        root_path(parent(len))
    }
}

/// Trims a stored deletion path that runs past the end of a heap of size `len`.
fn normalize(path: &mut Path, len: u64) {
    while let Some(&last) = path.last() {
        if last < len {
            break;
        }
        path.pop();
        if last > 0 && last % 2 == 0 && last - 1 < len {
            path.push(last - 1);
            break;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct RootExtras {
    insertion: Path,
    last: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
struct NodeRecord {
    key: HeapKey,
    path: Path,
    root: Option<Box<RootExtras>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HeapPQ {
    region: u32,
    polarity: Polarity,
    locator_slot: u64,
    payload_len: usize,
    len: u64,
    top: Option<HeapKey>,
}

impl HeapPQ {
    pub fn new(store: &mut DiskStore, polarity: Polarity, locator_slot: u64, payload_len: usize) -> Self {
        HeapPQ { region: store.alloc_region(), polarity, locator_slot, payload_len, len: 0, top: None }
    }

    /// Bulk-loads `items`, writing every node and locator in one round.
    pub fn build(
        store: &mut DiskStore,
        polarity: Polarity,
        locator_slot: u64,
        payload_len: usize,
        items: Vec<HeapKey>,
    ) -> Result<Self> {
        let mut writes = WriteBatch::new();
        let heap = Self::build_into(store, polarity, locator_slot, payload_len, items, &mut writes)?;
        store.write_batch(writes)?;
        Ok(heap)
    }

    /// Like [`HeapPQ::build`] but leaves the writes in `writes`.
    pub fn build_into(
        store: &mut DiskStore,
        polarity: Polarity,
        locator_slot: u64,
        payload_len: usize,
        mut items: Vec<HeapKey>,
        writes: &mut WriteBatch,
    ) -> Result<Self> {
        let mut heap = Self::new(store, polarity, locator_slot, payload_len);
        let mut ids = HashSet::with_capacity(items.len());
        for k in &items {
            heap.check_key(k)?;
            if !ids.insert(k.id) {
                return Err(invalid(format!("duplicate id {} in heap build", k.id)));
            }
        }
        match polarity {
            Polarity::Max => items.sort_by(|a, b| b.cmp_key(a)),
            Polarity::Min => items.sort_by(|a, b| a.cmp_key(b)),
        }
        let n = items.len() as u64;
        // A sorted array is already heap-ordered.
        let mut next = vec![u64::MAX; items.len()];
        for i in 0..n {
            let c1 = 2 * i + 1;
            if c1 < n {
                let c2 = c1 + 1;
                next[i as usize] =
                    if c2 < n && polarity.above(&items[c2 as usize], &items[c1 as usize]) { c2 } else { c1 };
            }
        }
        for i in 0..n {
            let mut path = root_path(i);
            let mut cur = i;
            while next[cur as usize] != u64::MAX {
                cur = next[cur as usize];
                path.push(cur);
            }
            let root = (i == 0).then(|| Box::new(RootExtras { insertion: insertion_path(n), last: Some(n - 1) }));
            let key = &items[i as usize];
            writes.put(heap.locator_address(key.owner), encode_addr(heap.addr(i)));
            let rec = NodeRecord { key: key.clone(), path, root };
            writes.put(heap.addr(i), heap.encode(&rec));
        }
        heap.len = n;
        heap.top = items.into_iter().next();
        Ok(heap)
    }

    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// The extremum, held in memory.
    pub fn peek(&self) -> Option<&HeapKey> {
        self.top.as_ref()
    }

    pub fn polarity(&self) -> Polarity {
        self.polarity
    }

    pub fn region(&self) -> u32 {
        self.region
    }

    pub fn payload_len(&self) -> usize {
        self.payload_len
    }

    pub fn addr(&self, pos: u64) -> DiskAddress {
        DiskAddress::new(self.region, pos)
    }

    pub fn locator_address(&self, owner: DiskAddress) -> DiskAddress {
        owner.add(1 + self.locator_slot)
    }

    pub fn set_state(&mut self, state: HeapState) {
        self.len = state.len;
        self.top = state.top;
    }

    pub fn insert(&mut self, store: &mut DiskStore, key: HeapKey) -> Result<()> {
        self.run_single(store, HeapOp::Insert(key))
    }

    pub fn delete(&mut self, store: &mut DiskStore, id: u64, owner: DiskAddress) -> Result<()> {
        self.run_single(store, HeapOp::Delete { id, owner })
    }

    pub fn replace(&mut self, store: &mut DiskStore, id: u64, owner: DiskAddress, key: HeapKey) -> Result<()> {
        self.run_single(store, HeapOp::Replace { id, owner, key })
    }

    /// Removes and returns the extremum.
    pub fn pop(&mut self, store: &mut DiskStore) -> Result<Option<HeapKey>> {
        let Some(top) = self.top.clone() else { return Ok(None) };
        self.delete(store, top.id, top.owner)?;
        Ok(Some(top))
    }

    fn run_single(&mut self, store: &mut DiskStore, op: HeapOp) -> Result<()> {
        let mut writes = WriteBatch::new();
        let out = run_batch(store, &[(&*self, &op)], &[], &mut writes)?;
        store.write_batch(writes)?;
        self.set_state(out.states.into_iter().next().unwrap());
        Ok(())
    }

    fn check_key(&self, k: &HeapKey) -> Result<()> {
        if k.value.is_nan() {
            return Err(invalid(format!("NaN key for id {}", k.id)));
        }
        if k.payload.len() != self.payload_len {
            return Err(invalid(format!(
                "payload of {} values, heap expects {}",
                k.payload.len(),
                self.payload_len
            )));
        }
        Ok(())
    }

    fn encode(&self, rec: &NodeRecord) -> Vec<u8> {
        let extra = rec.root.as_ref().map_or(0, |r| 2 + r.insertion.len());
        let mut w = RecordWriter::with_words(5 + self.payload_len + rec.path.len() + extra);
        w.f64(rec.key.value).u64(rec.key.id).u64(rec.key.owner.0).f64s(&rec.key.payload);
        w.u64(rec.path.len() as u64);
        for &p in &rec.path {
            w.u64(self.addr(p).0);
        }
        if let Some(r) = &rec.root {
            w.u64(r.insertion.len() as u64);
            for &p in &r.insertion {
                w.u64(self.addr(p).0);
            }
            w.u64(r.last.map_or(DiskAddress::NONE, |p| self.addr(p)).0);
        }
        w.finish()
    }

    fn decode(&self, bytes: &[u8], pos: u64) -> Result<NodeRecord> {
        let mut r = RecordReader::new(bytes);
        let value = r.f64()?;
        let id = r.u64()?;
        let owner = DiskAddress(r.u64()?);
        let payload = r.words(self.payload_len)?.map(f64::from_bits).collect();
        let path = self.decode_positions(&mut r)?;
        let root = if pos == 0 {
            let insertion = self.decode_positions(&mut r)?;
            let last = DiskAddress(r.u64()?);
            let last = if last == DiskAddress::NONE { None } else { Some(self.position_of(last)?) };
            Some(Box::new(RootExtras { insertion, last }))
        } else {
            None
        };
        if r.remaining() != 0 {
            return Err(corrupt(format!("trailing bytes in heap node {pos}")));
        }
        Ok(NodeRecord { key: HeapKey { value, id, owner, payload }, path, root })
    }

    fn decode_positions(&self, r: &mut RecordReader) -> Result<Path> {
        let n = r.u64()?;
        if n > 64 {
            return Err(corrupt(format!("path length {n}")));
        }
        let mut bad = false;
        let out = r
            .words(n as usize)?
            .map(|a| {
                let a = DiskAddress(a);
                bad |= a.region() != self.region;
                a.offset()
            })
            .collect();
        if bad {
            return Err(corrupt(format!("path leaves heap region {}", self.region)));
        }
        Ok(out)
    }

    fn position_of(&self, a: DiskAddress) -> Result<u64> {
        if a.region() != self.region {
            return Err(corrupt(format!("address {a} outside heap region {}", self.region)));
        }
        Ok(a.offset())
    }

    /// Checks every on-disk invariant against a full scan. Does not touch the ledger.
    pub fn validate(&self, store: &DiskStore) -> Result<()> {
        let n = self.len;
        let mut recs = Vec::with_capacity(n as usize);
        for i in 0..n {
            recs.push(self.decode(&store.inspect(self.addr(i))?, i)?);
        }
        if store.is_live(self.addr(n)) {
            return Err(corrupt(format!("slot {n} past the end is still live")));
        }
        let mut ids = HashSet::new();
        for (i, rec) in recs.iter().enumerate() {
            let i = i as u64;
            if !ids.insert(rec.key.id) {
                return Err(corrupt(format!("id {} appears twice", rec.key.id)));
            }
            if i > 0 && self.polarity.above(&rec.key, &recs[parent(i) as usize].key) {
                return Err(corrupt(format!("heap order violated at {i}")));
            }
            let loc = decode_addr(&store.inspect(self.locator_address(rec.key.owner))?)?;
            if loc != self.addr(i) {
                return Err(corrupt(format!("locator of id {} points at {loc}, not {i}", rec.key.id)));
            }
            let mut expect = root_path(i);
            let mut cur = i;
            loop {
                let c1 = 2 * cur + 1;
                if c1 >= n {
                    break;
                }
                let c2 = c1 + 1;
                cur = if c2 < n && self.polarity.above(&recs[c2 as usize].key, &recs[c1 as usize].key) {
                    c2
                } else {
                    c1
                };
                expect.push(cur);
            }
            let mut stored = rec.path.clone();
            normalize(&mut stored, n);
            if stored != expect {
                return Err(corrupt(format!("deletion path of {i} is {stored:?}, expected {expect:?}")));
            }
        }
        if let Some(root) = recs.first() {
            let extras = root.root.as_ref().ok_or_else(|| corrupt("root record lacks extras"))?;
            if extras.insertion != insertion_path(n) || extras.last != Some(n - 1) {
                return Err(corrupt("root insertion path or last leaf is stale"));
            }
            if self.top.as_ref() != Some(&root.key) {
                return Err(corrupt("in-memory extremum differs from the root"));
            }
        } else if self.top.is_some() {
            return Err(corrupt("empty heap has an extremum"));
        }
        Ok(())
    }

    /// Level-order (position, id, value) triples. Does not touch the ledger.
    pub fn dump(&self, store: &DiskStore) -> Result<Vec<(u64, u64, f64)>> {
        (0..self.len)
            .map(|i| {
                let rec = self.decode(&store.inspect(self.addr(i))?, i)?;
                Ok((i, rec.key.id, rec.key.value))
            })
            .collect()
    }
}

fn encode_addr(a: DiskAddress) -> Vec<u8> {
    a.0.to_le_bytes().to_vec()
}

fn decode_addr(bytes: &[u8]) -> Result<DiskAddress> {
    Ok(DiskAddress(RecordReader::new(bytes).u64()?))
}

/// Runs one operation on each of several distinct heaps, sharing rounds.
///
/// `extra_reads` are fetched in round one alongside the locators, which lets
/// callers pick up owner records without spending another round. Node and
/// locator writes are appended to `writes`; the caller commits them, usually
/// together with writes of its own.
pub fn run_batch(
    store: &mut DiskStore,
    tasks: &[(&HeapPQ, &HeapOp)],
    extra_reads: &[DiskAddress],
    writes: &mut WriteBatch,
) -> Result<BatchOutcome> {
    for (h, op) in tasks {
        match op {
            HeapOp::Insert(k) | HeapOp::Replace { key: k, .. } => h.check_key(k)?,
            HeapOp::Delete { .. } => {}
        }
        if op.target().is_some() && h.len == 0 {
            return Err(invalid("delete from an empty heap"));
        }
    }

    let mut round1 = extra_reads.to_vec();
    for (h, op) in tasks {
        if let Some((_, owner)) = op.target() {
            round1.push(h.locator_address(owner));
        }
    }
    let mut blobs1 = store.read_batch(&round1)?.into_iter();
    let extra: Vec<Vec<u8>> = blobs1.by_ref().take(extra_reads.len()).collect();

    let mut round2 = Vec::new();
    let mut first_pos = vec![None; tasks.len()];
    for (t, (h, op)) in tasks.iter().enumerate() {
        let pos = if op.target().is_some() {
            let loc = decode_addr(&blobs1.next().unwrap())?;
            let pos = h.position_of(loc)?;
            if pos >= h.len {
                return Err(corrupt(format!("locator points past the heap end at {pos}")));
            }
            Some(pos)
        } else if h.len > 0 {
            Some(0)
        } else {
            None
        };
        if let Some(p) = pos {
            round2.push(h.addr(p));
        }
        first_pos[t] = pos;
    }
    let mut blobs2 = store.read_batch_ref(&round2)?.into_iter();

    let mut firsts = Vec::with_capacity(tasks.len());
    let mut round3 = Vec::new();
    let mut wants = Vec::with_capacity(tasks.len());
    for (t, (h, op)) in tasks.iter().enumerate() {
        let Some(p) = first_pos[t] else {
            firsts.push(None);
            wants.push(Vec::new());
            continue;
        };
        let rec = h.decode(&blobs2.next().unwrap(), p)?;
        let n = h.len;
        let mut want = match op {
            HeapOp::Insert(_) => {
                let extras = rec.root.as_ref().ok_or_else(|| corrupt("root record lacks extras"))?;
                if extras.insertion != insertion_path(n) {
                    return Err(corrupt("stored insertion path is stale"));
                }
                let mut w = Vec::with_capacity(2 * extras.insertion.len() + 2);
                w.extend_from_slice(&extras.insertion);
                w.extend(root_path(n).into_iter().skip(1).map(sibling).filter(|&s| s < n));
                w
            }
            HeapOp::Delete { id, .. } | HeapOp::Replace { id, .. } => {
                if rec.key.id != *id {
                    return Err(corrupt(format!("locator for id {id} leads to id {}", rec.key.id)));
                }
                let mut pv = rec.path.clone();
                normalize(&mut pv, n);
                if pv.get(depth(p)) != Some(&p) {
                    return Err(corrupt(format!("deletion path of {p} does not pass through it")));
                }
                let mut w = Vec::with_capacity(2 * pv.len() + 1);
                w.extend_from_slice(&pv);
                w.extend(pv.iter().skip(1).map(|&u| sibling(u)).filter(|&s| s < n));
                if matches!(op, HeapOp::Delete { .. }) {
                    w.push(n - 1);
                }
                w
            }
        };
        want.sort_unstable();
        want.dedup();
        want.retain(|&u| u != p);
        round3.extend(want.iter().map(|&u| h.addr(u)));
        firsts.push(Some((p, rec)));
        wants.push(want);
    }
    let mut blobs3 = store.read_batch_ref(&round3)?.into_iter();

    let mut out = BatchOutcome { extra, ..BatchOutcome::default() };
    for (t, (h, op)) in tasks.iter().enumerate() {
        let mut recs = Vec::with_capacity(wants[t].len() + 1);
        for &u in &wants[t] {
            recs.push((u, h.decode(&blobs3.next().unwrap(), u)?));
        }
        if let Some(first) = firsts[t].take() {
            recs.push(first);
        }
        out.tree_sizes.push(recs.len());
        out.states.push(apply(h, op, recs, writes)?);
    }
    Ok(out)
}

/// The part of a heap visible to one operation.
struct Local {
    polarity: Polarity,
    /// Position, id and stored deletion path of every fetched node.
    recs: Vec<(u64, u64, Path)>,
    keys: Vec<(u64, HeapKey)>,
}

impl Local {
    fn idx(&self, pos: u64) -> Result<usize> {
        self.keys
            .iter()
            .position(|(p, _)| *p == pos)
            .ok_or_else(|| corrupt(format!("heap position {pos} outside the fetched tree")))
    }

    fn key(&self, pos: u64) -> Result<&HeapKey> {
        Ok(&self.keys[self.idx(pos)?].1)
    }

    fn above(&self, a: u64, b: u64) -> Result<bool> {
        Ok(self.polarity.above(self.key(a)?, self.key(b)?))
    }

    fn swap(&mut self, a: u64, b: u64) -> Result<()> {
        let (i, j) = (self.idx(a)?, self.idx(b)?);
        self.keys[i].0 = b;
        self.keys[j].0 = a;
        Ok(())
    }

    fn sift(&mut self, mut i: u64, len: u64) -> Result<()> {
        let start = i;
        while i > 0 && self.above(i, parent(i))? {
            self.swap(i, parent(i))?;
            i = parent(i);
        }
        if i != start {
            return Ok(());
        }
        loop {
            let c1 = 2 * i + 1;
            if c1 >= len {
                return Ok(());
            }
            let c2 = c1 + 1;
            let best = if c2 < len && self.above(c2, c1)? { c2 } else { c1 };
            if !self.above(best, i)? {
                return Ok(());
            }
            self.swap(best, i)?;
            i = best;
        }
    }

    fn descent(&self, u: u64, len: u64, affected: &[u64]) -> Result<Path> {
        let mut path = root_path(u);
        let mut cur = u;
        loop {
            let c1 = 2 * cur + 1;
            if c1 >= len {
                return Ok(path);
            }
            let c2 = c1 + 1;
            let next = if c2 < len && self.above(c2, c1)? { c2 } else { c1 };
            path.push(next);
            if affected.contains(&next) {
                cur = next;
                continue;
            }
            let stored = self
                .recs
                .iter()
                .find(|(p, _, _)| *p == next)
                .map(|(_, _, path)| path)
                .ok_or_else(|| corrupt(format!("record {next} outside the fetched tree")))?;
            let mut stored = stored.clone();
            normalize(&mut stored, len);
            let d = depth(next);
            if stored.get(d) != Some(&next) {
                return Err(corrupt(format!("deletion path of {next} does not pass through it")));
            }
            path.extend_from_slice(&stored[d + 1..]);
            return Ok(path);
        }
    }
}

fn apply(h: &HeapPQ, op: &HeapOp, recs: Vec<(u64, NodeRecord)>, writes: &mut WriteBatch) -> Result<HeapState> {
    let n = h.len;
    let mut local = Local { polarity: h.polarity, recs: Vec::with_capacity(recs.len()), keys: Vec::with_capacity(recs.len() + 1) };
    for (p, r) in recs {
        local.recs.push((p, r.key.id, r.path));
        local.keys.push((p, r.key));
    }

    let (len, start, affected) = match op {
        HeapOp::Insert(k) => {
            local.keys.push((n, k.clone()));
            (n + 1, Some(n), root_path(n))
        }
        HeapOp::Delete { id, .. } | HeapOp::Replace { id, .. } => {
            let v = local.keys.iter().find(|(_, k)| k.id == *id).map(|(p, _)| *p).unwrap();
            let mut pv = local.recs.iter().find(|(p, _, _)| *p == v).unwrap().2.clone();
            normalize(&mut pv, n);
            if let HeapOp::Replace { key, .. } = op {
                let i = local.idx(v)?;
                local.keys[i].1 = key.clone();
                (n, Some(v), pv)
            } else {
                let last = local.idx(n - 1)?;
                let (_, moved) = local.keys.swap_remove(last);
                if v != n - 1 {
                    let i = local.idx(v)?;
                    local.keys[i].1 = moved;
                }
                pv.retain(|u| *u < n - 1);
                (n - 1, (v < n - 1).then_some(v), pv)
            }
        }
    };
    if let Some(s) = start {
        local.sift(s, len)?;
    }

    for &u in &affected {
        let path = local.descent(u, len, &affected)?;
        let root = (u == 0).then(|| Box::new(RootExtras { insertion: insertion_path(len), last: Some(len - 1) }));
        let rec = NodeRecord { key: local.key(u)?.clone(), path, root };
        writes.put(h.addr(u), h.encode(&rec));
    }
    for (pos, key) in &local.keys {
        if *pos >= len {
            continue;
        }
        let before = local.recs.iter().find(|(_, id, _)| *id == key.id).map(|(p, _, _)| *p);
        if before != Some(*pos) {
            writes.put(h.locator_address(key.owner), encode_addr(h.addr(*pos)));
        }
    }
    if len < n {
        writes.free(h.addr(n - 1));
    }
    let top = if len > 0 { Some(local.key(0)?.clone()) } else { None };
    Ok(HeapState { len, top })
}
