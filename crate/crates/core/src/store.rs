//! Simulated external memory with round accounting.
//!
//! Every blob lives at a [`DiskAddress`]. Reads and writes happen in batches,
//! and each non-empty batch costs exactly one round no matter how many
//! addresses it touches. Updates run inside an update window so the cost of
//! each update can be audited afterwards; reads outside a window (query-time
//! re-ranking) are tallied separately.
//!
//! Addresses are split into regions. Region 0 is a bump allocator whose
//! offsets are never reused. Every other region is *structured*: any offset
//! may be written, which lets heaps compute the address of a tree position
//! directly from its index.

use std::borrow::Cow;
use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::os::unix::fs::FileExt;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Size of a machine word in bytes. All I/O volumes are reported in words.
pub const WORD_BYTES: usize = 8;

const OFFSET_BITS: u32 = 40;
const OFFSET_MASK: u64 = (1 << OFFSET_BITS) - 1;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DiskAddress(pub u64);

impl DiskAddress {
    pub const NONE: DiskAddress = DiskAddress(u64::MAX);

    pub fn new(region: u32, offset: u64) -> Self {
        debug_assert!(offset <= OFFSET_MASK);
        DiskAddress(((region as u64) << OFFSET_BITS) | offset)
    }

    pub fn region(self) -> u32 {
        (self.0 >> OFFSET_BITS) as u32
    }

    pub fn offset(self) -> u64 {
        self.0 & OFFSET_MASK
    }

    /// The address `k` slots after this one in the same region.
    pub fn add(self, k: u64) -> Self {
        DiskAddress::new(self.region(), self.offset() + k)
    }
}

impl std::fmt::Display for DiskAddress {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.region(), self.offset())
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("address {0} is not live")]
    Dead(DiskAddress),
    #[error("address {0} freed twice")]
    DoubleFree(DiskAddress),
    #[error("address {0} appears twice in one write batch")]
    DuplicateWrite(DiskAddress),
    #[error("store capacity of {0} addresses exhausted")]
    CapacityExhausted(u64),
    #[error("an update window is already open")]
    WindowOpen,
    #[error("no update window is open")]
    NoWindow,
    #[error("corrupt record: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type StoreResult<T> = Result<T, StoreError>;

/// Cost of a span of I/O.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IoReport {
    pub read_rounds: u64,
    pub write_rounds: u64,
    pub words_read: u64,
    pub words_written: u64,
}

impl IoReport {
    pub fn accumulate(&mut self, other: &IoReport) {
        self.read_rounds += other.read_rounds;
        self.write_rounds += other.write_rounds;
        self.words_read += other.words_read;
        self.words_written += other.words_written;
    }

    pub fn since(&self, earlier: &IoReport) -> IoReport {
        IoReport {
            read_rounds: self.read_rounds - earlier.read_rounds,
            write_rounds: self.write_rounds - earlier.write_rounds,
            words_read: self.words_read - earlier.words_read,
            words_written: self.words_written - earlier.words_written,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum RoundKind {
    Read,
    Write,
}

/// One round inside the current or most recent update window.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Round {
    pub kind: RoundKind,
    pub addresses: usize,
    pub words: u64,
}

#[derive(Debug, Default)]
struct QueryCounters {
    read_rounds: AtomicU64,
    words_read: AtomicU64,
}

/// Running totals plus a per-update history.
#[derive(Debug, Default)]
pub struct IoLedger {
    updates: IoReport,
    bulk: IoReport,
    query: QueryCounters,
    history: Vec<IoReport>,
}

impl IoLedger {
    /// Sum over all closed update windows.
    pub fn updates(&self) -> IoReport {
        self.updates
    }

    /// I/O issued outside any window by bulk loading.
    pub fn bulk(&self) -> IoReport {
        self.bulk
    }

    /// Reads issued outside any window, i.e. query-time re-ranking.
    pub fn query_reads(&self) -> IoReport {
        IoReport {
            read_rounds: self.query.read_rounds.load(Ordering::Relaxed),
            words_read: self.query.words_read.load(Ordering::Relaxed),
            ..IoReport::default()
        }
    }

    pub fn history(&self) -> &[IoReport] {
        &self.history
    }

    /// Per-update CSV with columns `update_idx,read_rounds,write_rounds,words_read,words_written`.
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "update_idx,read_rounds,write_rounds,words_read,words_written")?;
        for (i, r) in self.history.iter().enumerate() {
            writeln!(
                out,
                "{},{},{},{},{}",
                i, r.read_rounds, r.write_rounds, r.words_read, r.words_written
            )?;
        }
        Ok(())
    }
}

/// A set of writes and frees applied in a single round.
#[derive(Debug, Default)]
pub struct WriteBatch {
    pub puts: Vec<(DiskAddress, Vec<u8>)>,
    pub frees: Vec<DiskAddress>,
}

impl WriteBatch {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put(&mut self, addr: DiskAddress, bytes: Vec<u8>) {
        self.puts.push((addr, bytes));
    }

    pub fn free(&mut self, addr: DiskAddress) {
        self.frees.push(addr);
    }

    pub fn is_empty(&self) -> bool {
        self.puts.is_empty() && self.frees.is_empty()
    }

    pub fn extend(&mut self, other: WriteBatch) {
        self.puts.extend(other.puts);
        self.frees.extend(other.frees);
    }
}

fn fetch<'a>(backend: &'a dyn Backend, addrs: &[DiskAddress]) -> StoreResult<Vec<Cow<'a, [u8]>>> {
    let mut out = Vec::with_capacity(addrs.len());
    for &a in addrs {
        out.push(backend.get(a)?.ok_or(StoreError::Dead(a))?);
    }
    Ok(out)
}

pub fn words_of(len: usize) -> u64 {
    len.div_ceil(WORD_BYTES) as u64
}

trait Backend: Send + Sync {
    fn get(&self, addr: DiskAddress) -> StoreResult<Option<Cow<'_, [u8]>>>;
    fn contains(&self, addr: DiskAddress) -> bool;
    fn put(&mut self, addr: DiskAddress, bytes: Vec<u8>) -> StoreResult<()>;
    fn remove(&mut self, addr: DiskAddress) -> bool;
    fn live(&self) -> usize;
    fn entries(&self) -> StoreResult<Vec<(DiskAddress, Vec<u8>)>>;
}

#[derive(Default)]
struct MemoryBackend {
    regions: Vec<Vec<Option<Box<[u8]>>>>,
    live: usize,
}

impl Backend for MemoryBackend {
    fn get(&self, addr: DiskAddress) -> StoreResult<Option<Cow<'_, [u8]>>> {
        Ok(self
            .regions
            .get(addr.region() as usize)
            .and_then(|r| r.get(addr.offset() as usize))
            .and_then(|s| s.as_deref())
            .map(Cow::Borrowed))
    }

    fn contains(&self, addr: DiskAddress) -> bool {
        self.regions
            .get(addr.region() as usize)
            .and_then(|r| r.get(addr.offset() as usize))
            .is_some_and(|s| s.is_some())
    }

    fn put(&mut self, addr: DiskAddress, bytes: Vec<u8>) -> StoreResult<()> {
        let r = addr.region() as usize;
        if self.regions.len() <= r {
            self.regions.resize_with(r + 1, Vec::new);
        }
        let region = &mut self.regions[r];
        let o = addr.offset() as usize;
        if region.len() <= o {
            region.resize_with(o + 1, || None);
        }
        if region[o].is_none() {
            self.live += 1;
        }
        region[o] = Some(bytes.into_boxed_slice());
        Ok(())
    }

    fn remove(&mut self, addr: DiskAddress) -> bool {
        let slot = self
            .regions
            .get_mut(addr.region() as usize)
            .and_then(|r| r.get_mut(addr.offset() as usize));
        match slot {
            Some(s) if s.is_some() => {
                *s = None;
                self.live -= 1;
                true
            }
            _ => false,
        }
    }

    fn live(&self) -> usize {
        self.live
    }

    fn entries(&self) -> StoreResult<Vec<(DiskAddress, Vec<u8>)>> {
        let mut out = Vec::with_capacity(self.live);
        for (r, region) in self.regions.iter().enumerate() {
            for (o, slot) in region.iter().enumerate() {
                if let Some(b) = slot {
                    out.push((DiskAddress::new(r as u32, o as u64), b.to_vec()));
                }
            }
        }
        Ok(out)
    }
}

/// Append-only file with an in-memory offset index.
struct FileBackend {
    file: File,
    end: u64,
    index: HashMap<u64, (u64, u32)>,
}

impl FileBackend {
    fn create(path: &Path) -> StoreResult<Self> {
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(true)
            .open(path)?;
        Ok(FileBackend { file, end: 0, index: HashMap::new() })
    }
}

impl Backend for FileBackend {
    fn get(&self, addr: DiskAddress) -> StoreResult<Option<Cow<'_, [u8]>>> {
        match self.index.get(&addr.0) {
            None => Ok(None),
            Some(&(off, len)) => {
                let mut buf = vec![0u8; len as usize];
                self.file.read_exact_at(&mut buf, off)?;
                Ok(Some(Cow::Owned(buf)))
            }
        }
    }

    fn contains(&self, addr: DiskAddress) -> bool {
        self.index.contains_key(&addr.0)
    }

    fn put(&mut self, addr: DiskAddress, bytes: Vec<u8>) -> StoreResult<()> {
        self.file.write_all_at(&bytes, self.end)?;
        self.index.insert(addr.0, (self.end, bytes.len() as u32));
        self.end += bytes.len() as u64;
        Ok(())
    }

    fn remove(&mut self, addr: DiskAddress) -> bool {
        self.index.remove(&addr.0).is_some()
    }

    fn live(&self) -> usize {
        self.index.len()
    }

    fn entries(&self) -> StoreResult<Vec<(DiskAddress, Vec<u8>)>> {
        let mut keys: Vec<u64> = self.index.keys().copied().collect();
        keys.sort_unstable();
        keys.into_iter()
            .map(|k| Ok((DiskAddress(k), self.get(DiskAddress(k))?.map(Cow::into_owned).unwrap_or_default())))
            .collect()
    }
}

struct Window {
    report: IoReport,
    rounds: Vec<Round>,
}

/// External memory with a ledger of read and write rounds.
pub struct DiskStore {
    backend: Box<dyn Backend>,
    next_offset: u64,
    next_region: u32,
    capacity: u64,
    ledger: IoLedger,
    window: Option<Window>,
    last_rounds: Vec<Round>,
}

impl std::fmt::Debug for DiskStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DiskStore")
            .field("live", &self.backend.live())
            .field("regions", &self.next_region)
            .field("ledger", &self.ledger)
            .finish()
    }
}

impl Default for DiskStore {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl DiskStore {
    pub fn in_memory() -> Self {
        Self::with_backend(Box::new(MemoryBackend::default()))
    }

    /// A store backed by a single append-only file at `path`.
    pub fn file_backed(path: impl AsRef<Path>) -> StoreResult<Self> {
        Ok(Self::with_backend(Box::new(FileBackend::create(path.as_ref())?)))
    }

    fn with_backend(backend: Box<dyn Backend>) -> Self {
        DiskStore {
            backend,
            next_offset: 0,
            next_region: 1,
            capacity: OFFSET_MASK,
            ledger: IoLedger::default(),
            window: None,
            last_rounds: Vec::new(),
        }
    }

    /// Caps the number of addresses the bump allocator will hand out.
    pub fn with_capacity_limit(mut self, cap: u64) -> Self {
        self.capacity = cap.min(OFFSET_MASK);
        self
    }

    pub fn alloc(&mut self) -> StoreResult<DiskAddress> {
        self.alloc_block(1)
    }

    /// Allocates `k` consecutive fresh addresses, each holding an empty blob.
    pub fn alloc_block(&mut self, k: u64) -> StoreResult<DiskAddress> {
        if self.next_offset + k > self.capacity {
            return Err(StoreError::CapacityExhausted(self.capacity));
        }
        let base = DiskAddress::new(0, self.next_offset);
        self.next_offset += k;
        for i in 0..k {
            self.backend.put(base.add(i), Vec::new())?;
        }
        Ok(base)
    }

    /// Reserves a fresh structured region whose offsets may be written freely.
    pub fn alloc_region(&mut self) -> u32 {
        let r = self.next_region;
        self.next_region += 1;
        r
    }

    pub fn is_live(&self, addr: DiskAddress) -> bool {
        self.backend.contains(addr)
    }

    pub fn live_addresses(&self) -> usize {
        self.backend.live()
    }

    /// Every live blob plus allocator state, for snapshots. Does not touch the ledger.
    pub fn export(&self) -> StoreResult<StoreImage> {
        Ok(StoreImage { next_offset: self.next_offset, next_region: self.next_region, blobs: self.backend.entries()? })
    }

    /// An in-memory store holding the contents of `image`, with a fresh ledger.
    pub fn import(image: StoreImage) -> StoreResult<Self> {
        let mut store = Self::in_memory();
        for (a, b) in image.blobs {
            store.backend.put(a, b)?;
        }
        store.next_offset = image.next_offset;
        store.next_region = image.next_region;
        Ok(store)
    }

    pub fn begin_update(&mut self) -> StoreResult<()> {
        if self.window.is_some() {
            return Err(StoreError::WindowOpen);
        }
        self.window = Some(Window { report: IoReport::default(), rounds: Vec::new() });
        Ok(())
    }

    pub fn end_update(&mut self) -> StoreResult<IoReport> {
        let w = self.window.take().ok_or(StoreError::NoWindow)?;
        self.ledger.updates.accumulate(&w.report);
        self.ledger.history.push(w.report);
        self.last_rounds = w.rounds;
        Ok(w.report)
    }

    /// Closes a window that failed midway. Its cost is still recorded.
    pub fn abort_update(&mut self) {
        if self.window.is_some() {
            let _ = self.end_update();
        }
    }

    pub fn in_window(&self) -> bool {
        self.window.is_some()
    }

    /// Rounds of the most recently closed window.
    pub fn last_window_rounds(&self) -> &[Round] {
        &self.last_rounds
    }

    /// Rounds issued so far in the open window.
    pub fn current_rounds(&self) -> &[Round] {
        self.window.as_ref().map(|w| w.rounds.as_slice()).unwrap_or(&[])
    }

    pub fn ledger(&self) -> &IoLedger {
        &self.ledger
    }

    /// Reads all `addrs` in one round. An empty batch costs nothing.
    pub fn read_batch(&mut self, addrs: &[DiskAddress]) -> StoreResult<Vec<Vec<u8>>> {
        Ok(self.read_batch_ref(addrs)?.into_iter().map(Cow::into_owned).collect())
    }

    /// Like [`DiskStore::read_batch`], borrowing blobs where the backend allows.
    pub fn read_batch_ref(&mut self, addrs: &[DiskAddress]) -> StoreResult<Vec<Cow<'_, [u8]>>> {
        if addrs.is_empty() {
            return Ok(Vec::new());
        }
        let blobs = fetch(&*self.backend, addrs)?;
        let words: u64 = blobs.iter().map(|b| words_of(b.len())).sum();
        match &mut self.window {
            Some(w) => {
                w.report.read_rounds += 1;
                w.report.words_read += words;
                w.rounds.push(Round { kind: RoundKind::Read, addresses: addrs.len(), words });
            }
            None => self.count_query(words),
        }
        Ok(blobs)
    }

    /// Reads outside an update window, for query-time re-ranking.
    pub fn read_bypass(&self, addrs: &[DiskAddress]) -> StoreResult<Vec<Vec<u8>>> {
        if addrs.is_empty() {
            return Ok(Vec::new());
        }
        let blobs = fetch(&*self.backend, addrs)?;
        self.count_query(blobs.iter().map(|b| words_of(b.len())).sum());
        Ok(blobs.into_iter().map(Cow::into_owned).collect())
    }

    fn count_query(&self, words: u64) {
        self.ledger.query.read_rounds.fetch_add(1, Ordering::Relaxed);
        self.ledger.query.words_read.fetch_add(words, Ordering::Relaxed);
    }

    /// Reads a blob without touching the ledger. For validators and dumps.
    pub fn inspect(&self, addr: DiskAddress) -> StoreResult<Vec<u8>> {
        Ok(self.backend.get(addr)?.ok_or(StoreError::Dead(addr))?.into_owned())
    }

    /// Applies every put and free in `batch` as a single round.
    pub fn write_batch(&mut self, batch: WriteBatch) -> StoreResult<()> {
        if batch.is_empty() {
            return Ok(());
        }
        let mut seen = std::collections::HashSet::with_capacity(batch.puts.len() + batch.frees.len());
        for &(a, _) in &batch.puts {
            if !seen.insert(a) {
                return Err(StoreError::DuplicateWrite(a));
            }
            if a.region() == 0 && !self.backend.contains(a) {
                return Err(StoreError::Dead(a));
            }
        }
        for &a in &batch.frees {
            if !seen.insert(a) {
                return Err(StoreError::DuplicateWrite(a));
            }
            if !self.backend.contains(a) {
                return Err(StoreError::DoubleFree(a));
            }
        }
        let addresses = batch.puts.len() + batch.frees.len();
        let mut words = 0;
        for (a, bytes) in batch.puts {
            words += words_of(bytes.len());
            self.backend.put(a, bytes)?;
        }
        for a in batch.frees {
            self.backend.remove(a);
        }
        let target = match &mut self.window {
            Some(w) => {
                w.rounds.push(Round { kind: RoundKind::Write, addresses, words });
                &mut w.report
            }
            None => &mut self.ledger.bulk,
        };
        target.write_rounds += 1;
        target.words_written += words;
        Ok(())
    }

    pub fn write(&mut self, addr: DiskAddress, bytes: Vec<u8>) -> StoreResult<()> {
        let mut b = WriteBatch::new();
        b.put(addr, bytes);
        self.write_batch(b)
    }

    pub fn free(&mut self, addr: DiskAddress) -> StoreResult<()> {
        let mut b = WriteBatch::new();
        b.free(addr);
        self.write_batch(b)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StoreImage {
    pub next_offset: u64,
    pub next_region: u32,
    pub blobs: Vec<(DiskAddress, Vec<u8>)>,
}

/// Little-endian word encoder for fixed-layout records.
#[derive(Default)]
pub struct RecordWriter {
    buf: Vec<u8>,
}

impl RecordWriter {
    pub fn with_words(n: usize) -> Self {
        RecordWriter { buf: Vec::with_capacity(n * WORD_BYTES) }
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.u64(v.to_bits())
    }

    pub fn f64s(&mut self, v: &[f64]) -> &mut Self {
        for &x in v {
            self.f64(x);
        }
        self
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct RecordReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> RecordReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        RecordReader { buf, pos: 0 }
    }

    pub fn u64(&mut self) -> StoreResult<u64> {
        let end = self.pos + WORD_BYTES;
        let bytes = self
            .buf
            .get(self.pos..end)
            .ok_or_else(|| StoreError::Corrupt(format!("record truncated at byte {}", self.pos)))?;
        self.pos = end;
        Ok(u64::from_le_bytes(bytes.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> StoreResult<f64> {
        self.u64().map(f64::from_bits)
    }

    /// The next `n` words as raw little-endian u64s.
    pub fn words(&mut self, n: usize) -> StoreResult<impl ExactSizeIterator<Item = u64> + 'a> {
        let end = self.pos + n * WORD_BYTES;
        let bytes = self
            .buf
            .get(self.pos..end)
            .ok_or_else(|| StoreError::Corrupt(format!("record truncated at byte {}", self.pos)))?;
        self.pos = end;
        Ok(bytes.chunks_exact(WORD_BYTES).map(|c| u64::from_le_bytes(c.try_into().unwrap())))
    }

    pub fn f64s(&mut self, n: usize) -> StoreResult<Vec<f64>> {
        Ok(self.words(n)?.map(f64::from_bits).collect())
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub fn encode_f64s(v: &[f64]) -> Vec<u8> {
    let mut w = RecordWriter::with_words(v.len());
    w.f64s(v);
    w.finish()
}

pub fn decode_f64s(bytes: &[u8]) -> StoreResult<Vec<f64>> {
    if !bytes.len().is_multiple_of(WORD_BYTES) {
        return Err(StoreError::Corrupt(format!("{} bytes is not a whole number of words", bytes.len())));
    }
    RecordReader::new(bytes).f64s(bytes.len() / WORD_BYTES)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn both() -> Vec<(DiskStore, Option<tempfile::TempDir>)> {
        let dir = tempfile::tempdir().unwrap();
        let file = DiskStore::file_backed(dir.path().join("disk.bin")).unwrap();
        vec![(DiskStore::in_memory(), None), (file, Some(dir))]
    }

    #[test]
    fn batch_of_many_reads_is_one_round() {
        for (mut s, _dir) in both() {
            let base = s.alloc_block(100).unwrap();
            let mut b = WriteBatch::new();
            for i in 0..100 {
                b.put(base.add(i), vec![0u8; 16]);
            }
            s.write_batch(b).unwrap();
            s.begin_update().unwrap();
            let addrs: Vec<_> = (0..100).map(|i| base.add(i)).collect();
            s.read_batch(&addrs).unwrap();
            let r = s.end_update().unwrap();
            assert_eq!(r.read_rounds, 1);
            assert_eq!(r.words_read, 200);
        }
    }

    #[test]
    fn empty_batches_are_free() {
        let mut s = DiskStore::in_memory();
        s.begin_update().unwrap();
        s.read_batch(&[]).unwrap();
        s.write_batch(WriteBatch::new()).unwrap();
        assert_eq!(s.end_update().unwrap(), IoReport::default());
    }

    #[test]
    fn freed_addresses_are_never_handed_out_again() {
        for (mut s, _dir) in both() {
            let a = s.alloc().unwrap();
            s.free(a).unwrap();
            let b = s.alloc().unwrap();
            assert_ne!(a, b);
            assert!(matches!(s.read_batch(&[a]), Err(StoreError::Dead(_))));
            assert!(matches!(s.free(a), Err(StoreError::DoubleFree(_))));
        }
    }

    #[test]
    fn duplicate_write_is_rejected() {
        let mut s = DiskStore::in_memory();
        let a = s.alloc().unwrap();
        let mut b = WriteBatch::new();
        b.put(a, vec![1]);
        b.put(a, vec![2]);
        assert!(matches!(s.write_batch(b), Err(StoreError::DuplicateWrite(_))));
    }

    #[test]
    fn windows_do_not_nest() {
        let mut s = DiskStore::in_memory();
        s.begin_update().unwrap();
        assert!(matches!(s.begin_update(), Err(StoreError::WindowOpen)));
        s.end_update().unwrap();
        assert!(matches!(s.end_update(), Err(StoreError::NoWindow)));
    }

    #[test]
    fn capacity_limit() {
        let mut s = DiskStore::in_memory().with_capacity_limit(3);
        s.alloc_block(3).unwrap();
        assert!(matches!(s.alloc(), Err(StoreError::CapacityExhausted(3))));
    }

    #[test]
    fn structured_regions_accept_any_offset() {
        for (mut s, _dir) in both() {
            let r = s.alloc_region();
            let a = DiskAddress::new(r, 12345);
            s.write(a, encode_f64s(&[1.5, -2.0])).unwrap();
            assert_eq!(decode_f64s(&s.inspect(a).unwrap()).unwrap(), vec![1.5, -2.0]);
            s.free(a).unwrap();
            assert!(!s.is_live(a));
            s.write(a, vec![7]).unwrap();
            assert_eq!(s.inspect(a).unwrap(), vec![7]);
        }
    }

    #[test]
    fn bypass_reads_are_tallied_apart_from_updates() {
        let mut s = DiskStore::in_memory();
        let a = s.alloc().unwrap();
        s.write(a, vec![0; 24]).unwrap();
        s.read_bypass(&[a]).unwrap();
        s.read_bypass(&[a, a]).unwrap();
        assert_eq!(s.ledger().query_reads().read_rounds, 2);
        assert_eq!(s.ledger().query_reads().words_read, 9);
        assert_eq!(s.ledger().updates(), IoReport::default());
        assert_eq!(s.ledger().bulk().write_rounds, 1);
    }

    #[test]
    fn ledger_csv_has_one_row_per_update() {
        let mut s = DiskStore::in_memory();
        for _ in 0..3 {
            s.begin_update().unwrap();
            let a = s.alloc().unwrap();
            s.write(a, vec![0; 8]).unwrap();
            s.end_update().unwrap();
        }
        let mut out = Vec::new();
        s.ledger().write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert_eq!(text.lines().nth(2).unwrap(), "1,0,1,0,1");
    }

    #[test]
    fn export_import_preserves_contents() {
        for (mut s, _dir) in both() {
            let a = s.alloc_block(3).unwrap();
            s.write(a.add(1), vec![1, 2, 3]).unwrap();
            let r = s.alloc_region();
            s.write(DiskAddress::new(r, 4), vec![9]).unwrap();
            let t = DiskStore::import(s.export().unwrap()).unwrap();
            assert_eq!(t.inspect(a.add(1)).unwrap(), vec![1, 2, 3]);
            assert_eq!(t.inspect(DiskAddress::new(r, 4)).unwrap(), vec![9]);
            assert_eq!(t.live_addresses(), 4);
            let mut t = t;
            assert_ne!(t.alloc().unwrap(), a.add(2));
        }
    }

    #[test]
    fn address_packing_round_trips() {
        let a = DiskAddress::new(77, 123_456_789);
        assert_eq!((a.region(), a.offset()), (77, 123_456_789));
        assert_eq!(a.add(5).offset(), 123_456_794);
    }
}
