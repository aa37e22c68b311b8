//! A compressed quadtree sketch that stays identical to a fresh build under
//! inserts and deletes, at the price of one read and one write round per update.
//!
//! Points are snapped to a randomly shifted dyadic grid. Level `t` of the tree
//! holds the cells of side `4Δ / 2^t` that contain at least one point, and the
//! edge into a level-`t` node is labelled with bit `L - t` of every integer
//! grid coordinate. Unary chains of length at least `2Λ + 1` keep `Λ` nodes at
//! the top, `Λ - 1` at the bottom, and replace the middle by a single long edge
//! that only records how many nodes it stands for. Those forgotten bits are
//! exactly what an update fetches back from a full-precision vector on disk.
//!
//! Chains are delimited by the root, by leaves, and by nodes with two or more
//! children, so a single stored point yields one root-to-leaf chain.

use std::collections::{BTreeMap, HashMap};
use std::sync::OnceLock;

use rand::Rng;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{invalid, Error, Result};
use crate::quantizer::{check_vector, rerank, squared_distance, to_f64, top_k, Neighbor, PointId, Quantizer};
use crate::rng::rng_for;
use crate::store::{decode_f64s, encode_f64s, DiskAddress, DiskStore, IoLedger, WriteBatch};

/// Deepest tree the integer grid supports.
pub const MAX_DEPTH: u32 = 62;

type Label = SmallVec<[u64; 2]>;
type NodeId = u32;

const NONE: NodeId = NodeId::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QsParams {
    pub epsilon: f64,
    pub delta: f64,
    /// Bound on `‖x‖∞` and on the aspect ratio of the data.
    pub phi: f64,
    pub seed: u64,
    /// Replaces the derived compression threshold when set.
    pub lambda: Option<u32>,
}

impl QsParams {
    pub fn new(epsilon: f64, delta: f64, phi: f64, seed: u64) -> Self {
        QsParams { epsilon, delta, phi, seed, lambda: None }
    }

    pub fn with_lambda(mut self, lambda: u32) -> Self {
        self.lambda = Some(lambda);
        self
    }
}

/// The shifted grid every point is snapped to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridParams {
    pub dim: usize,
    /// `Δ = 2^⌈log₂ Φ⌉`; the outer cell has side `4Δ`.
    pub big_delta: f64,
    pub shifts: Vec<f64>,
    pub lambda: u32,
    pub depth: u32,
    pub phi: f64,
}

impl GridParams {
    pub fn new(dim: usize, params: &QsParams) -> Result<Self> {
        let QsParams { epsilon, delta, phi, seed, lambda } = *params;
        if !(epsilon > 0.0 && epsilon < 1.0) || !(delta > 0.0 && delta < 1.0) {
            return Err(Error::Config(format!("epsilon and delta must lie in (0, 1), got {epsilon} and {delta}")));
        }
        if !(phi >= 1.0 && phi.is_finite()) {
            return Err(Error::Config(format!("phi must be a finite number of at least 1, got {phi}")));
        }
        if dim == 0 {
            return Err(Error::Config("dimension must be positive".into()));
        }
        let log_phi = phi.log2().ceil() as u32;
        let lambda = match lambda {
            Some(l) => l,
            None => {
                let arg = 16.0 * (dim as f64).powf(1.5) * phi.log2().max(1.0) / (epsilon * delta);
                arg.log2().ceil() as u32
            }
        };
        if lambda == 0 {
            return Err(Error::Config("lambda must be at least 1".into()));
        }
        let depth = log_phi + lambda;
        if depth > MAX_DEPTH {
            return Err(Error::Config(format!("tree depth {depth} exceeds {MAX_DEPTH}")));
        }
        let big_delta = 2f64.powi(log_phi as i32);
        let mut rng = rng_for(seed, 0);
        let shifts = (0..dim).map(|_| rng.random_range(-big_delta..=big_delta)).collect();
        Ok(GridParams { dim, big_delta, shifts, lambda, depth, phi })
    }

    /// Side of a level-`t` cell.
    pub fn side(&self, t: u32) -> f64 {
        4.0 * self.big_delta / 2f64.powi(t as i32)
    }

    /// Integer coordinates of the leaf cell holding `x`, clamped to the grid.
    pub fn cell(&self, x: &[f64]) -> Vec<u64> {
        let scale = 2f64.powi(self.depth as i32) / (4.0 * self.big_delta);
        let top = (1u64 << self.depth) - 1;
        x.iter()
            .zip(&self.shifts)
            .map(|(&v, &s)| {
                let u = ((v - s + 2.0 * self.big_delta) * scale).floor();
                if u <= 0.0 {
                    0
                } else {
                    (u as u64).min(top)
                }
            })
            .collect()
    }

    /// Label of the edge into the level-`t` ancestor of `cell`.
    fn label(&self, cell: &[u64], t: u32) -> Label {
        let shift = self.depth - t;
        let mut label: Label = SmallVec::from_elem(0, cell.len().div_ceil(64));
        for (j, &c) in cell.iter().enumerate() {
            label[j / 64] |= ((c >> shift) & 1) << (j % 64);
        }
        label
    }

    /// Number of leading levels on which two cells agree.
    fn common_levels(&self, a: &[u64], b: &[u64]) -> u32 {
        let diff = a.iter().zip(b).map(|(x, y)| x ^ y).fold(0, |acc, v| acc | v);
        if diff == 0 {
            self.depth
        } else {
            self.depth - (64 - diff.leading_zeros())
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    depth: u32,
    parent: NodeId,
    /// Label of the edge from the parent; empty on long edges and at the root.
    label: Label,
    /// Nodes removed from the edge above this one.
    skip: u32,
    children: SmallVec<[NodeId; 2]>,
    point: Option<PointId>,
}

/// Canonical structure of the tree, for comparing two sketches.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeDump {
    pub depth: u32,
    pub label: Option<Vec<u64>>,
    pub skip: u32,
    pub point: Option<PointId>,
    pub children: Vec<TreeDump>,
}

pub struct QuadSketch {
    grid: GridParams,
    params: QsParams,
    store: DiskStore,
    nodes: Vec<Node>,
    free_nodes: Vec<NodeId>,
    root: NodeId,
    /// Leaf and disk record of every stored point.
    points: HashMap<PointId, (NodeId, DiskAddress)>,
    /// Positions recovered from the tree, dropped on every update.
    approx: OnceLock<Vec<(PointId, Vec<f64>)>>,
}

impl QuadSketch {
    pub fn empty(dim: usize, params: QsParams) -> Result<Self> {
        Ok(QuadSketch {
            grid: GridParams::new(dim, &params)?,
            params,
            store: DiskStore::in_memory(),
            nodes: Vec::new(),
            free_nodes: Vec::new(),
            root: NONE,
            points: HashMap::new(),
            approx: OnceLock::new(),
        })
    }

    /// Builds the full quadtree over `data`, compresses every long chain, and
    /// stores each vector at its own address.
    pub fn build(dim: usize, params: QsParams, ids: &[PointId], data: &[f32]) -> Result<Self> {
        let mut qs = Self::empty(dim, params)?;
        if data.len() != ids.len() * dim {
            return Err(invalid(format!("{} values for {} points of dimension {dim}", data.len(), ids.len())));
        }
        let mut rows = Vec::with_capacity(ids.len());
        for (i, x) in data.chunks_exact(dim).enumerate() {
            let x = qs.checked(x)?;
            if qs.points.insert(ids[i], (NONE, DiskAddress::new(0, 0))).is_some() {
                return Err(Error::Duplicate(ids[i]));
            }
            rows.push(x);
        }
        if ids.is_empty() {
            return Ok(qs);
        }
        let cells: Vec<Vec<u64>> = rows.iter().map(|x| qs.grid.cell(x)).collect();
        qs.root = qs.alloc_node(0, NONE, Label::new(), 0);
        let members: Vec<usize> = (0..ids.len()).collect();
        qs.grow(qs.root, &cells, ids, members)?;
        let heads: Vec<NodeId> = qs.live_nodes().filter(|&v| v == qs.root || qs.nodes[v as usize].children.len() >= 2).collect();
        for head in heads {
            for c in qs.nodes[head as usize].children.clone() {
                let chain = qs.chain_from(head, c);
                qs.compress(&chain);
            }
        }
        let mut writes = WriteBatch::new();
        for (&id, x) in ids.iter().zip(&rows) {
            let addr = qs.store.alloc()?;
            writes.put(addr, encode_f64s(x));
            qs.points.get_mut(&id).unwrap().1 = addr;
        }
        qs.store.write_batch(writes)?;
        Ok(qs)
    }

    fn grow(&mut self, v: NodeId, cells: &[Vec<u64>], ids: &[PointId], members: Vec<usize>) -> Result<()> {
        let t = self.nodes[v as usize].depth;
        if t == self.grid.depth {
            if members.len() > 1 {
                return Err(invalid(format!("points {} and {} share a leaf cell", ids[members[0]], ids[members[1]])));
            }
            let id = ids[members[0]];
            self.nodes[v as usize].point = Some(id);
            self.points.get_mut(&id).unwrap().0 = v;
            return Ok(());
        }
        let mut groups: BTreeMap<Label, Vec<usize>> = BTreeMap::new();
        for i in members {
            groups.entry(self.grid.label(&cells[i], t + 1)).or_default().push(i);
        }
        for (label, group) in groups {
            let c = self.alloc_node(t + 1, v, label, 0);
            self.nodes[v as usize].children.push(c);
            self.grow(c, cells, ids, group)?;
        }
        Ok(())
    }

    pub fn grid(&self) -> &GridParams {
        &self.grid
    }

    pub fn params(&self) -> &QsParams {
        &self.params
    }

    pub fn store(&self) -> &DiskStore {
        &self.store
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn contains(&self, id: PointId) -> bool {
        self.points.contains_key(&id)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len() - self.free_nodes.len()
    }

    /// Bits needed to store the tree: `d` per labelled edge, enough for the
    /// depth on a long edge, and an id per leaf.
    pub fn stored_bits(&self) -> u64 {
        let depth_bits = 64 - u64::from(self.grid.depth).leading_zeros() as u64;
        let id_bits = 64 - (self.len() as u64).leading_zeros() as u64;
        let mut bits = 0;
        for v in self.live_nodes() {
            let n = &self.nodes[v as usize];
            if v == self.root {
                continue;
            }
            bits += if n.skip > 0 { depth_bits } else { self.grid.dim as u64 };
            if n.point.is_some() {
                bits += id_bits;
            }
        }
        bits
    }

    fn checked(&self, x: &[f32]) -> Result<Vec<f64>> {
        check_vector(x, self.grid.dim)?;
        let x = to_f64(x);
        if x.iter().any(|v| v.abs() > self.grid.phi) {
            return Err(invalid(format!("vector leaves the box of half-width {}", self.grid.phi)));
        }
        Ok(x)
    }

    fn alloc_node(&mut self, depth: u32, parent: NodeId, label: Label, skip: u32) -> NodeId {
        let node = Node { depth, parent, label, skip, children: SmallVec::new(), point: None };
        match self.free_nodes.pop() {
            Some(v) => {
                self.nodes[v as usize] = node;
                v
            }
            None => {
                self.nodes.push(node);
                (self.nodes.len() - 1) as NodeId
            }
        }
    }

    fn release(&mut self, v: NodeId) {
        let n = &mut self.nodes[v as usize];
        n.parent = NONE;
        n.children.clear();
        n.point = None;
        self.free_nodes.push(v);
    }

    fn live_nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        let mut stack = if self.root == NONE { vec![] } else { vec![self.root] };
        std::iter::from_fn(move || {
            let v = stack.pop()?;
            stack.extend(self.nodes[v as usize].children.iter().rev());
            Some(v)
        })
    }

    /// The chain that starts at `head` and leaves it through `child`, down to
    /// the next leaf or branching node.
    fn chain_from(&self, head: NodeId, child: NodeId) -> Vec<NodeId> {
        let mut chain = vec![head, child];
        let mut v = child;
        while self.nodes[v as usize].children.len() == 1 {
            v = self.nodes[v as usize].children[0];
            chain.push(v);
        }
        chain
    }

    /// Middle-out compression of an explicit chain `v_0 … v_k`: when
    /// `k ≥ 2Λ + 1`, drops `v_{Λ+1} … v_{k-Λ}` and joins `v_Λ` to `v_{k-Λ+1}`.
    fn compress(&mut self, chain: &[NodeId]) {
        let lambda = self.grid.lambda as usize;
        let k = chain.len() - 1;
        if k < 2 * lambda + 1 || chain[1..].iter().any(|&v| self.nodes[v as usize].skip > 0) {
            return;
        }
        let (top, bottom) = (chain[lambda], chain[k - lambda + 1]);
        for &v in &chain[lambda + 1..=k - lambda] {
            self.release(v);
        }
        self.nodes[top as usize].children = SmallVec::from_slice(&[bottom]);
        let b = &mut self.nodes[bottom as usize];
        b.parent = top;
        b.label = Label::new();
        b.skip = (k - 2 * lambda) as u32;
    }

    /// Nodes from the root down to `leaf`.
    fn path_to(&self, leaf: NodeId) -> Vec<NodeId> {
        let mut path = vec![leaf];
        let mut v = leaf;
        while self.nodes[v as usize].parent != NONE {
            v = self.nodes[v as usize].parent;
            path.push(v);
        }
        path.reverse();
        path
    }

    /// Restores every node removed from the path to `leaf`, whose leaf cell is `cell`.
    fn expand_path(&mut self, leaf: NodeId, cell: &[u64]) {
        for v in self.path_to(leaf) {
            let skip = self.nodes[v as usize].skip;
            if skip == 0 {
                continue;
            }
            let mut above = self.nodes[v as usize].parent;
            let start = self.nodes[above as usize].depth;
            for t in start + 1..start + 1 + skip {
                let n = self.alloc_node(t, above, self.grid.label(cell, t), 0);
                self.nodes[above as usize].children = SmallVec::from_slice(&[n]);
                above = n;
            }
            self.nodes[above as usize].children = SmallVec::from_slice(&[v]);
            let depth = self.nodes[v as usize].depth;
            let label = self.grid.label(cell, depth);
            let n = &mut self.nodes[v as usize];
            n.parent = above;
            n.label = label;
            n.skip = 0;
        }
    }

    /// Compresses every uncompressed chain on the explicit path to `leaf`.
    fn compress_path(&mut self, leaf: NodeId) {
        let path = self.path_to(leaf);
        let mut head = 0;
        for i in 1..path.len() {
            if self.nodes[path[i] as usize].children.len() != 1 {
                self.compress(&path[head..=i]);
                head = i;
            }
        }
    }

    /// Leaf reached by following `cell` where possible, assuming compressed
    /// edges agree with it, and otherwise taking the lowest-labelled child.
    fn descend(&self, cell: &[u64]) -> NodeId {
        let mut v = self.root;
        loop {
            let n = &self.nodes[v as usize];
            if n.children.is_empty() {
                return v;
            }
            let want = self.grid.label(cell, n.depth + 1);
            v = n
                .children
                .iter()
                .copied()
                .find(|&c| self.nodes[c as usize].skip == 0 && self.nodes[c as usize].label == want)
                .unwrap_or(n.children[0]);
        }
    }

    fn insert_child(&mut self, parent: NodeId, child: NodeId) {
        let label = self.nodes[child as usize].label.clone();
        let pos = self.nodes[parent as usize]
            .children
            .iter()
            .position(|&c| self.nodes[c as usize].label > label)
            .unwrap_or(self.nodes[parent as usize].children.len());
        self.nodes[parent as usize].children.insert(pos, child);
    }

    /// Hangs an explicit chain for `cell` below `from`, returning the new leaf.
    fn hang(&mut self, from: NodeId, cell: &[u64], id: PointId) -> NodeId {
        let mut above = from;
        let start = self.nodes[from as usize].depth;
        for t in start + 1..=self.grid.depth {
            let n = self.alloc_node(t, above, self.grid.label(cell, t), 0);
            if above == from {
                self.insert_child(from, n);
            } else {
                self.nodes[above as usize].children.push(n);
            }
            above = n;
        }
        self.nodes[above as usize].point = Some(id);
        above
    }

    fn read_point(&mut self, addr: DiskAddress) -> Result<Vec<f64>> {
        let blob = self.store.read_batch(&[addr])?;
        Ok(decode_f64s(&blob[0])?)
    }

    /// Inserts `x` with one read round, for the point whose leaf the
    /// traversal ends at, and one write round for `x` itself.
    pub fn insert(&mut self, id: PointId, x: &[f32]) -> Result<()> {
        let x = self.checked(x)?;
        if self.points.contains_key(&id) {
            return Err(Error::Duplicate(id));
        }
        let cell = self.grid.cell(&x);
        self.store.begin_update()?;
        let res = self.insert_io(id, &x, &cell);
        let (addr, neighbor) = match res {
            Ok(v) => v,
            Err(e) => {
                self.store.abort_update();
                return Err(e);
            }
        };
        self.store.end_update()?;
        self.approx = OnceLock::new();

        let leaf = match neighbor {
            None => {
                self.root = self.alloc_node(0, NONE, Label::new(), 0);
                let leaf = self.hang(self.root, &cell, id);
                self.compress_path(leaf);
                leaf
            }
            Some((other, other_cell, common)) => {
                self.expand_path(other, &other_cell);
                let branch = self.path_to(other)[common as usize];
                let leaf = self.hang(branch, &cell, id);
                self.compress_path(other);
                self.compress_path(leaf);
                leaf
            }
        };
        self.points.insert(id, (leaf, addr));
        Ok(())
    }

    /// The I/O half of an insert: returns the new address and, unless the tree
    /// was empty, the leaf reached, its cell, and the depth `x` branches off at.
    #[allow(clippy::type_complexity)]
    fn insert_io(&mut self, id: PointId, x: &[f64], cell: &[u64]) -> Result<(DiskAddress, Option<(NodeId, Vec<u64>, u32)>)> {
        let mut neighbor = None;
        if self.root != NONE {
            let other = self.descend(cell);
            let owner = self.nodes[other as usize].point.unwrap();
            let other_x = self.read_point(self.points[&owner].1)?;
            let other_cell = self.grid.cell(&other_x);
            let common = self.grid.common_levels(cell, &other_cell);
            if common == self.grid.depth {
                return Err(invalid(format!("point {id} shares a leaf cell with point {owner}")));
            }
            neighbor = Some((other, other_cell, common));
        }
        let addr = self.store.alloc()?;
        let mut writes = WriteBatch::new();
        writes.put(addr, encode_f64s(x));
        self.store.write_batch(writes)?;
        Ok((addr, neighbor))
    }

    /// Deletes `id` with one read round, for a point in a sibling branch, and
    /// one write round that frees its record.
    pub fn delete(&mut self, id: PointId) -> Result<()> {
        let &(leaf, addr) = self.points.get(&id).ok_or(Error::NotFound(id))?;
        let path = self.path_to(leaf);
        // Deepest ancestor with another branch, and the branch that goes away.
        let split = (0..path.len() - 1).rev().find(|&i| self.nodes[path[i] as usize].children.len() >= 2);

        self.store.begin_update()?;
        let res = (|| -> Result<Option<(NodeId, Vec<u64>)>> {
            let cousin = match split {
                Some(i) => {
                    let sibling = *self.nodes[path[i] as usize].children.iter().find(|&&c| c != path[i + 1]).unwrap();
                    let mut v = sibling;
                    while let Some(&c) = self.nodes[v as usize].children.first() {
                        v = c;
                    }
                    let owner = self.nodes[v as usize].point.unwrap();
                    let x = self.read_point(self.points[&owner].1)?;
                    Some((v, self.grid.cell(&x)))
                }
                None => None,
            };
            let mut writes = WriteBatch::new();
            writes.free(addr);
            self.store.write_batch(writes)?;
            Ok(cousin)
        })();
        let cousin = match res {
            Ok(c) => c,
            Err(e) => {
                self.store.abort_update();
                return Err(e);
            }
        };
        self.store.end_update()?;
        self.approx = OnceLock::new();

        self.points.remove(&id);
        match (split, cousin) {
            (Some(i), Some((other, other_cell))) => {
                self.expand_path(other, &other_cell);
                let parent = path[i];
                self.nodes[parent as usize].children.retain(|c| *c != path[i + 1]);
                for &v in &path[i + 1..] {
                    self.release(v);
                }
                self.compress_path(other);
            }
            _ => {
                for &v in &path {
                    self.release(v);
                }
                self.root = NONE;
            }
        }
        Ok(())
    }

    /// The leaf reached by following the grid bits of `q` and, once they
    /// leave the tree, the lowest-labelled branch. This is the traversal
    /// updates use; [`QuadSketch::query`] is far more accurate out of sample.
    pub fn route(&self, q: &[f32]) -> Result<PointId> {
        if self.is_empty() {
            return Err(invalid("query against an empty sketch"));
        }
        check_vector(q, self.grid.dim)?;
        let leaf = self.descend(&self.grid.cell(&to_f64(q)));
        Ok(self.nodes[leaf as usize].point.unwrap())
    }

    /// The stored point whose position, as recovered from the sketch, is
    /// closest to `q`.
    pub fn query(&self, q: &[f32]) -> Result<PointId> {
        Ok(self.knn_query(q, 1)?[0].id)
    }

    /// Approximate position of every stored point: the center of the deepest
    /// cell on its path whose location the sketch still knows exactly.
    pub fn reconstruct(&self) -> Vec<(PointId, Vec<f64>)> {
        let mut out = Vec::with_capacity(self.len());
        if self.root == NONE {
            return out;
        }
        let d = self.grid.dim;
        // (node, known prefix of the cell coordinates, levels known, still exact)
        let mut stack = vec![(self.root, vec![0u64; d], 0u32, true)];
        while let Some((v, prefix, known, exact)) = stack.pop() {
            let n = &self.nodes[v as usize];
            if let Some(id) = n.point {
                let side = self.grid.side(known);
                let pos = prefix
                    .iter()
                    .zip(&self.grid.shifts)
                    .map(|(&p, &s)| (p as f64 + 0.5) * side - 2.0 * self.grid.big_delta + s)
                    .collect();
                out.push((id, pos));
                continue;
            }
            for &c in &n.children {
                let child = &self.nodes[c as usize];
                if exact && child.skip == 0 {
                    let next = prefix
                        .iter()
                        .enumerate()
                        .map(|(j, &p)| (p << 1) | ((child.label[j / 64] >> (j % 64)) & 1))
                        .collect();
                    stack.push((c, next, known + 1, true));
                } else {
                    stack.push((c, prefix.clone(), known, false));
                }
            }
        }
        out
    }

    pub fn knn_query(&self, q: &[f32], k: usize) -> Result<Vec<Neighbor>> {
        if self.is_empty() {
            return Err(invalid("query against an empty sketch"));
        }
        check_vector(q, self.grid.dim)?;
        let q = to_f64(q);
        let approx = self.approx.get_or_init(|| self.reconstruct());
        Ok(top_k(approx.iter().map(|(id, x)| (*id, squared_distance(&q, x))), k))
    }

    pub fn knn_rerank(&self, q: &[f32], k: usize, k_prime: usize) -> Result<Vec<Neighbor>> {
        let candidates = self.knn_query(q, k_prime.max(k))?;
        rerank(&self.store, &to_f64(q), &candidates, |id| self.points[&id].1, k)
    }

    pub fn dump(&self) -> Option<TreeDump> {
        fn walk(qs: &QuadSketch, v: NodeId) -> TreeDump {
            let n = &qs.nodes[v as usize];
            TreeDump {
                depth: n.depth,
                label: (v != qs.root && n.skip == 0).then(|| n.label.to_vec()),
                skip: n.skip,
                point: n.point,
                children: n.children.iter().map(|&c| walk(qs, c)).collect(),
            }
        }
        (self.root != NONE).then(|| walk(self, self.root))
    }

    /// Checks the structural invariants, including that every chain is
    /// compressed exactly when it is long enough.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(crate::error::corrupt(msg));
        if self.root == NONE {
            return if self.points.is_empty() { Ok(()) } else { bad("points without a tree".into()) };
        }
        let lambda = self.grid.lambda;
        let mut leaves = 0;
        for v in self.live_nodes() {
            let n = &self.nodes[v as usize];
            for pair in n.children.windows(2) {
                if self.nodes[pair[0] as usize].label >= self.nodes[pair[1] as usize].label {
                    return bad(format!("children of node {v} out of order"));
                }
            }
            for &c in &n.children {
                let child = &self.nodes[c as usize];
                if child.parent != v || child.depth != n.depth + 1 + child.skip {
                    return bad(format!("edge {v} -> {c} is inconsistent"));
                }
                if child.skip > 0 && n.children.len() != 1 {
                    return bad(format!("long edge below branching node {v}"));
                }
            }
            match n.point {
                Some(id) => {
                    leaves += 1;
                    if n.depth != self.grid.depth || !n.children.is_empty() || self.points.get(&id).map(|p| p.0) != Some(v) {
                        return bad(format!("leaf {v} for point {id} is misplaced"));
                    }
                }
                None if n.children.is_empty() => return bad(format!("node {v} has an empty subtree")),
                None => {}
            }
            if v == self.root || n.children.len() >= 2 {
                for &c in &n.children {
                    let chain = self.chain_from(v, c);
                    let long: Vec<u32> = chain[1..].iter().map(|&u| self.nodes[u as usize].skip).filter(|&s| s > 0).collect();
                    let span = self.nodes[*chain.last().unwrap() as usize].depth - n.depth;
                    let ok = match long.as_slice() {
                        [] => span < 2 * lambda + 1,
                        [s] => span > 2 * lambda && *s == span - 2 * lambda && chain.len() == 2 * lambda as usize + 1,
                        _ => false,
                    };
                    if !ok {
                        return bad(format!("chain below node {v} of span {span} is compressed wrongly"));
                    }
                }
            }
        }
        if leaves != self.points.len() {
            return bad(format!("{leaves} leaves for {} points", self.points.len()));
        }
        Ok(())
    }
}

impl Quantizer for QuadSketch {
    fn name(&self) -> &'static str {
        "quadsketch"
    }

    fn dim(&self) -> usize {
        self.grid.dim
    }

    fn len(&self) -> usize {
        self.points.len()
    }

    fn insert(&mut self, id: PointId, x: &[f32]) -> Result<()> {
        QuadSketch::insert(self, id, x)
    }

    /// The vector is not needed: the leaf is found through the id.
    fn delete(&mut self, id: PointId, _x: &[f32]) -> Result<()> {
        QuadSketch::delete(self, id)
    }

    fn knn_query(&self, q: &[f32], k: usize) -> Result<Vec<Neighbor>> {
        QuadSketch::knn_query(self, q, k)
    }

    fn knn_rerank(&self, q: &[f32], k: usize, k_prime: usize) -> Result<Vec<Neighbor>> {
        QuadSketch::knn_rerank(self, q, k, k_prime)
    }

    fn ledger(&self) -> &IoLedger {
        self.store.ledger()
    }
}
