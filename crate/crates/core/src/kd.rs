//! Randomly rotated kd-trees whose splits are maintained by pairs of heaps.
//!
//! A tree of depth `L` splits the node at level `l` on coordinate
//! `splits[l]` of the rotated space. Each non-root node keeps its members in
//! a heap keyed on its parent's split coordinate: a max-heap for a left child
//! and a min-heap for a right child. The two extrema therefore bracket the
//! median, and a median split that changes by one point can be repaired by
//! moving a single extremum across.
//!
//! [`KdTree::plan`] works out every heap operation an update causes using
//! memory only. The caller performs the I/O and then hands the results back
//! through [`KdTree::apply`].

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::heap::{key_cmp, HeapKey, HeapOp, HeapPQ, HeapState, Polarity};
use crate::store::{DiskAddress, DiskStore, WriteBatch};

/// A Haar-random orthogonal matrix, row-major.
pub fn random_rotation<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    let g = DMatrix::<f64>::from_fn(dim, dim, |_, _| rng.sample(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..dim {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let mut out = Vec::with_capacity(dim * dim);
    for i in 0..dim {
        for j in 0..dim {
            out.push(q[(i, j)]);
        }
    }
    out
}

pub fn rotate(rotation: &[f64], x: &[f64]) -> Vec<f64> {
    let d = x.len();
    (0..d).map(|i| rotation[i * d..(i + 1) * d].iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

/// Sorts `(value, id)` pairs and returns the size of the left half.
///
/// The left half holds the `floor(n/2)` smallest pairs under the (value, id)
/// order and the right half holds the rest.
pub fn median_split(items: &mut [(f64, u64)]) -> usize {
    items.sort_by(|a, b| key_cmp(a.0, a.1, b.0, b.1));
    items.len() / 2
}

/// Neumaier-compensated running sum of a vector.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct CompensatedSum {
    sum: Vec<f64>,
    comp: Vec<f64>,
}

impl CompensatedSum {
    pub fn zeros(dim: usize) -> Self {
        CompensatedSum { sum: vec![0.0; dim], comp: vec![0.0; dim] }
    }

    fn step(s: &mut f64, c: &mut f64, x: f64) {
        let t = *s + x;
        if s.abs() >= x.abs() {
            *c += (*s - t) + x;
        } else {
            *c += (x - t) + *s;
        }
        *s = t;
    }

    pub fn add(&mut self, x: &[f64]) {
        for ((s, c), &v) in self.sum.iter_mut().zip(&mut self.comp).zip(x) {
            Self::step(s, c, v);
        }
    }

    pub fn sub(&mut self, x: &[f64]) {
        for ((s, c), &v) in self.sum.iter_mut().zip(&mut self.comp).zip(x) {
            Self::step(s, c, -v);
        }
    }

    pub fn value(&self) -> Vec<f64> {
        self.sum.iter().zip(&self.comp).map(|(s, c)| s + c).collect()
    }
}

/// A point travelling through the tree during planning.
#[derive(Clone, Debug)]
pub struct Entry {
    pub id: u64,
    pub owner: DiskAddress,
    /// Rotated coordinates. Only needed for points being added.
    pub rotated: Vec<f64>,
    /// Leaf before the update. Only needed for points being removed.
    pub leaf: u32,
}

/// What happened at one internal node during an update.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeChange {
    pub node: usize,
    pub added: Option<u64>,
    pub removed: Option<u64>,
    /// A point that crossed from one child to the other, and whether it went right.
    pub crossed: Option<(u64, bool)>,
}

#[derive(Clone, Debug, Default)]
pub struct BlockPlan {
    pub heap_ops: Vec<(usize, HeapOp)>,
    pub counts: Vec<(usize, u64)>,
    pub leaf_in: Vec<(u32, u64)>,
    pub leaf_out: Vec<(u32, u64)>,
    pub changes: Vec<NodeChange>,
}

impl BlockPlan {
    /// Number of heaps the update touches.
    pub fn heaps_changed(&self) -> usize {
        self.heap_ops.len()
    }

    /// Points whose leaf changes without being inserted or deleted.
    pub fn moved(&self) -> impl Iterator<Item = u64> + '_ {
        self.leaf_out.iter().map(|&(_, id)| id).filter(|id| self.leaf_in.iter().any(|&(_, j)| j == *id))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KdTree {
    depth: usize,
    dim: usize,
    rotation: Vec<f64>,
    splits: Vec<usize>,
    counts: Vec<u64>,
    heaps: Vec<Option<HeapPQ>>,
    sums: Vec<CompensatedSum>,
    means: Vec<f64>,
}

fn is_right(leaf: u32, level: usize, depth: usize) -> bool {
    (leaf >> (depth - 1 - level)) & 1 == 1
}

impl KdTree {
    /// Draws a rotation and `depth` distinct split coordinates for a block of width `dim`.
    pub fn sample_geometry<R: Rng + ?Sized>(dim: usize, depth: usize, rng: &mut R) -> Result<(Vec<f64>, Vec<usize>)> {
        if depth > dim {
            return Err(invalid(format!("depth {depth} needs that many distinct coordinates out of {dim}")));
        }
        if depth > 31 {
            return Err(invalid("depth above 31 is not supported"));
        }
        let rotation = random_rotation(dim, rng);
        let splits = rand::seq::index::sample(rng, dim, depth).into_vec();
        Ok((rotation, splits))
    }

    /// Builds the tree over `points` = (id, owner, rotated, original) and returns
    /// the leaf of each point in input order.
    ///
    /// `slot_base` is the first locator slot this tree may use in owner blocks;
    /// level `l` heaps use slot `slot_base + l - 1`.
    pub fn build(
        store: &mut DiskStore,
        rotation: Vec<f64>,
        splits: Vec<usize>,
        slot_base: u64,
        points: &[(u64, DiskAddress, &[f64], &[f64])],
        writes: &mut WriteBatch,
    ) -> Result<(KdTree, Vec<u32>)> {
        let depth = splits.len();
        let dim = (rotation.len() as f64).sqrt() as usize;
        let n_nodes = (1usize << (depth + 1)) - 1;
        let n_leaves = 1usize << depth;
        let mut tree = KdTree {
            depth,
            dim,
            rotation,
            splits,
            counts: vec![0; n_nodes],
            heaps: (0..n_nodes).map(|_| None).collect(),
            sums: vec![CompensatedSum::zeros(dim); n_leaves],
            means: vec![0.0; n_leaves * dim],
        };
        let mut codes = vec![0u32; points.len()];
        // Each frame: node, level, member indices into `points`.
        let mut stack = vec![(0usize, 0usize, (0..points.len()).collect::<Vec<_>>())];
        while let Some((v, level, members)) = stack.pop() {
            tree.counts[v] = members.len() as u64;
            if level == depth {
                let leaf = v - (n_leaves - 1);
                for &i in &members {
                    codes[i] = leaf as u32;
                    tree.sums[leaf].add(points[i].3);
                }
                continue;
            }
            let c = tree.splits[level];
            let mut keyed: Vec<(f64, u64, usize)> = members.iter().map(|&i| (points[i].2[c], points[i].0, i)).collect();
            keyed.sort_by(|a, b| key_cmp(a.0, a.1, b.0, b.1));
            let half = keyed.len() / 2;
            let slot = slot_base + level as u64;
            for (child, pol, part) in [(2 * v + 1, Polarity::Max, &keyed[..half]), (2 * v + 2, Polarity::Min, &keyed[half..])] {
                let items = part
                    .iter()
                    .map(|&(val, id, i)| HeapKey::new(val, id, points[i].1, points[i].2))
                    .collect();
                tree.heaps[child] = Some(HeapPQ::build_into(store, pol, slot, dim, items, writes)?);
                stack.push((child, level + 1, part.iter().map(|t| t.2).collect()));
            }
        }
        for leaf in 0..n_leaves {
            tree.refresh_mean(leaf);
        }
        Ok((tree, codes))
    }

    fn refresh_mean(&mut self, leaf: usize) {
        let n = self.counts[leaf + (1 << self.depth) - 1];
        let out = &mut self.means[leaf * self.dim..(leaf + 1) * self.dim];
        if n == 0 {
            out.fill(0.0);
        } else {
            for (o, s) in out.iter_mut().zip(self.sums[leaf].value()) {
                *o = s / n as f64;
            }
        }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn splits(&self) -> &[usize] {
        &self.splits
    }

    pub fn rotation(&self) -> &[f64] {
        &self.rotation
    }

    pub fn rotate(&self, x: &[f64]) -> Vec<f64> {
        rotate(&self.rotation, x)
    }

    pub fn len(&self) -> u64 {
        self.counts[0]
    }

    pub fn is_empty(&self) -> bool {
        self.counts[0] == 0
    }

    pub fn leaves(&self) -> usize {
        1 << self.depth
    }

    pub fn leaf_count(&self, leaf: usize) -> u64 {
        self.counts[leaf + (1 << self.depth) - 1]
    }

    pub fn node_count(&self, node: usize) -> u64 {
        self.counts[node]
    }

    /// Leaf means, `leaves × dim`, in original (unrotated) coordinates.
    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn leaf_sum(&self, leaf: usize) -> Vec<f64> {
        self.sums[leaf].value()
    }

    pub fn heap(&self, node: usize) -> Option<&HeapPQ> {
        self.heaps[node].as_ref()
    }

    /// Routes a rotated point by the current split boundaries.
    ///
    /// A stored point, given with its id, lands in its own leaf. Points not in
    /// the tree should pass `u64::MAX`.
    pub fn route(&self, rotated: &[f64], id: u64) -> u32 {
        let mut v = 0usize;
        for level in 0..self.depth {
            let c = self.splits[level];
            let left = self.heaps[2 * v + 1].as_ref().and_then(|h| h.peek());
            let go_left = match left {
                Some(lm) => key_cmp(rotated[c], id, lm.value, lm.id).is_le(),
                None => false,
            };
            v = if go_left { 2 * v + 1 } else { 2 * v + 2 };
        }
        (v - ((1 << self.depth) - 1)) as u32
    }

    fn heap_key(&self, level: usize, e: &Entry) -> HeapKey {
        HeapKey::new(e.rotated[self.splits[level]], e.id, e.owner, &e.rotated)
    }

    fn entry_from(key: &HeapKey, leaf_of: &dyn Fn(u64) -> u32) -> Entry {
        Entry { id: key.id, owner: key.owner, rotated: key.payload.to_vec(), leaf: leaf_of(key.id) }
    }

    /// Works out the effect of adding `add` and/or removing `remove`.
    ///
    /// `leaf_of` reports the current leaf of any stored point; it is consulted
    /// for extrema that get pushed across a split.
    pub fn plan(&self, add: Option<Entry>, remove: Option<Entry>, leaf_of: &dyn Fn(u64) -> u32) -> BlockPlan {
        let mut plan = BlockPlan::default();
        let first_leaf = (1usize << self.depth) - 1;
        let mut stack = vec![(0usize, 0usize, add, remove)];
        while let Some((v, level, a, r)) = stack.pop() {
            if a.is_none() && r.is_none() {
                continue;
            }
            let n_new = self.counts[v] + a.is_some() as u64 - r.is_some() as u64;
            plan.counts.push((v, n_new));
            if level == self.depth {
                let leaf = (v - first_leaf) as u32;
                if let Some(a) = &a {
                    plan.leaf_in.push((leaf, a.id));
                }
                if let Some(r) = &r {
                    plan.leaf_out.push((leaf, r.id));
                }
                continue;
            }
            let c = self.splits[level];
            let (li, ri) = (2 * v + 1, 2 * v + 2);
            let lheap = self.heaps[li].as_ref().unwrap();
            let rheap = self.heaps[ri].as_ref().unwrap();
            let (lm, rm) = (lheap.peek(), rheap.peek());
            let r_right = r.as_ref().map(|r| is_right(r.leaf, level, self.depth));
            let a_left = a.as_ref().map(|a| {
                let av = a.rotated[c];
                if r_right == Some(false) {
                    !rm.is_some_and(|m| key_cmp(av, a.id, m.value, m.id).is_gt())
                } else {
                    lm.is_some_and(|m| key_cmp(av, a.id, m.value, m.id).is_lt())
                }
            });

            let (mut l_add, mut l_rem, mut r_add, mut r_rem) = (None, None, None, None);
            match r_right {
                Some(false) => l_rem = r.clone(),
                Some(true) => r_rem = r.clone(),
                None => {}
            }
            match a_left {
                Some(true) => l_add = a.clone(),
                Some(false) => r_add = a.clone(),
                None => {}
            }
            let lt = lheap.len() + l_add.is_some() as u64 - l_rem.is_some() as u64;
            let target = n_new / 2;
            let mut crossed = None;
            if lt > target {
                let m = Self::entry_from(lm.expect("left side cannot be empty"), leaf_of);
                debug_assert!(l_rem.is_none() && r_add.is_none());
                crossed = Some((m.id, true));
                l_rem = Some(m.clone());
                r_add = Some(m);
            } else if lt < target {
                debug_assert!(r_rem.is_none());
                let a_wins = match (&r_add, rm) {
                    (Some(a), Some(m)) => key_cmp(a.rotated[c], a.id, m.value, m.id).is_lt(),
                    (Some(_), None) => true,
                    (None, _) => false,
                };
                if a_wins {
                    l_add = r_add.take();
                } else {
                    let m = Self::entry_from(rm.expect("right side cannot be empty"), leaf_of);
                    debug_assert!(l_add.is_none());
                    crossed = Some((m.id, false));
                    r_rem = Some(m.clone());
                    l_add = Some(m);
                }
            }
            plan.changes.push(NodeChange {
                node: v,
                added: a.as_ref().map(|e| e.id),
                removed: r.as_ref().map(|e| e.id),
                crossed,
            });
            for (child, add, rem) in [(li, &l_add, &l_rem), (ri, &r_add, &r_rem)] {
                let op = match (add, rem) {
                    (Some(x), None) => HeapOp::Insert(self.heap_key(level, x)),
                    (None, Some(y)) => HeapOp::Delete { id: y.id, owner: y.owner },
                    (Some(x), Some(y)) => HeapOp::Replace { id: y.id, owner: y.owner, key: self.heap_key(level, x) },
                    (None, None) => continue,
                };
                plan.heap_ops.push((child, op));
            }
            stack.push((ri, level + 1, r_add, r_rem));
            stack.push((li, level + 1, l_add, l_rem));
        }
        plan
    }

    /// Heaps referenced by `plan`, in the order of its operations.
    pub fn plan_tasks<'a>(&'a self, plan: &'a BlockPlan) -> impl Iterator<Item = (&'a HeapPQ, &'a HeapOp)> + 'a {
        plan.heap_ops.iter().map(|(node, op)| (self.heaps[*node].as_ref().unwrap(), op))
    }

    /// Commits a plan once its heap operations have run.
    ///
    /// `states` are the resulting heap states in plan order and `original`
    /// returns the unrotated subvector of any point entering or leaving a leaf.
    pub fn apply(&mut self, plan: &BlockPlan, states: &[HeapState], original: &dyn Fn(u64) -> Vec<f64>) {
        for ((node, _), state) in plan.heap_ops.iter().zip(states) {
            self.heaps[*node].as_mut().unwrap().set_state(state.clone());
        }
        for &(node, n) in &plan.counts {
            self.counts[node] = n;
        }
        let mut touched = Vec::new();
        for &(leaf, id) in &plan.leaf_out {
            self.sums[leaf as usize].sub(&original(id));
            touched.push(leaf as usize);
        }
        for &(leaf, id) in &plan.leaf_in {
            self.sums[leaf as usize].add(&original(id));
            touched.push(leaf as usize);
        }
        for leaf in touched {
            self.refresh_mean(leaf);
        }
    }

    /// Checks node counts, heap contents and split order against a full scan.
    pub fn validate(&self, store: &DiskStore) -> Result<()> {
        for v in 0..self.counts.len() {
            if let Some(h) = &self.heaps[v] {
                h.validate(store)?;
                if h.len() != self.counts[v] {
                    return Err(invalid(format!("node {v}: heap holds {} but count is {}", h.len(), self.counts[v])));
                }
            }
            if v < (1 << self.depth) - 1 {
                let (l, r) = (self.counts[2 * v + 1], self.counts[2 * v + 2]);
                if l + r != self.counts[v] || l != self.counts[v] / 2 {
                    return Err(invalid(format!("node {v}: split {l}/{r} of {}", self.counts[v])));
                }
                let lm = self.heaps[2 * v + 1].as_ref().and_then(|h| h.peek());
                let rm = self.heaps[2 * v + 2].as_ref().and_then(|h| h.peek());
                if let (Some(a), Some(b)) = (lm, rm) {
                    if a.cmp_key(b).is_ge() {
                        return Err(invalid(format!("node {v}: left max is not below right min")));
                    }
                }
            }
        }
        Ok(())
    }
}
