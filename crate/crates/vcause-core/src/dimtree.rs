//! Dynamic indexed Merkle tree.
//!
//! Leaves are appended in non-decreasing key order. The tree is kept as a
//! stack of perfect subtrees whose heights strictly decrease from left to
//! right, so an insert merges at most `log n` times and `n` inserts perform
//! exactly `n - popcount(n)` merges. [`DimTree::finalize`] folds the stack from
//! right to left into a single root; the resulting shape splits every range of
//! `n > 1` leaves at the largest power of two below `n`.
//!
//! Every internal node carries the minimum and maximum leaf key beneath it.
//! Its hash also commits the inner bounds and heights of its children, so that
//! every index field of a sibling on a path is authenticated by the parent:
//! `H(left || right || min:16 || max:16 || left.max:16 || right.min:16 ||
//! left.height:1 || right.height:1)`.
//! Leaves hash as `H(key:16 || payload:32)`. Keys are 128-bit big-endian.
//!
//! Heights count a leaf as 1.

use std::cell::Cell;
use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashcore::{hash_parts, Digest};
use crate::wire::{Reader, Writer};

pub type Key = u128;

const NIL: u32 = u32::MAX;
const PROOF_VERSION: u8 = 1;

thread_local! {
    static NODE_HASHES: Cell<u64> = const { Cell::new(0) };
    static LEAF_HASHES: Cell<u64> = const { Cell::new(0) };
}

/// Per-thread counts of (internal node hashes, leaf hashes) computed so far,
/// by trees and by verifiers alike.
pub fn hash_counters() -> (u64, u64) {
    (NODE_HASHES.with(|c| c.get()), LEAF_HASHES.with(|c| c.get()))
}

/// Summary of one child as seen by its parent's hash.
#[derive(Clone, Copy, Debug)]
pub struct Child<'a> {
    pub hash: &'a Digest,
    pub min: Key,
    pub max: Key,
    pub height: u8,
}

pub fn node_hash(l: Child<'_>, r: Child<'_>) -> Digest {
    NODE_HASHES.with(|c| c.set(c.get() + 1));
    hash_parts(&[
        &l.hash.0,
        &r.hash.0,
        &l.min.to_be_bytes(),
        &r.max.to_be_bytes(),
        &l.max.to_be_bytes(),
        &r.min.to_be_bytes(),
        &[l.height, r.height],
    ])
}

pub fn leaf_hash(key: Key, payload: &Digest) -> Digest {
    LEAF_HASHES.with(|c| c.set(c.get() + 1));
    hash_parts(&[&key.to_be_bytes(), &payload.0])
}

/// Height of the finalized shape over `n` leaves.
pub fn shape_height(n: u64) -> u8 {
    debug_assert!(n > 0);
    1 + (64 - (n - 1).leading_zeros()) as u8
}

/// Size of the left part when splitting `n > 1` leaves.
pub fn split_point(n: u64) -> u64 {
    debug_assert!(n > 1);
    1u64 << (63 - (n - 1).leading_zeros())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LeafRecord {
    pub key: Key,
    pub payload: Digest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    Left = 0,
    Right = 1,
}

/// One sibling on a search path. `height` is carried for structural checks
/// but is not part of any hash.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sibling {
    pub side: Side,
    pub height: u8,
    pub min: Key,
    pub max: Key,
    pub hash: Digest,
}

/// Search relation with its bound.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Query {
    /// Leaf whose key equals the bound.
    Exact(Key),
    /// Rightmost leaf with key <= bound.
    Le(Key),
    /// Leftmost leaf with key >= bound.
    Ge(Key),
}

impl Query {
    pub fn tag(&self) -> u8 {
        match self {
            Query::Exact(_) => 0,
            Query::Le(_) => 1,
            Query::Ge(_) => 2,
        }
    }

    pub fn bound(&self) -> Key {
        match *self {
            Query::Exact(k) | Query::Le(k) | Query::Ge(k) => k,
        }
    }

    pub fn matches(&self, key: Key) -> bool {
        match *self {
            Query::Exact(q) => key == q,
            Query::Le(q) => key <= q,
            Query::Ge(q) => key >= q,
        }
    }
}

/// Search evidence. When `found` is false, `leaf` is the boundary leaf that
/// proves absence: the leftmost leaf for an empty floor, the rightmost leaf for
/// an empty ceiling, and the floor leaf (or leftmost leaf) for a missing exact
/// key.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PathProof {
    pub relation: u8,
    pub found: bool,
    pub leaf: LeafRecord,
    /// Root-to-leaf order.
    pub siblings: Vec<Sibling>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SearchResult {
    pub found: bool,
    pub leaf_index: usize,
    pub proof: PathProof,
}

impl SearchResult {
    pub fn leaf(&self) -> LeafRecord {
        self.proof.leaf
    }
}

/// Evidence for every leaf with key in `[lo, hi]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RangeProof {
    /// Leaf count of the tree; fixes the shape for reconstruction.
    pub n_leaves: u64,
    /// Position of the first in-range leaf.
    pub first: u64,
    /// Left-hand siblings on the path to the first leaf, root-to-leaf.
    pub left: Vec<Sibling>,
    /// Right-hand siblings on the path to the last leaf, root-to-leaf.
    pub right: Vec<Sibling>,
    pub leaves: Vec<LeafRecord>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RangeResult {
    Hit(RangeProof),
    /// No leaf in range: a floor proof for `hi` whose leaf is absent or below `lo`.
    Empty(PathProof),
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
struct Node {
    hash: Digest,
    min: Key,
    max: Key,
    height: u8,
    // For leaves `left` holds the leaf index and `right` is NIL.
    left: u32,
    right: u32,
}

impl Node {
    fn is_leaf(&self) -> bool {
        self.right == NIL
    }

    fn child(&self) -> Child<'_> {
        Child { hash: &self.hash, min: self.min, max: self.max, height: self.height }
    }

    fn sibling(&self, side: Side) -> Sibling {
        Sibling { side, height: self.height, min: self.min, max: self.max, hash: self.hash }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct DimTree {
    leaves: Vec<LeafRecord>,
    nodes: Vec<Node>,
    stack: Vec<u32>,
    root: Option<u32>,
    fin_base: usize,
    merges: u64,
    finalize_merges: u64,
}

impl DimTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    pub fn leaves(&self) -> &[LeafRecord] {
        &self.leaves
    }

    /// Merges performed by inserts so far.
    pub fn merges(&self) -> u64 {
        self.merges
    }

    /// Merges performed by all finalize calls so far.
    pub fn finalize_merges(&self) -> u64 {
        self.finalize_merges
    }

    /// Heights of the subtree stack, left to right.
    pub fn stack_heights(&self) -> Vec<u8> {
        self.stack.iter().map(|&i| self.nodes[i as usize].height).collect()
    }

    pub fn max_key(&self) -> Option<Key> {
        self.leaves.last().map(|l| l.key)
    }

    pub fn is_finalized(&self) -> bool {
        self.root.is_some()
    }

    pub fn root(&self) -> Option<Digest> {
        self.root.map(|r| self.nodes[r as usize].hash)
    }

    fn invalidate(&mut self) {
        if self.root.take().is_some() {
            self.nodes.truncate(self.fin_base);
        }
    }

    fn push_merge(&mut self, l: u32, r: u32) -> u32 {
        let (ln, rn) = (self.nodes[l as usize], self.nodes[r as usize]);
        let node = Node {
            hash: node_hash(ln.child(), rn.child()),
            min: ln.min,
            max: rn.max,
            height: ln.height.max(rn.height) + 1,
            left: l,
            right: r,
        };
        self.nodes.push(node);
        (self.nodes.len() - 1) as u32
    }

    pub fn insert(&mut self, leaf: LeafRecord) -> Result<()> {
        if let Some(max) = self.max_key() {
            if leaf.key < max {
                return Err(Error::OutOfOrderKey { key: leaf.key, max });
            }
        }
        self.invalidate();
        let idx = self.leaves.len() as u32;
        self.leaves.push(leaf);
        self.nodes.push(Node {
            hash: leaf_hash(leaf.key, &leaf.payload),
            min: leaf.key,
            max: leaf.key,
            height: 1,
            left: idx,
            right: NIL,
        });
        let mut t = (self.nodes.len() - 1) as u32;
        while let Some(&top) = self.stack.last() {
            if self.nodes[top as usize].height != self.nodes[t as usize].height {
                break;
            }
            self.stack.pop();
            t = self.push_merge(top, t);
            self.merges += 1;
        }
        self.stack.push(t);
        Ok(())
    }

    /// Replaces the payload of leaf `index` and rehashes the path to the root
    /// of its subtree. Returns the number of internal hashes recomputed.
    pub fn update(&mut self, index: usize, payload: Digest) -> Result<usize> {
        if index >= self.leaves.len() {
            return Err(Error::IndexOutOfRange { index, len: self.leaves.len() });
        }
        self.invalidate();
        let mut off = 0usize;
        let mut cur = NIL;
        for &s in &self.stack {
            let size = 1usize << (self.nodes[s as usize].height - 1);
            if index < off + size {
                cur = s;
                break;
            }
            off += size;
        }
        let mut path = Vec::with_capacity(32);
        let mut size = 1usize << (self.nodes[cur as usize].height - 1);
        while !self.nodes[cur as usize].is_leaf() {
            path.push(cur);
            let n = self.nodes[cur as usize];
            size /= 2;
            if index < off + size {
                cur = n.left;
            } else {
                off += size;
                cur = n.right;
            }
        }
        self.leaves[index].payload = payload;
        let key = self.leaves[index].key;
        self.nodes[cur as usize].hash = leaf_hash(key, &payload);
        for &p in path.iter().rev() {
            let n = self.nodes[p as usize];
            let (l, r) = (self.nodes[n.left as usize], self.nodes[n.right as usize]);
            self.nodes[p as usize].hash = node_hash(l.child(), r.child());
        }
        Ok(path.len())
    }

    /// Folds the subtree stack into one root. Idempotent until the next mutation.
    pub fn finalize(&mut self) -> Result<Digest> {
        if self.leaves.is_empty() {
            return Err(Error::EmptyTree);
        }
        if let Some(r) = self.root {
            return Ok(self.nodes[r as usize].hash);
        }
        self.fin_base = self.nodes.len();
        let mut acc = *self.stack.last().unwrap();
        for j in (0..self.stack.len() - 1).rev() {
            acc = self.push_merge(self.stack[j], acc);
            self.finalize_merges += 1;
        }
        self.root = Some(acc);
        Ok(self.nodes[acc as usize].hash)
    }

    fn root_node(&self) -> Result<u32> {
        self.root.ok_or(Error::NotFinalized)
    }

    pub fn search(&self, q: Query) -> Result<SearchResult> {
        let mut cur = self.root_node()?;
        let mut siblings = Vec::new();
        loop {
            let n = self.nodes[cur as usize];
            if n.is_leaf() {
                let leaf = self.leaves[n.left as usize];
                let found = q.matches(leaf.key);
                return Ok(SearchResult {
                    found,
                    leaf_index: n.left as usize,
                    proof: PathProof { relation: q.tag(), found, leaf, siblings },
                });
            }
            let (l, r) = (self.nodes[n.left as usize], self.nodes[n.right as usize]);
            let go_right = match q {
                Query::Exact(k) | Query::Le(k) => r.min <= k,
                Query::Ge(k) => l.max < k,
            };
            if go_right {
                siblings.push(l.sibling(Side::Left));
                cur = n.right;
            } else {
                siblings.push(r.sibling(Side::Right));
                cur = n.left;
            }
        }
    }

    pub fn search_exact(&self, key: Key) -> Result<SearchResult> {
        self.search(Query::Exact(key))
    }

    pub fn search_le(&self, key: Key) -> Result<SearchResult> {
        self.search(Query::Le(key))
    }

    pub fn search_ge(&self, key: Key) -> Result<SearchResult> {
        self.search(Query::Ge(key))
    }

    /// Siblings on the root-to-leaf path of leaf `index` in the finalized tree.
    fn path_to(&self, index: usize) -> Result<Vec<Sibling>> {
        let mut cur = self.root_node()?;
        let mut off = 0u64;
        let mut size = self.leaves.len() as u64;
        let mut out = Vec::new();
        while size > 1 {
            let n = self.nodes[cur as usize];
            let k = split_point(size);
            if (index as u64) < off + k {
                out.push(self.nodes[n.right as usize].sibling(Side::Right));
                cur = n.left;
                size = k;
            } else {
                out.push(self.nodes[n.left as usize].sibling(Side::Left));
                cur = n.right;
                off += k;
                size -= k;
            }
        }
        Ok(out)
    }

    /// Range proof for all leaves with `lo <= key <= hi`.
    pub fn prove_range(&self, lo: Key, hi: Key) -> Result<RangeResult> {
        if lo > hi {
            return Err(Error::InvalidRange { a: lo, b: hi });
        }
        self.root_node()?;
        let i = self.leaves.partition_point(|l| l.key < lo);
        let j = self.leaves.partition_point(|l| l.key <= hi);
        if i >= j {
            return Ok(RangeResult::Empty(self.search(Query::Le(hi))?.proof));
        }
        let left = self.path_to(i)?.into_iter().filter(|s| s.side == Side::Left).collect();
        let right = self.path_to(j - 1)?.into_iter().filter(|s| s.side == Side::Right).collect();
        Ok(RangeResult::Hit(RangeProof {
            n_leaves: self.leaves.len() as u64,
            first: i as u64,
            left,
            right,
            leaves: self.leaves[i..j].to_vec(),
        }))
    }
}

/// Recomputes the root from a path proof and checks that the index fields
/// establish the claimed outcome for `q`.
pub fn verify_path(root: &Digest, q: Query, proof: &PathProof) -> bool {
    if proof.relation != q.tag() {
        return false;
    }
    let leaf = proof.leaf;
    let mut hash = leaf_hash(leaf.key, &leaf.payload);
    let (mut min, mut max, mut height) = (leaf.key, leaf.key, 1u8);
    for s in proof.siblings.iter().rev() {
        if s.min > s.max || s.height == 0 {
            return false;
        }
        match s.side {
            Side::Left => {
                if s.max > min || s.height < height {
                    return false;
                }
                hash = node_hash(
                    Child { hash: &s.hash, min: s.min, max: s.max, height: s.height },
                    Child { hash: &hash, min, max, height },
                );
                min = s.min;
                height = s.height.saturating_add(1);
            }
            Side::Right => {
                if max > s.min || s.height > height {
                    return false;
                }
                hash = node_hash(
                    Child { hash: &hash, min, max, height },
                    Child { hash: &s.hash, min: s.min, max: s.max, height: s.height },
                );
                max = s.max;
                height = height.saturating_add(1);
            }
        }
    }
    if hash != *root {
        return false;
    }
    let key = leaf.key;
    let no_left = || proof.siblings.iter().all(|s| s.side != Side::Left);
    let no_right = || proof.siblings.iter().all(|s| s.side != Side::Right);
    let right_above = |b: Key| proof.siblings.iter().filter(|s| s.side == Side::Right).all(|s| s.min > b);
    let left_below = |b: Key| proof.siblings.iter().filter(|s| s.side == Side::Left).all(|s| s.max < b);
    match (q, proof.found) {
        (Query::Exact(b), true) => key == b,
        (Query::Exact(b), false) => (key < b && right_above(b)) || (key > b && no_left()),
        (Query::Le(b), true) => key <= b && right_above(b),
        (Query::Le(b), false) => key > b && no_left(),
        (Query::Ge(b), true) => key >= b && left_below(b),
        (Query::Ge(b), false) => key < b && no_right(),
    }
}

/// Checks a range result against `root` for the closed interval `[lo, hi]`.
pub fn verify_range(root: &Digest, lo: Key, hi: Key, result: &RangeResult) -> bool {
    if lo > hi {
        return false;
    }
    match result {
        RangeResult::Empty(w) => verify_path(root, Query::Le(hi), w) && (!w.found || w.leaf.key < lo),
        RangeResult::Hit(p) => verify_range_hit(root, lo, hi, p),
    }
}

fn verify_range_hit(root: &Digest, lo: Key, hi: Key, p: &RangeProof) -> bool {
    let m = p.leaves.len() as u64;
    if m == 0 || p.n_leaves == 0 || p.first.checked_add(m).is_none_or(|e| e > p.n_leaves) {
        return false;
    }
    if p.leaves.iter().any(|l| l.key < lo || l.key > hi) {
        return false;
    }
    if p.leaves.windows(2).any(|w| w[0].key > w[1].key) {
        return false;
    }
    let mut ctx = RangeCtx {
        p,
        lo,
        hi,
        left: p.left.iter().collect(),
        right: p.right.iter().collect(),
    };
    match ctx.build(0, p.n_leaves) {
        Some((h, _, _)) => h == *root && ctx.left.is_empty() && ctx.right.is_empty(),
        None => false,
    }
}

struct RangeCtx<'a> {
    p: &'a RangeProof,
    lo: Key,
    hi: Key,
    left: VecDeque<&'a Sibling>,
    right: VecDeque<&'a Sibling>,
}

impl RangeCtx<'_> {
    fn build(&mut self, off: u64, size: u64) -> Option<(Digest, Key, Key)> {
        let first = self.p.first;
        let end = first + self.p.leaves.len() as u64;
        if off + size <= first {
            let s = self.left.pop_front()?;
            let ok = s.side == Side::Left && s.height == shape_height(size) && s.min <= s.max && s.max < self.lo;
            return ok.then_some((s.hash, s.min, s.max));
        }
        if off >= end {
            let s = self.right.pop_back()?;
            let ok = s.side == Side::Right && s.height == shape_height(size) && s.min <= s.max && s.min > self.hi;
            return ok.then_some((s.hash, s.min, s.max));
        }
        if size == 1 {
            let l = self.p.leaves[(off - first) as usize];
            return Some((leaf_hash(l.key, &l.payload), l.key, l.key));
        }
        let k = split_point(size);
        let (lh, lmin, lmax) = self.build(off, k)?;
        let (rh, rmin, rmax) = self.build(off + k, size - k)?;
        if lmax > rmin {
            return None;
        }
        let l = Child { hash: &lh, min: lmin, max: lmax, height: shape_height(k) };
        let r = Child { hash: &rh, min: rmin, max: rmax, height: shape_height(size - k) };
        Some((node_hash(l, r), lmin, rmax))
    }
}

fn write_sibling(w: &mut Writer, s: &Sibling) {
    w.u8(s.side as u8).u8(s.height).u128(s.min).u128(s.max).digest(&s.hash);
}

fn read_sibling(r: &mut Reader<'_>) -> Result<Sibling> {
    let side = match r.u8()? {
        0 => Side::Left,
        1 => Side::Right,
        v => return Err(Error::Decode(format!("invalid side byte {v}"))),
    };
    Ok(Sibling { side, height: r.u8()?, min: r.u128()?, max: r.u128()?, hash: r.digest()? })
}

fn write_siblings(w: &mut Writer, s: &[Sibling]) {
    w.u8(s.len() as u8);
    for x in s {
        write_sibling(w, x);
    }
}

fn read_siblings(r: &mut Reader<'_>) -> Result<Vec<Sibling>> {
    let n = r.u8()? as usize;
    (0..n).map(|_| read_sibling(r)).collect()
}

fn write_leaf(w: &mut Writer, l: &LeafRecord) {
    w.u128(l.key).digest(&l.payload);
}

fn read_leaf(r: &mut Reader<'_>) -> Result<LeafRecord> {
    Ok(LeafRecord { key: r.u128()?, payload: r.digest()? })
}

pub const SIBLING_WIRE_LEN: usize = 66;

impl PathProof {
    pub fn write(&self, w: &mut Writer) {
        w.u8(PROOF_VERSION).u8(self.relation | if self.found { 0x80 } else { 0 });
        write_leaf(w, &self.leaf);
        write_siblings(w, &self.siblings);
    }

    pub fn read(r: &mut Reader<'_>) -> Result<Self> {
        if r.u8()? != PROOF_VERSION {
            return Err(Error::Decode("unsupported path proof version".into()));
        }
        let tag = r.u8()?;
        let relation = tag & 0x7F;
        if relation > 2 {
            return Err(Error::Decode(format!("invalid relation tag {tag:#x}")));
        }
        Ok(PathProof { relation, found: tag & 0x80 != 0, leaf: read_leaf(r)?, siblings: read_siblings(r)? })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.write(&mut w);
        w.finish()
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        let mut r = Reader::new(b);
        let p = Self::read(&mut r)?;
        r.end()?;
        Ok(p)
    }
}

impl RangeResult {
    pub fn write(&self, w: &mut Writer) {
        match self {
            RangeResult::Empty(p) => {
                w.u8(0);
                p.write(w);
            }
            RangeResult::Hit(p) => {
                w.u8(1).u8(PROOF_VERSION).u64(p.n_leaves).u64(p.first).u32(p.leaves.len() as u32);
                for l in &p.leaves {
                    write_leaf(w, l);
                }
                write_siblings(w, &p.left);
                write_siblings(w, &p.right);
            }
        }
    }

    pub fn read(r: &mut Reader<'_>) -> Result<Self> {
        match r.u8()? {
            0 => Ok(RangeResult::Empty(PathProof::read(r)?)),
            1 => {
                if r.u8()? != PROOF_VERSION {
                    return Err(Error::Decode("unsupported range proof version".into()));
                }
                let n_leaves = r.u64()?;
                let first = r.u64()?;
                let m = r.count(48)?;
                let leaves = (0..m).map(|_| read_leaf(r)).collect::<Result<_>>()?;
                let left = read_siblings(r)?;
                let right = read_siblings(r)?;
                Ok(RangeResult::Hit(RangeProof { n_leaves, first, left, right, leaves }))
            }
            v => Err(Error::Decode(format!("invalid range result tag {v}"))),
        }
    }
}
