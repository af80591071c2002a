//! Two-level graph accumulator.
//!
//! A global [`DimTree`] keyed by dense internal entity id holds, for every
//! entity, the root of that entity's local tree keyed by [`TimestampKey`]. A
//! third tree, the registry, maps external entity names to internal ids and is
//! committed next to the global root so that a prover cannot remap entities or
//! deny that an entity exists.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::dimtree::{verify_path, verify_range as verify_tree_range, DimTree, Key, LeafRecord, PathProof, Query, RangeResult};
use crate::error::{Error, Result};
use crate::hashcore::{hash_parts, Digest};
use crate::wire::{Reader, Writer};

/// Version key of a node within its entity: event time, then a per-entity
/// counter that breaks timestamp ties.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TimestampKey {
    pub ts: u64,
    pub seq: u32,
}

impl TimestampKey {
    pub fn new(ts: u64, seq: u32) -> Self {
        TimestampKey { ts, seq }
    }

    pub fn to_key(self) -> Key {
        ((self.ts as Key) << 32) | self.seq as Key
    }

    pub fn from_key(k: Key) -> Option<Self> {
        if k >> 96 != 0 {
            return None;
        }
        Some(TimestampKey { ts: (k >> 32) as u64, seq: k as u32 })
    }
}

impl std::fmt::Display for TimestampKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}.{}", self.ts, self.seq)
    }
}

/// Temporal relation of a node query.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Relation {
    /// Latest version with timestamp <= t.
    Le(u64),
    /// Earliest version with timestamp >= t.
    Ge(u64),
}

impl Relation {
    pub fn query(self) -> Query {
        match self {
            Relation::Le(t) => Query::Le(TimestampKey::new(t, u32::MAX).to_key()),
            Relation::Ge(t) => Query::Ge(TimestampKey::new(t, 0).to_key()),
        }
    }

    pub fn matches(self, k: TimestampKey) -> bool {
        match self {
            Relation::Le(t) => k.ts <= t,
            Relation::Ge(t) => k.ts >= t,
        }
    }
}

pub fn registry_key(ext: &str) -> Key {
    let h = hash_parts(&[b"vcause/regkey", ext.as_bytes()]);
    u128::from_be_bytes(h.0[..16].try_into().unwrap())
}

pub fn registry_value(ext: &str, iid: u64) -> Digest {
    hash_parts(&[b"vcause/regval", &(ext.len() as u32).to_be_bytes(), ext.as_bytes(), &iid.to_be_bytes()])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NodeProofKind {
    Member = 0,
    NonmemberLocal = 1,
    NonmemberGlobal = 2,
}

/// Single-node (non-)membership evidence.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NodeProof {
    pub kind: NodeProofKind,
    /// Exact search for the entity name in the registry tree.
    pub registry: PathProof,
    /// Exact search for the internal id in the global tree.
    pub global: Option<PathProof>,
    /// Relation search in the entity's local tree.
    pub local: Option<PathProof>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NodeAnswer {
    pub found: bool,
    pub key: Option<TimestampKey>,
    pub proof: NodeProof,
}

impl NodeAnswer {
    pub fn iid(&self) -> Option<u64> {
        self.proof.global.as_ref().map(|g| g.leaf.key as u64)
    }

    /// Leaf payload of the matched node.
    pub fn payload(&self) -> Option<Digest> {
        if self.found {
            self.proof.local.as_ref().map(|l| l.leaf.payload)
        } else {
            None
        }
    }
}

/// Entity-temporal range evidence.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EntityRangeProof {
    pub registry: PathProof,
    pub global: Option<PathProof>,
    pub local: Option<RangeResult>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RangeAnswer {
    pub found: bool,
    pub leaves: Vec<(TimestampKey, Digest)>,
    pub proof: EntityRangeProof,
}

/// Evidence for one node addressed by (internal id, key).
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KeyProof {
    pub global: PathProof,
    pub local: PathProof,
}

/// Evidence for a contiguous run of one entity's leaves.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KeyRangeProof {
    pub global: PathProof,
    pub local: RangeResult,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Accumulator {
    global: DimTree,
    locals: Vec<DimTree>,
    names: Vec<String>,
    ids: HashMap<String, u64>,
    registry: DimTree,
    registry_len: usize,
    dirty: BTreeSet<u64>,
    committed: Option<(Digest, Digest)>,
}

impl Accumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entity_count(&self) -> usize {
        self.names.len()
    }

    pub fn node_count(&self) -> usize {
        self.locals.iter().map(|t| t.len()).sum()
    }

    pub fn iid_of(&self, ext: &str) -> Option<u64> {
        self.ids.get(ext).copied()
    }

    pub fn name_of(&self, iid: u64) -> Option<&str> {
        self.names.get(iid as usize).map(String::as_str)
    }

    pub fn local(&self, iid: u64) -> Option<&DimTree> {
        self.locals.get(iid as usize)
    }

    /// (global root, registry root) as of the last commit.
    pub fn committed_roots(&self) -> Option<(Digest, Digest)> {
        self.committed
    }

    pub fn is_dirty(&self) -> bool {
        !self.dirty.is_empty() || self.registry_len != self.names.len()
    }

    /// Appends a node leaf. `iid` must be the entity's id, or the next unused id for a
    /// new entity.
    pub fn register_node(&mut self, ext: &str, iid: u64, key: TimestampKey, digest: Digest) -> Result<()> {
        let n = self.names.len() as u64;
        if iid == n {
            if self.ids.contains_key(ext) {
                return Err(Error::Config(format!("entity {ext} already registered")));
            }
            let mut t = DimTree::new();
            t.insert(LeafRecord { key: key.to_key(), payload: digest })?;
            self.names.push(ext.to_string());
            self.ids.insert(ext.to_string(), iid);
            self.locals.push(t);
        } else if iid < n && self.names[iid as usize] == ext {
            self.locals[iid as usize].insert(LeafRecord { key: key.to_key(), payload: digest })?;
        } else {
            return Err(Error::UnknownEntity(format!("{ext} (id {iid})")));
        }
        self.dirty.insert(iid);
        Ok(())
    }

    fn leaf_index(&self, iid: u64, key: TimestampKey) -> Result<usize> {
        let t = self.locals.get(iid as usize).ok_or_else(|| Error::UnknownEntity(iid.to_string()))?;
        let k = key.to_key();
        let i = t.leaves().partition_point(|l| l.key < k);
        if i < t.len() && t.leaves()[i].key == k {
            Ok(i)
        } else {
            Err(Error::UnknownKey(format!("{iid}@{key}")))
        }
    }

    pub fn leaf_payload(&self, iid: u64, key: TimestampKey) -> Result<Digest> {
        let i = self.leaf_index(iid, key)?;
        Ok(self.locals[iid as usize].leaves()[i].payload)
    }

    pub fn update_node(&mut self, iid: u64, key: TimestampKey, digest: Digest) -> Result<()> {
        let i = self.leaf_index(iid, key)?;
        let t = &mut self.locals[iid as usize];
        if t.leaves()[i].payload != digest {
            t.update(i, digest)?;
            self.dirty.insert(iid);
        }
        Ok(())
    }

    /// Finalizes touched local trees, then the global tree. Returns the global root.
    pub fn commit(&mut self) -> Result<Digest> {
        if self.names.is_empty() {
            return Err(Error::EmptyTree);
        }
        for &iid in &self.dirty {
            let root = self.locals[iid as usize].finalize()?;
            if (iid as usize) < self.global.len() {
                self.global.update(iid as usize, root)?;
            } else {
                self.global.insert(LeafRecord { key: iid as Key, payload: root })?;
            }
        }
        self.dirty.clear();
        let root = self.global.finalize()?;
        if self.registry_len != self.names.len() {
            let mut entries: Vec<LeafRecord> = self
                .names
                .iter()
                .enumerate()
                .map(|(i, n)| LeafRecord { key: registry_key(n), payload: registry_value(n, i as u64) })
                .collect();
            entries.sort_by_key(|e| e.key);
            let mut reg = DimTree::new();
            for e in entries {
                reg.insert(e)?;
            }
            reg.finalize()?;
            self.registry = reg;
            self.registry_len = self.names.len();
        }
        let reg_root = self.registry.root().ok_or(Error::NotCommitted)?;
        self.committed = Some((root, reg_root));
        Ok(root)
    }

    fn ensure_committed(&self) -> Result<()> {
        if self.committed.is_none() || self.is_dirty() {
            return Err(Error::NotCommitted);
        }
        Ok(())
    }

    fn registry_search(&self, ext: &str) -> Result<(PathProof, Option<u64>)> {
        let r = self.registry.search_exact(registry_key(ext))?;
        let iid = if r.found { self.ids.get(ext).copied() } else { None };
        Ok((r.proof, iid))
    }

    pub fn prove_node(&self, ext: &str, rel: Relation) -> Result<NodeAnswer> {
        self.ensure_committed()?;
        let (registry, iid) = self.registry_search(ext)?;
        let Some(iid) = iid else {
            return Ok(NodeAnswer {
                found: false,
                key: None,
                proof: NodeProof { kind: NodeProofKind::NonmemberGlobal, registry, global: None, local: None },
            });
        };
        let global = self.global.search_exact(iid as Key)?.proof;
        let local = self.locals[iid as usize].search(rel.query())?;
        let found = local.found;
        Ok(NodeAnswer {
            found,
            key: if found { TimestampKey::from_key(local.leaf().key) } else { None },
            proof: NodeProof {
                kind: if found { NodeProofKind::Member } else { NodeProofKind::NonmemberLocal },
                registry,
                global: Some(global),
                local: Some(local.proof),
            },
        })
    }

    pub fn prove_range(&self, ext: &str, a: u64, b: u64) -> Result<RangeAnswer> {
        if a > b {
            return Err(Error::InvalidRange { a: a as u128, b: b as u128 });
        }
        self.ensure_committed()?;
        let (registry, iid) = self.registry_search(ext)?;
        let Some(iid) = iid else {
            return Ok(RangeAnswer {
                found: false,
                leaves: vec![],
                proof: EntityRangeProof { registry, global: None, local: None },
            });
        };
        let global = self.global.search_exact(iid as Key)?.proof;
        let lo = TimestampKey::new(a, 0).to_key();
        let hi = TimestampKey::new(b, u32::MAX).to_key();
        let local = self.locals[iid as usize].prove_range(lo, hi)?;
        let leaves = range_leaves(&local);
        Ok(RangeAnswer {
            found: !leaves.is_empty(),
            leaves,
            proof: EntityRangeProof { registry, global: Some(global), local: Some(local) },
        })
    }

    pub fn prove_key(&self, iid: u64, key: TimestampKey) -> Result<KeyProof> {
        self.ensure_committed()?;
        self.leaf_index(iid, key)?;
        let global = self.global.search_exact(iid as Key)?.proof;
        let local = self.locals[iid as usize].search_exact(key.to_key())?.proof;
        Ok(KeyProof { global, local })
    }

    pub fn prove_key_range(&self, iid: u64, lo: TimestampKey, hi: TimestampKey) -> Result<KeyRangeProof> {
        self.ensure_committed()?;
        let t = self.locals.get(iid as usize).ok_or_else(|| Error::UnknownEntity(iid.to_string()))?;
        let global = self.global.search_exact(iid as Key)?.proof;
        let local = t.prove_range(lo.to_key(), hi.to_key())?;
        Ok(KeyRangeProof { global, local })
    }

    /// Number of leaves of `iid` with keys in `[lo, hi]`.
    pub fn count_in(&self, iid: u64, lo: TimestampKey, hi: TimestampKey) -> usize {
        let Some(t) = self.locals.get(iid as usize) else { return 0 };
        let (lo, hi) = (lo.to_key(), hi.to_key());
        let ls = t.leaves();
        ls.partition_point(|l| l.key <= hi) - ls.partition_point(|l| l.key < lo)
    }
}

fn range_leaves(r: &RangeResult) -> Vec<(TimestampKey, Digest)> {
    match r {
        RangeResult::Hit(p) => p
            .leaves
            .iter()
            .filter_map(|l| TimestampKey::from_key(l.key).map(|k| (k, l.payload)))
            .collect(),
        RangeResult::Empty(_) => vec![],
    }
}

/// Checks the registry and global legs; returns the internal id and local root.
fn verify_entity(
    root: &Digest,
    registry_root: &Digest,
    ext: &str,
    registry: &PathProof,
    global: &PathProof,
) -> Option<(u64, Digest)> {
    if !verify_path(registry_root, Query::Exact(registry_key(ext)), registry) || !registry.found {
        return None;
    }
    let iid = u64::try_from(global.leaf.key).ok()?;
    if registry.leaf.payload != registry_value(ext, iid) {
        return None;
    }
    if !verify_path(root, Query::Exact(iid as Key), global) || !global.found {
        return None;
    }
    Some((iid, global.leaf.payload))
}

fn verify_absent(registry_root: &Digest, ext: &str, registry: &PathProof) -> bool {
    verify_path(registry_root, Query::Exact(registry_key(ext)), registry) && !registry.found
}

pub fn verify_node(root: &Digest, registry_root: &Digest, ext: &str, rel: Relation, ans: &NodeAnswer) -> bool {
    let p = &ans.proof;
    match p.kind {
        NodeProofKind::NonmemberGlobal => {
            !ans.found && ans.key.is_none() && p.global.is_none() && p.local.is_none() && verify_absent(registry_root, ext, &p.registry)
        }
        NodeProofKind::Member | NodeProofKind::NonmemberLocal => {
            let (Some(g), Some(l)) = (&p.global, &p.local) else { return false };
            let Some((_, local_root)) = verify_entity(root, registry_root, ext, &p.registry, g) else {
                return false;
            };
            if !verify_path(&local_root, rel.query(), l) {
                return false;
            }
            let member = p.kind == NodeProofKind::Member;
            if l.found != member || ans.found != member {
                return false;
            }
            if member {
                TimestampKey::from_key(l.leaf.key).is_some_and(|k| ans.key == Some(k) && rel.matches(k))
            } else {
                ans.key.is_none()
            }
        }
    }
}

pub fn verify_range(root: &Digest, registry_root: &Digest, ext: &str, a: u64, b: u64, ans: &RangeAnswer) -> bool {
    if a > b {
        return false;
    }
    let p = &ans.proof;
    let (Some(g), Some(l)) = (&p.global, &p.local) else {
        return p.global.is_none()
            && p.local.is_none()
            && !ans.found
            && ans.leaves.is_empty()
            && verify_absent(registry_root, ext, &p.registry);
    };
    let Some((_, local_root)) = verify_entity(root, registry_root, ext, &p.registry, g) else {
        return false;
    };
    let lo = TimestampKey::new(a, 0).to_key();
    let hi = TimestampKey::new(b, u32::MAX).to_key();
    if !verify_tree_range(&local_root, lo, hi, l) {
        return false;
    }
    let leaves = range_leaves(l);
    ans.found == !leaves.is_empty() && ans.leaves == leaves
}

pub fn verify_key(root: &Digest, iid: u64, key: TimestampKey, p: &KeyProof) -> Option<Digest> {
    if !verify_path(root, Query::Exact(iid as Key), &p.global) || !p.global.found {
        return None;
    }
    let q = Query::Exact(key.to_key());
    if !verify_path(&p.global.leaf.payload, q, &p.local) || !p.local.found {
        return None;
    }
    Some(p.local.leaf.payload)
}

/// Returns the authenticated leaves of `iid` in `[lo, hi]`.
pub fn verify_key_range(
    root: &Digest,
    iid: u64,
    lo: TimestampKey,
    hi: TimestampKey,
    p: &KeyRangeProof,
) -> Option<Vec<(TimestampKey, Digest)>> {
    if !verify_path(root, Query::Exact(iid as Key), &p.global) || !p.global.found {
        return None;
    }
    if !verify_tree_range(&p.global.leaf.payload, lo.to_key(), hi.to_key(), &p.local) {
        return None;
    }
    let leaves = range_leaves(&p.local);
    match &p.local {
        RangeResult::Hit(r) if leaves.len() == r.leaves.len() => Some(leaves),
        _ => None,
    }
}

// Wire encodings.

fn write_opt_path(w: &mut Writer, p: &Option<PathProof>) {
    match p {
        Some(p) => {
            w.u8(1);
            p.write(w);
        }
        None => {
            w.u8(0);
        }
    }
}

fn read_opt_path(r: &mut Reader<'_>) -> Result<Option<PathProof>> {
    Ok(if r.bool()? { Some(PathProof::read(r)?) } else { None })
}

impl NodeProof {
    pub fn write(&self, w: &mut Writer) {
        w.u8(self.kind as u8);
        self.registry.write(w);
        write_opt_path(w, &self.global);
        write_opt_path(w, &self.local);
    }

    pub fn read(r: &mut Reader<'_>) -> Result<Self> {
        let kind = match r.u8()? {
            0 => NodeProofKind::Member,
            1 => NodeProofKind::NonmemberLocal,
            2 => NodeProofKind::NonmemberGlobal,
            v => return Err(Error::Decode(format!("invalid node proof kind {v}"))),
        };
        Ok(NodeProof { kind, registry: PathProof::read(r)?, global: read_opt_path(r)?, local: read_opt_path(r)? })
    }
}

impl NodeAnswer {
    pub fn write(&self, w: &mut Writer) {
        w.u8(self.found as u8);
        match self.key {
            Some(k) => w.u8(1).u64(k.ts).u32(k.seq),
            None => w.u8(0),
        };
        self.proof.write(w);
    }

    pub fn read(r: &mut Reader<'_>) -> Result<Self> {
        let found = r.bool()?;
        let key = if r.bool()? { Some(TimestampKey::new(r.u64()?, r.u32()?)) } else { None };
        Ok(NodeAnswer { found, key, proof: NodeProof::read(r)? })
    }
}

impl KeyProof {
    pub fn write(&self, w: &mut Writer) {
        self.global.write(w);
        self.local.write(w);
    }

    pub fn read(r: &mut Reader<'_>) -> Result<Self> {
        Ok(KeyProof { global: PathProof::read(r)?, local: PathProof::read(r)? })
    }
}

impl KeyRangeProof {
    pub fn write(&self, w: &mut Writer) {
        self.global.write(w);
        self.local.write(w);
    }

    pub fn read(r: &mut Reader<'_>) -> Result<Self> {
        Ok(KeyRangeProof { global: PathProof::read(r)?, local: RangeResult::read(r)? })
    }
}
