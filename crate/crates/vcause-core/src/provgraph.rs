//! Versioned provenance graph with incoming and outgoing path digests.
//!
//! Each event creates one new version of the destination entity. The new
//! version receives a dependency edge from the source entity's latest version
//! and, unless the event is a self-event, a temporal edge from the destination's
//! previous version.
//!
//! In segmented mode every temporal edge, and every dependency edge that would
//! push a tree past depth `L`, is detached: in the segment tree it ends at a
//! terminal stub rather than at its logical destination. A detached edge is the
//! terminal; its encoding carries [`edge_kind::TO_TERMINAL`] and names the
//! target, and the stub contributes an empty digest.

use std::collections::{BinaryHeap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::accumulator::TimestampKey;
use crate::error::{Error, Result};
use crate::hashcore::{edge_kind, encode_edge, hash_parts, mset_empty, Digest, EdgeFields, MsetDigest};

pub type NodeId = u32;
pub type EdgeId = u32;

/// One logged event.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EventRecord {
    pub src: String,
    pub action: String,
    pub dst: String,
    pub ts: u64,
    pub payload: Option<Vec<u8>>,
}

impl EventRecord {
    pub fn new(src: &str, action: &str, dst: &str, ts: u64) -> Self {
        EventRecord { src: src.into(), action: action.into(), dst: dst.into(), ts, payload: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    /// Segmented outgoing digests with segmentation depth `L >= 1`.
    Segmented(u32),
    /// Full outgoing digests. Test and benchmark mode.
    Unsegmented,
}

impl Default for Mode {
    fn default() -> Self {
        Mode::Segmented(1)
    }
}

pub mod node_flags {
    /// Node created for a source entity seen for the first time.
    pub const ENTRY: u8 = 1;
}

/// Address of a version node: internal entity id and key.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeRef {
    pub entity: u64,
    pub key: TimestampKey,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VersionNode {
    pub entity: u64,
    pub key: TimestampKey,
    /// Index of the event that created this node.
    pub event_index: u64,
    pub flags: u8,
    pub pi_in: MsetDigest,
    /// Segmented outgoing digest, or the full one in unsegmented mode.
    pub pi_out: MsetDigest,
    pub tree: u32,
    pub depth: u32,
    /// Dependency edge first, then the temporal edge if any.
    pub in_edges: Vec<EdgeId>,
    pub out_edges: Vec<EdgeId>,
}

impl VersionNode {
    pub fn node_ref(&self) -> NodeRef {
        NodeRef { entity: self.entity, key: self.key }
    }

    pub fn is_entry(&self) -> bool {
        self.flags & node_flags::ENTRY != 0
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Edge {
    pub kind: u8,
    pub src: NodeId,
    pub dst: NodeId,
    pub action: u32,
    pub payload: Vec<u8>,
    /// Ends at a terminal stub in the segment forest.
    pub detached: bool,
}

/// The fields of a node that the accumulator commits to.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NodeRecord {
    pub node: NodeRef,
    pub event_index: u64,
    pub flags: u8,
    pub pi_in: MsetDigest,
    pub pi_out: MsetDigest,
}

const NODE_DOMAIN: &[u8] = b"vcause/node/v1";

/// Accumulator leaf payload for a node.
pub fn node_leaf_digest(r: &NodeRecord) -> Digest {
    hash_parts(&[
        NODE_DOMAIN,
        &r.node.entity.to_be_bytes(),
        &r.node.key.ts.to_be_bytes(),
        &r.node.key.seq.to_be_bytes(),
        &r.event_index.to_be_bytes(),
        &[r.flags],
        &r.pi_in.to_bytes(),
        &r.pi_out.to_bytes(),
    ])
}

/// Canonical encoding of an edge between two node addresses.
pub fn encode_edge_ref(src: NodeRef, dst: NodeRef, kind: u8, action: &str, payload: &[u8]) -> Vec<u8> {
    encode_edge(&EdgeFields {
        src_entity: src.entity,
        src_key: src.key,
        dst_entity: dst.entity,
        dst_key: dst.key,
        kind,
        event_type: action,
        payload,
    })
}

/// Multiset element for an edge followed by the digest at its far end.
pub fn path_element(enc: &[u8], d: &MsetDigest) -> Vec<u8> {
    let mut v = Vec::with_capacity(enc.len() + MsetDigest::LEN);
    v.extend_from_slice(enc);
    v.extend_from_slice(&d.to_bytes());
    v
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RecordOutcome {
    /// The new version of the destination entity.
    pub node: NodeId,
    /// Nodes created by the event in creation order (an entry node, then `node`).
    pub created: Vec<NodeId>,
    /// Pre-existing nodes whose outgoing digest was updated, ascending.
    pub changed: Vec<NodeId>,
}

impl RecordOutcome {
    pub fn updates(&self) -> usize {
        self.changed.len()
    }
}

/// The per-entry part of a forward component.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub entry: NodeId,
    pub nodes: Vec<NodeId>,
    pub edges: Vec<EdgeId>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct EntityState {
    name: String,
    versions: Vec<NodeId>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Graph {
    mode: Mode,
    nodes: Vec<VersionNode>,
    edges: Vec<Edge>,
    actions: Vec<String>,
    action_ids: HashMap<String, u32>,
    entities: Vec<EntityState>,
    entity_ids: HashMap<String, u64>,
    trees: Vec<NodeId>,
    last_ts: Option<u64>,
    events: u64,
}

impl Graph {
    pub fn new(mode: Mode) -> Result<Self> {
        if mode == Mode::Segmented(0) {
            return Err(Error::Config("segmentation depth must be at least 1".into()));
        }
        Ok(Graph { mode, ..Default::default() })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn event_count(&self) -> u64 {
        self.events
    }

    pub fn last_ts(&self) -> Option<u64> {
        self.last_ts
    }

    pub fn nodes(&self) -> &[VersionNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Raw mutable access for tamper harnesses. Breaks digest invariants.
    pub fn nodes_mut(&mut self) -> &mut [VersionNode] {
        &mut self.nodes
    }

    /// Raw mutable access for tamper harnesses. Breaks digest invariants.
    pub fn edges_mut(&mut self) -> &mut [Edge] {
        &mut self.edges
    }

    pub fn node(&self, id: NodeId) -> &VersionNode {
        &self.nodes[id as usize]
    }

    pub fn edge(&self, id: EdgeId) -> &Edge {
        &self.edges[id as usize]
    }

    pub fn action(&self, idx: u32) -> &str {
        &self.actions[idx as usize]
    }

    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    pub fn entity_id(&self, name: &str) -> Option<u64> {
        self.entity_ids.get(name).copied()
    }

    pub fn entity_name(&self, iid: u64) -> Option<&str> {
        self.entities.get(iid as usize).map(|e| e.name.as_str())
    }

    /// Nodes of one entity in key order.
    pub fn versions(&self, iid: u64) -> &[NodeId] {
        self.entities.get(iid as usize).map(|e| e.versions.as_slice()).unwrap_or(&[])
    }

    pub fn lookup(&self, r: NodeRef) -> Option<NodeId> {
        let vs = self.versions(r.entity);
        let i = vs.partition_point(|&v| self.nodes[v as usize].key < r.key);
        vs.get(i).copied().filter(|&v| self.nodes[v as usize].key == r.key)
    }

    pub fn tree_count(&self) -> usize {
        self.trees.len()
    }

    pub fn tree_root(&self, tree: u32) -> NodeId {
        self.trees[tree as usize]
    }

    pub fn terminal_count(&self) -> usize {
        self.edges.iter().filter(|e| e.detached).count()
    }

    pub fn max_depth(&self) -> u32 {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    pub fn record(&self, id: NodeId) -> NodeRecord {
        let n = self.node(id);
        NodeRecord { node: n.node_ref(), event_index: n.event_index, flags: n.flags, pi_in: n.pi_in, pi_out: n.pi_out }
    }

    pub fn leaf_digest(&self, id: NodeId) -> Digest {
        node_leaf_digest(&self.record(id))
    }

    /// Encoding of `e`; with `as_terminal` the kind carries the terminal flag.
    pub fn encode(&self, e: EdgeId, as_terminal: bool) -> Vec<u8> {
        let ed = self.edge(e);
        let kind = if as_terminal { ed.kind | edge_kind::TO_TERMINAL } else { ed.kind };
        encode_edge_ref(self.node(ed.src).node_ref(), self.node(ed.dst).node_ref(), kind, self.action(ed.action), &ed.payload)
    }

    fn intern_action(&mut self, a: &str) -> u32 {
        if let Some(&i) = self.action_ids.get(a) {
            return i;
        }
        let i = self.actions.len() as u32;
        self.actions.push(a.to_string());
        self.action_ids.insert(a.to_string(), i);
        i
    }

    fn intern_entity(&mut self, name: &str) -> u64 {
        if let Some(&i) = self.entity_ids.get(name) {
            return i;
        }
        let i = self.entities.len() as u64;
        self.entities.push(EntityState { name: name.to_string(), versions: vec![] });
        self.entity_ids.insert(name.to_string(), i);
        i
    }

    fn push_node(&mut self, entity: u64, ts: u64, flags: u8, pi_in: MsetDigest) -> NodeId {
        let seq = self.entities[entity as usize].versions.len() as u32;
        let id = self.nodes.len() as NodeId;
        self.nodes.push(VersionNode {
            entity,
            key: TimestampKey::new(ts, seq),
            event_index: self.events,
            flags,
            pi_in,
            pi_out: mset_empty(),
            tree: 0,
            depth: 0,
            in_edges: vec![],
            out_edges: vec![],
        });
        self.entities[entity as usize].versions.push(id);
        id
    }

    fn push_edge(&mut self, kind: u8, src: NodeId, dst: NodeId, action: u32, payload: &[u8]) -> EdgeId {
        let id = self.edges.len() as EdgeId;
        self.edges.push(Edge { kind, src, dst, action, payload: payload.to_vec(), detached: false });
        self.nodes[src as usize].out_edges.push(id);
        self.nodes[dst as usize].in_edges.push(id);
        id
    }

    fn new_tree(&mut self, root: NodeId) -> u32 {
        self.trees.push(root);
        (self.trees.len() - 1) as u32
    }

    pub fn record_event(&mut self, ev: &EventRecord) -> Result<RecordOutcome> {
        if let Some(last) = self.last_ts {
            if ev.ts < last {
                return Err(Error::ClockRegression { ts: ev.ts, last });
            }
        }
        if ev.src.is_empty() || ev.dst.is_empty() {
            return Err(Error::Config("entity names must be non-empty".into()));
        }
        let action = self.intern_action(&ev.action);
        let payload = ev.payload.as_deref().unwrap_or(&[]);
        let mut created = Vec::with_capacity(2);

        let src_e = self.intern_entity(&ev.src);
        let s = match self.entities[src_e as usize].versions.last() {
            Some(&v) => v,
            None => {
                let v = self.push_node(src_e, ev.ts, node_flags::ENTRY, mset_empty());
                let t = self.new_tree(v);
                self.nodes[v as usize].tree = t;
                created.push(v);
                v
            }
        };
        let dst_e = self.intern_entity(&ev.dst);
        let p = if dst_e == src_e { None } else { self.entities[dst_e as usize].versions.last().copied() };

        let n = self.push_node(dst_e, ev.ts, 0, mset_empty());
        created.push(n);
        let dep = self.push_edge(edge_kind::DEPENDENCY, s, n, action, payload);
        let temporal = p.map(|p| self.push_edge(edge_kind::TEMPORAL, p, n, action, payload));

        let mut pi_in = mset_empty().add(&path_element(&self.encode(dep, false), &self.node(s).pi_in));
        if let (Some(t), Some(p)) = (temporal, p) {
            pi_in = pi_in.add(&path_element(&self.encode(t, false), &self.node(p).pi_in));
        }
        self.nodes[n as usize].pi_in = pi_in;

        let mut old: HashMap<NodeId, MsetDigest> = HashMap::new();
        let mut heap = BinaryHeap::new();
        let empty = mset_empty();

        match self.mode {
            Mode::Unsegmented => {
                self.touch(s, &mut old, &mut heap);
                let el = path_element(&self.encode(dep, false), &empty);
                self.nodes[s as usize].pi_out = self.nodes[s as usize].pi_out.add(&el);
                if let (Some(t), Some(p)) = (temporal, p) {
                    self.touch(p, &mut old, &mut heap);
                    let el = path_element(&self.encode(t, false), &empty);
                    self.nodes[p as usize].pi_out = self.nodes[p as usize].pi_out.add(&el);
                }
            }
            Mode::Segmented(l) => {
                if let (Some(t), Some(p)) = (temporal, p) {
                    self.edges[t as usize].detached = true;
                    self.touch(p, &mut old, &mut heap);
                    let el = path_element(&self.encode(t, true), &empty);
                    self.nodes[p as usize].pi_out = self.nodes[p as usize].pi_out.add(&el);
                }
                let sd = self.node(s).depth;
                if sd < l {
                    let tree = self.node(s).tree;
                    let nn = &mut self.nodes[n as usize];
                    nn.tree = tree;
                    nn.depth = sd + 1;
                } else {
                    // Move s out of its tree; a terminal replaces it under its parent q.
                    let e_qs = self.node(s).in_edges[0];
                    let q = self.edge(e_qs).src;
                    let s_cur = self.node(s).pi_out;
                    self.touch(q, &mut old, &mut heap);
                    let rm = path_element(&self.encode(e_qs, false), &s_cur);
                    let add = path_element(&self.encode(e_qs, true), &empty);
                    self.nodes[q as usize].pi_out = self.nodes[q as usize].pi_out.sub(&rm).add(&add);
                    self.edges[e_qs as usize].detached = true;
                    let tree = self.new_tree(s);
                    let sn = &mut self.nodes[s as usize];
                    sn.tree = tree;
                    sn.depth = 0;
                    let nn = &mut self.nodes[n as usize];
                    nn.tree = tree;
                    nn.depth = 1;
                }
                self.touch(s, &mut old, &mut heap);
                let el = path_element(&self.encode(dep, false), &empty);
                self.nodes[s as usize].pi_out = self.nodes[s as usize].pi_out.add(&el);
            }
        }

        // Children have larger ids than parents, so a max-heap visits each
        // touched node once, after all of its touched descendants.
        while let Some(x) = heap.pop() {
            let before = old[&x];
            let after = self.node(x).pi_out;
            if before == after {
                continue;
            }
            for i in 0..self.node(x).in_edges.len() {
                let e = self.node(x).in_edges[i];
                if self.edge(e).detached {
                    continue;
                }
                let y = self.edge(e).src;
                self.touch(y, &mut old, &mut heap);
                let enc = self.encode(e, false);
                let py = self.nodes[y as usize].pi_out;
                self.nodes[y as usize].pi_out = py.sub(&path_element(&enc, &before)).add(&path_element(&enc, &after));
            }
        }

        self.last_ts = Some(ev.ts);
        self.events += 1;
        let mut changed: Vec<NodeId> = old.into_keys().collect();
        changed.sort_unstable();
        Ok(RecordOutcome { node: n, created, changed })
    }

    fn touch(&self, id: NodeId, old: &mut HashMap<NodeId, MsetDigest>, heap: &mut BinaryHeap<NodeId>) {
        if let std::collections::hash_map::Entry::Vacant(v) = old.entry(id) {
            v.insert(self.node(id).pi_out);
            heap.push(id);
        }
    }

    /// All nodes with a path to `n` (including `n`) and their in-edges.
    pub fn collect_backward(&self, n: NodeId) -> Result<(Vec<NodeId>, Vec<EdgeId>)> {
        self.check(n)?;
        let mut seen = HashSet::from([n]);
        let mut stack = vec![n];
        let mut edges = Vec::new();
        while let Some(x) = stack.pop() {
            for &e in &self.node(x).in_edges {
                edges.push(e);
                let s = self.edge(e).src;
                if seen.insert(s) {
                    stack.push(s);
                }
            }
        }
        let mut nodes: Vec<NodeId> = seen.into_iter().collect();
        nodes.sort_unstable();
        edges.sort_unstable();
        Ok((nodes, edges))
    }

    /// Nodes reachable from `n`, including `n`.
    pub fn forward_closure(&self, n: NodeId) -> Result<Vec<NodeId>> {
        self.check(n)?;
        let mut seen = HashSet::from([n]);
        let mut stack = vec![n];
        while let Some(x) = stack.pop() {
            for &e in &self.node(x).out_edges {
                let d = self.edge(e).dst;
                if seen.insert(d) {
                    stack.push(d);
                }
            }
        }
        let mut v: Vec<NodeId> = seen.into_iter().collect();
        v.sort_unstable();
        Ok(v)
    }

    /// Forward component of `n` split by segment. The first segment starts at
    /// `n`; each further segment starts at a node of the component that is
    /// reached only through terminal stubs, in (entity, key) order. Segments
    /// partition the component.
    pub fn collect_forward(&self, n: NodeId) -> Result<Vec<Segment>> {
        let closure = self.forward_closure(n)?;
        let inside: HashSet<NodeId> = closure.iter().copied().collect();
        let mut roots: Vec<NodeId> = closure
            .iter()
            .copied()
            .filter(|&x| {
                x != n && !self.node(x).in_edges.iter().any(|&e| !self.edge(e).detached && inside.contains(&self.edge(e).src))
            })
            .collect();
        roots.sort_by_key(|&x| self.node(x).node_ref());
        let mut out = Vec::with_capacity(roots.len() + 1);
        for entry in std::iter::once(n).chain(roots) {
            let mut seen = HashSet::from([entry]);
            let mut edges = Vec::new();
            let mut stack = vec![entry];
            while let Some(x) = stack.pop() {
                for &e in &self.node(x).out_edges {
                    edges.push(e);
                    let ed = self.edge(e);
                    if !ed.detached && seen.insert(ed.dst) {
                        stack.push(ed.dst);
                    }
                }
            }
            let mut nodes: Vec<NodeId> = seen.into_iter().collect();
            nodes.sort_unstable();
            edges.sort_unstable();
            out.push(Segment { entry, nodes, edges });
        }
        Ok(out)
    }

    fn check(&self, n: NodeId) -> Result<()> {
        if (n as usize) < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::UnknownNode(n.to_string()))
        }
    }
}
