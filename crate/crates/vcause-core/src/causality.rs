//! Causality queries: proof assembly on the cloud side and validation on the
//! administrator side.
//!
//! A bundle carries the matched (point-of-interest) node, its backward
//! component with incoming digests, and its forward component split into
//! segments with outgoing digests. The first forward segment starts at the
//! POI; every later segment starts at a root authenticated against the graph
//! commitment. Verification only uses the bundle and the verification key.

use std::collections::{HashMap, HashSet};

use crate::accumulator::{
    verify_key, verify_key_range, verify_node, Accumulator, KeyProof, KeyRangeProof, NodeAnswer, Relation, TimestampKey,
};
use crate::error::{Error, Result};
use crate::hashcore::{edge_kind, mset_empty, Digest, MsetDigest, PublicKey};
use crate::protocol::Commitment;
use crate::provgraph::{encode_edge_ref, node_leaf_digest, path_element, EdgeId, Graph, NodeId, NodeRecord, NodeRef};
use crate::wire::{Reader, Writer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    Backward,
    Forward,
    Both,
}

impl Direction {
    pub fn backward(self) -> bool {
        matches!(self, Direction::Backward | Direction::Both)
    }

    pub fn forward(self) -> bool {
        matches!(self, Direction::Forward | Direction::Both)
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "backward" => Ok(Direction::Backward),
            "forward" => Ok(Direction::Forward),
            "both" => Ok(Direction::Both),
            _ => Err(Error::Config(format!("unknown direction {s:?}"))),
        }
    }
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Direction::Backward => "backward",
            Direction::Forward => "forward",
            Direction::Both => "both",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CausalityQuery {
    pub entity: String,
    pub relation: Relation,
    pub direction: Direction,
}

impl CausalityQuery {
    pub fn new(entity: &str, relation: Relation, direction: Direction) -> Self {
        CausalityQuery { entity: entity.to_string(), relation, direction }
    }
}

/// An edge as shipped in a component. In a forward component `kind` carries
/// [`edge_kind::TO_TERMINAL`] when the edge ends at a terminal stub.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EdgeRecord {
    pub src: NodeRef,
    pub dst: NodeRef,
    pub kind: u8,
    pub action: String,
    pub payload: Vec<u8>,
}

impl EdgeRecord {
    pub fn encode(&self) -> Vec<u8> {
        encode_edge_ref(self.src, self.dst, self.kind, &self.action, &self.payload)
    }

    pub fn is_terminal(&self) -> bool {
        self.kind & edge_kind::TO_TERMINAL != 0
    }
}

/// A node of a component with its claimed digest: incoming for backward,
/// outgoing for forward.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DigestRecord {
    pub node: NodeRef,
    pub digest: MsetDigest,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Backward {
    pub nodes: Vec<DigestRecord>,
    pub edges: Vec<EdgeRecord>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ForwardSegment {
    pub entry: NodeRef,
    pub nodes: Vec<DigestRecord>,
    pub edges: Vec<EdgeRecord>,
}

/// Accumulator evidence for later segment roots.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RootProof {
    Single { record: NodeRecord, proof: KeyProof },
    /// Consecutive versions of one entity.
    Run { records: Vec<NodeRecord>, proof: KeyRangeProof },
}

impl RootProof {
    pub fn records(&self) -> &[NodeRecord] {
        match self {
            RootProof::Single { record, .. } => std::slice::from_ref(record),
            RootProof::Run { records, .. } => records,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Forward {
    pub segments: Vec<ForwardSegment>,
    pub roots: Vec<RootProof>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProofBundle {
    pub query: CausalityQuery,
    pub commitment: Commitment,
    pub poi: NodeAnswer,
    pub poi_node: Option<NodeRecord>,
    pub backward: Option<Backward>,
    pub forward: Option<Forward>,
}

impl ProofBundle {
    /// Backward nodes, then the union of forward segment nodes.
    pub fn component_nodes(&self) -> (Vec<NodeRef>, Vec<NodeRef>) {
        let b = self.backward.as_ref().map(|b| b.nodes.iter().map(|r| r.node).collect()).unwrap_or_default();
        let mut f: Vec<NodeRef> = self
            .forward
            .as_ref()
            .map(|f| f.segments.iter().flat_map(|s| s.nodes.iter().map(|r| r.node)).collect())
            .unwrap_or_default();
        f.sort_unstable();
        (b, f)
    }

    pub fn edge_count(&self) -> (usize, usize) {
        let b = self.backward.as_ref().map_or(0, |b| b.edges.len());
        let f = self.forward.as_ref().map_or(0, |f| f.segments.iter().map(|s| s.edges.len()).sum());
        (b, f)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct VerifyReport {
    pub commitment_ok: bool,
    pub poi_ok: bool,
    pub backward_ok: bool,
    pub forward_ok: bool,
    /// The query has no matching node and the absence proof verified.
    pub provably_empty: bool,
    pub first_failure: Option<String>,
}

impl VerifyReport {
    pub fn accepted(&self) -> bool {
        self.commitment_ok && self.poi_ok && self.backward_ok && self.forward_ok && self.first_failure.is_none()
    }

    pub fn fail(mut self, site: &str, msg: impl std::fmt::Display) -> Self {
        self.first_failure = Some(format!("{site}: {msg}"));
        self
    }
}

fn edge_record(g: &Graph, e: EdgeId, terminal: bool) -> EdgeRecord {
    let ed = g.edge(e);
    EdgeRecord {
        src: g.node(ed.src).node_ref(),
        dst: g.node(ed.dst).node_ref(),
        kind: if terminal { ed.kind | edge_kind::TO_TERMINAL } else { ed.kind },
        action: g.action(ed.action).to_string(),
        payload: ed.payload.clone(),
    }
}

fn sorted_records(g: &Graph, ids: &[NodeId], digest: impl Fn(NodeId) -> MsetDigest) -> Vec<DigestRecord> {
    let mut v: Vec<DigestRecord> = ids.iter().map(|&i| DigestRecord { node: g.node(i).node_ref(), digest: digest(i) }).collect();
    v.sort_by_key(|r| r.node);
    v
}

/// Builds the proof bundle for `q` against the committed state. `g` and `acc`
/// must be in the state that `commitment` signs.
pub fn analyze(g: &Graph, acc: &Accumulator, commitment: &Commitment, q: &CausalityQuery) -> Result<ProofBundle> {
    if acc.committed_roots() != Some((commitment.root, commitment.registry_digest)) {
        return Err(Error::RootMismatch(commitment.epoch));
    }
    let poi = acc.prove_node(&q.entity, q.relation)?;
    let mut bundle = ProofBundle {
        query: q.clone(),
        commitment: commitment.clone(),
        poi,
        poi_node: None,
        backward: None,
        forward: None,
    };
    if !bundle.poi.found {
        return Ok(bundle);
    }
    let r = NodeRef {
        entity: bundle.poi.iid().ok_or(Error::NotCommitted)?,
        key: bundle.poi.key.ok_or(Error::NotCommitted)?,
    };
    let n = g.lookup(r).ok_or_else(|| Error::UnknownNode(format!("{}@{}", r.entity, r.key)))?;
    bundle.poi_node = Some(g.record(n));

    if q.direction.backward() {
        let (nodes, edges) = g.collect_backward(n)?;
        let mut edges: Vec<EdgeRecord> = edges.iter().map(|&e| edge_record(g, e, false)).collect();
        edges.sort();
        bundle.backward = Some(Backward { nodes: sorted_records(g, &nodes, |i| g.node(i).pi_in), edges });
    }
    if q.direction.forward() {
        let segs = g.collect_forward(n)?;
        let segments = segs
            .iter()
            .map(|s| {
                let mut edges: Vec<EdgeRecord> = s.edges.iter().map(|&e| edge_record(g, e, g.edge(e).detached)).collect();
                edges.sort();
                ForwardSegment {
                    entry: g.node(s.entry).node_ref(),
                    nodes: sorted_records(g, &s.nodes, |i| g.node(i).pi_out),
                    edges,
                }
            })
            .collect();
        let roots: Vec<NodeId> = segs[1..].iter().map(|s| s.entry).collect();
        bundle.forward = Some(Forward { segments, roots: root_proofs(g, acc, &roots)? });
    }
    Ok(bundle)
}

/// Groups roots (sorted by address) into runs of consecutive versions of one
/// entity; runs of two or more share a range proof.
fn root_proofs(g: &Graph, acc: &Accumulator, roots: &[NodeId]) -> Result<Vec<RootProof>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < roots.len() {
        let first = g.node(roots[i]).node_ref();
        let mut j = i + 1;
        while j < roots.len() {
            let prev = g.node(roots[j - 1]).node_ref();
            let cur = g.node(roots[j]).node_ref();
            if cur.entity != first.entity || cur.key.seq != prev.key.seq + 1 {
                break;
            }
            j += 1;
        }
        let records: Vec<NodeRecord> = roots[i..j].iter().map(|&x| g.record(x)).collect();
        if records.len() == 1 {
            let record = records.into_iter().next().unwrap();
            let proof = acc.prove_key(first.entity, first.key)?;
            out.push(RootProof::Single { record, proof });
        } else {
            let last = records.last().unwrap().node.key;
            let proof = acc.prove_key_range(first.entity, first.key, last)?;
            out.push(RootProof::Run { records, proof });
        }
        i = j;
    }
    Ok(out)
}

// Verification.

/// For each node, the edges folded into its digest: encoding and the node whose
/// digest follows it, or `None` for a terminal stub.
type Adjacency = HashMap<NodeRef, Vec<(Vec<u8>, Option<NodeRef>)>>;

enum Mark {
    Open,
    Done(MsetDigest),
}

struct Fold {
    digest: MsetDigest,
    /// Nodes finished by this call.
    fresh: Vec<NodeRef>,
    /// The walk reached a node finished by an earlier call.
    hit_old: bool,
}

/// Post-order digest recomputation from `start`. `None` on a cycle.
fn fold(adj: &Adjacency, start: NodeRef, memo: &mut HashMap<NodeRef, Mark>) -> Option<Fold> {
    let mut out = Fold { digest: mset_empty(), fresh: vec![], hit_old: false };
    let mut fresh: HashSet<NodeRef> = HashSet::new();
    match memo.get(&start) {
        Some(Mark::Done(d)) => {
            out.digest = *d;
            out.hit_old = true;
            return Some(out);
        }
        Some(Mark::Open) => return None,
        None => {}
    }
    let none = Vec::new();
    memo.insert(start, Mark::Open);
    let mut stack: Vec<(NodeRef, usize)> = vec![(start, 0)];
    while let Some(&(x, i)) = stack.last() {
        let kids = adj.get(&x).unwrap_or(&none);
        if i < kids.len() {
            stack.last_mut().unwrap().1 += 1;
            if let Some(c) = kids[i].1 {
                match memo.get(&c) {
                    Some(Mark::Open) => return None,
                    Some(Mark::Done(_)) => {
                        if !fresh.contains(&c) {
                            out.hit_old = true;
                        }
                    }
                    None => {
                        memo.insert(c, Mark::Open);
                        stack.push((c, 0));
                    }
                }
            }
            continue;
        }
        let mut d = mset_empty();
        for (enc, c) in kids {
            let cd = match c {
                Some(c) => match memo.get(c) {
                    Some(Mark::Done(cd)) => *cd,
                    _ => return None,
                },
                None => mset_empty(),
            };
            d = d.add(&path_element(enc, &cd));
        }
        memo.insert(x, Mark::Done(d));
        out.fresh.push(x);
        fresh.insert(x);
        stack.pop();
    }
    out.digest = match memo.get(&start) {
        Some(Mark::Done(d)) => *d,
        _ => return None,
    };
    Some(out)
}

fn strictly_sorted<T: Ord>(v: impl IntoIterator<Item = T>) -> bool {
    let mut it = v.into_iter();
    let Some(mut prev) = it.next() else { return true };
    for x in it {
        if x <= prev {
            return false;
        }
        prev = x;
    }
    true
}

type Check = std::result::Result<(), String>;

/// Recomputes the incoming digest of `poi` from the backward component.
pub fn check_backward(poi: &NodeRecord, bw: &Backward) -> Check {
    if !strictly_sorted(bw.nodes.iter().map(|r| r.node)) {
        return Err("nodes not strictly sorted".into());
    }
    if !strictly_sorted(bw.edges.iter()) {
        return Err("edges not strictly sorted".into());
    }
    let mut adj: Adjacency = HashMap::new();
    for e in &bw.edges {
        if e.kind != edge_kind::TEMPORAL && e.kind != edge_kind::DEPENDENCY {
            return Err(format!("edge kind {:#x} not allowed", e.kind));
        }
        adj.entry(e.dst).or_default().push((e.encode(), Some(e.src)));
    }
    let mut memo = HashMap::new();
    let f = fold(&adj, poi.node, &mut memo).ok_or("cycle in components")?;
    if f.fresh.len() != bw.nodes.len() {
        return Err(format!("{} nodes reached, {} supplied", f.fresh.len(), bw.nodes.len()));
    }
    for r in &bw.nodes {
        match memo.get(&r.node) {
            Some(Mark::Done(d)) if *d == r.digest => {}
            Some(Mark::Done(_)) => return Err(format!("incoming digest mismatch at {}@{}", r.node.entity, r.node.key)),
            _ => return Err(format!("node {}@{} not reached", r.node.entity, r.node.key)),
        }
    }
    if let Some(e) = bw.edges.iter().find(|e| !memo.contains_key(&e.dst)) {
        return Err(format!("edge into unreached node {}@{}", e.dst.entity, e.dst.key));
    }
    if f.digest != poi.pi_in {
        return Err("incoming digest of the queried node does not match".into());
    }
    Ok(())
}

pub fn verify_backward(poi: &NodeRecord, bw: &Backward) -> bool {
    check_backward(poi, bw).is_ok()
}

/// Authenticates root proofs; returns the records in order.
fn check_roots(root: &Digest, roots: &[RootProof]) -> std::result::Result<Vec<NodeRecord>, String> {
    let mut out = Vec::new();
    for (i, rp) in roots.iter().enumerate() {
        match rp {
            RootProof::Single { record, proof } => {
                let leaf = verify_key(root, record.node.entity, record.node.key, proof);
                if leaf != Some(node_leaf_digest(record)) {
                    return Err(format!("root proof {i} does not verify"));
                }
            }
            RootProof::Run { records, proof } => {
                if records.len() < 2 {
                    return Err(format!("root run {i} is shorter than two"));
                }
                let entity = records[0].node.entity;
                if records.iter().any(|r| r.node.entity != entity) || !strictly_sorted(records.iter().map(|r| r.node.key)) {
                    return Err(format!("root run {i} is not one entity in key order"));
                }
                let lo = records[0].node.key;
                let hi = records[records.len() - 1].node.key;
                let leaves = verify_key_range(root, entity, lo, hi, proof).ok_or(format!("root run {i} does not verify"))?;
                let want: Vec<(TimestampKey, Digest)> = records.iter().map(|r| (r.node.key, node_leaf_digest(r))).collect();
                if leaves != want {
                    return Err(format!("root run {i} does not match its leaves"));
                }
            }
        }
        out.extend(rp.records().iter().cloned());
    }
    Ok(out)
}

/// Recomputes outgoing digests of the POI and every segment root.
pub fn check_forward(poi: &NodeRecord, root: &Digest, fw: &Forward) -> Check {
    let Some(first) = fw.segments.first() else { return Err("no segments".into()) };
    if first.entry != poi.node {
        return Err("first segment does not start at the queried node".into());
    }
    let entries: Vec<NodeRef> = fw.segments[1..].iter().map(|s| s.entry).collect();
    if !strictly_sorted(entries.iter()) {
        return Err("segment roots not strictly sorted".into());
    }
    let root_records = check_roots(root, &fw.roots)?;
    if root_records.len() != entries.len() || root_records.iter().zip(&entries).any(|(r, e)| r.node != *e) {
        return Err("root proofs do not cover the segment roots".into());
    }

    let mut adj: Adjacency = HashMap::new();
    let mut claims: HashMap<NodeRef, MsetDigest> = HashMap::new();
    let mut terminals: HashSet<NodeRef> = HashSet::new();
    let mut non_terminal_targets: HashSet<NodeRef> = HashSet::new();
    for (i, s) in fw.segments.iter().enumerate() {
        if !strictly_sorted(s.nodes.iter().map(|r| r.node)) || !strictly_sorted(s.edges.iter()) {
            return Err(format!("segment {i} not strictly sorted"));
        }
        for r in &s.nodes {
            if claims.insert(r.node, r.digest).is_some() {
                return Err(format!("node {}@{} listed twice", r.node.entity, r.node.key));
            }
        }
        for e in &s.edges {
            if s.nodes.binary_search_by_key(&e.src, |r| r.node).is_err() {
                return Err(format!("segment {i} has an edge from outside the segment"));
            }
            let base = e.kind & !edge_kind::TO_TERMINAL;
            if base != edge_kind::TEMPORAL && base != edge_kind::DEPENDENCY {
                return Err(format!("edge kind {:#x} not allowed", e.kind));
            }
            let child = if e.is_terminal() {
                terminals.insert(e.dst);
                None
            } else {
                non_terminal_targets.insert(e.dst);
                Some(e.dst)
            };
            adj.entry(e.src).or_default().push((e.encode(), child));
        }
    }

    let mut memo = HashMap::new();
    for (i, s) in fw.segments.iter().enumerate() {
        let f = fold(&adj, s.entry, &mut memo).ok_or(format!("cycle in segment {i}"))?;
        if f.hit_old {
            return Err(format!("segment {i} overlaps an earlier segment"));
        }
        let mut fresh = f.fresh;
        fresh.sort_unstable();
        if fresh.len() != s.nodes.len() || fresh.iter().zip(&s.nodes).any(|(a, b)| *a != b.node) {
            return Err(format!("segment {i} node set does not match its edges"));
        }
    }
    for (n, d) in &claims {
        match memo.get(n) {
            Some(Mark::Done(x)) if x == d => {}
            _ => return Err(format!("outgoing digest mismatch at {}@{}", n.entity, n.key)),
        }
    }
    let authenticated = std::iter::once(poi).chain(root_records.iter());
    for r in authenticated {
        if claims.get(&r.node) != Some(&r.pi_out) {
            return Err(format!("committed outgoing digest mismatch at {}@{}", r.node.entity, r.node.key));
        }
    }
    if let Some(t) = terminals.iter().find(|t| !claims.contains_key(t)) {
        return Err(format!("terminal target {}@{} missing", t.entity, t.key));
    }
    for e in &entries {
        if !terminals.contains(e) || non_terminal_targets.contains(e) {
            return Err(format!("segment root {}@{} is not reached only through terminals", e.entity, e.key));
        }
    }
    Ok(())
}

pub fn verify_forward(poi: &NodeRecord, root: &Digest, fw: &Forward) -> bool {
    check_forward(poi, root, fw).is_ok()
}

/// Administrator-side validation in order: commitment, queried node, backward,
/// forward. Stops at the first failure.
pub fn verify_bundle(vk: &PublicKey, q: &CausalityQuery, b: &ProofBundle) -> VerifyReport {
    let mut rep = VerifyReport::default();
    if b.query != *q {
        return rep.fail("query", "bundle answers a different query");
    }
    if !b.commitment.verify(vk) {
        return rep.fail("commitment", "signature does not verify");
    }
    rep.commitment_ok = true;
    let c = &b.commitment;
    if !verify_node(&c.root, &c.registry_digest, &q.entity, q.relation, &b.poi) {
        return rep.fail("poi", "node proof does not verify");
    }
    if !b.poi.found {
        if b.poi_node.is_some() || b.backward.is_some() || b.forward.is_some() {
            return rep.fail("poi", "components attached to an empty answer");
        }
        rep.poi_ok = true;
        rep.backward_ok = true;
        rep.forward_ok = true;
        rep.provably_empty = true;
        return rep;
    }
    let Some(node) = &b.poi_node else { return rep.fail("poi", "missing node record") };
    if Some(node.node.entity) != b.poi.iid()
        || Some(node.node.key) != b.poi.key
        || Some(node_leaf_digest(node)) != b.poi.payload()
    {
        return rep.fail("poi", "node record does not match the proof");
    }
    rep.poi_ok = true;

    match (&b.backward, q.direction.backward()) {
        (Some(bw), true) => {
            if let Err(e) = check_backward(node, bw) {
                return rep.fail("backward", e);
            }
        }
        (None, false) => {}
        (None, true) => return rep.fail("backward", "missing"),
        (Some(_), false) => return rep.fail("backward", "not requested"),
    }
    rep.backward_ok = true;

    match (&b.forward, q.direction.forward()) {
        (Some(fw), true) => {
            if let Err(e) = check_forward(node, &c.root, fw) {
                return rep.fail("forward", e);
            }
        }
        (None, false) => {}
        (None, true) => return rep.fail("forward", "missing"),
        (Some(_), false) => return rep.fail("forward", "not requested"),
    }
    rep.forward_ok = true;
    rep
}

// Wire format.

pub const BUNDLE_MAGIC: &[u8; 4] = b"VCPB";
pub const BUNDLE_VERSION: u8 = 1;
const NODE_REF_LEN: usize = 20;
const DIGEST_RECORD_LEN: usize = NODE_REF_LEN + MsetDigest::LEN;
const NODE_RECORD_LEN: usize = NODE_REF_LEN + 9 + 2 * MsetDigest::LEN;
const EDGE_RECORD_MIN: usize = 1 + 2 * NODE_REF_LEN + 8;

fn write_ref(w: &mut Writer, r: NodeRef) {
    w.u64(r.entity).u64(r.key.ts).u32(r.key.seq);
}

fn read_ref(r: &mut Reader<'_>) -> Result<NodeRef> {
    Ok(NodeRef { entity: r.u64()?, key: TimestampKey::new(r.u64()?, r.u32()?) })
}

fn write_query(w: &mut Writer, q: &CausalityQuery) {
    w.bytes(q.entity.as_bytes());
    match q.relation {
        Relation::Le(t) => w.u8(0).u64(t),
        Relation::Ge(t) => w.u8(1).u64(t),
    };
    w.u8(match q.direction {
        Direction::Backward => 0,
        Direction::Forward => 1,
        Direction::Both => 2,
    });
}

fn read_query(r: &mut Reader<'_>) -> Result<CausalityQuery> {
    let entity = r.string()?;
    let relation = match r.u8()? {
        0 => Relation::Le(r.u64()?),
        1 => Relation::Ge(r.u64()?),
        v => return Err(Error::Decode(format!("invalid relation tag {v}"))),
    };
    let direction = match r.u8()? {
        0 => Direction::Backward,
        1 => Direction::Forward,
        2 => Direction::Both,
        v => return Err(Error::Decode(format!("invalid direction tag {v}"))),
    };
    Ok(CausalityQuery { entity, relation, direction })
}

pub fn write_node_record(w: &mut Writer, n: &NodeRecord) {
    write_ref(w, n.node);
    w.u64(n.event_index).u8(n.flags).mset(&n.pi_in).mset(&n.pi_out);
}

pub fn read_node_record(r: &mut Reader<'_>) -> Result<NodeRecord> {
    Ok(NodeRecord { node: read_ref(r)?, event_index: r.u64()?, flags: r.u8()?, pi_in: r.mset()?, pi_out: r.mset()? })
}

fn write_digests(w: &mut Writer, v: &[DigestRecord]) {
    w.u32(v.len() as u32);
    for d in v {
        write_ref(w, d.node);
        w.mset(&d.digest);
    }
}

fn read_digests(r: &mut Reader<'_>) -> Result<Vec<DigestRecord>> {
    let n = r.count(DIGEST_RECORD_LEN)?;
    (0..n).map(|_| Ok(DigestRecord { node: read_ref(r)?, digest: r.mset()? })).collect()
}

fn write_edges(w: &mut Writer, v: &[EdgeRecord]) {
    w.u32(v.len() as u32);
    for e in v {
        w.u8(e.kind);
        write_ref(w, e.src);
        write_ref(w, e.dst);
        w.bytes(e.action.as_bytes()).bytes(&e.payload);
    }
}

fn read_edges(r: &mut Reader<'_>) -> Result<Vec<EdgeRecord>> {
    let n = r.count(EDGE_RECORD_MIN)?;
    (0..n)
        .map(|_| {
            let kind = r.u8()?;
            let src = read_ref(r)?;
            let dst = read_ref(r)?;
            Ok(EdgeRecord { src, dst, kind, action: r.string()?, payload: r.bytes()?.to_vec() })
        })
        .collect()
}

impl ProofBundle {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.raw(BUNDLE_MAGIC).u8(BUNDLE_VERSION);
        w.section(|w| write_query(w, &self.query));
        w.section(|w| {
            w.raw(&self.commitment.to_bytes());
        });
        w.section(|w| {
            self.poi.write(w);
            match &self.poi_node {
                Some(n) => {
                    w.u8(1);
                    write_node_record(w, n);
                }
                None => {
                    w.u8(0);
                }
            }
        });
        w.section(|w| match &self.backward {
            Some(b) => {
                w.u8(1);
                write_digests(w, &b.nodes);
                write_edges(w, &b.edges);
            }
            None => {
                w.u8(0);
            }
        });
        w.section(|w| match &self.forward {
            Some(f) => {
                w.u8(1).u32(f.segments.len() as u32);
                for s in &f.segments {
                    write_ref(w, s.entry);
                    write_digests(w, &s.nodes);
                    write_edges(w, &s.edges);
                }
                w.u32(f.roots.len() as u32);
                for rp in &f.roots {
                    match rp {
                        RootProof::Single { record, proof } => {
                            w.u8(0);
                            write_node_record(w, record);
                            proof.write(w);
                        }
                        RootProof::Run { records, proof } => {
                            w.u8(1).u32(records.len() as u32);
                            for rec in records {
                                write_node_record(w, rec);
                            }
                            proof.write(w);
                        }
                    }
                }
            }
            None => {
                w.u8(0);
            }
        });
        w.finish()
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        let mut r = Reader::new(b);
        if r.take(4)? != BUNDLE_MAGIC {
            return Err(Error::Decode("not a proof bundle".into()));
        }
        let v = r.u8()?;
        if v != BUNDLE_VERSION {
            return Err(Error::Decode(format!("unsupported bundle version {v}")));
        }
        let query = r.section(read_query)?;
        let commitment = r.section(Commitment::read)?;
        let (poi, poi_node) = r.section(|r| {
            let poi = NodeAnswer::read(r)?;
            let node = if r.bool()? { Some(read_node_record(r)?) } else { None };
            Ok((poi, node))
        })?;
        let backward = r.section(|r| {
            Ok(if r.bool()? { Some(Backward { nodes: read_digests(r)?, edges: read_edges(r)? }) } else { None })
        })?;
        let forward = r.section(|r| {
            if !r.bool()? {
                return Ok(None);
            }
            let n = r.count(NODE_REF_LEN + 8)?;
            let mut segments = Vec::with_capacity(n);
            for _ in 0..n {
                segments.push(ForwardSegment { entry: read_ref(r)?, nodes: read_digests(r)?, edges: read_edges(r)? });
            }
            let n = r.count(1 + NODE_RECORD_LEN)?;
            let mut roots = Vec::with_capacity(n);
            for _ in 0..n {
                roots.push(match r.u8()? {
                    0 => RootProof::Single { record: read_node_record(r)?, proof: KeyProof::read(r)? },
                    1 => {
                        let m = r.count(NODE_RECORD_LEN)?;
                        let records = (0..m).map(|_| read_node_record(r)).collect::<Result<Vec<_>>>()?;
                        RootProof::Run { records, proof: KeyRangeProof::read(r)? }
                    }
                    t => return Err(Error::Decode(format!("invalid root proof tag {t}"))),
                });
            }
            Ok(Some(Forward { segments, roots }))
        })?;
        r.end()?;
        Ok(ProofBundle { query, commitment, poi, poi_node, backward, forward })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hashcore::SecretKey;
    use crate::protocol::{Endpoint, EndpointConfig};
    use crate::provgraph::{EventRecord, Mode};
    use crate::tamper::{mutate, Donors, MutationClass};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn ev(src: &str, action: &str, dst: &str, ts: u64) -> EventRecord {
        EventRecord::new(src, action, dst, ts)
    }

    fn key() -> SecretKey {
        SecretKey::from_seed([7; 32])
    }

    fn endpoint(mode: Mode, evs: &[EventRecord]) -> Endpoint {
        let cfg = EndpointConfig { id: "ep".into(), mode, commit_interval: u64::MAX };
        let mut e = Endpoint::new(cfg, key()).unwrap();
        for x in evs {
            e.logger_ingest(x).unwrap();
        }
        e.logger_commit().unwrap();
        e
    }

    fn random_stream(seed: u64, n: usize, entities: usize) -> Vec<EventRecord> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut ts = 1;
        (0..n)
            .map(|_| {
                ts += rng.gen_range(0..3);
                let s = rng.gen_range(0..entities);
                let d = if rng.gen_bool(0.05) { s } else { rng.gen_range(0..entities) };
                let mut e = ev(&format!("e{s}"), ["read", "write"][rng.gen_range(0..2)], &format!("e{d}"), ts);
                if rng.gen_bool(0.2) {
                    e.payload = Some(vec![rng.gen()]);
                }
                e
            })
            .collect()
    }

    /// Reachability over the raw edge list.
    fn bfs(g: &Graph, start: NodeRef, forward: bool) -> Vec<NodeRef> {
        let mut adj: HashMap<NodeId, Vec<NodeId>> = HashMap::new();
        for e in g.edges() {
            let (a, b) = if forward { (e.src, e.dst) } else { (e.dst, e.src) };
            adj.entry(a).or_default().push(b);
        }
        let s = g.lookup(start).unwrap();
        let mut seen = HashSet::from([s]);
        let mut queue = std::collections::VecDeque::from([s]);
        while let Some(x) = queue.pop_front() {
            for &y in adj.get(&x).into_iter().flatten() {
                if seen.insert(y) {
                    queue.push_back(y);
                }
            }
        }
        let mut v: Vec<NodeRef> = seen.into_iter().map(|i| g.node(i).node_ref()).collect();
        v.sort_unstable();
        v
    }

    fn check(e: &Endpoint, q: &CausalityQuery) -> ProofBundle {
        let b = e.analyze(q).unwrap();
        let rep = verify_bundle(&e.public_key(), q, &b);
        assert!(rep.accepted(), "{q:?}: {rep:?}");
        assert_eq!(ProofBundle::from_bytes(&b.to_bytes()).unwrap(), b);
        b
    }

    #[test]
    fn honest_bundles_verify_and_match_reachability() {
        let evs = random_stream(3, 160, 12);
        let mut runs = 0;
        for mode in [Mode::Segmented(1), Mode::Segmented(2), Mode::Unsegmented] {
            let e = endpoint(mode, &evs);
            let g = e.replica().graph();
            for n in g.nodes() {
                let name = g.entity_name(n.entity).unwrap();
                for rel in [Relation::Le(n.key.ts), Relation::Ge(n.key.ts)] {
                    let b = check(&e, &CausalityQuery::new(name, rel, Direction::Both));
                    let poi = b.poi_node.as_ref().unwrap().node;
                    assert_eq!(poi.entity, n.entity);
                    assert!(rel.matches(poi.key));
                    let (bw, fw) = b.component_nodes();
                    assert_eq!(bw, bfs(g, poi, false));
                    assert_eq!(fw, bfs(g, poi, true));
                    let (be, fe) = b.edge_count();
                    let oracle_edges = |set: &[NodeRef], fwd: bool| {
                        g.edges()
                            .iter()
                            .filter(|x| set.contains(&g.node(if fwd { x.src } else { x.dst }).node_ref()))
                            .count()
                    };
                    assert_eq!(be, oracle_edges(&bw, false));
                    assert_eq!(fe, oracle_edges(&fw, true));
                    if let Some(f) = &b.forward {
                        runs += f.roots.iter().filter(|r| matches!(r, RootProof::Run { .. })).count();
                    }
                }
            }
        }
        assert!(runs > 0, "no batched root proof exercised");
    }

    fn fig7_events() -> Vec<EventRecord> {
        vec![
            ev("0", "w", "1", 1),
            ev("1", "w", "2", 2),
            ev("2", "w", "3", 3),
            ev("0", "w", "1", 4),
            ev("1", "w", "2", 5),
            ev("2", "w", "4", 6),
        ]
    }

    #[test]
    fn query_entity_one_at_t4() {
        let e = endpoint(Mode::Segmented(2), &fig7_events());
        let b = check(&e, &CausalityQuery::new("1", Relation::Le(4), Direction::Both));
        let poi = b.poi_node.unwrap();
        assert_eq!(poi.node.key, TimestampKey::new(4, 1));
        assert_eq!(e.replica().graph().entity_name(poi.node.entity), Some("1"));
        let g = e.replica().graph();
        assert_eq!(poi.pi_out, g.node(g.lookup(poi.node).unwrap()).pi_out);
    }

    #[test]
    fn forward_validation_covers_later_roots() {
        let e = endpoint(Mode::Segmented(2), &fig7_events());
        let b = check(&e, &CausalityQuery::new("0", Relation::Le(1), Direction::Forward));
        let f = b.forward.unwrap();
        let g = e.replica().graph();
        let name = |r: NodeRef| (g.entity_name(r.entity).unwrap().to_string(), r.key.ts);
        let entries: Vec<_> = f.segments.iter().map(|s| name(s.entry)).collect();
        assert_eq!(entries, vec![("0".into(), 1), ("2".into(), 2), ("2".into(), 5)]);
        let roots: Vec<_> = f.roots.iter().flat_map(|r| r.records().iter().map(|x| name(x.node))).collect();
        assert_eq!(roots, entries[1..].to_vec());
    }

    #[test]
    fn exit_node_forward_is_single_segment() {
        let e = endpoint(Mode::default(), &[ev("a", "w", "b", 1)]);
        let b = check(&e, &CausalityQuery::new("b", Relation::Le(1), Direction::Forward));
        let f = b.forward.unwrap();
        assert_eq!(f.segments.len(), 1);
        assert_eq!((f.segments[0].nodes.len(), f.segments[0].edges.len()), (1, 0));
        assert!(f.roots.is_empty());
    }

    #[test]
    fn empty_answers_are_provable() {
        let e = endpoint(Mode::default(), &[ev("a", "w", "b", 5)]);
        for q in [
            CausalityQuery::new("zzz", Relation::Le(9), Direction::Both),
            CausalityQuery::new("b", Relation::Le(4), Direction::Backward),
            CausalityQuery::new("b", Relation::Ge(6), Direction::Forward),
        ] {
            let b = e.analyze(&q).unwrap();
            let rep = verify_bundle(&e.public_key(), &q, &b);
            assert!(rep.accepted() && rep.provably_empty, "{q:?} {rep:?}");
            let mut forged = b.clone();
            forged.backward = Some(Backward::default());
            assert!(!verify_bundle(&e.public_key(), &q, &forged).accepted());
        }
    }

    #[test]
    fn wrong_key_or_query_is_rejected() {
        let e = endpoint(Mode::default(), &fig7_events());
        let q = CausalityQuery::new("1", Relation::Le(4), Direction::Both);
        let b = e.analyze(&q).unwrap();
        let other = SecretKey::from_seed([8; 32]).public();
        let rep = verify_bundle(&other, &q, &b);
        assert!(!rep.commitment_ok);
        assert!(rep.first_failure.unwrap().starts_with("commitment"));
        let q2 = CausalityQuery::new("1", Relation::Le(5), Direction::Both);
        assert!(!verify_bundle(&e.public_key(), &q2, &b).accepted());
        let q3 = CausalityQuery { direction: Direction::Backward, ..q.clone() };
        let mut extra = b.clone();
        extra.query = q3.clone();
        assert_eq!(verify_bundle(&e.public_key(), &q3, &extra).first_failure.as_deref(), Some("forward: not requested"));
    }

    #[test]
    fn stale_commitment_with_new_components_fails_at_poi() {
        let evs = fig7_events();
        let mut e = endpoint(Mode::default(), &evs[..3]);
        let old = e.latest().unwrap().clone();
        for x in &evs[3..] {
            e.logger_ingest(x).unwrap();
        }
        e.logger_commit().unwrap();
        let q = CausalityQuery::new("1", Relation::Le(4), Direction::Both);
        let mut b = e.analyze(&q).unwrap();
        b.commitment = old;
        let rep = verify_bundle(&e.public_key(), &q, &b);
        assert!(rep.commitment_ok && !rep.poi_ok);
    }

    #[test]
    fn cyclic_components_are_rejected() {
        let poi = NodeRecord {
            node: NodeRef { entity: 0, key: TimestampKey::new(1, 0) },
            event_index: 0,
            flags: 0,
            pi_in: mset_empty(),
            pi_out: mset_empty(),
        };
        let other = NodeRef { entity: 1, key: TimestampKey::new(1, 0) };
        let edge = |src, dst| EdgeRecord { src, dst, kind: edge_kind::DEPENDENCY, action: "w".into(), payload: vec![] };
        let mut edges = vec![edge(poi.node, other), edge(other, poi.node)];
        edges.sort();
        let bw = Backward {
            nodes: vec![DigestRecord { node: poi.node, digest: mset_empty() }, DigestRecord { node: other, digest: mset_empty() }],
            edges: edges.clone(),
        };
        assert_eq!(check_backward(&poi, &bw), Err("cycle in components".into()));
        let seg = ForwardSegment { entry: poi.node, nodes: bw.nodes.clone(), edges };
        let fw = Forward { segments: vec![seg], roots: vec![] };
        assert!(check_forward(&poi, &Digest::default(), &fw).unwrap_err().contains("cycle"));
    }

    fn corpus_setup() -> (Endpoint, Vec<ProofBundle>, Vec<ProofBundle>) {
        let evs = random_stream(11, 200, 10);
        let mut e = endpoint(Mode::Segmented(1), &evs[..120]);
        let stale_queries: Vec<CausalityQuery> = (0..5)
            .map(|i| CausalityQuery::new(&format!("e{i}"), Relation::Le(1000), Direction::Both))
            .collect();
        let stale: Vec<ProofBundle> = stale_queries.iter().filter_map(|q| e.analyze(q).ok()).collect();
        for x in &evs[120..] {
            e.logger_ingest(x).unwrap();
        }
        e.logger_commit().unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let bundles: Vec<ProofBundle> = (0..20)
            .map(|_| {
                let n = &e.replica().graph().nodes()[rng.gen_range(0..e.replica().graph().nodes().len())];
                let name = e.replica().graph().entity_name(n.entity).unwrap().to_string();
                let dir = [Direction::Backward, Direction::Forward, Direction::Both][rng.gen_range(0..3)];
                e.analyze(&CausalityQuery::new(&name, Relation::Le(n.key.ts), dir)).unwrap()
            })
            .collect();
        (e, bundles, stale)
    }

    #[test]
    fn every_mutation_class_is_rejected() {
        let (e, bundles, stale) = corpus_setup();
        let old = vec![e.commitments()[0].clone()];
        let donors = Donors { peers: &bundles, stale: &stale, old_commitments: &old };
        let mut admin = crate::protocol::Admin::new();
        admin.add_endpoint("ep", e.public_key());
        admin.observe(e.latest().unwrap());
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        for class in MutationClass::ALL {
            let mut made = 0;
            for _ in 0..400 {
                let b = &bundles[rng.gen_range(0..bundles.len())];
                let Some(m) = mutate(class, b, &donors, &mut rng) else { continue };
                made += 1;
                let rep = admin.admin_verify(&b.query, &m);
                assert!(!rep.accepted(), "{} accepted: {:?}", class.name(), rep);
                assert!(rep.first_failure.is_some());
                if made == 40 {
                    break;
                }
            }
            assert!(made >= 20, "{} produced only {made} mutants", class.name());
        }
    }

    #[test]
    fn every_bundle_byte_is_bound() {
        let e = endpoint(Mode::Segmented(1), &fig7_events());
        let q = CausalityQuery::new("1", Relation::Le(1), Direction::Both);
        let b = check(&e, &q);
        assert!(!b.forward.as_ref().unwrap().roots.is_empty());
        let bytes = b.to_bytes();
        let vk = e.public_key();
        for i in 0..bytes.len() {
            for bit in [0x01u8, 0x80] {
                let mut m = bytes.clone();
                m[i] ^= bit;
                if let Ok(mb) = ProofBundle::from_bytes(&m) {
                    assert!(!verify_bundle(&vk, &q, &mb).accepted(), "byte {i} bit {bit:#x} accepted");
                }
            }
        }
        assert!(ProofBundle::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
