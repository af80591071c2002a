//! Adversarial mutations of proof bundles and of cloud state.
//!
//! Every bundle mutation returns `None` when it would leave the bundle
//! unchanged, so callers can retry with another choice.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::accumulator::TimestampKey;
use crate::causality::{DigestRecord, EdgeRecord, ProofBundle};
use crate::error::{Error, Result};
use crate::hashcore::{edge_kind, MsetDigest};
use crate::protocol::{Commitment, CloudEndpoint};
use crate::provgraph::NodeRef;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MutationClass {
    AddNode,
    DeleteNode,
    ModifyNode,
    AddEdge,
    DeleteEdge,
    ModifyEdge,
    SwapPoi,
    ForgeDigest,
    Splice,
    Rollback,
}

impl MutationClass {
    pub const ALL: [MutationClass; 10] = [
        MutationClass::AddNode,
        MutationClass::DeleteNode,
        MutationClass::ModifyNode,
        MutationClass::AddEdge,
        MutationClass::DeleteEdge,
        MutationClass::ModifyEdge,
        MutationClass::SwapPoi,
        MutationClass::ForgeDigest,
        MutationClass::Splice,
        MutationClass::Rollback,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MutationClass::AddNode => "add-node",
            MutationClass::DeleteNode => "delete-node",
            MutationClass::ModifyNode => "modify-node",
            MutationClass::AddEdge => "add-edge",
            MutationClass::DeleteEdge => "delete-edge",
            MutationClass::ModifyEdge => "modify-edge",
            MutationClass::SwapPoi => "swap-poi",
            MutationClass::ForgeDigest => "forge-digest",
            MutationClass::Splice => "splice",
            MutationClass::Rollback => "rollback",
        }
    }
}

impl std::str::FromStr for MutationClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MutationClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mutation class {s:?}")))
    }
}

/// Material a mutation may draw on besides the target bundle.
#[derive(Clone, Copy, Debug, Default)]
pub struct Donors<'a> {
    /// Honest bundles under the same commitment.
    pub peers: &'a [ProofBundle],
    /// Honest bundles under older commitments of the same endpoint.
    pub stale: &'a [ProofBundle],
    /// Older commitments of the same endpoint.
    pub old_commitments: &'a [Commitment],
}

/// A mutable view of one component section.
struct Section<'a> {
    nodes: &'a mut Vec<DigestRecord>,
    edges: &'a mut Vec<EdgeRecord>,
    forward: bool,
}

fn sections(b: &mut ProofBundle) -> Vec<Section<'_>> {
    let mut out = Vec::new();
    if let Some(bw) = b.backward.as_mut() {
        out.push(Section { nodes: &mut bw.nodes, edges: &mut bw.edges, forward: false });
    }
    if let Some(fw) = b.forward.as_mut() {
        for s in fw.segments.iter_mut() {
            out.push(Section { nodes: &mut s.nodes, edges: &mut s.edges, forward: true });
        }
    }
    out
}

fn pick_section<'a, R: Rng>(b: &'a mut ProofBundle, rng: &mut R, need_edges: bool) -> Option<Section<'a>> {
    let mut s: Vec<Section<'a>> = sections(b).into_iter().filter(|s| !need_edges || !s.edges.is_empty()).collect();
    if s.is_empty() {
        return None;
    }
    let i = rng.gen_range(0..s.len());
    Some(s.swap_remove(i))
}

fn perturb(d: &MsetDigest, rng: &mut impl Rng) -> MsetDigest {
    d.add(&rng.gen::<[u8; 8]>())
}

fn resort(s: &mut Section<'_>) {
    s.nodes.sort_by_key(|r| r.node);
    s.nodes.dedup_by_key(|r| r.node);
    s.edges.sort();
}

fn fresh_ref(s: &Section<'_>, rng: &mut impl Rng) -> NodeRef {
    let base = s.nodes.choose(rng).map(|r| r.node).unwrap_or_default();
    NodeRef { entity: base.entity, key: TimestampKey::new(base.key.ts + rng.gen_range(1..5), base.key.seq + 1000) }
}

fn random_kind(forward: bool, rng: &mut impl Rng) -> u8 {
    let k = if rng.gen_bool(0.5) { edge_kind::DEPENDENCY } else { edge_kind::TEMPORAL };
    if forward && rng.gen_bool(0.3) {
        k | edge_kind::TO_TERMINAL
    } else {
        k
    }
}

/// Applies one mutation of `class` to a copy of `b`.
pub fn mutate<R: Rng>(class: MutationClass, b: &ProofBundle, donors: &Donors<'_>, rng: &mut R) -> Option<ProofBundle> {
    let mut m = b.clone();
    match class {
        MutationClass::AddNode => {
            let mut s = pick_section(&mut m, rng, false)?;
            let r = fresh_ref(&s, rng);
            let digest = s.nodes.choose(rng).map(|x| x.digest).unwrap_or_default();
            if rng.gen_bool(0.5) {
                let other = s.nodes.choose(rng)?.node;
                let (src, dst) = if s.forward { (other, r) } else { (r, other) };
                s.edges.push(EdgeRecord { src, dst, kind: random_kind(s.forward, rng), action: "write".into(), payload: vec![] });
            }
            s.nodes.push(DigestRecord { node: r, digest });
            resort(&mut s);
        }
        MutationClass::DeleteNode => {
            let s = pick_section(&mut m, rng, false)?;
            let i = rng.gen_range(0..s.nodes.len());
            let gone = s.nodes.remove(i).node;
            if rng.gen_bool(0.5) {
                s.edges.retain(|e| e.src != gone && e.dst != gone);
            }
        }
        MutationClass::ModifyNode => {
            let mut s = pick_section(&mut m, rng, false)?;
            let old = s.nodes.choose(rng)?.node;
            let mut new = old;
            match rng.gen_range(0..3) {
                0 => new.key.ts = new.key.ts.wrapping_add(1),
                1 => new.key.seq = new.key.seq.wrapping_add(1),
                _ => new.entity = new.entity.wrapping_add(1),
            }
            for r in s.nodes.iter_mut().filter(|r| r.node == old) {
                r.node = new;
            }
            for e in s.edges.iter_mut() {
                if e.src == old {
                    e.src = new;
                }
                if e.dst == old {
                    e.dst = new;
                }
            }
            resort(&mut s);
        }
        MutationClass::AddEdge => {
            let mut s = pick_section(&mut m, rng, false)?;
            let a = s.nodes.choose(rng)?.node;
            let c = s.nodes.choose(rng)?.node;
            let (src, dst) = if rng.gen_bool(0.5) { (a, c) } else { (c, a) };
            let action = s.edges.choose(rng).map(|e| e.action.clone()).unwrap_or_else(|| "write".into());
            s.edges.push(EdgeRecord { src, dst, kind: random_kind(s.forward, rng), action, payload: vec![] });
            resort(&mut s);
        }
        MutationClass::DeleteEdge => {
            let s = pick_section(&mut m, rng, true)?;
            let i = rng.gen_range(0..s.edges.len());
            s.edges.remove(i);
        }
        MutationClass::ModifyEdge => {
            let mut s = pick_section(&mut m, rng, true)?;
            let i = rng.gen_range(0..s.edges.len());
            let nodes: Vec<NodeRef> = s.nodes.iter().map(|r| r.node).collect();
            let e = &mut s.edges[i];
            match rng.gen_range(0..5) {
                0 => e.action.push('x'),
                1 => e.payload.push(rng.gen()),
                2 => e.kind ^= if s.forward && rng.gen_bool(0.5) { edge_kind::TO_TERMINAL } else { 1 },
                3 => e.dst = *nodes.choose(rng)?,
                _ => e.src = *nodes.choose(rng)?,
            }
            resort(&mut s);
        }
        MutationClass::SwapPoi => {
            let p = donors.peers.choose(rng)?;
            match rng.gen_range(0..3) {
                0 => {
                    m.poi = p.poi.clone();
                    m.poi_node = p.poi_node.clone();
                }
                1 => m.poi_node = p.poi_node.clone(),
                _ => {
                    m = p.clone();
                    m.query = b.query.clone();
                }
            }
        }
        MutationClass::ForgeDigest => {
            let choice = rng.gen_range(0..3);
            if choice == 0 {
                if let Some(n) = m.poi_node.as_mut() {
                    if rng.gen_bool(0.5) {
                        n.pi_in = perturb(&n.pi_in, rng);
                    } else {
                        n.pi_out = perturb(&n.pi_out, rng);
                    }
                }
            } else if choice == 1 && m.forward.as_ref().is_some_and(|f| !f.roots.is_empty()) {
                let f = m.forward.as_mut().unwrap();
                let rp = f.roots.choose_mut(rng).unwrap();
                let recs = match rp {
                    crate::causality::RootProof::Single { record, .. } => std::slice::from_mut(record),
                    crate::causality::RootProof::Run { records, .. } => records.as_mut_slice(),
                };
                let r = recs.choose_mut(rng).unwrap();
                r.pi_out = perturb(&r.pi_out, rng);
            } else {
                let s = pick_section(&mut m, rng, false)?;
                let r = s.nodes.choose_mut(rng)?;
                r.digest = perturb(&r.digest, rng);
            }
        }
        MutationClass::Splice => {
            let p = donors.peers.choose(rng)?;
            if rng.gen_bool(0.5) {
                m.backward = p.backward.clone();
            } else {
                m.forward = p.forward.clone();
            }
        }
        MutationClass::Rollback => {
            if !donors.stale.is_empty() && rng.gen_bool(0.5) {
                m = donors.stale.choose(rng)?.clone();
            } else {
                m.commitment = donors.old_commitments.choose(rng)?.clone();
            }
        }
    }
    (m != *b).then_some(m)
}

/// Cloud-state tampering applied after replay.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StateTamper {
    DeleteEdge,
    ModifyEdge,
    ModifyNode,
}

impl std::str::FromStr for StateTamper {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "delete-edge" => Ok(StateTamper::DeleteEdge),
            "modify-edge" => Ok(StateTamper::ModifyEdge),
            "modify-node" => Ok(StateTamper::ModifyNode),
            _ => Err(Error::Config(format!("unknown state tamper {s:?}"))),
        }
    }
}

/// Tampers with the cloud's graph. Returns (entity name, timestamp) of a node
/// whose forward answer covers the tampered element.
pub fn tamper_state<R: Rng>(ep: &mut CloudEndpoint, t: StateTamper, rng: &mut R) -> Result<(String, u64)> {
    let g = ep.replica_mut().graph_mut();
    let ne = g.edges().len();
    if ne == 0 {
        return Err(Error::EmptyTree);
    }
    // Pick an edge whose source is the last version at its timestamp, so a
    // `Le` query at that timestamp resolves to it.
    let resolvable = |e: u32| {
        let n = g.node(g.edge(e).src);
        let vs = g.versions(n.entity);
        vs.get(n.key.seq as usize + 1).map_or(true, |&next| g.node(next).key.ts != n.key.ts)
    };
    let candidates: Vec<u32> = (0..ne as u32).filter(|&e| resolvable(e)).collect();
    let e = *candidates.choose(rng).ok_or(Error::EmptyTree)? as usize;
    let (src, dst) = (g.edge(e as u32).src, g.edge(e as u32).dst);
    match t {
        StateTamper::DeleteEdge => {
            let nodes = g.nodes_mut();
            nodes[src as usize].out_edges.retain(|&x| x != e as u32);
            nodes[dst as usize].in_edges.retain(|&x| x != e as u32);
        }
        StateTamper::ModifyEdge => {
            g.edges_mut()[e].payload.push(0xff);
        }
        StateTamper::ModifyNode => {
            g.nodes_mut()[dst as usize].key.ts += 1;
        }
    }
    let n = g.node(src);
    let name = g.entity_name(n.entity).unwrap_or_default().to_string();
    Ok((name, n.key.ts))
}
