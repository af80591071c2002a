use std::collections::{BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use vcause_core::accumulator::TimestampKey;
use vcause_core::hashcore::{edge_kind, encode_edge, mset_empty, EdgeFields, MsetDigest};
use vcause_core::provgraph::{EventRecord, Graph, Mode};

use crate::common::stream;
use crate::{ensure, Outcome, Verdict};

struct ONode {
    entity: u64,
    key: TimestampKey,
    depth: u32,
    /// Dependency edge that attaches this node to its segment tree.
    tree_edge: Option<usize>,
    ins: Vec<usize>,
    outs: Vec<usize>,
}

struct OEdge {
    kind: u8,
    src: usize,
    dst: usize,
    action: String,
    payload: Vec<u8>,
    terminal: bool,
}

/// Shadow model built directly from the event list.
#[derive(Default)]
struct Model {
    nodes: Vec<ONode>,
    edges: Vec<OEdge>,
    ids: HashMap<String, u64>,
    last: HashMap<u64, usize>,
    seqs: HashMap<u64, u32>,
}

impl Model {
    fn entity(&mut self, name: &str) -> u64 {
        let n = self.ids.len() as u64;
        *self.ids.entry(name.to_string()).or_insert(n)
    }

    fn node(&mut self, entity: u64, ts: u64) -> usize {
        let seq = self.seqs.entry(entity).or_insert(0);
        self.nodes.push(ONode { entity, key: TimestampKey::new(ts, *seq), depth: 0, tree_edge: None, ins: vec![], outs: vec![] });
        *seq += 1;
        let id = self.nodes.len() - 1;
        self.last.insert(entity, id);
        id
    }

    fn edge(&mut self, kind: u8, src: usize, dst: usize, ev: &EventRecord, terminal: bool) -> usize {
        let payload = ev.payload.clone().unwrap_or_default();
        self.edges.push(OEdge { kind, src, dst, action: ev.action.clone(), payload, terminal });
        let id = self.edges.len() - 1;
        self.nodes[src].outs.push(id);
        self.nodes[dst].ins.push(id);
        id
    }

    fn build(evs: &[EventRecord], l: Option<u32>) -> Model {
        let mut m = Model::default();
        for ev in evs {
            let se = m.entity(&ev.src);
            let s = match m.last.get(&se) {
                Some(&s) => s,
                None => m.node(se, ev.ts),
            };
            let de = m.entity(&ev.dst);
            let p = if de == se { None } else { m.last.get(&de).copied() };
            let n = m.node(de, ev.ts);
            let dep = m.edge(edge_kind::DEPENDENCY, s, n, ev, false);
            if let Some(p) = p {
                m.edge(edge_kind::TEMPORAL, p, n, ev, l.is_some());
            }
            let Some(l) = l else { continue };
            if m.nodes[s].depth < l {
                m.nodes[n].depth = m.nodes[s].depth + 1;
            } else {
                let up = m.nodes[s].tree_edge.take().expect("deep node has a tree edge");
                m.edges[up].terminal = true;
                m.nodes[s].depth = 0;
                m.nodes[n].depth = 1;
            }
            m.nodes[n].tree_edge = Some(dep);
        }
        m
    }

    fn encode(&self, e: usize, terminal: bool) -> Vec<u8> {
        let ed = &self.edges[e];
        let (s, d) = (&self.nodes[ed.src], &self.nodes[ed.dst]);
        encode_edge(&EdgeFields {
            src_entity: s.entity,
            src_key: s.key,
            dst_entity: d.entity,
            dst_key: d.key,
            kind: if terminal { ed.kind | edge_kind::TO_TERMINAL } else { ed.kind },
            event_type: &ed.action,
            payload: &ed.payload,
        })
    }

    fn element(&self, e: usize, terminal: bool, far: &MsetDigest) -> Vec<u8> {
        let mut v = self.encode(e, terminal);
        v.extend_from_slice(&far.to_bytes());
        v
    }

    fn pi_out(&self) -> Vec<MsetDigest> {
        let mut out = vec![mset_empty(); self.nodes.len()];
        for x in (0..self.nodes.len()).rev() {
            out[x] = self.nodes[x].outs.iter().fold(mset_empty(), |d, &e| {
                let ed = &self.edges[e];
                let far = if ed.terminal { mset_empty() } else { out[ed.dst] };
                d.add(&self.element(e, ed.terminal, &far))
            });
        }
        out
    }

    fn pi_in(&self) -> Vec<MsetDigest> {
        let mut out = vec![mset_empty(); self.nodes.len()];
        for x in 0..self.nodes.len() {
            out[x] = self.nodes[x].ins.iter().fold(mset_empty(), |d, &e| d.add(&self.element(e, false, &out[self.edges[e].src])));
        }
        out
    }
}

pub fn digest_maintenance() -> Outcome {
    let evs = stream(4, 500, 40);
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let mut prefixes = BTreeSet::new();
    while prefixes.len() < 50 {
        prefixes.insert(rng.gen_range(1..=evs.len()));
    }
    let mut checked = 0usize;
    for mode in [Mode::Unsegmented, Mode::Segmented(1), Mode::Segmented(2), Mode::Segmented(4)] {
        let l = match mode {
            Mode::Segmented(l) => Some(l),
            Mode::Unsegmented => None,
        };
        let mut g = Graph::new(mode).unwrap();
        for (i, ev) in evs.iter().enumerate() {
            g.record_event(ev).unwrap();
            if !prefixes.contains(&(i + 1)) {
                continue;
            }
            let m = Model::build(&evs[..=i], l);
            ensure!(m.nodes.len() == g.nodes().len(), "{mode:?} prefix {}: node count", i + 1);
            let (outs, ins) = (m.pi_out(), m.pi_in());
            for (x, n) in g.nodes().iter().enumerate() {
                let o = &m.nodes[x];
                ensure!((n.entity, n.key) == (o.entity, o.key), "{mode:?} prefix {}: node {x} address", i + 1);
                ensure!(n.pi_out == outs[x], "{mode:?} prefix {}: outgoing digest of node {x}", i + 1);
                ensure!(n.pi_in == ins[x], "{mode:?} prefix {}: incoming digest of node {x}", i + 1);
                checked += 1;
            }
        }
    }
    Ok(Verdict::Pass(format!("50 prefixes x 4 modes, {checked} node digests equal recomputation")))
}
