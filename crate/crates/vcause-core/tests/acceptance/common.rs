use std::collections::{BTreeSet, HashMap};

use vcause_core::causality::ProofBundle;
use vcause_core::hashcore::{edge_kind, SecretKey};
use vcause_core::ingest::{synth, SynthConfig};
use vcause_core::protocol::{Endpoint, EndpointConfig};
use vcause_core::provgraph::{EventRecord, Graph, Mode, NodeRef};

pub type EdgeKey = (NodeRef, NodeRef, u8);

pub fn stream(seed: u64, n_events: usize, n_entities: usize) -> Vec<EventRecord> {
    synth(&SynthConfig { seed, n_events, n_entities, ..Default::default() }).unwrap()
}

/// Strictly increasing timestamps, so every node is addressable by a query.
pub fn distinct_ts_stream(seed: u64, n_events: usize, n_entities: usize) -> Vec<EventRecord> {
    synth(&SynthConfig { seed, n_events, n_entities, tie_prob: 0.0, ..Default::default() }).unwrap()
}

pub fn key(seed: u8) -> SecretKey {
    SecretKey::from_seed([seed; 32])
}

pub fn endpoint(mode: Mode, evs: &[EventRecord], interval: u64) -> Endpoint {
    let cfg = EndpointConfig { id: "acc".into(), mode, commit_interval: interval };
    let mut e = Endpoint::new(cfg, key(7)).unwrap();
    for ev in evs {
        e.logger_ingest(ev).unwrap();
    }
    e.logger_commit().unwrap();
    e
}

/// Reachable nodes and traversed edges from `poi`, by breadth-first search
/// over the raw edge list.
pub fn bfs(g: &Graph, poi: NodeRef, forward: bool) -> (BTreeSet<NodeRef>, BTreeSet<EdgeKey>) {
    let mut adj: HashMap<NodeRef, Vec<(NodeRef, EdgeKey)>> = HashMap::new();
    for e in g.edges() {
        let (s, d) = (g.node(e.src).node_ref(), g.node(e.dst).node_ref());
        let (from, to) = if forward { (s, d) } else { (d, s) };
        adj.entry(from).or_default().push((to, (s, d, e.kind)));
    }
    let mut nodes = BTreeSet::from([poi]);
    let mut edges = BTreeSet::new();
    let mut queue = std::collections::VecDeque::from([poi]);
    while let Some(x) = queue.pop_front() {
        for &(y, k) in adj.get(&x).map(Vec::as_slice).unwrap_or(&[]) {
            edges.insert(k);
            if nodes.insert(y) {
                queue.push_back(y);
            }
        }
    }
    (nodes, edges)
}

pub struct Sets {
    pub bw_nodes: BTreeSet<NodeRef>,
    pub bw_edges: BTreeSet<EdgeKey>,
    pub fw_nodes: BTreeSet<NodeRef>,
    pub fw_edges: BTreeSet<EdgeKey>,
}

/// Component sets of a bundle with terminal flags stripped.
pub fn sets(b: &ProofBundle) -> Sets {
    let strip = |k: u8| k & !edge_kind::TO_TERMINAL;
    let mut s = Sets { bw_nodes: BTreeSet::new(), bw_edges: BTreeSet::new(), fw_nodes: BTreeSet::new(), fw_edges: BTreeSet::new() };
    if let Some(bw) = &b.backward {
        s.bw_nodes.extend(bw.nodes.iter().map(|r| r.node));
        s.bw_edges.extend(bw.edges.iter().map(|e| (e.src, e.dst, strip(e.kind))));
    }
    if let Some(fw) = &b.forward {
        for seg in &fw.segments {
            s.fw_nodes.extend(seg.nodes.iter().map(|r| r.node));
            s.fw_edges.extend(seg.edges.iter().map(|e| (e.src, e.dst, strip(e.kind))));
        }
    }
    s
}
