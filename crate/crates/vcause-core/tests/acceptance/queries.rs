use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use vcause_core::accumulator::{Relation, TimestampKey};
use vcause_core::causality::{verify_bundle, CausalityQuery, Direction, ProofBundle};
use vcause_core::protocol::{Admin, Endpoint};
use vcause_core::provgraph::{Graph, Mode, NodeRef};

use crate::common::{bfs, distinct_ts_stream, endpoint, sets, stream};
use crate::{ensure, Outcome, Verdict};

const DIRECTIONS: [Direction; 3] = [Direction::Backward, Direction::Forward, Direction::Both];

/// Expected POI straight from the version list.
fn expected_poi(g: &Graph, entity: &str, rel: Relation) -> Option<NodeRef> {
    let iid = g.entity_id(entity)?;
    let keys: Vec<TimestampKey> = g.versions(iid).iter().map(|&v| g.node(v).key).collect();
    let k = match rel {
        Relation::Le(t) => keys.iter().rev().find(|k| k.ts <= t),
        Relation::Ge(t) => keys.iter().find(|k| k.ts >= t),
    }?;
    Some(NodeRef { entity: iid, key: *k })
}

pub fn completeness() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let (mut found, mut empty) = (0, 0);
    for (mode, seed) in [(Mode::Segmented(1), 21), (Mode::Segmented(2), 22), (Mode::Unsegmented, 23)] {
        let evs = stream(seed, 3000, 300);
        let e = endpoint(mode, &evs, 1000);
        let g = e.replica().graph();
        let mut admin = Admin::new();
        admin.add_endpoint("acc", e.public_key());
        ensure!(admin.observe(e.latest().unwrap()), "latest commitment not accepted");
        let last = g.last_ts().unwrap();
        for _ in 0..334 {
            let entity = if rng.gen_bool(0.05) {
                format!("absent-{}", rng.gen::<u32>())
            } else {
                format!("e{}", rng.gen_range(0..300))
            };
            let t = rng.gen_range(0..=last + 10);
            let rel = if rng.gen_bool(0.5) { Relation::Le(t) } else { Relation::Ge(t) };
            let q = CausalityQuery::new(&entity, rel, DIRECTIONS[rng.gen_range(0..3)]);
            let b = e.analyze(&q).map_err(|err| format!("{q:?}: {err}"))?;
            let rep = admin.admin_verify(&q, &b);
            ensure!(rep.accepted(), "{mode:?} {q:?} rejected: {:?}", rep.first_failure);
            let want = expected_poi(g, &entity, rel);
            ensure!(b.poi_node.as_ref().map(|n| n.node) == want, "{q:?}: wrong POI");
            ensure!(rep.provably_empty == want.is_none(), "{q:?}: emptiness flag");
            if want.is_some() {
                found += 1;
            } else {
                empty += 1;
            }
        }
    }
    ensure!(empty > 0 && found > 0, "query mix degenerate: {found} found, {empty} empty");
    Ok(Verdict::Pass(format!("{} queries accepted ({empty} provably empty)", found + empty)))
}

/// A query whose POI is `n`, if one exists.
fn query_for(g: &Graph, n: NodeRef, dir: Direction) -> Option<CausalityQuery> {
    let name = g.entity_name(n.entity)?;
    [Relation::Le(n.key.ts), Relation::Ge(n.key.ts)]
        .into_iter()
        .find(|&r| expected_poi(g, name, r) == Some(n))
        .map(|r| CausalityQuery::new(name, r, dir))
}

fn checked(e: &Endpoint, q: &CausalityQuery) -> Result<ProofBundle, String> {
    let b = e.analyze(q).map_err(|err| format!("{q:?}: {err}"))?;
    let rep = verify_bundle(&e.public_key(), q, &b);
    ensure!(rep.accepted(), "{q:?} rejected: {:?}", rep.first_failure);
    Ok(b)
}

pub fn oracle_equivalence() -> Outcome {
    let mut total = 0;
    let mut largest = 0;
    for (mode, seed) in [(Mode::Segmented(1), 31), (Mode::Segmented(2), 32), (Mode::Unsegmented, 33)] {
        let evs = distinct_ts_stream(seed, 450, 40);
        let e = endpoint(mode, &evs, 100);
        let g = e.replica().graph();
        ensure!(g.nodes().len() <= 1000, "graph too large: {}", g.nodes().len());
        for n in g.nodes() {
            let r = n.node_ref();
            let q = query_for(g, r, Direction::Both).ok_or(format!("{r:?} not addressable"))?;
            let b = checked(&e, &q)?;
            let s = sets(&b);
            let (bn, be) = bfs(g, r, false);
            let (fnodes, fe) = bfs(g, r, true);
            ensure!(s.bw_nodes == bn && s.bw_edges == be, "{mode:?} {r:?}: backward differs from BFS");
            ensure!(s.fw_nodes == fnodes && s.fw_edges == fe, "{mode:?} {r:?}: forward differs from BFS");
            largest = largest.max(bn.len() + fnodes.len());
            total += 1;
        }
    }
    Ok(Verdict::Pass(format!("{total} POIs, exact set equality (largest component {largest} nodes)")))
}

pub fn segmentation_equivalence() -> Outcome {
    let mut pois = 0;
    let mut trees = Vec::new();
    for (l, seed) in [(1u32, 51u64), (2, 52), (4, 53)] {
        let evs = distinct_ts_stream(seed, 480, 35);
        let mut g = Graph::new(Mode::Segmented(l)).unwrap();
        for (i, ev) in evs.iter().enumerate() {
            g.record_event(ev).unwrap();
            ensure!(g.max_depth() <= l, "L={l}: depth {} after event {i}", g.max_depth());
            ensure!(g.nodes().iter().all(|n| n.depth <= l), "L={l}: node deeper than L after event {i}");
        }
        trees.push(g.tree_count());
        let seg = endpoint(Mode::Segmented(l), &evs, 100);
        let flat = endpoint(Mode::Unsegmented, &evs, 100);
        let sg = seg.replica().graph();
        for n in sg.nodes() {
            let q = query_for(sg, n.node_ref(), Direction::Forward).ok_or("unaddressable node")?;
            let (a, b) = (sets(&checked(&seg, &q)?), sets(&checked(&flat, &q)?));
            ensure!(a.fw_nodes == b.fw_nodes, "L={l} {q:?}: node sets differ");
            ensure!(a.fw_edges == b.fw_edges, "L={l} {q:?}: edge sets differ");
            pois += 1;
        }
    }
    Ok(Verdict::Pass(format!("{pois} POIs equal across L=1,2,4 (segment trees {trees:?}); depth <= L at every step")))
}
