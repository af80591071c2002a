use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use vcause_core::accumulator::Relation;
use vcause_core::causality::{CausalityQuery, Direction, ProofBundle};
use vcause_core::protocol::{Admin, Endpoint, EndpointConfig};
use vcause_core::provgraph::Mode;
use vcause_core::tamper::{mutate, Donors, MutationClass};

use crate::common::{key, stream};
use crate::{ensure, Outcome, Verdict};

const PER_CLASS: usize = 1000;
/// Largest component kept in the corpus, so the run stays within minutes.
const MAX_COMPONENT: usize = 400;

/// Honest bundles with bounded components, a third per direction, plus a few
/// provably empty answers.
fn corpus(e: &Endpoint, rng: &mut ChaCha20Rng, per_dir: usize) -> Vec<ProofBundle> {
    let g = e.replica().graph();
    let mut out = Vec::new();
    for dir in [Direction::Backward, Direction::Forward, Direction::Both] {
        let mut kept = 0;
        while kept < per_dir {
            let id = rng.gen_range(0..g.nodes().len());
            let n = &g.nodes()[id];
            let name = g.entity_name(n.entity).unwrap();
            // The latest version at this timestamp is the POI of a floor query.
            let poi = *g.versions(n.entity).iter().rev().find(|&&v| g.node(v).key.ts <= n.key.ts).unwrap();
            let bw = if dir.backward() { g.collect_backward(poi).unwrap().0.len() } else { 0 };
            let fw = if dir.forward() { g.forward_closure(poi).unwrap().len() } else { 0 };
            if bw + fw > MAX_COMPONENT || bw + fw < 3 {
                continue;
            }
            out.push(e.analyze(&CausalityQuery::new(name, Relation::Le(n.key.ts), dir)).unwrap());
            kept += 1;
        }
    }
    for i in 0..4 {
        let q = CausalityQuery::new(&format!("absent-{i}"), Relation::Ge(i), Direction::Both);
        out.push(e.analyze(&q).unwrap());
    }
    out
}

pub fn tamper_detection() -> Outcome {
    let evs = stream(1, 10_000, 1_000);
    let cfg = EndpointConfig { id: "acc".into(), mode: Mode::Segmented(1), commit_interval: 1000 };
    let mut e = Endpoint::new(cfg, key(1)).unwrap();
    for ev in &evs[..9_000] {
        e.logger_ingest(ev).unwrap();
    }
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let stale = corpus(&e, &mut rng, 5);
    for ev in &evs[9_000..] {
        e.logger_ingest(ev).unwrap();
    }
    ensure!(e.replica().pending_events() == 0, "last epoch not committed");
    let latest = e.latest().unwrap().clone();
    let bundles = corpus(&e, &mut rng, 20);
    let old: Vec<_> = e.commitments()[..e.commitments().len() - 1].to_vec();
    let donors = Donors { peers: &bundles, stale: &stale, old_commitments: &old };

    let mut admin = Admin::new();
    admin.add_endpoint("acc", e.public_key());
    ensure!(admin.observe(&latest), "latest commitment rejected");
    for b in &bundles {
        ensure!(admin.admin_verify(&b.query, b).accepted(), "honest corpus bundle rejected");
    }

    let mut total = 0;
    let mut undecodable = 0;
    for class in MutationClass::ALL {
        let mut made = 0;
        let mut attempts = 0;
        while made < PER_CLASS {
            attempts += 1;
            ensure!(attempts < 50 * PER_CLASS, "{}: only {made} mutants after {attempts} attempts", class.name());
            let b = &bundles[rng.gen_range(0..bundles.len())];
            let Some(m) = mutate(class, b, &donors, &mut rng) else { continue };
            made += 1;
            // Mutants travel as bytes, like honest bundles.
            let Ok(wire) = ProofBundle::from_bytes(&m.to_bytes()) else {
                undecodable += 1;
                continue;
            };
            let rep = admin.admin_verify(&b.query, &wire);
            ensure!(!rep.accepted(), "{} mutant accepted", class.name());
        }
        total += made;
    }
    ensure!(admin.last_seen("acc") == Some(latest.epoch), "admin state advanced past the latest epoch");
    Ok(Verdict::Pass(format!(
        "{total} mutants over {} classes, 0 accepted ({undecodable} failed to decode)",
        MutationClass::ALL.len()
    )))
}
