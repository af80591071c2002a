use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use vcause_core::protocol::{Batch, Cloud, CloudEndpoint, Commitment, Endpoint, EndpointConfig};
use vcause_core::provgraph::Mode;
use vcause_core::Error;

use crate::common::{key, stream};
use crate::{ensure, Outcome, Verdict};

const ID: &str = "host-7";

/// Endpoint over 10^5 events with an extra commitment after the first 100.
fn logged() -> (Endpoint, Vec<Batch>, Vec<usize>) {
    let evs = stream(10, 100_000, 10_000);
    let cfg = EndpointConfig { id: ID.into(), mode: Mode::Segmented(1), commit_interval: 1000 };
    let mut e = Endpoint::new(cfg, key(3)).unwrap();
    let mut at = Vec::new();
    for (i, ev) in evs.iter().enumerate() {
        if e.logger_ingest(ev).unwrap().is_some() {
            at.push(i + 1);
        }
        if i + 1 == 100 {
            e.logger_commit().unwrap();
            at.push(100);
        }
    }
    e.logger_commit().unwrap();
    at.push(evs.len());
    let batches = e.take_batches();
    (e, batches, at)
}

pub fn commitment_size() -> Outcome {
    let (e, batches, at) = logged();
    ensure!(at.len() == e.commitments().len(), "commitment bookkeeping");
    // version | id length | id | epoch | root | registry | timestamp | signature
    let layout = 1 + 2 + ID.len() + 8 + 32 + 32 + 8 + 64;
    for (c, events) in e.commitments().iter().zip(&at) {
        let bytes = c.to_bytes();
        ensure!(bytes.len() == layout, "{} bytes at {events} events, layout says {layout}", bytes.len());
        ensure!(Commitment::from_bytes(&bytes).as_ref() == Ok(c), "round trip at {events} events");
    }
    ensure!(at.first() == Some(&100) && at.last() == Some(&100_000), "sizes not sampled across 10^2..10^5");
    ensure!(batches.len() == at.len(), "batch count");
    Ok(Verdict::Pass(format!("{} commitments from 10^2 to 10^5 events, all {layout} bytes", at.len())))
}

#[derive(Debug)]
enum Tamper {
    Delete,
    Modify,
    Reorder,
}

fn tamper(b: &mut Batch, rng: &mut ChaCha20Rng) -> Tamper {
    let orig = b.events.clone();
    loop {
        let kind = [Tamper::Delete, Tamper::Modify, Tamper::Reorder].into_iter().nth(rng.gen_range(0..3)).unwrap();
        let i = rng.gen_range(0..b.events.len());
        match kind {
            Tamper::Delete => {
                b.events.remove(i);
            }
            Tamper::Modify => {
                let ev = &mut b.events[i];
                match rng.gen_range(0..4) {
                    0 => ev.action = format!("{}-x", ev.action),
                    1 => ev.dst = ["e1", "e2", "e3", "fresh"].choose(rng).unwrap().to_string(),
                    2 => ev.payload = Some(vec![rng.gen()]),
                    _ => ev.ts += 1,
                }
            }
            Tamper::Reorder => {
                let ev = b.events.remove(i);
                let j = rng.gen_range(0..=b.events.len());
                b.events.insert(j, ev);
            }
        }
        if b.events != orig {
            return kind;
        }
        b.events = orig.clone();
    }
}

pub fn replay_determinism() -> Outcome {
    let (e, batches, _) = logged();
    let mut cloud = Cloud::new();
    cloud.register(ID, Mode::Segmented(1)).unwrap();
    for (b, c) in batches.iter().zip(e.commitments()) {
        cloud.cloud_replay(ID, std::slice::from_ref(b)).map_err(|err| format!("honest epoch {}: {err}", c.epoch))?;
        let roots = cloud.endpoint(ID).unwrap().accumulator_roots();
        ensure!(roots == Some((c.root, c.registry_digest)), "roots differ at epoch {}", c.epoch);
    }

    let mut rng = ChaCha20Rng::seed_from_u64(10);
    let mut targets: Vec<usize> = (0..100).map(|_| rng.gen_range(0..batches.len())).collect();
    targets.sort_unstable();
    let mut honest = CloudEndpoint::new(Mode::Segmented(1)).unwrap();
    let mut done = 0;
    let mut kinds = [0usize; 3];
    for &k in &targets {
        while done < k {
            honest.replay_batch(ID, &batches[done]).unwrap();
            done += 1;
        }
        let mut bad = batches[k].clone();
        let kind = tamper(&mut bad, &mut rng);
        kinds[kind as usize] += 1;
        let mut trial = honest.clone();
        let epoch = bad.commitment.epoch;
        match trial.replay_batch(ID, &bad) {
            Err(Error::RootMismatch(at)) if at <= epoch => {}
            other => return Err(format!("tamper in epoch {epoch} gave {other:?}")),
        }
    }
    Ok(Verdict::Pass(format!(
        "{} epochs identical; 100 tampers ({} deletes, {} modifies, {} reorders) all mismatched at their epoch",
        batches.len(),
        kinds[0],
        kinds[1],
        kinds[2]
    )))
}
