//! Endpoint, cloud and administrator roles.
//!
//! The endpoint records events, syncs touched nodes into its accumulator and
//! signs a [`Commitment`] every `commit_interval` events. Each commitment is
//! shipped with the events it covers as a [`Batch`]. The cloud replays batches
//! into its own replica and checks every signed root. The administrator checks
//! bundles against the newest epoch it has seen per endpoint.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::accumulator::Accumulator;
use crate::causality::{analyze, verify_bundle, CausalityQuery, ProofBundle, VerifyReport};
use crate::error::{Error, Result};
use crate::hashcore::{sign_commitment, verify_commitment, CommitmentFields, Digest, PublicKey, SecretKey, Signature};
use crate::provgraph::{EventRecord, Graph, Mode, NodeId, RecordOutcome};
use crate::wire::{Reader, Writer};

pub const DEFAULT_COMMIT_INTERVAL: u64 = 1000;

/// Signed graph commitment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Commitment {
    pub endpoint_id: String,
    pub epoch: u64,
    pub root: Digest,
    pub registry_digest: Digest,
    pub timestamp: u64,
    pub signature: Signature,
}

impl Commitment {
    pub const VERSION: u8 = 1;
    /// Serialized size without the endpoint id.
    pub const FIXED_LEN: usize = 1 + 2 + 8 + 32 + 32 + 8 + Signature::LEN;

    pub fn sign(sk: &SecretKey, endpoint_id: &str, epoch: u64, root: Digest, registry_digest: Digest, timestamp: u64) -> Self {
        let fields = CommitmentFields { endpoint_id, epoch, root, registry_digest, timestamp };
        let signature = sign_commitment(sk, &fields);
        Commitment { endpoint_id: endpoint_id.to_string(), epoch, root, registry_digest, timestamp, signature }
    }

    pub fn fields(&self) -> CommitmentFields<'_> {
        CommitmentFields {
            endpoint_id: &self.endpoint_id,
            epoch: self.epoch,
            root: self.root,
            registry_digest: self.registry_digest,
            timestamp: self.timestamp,
        }
    }

    pub fn verify(&self, vk: &PublicKey) -> bool {
        verify_commitment(vk, &self.fields(), &self.signature)
    }

    pub fn encoded_len(&self) -> usize {
        Self::FIXED_LEN + self.endpoint_id.len()
    }

    pub fn write(&self, w: &mut Writer) {
        w.u8(Self::VERSION)
            .u16(self.endpoint_id.len() as u16)
            .raw(self.endpoint_id.as_bytes())
            .u64(self.epoch)
            .digest(&self.root)
            .digest(&self.registry_digest)
            .u64(self.timestamp)
            .raw(&self.signature.0);
    }

    pub fn read(r: &mut Reader<'_>) -> Result<Self> {
        let v = r.u8()?;
        if v != Self::VERSION {
            return Err(Error::Decode(format!("unsupported commitment version {v}")));
        }
        let n = r.u16()? as usize;
        let endpoint_id =
            String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Decode("endpoint id is not utf-8".into()))?;
        Ok(Commitment {
            endpoint_id,
            epoch: r.u64()?,
            root: r.digest()?,
            registry_digest: r.digest()?,
            timestamp: r.u64()?,
            signature: Signature::from_bytes(r.take(Signature::LEN)?)?,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.write(&mut w);
        w.finish()
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        let mut r = Reader::new(b);
        let c = Self::read(&mut r)?;
        r.end()?;
        Ok(c)
    }
}

/// Events covered by one commitment, in log order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub events: Vec<EventRecord>,
    pub commitment: Commitment,
}

impl Batch {
    pub const MAGIC: &'static [u8; 4] = b"VCBT";

    pub fn write(&self, w: &mut Writer) {
        w.section(|w| self.commitment.write(w));
        w.u32(self.events.len() as u32);
        for e in &self.events {
            w.bytes(e.src.as_bytes()).bytes(e.action.as_bytes()).bytes(e.dst.as_bytes()).u64(e.ts);
            match &e.payload {
                Some(p) => w.u8(1).bytes(p),
                None => w.u8(0),
            };
        }
    }

    pub fn read(r: &mut Reader<'_>) -> Result<Self> {
        let commitment = r.section(Commitment::read)?;
        let n = r.count(4 * 3 + 8 + 1)?;
        let mut events = Vec::with_capacity(n);
        for _ in 0..n {
            let (src, action, dst, ts) = (r.string()?, r.string()?, r.string()?, r.u64()?);
            let payload = if r.bool()? { Some(r.bytes()?.to_vec()) } else { None };
            events.push(EventRecord { src, action, dst, ts, payload });
        }
        Ok(Batch { events, commitment })
    }
}

/// Encodes batches as `VCBT`, a u32 count, then each batch.
pub fn batches_to_bytes(batches: &[Batch]) -> Vec<u8> {
    let mut w = Writer::new();
    w.raw(Batch::MAGIC).u32(batches.len() as u32);
    for b in batches {
        b.write(&mut w);
    }
    w.finish()
}

pub fn batches_from_bytes(bytes: &[u8]) -> Result<Vec<Batch>> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != Batch::MAGIC {
        return Err(Error::Decode("not a batch stream".into()));
    }
    let n = r.count(4 + Commitment::FIXED_LEN + 4)?;
    let out = (0..n).map(|_| Batch::read(&mut r)).collect::<Result<Vec<_>>>()?;
    r.end()?;
    Ok(out)
}

/// Graph, accumulator and the set of nodes not yet synced. Both the endpoint
/// and the cloud drive one of these, so identical logs give identical roots.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Replica {
    graph: Graph,
    acc: Accumulator,
    pending: BTreeSet<NodeId>,
    /// Nodes `0..synced` are registered in the accumulator.
    synced: usize,
    pending_events: u64,
    sync_ops: u64,
}

impl Replica {
    pub fn new(mode: Mode) -> Result<Self> {
        Ok(Replica {
            graph: Graph::new(mode)?,
            acc: Accumulator::new(),
            pending: BTreeSet::new(),
            synced: 0,
            pending_events: 0,
            sync_ops: 0,
        })
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn accumulator(&self) -> &Accumulator {
        &self.acc
    }

    /// Mutable graph access for tamper harnesses.
    pub fn graph_mut(&mut self) -> &mut Graph {
        &mut self.graph
    }

    pub fn pending(&self) -> &BTreeSet<NodeId> {
        &self.pending
    }

    pub fn pending_events(&self) -> u64 {
        self.pending_events
    }

    /// Total register/update calls issued to the accumulator.
    pub fn sync_ops(&self) -> u64 {
        self.sync_ops
    }

    pub fn apply(&mut self, ev: &EventRecord) -> Result<RecordOutcome> {
        let out = self.graph.record_event(ev)?;
        self.pending.extend(out.created.iter().copied());
        self.pending.extend(out.changed.iter().copied());
        self.pending_events += 1;
        Ok(out)
    }

    /// Pushes every pending node into the accumulator, once each.
    pub fn sync(&mut self) -> Result<usize> {
        let pending = std::mem::take(&mut self.pending);
        for &id in &pending {
            let n = self.graph.node(id);
            let digest = self.graph.leaf_digest(id);
            if (id as usize) < self.synced {
                self.acc.update_node(n.entity, n.key, digest)?;
            } else {
                let name = self.graph.entity_name(n.entity).ok_or_else(|| Error::UnknownEntity(n.entity.to_string()))?;
                self.acc.register_node(name, n.entity, n.key, digest)?;
                self.synced = id as usize + 1;
            }
        }
        self.sync_ops += pending.len() as u64;
        Ok(pending.len())
    }

    /// Syncs and commits; returns (root, registry root).
    pub fn commit(&mut self) -> Result<(Digest, Digest)> {
        self.sync()?;
        self.acc.commit()?;
        self.pending_events = 0;
        self.acc.committed_roots().ok_or(Error::NotCommitted)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EndpointConfig {
    pub id: String,
    pub mode: Mode,
    pub commit_interval: u64,
}

impl EndpointConfig {
    pub fn new(id: &str) -> Self {
        EndpointConfig { id: id.to_string(), mode: Mode::default(), commit_interval: DEFAULT_COMMIT_INTERVAL }
    }

    pub fn validate(&self) -> Result<()> {
        if self.commit_interval == 0 {
            return Err(Error::Config("commit interval must be at least 1".into()));
        }
        if self.id.is_empty() || self.id.len() > u16::MAX as usize {
            return Err(Error::Config("endpoint id must be 1..=65535 bytes".into()));
        }
        if self.mode == Mode::Segmented(0) {
            return Err(Error::Config("segmentation depth must be at least 1".into()));
        }
        Ok(())
    }
}

pub struct Endpoint {
    cfg: EndpointConfig,
    replica: Replica,
    sk: SecretKey,
    commitments: Vec<Commitment>,
    outbox: Vec<EventRecord>,
    batches: Vec<Batch>,
}

impl Endpoint {
    pub fn new(cfg: EndpointConfig, sk: SecretKey) -> Result<Self> {
        cfg.validate()?;
        Ok(Endpoint {
            replica: Replica::new(cfg.mode)?,
            cfg,
            sk,
            commitments: vec![],
            outbox: vec![],
            batches: vec![],
        })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.cfg
    }

    pub fn public_key(&self) -> PublicKey {
        self.sk.public()
    }

    pub fn replica(&self) -> &Replica {
        &self.replica
    }

    pub fn commitments(&self) -> &[Commitment] {
        &self.commitments
    }

    pub fn latest(&self) -> Option<&Commitment> {
        self.commitments.last()
    }

    /// Records one event; commits when the interval is reached.
    pub fn logger_ingest(&mut self, ev: &EventRecord) -> Result<Option<Commitment>> {
        self.replica.apply(ev)?;
        self.outbox.push(ev.clone());
        if self.replica.pending_events() >= self.cfg.commit_interval {
            return self.logger_commit().map(Some);
        }
        Ok(None)
    }

    pub fn logger_commit(&mut self) -> Result<Commitment> {
        let (root, reg) = self.replica.commit()?;
        let last_ts = self.replica.graph().last_ts().unwrap_or(0);
        let ts = match self.commitments.last() {
            Some(prev) => last_ts.max(prev.timestamp + 1),
            None => last_ts,
        };
        let epoch = self.commitments.len() as u64 + 1;
        let c = Commitment::sign(&self.sk, &self.cfg.id, epoch, root, reg, ts);
        self.commitments.push(c.clone());
        self.batches.push(Batch { events: std::mem::take(&mut self.outbox), commitment: c.clone() });
        Ok(c)
    }

    /// Batches produced since the last call, for shipping to the cloud.
    pub fn take_batches(&mut self) -> Vec<Batch> {
        std::mem::take(&mut self.batches)
    }

    /// Answers a query against the endpoint's own state.
    pub fn analyze(&self, q: &CausalityQuery) -> Result<ProofBundle> {
        let c = self.latest().ok_or(Error::NotCommitted)?;
        analyze(self.replica.graph(), self.replica.accumulator(), c, q)
    }
}

/// Cloud-side state for one endpoint.
#[derive(Clone, Debug)]
pub struct CloudEndpoint {
    replica: Replica,
    log: Vec<EventRecord>,
    commitments: Vec<Commitment>,
    mismatch: Option<u64>,
}

impl CloudEndpoint {
    pub fn new(mode: Mode) -> Result<Self> {
        Ok(CloudEndpoint { replica: Replica::new(mode)?, log: vec![], commitments: vec![], mismatch: None })
    }

    pub fn replica(&self) -> &Replica {
        &self.replica
    }

    /// Mutable state for tamper harnesses.
    pub fn replica_mut(&mut self) -> &mut Replica {
        &mut self.replica
    }

    pub fn log(&self) -> &[EventRecord] {
        &self.log
    }

    pub fn commitments(&self) -> &[Commitment] {
        &self.commitments
    }

    pub fn latest(&self) -> Option<&Commitment> {
        self.commitments.last()
    }

    pub fn accumulator_roots(&self) -> Option<(Digest, Digest)> {
        self.replica.acc.committed_roots()
    }

    /// First epoch whose root did not match.
    pub fn mismatch(&self) -> Option<u64> {
        self.mismatch
    }

    /// Replays one batch and checks its root.
    pub fn replay_batch(&mut self, endpoint_id: &str, b: &Batch) -> Result<()> {
        if let Some(e) = self.mismatch {
            return Err(Error::RootMismatch(e));
        }
        let c = &b.commitment;
        let expected = self.commitments.len() as u64 + 1;
        if c.endpoint_id != endpoint_id || c.epoch != expected {
            return Err(Error::Config(format!(
                "commitment for {}/{} does not follow {endpoint_id}/{}",
                c.endpoint_id,
                c.epoch,
                expected - 1
            )));
        }
        let mut r = Ok(());
        for ev in &b.events {
            if let Err(e) = self.replica.apply(ev) {
                r = Err(e);
                break;
            }
        }
        self.log.extend(b.events.iter().cloned());
        let ok = r.is_ok() && self.replica.commit().is_ok_and(|roots| roots == (c.root, c.registry_digest));
        self.commitments.push(c.clone());
        if !ok {
            self.mismatch = Some(c.epoch);
            return Err(Error::RootMismatch(c.epoch));
        }
        Ok(())
    }

    pub fn analyze(&self, q: &CausalityQuery) -> Result<ProofBundle> {
        let c = self.latest().ok_or(Error::NotCommitted)?;
        analyze(self.replica.graph(), self.replica.accumulator(), c, q)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Cloud {
    endpoints: BTreeMap<String, CloudEndpoint>,
}

impl Cloud {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, endpoint_id: &str, mode: Mode) -> Result<()> {
        if !self.endpoints.contains_key(endpoint_id) {
            self.endpoints.insert(endpoint_id.to_string(), CloudEndpoint::new(mode)?);
        }
        Ok(())
    }

    pub fn insert(&mut self, endpoint_id: &str, state: CloudEndpoint) {
        self.endpoints.insert(endpoint_id.to_string(), state);
    }

    pub fn endpoint(&self, endpoint_id: &str) -> Result<&CloudEndpoint> {
        self.endpoints.get(endpoint_id).ok_or_else(|| Error::UnknownEndpoint(endpoint_id.to_string()))
    }

    pub fn endpoint_mut(&mut self, endpoint_id: &str) -> Result<&mut CloudEndpoint> {
        self.endpoints.get_mut(endpoint_id).ok_or_else(|| Error::UnknownEndpoint(endpoint_id.to_string()))
    }

    /// Replays batches in order; stops at the first root mismatch.
    pub fn cloud_replay(&mut self, endpoint_id: &str, batches: &[Batch]) -> Result<()> {
        let ep = self.endpoint_mut(endpoint_id)?;
        for b in batches {
            ep.replay_batch(endpoint_id, b)?;
        }
        Ok(())
    }

    pub fn cloud_analyze(&self, endpoint_id: &str, q: &CausalityQuery) -> Result<ProofBundle> {
        self.endpoint(endpoint_id)?.analyze(q)
    }
}

/// Splits a flat log into batches at the given cumulative event counts.
pub fn batches_from_log(log: &[EventRecord], commitments: &[(usize, Commitment)]) -> Result<Vec<Batch>> {
    let mut out = Vec::with_capacity(commitments.len());
    let mut start = 0;
    for (end, c) in commitments {
        if *end < start || *end > log.len() {
            return Err(Error::Config(format!("commitment {} covers event {end}, log has {}", c.epoch, log.len())));
        }
        out.push(Batch { events: log[start..*end].to_vec(), commitment: c.clone() });
        start = *end;
    }
    Ok(out)
}

#[derive(Clone, Debug, Default)]
pub struct Admin {
    keys: HashMap<String, PublicKey>,
    seen: HashMap<String, u64>,
}

impl Admin {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_endpoint(&mut self, endpoint_id: &str, vk: PublicKey) {
        self.keys.insert(endpoint_id.to_string(), vk);
    }

    pub fn last_seen(&self, endpoint_id: &str) -> Option<u64> {
        self.seen.get(endpoint_id).copied()
    }

    pub fn set_last_seen(&mut self, endpoint_id: &str, epoch: u64) {
        self.seen.insert(endpoint_id.to_string(), epoch);
    }

    /// Records a commitment received out of band. Returns false if its
    /// signature does not verify.
    pub fn observe(&mut self, c: &Commitment) -> bool {
        let Some(vk) = self.keys.get(&c.endpoint_id) else { return false };
        if !c.verify(vk) {
            return false;
        }
        let e = self.seen.entry(c.endpoint_id.clone()).or_insert(0);
        *e = (*e).max(c.epoch);
        true
    }

    /// Verifies a bundle and its freshness; an accepted bundle raises the
    /// last seen epoch.
    pub fn admin_verify(&mut self, q: &CausalityQuery, b: &ProofBundle) -> VerifyReport {
        let id = &b.commitment.endpoint_id;
        let Some(vk) = self.keys.get(id) else {
            return VerifyReport::default().fail("commitment", format!("unknown endpoint {id}"));
        };
        let rep = verify_bundle(vk, q, b);
        if !rep.accepted() {
            return rep;
        }
        let seen = self.seen.get(id).copied().unwrap_or(0);
        if b.commitment.epoch < seen {
            let stale = VerifyReport { commitment_ok: false, ..Default::default() };
            return stale.fail("commitment", format!("epoch {} is older than seen epoch {seen}", b.commitment.epoch));
        }
        self.seen.insert(id.clone(), b.commitment.epoch);
        rep
    }
}

// Snapshots.

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"VCSNAP01";

#[derive(Serialize, Deserialize)]
struct SnapshotBody {
    replica: Replica,
    log_len: u64,
    commitments: Vec<Vec<u8>>,
    mismatch: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct EndpointBody {
    id: String,
    mode: Mode,
    commit_interval: u64,
    replica: Replica,
    commitments: Vec<Vec<u8>>,
    outbox: Vec<EventRecord>,
}

impl Endpoint {
    /// Binary image of the endpoint without its key. Batches not yet taken are
    /// dropped.
    pub fn snapshot(&self) -> Result<Vec<u8>> {
        let body = EndpointBody {
            id: self.cfg.id.clone(),
            mode: self.cfg.mode,
            commit_interval: self.cfg.commit_interval,
            replica: self.replica.clone(),
            commitments: self.commitments.iter().map(Commitment::to_bytes).collect(),
            outbox: self.outbox.clone(),
        };
        let mut out = SNAPSHOT_MAGIC.to_vec();
        bincode::serialize_into(&mut out, &body).map_err(|e| Error::Decode(e.to_string()))?;
        Ok(out)
    }

    pub fn restore(bytes: &[u8], sk: SecretKey) -> Result<Self> {
        let body = bytes
            .strip_prefix(SNAPSHOT_MAGIC.as_slice())
            .ok_or_else(|| Error::Decode("not a snapshot".into()))?;
        let b: EndpointBody = bincode::deserialize(body).map_err(|e| Error::Decode(e.to_string()))?;
        let cfg = EndpointConfig { id: b.id, mode: b.mode, commit_interval: b.commit_interval };
        cfg.validate()?;
        let commitments = b.commitments.iter().map(|c| Commitment::from_bytes(c)).collect::<Result<Vec<_>>>()?;
        Ok(Endpoint { cfg, replica: b.replica, sk, commitments, outbox: b.outbox, batches: vec![] })
    }
}

impl CloudEndpoint {
    /// Binary cache of the replica and commitments. The log itself is kept
    /// separately; `log_len` records how much of it the snapshot covers.
    pub fn snapshot(&self) -> Result<Vec<u8>> {
        let body = SnapshotBody {
            replica: self.replica.clone(),
            log_len: self.log.len() as u64,
            commitments: self.commitments.iter().map(Commitment::to_bytes).collect(),
            mismatch: self.mismatch,
        };
        let mut out = SNAPSHOT_MAGIC.to_vec();
        bincode::serialize_into(&mut out, &body).map_err(|e| Error::Decode(e.to_string()))?;
        Ok(out)
    }

    pub fn restore(bytes: &[u8], log: Vec<EventRecord>) -> Result<Self> {
        let body = bytes
            .strip_prefix(SNAPSHOT_MAGIC.as_slice())
            .ok_or_else(|| Error::Decode("not a snapshot".into()))?;
        let body: SnapshotBody = bincode::deserialize(body).map_err(|e| Error::Decode(e.to_string()))?;
        if body.log_len != log.len() as u64 {
            return Err(Error::Decode(format!("snapshot covers {} events, log has {}", body.log_len, log.len())));
        }
        let commitments = body.commitments.iter().map(|b| Commitment::from_bytes(b)).collect::<Result<Vec<_>>>()?;
        Ok(CloudEndpoint { replica: body.replica, log, commitments, mismatch: body.mismatch })
    }
}
