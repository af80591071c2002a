//! The `vcause` command-line tool.
//!
//! State lives in one directory (`--state-dir`, or `VCAUSE_STATE_DIR`):
//!
//! ```text
//! config.json        endpoint id, mode, depth, interval
//! endpoint.key/.pub  signing and verification keys
//! endpoint.snap      endpoint replica, including events not yet committed
//! events.jsonl       log received by the cloud (committed events only)
//! commitments.jsonl  one line per commitment: epoch, cumulative events, hex bytes
//! cloud.snap         cloud replica cache; rebuilt from the log when stale
//! ```
//!
//! Exit codes: 0 success or accepted, 1 rejected, 2 malformed input, 3 any
//! other error.

use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::accumulator::Relation;
use crate::causality::{verify_bundle, CausalityQuery, Direction, ProofBundle, RootProof, VerifyReport};
use crate::dimtree::{hash_counters, DimTree, LeafRecord};
use crate::error::{Error, Result};
use crate::hashcore::{hash_bytes, PublicKey, SecretKey};
use crate::ingest::{parse_csv, spawn_parser, synth, write_jsonl, Policy, SynthConfig};
use crate::protocol::{batches_from_log, Admin, Cloud, CloudEndpoint, Commitment, Endpoint, EndpointConfig};
use crate::provgraph::{EventRecord, Graph, Mode};
use crate::tamper::{mutate, tamper_state, Donors, MutationClass, StateTamper};
use crate::wire::Writer;

pub const EXIT_OK: i32 = 0;
pub const EXIT_REJECTED: i32 = 1;
pub const EXIT_MALFORMED: i32 = 2;
pub const EXIT_ERROR: i32 = 3;

/// Version of the JSON output schema.
pub const JSON_SCHEMA: u32 = 1;

#[derive(Parser, Debug)]
#[command(name = "vcause", version, about = "Verifiable causality analysis over provenance logs")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub cmd: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// State directory.
    #[arg(long, global = true, env = "VCAUSE_STATE_DIR", default_value = "vcause-state")]
    pub state_dir: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = Format::Human)]
    pub format: Format,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Human,
    Json,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Segmented,
    Unsegmented,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RelationArg {
    Le,
    Ge,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DirectionArg {
    Backward,
    Forward,
    Both,
}

impl From<DirectionArg> for Direction {
    fn from(d: DirectionArg) -> Self {
        match d {
            DirectionArg::Backward => Direction::Backward,
            DirectionArg::Forward => Direction::Forward,
            DirectionArg::Both => Direction::Both,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic JSONL log.
    Gen(GenArgs),
    /// Record a log at the endpoint and ship committed batches to the cloud.
    Ingest(IngestArgs),
    /// Force a commitment of pending changes.
    Commit(KeyArgs),
    /// Answer a causality query and write the proof bundle.
    Query(QueryArgs),
    /// Check a proof bundle as the administrator.
    Verify(VerifyArgs),
    /// Tamper with cloud state or with a bundle.
    Tamper(TamperArgs),
    /// Emit measurement CSV.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 1000)]
    pub events: usize,
    #[arg(long, default_value_t = 100)]
    pub entities: usize,
    #[arg(long, default_value_t = 1.0)]
    pub zipf: f64,
    #[arg(long, default_value_t = 2.0)]
    pub fanout: f64,
    #[arg(long, default_value_t = 3.0)]
    pub ts_step: f64,
    #[arg(long, default_value_t = 0.1)]
    pub tie_prob: f64,
    /// Comma-separated action alphabet.
    #[arg(long, default_value = "read,write,exec,connect,fork")]
    pub actions: String,
    /// Output file; stdout when absent.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct KeyArgs {
    /// Endpoint signing key (PEM); defaults to the state directory's key.
    #[arg(long)]
    pub key: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    /// Log file, or `-` for stdin.
    pub log: PathBuf,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Segmentation depth.
    #[arg(long)]
    pub depth: Option<u32>,
    /// Events per commitment.
    #[arg(long)]
    pub interval: Option<u64>,
    #[arg(long)]
    pub endpoint_id: Option<String>,
    /// Parse the log as CSV (src,action,dst,ts[,payload]).
    #[arg(long)]
    pub csv: bool,
    /// Skip malformed lines instead of aborting.
    #[arg(long)]
    pub lenient: bool,
    /// Seed for a newly generated key; random when absent.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub keys: KeyArgs,
}

#[derive(Args, Debug, Clone)]
pub struct QueryTarget {
    #[arg(long)]
    pub entity: Option<String>,
    /// Query timestamp.
    #[arg(long)]
    pub at: Option<u64>,
    #[arg(long, value_enum)]
    pub relation: Option<RelationArg>,
    #[arg(long, value_enum)]
    pub direction: Option<DirectionArg>,
}

impl QueryTarget {
    fn required(&self) -> Result<CausalityQuery> {
        let entity = self.entity.clone().ok_or_else(|| Error::Config("--entity is required".into()))?;
        let at = self.at.ok_or_else(|| Error::Config("--at is required".into()))?;
        Ok(self.over(&CausalityQuery::new(&entity, Relation::Le(at), Direction::Both)))
    }

    /// Fills unset fields from `base`.
    fn over(&self, base: &CausalityQuery) -> CausalityQuery {
        let t = self.at.unwrap_or(match base.relation {
            Relation::Le(t) | Relation::Ge(t) => t,
        });
        let rel_ge = match self.relation {
            Some(r) => r == RelationArg::Ge,
            None => matches!(base.relation, Relation::Ge(_)),
        };
        CausalityQuery {
            entity: self.entity.clone().unwrap_or_else(|| base.entity.clone()),
            relation: if rel_ge { Relation::Ge(t) } else { Relation::Le(t) },
            direction: self.direction.map(Direction::from).unwrap_or(base.direction),
        }
    }
}

#[derive(Args, Debug)]
pub struct QueryArgs {
    #[command(flatten)]
    pub target: QueryTarget,
    /// Bundle output path; defaults to `<state-dir>/last.bundle`.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    pub bundle: PathBuf,
    /// Verification key (PEM); defaults to the state directory's key.
    #[arg(long)]
    pub vk: Option<PathBuf>,
    /// Query to check against; unset fields fall back to the bundle's query.
    #[command(flatten)]
    pub target: QueryTarget,
    /// JSON file with the last seen epoch per endpoint; updated on accept.
    #[arg(long)]
    pub admin_state: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TamperArgs {
    /// Mutation class: delete-edge, modify-edge, modify-node for cloud state;
    /// any bundle class with --bundle.
    #[arg(long)]
    pub class: String,
    /// Mutate this bundle instead of cloud state.
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    /// Output for a mutated bundle; defaults to overwriting it.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Workload {
    /// DIM-tree insertion time and merge counts over 2^10..2^max leaves.
    Insertion,
    /// Per-event digest updates, segmented L=1 against unsegmented.
    Updates,
    /// Proof size and prove/verify latency against component size.
    Proof,
    /// Commitment size against graph size.
    Commitment,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(value_enum)]
    pub workload: Workload,
    /// Largest exponent for insertion (leaves) or commitment (events, base 10).
    #[arg(long)]
    pub max_exp: Option<u32>,
    #[arg(long, default_value_t = 20_000)]
    pub events: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

/// Persistent per-directory configuration.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateConfig {
    pub version: u32,
    pub endpoint_id: String,
    pub mode: ModeArg,
    pub depth: u32,
    pub interval: u64,
}

impl StateConfig {
    pub fn graph_mode(&self) -> Mode {
        match self.mode {
            ModeArg::Segmented => Mode::Segmented(self.depth),
            ModeArg::Unsegmented => Mode::Unsegmented,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.mode == ModeArg::Segmented && self.depth < 1 {
            return Err(Error::Config("--depth must be at least 1 in segmented mode".into()));
        }
        if self.interval < 1 {
            return Err(Error::Config("--interval must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct CommitmentLine {
    epoch: u64,
    events: usize,
    commitment: String,
}

/// Paths within a state directory.
pub struct StateDir(pub PathBuf);

impl StateDir {
    fn path(&self, name: &str) -> PathBuf {
        self.0.join(name)
    }

    fn config(&self) -> Result<Option<StateConfig>> {
        match fs::read_to_string(self.path("config.json")) {
            Ok(s) => serde_json::from_str(&s).map(Some).map_err(|e| Error::Decode(format!("config.json: {e}"))),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    fn require_config(&self) -> Result<StateConfig> {
        self.config()?
            .ok_or_else(|| Error::Config(format!("no state in {}; run `vcause ingest` first", self.0.display())))
    }

    fn secret_key(&self, over: &Option<PathBuf>) -> Result<SecretKey> {
        let p = over.clone().unwrap_or_else(|| self.path("endpoint.key"));
        SecretKey::from_pem(&fs::read_to_string(&p).map_err(|e| Error::Io(format!("{}: {e}", p.display())))?)
    }

    fn commitments(&self) -> Result<Vec<(usize, Commitment)>> {
        let text = match fs::read_to_string(self.path("commitments.jsonl")) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(vec![]),
            Err(e) => return Err(e.into()),
        };
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let c: CommitmentLine = serde_json::from_str(l).map_err(|e| Error::Decode(e.to_string()))?;
                let bytes = hex::decode(&c.commitment).map_err(|e| Error::Decode(e.to_string()))?;
                Ok((c.events, Commitment::from_bytes(&bytes)?))
            })
            .collect()
    }

    fn log(&self) -> Result<Vec<EventRecord>> {
        match fs::File::open(self.path("events.jsonl")) {
            Ok(f) => Ok(crate::ingest::parse_jsonl(BufReader::new(f), Policy::Strict)?.events),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(vec![]),
            Err(e) => Err(e.into()),
        }
    }

    /// Loads the cloud replica from its snapshot, or replays the log.
    pub fn cloud(&self, cfg: &StateConfig) -> Result<Cloud> {
        let log = self.log()?;
        let mut cloud = Cloud::new();
        let restored = fs::read(self.path("cloud.snap")).ok().and_then(|b| CloudEndpoint::restore(&b, log.clone()).ok());
        match restored {
            Some(ep) => cloud.insert(&cfg.endpoint_id, ep),
            None => {
                cloud.register(&cfg.endpoint_id, cfg.graph_mode())?;
                let batches = batches_from_log(&log, &self.commitments()?)?;
                cloud.cloud_replay(&cfg.endpoint_id, &batches)?;
            }
        }
        Ok(cloud)
    }

    fn save_cloud(&self, cfg: &StateConfig, cloud: &Cloud) -> Result<()> {
        fs::write(self.path("cloud.snap"), cloud.endpoint(&cfg.endpoint_id)?.snapshot()?)?;
        Ok(())
    }
}

fn mode_name(m: Mode) -> String {
    match m {
        Mode::Segmented(l) => format!("segmented(L={l})"),
        Mode::Unsegmented => "unsegmented".into(),
    }
}

fn read_pk(p: &Path) -> Result<PublicKey> {
    PublicKey::from_pem(&fs::read_to_string(p).map_err(|e| Error::Io(format!("{}: {e}", p.display())))?)
}

struct Out<'a> {
    w: &'a mut dyn Write,
    format: Format,
}

impl Out<'_> {
    fn emit(&mut self, human: String, j: serde_json::Value) -> Result<()> {
        match self.format {
            Format::Human => writeln!(self.w, "{human}")?,
            Format::Json => {
                let mut j = j;
                j["v"] = json!(JSON_SCHEMA);
                writeln!(self.w, "{j}")?
            }
        }
        Ok(())
    }
}

fn commitment_json(c: &Commitment) -> serde_json::Value {
    json!({
        "epoch": c.epoch,
        "root": c.root.to_hex(),
        "registry": c.registry_digest.to_hex(),
        "timestamp": c.timestamp,
        "size": c.encoded_len(),
    })
}

fn emit_commitment(out: &mut Out<'_>, c: &Commitment) -> Result<()> {
    out.emit(
        format!("epoch {} root {} size {}", c.epoch, c.root.to_hex(), c.encoded_len()),
        json!({"event": "commitment", "commitment": commitment_json(c)}),
    )
}

/// Ships new batches to the cloud and persists everything.
fn publish(dir: &StateDir, cfg: &StateConfig, ep: &mut Endpoint) -> Result<()> {
    let batches = ep.take_batches();
    let mut cloud = dir.cloud(cfg)?;
    let mut total = cloud.endpoint(&cfg.endpoint_id)?.log().len();
    cloud.cloud_replay(&cfg.endpoint_id, &batches)?;
    let mut events = fs::OpenOptions::new().create(true).append(true).open(dir.path("events.jsonl"))?;
    let mut commits = fs::OpenOptions::new().create(true).append(true).open(dir.path("commitments.jsonl"))?;
    let mut ev_buf = Vec::new();
    for b in &batches {
        write_jsonl(&mut ev_buf, &b.events)?;
        total += b.events.len();
        let line = CommitmentLine { epoch: b.commitment.epoch, events: total, commitment: hex::encode(b.commitment.to_bytes()) };
        writeln!(commits, "{}", serde_json::to_string(&line).map_err(|e| Error::Decode(e.to_string()))?)?;
    }
    events.write_all(&ev_buf)?;
    fs::write(dir.path("endpoint.snap"), ep.snapshot()?)?;
    dir.save_cloud(cfg, &cloud)
}

fn load_endpoint(dir: &StateDir, cfg: &StateConfig, keys: &KeyArgs) -> Result<Endpoint> {
    let sk = dir.secret_key(&keys.key)?;
    match fs::read(dir.path("endpoint.snap")) {
        Ok(b) => Endpoint::restore(&b, sk),
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            let c = EndpointConfig { id: cfg.endpoint_id.clone(), mode: cfg.graph_mode(), commit_interval: cfg.interval };
            Endpoint::new(c, sk)
        }
        Err(e) => Err(e.into()),
    }
}

fn init_state(dir: &StateDir, a: &IngestArgs) -> Result<StateConfig> {
    if let Some(cfg) = dir.config()? {
        let want_mode = a.mode.unwrap_or(cfg.mode);
        let want_depth = a.depth.unwrap_or(cfg.depth);
        let want_interval = a.interval.unwrap_or(cfg.interval);
        let want_id = a.endpoint_id.clone().unwrap_or_else(|| cfg.endpoint_id.clone());
        if (want_mode, want_depth, want_interval, &want_id) != (cfg.mode, cfg.depth, cfg.interval, &cfg.endpoint_id) {
            return Err(Error::Config(format!("{} was created with different settings", dir.0.display())));
        }
        return Ok(cfg);
    }
    let cfg = StateConfig {
        version: 1,
        endpoint_id: a.endpoint_id.clone().unwrap_or_else(|| "endpoint-0".into()),
        mode: a.mode.unwrap_or(ModeArg::Segmented),
        depth: a.depth.unwrap_or(1),
        interval: a.interval.unwrap_or(crate::protocol::DEFAULT_COMMIT_INTERVAL),
    };
    cfg.validate()?;
    EndpointConfig { id: cfg.endpoint_id.clone(), mode: cfg.graph_mode(), commit_interval: cfg.interval }.validate()?;
    fs::create_dir_all(&dir.0)?;
    if a.keys.key.is_none() && !dir.path("endpoint.key").exists() {
        let sk = match a.seed {
            Some(s) => SecretKey::from_seed(hash_bytes(&s.to_be_bytes()).0),
            None => SecretKey::generate(&mut rand::rngs::OsRng),
        };
        fs::write(dir.path("endpoint.key"), sk.to_pem())?;
        fs::write(dir.path("endpoint.pub"), sk.public().to_pem())?;
    }
    fs::write(dir.path("config.json"), serde_json::to_string_pretty(&cfg).map_err(|e| Error::Decode(e.to_string()))?)?;
    Ok(cfg)
}

fn cmd_gen(a: &GenArgs, out: &mut Out<'_>) -> Result<()> {
    let cfg = SynthConfig {
        seed: a.seed,
        n_events: a.events,
        n_entities: a.entities,
        actions: a.actions.split(',').filter(|s| !s.is_empty()).map(String::from).collect(),
        zipf_exponent: a.zipf,
        fanout_mean: a.fanout,
        ts_step_mean: a.ts_step,
        tie_prob: a.tie_prob,
    };
    let evs = synth(&cfg)?;
    match &a.out {
        Some(p) => write_jsonl(io::BufWriter::new(fs::File::create(p)?), &evs),
        None => write_jsonl(&mut *out.w, &evs),
    }
}

fn cmd_ingest(g: &Global, a: &IngestArgs, out: &mut Out<'_>) -> Result<()> {
    let dir = StateDir(g.state_dir.clone());
    let cfg = init_state(&dir, a)?;
    let mut ep = load_endpoint(&dir, &cfg, &a.keys)?;
    let policy = if a.lenient { Policy::Lenient } else { Policy::Strict };
    let reader: Box<dyn BufRead + Send> = if a.log.as_os_str() == "-" {
        Box::new(BufReader::new(io::stdin()))
    } else {
        Box::new(BufReader::new(fs::File::open(&a.log).map_err(|e| Error::Io(format!("{}: {e}", a.log.display())))?))
    };
    let mut record = |line: usize, ev: &EventRecord, out: &mut Out<'_>| -> Result<()> {
        match ep.logger_ingest(ev) {
            Ok(Some(c)) => emit_commitment(out, &c),
            Ok(None) => Ok(()),
            Err(e @ Error::ClockRegression { .. }) => Err(Error::Parse { line, msg: e.to_string() }),
            Err(e) => Err(e),
        }
    };
    let mut skipped = 0;
    let mut accepted = 0;
    if a.csv {
        let p = parse_csv(reader, policy)?;
        skipped = p.skipped.len();
        for (i, ev) in p.events.iter().enumerate() {
            record(i + 2, ev, out)?;
            accepted += 1;
        }
    } else {
        let (rx, h) = spawn_parser(reader, policy, 1024);
        for item in rx.iter() {
            let (line, ev) = item?;
            record(line, &ev, out)?;
            accepted += 1;
        }
        skipped = h.join().unwrap_or(skipped);
    }
    publish(&dir, &cfg, &mut ep)?;
    let last = ep.latest().cloned();
    let root = last.as_ref().map(|c| c.root.to_hex()).unwrap_or_default();
    out.emit(
        format!(
            "ingested {accepted} events ({skipped} skipped), {} pending, mode {}; latest root {}",
            ep.replica().pending_events(),
            mode_name(cfg.graph_mode()),
            if root.is_empty() { "none" } else { &root }
        ),
        json!({
            "event": "summary",
            "accepted": accepted,
            "skipped": skipped,
            "pending": ep.replica().pending_events(),
            "mode": mode_name(cfg.graph_mode()),
            "latest": last.as_ref().map(commitment_json),
        }),
    )
}

fn cmd_commit(g: &Global, a: &KeyArgs, out: &mut Out<'_>) -> Result<()> {
    let dir = StateDir(g.state_dir.clone());
    let cfg = dir.require_config()?;
    let mut ep = load_endpoint(&dir, &cfg, a)?;
    let c = ep.logger_commit()?;
    publish(&dir, &cfg, &mut ep)?;
    emit_commitment(out, &c)
}

/// Serialized size of the POI node proof.
fn poi_proof_len(b: &ProofBundle) -> usize {
    let mut w = Writer::new();
    b.poi.write(&mut w);
    w.finish().len()
}

pub fn bundle_summary(b: &ProofBundle, bytes: usize) -> serde_json::Value {
    let (bw, fw) = b.component_nodes();
    let (be, fe) = b.edge_count();
    let segments = b.forward.as_ref().map_or(0, |f| f.segments.len());
    let roots = b.forward.as_ref().map_or(0, |f| f.roots.len());
    let batched = b.forward.as_ref().map_or(0, |f| f.roots.iter().filter(|r| matches!(r, RootProof::Run { .. })).count());
    json!({
        "found": b.poi.found,
        "entity": b.query.entity,
        "key": b.poi.key.map(|k| json!({"ts": k.ts, "seq": k.seq})),
        "direction": b.query.direction.to_string(),
        "backward": b.backward.as_ref().map(|_| json!({"nodes": bw.len(), "edges": be})),
        "forward": b.forward.as_ref().map(|_| json!({"nodes": fw.len(), "edges": fe, "segments": segments, "root_proofs": roots, "batched_root_proofs": batched})),
        "epoch": b.commitment.epoch,
        "bundle_bytes": bytes,
        "poi_proof_bytes": poi_proof_len(b),
    })
}

fn cmd_query(g: &Global, a: &QueryArgs, out: &mut Out<'_>) -> Result<()> {
    let dir = StateDir(g.state_dir.clone());
    let cfg = dir.require_config()?;
    let q = a.target.required()?;
    let cloud = dir.cloud(&cfg)?;
    let b = cloud.cloud_analyze(&cfg.endpoint_id, &q)?;
    let bytes = b.to_bytes();
    let path = a.out.clone().unwrap_or_else(|| dir.path("last.bundle"));
    fs::write(&path, &bytes)?;
    let mut s = bundle_summary(&b, bytes.len());
    s["bundle"] = json!(path.display().to_string());
    let human = if !b.poi.found {
        format!("{}: provably empty (non-membership proof, {} bytes)\nbundle {}", q.entity, bytes.len(), path.display())
    } else {
        let key = b.poi.key.unwrap_or_default();
        let mut h = format!("poi {} @ {} (epoch {})", q.entity, key, b.commitment.epoch);
        if let Some(v) = s["backward"].as_object() {
            h += &format!("\nbackward: {} nodes, {} edges", v["nodes"], v["edges"]);
        }
        if let Some(v) = s["forward"].as_object() {
            h += &format!(
                "\nforward: {} nodes, {} edges, {} segments, {} root proofs",
                v["nodes"], v["edges"], v["segments"], v["root_proofs"]
            );
        }
        h + &format!("\nbundle {} bytes (node proof {} bytes) -> {}", bytes.len(), poi_proof_len(&b), path.display())
    };
    out.emit(human, s)
}

#[derive(Default, Serialize, Deserialize)]
struct AdminState {
    last_seen: std::collections::BTreeMap<String, u64>,
}

fn report_json(r: &VerifyReport) -> serde_json::Value {
    json!({
        "accepted": r.accepted(),
        "commitment_ok": r.commitment_ok,
        "poi_ok": r.poi_ok,
        "backward_ok": r.backward_ok,
        "forward_ok": r.forward_ok,
        "provably_empty": r.provably_empty,
        "first_failure": r.first_failure,
    })
}

/// Returns the exit code.
fn cmd_verify(g: &Global, a: &VerifyArgs, out: &mut Out<'_>) -> Result<i32> {
    let bytes = fs::read(&a.bundle).map_err(|e| Error::Io(format!("{}: {e}", a.bundle.display())))?;
    let b = match ProofBundle::from_bytes(&bytes) {
        Ok(b) => b,
        Err(e) => {
            out.emit(format!("malformed bundle: {e}"), json!({"accepted": false, "malformed": e.to_string()}))?;
            return Ok(EXIT_MALFORMED);
        }
    };
    let vk_path = a.vk.clone().unwrap_or_else(|| g.state_dir.join("endpoint.pub"));
    let vk = read_pk(&vk_path)?;
    let q = a.target.over(&b.query);
    let rep = match &a.admin_state {
        Some(p) => {
            let mut st: AdminState = match fs::read_to_string(p) {
                Ok(s) => serde_json::from_str(&s).map_err(|e| Error::Decode(e.to_string()))?,
                Err(e) if e.kind() == io::ErrorKind::NotFound => AdminState::default(),
                Err(e) => return Err(e.into()),
            };
            let mut admin = Admin::new();
            let id = b.commitment.endpoint_id.clone();
            admin.add_endpoint(&id, vk);
            if let Some(&e) = st.last_seen.get(&id) {
                admin.set_last_seen(&id, e);
            }
            let rep = admin.admin_verify(&q, &b);
            if let Some(e) = admin.last_seen(&id) {
                st.last_seen.insert(id, e);
            }
            fs::write(p, serde_json::to_string_pretty(&st).map_err(|e| Error::Decode(e.to_string()))?)?;
            rep
        }
        None => verify_bundle(&vk, &q, &b),
    };
    let human = if rep.accepted() {
        if rep.provably_empty {
            "ACCEPT (query provably empty)".to_string()
        } else {
            "ACCEPT".to_string()
        }
    } else {
        format!("REJECT {}", rep.first_failure.clone().unwrap_or_default())
    };
    out.emit(human, report_json(&rep))?;
    Ok(if rep.accepted() { EXIT_OK } else { EXIT_REJECTED })
}

fn cmd_tamper(g: &Global, a: &TamperArgs, out: &mut Out<'_>) -> Result<()> {
    let dir = StateDir(g.state_dir.clone());
    let cfg = dir.require_config()?;
    let mut rng = ChaCha20Rng::seed_from_u64(a.seed);
    let mut cloud = dir.cloud(&cfg)?;
    if let Some(bp) = &a.bundle {
        let class: MutationClass = a.class.parse()?;
        let b = ProofBundle::from_bytes(&fs::read(bp)?)?;
        let ep = cloud.endpoint(&cfg.endpoint_id)?;
        let g = ep.replica().graph();
        let mut peers = Vec::new();
        for _ in 0..8 {
            if g.nodes().is_empty() {
                break;
            }
            let n = &g.nodes()[rng.gen_range(0..g.nodes().len())];
            let name = g.entity_name(n.entity).unwrap_or_default();
            peers.push(ep.analyze(&CausalityQuery::new(name, Relation::Le(n.key.ts), b.query.direction))?);
        }
        let old: Vec<Commitment> = ep.commitments().iter().filter(|c| c.epoch < b.commitment.epoch).cloned().collect();
        let donors = Donors { peers: &peers, stale: &[], old_commitments: &old };
        let m = (0..200)
            .find_map(|_| mutate(class, &b, &donors, &mut rng))
            .ok_or_else(|| Error::Config(format!("{} does not apply to this bundle", class.name())))?;
        let dst = a.out.clone().unwrap_or_else(|| bp.clone());
        fs::write(&dst, m.to_bytes())?;
        return out.emit(
            format!("applied {} -> {}", class.name(), dst.display()),
            json!({"class": class.name(), "bundle": dst.display().to_string()}),
        );
    }
    let t: StateTamper = a.class.parse()?;
    let (entity, ts) = tamper_state(cloud.endpoint_mut(&cfg.endpoint_id)?, t, &mut rng)?;
    dir.save_cloud(&cfg, &cloud)?;
    out.emit(
        format!("tampered cloud state ({}); affected: --entity {entity} --at {ts} --direction forward", a.class),
        json!({"class": a.class, "entity": entity, "at": ts}),
    )
}

fn bench_stream(events: usize, seed: u64) -> Result<Vec<EventRecord>> {
    synth(&SynthConfig { seed, n_events: events, n_entities: (events / 10).max(10), ..Default::default() })
}

fn cmd_bench(a: &BenchArgs, out: &mut Out<'_>) -> Result<()> {
    let w = &mut *out.w;
    match a.workload {
        Workload::Insertion => {
            writeln!(w, "leaves,total_ns,merges,node_hashes")?;
            for exp in 10..=a.max_exp.unwrap_or(18) {
                let n = 1u64 << exp;
                let (h0, _) = hash_counters();
                let t = Instant::now();
                let mut tree = DimTree::new();
                for i in 0..n {
                    tree.insert(LeafRecord { key: i as u128, payload: hash_bytes(&i.to_be_bytes()) })?;
                }
                let ns = t.elapsed().as_nanos();
                writeln!(w, "{n},{ns},{},{}", tree.merges(), hash_counters().0 - h0)?;
            }
        }
        Workload::Updates => {
            writeln!(w, "events,segmented_mean,segmented_max,unsegmented_mean,unsegmented_max")?;
            let evs = bench_stream(a.events, a.seed)?;
            let bucket = (evs.len() / 10).max(1);
            let mut seg = Graph::new(Mode::Segmented(1))?;
            let mut uns = Graph::new(Mode::Unsegmented)?;
            for chunk in evs.chunks(bucket) {
                let (mut s_sum, mut s_max, mut u_sum, mut u_max) = (0usize, 0usize, 0usize, 0usize);
                for e in chunk {
                    let s = seg.record_event(e)?.updates();
                    let u = uns.record_event(e)?.updates();
                    s_sum += s;
                    u_sum += u;
                    s_max = s_max.max(s);
                    u_max = u_max.max(u);
                }
                let k = chunk.len() as f64;
                writeln!(w, "{},{:.3},{s_max},{:.3},{u_max}", seg.event_count(), s_sum as f64 / k, u_sum as f64 / k)?;
            }
        }
        Workload::Proof => {
            writeln!(w, "component_nodes,component_edges,prove_ns,verify_ns,bundle_bytes")?;
            let evs = synth(&SynthConfig { seed: a.seed, n_events: a.events.min(20_000), n_entities: 200, ..Default::default() })?;
            let sk = SecretKey::from_seed([1; 32]);
            let mut ep = Endpoint::new(EndpointConfig { commit_interval: u64::MAX, ..EndpointConfig::new("bench") }, sk)?;
            for e in &evs {
                ep.logger_ingest(e)?;
            }
            ep.logger_commit()?;
            let vk = ep.public_key();
            let mut rng = ChaCha20Rng::seed_from_u64(a.seed);
            for _ in 0..40 {
                let e = &evs[rng.gen_range(0..evs.len())];
                let q = CausalityQuery::new(&e.dst, Relation::Le(e.ts), Direction::Both);
                let t = Instant::now();
                let b = ep.analyze(&q)?;
                let prove = t.elapsed().as_nanos();
                let t = Instant::now();
                let ok = verify_bundle(&vk, &q, &b).accepted();
                let verify = t.elapsed().as_nanos();
                if !ok {
                    return Err(Error::Config("honest bundle rejected".into()));
                }
                let (bn, fnn) = b.component_nodes();
                let (be, fe) = b.edge_count();
                writeln!(w, "{},{},{prove},{verify},{}", bn.len() + fnn.len(), be + fe, b.to_bytes().len())?;
            }
        }
        Workload::Commitment => {
            writeln!(w, "events,commitment_bytes")?;
            let max = a.max_exp.unwrap_or(5);
            let evs = bench_stream(10usize.pow(max), a.seed)?;
            let sk = SecretKey::from_seed([1; 32]);
            let mut ep = Endpoint::new(EndpointConfig { commit_interval: u64::MAX, ..EndpointConfig::new("bench") }, sk)?;
            let mut next = 100;
            for (i, e) in evs.iter().enumerate() {
                ep.logger_ingest(e)?;
                if i + 1 == next {
                    writeln!(w, "{next},{}", ep.logger_commit()?.to_bytes().len())?;
                    next *= 10;
                }
            }
        }
    }
    Ok(())
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { write!(stderr, "{text}") } else { write!(stdout, "{text}") };
            return code;
        }
    };
    let mut out = Out { w: stdout, format: cli.global.format };
    let res = match &cli.cmd {
        Command::Gen(a) => cmd_gen(a, &mut out).map(|_| EXIT_OK),
        Command::Ingest(a) => cmd_ingest(&cli.global, a, &mut out).map(|_| EXIT_OK),
        Command::Commit(a) => cmd_commit(&cli.global, a, &mut out).map(|_| EXIT_OK),
        Command::Query(a) => cmd_query(&cli.global, a, &mut out).map(|_| EXIT_OK),
        Command::Verify(a) => cmd_verify(&cli.global, a, &mut out),
        Command::Tamper(a) => cmd_tamper(&cli.global, a, &mut out).map(|_| EXIT_OK),
        Command::Bench(a) => cmd_bench(a, &mut out).map(|_| EXIT_OK),
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            match e {
                Error::Parse { .. } | Error::Decode(_) => EXIT_MALFORMED,
                _ => EXIT_ERROR,
            }
        }
    }
}

