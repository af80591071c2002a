//! Event log parsing and synthetic workloads.
//!
//! The canonical log is JSONL, one object per line:
//!
//! ```text
//! {"src":"1","action":"write","dst":"2","ts":5}
//! {"src":"proc:42","action":"read","dst":"file:/etc/passwd","ts":6,"payload":"fd=3"}
//! ```
//!
//! Unknown keys are ignored. CSV dumps with the columns
//! `src,action,dst,ts[,payload]` and a header row are accepted too.

use std::io::{BufRead, Read, Write};
use std::sync::mpsc::{sync_channel, Receiver};
use std::thread::JoinHandle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Geometric, Zipf};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::provgraph::EventRecord;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Policy {
    /// Abort on the first malformed line.
    #[default]
    Strict,
    /// Skip malformed lines and count them.
    Lenient,
}

#[derive(Debug, Serialize, Deserialize)]
struct LogLine {
    src: String,
    action: String,
    dst: String,
    ts: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    payload: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Parsed {
    pub events: Vec<EventRecord>,
    /// (line number, message) for each skipped line.
    pub skipped: Vec<(usize, String)>,
    /// Non-empty lines seen.
    pub lines: usize,
}

fn check_names(src: &str, dst: &str) -> std::result::Result<(), String> {
    if src.is_empty() || dst.is_empty() {
        return Err("src and dst must be non-empty".into());
    }
    Ok(())
}

/// Parses one JSONL line; `Ok(None)` for a blank line.
pub fn parse_line(line: &str, lineno: usize) -> Result<Option<EventRecord>> {
    if line.trim().is_empty() {
        return Ok(None);
    }
    let l: LogLine = serde_json::from_str(line).map_err(|e| Error::Parse { line: lineno, msg: e.to_string() })?;
    check_names(&l.src, &l.dst).map_err(|msg| Error::Parse { line: lineno, msg })?;
    Ok(Some(EventRecord {
        src: l.src,
        action: l.action,
        dst: l.dst,
        ts: l.ts,
        payload: l.payload.map(String::into_bytes),
    }))
}

/// Canonical JSONL line for an event, without the trailing newline.
/// Non-UTF-8 payload bytes are replaced.
pub fn to_jsonl(ev: &EventRecord) -> String {
    let l = LogLine {
        src: ev.src.clone(),
        action: ev.action.clone(),
        dst: ev.dst.clone(),
        ts: ev.ts,
        payload: ev.payload.as_ref().map(|p| String::from_utf8_lossy(p).into_owned()),
    };
    serde_json::to_string(&l).expect("log line serializes")
}

pub fn write_jsonl<W: Write>(mut w: W, evs: &[EventRecord]) -> Result<()> {
    for e in evs {
        writeln!(w, "{}", to_jsonl(e))?;
    }
    Ok(())
}

fn split_lines<R: BufRead>(mut r: R, mut f: impl FnMut(usize, std::result::Result<&str, String>) -> Result<bool>) -> Result<()> {
    let mut buf = Vec::new();
    let mut lineno = 0;
    loop {
        buf.clear();
        if r.read_until(b'\n', &mut buf)? == 0 {
            return Ok(());
        }
        lineno += 1;
        let text = std::str::from_utf8(&buf).map_err(|_| "invalid utf-8".to_string());
        if !f(lineno, text.map(|t| t.trim_end_matches(['\n', '\r'])))? {
            return Ok(());
        }
    }
}

pub fn parse_jsonl<R: BufRead>(r: R, policy: Policy) -> Result<Parsed> {
    let mut out = Parsed::default();
    split_lines(r, |lineno, text| {
        let res = match text {
            Ok(t) if t.trim().is_empty() => return Ok(true),
            Ok(t) => parse_line(t, lineno),
            Err(msg) => Err(Error::Parse { line: lineno, msg }),
        };
        out.lines += 1;
        match (res, policy) {
            (Ok(Some(e)), _) => out.events.push(e),
            (Ok(None), _) => {}
            (Err(e), Policy::Strict) => return Err(e),
            (Err(Error::Parse { line, msg }), Policy::Lenient) => out.skipped.push((line, msg)),
            (Err(e), Policy::Lenient) => out.skipped.push((lineno, e.to_string())),
        }
        Ok(true)
    })?;
    Ok(out)
}

pub fn parse_csv<R: Read>(r: R, policy: Policy) -> Result<Parsed> {
    let mut rd = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(r);
    let headers = rd.headers().map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?.clone();
    let want = ["src", "action", "dst", "ts"];
    if headers.len() < 4 || headers.iter().take(4).ne(want) || (headers.len() > 4 && &headers[4] != "payload") {
        return Err(Error::Parse { line: 1, msg: "expected header src,action,dst,ts[,payload]".into() });
    }
    let mut out = Parsed::default();
    for (i, rec) in rd.records().enumerate() {
        let lineno = i + 2;
        out.lines += 1;
        let res = rec.map_err(|e| e.to_string()).and_then(|rec| {
            if rec.len() < 4 || rec.len() > 5 {
                return Err(format!("expected 4 or 5 columns, got {}", rec.len()));
            }
            let ts: u64 = rec[3].trim().parse().map_err(|e| format!("bad ts: {e}"))?;
            check_names(&rec[0], &rec[2])?;
            Ok(EventRecord {
                src: rec[0].to_string(),
                action: rec[1].to_string(),
                dst: rec[2].to_string(),
                ts,
                payload: rec.get(4).filter(|p| !p.is_empty()).map(|p| p.as_bytes().to_vec()),
            })
        });
        match (res, policy) {
            (Ok(e), _) => out.events.push(e),
            (Err(msg), Policy::Strict) => return Err(Error::Parse { line: lineno, msg }),
            (Err(msg), Policy::Lenient) => out.skipped.push((lineno, msg)),
        }
    }
    Ok(out)
}

/// Parses JSONL on a background thread into a bounded queue of
/// (line number, event). The parser blocks while the queue is full. Lines
/// that fail to parse are sent as errors under `Strict` (and end the stream)
/// and dropped under `Lenient`.
pub fn spawn_parser<R: BufRead + Send + 'static>(
    r: R,
    policy: Policy,
    capacity: usize,
) -> (Receiver<Result<(usize, EventRecord)>>, JoinHandle<usize>) {
    let (tx, rx) = sync_channel(capacity.max(1));
    let h = std::thread::spawn(move || {
        let mut skipped = 0;
        let _ = split_lines(r, |lineno, text| {
            let res = match text {
                Ok(t) => parse_line(t, lineno),
                Err(msg) => Err(Error::Parse { line: lineno, msg }),
            };
            let keep_going = match res {
                Ok(None) => true,
                Ok(Some(e)) => tx.send(Ok((lineno, e))).is_ok(),
                Err(_) if policy == Policy::Lenient => {
                    skipped += 1;
                    true
                }
                Err(e) => {
                    let _ = tx.send(Err(e));
                    false
                }
            };
            Ok(keep_going)
        })
        .map_err(|e| tx.send(Err(e)));
        skipped
    });
    (rx, h)
}

/// Parameters of a synthetic workload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_events: usize,
    pub n_entities: usize,
    pub actions: Vec<String>,
    /// Zipf exponent of entity popularity; 0 is uniform.
    pub zipf_exponent: f64,
    /// Mean number of consecutive events sharing a source (geometric).
    pub fanout_mean: f64,
    /// Mean timestamp step between events that are not ties (geometric, >= 1).
    pub ts_step_mean: f64,
    /// Probability that an event repeats the previous timestamp.
    pub tie_prob: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 42,
            n_events: 1000,
            n_entities: 100,
            actions: ["read", "write", "exec", "connect", "fork"].map(String::from).to_vec(),
            zipf_exponent: 1.0,
            fanout_mean: 2.0,
            ts_step_mean: 3.0,
            tie_prob: 0.1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_entities == 0 {
            return bad("n_entities must be at least 1");
        }
        if self.actions.is_empty() {
            return bad("action alphabet is empty");
        }
        if !(self.zipf_exponent.is_finite() && self.zipf_exponent >= 0.0) {
            return bad("zipf exponent must be finite and non-negative");
        }
        if !(self.fanout_mean.is_finite() && self.fanout_mean >= 1.0) {
            return bad("fan-out mean must be at least 1");
        }
        if !(self.ts_step_mean.is_finite() && self.ts_step_mean >= 1.0) {
            return bad("timestamp step mean must be at least 1");
        }
        if !(0.0..1.0).contains(&self.tie_prob) {
            return bad("tie probability must be in [0, 1)");
        }
        Ok(())
    }
}

pub fn entity_name(idx: usize) -> String {
    format!("e{idx}")
}

/// Generates a stream in bursts: one source writes to `fanout` destinations in
/// a row. Sources and destinations are drawn by popularity rank. Consecutive
/// bursts use different sources, so source runs in the output are exactly the
/// bursts.
pub fn synth(cfg: &SynthConfig) -> Result<Vec<EventRecord>> {
    cfg.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let n = cfg.n_entities;
    let zipf = Zipf::new(n as u64, cfg.zipf_exponent).map_err(|e| Error::Config(e.to_string()))?;
    let fan = Geometric::new(1.0 / cfg.fanout_mean).map_err(|e| Error::Config(e.to_string()))?;
    let step = Geometric::new(1.0 / cfg.ts_step_mean).map_err(|e| Error::Config(e.to_string()))?;
    let pick = |rng: &mut ChaCha20Rng| zipf.sample(rng) as usize - 1;

    let mut out = Vec::with_capacity(cfg.n_events);
    let mut ts: u64 = 0;
    let mut prev_src = usize::MAX;
    while out.len() < cfg.n_events {
        let mut src = pick(&mut rng);
        while n > 1 && src == prev_src {
            src = pick(&mut rng);
        }
        prev_src = src;
        let burst = 1 + fan.sample(&mut rng) as usize;
        for _ in 0..burst.min(cfg.n_events - out.len()) {
            let mut dst = pick(&mut rng);
            while n > 1 && dst == src {
                dst = pick(&mut rng);
            }
            if !out.is_empty() && !rng.gen_bool(cfg.tie_prob) {
                ts += 1 + step.sample(&mut rng);
            }
            let action = &cfg.actions[rng.gen_range(0..cfg.actions.len())];
            out.push(EventRecord::new(&entity_name(src), action, &entity_name(dst), ts));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_canonical_line() {
        let p = parse_jsonl(r#"{"src":"1","action":"write","dst":"2","ts":5}"#.as_bytes(), Policy::Strict).unwrap();
        assert_eq!(p.events, vec![EventRecord::new("1", "write", "2", 5)]);
        assert_eq!(p.lines, 1);
    }

    #[test]
    fn empty_input() {
        assert_eq!(parse_jsonl(&b""[..], Policy::Strict).unwrap(), Parsed::default());
        assert_eq!(parse_jsonl(&b"\n  \n"[..], Policy::Strict).unwrap().events, vec![]);
    }

    #[test]
    fn payload_and_extra_keys() {
        let line = r#"{"ts":6,"dst":"f","extra":[1],"src":"p","action":"read","payload":"fd=3"}"#;
        let e = parse_line(line, 1).unwrap().unwrap();
        assert_eq!(e.payload.as_deref(), Some(&b"fd=3"[..]));
        assert_eq!(to_jsonl(&e), r#"{"src":"p","action":"read","dst":"f","ts":6,"payload":"fd=3"}"#);
    }

    #[test]
    fn strict_and_lenient() {
        let text = "{\"src\":\"a\",\"action\":\"w\",\"dst\":\"b\",\"ts\":1}\nnot json\n{\"src\":\"\",\"action\":\"w\",\"dst\":\"b\",\"ts\":2}\n{\"src\":\"a\",\"action\":\"w\",\"dst\":\"b\",\"ts\":-1}\n\n{\"src\":\"a\",\"action\":\"w\",\"dst\":\"b\",\"ts\":3}\n";
        match parse_jsonl(text.as_bytes(), Policy::Strict) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let p = parse_jsonl(text.as_bytes(), Policy::Lenient).unwrap();
        assert_eq!(p.events.len(), 2);
        assert_eq!(p.skipped.iter().map(|s| s.0).collect::<Vec<_>>(), vec![2, 3, 4]);
        assert_eq!(p.lines, 5);
    }

    #[test]
    fn csv_adapter() {
        let text = "src,action,dst,ts\na,read,b,1\nc,write,d,2\nbad,row\n";
        let p = parse_csv(text.as_bytes(), Policy::Lenient).unwrap();
        assert_eq!(p.events, vec![EventRecord::new("a", "read", "b", 1), EventRecord::new("c", "write", "d", 2)]);
        assert_eq!(p.skipped.len(), 1);
        assert!(parse_csv(text.as_bytes(), Policy::Strict).is_err());
        let with_payload = "src,action,dst,ts,payload\na,read,b,1,x\n";
        assert_eq!(parse_csv(with_payload.as_bytes(), Policy::Strict).unwrap().events[0].payload, Some(b"x".to_vec()));
        assert!(parse_csv("a,b,c\n".as_bytes(), Policy::Strict).is_err());
    }

    #[test]
    fn background_parser_streams_in_order() {
        let evs = synth(&SynthConfig { n_events: 500, ..Default::default() }).unwrap();
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &evs).unwrap();
        buf.extend_from_slice(b"garbage\n");
        let (rx, h) = spawn_parser(std::io::Cursor::new(buf.clone()), Policy::Lenient, 4);
        let got: Vec<EventRecord> = rx.iter().map(|r| r.unwrap().1).collect();
        assert_eq!(got, evs);
        assert_eq!(h.join().unwrap(), 1);
        let (rx, _) = spawn_parser(std::io::Cursor::new(buf), Policy::Strict, 4);
        let last = rx.iter().last().unwrap();
        assert!(matches!(last, Err(Error::Parse { line: 501, .. })));
    }

    #[test]
    fn synth_is_deterministic() {
        let cfg = SynthConfig::default();
        assert_eq!(synth(&cfg).unwrap(), synth(&cfg).unwrap());
        let other = SynthConfig { seed: 43, ..cfg.clone() };
        assert_ne!(synth(&cfg).unwrap(), synth(&other).unwrap());
    }

    #[test]
    fn single_entity_self_targets() {
        let evs = synth(&SynthConfig { n_entities: 1, n_events: 50, ..Default::default() }).unwrap();
        assert!(evs.iter().all(|e| e.src == "e0" && e.dst == "e0"));
    }

    #[test]
    fn synth_rejects_bad_config() {
        for cfg in [
            SynthConfig { n_entities: 0, ..Default::default() },
            SynthConfig { tie_prob: 1.0, ..Default::default() },
            SynthConfig { fanout_mean: 0.5, ..Default::default() },
            SynthConfig { zipf_exponent: f64::NAN, ..Default::default() },
            SynthConfig { actions: vec![], ..Default::default() },
            SynthConfig { ts_step_mean: 0.0, ..Default::default() },
        ] {
            assert!(matches!(synth(&cfg), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn synth_statistics_match_config() {
        let cfg = SynthConfig { n_events: 100_000, n_entities: 500, fanout_mean: 3.0, tie_prob: 0.2, ..Default::default() };
        let evs = synth(&cfg).unwrap();
        assert_eq!(evs.len(), cfg.n_events);
        assert!(evs.windows(2).all(|w| w[0].ts <= w[1].ts));
        let ties = evs.windows(2).filter(|w| w[0].ts == w[1].ts).count() as f64 / (evs.len() - 1) as f64;
        assert!((ties - cfg.tie_prob).abs() <= 0.05 * cfg.tie_prob, "tie rate {ties}");
        let runs = 1 + evs.windows(2).filter(|w| w[0].src != w[1].src).count();
        let fanout = evs.len() as f64 / runs as f64;
        assert!((fanout - cfg.fanout_mean).abs() <= 0.05 * cfg.fanout_mean, "fan-out {fanout}");
        // Popularity is skewed towards low ranks.
        let top = evs.iter().filter(|e| e.dst == "e0").count();
        let mid = evs.iter().filter(|e| e.dst == "e250").count();
        assert!(top > 20 * mid.max(1));
    }

    #[test]
    fn round_trip_on_generated_corpus() {
        let mut evs = synth(&SynthConfig { n_events: 300, ..Default::default() }).unwrap();
        for (i, e) in evs.iter_mut().enumerate().filter(|(i, _)| i % 7 == 0) {
            e.payload = Some(format!("p\"{i}\\ü").into_bytes());
        }
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &evs).unwrap();
        let back = parse_jsonl(&buf[..], Policy::Strict).unwrap().events;
        assert_eq!(back, evs);
        let mut again = Vec::new();
        write_jsonl(&mut again, &back).unwrap();
        assert_eq!(again, buf);
    }

    proptest! {
        #[test]
        fn parser_total_on_arbitrary_bytes(data in proptest::collection::vec(any::<u8>(), 0..400)) {
            let p = parse_jsonl(&data[..], Policy::Lenient).unwrap();
            prop_assert_eq!(p.events.len() + p.skipped.len(), p.lines);
            let _ = parse_jsonl(&data[..], Policy::Strict);
            let _ = parse_csv(&data[..], Policy::Lenient);
        }

        #[test]
        fn parser_total_on_json_like_lines(
            lines in proptest::collection::vec("[{}\":,a-z0-9 -]{0,40}", 0..20)
        ) {
            let text = lines.join("\n");
            let p = parse_jsonl(text.as_bytes(), Policy::Lenient).unwrap();
            let nonblank = lines.iter().filter(|l| !l.trim().is_empty()).count();
            prop_assert_eq!(p.lines, nonblank);
            prop_assert_eq!(p.events.len() + p.skipped.len(), nonblank);
        }
    }
}
