//! Event stream and derived metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metacog::{AgentLevel, Verdict};

pub const METRICS_HEADER: &str = "recist-metrics v1";
pub const EVENT_COLUMNS: [&str; 7] = ["seq", "time", "layer", "node", "scope", "kind", "data"];
pub const RATE_COLUMNS: [&str; 8] = ["scope", "Best", "Accepted", "Rejected", "Harmful", "RDR", "responses", "spawned"];
pub const RECOVERY_COLUMNS: [&str; 14] = [
    "node",
    "flag_time",
    "recovery_time",
    "elapsed",
    "containment",
    "diagnosis",
    "meta",
    "knowledge",
    "paths",
    "agent_calls",
    "best",
    "accepted",
    "rejected",
    "harmful",
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TelemetryError {
    #[error("no verdicts in scope {0}")]
    EmptyScope(String),
    #[error("event at {time} precedes the stream head at {head}")]
    OrderViolation { time: f64, head: f64 },
    #[error("import line {line}: {message}")]
    Import { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    Run,
    Fault,
    Containment,
    Diagnosis,
    Meta,
    Knowledge,
}

impl Layer {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Run => "run",
            Self::Fault => "fault",
            Self::Containment => "containment",
            Self::Diagnosis => "diagnosis",
            Self::Meta => "meta",
            Self::Knowledge => "knowledge",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [
            Self::Run,
            Self::Fault,
            Self::Containment,
            Self::Diagnosis,
            Self::Meta,
            Self::Knowledge,
        ]
        .into_iter()
        .find(|l| l.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    Failure {
        failure: String,
    },
    Flagged,
    Contained {
        placed: usize,
        unplaced: usize,
        duration: f64,
    },
    Diagnosed {
        variables: usize,
        edges: usize,
        lines: u64,
        pair_queries: u64,
        duration: f64,
    },
    Verdict {
        hypothesis: String,
        verdict: Verdict,
        gamma: f64,
        level: AgentLevel,
    },
    Agents {
        spawned: u32,
        system_spawned: u32,
        system_invoked: u32,
        invocations: usize,
        paths: usize,
        duration: f64,
    },
    Stored {
        placement: String,
        duration: f64,
    },
    Recovered,
    Escalated {
        reason: String,
    },
    CpuSample {
        percent: f64,
        synthetic: bool,
    },
    OrderViolation {
        rejected_time: f64,
    },
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Failure { .. } => "failure",
            Self::Flagged => "flagged",
            Self::Contained { .. } => "contained",
            Self::Diagnosed { .. } => "diagnosed",
            Self::Verdict { .. } => "verdict",
            Self::Agents { .. } => "agents",
            Self::Stored { .. } => "stored",
            Self::Recovered => "recovered",
            Self::Escalated { .. } => "escalated",
            Self::CpuSample { .. } => "cpu_sample",
            Self::OrderViolation { .. } => "order_violation",
        }
    }

    fn duration(&self) -> Option<(Layer, f64)> {
        match self {
            Self::Contained { duration, .. } => Some((Layer::Containment, *duration)),
            Self::Diagnosed { duration, .. } => Some((Layer::Diagnosis, *duration)),
            Self::Agents { duration, .. } => Some((Layer::Meta, *duration)),
            Self::Stored { duration, .. } => Some((Layer::Knowledge, *duration)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub time: f64,
    pub layer: Layer,
    pub node: Option<String>,
    /// Dataset or run label the event belongs to.
    pub scope: Option<String>,
    #[serde(flatten)]
    pub kind: EventKind,
}

/// Append-only, time-ordered event log.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EventStream {
    events: Vec<Event>,
}

impl EventStream {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    fn head(&self) -> f64 {
        self.events.last().map_or(f64::NEG_INFINITY, |e| e.time)
    }

    /// Appends an event. An event earlier than the stream head is dropped
    /// and an order-violation marker is appended in its place.
    pub fn record(
        &mut self,
        time: f64,
        layer: Layer,
        node: Option<&str>,
        scope: Option<&str>,
        kind: EventKind,
    ) -> Result<(), TelemetryError> {
        let head = self.head();
        let (time, kind, result) = if time.is_nan() || time < head {
            (
                head,
                EventKind::OrderViolation { rejected_time: time },
                Err(TelemetryError::OrderViolation { time, head }),
            )
        } else {
            (time, kind, Ok(()))
        };
        self.events.push(Event {
            seq: self.events.len() as u64,
            time,
            layer,
            node: node.map(str::to_string),
            scope: scope.map(str::to_string),
            kind,
        });
        result
    }

    pub fn order_violations(&self) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e.kind, EventKind::OrderViolation { .. }))
            .count()
    }
}

/// Decision-quality rates with the usual column names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionQualityRates {
    #[serde(rename = "Best")]
    pub best: f64,
    #[serde(rename = "Accepted")]
    pub accepted: f64,
    #[serde(rename = "Rejected")]
    pub rejected: f64,
    #[serde(rename = "Harmful")]
    pub harmful: f64,
    #[serde(rename = "RDR")]
    pub rdr: f64,
    pub responses: u64,
    pub spawned: u64,
    pub system_invoked: u64,
}

fn in_scope(e: &Event, scope: Option<&str>) -> bool {
    scope.is_none_or(|s| e.scope.as_deref() == Some(s))
}

/// Verdict shares over the scope (`None` for the whole run). RDR is
/// system-level agents invoked over agents spawned.
pub fn compute_rates(events: &[Event], scope: Option<&str>) -> Result<DecisionQualityRates, TelemetryError> {
    let mut counts: BTreeMap<Verdict, u64> = BTreeMap::new();
    let (mut spawned, mut invoked) = (0u64, 0u64);
    for e in events.iter().filter(|e| in_scope(e, scope)) {
        match &e.kind {
            EventKind::Verdict { verdict, .. } => *counts.entry(*verdict).or_default() += 1,
            EventKind::Agents {
                spawned: s,
                system_invoked,
                ..
            } => {
                spawned += u64::from(*s);
                invoked += u64::from(*system_invoked);
            }
            _ => {}
        }
    }
    let total: u64 = counts.values().sum();
    if total == 0 {
        return Err(TelemetryError::EmptyScope(scope.unwrap_or("run").to_string()));
    }
    let rate = |v: Verdict| counts.get(&v).copied().unwrap_or(0) as f64 / total as f64;
    Ok(DecisionQualityRates {
        best: rate(Verdict::Best),
        accepted: rate(Verdict::Accepted),
        rejected: rate(Verdict::Rejected),
        harmful: rate(Verdict::Harmful),
        rdr: if spawned == 0 { 0.0 } else { invoked as f64 / spawned as f64 },
        responses: total,
        spawned,
        system_invoked: invoked,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryRecord {
    pub node: String,
    pub flag_time: f64,
    pub recovery_time: Option<f64>,
    pub elapsed: Option<f64>,
    pub layers: BTreeMap<Layer, f64>,
    pub paths: usize,
    pub agent_calls: usize,
    pub verdicts: BTreeMap<Verdict, u64>,
    pub cpu_mean: Option<f64>,
    pub cpu_max: Option<f64>,
}

/// One record per flag, closed by the node's next recovery.
pub fn recovery_records(events: &[Event]) -> Vec<RecoveryRecord> {
    let mut open: BTreeMap<String, RecoveryRecord> = BTreeMap::new();
    let mut cpu: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut done = Vec::new();
    let close = |mut r: RecoveryRecord, samples: Vec<f64>, at: Option<f64>| {
        r.recovery_time = at;
        r.elapsed = at.map(|t| t - r.flag_time);
        if !samples.is_empty() {
            r.cpu_mean = Some(samples.iter().sum::<f64>() / samples.len() as f64);
            r.cpu_max = samples.iter().copied().reduce(f64::max);
        }
        r
    };
    for e in events {
        let Some(node) = &e.node else { continue };
        match &e.kind {
            EventKind::Flagged => {
                if let Some(prev) = open.remove(node) {
                    done.push(close(prev, cpu.remove(node).unwrap_or_default(), None));
                }
                open.insert(
                    node.clone(),
                    RecoveryRecord {
                        node: node.clone(),
                        flag_time: e.time,
                        recovery_time: None,
                        elapsed: None,
                        layers: BTreeMap::new(),
                        paths: 0,
                        agent_calls: 0,
                        verdicts: BTreeMap::new(),
                        cpu_mean: None,
                        cpu_max: None,
                    },
                );
            }
            EventKind::Recovered => {
                if let Some(r) = open.remove(node) {
                    done.push(close(r, cpu.remove(node).unwrap_or_default(), Some(e.time)));
                }
            }
            EventKind::CpuSample { percent, .. } => cpu.entry(node.clone()).or_default().push(*percent),
            kind => {
                let Some(r) = open.get_mut(node) else { continue };
                if let Some((layer, d)) = kind.duration() {
                    *r.layers.entry(layer).or_default() += d;
                }
                match kind {
                    EventKind::Agents { paths, invocations, .. } => {
                        r.paths += paths;
                        r.agent_calls += invocations;
                    }
                    EventKind::Verdict { verdict, .. } => *r.verdicts.entry(*verdict).or_default() += 1,
                    _ => {}
                }
            }
        }
    }
    for (node, r) in open {
        let samples = cpu.remove(&node).unwrap_or_default();
        done.push(close(r, samples, None));
    }
    done.sort_by(|a, b| a.flag_time.total_cmp(&b.flag_time).then(a.node.cmp(&b.node)));
    done
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or(String::new(), |v| format!("{v:.9}"))
}

/// CSV of the event stream behind a version line.
pub fn export_csv(events: &[Event]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(EVENT_COLUMNS).expect("in-memory write");
    for e in events {
        let data = serde_json::to_value(&e.kind).expect("events serialize");
        let mut data = data.as_object().cloned().unwrap_or_default();
        data.remove("kind");
        w.write_record([
            e.seq.to_string(),
            format!("{:.9}", e.time),
            e.layer.as_str().to_string(),
            e.node.clone().unwrap_or_default(),
            e.scope.clone().unwrap_or_default(),
            e.kind.name().to_string(),
            serde_json::Value::Object(data).to_string(),
        ])
        .expect("in-memory write");
    }
    let body = String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv");
    format!("# {METRICS_HEADER}\n{body}")
}

pub fn import_csv(text: &str) -> Result<Vec<Event>, TelemetryError> {
    let err = |line: usize, message: String| TelemetryError::Import { line, message };
    let body = text
        .strip_prefix(&format!("# {METRICS_HEADER}\n"))
        .ok_or_else(|| err(1, "missing version line".into()))?;
    let mut r = csv::Reader::from_reader(body.as_bytes());
    let header = r.headers().map_err(|e| err(2, e.to_string()))?;
    if header.iter().ne(EVENT_COLUMNS) {
        return Err(err(2, "unexpected columns".into()));
    }
    let mut out = Vec::new();
    for (i, row) in r.records().enumerate() {
        let line = i + 3;
        let row = row.map_err(|e| err(line, e.to_string()))?;
        let mut data: serde_json::Map<String, serde_json::Value> =
            serde_json::from_str(&row[6]).map_err(|e| err(line, e.to_string()))?;
        data.insert("kind".into(), row[5].into());
        let opt = |s: &str| (!s.is_empty()).then(|| s.to_string());
        out.push(Event {
            seq: row[0].parse().map_err(|_| err(line, "bad seq".into()))?,
            time: row[1].parse().map_err(|_| err(line, "bad time".into()))?,
            layer: Layer::parse(&row[2]).ok_or_else(|| err(line, format!("unknown layer `{}`", &row[2])))?,
            node: opt(&row[3]),
            scope: opt(&row[4]),
            kind: serde_json::from_value(serde_json::Value::Object(data)).map_err(|e| err(line, e.to_string()))?,
        });
    }
    Ok(out)
}

pub fn export_jsonl(events: &[Event]) -> String {
    let mut s = format!("{}\n", serde_json::json!({ "schema": METRICS_HEADER }));
    for e in events {
        let _ = writeln!(s, "{}", serde_json::to_string(e).expect("events serialize"));
    }
    s
}

pub fn import_jsonl(text: &str) -> Result<Vec<Event>, TelemetryError> {
    let err = |line: usize, message: String| TelemetryError::Import { line, message };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, head) = lines.next().ok_or_else(|| err(1, "empty input".into()))?;
    let head: serde_json::Value = serde_json::from_str(head).map_err(|e| err(1, e.to_string()))?;
    if head["schema"] != METRICS_HEADER {
        return Err(err(1, "missing schema line".into()));
    }
    lines
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| err(i + 1, e.to_string())))
        .collect()
}

/// Rates table, one row per scope.
pub fn rates_csv(rows: &[(String, DecisionQualityRates)]) -> String {
    let mut s = format!("# {METRICS_HEADER}\n{}\n", RATE_COLUMNS.join(","));
    for (scope, r) in rows {
        let _ = writeln!(
            s,
            "{scope},{:.9},{:.9},{:.9},{:.9},{:.9},{},{}",
            r.best, r.accepted, r.rejected, r.harmful, r.rdr, r.responses, r.spawned
        );
    }
    s
}

pub fn recovery_csv(records: &[RecoveryRecord]) -> String {
    let mut s = format!("# {METRICS_HEADER}\n{}\n", RECOVERY_COLUMNS.join(","));
    for r in records {
        let layer = |l: Layer| format!("{:.9}", r.layers.get(&l).copied().unwrap_or(0.0));
        let count = |v: Verdict| r.verdicts.get(&v).copied().unwrap_or(0);
        let _ = writeln!(
            s,
            "{},{:.9},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.node,
            r.flag_time,
            fmt_opt(r.recovery_time),
            fmt_opt(r.elapsed),
            layer(Layer::Containment),
            layer(Layer::Diagnosis),
            layer(Layer::Meta),
            layer(Layer::Knowledge),
            r.paths,
            r.agent_calls,
            count(Verdict::Best),
            count(Verdict::Accepted),
            count(Verdict::Rejected),
            count(Verdict::Harmful),
        );
    }
    s
}

/// Linux reports process times in ticks of 1/100 s.
const USER_HZ: f64 = 100.0;

fn process_cpu_seconds() -> Option<f64> {
    let stat = std::fs::read_to_string("/proc/self/stat").ok()?;
    // Fields after the parenthesised command name; utime and stime are the
    // 12th and 13th of these.
    let rest = &stat[stat.rfind(')')? + 2..];
    let f: Vec<&str> = rest.split_whitespace().collect();
    let utime: f64 = f.get(11)?.parse().ok()?;
    let stime: f64 = f.get(12)?.parse().ok()?;
    Some((utime + stime) / USER_HZ)
}

/// Process CPU share between successive samples, or a synthetic series
/// when the host offers no process accounting.
#[derive(Debug)]
pub struct CpuSampler {
    last: Option<(f64, Instant)>,
}

impl Default for CpuSampler {
    fn default() -> Self {
        Self::new()
    }
}

impl CpuSampler {
    pub fn new() -> Self {
        let last = process_cpu_seconds().map(|c| (c, Instant::now()));
        if last.is_none() {
            log::warn!("process CPU accounting unavailable, using synthetic samples");
        }
        Self { last }
    }

    pub fn is_synthetic(&self) -> bool {
        self.last.is_none()
    }

    /// Percent of one core used since the previous sample.
    pub fn sample(&mut self) -> Option<f64> {
        let (c0, t0) = self.last?;
        let c1 = process_cpu_seconds()?;
        let t1 = Instant::now();
        self.last = Some((c1, t1));
        let wall = t1.duration_since(t0).as_secs_f64();
        Some(if wall > 0.0 { 100.0 * (c1 - c0) / wall } else { 0.0 })
    }
}

/// Synthetic samples: `unit_cost` percent per oracle call.
pub fn synthetic_series(calls: &[u64], unit_cost: f64) -> Vec<f64> {
    calls.iter().map(|c| *c as f64 * unit_cost).collect()
}

/// Splits a process-wide share across nodes by oracle-call weight.
pub fn attribute(total: f64, calls: &BTreeMap<String, u64>) -> BTreeMap<String, f64> {
    let sum: u64 = calls.values().sum();
    calls
        .iter()
        .map(|(n, c)| (n.clone(), if sum == 0 { 0.0 } else { total * *c as f64 / sum as f64 }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn verdict(v: Verdict) -> EventKind {
        EventKind::Verdict {
            hypothesis: "h".into(),
            verdict: v,
            gamma: 0.5,
            level: AgentLevel::System,
        }
    }

    fn sample_stream() -> EventStream {
        let mut s = EventStream::new();
        s.record(1.0, Layer::Fault, Some("n1"), Some("zk"), EventKind::Failure { failure: "crash".into() })
            .unwrap();
        s.record(2.0, Layer::Containment, Some("n1"), Some("zk"), EventKind::Flagged).unwrap();
        s.record(
            2.5,
            Layer::Containment,
            Some("n1"),
            Some("zk"),
            EventKind::Contained {
                placed: 2,
                unplaced: 0,
                duration: 0.5,
            },
        )
        .unwrap();
        for v in [Verdict::Accepted, Verdict::Accepted, Verdict::Rejected, Verdict::Harmful] {
            s.record(3.0, Layer::Meta, Some("n1"), Some("zk"), verdict(v)).unwrap();
        }
        s.record(
            3.0,
            Layer::Meta,
            Some("n1"),
            Some("zk"),
            EventKind::Agents {
                spawned: 3,
                system_spawned: 3,
                system_invoked: 3,
                invocations: 4,
                paths: 3,
                duration: 0.5,
            },
        )
        .unwrap();
        s.record(4.0, Layer::Meta, Some("n1"), Some("zk"), EventKind::Recovered).unwrap();
        s
    }

    #[test]
    fn empty_stream() {
        let s = EventStream::new();
        assert!(s.is_empty());
        assert_eq!(export_csv(s.events()), "# recist-metrics v1\nseq,time,layer,node,scope,kind,data\n");
        assert!(matches!(compute_rates(s.events(), None), Err(TelemetryError::EmptyScope(_))));
    }

    #[test]
    fn order_violations_are_flagged() {
        let mut s = EventStream::new();
        s.record(5.0, Layer::Run, None, None, EventKind::Flagged).unwrap();
        assert!(s.record(4.0, Layer::Run, None, None, EventKind::Recovered).is_err());
        assert_eq!(s.order_violations(), 1);
        assert_eq!(s.events()[1].time, 5.0);
        assert!(s.events().windows(2).all(|w| w[0].time <= w[1].time));
    }

    #[test]
    fn rates_by_counting() {
        let s = sample_stream();
        let r = compute_rates(s.events(), Some("zk")).unwrap();
        assert_eq!((r.best, r.accepted, r.rejected, r.harmful), (0.0, 0.5, 0.25, 0.25));
        assert_eq!(r.rdr, 1.0);
        assert!(compute_rates(s.events(), Some("other")).is_err());
        let v = serde_json::to_value(&r).unwrap();
        for col in ["Best", "Accepted", "Rejected", "Harmful", "RDR"] {
            assert!(v.get(col).is_some(), "{col}");
        }
    }

    #[test]
    fn recovery_from_flag_and_recover() {
        let recs = recovery_records(sample_stream().events());
        assert_eq!(recs.len(), 1);
        let r = &recs[0];
        assert_eq!(r.elapsed, Some(2.0));
        assert_eq!(r.layers[&Layer::Containment] + r.layers[&Layer::Meta], 1.0);
        assert!(r.layers.values().sum::<f64>() <= r.elapsed.unwrap());
        assert_eq!(r.verdicts[&Verdict::Accepted], 2);
        assert_eq!(r.paths, 3);
    }

    #[test]
    fn export_import_fixpoint() {
        let s = sample_stream();
        let csv = export_csv(s.events());
        let back = import_csv(&csv).unwrap();
        assert_eq!(export_csv(&back), csv);
        assert_eq!(compute_rates(&back, None), compute_rates(s.events(), None));
        let jl = export_jsonl(s.events());
        let back = import_jsonl(&jl).unwrap();
        assert_eq!(back, s.events());
        assert_eq!(export_jsonl(&back), jl);
        assert!(rates_csv(&[]).lines().nth(1).unwrap().contains("Best,Accepted,Rejected,Harmful,RDR"));
    }

    #[test]
    fn cpu_sampling() {
        let mut s = CpuSampler::new();
        if !s.is_synthetic() {
            let p = s.sample().unwrap();
            assert!(p >= 0.0);
        }
        assert_eq!(synthetic_series(&[0, 2, 5], 1.5), vec![0.0, 3.0, 7.5]);
        let calls = BTreeMap::from([("a".to_string(), 3), ("b".to_string(), 1)]);
        let split = attribute(40.0, &calls);
        assert_eq!(split["a"], 30.0);
        assert!((split.values().sum::<f64>() - 40.0).abs() < 1e-12);
    }
}
