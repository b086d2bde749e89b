//! Log ingestion for the evaluation corpora.
//!
//! Two families are supported: the Cloud Stateless metrics CSV and four
//! Loghub text dialects (ZooKeeper, Hadoop, OpenSSH, BGL). Every parser
//! yields [`LogRecord`]s with UTC epoch-millisecond timestamps. Text parsers
//! never fail on content: a line that does not match its dialect becomes a
//! degraded record that inherits the previous timestamp.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::NodeId;

/// Default diagnosis window, seconds.
pub const DEFAULT_WINDOW_SECS: f64 = 120.0;
/// Year assumed for syslog timestamps, which carry none.
pub const DEFAULT_BASE_YEAR: i32 = 2024;

/// Metric columns required in a Cloud Stateless header.
pub const CLOUD_COLUMNS: [&str; 7] = [
    "cpu_usage",
    "memory_usage",
    "bandwidth_inbound",
    "bandwidth_outbound",
    "tps",
    "response_time",
    "status",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogSource {
    Sys,
    Net,
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Debug,
    Info,
    Warn,
    Error,
    Fatal,
}

impl Severity {
    /// Maps the level spellings found across the corpora.
    pub fn parse_level(raw: &str) -> Option<Self> {
        match raw.to_ascii_uppercase().as_str() {
            "TRACE" | "DEBUG" => Some(Self::Debug),
            "INFO" | "NOTICE" => Some(Self::Info),
            "WARN" | "WARNING" => Some(Self::Warn),
            "ERROR" | "SEVERE" | "ERR" => Some(Self::Error),
            "FATAL" | "FAILURE" | "CRIT" | "CRITICAL" => Some(Self::Fatal),
            _ => None,
        }
    }
}

/// One parsed log line or metrics row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    /// Position in the parsed stream, starting at 0.
    pub seq: u64,
    /// UTC epoch milliseconds.
    pub timestamp_ms: i64,
    pub source: LogSource,
    pub node_hint: Option<NodeId>,
    pub severity: Option<Severity>,
    pub component: Option<String>,
    /// Message body with the dialect prefix stripped.
    pub message: String,
    /// The original line.
    pub text: String,
    pub fields: BTreeMap<String, String>,
    /// The line did not match its dialect.
    pub degraded: bool,
    /// Row reports an unhealthy status or an alert.
    pub unhealthy: bool,
}

impl LogRecord {
    /// A record with only the essentials filled in.
    pub fn new(seq: u64, timestamp_ms: i64, source: LogSource, text: impl Into<String>) -> Self {
        let text = text.into();
        Self {
            seq,
            timestamp_ms,
            source,
            node_hint: None,
            severity: None,
            component: None,
            message: text.clone(),
            text,
            fields: BTreeMap::new(),
            degraded: false,
            unhealthy: false,
        }
    }

    /// Single-line JSON form used by golden files.
    pub fn to_canonical_line(&self) -> String {
        serde_json::to_string(self).expect("record serialization cannot fail")
    }
}

/// Records of one node inside a closed time window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogBundle {
    pub node: NodeId,
    pub start_ms: i64,
    pub end_ms: i64,
    pub records: Vec<LogRecord>,
}

impl LogBundle {
    pub fn empty(node: NodeId, end_ms: i64) -> Self {
        Self {
            node,
            start_ms: end_ms,
            end_ms,
            records: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dialect {
    ZooKeeper,
    Hadoop,
    OpenSsh,
    Bgl,
}

impl Dialect {
    pub const ALL: [Dialect; 4] = [Self::ZooKeeper, Self::Hadoop, Self::OpenSsh, Self::Bgl];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::ZooKeeper => "zookeeper",
            Self::Hadoop => "hadoop",
            Self::OpenSsh => "openssh",
            Self::Bgl => "bgl",
        }
    }
}

impl fmt::Display for Dialect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Dialect {
    type Err = LogError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|d| d.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| LogError::UnknownDialect(s.to_string()))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LogError {
    #[error("unknown log dialect `{0}`")]
    UnknownDialect(String),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("window length must be positive, got {0}")]
    InvalidWindow(f64),
}

/// A skipped CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MalformedRow {
    /// 1-based line number in the input.
    pub line: u64,
    pub reason: String,
}

/// Parser output: the records plus what could not be parsed cleanly.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Parsed {
    pub records: Vec<LogRecord>,
    pub malformed: Vec<MalformedRow>,
    pub degraded: usize,
    /// Lines or rows visited.
    pub lines_scanned: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParseOptions {
    /// Year given to syslog timestamps; advances when the month wraps.
    pub base_year: i32,
}

impl Default for ParseOptions {
    fn default() -> Self {
        Self {
            base_year: DEFAULT_BASE_YEAR,
        }
    }
}

/// Formats epoch milliseconds as `YYYY-MM-DDTHH:MM:SS.mmmZ`.
pub fn format_timestamp(ms: i64) -> String {
    match DateTime::from_timestamp_millis(ms) {
        Some(dt) => dt.format("%Y-%m-%dT%H:%M:%S%.3fZ").to_string(),
        None => ms.to_string(),
    }
}

fn naive_ms(date: NaiveDate, h: u32, mi: u32, s: u32, micros: u32) -> Option<i64> {
    let dt: NaiveDateTime = date.and_hms_micro_opt(h, mi, s, micros)?;
    Some(dt.and_utc().timestamp_millis())
}

/// Accepts integer epoch seconds, `YYYY-MM-DD HH:MM:SS[.f]`, its `T`
/// variant, or RFC 3339.
fn parse_cloud_timestamp(raw: &str) -> Option<i64> {
    let raw = raw.trim();
    if let Ok(secs) = raw.parse::<i64>() {
        return secs.checked_mul(1000);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(raw) {
        return Some(dt.timestamp_millis());
    }
    for fmt in ["%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M:%S%.f"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(raw, fmt) {
            return Some(dt.and_utc().timestamp_millis());
        }
    }
    None
}

/// Parses a Cloud Stateless metrics CSV.
///
/// Rows that fail to parse are skipped and listed in
/// [`Parsed::malformed`]. A row with `status = 1` is flagged unhealthy.
pub fn parse_cloud_stateless(input: &[u8]) -> Result<Parsed, LogError> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(input);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| LogError::MalformedHeader(e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if header.iter().all(|h| h.is_empty()) {
        return Err(LogError::MalformedHeader("empty header".into()));
    }
    let ts_col = header
        .iter()
        .position(|h| h == "timestamp")
        .ok_or_else(|| LogError::MalformedHeader("missing `timestamp` column".into()))?;
    for col in CLOUD_COLUMNS {
        if !header.iter().any(|h| h == col) {
            return Err(LogError::MalformedHeader(format!("missing `{col}` column")));
        }
    }
    let mut out = Parsed::default();
    for (row_idx, row) in reader.records().enumerate() {
        out.lines_scanned += 1;
        let line = row_idx as u64 + 2;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                out.malformed.push(MalformedRow {
                    line,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        match cloud_row(&header, ts_col, &row) {
            Ok(mut rec) => {
                rec.seq = out.records.len() as u64;
                out.records.push(rec);
            }
            Err(reason) => out.malformed.push(MalformedRow { line, reason }),
        }
    }
    Ok(out)
}

fn cloud_row(header: &[String], ts_col: usize, row: &csv::StringRecord) -> Result<LogRecord, String> {
    if row.len() != header.len() {
        return Err(format!("expected {} fields, found {}", header.len(), row.len()));
    }
    let raw_ts = &row[ts_col];
    let ts = parse_cloud_timestamp(raw_ts).ok_or_else(|| format!("bad timestamp `{raw_ts}`"))?;
    let mut fields = BTreeMap::new();
    for (name, value) in header.iter().zip(row.iter()) {
        fields.insert(name.clone(), value.trim().to_string());
    }
    for col in CLOUD_COLUMNS {
        let v = &fields[col];
        if v.parse::<f64>().map_or(true, |x| !x.is_finite()) {
            return Err(format!("`{col}` value `{v}` is not numeric"));
        }
    }
    let unhealthy = match fields["status"].as_str() {
        "0" => false,
        "1" => true,
        other => return Err(format!("status `{other}` is neither 0 nor 1")),
    };
    let text = fields
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(" ");
    let mut rec = LogRecord::new(0, ts, LogSource::Custom, text);
    rec.node_hint = fields.get("node").filter(|n| !n.is_empty()).map(|n| NodeId::from(n.as_str()));
    rec.fields = fields;
    rec.unhealthy = unhealthy;
    Ok(rec)
}

/// Writes records back as Cloud Stateless CSV: `timestamp`, the metric
/// columns, then any other fields in name order.
pub fn serialize_cloud_stateless(records: &[LogRecord]) -> String {
    let mut extra: Vec<&String> = records
        .iter()
        .flat_map(|r| r.fields.keys())
        .filter(|k| k.as_str() != "timestamp" && !CLOUD_COLUMNS.contains(&k.as_str()))
        .collect();
    extra.sort();
    extra.dedup();
    let mut header: Vec<&str> = vec!["timestamp"];
    header.extend(CLOUD_COLUMNS);
    header.extend(extra.iter().map(|s| s.as_str()));

    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(&header).expect("in-memory write");
    for r in records {
        let row: Vec<String> = header
            .iter()
            .map(|h| match r.fields.get(*h) {
                Some(v) => v.clone(),
                None if *h == "timestamp" => format_timestamp(r.timestamp_ms),
                None => String::new(),
            })
            .collect();
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
}

static ZK_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^(\d{4})-(\d{2})-(\d{2}) (\d{2}):(\d{2}):(\d{2}),(\d{3}) - (\w+)\s+\[(.+?)\] - (.*)$").unwrap()
});
static HADOOP_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^(\d{4})-(\d{2})-(\d{2}) (\d{2}):(\d{2}):(\d{2}),(\d{3}) (\w+) \[(.*?)\] (\S+?): (.*)$").unwrap()
});
static SSH_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^([A-Z][a-z]{2})\s+(\d{1,2}) (\d{2}):(\d{2}):(\d{2}) (\S+) ([^\[:\s]+)(?:\[(\d+)\])?: ?(.*)$").unwrap()
});
static BGL_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"^(\S+) (\d+) (\d{4}\.\d{2}\.\d{2}) (\S+) (\d{4})-(\d{2})-(\d{2})-(\d{2})\.(\d{2})\.(\d{2})(?:\.(\d{1,6}))? (\S+) (\S+) (\S+) (\S+)(?: (.*))?$",
    )
    .unwrap()
});

const MONTHS: [&str; 12] = ["Jan", "Feb", "Mar", "Apr", "May", "Jun", "Jul", "Aug", "Sep", "Oct", "Nov", "Dec"];

fn n<T: FromStr>(caps: &regex::Captures<'_>, i: usize) -> Option<T> {
    caps.get(i)?.as_str().parse().ok()
}

fn micros(caps: &regex::Captures<'_>, i: usize) -> u32 {
    caps.get(i).map_or(0, |m| {
        let s = m.as_str();
        // right-pad to six digits: ".5" is 500000 micros
        format!("{s:0<6}").parse().unwrap_or(0)
    })
}

struct LineParse {
    timestamp_ms: i64,
    record: LogRecord,
}

/// Parses a Loghub-style text log in the given dialect.
pub fn parse_loghub(input: &[u8], dialect: Dialect, opts: &ParseOptions) -> Parsed {
    let text = String::from_utf8_lossy(input);
    let mut out = Parsed::default();
    let mut last_ts: Option<i64> = None;
    let mut year = opts.base_year;
    let mut last_month: Option<u32> = None;
    let mut leading_degraded = 0usize;

    for line in text.lines() {
        out.lines_scanned += 1;
        if line.trim().is_empty() {
            continue;
        }
        let seq = out.records.len() as u64;
        let parsed = match dialect {
            Dialect::ZooKeeper => parse_zk(line, seq),
            Dialect::Hadoop => parse_hadoop(line, seq),
            Dialect::OpenSsh => parse_ssh(line, seq, &mut year, &mut last_month),
            Dialect::Bgl => parse_bgl(line, seq),
        };
        match parsed {
            Some(p) => {
                last_ts = Some(p.timestamp_ms);
                let mut rec = p.record;
                rec.timestamp_ms = p.timestamp_ms;
                out.records.push(rec);
            }
            None => {
                let mut rec = LogRecord::new(seq, last_ts.unwrap_or(0), default_source(dialect), line);
                rec.degraded = true;
                if last_ts.is_none() {
                    leading_degraded += 1;
                }
                out.degraded += 1;
                out.records.push(rec);
            }
        }
    }
    // Degraded lines before the first good one borrow its timestamp.
    if leading_degraded > 0 {
        if let Some(first) = out.records.get(leading_degraded).map(|r| r.timestamp_ms) {
            for r in &mut out.records[..leading_degraded] {
                r.timestamp_ms = first;
            }
        }
    }
    out
}

fn default_source(dialect: Dialect) -> LogSource {
    match dialect {
        Dialect::OpenSsh => LogSource::Net,
        _ => LogSource::Sys,
    }
}

fn ymd(caps: &regex::Captures<'_>, start: usize) -> Option<NaiveDate> {
    NaiveDate::from_ymd_opt(n(caps, start)?, n(caps, start + 1)?, n(caps, start + 2)?)
}

fn parse_zk(line: &str, seq: u64) -> Option<LineParse> {
    let c = ZK_RE.captures(line)?;
    let ms: u32 = n(&c, 7)?;
    let ts = naive_ms(ymd(&c, 1)?, n(&c, 4)?, n(&c, 5)?, n(&c, 6)?, ms * 1000)?;
    let thread = &c[9];
    // `QuorumPeer[myid=1]/0:0:...:2181:FastLeaderElection@774` → `FastLeaderElection`
    let component = match thread.rfind('@') {
        Some(at) => {
            let head = &thread[..at];
            head.rsplit(':').next().unwrap_or(head).to_string()
        }
        None => thread.to_string(),
    };
    let mut rec = LogRecord::new(seq, ts, LogSource::Sys, line);
    rec.severity = Severity::parse_level(&c[8]);
    rec.component = Some(component);
    rec.message = c[10].to_string();
    rec.fields.insert("thread".into(), thread.to_string());
    rec.fields.insert("level".into(), c[8].to_string());
    Some(LineParse { timestamp_ms: ts, record: rec })
}

fn parse_hadoop(line: &str, seq: u64) -> Option<LineParse> {
    let c = HADOOP_RE.captures(line)?;
    let ms: u32 = n(&c, 7)?;
    let ts = naive_ms(ymd(&c, 1)?, n(&c, 4)?, n(&c, 5)?, n(&c, 6)?, ms * 1000)?;
    let mut rec = LogRecord::new(seq, ts, LogSource::Sys, line);
    rec.severity = Severity::parse_level(&c[8]);
    rec.component = Some(c[10].to_string());
    rec.message = c[11].to_string();
    rec.fields.insert("thread".into(), c[9].to_string());
    rec.fields.insert("level".into(), c[8].to_string());
    Some(LineParse { timestamp_ms: ts, record: rec })
}

fn parse_ssh(line: &str, seq: u64, year: &mut i32, last_month: &mut Option<u32>) -> Option<LineParse> {
    let c = SSH_RE.captures(line)?;
    let month = MONTHS.iter().position(|m| *m == &c[1])? as u32 + 1;
    let day: u32 = n(&c, 2)?;
    let mut y = *year;
    if last_month.is_some_and(|prev| month < prev) {
        y += 1;
    }
    let date = NaiveDate::from_ymd_opt(y, month, day)?;
    let ts = naive_ms(date, n(&c, 3)?, n(&c, 4)?, n(&c, 5)?, 0)?;
    *year = y;
    *last_month = Some(month);
    let message = c[9].to_string();
    let mut rec = LogRecord::new(seq, ts, LogSource::Net, line);
    rec.node_hint = Some(NodeId::from(&c[6]));
    rec.component = Some(c[7].to_string());
    if message.starts_with("error:") || message.starts_with("fatal:") {
        rec.severity = Some(if message.starts_with("fatal:") { Severity::Fatal } else { Severity::Error });
    }
    rec.message = message;
    if let Some(pid) = c.get(8) {
        rec.fields.insert("pid".into(), pid.as_str().to_string());
    }
    rec.fields.insert("host".into(), c[6].to_string());
    Some(LineParse { timestamp_ms: ts, record: rec })
}

fn parse_bgl(line: &str, seq: u64) -> Option<LineParse> {
    let c = BGL_RE.captures(line)?;
    let date = NaiveDate::from_ymd_opt(n(&c, 5)?, n(&c, 6)?, n(&c, 7)?)?;
    let ts = naive_ms(date, n(&c, 8)?, n(&c, 9)?, n(&c, 10)?, micros(&c, 11))?;
    let label = &c[1];
    let mut rec = LogRecord::new(seq, ts, LogSource::Sys, line);
    rec.node_hint = Some(NodeId::from(&c[4]));
    rec.severity = Severity::parse_level(&c[15]);
    rec.component = Some(c[14].to_string());
    rec.message = c.get(16).map_or(String::new(), |m| m.as_str().to_string());
    rec.unhealthy = label != "-";
    rec.fields.insert("label".into(), label.to_string());
    rec.fields.insert("epoch".into(), c[2].to_string());
    rec.fields.insert("type".into(), c[13].to_string());
    rec.fields.insert("level".into(), c[15].to_string());
    Some(LineParse { timestamp_ms: ts, record: rec })
}

/// Collects the node's records with timestamps in `[t - delta, t]`.
///
/// A record belongs to the node when its hint matches or when it has no
/// hint. Output is sorted by timestamp, stable for ties.
pub fn extract_window(records: &[LogRecord], node: &NodeId, t_ms: i64, delta_secs: f64) -> Result<LogBundle, LogError> {
    if !(delta_secs > 0.0) || !delta_secs.is_finite() {
        return Err(LogError::InvalidWindow(delta_secs));
    }
    let start_ms = t_ms - (delta_secs * 1000.0).round() as i64;
    let mut picked: Vec<LogRecord> = records
        .iter()
        .filter(|r| r.timestamp_ms >= start_ms && r.timestamp_ms <= t_ms)
        .filter(|r| r.node_hint.as_ref().is_none_or(|h| h == node))
        .cloned()
        .collect();
    picked.sort_by_key(|r| r.timestamp_ms);
    Ok(LogBundle {
        node: node.clone(),
        start_ms,
        end_ms: t_ms,
        records: picked,
    })
}

/// Canonical JSONL rendering, one record per line.
pub fn to_jsonl(records: &[LogRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&r.to_canonical_line());
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ms(s: &str) -> i64 {
        NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S%.f")
            .unwrap()
            .and_utc()
            .timestamp_millis()
    }

    #[test]
    fn zookeeper_line() {
        let line = "2015-07-29 17:41:44,747 - INFO  [QuorumPeer[myid=1]/0:0:0:0:0:0:0:0:2181:FastLeaderElection@774] - Notification time out: 3200";
        let p = parse_loghub(line.as_bytes(), Dialect::ZooKeeper, &ParseOptions::default());
        let r = &p.records[0];
        assert!(!r.degraded);
        assert_eq!(r.timestamp_ms, ms("2015-07-29 17:41:44.747"));
        assert_eq!(r.severity, Some(Severity::Info));
        assert_eq!(r.component.as_deref(), Some("FastLeaderElection"));
        assert_eq!(r.message, "Notification time out: 3200");
        assert_eq!(r.text, line);
    }

    #[test]
    fn hadoop_line() {
        let line = "2015-10-18 18:01:47,978 INFO [main] org.apache.hadoop.mapreduce.v2.app.MRAppMaster: Created MRAppMaster for application appattempt_1445144423722_0020_000001";
        let p = parse_loghub(line.as_bytes(), Dialect::Hadoop, &ParseOptions::default());
        let r = &p.records[0];
        assert_eq!(r.timestamp_ms, ms("2015-10-18 18:01:47.978"));
        assert_eq!(r.component.as_deref(), Some("org.apache.hadoop.mapreduce.v2.app.MRAppMaster"));
        assert_eq!(r.fields["thread"], "main");
    }

    #[test]
    fn openssh_line_and_year_rollover() {
        let text = "Dec 10 12:21:26 LabSZ sshd[24200]: Failed password for root from 1.2.3.4 port 22 ssh2\nJan  1 00:00:01 LabSZ sshd(pam_unix)[1]: check pass; user unknown\n";
        let p = parse_loghub(text.as_bytes(), Dialect::OpenSsh, &ParseOptions { base_year: 2017 });
        assert_eq!(p.records[0].timestamp_ms, ms("2017-12-10 12:21:26"));
        assert_eq!(p.records[1].timestamp_ms, ms("2018-01-01 00:00:01"));
        assert_eq!(p.records[1].component.as_deref(), Some("sshd(pam_unix)"));
        assert_eq!(p.records[0].node_hint, Some(NodeId::from("LabSZ")));
        assert_eq!(p.records[0].source, LogSource::Net);
    }

    #[test]
    fn bgl_lines() {
        let text = "- 1117838570 2005.06.03 R02-M1-N0-C:J12-U11 2005-06-03-15.42.50.675872 R02-M1-N0-C:J12-U11 RAS KERNEL INFO instruction cache parity error corrected\nKERNDTLB 1117881930 2005.06.04 R23-M1-N8-I:J18-U11 2005-06-04-04.45.30 R23-M1-N8-I:J18-U11 RAS KERNEL FATAL data TLB error interrupt\n";
        let p = parse_loghub(text.as_bytes(), Dialect::Bgl, &ParseOptions::default());
        assert_eq!(p.records[0].timestamp_ms, ms("2005-06-03 15:42:50.675"));
        assert!(!p.records[0].unhealthy);
        assert_eq!(p.records[1].timestamp_ms, ms("2005-06-04 04:45:30"));
        assert!(p.records[1].unhealthy);
        assert_eq!(p.records[1].severity, Some(Severity::Fatal));
    }

    #[test]
    fn degraded_lines_inherit_timestamps() {
        let text = "garbage first\n2015-07-29 17:41:44,747 - WARN  [main:X@1] - boom\n\tat java.lang.Thread.run(Thread.java:745)\n";
        let p = parse_loghub(text.as_bytes(), Dialect::ZooKeeper, &ParseOptions::default());
        assert_eq!(p.records.len(), 3);
        assert_eq!(p.degraded, 2);
        let t = ms("2015-07-29 17:41:44.747");
        assert!(p.records.iter().all(|r| r.timestamp_ms == t));
        assert!(p.records[2].degraded);
    }

    #[test]
    fn arbitrary_bytes_do_not_panic() {
        let junk = [0xff_u8, 0x00, b'\n', 0xc3, 0x28, b'\n'];
        for d in Dialect::ALL {
            let p = parse_loghub(&junk, d, &ParseOptions::default());
            assert!(p.records.iter().all(|r| r.degraded));
        }
        assert!(parse_loghub(b"", Dialect::Bgl, &ParseOptions::default()).records.is_empty());
    }

    #[test]
    fn dialect_names() {
        assert_eq!("BGL".parse::<Dialect>().unwrap(), Dialect::Bgl);
        assert!(matches!("syslog".parse::<Dialect>(), Err(LogError::UnknownDialect(_))));
    }

    const CSV_HEADER: &str = "timestamp,cpu_usage,memory_usage,bandwidth_inbound,bandwidth_outbound,tps,response_time,status\n";

    #[test]
    fn cloud_csv_basics() {
        assert!(parse_cloud_stateless(CSV_HEADER.as_bytes()).unwrap().records.is_empty());
        let text = format!("{CSV_HEADER}2024-01-01 00:00:00,10,20,1,2,100,0.2,0\n2024-01-01 00:00:05,95,90,1,2,3,4.5,1\n");
        let p = parse_cloud_stateless(text.as_bytes()).unwrap();
        assert_eq!(p.records.len(), 2);
        assert!(!p.records[0].unhealthy);
        assert!(p.records[1].unhealthy);
        assert_eq!(p.records[1].timestamp_ms - p.records[0].timestamp_ms, 5000);
        assert_eq!(p.records[0].source, LogSource::Custom);
    }

    #[test]
    fn cloud_csv_rejects_and_skips() {
        assert!(matches!(parse_cloud_stateless(b"a,b\n"), Err(LogError::MalformedHeader(_))));
        let text = format!("{CSV_HEADER}nope,1,1,1,1,1,1,0\n2024-01-01 00:00:00,x,1,1,1,1,1,0\n2024-01-01 00:00:00,1,1,1,1,1,1,7\n2024-01-01 00:00:00,1,1\n2024-01-01 00:00:00,1,1,1,1,1,1,0\n");
        let p = parse_cloud_stateless(text.as_bytes()).unwrap();
        assert_eq!(p.records.len(), 1);
        assert_eq!(p.malformed.iter().map(|m| m.line).collect::<Vec<_>>(), vec![2, 3, 4, 5]);
        assert_eq!(p.records[0].seq, 0);
    }

    #[test]
    fn cloud_csv_round_trip() {
        let text = format!("{CSV_HEADER}2024-01-01 00:00:00,10,20,1,2,100,0.2,0\n1704067205,95,90,1,2,3,4.5,1\n");
        let a = parse_cloud_stateless(text.as_bytes()).unwrap().records;
        let b = parse_cloud_stateless(serialize_cloud_stateless(&a).as_bytes()).unwrap().records;
        assert_eq!(a, b);
    }

    #[test]
    fn window_is_closed_and_node_filtered() {
        let mut recs: Vec<LogRecord> = (0..5).map(|i| LogRecord::new(i, i as i64 * 1000, LogSource::Sys, "x")).collect();
        recs[1].node_hint = Some("other".into());
        recs[2].node_hint = Some("me".into());
        let b = extract_window(&recs, &"me".into(), 3000, 1.0).unwrap();
        assert_eq!(b.records.iter().map(|r| r.seq).collect::<Vec<_>>(), vec![2, 3]);
        let b = extract_window(&recs, &"me".into(), 10_000, 1.0).unwrap();
        assert!(b.records.is_empty());
        assert!(extract_window(&recs, &"me".into(), 0, 0.0).is_err());
    }
}
