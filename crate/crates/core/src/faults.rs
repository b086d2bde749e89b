//! Failure scenarios: timed node outages, node-state transitions and the
//! synthetic logs each failure kind leaves behind.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::logs::{LogRecord, LogSource, Severity};
use crate::model::{Allocation, NodeId, NodeState, StateTransition, SystemGraph};

pub const SCENARIO_HEADER: &str = "recist-scenario v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    Crash,
    NetworkPartition,
    DiskFull,
    AuthStorm,
}

impl FailureKind {
    pub const ALL: [FailureKind; 4] = [Self::Crash, Self::NetworkPartition, Self::DiskFull, Self::AuthStorm];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Crash => "crash",
            Self::NetworkPartition => "network_partition",
            Self::DiskFull => "disk_full",
            Self::AuthStorm => "auth_storm",
        }
    }
}

impl fmt::Display for FailureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FailureKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown failure kind `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureEvent {
    /// Simulated seconds.
    pub time: f64,
    pub node: NodeId,
    pub kind: FailureKind,
}

/// A failure scenario: a time-ordered list of node outages.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FailureScenario {
    pub id: String,
    pub events: Vec<FailureEvent>,
    /// Optional per-node log bundle references (dataset names or paths).
    pub attached_logs: BTreeMap<NodeId, String>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FaultError {
    #[error("unknown node `{0}`")]
    UnknownNode(NodeId),
    #[error("illegal transition {from} -> {to} on `{node}`")]
    IllegalTransition { node: NodeId, from: NodeState, to: NodeState },
    #[error("invalid time {0}")]
    InvalidTime(f64),
    #[error("events out of order at index {0}")]
    Unsorted(usize),
    #[error("scenario line {line}: {message}")]
    Parse { line: usize, message: String },
}

impl FailureScenario {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            ..Self::default()
        }
    }

    /// Appends an event, keeping the list sorted (stable for equal times).
    pub fn push(&mut self, time: f64, node: impl Into<NodeId>, kind: FailureKind) -> &mut Self {
        let event = FailureEvent {
            time,
            node: node.into(),
            kind,
        };
        let at = self.events.partition_point(|e| e.time <= time);
        self.events.insert(at, event);
        self
    }

    /// Checks ordering and that every node exists in `graph`.
    pub fn validate(&self, graph: &SystemGraph) -> Result<(), FaultError> {
        for (i, e) in self.events.iter().enumerate() {
            if !(e.time >= 0.0) || !e.time.is_finite() {
                return Err(FaultError::InvalidTime(e.time));
            }
            if i > 0 && self.events[i - 1].time > e.time {
                return Err(FaultError::Unsorted(i));
            }
            if graph.node(&e.node).is_none() {
                return Err(FaultError::UnknownNode(e.node.clone()));
            }
        }
        for node in self.attached_logs.keys() {
            if graph.node(node).is_none() {
                return Err(FaultError::UnknownNode(node.clone()));
            }
        }
        Ok(())
    }

    /// Distinct event times in ascending order.
    pub fn event_times(&self) -> Vec<f64> {
        let mut times: Vec<f64> = self.events.iter().map(|e| e.time).collect();
        times.dedup();
        times
    }

    /// Parses the `recist-scenario v1` text format.
    ///
    /// ```text
    /// recist-scenario v1
    /// id <name>
    /// log <node> <reference>
    /// <time> <node> <kind>
    /// ```
    pub fn parse(text: &str) -> Result<Self, FaultError> {
        let err = |line, message: String| FaultError::Parse { line, message };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        match lines.find(|(_, l)| !l.is_empty() && !l.starts_with('#')) {
            Some((_, l)) if l == SCENARIO_HEADER => {}
            Some((n, l)) => return Err(err(n, format!("expected `{SCENARIO_HEADER}`, found `{l}`"))),
            None => return Err(err(1, "empty scenario".into())),
        }
        let mut sc = FailureScenario::default();
        for (n, line) in lines {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            match f.as_slice() {
                ["id", name] => sc.id = (*name).to_string(),
                ["log", node, reference] => {
                    sc.attached_logs.insert(NodeId::from(*node), (*reference).to_string());
                }
                [t, node, kind] => {
                    let time: f64 = t.parse().map_err(|_| err(n, format!("bad time `{t}`")))?;
                    if !(time >= 0.0) || !time.is_finite() {
                        return Err(err(n, format!("bad time `{t}`")));
                    }
                    if sc.events.last().is_some_and(|e| e.time > time) {
                        return Err(err(n, "events must be sorted by time".into()));
                    }
                    let kind = kind.parse().map_err(|e| err(n, e))?;
                    sc.events.push(FailureEvent {
                        time,
                        node: NodeId::from(*node),
                        kind,
                    });
                }
                _ => return Err(err(n, format!("malformed line `{line}`"))),
            }
        }
        Ok(sc)
    }

    /// Canonical text form; `parse` of the output yields `self`.
    pub fn to_text(&self) -> String {
        let mut s = format!("{SCENARIO_HEADER}\n");
        if !self.id.is_empty() {
            let _ = writeln!(s, "id {}", self.id);
        }
        for (node, reference) in &self.attached_logs {
            let _ = writeln!(s, "log {node} {reference}");
        }
        for e in &self.events {
            let _ = writeln!(s, "{} {} {}", e.time, e.node, e.kind);
        }
        s
    }
}

/// Applies every event with `time <= t` and returns the failure set:
/// nodes with such an event that are still down or recovering.
///
/// An event is applied once. Later calls with the same `t` change nothing,
/// and a node that healed after its event stays healed. Tasks on a freshly
/// failed node are marked stale in `alloc`.
pub fn apply_failures(
    graph: &mut SystemGraph,
    alloc: &mut Allocation,
    scenario: &FailureScenario,
    t: f64,
) -> Result<BTreeSet<NodeId>, FaultError> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(FaultError::InvalidTime(t));
    }
    for e in &scenario.events {
        if graph.node(&e.node).is_none() {
            return Err(FaultError::UnknownNode(e.node.clone()));
        }
    }
    let mut failed = BTreeSet::new();
    for e in scenario.events.iter().filter(|e| e.time <= t) {
        let already_applied = graph
            .audit_trail()
            .iter()
            .any(|tr| tr.node == e.node && tr.to == NodeState::Down && tr.time == e.time);
        let state = graph.state(&e.node).expect("validated above");
        if !already_applied && state != NodeState::Down {
            graph.set_state(&e.node, NodeState::Down, e.time).expect("validated above");
            for task in alloc.tasks_on(&e.node) {
                alloc.mark_stale(task);
            }
        }
        if matches!(graph.state(&e.node).expect("validated above"), NodeState::Down | NodeState::Recovering) {
            failed.insert(e.node.clone());
        }
    }
    Ok(failed)
}

/// Whether `from -> to` is a legal manual transition.
pub fn is_legal_transition(from: NodeState, to: NodeState) -> bool {
    use NodeState::*;
    matches!(
        (from, to),
        (Down, Recovering) | (Recovering, Available) | (Available, Busy) | (Busy, Available)
    )
}

/// Moves a node along a legal transition, recording it in the audit trail.
/// Returns the prior state.
pub fn transition_state(graph: &mut SystemGraph, node: &NodeId, to: NodeState, time: f64) -> Result<NodeState, FaultError> {
    let from = graph.state(node).map_err(|_| FaultError::UnknownNode(node.clone()))?;
    if !is_legal_transition(from, to) {
        return Err(FaultError::IllegalTransition {
            node: node.clone(),
            from,
            to,
        });
    }
    graph.set_state(node, to, time).map_err(|_| FaultError::UnknownNode(node.clone()))
}

/// Replays an audit trail over initial states and returns the final states.
pub fn replay_audit(initial: &BTreeMap<NodeId, NodeState>, trail: &[StateTransition]) -> BTreeMap<NodeId, NodeState> {
    let mut states = initial.clone();
    for tr in trail {
        states.insert(tr.node.clone(), tr.to);
    }
    states
}

const CRASH_LINES: [&str; 3] = [
    "kernel: Out of memory: Killed process 4121 (worker)",
    "kernel: watchdog: BUG: soft lockup - CPU#0 stuck for 23s",
    "systemd: worker.service: main process exited, code=killed, status=6/ABRT",
];
const PARTITION_LINES: [&str; 3] = [
    "net: retransmission limit reached, link flapping",
    "net: heartbeat lost from upstream link",
    "net: connection timeout to peer after 3000 ms",
];
const DISK_LINES: [&str; 3] = [
    "fs: disk full on /var (no space left on device)",
    "fs: write failed: No space left on device",
    "app: checkpoint write failed",
];
const AUTH_LINES: [&str; 2] = [
    "sshd: authentication failure for invalid user admin",
    "sshd: Failed password for root from 10.0.0.9 port 22 ssh2",
];

/// Deterministic log lines emitted by a failing node, spread over the
/// `count` seconds before `at_ms`.
pub fn synthetic_records(event: &FailureEvent, at_ms: i64, count: usize, first_seq: u64) -> Vec<LogRecord> {
    let (templates, source, severity): (&[&str], LogSource, Severity) = match event.kind {
        FailureKind::Crash => (&CRASH_LINES, LogSource::Sys, Severity::Fatal),
        FailureKind::NetworkPartition => (&PARTITION_LINES, LogSource::Net, Severity::Error),
        FailureKind::DiskFull => (&DISK_LINES, LogSource::Sys, Severity::Error),
        FailureKind::AuthStorm => (&AUTH_LINES, LogSource::Net, Severity::Warn),
    };
    (0..count)
        .map(|i| {
            let line = templates[i % templates.len()];
            let ts = at_ms - ((count - i) as i64) * 1000;
            let mut rec = LogRecord::new(first_seq + i as u64, ts, source, line);
            rec.node_hint = Some(event.node.clone());
            rec.severity = Some(severity);
            rec.component = line.split(':').next().map(str::to_string);
            rec.message = line.split_once(": ").map_or(line, |(_, m)| m).to_string();
            rec.unhealthy = true;
            rec
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{assign_task, Link, Node, Task};

    fn graph() -> (SystemGraph, Allocation) {
        let mut g = SystemGraph::default();
        for id in ["n1", "n2", "n3"] {
            g.add_node(Node::new(id, 4.0, 4.0)).unwrap();
        }
        g.add_link(Link::new("n1", "n2", 10.0, 0.01)).unwrap();
        g.add_link(Link::new("n2", "n3", 10.0, 0.01)).unwrap();
        let mut a = Allocation::new(0.0);
        assign_task(&mut g, &mut a, &Task::new("t1", 1.0, 1.0), &"n2".into()).unwrap();
        (g, a)
    }

    #[test]
    fn empty_scenario_changes_nothing() {
        let (mut g, mut a) = graph();
        let before = g.clone();
        let f = apply_failures(&mut g, &mut a, &FailureScenario::new("w"), 10.0).unwrap();
        assert!(f.is_empty());
        assert_eq!(g, before);
    }

    #[test]
    fn events_fire_at_their_time() {
        let (mut g, mut a) = graph();
        let mut sc = FailureScenario::new("w");
        sc.push(5.0, "n2", FailureKind::Crash);
        assert!(apply_failures(&mut g, &mut a, &sc, 4.0).unwrap().is_empty());
        let f = apply_failures(&mut g, &mut a, &sc, 5.0).unwrap();
        assert_eq!(f, BTreeSet::from([NodeId::from("n2")]));
        assert_eq!(g.state(&"n2".into()).unwrap(), NodeState::Down);
        assert!(a.is_stale(&"t1".into()));
    }

    #[test]
    fn apply_is_idempotent_and_respects_recovery() {
        let (mut g, mut a) = graph();
        let mut sc = FailureScenario::new("w");
        sc.push(5.0, "n2", FailureKind::Crash);
        let f1 = apply_failures(&mut g, &mut a, &sc, 6.0).unwrap();
        let snapshot = (g.clone(), a.clone());
        let f2 = apply_failures(&mut g, &mut a, &sc, 6.0).unwrap();
        assert_eq!(f1, f2);
        assert_eq!((g.clone(), a.clone()), snapshot);

        transition_state(&mut g, &"n2".into(), NodeState::Recovering, 7.0).unwrap();
        assert_eq!(apply_failures(&mut g, &mut a, &sc, 8.0).unwrap(), f1);
        transition_state(&mut g, &"n2".into(), NodeState::Available, 9.0).unwrap();
        assert!(apply_failures(&mut g, &mut a, &sc, 10.0).unwrap().is_empty());
        assert_eq!(g.state(&"n2".into()).unwrap(), NodeState::Available);
    }

    #[test]
    fn unknown_node_is_rejected() {
        let (mut g, mut a) = graph();
        let mut sc = FailureScenario::new("w");
        sc.push(1.0, "zz", FailureKind::Crash);
        assert_eq!(apply_failures(&mut g, &mut a, &sc, 2.0), Err(FaultError::UnknownNode("zz".into())));
        assert!(sc.validate(&g).is_err());
    }

    #[test]
    fn transitions() {
        let (mut g, _) = graph();
        let n: NodeId = "n1".into();
        assert_eq!(transition_state(&mut g, &n, NodeState::Busy, 1.0).unwrap(), NodeState::Available);
        assert_eq!(transition_state(&mut g, &n, NodeState::Available, 2.0).unwrap(), NodeState::Busy);
        g.set_state(&n, NodeState::Down, 3.0).unwrap();
        assert!(matches!(
            transition_state(&mut g, &n, NodeState::Busy, 4.0),
            Err(FaultError::IllegalTransition { .. })
        ));
        assert_eq!(transition_state(&mut g, &n, NodeState::Recovering, 4.0).unwrap(), NodeState::Down);
    }

    #[test]
    fn audit_replay_reconstructs_states() {
        let (mut g, mut a) = graph();
        let initial: BTreeMap<NodeId, NodeState> = g.nodes().map(|n| (n.id.clone(), n.state)).collect();
        let mut sc = FailureScenario::new("w");
        sc.push(1.0, "n1", FailureKind::DiskFull).push(2.0, "n3", FailureKind::Crash);
        apply_failures(&mut g, &mut a, &sc, 3.0).unwrap();
        transition_state(&mut g, &"n1".into(), NodeState::Recovering, 4.0).unwrap();
        let finals: BTreeMap<NodeId, NodeState> = g.nodes().map(|n| (n.id.clone(), n.state)).collect();
        assert_eq!(replay_audit(&initial, g.audit_trail()), finals);
    }

    #[test]
    fn scenario_text_round_trip() {
        let mut sc = FailureScenario::new("omega-1");
        sc.push(2.5, "n2", FailureKind::NetworkPartition).push(1.0, "n1", FailureKind::AuthStorm);
        sc.attached_logs.insert("n2".into(), "openssh".into());
        assert_eq!(sc.events[0].node, NodeId::from("n1"));
        let text = sc.to_text();
        assert_eq!(FailureScenario::parse(&text).unwrap(), sc);
        assert!(FailureScenario::parse("recist-scenario v1\n5 a crash\n1 b crash\n").is_err());
        assert!(FailureScenario::parse("recist-scenario v1\n1 b melt\n").is_err());
    }

    #[test]
    fn synthetic_logs_are_deterministic() {
        let e = FailureEvent {
            time: 3.0,
            node: "n2".into(),
            kind: FailureKind::DiskFull,
        };
        let a = synthetic_records(&e, 10_000, 4, 0);
        assert_eq!(a, synthetic_records(&e, 10_000, 4, 0));
        assert_eq!(a.len(), 4);
        assert_eq!(a[0].message, "disk full on /var (no space left on device)");
        assert!(a.windows(2).all(|w| w[0].timestamp_ms < w[1].timestamp_ms));
        assert!(a.iter().all(|r| r.timestamp_ms < 10_000));
    }
}
