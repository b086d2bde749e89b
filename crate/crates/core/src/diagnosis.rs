//! Log-driven causal diagnosis.
//!
//! A log bundle becomes a set of diagnostic variables, the reasoner is asked
//! which earlier variables cause which later ones, and the resulting graph is
//! split into per-category subtrees and merged back.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::logs::LogBundle;
use crate::model::NodeId;
use crate::reasoner::{EntityDesc, LineRef, Payload, Reasoner, ReasonerError, Response};

pub const GRAPH_HEADER: &str = "recist-diag v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariableKind {
    Event,
    Metric,
    StateTransition,
    ResourceIndicator,
    ErrorCode,
}

impl VariableKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Event => "event",
            Self::Metric => "metric",
            Self::StateTransition => "state_transition",
            Self::ResourceIndicator => "resource_indicator",
            Self::ErrorCode => "error_code",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubtreeKind {
    ResourceOverload,
    NetworkInstability,
    TaskContention,
    ThermalAnomaly,
    FirmwareEvent,
}

impl SubtreeKind {
    pub const ALL: [Self; 5] = [
        Self::ResourceOverload,
        Self::NetworkInstability,
        Self::TaskContention,
        Self::ThermalAnomaly,
        Self::FirmwareEvent,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::ResourceOverload => "resource_overload",
            Self::NetworkInstability => "network_instability",
            Self::TaskContention => "task_contention",
            Self::ThermalAnomaly => "thermal_anomaly",
            Self::FirmwareEvent => "firmware_event",
        }
    }

    /// Human-readable class name.
    pub fn phrase(self) -> &'static str {
        match self {
            Self::ResourceOverload => "resource overload",
            Self::NetworkInstability => "network instability",
            Self::TaskContention => "task contention",
            Self::ThermalAnomaly => "thermal anomaly",
            Self::FirmwareEvent => "firmware event",
        }
    }

    pub fn default_remedy(self) -> &'static str {
        match self {
            Self::ResourceOverload => "drain queued work and restart the overloaded service",
            Self::NetworkInstability => "reroute traffic through a healthy link and reset the connection",
            Self::TaskContention => "reschedule the contending tasks onto nodes with spare capacity",
            Self::ThermalAnomaly => "throttle the node and inspect its cooling",
            Self::FirmwareEvent => "reset the affected hardware and apply the latest firmware",
        }
    }
}

/// Variable identifier, printed as `x<n>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VarId(pub u32);

impl fmt::Display for VarId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "x{}", self.0)
    }
}

impl std::str::FromStr for VarId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.strip_prefix('x')
            .and_then(|n| n.parse().ok())
            .map(VarId)
            .ok_or_else(|| format!("bad variable id `{s}`"))
    }
}

impl Serialize for VarId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for VarId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// A log line backing a variable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evidence {
    pub seq: u64,
    pub timestamp_ms: i64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisVariable {
    pub id: VarId,
    pub kind: VariableKind,
    pub label: String,
    pub category: Option<SubtreeKind>,
    pub evidence: Vec<Evidence>,
    pub first_seen: i64,
    pub last_seen: i64,
    /// Added during restructuring rather than extracted from logs.
    #[serde(default)]
    pub auxiliary: bool,
}

impl DiagnosisVariable {
    /// Position of the first supporting line, used to order variables that
    /// share a timestamp.
    pub fn first_seq(&self) -> u64 {
        self.evidence.iter().map(|e| e.seq).min().unwrap_or(u64::MAX)
    }

    pub fn describe(&self) -> EntityDesc {
        EntityDesc {
            id: self.id.to_string(),
            kind: self.kind,
            label: self.label.clone(),
            category: self.category,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalEdge {
    pub src: VarId,
    pub dst: VarId,
    pub confidence: f64,
    pub rationale: String,
    #[serde(default)]
    pub auxiliary: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosisGraph {
    pub node: NodeId,
    variables: BTreeMap<VarId, DiagnosisVariable>,
    edges: BTreeMap<(VarId, VarId), CausalEdge>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagnosisError {
    #[error("diagnosis of {node}: {source}")]
    Reasoner {
        node: NodeId,
        #[source]
        source: ReasonerError,
    },
}

/// Cost counters for one diagnosis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DiagnosisCounters {
    pub lines: u64,
    pub extract_calls: u64,
    pub pair_queries: u64,
    pub edges_removed: u64,
}

impl DiagnosisGraph {
    pub fn new(node: NodeId) -> Self {
        Self {
            node,
            variables: BTreeMap::new(),
            edges: BTreeMap::new(),
        }
    }

    pub fn variables(&self) -> impl Iterator<Item = &DiagnosisVariable> {
        self.variables.values()
    }

    pub fn variable(&self, id: VarId) -> Option<&DiagnosisVariable> {
        self.variables.get(&id)
    }

    pub fn variable_count(&self) -> usize {
        self.variables.len()
    }

    pub fn edges(&self) -> impl Iterator<Item = &CausalEdge> {
        self.edges.values()
    }

    pub fn edge(&self, src: VarId, dst: VarId) -> Option<&CausalEdge> {
        self.edges.get(&(src, dst))
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variables.is_empty()
    }

    /// Next unused variable id.
    pub fn next_id(&self) -> VarId {
        VarId(self.variables.keys().next_back().map_or(0, |v| v.0 + 1))
    }

    pub fn insert_variable(&mut self, v: DiagnosisVariable) {
        self.variables.insert(v.id, v);
    }

    /// Inserts an edge whose endpoints exist. Self-loops and edges to unknown
    /// variables are ignored.
    pub fn insert_edge(&mut self, e: CausalEdge) -> bool {
        if e.src == e.dst || !self.variables.contains_key(&e.src) || !self.variables.contains_key(&e.dst) {
            return false;
        }
        self.edges.insert((e.src, e.dst), e);
        true
    }

    pub fn children(&self, v: VarId) -> impl Iterator<Item = VarId> + '_ {
        self.edges.range((v, VarId(0))..=(v, VarId(u32::MAX))).map(|(k, _)| k.1)
    }

    pub fn parents(&self, v: VarId) -> impl Iterator<Item = VarId> + '_ {
        self.edges.keys().filter(move |k| k.1 == v).map(|k| k.0)
    }

    pub fn out_degree(&self, v: VarId) -> usize {
        self.children(v).count()
    }

    /// Variables without parents, ascending.
    pub fn roots(&self) -> Vec<VarId> {
        let has_parent: BTreeSet<VarId> = self.edges.keys().map(|k| k.1).collect();
        self.variables.keys().filter(|v| !has_parent.contains(v)).copied().collect()
    }

    /// All variables with a directed path to `v`.
    pub fn ancestors(&self, v: VarId) -> BTreeSet<VarId> {
        let mut seen = BTreeSet::new();
        let mut queue: VecDeque<VarId> = self.parents(v).collect();
        while let Some(u) = queue.pop_front() {
            if seen.insert(u) {
                queue.extend(self.parents(u));
            }
        }
        seen
    }

    /// Subgraph induced by `keep`.
    pub fn induced(&self, keep: &BTreeSet<VarId>) -> Self {
        Self {
            node: self.node.clone(),
            variables: self
                .variables
                .iter()
                .filter(|(k, _)| keep.contains(k))
                .map(|(k, v)| (*k, v.clone()))
                .collect(),
            edges: self
                .edges
                .iter()
                .filter(|(k, _)| keep.contains(&k.0) && keep.contains(&k.1))
                .map(|(k, e)| (*k, e.clone()))
                .collect(),
        }
    }

    fn find_cycle(&self) -> Option<Vec<(VarId, VarId)>> {
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            New,
            Open,
            Done,
        }
        let mut mark: BTreeMap<VarId, Mark> = self.variables.keys().map(|k| (*k, Mark::New)).collect();
        for &start in self.variables.keys() {
            if mark[&start] != Mark::New {
                continue;
            }
            let mut stack: Vec<(VarId, Vec<VarId>)> = vec![(start, self.children(start).collect())];
            mark.insert(start, Mark::Open);
            while let Some((v, pending)) = stack.last_mut() {
                let v = *v;
                if pending.is_empty() {
                    mark.insert(v, Mark::Done);
                    stack.pop();
                    continue;
                }
                let c = pending.remove(0);
                match mark[&c] {
                    Mark::New => {
                        mark.insert(c, Mark::Open);
                        let next = self.children(c).collect();
                        stack.push((c, next));
                    }
                    Mark::Open => {
                        let pos = stack.iter().position(|(u, _)| *u == c).expect("open vertex is on the stack");
                        let mut cycle: Vec<(VarId, VarId)> = stack[pos..].windows(2).map(|w| (w[0].0, w[1].0)).collect();
                        cycle.push((v, c));
                        return Some(cycle);
                    }
                    Mark::Done => {}
                }
            }
        }
        None
    }

    pub fn is_acyclic(&self) -> bool {
        self.find_cycle().is_none()
    }

    /// Removes edges until the graph is a DAG. Each cycle found loses its
    /// lowest-confidence edge; ties go to the edge whose target was seen
    /// latest, then to the larger edge key. Returns the removed edges in
    /// removal order.
    pub fn break_cycles(&mut self) -> Vec<CausalEdge> {
        let mut removed = Vec::new();
        while let Some(cycle) = self.find_cycle() {
            let victim = *cycle
                .iter()
                .max_by(|a, b| {
                    let (ea, eb) = (&self.edges[a], &self.edges[b]);
                    eb.confidence
                        .total_cmp(&ea.confidence)
                        .then(self.variables[&a.1].first_seen.cmp(&self.variables[&b.1].first_seen))
                        .then(a.cmp(b))
                })
                .expect("cycles have edges");
            let e = self.edges.remove(&victim).expect("cycle edge exists");
            log::debug!("{}: removed cycle edge {} -> {} ({})", self.node, e.src, e.dst, e.confidence);
            removed.push(e);
        }
        removed
    }

    /// Line format: a header, then `var id kind label` and
    /// `edge src dst confidence [aux]` records.
    pub fn to_text(&self) -> String {
        let mut s = format!("{GRAPH_HEADER} {}\n", self.node);
        for v in self.variables.values() {
            let _ = writeln!(s, "var {} {} {}", v.id, v.kind.as_str(), v.label);
        }
        for e in self.edges.values() {
            let _ = write!(s, "edge {} {} {}", e.src, e.dst, e.confidence);
            s.push_str(if e.auxiliary { " aux\n" } else { "\n" });
        }
        s
    }
}

/// A per-category view of the diagnosis graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subtree {
    pub kind: SubtreeKind,
    pub variables: BTreeSet<VarId>,
    pub edges: BTreeSet<(VarId, VarId)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosisConfig {
    /// Log lines per extraction request.
    pub extract_batch: usize,
}

impl Default for DiagnosisConfig {
    fn default() -> Self {
        Self { extract_batch: 64 }
    }
}

/// Everything one diagnosis produces.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnosis {
    pub graph: DiagnosisGraph,
    pub removed: Vec<CausalEdge>,
    pub subtrees: Vec<Subtree>,
    pub consolidated: DiagnosisGraph,
    pub counters: DiagnosisCounters,
}

fn wrap(node: &NodeId) -> impl Fn(ReasonerError) -> DiagnosisError + '_ {
    move |source| DiagnosisError::Reasoner {
        node: node.clone(),
        source,
    }
}

/// Turns log lines into variables, deduplicated by `(kind, label)`. Ids are
/// assigned in order of first supporting line.
pub fn extract_variables(
    bundle: &LogBundle,
    reasoner: &Reasoner,
    config: &DiagnosisConfig,
    counters: &mut DiagnosisCounters,
) -> Result<Vec<DiagnosisVariable>, DiagnosisError> {
    let err = wrap(&bundle.node);
    let by_seq: BTreeMap<u64, &crate::logs::LogRecord> = bundle.records.iter().map(|r| (r.seq, r)).collect();
    let mut found: Vec<DiagnosisVariable> = Vec::new();
    let mut index: BTreeMap<(VariableKind, String), usize> = BTreeMap::new();
    counters.lines += bundle.records.len() as u64;
    for chunk in bundle.records.chunks(config.extract_batch.max(1)) {
        let lines = chunk
            .iter()
            .map(|r| LineRef {
                seq: r.seq,
                message: r.message.clone(),
                severity: r.severity,
                fields: r.fields.clone(),
            })
            .collect();
        counters.extract_calls += 1;
        let Response::Extract { entities } = reasoner.dispatch(Payload::Extract { lines }).map_err(&err)? else {
            unreachable!("dispatch checks the response kind")
        };
        let in_chunk: BTreeSet<u64> = chunk.iter().map(|r| r.seq).collect();
        for e in entities {
            if !in_chunk.contains(&e.line) {
                return Err(err(ReasonerError::SchemaViolation(format!(
                    "entity `{}` cites line {} outside the request",
                    e.label, e.line
                ))));
            }
            let label = e.label.trim().to_lowercase();
            if label.is_empty() {
                return Err(err(ReasonerError::SchemaViolation("entity with an empty label".into())));
            }
            let rec = by_seq[&e.line];
            let ev = Evidence {
                seq: rec.seq,
                timestamp_ms: rec.timestamp_ms,
                message: rec.message.clone(),
            };
            let i = *index.entry((e.kind, label.clone())).or_insert_with(|| {
                found.push(DiagnosisVariable {
                    id: VarId(0),
                    kind: e.kind,
                    label,
                    category: None,
                    evidence: Vec::new(),
                    first_seen: ev.timestamp_ms,
                    last_seen: ev.timestamp_ms,
                    auxiliary: false,
                });
                found.len() - 1
            });
            let v = &mut found[i];
            v.category = v.category.or(e.category);
            v.first_seen = v.first_seen.min(ev.timestamp_ms);
            v.last_seen = v.last_seen.max(ev.timestamp_ms);
            if !v.evidence.iter().any(|x| x.seq == ev.seq) {
                v.evidence.push(ev);
            }
        }
    }
    for v in &mut found {
        v.evidence.sort_by_key(|e| e.seq);
    }
    found.sort_by_key(|v| v.first_seq());
    for (i, v) in found.iter_mut().enumerate() {
        v.id = VarId(i as u32);
    }
    Ok(found)
}

/// Orders variables by `(first_seen, first supporting line)`.
pub fn precedence_order(vars: &[DiagnosisVariable]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..vars.len()).collect();
    order.sort_by_key(|&i| (vars[i].first_seen, vars[i].first_seq(), vars[i].id));
    order
}

/// Asks the reasoner about each ordered pair whose cause comes first in
/// [`precedence_order`]. At most `m(m-1)/2` queries.
pub fn infer_edges(
    node: &NodeId,
    vars: &[DiagnosisVariable],
    reasoner: &Reasoner,
    counters: &mut DiagnosisCounters,
) -> Result<Vec<CausalEdge>, DiagnosisError> {
    let err = wrap(node);
    let order = precedence_order(vars);
    let mut edges = Vec::new();
    for (a, &i) in order.iter().enumerate() {
        for &j in &order[a + 1..] {
            let (cause, effect) = (&vars[i], &vars[j]);
            counters.pair_queries += 1;
            let Response::Relation {
                related,
                confidence,
                rationale,
            } = reasoner
                .dispatch(Payload::Relation {
                    cause: cause.describe(),
                    effect: effect.describe(),
                })
                .map_err(&err)?
            else {
                unreachable!("dispatch checks the response kind")
            };
            if related {
                edges.push(CausalEdge {
                    src: cause.id,
                    dst: effect.id,
                    confidence: confidence.clamp(0.0, 1.0),
                    rationale,
                    auxiliary: false,
                });
            }
        }
    }
    Ok(edges)
}

/// Assembles a DAG, returning it with the edges dropped to break cycles.
pub fn build_diagnosis_graph(
    node: NodeId,
    vars: Vec<DiagnosisVariable>,
    edges: Vec<CausalEdge>,
) -> (DiagnosisGraph, Vec<CausalEdge>) {
    let mut g = DiagnosisGraph::new(node);
    for v in vars {
        g.insert_variable(v);
    }
    for e in edges {
        g.insert_edge(e);
    }
    let removed = g.break_cycles();
    (g, removed)
}

/// Default classifier: the category assigned at extraction.
pub fn by_category(v: &DiagnosisVariable) -> Option<SubtreeKind> {
    v.category
}

/// One subtree per category with at least one seed: the seeds plus all
/// their ancestors, with the induced edges.
pub fn extract_subtrees(
    graph: &DiagnosisGraph,
    classifier: &dyn Fn(&DiagnosisVariable) -> Option<SubtreeKind>,
) -> Vec<Subtree> {
    SubtreeKind::ALL
        .into_iter()
        .filter_map(|kind| {
            let seeds: Vec<VarId> = graph.variables().filter(|v| classifier(v) == Some(kind)).map(|v| v.id).collect();
            if seeds.is_empty() {
                return None;
            }
            let mut vars: BTreeSet<VarId> = seeds.iter().copied().collect();
            for s in &seeds {
                vars.extend(graph.ancestors(*s));
            }
            let edges = graph
                .edges()
                .filter(|e| vars.contains(&e.src) && vars.contains(&e.dst))
                .map(|e| (e.src, e.dst))
                .collect();
            Some(Subtree {
                kind,
                variables: vars,
                edges,
            })
        })
        .collect()
}

/// Union of the subtrees as a subgraph of `graph`.
pub fn consolidate(graph: &DiagnosisGraph, subtrees: &[Subtree]) -> DiagnosisGraph {
    let mut out = DiagnosisGraph::new(graph.node.clone());
    for st in subtrees {
        for v in &st.variables {
            if let Some(var) = graph.variable(*v) {
                out.insert_variable(var.clone());
            }
        }
        for (s, d) in &st.edges {
            if let Some(e) = graph.edge(*s, *d) {
                out.insert_edge(e.clone());
            }
        }
    }
    out
}

/// Runs extraction, edge inference, DAG assembly, subtree extraction and
/// consolidation.
pub fn diagnose(bundle: &LogBundle, reasoner: &Reasoner, config: &DiagnosisConfig) -> Result<Diagnosis, DiagnosisError> {
    let mut counters = DiagnosisCounters::default();
    let vars = extract_variables(bundle, reasoner, config, &mut counters)?;
    let edges = infer_edges(&bundle.node, &vars, reasoner, &mut counters)?;
    let (graph, removed) = build_diagnosis_graph(bundle.node.clone(), vars, edges);
    counters.edges_removed = removed.len() as u64;
    let subtrees = extract_subtrees(&graph, &by_category);
    let consolidated = consolidate(&graph, &subtrees);
    Ok(Diagnosis {
        graph,
        removed,
        subtrees,
        consolidated,
        counters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logs::{LogRecord, LogSource, Severity};
    use proptest::prelude::*;

    fn bundle(lines: &[(i64, &str)]) -> LogBundle {
        LogBundle {
            node: "n1".into(),
            start_ms: 0,
            end_ms: 1_000_000,
            records: lines
                .iter()
                .enumerate()
                .map(|(i, (t, m))| {
                    let mut r = LogRecord::new(i as u64, *t, LogSource::Sys, *m);
                    r.message = m.to_string();
                    r
                })
                .collect(),
        }
    }

    fn var(id: u32, t: i64, category: Option<SubtreeKind>) -> DiagnosisVariable {
        DiagnosisVariable {
            id: VarId(id),
            kind: VariableKind::Event,
            label: format!("v{id}"),
            category,
            evidence: vec![Evidence {
                seq: u64::from(id),
                timestamp_ms: t,
                message: format!("line {id}"),
            }],
            first_seen: t,
            last_seen: t,
            auxiliary: false,
        }
    }

    fn edge(s: u32, d: u32, c: f64) -> CausalEdge {
        CausalEdge {
            src: VarId(s),
            dst: VarId(d),
            confidence: c,
            rationale: String::new(),
            auxiliary: false,
        }
    }

    #[test]
    fn empty_bundle_has_no_variables() {
        let d = diagnose(&bundle(&[]), &Reasoner::scripted(), &DiagnosisConfig::default()).unwrap();
        assert!(d.graph.is_empty());
        assert!(d.subtrees.is_empty());
    }

    #[test]
    fn single_timeout_line() {
        let r = Reasoner::scripted();
        let mut c = DiagnosisCounters::default();
        let vars = extract_variables(
            &bundle(&[(5, "connection timeout to 10.0.0.2")]),
            &r,
            &DiagnosisConfig::default(),
            &mut c,
        )
        .unwrap();
        assert_eq!(vars.len(), 1);
        assert_eq!(vars[0].kind, VariableKind::Event);
        assert_eq!(vars[0].label, "connection timeout");
        assert_eq!(vars[0].evidence.len(), 1);
        assert_eq!(vars[0].evidence[0].seq, 0);
    }

    #[test]
    fn identical_lines_merge_and_batches_split() {
        let r = Reasoner::scripted();
        let lines: Vec<(i64, &str)> = (0..10).map(|i| (i, "write failed on /data")).collect();
        let mut c = DiagnosisCounters::default();
        let vars = extract_variables(&bundle(&lines), &r, &DiagnosisConfig { extract_batch: 4 }, &mut c).unwrap();
        assert_eq!(vars.len(), 1);
        assert_eq!(vars[0].evidence.len(), 10);
        assert_eq!((vars[0].first_seen, vars[0].last_seen), (0, 9));
        assert_eq!(c.extract_calls, 3);
    }

    #[test]
    fn disk_full_causes_write_failed() {
        let b = bundle(&[(1, "disk full on /data"), (2, "write failed: block 7")]);
        let d = diagnose(&b, &Reasoner::scripted(), &DiagnosisConfig::default()).unwrap();
        assert_eq!(d.graph.variable(VarId(0)).unwrap().label, "disk full");
        assert_eq!(d.graph.variable(VarId(1)).unwrap().label, "write failed");
        assert!(d.graph.edge(VarId(0), VarId(1)).is_some());
        assert_eq!(d.counters.pair_queries, 1);
        assert_eq!(d.consolidated, d.graph);
        assert_eq!(
            d.graph.to_text(),
            "recist-diag v1 n1\nvar x0 resource_indicator disk full\nvar x1 error_code write failed\nedge x0 x1 1\n"
        );
    }

    #[test]
    fn precedence_gate_skips_backward_pairs() {
        let b = bundle(&[(1, "write failed: block 7"), (2, "disk full on /data")]);
        let r = Reasoner::scripted();
        let d = diagnose(&b, &r, &DiagnosisConfig::default()).unwrap();
        assert_eq!(d.graph.edge_count(), 0);
        assert_eq!(d.counters.pair_queries, 1);
        let t = r.transcript();
        let rel = t.entries.iter().find(|e| e.request["kind"] == "relation").unwrap();
        assert_eq!(rel.request["payload"]["cause"]["label"], "write failed");
    }

    #[test]
    fn three_cycle_loses_weakest_edge() {
        let (g, removed) = build_diagnosis_graph(
            "n".into(),
            vec![var(0, 0, None), var(1, 1, None), var(2, 2, None)],
            vec![edge(0, 1, 0.9), edge(1, 2, 0.8), edge(2, 0, 0.7)],
        );
        assert_eq!(removed.len(), 1);
        assert_eq!((removed[0].src, removed[0].dst), (VarId(2), VarId(0)));
        assert_eq!(g.edge_count(), 2);
    }

    #[test]
    fn cycle_tie_goes_to_latest_target() {
        let (_, removed) = build_diagnosis_graph(
            "n".into(),
            vec![var(0, 10, None), var(1, 30, None), var(2, 20, None)],
            vec![edge(0, 1, 0.5), edge(1, 2, 0.5), edge(2, 0, 0.5)],
        );
        assert_eq!(removed[0].dst, VarId(1));
    }

    #[test]
    fn shared_ancestor_in_both_subtrees() {
        let net = Some(SubtreeKind::NetworkInstability);
        let res = Some(SubtreeKind::ResourceOverload);
        let (g, _) = build_diagnosis_graph(
            "n".into(),
            vec![var(0, 0, None), var(1, 1, net), var(2, 2, res), var(3, 3, None)],
            vec![edge(0, 1, 1.0), edge(0, 2, 1.0), edge(2, 3, 1.0)],
        );
        let st = extract_subtrees(&g, &by_category);
        assert_eq!(st.len(), 2);
        assert_eq!(st[0].kind, SubtreeKind::ResourceOverload);
        assert_eq!(st[0].variables, [VarId(0), VarId(2)].into());
        assert_eq!(st[1].variables, [VarId(0), VarId(1)].into());
        let c = consolidate(&g, &st);
        assert_eq!(c.variable_count(), 3);
        assert_eq!(c.edge_count(), 2);
        assert!(c.variable(VarId(3)).is_none());
    }

    #[test]
    fn unclassified_graph_has_no_subtrees() {
        let (g, _) = build_diagnosis_graph("n".into(), vec![var(0, 0, None)], vec![]);
        assert!(extract_subtrees(&g, &by_category).is_empty());
    }

    #[test]
    fn reasoner_errors_carry_the_node() {
        let r = Reasoner::new(
            Box::new(crate::reasoner::ScriptedBackend::default()),
            crate::reasoner::ReasonerOptions {
                max_calls: 1,
                ..Default::default()
            },
            "",
        );
        let b = bundle(&[(1, "disk full"), (2, "write failed")]);
        let e = diagnose(&b, &r, &DiagnosisConfig::default()).unwrap_err();
        assert!(e.to_string().starts_with("diagnosis of n1"));
    }

    #[test]
    fn severity_fallback_variables_are_unclassified() {
        let mut b = bundle(&[(1, "widget 42 melted")]);
        b.records[0].severity = Some(Severity::Error);
        let d = diagnose(&b, &Reasoner::scripted(), &DiagnosisConfig::default()).unwrap();
        assert_eq!(d.graph.variable_count(), 1);
        assert!(d.consolidated.is_empty());
    }

    /// Every simple cycle, by brute force over vertex sequences.
    fn has_cycle_oracle(n: u32, edges: &BTreeSet<(u32, u32)>) -> bool {
        fn dfs(start: u32, v: u32, n: u32, e: &BTreeSet<(u32, u32)>, seen: &mut Vec<u32>) -> bool {
            for w in 0..n {
                if e.contains(&(v, w)) {
                    if w == start {
                        return true;
                    }
                    if !seen.contains(&w) {
                        seen.push(w);
                        if dfs(start, w, n, e, seen) {
                            return true;
                        }
                        seen.pop();
                    }
                }
            }
            false
        }
        (0..n).any(|s| dfs(s, s, n, edges, &mut vec![s]))
    }

    fn on_some_cycle(n: u32, edges: &BTreeSet<(u32, u32)>, e: (u32, u32)) -> bool {
        // e lies on a cycle iff dst reaches src.
        let mut seen = BTreeSet::from([e.1]);
        let mut stack = vec![e.1];
        while let Some(v) = stack.pop() {
            for w in 0..n {
                if edges.contains(&(v, w)) && seen.insert(w) {
                    stack.push(w);
                }
            }
        }
        seen.contains(&e.0)
    }

    proptest! {
        #[test]
        fn cycle_breaking_yields_a_dag(
            n in 2u32..=6,
            raw in proptest::collection::vec((0u32..6, 0u32..6, 1u32..10), 0..20),
        ) {
            let vars: Vec<_> = (0..n).map(|i| var(i, i64::from(i), None)).collect();
            let edges: Vec<_> = raw.iter().filter(|(s, d, _)| s < &n && d < &n && s != d)
                .map(|&(s, d, c)| edge(s, d, f64::from(c) / 10.0)).collect();
            let input: BTreeSet<(u32, u32)> = edges.iter().map(|e| (e.src.0, e.dst.0)).collect();
            let (g, removed) = build_diagnosis_graph("n".into(), vars, edges);
            let out: BTreeSet<(u32, u32)> = g.edges().map(|e| (e.src.0, e.dst.0)).collect();
            prop_assert!(!has_cycle_oracle(n, &out));
            prop_assert!(out.is_subset(&input));
            prop_assert_eq!(out.len() + removed.len(), input.len());
            for e in &removed {
                prop_assert!(on_some_cycle(n, &input, (e.src.0, e.dst.0)));
            }
        }

        #[test]
        fn subtrees_are_ancestor_closed(
            n in 1u32..=8,
            raw in proptest::collection::vec((0u32..8, 0u32..8), 0..20),
            cats in proptest::collection::vec(0usize..7, 8),
        ) {
            let vars: Vec<_> = (0..n).map(|i| var(i, i64::from(i), SubtreeKind::ALL.get(cats[i as usize]).copied())).collect();
            let edges: Vec<_> = raw.iter().filter(|(s, d)| s < d && d < &n).map(|&(s, d)| edge(s, d, 1.0)).collect();
            let (g, _) = build_diagnosis_graph("n".into(), vars, edges);
            let st = extract_subtrees(&g, &by_category);
            for t in &st {
                // Reachability oracle: v belongs iff it reaches a seed.
                for v in 0..n {
                    let reaches_seed = (0..n).any(|s| {
                        g.variable(VarId(s)).unwrap().category == Some(t.kind)
                            && (s == v || on_path(&g, v, s))
                    });
                    prop_assert_eq!(t.variables.contains(&VarId(v)), reaches_seed);
                }
            }
            let c = consolidate(&g, &st);
            prop_assert!(c.variables().all(|v| g.variable(v.id) == Some(v)));
            prop_assert!(c.edges().all(|e| g.edge(e.src, e.dst) == Some(e)));
            let union: BTreeSet<VarId> = st.iter().flat_map(|t| t.variables.iter().copied()).collect();
            prop_assert_eq!(c.variable_count(), union.len());
        }
    }

    fn on_path(g: &DiagnosisGraph, from: u32, to: u32) -> bool {
        let mut stack = vec![VarId(from)];
        let mut seen = BTreeSet::new();
        while let Some(v) = stack.pop() {
            if v == VarId(to) {
                return true;
            }
            if seen.insert(v) {
                stack.extend(g.children(v));
            }
        }
        false
    }
}
