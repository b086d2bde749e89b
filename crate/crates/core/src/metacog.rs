//! Meta-cognitive hypothesis search.
//!
//! Reasoning paths through the consolidated diagnosis graph are handed to
//! micro-agents, each of which asks the reasoner for a hypothesis and a
//! score. Low scores spawn auxiliary agents that explore re-rooted paths and
//! bridged variables; the first hypothesis above the inhibition threshold
//! ends the search.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnosis::{precedence_order, CausalEdge, DiagnosisGraph, DiagnosisVariable, VarId};
use crate::logs::LogBundle;
use crate::model::NodeId;
use crate::reasoner::{Payload, Reasoner, ReasonerError, Response};

/// Confidence assigned to bridging edges.
pub const BRIDGE_CONFIDENCE: f64 = 0.5;
/// Evidence lines quoted per hypothesis request.
pub const EVIDENCE_QUOTE_LIMIT: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaConfig {
    /// Weights of coherence, safety and utility.
    pub weights: [f64; 3],
    pub theta_pro: f64,
    pub theta_acc: f64,
    pub theta_inh: f64,
    pub r_max: u32,
    pub proliferation_batch: u32,
    /// Ceiling on agents spawned for one node.
    pub agent_cap: u32,
    pub max_depth: usize,
    pub path_cap: usize,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            weights: [0.4, 0.35, 0.25],
            theta_pro: 0.35,
            theta_acc: 0.55,
            theta_inh: 0.85,
            r_max: 8,
            proliferation_batch: 2,
            agent_cap: 32,
            max_depth: 12,
            path_cap: 64,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<(), MetaError> {
        let t = [self.theta_pro, self.theta_acc, self.theta_inh];
        if !(t.iter().all(|x| x.is_finite())
            && 0.0 <= self.theta_pro
            && self.theta_pro <= self.theta_acc
            && self.theta_acc < self.theta_inh
            && self.theta_inh <= 1.0)
        {
            return Err(MetaError::BadThresholds(format!(
                "need 0 <= pro <= acc < inh <= 1, got {} {} {}",
                self.theta_pro, self.theta_acc, self.theta_inh
            )));
        }
        let w = self.weights;
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(MetaError::BadWeights(format!("{w:?}")));
        }
        if self.max_depth == 0 || self.path_cap == 0 {
            return Err(MetaError::BadThresholds("max_depth and path_cap must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetaError {
    #[error("bad thresholds: {0}")]
    BadThresholds(String),
    #[error("bad weights: {0}")]
    BadWeights(String),
    #[error("path {0} has no evidence in the bundle")]
    EmptyNarrative(usize),
    #[error("reasoner: {0}")]
    Reasoner(#[from] ReasonerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Harmful,
    Rejected,
    Accepted,
    Best,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Harmful => "harmful",
            Self::Rejected => "rejected",
            Self::Accepted => "accepted",
            Self::Best => "best",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentLevel {
    System,
    Auxiliary,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningPath {
    pub index: usize,
    pub vars: Vec<VarId>,
}

impl ReasoningPath {
    pub fn depth(&self) -> usize {
        self.vars.len()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PathSet {
    pub paths: Vec<ReasoningPath>,
    /// The cap cut enumeration short.
    pub truncated: bool,
}

fn dfs_paths(
    graph: &DiagnosisGraph,
    start: VarId,
    max_depth: usize,
    cap: usize,
    out: &mut Vec<Vec<VarId>>,
) -> bool {
    let mut stack: Vec<(VarId, Vec<VarId>)> = vec![(start, graph.children(start).collect())];
    let mut prefix = vec![start];
    if stack[0].1.is_empty() || max_depth == 1 {
        if out.len() >= cap {
            return true;
        }
        out.push(prefix);
        return false;
    }
    while let Some((_, pending)) = stack.last_mut() {
        if pending.is_empty() {
            stack.pop();
            prefix.pop();
            continue;
        }
        let c = pending.remove(0);
        if prefix.contains(&c) {
            continue;
        }
        prefix.push(c);
        let children: Vec<VarId> = graph.children(c).filter(|k| !prefix.contains(k)).collect();
        if children.is_empty() || prefix.len() >= max_depth {
            if out.len() >= cap {
                return true;
            }
            out.push(prefix.clone());
            prefix.pop();
        } else {
            stack.push((c, children));
        }
    }
    false
}

/// Root-to-sink paths in depth-first order, children by ascending id.
/// Paths longer than `max_depth` are cut to their first `max_depth`
/// variables; enumeration stops after `cap` paths.
pub fn enumerate_paths(graph: &DiagnosisGraph, max_depth: usize, cap: usize) -> PathSet {
    let mut raw = Vec::new();
    let mut truncated = false;
    for root in graph.roots() {
        if dfs_paths(graph, root, max_depth, cap, &mut raw) {
            truncated = true;
            break;
        }
    }
    PathSet {
        paths: raw
            .into_iter()
            .enumerate()
            .map(|(index, vars)| ReasoningPath { index, vars })
            .collect(),
        truncated,
    }
}

/// Paths starting at an arbitrary variable.
pub fn paths_from(graph: &DiagnosisGraph, start: VarId, max_depth: usize, cap: usize) -> Vec<Vec<VarId>> {
    let mut out = Vec::new();
    if graph.variable(start).is_some() {
        dfs_paths(graph, start, max_depth, cap, &mut out);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Invocation {
    pub agent: u32,
    pub path: usize,
    /// Reasoner seconds charged before the call.
    pub time: f64,
    pub level: AgentLevel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proliferation {
    pub trigger_path: usize,
    pub spawned: u32,
    pub new_paths: Vec<usize>,
    pub bridges: Vec<(VarId, VarId)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inhibition {
    pub agent: u32,
    pub path: usize,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MicroAgentLedger {
    /// Level of each spawned agent, indexed by agent id.
    pub agents: Vec<AgentLevel>,
    pub invocations: Vec<Invocation>,
    pub proliferations: Vec<Proliferation>,
    pub inhibitions: Vec<Inhibition>,
    pub cap_reached: bool,
}

impl MicroAgentLedger {
    pub fn spawned(&self) -> u32 {
        self.agents.len() as u32
    }

    pub fn system_spawned(&self) -> u32 {
        self.agents.iter().filter(|l| **l == AgentLevel::System).count() as u32
    }

    /// Distinct system agents that were invoked.
    pub fn system_invoked(&self) -> u32 {
        self.invocations
            .iter()
            .filter(|i| i.level == AgentLevel::System)
            .map(|i| i.agent)
            .collect::<BTreeSet<_>>()
            .len() as u32
    }

    /// Share of spawned agents that were invoked at system level.
    pub fn rdr(&self) -> Option<f64> {
        (!self.agents.is_empty()).then(|| f64::from(self.system_invoked()) / f64::from(self.spawned()))
    }

    fn spawn(&mut self, level: AgentLevel, n: u32, cap: u32) -> Vec<u32> {
        let room = cap.saturating_sub(self.spawned());
        let take = n.min(room);
        if take < n {
            self.cap_reached = true;
        }
        (0..take)
            .map(|_| {
                self.agents.push(level);
                self.agents.len() as u32 - 1
            })
            .collect()
    }
}

/// Registers `min(r_max, paths)` system agents, bounded by the agent cap.
pub fn spawn_micro_agents(paths: usize, config: &MetaConfig) -> MicroAgentLedger {
    let mut ledger = MicroAgentLedger::default();
    let r = (config.r_max as usize).min(paths) as u32;
    ledger.spawn(AgentLevel::System, r, config.agent_cap);
    ledger
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Scores {
    pub coherence: f64,
    pub safety: f64,
    pub utility: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub id: String,
    pub agent: u32,
    pub path: ReasoningPath,
    pub topic: String,
    pub reason: String,
    pub solution: String,
    /// Sequence numbers of supporting log lines.
    pub evidence: Vec<u64>,
    pub scores: Scores,
    pub gamma: f64,
    pub verdict: Option<Verdict>,
}

/// Weighted sum of the component scores.
pub fn gamma(scores: &Scores, w: [f64; 3]) -> f64 {
    w[0] * scores.coherence + w[1] * scores.safety + w[2] * scores.utility
}

pub fn classify_verdict(gamma: f64, config: &MetaConfig) -> Result<Verdict, MetaError> {
    config.validate()?;
    Ok(if gamma < config.theta_pro {
        Verdict::Harmful
    } else if gamma >= config.theta_inh {
        Verdict::Best
    } else if gamma >= config.theta_acc {
        Verdict::Accepted
    } else {
        Verdict::Rejected
    })
}

/// Asks the reasoner for a narrative over `path`. Evidence is the set of
/// bundle lines behind the path's variables.
pub fn generate_hypothesis(
    agent: u32,
    path: &ReasoningPath,
    graph: &DiagnosisGraph,
    bundle: &LogBundle,
    reasoner: &Reasoner,
) -> Result<Hypothesis, MetaError> {
    let in_bundle: BTreeSet<u64> = bundle.records.iter().map(|r| r.seq).collect();
    let vars: Vec<&DiagnosisVariable> = path.vars.iter().filter_map(|v| graph.variable(*v)).collect();
    let mut quoted: BTreeMap<u64, &str> = BTreeMap::new();
    for v in &vars {
        for e in &v.evidence {
            if in_bundle.contains(&e.seq) {
                quoted.insert(e.seq, &e.message);
            }
        }
    }
    if quoted.is_empty() || vars.len() != path.vars.len() {
        return Err(MetaError::EmptyNarrative(path.index));
    }
    let response = reasoner.dispatch(Payload::Hypothesize {
        node: graph.node.to_string(),
        path: vars.iter().map(|v| v.describe()).collect(),
        evidence: quoted.values().take(EVIDENCE_QUOTE_LIMIT).map(|m| m.to_string()).collect(),
    })?;
    let Response::Hypothesize { topic, reason, solution } = response else {
        unreachable!("dispatch checks the response kind")
    };
    if [&topic, &reason, &solution].iter().any(|s| s.trim().is_empty()) {
        return Err(MetaError::EmptyNarrative(path.index));
    }
    Ok(Hypothesis {
        id: format!("H{}-{}", graph.node, path.index),
        agent,
        path: path.clone(),
        topic,
        reason,
        solution,
        evidence: quoted.into_keys().collect(),
        scores: Scores::default(),
        gamma: 0.0,
        verdict: None,
    })
}

/// Fills in the scores, gamma and verdict.
pub fn score_hypothesis(mut h: Hypothesis, config: &MetaConfig, reasoner: &Reasoner) -> Result<Hypothesis, MetaError> {
    config.validate()?;
    let response = reasoner.dispatch(Payload::Evaluate {
        topic: h.topic.clone(),
        reason: h.reason.clone(),
        solution: h.solution.clone(),
        path_len: h.path.depth(),
        evidence: h.evidence.len(),
    })?;
    let Response::Evaluate {
        coherence,
        safety,
        utility,
    } = response
    else {
        unreachable!("dispatch checks the response kind")
    };
    h.scores = Scores {
        coherence: coherence.clamp(0.0, 1.0),
        safety: safety.clamp(0.0, 1.0),
        utility: utility.clamp(0.0, 1.0),
    };
    h.gamma = gamma(&h.scores, config.weights);
    h.verdict = Some(classify_verdict(h.gamma, config)?);
    Ok(h)
}

/// Additions to a diagnosis graph.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Delta {
    pub variables: Vec<DiagnosisVariable>,
    pub edges: Vec<CausalEdge>,
}

/// Applies the deltas, tagging the additions as auxiliary, and restores the
/// DAG property. Returns the new graph and any edges dropped.
pub fn restructure_graph(graph: &DiagnosisGraph, deltas: &[Delta]) -> (DiagnosisGraph, Vec<CausalEdge>) {
    let mut g = graph.clone();
    for d in deltas {
        for v in &d.variables {
            g.insert_variable(DiagnosisVariable {
                auxiliary: true,
                ..v.clone()
            });
        }
        for e in &d.edges {
            g.insert_edge(CausalEdge {
                auxiliary: true,
                ..e.clone()
            });
        }
    }
    let removed = g.break_cycles();
    (g, removed)
}

/// Index of the highest-gamma hypothesis at or above `theta_inh`; ties go
/// to the earliest path.
pub fn select_best(scored: &[Hypothesis], theta_inh: f64) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, h) in scored.iter().enumerate() {
        if h.gamma < theta_inh {
            continue;
        }
        let better = best.is_none_or(|b| {
            let cur = &scored[b];
            h.gamma > cur.gamma || (h.gamma == cur.gamma && h.path.index < cur.path.index)
        });
        if better {
            best = Some(i);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaOutcome {
    pub node: NodeId,
    pub best: Option<Hypothesis>,
    pub supporting: Vec<Hypothesis>,
    pub hypotheses: Vec<Hypothesis>,
    pub graph: DiagnosisGraph,
    pub ledger: MicroAgentLedger,
    pub paths_enumerated: usize,
    pub paths_truncated: bool,
    /// Paths whose variables had no evidence in the bundle.
    pub empty_narratives: Vec<usize>,
}

impl MetaOutcome {
    /// No hypothesis reached the inhibition threshold.
    pub fn escalated(&self) -> bool {
        self.best.is_none()
    }

    /// Structured text for telemetry and the knowledge handoff.
    pub fn to_text(&self) -> String {
        let mut s = format!("meta {}\n", self.node);
        let _ = writeln!(
            s,
            "agents {} system {} invoked {} paths {}{}",
            self.ledger.spawned(),
            self.ledger.system_spawned(),
            self.ledger.system_invoked(),
            self.paths_enumerated,
            if self.paths_truncated { " truncated" } else { "" }
        );
        for h in &self.hypotheses {
            let path: Vec<String> = h.path.vars.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(
                s,
                "hypothesis {} path {} gamma {:.6} verdict {}",
                h.id,
                path.join(">"),
                h.gamma,
                h.verdict.map_or("none", Verdict::as_str)
            );
        }
        match &self.best {
            Some(b) => {
                let _ = writeln!(s, "best {}\ntopic {}\nreason {}\nsolution {}", b.id, b.topic, b.reason, b.solution);
            }
            None => s.push_str("best none\n"),
        }
        s
    }
}

struct Explorer<'a> {
    config: &'a MetaConfig,
    graph: DiagnosisGraph,
    seen_paths: BTreeSet<Vec<VarId>>,
    paths: Vec<ReasoningPath>,
    bridged: BTreeSet<(VarId, VarId)>,
}

impl Explorer<'_> {
    fn add_path(&mut self, vars: Vec<VarId>) -> Option<usize> {
        if !self.seen_paths.insert(vars.clone()) {
            return None;
        }
        let index = self.paths.len();
        self.paths.push(ReasoningPath { index, vars });
        Some(index)
    }

    /// Next unexplored path: first a re-rooted traversal from the variable
    /// with the most children that has not started a path yet, then a path
    /// through a new bridge between temporally adjacent unlinked variables.
    fn next_path(&mut self, bridges: &mut Vec<(VarId, VarId)>) -> Option<usize> {
        let started: BTreeSet<VarId> = self.seen_paths.iter().map(|p| p[0]).collect();
        let mut roots: Vec<VarId> = self
            .graph
            .variables()
            .map(|v| v.id)
            .filter(|v| !started.contains(v) && self.graph.out_degree(*v) > 0)
            .collect();
        roots.sort_by_key(|v| (std::cmp::Reverse(self.graph.out_degree(*v)), *v));
        for r in roots {
            let cands = paths_from(&self.graph, r, self.config.max_depth, self.config.path_cap);
            for p in cands {
                if let Some(i) = self.add_path(p) {
                    return Some(i);
                }
            }
        }

        let vars: Vec<DiagnosisVariable> = self.graph.variables().cloned().collect();
        let order = precedence_order(&vars);
        for w in order.windows(2) {
            let (a, b) = (vars[w[0]].id, vars[w[1]].id);
            if self.graph.edge(a, b).is_some() || self.graph.edge(b, a).is_some() || self.bridged.contains(&(a, b)) {
                continue;
            }
            self.bridged.insert((a, b));
            let (g, _) = restructure_graph(
                &self.graph,
                &[Delta {
                    variables: vec![],
                    edges: vec![CausalEdge {
                        src: a,
                        dst: b,
                        confidence: BRIDGE_CONFIDENCE,
                        rationale: "temporal neighbours".into(),
                        auxiliary: true,
                    }],
                }],
            );
            self.graph = g;
            if self.graph.edge(a, b).is_none() {
                continue;
            }
            bridges.push((a, b));
            let tails = paths_from(&self.graph, b, self.config.max_depth.saturating_sub(1).max(1), 1);
            let mut p = vec![a];
            p.extend(tails.into_iter().next().unwrap_or_else(|| vec![b]));
            if let Some(i) = self.add_path(p) {
                return Some(i);
            }
        }
        None
    }
}

/// Runs the agent loop over a consolidated diagnosis graph.
pub fn run_meta(
    graph: &DiagnosisGraph,
    bundle: &LogBundle,
    reasoner: &Reasoner,
    config: &MetaConfig,
) -> Result<MetaOutcome, MetaError> {
    config.validate()?;
    let initial = enumerate_paths(graph, config.max_depth, config.path_cap);
    let mut ledger = spawn_micro_agents(initial.paths.len(), config);
    let mut ex = Explorer {
        config,
        graph: graph.clone(),
        seen_paths: initial.paths.iter().map(|p| p.vars.clone()).collect(),
        paths: initial.paths.clone(),
        bridged: BTreeSet::new(),
    };
    let system = ledger.spawned().max(1);
    let mut queue: VecDeque<(usize, u32)> = initial.paths.iter().map(|p| (p.index, p.index as u32 % system)).collect();
    let mut hypotheses = Vec::new();
    let mut empty = Vec::new();
    let mut inhibited = false;

    while let Some((pi, agent)) = queue.pop_front() {
        let level = ledger.agents[agent as usize];
        ledger.invocations.push(Invocation {
            agent,
            path: pi,
            time: reasoner.total_latency(),
            level,
        });
        let path = ex.paths[pi].clone();
        let h = match generate_hypothesis(agent, &path, &ex.graph, bundle, reasoner) {
            Ok(h) => score_hypothesis(h, config, reasoner)?,
            Err(MetaError::EmptyNarrative(i)) => {
                empty.push(i);
                continue;
            }
            Err(e) => return Err(e),
        };
        let verdict = h.verdict.expect("scored");
        hypotheses.push(h);
        match verdict {
            Verdict::Best => {
                ledger.inhibitions.push(Inhibition {
                    agent,
                    path: pi,
                    gamma: hypotheses.last().expect("pushed").gamma,
                });
                inhibited = true;
                break;
            }
            Verdict::Harmful => {
                let spawned = ledger.spawn(AgentLevel::Auxiliary, config.proliferation_batch, config.agent_cap);
                let mut bridges = Vec::new();
                let mut new_paths = Vec::new();
                for &a in &spawned {
                    match ex.next_path(&mut bridges) {
                        Some(i) => {
                            new_paths.push(i);
                            queue.push_back((i, a));
                        }
                        None => break,
                    }
                }
                ledger.proliferations.push(Proliferation {
                    trigger_path: pi,
                    spawned: spawned.len() as u32,
                    new_paths,
                    bridges,
                });
            }
            Verdict::Accepted | Verdict::Rejected => {}
        }
    }

    let best = if inhibited {
        select_best(&hypotheses, config.theta_inh).map(|i| hypotheses[i].clone())
    } else {
        None
    };
    let supporting = hypotheses
        .iter()
        .filter(|h| h.verdict == Some(Verdict::Accepted))
        .cloned()
        .collect();
    Ok(MetaOutcome {
        node: graph.node.clone(),
        best,
        supporting,
        hypotheses,
        graph: ex.graph,
        ledger,
        paths_enumerated: initial.paths.len(),
        paths_truncated: initial.truncated,
        empty_narratives: empty,
    })
}
