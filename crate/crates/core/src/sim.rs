//! The four healing layers wired into one policy, plus the run driver that
//! loads inputs, runs a scenario and renders every output file.
//!
//! Time is simulated. Failures are noticed on the next probe tick plus the
//! probe timeout; containment costs one negotiation round trip; diagnosis,
//! meta-cognition and knowledge cost whatever latency the reasoner charged.
//! Nodes flagged together heal in parallel, so their events interleave by
//! time.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::config::{BackendKind, DatasetFormat, Finding, SimConfig};
use crate::containment::{ContainmentLayer, ContainmentOutcome};
use crate::diagnosis::{diagnose, Diagnosis};
use crate::faults::{synthetic_records, transition_state, FailureEvent, FailureKind, FailureScenario};
use crate::knowledge::{KnowledgeRecord, Placement, RendezvousStore, Scope};
use crate::logs::{extract_window, LogBundle, LogRecord};
use crate::metacog::{run_meta, MetaOutcome, Verdict};
use crate::model::{
    assign_task, compute_resilience, load_topology, Allocation, HealError, HealingPolicy, NodeId, NodeState,
    SystemGraph, Topology,
};
use crate::reasoner::{
    RemoteBackend, ReasonerOptions, Reasoner, ReplayBackend, RuleTable, ScriptedBackend, Transcript,
};
use crate::telemetry::{
    compute_rates, export_csv, export_jsonl, rates_csv, recovery_csv, recovery_records, CpuSampler, EventKind,
    EventStream, Layer,
};

/// Fixed names of the files a run writes.
pub const OUTPUT_FILES: [&str; 11] = [
    "metrics.csv",
    "metrics.jsonl",
    "rates.csv",
    "recovery.csv",
    "knowledge.txt",
    "knowledge_journal.jsonl",
    "transcript.jsonl",
    "diagnosis.txt",
    "meta.txt",
    "effective_config.toml",
    "summary.json",
];

const GLOBAL_OWNER: &str = "global";
const SYNTHETIC_SCOPE: &str = "synthetic";
const NO_BEST: &str = "no hypothesis reached the inhibition threshold";

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Config(Vec<Finding>),
    #[error("{0}")]
    Input(String),
    #[error("cannot write `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl SimError {
    /// Machine-readable form for error reports.
    pub fn to_json(&self) -> serde_json::Value {
        let kind = match self {
            Self::Config(_) => "config",
            Self::Input(_) => "input",
            Self::Io { .. } => "io",
        };
        let mut v = serde_json::json!({"error": kind, "message": self.to_string()});
        if let Self::Config(f) = self {
            v["findings"] = serde_json::to_value(f).expect("findings serialize");
        }
        v
    }
}

/// A parsed log corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub format: DatasetFormat,
    /// Node whose failures read this dataset.
    pub node: Option<NodeId>,
    pub records: Vec<LogRecord>,
}

/// Everything a run reads from disk.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub topology: Topology,
    pub scenario: FailureScenario,
    pub datasets: Vec<Dataset>,
}

fn read(config: &SimConfig, key: &str, p: Option<&Path>) -> Result<Vec<u8>, SimError> {
    let p = p.ok_or_else(|| SimError::Input(format!("{key} is not set")))?;
    let full = config.resolve(p);
    std::fs::read(&full).map_err(|e| SimError::Input(format!("{key}: {}: {e}", full.display())))
}

/// Reads topology, scenario and datasets named by the config.
pub fn load_inputs(config: &SimConfig) -> Result<Inputs, SimError> {
    let text = String::from_utf8_lossy(&read(config, "inputs.topology", config.inputs.topology.as_deref())?).into_owned();
    let topology = load_topology(&text, config.model.bandwidth_floor)
        .map_err(|e| SimError::Input(format!("inputs.topology: {e}")))?;
    let text = String::from_utf8_lossy(&read(config, "inputs.scenario", config.inputs.scenario.as_deref())?).into_owned();
    let scenario = FailureScenario::parse(&text).map_err(|e| SimError::Input(format!("inputs.scenario: {e}")))?;
    scenario
        .validate(&topology.graph)
        .map_err(|e| SimError::Input(format!("inputs.scenario: {e}")))?;
    let mut datasets = Vec::new();
    for d in &config.inputs.datasets {
        let key = format!("inputs.datasets.{}", d.name);
        let bytes = read(config, &key, Some(&d.path))?;
        let parsed = d
            .format
            .parse(&bytes, config.logs.base_year)
            .map_err(|e| SimError::Input(format!("{key}: {e}")))?;
        datasets.push(Dataset {
            name: d.name.clone(),
            format: d.format,
            node: d.node.as_deref().map(NodeId::from),
            records: parsed.records,
        });
    }
    Ok(Inputs {
        topology,
        scenario,
        datasets,
    })
}

/// Builds the reasoner the config selects.
pub fn build_reasoner(config: &SimConfig) -> Result<Reasoner, SimError> {
    let r = &config.reasoner;
    let options = ReasonerOptions {
        synthetic_latency: r.synthetic_latency,
        max_tokens: r.max_tokens,
        max_calls: r.max_calls,
        seed: config.run.seed,
    };
    let backend: Box<dyn crate::reasoner::Backend> = match r.backend {
        BackendKind::Scripted => {
            let rules = match &r.rules {
                None => RuleTable::default(),
                Some(p) => {
                    let text = String::from_utf8_lossy(&read(config, "reasoner.rules", Some(p))?).into_owned();
                    RuleTable::parse(&text).map_err(|e| SimError::Input(format!("reasoner.rules: {e}")))?
                }
            };
            Box::new(ScriptedBackend::new(rules, Default::default()))
        }
        BackendKind::Replay => {
            let text =
                String::from_utf8_lossy(&read(config, "reasoner.transcript", r.transcript.as_deref())?).into_owned();
            let t = Transcript::from_jsonl(&text).map_err(|e| SimError::Input(format!("reasoner.transcript: {e}")))?;
            Box::new(ReplayBackend::new(t))
        }
        BackendKind::Remote => {
            let rc = r
                .remote
                .clone()
                .ok_or_else(|| SimError::Input("remote backend needs a [reasoner.remote] section".into()))?;
            Box::new(RemoteBackend::new(rc).map_err(|e| SimError::Input(format!("reasoner.remote: {e}")))?)
        }
    };
    Ok(Reasoner::new(backend, options, config.hash()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Resolution {
    Best,
    Escalated,
    Error,
}

/// One flagged node and how its healing ended.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Incident {
    pub node: NodeId,
    /// Times of the scenario events this incident answers.
    pub events: Vec<f64>,
    pub flag_time: f64,
    pub end_time: f64,
    pub scope: String,
    pub resolution: Resolution,
    pub hypothesis: Option<String>,
    pub error: Option<String>,
}

struct Staged {
    time: f64,
    node: Option<String>,
    order: usize,
    layer: Layer,
    scope: Option<String>,
    kind: EventKind,
}

/// Work carried from the meta layer to the knowledge layer.
struct Pending {
    time: f64,
    incident: usize,
    meta: MetaOutcome,
}

/// The full healing pipeline as a policy.
pub struct Pipeline<'a> {
    config: &'a SimConfig,
    reasoner: &'a Reasoner,
    datasets: &'a [Dataset],
    pristine: ContainmentLayer,
    layer: ContainmentLayer,
    pub events: EventStream,
    pub incidents: Vec<Incident>,
    pub global: RendezvousStore,
    pub locals: BTreeMap<NodeId, RendezvousStore>,
    /// Diagnosis graphs in processing order.
    pub diagnosis_text: String,
    /// Meta-layer summaries in processing order.
    pub meta_text: String,
    pub errors: Vec<String>,
    staged: Vec<Staged>,
    clock: f64,
    scenario_id: String,
    sampler: Option<CpuSampler>,
}

fn placement_name(p: &Placement) -> &'static str {
    match p {
        Placement::NewTopic { .. } => "new_topic",
        Placement::NewPartition { .. } => "new_partition",
        Placement::Reinforced { .. } => "reinforced",
    }
}

impl<'a> Pipeline<'a> {
    pub fn new(
        graph: &SystemGraph,
        config: &'a SimConfig,
        reasoner: &'a Reasoner,
        datasets: &'a [Dataset],
    ) -> Result<Self, SimError> {
        let layer = ContainmentLayer::new(graph, config.containment.clone())
            .map_err(|e| SimError::Input(format!("containment: {e}")))?;
        let sampler = (config.reasoner.backend == BackendKind::Remote).then(CpuSampler::new);
        Ok(Self {
            config,
            reasoner,
            datasets,
            pristine: layer.clone(),
            layer,
            events: EventStream::new(),
            incidents: Vec::new(),
            global: RendezvousStore::new(Scope::Global, GLOBAL_OWNER, config.knowledge.clone()),
            locals: BTreeMap::new(),
            diagnosis_text: String::new(),
            meta_text: String::new(),
            errors: Vec::new(),
            staged: Vec::new(),
            clock: 0.0,
            scenario_id: String::new(),
            sampler,
        })
    }

    fn stage(&mut self, time: f64, layer: Layer, node: Option<&NodeId>, scope: Option<&str>, kind: EventKind) {
        let order = self.staged.len();
        self.staged.push(Staged {
            time,
            node: node.map(ToString::to_string),
            order,
            layer,
            scope: scope.map(str::to_string),
            kind,
        });
    }

    /// Moves staged events into the stream ordered by time, node, staging order.
    fn flush(&mut self) {
        let mut staged = std::mem::take(&mut self.staged);
        staged.sort_by(|a, b| a.time.total_cmp(&b.time).then_with(|| a.node.cmp(&b.node)).then(a.order.cmp(&b.order)));
        for s in staged {
            self.clock = self.clock.max(s.time);
            if let Err(e) = self.events.record(s.time, s.layer, s.node.as_deref(), s.scope.as_deref(), s.kind) {
                log::warn!("{e}");
            }
        }
    }

    fn cpu_sample(&mut self, time: f64, node: &NodeId, scope: &str, calls: u64) {
        let synthetic = (calls as f64 * self.config.telemetry.cpu_unit_cost).min(100.0);
        let (percent, synthetic_flag) = match self.sampler.as_mut().and_then(CpuSampler::sample) {
            Some(p) => (p, false),
            None => (synthetic, true),
        };
        self.stage(
            time,
            Layer::Run,
            Some(node),
            Some(scope),
            EventKind::CpuSample {
                percent,
                synthetic: synthetic_flag,
            },
        );
    }

    fn dataset_for(&self, node: &NodeId, scenario: &FailureScenario) -> Option<&'a Dataset> {
        let datasets = self.datasets;
        match scenario.attached_logs.get(node) {
            Some(name) => datasets.iter().find(|d| &d.name == name),
            None => datasets.iter().find(|d| d.node.as_ref() == Some(node)),
        }
    }

    /// The node's diagnosis window. A bound dataset is read up to its last
    /// record; otherwise the failure's synthetic log lines are used.
    fn bundle(&self, node: &NodeId, scenario: &FailureScenario, now: f64) -> Result<(LogBundle, String), String> {
        let window = self.config.logs.window;
        if let Some(d) = self.dataset_for(node, scenario) {
            let records: Vec<LogRecord> = d
                .records
                .iter()
                .map(|r| {
                    let mut r = r.clone();
                    r.node_hint = Some(node.clone());
                    r
                })
                .collect();
            let end = records.iter().map(|r| r.timestamp_ms).max().unwrap_or(0);
            let b = extract_window(&records, node, end, window).map_err(|e| e.to_string())?;
            return Ok((b, d.name.clone()));
        }
        let event = scenario
            .events
            .iter()
            .rev()
            .find(|e| &e.node == node && e.time <= now)
            .cloned()
            .unwrap_or(FailureEvent {
                time: now,
                node: node.clone(),
                kind: FailureKind::Crash,
            });
        let end = (now * 1000.0).round() as i64;
        let records = synthetic_records(&event, end, self.config.logs.synthetic_lines, 0);
        let b = extract_window(&records, node, end, window).map_err(|e| e.to_string())?;
        Ok((b, SYNTHETIC_SCOPE.to_string()))
    }

    fn fail(&mut self, incident: usize, time: f64, message: String) {
        let node = self.incidents[incident].node.clone();
        let scope = self.incidents[incident].scope.clone();
        let inc = &mut self.incidents[incident];
        inc.resolution = Resolution::Error;
        inc.end_time = time;
        inc.error = Some(message.clone());
        self.errors.push(format!("{node}: {message}"));
        self.stage(time, Layer::Run, Some(&node), Some(&scope), EventKind::Escalated { reason: message });
    }

    fn containment_duration(graph: &SystemGraph, outcome: &ContainmentOutcome, floor: f64) -> f64 {
        outcome
            .plug
            .replies
            .iter()
            .filter_map(|r| graph.path_latency(&outcome.failed, &r.node, floor))
            .fold(0.0, f64::max)
            * 2.0
    }

    /// Diagnosis and meta layers for one incident starting at `start`.
    fn reason(&mut self, incident: usize, start: f64, scenario: &FailureScenario) -> Option<Pending> {
        let node = self.incidents[incident].node.clone();
        let (bundle, scope) = match self.bundle(&node, scenario, start) {
            Ok(b) => b,
            Err(e) => {
                self.fail(incident, start, format!("log window: {e}"));
                return None;
            }
        };
        self.incidents[incident].scope = scope.clone();
        let r = self.reasoner;

        let (lat0, calls0) = (r.total_latency(), r.call_count());
        let diag: Diagnosis = match diagnose(&bundle, r, &self.config.diagnosis) {
            Ok(d) => d,
            Err(e) => {
                self.fail(incident, start, e.to_string());
                return None;
            }
        };
        let duration = r.total_latency() - lat0;
        let mut t = start + duration;
        self.stage(
            t,
            Layer::Diagnosis,
            Some(&node),
            Some(&scope),
            EventKind::Diagnosed {
                variables: diag.graph.variable_count(),
                edges: diag.graph.edge_count(),
                lines: diag.counters.lines,
                pair_queries: diag.counters.pair_queries,
                duration,
            },
        );
        self.cpu_sample(t, &node, &scope, r.call_count() - calls0);
        let _ = writeln!(self.diagnosis_text, "# {} t={t}", node);
        self.diagnosis_text.push_str(&diag.graph.to_text());
        for e in &diag.removed {
            let _ = writeln!(self.diagnosis_text, "removed {} {} {}", e.src, e.dst, e.confidence);
        }
        for s in &diag.subtrees {
            let _ = writeln!(self.diagnosis_text, "subtree {} {} {}", s.kind.as_str(), s.variables.len(), s.edges.len());
        }

        let (lat0, calls0) = (r.total_latency(), r.call_count());
        let meta = match run_meta(&diag.consolidated, &bundle, r, &self.config.meta) {
            Ok(m) => m,
            Err(e) => {
                self.fail(incident, t, e.to_string());
                return None;
            }
        };
        let duration = r.total_latency() - lat0;
        t += duration;
        for inv in &meta.ledger.invocations {
            let (hypothesis, verdict, gamma) = match meta.hypotheses.iter().find(|h| h.path.index == inv.path) {
                Some(h) => (h.id.clone(), h.verdict.expect("scored"), h.gamma),
                None => (format!("H{}-{}", node, inv.path), Verdict::Rejected, 0.0),
            };
            self.stage(
                t,
                Layer::Meta,
                Some(&node),
                Some(&scope),
                EventKind::Verdict {
                    hypothesis,
                    verdict,
                    gamma,
                    level: inv.level,
                },
            );
        }
        self.stage(
            t,
            Layer::Meta,
            Some(&node),
            Some(&scope),
            EventKind::Agents {
                spawned: meta.ledger.spawned(),
                system_spawned: meta.ledger.system_spawned(),
                system_invoked: meta.ledger.system_invoked(),
                invocations: meta.ledger.invocations.len(),
                paths: meta.paths_enumerated,
                duration,
            },
        );
        self.cpu_sample(t, &node, &scope, r.call_count() - calls0);
        self.meta_text.push_str(&meta.to_text());

        if meta.escalated() {
            let inc = &mut self.incidents[incident];
            inc.resolution = Resolution::Escalated;
            inc.end_time = t;
            self.stage(t, Layer::Meta, Some(&node), Some(&scope), EventKind::Escalated { reason: NO_BEST.into() });
            return None;
        }
        Some(Pending { time: t, incident, meta })
    }

    fn knowledge_record(&self, node: &NodeId, h: &crate::metacog::Hypothesis, time: f64, supporting: bool) -> KnowledgeRecord {
        KnowledgeRecord {
            id: format!("{}:{}:{}:{}", self.scenario_id, node, time, h.id),
            topic: h.topic.clone(),
            reason: h.reason.clone(),
            solution: h.solution.clone(),
            source: node.clone(),
            timestamp: time,
            version: 1,
            supporting,
        }
    }

    /// Knowledge layer and recovery for one incident whose best hypothesis
    /// is in hand.
    fn store_and_recover(&mut self, graph: &mut SystemGraph, alloc: &mut Allocation, p: Pending) {
        let node = self.incidents[p.incident].node.clone();
        let scope = self.incidents[p.incident].scope.clone();
        let best = p.meta.best.as_ref().expect("pending work has a best hypothesis");
        let mut records = vec![self.knowledge_record(&node, best, p.time, false)];
        if self.config.knowledge.persist_supporting {
            records.extend(p.meta.supporting.iter().map(|h| self.knowledge_record(&node, h, p.time, true)));
        }
        let r = self.reasoner;
        let (lat0, calls0) = (r.total_latency(), r.call_count());
        let local = self
            .locals
            .entry(node.clone())
            .or_insert_with(|| RendezvousStore::new(Scope::Local, node.to_string(), self.config.knowledge.clone()));
        let mut placement = None;
        let mut failure = None;
        for rec in records {
            match local.insert(rec, r) {
                Ok(rep) => {
                    placement.get_or_insert(rep.placement);
                }
                Err(e) => {
                    failure = Some(e.to_string());
                    break;
                }
            }
        }
        if failure.is_none() {
            if let Err(e) = self.global.sync_from(local, r) {
                failure = Some(e.to_string());
            }
        }
        let duration = r.total_latency() - lat0;
        let t = p.time + duration;
        if let Some(placement) = placement {
            self.stage(
                t,
                Layer::Knowledge,
                Some(&node),
                Some(&scope),
                EventKind::Stored {
                    placement: placement_name(&placement).into(),
                    duration,
                },
            );
        }
        self.cpu_sample(t, &node, &scope, r.call_count() - calls0);

        self.layer.failures.remove(&node);
        if graph.state(&node) == Ok(NodeState::Down) {
            let moved = transition_state(graph, &node, NodeState::Recovering, t)
                .and_then(|_| transition_state(graph, &node, NodeState::Available, t));
            if let Err(e) = moved {
                failure.get_or_insert(e.to_string());
            }
        }
        // Tasks the plug could not take return to their restored host.
        let stranded: Vec<_> = alloc
            .stale()
            .iter()
            .filter(|task| alloc.host(task) == Some(&node))
            .filter_map(|task| graph.task(task).cloned())
            .collect();
        for task in stranded {
            if let Err(e) = assign_task(graph, alloc, &task, &node) {
                log::info!("{node}: task `{}` stays stranded: {e}", task.id);
            }
        }
        self.stage(t, Layer::Run, Some(&node), Some(&scope), EventKind::Recovered);

        let inc = &mut self.incidents[p.incident];
        inc.end_time = t;
        inc.hypothesis = Some(best.id.clone());
        inc.resolution = Resolution::Best;
        if let Some(e) = failure {
            self.fail(p.incident, t, format!("knowledge: {e}"));
        }
    }

    /// Scenario events the incidents have not yet answered.
    pub fn unanswered(&self, scenario: &FailureScenario) -> Vec<FailureEvent> {
        scenario
            .events
            .iter()
            .filter(|e| {
                !self
                    .incidents
                    .iter()
                    .any(|i| i.node == e.node && i.events.contains(&e.time))
            })
            .cloned()
            .collect()
    }

    fn attach_events(&mut self, incident: usize, scenario: &FailureScenario, t: f64) {
        let node = self.incidents[incident].node.clone();
        let open: Vec<f64> = self
            .unanswered(scenario)
            .into_iter()
            .filter(|e| e.node == node && e.time <= t)
            .map(|e| e.time)
            .collect();
        self.incidents[incident].events.extend(open);
    }
}

impl HealingPolicy for Pipeline<'_> {
    fn begin_scenario(&mut self, scenario: &FailureScenario, _seed: u64) {
        self.layer = self.pristine.clone();
        self.scenario_id = if scenario.id.is_empty() { "scenario".into() } else { scenario.id.clone() };
        self.clock = 0.0;
    }

    fn heal(
        &mut self,
        graph: &mut SystemGraph,
        alloc: &mut Allocation,
        scenario: &FailureScenario,
        failed: &BTreeSet<NodeId>,
        t: f64,
    ) -> Result<(), HealError> {
        let start = t.max(self.clock);
        for e in scenario.events.iter().filter(|e| e.time == t) {
            self.stage(
                start,
                Layer::Fault,
                Some(&e.node),
                None,
                EventKind::Failure {
                    failure: e.kind.as_str().into(),
                },
            );
        }

        let interval = self.config.containment.probe_interval;
        let tick = (start / interval).ceil() * interval;
        let flag_time = tick + self.layer.max_timeout();
        let flagged = self.layer.sweep(graph, flag_time);

        // Failures on nodes whose earlier incident is still unresolved join it.
        for node in failed.iter().filter(|n| !flagged.contains(n)) {
            if let Some(i) = self.incidents.iter().rposition(|i| &i.node == node) {
                self.attach_events(i, scenario, t);
            }
        }

        let first = self.incidents.len();
        for node in &flagged {
            self.stage(flag_time, Layer::Containment, Some(node), None, EventKind::Flagged);
            self.incidents.push(Incident {
                node: node.clone(),
                events: Vec::new(),
                flag_time,
                end_time: flag_time,
                scope: SYNTHETIC_SCOPE.into(),
                resolution: Resolution::Escalated,
                hypothesis: None,
                error: None,
            });
            self.attach_events(self.incidents.len() - 1, scenario, t);
        }
        if flagged.is_empty() {
            self.flush();
            return Ok(());
        }

        let outcomes = match self.layer.contain(graph, alloc, &flagged, flag_time) {
            Ok(o) => o,
            Err(e) => {
                for i in first..self.incidents.len() {
                    self.fail(i, flag_time, format!("containment: {e}"));
                }
                self.flush();
                return Ok(());
            }
        };
        let mut starts = Vec::new();
        for (k, o) in outcomes.iter().enumerate() {
            let duration = Self::containment_duration(graph, o, self.config.model.bandwidth_floor);
            let done = flag_time + duration;
            self.stage(
                done,
                Layer::Containment,
                Some(&o.failed),
                None,
                EventKind::Contained {
                    placed: o.plug.reroute.len(),
                    unplaced: o.plug.unplaced.len(),
                    duration,
                },
            );
            starts.push((first + k, done));
        }

        let mut pending: Vec<Pending> = starts
            .into_iter()
            .filter_map(|(i, s)| self.reason(i, s, scenario))
            .collect();
        pending.sort_by(|a, b| {
            a.time
                .total_cmp(&b.time)
                .then_with(|| self.incidents[a.incident].node.cmp(&self.incidents[b.incident].node))
        });
        for p in pending {
            self.store_and_recover(graph, alloc, p);
        }
        self.flush();
        Ok(())
    }
}

/// Outcome counts behind the exit status.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub scenario: String,
    pub backend: String,
    pub failures: usize,
    pub incidents: Vec<Incident>,
    pub best: usize,
    pub escalated: usize,
    pub unanswered: Vec<FailureEvent>,
    pub errors: Vec<String>,
    /// Fraction of tasks still completing, as `numerator/denominator`.
    pub resilience: String,
    pub reasoner_calls: u64,
    pub order_violations: usize,
}

impl RunSummary {
    /// Zero when every failure reached a best hypothesis or was escalated.
    pub fn exit_code(&self) -> i32 {
        i32::from(!(self.unanswered.is_empty() && self.errors.is_empty()))
    }
}

/// Rendered output files keyed by file name.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub files: BTreeMap<&'static str, String>,
    pub summary: RunSummary,
}

impl RunOutput {
    pub fn file(&self, name: &str) -> &str {
        self.files.get(name).map_or("", String::as_str)
    }

    /// Writes every file under `dir`, creating it when needed.
    pub fn write(&self, dir: &Path) -> Result<(), SimError> {
        let io = |path: &Path| {
            let path = path.display().to_string();
            move |source| SimError::Io { path, source }
        };
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        for (name, body) in &self.files {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(io(&p))?;
        }
        Ok(())
    }
}

/// Validates, loads and runs the configured scenario.
pub fn run(config: &SimConfig) -> Result<RunOutput, SimError> {
    let findings = config.validate();
    if !findings.is_empty() {
        return Err(SimError::Config(findings));
    }
    let inputs = load_inputs(config)?;
    let reasoner = build_reasoner(config)?;
    run_with(config, &inputs, &reasoner)
}

/// Runs the pipeline over loaded inputs with a given reasoner.
pub fn run_with(config: &SimConfig, inputs: &Inputs, reasoner: &Reasoner) -> Result<RunOutput, SimError> {
    let Topology { graph, allocation } = &inputs.topology;
    let mut pipeline = Pipeline::new(graph, config, reasoner, &inputs.datasets)?;
    let resilience = compute_resilience(
        graph,
        allocation,
        std::slice::from_ref(&inputs.scenario),
        &mut pipeline,
        1,
        config.run.seed,
    )
    .map_err(|e| SimError::Input(e.to_string()))?;

    let events = pipeline.events.events();
    let scopes: BTreeSet<&str> = events.iter().filter_map(|e| e.scope.as_deref()).collect();
    let mut rows = Vec::new();
    for s in scopes {
        if let Ok(r) = compute_rates(events, Some(s)) {
            rows.push((s.to_string(), r));
        }
    }
    if let Ok(r) = compute_rates(events, None) {
        rows.push(("run".to_string(), r));
    }

    let ratio = resilience.ratio();
    let summary = RunSummary {
        scenario: inputs.scenario.id.clone(),
        backend: reasoner.backend_id(),
        failures: inputs.scenario.events.len(),
        best: pipeline.incidents.iter().filter(|i| i.resolution == Resolution::Best).count(),
        escalated: pipeline
            .incidents
            .iter()
            .filter(|i| i.resolution == Resolution::Escalated)
            .count(),
        unanswered: pipeline.unanswered(&inputs.scenario),
        errors: pipeline.errors.clone(),
        incidents: pipeline.incidents.clone(),
        resilience: format!("{}/{}", ratio.numer(), ratio.denom()),
        reasoner_calls: reasoner.call_count(),
        order_violations: pipeline.events.order_violations(),
    };

    let mut files = BTreeMap::new();
    files.insert("metrics.csv", export_csv(events));
    files.insert("metrics.jsonl", export_jsonl(events));
    files.insert("rates.csv", rates_csv(&rows));
    files.insert("recovery.csv", recovery_csv(&recovery_records(events)));
    files.insert("knowledge.txt", pipeline.global.snapshot());
    files.insert("knowledge_journal.jsonl", pipeline.global.journal_jsonl());
    files.insert("transcript.jsonl", reasoner.transcript().to_jsonl());
    files.insert("diagnosis.txt", pipeline.diagnosis_text.clone());
    files.insert("meta.txt", pipeline.meta_text.clone());
    files.insert("effective_config.toml", config.effective());
    files.insert(
        "summary.json",
        serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n",
    );
    debug_assert!(files.keys().all(|k| OUTPUT_FILES.contains(k)));
    Ok(RunOutput { files, summary })
}
