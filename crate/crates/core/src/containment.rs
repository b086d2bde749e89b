//! Containment: heartbeat probing, failure detection, neighbor negotiation
//! and task redistribution.
//!
//! Every node hosts one [`MonitoringAgent`] that probes its k-hop
//! neighborhood. A node that no prober hears from within the timeout is
//! flagged into the [`FailureSet`]. For each flagged node the layer asks
//! nearby nodes for their state and residual resources, forms a plug of
//! willing nodes, and moves the stale tasks onto it.

use std::cell::Cell;
use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::faults::{transition_state, FailureScenario};
use crate::model::{
    assign_task, Allocation, HealError, HealingPolicy, ModelError, NodeId, NodeState, SystemGraph, Task, TaskId, EPS,
};

/// Smallest timeout the layer will derive.
pub const MIN_TIMEOUT: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContainmentConfig {
    /// Neighborhood radius in hops.
    pub k: usize,
    /// Seconds between probe sweeps.
    pub probe_interval: f64,
    /// Probe timeout in seconds; derived from link latencies when unset.
    pub timeout: Option<f64>,
    /// Most candidates asked during negotiation.
    pub max_candidates: usize,
    /// Largest number of stale tasks handled by the exact joint search when
    /// greedy packing leaves tasks unplaced.
    pub exact_search_limit: usize,
}

impl Default for ContainmentConfig {
    fn default() -> Self {
        Self {
            k: 2,
            probe_interval: 1.0,
            timeout: None,
            max_candidates: 8,
            exact_search_limit: 10,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ContainmentError {
    #[error("agent on `{0}` is offline")]
    AgentOffline(NodeId),
    #[error("invalid containment parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Minimal heartbeat payload.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Heartbeat {
    pub cpu_load: f64,
    pub mem_load: f64,
    pub queue_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeResponse {
    Reply {
        state: NodeState,
        heartbeat: Heartbeat,
        /// Round-trip seconds.
        delay: f64,
    },
    Timeout,
}

impl ProbeResponse {
    pub fn is_timeout(&self) -> bool {
        matches!(self, Self::Timeout)
    }
}

/// Operation counters used to check cost envelopes.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContainmentCounters {
    pub sweeps: u64,
    pub probe_messages: u64,
    /// Sum over probing agents of their neighborhood size.
    pub neighborhood_total: u64,
    pub candidate_comparisons: u64,
    /// Nodes reached while collecting candidates.
    pub candidates_scanned: u64,
    pub exact_search_nodes: u64,
}

/// A monitoring agent bound to one home node.
#[derive(Debug, Clone, PartialEq)]
pub struct MonitoringAgent {
    pub id: String,
    pub home: NodeId,
    pub k: usize,
    pub probe_interval: f64,
    pub timeout: f64,
    /// Own k-hop neighborhood, home excluded.
    neighborhood: BTreeSet<NodeId>,
    /// Neighborhoods taken over from agents whose home went down.
    adopted: BTreeSet<NodeId>,
    pub view: BTreeMap<NodeId, (NodeState, Heartbeat)>,
}

impl MonitoringAgent {
    /// Creates the agent for `home`. Without an explicit timeout the agent
    /// waits three times the one-way latency to its farthest neighbor.
    pub fn new(
        graph: &SystemGraph,
        home: &NodeId,
        k: usize,
        probe_interval: f64,
        timeout: Option<f64>,
    ) -> Result<Self, ContainmentError> {
        if k == 0 {
            return Err(ContainmentError::InvalidParameter("k must be at least 1".into()));
        }
        if graph.node(home).is_none() {
            return Err(ModelError::NodeNotFound(home.clone()).into());
        }
        let neighborhood: BTreeSet<NodeId> = graph
            .hop_distances(home, k, |_| true, 0.0)
            .into_keys()
            .filter(|n| n != home)
            .collect();
        let timeout = match timeout {
            Some(t) if t > 0.0 => t,
            Some(t) => return Err(ContainmentError::InvalidParameter(format!("timeout {t} must be positive"))),
            None => {
                let farthest = neighborhood
                    .iter()
                    .filter_map(|n| graph.path_latency(home, n, 0.0))
                    .fold(0.0, f64::max);
                (3.0 * farthest).max(MIN_TIMEOUT)
            }
        };
        Ok(Self {
            id: format!("agent-{home}"),
            home: home.clone(),
            k,
            probe_interval,
            timeout,
            neighborhood,
            adopted: BTreeSet::new(),
            view: BTreeMap::new(),
        })
    }

    pub fn neighborhood(&self) -> &BTreeSet<NodeId> {
        &self.neighborhood
    }

    /// Everything this agent currently watches.
    pub fn watched(&self) -> BTreeSet<NodeId> {
        let mut all = self.neighborhood.clone();
        all.extend(self.adopted.iter().filter(|n| **n != self.home).cloned());
        all
    }
}

fn heartbeat(graph: &SystemGraph, node: &NodeId) -> Heartbeat {
    let (cpu_load, mem_load) = graph.load(node);
    Heartbeat {
        cpu_load,
        mem_load,
        queue_len: graph.node(node).map_or(0, |n| n.active_tasks.len()),
    }
}

/// Probes every watched node once.
///
/// Down nodes never answer. Live nodes answer after twice the one-way path
/// latency through live nodes; an answer slower than the timeout counts as
/// a timeout.
pub fn probe_neighborhood(
    agent: &mut MonitoringAgent,
    graph: &SystemGraph,
    counters: &mut ContainmentCounters,
) -> Result<BTreeMap<NodeId, ProbeResponse>, ContainmentError> {
    let home_state = graph.state(&agent.home)?;
    if home_state == NodeState::Down {
        return Err(ContainmentError::AgentOffline(agent.home.clone()));
    }
    let watched = agent.watched();
    counters.neighborhood_total += watched.len() as u64;
    let mut out = BTreeMap::new();
    for node in watched {
        counters.probe_messages += 1;
        let state = graph.state(&node)?;
        let response = if state == NodeState::Down {
            ProbeResponse::Timeout
        } else {
            match graph.path_latency(&agent.home, &node, graph.bandwidth_floor) {
                Some(lat) if 2.0 * lat <= agent.timeout + EPS => {
                    let hb = heartbeat(graph, &node);
                    agent.view.insert(node.clone(), (state, hb));
                    ProbeResponse::Reply {
                        state,
                        heartbeat: hb,
                        delay: 2.0 * lat,
                    }
                }
                _ => ProbeResponse::Timeout,
            }
        };
        if response.is_timeout() {
            agent.view.remove(&node);
        }
        out.insert(node, response);
    }
    Ok(out)
}

/// Flagged nodes with the time each was first flagged.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FailureSet {
    flagged: BTreeMap<NodeId, f64>,
}

impl FailureSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn contains(&self, node: &NodeId) -> bool {
        self.flagged.contains_key(node)
    }

    pub fn flag_time(&self, node: &NodeId) -> Option<f64> {
        self.flagged.get(node).copied()
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeId> {
        self.flagged.keys()
    }

    pub fn len(&self) -> usize {
        self.flagged.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flagged.is_empty()
    }

    /// Flags a node unless it is already flagged. Returns true when new.
    pub fn flag(&mut self, node: NodeId, time: f64) -> bool {
        if self.flagged.contains_key(&node) {
            return false;
        }
        self.flagged.insert(node, time);
        true
    }

    /// Drops a recovered node, returning its flag time.
    pub fn remove(&mut self, node: &NodeId) -> Option<f64> {
        self.flagged.remove(node)
    }
}

/// Merges probe results from one sweep into `set`. A node is flagged only
/// when every agent that probed it timed out. Returns the newly flagged
/// nodes.
pub fn build_failure_set<'a>(
    set: &mut FailureSet,
    sweep: impl IntoIterator<Item = &'a BTreeMap<NodeId, ProbeResponse>>,
    flag_time: f64,
) -> Vec<NodeId> {
    let mut heard: BTreeMap<&NodeId, bool> = BTreeMap::new();
    for results in sweep {
        for (node, resp) in results {
            let e = heard.entry(node).or_insert(false);
            *e |= !resp.is_timeout();
        }
    }
    heard
        .into_iter()
        .filter(|(_, any_reply)| !any_reply)
        .filter_map(|(node, _)| set.flag(node.clone(), flag_time).then(|| node.clone()))
        .collect()
}

/// Ordering key for candidates; comparisons are counted.
struct Ranked<'c> {
    hop: usize,
    id: NodeId,
    counter: &'c Cell<u64>,
}

impl PartialEq for Ranked<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Ranked<'_> {}
impl PartialOrd for Ranked<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Ranked<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.counter.set(self.counter.get() + 1);
        (self.hop, &self.id).cmp(&(other.hop, &other.id))
    }
}

/// Live nodes within `k` hops of `failed` (through live nodes and links at
/// or above the bandwidth floor), best `max` by (hop distance, id).
pub fn select_candidates(
    graph: &SystemGraph,
    failed: &NodeId,
    k: usize,
    max: usize,
    counters: &mut ContainmentCounters,
) -> Vec<NodeId> {
    let hops = graph.hop_distances(failed, k, |n| n.state != NodeState::Down, graph.bandwidth_floor);
    let comparisons = Cell::new(0);
    let mut heap = BinaryHeap::with_capacity(max + 1);
    for (id, hop) in hops {
        if &id == failed || graph.state(&id).map_or(true, |s| s == NodeState::Down) {
            continue;
        }
        counters.candidates_scanned += 1;
        heap.push(Ranked {
            hop,
            id,
            counter: &comparisons,
        });
        if heap.len() > max {
            heap.pop();
        }
    }
    let out: Vec<NodeId> = heap.into_sorted_vec().into_iter().map(|r| r.id).collect();
    counters.candidate_comparisons += comparisons.get();
    out
}

/// A candidate's answer during negotiation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegotiationReply {
    pub node: NodeId,
    /// Two-bit state code; only `0b11` (available) is a yes.
    pub code: u8,
    pub residual_cpu: f64,
    pub residual_mem: f64,
}

/// Temporary routing for the tasks of one failed node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlugStructure {
    pub failed: NodeId,
    /// Candidates asked, in order.
    pub replies: Vec<NegotiationReply>,
    /// Nodes forming the plug, in candidate order.
    pub accepted: Vec<NodeId>,
    pub reroute: BTreeMap<TaskId, NodeId>,
    /// Tasks the plug could not take.
    pub unplaced: Vec<TaskId>,
    pub created_at: f64,
}

impl PlugStructure {
    pub fn is_complete(&self) -> bool {
        self.unplaced.is_empty()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NegotiationError {
    /// The willing nodes cannot take every task; `plug` holds what fits.
    #[error("no capacity for {} task(s) of `{}`", .plug.unplaced.len(), .plug.failed)]
    NoCapacity { plug: PlugStructure },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone)]
struct Bin {
    node: NodeId,
    cpu: f64,
    mem: f64,
    admits_critical: bool,
}

impl Bin {
    fn fits(&self, t: &Task) -> bool {
        (!t.critical || self.admits_critical) && t.cpu_demand <= self.cpu + EPS && t.mem_demand <= self.mem + EPS
    }

    fn take(&mut self, t: &Task) {
        self.cpu -= t.cpu_demand;
        self.mem -= t.mem_demand;
    }
}

/// First-fit-decreasing on cpu demand (ties by id). Returns placements and
/// leftovers.
fn first_fit_decreasing(tasks: &[Task], bins: &[Bin]) -> (BTreeMap<TaskId, NodeId>, Vec<TaskId>) {
    let mut order: Vec<&Task> = tasks.iter().collect();
    order.sort_by(|a, b| b.cpu_demand.total_cmp(&a.cpu_demand).then_with(|| a.id.cmp(&b.id)));
    let mut bins = bins.to_vec();
    let mut placed = BTreeMap::new();
    let mut left = Vec::new();
    for t in order {
        match bins.iter_mut().find(|b| b.fits(t)) {
            Some(b) => {
                b.take(t);
                placed.insert(t.id.clone(), b.node.clone());
            }
            None => left.push(t.id.clone()),
        }
    }
    left.sort();
    (placed, left)
}

/// Asks each candidate for its state and residual resources and packs the
/// failed node's stale tasks onto the willing ones.
///
/// One willing node that fits everything is used alone. Otherwise the
/// shortest prefix of willing nodes whose combined residuals cover the
/// demand is packed first-fit-decreasing, growing the prefix until the
/// packing succeeds.
pub fn negotiate_plug(
    graph: &SystemGraph,
    failed: &NodeId,
    candidates: &[NodeId],
    tasks: &[Task],
    t: f64,
) -> Result<PlugStructure, NegotiationError> {
    let mut replies = Vec::with_capacity(candidates.len());
    let mut bins = Vec::new();
    for c in candidates {
        let node = graph.node(c).ok_or_else(|| ModelError::NodeNotFound(c.clone()))?;
        let (rc, rm) = graph.residual(c);
        let code = node.state.to_bits();
        replies.push(NegotiationReply {
            node: c.clone(),
            code,
            residual_cpu: rc,
            residual_mem: rm,
        });
        if code == NodeState::Available.to_bits() {
            bins.push(Bin {
                node: c.clone(),
                cpu: rc,
                mem: rm,
                admits_critical: node.vulnerability.admits_critical(),
            });
        }
    }
    let mut plug = PlugStructure {
        failed: failed.clone(),
        replies,
        accepted: Vec::new(),
        reroute: BTreeMap::new(),
        unplaced: Vec::new(),
        created_at: t,
    };
    if tasks.is_empty() {
        return Ok(plug);
    }
    let need_cpu: f64 = tasks.iter().map(|t| t.cpu_demand).sum();
    let need_mem: f64 = tasks.iter().map(|t| t.mem_demand).sum();
    let any_critical = tasks.iter().any(|t| t.critical);

    if let Some(b) = bins
        .iter()
        .find(|b| need_cpu <= b.cpu + EPS && need_mem <= b.mem + EPS && (!any_critical || b.admits_critical))
    {
        plug.accepted.push(b.node.clone());
        plug.reroute = tasks.iter().map(|t| (t.id.clone(), b.node.clone())).collect();
        return Ok(plug);
    }

    let (mut acc_cpu, mut acc_mem) = (0.0, 0.0);
    let mut start = bins.len();
    for (i, b) in bins.iter().enumerate() {
        acc_cpu += b.cpu.max(0.0);
        acc_mem += b.mem.max(0.0);
        if need_cpu <= acc_cpu + EPS && need_mem <= acc_mem + EPS {
            start = i + 1;
            break;
        }
    }
    for len in start..=bins.len() {
        let (placed, left) = first_fit_decreasing(tasks, &bins[..len]);
        if left.is_empty() {
            plug.accepted = used_in_order(&bins[..len], &placed);
            plug.reroute = placed;
            return Ok(plug);
        }
    }
    let (placed, left) = first_fit_decreasing(tasks, &bins);
    plug.accepted = used_in_order(&bins, &placed);
    plug.reroute = placed;
    plug.unplaced = left;
    Err(NegotiationError::NoCapacity { plug })
}

fn used_in_order(bins: &[Bin], placed: &BTreeMap<TaskId, NodeId>) -> Vec<NodeId> {
    let used: BTreeSet<&NodeId> = placed.values().collect();
    bins.iter().filter(|b| used.contains(&b.node)).map(|b| b.node.clone()).collect()
}

/// Outcome of applying a plug.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RedistributeReport {
    pub applied: Vec<(TaskId, NodeId)>,
    /// Rules refused because they would break a constraint.
    pub rejected: Vec<ConstraintBreach>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstraintBreach {
    pub task: TaskId,
    pub target: NodeId,
    pub reason: String,
}

/// Applies a plug: moves the stale tasks, clears the failed node and puts it
/// into recovery. Rules that would violate a constraint are skipped and
/// reported; the rest are applied.
pub fn redistribute(
    graph: &mut SystemGraph,
    alloc: &mut Allocation,
    plug: &PlugStructure,
    t: f64,
) -> Result<RedistributeReport, ContainmentError> {
    let failed = &plug.failed;
    graph.state(failed)?;
    alloc.time = t;
    let mut report = RedistributeReport::default();
    for (task_id, target) in &plug.reroute {
        let refuse = |reason: String| ConstraintBreach {
            task: task_id.clone(),
            target: target.clone(),
            reason,
        };
        if alloc.host(task_id) != Some(failed) {
            report.rejected.push(refuse(format!("task is not hosted on `{failed}`")));
            continue;
        }
        let Some(task) = graph.task(task_id).cloned() else {
            report.rejected.push(refuse("task is unknown".into()));
            continue;
        };
        match assign_task(graph, alloc, &task, target) {
            Ok(()) => report.applied.push((task_id.clone(), target.clone())),
            Err(e) => report.rejected.push(refuse(e.to_string())),
        }
    }
    graph.clear_tasks(failed);
    if graph.state(failed)? == NodeState::Down {
        transition_state(graph, failed, NodeState::Recovering, t)
            .map_err(|e| ContainmentError::InvalidParameter(e.to_string()))?;
    }
    Ok(report)
}

/// Stale tasks hosted on `node`, in id order.
pub fn stale_tasks(graph: &SystemGraph, alloc: &Allocation, node: &NodeId) -> Vec<Task> {
    alloc
        .tasks_on(node)
        .into_iter()
        .filter(|t| alloc.is_stale(t))
        .filter_map(|t| graph.task(&t).cloned())
        .collect()
}

/// Result of healing one failed node.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContainmentOutcome {
    pub failed: NodeId,
    pub candidates: Vec<NodeId>,
    pub plug: PlugStructure,
    pub report: RedistributeReport,
    /// Plan came from the exact joint search rather than greedy packing.
    pub exact: bool,
}

/// One agent per node plus the shared failure set.
#[derive(Debug, Clone)]
pub struct ContainmentLayer {
    pub config: ContainmentConfig,
    agents: BTreeMap<NodeId, MonitoringAgent>,
    pub failures: FailureSet,
    pub counters: ContainmentCounters,
}

impl ContainmentLayer {
    pub fn new(graph: &SystemGraph, config: ContainmentConfig) -> Result<Self, ContainmentError> {
        if !(config.probe_interval > 0.0) {
            return Err(ContainmentError::InvalidParameter("probe_interval must be positive".into()));
        }
        if config.max_candidates == 0 {
            return Err(ContainmentError::InvalidParameter("max_candidates must be at least 1".into()));
        }
        let agents = graph
            .node_ids()
            .map(|id| {
                MonitoringAgent::new(graph, id, config.k, config.probe_interval, config.timeout).map(|a| (id.clone(), a))
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            config,
            agents,
            failures: FailureSet::new(),
            counters: ContainmentCounters::default(),
        })
    }

    pub fn agent(&self, home: &NodeId) -> Option<&MonitoringAgent> {
        self.agents.get(home)
    }

    /// Largest timeout among agents; bounds detection latency.
    pub fn max_timeout(&self) -> f64 {
        self.agents.values().map(|a| a.timeout).fold(MIN_TIMEOUT, f64::max)
    }

    /// Hands the neighborhood of every offline agent to its smallest live
    /// neighbor.
    fn adopt_orphans(&mut self, graph: &SystemGraph) {
        let offline: Vec<NodeId> = self
            .agents
            .keys()
            .filter(|h| graph.state(h).is_ok_and(|s| s == NodeState::Down))
            .cloned()
            .collect();
        for home in offline {
            let adopter = graph
                .neighbors(&home)
                .map(|(n, _)| n)
                .filter(|n| graph.state(n).is_ok_and(|s| s != NodeState::Down))
                .min()
                .cloned();
            if let Some(adopter) = adopter {
                let orphaned = self.agents[&home].neighborhood.clone();
                let agent = self.agents.get_mut(&adopter).expect("every node has an agent");
                agent.adopted.extend(orphaned);
            }
        }
    }

    /// Runs one probe sweep and flags unresponsive nodes at `flag_time`.
    /// Returns the newly flagged nodes.
    ///
    /// A node is flagged when no prober heard from it and its own agent is
    /// offline.
    pub fn sweep(&mut self, graph: &SystemGraph, flag_time: f64) -> Vec<NodeId> {
        self.adopt_orphans(graph);
        self.counters.sweeps += 1;
        let mut results = Vec::new();
        for agent in self.agents.values_mut() {
            match probe_neighborhood(agent, graph, &mut self.counters) {
                Ok(mut r) => {
                    // A live agent vouches for its own home, so an isolated
                    // but healthy node is not treated as failed.
                    let state = graph.state(&agent.home).expect("agent homes exist");
                    r.insert(
                        agent.home.clone(),
                        ProbeResponse::Reply {
                            state,
                            heartbeat: heartbeat(graph, &agent.home),
                            delay: 0.0,
                        },
                    );
                    results.push(r)
                }
                Err(ContainmentError::AgentOffline(_)) => {}
                Err(e) => log::warn!("probe from `{}` failed: {e}", agent.home),
            }
        }
        build_failure_set(&mut self.failures, &results, flag_time)
    }

    /// Contains every node in `failed`: plans plugs on a scratch copy so
    /// successive plugs see each other's load, falls back to an exact joint
    /// search when greedy packing strands tasks, then applies the plans.
    pub fn contain(
        &mut self,
        graph: &mut SystemGraph,
        alloc: &mut Allocation,
        failed: &[NodeId],
        t: f64,
    ) -> Result<Vec<ContainmentOutcome>, ContainmentError> {
        let mut scratch_g = graph.clone();
        let mut scratch_a = alloc.clone();
        let mut plans = Vec::new();
        for node in failed {
            let candidates = select_candidates(
                &scratch_g,
                node,
                self.config.k,
                self.config.max_candidates,
                &mut self.counters,
            );
            let tasks = stale_tasks(&scratch_g, &scratch_a, node);
            let plug = match negotiate_plug(&scratch_g, node, &candidates, &tasks, t) {
                Ok(p) => p,
                Err(NegotiationError::NoCapacity { plug }) => plug,
                Err(NegotiationError::Model(e)) => return Err(e.into()),
            };
            for (task, target) in &plug.reroute {
                let task = scratch_g.task(task).cloned().expect("stale tasks are catalogued");
                assign_task(&mut scratch_g, &mut scratch_a, &task, target)?;
            }
            plans.push((node.clone(), candidates, plug, tasks));
        }

        let stranded: usize = plans.iter().map(|p| p.2.unplaced.len()).sum();
        let total: usize = plans.iter().map(|p| p.3.len()).sum();
        let mut exact = false;
        if stranded > 0 && total <= self.config.exact_search_limit {
            let problem: Vec<(&NodeId, &[NodeId], &[Task])> =
                plans.iter().map(|(n, c, _, ts)| (n, c.as_slice(), ts.as_slice())).collect();
            if let Some(best) = exact_joint_plan(graph, &problem, &mut self.counters) {
                if best.len() > total - stranded {
                    exact = true;
                    for (node, _, plug, tasks) in plans.iter_mut() {
                        plug.reroute = tasks
                            .iter()
                            .filter_map(|t| best.get(&t.id).map(|n| (t.id.clone(), n.clone())))
                            .collect();
                        plug.unplaced = tasks
                            .iter()
                            .filter(|t| !plug.reroute.contains_key(&t.id))
                            .map(|t| t.id.clone())
                            .collect();
                        let used: BTreeSet<&NodeId> = plug.reroute.values().collect();
                        plug.accepted = plug
                            .replies
                            .iter()
                            .map(|r| &r.node)
                            .filter(|n| used.contains(n))
                            .cloned()
                            .collect();
                        debug_assert_eq!(&plug.failed, node);
                    }
                }
            }
        }

        let mut out = Vec::with_capacity(plans.len());
        for (node, candidates, plug, _) in plans {
            let report = redistribute(graph, alloc, &plug, t)?;
            out.push(ContainmentOutcome {
                failed: node,
                candidates,
                plug,
                report,
                exact,
            });
        }
        Ok(out)
    }
}

/// Containment alone as a healing policy: one probe sweep per event time,
/// then every newly flagged node is contained. Nothing is diagnosed.
#[derive(Debug, Clone)]
pub struct ContainmentPolicy {
    pristine: ContainmentLayer,
    pub layer: ContainmentLayer,
}

impl ContainmentPolicy {
    pub fn new(graph: &SystemGraph, config: ContainmentConfig) -> Result<Self, ContainmentError> {
        let layer = ContainmentLayer::new(graph, config)?;
        Ok(Self {
            pristine: layer.clone(),
            layer,
        })
    }
}

impl HealingPolicy for ContainmentPolicy {
    fn begin_scenario(&mut self, _: &FailureScenario, _: u64) {
        self.layer = self.pristine.clone();
    }

    fn heal(
        &mut self,
        graph: &mut SystemGraph,
        alloc: &mut Allocation,
        _: &FailureScenario,
        _: &BTreeSet<NodeId>,
        t: f64,
    ) -> Result<(), HealError> {
        let flagged = self.layer.sweep(graph, t);
        if flagged.is_empty() {
            return Ok(());
        }
        self.layer
            .contain(graph, alloc, &flagged, t)
            .map(|_| ())
            .map_err(|e| HealError(e.to_string()))
    }
}

/// Maximizes the number of stale tasks placed across all failed nodes at
/// once. Each task may go to any willing candidate of its own failed node.
/// Returns the best assignment found, preferring earlier candidates.
fn exact_joint_plan(
    graph: &SystemGraph,
    problem: &[(&NodeId, &[NodeId], &[Task])],
    counters: &mut ContainmentCounters,
) -> Option<BTreeMap<TaskId, NodeId>> {
    let mut residual: BTreeMap<NodeId, (f64, f64)> = BTreeMap::new();
    let mut items: Vec<(&Task, Vec<NodeId>)> = Vec::new();
    for (_, candidates, tasks) in problem {
        for task in tasks.iter() {
            let eligible: Vec<NodeId> = candidates
                .iter()
                .filter(|c| {
                    graph.node(c).is_some_and(|n| {
                        n.state == NodeState::Available && (!task.critical || n.vulnerability.admits_critical())
                    })
                })
                .cloned()
                .collect();
            for c in &eligible {
                residual.entry(c.clone()).or_insert_with(|| graph.residual(c));
            }
            items.push((task, eligible));
        }
    }

    struct Search<'a> {
        items: &'a [(&'a Task, Vec<NodeId>)],
        residual: BTreeMap<NodeId, (f64, f64)>,
        current: Vec<Option<NodeId>>,
        best: Vec<Option<NodeId>>,
        best_count: usize,
        visited: u64,
    }

    impl Search<'_> {
        fn go(&mut self, i: usize, placed: usize) {
            self.visited += 1;
            if placed + (self.items.len() - i) <= self.best_count && i > 0 {
                return;
            }
            if i == self.items.len() {
                if placed > self.best_count || self.best_count == 0 {
                    self.best_count = placed;
                    self.best = self.current.clone();
                }
                return;
            }
            let (task, eligible) = &self.items[i];
            for target in eligible {
                let (rc, rm) = self.residual[target];
                if task.cpu_demand <= rc + EPS && task.mem_demand <= rm + EPS {
                    self.residual.insert(target.clone(), (rc - task.cpu_demand, rm - task.mem_demand));
                    self.current[i] = Some(target.clone());
                    self.go(i + 1, placed + 1);
                    self.current[i] = None;
                    self.residual.insert(target.clone(), (rc, rm));
                    if self.best_count == self.items.len() {
                        return;
                    }
                }
            }
            self.go(i + 1, placed);
        }
    }

    let n = items.len();
    let mut s = Search {
        items: &items,
        residual,
        current: vec![None; n],
        best: vec![None; n],
        best_count: 0,
        visited: 0,
    };
    s.go(0, 0);
    counters.exact_search_nodes += s.visited;
    let plan: BTreeMap<TaskId, NodeId> = items
        .iter()
        .zip(s.best)
        .filter_map(|((t, _), target)| target.map(|n| (t.id.clone(), n)))
        .collect();
    Some(plan)
}
