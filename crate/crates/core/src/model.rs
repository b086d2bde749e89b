//! Continuum system model.
//!
//! A continuum is a graph of heterogeneous nodes joined by links. Tasks are
//! mapped onto nodes by an [`Allocation`]; everything the healing layers do is
//! ultimately a mutation of that allocation and of node states. This module
//! owns the feasibility rules (capacity, memory, state, vulnerability,
//! bandwidth floor, mapping completeness) and the latency and utilization
//! scores used to judge an allocation.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod resilience;
pub mod topology;

pub use resilience::{compute_resilience, HealError, HealingPolicy, NoopPolicy, Resilience, ScenarioOutcome};
pub use topology::{load_topology, save_topology, Topology};

/// Numerical slack for capacity comparisons.
pub const EPS: f64 = 1e-9;

/// Default weight of compute utilization against memory utilization.
pub const DEFAULT_ALPHA: f64 = 0.5;
/// Default minimum link bandwidth (throughput units).
pub const DEFAULT_BANDWIDTH_FLOOR: f64 = 1.0;

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_string())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(s)
            }
        }
    };
}

string_id!(
    /// Identifier of a continuum node.
    NodeId
);
string_id!(
    /// Identifier of a task.
    TaskId
);

/// Operational state of a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeState {
    Down,
    Available,
    Busy,
    Recovering,
}

impl NodeState {
    pub const ALL: [NodeState; 4] = [Self::Down, Self::Available, Self::Busy, Self::Recovering];

    /// Two-bit wire code: `00` down, `11` available, `01` busy, `10` recovering.
    pub fn to_bits(self) -> u8 {
        match self {
            Self::Down => 0b00,
            Self::Available => 0b11,
            Self::Busy => 0b01,
            Self::Recovering => 0b10,
        }
    }

    pub fn from_bits(bits: u8) -> Option<Self> {
        match bits {
            0b00 => Some(Self::Down),
            0b11 => Some(Self::Available),
            0b01 => Some(Self::Busy),
            0b10 => Some(Self::Recovering),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Down => "down",
            Self::Available => "available",
            Self::Busy => "busy",
            Self::Recovering => "recovering",
        }
    }

    /// Whether a node in this state can keep hosting tasks.
    pub fn is_serving(self) -> bool {
        matches!(self, Self::Available | Self::Busy)
    }
}

impl fmt::Display for NodeState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NodeState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| format!("unknown node state `{s}`"))
    }
}

/// Vulnerability level of a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Vulnerability {
    Low,
    Medium,
    High,
    Critical,
}

impl Vulnerability {
    pub const ALL: [Vulnerability; 4] = [Self::Low, Self::Medium, Self::High, Self::Critical];

    /// Two-bit wire code: `00` low, `11` medium, `01` high, `10` critical.
    pub fn to_bits(self) -> u8 {
        match self {
            Self::Low => 0b00,
            Self::Medium => 0b11,
            Self::High => 0b01,
            Self::Critical => 0b10,
        }
    }

    pub fn from_bits(bits: u8) -> Option<Self> {
        match bits {
            0b00 => Some(Self::Low),
            0b11 => Some(Self::Medium),
            0b01 => Some(Self::High),
            0b10 => Some(Self::Critical),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Low => "low",
            Self::Medium => "medium",
            Self::High => "high",
            Self::Critical => "critical",
        }
    }

    /// Critical tasks may only run on low or medium vulnerability nodes.
    pub fn admits_critical(self) -> bool {
        matches!(self, Self::Low | Self::Medium)
    }
}

impl fmt::Display for Vulnerability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Vulnerability {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| format!("unknown vulnerability `{s}`"))
    }
}

/// A compute node of the continuum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    /// Compute units.
    pub capacity: f64,
    /// Storage units.
    pub memory: f64,
    pub state: NodeState,
    pub vulnerability: Vulnerability,
    pub active_tasks: BTreeSet<TaskId>,
}

impl Node {
    pub fn new(id: impl Into<NodeId>, capacity: f64, memory: f64) -> Self {
        Self {
            id: id.into(),
            capacity,
            memory,
            state: NodeState::Available,
            vulnerability: Vulnerability::Low,
            active_tasks: BTreeSet::new(),
        }
    }

    pub fn with_state(mut self, state: NodeState) -> Self {
        self.state = state;
        self
    }

    pub fn with_vulnerability(mut self, vulnerability: Vulnerability) -> Self {
        self.vulnerability = vulnerability;
        self
    }
}

/// A unit of work.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: TaskId,
    pub cpu_demand: f64,
    pub mem_demand: f64,
    /// Simulated seconds on an unloaded node.
    pub compute_time: f64,
    pub critical: bool,
}

impl Task {
    pub fn new(id: impl Into<TaskId>, cpu_demand: f64, mem_demand: f64) -> Self {
        Self {
            id: id.into(),
            cpu_demand,
            mem_demand,
            compute_time: 1.0,
            critical: false,
        }
    }

    pub fn with_compute_time(mut self, compute_time: f64) -> Self {
        self.compute_time = compute_time;
        self
    }

    pub fn critical(mut self) -> Self {
        self.critical = true;
        self
    }

    fn validate(&self) -> Result<(), ModelError> {
        if !(self.cpu_demand > 0.0) || !(self.mem_demand >= 0.0) || !(self.compute_time >= 0.0) {
            return Err(ModelError::InvalidTask(self.id.clone()));
        }
        Ok(())
    }
}

/// An undirected communication link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub src: NodeId,
    pub dst: NodeId,
    pub bandwidth: f64,
    /// Simulated seconds per traversal.
    pub latency: f64,
}

impl Link {
    pub fn new(src: impl Into<NodeId>, dst: impl Into<NodeId>, bandwidth: f64, latency: f64) -> Self {
        Self {
            src: src.into(),
            dst: dst.into(),
            bandwidth,
            latency,
        }
    }

    /// The opposite endpoint, if `node` is one of the two.
    pub fn other(&self, node: &NodeId) -> Option<&NodeId> {
        if &self.src == node {
            Some(&self.dst)
        } else if &self.dst == node {
            Some(&self.src)
        } else {
            None
        }
    }
}

/// One recorded node state change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateTransition {
    pub time: f64,
    pub node: NodeId,
    pub from: NodeState,
    pub to: NodeState,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("node `{0}` not found")]
    NodeNotFound(NodeId),
    #[error("node `{node}` is {state}, not available")]
    NodeUnavailable { node: NodeId, state: NodeState },
    #[error("task `{task}` does not fit on node `{node}`")]
    CapacityExceeded { node: NodeId, task: TaskId },
    #[error("critical task `{task}` cannot run on {vulnerability} vulnerability node `{node}`")]
    CriticalityViolation {
        node: NodeId,
        task: TaskId,
        vulnerability: Vulnerability,
    },
    #[error("no path from `{from}` to `{to}` above the bandwidth floor for task `{task}`")]
    Unreachable { task: TaskId, from: NodeId, to: NodeId },
    #[error("task `{0}` is not mapped")]
    Unmapped(TaskId),
    #[error("total capacity is zero")]
    ZeroCapacity,
    #[error("duplicate node `{0}`")]
    DuplicateNode(NodeId),
    #[error("invalid link {0}")]
    InvalidLink(String),
    #[error("invalid task `{0}`")]
    InvalidTask(TaskId),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("graph is not connected")]
    Disconnected,
    #[error("topology line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// The continuum graph together with the catalog of known tasks and the
/// node-state audit trail.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemGraph {
    nodes: BTreeMap<NodeId, Node>,
    links: Vec<Link>,
    tasks: BTreeMap<TaskId, Task>,
    audit: Vec<StateTransition>,
    /// Minimum usable link bandwidth.
    pub bandwidth_floor: f64,
    /// Let busy nodes accept tasks when they still have residual capacity.
    pub busy_accepts: bool,
}

impl Default for SystemGraph {
    fn default() -> Self {
        Self::new(DEFAULT_BANDWIDTH_FLOOR)
    }
}

impl SystemGraph {
    pub fn new(bandwidth_floor: f64) -> Self {
        Self {
            nodes: BTreeMap::new(),
            links: Vec::new(),
            tasks: BTreeMap::new(),
            audit: Vec::new(),
            bandwidth_floor,
            busy_accepts: false,
        }
    }

    pub fn add_node(&mut self, node: Node) -> Result<(), ModelError> {
        if node.id.as_str().is_empty() || node.id.as_str().contains(char::is_whitespace) {
            return Err(ModelError::InvalidParameter(format!("bad node id `{}`", node.id)));
        }
        if !(node.capacity >= 0.0) || !(node.memory >= 0.0) {
            return Err(ModelError::InvalidParameter(format!("negative resources on `{}`", node.id)));
        }
        if self.nodes.contains_key(&node.id) {
            return Err(ModelError::DuplicateNode(node.id));
        }
        self.nodes.insert(node.id.clone(), node);
        Ok(())
    }

    pub fn add_link(&mut self, link: Link) -> Result<(), ModelError> {
        if link.src == link.dst {
            return Err(ModelError::InvalidLink(format!("self-loop on `{}`", link.src)));
        }
        for end in [&link.src, &link.dst] {
            if !self.nodes.contains_key(end) {
                return Err(ModelError::NodeNotFound(end.clone()));
            }
        }
        if !(link.bandwidth >= 0.0) || !(link.latency >= 0.0) {
            return Err(ModelError::InvalidLink(format!("{}-{} has negative attributes", link.src, link.dst)));
        }
        self.links.push(link);
        Ok(())
    }

    /// Adds a task to the catalog without placing it.
    pub fn register_task(&mut self, task: Task) -> Result<(), ModelError> {
        task.validate()?;
        self.tasks.insert(task.id.clone(), task);
        Ok(())
    }

    pub fn node(&self, id: &NodeId) -> Option<&Node> {
        self.nodes.get(id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.values()
    }

    pub fn node_ids(&self) -> impl Iterator<Item = &NodeId> {
        self.nodes.keys()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn task(&self, id: &TaskId) -> Option<&Task> {
        self.tasks.get(id)
    }

    pub fn tasks(&self) -> impl Iterator<Item = &Task> {
        self.tasks.values()
    }

    pub fn audit_trail(&self) -> &[StateTransition] {
        &self.audit
    }

    pub fn state(&self, id: &NodeId) -> Result<NodeState, ModelError> {
        self.nodes
            .get(id)
            .map(|n| n.state)
            .ok_or_else(|| ModelError::NodeNotFound(id.clone()))
    }

    /// Sets a node state and appends the change to the audit trail. No
    /// legality check: callers enforce their own transition rules.
    pub(crate) fn set_state(&mut self, id: &NodeId, to: NodeState, time: f64) -> Result<NodeState, ModelError> {
        let node = self
            .nodes
            .get_mut(id)
            .ok_or_else(|| ModelError::NodeNotFound(id.clone()))?;
        let from = node.state;
        if from != to {
            node.state = to;
            self.audit.push(StateTransition {
                time,
                node: id.clone(),
                from,
                to,
            });
        }
        Ok(from)
    }

    /// Links incident to `id`, paired with the far endpoint.
    pub fn neighbors<'a>(&'a self, id: &'a NodeId) -> impl Iterator<Item = (&'a NodeId, &'a Link)> + 'a {
        self.links.iter().filter_map(move |l| l.other(id).map(|o| (o, l)))
    }

    /// Sum of cpu and memory demands of the node's active tasks.
    pub fn load(&self, id: &NodeId) -> (f64, f64) {
        let Some(node) = self.nodes.get(id) else {
            return (0.0, 0.0);
        };
        node.active_tasks
            .iter()
            .filter_map(|t| self.tasks.get(t))
            .fold((0.0, 0.0), |(c, m), t| (c + t.cpu_demand, m + t.mem_demand))
    }

    /// Remaining (cpu, memory) on the node.
    pub fn residual(&self, id: &NodeId) -> (f64, f64) {
        let Some(node) = self.nodes.get(id) else {
            return (0.0, 0.0);
        };
        let (c, m) = self.load(id);
        (node.capacity - c, node.memory - m)
    }

    /// Whether `task` could be placed on `node` right now.
    pub fn admits(&self, node_id: &NodeId, task: &Task) -> Result<(), ModelError> {
        let node = self
            .nodes
            .get(node_id)
            .ok_or_else(|| ModelError::NodeNotFound(node_id.clone()))?;
        let accepting = node.state == NodeState::Available || (self.busy_accepts && node.state == NodeState::Busy);
        if !accepting {
            return Err(ModelError::NodeUnavailable {
                node: node_id.clone(),
                state: node.state,
            });
        }
        if task.critical && !node.vulnerability.admits_critical() {
            return Err(ModelError::CriticalityViolation {
                node: node_id.clone(),
                task: task.id.clone(),
                vulnerability: node.vulnerability,
            });
        }
        let (rc, rm) = self.residual(node_id);
        let already_here = node.active_tasks.contains(&task.id);
        if !already_here && (task.cpu_demand > rc + EPS || task.mem_demand > rm + EPS) {
            return Err(ModelError::CapacityExceeded {
                node: node_id.clone(),
                task: task.id.clone(),
            });
        }
        Ok(())
    }

    /// Places a task without any admission check. Used by loaders and by
    /// callers that already validated the move.
    pub(crate) fn place(&mut self, alloc: &mut Allocation, task: &Task, node_id: &NodeId) {
        if let Some(prev) = alloc.mapping.get(&task.id).cloned() {
            if let Some(n) = self.nodes.get_mut(&prev) {
                n.active_tasks.remove(&task.id);
            }
        }
        self.tasks.insert(task.id.clone(), task.clone());
        if let Some(n) = self.nodes.get_mut(node_id) {
            n.active_tasks.insert(task.id.clone());
        }
        alloc.mapping.insert(task.id.clone(), node_id.clone());
        alloc.stale.remove(&task.id);
    }

    /// Recomputes Available/Busy from residual cpu. Other states are left alone.
    pub(crate) fn refresh_load_state(&mut self, id: &NodeId, time: f64) {
        let Some(state) = self.nodes.get(id).map(|n| n.state) else {
            return;
        };
        if !state.is_serving() {
            return;
        }
        let (rc, _) = self.residual(id);
        let next = if rc <= EPS { NodeState::Busy } else { NodeState::Available };
        let _ = self.set_state(id, next, time);
    }

    /// Removes a task from whatever node hosts it and drops it from the
    /// allocation.
    pub fn unassign_task(&mut self, alloc: &mut Allocation, task: &TaskId) {
        if let Some(host) = alloc.mapping.remove(task) {
            if let Some(n) = self.nodes.get_mut(&host) {
                n.active_tasks.remove(task);
            }
            self.refresh_load_state(&host, alloc.time);
        }
        alloc.stale.remove(task);
    }

    /// Clears a node's active task set, leaving the allocation entries (now
    /// stale) in place.
    pub(crate) fn clear_tasks(&mut self, id: &NodeId) -> Vec<TaskId> {
        match self.nodes.get_mut(id) {
            Some(n) => std::mem::take(&mut n.active_tasks).into_iter().collect(),
            None => Vec::new(),
        }
    }

    /// True when every node is reachable from every other over the links.
    pub fn is_connected(&self) -> bool {
        let Some(start) = self.nodes.keys().next() else {
            return true;
        };
        self.hop_distances(start, usize::MAX, |_| true, 0.0).len() == self.nodes.len()
    }

    /// Breadth-first hop distances from `from`, up to `max_hops`. Links below
    /// `min_bandwidth` are ignored and search only expands through nodes for
    /// which `through` holds (the start node always expands).
    pub fn hop_distances(
        &self,
        from: &NodeId,
        max_hops: usize,
        through: impl Fn(&Node) -> bool,
        min_bandwidth: f64,
    ) -> BTreeMap<NodeId, usize> {
        let mut dist = BTreeMap::new();
        if !self.nodes.contains_key(from) {
            return dist;
        }
        dist.insert(from.clone(), 0);
        let mut queue = VecDeque::from([from.clone()]);
        while let Some(cur) = queue.pop_front() {
            let d = dist[&cur];
            if d >= max_hops {
                continue;
            }
            if &cur != from && !self.nodes.get(&cur).is_some_and(&through) {
                continue;
            }
            // Sorted expansion keeps the traversal independent of link order.
            let mut next: Vec<&NodeId> = self
                .neighbors(&cur)
                .filter(|(_, l)| l.bandwidth + EPS >= min_bandwidth)
                .map(|(n, _)| n)
                .collect();
            next.sort();
            for n in next {
                if !dist.contains_key(n) {
                    dist.insert(n.clone(), d + 1);
                    queue.push_back(n.clone());
                }
            }
        }
        dist
    }

    /// Minimum total link latency from `from` to `to` over links with
    /// bandwidth at least `min_bandwidth`. Intermediate nodes that are down
    /// do not forward traffic; the endpoints may be in any state.
    pub fn path_latency(&self, from: &NodeId, to: &NodeId, min_bandwidth: f64) -> Option<f64> {
        if !self.nodes.contains_key(from) || !self.nodes.contains_key(to) {
            return None;
        }
        if from == to {
            return Some(0.0);
        }
        let mut best: BTreeMap<&NodeId, f64> = BTreeMap::new();
        let mut heap = BinaryHeap::new();
        best.insert(from, 0.0);
        heap.push(Frontier(0.0, from));
        while let Some(Frontier(d, cur)) = heap.pop() {
            if cur == to {
                return Some(d);
            }
            if best.get(cur).is_some_and(|&b| d > b) {
                continue;
            }
            if cur != from && self.nodes[cur].state == NodeState::Down {
                continue;
            }
            for (n, link) in self.neighbors(cur) {
                if link.bandwidth + EPS < min_bandwidth {
                    continue;
                }
                let nd = d + link.latency;
                if best.get(n).is_none_or(|&b| nd < b) {
                    best.insert(n, nd);
                    heap.push(Frontier(nd, n));
                }
            }
        }
        None
    }
}

/// Min-heap entry for Dijkstra; ties broken by node id for determinism.
struct Frontier<'a>(f64, &'a NodeId);

impl PartialEq for Frontier<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Frontier<'_> {}
impl PartialOrd for Frontier<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Frontier<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(self.1))
    }
}

/// Time-indexed task → node mapping.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Allocation {
    pub time: f64,
    mapping: BTreeMap<TaskId, NodeId>,
    /// Tasks whose host failed and that containment has not moved yet.
    stale: BTreeSet<TaskId>,
}

impl Allocation {
    pub fn new(time: f64) -> Self {
        Self {
            time,
            ..Self::default()
        }
    }

    pub fn host(&self, task: &TaskId) -> Option<&NodeId> {
        self.mapping.get(task)
    }

    pub fn mapping(&self) -> &BTreeMap<TaskId, NodeId> {
        &self.mapping
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    pub fn is_stale(&self, task: &TaskId) -> bool {
        self.stale.contains(task)
    }

    pub fn stale(&self) -> &BTreeSet<TaskId> {
        &self.stale
    }

    pub(crate) fn mark_stale(&mut self, task: TaskId) {
        if self.mapping.contains_key(&task) {
            self.stale.insert(task);
        }
    }

    /// Tasks currently mapped to `node`, in id order.
    pub fn tasks_on(&self, node: &NodeId) -> Vec<TaskId> {
        self.mapping
            .iter()
            .filter(|(_, n)| *n == node)
            .map(|(t, _)| t.clone())
            .collect()
    }
}

/// Assigns `task` to `node_id`, enforcing state, vulnerability, capacity and
/// memory rules. A node whose residual cpu reaches zero turns busy.
pub fn assign_task(
    graph: &mut SystemGraph,
    alloc: &mut Allocation,
    task: &Task,
    node_id: &NodeId,
) -> Result<(), ModelError> {
    task.validate()?;
    graph.admits(node_id, task)?;
    let previous = alloc.host(&task.id).cloned();
    graph.place(alloc, task, node_id);
    if let Some(prev) = previous.filter(|p| p != node_id) {
        graph.refresh_load_state(&prev, alloc.time);
    }
    graph.refresh_load_state(node_id, alloc.time);
    Ok(())
}

/// Mean end-to-end task latency of an allocation.
///
/// Each task pays the shortest link-latency path from its source to its host
/// (links under the bandwidth floor are unusable) plus its compute time
/// stretched by `1 + background_cpu / capacity`, where the background is the
/// host's load from tasks outside `tasks`.
pub fn compute_latency(
    graph: &SystemGraph,
    alloc: &Allocation,
    tasks: &[Task],
    sources: &BTreeMap<TaskId, NodeId>,
) -> Result<f64, ModelError> {
    if tasks.is_empty() {
        return Ok(0.0);
    }
    let evaluated: BTreeSet<&TaskId> = tasks.iter().map(|t| &t.id).collect();
    let mut total = 0.0;
    for task in tasks {
        let host = alloc.host(&task.id).ok_or_else(|| ModelError::Unmapped(task.id.clone()))?;
        let node = graph.node(host).ok_or_else(|| ModelError::NodeNotFound(host.clone()))?;
        let source = sources.get(&task.id).unwrap_or(host);
        if graph.node(source).is_none() {
            return Err(ModelError::NodeNotFound(source.clone()));
        }
        let net = graph
            .path_latency(source, host, graph.bandwidth_floor)
            .ok_or_else(|| ModelError::Unreachable {
                task: task.id.clone(),
                from: source.clone(),
                to: host.clone(),
            })?;
        let background: f64 = node
            .active_tasks
            .iter()
            .filter(|t| !evaluated.contains(t))
            .filter_map(|t| graph.task(t))
            .map(|t| t.cpu_demand)
            .sum();
        let factor = if node.capacity > 0.0 {
            1.0 + background / node.capacity
        } else {
            1.0
        };
        total += net + task.compute_time * factor;
    }
    Ok(total / tasks.len() as f64)
}

/// Weighted cpu/memory utilization of the whole continuum, in `[0, 1]` for
/// feasible graphs.
pub fn compute_utilization(graph: &SystemGraph, alpha: f64) -> Result<f64, ModelError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(ModelError::InvalidParameter(format!("alpha {alpha} outside (0, 1]")));
    }
    let (mut cap, mut mem, mut cpu_load, mut mem_load) = (0.0, 0.0, 0.0, 0.0);
    for node in graph.nodes() {
        cap += node.capacity;
        mem += node.memory;
        let (c, m) = graph.load(&node.id);
        cpu_load += c;
        mem_load += m;
    }
    if cap <= 0.0 || mem <= 0.0 {
        return Err(ModelError::ZeroCapacity);
    }
    Ok(alpha * (cpu_load / cap) + (1.0 - alpha) * (mem_load / mem))
}

/// Which feasibility rule a [`Violation`] breaches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ViolationKind {
    CapCpu,
    CapMem,
    StateNotAvailable,
    VulnCritical,
    BandwidthFloor,
    UnmappedTask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub node: Option<NodeId>,
    pub task: Option<TaskId>,
}

/// Lists every breached feasibility rule for `tasks` under `alloc`.
///
/// Loads are taken from the allocation itself, not the node task sets, so an
/// allocation can be checked before it is applied. Hosts may be available or
/// busy. The bandwidth rule only applies to tasks with an entry in `sources`:
/// it is breached when no path from source to host stays above the floor.
pub fn check_constraints(
    graph: &SystemGraph,
    alloc: &Allocation,
    tasks: &[Task],
    sources: &BTreeMap<TaskId, NodeId>,
) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut loads: BTreeMap<&NodeId, (f64, f64)> = BTreeMap::new();
    for task in tasks {
        if let Some(host) = alloc.host(&task.id) {
            let e = loads.entry(host).or_default();
            e.0 += task.cpu_demand;
            e.1 += task.mem_demand;
        }
    }
    for (node_id, (c, m)) in &loads {
        let Some(node) = graph.node(node_id) else { continue };
        if *c > node.capacity + EPS {
            out.push(Violation {
                kind: ViolationKind::CapCpu,
                node: Some((*node_id).clone()),
                task: None,
            });
        }
        if *m > node.memory + EPS {
            out.push(Violation {
                kind: ViolationKind::CapMem,
                node: Some((*node_id).clone()),
                task: None,
            });
        }
    }
    for task in tasks {
        let violation = |kind, node: Option<&NodeId>| Violation {
            kind,
            node: node.cloned(),
            task: Some(task.id.clone()),
        };
        let Some(host) = alloc.host(&task.id) else {
            out.push(violation(ViolationKind::UnmappedTask, None));
            continue;
        };
        let Some(node) = graph.node(host) else {
            out.push(violation(ViolationKind::UnmappedTask, Some(host)));
            continue;
        };
        if !node.state.is_serving() {
            out.push(violation(ViolationKind::StateNotAvailable, Some(host)));
        }
        if task.critical && !node.vulnerability.admits_critical() {
            out.push(violation(ViolationKind::VulnCritical, Some(host)));
        }
        if let Some(src) = sources.get(&task.id) {
            if graph.path_latency(src, host, graph.bandwidth_floor).is_none() {
                out.push(violation(ViolationKind::BandwidthFloor, Some(host)));
            }
        }
    }
    out
}
