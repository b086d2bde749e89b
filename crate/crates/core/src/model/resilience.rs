//! Resilience: the expected fraction of tasks that still complete under a
//! set of failure scenarios, given a healing policy.

use std::collections::BTreeSet;

use num_rational::Ratio;
use serde::Serialize;
use thiserror::Error;

use super::{Allocation, ModelError, NodeId, SystemGraph};
use crate::faults::{apply_failures, FailureScenario};

/// A healing layer failed in a way it could not recover from.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("pipeline failure: {0}")]
pub struct HealError(pub String);

/// Anything that can react to node failures by mutating the allocation.
pub trait HealingPolicy {
    /// Called once before each scenario run.
    fn begin_scenario(&mut self, _scenario: &FailureScenario, _seed: u64) {}

    /// Reacts to the failures in effect at time `t`.
    fn heal(
        &mut self,
        graph: &mut SystemGraph,
        alloc: &mut Allocation,
        scenario: &FailureScenario,
        failed: &BTreeSet<NodeId>,
        t: f64,
    ) -> Result<(), HealError>;
}

/// Does nothing: tasks on failed nodes are simply lost.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoopPolicy;

impl HealingPolicy for NoopPolicy {
    fn heal(
        &mut self,
        _: &mut SystemGraph,
        _: &mut Allocation,
        _: &FailureScenario,
        _: &BTreeSet<NodeId>,
        _: f64,
    ) -> Result<(), HealError> {
        Ok(())
    }
}

/// Completion counts for one scenario run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ScenarioOutcome {
    pub scenario: String,
    pub trial: usize,
    pub seed: u64,
    pub completed: u64,
    pub total: u64,
    /// Ids of tasks that did not complete.
    pub lost: Vec<String>,
    pub error: Option<String>,
}

impl ScenarioOutcome {
    pub fn fraction(&self) -> Ratio<i64> {
        if self.total == 0 {
            Ratio::from_integer(1)
        } else {
            Ratio::new(self.completed as i64, self.total as i64)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Resilience {
    pub outcomes: Vec<ScenarioOutcome>,
}

impl Resilience {
    /// Mean completed fraction, exact.
    pub fn ratio(&self) -> Ratio<i64> {
        if self.outcomes.is_empty() {
            return Ratio::from_integer(1);
        }
        let sum = self.outcomes.iter().fold(Ratio::from_integer(0), |acc, o| acc + o.fraction());
        sum / Ratio::from_integer(self.outcomes.len() as i64)
    }

    pub fn value(&self) -> f64 {
        let r = self.ratio();
        *r.numer() as f64 / *r.denom() as f64
    }
}

/// Runs every scenario `trials` times through `policy` and averages the
/// fraction of tasks that finish on a serving node.
///
/// Each run starts from fresh copies of `graph` and `alloc`. Events are
/// processed in time order; at each event time the failures are applied and
/// the policy is asked to heal. A policy error ends that run early: it is
/// logged and the run scores whatever had completed.
pub fn compute_resilience(
    graph: &SystemGraph,
    alloc: &Allocation,
    scenarios: &[FailureScenario],
    policy: &mut dyn HealingPolicy,
    trials: usize,
    seed: u64,
) -> Result<Resilience, ModelError> {
    if trials == 0 {
        return Err(ModelError::InvalidParameter("trials must be at least 1".into()));
    }
    if scenarios.is_empty() {
        return Err(ModelError::InvalidParameter("no scenarios".into()));
    }
    let mut outcomes = Vec::with_capacity(trials * scenarios.len());
    for trial in 0..trials {
        for (idx, scenario) in scenarios.iter().enumerate() {
            let run_seed = seed.wrapping_add((trial * scenarios.len() + idx) as u64);
            outcomes.push(run_scenario(graph, alloc, scenario, policy, trial, run_seed)?);
        }
    }
    Ok(Resilience { outcomes })
}

fn run_scenario(
    graph: &SystemGraph,
    alloc: &Allocation,
    scenario: &FailureScenario,
    policy: &mut dyn HealingPolicy,
    trial: usize,
    seed: u64,
) -> Result<ScenarioOutcome, ModelError> {
    let mut g = graph.clone();
    let mut a = alloc.clone();
    scenario
        .validate(&g)
        .map_err(|e| ModelError::InvalidParameter(format!("scenario `{}`: {e}", scenario.id)))?;
    policy.begin_scenario(scenario, seed);
    let mut error = None;
    for t in scenario.event_times() {
        a.time = t;
        let failed = apply_failures(&mut g, &mut a, scenario, t)
            .map_err(|e| ModelError::InvalidParameter(e.to_string()))?;
        if let Err(e) = policy.heal(&mut g, &mut a, scenario, &failed, t) {
            log::warn!("scenario `{}` trial {trial}: {e}", scenario.id);
            error = Some(e.0);
            break;
        }
    }
    let mut completed = 0;
    let mut lost = Vec::new();
    for task in alloc.mapping().keys() {
        let ok = !a.is_stale(task)
            && a.host(task)
                .and_then(|h| g.node(h))
                .is_some_and(|n| n.state.is_serving() && n.active_tasks.contains(task));
        if ok {
            completed += 1;
        } else {
            lost.push(task.to_string());
        }
    }
    Ok(ScenarioOutcome {
        scenario: scenario.id.clone(),
        trial,
        seed,
        completed,
        total: alloc.len() as u64,
        lost,
        error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::faults::FailureKind;
    use crate::model::{assign_task, Link, Node, Task};

    fn setup() -> (SystemGraph, Allocation) {
        let mut g = SystemGraph::default();
        for id in ["a", "b", "c"] {
            g.add_node(Node::new(id, 2.0, 2.0)).unwrap();
        }
        g.add_link(Link::new("a", "b", 5.0, 0.01)).unwrap();
        g.add_link(Link::new("b", "c", 5.0, 0.01)).unwrap();
        let mut al = Allocation::new(0.0);
        for (t, n) in [("t1", "a"), ("t2", "a"), ("t3", "b"), ("t4", "c")] {
            assign_task(&mut g, &mut al, &Task::new(t, 1.0, 1.0), &n.into()).unwrap();
        }
        (g, al)
    }

    #[test]
    fn empty_scenario_is_fully_resilient() {
        let (g, a) = setup();
        let r = compute_resilience(&g, &a, &[FailureScenario::new("none")], &mut NoopPolicy, 1, 0).unwrap();
        assert_eq!(r.value(), 1.0);
    }

    #[test]
    fn noop_policy_loses_tasks_on_failed_nodes() {
        let (g, a) = setup();
        let mut s1 = FailureScenario::new("s1");
        s1.push(1.0, "a", FailureKind::Crash);
        let mut s2 = FailureScenario::new("s2");
        s2.push(1.0, "a", FailureKind::Crash).push(1.0, "b", FailureKind::Crash).push(2.0, "c", FailureKind::Crash);
        let r = compute_resilience(&g, &a, &[s1, s2], &mut NoopPolicy, 2, 7).unwrap();
        assert_eq!(r.outcomes.len(), 4);
        // (2/4 + 0) / 2
        assert_eq!(r.ratio(), Ratio::new(1, 4));
    }

    struct Failing;
    impl HealingPolicy for Failing {
        fn heal(
            &mut self,
            _: &mut SystemGraph,
            _: &mut Allocation,
            _: &FailureScenario,
            _: &BTreeSet<NodeId>,
            _: f64,
        ) -> Result<(), HealError> {
            Err(HealError("reasoner offline".into()))
        }
    }

    #[test]
    fn policy_errors_are_scored_not_propagated() {
        let (g, a) = setup();
        let mut s = FailureScenario::new("s");
        s.push(1.0, "c", FailureKind::Crash);
        let r = compute_resilience(&g, &a, &[s], &mut Failing, 1, 0).unwrap();
        assert_eq!(r.ratio(), Ratio::new(3, 4));
        assert_eq!(r.outcomes[0].error.as_deref(), Some("reasoner offline"));
    }

    #[test]
    fn parameter_errors() {
        let (g, a) = setup();
        assert!(compute_resilience(&g, &a, &[], &mut NoopPolicy, 1, 0).is_err());
        assert!(compute_resilience(&g, &a, &[FailureScenario::new("x")], &mut NoopPolicy, 0, 0).is_err());
    }
}
