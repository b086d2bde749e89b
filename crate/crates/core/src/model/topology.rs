//! Line-oriented topology file.
//!
//! ```text
//! recist-topology v1
//! node <id> <capacity> <memory> <state> <vulnerability>
//! link <src> <dst> <bandwidth> <latency>
//! task <id> <cpu> <mem> <compute_time> <critical:0|1> <host|->
//! ```
//!
//! Blank lines and lines starting with `#` are ignored on load. Saving writes
//! nodes and tasks in id order and links in insertion order, so a canonical
//! file survives a load/save cycle byte for byte.

use std::fmt::Write as _;

use super::{Allocation, Link, ModelError, Node, NodeId, SystemGraph, Task, EPS};

pub const HEADER: &str = "recist-topology v1";

/// A graph plus its initial allocation.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub graph: SystemGraph,
    pub allocation: Allocation,
}

fn parse_err(line: usize, message: impl Into<String>) -> ModelError {
    ModelError::Parse {
        line,
        message: message.into(),
    }
}

fn num(line: usize, field: &str, raw: &str) -> Result<f64, ModelError> {
    let v: f64 = raw
        .parse()
        .map_err(|_| parse_err(line, format!("{field}: `{raw}` is not a number")))?;
    if !v.is_finite() {
        return Err(parse_err(line, format!("{field}: `{raw}` is not finite")));
    }
    Ok(v)
}

/// Parses a topology file. The graph must be connected and the listed
/// placements must respect cpu and memory capacity.
pub fn load_topology(text: &str, bandwidth_floor: f64) -> Result<Topology, ModelError> {
    let mut graph = SystemGraph::new(bandwidth_floor);
    let mut allocation = Allocation::new(0.0);
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.find(|(_, l)| !l.is_empty() && !l.starts_with('#')) {
        Some((_, l)) if l == HEADER => {}
        Some((n, l)) => return Err(parse_err(n, format!("expected `{HEADER}`, found `{l}`"))),
        None => return Err(parse_err(1, "empty topology")),
    }
    let mut placements = Vec::new();
    for (n, line) in lines {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        match (f[0], f.len()) {
            ("node", 6) => {
                let state = f[4].parse().map_err(|e| parse_err(n, e))?;
                let vuln = f[5].parse().map_err(|e| parse_err(n, e))?;
                let node = Node::new(f[1], num(n, "capacity", f[2])?, num(n, "memory", f[3])?)
                    .with_state(state)
                    .with_vulnerability(vuln);
                graph.add_node(node).map_err(|e| parse_err(n, e.to_string()))?;
            }
            ("link", 5) => {
                let link = Link::new(f[1], f[2], num(n, "bandwidth", f[3])?, num(n, "latency", f[4])?);
                graph.add_link(link).map_err(|e| parse_err(n, e.to_string()))?;
            }
            ("task", 7) => {
                let mut task = Task::new(f[1], num(n, "cpu", f[2])?, num(n, "mem", f[3])?)
                    .with_compute_time(num(n, "compute_time", f[4])?);
                task.critical = match f[5] {
                    "0" => false,
                    "1" => true,
                    other => return Err(parse_err(n, format!("critical flag `{other}` is not 0 or 1"))),
                };
                if graph.task(&task.id).is_some() {
                    return Err(parse_err(n, format!("duplicate task `{}`", task.id)));
                }
                graph.register_task(task.clone()).map_err(|e| parse_err(n, e.to_string()))?;
                if f[6] != "-" {
                    placements.push((n, task, NodeId::from(f[6])));
                }
            }
            (kind, len) => return Err(parse_err(n, format!("malformed `{kind}` record with {len} fields"))),
        }
    }
    if !graph.is_connected() {
        return Err(ModelError::Disconnected);
    }
    for (n, task, host) in placements {
        if graph.node(&host).is_none() {
            return Err(parse_err(n, format!("task `{}` placed on unknown node `{host}`", task.id)));
        }
        graph.place(&mut allocation, &task, &host);
        let node = graph.node(&host).expect("checked above");
        let (c, m) = graph.load(&host);
        if c > node.capacity + EPS || m > node.memory + EPS {
            return Err(parse_err(n, format!("placements overload node `{host}`")));
        }
    }
    Ok(Topology { graph, allocation })
}

/// Writes the canonical form of a topology.
pub fn save_topology(graph: &SystemGraph, allocation: &Allocation) -> String {
    let mut out = String::new();
    out.push_str(HEADER);
    out.push('\n');
    for node in graph.nodes() {
        let _ = writeln!(
            out,
            "node {} {} {} {} {}",
            node.id, node.capacity, node.memory, node.state, node.vulnerability
        );
    }
    for link in graph.links() {
        let _ = writeln!(out, "link {} {} {} {}", link.src, link.dst, link.bandwidth, link.latency);
    }
    for task in graph.tasks() {
        let host = allocation.host(&task.id).map_or("-", |h| h.as_str());
        let _ = writeln!(
            out,
            "task {} {} {} {} {} {}",
            task.id,
            task.cpu_demand,
            task.mem_demand,
            task.compute_time,
            u8::from(task.critical),
            host
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{NodeState, TaskId, Vulnerability};

    const SAMPLE: &str = "recist-topology v1
node edge-1 4 8 available low
node edge-2 2 4 busy high
node fog-1 16 32 available medium
link edge-1 fog-1 100 0.005
link edge-2 fog-1 50 0.01
task t1 1 2 0.5 1 edge-1
task t2 2 1 1 0 edge-2
task t3 0.5 0.5 2 0 -
";

    #[test]
    fn canonical_round_trip_is_byte_stable() {
        let topo = load_topology(SAMPLE, 1.0).unwrap();
        assert_eq!(save_topology(&topo.graph, &topo.allocation), SAMPLE);
        let again = load_topology(&save_topology(&topo.graph, &topo.allocation), 1.0).unwrap();
        assert_eq!(again, topo);
    }

    #[test]
    fn loads_attributes() {
        let topo = load_topology(SAMPLE, 1.0).unwrap();
        let g = &topo.graph;
        let e2 = g.node(&"edge-2".into()).unwrap();
        assert_eq!(e2.state, NodeState::Busy);
        assert_eq!(e2.vulnerability, Vulnerability::High);
        assert!(g.task(&"t1".into()).unwrap().critical);
        assert_eq!(topo.allocation.host(&TaskId::from("t3")), None);
        assert_eq!(topo.allocation.tasks_on(&"edge-1".into()), vec![TaskId::from("t1")]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(load_topology("", 1.0).is_err());
        assert!(load_topology("nope\n", 1.0).is_err());
        let disconnected = "recist-topology v1\nnode a 1 1 available low\nnode b 1 1 available low\n";
        assert_eq!(load_topology(disconnected, 1.0), Err(ModelError::Disconnected));
        let overload = "recist-topology v1\nnode a 1 1 available low\ntask t 2 0 1 0 a\n";
        assert!(matches!(load_topology(overload, 1.0), Err(ModelError::Parse { line: 3, .. })));
        let bad_num = "recist-topology v1\nnode a x 1 available low\n";
        assert!(matches!(load_topology(bad_num, 1.0), Err(ModelError::Parse { line: 2, .. })));
        let bad_state = "recist-topology v1\nnode a 1 1 sleeping low\n";
        assert!(load_topology(bad_state, 1.0).is_err());
    }

    #[test]
    fn comments_are_ignored() {
        let text = "# lab\nrecist-topology v1\n\n# nodes\nnode a 1 1 available low\n";
        let topo = load_topology(text, 1.0).unwrap();
        assert_eq!(topo.graph.node_count(), 1);
    }
}
