//! Rendezvous-point knowledge stores.
//!
//! Records are grouped by topic embedding, then by reason embedding into
//! partitions. Similar partitions merge, drifting ones split, and local
//! stores push their records into a global store.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::NodeId;
use crate::reasoner::{EmbedRole, Embedder, ReasonerError};

pub const SNAPSHOT_HEADER: &str = "recist-kb v1";
/// Reorganization passes before giving up on a fixed point.
pub const REORGANIZE_LIMIT: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KnowledgeError {
    #[error("embedder unavailable: {0}")]
    EmbedderUnavailable(#[from] ReasonerError),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("no topic {0}")]
    UnknownTopic(u64),
    #[error("snapshot line {line}: {message}")]
    Snapshot { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KnowledgeConfig {
    pub theta_topic: f64,
    pub theta_reason: f64,
    pub theta_merge: f64,
    pub theta_split: f64,
    /// Store accepted-but-not-best hypotheses as well.
    pub persist_supporting: bool,
}

impl Default for KnowledgeConfig {
    fn default() -> Self {
        Self {
            theta_topic: 0.75,
            theta_reason: 0.70,
            theta_merge: 0.90,
            theta_split: 0.60,
            persist_supporting: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Local,
    Global,
}

impl Scope {
    fn as_str(self) -> &'static str {
        match self {
            Self::Local => "local",
            Self::Global => "global",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeRecord {
    /// Origin hypothesis id.
    pub id: String,
    pub topic: String,
    pub reason: String,
    pub solution: String,
    pub source: NodeId,
    pub timestamp: f64,
    #[serde(default = "first_version")]
    pub version: u64,
    #[serde(default)]
    pub supporting: bool,
}

fn first_version() -> u64 {
    1
}

impl KnowledgeRecord {
    fn same_payload(&self, other: &Self) -> bool {
        self.topic == other.topic && self.reason == other.reason && self.solution == other.solution
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    pub record: KnowledgeRecord,
    pub topic_vec: Vec<f64>,
    pub reason_vec: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub id: u64,
    pub representative: Vec<f64>,
    pub members: Vec<Member>,
    pub version: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Topic {
    pub id: u64,
    pub label: String,
    pub representative: Vec<f64>,
    pub partitions: Vec<Partition>,
}

impl Topic {
    pub fn members(&self) -> impl Iterator<Item = &Member> {
        self.partitions.iter().flat_map(|p| p.members.iter())
    }
}

/// Cosine similarity.
pub fn similarity(a: &[f64], b: &[f64]) -> Result<f64, KnowledgeError> {
    if a.len() != b.len() {
        return Err(KnowledgeError::DimensionMismatch(a.len(), b.len()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Normalized mean; falls back to the first vector when the mean vanishes.
fn centroid<'a>(vs: impl Iterator<Item = &'a Vec<f64>>) -> Vec<f64> {
    let vs: Vec<&Vec<f64>> = vs.collect();
    let Some(first) = vs.first() else {
        return Vec::new();
    };
    let mut sum = vec![0.0; first.len()];
    for v in &vs {
        for (s, x) in sum.iter_mut().zip(v.iter()) {
            *s += x;
        }
    }
    let norm = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return (*first).clone();
    }
    sum.iter().map(|x| x / norm).collect()
}

/// 1 minus the mean pairwise similarity of the member reason embeddings.
pub fn divergence(p: &Partition) -> f64 {
    let n = p.members.len();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += similarity(&p.members[i].reason_vec, &p.members[j].reason_vec).unwrap_or(0.0);
        }
    }
    1.0 - total / (n * (n - 1) / 2) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum Placement {
    NewTopic { topic: u64, partition: u64 },
    NewPartition { topic: u64, partition: u64 },
    Reinforced { topic: u64, partition: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InsertReport {
    pub placement: Placement,
    pub similarity_evals: u64,
    pub topic_merges: usize,
    pub partition_merges: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MergeReport {
    pub inserted: Vec<(String, InsertReport)>,
    pub replaced: Vec<String>,
    /// Same id and version but different payload; the global copy is kept.
    pub conflicts: Vec<String>,
}

impl MergeReport {
    pub fn is_empty(&self) -> bool {
        self.inserted.is_empty() && self.replaced.is_empty() && self.conflicts.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ReorgReport {
    pub merges: usize,
    pub splits: usize,
    pub converged: bool,
}

/// Journal operations. Replaying them through the same embedder rebuilds
/// the store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum JournalOp {
    Insert { record: KnowledgeRecord },
    Replace { record: KnowledgeRecord },
    Reorganize,
    Sync { peer: String, counter: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RendezvousStore {
    pub scope: Scope,
    /// Peer name used in version vectors.
    pub owner: String,
    pub config: KnowledgeConfig,
    topics: Vec<Topic>,
    version_vector: BTreeMap<String, u64>,
    next_topic: u64,
    next_partition: u64,
    /// Mutating operations applied so far.
    ops: u64,
    journal: Vec<JournalOp>,
    similarity_evals: u64,
}

impl RendezvousStore {
    pub fn new(scope: Scope, owner: impl Into<String>, config: KnowledgeConfig) -> Self {
        Self {
            scope,
            owner: owner.into(),
            config,
            topics: Vec::new(),
            version_vector: BTreeMap::new(),
            next_topic: 0,
            next_partition: 0,
            ops: 0,
            journal: Vec::new(),
            similarity_evals: 0,
        }
    }

    pub fn topics(&self) -> &[Topic] {
        &self.topics
    }

    pub fn topic_count(&self) -> usize {
        self.topics.len()
    }

    pub fn partition_count(&self) -> usize {
        self.topics.iter().map(|t| t.partitions.len()).sum()
    }

    pub fn records(&self) -> impl Iterator<Item = &KnowledgeRecord> {
        self.topics.iter().flat_map(|t| t.members().map(|m| &m.record))
    }

    pub fn record_count(&self) -> usize {
        self.records().count()
    }

    pub fn version_vector(&self) -> &BTreeMap<String, u64> {
        &self.version_vector
    }

    pub fn ops(&self) -> u64 {
        self.ops
    }

    pub fn journal(&self) -> &[JournalOp] {
        &self.journal
    }

    /// Similarity evaluations made so far.
    pub fn similarity_evals(&self) -> u64 {
        self.similarity_evals
    }

    fn sim(&mut self, a: &[f64], b: &[f64]) -> Result<f64, KnowledgeError> {
        self.similarity_evals += 1;
        similarity(a, b)
    }

    fn topic_index(&self, id: u64) -> Result<usize, KnowledgeError> {
        self.topics
            .iter()
            .position(|t| t.id == id)
            .ok_or(KnowledgeError::UnknownTopic(id))
    }

    fn refresh_topic(&mut self, ti: usize) {
        let t = &mut self.topics[ti];
        for p in &mut t.partitions {
            p.representative = centroid(p.members.iter().map(|m| &m.reason_vec));
        }
        t.representative = centroid(t.members().map(|m| &m.topic_vec));
    }

    /// Most similar topic to `v`, lowest id on ties.
    fn closest_topic(&mut self, v: &[f64]) -> Result<Option<(usize, f64)>, KnowledgeError> {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..self.topics.len() {
            let rep = self.topics[i].representative.clone();
            let s = self.sim(v, &rep)?;
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        Ok(best)
    }

    fn embed_member(record: KnowledgeRecord, embedder: &dyn Embedder) -> Result<Member, KnowledgeError> {
        if record.topic.trim().is_empty() || record.reason.trim().is_empty() {
            return Err(KnowledgeError::InvalidRecord(format!("record {} lacks a topic or reason", record.id)));
        }
        Ok(Member {
            topic_vec: embedder.embed(&record.topic, EmbedRole::Topic)?,
            reason_vec: embedder.embed(&record.reason, EmbedRole::Reason)?,
            record,
        })
    }

    /// Places a record: a new topic when no topic is close enough, else a
    /// new partition when no partition of the closest topic is close
    /// enough, else the closest partition. Merges restore the invariants.
    pub fn insert(&mut self, record: KnowledgeRecord, embedder: &dyn Embedder) -> Result<InsertReport, KnowledgeError> {
        let member = Self::embed_member(record.clone(), embedder)?;
        let report = self.place(member, BTreeSet::new())?;
        self.journal.push(JournalOp::Insert { record });
        self.ops += 1;
        Ok(report)
    }

    /// Places `member`, then restores the invariants. `touched` names topics
    /// already changed by the caller; untouched topics are left alone.
    fn place(&mut self, member: Member, mut touched: BTreeSet<u64>) -> Result<InsertReport, KnowledgeError> {
        let before = self.similarity_evals;
        let closest = self.closest_topic(&member.topic_vec)?;
        let placement = match closest {
            Some((ti, s)) if s >= self.config.theta_topic => {
                let mut best: Option<(usize, f64)> = None;
                for pi in 0..self.topics[ti].partitions.len() {
                    let rep = self.topics[ti].partitions[pi].representative.clone();
                    let s = self.sim(&member.reason_vec, &rep)?;
                    if best.is_none_or(|(_, b)| s > b) {
                        best = Some((pi, s));
                    }
                }
                let topic = self.topics[ti].id;
                match best {
                    Some((pi, s)) if s >= self.config.theta_reason => {
                        let p = &mut self.topics[ti].partitions[pi];
                        p.members.push(member);
                        p.version += 1;
                        let partition = p.id;
                        self.refresh_topic(ti);
                        Placement::Reinforced { topic, partition }
                    }
                    _ => {
                        let partition = self.new_partition_id();
                        self.topics[ti].partitions.push(Partition {
                            id: partition,
                            representative: member.reason_vec.clone(),
                            members: vec![member],
                            version: 1,
                        });
                        self.refresh_topic(ti);
                        Placement::NewPartition { topic, partition }
                    }
                }
            }
            _ => {
                let topic = self.next_topic;
                self.next_topic += 1;
                let partition = self.new_partition_id();
                self.topics.push(Topic {
                    id: topic,
                    label: member.record.topic.clone(),
                    representative: member.topic_vec.clone(),
                    partitions: vec![Partition {
                        id: partition,
                        representative: member.reason_vec.clone(),
                        members: vec![member],
                        version: 1,
                    }],
                });
                Placement::NewTopic { topic, partition }
            }
        };
        let similarity_evals = self.similarity_evals - before;
        let (target, changed) = match placement {
            Placement::NewTopic { topic, partition }
            | Placement::NewPartition { topic, partition }
            | Placement::Reinforced { topic, partition } => (topic, partition),
        };
        let caller_touched = !touched.is_empty();
        touched.insert(target);
        let topic_merges = self.merge_topics(&mut touched, false)?;
        let near = (!caller_touched && topic_merges == 0).then_some(changed);
        let mut partition_merges = 0;
        for id in touched {
            partition_merges += self.merge_partitions_near(id, near.filter(|_| id == target))?;
        }
        Ok(InsertReport {
            placement,
            similarity_evals,
            topic_merges,
            partition_merges,
        })
    }

    fn new_partition_id(&mut self) -> u64 {
        let id = self.next_partition;
        self.next_partition += 1;
        id
    }

    /// Highest-similarity pair at or above `threshold`, lowest indices on
    /// ties. Only pairs with a `dirty` side are compared.
    fn closest_pair(
        &mut self,
        reps: &[Vec<f64>],
        dirty: &[bool],
        threshold: f64,
    ) -> Result<Option<(usize, usize)>, KnowledgeError> {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..reps.len() {
            for j in (i + 1..reps.len()).filter(|&j| dirty[i] || dirty[j]) {
                let s = self.sim(&reps[i], &reps[j])?;
                if s >= threshold && best.is_none_or(|(_, _, b)| s > b) {
                    best = Some((i, j, s));
                }
            }
        }
        Ok(best.map(|(i, j, _)| (i, j)))
    }

    /// Merges topic pairs while any pair is at least `theta_topic` similar.
    /// Unless `all` is set, only pairs involving a `touched` topic are
    /// compared, which is enough when the rest already satisfied the
    /// invariant. Surviving topics that absorbed another are added to
    /// `touched`.
    fn merge_topics(&mut self, touched: &mut BTreeSet<u64>, all: bool) -> Result<usize, KnowledgeError> {
        let mut merges = 0;
        loop {
            let reps: Vec<Vec<f64>> = self.topics.iter().map(|t| t.representative.clone()).collect();
            let dirty: Vec<bool> = self.topics.iter().map(|t| all || touched.contains(&t.id)).collect();
            let Some((i, j)) = self.closest_pair(&reps, &dirty, self.config.theta_topic)? else {
                return Ok(merges);
            };
            let absorbed = self.topics.remove(j);
            touched.remove(&absorbed.id);
            touched.insert(self.topics[i].id);
            self.topics[i].partitions.extend(absorbed.partitions);
            self.refresh_topic(i);
            merges += 1;
        }
    }

    /// Merges partition pairs of a topic while any pair is at least
    /// `theta_merge` similar, most similar first.
    pub fn merge_partitions(&mut self, topic: u64) -> Result<usize, KnowledgeError> {
        self.merge_partitions_near(topic, None)
    }

    /// As [`Self::merge_partitions`], but when `changed` names the only
    /// partition altered since the topic last satisfied the invariant, only
    /// pairs involving changed partitions are compared. The merges made are
    /// the same.
    fn merge_partitions_near(&mut self, topic: u64, changed: Option<u64>) -> Result<usize, KnowledgeError> {
        let ti = self.topic_index(topic)?;
        let mut dirty: Vec<bool> = self.topics[ti]
            .partitions
            .iter()
            .map(|p| changed.is_none_or(|c| c == p.id))
            .collect();
        let mut merges = 0;
        loop {
            let reps: Vec<Vec<f64>> = self.topics[ti].partitions.iter().map(|p| p.representative.clone()).collect();
            let Some((i, j)) = self.closest_pair(&reps, &dirty, self.config.theta_merge)? else {
                return Ok(merges);
            };
            let t = &mut self.topics[ti];
            let absorbed = t.partitions.remove(j);
            let keep = &mut t.partitions[i];
            keep.members.extend(absorbed.members);
            keep.version = keep.version.max(absorbed.version) + 1;
            dirty.remove(j);
            dirty[i] = true;
            self.refresh_topic(ti);
            merges += 1;
        }
    }

    /// Splits a partition in two when its divergence exceeds `theta_split`.
    /// Returns the number of partitions the original became.
    pub fn split_partition(&mut self, topic: u64, partition: u64) -> Result<usize, KnowledgeError> {
        let ti = self.topic_index(topic)?;
        let Some(pi) = self.topics[ti].partitions.iter().position(|p| p.id == partition) else {
            return Ok(0);
        };
        let p = &self.topics[ti].partitions[pi];
        let n = p.members.len();
        if n < 2 || divergence(p) <= self.config.theta_split {
            return Ok(1);
        }
        let vecs: Vec<Vec<f64>> = p.members.iter().map(|m| m.reason_vec.clone()).collect();
        let mut seed = (0, 1, f64::INFINITY);
        for i in 0..n {
            for j in i + 1..n {
                let s = self.sim(&vecs[i], &vecs[j])?;
                if s < seed.2 {
                    seed = (i, j, s);
                }
            }
        }
        let mut centres = [vecs[seed.0].clone(), vecs[seed.1].clone()];
        let mut assign = vec![0usize; n];
        for pass in 0..2 {
            for (k, v) in vecs.iter().enumerate() {
                let a = self.sim(v, &centres[0])?;
                let b = self.sim(v, &centres[1])?;
                assign[k] = usize::from(b > a);
            }
            if pass == 0 {
                for (c, centre) in centres.iter_mut().enumerate() {
                    let group: Vec<&Vec<f64>> = vecs.iter().zip(&assign).filter(|(_, a)| **a == c).map(|(v, _)| v).collect();
                    if !group.is_empty() {
                        *centre = centroid(group.into_iter());
                    }
                }
            }
        }
        if assign.iter().all(|a| *a == 0) || assign.iter().all(|a| *a == 1) {
            return Ok(1);
        }
        let groups: [Vec<&Vec<f64>>; 2] = [0, 1].map(|c| vecs.iter().zip(&assign).filter(|(_, a)| **a == c).map(|(v, _)| v).collect());
        let reps = [centroid(groups[0].iter().copied()), centroid(groups[1].iter().copied())];
        if self.sim(&reps[0], &reps[1])? >= self.config.theta_merge {
            return Ok(1);
        }
        // Either half landing next to a sibling would undo the split.
        let siblings: Vec<Vec<f64>> = self.topics[ti]
            .partitions
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != pi)
            .map(|(_, q)| q.representative.clone())
            .collect();
        for q in &siblings {
            for r in &reps {
                if self.sim(r, q)? >= self.config.theta_merge {
                    return Ok(1);
                }
            }
        }
        let new_id = self.new_partition_id();
        let t = &mut self.topics[ti];
        let old = &mut t.partitions[pi];
        let members = std::mem::take(&mut old.members);
        let (stay, go): (Vec<(Member, usize)>, Vec<(Member, usize)>) =
            members.into_iter().zip(assign).partition(|(_, a)| *a == 0);
        old.members = stay.into_iter().map(|(m, _)| m).collect();
        old.version += 1;
        let version = old.version;
        t.partitions.insert(
            pi + 1,
            Partition {
                id: new_id,
                representative: Vec::new(),
                members: go.into_iter().map(|(m, _)| m).collect(),
                version,
            },
        );
        self.refresh_topic(ti);
        Ok(2)
    }

    /// Alternates merge and split passes until nothing changes.
    pub fn reorganize(&mut self) -> Result<ReorgReport, KnowledgeError> {
        let mut report = ReorgReport::default();
        for _ in 0..REORGANIZE_LIMIT {
            let mut changed = false;
            let tm = self.merge_topics(&mut BTreeSet::new(), true)?;
            report.merges += tm;
            changed |= tm > 0;
            let ids: Vec<u64> = self.topics.iter().map(|t| t.id).collect();
            for t in ids {
                let m = self.merge_partitions(t)?;
                report.merges += m;
                changed |= m > 0;
                let parts: Vec<u64> = self.topics[self.topic_index(t)?].partitions.iter().map(|p| p.id).collect();
                for p in parts {
                    if self.split_partition(t, p)? == 2 {
                        report.splits += 1;
                        changed = true;
                    }
                }
            }
            if !changed {
                report.converged = true;
                break;
            }
        }
        self.journal.push(JournalOp::Reorganize);
        self.ops += 1;
        Ok(report)
    }

    /// Drops every copy of `id` and returns the surviving topics it left.
    fn remove_record(&mut self, id: &str) -> BTreeSet<u64> {
        let touched: BTreeSet<u64> = self
            .topics
            .iter()
            .filter(|t| t.members().any(|m| m.record.id == id))
            .map(|t| t.id)
            .collect();
        for t in self.topics.iter_mut().filter(|t| touched.contains(&t.id)) {
            for p in &mut t.partitions {
                p.members.retain(|m| m.record.id != id);
            }
            t.partitions.retain(|p| !p.members.is_empty());
        }
        self.topics.retain(|t| !t.partitions.is_empty());
        for ti in 0..self.topics.len() {
            if touched.contains(&self.topics[ti].id) {
                self.refresh_topic(ti);
            }
        }
        touched.into_iter().filter(|id| self.topic_index(*id).is_ok()).collect()
    }

    fn replace(&mut self, record: KnowledgeRecord, embedder: &dyn Embedder) -> Result<(), KnowledgeError> {
        let member = Self::embed_member(record.clone(), embedder)?;
        let touched = self.remove_record(&record.id);
        self.place(member, touched)?;
        self.journal.push(JournalOp::Replace { record });
        self.ops += 1;
        Ok(())
    }

    /// Pushes the records of `local` that this store lacks. A record with
    /// the same id is replaced only by a higher version. Re-running without
    /// local changes does nothing.
    pub fn sync_from(&mut self, local: &RendezvousStore, embedder: &dyn Embedder) -> Result<MergeReport, KnowledgeError> {
        let mut report = MergeReport::default();
        if self.version_vector.get(&local.owner) == Some(&local.ops) {
            return Ok(report);
        }
        let mut latest: BTreeMap<&str, &KnowledgeRecord> = BTreeMap::new();
        let mut order: Vec<&str> = Vec::new();
        // A store loaded from a snapshot has no journal; its current
        // records stand in for the history.
        let source: Vec<&KnowledgeRecord> = if local.journal.is_empty() {
            local.records().collect()
        } else {
            local.records_in_journal_order().collect()
        };
        for r in source {
            match latest.get(r.id.as_str()) {
                Some(prev) if prev.version >= r.version => {}
                Some(_) => {
                    latest.insert(&r.id, r);
                }
                None => {
                    order.push(&r.id);
                    latest.insert(&r.id, r);
                }
            }
        }
        let mut held: BTreeMap<&str, KnowledgeRecord> = BTreeMap::new();
        for r in self.records() {
            if let Some((id, _)) = latest.get_key_value(r.id.as_str()) {
                if held.get(id).is_none_or(|h| r.version >= h.version) {
                    held.insert(id, r.clone());
                }
            }
        }
        for id in order {
            let r = latest[id];
            match held.remove(id) {
                None => {
                    let rep = self.insert(r.clone(), embedder)?;
                    report.inserted.push((id.to_string(), rep));
                }
                Some(g) if g.same_payload(r) => {}
                Some(g) if r.version > g.version => {
                    self.replace(r.clone(), embedder)?;
                    report.replaced.push(id.to_string());
                }
                Some(g) if r.version == g.version => report.conflicts.push(id.to_string()),
                Some(_) => {}
            }
        }
        self.version_vector.insert(local.owner.clone(), local.ops);
        self.journal.push(JournalOp::Sync {
            peer: local.owner.clone(),
            counter: local.ops,
        });
        self.ops += 1;
        Ok(report)
    }

    /// Records as they were inserted, including replacements.
    fn records_in_journal_order(&self) -> impl Iterator<Item = &KnowledgeRecord> {
        self.journal.iter().filter_map(|op| match op {
            JournalOp::Insert { record } | JournalOp::Replace { record } => Some(record),
            _ => None,
        })
    }

    /// Closest stored record for a topic text, if any topic is close enough.
    pub fn lookup(&mut self, topic: &str, embedder: &dyn Embedder) -> Result<Option<KnowledgeRecord>, KnowledgeError> {
        let v = embedder.embed(topic, EmbedRole::Topic)?;
        Ok(match self.closest_topic(&v)? {
            Some((ti, s)) if s >= self.config.theta_topic => self.topics[ti].members().last().map(|m| m.record.clone()),
            _ => None,
        })
    }

    pub fn journal_jsonl(&self) -> String {
        let mut s = String::new();
        for op in &self.journal {
            let _ = writeln!(s, "{}", serde_json::to_string(op).expect("journal ops serialize"));
        }
        s
    }

    /// Rebuilds a store by re-running journal operations.
    pub fn replay(
        scope: Scope,
        owner: impl Into<String>,
        config: KnowledgeConfig,
        journal: &str,
        embedder: &dyn Embedder,
    ) -> Result<Self, KnowledgeError> {
        let mut store = Self::new(scope, owner, config);
        for (i, line) in journal.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let op: JournalOp = serde_json::from_str(line).map_err(|e| KnowledgeError::Snapshot {
                line: i + 1,
                message: e.to_string(),
            })?;
            match op {
                JournalOp::Insert { record } => {
                    store.insert(record, embedder)?;
                }
                JournalOp::Replace { record } => store.replace(record, embedder)?,
                JournalOp::Reorganize => {
                    store.reorganize()?;
                }
                JournalOp::Sync { peer, counter } => {
                    store.version_vector.insert(peer.clone(), counter);
                    store.journal.push(JournalOp::Sync { peer, counter });
                    store.ops += 1;
                }
            }
        }
        Ok(store)
    }

    /// Structured text with 9-digit decimals; vectors are written sparsely
    /// as `index:value`.
    pub fn snapshot(&self) -> String {
        let mut s = format!("{SNAPSHOT_HEADER}\n");
        let c = &self.config;
        let _ = writeln!(s, "scope {}", self.scope.as_str());
        let _ = writeln!(s, "owner {}", json(&self.owner));
        let _ = writeln!(
            s,
            "thresholds {:.9} {:.9} {:.9} {:.9}",
            c.theta_topic, c.theta_reason, c.theta_merge, c.theta_split
        );
        let _ = writeln!(s, "counters {} {} {}", self.next_topic, self.next_partition, self.ops);
        for (peer, n) in &self.version_vector {
            let _ = writeln!(s, "peer {} {n}", json(peer));
        }
        for t in &self.topics {
            let _ = writeln!(s, "topic {} {}", t.id, json(&t.label));
            let _ = writeln!(s, "  rep {}", sparse(&t.representative));
            for p in &t.partitions {
                let _ = writeln!(s, "  partition {} v{}", p.id, p.version);
                let _ = writeln!(s, "    rep {}", sparse(&p.representative));
                for m in &p.members {
                    let _ = writeln!(s, "    member {}", serde_json::to_string(&m.record).expect("records serialize"));
                    let _ = writeln!(s, "      topic_vec {}", sparse(&m.topic_vec));
                    let _ = writeln!(s, "      reason_vec {}", sparse(&m.reason_vec));
                }
            }
        }
        s
    }
}

fn json(s: &str) -> String {
    serde_json::to_string(s).expect("strings serialize")
}

fn sparse(v: &[f64]) -> String {
    let mut s = format!("{}", v.len());
    for (i, x) in v.iter().enumerate() {
        if *x != 0.0 {
            let _ = write!(s, " {i}:{x:.9}");
        }
    }
    s
}

/// Recovers a store from [`RendezvousStore::snapshot`] output. The journal
/// starts empty.
pub fn load_snapshot(text: &str) -> Result<RendezvousStore, KnowledgeError> {
    let err = |line: usize, message: String| KnowledgeError::Snapshot { line, message };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, SNAPSHOT_HEADER)) => {}
        _ => return Err(err(1, "missing header".into())),
    }
    let mut store = RendezvousStore::new(Scope::Local, "", KnowledgeConfig::default());
    let parse_vec = |n: usize, rest: &str| -> Result<Vec<f64>, KnowledgeError> {
        let mut it = rest.split_whitespace();
        let dim: usize = it
            .next()
            .and_then(|d| d.parse().ok())
            .ok_or_else(|| err(n, "bad vector dimension".into()))?;
        let mut v = vec![0.0; dim];
        for e in it {
            let (i, x) = e.split_once(':').ok_or_else(|| err(n, format!("bad entry `{e}`")))?;
            let i: usize = i.parse().map_err(|_| err(n, format!("bad index `{i}`")))?;
            let x: f64 = x.parse().map_err(|_| err(n, format!("bad value `{x}`")))?;
            *v.get_mut(i).ok_or_else(|| err(n, format!("index {i} out of range")))? = x;
        }
        Ok(v)
    };
    let unjson = |n: usize, s: &str| serde_json::from_str::<String>(s).map_err(|e| err(n, e.to_string()));
    for (n, line) in lines {
        if line.is_empty() {
            continue;
        }
        let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
        match key {
            "scope" => {
                store.scope = match rest {
                    "local" => Scope::Local,
                    "global" => Scope::Global,
                    other => return Err(err(n, format!("unknown scope `{other}`"))),
                }
            }
            "owner" => store.owner = unjson(n, rest)?,
            "thresholds" => {
                let v: Vec<f64> = rest.split_whitespace().filter_map(|x| x.parse().ok()).collect();
                if v.len() != 4 {
                    return Err(err(n, "expected four thresholds".into()));
                }
                store.config.theta_topic = v[0];
                store.config.theta_reason = v[1];
                store.config.theta_merge = v[2];
                store.config.theta_split = v[3];
            }
            "counters" => {
                let v: Vec<u64> = rest.split_whitespace().filter_map(|x| x.parse().ok()).collect();
                if v.len() != 3 {
                    return Err(err(n, "expected three counters".into()));
                }
                (store.next_topic, store.next_partition, store.ops) = (v[0], v[1], v[2]);
            }
            "peer" => {
                let (name, count) = rest.rsplit_once(' ').ok_or_else(|| err(n, "bad peer line".into()))?;
                let count = count.parse().map_err(|_| err(n, "bad peer counter".into()))?;
                store.version_vector.insert(unjson(n, name)?, count);
            }
            "topic" => {
                let (id, label) = rest.split_once(' ').ok_or_else(|| err(n, "bad topic line".into()))?;
                store.topics.push(Topic {
                    id: id.parse().map_err(|_| err(n, "bad topic id".into()))?,
                    label: unjson(n, label)?,
                    representative: Vec::new(),
                    partitions: Vec::new(),
                });
            }
            "partition" => {
                let t = store.topics.last_mut().ok_or_else(|| err(n, "partition before topic".into()))?;
                let (id, v) = rest.split_once(" v").ok_or_else(|| err(n, "bad partition line".into()))?;
                t.partitions.push(Partition {
                    id: id.parse().map_err(|_| err(n, "bad partition id".into()))?,
                    representative: Vec::new(),
                    members: Vec::new(),
                    version: v.parse().map_err(|_| err(n, "bad partition version".into()))?,
                });
            }
            "rep" => {
                let v = parse_vec(n, rest)?;
                let t = store.topics.last_mut().ok_or_else(|| err(n, "rep before topic".into()))?;
                match t.partitions.last_mut() {
                    Some(p) => p.representative = v,
                    None => t.representative = v,
                }
            }
            "member" => {
                let record: KnowledgeRecord = serde_json::from_str(rest).map_err(|e| err(n, e.to_string()))?;
                let p = store
                    .topics
                    .last_mut()
                    .and_then(|t| t.partitions.last_mut())
                    .ok_or_else(|| err(n, "member before partition".into()))?;
                p.members.push(Member {
                    record,
                    topic_vec: Vec::new(),
                    reason_vec: Vec::new(),
                });
            }
            "topic_vec" | "reason_vec" => {
                let v = parse_vec(n, rest)?;
                let m = store
                    .topics
                    .last_mut()
                    .and_then(|t| t.partitions.last_mut())
                    .and_then(|p| p.members.last_mut())
                    .ok_or_else(|| err(n, "vector before member".into()))?;
                if key == "topic_vec" {
                    m.topic_vec = v;
                } else {
                    m.reason_vec = v;
                }
            }
            other => return Err(err(n, format!("unknown record `{other}`"))),
        }
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reasoner::HashEmbedder;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rec(id: &str, topic: &str, reason: &str) -> KnowledgeRecord {
        KnowledgeRecord {
            id: id.into(),
            topic: topic.into(),
            reason: reason.into(),
            solution: "restart it".into(),
            source: "n1".into(),
            timestamp: 1.5,
            version: 1,
            supporting: false,
        }
    }

    fn store() -> RendezvousStore {
        RendezvousStore::new(Scope::Local, "n1", KnowledgeConfig::default())
    }

    fn check_invariants(s: &RendezvousStore) {
        let c = &s.config;
        for (i, a) in s.topics().iter().enumerate() {
            assert!(!a.partitions.is_empty());
            for b in &s.topics()[i + 1..] {
                assert!(similarity(&a.representative, &b.representative).unwrap() < c.theta_topic);
            }
            for (j, p) in a.partitions.iter().enumerate() {
                assert!(!p.members.is_empty());
                for q in &a.partitions[j + 1..] {
                    assert!(similarity(&p.representative, &q.representative).unwrap() < c.theta_merge);
                }
            }
        }
    }

    #[test]
    fn embeddings_are_unit_and_disjoint_tokens_orthogonal() {
        let e = HashEmbedder::default();
        let a = e.embed("disk full", EmbedRole::Topic).unwrap();
        assert_eq!(a, e.embed("disk full", EmbedRole::Topic).unwrap());
        assert!((a.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
        let b = e.embed("network partition", EmbedRole::Topic).unwrap();
        assert_eq!(similarity(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn similarity_properties() {
        let v = vec![0.6, 0.8];
        assert!((similarity(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(similarity(&[1.0], &[1.0, 0.0]), Err(KnowledgeError::DimensionMismatch(1, 2)));
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let a: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((similarity(&a, &b).unwrap() - dot / (n(&a) * n(&b))).abs() < 1e-12);
            assert_eq!(similarity(&a, &b).unwrap(), similarity(&b, &a).unwrap());
        }
    }

    #[test]
    fn insert_outcomes() {
        let e = HashEmbedder::default();
        let mut s = store();
        let r = s.insert(rec("a", "disk full", "volume filled up"), &e).unwrap();
        assert!(matches!(r.placement, Placement::NewTopic { .. }));
        let r = s.insert(rec("a", "disk full", "volume filled up"), &e).unwrap();
        assert!(matches!(r.placement, Placement::Reinforced { .. }));
        assert_eq!((s.topic_count(), s.partition_count()), (1, 1));
        let r = s.insert(rec("b", "disk full", "quota exceeded"), &e).unwrap();
        assert!(matches!(r.placement, Placement::NewPartition { .. }));
        assert_eq!(r.similarity_evals, 2);
        assert_eq!((s.topic_count(), s.partition_count()), (1, 2));
        let r = s.insert(rec("c", "auth storm", "password spraying"), &e).unwrap();
        assert!(matches!(r.placement, Placement::NewTopic { .. }));
        check_invariants(&s);
        assert!(s.insert(rec("d", " ", "x"), &e).is_err());
    }

    fn partition_of(members: &[&str]) -> RendezvousStore {
        let e = HashEmbedder::default();
        let mut s = store();
        let t = s.next_topic;
        s.next_topic += 1;
        let ms: Vec<Member> = members
            .iter()
            .enumerate()
            .map(|(i, r)| RendezvousStore::embed_member(rec(&i.to_string(), "topic", r), &e).unwrap())
            .collect();
        let pid = s.new_partition_id();
        s.topics.push(Topic {
            id: t,
            label: "topic".into(),
            representative: Vec::new(),
            partitions: vec![Partition {
                id: pid,
                representative: Vec::new(),
                members: ms,
                version: 1,
            }],
        });
        s.refresh_topic(0);
        s
    }

    #[test]
    fn merging() {
        let mut s = partition_of(&["a b"]);
        assert_eq!(s.merge_partitions(0).unwrap(), 0);
        let e = HashEmbedder::default();
        let dup = RendezvousStore::embed_member(rec("z", "topic", "a b"), &e).unwrap();
        let pid = s.new_partition_id();
        s.topics[0].partitions.push(Partition {
            id: pid,
            representative: dup.reason_vec.clone(),
            members: vec![dup.clone()],
            version: 1,
        });
        assert_eq!(s.merge_partitions(0).unwrap(), 1);
        assert_eq!(s.partition_count(), 1);
        for _ in 0..2 {
            let pid = s.new_partition_id();
            s.topics[0].partitions.push(Partition {
                id: pid,
                representative: dup.reason_vec.clone(),
                members: vec![dup.clone()],
                version: 1,
            });
        }
        assert!(s.merge_partitions(0).unwrap() <= 2);
        check_invariants(&s);
    }

    #[test]
    fn splitting() {
        let mut same = partition_of(&["a b", "a b", "a b"]);
        assert_eq!(divergence(&same.topics[0].partitions[0]), 0.0);
        assert_eq!(same.split_partition(0, 0).unwrap(), 1);
        let mut single = partition_of(&["a b"]);
        assert_eq!(single.split_partition(0, 0).unwrap(), 1);

        let mut two = partition_of(&["disk full volume", "memory leak heap", "disk full volume", "memory leak heap"]);
        assert!(divergence(&two.topics[0].partitions[0]) > 0.6);
        assert_eq!(two.split_partition(0, 0).unwrap(), 2);
        let groups: Vec<Vec<String>> = two.topics[0]
            .partitions
            .iter()
            .map(|p| p.members.iter().map(|m| m.record.reason.clone()).collect())
            .collect();
        assert_eq!(groups[0], vec!["disk full volume"; 2]);
        assert_eq!(groups[1], vec!["memory leak heap"; 2]);
    }

    #[test]
    fn sync_is_idempotent_and_merges_near_duplicates() {
        let e = HashEmbedder::default();
        let mut g = RendezvousStore::new(Scope::Global, "global", KnowledgeConfig::default());
        let empty = store();
        assert!(g.sync_from(&empty, &e).unwrap().is_empty());

        let mut l1 = RendezvousStore::new(Scope::Local, "n1", KnowledgeConfig::default());
        let mut l2 = RendezvousStore::new(Scope::Local, "n2", KnowledgeConfig::default());
        l1.insert(rec("h1", "network instability: link flapping", "link flapping led to heartbeat lost"), &e)
            .unwrap();
        l2.insert(rec("h2", "network instability: link flapping now", "link flapping led to timeouts"), &e)
            .unwrap();
        let r1 = g.sync_from(&l1, &e).unwrap();
        assert_eq!(r1.inserted.len(), 1);
        let before = g.snapshot();
        assert!(g.sync_from(&l1, &e).unwrap().is_empty());
        assert_eq!(g.snapshot(), before);
        g.sync_from(&l2, &e).unwrap();
        assert_eq!(g.topic_count(), 1);
        check_invariants(&g);
        assert_eq!(g.version_vector()["n1"], 1);

        let mut newer = rec("h1", "network instability: link flapping", "a different reason entirely");
        newer.version = 2;
        l1.insert(newer, &e).unwrap();
        let r = g.sync_from(&l1, &e).unwrap();
        assert_eq!(r.replaced, vec!["h1".to_string()]);
        assert_eq!(g.records().find(|r| r.id == "h1").unwrap().version, 2);
        assert_eq!(g.records().filter(|r| r.id == "h1").count(), 1);
    }

    #[test]
    fn sync_from_a_loaded_snapshot_uses_its_records() {
        let e = HashEmbedder::default();
        let mut s = store();
        s.insert(rec("a", "disk full", "volume filled up"), &e).unwrap();
        s.insert(rec("b", "auth storm", "password spraying"), &e).unwrap();
        let loaded = load_snapshot(&s.snapshot()).unwrap();
        let mut g = RendezvousStore::new(Scope::Global, "global", KnowledgeConfig::default());
        assert_eq!(g.sync_from(&loaded, &e).unwrap().inserted.len(), 2);
        assert_eq!(g.record_count(), 2);
    }

    #[test]
    fn snapshot_and_journal_round_trip() {
        let e = HashEmbedder::default();
        let mut s = store();
        s.insert(rec("a", "disk full", "volume filled up"), &e).unwrap();
        s.insert(rec("b", "disk full", "quota exceeded"), &e).unwrap();
        s.insert(rec("c", "auth storm \"x\"", "password spraying"), &e).unwrap();
        s.reorganize().unwrap();
        let snap = s.snapshot();
        assert!(snap.contains(":0.707106781"));
        assert_eq!(load_snapshot(&snap).unwrap().snapshot(), snap);
        let replayed = RendezvousStore::replay(Scope::Local, "n1", KnowledgeConfig::default(), &s.journal_jsonl(), &e).unwrap();
        assert_eq!(replayed.snapshot(), snap);
    }

    proptest! {
        #[test]
        fn random_stores_reach_a_fixed_point(seed in 0u64..100) {
            let words = ["disk", "full", "memory", "leak", "link", "flap", "auth", "storm", "heat", "fan"];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e = HashEmbedder::default();
            let mut s = store();
            for i in 0..rng.random_range(1..15) {
                let pick = |rng: &mut ChaCha8Rng, n: usize| -> String {
                    (0..n).map(|_| words[rng.random_range(0..words.len())]).collect::<Vec<_>>().join(" ")
                };
                let topic = pick(&mut rng, 2);
                let reason = pick(&mut rng, 3);
                s.insert(rec(&i.to_string(), &topic, &reason), &e).unwrap();
            }
            let r = s.reorganize().unwrap();
            prop_assert!(r.converged);
            check_invariants(&s);
            let again = s.reorganize().unwrap();
            prop_assert_eq!((again.merges, again.splits), (0, 0));
        }
    }
}
