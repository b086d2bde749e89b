//! Deterministic rule-table backend.

use std::collections::BTreeMap;

use regex::Regex;
use serde::Deserialize;

use super::embed::HashEmbedder;
use super::{Backend, Constraints, EntityDesc, Extracted, LineRef, Payload, ReasonerError, Response};
use crate::diagnosis::{SubtreeKind, VariableKind};
use crate::logs::Severity;

/// Rule table bundled with the crate.
pub const DEFAULT_RULES: &str = include_str!("../../rules/default.toml");

/// Confidence for relations implied only by shared category.
pub const WEAK_RELATION_CONFIDENCE: f64 = 0.5;

const RISKY_WORDS: [&str; 9] = [
    "delete", "wipe", "format", "disable", "drop", "rm -rf", "kill -9", "reimage", "shut down all",
];
const ACTION_VERBS: [&str; 20] = [
    "restart", "free", "increase", "reroute", "rotate", "block", "drain", "reschedule", "replace", "throttle",
    "scale", "reset", "apply", "roll back", "clear", "raise", "migrate", "isolate", "reconnect", "restore",
];

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntitySpec {
    #[serde(default)]
    dialect: Option<String>,
    pattern: String,
    kind: VariableKind,
    label: String,
    #[serde(default)]
    category: Option<SubtreeKind>,
    #[serde(default)]
    remedy: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetricSpec {
    field: String,
    above: f64,
    kind: VariableKind,
    label: String,
    #[serde(default)]
    category: Option<SubtreeKind>,
    #[serde(default)]
    remedy: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RelationSpec {
    cause: String,
    effect: String,
    #[serde(default = "one")]
    confidence: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RuleFile {
    #[serde(default)]
    entity: Vec<EntitySpec>,
    #[serde(default)]
    metric: Vec<MetricSpec>,
    #[serde(default)]
    relation: Vec<RelationSpec>,
}

#[derive(Debug, Clone)]
struct EntityRule {
    regex: Regex,
    spec: EntitySpec,
}

/// Compiled rules: text patterns, metric thresholds and causal pairs.
#[derive(Debug, Clone)]
pub struct RuleTable {
    entities: Vec<EntityRule>,
    metrics: Vec<MetricSpec>,
    relations: BTreeMap<(String, String), f64>,
    remedies: BTreeMap<String, String>,
}

impl Default for RuleTable {
    fn default() -> Self {
        Self::parse(DEFAULT_RULES).expect("bundled rule table is valid")
    }
}

impl RuleTable {
    pub fn parse(text: &str) -> Result<Self, String> {
        let file: RuleFile = toml::from_str(text).map_err(|e| e.to_string())?;
        let mut remedies = BTreeMap::new();
        let mut entities = Vec::new();
        for spec in file.entity {
            let regex = Regex::new(&format!("(?i){}", spec.pattern)).map_err(|e| format!("`{}`: {e}", spec.pattern))?;
            if let Some(r) = &spec.remedy {
                remedies.entry(spec.label.clone()).or_insert_with(|| r.clone());
            }
            entities.push(EntityRule { regex, spec });
        }
        for m in &file.metric {
            if let Some(r) = &m.remedy {
                remedies.entry(m.label.clone()).or_insert_with(|| r.clone());
            }
        }
        let relations = file
            .relation
            .into_iter()
            .map(|r| ((r.cause, r.effect), r.confidence.clamp(0.0, 1.0)))
            .collect();
        Ok(Self {
            entities,
            metrics: file.metric,
            relations,
            remedies,
        })
    }

    /// Dialects mentioned by entity rules.
    pub fn dialects(&self) -> Vec<String> {
        let mut d: Vec<String> = self.entities.iter().filter_map(|e| e.spec.dialect.clone()).collect();
        d.sort();
        d.dedup();
        d
    }

    pub fn remedy(&self, label: &str) -> Option<&str> {
        self.remedies.get(label).map(String::as_str)
    }

    fn extract_line(&self, line: &LineRef) -> Vec<Extracted> {
        let mut out = Vec::new();
        for m in &self.metrics {
            let hit = line
                .fields
                .get(&m.field)
                .and_then(|v| v.trim().parse::<f64>().ok())
                .is_some_and(|v| v > m.above);
            if hit {
                out.push(Extracted {
                    line: line.seq,
                    kind: m.kind,
                    label: m.label.clone(),
                    category: m.category,
                });
            }
        }
        if !out.is_empty() {
            return out;
        }
        if let Some(rule) = self.entities.iter().find(|r| r.regex.is_match(&line.message)) {
            out.push(Extracted {
                line: line.seq,
                kind: rule.spec.kind,
                label: rule.spec.label.clone(),
                category: rule.spec.category,
            });
        } else if matches!(line.severity, Some(Severity::Error | Severity::Fatal)) {
            out.push(Extracted {
                line: line.seq,
                kind: VariableKind::ErrorCode,
                label: template_label(&line.message),
                category: None,
            });
        }
        out
    }
}

/// Collapses a message into a short template: digits and hex runs become
/// `#`, at most six words.
pub fn template_label(message: &str) -> String {
    let words: Vec<String> = message
        .split_whitespace()
        .map(|w| {
            if w.chars().any(|c| c.is_ascii_digit()) {
                "#".to_string()
            } else {
                w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase()
            }
        })
        .filter(|w| !w.is_empty())
        .take(6)
        .collect();
    if words.is_empty() {
        "unrecognized error".into()
    } else {
        words.join(" ")
    }
}

fn kind_rank(k: VariableKind) -> u8 {
    match k {
        VariableKind::ResourceIndicator => 0,
        VariableKind::Metric => 1,
        VariableKind::Event => 2,
        VariableKind::ErrorCode => 3,
        VariableKind::StateTransition => 4,
    }
}

/// Rule-table answers for every request kind.
#[derive(Debug, Clone, Default)]
pub struct ScriptedBackend {
    pub rules: RuleTable,
    pub embedder: HashEmbedder,
}

impl ScriptedBackend {
    pub fn new(rules: RuleTable, embedder: HashEmbedder) -> Self {
        Self { rules, embedder }
    }

    fn relation(&self, cause: &EntityDesc, effect: &EntityDesc) -> Response {
        if let Some(&confidence) = self.rules.relations.get(&(cause.label.clone(), effect.label.clone())) {
            return Response::Relation {
                related: true,
                confidence,
                rationale: format!("rule: {} causes {}", cause.label, effect.label),
            };
        }
        let same_category = cause.category.is_some() && cause.category == effect.category;
        if same_category && kind_rank(cause.kind) < kind_rank(effect.kind) {
            return Response::Relation {
                related: true,
                confidence: WEAK_RELATION_CONFIDENCE,
                rationale: format!(
                    "same {} class, {} precedes {}",
                    cause.category.map_or("", |c| c.phrase()),
                    cause.label,
                    effect.label
                ),
            };
        }
        Response::Relation {
            related: false,
            confidence: 0.0,
            rationale: "no rule".into(),
        }
    }

    fn hypothesize(&self, path: &[EntityDesc], evidence: &[String]) -> Response {
        let root = &path[0];
        let category = path.iter().rev().find_map(|e| e.category);
        let topic = match category {
            Some(c) => format!("{}: {}", c.phrase(), root.label),
            None => format!("unclassified failure: {}", root.label),
        };
        let chain: Vec<&str> = path.iter().map(|e| e.label.as_str()).collect();
        let mut reason = if chain.len() == 1 {
            format!("{} observed", chain[0])
        } else {
            chain.join(" led to ")
        };
        reason.push_str(&format!(" ({} supporting log lines)", evidence.len()));
        let solution = self
            .rules
            .remedy(&root.label)
            .or_else(|| path.iter().find_map(|e| self.rules.remedy(&e.label)))
            .map(str::to_string)
            .or_else(|| category.map(|c| c.default_remedy().to_string()))
            .unwrap_or_else(|| format!("inspect {} and restart the affected service", root.label));
        Response::Hypothesize { topic, reason, solution }
    }

    fn evaluate(&self, solution: &str, path_len: usize, evidence: usize) -> Response {
        let links = path_len.saturating_sub(1).min(2) as f64;
        let coherence = (0.35 + 0.3 * links + 0.025 * evidence.min(4) as f64).clamp(0.0, 1.0);
        let lower = solution.to_lowercase();
        let safety = if RISKY_WORDS.iter().any(|w| lower.contains(w)) { 0.2 } else { 1.0 };
        let utility = if ACTION_VERBS.iter().any(|v| lower.starts_with(v)) { 1.0 } else { 0.3 };
        Response::Evaluate {
            coherence,
            safety,
            utility,
        }
    }
}

impl Backend for ScriptedBackend {
    fn id(&self) -> String {
        "scripted".into()
    }

    fn call(&self, payload: &Payload, _: &Constraints) -> Result<Response, ReasonerError> {
        Ok(match payload {
            Payload::Extract { lines } => Response::Extract {
                entities: lines.iter().flat_map(|l| self.rules.extract_line(l)).collect(),
            },
            Payload::Relation { cause, effect } => self.relation(cause, effect),
            Payload::Hypothesize { path, evidence, .. } => self.hypothesize(path, evidence),
            Payload::Evaluate {
                solution,
                path_len,
                evidence,
                ..
            } => self.evaluate(solution, *path_len, *evidence),
            Payload::Embed { text, .. } => Response::Embed {
                vector: self.embedder.vector(text)?,
            },
        })
    }
}
