//! The reasoner seam.
//!
//! Every judgement the healing layers would ask a language model for
//! (entity extraction, causal relations, hypothesis narratives, hypothesis
//! scoring, embeddings) goes through [`Reasoner::dispatch`]. Backends are
//! interchangeable: a deterministic rule-table backend, a replay backend fed
//! from a recorded transcript, and a remote HTTP backend.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::diagnosis::{SubtreeKind, VariableKind};
use crate::logs::Severity;

pub mod embed;
pub mod remote;
pub mod replay;
pub mod scripted;

pub use embed::{Embedder, HashEmbedder, DEFAULT_DIMENSION};
pub use remote::{RemoteBackend, RemoteConfig, RemoteMode};
pub use replay::ReplayBackend;
pub use scripted::{RuleTable, ScriptedBackend};

pub const TRANSCRIPT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReasonerError {
    #[error("reasoner unavailable: {0}")]
    Unavailable(String),
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("budget exceeded: {0}")]
    BudgetExceeded(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    Extract,
    Relation,
    Hypothesize,
    Evaluate,
    Embed,
}

impl RequestKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Extract => "extract",
            Self::Relation => "relation",
            Self::Hypothesize => "hypothesize",
            Self::Evaluate => "evaluate",
            Self::Embed => "embed",
        }
    }
}

/// One log line handed to extraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineRef {
    pub seq: u64,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub severity: Option<Severity>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub fields: BTreeMap<String, String>,
}

/// A diagnostic variable as the reasoner sees it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityDesc {
    pub id: String,
    pub kind: VariableKind,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<SubtreeKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extracted {
    /// Sequence number of the source line.
    pub line: u64,
    pub kind: VariableKind,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<SubtreeKind>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedRole {
    Topic,
    Reason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum Payload {
    Extract {
        lines: Vec<LineRef>,
    },
    Relation {
        cause: EntityDesc,
        effect: EntityDesc,
    },
    Hypothesize {
        node: String,
        path: Vec<EntityDesc>,
        evidence: Vec<String>,
    },
    Evaluate {
        topic: String,
        reason: String,
        solution: String,
        path_len: usize,
        evidence: usize,
    },
    Embed {
        role: EmbedRole,
        text: String,
    },
}

impl Payload {
    pub fn kind(&self) -> RequestKind {
        match self {
            Self::Extract { .. } => RequestKind::Extract,
            Self::Relation { .. } => RequestKind::Relation,
            Self::Hypothesize { .. } => RequestKind::Hypothesize,
            Self::Evaluate { .. } => RequestKind::Evaluate,
            Self::Embed { .. } => RequestKind::Embed,
        }
    }

    /// Rejects payloads that no backend could answer meaningfully.
    pub fn validate(&self) -> Result<(), ReasonerError> {
        let bad = |m: &str| Err(ReasonerError::SchemaViolation(m.to_string()));
        match self {
            Self::Relation { cause, effect } if cause.id == effect.id => bad("relation between a variable and itself"),
            Self::Hypothesize { path, .. } if path.is_empty() => bad("hypothesis over an empty path"),
            Self::Evaluate { topic, reason, solution, .. }
                if topic.trim().is_empty() || reason.trim().is_empty() || solution.trim().is_empty() =>
            {
                bad("evaluation of an incomplete hypothesis")
            }
            Self::Embed { text, .. } if text.trim().is_empty() => bad("embedding of empty text"),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum Response {
    Extract {
        entities: Vec<Extracted>,
    },
    Relation {
        related: bool,
        confidence: f64,
        rationale: String,
    },
    Hypothesize {
        topic: String,
        reason: String,
        solution: String,
    },
    Evaluate {
        coherence: f64,
        safety: f64,
        utility: f64,
    },
    Embed {
        vector: Vec<f64>,
    },
}

impl Response {
    pub fn kind(&self) -> RequestKind {
        match self {
            Self::Extract { .. } => RequestKind::Extract,
            Self::Relation { .. } => RequestKind::Relation,
            Self::Hypothesize { .. } => RequestKind::Hypothesize,
            Self::Evaluate { .. } => RequestKind::Evaluate,
            Self::Embed { .. } => RequestKind::Embed,
        }
    }

    fn validate(&self) -> Result<(), ReasonerError> {
        let finite = |x: f64| x.is_finite();
        match self {
            Self::Relation { confidence, .. } if !finite(*confidence) => {
                Err(ReasonerError::SchemaViolation("non-finite confidence".into()))
            }
            Self::Evaluate {
                coherence,
                safety,
                utility,
            } if ![*coherence, *safety, *utility].into_iter().all(finite) => {
                Err(ReasonerError::SchemaViolation("non-finite score".into()))
            }
            Self::Embed { vector } if vector.is_empty() || !vector.iter().copied().all(finite) => {
                Err(ReasonerError::SchemaViolation("bad embedding vector".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Per-request limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Constraints {
    pub max_tokens: u32,
    pub seed: u64,
}

/// The wire form of a request: `{kind, payload, constraints}`.
pub fn wire_request(payload: &Payload, constraints: &Constraints) -> Value {
    let mut v = serde_json::to_value(payload).expect("payload serializes");
    v.as_object_mut()
        .expect("adjacently tagged enums serialize to objects")
        .insert("constraints".into(), serde_json::to_value(constraints).expect("constraints serialize"));
    v
}

/// A pluggable answer source.
pub trait Backend: Send + Sync {
    /// Short identifier written into transcripts.
    fn id(&self) -> String;

    fn call(&self, payload: &Payload, constraints: &Constraints) -> Result<Response, ReasonerError>;

    /// Whether latency should be taken from the wall clock.
    fn is_remote(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub seq: u64,
    pub request: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<Response>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Seconds charged for this exchange.
    pub latency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptHeader {
    pub transcript: u32,
    pub backend: String,
    pub config_hash: String,
}

/// Append-only record of every exchange.
#[derive(Debug, Clone, PartialEq)]
pub struct Transcript {
    pub header: TranscriptHeader,
    pub entries: Vec<TranscriptEntry>,
}

impl Transcript {
    pub fn to_jsonl(&self) -> String {
        let mut s = serde_json::to_string(&self.header).expect("header serializes");
        s.push('\n');
        for e in &self.entries {
            let _ = writeln!(s, "{}", serde_json::to_string(e).expect("entry serializes"));
        }
        s
    }

    pub fn from_jsonl(text: &str) -> Result<Self, ReasonerError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: TranscriptHeader = lines
            .next()
            .ok_or_else(|| ReasonerError::SchemaViolation("empty transcript".into()))
            .and_then(|l| serde_json::from_str(l).map_err(|e| ReasonerError::SchemaViolation(format!("header: {e}"))))?;
        let entries = lines
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| ReasonerError::SchemaViolation(format!("entry {}: {e}", i + 1)))
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { header, entries })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReasonerOptions {
    /// Simulated seconds charged per call by local backends.
    pub synthetic_latency: f64,
    /// Estimated token ceiling per request (4 bytes per token).
    pub max_tokens: u32,
    /// Ceiling on calls over the reasoner's life; 0 means unlimited.
    pub max_calls: u64,
    pub seed: u64,
}

impl Default for ReasonerOptions {
    fn default() -> Self {
        Self {
            synthetic_latency: 0.0,
            max_tokens: 32_768,
            max_calls: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Default)]
struct Ledger {
    transcript: Vec<TranscriptEntry>,
    latency: f64,
    calls_by_kind: BTreeMap<RequestKind, u64>,
}

/// Dispatches payloads to a backend and records the exchanges.
pub struct Reasoner {
    backend: Box<dyn Backend>,
    options: ReasonerOptions,
    config_hash: String,
    ledger: Mutex<Ledger>,
}

impl std::fmt::Debug for Reasoner {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Reasoner")
            .field("backend", &self.backend.id())
            .field("options", &self.options)
            .finish()
    }
}

impl Reasoner {
    pub fn new(backend: Box<dyn Backend>, options: ReasonerOptions, config_hash: impl Into<String>) -> Self {
        Self {
            backend,
            options,
            config_hash: config_hash.into(),
            ledger: Mutex::new(Ledger::default()),
        }
    }

    /// Scripted backend with the bundled rules and default options.
    pub fn scripted() -> Self {
        Self::new(Box::new(ScriptedBackend::default()), ReasonerOptions::default(), "")
    }

    pub fn backend_id(&self) -> String {
        self.backend.id()
    }

    pub fn options(&self) -> &ReasonerOptions {
        &self.options
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Ledger> {
        self.ledger.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Sends one request. Every exchange, failed or not, is transcribed.
    pub fn dispatch(&self, payload: Payload) -> Result<Response, ReasonerError> {
        payload.validate()?;
        let constraints = Constraints {
            max_tokens: self.options.max_tokens,
            seed: self.options.seed,
        };
        let request = wire_request(&payload, &constraints);
        let estimated = serde_json::to_string(&request).map_or(0, |s| s.len() / 4) as u64;
        let budget_error = {
            let ledger = self.lock();
            let calls = ledger.transcript.len() as u64;
            if self.options.max_calls > 0 && calls >= self.options.max_calls {
                Some(format!("call limit {} reached", self.options.max_calls))
            } else if estimated > u64::from(self.options.max_tokens) {
                Some(format!("request needs ~{estimated} tokens, limit {}", self.options.max_tokens))
            } else {
                None
            }
        };
        if let Some(msg) = budget_error {
            return Err(ReasonerError::BudgetExceeded(msg));
        }

        let started = Instant::now();
        let result = self.backend.call(&payload, &constraints).and_then(|r| {
            r.validate()?;
            if r.kind() != payload.kind() {
                return Err(ReasonerError::SchemaViolation(format!(
                    "expected {} response, got {}",
                    payload.kind().as_str(),
                    r.kind().as_str()
                )));
            }
            Ok(r)
        });
        let latency = if self.backend.is_remote() {
            started.elapsed().as_secs_f64()
        } else {
            self.options.synthetic_latency
        };

        let mut ledger = self.lock();
        let seq = ledger.transcript.len() as u64;
        ledger.latency += latency;
        *ledger.calls_by_kind.entry(payload.kind()).or_default() += 1;
        ledger.transcript.push(TranscriptEntry {
            seq,
            request,
            response: result.as_ref().ok().cloned(),
            error: result.as_ref().err().map(|e| e.to_string()),
            latency,
        });
        result
    }

    /// Seconds charged so far.
    pub fn total_latency(&self) -> f64 {
        self.lock().latency
    }

    pub fn call_count(&self) -> u64 {
        self.lock().transcript.len() as u64
    }

    pub fn calls_by_kind(&self) -> BTreeMap<RequestKind, u64> {
        self.lock().calls_by_kind.clone()
    }

    pub fn transcript(&self) -> Transcript {
        Transcript {
            header: TranscriptHeader {
                transcript: TRANSCRIPT_VERSION,
                backend: self.backend.id(),
                config_hash: self.config_hash.clone(),
            },
            entries: self.lock().transcript.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn relation(a: &str, b: &str) -> Payload {
        Payload::Relation {
            cause: EntityDesc {
                id: "x0".into(),
                kind: VariableKind::ResourceIndicator,
                label: a.into(),
                category: None,
            },
            effect: EntityDesc {
                id: "x1".into(),
                kind: VariableKind::ErrorCode,
                label: b.into(),
                category: None,
            },
        }
    }

    #[test]
    fn wire_format_has_kind_payload_constraints() {
        let v = wire_request(
            &Payload::Embed {
                role: EmbedRole::Topic,
                text: "disk".into(),
            },
            &Constraints { max_tokens: 5, seed: 1 },
        );
        assert_eq!(v["kind"], "embed");
        assert_eq!(v["payload"]["text"], "disk");
        assert_eq!(v["constraints"]["max_tokens"], 5);
    }

    #[test]
    fn dispatch_records_transcript_and_latency() {
        let r = Reasoner::new(
            Box::new(ScriptedBackend::default()),
            ReasonerOptions {
                synthetic_latency: 0.25,
                ..ReasonerOptions::default()
            },
            "abc",
        );
        let resp = r.dispatch(relation("disk full", "write failed")).unwrap();
        assert!(matches!(resp, Response::Relation { related: true, confidence, .. } if confidence == 1.0));
        assert_eq!(r.call_count(), 1);
        assert_eq!(r.total_latency(), 0.25);
        let t = r.transcript();
        assert_eq!(t.header.config_hash, "abc");
        assert_eq!(Transcript::from_jsonl(&t.to_jsonl()).unwrap(), t);
    }

    #[test]
    fn schema_and_budget_errors() {
        let r = Reasoner::scripted();
        assert!(matches!(
            r.dispatch(Payload::Embed {
                role: EmbedRole::Reason,
                text: "  ".into()
            }),
            Err(ReasonerError::SchemaViolation(_))
        ));
        let tight = Reasoner::new(
            Box::new(ScriptedBackend::default()),
            ReasonerOptions {
                max_calls: 1,
                ..ReasonerOptions::default()
            },
            "",
        );
        tight.dispatch(relation("a", "b")).unwrap();
        assert!(matches!(tight.dispatch(relation("a", "b")), Err(ReasonerError::BudgetExceeded(_))));
        let small = Reasoner::new(
            Box::new(ScriptedBackend::default()),
            ReasonerOptions {
                max_tokens: 4,
                ..ReasonerOptions::default()
            },
            "",
        );
        assert!(matches!(small.dispatch(relation("a", "b")), Err(ReasonerError::BudgetExceeded(_))));
    }

    struct WrongKind;
    impl Backend for WrongKind {
        fn id(&self) -> String {
            "wrong".into()
        }
        fn call(&self, _: &Payload, _: &Constraints) -> Result<Response, ReasonerError> {
            Ok(Response::Embed { vector: vec![1.0] })
        }
    }

    #[test]
    fn mismatched_response_kind_is_rejected_and_logged() {
        let r = Reasoner::new(Box::new(WrongKind), ReasonerOptions::default(), "");
        assert!(matches!(r.dispatch(relation("a", "b")), Err(ReasonerError::SchemaViolation(_))));
        let t = r.transcript();
        assert!(t.entries[0].error.is_some());
        assert!(t.entries[0].response.is_none());
    }
}
