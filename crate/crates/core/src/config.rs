//! Run configuration: a TOML file with one section per layer.
//!
//! ```toml
//! [inputs]
//! topology = "topology.txt"
//! scenario = "scenario.txt"
//!
//! [[inputs.datasets]]
//! name = "zk"
//! path = "zookeeper.log"
//! format = "zookeeper"
//! node = "n2"
//!
//! [meta]
//! theta_inh = 0.85
//! ```
//!
//! Unknown keys are rejected. Relative paths resolve against the directory
//! holding the config file.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::containment::ContainmentConfig;
use crate::diagnosis::DiagnosisConfig;
use crate::faults::FailureScenario;
use crate::knowledge::KnowledgeConfig;
use crate::logs::{self, Dialect, LogError, ParseOptions, Parsed, DEFAULT_BASE_YEAR, DEFAULT_WINDOW_SECS};
use crate::metacog::{MetaConfig, MetaError};
use crate::model::{load_topology, DEFAULT_ALPHA, DEFAULT_BANDWIDTH_FLOOR};
use crate::reasoner::{RemoteConfig, ReasonerOptions};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read `{path}`: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Parse(String),
}

/// Log file layouts understood by the ingester.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    /// Cloud Stateless metrics CSV.
    Cloud,
    Zookeeper,
    Hadoop,
    Openssh,
    Bgl,
}

impl DatasetFormat {
    pub fn dialect(self) -> Option<Dialect> {
        match self {
            Self::Cloud => None,
            Self::Zookeeper => Some(Dialect::ZooKeeper),
            Self::Hadoop => Some(Dialect::Hadoop),
            Self::Openssh => Some(Dialect::OpenSsh),
            Self::Bgl => Some(Dialect::Bgl),
        }
    }

    /// Parses raw bytes in this format.
    pub fn parse(self, input: &[u8], base_year: i32) -> Result<Parsed, LogError> {
        match self.dialect() {
            None => logs::parse_cloud_stateless(input),
            Some(d) => Ok(logs::parse_loghub(input, d, &ParseOptions { base_year })),
        }
    }
}

impl std::str::FromStr for DatasetFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "cloud" | "cloud_stateless" | "csv" => Ok(Self::Cloud),
            "zookeeper" => Ok(Self::Zookeeper),
            "hadoop" => Ok(Self::Hadoop),
            "openssh" => Ok(Self::Openssh),
            "bgl" => Ok(Self::Bgl),
            other => Err(format!("unknown dataset format `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: String,
    pub path: PathBuf,
    pub format: DatasetFormat,
    /// Node whose failures read this dataset.
    #[serde(default)]
    pub node: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputsConfig {
    pub topology: Option<PathBuf>,
    pub scenario: Option<PathBuf>,
    pub datasets: Vec<DatasetConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Weight of compute against memory in utilization.
    pub alpha: f64,
    /// Smallest usable link bandwidth.
    pub bandwidth_floor: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            bandwidth_floor: DEFAULT_BANDWIDTH_FLOOR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LogsConfig {
    /// Diagnosis window in seconds.
    pub window: f64,
    /// Year given to syslog timestamps.
    pub base_year: i32,
    /// Lines generated for a failing node with no dataset.
    pub synthetic_lines: usize,
}

impl Default for LogsConfig {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW_SECS,
            base_year: DEFAULT_BASE_YEAR,
            synthetic_lines: 6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Scripted,
    Replay,
    Remote,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Scripted => "scripted",
            Self::Replay => "replay",
            Self::Remote => "remote",
        })
    }
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "scripted" => Ok(Self::Scripted),
            "replay" => Ok(Self::Replay),
            "remote" => Ok(Self::Remote),
            other => Err(format!("unknown backend `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReasonerConfig {
    pub backend: BackendKind,
    /// Rule table for the scripted backend; the bundled table when unset.
    pub rules: Option<PathBuf>,
    /// Transcript read by the replay backend.
    pub transcript: Option<PathBuf>,
    pub synthetic_latency: f64,
    pub max_tokens: u32,
    pub max_calls: u64,
    pub remote: Option<RemoteConfig>,
}

impl Default for ReasonerConfig {
    fn default() -> Self {
        let o = ReasonerOptions::default();
        Self {
            backend: BackendKind::Scripted,
            rules: None,
            transcript: None,
            synthetic_latency: o.synthetic_latency,
            max_tokens: o.max_tokens,
            max_calls: o.max_calls,
            remote: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TelemetryConfig {
    /// Synthetic CPU percent charged per oracle call.
    pub cpu_unit_cost: f64,
}

impl Default for TelemetryConfig {
    fn default() -> Self {
        Self { cpu_unit_cost: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub inputs: InputsConfig,
    pub run: RunConfig,
    pub model: ModelConfig,
    pub logs: LogsConfig,
    pub containment: ContainmentConfig,
    pub diagnosis: DiagnosisConfig,
    pub meta: MetaConfig,
    pub knowledge: KnowledgeConfig,
    pub reasoner: ReasonerConfig,
    pub telemetry: TelemetryConfig,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum FindingKind {
    Parse,
    BadThresholds,
    BadWeights,
    BadParameter,
    MissingInput,
    InvalidInput,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Finding {
    pub kind: FindingKind,
    pub message: String,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {}", self.kind, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
    /// Effective configuration, when the file parsed.
    pub effective: Option<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.findings.is_empty()
    }
}

fn finding(kind: FindingKind, message: impl Into<String>) -> Finding {
    Finding {
        kind,
        message: message.into(),
    }
}

fn in_unit(x: f64) -> bool {
    x.is_finite() && (0.0..=1.0).contains(&x)
}

impl SimConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    /// Reads a config file; relative paths then resolve next to it.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut c = Self::parse(&text)?;
        c.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(c)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// The configuration with every default spelled out.
    pub fn effective(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hash of the effective configuration minus the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.run.out = PathBuf::new();
        hex::encode(Sha256::digest(c.effective().as_bytes()))
    }

    fn parameter_findings(&self) -> Vec<Finding> {
        let mut out = Vec::new();
        match self.meta.validate() {
            Err(MetaError::BadWeights(m)) => out.push(finding(FindingKind::BadWeights, format!("meta.weights: {m}"))),
            Err(e) => out.push(finding(FindingKind::BadThresholds, format!("meta: {e}"))),
            Ok(()) => {}
        }
        let k = &self.knowledge;
        for (name, v) in [
            ("theta_topic", k.theta_topic),
            ("theta_reason", k.theta_reason),
            ("theta_merge", k.theta_merge),
            ("theta_split", k.theta_split),
        ] {
            if !in_unit(v) {
                out.push(finding(FindingKind::BadThresholds, format!("knowledge.{name} = {v} is outside [0, 1]")));
            }
        }
        if k.theta_split >= k.theta_merge {
            out.push(finding(
                FindingKind::BadThresholds,
                format!("knowledge.theta_split {} must be below theta_merge {}", k.theta_split, k.theta_merge),
            ));
        }
        let c = &self.containment;
        if c.k == 0 {
            out.push(finding(FindingKind::BadParameter, "containment.k must be at least 1"));
        }
        if !(c.probe_interval.is_finite() && c.probe_interval > 0.0) {
            out.push(finding(FindingKind::BadParameter, "containment.probe_interval must be positive"));
        }
        if c.timeout.is_some_and(|t| !(t.is_finite() && t > 0.0)) {
            out.push(finding(FindingKind::BadParameter, "containment.timeout must be positive"));
        }
        if c.max_candidates == 0 {
            out.push(finding(FindingKind::BadParameter, "containment.max_candidates must be at least 1"));
        }
        if !in_unit(self.model.alpha) {
            out.push(finding(FindingKind::BadParameter, "model.alpha must lie in [0, 1]"));
        }
        if !(self.model.bandwidth_floor.is_finite() && self.model.bandwidth_floor >= 0.0) {
            out.push(finding(FindingKind::BadParameter, "model.bandwidth_floor must be non-negative"));
        }
        if !(self.logs.window.is_finite() && self.logs.window > 0.0) {
            out.push(finding(FindingKind::BadParameter, "logs.window must be positive"));
        }
        if self.diagnosis.extract_batch == 0 {
            out.push(finding(FindingKind::BadParameter, "diagnosis.extract_batch must be at least 1"));
        }
        if !(self.reasoner.synthetic_latency.is_finite() && self.reasoner.synthetic_latency >= 0.0) {
            out.push(finding(FindingKind::BadParameter, "reasoner.synthetic_latency must be non-negative"));
        }
        if !(self.telemetry.cpu_unit_cost.is_finite() && self.telemetry.cpu_unit_cost >= 0.0) {
            out.push(finding(FindingKind::BadParameter, "telemetry.cpu_unit_cost must be non-negative"));
        }
        out
    }

    fn read_input(&self, key: &str, path: &Path, out: &mut Vec<Finding>) -> Option<Vec<u8>> {
        let full = self.resolve(path);
        match std::fs::read(&full) {
            Ok(b) => Some(b),
            Err(e) => {
                out.push(finding(FindingKind::MissingInput, format!("{key}: {}: {e}", full.display())));
                None
            }
        }
    }

    fn input_findings(&self) -> Vec<Finding> {
        let mut out = Vec::new();
        let mut graph = None;
        match &self.inputs.topology {
            None => out.push(finding(FindingKind::MissingInput, "inputs.topology is not set")),
            Some(p) => {
                if let Some(bytes) = self.read_input("inputs.topology", p, &mut out) {
                    match load_topology(&String::from_utf8_lossy(&bytes), self.model.bandwidth_floor) {
                        Ok(t) => graph = Some(t.graph),
                        Err(e) => out.push(finding(FindingKind::InvalidInput, format!("inputs.topology: {e}"))),
                    }
                }
            }
        }
        match &self.inputs.scenario {
            None => out.push(finding(FindingKind::MissingInput, "inputs.scenario is not set")),
            Some(p) => {
                if let Some(bytes) = self.read_input("inputs.scenario", p, &mut out) {
                    match FailureScenario::parse(&String::from_utf8_lossy(&bytes)) {
                        Ok(s) => {
                            if let Some(g) = &graph {
                                if let Err(e) = s.validate(g) {
                                    out.push(finding(FindingKind::InvalidInput, format!("inputs.scenario: {e}")));
                                }
                            }
                            for (node, reference) in &s.attached_logs {
                                if !self.inputs.datasets.iter().any(|d| &d.name == reference) {
                                    out.push(finding(
                                        FindingKind::MissingInput,
                                        format!("inputs.scenario: node `{node}` references unknown dataset `{reference}`"),
                                    ));
                                }
                            }
                        }
                        Err(e) => out.push(finding(FindingKind::InvalidInput, format!("inputs.scenario: {e}"))),
                    }
                }
            }
        }
        let mut names = std::collections::BTreeSet::new();
        for d in &self.inputs.datasets {
            if !names.insert(&d.name) {
                out.push(finding(FindingKind::InvalidInput, format!("dataset name `{}` is repeated", d.name)));
            }
            let key = format!("inputs.datasets.{}", d.name);
            if let Some(bytes) = self.read_input(&key, &d.path, &mut out) {
                if let Err(e) = d.format.parse(&bytes, self.logs.base_year) {
                    out.push(finding(FindingKind::InvalidInput, format!("{key}: {e}")));
                }
            }
        }
        let r = &self.reasoner;
        if let Some(p) = &r.rules {
            self.read_input("reasoner.rules", p, &mut out);
        }
        match r.backend {
            BackendKind::Scripted => {}
            BackendKind::Replay => match &r.transcript {
                None => out.push(finding(FindingKind::MissingInput, "replay backend needs reasoner.transcript")),
                Some(p) => {
                    self.read_input("reasoner.transcript", p, &mut out);
                }
            },
            BackendKind::Remote => {
                if r.remote.is_none() {
                    out.push(finding(FindingKind::MissingInput, "remote backend needs a [reasoner.remote] section"));
                }
            }
        }
        out
    }

    /// Every static check, without running anything.
    pub fn validate(&self) -> Vec<Finding> {
        let mut f = self.parameter_findings();
        f.extend(self.input_findings());
        f
    }
}

/// Loads and checks a config file. Parse failures become findings.
pub fn validate_file(path: &Path) -> ValidationReport {
    match SimConfig::load(path) {
        Ok(c) => ValidationReport {
            findings: c.validate(),
            effective: Some(c.effective()),
        },
        Err(e) => ValidationReport {
            findings: vec![finding(
                match e {
                    ConfigError::Io { .. } => FindingKind::MissingInput,
                    ConfigError::Parse(_) => FindingKind::Parse,
                },
                e.to_string(),
            )],
            effective: None,
        },
    }
}
