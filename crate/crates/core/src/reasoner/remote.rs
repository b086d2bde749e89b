//! HTTP backend.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::embed::HashEmbedder;
use super::{wire_request, Backend, Constraints, Payload, ReasonerError, RequestKind, Response};

const SYSTEM_PROMPT: &str = include_str!("../../prompts/system.txt");

fn template(kind: RequestKind) -> &'static str {
    match kind {
        RequestKind::Extract => include_str!("../../prompts/extract.txt"),
        RequestKind::Relation => include_str!("../../prompts/relation.txt"),
        RequestKind::Hypothesize => include_str!("../../prompts/hypothesize.txt"),
        RequestKind::Evaluate => include_str!("../../prompts/evaluate.txt"),
        RequestKind::Embed => "",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemoteMode {
    /// POSTs the wire request and expects a `{kind, payload}` reply.
    #[default]
    Json,
    /// OpenAI-style chat completions. Embeddings are computed locally.
    Chat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteConfig {
    pub endpoint: String,
    /// Environment variable holding a bearer token.
    #[serde(default)]
    pub token_env: Option<String>,
    #[serde(default)]
    pub mode: RemoteMode,
    #[serde(default)]
    pub model: Option<String>,
    /// Seconds per HTTP exchange.
    #[serde(default = "default_timeout")]
    pub timeout: f64,
    /// Extra attempts after a malformed reply.
    #[serde(default = "default_retries")]
    pub retries: u32,
}

fn default_timeout() -> f64 {
    30.0
}

fn default_retries() -> u32 {
    2
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            token_env: None,
            mode: RemoteMode::Json,
            model: None,
            timeout: default_timeout(),
            retries: default_retries(),
        }
    }
}

enum Failure {
    Transport(String),
    Malformed(String),
}

pub struct RemoteBackend {
    config: RemoteConfig,
    agent: ureq::Agent,
    token: Option<String>,
    embedder: HashEmbedder,
}

impl std::fmt::Debug for RemoteBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteBackend").field("config", &self.config).finish()
    }
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Result<Self, ReasonerError> {
        if !(config.timeout.is_finite() && config.timeout > 0.0) {
            return Err(ReasonerError::Unavailable(format!("invalid timeout {}", config.timeout)));
        }
        let token = match &config.token_env {
            Some(var) => Some(
                std::env::var(var).map_err(|_| ReasonerError::Unavailable(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout)))
            .build()
            .into();
        Ok(Self {
            config,
            agent,
            token,
            embedder: HashEmbedder::default(),
        })
    }

    fn post(&self, body: &Value) -> Result<Value, Failure> {
        let mut req = self.agent.post(&self.config.endpoint).header("Content-Type", "application/json");
        if let Some(t) = &self.token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        let mut resp = req.send(body.to_string()).map_err(|e| Failure::Transport(e.to_string()))?;
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Failure::Transport(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| Failure::Malformed(format!("reply is not JSON: {e}")))
    }

    fn chat_body(&self, payload: &Payload, constraints: &Constraints) -> Value {
        let input = serde_json::to_string_pretty(&wire_request(payload, constraints)["payload"]).expect("payload serializes");
        let user = template(payload.kind()).replace("{input}", &input);
        let mut body = json!({
            "messages": [
                {"role": "system", "content": SYSTEM_PROMPT},
                {"role": "user", "content": user},
            ],
            "temperature": 0,
            "seed": constraints.seed,
            "max_tokens": constraints.max_tokens,
            "response_format": {"type": "json_object"},
        });
        if let Some(m) = &self.config.model {
            body["model"] = json!(m);
        }
        body
    }

    fn attempt(&self, payload: &Payload, constraints: &Constraints) -> Result<Response, Failure> {
        let kind = payload.kind();
        let reply = match self.config.mode {
            RemoteMode::Json => self.post(&wire_request(payload, constraints))?,
            RemoteMode::Chat => {
                let outer = self.post(&self.chat_body(payload, constraints))?;
                let content = outer["choices"][0]["message"]["content"]
                    .as_str()
                    .ok_or_else(|| Failure::Malformed("chat reply has no message content".into()))?;
                let inner: Value = serde_json::from_str(strip_fences(content))
                    .map_err(|e| Failure::Malformed(format!("message content is not JSON: {e}")))?;
                if inner.get("kind").is_some() {
                    inner
                } else {
                    json!({"kind": kind.as_str(), "payload": inner})
                }
            }
        };
        serde_json::from_value(reply).map_err(|e| Failure::Malformed(format!("reply does not fit the schema: {e}")))
    }
}

fn strip_fences(s: &str) -> &str {
    let t = s.trim();
    let t = t.strip_prefix("```json").or_else(|| t.strip_prefix("```")).unwrap_or(t);
    t.strip_suffix("```").unwrap_or(t).trim()
}

impl Backend for RemoteBackend {
    fn id(&self) -> String {
        format!("remote:{}", self.config.endpoint)
    }

    fn is_remote(&self) -> bool {
        true
    }

    fn call(&self, payload: &Payload, constraints: &Constraints) -> Result<Response, ReasonerError> {
        if let (RemoteMode::Chat, Payload::Embed { text, .. }) = (self.config.mode, payload) {
            return Ok(Response::Embed {
                vector: self.embedder.vector(text)?,
            });
        }
        let mut last = String::new();
        for _ in 0..=self.config.retries {
            match self.attempt(payload, constraints) {
                Ok(r) if r.kind() == payload.kind() => return Ok(r),
                Ok(r) => last = format!("expected {} reply, got {}", payload.kind().as_str(), r.kind().as_str()),
                Err(Failure::Malformed(m)) => last = m,
                Err(Failure::Transport(m)) => return Err(ReasonerError::Unavailable(m)),
            }
        }
        Err(ReasonerError::Unavailable(format!(
            "malformed reply after {} attempts: {last}",
            self.config.retries + 1
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reasoner::EmbedRole;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::mpsc;
    use std::thread;

    /// Serves the given bodies, one per connection, and reports each
    /// request body received.
    fn mock(replies: Vec<&'static str>) -> (String, mpsc::Receiver<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for body in replies {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                tx.send(String::from_utf8(buf).unwrap()).unwrap();
                let mut s = stream;
                write!(
                    s,
                    "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                    body.len(),
                    body
                )
                .unwrap();
            }
        });
        (format!("http://{addr}/v1"), rx)
    }

    fn constraints() -> Constraints {
        Constraints { max_tokens: 100, seed: 7 }
    }

    #[test]
    fn json_mode_round_trip() {
        let (url, rx) = mock(vec![r#"{"kind":"embed","payload":{"vector":[0.6,0.8]}}"#]);
        let b = RemoteBackend::new(RemoteConfig::new(url)).unwrap();
        let p = Payload::Embed {
            role: EmbedRole::Topic,
            text: "disk".into(),
        };
        assert_eq!(b.call(&p, &constraints()).unwrap(), Response::Embed { vector: vec![0.6, 0.8] });
        let sent: Value = serde_json::from_str(&rx.recv().unwrap()).unwrap();
        assert_eq!(sent, wire_request(&p, &constraints()));
    }

    #[test]
    fn malformed_replies_are_retried() {
        let (url, _rx) = mock(vec![
            "not json",
            r#"{"kind":"evaluate","payload":{"coherence":1}}"#,
            r#"{"kind":"evaluate","payload":{"coherence":0.5,"safety":1,"utility":1}}"#,
        ]);
        let b = RemoteBackend::new(RemoteConfig::new(url)).unwrap();
        let p = Payload::Evaluate {
            topic: "t".into(),
            reason: "r".into(),
            solution: "s".into(),
            path_len: 1,
            evidence: 1,
        };
        assert!(matches!(b.call(&p, &constraints()).unwrap(), Response::Evaluate { coherence, .. } if coherence == 0.5));
    }

    #[test]
    fn chat_mode_unwraps_message_content() {
        let (url, rx) = mock(vec![
            r#"{"choices":[{"message":{"role":"assistant","content":"```json\n{\"related\":true,\"confidence\":0.9,\"rationale\":\"r\"}\n```"}}]}"#,
        ]);
        let mut cfg = RemoteConfig::new(url);
        cfg.mode = RemoteMode::Chat;
        cfg.model = Some("m".into());
        let b = RemoteBackend::new(cfg).unwrap();
        let e = |id: &str| super::super::EntityDesc {
            id: id.into(),
            kind: crate::diagnosis::VariableKind::Event,
            label: id.into(),
            category: None,
        };
        let r = b
            .call(
                &Payload::Relation {
                    cause: e("a"),
                    effect: e("b"),
                },
                &constraints(),
            )
            .unwrap();
        assert!(matches!(r, Response::Relation { related: true, .. }));
        let sent: Value = serde_json::from_str(&rx.recv().unwrap()).unwrap();
        assert_eq!(sent["model"], "m");
        assert!(sent["messages"][1]["content"].as_str().unwrap().contains("\"cause\""));
    }

    #[test]
    fn unreachable_endpoint_is_unavailable() {
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let mut cfg = RemoteConfig::new(format!("http://127.0.0.1:{port}/"));
        cfg.timeout = 2.0;
        let b = RemoteBackend::new(cfg).unwrap();
        let p = Payload::Embed {
            role: EmbedRole::Topic,
            text: "x".into(),
        };
        assert!(matches!(b.call(&p, &constraints()), Err(ReasonerError::Unavailable(_))));
    }
}
