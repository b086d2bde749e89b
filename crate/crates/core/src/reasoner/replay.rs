//! Replays a recorded transcript.

use std::sync::Mutex;

use super::{wire_request, Backend, Constraints, Payload, ReasonerError, Response, Transcript};

/// Answers requests from a transcript, in order. A request that differs
/// from the recorded one is a schema violation.
#[derive(Debug)]
pub struct ReplayBackend {
    transcript: Transcript,
    cursor: Mutex<usize>,
}

impl ReplayBackend {
    pub fn new(transcript: Transcript) -> Self {
        Self {
            transcript,
            cursor: Mutex::new(0),
        }
    }

    /// Entries not yet consumed.
    pub fn remaining(&self) -> usize {
        let pos = *self.cursor.lock().unwrap_or_else(|p| p.into_inner());
        self.transcript.entries.len().saturating_sub(pos)
    }
}

impl Backend for ReplayBackend {
    fn id(&self) -> String {
        format!("replay:{}", self.transcript.header.backend)
    }

    fn call(&self, payload: &Payload, constraints: &Constraints) -> Result<Response, ReasonerError> {
        let mut cursor = self.cursor.lock().unwrap_or_else(|p| p.into_inner());
        let entry = self
            .transcript
            .entries
            .get(*cursor)
            .ok_or_else(|| ReasonerError::Unavailable("transcript exhausted".into()))?;
        let request = wire_request(payload, constraints);
        if entry.request != request {
            return Err(ReasonerError::SchemaViolation(format!(
                "request {} differs from the recorded one",
                entry.seq
            )));
        }
        *cursor += 1;
        match (&entry.response, &entry.error) {
            (Some(r), _) => Ok(r.clone()),
            (None, Some(e)) => Err(ReasonerError::Unavailable(e.clone())),
            (None, None) => Err(ReasonerError::SchemaViolation(format!("entry {} has no outcome", entry.seq))),
        }
    }
}
