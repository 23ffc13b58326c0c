use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::Stage;
use crate::http::{HttpClient, TransportError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decoding {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for Decoding {
    fn default() -> Self {
        Decoding {
            temperature: 0.0,
            max_tokens: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BackendRequest {
    pub stage: Stage,
    pub work_id: String,
    pub instruction: String,
    pub input: String,
    pub decoding: Decoding,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendResponse {
    pub text: String,
    pub usage: Usage,
}

impl BackendResponse {
    pub fn text(text: impl Into<String>) -> Self {
        BackendResponse {
            text: text.into(),
            usage: Usage::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("backend returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("backend reply has no message content: {0}")]
    BadReply(String),
    #[error("script has no response left for {stage} of work `{work_id}`")]
    ScriptExhausted { stage: Stage, work_id: String },
    #[error("script expected stage {expected} but the pipeline asked for {actual} (work `{work_id}`)")]
    ScriptMismatch {
        expected: Stage,
        actual: Stage,
        work_id: String,
    },
}

/// One synchronous text-in/text-out call. Retries live in the caller.
pub trait Backend: Send + Sync {
    fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError>;
}

impl<F> Backend for F
where
    F: Fn(&BackendRequest) -> Result<BackendResponse, BackendError> + Send + Sync,
{
    fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        self(request)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    /// Entries without a work id are served to any work, in file order.
    #[serde(default)]
    pub work_id: Option<String>,
    pub stage: Stage,
    pub response: String,
}

/// Replays a script of stage responses. Entries bound to a work form that
/// work's own queue, so parallel runs stay deterministic.
#[derive(Debug, Default)]
pub struct ScriptedMock {
    queues: Mutex<BTreeMap<Option<String>, VecDeque<ScriptEntry>>>,
}

impl ScriptedMock {
    pub fn new(entries: impl IntoIterator<Item = ScriptEntry>) -> Self {
        let mut queues: BTreeMap<Option<String>, VecDeque<ScriptEntry>> = BTreeMap::new();
        for e in entries {
            queues.entry(e.work_id.clone()).or_default().push_back(e);
        }
        ScriptedMock {
            queues: Mutex::new(queues),
        }
    }

    pub fn from_jsonl(path: &Path) -> std::io::Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let entry = serde_json::from_str(line).map_err(|e| {
                std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("{}:{}: {e}", path.display(), i + 1),
                )
            })?;
            entries.push(entry);
        }
        Ok(ScriptedMock::new(entries))
    }

    /// Drops the first `n` entries of a work's own queue, for resuming a
    /// script whose earlier responses are already in the work's transcript.
    pub fn skip(&self, work_id: &str, n: usize) {
        let mut queues = self.queues.lock().expect("script lock");
        if let Some(q) = queues.get_mut(&Some(work_id.to_string())) {
            q.drain(..n.min(q.len()));
        }
    }

    pub fn remaining(&self) -> usize {
        self.queues
            .lock()
            .expect("script lock")
            .values()
            .map(VecDeque::len)
            .sum()
    }
}

impl Backend for ScriptedMock {
    fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        let mut queues = self.queues.lock().expect("script lock");
        let own = Some(request.work_id.clone());
        let key = if queues.get(&own).is_some_and(|q| !q.is_empty()) {
            own
        } else {
            None
        };
        let queue = queues
            .get_mut(&key)
            .filter(|q| !q.is_empty())
            .ok_or_else(|| BackendError::ScriptExhausted {
                stage: request.stage,
                work_id: request.work_id.clone(),
            })?;
        let front = queue.front().expect("non-empty queue");
        if front.stage != request.stage {
            return Err(BackendError::ScriptMismatch {
                expected: front.stage,
                actual: request.stage,
                work_id: request.work_id.clone(),
            });
        }
        let entry = queue.pop_front().expect("non-empty queue");
        Ok(BackendResponse::text(entry.response))
    }
}

/// Speaks the chat-completions JSON wire format over any [`HttpClient`].
pub struct ChatCompletionsBackend<C> {
    client: C,
    endpoint: String,
    model: String,
}

impl<C: HttpClient> ChatCompletionsBackend<C> {
    pub fn new(client: C, endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        ChatCompletionsBackend {
            client,
            endpoint: endpoint.into(),
            model: model.into(),
        }
    }

    pub fn request_body(&self, request: &BackendRequest) -> Value {
        json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": request.instruction},
                {"role": "user", "content": request.input},
            ],
            "temperature": request.decoding.temperature,
            "max_tokens": request.decoding.max_tokens,
        })
    }
}

impl<C: HttpClient> Backend for ChatCompletionsBackend<C> {
    fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        let resp = self.client.post_json(&self.endpoint, &self.request_body(request))?;
        if resp.status != 200 {
            return Err(BackendError::Http {
                status: resp.status,
                body: resp.body,
            });
        }
        let v: Value = serde_json::from_str(&resp.body).map_err(|e| BackendError::BadReply(e.to_string()))?;
        let text = v
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| BackendError::BadReply(resp.body.clone()))?;
        let tokens = |k: &str| v.pointer(&format!("/usage/{k}")).and_then(Value::as_u64).unwrap_or(0);
        Ok(BackendResponse {
            text: text.to_string(),
            usage: Usage {
                prompt_tokens: tokens("prompt_tokens"),
                completion_tokens: tokens("completion_tokens"),
            },
        })
    }
}
