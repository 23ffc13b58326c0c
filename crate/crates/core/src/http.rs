//! Minimal blocking HTTP abstraction shared by the OpenAlex fetcher and the
//! chat-completions backend, plus a replaying cassette client for tests.

use std::fs;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransportError {
    #[error("network error: {0}")]
    Network(String),
    #[error("request timed out")]
    Timeout,
    #[error("cassette expected request `{expected}` but got `{actual}`")]
    CassetteMismatch { expected: String, actual: String },
    #[error("cassette exhausted at request `{0}`")]
    CassetteExhausted(String),
}

pub trait HttpClient: Send + Sync {
    fn get(&self, url: &str) -> Result<HttpResponse, TransportError>;
    fn post_json(&self, url: &str, body: &Value) -> Result<HttpResponse, TransportError>;
}

/// One recorded exchange. A string body is replayed verbatim; any other JSON
/// value is replayed as its serialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub request_url: String,
    pub status: u16,
    pub body: Value,
}

impl CassetteEntry {
    pub fn body_text(&self) -> String {
        match &self.body {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        }
    }
}

/// Replays an ordered list of exchanges, checking each request URL.
#[derive(Debug)]
pub struct Cassette {
    entries: Vec<CassetteEntry>,
    next: Mutex<usize>,
}

impl Cassette {
    pub fn new(entries: Vec<CassetteEntry>) -> Self {
        Cassette {
            entries,
            next: Mutex::new(0),
        }
    }

    pub fn from_file(path: &Path) -> std::io::Result<Self> {
        let text = fs::read_to_string(path)?;
        let entries = serde_json::from_str(&text).map_err(std::io::Error::other)?;
        Ok(Cassette::new(entries))
    }

    pub fn remaining(&self) -> usize {
        self.entries.len() - *self.next.lock().expect("cassette lock")
    }

    fn replay(&self, url: &str) -> Result<HttpResponse, TransportError> {
        let mut next = self.next.lock().expect("cassette lock");
        let entry = self
            .entries
            .get(*next)
            .ok_or_else(|| TransportError::CassetteExhausted(url.to_string()))?;
        if entry.request_url != url {
            return Err(TransportError::CassetteMismatch {
                expected: entry.request_url.clone(),
                actual: url.to_string(),
            });
        }
        *next += 1;
        Ok(HttpResponse {
            status: entry.status,
            body: entry.body_text(),
        })
    }
}

impl HttpClient for Cassette {
    fn get(&self, url: &str) -> Result<HttpResponse, TransportError> {
        self.replay(url)
    }

    fn post_json(&self, url: &str, _body: &Value) -> Result<HttpResponse, TransportError> {
        self.replay(url)
    }
}

/// Wraps a live client and records every exchange for later replay.
pub struct Recorder<C> {
    inner: C,
    log: Mutex<Vec<CassetteEntry>>,
}

impl<C: HttpClient> Recorder<C> {
    pub fn new(inner: C) -> Self {
        Recorder {
            inner,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn entries(&self) -> Vec<CassetteEntry> {
        self.log.lock().expect("recorder lock").clone()
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(&self.entries()).map_err(std::io::Error::other)?;
        fs::write(path, text)
    }

    fn record(&self, url: &str, resp: &HttpResponse) {
        let body = serde_json::from_str(&resp.body).unwrap_or_else(|_| Value::String(resp.body.clone()));
        self.log.lock().expect("recorder lock").push(CassetteEntry {
            request_url: url.to_string(),
            status: resp.status,
            body,
        });
    }
}

impl<C: HttpClient> HttpClient for Recorder<C> {
    fn get(&self, url: &str) -> Result<HttpResponse, TransportError> {
        let resp = self.inner.get(url)?;
        self.record(url, &resp);
        Ok(resp)
    }

    fn post_json(&self, url: &str, body: &Value) -> Result<HttpResponse, TransportError> {
        let resp = self.inner.post_json(url, body)?;
        self.record(url, &resp);
        Ok(resp)
    }
}
