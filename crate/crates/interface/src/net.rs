use std::time::Duration;

use conceptpath::http::{HttpClient, HttpResponse, TransportError};
use reqwest::blocking::Client;
use reqwest::header::CONTENT_TYPE;
use serde_json::Value;

/// Blocking client used by the OpenAlex crawler, the KB lookup and the chat
/// backend. Create it outside any async runtime.
#[derive(Clone)]
pub struct BlockingClient {
    inner: Client,
}

impl BlockingClient {
    pub fn new(timeout: Duration) -> anyhow::Result<Self> {
        let inner = Client::builder()
            .timeout(timeout)
            .user_agent(concat!("conceptpath/", env!("CARGO_PKG_VERSION")))
            .build()?;
        Ok(BlockingClient { inner })
    }
}

fn transport(e: reqwest::Error) -> TransportError {
    if e.is_timeout() {
        TransportError::Timeout
    } else {
        TransportError::Network(e.to_string())
    }
}

fn finish(resp: reqwest::blocking::Response) -> Result<HttpResponse, TransportError> {
    let status = resp.status().as_u16();
    let body = resp.text().map_err(transport)?;
    Ok(HttpResponse { status, body })
}

impl HttpClient for BlockingClient {
    fn get(&self, url: &str) -> Result<HttpResponse, TransportError> {
        finish(self.inner.get(url).send().map_err(transport)?)
    }

    fn post_json(&self, url: &str, body: &Value) -> Result<HttpResponse, TransportError> {
        let resp = self
            .inner
            .post(url)
            .header(CONTENT_TYPE, "application/json")
            .body(body.to_string())
            .send()
            .map_err(transport)?;
        finish(resp)
    }
}
