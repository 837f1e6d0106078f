//! HTTP client for a natural-language preference backend.
//!
//! The backend receives `{"text", "feature_names"}` and answers with
//! `{"statements": [...]}` in the wire form of
//! [`RawStatement`](exagree_core::elicitation::RawStatement). Whatever it
//! returns is re-validated by the caller.

use std::time::Duration;

use exagree_core::elicitation::{PreferenceBackend, RawStatement};
use exagree_core::PreferenceError;
use serde::{Deserialize, Serialize};

pub const ENV_ENDPOINT: &str = "EXAGREE_LLM_ENDPOINT";
pub const ENV_KEY: &str = "EXAGREE_LLM_KEY";
pub const ENV_TIMEOUT_MS: &str = "EXAGREE_LLM_TIMEOUT_MS";

#[derive(Clone, Debug)]
pub struct HttpBackend {
    pub endpoint: String,
    pub key: Option<String>,
    pub timeout: Duration,
    /// Extra attempts after the first one for transport failures and 5xx.
    pub retries: usize,
}

#[derive(Serialize)]
struct Request<'a> {
    text: &'a str,
    feature_names: &'a [String],
}

#[derive(Deserialize)]
struct Reply {
    statements: Vec<RawStatement>,
}

impl HttpBackend {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        Self {
            endpoint: endpoint.into(),
            key: None,
            timeout,
            retries: 2,
        }
    }

    /// Reads the endpoint, key and timeout (default 10 s) from the
    /// environment. `None` when no endpoint is set.
    pub fn from_env() -> Option<Self> {
        let endpoint = std::env::var(ENV_ENDPOINT).ok().filter(|s| !s.is_empty())?;
        let timeout = std::env::var(ENV_TIMEOUT_MS)
            .ok()
            .and_then(|v| v.parse::<u64>().ok())
            .map(Duration::from_millis)
            .unwrap_or(Duration::from_secs(10));
        Some(Self {
            key: std::env::var(ENV_KEY).ok().filter(|s| !s.is_empty()),
            ..Self::new(endpoint, timeout)
        })
    }

    fn attempt(&self, client: &reqwest::blocking::Client, body: &Request<'_>) -> Result<Vec<RawStatement>, (String, bool)> {
        let mut req = client.post(&self.endpoint).json(body);
        if let Some(k) = &self.key {
            req = req.bearer_auth(k);
        }
        let resp = req.send().map_err(|e| (e.to_string(), true))?;
        let status = resp.status();
        if !status.is_success() {
            return Err((format!("backend answered HTTP {}", status.as_u16()), status.is_server_error()));
        }
        resp.json::<Reply>()
            .map(|r| r.statements)
            .map_err(|e| (format!("malformed backend reply: {e}"), false))
    }
}

impl PreferenceBackend for HttpBackend {
    fn elicit(&self, text: &str, feature_names: &[String]) -> Result<Vec<RawStatement>, PreferenceError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(self.timeout)
            .build()
            .map_err(|e| PreferenceError::Backend {
                message: e.to_string(),
                attempts: 0,
            })?;
        let body = Request { text, feature_names };
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(&client, &body) {
                Ok(s) => return Ok(s),
                Err((message, retry)) if !retry || attempts > self.retries => {
                    return Err(PreferenceError::Backend { message, attempts })
                }
                Err(_) => std::thread::sleep(Duration::from_millis(50 * attempts as u64)),
            }
        }
    }
}
