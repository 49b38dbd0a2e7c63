use std::collections::HashMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    /// Network failure, timeout, 429 or 5xx; retried.
    #[error("transport: {0}")]
    Transport(String),
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed completion response: {0}")]
    Decode(String),
    #[error("{0} is not set")]
    Config(&'static str),
}

impl ClientError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, ClientError::Transport(_))
    }
}

/// Text completion backend.
pub trait CompletionClient: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String, ClientError>;
}

pub const ENDPOINT_VAR: &str = "COMPLETION_ENDPOINT";
pub const KEY_VAR: &str = "COMPLETION_KEY";

#[derive(Serialize)]
struct CompletionRequest<'a> {
    prompt: &'a str,
    max_tokens: u32,
    temperature: f64,
}

#[derive(Deserialize)]
struct CompletionResponse {
    text: String,
}

/// POSTs `{prompt, max_tokens, temperature}` and reads `{text}`.
pub struct HttpClient {
    agent: ureq::Agent,
    endpoint: String,
    key: Option<String>,
    pub max_tokens: u32,
    pub temperature: f64,
}

impl HttpClient {
    pub fn new(endpoint: impl Into<String>, key: Option<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            agent,
            endpoint: endpoint.into(),
            key,
            max_tokens: 64,
            temperature: 0.0,
        }
    }

    /// Endpoint from `COMPLETION_ENDPOINT`, optional bearer key from `COMPLETION_KEY`.
    pub fn from_env() -> Result<Self, ClientError> {
        let endpoint = std::env::var(ENDPOINT_VAR).map_err(|_| ClientError::Config(ENDPOINT_VAR))?;
        let key = std::env::var(KEY_VAR).ok().filter(|k| !k.is_empty());
        Ok(Self::new(endpoint, key, Duration::from_secs(30)))
    }
}

impl CompletionClient for HttpClient {
    fn complete(&self, prompt: &str) -> Result<String, ClientError> {
        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = &self.key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(CompletionRequest {
                prompt,
                max_tokens: self.max_tokens,
                temperature: self.temperature,
            })
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(ClientError::Transport(format!("HTTP {status}")));
        }
        if status >= 400 {
            let body = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(ClientError::Http { status, body });
        }
        let parsed: CompletionResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| ClientError::Decode(e.to_string()))?;
        Ok(parsed.text)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockEntry {
    pub question: String,
    pub answer: String,
    pub text: String,
}

/// Deterministic client: looks up the pair on the prompt's last line and
/// falls back to a fixed rewrite of the answer.
#[derive(Clone, Debug, Default)]
pub struct MockClient {
    table: HashMap<String, String>,
}

impl MockClient {
    pub fn new(entries: impl IntoIterator<Item = MockEntry>) -> Self {
        Self {
            table: entries
                .into_iter()
                .map(|e| (format!("{} {}", e.question, e.answer), e.text))
                .collect(),
        }
    }

    pub fn parse(json: &str) -> Result<Self, serde_json::Error> {
        Ok(Self::new(serde_json::from_str::<Vec<MockEntry>>(json)?))
    }

    /// Lookup table holding the three prompt examples plus the worked query.
    pub fn examples() -> Self {
        let e = |q: &str, a: &str, t: &str| MockEntry {
            question: q.into(),
            answer: a.into(),
            text: t.into(),
        };
        Self::new([
            e("Is the sky cloudy?", "yes", "Make the sky cloudy"),
            e("Are there any humans visible in the photo?", "yes", "Add some people to the photo"),
            e("Is there a square on the doors?", "yes", "Find a door with a square on top of it"),
            e("What color is the man's tie?", "blue", "Change the color of the tie of the man to be blue"),
        ])
    }

    fn fallback(line: &str) -> String {
        let (q, a) = match line.rfind('?') {
            Some(i) => (line[..=i].trim(), line[i + 1..].trim()),
            None => line.rsplit_once(' ').unwrap_or((line, "")),
        };
        let q = q.trim_end_matches('?').to_lowercase();
        format!("Change the picture so that {q} is answered with {a}")
    }
}

impl CompletionClient for MockClient {
    fn complete(&self, prompt: &str) -> Result<String, ClientError> {
        let last = prompt.lines().last().unwrap_or("");
        let line = last
            .trim_end()
            .strip_suffix('=')
            .map(str::trim_end)
            .and_then(|l| l.strip_prefix('"'))
            .and_then(|l| l.strip_suffix('"'))
            .ok_or_else(|| ClientError::Decode(format!("prompt does not end with a query line: {last:?}")))?;
        Ok(match self.table.get(line) {
            Some(t) => format!(" \"{t}\""),
            None => format!(" \"{}\"", Self::fallback(line)),
        })
    }
}
