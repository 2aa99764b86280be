use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Backend, BackendKind, CompletionCall, GatewayError};
use crate::prompt::{TokenCountError, TokenCounter};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpConfig {
    /// Full URL of the completion endpoint.
    pub url: String,
    pub model: String,
    /// Optional tokenize endpoint (`{text}` → `{count}`).
    #[serde(default)]
    pub tokenize_url: Option<String>,
    /// Header carrying credentials, e.g. `Authorization`.
    #[serde(default)]
    pub auth_header: Option<String>,
    /// Environment variable holding the header value, kept out of configs
    /// and manifests.
    #[serde(default)]
    pub auth_env: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
}

fn default_timeout_secs() -> f64 {
    60.0
}

fn default_retries() -> u32 {
    3
}

fn default_backoff_ms() -> u64 {
    250
}

impl HttpConfig {
    pub fn new(url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            model: model.into(),
            tokenize_url: None,
            auth_header: None,
            auth_env: None,
            timeout_secs: default_timeout_secs(),
            retries: default_retries(),
            backoff_ms: default_backoff_ms(),
        }
    }
}

#[derive(Serialize)]
struct CompletionBody<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: usize,
    temperature: f64,
}

/// Shared transport: auth, timeout and retry with exponential backoff.
#[derive(Debug, Clone)]
struct Transport {
    client: Client,
    auth: Option<(String, String)>,
    retries: u32,
    backoff: Duration,
}

impl Transport {
    fn new(config: &HttpConfig) -> Result<Self, GatewayError> {
        let client = Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| GatewayError::InvalidParams(e.to_string()))?;
        let auth = match (&config.auth_header, &config.auth_env) {
            (Some(header), Some(var)) => {
                let value = std::env::var(var).map_err(|_| {
                    GatewayError::InvalidParams(format!("environment variable {var} is not set"))
                })?;
                Some((header.clone(), value))
            }
            (None, None) => None,
            _ => {
                return Err(GatewayError::InvalidParams(
                    "auth_header and auth_env must be set together".into(),
                ))
            }
        };
        Ok(Self {
            client,
            auth,
            retries: config.retries,
            backoff: Duration::from_millis(config.backoff_ms),
        })
    }

    fn post_json<T: Serialize>(&self, url: &str, body: &T) -> Result<Value, GatewayError> {
        let mut attempt: u32 = 0;
        loop {
            attempt += 1;
            let mut req = self.client.post(url).json(body);
            if let Some((name, value)) = &self.auth {
                req = req.header(name.as_str(), value.as_str());
            }
            let transient = match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    let text = resp.text().map_err(|e| GatewayError::Transport {
                        attempts: attempt,
                        message: e.to_string(),
                    })?;
                    if status.is_success() {
                        return serde_json::from_str(&text)
                            .map_err(|_| GatewayError::Malformed { body: text });
                    }
                    let err = GatewayError::Status {
                        status: status.as_u16(),
                        body: text,
                    };
                    if !is_retryable(status) {
                        return Err(err);
                    }
                    err
                }
                Err(e) => GatewayError::Transport {
                    attempts: attempt,
                    message: e.to_string(),
                },
            };
            if attempt > self.retries {
                return Err(match transient {
                    GatewayError::Transport { message, .. } => GatewayError::Transport {
                        attempts: attempt,
                        message,
                    },
                    other => other,
                });
            }
            let delay = self.backoff.saturating_mul(1 << (attempt - 1).min(16));
            tracing::warn!(attempt, ?delay, error = %transient, "retrying completion request");
            std::thread::sleep(delay);
        }
    }
}

fn is_retryable(status: StatusCode) -> bool {
    status.is_server_error() || status == StatusCode::TOO_MANY_REQUESTS
}

/// Pulls the completion text out of `{text}` or the common
/// `{choices: [{text}]}` shape.
fn completion_text(value: &Value) -> Option<&str> {
    value
        .get("text")
        .and_then(Value::as_str)
        .or_else(|| value.pointer("/choices/0/text").and_then(Value::as_str))
}

#[derive(Debug, Clone)]
pub struct HttpBackend {
    config: HttpConfig,
    transport: Transport,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, GatewayError> {
        let transport = Transport::new(&config)?;
        Ok(Self { config, transport })
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }

    /// Exact counter backed by the tokenize endpoint, if configured.
    pub fn token_counter(&self) -> Option<HttpTokenCounter> {
        self.config
            .tokenize_url
            .as_ref()
            .map(|url| HttpTokenCounter {
                url: url.clone(),
                transport: self.transport.clone(),
            })
    }
}

impl Backend for HttpBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Http
    }

    fn complete(&self, call: &CompletionCall<'_>) -> Result<String, GatewayError> {
        let body = CompletionBody {
            model: &self.config.model,
            prompt: call.prompt,
            max_tokens: call.max_tokens,
            temperature: 0.0,
        };
        let value = self.transport.post_json(&self.config.url, &body)?;
        completion_text(&value)
            .map(str::to_string)
            .ok_or_else(|| GatewayError::Malformed {
                body: value.to_string(),
            })
    }
}

#[derive(Debug, Clone)]
pub struct HttpTokenCounter {
    url: String,
    transport: Transport,
}

impl HttpTokenCounter {
    pub fn new(url: impl Into<String>, config: &HttpConfig) -> Result<Self, GatewayError> {
        Ok(Self {
            url: url.into(),
            transport: Transport::new(config)?,
        })
    }
}

#[derive(Serialize)]
struct TokenizeBody<'a> {
    text: &'a str,
}

impl TokenCounter for HttpTokenCounter {
    fn count(&self, text: &str) -> Result<usize, TokenCountError> {
        let value = self
            .transport
            .post_json(&self.url, &TokenizeBody { text })
            .map_err(|e| TokenCountError(e.to_string()))?;
        value
            .get("count")
            .and_then(Value::as_u64)
            .map(|c| c as usize)
            .ok_or_else(|| TokenCountError(format!("malformed tokenize response: {value}")))
    }
}
