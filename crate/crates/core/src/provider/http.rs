use std::time::Duration;

use serde_json::{json, Value};
use tracing::{debug, warn};

use super::{prompt_hash, CompletionProvider, CompletionRequest, ProviderConfig, ProviderError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportFailure {
    Timeout,
    Connect(String),
}

/// Minimal POST-JSON seam so retry behaviour can be tested without a network.
pub trait Transport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        bearer: &str,
        body: &Value,
        timeout: Duration,
    ) -> Result<HttpResponse, TransportFailure>;
}

pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl ReqwestTransport {
    pub fn new() -> Self {
        Self {
            client: reqwest::blocking::Client::new(),
        }
    }
}

impl Default for ReqwestTransport {
    fn default() -> Self {
        Self::new()
    }
}

impl Transport for ReqwestTransport {
    fn post_json(
        &self,
        url: &str,
        bearer: &str,
        body: &Value,
        timeout: Duration,
    ) -> Result<HttpResponse, TransportFailure> {
        let resp = self
            .client
            .post(url)
            .bearer_auth(bearer)
            .timeout(timeout)
            .json(body)
            .send()
            .map_err(|e| {
                if e.is_timeout() {
                    TransportFailure::Timeout
                } else {
                    TransportFailure::Connect(e.to_string())
                }
            })?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(|e| {
            if e.is_timeout() {
                TransportFailure::Timeout
            } else {
                TransportFailure::Connect(e.to_string())
            }
        })?;
        Ok(HttpResponse { status, body })
    }
}

/// Chat-completion client: one user message per request, bounded retries with
/// exponential backoff on timeouts, connection failures, 429 and 5xx.
pub struct HttpProvider<T: Transport = ReqwestTransport> {
    config: ProviderConfig,
    transport: T,
    api_key: String,
}

impl HttpProvider<ReqwestTransport> {
    /// Resolves the API key from the environment variable named in the config.
    pub fn from_env(config: ProviderConfig) -> Result<Self, ProviderError> {
        let key = std::env::var(&config.api_key_source).map_err(|_| {
            ProviderError::AuthError(format!(
                "environment variable {} is not set",
                config.api_key_source
            ))
        })?;
        Ok(Self::with_transport(config, ReqwestTransport::new(), key))
    }
}

impl<T: Transport> HttpProvider<T> {
    pub fn with_transport(config: ProviderConfig, transport: T, api_key: String) -> Self {
        Self {
            config,
            transport,
            api_key,
        }
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.config
    }

    fn request_body(&self, request: &CompletionRequest) -> Value {
        let mut body = json!({
            "model": self.config.model_for(request.tier),
            "messages": [{"role": "user", "content": request.prompt}],
        });
        if request.purpose.deterministic() {
            body["temperature"] = json!(0);
        }
        body
    }

    fn attempt(&self, url: &str, body: &Value) -> Result<String, Attempt> {
        let resp = match self
            .transport
            .post_json(url, &self.api_key, body, self.config.timeout)
        {
            Ok(r) => r,
            Err(TransportFailure::Timeout) => return Err(Attempt::Transient(ProviderError::Timeout)),
            Err(TransportFailure::Connect(e)) => {
                return Err(Attempt::Transient(ProviderError::TransportError(e)))
            }
        };
        match resp.status {
            200..=299 => extract_content(&resp.body).map_err(Attempt::Fatal),
            401 | 403 => Err(Attempt::Fatal(ProviderError::AuthError(format!(
                "HTTP {}",
                resp.status
            )))),
            429 => Err(Attempt::Transient(ProviderError::RateLimited)),
            408 | 504 => Err(Attempt::Transient(ProviderError::Timeout)),
            500..=599 => Err(Attempt::Transient(ProviderError::TransportError(format!(
                "HTTP {}",
                resp.status
            )))),
            other => Err(Attempt::Fatal(ProviderError::TransportError(format!(
                "HTTP {other}"
            )))),
        }
    }
}

enum Attempt {
    Transient(ProviderError),
    Fatal(ProviderError),
}

fn extract_content(body: &str) -> Result<String, ProviderError> {
    let v: Value = serde_json::from_str(body)
        .map_err(|e| ProviderError::TransportError(format!("invalid response body: {e}")))?;
    v.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(String::from)
        .ok_or_else(|| ProviderError::TransportError("response has no message content".into()))
}

impl<T: Transport> CompletionProvider for HttpProvider<T> {
    fn complete(&self, request: &CompletionRequest) -> Result<String, ProviderError> {
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let body = self.request_body(request);
        let hash = prompt_hash(&request.prompt);
        let mut delay = self.config.backoff_base;
        let mut attempt = 0;
        loop {
            debug!(purpose = %request.purpose, prompt = %hash, attempt, "completion request");
            match self.attempt(&url, &body) {
                Ok(text) => return Ok(text),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Transient(e)) => {
                    if attempt >= self.config.max_retries {
                        return Err(e);
                    }
                    warn!(purpose = %request.purpose, prompt = %hash, error = %e, "retrying completion");
                    if !delay.is_zero() {
                        std::thread::sleep(delay);
                    }
                    delay = delay.saturating_mul(2);
                    attempt += 1;
                }
            }
        }
    }
}
