//! The completion boundary.
//!
//! Everything that talks to a language model goes through [`CompletionProvider`].
//! [`MockProvider`] gives a fully deterministic stand-in; [`HttpProvider`]
//! speaks the hosted chat-completion convention.

mod http;
mod mock;

use std::collections::BTreeMap;
use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::{HttpProvider, HttpResponse, ReqwestTransport, Transport, TransportFailure};
pub use mock::{CallRecord, MockFault, MockProvider};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    /// Higher-reasoning model used only for the initial question batch.
    InitialGeneration,
    Standard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    Generation,
    FollowUp,
    Importance,
    Faithfulness,
    Contradiction,
    Summary,
    Report,
}

impl Purpose {
    pub fn as_str(self) -> &'static str {
        match self {
            Purpose::Generation => "generation",
            Purpose::FollowUp => "follow_up",
            Purpose::Importance => "importance",
            Purpose::Faithfulness => "faithfulness",
            Purpose::Contradiction => "contradiction",
            Purpose::Summary => "summary",
            Purpose::Report => "report",
        }
    }

    /// Validation and rating calls run at temperature 0.
    pub fn deterministic(self) -> bool {
        matches!(
            self,
            Purpose::Importance | Purpose::Faithfulness | Purpose::Contradiction
        )
    }
}

impl fmt::Display for Purpose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompletionRequest {
    pub tier: Tier,
    pub prompt: String,
    pub purpose: Purpose,
}

impl CompletionRequest {
    pub fn new(tier: Tier, purpose: Purpose, prompt: impl Into<String>) -> Self {
        let prompt = prompt.into();
        debug_assert!(!prompt.is_empty(), "completion prompt must not be empty");
        Self {
            tier,
            prompt,
            purpose,
        }
    }

    pub fn standard(purpose: Purpose, prompt: impl Into<String>) -> Self {
        Self::new(Tier::Standard, purpose, prompt)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProviderError {
    #[error("provider rejected the credentials: {0}")]
    AuthError(String),
    #[error("provider request timed out")]
    Timeout,
    #[error("provider rate limit exceeded")]
    RateLimited,
    #[error("transport error: {0}")]
    TransportError(String),
}

impl ProviderError {
    pub fn name(&self) -> &'static str {
        match self {
            ProviderError::AuthError(_) => "AuthError",
            ProviderError::Timeout => "Timeout",
            ProviderError::RateLimited => "RateLimited",
            ProviderError::TransportError(_) => "TransportError",
        }
    }
}

pub trait CompletionProvider: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<String, ProviderError>;
}

impl<P: CompletionProvider + ?Sized> CompletionProvider for std::sync::Arc<P> {
    fn complete(&self, request: &CompletionRequest) -> Result<String, ProviderError> {
        (**self).complete(request)
    }
}

impl<P: CompletionProvider + ?Sized> CompletionProvider for &P {
    fn complete(&self, request: &CompletionRequest) -> Result<String, ProviderError> {
        (**self).complete(request)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub base_url: String,
    /// Name of the environment variable holding the API key.
    pub api_key_source: String,
    pub tier_models: BTreeMap<Tier, String>,
    #[serde(with = "duration_secs")]
    pub timeout: Duration,
    pub max_retries: u32,
    /// Approximate token budget for the dataset section of a prompt.
    pub prompt_budget: usize,
    /// First retry delay; doubles on every further attempt.
    #[serde(with = "duration_millis", rename = "backoff_base_ms")]
    pub backoff_base: Duration,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".to_string(),
            api_key_source: "OPENAI_API_KEY".to_string(),
            tier_models: BTreeMap::from([
                (Tier::InitialGeneration, "o1".to_string()),
                (Tier::Standard, "gpt-4o".to_string()),
            ]),
            timeout: Duration::from_secs(60),
            max_retries: 2,
            prompt_budget: 6_000,
            backoff_base: Duration::from_millis(500),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("no model configured for tier {0:?}")]
    MissingTier(Tier),
    #[error("timeout must be positive")]
    ZeroTimeout,
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for tier in [Tier::InitialGeneration, Tier::Standard] {
            if !self.tier_models.contains_key(&tier) {
                return Err(ConfigError::MissingTier(tier));
            }
        }
        if self.timeout.is_zero() {
            return Err(ConfigError::ZeroTimeout);
        }
        Ok(())
    }

    pub fn model_for(&self, tier: Tier) -> &str {
        self.tier_models
            .get(&tier)
            .map(String::as_str)
            .unwrap_or_default()
    }
}

mod duration_secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_secs())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_secs(u64::deserialize(d)?))
    }
}

mod duration_millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

/// 64-bit FNV-1a. Stable across platforms and releases, unlike `DefaultHasher`.
pub fn stable_hash(parts: &[&[u8]]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for part in parts {
        for b in *part {
            h ^= u64::from(*b);
            h = h.wrapping_mul(PRIME);
        }
        // Separator so ("ab","c") and ("a","bc") differ.
        h ^= 0xff;
        h = h.wrapping_mul(PRIME);
    }
    h
}

/// Prompt fingerprint for audit logs; prompts themselves are never logged.
pub fn prompt_hash(prompt: &str) -> String {
    format!("{:016x}", stable_hash(&[prompt.as_bytes()]))
}
