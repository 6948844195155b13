use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::Url;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("timeout must be positive")]
    Timeout,
    #[error("retry policy needs at least one attempt")]
    Attempts,
    #[error("max_in_flight must be at least 1")]
    InFlight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    #[serde(with = "millis", rename = "backoff_base_ms")]
    pub backoff_base: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            backoff_base: Duration::from_millis(250),
        }
    }
}

/// Connection settings for one model endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientConfig {
    /// Base URL of an OpenAI-compatible API, e.g. `https://host/v1`.
    pub endpoint: Url,
    pub model: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default, skip_serializing)]
    pub api_key: Option<String>,
    /// Prompts longer than this many bytes are rejected before sending.
    #[serde(default)]
    pub max_request_bytes: Option<usize>,
    /// Passed through to the endpoint when set.
    #[serde(default)]
    pub temperature: Option<f64>,
    #[serde(default)]
    pub max_tokens: Option<u32>,
}

fn default_timeout() -> f64 {
    60.0
}

fn default_in_flight() -> usize {
    8
}

impl ClientConfig {
    pub fn new(endpoint: Url, model: impl Into<String>) -> Self {
        Self {
            endpoint,
            model: model.into(),
            timeout_secs: default_timeout(),
            max_in_flight: default_in_flight(),
            retry: RetryPolicy::default(),
            api_key: None,
            max_request_bytes: None,
            temperature: None,
            max_tokens: None,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.timeout_secs.is_nan() || self.timeout_secs <= 0.0 {
            return Err(ConfigError::Timeout);
        }
        if self.retry.max_attempts == 0 {
            return Err(ConfigError::Attempts);
        }
        if self.max_in_flight == 0 {
            return Err(ConfigError::InFlight);
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }
}

mod millis {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}
