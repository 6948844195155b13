//! Interfaces to the four external model roles.
//!
//! The vision encoder and the captioner are separate roles even when one model
//! serves both: early detection needs pooled image embeddings without any text
//! generation. [`http`] talks to OpenAI-compatible endpoints; the synthetic
//! world supplies deterministic in-process implementations.

mod config;
mod counting;
pub mod http;
pub mod mock;

use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use thiserror::Error;

use crate::detection::EmbeddingVector;
use crate::raster::RasterImage;

pub use config::{ClientConfig, ConfigError, RetryPolicy};
pub use counting::{CallCounts, Counting};

/// Instruction used for every caption query, original and transformed alike.
pub const DEFAULT_INSTRUCTION: &str = "provide a short description of the image";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClientError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("request timed out after {0:?}")]
    Timeout(Duration),
    #[error("server returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("invalid request: {0}")]
    Precondition(String),
    #[error("request of {size} bytes exceeds the configured limit of {limit}")]
    RequestTooLarge { size: usize, limit: usize },
}

impl ClientError {
    /// Transport failures, timeouts, 429 and 5xx responses may succeed on retry.
    pub fn is_retryable(&self) -> bool {
        match self {
            ClientError::Transport(_) | ClientError::Timeout(_) => true,
            ClientError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionRequest {
    pub image: RasterImage,
    pub instruction: String,
}

impl CaptionRequest {
    pub fn new(image: RasterImage, instruction: impl Into<String>) -> Result<Self, ClientError> {
        let instruction = instruction.into();
        if instruction.trim().is_empty() {
            return Err(ClientError::Precondition("instruction is empty".into()));
        }
        Ok(Self { image, instruction })
    }
}

#[async_trait]
pub trait VisionEncoder: Send + Sync {
    /// One pooled embedding per image, in input order.
    async fn encode_image_batch(&self, images: &[RasterImage]) -> Result<Vec<EmbeddingVector>, ClientError>;
}

#[async_trait]
pub trait Captioner: Send + Sync {
    async fn caption(&self, request: &CaptionRequest) -> Result<String, ClientError>;
}

#[async_trait]
pub trait TextEmbedder: Send + Sync {
    async fn embed_text(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ClientError>;
}

#[async_trait]
pub trait LlmClient: Send + Sync {
    async fn complete(&self, prompt: &str) -> Result<String, ClientError>;
}

#[async_trait]
impl<T: VisionEncoder + ?Sized> VisionEncoder for Arc<T> {
    async fn encode_image_batch(&self, images: &[RasterImage]) -> Result<Vec<EmbeddingVector>, ClientError> {
        (**self).encode_image_batch(images).await
    }
}

#[async_trait]
impl<T: Captioner + ?Sized> Captioner for Arc<T> {
    async fn caption(&self, request: &CaptionRequest) -> Result<String, ClientError> {
        (**self).caption(request).await
    }
}

#[async_trait]
impl<T: TextEmbedder + ?Sized> TextEmbedder for Arc<T> {
    async fn embed_text(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ClientError> {
        (**self).embed_text(texts).await
    }
}

#[async_trait]
impl<T: LlmClient + ?Sized> LlmClient for Arc<T> {
    async fn complete(&self, prompt: &str) -> Result<String, ClientError> {
        (**self).complete(prompt).await
    }
}

/// The full set of model roles a pipeline needs.
#[derive(Clone)]
pub struct Clients {
    pub encoder: Arc<dyn VisionEncoder>,
    pub captioner: Arc<dyn Captioner>,
    pub embedder: Arc<dyn TextEmbedder>,
    pub llm: Arc<dyn LlmClient>,
}

pub(crate) fn check_nonempty_images(images: &[RasterImage]) -> Result<(), ClientError> {
    if images.is_empty() {
        return Err(ClientError::Precondition("image batch is empty".into()));
    }
    Ok(())
}

pub(crate) fn check_texts(texts: &[String]) -> Result<(), ClientError> {
    if texts.is_empty() {
        return Err(ClientError::Precondition("text batch is empty".into()));
    }
    if let Some(i) = texts.iter().position(|t| t.is_empty()) {
        return Err(ClientError::Precondition(format!("text {i} is empty")));
    }
    Ok(())
}

/// Every vector in a batch response must share one dimension.
pub(crate) fn check_uniform_dim(vectors: &[EmbeddingVector]) -> Result<(), ClientError> {
    if let Some(first) = vectors.first() {
        if let Some(bad) = vectors.iter().find(|v| v.dim() != first.dim()) {
            return Err(ClientError::Protocol(format!(
                "embedding dimension mismatch in batch: {} vs {}",
                first.dim(),
                bad.dim()
            )));
        }
    }
    Ok(())
}

/// Runs `op` until it succeeds or the policy gives up. Non-retryable errors
/// return at once. Backoff doubles from `backoff_base`.
pub async fn with_retry<T, F, Fut>(policy: &RetryPolicy, mut op: F) -> Result<T, ClientError>
where
    F: FnMut() -> Fut,
    Fut: std::future::Future<Output = Result<T, ClientError>>,
{
    let mut attempt = 1;
    loop {
        match op().await {
            Ok(v) => return Ok(v),
            Err(e) if e.is_retryable() && attempt < policy.max_attempts => {
                let delay = policy.backoff_base * 2u32.saturating_pow(attempt - 1);
                log::debug!("attempt {attempt} failed ({e}), retrying in {delay:?}");
                tokio::time::sleep(delay).await;
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    fn policy(max_attempts: u32) -> RetryPolicy {
        RetryPolicy {
            max_attempts,
            backoff_base: Duration::from_millis(1),
        }
    }

    #[tokio::test]
    async fn retries_transport_errors_until_success() {
        let calls = AtomicU32::new(0);
        let out = with_retry(&policy(3), || async {
            if calls.fetch_add(1, Ordering::SeqCst) < 2 {
                Err(ClientError::Transport("reset".into()))
            } else {
                Ok(7)
            }
        })
        .await;
        assert_eq!(out, Ok(7));
        assert_eq!(calls.load(Ordering::SeqCst), 3);
    }

    #[tokio::test]
    async fn never_retries_protocol_errors() {
        let calls = AtomicU32::new(0);
        let out: Result<(), _> = with_retry(&policy(5), || async {
            calls.fetch_add(1, Ordering::SeqCst);
            Err(ClientError::Protocol("bad json".into()))
        })
        .await;
        assert!(matches!(out, Err(ClientError::Protocol(_))));
        assert_eq!(calls.load(Ordering::SeqCst), 1);
    }

    #[tokio::test]
    async fn gives_up_after_max_attempts() {
        let calls = AtomicU32::new(0);
        let out: Result<(), _> = with_retry(&policy(2), || async {
            calls.fetch_add(1, Ordering::SeqCst);
            Err(ClientError::Status {
                status: 503,
                body: String::new(),
            })
        })
        .await;
        assert!(out.is_err());
        assert_eq!(calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn retryable_classification() {
        assert!(ClientError::Status {
            status: 429,
            body: String::new()
        }
        .is_retryable());
        assert!(!ClientError::Status {
            status: 400,
            body: String::new()
        }
        .is_retryable());
        assert!(!ClientError::RequestTooLarge { size: 2, limit: 1 }.is_retryable());
    }

    #[test]
    fn empty_instruction_rejected() {
        let img = RasterImage::new(1, 1, vec![0; 3]).unwrap();
        assert!(matches!(
            CaptionRequest::new(img, "  "),
            Err(ClientError::Precondition(_))
        ));
    }
}
