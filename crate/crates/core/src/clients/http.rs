//! OpenAI-compatible HTTP backend.
//!
//! * Captions and completions: `POST {endpoint}/chat/completions`. Images are
//!   sent as `image_url` content parts holding a base64 PNG data URL.
//! * Text embeddings: `POST {endpoint}/embeddings` with `input` as a list of
//!   strings.
//! * Image embeddings: the same `/embeddings` route with `input` as a list of
//!   PNG data URLs. The server decides which encoder layer supplies the pooled
//!   vector.

use async_trait::async_trait;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Semaphore;

use super::{
    check_nonempty_images, check_texts, check_uniform_dim, with_retry, CaptionRequest, Captioner,
    ClientConfig, ClientError, ConfigError, LlmClient, TextEmbedder, VisionEncoder,
};
use crate::detection::EmbeddingVector;
use crate::raster::RasterImage;

pub struct OpenAiClient {
    config: ClientConfig,
    http: reqwest::Client,
    in_flight: Semaphore,
}

impl std::fmt::Debug for OpenAiClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OpenAiClient")
            .field("endpoint", &self.config.endpoint.as_str())
            .field("model", &self.config.model)
            .finish()
    }
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    temperature: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_tokens: Option<u32>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: &'a [String],
    encoding_format: &'static str,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    #[serde(default)]
    index: Option<usize>,
    embedding: Vec<f64>,
}

pub fn png_data_url(image: &RasterImage) -> Result<String, ClientError> {
    let png = image
        .to_png()
        .map_err(|e| ClientError::Precondition(e.to_string()))?;
    Ok(format!(
        "data:image/png;base64,{}",
        base64::engine::general_purpose::STANDARD.encode(png)
    ))
}

impl OpenAiClient {
    pub fn new(config: ClientConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        let http = reqwest::Client::builder()
            .timeout(config.timeout())
            .build()
            .expect("TLS backend initialization");
        Ok(Self {
            in_flight: Semaphore::new(config.max_in_flight),
            config,
            http,
        })
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    fn url(&self, route: &str) -> String {
        format!("{}/{route}", self.config.endpoint.as_str().trim_end_matches('/'))
    }

    async fn post(&self, route: &str, body: &impl Serialize) -> Result<Value, ClientError> {
        let bytes = serde_json::to_vec(body).map_err(|e| ClientError::Precondition(e.to_string()))?;
        if let Some(limit) = self.config.max_request_bytes {
            if bytes.len() > limit {
                return Err(ClientError::RequestTooLarge {
                    size: bytes.len(),
                    limit,
                });
            }
        }
        let _permit = self
            .in_flight
            .acquire()
            .await
            .map_err(|_| ClientError::Transport("client shut down".into()))?;
        let url = self.url(route);
        with_retry(&self.config.retry, || async {
            let mut req = self
                .http
                .post(&url)
                .header(reqwest::header::CONTENT_TYPE, "application/json")
                .body(bytes.clone());
            if let Some(key) = &self.config.api_key {
                req = req.bearer_auth(key);
            }
            let resp = req.send().await.map_err(|e| self.transport_error(e))?;
            let status = resp.status();
            let text = resp.text().await.map_err(|e| self.transport_error(e))?;
            if !status.is_success() {
                return Err(ClientError::Status {
                    status: status.as_u16(),
                    body: text,
                });
            }
            serde_json::from_str(&text).map_err(|e| ClientError::Protocol(format!("invalid JSON: {e}")))
        })
        .await
    }

    fn transport_error(&self, e: reqwest::Error) -> ClientError {
        if e.is_timeout() {
            ClientError::Timeout(self.config.timeout())
        } else {
            ClientError::Transport(e.to_string())
        }
    }

    async fn chat(&self, content: Value) -> Result<String, ClientError> {
        let body = ChatRequest {
            model: &self.config.model,
            messages: vec![json!({ "role": "user", "content": content })],
            temperature: self.config.temperature,
            max_tokens: self.config.max_tokens,
        };
        let value = self.post("chat/completions", &body).await?;
        let resp: ChatResponse = serde_json::from_value(value)
            .map_err(|e| ClientError::Protocol(format!("unexpected chat response: {e}")))?;
        let text = resp
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .unwrap_or_default();
        if text.trim().is_empty() {
            return Err(ClientError::Protocol("empty completion".into()));
        }
        Ok(text)
    }

    async fn embeddings(&self, input: &[String]) -> Result<Vec<EmbeddingVector>, ClientError> {
        let body = EmbeddingRequest {
            model: &self.config.model,
            input,
            encoding_format: "float",
        };
        let value = self.post("embeddings", &body).await?;
        let resp: EmbeddingResponse = serde_json::from_value(value)
            .map_err(|e| ClientError::Protocol(format!("unexpected embedding response: {e}")))?;
        if resp.data.len() != input.len() {
            return Err(ClientError::Protocol(format!(
                "asked for {} embeddings, got {}",
                input.len(),
                resp.data.len()
            )));
        }
        let mut slots: Vec<Option<EmbeddingVector>> = vec![None; input.len()];
        for (pos, datum) in resp.data.into_iter().enumerate() {
            let i = datum.index.unwrap_or(pos);
            let slot = slots
                .get_mut(i)
                .ok_or_else(|| ClientError::Protocol(format!("embedding index {i} out of range")))?;
            let v = EmbeddingVector::new(datum.embedding)
                .map_err(|e| ClientError::Protocol(format!("embedding {i}: {e}")))?;
            if slot.replace(v).is_some() {
                return Err(ClientError::Protocol(format!("duplicate embedding index {i}")));
            }
        }
        let out: Vec<EmbeddingVector> = slots.into_iter().map(|s| s.expect("all filled")).collect();
        check_uniform_dim(&out)?;
        Ok(out)
    }
}

#[async_trait]
impl VisionEncoder for OpenAiClient {
    async fn encode_image_batch(&self, images: &[RasterImage]) -> Result<Vec<EmbeddingVector>, ClientError> {
        check_nonempty_images(images)?;
        let urls = images.iter().map(png_data_url).collect::<Result<Vec<_>, _>>()?;
        self.embeddings(&urls).await
    }
}

#[async_trait]
impl Captioner for OpenAiClient {
    async fn caption(&self, request: &CaptionRequest) -> Result<String, ClientError> {
        let content = json!([
            { "type": "text", "text": request.instruction },
            { "type": "image_url", "image_url": { "url": png_data_url(&request.image)? } }
        ]);
        self.chat(content).await
    }
}

#[async_trait]
impl TextEmbedder for OpenAiClient {
    async fn embed_text(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ClientError> {
        check_texts(texts)?;
        self.embeddings(texts).await
    }
}

#[async_trait]
impl LlmClient for OpenAiClient {
    async fn complete(&self, prompt: &str) -> Result<String, ClientError> {
        if prompt.trim().is_empty() {
            return Err(ClientError::Precondition("prompt is empty".into()));
        }
        self.chat(Value::String(prompt.to_owned())).await
    }
}
