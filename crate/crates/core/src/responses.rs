//! Response sets: one caption for the original image plus one per transformed view.

use futures::future::try_join_all;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clients::{CaptionRequest, Captioner, ClientError, TextEmbedder};
use crate::detection::{response_divergence, DivergenceMatrix, MathError};
use crate::raster::RasterImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseOrigin {
    Original,
    /// Zero-based index into the transform set.
    Transform(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub origin: ResponseOrigin,
    pub text: String,
}

#[derive(Debug, Error, PartialEq)]
pub enum ResponseSetError {
    #[error("a response set needs at least one transform response")]
    NoTransforms,
    #[error("response {0} is empty")]
    EmptyText(usize),
    #[error("response {index} has origin {found:?}, expected {expected:?}")]
    Origin {
        index: usize,
        expected: ResponseOrigin,
        found: ResponseOrigin,
    },
}

/// Ordered responses `r_0..r_K`; `r_0` always comes from the original image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Response>", into = "Vec<Response>")]
pub struct ResponseSet {
    responses: Vec<Response>,
}

impl ResponseSet {
    pub fn new(
        original: impl Into<String>,
        transforms: impl IntoIterator<Item = impl Into<String>>,
    ) -> Result<Self, ResponseSetError> {
        let mut responses = vec![Response {
            origin: ResponseOrigin::Original,
            text: original.into(),
        }];
        responses.extend(transforms.into_iter().enumerate().map(|(k, t)| Response {
            origin: ResponseOrigin::Transform(k),
            text: t.into(),
        }));
        Self::try_from(responses)
    }

    pub fn original(&self) -> &str {
        &self.responses[0].text
    }

    /// Responses from the transformed views, in view order.
    pub fn transforms(&self) -> impl Iterator<Item = &str> {
        self.responses[1..].iter().map(|r| r.text.as_str())
    }

    /// All texts, original first.
    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.responses.iter().map(|r| r.text.as_str())
    }

    pub fn responses(&self) -> &[Response] {
        &self.responses
    }

    pub fn transform_count(&self) -> usize {
        self.responses.len() - 1
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl TryFrom<Vec<Response>> for ResponseSet {
    type Error = ResponseSetError;

    fn try_from(responses: Vec<Response>) -> Result<Self, Self::Error> {
        if responses.len() < 2 {
            return Err(ResponseSetError::NoTransforms);
        }
        for (i, r) in responses.iter().enumerate() {
            let expected = match i {
                0 => ResponseOrigin::Original,
                k => ResponseOrigin::Transform(k - 1),
            };
            if r.origin != expected {
                return Err(ResponseSetError::Origin {
                    index: i,
                    expected,
                    found: r.origin,
                });
            }
            if r.text.trim().is_empty() {
                return Err(ResponseSetError::EmptyText(i));
            }
        }
        Ok(Self { responses })
    }
}

impl From<ResponseSet> for Vec<Response> {
    fn from(set: ResponseSet) -> Self {
        set.responses
    }
}

/// Captions the original and every view independently with the same
/// instruction. Requests run concurrently (the client enforces its own
/// in-flight cap); results keep input order.
pub async fn generate_responses(
    captioner: &dyn Captioner,
    original: &RasterImage,
    views: &[RasterImage],
    instruction: &str,
) -> Result<ResponseSet, ClientError> {
    let requests = std::iter::once(original)
        .chain(views)
        .map(|img| CaptionRequest::new(img.clone(), instruction))
        .collect::<Result<Vec<_>, _>>()?;
    let texts = try_join_all(requests.iter().map(|r| captioner.caption(r))).await?;
    let mut texts = texts.into_iter();
    let first = texts.next().expect("at least the original");
    ResponseSet::new(first, texts).map_err(|e| ClientError::Protocol(e.to_string()))
}

#[derive(Debug, Error)]
pub enum DivergenceError {
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Math(#[from] MathError),
}

/// Embeds the set in one call and computes its KL divergence matrix.
///
/// With `include_original = false`, `r_0` is left out of the matrix.
pub async fn response_set_divergence(
    set: &ResponseSet,
    embedder: &dyn TextEmbedder,
    include_original: bool,
) -> Result<DivergenceMatrix, DivergenceError> {
    let texts: Vec<String> = set
        .texts()
        .skip(if include_original { 0 } else { 1 })
        .map(str::to_owned)
        .collect();
    let vectors = embedder.embed_text(&texts).await?;
    if vectors.len() != texts.len() {
        return Err(ClientError::Protocol(format!(
            "embedded {} texts, got {} vectors",
            texts.len(),
            vectors.len()
        ))
        .into());
    }
    Ok(response_divergence(&vectors)?)
}
