use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use async_trait::async_trait;

use super::{CaptionRequest, Captioner, ClientError, LlmClient, TextEmbedder, VisionEncoder};
use crate::detection::EmbeddingVector;
use crate::raster::RasterImage;

/// Snapshot of a [`Counting`] wrapper's counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CallCounts {
    /// Number of trait-method invocations.
    pub calls: usize,
    /// Number of images or texts carried across all calls.
    pub items: usize,
    /// Items carried by the most recent call.
    pub last_batch: usize,
}

/// Wraps any client and counts how often it is invoked.
pub struct Counting<T> {
    inner: T,
    calls: AtomicUsize,
    items: AtomicUsize,
    last_batch: AtomicUsize,
}

impl<T> Counting<T> {
    pub fn new(inner: T) -> Arc<Self> {
        Arc::new(Self {
            inner,
            calls: AtomicUsize::new(0),
            items: AtomicUsize::new(0),
            last_batch: AtomicUsize::new(0),
        })
    }

    pub fn counts(&self) -> CallCounts {
        CallCounts {
            calls: self.calls.load(Ordering::SeqCst),
            items: self.items.load(Ordering::SeqCst),
            last_batch: self.last_batch.load(Ordering::SeqCst),
        }
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::SeqCst);
        self.items.store(0, Ordering::SeqCst);
        self.last_batch.store(0, Ordering::SeqCst);
    }

    pub fn inner(&self) -> &T {
        &self.inner
    }

    fn record(&self, items: usize) {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.items.fetch_add(items, Ordering::SeqCst);
        self.last_batch.store(items, Ordering::SeqCst);
    }
}

#[async_trait]
impl<T: VisionEncoder> VisionEncoder for Counting<T> {
    async fn encode_image_batch(&self, images: &[RasterImage]) -> Result<Vec<EmbeddingVector>, ClientError> {
        self.record(images.len());
        self.inner.encode_image_batch(images).await
    }
}

#[async_trait]
impl<T: Captioner> Captioner for Counting<T> {
    async fn caption(&self, request: &CaptionRequest) -> Result<String, ClientError> {
        self.record(1);
        self.inner.caption(request).await
    }
}

#[async_trait]
impl<T: TextEmbedder> TextEmbedder for Counting<T> {
    async fn embed_text(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ClientError> {
        self.record(texts.len());
        self.inner.embed_text(texts).await
    }
}

#[async_trait]
impl<T: LlmClient> LlmClient for Counting<T> {
    async fn complete(&self, prompt: &str) -> Result<String, ClientError> {
        self.record(1);
        self.inner.complete(prompt).await
    }
}
