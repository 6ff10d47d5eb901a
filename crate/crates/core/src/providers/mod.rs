//! Interfaces to the four model capabilities the pipeline depends on:
//! chat completion, text embedding, image generation and image-text scoring.
//!
//! Every capability is a `Send + Sync` trait so one client can serve the
//! pipeline's worker pool. Deterministic offline implementations live in
//! [`mock`]; HTTP backends are provided by the `poempixel` crate.

pub mod config;
pub mod limit;
pub mod mock;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{EndpointConfig, ProviderConfig, ProviderKind};
pub use limit::{Limited, RateLimiter, RetryPolicy};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProviderError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("provider rate limited or unavailable: {0}")]
    Unavailable(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("request rejected: {0}")]
    Validation(String),
    #[error("provider returned an empty response")]
    EmptyResponse,
    #[error("provider contract violated: {0}")]
    Contract(String),
    #[error("image generation failed: {0}")]
    Generation(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("provider not configured: {0}")]
    NotConfigured(String),
}

impl ProviderError {
    /// Only transport-level failures are worth another attempt.
    pub fn is_retryable(&self) -> bool {
        matches!(self, ProviderError::Transport(_) | ProviderError::Unavailable(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system_context: Option<String>,
    pub user_prompt: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ChatRequest {
    /// Temperature 0 with a fixed seed: the reproducible default.
    pub fn new(user_prompt: impl Into<String>) -> Self {
        Self {
            system_context: None,
            user_prompt: user_prompt.into(),
            temperature: 0.0,
            max_output_tokens: 512,
            seed: Some(0),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        if self.user_prompt.trim().is_empty() {
            return Err(ProviderError::InvalidInput("user_prompt is empty".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(ProviderError::InvalidInput("temperature must be >= 0".into()));
        }
        if self.max_output_tokens == 0 {
            return Err(ProviderError::InvalidInput("max_output_tokens must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub model_tag: String,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>, model_tag: impl Into<String>) -> Self {
        Self {
            values,
            model_tag: model_tag.into(),
        }
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * factor).collect(),
            model_tag: self.model_tag.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageParams {
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl Default for ImageParams {
    fn default() -> Self {
        Self {
            width: 1024,
            height: 1024,
            seed: None,
        }
    }
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageArtifact {
    #[serde(skip)]
    pub bytes: Vec<u8>,
    pub width: u32,
    pub height: u32,
    pub provider_tag: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub instruction_text: String,
}

impl std::fmt::Debug for ImageArtifact {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ImageArtifact")
            .field("bytes", &format_args!("<{} bytes>", self.bytes.len()))
            .field("width", &self.width)
            .field("height", &self.height)
            .field("provider_tag", &self.provider_tag)
            .field("seed", &self.seed)
            .field("instruction_text", &self.instruction_text)
            .finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentScore {
    pub itm: f64,
    pub itc: f64,
}

pub trait ChatProvider: Send + Sync {
    fn complete(&self, req: &ChatRequest) -> Result<String, ProviderError>;
    fn model_tag(&self) -> &str;
}

pub trait Embedder: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError>;
    fn model_tag(&self) -> &str;
}

pub trait ImageGenerator: Send + Sync {
    fn generate(&self, instruction: &str, params: &ImageParams)
        -> Result<ImageArtifact, ProviderError>;
    fn provider_tag(&self) -> &str;
}

pub trait AlignmentScorer: Send + Sync {
    fn score(&self, image: &ImageArtifact, text: &str) -> Result<AlignmentScore, ProviderError>;
}

/// Checks the embedding batch contract: one vector per input, all sharing a
/// non-zero dimension.
pub fn check_embedding_batch(
    inputs: usize,
    vectors: &[EmbeddingVector],
) -> Result<(), ProviderError> {
    if vectors.len() != inputs {
        return Err(ProviderError::Contract(format!(
            "expected {inputs} embeddings, got {}",
            vectors.len()
        )));
    }
    if let Some(first) = vectors.first() {
        let dim = first.dimension();
        if dim == 0 {
            return Err(ProviderError::Contract("zero-dimensional embedding".into()));
        }
        if let Some(bad) = vectors.iter().find(|v| v.dimension() != dim) {
            return Err(ProviderError::Contract(format!(
                "embedding dimension mismatch: {} vs {dim}",
                bad.dimension()
            )));
        }
    }
    Ok(())
}

/// The four providers a pipeline run needs.
#[derive(Clone)]
pub struct Providers {
    pub chat: Arc<dyn ChatProvider>,
    pub embedder: Arc<dyn Embedder>,
    pub image: Arc<dyn ImageGenerator>,
    pub scorer: Arc<dyn AlignmentScorer>,
}

impl Providers {
    pub fn mock(seed: u64) -> Self {
        Self {
            chat: Arc::new(mock::MockChat::new(seed)),
            embedder: Arc::new(mock::MockEmbedder::new(seed)),
            image: Arc::new(mock::MockImageGenerator::new()),
            scorer: Arc::new(mock::MockScorer),
        }
    }
}

impl<T: ChatProvider + ?Sized> ChatProvider for Arc<T> {
    fn complete(&self, req: &ChatRequest) -> Result<String, ProviderError> {
        (**self).complete(req)
    }
    fn model_tag(&self) -> &str {
        (**self).model_tag()
    }
}

impl<T: Embedder + ?Sized> Embedder for Arc<T> {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        (**self).embed(texts)
    }
    fn model_tag(&self) -> &str {
        (**self).model_tag()
    }
}

impl<T: ImageGenerator + ?Sized> ImageGenerator for Arc<T> {
    fn generate(
        &self,
        instruction: &str,
        params: &ImageParams,
    ) -> Result<ImageArtifact, ProviderError> {
        (**self).generate(instruction, params)
    }
    fn provider_tag(&self) -> &str {
        (**self).provider_tag()
    }
}

impl<T: AlignmentScorer + ?Sized> AlignmentScorer for Arc<T> {
    fn score(&self, image: &ImageArtifact, text: &str) -> Result<AlignmentScore, ProviderError> {
        (**self).score(image, text)
    }
}
