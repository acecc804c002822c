//! Entity embeddings behind a provider trait, plus cosine similarity.
//!
//! Two providers ship: [`LocalTrigramEmbedder`], a deterministic hashed
//! character-trigram model that needs no network, and [`RemoteEmbedder`],
//! which calls a clinical encoder over HTTP. [`CachedEmbedder`] persists
//! vectors keyed by `(provider_id, text)`.

mod cache;
mod local;
mod remote;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::normalize;

pub use cache::{CachedEmbedder, EmbeddingCache};
pub use local::{LocalTrigramEmbedder, LOCAL_DIMENSION};
pub use remote::RemoteEmbedder;

/// Default clustering and matching threshold.
pub const DEFAULT_TAU: f64 = 0.92;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub provider_id: String,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>, provider_id: impl Into<String>) -> Self {
        Self { values, provider_id: provider_id.into() }
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Cosine similarity, clamped to `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimilarityScore(f64);

impl SimilarityScore {
    pub fn new(value: f64) -> Self {
        Self(value.clamp(-1.0, 1.0))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("text is empty after normalization")]
    EmptyText,
    #[error("embedding provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("invalid provider response: {0}")]
    InvalidResponse(String),
    #[error("embedding cache: {0}")]
    Cache(String),
}

pub trait EmbeddingProvider: Send + Sync {
    fn provider_id(&self) -> &str;

    /// Embeds already-normalized, non-empty texts, one vector per input in
    /// input order.
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbeddingError>;
}

impl<P: EmbeddingProvider + ?Sized> EmbeddingProvider for Box<P> {
    fn provider_id(&self) -> &str {
        (**self).provider_id()
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        (**self).embed_batch(texts)
    }
}

pub fn embed(text: &str, provider: &dyn EmbeddingProvider) -> Result<EmbeddingVector, EmbeddingError> {
    let mut out = embed_all(&[text.to_string()], provider)?;
    Ok(out.remove(0))
}

/// Normalizes and embeds every text. Repeated texts are embedded once.
pub fn embed_all(texts: &[String], provider: &dyn EmbeddingProvider) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
    let normalized: Vec<String> = texts.iter().map(|t| normalize(t)).collect();
    if normalized.iter().any(String::is_empty) {
        return Err(EmbeddingError::EmptyText);
    }
    let mut unique: Vec<String> = normalized.clone();
    unique.sort();
    unique.dedup();
    let vectors = provider.embed_batch(&unique)?;
    if vectors.len() != unique.len() {
        return Err(EmbeddingError::InvalidResponse(format!(
            "{} vectors for {} texts",
            vectors.len(),
            unique.len()
        )));
    }
    if let Some(first) = vectors.first() {
        if let Some(bad) = vectors.iter().find(|v| v.dimension() != first.dimension()) {
            return Err(EmbeddingError::DimensionMismatch { left: first.dimension(), right: bad.dimension() });
        }
    }
    Ok(normalized
        .iter()
        .map(|t| {
            let idx = unique.binary_search(t).expect("text was embedded");
            vectors[idx].clone()
        })
        .collect())
}

/// `dot(a, b) / (|a| |b|)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<SimilarityScore, EmbeddingError> {
    cosine(&a.values, &b.values)
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<SimilarityScore, EmbeddingError> {
    if a.len() != b.len() {
        return Err(EmbeddingError::DimensionMismatch { left: a.len(), right: b.len() });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(EmbeddingError::ZeroVector);
    }
    Ok(SimilarityScore::new(dot / (na * nb)))
}
