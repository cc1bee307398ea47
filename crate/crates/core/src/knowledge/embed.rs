use std::collections::HashMap;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};

pub const DEFAULT_DIMENSION: usize = 256;

/// A unit-norm embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector {
    components: Vec<f64>,
}

impl EmbeddingVector {
    /// Normalizes `components` to unit length. Vectors already within 1e-12 of unit
    /// norm are kept bit-for-bit.
    pub fn new(components: Vec<f64>) -> Result<Self> {
        let norm = components.iter().map(|c| c * c).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::EmbeddingBackend("cannot normalize a zero or non-finite vector".into()));
        }
        let components = if (norm - 1.0).abs() <= 1e-12 {
            components
        } else {
            components.into_iter().map(|c| c / norm).collect()
        };
        Ok(Self { components })
    }

    pub fn components(&self) -> &[f64] {
        &self.components
    }

    pub fn dimension(&self) -> usize {
        self.components.len()
    }

    pub fn norm(&self) -> f64 {
        self.components.iter().map(|c| c * c).sum::<f64>().sqrt()
    }
}

impl std::ops::Neg for &EmbeddingVector {
    type Output = EmbeddingVector;

    fn neg(self) -> EmbeddingVector {
        EmbeddingVector {
            components: self.components.iter().map(|c| -c).collect(),
        }
    }
}

/// Cosine similarity of two unit vectors, clamped to [-1, 1].
pub fn cosine(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64> {
    if u.dimension() != v.dimension() {
        return Err(Error::DimensionMismatch {
            left: u.dimension(),
            right: v.dimension(),
        });
    }
    let dot: f64 = u.components.iter().zip(&v.components).map(|(a, b)| a * b).sum();
    Ok(dot.clamp(-1.0, 1.0))
}

#[async_trait]
pub trait Embedder: Send + Sync {
    /// Identifies the embedding space; indexes refuse queries from other providers.
    fn provider_id(&self) -> String;

    async fn embed(&self, text: &str) -> Result<EmbeddingVector>;
}

/// Deterministic local embedding: lowercased character 3-grams hashed (FNV-1a)
/// into `dimension` buckets, then normalized. Texts shorter than three characters
/// count as a single gram.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dimension: usize,
}

impl HashingEmbedder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        Self { dimension }
    }

    pub fn embed_sync(&self, text: &str) -> Result<EmbeddingVector> {
        if text.is_empty() {
            return Err(Error::EmptyText);
        }
        let chars: Vec<char> = text.to_lowercase().chars().collect();
        let mut counts = vec![0.0; self.dimension];
        let mut bump = |gram: &[char]| {
            let gram: String = gram.iter().collect();
            counts[(fnv1a(gram.as_bytes()) % self.dimension as u64) as usize] += 1.0;
        };
        if chars.len() < 3 {
            bump(&chars);
        } else {
            chars.windows(3).for_each(bump);
        }
        EmbeddingVector::new(counts)
    }
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_DIMENSION)
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

#[async_trait]
impl Embedder for HashingEmbedder {
    fn provider_id(&self) -> String {
        format!("hash3-{}", self.dimension)
    }

    async fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        self.embed_sync(text)
    }
}

/// Fixed text-to-vector table with a fallback embedder for unknown texts.
/// Lets tests place entries at exact similarities.
pub struct TableEmbedder {
    table: HashMap<String, EmbeddingVector>,
    fallback: Option<Box<dyn Embedder>>,
    id: String,
}

impl TableEmbedder {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            table: HashMap::new(),
            fallback: None,
            id: id.into(),
        }
    }

    pub fn with(mut self, text: impl Into<String>, vector: EmbeddingVector) -> Self {
        self.table.insert(text.into(), vector);
        self
    }

    pub fn with_fallback(mut self, fallback: impl Embedder + 'static) -> Self {
        self.fallback = Some(Box::new(fallback));
        self
    }
}

#[async_trait]
impl Embedder for TableEmbedder {
    fn provider_id(&self) -> String {
        self.id.clone()
    }

    async fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        if let Some(v) = self.table.get(text) {
            return Ok(v.clone());
        }
        match &self.fallback {
            Some(f) => f.embed(text).await,
            None => Err(Error::EmbeddingBackend(format!("no table vector for {text:?}"))),
        }
    }
}

/// OpenAI-compatible `/embeddings` endpoint.
pub struct RemoteEmbedder {
    api_base: String,
    api_key: String,
    model: String,
    client: reqwest::Client,
}

#[derive(Deserialize)]
struct EmbeddingBody {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

impl RemoteEmbedder {
    pub fn new(api_base: impl Into<String>, api_key: impl Into<String>, model: impl Into<String>) -> Result<Self> {
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .map_err(|e| Error::EmbeddingBackend(e.to_string()))?;
        Ok(Self {
            api_base: api_base.into(),
            api_key: api_key.into(),
            model: model.into(),
            client,
        })
    }
}

#[async_trait]
impl Embedder for RemoteEmbedder {
    fn provider_id(&self) -> String {
        format!("remote:{}", self.model)
    }

    async fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        if text.is_empty() {
            return Err(Error::EmptyText);
        }
        let url = format!("{}/embeddings", self.api_base.trim_end_matches('/'));
        let response = self
            .client
            .post(url)
            .bearer_auth(&self.api_key)
            .json(&json!({"model": self.model, "input": text}))
            .send()
            .await
            .map_err(|e| Error::EmbeddingBackend(e.to_string()))?;
        if !response.status().is_success() {
            return Err(Error::EmbeddingBackend(format!("HTTP {}", response.status())));
        }
        let body: EmbeddingBody = response
            .json()
            .await
            .map_err(|e| Error::EmbeddingBackend(e.to_string()))?;
        let datum = body
            .data
            .into_iter()
            .next()
            .ok_or_else(|| Error::EmbeddingBackend("empty embedding list".into()))?;
        EmbeddingVector::new(datum.embedding)
    }
}
