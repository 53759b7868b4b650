//! Text embeddings and cosine similarity.

use std::time::Duration;

use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbedError {
    #[error("vector has zero norm")]
    ZeroNorm,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("embedding provider failed: {0}")]
    Provider(String),
}

/// A vector with its Euclidean norm computed once.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f64>,
    norm: f64,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, EmbedError> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(EmbedError::ZeroNorm);
        }
        Ok(Self { values, norm })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn dims(&self) -> usize {
        self.values.len()
    }

    pub fn cosine(&self, other: &Self) -> Result<f64, EmbedError> {
        if self.dims() != other.dims() {
            return Err(EmbedError::DimensionMismatch(self.dims(), other.dims()));
        }
        let dot: f64 = self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum();
        Ok(dot / (self.norm * other.norm))
    }
}

/// Cosine of two raw vectors; zero when either has no direction.
pub fn cosine_or_zero(a: &[f64], b: &[f64]) -> f64 {
    match (EmbeddingVector::new(a.to_vec()), EmbeddingVector::new(b.to_vec())) {
        (Ok(a), Ok(b)) => a.cosine(&b).unwrap_or(0.0),
        _ => 0.0,
    }
}

pub trait Embedder: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError>;
}

/// Deterministic character n-gram vectorizer: lowercase, collapse
/// non-alphanumerics to single spaces, pad with one space on each side, and
/// count every n-gram into a hashed bucket.
#[derive(Debug, Clone, Copy)]
pub struct NgramEmbedder {
    pub n: usize,
    pub dims: usize,
}

impl Default for NgramEmbedder {
    fn default() -> Self {
        Self { n: 3, dims: 4096 }
    }
}

/// The canonical text the n-gram vectorizer sees.
pub fn ngram_canonical(text: &str) -> Vec<char> {
    let words: Vec<String> = text
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect();
    format!(" {} ", words.join(" ")).chars().collect()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

impl NgramEmbedder {
    pub fn vector(&self, text: &str) -> Vec<f64> {
        let mut out = vec![0.0; self.dims.max(1)];
        let chars = ngram_canonical(text);
        if chars.len() < self.n || chars.len() <= 2 {
            return out;
        }
        let len = out.len() as u64;
        for gram in chars.windows(self.n) {
            let s: String = gram.iter().collect();
            out[(fnv1a(s.as_bytes()) % len) as usize] += 1.0;
        }
        out
    }
}

impl Embedder for NgramEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError> {
        Ok(texts.iter().map(|t| self.vector(t)).collect())
    }
}

/// OpenAI-compatible `/embeddings` endpoint.
pub struct RemoteEmbedder {
    url: String,
    model: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl RemoteEmbedder {
    pub fn new(url: impl Into<String>, model: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            url: url.into(),
            model: model.into(),
            api_key,
            agent,
        }
    }
}

impl Embedder for RemoteEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError> {
        let mut request = self.agent.post(&self.url);
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = request
            .send_json(json!({ "model": self.model, "input": texts }))
            .map_err(|e| EmbedError::Provider(e.to_string()))?;
        let status = response.status().as_u16();
        let body = response
            .body_mut()
            .read_to_string()
            .map_err(|e| EmbedError::Provider(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(EmbedError::Provider(format!("http {status}: {body}")));
        }
        let value: Value = serde_json::from_str(&body).map_err(|e| EmbedError::Provider(e.to_string()))?;
        let data = value["data"]
            .as_array()
            .ok_or_else(|| EmbedError::Provider("missing data array".into()))?;
        if data.len() != texts.len() {
            return Err(EmbedError::Provider(format!("expected {} embeddings, got {}", texts.len(), data.len())));
        }
        data.iter()
            .map(|item| {
                item["embedding"]
                    .as_array()
                    .and_then(|v| v.iter().map(Value::as_f64).collect::<Option<Vec<_>>>())
                    .ok_or_else(|| EmbedError::Provider("malformed embedding".into()))
            })
            .collect()
    }
}
