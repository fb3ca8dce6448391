//! Text embeddings and cosine similarity.
//!
//! The built-in [`HashedEmbedder`] is a deterministic hashed bag-of-words
//! model: text is lowercased, split on non-alphanumeric characters, and every
//! token is hashed into one of `dim` buckets. [`RemoteEmbedder`] calls an HTTP
//! embedding service and re-normalizes whatever it returns.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const DEFAULT_DIM: usize = 256;
pub const DEFAULT_SEED: u64 = 0x5a79_c0de_2024_0001;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbedError {
    #[error("text has no alphanumeric tokens")]
    EmptyText,
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("zero vector")]
    ZeroVector,
    #[error("embedding provider failed after {attempts} attempts: {message}")]
    ProviderError { attempts: u32, message: String },
}

/// An L2-normalized embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Normalizes `values` to unit length. Fails on an all-zero or non-finite input.
    pub fn normalized(mut values: Vec<f64>) -> Result<Self, EmbedError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::ZeroVector);
        }
        let norm = l2_norm(&values);
        if norm == 0.0 {
            return Err(EmbedError::ZeroVector);
        }
        for v in &mut values {
            *v /= norm;
        }
        Ok(Self(values))
    }

    /// Wraps raw values without normalizing them.
    pub fn from_raw(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }

    /// Short hex digest of the exact bit pattern, used in retrieval traces.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for v in &self.0 {
            hasher.update(v.to_le_bytes());
        }
        hex::encode(&hasher.finalize()[..8])
    }
}

fn l2_norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Cosine similarity clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<f64, EmbedError> {
    if a.dim() != b.dim() {
        return Err(EmbedError::DimensionMismatch { left: a.dim(), right: b.dim() });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(EmbedError::ZeroVector);
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Embedding, EmbedError>;
}

#[derive(Debug, Clone)]
pub struct HashedEmbedder {
    dim: usize,
    seed: u64,
}

impl HashedEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim, seed }
    }

    fn bucket(&self, token: &str) -> usize {
        let mut h = FNV_OFFSET ^ self.seed;
        for b in token.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(FNV_PRIME);
        }
        (h % self.dim as u64) as usize
    }
}

impl Default for HashedEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_DIM, DEFAULT_SEED)
    }
}

impl Embedder for HashedEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Embedding, EmbedError> {
        let mut counts = vec![0.0; self.dim];
        let mut any = false;
        for token in tokenize(text) {
            counts[self.bucket(&token)] += 1.0;
            any = true;
        }
        if !any {
            return Err(EmbedError::EmptyText);
        }
        Embedding::normalized(counts)
    }
}

#[derive(Debug, Clone)]
pub struct RemoteEmbedConfig {
    pub url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub dim: usize,
    pub max_in_flight: usize,
    pub retries: u32,
    pub timeout: Duration,
}

impl RemoteEmbedConfig {
    /// Reads `SAYCOMPLY_EMBED_URL`, `SAYCOMPLY_EMBED_MODEL` and
    /// `SAYCOMPLY_EMBED_API_KEY`. Returns `None` when no URL is set.
    pub fn from_env() -> Option<Self> {
        let url = std::env::var("SAYCOMPLY_EMBED_URL").ok()?;
        Some(Self {
            url,
            model: std::env::var("SAYCOMPLY_EMBED_MODEL").unwrap_or_default(),
            api_key: std::env::var("SAYCOMPLY_EMBED_API_KEY").ok(),
            dim: DEFAULT_DIM,
            max_in_flight: 4,
            retries: 3,
            timeout: Duration::from_secs(30),
        })
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    input: Vec<&'a str>,
    #[serde(skip_serializing_if = "str::is_empty")]
    model: &'a str,
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

/// Counting semaphore bounding in-flight requests.
struct Permits {
    free: Mutex<usize>,
    cond: Condvar,
}

impl Permits {
    fn acquire(&self) -> PermitGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cond.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        PermitGuard(self)
    }
}

struct PermitGuard<'a>(&'a Permits);

impl Drop for PermitGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cond.notify_one();
    }
}

pub struct RemoteEmbedder {
    config: RemoteEmbedConfig,
    agent: ureq::Agent,
    permits: Permits,
}

impl RemoteEmbedder {
    pub fn new(config: RemoteEmbedConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .build()
            .into();
        let permits = Permits {
            free: Mutex::new(config.max_in_flight.max(1)),
            cond: Condvar::new(),
        };
        Self { config, agent, permits }
    }

    fn request_once(&self, text: &str) -> Result<Vec<f64>, String> {
        let _permit = self.permits.acquire();
        let body = EmbedRequest { input: vec![text], model: &self.config.model };
        let mut req = self.agent.post(&self.config.url);
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| e.to_string())?;
        let parsed: EmbedResponse = resp.body_mut().read_json().map_err(|e| e.to_string())?;
        parsed
            .vectors
            .into_iter()
            .next()
            .ok_or_else(|| "response contained no vectors".to_string())
    }
}

impl Embedder for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn embed(&self, text: &str) -> Result<Embedding, EmbedError> {
        if tokenize(text).next().is_none() {
            return Err(EmbedError::EmptyText);
        }
        let attempts = self.config.retries.max(1);
        let mut last = String::new();
        for attempt in 1..=attempts {
            match self.request_once(text) {
                Ok(values) if values.len() == self.config.dim => {
                    return Embedding::normalized(values);
                }
                Ok(values) => {
                    last = format!("expected dimension {}, got {}", self.config.dim, values.len());
                }
                Err(e) => last = e,
            }
            tracing::warn!(attempt, error = %last, "embedding request failed");
        }
        Err(EmbedError::ProviderError { attempts, message: last })
    }
}
