//! Text embedding behind a provider contract.
//!
//! Every vector that reaches the index is unit-norm, so L2 distance and cosine
//! similarity order candidates identically: `|u - v|^2 = 2 - 2 u.v`.

use std::hash::Hasher;
use std::time::Duration;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

pub const DEFAULT_DIM: usize = 384;

/// Environment variable holding the remote embedding endpoint URL.
pub const EMBED_URL_ENV: &str = "RTLRAG_EMBED_URL";

#[derive(Debug, thiserror::Error)]
pub enum EmbeddingError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("cannot normalize a zero vector")]
    ZeroVector,
    #[error("vector contains non-finite values")]
    NonFinite,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("embedding provider `{provider}` failed: {message}")]
    Provider {
        provider: String,
        message: String,
        retriable: bool,
    },
    #[error("unknown embedder `{0}` (expected hashed, remote or remote:URL)")]
    UnknownEmbedder(String),
}

impl EmbeddingError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, EmbeddingError::Provider { retriable: true, .. })
    }
}

/// A unit-norm embedding. Stored as `f32`, compared in `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f32>,
}

impl EmbeddingVector {
    /// Wraps already-normalized values, e.g. read back from an index file.
    pub fn from_unit_values(values: Vec<f32>) -> Result<Self, EmbeddingError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite);
        }
        let v = Self { values };
        if (v.norm() - 1.0).abs() > 1e-4 {
            // far from unit: renormalize rather than silently accept
            let raw: Vec<f64> = v.values.iter().map(|&x| f64::from(x)).collect();
            return normalize(&raw);
        }
        Ok(v)
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.values
            .iter()
            .map(|&x| f64::from(x) * f64::from(x))
            .sum::<f64>()
            .sqrt()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| f64::from(a) * f64::from(b))
            .sum()
    }

    pub fn cosine(&self, other: &Self) -> f64 {
        self.dot(other) / (self.norm() * other.norm())
    }
}

/// Scales `raw` to unit Euclidean norm.
pub fn normalize(raw: &[f64]) -> Result<EmbeddingVector, EmbeddingError> {
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(EmbeddingError::NonFinite);
    }
    let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(EmbeddingError::ZeroVector);
    }
    Ok(EmbeddingVector {
        values: raw.iter().map(|x| (x / norm) as f32).collect(),
    })
}

/// Something that maps text to a raw vector of fixed dimension.
///
/// Implementations must be deterministic for a fixed model version: the same
/// text always yields the same vector.
pub trait EmbeddingProvider: Send + Sync {
    fn name(&self) -> &str;

    fn dim(&self) -> usize;

    fn embed_raw(&self, text: &str) -> Result<Vec<f64>, EmbeddingError>;

    fn embed_raw_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
        texts.iter().map(|t| self.embed_raw(t)).collect()
    }
}

fn check_raw(provider: &dyn EmbeddingProvider, raw: Vec<f64>) -> Result<EmbeddingVector, EmbeddingError> {
    if raw.len() != provider.dim() {
        return Err(EmbeddingError::DimMismatch {
            expected: provider.dim(),
            got: raw.len(),
        });
    }
    normalize(&raw)
}

pub fn embed_text(provider: &dyn EmbeddingProvider, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
    if text.is_empty() {
        return Err(EmbeddingError::EmptyText);
    }
    check_raw(provider, provider.embed_raw(text)?)
}

/// Embeds a batch in one provider call, preserving order.
pub fn embed_batch(
    provider: &dyn EmbeddingProvider,
    texts: &[&str],
) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
    if texts.iter().any(|t| t.is_empty()) {
        return Err(EmbeddingError::EmptyText);
    }
    let raw = provider.embed_raw_batch(texts)?;
    if raw.len() != texts.len() {
        return Err(EmbeddingError::Provider {
            provider: provider.name().to_string(),
            message: format!("returned {} vectors for {} texts", raw.len(), texts.len()),
            retriable: false,
        });
    }
    raw.into_iter().map(|r| check_raw(provider, r)).collect()
}

fn fnv64(parts: &[&[u8]]) -> u64 {
    let mut h = FnvHasher::default();
    for p in parts {
        h.write(p);
    }
    h.finish()
}

fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn add_feature(acc: &mut [f64], kind: &[u8], feature: &[u8], weight: f64) {
    let h = fnv64(&[kind, feature]);
    let bucket = (h % acc.len() as u64) as usize;
    let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
    acc[bucket] += sign * weight;
}

/// Raw (unnormalized) hashed n-gram features of `text` folded into `dim` buckets.
///
/// Features are lowercased word unigrams (weight 1), word bigrams (0.5) and
/// character trigrams of each word (0.25), each signed by a hash bit.
pub fn hashed_ngram_features(text: &str, dim: usize) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    let toks = tokens(text);
    for tok in &toks {
        add_feature(&mut acc, b"w", tok.as_bytes(), 1.0);
        let padded: Vec<char> = format!("#{tok}#").chars().collect();
        for tri in padded.windows(3) {
            let s: String = tri.iter().collect();
            add_feature(&mut acc, b"c", s.as_bytes(), 0.25);
        }
    }
    for pair in toks.windows(2) {
        add_feature(&mut acc, b"b", format!("{} {}", pair[0], pair[1]).as_bytes(), 0.5);
    }
    if acc.iter().all(|&x| x == 0.0) {
        // punctuation-only text, or features that cancelled exactly
        let h = fnv64(&[b"r", text.as_bytes()]);
        acc[(h % dim as u64) as usize] = 1.0;
    }
    acc
}

/// Deterministic offline embedding: hashed n-grams, then unit normalization.
pub fn embed_deterministic(text: &str, dim: usize) -> EmbeddingVector {
    assert!(dim > 0, "embedding dimension must be positive");
    normalize(&hashed_ngram_features(text, dim)).expect("hashed features are never all zero")
}

/// Offline provider backed by [`embed_deterministic`]. Needs no model weights.
#[derive(Debug, Clone)]
pub struct HashedNgramEmbedder {
    dim: usize,
}

impl HashedNgramEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }
}

impl Default for HashedNgramEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_DIM)
    }
}

impl EmbeddingProvider for HashedNgramEmbedder {
    fn name(&self) -> &str {
        "hashed-ngram"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_raw(&self, text: &str) -> Result<Vec<f64>, EmbeddingError> {
        Ok(hashed_ngram_features(text, self.dim))
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

/// Adapter over a remote endpoint: `POST {texts: [..]}` -> `{vectors: [[..]]}`.
pub struct RemoteEmbedder {
    endpoint: String,
    dim: usize,
    agent: ureq::Agent,
}

impl RemoteEmbedder {
    pub fn new(endpoint: impl Into<String>, dim: usize) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(120)))
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            dim,
            agent,
        }
    }

    /// Builds the adapter from [`EMBED_URL_ENV`].
    pub fn from_env(dim: usize) -> Option<Self> {
        std::env::var(EMBED_URL_ENV).ok().map(|url| Self::new(url, dim))
    }

    fn provider_err(&self, message: String, retriable: bool) -> EmbeddingError {
        EmbeddingError::Provider {
            provider: format!("remote:{}", self.endpoint),
            message,
            retriable,
        }
    }
}

impl EmbeddingProvider for RemoteEmbedder {
    fn name(&self) -> &str {
        "remote"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_raw(&self, text: &str) -> Result<Vec<f64>, EmbeddingError> {
        let mut out = self.embed_raw_batch(&[text])?;
        Ok(out.pop().unwrap_or_default())
    }

    fn embed_raw_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
        let mut response = self
            .agent
            .post(&self.endpoint)
            .send_json(EmbedRequest { texts })
            .map_err(|e| match e {
                ureq::Error::StatusCode(code) => {
                    self.provider_err(format!("HTTP status {code}"), code == 429 || code >= 500)
                }
                other => self.provider_err(other.to_string(), true),
            })?;
        let body: EmbedResponse = response
            .body_mut()
            .read_json()
            .map_err(|e| self.provider_err(format!("malformed response: {e}"), false))?;
        if body.vectors.len() != texts.len() {
            return Err(self.provider_err(
                format!("returned {} vectors for {} texts", body.vectors.len(), texts.len()),
                false,
            ));
        }
        if let Some(bad) = body.vectors.iter().find(|v| v.len() != self.dim) {
            return Err(EmbeddingError::DimMismatch {
                expected: self.dim,
                got: bad.len(),
            });
        }
        Ok(body.vectors)
    }
}

/// Resolves `hashed`, `remote` (endpoint from [`EMBED_URL_ENV`]) or `remote:URL`.
pub fn embedder_from_spec(spec: &str, dim: usize) -> Result<std::sync::Arc<dyn EmbeddingProvider>, EmbeddingError> {
    let spec = spec.trim();
    match spec {
        "hashed" => Ok(std::sync::Arc::new(HashedNgramEmbedder::new(dim))),
        "remote" => RemoteEmbedder::from_env(dim)
            .map(|e| std::sync::Arc::new(e) as std::sync::Arc<dyn EmbeddingProvider>)
            .ok_or_else(|| EmbeddingError::UnknownEmbedder(format!("remote ({EMBED_URL_ENV} is not set)"))),
        _ => match spec.strip_prefix("remote:") {
            Some(url) if !url.is_empty() => Ok(std::sync::Arc::new(RemoteEmbedder::new(url, dim))),
            _ => Err(EmbeddingError::UnknownEmbedder(spec.to_string())),
        },
    }
}
