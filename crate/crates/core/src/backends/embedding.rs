//! Sentence and frame embedding backends.
//!
//! Embeddings come back unit-normalized, one vector per input, in input
//! order, with a fixed dimension per backend instance.

use std::time::Duration;

use base64::Engine;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::{BackendConfig, BackendError, EmbeddingVector};

/// Sentence embedding backend.
pub trait TextEmbedder: Send + Sync {
    fn dimension(&self) -> usize;

    /// One unit vector per text, order preserved.
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector<f64>>, BackendError>;
}

/// Frame embedding backend for the video side of the evaluator.
pub trait FrameEmbedder: Send + Sync {
    fn dimension(&self) -> usize;

    /// One unit vector per PNG frame, order preserved.
    fn embed_frames(&self, frames: &[Vec<u8>]) -> Result<Vec<EmbeddingVector<f64>>, BackendError>;
}

fn hashed_unit_vector(payload: &[u8], seed: u64, dim: usize) -> EmbeddingVector<f64> {
    let mut hasher = Sha256::new();
    hasher.update(payload);
    hasher.update(seed.to_le_bytes());
    let digest: [u8; 32] = hasher.finalize().into();
    let mut rng = rand_chacha::ChaCha20Rng::from_seed(digest);
    loop {
        let values: Vec<f64> = (0..dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        if let Ok(v) = EmbeddingVector::new_unit(values) {
            return v;
        }
    }
}

/// Deterministic embedder: each text maps to a hash-seeded point on the unit
/// sphere. Same (text, seed) always yields the same vector.
pub struct MockEmbedder {
    dim: usize,
    seed: u64,
}

impl MockEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }
}

impl TextEmbedder for MockEmbedder {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector<f64>>, BackendError> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if t.trim().is_empty() {
                    return Err(BackendError::EmptyText(i));
                }
                Ok(hashed_unit_vector(t.as_bytes(), self.seed, self.dim))
            })
            .collect()
    }
}

/// Deterministic frame embedder keyed by the PNG bytes.
pub struct MockFrameEmbedder {
    dim: usize,
    seed: u64,
}

impl MockFrameEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }
}

impl FrameEmbedder for MockFrameEmbedder {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed_frames(&self, frames: &[Vec<u8>]) -> Result<Vec<EmbeddingVector<f64>>, BackendError> {
        Ok(frames
            .iter()
            .map(|png| hashed_unit_vector(png, self.seed.wrapping_add(1), self.dim))
            .collect())
    }
}

fn parse_embedding_response(
    value: &Value,
    expected: usize,
    count: usize,
) -> Result<Vec<EmbeddingVector<f64>>, BackendError> {
    let data = value
        .pointer("/data")
        .and_then(Value::as_array)
        .ok_or_else(|| BackendError::Protocol("missing data[] in embedding response".into()))?;
    if data.len() != count {
        return Err(BackendError::Protocol(format!(
            "expected {count} embeddings, got {}",
            data.len()
        )));
    }
    data.iter()
        .map(|item| {
            let raw = item
                .pointer("/embedding")
                .and_then(Value::as_array)
                .ok_or_else(|| BackendError::Protocol("missing embedding field".into()))?;
            let values: Option<Vec<f64>> = raw.iter().map(Value::as_f64).collect();
            let values =
                values.ok_or_else(|| BackendError::Protocol("non-numeric embedding".into()))?;
            if values.len() != expected {
                return Err(BackendError::DimensionMismatch {
                    expected,
                    got: values.len(),
                });
            }
            EmbeddingVector::new_unit(values)
        })
        .collect()
}

fn embeddings_client(config: &BackendConfig) -> Result<reqwest::blocking::Client, BackendError> {
    reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs_f64(config.timeout_secs))
        .build()
        .map_err(|e| BackendError::Http(e.to_string()))
}

fn post_embeddings(
    client: &reqwest::blocking::Client,
    endpoint: &str,
    token: &Option<String>,
    body: Value,
) -> Result<Value, BackendError> {
    let mut builder = client.post(endpoint).json(&body);
    if let Some(token) = token {
        builder = builder.bearer_auth(token);
    }
    let response = builder
        .send()
        .map_err(|e| BackendError::Http(e.to_string()))?;
    let status = response.status();
    if status == reqwest::StatusCode::UNAUTHORIZED || status == reqwest::StatusCode::FORBIDDEN {
        return Err(BackendError::Auth(format!("HTTP {status}")));
    }
    if !status.is_success() {
        return Err(BackendError::Http(format!("HTTP {status}")));
    }
    response
        .json()
        .map_err(|e| BackendError::Protocol(e.to_string()))
}

/// HTTP sentence embedder speaking the common `{model, input}` protocol with
/// `{data[].embedding}` responses.
pub struct HttpEmbedder {
    endpoint: String,
    model: String,
    token: Option<String>,
    dim: usize,
    client: reqwest::blocking::Client,
}

impl HttpEmbedder {
    pub fn new(config: &BackendConfig, dim: usize) -> Result<Self, BackendError> {
        let token = match &config.auth_env {
            Some(var) => {
                Some(std::env::var(var).map_err(|_| BackendError::MissingToken(var.clone()))?)
            }
            None => None,
        };
        Ok(Self {
            endpoint: config.endpoint.clone(),
            model: config.model.clone(),
            token,
            dim,
            client: embeddings_client(config)?,
        })
    }
}

impl TextEmbedder for HttpEmbedder {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector<f64>>, BackendError> {
        if let Some(i) = texts.iter().position(|t| t.trim().is_empty()) {
            return Err(BackendError::EmptyText(i));
        }
        let value = post_embeddings(
            &self.client,
            &self.endpoint,
            &self.token,
            json!({"model": self.model, "input": texts}),
        )?;
        parse_embedding_response(&value, self.dim, texts.len())
    }
}

/// HTTP frame embedder: frames travel as `data:` URLs in `input`.
pub struct HttpFrameEmbedder {
    endpoint: String,
    model: String,
    token: Option<String>,
    dim: usize,
    client: reqwest::blocking::Client,
}

impl HttpFrameEmbedder {
    pub fn new(config: &BackendConfig, dim: usize) -> Result<Self, BackendError> {
        let token = match &config.auth_env {
            Some(var) => {
                Some(std::env::var(var).map_err(|_| BackendError::MissingToken(var.clone()))?)
            }
            None => None,
        };
        Ok(Self {
            endpoint: config.endpoint.clone(),
            model: config.model.clone(),
            token,
            dim,
            client: embeddings_client(config)?,
        })
    }
}

impl FrameEmbedder for HttpFrameEmbedder {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed_frames(&self, frames: &[Vec<u8>]) -> Result<Vec<EmbeddingVector<f64>>, BackendError> {
        let inputs: Vec<String> = frames
            .iter()
            .map(|png| {
                format!(
                    "data:image/png;base64,{}",
                    base64::engine::general_purpose::STANDARD.encode(png)
                )
            })
            .collect();
        let value = post_embeddings(
            &self.client,
            &self.endpoint,
            &self.token,
            json!({"model": self.model, "input": inputs}),
        )?;
        parse_embedding_response(&value, self.dim, frames.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mock_embedder_is_deterministic_and_unit() {
        let embedder = MockEmbedder::new(16, 7);
        let texts = vec!["a dog".to_string(), "a cat".to_string(), "a dog".to_string()];
        let vs = embedder.embed(&texts).unwrap();
        assert_eq!(vs.len(), 3);
        assert_eq!(vs[0], vs[2]);
        assert_ne!(vs[0], vs[1]);
        for v in &vs {
            assert!((v.norm() - 1.0).abs() < 1e-6);
            assert_eq!(v.dim(), 16);
        }
        // pure function of (text, seed)
        let again = embedder.embed(&texts).unwrap();
        assert_eq!(vs, again);
        let other_seed = MockEmbedder::new(16, 8).embed(&texts).unwrap();
        assert_ne!(vs[0], other_seed[0]);
    }

    #[test]
    fn mock_embedder_rejects_empty_text() {
        let embedder = MockEmbedder::new(4, 0);
        let err = embedder
            .embed(&["ok".to_string(), "  ".to_string()])
            .unwrap_err();
        assert!(matches!(err, BackendError::EmptyText(1)));
    }

    #[test]
    fn embedding_response_parser_checks_dimension() {
        let value = json!({"data": [{"embedding": [1.0, 0.0]}]});
        assert!(parse_embedding_response(&value, 2, 1).is_ok());
        assert!(matches!(
            parse_embedding_response(&value, 3, 1),
            Err(BackendError::DimensionMismatch { expected: 3, got: 2 })
        ));
        assert!(parse_embedding_response(&value, 2, 2).is_err());
    }

    #[test]
    fn frame_embedder_keyed_by_bytes() {
        let embedder = MockFrameEmbedder::new(8, 1);
        let a = vec![1u8, 2, 3];
        let b = vec![4u8, 5, 6];
        let vs = embedder.embed_frames(&[a.clone(), b, a]).unwrap();
        assert_eq!(vs[0], vs[2]);
        assert_ne!(vs[0], vs[1]);
    }
}
