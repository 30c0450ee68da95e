//! Pluggable model backends for the four external roles: instruction LLM,
//! image LMM, video LMM, and sentence embedder.
//!
//! A [`ChatClient`] wraps any [`ChatBackend`] with attachment validation for
//! its role, a content-addressed on-disk response cache, and retry with
//! exponential backoff. Deterministic mock backends make full pipeline runs
//! reproducible bit for bit.

pub mod cache;
pub mod embedding;
pub mod http;
pub mod mock;

use std::path::PathBuf;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::num::Real;
use cache::ResponseCache;

pub use embedding::{
    FrameEmbedder, HttpEmbedder, HttpFrameEmbedder, MockEmbedder, MockFrameEmbedder, TextEmbedder,
};
pub use http::HttpChatBackend;
pub use mock::{MockChatBackend, MockRules};

/// The external model roles the pipeline calls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendRole {
    Llm,
    ImageLmm,
    VideoLmm,
    Embedder,
}

impl BackendRole {
    pub fn label(&self) -> &'static str {
        match self {
            BackendRole::Llm => "llm",
            BackendRole::ImageLmm => "image_lmm",
            BackendRole::VideoLmm => "video_lmm",
            BackendRole::Embedder => "embedder",
        }
    }
}

/// Connection settings for one backend role. Concrete model choices are
/// configuration, not code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendConfig {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub auth_env: Option<String>,
    pub timeout_secs: f64,
    pub max_retries: u32,
    /// First backoff delay; doubles per retry, jittered ±20%.
    pub backoff_base_secs: f64,
    pub cache_dir: Option<PathBuf>,
    /// Sampling temperature for generation calls.
    pub temperature: f64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            model: String::new(),
            auth_env: None,
            timeout_secs: 60.0,
            max_retries: 3,
            backoff_base_secs: 1.0,
            cache_dir: None,
            temperature: 0.7,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.timeout_secs <= 0.0 {
            return Err(format!("timeout_secs must be > 0 (got {})", self.timeout_secs));
        }
        if self.backoff_base_secs < 0.0 {
            return Err("backoff_base_secs must be >= 0".into());
        }
        Ok(())
    }
}

/// One image riding on a chat request, optionally tagged with its timestamp
/// in the source moment. Frame sequences are sent as ordered attachments.
#[derive(Debug, Clone)]
pub struct ImageAttachment {
    pub timestamp: Option<f64>,
    pub png: Vec<u8>,
}

/// A single chat-completion request.
#[derive(Debug, Clone)]
pub struct ChatRequest {
    pub system: String,
    pub user: String,
    pub images: Vec<ImageAttachment>,
    pub temperature: f64,
    pub seed: u64,
}

impl ChatRequest {
    pub fn text(system: impl Into<String>, user: impl Into<String>) -> Self {
        Self {
            system: system.into(),
            user: user.into(),
            images: Vec::new(),
            temperature: 0.0,
            seed: 0,
        }
    }
}

/// Chat result plus transport metadata.
#[derive(Debug, Clone)]
pub struct ChatResponse {
    pub text: String,
    pub latency: Duration,
    pub cache_hit: bool,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend call failed after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: String },
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("auth token variable {0} is not set")]
    MissingToken(String),
    #[error("empty model output after retry")]
    EmptyOutput,
    #[error("backend refused the request: {0}")]
    Refused(String),
    #[error("invalid attachments for role {role}: {detail}")]
    InvalidAttachment { role: &'static str, detail: String },
    #[error("http error: {0}")]
    Http(String),
    #[error("unexpected response shape: {0}")]
    Protocol(String),
    #[error("cache failure: {0}")]
    Cache(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty input text at position {0}")]
    EmptyText(usize),
    #[error("non-finite embedding component")]
    NonFinite,
    #[error("zero-norm vector cannot be normalized")]
    ZeroNorm,
}

impl BackendError {
    /// Whether another attempt could succeed.
    pub fn retryable(&self) -> bool {
        matches!(self, BackendError::Http(_))
    }
}

/// Digest identifying a request: role, model name, and the full payload.
/// Image bytes enter through their own digests so large frames hash fast.
pub fn request_digest(role: BackendRole, model: &str, req: &ChatRequest) -> String {
    let mut hasher = Sha256::new();
    hasher.update(role.label().as_bytes());
    hasher.update([0]);
    hasher.update(model.as_bytes());
    hasher.update([0]);
    hasher.update(req.system.as_bytes());
    hasher.update([0]);
    hasher.update(req.user.as_bytes());
    hasher.update([0]);
    hasher.update(req.temperature.to_le_bytes());
    hasher.update(req.seed.to_le_bytes());
    for img in &req.images {
        hasher.update(
            img.timestamp
                .map(|t| t.to_le_bytes())
                .unwrap_or([0xff; 8]),
        );
        hasher.update(Sha256::digest(&img.png));
    }
    hex::encode(hasher.finalize())
}

/// Transport layer: performs one chat call. Retries and caching live in
/// [`ChatClient`].
pub trait ChatBackend: Send + Sync {
    fn chat(&self, req: &ChatRequest) -> Result<String, BackendError>;
}

/// Retry with exponential backoff (doubling, jittered ±20%). An empty model
/// output is retried once, then surfaced.
#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base: Duration,
}

impl RetryPolicy {
    pub fn new(max_retries: u32, base: Duration) -> Self {
        Self { max_retries, base }
    }

    fn backoff(&self, attempt: u32) -> Duration {
        use rand::Rng;
        let base = self.base.as_secs_f64() * 2f64.powi(attempt as i32);
        let jitter = 0.8 + 0.4 * rand::thread_rng().gen::<f64>();
        Duration::from_secs_f64(base * jitter)
    }

    /// Run `call` until it yields non-empty output or attempts are spent.
    pub fn run<Fo>(&self, mut call: Fo) -> Result<String, BackendError>
    where
        Fo: FnMut() -> Result<String, BackendError>,
    {
        let mut attempts = 0u32;
        let mut empty_retry_done = false;
        loop {
            attempts += 1;
            match call() {
                Ok(text) if text.trim().is_empty() => {
                    if empty_retry_done {
                        return Err(BackendError::EmptyOutput);
                    }
                    empty_retry_done = true;
                }
                Ok(text) => return Ok(text),
                Err(e) if e.retryable() && attempts <= self.max_retries => {
                    std::thread::sleep(self.backoff(attempts - 1));
                }
                Err(e) => {
                    if e.retryable() {
                        return Err(BackendError::Exhausted {
                            attempts,
                            last: e.to_string(),
                        });
                    }
                    return Err(e);
                }
            }
        }
    }
}

/// A role-bound chat backend with caching and retry.
pub struct ChatClient {
    role: BackendRole,
    model: String,
    temperature: f64,
    backend: Box<dyn ChatBackend>,
    cache: Option<ResponseCache>,
    retry: RetryPolicy,
}

impl ChatClient {
    pub fn new(
        role: BackendRole,
        model: impl Into<String>,
        backend: Box<dyn ChatBackend>,
        cache: Option<ResponseCache>,
        retry: RetryPolicy,
    ) -> Self {
        Self {
            role,
            model: model.into(),
            temperature: 0.0,
            backend,
            cache,
            retry,
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn role(&self) -> BackendRole {
        self.role
    }

    /// Default sampling temperature for requests built against this client.
    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    fn validate_attachments(&self, req: &ChatRequest) -> Result<(), BackendError> {
        let fail = |detail: &str| {
            Err(BackendError::InvalidAttachment {
                role: self.role.label(),
                detail: detail.into(),
            })
        };
        match self.role {
            BackendRole::Llm => {
                if !req.images.is_empty() {
                    return fail("text-only role cannot carry images");
                }
            }
            BackendRole::ImageLmm => {
                if req.images.is_empty() {
                    return fail("image role requires at least one image");
                }
            }
            BackendRole::VideoLmm => {
                if req.images.is_empty() {
                    return fail("video role requires a frame sequence");
                }
                if req.images.iter().any(|i| i.timestamp.is_none()) {
                    return fail("video frames must carry timestamps");
                }
            }
            BackendRole::Embedder => {
                return fail("embedder role does not accept chat requests");
            }
        }
        Ok(())
    }

    /// Cached, retried chat call. A repeated request returns the persisted
    /// response with `cache_hit` set.
    pub fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        self.validate_attachments(req)?;
        let digest = request_digest(self.role, &self.model, req);
        if let Some(cache) = &self.cache {
            if let Some(text) = cache.get(&digest)? {
                return Ok(ChatResponse {
                    text,
                    latency: Duration::ZERO,
                    cache_hit: true,
                });
            }
        }
        let start = Instant::now();
        let text = self.retry.run(|| self.backend.chat(req))?;
        if let Some(cache) = &self.cache {
            cache.put(&digest, &text)?;
        }
        Ok(ChatResponse {
            text,
            latency: start.elapsed(),
            cache_hit: false,
        })
    }
}

/// Fixed-dimension real vector produced by an embedding backend.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector<F: Real> {
    values: Vec<F>,
}

impl<F: Real> EmbeddingVector<F> {
    /// Wrap raw components, requiring finiteness.
    pub fn new(values: Vec<F>) -> Result<Self, BackendError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(BackendError::NonFinite);
        }
        Ok(Self { values })
    }

    /// Wrap and scale to unit norm.
    pub fn new_unit(values: Vec<F>) -> Result<Self, BackendError> {
        Self::new(values)?.into_unit()
    }

    pub fn into_unit(mut self) -> Result<Self, BackendError> {
        let norm = self.norm();
        if norm == F::zero() {
            return Err(BackendError::ZeroNorm);
        }
        for v in &mut self.values {
            *v /= norm;
        }
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn dot(&self, other: &Self) -> F {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| *a * *b)
            .sum()
    }

    pub fn norm(&self) -> F {
        self.dot(self).sqrt()
    }
}

/// Semantic distance between two embeddings: `1 - cosine(a, b)`, in `[0, 2]`.
/// Symmetric; zero exactly when the vectors are parallel.
pub fn semantic_distance<F: Real>(
    a: &EmbeddingVector<F>,
    b: &EmbeddingVector<F>,
) -> Result<F, BackendError> {
    if a.dim() != b.dim() {
        return Err(BackendError::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == F::zero() || nb == F::zero() {
        return Err(BackendError::ZeroNorm);
    }
    let cos = a.dot(b) / (na * nb);
    // Clamp away rounding excursions outside [-1, 1].
    let cos = cos.min(F::one()).max(-F::one());
    Ok(F::one() - cos)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct FixedBackend(Vec<String>, std::sync::Mutex<usize>);
    impl ChatBackend for FixedBackend {
        fn chat(&self, _req: &ChatRequest) -> Result<String, BackendError> {
            let mut idx = self.1.lock().unwrap();
            let out = self.0[(*idx).min(self.0.len() - 1)].clone();
            *idx += 1;
            Ok(out)
        }
    }

    struct FailingBackend(std::sync::Mutex<u32>);
    impl ChatBackend for FailingBackend {
        fn chat(&self, _req: &ChatRequest) -> Result<String, BackendError> {
            *self.0.lock().unwrap() += 1;
            Err(BackendError::Http("connection refused".into()))
        }
    }

    fn req() -> ChatRequest {
        ChatRequest::text("sys", "a dog runs fast")
    }

    #[test]
    fn retry_counts_attempts() {
        let client = ChatClient::new(
            BackendRole::Llm,
            "m",
            Box::new(FailingBackend(std::sync::Mutex::new(0))),
            None,
            RetryPolicy::new(2, Duration::from_millis(1)),
        );
        let err = client.chat(&req()).unwrap_err();
        match err {
            BackendError::Exhausted { attempts, .. } => assert_eq!(attempts, 3),
            other => panic!("expected Exhausted, got {other}"),
        }
    }

    #[test]
    fn empty_output_retried_once_then_surfaced() {
        let backend = FixedBackend(vec!["".into(), "".into()], std::sync::Mutex::new(0));
        let client = ChatClient::new(
            BackendRole::Llm,
            "m",
            Box::new(backend),
            None,
            RetryPolicy::new(0, Duration::from_millis(1)),
        );
        assert!(matches!(
            client.chat(&req()).unwrap_err(),
            BackendError::EmptyOutput
        ));

        let backend = FixedBackend(vec!["".into(), "ok".into()], std::sync::Mutex::new(0));
        let client = ChatClient::new(
            BackendRole::Llm,
            "m",
            Box::new(backend),
            None,
            RetryPolicy::new(0, Duration::from_millis(1)),
        );
        assert_eq!(client.chat(&req()).unwrap().text, "ok");
    }

    #[test]
    fn cache_returns_identical_text_with_hit_flag() {
        let dir = tempfile::tempdir().unwrap();
        let backend = FixedBackend(
            vec!["first".into(), "second".into()],
            std::sync::Mutex::new(0),
        );
        let client = ChatClient::new(
            BackendRole::Llm,
            "m",
            Box::new(backend),
            Some(ResponseCache::new(dir.path()).unwrap()),
            RetryPolicy::new(0, Duration::from_millis(1)),
        );
        let a = client.chat(&req()).unwrap();
        let b = client.chat(&req()).unwrap();
        assert!(!a.cache_hit);
        assert!(b.cache_hit);
        assert_eq!(a.text, b.text);
    }

    #[test]
    fn attachment_rules_per_role() {
        let mk = |role| {
            ChatClient::new(
                role,
                "m",
                Box::new(FixedBackend(vec!["x".into()], std::sync::Mutex::new(0))),
                None,
                RetryPolicy::new(0, Duration::from_millis(1)),
            )
        };
        assert!(mk(BackendRole::ImageLmm).chat(&req()).is_err());
        assert!(mk(BackendRole::VideoLmm).chat(&req()).is_err());
        let mut with_img = req();
        with_img.images.push(ImageAttachment {
            timestamp: None,
            png: vec![1, 2, 3],
        });
        assert!(mk(BackendRole::ImageLmm).chat(&with_img).is_ok());
        // video frames must carry timestamps
        assert!(mk(BackendRole::VideoLmm).chat(&with_img).is_err());
    }

    #[test]
    fn distance_identity_and_antipode() {
        let a = EmbeddingVector::new_unit(vec![0.6_f64, 0.8]).unwrap();
        let b = EmbeddingVector::new(vec![-0.6_f64, -0.8]).unwrap();
        assert_eq!(semantic_distance(&a, &a).unwrap(), 0.0);
        assert!((semantic_distance(&a, &b).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn distance_matches_scalar_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(7);
        for _ in 0..200 {
            let a: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let va = EmbeddingVector::new_unit(a.clone()).unwrap();
            let vb = EmbeddingVector::new_unit(b.clone()).unwrap();
            // independent dot-product computation on the raw values
            let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            let expect = 1.0 - dot / (na * nb);
            let got = semantic_distance(&va, &vb).unwrap();
            assert!((got - expect).abs() < 1e-9, "got {got}, expect {expect}");
            let sym = semantic_distance(&vb, &va).unwrap();
            assert_eq!(got, sym);
        }
    }

    #[test]
    fn distance_rejects_dimension_mismatch() {
        let a = EmbeddingVector::new_unit(vec![1.0_f64, 0.0]).unwrap();
        let b = EmbeddingVector::new_unit(vec![1.0_f64, 0.0, 0.0]).unwrap();
        assert!(matches!(
            semantic_distance(&a, &b),
            Err(BackendError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn digests_differ_across_prompts_and_seeds() {
        let base = req();
        let mut other = req();
        other.user.push('!');
        let d1 = request_digest(BackendRole::Llm, "m", &base);
        let d2 = request_digest(BackendRole::Llm, "m", &other);
        assert_ne!(d1, d2);
        let mut seeded = req();
        seeded.seed = 99;
        assert_ne!(d1, request_digest(BackendRole::Llm, "m", &seeded));
        assert_ne!(d1, request_digest(BackendRole::ImageLmm, "m", &base));
    }
}
