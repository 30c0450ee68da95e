//! Stage-oriented pipeline driver.
//!
//! Stages communicate only through files, write outputs atomically, and
//! record a manifest of input and config digests; a re-run with identical
//! digests is a no-op unless forced. With mock backends and a fixed seed the
//! whole pipeline is byte-reproducible.

pub mod manifest;
pub mod stages;

use std::path::{Path, PathBuf};
use std::time::Duration;

use thiserror::Error;

use crate::backends::{
    BackendConfig, BackendError, BackendRole, ChatClient, FrameEmbedder, HttpChatBackend,
    HttpEmbedder, HttpFrameEmbedder, MockChatBackend, MockEmbedder, MockFrameEmbedder, MockRules,
    RetryPolicy, TextEmbedder,
};
use crate::backends::cache::ResponseCache;
use crate::captioning::{CaptionError, PromptLibrary};
use crate::config::{ConfigError, PipelineConfig};
use crate::evaluator::EvalError;
use crate::keyframe::KeyframeError;
use crate::model::io::DatasetError;
use crate::model::MomentKey;

pub use stages::{run_stage, StageSpec};

/// The pipeline stages in their canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Keyframes,
    CaptionStatics,
    CaptionDynamics,
    Perturb,
    Embed,
    TrainEvaluator,
    Score,
    Select,
    Stats,
    EvalMetrics,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Keyframes => "keyframes",
            Stage::CaptionStatics => "caption-statics",
            Stage::CaptionDynamics => "caption-dynamics",
            Stage::Perturb => "perturb",
            Stage::Embed => "embed",
            Stage::TrainEvaluator => "train-evaluator",
            Stage::Score => "score",
            Stage::Select => "select",
            Stage::Stats => "stats",
            Stage::EvalMetrics => "eval-metrics",
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Caption(#[from] CaptionError),
    #[error(transparent)]
    Keyframe(#[from] KeyframeError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Analytics(#[from] crate::analytics::AnalyticsError),
    #[error("missing input file: {0}")]
    MissingInput(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("{0}")]
    Stage(String),
}

/// How a stage run ended. Exit codes are a stable contract: 0 for success,
/// 1 for partial failure (some moments skipped), 2 for config or I/O errors
/// (surfaced as `Err`).
#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stage: &'static str,
    pub processed: usize,
    pub skipped: Vec<(MomentKey, String)>,
    pub no_op: bool,
}

impl StageReport {
    pub fn exit_code(&self) -> i32 {
        if self.skipped.is_empty() {
            0
        } else {
            1
        }
    }
}

/// Structured log line: timestamp, stage, moment key, event.
pub fn log_line(stage: &str, key: &str, event: &str) {
    let ts = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true);
    eprintln!("{ts}\t{stage}\t{key}\t{event}");
}

/// Everything a stage needs besides its input/output paths.
pub struct StageContext {
    pub config: PipelineConfig,
    /// Digest of the normalized config plus run-level flags; a manifest
    /// match requires it to be identical.
    pub config_digest: String,
    pub seed: u64,
    pub workers: usize,
    pub force: bool,
    pub mock: bool,
    pub cache_dir: Option<PathBuf>,
}

impl StageContext {
    /// Build a context from a config and run-level flag overrides.
    pub fn new(
        config: PipelineConfig,
        seed: Option<u64>,
        workers: Option<usize>,
        force: bool,
        mock: bool,
        cache_dir: Option<PathBuf>,
    ) -> Result<Self, PipelineError> {
        use sha2::{Digest, Sha256};
        let seed = seed.unwrap_or(config.pipeline.seed);
        let workers = workers.unwrap_or(config.pipeline.workers).max(1);
        let normalized = config.to_toml()?;
        let mut hasher = Sha256::new();
        hasher.update(normalized.as_bytes());
        hasher.update(seed.to_le_bytes());
        hasher.update([mock as u8]);
        let config_digest = hex::encode(hasher.finalize());
        Ok(Self {
            config,
            config_digest,
            seed,
            workers,
            force,
            mock,
            cache_dir,
        })
    }

    fn backend_config(&self, role: BackendRole) -> BackendConfig {
        match role {
            BackendRole::Llm => self.config.backends.llm.clone(),
            BackendRole::ImageLmm => self.config.backends.image_lmm.clone(),
            BackendRole::VideoLmm => self.config.backends.video_lmm.clone(),
            BackendRole::Embedder => self.config.backends.embedder.backend(),
        }
    }

    fn mock_rules(&self) -> Result<MockRules, PipelineError> {
        match &self.config.backends.mock_rules {
            Some(path) => Ok(MockRules::from_path(path)?),
            None => Ok(MockRules::builtin()),
        }
    }

    fn cache_for(&self, cfg: &BackendConfig) -> Result<Option<ResponseCache>, PipelineError> {
        let dir = self.cache_dir.as_ref().or(cfg.cache_dir.as_ref());
        match dir {
            Some(dir) => Ok(Some(ResponseCache::new(dir)?)),
            None => Ok(None),
        }
    }

    /// Chat client for a role: mock or HTTP transport, plus cache and retry.
    pub fn chat_client(&self, role: BackendRole) -> Result<ChatClient, PipelineError> {
        let cfg = self.backend_config(role);
        let backend: Box<dyn crate::backends::ChatBackend> = if self.mock {
            Box::new(MockChatBackend::new(self.mock_rules()?))
        } else {
            Box::new(HttpChatBackend::new(&cfg)?)
        };
        let model = if self.mock {
            format!("mock-{}", role.label())
        } else {
            cfg.model.clone()
        };
        let temperature = if self.mock { 0.0 } else { cfg.temperature };
        let retry = RetryPolicy::new(
            cfg.max_retries,
            Duration::from_secs_f64(cfg.backoff_base_secs.max(0.001)),
        );
        Ok(
            ChatClient::new(role, model, backend, self.cache_for(&cfg)?, retry)
                .with_temperature(temperature),
        )
    }

    pub fn text_embedder(&self) -> Result<Box<dyn TextEmbedder>, PipelineError> {
        let dim = self.config.backends.embedder.dimension;
        if self.mock {
            Ok(Box::new(MockEmbedder::new(dim, self.seed)))
        } else {
            let cfg = self.config.backends.embedder.backend();
            Ok(Box::new(HttpEmbedder::new(&cfg, dim)?))
        }
    }

    pub fn frame_embedder(&self) -> Result<Box<dyn FrameEmbedder>, PipelineError> {
        let dim = self.config.backends.embedder.dimension;
        if self.mock {
            Ok(Box::new(MockFrameEmbedder::new(dim, self.seed)))
        } else {
            let cfg = self.config.backends.embedder.backend();
            Ok(Box::new(HttpFrameEmbedder::new(&cfg, dim)?))
        }
    }

    pub fn prompts(&self) -> Result<PromptLibrary, PipelineError> {
        match &self.config.pipeline.template_dir {
            Some(dir) => Ok(PromptLibrary::with_overrides(dir)?),
            None => Ok(PromptLibrary::builtin()),
        }
    }

    /// Bounded worker pool for a stage.
    pub fn pool(&self, workers: usize) -> Result<rayon::ThreadPool, PipelineError> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| PipelineError::Stage(format!("worker pool: {e}")))
    }

    pub fn require_input(&self, path: &Path) -> Result<(), PipelineError> {
        if !path.exists() {
            return Err(PipelineError::MissingInput(path.to_path_buf()));
        }
        Ok(())
    }
}
