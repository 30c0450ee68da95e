//! Pipeline configuration: TOML file with defaults for every knob, unknown
//! keys rejected, type errors reported with their key path.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::BackendConfig;
use crate::captioning::dynamics::FramePolicy;
use crate::keyframe::SegmentationConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSection {
    /// Worker pool size per stage.
    pub workers: usize,
    pub seed: u64,
    /// Frame layout root (`<frames_dir>/<video_id>/<timestamp_ms>.png`).
    pub frames_dir: PathBuf,
    /// Optional directory of prompt template overrides.
    pub template_dir: Option<PathBuf>,
}

impl Default for PipelineSection {
    fn default() -> Self {
        Self {
            workers: 4,
            seed: 0,
            frames_dir: PathBuf::from("frames"),
            template_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KeyframeSection {
    /// Maximum number of key frames per moment (`L`).
    pub l: usize,
    /// Published per-dataset presets for `L`.
    pub l_presets: BTreeMap<String, usize>,
    pub initial_threshold: f64,
    pub theta_min: f64,
    pub theta_max: f64,
    pub max_iterations: usize,
    pub analysis_fps: f64,
    /// External decoder binary for populating the frame layout.
    pub decoder: Option<PathBuf>,
    /// Decoder argument template; `{input}`, `{outdir}` and `{fps}` are
    /// substituted.
    pub decoder_args: Vec<String>,
}

impl Default for KeyframeSection {
    fn default() -> Self {
        Self {
            l: 1,
            l_presets: BTreeMap::from([
                ("activitynet".to_string(), 5),
                ("charades".to_string(), 1),
                ("didemo".to_string(), 1),
            ]),
            initial_threshold: 27.0,
            theta_min: 1.0,
            theta_max: 100.0,
            max_iterations: 20,
            analysis_fps: 2.0,
            decoder: None,
            decoder_args: Vec::new(),
        }
    }
}

impl KeyframeSection {
    pub fn segmentation(&self) -> SegmentationConfig<f64> {
        SegmentationConfig {
            max_segments: self.l,
            initial_threshold: self.initial_threshold,
            theta_min: self.theta_min,
            theta_max: self.theta_max,
            max_iterations: self.max_iterations,
            analysis_fps: self.analysis_fps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CaptioningSection {
    /// Static caption candidates per moment.
    pub n_s: usize,
    /// Dynamic caption candidates per moment.
    pub n_d: usize,
    /// Dynamics-oriented VQA pairs per moment.
    pub n_qa: usize,
    /// Video-LMM input sampling: `8fps` for short-video datasets,
    /// `uniform64` for long ones.
    pub frame_policy: String,
    /// Named policy presets.
    pub frame_policy_presets: BTreeMap<String, String>,
    /// Separate pool size for the video-LMM stage; defaults to
    /// `pipeline.workers`.
    pub dynamics_workers: Option<usize>,
}

impl Default for CaptioningSection {
    fn default() -> Self {
        Self {
            n_s: 3,
            n_d: 3,
            n_qa: 5,
            frame_policy: "8fps".to_string(),
            frame_policy_presets: BTreeMap::from([
                ("long".to_string(), "uniform64".to_string()),
                ("short".to_string(), "8fps".to_string()),
            ]),
            dynamics_workers: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbSection {
    pub n_pos: usize,
    pub n_neg: usize,
    /// One multi-section LLM call instead of three.
    pub single_call: bool,
}

impl Default for PerturbSection {
    fn default() -> Self {
        Self {
            n_pos: 3,
            n_neg: 3,
            single_call: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluatorSection {
    pub tau: f64,
    pub lambda_c: f64,
    pub lambda_m: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Frames pooled per moment for the video embedding.
    pub frames_per_moment: usize,
    pub projection_dim: usize,
    /// Optional score cutoff for the select stage; selection-only when
    /// absent.
    pub threshold: Option<f64>,
}

impl Default for EvaluatorSection {
    fn default() -> Self {
        Self {
            tau: 0.07,
            lambda_c: 1.0,
            lambda_m: 1.0,
            batch_size: 16,
            learning_rate: 0.01,
            epochs: 10,
            frames_per_moment: 20,
            projection_dim: 16,
            threshold: None,
        }
    }
}

impl EvaluatorSection {
    pub fn trainer(&self, seed: u64) -> crate::evaluator::TrainerConfig<f64> {
        crate::evaluator::TrainerConfig {
            tau: self.tau,
            lambda_c: self.lambda_c,
            lambda_m: self.lambda_m,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            seed,
            frames_per_moment: self.frames_per_moment,
            projection_dim: self.projection_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct BackendsSection {
    pub llm: BackendConfig,
    pub image_lmm: BackendConfig,
    pub video_lmm: BackendConfig,
    pub embedder: EmbedderConfig,
    /// Mock rules file; the built-in rules apply when absent.
    pub mock_rules: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderConfig {
    pub endpoint: String,
    pub model: String,
    pub auth_env: Option<String>,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub backoff_base_secs: f64,
    pub cache_dir: Option<PathBuf>,
    /// Embedding dimension `d_e`.
    pub dimension: usize,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        let base = BackendConfig::default();
        Self {
            endpoint: base.endpoint,
            model: base.model,
            auth_env: base.auth_env,
            timeout_secs: base.timeout_secs,
            max_retries: base.max_retries,
            backoff_base_secs: base.backoff_base_secs,
            cache_dir: base.cache_dir,
            dimension: 32,
        }
    }
}

impl EmbedderConfig {
    pub fn backend(&self) -> BackendConfig {
        BackendConfig {
            endpoint: self.endpoint.clone(),
            model: self.model.clone(),
            auth_env: self.auth_env.clone(),
            timeout_secs: self.timeout_secs,
            max_retries: self.max_retries,
            backoff_base_secs: self.backoff_base_secs,
            cache_dir: self.cache_dir.clone(),
            temperature: 0.0,
        }
    }
}

/// The whole pipeline configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub pipeline: PipelineSection,
    pub keyframe: KeyframeSection,
    pub captioning: CaptioningSection,
    pub perturb: PerturbSection,
    pub evaluator: EvaluatorSection,
    pub backends: BackendsSection,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.pipeline.workers < 1 {
            return invalid("pipeline.workers must be >= 1".into());
        }
        self.keyframe
            .segmentation()
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("keyframe: {e}")))?;
        for (name, l) in &self.keyframe.l_presets {
            if *l < 1 {
                return invalid(format!("keyframe.l_presets.{name} must be >= 1"));
            }
        }
        if self.captioning.n_s < 1 || self.captioning.n_d < 1 || self.captioning.n_qa < 1 {
            return invalid("captioning.n_s, n_d and n_qa must be >= 1".into());
        }
        FramePolicy::parse(&self.captioning.frame_policy)
            .map_err(|e| ConfigError::Invalid(format!("captioning.frame_policy: {e}")))?;
        for (name, policy) in &self.captioning.frame_policy_presets {
            FramePolicy::parse(policy).map_err(|e| {
                ConfigError::Invalid(format!("captioning.frame_policy_presets.{name}: {e}"))
            })?;
        }
        if self.perturb.n_pos < 1 || self.perturb.n_neg < 1 {
            return invalid("perturb.n_pos and n_neg must be >= 1".into());
        }
        if self.evaluator.tau <= 0.0 {
            return invalid(format!(
                "evaluator.tau must be > 0 (got {})",
                self.evaluator.tau
            ));
        }
        if self.evaluator.lambda_c < 0.0 || self.evaluator.lambda_m < 0.0 {
            return invalid("evaluator loss weights must be >= 0".into());
        }
        if self.evaluator.batch_size < 1 {
            return invalid("evaluator.batch_size must be >= 1".into());
        }
        if self.evaluator.learning_rate <= 0.0 {
            return invalid("evaluator.learning_rate must be > 0".into());
        }
        if self.evaluator.frames_per_moment < 1 {
            return invalid("evaluator.frames_per_moment must be >= 1".into());
        }
        if self.evaluator.projection_dim < 1 {
            return invalid("evaluator.projection_dim must be >= 1".into());
        }
        if let Some(t) = self.evaluator.threshold {
            if !(0.0..=1.0).contains(&t) {
                return invalid(format!("evaluator.threshold must lie in [0,1] (got {t})"));
            }
        }
        if self.backends.embedder.dimension < 1 {
            return invalid("backends.embedder.dimension must be >= 1".into());
        }
        let embedder_backend = self.backends.embedder.backend();
        for (role, cfg) in [
            ("llm", &self.backends.llm),
            ("image_lmm", &self.backends.image_lmm),
            ("video_lmm", &self.backends.video_lmm),
            ("embedder", &embedder_backend),
        ] {
            cfg.validate()
                .map_err(|e| ConfigError::Invalid(format!("backends.{role}: {e}")))?;
        }
        Ok(())
    }

    /// Normalized TOML rendering with every default filled in.
    pub fn to_toml(&self) -> Result<String, ConfigError> {
        toml::to_string_pretty(self).map_err(|e| ConfigError::Parse(e.to_string()))
    }
}

/// Parse and validate a config file. An empty file yields all defaults;
/// unknown keys and type errors are rejected with the offending key named.
pub fn validate_config(path: &Path) -> Result<PipelineConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text)
}

/// As [`validate_config`] over in-memory text.
pub fn parse_config(text: &str) -> Result<PipelineConfig, ConfigError> {
    let config: PipelineConfig =
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_reproduces_published_defaults() {
        let config = parse_config("").unwrap();
        assert_eq!(config.captioning.n_s, 3);
        assert_eq!(config.captioning.n_d, 3);
        assert_eq!(config.captioning.n_qa, 5);
        assert_eq!(config.perturb.n_pos, 3);
        assert_eq!(config.perturb.n_neg, 3);
        assert_eq!(config.evaluator.tau, 0.07);
        assert_eq!(config.evaluator.lambda_c, 1.0);
        assert_eq!(config.evaluator.lambda_m, 1.0);
        assert_eq!(config.evaluator.batch_size, 16);
        assert_eq!(config.evaluator.epochs, 10);
        assert_eq!(config.evaluator.frames_per_moment, 20);
        assert_eq!(config.keyframe.l_presets["charades"], 1);
        assert_eq!(config.keyframe.l_presets["didemo"], 1);
        assert_eq!(config.keyframe.l_presets["activitynet"], 5);
        assert_eq!(config.captioning.frame_policy, "8fps");
        assert_eq!(config.captioning.frame_policy_presets["short"], "8fps");
        assert_eq!(config.captioning.frame_policy_presets["long"], "uniform64");
    }

    #[test]
    fn zero_tau_rejected() {
        let err = parse_config("[evaluator]\ntau = 0.0\n").unwrap_err();
        assert!(err.to_string().contains("tau"), "{err}");
    }

    #[test]
    fn unknown_key_named_in_error() {
        let err = parse_config("foo = 1\n").unwrap_err();
        assert!(err.to_string().contains("foo"), "{err}");
        let err = parse_config("[captioning]\nfoo = 1\n").unwrap_err();
        assert!(err.to_string().contains("foo"), "{err}");
    }

    #[test]
    fn type_error_names_key() {
        let err = parse_config("[evaluator]\ntau = \"warm\"\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("tau") || msg.contains("invalid type"), "{msg}");
    }

    #[test]
    fn normalized_echo_round_trips() {
        let config = parse_config("[captioning]\nn_s = 4\n").unwrap();
        let echoed = config.to_toml().unwrap();
        let reparsed = parse_config(&echoed).unwrap();
        assert_eq!(config, reparsed);
        assert!(echoed.contains("n_s = 4"));
    }

    #[test]
    fn partial_overrides_keep_other_defaults() {
        let config = parse_config("[evaluator]\nbatch_size = 4\n").unwrap();
        assert_eq!(config.evaluator.batch_size, 4);
        assert_eq!(config.evaluator.tau, 0.07);
    }

    #[test]
    fn bad_frame_policy_rejected() {
        assert!(parse_config("[captioning]\nframe_policy = \"sometimes\"\n").is_err());
    }
}
