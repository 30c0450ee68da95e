//! Stage implementations and their intermediate file schemas.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytics::{self, pos::LexiconTagger, GroundTruth, PredictionSet, ReportRow};
use crate::backends::{BackendError, BackendRole};
use crate::captioning::dynamics::{
    answer_and_describe, generate_questions, rewrite_dynamics, sample_frames, FramePolicy,
};
use crate::captioning::statics::{describe_keyframe, rewrite_statics, FrameDescription};
use crate::captioning::CaptionError;
use crate::evaluator::{
    checkpoint, pool_moment_embedding, select_and_filter, train, TrainingItem,
};
use crate::keyframe::frames::{DirFrameProvider, FrameProvider};
use crate::keyframe::segment_moment;
use crate::model::io::{atomic_write, load_dataset, load_jsonl, save_jsonl, Dataset, DatasetSchema};
use crate::model::{
    AnnotatedMoment, CaptionCandidate, CaptionKind, FrameHandle, MomentKey, MomentRecord,
    TimedFrame, Validate,
};
use crate::perturb::{build_training_corpus, PerturbConfig};

use super::manifest::{
    digest_inputs, is_no_op, load_manifest, manifest_path, save_manifest, StageManifest,
};
use super::{log_line, PipelineError, Stage, StageContext, StageReport};

fn is_false(b: &bool) -> bool {
    !*b
}

/// One key-frame segment of a moment (`keyframes.jsonl`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentRecord {
    pub start: f64,
    pub end: f64,
    pub mid_timestamp: f64,
    /// Path of the key-frame image.
    pub frame: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyframeRecord {
    pub video_id: String,
    pub t_s: f64,
    pub t_e: f64,
    pub segments: Vec<SegmentRecord>,
}

impl Validate for KeyframeRecord {
    fn validate(&self) -> Result<(), String> {
        if self.segments.is_empty() {
            return Err("segments must be non-empty".into());
        }
        for (i, s) in self.segments.iter().enumerate() {
            if s.start > s.end {
                return Err(format!("segments[{i}]: start > end"));
            }
            if s.mid_timestamp < s.start || s.mid_timestamp > s.end {
                return Err(format!("segments[{i}]: mid outside span"));
            }
        }
        Ok(())
    }
}

impl KeyframeRecord {
    pub fn key(&self) -> MomentKey {
        MomentKey {
            video_id: self.video_id.clone(),
            t_s: self.t_s,
            t_e: self.t_e,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DescriptionRecord {
    pub timestamp: f64,
    pub foreground: String,
    pub background: String,
    pub full: String,
}

/// Per-frame descriptions of a moment (`statics_raw.jsonl`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StaticsRawRecord {
    pub video_id: String,
    pub t_s: f64,
    pub t_e: f64,
    pub descriptions: Vec<DescriptionRecord>,
}

impl Validate for StaticsRawRecord {
    fn validate(&self) -> Result<(), String> {
        if self.descriptions.is_empty() {
            return Err("descriptions must be non-empty".into());
        }
        Ok(())
    }
}

/// Caption candidates of one kind for a moment (`statics_candidates.jsonl`,
/// `dynamics_candidates.jsonl`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidatesRecord {
    pub video_id: String,
    pub t_s: f64,
    pub t_e: f64,
    pub candidates: Vec<String>,
    #[serde(default, skip_serializing_if = "is_false")]
    pub under_count: bool,
    /// Set when the stage could not produce candidates for this moment but
    /// the moment proceeds with the other kind.
    #[serde(default, skip_serializing_if = "is_false")]
    pub failed: bool,
}

impl Validate for CandidatesRecord {
    fn validate(&self) -> Result<(), String> {
        if !self.failed && self.candidates.is_empty() {
            return Err("candidates must be non-empty unless failed".into());
        }
        Ok(())
    }
}

impl CandidatesRecord {
    pub fn key(&self) -> MomentKey {
        MomentKey {
            video_id: self.video_id.clone(),
            t_s: self.t_s,
            t_e: self.t_e,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaRecord {
    pub question: String,
    pub answer: String,
}

/// VQA pairs plus dynamics description (`dynamics_raw.jsonl`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsRawRecord {
    pub video_id: String,
    pub t_s: f64,
    pub t_e: f64,
    pub pairs: Vec<QaRecord>,
    pub description: String,
    #[serde(default, skip_serializing_if = "is_false")]
    pub under_count: bool,
    #[serde(default, skip_serializing_if = "is_false")]
    pub failed: bool,
}

impl Validate for DynamicsRawRecord {
    fn validate(&self) -> Result<(), String> {
        if !self.failed && self.pairs.is_empty() {
            return Err("pairs must be non-empty unless failed".into());
        }
        Ok(())
    }
}

/// Embeddings for evaluator training (`train_embeddings.jsonl`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainEmbedRecord {
    pub video_id: String,
    pub t_s: f64,
    pub t_e: f64,
    pub v: Vec<f64>,
    pub q: Vec<f64>,
    pub pos: Vec<f64>,
    pub sneg: Vec<f64>,
    pub dneg: Vec<f64>,
}

impl Validate for TrainEmbedRecord {
    fn validate(&self) -> Result<(), String> {
        let d = self.v.len();
        if d == 0 {
            return Err("embedding dimension must be >= 1".into());
        }
        for (name, field) in [
            ("q", &self.q),
            ("pos", &self.pos),
            ("sneg", &self.sneg),
            ("dneg", &self.dneg),
        ] {
            if field.len() != d {
                return Err(format!("{name} dimension differs from v"));
            }
        }
        Ok(())
    }
}

/// Embeddings for candidate scoring (`candidate_embeddings.jsonl`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandEmbedRecord {
    pub video_id: String,
    pub t_s: f64,
    pub t_e: f64,
    pub v: Vec<f64>,
    pub statics: Vec<Vec<f64>>,
    pub dynamics: Vec<Vec<f64>>,
}

impl Validate for CandEmbedRecord {
    fn validate(&self) -> Result<(), String> {
        let d = self.v.len();
        if d == 0 {
            return Err("embedding dimension must be >= 1".into());
        }
        if self
            .statics
            .iter()
            .chain(self.dynamics.iter())
            .any(|e| e.len() != d)
        {
            return Err("candidate embedding dimension differs from v".into());
        }
        Ok(())
    }
}

impl CandEmbedRecord {
    pub fn key(&self) -> MomentKey {
        MomentKey {
            video_id: self.video_id.clone(),
            t_s: self.t_s,
            t_e: self.t_e,
        }
    }
}

/// Corpus statistics output of the stats stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub captions: usize,
    pub vocab_size: usize,
    pub avg_words: f64,
    pub avg_nouns: f64,
    pub avg_verbs: f64,
    pub avg_adjs: f64,
    pub many_to_many_classes: usize,
    pub many_to_many_instances: usize,
    /// Counting definition label for the many-to-many figures.
    pub counting_definition: String,
}

/// A stage invocation: which stage plus its input/output paths.
#[derive(Debug, Clone)]
pub enum StageSpec {
    Keyframes {
        moments: PathBuf,
        frames: PathBuf,
        out: PathBuf,
    },
    CaptionStatics {
        moments: PathBuf,
        keyframes: PathBuf,
        out_raw: PathBuf,
        out_candidates: PathBuf,
    },
    CaptionDynamics {
        moments: PathBuf,
        frames: PathBuf,
        out_raw: PathBuf,
        out_candidates: PathBuf,
    },
    Perturb {
        moments: PathBuf,
        out: PathBuf,
    },
    Embed {
        moments: PathBuf,
        disturbed: PathBuf,
        statics: PathBuf,
        dynamics: PathBuf,
        frames: PathBuf,
        out_train: PathBuf,
        out_candidates: PathBuf,
    },
    TrainEvaluator {
        train_embeddings: PathBuf,
        out_model: PathBuf,
        out_trace: PathBuf,
    },
    Score {
        moments: PathBuf,
        candidate_embeddings: PathBuf,
        statics: PathBuf,
        dynamics: PathBuf,
        model: PathBuf,
        out: PathBuf,
    },
    Select {
        scored: PathBuf,
        out: PathBuf,
    },
    Stats {
        input: PathBuf,
        schema: DatasetSchema,
        out: PathBuf,
    },
    EvalMetrics {
        predictions: PathBuf,
        ground_truth: PathBuf,
        out: PathBuf,
    },
}

impl StageSpec {
    pub fn stage(&self) -> Stage {
        match self {
            StageSpec::Keyframes { .. } => Stage::Keyframes,
            StageSpec::CaptionStatics { .. } => Stage::CaptionStatics,
            StageSpec::CaptionDynamics { .. } => Stage::CaptionDynamics,
            StageSpec::Perturb { .. } => Stage::Perturb,
            StageSpec::Embed { .. } => Stage::Embed,
            StageSpec::TrainEvaluator { .. } => Stage::TrainEvaluator,
            StageSpec::Score { .. } => Stage::Score,
            StageSpec::Select { .. } => Stage::Select,
            StageSpec::Stats { .. } => Stage::Stats,
            StageSpec::EvalMetrics { .. } => Stage::EvalMetrics,
        }
    }

    fn inputs(&self) -> Vec<&Path> {
        match self {
            StageSpec::Keyframes { moments, frames, .. } => vec![moments, frames],
            StageSpec::CaptionStatics {
                moments, keyframes, ..
            } => vec![moments, keyframes],
            StageSpec::CaptionDynamics { moments, frames, .. } => vec![moments, frames],
            StageSpec::Perturb { moments, .. } => vec![moments],
            StageSpec::Embed {
                moments,
                disturbed,
                statics,
                dynamics,
                frames,
                ..
            } => vec![moments, disturbed, statics, dynamics, frames],
            StageSpec::TrainEvaluator {
                train_embeddings, ..
            } => vec![train_embeddings],
            StageSpec::Score {
                moments,
                candidate_embeddings,
                statics,
                dynamics,
                model,
                ..
            } => vec![moments, candidate_embeddings, statics, dynamics, model],
            StageSpec::Select { scored, .. } => vec![scored],
            StageSpec::Stats { input, .. } => vec![input],
            StageSpec::EvalMetrics {
                predictions,
                ground_truth,
                ..
            } => vec![predictions, ground_truth],
        }
    }

    fn outputs(&self) -> Vec<&Path> {
        match self {
            StageSpec::Keyframes { out, .. } => vec![out],
            StageSpec::CaptionStatics {
                out_raw,
                out_candidates,
                ..
            } => vec![out_raw, out_candidates],
            StageSpec::CaptionDynamics {
                out_raw,
                out_candidates,
                ..
            } => vec![out_raw, out_candidates],
            StageSpec::Perturb { out, .. } => vec![out],
            StageSpec::Embed {
                out_train,
                out_candidates,
                ..
            } => vec![out_train, out_candidates],
            StageSpec::TrainEvaluator {
                out_model,
                out_trace,
                ..
            } => vec![out_model, out_trace],
            StageSpec::Score { out, .. } => vec![out],
            StageSpec::Select { out, .. } => vec![out],
            StageSpec::Stats { out, .. } => vec![out],
            StageSpec::EvalMetrics { out, .. } => vec![out],
        }
    }
}

type Skips = Vec<(MomentKey, String)>;

/// Run one stage: input checks, manifest no-op detection, dispatch, manifest
/// write.
pub fn run_stage(ctx: &StageContext, spec: &StageSpec) -> Result<StageReport, PipelineError> {
    let stage = spec.stage();
    for input in spec.inputs() {
        ctx.require_input(input)?;
    }
    let input_digests = digest_inputs(&spec.inputs())?;
    let mpath = manifest_path(spec.outputs()[0]);
    if !ctx.force {
        if let Some(previous) = load_manifest(&mpath) {
            if is_no_op(&previous, stage.name(), &ctx.config_digest, &input_digests) {
                log_line(stage.name(), "-", "manifest match, skipping stage");
                let skipped: Skips = previous
                    .moments
                    .iter()
                    .filter(|(_, v)| v.starts_with("skipped"))
                    .map(|(k, v)| {
                        (
                            MomentKey {
                                video_id: k.clone(),
                                t_s: 0.0,
                                t_e: 0.0,
                            },
                            v.clone(),
                        )
                    })
                    .collect();
                return Ok(StageReport {
                    stage: stage.name(),
                    processed: previous.moments.len() - skipped.len(),
                    skipped,
                    no_op: true,
                });
            }
        }
    }
    log_line(stage.name(), "-", "stage start");

    let (processed, skipped) = match spec {
        StageSpec::Keyframes {
            moments,
            frames,
            out,
        } => stage_keyframes(ctx, moments, frames, out)?,
        StageSpec::CaptionStatics {
            moments,
            keyframes,
            out_raw,
            out_candidates,
        } => stage_caption_statics(ctx, moments, keyframes, out_raw, out_candidates)?,
        StageSpec::CaptionDynamics {
            moments,
            frames,
            out_raw,
            out_candidates,
        } => stage_caption_dynamics(ctx, moments, frames, out_raw, out_candidates)?,
        StageSpec::Perturb { moments, out } => stage_perturb(ctx, moments, out)?,
        StageSpec::Embed {
            moments,
            disturbed,
            statics,
            dynamics,
            frames,
            out_train,
            out_candidates,
        } => stage_embed(
            ctx,
            moments,
            disturbed,
            statics,
            dynamics,
            frames,
            out_train,
            out_candidates,
        )?,
        StageSpec::TrainEvaluator {
            train_embeddings,
            out_model,
            out_trace,
        } => stage_train(ctx, train_embeddings, out_model, out_trace)?,
        StageSpec::Score {
            moments,
            candidate_embeddings,
            statics,
            dynamics,
            model,
            out,
        } => stage_score(ctx, moments, candidate_embeddings, statics, dynamics, model, out)?,
        StageSpec::Select { scored, out } => stage_select(ctx, scored, out)?,
        StageSpec::Stats { input, schema, out } => stage_stats(ctx, input, *schema, out)?,
        StageSpec::EvalMetrics {
            predictions,
            ground_truth,
            out,
        } => stage_eval_metrics(ctx, predictions, ground_truth, out)?,
    };

    let mut moments_map = std::collections::BTreeMap::new();
    for key in &processed {
        moments_map.insert(key.to_string(), "ok".to_string());
    }
    for (key, reason) in &skipped {
        moments_map.insert(key.to_string(), format!("skipped: {reason}"));
        log_line(stage.name(), &key.to_string(), &format!("skipped: {reason}"));
    }
    let manifest = StageManifest {
        stage: stage.name().to_string(),
        config_digest: ctx.config_digest.clone(),
        input_digests,
        outputs: spec
            .outputs()
            .iter()
            .map(|p| p.to_string_lossy().into_owned())
            .collect(),
        moments: moments_map,
    };
    save_manifest(&manifest, &mpath)?;
    log_line(
        stage.name(),
        "-",
        &format!(
            "stage done: {} ok, {} skipped",
            processed.len(),
            skipped.len()
        ),
    );
    Ok(StageReport {
        stage: stage.name(),
        processed: processed.len(),
        skipped,
        no_op: false,
    })
}

/// Split parallel per-moment results into ordered successes and skips.
fn partition<T>(
    moments: &[MomentRecord],
    results: Vec<Result<T, String>>,
) -> (Vec<MomentKey>, Vec<T>, Skips) {
    let mut ok_keys = Vec::new();
    let mut ok_values = Vec::new();
    let mut skips = Vec::new();
    for (moment, result) in moments.iter().zip(results) {
        match result {
            Ok(value) => {
                ok_keys.push(moment.key());
                ok_values.push(value);
            }
            Err(reason) => skips.push((moment.key(), reason)),
        }
    }
    (ok_keys, ok_values, skips)
}

fn stage_keyframes(
    ctx: &StageContext,
    moments_path: &Path,
    frames_dir: &Path,
    out: &Path,
) -> Result<(Vec<MomentKey>, Skips), PipelineError> {
    let moments: Vec<MomentRecord> = load_jsonl(moments_path)?;
    let provider = DirFrameProvider::new(frames_dir);
    let seg_cfg = ctx.config.keyframe.segmentation();
    let pool = ctx.pool(ctx.workers)?;
    let results: Vec<Result<KeyframeRecord, String>> = pool.install(|| {
        moments
            .par_iter()
            .map(|moment| {
                let seq = provider
                    .frames_for(&moment.key())
                    .map_err(|e| e.to_string())?;
                let segments = segment_moment(&seq, &seg_cfg).map_err(|e| e.to_string())?;
                let segments = segments
                    .into_iter()
                    .map(|s| {
                        let frame = match &s.mid_frame.handle {
                            FrameHandle::File(p) => p.to_string_lossy().into_owned(),
                            FrameHandle::Memory(_) => String::new(),
                        };
                        SegmentRecord {
                            start: s.start,
                            end: s.end,
                            mid_timestamp: s.mid_frame.timestamp,
                            frame,
                        }
                    })
                    .collect();
                Ok(KeyframeRecord {
                    video_id: moment.video_id.clone(),
                    t_s: moment.t_s,
                    t_e: moment.t_e,
                    segments,
                })
            })
            .collect()
    });
    let (keys, records, skips) = partition(&moments, results);
    save_jsonl(&records, out)?;
    Ok((keys, skips))
}

fn stage_caption_statics(
    ctx: &StageContext,
    moments_path: &Path,
    keyframes_path: &Path,
    out_raw: &Path,
    out_candidates: &Path,
) -> Result<(Vec<MomentKey>, Skips), PipelineError> {
    let moments: Vec<MomentRecord> = load_jsonl(moments_path)?;
    let keyframes: Vec<KeyframeRecord> = load_jsonl(keyframes_path)?;
    let by_key: HashMap<MomentKey, &KeyframeRecord> =
        keyframes.iter().map(|k| (k.key(), k)).collect();
    let image_client = ctx.chat_client(BackendRole::ImageLmm)?;
    let llm_client = ctx.chat_client(BackendRole::Llm)?;
    let prompts = ctx.prompts()?;
    let n_s = ctx.config.captioning.n_s;
    let seed = ctx.seed;
    let pool = ctx.pool(ctx.workers)?;

    type Out = (StaticsRawRecord, CandidatesRecord);
    let results: Vec<Result<Out, String>> = pool.install(|| {
        moments
            .par_iter()
            .map(|moment| {
                let record = by_key
                    .get(&moment.key())
                    .ok_or_else(|| "no keyframes for moment".to_string())?;
                // key frames of one moment run sequentially for cache locality
                let mut descriptions: Vec<FrameDescription> = Vec::new();
                for segment in &record.segments {
                    let frame = TimedFrame {
                        timestamp: segment.mid_timestamp,
                        handle: FrameHandle::File(PathBuf::from(&segment.frame)),
                    };
                    let d = describe_keyframe(&image_client, &prompts, &frame, &moment.q, seed)
                        .map_err(|e| e.to_string())?;
                    descriptions.push(d);
                }
                let list =
                    rewrite_statics(&llm_client, &prompts, &descriptions, &moment.q, n_s, seed)
                        .map_err(|e| e.to_string())?;
                Ok((
                    StaticsRawRecord {
                        video_id: moment.video_id.clone(),
                        t_s: moment.t_s,
                        t_e: moment.t_e,
                        descriptions: descriptions
                            .into_iter()
                            .map(|d| DescriptionRecord {
                                timestamp: d.timestamp,
                                foreground: d.foreground,
                                background: d.background,
                                full: d.full,
                            })
                            .collect(),
                    },
                    CandidatesRecord {
                        video_id: moment.video_id.clone(),
                        t_s: moment.t_s,
                        t_e: moment.t_e,
                        candidates: list.items,
                        under_count: list.under_count,
                        failed: false,
                    },
                ))
            })
            .collect()
    });
    let (keys, outputs, skips) = partition(&moments, results);
    let (raw, candidates): (Vec<_>, Vec<_>) = outputs.into_iter().unzip();
    save_jsonl(&raw, out_raw)?;
    save_jsonl(&candidates, out_candidates)?;
    Ok((keys, skips))
}

fn stage_caption_dynamics(
    ctx: &StageContext,
    moments_path: &Path,
    frames_dir: &Path,
    out_raw: &Path,
    out_candidates: &Path,
) -> Result<(Vec<MomentKey>, Skips), PipelineError> {
    let moments: Vec<MomentRecord> = load_jsonl(moments_path)?;
    let provider = DirFrameProvider::new(frames_dir);
    let llm_client = ctx.chat_client(BackendRole::Llm)?;
    let video_client = ctx.chat_client(BackendRole::VideoLmm)?;
    let prompts = ctx.prompts()?;
    let policy = FramePolicy::parse(&ctx.config.captioning.frame_policy)
        .map_err(PipelineError::Stage)?;
    let n_qa = ctx.config.captioning.n_qa;
    let n_d = ctx.config.captioning.n_d;
    let seed = ctx.seed;
    let workers = ctx
        .config
        .captioning
        .dynamics_workers
        .unwrap_or(ctx.workers);
    let pool = ctx.pool(workers)?;

    type Out = (DynamicsRawRecord, CandidatesRecord);
    let results: Vec<Result<Out, String>> = pool.install(|| {
        moments
            .par_iter()
            .map(|moment| {
                let questions = generate_questions(&llm_client, &prompts, &moment.q, n_qa, seed)
                    .map_err(|e| e.to_string())?;
                let seq = provider
                    .frames_for(&moment.key())
                    .map_err(|e| e.to_string())?;
                let sampled = sample_frames(&seq, &policy);
                let failed_record = |why: &str| {
                    (
                        DynamicsRawRecord {
                            video_id: moment.video_id.clone(),
                            t_s: moment.t_s,
                            t_e: moment.t_e,
                            pairs: Vec::new(),
                            description: String::new(),
                            under_count: false,
                            failed: true,
                        },
                        CandidatesRecord {
                            video_id: moment.video_id.clone(),
                            t_s: moment.t_s,
                            t_e: moment.t_e,
                            candidates: Vec::new(),
                            under_count: false,
                            failed: true,
                        },
                        why.to_string(),
                    )
                };
                let bundle = match answer_and_describe(
                    &video_client,
                    &prompts,
                    &sampled,
                    &questions,
                    &moment.q,
                    seed,
                ) {
                    Ok(bundle) => bundle,
                    Err(CaptionError::Backend(BackendError::Refused(why))) => {
                        // safety refusal: dynamics-failed, statics-only moment
                        let (raw, cands, why) = failed_record(&why);
                        log_line(
                            "caption-dynamics",
                            &moment.key().to_string(),
                            &format!("dynamics-failed: {why}"),
                        );
                        return Ok((raw, cands));
                    }
                    Err(e) => return Err(e.to_string()),
                };
                let list = rewrite_dynamics(&llm_client, &prompts, &bundle, &moment.q, n_d, seed)
                    .map_err(|e| e.to_string())?;
                Ok((
                    DynamicsRawRecord {
                        video_id: moment.video_id.clone(),
                        t_s: moment.t_s,
                        t_e: moment.t_e,
                        pairs: bundle
                            .pairs
                            .iter()
                            .map(|p| QaRecord {
                                question: p.question.clone(),
                                answer: p.answer.clone(),
                            })
                            .collect(),
                        description: bundle.description.clone(),
                        under_count: bundle.under_count,
                        failed: false,
                    },
                    CandidatesRecord {
                        video_id: moment.video_id.clone(),
                        t_s: moment.t_s,
                        t_e: moment.t_e,
                        candidates: list.items,
                        under_count: list.under_count,
                        failed: false,
                    },
                ))
            })
            .collect()
    });
    let (keys, outputs, skips) = partition(&moments, results);
    let (raw, candidates): (Vec<_>, Vec<_>) = outputs.into_iter().unzip();
    save_jsonl(&raw, out_raw)?;
    save_jsonl(&candidates, out_candidates)?;
    Ok((keys, skips))
}

fn stage_perturb(
    ctx: &StageContext,
    moments_path: &Path,
    out: &Path,
) -> Result<(Vec<MomentKey>, Skips), PipelineError> {
    let moments: Vec<MomentRecord> = load_jsonl(moments_path)?;
    let client = ctx.chat_client(BackendRole::Llm)?;
    let embedder = ctx.text_embedder()?;
    let prompts = ctx.prompts()?;
    let cfg = PerturbConfig {
        n_pos: ctx.config.perturb.n_pos,
        n_neg: ctx.config.perturb.n_neg,
        single_call: ctx.config.perturb.single_call,
    };
    let pool = ctx.pool(ctx.workers)?;
    let (sets, skip_records) = pool.install(|| {
        build_training_corpus(&moments, &client, embedder.as_ref(), &prompts, &cfg, ctx.seed)
    });
    let keys = sets.iter().map(|s| s.source.key()).collect();
    save_jsonl(&sets, out)?;
    let skips = skip_records
        .into_iter()
        .map(|s| (s.key, s.reason))
        .collect();
    Ok((keys, skips))
}

#[allow(clippy::too_many_arguments)]
fn stage_embed(
    ctx: &StageContext,
    moments_path: &Path,
    disturbed_path: &Path,
    statics_path: &Path,
    dynamics_path: &Path,
    frames_dir: &Path,
    out_train: &Path,
    out_candidates: &Path,
) -> Result<(Vec<MomentKey>, Skips), PipelineError> {
    let moments: Vec<MomentRecord> = load_jsonl(moments_path)?;
    let disturbed = crate::model::io::load_disturbed(disturbed_path)?;
    let statics: Vec<CandidatesRecord> = load_jsonl(statics_path)?;
    let dynamics: Vec<CandidatesRecord> = load_jsonl(dynamics_path)?;
    let disturbed_by_key: HashMap<MomentKey, &crate::model::DisturbedSet> =
        disturbed.iter().map(|d| (d.source.key(), d)).collect();
    let statics_by_key: HashMap<MomentKey, &CandidatesRecord> =
        statics.iter().map(|c| (c.key(), c)).collect();
    let dynamics_by_key: HashMap<MomentKey, &CandidatesRecord> =
        dynamics.iter().map(|c| (c.key(), c)).collect();

    let provider = DirFrameProvider::new(frames_dir);
    let text_embedder = ctx.text_embedder()?;
    let frame_embedder = ctx.frame_embedder()?;
    let frames_per_moment = ctx.config.evaluator.frames_per_moment;
    let pool = ctx.pool(ctx.workers)?;

    type Out = (Option<TrainEmbedRecord>, Option<CandEmbedRecord>);
    let results: Vec<Result<Out, String>> = pool.install(|| {
        moments
            .par_iter()
            .map(|moment| {
                let seq = provider
                    .frames_for(&moment.key())
                    .map_err(|e| e.to_string())?;
                let sampled = sample_frames(&seq, &FramePolicy::Uniform(frames_per_moment));
                if sampled.is_empty() {
                    return Err("no frames to embed".to_string());
                }
                let pngs: Vec<Vec<u8>> = sampled
                    .frames()
                    .iter()
                    .map(|f| f.handle.png_bytes().map_err(|e| e.to_string()))
                    .collect::<Result<_, String>>()?;
                let frame_vecs = frame_embedder
                    .embed_frames(&pngs)
                    .map_err(|e| e.to_string())?;
                let pooled = pool_moment_embedding(&frame_vecs).map_err(|e| e.to_string())?;
                let v: Vec<f64> = pooled.values().to_vec();

                let train = match disturbed_by_key.get(&moment.key()) {
                    Some(set) => {
                        let texts = vec![
                            moment.q.clone(),
                            set.best_pos.clone(),
                            set.best_static_neg.clone(),
                            set.best_dynamic_neg.clone(),
                        ];
                        let vecs = text_embedder.embed(&texts).map_err(|e| e.to_string())?;
                        let mut it = vecs.into_iter().map(|e| e.values().to_vec());
                        Some(TrainEmbedRecord {
                            video_id: moment.video_id.clone(),
                            t_s: moment.t_s,
                            t_e: moment.t_e,
                            v: v.clone(),
                            q: it.next().unwrap(),
                            pos: it.next().unwrap(),
                            sneg: it.next().unwrap(),
                            dneg: it.next().unwrap(),
                        })
                    }
                    None => None,
                };

                let static_texts = statics_by_key
                    .get(&moment.key())
                    .map(|c| c.candidates.clone())
                    .unwrap_or_default();
                let dynamic_texts = dynamics_by_key
                    .get(&moment.key())
                    .map(|c| c.candidates.clone())
                    .unwrap_or_default();
                let candidates = if static_texts.is_empty() && dynamic_texts.is_empty() {
                    None
                } else {
                    let mut texts = static_texts.clone();
                    texts.extend(dynamic_texts.iter().cloned());
                    let vecs = text_embedder.embed(&texts).map_err(|e| e.to_string())?;
                    let values: Vec<Vec<f64>> =
                        vecs.into_iter().map(|e| e.values().to_vec()).collect();
                    let (s, d) = values.split_at(static_texts.len());
                    Some(CandEmbedRecord {
                        video_id: moment.video_id.clone(),
                        t_s: moment.t_s,
                        t_e: moment.t_e,
                        v,
                        statics: s.to_vec(),
                        dynamics: d.to_vec(),
                    })
                };
                Ok((train, candidates))
            })
            .collect()
    });
    let (keys, outputs, skips) = partition(&moments, results);
    let mut train_records = Vec::new();
    let mut cand_records = Vec::new();
    for (train, cand) in outputs {
        if let Some(t) = train {
            train_records.push(t);
        }
        if let Some(c) = cand {
            cand_records.push(c);
        }
    }
    save_jsonl(&train_records, out_train)?;
    save_jsonl(&cand_records, out_candidates)?;
    Ok((keys, skips))
}

fn stage_train(
    ctx: &StageContext,
    train_path: &Path,
    out_model: &Path,
    out_trace: &Path,
) -> Result<(Vec<MomentKey>, Skips), PipelineError> {
    let records: Vec<TrainEmbedRecord> = load_jsonl(train_path)?;
    let corpus: Vec<TrainingItem<f64>> = records
        .iter()
        .map(|r| TrainingItem {
            v: r.v.clone(),
            q: r.q.clone(),
            pos: r.pos.clone(),
            sneg: r.sneg.clone(),
            dneg: r.dneg.clone(),
        })
        .collect();
    let trainer = ctx.config.evaluator.trainer(ctx.seed);
    let outcome = train(&corpus, &trainer)?;
    checkpoint::save_checkpoint(&outcome.model, &trainer, out_model)?;
    let mut trace = String::from("epoch,loss_contrastive,loss_matching,loss_total\n");
    for row in &outcome.trace {
        trace.push_str(&format!(
            "{},{},{},{}\n",
            row.epoch, row.contrastive, row.matching, row.total
        ));
    }
    atomic_write(out_trace, trace.as_bytes())?;
    let keys = records
        .iter()
        .map(|r| MomentKey {
            video_id: r.video_id.clone(),
            t_s: r.t_s,
            t_e: r.t_e,
        })
        .collect();
    Ok((keys, Vec::new()))
}

fn stage_score(
    ctx: &StageContext,
    moments_path: &Path,
    cand_embed_path: &Path,
    statics_path: &Path,
    dynamics_path: &Path,
    model_path: &Path,
    out: &Path,
) -> Result<(Vec<MomentKey>, Skips), PipelineError> {
    let moments: Vec<MomentRecord> = load_jsonl(moments_path)?;
    let embeds: Vec<CandEmbedRecord> = load_jsonl(cand_embed_path)?;
    let statics: Vec<CandidatesRecord> = load_jsonl(statics_path)?;
    let dynamics: Vec<CandidatesRecord> = load_jsonl(dynamics_path)?;
    let (model, _cfg) = checkpoint::load_checkpoint(model_path)?;
    let embeds_by_key: HashMap<MomentKey, &CandEmbedRecord> =
        embeds.iter().map(|e| (e.key(), e)).collect();
    let statics_by_key: HashMap<MomentKey, &CandidatesRecord> =
        statics.iter().map(|c| (c.key(), c)).collect();
    let dynamics_by_key: HashMap<MomentKey, &CandidatesRecord> =
        dynamics.iter().map(|c| (c.key(), c)).collect();

    let pool = ctx.pool(ctx.workers)?;
    let results: Vec<Result<AnnotatedMoment, String>> = pool.install(|| {
        moments
            .par_iter()
            .map(|moment| {
                let mut annotated = AnnotatedMoment::from_moment(moment.clone());
                let statics_rec = statics_by_key.get(&moment.key());
                let dynamics_rec = dynamics_by_key.get(&moment.key());
                annotated.dynamics_failed =
                    dynamics_rec.is_some_and(|r| r.failed);
                let Some(embed) = embeds_by_key.get(&moment.key()) else {
                    // no embeddings: moment goes through with no candidates
                    return Ok(annotated);
                };
                let static_texts: &[String] =
                    statics_rec.map(|r| r.candidates.as_slice()).unwrap_or(&[]);
                let dynamic_texts: &[String] =
                    dynamics_rec.map(|r| r.candidates.as_slice()).unwrap_or(&[]);
                if static_texts.len() != embed.statics.len()
                    || dynamic_texts.len() != embed.dynamics.len()
                {
                    return Err("candidate/embedding count mismatch".to_string());
                }
                let score_one = |text: &str, kind, vec: &Vec<f64>| -> Result<CaptionCandidate, String> {
                    let mut candidate = CaptionCandidate::new(text, kind);
                    let s = model
                        .score_pooled(&embed.v, vec)
                        .map_err(|e| e.to_string())?;
                    candidate.score = Some(s);
                    Ok(candidate)
                };
                for (text, vec) in static_texts.iter().zip(&embed.statics) {
                    annotated
                        .statics
                        .push(score_one(text, CaptionKind::Static, vec)?);
                }
                for (text, vec) in dynamic_texts.iter().zip(&embed.dynamics) {
                    annotated
                        .dynamics
                        .push(score_one(text, CaptionKind::Dynamic, vec)?);
                }
                Ok(annotated)
            })
            .collect()
    });
    let (keys, records, skips) = partition(&moments, results);
    save_jsonl(&records, out)?;
    Ok((keys, skips))
}

fn stage_select(
    ctx: &StageContext,
    scored_path: &Path,
    out: &Path,
) -> Result<(Vec<MomentKey>, Skips), PipelineError> {
    let scored = crate::model::io::load_annotated(scored_path)?;
    let threshold = ctx.config.evaluator.threshold;
    let mut records = Vec::with_capacity(scored.len());
    let mut keys = Vec::with_capacity(scored.len());
    let mut skips: Skips = Vec::new();
    for annotated in scored {
        let key = annotated.key();
        match select_and_filter(annotated, threshold) {
            Ok(selected) => {
                if selected.annotation_failed {
                    log_line("select", &key.to_string(), "annotation-failed: no candidates");
                }
                keys.push(key);
                records.push(selected);
            }
            Err(e) => skips.push((key, e.to_string())),
        }
    }
    save_jsonl(&records, out)?;
    Ok((keys, skips))
}

fn stage_stats(
    _ctx: &StageContext,
    input: &Path,
    schema: DatasetSchema,
    out: &Path,
) -> Result<(Vec<MomentKey>, Skips), PipelineError> {
    let (captions, keys): (Vec<String>, Vec<MomentKey>) = match load_dataset(input, schema)? {
        Dataset::Fig(records) => {
            let mut captions = Vec::new();
            let mut keys = Vec::new();
            for r in &records {
                for c in r.statics.iter().chain(r.dynamics.iter()) {
                    captions.push(c.text.clone());
                    keys.push(r.key());
                }
            }
            (captions, keys)
        }
        Dataset::Coarse(records) => (
            records.iter().map(|m| m.q.clone()).collect(),
            records.iter().map(|m| m.key()).collect(),
        ),
    };
    let tagger = LexiconTagger::bundled();
    let (stats, warnings) = analytics::compute_stats(&captions, &tagger)?;
    for w in &warnings {
        log_line("stats", &w.caption_index.to_string(), &w.detail);
    }
    let records: Vec<(String, MomentKey)> = captions
        .iter()
        .cloned()
        .zip(keys.iter().cloned())
        .collect();
    let (classes, instances) = analytics::count_many_to_many(&records);
    let report = StatsReport {
        captions: captions.len(),
        vocab_size: stats.vocab_size,
        avg_words: stats.avg_words,
        avg_nouns: stats.avg_nouns,
        avg_verbs: stats.avg_verbs,
        avg_adjs: stats.avg_adjs,
        many_to_many_classes: classes,
        many_to_many_instances: instances,
        counting_definition: "v1".to_string(),
    };
    let value = serde_json::to_value(&report)
        .map_err(|e| PipelineError::Stage(e.to_string()))?;
    let mut bytes = serde_json::to_vec_pretty(&value)
        .map_err(|e| PipelineError::Stage(e.to_string()))?;
    bytes.push(b'\n');
    atomic_write(out, &bytes)?;
    println!(
        "captions {}  vocab {}  avg words {:.2}  nouns {:.2}  verbs {:.2}  adjs {:.2}  m2m classes {} instances {} (definition v1)",
        report.captions,
        report.vocab_size,
        report.avg_words,
        report.avg_nouns,
        report.avg_verbs,
        report.avg_adjs,
        report.many_to_many_classes,
        report.many_to_many_instances,
    );
    let mut unique = std::collections::HashSet::new();
    let keys = keys
        .into_iter()
        .filter(|k| unique.insert(k.clone()))
        .collect();
    Ok((keys, Vec::new()))
}

fn stage_eval_metrics(
    _ctx: &StageContext,
    predictions_path: &Path,
    ground_truth_path: &Path,
    out: &Path,
) -> Result<(Vec<MomentKey>, Skips), PipelineError> {
    let preds = PredictionSet::load(predictions_path)?;
    let gt = GroundTruth::load(ground_truth_path)?;
    let mut rows: Vec<ReportRow> = Vec::new();
    let mut missing = 0usize;
    for (task, m, k) in analytics::metrics::standard_grid() {
        let outcome = analytics::recall_at(&preds, &gt, task, m.unwrap_or(0.0), k)?;
        missing = missing.max(outcome.missing_queries);
        rows.push(ReportRow {
            task,
            m,
            k,
            recall: outcome.recall,
        });
    }
    if missing > 0 {
        log_line(
            "eval-metrics",
            "-",
            &format!("{missing} queries missing from predictions, counted as misses"),
        );
    }
    let mut bytes = Vec::new();
    for row in &rows {
        let value = serde_json::to_value(row)
            .map_err(|e| PipelineError::Stage(e.to_string()))?;
        bytes.extend_from_slice(
            serde_json::to_string(&value)
                .map_err(|e| PipelineError::Stage(e.to_string()))?
                .as_bytes(),
        );
        bytes.push(b'\n');
    }
    atomic_write(out, &bytes)?;
    print!("{}", analytics::metrics::render_report(&rows));
    Ok((Vec::new(), Vec::new()))
}
