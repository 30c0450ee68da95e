//! Disturbed caption generation and hard-negative selection.
//!
//! For each coarse caption the LLM writes same-meaning rewrites plus
//! statics- and dynamics-disturbed negatives; the embedder then picks the
//! closest positive and the farthest negative of each list as the training
//! triplet.

use rayon::prelude::*;
use thiserror::Error;

use crate::backends::{semantic_distance, BackendError, ChatClient, TextEmbedder};
use crate::captioning::{parse_numbered_list, request_numbered, CaptionError, PromptLibrary};
use crate::model::{DisturbedSet, MomentKey, MomentRecord};
use crate::text::normalize_caption;

#[derive(Debug, Error)]
pub enum PerturbError {
    #[error(transparent)]
    Caption(#[from] CaptionError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("empty candidate list: {0}")]
    EmptyCandidates(&'static str),
    #[error("precondition violated: {0}")]
    Precondition(String),
}

/// The three generated candidate lists for one coarse caption.
#[derive(Debug, Clone, PartialEq)]
pub struct DisturbedCandidates {
    pub positives: Vec<String>,
    pub static_negs: Vec<String>,
    pub dynamic_negs: Vec<String>,
}

/// What degraded during generation; recorded per moment, not stored in the
/// dataset record.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DisturbanceFlags {
    pub under_count: bool,
    /// Negatives dropped for being trivial restylings of the source caption.
    pub dropped_duplicates: usize,
}

/// Generation knobs.
#[derive(Debug, Clone, Copy)]
pub struct PerturbConfig {
    pub n_pos: usize,
    pub n_neg: usize,
    /// One multi-section LLM call instead of three single-purpose calls.
    pub single_call: bool,
}

fn drop_duplicates(negs: &mut Vec<String>, q_norm: &str, flags: &mut DisturbanceFlags) {
    let before = negs.len();
    negs.retain(|c| normalize_caption(c) != q_norm);
    flags.dropped_duplicates += before - negs.len();
}

/// LLM calls producing `n_pos` positives and `n_neg` negatives of each kind.
/// Negatives that normalize to the source caption are dropped and flagged.
pub fn generate_disturbed(
    client: &ChatClient,
    prompts: &PromptLibrary,
    q: &str,
    cfg: &PerturbConfig,
    seed: u64,
) -> Result<(DisturbedCandidates, DisturbanceFlags), PerturbError> {
    if q.trim().is_empty() {
        return Err(PerturbError::Precondition("coarse caption is empty".into()));
    }
    if cfg.n_pos < 1 || cfg.n_neg < 1 {
        return Err(PerturbError::Precondition(
            "n_pos and n_neg must be >= 1".into(),
        ));
    }
    let mut flags = DisturbanceFlags::default();
    let (mut positives, mut static_negs, mut dynamic_negs) = if cfg.single_call {
        let prompt = prompts.render(
            "disturb_combined",
            &[
                ("q", q),
                ("n_pos", &cfg.n_pos.to_string()),
                ("n_neg", &cfg.n_neg.to_string()),
            ],
        )?;
        let req = crate::backends::ChatRequest {
            system: prompts.system(),
            user: prompt,
            images: Vec::new(),
            temperature: client.temperature(),
            seed,
        };
        let text = client.chat(&req).map_err(CaptionError::Backend)?.text;
        let sections =
            crate::captioning::parse_labeled_sections(&text, &["POSITIVE", "STATIC-NEG", "DYNAMIC-NEG"])
                .map_err(|detail| CaptionError::Unparseable {
                    stage: "disturb_combined",
                    detail,
                })?;
        let mut lists: Vec<Vec<String>> =
            sections.iter().map(|s| parse_numbered_list(s)).collect();
        let dynamic = lists.pop().unwrap_or_default();
        let statics = lists.pop().unwrap_or_default();
        let positive = lists.pop().unwrap_or_default();
        (positive, statics, dynamic)
    } else {
        let run = |template: &'static str| -> Result<Vec<String>, PerturbError> {
            let prompt = prompts.render(template, &[("q", q), ("n", &count_for(template, cfg))])?;
            let list = request_numbered(
                client,
                prompts,
                &prompt,
                expected_for(template, cfg),
                seed,
                false,
                "generate_disturbed",
            )?;
            Ok(list.items)
        };
        (
            run("disturb_positive")?,
            run("disturb_static")?,
            run("disturb_dynamic")?,
        )
    };

    positives.truncate(cfg.n_pos);
    static_negs.truncate(cfg.n_neg);
    dynamic_negs.truncate(cfg.n_neg);

    let q_norm = normalize_caption(q);
    drop_duplicates(&mut static_negs, &q_norm, &mut flags);
    drop_duplicates(&mut dynamic_negs, &q_norm, &mut flags);

    if positives.len() < cfg.n_pos
        || static_negs.len() < cfg.n_neg
        || dynamic_negs.len() < cfg.n_neg
    {
        flags.under_count = true;
    }
    if positives.is_empty() {
        return Err(PerturbError::EmptyCandidates("positives"));
    }
    if static_negs.is_empty() {
        return Err(PerturbError::EmptyCandidates("static_negs"));
    }
    if dynamic_negs.is_empty() {
        return Err(PerturbError::EmptyCandidates("dynamic_negs"));
    }
    Ok((
        DisturbedCandidates {
            positives,
            static_negs,
            dynamic_negs,
        },
        flags,
    ))
}

fn count_for(template: &str, cfg: &PerturbConfig) -> String {
    expected_for(template, cfg).to_string()
}

fn expected_for(template: &str, cfg: &PerturbConfig) -> usize {
    if template == "disturb_positive" {
        cfg.n_pos
    } else {
        cfg.n_neg
    }
}

/// The selected triplet with the winning indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub best_pos: (usize, String),
    pub best_static_neg: (usize, String),
    pub best_dynamic_neg: (usize, String),
}

/// Embedding-based selection: the positive closest to `q`, and the negative
/// of each kind farthest from `q`. One embed call covers `q` and every
/// candidate; ties go to the lowest index.
pub fn select_best(
    q: &str,
    candidates: &DisturbedCandidates,
    embedder: &dyn TextEmbedder,
) -> Result<Selection, PerturbError> {
    if candidates.positives.is_empty() {
        return Err(PerturbError::EmptyCandidates("positives"));
    }
    if candidates.static_negs.is_empty() {
        return Err(PerturbError::EmptyCandidates("static_negs"));
    }
    if candidates.dynamic_negs.is_empty() {
        return Err(PerturbError::EmptyCandidates("dynamic_negs"));
    }
    let mut texts = Vec::with_capacity(
        1 + candidates.positives.len()
            + candidates.static_negs.len()
            + candidates.dynamic_negs.len(),
    );
    texts.push(q.to_string());
    texts.extend(candidates.positives.iter().cloned());
    texts.extend(candidates.static_negs.iter().cloned());
    texts.extend(candidates.dynamic_negs.iter().cloned());
    let vectors = embedder.embed(&texts)?;
    let (q_vec, rest) = vectors.split_first().expect("one vector per text");
    let distances: Vec<f64> = rest
        .iter()
        .map(|v| semantic_distance(q_vec, v))
        .collect::<Result<_, _>>()?;

    let n_pos = candidates.positives.len();
    let n_s = candidates.static_negs.len();
    let pos_d = &distances[..n_pos];
    let s_d = &distances[n_pos..n_pos + n_s];
    let d_d = &distances[n_pos + n_s..];

    let argmin = |ds: &[f64]| -> usize {
        let mut best = 0;
        for (i, d) in ds.iter().enumerate() {
            if *d < ds[best] {
                best = i;
            }
        }
        best
    };
    let argmax = |ds: &[f64]| -> usize {
        let mut best = 0;
        for (i, d) in ds.iter().enumerate() {
            if *d > ds[best] {
                best = i;
            }
        }
        best
    };

    let pi = argmin(pos_d);
    let si = argmax(s_d);
    let di = argmax(d_d);
    Ok(Selection {
        best_pos: (pi, candidates.positives[pi].clone()),
        best_static_neg: (si, candidates.static_negs[si].clone()),
        best_dynamic_neg: (di, candidates.dynamic_negs[di].clone()),
    })
}

/// One moment skipped during corpus building, with the reason.
#[derive(Debug, Clone)]
pub struct SkipRecord {
    pub key: MomentKey,
    pub reason: String,
}

/// Full disturbance pipeline for one moment.
pub fn disturb_moment(
    moment: &MomentRecord,
    client: &ChatClient,
    embedder: &dyn TextEmbedder,
    prompts: &PromptLibrary,
    cfg: &PerturbConfig,
    seed: u64,
) -> Result<(DisturbedSet, DisturbanceFlags), PerturbError> {
    let (candidates, flags) = generate_disturbed(client, prompts, &moment.q, cfg, seed)?;
    let selection = select_best(&moment.q, &candidates, embedder)?;
    Ok((
        DisturbedSet {
            source: moment.clone(),
            positives: candidates.positives,
            static_negs: candidates.static_negs,
            dynamic_negs: candidates.dynamic_negs,
            best_pos: selection.best_pos.1,
            best_static_neg: selection.best_static_neg.1,
            best_dynamic_neg: selection.best_dynamic_neg.1,
        },
        flags,
    ))
}

/// Build one `DisturbedSet` per moment; per-moment failures are collected as
/// skip records and never abort the batch. Output order follows input order.
pub fn build_training_corpus(
    moments: &[MomentRecord],
    client: &ChatClient,
    embedder: &dyn TextEmbedder,
    prompts: &PromptLibrary,
    cfg: &PerturbConfig,
    seed: u64,
) -> (Vec<DisturbedSet>, Vec<SkipRecord>) {
    let results: Vec<Result<(DisturbedSet, DisturbanceFlags), (MomentKey, String)>> = moments
        .par_iter()
        .map(|moment| {
            disturb_moment(moment, client, embedder, prompts, cfg, seed)
                .map_err(|e| (moment.key(), e.to_string()))
        })
        .collect();
    let mut sets = Vec::with_capacity(moments.len());
    let mut skips = Vec::new();
    for result in results {
        match result {
            Ok((set, _flags)) => sets.push(set),
            Err((key, reason)) => skips.push(SkipRecord { key, reason }),
        }
    }
    (sets, skips)
}
