//! Dataset statistics, many-to-many pair counting, and retrieval metrics.

pub mod metrics;
pub mod pos;

use std::collections::{HashMap, HashSet};

use thiserror::Error;

use crate::model::MomentKey;
use crate::text::{normalize_caption, tokenize};
use pos::{PosTag, PosTagger};

pub use metrics::{
    recall_at, t_iou, GroundTruth, GtRecord, PredictionRecord, PredictionSet, RankedPrediction,
    RecallOutcome, ReportRow, RetrievalTask, TimeSpan,
};

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("empty caption list")]
    EmptyCaptions,
    #[error("invalid span: start {start} must be < end {end}")]
    InvalidSpan { start: f64, end: f64 },
    #[error("rank cutoff K must be >= 1")]
    BadRankCutoff,
    #[error("tIoU threshold m={0} outside [0,1]")]
    BadThreshold(f64),
    #[error("prediction list for query {query} has increasing scores at rank {rank}")]
    UnsortedPredictions { query: String, rank: usize },
    #[error("{0}")]
    Dataset(String),
}

/// Corpus-level caption statistics.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DatasetStats {
    pub vocab_size: usize,
    pub avg_words: f64,
    pub avg_nouns: f64,
    pub avg_verbs: f64,
    pub avg_adjs: f64,
}

/// A caption the tagger refused, skipped with its error.
#[derive(Debug, Clone)]
pub struct StatsWarning {
    pub caption_index: usize,
    pub detail: String,
}

/// Tokenize, count, and tag every caption. Captions the tagger fails on are
/// skipped and reported as warnings.
pub fn compute_stats(
    captions: &[String],
    tagger: &dyn PosTagger,
) -> Result<(DatasetStats, Vec<StatsWarning>), AnalyticsError> {
    if captions.is_empty() {
        return Err(AnalyticsError::EmptyCaptions);
    }
    let mut vocab: HashSet<String> = HashSet::new();
    let mut warnings = Vec::new();
    let mut counted = 0usize;
    let (mut words, mut nouns, mut verbs, mut adjs) = (0usize, 0usize, 0usize, 0usize);
    'captions: for (caption_index, caption) in captions.iter().enumerate() {
        let tokens = tokenize(caption);
        let mut tags = Vec::with_capacity(tokens.len());
        for token in &tokens {
            match tagger.tag(token) {
                Ok(tag) => tags.push(tag),
                Err(e) => {
                    warnings.push(StatsWarning {
                        caption_index,
                        detail: e.to_string(),
                    });
                    continue 'captions;
                }
            }
        }
        counted += 1;
        words += tokens.len();
        for (token, tag) in tokens.into_iter().zip(tags) {
            vocab.insert(token);
            match tag {
                Some(PosTag::Noun) => nouns += 1,
                Some(PosTag::Verb) => verbs += 1,
                Some(PosTag::Adjective) => adjs += 1,
                _ => {}
            }
        }
    }
    if counted == 0 {
        return Err(AnalyticsError::EmptyCaptions);
    }
    let denom = counted as f64;
    Ok((
        DatasetStats {
            vocab_size: vocab.len(),
            avg_words: words as f64 / denom,
            avg_nouns: nouns as f64 / denom,
            avg_verbs: verbs as f64 / denom,
            avg_adjs: adjs as f64 / denom,
        },
        warnings,
    ))
}

/// Many-to-many counting, definition v1: a class is a normalized caption
/// attached to two or more distinct moments; instances are all records that
/// fall in such classes. Insensitive to record order.
pub fn count_many_to_many(records: &[(String, MomentKey)]) -> (usize, usize) {
    let mut groups: HashMap<String, (HashSet<&MomentKey>, usize)> = HashMap::new();
    for (caption, key) in records {
        let entry = groups
            .entry(normalize_caption(caption))
            .or_insert_with(|| (HashSet::new(), 0));
        entry.0.insert(key);
        entry.1 += 1;
    }
    let mut classes = 0usize;
    let mut instances = 0usize;
    for (moments, records_in_class) in groups.values() {
        if moments.len() >= 2 {
            classes += 1;
            instances += records_in_class;
        }
    }
    (classes, instances)
}
