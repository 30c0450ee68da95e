//! Temporal IoU and recall metrics for VCMR / SVMR / VR.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::Validate;
use crate::num::Real;

use super::AnalyticsError;

/// A temporal span with `start < end`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeSpan<F: Real> {
    start: F,
    end: F,
}

impl<F: Real> TimeSpan<F> {
    pub fn new(start: F, end: F) -> Result<Self, AnalyticsError> {
        if !(start.is_finite() && end.is_finite()) || start >= end {
            return Err(AnalyticsError::InvalidSpan {
                start: start.to_f64_lossy(),
                end: end.to_f64_lossy(),
            });
        }
        Ok(Self { start, end })
    }

    pub fn start(&self) -> F {
        self.start
    }

    pub fn end(&self) -> F {
        self.end
    }

    pub fn length(&self) -> F {
        self.end - self.start
    }
}

/// Temporal intersection over union of two spans, in `[0, 1]`.
pub fn t_iou<F: Real>(a: TimeSpan<F>, b: TimeSpan<F>) -> F {
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(F::zero());
    let union = a.length() + b.length() - inter;
    if union <= F::zero() {
        return F::zero();
    }
    inter / union
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalTask {
    /// Corpus-level moment retrieval: video match and tIoU above threshold.
    Vcmr,
    /// Moment retrieval within the ground-truth video.
    Svmr,
    /// Whole-video retrieval: video match only.
    Vr,
}

impl RetrievalTask {
    pub fn label(&self) -> &'static str {
        match self {
            RetrievalTask::Vcmr => "vcmr",
            RetrievalTask::Svmr => "svmr",
            RetrievalTask::Vr => "vr",
        }
    }
}

/// One ranked proposal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankedPrediction {
    pub video_id: String,
    pub t_s: f64,
    pub t_e: f64,
    pub score: f64,
}

/// Line format of the predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub query_id: String,
    pub ranked: Vec<RankedPrediction>,
}

impl Validate for PredictionRecord {
    fn validate(&self) -> Result<(), String> {
        if self.query_id.trim().is_empty() {
            return Err("query_id must be non-empty".into());
        }
        for (rank, p) in self.ranked.iter().enumerate() {
            if !(p.t_s.is_finite() && p.t_e.is_finite()) || p.t_s >= p.t_e {
                return Err(format!("ranked[{rank}]: invalid span [{}, {}]", p.t_s, p.t_e));
            }
            if !p.score.is_finite() {
                return Err(format!("ranked[{rank}]: non-finite score"));
            }
            if rank > 0 && p.score > self.ranked[rank - 1].score {
                return Err(format!(
                    "scores must be non-increasing (rank {rank} rises)"
                ));
            }
        }
        Ok(())
    }
}

/// Ranked prediction lists per query.
#[derive(Debug, Clone, Default)]
pub struct PredictionSet {
    map: BTreeMap<String, Vec<RankedPrediction>>,
}

impl PredictionSet {
    pub fn from_records(records: Vec<PredictionRecord>) -> Self {
        Self {
            map: records
                .into_iter()
                .map(|r| (r.query_id, r.ranked))
                .collect(),
        }
    }

    pub fn load(path: &std::path::Path) -> Result<Self, AnalyticsError> {
        let records: Vec<PredictionRecord> = crate::model::io::load_jsonl(path)
            .map_err(|e| AnalyticsError::Dataset(e.to_string()))?;
        Ok(Self::from_records(records))
    }

    pub fn get(&self, query_id: &str) -> Option<&[RankedPrediction]> {
        self.map.get(query_id).map(Vec::as_slice)
    }
}

/// Line format of the ground-truth file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtRecord {
    pub query_id: String,
    pub video_id: String,
    pub t_s: f64,
    pub t_e: f64,
}

impl Validate for GtRecord {
    fn validate(&self) -> Result<(), String> {
        if self.query_id.trim().is_empty() {
            return Err("query_id must be non-empty".into());
        }
        if !(self.t_s.is_finite() && self.t_e.is_finite()) || self.t_s >= self.t_e {
            return Err(format!("invalid span [{}, {}]", self.t_s, self.t_e));
        }
        Ok(())
    }
}

/// Ground-truth moment per query.
#[derive(Debug, Clone, Default)]
pub struct GroundTruth {
    map: BTreeMap<String, (String, TimeSpan<f64>)>,
}

impl GroundTruth {
    pub fn from_records(records: Vec<GtRecord>) -> Result<Self, AnalyticsError> {
        let mut map = BTreeMap::new();
        for r in records {
            let span = TimeSpan::new(r.t_s, r.t_e)?;
            map.insert(r.query_id, (r.video_id, span));
        }
        Ok(Self { map })
    }

    pub fn load(path: &std::path::Path) -> Result<Self, AnalyticsError> {
        let records: Vec<GtRecord> = crate::model::io::load_jsonl(path)
            .map_err(|e| AnalyticsError::Dataset(e.to_string()))?;
        Self::from_records(records)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecallOutcome {
    pub recall: f64,
    /// Queries with no prediction list; each counts as a miss.
    pub missing_queries: usize,
}

/// Fraction of queries with at least one qualifying proposal in the top `K`.
/// A VCMR hit needs the right video and tIoU strictly above `m`; SVMR
/// restricts candidates to the ground-truth video first; VR only needs the
/// right video in the top `K`.
pub fn recall_at(
    preds: &PredictionSet,
    gt: &GroundTruth,
    task: RetrievalTask,
    m: f64,
    k: usize,
) -> Result<RecallOutcome, AnalyticsError> {
    if k == 0 {
        return Err(AnalyticsError::BadRankCutoff);
    }
    if matches!(task, RetrievalTask::Vcmr | RetrievalTask::Svmr) && !(0.0..=1.0).contains(&m) {
        return Err(AnalyticsError::BadThreshold(m));
    }
    if gt.is_empty() {
        return Err(AnalyticsError::Dataset("empty ground truth".into()));
    }
    let mut hits = 0usize;
    let mut missing = 0usize;
    for (query_id, (gt_video, gt_span)) in &gt.map {
        let Some(ranked) = preds.get(query_id) else {
            missing += 1;
            continue;
        };
        let hit = match task {
            RetrievalTask::Vcmr => ranked.iter().take(k).any(|p| {
                p.video_id == *gt_video
                    && TimeSpan::new(p.t_s, p.t_e)
                        .map(|span| t_iou(span, *gt_span) > m)
                        .unwrap_or(false)
            }),
            RetrievalTask::Svmr => ranked
                .iter()
                .filter(|p| p.video_id == *gt_video)
                .take(k)
                .any(|p| {
                    TimeSpan::new(p.t_s, p.t_e)
                        .map(|span| t_iou(span, *gt_span) > m)
                        .unwrap_or(false)
                }),
            RetrievalTask::Vr => ranked.iter().take(k).any(|p| p.video_id == *gt_video),
        };
        if hit {
            hits += 1;
        }
    }
    Ok(RecallOutcome {
        recall: hits as f64 / gt.map.len() as f64,
        missing_queries: missing,
    })
}

/// One line of the metric report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub task: RetrievalTask,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<f64>,
    pub k: usize,
    pub recall: f64,
}

/// Aligned text table of report rows.
pub fn render_report(rows: &[ReportRow]) -> String {
    let mut out = String::from("task   m     K     recall\n");
    for row in rows {
        let m = row
            .m
            .map(|m| format!("{m:.2}"))
            .unwrap_or_else(|| "-".into());
        out.push_str(&format!(
            "{:<6} {:<5} {:<5} {:.6}\n",
            row.task.label(),
            m,
            row.k,
            row.recall
        ));
    }
    out
}

/// The published evaluation grid: `m ∈ {0.5, 0.7}`, `K ∈ {1, 5, 10, 100}`
/// for VCMR and SVMR, plus `K` alone for VR.
pub fn standard_grid() -> Vec<(RetrievalTask, Option<f64>, usize)> {
    let mut grid = Vec::new();
    for task in [RetrievalTask::Vcmr, RetrievalTask::Svmr] {
        for m in [0.5, 0.7] {
            for k in [1usize, 5, 10, 100] {
                grid.push((task, Some(m), k));
            }
        }
    }
    for k in [1usize, 5, 10, 100] {
        grid.push((RetrievalTask::Vr, None, k));
    }
    grid
}
