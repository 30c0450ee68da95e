//! Content-based moment segmentation and key-frame selection.
//!
//! A moment is split into at most `L` segments at frames whose content score
//! to their predecessor exceeds a threshold. The threshold is found by
//! bisection over a configured range so the segment count stays under the
//! cap while allowing as many segments as possible. Each segment contributes
//! its mid-time frame as a key frame.

pub mod frames;

use image::RgbImage;
use thiserror::Error;

use crate::model::{FrameError, FrameSequence, TimedFrame};
use crate::num::{real, Real};

#[derive(Debug, Error)]
pub enum KeyframeError {
    #[error("frame sequence is empty")]
    EmptyFrames,
    #[error("frame dimensions differ: {a_w}x{a_h} vs {b_w}x{b_h}")]
    DimensionMismatch {
        a_w: u32,
        a_h: u32,
        b_w: u32,
        b_h: u32,
    },
    #[error("invalid segmentation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("frame provider: {0}")]
    Provider(String),
    #[error("frame decoder exited with status {status}: {detail}")]
    Decoder { status: i32, detail: String },
}

/// Controls the adaptive threshold search.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationConfig<F: Real> {
    /// Maximum number of segments (`L`).
    pub max_segments: usize,
    /// First probe of the threshold search.
    pub initial_threshold: F,
    pub theta_min: F,
    pub theta_max: F,
    pub max_iterations: usize,
    /// Analysis sampling rate over the source frames.
    pub analysis_fps: F,
}

impl<F: Real> Default for SegmentationConfig<F> {
    fn default() -> Self {
        Self {
            max_segments: 1,
            initial_threshold: real(27.0),
            theta_min: real(1.0),
            theta_max: real(100.0),
            max_iterations: 20,
            analysis_fps: real(2.0),
        }
    }
}

impl<F: Real> SegmentationConfig<F> {
    pub fn validate(&self) -> Result<(), KeyframeError> {
        if self.max_segments < 1 {
            return Err(KeyframeError::InvalidConfig("max_segments must be >= 1".into()));
        }
        if self.theta_min >= self.theta_max {
            return Err(KeyframeError::InvalidConfig(
                "theta_min must be < theta_max".into(),
            ));
        }
        if self.initial_threshold <= F::zero() {
            return Err(KeyframeError::InvalidConfig(
                "initial_threshold must be > 0".into(),
            ));
        }
        if self.max_iterations < 1 {
            return Err(KeyframeError::InvalidConfig(
                "max_iterations must be >= 1".into(),
            ));
        }
        if self.analysis_fps <= F::zero() {
            return Err(KeyframeError::InvalidConfig("analysis_fps must be > 0".into()));
        }
        Ok(())
    }
}

/// One output segment with its key frame.
#[derive(Debug, Clone)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
    pub mid_frame: TimedFrame,
}

/// How the threshold search resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationPlan<F: Real> {
    /// Indices of frames that open a new segment (ascending, never 0).
    pub cuts: Vec<usize>,
    pub threshold: F,
    /// Bisection iterations used.
    pub iterations: usize,
}

fn hue_sat_luma(pixel: &image::Rgb<u8>) -> (f64, f64, f64) {
    let r = pixel.0[0] as f64 / 255.0;
    let g = pixel.0[1] as f64 / 255.0;
    let b = pixel.0[2] as f64 / 255.0;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    // Hue normalized to [0, 1); achromatic pixels get hue 0.
    let hue = if delta == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / delta).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let sat = if max == 0.0 { 0.0 } else { delta / max };
    let luma = 0.299 * r + 0.587 * g + 0.114 * b;
    (hue, sat, luma)
}

/// Content change score between two same-sized frames.
///
/// Mean absolute per-pixel difference of the hue/saturation/luma channels
/// (each normalized to `[0,1]`), averaged over the three channels and scaled
/// to `[0, 100]`. Identical frames score 0; black vs white scores `100/3`
/// (pure luma change).
pub fn content_score<F: Real>(a: &RgbImage, b: &RgbImage) -> Result<F, KeyframeError> {
    if a.dimensions() != b.dimensions() {
        let (a_w, a_h) = a.dimensions();
        let (b_w, b_h) = b.dimensions();
        return Err(KeyframeError::DimensionMismatch { a_w, a_h, b_w, b_h });
    }
    let mut acc = 0.0f64;
    for (pa, pb) in a.pixels().zip(b.pixels()) {
        let (ha, sa, la) = hue_sat_luma(pa);
        let (hb, sb, lb) = hue_sat_luma(pb);
        acc += (ha - hb).abs() + (sa - sb).abs() + (la - lb).abs();
    }
    let pixels = (a.width() * a.height()) as f64;
    Ok(real(100.0 * acc / (3.0 * pixels)))
}

fn count_cuts<F: Real>(scores: &[F], threshold: F) -> usize {
    scores.iter().filter(|s| **s > threshold).count()
}

/// Find the smallest threshold in `[theta_min, theta_max]` whose cut count
/// keeps the segment count at or under the cap. If even `theta_max` cuts too
/// often, the plan keeps only the strongest cuts.
pub fn plan_segments<F: Real>(
    scores: &[F],
    cfg: &SegmentationConfig<F>,
) -> Result<SegmentationPlan<F>, KeyframeError> {
    cfg.validate()?;
    let cap = cfg.max_segments;
    let fits = |theta: F| count_cuts(scores, theta) < cap;

    let mut iterations = 0usize;
    let threshold = if fits(cfg.theta_min) {
        cfg.theta_min
    } else if !fits(cfg.theta_max) {
        // No threshold in range is permissive enough; cap explicitly below.
        cfg.theta_max
    } else {
        let mut lo = cfg.theta_min;
        let mut hi = cfg.theta_max;
        if cfg.initial_threshold > lo && cfg.initial_threshold < hi {
            if fits(cfg.initial_threshold) {
                hi = cfg.initial_threshold;
            } else {
                lo = cfg.initial_threshold;
            }
        }
        for _ in 0..cfg.max_iterations {
            iterations += 1;
            let two = real::<F>(2.0);
            let mid = (lo + hi) / two;
            if fits(mid) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    };

    let mut cuts: Vec<usize> = scores
        .iter()
        .enumerate()
        .filter(|(_, s)| **s > threshold)
        .map(|(i, _)| i + 1)
        .collect();
    if cuts.len() + 1 > cap {
        // Keep the strongest cap-1 cuts; ties resolve to the earliest.
        let mut ranked: Vec<usize> = cuts.clone();
        ranked.sort_by(|a, b| {
            scores[b - 1]
                .partial_cmp(&scores[a - 1])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(b))
        });
        ranked.truncate(cap.saturating_sub(1));
        ranked.sort_unstable();
        cuts = ranked;
    }
    Ok(SegmentationPlan {
        cuts,
        threshold,
        iterations,
    })
}

/// Segment spans over analysis-frame timestamps for a given cut plan.
/// Returns `(start, end, mid_frame_index)` triples partitioning
/// `[timestamps[0], timestamps[n-1]]`.
#[allow(clippy::needless_range_loop)]
pub fn spans_from_cuts(timestamps: &[f64], cuts: &[usize]) -> Vec<(f64, f64, usize)> {
    let n = timestamps.len();
    debug_assert!(n > 0);
    let mut starts = Vec::with_capacity(cuts.len() + 1);
    starts.push(0usize);
    starts.extend_from_slice(cuts);
    let mut out = Vec::with_capacity(starts.len());
    for (j, &first) in starts.iter().enumerate() {
        let next_start = starts.get(j + 1).copied().unwrap_or(n);
        let start_ts = timestamps[first];
        let end_ts = if j + 1 < starts.len() {
            timestamps[next_start]
        } else {
            timestamps[n - 1]
        };
        let mid_time = (start_ts + end_ts) / 2.0;
        let last = next_start.saturating_sub(1).max(first).min(n - 1);
        let mut best = first;
        let mut best_dist = (timestamps[first] - mid_time).abs();
        for idx in first..=last {
            let d = (timestamps[idx] - mid_time).abs();
            if d < best_dist {
                best = idx;
                best_dist = d;
            }
        }
        out.push((start_ts, end_ts, best));
    }
    out
}

/// Pick analysis frames from the source sequence at roughly `analysis_fps`:
/// for each grid time the nearest source frame, deduplicated. Returns indices
/// into the source frames.
pub fn analysis_indices(timestamps: &[f64], fps: f64) -> Vec<usize> {
    let n = timestamps.len();
    if n <= 1 {
        return (0..n).collect();
    }
    let first = timestamps[0];
    let last = timestamps[n - 1];
    let step = 1.0 / fps;
    let grid_points = ((last - first) / step).floor() as usize + 1;
    let mut picked = Vec::new();
    let mut cursor = 0usize;
    for g in 0..grid_points {
        let target = first + g as f64 * step;
        while cursor + 1 < n
            && (timestamps[cursor + 1] - target).abs() <= (timestamps[cursor] - target).abs()
        {
            cursor += 1;
        }
        if picked.last() != Some(&cursor) {
            picked.push(cursor);
        }
    }
    picked
}

/// Split a moment into at most `L` segments and select each segment's
/// mid-time frame as its key frame.
pub fn segment_moment(
    seq: &FrameSequence,
    cfg: &SegmentationConfig<f64>,
) -> Result<Vec<Segment>, KeyframeError> {
    cfg.validate()?;
    if seq.is_empty() {
        return Err(KeyframeError::EmptyFrames);
    }
    let source = seq.frames();
    let all_ts: Vec<f64> = source.iter().map(|f| f.timestamp).collect();
    let indices = analysis_indices(&all_ts, cfg.analysis_fps);
    let analysis: Vec<&TimedFrame> = indices.iter().map(|&i| &source[i]).collect();
    let timestamps: Vec<f64> = analysis.iter().map(|f| f.timestamp).collect();

    let mut scores: Vec<f64> = Vec::with_capacity(analysis.len().saturating_sub(1));
    if analysis.len() > 1 {
        let mut prev = analysis[0].handle.decode()?;
        for frame in &analysis[1..] {
            let img = frame.handle.decode()?;
            scores.push(content_score(&prev, &img)?);
            prev = img;
        }
    }

    let plan = plan_segments(&scores, cfg)?;
    let segments = spans_from_cuts(&timestamps, &plan.cuts)
        .into_iter()
        .map(|(start, end, mid)| Segment {
            start,
            end,
            mid_frame: analysis[mid].clone(),
        })
        .collect();
    Ok(segments)
}
