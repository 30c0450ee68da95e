//! Domain types and dataset schemas shared by every pipeline stage.
//!
//! All records are immutable values once constructed and serialize to
//! line-delimited JSON with alphabetical key order (see [`io`]), so stage
//! outputs diff bit-exactly across re-runs.

pub mod io;

use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Dataset split a moment belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// One source annotation: a video moment with its coarse caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentRecord {
    pub video_id: String,
    pub t_s: f64,
    pub t_e: f64,
    pub q: String,
    pub split: Split,
}

impl MomentRecord {
    pub fn key(&self) -> MomentKey {
        MomentKey {
            video_id: self.video_id.clone(),
            t_s: self.t_s,
            t_e: self.t_e,
        }
    }
}

/// Identifies one moment across stage files: video id plus exact span.
///
/// Equality and hashing use the bit pattern of the timestamps; every stage
/// reads them from the same canonical file, so exact matching is sound.
#[derive(Debug, Clone)]
pub struct MomentKey {
    pub video_id: String,
    pub t_s: f64,
    pub t_e: f64,
}

impl PartialEq for MomentKey {
    fn eq(&self, other: &Self) -> bool {
        self.video_id == other.video_id
            && self.t_s.to_bits() == other.t_s.to_bits()
            && self.t_e.to_bits() == other.t_e.to_bits()
    }
}

impl Eq for MomentKey {}

impl std::hash::Hash for MomentKey {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.video_id.hash(state);
        self.t_s.to_bits().hash(state);
        self.t_e.to_bits().hash(state);
    }
}

impl fmt::Display for MomentKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{}..{}]", self.video_id, self.t_s, self.t_e)
    }
}

/// Whether a generated caption carries static (appearance) or dynamic
/// (motion/temporal) detail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptionKind {
    Static,
    Dynamic,
}

fn is_false(b: &bool) -> bool {
    !*b
}

/// A generated fine-grained caption, optionally scored by the evaluator.
///
/// The absent-before-scoring state is encoded as field omission, never a
/// sentinel number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionCandidate {
    pub text: String,
    pub kind: CaptionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "is_false")]
    pub filtered: bool,
}

impl CaptionCandidate {
    pub fn new(text: impl Into<String>, kind: CaptionKind) -> Self {
        Self {
            text: text.into(),
            kind,
            score: None,
            filtered: false,
        }
    }
}

/// Pointer to the chosen highest-score candidate within an [`AnnotatedMoment`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectedRef {
    pub kind: CaptionKind,
    pub index: usize,
}

/// A moment together with its generated caption candidates.
///
/// On disk this is the flat `fig.jsonl` record: the coarse fields plus
/// `statics`, `dynamics` and `selected`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotatedMoment {
    pub video_id: String,
    pub t_s: f64,
    pub t_e: f64,
    pub q: String,
    pub split: Split,
    pub statics: Vec<CaptionCandidate>,
    pub dynamics: Vec<CaptionCandidate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected: Option<SelectedRef>,
    #[serde(default, skip_serializing_if = "is_false")]
    pub dynamics_failed: bool,
    #[serde(default, skip_serializing_if = "is_false")]
    pub annotation_failed: bool,
}

impl AnnotatedMoment {
    pub fn from_moment(moment: MomentRecord) -> Self {
        Self {
            video_id: moment.video_id,
            t_s: moment.t_s,
            t_e: moment.t_e,
            q: moment.q,
            split: moment.split,
            statics: Vec::new(),
            dynamics: Vec::new(),
            selected: None,
            dynamics_failed: false,
            annotation_failed: false,
        }
    }

    pub fn moment(&self) -> MomentRecord {
        MomentRecord {
            video_id: self.video_id.clone(),
            t_s: self.t_s,
            t_e: self.t_e,
            q: self.q.clone(),
            split: self.split,
        }
    }

    pub fn key(&self) -> MomentKey {
        MomentKey {
            video_id: self.video_id.clone(),
            t_s: self.t_s,
            t_e: self.t_e,
        }
    }

    /// Candidate behind a selection pointer, if it exists.
    pub fn candidate(&self, sel: SelectedRef) -> Option<&CaptionCandidate> {
        match sel.kind {
            CaptionKind::Static => self.statics.get(sel.index),
            CaptionKind::Dynamic => self.dynamics.get(sel.index),
        }
    }
}

/// Positive rewrites and statics/dynamics-disturbed negatives for one coarse
/// caption, with the embedding-selected best of each list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbedSet {
    pub source: MomentRecord,
    pub positives: Vec<String>,
    pub static_negs: Vec<String>,
    pub dynamic_negs: Vec<String>,
    pub best_pos: String,
    pub best_static_neg: String,
    pub best_dynamic_neg: String,
}

/// Everything that can go wrong while validating a record's invariants.
///
/// Messages name the violated invariant; the loader attaches line numbers.
pub type InvariantError = String;

/// Record types that carry internal invariants checked at load time.
pub trait Validate {
    fn validate(&self) -> Result<(), InvariantError>;
}

impl Validate for MomentRecord {
    fn validate(&self) -> Result<(), InvariantError> {
        if !self.t_s.is_finite() || !self.t_e.is_finite() {
            return Err("timestamps must be finite".into());
        }
        if self.t_s < 0.0 {
            return Err(format!("t_s must be >= 0 (got {})", self.t_s));
        }
        if self.t_s >= self.t_e {
            return Err(format!("t_s < t_e violated (t_s={}, t_e={})", self.t_s, self.t_e));
        }
        if self.q.trim().is_empty() {
            return Err("q must be non-empty after whitespace trim".into());
        }
        Ok(())
    }
}

impl Validate for CaptionCandidate {
    fn validate(&self) -> Result<(), InvariantError> {
        if self.text.trim().is_empty() {
            return Err("caption text must be non-empty".into());
        }
        if let Some(s) = self.score {
            if !(0.0..=1.0).contains(&s) {
                return Err(format!("score must lie in [0,1] (got {s})"));
            }
        }
        Ok(())
    }
}

impl Validate for AnnotatedMoment {
    fn validate(&self) -> Result<(), InvariantError> {
        self.moment().validate()?;
        for (i, c) in self.statics.iter().enumerate() {
            c.validate().map_err(|e| format!("statics[{i}]: {e}"))?;
            if c.kind != CaptionKind::Static {
                return Err(format!("statics[{i}] must have kind=static"));
            }
        }
        for (i, c) in self.dynamics.iter().enumerate() {
            c.validate().map_err(|e| format!("dynamics[{i}]: {e}"))?;
            if c.kind != CaptionKind::Dynamic {
                return Err(format!("dynamics[{i}] must have kind=dynamic"));
            }
        }
        if let Some(sel) = self.selected {
            if self.candidate(sel).is_none() {
                return Err(format!(
                    "selected points at a missing candidate ({:?}, {})",
                    sel.kind, sel.index
                ));
            }
        }
        Ok(())
    }
}

impl Validate for DisturbedSet {
    fn validate(&self) -> Result<(), InvariantError> {
        self.source.validate()?;
        for (name, list) in [
            ("positives", &self.positives),
            ("static_negs", &self.static_negs),
            ("dynamic_negs", &self.dynamic_negs),
        ] {
            if list.is_empty() {
                return Err(format!("{name} must be non-empty"));
            }
            if list.iter().any(|s| s.trim().is_empty()) {
                return Err(format!("{name} contains an empty caption"));
            }
        }
        if !self.positives.contains(&self.best_pos) {
            return Err("best_pos must be one of positives".into());
        }
        if !self.static_negs.contains(&self.best_static_neg) {
            return Err("best_static_neg must be one of static_negs".into());
        }
        if !self.dynamic_negs.contains(&self.best_dynamic_neg) {
            return Err("best_dynamic_neg must be one of dynamic_negs".into());
        }
        Ok(())
    }
}

/// Opaque reference to a decoded RGB frame or an on-disk image file.
#[derive(Debug, Clone)]
pub enum FrameHandle {
    File(PathBuf),
    Memory(Arc<RgbImage>),
}

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("failed to read frame {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("failed to decode frame {path}: {source}")]
    Decode {
        path: PathBuf,
        source: image::ImageError,
    },
    #[error("failed to encode frame: {0}")]
    Encode(image::ImageError),
}

impl FrameHandle {
    /// Decode to pixel data. File handles are read and decoded on demand.
    pub fn decode(&self) -> Result<Arc<RgbImage>, FrameError> {
        match self {
            FrameHandle::Memory(img) => Ok(Arc::clone(img)),
            FrameHandle::File(path) => {
                let bytes = std::fs::read(path).map_err(|source| FrameError::Read {
                    path: path.clone(),
                    source,
                })?;
                let img = image::load_from_memory(&bytes).map_err(|source| FrameError::Decode {
                    path: path.clone(),
                    source,
                })?;
                Ok(Arc::new(img.to_rgb8()))
            }
        }
    }

    /// PNG bytes for transport to a model backend.
    pub fn png_bytes(&self) -> Result<Vec<u8>, FrameError> {
        match self {
            FrameHandle::File(path) => std::fs::read(path).map_err(|source| FrameError::Read {
                path: path.clone(),
                source,
            }),
            FrameHandle::Memory(img) => {
                let mut out = std::io::Cursor::new(Vec::new());
                img.write_to(&mut out, image::ImageFormat::Png)
                    .map_err(FrameError::Encode)?;
                Ok(out.into_inner())
            }
        }
    }
}

/// A frame with its timestamp in seconds.
#[derive(Debug, Clone)]
pub struct TimedFrame {
    pub timestamp: f64,
    pub handle: FrameHandle,
}

/// Ordered frames of one moment. Timestamps are strictly increasing and lie
/// within the moment span.
#[derive(Debug, Clone)]
pub struct FrameSequence {
    key: MomentKey,
    frames: Vec<TimedFrame>,
}

impl FrameSequence {
    pub fn new(key: MomentKey, frames: Vec<TimedFrame>) -> Result<Self, InvariantError> {
        let mut prev: Option<f64> = None;
        for f in &frames {
            if !f.timestamp.is_finite() {
                return Err("frame timestamp must be finite".into());
            }
            if f.timestamp < key.t_s || f.timestamp > key.t_e {
                return Err(format!(
                    "frame timestamp {} outside moment span [{}, {}]",
                    f.timestamp, key.t_s, key.t_e
                ));
            }
            if let Some(p) = prev {
                if f.timestamp <= p {
                    return Err(format!(
                        "frame timestamps must be strictly increasing ({} after {})",
                        f.timestamp, p
                    ));
                }
            }
            prev = Some(f.timestamp);
        }
        Ok(Self { key, frames })
    }

    pub fn key(&self) -> &MomentKey {
        &self.key
    }

    pub fn frames(&self) -> &[TimedFrame] {
        &self.frames
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn moment() -> MomentRecord {
        MomentRecord {
            video_id: "v1".into(),
            t_s: 0.0,
            t_e: 5.0,
            q: "a person runs".into(),
            split: Split::Train,
        }
    }

    #[test]
    fn moment_invariants() {
        assert!(moment().validate().is_ok());

        let mut bad = moment();
        bad.t_s = 6.0;
        let err = bad.validate().unwrap_err();
        assert!(err.contains("t_s < t_e"), "error names the invariant: {err}");

        let mut bad = moment();
        bad.q = "   ".into();
        assert!(bad.validate().is_err());

        let mut bad = moment();
        bad.t_s = -1.0;
        bad.t_e = 2.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn candidate_score_bounds() {
        let mut c = CaptionCandidate::new("x", CaptionKind::Static);
        assert!(c.validate().is_ok());
        c.score = Some(1.5);
        assert!(c.validate().is_err());
        c.score = Some(0.0);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn annotated_selected_must_exist() {
        let mut a = AnnotatedMoment::from_moment(moment());
        a.statics.push(CaptionCandidate::new("s", CaptionKind::Static));
        a.selected = Some(SelectedRef {
            kind: CaptionKind::Static,
            index: 0,
        });
        assert!(a.validate().is_ok());
        a.selected = Some(SelectedRef {
            kind: CaptionKind::Dynamic,
            index: 0,
        });
        assert!(a.validate().is_err());
    }

    #[test]
    fn annotated_kind_segregation() {
        let mut a = AnnotatedMoment::from_moment(moment());
        a.statics.push(CaptionCandidate::new("d", CaptionKind::Dynamic));
        assert!(a.validate().is_err());
    }

    #[test]
    fn disturbed_best_membership() {
        let d = DisturbedSet {
            source: moment(),
            positives: vec!["p1".into(), "p2".into()],
            static_negs: vec!["s1".into()],
            dynamic_negs: vec!["d1".into()],
            best_pos: "p2".into(),
            best_static_neg: "s1".into(),
            best_dynamic_neg: "d1".into(),
        };
        assert!(d.validate().is_ok());
        let mut bad = d.clone();
        bad.best_pos = "nope".into();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn frame_sequence_ordering() {
        let key = moment().key();
        let frame = |t: f64| TimedFrame {
            timestamp: t,
            handle: FrameHandle::Memory(Arc::new(RgbImage::new(2, 2))),
        };
        assert!(FrameSequence::new(key.clone(), vec![frame(0.5), frame(1.5)]).is_ok());
        assert!(FrameSequence::new(key.clone(), vec![frame(1.5), frame(0.5)]).is_err());
        assert!(FrameSequence::new(key, vec![frame(6.0)]).is_err());
    }
}
