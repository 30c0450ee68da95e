//! Fine-granularity aware noise evaluator.
//!
//! A desk-scale dual encoder over precomputed embeddings: frozen base
//! vectors, trainable linear projections `W_v`/`W_t`, cosine similarity
//! between projections, and a matching classifier
//! `c(v,q) = w · (p_v ⊙ p_q) + b`. Trained with hard-negative augmented
//! contrastive and matching losses; the sigmoid matching probability is the
//! per-caption confidence score.

pub mod checkpoint;
pub mod linalg;
pub mod loss;
pub mod train;

use thiserror::Error;

use crate::backends::EmbeddingVector;
use crate::model::{AnnotatedMoment, CaptionKind, SelectedRef};
use crate::num::{real, sigmoid, Real};
use linalg::{dot, hadamard, norm, Mat};

pub use loss::{
    contrastive_loss, contrastive_loss_with, matching_loss, matching_loss_with,
    sample_trivial_negatives, total_loss, total_loss_with_negatives, ContrastiveLoss, LossConfig,
    MatchingLoss, SampledNegatives, TotalLoss, TrainingItem,
};
pub use train::{train, EpochTrace, TrainOutcome, TrainerConfig};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("degenerate pool: mean of frame embeddings has zero norm")]
    DegeneratePool,
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("zero-norm projection for {role}")]
    ZeroNormProjection { role: &'static str },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid trainer config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("candidate {kind:?}[{index}] has no score")]
    MissingScore { kind: CaptionKind, index: usize },
}

/// Trainable parameters of the dual-encoder scorer.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluatorModel<F: Real> {
    /// Video projection, `d_p × d_e`.
    pub w_v: Mat<F>,
    /// Text projection, `d_p × d_e`.
    pub w_t: Mat<F>,
    /// Classifier weight, length `d_p`.
    pub w: Vec<F>,
    /// Classifier bias.
    pub b: F,
}

impl<F: Real> EvaluatorModel<F> {
    /// Identity-like projections, zero classifier: every initial matching
    /// score is exactly 0.5.
    pub fn init(d_e: usize, d_p: usize) -> Self {
        Self {
            w_v: Mat::identity_like(d_p, d_e, F::one()),
            w_t: Mat::identity_like(d_p, d_e, F::one()),
            w: vec![F::zero(); d_p],
            b: F::zero(),
        }
    }

    pub fn d_e(&self) -> usize {
        self.w_v.cols()
    }

    pub fn d_p(&self) -> usize {
        self.w_v.rows()
    }

    pub fn is_finite(&self) -> bool {
        self.w_v.is_finite()
            && self.w_t.is_finite()
            && self.w.iter().all(|v| v.is_finite())
            && self.b.is_finite()
    }

    fn check_dim(&self, v: &[F]) -> Result<(), EvalError> {
        if v.len() != self.d_e() {
            return Err(EvalError::Dimension {
                expected: self.d_e(),
                got: v.len(),
            });
        }
        Ok(())
    }

    pub fn project_video(&self, v: &[F]) -> Vec<F> {
        self.w_v.matvec(v)
    }

    pub fn project_text(&self, t: &[F]) -> Vec<F> {
        self.w_t.matvec(t)
    }

    /// Similarity `s(v, q)`: cosine of the two projections.
    pub fn similarity(&self, v_base: &[F], t_base: &[F]) -> Result<F, EvalError> {
        self.check_dim(v_base)?;
        self.check_dim(t_base)?;
        let p = self.project_video(v_base);
        let u = self.project_text(t_base);
        cosine(&p, &u)
    }

    /// Classifier head `c(v, q) = w · (p_v ⊙ p_q) + b`.
    pub fn classify(&self, v_base: &[F], t_base: &[F]) -> Result<F, EvalError> {
        self.check_dim(v_base)?;
        self.check_dim(t_base)?;
        let p = self.project_video(v_base);
        let u = self.project_text(t_base);
        Ok(dot(&self.w, &hadamard(&p, &u)) + self.b)
    }

    /// Matching confidence for a pooled moment embedding: `σ(c(v, q))`.
    pub fn score_pooled(&self, v_base: &[F], t_base: &[F]) -> Result<F, EvalError> {
        Ok(sigmoid(self.classify(v_base, t_base)?))
    }
}

fn cosine<F: Real>(p: &[F], u: &[F]) -> Result<F, EvalError> {
    let (np, nu) = (norm(p), norm(u));
    if np == F::zero() {
        return Err(EvalError::ZeroNormProjection { role: "video" });
    }
    if nu == F::zero() {
        return Err(EvalError::ZeroNormProjection { role: "text" });
    }
    Ok(dot(p, u) / (np * nu))
}

/// Parameter gradients, same shapes as the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<F: Real> {
    pub w_v: Mat<F>,
    pub w_t: Mat<F>,
    pub w: Vec<F>,
    pub b: F,
}

impl<F: Real> Gradients<F> {
    pub fn zeros(d_e: usize, d_p: usize) -> Self {
        Self {
            w_v: Mat::zeros(d_p, d_e),
            w_t: Mat::zeros(d_p, d_e),
            w: vec![F::zero(); d_p],
            b: F::zero(),
        }
    }

    pub fn add_scaled(&mut self, other: &Self, scale: F) {
        self.w_v.add_scaled(&other.w_v, scale);
        self.w_t.add_scaled(&other.w_t, scale);
        for (a, bv) in self.w.iter_mut().zip(&other.w) {
            *a += scale * *bv;
        }
        self.b += scale * other.b;
    }

    pub fn is_finite(&self) -> bool {
        self.w_v.is_finite()
            && self.w_t.is_finite()
            && self.w.iter().all(|v| v.is_finite())
            && self.b.is_finite()
    }

    /// Flatten in checkpoint order (W_v, W_t, w, b) for finite-difference
    /// comparisons.
    pub fn flatten(&self) -> Vec<F> {
        let mut out = Vec::new();
        out.extend_from_slice(self.w_v.data());
        out.extend_from_slice(self.w_t.data());
        out.extend_from_slice(&self.w);
        out.push(self.b);
        out
    }
}

impl<F: Real> EvaluatorModel<F> {
    /// Gradient-descent step: `params -= lr * grads`.
    pub fn apply_gradients(&mut self, grads: &Gradients<F>, lr: F) {
        self.w_v.add_scaled(&grads.w_v, -lr);
        self.w_t.add_scaled(&grads.w_t, -lr);
        for (p, g) in self.w.iter_mut().zip(&grads.w) {
            *p -= lr * *g;
        }
        self.b -= lr * grads.b;
    }

    /// Parameter count, flattened order matching [`Gradients::flatten`].
    pub fn param_len(&self) -> usize {
        2 * self.d_e() * self.d_p() + self.d_p() + 1
    }

    pub fn param_get(&self, idx: usize) -> F {
        let mat = self.d_e() * self.d_p();
        if idx < mat {
            self.w_v.data()[idx]
        } else if idx < 2 * mat {
            self.w_t.data()[idx - mat]
        } else if idx < 2 * mat + self.d_p() {
            self.w[idx - 2 * mat]
        } else {
            self.b
        }
    }

    pub fn param_add(&mut self, idx: usize, delta: F) {
        let mat = self.d_e() * self.d_p();
        if idx < mat {
            self.w_v.data_mut()[idx] += delta;
        } else if idx < 2 * mat {
            self.w_t.data_mut()[idx - mat] += delta;
        } else if idx < 2 * mat + self.d_p() {
            let i = idx - 2 * mat;
            self.w[i] += delta;
        } else {
            self.b += delta;
        }
    }
}

/// Mean of frame embeddings, unit-normalized.
pub fn pool_moment_embedding<F: Real>(
    frame_embeddings: &[EmbeddingVector<F>],
) -> Result<EmbeddingVector<F>, EvalError> {
    if frame_embeddings.is_empty() {
        return Err(EvalError::Empty("frame embeddings"));
    }
    let dim = frame_embeddings[0].dim();
    let mut mean = vec![F::zero(); dim];
    for e in frame_embeddings {
        if e.dim() != dim {
            return Err(EvalError::Dimension {
                expected: dim,
                got: e.dim(),
            });
        }
        for (m, v) in mean.iter_mut().zip(e.values()) {
            *m += *v;
        }
    }
    let count = real::<F>(frame_embeddings.len() as f64);
    for m in &mut mean {
        *m /= count;
    }
    EmbeddingVector::new(mean)
        .map_err(|_| EvalError::NonFinite("pooled embedding"))?
        .into_unit()
        .map_err(|_| EvalError::DegeneratePool)
}

/// Matching confidence of a caption against a moment given its frame
/// embeddings: `σ(c(pool(frames), caption))`, in `(0, 1)`.
pub fn score<F: Real>(
    model: &EvaluatorModel<F>,
    v_frame_embeddings: &[EmbeddingVector<F>],
    caption_embedding: &EmbeddingVector<F>,
) -> Result<F, EvalError> {
    let pooled = pool_moment_embedding(v_frame_embeddings)?;
    model.score_pooled(pooled.values(), caption_embedding.values())
}

/// Set `selected` to the highest-scoring candidate across statics and
/// dynamics (tie: static kind first, then lowest index) and flag candidates
/// under the threshold as filtered. A moment with no candidates is marked
/// annotation-failed.
pub fn select_and_filter(
    mut annotated: AnnotatedMoment,
    threshold: Option<f64>,
) -> Result<AnnotatedMoment, EvalError> {
    let mut best: Option<(f64, CaptionKind, usize)> = None;
    for (kind, list) in [
        (CaptionKind::Static, &annotated.statics),
        (CaptionKind::Dynamic, &annotated.dynamics),
    ] {
        for (index, candidate) in list.iter().enumerate() {
            let score = candidate
                .score
                .ok_or(EvalError::MissingScore { kind, index })?;
            if best.is_none_or(|(top, _, _)| score > top) {
                best = Some((score, kind, index));
            }
        }
    }
    match best {
        Some((_, kind, index)) => {
            annotated.selected = Some(SelectedRef { kind, index });
            annotated.annotation_failed = false;
        }
        None => {
            annotated.selected = None;
            annotated.annotation_failed = true;
        }
    }
    if let Some(threshold) = threshold {
        for candidate in annotated
            .statics
            .iter_mut()
            .chain(annotated.dynamics.iter_mut())
        {
            candidate.filtered = candidate.score.is_some_and(|s| s < threshold);
        }
    }
    Ok(annotated)
}
