//! Fine-grained video-text annotation pipeline.
//!
//! Generates statics/dynamics-enhanced caption candidates for video moments
//! through pluggable model backends, trains a small dual-encoder noise
//! evaluator with hard-negative augmented losses, scores and filters the
//! candidates, and evaluates moment-retrieval predictions.
//!
//! The numeric kernels are generic over [`num::Real`] (`f32` or `f64`);
//! the aliases below fix the pipeline's working precision.

pub mod analytics;
pub mod backends;
pub mod captioning;
pub mod config;
pub mod evaluator;
pub mod keyframe;
pub mod model;
pub mod num;
pub mod perturb;
pub mod pipeline;
pub mod text;

/// Working scalar for pipeline I/O and the CLI.
pub type Scalar = f64;

/// Embedding vector at pipeline precision.
pub type Embedding = backends::EmbeddingVector<Scalar>;

/// Evaluator model at pipeline precision.
pub type Evaluator = evaluator::EvaluatorModel<Scalar>;

/// Parameter gradients at pipeline precision.
pub type Gradients = evaluator::Gradients<Scalar>;

/// Temporal span at pipeline precision.
pub type Span = analytics::TimeSpan<Scalar>;
