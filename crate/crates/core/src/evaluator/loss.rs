//! Hard-negative augmented contrastive and matching losses with analytic
//! gradients.
//!
//! Contrastive: the video→text softmax for each moment runs over all `3B`
//! candidate captions in the batch (every anchor caption plus every
//! statics/dynamics-disturbed negative); the text→video softmax runs over
//! the `B` videos. Matching: a binary classifier is pushed up on the true
//! pair and down on one sampled trivial negative per side plus the moment's
//! own two hard negatives. The total loss re-evaluates both with the coarse
//! caption replaced by its best positive rewrite and averages the pairs.

use rand::Rng;

use crate::num::{ln_one_minus_sigmoid, ln_sigmoid, real, sigmoid, Real};

use super::linalg::{axpy, dot, hadamard, norm};
use super::{EvalError, EvaluatorModel, Gradients};

/// Per-moment operand carrier: pooled moment embedding plus the four caption
/// embeddings the losses consume.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingItem<F: Real> {
    /// Pooled moment embedding.
    pub v: Vec<F>,
    /// Coarse caption.
    pub q: Vec<F>,
    /// Best positive rewrite.
    pub pos: Vec<F>,
    /// Best statics-disturbed negative.
    pub sneg: Vec<F>,
    /// Best dynamics-disturbed negative.
    pub dneg: Vec<F>,
}

fn validate_batch<F: Real>(
    model: &EvaluatorModel<F>,
    batch: &[TrainingItem<F>],
) -> Result<(), EvalError> {
    if batch.is_empty() {
        return Err(EvalError::Empty("batch"));
    }
    let d_e = model.d_e();
    for item in batch {
        for field in [&item.v, &item.q, &item.pos, &item.sneg, &item.dneg] {
            if field.len() != d_e {
                return Err(EvalError::Dimension {
                    expected: d_e,
                    got: field.len(),
                });
            }
        }
    }
    Ok(())
}

/// Which embedding plays the anchor caption: the coarse caption itself or
/// its best positive rewrite (hard negatives stay unchanged either way).
fn anchor<F: Real>(item: &TrainingItem<F>, use_rewrite: bool) -> &[F] {
    if use_rewrite {
        &item.pos
    } else {
        &item.q
    }
}

struct Projections<F: Real> {
    /// `p_i = W_v v_i` per video.
    videos: Vec<Vec<F>>,
    video_norms: Vec<F>,
    /// `u = W_t x` per text slot `(item, {anchor, sneg, dneg})`.
    texts: Vec<[Vec<F>; 3]>,
    text_norms: Vec<[F; 3]>,
}

fn project_all<F: Real>(
    model: &EvaluatorModel<F>,
    batch: &[TrainingItem<F>],
    use_rewrite: bool,
) -> Result<Projections<F>, EvalError> {
    let mut videos = Vec::with_capacity(batch.len());
    let mut video_norms = Vec::with_capacity(batch.len());
    let mut texts = Vec::with_capacity(batch.len());
    let mut text_norms = Vec::with_capacity(batch.len());
    for item in batch {
        let p = model.project_video(&item.v);
        let np = norm(&p);
        if np == F::zero() {
            return Err(EvalError::ZeroNormProjection { role: "video" });
        }
        videos.push(p);
        video_norms.push(np);
        let u = [
            model.project_text(anchor(item, use_rewrite)),
            model.project_text(&item.sneg),
            model.project_text(&item.dneg),
        ];
        let nu = [norm(&u[0]), norm(&u[1]), norm(&u[2])];
        if nu.iter().any(|n| *n == F::zero()) {
            return Err(EvalError::ZeroNormProjection { role: "text" });
        }
        texts.push(u);
        text_norms.push(nu);
    }
    Ok(Projections {
        videos,
        video_norms,
        texts,
        text_norms,
    })
}

/// Adjoint buffers over projected vectors; folded into parameter gradients
/// at the end via rank-one updates with the base embeddings.
struct Adjoints<F: Real> {
    p_bar: Vec<Vec<F>>,
    u_bar: Vec<[Vec<F>; 3]>,
    w_bar: Vec<F>,
    b_bar: F,
}

impl<F: Real> Adjoints<F> {
    fn zeros(b: usize, d_p: usize) -> Self {
        Self {
            p_bar: vec![vec![F::zero(); d_p]; b],
            u_bar: vec![
                [
                    vec![F::zero(); d_p],
                    vec![F::zero(); d_p],
                    vec![F::zero(); d_p],
                ];
                b
            ],
            w_bar: vec![F::zero(); d_p],
            b_bar: F::zero(),
        }
    }

    /// `d s(v_i, t_{jk}) / d θ` contribution with weight `coeff`.
    fn add_similarity(
        &mut self,
        proj: &Projections<F>,
        i: usize,
        j: usize,
        k: usize,
        s: F,
        coeff: F,
    ) {
        let p = &proj.videos[i];
        let u = &proj.texts[j][k];
        let np = proj.video_norms[i];
        let nu = proj.text_norms[j][k];
        let inv = F::one() / (np * nu);
        let (cp, cu) = (coeff * inv, coeff * inv);
        let p_self = -coeff * s / (np * np);
        let u_self = -coeff * s / (nu * nu);
        axpy(&mut self.p_bar[i], cp, u);
        axpy(&mut self.p_bar[i], p_self, p);
        axpy(&mut self.u_bar[j][k], cu, p);
        axpy(&mut self.u_bar[j][k], u_self, u);
    }

    /// `d c(v_i, t_{jk}) / d θ` contribution with weight `coeff`.
    fn add_classifier(
        &mut self,
        model: &EvaluatorModel<F>,
        proj: &Projections<F>,
        i: usize,
        j: usize,
        k: usize,
        coeff: F,
    ) {
        let p = &proj.videos[i];
        let u = &proj.texts[j][k];
        axpy(&mut self.p_bar[i], coeff, &hadamard(&model.w, u));
        axpy(&mut self.u_bar[j][k], coeff, &hadamard(&model.w, p));
        axpy(&mut self.w_bar, coeff, &hadamard(p, u));
        self.b_bar += coeff;
    }

    fn into_gradients(
        self,
        model: &EvaluatorModel<F>,
        batch: &[TrainingItem<F>],
        use_rewrite: bool,
    ) -> Gradients<F> {
        let mut grads = Gradients::zeros(model.d_e(), model.d_p());
        for (i, item) in batch.iter().enumerate() {
            grads.w_v.add_outer(&self.p_bar[i], &item.v, F::one());
            grads
                .w_t
                .add_outer(&self.u_bar[i][0], anchor(item, use_rewrite), F::one());
            grads.w_t.add_outer(&self.u_bar[i][1], &item.sneg, F::one());
            grads.w_t.add_outer(&self.u_bar[i][2], &item.dneg, F::one());
        }
        grads.w = self.w_bar;
        grads.b = self.b_bar;
        grads
    }
}

fn cosine_from<F: Real>(proj: &Projections<F>, i: usize, j: usize, k: usize) -> F {
    dot(&proj.videos[i], &proj.texts[j][k]) / (proj.video_norms[i] * proj.text_norms[j][k])
}

/// Contrastive loss value with its two directional terms and gradients.
#[derive(Debug, Clone)]
pub struct ContrastiveLoss<F: Real> {
    pub value: F,
    /// Video→text contribution (already scaled by `-1/2B`).
    pub video_to_text: F,
    /// Text→video contribution; exactly zero for `B = 1`.
    pub text_to_video: F,
    pub gradients: Gradients<F>,
}

/// Hard-negative augmented contrastive loss over the coarse captions.
pub fn contrastive_loss<F: Real>(
    model: &EvaluatorModel<F>,
    batch: &[TrainingItem<F>],
    tau: F,
) -> Result<ContrastiveLoss<F>, EvalError> {
    contrastive_loss_with(model, batch, tau, false)
}

/// As [`contrastive_loss`], with the anchor caption switched to the best
/// positive rewrite when `use_rewrite` is set.
#[allow(clippy::needless_range_loop)]
pub fn contrastive_loss_with<F: Real>(
    model: &EvaluatorModel<F>,
    batch: &[TrainingItem<F>],
    tau: F,
    use_rewrite: bool,
) -> Result<ContrastiveLoss<F>, EvalError> {
    if tau <= F::zero() {
        return Err(EvalError::InvalidConfig("tau must be > 0".into()));
    }
    validate_batch(model, batch)?;
    let b = batch.len();
    let proj = project_all(model, batch, use_rewrite)?;
    let mut adjoints = Adjoints::zeros(b, model.d_p());
    let scale = F::one() / (real::<F>(2.0) * real::<F>(b as f64));
    let inv_tau = F::one() / tau;

    // all pairwise similarities: s[i][j*3+k] = s(v_i, t_{jk})
    let mut sims = vec![vec![F::zero(); 3 * b]; b];
    for i in 0..b {
        for j in 0..b {
            for k in 0..3 {
                sims[i][j * 3 + k] = cosine_from(&proj, i, j, k);
            }
        }
    }

    // video → text: softmax over all 3B candidate captions
    let mut v2t_sum = F::zero();
    for i in 0..b {
        let logits: Vec<F> = sims[i].iter().map(|s| *s * inv_tau).collect();
        let max = logits
            .iter()
            .cloned()
            .fold(F::neg_infinity(), |a, x| a.max(x));
        let denom: F = logits.iter().map(|l| (*l - max).exp()).sum();
        let log_denom = max + denom.ln();
        v2t_sum += logits[i * 3] - log_denom;
        for j in 0..b {
            for k in 0..3 {
                let sm = (logits[j * 3 + k] - log_denom).exp();
                let delta = if j == i && k == 0 { F::one() } else { F::zero() };
                let coeff = scale * inv_tau * (sm - delta);
                if coeff != F::zero() {
                    adjoints.add_similarity(&proj, i, j, k, sims[i][j * 3 + k], coeff);
                }
            }
        }
    }

    // text → video: softmax over the B videos for each anchor caption
    let mut t2v_sum = F::zero();
    for i in 0..b {
        let logits: Vec<F> = (0..b).map(|j| sims[j][i * 3] * inv_tau).collect();
        let max = logits
            .iter()
            .cloned()
            .fold(F::neg_infinity(), |a, x| a.max(x));
        let denom: F = logits.iter().map(|l| (*l - max).exp()).sum();
        let log_denom = max + denom.ln();
        t2v_sum += logits[i] - log_denom;
        for j in 0..b {
            let sm = (logits[j] - log_denom).exp();
            let delta = if j == i { F::one() } else { F::zero() };
            let coeff = scale * inv_tau * (sm - delta);
            if coeff != F::zero() {
                adjoints.add_similarity(&proj, j, i, 0, sims[j][i * 3], coeff);
            }
        }
    }

    let video_to_text = -scale * v2t_sum;
    let text_to_video = -scale * t2v_sum;
    let value = video_to_text + text_to_video;
    let gradients = adjoints.into_gradients(model, batch, use_rewrite);
    if !value.is_finite() || !gradients.is_finite() {
        return Err(EvalError::NonFinite("contrastive loss"));
    }
    Ok(ContrastiveLoss {
        value,
        video_to_text,
        text_to_video,
        gradients,
    })
}

/// One sampled trivial negative per anchor per batch, or none when `B = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledNegatives {
    /// For each video `i`: index `j ≠ i` of the trivial negative caption.
    pub text_for_video: Vec<Option<usize>>,
    /// For each caption `i`: index `j ≠ i` of the trivial negative video.
    pub video_for_text: Vec<Option<usize>>,
}

/// Draw the trivial negatives: text side first, then video side.
pub fn sample_trivial_negatives<R: Rng>(b: usize, rng: &mut R) -> SampledNegatives {
    let mut draw = |i: usize| {
        if b < 2 {
            None
        } else {
            let mut j = rng.gen_range(0..b - 1);
            if j >= i {
                j += 1;
            }
            Some(j)
        }
    };
    let text_for_video: Vec<Option<usize>> = (0..b).map(&mut draw).collect();
    let video_for_text: Vec<Option<usize>> = (0..b).map(&mut draw).collect();
    SampledNegatives {
        text_for_video,
        video_for_text,
    }
}

/// Matching loss value, trivial-negative term count, and gradients.
#[derive(Debug, Clone)]
pub struct MatchingLoss<F: Real> {
    pub value: F,
    /// Number of trivial-negative terms that entered the sum: zero for
    /// `B = 1`, `2B` otherwise.
    pub trivial_negative_terms: usize,
    pub gradients: Gradients<F>,
}

/// Matching loss over the coarse captions; trivial negatives drawn from
/// `rng`.
pub fn matching_loss<F: Real, R: Rng>(
    model: &EvaluatorModel<F>,
    batch: &[TrainingItem<F>],
    rng: &mut R,
) -> Result<MatchingLoss<F>, EvalError> {
    let negatives = sample_trivial_negatives(batch.len(), rng);
    matching_loss_with(model, batch, false, &negatives)
}

/// Matching loss with explicit trivial negatives, optionally anchored on the
/// positive rewrite.
pub fn matching_loss_with<F: Real>(
    model: &EvaluatorModel<F>,
    batch: &[TrainingItem<F>],
    use_rewrite: bool,
    negatives: &SampledNegatives,
) -> Result<MatchingLoss<F>, EvalError> {
    validate_batch(model, batch)?;
    let b = batch.len();
    if negatives.text_for_video.len() != b || negatives.video_for_text.len() != b {
        return Err(EvalError::InvalidConfig(
            "sampled negatives do not match batch size".into(),
        ));
    }
    let proj = project_all(model, batch, use_rewrite)?;
    let mut adjoints = Adjoints::zeros(b, model.d_p());
    let inv_b = F::one() / real::<F>(b as f64);
    let mut sum = F::zero();
    let mut trivial_negative_terms = 0usize;

    let classify = |i: usize, j: usize, k: usize| -> F {
        dot(&model.w, &hadamard(&proj.videos[i], &proj.texts[j][k])) + model.b
    };

    for i in 0..b {
        // positive pair
        let c_pos = classify(i, i, 0);
        sum += ln_sigmoid(c_pos);
        adjoints.add_classifier(model, &proj, i, i, 0, -inv_b * (F::one() - sigmoid(c_pos)));

        // negatives for the video: one sampled caption plus both hard negatives
        let mut video_negs: Vec<(usize, usize)> = Vec::with_capacity(3);
        if let Some(j) = negatives.text_for_video[i] {
            video_negs.push((j, 0));
            trivial_negative_terms += 1;
        }
        video_negs.push((i, 1));
        video_negs.push((i, 2));
        for (j, k) in video_negs {
            let c = classify(i, j, k);
            sum += ln_one_minus_sigmoid(c);
            adjoints.add_classifier(model, &proj, i, j, k, inv_b * sigmoid(c));
        }

        // negative video for the caption
        if let Some(j) = negatives.video_for_text[i] {
            let c = classify(j, i, 0);
            sum += ln_one_minus_sigmoid(c);
            adjoints.add_classifier(model, &proj, j, i, 0, inv_b * sigmoid(c));
            trivial_negative_terms += 1;
        }
    }

    let value = -inv_b * sum;
    let gradients = adjoints.into_gradients(model, batch, use_rewrite);
    if !value.is_finite() || !gradients.is_finite() {
        return Err(EvalError::NonFinite("matching loss"));
    }
    Ok(MatchingLoss {
        value,
        trivial_negative_terms,
        gradients,
    })
}

/// Loss weights and temperature for the combined objective.
#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig<F: Real> {
    pub tau: F,
    pub lambda_c: F,
    pub lambda_m: F,
}

impl<F: Real> LossConfig<F> {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.tau <= F::zero() {
            return Err(EvalError::InvalidConfig("tau must be > 0".into()));
        }
        if self.lambda_c < F::zero() || self.lambda_m < F::zero() {
            return Err(EvalError::InvalidConfig(
                "loss weights must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Combined loss: components averaged between the coarse-caption and
/// positive-rewrite evaluations.
#[derive(Debug, Clone)]
pub struct TotalLoss<F: Real> {
    pub value: F,
    /// `(ℓ_c + ℓ_c⁺) / 2`.
    pub contrastive: F,
    /// `(ℓ_m + ℓ_m⁺) / 2`.
    pub matching: F,
    pub gradients: Gradients<F>,
}

/// Total training objective. Both matching evaluations share the trivial
/// negatives drawn once from `rng`, so the rewrite variant differs only in
/// the anchor caption substitution.
pub fn total_loss<F: Real, R: Rng>(
    model: &EvaluatorModel<F>,
    batch: &[TrainingItem<F>],
    cfg: &LossConfig<F>,
    rng: &mut R,
) -> Result<TotalLoss<F>, EvalError> {
    cfg.validate()?;
    let negatives = sample_trivial_negatives(batch.len(), rng);
    total_loss_with_negatives(model, batch, cfg, &negatives)
}

/// Total loss with pinned trivial negatives.
pub fn total_loss_with_negatives<F: Real>(
    model: &EvaluatorModel<F>,
    batch: &[TrainingItem<F>],
    cfg: &LossConfig<F>,
    negatives: &SampledNegatives,
) -> Result<TotalLoss<F>, EvalError> {
    cfg.validate()?;
    let half = real::<F>(0.5);
    let lc = contrastive_loss_with(model, batch, cfg.tau, false)?;
    let lc_plus = contrastive_loss_with(model, batch, cfg.tau, true)?;
    let lm = matching_loss_with(model, batch, false, negatives)?;
    let lm_plus = matching_loss_with(model, batch, true, negatives)?;

    let contrastive = half * (lc.value + lc_plus.value);
    let matching = half * (lm.value + lm_plus.value);
    let value = cfg.lambda_c * contrastive + cfg.lambda_m * matching;

    let mut gradients = Gradients::zeros(model.d_e(), model.d_p());
    let wc = cfg.lambda_c * half;
    let wm = cfg.lambda_m * half;
    gradients.add_scaled(&lc.gradients, wc);
    gradients.add_scaled(&lc_plus.gradients, wc);
    gradients.add_scaled(&lm.gradients, wm);
    gradients.add_scaled(&lm_plus.gradients, wm);

    if !value.is_finite() || !gradients.is_finite() {
        return Err(EvalError::NonFinite("total loss"));
    }
    Ok(TotalLoss {
        value,
        contrastive,
        matching,
        gradients,
    })
}
