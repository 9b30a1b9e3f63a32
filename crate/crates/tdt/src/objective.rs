//! The TDT loss family: positive/negative input variants, the
//! deletion-game confidence loss, the triplet KL ranking loss, and the
//! combined objective, in both the soft (sigmoid) and hard
//! (Gumbel-Softmax straight-through) variants.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{self, EncodedBatch, EncoderError, ModelConfig, ModelParams};
use crate::params::BoundParams;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("invalid objective config: {0}")]
    Config(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationMode {
    /// Zero vector.
    Zero,
    /// Seeded Gaussian draw per step.
    Gaussian,
    /// Mean over the token embedding table, recomputed inside the
    /// gradient graph each forward pass.
    EmbeddingMean,
    /// Per-example mean over ordinary-token embeddings.
    SequenceMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantMode {
    Soft,
    Hard,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TdtConfig {
    /// Triplet ranking margin.
    pub margin: f64,
    /// Weight of the confidence loss.
    pub alpha: f64,
    /// Weight of the triplet ranking loss.
    pub beta: f64,
    /// Confidence-penalty weight inside the confidence loss.
    pub gamma: f64,
    pub perturbation_mode: PerturbationMode,
    pub variant_mode: VariantMode,
    /// Gumbel-Softmax temperature (hard mode).
    pub tau: f64,
    /// Gaussian anchor scale; empirical embedding-table sd when absent.
    pub gaussian_sigma: Option<f64>,
    /// Symmetrize KL in the triplet distances (ablation switch).
    pub symmetrized_kl: bool,
    /// Divide per-example confidence norms by sqrt(n).
    pub length_normalized_penalty: bool,
}

impl Default for TdtConfig {
    fn default() -> Self {
        TdtConfig {
            margin: 2.0,
            alpha: 2.0,
            beta: 1.0,
            gamma: 0.1,
            perturbation_mode: PerturbationMode::EmbeddingMean,
            variant_mode: VariantMode::Soft,
            tau: 1.0,
            gaussian_sigma: None,
            symmetrized_kl: false,
            length_normalized_penalty: false,
        }
    }
}

impl TdtConfig {
    /// Pure fine-tuning: both auxiliary losses off.
    pub fn vanilla() -> Self {
        TdtConfig { alpha: 0.0, beta: 0.0, ..TdtConfig::default() }
    }

    pub fn is_vanilla(&self) -> bool {
        self.alpha == 0.0 && self.beta == 0.0
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        for (name, v) in [("margin", self.margin), ("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0) {
                return Err(ObjectiveError::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(self.tau > 0.0) {
            return Err(ObjectiveError::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if let Some(s) = self.gaussian_sigma {
            if !(s >= 0.0) {
                return Err(ObjectiveError::Config(format!("gaussian_sigma must be >= 0, got {s}")));
            }
        }
        Ok(())
    }

    /// Required confidence-head arity for this variant mode.
    pub fn conf_head_dim(&self) -> usize {
        match self.variant_mode {
            VariantMode::Soft => 1,
            VariantMode::Hard => 2,
        }
    }
}

/// All loss components of one step; `total = l_cla + alpha*l_c + beta*l_r`.
pub struct LossBundle {
    pub l_cla: Tensor,
    pub l_c: Tensor,
    pub l_r: Tensor,
    pub total: Tensor,
    pub diagnostics: Option<Diagnostics>,
}

/// Batch-mean triplet distances and confidence norm of the step.
#[derive(Debug, Clone, Copy)]
pub struct Diagnostics {
    pub d_pos_orig: f64,
    pub d_neg_orig: f64,
    pub d_neg_pos: f64,
    pub confidence_norm: f64,
}

/// The substitution vector for suppressed content.
///
/// Shape `[d_model]`, or `[batch, d_model]` for the per-sequence mean.
pub fn perturbation_anchor(
    mode: PerturbationMode,
    bound: &BoundParams,
    embeddings: &Tensor,
    batch: &EncodedBatch,
    config: &ModelConfig,
    gaussian_sigma: Option<f64>,
    rng: &mut ChaCha8Rng,
) -> Tensor {
    let d = config.d_model;
    match mode {
        PerturbationMode::Zero => Tensor::zeros(vec![d]),
        PerturbationMode::Gaussian => {
            let table = bound.get("tok_emb");
            let sigma = gaussian_sigma.unwrap_or_else(|| empirical_sd(table.data()));
            let data = (0..d).map(|_| normal_draw(rng) * sigma).collect();
            Tensor::constant(vec![d], data)
        }
        PerturbationMode::EmbeddingMean => bound.get("tok_emb").mean_axis(0),
        PerturbationMode::SequenceMean => {
            let mask = batch.ordinary_mask(config);
            let counts: Vec<f64> = mask
                .chunks(batch.seq)
                .map(|row| row.iter().sum::<f64>().max(1.0).recip())
                .collect();
            let mask_t = Tensor::constant(vec![batch.batch, batch.seq], mask);
            embeddings
                .scale_rows(&mask_t)
                .sum_axis(1)
                .scale_rows(&Tensor::constant(vec![batch.batch], counts))
        }
    }
}

fn empirical_sd(data: &[f64]) -> f64 {
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    (data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

fn normal_draw(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Broadcast an anchor of shape `[d]` or `[batch, d]` to `[batch, seq, d]`.
fn broadcast_anchor(anchor: &Tensor, batch: usize, seq: usize, d: usize) -> Tensor {
    match anchor.shape().len() {
        1 => anchor.broadcast(batch * seq).reshape(vec![batch, seq, d]),
        2 => anchor.broadcast(seq).permute(&[1, 0, 2]),
        _ => panic!("anchor shape {:?}", anchor.shape()),
    }
}

/// Distilled sample: `e+ = c * e + (1 - c) * mu0` per position.
pub fn positive_variant(embeddings: &Tensor, confidence: &Tensor, anchor: &Tensor) -> Tensor {
    let (b, s, d) = (embeddings.shape()[0], embeddings.shape()[1], embeddings.shape()[2]);
    let inv = Tensor::ones(vec![b, s]).sub(confidence);
    let anchor_bc = broadcast_anchor(anchor, b, s, d);
    embeddings.scale_rows(confidence).add(&anchor_bc.scale_rows(&inv))
}

/// Complementary variant: `e- = (1 - c) * e`. Pass confidence scores
/// forced to 0 on CLS/SEP so those rows are copied unchanged.
pub fn negative_variant(embeddings: &Tensor, confidence: &Tensor) -> Tensor {
    let (b, s) = (embeddings.shape()[0], embeddings.shape()[1]);
    let inv = Tensor::ones(vec![b, s]).sub(confidence);
    embeddings.scale_rows(&inv)
}

/// Mean over the batch of `-log P[y]`.
pub fn classification_loss(probs: &Tensor, labels: &[usize]) -> Tensor {
    probs.cross_entropy_probs(labels)
}

/// Batch-mean Euclidean norm of ordinary-position confidence scores.
pub fn confidence_penalty(confidence: &Tensor, batch: &EncodedBatch, config: &ModelConfig, length_normalized: bool) -> Tensor {
    let mask = batch.ordinary_mask(config);
    let masked = confidence.mul(&Tensor::constant(vec![batch.batch, batch.seq], mask.clone()));
    let norms = masked.l2_norm_last();
    if length_normalized {
        let inv_sqrt: Vec<f64> = mask
            .chunks(batch.seq)
            .map(|row| row.iter().sum::<f64>().max(1.0).sqrt().recip())
            .collect();
        norms.mul(&Tensor::constant(vec![batch.batch], inv_sqrt)).mean_all()
    } else {
        norms.mean_all()
    }
}

/// Deletion-game confidence loss: cross entropy on the distilled sample
/// plus the gamma-weighted norm penalty.
pub fn confidence_loss(
    probs_pos: &Tensor,
    labels: &[usize],
    confidence: &Tensor,
    gamma: f64,
    batch: &EncodedBatch,
    config: &ModelConfig,
    length_normalized: bool,
) -> Tensor {
    let ce = classification_loss(probs_pos, labels);
    let penalty = confidence_penalty(confidence, batch, config, length_normalized);
    ce.add(&penalty.scale(gamma))
}

fn kl_distance(p: &Tensor, q: &Tensor, symmetrized: bool) -> Tensor {
    let forward = p.kl_last(q).expect("triplet distributions share a shape");
    if symmetrized {
        let backward = q.kl_last(p).expect("triplet distributions share a shape");
        forward.add(&backward).scale(0.5)
    } else {
        forward
    }
}

/// Triplet ranking loss:
/// `mean_b max(m + d(P+,P) - d(P-,P) - d(P-,P+), 0)`.
pub fn triplet_loss(probs: &Tensor, probs_pos: &Tensor, probs_neg: &Tensor, margin: f64, symmetrized: bool) -> Tensor {
    let d_pos = kl_distance(probs_pos, probs, symmetrized);
    let d_neg = kl_distance(probs_neg, probs, symmetrized);
    let d_neg_pos = kl_distance(probs_neg, probs_pos, symmetrized);
    d_pos.sub(&d_neg).sub(&d_neg_pos).add_scalar(margin).hinge().mean_all()
}

/// Gumbel-Softmax confidence draw for the hard variant.
///
/// Returns straight-through hard scores in `{0, 1}` per position (forward
/// discrete, backward through the tempered keep-probability) plus the
/// tempered softmax outputs `[batch, seq, 2]`.
pub fn gumbel_confidence(
    embeddings: &Tensor,
    bound: &BoundParams,
    _config: &ModelConfig,
    tau: f64,
    rng: &mut ChaCha8Rng,
    with_noise: bool,
) -> Result<(Tensor, Tensor), ObjectiveError> {
    if !(tau > 0.0) {
        return Err(ObjectiveError::Config(format!("tau must be > 0, got {tau}")));
    }
    let w = bound.get("conf.w");
    assert_eq!(w.shape()[1], 2, "hard variant requires a 2-logit confidence head");
    let (b, s, d) = (embeddings.shape()[0], embeddings.shape()[1], embeddings.shape()[2]);
    let logits = embeddings.reshape(vec![b * s, d]).matmul(&w).add_bias(&bound.get("conf.b"));
    let noisy = if with_noise {
        let noise: Vec<f64> = (0..b * s * 2).map(|_| gumbel_draw(rng)).collect();
        logits.add(&Tensor::constant(vec![b * s, 2], noise))
    } else {
        logits
    };
    let soft = noisy.scale(1.0 / tau).softmax_last();
    // keep-probability = category 1
    let keep = soft.matmul(&Tensor::constant(vec![2, 1], vec![0.0, 1.0])).reshape(vec![b, s]);
    // ties break toward keeping the token
    let hard: Vec<f64> = keep.data().iter().map(|&p| if p >= 0.5 { 1.0 } else { 0.0 }).collect();
    Ok((keep.straight_through(hard), soft.reshape(vec![b, s, 2])))
}

fn gumbel_draw(rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

/// One full objective evaluation: three encoder passes sharing parameters.
///
/// With `alpha == beta == 0` the variants are skipped entirely and the
/// objective degenerates to vanilla fine-tuning.
pub fn total_loss(
    batch: &EncodedBatch,
    params: &ModelParams,
    bound: &BoundParams,
    cfg: &TdtConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LossBundle, ObjectiveError> {
    cfg.validate()?;
    let config = &params.config;
    let embeddings = encoder::embed(batch, bound, config);
    let (_, probs) = encoder::forward(&embeddings, batch, bound, config)?;
    let l_cla = classification_loss(&probs, &batch.labels);

    if cfg.is_vanilla() {
        return Ok(LossBundle {
            total: l_cla.clone(),
            l_cla,
            l_c: Tensor::scalar(0.0),
            l_r: Tensor::scalar(0.0),
            diagnostics: None,
        });
    }

    // confidence scores and the two variants
    let (c_pos, c_neg) = match cfg.variant_mode {
        VariantMode::Soft => {
            let raw = encoder::confidence_raw(&embeddings, bound, config);
            (
                encoder::force_positive(&raw, batch, config),
                encoder::force_negative(&raw, batch, config),
            )
        }
        VariantMode::Hard => {
            let (hard, _) = gumbel_confidence(&embeddings, bound, config, cfg.tau, rng, true)?;
            (
                encoder::force_positive(&hard, batch, config),
                encoder::force_negative(&hard, batch, config),
            )
        }
    };
    let anchor = match cfg.variant_mode {
        // hard mode substitutes the MASK-token embedding
        VariantMode::Hard => bound.get("tok_emb").gather(&[config.mask_id]).reshape(vec![config.d_model]),
        VariantMode::Soft => perturbation_anchor(
            cfg.perturbation_mode,
            bound,
            &embeddings,
            batch,
            config,
            cfg.gaussian_sigma,
            rng,
        ),
    };
    let e_pos = positive_variant(&embeddings, &c_pos, &anchor);
    let e_neg = negative_variant(&embeddings, &c_neg);
    let (_, probs_pos) = encoder::forward(&e_pos, batch, bound, config)?;
    let (_, probs_neg) = encoder::forward(&e_neg, batch, bound, config)?;

    let l_c = confidence_loss(
        &probs_pos,
        &batch.labels,
        &c_pos,
        cfg.gamma,
        batch,
        config,
        cfg.length_normalized_penalty,
    );
    let l_r = triplet_loss(&probs, &probs_pos, &probs_neg, cfg.margin, cfg.symmetrized_kl);
    let total = l_cla.add(&l_c.scale(cfg.alpha)).add(&l_r.scale(cfg.beta));

    let mean_of = |t: &Tensor| t.data().iter().sum::<f64>() / t.len() as f64;
    let diagnostics = Diagnostics {
        d_pos_orig: mean_of(&kl_distance(&probs_pos, &probs, cfg.symmetrized_kl)),
        d_neg_orig: mean_of(&kl_distance(&probs_neg, &probs, cfg.symmetrized_kl)),
        d_neg_pos: mean_of(&kl_distance(&probs_neg, &probs_pos, cfg.symmetrized_kl)),
        confidence_norm: confidence_penalty(&c_pos, batch, config, cfg.length_normalized_penalty).item(),
    };
    Ok(LossBundle { l_cla, l_c, l_r, total, diagnostics: Some(diagnostics) })
}

/// The task-specific hyperparameter grid: m in {0, 2}, alpha in
/// {0.5, 2, 4}, beta in {0.5, 1}.
pub fn hyperparameter_grid() -> Vec<TdtConfig> {
    let mut grid = Vec::new();
    for &margin in &[0.0, 2.0] {
        for &alpha in &[0.5, 2.0, 4.0] {
            for &beta in &[0.5, 1.0] {
                grid.push(TdtConfig { margin, alpha, beta, ..TdtConfig::default() });
            }
        }
    }
    grid
}
