//! Minimal transformer encoder classifier with a token confidence head.
//!
//! The confidence head reads the embedding-layer output (token plus
//! positional embedding), never the contextual hidden states, so scores
//! are available before any encoder pass.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{BoundParams, ParamSet};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;
const INIT_SD: f64 = 0.02;
const ATTN_MASK_NEG: f64 = -1e9;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("token id {id} out of vocabulary range {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("non-finite activations in {0}")]
    NonFinite(String),
    #[error("invalid batch: {0}")]
    Batch(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint parse: {0}")]
    Parse(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub n_classes: usize,
    pub pad_id: usize,
    pub cls_id: usize,
    pub sep_id: usize,
    pub mask_id: usize,
}

impl ModelConfig {
    /// Desk-scale default: big enough to overfit the synthetic task,
    /// small enough for sub-minute gradient checks.
    pub fn desk_default(vocab_size: usize, n_classes: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_len: 32,
            n_classes,
            pad_id: 0,
            cls_id: 1,
            sep_id: 2,
            mask_id: 3,
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(EncoderError::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_len < 2 {
            return Err(EncoderError::Config("max_len must be at least 2 (CLS/SEP)".into()));
        }
        if self.n_classes == 0 {
            return Err(EncoderError::Config("n_classes must be positive".into()));
        }
        let specials = [self.pad_id, self.cls_id, self.sep_id, self.mask_id];
        for (i, &a) in specials.iter().enumerate() {
            if a >= self.vocab_size {
                return Err(EncoderError::Config(format!("special id {a} >= vocab {}", self.vocab_size)));
            }
            for &b in &specials[i + 1..] {
                if a == b {
                    return Err(EncoderError::Config("special token ids must be pairwise distinct".into()));
                }
            }
        }
        Ok(())
    }
}

/// All learnable arrays plus the architecture they belong to.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// 1 in soft mode (sigmoid scalar), 2 in hard mode (Gumbel logits).
    pub conf_head_dim: usize,
    pub set: ParamSet,
}

impl ModelParams {
    pub fn init(config: ModelConfig, conf_head_dim: usize, seed: u64) -> Result<Self, EncoderError> {
        config.validate()?;
        if conf_head_dim != 1 && conf_head_dim != 2 {
            return Err(EncoderError::Config(format!("confidence head arity must be 1 or 2, got {conf_head_dim}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let mut set = ParamSet::new();
        set.add_normal("tok_emb", vec![config.vocab_size, d], INIT_SD, &mut rng);
        set.add_normal("pos_emb", vec![config.max_len, d], INIT_SD, &mut rng);
        for l in 0..config.n_layers {
            for w in ["wq", "wk", "wv", "wo"] {
                set.add_normal(&format!("l{l}.{w}"), vec![d, d], INIT_SD, &mut rng);
                set.add_const(&format!("l{l}.{}", w.replace('w', "b")), vec![d], 0.0);
            }
            set.add_const(&format!("l{l}.ln1.g"), vec![d], 1.0);
            set.add_const(&format!("l{l}.ln1.b"), vec![d], 0.0);
            set.add_normal(&format!("l{l}.ff.w1"), vec![d, config.d_ff], INIT_SD, &mut rng);
            set.add_const(&format!("l{l}.ff.b1"), vec![config.d_ff], 0.0);
            set.add_normal(&format!("l{l}.ff.w2"), vec![config.d_ff, d], INIT_SD, &mut rng);
            set.add_const(&format!("l{l}.ff.b2"), vec![d], 0.0);
            set.add_const(&format!("l{l}.ln2.g"), vec![d], 1.0);
            set.add_const(&format!("l{l}.ln2.b"), vec![d], 0.0);
        }
        set.add_normal("head.w1", vec![d, d], INIT_SD, &mut rng);
        set.add_const("head.b1", vec![d], 0.0);
        set.add_normal("head.w2", vec![d, config.n_classes], INIT_SD, &mut rng);
        set.add_const("head.b2", vec![config.n_classes], 0.0);
        set.add_normal("conf.w", vec![d, conf_head_dim], INIT_SD, &mut rng);
        set.add_const("conf.b", vec![conf_head_dim], 0.0);
        Ok(ModelParams { config, conf_head_dim, set })
    }

    pub fn has_confidence_head(&self) -> bool {
        self.set.contains("conf.w")
    }

    /// Lossless JSON checkpoint (f64 round-trips exactly).
    pub fn save(&self, path: &Path) -> Result<(), EncoderError> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EncoderError> {
        let json = std::fs::read_to_string(path)?;
        let mut params: ModelParams = serde_json::from_str(&json)?;
        params.set.reindex();
        params.config.validate()?;
        Ok(params)
    }

    /// Order-insensitive content hash of every parameter byte.
    pub fn content_hash(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for p in self.set.iter() {
            p.name.hash(&mut h);
            for v in &p.data {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

/// Position role within an encoded row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Cls,
    Sep,
    Pad,
    Ordinary,
}

/// Padded token-id batch; CLS at position 0, pads form a contiguous suffix.
#[derive(Debug, Clone)]
pub struct EncodedBatch {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
    pub labels: Vec<usize>,
}

impl EncodedBatch {
    pub fn new(ids: Vec<usize>, batch: usize, seq: usize, labels: Vec<usize>, config: &ModelConfig) -> Result<Self, EncoderError> {
        if ids.len() != batch * seq {
            return Err(EncoderError::Batch(format!("{} ids for {batch}x{seq}", ids.len())));
        }
        if labels.len() != batch {
            return Err(EncoderError::Batch(format!("{} labels for batch {batch}", labels.len())));
        }
        if seq > config.max_len {
            return Err(EncoderError::Batch(format!("seq {seq} exceeds max_len {}", config.max_len)));
        }
        for &id in &ids {
            if id >= config.vocab_size {
                return Err(EncoderError::TokenOutOfRange { id, vocab: config.vocab_size });
            }
        }
        for r in 0..batch {
            let row = &ids[r * seq..(r + 1) * seq];
            if row[0] != config.cls_id {
                return Err(EncoderError::Batch(format!("row {r} does not start with CLS")));
            }
            let mut seen_pad = false;
            for &id in row {
                if id == config.pad_id {
                    seen_pad = true;
                } else if seen_pad {
                    return Err(EncoderError::Batch(format!("row {r} has a non-contiguous pad suffix")));
                }
            }
        }
        for &y in &labels {
            if y >= config.n_classes {
                return Err(EncoderError::Batch(format!("label {y} out of range {}", config.n_classes)));
            }
        }
        Ok(EncodedBatch { ids, batch, seq, labels })
    }

    pub fn kind(&self, row: usize, pos: usize, config: &ModelConfig) -> TokenKind {
        let id = self.ids[row * self.seq + pos];
        if id == config.pad_id {
            TokenKind::Pad
        } else if id == config.cls_id {
            TokenKind::Cls
        } else if id == config.sep_id {
            TokenKind::Sep
        } else {
            TokenKind::Ordinary
        }
    }

    /// 1.0 for real tokens, 0.0 for pads; flat `[batch*seq]`.
    pub fn attention_mask(&self, config: &ModelConfig) -> Vec<f64> {
        self.ids.iter().map(|&id| if id == config.pad_id { 0.0 } else { 1.0 }).collect()
    }

    /// 1.0 only on ordinary (non-CLS/SEP/PAD) positions.
    pub fn ordinary_mask(&self, config: &ModelConfig) -> Vec<f64> {
        (0..self.batch * self.seq)
            .map(|i| {
                if self.kind(i / self.seq, i % self.seq, config) == TokenKind::Ordinary {
                    1.0
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// 1.0 on CLS/SEP positions.
    pub fn special_mask(&self, config: &ModelConfig) -> Vec<f64> {
        (0..self.batch * self.seq)
            .map(|i| match self.kind(i / self.seq, i % self.seq, config) {
                TokenKind::Cls | TokenKind::Sep => 1.0,
                _ => 0.0,
            })
            .collect()
    }
}

/// Embedding-layer output: token embedding plus positional embedding,
/// `[batch, seq, d_model]`.
pub fn embed(batch: &EncodedBatch, bound: &BoundParams, config: &ModelConfig) -> Tensor {
    let d = config.d_model;
    let tok = bound.get("tok_emb").gather(&batch.ids).reshape(vec![batch.batch, batch.seq, d]);
    let positions: Vec<usize> = (0..batch.seq).collect();
    let pos = bound.get("pos_emb").gather(&positions).broadcast(batch.batch);
    tok.add(&pos)
}

/// Raw sigmoid confidence scores `[batch, seq]`, soft variant (Eq.-2-style
/// scalar head). No special-token forcing.
pub fn confidence_raw(embeddings: &Tensor, bound: &BoundParams, config: &ModelConfig) -> Tensor {
    assert_eq!(bound.get("conf.w").shape()[1], 1, "confidence_raw requires a scalar head");
    let (b, s, d) = (embeddings.shape()[0], embeddings.shape()[1], embeddings.shape()[2]);
    debug_assert_eq!(d, config.d_model);
    embeddings
        .reshape(vec![b * s, d])
        .matmul(&bound.get("conf.w"))
        .add_bias(&bound.get("conf.b"))
        .sigmoid()
        .reshape(vec![b, s])
}

/// Forced confidence scores for building the positive variant: CLS/SEP
/// pinned to 1 and PAD to 0, both outside the gradient path.
pub fn force_positive(raw: &Tensor, batch: &EncodedBatch, config: &ModelConfig) -> Tensor {
    let ordinary = Tensor::constant(vec![batch.batch, batch.seq], batch.ordinary_mask(config));
    let special = Tensor::constant(vec![batch.batch, batch.seq], batch.special_mask(config));
    raw.mul(&ordinary).add(&special)
}

/// Forced confidence scores for the negative variant: CLS/SEP and PAD
/// pinned to 0 so `(1 - c)` leaves those rows unchanged.
pub fn force_negative(raw: &Tensor, batch: &EncodedBatch, config: &ModelConfig) -> Tensor {
    let ordinary = Tensor::constant(vec![batch.batch, batch.seq], batch.ordinary_mask(config));
    raw.mul(&ordinary)
}

/// Soft-mode confidence scores with special-token forcing, as consumed by
/// analyses: sigmoid on ordinary positions, 1 on CLS/SEP, 0 on PAD.
pub fn confidence_scores(embeddings: &Tensor, bound: &BoundParams, batch: &EncodedBatch, config: &ModelConfig) -> Tensor {
    let raw = confidence_raw(embeddings, bound, config);
    force_positive(&raw, batch, config)
}

/// Additive attention mask `[batch, heads, seq, seq]`: pad keys get a
/// large negative score, so pads are attended by nothing.
fn attention_bias(batch: &EncodedBatch, config: &ModelConfig) -> Tensor {
    let (b, s, h) = (batch.batch, batch.seq, config.n_heads);
    let mask = batch.attention_mask(config);
    let mut data = vec![0.0; b * h * s * s];
    for r in 0..b {
        for head in 0..h {
            for qi in 0..s {
                for ki in 0..s {
                    if mask[r * s + ki] == 0.0 {
                        data[((r * h + head) * s + qi) * s + ki] = ATTN_MASK_NEG;
                    }
                }
            }
        }
    }
    Tensor::constant(vec![b, h, s, s], data)
}

/// Run the encoder stack on embedding-layer-shaped input (the original
/// embeddings or a derived variant). Returns contextual states
/// `[batch, seq, d_model]` and the class distribution `[batch, n_classes]`.
pub fn forward(
    embeddings: &Tensor,
    batch: &EncodedBatch,
    bound: &BoundParams,
    config: &ModelConfig,
) -> Result<(Tensor, Tensor), EncoderError> {
    let (b, s, d) = (batch.batch, batch.seq, config.d_model);
    assert_eq!(embeddings.shape(), &[b, s, d], "forward: input shape {:?}", embeddings.shape());
    let h = config.n_heads;
    let dh = d / h;
    let bias = attention_bias(batch, config);
    let scale = 1.0 / (dh as f64).sqrt();

    let mut x = embeddings.clone();
    for l in 0..config.n_layers {
        let name = |suffix: &str| format!("l{l}.{suffix}");
        let flat = x.reshape(vec![b * s, d]);
        let proj = |w: &str, bn: &str| {
            flat.matmul(&bound.get(&name(w)))
                .add_bias(&bound.get(&name(bn)))
                .reshape(vec![b, s, h, dh])
                .permute(&[0, 2, 1, 3]) // [b, h, s, dh]
        };
        let q = proj("wq", "bq");
        let k = proj("wk", "bk");
        let v = proj("wv", "bv");
        let scores = q.matmul(&k.permute(&[0, 1, 3, 2])).scale(scale).add(&bias);
        let attn = scores.softmax_last();
        let ctx = attn
            .matmul(&v)
            .permute(&[0, 2, 1, 3])
            .reshape(vec![b * s, d])
            .matmul(&bound.get(&name("wo")))
            .add_bias(&bound.get(&name("bo")))
            .reshape(vec![b, s, d]);
        let x1 = x
            .add(&ctx)
            .layer_norm(LN_EPS)
            .mul_bias(&bound.get(&name("ln1.g")))
            .add_bias(&bound.get(&name("ln1.b")));
        let ff = x1
            .reshape(vec![b * s, d])
            .matmul(&bound.get(&name("ff.w1")))
            .add_bias(&bound.get(&name("ff.b1")))
            .relu()
            .matmul(&bound.get(&name("ff.w2")))
            .add_bias(&bound.get(&name("ff.b2")))
            .reshape(vec![b, s, d]);
        x = x1
            .add(&ff)
            .layer_norm(LN_EPS)
            .mul_bias(&bound.get(&name("ln2.g")))
            .add_bias(&bound.get(&name("ln2.b")));
        if !x.is_finite() {
            return Err(EncoderError::NonFinite(format!("encoder layer {l}")));
        }
    }

    let h_cls = x.select_axis1(0);
    let probs = h_cls
        .matmul(&bound.get("head.w1"))
        .add_bias(&bound.get("head.b1"))
        .tanh()
        .matmul(&bound.get("head.w2"))
        .add_bias(&bound.get("head.b2"))
        .softmax_last();
    if !probs.is_finite() {
        return Err(EncoderError::NonFinite("classifier head".into()));
    }
    Ok((x, probs))
}

/// Argmax per row; ties broken toward the smaller class index.
pub fn argmax_rows(probs: &Tensor) -> Vec<usize> {
    let k = *probs.shape().last().expect("argmax on scalar");
    probs
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Full predict path: embed, encode, argmax.
pub fn predict(batch: &EncodedBatch, params: &ModelParams) -> Result<Vec<usize>, EncoderError> {
    let bound = params.set.bind();
    let e = embed(batch, &bound, &params.config);
    let (_, probs) = forward(&e, batch, &bound, &params.config)?;
    Ok(argmax_rows(&probs))
}
