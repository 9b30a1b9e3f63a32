//! Deterministic mini-batch training: Adam with linear warmup/decay,
//! seeded epoch shuffles, periodic dev evaluation, and best-dev model
//! selection. Single-threaded; (seed, configs, corpus) fixes every
//! reported number bit-exactly.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, CorpusBundle, DataError, Example};
use crate::encoder::{self, EncoderError, ModelConfig, ModelParams};
use crate::objective::{self, ObjectiveError, TdtConfig};
use crate::params::ParamSet;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("train split is empty")]
    EmptyTrain,
    #[error("cannot evaluate an empty split")]
    EmptySplit,
    #[error("non-finite gradient in {0}")]
    NonFiniteGrad(String),
    #[error("loss diverged (non-finite) at step {0}")]
    Diverged(usize),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm clip; absent means no clipping.
    pub clip_norm: Option<f64>,
    pub eval_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            warmup_steps: 100,
            total_steps: 3000,
            batch_size: 32,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: Some(1.0),
            eval_interval: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.warmup_steps > self.total_steps {
            return Err(TrainError::Config(format!(
                "warmup {} exceeds total steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::Config(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        for (name, v, hi) in [("beta1", self.beta1, 1.0), ("beta2", self.beta2, 1.0)] {
            if !(0.0..hi).contains(&v) {
                return Err(TrainError::Config(format!("{name} must be in [0, 1), got {v}")));
            }
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(TrainError::Config(format!("clip norm must be > 0, got {c}")));
            }
        }
        if self.eval_interval == 0 {
            return Err(TrainError::Config("eval interval must be at least 1".into()));
        }
        Ok(())
    }
}

/// Linear ramp 0 -> lr over warmup, then linear decay lr -> 0 at total.
pub fn lr_at_step(step: usize, cfg: &TrainConfig) -> f64 {
    let (lr, w, t) = (cfg.learning_rate, cfg.warmup_steps, cfg.total_steps);
    if step >= t {
        return 0.0;
    }
    if step < w {
        return lr * step as f64 / w as f64;
    }
    if t == w {
        return lr;
    }
    lr * (t - step) as f64 / (t - w) as f64
}

pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.data.len()]).collect();
        AdamState { m: zeros.clone(), v: zeros, t: 0 }
    }
}

/// One bias-corrected Adam update over every parameter array.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    for (p, g) in params.iter().zip(grads) {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteGrad(p.name.clone()));
        }
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (pi, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[pi], &mut state.v[pi]);
        for (i, &g) in grads[pi].iter().enumerate() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            p.data[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
pub fn clip_gradients(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub l_cla: f64,
    pub l_c: f64,
    pub l_r: f64,
    pub total: f64,
    pub dev_acc: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub vanilla: bool,
    pub model_config: ModelConfig,
    pub tdt_config: TdtConfig,
    pub train_config: TrainConfig,
    pub steps: Vec<StepMetrics>,
    pub best_step: usize,
    pub best_dev_acc: f64,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    pub fn write_json(&self, path: &Path) -> Result<(), TrainError> {
        let io_err = |source| TrainError::Io { path: path.display().to_string(), source };
        let body = serde_json::to_string_pretty(self)
            .map_err(|e| io_err(std::io::Error::new(std::io::ErrorKind::Other, e)))?;
        std::fs::write(path, body).map_err(io_err)
    }

    pub fn write_metrics_csv(&self, path: &Path) -> Result<(), TrainError> {
        let mut out = String::from("step,l_cla,l_c,l_r,total,dev_acc\n");
        for s in &self.steps {
            let dev = s.dev_acc.map(|a| a.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{},{},{}\n", s.step, s.l_cla, s.l_c, s.l_r, s.total, dev));
        }
        std::fs::write(path, out).map_err(|source| TrainError::Io { path: path.display().to_string(), source })
    }
}

pub struct EvalRecord {
    pub prediction: usize,
    pub label: usize,
    /// Predicted class distribution.
    pub probs: Vec<f64>,
}

pub struct EvalResult {
    pub accuracy: f64,
    pub records: Vec<EvalRecord>,
}

const EVAL_CHUNK: usize = 64;

pub fn evaluate(params: &ModelParams, split: &[Example]) -> Result<EvalResult, TrainError> {
    if split.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    let bound = params.set.bind();
    let mut records = Vec::with_capacity(split.len());
    for chunk in split.chunks(EVAL_CHUNK) {
        let batch = data::encode_batch(chunk, &params.config)?;
        let embeddings = encoder::embed(&batch, &bound, &params.config);
        let (_, probs) = encoder::forward(&embeddings, &batch, &bound, &params.config)?;
        let preds = encoder::argmax_rows(&probs);
        let k = params.config.n_classes;
        for (r, ex) in chunk.iter().enumerate() {
            records.push(EvalRecord {
                prediction: preds[r],
                label: ex.label,
                probs: probs.data()[r * k..(r + 1) * k].to_vec(),
            });
        }
    }
    let hits = records.iter().filter(|r| r.prediction == r.label).count();
    Ok(EvalResult { accuracy: hits as f64 / records.len() as f64, records })
}

/// Train a fresh model on the corpus; returns the best-dev parameters
/// (ties to the earlier step) and the full run record.
pub fn train(
    corpus: &CorpusBundle,
    model_config: ModelConfig,
    tdt_config: &TdtConfig,
    train_config: &TrainConfig,
) -> Result<(ModelParams, RunRecord), TrainError> {
    train_config.validate()?;
    tdt_config.validate()?;
    if corpus.train.is_empty() {
        return Err(TrainError::EmptyTrain);
    }
    let started = Instant::now();
    let mut params = ModelParams::init(model_config.clone(), tdt_config.conf_head_dim(), train_config.seed)?;
    let mut adam = AdamState::new(&params.set);
    // separate streams: batch order vs objective noise
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(train_config.seed);
    shuffle_rng.set_stream(1);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(train_config.seed);
    noise_rng.set_stream(2);

    let mut order: Vec<usize> = (0..corpus.train.len()).collect();
    let mut cursor = order.len(); // forces a shuffle before the first batch
    let mut steps = Vec::new();
    let mut best: Option<(usize, f64, ParamSet)> = None;

    let eval_dev = |params: &ModelParams| -> Result<f64, TrainError> {
        Ok(evaluate(params, &corpus.dev)?.accuracy)
    };

    for step in 1..=train_config.total_steps {
        let mut batch_examples: Vec<Example> = Vec::with_capacity(train_config.batch_size);
        for _ in 0..train_config.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut shuffle_rng);
                cursor = 0;
            }
            batch_examples.push(corpus.train[order[cursor]].clone());
            cursor += 1;
        }
        let batch = data::encode_batch(&batch_examples, &params.config)?;
        let bound = params.set.bind();
        let bundle = objective::total_loss(&batch, &params, &bound, tdt_config, &mut noise_rng)?;
        let total = bundle.total.item();
        if !total.is_finite() {
            return Err(TrainError::Diverged(step));
        }
        bundle.total.backward();
        let mut grads = bound.grads();
        if let Some(max_norm) = train_config.clip_norm {
            clip_gradients(&mut grads, max_norm);
        }
        let lr = lr_at_step(step, train_config);
        adam_step(&mut params.set, &grads, &mut adam, lr, train_config)?;

        let dev_acc = if step % train_config.eval_interval == 0 || step == train_config.total_steps {
            let acc = eval_dev(&params)?;
            if best.as_ref().map_or(true, |(_, b, _)| acc > *b) {
                best = Some((step, acc, params.set.clone()));
            }
            Some(acc)
        } else {
            None
        };
        steps.push(StepMetrics {
            step,
            l_cla: bundle.l_cla.item(),
            l_c: bundle.l_c.item(),
            l_r: bundle.l_r.item(),
            total,
            dev_acc,
        });
    }

    let (best_step, best_dev_acc, best_set) = match best {
        Some((s, a, set)) => (s, a, set),
        // zero-step run: the initialization is the model
        None => (0, eval_dev(&params)?, params.set.clone()),
    };
    params.set = best_set;
    let record = RunRecord {
        seed: train_config.seed,
        vanilla: tdt_config.is_vanilla(),
        model_config,
        tdt_config: tdt_config.clone(),
        train_config: train_config.clone(),
        steps,
        best_step,
        best_dev_acc,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok((params, record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_corpus, SplitSizes, TaskSpec};

    fn tiny_setup() -> (CorpusBundle, ModelConfig) {
        let spec = TaskSpec { vocab_size: 60, min_len: 4, max_len: 8, ..TaskSpec::default() };
        let corpus = generate_corpus(
            &spec,
            SplitSizes { train: 64, dev: 32, test_iid: 32, test_antispurious: 32 },
            5,
        )
        .unwrap();
        let mut cfg = spec.model_config(spec.n_classes);
        cfg.d_model = 16;
        cfg.n_layers = 1;
        cfg.n_heads = 2;
        cfg.d_ff = 32;
        (corpus, cfg)
    }

    #[test]
    fn lr_schedule_matches_hand_values() {
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            warmup_steps: 100,
            total_steps: 1100,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at_step(0, &cfg), 0.0);
        assert_eq!(lr_at_step(100, &cfg), 1e-3);
        assert!((lr_at_step(600, &cfg) - 5e-4).abs() < 1e-18);
        assert_eq!(lr_at_step(1100, &cfg), 0.0);
        assert_eq!(lr_at_step(50, &cfg), 5e-4);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { warmup_steps: 10, total_steps: 5, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { clip_norm: Some(0.0), ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut set = ParamSet::new();
        set.add("w", vec![3], vec![1.0, -2.0, 0.5]);
        let before = set.get("w").data.clone();
        let mut state = AdamState::new(&set);
        let cfg = TrainConfig::default();
        for _ in 0..10 {
            adam_step(&mut set, &[vec![0.0; 3]], &mut state, 1e-3, &cfg).unwrap();
        }
        assert_eq!(set.get("w").data, before);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        // bias correction makes m_hat/sqrt(v_hat) = sign(g) up to epsilon
        let mut set = ParamSet::new();
        set.add("w", vec![2], vec![0.0, 0.0]);
        let mut state = AdamState::new(&set);
        let cfg = TrainConfig::default();
        adam_step(&mut set, &[vec![3.0, -0.02]], &mut state, 1e-3, &cfg).unwrap();
        assert!((set.get("w").data[0] + 1e-3).abs() < 1e-9);
        assert!((set.get("w").data[1] - 1e-3).abs() < 1e-9);
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut set = ParamSet::new();
        set.add("w", vec![1], vec![0.0]);
        let mut state = AdamState::new(&set);
        let err = adam_step(&mut set, &[vec![f64::NAN]], &mut state, 1e-3, &TrainConfig::default()).unwrap_err();
        assert!(err.to_string().contains('w'));
    }

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut grads = vec![vec![3.0, 0.0], vec![4.0]];
        let norm = clip_gradients(&mut grads, 1.0);
        assert_eq!(norm, 5.0);
        let new_norm = grads.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        assert!((new_norm - 1.0).abs() < 1e-12);
        // under the limit: untouched
        let mut small = vec![vec![0.3, 0.4]];
        clip_gradients(&mut small, 1.0);
        assert_eq!(small[0], vec![0.3, 0.4]);
    }

    #[test]
    fn training_is_bit_deterministic() {
        let (corpus, cfg) = tiny_setup();
        let tc = TrainConfig { total_steps: 20, warmup_steps: 5, eval_interval: 10, ..TrainConfig::default() };
        let (m1, r1) = train(&corpus, cfg.clone(), &TdtConfig::default(), &tc).unwrap();
        let (m2, r2) = train(&corpus, cfg, &TdtConfig::default(), &tc).unwrap();
        assert_eq!(m1.set, m2.set);
        let t1: Vec<f64> = r1.steps.iter().map(|s| s.total).collect();
        let t2: Vec<f64> = r2.steps.iter().map(|s| s.total).collect();
        assert_eq!(t1, t2);
    }

    #[test]
    fn vanilla_reduction_matches_explicit_vanilla_run() {
        let (corpus, cfg) = tiny_setup();
        let tc = TrainConfig { total_steps: 15, warmup_steps: 5, eval_interval: 15, ..TrainConfig::default() };
        let zeroed = TdtConfig { alpha: 0.0, beta: 0.0, ..TdtConfig::default() };
        let (m1, r1) = train(&corpus, cfg.clone(), &zeroed, &tc).unwrap();
        let (m2, r2) = train(&corpus, cfg, &TdtConfig::vanilla(), &tc).unwrap();
        assert_eq!(m1.set, m2.set);
        assert!(r1.vanilla && r2.vanilla);
        for (a, b) in r1.steps.iter().zip(&r2.steps) {
            assert_eq!(a.total, b.total);
            assert_eq!(a.total, a.l_cla);
        }
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let (corpus, cfg) = tiny_setup();
        let tc = TrainConfig { total_steps: 0, warmup_steps: 0, ..TrainConfig::default() };
        let (m, r) = train(&corpus, cfg.clone(), &TdtConfig::vanilla(), &tc).unwrap();
        let fresh = ModelParams::init(cfg, 1, tc.seed).unwrap();
        assert_eq!(m.set, fresh.set);
        assert_eq!(r.best_step, 0);
        assert!(r.steps.is_empty());
    }

    #[test]
    fn empty_train_split_is_an_error() {
        let (mut corpus, cfg) = tiny_setup();
        corpus.train.clear();
        let err = train(&corpus, cfg, &TdtConfig::vanilla(), &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, TrainError::EmptyTrain));
    }

    #[test]
    fn evaluate_contract() {
        let (corpus, cfg) = tiny_setup();
        let params = ModelParams::init(cfg, 1, 9).unwrap();
        let r1 = evaluate(&params, &corpus.dev).unwrap();
        let r2 = evaluate(&params, &corpus.dev).unwrap();
        assert_eq!(r1.accuracy, r2.accuracy);
        assert_eq!(r1.records.len(), corpus.dev.len());
        for rec in &r1.records {
            assert_eq!(rec.probs.len(), 4);
            assert!((rec.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(matches!(evaluate(&params, &[]), Err(TrainError::EmptySplit)));
    }

    #[test]
    fn untrained_model_is_near_chance() {
        let spec = TaskSpec { vocab_size: 200, ..TaskSpec::default() };
        let corpus = generate_corpus(
            &spec,
            SplitSizes { train: 4, dev: 4, test_iid: 1000, test_antispurious: 4 },
            77,
        )
        .unwrap();
        let mut cfg = spec.model_config(spec.n_classes);
        cfg.d_model = 16;
        cfg.n_layers = 1;
        cfg.n_heads = 2;
        cfg.d_ff = 32;
        let params = ModelParams::init(cfg, 1, 123).unwrap();
        let acc = evaluate(&params, &corpus.test_iid).unwrap().accuracy;
        assert!((acc - 0.25).abs() < 0.05, "untrained accuracy {acc}");
    }

    #[test]
    fn record_serialization_round_trip() {
        let (corpus, cfg) = tiny_setup();
        let tc = TrainConfig { total_steps: 4, warmup_steps: 1, eval_interval: 2, ..TrainConfig::default() };
        let (_, record) = train(&corpus, cfg, &TdtConfig::vanilla(), &tc).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let json = dir.path().join("run.json");
        let csv = dir.path().join("metrics.csv");
        record.write_json(&json).unwrap();
        record.write_metrics_csv(&csv).unwrap();
        let parsed: RunRecord = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
        assert_eq!(parsed.best_step, record.best_step);
        assert_eq!(parsed.steps.len(), record.steps.len());
        let body = std::fs::read_to_string(&csv).unwrap();
        let mut lines = body.lines();
        assert_eq!(lines.next().unwrap(), "step,l_cla,l_c,l_r,total,dev_acc");
        assert_eq!(lines.count(), record.steps.len());
    }
}
