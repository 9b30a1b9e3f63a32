//! Diagnostic protocols over trained checkpoints: confidence-ordered
//! token dropping, seeded input perturbation, confidence histograms,
//! representation export, and mapped out-of-domain evaluation. All
//! operations are read-only over parameters and emit plot-ready CSV.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, Example, Flag};
use crate::encoder::{self, ModelParams};
use crate::objective::{self, TdtConfig};
use crate::trainer::{self, TrainError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropOrder {
    /// Most confident tokens first; hurts a model whose confidence
    /// tracks task relevance.
    Descending,
    Ascending,
}

impl DropOrder {
    pub fn label(self) -> &'static str {
        match self {
            DropOrder::Descending => "descending",
            DropOrder::Ascending => "ascending",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Curve {
    pub order: DropOrder,
    pub rates: Vec<f64>,
    pub accuracies: Vec<f64>,
    /// True when the checkpoint had no confidence head and uniform
    /// scores were substituted.
    pub uniform_fallback: bool,
}

impl Curve {
    pub fn write_csv(&self, path: &Path) -> Result<(), TrainError> {
        let mut out = String::from("rate,accuracy,order\n");
        for (r, a) in self.rates.iter().zip(&self.accuracies) {
            out.push_str(&format!("{r},{a},{}\n", self.order.label()));
        }
        std::fs::write(path, out).map_err(|source| TrainError::Io { path: path.display().to_string(), source })
    }
}

/// Per-content-position confidence scores for every example.
///
/// Soft heads give the sigmoid score; 2-logit hard heads give the
/// noiseless tempered keep-probability at tau = 1. A checkpoint without a
/// confidence head yields uniform scores and sets the fallback flag.
pub fn token_confidences(params: &ModelParams, split: &[Example]) -> (Vec<Vec<f64>>, bool) {
    if !params.has_confidence_head() {
        eprintln!("warning: checkpoint has no confidence head; using uniform scores");
        return (split.iter().map(|ex| vec![1.0; ex.tokens.len()]).collect(), true);
    }
    let bound = params.set.bind();
    let cfg = &params.config;
    let mut all = Vec::with_capacity(split.len());
    for chunk in split.chunks(64) {
        let batch = data::encode_batch(chunk, cfg).expect("split re-encodes");
        let embeddings = encoder::embed(&batch, &bound, cfg);
        let data: Vec<f64> = if params.conf_head_dim == 1 {
            encoder::confidence_raw(&embeddings, &bound, cfg).data().to_vec()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let (_, soft) = objective::gumbel_confidence(&embeddings, &bound, cfg, 1.0, &mut rng, false)
                .expect("tau = 1 is valid");
            // keep-probability is category 1
            soft.data().chunks(2).map(|r| r[1]).collect()
        };
        for (r, ex) in chunk.iter().enumerate() {
            // content sits between CLS and SEP
            let row = &data[r * batch.seq..(r + 1) * batch.seq];
            all.push(row[1..1 + ex.tokens.len()].to_vec());
        }
    }
    (all, false)
}

/// Positions to mask at `rate`, by normalized confidence in the given
/// order; ties break toward the smaller position index.
fn drop_positions(scores: &[f64], rate: f64, order: DropOrder) -> Vec<usize> {
    let n = scores.len();
    let k = ((rate * n as f64).ceil() as usize).min(n);
    let total: f64 = scores.iter().sum();
    // normalization never changes the ranking; kept for the contract
    // that dropping works on a probability distribution
    let dist: Vec<f64> = if total > 0.0 {
        scores.iter().map(|&c| c / total).collect()
    } else {
        vec![1.0 / n as f64; n]
    };
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| match order {
        DropOrder::Descending => dist[b].partial_cmp(&dist[a]).unwrap().then(a.cmp(&b)),
        DropOrder::Ascending => dist[a].partial_cmp(&dist[b]).unwrap().then(a.cmp(&b)),
    });
    idx.truncate(k);
    idx
}

/// Accuracy after masking each example's top (or bottom) confidence
/// quantile, using confidences computed once on the unmasked input.
pub fn drop_curve(
    params: &ModelParams,
    split: &[Example],
    order: DropOrder,
    rates: &[f64],
) -> Result<Curve, TrainError> {
    assert!(rates.windows(2).all(|w| w[0] < w[1]), "rates must be strictly increasing");
    assert!(rates.iter().all(|r| (0.0..=1.0).contains(r)), "rates must lie in [0, 1]");
    let (confidences, uniform_fallback) = token_confidences(params, split);
    let mask_id = params.config.mask_id;
    let mut accuracies = Vec::with_capacity(rates.len());
    for &rate in rates {
        let masked: Vec<Example> = split
            .iter()
            .zip(&confidences)
            .map(|(ex, scores)| {
                let mut tokens = ex.tokens.clone();
                for p in drop_positions(scores, rate, order) {
                    tokens[p] = mask_id;
                }
                Example { tokens, label: ex.label, flags: ex.flags.clone() }
            })
            .collect();
        accuracies.push(trainer::evaluate(params, &masked)?.accuracy);
    }
    Ok(Curve { order, rates: rates.to_vec(), accuracies, uniform_fallback })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RateReport {
    pub rate: f64,
    /// One accuracy per seeded dataset, in seed order.
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerturbationReport {
    pub n_datasets: usize,
    pub seed: u64,
    pub rates: Vec<RateReport>,
}

impl PerturbationReport {
    pub fn write_csv(&self, path: &Path) -> Result<(), TrainError> {
        let mut out = String::from("rate,seed,accuracy\n");
        for r in &self.rates {
            for (i, a) in r.accuracies.iter().enumerate() {
                out.push_str(&format!("{},{},{}\n", r.rate, i, a));
            }
        }
        std::fs::write(path, out).map_err(|source| TrainError::Io { path: path.display().to_string(), source })
    }
}

fn perturb_example(ex: &Example, mask_id: usize, rate: f64, rng: &mut ChaCha8Rng) -> Example {
    let mut tokens = ex.tokens.clone();
    for i in 0..tokens.len() {
        if rng.gen::<f64>() < rate {
            // fair coin: MASK, or a token sampled from the same sequence
            tokens[i] = if rng.gen::<bool>() {
                mask_id
            } else {
                ex.tokens[rng.gen_range(0..ex.tokens.len())]
            };
        }
    }
    Example { tokens, label: ex.label, flags: ex.flags.clone() }
}

/// Accuracy over `n_datasets` independently perturbed copies of the
/// split, per rate. Dataset `i` draws from stream `i` of the master seed.
pub fn perturb_eval(
    params: &ModelParams,
    split: &[Example],
    rates: &[f64],
    n_datasets: usize,
    seed: u64,
) -> Result<PerturbationReport, TrainError> {
    assert!(rates.iter().all(|r| (0.0..=1.0).contains(r)), "rates must lie in [0, 1]");
    let mask_id = params.config.mask_id;
    let mut reports = Vec::with_capacity(rates.len());
    for &rate in rates {
        let mut accuracies = Vec::with_capacity(n_datasets);
        for i in 0..n_datasets {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let perturbed: Vec<Example> =
                split.iter().map(|ex| perturb_example(ex, mask_id, rate, &mut rng)).collect();
            accuracies.push(trainer::evaluate(params, &perturbed)?.accuracy);
        }
        let mean = accuracies.iter().sum::<f64>() / n_datasets as f64;
        let sd = (accuracies.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n_datasets as f64).sqrt();
        reports.push(RateReport {
            rate,
            mean,
            sd,
            min: accuracies.iter().copied().fold(f64::INFINITY, f64::min),
            max: accuracies.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            accuracies,
        });
    }
    Ok(PerturbationReport { n_datasets, seed, rates: reports })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Histogram {
    pub n_bins: usize,
    pub counts: Vec<usize>,
    /// Mean confidence per provenance flag, when flags are available.
    pub keyword_mean: f64,
    pub spurious_mean: f64,
    pub noise_mean: f64,
}

impl Histogram {
    pub fn write_csv(&self, path: &Path) -> Result<(), TrainError> {
        let mut out = String::from("bin_low,bin_high,count\n");
        let w = 1.0 / self.n_bins as f64;
        for (i, c) in self.counts.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", i as f64 * w, (i + 1) as f64 * w, c));
        }
        std::fs::write(path, out).map_err(|source| TrainError::Io { path: path.display().to_string(), source })
    }
}

/// Uniform [0,1] histogram of all content-token confidence scores,
/// plus per-flag means (a score of exactly 1 lands in the top bin).
pub fn confidence_histogram(params: &ModelParams, split: &[Example], n_bins: usize) -> Histogram {
    assert!(n_bins >= 1, "need at least one bin");
    let (confidences, _) = token_confidences(params, split);
    let mut counts = vec![0usize; n_bins];
    let mut sums = [0.0f64; 3];
    let mut ns = [0usize; 3];
    for (ex, scores) in split.iter().zip(&confidences) {
        for (&c, &f) in scores.iter().zip(&ex.flags) {
            let bin = ((c * n_bins as f64) as usize).min(n_bins - 1);
            counts[bin] += 1;
            let slot = match f {
                Flag::Keyword => 0,
                Flag::Spurious => 1,
                Flag::Noise => 2,
            };
            sums[slot] += c;
            ns[slot] += 1;
        }
    }
    let mean = |i: usize| if ns[i] == 0 { f64::NAN } else { sums[i] / ns[i] as f64 };
    Histogram {
        n_bins,
        counts,
        keyword_mean: mean(0),
        spurious_mean: mean(1),
        noise_mean: mean(2),
    }
}

/// CSV of classifier-input representations, one row per (example,
/// variant in {original, positive, negative}), for external projection
/// tools. Header: variant,label,h0..h{d-1}.
pub fn export_representations(
    params: &ModelParams,
    split: &[Example],
    tdt: &TdtConfig,
    path: &Path,
) -> Result<(), TrainError> {
    let io_err = |source| TrainError::Io { path: path.display().to_string(), source };
    let cfg = &params.config;
    let bound = params.set.bind();
    let d = cfg.d_model;
    let mut out = String::from("variant,label");
    for i in 0..d {
        out.push_str(&format!(",h{i}"));
    }
    out.push('\n');
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for chunk in split.chunks(64) {
        let batch = data::encode_batch(chunk, cfg)?;
        let embeddings = encoder::embed(&batch, &bound, cfg);
        let raw = encoder::confidence_raw(&embeddings, &bound, cfg);
        let c_pos = encoder::force_positive(&raw, &batch, cfg);
        let c_neg = encoder::force_negative(&raw, &batch, cfg);
        let anchor = objective::perturbation_anchor(
            tdt.perturbation_mode,
            &bound,
            &embeddings,
            &batch,
            cfg,
            tdt.gaussian_sigma,
            &mut rng,
        );
        let variants = [
            ("original", embeddings.clone()),
            ("positive", objective::positive_variant(&embeddings, &c_pos, &anchor)),
            ("negative", objective::negative_variant(&embeddings, &c_neg)),
        ];
        for (tag, e) in variants {
            let (h, _) = encoder::forward(&e, &batch, &bound, cfg)?;
            let h_cls = h.select_axis1(0);
            let data = h_cls.data();
            for (r, ex) in chunk.iter().enumerate() {
                out.push_str(&format!("{tag},{}", ex.label));
                for v in &data[r * d..(r + 1) * d] {
                    out.push_str(&format!(",{v}"));
                }
                out.push('\n');
            }
        }
    }
    std::fs::write(path, out).map_err(io_err)
}

/// Accuracy on a shifted split after mapping predictions into the
/// split's label space.
pub fn domain_eval(
    params: &ModelParams,
    ood_split: &[Example],
    mapping: &HashMap<usize, usize>,
) -> Result<f64, TrainError> {
    let result = trainer::evaluate(params, ood_split)?;
    let preds: Vec<usize> = result.records.iter().map(|r| r.prediction).collect();
    let mapped = data::label_map(&preds, mapping)?;
    let labels: Vec<usize> = ood_split.iter().map(|e| e.label).collect();
    Ok(data::accuracy(&mapped, &labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_corpus, SplitSizes, TaskSpec};

    fn setup() -> (Vec<Example>, ModelParams, TaskSpec) {
        let spec = TaskSpec { vocab_size: 60, min_len: 5, max_len: 10, ..TaskSpec::default() };
        let corpus = generate_corpus(
            &spec,
            SplitSizes { train: 8, dev: 8, test_iid: 48, test_antispurious: 8 },
            41,
        )
        .unwrap();
        let mut cfg = spec.model_config(spec.n_classes);
        cfg.d_model = 16;
        cfg.n_layers = 1;
        cfg.n_heads = 2;
        cfg.d_ff = 32;
        let params = ModelParams::init(cfg, 1, 13).unwrap();
        (corpus.test_iid, params, spec)
    }

    #[test]
    fn drop_positions_order_and_ties() {
        let scores = vec![0.2, 0.8, 0.2, 0.5];
        assert_eq!(drop_positions(&scores, 0.5, DropOrder::Descending), vec![1, 3]);
        assert_eq!(drop_positions(&scores, 0.5, DropOrder::Ascending), vec![0, 2]);
        // ceil: rate 0.3 of 4 tokens -> 2 masked
        assert_eq!(drop_positions(&scores, 0.3, DropOrder::Descending).len(), 2);
        assert_eq!(drop_positions(&scores, 0.0, DropOrder::Descending).len(), 0);
        assert_eq!(drop_positions(&scores, 1.0, DropOrder::Ascending).len(), 4);
    }

    #[test]
    fn drop_curve_rate_zero_equals_evaluate() {
        let (split, params, _) = setup();
        let base = trainer::evaluate(&params, &split).unwrap().accuracy;
        let curve = drop_curve(&params, &split, DropOrder::Descending, &[0.0, 0.5]).unwrap();
        assert_eq!(curve.accuracies[0], base);
        assert!(!curve.uniform_fallback);
    }

    #[test]
    fn drop_curve_rate_one_is_order_independent() {
        let (split, params, _) = setup();
        let d = drop_curve(&params, &split, DropOrder::Descending, &[1.0]).unwrap();
        let a = drop_curve(&params, &split, DropOrder::Ascending, &[1.0]).unwrap();
        assert_eq!(d.accuracies, a.accuracies);
    }

    #[test]
    fn drop_curve_is_deterministic() {
        let (split, params, _) = setup();
        let rates = [0.0, 0.2, 0.4];
        let c1 = drop_curve(&params, &split, DropOrder::Descending, &rates).unwrap();
        let c2 = drop_curve(&params, &split, DropOrder::Descending, &rates).unwrap();
        assert_eq!(c1.accuracies, c2.accuracies);
    }

    #[test]
    fn perturb_rate_zero_is_base_accuracy() {
        let (split, params, _) = setup();
        let base = trainer::evaluate(&params, &split).unwrap().accuracy;
        let report = perturb_eval(&params, &split, &[0.0], 5, 3).unwrap();
        assert!(report.rates[0].accuracies.iter().all(|&a| a == base));
        assert_eq!(report.rates[0].sd, 0.0);
    }

    #[test]
    fn perturb_is_seed_deterministic() {
        let (split, params, _) = setup();
        let r1 = perturb_eval(&params, &split, &[0.3], 4, 9).unwrap();
        let r2 = perturb_eval(&params, &split, &[0.3], 4, 9).unwrap();
        assert_eq!(r1.rates[0].accuracies, r2.rates[0].accuracies);
        // different seeds produce different perturbed inputs
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(10);
        let pa = perturb_example(&split[0], params.config.mask_id, 0.5, &mut a);
        let pb = perturb_example(&split[0], params.config.mask_id, 0.5, &mut b);
        assert_ne!(pa.tokens, pb.tokens);
    }

    #[test]
    fn perturbed_tokens_come_from_sequence_or_mask() {
        let (split, params, _) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for ex in &split {
            let p = perturb_example(ex, params.config.mask_id, 0.7, &mut rng);
            assert_eq!(p.tokens.len(), ex.tokens.len());
            for &t in &p.tokens {
                assert!(t == params.config.mask_id || ex.tokens.contains(&t));
            }
        }
    }

    #[test]
    fn histogram_conserves_counts() {
        let (split, params, _) = setup();
        let hist = confidence_histogram(&params, &split, 10);
        let total: usize = split.iter().map(|e| e.tokens.len()).sum();
        assert_eq!(hist.counts.iter().sum::<usize>(), total);
    }

    #[test]
    fn zeroed_head_concentrates_at_half() {
        let (split, mut params, _) = setup();
        params.set.get_mut("conf.w").data.iter_mut().for_each(|v| *v = 0.0);
        params.set.get_mut("conf.b").data.iter_mut().for_each(|v| *v = 0.0);
        let hist = confidence_histogram(&params, &split, 10);
        let total: usize = hist.counts.iter().sum();
        // sigma(0) = 0.5 falls in bin 5 of [0,1) deciles
        assert_eq!(hist.counts[5], total);
        assert!((hist.keyword_mean - 0.5).abs() < 1e-12);
        assert!((hist.noise_mean - 0.5).abs() < 1e-12);
    }

    #[test]
    fn representation_export_schema() {
        let (split, params, _) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("reprs.csv");
        export_representations(&params, &split[..6], &TdtConfig::default(), &path).unwrap();
        let body = std::fs::read_to_string(&path).unwrap();
        let mut lines = body.lines();
        let header = lines.next().unwrap();
        assert_eq!(header.split(',').count(), 2 + params.config.d_model);
        assert!(header.starts_with("variant,label,h0"));
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), 3 * 6);
        for row in &rows {
            let fields: Vec<&str> = row.split(',').collect();
            assert_eq!(fields.len(), 2 + params.config.d_model);
            assert!(["original", "positive", "negative"].contains(&fields[0]));
            for f in &fields[2..] {
                f.parse::<f64>().unwrap();
            }
        }
    }

    #[test]
    fn positive_rows_match_original_when_confidence_is_one() {
        // force the sigmoid head to saturate at ~1 so E+ ~= E
        let (split, mut params, _) = setup();
        params.set.get_mut("conf.w").data.iter_mut().for_each(|v| *v = 0.0);
        params.set.get_mut("conf.b").data[0] = 50.0;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("reprs.csv");
        export_representations(&params, &split[..4], &TdtConfig::default(), &path).unwrap();
        let body = std::fs::read_to_string(&path).unwrap();
        let rows: Vec<&str> = body.lines().skip(1).collect();
        let originals: Vec<&str> = rows.iter().filter(|r| r.starts_with("original")).copied().collect();
        let positives: Vec<&str> = rows.iter().filter(|r| r.starts_with("positive")).copied().collect();
        for (o, p) in originals.iter().zip(&positives) {
            let ov: Vec<f64> = o.split(',').skip(2).map(|v| v.parse().unwrap()).collect();
            let pv: Vec<f64> = p.split(',').skip(2).map(|v| v.parse().unwrap()).collect();
            for (a, b) in ov.iter().zip(&pv) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn domain_eval_identity_equals_evaluate() {
        let (split, params, _) = setup();
        let identity: HashMap<usize, usize> = (0..4).map(|i| (i, i)).collect();
        let acc = domain_eval(&params, &split, &identity).unwrap();
        assert_eq!(acc, trainer::evaluate(&params, &split).unwrap().accuracy);
    }

    #[test]
    fn analyses_leave_parameters_untouched() {
        let (split, params, _) = setup();
        let before = params.content_hash();
        let _ = drop_curve(&params, &split, DropOrder::Descending, &[0.0, 0.3, 0.6]).unwrap();
        let _ = perturb_eval(&params, &split, &[0.2], 3, 1).unwrap();
        let _ = confidence_histogram(&params, &split, 8);
        let dir = tempfile::tempdir().unwrap();
        export_representations(&params, &split[..4], &TdtConfig::default(), &dir.path().join("r.csv")).unwrap();
        let identity: HashMap<usize, usize> = (0..4).map(|i| (i, i)).collect();
        let _ = domain_eval(&params, &split, &identity).unwrap();
        assert_eq!(params.content_hash(), before);
    }

    #[test]
    fn curve_csv_schema() {
        let (split, params, _) = setup();
        let curve = drop_curve(&params, &split, DropOrder::Ascending, &[0.0, 0.1, 0.2]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curve.csv");
        curve.write_csv(&path).unwrap();
        let body = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = body.lines().collect();
        assert_eq!(lines[0], "rate,accuracy,order");
        assert_eq!(lines.len(), 4);
        assert!(lines[1].ends_with(",ascending"));
    }

    #[test]
    fn hard_head_confidences_are_probabilities() {
        let (split, _, spec) = setup();
        let mut cfg = spec.model_config(spec.n_classes);
        cfg.d_model = 16;
        cfg.n_layers = 1;
        cfg.n_heads = 2;
        cfg.d_ff = 32;
        let params = ModelParams::init(cfg, 2, 13).unwrap();
        let (confs, fallback) = token_confidences(&params, &split[..8]);
        assert!(!fallback);
        for row in &confs {
            assert!(row.iter().all(|&c| (0.0..=1.0).contains(&c)));
        }
    }
}
