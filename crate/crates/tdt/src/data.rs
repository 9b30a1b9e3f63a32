//! Synthetic spurious-correlation benchmark.
//!
//! Each class owns a disjoint keyword set that causally determines the
//! label; each class additionally owns one spurious token that merely
//! co-occurs with it at rate rho during training. The anti-spurious test
//! split attaches spurious tokens to examples of a different class at the
//! same rate, exposing shortcut reliance. Provenance flags are stored per
//! token but are only ever visible to evaluation oracles, never the model.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{EncodedBatch, EncoderError, ModelConfig};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid task spec: {0}")]
    Spec(String),
    #[error("subsample size {requested} exceeds split size {available}")]
    Subsample { requested: usize, available: usize },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("label {0} missing from label map")]
    UnmappedLabel(usize),
    #[error(transparent)]
    Encode(#[from] EncoderError),
}

/// Per-token provenance, used by oracles and analyses only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    Keyword,
    Spurious,
    Noise,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub n_classes: usize,
    /// Keyword vocabulary size per class.
    pub keywords_per_class: usize,
    /// Distinct keywords of the labeled class placed in each example.
    pub keywords_per_example: usize,
    pub vocab_size: usize,
    /// Content length range, inclusive; excludes CLS/SEP.
    pub min_len: usize,
    pub max_len: usize,
    /// Spurious co-occurrence rate on train and test_iid.
    pub rho: f64,
    /// Classes that own a spurious token.
    pub spurious_classes: Vec<usize>,
    pub pad_id: usize,
    pub cls_id: usize,
    pub sep_id: usize,
    pub mask_id: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            n_classes: 4,
            keywords_per_class: 5,
            keywords_per_example: 2,
            vocab_size: 2000,
            min_len: 8,
            max_len: 24,
            rho: 0.95,
            spurious_classes: vec![0, 1, 2, 3],
            pad_id: 0,
            cls_id: 1,
            sep_id: 2,
            mask_id: 3,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.n_classes < 2 {
            return Err(DataError::Spec("need at least 2 classes".into()));
        }
        if self.keywords_per_example == 0 || self.keywords_per_example > self.keywords_per_class {
            return Err(DataError::Spec(format!(
                "keywords_per_example {} must be in 1..={}",
                self.keywords_per_example, self.keywords_per_class
            )));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(DataError::Spec(format!("rho {} outside [0, 1]", self.rho)));
        }
        if self.min_len < self.keywords_per_example + 1 || self.min_len > self.max_len {
            return Err(DataError::Spec(format!(
                "length range {}..={} must fit {} keywords plus a spurious slot",
                self.min_len, self.max_len, self.keywords_per_example
            )));
        }
        if self.spurious_classes.is_empty() {
            return Err(DataError::Spec("at least one class must own a spurious token".into()));
        }
        if self.spurious_classes.iter().any(|&c| c >= self.n_classes) {
            return Err(DataError::Spec("spurious_classes contains an out-of-range class".into()));
        }
        if self.spurious_classes.len() < 2 && self.n_classes < 2 {
            return Err(DataError::Spec("anti-spurious split needs a second class".into()));
        }
        if self.noise_vocab_size() < 2 {
            return Err(DataError::Spec(format!(
                "vocab {} too small for {} specials + {} keywords + {} spurious tokens",
                self.vocab_size,
                4,
                self.n_classes * self.keywords_per_class,
                self.n_classes
            )));
        }
        Ok(())
    }

    // Token id layout: 4 specials, then keywords grouped by class, then
    // one spurious token per class, then noise.
    fn keyword_id(&self, class: usize, j: usize) -> usize {
        4 + class * self.keywords_per_class + j
    }

    pub fn spurious_id(&self, class: usize) -> usize {
        4 + self.n_classes * self.keywords_per_class + class
    }

    fn noise_base(&self) -> usize {
        4 + self.n_classes * self.keywords_per_class + self.n_classes
    }

    fn noise_vocab_size(&self) -> usize {
        self.vocab_size.saturating_sub(self.noise_base())
    }

    /// Class a keyword id belongs to, if it is one.
    pub fn keyword_class(&self, id: usize) -> Option<usize> {
        let kw_end = 4 + self.n_classes * self.keywords_per_class;
        (4..kw_end).contains(&id).then(|| (id - 4) / self.keywords_per_class)
    }

    /// Class a spurious id belongs to, if it is one.
    pub fn spurious_class(&self, id: usize) -> Option<usize> {
        (self.noise_base() - self.n_classes..self.noise_base())
            .contains(&id)
            .then(|| id - (self.noise_base() - self.n_classes))
    }

    /// Printable pseudo-word for a token id.
    pub fn token_string(&self, id: usize) -> String {
        if id == self.pad_id {
            return "[PAD]".into();
        }
        if id == self.cls_id {
            return "[CLS]".into();
        }
        if id == self.sep_id {
            return "[SEP]".into();
        }
        if id == self.mask_id {
            return "[MASK]".into();
        }
        if let Some(c) = self.keyword_class(id) {
            return format!("kw{c}_{}", (id - 4) % self.keywords_per_class);
        }
        if let Some(c) = self.spurious_class(id) {
            return format!("sp{c}");
        }
        format!("nz{}", id - self.noise_base())
    }

    pub fn model_config(&self, n_classes: usize) -> ModelConfig {
        let mut cfg = ModelConfig::desk_default(self.vocab_size, n_classes);
        cfg.max_len = cfg.max_len.max(self.max_len + 2);
        cfg
    }
}

/// One labeled sequence. `tokens` holds content only (no CLS/SEP/PAD);
/// `flags` gives the provenance of each position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
    pub flags: Vec<Flag>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub dev: usize,
    pub test_iid: usize,
    pub test_antispurious: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes { train: 8000, dev: 1000, test_iid: 1000, test_antispurious: 1000 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CorpusBundle {
    pub spec: TaskSpec,
    pub seed: u64,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test_iid: Vec<Example>,
    pub test_antispurious: Vec<Example>,
}

/// Spurious placement policy per split.
#[derive(Clone, Copy, PartialEq)]
enum SpuriousPolicy {
    /// Own-class token at rate rho (train, dev, test_iid).
    Correlated,
    /// A different designated class's token at rate rho.
    Conflicting,
}

fn generate_example(spec: &TaskSpec, policy: SpuriousPolicy, rng: &mut ChaCha8Rng) -> Example {
    let label = rng.gen_range(0..spec.n_classes);
    let len = rng.gen_range(spec.min_len..=spec.max_len);
    let noise_base = spec.noise_base();
    let mut tokens: Vec<usize> = (0..len)
        .map(|_| noise_base + rng.gen_range(0..spec.noise_vocab_size()))
        .collect();
    let mut flags = vec![Flag::Noise; len];

    let spurious = match policy {
        SpuriousPolicy::Correlated => (spec.spurious_classes.contains(&label)
            && rng.gen::<f64>() < spec.rho)
            .then(|| spec.spurious_id(label)),
        SpuriousPolicy::Conflicting => {
            let others: Vec<usize> =
                spec.spurious_classes.iter().copied().filter(|&c| c != label).collect();
            (!others.is_empty() && rng.gen::<f64>() < spec.rho)
                .then(|| spec.spurious_id(others[rng.gen_range(0..others.len())]))
        }
    };

    // distinct positions for the keywords and the optional spurious token
    let slots = spec.keywords_per_example + usize::from(spurious.is_some());
    let mut positions: Vec<usize> = (0..len).collect();
    positions.shuffle(rng);
    positions.truncate(slots);

    let mut kw_choices: Vec<usize> = (0..spec.keywords_per_class).collect();
    kw_choices.shuffle(rng);
    for (i, &pos) in positions.iter().take(spec.keywords_per_example).enumerate() {
        tokens[pos] = spec.keyword_id(label, kw_choices[i]);
        flags[pos] = Flag::Keyword;
    }
    if let Some(sp) = spurious {
        let pos = positions[spec.keywords_per_example];
        tokens[pos] = sp;
        flags[pos] = Flag::Spurious;
    }
    Example { tokens, label, flags }
}

/// Seeded corpus generation; each split draws from its own RNG stream, so
/// splits are disjoint by construction and individually reproducible.
pub fn generate_corpus(spec: &TaskSpec, sizes: SplitSizes, seed: u64) -> Result<CorpusBundle, DataError> {
    spec.validate()?;
    if sizes.train == 0 || sizes.dev == 0 || sizes.test_iid == 0 || sizes.test_antispurious == 0 {
        return Err(DataError::Spec("all split sizes must be positive".into()));
    }
    let gen_split = |stream: u64, n: usize, policy: SpuriousPolicy| -> Vec<Example> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        (0..n).map(|_| generate_example(spec, policy, &mut rng)).collect()
    };
    Ok(CorpusBundle {
        spec: spec.clone(),
        seed,
        train: gen_split(0, sizes.train, SpuriousPolicy::Correlated),
        dev: gen_split(1, sizes.dev, SpuriousPolicy::Correlated),
        test_iid: gen_split(2, sizes.test_iid, SpuriousPolicy::Correlated),
        test_antispurious: gen_split(3, sizes.test_antispurious, SpuriousPolicy::Conflicting),
    })
}

/// Uniform subsample without replacement.
pub fn subsample(split: &[Example], k: usize, seed: u64) -> Result<Vec<Example>, DataError> {
    if k > split.len() {
        return Err(DataError::Subsample { requested: k, available: split.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..split.len()).collect();
    indices.shuffle(&mut rng);
    indices.truncate(k);
    indices.sort_unstable();
    Ok(indices.into_iter().map(|i| split[i].clone()).collect())
}

/// Per-class counts of a split, reported alongside subsamples.
pub fn label_distribution(split: &[Example], n_classes: usize) -> Vec<usize> {
    let mut counts = vec![0usize; n_classes];
    for ex in split {
        counts[ex.label] += 1;
    }
    counts
}

#[derive(Serialize, Deserialize)]
struct JsonlRecord {
    tokens: Vec<usize>,
    text: Vec<String>,
    label: usize,
    flags: Vec<Flag>,
}

pub fn write_jsonl(split: &[Example], spec: &TaskSpec, path: &Path) -> Result<(), DataError> {
    let io_err = |source| DataError::Io { path: path.display().to_string(), source };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    for ex in split {
        let rec = JsonlRecord {
            tokens: ex.tokens.clone(),
            text: ex.tokens.iter().map(|&t| spec.token_string(t)).collect(),
            label: ex.label,
            flags: ex.flags.clone(),
        };
        serde_json::to_writer(&mut out, &rec)
            .map_err(|e| io_err(std::io::Error::new(std::io::ErrorKind::Other, e)))?;
        out.write_all(b"\n").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Example>, DataError> {
    let file = File::open(path).map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    let mut split = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonlRecord = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if rec.tokens.len() != rec.flags.len() {
            return Err(DataError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: format!("{} tokens but {} flags", rec.tokens.len(), rec.flags.len()),
            });
        }
        split.push(Example { tokens: rec.tokens, label: rec.label, flags: rec.flags });
    }
    Ok(split)
}

/// Many-to-one label mapping applied to predictions before accuracy, for
/// cross-task evaluation.
pub fn label_map(predictions: &[usize], mapping: &HashMap<usize, usize>) -> Result<Vec<usize>, DataError> {
    predictions
        .iter()
        .map(|&p| mapping.get(&p).copied().ok_or(DataError::UnmappedLabel(p)))
        .collect()
}

/// Wrap content in CLS/SEP and pad to a shared width.
pub fn encode_batch(examples: &[Example], config: &ModelConfig) -> Result<EncodedBatch, DataError> {
    let max_content = examples.iter().map(|e| e.tokens.len()).max().unwrap_or(0);
    let seq = max_content + 2;
    let mut ids = Vec::with_capacity(examples.len() * seq);
    let mut labels = Vec::with_capacity(examples.len());
    for ex in examples {
        ids.push(config.cls_id);
        ids.extend_from_slice(&ex.tokens);
        ids.push(config.sep_id);
        ids.resize(ids.len() + (max_content - ex.tokens.len()), config.pad_id);
        labels.push(ex.label);
    }
    Ok(EncodedBatch::new(ids, examples.len(), seq, labels, config)?)
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    assert_eq!(predictions.len(), labels.len());
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / predictions.len().max(1) as f64
}

/// Bayes-optimal rule: the class of any keyword-flagged token.
pub fn keyword_oracle(ex: &Example, spec: &TaskSpec) -> usize {
    ex.tokens
        .iter()
        .zip(&ex.flags)
        .find_map(|(&t, &f)| (f == Flag::Keyword).then(|| spec.keyword_class(t)).flatten())
        .expect("every example carries keywords")
}

/// Shortcut rule: the class of the spurious token if present, otherwise
/// a fixed fallback class.
pub fn spurious_only_oracle(ex: &Example, spec: &TaskSpec, fallback: usize) -> usize {
    ex.tokens
        .iter()
        .zip(&ex.flags)
        .find_map(|(&t, &f)| (f == Flag::Spurious).then(|| spec.spurious_class(t)).flatten())
        .unwrap_or(fallback)
}
