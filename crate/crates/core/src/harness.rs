//! Experiment pipeline: data preparation, optional LM / SA pretraining,
//! weight transfer, supervised fine-tuning, evaluation and reports. Also
//! home to the synthetic long-range classification task and a bag-of-words
//! baseline for it.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, CheckpointMeta, StorageDtype};
use crate::error::{Error, Result};
use crate::lstmcore::LstmConfig;
use crate::models::{
    objective_loss, predict_class, Example, InputKind, LabelMode, ModelSpec, Objective, Params, Preset,
    RowObjective, RunOptions,
};
use crate::numkernel::RngState;
use crate::textpipe::{
    encode_documents, load_corpus, tokenize, tokenize_words, validation_split, CorpusFormat, Level, RawCorpus,
    RawDocument, RowSequence, Vocabulary,
};
use crate::train::{train_loop, write_history_csv, DropoutConfig, HistoryRow, TrainConfig};

/// Environment variable naming the directory relative output paths resolve against.
pub const OUTPUT_ROOT_ENV: &str = "SEQPT_OUTPUT_ROOT";

// ---------------------------------------------------------------------------
// synthetic task

/// Shape of the synthetic long-range task.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    /// Number of filler word types.
    pub vocab: usize,
    /// Tokens per document, EOS not counted.
    pub length: usize,
    pub classes: usize,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    /// Extra unlabeled documents available to pretraining.
    pub n_unlabeled: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            vocab: 8,
            length: 12,
            classes: 2,
            n_train: 2000,
            n_valid: 500,
            n_test: 500,
            n_unlabeled: 0,
        }
    }
}

/// Two lowercase letters per index, so the word tokenizer keeps names intact.
fn letters(mut i: usize) -> String {
    let mut s = String::new();
    loop {
        s.insert(0, (b'a' + (i % 26) as u8) as char);
        i /= 26;
        if i == 0 {
            break;
        }
        i -= 1;
    }
    if s.len() == 1 {
        s.insert(0, 'a');
    }
    s
}

/// Share of synthetic documents whose label needs both the marker and the cue.
pub const LONG_RANGE_FRACTION: f64 = 0.7;
/// Probability that a filler word is drawn from the marker's topic.
pub const TOPIC_BIAS: f64 = 0.95;

/// Generates `n_docs` labeled documents. Document `i` has label `i mod classes`.
///
/// Each document has one marker word (prefix `m`) in its first quarter and one
/// cue word (prefix `q`) in its last quarter; everything else is filler (prefix
/// `f`). In a `LONG_RANGE_FRACTION` share of documents the marker and the cue
/// each carry a class value and the label is their sum mod `classes`, so
/// neither word alone says anything about the label. The remaining documents
/// use a cue that names the label directly. Fillers lean toward a topic picked
/// by the marker, which gives a next-word model a reason to remember it.
pub fn make_synthetic_task(seed: u64, n_docs: usize, vocab: usize, length: usize, classes: usize) -> Result<Vec<RawDocument>> {
    if n_docs == 0 || vocab == 0 || classes < 2 || length < 4 {
        return Err(Error::Config(format!(
            "synthetic task needs n_docs > 0, vocab > 0, classes >= 2 and length >= 4 \
             (got {n_docs}, {vocab}, {classes}, {length})"
        )));
    }
    let root = RngState::new(seed);
    let per_class = 2;
    let quarter = (length / 4).max(1);
    let docs = (0..n_docs)
        .map(|i| {
            let mut rng = root.substream(i as u64);
            let label = i % classes;
            let marker = rng.below(classes * per_class);
            let m_class = marker % classes;
            let q_class = (label + classes - m_class) % classes;
            let long_range = rng.next_f64() < LONG_RANGE_FRACTION;
            let cue = if long_range {
                q_class + classes * rng.below(per_class)
            } else {
                // a cue from the second bank names the label outright
                classes * per_class + label + classes * rng.below(per_class)
            };
            let m_pos = rng.below(quarter);
            let q_pos = length - 1 - rng.below(quarter);
            let words: Vec<String> = (0..length)
                .map(|p| {
                    if p == m_pos {
                        format!("m{}", letters(marker))
                    } else if p == q_pos {
                        format!("q{}", letters(cue))
                    } else {
                        let f = if rng.next_f64() < TOPIC_BIAS {
                            // topic words: fillers congruent to the marker class
                            let k = vocab.div_ceil(classes).max(1);
                            (m_class + classes * rng.below(k)) % vocab
                        } else {
                            rng.below(vocab)
                        };
                        format!("f{}", letters(f))
                    }
                })
                .collect();
            RawDocument {
                label: Some(label),
                text: words.join(" "),
            }
        })
        .collect();
    Ok(docs)
}

/// Multinomial naive Bayes over word counts with add-one smoothing. It sees
/// which words occur but not where, which is the point of comparison.
#[derive(Clone, Debug)]
pub struct BagOfWords {
    log_prior: Vec<f64>,
    log_lik: Vec<HashMap<String, f64>>,
    log_unseen: Vec<f64>,
}

impl BagOfWords {
    pub fn fit(docs: &[RawDocument], classes: usize) -> Result<Self> {
        let mut counts: Vec<HashMap<String, f64>> = vec![HashMap::new(); classes];
        let mut totals = vec![0.0; classes];
        let mut docs_per_class = vec![0.0; classes];
        let mut vocab: HashMap<String, ()> = HashMap::new();
        for d in docs {
            let label = d
                .label
                .filter(|&l| l < classes)
                .ok_or_else(|| Error::Contract("bag-of-words needs labels below num_classes".into()))?;
            docs_per_class[label] += 1.0;
            for w in tokenize_words(&d.text) {
                *counts[label].entry(w.clone()).or_default() += 1.0;
                totals[label] += 1.0;
                vocab.insert(w, ());
            }
        }
        let n = docs.len() as f64;
        let v = vocab.len() as f64;
        let log_lik = counts
            .iter()
            .zip(&totals)
            .map(|(c, &t)| c.iter().map(|(w, &k)| (w.clone(), ((k + 1.0) / (t + v)).ln())).collect())
            .collect();
        Ok(BagOfWords {
            log_prior: docs_per_class.iter().map(|&k| ((k + 1.0) / (n + classes as f64)).ln()).collect(),
            log_lik,
            log_unseen: totals.iter().map(|&t| (1.0 / (t + v)).ln()).collect(),
        })
    }

    pub fn predict(&self, text: &str) -> usize {
        let words = tokenize_words(text);
        let scores: Vec<f64> = (0..self.log_prior.len())
            .map(|c| {
                self.log_prior[c]
                    + words
                        .iter()
                        .map(|w| *self.log_lik[c].get(w).unwrap_or(&self.log_unseen[c]))
                        .sum::<f64>()
            })
            .collect();
        crate::numkernel::argmax(&scores)
    }

    pub fn error_rate(&self, docs: &[RawDocument]) -> Result<f64> {
        if docs.is_empty() {
            return Err(Error::Contract("cannot evaluate on an empty split".into()));
        }
        let wrong = docs.iter().filter(|d| Some(self.predict(&d.text)) != d.label).count();
        Ok(wrong as f64 / docs.len() as f64)
    }
}

// ---------------------------------------------------------------------------
// evaluation

/// Fraction of examples whose greedy class differs from the label. No dropout.
pub fn evaluate(params: &Params, examples: &[Example], lstm: &LstmConfig) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Contract("cannot evaluate on an empty split".into()));
    }
    let mut wrong = 0usize;
    for ex in examples {
        let label = ex
            .label()
            .ok_or_else(|| Error::Contract("evaluation needs labeled examples".into()))?;
        if predict_class(params, ex, lstm)? != label {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / examples.len() as f64)
}

/// Validation score for unsupervised objectives: teacher-forced greedy token
/// error for LM / SA, mean squared error per step for row objectives.
pub fn unsupervised_error(params: &Params, objective: &Objective, examples: &[Example], lstm: &LstmConfig) -> Result<f64> {
    let opts = RunOptions {
        lstm: *lstm,
        ..RunOptions::default()
    };
    let (mut num, mut den) = (0.0, 0.0);
    for ex in examples {
        if let Some(out) = objective_loss(params, objective, ex, &opts, None)? {
            match objective {
                Objective::Rows { .. } => {
                    num += out.loss;
                    den += out.normalizer;
                }
                _ => {
                    num += (out.counted - out.correct) as f64;
                    den += out.counted as f64;
                }
            }
        }
    }
    if den == 0.0 {
        return Err(Error::Contract("no validation example is long enough for the objective".into()));
    }
    Ok(num / den)
}

// ---------------------------------------------------------------------------
// configuration

/// How the classifier is initialized before fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Random initialization (the plain LSTM baseline).
    None,
    /// Embedding and LSTM weights from a next-token language model.
    Lm,
    /// Embedding and LSTM weights from a sequence autoencoder.
    Sa,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::None => "none",
            Variant::Lm => "lm",
            Variant::Sa => "sa",
        }
    }

    /// Row label in reports, following the usual naming of the three systems.
    pub fn system(self) -> &'static str {
        match self {
            Variant::None => "LSTM",
            Variant::Lm => "LM-LSTM",
            Variant::Sa => "SA-LSTM",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Variant::None),
            "lm" => Ok(Variant::Lm),
            "sa" => Ok(Variant::Sa),
            other => Err(Error::Config(format!("unknown pretraining variant {other:?} (none, lm, sa)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Last,
    LinearGain,
    Joint,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last" => Ok(Mode::Last),
            "linear_gain" => Ok(Mode::LinearGain),
            "joint" => Ok(Mode::Joint),
            other => Err(Error::Config(format!("unknown objective mode {other:?} (last, linear_gain, joint)"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelOverrides {
    pub embed_dim: Option<usize>,
    pub layers: Option<usize>,
    pub hidden: Option<usize>,
    pub head_hidden: Option<usize>,
    pub row_dim: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub format: CorpusFormat,
    pub train: Option<PathBuf>,
    /// When absent, 15% of the training documents are held out.
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Extra unlabeled corpora (plain lines, or row matrices for real input) used only for pretraining.
    pub unlabeled: Vec<PathBuf>,
    pub min_count: usize,
    pub num_classes: Option<usize>,
    /// Generate the synthetic task instead of reading files.
    pub synthetic: Option<SyntheticConfig>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            format: CorpusFormat::LabeledTsv,
            train: None,
            valid: None,
            test: None,
            unlabeled: Vec::new(),
            min_count: 2,
            num_classes: None,
            synthetic: None,
        }
    }
}

/// Everything one experiment run depends on. Loaded from TOML; every field
/// has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: String,
    /// Shrink the preset to this hidden size (see [`Preset::desk_scale`]).
    pub desk_hidden: Option<usize>,
    /// Overrides the preset's tokenization level.
    pub level: Option<Level>,
    pub model: ModelOverrides,
    pub data: DataConfig,
    pub variants: Vec<Variant>,
    pub mode: Mode,
    pub joint_lambda: f64,
    /// Fine-tuning dropout; the preset's rates when absent.
    pub dropout: Option<DropoutConfig>,
    pub pretrain_dropout: DropoutConfig,
    pub pretrain: TrainConfig,
    pub train: TrainConfig,
    /// Master seed. Overrides the seeds inside `pretrain` and `train` and
    /// seeds the synthetic generator.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub checkpoint_dtype: StorageDtype,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            preset: "imdb".into(),
            desk_hidden: Some(64),
            level: None,
            model: ModelOverrides::default(),
            data: DataConfig::default(),
            variants: vec![Variant::None, Variant::Lm, Variant::Sa],
            mode: Mode::Last,
            joint_lambda: 1.0,
            dropout: None,
            pretrain_dropout: DropoutConfig::default(),
            pretrain: TrainConfig {
                max_steps: 20_000,
                ..TrainConfig::default()
            },
            train: TrainConfig {
                max_steps: 20_000,
                ..TrainConfig::default()
            },
            seed: 0,
            output_dir: PathBuf::from("runs/experiment"),
            checkpoint_dtype: StorageDtype::F64,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("experiment config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// `output_dir`, resolved against `$SEQPT_OUTPUT_ROOT` when relative.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }

    /// The preset with desk scaling and overrides applied. `vocab_size` is
    /// filled in later from the data.
    pub fn model_spec(&self) -> Result<(ModelSpec, DropoutConfig)> {
        let mut preset = Preset::by_name(&self.preset)?;
        if let Some(h) = self.desk_hidden {
            preset = preset.desk_scale(h);
        }
        let mut spec = preset.spec;
        if let Some(level) = self.level {
            if spec.level == InputKind::Real {
                return Err(Error::Config("a real-valued preset has no tokenization level".into()));
            }
            spec.level = match level {
                Level::Word => InputKind::Word,
                Level::Char => InputKind::Char,
            };
        }
        let o = &self.model;
        spec.embed_dim = o.embed_dim.unwrap_or(spec.embed_dim);
        spec.layers = o.layers.unwrap_or(spec.layers);
        spec.hidden = o.hidden.unwrap_or(spec.hidden);
        spec.head_hidden = o.head_hidden.unwrap_or(spec.head_hidden);
        spec.row_dim = o.row_dim.unwrap_or(spec.row_dim);
        if let Some(c) = self.data.num_classes.or(self.data.synthetic.map(|s| s.classes)) {
            spec.num_classes = c;
        }
        Ok((spec, self.dropout.unwrap_or(preset.dropout)))
    }

    pub fn validate(&self) -> Result<()> {
        let (spec, dropout) = self.model_spec()?;
        dropout.validate()?;
        self.pretrain_dropout.validate()?;
        self.pretrain.validate()?;
        self.train.validate()?;
        if self.variants.is_empty() {
            return Err(Error::Config("at least one variant is required".into()));
        }
        if !(self.joint_lambda >= 0.0) {
            return Err(Error::Config(format!("joint_lambda must be non-negative, got {}", self.joint_lambda)));
        }
        if self.mode == Mode::Joint && spec.level == InputKind::Real {
            return Err(Error::Config("joint mode needs token input".into()));
        }
        if self.data.synthetic.is_none() && self.data.train.is_none() {
            return Err(Error::Config("data.train (or data.synthetic) is required".into()));
        }
        if self.data.synthetic.is_none() && self.data.test.is_none() {
            return Err(Error::Config("data.test is required".into()));
        }
        if self.data.synthetic.is_some() && spec.level == InputKind::Real {
            return Err(Error::Config("the synthetic task is text; pick a word or char preset".into()));
        }
        Ok(())
    }

    fn fine_tune_objective(&self) -> Objective {
        match self.mode {
            Mode::Last => Objective::Classify { mode: LabelMode::Last },
            Mode::LinearGain => Objective::Classify {
                mode: LabelMode::LinearGain,
            },
            Mode::Joint => Objective::Joint {
                lambda: self.joint_lambda,
            },
        }
    }

    fn seeded(&self, base: &TrainConfig, key: u64) -> TrainConfig {
        TrainConfig {
            seed: RngState::new(self.seed).substream(key).next_u64(),
            ..*base
        }
    }
}

// ---------------------------------------------------------------------------
// data preparation

/// Encoded data for every stage of one experiment.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub spec: ModelSpec,
    pub dropout: DropoutConfig,
    pub vocab: Option<Vocabulary>,
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
    /// Training documents (labels dropped) followed by the unlabeled corpora.
    pub pretrain: Vec<Example>,
    /// Bag-of-words test error, for text data.
    pub bow_test_error: Option<f64>,
}

fn synthetic_splits(cfg: &SyntheticConfig, seed: u64) -> Result<[Vec<RawDocument>; 4]> {
    let n = cfg.n_train + cfg.n_valid + cfg.n_test + cfg.n_unlabeled;
    let docs = make_synthetic_task(seed, n, cfg.vocab, cfg.length, cfg.classes)?;
    let (train, rest) = docs.split_at(cfg.n_train);
    let (valid, rest) = rest.split_at(cfg.n_valid);
    let (test, unlabeled) = rest.split_at(cfg.n_test);
    let unlabeled = unlabeled
        .iter()
        .map(|d| RawDocument {
            label: None,
            text: d.text.clone(),
        })
        .collect();
    Ok([train.to_vec(), valid.to_vec(), test.to_vec(), unlabeled])
}

fn unlabel(ex: &Example) -> Example {
    match ex {
        Example::Tokens { ids, .. } => Example::Tokens {
            ids: ids.clone(),
            label: None,
        },
        Example::Rows { rows, .. } => Example::Rows {
            rows: rows.clone(),
            label: None,
        },
    }
}

fn expect_text(c: RawCorpus, path: &Path) -> Result<Vec<RawDocument>> {
    match c {
        RawCorpus::Text(d) => Ok(d),
        RawCorpus::Rows(_) => Err(Error::Config(format!("{}: expected a text corpus", path.display()))),
    }
}

fn expect_rows(c: RawCorpus, path: &Path) -> Result<Vec<RowSequence>> {
    match c {
        RawCorpus::Rows(r) => Ok(r),
        RawCorpus::Text(_) => Err(Error::Config(format!("{}: expected a row-matrix corpus", path.display()))),
    }
}

/// Loads (or generates) the corpora, builds one vocabulary over the training
/// and unlabeled text, and encodes every split.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    cfg.validate()?;
    let (mut spec, dropout) = cfg.model_spec()?;
    let classes = spec.num_classes;
    let d = &cfg.data;
    if spec.level == InputKind::Real {
        let load = |p: &Path| load_corpus(p, CorpusFormat::RowMatrix, Some(classes)).and_then(|c| expect_rows(c, p));
        let train_path = d.train.as_deref().expect("validated");
        let train_rows = load(train_path)?;
        let (train_rows, valid_rows) = match &d.valid {
            Some(p) => (train_rows, load(p)?),
            None => validation_split(&train_rows),
        };
        let test_rows = load(d.test.as_deref().expect("validated"))?;
        let mut unl = Vec::new();
        for p in &d.unlabeled {
            unl.extend(load_corpus(p, CorpusFormat::RowMatrix, None).and_then(|c| expect_rows(c, p))?);
        }
        if let Some(first) = train_rows.first() {
            spec.row_dim = first.rows.cols();
        }
        let conv = |r: &[RowSequence]| -> Vec<Example> { r.iter().map(Example::from).collect() };
        let train = conv(&train_rows);
        let mut pretrain: Vec<Example> = train.iter().map(unlabel).collect();
        pretrain.extend(conv(&unl).iter().map(unlabel));
        return finish(PreparedData {
            spec,
            dropout,
            vocab: None,
            train,
            valid: conv(&valid_rows),
            test: conv(&test_rows),
            pretrain,
            bow_test_error: None,
        });
    }

    let level = match spec.level {
        InputKind::Char => Level::Char,
        _ => Level::Word,
    };
    let (train_docs, valid_docs, test_docs, unl_docs) = if let Some(syn) = &d.synthetic {
        let [a, b, c, u] = synthetic_splits(syn, cfg.seed)?;
        (a, b, c, u)
    } else {
        let load = |p: &Path, f: CorpusFormat| load_corpus(p, f, Some(classes)).and_then(|c| expect_text(c, p));
        let train_path = d.train.as_deref().expect("validated");
        let train = load(train_path, d.format)?;
        let (train, valid) = match &d.valid {
            Some(p) => (train, load(p, d.format)?),
            None => validation_split(&train),
        };
        let test = load(d.test.as_deref().expect("validated"), d.format)?;
        let mut unl = Vec::new();
        for p in &d.unlabeled {
            unl.extend(load_corpus(p, CorpusFormat::PlainLines, None).and_then(|c| expect_text(c, p))?);
        }
        (train, valid, test, unl)
    };
    if train_docs.iter().any(|doc| doc.label.is_none()) {
        return Err(Error::Config("every training document needs a label".into()));
    }
    let token_lists: Vec<Vec<String>> = train_docs
        .iter()
        .chain(&unl_docs)
        .map(|doc| tokenize(&doc.text, level))
        .collect();
    let vocab = Vocabulary::build(&token_lists, d.min_count, level)?;
    spec.vocab_size = vocab.len();
    let bow_test_error = if level == Level::Word {
        Some(BagOfWords::fit(&train_docs, classes)?.error_rate(&test_docs)?)
    } else {
        None
    };
    let enc = |docs: &[RawDocument], tag: &str| -> Vec<Example> {
        encode_documents(docs, &vocab, tag).iter().map(Example::from).collect()
    };
    let train = enc(&train_docs, "train");
    let mut pretrain: Vec<Example> = train.iter().map(unlabel).collect();
    pretrain.extend(enc(&unl_docs, "unlabeled"));
    finish(PreparedData {
        spec,
        dropout,
        train,
        valid: enc(&valid_docs, "valid"),
        test: enc(&test_docs, "test"),
        pretrain,
        vocab: Some(vocab),
        bow_test_error,
    })
}

fn finish(data: PreparedData) -> Result<PreparedData> {
    data.spec.validate()?;
    if data.spec.num_classes < 2 {
        return Err(Error::Config("num_classes must be at least 2".into()));
    }
    for (name, split) in [("train", &data.train), ("valid", &data.valid), ("test", &data.test)] {
        if split.is_empty() {
            return Err(Error::Config(format!("{name} split is empty")));
        }
        if let Some(bad) = split.iter().find(|e| e.label().is_none_or(|l| l >= data.spec.num_classes)) {
            return Err(Error::Config(format!(
                "{name} split has label {:?} outside 0..{}",
                bad.label(),
                data.spec.num_classes
            )));
        }
    }
    Ok(data)
}

// ---------------------------------------------------------------------------
// stages

/// Outcome of one training stage, stored next to its checkpoint so a rerun
/// can reuse the stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: String,
    pub fingerprint: String,
    pub steps_run: u64,
    pub best_step: u64,
    pub best_valid_error: Option<f64>,
    pub valid_curve: Vec<(u64, f64)>,
    pub stopped_early: bool,
    pub transfer: Option<Vec<(String, checkpoint::TensorOrigin)>>,
}

#[derive(Clone, Debug)]
pub struct StageResult {
    pub params: Params,
    pub summary: StageSummary,
    pub reused: bool,
    pub seconds: f64,
}

fn fingerprint(parts: &impl Serialize) -> String {
    let json = serde_json::to_vec(parts).expect("fingerprint input serializes");
    let digest = Sha256::digest(&json);
    digest.iter().take(12).fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn stage_paths(dir: &Path, stage: &str) -> (PathBuf, PathBuf, PathBuf) {
    (
        dir.join(format!("{stage}.sqpt")),
        dir.join(format!("{stage}.json")),
        dir.join(format!("{stage}.history.csv")),
    )
}

fn try_resume(dir: &Path, stage: &str, fp: &str) -> Option<(Params, StageSummary)> {
    let (ckpt, json, _) = stage_paths(dir, stage);
    let summary: StageSummary = serde_json::from_slice(&fs::read(json).ok()?).ok()?;
    if summary.fingerprint != fp {
        return None;
    }
    let ck = checkpoint::load(&ckpt).ok()?;
    (ck.meta.tag.as_deref() == Some(fp)).then_some((ck.params, summary))
}

fn write_stage(
    dir: &Path,
    cfg: &ExperimentConfig,
    data: &PreparedData,
    params: &Params,
    summary: &StageSummary,
    objective: &Objective,
    history: &[HistoryRow],
) -> Result<()> {
    let (ckpt, json, csv) = stage_paths(dir, &summary.stage);
    let meta = CheckpointMeta {
        spec: data.spec.clone(),
        vocab_hash: data.vocab.as_ref().map(Vocabulary::hash),
        step: summary.best_step,
        objective: objective.name().into(),
        seed: cfg.seed,
        dtype: cfg.checkpoint_dtype,
        tensors: 0,
        tag: Some(summary.fingerprint.clone()),
    };
    checkpoint::save(params, &meta, &ckpt)?;
    write_history_csv(history, &csv)?;
    let text = serde_json::to_vec_pretty(summary).expect("summary serializes");
    fs::write(&json, text).map_err(|e| Error::io(&json, e))
}

fn valid_curve(history: &[HistoryRow]) -> Vec<(u64, f64)> {
    history.iter().filter_map(|h| h.valid_error.map(|e| (h.step, e))).collect()
}

fn pretrain_objective(variant: Variant, spec: &ModelSpec) -> Option<Objective> {
    let real = spec.level == InputKind::Real;
    match variant {
        Variant::None => None,
        Variant::Lm if real => Some(Objective::Rows {
            objective: RowObjective::NextRowLm,
        }),
        Variant::Sa if real => Some(Objective::Rows {
            objective: RowObjective::RowAutoencoder,
        }),
        Variant::Lm => Some(Objective::Lm),
        Variant::Sa => Some(Objective::Sa),
    }
}

fn data_fingerprint(cfg: &ExperimentConfig, data: &PreparedData) -> String {
    fingerprint(&(
        &cfg.data,
        cfg.seed,
        &data.spec,
        data.vocab.as_ref().map(Vocabulary::hash),
        data.train.len(),
        data.pretrain.len(),
    ))
}

/// Trains (or reuses) the LM / SA model for `variant`, writing
/// `pretrain-<variant>.{sqpt,json,history.csv}` under `dir`.
pub fn pretrain_stage(cfg: &ExperimentConfig, data: &PreparedData, variant: Variant, dir: &Path) -> Result<StageResult> {
    let objective = pretrain_objective(variant, &data.spec)
        .ok_or_else(|| Error::Config("variant none has no pretraining stage".into()))?;
    let stage = format!("pretrain-{}", variant.name());
    let tc = cfg.seeded(&cfg.pretrain, 0x5052_4554 + variant as u64);
    let fp = fingerprint(&(&stage, data_fingerprint(cfg, data), &tc, &cfg.pretrain_dropout, cfg.checkpoint_dtype));
    let started = Instant::now();
    if let Some((params, summary)) = try_resume(dir, &stage, &fp) {
        log::info!("{stage}: reusing checkpoint");
        return Ok(StageResult {
            params,
            summary,
            reused: true,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    if data.pretrain.is_empty() {
        return Err(Error::Config("pretraining corpus is empty".into()));
    }
    let init = Params::init(&data.spec, objective.components(), &mut RngState::new(tc.seed))?;
    let lstm = tc.lstm();
    let mut eval = |p: &Params| unsupervised_error(p, &objective, &data.valid, &lstm);
    log::info!("{stage}: {} sequences, up to {} steps", data.pretrain.len(), tc.max_steps);
    let out = train_loop(init, &objective, &data.pretrain, &tc, &cfg.pretrain_dropout, Some(&mut eval))?;
    let summary = StageSummary {
        stage: stage.clone(),
        fingerprint: fp,
        steps_run: out.steps_run,
        best_step: out.best_step,
        best_valid_error: out.best_valid_error,
        valid_curve: valid_curve(&out.history),
        stopped_early: out.stopped_early,
        transfer: None,
    };
    write_stage(dir, cfg, data, &out.params, &summary, &objective, &out.history)?;
    Ok(StageResult {
        params: out.params,
        summary,
        reused: false,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Initializes the classifier (randomly, or from `pretrained`) and fine-tunes
/// it, writing `finetune-<variant>.{sqpt,json,history.csv}` under `dir`.
pub fn finetune_stage(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    variant: Variant,
    pretrained: Option<&StageResult>,
    dir: &Path,
) -> Result<StageResult> {
    let objective = cfg.fine_tune_objective();
    let stage = format!("finetune-{}", variant.name());
    let tc = cfg.seeded(&cfg.train, 0x4649_4e45);
    let init_seed = RngState::new(cfg.seed).substream(0x4845_4144).next_u64();
    let upstream = pretrained.map(|p| p.summary.fingerprint.clone());
    let fp = fingerprint(&(
        &stage,
        data_fingerprint(cfg, data),
        upstream,
        &tc,
        &data.dropout,
        &objective,
        cfg.checkpoint_dtype,
    ));
    let started = Instant::now();
    if let Some((params, summary)) = try_resume(dir, &stage, &fp) {
        log::info!("{stage}: reusing checkpoint");
        return Ok(StageResult {
            params,
            summary,
            reused: true,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    let (init, transfer) = match pretrained {
        Some(p) => {
            let ck = checkpoint::Checkpoint {
                params: p.params.clone(),
                meta: CheckpointMeta {
                    spec: data.spec.clone(),
                    vocab_hash: data.vocab.as_ref().map(Vocabulary::hash),
                    step: p.summary.best_step,
                    objective: p.summary.stage.clone(),
                    seed: cfg.seed,
                    dtype: cfg.checkpoint_dtype,
                    tensors: 0,
                    tag: None,
                },
            };
            let hash = data.vocab.as_ref().map(Vocabulary::hash);
            let (params, manifest) =
                checkpoint::transfer_init(&ck, &data.spec, objective.components(), hash.as_deref(), init_seed)?;
            (params, Some(manifest.entries))
        }
        None => (Params::init(&data.spec, objective.components(), &mut RngState::new(init_seed))?, None),
    };
    let lstm = tc.lstm();
    let mut eval = |p: &Params| evaluate(p, &data.valid, &lstm);
    log::info!("{stage}: {} documents, up to {} steps", data.train.len(), tc.max_steps);
    let out = train_loop(init, &objective, &data.train, &tc, &data.dropout, Some(&mut eval))?;
    let summary = StageSummary {
        stage: stage.clone(),
        fingerprint: fp,
        steps_run: out.steps_run,
        best_step: out.best_step,
        best_valid_error: out.best_valid_error,
        valid_curve: valid_curve(&out.history),
        stopped_early: out.stopped_early,
        transfer,
    };
    write_stage(dir, cfg, data, &out.params, &summary, &objective, &out.history)?;
    Ok(StageResult {
        params: out.params,
        summary,
        reused: false,
        seconds: started.elapsed().as_secs_f64(),
    })
}

// ---------------------------------------------------------------------------
// reports

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariantMetrics {
    pub variant: Variant,
    pub mode: Mode,
    pub test_error: f64,
    pub best_valid_error: Option<f64>,
    pub valid_curve: Vec<(u64, f64)>,
    pub pretrain_steps: u64,
    pub train_steps: u64,
    pub best_step: u64,
    /// Seconds spent on this variant's stages in this process (0 when reused).
    pub wall_clock_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub preset: String,
    pub hidden: usize,
    pub variants: Vec<VariantMetrics>,
    pub bow_test_error: Option<f64>,
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "".to_string(), |v| format!("{v:.6}"))
}

impl MetricsReport {
    pub fn variant(&self, v: Variant) -> Option<&VariantMetrics> {
        self.variants.iter().find(|m| m.variant == v)
    }

    /// CSV with one row per variant. Contains no timing, so reruns are byte-identical.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let header = [
            "system", "variant", "mode", "seed", "hidden", "test_error", "best_valid_error", "best_step", "train_steps",
            "pretrain_steps",
        ];
        let err = |e: csv::Error| Error::Format(format!("report csv: {e}"));
        w.write_record(header).map_err(err)?;
        for m in &self.variants {
            w.write_record([
                m.variant.system().to_string(),
                m.variant.name().to_string(),
                mode_name(m.mode).to_string(),
                self.seed.to_string(),
                self.hidden.to_string(),
                format!("{:.6}", m.test_error),
                fmt_opt(m.best_valid_error),
                m.best_step.to_string(),
                m.train_steps.to_string(),
                m.pretrain_steps.to_string(),
            ])
            .map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(format!("report csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    /// Aligned table in the layout of a results table: one row per system.
    pub fn to_table(&self) -> String {
        let mut rows = vec![[
            "Model".to_string(),
            "Test error".to_string(),
            "Valid error".to_string(),
            "Steps".to_string(),
            "Seconds".to_string(),
        ]];
        for m in &self.variants {
            rows.push([
                m.variant.system().to_string(),
                format!("{:.2}%", 100.0 * m.test_error),
                m.best_valid_error.map_or("-".into(), |v| format!("{:.2}%", 100.0 * v)),
                format!("{}+{}", m.pretrain_steps, m.train_steps),
                format!("{:.1}", m.wall_clock_secs),
            ]);
        }
        if let Some(b) = self.bow_test_error {
            rows.push([
                "Bag of words".to_string(),
                format!("{:.2}%", 100.0 * b),
                "-".into(),
                "-".into(),
                "-".into(),
            ]);
        }
        let widths: Vec<usize> = (0..5).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
        let mut out = format!("preset {}  hidden {}  seed {}\n", self.preset, self.hidden, self.seed);
        for (i, r) in rows.iter().enumerate() {
            let line: Vec<String> = r
                .iter()
                .enumerate()
                .map(|(c, cell)| if c == 0 { format!("{cell:<w$}", w = widths[c]) } else { format!("{cell:>w$}", w = widths[c]) })
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
            if i == 0 {
                out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
                out.push('\n');
            }
        }
        out
    }
}

fn mode_name(m: Mode) -> &'static str {
    match m {
        Mode::Last => "last",
        Mode::LinearGain => "linear_gain",
        Mode::Joint => "joint",
    }
}

fn stage_err<'a>(stage: &str, dir: &'a Path) -> impl Fn(Error) -> Error + 'a {
    let stage = stage.to_string();
    move |e| Error::Stage {
        stage: stage.clone(),
        artifacts: dir.to_path_buf(),
        source: Box::new(e),
    }
}

/// The whole pipeline: data, then for each variant optional pretraining,
/// transfer and fine-tuning, then test evaluation. Writes `report.csv` and
/// `report.txt` in the output directory and returns the report.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    let dir = cfg.resolved_output_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let data = prepare_data(cfg).map_err(stage_err("data", &dir))?;
    if let Some(v) = &data.vocab {
        v.save(&dir.join("vocab.json")).map_err(stage_err("data", &dir))?;
    }
    let config_path = dir.join("config.toml");
    fs::write(&config_path, cfg.to_toml()).map_err(|e| Error::io(&config_path, e))?;

    let mut seen = Vec::new();
    let mut variants = Vec::new();
    for &variant in &cfg.variants {
        if seen.contains(&variant) {
            continue;
        }
        seen.push(variant);
        let pre = match variant {
            Variant::None => None,
            v => Some(pretrain_stage(cfg, &data, v, &dir).map_err(stage_err(&format!("pretrain-{}", v.name()), &dir))?),
        };
        let ft_name = format!("finetune-{}", variant.name());
        let ft = finetune_stage(cfg, &data, variant, pre.as_ref(), &dir).map_err(stage_err(&ft_name, &dir))?;
        let test_error = evaluate(&ft.params, &data.test, &cfg.train.lstm()).map_err(stage_err("evaluate", &dir))?;
        variants.push(VariantMetrics {
            variant,
            mode: cfg.mode,
            test_error,
            best_valid_error: ft.summary.best_valid_error,
            valid_curve: ft.summary.valid_curve.clone(),
            pretrain_steps: pre.as_ref().map_or(0, |p| p.summary.steps_run),
            train_steps: ft.summary.steps_run,
            best_step: ft.summary.best_step,
            wall_clock_secs: pre.as_ref().map_or(0.0, |p| p.seconds) + ft.seconds,
        });
    }
    let report = MetricsReport {
        seed: cfg.seed,
        preset: cfg.preset.clone(),
        hidden: data.spec.hidden,
        variants,
        bow_test_error: data.bow_test_error,
    };
    let csv_path = dir.join("report.csv");
    fs::write(&csv_path, report.to_csv()?).map_err(|e| Error::io(&csv_path, e))?;
    let txt_path = dir.join("report.txt");
    fs::write(&txt_path, report.to_table()).map_err(|e| Error::io(&txt_path, e))?;
    Ok(report)
}
