//! Training objectives on top of the LSTM stack: next-token language model,
//! sequence autoencoder (one parameter set for reading and reconstruction),
//! document classifier (last step or linear label gain), joint classifier +
//! autoencoder, and the real-valued row variants with a squared L2 loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lstmcore::{
    self, sequence_backward, sequence_forward, window_start, InputMasks, LstmConfig, LstmStack, SeqInput,
    INIT_SCALE,
};
use crate::numkernel::{argmax, axpy, softmax, softmax_xent, tanh, tanh_grad_from_output, Matrix, RngState};
use crate::textpipe::{LabeledDocument, RowSequence, EOS, PAD};
use crate::train::{embed_dim_dropout, head_dropout, word_dropout, DropoutConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputKind {
    Word,
    Char,
    Real,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub level: InputKind,
    /// Vocabulary size for word/char input, 0 for real-valued rows.
    pub vocab_size: usize,
    /// Row width for real-valued input, 0 otherwise.
    pub row_dim: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub hidden: usize,
    pub num_classes: usize,
    /// Width of the tanh layer in the classifier head; 0 = logits straight from `h`.
    pub head_hidden: usize,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("model spec: {m}")));
        if self.layers == 0 || self.hidden == 0 {
            return bad("layers and hidden must be positive");
        }
        match self.level {
            InputKind::Real if self.row_dim == 0 => return bad("row_dim must be positive for real input"),
            InputKind::Word | InputKind::Char if self.vocab_size <= EOS as usize || self.embed_dim == 0 => {
                return bad("vocab_size must exceed the specials and embed_dim must be positive")
            }
            _ => {}
        }
        if self.num_classes == 1 {
            return bad("classifiers need at least 2 classes");
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        match self.level {
            InputKind::Real => self.row_dim,
            _ => self.embed_dim,
        }
    }

    pub fn hidden_sizes(&self) -> Vec<usize> {
        vec![self.hidden; self.layers]
    }
}

/// Named architecture plus the dropout rates reported for it.
#[derive(Clone, Debug, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub spec: ModelSpec,
    pub dropout: DropoutConfig,
    pub mode: LabelMode,
}

pub const PRESET_NAMES: [&str; 5] = ["imdb", "rotten", "newsgroups", "dbpedia", "rows"];

impl Preset {
    pub fn by_name(name: &str) -> Result<Preset> {
        let word = |classes, head_hidden, embed_dim_drop, word_drop| ModelSpec {
            level: InputKind::Word,
            vocab_size: 0,
            row_dim: 0,
            embed_dim: 512,
            layers: 1,
            hidden: 1024,
            num_classes: classes,
            head_hidden,
        }
        .with_dropout(embed_dim_drop, word_drop, 0.5);
        let (spec, dropout, mode) = match name {
            "imdb" => word(2, 512, 0.8, 0.0),
            "rotten" => word(2, 30, 0.95, 0.5),
            "newsgroups" => word(20, 30, 0.7, 0.75),
            "dbpedia" => (
                ModelSpec {
                    level: InputKind::Char,
                    vocab_size: 0,
                    row_dim: 0,
                    embed_dim: 128,
                    layers: 2,
                    hidden: 512,
                    num_classes: 14,
                    head_hidden: 30,
                },
                DropoutConfig::default(),
                LabelMode::LinearGain,
            ),
            "rows" => (
                ModelSpec {
                    level: InputKind::Real,
                    vocab_size: 0,
                    row_dim: 96,
                    embed_dim: 0,
                    layers: 1,
                    hidden: 400,
                    num_classes: 10,
                    head_hidden: 30,
                },
                DropoutConfig::default(),
                LabelMode::Last,
            ),
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?}; expected one of {PRESET_NAMES:?}"
                )))
            }
        };
        let name = PRESET_NAMES.iter().find(|&&n| n == name).expect("matched above");
        Ok(Preset {
            name,
            spec,
            dropout,
            mode,
        })
    }

    /// Shrinks widths so the hidden layer is `hidden`, keeping the embedding
    /// and head ratios. Dropout rates are kept as they are.
    pub fn desk_scale(mut self, hidden: usize) -> Preset {
        let ratio = hidden as f64 / self.spec.hidden as f64;
        let shrink = |n: usize| if n == 0 { 0 } else { ((n as f64 * ratio).round() as usize).max(2) };
        if self.spec.level != InputKind::Real {
            self.spec.embed_dim = shrink(self.spec.embed_dim);
        }
        self.spec.head_hidden = self.spec.head_hidden.min(shrink(self.spec.head_hidden).max(16));
        self.spec.hidden = hidden;
        self
    }
}

impl ModelSpec {
    fn with_dropout(self, embed_dim_drop: f64, word_drop: f64, head_drop: f64) -> (ModelSpec, DropoutConfig, LabelMode) {
        (
            self,
            DropoutConfig {
                embed_dim_drop,
                word_drop,
                head_drop,
            },
            LabelMode::Last,
        )
    }
}

/// Affine map `y = x * w + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub w: Matrix,
    pub b: Matrix,
}

impl Dense {
    pub fn init(input: usize, output: usize, rng: &mut RngState) -> Self {
        Dense {
            w: Matrix::uniform(input, output, INIT_SCALE, rng),
            b: Matrix::zeros(1, output),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Dense {
            w: Matrix::zeros(input, output),
            b: Matrix::zeros(1, output),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.b.data().to_vec();
        self.w.vec_mul_acc(x, &mut y);
        y
    }

    /// Accumulates parameter gradients into `grad` and returns dL/dx.
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Dense) -> Vec<f64> {
        grad.w.outer_acc(x, dy);
        axpy(1.0, dy, grad.b.data_mut());
        let mut dx = vec![0.0; self.w.rows()];
        self.w.mul_vec_acc(dy, &mut dx);
        dx
    }

    fn zeros_like(&self) -> Self {
        Dense::zeros(self.w.rows(), self.w.cols())
    }
}

/// Maps the last hidden state (optionally through a tanh layer) to class logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub hidden: Option<Dense>,
    pub out: Dense,
}

impl ClassifierHead {
    pub fn init(input: usize, head_hidden: usize, classes: usize, rng: &mut RngState) -> Self {
        if head_hidden == 0 {
            ClassifierHead {
                hidden: None,
                out: Dense::init(input, classes, rng),
            }
        } else {
            ClassifierHead {
                hidden: Some(Dense::init(input, head_hidden, rng)),
                out: Dense::init(head_hidden, classes, rng),
            }
        }
    }

    fn zeros_like(&self) -> Self {
        ClassifierHead {
            hidden: self.hidden.as_ref().map(Dense::zeros_like),
            out: self.out.zeros_like(),
        }
    }

    fn hidden_act(&self, x: &[f64]) -> Option<Vec<f64>> {
        self.hidden
            .as_ref()
            .map(|d| d.forward(x).into_iter().map(tanh).collect())
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        match self.hidden_act(x) {
            Some(u) => self.out.forward(&u),
            None => self.out.forward(x),
        }
    }

    /// Loss and dL/dx for one labeled step with loss weight `weight`.
    fn loss_grad(&self, x: &[f64], label: usize, weight: f64, grad: Option<&mut ClassifierHead>) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let u = self.hidden_act(x);
        let logits = match &u {
            Some(u) => self.out.forward(u),
            None => self.out.forward(x),
        };
        let (loss, mut dlogits) = softmax_xent(&logits, label)?;
        let probs = softmax(&logits);
        let Some(grad) = grad else {
            return Ok((weight * loss, Vec::new(), probs));
        };
        dlogits.iter_mut().for_each(|g| *g *= weight);
        let dx = match (&self.hidden, u) {
            (Some(hid), Some(u)) => {
                let mut du = self.out.backward(&u, &dlogits, &mut grad.out);
                du.iter_mut().zip(&u).for_each(|(d, &a)| *d *= tanh_grad_from_output(a));
                hid.backward(x, &du, grad.hidden.as_mut().expect("gradient mirrors params"))
            }
            _ => self.out.backward(x, &dlogits, &mut grad.out),
        };
        Ok((weight * loss, dx, probs))
    }
}

/// Every trainable tensor of a model. Components an objective does not use are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub stack: LstmStack,
    /// `H -> |vocab|` next-token projection (LM / autoencoder).
    pub softmax: Option<Dense>,
    /// `H -> row_dim` projection for real-valued objectives.
    pub row_out: Option<Dense>,
    /// Learned decoder start row, `1 x row_dim`.
    pub go_row: Option<Matrix>,
    pub head: Option<ClassifierHead>,
}

/// Which optional components to allocate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Components {
    pub softmax: bool,
    pub rows: bool,
    pub head: bool,
}

impl Params {
    /// Parameters for `objective`; the embedding and LSTM are drawn first so
    /// that they are identical for every objective under the same seed.
    pub fn init(spec: &ModelSpec, components: Components, rng: &mut RngState) -> Result<Self> {
        spec.validate()?;
        let vocab = (spec.level != InputKind::Real).then_some(spec.vocab_size);
        let stack = LstmStack::init(vocab, spec.input_dim(), &spec.hidden_sizes(), rng);
        let mut params = Params {
            stack,
            softmax: None,
            row_out: None,
            go_row: None,
            head: None,
        };
        params.init_missing(spec, components, rng)?;
        Ok(params)
    }

    /// Allocates any requested component that is absent, drawing from `rng`.
    pub fn init_missing(&mut self, spec: &ModelSpec, c: Components, rng: &mut RngState) -> Result<()> {
        let h = spec.hidden;
        if c.softmax && self.softmax.is_none() {
            if spec.level == InputKind::Real {
                return Err(Error::Config("token objectives need word or char input".into()));
            }
            self.softmax = Some(Dense::init(h, spec.vocab_size, rng));
        }
        if c.rows && self.row_out.is_none() {
            if spec.level != InputKind::Real {
                return Err(Error::Config("row objectives need real-valued input".into()));
            }
            self.row_out = Some(Dense::init(h, spec.row_dim, rng));
            self.go_row = Some(Matrix::zeros(1, spec.row_dim));
        }
        if c.head && self.head.is_none() {
            if spec.num_classes < 2 {
                return Err(Error::Config("classifier needs num_classes >= 2".into()));
            }
            self.head = Some(ClassifierHead::init(h, spec.head_hidden, spec.num_classes, rng));
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        Params {
            stack: self.stack.zeros_like(),
            softmax: self.softmax.as_ref().map(Dense::zeros_like),
            row_out: self.row_out.as_ref().map(Dense::zeros_like),
            go_row: self.go_row.as_ref().map(|g| Matrix::zeros(g.rows(), g.cols())),
            head: self.head.as_ref().map(ClassifierHead::zeros_like),
        }
    }

    /// Named tensors in a fixed order (the checkpoint order).
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = self.stack.tensors();
        if let Some(d) = &self.softmax {
            out.push(("softmax.w".into(), &d.w));
            out.push(("softmax.b".into(), &d.b));
        }
        if let Some(d) = &self.row_out {
            out.push(("rows.w".into(), &d.w));
            out.push(("rows.b".into(), &d.b));
        }
        if let Some(g) = &self.go_row {
            out.push(("rows.go".into(), g));
        }
        if let Some(h) = &self.head {
            if let Some(d) = &h.hidden {
                out.push(("head.hidden.w".into(), &d.w));
                out.push(("head.hidden.b".into(), &d.b));
            }
            out.push(("head.out.w".into(), &h.out.w));
            out.push(("head.out.b".into(), &h.out.b));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = self.stack.tensors_mut();
        if let Some(d) = &mut self.softmax {
            out.push(("softmax.w".into(), &mut d.w));
            out.push(("softmax.b".into(), &mut d.b));
        }
        if let Some(d) = &mut self.row_out {
            out.push(("rows.w".into(), &mut d.w));
            out.push(("rows.b".into(), &mut d.b));
        }
        if let Some(g) = &mut self.go_row {
            out.push(("rows.go".into(), g));
        }
        if let Some(h) = &mut self.head {
            if let Some(d) = &mut h.hidden {
                out.push(("head.hidden.w".into(), &mut d.w));
                out.push(("head.hidden.b".into(), &mut d.b));
            }
            out.push(("head.out.w".into(), &mut h.out.w));
            out.push(("head.out.b".into(), &mut h.out.b));
        }
        out
    }

    /// `self += alpha * other` over matching tensors.
    pub fn add_scaled(&mut self, alpha: f64, other: &Params) -> Result<()> {
        let src = other.tensors();
        let mut dst = self.tensors_mut();
        if src.len() != dst.len() {
            return Err(Error::Contract("parameter sets have different components".into()));
        }
        for ((_, d), (_, s)) in dst.iter_mut().zip(src) {
            d.add_scaled(alpha, s)?;
        }
        Ok(())
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }
}

/// Where the label loss is placed along a classified sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Final step only.
    Last,
    /// Every step, weight `t / (T - 1)`.
    LinearGain,
}

/// Per-step label weights for a sequence of `len` steps.
pub fn label_weights(len: usize, mode: LabelMode) -> Vec<f64> {
    match (mode, len) {
        (_, 0) => Vec::new(),
        (_, 1) => vec![1.0],
        (LabelMode::Last, n) => {
            let mut w = vec![0.0; n];
            w[n - 1] = 1.0;
            w
        }
        (LabelMode::LinearGain, n) => (0..n).map(|t| t as f64 / (n - 1) as f64).collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Tokens(Vec<u32>),
    Rows(Matrix),
    Label(usize),
}

/// One unrolled training sequence: inputs, targets and per-step loss weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub input: SeqInput,
    pub targets: Targets,
    pub weights: Vec<f64>,
    /// Timestep whose input row is the learned GO row.
    pub go_step: Option<usize>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.input.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input.is_empty()
    }

    /// Number of non-PAD steps.
    pub fn length(&self) -> usize {
        match &self.input {
            SeqInput::Tokens(ids) => ids.iter().filter(|&&i| i != PAD).count(),
            SeqInput::Rows(r) => r.rows(),
        }
    }
}

/// A list of sequences; [`SequenceBatch::padded`] gives equal-length token sequences.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct SequenceBatch {
    pub sequences: Vec<Sequence>,
}

impl SequenceBatch {
    pub fn lengths(&self) -> Vec<usize> {
        self.sequences.iter().map(Sequence::length).collect()
    }

    /// Right-pads token sequences with PAD (target PAD, weight 0).
    pub fn padded(&self) -> SequenceBatch {
        let max = self.sequences.iter().map(Sequence::len).max().unwrap_or(0);
        let sequences = self
            .sequences
            .iter()
            .map(|s| match (&s.input, &s.targets) {
                (SeqInput::Tokens(ids), targets) => {
                    let extra = max - ids.len();
                    let mut ids = ids.clone();
                    ids.extend(std::iter::repeat(PAD).take(extra));
                    let targets = match targets {
                        Targets::Tokens(t) => {
                            let mut t = t.clone();
                            t.extend(std::iter::repeat(PAD).take(extra));
                            Targets::Tokens(t)
                        }
                        other => other.clone(),
                    };
                    let mut weights = s.weights.clone();
                    weights.extend(std::iter::repeat(0.0).take(extra));
                    Sequence {
                        input: SeqInput::Tokens(ids),
                        targets,
                        weights,
                        go_step: s.go_step,
                    }
                }
                _ => s.clone(),
            })
            .collect();
        SequenceBatch { sequences }
    }
}

/// Next-token unrolling: inputs `doc[..T-1]`, targets `doc[1..]`.
/// Returns `None` (with a warning) for documents shorter than 2.
pub fn lm_unroll(doc: &[u32]) -> Option<Sequence> {
    if doc.len() < 2 {
        log::warn!("skipping document of length {} for language modelling", doc.len());
        return None;
    }
    let n = doc.len() - 1;
    Some(Sequence {
        input: SeqInput::Tokens(doc[..n].to_vec()),
        targets: Targets::Tokens(doc[1..].to_vec()),
        weights: vec![1.0; n],
        go_step: None,
    })
}

/// Autoencoder unrolling of `doc = [w1..w_{T-1}, EOS]`: read the whole
/// document including EOS, then reproduce it with teacher forcing.
/// Inputs `[w1..w_{T-1}, EOS, w1..w_{T-1}]`; targets (weight 1) on the last
/// `T` steps are `[w1..w_{T-1}, EOS]`.
pub fn sa_unroll(doc: &[u32]) -> Option<Sequence> {
    if doc.len() < 2 {
        log::warn!("skipping document of length {} for autoencoding", doc.len());
        return None;
    }
    let t = doc.len();
    let mut input = doc.to_vec();
    input.extend_from_slice(&doc[..t - 1]);
    let mut targets = vec![PAD; t - 1];
    targets.extend_from_slice(doc);
    let mut weights = vec![0.0; t - 1];
    weights.extend(std::iter::repeat(1.0).take(t));
    Some(Sequence {
        input: SeqInput::Tokens(input),
        targets: Targets::Tokens(targets),
        weights,
        go_step: None,
    })
}

/// Classification sequence over the document itself.
pub fn classify_unroll(input: SeqInput, label: usize, mode: LabelMode) -> Sequence {
    let n = input.len();
    let real = match &input {
        SeqInput::Tokens(ids) => ids.iter().filter(|&&i| i != PAD).count(),
        SeqInput::Rows(_) => n,
    };
    let mut weights = label_weights(real, mode);
    weights.resize(n, 0.0);
    Sequence {
        input,
        targets: Targets::Label(label),
        weights,
        go_step: None,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowObjective {
    NextRowLm,
    RowAutoencoder,
}

/// Real-valued unrolling. Next-row: inputs `rows[..T-1]`, targets `rows[1..]`.
/// Autoencoder: inputs `[r1..rT, GO, r1..r_{T-1}]`, targets `[r1..rT]` on the
/// last `T` steps; the GO input row is filled from the parameters at run time.
pub fn row_unroll(rows: &Matrix, kind: RowObjective) -> Option<Sequence> {
    let (t, d) = rows.shape();
    match kind {
        RowObjective::NextRowLm => {
            if t < 2 {
                log::warn!("skipping row sequence of length {t}");
                return None;
            }
            let input = Matrix::from_vec(t - 1, d, rows.data()[..(t - 1) * d].to_vec()).ok()?;
            let targets = Matrix::from_vec(t - 1, d, rows.data()[d..].to_vec()).ok()?;
            Some(Sequence {
                input: SeqInput::Rows(input),
                targets: Targets::Rows(targets),
                weights: vec![1.0; t - 1],
                go_step: None,
            })
        }
        RowObjective::RowAutoencoder => {
            if t < 1 {
                return None;
            }
            let mut input = rows.data().to_vec();
            input.extend(std::iter::repeat(0.0).take(d));
            input.extend_from_slice(&rows.data()[..(t - 1) * d]);
            let mut targets = vec![0.0; t * d];
            targets.extend_from_slice(rows.data());
            let mut weights = vec![0.0; t];
            weights.extend(std::iter::repeat(1.0).take(t));
            Some(Sequence {
                input: SeqInput::Rows(Matrix::from_vec(2 * t, d, input).ok()?),
                targets: Targets::Rows(Matrix::from_vec(2 * t, d, targets).ok()?),
                weights,
                go_step: Some(t),
            })
        }
    }
}

/// What the trainer feeds into an objective.
#[derive(Clone, Debug, PartialEq)]
pub enum Example {
    Tokens { ids: Vec<u32>, label: Option<usize> },
    Rows { rows: Matrix, label: Option<usize> },
}

impl Example {
    pub fn label(&self) -> Option<usize> {
        match self {
            Example::Tokens { label, .. } | Example::Rows { label, .. } => *label,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Example::Tokens { ids, .. } => ids.len(),
            Example::Rows { rows, .. } => rows.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn as_input(&self) -> SeqInput {
        match self {
            Example::Tokens { ids, .. } => SeqInput::Tokens(ids.clone()),
            Example::Rows { rows, .. } => SeqInput::Rows(rows.clone()),
        }
    }
}

impl From<&LabeledDocument> for Example {
    fn from(d: &LabeledDocument) -> Self {
        Example::Tokens {
            ids: d.tokens.clone(),
            label: d.label,
        }
    }
}

impl From<&RowSequence> for Example {
    fn from(r: &RowSequence) -> Self {
        Example::Rows {
            rows: r.rows.clone(),
            label: r.label,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Objective {
    Lm,
    Sa,
    Classify { mode: LabelMode },
    Joint { lambda: f64 },
    Rows { objective: RowObjective },
}

impl Objective {
    pub fn components(&self) -> Components {
        match self {
            Objective::Lm | Objective::Sa => Components { softmax: true, ..Default::default() },
            Objective::Classify { .. } => Components { head: true, ..Default::default() },
            Objective::Joint { .. } => Components { softmax: true, head: true, rows: false },
            Objective::Rows { .. } => Components { rows: true, ..Default::default() },
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Objective::Lm => "lm",
            Objective::Sa => "sa",
            Objective::Classify { mode: LabelMode::Last } => "classify",
            Objective::Classify { mode: LabelMode::LinearGain } => "classify_linear_gain",
            Objective::Joint { .. } => "joint",
            Objective::Rows { objective: RowObjective::NextRowLm } => "next_row_lm",
            Objective::Rows { objective: RowObjective::RowAutoencoder } => "row_autoencoder",
        }
    }

    pub fn is_supervised(&self) -> bool {
        matches!(self, Objective::Classify { .. } | Objective::Joint { .. })
    }
}

/// Dropout for one evaluation: rates plus the stream the masks are drawn from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropoutDraw {
    pub config: DropoutConfig,
    pub rng: RngState,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunOptions {
    pub lstm: LstmConfig,
    pub truncate_k: usize,
    pub dropout: Option<DropoutDraw>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            lstm: LstmConfig::default(),
            truncate_k: usize::MAX,
            dropout: None,
        }
    }
}

/// Result of evaluating an objective on one example.
#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    /// Weighted loss summed over steps (the quantity that is differentiated).
    pub loss: f64,
    /// Divisor used to report a per-token / per-document average.
    pub normalizer: f64,
    /// Correct greedy predictions over weighted steps (classification: the final step).
    pub correct: usize,
    pub counted: usize,
    /// Class probabilities at the final step (classifiers only).
    pub probs: Option<Vec<f64>>,
}

fn input_masks(seq: &Sequence, width: usize, dropout: Option<&DropoutDraw>) -> InputMasks {
    let Some(d) = dropout else {
        return InputMasks::default();
    };
    let words = (d.config.word_drop > 0.0).then(|| {
        let mut rng = d.rng.substream(1);
        match &seq.input {
            SeqInput::Tokens(ids) => word_dropout(ids, d.config.word_drop, &mut rng),
            SeqInput::Rows(r) => {
                let mut m: Vec<f64> = (0..r.rows()).map(|_| {
                    if rng.next_f64() < d.config.word_drop { 0.0 } else { 1.0 / (1.0 - d.config.word_drop) }
                }).collect();
                if let Some(g) = seq.go_step {
                    m[g] = 1.0;
                }
                m
            }
        }
    });
    let dims = (d.config.embed_dim_drop > 0.0)
        .then(|| embed_dim_dropout(width, d.config.embed_dim_drop, &mut d.rng.substream(2)));
    InputMasks { dims, words }
}

/// Loss (and, when `grads` is given, accumulated gradients) of `objective` on `example`.
/// Returns `None` when the example is too short for the objective.
pub fn objective_loss(
    params: &Params,
    objective: &Objective,
    example: &Example,
    opts: &RunOptions,
    grads: Option<&mut Params>,
) -> Result<Option<LossOutput>> {
    match *objective {
        Objective::Lm | Objective::Sa => {
            let Example::Tokens { ids, .. } = example else {
                return Err(Error::Contract("token objectives need token input".into()));
            };
            let seq = if *objective == Objective::Lm { lm_unroll(ids) } else { sa_unroll(ids) };
            seq.map(|s| sequence_loss(params, &s, opts, grads)).transpose()
        }
        Objective::Classify { mode } => {
            let label = example
                .label()
                .ok_or_else(|| Error::Contract("classification needs a label".into()))?;
            let seq = classify_unroll(example.as_input(), label, mode);
            sequence_loss(params, &seq, opts, grads).map(Some)
        }
        Objective::Joint { lambda } => joint_loss(params, example, lambda, opts, grads).map(Some),
        Objective::Rows { objective } => {
            let Example::Rows { rows, .. } = example else {
                return Err(Error::Contract("row objectives need real-valued input".into()));
            };
            row_unroll(rows, objective)
                .map(|s| sequence_loss(params, &s, opts, grads))
                .transpose()
        }
    }
}

/// Classification loss (last step) plus `lambda` times the autoencoder loss
/// on the same document; gradients of both terms land in the same buffers.
pub fn joint_loss(
    params: &Params,
    example: &Example,
    lambda: f64,
    opts: &RunOptions,
    mut grads: Option<&mut Params>,
) -> Result<LossOutput> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("joint lambda must be non-negative, got {lambda}")));
    }
    let Example::Tokens { ids, label } = example else {
        return Err(Error::Contract("joint training needs token input".into()));
    };
    let label = label.ok_or_else(|| Error::Contract("joint training needs a label".into()))?;
    let cls = classify_unroll(SeqInput::Tokens(ids.clone()), label, LabelMode::Last);
    let mut out = sequence_loss(params, &cls, opts, grads.as_deref_mut())?;
    if lambda > 0.0 {
        if let Some(sa) = sa_unroll(ids) {
            // reconstruction gradients are scaled by lambda after the fact
            let mut sa_grads = grads.as_ref().map(|g| g.zeros_like());
            let sa_opts = RunOptions {
                dropout: opts.dropout.map(|d| DropoutDraw { rng: d.rng.substream(7), ..d }),
                ..*opts
            };
            let rec = sequence_loss(params, &sa, &sa_opts, sa_grads.as_mut())?;
            out.loss += lambda * rec.loss;
            if let (Some(g), Some(sg)) = (grads, sa_grads) {
                g.add_scaled(lambda, &sg)?;
            }
        }
    }
    Ok(out)
}

/// Forward + (optional) backward for one unrolled sequence.
pub fn sequence_loss(params: &Params, seq: &Sequence, opts: &RunOptions, grads: Option<&mut Params>) -> Result<LossOutput> {
    let t_len = seq.len();
    if seq.weights.len() != t_len {
        return Err(Error::Contract("weights must have one entry per step".into()));
    }
    let mut input = seq.input.clone();
    if let (Some(g), SeqInput::Rows(rows)) = (seq.go_step, &mut input) {
        let go = params
            .go_row
            .as_ref()
            .ok_or_else(|| Error::Contract("autoencoding rows needs a GO row".into()))?;
        rows.row_mut(g).copy_from_slice(go.data());
    }
    let width = params.stack.input_dim();
    let masks = input_masks(seq, width, opts.dropout.as_ref());
    let tape = sequence_forward(&params.stack, &input, &masks, &opts.lstm, None)?;
    let start = window_start(t_len, opts.truncate_k);
    let hidden = params.stack.top_hidden();
    let mut out_grads = vec![Vec::new(); t_len];
    let mut out = LossOutput {
        loss: 0.0,
        normalizer: 0.0,
        correct: 0,
        counted: 0,
        probs: None,
    };
    let mut grads = grads;

    match &seq.targets {
        Targets::Tokens(targets) => {
            let sm = params
                .softmax
                .as_ref()
                .ok_or_else(|| Error::Contract("token prediction needs a softmax layer".into()))?;
            for t in 0..t_len {
                let w = seq.weights[t];
                if w == 0.0 {
                    continue;
                }
                let h = &tape.outputs[t];
                let logits = sm.forward(h);
                let (l, mut dl) = softmax_xent(&logits, targets[t] as usize)?;
                out.loss += w * l;
                out.normalizer += w;
                out.counted += 1;
                out.correct += usize::from(argmax(&logits) == targets[t] as usize);
                if let Some(g) = grads.as_deref_mut().filter(|_| t >= start) {
                    dl.iter_mut().for_each(|v| *v *= w);
                    out_grads[t] = sm.backward(h, &dl, g.softmax.as_mut().expect("gradient mirrors params"));
                }
            }
        }
        Targets::Rows(targets) => {
            let ro = params
                .row_out
                .as_ref()
                .ok_or_else(|| Error::Contract("row prediction needs an output layer".into()))?;
            if targets.rows() != t_len || targets.cols() != ro.w.cols() {
                return Err(Error::Shape {
                    op: "row targets",
                    left: targets.shape(),
                    right: (t_len, ro.w.cols()),
                });
            }
            for t in 0..t_len {
                let w = seq.weights[t];
                if w == 0.0 {
                    continue;
                }
                let h = &tape.outputs[t];
                let pred = ro.forward(h);
                let diff: Vec<f64> = pred.iter().zip(targets.row(t)).map(|(p, y)| p - y).collect();
                out.loss += w * diff.iter().map(|d| d * d).sum::<f64>();
                out.normalizer += w;
                out.counted += 1;
                if let Some(g) = grads.as_deref_mut().filter(|_| t >= start) {
                    let dpred: Vec<f64> = diff.iter().map(|d| 2.0 * w * d).collect();
                    out_grads[t] = ro.backward(h, &dpred, g.row_out.as_mut().expect("gradient mirrors params"));
                }
            }
        }
        &Targets::Label(label) => {
            let head = params
                .head
                .as_ref()
                .ok_or_else(|| Error::Contract("classification needs a classifier head".into()))?;
            let last = (0..t_len).rev().find(|&t| seq.weights[t] > 0.0).unwrap_or(t_len - 1);
            let head_rng = opts
                .dropout
                .filter(|d| d.config.head_drop > 0.0)
                .map(|d| (d.config.head_drop, d.rng.substream(3)));
            for t in 0..t_len {
                let w = seq.weights[t];
                if w == 0.0 && t != last {
                    continue;
                }
                let mut x = tape.outputs[t].clone();
                let mask = head_rng.map(|(p, rng)| head_dropout(hidden, p, &mut rng.substream(t as u64)));
                if let Some(m) = &mask {
                    x.iter_mut().zip(m).for_each(|(v, k)| *v *= k);
                }
                let g = grads.as_deref_mut().filter(|_| t >= start && w > 0.0);
                let (l, mut dx, probs) = head.loss_grad(&x, label, w, g.map(|g| g.head.as_mut().expect("gradient mirrors params")))?;
                out.loss += l;
                if t == last {
                    out.normalizer = 1.0;
                    out.counted = 1;
                    out.correct = usize::from(argmax(&probs) == label);
                    out.probs = Some(probs);
                }
                if !dx.is_empty() {
                    if let Some(m) = &mask {
                        dx.iter_mut().zip(m).for_each(|(v, k)| *v *= k);
                    }
                    out_grads[t] = dx;
                }
            }
        }
    }

    if !out.loss.is_finite() {
        return Err(Error::Numeric("sequence loss".into()));
    }
    if let Some(g) = grads {
        let ig = sequence_backward(&tape, &params.stack, &out_grads, opts.truncate_k, &opts.lstm, &mut g.stack)?;
        if let Some(step) = seq.go_step.filter(|&s| s >= ig.window_start) {
            let go = g.go_row.as_mut().expect("gradient mirrors params");
            axpy(1.0, &ig.inputs[step], go.data_mut());
        }
    }
    Ok(out)
}

/// Hidden-state trajectory (top layer) of the encoder on `input`, no dropout.
pub fn encode_trajectory(params: &Params, input: &SeqInput, lstm: &LstmConfig) -> Result<Vec<Vec<f64>>> {
    Ok(sequence_forward(&params.stack, input, &InputMasks::default(), lstm, None)?.outputs)
}

/// Greedy class prediction from the final step, no dropout.
pub fn predict_class(params: &Params, example: &Example, lstm: &LstmConfig) -> Result<usize> {
    let head = params
        .head
        .as_ref()
        .ok_or_else(|| Error::Contract("prediction needs a classifier head".into()))?;
    let tape = sequence_forward(&params.stack, &example.as_input(), &InputMasks::default(), lstm, None)?;
    Ok(argmax(&head.logits(tape.final_state.h.last().expect("non-empty stack"))))
}

/// Reads `doc` (which ends in EOS) and then decodes greedily, feeding back
/// each prediction, for `doc.len()` steps.
pub fn sa_reconstruct(params: &Params, doc: &[u32], lstm: &LstmConfig) -> Result<Vec<u32>> {
    let sm = params
        .softmax
        .as_ref()
        .ok_or_else(|| Error::Contract("reconstruction needs a softmax layer".into()))?;
    let none = InputMasks::default();
    let tape = sequence_forward(&params.stack, &SeqInput::Tokens(doc.to_vec()), &none, lstm, None)?;
    let mut state = tape.final_state;
    let mut prev = argmax(&sm.forward(tape.outputs.last().expect("non-empty"))) as u32;
    let mut out = vec![prev];
    while out.len() < doc.len() {
        let step = sequence_forward(&params.stack, &SeqInput::Tokens(vec![prev]), &none, lstm, Some(&state))?;
        prev = argmax(&sm.forward(&step.outputs[0])) as u32;
        state = step.final_state;
        out.push(prev);
    }
    Ok(out)
}

pub use lstmcore::ClipTarget;
