//! Dropout masks, SGD, the mini-batch training loop with truncated BPTT and
//! early stopping, and the finite-difference gradient checker.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lstmcore::{clip_gradients, ClipTarget, LstmConfig, DEFAULT_CELL_CLIP, DEFAULT_GRAD_MAX_NORM};
use crate::models::{objective_loss, DropoutDraw, Example, Objective, Params, RunOptions};
use crate::numkernel::RngState;
use crate::textpipe::{is_special, PAD};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct DropoutConfig {
    /// Fraction of embedding dimensions zeroed, one mask per sequence.
    pub embed_dim_drop: f64,
    /// Fraction of token positions whose whole input vector is zeroed.
    pub word_drop: f64,
    /// Dropout between the last hidden state and the classifier.
    pub head_drop: f64,
}

impl DropoutConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("embed_dim_drop", self.embed_dim_drop),
            ("word_drop", self.word_drop),
            ("head_drop", self.head_drop),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {p}")));
            }
        }
        Ok(())
    }

    pub fn is_off(&self) -> bool {
        self.embed_dim_drop == 0.0 && self.word_drop == 0.0 && self.head_drop == 0.0
    }
}

fn keep_factor(p: f64, rng: &mut RngState) -> f64 {
    if rng.next_f64() < p {
        0.0
    } else {
        1.0 / (1.0 - p)
    }
}

/// Per-position input factors for word dropout. Special tokens (PAD, UNK,
/// EOS) always keep factor 1; other positions are zeroed with probability
/// `p` and otherwise scaled by `1 / (1 - p)`. One draw is consumed per
/// position, special or not.
pub fn word_dropout(ids: &[u32], p: f64, rng: &mut RngState) -> Vec<f64> {
    ids.iter()
        .map(|&id| {
            let f = keep_factor(p, rng);
            if is_special(id) {
                1.0
            } else {
                f
            }
        })
        .collect()
}

/// One factor per embedding dimension, shared by every timestep of a sequence.
pub fn embed_dim_dropout(dim: usize, p: f64, rng: &mut RngState) -> Vec<f64> {
    (0..dim).map(|_| keep_factor(p, rng)).collect()
}

/// Mask on the classifier input.
pub fn head_dropout(dim: usize, p: f64, rng: &mut RngState) -> Vec<f64> {
    (0..dim).map(|_| keep_factor(p, rng)).collect()
}

/// `theta -= lr * g`, then re-zero the PAD embedding row.
pub fn sgd_step(params: &mut Params, grads: &Params, lr: f64) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    params.add_scaled(-lr, grads)?;
    if let Some(e) = params.stack.embedding.as_mut() {
        e.row_mut(PAD as usize).fill(0.0);
    }
    for (name, t) in params.tensors() {
        if !t.is_finite() {
            return Err(Error::Numeric(format!("parameter {name} after SGD update")));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrSchedule {
    Constant,
    /// Multiply by `factor` every `every` steps.
    StepDecay { every: u64, factor: f64 },
    /// Multiply by `factor` whenever a validation check does not improve.
    Plateau { factor: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub schedule: LrSchedule,
    pub batch_size: usize,
    pub max_steps: u64,
    pub truncate_k: usize,
    pub cell_clip: f64,
    pub clip_target: ClipTarget,
    pub grad_max_norm: f64,
    pub seed: u64,
    /// Steps between validation checks (0 = never).
    pub eval_every: u64,
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.1,
            schedule: LrSchedule::Plateau { factor: 0.5 },
            batch_size: 128,
            max_steps: 500_000,
            truncate_k: 400,
            cell_clip: DEFAULT_CELL_CLIP,
            clip_target: ClipTarget::Cell,
            grad_max_norm: DEFAULT_GRAD_MAX_NORM,
            seed: 0,
            eval_every: 1000,
            patience: 3,
            min_delta: 1e-4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.truncate_k == 0 {
            return bad("truncate_k must be at least 1".into());
        }
        if !(self.cell_clip > 0.0) || !(self.grad_max_norm > 0.0) {
            return bad("cell_clip and grad_max_norm must be positive".into());
        }
        match self.schedule {
            LrSchedule::StepDecay { every: 0, .. } => bad("step decay interval must be positive".into()),
            LrSchedule::StepDecay { factor, .. } | LrSchedule::Plateau { factor } if !(factor > 0.0 && factor <= 1.0) => {
                bad(format!("decay factor must be in (0, 1], got {factor}"))
            }
            _ => Ok(()),
        }
    }

    pub fn lstm(&self) -> LstmConfig {
        LstmConfig {
            cell_clip: self.cell_clip,
            clip_target: self.clip_target,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum StopDecision {
    Continue,
    Stop { best_tag: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopState {
    pub best_error: f64,
    pub best_tag: Option<String>,
    pub since_improvement: usize,
    pub patience: usize,
    pub min_delta: f64,
}

impl EarlyStopState {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        EarlyStopState {
            best_error: f64::INFINITY,
            best_tag: None,
            since_improvement: 0,
            patience,
            min_delta,
        }
    }

    /// Whether `error` would count as an improvement.
    pub fn improves(&self, error: f64) -> bool {
        error <= self.best_error - self.min_delta
    }

    /// Records a validation error for checkpoint `tag`. An improvement is a
    /// decrease of at least `min_delta`; training stops once more than
    /// `patience` consecutive checks fail to improve. Errors are non-negative,
    /// so once the best error is below `min_delta` nothing can improve on it
    /// and the stop is immediate.
    pub fn update(&mut self, error: f64, tag: &str) -> StopDecision {
        if self.improves(error) {
            self.best_error = error;
            self.best_tag = Some(tag.to_string());
            self.since_improvement = 0;
        } else {
            self.since_improvement += 1;
        }
        if self.since_improvement > self.patience || self.best_error < self.min_delta {
            StopDecision::Stop {
                best_tag: self.best_tag.clone().unwrap_or_default(),
            }
        } else {
            StopDecision::Continue
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: u64,
    pub train_loss: f64,
    pub valid_error: Option<f64>,
    pub lr: f64,
    pub grad_norm: f64,
    pub applied_clip_scale: f64,
}

pub fn write_history_csv(history: &[HistoryRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for row in history {
        w.serialize(row).map_err(|e| csv_err(path, e))?;
    }
    if history.is_empty() {
        w.write_record(["step", "train_loss", "valid_error", "lr", "grad_norm", "applied_clip_scale"])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters at the best validation check (final parameters when no check ran).
    pub params: Params,
    pub history: Vec<HistoryRow>,
    pub best_step: u64,
    pub best_valid_error: Option<f64>,
    pub steps_run: u64,
    pub stopped_early: bool,
}

const BUCKET_BATCHES: usize = 8;

/// Batches for one pass over `lengths`: shuffle, sort windows of
/// `BUCKET_BATCHES` batches by length, cut into batches, shuffle batch order.
pub fn bucketed_batches(lengths: &[usize], batch_size: usize, rng: &mut RngState) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    rng.shuffle(&mut order);
    let mut batches = Vec::new();
    for window in order.chunks(batch_size * BUCKET_BATCHES) {
        let mut w = window.to_vec();
        w.sort_by_key(|&i| lengths[i]);
        batches.extend(w.chunks(batch_size).map(<[usize]>::to_vec));
    }
    rng.shuffle(&mut batches);
    batches
}

/// Loss and summed gradient over `examples`, normalized by the summed
/// normalizers. Dropout masks for example `j` come from `rng.substream(j)`.
pub fn batch_gradient(
    params: &Params,
    objective: &Objective,
    examples: &[&Example],
    opts: &RunOptions,
) -> Result<(f64, Params)> {
    let mut grads = params.zeros_like();
    let mut loss = 0.0;
    let mut norm = 0.0;
    for (j, ex) in examples.iter().enumerate() {
        let o = RunOptions {
            dropout: opts.dropout.map(|d| DropoutDraw {
                rng: d.rng.substream(j as u64),
                ..d
            }),
            ..*opts
        };
        if let Some(out) = objective_loss(params, objective, ex, &o, Some(&mut grads))? {
            loss += out.loss;
            norm += out.normalizer;
        }
    }
    if norm > 0.0 {
        for (_, g) in grads.tensors_mut() {
            g.scale(1.0 / norm);
        }
        loss /= norm;
    }
    Ok((loss, grads))
}

/// Mini-batch SGD on `objective`: forward, truncated backward, global-norm
/// clipping, update. `eval` (validation error in `[0, 1]`) runs every
/// `eval_every` steps and at the end; the best-scoring parameters are returned.
pub fn train_loop(
    mut params: Params,
    objective: &Objective,
    train: &[Example],
    config: &TrainConfig,
    dropout: &DropoutConfig,
    mut eval: Option<&mut dyn FnMut(&Params) -> Result<f64>>,
) -> Result<TrainOutcome> {
    config.validate()?;
    dropout.validate()?;
    let mut history = Vec::new();
    if config.max_steps == 0 {
        return Ok(TrainOutcome {
            params,
            history,
            best_step: 0,
            best_valid_error: None,
            steps_run: 0,
            stopped_early: false,
        });
    }
    if train.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    let root = RngState::new(config.seed);
    let mut shuffle_rng = root.substream(0x5348_5546);
    let dropout_root = root.substream(0x4452_4f50);
    let lengths: Vec<usize> = train.iter().map(Example::len).collect();
    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut lr = config.lr;
    let mut stopper = EarlyStopState::new(config.patience, config.min_delta);
    let mut best: Option<(Params, u64, f64)> = None;
    let mut stopped_early = false;
    let mut step = 0u64;

    while step < config.max_steps {
        if batches.is_empty() {
            batches = bucketed_batches(&lengths, config.batch_size, &mut shuffle_rng);
            batches.reverse();
        }
        let batch = batches.pop().expect("refilled above");
        step += 1;
        let examples: Vec<&Example> = batch.iter().map(|&i| &train[i]).collect();
        let opts = RunOptions {
            lstm: config.lstm(),
            truncate_k: config.truncate_k,
            dropout: (!dropout.is_off()).then(|| DropoutDraw {
                config: *dropout,
                rng: dropout_root.substream(step),
            }),
        };
        let diverged = |_| Error::Diverged {
            step,
            last_good: step - 1,
        };
        let (loss, mut grads) = batch_gradient(&params, objective, &examples, &opts).map_err(|e| match e {
            Error::Numeric(_) => diverged(()),
            other => other,
        })?;
        if !loss.is_finite() {
            return Err(diverged(()));
        }
        let clip = clip_gradients(grads.tensors_mut().into_iter().map(|(_, g)| g), config.grad_max_norm)
            .map_err(|_| diverged(()))?;
        sgd_step(&mut params, &grads, lr).map_err(|_| diverged(()))?;
        if let LrSchedule::StepDecay { every, factor } = config.schedule {
            if step % every == 0 {
                lr *= factor;
            }
        }

        let mut row = HistoryRow {
            step,
            train_loss: loss,
            valid_error: None,
            lr,
            grad_norm: clip.norm,
            applied_clip_scale: clip.scale,
        };
        let due = config.eval_every > 0 && step % config.eval_every == 0 || step == config.max_steps;
        if let (true, Some(eval)) = (due, eval.as_deref_mut()) {
            let err = eval(&params)?;
            row.valid_error = Some(err);
            let improved = stopper.improves(err);
            let decision = stopper.update(err, &format!("step-{step}"));
            if improved {
                best = Some((params.clone(), step, err));
            } else if let LrSchedule::Plateau { factor } = config.schedule {
                lr *= factor;
            }
            if let StopDecision::Stop { .. } = decision {
                stopped_early = true;
                history.push(row);
                break;
            }
        }
        history.push(row);
    }

    let (params, best_step, best_valid_error) = match best {
        Some((p, s, e)) => (p, s, Some(e)),
        None => (params, step, None),
    };
    Ok(TrainOutcome {
        params,
        history,
        best_step,
        best_valid_error,
        steps_run: step,
        stopped_early,
    })
}

/// Per-tensor result of a gradient check.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockReport {
    pub name: String,
    pub values: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub objective: String,
    pub blocks: Vec<BlockReport>,
    pub max_rel_error: f64,
    pub passed: bool,
}

pub const GRADCHECK_EPS: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-6;
/// Denominator floor for the relative error. A central difference at
/// `eps = 1e-5` on a loss of order 10 carries ~1e-10 of rounding noise, so
/// entries whose gradient is below ~1e-3 are judged against this floor.
pub const GRADCHECK_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADCHECK_FLOOR)
}

fn total_loss(params: &Params, objective: &Objective, examples: &[Example], opts: &RunOptions) -> Result<f64> {
    let mut loss = 0.0;
    for (j, ex) in examples.iter().enumerate() {
        let o = RunOptions {
            dropout: opts.dropout.map(|d| DropoutDraw { rng: d.rng.substream(j as u64), ..d }),
            ..*opts
        };
        if let Some(out) = objective_loss(params, objective, ex, &o, None)? {
            loss += out.loss;
        }
    }
    Ok(loss)
}

/// Compares every analytic gradient entry of the summed loss over
/// `examples` against a central difference with step [`GRADCHECK_EPS`].
/// Dropout, if any, is frozen by `opts.dropout`'s stream.
pub fn gradient_check(params: &Params, objective: &Objective, examples: &[Example], opts: &RunOptions) -> Result<GradCheckReport> {
    let mut analytic = params.zeros_like();
    for (j, ex) in examples.iter().enumerate() {
        let o = RunOptions {
            dropout: opts.dropout.map(|d| DropoutDraw { rng: d.rng.substream(j as u64), ..d }),
            ..*opts
        };
        objective_loss(params, objective, ex, &o, Some(&mut analytic))?;
    }
    let mut probe = params.clone();
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    let mut blocks = Vec::new();
    for (ti, name) in names.iter().enumerate() {
        let n = probe.tensors()[ti].1.len();
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for k in 0..n {
            let orig = probe.tensors()[ti].1.data()[k];
            probe.tensors_mut()[ti].1.data_mut()[k] = orig + GRADCHECK_EPS;
            let up = total_loss(&probe, objective, examples, opts)?;
            probe.tensors_mut()[ti].1.data_mut()[k] = orig - GRADCHECK_EPS;
            let down = total_loss(&probe, objective, examples, opts)?;
            probe.tensors_mut()[ti].1.data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * GRADCHECK_EPS);
            let a = analytic.tensors()[ti].1.data()[k];
            max_rel = max_rel.max(relative_error(a, numeric));
            max_abs = max_abs.max((a - numeric).abs());
        }
        blocks.push(BlockReport {
            name: name.clone(),
            values: n,
            max_rel_error: max_rel,
            max_abs_error: max_abs,
        });
    }
    let max_rel_error = blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        objective: objective.name().to_string(),
        blocks,
        max_rel_error,
        passed: max_rel_error < GRADCHECK_TOL,
    })
}

impl GradCheckReport {
    pub fn write_text(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "objective {}: {}", self.objective, if self.passed { "PASS" } else { "FAIL" })?;
        for b in &self.blocks {
            writeln!(out, "  {:<16} n={:<5} max_rel={:.3e} max_abs={:.3e}", b.name, b.values, b.max_rel_error, b.max_abs_error)?;
        }
        Ok(())
    }
}
