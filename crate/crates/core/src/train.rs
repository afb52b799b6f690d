//! Optimizers, evaluation metrics and the training loop.

use crate::autodiff::Tape;
use crate::error::{ArithError, Result};
use crate::model::{LossMask, Model, EVAL_CHUNK};
use crate::rng::RngState;
use crate::tasks::{Sample, SplitSpec, TaskSpec, Token};
use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

const SHUFFLE_STREAM: u64 = 0x5_4FF1E;
const DROPOUT_STREAM: u64 = 0xD_0907;
const SUBSAMPLE_STREAM: u64 = 0x5_0B5A;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    AdamW,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay; only read by AdamW.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Global-norm clip threshold.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub loss_mask: LossMask,
    /// Size of the fixed train subsample used for per-epoch metrics.
    /// `None` evaluates the whole train split.
    pub train_eval_subsample: Option<usize>,
    /// Ends the run once validation sequence accuracy reaches this value.
    pub stop_at_val_seq_acc: Option<f64>,
    pub lr_schedule: LrSchedule,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear decay to zero over the whole run.
    Linear,
}

impl LrSchedule {
    /// Learning-rate multiplier for a zero-based step out of `total`.
    pub fn factor(self, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Linear => 1.0 - step as f64 / total.max(1) as f64,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            weight_decay: 0.0,
            batch_size: 128,
            epochs: 100,
            grad_clip: None,
            seed: 0,
            loss_mask: LossMask::CompletionOnly,
            train_eval_subsample: Some(2048),
            stop_at_val_seq_acc: None,
            lr_schedule: LrSchedule::Constant,
        }
    }
}

impl TrainConfig {
    /// AdamW setup used with the decoder-only model.
    pub fn decoder_only() -> Self {
        Self {
            optimizer: OptimizerKind::AdamW,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            grad_clip: Some(1.0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(ArithError::Config(msg.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        for b in [self.beta1, self.beta2] {
            if !(b > 0.0 && b < 1.0) {
                return bad("betas must lie in (0, 1)");
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return bad("eps must be positive and weight_decay non-negative");
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return bad("grad_clip must be positive");
        }
        if self.train_eval_subsample == Some(0) {
            return bad("train_eval_subsample must be positive");
        }
        Ok(())
    }

    pub fn adam_params(&self) -> AdamParams {
        AdamParams {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moment buffers plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamState<T: Scalar = f32> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        Self {
            m: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            step: 0,
        }
    }
}

fn check_state<T: Scalar>(params: &[Tensor<T>], grads: &[Vec<T>], state: &AdamState<T>) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(ArithError::Contract(format!(
            "optimizer got {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        let n = p.numel();
        if grads[i].len() != n || state.m[i].len() != n || state.v[i].len() != n {
            return Err(ArithError::Shape {
                op: "adam",
                left: p.shape().to_vec(),
                right: vec![grads[i].len()],
            });
        }
    }
    Ok(())
}

fn adam_update<T: Scalar>(params: &mut [Tensor<T>], grads: &[Vec<T>], state: &mut AdamState<T>, hp: &AdamParams, decay: bool) -> Result<()> {
    check_state(params, grads, state)?;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    let (b1, b2) = (T::of(hp.beta1), T::of(hp.beta2));
    let (one_b1, one_b2) = (T::of(1.0 - hp.beta1), T::of(1.0 - hp.beta2));
    let step_size = T::of(hp.lr / c1);
    let c2_sqrt = T::of(c2.sqrt());
    let eps = T::of(hp.eps);
    for (i, p) in params.iter_mut().enumerate() {
        // nanoGPT convention: biases and norm gains are not decayed
        let shrink = if decay && hp.weight_decay > 0.0 && p.shape().len() >= 2 {
            T::of(1.0 - hp.lr * hp.weight_decay)
        } else {
            T::one()
        };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let g = grads[i][j];
            m[j] = b1 * m[j] + one_b1 * g;
            v[j] = b2 * v[j] + one_b2 * g * g;
            let denom = v[j].sqrt() / c2_sqrt + eps;
            *w = *w * shrink - step_size * m[j] / denom;
        }
    }
    Ok(())
}

/// Bias-corrected Adam update.
pub fn adam_step<T: Scalar>(params: &mut [Tensor<T>], grads: &[Vec<T>], state: &mut AdamState<T>, hp: &AdamParams) -> Result<()> {
    adam_update(params, grads, state, hp, false)
}

/// Adam with decoupled weight decay on matrix-shaped parameters.
pub fn adamw_step<T: Scalar>(params: &mut [Tensor<T>], grads: &[Vec<T>], state: &mut AdamState<T>, hp: &AdamParams) -> Result<()> {
    adam_update(params, grads, state, hp, true)
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g.f64() * g.f64()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = T::of(max_norm / (norm + 1e-6));
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Anything that can complete prompts and score teacher-forced positions.
pub trait Predictor {
    /// Greedy completions of exactly `m` tokens.
    fn generate(&self, prompts: &[&[Token]], m: usize) -> Result<Vec<Vec<Token>>>;
    /// Argmax next-token predictions at every completion position,
    /// with ground truth fed as the prefix.
    fn teacher_forced(&self, prompts: &[&[Token]], targets: &[&[Token]]) -> Result<Vec<Vec<Token>>>;
}

impl<T: Scalar> Predictor for Model<T> {
    fn generate(&self, prompts: &[&[Token]], m: usize) -> Result<Vec<Vec<Token>>> {
        self.greedy_generate_batch(prompts, m)
    }

    fn teacher_forced(&self, prompts: &[&[Token]], targets: &[&[Token]]) -> Result<Vec<Vec<Token>>> {
        let mut out = Vec::with_capacity(prompts.len());
        for (p, t) in prompts.chunks(EVAL_CHUNK).zip(targets.chunks(EVAL_CHUNK)) {
            let logits = self.teacher_forced_batch(p, t, false)?;
            for s in 0..p.len() {
                out.push((0..logits.rows_per_sample).map(|j| logits.argmax(s, j)).collect());
            }
        }
        Ok(out)
    }
}

fn views<'a>(samples: &[&'a Sample]) -> Result<(Vec<&'a [Token]>, Vec<&'a [Token]>, usize)> {
    let first = samples
        .first()
        .ok_or_else(|| ArithError::Contract("metric over an empty sample list".into()))?;
    let m = first.completion.len();
    if samples.iter().any(|s| s.completion.len() != m) {
        return Err(ArithError::Contract("completions differ in length".into()));
    }
    Ok((
        samples.iter().map(|s| s.prompt.as_slice()).collect(),
        samples.iter().map(|s| s.completion.as_slice()).collect(),
        m,
    ))
}

/// Fraction of samples whose greedy completion matches exactly.
pub fn sequence_accuracy<P: Predictor + ?Sized>(model: &P, samples: &[&Sample]) -> Result<f64> {
    let (prompts, targets, m) = views(samples)?;
    let generated = model.generate(&prompts, m)?;
    Ok(exact_matches(&generated, &targets) as f64 / samples.len() as f64)
}

fn exact_matches(generated: &[Vec<Token>], targets: &[&[Token]]) -> usize {
    generated.iter().zip(targets).filter(|(g, t)| g.as_slice() == **t).count()
}

/// Teacher-forced per-position argmax match rate.
pub fn token_accuracy<P: Predictor + ?Sized>(model: &P, samples: &[&Sample]) -> Result<f64> {
    let (prompts, targets, m) = views(samples)?;
    let predicted = model.teacher_forced(&prompts, &targets)?;
    let hits: usize = predicted
        .iter()
        .zip(&targets)
        .map(|(p, t)| p.iter().zip(t.iter()).filter(|(a, b)| a == b).count())
        .sum();
    Ok(hits as f64 / (samples.len() * m) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MaeReport {
    pub mae: f64,
    /// Fraction of generations containing a non-bit token.
    pub malformed_rate: f64,
}

fn mae_of(task: &TaskSpec, generated: &[Vec<Token>], samples: &[&Sample]) -> MaeReport {
    let mut err = 0.0;
    let mut malformed = 0usize;
    for (g, s) in generated.iter().zip(samples) {
        let (value, bad) = task.decode_completion(g);
        err += (value as f64 - s.result as f64).abs();
        malformed += bad as usize;
    }
    let n = samples.len() as f64;
    MaeReport {
        mae: err / n,
        malformed_rate: malformed as f64 / n,
    }
}

/// Mean absolute error between decoded greedy completions and targets.
pub fn mae<P: Predictor + ?Sized>(model: &P, task: &TaskSpec, samples: &[&Sample]) -> Result<MaeReport> {
    let (prompts, _, m) = views(samples)?;
    let generated = model.generate(&prompts, m)?;
    Ok(mae_of(task, &generated, samples))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalSummary {
    pub token_accuracy: f64,
    pub sequence_accuracy: f64,
    pub mae: f64,
    pub malformed_rate: f64,
}

/// All metrics from one generation pass and one teacher-forced pass.
pub fn evaluate<P: Predictor + ?Sized>(model: &P, task: &TaskSpec, samples: &[&Sample]) -> Result<EvalSummary> {
    let (prompts, targets, m) = views(samples)?;
    let generated = model.generate(&prompts, m)?;
    let seq = exact_matches(&generated, &targets) as f64 / samples.len() as f64;
    let report = mae_of(task, &generated, samples);
    Ok(EvalSummary {
        token_accuracy: token_accuracy(model, samples)?,
        sequence_accuracy: seq,
        mae: report.mae,
        malformed_rate: report.malformed_rate,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub loss: f64,
    pub train_token_acc: f64,
    pub val_token_acc: f64,
    pub train_seq_acc: f64,
    pub val_seq_acc: f64,
    pub mae: Option<f64>,
}

pub const METRICS_HEADER: &str = "epoch,loss,train_token_acc,val_token_acc,train_seq_acc,val_seq_acc,mae";

impl MetricsRow {
    fn csv_line(&self) -> String {
        let mae = self.mae.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.loss, self.train_token_acc, self.val_token_acc, self.train_seq_acc, self.val_seq_acc, mae
        )
    }
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], mut w: W) -> Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.csv_line())?;
    }
    Ok(())
}

pub fn read_metrics_csv<R: BufRead>(r: R) -> Result<Vec<MetricsRow>> {
    let mut lines = r.lines();
    let header = lines.next().transpose()?;
    if header.as_deref().map(str::trim) != Some(METRICS_HEADER) {
        return Err(ArithError::Format("metrics header missing".into()));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|_| ArithError::Format(format!("bad number {s:?}")));
    let mut rows = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(ArithError::Format(format!("expected 7 fields: {line}")));
        }
        rows.push(MetricsRow {
            epoch: f[0].parse().map_err(|_| ArithError::Format(format!("bad epoch {:?}", f[0])))?,
            loss: num(f[1])?,
            train_token_acc: num(f[2])?,
            val_token_acc: num(f[3])?,
            train_seq_acc: num(f[4])?,
            val_seq_acc: num(f[5])?,
            mae: if f[6].is_empty() { None } else { Some(num(f[6])?) },
        });
    }
    Ok(rows)
}

/// Training cost under the `6·N·T` rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct FlopEstimate {
    pub parameters: u64,
    pub tokens: u64,
    pub flops: u128,
}

impl FlopEstimate {
    pub fn flops_f64(&self) -> f64 {
        self.flops as f64
    }
}

pub fn estimate_flops(parameters: u64, examples: u64, seq_len: u64, epochs: u64) -> FlopEstimate {
    let tokens = examples * seq_len * epochs;
    FlopEstimate {
        parameters,
        tokens,
        flops: 6 * parameters as u128 * tokens as u128,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum Threshold {
    Reached { epoch: usize },
    NotReached { final_accuracy: Option<f64> },
}

impl Threshold {
    pub fn epoch(&self) -> Option<usize> {
        match self {
            Threshold::Reached { epoch } => Some(*epoch),
            Threshold::NotReached { .. } => None,
        }
    }
}

impl std::fmt::Display for Threshold {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Threshold::Reached { epoch } => write!(f, "{epoch}"),
            Threshold::NotReached { final_accuracy: Some(a) } => write!(f, "--- ({:.1}%)", a * 100.0),
            Threshold::NotReached { final_accuracy: None } => write!(f, "---"),
        }
    }
}

/// First epoch whose validation sequence accuracy reaches `threshold`.
pub fn epochs_to_threshold(curve: &[MetricsRow], threshold: f64) -> Threshold {
    curve
        .iter()
        .find(|r| r.val_seq_acc >= threshold)
        .map(|r| Threshold::Reached { epoch: r.epoch })
        .unwrap_or(Threshold::NotReached {
            final_accuracy: curve.last().map(|r| r.val_seq_acc),
        })
}

/// One optimizer step on `batch`; returns the batch loss.
pub fn train_step(
    model: &mut Model,
    state: &mut AdamState,
    config: &TrainConfig,
    batch: &[&Sample],
    dropout: Option<&mut RngState>,
) -> Result<f64> {
    train_step_scaled(model, state, config, batch, dropout, 1.0)
}

/// [`train_step`] with the learning rate multiplied by `lr_factor`.
pub fn train_step_scaled(
    model: &mut Model,
    state: &mut AdamState,
    config: &TrainConfig,
    batch: &[&Sample],
    dropout: Option<&mut RngState>,
    lr_factor: f64,
) -> Result<f64> {
    let prompts: Vec<&[Token]> = batch.iter().map(|s| s.prompt.as_slice()).collect();
    let targets: Vec<&[Token]> = batch.iter().map(|s| s.completion.as_slice()).collect();
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, true);
    let loss = model.loss_graph(&mut tape, &p, &prompts, &targets, config.loss_mask, dropout)?;
    let value = tape.value(loss)[0] as f64;
    if !value.is_finite() {
        return Ok(value);
    }
    tape.backward(loss)?;
    let mut grads: Vec<Vec<f32>> = p
        .iter()
        .map(|&v| tape.grad(v).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(v).len()]))
        .collect();
    drop(tape);
    if let Some(c) = config.grad_clip {
        clip_grad_norm(&mut grads, c);
    }
    let mut hp = config.adam_params();
    hp.lr *= lr_factor;
    match config.optimizer {
        OptimizerKind::Adam => adam_step(model.params_mut(), &grads, state, &hp)?,
        OptimizerKind::AdamW => adamw_step(model.params_mut(), &grads, state, &hp)?,
    }
    Ok(value)
}

/// Result of a completed training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub metrics: Vec<MetricsRow>,
    pub checkpoints: Vec<PathBuf>,
}

/// Where and how a run persists its outputs.
#[derive(Clone, Debug, Default)]
pub struct RunOutputs {
    /// Directory receiving `best.ckpt`, `final.ckpt` and diagnostics.
    pub checkpoint_dir: Option<PathBuf>,
    /// Metrics CSV rewritten after every epoch.
    pub metrics_path: Option<PathBuf>,
    pub meta: serde_json::Value,
}

fn select<'a>(samples: &'a [Sample], idx: &[usize]) -> Result<Vec<&'a Sample>> {
    idx.iter()
        .map(|&i| {
            samples.get(i).ok_or(ArithError::Index {
                what: "split sample",
                index: i,
                limit: samples.len(),
            })
        })
        .collect()
}

/// Trains `model` on `split.train` and evaluates both splits every epoch.
///
/// `on_epoch` sees every row as soon as it is computed.
pub fn train(
    mut model: Model,
    task: &TaskSpec,
    samples: &[Sample],
    split: &SplitSpec,
    config: &TrainConfig,
    outputs: &RunOutputs,
    on_epoch: &mut dyn FnMut(&MetricsRow),
) -> Result<TrainOutcome> {
    config.validate()?;
    let train_set = select(samples, &split.train)?;
    let val_set = select(samples, &split.validation)?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(ArithError::Precondition("train and validation splits must be non-empty".into()));
    }
    let m = task.output_length();
    if samples.iter().any(|s| s.prompt.len() != task.prompt_length() || s.completion.len() != m) {
        return Err(ArithError::Precondition("samples do not match the task layout".into()));
    }
    let root = RngState::new(config.seed);
    let train_eval: Vec<&Sample> = match config.train_eval_subsample {
        Some(k) if k < train_set.len() => {
            let perm = root.fork(SUBSAMPLE_STREAM).permutation(train_set.len());
            let mut chosen: Vec<usize> = perm[..k].to_vec();
            chosen.sort_unstable();
            chosen.iter().map(|&i| train_set[i]).collect()
        }
        _ => train_set.clone(),
    };
    if let Some(dir) = &outputs.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut state = AdamState::new(model.params());
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut checkpoints = Vec::new();
    let mut best = f64::NEG_INFINITY;
    let steps_per_epoch = train_set.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let mut step = 0;
    for epoch in 1..=config.epochs {
        let order = root.fork(SHUFFLE_STREAM).fork(epoch as u64).permutation(train_set.len());
        let mut dropout = root.fork(DROPOUT_STREAM).fork(epoch as u64);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| train_set[i]).collect();
            let factor = config.lr_schedule.factor(step, total_steps);
            step += 1;
            let loss = train_step_scaled(&mut model, &mut state, config, &batch, Some(&mut dropout), factor)?;
            if !loss.is_finite() {
                if let Some(dir) = &outputs.checkpoint_dir {
                    let path = dir.join("diverged.ckpt");
                    model.save(&path, config.seed, epoch, outputs.meta.clone())?;
                }
                return Err(ArithError::Diverged { epoch, loss });
            }
            total += loss * batch.len() as f64;
        }
        let tr = evaluate(&model, task, &train_eval)?;
        let va = evaluate(&model, task, &val_set)?;
        let row = MetricsRow {
            epoch,
            loss: total / train_set.len() as f64,
            train_token_acc: tr.token_accuracy,
            val_token_acc: va.token_accuracy,
            train_seq_acc: tr.sequence_accuracy,
            val_seq_acc: va.sequence_accuracy,
            mae: Some(va.mae),
        };
        on_epoch(&row);
        if let Some(dir) = &outputs.checkpoint_dir {
            if row.val_seq_acc > best {
                best = row.val_seq_acc;
                model.save(&dir.join("best.ckpt"), config.seed, epoch, outputs.meta.clone())?;
            }
        }
        let stop = config.stop_at_val_seq_acc.is_some_and(|t| row.val_seq_acc >= t);
        metrics.push(row);
        if let Some(path) = &outputs.metrics_path {
            write_metrics_csv(&metrics, std::io::BufWriter::new(std::fs::File::create(path)?))?;
        }
        if stop {
            break;
        }
    }
    if let Some(dir) = &outputs.checkpoint_dir {
        let path = dir.join("final.ckpt");
        model.save(&path, config.seed, metrics.len(), outputs.meta.clone())?;
        checkpoints.push(dir.join("best.ckpt"));
        checkpoints.push(path);
    }
    Ok(TrainOutcome {
        model,
        metrics,
        checkpoints,
    })
}

/// Loads a metrics CSV from disk.
pub fn load_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    read_metrics_csv(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests;
