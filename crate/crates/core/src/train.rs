//! Two-pass training: optimizer, learning-rate schedule, the training step,
//! the teacher-forcing-then-schedule driver, checkpoints and metrics.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::eval::{evaluate, DecodeMode};
use crate::model::{Container, DropoutMode, Forward, ModelConfig, NamedArray, Transformer};
use crate::rng::{RngSnapshot, RngStreams, Stream};
use crate::scalar::Scalar;
use crate::schedule::{
    build_mixed_input, confidence_mc, confidence_ptp, select_tokens, vanilla_sample_mask, ConfidenceEstimator,
    ScheduleConfig, ScheduleMode, SelectionCounts, TokenSelection,
};
use crate::tasks::{Batch, Dataset};
use crate::tensor::Tensor;

/// Inverse-square-root schedule with linear warmup:
/// `d_model^-0.5 · min(step^-0.5, step · warmup^-1.5)`. Steps below 1 are
/// treated as 1.
pub fn lr_at(step: u64, d_model: usize, warmup: u64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub phase1_steps: u64,
    pub phase2_steps: u64,
    pub batch_size: usize,
    pub warmup_steps: u64,
    /// Multiplies the scheduled learning rate.
    pub lr_scale: f64,
    pub label_smoothing: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// A metrics record is written every `log_every` steps.
    pub log_every: u64,
    /// Validation (greedy) every `eval_every` steps.
    pub eval_every: u64,
    /// Validate on the first `valid_limit` pairs only.
    pub valid_limit: Option<usize>,
    pub checkpoint_every: Option<u64>,
    /// Treat first-pass outputs as constants.
    pub detach_pass1: bool,
    /// Apply dropout during the first pass.
    pub pass1_dropout: bool,
    /// Log elapsed seconds; off keeps metrics files byte-reproducible.
    pub log_wallclock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            phase1_steps: 2_000,
            phase2_steps: 8_000,
            batch_size: 64,
            warmup_steps: 4_000,
            lr_scale: 1.0,
            label_smoothing: 0.1,
            clip_norm: Some(1.0),
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-9,
            log_every: 50,
            eval_every: 200,
            valid_limit: None,
            checkpoint_every: None,
            detach_pass1: true,
            pass1_dropout: true,
            log_wallclock: false,
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self) -> u64 {
        self.phase1_steps + self.phase2_steps
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::config(m.to_string()));
        if self.batch_size == 0 {
            return fail("train.batch_size must be positive");
        }
        if self.log_every == 0 || self.eval_every == 0 {
            return fail("train.log_every and train.eval_every must be positive");
        }
        if self.checkpoint_every == Some(0) {
            return fail("train.checkpoint_every must be positive or null");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return fail("train.label_smoothing must lie in [0, 1)");
        }
        if !(self.lr_scale > 0.0 && self.lr_scale.is_finite()) {
            return fail("train.lr_scale must be positive");
        }
        if self.clip_norm.is_some_and(|c| c.is_nan() || c <= 0.0) {
            return fail("train.clip_norm must be positive or null");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_eps <= 0.0 {
            return fail("Adam needs betas in [0, 1) and a positive epsilon");
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &[Tensor<T>], beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            t: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn update(&mut self, params: &mut [Tensor<T>], grads: &[Vec<T>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::contract("optimizer, parameters and gradients disagree in count"));
        }
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let bc1 = T::lit(1.0 - self.beta1.powi(t));
        let bc2 = T::lit(1.0 - self.beta2.powi(t));
        let (lr, eps, one) = (T::lit(lr), T::lit(self.eps), T::one());
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            if g.len() != p.len() {
                return Err(Error::contract("gradient length differs from parameter"));
            }
            for (((x, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.data_mut()).zip(v.data_mut()) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *x -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

pub fn global_norm<T: Scalar>(grads: &[Vec<T>]) -> f64 {
    grads
        .iter()
        .flatten()
        .map(|g| {
            let g = g.as_f64();
            g * g
        })
        .sum::<f64>()
        .sqrt()
}

/// Scales gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            *g *= s;
        }
    }
    norm
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub phase: u8,
    pub loss: Option<f64>,
    pub lr: f64,
    pub val_token_acc: Option<f64>,
    pub val_seq_acc: Option<f64>,
    pub val_bleu: Option<f64>,
    pub frac_golden: Option<f64>,
    pub frac_predicted: Option<f64>,
    pub frac_random: Option<f64>,
    pub wallclock_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event: Option<String>,
}

pub const MODE_SWITCH: &str = "mode_switch";

/// First logged step whose `value` reaches `target`.
pub fn steps_to_threshold(history: &[(u64, f64)], target: f64) -> Option<u64> {
    history.iter().find(|&&(_, v)| v >= target).map(|&(s, _)| s)
}

/// `(step, val_seq_acc)` pairs of the records that carry validation.
pub fn validation_curve(records: &[MetricRecord]) -> Vec<(u64, f64)> {
    records
        .iter()
        .filter_map(|r| r.val_seq_acc.map(|v| (r.step, v)))
        .collect()
}

/// Loss and selection statistics accumulated between two records.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub steps: u64,
    pub loss_sum: f64,
    pub golden: usize,
    pub predicted: usize,
    pub random: usize,
}

impl Window {
    fn add(&mut self, s: &StepStats) {
        self.steps += 1;
        self.loss_sum += s.loss;
        self.golden += s.counts.golden;
        self.predicted += s.counts.predicted;
        self.random += s.counts.random;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub lr: f64,
    /// Norm before clipping.
    pub grad_norm: f64,
    pub counts: SelectionCounts,
}

#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub model: Transformer<T>,
    pub optimizer: Adam<T>,
    /// Completed training steps.
    pub step: u64,
    pub rngs: RngStreams,
    /// Schedule used once teacher-forcing pretraining ends.
    pub schedule: ScheduleConfig,
    pub history: Vec<MetricRecord>,
    pub window: Window,
    pub data_order: Vec<usize>,
    pub data_cursor: usize,
    /// Seconds spent before the current process resumed.
    pub elapsed_s: f64,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model_config: ModelConfig, schedule: ScheduleConfig, train: &TrainConfig, seed: u64) -> Result<Self> {
        schedule.validate()?;
        train.validate()?;
        let model = Transformer::new(model_config, seed)?;
        let optimizer = Adam::new(model.params(), train.adam_beta1, train.adam_beta2, train.adam_eps);
        Ok(TrainState {
            model,
            optimizer,
            step: 0,
            rngs: RngStreams::new(seed),
            schedule,
            history: Vec::new(),
            window: Window::default(),
            data_order: Vec::new(),
            data_cursor: 0,
            elapsed_s: 0.0,
        })
    }

    /// Next batch of an epoch-wise shuffle of `data`. Each epoch shuffles
    /// the pairs, sorts pools of 16 batches by source length to limit
    /// padding, then shuffles the order of the resulting batches. Pairs that
    /// do not fill a final batch are skipped for that epoch.
    pub fn next_batch(&mut self, data: &Dataset, batch_size: usize) -> Result<Batch> {
        if data.is_empty() {
            return Err(Error::Input("empty training set".into()));
        }
        let b = batch_size.min(data.len());
        if self.data_cursor + b > self.data_order.len() || self.data_order.iter().any(|&i| i >= data.len()) {
            let rng = self.rngs.get(Stream::Data);
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(rng);
            for pool in order.chunks_mut(b * 16) {
                pool.sort_by_key(|&i| data.pairs[i].src.len());
            }
            let mut batches: Vec<usize> = (0..order.len() / b).collect();
            batches.shuffle(rng);
            self.data_order = batches.iter().flat_map(|&k| order[k * b..(k + 1) * b].iter().copied()).collect();
            self.data_cursor = 0;
        }
        let idx = &self.data_order[self.data_cursor..self.data_cursor + b];
        self.data_cursor += b;
        let pairs: Vec<_> = idx.iter().map(|&i| &data.pairs[i]).collect();
        Batch::from_pairs(&pairs)
    }

    pub fn to_container(&self) -> Container {
        let mut c = self.model.to_container();
        c.header = json!({
            "kind": "train_state",
            "scalar": T::NAME,
            "model_config": self.model.config(),
            "step": self.step,
            "adam": {
                "beta1": self.optimizer.beta1,
                "beta2": self.optimizer.beta2,
                "eps": self.optimizer.eps,
                "t": self.optimizer.t,
            },
            "rng": self.rngs.snapshot(),
            "schedule": self.schedule,
            "history": self.history,
            "window": self.window,
            "data_order": self.data_order,
            "data_cursor": self.data_cursor,
            "elapsed_s": self.elapsed_s,
        });
        for (name, (m, v)) in self
            .model
            .param_names()
            .zip(self.optimizer.m.iter().zip(&self.optimizer.v))
        {
            c.arrays.push(NamedArray::from_tensor(format!("adam.m.{name}"), m));
            c.arrays.push(NamedArray::from_tensor(format!("adam.v.{name}"), v));
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.header.get("kind").and_then(|k| k.as_str()) != Some("train_state") {
            return Err(Error::Checkpoint("not a training-state checkpoint".into()));
        }
        let field = |name: &str| {
            c.header
                .get(name)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("header has no {name}")))
        };
        let model = Transformer::from_container(c)?;
        let adam = field("adam")?;
        let num = |v: &serde_json::Value, k: &str| {
            v.get(k)
                .and_then(|x| x.as_f64())
                .ok_or_else(|| Error::Checkpoint(format!("adam.{k} missing")))
        };
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, p) in model.param_names().zip(model.params()) {
            for (prefix, out) in [("adam.m.", &mut m), ("adam.v.", &mut v)] {
                let key = format!("{prefix}{name}");
                let a = c
                    .array(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer array {key}")))?;
                if a.shape != p.shape() {
                    return Err(Error::Checkpoint(format!("optimizer array {key} has shape {:?}", a.shape)));
                }
                out.push(a.to_tensor()?);
            }
        }
        let optimizer = Adam {
            beta1: num(&adam, "beta1")?,
            beta2: num(&adam, "beta2")?,
            eps: num(&adam, "eps")?,
            t: adam
                .get("t")
                .and_then(|x| x.as_u64())
                .ok_or_else(|| Error::Checkpoint("adam.t missing".into()))?,
            m,
            v,
        };
        let snapshot: RngSnapshot = serde_json::from_value(field("rng")?)?;
        let rngs = RngStreams::restore(&snapshot)
            .ok_or_else(|| Error::Checkpoint("unreadable random stream positions".into()))?;
        Ok(TrainState {
            model,
            optimizer,
            step: serde_json::from_value(field("step")?)?,
            rngs,
            schedule: serde_json::from_value(field("schedule")?)?,
            history: serde_json::from_value(field("history")?)?,
            window: serde_json::from_value(field("window")?)?,
            data_order: serde_json::from_value(field("data_order")?)?,
            data_cursor: serde_json::from_value(field("data_cursor")?)?,
            elapsed_s: serde_json::from_value(field("elapsed_s")?)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

/// Loss and gradients (one vector per parameter, layout order) for one batch
/// under `mode`. `step` is the number of completed steps, used by decay
/// schedules. Parameters are not modified.
#[allow(clippy::too_many_arguments)]
pub fn compute_gradients<T: Scalar>(
    model: &Transformer<T>,
    rngs: &mut RngStreams,
    batch: &Batch,
    mode: &ScheduleMode,
    schedule: &ScheduleConfig,
    cfg: &TrainConfig,
    step: u64,
) -> Result<(f64, Vec<Vec<T>>, SelectionCounts)> {
    let rate = model.config().dropout_rate;
    let mut fwd = Forward::new(model, true);
    let memory = fwd.encode(batch, &mut DropoutMode::On {
        rate,
        rng: rngs.get(Stream::DropoutEncoder),
    })?;

    let pass1_rate = if cfg.pass1_dropout { rate } else { 0.0 };
    let selection: TokenSelection;
    let mut pass1 = None;
    match mode {
        ScheduleMode::TeacherForcing => selection = TokenSelection::all_golden(batch),
        ScheduleMode::VanillaSs(strategy) => {
            let keep = strategy.probability(step);
            selection = vanilla_sample_mask(keep, batch, rngs.get(Stream::Sampling));
        }
        ScheduleMode::ConfidenceAware { .. } | ScheduleMode::ConfidenceAwareDenoising { .. } => {
            let conf = match schedule.estimator {
                ConfidenceEstimator::Ptp => {
                    let out = fwd.decode_pass1(
                        memory,
                        batch,
                        &mut DropoutMode::On {
                            rate: pass1_rate,
                            rng: rngs.get(Stream::DropoutPass1),
                        },
                        cfg.detach_pass1,
                    )?;
                    let conf = confidence_ptp(&out);
                    pass1 = Some(out);
                    conf
                }
                ref est => confidence_mc(est, model, batch, rngs.get(Stream::MonteCarlo))?,
            };
            let mode_cfg = ScheduleConfig {
                mode: *mode,
                ..schedule.clone()
            };
            selection = select_tokens(&conf, &mode_cfg, batch, rngs.get(Stream::Sampling))?;
        }
    }
    if selection.has_predicted() && pass1.is_none() {
        pass1 = Some(fwd.decode_pass1(
            memory,
            batch,
            &mut DropoutMode::On {
                rate: pass1_rate,
                rng: rngs.get(Stream::DropoutPass1),
            },
            cfg.detach_pass1,
        )?);
    }
    let counts = selection.counts();
    let mixed = build_mixed_input(&mut fwd, selection, batch, pass1.as_ref(), schedule.hard_predictions)?;
    let out = fwd.decode_pass2(
        memory,
        &mixed,
        batch,
        &mut DropoutMode::On {
            rate,
            rng: rngs.get(Stream::DropoutPass2),
        },
    )?;
    let mask: Vec<bool> = batch.tgt_pad.iter().map(|&p| !p).collect();
    let loss = fwd.tape.cross_entropy(out.logits, &batch.tgt_out, &mask, cfg.label_smoothing)?;
    let loss_value = fwd.tape.value(loss).item().as_f64();
    if !loss_value.is_finite() {
        return Ok((loss_value, Vec::new(), counts));
    }
    fwd.tape.backward(loss)?;
    let grads = fwd
        .params()
        .vars()
        .iter()
        .zip(model.params())
        .map(|(&v, p)| match fwd.tape.grad(v) {
            Some(g) => g.to_vec(),
            None => vec![T::zero(); p.len()],
        })
        .collect();
    Ok((loss_value, grads, counts))
}

/// One optimizer step on `batch` under `mode`.
pub fn train_step<T: Scalar>(
    state: &mut TrainState<T>,
    batch: &Batch,
    mode: &ScheduleMode,
    cfg: &TrainConfig,
) -> Result<StepStats> {
    let lr = lr_at(state.step + 1, state.model.config().d_model, cfg.warmup_steps) * cfg.lr_scale;
    let (loss, mut grads, counts) = compute_gradients(
        &state.model,
        &mut state.rngs,
        batch,
        mode,
        &state.schedule,
        cfg,
        state.step,
    )?;
    let grad_norm = if grads.is_empty() { f64::NAN } else { global_norm(&grads) };
    if !loss.is_finite() || !grad_norm.is_finite() {
        return Err(Error::NonFinite {
            step: state.step + 1,
            lr,
            grad_norm,
        });
    }
    if let Some(c) = cfg.clip_norm {
        clip_global_norm(&mut grads, c);
    }
    state.optimizer.update(state.model.params_mut(), &grads, lr)?;
    state.step += 1;
    Ok(StepStats {
        loss,
        lr,
        grad_norm,
        counts,
    })
}

/// Receives records and checkpoint opportunities from the training driver.
pub trait TrainObserver<T: Scalar> {
    fn on_record(&mut self, _record: &MetricRecord) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _state: &TrainState<T>) -> Result<()> {
        Ok(())
    }
}

impl<T: Scalar> TrainObserver<T> for () {}

/// Collects records in memory.
impl<T: Scalar> TrainObserver<T> for Vec<MetricRecord> {
    fn on_record(&mut self, record: &MetricRecord) -> Result<()> {
        self.push(record.clone());
        Ok(())
    }
}

fn validation<T: Scalar>(model: &Transformer<T>, valid: &Dataset, cfg: &TrainConfig) -> Result<(f64, f64, f64)> {
    let subset;
    let data = match cfg.valid_limit {
        Some(n) if n < valid.len() => {
            subset = Dataset {
                pairs: valid.pairs[..n].to_vec(),
            };
            &subset
        }
        _ => valid,
    };
    if data.is_empty() {
        return Ok((0.0, 0.0, 0.0));
    }
    let r = evaluate(model, data, DecodeMode::Greedy)?;
    Ok((r.overall.token_acc, r.overall.seq_acc, r.overall.bleu))
}

/// Runs teacher forcing for `phase1_steps`, then the state's schedule for
/// `phase2_steps`, continuing from `state.step`.
pub fn pretrain_then_schedule<T: Scalar>(
    state: &mut TrainState<T>,
    cfg: &TrainConfig,
    train: &Dataset,
    valid: &Dataset,
    observer: &mut dyn TrainObserver<T>,
) -> Result<()> {
    run_until(state, cfg, train, valid, cfg.total_steps(), observer)
}

/// As [`pretrain_then_schedule`] but stops once `until` steps are complete.
/// Stopping and continuing yields the same records as one uninterrupted run.
pub fn run_until<T: Scalar>(
    state: &mut TrainState<T>,
    cfg: &TrainConfig,
    train: &Dataset,
    valid: &Dataset,
    until: u64,
    observer: &mut dyn TrainObserver<T>,
) -> Result<()> {
    cfg.validate()?;
    state.schedule.validate()?;
    let started = Instant::now();
    let total = cfg.total_steps();
    let until = until.min(total);
    let d_model = state.model.config().d_model;
    let clock = |state: &TrainState<T>| {
        cfg.log_wallclock
            .then(|| state.elapsed_s + started.elapsed().as_secs_f64())
    };
    let switch_pending = |state: &TrainState<T>| {
        cfg.phase2_steps > 0
            && state.step == cfg.phase1_steps
            && !state.history.iter().any(|r| r.event.as_deref() == Some(MODE_SWITCH))
    };
    while state.step < until {
        if switch_pending(state) {
            let rec = MetricRecord {
                step: state.step,
                phase: 2,
                lr: lr_at(state.step + 1, d_model, cfg.warmup_steps) * cfg.lr_scale,
                wallclock_s: clock(state),
                event: Some(MODE_SWITCH.into()),
                ..Default::default()
            };
            state.history.push(rec.clone());
            observer.on_record(&rec)?;
        }
        let mode = if state.step < cfg.phase1_steps {
            ScheduleMode::TeacherForcing
        } else {
            state.schedule.mode
        };
        let batch = state.next_batch(train, cfg.batch_size)?;
        let stats = train_step(state, &batch, &mode, cfg)?;
        state.window.add(&stats);
        let s = state.step;
        if s.is_multiple_of(cfg.log_every) || s == cfg.phase1_steps || s == total {
            let val = if s.is_multiple_of(cfg.eval_every) || s == cfg.phase1_steps || s == total {
                Some(validation(&state.model, valid, cfg)?)
            } else {
                None
            };
            let w = std::mem::take(&mut state.window);
            let (g, p, r) = SelectionCounts {
                golden: w.golden,
                predicted: w.predicted,
                random: w.random,
            }
            .fractions();
            let rec = MetricRecord {
                step: s,
                phase: if s <= cfg.phase1_steps { 1 } else { 2 },
                loss: Some(w.loss_sum / w.steps as f64),
                lr: stats.lr,
                val_token_acc: val.map(|v| v.0),
                val_seq_acc: val.map(|v| v.1),
                val_bleu: val.map(|v| v.2),
                frac_golden: Some(g),
                frac_predicted: Some(p),
                frac_random: Some(r),
                wallclock_s: clock(state),
                event: None,
            };
            state.history.push(rec.clone());
            observer.on_record(&rec)?;
        }
        if cfg.checkpoint_every.is_some_and(|c| s.is_multiple_of(c)) || s == total {
            let before = state.elapsed_s;
            if cfg.log_wallclock {
                state.elapsed_s += started.elapsed().as_secs_f64();
            }
            observer.on_checkpoint(state)?;
            state.elapsed_s = before;
        }
    }
    if cfg.log_wallclock {
        state.elapsed_s += started.elapsed().as_secs_f64();
    }
    Ok(())
}

/// Appends records to a JSONL file, one line each.
pub struct MetricsWriter {
    file: File,
}

impl MetricsWriter {
    /// Creates or truncates `path`.
    pub fn create(path: &Path) -> Result<Self> {
        Ok(MetricsWriter { file: File::create(path)? })
    }

    pub fn append(path: &Path) -> Result<Self> {
        Ok(MetricsWriter {
            file: OpenOptions::new().create(true).append(true).open(path)?,
        })
    }

    pub fn write(&mut self, record: &MetricRecord) -> Result<()> {
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        Ok(())
    }
}

/// Reads complete lines of a metrics file; a trailing line without newline
/// (still being written) is ignored.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    let mut line = String::new();
    let mut n = 0;
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 || !line.ends_with('\n') {
            break;
        }
        n += 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: n,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}
