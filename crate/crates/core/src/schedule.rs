//! Sampling schedules for the second decoding pass.
//!
//! Two families decide, per decoder input position, whether the second pass
//! sees the gold token, the first pass's prediction, or a random token of the
//! same target sentence:
//!
//! * step-based decay: the gold token is kept with probability `f(i)` where
//!   `i` is the training step (linear, exponential or inverse-sigmoid decay);
//! * confidence-aware selection: the model's confidence `conf(t)` in the gold
//!   token at step `t` gates the input `y_{t-1}`. Confidence at or below
//!   `t_golden` keeps the gold token, confidence in `(t_golden, t_rand]` feeds
//!   the prediction, and confidence above `t_rand` (denoising mode only)
//!   feeds a random token from the sentence.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DecoderOutput, DropoutMode, Forward, MixedInput, Transformer};
use crate::scalar::Scalar;
use crate::tasks::{is_reserved, Batch};

/// Probability of feeding the gold token as a function of the training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DecayStrategy {
    /// `max(epsilon, k·i + b)`
    Linear { epsilon: f64, k: f64, b: f64 },
    /// `k^i`
    Exponential { k: f64 },
    /// `k / (k + exp(i / k))`
    InverseSigmoid { k: f64 },
}

impl DecayStrategy {
    pub const LINEAR_DEFAULT: DecayStrategy = DecayStrategy::Linear {
        epsilon: 0.2,
        k: -5e-5,
        b: 1.0,
    };
    pub const EXPONENTIAL_DEFAULT: DecayStrategy = DecayStrategy::Exponential { k: 0.99999 };
    pub const INVERSE_SIGMOID_DEFAULT: DecayStrategy = DecayStrategy::InverseSigmoid { k: 20_000.0 };

    pub fn linear(epsilon: f64, k: f64, b: f64) -> Result<Self> {
        let s = DecayStrategy::Linear { epsilon, k, b };
        s.validate()?;
        Ok(s)
    }

    pub fn exponential(k: f64) -> Result<Self> {
        let s = DecayStrategy::Exponential { k };
        s.validate()?;
        Ok(s)
    }

    pub fn inverse_sigmoid(k: f64) -> Result<Self> {
        let s = DecayStrategy::InverseSigmoid { k };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            DecayStrategy::Linear { epsilon, k, b } => {
                k < 0.0 && (0.0..=1.0).contains(&epsilon) && (0.0..=1.0).contains(&b)
            }
            DecayStrategy::Exponential { k } => k > 0.0 && k < 1.0,
            DecayStrategy::InverseSigmoid { k } => k >= 1.0 && k.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid decay hyperparameters {self:?}")))
        }
    }

    /// `f(i)` at integer step `i`.
    pub fn probability(&self, step: u64) -> f64 {
        self.probability_at(step as f64)
    }

    /// `f(i)` for a real-valued step.
    pub fn probability_at(&self, i: f64) -> f64 {
        match *self {
            DecayStrategy::Linear { epsilon, k, b } => epsilon.max(k * i + b),
            DecayStrategy::Exponential { k } => k.powf(i),
            DecayStrategy::InverseSigmoid { k } => k / (k + (i / k).exp()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DecayStrategy::Linear { .. } => "linear",
            DecayStrategy::Exponential { .. } => "exponential",
            DecayStrategy::InverseSigmoid { .. } => "inverse_sigmoid",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ConfidenceEstimator {
    /// Gold-token probability from the first pass.
    Ptp,
    /// Mean gold-token probability over `samples` dropout forward passes.
    McExpectation { samples: usize, dropout_rate: f64 },
    /// One minus the variance of the gold-token probability over `samples`
    /// dropout passes; population variance unless `sample_variance`.
    McVariance {
        samples: usize,
        dropout_rate: f64,
        sample_variance: bool,
    },
}

impl ConfidenceEstimator {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ConfidenceEstimator::Ptp => Ok(()),
            ConfidenceEstimator::McExpectation { samples, dropout_rate }
            | ConfidenceEstimator::McVariance {
                samples, dropout_rate, ..
            } => {
                if samples == 0 {
                    return Err(Error::config("Monte Carlo confidence needs K >= 1"));
                }
                crate::autodiff::check_dropout_rate(dropout_rate)
            }
        }
    }
}

/// Which first-pass confidence gates decoder input `y_{t-1}`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum GateIndex {
    /// `conf(t)`: the step that consumes the input.
    #[default]
    #[serde(rename = "t")]
    Consumer,
    /// `conf(t-1)`: the step that predicted the input token.
    #[serde(rename = "t-1")]
    Producer,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScheduleMode {
    TeacherForcing,
    VanillaSs(DecayStrategy),
    ConfidenceAware { t_golden: f64 },
    ConfidenceAwareDenoising { t_golden: f64, t_rand: f64 },
}

impl ScheduleMode {
    pub fn name(&self) -> &'static str {
        match self {
            ScheduleMode::TeacherForcing => "teacher_forcing",
            ScheduleMode::VanillaSs(_) => "vanilla_ss",
            ScheduleMode::ConfidenceAware { .. } => "confidence_aware",
            ScheduleMode::ConfidenceAwareDenoising { .. } => "confidence_aware_denoising",
        }
    }

    pub fn needs_first_pass(&self) -> bool {
        !matches!(self, ScheduleMode::TeacherForcing)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleSpec", into = "ScheduleSpec")]
pub struct ScheduleConfig {
    pub mode: ScheduleMode,
    /// Decay used by `VanillaSs`; kept here so configs round-trip.
    pub strategy: DecayStrategy,
    pub estimator: ConfidenceEstimator,
    pub gate: GateIndex,
    /// Feed the argmax token's embedding instead of the probability-weighted
    /// embedding at predicted positions.
    pub hard_predictions: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            mode: ScheduleMode::ConfidenceAwareDenoising {
                t_golden: 0.9,
                t_rand: 0.95,
            },
            strategy: DecayStrategy::LINEAR_DEFAULT,
            estimator: ConfidenceEstimator::Ptp,
            gate: GateIndex::Consumer,
            hard_predictions: false,
        }
    }
}

impl ScheduleConfig {
    pub fn teacher_forcing() -> Self {
        ScheduleConfig {
            mode: ScheduleMode::TeacherForcing,
            ..Default::default()
        }
    }

    pub fn with_mode(mode: ScheduleMode) -> Self {
        let mut c = ScheduleConfig {
            mode,
            ..Default::default()
        };
        if let ScheduleMode::VanillaSs(s) = mode {
            c.strategy = s;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.strategy.validate()?;
        self.estimator.validate()?;
        match self.mode {
            ScheduleMode::TeacherForcing => Ok(()),
            ScheduleMode::VanillaSs(s) => s.validate(),
            ScheduleMode::ConfidenceAware { t_golden } => check_threshold("t_golden", t_golden),
            ScheduleMode::ConfidenceAwareDenoising { t_golden, t_rand } => {
                check_threshold("t_golden", t_golden)?;
                check_threshold("t_rand", t_rand)?;
                if t_golden > t_rand {
                    return Err(Error::config(format!(
                        "t_golden ({t_golden}) must not exceed t_rand ({t_rand})"
                    )));
                }
                Ok(())
            }
        }
    }
}

fn check_threshold(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::config(format!("{name} = {v} outside [0, 1]")))
    }
}

/// Flat on-disk form of [`ScheduleConfig`].
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    #[serde(default = "default_mode")]
    pub mode: String,
    #[serde(default = "default_strategy")]
    pub strategy: String,
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub k: Option<f64>,
    #[serde(default)]
    pub b: Option<f64>,
    #[serde(default = "default_estimator")]
    pub estimator: String,
    #[serde(rename = "K", default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_mc_dropout")]
    pub mc_dropout: f64,
    #[serde(default)]
    pub sample_variance: bool,
    #[serde(default = "default_t_golden")]
    pub t_golden: f64,
    #[serde(default = "default_t_rand")]
    pub t_rand: f64,
    #[serde(default)]
    pub gate_index: GateIndex,
    #[serde(default)]
    pub hard_predictions: bool,
}

fn default_mode() -> String {
    "confidence_aware_denoising".into()
}
fn default_strategy() -> String {
    "linear".into()
}
fn default_estimator() -> String {
    "ptp".into()
}
fn default_samples() -> usize {
    5
}
fn default_mc_dropout() -> f64 {
    0.1
}
fn default_t_golden() -> f64 {
    0.9
}
fn default_t_rand() -> f64 {
    0.95
}

impl TryFrom<ScheduleSpec> for ScheduleConfig {
    type Error = Error;

    fn try_from(s: ScheduleSpec) -> Result<Self> {
        let strategy = match s.strategy.as_str() {
            "linear" => {
                let DecayStrategy::Linear { epsilon, k, b } = DecayStrategy::LINEAR_DEFAULT else {
                    unreachable!()
                };
                DecayStrategy::Linear {
                    epsilon: s.epsilon.unwrap_or(epsilon),
                    k: s.k.unwrap_or(k),
                    b: s.b.unwrap_or(b),
                }
            }
            "exponential" => DecayStrategy::Exponential {
                k: s.k.unwrap_or(0.99999),
            },
            "inverse_sigmoid" => DecayStrategy::InverseSigmoid {
                k: s.k.unwrap_or(20_000.0),
            },
            other => {
                return Err(Error::config(format!(
                    "schedule.strategy {other:?} (expected linear, exponential or inverse_sigmoid)"
                )))
            }
        };
        let estimator = match s.estimator.as_str() {
            "ptp" => ConfidenceEstimator::Ptp,
            "mc_expectation" => ConfidenceEstimator::McExpectation {
                samples: s.samples,
                dropout_rate: s.mc_dropout,
            },
            "mc_variance" => ConfidenceEstimator::McVariance {
                samples: s.samples,
                dropout_rate: s.mc_dropout,
                sample_variance: s.sample_variance,
            },
            other => {
                return Err(Error::config(format!(
                    "schedule.estimator {other:?} (expected ptp, mc_expectation or mc_variance)"
                )))
            }
        };
        let mode = match s.mode.as_str() {
            "teacher_forcing" => ScheduleMode::TeacherForcing,
            "vanilla_ss" => ScheduleMode::VanillaSs(strategy),
            "confidence_aware" => ScheduleMode::ConfidenceAware { t_golden: s.t_golden },
            "confidence_aware_denoising" => ScheduleMode::ConfidenceAwareDenoising {
                t_golden: s.t_golden,
                t_rand: s.t_rand,
            },
            other => {
                return Err(Error::config(format!(
                    "schedule.mode {other:?} (expected teacher_forcing, vanilla_ss, confidence_aware or confidence_aware_denoising)"
                )))
            }
        };
        let cfg = ScheduleConfig {
            mode,
            strategy,
            estimator,
            gate: s.gate_index,
            hard_predictions: s.hard_predictions,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl From<ScheduleConfig> for ScheduleSpec {
    fn from(c: ScheduleConfig) -> Self {
        let (epsilon, k, b) = match c.strategy {
            DecayStrategy::Linear { epsilon, k, b } => (Some(epsilon), Some(k), Some(b)),
            DecayStrategy::Exponential { k } | DecayStrategy::InverseSigmoid { k } => (None, Some(k), None),
        };
        let (estimator, samples, mc_dropout, sample_variance) = match c.estimator {
            ConfidenceEstimator::Ptp => ("ptp", default_samples(), default_mc_dropout(), false),
            ConfidenceEstimator::McExpectation { samples, dropout_rate } => {
                ("mc_expectation", samples, dropout_rate, false)
            }
            ConfidenceEstimator::McVariance {
                samples,
                dropout_rate,
                sample_variance,
            } => ("mc_variance", samples, dropout_rate, sample_variance),
        };
        let (t_golden, t_rand) = match c.mode {
            ScheduleMode::ConfidenceAware { t_golden } => (t_golden, default_t_rand()),
            ScheduleMode::ConfidenceAwareDenoising { t_golden, t_rand } => (t_golden, t_rand),
            _ => (default_t_golden(), default_t_rand()),
        };
        ScheduleSpec {
            mode: c.mode.name().into(),
            strategy: c.strategy.name().into(),
            epsilon,
            k,
            b,
            estimator: estimator.into(),
            samples,
            mc_dropout,
            sample_variance,
            t_golden,
            t_rand,
            gate_index: c.gate,
            hard_predictions: c.hard_predictions,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenClass {
    Golden,
    Predicted,
    /// Replaced by the given token of the same target sentence.
    Random(usize),
}

/// Per decoder-input position choice, row-major `[batch, len]`.
///
/// Only eligible positions (non-pad, after BOS) are ever non-golden; BOS and
/// padding are always `Golden` and excluded from the counts.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSelection {
    pub batch: usize,
    pub len: usize,
    pub classes: Vec<TokenClass>,
    pub eligible: Vec<bool>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SelectionCounts {
    pub golden: usize,
    pub predicted: usize,
    pub random: usize,
}

impl SelectionCounts {
    pub fn total(&self) -> usize {
        self.golden + self.predicted + self.random
    }

    pub fn add(&mut self, other: SelectionCounts) {
        self.golden += other.golden;
        self.predicted += other.predicted;
        self.random += other.random;
    }

    /// `(golden, predicted, random)` fractions of the total.
    pub fn fractions(&self) -> (f64, f64, f64) {
        let n = self.total();
        if n == 0 {
            return (1.0, 0.0, 0.0);
        }
        let n = n as f64;
        (
            self.golden as f64 / n,
            self.predicted as f64 / n,
            self.random as f64 / n,
        )
    }
}

/// Decoder-input positions that may be replaced: every non-pad position
/// except BOS.
pub fn eligible_positions(batch: &Batch) -> Vec<bool> {
    (0..batch.size * batch.tgt_len)
        .map(|i| i % batch.tgt_len != 0 && !batch.tgt_pad[i])
        .collect()
}

impl TokenSelection {
    pub fn all_golden(batch: &Batch) -> Self {
        TokenSelection {
            batch: batch.size,
            len: batch.tgt_len,
            classes: vec![TokenClass::Golden; batch.size * batch.tgt_len],
            eligible: eligible_positions(batch),
        }
    }

    pub fn counts(&self) -> SelectionCounts {
        let mut c = SelectionCounts::default();
        for (cls, &e) in self.classes.iter().zip(&self.eligible) {
            if !e {
                continue;
            }
            match cls {
                TokenClass::Golden => c.golden += 1,
                TokenClass::Predicted => c.predicted += 1,
                TokenClass::Random(_) => c.random += 1,
            }
        }
        c
    }

    pub fn has_predicted(&self) -> bool {
        self.classes.contains(&TokenClass::Predicted)
    }
}

/// Vanilla scheduled sampling: each eligible position independently keeps
/// the gold token with probability `keep`, otherwise takes the prediction.
/// One uniform draw is consumed per eligible position regardless of `keep`.
pub fn vanilla_sample_mask(keep: f64, batch: &Batch, rng: &mut ChaCha8Rng) -> TokenSelection {
    let mut sel = TokenSelection::all_golden(batch);
    for (cls, &e) in sel.classes.iter_mut().zip(&sel.eligible) {
        if e && rng.gen::<f64>() >= keep {
            *cls = TokenClass::Predicted;
        }
    }
    sel
}

/// Confidence from the already computed first pass.
pub fn confidence_ptp<T: Scalar>(pass1: &DecoderOutput<T>) -> Vec<f64> {
    pass1.gold_prob.iter().map(|p| p.as_f64()).collect()
}

/// Per-position running mean and population/sample variance (Welford).
/// Identical samples give their common value as the mean and zero variance
/// exactly.
pub fn mc_statistics(samples: &[Vec<f64>], sample_variance: bool) -> Result<(Vec<f64>, Vec<f64>)> {
    let Some(first) = samples.first() else {
        return Err(Error::config("Monte Carlo confidence needs K >= 1"));
    };
    let n = first.len();
    if samples.iter().any(|s| s.len() != n) {
        return Err(Error::contract("Monte Carlo samples differ in length"));
    }
    let mut mean = vec![0.0; n];
    let mut m2 = vec![0.0; n];
    for (k, s) in samples.iter().enumerate() {
        let count = (k + 1) as f64;
        for j in 0..n {
            let delta = s[j] - mean[j];
            mean[j] += delta / count;
            m2[j] += delta * (s[j] - mean[j]);
        }
    }
    let k = samples.len();
    let denom = if sample_variance && k > 1 { k - 1 } else { k } as f64;
    Ok((mean, m2.into_iter().map(|v| v / denom).collect()))
}

/// Confidence from gold-token probabilities of `K` dropout passes.
pub fn confidence_from_samples(estimator: &ConfidenceEstimator, samples: &[Vec<f64>]) -> Result<Vec<f64>> {
    match *estimator {
        ConfidenceEstimator::Ptp => Err(Error::contract("PTP confidence comes from the first pass")),
        ConfidenceEstimator::McExpectation { .. } => Ok(mc_statistics(samples, false)?.0),
        ConfidenceEstimator::McVariance { sample_variance, .. } => Ok(mc_statistics(samples, sample_variance)?
            .1
            .into_iter()
            .map(|v| 1.0 - v)
            .collect()),
    }
}

/// Runs `K` full forward passes with independent dropout masks drawn from
/// `rng` and turns the gold-token probabilities into confidence.
pub fn confidence_mc<T: Scalar>(
    estimator: &ConfidenceEstimator,
    model: &Transformer<T>,
    batch: &Batch,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    estimator.validate()?;
    let (samples, rate) = match *estimator {
        ConfidenceEstimator::Ptp => {
            return Err(Error::contract("PTP confidence comes from the first pass"))
        }
        ConfidenceEstimator::McExpectation { samples, dropout_rate }
        | ConfidenceEstimator::McVariance {
            samples, dropout_rate, ..
        } => (samples, dropout_rate),
    };
    let mut draws = Vec::with_capacity(samples);
    for _ in 0..samples {
        let mut fwd = Forward::new(model, false);
        let mut dropout = DropoutMode::On { rate, rng: &mut *rng };
        let memory = fwd.encode(batch, &mut dropout)?;
        let out = fwd.decode_pass1(memory, batch, &mut dropout, false)?;
        draws.push(confidence_ptp(&out));
    }
    confidence_from_samples(estimator, &draws)
}

/// Confidence-aware selection. `conf` holds one value per decoder output
/// position (`[batch, len]`); input position `j` is gated by `conf[j]`
/// ([`GateIndex::Consumer`]) or `conf[j - 1]` ([`GateIndex::Producer`]).
///
/// Random replacements are drawn uniformly from the sentence's own
/// non-reserved target tokens; a sentence without any falls back to gold.
pub fn select_tokens(
    conf: &[f64],
    config: &ScheduleConfig,
    batch: &Batch,
    rng: &mut ChaCha8Rng,
) -> Result<TokenSelection> {
    config.validate()?;
    if conf.len() != batch.size * batch.tgt_len {
        return Err(Error::contract(format!(
            "confidence has {} entries for a [{}, {}] batch",
            conf.len(),
            batch.size,
            batch.tgt_len
        )));
    }
    let (t_golden, t_rand) = match config.mode {
        ScheduleMode::TeacherForcing => return Ok(TokenSelection::all_golden(batch)),
        ScheduleMode::VanillaSs(_) => {
            return Err(Error::contract("vanilla scheduled sampling does not use confidence"))
        }
        ScheduleMode::ConfidenceAware { t_golden } => (t_golden, None),
        ScheduleMode::ConfidenceAwareDenoising { t_golden, t_rand } => (t_golden, Some(t_rand)),
    };
    let mut sel = TokenSelection::all_golden(batch);
    let len = batch.tgt_len;
    for r in 0..batch.size {
        let pool: Vec<usize> = batch
            .target_tokens(r)
            .iter()
            .copied()
            .filter(|&t| !is_reserved(t))
            .collect();
        for j in 1..len {
            let i = r * len + j;
            if !sel.eligible[i] {
                continue;
            }
            let c = match config.gate {
                GateIndex::Consumer => conf[i],
                GateIndex::Producer => conf[i - 1],
            };
            sel.classes[i] = if c <= t_golden {
                TokenClass::Golden
            } else if t_rand.is_none_or(|tr| c <= tr) {
                TokenClass::Predicted
            } else if pool.is_empty() {
                TokenClass::Golden
            } else {
                TokenClass::Random(pool[rng.gen_range(0..pool.len())])
            };
        }
    }
    Ok(sel)
}

/// Second-pass input embeddings: gold rows at golden positions, the first
/// pass's (soft or argmax) prediction for the previous step at predicted
/// positions, and the replacement token's row at random positions.
pub fn build_mixed_input<T: Scalar>(
    fwd: &mut Forward<'_, T>,
    selection: TokenSelection,
    batch: &Batch,
    pass1: Option<&DecoderOutput<T>>,
    hard_predictions: bool,
) -> Result<MixedInput> {
    let (b, len) = (batch.size, batch.tgt_len);
    if selection.batch != b || selection.len != len {
        return Err(Error::contract("selection and batch shapes differ"));
    }
    let predicted = selection.has_predicted();
    if predicted && pass1.is_none() {
        return Err(Error::contract("predicted positions need a first pass"));
    }
    let mut ids = batch.tgt_in.clone();
    for (i, cls) in selection.classes.iter().enumerate() {
        match *cls {
            TokenClass::Random(tok) => ids[i] = tok,
            TokenClass::Predicted if hard_predictions => {
                let probs = fwd.tape.value(pass1.unwrap().probs).data();
                let vocab = probs.len() / (b * len);
                let row = &probs[(i - 1) * vocab..i * vocab];
                let mut best = 0;
                for (v, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = v;
                    }
                }
                ids[i] = best;
            }
            _ => {}
        }
    }
    let gold = fwd.embed_target(&ids, b, len)?;
    let embeddings = if predicted && !hard_predictions {
        let pass1 = pass1.unwrap();
        let soft = fwd.soft_prediction_embeddings(pass1.probs)?;
        let d = fwd.tape.shape(soft)[2];
        let flat = fwd.tape.reshape(soft, &[b * len, d])?;
        // input position j reads the prediction made at output position j - 1
        let shift: Vec<usize> = (0..b * len).map(|i| if i % len == 0 { i } else { i - 1 }).collect();
        let shifted = fwd.tape.embedding(flat, &shift, &[b, len])?;
        let cond: Vec<bool> = selection
            .classes
            .iter()
            .map(|c| *c == TokenClass::Predicted)
            .collect();
        fwd.tape.where_rows(&cond, shifted, gold)?
    } else {
        gold
    };
    Ok(MixedInput {
        embeddings,
        selection,
    })
}
