//! Run configuration and the `train`, `eval` and `compare` commands.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use confss::eval::{evaluate, evaluate_in_range, DecodeMode, EvalReport};
use confss::model::Container;
use confss::rng::expansion_scheme;
use confss::tasks::Splits;
use confss::train::{
    read_metrics, run_until, steps_to_threshold, MetricRecord, MetricsWriter, TrainObserver, TrainState,
};
use confss::{Dataset, ModelConfig, Scalar, ScheduleConfig, SyntheticTask, TrainConfig, Transformer};

/// Environment variable that, when set, prefixes relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "CONFSS_OUTPUT_ROOT";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: SyntheticTask,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    /// Master seed; every random stream is derived from it.
    pub seed: u64,
    pub precision: Precision,
    pub output_dir: PathBuf,
    /// Decoding used for the final test-set report.
    pub final_decode: DecodeMode,
    /// Written for reference; ignored on input.
    pub rng_expansion: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: SyntheticTask::default(),
            model: ModelConfig::default(),
            schedule: ScheduleConfig::default(),
            train: TrainConfig::default(),
            seed: 1,
            precision: Precision::F32,
            output_dir: PathBuf::from("runs/default"),
            final_decode: DecodeMode::FINAL,
            rng_expansion: expansion_scheme(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.task.validate().context("task")?;
        self.model.validate().context("model")?;
        self.schedule.validate().context("schedule")?;
        self.train.validate().context("train")?;
        if self.model.src_vocab < self.task.vocab_size || self.model.tgt_vocab < self.task.vocab_size {
            bail!(
                "model.src_vocab/model.tgt_vocab ({}/{}) must cover task.vocab_size ({})",
                self.model.src_vocab,
                self.model.tgt_vocab,
                self.task.vocab_size
            );
        }
        if self.model.max_len < self.task.max_len + 1 {
            bail!(
                "model.max_len ({}) must be at least task.max_len + 1 ({})",
                self.model.max_len,
                self.task.max_len + 1
            );
        }
        if let DecodeMode::Beam { beam_size: 0, .. } = self.final_decode {
            bail!("final_decode.beam_size must be at least 1");
        }
        Ok(())
    }

    /// Output directory, under `$CONFSS_OUTPUT_ROOT` when it is relative and
    /// the variable is set.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => Path::new(&root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }
}

/// Sets `path` (dot-separated) in `root` to `value`, creating objects on the way.
pub fn set_dotted(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        bail!("malformed override key {path:?}");
    }
    let mut cur = root;
    for (i, key) in keys.iter().enumerate() {
        if !cur.is_object() {
            bail!("override {path:?}: {} is not an object", keys[..i].join("."));
        }
        let obj = cur.as_object_mut().unwrap();
        if i == keys.len() - 1 {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!()
}

/// Parses an override value as JSON, falling back to a plain string.
pub fn parse_override_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Reads the config file (if any), applies overrides and fills defaults.
pub fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut raw = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("cannot read config file {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("config file {} is not valid JSON", p.display()))?
        }
        None => Value::Object(Map::new()),
    };
    if !raw.is_object() {
        bail!("config must be a JSON object");
    }
    for (k, v) in overrides {
        set_dotted(&mut raw, k, parse_override_value(v))?;
    }
    if let Some(obj) = raw.as_object_mut() {
        obj.remove("rng_expansion");
    }
    let cfg: RunConfig = serde_json::from_value(raw).map_err(|e| anyhow!("invalid config: {e}"))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Splits `--key value` / `--key=value` pairs.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let Some(key) = a.strip_prefix("--") else {
            bail!("expected --key value, found {a:?}");
        };
        match key.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                let v = it.next().ok_or_else(|| anyhow!("override --{key} has no value"))?;
                out.push((key.to_string(), v.clone()));
            }
        }
    }
    Ok(out)
}

/// Summary of a finished `train` command.
#[derive(Clone, Debug, Serialize)]
pub struct TrainOutcome {
    pub output_dir: PathBuf,
    pub steps: u64,
    pub final_record: Option<MetricRecord>,
    pub test: EvalReport,
}

struct FileObserver {
    metrics: MetricsWriter,
    dir: PathBuf,
    every: Option<u64>,
}

impl<T: Scalar> TrainObserver<T> for FileObserver {
    fn on_record(&mut self, record: &MetricRecord) -> confss::Result<()> {
        self.metrics.write(record)
    }

    fn on_checkpoint(&mut self, state: &TrainState<T>) -> confss::Result<()> {
        if self.every.is_some_and(|c| state.step.is_multiple_of(c)) {
            state.save(&self.dir.join(format!("checkpoints/step_{:06}.state", state.step)))?;
        }
        state.save(&self.dir.join("state.ckpt"))?;
        state.model.save(&self.dir.join("model.ckpt"))
    }
}

pub fn generate_data(cfg: &RunConfig) -> Result<Splits> {
    Ok(cfg.task.generate()?)
}

/// Runs (or resumes) training as configured, writing into the output
/// directory: `config.json`, `{train,valid,test}.txt`, `metrics.jsonl`,
/// `state.ckpt`, `model.ckpt` and `test_eval.json`.
pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    match cfg.precision {
        Precision::F32 => train_impl::<f32>(cfg, resume),
        Precision::F64 => train_impl::<f64>(cfg, resume),
    }
}

fn train_impl<T: Scalar>(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    let dir = cfg.resolved_output_dir();
    fs::create_dir_all(dir.join("checkpoints")).with_context(|| format!("cannot create {}", dir.display()))?;
    let resolved = RunConfig {
        rng_expansion: expansion_scheme(),
        ..cfg.clone()
    };
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(&resolved)? + "\n")?;

    let splits = generate_data(cfg)?;
    splits.train.save(&dir.join("train.txt"))?;
    splits.valid.save(&dir.join("valid.txt"))?;
    splits.test.save(&dir.join("test.txt"))?;

    let metrics_path = dir.join("metrics.jsonl");
    let mut state = match resume {
        Some(p) => {
            let mut s = TrainState::<T>::load(p).with_context(|| format!("cannot resume from {}", p.display()))?;
            if s.model.config() != &cfg.model {
                bail!("checkpoint {} was trained with a different model config", p.display());
            }
            if s.schedule != cfg.schedule {
                // a teacher-forcing checkpoint can branch into any schedule
                if s.step > cfg.train.phase1_steps {
                    bail!(
                        "checkpoint {} is past step {} and was trained with a different schedule",
                        p.display(),
                        cfg.train.phase1_steps
                    );
                }
                s.schedule = cfg.schedule.clone();
            }
            s
        }
        None => TrainState::<T>::new(cfg.model.clone(), cfg.schedule.clone(), &cfg.train, cfg.seed)?,
    };
    let mut metrics = MetricsWriter::create(&metrics_path)?;
    for r in &state.history {
        metrics.write(r)?;
    }
    let mut observer = FileObserver {
        metrics,
        dir: dir.clone(),
        every: cfg.train.checkpoint_every,
    };
    run_until(
        &mut state,
        &cfg.train,
        &splits.train,
        &splits.valid,
        cfg.train.total_steps(),
        &mut observer,
    )?;
    if state.step == 0 {
        TrainObserver::<T>::on_checkpoint(&mut observer, &state)?;
    }
    let test = evaluate_in_range(&state.model, &splits.test, cfg.final_decode, cfg.task.min_len, cfg.task.max_len)?;
    fs::write(dir.join("test_eval.json"), serde_json::to_string_pretty(&test)? + "\n")?;
    Ok(TrainOutcome {
        output_dir: dir,
        steps: state.step,
        final_record: state.history.iter().rev().find(|r| r.event.is_none()).cloned(),
        test,
    })
}

/// Loads a model or training-state checkpoint, decodes `dataset` and
/// returns the report.
pub fn cmd_eval(checkpoint: &Path, dataset: &Path, mode: DecodeMode) -> Result<EvalReport> {
    let container =
        Container::read(checkpoint).with_context(|| format!("cannot load checkpoint {}", checkpoint.display()))?;
    let data = Dataset::load(dataset).with_context(|| format!("cannot load dataset {}", dataset.display()))?;
    match container.header.get("scalar").and_then(Value::as_str) {
        Some("f64") => eval_impl::<f64>(&container, &data, mode, checkpoint),
        _ => eval_impl::<f32>(&container, &data, mode, checkpoint),
    }
}

fn eval_impl<T: Scalar>(c: &Container, data: &Dataset, mode: DecodeMode, path: &Path) -> Result<EvalReport> {
    let model = Transformer::<T>::from_container(c).with_context(|| format!("checkpoint {}", path.display()))?;
    if let Some(t) = data.max_token() {
        let cfg = model.config();
        if t >= cfg.src_vocab.min(cfg.tgt_vocab) {
            bail!("dataset token {t} is outside the model vocabulary");
        }
    }
    if data.is_empty() {
        bail!("dataset is empty");
    }
    Ok(evaluate(&model, data, mode)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    SeqAcc,
    TokenAcc,
    Bleu,
}

impl Metric {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "val_seq_acc" | "seq_acc" => Ok(Metric::SeqAcc),
            "val_token_acc" | "token_acc" => Ok(Metric::TokenAcc),
            "val_bleu" | "bleu" => Ok(Metric::Bleu),
            other => bail!("unknown metric {other:?} (expected val_seq_acc, val_token_acc or val_bleu)"),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::SeqAcc => "val_seq_acc",
            Metric::TokenAcc => "val_token_acc",
            Metric::Bleu => "val_bleu",
        }
    }

    fn get(self, r: &MetricRecord) -> Option<f64> {
        match self {
            Metric::SeqAcc => r.val_seq_acc,
            Metric::TokenAcc => r.val_token_acc,
            Metric::Bleu => r.val_bleu,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareRow {
    pub file: String,
    pub final_step: Option<u64>,
    pub final_metric: Option<f64>,
    pub final_val_seq_acc: Option<f64>,
    pub final_val_token_acc: Option<f64>,
    pub final_val_bleu: Option<f64>,
    pub steps_to_threshold: Option<u64>,
    /// Steps the first run needed divided by the steps this run needed.
    pub speedup: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    pub metric: String,
    pub threshold: f64,
    pub runs: Vec<CompareRow>,
}

/// Steps-to-threshold and final metrics of each metrics file. Without an
/// explicit threshold the first file's final value is used.
pub fn cmd_compare(files: &[PathBuf], metric: Metric, threshold: Option<f64>) -> Result<Comparison> {
    if files.is_empty() {
        bail!("compare needs at least one metrics file");
    }
    let histories = files
        .iter()
        .map(|f| read_metrics(f).with_context(|| format!("metrics file {}", f.display())))
        .collect::<Result<Vec<_>>>()?;
    let last_with = |h: &[MetricRecord]| h.iter().rev().find(|r| metric.get(r).is_some()).cloned();
    let threshold = match threshold {
        Some(t) => t,
        None => last_with(&histories[0])
            .and_then(|r| metric.get(&r))
            .ok_or_else(|| anyhow!("{} has no {} values", files[0].display(), metric.name()))?,
    };
    let steps: Vec<Option<u64>> = histories
        .iter()
        .map(|h| {
            let curve: Vec<(u64, f64)> = h.iter().filter_map(|r| metric.get(r).map(|v| (r.step, v))).collect();
            steps_to_threshold(&curve, threshold)
        })
        .collect();
    let runs = files
        .iter()
        .zip(&histories)
        .zip(&steps)
        .map(|((f, h), &s)| {
            let last = last_with(h);
            CompareRow {
                file: f.display().to_string(),
                final_step: last.as_ref().map(|r| r.step),
                final_metric: last.as_ref().and_then(|r| metric.get(r)),
                final_val_seq_acc: last.as_ref().and_then(|r| r.val_seq_acc),
                final_val_token_acc: last.as_ref().and_then(|r| r.val_token_acc),
                final_val_bleu: last.as_ref().and_then(|r| r.val_bleu),
                steps_to_threshold: s,
                speedup: match (steps[0], s) {
                    (Some(a), Some(b)) if b > 0 => Some(a as f64 / b as f64),
                    _ => None,
                },
            }
        })
        .collect();
    Ok(Comparison {
        metric: metric.name().into(),
        threshold,
        runs,
    })
}

fn cell(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.digits$}"))
}

/// Aligned text table of a comparison.
pub fn format_table(c: &Comparison) -> String {
    let header = [
        "run".to_string(),
        format!("final {}", c.metric),
        "seq_acc".into(),
        "token_acc".into(),
        "bleu".into(),
        format!("steps to {:.4}", c.threshold),
        "speedup".into(),
    ];
    let rows: Vec<[String; 7]> = c
        .runs
        .iter()
        .map(|r| {
            [
                r.file.clone(),
                cell(r.final_metric, 4),
                cell(r.final_val_seq_acc, 4),
                cell(r.final_val_token_acc, 4),
                cell(r.final_val_bleu, 2),
                r.steps_to_threshold.map_or_else(|| "never".into(), |s| s.to_string()),
                cell(r.speedup, 2),
            ]
        })
        .collect();
    let mut widths = header.clone().map(|h| h.len());
    for row in &rows {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    for row in std::iter::once(&header).chain(&rows) {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, &w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        writeln!(out, "{}", line.join("  ").trim_end()).unwrap();
    }
    out
}

/// JSON form used by the command line for `compare`.
pub fn comparison_json(c: &Comparison) -> Value {
    json!(c)
}
