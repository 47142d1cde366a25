//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion and a
//! summary. Failures are reported, not raised: the process exits non-zero
//! only when `CONFSS_ACCEPTANCE_STRICT=1` is set. Positional arguments filter
//! criteria by substring, e.g. `cargo test --test acceptance -- determinism`.
//!
//! The desk-scale behavioral check trains 5 seeds × 2 schedules and takes
//! most of the runtime.

use std::fmt::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use confss::model::{DropoutMode, Forward};
use confss::schedule::{confidence_mc, confidence_ptp, select_tokens};
use confss::train::{compute_gradients, run_until};
use confss::{
    corpus_bleu, Batch, ConfidenceEstimator, DecayStrategy, ModelConfig, Pair, RngStreams, ScheduleConfig,
    ScheduleMode, SyntheticTask, TaskVariant, TokenClass, TrainConfig, TrainState, Transformer, Transformer64,
};
use confss_cli::{cmd_compare, cmd_train, format_table, load_config, Metric, RunConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn schedule_curves() -> Result<String, String> {
    // (strategy, step, expected); high-precision reference values
    let k_ln_k = 20_000.0 * 20_000f64.ln();
    let points = [
        (DecayStrategy::LINEAR_DEFAULT, 0.0, 1.0),
        (DecayStrategy::LINEAR_DEFAULT, 16_000.0, 0.2),
        (DecayStrategy::EXPONENTIAL_DEFAULT, 0.0, 1.0),
        (DecayStrategy::EXPONENTIAL_DEFAULT, 200_000.0, 0.135_333_929_881_524_7),
        (DecayStrategy::INVERSE_SIGMOID_DEFAULT, 0.0, 0.999_950_002_499_875),
        (DecayStrategy::INVERSE_SIGMOID_DEFAULT, k_ln_k, 0.5),
    ];
    let mut worst: f64 = 0.0;
    for (s, i, want) in points {
        let got = s.probability_at(i);
        ensure((got - want).abs() < 1e-9, || format!("{} at {i}: {got} != {want}", s.name()))?;
        worst = worst.max((got - want).abs());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for s in [
        DecayStrategy::LINEAR_DEFAULT,
        DecayStrategy::EXPONENTIAL_DEFAULT,
        DecayStrategy::INVERSE_SIGMOID_DEFAULT,
    ] {
        for _ in 0..10_000 {
            let a: u64 = rng.gen_range(0..1_000_000);
            let b: u64 = rng.gen_range(0..1_000_000);
            let (lo, hi) = (a.min(b), a.max(b));
            ensure(s.probability(hi) <= s.probability(lo), || {
                format!("{} increases between {lo} and {hi}", s.name())
            })?;
        }
    }
    Ok(format!(
        "6 points within {worst:.1e}; 3×10^4 step pairs non-increasing; f(198070) = {:.11}",
        DecayStrategy::INVERSE_SIGMOID_DEFAULT.probability(198_070)
    ))
}

fn fd_batch() -> Batch {
    let pairs = [
        Pair { src: vec![3, 4, 5, 6, 7], tgt: vec![7, 6, 5, 4, 3] },
        Pair { src: vec![8, 9], tgt: vec![9, 8] },
        Pair { src: vec![10, 11, 12], tgt: vec![12, 11, 10] },
    ];
    Batch::from_pairs(&pairs.iter().collect::<Vec<_>>()).unwrap()
}

fn gradient_integrity() -> Result<String, String> {
    let config = ModelConfig {
        src_vocab: 16,
        tgt_vocab: 16,
        dropout_rate: 0.0,
        max_len: 16,
        ..ModelConfig::default()
    };
    let mut model = Transformer64::new(config, 3).map_err(|e| e.to_string())?;
    let batch = fd_batch();
    let cfg = TrainConfig::default();
    let tf = ScheduleConfig::teacher_forcing();
    let loss = |m: &Transformer64| {
        compute_gradients(m, &mut RngStreams::new(0), &batch, &tf.mode, &tf, &cfg, 0).unwrap().0
    };
    let (_, grads, _) =
        compute_gradients(&model, &mut RngStreams::new(0), &batch, &tf.mode, &tf, &cfg, 0).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let h = 1e-5;
    let (mut checked, mut worst) = (0, 0.0f64);
    while checked < 25 {
        let p = rng.gen_range(0..model.params().len());
        let i = rng.gen_range(0..model.params()[p].len());
        let analytic = grads[p][i];
        if analytic.abs() < 1e-7 {
            continue;
        }
        let orig = model.params()[p].data()[i];
        model.params_mut()[p].data_mut()[i] = orig + h;
        let up = loss(&model);
        model.params_mut()[p].data_mut()[i] = orig - h;
        let down = loss(&model);
        model.params_mut()[p].data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max((numeric - analytic).abs() / numeric.abs().max(analytic.abs()));
        checked += 1;
    }
    ensure(worst < 1e-4, || format!("worst relative error {worst:.3e}"))?;
    Ok(format!("{checked} parameters, worst relative error {worst:.2e}"))
}

fn small_task() -> SyntheticTask {
    SyntheticTask {
        variant: TaskVariant::Reverse,
        vocab_size: 32,
        min_len: 5,
        max_len: 20,
        train_size: 2_000,
        valid_size: 50,
        test_size: 50,
        ..SyntheticTask::default()
    }
}

fn degeneracy_losses(mode: ScheduleMode) -> Vec<f64> {
    let splits = small_task().generate().unwrap();
    let model = ModelConfig {
        d_model: 32,
        d_ff: 64,
        dropout_rate: 0.0,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        phase1_steps: 0,
        phase2_steps: 100,
        batch_size: 16,
        log_every: 1,
        eval_every: 1_000,
        ..TrainConfig::default()
    };
    let mut state = TrainState::<f32>::new(model, ScheduleConfig::with_mode(mode), &cfg, 5).unwrap();
    let mut records = Vec::new();
    run_until(&mut state, &cfg, &splits.train, &splits.valid, 100, &mut records).unwrap();
    records.iter().filter_map(|r| r.loss).collect()
}

fn degeneracies() -> Result<String, String> {
    let tf = degeneracy_losses(ScheduleMode::TeacherForcing);
    ensure(tf.len() == 100, || format!("{} losses", tf.len()))?;
    let ca = degeneracy_losses(ScheduleMode::ConfidenceAware { t_golden: 1.0 });
    let ss = degeneracy_losses(ScheduleMode::VanillaSs(DecayStrategy::Linear {
        epsilon: 1.0,
        k: -5e-5,
        b: 1.0,
    }));
    let first_diff = |other: &[f64]| tf.iter().zip(other).position(|(a, b)| a.to_bits() != b.to_bits());
    ensure(first_diff(&ca).is_none() && ca.len() == 100, || {
        format!("ConfidenceAware(1.0) differs at step {:?}", first_diff(&ca))
    })?;
    ensure(first_diff(&ss).is_none() && ss.len() == 100, || {
        format!("VanillaSS(f=1) differs at step {:?}", first_diff(&ss))
    })?;
    Ok(format!("100 identical losses each (last {:.6})", tf[99]))
}

fn estimator_consistency() -> Result<String, String> {
    let config = ModelConfig {
        d_model: 32,
        d_ff: 64,
        dropout_rate: 0.1,
        ..ModelConfig::default()
    };
    let model = Transformer::<f32>::new(config, 4).map_err(|e| e.to_string())?;
    let splits = small_task().generate().map_err(|e| e.to_string())?;
    let pairs: Vec<&Pair> = splits.train.pairs.iter().take(24).collect();
    let batch = Batch::from_pairs(&pairs).map_err(|e| e.to_string())?;

    let mut fwd = Forward::new(&model, false);
    let memory = fwd.encode(&batch, &mut DropoutMode::Off).unwrap();
    let pass1 = fwd.decode_pass1(memory, &batch, &mut DropoutMode::Off, false).unwrap();
    let ptp = confidence_ptp(&pass1);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let expectation = ConfidenceEstimator::McExpectation {
        samples: 5,
        dropout_rate: 0.0,
    };
    let variance = ConfidenceEstimator::McVariance {
        samples: 5,
        dropout_rate: 0.0,
        sample_variance: false,
    };
    let mean = confidence_mc(&expectation, &model, &batch, &mut rng).map_err(|e| e.to_string())?;
    let var = confidence_mc(&variance, &model, &batch, &mut rng).map_err(|e| e.to_string())?;
    let mismatch = ptp.iter().zip(&mean).filter(|(a, b)| a.to_bits() != b.to_bits()).count();
    ensure(mismatch == 0, || format!("McExpectation differs from PTP at {mismatch} positions"))?;
    let not_one = var.iter().filter(|&&v| v != 1.0).count();
    ensure(not_one == 0, || format!("McVariance is not 1.0 at {not_one} positions"))?;
    Ok(format!("{} positions exact", ptp.len()))
}

fn selection_partition() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let class_id = |c: &TokenClass| match c {
        TokenClass::Golden => 0,
        TokenClass::Predicted => 1,
        TokenClass::Random(_) => 2,
    };
    for case in 0..10_000 {
        let rows = rng.gen_range(1..5);
        let pairs: Vec<Pair> = (0..rows)
            .map(|_| {
                let n = rng.gen_range(1..10);
                let tgt: Vec<usize> = (0..n).map(|_| rng.gen_range(3..32)).collect();
                Pair { src: tgt.clone(), tgt }
            })
            .collect();
        let batch = Batch::from_pairs(&pairs.iter().collect::<Vec<_>>()).unwrap();
        let conf: Vec<f64> = (0..batch.size * batch.tgt_len).map(|_| rng.gen()).collect();
        let mut ts: Vec<f64> = (0..3).map(|_| rng.gen()).collect();
        ts.sort_by(f64::total_cmp);
        let (lo, mid, hi) = (ts[0], ts[1], ts[2]);
        let select = |mode: ScheduleMode, rng: &mut ChaCha8Rng| {
            select_tokens(&conf, &ScheduleConfig::with_mode(mode), &batch, rng).unwrap()
        };
        let a = select(ScheduleMode::ConfidenceAwareDenoising { t_golden: lo, t_rand: hi }, &mut rng);
        let b = select(ScheduleMode::ConfidenceAwareDenoising { t_golden: mid, t_rand: hi }, &mut rng);
        let c = select(ScheduleMode::ConfidenceAwareDenoising { t_golden: lo, t_rand: mid }, &mut rng);
        let two = select(ScheduleMode::ConfidenceAware { t_golden: lo }, &mut rng);

        let non_pad = batch.tgt_pad.iter().filter(|&&p| !p).count();
        for sel in [&a, &b, &c, &two] {
            let counts = sel.counts();
            let eligible = sel.eligible.iter().filter(|&&e| e).count();
            ensure(counts.total() == eligible && eligible + batch.size == non_pad, || {
                format!("case {case}: classes do not partition the non-pad positions")
            })?;
            for (i, cls) in sel.classes.iter().enumerate() {
                if let TokenClass::Random(t) = cls {
                    ensure(batch.target_tokens(i / batch.tgt_len).contains(t), || {
                        format!("case {case}: replacement {t} not from the sentence")
                    })?;
                }
                ensure(sel.eligible[i] || *cls == TokenClass::Golden, || {
                    format!("case {case}: BOS or pad position {i} not golden")
                })?;
            }
        }
        ensure(two.counts().random == 0, || format!("case {case}: random class in two-interval mode"))?;
        for i in 0..conf.len() {
            let (ca, cb, cc) = (class_id(&a.classes[i]), class_id(&b.classes[i]), class_id(&c.classes[i]));
            // raising t_golden only turns positions golden
            ensure(ca == 0 || cb == 0 || cb == ca, || format!("case {case}: t_golden monotonicity at {i}"))?;
            ensure(!(ca == 0 && cb != 0), || format!("case {case}: golden lost at {i}"))?;
            // lowering t_rand only turns predicted positions random
            ensure(cc == ca || (ca == 1 && cc == 2), || format!("case {case}: t_rand monotonicity at {i}"))?;
            ensure(class_id(&two.classes[i]) == ca.min(1), || format!("case {case}: two-interval mismatch at {i}"))?;
        }
    }
    Ok("10^4 random cases".into())
}

fn bleu_oracle() -> Result<String, String> {
    let identity = vec![vec![3, 4, 5, 6, 7], vec![8, 9, 10, 11]];
    let one = corpus_bleu(&identity, &identity).map_err(|e| e.to_string())?;
    ensure(one == 1.0, || format!("identity corpus gives {one}"))?;
    let cands = vec![vec![3; 7], vec![10, 11, 12, 13, 14]];
    let refs = vec![vec![3, 4, 5, 6, 3, 7], vec![10, 11, 12, 13, 14]];
    let got = corpus_bleu(&cands, &refs).map_err(|e| e.to_string())?;
    let want = 0.413_258_409_189_690_06;
    ensure((got - want).abs() < 1e-9, || format!("clipping example {got} != {want}"))?;
    Ok(format!("identity 1.0, clipping example {got:.12}"))
}

const DESK_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn desk_config(dir: &Path, seed: u64, mode: &str) -> RunConfig {
    let mut o: Vec<(String, String)> = [
        ("task.variant", "reverse"),
        ("model.d_model", "32"),
        ("model.d_ff", "64"),
        ("model.n_heads", "4"),
        ("model.n_encoder_layers", "2"),
        ("model.n_decoder_layers", "2"),
        ("train.phase1_steps", "2000"),
        ("train.phase2_steps", "8000"),
        ("train.batch_size", "32"),
        ("train.warmup_steps", "2000"),
        ("train.valid_limit", "200"),
        ("train.eval_every", "500"),
        ("train.checkpoint_every", "2000"),
        ("final_decode", r#"{"kind":"greedy"}"#),
        ("schedule.mode", mode),
    ]
    .iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect();
    if mode == "confidence_aware_denoising" {
        o.push(("schedule.t_golden".into(), "0.9".into()));
        o.push(("schedule.t_rand".into(), "0.95".into()));
    }
    o.push(("seed".into(), seed.to_string()));
    o.push(("output_dir".into(), dir.display().to_string()));
    load_config(None, &o).unwrap()
}

fn desk_scale() -> Result<String, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut detail = String::new();
    let (mut within, mut longer) = (0, 0);
    let mut speedups = Vec::new();
    writeln!(detail).unwrap();
    for seed in DESK_SEEDS {
        let started = Instant::now();
        let tf_dir = tmp.path().join(format!("s{seed}/tf"));
        let ca_dir = tmp.path().join(format!("s{seed}/ca"));
        let tf = cmd_train(&desk_config(&tf_dir, seed, "teacher_forcing"), None).map_err(|e| format!("{e:#}"))?;
        // both arms share teacher-forcing pretraining
        let branch = tf_dir.join("checkpoints/step_002000.state");
        let ca = cmd_train(&desk_config(&ca_dir, seed, "confidence_aware_denoising"), Some(&branch))
            .map_err(|e| format!("{e:#}"))?;
        let long_tf = tf.test.buckets.last().unwrap().scores.seq_acc;
        let long_ca = ca.test.buckets.last().unwrap().scores.seq_acc;
        let ok_i = ca.test.overall.seq_acc >= tf.test.overall.seq_acc - 0.01;
        within += ok_i as usize;
        longer += (long_ca > long_tf) as usize;
        let cmp = cmd_compare(
            &[tf_dir.join("metrics.jsonl"), ca_dir.join("metrics.jsonl")],
            Metric::SeqAcc,
            None,
        )
        .map_err(|e| format!("{e:#}"))?;
        if let Some(s) = cmp.runs[1].speedup {
            speedups.push(s);
        }
        writeln!(
            detail,
            "    seed {seed}: test seq_acc tf {:.3} ca {:.3}{}; longest bucket tf {long_tf:.3} ca {long_ca:.3}; {:.0}s",
            tf.test.overall.seq_acc,
            ca.test.overall.seq_acc,
            if ok_i { "" } else { " (below tf - 1pt)" },
            started.elapsed().as_secs_f64()
        )
        .unwrap();
        let table = format_table(&cmp).replace(&tmp.path().display().to_string(), "");
        for line in table.lines() {
            writeln!(detail, "      {line}").unwrap();
        }
    }
    let mean_speedup = if speedups.is_empty() {
        "n/a".to_string()
    } else {
        format!("{:.2}", speedups.iter().sum::<f64>() / speedups.len() as f64)
    };
    let summary = format!(
        "(i) {within}/5 seeds within 1pt of teacher forcing; (ii) {longer}/5 seeds better on the longest bucket; \
         mean steps-to-threshold speedup {mean_speedup} over {} seeds reaching it",
        speedups.len()
    );
    if within == DESK_SEEDS.len() && longer >= 3 {
        Ok(summary + &detail)
    } else {
        Err(summary + &detail)
    }
}

fn determinism() -> Result<String, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = |name: &str| {
        let mut cfg = desk_config(&tmp.path().join(name), 7, "confidence_aware_denoising");
        cfg.task.train_size = 500;
        cfg.task.valid_size = 50;
        cfg.task.test_size = 50;
        cfg.train.phase1_steps = 100;
        cfg.train.phase2_steps = 200;
        cfg.train.eval_every = 100;
        cfg.train.checkpoint_every = None;
        cmd_train(&cfg, None).map_err(|e| format!("{e:#}"))?;
        std::fs::read(tmp.path().join(name).join("metrics.jsonl")).map_err(|e| e.to_string())
    };
    let a = run("a")?;
    let b = run("b")?;
    ensure(a == b, || "metrics files differ".into())?;
    Ok(format!("{} identical bytes", a.len()))
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let checks: [(&str, Check); 8] = [
        ("schedule_curves", schedule_curves),
        ("gradient_integrity", gradient_integrity),
        ("degeneracy_equivalences", degeneracies),
        ("estimator_consistency", estimator_consistency),
        ("selection_partition", selection_partition),
        ("bleu_oracle", bleu_oracle),
        ("desk_scale_behavior", desk_scale),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    let mut ran = 0;
    for (name, check) in checks {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let started = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("acceptance PASS {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("acceptance FAIL {name} ({secs:.1}s): {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    let strict = std::env::var("CONFSS_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if failed > 0 && strict {
        std::process::exit(1);
    }
}
