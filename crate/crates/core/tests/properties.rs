use confss::schedule::{select_tokens, vanilla_sample_mask};
use confss::{
    evaluate, Batch, DecayStrategy, DecodeMode, ModelConfig, Pair, ScheduleConfig, ScheduleMode, SyntheticTask,
    TaskVariant, TokenClass, Transformer32,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn strategies() -> impl Strategy<Value = DecayStrategy> {
    prop_oneof![
        (0.0..1.0f64, -1e-3..-1e-7f64, 0.0..=1.0f64).prop_map(|(e, k, b)| DecayStrategy::Linear { epsilon: e, k, b }),
        (0.9..0.999_999_9f64).prop_map(|k| DecayStrategy::Exponential { k }),
        (1.0..1e5f64).prop_map(|k| DecayStrategy::InverseSigmoid { k }),
    ]
}

fn batches() -> impl Strategy<Value = Batch> {
    prop::collection::vec(prop::collection::vec(3usize..20, 1..9), 1..5).prop_map(|tgts| {
        let pairs: Vec<Pair> = tgts.into_iter().map(|t| Pair { src: t.clone(), tgt: t }).collect();
        Batch::from_pairs(&pairs.iter().collect::<Vec<_>>()).unwrap()
    })
}

proptest! {
    #[test]
    fn decay_is_non_increasing_and_bounded(s in strategies(), a in 0u64..1_000_000, b in 0u64..1_000_000) {
        let (lo, hi) = (a.min(b), a.max(b));
        let (p_lo, p_hi) = (s.probability(lo), s.probability(hi));
        prop_assert!(p_hi <= p_lo);
        prop_assert!((0.0..=1.0).contains(&p_lo) && (0.0..=1.0).contains(&p_hi));
    }

    #[test]
    fn selection_partitions_eligible_positions(
        batch in batches(),
        seed in any::<u64>(),
        t1 in 0.0..1.0f64,
        t2 in 0.0..1.0f64,
        denoise in any::<bool>(),
    ) {
        let (tg, tr) = (t1.min(t2), t1.max(t2));
        let mode = if denoise {
            ScheduleMode::ConfidenceAwareDenoising { t_golden: tg, t_rand: tr }
        } else {
            ScheduleMode::ConfidenceAware { t_golden: tg }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conf: Vec<f64> = (0..batch.size * batch.tgt_len).map(|_| rand::Rng::gen(&mut rng)).collect();
        let sel = select_tokens(&conf, &ScheduleConfig::with_mode(mode), &batch, &mut rng).unwrap();
        let c = sel.counts();
        prop_assert_eq!(c.total(), sel.eligible.iter().filter(|&&e| e).count());
        for (i, cls) in sel.classes.iter().enumerate() {
            if !sel.eligible[i] {
                prop_assert_eq!(*cls, TokenClass::Golden);
            }
            if let TokenClass::Random(t) = cls {
                prop_assert!(batch.target_tokens(i / batch.tgt_len).contains(t));
            }
        }
        if !denoise {
            prop_assert_eq!(c.random, 0);
        }
    }

    #[test]
    fn vanilla_mask_touches_only_eligible(batch in batches(), keep in 0.0..=1.0f64, seed in any::<u64>()) {
        let sel = vanilla_sample_mask(keep, &batch, &mut ChaCha8Rng::seed_from_u64(seed));
        for (cls, &e) in sel.classes.iter().zip(&sel.eligible) {
            prop_assert!(e || *cls == TokenClass::Golden);
            prop_assert!(!matches!(cls, TokenClass::Random(_)));
        }
    }

    #[test]
    fn batches_are_well_formed(batch in batches()) {
        let len = batch.tgt_len;
        for r in 0..batch.size {
            prop_assert_eq!(batch.tgt_in[r * len], 0);
            let n = batch.tgt_lens[r];
            prop_assert_eq!(batch.tgt_out[r * len + n - 1], 1);
            for j in 0..len {
                prop_assert_eq!(batch.tgt_pad[r * len + j], j >= n);
                if j + 1 < n {
                    prop_assert_eq!(batch.tgt_in[r * len + j + 1], batch.tgt_out[r * len + j]);
                }
            }
        }
        prop_assert_eq!(batch.non_pad_targets(), batch.tgt_lens.iter().sum::<usize>());
    }
}

fn lexicon_setup() -> (Transformer32, confss::Dataset) {
    let task = SyntheticTask {
        variant: TaskVariant::LexiconMap,
        train_size: 10,
        valid_size: 10,
        test_size: 300,
        ..SyntheticTask::default()
    };
    let model = ModelConfig {
        d_model: 32,
        d_ff: 64,
        ..ModelConfig::default()
    };
    (Transformer32::new(model, 17).unwrap(), task.generate().unwrap().test)
}

#[test]
fn beam_of_one_without_penalty_equals_greedy() {
    let (model, test) = lexicon_setup();
    let greedy = evaluate(&model, &test, DecodeMode::Greedy).unwrap();
    let beam = evaluate(&model, &test, DecodeMode::Beam { beam_size: 1, length_penalty: 0.0 }).unwrap();
    assert_eq!(greedy, beam);
}

#[test]
fn untrained_model_is_near_chance() {
    let (model, test) = lexicon_setup();
    let report = evaluate(&model, &test, DecodeMode::Greedy).unwrap();
    assert!(report.overall.token_acc < 0.15, "{report:?}");
    assert_eq!(report.overall.seq_acc, 0.0);
}
