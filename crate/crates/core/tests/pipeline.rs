//! Cross-module invariants: corpus generation, stitching, streaming sessions
//! and the batch evaluator must tell the same story.

use islu::corpus::{build_vocab, gen_synthetic, stitch_streams};
use islu::evaluation::{eval_oracle, eval_predicted};
use islu::models::{init_model_with_range, ModelConfig, Variant};
use islu::streaming::{commits, EosMode, Session};
use islu::Model;
use proptest::prelude::*;

fn random_model(variant: Variant, vocab: usize, intents: usize, seed: u64) -> Model {
    let config = ModelConfig {
        embedding_dim: 4,
        hidden_dim: 5,
        seed,
        ..ModelConfig::new(variant, vocab, intents)
    };
    let params = init_model_with_range(&config, 1.0).unwrap();
    Model::new(config, params).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn stitching_partitions_the_corpus(seed in 0u64..1000, k in 1usize..8) {
        let corpus = gen_synthetic(3, 30, (2, 6), seed).unwrap();
        let vocab = build_vocab(&corpus, 1);
        let set = stitch_streams(&corpus, &vocab, k, seed ^ 0xabc).unwrap();
        prop_assert_eq!(set.utterance_count(), corpus.len());
        prop_assert_eq!(set.token_count(), corpus.token_count());
        let mut sources: Vec<usize> = set.samples.iter().flat_map(|s| s.sources.clone()).collect();
        sources.sort_unstable();
        prop_assert_eq!(sources, (0..corpus.len()).collect::<Vec<_>>());
        for s in &set.samples {
            prop_assert!(s.n_utterances() >= 1 && s.n_utterances() <= k);
            prop_assert_eq!(s.eos_flags.iter().filter(|&&f| f).count(), s.n_utterances());
        }
    }

    #[test]
    fn oracle_session_replays_the_evaluator(seed in 0u64..1000, k in 1usize..5) {
        let corpus = gen_synthetic(4, 24, (2, 7), seed).unwrap();
        let vocab = build_vocab(&corpus, 1);
        let set = stitch_streams(&corpus, &vocab, k, seed).unwrap();
        let model = random_model(Variant::Online, vocab.len(), 4, seed);
        let report = eval_oracle(&model, &set).unwrap();

        let mut correct = 0;
        let mut total = 0;
        for s in &set.samples {
            let mut session = Session::open(&model, EosMode::Oracle).unwrap();
            let events = session.push_all(&s.token_ids, Some(&s.eos_flags)).unwrap();
            let got = commits(&events);
            prop_assert_eq!(got.len(), s.utt_spans.len());
            for ((span, intent), (&want_span, gold)) in got.iter().zip(s.utt_spans.iter().zip(s.utterance_intents())) {
                prop_assert_eq!(*span, want_span);
                correct += usize::from(*intent == gold);
                total += 1;
            }
        }
        let acc = correct as f64 / total as f64;
        prop_assert!((acc - report.intent_acc_oracle.unwrap()).abs() < 1e-15);
    }

    #[test]
    fn predicted_session_replays_the_evaluator(seed in 0u64..1000, threshold in 0.2f64..0.8) {
        let corpus = gen_synthetic(3, 18, (2, 6), seed).unwrap();
        let vocab = build_vocab(&corpus, 1);
        let set = stitch_streams(&corpus, &vocab, 3, seed).unwrap();
        let model = random_model(Variant::Multitask, vocab.len(), 3, seed);
        let report = eval_predicted(&model, &model, &set, threshold).unwrap();

        let mut fired = 0;
        for s in &set.samples {
            let mut session = Session::open(&model, EosMode::Predicted)
                .unwrap()
                .with_threshold(threshold)
                .unwrap();
            fired += commits(&session.push_all(&s.token_ids, None).unwrap()).len();
        }
        prop_assert_eq!(fired, report.n_predicted_eos);
    }
}

#[test]
fn evaluation_is_stream_order_invariant() {
    let corpus = gen_synthetic(4, 40, (3, 8), 5).unwrap();
    let vocab = build_vocab(&corpus, 1);
    let mut set = stitch_streams(&corpus, &vocab, 3, 5).unwrap();
    let model = random_model(Variant::MultitaskFb, vocab.len(), 4, 5);
    let a = eval_predicted(&model, &model, &set, 0.5).unwrap();
    set.samples.reverse();
    let b = eval_predicted(&model, &model, &set, 0.5).unwrap();
    assert_eq!(a.intent_acc_predicted, b.intent_acc_predicted);
    assert_eq!(a.intent_acc_oracle, b.intent_acc_oracle);
    assert_eq!(a.eos_token_acc, b.eos_token_acc);
    assert_eq!(a.eos_boundary_f1, b.eos_boundary_f1);
}
