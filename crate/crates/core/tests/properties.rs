use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use subrefine::corpus::{
    corrupt_reference, generate_toy_corpus, preprocess_line, NoiseSpec, Sentence, ToySpec, Vocabulary, UNK_TOKEN,
};
use subrefine::dual_attention::{DAConfig, DAParams};
use subrefine::error_detection::{baseline_predict, detection_metrics, Baseline, DetectorConfig, DetectorParams};
use subrefine::hellinger_pca::hellinger_rows;
use subrefine::neural_core::{center_mask, sgd_update, softmax, temporal_conv, Parameter, Tensor};
use subrefine::refinement::{refine_sentence, Heuristic, RefinementConfig};
use subrefine::single_attention::{SAConfig, SAParams};

fn sentence(max_id: usize, len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(3..max_id, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn preprocessing_is_idempotent(raw in "[a-zA-Z0-9.,!?;:\"() ]{0,40}") {
        if let Ok(tokens) = preprocess_line(&raw) {
            prop_assert_eq!(preprocess_line(&tokens.join(" ")).unwrap(), tokens);
        }
    }

    #[test]
    fn decode_encode_only_loses_unknown_words(words in prop::collection::vec("[a-e]{1,2}", 1..10)) {
        let vocab = Vocabulary::from_tokens(["a", "b", "ab", "c"]).unwrap();
        let back = vocab.decode(&vocab.encode(&words).unwrap()).unwrap();
        for (w, b) in words.iter().zip(&back) {
            if vocab.id(w).is_some() {
                prop_assert_eq!(w, b);
            } else {
                prop_assert_eq!(b, UNK_TOKEN);
            }
        }
    }

    #[test]
    fn corruption_preserves_length_and_is_pure(ids in sentence(40, 1..15), rate in 0.0f64..=1.0, seed in any::<u64>()) {
        let s = Sentence::new(ids).unwrap();
        let noise = NoiseSpec { substitution_rate: rate, confusion_size: 3, seed };
        let a = corrupt_reference(&s, &noise, 40).unwrap();
        prop_assert_eq!(a.len(), s.len());
        prop_assert_eq!(a, corrupt_reference(&s, &noise, 40).unwrap());
    }

    #[test]
    fn toy_generation_is_pure(seed in any::<u64>(), n in 1usize..20) {
        let spec = ToySpec { seed, ..ToySpec::default() };
        prop_assert_eq!(generate_toy_corpus(&spec, n).unwrap(), generate_toy_corpus(&spec, n).unwrap());
    }

    #[test]
    fn softmax_is_a_positive_distribution(v in prop::collection::vec(-50.0f64..50.0, 1..20)) {
        let p = softmax(&v);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn masked_conv_ignores_the_center(seed in any::<u64>(), len in 1usize..7, t_frac in 0.0f64..1.0, left_only: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kernel = Parameter::uniform(&[5, 2, 3], 1.0, &mut rng)
            .with_mask(center_mask(5, 2, 3, left_only))
            .unwrap();
        let input = Tensor::uniform(&[len, 2], 1.0, &mut rng);
        let pad = [0.3, -0.2];
        let t = ((len as f64 * t_frac) as usize).min(len - 1);
        let base = temporal_conv(&input, &kernel.value, &pad).unwrap();
        let mut changed = input.clone();
        changed.row_mut(t).iter_mut().for_each(|v| *v += 7.0);
        let out = temporal_conv(&changed, &kernel.value, &pad).unwrap();
        prop_assert_eq!(out.row(t), base.row(t));
    }

    #[test]
    fn sgd_keeps_masked_entries_zero(seed in any::<u64>(), lr in -5.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = center_mask(3, 2, 2, false);
        let mut p = Parameter::uniform(&[3, 2, 2], 1.0, &mut rng).with_mask(mask.clone()).unwrap();
        p.grad = Tensor::uniform(&[3, 2, 2], 10.0, &mut rng);
        sgd_update(std::iter::once(&mut p), lr);
        for (v, m) in p.value.data().iter().zip(mask.data()) {
            if *m == 0.0 {
                prop_assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn hellinger_rows_have_unit_norm(counts in prop::collection::vec(0u32..5, 12)) {
        let t = Tensor::from_vec(&[3, 4], counts.iter().map(|&c| c as f64).collect()).unwrap();
        let h = hellinger_rows(&t);
        for r in 0..3 {
            let norm: f64 = h.row(r).iter().map(|v| v * v).sum();
            prop_assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_detection_accuracies_sum_to_100(labels in prop::collection::vec(any::<bool>(), 1..30)) {
        let ids = vec![3; labels.len()];
        let c = detection_metrics(&baseline_predict(Baseline::AllCorrect, None, &ids).unwrap(), &labels).unwrap();
        let w = detection_metrics(&baseline_predict(Baseline::AllWrong, None, &ids).unwrap(), &labels).unwrap();
        prop_assert!((c.accuracy + w.accuracy - 100.0).abs() < 1e-9);
    }

    #[test]
    fn width_one_detector_ignores_source_order(x in sentence(10, 1..6), y in sentence(10, 1..6), seed in any::<u64>()) {
        let cfg = DetectorConfig { embed_dim: 4, hidden_dim: 4, conv_width: 1 };
        let d = DetectorParams::new(10, 10, &cfg, seed);
        let mut rev = x.clone();
        rev.reverse();
        let a = d.forward(&x, &y).unwrap();
        let b = d.forward(&rev, &y).unwrap();
        for (p, q) in a.iter().zip(&b) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn substitution_rows_ignore_their_own_word(
        x in sentence(12, 1..6), y in sentence(12, 1..8), pos_frac in 0.0f64..1.0, tok in 1usize..12, seed in any::<u64>()
    ) {
        let i = ((y.len() as f64 * pos_frac) as usize).min(y.len() - 1);
        let mut changed = y.clone();
        changed[i] = tok;

        let sa = SAParams::new(12, 12, &SAConfig { embed_dim: 4, context_dim: 4, hidden_dim: 6, k: 2, ..SAConfig::default() }, seed);
        let (a, b) = (sa.forward(&x, &y).unwrap().0, sa.forward(&x, &changed).unwrap().0);
        prop_assert_eq!(a.row(i), b.row(i));

        let da = DAParams::new(12, 12, &DAConfig { embed_dim: 4, context_dim: 4, attention_dim: 4, hidden_dim: 6, k: 2 }, seed);
        let (a, b) = (da.forward(&x, &y, &y).unwrap().0, da.forward(&x, &y, &changed).unwrap().0);
        prop_assert_eq!(a.row(i), b.row(i));
    }

    #[test]
    fn refinement_traces_replay_and_respect_limits(
        x in sentence(12, 1..5), y in sentence(12, 1..8), t in 0.0f64..0.2, n in 0usize..6, seed in any::<u64>()
    ) {
        let sa = SAParams::new(12, 12, &SAConfig { embed_dim: 4, context_dim: 4, hidden_dim: 6, k: 2, ..SAConfig::default() }, seed);
        let g = Sentence::new(y).unwrap();
        let tr = refine_sentence(&sa, &x, &g, &RefinementConfig::new(Heuristic::Pr, t, n)).unwrap();
        prop_assert!(tr.steps.len() <= n);
        prop_assert_eq!(tr.final_sentence.len(), g.len());
        prop_assert_eq!(tr.replay().unwrap(), tr.final_sentence.clone());
        prop_assert!(tr.steps.iter().all(|s| s.score >= t && s.old_token != s.new_token));
    }
}
