use cbart::inference::{self, DecodeConfig, PenaltyMode, Ranker, Strategy as Decoding};
use cbart::metrics;
use cbart::model::{ModelConfig, Seq2Seq};
use cbart::synthesis::{self, ActionLabel, InsertionStrategy, TrainingInstance};
use cbart::text::{self, SentenceIds, TokenId, Vocab, BOS, EOS, MASK, NUM_SPECIALS};
use cbart::training::{self, CheckpointMeta, ModelKind};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const WORDS: [&str; 12] = ["ox", "elm", "sky", "red", "run", "jar", "fig", "owl", "sea", "map", "ink", "dew"];

fn sentence_strategy(min: usize, max: usize) -> impl Strategy<Value = String> {
    prop::collection::vec(0..WORDS.len(), min..=max).prop_map(|ix| ix.iter().map(|&i| WORDS[i]).collect::<Vec<_>>().join(" "))
}

fn corpus_strategy() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(sentence_strategy(1, 9), 1..6)
}

fn word_vocab() -> Vocab {
    Vocab::from_tokens(WORDS).unwrap()
}

fn is_subseq(needle: &[TokenId], hay: &[TokenId]) -> bool {
    inference::is_subsequence(needle, hay)
}

proptest! {
    #[test]
    fn encode_decode_roundtrip(s in sentence_strategy(0, 12)) {
        let v = word_vocab();
        let ids = text::encode(&s, &v);
        prop_assert_eq!(text::decode(&ids, &v).unwrap(), s);
    }

    #[test]
    fn vocab_is_deterministic(c in corpus_strategy(), min_freq in 1usize..3) {
        let a = text::build_vocab(&c, min_freq, 100);
        let b = text::build_vocab(&c, min_freq, 100);
        prop_assert_eq!(a.map(|v| v.corpus_tokens().to_vec()).ok(), b.map(|v| v.corpus_tokens().to_vec()).ok());
    }

    #[test]
    fn keywords_are_ordered_subsequence(s in sentence_strategy(1, 12), n in 1usize..5, seed in any::<u64>()) {
        let v = word_vocab();
        let ids = text::encode(&s, &v);
        if let Ok(k) = text::extract_keywords(&ids, n, seed, &v) {
            prop_assert_eq!(k.len(), n);
            prop_assert!(is_subseq(&k, ids.interior()));
        }
    }

    #[test]
    fn idf_nonnegative_and_zero_iff_everywhere(c in corpus_strategy()) {
        let v = word_vocab();
        let table = text::build_tfidf(&c, &v);
        for w in WORDS {
            let id = v.id(w).unwrap();
            let everywhere = c.iter().all(|l| l.split_whitespace().any(|t| t == w));
            match table.idf(id) {
                Some(idf) => {
                    prop_assert!(idf >= 0.0);
                    prop_assert_eq!(idf == 0.0, everywhere);
                }
                None => prop_assert!(c.iter().all(|l| !l.split_whitespace().any(|t| t == w))),
            }
        }
    }

    #[test]
    fn every_instance_is_valid(c in corpus_strategy(), seed in any::<u64>(), rate in 0.0f64..0.9, s in 0usize..5) {
        let v = word_vocab();
        let strategy = InsertionStrategy::ALL[s];
        let data = synthesis::make_dataset(&c, &v, strategy, 3, rate, seed).unwrap();
        prop_assert_eq!(data.len(), 3 * c.len());
        for inst in &data {
            prop_assert!(inst.validate().is_ok(), "{:?}", inst);
        }
    }

    #[test]
    fn gold_inserts_come_from_their_gap(s in sentence_strategy(1, 10), seed in any::<u64>(), st in 0usize..5) {
        let v = word_vocab();
        let corpus = [s.clone()];
        let table = text::build_tfidf(&corpus, &v);
        let original = text::encode(&s, &v);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kept = synthesis::subsample(&original, &mut rng).unwrap();
        let (x, replaced) = synthesis::apply_replacements(&original, &kept, 0.3, &mut rng, &v).unwrap();
        let labels = synthesis::derive_labels(&kept, &replaced);
        let strategy = InsertionStrategy::ALL[st];
        let (_, y) = synthesis::build_decoder_pair(&x, &labels, &original, &kept, strategy, Some(&table), &mut rng).unwrap();
        let ids = original.ids();
        let mut t = 0;
        for (j, l) in labels.iter().enumerate() {
            if *l == ActionLabel::Insert {
                let gap = &ids[kept[j - 1] + 1..kept[j]];
                prop_assert!(gap.contains(&y[t]), "gold {} not in gap {:?}", y[t], gap);
                t += 1;
            }
            if *l == ActionLabel::Replace {
                prop_assert_eq!(y[t], ids[kept[j]]);
            }
            t += 1;
        }
        prop_assert_eq!(t, y.len());
    }

    #[test]
    fn left_gold_reconstruction_converges(s in sentence_strategy(1, 10), seed in any::<u64>()) {
        let v = word_vocab();
        let original = text::encode(&s, &v);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut kept = synthesis::subsample(&original, &mut rng).unwrap();
        let (mut x, mut replaced) = synthesis::apply_replacements(&original, &kept, 0.3, &mut rng, &v).unwrap();
        let mut steps = 0;
        while x != original {
            prop_assert!(steps < original.len(), "no convergence after {} steps", steps);
            let labels = synthesis::derive_labels(&kept, &replaced);
            let (_, y) = synthesis::build_decoder_pair(&x, &labels, &original, &kept, InsertionStrategy::Left, None, &mut rng).unwrap();
            let mut next = Vec::new();
            for (j, l) in labels.iter().enumerate() {
                if *l == ActionLabel::Insert {
                    next.push(kept[j - 1] + 1);
                }
                next.push(kept[j]);
            }
            kept = next;
            replaced = vec![false; kept.len()];
            x = SentenceIds::new(y).unwrap();
            prop_assert_eq!(x.ids().to_vec(), kept.iter().map(|&k| original.ids()[k]).collect::<Vec<_>>());
            steps += 1;
        }
    }

    #[test]
    fn coerced_labels_respect_protection(
        logits in prop::collection::vec(-3.0f64..3.0, 9..=30),
        flags in prop::collection::vec(any::<bool>(), 10),
    ) {
        let n = logits.len() / 3;
        let logits = &logits[..n * 3];
        let mut protected = flags[..n].to_vec();
        protected[0] = false;
        protected[n - 1] = false;
        let labels = inference::labels_from_logits(logits, &protected);
        prop_assert_eq!(labels[0], ActionLabel::Copy);
        prop_assert_ne!(labels[n - 1], ActionLabel::Replace);
        for (l, p) in labels.iter().zip(&protected) {
            prop_assert!(!(*p && *l == ActionLabel::Replace));
        }
    }

    #[test]
    fn masked_input_keeps_keywords_in_order(kws in prop::collection::vec(5u32..17, 1..6), raw in prop::collection::vec(0usize..3, 8)) {
        let state = inference::init_input(&kws).unwrap();
        let n = state.x.len();
        let mut logits = vec![0.0; n * 3];
        for t in 0..n {
            logits[t * 3 + raw[t % raw.len()]] = 1.0;
        }
        let labels = inference::labels_from_logits(&logits, &state.protected);
        let m = inference::build_masked_input(&state, &labels).unwrap();
        prop_assert_eq!(m.next_protected.len(), m.unshifted.len());
        let kept: Vec<TokenId> = m.unshifted.iter().zip(&m.next_protected).filter(|(_, &p)| p).map(|(&t, _)| t).collect();
        prop_assert_eq!(kept, kws);
        prop_assert_eq!(m.ym[0], EOS);
        prop_assert_eq!(&m.ym[1..], &m.unshifted[..m.unshifted.len() - 1]);
        for &p in &m.mask_positions {
            prop_assert_eq!(m.unshifted[p], MASK);
        }
    }

    #[test]
    fn top_p_support_contains_argmax(logits in prop::collection::vec(-5.0f64..5.0, 2..20), p in 0.01f64..1.0) {
        let probs = inference::softmax(&logits);
        let sum: f64 = probs.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9);
        let support = inference::top_p_filter(&probs, p);
        let best = (0..probs.len()).fold(0, |b, i| if probs[i] > probs[b] { i } else { b });
        prop_assert!(support.contains(&best));
        let mass: f64 = support.iter().map(|&i| probs[i]).sum();
        prop_assert!(mass >= p - 1e-12 || support.len() == probs.len());
    }

    #[test]
    fn bleu_bounds_and_identity(
        hyps in prop::collection::vec(prop::collection::vec(0u32..6, 1..9), 1..5),
        refs in prop::collection::vec(prop::collection::vec(0u32..6, 1..9), 5),
    ) {
        let refs = &refs[..hyps.len()];
        let b = metrics::corpus_bleu(&hyps, refs, 4).unwrap();
        prop_assert!((0.0..=1.0).contains(&b));
        if b == 1.0 {
            prop_assert_eq!(hyps.as_slice(), refs);
        }
        let long: Vec<Vec<u32>> = hyps.iter().filter(|h| h.len() >= 4).cloned().collect();
        if !long.is_empty() {
            prop_assert_eq!(metrics::corpus_bleu(&long, &long, 4).unwrap(), 1.0);
        }
    }

    #[test]
    fn diversity_metrics_ignore_order(
        sents in prop::collection::vec(prop::collection::vec(0u32..5, 1..8), 2..6),
        rot in 0usize..6,
    ) {
        let mut other = sents.clone();
        let k = rot % other.len();
        other.rotate_left(k);
        other.reverse();
        for n in 1..4 {
            prop_assert_eq!(metrics::distinct_n(&sents, n), metrics::distinct_n(&other, n));
        }
        let a = metrics::self_bleu(&sents, 4).unwrap();
        let b = metrics::self_bleu(&other, 4).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert_eq!(a.to_bits(), metrics::self_bleu(&sents, 4).unwrap().to_bits());
    }

    #[test]
    fn repetition_window_is_twenty(head in prop::collection::vec(0u32..30, 20), tail in prop::collection::vec(0u32..3, 0..15)) {
        let mut longer = head.clone();
        longer.extend(tail);
        prop_assert_eq!(metrics::repetition_flag(&head), metrics::repetition_flag(&longer));
    }

    #[test]
    fn clipped_norm_within_bound(vals in prop::collection::vec(-10.0f32..10.0, 1..40), max in 0.1f64..5.0) {
        let mut g = cbart::model::ParamSet::new();
        g.push("w", cbart::model::Tensor::from_vec(&[vals.len()], vals.clone()));
        let before = training::clip_grad_norm(&mut g, max);
        let after: f64 = g.data(0).iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        prop_assert!(after <= max * (1.0 + 1e-5) + 1e-6);
        if before <= max {
            prop_assert_eq!(g.data(0), vals.as_slice());
        }
    }
}

fn small_model(vocab: usize, seed: u64) -> Seq2Seq<f32> {
    let cfg = ModelConfig { n_layer: 1, n_head: 2, d_model: 8, d_ff: 16, vocab_size: vocab, max_positions: 14, dropout: 0.0, init_std: 0.8, ..ModelConfig::default() };
    Seq2Seq::new(cfg, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn refinement_covers_keywords_and_halts(
        kws in prop::collection::vec(5u32..20, 1..7),
        model_seed in 0u64..4,
        strat in 0usize..3,
        theta in prop::sample::select(vec![1.0, 2.0, 3.5]),
        max_steps in 1usize..12,
        seed in any::<u64>(),
    ) {
        let model = small_model(20, model_seed);
        let cfg = DecodeConfig {
            strategy: [Decoding::Greedy, Decoding::TopK(4), Decoding::TopP(0.8)][strat],
            num_sequences: 2,
            theta,
            penalty: PenaltyMode::SignAware,
            max_steps,
            seed,
            ranker: Ranker::DecoderNll,
        };
        let r = inference::generate_ranked(&kws, &model, &cfg, None).unwrap();
        prop_assert!(is_subseq(&kws, r.sentence.interior()));
        prop_assert!(r.steps <= max_steps);
        prop_assert_eq!(r.steps, r.decoder_passes);
        prop_assert!(r.sentence.len() <= 14);
        if r.steps >= 2 {
            let t = &r.trajectory;
            prop_assert!(t.windows(2).take(t.len().saturating_sub(2)).all(|w| w[0] != w[1]), "stopped late at a fixed point");
        }
        let again = inference::generate_ranked(&kws, &model, &cfg, None).unwrap();
        prop_assert_eq!(r.sentence, again.sentence);
    }

    #[test]
    fn loss_is_affine_in_alpha(seed in 0u64..1000, a1 in 0.1f64..3.0, a2 in 0.1f64..3.0) {
        let v = word_vocab();
        let corpus = ["ox elm sky red", "run jar fig owl sea"];
        let data: Vec<TrainingInstance> = synthesis::make_dataset(&corpus, &v, InsertionStrategy::Middle, 2, 0.2, seed).unwrap();
        let mut m = Seq2Seq::<f64>::new(ModelConfig { n_layer: 1, n_head: 2, d_model: 8, d_ff: 16, vocab_size: v.size(), max_positions: 12, dropout: 0.0, ..ModelConfig::default() }, seed).unwrap();
        let base = m.config().clone();
        let mut at = |alpha: f64| {
            m = Seq2Seq::from_params(ModelConfig { alpha, ..base.clone() }, m.params().clone()).unwrap();
            m.compute_loss(&data, None).unwrap().0
        };
        let l1 = at(a1);
        let l2 = at(a2);
        prop_assert!((l1.l_total - (l1.l_encoder + a1 * l1.l_decoder)).abs() < 1e-12);
        prop_assert_eq!(l1.l_encoder, l2.l_encoder);
        prop_assert_eq!(l1.l_decoder, l2.l_decoder);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_identical(seed in any::<u64>()) {
        let m = small_model(12, seed);
        let meta = CheckpointMeta { kind: ModelKind::Cbart, model: m.config().clone(), vocab: None, epoch: Some(1), train_loss: Some(0.5), val_loss: None };
        let bytes = training::checkpoint::encode_checkpoint(m.params(), &meta).unwrap();
        let (p, back) = training::checkpoint::decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(back, meta);
        for (a, b) in p.tensors().iter().zip(m.params().tensors()) {
            prop_assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}

#[test]
fn instance_mask_slots_match_labels() {
    let v = word_vocab();
    let data = synthesis::make_dataset(&["ox elm sky red run jar"], &v, InsertionStrategy::Right, 20, 0.3, 3).unwrap();
    for inst in data {
        let edits = inst.l.iter().filter(|&&l| l != ActionLabel::Copy).count();
        assert_eq!(inst.mask_slots().len(), edits);
        assert_eq!(inst.y[0], BOS);
        assert!(inst.y.iter().all(|&t| t as usize >= NUM_SPECIALS || t == BOS || t == EOS));
    }
}
