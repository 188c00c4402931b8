mod common;

use cbart::metrics;
use common::oracle;
use proptest::prelude::*;

fn corpus(max_len: usize) -> impl Strategy<Value = Vec<Vec<u32>>> {
    prop::collection::vec(prop::collection::vec(0u32..5, 1..max_len), 1..5)
}

#[test]
fn hand_cases_match_oracle() {
    for (hyps, refs) in oracle::cases() {
        for n in 1..=4 {
            let b = metrics::corpus_bleu(&hyps, &refs, n).unwrap();
            assert!((b - oracle::corpus_bleu(&hyps, &refs, n)).abs() <= 1e-9, "bleu-{n} {hyps:?}");
            let s = metrics::corpus_nist(&hyps, &refs, n).unwrap();
            assert!((s - oracle::corpus_nist(&hyps, &refs, n)).abs() <= 1e-9, "nist-{n} {hyps:?}");
        }
    }
}

#[test]
fn hand_computed_values() {
    let h = vec![vec![1u32, 2, 3, 4]];
    let r = vec![vec![1u32, 2, 3, 5]];
    let b = metrics::corpus_bleu(&h, &r, 2).unwrap();
    assert!((b - (0.75f64 * 2.0 / 3.0).sqrt()).abs() < 1e-12);
    assert!((metrics::distinct_n(&[vec![7u32, 7, 7]], 2) - 1.0 / 3.0).abs() < 1e-15);
    assert!(metrics::repetition_flag(&[1u32, 2, 3, 1, 2, 3, 4]));
    assert!(!metrics::repetition_flag(&[1u32, 2, 3, 4, 1, 2]));
    assert!((metrics::nist_brevity(2, 3.0) - 0.5).abs() < 1e-12);
    assert_eq!(metrics::nist_brevity(5, 3.0), 1.0);
}

proptest! {
    #[test]
    fn corpus_scores_match_oracle(h in corpus(9), r in corpus(9), n in 1usize..5) {
        let k = h.len().min(r.len());
        let (h, r) = (&h[..k], &r[..k]);
        prop_assert!((metrics::corpus_bleu(h, r, n).unwrap() - oracle::corpus_bleu(h, r, n)).abs() <= 1e-9);
        prop_assert!((metrics::corpus_nist(h, r, n).unwrap() - oracle::corpus_nist(h, r, n)).abs() <= 1e-9);
    }

    #[test]
    fn diversity_scores_match_oracle(s in corpus(10), n in 1usize..5) {
        prop_assert!((metrics::distinct_n(&s, n) - oracle::distinct_n(&s, n)).abs() <= 1e-12);
        if s.len() >= 2 {
            prop_assert!((metrics::self_bleu(&s, n).unwrap() - oracle::self_bleu(&s, n)).abs() <= 1e-9);
        }
    }

    #[test]
    fn repetition_matches_oracle(s in prop::collection::vec(0u32..6, 0..30)) {
        prop_assert_eq!(metrics::repetition_flag(&s), oracle::repetition_flag(&s));
    }
}
