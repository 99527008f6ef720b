//! Property tests for invariants across modules.

use proptest::collection::vec;
use proptest::prelude::*;

use rakie::config::Config;
use rakie::context::{concat_and_chunk, CONTEXT_MARK};
use rakie::corpus::{Key, KnowledgeEntry};
use rakie::crf::{forward_backward, log_partition, sequence_score, viterbi_decode, Potentials};
use rakie::data::{format_ner, parse_ner, NerSentence};
use rakie::encoder::{OBJECT_START, SUBJECT_START};
use rakie::eval::{bio_spans, random_retrieval_ablation, span_f1};
use rakie::moe::{mix_distributions, mixture_nll, MixtureWeights};
use rakie::re_model::{insert_markers, kl_logits, strip_markers, Span};
use rakie::text_index::{Bm25Params, TextIndex};

fn potentials() -> impl Strategy<Value = Potentials> {
    (1usize..=6, 1usize..=4).prop_flat_map(|(n, t)| {
        vec(-5.0f64..5.0, n * (t + 1) * t).prop_map(move |v| {
            let mut p = Potentials::zeros(n, t);
            p.as_mut_slice().copy_from_slice(&v);
            p
        })
    })
}

fn word() -> impl Strategy<Value = String> {
    "[a-z]{1,6}"
}

fn tag_seq(len: usize) -> impl Strategy<Value = Vec<String>> {
    vec(prop_oneof![Just("O"), Just("B-PER"), Just("I-PER"), Just("B-LOC"), Just("I-LOC")], len)
        .prop_map(|v| v.into_iter().map(String::from).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn position_shift_moves_log_partition(pot in potentials(), c in -3.0f64..3.0, pos in 0usize..6) {
        let (n, t) = (pot.len(), pot.num_labels());
        let i = pos % n;
        let mut shifted = pot.clone();
        for prev in 0..=t {
            for cur in 0..t {
                shifted.set(i, prev, cur, pot.get(i, prev, cur) + c);
            }
        }
        prop_assert!((log_partition(&shifted) - log_partition(&pot) - c).abs() < 1e-9);
        let (a, b) = (forward_backward(&pot), forward_backward(&shifted));
        for (x, y) in a.marg.as_slice().iter().zip(b.marg.as_slice()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn marginal_rows_sum_to_one(pot in potentials()) {
        let post = forward_backward(&pot);
        for i in 0..post.len() {
            let s: f64 = post.marg.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn viterbi_beats_any_sequence(pot in potentials(), picks in vec(0usize..4, 6)) {
        let t = pot.num_labels();
        let other: Vec<usize> = picks[..pot.len()].iter().map(|y| y % t).collect();
        let best = viterbi_decode(&pot);
        prop_assert!(sequence_score(&pot, &best).unwrap() >= sequence_score(&pot, &other).unwrap() - 1e-12);
        prop_assert!(sequence_score(&pot, &best).unwrap() <= log_partition(&pot) + 1e-12);
    }

    #[test]
    fn kl_logits_shift_invariant(a in vec(-4.0f64..4.0, 2..6), c in -10.0f64..10.0) {
        let b: Vec<f64> = a.iter().rev().cloned().collect();
        let shifted: Vec<f64> = a.iter().map(|x| x + c).collect();
        let (k1, _, _) = kl_logits(&a, &b);
        let (k2, _, _) = kl_logits(&shifted, &b);
        prop_assert!(k1 >= -1e-12);
        prop_assert!((k1 - k2).abs() < 1e-9);
        prop_assert!(kl_logits(&a, &a).0.abs() < 1e-12);
    }

    #[test]
    fn markers_round_trip(tokens in vec(word(), 2..10), a in 0usize..10, b in 0usize..10, la in 0usize..3, lb in 0usize..3) {
        let n = tokens.len();
        let (s0, o0) = (a % n, b % n);
        prop_assume!(s0 != o0);
        let subject = Span { start: s0, end: (s0 + la).min(n - 1) };
        let object = Span { start: o0, end: (o0 + lb).min(n - 1) };
        prop_assume!(!subject.overlaps(&object));
        let m = insert_markers(&tokens, subject, object).unwrap();
        prop_assert_eq!(m.tokens.len(), n + 4);
        prop_assert_eq!(&m.tokens[m.subject_marker], SUBJECT_START);
        prop_assert_eq!(&m.tokens[m.object_marker], OBJECT_START);
        prop_assert_eq!(strip_markers(&m.tokens), tokens);
    }

    #[test]
    fn span_f1_ignores_sentence_order(pairs in vec((tag_seq(5), tag_seq(5)), 1..8), rot in 0usize..8) {
        let (pred, gold): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
        let r = rot % pred.len();
        let mut p2 = pred.clone();
        let mut g2 = gold.clone();
        p2.rotate_left(r);
        g2.rotate_left(r);
        prop_assert_eq!(span_f1(&pred, &gold).unwrap(), span_f1(&p2, &g2).unwrap());
        let perfect = span_f1(&gold, &gold).unwrap();
        prop_assert_eq!(perfect.true_positives, perfect.gold);
    }

    #[test]
    fn bio_spans_round_trip(marks in vec((0usize..3, 1usize..3), 1..6)) {
        // Build a tag sequence from disjoint spans and recover them.
        let mut tags = Vec::new();
        let mut spans = Vec::new();
        for (gap, len) in marks {
            tags.extend(std::iter::repeat_n("O".to_string(), gap));
            let start = tags.len();
            tags.push("B-ORG".to_string());
            tags.extend(std::iter::repeat_n("I-ORG".to_string(), len - 1));
            spans.push((start, tags.len() - 1));
        }
        let got: Vec<(usize, usize)> = bio_spans(&tags).iter().map(|s| (s.start, s.end)).collect();
        prop_assert_eq!(got, spans);
    }

    #[test]
    fn input_never_truncated(x in vec(word(), 0..12), blocks in vec("[a-z ]{0,30}", 0..5), extra in 0usize..20) {
        let budget = x.len() + extra;
        prop_assume!(budget > 0);
        let a = concat_and_chunk(&x, &blocks, budget).unwrap();
        prop_assert_eq!(&a.tokens[..x.len()], &x[..]);
        prop_assert!(a.tokens.len() <= budget);
        prop_assert_eq!(a.n + a.m, a.tokens.len());
        if a.m > 0 {
            prop_assert_eq!(&a.tokens[x.len()], CONTEXT_MARK);
        }
    }

    #[test]
    fn bm25_results_ranked(keys in vec(vec(prop_oneof![Just("a"), Just("b"), Just("c"), Just("d")], 1..5), 1..30), q in vec(prop_oneof![Just("a"), Just("b"), Just("e")], 1..4), k in 1usize..10) {
        let entries: Vec<KnowledgeEntry> = keys.iter().enumerate().map(|(i, ws)| KnowledgeEntry {
            entry_id: 2 * i as u64,
            key: Key::Text(ws.join(" ")),
            value: String::new(),
        }).collect();
        let idx = TextIndex::build(&entries, Bm25Params::default()).unwrap();
        let r = idx.search(&q.join(" "), k);
        prop_assert!(r.items.len() <= k);
        for w in r.items.windows(2) {
            prop_assert!(w[0].score > w[1].score || (w[0].score == w[1].score && w[0].entry_id < w[1].entry_id));
        }
        for it in &r.items {
            prop_assert!(it.score > 0.0);
            prop_assert!((idx.bm25_score(&q, it.entry_id).unwrap() - it.score).abs() < 1e-12);
        }
    }

    #[test]
    fn mixture_is_a_distribution(d in vec(0.01f64..1.0, 2..6), p in 0.0f64..=1.0) {
        let sum: f64 = d.iter().sum();
        let a: Vec<f64> = d.iter().map(|x| x / sum).collect();
        let b: Vec<f64> = a.iter().rev().cloned().collect();
        let m = mix_distributions(&a, &b, MixtureWeights::new(p)).unwrap();
        prop_assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mixture_nll_monotone_in_gate(lp_t in -6.0f64..0.0, lp_i in -6.0f64..0.0, s in -5.0f64..5.0) {
        // Raising the gate logit helps exactly when the text expert is better.
        let lo = mixture_nll(s, lp_t, lp_i).loss;
        let hi = mixture_nll(s + 0.5, lp_t, lp_i).loss;
        if lp_t > lp_i {
            prop_assert!(hi <= lo + 1e-12);
        } else {
            prop_assert!(hi >= lo - 1e-12);
        }
    }

    #[test]
    fn ner_format_round_trip(sents in vec((vec(word(), 1..6), "[a-z0-9_]{1,8}"), 1..5)) {
        let data: Vec<NerSentence> = sents.into_iter().map(|(tokens, id)| NerSentence {
            image_id: id,
            tags: vec!["O".to_string(); tokens.len()],
            tokens,
        }).collect();
        prop_assert_eq!(parse_ner(&format_ner(&data).unwrap()).unwrap(), data);
    }

    #[test]
    fn config_round_trip(seed in 0..=i64::MAX as u64, k in 1usize..50, lambda in 0.0f64..4.0) {
        let cfg = Config { seed, k, lambda, ..Config::default() };
        prop_assert!(cfg.validate().is_ok());
        prop_assert_eq!(Config::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn seeds_beyond_toml_range_rejected(seed in (i64::MAX as u64 + 1)..=u64::MAX) {
        let cfg = Config { seed, ..Config::default() };
        prop_assert_eq!(cfg.validate().unwrap_err().code(), "E_CONFIG");
    }
}

/// Each entry should be drawn `num_examples * k / N` times; a chi-square
/// statistic far above its `N - 1` degrees of freedom means non-uniform draws.
#[test]
fn random_ablation_is_uniform() {
    let kc: Vec<KnowledgeEntry> = (0..20)
        .map(|i| KnowledgeEntry {
            entry_id: i,
            key: Key::Text(format!("w{i}")),
            value: format!("v{i}"),
        })
        .collect();
    let draws = random_retrieval_ablation(2000, &kc, 5, 9);
    let mut counts = [0usize; 20];
    for r in &draws {
        let mut ids: Vec<u64> = r.items.iter().map(|i| i.entry_id).collect();
        assert_eq!(ids.len(), 5);
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 5, "drawn with replacement");
        for id in ids {
            counts[id as usize] += 1;
        }
    }
    let expected = 2000.0 * 5.0 / 20.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 19 degrees of freedom; the 0.999 quantile is about 43.8.
    assert!(chi2 < 43.8, "chi2 {chi2}");
    assert_eq!(draws, random_retrieval_ablation(2000, &kc, 5, 9));
    assert_ne!(draws, random_retrieval_ablation(2000, &kc, 5, 10));
}
