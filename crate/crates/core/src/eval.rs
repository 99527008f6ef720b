//! Span and relation metrics, plus the retrieval and decoder ablations.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::KnowledgeEntry;
use crate::crf::{forward_backward, viterbi_decode, Potentials};
use crate::error::{Error, Result};
use crate::retrieval::{RetrievalResult, RetrievedItem};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntitySpan {
    pub start: usize,
    /// Inclusive.
    pub end: usize,
    pub label: String,
}

/// Spans of a BIO sequence. A stray `I-X` (after `O` or a different type) opens a new span.
pub fn bio_spans<S: AsRef<str>>(tags: &[S]) -> Vec<EntitySpan> {
    let mut spans = Vec::new();
    let mut open: Option<EntitySpan> = None;
    for (i, tag) in tags.iter().enumerate() {
        let tag = tag.as_ref();
        let (prefix, label) = match tag.split_once('-') {
            Some((p @ ("B" | "I"), l)) => (p, l),
            _ => ("O", ""),
        };
        let continues = prefix == "I" && open.as_ref().is_some_and(|s| s.label == label);
        if continues {
            if let Some(s) = open.as_mut() {
                s.end = i;
            }
            continue;
        }
        spans.extend(open.take());
        if prefix != "O" {
            open = Some(EntitySpan {
                start: i,
                end: i,
                label: label.to_string(),
            });
        }
    }
    spans.extend(open);
    spans
}

/// Micro-averaged counts. Scores are fractions in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl Prf {
    pub fn from_counts(tp: usize, predicted: usize, gold: usize) -> Self {
        let precision = if predicted == 0 { 0.0 } else { tp as f64 / predicted as f64 };
        let recall = if gold == 0 { 0.0 } else { tp as f64 / gold as f64 };
        let f1 = if precision == 0.0 || recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf {
            precision,
            recall,
            f1,
            true_positives: tp,
            predicted,
            gold,
        }
    }

    pub fn f1_percent(&self) -> f64 {
        100.0 * self.f1
    }
}

fn check_lengths(pred: usize, gold: usize, what: &str) -> Result<()> {
    if pred != gold {
        return Err(Error::Dimension {
            what: what.into(),
            expected: gold,
            found: pred,
        });
    }
    Ok(())
}

fn span_counts<S: AsRef<str>>(pred: &[Vec<S>], gold: &[Vec<S>], label: Option<&str>) -> Result<Prf> {
    check_lengths(pred.len(), gold.len(), "predicted sentences")?;
    let keep = |s: &EntitySpan| label.is_none_or(|l| s.label == l);
    let (mut tp, mut np, mut ng) = (0, 0, 0);
    for (p, g) in pred.iter().zip(gold) {
        check_lengths(p.len(), g.len(), "predicted tags")?;
        let ps: BTreeSet<_> = bio_spans(p).into_iter().filter(keep).collect();
        let gs: BTreeSet<_> = bio_spans(g).into_iter().filter(keep).collect();
        tp += ps.intersection(&gs).count();
        np += ps.len();
        ng += gs.len();
    }
    Ok(Prf::from_counts(tp, np, ng))
}

/// Exact-match span precision, recall and F1.
pub fn span_f1<S: AsRef<str>>(pred: &[Vec<S>], gold: &[Vec<S>]) -> Result<Prf> {
    span_counts(pred, gold, None)
}

pub fn labelwise_f1<S: AsRef<str>>(pred: &[Vec<S>], gold: &[Vec<S>], label: &str) -> Result<Prf> {
    span_counts(pred, gold, Some(label))
}

/// Entity types present in gold sequences, sorted.
pub fn entity_types<S: AsRef<str>>(gold: &[Vec<S>]) -> Vec<String> {
    let set: BTreeSet<String> = gold.iter().flat_map(|g| bio_spans(g)).map(|s| s.label).collect();
    set.into_iter().collect()
}

/// Relation F1 with the `none` label excluded from both counts.
pub fn relation_f1<S: AsRef<str>>(pred: &[S], gold: &[S], none_label: &str) -> Result<Prf> {
    check_lengths(pred.len(), gold.len(), "predicted relations")?;
    let (mut tp, mut np, mut ng) = (0, 0, 0);
    for (p, g) in pred.iter().zip(gold) {
        let (p, g) = (p.as_ref(), g.as_ref());
        np += usize::from(p != none_label);
        ng += usize::from(g != none_label);
        tp += usize::from(p == g && g != none_label);
    }
    Ok(Prf::from_counts(tp, np, ng))
}

/// Gold relation with the entity types of its arguments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TypedRelation {
    pub subject_type: String,
    pub object_type: String,
    pub relation: String,
}

/// Relation F1 over instances whose subject or object has `entity_type`.
/// An instance whose two arguments share that type is counted once.
pub fn entity_label_relation_f1<S: AsRef<str>>(
    pred: &[S],
    gold: &[TypedRelation],
    entity_type: &str,
    none_label: &str,
) -> Result<Prf> {
    check_lengths(pred.len(), gold.len(), "predicted relations")?;
    let (p, g): (Vec<&str>, Vec<&str>) = pred
        .iter()
        .zip(gold)
        .filter(|(_, g)| g.subject_type == entity_type || g.object_type == entity_type)
        .map(|(p, g)| (p.as_ref(), g.relation.as_str()))
        .unzip();
    relation_f1(&p, &g, none_label)
}

/// `k` entries per example drawn uniformly without replacement.
pub fn random_retrieval_ablation(
    num_examples: usize,
    kc: &[KnowledgeEntry],
    k: usize,
    seed: u64,
) -> Vec<RetrievalResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let take = k.min(kc.len());
    (0..num_examples)
        .map(|_| {
            let items = rand::seq::index::sample(&mut rng, kc.len(), take)
                .into_iter()
                .map(|j| RetrievedItem {
                    entry_id: kc[j].entry_id,
                    score: 0.0,
                    value: kc[j].value.clone(),
                })
                .collect();
            RetrievalResult { items, k_requested: k }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderComparison {
    pub viterbi: Prf,
    pub marginal: Prf,
    pub agreement: f64,
    pub tokens: usize,
}

/// Viterbi versus position-wise marginal argmax on the same potentials.
pub fn marginal_decode_comparison<S: AsRef<str>>(
    potentials: &[Potentials],
    gold: &[Vec<S>],
    labels: &[String],
) -> Result<DecoderComparison> {
    check_lengths(potentials.len(), gold.len(), "potentials")?;
    let mut vit = Vec::with_capacity(potentials.len());
    let mut marg = Vec::with_capacity(potentials.len());
    let (mut same, mut total) = (0usize, 0usize);
    for pot in potentials {
        if pot.num_labels() != labels.len() {
            return Err(Error::Dimension {
                what: "label set".into(),
                expected: labels.len(),
                found: pot.num_labels(),
            });
        }
        let v = viterbi_decode(pot);
        let m = forward_backward(pot).argmax_labels();
        same += v.iter().zip(&m).filter(|(a, b)| a == b).count();
        total += v.len();
        vit.push(v.iter().map(|&y| labels[y].clone()).collect::<Vec<_>>());
        marg.push(m.iter().map(|&y| labels[y].clone()).collect::<Vec<_>>());
    }
    let gold: Vec<Vec<String>> = gold
        .iter()
        .map(|g| g.iter().map(|t| t.as_ref().to_string()).collect())
        .collect();
    Ok(DecoderComparison {
        viterbi: span_f1(&vit, &gold)?,
        marginal: span_f1(&marg, &gold)?,
        agreement: if total == 0 { 1.0 } else { same as f64 / total as f64 },
        tokens: total,
    })
}

/// One line of a metrics report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(flatten)]
    pub scores: Prf,
}

pub fn report_jsonl(records: &[MetricRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("metric records serialize") + "\n")
        .collect()
}

pub fn summary_table(records: &[MetricRecord]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<24} {:<12} {:>8} {:>8} {:>8} {:>6} {:>6} {:>6}", "metric", "label", "P", "R", "F1", "tp", "pred", "gold");
    for r in records {
        let s = &r.scores;
        let _ = writeln!(
            out,
            "{:<24} {:<12} {:>8.2} {:>8.2} {:>8.2} {:>6} {:>6} {:>6}",
            r.metric,
            r.label.as_deref().unwrap_or("-"),
            100.0 * s.precision,
            100.0 * s.recall,
            100.0 * s.f1,
            s.true_positives,
            s.predicted,
            s.gold
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn stray_inside_opens_span() {
        let spans = bio_spans(&seq("O I-PER I-PER B-LOC I-ORG"));
        assert_eq!(
            spans,
            vec![
                EntitySpan { start: 1, end: 2, label: "PER".into() },
                EntitySpan { start: 3, end: 3, label: "LOC".into() },
                EntitySpan { start: 4, end: 4, label: "ORG".into() },
            ]
        );
    }

    #[test]
    fn identity_is_perfect() {
        let g = vec![seq("B-PER I-PER O B-LOC")];
        let r = span_f1(&g, &g).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn empty_prediction() {
        let g = vec![seq("B-PER O")];
        let p = vec![seq("O O")];
        let r = span_f1(&p, &g).unwrap();
        assert_eq!((r.recall, r.f1), (0.0, 0.0));
    }

    #[test]
    fn hand_counted_three_sentences() {
        let gold = vec![seq("B-PER I-PER O"), seq("B-LOC O B-ORG"), seq("O B-PER O")];
        let pred = vec![seq("B-PER I-PER O"), seq("B-LOC O O"), seq("B-ORG O O")];
        let r = span_f1(&pred, &gold).unwrap();
        assert!((r.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.recall - 0.5).abs() < 1e-15);
        assert!((r.f1 - 4.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn labelwise_restricts() {
        let gold = vec![seq("B-PER O B-LOC")];
        let pred = vec![seq("B-PER O O")];
        assert_eq!(labelwise_f1(&pred, &gold, "PER").unwrap().f1, 1.0);
        assert_eq!(labelwise_f1(&pred, &gold, "LOC").unwrap().f1, 0.0);
        assert_eq!(entity_types(&gold), vec!["LOC".to_string(), "PER".to_string()]);
    }

    fn rel(s: &str, o: &str, r: &str) -> TypedRelation {
        TypedRelation {
            subject_type: s.into(),
            object_type: o.into(),
            relation: r.into(),
        }
    }

    #[test]
    fn member_of_counts_in_both_buckets() {
        let gold = [rel("per", "org", "/per/org/member_of")];
        let pred = ["/per/org/member_of"];
        assert_eq!(entity_label_relation_f1(&pred, &gold, "per", "none").unwrap().true_positives, 1);
        assert_eq!(entity_label_relation_f1(&pred, &gold, "org", "none").unwrap().true_positives, 1);
        assert_eq!(entity_label_relation_f1(&pred, &gold, "loc", "none").unwrap().gold, 0);
    }

    #[test]
    fn all_none_predictions() {
        let gold = [rel("per", "org", "a"), rel("loc", "per", "b")];
        let pred = ["none", "none"];
        for t in ["per", "org", "loc"] {
            assert_eq!(entity_label_relation_f1(&pred, &gold, t, "none").unwrap().f1, 0.0);
        }
    }

    #[test]
    fn two_instance_hand_count() {
        let gold = [rel("per", "org", "a"), rel("per", "loc", "b")];
        let pred = ["a", "c"];
        let per = entity_label_relation_f1(&pred, &gold, "per", "none").unwrap();
        assert_eq!((per.true_positives, per.predicted, per.gold), (1, 2, 2));
        assert_eq!(per.f1, 0.5);
        let loc = entity_label_relation_f1(&pred, &gold, "loc", "none").unwrap();
        assert_eq!(loc.f1, 0.0);
    }

    #[test]
    fn none_is_excluded() {
        let r = relation_f1(&["none", "x"], &["none", "x"], "none").unwrap();
        assert_eq!((r.true_positives, r.predicted, r.gold), (1, 1, 1));
    }

    #[test]
    fn whole_kc_when_k_equals_size() {
        let kc: Vec<KnowledgeEntry> = (0..4)
            .map(|i| KnowledgeEntry {
                entry_id: i,
                key: crate::corpus::Key::Text(String::new()),
                value: format!("v{i}"),
            })
            .collect();
        let a = random_retrieval_ablation(3, &kc, 4, 9);
        for r in &a {
            let mut ids: Vec<u64> = r.items.iter().map(|i| i.entry_id).collect();
            ids.sort();
            assert_eq!(ids, vec![0, 1, 2, 3]);
        }
        assert_eq!(a, random_retrieval_ablation(3, &kc, 4, 9));
    }

    #[test]
    fn table_lists_every_record() {
        let recs = vec![MetricRecord {
            metric: "span".into(),
            label: None,
            scores: Prf::from_counts(1, 2, 2),
        }];
        let t = summary_table(&recs);
        assert_eq!(t.lines().count(), 2);
        assert!(report_jsonl(&recs).contains("\"f1\":0.5"));
    }
}
