//! Finite-difference checks of whole-model training gradients, including the
//! alignment term whose with-context view is held fixed.

mod common;

use common::{numeric_grad, relative_error};
use rakie::config::Config;
use rakie::crf::{forward_backward, kl_alignment_loss, sequence_nll, CrfParams};
use rakie::data::{Channel, NerSentence};
use rakie::encoder::EncoderParams;
use rakie::model::{Head, Task, TaskModel};
use rakie::pipeline::{prepare_inputs, Dataset};
use rakie::re_model::{RelationInstance, ReParams, Span};
use rakie::retrieval::{RetrievalResult, RetrievedItem};
use rakie::trainer::{build_labels, build_vocab, task_loss_and_grads, Split};

const TOL: f64 = 1e-4;

fn ctx(values: &[&str]) -> RetrievalResult {
    RetrievalResult {
        items: values
            .iter()
            .enumerate()
            .map(|(i, v)| RetrievedItem {
                entry_id: i as u64,
                score: 1.0,
                value: v.to_string(),
            })
            .collect(),
        k_requested: values.len(),
    }
}

fn ner_data() -> (Dataset, Vec<RetrievalResult>) {
    let s = |t: &str, g: &str| NerSentence {
        image_id: "i".into(),
        tokens: t.split(' ').map(String::from).collect(),
        tags: g.split(' ').map(String::from).collect(),
    };
    let data = Dataset::Ner(vec![
        s("met Ann in Rome", "O B-PER O B-LOC"),
        s("Rome Corp grew", "B-ORG I-ORG O"),
        s("hello", "O"),
    ]);
    let contexts = vec![ctx(&["Ann is a singer", "Rome is a city"]), ctx(&["Rome Corp is a company"]), ctx(&[])];
    (data, contexts)
}

fn re_data() -> (Dataset, Vec<RetrievalResult>) {
    let r = |t: &str, s: [usize; 2], o: [usize; 2], rel: &str| RelationInstance {
        tokens: t.split(' ').map(String::from).collect(),
        subject: Span::from(s),
        object: Span::from(o),
        subject_type: "PER".into(),
        object_type: "LOC".into(),
        relation: rel.into(),
        image_id: "i".into(),
    };
    let data = Dataset::Re(vec![
        r("Ann lives in Rome", [0, 0], [3, 3], "place_of_residence"),
        r("Bob visited Paris today", [0, 0], [2, 2], "none"),
        r("Cy and Di met", [0, 0], [2, 2], "peer"),
    ]);
    let contexts = vec![ctx(&["Ann moved to Rome"]), ctx(&["Paris is a city"]), ctx(&["Cy knows Di"])];
    (data, contexts)
}

fn model(data: &Dataset, contexts: &[RetrievalResult], seed: u64) -> TaskModel {
    let cfg = Config {
        dim: 3,
        window: 1,
        seed,
        init_scale: 0.8,
        ..Config::default()
    };
    let split = Split {
        data,
        contexts: Some(contexts),
    };
    let vocab = build_vocab(split, Channel::Text, &cfg).unwrap();
    let labels = build_labels(data);
    let head = match data.task() {
        Task::Ner => Head::Crf(CrfParams::init(cfg.dim, labels.len(), seed + 1, 0.8)),
        Task::Re => Head::Re(ReParams::init(cfg.dim, labels.len(), seed + 1, 0.8)),
    };
    TaskModel {
        task: data.task(),
        channel: Channel::Text,
        labels,
        k: cfg.k,
        budget: cfg.budget,
        encoder: EncoderParams::init(vocab, cfg.dim, cfg.window, seed, cfg.init_scale),
        head,
    }
}

fn slot_mut(m: &mut TaskModel, slot: usize) -> &mut [f64] {
    match (slot, &mut m.head) {
        (0, _) => m.encoder.emb.as_mut_slice(),
        (1, _) => m.encoder.mix.as_mut_slice(),
        (2, Head::Crf(p)) => p.emission.as_mut_slice(),
        (3, Head::Crf(p)) => p.transitions.as_mut_slice(),
        (2, Head::Re(p)) => p.weights.as_mut_slice(),
        (3, Head::Re(p)) => &mut p.bias,
        _ => panic!("no slot {slot}"),
    }
}

/// Independent loss: NLL of the with-context view plus `λ`·KL against
/// with-context outputs frozen at `frozen`'s parameters.
fn reference_loss(m: &TaskModel, frozen: &TaskModel, data: &Dataset, contexts: &[RetrievalResult], lambda: f64) -> f64 {
    let ex = prepare_inputs(m, data, Some(contexts)).unwrap();
    let fixed = prepare_inputs(frozen, data, Some(contexts)).unwrap();
    let mut total = 0.0;
    for (i, (e, f)) in ex.iter().zip(&fixed).enumerate() {
        match data {
            Dataset::Ner(d) => {
                let gold: Vec<usize> = d[i].tags.iter().map(|t| m.label_index(t).unwrap()).collect();
                total += sequence_nll(&m.ner_potentials(&e.input).unwrap(), &gold).unwrap();
                if lambda > 0.0 && e.input.m > 0 {
                    let p = frozen.ner_posteriors(&f.input).unwrap();
                    let q = forward_backward(&m.ner_potentials(&e.bare).unwrap());
                    total += lambda * kl_alignment_loss(&p, &q).unwrap();
                }
            }
            Dataset::Re(d) => {
                let markers = e.markers.unwrap();
                let gold = m.label_index(&d[i].relation).unwrap();
                total -= m.re_distribution(&e.input, markers).unwrap()[gold].ln();
                if lambda > 0.0 && e.input.m > 0 {
                    let p = frozen.re_distribution(&f.input, markers).unwrap();
                    let q = m.re_distribution(&e.bare, markers).unwrap();
                    total += lambda * p.iter().zip(&q).map(|(a, b)| a * (a.ln() - b.ln())).sum::<f64>();
                }
            }
        }
    }
    total
}

fn check(data: &Dataset, contexts: &[RetrievalResult], lambda: f64) {
    for seed in 0..5 {
        let base = model(data, contexts, seed);
        let (loss, grads) = task_loss_and_grads(&base, data, Some(contexts), lambda).unwrap();
        let reference = reference_loss(&base, &base, data, contexts, lambda);
        assert!((loss - reference).abs() < 1e-9, "loss {loss} vs {reference}");
        for (slot, g) in grads.iter().enumerate() {
            let x = slot_mut(&mut base.clone(), slot).to_vec();
            let fd = numeric_grad(&x, |v| {
                let mut m = base.clone();
                slot_mut(&mut m, slot).copy_from_slice(v);
                reference_loss(&m, &base, data, contexts, lambda)
            });
            let err = relative_error(g, &fd);
            assert!(err <= TOL, "seed {seed} slot {slot} lambda {lambda}: rel err {err:.2e}");
        }
    }
}

#[test]
fn ner_gradients_without_alignment() {
    let (d, c) = ner_data();
    check(&d, &c, 0.0);
}

#[test]
fn ner_gradients_with_detached_alignment() {
    let (d, c) = ner_data();
    check(&d, &c, 1.0);
    check(&d, &c, 0.3);
}

#[test]
fn re_gradients_with_detached_alignment() {
    let (d, c) = re_data();
    check(&d, &c, 0.0);
    check(&d, &c, 1.0);
}
