//! Training loops for task models and the mixture gate.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::crf::{backprop_potentials, kl_alignment_grad, log_partition, log_potentials, nll_potential_grad, sequence_score, CrfParams};
use crate::data::Channel;
use crate::encoder::{Encoder, EncoderGrad, EncoderParams, Vocab};
use crate::error::{Error, Result};
use crate::model::{augment_input, ExpertRef, Head, MoeBundle, Task, TaskModel};
use crate::moe::{gate_backward, gate_features, gate_logit, mixture_nll, GateGrad, GateParams};
use crate::optim::AdamW;
use crate::pipeline::{headline_f1, predict, predict_moe, prepare_inputs, Dataset, ImageTable, MoeInputs, PreparedInput, Weighting};
use crate::re_model::{backprop_logits, kl_logits, re_nll_gradient, relation_logits, ReGrad, ReParams};
use crate::retrieval::RetrievalResult;

/// A dataset with its materialized contexts (one per example) for one channel.
#[derive(Debug, Clone, Copy)]
pub struct Split<'a> {
    pub data: &'a Dataset,
    pub contexts: Option<&'a [RetrievalResult]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev_f1: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TaskModel,
    pub history: Vec<EpochReport>,
    /// 1-based epoch of the returned checkpoint.
    pub best_epoch: usize,
}

/// NER: `O` then the other training tags sorted. RE: training relations sorted.
pub fn build_labels(data: &Dataset) -> Vec<String> {
    let mut labels: Vec<String> = match data {
        Dataset::Ner(d) => d.iter().flat_map(|s| s.tags.iter().cloned()).filter(|t| t != "O").collect(),
        Dataset::Re(d) => d.iter().map(|r| r.relation.clone()).collect(),
    };
    labels.sort();
    labels.dedup();
    if data.task() == Task::Ner {
        labels.insert(0, "O".into());
    }
    labels
}

/// Vocabulary over the training inputs together with their contexts.
pub fn build_vocab(train: Split<'_>, channel: Channel, cfg: &Config) -> Result<Vocab> {
    let mut docs = Vec::with_capacity(train.data.len());
    for i in 0..train.data.len() {
        let x = match train.data {
            Dataset::Ner(d) => d[i].tokens.clone(),
            Dataset::Re(d) => d[i].marked()?.tokens,
        };
        let r = train.contexts.and_then(|c| c.get(i));
        docs.push(augment_input(channel, cfg.k, cfg.budget, &x, r)?.tokens);
    }
    Ok(Vocab::build(docs.iter().map(Vec::as_slice), cfg.min_df))
}

fn gold_indices(model: &TaskModel, data: &Dataset) -> Result<Vec<Vec<usize>>> {
    let lookup = |l: &str| {
        model
            .label_index(l)
            .ok_or_else(|| Error::InvalidInput(format!("label {l:?} not in the training label set")))
    };
    match data {
        Dataset::Ner(d) => d.iter().map(|s| s.tags.iter().map(|t| lookup(t)).collect()).collect(),
        Dataset::Re(d) => d.iter().map(|r| Ok(vec![lookup(&r.relation)?])).collect(),
    }
}

/// Dense gradient buffers in optimizer slot order: embeddings, mixing, head matrix, head vector.
struct Grads {
    slots: [Vec<f64>; 4],
}

impl Grads {
    fn new(model: &TaskModel) -> Self {
        let mut slots: [Vec<f64>; 4] = Default::default();
        for (s, p) in slots.iter_mut().zip(param_sizes(model)) {
            *s = vec![0.0; p];
        }
        Grads { slots }
    }

    fn clear(&mut self) {
        self.slots.iter_mut().for_each(|s| s.iter_mut().for_each(|v| *v = 0.0));
    }

    fn add_encoder(&mut self, g: &EncoderGrad, dim: usize) {
        for (&id, row) in &g.emb {
            let dst = &mut self.slots[0][id * dim..(id + 1) * dim];
            dst.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        self.slots[1].iter_mut().zip(g.mix.as_slice()).for_each(|(a, b)| *a += b);
    }

    fn add_head(&mut self, a: &[f64], b: &[f64]) {
        self.slots[2].iter_mut().zip(a).for_each(|(x, y)| *x += y);
        self.slots[3].iter_mut().zip(b).for_each(|(x, y)| *x += y);
    }

    fn scale(&mut self, s: f64) {
        self.slots.iter_mut().for_each(|v| v.iter_mut().for_each(|x| *x *= s));
    }

    fn is_finite(&self) -> bool {
        self.slots.iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

fn param_sizes(model: &TaskModel) -> [usize; 4] {
    let (a, b) = match &model.head {
        Head::Crf(p) => (p.emission.as_slice().len(), p.transitions.as_slice().len()),
        Head::Re(p) => (p.weights.as_slice().len(), p.bias.len()),
    };
    [model.encoder.emb.as_slice().len(), model.encoder.mix.as_slice().len(), a, b]
}

fn apply_update(model: &mut TaskModel, opt: &mut AdamW, g: &Grads) {
    opt.begin_step();
    opt.update(0, model.encoder.emb.as_mut_slice(), &g.slots[0]);
    opt.update(1, model.encoder.mix.as_mut_slice(), &g.slots[1]);
    match &mut model.head {
        Head::Crf(p) => {
            opt.update(2, p.emission.as_mut_slice(), &g.slots[2]);
            opt.update(3, p.transitions.as_mut_slice(), &g.slots[3]);
        }
        Head::Re(p) => {
            opt.update(2, p.weights.as_mut_slice(), &g.slots[2]);
            opt.update(3, &mut p.bias, &g.slots[3]);
        }
    }
}

/// Loss of one example; gradients are added to `acc`.
fn ner_step(model: &TaskModel, ex: &PreparedInput, gold: &[usize], lambda: f64, acc: &mut Grads) -> Result<f64> {
    let crf = model.crf()?;
    let dim = model.encoder.dim();
    let enc = model.encode_input(&ex.input);
    let pot = log_potentials(&enc, crf);
    let (mut loss, dpot) = nll_potential_grad(&pot, gold)?;
    let g = backprop_potentials(&enc, crf, &dpot);
    acc.add_head(g.emission.as_slice(), g.transitions.as_slice());
    acc.add_encoder(&model.encoder.backward(&ex.input, &g.reps), dim);

    if lambda > 0.0 && ex.input.m > 0 {
        // The with-context view is a fixed target; only the bare view is pulled toward it.
        let enc0 = model.encode_input(&ex.bare);
        let pot0 = log_potentials(&enc0, crf);
        let kl = kl_alignment_grad(&pot, &pot0)?;
        loss += lambda * kl.loss;
        let mut d0 = kl.without_context;
        d0.as_mut_slice().iter_mut().for_each(|v| *v *= lambda);
        let g0 = backprop_potentials(&enc0, crf, &d0);
        acc.add_head(g0.emission.as_slice(), g0.transitions.as_slice());
        acc.add_encoder(&model.encoder.backward(&ex.bare, &g0.reps), dim);
    }
    Ok(loss)
}

fn add_re_grad(model: &TaskModel, input: &crate::context::AugmentedInput, g: &ReGrad, rows: usize, acc: &mut Grads) {
    acc.add_head(g.weights.as_slice(), &g.bias);
    acc.add_encoder(&model.encoder.backward(input, &g.reps_matrix(rows)), model.encoder.dim());
}

fn re_step(model: &TaskModel, ex: &PreparedInput, gold: usize, lambda: f64, acc: &mut Grads) -> Result<f64> {
    let re = model.re()?;
    let markers = ex.markers.expect("RE inputs carry markers");
    let rows = markers.subject.max(markers.object) + 1;
    let enc = model.encoder.encode_prefix(&ex.input, rows);
    let (mut loss, g) = re_nll_gradient(&enc, markers, re, gold)?;
    add_re_grad(model, &ex.input, &g, rows, acc);

    if lambda > 0.0 && ex.input.m > 0 {
        let enc0 = model.encoder.encode_prefix(&ex.bare, rows);
        let (kl, _, d0) = kl_logits(&relation_logits(&enc, markers, re), &relation_logits(&enc0, markers, re));
        loss += lambda * kl;
        let d0: Vec<f64> = d0.iter().map(|v| v * lambda).collect();
        let g0 = backprop_logits(&enc0, markers, re, &d0);
        add_re_grad(model, &ex.bare, &g0, rows, acc);
    }
    Ok(loss)
}

fn init_model(train: Split<'_>, channel: Channel, cfg: &Config) -> Result<TaskModel> {
    let labels = build_labels(train.data);
    if labels.is_empty() {
        return Err(Error::InvalidInput("training data has no labels".into()));
    }
    let vocab = build_vocab(train, channel, cfg)?;
    let encoder = EncoderParams::init(vocab, cfg.dim, cfg.window, cfg.seed, cfg.init_scale);
    let head_seed = cfg.seed.wrapping_add(1);
    let head = match train.data.task() {
        Task::Ner => Head::Crf(CrfParams::init(cfg.dim, labels.len(), head_seed, cfg.init_scale)),
        Task::Re => Head::Re(ReParams::init(cfg.dim, labels.len(), head_seed, cfg.init_scale)),
    };
    Ok(TaskModel {
        task: train.data.task(),
        channel,
        labels,
        k: cfg.k,
        budget: cfg.budget,
        encoder,
        head,
    })
}

fn dev_f1(model: &TaskModel, dev: Option<Split<'_>>, cfg: &Config) -> Result<Option<f64>> {
    dev.map(|d| headline_f1(&predict(model, d.data, d.contexts)?, d.data, &cfg.none_label))
        .transpose()
}

/// Minimizes NLL plus `λ`·alignment with AdamW, keeping the best dev checkpoint
/// (the last epoch when there is no dev split).
pub fn train_task_model(train: Split<'_>, dev: Option<Split<'_>>, channel: Channel, cfg: &Config) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.data.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    let train = Split {
        contexts: if channel == Channel::None { None } else { train.contexts },
        ..train
    };
    let dev = dev.map(|d| Split {
        contexts: if channel == Channel::None { None } else { d.contexts },
        ..d
    });
    let mut model = init_model(train, channel, cfg)?;
    let examples = prepare_inputs(&model, train.data, train.contexts)?;
    let gold = gold_indices(&model, train.data)?;
    let lambda = match (channel, model.task) {
        (Channel::None, _) => 0.0,
        (_, Task::Re) if !cfg.align_re => 0.0,
        _ => cfg.lambda,
    };

    let mut opt = AdamW::new(cfg.into(), &param_sizes(&model));
    let mut acc = Grads::new(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, TaskModel)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            acc.clear();
            for &i in batch {
                let loss = match model.task {
                    Task::Ner => ner_step(&model, &examples[i], &gold[i], lambda, &mut acc)?,
                    Task::Re => re_step(&model, &examples[i], gold[i][0], lambda, &mut acc)?,
                };
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        example: i,
                        detail: format!("loss = {loss}"),
                    });
                }
                total += loss;
            }
            acc.scale(1.0 / batch.len() as f64);
            if !acc.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    example: batch[0],
                    detail: "non-finite gradient in batch".into(),
                });
            }
            apply_update(&mut model, &mut opt, &acc);
        }
        let f1 = dev_f1(&model, dev, cfg)?;
        history.push(EpochReport {
            epoch,
            train_loss: total / examples.len() as f64,
            dev_f1: f1,
        });
        let score = f1.unwrap_or(f64::NEG_INFINITY);
        let improved = match &best {
            None => true,
            Some((b, _, _)) => f1.is_none() || score > *b,
        };
        if improved {
            best = Some((score, epoch, model.clone()));
        }
    }
    let (_, best_epoch, model) = best.unwrap_or((0.0, 0, model));
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
    })
}

/// A dataset with both channels' contexts and the image features the gate reads.
#[derive(Debug, Clone, Copy)]
pub struct MoeSplit<'a> {
    pub data: &'a Dataset,
    pub text_contexts: Option<&'a [RetrievalResult]>,
    pub image_contexts: Option<&'a [RetrievalResult]>,
    pub images: &'a ImageTable,
}

#[derive(Debug, Clone)]
pub struct MoeOutcome {
    pub gate: GateParams,
    pub history: Vec<EpochReport>,
    pub best_epoch: usize,
    /// Examples whose mixture probability hit the epsilon floor.
    pub floored: usize,
}

/// `ln P_e(gold)` for every example: the exact sequence probability for NER.
pub fn expert_gold_log_probs(model: &TaskModel, data: &Dataset, contexts: Option<&[RetrievalResult]>) -> Result<Vec<f64>> {
    let inputs = prepare_inputs(model, data, contexts)?;
    let mut out = Vec::with_capacity(inputs.len());
    for (i, p) in inputs.iter().enumerate() {
        let lp = match data {
            Dataset::Ner(d) => {
                let ids: Option<Vec<usize>> = d[i].tags.iter().map(|t| model.label_index(t)).collect();
                match ids {
                    Some(ids) => {
                        let pot = model.ner_potentials(&p.input)?;
                        (sequence_score(&pot, &ids)? - log_partition(&pot)).min(0.0)
                    }
                    None => f64::NEG_INFINITY,
                }
            }
            Dataset::Re(d) => match model.label_index(&d[i].relation) {
                Some(y) => {
                    let markers = p.markers.expect("RE inputs carry markers");
                    let rows = markers.subject.max(markers.object) + 1;
                    let enc = model.encoder.encode_prefix(&p.input, rows);
                    let logits = relation_logits(&enc, markers, model.re()?);
                    logits[y] - crate::tensor::log_sum_exp(logits.iter().copied())
                }
                None => f64::NEG_INFINITY,
            },
        };
        out.push(lp);
    }
    Ok(out)
}

fn apply_gate_update(gate: &mut GateParams, opt: &mut AdamW, g: &GateGrad, dense_emb: &mut [f64]) {
    let d = gate.text_dim();
    dense_emb.iter_mut().for_each(|v| *v = 0.0);
    for (&id, row) in &g.emb {
        dense_emb[id * d..(id + 1) * d].copy_from_slice(row);
    }
    opt.begin_step();
    opt.update(0, gate.emb.as_mut_slice(), dense_emb);
    opt.update(1, &mut gate.u, &g.u);
    let mut b = [gate.bias];
    opt.update(2, &mut b, &[g.bias]);
    gate.bias = b[0];
}

fn accumulate(acc: &mut GateGrad, g: &GateGrad, d: usize) {
    for (&id, row) in &g.emb {
        let dst = acc.emb.entry(id).or_insert_with(|| vec![0.0; d]);
        dst.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    acc.u.iter_mut().zip(&g.u).for_each(|(a, b)| *a += b);
    acc.bias += g.bias;
}

/// Trains only the gate; both experts are read, never modified.
pub fn train_moe(
    text_model: &TaskModel,
    image_model: &TaskModel,
    train: MoeSplit<'_>,
    dev: Option<MoeSplit<'_>>,
    cfg: &Config,
) -> Result<MoeOutcome> {
    cfg.validate()?;
    if train.data.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    if text_model.task != train.data.task() || image_model.task != train.data.task() {
        return Err(Error::InvalidInput("expert task differs from the dataset task".into()));
    }
    if text_model.labels != image_model.labels {
        return Err(Error::InvalidInput("experts use different label sets".into()));
    }
    let lp_text = expert_gold_log_probs(text_model, train.data, train.text_contexts)?;
    let lp_image = expert_gold_log_probs(image_model, train.data, train.image_contexts)?;

    let docs: Vec<&[String]> = (0..train.data.len()).map(|i| train.data.tokens(i)).collect();
    let vocab = Vocab::build(docs, cfg.min_df);
    let mut gate = GateParams::init(vocab, cfg.dim, train.images.dim(), cfg.seed.wrapping_add(3), cfg.init_scale);
    let n = train.data.len();
    for i in 0..n {
        gate_features(train.data.tokens(i), train.images.get(train.data.image_id(i))?, &gate)?;
    }

    let sizes = [gate.emb.as_slice().len(), gate.u.len(), 1];
    let mut opt = AdamW::new(cfg.into(), &sizes);
    let mut dense_emb = vec![0.0; sizes[0]];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(4));
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.moe_epochs);
    let mut best: Option<(f64, usize, GateParams)> = None;
    let mut floored = 0;
    let d = gate.text_dim();

    for epoch in 1..=cfg.moe_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.moe_batch_size) {
            let mut acc = GateGrad {
                emb: Default::default(),
                u: vec![0.0; gate.u.len()],
                bias: 0.0,
            };
            for &i in batch {
                let f = gate_features(train.data.tokens(i), train.images.get(train.data.image_id(i))?, &gate)?;
                let nll = mixture_nll(gate_logit(&f, &gate), lp_text[i], lp_image[i]);
                if nll.floored && epoch == 1 {
                    floored += 1;
                }
                if !nll.loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        example: i,
                        detail: format!("mixture loss = {}", nll.loss),
                    });
                }
                total += nll.loss;
                accumulate(&mut acc, &gate_backward(&f, &gate, nll.dlogit), d);
            }
            let s = 1.0 / batch.len() as f64;
            acc.emb.values_mut().for_each(|r| r.iter_mut().for_each(|v| *v *= s));
            acc.u.iter_mut().for_each(|v| *v *= s);
            acc.bias *= s;
            apply_gate_update(&mut gate, &mut opt, &acc, &mut dense_emb);
            if !gate.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    example: batch[0],
                    detail: "gate parameters became non-finite".into(),
                });
            }
        }
        let f1 = match dev {
            Some(dv) => {
                let inputs = MoeInputs {
                    text_model,
                    image_model,
                    text_contexts: dv.text_contexts,
                    image_contexts: dv.image_contexts,
                };
                let pred = predict_moe(&inputs, dv.data, Weighting::Gate(&gate, dv.images))?;
                Some(headline_f1(&pred, dv.data, &cfg.none_label)?)
            }
            None => None,
        };
        history.push(EpochReport {
            epoch,
            train_loss: total / n as f64,
            dev_f1: f1,
        });
        let score = f1.unwrap_or(f64::NEG_INFINITY);
        let improved = match &best {
            None => true,
            Some((b, _, _)) => f1.is_none() || score > *b,
        };
        if improved {
            best = Some((score, epoch, gate.clone()));
        }
    }
    let (_, best_epoch, gate) = best.unwrap_or((0.0, 0, gate));
    Ok(MoeOutcome {
        gate,
        history,
        best_epoch,
        floored,
    })
}

/// Loads both expert files, trains the gate and returns a bundle carrying the experts' checksums.
pub fn train_moe_files(
    text_path: &std::path::Path,
    image_path: &std::path::Path,
    train: MoeSplit<'_>,
    dev: Option<MoeSplit<'_>>,
    cfg: &Config,
) -> Result<(MoeBundle, MoeOutcome)> {
    let text_expert = ExpertRef::for_file(text_path)?;
    let image_expert = ExpertRef::for_file(image_path)?;
    let text_model = text_expert.load_verified(None)?;
    let image_model = image_expert.load_verified(None)?;
    let outcome = train_moe(&text_model, &image_model, train, dev, cfg)?;
    let bundle = MoeBundle {
        task: text_model.task,
        text_expert,
        image_expert,
        gate: outcome.gate.clone(),
    };
    Ok((bundle, outcome))
}

/// Summed training loss and slot gradients over `data`, without an update.
pub fn task_loss_and_grads(model: &TaskModel, data: &Dataset, contexts: Option<&[RetrievalResult]>, lambda: f64) -> Result<(f64, [Vec<f64>; 4])> {
    let examples = prepare_inputs(model, data, contexts)?;
    let gold = gold_indices(model, data)?;
    let mut acc = Grads::new(model);
    let mut total = 0.0;
    for (ex, g) in examples.iter().zip(&gold) {
        total += match model.task {
            Task::Ner => ner_step(model, ex, g, lambda, &mut acc)?,
            Task::Re => re_step(model, ex, g[0], lambda, &mut acc)?,
        };
    }
    Ok((total, acc.slots))
}
