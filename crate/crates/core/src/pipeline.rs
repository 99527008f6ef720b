//! Glue between datasets, retrieval, task models and metrics.

use std::collections::HashMap;

use crate::context::AugmentedInput;
use crate::corpus::ImageRecord;
use crate::crf::Posteriors;
use crate::data::{Channel, Contexts, NerSentence};
use crate::error::{Error, Result};
use crate::eval::{entity_label_relation_f1, entity_types, labelwise_f1, relation_f1, span_f1, MetricRecord, TypedRelation};
use crate::model::{Task, TaskModel};
use crate::moe::{gate, gate_features, moe_decode_ner, moe_decode_re, GateParams, MixtureWeights};
use crate::re_model::{MarkerPositions, RelationInstance};
use crate::retrieval::RetrievalResult;
use crate::text_index::TextIndex;
use crate::vector_index::VectorIndex;

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Ner(Vec<NerSentence>),
    Re(Vec<RelationInstance>),
}

impl Dataset {
    pub fn task(&self) -> Task {
        match self {
            Dataset::Ner(_) => Task::Ner,
            Dataset::Re(_) => Task::Re,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Dataset::Ner(d) => d.len(),
            Dataset::Re(d) => d.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Original sentence tokens, without relation markers.
    pub fn tokens(&self, i: usize) -> &[String] {
        match self {
            Dataset::Ner(d) => &d[i].tokens,
            Dataset::Re(d) => &d[i].tokens,
        }
    }

    pub fn image_id(&self, i: usize) -> &str {
        match self {
            Dataset::Ner(d) => &d[i].image_id,
            Dataset::Re(d) => &d[i].image_id,
        }
    }

    pub fn ner(&self) -> Result<&[NerSentence]> {
        match self {
            Dataset::Ner(d) => Ok(d),
            Dataset::Re(_) => Err(Error::InvalidInput("expected an NER dataset".into())),
        }
    }

    pub fn re(&self) -> Result<&[RelationInstance]> {
        match self {
            Dataset::Re(d) => Ok(d),
            Dataset::Ner(_) => Err(Error::InvalidInput("expected an RE dataset".into())),
        }
    }
}

/// Image features keyed by image id.
#[derive(Debug, Clone, Default)]
pub struct ImageTable {
    dim: usize,
    map: HashMap<String, Vec<f32>>,
}

impl ImageTable {
    pub fn new(dim: usize, records: Vec<ImageRecord>) -> Result<Self> {
        let mut map = HashMap::with_capacity(records.len());
        for r in records {
            if r.feature.len() != dim {
                return Err(Error::Dimension {
                    what: format!("image {}", r.image_id),
                    expected: dim,
                    found: r.feature.len(),
                });
            }
            if map.insert(r.image_id.clone(), r.feature).is_some() {
                return Err(Error::InvalidInput(format!("duplicate image id {}", r.image_id)));
            }
        }
        Ok(ImageTable { dim, map })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, image_id: &str) -> Result<&[f32]> {
        self.map
            .get(image_id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::InvalidInput(format!("no image features for {image_id:?}")))
    }
}

pub fn retrieve_text(index: &TextIndex, data: &Dataset, k: usize) -> Contexts {
    let results = (0..data.len()).map(|i| index.search(&data.tokens(i).join(" "), k)).collect();
    Contexts {
        channel: Channel::Text,
        k,
        results,
    }
}

pub fn retrieve_image(index: &VectorIndex, data: &Dataset, images: &ImageTable, k: usize) -> Result<Contexts> {
    let results = (0..data.len())
        .map(|i| index.search(images.get(data.image_id(i))?, k))
        .collect::<Result<_>>()?;
    Ok(Contexts {
        channel: Channel::Image,
        k,
        results,
    })
}

fn context_at(contexts: Option<&[RetrievalResult]>, i: usize) -> Option<&RetrievalResult> {
    contexts.and_then(|c| c.get(i))
}

fn check_contexts(contexts: Option<&[RetrievalResult]>, len: usize) -> Result<()> {
    match contexts {
        Some(c) if c.len() != len => Err(Error::Dimension {
            what: "contexts".into(),
            expected: len,
            found: c.len(),
        }),
        _ => Ok(()),
    }
}

/// Model input for example `i`: the sentence, or the marked sentence for RE.
pub struct PreparedInput {
    pub input: AugmentedInput,
    pub bare: AugmentedInput,
    pub markers: Option<MarkerPositions>,
}

pub fn prepare_inputs(
    model: &TaskModel,
    data: &Dataset,
    contexts: Option<&[RetrievalResult]>,
) -> Result<Vec<PreparedInput>> {
    check_contexts(contexts, data.len())?;
    if model.task != data.task() {
        return Err(Error::InvalidInput(format!("{} model applied to a {} dataset", model.task, data.task())));
    }
    (0..data.len())
        .map(|i| {
            let (x, markers) = match data {
                Dataset::Ner(d) => (d[i].tokens.clone(), None),
                Dataset::Re(d) => {
                    let m = d[i].marked()?;
                    let pos = MarkerPositions::from(&m);
                    (m.tokens, Some(pos))
                }
            };
            let input = model.augment(&x, context_at(contexts, i))?;
            let bare = model.augment(&x, None)?;
            Ok(PreparedInput { input, bare, markers })
        })
        .collect()
}

pub fn predict_ner(model: &TaskModel, data: &Dataset, contexts: Option<&[RetrievalResult]>) -> Result<Vec<Vec<String>>> {
    prepare_inputs(model, data, contexts)?
        .iter()
        .map(|p| model.ner_viterbi(&p.input))
        .collect()
}

pub fn ner_posteriors(model: &TaskModel, data: &Dataset, contexts: Option<&[RetrievalResult]>) -> Result<Vec<Posteriors>> {
    prepare_inputs(model, data, contexts)?
        .iter()
        .map(|p| model.ner_posteriors(&p.input))
        .collect()
}

pub fn re_distributions(model: &TaskModel, data: &Dataset, contexts: Option<&[RetrievalResult]>) -> Result<Vec<Vec<f64>>> {
    prepare_inputs(model, data, contexts)?
        .iter()
        .map(|p| model.re_distribution(&p.input, p.markers.expect("RE inputs carry markers")))
        .collect()
}

pub fn predict_re(model: &TaskModel, data: &Dataset, contexts: Option<&[RetrievalResult]>) -> Result<Vec<String>> {
    Ok(re_distributions(model, data, contexts)?
        .iter()
        .map(|d| model.labels[crate::tensor::argmax(d)].clone())
        .collect())
}

/// Predictions as label strings: one tag sequence (NER) or one label (RE) per example.
#[derive(Debug, Clone, PartialEq)]
pub enum Predictions {
    Ner(Vec<Vec<String>>),
    Re(Vec<String>),
}

pub fn predict(model: &TaskModel, data: &Dataset, contexts: Option<&[RetrievalResult]>) -> Result<Predictions> {
    match model.task {
        Task::Ner => predict_ner(model, data, contexts).map(Predictions::Ner),
        Task::Re => predict_re(model, data, contexts).map(Predictions::Re),
    }
}

/// How the two expert outputs are combined.
#[derive(Debug, Clone, Copy)]
pub enum Weighting<'a> {
    Gate(&'a GateParams, &'a ImageTable),
    Fixed(f64),
}

impl Weighting<'_> {
    pub fn weights(&self, data: &Dataset, i: usize) -> Result<MixtureWeights> {
        match *self {
            Weighting::Fixed(p) => Ok(MixtureWeights::new(p)),
            Weighting::Gate(g, images) => {
                let f = gate_features(data.tokens(i), images.get(data.image_id(i))?, g)?;
                Ok(gate(&f, g))
            }
        }
    }
}

/// Mixture of two experts' outputs, each fed its own retrieved context.
pub struct MoeInputs<'a> {
    pub text_model: &'a TaskModel,
    pub image_model: &'a TaskModel,
    pub text_contexts: Option<&'a [RetrievalResult]>,
    pub image_contexts: Option<&'a [RetrievalResult]>,
}

pub fn predict_moe(experts: &MoeInputs<'_>, data: &Dataset, weighting: Weighting<'_>) -> Result<Predictions> {
    let (t, im) = (experts.text_model, experts.image_model);
    if t.labels != im.labels {
        return Err(Error::InvalidInput("experts use different label sets".into()));
    }
    match data.task() {
        Task::Ner => {
            let pt = ner_posteriors(t, data, experts.text_contexts)?;
            let pi = ner_posteriors(im, data, experts.image_contexts)?;
            let mut out = Vec::with_capacity(data.len());
            for i in 0..data.len() {
                let w = weighting.weights(data, i)?;
                out.push(t.label_names(&moe_decode_ner(&pt[i], &pi[i], w)?));
            }
            Ok(Predictions::Ner(out))
        }
        Task::Re => {
            let dt = re_distributions(t, data, experts.text_contexts)?;
            let di = re_distributions(im, data, experts.image_contexts)?;
            let mut out = Vec::with_capacity(data.len());
            for i in 0..data.len() {
                let w = weighting.weights(data, i)?;
                out.push(t.labels[moe_decode_re(&dt[i], &di[i], w)?].clone());
            }
            Ok(Predictions::Re(out))
        }
    }
}

/// Overall score first, then per entity type.
pub fn evaluate(pred: &Predictions, gold: &Dataset, none_label: &str) -> Result<Vec<MetricRecord>> {
    let mut out = Vec::new();
    match (pred, gold) {
        (Predictions::Ner(p), Dataset::Ner(g)) => {
            let gold_tags: Vec<Vec<String>> = g.iter().map(|s| s.tags.clone()).collect();
            out.push(MetricRecord {
                metric: "span_f1".into(),
                label: None,
                scores: span_f1(p, &gold_tags)?,
            });
            for label in entity_types(&gold_tags) {
                out.push(MetricRecord {
                    metric: "labelwise_f1".into(),
                    scores: labelwise_f1(p, &gold_tags, &label)?,
                    label: Some(label),
                });
            }
        }
        (Predictions::Re(p), Dataset::Re(g)) => {
            let gold_rel: Vec<String> = g.iter().map(|r| r.relation.clone()).collect();
            out.push(MetricRecord {
                metric: "relation_f1".into(),
                label: None,
                scores: relation_f1(p, &gold_rel, none_label)?,
            });
            let typed: Vec<TypedRelation> = g
                .iter()
                .map(|r| TypedRelation {
                    subject_type: r.subject_type.clone(),
                    object_type: r.object_type.clone(),
                    relation: r.relation.clone(),
                })
                .collect();
            let mut types: Vec<&str> = g
                .iter()
                .flat_map(|r| [r.subject_type.as_str(), r.object_type.as_str()])
                .collect();
            types.sort_unstable();
            types.dedup();
            for ty in types {
                out.push(MetricRecord {
                    metric: "entity_label_relation_f1".into(),
                    label: Some(ty.to_string()),
                    scores: entity_label_relation_f1(p, &typed, ty, none_label)?,
                });
            }
        }
        _ => return Err(Error::InvalidInput("predictions and gold data are for different tasks".into())),
    }
    Ok(out)
}

/// Overall F1 (fraction) from [`evaluate`].
pub fn headline_f1(pred: &Predictions, gold: &Dataset, none_label: &str) -> Result<f64> {
    Ok(evaluate(pred, gold, none_label)?[0].scores.f1)
}

/// Reads an NER column file or an RE JSON-lines file, chosen by its header.
pub fn read_dataset(path: &std::path::Path) -> Result<Dataset> {
    use std::io::BufRead;
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut first = String::new();
    std::io::BufReader::new(f)
        .read_line(&mut first)
        .map_err(|e| Error::io(path, e))?;
    if first.starts_with('#') {
        Ok(Dataset::Ner(crate::data::read_ner(path)?))
    } else if first.starts_with('{') {
        Ok(Dataset::Re(crate::data::read_re(path)?))
    } else {
        Err(Error::format("dataset", format!("{}: unrecognized header", path.display())))
    }
}

/// Writes `gold` with its labels replaced by `pred`, in the dataset's own format.
pub fn write_predictions(path: &std::path::Path, gold: &Dataset, pred: &Predictions) -> Result<()> {
    match (gold, pred) {
        (Dataset::Ner(g), Predictions::Ner(p)) if g.len() == p.len() => {
            let out: Vec<NerSentence> = g
                .iter()
                .zip(p)
                .map(|(s, tags)| NerSentence {
                    tags: tags.clone(),
                    ..s.clone()
                })
                .collect();
            crate::data::write_ner(path, &out)
        }
        (Dataset::Re(g), Predictions::Re(p)) if g.len() == p.len() => {
            let out: Vec<RelationInstance> = g
                .iter()
                .zip(p)
                .map(|(r, rel)| RelationInstance {
                    relation: rel.clone(),
                    ..r.clone()
                })
                .collect();
            crate::data::write_re(path, &out)
        }
        _ => Err(Error::InvalidInput("predictions do not match the dataset".into())),
    }
}

/// Labels of a dataset as predictions, for scoring a predictions file against gold.
pub fn as_predictions(data: &Dataset) -> Predictions {
    match data {
        Dataset::Ner(d) => Predictions::Ner(d.iter().map(|s| s.tags.clone()).collect()),
        Dataset::Re(d) => Predictions::Re(d.iter().map(|r| r.relation.clone()).collect()),
    }
}
