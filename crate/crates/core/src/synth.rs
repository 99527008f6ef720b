//! Synthetic corpus and NER data where entity types are only recoverable
//! through retrieval.
//!
//! Every example is a short template sentence ending in a single-token entity
//! name. The template carries no type information. Each entity has an article
//! whose intro opens with a type cue word ("singer", "river", ...), and an
//! image whose feature is a noisy copy of the article prototype.
//!
//! Two subpopulations:
//! - text-informative: the name occurs in the knowledge corpus, the example
//!   image is unrelated noise;
//! - image-informative: the sentence uses an alias unknown to the corpus, the
//!   example image is close to the article image.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::corpus::{write_corpus, write_image_features, Anchor, Document, ImageRecord, SentenceLoc};
use crate::data::{write_ner, NerSentence};
use crate::error::Result;

pub const TYPES: [&str; 3] = ["PER", "LOC", "ORG"];
const TYPE_PRIOR: [f64; 3] = [0.5, 0.3, 0.2];
const CUES: [[&str; 4]; 3] = [
    ["singer", "actor", "painter", "poet"],
    ["city", "river", "village", "island"],
    ["company", "club", "agency", "band"],
];
const NEWS: [&str; 6] = [
    "Reporters spoke with",
    "Yesterday the crowd cheered for",
    "Everyone was talking about",
    "The article mentions",
    "Fans waited outside for",
    "A new statement came from",
];
const PHOTO: [&str; 4] = ["Photo of", "Snapshot taken with", "Picture showing", "Look at this shot of"];
const FILLER: [&str; 24] = [
    "ancient", "famous", "northern", "known", "many", "years", "since", "region", "history", "early", "later",
    "became", "widely", "local", "old", "century", "founded", "near", "grew", "during", "southern", "period",
    "large", "first",
];
const SYLLABLES: [&str; 20] = [
    "ka", "zo", "rin", "vel", "mu", "tar", "quo", "bex", "ly", "dra", "pim", "sul", "nor", "ge", "fi", "wat", "chu",
    "bre", "ix", "om",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    /// Share of text-informative examples; the rest are image-informative.
    pub text_fraction: f64,
    pub image_dim: usize,
    /// Noise on example images relative to their article prototype.
    pub query_noise: f64,
    /// Noise on article images relative to their prototype.
    pub kc_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            train: 500,
            dev: 100,
            test: 200,
            text_fraction: 1.0,
            image_dim: 16,
            query_noise: 0.3,
            kc_noise: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subpopulation {
    TextInformative,
    ImageInformative,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSplit {
    pub sentences: Vec<NerSentence>,
    pub kinds: Vec<Subpopulation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub corpus: Vec<Document>,
    /// Article images, the keys of the image knowledge corpus.
    pub kc_images: Vec<ImageRecord>,
    /// Images attached to examples, the image-retrieval queries.
    pub query_images: Vec<ImageRecord>,
    pub image_dim: usize,
    pub train: SynthSplit,
    pub dev: SynthSplit,
    pub test: SynthSplit,
}

struct Names {
    used: HashSet<String>,
}

impl Names {
    fn new() -> Self {
        let used = FILLER
            .iter()
            .chain(CUES.iter().flatten())
            .map(|s| s.to_string())
            .chain(NEWS.iter().chain(&PHOTO).flat_map(|t| t.split(' ')).map(str::to_lowercase))
            .collect();
        Names { used }
    }

    fn fresh(&mut self, rng: &mut ChaCha8Rng) -> String {
        loop {
            let n = rng.random_range(3..=4);
            let w: String = (0..n).map(|_| *SYLLABLES.choose(rng).expect("non-empty")).collect();
            if self.used.insert(w.clone()) {
                let mut c = w.chars();
                let first = c.next().expect("non-empty").to_ascii_uppercase();
                return std::iter::once(first).chain(c).collect();
            }
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn fillers(rng: &mut ChaCha8Rng, n: usize) -> String {
    (0..n).map(|_| *FILLER.choose(rng).expect("non-empty")).collect::<Vec<_>>().join(" ")
}

fn sample_type(rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (t, p) in TYPE_PRIOR.iter().enumerate() {
        acc += p;
        if u < acc {
            return t;
        }
    }
    TYPE_PRIOR.len() - 1
}

fn article(rng: &mut ChaCha8Rng, idx: usize, name: &str, ty: usize, region: &str) -> Document {
    let cue = *CUES[ty].choose(rng).expect("non-empty");
    let intro = vec![
        format!("{} {name} {}.", capitalize(cue), fillers(rng, 3)),
        format!("{} {}.", capitalize(&fillers(rng, 1)), fillers(rng, 4)),
    ];
    let lead = capitalize(&fillers(rng, 2));
    let history = format!("{lead} {region} {}.", fillers(rng, 2));
    let start = lead.chars().count() + 1;
    let end = start + region.chars().count();
    Document {
        doc_id: format!("doc_{idx}"),
        title: format!("{name} ({cue})"),
        sections: vec![vec![intro], vec![vec![history]]],
        intro_index: 0,
        anchors: vec![Anchor {
            loc: SentenceLoc {
                section: 1,
                paragraph: 0,
                sentence: 0,
            },
            start,
            end,
            entity: format!("region_{idx}"),
        }],
        images: vec![format!("img_doc_{idx}")],
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Deterministic in `cfg`.
pub fn generate(cfg: &SynthConfig) -> SynthData {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut names = Names::new();
    let total = cfg.train + cfg.dev + cfg.test;
    let mut corpus = Vec::with_capacity(total);
    let mut kc_images = Vec::with_capacity(total);
    let mut query_images = Vec::with_capacity(total);
    let mut sentences = Vec::with_capacity(total);
    let mut kinds = Vec::with_capacity(total);

    for idx in 0..total {
        let ty = sample_type(&mut rng);
        let name = names.fresh(&mut rng);
        let region = names.fresh(&mut rng);
        corpus.push(article(&mut rng, idx, &name, ty, &region));
        let proto = gaussian(&mut rng, cfg.image_dim);
        let kc_feat: Vec<f64> = gaussian(&mut rng, cfg.image_dim)
            .iter()
            .zip(&proto)
            .map(|(g, p)| p + cfg.kc_noise * g)
            .collect();
        kc_images.push(ImageRecord {
            image_id: format!("img_doc_{idx}"),
            doc_id: format!("doc_{idx}"),
            feature: to_f32(&kc_feat),
        });

        let kind = if rng.random::<f64>() < cfg.text_fraction {
            Subpopulation::TextInformative
        } else {
            Subpopulation::ImageInformative
        };
        let (template, mention, image) = match kind {
            Subpopulation::TextInformative => (*NEWS.choose(&mut rng).expect("non-empty"), name, gaussian(&mut rng, cfg.image_dim)),
            Subpopulation::ImageInformative => {
                let noisy = gaussian(&mut rng, cfg.image_dim)
                    .iter()
                    .zip(&proto)
                    .map(|(g, p)| p + cfg.query_noise * g)
                    .collect();
                (*PHOTO.choose(&mut rng).expect("non-empty"), names.fresh(&mut rng), noisy)
            }
        };
        let image_id = format!("ex_{idx}");
        query_images.push(ImageRecord {
            image_id: image_id.clone(),
            doc_id: "-".into(),
            feature: to_f32(&image),
        });
        let mut tokens: Vec<String> = template.split(' ').map(String::from).collect();
        let mut tags = vec!["O".to_string(); tokens.len()];
        tokens.push(mention);
        tags.push(format!("B-{}", TYPES[ty]));
        sentences.push(NerSentence { image_id, tokens, tags });
        kinds.push(kind);
    }

    let mut split = |n: usize| {
        let s: Vec<NerSentence> = sentences.drain(..n).collect();
        let k: Vec<Subpopulation> = kinds.drain(..n).collect();
        SynthSplit { sentences: s, kinds: k }
    };
    let train = split(cfg.train);
    let dev = split(cfg.dev);
    let test = split(cfg.test);
    SynthData {
        corpus,
        kc_images,
        query_images,
        image_dim: cfg.image_dim,
        train,
        dev,
        test,
    }
}

impl SynthData {
    /// Writes `corpus.jsonl`, `kc_images.tsv`, `query_images.tsv` and
    /// `{train,dev,test}.ner` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
        write_corpus(&dir.join("corpus.jsonl"), &self.corpus)?;
        write_image_features(&dir.join("kc_images.tsv"), self.image_dim, &self.kc_images)?;
        write_image_features(&dir.join("query_images.tsv"), self.image_dim, &self.query_images)?;
        write_ner(&dir.join("train.ner"), &self.train.sentences)?;
        write_ner(&dir.join("dev.ner"), &self.dev.sentences)?;
        write_ner(&dir.join("test.ner"), &self.test.sentences)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_text_kc;
    use crate::text_index::{tokenize, Bm25Params, TextIndex};

    fn small() -> SynthConfig {
        SynthConfig {
            train: 40,
            dev: 10,
            test: 10,
            text_fraction: 0.5,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_and_sized() {
        let a = generate(&small());
        assert_eq!(a, generate(&small()));
        assert_eq!(a.train.sentences.len(), 40);
        assert_eq!(a.corpus.len(), 60);
        assert_ne!(a, generate(&SynthConfig { seed: 1, ..small() }));
    }

    #[test]
    fn templates_never_reveal_type() {
        let d = generate(&small());
        for s in &d.train.sentences {
            let n = s.tokens.len();
            assert!(s.tags[..n - 1].iter().all(|t| t == "O"));
            for t in &s.tokens[..n - 1] {
                assert!(!CUES.iter().flatten().any(|c| c.eq_ignore_ascii_case(t)));
            }
        }
    }

    #[test]
    fn text_retrieval_finds_own_article_only_for_text_kind() {
        let d = generate(&small());
        let kc = build_text_kc(&d.corpus).unwrap();
        let idx = TextIndex::build(&kc.entries, Bm25Params::default()).unwrap();
        for (i, (s, k)) in d.train.sentences.iter().zip(&d.train.kinds).enumerate() {
            let r = idx.search(&s.tokens.join(" "), 10);
            match k {
                Subpopulation::TextInformative => {
                    let top = &r.items[0].value;
                    let toks = tokenize(top);
                    assert_eq!(toks[1], s.tokens.last().unwrap().to_lowercase(), "example {i}");
                }
                Subpopulation::ImageInformative => assert!(r.items.is_empty(), "example {i}"),
            }
        }
    }
}
