//! Serialized task models and mixture bundles.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::context::{assemble_context, concat_and_chunk, AugmentedInput};
use crate::crf::{forward_backward, log_potentials, viterbi_decode, CrfParams, Posteriors, Potentials};
use crate::data::Channel;
use crate::encoder::{EncodedSequence, EncoderParams};
use crate::error::{Error, Result};
use crate::moe::GateParams;
use crate::re_model::{relation_distribution, MarkerPositions, ReParams};
use crate::retrieval::RetrievalResult;

const MODEL_MAGIC: &[u8; 4] = b"RKTM";
const MODEL_VERSION: u32 = 1;
const BUNDLE_MAGIC: &[u8; 4] = b"RKMO";
const BUNDLE_VERSION: u32 = 1;

/// Appends the top-`k` retrieved values unless the channel is `none`.
pub fn augment_input(
    channel: Channel,
    k: usize,
    budget: usize,
    x_tokens: &[String],
    retrieval: Option<&RetrievalResult>,
) -> Result<AugmentedInput> {
    let blocks = match (channel, retrieval) {
        (Channel::None, _) | (_, None) => Vec::new(),
        (_, Some(r)) => assemble_context(r, k),
    };
    concat_and_chunk(x_tokens, &blocks, budget)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    Ner,
    Re,
}

impl Task {
    fn code(self) -> u8 {
        match self {
            Task::Ner => 0,
            Task::Re => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Task::Ner),
            1 => Ok(Task::Re),
            _ => Err(Error::format("task", format!("unknown code {c}"))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Ner => "ner",
            Task::Re => "re",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ner" => Ok(Task::Ner),
            "re" => Ok(Task::Re),
            _ => Err(Error::InvalidInput(format!("unknown task {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    Crf(CrfParams),
    Re(ReParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskModel {
    pub task: Task,
    pub channel: Channel,
    /// NER: BIO tags with `O` first. RE: relation labels.
    pub labels: Vec<String>,
    pub k: usize,
    pub budget: usize,
    pub encoder: EncoderParams,
    pub head: Head,
}

impl TaskModel {
    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// `x` plus the retrieved context this model was trained with.
    pub fn augment(&self, x_tokens: &[String], retrieval: Option<&RetrievalResult>) -> Result<AugmentedInput> {
        augment_input(self.channel, self.k, self.budget, x_tokens, retrieval)
    }

    pub fn crf(&self) -> Result<&CrfParams> {
        match &self.head {
            Head::Crf(p) => Ok(p),
            Head::Re(_) => Err(Error::InvalidInput("expected an NER model".into())),
        }
    }

    pub fn re(&self) -> Result<&ReParams> {
        match &self.head {
            Head::Re(p) => Ok(p),
            Head::Crf(_) => Err(Error::InvalidInput("expected an RE model".into())),
        }
    }

    /// Encodes only the rows the head reads.
    pub fn encode_input(&self, input: &AugmentedInput) -> EncodedSequence {
        self.encoder.encode_prefix(input, input.n)
    }

    pub fn ner_potentials(&self, input: &AugmentedInput) -> Result<Potentials> {
        let crf = self.crf()?;
        Ok(log_potentials(&self.encode_input(input), crf))
    }

    pub fn ner_posteriors(&self, input: &AugmentedInput) -> Result<Posteriors> {
        Ok(forward_backward(&self.ner_potentials(input)?))
    }

    pub fn ner_viterbi(&self, input: &AugmentedInput) -> Result<Vec<String>> {
        let path = viterbi_decode(&self.ner_potentials(input)?);
        Ok(self.label_names(&path))
    }

    pub fn label_names(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&y| self.labels[y].clone()).collect()
    }

    pub fn re_distribution(&self, input: &AugmentedInput, markers: MarkerPositions) -> Result<Vec<f64>> {
        let re = self.re()?;
        let rows = markers.subject.max(markers.object) + 1;
        if rows > input.n {
            return Err(Error::InvalidInput("marker position outside the input".into()));
        }
        Ok(relation_distribution(&self.encoder.encode_prefix(input, rows), markers, re))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MODEL_MAGIC, MODEL_VERSION);
        w.u8(self.task.code());
        w.u8(self.channel.code());
        w.strs(&self.labels);
        w.usize(self.k);
        w.usize(self.budget);
        self.encoder.write(&mut w);
        match &self.head {
            Head::Crf(p) => p.write(&mut w),
            Head::Re(p) => p.write(&mut w),
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open("task model", bytes, MODEL_MAGIC, MODEL_VERSION)?;
        let task = Task::from_code(r.u8()?)?;
        let channel = Channel::from_code(r.u8()?)?;
        let labels = r.strs()?;
        let k = r.usize()?;
        let budget = r.usize()?;
        let encoder = EncoderParams::read(&mut r)?;
        let head = match task {
            Task::Ner => Head::Crf(CrfParams::read(&mut r)?),
            Task::Re => Head::Re(ReParams::read(&mut r)?),
        };
        r.finish()?;
        let (hd, ht) = match &head {
            Head::Crf(p) => (p.dim(), p.num_labels()),
            Head::Re(p) => (p.dim(), p.num_labels()),
        };
        if hd != encoder.dim() || ht != labels.len() {
            return Err(Error::format("task model", "head shape disagrees with encoder or labels"));
        }
        Ok(TaskModel {
            task,
            channel,
            labels,
            k,
            budget,
            encoder,
            head,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

/// A task model or a mixture bundle, told apart by their magic bytes.
#[derive(Debug, Clone, PartialEq)]
pub enum Artifact {
    Task(TaskModel),
    Bundle(MoeBundle),
}

pub fn load_artifact(path: &Path) -> Result<Artifact> {
    let bytes = read_file(path)?;
    if bytes.starts_with(BUNDLE_MAGIC) {
        Ok(Artifact::Bundle(MoeBundle::from_bytes(&bytes)?))
    } else {
        Ok(Artifact::Task(TaskModel::from_bytes(&bytes)?))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read_file(path)?))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpertRef {
    pub path: String,
    pub sha256: String,
}

impl ExpertRef {
    pub fn for_file(path: &Path) -> Result<Self> {
        Ok(ExpertRef {
            path: path.to_string_lossy().into_owned(),
            sha256: file_sha256(path)?,
        })
    }

    /// Relative paths are tried against `base` first, then the working directory.
    fn resolve(&self, base: Option<&Path>) -> PathBuf {
        let p = PathBuf::from(&self.path);
        if p.is_relative() {
            if let Some(b) = base {
                let joined = b.join(&p);
                if joined.exists() {
                    return joined;
                }
            }
        }
        p
    }

    pub fn load_verified(&self, base: Option<&Path>) -> Result<TaskModel> {
        let path = self.resolve(base);
        let bytes = read_file(&path)?;
        if sha256_hex(&bytes) != self.sha256 {
            return Err(Error::Checksum(path.display().to_string()));
        }
        TaskModel::from_bytes(&bytes)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeBundle {
    pub task: Task,
    pub text_expert: ExpertRef,
    pub image_expert: ExpertRef,
    pub gate: GateParams,
}

impl MoeBundle {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(BUNDLE_MAGIC, BUNDLE_VERSION);
        w.u8(self.task.code());
        for e in [&self.text_expert, &self.image_expert] {
            w.str(&e.path);
            w.str(&e.sha256);
        }
        self.gate.write(&mut w);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open("mixture bundle", bytes, BUNDLE_MAGIC, BUNDLE_VERSION)?;
        let task = Task::from_code(r.u8()?)?;
        let mut refs = Vec::with_capacity(2);
        for _ in 0..2 {
            let path = r.str()?;
            let sha256 = r.str()?;
            refs.push(ExpertRef { path, sha256 });
        }
        let gate = GateParams::read(&mut r)?;
        r.finish()?;
        let image_expert = refs.pop().expect("two refs");
        let text_expert = refs.pop().expect("two refs");
        Ok(MoeBundle {
            task,
            text_expert,
            image_expert,
            gate,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }

    /// Loads both experts, checking their checksums and tasks.
    pub fn load_experts(&self, bundle_dir: Option<&Path>) -> Result<(TaskModel, TaskModel)> {
        let t = self.text_expert.load_verified(bundle_dir)?;
        let i = self.image_expert.load_verified(bundle_dir)?;
        if t.task != self.task || i.task != self.task {
            return Err(Error::InvalidInput("expert task differs from the bundle task".into()));
        }
        if t.labels != i.labels {
            return Err(Error::InvalidInput("experts use different label sets".into()));
        }
        Ok((t, i))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Vocab;

    fn toy(task: Task) -> TaskModel {
        let docs = [vec!["a".to_string(), "b".to_string()]];
        let vocab = Vocab::build(docs.iter().map(|d| &d[..]), 1);
        let encoder = EncoderParams::init(vocab, 4, 1, 3, 0.1);
        let (labels, head) = match task {
            Task::Ner => (vec!["O".into(), "B-PER".into()], Head::Crf(CrfParams::init(4, 2, 5, 0.1))),
            Task::Re => (vec!["none".into(), "r".into()], Head::Re(ReParams::init(4, 2, 5, 0.1))),
        };
        TaskModel {
            task,
            channel: Channel::Text,
            labels,
            k: 2,
            budget: 16,
            encoder,
            head,
        }
    }

    #[test]
    fn model_round_trip() {
        for task in [Task::Ner, Task::Re] {
            let m = toy(task);
            let bytes = m.to_bytes();
            assert_eq!(TaskModel::from_bytes(&bytes).unwrap(), m);
            let mut bad = bytes.clone();
            bad[4] = 9;
            assert_eq!(TaskModel::from_bytes(&bad).unwrap_err().code(), "E_VERSION");
        }
    }

    #[test]
    fn none_channel_ignores_retrieval() {
        let mut m = toy(Task::Ner);
        m.channel = Channel::None;
        let r = RetrievalResult {
            items: vec![crate::retrieval::RetrievedItem {
                entry_id: 0,
                score: 1.0,
                value: "ctx".into(),
            }],
            k_requested: 1,
        };
        let x = vec!["a".to_string()];
        assert_eq!(m.augment(&x, Some(&r)).unwrap().m, 0);
        m.channel = Channel::Text;
        assert_eq!(m.augment(&x, Some(&r)).unwrap().m, 2);
    }

    #[test]
    fn checksum_guards_experts() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        toy(Task::Ner).save(&p).unwrap();
        let r = ExpertRef::for_file(&p).unwrap();
        assert!(r.load_verified(None).is_ok());
        std::fs::write(&p, b"tampered").unwrap();
        assert_eq!(r.load_verified(None).unwrap_err().code(), "E_CHECKSUM");
    }
}
