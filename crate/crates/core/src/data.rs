//! Task datasets and materialized retrieval contexts.
//!
//! NER files are column formatted, token and tag separated by a tab:
//!
//! ```text
//! # format=rakie-ner version=1
//! IMGID:img_17
//! Alice<TAB>B-PER
//! smiled<TAB>O
//!
//! IMGID:img_18
//! ...
//! ```
//!
//! RE and context files are JSON lines behind a versioned header record.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::re_model::RelationInstance;
use crate::retrieval::RetrievalResult;

pub const NER_VERSION: u32 = 1;
const NER_MAGIC: &str = "# format=rakie-ner";
const IMAGE_PREFIX: &str = "IMGID:";
pub const RE_FORMAT: &str = "rakie-re";
pub const RE_VERSION: u32 = 1;
pub const CONTEXTS_FORMAT: &str = "rakie-contexts";
pub const CONTEXTS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NerSentence {
    pub image_id: String,
    pub tokens: Vec<String>,
    pub tags: Vec<String>,
}

/// Retrieval source for a task model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Text,
    Image,
    None,
}

impl Channel {
    pub fn as_str(&self) -> &'static str {
        match self {
            Channel::Text => "text",
            Channel::Image => "image",
            Channel::None => "none",
        }
    }

    pub(crate) fn code(&self) -> u8 {
        match self {
            Channel::Text => 0,
            Channel::Image => 1,
            Channel::None => 2,
        }
    }

    pub(crate) fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Channel::Text),
            1 => Ok(Channel::Image),
            2 => Ok(Channel::None),
            _ => Err(Error::format("channel", format!("unknown code {c}"))),
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Channel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Channel::Text),
            "image" => Ok(Channel::Image),
            "none" => Ok(Channel::None),
            _ => Err(Error::InvalidInput(format!("unknown channel {s:?}"))),
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn format_ner(sentences: &[NerSentence]) -> Result<String> {
    let mut out = format!("{NER_MAGIC} version={NER_VERSION}\n");
    for (i, s) in sentences.iter().enumerate() {
        validate_sentence(s, i)?;
        if i > 0 {
            out.push('\n');
        }
        out.push_str(IMAGE_PREFIX);
        out.push_str(&s.image_id);
        out.push('\n');
        for (tok, tag) in s.tokens.iter().zip(&s.tags) {
            out.push_str(tok);
            out.push('\t');
            out.push_str(tag);
            out.push('\n');
        }
    }
    Ok(out)
}

fn validate_sentence(s: &NerSentence, i: usize) -> Result<()> {
    let bad = |d: String| Error::InvalidInput(format!("sentence {i}: {d}"));
    if s.tokens.is_empty() {
        return Err(bad("no tokens".into()));
    }
    if s.tokens.len() != s.tags.len() {
        return Err(bad(format!("{} tokens but {} tags", s.tokens.len(), s.tags.len())));
    }
    if s.image_id.is_empty() || s.image_id.chars().any(char::is_whitespace) {
        return Err(bad(format!("bad image id {:?}", s.image_id)));
    }
    for t in s.tokens.iter().chain(&s.tags) {
        if t.is_empty() || t.chars().any(char::is_whitespace) {
            return Err(bad(format!("bad token or tag {t:?}")));
        }
    }
    Ok(())
}

pub fn parse_ner(text: &str) -> Result<Vec<NerSentence>> {
    let mut lines = text.lines().enumerate();
    let header = lines.next().map(|(_, l)| l).unwrap_or("");
    let version = header
        .strip_prefix(NER_MAGIC)
        .and_then(|rest| rest.trim().strip_prefix("version="))
        .and_then(|v| v.parse::<u32>().ok())
        .ok_or_else(|| Error::format("NER dataset", format!("bad header {header:?}")))?;
    if version != NER_VERSION {
        return Err(Error::Version {
            what: "NER dataset".into(),
            expected: NER_VERSION,
            found: version,
        });
    }
    let mut out = Vec::new();
    let mut cur: Option<NerSentence> = None;
    let finish = |cur: &mut Option<NerSentence>, out: &mut Vec<NerSentence>, line: usize| -> Result<()> {
        if let Some(s) = cur.take() {
            if s.tokens.is_empty() {
                return Err(Error::format("NER dataset", format!("line {line}: sentence without tokens")));
            }
            out.push(s);
        }
        Ok(())
    };
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            finish(&mut cur, &mut out, lineno)?;
            continue;
        }
        if let Some(id) = line.strip_prefix(IMAGE_PREFIX) {
            finish(&mut cur, &mut out, lineno)?;
            cur = Some(NerSentence {
                image_id: id.trim().to_string(),
                tokens: Vec::new(),
                tags: Vec::new(),
            });
            continue;
        }
        let s = cur
            .as_mut()
            .ok_or_else(|| Error::format("NER dataset", format!("line {lineno}: token before {IMAGE_PREFIX} header")))?;
        let mut cols = line.split('\t');
        match (cols.next(), cols.next(), cols.next()) {
            (Some(tok), Some(tag), None) if !tok.is_empty() && !tag.is_empty() => {
                s.tokens.push(tok.to_string());
                s.tags.push(tag.to_string());
            }
            _ => {
                return Err(Error::format(
                    "NER dataset",
                    format!("line {lineno}: expected token<TAB>tag"),
                ))
            }
        }
    }
    finish(&mut cur, &mut out, 0)?;
    Ok(out)
}

pub fn write_ner(path: &Path, sentences: &[NerSentence]) -> Result<()> {
    let text = format_ner(sentences)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_ner(path: &Path) -> Result<Vec<NerSentence>> {
    parse_ner(&read_to_string(path)?)
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    channel: Option<Channel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    k: Option<usize>,
}

fn check_header(what: &str, format: &str, version: u32, line: Option<&str>) -> Result<Header> {
    let line = line.ok_or_else(|| Error::format(what, "missing header line"))?;
    let h: Header = serde_json::from_str(line).map_err(|e| Error::format(what, format!("bad header: {e}")))?;
    if h.format != format {
        return Err(Error::format(what, format!("expected format {format:?}, found {:?}", h.format)));
    }
    if h.version != version {
        return Err(Error::Version {
            what: what.into(),
            expected: version,
            found: h.version,
        });
    }
    Ok(h)
}

fn write_jsonl<T: Serialize>(path: &Path, header: &Header, records: &[T]) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", serde_json::to_string(header).expect("header serializes")).map_err(io)?;
    for r in records {
        writeln!(w, "{}", serde_json::to_string(r).expect("record serializes")).map_err(io)?;
    }
    w.flush().map_err(io)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(
    path: &Path,
    what: &str,
    format: &str,
    version: u32,
) -> Result<(Header, Vec<T>)> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(f).lines();
    let first = lines.next().transpose().map_err(|e| Error::io(path, e))?;
    let header = check_header(what, format, version, first.as_deref())?;
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::format(what, format!("line {}: {e}", i + 2)))?);
    }
    Ok((header, out))
}

pub fn write_re(path: &Path, instances: &[RelationInstance]) -> Result<()> {
    for inst in instances {
        inst.validate()?;
    }
    let header = Header {
        format: RE_FORMAT.into(),
        version: RE_VERSION,
        channel: None,
        k: None,
    };
    write_jsonl(path, &header, instances)
}

pub fn read_re(path: &Path) -> Result<Vec<RelationInstance>> {
    let (_, out): (_, Vec<RelationInstance>) = read_jsonl(path, "RE dataset", RE_FORMAT, RE_VERSION)?;
    for inst in &out {
        inst.validate()?;
    }
    Ok(out)
}

/// Per-example retrieval results for one channel, in dataset order.
#[derive(Debug, Clone, PartialEq)]
pub struct Contexts {
    pub channel: Channel,
    pub k: usize,
    pub results: Vec<RetrievalResult>,
}

pub fn write_contexts(path: &Path, contexts: &Contexts) -> Result<()> {
    let header = Header {
        format: CONTEXTS_FORMAT.into(),
        version: CONTEXTS_VERSION,
        channel: Some(contexts.channel),
        k: Some(contexts.k),
    };
    write_jsonl(path, &header, &contexts.results)
}

pub fn read_contexts(path: &Path) -> Result<Contexts> {
    let (h, results) = read_jsonl(path, "contexts", CONTEXTS_FORMAT, CONTEXTS_VERSION)?;
    let channel = h.channel.ok_or_else(|| Error::format("contexts", "header lacks channel"))?;
    let k = h.k.ok_or_else(|| Error::format("contexts", "header lacks k"))?;
    Ok(Contexts { channel, k, results })
}
