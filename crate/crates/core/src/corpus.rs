//! Knowledge-corpus construction.
//!
//! A corpus of pre-segmented documents (sections → paragraphs → sentences)
//! with anchor annotations and image feature records is turned into two
//! key/value knowledge corpora:
//!
//! * text KC: key = anchor-marked sentence, value = the anchor-marked
//!   paragraph the sentence appears in;
//! * image KC: key = image feature vector, value = article title, the
//!   separator [`TITLE_SEPARATOR`], then the article's introduction section.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Separator between the article title and its introduction in image-KC values.
pub const TITLE_SEPARATOR: &str = " — ";

const CORPUS_FORMAT: &str = "rakie-corpus";
const CORPUS_VERSION: u32 = 1;
const FEATURES_FORMAT: &str = "rakie-image-features";
const FEATURES_VERSION: u32 = 1;
const KC_FORMAT: &str = "rakie-kc";
const KC_VERSION: u32 = 1;

/// Position of a sentence inside a document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SentenceLoc {
    pub section: usize,
    pub paragraph: usize,
    pub sentence: usize,
}

/// A hyperlink anchor: a character span of one sentence pointing at an entity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Anchor {
    #[serde(flatten)]
    pub loc: SentenceLoc,
    /// Character offsets (not bytes), half-open.
    pub start: usize,
    pub end: usize,
    pub entity: String,
}

pub type Paragraph = Vec<String>;
pub type Section = Vec<Paragraph>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub title: String,
    pub sections: Vec<Section>,
    pub intro_index: usize,
    #[serde(default)]
    pub anchors: Vec<Anchor>,
    #[serde(default)]
    pub images: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub doc_id: String,
    pub feature: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Key {
    Text(String),
    Vector(Vec<f32>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeEntry {
    pub entry_id: u64,
    pub key: Key,
    pub value: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KcKind {
    Text,
    Image,
}

/// Output of [`build_text_kc`].
#[derive(Debug, Clone, PartialEq)]
pub struct TextKc {
    pub entries: Vec<KnowledgeEntry>,
    /// Number of empty sentences that produced no entry.
    pub skipped: usize,
}

/// Wraps each anchored span as `<e: ID> text </e>`.
///
/// Spans are character offsets into `sentence`; they must be in bounds and
/// pairwise disjoint. The entity id may not contain whitespace or `>`.
pub fn apply_anchor_markup(sentence: &str, anchors: &[(std::ops::Range<usize>, &str)]) -> Result<String> {
    let char_count = sentence.chars().count();
    let mut sorted: Vec<_> = anchors.iter().collect();
    sorted.sort_by_key(|(r, _)| (r.start, r.end));

    let mut prev_end = 0usize;
    for (i, (span, entity)) in sorted.iter().enumerate() {
        if span.start >= span.end {
            return Err(Error::AnchorSpan {
                start: span.start,
                end: span.end,
                reason: "empty span",
            });
        }
        if span.end > char_count {
            return Err(Error::AnchorSpan {
                start: span.start,
                end: span.end,
                reason: "out of bounds",
            });
        }
        if i > 0 && span.start < prev_end {
            return Err(Error::AnchorSpan {
                start: span.start,
                end: span.end,
                reason: "overlaps another anchor",
            });
        }
        if entity.is_empty() || entity.chars().any(|c| c.is_whitespace() || c == '>') {
            return Err(Error::AnchorSpan {
                start: span.start,
                end: span.end,
                reason: "entity id must be non-empty without whitespace or '>'",
            });
        }
        prev_end = span.end;
    }

    // char offset -> byte offset, with one extra slot for the end of string
    let mut byte_at: Vec<usize> = sentence.char_indices().map(|(b, _)| b).collect();
    byte_at.push(sentence.len());

    let mut out = String::with_capacity(sentence.len() + 24 * sorted.len());
    let mut cursor = 0usize;
    for (span, entity) in sorted {
        let (s, e) = (byte_at[span.start], byte_at[span.end]);
        out.push_str(&sentence[cursor..s]);
        out.push_str("<e: ");
        out.push_str(entity);
        out.push_str("> ");
        out.push_str(&sentence[s..e]);
        out.push_str(" </e>");
        cursor = e;
    }
    out.push_str(&sentence[cursor..]);
    Ok(out)
}

/// Inverse of [`apply_anchor_markup`]: removes every `<e: ID> ` and ` </e>` tag.
pub fn strip_anchor_markup(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    loop {
        let open = rest.find("<e: ");
        let close = rest.find(" </e>");
        match (open, close) {
            (None, None) => {
                out.push_str(rest);
                return out;
            }
            (Some(o), c) if c.is_none_or(|c| o < c) => {
                let after = &rest[o + 4..];
                match after.find("> ") {
                    Some(gt) if !after[..gt].contains(char::is_whitespace) => {
                        out.push_str(&rest[..o]);
                        rest = &after[gt + 2..];
                    }
                    _ => {
                        out.push_str(&rest[..o + 4]);
                        rest = after;
                    }
                }
            }
            (_, Some(c)) => {
                out.push_str(&rest[..c]);
                rest = &rest[c + 5..];
            }
            (Some(_), None) => unreachable!(),
        }
    }
}

impl Document {
    pub fn sentence(&self, loc: SentenceLoc) -> Option<&str> {
        self.sections
            .get(loc.section)?
            .get(loc.paragraph)?
            .get(loc.sentence)
            .map(String::as_str)
    }

    pub fn validate(&self) -> Result<()> {
        if self.intro_index >= self.sections.len() {
            return Err(Error::InvalidInput(format!(
                "document {}: intro_index {} but only {} sections",
                self.doc_id,
                self.intro_index,
                self.sections.len()
            )));
        }
        for a in &self.anchors {
            let s = self.sentence(a.loc).ok_or_else(|| {
                Error::InvalidInput(format!(
                    "document {}: anchor points at missing sentence {:?}",
                    self.doc_id, a.loc
                ))
            })?;
            if a.end > s.chars().count() || a.start >= a.end {
                return Err(Error::AnchorSpan {
                    start: a.start,
                    end: a.end,
                    reason: "outside its sentence",
                });
            }
        }
        Ok(())
    }

    /// Anchors grouped per sentence, in a deterministic order.
    fn anchors_by_sentence(&self) -> BTreeMap<SentenceLoc, Vec<(std::ops::Range<usize>, &str)>> {
        let mut map: BTreeMap<_, Vec<_>> = BTreeMap::new();
        for a in &self.anchors {
            map.entry(a.loc).or_default().push((a.start..a.end, a.entity.as_str()));
        }
        map
    }

    fn marked_paragraph(
        &self,
        section: usize,
        paragraph: usize,
        anchors: &BTreeMap<SentenceLoc, Vec<(std::ops::Range<usize>, &str)>>,
    ) -> Result<Vec<Option<String>>> {
        self.sections[section][paragraph]
            .iter()
            .enumerate()
            .map(|(sentence, text)| {
                if text.trim().is_empty() {
                    return Ok(None);
                }
                let loc = SentenceLoc {
                    section,
                    paragraph,
                    sentence,
                };
                let spans = anchors.get(&loc).map(Vec::as_slice).unwrap_or(&[]);
                apply_anchor_markup(text, spans).map(Some)
            })
            .collect()
    }
}

fn check_unique_ids(corpus: &[Document]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for d in corpus {
        if !seen.insert(d.doc_id.as_str()) {
            return Err(Error::InvalidInput(format!("duplicate doc_id {}", d.doc_id)));
        }
    }
    Ok(())
}

/// One entry per non-empty sentence, in (document, section, paragraph, sentence) order.
pub fn build_text_kc(corpus: &[Document]) -> Result<TextKc> {
    if corpus.is_empty() {
        return Err(Error::InvalidInput("empty corpus".into()));
    }
    check_unique_ids(corpus)?;
    let mut entries = Vec::new();
    let mut skipped = 0;
    for doc in corpus {
        doc.validate()?;
        let anchors = doc.anchors_by_sentence();
        for (si, section) in doc.sections.iter().enumerate() {
            for pi in 0..section.len() {
                let marked = doc.marked_paragraph(si, pi, &anchors)?;
                let value = marked.iter().flatten().cloned().collect::<Vec<_>>().join(" ");
                for key in marked {
                    match key {
                        Some(key) => entries.push(KnowledgeEntry {
                            entry_id: entries.len() as u64,
                            key: Key::Text(key),
                            value: value.clone(),
                        }),
                        None => skipped += 1,
                    }
                }
            }
        }
    }
    Ok(TextKc { entries, skipped })
}

/// One entry per image, in the order of `images`.
pub fn build_image_kc(corpus: &[Document], images: &[ImageRecord]) -> Result<Vec<KnowledgeEntry>> {
    check_unique_ids(corpus)?;
    let by_id: HashMap<&str, &Document> = corpus.iter().map(|d| (d.doc_id.as_str(), d)).collect();
    let dangling: Vec<String> = images
        .iter()
        .filter(|im| !by_id.contains_key(im.doc_id.as_str()))
        .map(|im| im.image_id.clone())
        .collect();
    if !dangling.is_empty() {
        return Err(Error::DanglingDoc(dangling));
    }
    validate_images(images)?;

    let mut values: HashMap<&str, String> = HashMap::new();
    let mut entries = Vec::with_capacity(images.len());
    for im in images {
        if !values.contains_key(im.doc_id.as_str()) {
            let doc = by_id[im.doc_id.as_str()];
            doc.validate()?;
            let anchors = doc.anchors_by_sentence();
            let mut intro = Vec::new();
            for pi in 0..doc.sections[doc.intro_index].len() {
                intro.extend(doc.marked_paragraph(doc.intro_index, pi, &anchors)?.into_iter().flatten());
            }
            let value = format!("{}{}{}", doc.title, TITLE_SEPARATOR, intro.join(" "));
            values.insert(im.doc_id.as_str(), value);
        }
        entries.push(KnowledgeEntry {
            entry_id: entries.len() as u64,
            key: Key::Vector(im.feature.clone()),
            value: values[im.doc_id.as_str()].clone(),
        });
    }
    Ok(entries)
}

fn validate_images(images: &[ImageRecord]) -> Result<()> {
    let Some(first) = images.first() else {
        return Ok(());
    };
    let dim = first.feature.len();
    let mut seen = BTreeSet::new();
    for im in images {
        if im.feature.len() != dim {
            return Err(Error::Dimension {
                what: format!("image {}", im.image_id),
                expected: dim,
                found: im.feature.len(),
            });
        }
        if im.feature.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("image {} has non-finite features", im.image_id)));
        }
        if !seen.insert(im.image_id.as_str()) {
            return Err(Error::InvalidInput(format!("duplicate image_id {}", im.image_id)));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// File formats

#[derive(Serialize, Deserialize)]
struct JsonlHeader {
    format: String,
    version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kind: Option<KcKind>,
}

fn read_header(what: &str, format: &str, version: u32, line: Option<std::io::Result<String>>, path: &Path) -> Result<JsonlHeader> {
    let line = line
        .ok_or_else(|| Error::format(what, "missing header line"))?
        .map_err(|e| Error::io(path, e))?;
    let header: JsonlHeader =
        serde_json::from_str(&line).map_err(|e| Error::format(what, format!("bad header: {e}")))?;
    if header.format != format {
        return Err(Error::format(what, format!("expected format {format}, found {}", header.format)));
    }
    if header.version != version {
        return Err(Error::Version {
            what: what.to_string(),
            expected: version,
            found: header.version,
        });
    }
    Ok(header)
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(std::io::BufWriter::new(f))
}

fn open(path: &Path) -> Result<BufReader<std::fs::File>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(BufReader::new(f))
}

/// Writes one document per line after a versioned header line.
pub fn write_corpus(path: &Path, corpus: &[Document]) -> Result<()> {
    let mut w = create(path)?;
    let header = JsonlHeader {
        format: CORPUS_FORMAT.into(),
        version: CORPUS_VERSION,
        kind: None,
    };
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", serde_json::to_string(&header).unwrap()).map_err(io)?;
    for d in corpus {
        writeln!(w, "{}", serde_json::to_string(d).unwrap()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_corpus(path: &Path) -> Result<Vec<Document>> {
    let mut lines = open(path)?.lines();
    read_header("corpus", CORPUS_FORMAT, CORPUS_VERSION, lines.next(), path)?;
    let mut docs = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&line)
            .map_err(|e| Error::format("corpus", format!("line {}: {e}", i + 2)))?;
        docs.push(doc);
    }
    Ok(docs)
}

/// Tab-separated `image_id, doc_id, space-separated floats` after a
/// `#rakie-image-features v1 dim=D` header.
pub fn write_image_features(path: &Path, dim: usize, records: &[ImageRecord]) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "#{FEATURES_FORMAT} v{FEATURES_VERSION} dim={dim}").map_err(io)?;
    for r in records {
        if r.feature.len() != dim {
            return Err(Error::Dimension {
                what: format!("image {}", r.image_id),
                expected: dim,
                found: r.feature.len(),
            });
        }
        let floats: Vec<String> = r.feature.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}\t{}\t{}", r.image_id, r.doc_id, floats.join(" ")).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_image_features(path: &Path) -> Result<(usize, Vec<ImageRecord>)> {
    let mut lines = open(path)?.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::format("image features", "missing header line"))?
        .map_err(|e| Error::io(path, e))?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some(&format!("#{FEATURES_FORMAT}")[..]) {
        return Err(Error::format("image features", format!("bad header {header:?}")));
    }
    let version: u32 = parts
        .next()
        .and_then(|v| v.strip_prefix('v'))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::format("image features", "missing version"))?;
    if version != FEATURES_VERSION {
        return Err(Error::Version {
            what: "image features".into(),
            expected: FEATURES_VERSION,
            found: version,
        });
    }
    let dim: usize = parts
        .next()
        .and_then(|v| v.strip_prefix("dim="))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::format("image features", "missing dim"))?;

    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |d: &str| Error::format("image features", format!("line {}: {d}", i + 2));
        let mut cols = line.splitn(3, '\t');
        let image_id = cols.next().ok_or_else(|| bad("missing image_id"))?.to_string();
        let doc_id = cols.next().ok_or_else(|| bad("missing doc_id"))?.to_string();
        let feature = cols
            .next()
            .unwrap_or("")
            .split_whitespace()
            .map(|v| v.parse::<f32>().map_err(|_| bad("bad float")))
            .collect::<Result<Vec<_>>>()?;
        if feature.len() != dim {
            return Err(Error::Dimension {
                what: format!("image {image_id}"),
                expected: dim,
                found: feature.len(),
            });
        }
        out.push(ImageRecord {
            image_id,
            doc_id,
            feature,
        });
    }
    Ok((dim, out))
}

pub fn write_kc(path: &Path, kind: KcKind, entries: &[KnowledgeEntry]) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    let header = JsonlHeader {
        format: KC_FORMAT.into(),
        version: KC_VERSION,
        kind: Some(kind),
    };
    writeln!(w, "{}", serde_json::to_string(&header).unwrap()).map_err(io)?;
    for e in entries {
        writeln!(w, "{}", serde_json::to_string(e).unwrap()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_kc(path: &Path) -> Result<(KcKind, Vec<KnowledgeEntry>)> {
    let mut lines = open(path)?.lines();
    let header = read_header("knowledge corpus", KC_FORMAT, KC_VERSION, lines.next(), path)?;
    let kind = header
        .kind
        .ok_or_else(|| Error::format("knowledge corpus", "header lacks kind"))?;
    let mut entries: Vec<KnowledgeEntry> = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let e: KnowledgeEntry = serde_json::from_str(&line)
            .map_err(|e| Error::format("knowledge corpus", format!("line {}: {e}", i + 2)))?;
        if let Some(prev) = entries.last() {
            if e.entry_id <= prev.entry_id {
                return Err(Error::format("knowledge corpus", "entry ids not strictly increasing"));
            }
        }
        entries.push(e);
    }
    Ok((kind, entries))
}
