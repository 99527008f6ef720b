//! BM25 inverted index over text-keyed knowledge entries.

use std::collections::BTreeMap;
use std::path::Path;

use crate::binio::{self, Reader, Writer};
use crate::corpus::{strip_anchor_markup, Key, KnowledgeEntry};
use crate::error::{Error, Result};
use crate::retrieval::{top_k, RetrievalResult, RetrievedItem};

const MAGIC: &[u8; 4] = b"RKTX";
const VERSION: u32 = 1;

/// Lowercased alphanumeric runs, with anchor tags removed first.
///
/// Anything that is not alphanumeric (whitespace, punctuation, `_`) separates
/// tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let plain = strip_anchor_markup(text);
    plain
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Posting {
    /// Row in the index, not the entry id.
    pub row: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextIndex {
    params: Bm25Params,
    postings: BTreeMap<String, Vec<Posting>>,
    doc_lengths: Vec<u32>,
    entry_ids: Vec<u64>,
    values: Vec<String>,
    avgdl: f64,
}

impl TextIndex {
    pub fn build(entries: &[KnowledgeEntry], params: Bm25Params) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidInput("cannot index an empty knowledge corpus".into()));
        }
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut doc_lengths = Vec::with_capacity(entries.len());
        let mut entry_ids = Vec::with_capacity(entries.len());
        let mut values = Vec::with_capacity(entries.len());
        for (row, e) in entries.iter().enumerate() {
            let Key::Text(key) = &e.key else {
                return Err(Error::InvalidInput(format!("entry {} has a vector key", e.entry_id)));
            };
            if entry_ids.last().is_some_and(|&prev| e.entry_id <= prev) {
                return Err(Error::InvalidInput("entry ids must be strictly increasing".into()));
            }
            let terms = tokenize(key);
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in &terms {
                *tf.entry(t.clone()).or_default() += 1;
            }
            for (term, count) in tf {
                postings.entry(term).or_default().push(Posting {
                    row: row as u32,
                    tf: count,
                });
            }
            doc_lengths.push(terms.len() as u32);
            entry_ids.push(e.entry_id);
            values.push(e.value.clone());
        }
        let total: u64 = doc_lengths.iter().map(|&l| l as u64).sum();
        let avgdl = total as f64 / doc_lengths.len() as f64;
        Ok(TextIndex {
            params,
            postings,
            doc_lengths,
            entry_ids,
            values,
            avgdl,
        })
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn len(&self) -> usize {
        self.entry_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entry_ids.is_empty()
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    pub fn doc_length(&self, entry_id: u64) -> Option<u32> {
        self.row_of(entry_id).map(|r| self.doc_lengths[r])
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.postings.keys().map(String::as_str)
    }

    pub fn entry_id(&self, row: usize) -> u64 {
        self.entry_ids[row]
    }

    fn row_of(&self, entry_id: u64) -> Option<usize> {
        self.entry_ids.binary_search(&entry_id).ok()
    }

    /// `ln(1 + (N - df + 0.5) / (df + 0.5))`, never negative.
    pub fn idf(&self, df: usize) -> f64 {
        let n = self.len() as f64;
        let df = df as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn term_weight(&self, df: usize, tf: u32, dl: u32) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let tf = tf as f64;
        let norm = k1 * (1.0 - b + b * dl as f64 / self.avgdl);
        self.idf(df) * tf * (k1 + 1.0) / (tf + norm)
    }

    /// BM25 score of one entry's key; every query token contributes, repeats included.
    pub fn bm25_score<S: AsRef<str>>(&self, query_terms: &[S], entry_id: u64) -> Result<f64> {
        let row = self.row_of(entry_id).ok_or(Error::UnknownEntry(entry_id))?;
        let dl = self.doc_lengths[row];
        let mut score = 0.0;
        for t in query_terms {
            let plist = self.postings(t.as_ref());
            if let Ok(i) = plist.binary_search_by_key(&(row as u32), |p| p.row) {
                score += self.term_weight(plist.len(), plist[i].tf, dl);
            }
        }
        Ok(score)
    }

    /// Exact top-`k` over every entry sharing at least one term with the query.
    pub fn search(&self, query: &str, k: usize) -> RetrievalResult {
        let terms = tokenize(query);
        self.search_terms(&terms, k)
    }

    pub fn search_terms<S: AsRef<str>>(&self, terms: &[S], k: usize) -> RetrievalResult {
        let mut acc = vec![0.0f64; self.len()];
        let mut hit = vec![false; self.len()];
        for t in terms {
            let plist = self.postings(t.as_ref());
            for p in plist {
                let row = p.row as usize;
                acc[row] += self.term_weight(plist.len(), p.tf, self.doc_lengths[row]);
                hit[row] = true;
            }
        }
        let scored: Vec<_> = (0..self.len())
            .filter(|&r| hit[r])
            .map(|r| (r, self.entry_ids[r], acc[r]))
            .collect();
        let items = top_k(scored, k)
            .into_iter()
            .map(|(row, entry_id, score)| RetrievedItem {
                entry_id,
                score,
                value: self.values[row].clone(),
            })
            .collect();
        RetrievalResult {
            items,
            k_requested: k,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC, VERSION);
        w.f64(self.params.k1);
        w.f64(self.params.b);
        w.usize(self.len());
        w.f64(self.avgdl);
        w.usize(self.postings.len());
        for (term, plist) in &self.postings {
            w.str(term);
            w.usize(plist.len());
            for p in plist {
                w.u32(p.row);
                w.u32(p.tf);
            }
        }
        for (&id, &dl) in self.entry_ids.iter().zip(&self.doc_lengths) {
            w.u64(id);
            w.u32(dl);
        }
        // value store: offsets then one concatenated blob
        let mut offset = 0u64;
        for v in &self.values {
            w.u64(offset);
            offset += v.len() as u64;
        }
        w.u64(offset);
        let blob: Vec<u8> = self.values.iter().flat_map(|v| v.bytes()).collect();
        w.bytes(&blob);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open("text index", bytes, MAGIC, VERSION)?;
        let params = Bm25Params {
            k1: r.f64()?,
            b: r.f64()?,
        };
        let n = r.len(12)?;
        let avgdl = r.f64()?;
        let n_terms = r.len(16)?;
        let mut postings = BTreeMap::new();
        for _ in 0..n_terms {
            let term = r.str()?;
            let len = r.len(8)?;
            let mut plist = Vec::with_capacity(len);
            for _ in 0..len {
                let row = r.u32()?;
                if row as usize >= n {
                    return Err(Error::format("text index", "posting row out of range"));
                }
                plist.push(Posting { row, tf: r.u32()? });
            }
            postings.insert(term, plist);
        }
        let mut entry_ids = Vec::with_capacity(n);
        let mut doc_lengths = Vec::with_capacity(n);
        for _ in 0..n {
            entry_ids.push(r.u64()?);
            doc_lengths.push(r.u32()?);
        }
        let mut offsets = Vec::with_capacity(n + 1);
        for _ in 0..=n {
            offsets.push(r.u64()? as usize);
        }
        let blob = r.bytes()?;
        r.finish()?;
        if offsets.windows(2).any(|w| w[0] > w[1]) || offsets[n] != blob.len() {
            return Err(Error::format("text index", "inconsistent value offsets"));
        }
        let values = offsets
            .windows(2)
            .map(|w| {
                String::from_utf8(blob[w[0]..w[1]].to_vec())
                    .map_err(|_| Error::format("text index", "value is not utf-8"))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TextIndex {
            params,
            postings,
            doc_lengths,
            entry_ids,
            values,
            avgdl,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&binio::read_file(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entries(keys: &[&str]) -> Vec<KnowledgeEntry> {
        keys.iter()
            .enumerate()
            .map(|(i, k)| KnowledgeEntry {
                entry_id: i as u64,
                key: Key::Text(k.to_string()),
                value: format!("value {i}"),
            })
            .collect()
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("Alan Turing."), vec!["alan", "turing"]);
        assert_eq!(tokenize("<e: Alan_Turing> Alan Turing </e>"), vec!["alan", "turing"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("it's 2-for-1"), vec!["it", "s", "2", "for", "1"]);
    }

    #[test]
    fn disjoint_vocabularies() {
        let idx = TextIndex::build(&entries(&["a b", "c d", "e f"]), Bm25Params::default()).unwrap();
        for t in idx.terms() {
            assert_eq!(idx.postings(t).len(), 1);
        }
    }

    #[test]
    fn term_frequency_counts_repeats() {
        let idx = TextIndex::build(&entries(&["x y x x", "y"]), Bm25Params::default()).unwrap();
        assert_eq!(idx.postings("x"), &[Posting { row: 0, tf: 3 }]);
        assert_eq!(idx.postings("y").len(), 2);
        assert_eq!(idx.len(), 2);
        assert!((idx.avgdl() - 2.5).abs() < 1e-15);
    }

    #[test]
    fn worked_ln2_value() {
        // N = 2, df("alpha") = 1, tf = 1, dl = avgdl = 1
        let idx = TextIndex::build(&entries(&["alpha", "beta"]), Bm25Params::default()).unwrap();
        let s = idx.bm25_score(&["alpha"], 0).unwrap();
        assert!((s - std::f64::consts::LN_2).abs() < 1e-12, "{s}");
        assert_eq!(idx.bm25_score(&["gamma"], 0).unwrap(), 0.0);
    }

    #[test]
    fn unknown_entry_errors() {
        let idx = TextIndex::build(&entries(&["a"]), Bm25Params::default()).unwrap();
        assert!(matches!(idx.bm25_score(&["a"], 9), Err(Error::UnknownEntry(9))));
    }

    #[test]
    fn vector_key_rejected() {
        let e = vec![KnowledgeEntry {
            entry_id: 0,
            key: Key::Vector(vec![1.0]),
            value: "v".into(),
        }];
        assert!(TextIndex::build(&e, Bm25Params::default()).is_err());
    }

    #[test]
    fn identical_scores_break_by_entry_id() {
        let idx = TextIndex::build(&entries(&["z q", "z q", "other"]), Bm25Params::default()).unwrap();
        let res = idx.search("z", 5);
        let ids: Vec<u64> = res.items.iter().map(|i| i.entry_id).collect();
        assert_eq!(ids, vec![0, 1]);
        assert_eq!(res.items[0].score, res.items[1].score);
    }

    #[test]
    fn serialization_is_stable() {
        let idx = TextIndex::build(&entries(&["one two", "two three three"]), Bm25Params::default()).unwrap();
        let bytes = idx.to_bytes();
        let back = TextIndex::from_bytes(&bytes).unwrap();
        assert_eq!(back, idx);
        assert_eq!(back.to_bytes(), bytes);
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(TextIndex::from_bytes(&bad), Err(Error::Version { found: 9, .. })));
    }
}
