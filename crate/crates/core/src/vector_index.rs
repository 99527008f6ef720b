//! Exact inner-product k-nearest-neighbour search over image-feature keys.

use std::path::Path;

use crate::binio::{self, Reader, Writer};
use crate::corpus::{Key, KnowledgeEntry};
use crate::error::{Error, Result};
use crate::retrieval::{top_k, RetrievalResult, RetrievedItem};

const MAGIC: &[u8; 4] = b"RKVX";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    dim: usize,
    normalized: bool,
    rows: Vec<f32>,
    entry_ids: Vec<u64>,
    values: Vec<String>,
}

fn unit(v: &[f64], what: impl FnOnce() -> String) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::InvalidInput(format!("{} cannot be normalized (norm {norm})", what())));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

impl VectorIndex {
    pub fn build(entries: &[KnowledgeEntry], normalize: bool) -> Result<Self> {
        let mut dim = None;
        let mut rows = Vec::new();
        let mut entry_ids = Vec::with_capacity(entries.len());
        let mut values = Vec::with_capacity(entries.len());
        for e in entries {
            let Key::Vector(v) = &e.key else {
                return Err(Error::InvalidInput(format!("entry {} has a text key", e.entry_id)));
            };
            let d = *dim.get_or_insert(v.len());
            if v.len() != d {
                return Err(Error::Dimension {
                    what: format!("entry {}", e.entry_id),
                    expected: d,
                    found: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidInput(format!("entry {} has non-finite features", e.entry_id)));
            }
            if entry_ids.last().is_some_and(|&prev| e.entry_id <= prev) {
                return Err(Error::InvalidInput("entry ids must be strictly increasing".into()));
            }
            if normalize {
                let wide: Vec<f64> = v.iter().map(|&x| x as f64).collect();
                let u = unit(&wide, || format!("entry {}", e.entry_id))?;
                rows.extend(u.iter().map(|&x| x as f32));
            } else {
                rows.extend_from_slice(v);
            }
            entry_ids.push(e.entry_id);
            values.push(e.value.clone());
        }
        let dim = dim.ok_or_else(|| Error::InvalidInput("cannot index an empty knowledge corpus".into()))?;
        Ok(VectorIndex {
            dim,
            normalized: normalize,
            rows,
            entry_ids,
            values,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entry_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entry_ids.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn entry_id(&self, row: usize) -> u64 {
        self.entry_ids[row]
    }

    /// Exact top-`k` by inner product; the query is normalized first when the
    /// index stores unit rows.
    pub fn search(&self, query: &[f32], k: usize) -> Result<RetrievalResult> {
        if query.len() != self.dim {
            return Err(Error::Dimension {
                what: "query vector".into(),
                expected: self.dim,
                found: query.len(),
            });
        }
        let mut q: Vec<f64> = query.iter().map(|&x| x as f64).collect();
        if self.normalized {
            q = unit(&q, || "query vector".to_string())?;
        }
        let scored: Vec<_> = (0..self.len())
            .map(|r| {
                let s: f64 = self.row(r).iter().zip(&q).map(|(&a, &b)| a as f64 * b).sum();
                (r, self.entry_ids[r], s)
            })
            .collect();
        let items = top_k(scored, k)
            .into_iter()
            .map(|(row, entry_id, score)| RetrievedItem {
                entry_id,
                score,
                value: self.values[row].clone(),
            })
            .collect();
        Ok(RetrievalResult {
            items,
            k_requested: k,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC, VERSION);
        w.usize(self.len());
        w.usize(self.dim);
        w.u8(self.normalized as u8);
        for &x in &self.rows {
            w.f32(x);
        }
        for &id in &self.entry_ids {
            w.u64(id);
        }
        w.usize(self.values.len());
        for v in &self.values {
            w.str(v);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open("vector index", bytes, MAGIC, VERSION)?;
        let n = r.len(8)?;
        let dim = r.usize()?;
        let normalized = match r.u8()? {
            0 => false,
            1 => true,
            f => return Err(Error::format("vector index", format!("bad normalize flag {f}"))),
        };
        let total = n
            .checked_mul(dim)
            .ok_or_else(|| Error::format("vector index", "shape overflow"))?;
        let mut rows = Vec::with_capacity(total.min(1 << 26));
        for _ in 0..total {
            rows.push(r.f32()?);
        }
        let entry_ids = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let values = r.strs()?;
        r.finish()?;
        if values.len() != n {
            return Err(Error::format("vector index", "value count differs from row count"));
        }
        Ok(VectorIndex {
            dim,
            normalized,
            rows,
            entry_ids,
            values,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&binio::read_file(path)?)
    }
}
