//! Sequence encoder contract and the bundled windowed-mean encoder.
//!
//! The window encoder computes, for every position `i` of the concatenated
//! sequence,
//!
//! ```text
//! r_i = W_mix · mean(emb(tok_{i-w}), …, emb(tok_{i+w})) + emb(tok_i)
//! ```
//!
//! where the window is clipped at the sequence ends. Because the window runs
//! over `[x; z]`, input tokens near the boundary see retrieved context.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio::{Reader, Writer};
use crate::context::{AugmentedInput, CONTEXT_MARK};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const UNK: &str = "<unk>";
pub const SUBJECT_START: &str = "<S>";
pub const SUBJECT_END: &str = "</S>";
pub const OBJECT_START: &str = "<O>";
pub const OBJECT_END: &str = "</O>";

const RESERVED: [&str; 6] = [UNK, CONTEXT_MARK, SUBJECT_START, SUBJECT_END, OBJECT_START, OBJECT_END];

pub const DEFAULT_DIM: usize = 64;
pub const DEFAULT_WINDOW: usize = 2;

/// Token → id map. Ordinary tokens are matched case-insensitively; reserved
/// tokens exactly. Unknown tokens map to id 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Tokens whose document frequency over `docs` reaches `min_df`, sorted,
    /// after the reserved tokens.
    pub fn build<'a, I, S>(docs: I, min_df: usize) -> Self
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let mut df: BTreeMap<String, usize> = BTreeMap::new();
        for doc in docs {
            let mut uniq: Vec<String> = doc
                .iter()
                .filter(|t| !RESERVED.contains(&t.as_ref()))
                .map(|t| t.as_ref().to_lowercase())
                .collect();
            uniq.sort_unstable();
            uniq.dedup();
            for t in uniq {
                *df.entry(t).or_default() += 1;
            }
        }
        let words = df.into_iter().filter(|(_, c)| *c >= min_df.max(1)).map(|(t, _)| t);
        Self::from_tokens(RESERVED.iter().map(|s| s.to_string()).chain(words).collect())
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        self.index.get(&token.to_lowercase()).copied().unwrap_or(0)
    }

    pub fn ids<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub(crate) fn write(&self, w: &mut Writer) {
        w.strs(&self.tokens);
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self> {
        let tokens = r.strs()?;
        if tokens.len() < RESERVED.len() || tokens.iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(Error::format("vocabulary", "reserved tokens missing"));
        }
        Ok(Self::from_tokens(tokens))
    }
}

/// Per-token representations of an augmented input.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSequence {
    /// One row per encoded token.
    pub reps: Matrix,
    pub n: usize,
    pub m: usize,
}

impl EncodedSequence {
    pub fn dim(&self) -> usize {
        self.reps.cols()
    }

    pub fn rep(&self, i: usize) -> &[f64] {
        self.reps.row(i)
    }
}

/// Any differentiable map from an augmented input to per-token vectors.
pub trait Encoder {
    type Gradient;

    fn hidden_size(&self) -> usize;

    fn encode(&self, input: &AugmentedInput) -> EncodedSequence;

    /// Gradient of `Σ_i upstream_i · r_i` with respect to the encoder's
    /// parameters. `upstream` may cover only a prefix of the rows.
    fn backward(&self, input: &AugmentedInput, upstream: &Matrix) -> Self::Gradient;
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub vocab: Vocab,
    pub window: usize,
    /// `vocab × d` token embeddings.
    pub emb: Matrix,
    /// `d × d` window mixing weights.
    pub mix: Matrix,
    pub seed: u64,
}

/// Sparse embedding rows plus the dense mixing matrix gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrad {
    pub emb: BTreeMap<usize, Vec<f64>>,
    pub mix: Matrix,
}

impl EncoderParams {
    pub fn init(vocab: Vocab, dim: usize, window: usize, seed: u64, scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |_, _| rng.random_range(-scale..=scale);
        let emb = Matrix::from_fn(vocab.len(), dim, &mut draw);
        let mix = Matrix::from_fn(dim, dim, &mut draw);
        EncoderParams {
            vocab,
            window,
            emb,
            mix,
            seed,
        }
    }

    pub fn dim(&self) -> usize {
        self.emb.cols()
    }

    fn window_bounds(&self, i: usize, len: usize) -> (usize, usize) {
        (i.saturating_sub(self.window), (i + self.window).min(len - 1))
    }

    fn window_mean(&self, ids: &[usize], i: usize) -> Vec<f64> {
        let d = self.dim();
        let (lo, hi) = self.window_bounds(i, ids.len());
        let mut mean = vec![0.0; d];
        for &id in &ids[lo..=hi] {
            for (m, e) in mean.iter_mut().zip(self.emb.row(id)) {
                *m += e;
            }
        }
        let count = (hi - lo + 1) as f64;
        mean.iter_mut().for_each(|m| *m /= count);
        mean
    }

    /// Representations of the first `rows` positions; windows still range over
    /// the whole sequence.
    pub fn encode_prefix(&self, input: &AugmentedInput, rows: usize) -> EncodedSequence {
        let ids = self.vocab.ids(&input.tokens);
        let rows = rows.min(ids.len());
        let d = self.dim();
        let mut reps = Matrix::zeros(rows, d);
        for i in 0..rows {
            let mean = self.window_mean(&ids, i);
            let out = reps.row_mut(i);
            for (a, o) in out.iter_mut().enumerate() {
                let mrow = self.mix.row(a);
                *o = mrow.iter().zip(&mean).map(|(w, x)| w * x).sum::<f64>() + self.emb.get(ids[i], a);
            }
        }
        EncodedSequence {
            reps,
            n: input.n,
            m: input.m,
        }
    }

    pub(crate) fn write(&self, w: &mut Writer) {
        self.vocab.write(w);
        w.usize(self.window);
        w.u64(self.seed);
        self.emb.write(w);
        self.mix.write(w);
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self> {
        let vocab = Vocab::read(r)?;
        let window = r.usize()?;
        let seed = r.u64()?;
        let emb = Matrix::read(r)?;
        let mix = Matrix::read(r)?;
        if emb.rows() != vocab.len() || mix.rows() != emb.cols() || mix.cols() != emb.cols() {
            return Err(Error::format("encoder parameters", "inconsistent shapes"));
        }
        Ok(EncoderParams {
            vocab,
            window,
            emb,
            mix,
            seed,
        })
    }
}

impl Encoder for EncoderParams {
    type Gradient = EncoderGrad;

    fn hidden_size(&self) -> usize {
        self.dim()
    }

    fn encode(&self, input: &AugmentedInput) -> EncodedSequence {
        self.encode_prefix(input, input.len())
    }

    fn backward(&self, input: &AugmentedInput, upstream: &Matrix) -> EncoderGrad {
        let d = self.dim();
        let ids = self.vocab.ids(&input.tokens);
        let mut grad = EncoderGrad {
            emb: BTreeMap::new(),
            mix: Matrix::zeros(d, d),
        };
        for i in 0..upstream.rows().min(ids.len()) {
            let g = upstream.row(i);
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            let mean = self.window_mean(&ids, i);
            for (a, &ga) in g.iter().enumerate() {
                let row = grad.mix.row_mut(a);
                for (r, &mb) in row.iter_mut().zip(&mean) {
                    *r += ga * mb;
                }
            }
            // d mean = W_mixᵀ g, shared equally by the window's tokens
            let (lo, hi) = self.window_bounds(i, ids.len());
            let count = (hi - lo + 1) as f64;
            let mut back = vec![0.0; d];
            for (a, &ga) in g.iter().enumerate() {
                for (b, &w) in self.mix.row(a).iter().enumerate() {
                    back[b] += w * ga;
                }
            }
            back.iter_mut().for_each(|v| *v /= count);
            for &id in &ids[lo..=hi] {
                let e = grad.emb.entry(id).or_insert_with(|| vec![0.0; d]);
                e.iter_mut().zip(&back).for_each(|(e, b)| *e += b);
            }
            let e = grad.emb.entry(ids[i]).or_insert_with(|| vec![0.0; d]);
            e.iter_mut().zip(g).for_each(|(e, g)| *e += g);
        }
        grad
    }
}
