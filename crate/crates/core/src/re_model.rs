//! Relation classification from entity-marker representations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::encoder::{EncodedSequence, OBJECT_END, OBJECT_START, SUBJECT_END, SUBJECT_START};
use crate::error::{Error, Result};
use crate::tensor::{log_sum_exp, softmax, Matrix};

/// Inclusive token span `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl From<[usize; 2]> for Span {
    fn from([start, end]: [usize; 2]) -> Self {
        Span { start, end }
    }
}

impl From<Span> for [usize; 2] {
    fn from(s: Span) -> Self {
        [s.start, s.end]
    }
}

impl Span {
    pub fn overlaps(&self, other: &Span) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationInstance {
    pub tokens: Vec<String>,
    pub subject: Span,
    pub object: Span,
    pub subject_type: String,
    pub object_type: String,
    pub relation: String,
    pub image_id: String,
}

impl RelationInstance {
    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        for (name, s) in [("subject", self.subject), ("object", self.object)] {
            if s.start > s.end || s.end >= n {
                return Err(Error::InvalidInput(format!(
                    "{name} span {}..={} out of bounds for {n} tokens",
                    s.start, s.end
                )));
            }
        }
        if self.subject.overlaps(&self.object) {
            return Err(Error::InvalidInput("subject and object spans overlap".into()));
        }
        Ok(())
    }

    pub fn marked(&self) -> Result<MarkedSequence> {
        self.validate()?;
        insert_markers(&self.tokens, self.subject, self.object)
    }
}

/// Input with `<S> … </S>` and `<O> … </O>` inserted.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkedSequence {
    pub tokens: Vec<String>,
    pub subject_marker: usize,
    pub object_marker: usize,
}

pub fn insert_markers(tokens: &[String], subject: Span, object: Span) -> Result<MarkedSequence> {
    let n = tokens.len();
    if subject.start > subject.end || subject.end >= n || object.start > object.end || object.end >= n {
        return Err(Error::InvalidInput("entity span out of bounds".into()));
    }
    if subject.overlaps(&object) {
        return Err(Error::InvalidInput("subject and object spans overlap".into()));
    }
    let mut out = Vec::with_capacity(n + 4);
    let (mut s_pos, mut o_pos) = (0, 0);
    for (i, tok) in tokens.iter().enumerate() {
        if i == subject.start {
            s_pos = out.len();
            out.push(SUBJECT_START.to_string());
        }
        if i == object.start {
            o_pos = out.len();
            out.push(OBJECT_START.to_string());
        }
        out.push(tok.clone());
        if i == subject.end {
            out.push(SUBJECT_END.to_string());
        }
        if i == object.end {
            out.push(OBJECT_END.to_string());
        }
    }
    Ok(MarkedSequence {
        tokens: out,
        subject_marker: s_pos,
        object_marker: o_pos,
    })
}

/// Removes the four marker tokens.
pub fn strip_markers(tokens: &[String]) -> Vec<String> {
    tokens
        .iter()
        .filter(|t| ![SUBJECT_START, SUBJECT_END, OBJECT_START, OBJECT_END].contains(&t.as_str()))
        .cloned()
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReParams {
    /// `2d × t'`; column `y` scores `[r_s; r_o]`.
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl ReParams {
    pub fn zeros(dim: usize, num_labels: usize) -> Self {
        ReParams {
            weights: Matrix::zeros(2 * dim, num_labels),
            bias: vec![0.0; num_labels],
        }
    }

    pub fn init(dim: usize, num_labels: usize, seed: u64, scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ReParams {
            weights: Matrix::from_fn(2 * dim, num_labels, |_, _| rng.random_range(-scale..=scale)),
            bias: vec![0.0; num_labels],
        }
    }

    pub fn num_labels(&self) -> usize {
        self.bias.len()
    }

    pub fn dim(&self) -> usize {
        self.weights.rows() / 2
    }

    pub(crate) fn write(&self, w: &mut Writer) {
        self.weights.write(w);
        w.f64s(&self.bias);
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self> {
        let weights = Matrix::read(r)?;
        let bias = r.f64s()?;
        if weights.cols() != bias.len() || weights.rows() % 2 != 0 || bias.is_empty() {
            return Err(Error::format("relation parameters", "inconsistent shapes"));
        }
        Ok(ReParams { weights, bias })
    }
}

/// Positions of the subject and object start markers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MarkerPositions {
    pub subject: usize,
    pub object: usize,
}

impl From<&MarkedSequence> for MarkerPositions {
    fn from(m: &MarkedSequence) -> Self {
        MarkerPositions {
            subject: m.subject_marker,
            object: m.object_marker,
        }
    }
}

pub fn relation_logits(encoded: &EncodedSequence, markers: MarkerPositions, params: &ReParams) -> Vec<f64> {
    let d = params.dim();
    let rs = encoded.rep(markers.subject);
    let ro = encoded.rep(markers.object);
    (0..params.num_labels())
        .map(|y| {
            let mut s = params.bias[y];
            for a in 0..d {
                s += params.weights.get(a, y) * rs[a] + params.weights.get(d + a, y) * ro[a];
            }
            s
        })
        .collect()
}

/// `softmax(Mᵀ[r_s; r_o] + b′)`.
pub fn relation_distribution(encoded: &EncodedSequence, markers: MarkerPositions, params: &ReParams) -> Vec<f64> {
    softmax(&relation_logits(encoded, markers, params))
}

pub fn re_nll(dist: &[f64], gold: usize) -> Result<f64> {
    let p = *dist.get(gold).ok_or(Error::LabelOutOfRange {
        label: gold,
        size: dist.len(),
    })?;
    Ok(-p.ln())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReGrad {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub subject_rep: Vec<f64>,
    pub object_rep: Vec<f64>,
    pub markers: MarkerPositions,
}

impl ReGrad {
    /// Dense upstream gradient for the first `rows` encoder rows.
    pub fn reps_matrix(&self, rows: usize) -> Matrix {
        let d = self.subject_rep.len();
        let mut m = Matrix::zeros(rows, d);
        for (row, g) in [(self.markers.subject, &self.subject_rep), (self.markers.object, &self.object_rep)] {
            if row < rows {
                m.row_mut(row).iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        m
    }
}

/// Chains a gradient on the logits back to `M`, `b′`, `r_s` and `r_o`.
pub fn backprop_logits(encoded: &EncodedSequence, markers: MarkerPositions, params: &ReParams, dlogits: &[f64]) -> ReGrad {
    let d = params.dim();
    let rs = encoded.rep(markers.subject);
    let ro = encoded.rep(markers.object);
    let mut weights = Matrix::zeros(2 * d, dlogits.len());
    let mut subject_rep = vec![0.0; d];
    let mut object_rep = vec![0.0; d];
    for a in 0..d {
        for (y, &g) in dlogits.iter().enumerate() {
            weights.set(a, y, g * rs[a]);
            weights.set(d + a, y, g * ro[a]);
            subject_rep[a] += g * params.weights.get(a, y);
            object_rep[a] += g * params.weights.get(d + a, y);
        }
    }
    ReGrad {
        weights,
        bias: dlogits.to_vec(),
        subject_rep,
        object_rep,
        markers,
    }
}

/// `−log P(gold)` with gradients for the parameters and marker reps.
pub fn re_nll_gradient(
    encoded: &EncodedSequence,
    markers: MarkerPositions,
    params: &ReParams,
    gold: usize,
) -> Result<(f64, ReGrad)> {
    let logits = relation_logits(encoded, markers, params);
    if gold >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label: gold,
            size: logits.len(),
        });
    }
    let lse = log_sum_exp(logits.iter().copied());
    let loss = lse - logits[gold];
    let mut dlogits: Vec<f64> = logits.iter().map(|&a| (a - lse).exp()).collect();
    dlogits[gold] -= 1.0;
    Ok((loss, backprop_logits(encoded, markers, params, &dlogits)))
}

/// `KL(softmax(with) ‖ softmax(without))` with gradients for both logit vectors.
pub fn kl_logits(with_logits: &[f64], without_logits: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let p = softmax(with_logits);
    let q = softmax(without_logits);
    let lp = |x: f64| x.max(crate::crf::KL_EPSILON).ln();
    let kl: f64 = p
        .iter()
        .zip(&q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(&pi, &qi)| pi * (lp(pi) - lp(qi)))
        .sum();
    let dwith = p.iter().zip(&q).map(|(&pi, &qi)| pi * (lp(pi) - lp(qi) - kl)).collect();
    let dwithout = p.iter().zip(&q).map(|(&pi, &qi)| qi - pi).collect();
    (kl, dwith, dwithout)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn enc(rows: &[&[f64]]) -> EncodedSequence {
        let d = rows[0].len();
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        EncodedSequence {
            reps: Matrix::from_vec(rows.len(), d, data).unwrap(),
            n: rows.len(),
            m: 0,
        }
    }

    #[test]
    fn markers_wrap_spans() {
        let m = insert_markers(&toks("a b c"), Span { start: 0, end: 0 }, Span { start: 2, end: 2 }).unwrap();
        assert_eq!(m.tokens, toks("<S> a </S> b <O> c </O>"));
        assert_eq!((m.subject_marker, m.object_marker), (0, 4));
    }

    #[test]
    fn object_first_in_text_order() {
        let m = insert_markers(&toks("a b c d"), Span { start: 2, end: 3 }, Span { start: 0, end: 0 }).unwrap();
        assert_eq!(m.tokens, toks("<O> a </O> b <S> c d </S>"));
        assert_eq!((m.subject_marker, m.object_marker), (4, 0));
        assert_eq!(strip_markers(&m.tokens), toks("a b c d"));
    }

    #[test]
    fn overlapping_spans_rejected() {
        assert!(insert_markers(&toks("a b c"), Span { start: 0, end: 1 }, Span { start: 1, end: 2 }).is_err());
        assert!(insert_markers(&toks("a b c"), Span { start: 0, end: 0 }, Span { start: 3, end: 3 }).is_err());
    }

    #[test]
    fn zero_params_are_uniform() {
        let e = enc(&[&[1.0, 2.0], &[0.5, -1.0]]);
        let p = ReParams::zeros(2, 4);
        let dist = relation_distribution(&e, MarkerPositions { subject: 0, object: 1 }, &p);
        assert!(dist.iter().all(|&x| (x - 0.25).abs() < 1e-15));
        assert!((re_nll(&dist, 2).unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_bias() {
        let e = enc(&[&[1.0], &[1.0]]);
        let mut p = ReParams::zeros(1, 3);
        p.bias[1] = 1e3;
        let dist = relation_distribution(&e, MarkerPositions { subject: 0, object: 1 }, &p);
        assert!((dist[1] - 1.0).abs() < 1e-12);
        assert_eq!(re_nll(&dist, 1).unwrap(), 0.0);
    }

    #[test]
    fn span_serializes_as_pair() {
        let s = serde_json::to_string(&Span { start: 1, end: 3 }).unwrap();
        assert_eq!(s, "[1,3]");
    }
}
