//! Two-expert gated mixture over task-model outputs.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio::{Reader, Writer};
use crate::crf::{Posteriors, KL_EPSILON};
use crate::encoder::Vocab;
use crate::error::{Error, Result};
use crate::tensor::{argmax, Matrix};

/// Probability floor used when both experts assign zero to the gold output.
pub const MIXTURE_EPSILON: f64 = KL_EPSILON;

#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub vocab: Vocab,
    /// Gate-only token embeddings, `V × d_T`.
    pub emb: Matrix,
    /// Weights over `[r_T; r_I]`.
    pub u: Vec<f64>,
    pub bias: f64,
    pub image_dim: usize,
}

impl GateParams {
    pub fn init(vocab: Vocab, text_dim: usize, image_dim: usize, seed: u64, scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let emb = Matrix::from_fn(vocab.len(), text_dim, |_, _| rng.random_range(-scale..=scale));
        let u = (0..text_dim + image_dim).map(|_| rng.random_range(-scale..=scale)).collect();
        GateParams {
            vocab,
            emb,
            u,
            bias: 0.0,
            image_dim,
        }
    }

    pub fn text_dim(&self) -> usize {
        self.emb.cols()
    }

    pub fn is_finite(&self) -> bool {
        self.emb.is_finite() && self.u.iter().all(|x| x.is_finite()) && self.bias.is_finite()
    }

    pub(crate) fn write(&self, w: &mut Writer) {
        self.vocab.write(w);
        self.emb.write(w);
        w.f64s(&self.u);
        w.f64(self.bias);
        w.usize(self.image_dim);
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self> {
        let vocab = Vocab::read(r)?;
        let emb = Matrix::read(r)?;
        let u = r.f64s()?;
        let bias = r.f64()?;
        let image_dim = r.usize()?;
        if emb.rows() != vocab.len() || u.len() != emb.cols() + image_dim {
            return Err(Error::format("gate parameters", "inconsistent shapes"));
        }
        Ok(GateParams {
            vocab,
            emb,
            u,
            bias,
            image_dim,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureWeights {
    pub p_text: f64,
    pub p_image: f64,
}

impl MixtureWeights {
    pub fn new(p_text: f64) -> Self {
        MixtureWeights {
            p_text,
            p_image: 1.0 - p_text,
        }
    }

    pub fn swapped(self) -> Self {
        MixtureWeights {
            p_text: self.p_image,
            p_image: self.p_text,
        }
    }
}

/// Gate inputs: mean gate embedding over `x` and the image feature.
#[derive(Debug, Clone, PartialEq)]
pub struct GateFeatures {
    pub token_ids: Vec<usize>,
    pub text: Vec<f64>,
    pub image: Vec<f64>,
}

pub fn gate_features<S: AsRef<str>>(tokens: &[S], image: &[f32], params: &GateParams) -> Result<GateFeatures> {
    if image.len() != params.image_dim {
        return Err(Error::Dimension {
            what: "gate image feature".into(),
            expected: params.image_dim,
            found: image.len(),
        });
    }
    let token_ids = params.vocab.ids(tokens);
    let d = params.text_dim();
    let mut text = vec![0.0; d];
    for &id in &token_ids {
        text.iter_mut().zip(params.emb.row(id)).for_each(|(a, b)| *a += b);
    }
    if !token_ids.is_empty() {
        let inv = 1.0 / token_ids.len() as f64;
        text.iter_mut().for_each(|a| *a *= inv);
    }
    Ok(GateFeatures {
        token_ids,
        text,
        image: image.iter().map(|&v| v as f64).collect(),
    })
}

/// `U·[r_T; r_I] + b★`.
pub fn gate_logit(features: &GateFeatures, params: &GateParams) -> f64 {
    let d = params.text_dim();
    let t: f64 = params.u[..d].iter().zip(&features.text).map(|(a, b)| a * b).sum();
    let i: f64 = params.u[d..].iter().zip(&features.image).map(|(a, b)| a * b).sum();
    t + i + params.bias
}

pub fn logistic(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(s)` without overflow.
fn log_logistic(s: f64) -> f64 {
    if s >= 0.0 {
        -(-s).exp().ln_1p()
    } else {
        s - s.exp().ln_1p()
    }
}

pub fn gate(features: &GateFeatures, params: &GateParams) -> MixtureWeights {
    MixtureWeights::new(logistic(gate_logit(features, params)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureNll {
    pub loss: f64,
    /// `∂loss/∂s` for the gate logit `s`.
    pub dlogit: f64,
    /// Set when both experts gave the gold output probability 0.
    pub floored: bool,
}

/// `−ln(σ(s)·P_T + σ(−s)·P_I)` from expert log-probabilities of the gold output.
pub fn mixture_nll(logit: f64, log_p_text: f64, log_p_image: f64) -> MixtureNll {
    if log_p_text == f64::NEG_INFINITY && log_p_image == f64::NEG_INFINITY {
        return MixtureNll {
            loss: -MIXTURE_EPSILON.ln(),
            dlogit: 0.0,
            floored: true,
        };
    }
    let a = log_logistic(logit) + log_p_text;
    let b = log_logistic(-logit) + log_p_image;
    let hi = a.max(b);
    let lse = hi + ((a - hi).exp() + (b - hi).exp()).ln();
    let posterior_text = (a - lse).exp();
    MixtureNll {
        loss: (-lse).max(0.0),
        dlogit: logistic(logit) - posterior_text,
        floored: false,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateGrad {
    pub emb: BTreeMap<usize, Vec<f64>>,
    pub u: Vec<f64>,
    pub bias: f64,
}

pub fn gate_backward(features: &GateFeatures, params: &GateParams, dlogit: f64) -> GateGrad {
    let d = params.text_dim();
    let mut u = Vec::with_capacity(params.u.len());
    u.extend(features.text.iter().map(|x| dlogit * x));
    u.extend(features.image.iter().map(|x| dlogit * x));
    let mut emb: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    if !features.token_ids.is_empty() && dlogit != 0.0 {
        let scale = dlogit / features.token_ids.len() as f64;
        for &id in &features.token_ids {
            let row = emb.entry(id).or_insert_with(|| vec![0.0; d]);
            row.iter_mut().zip(&params.u[..d]).for_each(|(a, w)| *a += scale * w);
        }
    }
    GateGrad { emb, u, bias: dlogit }
}

/// Mixture NLL of one example with gradients for the gate only.
pub fn moe_training_nll<S: AsRef<str>>(
    tokens: &[S],
    image: &[f32],
    params: &GateParams,
    log_p_text: f64,
    log_p_image: f64,
) -> Result<(MixtureNll, GateGrad)> {
    let features = gate_features(tokens, image, params)?;
    let nll = mixture_nll(gate_logit(&features, params), log_p_text, log_p_image);
    let grad = gate_backward(&features, params, nll.dlogit);
    Ok((nll, grad))
}

pub fn mix_distributions(dist_text: &[f64], dist_image: &[f64], w: MixtureWeights) -> Result<Vec<f64>> {
    if dist_text.len() != dist_image.len() {
        return Err(Error::Dimension {
            what: "expert label distributions".into(),
            expected: dist_text.len(),
            found: dist_image.len(),
        });
    }
    Ok(dist_text
        .iter()
        .zip(dist_image)
        .map(|(a, b)| w.p_text * a + w.p_image * b)
        .collect())
}

pub fn moe_decode_re(dist_text: &[f64], dist_image: &[f64], w: MixtureWeights) -> Result<usize> {
    Ok(argmax(&mix_distributions(dist_text, dist_image, w)?))
}

/// Per-position `p_T·marg_T + p_I·marg_I`.
pub fn mix_marginals(post_text: &Posteriors, post_image: &Posteriors, w: MixtureWeights) -> Result<Matrix> {
    let (a, b) = (&post_text.marg, &post_image.marg);
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::Dimension {
            what: "expert marginals".into(),
            expected: a.rows() * a.cols(),
            found: b.rows() * b.cols(),
        });
    }
    let data = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| w.p_text * x + w.p_image * y)
        .collect();
    Matrix::from_vec(a.rows(), a.cols(), data)
}

pub fn moe_decode_ner(post_text: &Posteriors, post_image: &Posteriors, w: MixtureWeights) -> Result<Vec<usize>> {
    let mixed = mix_marginals(post_text, post_image, w)?;
    Ok((0..mixed.rows()).map(|i| argmax(mixed.row(i))).collect())
}

/// Smallest `τ` such that every `p_T ∈ (τ, 1]` decodes to the text expert's
/// position-wise argmax. `1.0` means only exact saturation does.
pub fn expert_dominance_threshold(post_text: &Posteriors, post_image: &Posteriors) -> Result<f64> {
    let (a, b) = (&post_text.marg, &post_image.marg);
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::Dimension {
            what: "expert marginals".into(),
            expected: a.rows() * a.cols(),
            found: b.rows() * b.cols(),
        });
    }
    let mut tau: f64 = 0.0;
    for i in 0..a.rows() {
        let best = argmax(a.row(i));
        for y in 0..a.cols() {
            if y == best {
                continue;
            }
            // f(p) = p·dt + (1 − p)·di must stay > 0 (y < best) or ≥ 0 (y > best).
            let dt = a.get(i, best) - a.get(i, y);
            let di = b.get(i, best) - b.get(i, y);
            let ok_at_zero = if y < best { di > 0.0 } else { di >= 0.0 };
            if ok_at_zero {
                continue;
            }
            if dt <= 0.0 {
                return Ok(1.0);
            }
            tau = tau.max(-di / (dt - di));
        }
    }
    Ok(tau)
}
