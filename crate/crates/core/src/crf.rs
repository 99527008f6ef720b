//! Linear-chain CRF over input-token representations.
//!
//! Log-potentials are `φ_i(y', y) = W_y · r_i + T[y', y]`, where row `t` of
//! the transition table `T` is a distinguished START state used only at the
//! first position. There is no STOP transition. All dynamic programs run in
//! log space in double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio::{Reader, Writer};
use crate::encoder::EncodedSequence;
use crate::error::{Error, Result};
use crate::tensor::{argmax, dot, log_sum_exp, Matrix};

/// Probability floor used by the alignment loss.
pub const KL_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct CrfParams {
    /// `d × t` emission weights; column `y` is `W_y`.
    pub emission: Matrix,
    /// `(t + 1) × t` transition scores; the last row is START.
    pub transitions: Matrix,
}

impl CrfParams {
    pub fn zeros(dim: usize, num_labels: usize) -> Self {
        CrfParams {
            emission: Matrix::zeros(dim, num_labels),
            transitions: Matrix::zeros(num_labels + 1, num_labels),
        }
    }

    pub fn init(dim: usize, num_labels: usize, seed: u64, scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |_, _| rng.random_range(-scale..=scale);
        CrfParams {
            emission: Matrix::from_fn(dim, num_labels, &mut draw),
            transitions: Matrix::from_fn(num_labels + 1, num_labels, &mut draw),
        }
    }

    pub fn num_labels(&self) -> usize {
        self.emission.cols()
    }

    pub fn dim(&self) -> usize {
        self.emission.rows()
    }

    pub(crate) fn write(&self, w: &mut Writer) {
        self.emission.write(w);
        self.transitions.write(w);
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self> {
        let emission = Matrix::read(r)?;
        let transitions = Matrix::read(r)?;
        let t = emission.cols();
        if t == 0 || transitions.rows() != t + 1 || transitions.cols() != t {
            return Err(Error::format("crf parameters", "inconsistent shapes"));
        }
        Ok(CrfParams { emission, transitions })
    }
}

/// `n × (t + 1) × t` log-potential tensor, also used for gradients with
/// respect to it.
#[derive(Debug, Clone, PartialEq)]
pub struct Potentials {
    n: usize,
    t: usize,
    data: Vec<f64>,
}

impl Potentials {
    pub fn zeros(n: usize, t: usize) -> Self {
        Potentials {
            n,
            t,
            data: vec![0.0; n * (t + 1) * t],
        }
    }

    /// `f(i, prev, cur)` for every entry; `prev == t` is START.
    pub fn from_fn(n: usize, t: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut p = Self::zeros(n, t);
        for i in 0..n {
            for prev in 0..=t {
                for cur in 0..t {
                    p.set(i, prev, cur, f(i, prev, cur));
                }
            }
        }
        p
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn num_labels(&self) -> usize {
        self.t
    }

    /// Index of the START state.
    pub fn start(&self) -> usize {
        self.t
    }

    #[inline]
    fn idx(&self, i: usize, prev: usize, cur: usize) -> usize {
        (i * (self.t + 1) + prev) * self.t + cur
    }

    #[inline]
    pub fn get(&self, i: usize, prev: usize, cur: usize) -> f64 {
        self.data[self.idx(i, prev, cur)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, prev: usize, cur: usize, v: f64) {
        let k = self.idx(i, prev, cur);
        self.data[k] = v;
    }

    #[inline]
    fn add(&mut self, i: usize, prev: usize, cur: usize, v: f64) {
        let k = self.idx(i, prev, cur);
        self.data[k] += v;
    }

    /// The potential actually used for an edge: START at position 0.
    #[inline]
    fn edge(&self, i: usize, prev: usize, cur: usize) -> f64 {
        if i == 0 {
            self.get(0, self.t, cur)
        } else {
            self.get(i, prev, cur)
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Builds potentials from the first `n` rows of the encoding.
pub fn log_potentials(encoded: &EncodedSequence, params: &CrfParams) -> Potentials {
    let n = encoded.n;
    let t = params.num_labels();
    let mut pot = Potentials::zeros(n, t);
    let mut emit = vec![0.0; t];
    for i in 0..n {
        let r = encoded.rep(i);
        for (y, e) in emit.iter_mut().enumerate() {
            *e = (0..r.len()).map(|a| r[a] * params.emission.get(a, y)).sum();
        }
        for prev in 0..=t {
            for (y, &e) in emit.iter().enumerate() {
                pot.set(i, prev, y, e + params.transitions.get(prev, y));
            }
        }
    }
    pot
}

/// Forward/backward tables in log space.
struct Lattice {
    alpha: Matrix,
    beta: Matrix,
    log_z: f64,
}

fn lattice(pot: &Potentials) -> Lattice {
    let (n, t) = (pot.n, pot.t);
    let mut alpha = Matrix::zeros(n, t);
    let mut beta = Matrix::zeros(n, t);
    if n == 0 {
        return Lattice {
            alpha,
            beta,
            log_z: 0.0,
        };
    }
    for y in 0..t {
        alpha.set(0, y, pot.edge(0, t, y));
    }
    for i in 1..n {
        for y in 0..t {
            let v = log_sum_exp((0..t).map(|p| alpha.get(i - 1, p) + pot.get(i, p, y)));
            alpha.set(i, y, v);
        }
    }
    for i in (0..n - 1).rev() {
        for y in 0..t {
            let v = log_sum_exp((0..t).map(|q| pot.get(i + 1, y, q) + beta.get(i + 1, q)));
            beta.set(i, y, v);
        }
    }
    let log_z = log_sum_exp(alpha.row(n - 1).iter().copied());
    Lattice { alpha, beta, log_z }
}

/// Log of the sum over all `t^n` label sequences of their exponentiated score.
pub fn log_partition(pot: &Potentials) -> f64 {
    lattice(pot).log_z
}

fn check_labels(pot: &Potentials, labels: &[usize]) -> Result<()> {
    if labels.len() != pot.n {
        return Err(Error::Dimension {
            what: "label sequence".into(),
            expected: pot.n,
            found: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= pot.t) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            size: pot.t,
        });
    }
    Ok(())
}

/// Unnormalized log score of one label sequence.
pub fn sequence_score(pot: &Potentials, labels: &[usize]) -> Result<f64> {
    check_labels(pot, labels)?;
    let mut prev = pot.start();
    let mut s = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        s += pot.edge(i, prev, y);
        prev = y;
    }
    Ok(s)
}

/// `log Z − score(gold)`.
pub fn sequence_nll(pot: &Potentials, gold: &[usize]) -> Result<f64> {
    let score = sequence_score(pot, gold)?;
    Ok((log_partition(pot) - score).max(0.0))
}

/// Highest-scoring label sequence. Among equally scored sequences the
/// lexicographically smallest one is returned.
pub fn viterbi_decode(pot: &Potentials) -> Vec<usize> {
    let (n, t) = (pot.n, pot.t);
    if n == 0 {
        return Vec::new();
    }
    // best[i][y]: best score of positions i+1.. given y at i
    let mut best = Matrix::zeros(n, t);
    for i in (0..n - 1).rev() {
        for y in 0..t {
            let v = (0..t)
                .map(|q| pot.get(i + 1, y, q) + best.get(i + 1, q))
                .fold(f64::NEG_INFINITY, f64::max);
            best.set(i, y, v);
        }
    }
    let mut path = Vec::with_capacity(n);
    let mut prev = t;
    for i in 0..n {
        let scores: Vec<f64> = (0..t).map(|y| pot.edge(i, prev, y) + best.get(i, y)).collect();
        prev = argmax(&scores);
        path.push(prev);
    }
    path
}

/// Per-position label marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct Posteriors {
    /// `n × t`, rows sum to one.
    pub marg: Matrix,
    pub log_z: f64,
}

impl Posteriors {
    pub fn len(&self) -> usize {
        self.marg.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.marg.rows() == 0
    }

    pub fn num_labels(&self) -> usize {
        self.marg.cols()
    }

    /// Position-wise argmax, lowest label on ties.
    pub fn argmax_labels(&self) -> Vec<usize> {
        (0..self.len()).map(|i| argmax(self.marg.row(i))).collect()
    }
}

fn marginals(pot: &Potentials, lat: &Lattice) -> Matrix {
    Matrix::from_fn(pot.n, pot.t, |i, y| {
        (lat.alpha.get(i, y) + lat.beta.get(i, y) - lat.log_z).exp()
    })
}

pub fn forward_backward(pot: &Potentials) -> Posteriors {
    let lat = lattice(pot);
    Posteriors {
        marg: marginals(pot, &lat),
        log_z: lat.log_z,
    }
}

/// `P(y_{i-1} = prev, y_i = cur)`; at `i = 0` only `prev = START` has mass.
fn edge_marginal(pot: &Potentials, lat: &Lattice, i: usize, prev: usize, cur: usize) -> f64 {
    if i == 0 {
        if prev != pot.t {
            return 0.0;
        }
        return (pot.get(0, prev, cur) + lat.beta.get(0, cur) - lat.log_z).exp();
    }
    if prev == pot.t {
        return 0.0;
    }
    (lat.alpha.get(i - 1, prev) + pot.get(i, prev, cur) + lat.beta.get(i, cur) - lat.log_z).exp()
}

/// Loss and its gradient with respect to the potentials: expected minus gold
/// edge indicators.
pub fn nll_potential_grad(pot: &Potentials, gold: &[usize]) -> Result<(f64, Potentials)> {
    let score = sequence_score(pot, gold)?;
    let lat = lattice(pot);
    let mut grad = Potentials::zeros(pot.n, pot.t);
    for i in 0..pot.n {
        for prev in 0..=pot.t {
            for cur in 0..pot.t {
                let p = edge_marginal(pot, &lat, i, prev, cur);
                if p != 0.0 {
                    grad.set(i, prev, cur, p);
                }
            }
        }
    }
    let mut prev = pot.t;
    for (i, &y) in gold.iter().enumerate() {
        grad.add(i, prev, y, -1.0);
        prev = y;
    }
    Ok(((lat.log_z - score).max(0.0), grad))
}

/// Gradient of `Σ_i Σ_y c[i][y] · P(y_i = y)` with respect to the potentials.
///
/// Each edge gradient is `P(edge) · (E[g | edge] − E[g])` with
/// `g(Y) = Σ_i c[i][Y_i]`; the conditional expectations come from a prefix
/// and a suffix recursion over the forward/backward tables.
pub fn marginal_vjp(pot: &Potentials, c: &Matrix) -> Potentials {
    let lat = lattice(pot);
    marginal_vjp_with(pot, &lat, c)
}

fn marginal_vjp_with(pot: &Potentials, lat: &Lattice, c: &Matrix) -> Potentials {
    let (n, t) = (pot.n, pot.t);
    let mut grad = Potentials::zeros(n, t);
    if n == 0 {
        return grad;
    }
    // prefix[i][y] = E[Σ_{j≤i} c_j | Y_i = y]
    let mut prefix = Matrix::zeros(n, t);
    for y in 0..t {
        prefix.set(0, y, c.get(0, y));
    }
    for i in 1..n {
        for y in 0..t {
            let mut acc = c.get(i, y);
            for p in 0..t {
                let w = (lat.alpha.get(i - 1, p) + pot.get(i, p, y) - lat.alpha.get(i, y)).exp();
                acc += w * prefix.get(i - 1, p);
            }
            prefix.set(i, y, acc);
        }
    }
    // suffix[i][y] = E[Σ_{j>i} c_j | Y_i = y]
    let mut suffix = Matrix::zeros(n, t);
    for i in (0..n - 1).rev() {
        for y in 0..t {
            let mut acc = 0.0;
            for q in 0..t {
                let w = (pot.get(i + 1, y, q) + lat.beta.get(i + 1, q) - lat.beta.get(i, y)).exp();
                acc += w * (c.get(i + 1, q) + suffix.get(i + 1, q));
            }
            suffix.set(i, y, acc);
        }
    }
    let first: Vec<f64> = (0..t).map(|y| edge_marginal(pot, lat, 0, t, y)).collect();
    let mean: f64 = (0..t).map(|y| first[y] * (c.get(0, y) + suffix.get(0, y))).sum();
    for (y, &f) in first.iter().enumerate() {
        grad.set(0, t, y, f * (c.get(0, y) + suffix.get(0, y) - mean));
    }
    for i in 1..n {
        for p in 0..t {
            for y in 0..t {
                let pe = edge_marginal(pot, lat, i, p, y);
                if pe != 0.0 {
                    let cond = prefix.get(i - 1, p) + c.get(i, y) + suffix.get(i, y);
                    grad.set(i, p, y, pe * (cond - mean));
                }
            }
        }
    }
    grad
}

/// Gradients of a loss with respect to CRF parameters and input-token reps.
#[derive(Debug, Clone, PartialEq)]
pub struct CrfGrad {
    pub emission: Matrix,
    pub transitions: Matrix,
    /// `n × d`, rows for the input tokens only.
    pub reps: Matrix,
}

/// Chains a potential-space gradient through `φ_i(y', y) = W_y · r_i + T[y', y]`.
pub fn backprop_potentials(encoded: &EncodedSequence, params: &CrfParams, dpot: &Potentials) -> CrfGrad {
    let (n, t, d) = (dpot.n, dpot.t, params.dim());
    let mut g = CrfGrad {
        emission: Matrix::zeros(d, t),
        transitions: Matrix::zeros(t + 1, t),
        reps: Matrix::zeros(n, d),
    };
    let mut unary = vec![0.0; t];
    for i in 0..n {
        unary.iter_mut().for_each(|u| *u = 0.0);
        for prev in 0..=t {
            for (y, u) in unary.iter_mut().enumerate() {
                let v = dpot.get(i, prev, y);
                *u += v;
                g.transitions.add_at(prev, y, v);
            }
        }
        let r = encoded.rep(i);
        for (a, &ra) in r.iter().enumerate().take(d) {
            let row = g.emission.row_mut(a);
            for (y, u) in unary.iter().enumerate() {
                row[y] += ra * u;
            }
            g.reps.set(i, a, dot(params.emission.row(a), &unary));
        }
    }
    g
}

/// Sequence NLL with gradients for `W`, `T`, and the input-token reps.
pub fn nll_gradient(encoded: &EncodedSequence, params: &CrfParams, gold: &[usize]) -> Result<(f64, CrfGrad)> {
    let pot = log_potentials(encoded, params);
    let (loss, dpot) = nll_potential_grad(&pot, gold)?;
    Ok((loss, backprop_potentials(encoded, params, &dpot)))
}

fn check_same_shape(a: &Posteriors, b: &Posteriors) -> Result<()> {
    if a.len() != b.len() || a.num_labels() != b.num_labels() {
        return Err(Error::Dimension {
            what: "posteriors".into(),
            expected: a.len() * a.num_labels(),
            found: b.len() * b.num_labels(),
        });
    }
    Ok(())
}

/// `(1/n) Σ_i KL(with[i] ‖ without[i])` with probabilities floored at
/// [`KL_EPSILON`] inside the logarithms.
pub fn kl_alignment_loss(with_context: &Posteriors, without_context: &Posteriors) -> Result<f64> {
    check_same_shape(with_context, without_context)?;
    Ok(kl_rows(&with_context.marg, &without_context.marg))
}

pub(crate) fn kl_rows(p: &Matrix, q: &Matrix) -> f64 {
    let n = p.rows();
    if n == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        for (&pi, &qi) in p.row(i).iter().zip(q.row(i)) {
            if pi > 0.0 {
                total += pi * (pi.max(KL_EPSILON).ln() - qi.max(KL_EPSILON).ln());
            }
        }
    }
    total / n as f64
}

/// Alignment loss with gradients for both views' potentials.
#[derive(Debug, Clone, PartialEq)]
pub struct KlGrad {
    pub loss: f64,
    pub with_context: Potentials,
    pub without_context: Potentials,
}

pub fn kl_alignment_grad(pot_with: &Potentials, pot_without: &Potentials) -> Result<KlGrad> {
    let lat_p = lattice(pot_with);
    let lat_q = lattice(pot_without);
    let p = marginals(pot_with, &lat_p);
    let q = marginals(pot_without, &lat_q);
    if p.rows() != q.rows() || p.cols() != q.cols() {
        return Err(Error::Dimension {
            what: "alignment views".into(),
            expected: p.rows(),
            found: q.rows(),
        });
    }
    let n = p.rows();
    let scale = if n == 0 { 0.0 } else { 1.0 / n as f64 };
    let dp = Matrix::from_fn(n, p.cols(), |i, y| {
        let (pi, qi) = (p.get(i, y), q.get(i, y));
        let own = if pi > KL_EPSILON { 1.0 } else { 0.0 };
        scale * (pi.max(KL_EPSILON).ln() - qi.max(KL_EPSILON).ln() + own)
    });
    let dq = Matrix::from_fn(n, p.cols(), |i, y| {
        let (pi, qi) = (p.get(i, y), q.get(i, y));
        if qi > KL_EPSILON {
            -scale * pi / qi
        } else {
            0.0
        }
    });
    Ok(KlGrad {
        loss: kl_rows(&p, &q),
        with_context: marginal_vjp_with(pot_with, &lat_p, &dp),
        without_context: marginal_vjp_with(pot_without, &lat_q, &dq),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zeros(n: usize, t: usize) -> Potentials {
        Potentials::zeros(n, t)
    }

    #[test]
    fn single_position_closed_form() {
        let (a, b) = (0.3, -1.2);
        let pot = Potentials::from_fn(1, 2, |_, _, y| if y == 0 { a } else { b });
        let expect = (a.exp() + b.exp()).ln();
        assert!((log_partition(&pot) - expect).abs() < 1e-14);
        let post = forward_backward(&pot);
        assert!((post.marg.get(0, 0) - a.exp() / (a.exp() + b.exp())).abs() < 1e-14);
    }

    #[test]
    fn uniform_potentials() {
        let pot = zeros(4, 3);
        assert!((log_partition(&pot) - 4.0 * 3f64.ln()).abs() < 1e-12);
        assert!((sequence_nll(&pot, &[0, 1, 2, 0]).unwrap() - 4.0 * 3f64.ln()).abs() < 1e-12);
        let post = forward_backward(&pot);
        for i in 0..4 {
            for y in 0..3 {
                assert!((post.marg.get(i, y) - 1.0 / 3.0).abs() < 1e-12);
            }
        }
        assert_eq!(viterbi_decode(&pot), vec![0, 0, 0, 0]);
    }

    #[test]
    fn single_label_has_zero_loss() {
        let pot = Potentials::from_fn(5, 1, |i, p, _| i as f64 * 0.7 - p as f64 * 0.2);
        assert_eq!(sequence_nll(&pot, &[0; 5]).unwrap(), 0.0);
        assert_eq!(viterbi_decode(&pot), vec![0; 5]);
    }

    #[test]
    fn out_of_range_label_rejected() {
        let pot = zeros(2, 2);
        assert!(matches!(sequence_nll(&pot, &[0, 2]), Err(Error::LabelOutOfRange { label: 2, size: 2 })));
        assert!(sequence_nll(&pot, &[0]).is_err());
    }

    #[test]
    fn sticky_transitions_give_constant_path() {
        let pot = Potentials::from_fn(5, 3, |i, p, y| if i > 0 && p == y { 2.0 } else { 0.0 });
        let path = viterbi_decode(&pot);
        assert!(path.iter().all(|&y| y == path[0]));
    }

    #[test]
    fn kl_closed_forms() {
        let one_hot = Posteriors {
            marg: Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap(),
            log_z: 0.0,
        };
        let uniform = Posteriors {
            marg: Matrix::from_vec(1, 2, vec![0.5, 0.5]).unwrap(),
            log_z: 0.0,
        };
        assert_eq!(kl_alignment_loss(&uniform, &uniform).unwrap(), 0.0);
        assert!((kl_alignment_loss(&one_hot, &uniform).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(kl_alignment_loss(&uniform, &one_hot).unwrap() > 10.0);
    }

    #[test]
    fn zero_cotangent_gives_zero_gradient() {
        let pot = Potentials::from_fn(3, 2, |i, p, y| (i * 7 + p * 3 + y) as f64 * 0.1);
        let g = marginal_vjp(&pot, &Matrix::zeros(3, 2));
        assert!(g.as_slice().iter().all(|&v| v.abs() < 1e-15));
    }
}
