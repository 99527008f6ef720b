//! Helpers shared by the integration tests.

#![allow(dead_code)]

use rakie::crf::Potentials;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..=scale)).collect()
}

pub fn random_potentials(rng: &mut ChaCha8Rng, n: usize, t: usize, scale: f64) -> Potentials {
    Potentials::from_fn(n, t, |_, _, _| rng.random_range(-scale..=scale))
}

/// Central differences of `f` at `x`.
pub fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|j| {
            let orig = probe[j];
            probe[j] = orig + FD_STEP;
            let up = f(&probe);
            probe[j] = orig - FD_STEP;
            let down = f(&probe);
            probe[j] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖ + ‖b‖, 1e-12)`; `0` when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / (na + nb).max(1e-12)
}

/// All `t^n` label sequences in lexicographic order.
pub fn all_sequences(n: usize, t: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..n {
        out = out
            .into_iter()
            .flat_map(|p| {
                (0..t).map(move |y| {
                    let mut q = p.clone();
                    q.push(y);
                    q
                })
            })
            .collect();
    }
    out
}

/// Score of `ys`, summed left to right from START.
pub fn path_score(pot: &Potentials, ys: &[usize]) -> f64 {
    let mut prev = pot.start();
    let mut s = 0.0;
    for (i, &y) in ys.iter().enumerate() {
        s += pot.get(i, prev, y);
        prev = y;
    }
    s
}

pub fn naive_log_sum_exp(xs: &[f64]) -> f64 {
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == f64::NEG_INFINITY {
        return hi;
    }
    hi + xs.iter().map(|x| (x - hi).exp()).sum::<f64>().ln()
}
