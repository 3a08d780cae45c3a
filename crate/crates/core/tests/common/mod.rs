#![allow(dead_code)]

use eopd_core::{Categorical, LogitVector, TeacherQuery};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn logits<R: Rng>(rng: &mut R, vocab: usize, scale: f64) -> Vec<f64> {
    (0..vocab)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

pub fn random_categorical<R: Rng>(rng: &mut R, vocab: usize) -> Categorical {
    let scale = rng.random_range(0.1..4.0);
    eopd_core::probdist::softmax_temp(&LogitVector::new(logits(rng, vocab, scale)).unwrap(), 1.0)
        .unwrap()
}

/// Like [`random_categorical`] but with some entries exactly zero.
pub fn sparse_categorical<R: Rng>(rng: &mut R, vocab: usize) -> Categorical {
    let base = random_categorical(rng, vocab);
    let keep = rng.random_range(0..vocab);
    let mut p: Vec<f64> = base
        .probs()
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            if i == keep || rng.random::<f64>() < 0.7 {
                p
            } else {
                0.0
            }
        })
        .collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= s);
    Categorical::from_probs(p).unwrap()
}

pub fn query(teacher: &Categorical, token: usize, k: usize) -> TeacherQuery {
    TeacherQuery {
        token_logp: teacher.log_prob(token).unwrap(),
        entropy: teacher.entropy(),
        topk: teacher.top_k(k).unwrap(),
    }
}

/// Central differences of `f` at `x` with step `h`.
pub fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `||a - b|| / max(||a||, ||b||, 1e-6)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-6)
}
