//! Finite categorical distributions over a token vocabulary.
//!
//! Entropies are in nats. Logs of probabilities are taken after flooring at
//! [`PROB_FLOOR`] so that zero-mass tokens yield large but finite values.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EopdError, Result};

/// Probabilities below this are clamped before taking a log.
pub const PROB_FLOOR: f64 = 1e-300;

/// Tolerance on `sum(probs) == 1` for a valid [`Categorical`].
pub const NORMALIZATION_TOL: f64 = 1e-12;

/// Natural log with the probability floor applied.
#[inline]
pub fn floored_ln(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

/// Real-valued logits over a vocabulary. All entries are finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(EopdError::invalid("logit vector must be non-empty"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(EopdError::invalid(format!(
                "logit {i} is not finite ({})",
                values[i]
            )));
        }
        Ok(Self(values))
    }

    pub fn zeros(vocab: usize) -> Self {
        Self(vec![0.0; vocab.max(1)])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Temperature softmax over a raw slice, with max-subtraction.
///
/// Callers are responsible for `temperature > 0` and finite input.
pub(crate) fn softmax_slice(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .map(|&z| ((z - max) / temperature).exp())
        .collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    out
}

/// `softmax(logits / temperature)`.
pub fn softmax_temp(logits: &LogitVector, temperature: f64) -> Result<Categorical> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(EopdError::invalid(format!(
            "temperature must be positive and finite, got {temperature}"
        )));
    }
    Ok(Categorical {
        probs: softmax_slice(logits.values(), temperature),
    })
}

/// A normalized probability vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Categorical {
    probs: Vec<f64>,
}

impl Categorical {
    /// Validates non-negativity and normalization.
    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(EopdError::invalid("distribution must be non-empty"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(EopdError::invalid(
                "probabilities must be finite and non-negative",
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOL {
            return Err(EopdError::invalid(format!(
                "probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(Self { probs })
    }

    /// Used by constructors that normalize by construction.
    pub(crate) fn from_normalized_unchecked(probs: Vec<f64>) -> Self {
        debug_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        Self { probs }
    }

    pub fn uniform(vocab: usize) -> Self {
        Self {
            probs: vec![1.0 / vocab as f64; vocab],
        }
    }

    pub fn one_hot(vocab: usize, index: usize) -> Self {
        let mut probs = vec![0.0; vocab];
        probs[index] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn vocab(&self) -> usize {
        self.probs.len()
    }

    /// Entropy in nats, with `0 log 0 = 0`.
    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }

    /// Floored natural log of `probs[token]`.
    pub fn log_prob(&self, token: usize) -> Result<f64> {
        self.probs
            .get(token)
            .map(|&p| floored_ln(p))
            .ok_or_else(|| {
                EopdError::invalid(format!(
                    "token {token} outside vocabulary of size {}",
                    self.vocab()
                ))
            })
    }

    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate().skip(1) {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    /// Token ids ordered by descending probability, lowest index first on ties.
    pub fn ranked_indices(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.probs.len()).collect();
        // stable sort keeps ascending index order among equal probabilities
        idx.sort_by(|&a, &b| self.probs[b].total_cmp(&self.probs[a]));
        idx
    }

    /// The `k` most probable tokens with their renormalized probabilities.
    pub fn top_k(&self, k: usize) -> Result<TopKView> {
        if k == 0 || k > self.vocab() {
            return Err(EopdError::invalid(format!(
                "top-k size {k} must lie in 1..={}",
                self.vocab()
            )));
        }
        let mut indices = self.ranked_indices();
        indices.truncate(k);
        let mass: f64 = indices.iter().map(|&i| self.probs[i]).sum();
        let renorm_probs = indices.iter().map(|&i| self.probs[i] / mass).collect();
        Ok(TopKView {
            indices,
            renorm_probs,
            mass,
        })
    }

    /// Inverse-CDF sampling from one uniform draw.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut cumulative = 0.0;
        for (i, &p) in self.probs.iter().enumerate() {
            cumulative += p;
            if u < cumulative {
                return i;
            }
        }
        // u landed in the rounding gap above the final partial sum
        self.probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }
}

/// The `k` most probable tokens of a source distribution, renormalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopKView {
    /// Token ids in descending source probability.
    pub indices: Vec<usize>,
    /// `source[indices[i]] / mass`.
    pub renorm_probs: Vec<f64>,
    /// Source probability covered by `indices`.
    pub mass: f64,
}

impl TopKView {
    pub fn k(&self) -> usize {
        self.indices.len()
    }

    /// Renormalized probability of `token`, if it is in the set.
    pub fn prob_of(&self, token: usize) -> Option<f64> {
        self.indices
            .iter()
            .position(|&i| i == token)
            .map(|pos| self.renorm_probs[pos])
    }

    /// Renormalized probabilities as a categorical over the full vocabulary.
    pub fn to_categorical(&self, vocab: usize) -> Result<Categorical> {
        let mut probs = vec![0.0; vocab];
        for (&i, &p) in self.indices.iter().zip(&self.renorm_probs) {
            if i >= vocab {
                return Err(EopdError::invalid(format!(
                    "top-k index {i} outside vocabulary of size {vocab}"
                )));
            }
            probs[i] = p;
        }
        Ok(Categorical::from_normalized_unchecked(probs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn logits(v: &[f64]) -> LogitVector {
        LogitVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_temp(&logits(&[0.0, 0.0, 0.0]), 1.0).unwrap();
        for &x in p.probs() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax_temp(&logits(&[2f64.ln(), 0.0]), 1.0).unwrap();
        assert!((p.probs()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.probs()[1] - 1.0 / 3.0).abs() < 1e-15);

        let cold = softmax_temp(&logits(&[1.0, 0.0]), 0.1).unwrap();
        let warm = softmax_temp(&logits(&[1.0, 0.0]), 1.0).unwrap();
        assert!(cold.probs()[0] > warm.probs()[0]);
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        assert!(softmax_temp(&logits(&[1.0]), 0.0).is_err());
        assert!(softmax_temp(&logits(&[1.0]), -1.0).is_err());
        assert!(softmax_temp(&logits(&[1.0]), f64::NAN).is_err());
    }

    #[test]
    fn softmax_survives_extreme_logits() {
        let p = softmax_temp(&logits(&[1000.0, -1000.0, 999.0]), 0.1).unwrap();
        assert!(p.probs().iter().all(|x| x.is_finite()));
        assert!((p.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn logit_vector_rejects_non_finite() {
        assert!(LogitVector::new(vec![0.0, f64::INFINITY]).is_err());
        assert!(LogitVector::new(vec![f64::NAN]).is_err());
        assert!(LogitVector::new(vec![]).is_err());
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(Categorical::one_hot(5, 2).entropy(), 0.0);
        assert!((Categorical::uniform(80).entropy() - 80f64.ln()).abs() < 1e-12);
        assert!((80f64.ln() - 4.3820).abs() < 1e-4);
        let p = Categorical::from_probs(vec![0.5, 0.5, 0.0, 0.0]).unwrap();
        assert!((p.entropy() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn top_k_examples() {
        let p = Categorical::from_probs(vec![0.5, 0.3, 0.2]).unwrap();
        let v = p.top_k(2).unwrap();
        assert_eq!(v.indices, vec![0, 1]);
        assert!((v.renorm_probs[0] - 0.625).abs() < 1e-15);
        assert!((v.renorm_probs[1] - 0.375).abs() < 1e-15);
        assert!((v.mass - 0.8).abs() < 1e-15);

        let full = p.top_k(3).unwrap();
        assert_eq!(full.indices, vec![0, 1, 2]);
        assert_eq!(full.renorm_probs, p.probs());
        assert!((full.mass - 1.0).abs() < 1e-15);

        let u = Categorical::uniform(10).top_k(3).unwrap();
        assert_eq!(u.indices, vec![0, 1, 2]);
        for &q in &u.renorm_probs {
            assert!((q - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((u.mass - 0.3).abs() < 1e-15);

        assert!(p.top_k(4).is_err());
        assert!(p.top_k(0).is_err());
    }

    #[test]
    fn top_k_ties_prefer_lower_index() {
        let p = Categorical::from_probs(vec![0.1, 0.3, 0.3, 0.3]).unwrap();
        assert_eq!(p.top_k(2).unwrap().indices, vec![1, 2]);
        assert_eq!(p.argmax(), 1);
    }

    #[test]
    fn sample_examples() {
        let one_hot = Categorical::one_hot(6, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            assert_eq!(one_hot.sample(&mut rng), 3);
        }

        let p = Categorical::from_probs(vec![0.7, 0.3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 1_000_000;
        let zeros = (0..n).filter(|_| p.sample(&mut rng) == 0).count();
        let freq = zeros as f64 / n as f64;
        assert!((freq - 0.7).abs() < 0.002, "freq {freq}");

        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| p.sample(&mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(42), draw(42));
    }

    #[test]
    fn log_prob_examples() {
        let u = Categorical::uniform(4);
        assert!((u.log_prob(2).unwrap() - 0.25f64.ln()).abs() < 1e-15);
        assert_eq!(Categorical::one_hot(3, 0).log_prob(0).unwrap(), 0.0);
        let h = Categorical::from_probs(vec![0.5, 0.5]).unwrap();
        assert!((h.log_prob(1).unwrap() + 2f64.ln()).abs() < 1e-15);
        assert_eq!(
            Categorical::one_hot(3, 0).log_prob(1).unwrap(),
            PROB_FLOOR.ln()
        );
        assert!(u.log_prob(4).is_err());
    }

    #[test]
    fn from_probs_validates() {
        assert!(Categorical::from_probs(vec![0.5, 0.6]).is_err());
        assert!(Categorical::from_probs(vec![1.5, -0.5]).is_err());
        assert!(Categorical::from_probs(vec![]).is_err());
    }
}
