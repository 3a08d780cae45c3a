//! Diagnostics over trained students, teachers and saved buffers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::divergence::truncated_forward_kl;
use crate::error::{EopdError, Result};
use crate::exec::Execution;
use crate::seeding::Purpose;
use crate::synthenv::{ContextPolicy, Environment, RolloutBuffer, TabularTeacher};

/// Default retention cut, in nats.
pub const RETENTION_THRESHOLD: f64 = 1.0;
/// Default high-entropy cut for forward-KL tracking, in nats.
pub const HIGH_ENTROPY_THRESHOLD: f64 = 0.8;
/// Bytes stored per top-k entry: an f64 probability and a u32 token id.
pub const BYTES_PER_TOPK_ENTRY: usize = 8 + 4;

/// Histogram bin edges. Bins are `[lo, hi)` except the last, which is closed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyBins {
    edges: Vec<f64>,
}

impl EntropyBins {
    pub fn new(edges: Vec<f64>) -> Result<Self> {
        if edges.len() < 2 {
            return Err(EopdError::invalid("need at least two bin edges"));
        }
        if edges.windows(2).any(|w| !(w[0] < w[1])) || edges.iter().any(|e| !e.is_finite()) {
            return Err(EopdError::invalid(
                "bin edges must be finite and strictly increasing",
            ));
        }
        Ok(Self { edges })
    }

    /// An underflow bin `[0, 1e-3)` followed by `n` log-spaced bins over
    /// `[1e-3, ln vocab]`.
    pub fn log_spaced(vocab: usize, n: usize) -> Result<Self> {
        let lo: f64 = 1e-3;
        let hi = (vocab as f64).ln();
        if n == 0 || !(hi > lo) {
            return Err(EopdError::invalid(
                "log-spaced bins need n > 0 and ln(vocab) > 1e-3",
            ));
        }
        let mut edges = vec![0.0];
        let ratio = (hi / lo).ln() / n as f64;
        edges.extend((0..=n).map(|i| lo * (ratio * i as f64).exp()));
        *edges.last_mut().expect("non-empty") = hi;
        Self::new(edges)
    }

    pub fn default_for_vocab(vocab: usize) -> Result<Self> {
        Self::log_spaced(vocab, 40)
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Bin index of `value`; values outside the range clamp to the end bins.
    pub fn bin_of(&self, value: f64) -> usize {
        let last = self.len() - 1;
        if value >= self.edges[last] {
            return last;
        }
        // first edge strictly greater than value, minus one
        self.edges
            .partition_point(|&e| e <= value)
            .saturating_sub(1)
            .min(last)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub fractions: Vec<f64>,
    pub total: usize,
}

impl Histogram {
    pub fn from_values(bins: &EntropyBins, values: impl IntoIterator<Item = f64>) -> Self {
        let mut counts = vec![0usize; bins.len()];
        for v in values {
            counts[bins.bin_of(v)] += 1;
        }
        let total: usize = counts.iter().sum();
        let fractions = counts
            .iter()
            .map(|&c| {
                if total == 0 {
                    0.0
                } else {
                    c as f64 / total as f64
                }
            })
            .collect();
        Self {
            edges: bins.edges().to_vec(),
            counts,
            fractions,
            total,
        }
    }

    /// Mass in bins whose lower edge is at least `threshold`.
    pub fn mass_at_or_above(&self, threshold: f64) -> f64 {
        self.edges
            .iter()
            .zip(&self.fractions)
            .filter(|(&lo, _)| lo >= threshold)
            .map(|(_, &f)| f)
            .sum()
    }
}

fn prompt_ids(env: &Environment, n: usize) -> Vec<usize> {
    (0..n).map(|i| i % env.prompts.len()).collect()
}

/// `n_rollouts` rollouts of `model` on the evaluation streams.
pub fn model_rollouts<P: ContextPolicy + ?Sized>(
    model: &P,
    env: &Environment,
    n_rollouts: usize,
    k: usize,
    seed: u64,
    exec: Execution,
) -> Result<RolloutBuffer> {
    env.collect_for(
        model,
        &prompt_ids(env, n_rollouts),
        k,
        seed,
        Purpose::Evaluation,
        0,
        exec,
    )
}

/// Histogram of the generating model's entropy over its own tokens.
pub fn entropy_histogram<P: ContextPolicy + ?Sized>(
    model: &P,
    env: &Environment,
    n_rollouts: usize,
    bins: &EntropyBins,
    seed: u64,
    exec: Execution,
) -> Result<Histogram> {
    let buffer = model_rollouts(model, env, n_rollouts, 1, seed, exec)?;
    Ok(Histogram::from_values(
        bins,
        buffer.records().map(|r| r.student_entropy),
    ))
}

/// Fraction of a model's own tokens generated at entropy `>= threshold`.
pub fn high_entropy_fraction(buffer: &RolloutBuffer, threshold: f64) -> f64 {
    let n = buffer.token_count();
    if n == 0 {
        return 0.0;
    }
    buffer
        .records()
        .filter(|r| r.student_entropy >= threshold)
        .count() as f64
        / n as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retention {
    pub threshold: f64,
    pub student_fraction: f64,
    pub teacher_fraction: f64,
    /// `student_fraction / teacher_fraction`; absent if the teacher has none.
    pub ratio: Option<f64>,
}

/// High-entropy token fractions of student and teacher, each measured on
/// its own rollouts from the same prompts and streams.
pub fn high_entropy_retention<P: ContextPolicy + ?Sized>(
    student: &P,
    env: &Environment,
    threshold: f64,
    n_rollouts: usize,
    seed: u64,
    exec: Execution,
) -> Result<Retention> {
    if !(threshold >= 0.0) {
        return Err(EopdError::invalid("retention threshold must be >= 0"));
    }
    let s = model_rollouts(student, env, n_rollouts, 1, seed, exec)?;
    let t = model_rollouts(&env.teacher, env, n_rollouts, 1, seed, exec)?;
    let student_fraction = high_entropy_fraction(&s, threshold);
    let teacher_fraction = high_entropy_fraction(&t, threshold);
    Ok(Retention {
        threshold,
        student_fraction,
        teacher_fraction,
        ratio: (teacher_fraction > 0.0).then(|| student_fraction / teacher_fraction),
    })
}

/// Mean truncated forward KL over buffer positions whose teacher entropy is
/// `>= tau`, using the stored top-k views. `None` if no position qualifies.
pub fn fkl_at_high_entropy<P: ContextPolicy + ?Sized>(
    student: &P,
    buffer: &RolloutBuffer,
    tau: f64,
) -> Result<Option<f64>> {
    let mut acc = 0.0;
    let mut n = 0usize;
    for rec in buffer.records().filter(|r| r.teacher.entropy >= tau) {
        acc += truncated_forward_kl(&rec.teacher.topk, &student.distribution(rec.state))?;
        n += 1;
    }
    Ok((n > 0).then(|| acc / n as f64))
}

/// [`fkl_at_high_entropy`] on fresh rollouts of the student.
pub fn fkl_at_high_entropy_env<P: ContextPolicy + ?Sized>(
    student: &P,
    env: &Environment,
    tau: f64,
    k: usize,
    n_rollouts: usize,
    seed: u64,
    exec: Execution,
) -> Result<Option<f64>> {
    let buffer = model_rollouts(student, env, n_rollouts, k, seed, exec)?;
    fkl_at_high_entropy(student, &buffer, tau)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopKRow {
    pub k: usize,
    pub mean_mass: f64,
    pub bytes_per_token: usize,
}

/// Visit-weighted mean top-k teacher mass and storage cost per token.
pub fn topk_tradeoff(
    teacher: &TabularTeacher,
    visits: &BTreeMap<usize, usize>,
    k_values: &[usize],
) -> Result<Vec<TopKRow>> {
    if k_values.windows(2).any(|w| w[0] > w[1]) {
        return Err(EopdError::invalid("k values must be sorted ascending"));
    }
    let total: usize = visits.values().sum();
    if total == 0 {
        return Err(EopdError::invalid("no visited states"));
    }
    k_values
        .iter()
        .map(|&k| {
            let mut acc = 0.0;
            for (&state, &count) in visits {
                acc += count as f64 * teacher.state(state).top_k(k)?.mass;
            }
            Ok(TopKRow {
                k,
                mean_mass: acc / total as f64,
                bytes_per_token: k * BYTES_PER_TOPK_ENTRY,
            })
        })
        .collect()
}

/// States visited by `n_rollouts` teacher rollouts.
pub fn teacher_visits(
    env: &Environment,
    n_rollouts: usize,
    seed: u64,
    exec: Execution,
) -> Result<BTreeMap<usize, usize>> {
    Ok(model_rollouts(&env.teacher, env, n_rollouts, 1, seed, exec)?.visit_counts())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bins_are_half_open_with_closed_last() {
        let bins = EntropyBins::new(vec![0.0, 1.0, 2.0]).unwrap();
        assert_eq!(bins.bin_of(0.0), 0);
        assert_eq!(bins.bin_of(0.999), 0);
        assert_eq!(bins.bin_of(1.0), 1);
        assert_eq!(bins.bin_of(2.0), 1);
        assert_eq!(bins.bin_of(7.0), 1);
        assert_eq!(bins.bin_of(-0.0), 0);
    }

    #[test]
    fn default_bins_layout() {
        let bins = EntropyBins::default_for_vocab(32).unwrap();
        assert_eq!(bins.len(), 41);
        assert_eq!(bins.edges()[0], 0.0);
        assert!((bins.edges()[1] - 1e-3).abs() < 1e-18);
        assert_eq!(*bins.edges().last().unwrap(), 32f64.ln());
    }

    #[test]
    fn rejects_unsorted_edges() {
        assert!(EntropyBins::new(vec![0.0, 0.0]).is_err());
        assert!(EntropyBins::new(vec![1.0]).is_err());
    }

    #[test]
    fn histogram_fractions_sum_to_one() {
        let bins = EntropyBins::default_for_vocab(32).unwrap();
        let h = Histogram::from_values(&bins, (0..1000).map(|i| i as f64 * 0.0035));
        assert_eq!(h.total, 1000);
        assert!((h.fractions.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
