//! Context-free toy study of reverse-KL reward instability.
//!
//! A fixed categorical teacher with five planted modes is distilled into a
//! student that may only sample from its own top-`student_top` tokens. Each
//! step samples one index, scores it with `ln P_te(x) - ln P_S(x)` (with
//! `P_S` the renormalized restricted student) and moves that single logit.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{EopdError, Result};
use crate::exec::Execution;
use crate::probdist::{
    floored_ln, softmax_slice, softmax_temp, Categorical, LogitVector, TopKView,
};

/// Logit values planted at five random positions.
pub const DEFAULT_MODE_VALUES: [f64; 5] = [1.7, 1.9, 2.1, 2.3, 2.5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub vocab: usize,
    pub mode_values: Vec<f64>,
    /// Teacher softmax temperature (0.3 low entropy, 1.0 high entropy).
    pub temperature: f64,
    /// Size of the student's sampling support.
    pub student_top: usize,
    pub lr: f64,
    pub steps: usize,
    pub seeds: Vec<u64>,
    /// Trailing window for smoothed change-rate curves.
    pub smoothing_window: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            vocab: 80,
            mode_values: DEFAULT_MODE_VALUES.to_vec(),
            temperature: 0.3,
            student_top: 10,
            lr: 0.5,
            steps: 1000,
            seeds: vec![0, 1, 2],
            smoothing_window: 20,
        }
    }
}

impl ToyConfig {
    pub fn scenario_a() -> Self {
        Self::default()
    }

    pub fn scenario_b() -> Self {
        Self {
            temperature: 1.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(EopdError::Config(m));
        if self.vocab == 0 {
            return fail("vocab must be positive".into());
        }
        if self.student_top == 0 || self.student_top > self.vocab {
            return fail(format!(
                "student_top must lie in 1..={}, got {}",
                self.vocab, self.student_top
            ));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return fail(format!("temperature must be > 0, got {}", self.temperature));
        }
        if self.mode_values.len() > self.vocab {
            return fail("more modes than vocabulary entries".into());
        }
        if self.mode_values.iter().any(|v| !v.is_finite()) || !self.lr.is_finite() {
            return fail("mode values and lr must be finite".into());
        }
        if self.smoothing_window == 0 {
            return fail("smoothing_window must be positive".into());
        }
        Ok(())
    }
}

/// Base N(0, 1) logits with the mode values written over distinct random
/// positions. Returns the logits and the planted positions.
pub fn toy_teacher_logits<R: Rng + ?Sized>(
    cfg: &ToyConfig,
    rng: &mut R,
) -> (LogitVector, Vec<usize>) {
    let mut z: Vec<f64> = (0..cfg.vocab).map(|_| rng.sample(StandardNormal)).collect();
    let positions = index::sample(rng, cfg.vocab, cfg.mode_values.len()).into_vec();
    for (&pos, &value) in positions.iter().zip(&cfg.mode_values) {
        z[pos] = value;
    }
    (
        LogitVector::new(z).expect("normal draws are finite"),
        positions,
    )
}

/// The fixed teacher `softmax(z / T)`.
pub fn make_toy_teacher<R: Rng + ?Sized>(cfg: &ToyConfig, rng: &mut R) -> Result<Categorical> {
    let (z, _) = toy_teacher_logits(cfg, rng);
    softmax_temp(&z, cfg.temperature)
}

/// The student's top-`top` distribution, renormalized.
pub fn restricted_student_dist(student_logits: &[f64], top: usize) -> Result<TopKView> {
    if student_logits.is_empty() {
        return Err(EopdError::invalid("empty student logits"));
    }
    Categorical::from_normalized_unchecked(softmax_slice(student_logits, 1.0)).top_k(top)
}

/// `1 - |a ∩ b| / |a ∪ b|`; 0 for two empty sets.
pub fn jaccard_distance(a: &[usize], b: &[usize]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_unstable();
    a.dedup();
    b.sort_unstable();
    b.dedup();
    let inter = a.iter().filter(|x| b.binary_search(x).is_ok()).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        1.0 - inter as f64 / union as f64
    }
}

/// Metrics after one update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyStepRecord {
    /// 1-based update index.
    pub step: usize,
    /// Jaccard distance between the top sets before and after the update.
    pub change_rate: f64,
    pub top1_index: usize,
    /// Running count of top-1 changes up to and including this step.
    pub top1_changes: usize,
    pub sampled: usize,
    pub reward: f64,
}

/// Student-side state carried between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyState {
    pub logits: Vec<f64>,
    top_set: Vec<usize>,
    top1: usize,
    top1_changes: usize,
    steps_done: usize,
}

impl ToyState {
    pub fn new(logits: Vec<f64>, student_top: usize) -> Result<Self> {
        let view = restricted_student_dist(&logits, student_top)?;
        Ok(Self {
            top1: view.indices[0],
            top_set: view.indices,
            logits,
            top1_changes: 0,
            steps_done: 0,
        })
    }

    pub fn top_set(&self) -> &[usize] {
        &self.top_set
    }

    pub fn top1(&self) -> usize {
        self.top1
    }

    pub fn top1_changes(&self) -> usize {
        self.top1_changes
    }
}

/// One sample-and-update step.
pub fn toy_step<R: Rng + ?Sized>(
    state: &mut ToyState,
    teacher: &Categorical,
    cfg: &ToyConfig,
    rng: &mut R,
) -> Result<ToyStepRecord> {
    let view = restricted_student_dist(&state.logits, cfg.student_top)?;
    let restricted = view.to_categorical(state.logits.len())?;
    let sampled = restricted.sample(rng);
    let reward = teacher.log_prob(sampled)? - floored_ln(restricted.probs()[sampled]);
    state.logits[sampled] += cfg.lr * reward;

    let after = restricted_student_dist(&state.logits, cfg.student_top)?;
    let change_rate = jaccard_distance(&state.top_set, &after.indices);
    let top1 = after.indices[0];
    if top1 != state.top1 {
        state.top1_changes += 1;
    }
    state.top1 = top1;
    state.top_set = after.indices;
    state.steps_done += 1;
    Ok(ToyStepRecord {
        step: state.steps_done,
        change_rate,
        top1_index: top1,
        top1_changes: state.top1_changes,
        sampled,
        reward,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTrace {
    pub seed: u64,
    pub records: Vec<ToyStepRecord>,
}

impl ToyTrace {
    pub fn top1_change_count(&self) -> usize {
        self.records.last().map_or(0, |r| r.top1_changes)
    }

    pub fn change_rates(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.change_rate).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySummary {
    pub temperature: f64,
    /// Teacher entropy per seed, in nats.
    pub teacher_entropy: Vec<f64>,
    pub top1_change_counts: Vec<usize>,
    pub top1_change_mean: f64,
    /// Sample standard deviation across seeds (0 for a single seed).
    pub top1_change_std: f64,
    /// Per-step change rate averaged across seeds.
    pub mean_change_rate: Vec<f64>,
    /// `mean_change_rate` after a trailing moving average.
    pub smoothed_change_rate: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyRun {
    pub config: ToyConfig,
    pub traces: Vec<ToyTrace>,
    pub summary: ToySummary,
}

/// Trailing moving average over at most `window` points.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    (0..values.len())
        .map(|i| {
            let span = &values[(i + 1).saturating_sub(window)..=i];
            span.iter().sum::<f64>() / span.len() as f64
        })
        .collect()
}

fn run_seed(cfg: &ToyConfig, seed: u64) -> Result<(ToyTrace, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let teacher = make_toy_teacher(cfg, &mut rng)?;
    let init: Vec<f64> = (0..cfg.vocab).map(|_| rng.sample(StandardNormal)).collect();
    let mut state = ToyState::new(init, cfg.student_top)?;
    let records = (0..cfg.steps)
        .map(|_| toy_step(&mut state, &teacher, cfg, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok((ToyTrace { seed, records }, teacher.entropy()))
}

/// Runs every seed and aggregates. Seeds run independently.
pub fn run_toy(cfg: &ToyConfig) -> Result<ToyRun> {
    run_toy_with(cfg, Execution::default())
}

pub fn run_toy_with(cfg: &ToyConfig, exec: Execution) -> Result<ToyRun> {
    cfg.validate()?;
    if cfg.seeds.is_empty() {
        return Err(EopdError::Config("at least one seed is required".into()));
    }
    let results = exec
        .map_slice(&cfg.seeds, |&seed| run_seed(cfg, seed))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let (traces, teacher_entropy): (Vec<_>, Vec<_>) = results.into_iter().unzip();

    let counts: Vec<usize> = traces.iter().map(ToyTrace::top1_change_count).collect();
    let n = counts.len() as f64;
    let mean = counts.iter().sum::<usize>() as f64 / n;
    let std = if counts.len() > 1 {
        (counts
            .iter()
            .map(|&c| (c as f64 - mean).powi(2))
            .sum::<f64>()
            / (n - 1.0))
            .sqrt()
    } else {
        0.0
    };
    let mean_change_rate: Vec<f64> = (0..cfg.steps)
        .map(|t| {
            traces
                .iter()
                .map(|tr| tr.records[t].change_rate)
                .sum::<f64>()
                / n
        })
        .collect();
    let smoothed_change_rate = smooth(&mean_change_rate, cfg.smoothing_window);

    Ok(ToyRun {
        config: cfg.clone(),
        summary: ToySummary {
            temperature: cfg.temperature,
            teacher_entropy,
            top1_change_counts: counts,
            top1_change_mean: mean,
            top1_change_std: std,
            mean_change_rate,
            smoothed_change_rate,
        },
        traces,
    })
}
