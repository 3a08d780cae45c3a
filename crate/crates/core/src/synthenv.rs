//! Synthetic autoregressive environment.
//!
//! Contexts are the last `order` tokens (prompts supply the initial window),
//! so every context maps to one of `vocab^order` states. The teacher is a
//! fixed softmax table over states; the student is a learnable logit table
//! with the same indexing.

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{EopdError, Result};
use crate::exec::Execution;
use crate::probdist::{softmax_slice, Categorical, TopKView};
use crate::seeding::{purpose_rng, stream_id, stream_rng, Purpose};
use crate::toylab::DEFAULT_MODE_VALUES;

/// Upper bound on the number of context states.
pub const MAX_STATES: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub vocab: usize,
    /// Context order: number of trailing tokens that form the state.
    pub order: usize,
    /// Tokens generated per rollout.
    pub rollout_len: usize,
    pub prompt_pool: usize,
    /// Fraction of states built at the high temperature.
    pub p_high: f64,
    pub low_temperature: f64,
    pub high_temperature: f64,
    pub mode_values: Vec<f64>,
    /// Seeds the teacher table and the prompt pool.
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            vocab: 32,
            order: 2,
            rollout_len: 64,
            prompt_pool: 128,
            p_high: 0.3,
            low_temperature: 0.05,
            high_temperature: 1.0,
            mode_values: DEFAULT_MODE_VALUES.to_vec(),
            seed: 0,
        }
    }
}

impl EnvConfig {
    pub fn num_states(&self) -> Result<usize> {
        u32::try_from(self.order)
            .ok()
            .and_then(|o| self.vocab.checked_pow(o))
            .filter(|&n| n <= MAX_STATES)
            .ok_or_else(|| {
                EopdError::Config(format!(
                    "state space vocab^order = {}^{} exceeds {MAX_STATES}",
                    self.vocab, self.order
                ))
            })
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(EopdError::Config(m));
        if self.vocab < 2 {
            return fail("vocab must be at least 2".into());
        }
        if self.order == 0 {
            return fail("order must be at least 1".into());
        }
        self.num_states()?;
        if self.rollout_len == 0 {
            return fail("rollout_len must be at least 1".into());
        }
        if self.prompt_pool == 0 {
            return fail("prompt_pool must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.p_high) {
            return fail(format!("p_high must lie in [0, 1], got {}", self.p_high));
        }
        for t in [self.low_temperature, self.high_temperature] {
            if !(t > 0.0) || !t.is_finite() {
                return fail(format!("temperatures must be > 0, got {t}"));
            }
        }
        if self.mode_values.len() > self.vocab {
            return fail("more planted modes than vocabulary entries".into());
        }
        Ok(())
    }
}

/// A policy that yields a next-token distribution per context state.
pub trait ContextPolicy: Sync {
    fn vocab(&self) -> usize;
    fn num_states(&self) -> usize;
    fn distribution(&self, state: usize) -> Categorical;
    /// Entropy of the distribution at `state`.
    fn entropy_at(&self, state: usize) -> f64 {
        self.distribution(state).entropy()
    }
}

/// Fixed per-state teacher distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularTeacher {
    vocab: usize,
    dists: Vec<Categorical>,
    entropies: Vec<f64>,
    high_temperature: Vec<bool>,
}

/// Teacher information recorded for one generated token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherQuery {
    /// `ln pi_te(x_t | c_t)`.
    pub token_logp: f64,
    /// Teacher entropy at `c_t` over the full vocabulary.
    pub entropy: f64,
    pub topk: TopKView,
}

impl TabularTeacher {
    /// Builds one planted-mode softmax per state from `cfg.seed`.
    pub fn build(cfg: &EnvConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.num_states()?;
        let mut rng = purpose_rng(cfg.seed, Purpose::TeacherTable, 0, 0);
        let mut dists = Vec::with_capacity(n);
        let mut high_temperature = Vec::with_capacity(n);
        for _ in 0..n {
            let high = rng.random::<f64>() < cfg.p_high;
            let mut z: Vec<f64> = (0..cfg.vocab).map(|_| rng.sample(StandardNormal)).collect();
            let positions = index::sample(&mut rng, cfg.vocab, cfg.mode_values.len());
            for (pos, &value) in positions.iter().zip(&cfg.mode_values) {
                z[pos] = value;
            }
            let t = if high {
                cfg.high_temperature
            } else {
                cfg.low_temperature
            };
            dists.push(Categorical::from_normalized_unchecked(softmax_slice(&z, t)));
            high_temperature.push(high);
        }
        let entropies = dists.iter().map(Categorical::entropy).collect();
        Ok(Self {
            vocab: cfg.vocab,
            dists,
            entropies,
            high_temperature,
        })
    }

    /// Wraps explicit per-state distributions (all of one vocabulary size).
    pub fn from_distributions(dists: Vec<Categorical>) -> Result<Self> {
        let vocab = dists
            .first()
            .map(Categorical::vocab)
            .ok_or_else(|| EopdError::invalid("teacher needs at least one state"))?;
        if dists.iter().any(|d| d.vocab() != vocab) {
            return Err(EopdError::invalid("teacher states disagree on vocabulary"));
        }
        let entropies = dists.iter().map(Categorical::entropy).collect();
        let n = dists.len();
        Ok(Self {
            vocab,
            dists,
            entropies,
            high_temperature: vec![false; n],
        })
    }

    pub fn state(&self, state: usize) -> &Categorical {
        &self.dists[state]
    }

    pub fn entropies(&self) -> &[f64] {
        &self.entropies
    }

    pub fn is_high_temperature(&self, state: usize) -> bool {
        self.high_temperature[state]
    }

    /// Teacher query for token `token` at `state` with a top-`k` view.
    pub fn query(&self, state: usize, token: usize, k: usize) -> Result<TeacherQuery> {
        let dist = &self.dists[state];
        Ok(TeacherQuery {
            token_logp: dist.log_prob(token)?,
            entropy: self.entropies[state],
            topk: dist.top_k(k)?,
        })
    }

    /// Hash over every probability's bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for d in &self.dists {
            for p in d.probs() {
                p.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

impl ContextPolicy for TabularTeacher {
    fn vocab(&self) -> usize {
        self.vocab
    }

    fn num_states(&self) -> usize {
        self.dists.len()
    }

    fn distribution(&self, state: usize) -> Categorical {
        self.dists[state].clone()
    }

    fn entropy_at(&self, state: usize) -> f64 {
        self.entropies[state]
    }
}

/// Learnable logits, one row of `vocab` entries per state.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    vocab: usize,
    order: usize,
    logits: Vec<f64>,
}

impl TabularPolicy {
    pub fn zeros(vocab: usize, order: usize) -> Result<Self> {
        let n = EnvConfig {
            vocab,
            order,
            ..EnvConfig::default()
        }
        .num_states()?;
        Ok(Self {
            vocab,
            order,
            logits: vec![0.0; n * vocab],
        })
    }

    /// I.i.d. `N(0, scale^2)` logits.
    pub fn random<R: Rng + ?Sized>(
        vocab: usize,
        order: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut p = Self::zeros(vocab, order)?;
        for v in &mut p.logits {
            *v = scale * rng.sample::<f64, _>(StandardNormal);
        }
        Ok(p)
    }

    pub fn from_logits(vocab: usize, order: usize, logits: Vec<f64>) -> Result<Self> {
        let expected = Self::zeros(vocab, order)?.logits.len();
        if logits.len() != expected {
            return Err(EopdError::invalid(format!(
                "expected {expected} logits for vocab {vocab}, order {order}; got {}",
                logits.len()
            )));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(EopdError::invalid("policy logits must be finite"));
        }
        Ok(Self {
            vocab,
            order,
            logits,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub(crate) fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn row(&self, state: usize) -> &[f64] {
        &self.logits[state * self.vocab..(state + 1) * self.vocab]
    }

    pub fn row_mut(&mut self, state: usize) -> &mut [f64] {
        &mut self.logits[state * self.vocab..(state + 1) * self.vocab]
    }
}

impl ContextPolicy for TabularPolicy {
    fn vocab(&self) -> usize {
        self.vocab
    }

    fn num_states(&self) -> usize {
        self.logits.len() / self.vocab
    }

    fn distribution(&self, state: usize) -> Categorical {
        Categorical::from_normalized_unchecked(softmax_slice(self.row(state), 1.0))
    }
}

/// One generated token with everything the losses need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    /// Context state the token was generated in.
    pub state: usize,
    pub token: usize,
    /// `ln pi_old(token | state)` under the rollout policy.
    pub behavior_logp: f64,
    /// Rollout-policy entropy at `state`.
    pub student_entropy: f64,
    pub teacher: TeacherQuery,
    /// Uniform draw for the random forward-KL placement.
    pub gate_draw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt_id: usize,
    pub prompt: Vec<usize>,
    /// RNG stream the trajectory was sampled from.
    pub stream: u64,
    pub records: Vec<TokenRecord>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn tokens(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.token).collect()
    }
}

/// Trajectories sampled from one behavior-policy snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutBuffer {
    pub seed: u64,
    pub iteration: usize,
    pub trajectories: Vec<Trajectory>,
}

impl RolloutBuffer {
    pub fn token_count(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn records(&self) -> impl Iterator<Item = &TokenRecord> {
        self.trajectories.iter().flat_map(|t| t.records.iter())
    }

    /// Visits per state, in state order.
    pub fn visit_counts(&self) -> BTreeMap<usize, usize> {
        let mut counts = BTreeMap::new();
        for r in self.records() {
            *counts.entry(r.state).or_insert(0) += 1;
        }
        counts
    }
}

/// Teacher, prompt pool, and the configuration they came from.
#[derive(Debug, Clone)]
pub struct Environment {
    pub cfg: EnvConfig,
    pub teacher: TabularTeacher,
    pub prompts: Vec<Vec<usize>>,
}

impl Environment {
    pub fn build(cfg: &EnvConfig) -> Result<Self> {
        let teacher = TabularTeacher::build(cfg)?;
        let mut rng = purpose_rng(cfg.seed, Purpose::PromptPool, 0, 0);
        let prompts = (0..cfg.prompt_pool)
            .map(|_| {
                (0..cfg.order)
                    .map(|_| rng.random_range(0..cfg.vocab))
                    .collect()
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            teacher,
            prompts,
        })
    }

    pub fn num_states(&self) -> usize {
        self.teacher.num_states()
    }

    /// State index of a window of exactly `order` tokens.
    pub fn state_of(&self, window: &[usize]) -> usize {
        window.iter().fold(0, |acc, &t| acc * self.cfg.vocab + t)
    }

    /// Context state before generating position `t` (0-based) after `prompt`
    /// and `generated[..t]`.
    pub fn context_key(&self, prompt: &[usize], generated: &[usize], t: usize) -> usize {
        let m = self.cfg.order;
        let mut window: Vec<usize> = prompt.iter().chain(&generated[..t]).copied().collect();
        let start = window.len().saturating_sub(m);
        window.drain(..start);
        // short prompts are left-padded with token 0
        while window.len() < m {
            window.insert(0, 0);
        }
        self.state_of(&window)
    }

    /// Samples `rollout_len` tokens from `policy` starting at prompt
    /// `prompt_id`, recording teacher queries with top-`k` views.
    pub fn rollout<P: ContextPolicy + ?Sized, R: Rng + ?Sized>(
        &self,
        policy: &P,
        prompt_id: usize,
        k: usize,
        stream: u64,
        rng: &mut R,
    ) -> Result<Trajectory> {
        let prompt = self
            .prompts
            .get(prompt_id)
            .ok_or_else(|| EopdError::invalid(format!("prompt id {prompt_id} out of range")))?
            .clone();
        let m = self.cfg.order;
        let mut window = prompt.clone();
        let mut records = Vec::with_capacity(self.cfg.rollout_len);
        for _ in 0..self.cfg.rollout_len {
            let state = self.state_of(&window[window.len() - m..]);
            let dist = policy.distribution(state);
            let token = dist.sample(rng);
            let gate_draw: f64 = rng.random();
            records.push(TokenRecord {
                state,
                token,
                behavior_logp: dist.log_prob(token)?,
                student_entropy: dist.entropy(),
                teacher: self.teacher.query(state, token, k)?,
                gate_draw,
            });
            window.push(token);
        }
        Ok(Trajectory {
            prompt_id,
            prompt,
            stream,
            records,
        })
    }

    /// Rollout sampled from the teacher itself (off-policy KD data).
    pub fn teacher_rollout<R: Rng + ?Sized>(
        &self,
        prompt_id: usize,
        k: usize,
        stream: u64,
        rng: &mut R,
    ) -> Result<Trajectory> {
        self.rollout(&self.teacher, prompt_id, k, stream, rng)
    }

    /// One trajectory per prompt in `prompt_ids`, each on its own stream
    /// derived from `(seed, iteration, slot)`.
    pub fn collect<P: ContextPolicy + ?Sized>(
        &self,
        policy: &P,
        prompt_ids: &[usize],
        k: usize,
        seed: u64,
        iteration: usize,
        exec: Execution,
    ) -> Result<RolloutBuffer> {
        self.collect_for(
            policy,
            prompt_ids,
            k,
            seed,
            Purpose::Rollout,
            iteration,
            exec,
        )
    }

    /// [`Environment::collect`] on the streams reserved for `purpose`.
    #[allow(clippy::too_many_arguments)]
    pub fn collect_for<P: ContextPolicy + ?Sized>(
        &self,
        policy: &P,
        prompt_ids: &[usize],
        k: usize,
        seed: u64,
        purpose: Purpose,
        iteration: usize,
        exec: Execution,
    ) -> Result<RolloutBuffer> {
        let trajectories = exec
            .map_range(prompt_ids.len(), |slot| {
                let stream = stream_id(purpose, iteration as u64, slot as u64);
                let mut rng = stream_rng(seed, stream);
                self.rollout(policy, prompt_ids[slot], k, stream, &mut rng)
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok(RolloutBuffer {
            seed,
            iteration,
            trajectories,
        })
    }

    /// Regenerates a stored trajectory from its seed and stream.
    pub fn replay<P: ContextPolicy + ?Sized>(
        &self,
        policy: &P,
        trajectory: &Trajectory,
        k: usize,
        seed: u64,
    ) -> Result<Trajectory> {
        let mut rng = stream_rng(seed, trajectory.stream);
        self.rollout(policy, trajectory.prompt_id, k, trajectory.stream, &mut rng)
    }
}
