//! The distillation outer loop.
//!
//! Each iteration freezes a behavior snapshot, collects one rollout per
//! sampled prompt, partitions the trajectories into minibatches with a seeded
//! shuffle and takes one gradient step per minibatch. Per-token losses are
//! normalized by the minibatch's total token count.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::divergence::{reverse_kl, truncated_forward_kl};
use crate::error::{EopdError, Result};
use crate::exec::Execution;
use crate::objective::{token_loss, LossParams, Method, TokenLossInput, TokenLossOutput};
use crate::seeding::{purpose_rng, Purpose};
use crate::synthenv::{
    ContextPolicy, EnvConfig, Environment, RolloutBuffer, TabularPolicy, TokenRecord,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    /// Prompts (and trajectories) per iteration.
    pub batch_prompts: usize,
    /// Trajectories per gradient step.
    pub minibatch: usize,
    pub iterations: usize,
    pub lr: f64,
    /// Learning rate at the last iteration as a fraction of `lr`; decays
    /// linearly. 1 keeps it constant.
    pub lr_end_factor: f64,
    /// Heavy-ball momentum; 0 is plain gradient descent.
    pub momentum: f64,
    /// Teacher top-k size recorded in each query.
    pub top_k: usize,
    pub loss: LossParams,
    /// Standard deviation of the student's initial logits.
    pub student_init_scale: f64,
    /// Teacher-entropy cut for the high-entropy diagnostics.
    pub report_entropy_threshold: f64,
    pub seed: u64,
    pub env: EnvConfig,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Eopd,
            batch_prompts: 32,
            minibatch: 8,
            iterations: 1000,
            lr: 15.0,
            lr_end_factor: 1.0,
            momentum: 0.0,
            top_k: 16,
            loss: LossParams::default(),
            student_init_scale: 5.0,
            report_entropy_threshold: 0.8,
            seed: 0,
            env: EnvConfig::default(),
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(EopdError::Config(m));
        self.env.validate()?;
        self.loss.validate()?;
        if self.minibatch == 0 || self.batch_prompts == 0 {
            return fail("batch sizes must be positive".into());
        }
        if !self.batch_prompts.is_multiple_of(self.minibatch) {
            return fail(format!(
                "batch_prompts ({}) must be divisible by minibatch ({})",
                self.batch_prompts, self.minibatch
            ));
        }
        if self.top_k == 0 || self.top_k > self.env.vocab {
            return fail(format!("top_k must lie in 1..={}", self.env.vocab));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return fail(format!("lr must be > 0, got {}", self.lr));
        }
        if !(0.0..=1.0).contains(&self.lr_end_factor) {
            return fail(format!(
                "lr_end_factor must lie in [0, 1], got {}",
                self.lr_end_factor
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        if !(self.student_init_scale >= 0.0) || !self.student_init_scale.is_finite() {
            return fail("student_init_scale must be >= 0".into());
        }
        Ok(())
    }

    /// Learning rate used during `iteration`.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        if self.iterations <= 1 {
            return self.lr;
        }
        let t = iteration.min(self.iterations - 1) as f64 / (self.iterations - 1) as f64;
        self.lr * (1.0 - (1.0 - self.lr_end_factor) * t)
    }

    /// Gradient steps taken per iteration.
    pub fn steps_per_iteration(&self) -> usize {
        self.batch_prompts / self.minibatch
    }
}

/// Per-iteration training metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub tokens: usize,
    pub grad_steps: usize,
    /// Mean per-token loss over the iteration's minibatch steps.
    pub mean_loss: f64,
    /// Exact KL(student || teacher) after the iteration's updates, averaged
    /// over the buffer's states weighted by visits.
    pub reverse_kl: f64,
    /// Mean truncated forward KL at positions whose teacher entropy reaches
    /// the report threshold; absent when there are none.
    pub forward_kl_high: Option<f64>,
    /// Fraction of tokens whose forward-KL term fired.
    pub gate_fraction: f64,
    /// Fraction of tokens whose teacher entropy reaches the report threshold.
    pub high_entropy_fraction: f64,
    pub clipped_fraction: f64,
    /// Mean rollout-policy entropy over generated tokens.
    pub student_entropy: f64,
}

/// Statistics of one gradient step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinibatchStats {
    pub tokens: usize,
    pub mean_loss: f64,
    pub ratio_min: Option<f64>,
    pub ratio_max: Option<f64>,
    pub clipped: usize,
    pub gate_active: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub method: Method,
    pub rows: Vec<MetricsRow>,
    pub minibatches: Vec<Vec<MinibatchStats>>,
    /// Seconds per iteration. Not part of exported files.
    #[serde(skip)]
    pub wall_clock_secs: Vec<f64>,
}

impl PartialEq for TrainReport {
    /// Wall-clock timings are ignored.
    fn eq(&self, other: &Self) -> bool {
        self.method == other.method
            && self.rows == other.rows
            && self.minibatches == other.minibatches
    }
}

/// Summed gradient of one minibatch, grouped by state.
#[derive(Debug, Clone)]
pub struct MinibatchGradient {
    pub tokens: usize,
    pub loss_sum: f64,
    pub grads: BTreeMap<usize, Vec<f64>>,
    pub stats: MinibatchStats,
}

fn loss_input<'a>(
    student: &'a TabularPolicy,
    rec: &'a TokenRecord,
    method: Method,
    params: &'a LossParams,
) -> TokenLossInput<'a> {
    TokenLossInput {
        student_logits: student.row(rec.state),
        behavior_logp: rec.behavior_logp,
        token: rec.token,
        teacher: &rec.teacher,
        student_entropy: rec.student_entropy,
        gate_draw: rec.gate_draw,
        method,
        params,
    }
}

fn non_finite(
    what: &str,
    iteration: usize,
    rec: &TokenRecord,
    out: Option<&TokenLossOutput>,
) -> EopdError {
    let dump = serde_json::json!({
        "record": rec,
        "loss": out.map(|o| o.loss),
        "grad": out.map(|o| o.grad.clone()),
    });
    EopdError::NonFinite {
        what: what.to_string(),
        iteration,
        diagnostic: dump.to_string(),
    }
}

/// Per-token losses of `records` under `student`, summed by state in record
/// order.
pub fn minibatch_gradient(
    student: &TabularPolicy,
    records: &[&TokenRecord],
    method: Method,
    params: &LossParams,
    exec: Execution,
    iteration: usize,
) -> Result<MinibatchGradient> {
    let outputs = exec.map_slice(records, |rec| {
        token_loss(&loss_input(student, rec, method, params))
    });
    let mut grads: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut loss_sum = 0.0;
    let mut stats = MinibatchStats {
        tokens: records.len(),
        mean_loss: 0.0,
        ratio_min: None,
        ratio_max: None,
        clipped: 0,
        gate_active: 0,
    };
    for (rec, out) in records.iter().zip(outputs) {
        let out = out?;
        if !out.is_finite() {
            return Err(non_finite("token loss", iteration, rec, Some(&out)));
        }
        loss_sum += out.loss;
        stats.clipped += usize::from(out.clipped);
        stats.gate_active += usize::from(out.gate_active);
        if let Some(r) = out.ratio {
            stats.ratio_min = Some(stats.ratio_min.map_or(r, |m: f64| m.min(r)));
            stats.ratio_max = Some(stats.ratio_max.map_or(r, |m: f64| m.max(r)));
        }
        let acc = grads
            .entry(rec.state)
            .or_insert_with(|| vec![0.0; out.grad.len()]);
        for (a, g) in acc.iter_mut().zip(&out.grad) {
            *a += g;
        }
    }
    if !records.is_empty() {
        stats.mean_loss = loss_sum / records.len() as f64;
    }
    Ok(MinibatchGradient {
        tokens: records.len(),
        loss_sum,
        grads,
        stats,
    })
}

/// `theta <- theta - lr * grad / tokens`, optionally through a momentum
/// buffer with the same layout as the student's logits.
pub fn apply_gradient(
    student: &mut TabularPolicy,
    grad: &MinibatchGradient,
    lr: f64,
    momentum: Option<(&mut Vec<f64>, f64)>,
) {
    if grad.tokens == 0 {
        return;
    }
    let scale = lr / grad.tokens as f64;
    let vocab = student.vocab();
    match momentum {
        None => {
            for (&state, g) in &grad.grads {
                for (theta, gi) in student.row_mut(state).iter_mut().zip(g) {
                    *theta -= scale * gi;
                }
            }
        }
        Some((velocity, mu)) => {
            for v in velocity.iter_mut() {
                *v *= mu;
            }
            for (&state, g) in &grad.grads {
                let row = &mut velocity[state * vocab..(state + 1) * vocab];
                for (v, gi) in row.iter_mut().zip(g) {
                    *v += gi / grad.tokens as f64;
                }
            }
            for (theta, v) in student.logits_mut().iter_mut().zip(velocity.iter()) {
                *theta -= lr * v;
            }
        }
    }
}

/// Mean exact reverse KL over the buffer's states, weighted by visits.
pub fn visited_reverse_kl(
    student: &TabularPolicy,
    env: &Environment,
    buffer: &RolloutBuffer,
) -> Result<f64> {
    let visits = buffer.visit_counts();
    let total: usize = visits.values().sum();
    if total == 0 {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for (&state, &count) in &visits {
        acc += count as f64 * reverse_kl(&student.distribution(state), env.teacher.state(state))?;
    }
    Ok(acc / total as f64)
}

/// Mean truncated forward KL at buffer positions with teacher entropy
/// `>= threshold`, using the stored top-k views.
pub fn buffer_forward_kl_high(
    student: &TabularPolicy,
    buffer: &RolloutBuffer,
    threshold: f64,
) -> Result<Option<f64>> {
    let mut acc = 0.0;
    let mut n = 0usize;
    for rec in buffer.records().filter(|r| r.teacher.entropy >= threshold) {
        acc += truncated_forward_kl(&rec.teacher.topk, &student.distribution(rec.state))?;
        n += 1;
    }
    Ok((n > 0).then(|| acc / n as f64))
}

/// Mean per-token loss of the whole buffer under `student`.
pub fn buffer_loss(
    student: &TabularPolicy,
    buffer: &RolloutBuffer,
    cfg: &TrainConfig,
) -> Result<f64> {
    let records: Vec<&TokenRecord> = buffer.records().collect();
    let g = minibatch_gradient(student, &records, cfg.method, &cfg.loss, cfg.execution, 0)?;
    Ok(if g.tokens == 0 {
        0.0
    } else {
        g.loss_sum / g.tokens as f64
    })
}

/// Everything produced by one iteration.
#[derive(Debug, Clone)]
pub struct IterationOutcome {
    pub row: MetricsRow,
    pub minibatches: Vec<MinibatchStats>,
    pub buffer: RolloutBuffer,
}

/// Stateful runner of the outer loop.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: TrainConfig,
    env: Environment,
    student: TabularPolicy,
    velocity: Option<Vec<f64>>,
    iteration: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let env = Environment::build(&cfg.env)?;
        Self::with_environment(cfg, env)
    }

    pub fn with_environment(cfg: TrainConfig, env: Environment) -> Result<Self> {
        cfg.validate()?;
        if env.cfg != cfg.env {
            return Err(EopdError::Config(
                "environment was built from a different EnvConfig".into(),
            ));
        }
        let mut rng = purpose_rng(cfg.seed, Purpose::StudentInit, 0, 0);
        let student = TabularPolicy::random(
            cfg.env.vocab,
            cfg.env.order,
            cfg.student_init_scale,
            &mut rng,
        )?;
        Ok(Self::with_student(cfg, env, student))
    }

    /// Starts from an explicit student.
    pub fn with_student(cfg: TrainConfig, env: Environment, student: TabularPolicy) -> Self {
        let velocity = (cfg.momentum > 0.0).then(|| vec![0.0; student.logits().len()]);
        Self {
            cfg,
            env,
            student,
            velocity,
            iteration: 0,
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn environment(&self) -> &Environment {
        &self.env
    }

    pub fn student(&self) -> &TabularPolicy {
        &self.student
    }

    pub fn into_student(self) -> TabularPolicy {
        self.student
    }

    fn sample_prompts(&self) -> Vec<usize> {
        let mut rng = purpose_rng(
            self.cfg.seed,
            Purpose::PromptBatch,
            self.iteration as u64,
            0,
        );
        let pool = self.env.prompts.len();
        if self.cfg.batch_prompts <= pool {
            index::sample(&mut rng, pool, self.cfg.batch_prompts).into_vec()
        } else {
            (0..self.cfg.batch_prompts)
                .map(|_| rng.random_range(0..pool))
                .collect()
        }
    }

    /// Collects this iteration's buffer under the current (snapshot) policy.
    pub fn collect_buffer(&self) -> Result<RolloutBuffer> {
        let prompts = self.sample_prompts();
        let seed = self.cfg.seed;
        if self.cfg.method.is_on_policy() {
            self.env.collect(
                &self.student,
                &prompts,
                self.cfg.top_k,
                seed,
                self.iteration,
                self.cfg.execution,
            )
        } else {
            self.env.collect(
                &self.env.teacher,
                &prompts,
                self.cfg.top_k,
                seed,
                self.iteration,
                self.cfg.execution,
            )
        }
    }

    /// Runs one full iteration: snapshot, rollouts, minibatch steps.
    pub fn run_iteration(&mut self) -> Result<IterationOutcome> {
        let buffer = self.collect_buffer()?;
        let tokens = buffer.token_count();

        let mut order: Vec<usize> = (0..buffer.trajectories.len()).collect();
        order.shuffle(&mut purpose_rng(
            self.cfg.seed,
            Purpose::MinibatchShuffle,
            self.iteration as u64,
            0,
        ));

        let mut minibatches = Vec::with_capacity(self.cfg.steps_per_iteration());
        let mut loss_sum = 0.0;
        let mut gate_active = 0usize;
        let mut clipped = 0usize;
        let lr = self.cfg.lr_at(self.iteration);
        for chunk in order.chunks(self.cfg.minibatch) {
            let records: Vec<&TokenRecord> = chunk
                .iter()
                .flat_map(|&i| buffer.trajectories[i].records.iter())
                .collect();
            let grad = minibatch_gradient(
                &self.student,
                &records,
                self.cfg.method,
                &self.cfg.loss,
                self.cfg.execution,
                self.iteration,
            )?;
            loss_sum += grad.loss_sum;
            gate_active += grad.stats.gate_active;
            clipped += grad.stats.clipped;
            let momentum = self.velocity.as_mut().map(|v| (v, self.cfg.momentum));
            apply_gradient(&mut self.student, &grad, lr, momentum);
            if let Some(i) = self.student.logits().iter().position(|v| !v.is_finite()) {
                return Err(EopdError::NonFinite {
                    what: "student logits".into(),
                    iteration: self.iteration,
                    diagnostic: format!("{{\"logit_index\":{i}}}"),
                });
            }
            minibatches.push(grad.stats);
        }

        let denom = tokens.max(1) as f64;
        let threshold = self.cfg.report_entropy_threshold;
        let high = buffer
            .records()
            .filter(|r| r.teacher.entropy >= threshold)
            .count();
        let row = MetricsRow {
            iteration: self.iteration,
            tokens,
            grad_steps: minibatches.len(),
            mean_loss: loss_sum / denom,
            reverse_kl: visited_reverse_kl(&self.student, &self.env, &buffer)?,
            forward_kl_high: buffer_forward_kl_high(&self.student, &buffer, threshold)?,
            gate_fraction: gate_active as f64 / denom,
            high_entropy_fraction: high as f64 / denom,
            clipped_fraction: clipped as f64 / denom,
            student_entropy: buffer.records().map(|r| r.student_entropy).sum::<f64>() / denom,
        };
        self.iteration += 1;
        Ok(IterationOutcome {
            row,
            minibatches,
            buffer,
        })
    }
}

/// Result of a full training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub student: TabularPolicy,
    /// Buffer of the final iteration, if any iteration ran.
    pub last_buffer: Option<RolloutBuffer>,
}

/// Runs `cfg.iterations` iterations from a fresh student.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    let trainer = Trainer::new(cfg.clone())?;
    run_trainer(trainer)
}

/// Like [`train`] but reuses an already built environment.
pub fn train_in(cfg: &TrainConfig, env: &Environment) -> Result<TrainOutcome> {
    run_trainer(Trainer::with_environment(cfg.clone(), env.clone())?)
}

fn run_trainer(mut trainer: Trainer) -> Result<TrainOutcome> {
    let iterations = trainer.cfg.iterations;
    let mut report = TrainReport {
        method: trainer.cfg.method,
        rows: Vec::with_capacity(iterations),
        minibatches: Vec::with_capacity(iterations),
        wall_clock_secs: Vec::with_capacity(iterations),
    };
    let mut last_buffer = None;
    for _ in 0..iterations {
        let started = Instant::now();
        let out = trainer.run_iteration()?;
        let secs = started.elapsed().as_secs_f64();
        log::debug!(
            "{} iter {}: loss {:.5} rkl {:.5} gate {:.3} ({secs:.3}s)",
            report.method,
            out.row.iteration,
            out.row.mean_loss,
            out.row.reverse_kl,
            out.row.gate_fraction
        );
        report.rows.push(out.row);
        report.minibatches.push(out.minibatches);
        report.wall_clock_secs.push(secs);
        last_buffer = Some(out.buffer);
    }
    Ok(TrainOutcome {
        report,
        student: trainer.into_student(),
        last_buffer,
    })
}

/// Hyperparameter a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Tau,
    K,
    Variant,
    FklFraction,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Tau => "tau",
            SweepAxis::K => "k",
            SweepAxis::Variant => "variant",
            SweepAxis::FklFraction => "fkl_fraction",
        }
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &TrainConfig, value: &str) -> Result<TrainConfig> {
        let mut cfg = base.clone();
        let parse_f64 = |v: &str| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| EopdError::invalid(format!("'{v}' is not a number")))
        };
        match self {
            SweepAxis::Tau => cfg.loss.tau = parse_f64(value)?,
            SweepAxis::FklFraction => cfg.loss.fkl_fraction = parse_f64(value)?,
            SweepAxis::K => {
                cfg.top_k = value.trim().parse().map_err(|_| {
                    EopdError::invalid(format!("'{value}' is not a positive integer"))
                })?
            }
            SweepAxis::Variant => cfg.method = value.parse()?,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = EopdError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "tau" => Ok(SweepAxis::Tau),
            "k" | "top_k" => Ok(SweepAxis::K),
            "variant" | "method" => Ok(SweepAxis::Variant),
            "fkl_fraction" => Ok(SweepAxis::FklFraction),
            other => Err(EopdError::invalid(format!(
                "unknown sweep axis '{other}' (expected tau, k, variant or fkl_fraction)"
            ))),
        }
    }
}

/// Final-iteration metrics of one sweep value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub final_row: Option<MetricsRow>,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub reports: Vec<(String, TrainReport)>,
    pub table: Vec<SweepRow>,
}

/// Trains once per value of `axis`, all with `base`'s seeds.
pub fn sweep(base: &TrainConfig, axis: SweepAxis, values: &[String]) -> Result<SweepResult> {
    let configs = values
        .iter()
        .map(|v| axis.apply(base, v))
        .collect::<Result<Vec<_>>>()?;
    let env = Environment::build(&base.env)?;
    let outcomes = base
        .execution
        .map_slice(&configs, |cfg| train_in(cfg, &env).map(|o| o.report))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let table = values
        .iter()
        .zip(&outcomes)
        .map(|(v, r)| SweepRow {
            value: v.clone(),
            final_row: r.rows.last().cloned(),
        })
        .collect();
    Ok(SweepResult {
        axis,
        reports: values.iter().cloned().zip(outcomes).collect(),
        table,
    })
}
