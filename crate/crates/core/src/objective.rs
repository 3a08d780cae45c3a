//! Token-level distillation losses with analytic gradients w.r.t. the
//! student's logits at the token's context.
//!
//! Every loss here is evaluated at a single generated token. The student
//! distribution is `softmax(logits)` at temperature 1. Advantages and
//! detached entropies are constants: no gradient flows through them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::divergence::{mc_reverse_kl_reward, truncated_forward_kl};
use crate::error::{EopdError, Result};
use crate::probdist::{floored_ln, softmax_slice, Categorical, TopKView};
use crate::synthenv::TeacherQuery;

/// Which training objective a token is scored with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Method {
    /// Clipped reverse-KL surrogate only.
    Opd,
    /// Clipped surrogate plus forward KL where the teacher entropy exceeds tau.
    Eopd,
    /// Forward KL at every position.
    FullFkl,
    /// Forward KL at a random subset of positions.
    RandomFkl,
    EntropyBonus,
    AdvShaping,
    /// Off-policy KD on teacher rollouts: cross-entropy plus forward KL.
    Kd,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Opd,
        Method::Eopd,
        Method::FullFkl,
        Method::RandomFkl,
        Method::EntropyBonus,
        Method::AdvShaping,
        Method::Kd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Opd => "OPD",
            Method::Eopd => "EOPD",
            Method::FullFkl => "FULL_FKL",
            Method::RandomFkl => "RANDOM_FKL",
            Method::EntropyBonus => "ENTROPY_BONUS",
            Method::AdvShaping => "ADV_SHAPING",
            Method::Kd => "KD",
        }
    }

    /// Whether training rolls out the student (as opposed to the teacher).
    pub fn is_on_policy(self) -> bool {
        self != Method::Kd
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = EopdError;

    fn from_str(s: &str) -> Result<Self> {
        let upper = s.trim().to_ascii_uppercase().replace('-', "_");
        Method::ALL
            .into_iter()
            .find(|m| m.name() == upper)
            .ok_or_else(|| EopdError::invalid(format!("unknown method variant '{s}'")))
    }
}

/// Hyperparameters shared by all token losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossParams {
    /// PPO clip epsilon, in (0, 1).
    pub clip_eps: f64,
    /// Entropy gate threshold in nats. `f64::INFINITY` closes the gate.
    pub tau: f64,
    /// Entropy bonus coefficient.
    pub beta: f64,
    /// Advantage shaping scale.
    pub alpha: f64,
    /// Advantage shaping cap divisor, > 1.
    pub kappa: f64,
    /// Bernoulli rate of the random forward-KL placement.
    pub fkl_fraction: f64,
    /// Weight on the forward-KL term. 1.0 is the unweighted sum.
    pub fkl_weight: f64,
    /// Off-policy KD cross-entropy weight.
    pub ce_weight: f64,
    /// Off-policy KD forward-KL weight.
    pub kl_weight: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            tau: 0.8,
            beta: 0.01,
            alpha: 0.1,
            kappa: 2.0,
            fkl_fraction: 0.2,
            fkl_weight: 1.0,
            ce_weight: 0.5,
            kl_weight: 0.5,
        }
    }
}

impl LossParams {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(EopdError::invalid(msg.to_string()))
            }
        };
        check(
            self.clip_eps > 0.0 && self.clip_eps < 1.0,
            "clip_eps must lie in (0, 1)",
        )?;
        check(self.tau >= 0.0, "tau must be >= 0")?;
        check(
            self.beta >= 0.0 && self.beta.is_finite(),
            "beta must be >= 0",
        )?;
        check(
            self.alpha >= 0.0 && self.alpha.is_finite(),
            "alpha must be >= 0",
        )?;
        check(
            self.kappa > 1.0 && self.kappa.is_finite(),
            "kappa must be > 1",
        )?;
        check(
            (0.0..=1.0).contains(&self.fkl_fraction),
            "fkl_fraction must lie in [0, 1]",
        )?;
        check(
            self.fkl_weight >= 0.0 && self.fkl_weight.is_finite(),
            "fkl_weight must be >= 0",
        )?;
        check(
            self.ce_weight >= 0.0 && self.kl_weight >= 0.0,
            "KD weights must be >= 0",
        )?;
        Ok(())
    }
}

/// Everything needed to score one generated token.
#[derive(Debug, Clone, Copy)]
pub struct TokenLossInput<'a> {
    /// Current student logits at the token's context.
    pub student_logits: &'a [f64],
    /// `ln pi_old(token | context)` recorded at rollout time.
    pub behavior_logp: f64,
    pub token: usize,
    pub teacher: &'a TeacherQuery,
    /// Student entropy at rollout time (detached), used by advantage shaping.
    pub student_entropy: f64,
    /// Uniform draw in [0, 1) stored at rollout time for random placement.
    pub gate_draw: f64,
    pub method: Method,
    pub params: &'a LossParams,
}

/// Loss value and gradient w.r.t. the student logits for one token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenLossOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// The forward-KL term contributed.
    pub gate_active: bool,
    /// The clipped branch of the surrogate attained the max.
    pub clipped: bool,
    /// Importance ratio `pi_theta / pi_old` at the token, if the loss uses one.
    pub ratio: Option<f64>,
    /// Advantage fed to the surrogate, after any shaping.
    pub advantage: Option<f64>,
}

impl TokenLossOutput {
    fn zero(vocab: usize) -> Self {
        Self {
            loss: 0.0,
            grad: vec![0.0; vocab],
            gate_active: false,
            clipped: false,
            ratio: None,
            advantage: None,
        }
    }

    /// Adds `other`'s loss and gradient; flags are OR-ed.
    fn absorb(&mut self, other: &TokenLossOutput) {
        self.loss += other.loss;
        for (g, o) in self.grad.iter_mut().zip(&other.grad) {
            *g += o;
        }
        self.gate_active |= other.gate_active;
        self.clipped |= other.clipped;
    }

    pub fn is_finite(&self) -> bool {
        self.loss.is_finite() && self.grad.iter().all(|g| g.is_finite())
    }
}

/// `max(-r A, -clip(r, 1-eps, 1+eps) A)`; ties select the unclipped branch.
///
/// Returns the value and whether the clipped branch was selected.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip_eps: f64) -> (f64, bool) {
    let unclipped = -ratio * advantage;
    let clipped = -ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * advantage;
    if clipped > unclipped {
        (clipped, true)
    } else {
        (unclipped, false)
    }
}

fn student_probs(input: &TokenLossInput<'_>) -> Result<Vec<f64>> {
    if input.student_logits.is_empty() {
        return Err(EopdError::invalid("empty student logits"));
    }
    if input.token >= input.student_logits.len() {
        return Err(EopdError::invalid(format!(
            "token {} outside vocabulary of size {}",
            input.token,
            input.student_logits.len()
        )));
    }
    Ok(softmax_slice(input.student_logits, 1.0))
}

fn clipped_rkl_with_advantage(
    probs: &[f64],
    input: &TokenLossInput<'_>,
    advantage: f64,
) -> Result<TokenLossOutput> {
    if !input.behavior_logp.is_finite() {
        return Err(EopdError::invalid(format!(
            "behavior log-prob of a sampled token must be finite, got {}",
            input.behavior_logp
        )));
    }
    let x = input.token;
    let ratio = (floored_ln(probs[x]) - input.behavior_logp).exp();
    let (loss, clipped) = clipped_surrogate(ratio, advantage, input.params.clip_eps);
    let grad = if clipped {
        vec![0.0; probs.len()]
    } else {
        let scale = -advantage * ratio;
        probs
            .iter()
            .enumerate()
            .map(|(j, &p)| scale * (f64::from(u8::from(j == x)) - p))
            .collect()
    };
    Ok(TokenLossOutput {
        loss,
        grad,
        gate_active: false,
        clipped,
        ratio: Some(ratio),
        advantage: Some(advantage),
    })
}

/// Truncated forward KL to the teacher's top-k set, scaled by `weight`.
/// Gradient is `weight * (pi_j - p~_j)` with `p~_j = 0` outside the set.
fn fkl_term(probs: &[f64], topk: &TopKView, weight: f64) -> Result<TokenLossOutput> {
    let student = Categorical::from_normalized_unchecked(probs.to_vec());
    let loss = truncated_forward_kl(topk, &student)?;
    let mut grad: Vec<f64> = probs.to_vec();
    for (&i, &p) in topk.indices.iter().zip(&topk.renorm_probs) {
        grad[i] -= p;
    }
    if weight != 1.0 {
        for g in &mut grad {
            *g *= weight;
        }
    }
    Ok(TokenLossOutput {
        loss: weight * loss,
        grad,
        gate_active: true,
        clipped: false,
        ratio: None,
        advantage: None,
    })
}

fn with_fkl(probs: &[f64], input: &TokenLossInput<'_>, gate: bool) -> Result<TokenLossOutput> {
    let mut out = clipped_rkl_with_advantage(probs, input, raw_advantage(input))?;
    if gate {
        let fkl = fkl_term(probs, &input.teacher.topk, input.params.fkl_weight)?;
        out.absorb(&fkl);
    }
    Ok(out)
}

fn raw_advantage(input: &TokenLossInput<'_>) -> f64 {
    mc_reverse_kl_reward(input.teacher.token_logp, input.behavior_logp)
}

/// Clipped reverse-KL surrogate at the sampled token.
pub fn clipped_rkl_loss(input: &TokenLossInput<'_>) -> Result<TokenLossOutput> {
    let probs = student_probs(input)?;
    clipped_rkl_with_advantage(&probs, input, raw_advantage(input))
}

/// The entropy-gated forward-KL term alone. Fires when the teacher entropy
/// strictly exceeds `tau`.
pub fn fkl_term_loss(input: &TokenLossInput<'_>) -> Result<TokenLossOutput> {
    let probs = student_probs(input)?;
    if input.teacher.entropy > input.params.tau {
        fkl_term(&probs, &input.teacher.topk, input.params.fkl_weight)
    } else {
        Ok(TokenLossOutput::zero(probs.len()))
    }
}

/// Clipped surrogate plus the entropy-gated forward-KL term.
pub fn eopd_token_loss(input: &TokenLossInput<'_>) -> Result<TokenLossOutput> {
    let probs = student_probs(input)?;
    with_fkl(&probs, input, input.teacher.entropy > input.params.tau)
}

/// Clipped surrogate minus `beta` times the student entropy.
pub fn entropy_bonus_loss(input: &TokenLossInput<'_>) -> Result<TokenLossOutput> {
    let beta = input.params.beta;
    if !(beta >= 0.0) {
        return Err(EopdError::invalid(format!(
            "entropy bonus coefficient must be >= 0, got {beta}"
        )));
    }
    let probs = student_probs(input)?;
    let mut out = clipped_rkl_with_advantage(&probs, input, raw_advantage(input))?;
    if beta == 0.0 {
        return Ok(out);
    }
    let entropy = Categorical::from_normalized_unchecked(probs.clone()).entropy();
    out.loss -= beta * entropy;
    for (g, &p) in out.grad.iter_mut().zip(&probs) {
        if p > 0.0 {
            *g += beta * p * (p.ln() + entropy);
        }
    }
    Ok(out)
}

/// `adv + min(alpha * entropy, |adv| / kappa)`.
pub fn advantage_shaping(adv: f64, student_entropy: f64, alpha: f64, kappa: f64) -> Result<f64> {
    if !(kappa > 1.0) {
        return Err(EopdError::invalid(format!(
            "kappa must be > 1, got {kappa}"
        )));
    }
    Ok(adv + (alpha * student_entropy).min(adv.abs() / kappa))
}

/// Clipped surrogate with the entropy-shaped advantage.
pub fn adv_shaping_loss(input: &TokenLossInput<'_>) -> Result<TokenLossOutput> {
    let probs = student_probs(input)?;
    let shaped = advantage_shaping(
        raw_advantage(input),
        input.student_entropy,
        input.params.alpha,
        input.params.kappa,
    )?;
    clipped_rkl_with_advantage(&probs, input, shaped)
}

/// Off-policy KD: `w_ce * CE(token) + w_kl * truncated forward KL`.
pub fn kd_offpolicy_loss(
    student_logits: &[f64],
    teacher: &TeacherQuery,
    token: usize,
    w_ce: f64,
    w_kl: f64,
) -> Result<TokenLossOutput> {
    if !(w_ce >= 0.0 && w_kl >= 0.0) {
        return Err(EopdError::invalid("KD loss weights must be >= 0"));
    }
    if token >= student_logits.len() {
        return Err(EopdError::invalid(format!(
            "token {token} outside vocabulary of size {}",
            student_logits.len()
        )));
    }
    let probs = softmax_slice(student_logits, 1.0);
    let mut out = TokenLossOutput::zero(probs.len());
    out.loss = w_ce * -floored_ln(probs[token]);
    for (j, (g, &p)) in out.grad.iter_mut().zip(&probs).enumerate() {
        *g = w_ce * (p - f64::from(u8::from(j == token)));
    }
    let fkl = fkl_term(&probs, &teacher.topk, w_kl)?;
    out.absorb(&fkl);
    Ok(out)
}

/// Scores a token with the objective selected by `input.method`.
pub fn token_loss(input: &TokenLossInput<'_>) -> Result<TokenLossOutput> {
    match input.method {
        Method::Opd => clipped_rkl_loss(input),
        Method::Eopd => eopd_token_loss(input),
        Method::FullFkl => {
            let probs = student_probs(input)?;
            with_fkl(&probs, input, true)
        }
        Method::RandomFkl => {
            let probs = student_probs(input)?;
            with_fkl(&probs, input, input.gate_draw < input.params.fkl_fraction)
        }
        Method::EntropyBonus => entropy_bonus_loss(input),
        Method::AdvShaping => adv_shaping_loss(input),
        Method::Kd => kd_offpolicy_loss(
            input.student_logits,
            input.teacher,
            input.token,
            input.params.ce_weight,
            input.params.kl_weight,
        ),
    }
}
