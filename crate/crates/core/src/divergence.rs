//! KL divergences between categoricals.
//!
//! `forward_kl` is mode-covering (expectation under the teacher), `reverse_kl`
//! is mode-seeking (expectation under the student). The truncated variant
//! restricts the forward KL to the teacher's top-k tokens.

use crate::error::{EopdError, Result};
use crate::probdist::{floored_ln, Categorical, TopKView};

fn check_same_vocab(a: &Categorical, b: &Categorical) -> Result<()> {
    if a.vocab() != b.vocab() {
        return Err(EopdError::invalid(format!(
            "vocabulary mismatch: {} vs {}",
            a.vocab(),
            b.vocab()
        )));
    }
    Ok(())
}

/// `sum_x p(x) (ln p(x) - ln q(x))`, zero terms where `p(x) = 0`.
fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - floored_ln(qi)))
        .sum()
}

/// KL(teacher || student).
pub fn forward_kl(teacher: &Categorical, student: &Categorical) -> Result<f64> {
    check_same_vocab(teacher, student)?;
    Ok(kl(teacher.probs(), student.probs()))
}

/// KL(student || teacher).
pub fn reverse_kl(student: &Categorical, teacher: &Categorical) -> Result<f64> {
    check_same_vocab(student, teacher)?;
    Ok(kl(student.probs(), teacher.probs()))
}

/// Forward KL over the teacher's top-k set `S` with renormalized teacher
/// probabilities. The student is not renormalized; for a normalized student
/// the value is at least `-ln student(S)`, hence non-negative.
pub fn truncated_forward_kl(teacher_topk: &TopKView, student: &Categorical) -> Result<f64> {
    let q = student.probs();
    let mut total = 0.0;
    for (&x, &p) in teacher_topk.indices.iter().zip(&teacher_topk.renorm_probs) {
        let qx = *q.get(x).ok_or_else(|| {
            EopdError::invalid(format!(
                "top-k index {x} outside student vocabulary of size {}",
                q.len()
            ))
        })?;
        if p > 0.0 {
            total += p * (p.ln() - floored_ln(qx));
        }
    }
    Ok(total)
}

/// Single-sample reverse-KL reward: the per-token advantage
/// `ln pi_te(x) - ln pi_old(x)`.
#[inline]
pub fn mc_reverse_kl_reward(teacher_logp: f64, behavior_logp: f64) -> f64 {
    teacher_logp - behavior_logp
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cat(p: &[f64]) -> Categorical {
        Categorical::from_probs(p.to_vec()).unwrap()
    }

    #[test]
    fn identical_inputs_have_zero_divergence() {
        let p = cat(&[0.2, 0.5, 0.3]);
        assert_eq!(forward_kl(&p, &p).unwrap(), 0.0);
        assert_eq!(reverse_kl(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn forward_kl_point_mass_vs_uniform() {
        let v = forward_kl(&cat(&[1.0, 0.0]), &cat(&[0.5, 0.5])).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn reverse_kl_is_forward_with_swapped_roles() {
        let s = cat(&[0.9, 0.1]);
        let t = cat(&[0.5, 0.5]);
        let expected = 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
        assert!((reverse_kl(&s, &t).unwrap() - expected).abs() < 1e-12);
        assert_eq!(reverse_kl(&s, &t).unwrap(), forward_kl(&s, &t).unwrap());
    }

    #[test]
    fn length_mismatch_is_rejected() {
        assert!(forward_kl(&cat(&[1.0]), &cat(&[0.5, 0.5])).is_err());
        assert!(reverse_kl(&cat(&[1.0]), &cat(&[0.5, 0.5])).is_err());
    }

    #[test]
    fn student_zero_under_teacher_support_is_floored() {
        let v = forward_kl(&cat(&[0.5, 0.5]), &cat(&[1.0, 0.0])).unwrap();
        assert!(v.is_finite() && v > 100.0);
    }

    #[test]
    fn truncated_example() {
        let topk = cat(&[0.5, 0.3, 0.2]).top_k(2).unwrap();
        let v = truncated_forward_kl(&topk, &Categorical::uniform(3)).unwrap();
        let third = 1.0f64 / 3.0;
        let expected = 0.625 * (0.625f64 / third).ln() + 0.375 * (0.375f64 / third).ln();
        assert!((v - expected).abs() < 1e-15);
    }

    #[test]
    fn truncated_rejects_bad_index() {
        let topk = cat(&[0.5, 0.3, 0.2]).top_k(2).unwrap();
        assert!(truncated_forward_kl(&topk, &cat(&[1.0])).is_err());
    }

    #[test]
    fn truncated_lower_bound_is_attained() {
        // Student matches p~ in ratio on S = {0, 1} with mass 0.98.
        let topk = cat(&[0.5, 0.3, 0.2]).top_k(2).unwrap();
        let student = cat(&[0.6125, 0.3675, 0.02]);
        let v = truncated_forward_kl(&topk, &student).unwrap();
        let oracle = 0.625 * (0.625f64 / 0.6125).ln() + 0.375 * (0.375f64 / 0.3675).ln();
        assert!((v - oracle).abs() < 1e-12);
        assert!((v + 0.98f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn reward_sign_convention() {
        assert_eq!(mc_reverse_kl_reward(-1.5, -1.5), 0.0);
        assert_eq!(mc_reverse_kl_reward(-1.0, -3.0), 2.0);
    }
}
