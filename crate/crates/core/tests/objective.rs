mod common;

use common::{logits, numeric_grad, query, random_categorical, relative_error, rng};
use eopd_core::objective::{
    advantage_shaping, clipped_rkl_loss, clipped_surrogate, entropy_bonus_loss, eopd_token_loss,
    fkl_term_loss, kd_offpolicy_loss, token_loss, TokenLossInput, TokenLossOutput,
};
use eopd_core::{LossParams, Method, TeacherQuery};
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-6;
const TOL: f64 = 1e-5;

fn log_softmax(z: &[f64], i: usize) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    z[i] - lse
}

struct Instance {
    logits: Vec<f64>,
    token: usize,
    behavior_logp: f64,
    teacher: TeacherQuery,
    student_entropy: f64,
    gate_draw: f64,
    params: LossParams,
}

impl Instance {
    fn draw(r: &mut ChaCha8Rng) -> Self {
        let v = r.random_range(2..=24);
        let scale = r.random_range(0.3..3.0);
        let logits = logits(r, v, scale);
        let token = r.random_range(0..v);
        let teacher = random_categorical(r, v);
        let k = r.random_range(1..=v);
        let params = LossParams {
            tau: r.random_range(0.0..2.5),
            beta: r.random_range(0.001..0.5),
            alpha: r.random_range(0.01..1.0),
            kappa: r.random_range(1.1..4.0),
            fkl_weight: r.random_range(0.1..2.0),
            ce_weight: r.random_range(0.0..1.0),
            kl_weight: r.random_range(0.0..1.0),
            ..LossParams::default()
        };
        // keep the ratio away from the clip kinks
        let eps = params.clip_eps;
        let ratio = loop {
            let ratio: f64 = (-r.random_range(-0.4..0.4f64)).exp();
            if (ratio - (1.0 - eps)).abs() > 1e-3 && (ratio - (1.0 + eps)).abs() > 1e-3 {
                break ratio;
            }
        };
        let behavior_logp = log_softmax(&logits, token) - ratio.ln();
        Self {
            token,
            behavior_logp,
            teacher: query(&teacher, token, k),
            student_entropy: r.random_range(0.0..3.0),
            gate_draw: r.random(),
            params,
            logits,
        }
    }

    fn input<'a>(&'a self, logits: &'a [f64], method: Method) -> TokenLossInput<'a> {
        TokenLossInput {
            student_logits: logits,
            behavior_logp: self.behavior_logp,
            token: self.token,
            teacher: &self.teacher,
            student_entropy: self.student_entropy,
            gate_draw: self.gate_draw,
            method,
            params: &self.params,
        }
    }
}

type LossFn = fn(&TokenLossInput<'_>) -> eopd_core::Result<TokenLossOutput>;

fn check_gradients(name: &str, method: Method, f: LossFn, seed: u64) {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let inst = Instance::draw(&mut r);
        let analytic = f(&inst.input(&inst.logits, method)).unwrap().grad;
        let numeric = numeric_grad(
            |z| f(&inst.input(z, method)).unwrap().loss,
            &inst.logits,
            STEP,
        );
        let err = relative_error(&analytic, &numeric);
        worst = worst.max(err);
        assert!(err < TOL, "{name} case {case}: relative error {err:e}");
    }
    eprintln!("{name}: worst relative error {worst:e}");
}

#[test]
fn clipped_rkl_gradient_matches_finite_differences() {
    check_gradients("clipped_rkl", Method::Opd, clipped_rkl_loss, 1);
}

#[test]
fn fkl_term_gradient_matches_finite_differences() {
    check_gradients("fkl_term", Method::Eopd, fkl_term_loss, 2);
}

#[test]
fn eopd_gradient_matches_finite_differences() {
    check_gradients("eopd", Method::Eopd, eopd_token_loss, 3);
}

#[test]
fn entropy_bonus_gradient_matches_finite_differences() {
    check_gradients("entropy_bonus", Method::EntropyBonus, entropy_bonus_loss, 4);
}

#[test]
fn kd_gradient_matches_finite_differences() {
    fn kd(input: &TokenLossInput<'_>) -> eopd_core::Result<TokenLossOutput> {
        kd_offpolicy_loss(
            input.student_logits,
            input.teacher,
            input.token,
            input.params.ce_weight,
            input.params.kl_weight,
        )
    }
    check_gradients("kd", Method::Kd, kd, 5);
}

#[test]
fn every_method_gradient_matches_finite_differences() {
    for (i, method) in Method::ALL.into_iter().enumerate() {
        check_gradients(method.name(), method, token_loss, 100 + i as u64);
    }
}

#[test]
fn ratio_inside_band_gives_unclipped_value_exactly() {
    let mut r = rng(9);
    for _ in 0..1000 {
        let eps: f64 = r.random_range(0.01..0.5);
        let ratio = r.random_range(1.0 - eps..=1.0 + eps);
        let adv: f64 = r.random_range(-10.0..10.0);
        let (loss, clipped) = clipped_surrogate(ratio, adv, eps);
        assert_eq!(loss, -ratio * adv);
        assert!(!clipped);
    }
}

#[test]
fn clipped_branch_has_exactly_zero_gradient() {
    let mut r = rng(10);
    let mut hits = 0;
    while hits < 200 {
        let mut inst = Instance::draw(&mut r);
        let eps = inst.params.clip_eps;
        let adv = inst.teacher.token_logp - inst.behavior_logp;
        // positive advantage clips above the band, negative below
        let ratio: f64 = if adv > 0.0 {
            r.random_range(1.0 + eps + 1e-6..3.0)
        } else {
            r.random_range(0.05..1.0 - eps - 1e-6)
        };
        inst.behavior_logp = log_softmax(&inst.logits, inst.token) - ratio.ln();
        let adv = inst.teacher.token_logp - inst.behavior_logp;
        let out = clipped_rkl_loss(&inst.input(&inst.logits, Method::Opd)).unwrap();
        let r_now = out.ratio.unwrap();
        let outside = (adv > 0.0 && r_now > 1.0 + eps) || (adv < 0.0 && r_now < 1.0 - eps);
        if !outside {
            continue;
        }
        hits += 1;
        assert!(out.clipped);
        assert!(out.grad.iter().all(|&g| g == 0.0));
        assert_eq!(out.loss, -(r_now.clamp(1.0 - eps, 1.0 + eps)) * adv);
    }
}

#[test]
fn wrong_side_of_band_stays_unclipped() {
    // ratio above the band with a negative advantage: the unclipped term is larger
    let (loss, clipped) = clipped_surrogate(1.5, -2.0, 0.2);
    assert!(!clipped);
    assert_eq!(loss, 3.0);
    let (loss, clipped) = clipped_surrogate(0.5, 2.0, 0.2);
    assert!(!clipped);
    assert_eq!(loss, -1.0);
}

#[test]
fn band_edges_are_ties_that_pick_the_unclipped_branch() {
    let (loss, clipped) = clipped_surrogate(1.2, 1.0, 0.2);
    assert!(!clipped);
    assert_eq!(loss, -1.2);
}

#[test]
fn gate_is_strict() {
    let mut r = rng(12);
    let mut inst = Instance::draw(&mut r);
    inst.params.tau = inst.teacher.entropy;
    let at = eopd_token_loss(&inst.input(&inst.logits, Method::Eopd)).unwrap();
    assert!(!at.gate_active);
    let opd = clipped_rkl_loss(&inst.input(&inst.logits, Method::Opd)).unwrap();
    assert_eq!(at, opd);
    inst.params.tau = inst.teacher.entropy - 1e-12;
    assert!(
        eopd_token_loss(&inst.input(&inst.logits, Method::Eopd))
            .unwrap()
            .gate_active
    );
}

#[test]
fn zero_beta_entropy_bonus_is_plain_surrogate() {
    let mut r = rng(13);
    for _ in 0..50 {
        let mut inst = Instance::draw(&mut r);
        inst.params.beta = 0.0;
        let a = entropy_bonus_loss(&inst.input(&inst.logits, Method::EntropyBonus)).unwrap();
        let b = clipped_rkl_loss(&inst.input(&inst.logits, Method::Opd)).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn malformed_inputs_are_rejected() {
    let mut r = rng(14);
    let mut inst = Instance::draw(&mut r);
    inst.token = inst.logits.len();
    assert!(clipped_rkl_loss(&inst.input(&inst.logits, Method::Opd)).is_err());
    let mut inst = Instance::draw(&mut r);
    inst.behavior_logp = f64::NEG_INFINITY;
    assert!(clipped_rkl_loss(&inst.input(&inst.logits, Method::Opd)).is_err());
    assert!(advantage_shaping(1.0, 1.0, 0.1, 1.0).is_err());
}

proptest! {
    #[test]
    fn shaping_is_bounded_and_sign_preserving(
        adv in -50.0f64..50.0,
        h in 0.0f64..5.0,
        alpha in 0.0f64..2.0,
        kappa in 1.01f64..10.0,
    ) {
        let shaped = advantage_shaping(adv, h, alpha, kappa).unwrap();
        let bonus = shaped - adv;
        prop_assert!(bonus >= -1e-12);
        prop_assert!(bonus <= adv.abs() / kappa + 1e-9);
        prop_assert!(bonus <= alpha * h + 1e-9);
        if adv < 0.0 {
            prop_assert!(shaped < 0.0);
        }
    }

    #[test]
    fn losses_and_gradients_are_finite(seed in any::<u64>()) {
        let inst = Instance::draw(&mut rng(seed));
        for method in Method::ALL {
            let out = token_loss(&inst.input(&inst.logits, method)).unwrap();
            prop_assert!(out.is_finite());
            prop_assert_eq!(out.grad.len(), inst.logits.len());
        }
    }

    #[test]
    fn surrogate_gradients_sum_to_zero(seed in any::<u64>()) {
        // softmax logit gradients are invariant to a constant shift
        let inst = Instance::draw(&mut rng(seed));
        for method in Method::ALL {
            let out = token_loss(&inst.input(&inst.logits, method)).unwrap();
            let s: f64 = out.grad.iter().sum();
            let scale = out.grad.iter().map(|g| g.abs()).sum::<f64>().max(1.0);
            prop_assert!(s.abs() < 1e-12 * scale, "{method}: {s}");
        }
    }
}
