mod common;

use common::{random_categorical, rng, sparse_categorical};
use eopd_core::divergence::{forward_kl, mc_reverse_kl_reward, reverse_kl, truncated_forward_kl};
use eopd_core::Categorical;
use proptest::prelude::*;
use rand::Rng;

/// Plain double loop: `sum p ln p - sum p ln q`, skipping `p = 0`.
fn oracle_kl(p: &[f64], q: &[f64]) -> f64 {
    let mut cross = 0.0;
    let mut neg_entropy = 0.0;
    for i in 0..p.len() {
        if p[i] == 0.0 {
            continue;
        }
        neg_entropy += p[i] * p[i].ln();
        cross += p[i] * q[i].max(1e-300).ln();
    }
    neg_entropy - cross
}

fn oracle_truncated(teacher: &[f64], k: usize, student: &[f64]) -> f64 {
    let mut idx: Vec<usize> = (0..teacher.len()).collect();
    // descending probability, lowest index first on ties
    idx.sort_by(|&a, &b| teacher[b].partial_cmp(&teacher[a]).unwrap().then(a.cmp(&b)));
    let set = &idx[..k];
    let mass: f64 = set.iter().map(|&i| teacher[i]).sum();
    let mut total = 0.0;
    for &i in set {
        let p = teacher[i] / mass;
        if p > 0.0 {
            total += p * (p.ln() - student[i].max(1e-300).ln());
        }
    }
    total
}

#[test]
fn matches_summation_oracle_on_random_pairs() {
    let mut r = rng(11);
    for case in 0..1000 {
        let v = r.random_range(2..=64);
        let t = if case % 3 == 0 {
            sparse_categorical(&mut r, v)
        } else {
            random_categorical(&mut r, v)
        };
        let s = random_categorical(&mut r, v);
        let k = r.random_range(1..=v);
        let fwd = forward_kl(&t, &s).unwrap();
        let rev = reverse_kl(&s, &t).unwrap();
        let tr = truncated_forward_kl(&t.top_k(k).unwrap(), &s).unwrap();
        assert!(
            (fwd - oracle_kl(t.probs(), s.probs())).abs() < 1e-12,
            "case {case}"
        );
        assert!(
            (rev - oracle_kl(s.probs(), t.probs())).abs() < 1e-12,
            "case {case}"
        );
        assert!(
            (tr - oracle_truncated(t.probs(), k, s.probs())).abs() < 1e-12,
            "case {case}"
        );
    }
}

#[test]
fn expected_single_sample_reward_is_negative_reverse_kl() {
    let mut r = rng(5);
    for _ in 0..50 {
        let v = r.random_range(2..40);
        let s = random_categorical(&mut r, v);
        let t = random_categorical(&mut r, v);
        let expected: f64 = (0..v)
            .map(|x| {
                s.probs()[x] * mc_reverse_kl_reward(t.log_prob(x).unwrap(), s.log_prob(x).unwrap())
            })
            .sum();
        assert!((expected + reverse_kl(&s, &t).unwrap()).abs() < 1e-12);
    }
}

fn pair() -> impl Strategy<Value = (Categorical, Categorical, usize)> {
    (2usize..48, any::<u64>()).prop_map(|(v, seed)| {
        let mut r = rng(seed);
        let t = random_categorical(&mut r, v);
        let s = random_categorical(&mut r, v);
        let k = r.random_range(1..=v);
        (t, s, k)
    })
}

proptest! {
    #[test]
    fn kl_is_nonnegative_and_zero_on_identity((t, s, _k) in pair()) {
        prop_assert!(forward_kl(&t, &s).unwrap() >= -1e-15);
        prop_assert!(reverse_kl(&s, &t).unwrap() >= -1e-15);
        prop_assert!(forward_kl(&t, &t).unwrap().abs() < 1e-14);
    }

    #[test]
    fn full_top_k_truncation_equals_forward_kl((t, s, _k) in pair()) {
        let full = truncated_forward_kl(&t.top_k(t.vocab()).unwrap(), &s).unwrap();
        prop_assert!((full - forward_kl(&t, &s).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn truncated_kl_bounded_below_by_log_student_mass((t, s, k) in pair()) {
        let view = t.top_k(k).unwrap();
        let student_mass: f64 = view.indices.iter().map(|&i| s.probs()[i]).sum();
        let v = truncated_forward_kl(&view, &s).unwrap();
        prop_assert!(v >= -student_mass.ln() - 1e-12);
    }

    #[test]
    fn reverse_kl_swaps_arguments((t, s, _k) in pair()) {
        prop_assert_eq!(reverse_kl(&s, &t).unwrap(), forward_kl(&s, &t).unwrap());
    }
}
