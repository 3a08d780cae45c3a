mod common;

use common::{random_categorical, rng};
use eopd_core::probdist::softmax_temp;
use eopd_core::{Categorical, LogitVector};
use proptest::prelude::*;

fn logit_vec() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, 1..80)
}

proptest! {
    #[test]
    fn softmax_is_normalized(z in logit_vec(), t in 0.01f64..10.0) {
        let c = softmax_temp(&LogitVector::new(z).unwrap(), t).unwrap();
        prop_assert!(c.probs().iter().all(|p| p.is_finite() && *p >= 0.0));
        prop_assert!((c.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn extreme_logits_stay_finite(scale in 1.0f64..1e6, v in 2usize..50) {
        let z: Vec<f64> = (0..v).map(|i| if i % 2 == 0 { scale } else { -scale }).collect();
        let c = softmax_temp(&LogitVector::new(z).unwrap(), 1.0).unwrap();
        prop_assert!(c.entropy().is_finite());
        prop_assert!(c.log_prob(1).unwrap().is_finite());
    }

    #[test]
    fn entropy_lies_between_zero_and_log_vocab(z in logit_vec()) {
        let v = z.len();
        let c = softmax_temp(&LogitVector::new(z).unwrap(), 1.0).unwrap();
        let h = c.entropy();
        prop_assert!(h >= 0.0 && h <= (v as f64).ln() + 1e-12);
    }

    #[test]
    fn entropy_grows_with_temperature(z in prop::collection::vec(-5.0f64..5.0, 2..40), t in 0.05f64..5.0) {
        let lv = LogitVector::new(z).unwrap();
        let lo = softmax_temp(&lv, t).unwrap().entropy();
        let hi = softmax_temp(&lv, t * 1.5).unwrap().entropy();
        prop_assert!(hi >= lo - 1e-12);
    }

    #[test]
    fn top_k_view_invariants(seed in any::<u64>(), v in 1usize..64, kf in 0.0f64..1.0) {
        let c = random_categorical(&mut rng(seed), v);
        let k = 1 + ((v - 1) as f64 * kf) as usize;
        let view = c.top_k(k).unwrap();
        prop_assert_eq!(view.k(), k);
        prop_assert!((view.renorm_probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(view.mass <= 1.0 + 1e-12);
        let mut seen = view.indices.clone();
        seen.sort_unstable();
        seen.dedup();
        prop_assert_eq!(seen.len(), k);
        // every excluded token is no more probable than every included one
        let min_in = view.indices.iter().map(|&i| c.probs()[i]).fold(f64::INFINITY, f64::min);
        for i in (0..v).filter(|i| !view.indices.contains(i)) {
            prop_assert!(c.probs()[i] <= min_in);
        }
        if k == v {
            prop_assert!((view.mass - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn top_k_mass_is_monotone(seed in any::<u64>(), v in 2usize..64) {
        let c = random_categorical(&mut rng(seed), v);
        let masses: Vec<f64> = (1..=v).map(|k| c.top_k(k).unwrap().mass).collect();
        prop_assert!(masses.windows(2).all(|w| w[1] >= w[0]));
    }
}

#[test]
fn ties_break_toward_lowest_index() {
    let c = Categorical::from_probs(vec![0.2, 0.3, 0.2, 0.3]).unwrap();
    assert_eq!(c.top_k(3).unwrap().indices, vec![1, 3, 0]);
    assert_eq!(c.argmax(), 1);
}

#[test]
fn sampling_frequencies_match_probabilities() {
    let c = Categorical::from_probs(vec![0.1, 0.6, 0.3]).unwrap();
    let mut r = rng(3);
    let n = 200_000;
    let mut counts = [0usize; 3];
    for _ in 0..n {
        counts[c.sample(&mut r)] += 1;
    }
    for (count, p) in counts.iter().zip(c.probs()) {
        assert!((*count as f64 / n as f64 - p).abs() < 0.005);
    }
}
