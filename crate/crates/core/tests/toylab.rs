use eopd_core::toylab::{jaccard_distance, run_toy, run_toy_with, smooth};
use eopd_core::{Execution, ToyConfig};
use proptest::prelude::*;

#[test]
fn identical_configs_give_identical_traces() {
    let cfg = ToyConfig {
        steps: 200,
        ..ToyConfig::scenario_b()
    };
    let a = run_toy_with(&cfg, Execution::Sequential).unwrap();
    let b = run_toy_with(&cfg, Execution::Parallel).unwrap();
    assert_eq!(a, b);
}

#[test]
fn seeds_differ() {
    let cfg = ToyConfig {
        steps: 200,
        seeds: vec![0, 1],
        ..ToyConfig::scenario_b()
    };
    let run = run_toy(&cfg).unwrap();
    assert_ne!(run.traces[0].records, run.traces[1].records);
}

#[test]
fn high_temperature_churns_more() {
    let a = run_toy(&ToyConfig::scenario_a()).unwrap();
    let b = run_toy(&ToyConfig::scenario_b()).unwrap();
    assert!(b.summary.top1_change_mean >= 5.0 * a.summary.top1_change_mean.max(1.0));
    assert!(*a.summary.smoothed_change_rate.last().unwrap() < 0.05);
    assert!(a
        .summary
        .teacher_entropy
        .iter()
        .zip(&b.summary.teacher_entropy)
        .all(|(x, y)| x < y));
}

#[test]
fn summary_is_consistent_with_traces() {
    let run = run_toy(&ToyConfig {
        steps: 150,
        ..ToyConfig::scenario_b()
    })
    .unwrap();
    let counts: Vec<usize> = run.traces.iter().map(|t| t.top1_change_count()).collect();
    assert_eq!(run.summary.top1_change_counts, counts);
    let mean = counts.iter().sum::<usize>() as f64 / counts.len() as f64;
    assert!((run.summary.top1_change_mean - mean).abs() < 1e-12);
    assert_eq!(run.summary.mean_change_rate.len(), 150);
    for trace in &run.traces {
        for (i, rec) in trace.records.iter().enumerate() {
            assert_eq!(rec.step, i + 1);
            assert!((0.0..=1.0).contains(&rec.change_rate));
        }
    }
}

#[test]
fn empty_seed_list_is_rejected() {
    let cfg = ToyConfig {
        seeds: vec![],
        ..ToyConfig::default()
    };
    assert!(run_toy(&cfg).is_err());
}

proptest! {
    #[test]
    fn jaccard_is_a_bounded_symmetric_distance(
        a in proptest::collection::btree_set(0usize..30, 1..12),
        b in proptest::collection::btree_set(0usize..30, 1..12),
    ) {
        let a: Vec<usize> = a.into_iter().collect();
        let b: Vec<usize> = b.into_iter().collect();
        let d = jaccard_distance(&a, &b);
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(d, jaccard_distance(&b, &a));
        prop_assert_eq!(jaccard_distance(&a, &a), 0.0);
    }

    #[test]
    fn smoothing_preserves_length_and_bounds(
        v in proptest::collection::vec(0.0f64..1.0, 0..100),
        w in 1usize..30,
    ) {
        let s = smooth(&v, w);
        prop_assert_eq!(s.len(), v.len());
        prop_assert!(s.iter().all(|x| (-1e-12..=1.0 + 1e-12).contains(x)));
        if w == 1 {
            prop_assert_eq!(s, v);
        }
    }
}
