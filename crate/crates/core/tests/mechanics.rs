mod common;

use common::mechanics::*;
use s3ld::trainer::Objective;

#[test]
fn accumulated_step_equals_concatenated_batch() {
    for seed in [3, 11] {
        let gap = accumulation_gap(seed);
        println!("seed {seed}: accumulation gap {gap:.2e}");
        assert!(gap < 1e-6, "{gap:.2e}");
    }
}

#[test]
fn ema_fixpoints_and_hull_over_100_steps() {
    let r = ema_run(100, 5);
    println!("{r:?}");
    assert_eq!(r.copy_dev, 0.0);
    assert_eq!(r.frozen_dev, 0.0);
    assert_eq!(r.hull_violations, 0);
}

#[test]
fn contrastive_resume_is_bit_identical() {
    assert!(resume_is_identical(Objective::Contrastive, 6, 7));
}

#[test]
fn predictive_resume_is_bit_identical() {
    // the halfway target switch happens right after the resume point
    assert!(resume_is_identical(Objective::Predictive, 5, 8));
}

#[test]
fn dynamic_batching_wastes_less_than_fixed_counts() {
    for (budget, seed) in [(600, 1), (1200, 2), (7200, 3), (3000, 4)] {
        let (dynamic, fixed, max_seen) = padding_waste(budget, seed);
        println!("budget {budget}: dynamic {dynamic:.4} fixed {fixed:.4}");
        assert!(max_seen <= budget);
        assert!(dynamic <= fixed);
    }
}
