mod common;

use common::oracle::{mismatches, random_pair, reference, shifted_cubes};
use common::rng;
use volseg::metrics;

#[test]
fn matches_brute_force_on_random_pairs() {
    let mut r = rng(2024);
    let mut failures = Vec::new();
    for trial in 0..200 {
        let (a, b) = random_pair(&mut r, 12);
        let bad = mismatches(&a, &b);
        if !bad.is_empty() {
            failures.push(format!("trial {trial} ({}): {}", a.dims(), bad.join(", ")));
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn symmetric_measures_are_symmetric() {
    let mut r = rng(5);
    for _ in 0..50 {
        let (a, b) = random_pair(&mut r, 8);
        if a.count() == 0 || b.count() == 0 {
            continue;
        }
        assert_eq!(metrics::dice_coefficient(&a, &b).unwrap(), metrics::dice_coefficient(&b, &a).unwrap());
        assert_eq!(metrics::hd95(&a, &b).unwrap(), metrics::hd95(&b, &a).unwrap());
        assert!(metrics::hd95(&a, &b).unwrap() <= metrics::hausdorff(&a, &b).unwrap());
    }
}

#[test]
fn shifted_cube_fixture() {
    let (a, b) = shifted_cubes();
    let report = metrics::evaluate(&a, &b).unwrap();
    assert_eq!(report.dsc, 0.75);
    assert_eq!(report.arvd_pct, Some(0.0));
    assert!(report.flags.is_empty());
    let want = reference(&a, &b);
    assert_eq!(report.abd_mm, want.abd_mm);
    assert_eq!(report.hd95_mm, Some(1.0));
}
