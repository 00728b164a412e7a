//! Pseudo-negative purity against subset enumeration.

mod oracle;

use oracle::enumerate;
use proptest::prelude::*;
use sscl_core::pseudolabel::purity_exact;

#[test]
fn matches_enumeration_for_small_pools() {
    for pool in 1..=12u32 {
        for positives in 0..=pool {
            for draw in 1..=pool {
                let want = enumerate(pool, positives, draw);
                let got = purity_exact(pool as u64, positives as u64, draw as u64).unwrap();
                for (n, w) in want.iter().enumerate() {
                    let g = got.exactly(n);
                    assert!((g - w).abs() <= 1e-12, "N={pool} K={positives} m={draw} n={n}: {g} vs {w}");
                }
                let mut acc = 0.0;
                for (n, w) in want.iter().enumerate() {
                    acc += w;
                    assert!((got.at_most(n) - acc.min(1.0)).abs() <= 1e-12);
                }
            }
        }
    }
}

#[test]
fn paper_pool_of_505() {
    // 5 positives among 505 unlabeled tiles, subgroups of 16.
    let est = purity_exact(505, 5, 16).unwrap();
    assert!((est.at_most(1) - 0.991).abs() <= 1e-3, "{}", est.at_most(1));
}

#[test]
fn bounds_are_checked() {
    assert!(purity_exact(10, 11, 3).is_err());
    assert!(purity_exact(10, 2, 0).is_err());
    assert!(purity_exact(10, 2, 11).is_err());
}

proptest! {
    #[test]
    fn masses_sum_to_one(pool in 1u64..200_000, pos_frac in 0.0f64..1.0, draw_frac in 0.0f64..1.0) {
        let positives = (pos_frac * pool as f64) as u64;
        let draw = ((draw_frac * pool as f64) as u64).clamp(1, pool.min(5_000));
        let est = purity_exact(pool, positives, draw).unwrap();
        let total: f64 = est.pmf.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        prop_assert!(est.pmf.iter().all(|p| (0.0..=1.0).contains(p)));
    }
}
