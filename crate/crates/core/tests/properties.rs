//! Property suites, runnable on their own with `cargo test --test properties`.

use mgdif::dif::rmsd::rmsd;
use mgdif::dif::scorebased::holm_adjust;
use mgdif::harness::acceptance::criterion_9;
use mgdif::irt::{icc_area_difference, ItemParams, QuadratureGrid};
use proptest::prelude::*;

#[test]
fn seed_matrix() {
    let outcome = criterion_9(&(0..24).collect::<Vec<u64>>());
    assert!(outcome.passed, "{outcome}");
}

proptest! {
    #[test]
    fn holm_is_bounded_and_order_preserving(p in prop::collection::vec(0.0f64..=1.0, 1..20)) {
        let adj = holm_adjust(&p);
        for i in 0..p.len() {
            prop_assert!(adj[i] >= p[i] && adj[i] <= 1.0);
            for j in 0..p.len() {
                if p[i] <= p[j] {
                    prop_assert!(adj[i] <= adj[j]);
                }
            }
        }
    }

    #[test]
    fn rmsd_is_zero_only_for_equal_curves(
        curve in prop::collection::vec(0.0f64..1.0, 2..41),
        k in 0usize..41,
        gap in 0.001f64..0.5,
    ) {
        let w = vec![1.0 / curve.len() as f64; curve.len()];
        prop_assert_eq!(rmsd(&curve, &curve, &w), 0.0);
        let mut other = curve.clone();
        let k = k % curve.len();
        other[k] = (other[k] + gap).min(1.0).max(other[k] - gap);
        prop_assert!(rmsd(&other, &curve, &w) > 0.0);
    }

    #[test]
    fn area_is_symmetric_and_nonnegative(a1 in 0.3f64..3.0, b1 in -2.0f64..2.0, a2 in 0.3f64..3.0, b2 in -2.0f64..2.0) {
        let g = QuadratureGrid::q41();
        let (x, y) = (ItemParams::two_pl(a1, b1).unwrap(), ItemParams::two_pl(a2, b2).unwrap());
        let d = icc_area_difference(&x, &y, &g);
        prop_assert!(d >= 0.0);
        prop_assert!((d - icc_area_difference(&y, &x, &g)).abs() < 1e-12);
    }
}
