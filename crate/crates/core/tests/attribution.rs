use proptest::prelude::*;

use patrep_core::downstream::ProbeModel;
use patrep_core::rss::{rss_score, score_shift};

fn vectors(width: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, width)
}

proptest! {
    #[test]
    fn shift_is_linear_and_antisymmetric(
        (c, r, rp, rq) in (1usize..24).prop_flat_map(|w| (vectors(w), vectors(w), vectors(w), vectors(w))),
        intercept in -5.0f64..5.0,
    ) {
        let probe = ProbeModel { coefficients: c, intercept, l2_strength: 1.0 };
        let s = rss_score(&r, &rp, &probe);
        prop_assert!((s - score_shift(&probe, &r, &rp)).abs() < 1e-9);
        prop_assert!((s + rss_score(&rp, &r, &probe)).abs() < 1e-12);
        // additive along a chain r -> r' -> r''
        let chain = rss_score(&r, &rp, &probe) + rss_score(&rp, &rq, &probe);
        prop_assert!((chain - rss_score(&r, &rq, &probe)).abs() < 1e-9);
        prop_assert_eq!(rss_score(&r, &r, &probe), 0.0);
    }
}
