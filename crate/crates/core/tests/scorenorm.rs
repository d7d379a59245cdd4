use proptest::prelude::*;
use xvec::scorenorm::{asnorm, CohortStats};

fn cohort() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, 4..60)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn cohort_order_does_not_matter(
        e in cohort(),
        t in cohort(),
        raw in -10.0f64..10.0,
        k in 2usize..4,
        rot in 0usize..1000,
    ) {
        let base = asnorm(raw, &e, &t, k).unwrap();
        let mut e2 = e.clone();
        let r = rot % e2.len();
        e2.rotate_left(r);
        e2.reverse();
        let mut t2 = t.clone();
        t2.sort_by(f64::total_cmp);
        prop_assert_eq!(base, asnorm(raw, &e2, &t2, k).unwrap());
    }

    #[test]
    fn common_affine_map_cancels(
        e in cohort(),
        t in cohort(),
        raw in -10.0f64..10.0,
        a in 0.01f64..100.0,
        b in -100.0f64..100.0,
    ) {
        let k = 3;
        let base = asnorm(raw, &e, &t, k).unwrap();
        let f = |v: &[f64]| v.iter().map(|x| a * x + b).collect::<Vec<_>>();
        let mapped = asnorm(a * raw + b, &f(&e), &f(&t), k).unwrap();
        prop_assert!((base - mapped).abs() < 1e-9 * base.abs().max(1.0), "{} vs {}", base, mapped);
    }

    #[test]
    fn monotone_in_the_raw_score(e in cohort(), t in cohort(), x in -10.0f64..10.0, dx in 0.001f64..5.0) {
        prop_assert!(asnorm(x + dx, &e, &t, 3).unwrap() > asnorm(x, &e, &t, 3).unwrap());
    }
}

#[test]
fn top_k_uses_the_largest_scores() {
    let s = CohortStats::top_k(&[0.0, 10.0, 1.0, 8.0, -4.0], 2).unwrap();
    assert_eq!(s.mean, 9.0);
    assert!((s.std - 2f64.sqrt()).abs() < 1e-15);
}
