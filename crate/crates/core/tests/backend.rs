mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xvec::backend::{lda_fit, length_norm, plda_adapt, plda_fit, plda_score, AdaptConfig, PldaModel};
use xvec::linalg::sym_eigen_desc;
use xvec::toy::gen_toy_embeddings;

fn diag(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_column_slice(v))
}

fn reference_2d() -> PldaModel {
    PldaModel {
        mean: DVector::zeros(2),
        between: diag(&[4.0, 1.0]),
        within: DMatrix::identity(2, 2),
    }
}

#[test]
fn plda_recovers_between_class_eigenvalues() {
    let data = gen_toy_embeddings(&reference_2d(), 500, 10, 17).unwrap();
    let fit = plda_fit(&data.vectors, &data.labels, 10).unwrap();
    let (vals, _) = sym_eigen_desc(&fit.model.between);
    for (got, want) in vals.iter().zip([4.0, 1.0]) {
        assert!((got - want).abs() / want < 0.15, "eigenvalue {got} vs {want}");
    }
}

#[test]
fn em_log_likelihood_never_decreases() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut next = || rng.random_range(-1.0..1.0);
    let m = PldaModel {
        mean: DVector::from_fn(5, |_, _| next()),
        between: common::random_spd(5, 0.5, &mut next),
        within: common::random_spd(5, 0.2, &mut next),
    };
    let data = gen_toy_embeddings(&m, 60, 4, 8).unwrap();
    let fit = plda_fit(&data.vectors, &data.labels, 20).unwrap();
    assert_eq!(fit.log_likelihoods.len(), 21);
    for w in fit.log_likelihoods.windows(2) {
        assert!(w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0), "{} -> {}", w[0], w[1]);
    }
}

#[test]
fn one_dimensional_closed_form() {
    let m = PldaModel {
        mean: DVector::zeros(1),
        between: diag(&[1.0]),
        within: diag(&[1.0]),
    };
    let zero = DVector::zeros(1);
    let s = plda_score(&m, &zero, &zero).unwrap();
    assert!((s - 0.5 * (4.0f64 / 3.0).ln()).abs() < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn score_matches_joint_gaussian(d in 1usize..=8, seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut next = || rng.random_range(-1.0..1.0);
        let m = PldaModel {
            mean: DVector::from_fn(d, |_, _| next()),
            between: common::random_spd(d, 0.3, &mut next),
            within: common::random_spd(d, 0.3, &mut next),
        };
        let e = DVector::from_fn(d, |_, _| 2.0 * next());
        let t = DVector::from_fn(d, |_, _| 2.0 * next());
        let got = plda_score(&m, &e, &t).unwrap();
        let want = common::plda_oracle(&m, &e, &t);
        prop_assert!((got - want).abs() < 1e-8, "{} vs {}", got, want);
        // symmetric in its arguments
        prop_assert!((got - plda_score(&m, &t, &e).unwrap()).abs() < 1e-10);
    }
}

#[test]
fn adaptation_to_own_distribution_is_nearly_identity() {
    let m = reference_2d();
    let indomain = gen_toy_embeddings(&m, 2000, 5, 99).unwrap();
    let cfg = AdaptConfig {
        within_scale: 0.5,
        between_scale: 0.5,
    };
    let a = plda_adapt(&m, &indomain.vectors, &cfg).unwrap();
    let scale = (&m.between + &m.within).norm();
    let delta = (&a.between - &m.between).norm() + (&a.within - &m.within).norm();
    assert!(delta < 0.05 * scale, "delta {delta} vs {scale}");
}

#[test]
fn adaptation_absorbs_inflated_in_domain_variance() {
    let m = reference_2d();
    // in-domain data with an extra 3 units of variance along the second axis
    let shifted = PldaModel {
        within: diag(&[1.0, 4.0]),
        ..m.clone()
    };
    let indomain = gen_toy_embeddings(&shifted, 2000, 5, 5).unwrap();
    let a = plda_adapt(&m, &indomain.vectors, &AdaptConfig::default()).unwrap();
    let total_gain = (a.between[(1, 1)] + a.within[(1, 1)]) - 2.0;
    assert!((total_gain - 3.0).abs() < 0.3, "gain {total_gain}");
    assert!((a.within[(1, 1)] - 1.0) / (a.between[(1, 1)] - 1.0) > 2.5);
}

#[test]
fn lda_keeps_the_discriminative_direction() {
    // speakers differ only along axis 0; axis 1 is within-speaker noise
    let m = PldaModel {
        mean: DVector::zeros(3),
        between: diag(&[9.0, 1e-6, 1e-6]),
        within: diag(&[1.0, 5.0, 1.0]),
    };
    let data = gen_toy_embeddings(&m, 200, 5, 1).unwrap();
    let lda = lda_fit(&data.vectors, &data.labels, 1).unwrap();
    let p = lda.projection.row(0);
    assert!(p[0].abs() > 10.0 * p[1].abs().max(p[2].abs()), "{p}");
}

#[test]
fn length_norm_is_unit() {
    let v = length_norm(&DVector::from_vec(vec![3.0, 4.0])).unwrap();
    assert!((v.norm() - 1.0).abs() < 1e-15);
    assert!(length_norm(&DVector::zeros(2)).is_err());
}

#[test]
fn generated_embeddings_have_model_covariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut next = || rng.random_range(-1.0..1.0);
    let m = PldaModel {
        mean: DVector::from_fn(3, |_, _| next()),
        between: common::random_spd(3, 0.5, &mut next),
        within: common::random_spd(3, 0.5, &mut next),
    };
    // one draw per speaker: each vector is an independent sample of N(μ, Φ_b + Φ_w)
    let e = gen_toy_embeddings(&m, 50_000, 1, 2).unwrap();
    let n = e.vectors.len() as f64;
    let mean = e.vectors.iter().fold(DVector::zeros(3), |a, v| a + v) / n;
    let cov = e.vectors.iter().fold(DMatrix::zeros(3, 3), |a, v| {
        let d = v - &mean;
        a + &d * d.transpose()
    }) / (n - 1.0);
    let total = &m.between + &m.within;
    assert!((&cov - &total).norm() < 0.05 * total.norm());
}
