mod common;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use xvec::calibration::{act_dcf, eer, fusion_fit, min_dcf, min_dcf_points, pav_fit, pav_posteriors, DcfConfig, FusionConfig};

/// Random instance; half of them on a coarse grid so that scores tie.
fn instance(rng: &mut ChaCha8Rng, k: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rng.random_range(2..=1000);
    let nt = rng.random_range(1..n);
    let grid = k.is_multiple_of(2);
    let mut draw = |shift: f64| {
        let v: f64 = rng.random_range(-3.0..3.0) + shift;
        if grid {
            (v * 4.0).round() / 4.0
        } else {
            v
        }
    };
    let tar: Vec<f64> = (0..nt).map(|_| draw(1.0)).collect();
    let non: Vec<f64> = (0..n - nt).map(|_| draw(0.0)).collect();
    (tar, non)
}

#[test]
fn eer_and_min_dcf_match_threshold_sweep() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = DcfConfig::default();
    for k in 0..100 {
        let (tar, non) = instance(&mut rng, k);
        let e = eer(&tar, &non).unwrap();
        let want = common::eer_oracle(&tar, &non);
        assert!((e - want).abs() < 1e-9, "instance {k}: eer {e} vs {want}");
        let pts = min_dcf_points(&tar, &non, &cfg).unwrap();
        for (got, &p) in pts.iter().zip(&cfg.p_targets) {
            let want = common::min_dcf_oracle(&tar, &non, p);
            assert!((got - want).abs() < 1e-12, "instance {k}: min-DCF {got} vs {want}");
        }
    }
}

#[test]
fn metric_boundaries() {
    let cfg = DcfConfig::default();
    assert_eq!(eer(&[0.0, 1.0], &[0.0, 1.0]).unwrap(), 50.0);
    assert_eq!(eer(&[2.0, 3.0], &[0.0, 1.0]).unwrap(), 0.0);
    assert_eq!(min_dcf(&[2.0, 3.0], &[0.0, 1.0], &cfg).unwrap(), 0.0);
    assert_eq!(min_dcf(&[1.0; 4], &[1.0; 6], &cfg).unwrap(), 1.0);
}

#[test]
fn pav_is_the_isotonic_optimum_for_small_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut checked = 0;
    for _ in 0..2000 {
        let n = rng.random_range(2..=8);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        if labels.iter().all(|&l| l) || !labels.iter().any(|&l| l) {
            continue;
        }
        let post = pav_posteriors(&scores, &labels).unwrap();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
        let y: Vec<f64> = order.iter().map(|&i| labels[i] as u8 as f64).collect();
        let want = common::isotonic_oracle(&y);
        for (j, &i) in order.iter().enumerate() {
            assert!((post[i] - want[j]).abs() < 1e-12, "{scores:?} {labels:?}");
        }
        checked += 1;
    }
    assert!(checked > 1000);
}

#[test]
fn pav_pools_a_violating_pair_to_zero_llr() {
    let m = pav_fit(&[1.0, 2.0], &[true, false]).unwrap();
    assert!(m.values.iter().all(|&v| v.abs() < 1e-12));
}

#[test]
fn calibrated_scores_have_small_act_min_gap() {
    // x ~ N(±d²/2, d²) is its own log-likelihood ratio
    let d2: f64 = 4.0;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tar_d = Normal::new(d2 / 2.0, d2.sqrt()).unwrap();
    let non_d = Normal::new(-d2 / 2.0, d2.sqrt()).unwrap();
    let tar: Vec<f64> = (0..100_000).map(|_| tar_d.sample(&mut rng)).collect();
    let non: Vec<f64> = (0..100_000).map(|_| non_d.sample(&mut rng)).collect();
    let cfg = DcfConfig::default();
    let (act, min) = (act_dcf(&tar, &non, &cfg).unwrap(), min_dcf(&tar, &non, &cfg).unwrap());
    assert!(act >= min);
    assert!(act - min < 0.05, "act {act} min {min}");
    let shift = |v: &[f64]| v.iter().map(|x| x + 10.0).collect::<Vec<_>>();
    let (st, sn) = (shift(&tar), shift(&non));
    assert!(act_dcf(&st, &sn, &cfg).unwrap() > act);
    assert_eq!(min_dcf(&st, &sn, &cfg).unwrap(), min);
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn fusion_recovers_a_generating_linear_rule() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 10_000;
    let s = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-2.0..2.0));
    let labels: Vec<bool> = (0..n)
        .map(|i| rng.random_bool(sigmoid(2.0 * s[(i, 0)] + 3.0 * s[(i, 1)] - 1.0)))
        .collect();
    let fit = fusion_fit(&s, &labels, &FusionConfig::default()).unwrap();
    let w = &fit.model.weights;
    assert!((w[0] - 2.0).abs() < 0.2 && (w[1] - 3.0).abs() < 0.3, "{w:?}");
    assert!(fit.grad_norm < 1e-8);
    for t in fit.objective_trace.windows(2) {
        assert!(t[1] <= t[0] + 1e-12);
    }
}

#[test]
fn fusion_ignores_a_noise_subsystem() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 4000;
    let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
    let s = DMatrix::from_fn(n, 2, |i, j| {
        let z: f64 = rng.random_range(-1.0..1.0);
        if j == 0 {
            if labels[i] {
                1.5 + z
            } else {
                -1.5 + z
            }
        } else {
            z
        }
    });
    let w = fusion_fit(&s, &labels, &FusionConfig::default()).unwrap().model.weights;
    assert!(w[1].abs() < 0.1 * w[0].abs(), "{w:?}");
}

#[test]
fn identical_subsystems_share_weight_equally() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 500;
    let labels: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
    let col: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { -1.0 } + rng.random_range(-1.5..1.5)).collect();
    let s = DMatrix::from_fn(n, 2, |i, _| col[i]);
    let w = fusion_fit(&s, &labels, &FusionConfig::default()).unwrap().model.weights;
    assert_eq!(w[0], w[1]);
}
