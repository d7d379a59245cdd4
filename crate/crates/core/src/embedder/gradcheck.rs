use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::loss::{objective_weighted, LossConfig, LossKind, Sample};
use super::network::Network;
use super::params::Params;
use crate::error::{Error, Result};
use crate::netspec::NetSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradCheckConfig {
    /// Width multiplier applied to the specification.
    pub width: f64,
    pub frames: usize,
    pub feat_dim: usize,
    pub classes: usize,
    pub senones: usize,
    pub samples_per_tensor: usize,
    pub step: f64,
    /// Denominator floor for the relative error, so that vanishing gradients
    /// are judged on absolute agreement.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            width: 1.0 / 64.0,
            frames: 12,
            feat_dim: 8,
            classes: 4,
            senones: 5,
            samples_per_tensor: 3,
            step: 1e-5,
            floor: 1e-5,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
    /// Probes whose perturbation flipped a rectifier and were excluded.
    pub skipped: usize,
    pub per_tensor: Vec<(String, f64)>,
}

/// Compares `analytic` with central differences of `f` on up to
/// `samples_per_tensor` entries per tensor. `f` returns the loss and a
/// fingerprint of the piecewise-linear region; probes whose fingerprint
/// differs from the unperturbed one are skipped.
pub fn check_gradient<F>(
    params: &Params,
    analytic: &Params,
    f: F,
    samples_per_tensor: usize,
    step: f64,
    floor: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&Params) -> Result<(f64, u64)>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, base_sig) = f(params)?;
    let mut report = GradCheckReport::default();
    let mut probe = params.clone();
    for (name, t) in params.iter() {
        let k = samples_per_tensor.min(t.len());
        let mut worst = 0.0f64;
        for idx in sample(&mut rng, t.len(), k) {
            let orig = t[idx];
            probe.get_mut(name).unwrap()[idx] = orig + step;
            let (lp, sp) = f(&probe)?;
            probe.get_mut(name).unwrap()[idx] = orig - step;
            let (lm, sm) = f(&probe)?;
            probe.get_mut(name).unwrap()[idx] = orig;
            if sp != base_sig || sm != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * step);
            let a = analytic.get(name).map_or(0.0, |g| g[idx]);
            let rel = (a - numeric).abs() / (a.abs().max(numeric.abs()).max(floor));
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = format!("{name}[{idx}] analytic {a:.6e} numeric {numeric:.6e}");
            }
            worst = worst.max(rel);
        }
        report.per_tensor.push((name.clone(), worst));
    }
    Ok(report)
}

/// Builds a small random instance of `spec`, scaled by `cfg.width`, and
/// checks the full objective (speaker loss plus any frame-level heads).
pub fn grad_check(spec: &NetSpec, loss: &LossConfig, cfg: &GradCheckConfig, seed: u64) -> Result<GradCheckReport> {
    loss.validate()?;
    if cfg.frames == 0 || cfg.feat_dim == 0 || cfg.classes < 2 {
        return Err(Error::Config("grad check needs frames, features and >= 2 classes".into()));
    }
    let mut small = spec.scaled(cfg.width);
    let tap_branch = small.tap.branch.clone();
    small.classes.insert(tap_branch.clone(), cfg.classes);
    for (b, n) in small.classes.iter_mut() {
        if *b != tap_branch {
            *n = cfg.senones;
        }
    }
    let mut net = Network::init(small, cfg.feat_dim, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let bias = Normal::new(0.0, 0.1).unwrap();
    for (name, t) in net.params.iter_mut() {
        if name.ends_with(".b") {
            t.iter_mut().for_each(|v| *v = bias.sample(&mut rng));
        }
    }
    let feats = DMatrix::from_fn(cfg.frames, cfg.feat_dim, |_, _| StandardNormal.sample(&mut rng));
    let speaker = rng.random_range(0..cfg.classes);
    let labels: Vec<usize> = (0..cfg.frames).map(|_| rng.random_range(0..cfg.senones)).collect();
    let phonetic = if net.plan.heads.is_empty() { 0.0 } else { 1.0 };
    let lambda = if loss.kind == LossKind::ASoftmax { loss.anneal.lambda_min } else { 0.0 };
    let sample_of = || Sample {
        feats: &feats,
        speaker,
        frame_labels: Some(&labels),
    };
    let mut analytic = Params::new();
    objective_weighted(&net, sample_of(), loss, lambda, 1.0, phonetic, Some(&mut analytic))?;
    check_gradient(
        &net.params,
        &analytic,
        |p| {
            let probe = Network {
                spec: net.spec.clone(),
                plan: net.plan.clone(),
                params: p.clone(),
            };
            let (t, fwd) = objective_weighted(&probe, sample_of(), loss, lambda, 1.0, phonetic, None)?;
            Ok((t.total, fwd.kink_signature))
        },
        cfg.samples_per_tensor,
        cfg.step,
        cfg.floor,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netspec::{builtin, BUILTIN_NAMES};

    #[test]
    fn linear_least_squares_is_exact() {
        // L = ½‖W x − y‖², dL/dW = (W x − y) xᵀ
        let x = nalgebra::DVector::from_vec(vec![0.3, -1.2, 2.0]);
        let y = nalgebra::DVector::from_vec(vec![1.0, 0.5]);
        let mut p = Params::new();
        p.insert("w", DMatrix::from_row_slice(2, 3, &[0.1, 0.2, -0.3, 0.4, -0.5, 0.6]));
        let r = p.tensor("w") * &x - &y;
        let mut g = Params::new();
        g.insert("w", &r * x.transpose());
        let report = check_gradient(
            &p,
            &g,
            |p| Ok((0.5 * (p.tensor("w") * &x - &y).norm_squared(), 0)),
            6,
            1e-3,
            1e-12,
            1,
        )
        .unwrap();
        assert_eq!(report.checked, 6);
        assert!(report.max_rel_error < 1e-7, "{report:?}");
    }

    #[test]
    fn builtins_pass_at_reduced_width() {
        for name in BUILTIN_NAMES {
            let spec = builtin(name).unwrap();
            let cfg = GradCheckConfig::default();
            let r = grad_check(&spec, &LossConfig::am_softmax(), &cfg, 7).unwrap();
            assert!(r.checked > 0);
            assert!(r.max_rel_error < 1e-4, "{name}: {} ({})", r.max_rel_error, r.worst);
        }
    }

    #[test]
    fn other_losses_pass() {
        let spec = builtin("etdnn").unwrap();
        for loss in [LossConfig::softmax(), LossConfig::a_softmax()] {
            let r = grad_check(&spec, &loss, &GradCheckConfig::default(), 3).unwrap();
            assert!(r.max_rel_error < 1e-4, "{:?}: {}", loss.kind, r.worst);
        }
    }
}
