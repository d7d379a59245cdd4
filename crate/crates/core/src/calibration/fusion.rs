use log::debug;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionModel {
    pub weights: Vec<f64>,
    pub offset: f64,
}

impl FusionModel {
    pub fn apply(&self, scores: &[f64]) -> Result<f64> {
        if scores.len() != self.weights.len() {
            return Err(Error::LengthMismatch {
                what: "fusion inputs".into(),
                expected: self.weights.len(),
                actual: scores.len(),
            });
        }
        Ok(self.weights.iter().zip(scores).map(|(w, s)| w * s).sum::<f64>() + self.offset)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    /// Effective target prior of the training objective.
    pub prior: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            prior: 0.5,
            max_iters: 200,
            grad_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionFit {
    pub model: FusionModel,
    pub objective_trace: Vec<f64>,
    pub grad_norm: f64,
    pub iterations: usize,
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct Problem<'a> {
    x: &'a DMatrix<f64>,
    y: &'a [bool],
    /// Per-trial weight: prior / N_tar for targets, (1 − prior) / N_non otherwise.
    w: Vec<f64>,
    prior_logit: f64,
}

impl Problem<'_> {
    fn design(&self, i: usize) -> DVector<f64> {
        let k = self.x.ncols();
        DVector::from_fn(k + 1, |j, _| if j < k { self.x[(i, j)] } else { 1.0 })
    }

    /// Prior-weighted cross-entropy of log-odds `s + logit(prior)`.
    fn value(&self, theta: &DVector<f64>) -> f64 {
        (0..self.x.nrows())
            .map(|i| {
                let a = self.design(i).dot(theta) + self.prior_logit;
                self.w[i] * if self.y[i] { softplus(-a) } else { softplus(a) }
            })
            .sum()
    }

    fn grad_hess(&self, theta: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let d = theta.len();
        let mut g = DVector::zeros(d);
        let mut h = DMatrix::zeros(d, d);
        for i in 0..self.x.nrows() {
            let z = self.design(i);
            let p = sigmoid(z.dot(theta) + self.prior_logit);
            let t = if self.y[i] { 1.0 } else { 0.0 };
            g += &z * (self.w[i] * (p - t));
            h += &z * z.transpose() * (self.w[i] * p * (1.0 - p));
        }
        (g, h)
    }
}

/// Logistic-regression fusion by damped Newton iterations with backtracking,
/// started from zero weights. Subsystems with identical score columns are
/// fitted as one and share its weight equally. `scores` is
/// `trials × subsystems`.
pub fn fusion_fit(scores: &DMatrix<f64>, labels: &[bool], cfg: &FusionConfig) -> Result<FusionFit> {
    let k = scores.ncols();
    if k < 2 {
        return Err(Error::InvalidInput(format!("fusion needs at least two subsystems, got {k}")));
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for j in 0..k {
        match groups.iter_mut().find(|g| scores.column(g[0]) == scores.column(j)) {
            Some(g) => g.push(j),
            None => groups.push(vec![j]),
        }
    }
    if groups.len() == k {
        return fit_unique(scores, labels, cfg);
    }
    let reps: Vec<usize> = groups.iter().map(|g| g[0]).collect();
    let reduced = scores.select_columns(&reps);
    let mut fit = fit_unique(&reduced, labels, cfg)?;
    let mut weights = vec![0.0; k];
    for (g, w) in groups.iter().zip(&fit.model.weights) {
        for &j in g {
            weights[j] = w / g.len() as f64;
        }
    }
    fit.model.weights = weights;
    Ok(fit)
}

fn fit_unique(scores: &DMatrix<f64>, labels: &[bool], cfg: &FusionConfig) -> Result<FusionFit> {
    let (n, k) = scores.shape();
    if labels.len() != n {
        return Err(Error::LengthMismatch {
            what: "fusion labels".into(),
            expected: n,
            actual: labels.len(),
        });
    }
    let nt = labels.iter().filter(|&&l| l).count();
    if nt == 0 || nt == n {
        return Err(Error::SingleClass("fusion needs targets and nontargets".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidInput("non-finite score".into()));
    }
    if !(cfg.prior > 0.0 && cfg.prior < 1.0) {
        return Err(Error::Config(format!("fusion prior must lie in (0, 1), got {}", cfg.prior)));
    }
    let nn = n - nt;
    let prob = Problem {
        x: scores,
        y: labels,
        w: labels
            .iter()
            .map(|&l| if l { cfg.prior / nt as f64 } else { (1.0 - cfg.prior) / nn as f64 })
            .collect(),
        prior_logit: (cfg.prior / (1.0 - cfg.prior)).ln(),
    };
    let mut theta = DVector::zeros(k + 1);
    let mut f = prob.value(&theta);
    let mut trace = vec![f];
    for it in 0..cfg.max_iters {
        let (g, h) = prob.grad_hess(&theta);
        let gn = g.norm();
        if gn < cfg.grad_tol {
            return Ok(finish(theta, trace, gn, it));
        }
        // a relative ridge keeps the step defined when subsystems are collinear
        let ridge = 1e-10 * (h.trace() / h.nrows() as f64).max(1e-300);
        let hr = &h + DMatrix::identity(k + 1, k + 1) * ridge;
        let step = hr
            .clone()
            .cholesky()
            .map(|c| c.solve(&g))
            .unwrap_or_else(|| g.clone());
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = &theta - &step * t;
            let fc = prob.value(&cand);
            if fc <= f {
                theta = cand;
                f = fc;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        trace.push(f);
        debug!("fusion iteration {}: objective {f:.12}, |g| {gn:.3e}", it + 1);
        if !accepted {
            let (g, _) = prob.grad_hess(&theta);
            if g.norm() < cfg.grad_tol {
                return Ok(finish(theta, trace, g.norm(), it + 1));
            }
            return Err(Error::NoConvergence {
                iterations: it + 1,
                message: format!("line search stalled at objective {f}, gradient norm {:.3e}", g.norm()),
            });
        }
    }
    let (g, _) = prob.grad_hess(&theta);
    if g.norm() < cfg.grad_tol {
        return Ok(finish(theta, trace, g.norm(), cfg.max_iters));
    }
    Err(Error::NoConvergence {
        iterations: cfg.max_iters,
        message: format!(
            "gradient norm {:.3e} above {:.1e}; objective {f}, weights {:?}",
            g.norm(),
            cfg.grad_tol,
            theta.as_slice()
        ),
    })
}

fn finish(theta: DVector<f64>, trace: Vec<f64>, grad_norm: f64, iterations: usize) -> FusionFit {
    let k = theta.len() - 1;
    FusionFit {
        model: FusionModel {
            weights: theta.rows(0, k).iter().copied().collect(),
            offset: theta[k],
        },
        objective_trace: trace,
        grad_norm,
        iterations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn identical_subsystems_get_equal_weights() {
        let s = [-2.0, -1.0, 0.5, 1.0, 2.5, -0.3, 0.2, 1.7];
        let y = [false, false, true, false, true, false, true, true];
        let x = DMatrix::from_fn(s.len(), 2, |i, _| s[i]);
        let fit = fusion_fit(&x, &y, &FusionConfig::default()).unwrap();
        assert_eq!(fit.model.weights[0], fit.model.weights[1]);
        assert!(fit.objective_trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn noise_subsystem_gets_small_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 4000;
        let y: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let x = DMatrix::from_fn(n, 2, |i, j| {
            let z: f64 = StandardNormal.sample(&mut rng);
            if j == 0 {
                z + if y[i] { 1.5 } else { -1.5 }
            } else {
                z
            }
        });
        let fit = fusion_fit(&x, &y, &FusionConfig::default()).unwrap();
        assert!(fit.model.weights[1].abs() < 0.1 * fit.model.weights[0].abs());
    }

    #[test]
    fn recovers_generating_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 10000;
        let x = DMatrix::from_fn(n, 2, |_, _| StandardNormal.sample(&mut rng));
        let y: Vec<bool> = (0..n)
            .map(|i| rng.random::<f64>() < sigmoid(2.0 * x[(i, 0)] + 3.0 * x[(i, 1)] - 1.0))
            .collect();
        // prior-weighted objective shifts only the offset; the weights stay put
        let fit = fusion_fit(&x, &y, &FusionConfig::default()).unwrap();
        assert!((fit.model.weights[0] - 2.0).abs() < 0.2, "{:?}", fit.model);
        assert!((fit.model.weights[1] - 3.0).abs() < 0.3, "{:?}", fit.model);
    }

    #[test]
    fn needs_two_subsystems_and_classes() {
        let x = DMatrix::from_element(3, 1, 1.0);
        assert!(fusion_fit(&x, &[true, false, true], &FusionConfig::default()).is_err());
        let x = DMatrix::from_element(3, 2, 1.0);
        assert!(matches!(
            fusion_fit(&x, &[true, true, true], &FusionConfig::default()),
            Err(Error::SingleClass(_))
        ));
    }
}
