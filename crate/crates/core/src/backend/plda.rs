use std::f64::consts::PI;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::lda::scatter;
use super::{check_labeled, classes, length_norm};
use crate::error::{Error, Result};
use crate::linalg::{logdet_chol, mean_of, psd_project, ridge_cholesky, spd_inverse, symmetrize};

/// Two-covariance PLDA: speaker means `y ~ N(μ, Φ_b)`, observations
/// `x ~ N(y, Φ_w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PldaModel {
    pub mean: DVector<f64>,
    pub between: DMatrix<f64>,
    pub within: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub within_scale: f64,
    pub between_scale: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            within_scale: 0.75,
            between_scale: 0.25,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("within_scale", self.within_scale), ("between_scale", self.between_scale)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// Fitted model plus EM diagnostics.
#[derive(Debug, Clone)]
pub struct PldaFit {
    pub model: PldaModel,
    /// Marginal log-likelihood of the training data after initialization
    /// and after every iteration.
    pub log_likelihoods: Vec<f64>,
    /// Whether a covariance needed a ridge to stay positive definite.
    pub ridged: bool,
}

struct ClassStats {
    n: usize,
    mean: DVector<f64>,
    scatter: DMatrix<f64>,
}

fn class_stats(vectors: &[DVector<f64>], groups: &[Vec<usize>]) -> Vec<ClassStats> {
    groups
        .iter()
        .map(|g| {
            let members: Vec<DVector<f64>> = g.iter().map(|&i| vectors[i].clone()).collect();
            let mean = mean_of(&members);
            let dim = mean.len();
            let mut scatter = DMatrix::zeros(dim, dim);
            for x in &members {
                let d = x - &mean;
                scatter += &d * d.transpose();
            }
            ClassStats {
                n: g.len(),
                mean,
                scatter,
            }
        })
        .collect()
}

/// Log-density of all data under the model with speaker means integrated out.
fn marginal_ll(m: &PldaModel, stats: &[ClassStats]) -> Result<f64> {
    let d = m.mean.len() as f64;
    let (_, wch, _) = ridge_cholesky(&m.within)?;
    let w_logdet = logdet_chol(&wch);
    let mut total = 0.0;
    for s in stats {
        let n = s.n as f64;
        let cov = &m.between + &m.within / n;
        let (_, ch, _) = ridge_cholesky(&cov)?;
        let diff = &s.mean - &m.mean;
        let maha = diff.dot(&ch.solve(&diff));
        total += -0.5 * (d * (2.0 * PI).ln() + logdet_chol(&ch) + maha);
        if s.n > 1 {
            let tr = (wch.solve(&s.scatter)).trace();
            total += -0.5 * ((n - 1.0) * (d * (2.0 * PI).ln() + w_logdet) + tr) - 0.5 * d * n.ln();
        }
    }
    Ok(total)
}

/// Two-covariance PLDA by EM. Initialization splits the sample covariance
/// into its between- and within-class scatter around the global mean; a
/// singular part is ridged with a warning. Each iteration must not decrease
/// the marginal log-likelihood (relative tolerance 1e-9).
pub fn plda_fit(vectors: &[DVector<f64>], labels: &[usize], iters: usize) -> Result<PldaFit> {
    let dim = check_labeled(vectors, labels)?;
    let groups = classes(labels);
    if groups.len() < 2 {
        return Err(Error::SingleClass("PLDA needs at least two classes".into()));
    }
    let (mean, sw, sb) = scatter(vectors, &groups);
    let mut ridged = false;
    let mut repair = |m: &DMatrix<f64>, what: &str| -> Result<DMatrix<f64>> {
        let (fixed, _, r) = ridge_cholesky(m)?;
        if r {
            warn!("{what} covariance is degenerate; ridge added");
            ridged = true;
        }
        Ok(fixed)
    };
    let mut model = PldaModel {
        mean,
        between: repair(&sb, "between-class")?,
        within: repair(&sw, "within-class")?,
    };
    let stats = class_stats(vectors, &groups);
    let total_n = vectors.len() as f64;
    let k = stats.len() as f64;
    let mut lls = vec![marginal_ll(&model, &stats)?];
    for it in 0..iters {
        let b_inv = spd_inverse(&model.between)?;
        let w_inv = spd_inverse(&model.within)?;
        let b_inv_mu = &b_inv * &model.mean;
        let mut post_means = Vec::with_capacity(stats.len());
        let mut post_covs = Vec::with_capacity(stats.len());
        for s in &stats {
            let prec = &b_inv + &w_inv * s.n as f64;
            let cov = spd_inverse(&prec)?;
            let m = &cov * (&b_inv_mu + &w_inv * (&s.mean * s.n as f64));
            post_means.push(m);
            post_covs.push(cov);
        }
        let mu = mean_of(&post_means);
        let mut between = DMatrix::zeros(dim, dim);
        let mut within = DMatrix::zeros(dim, dim);
        for ((s, m), c) in stats.iter().zip(&post_means).zip(&post_covs) {
            let d = m - &mu;
            between += c + &d * d.transpose();
            // Σ_j (x_j − m)(x_j − m)ᵀ = S + n (x̄ − m)(x̄ − m)ᵀ
            let e = &s.mean - m;
            within += &s.scatter + (&e * e.transpose() + c) * s.n as f64;
        }
        model = PldaModel {
            mean: mu,
            between: repair(&symmetrize(&(between / k)), "between-class")?,
            within: repair(&symmetrize(&(within / total_n)), "within-class")?,
        };
        let ll = marginal_ll(&model, &stats)?;
        let prev = *lls.last().unwrap();
        debug!("PLDA EM iteration {}: log-likelihood {ll:.6}", it + 1);
        if ll < prev - 1e-9 * prev.abs().max(1.0) {
            return Err(Error::Numerical(format!(
                "PLDA EM log-likelihood decreased at iteration {}: {prev} -> {ll}",
                it + 1
            )));
        }
        lls.push(ll);
    }
    Ok(PldaFit {
        model,
        log_likelihoods: lls,
        ridged,
    })
}

/// Covariance-interpolation adaptation to unlabeled in-domain vectors: the
/// PSD part of the excess covariance `S − (Φ_b + Φ_w)` is added to each
/// covariance with its own weight, and the mean moves to the in-domain mean.
pub fn plda_adapt(m: &PldaModel, indomain: &[DVector<f64>], cfg: &AdaptConfig) -> Result<PldaModel> {
    cfg.validate()?;
    if indomain.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "adaptation needs at least two in-domain vectors, got {}",
            indomain.len()
        )));
    }
    let dim = m.mean.len();
    if let Some(bad) = indomain.iter().find(|v| v.len() != dim) {
        return Err(Error::LengthMismatch {
            what: "in-domain vector dimension".into(),
            expected: dim,
            actual: bad.len(),
        });
    }
    let mean = mean_of(indomain);
    let mut cov = DMatrix::zeros(dim, dim);
    for v in indomain {
        let d = v - &mean;
        cov += &d * d.transpose();
    }
    cov /= indomain.len() as f64;
    let excess = psd_project(&(cov - &m.between - &m.within));
    Ok(PldaModel {
        mean,
        between: symmetrize(&(&m.between + &excess * cfg.between_scale)),
        within: symmetrize(&(&m.within + &excess * cfg.within_scale)),
    })
}

/// Precomputed closed-form verification scorer:
/// `LLR = ½ eᵀQe + ½ tᵀQt + eᵀPt + c` on centered vectors.
#[derive(Debug, Clone)]
pub struct PldaScorer {
    mean: DVector<f64>,
    q: DMatrix<f64>,
    p: DMatrix<f64>,
    constant: f64,
}

impl PldaScorer {
    pub fn new(m: &PldaModel) -> Result<Self> {
        let total = &m.between + &m.within;
        let (_, tch, _) = ridge_cholesky(&total)?;
        let t_inv = symmetrize(&tch.inverse());
        let schur = symmetrize(&(&total - &m.between * &t_inv * &m.between));
        let (_, sch, _) = ridge_cholesky(&schur)?;
        let s_inv = symmetrize(&sch.inverse());
        Ok(Self {
            mean: m.mean.clone(),
            q: &t_inv - &s_inv,
            p: &t_inv * &m.between * &s_inv,
            constant: 0.5 * (logdet_chol(&tch) - logdet_chol(&sch)),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn score(&self, enroll: &DVector<f64>, test: &DVector<f64>) -> Result<f64> {
        for v in [enroll, test] {
            if v.len() != self.dim() {
                return Err(Error::LengthMismatch {
                    what: "PLDA input".into(),
                    expected: self.dim(),
                    actual: v.len(),
                });
            }
        }
        let e = enroll - &self.mean;
        let t = test - &self.mean;
        Ok(0.5 * e.dot(&(&self.q * &e)) + 0.5 * t.dot(&(&self.q * &t)) + e.dot(&(&self.p * &t)) + self.constant)
    }
}

/// Same-speaker versus different-speaker log-likelihood ratio.
pub fn plda_score(m: &PldaModel, enroll: &DVector<f64>, test: &DVector<f64>) -> Result<f64> {
    PldaScorer::new(m)?.score(enroll, test)
}

/// Multi-session enrollment: the mean of the length-normalized vectors.
pub fn enroll_mean(vectors: &[DVector<f64>]) -> Result<DVector<f64>> {
    if vectors.is_empty() {
        return Err(Error::EmptyInput("no enrollment vectors".into()));
    }
    let normed: Vec<_> = vectors.iter().map(length_norm).collect::<Result<_>>()?;
    Ok(mean_of(&normed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn unit_1d() -> PldaModel {
        PldaModel {
            mean: DVector::zeros(1),
            between: DMatrix::identity(1, 1),
            within: DMatrix::identity(1, 1),
        }
    }

    #[test]
    fn one_dimensional_closed_form() {
        let s = plda_score(&unit_1d(), &DVector::zeros(1), &DVector::zeros(1)).unwrap();
        assert!((s - 0.5 * (4.0f64 / 3.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn vanishing_between_gives_zero() {
        let mut m = unit_1d();
        m.between[(0, 0)] = 1e-12;
        let s = plda_score(&m, &DVector::from_vec(vec![1.3]), &DVector::from_vec(vec![-0.4])).unwrap();
        assert!(s.abs() < 1e-9);
    }

    #[test]
    fn dimension_mismatch() {
        assert!(matches!(
            plda_score(&unit_1d(), &DVector::zeros(2), &DVector::zeros(1)),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn zero_iterations_returns_scatter_split() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v: Vec<DVector<f64>> = (0..30).map(|_| DVector::from_fn(3, |_, _| StandardNormal.sample(&mut rng))).collect();
        let l: Vec<usize> = (0..30).map(|i| i % 5).collect();
        let fit = plda_fit(&v, &l, 0).unwrap();
        let groups = classes(&l);
        let (mean, sw, sb) = scatter(&v, &groups);
        assert_eq!(fit.model.mean, mean);
        assert!((&fit.model.within - sw).amax() < 1e-15);
        assert!((&fit.model.between - sb).amax() < 1e-15);
        assert_eq!(fit.log_likelihoods.len(), 1);
    }

    #[test]
    fn singletons_trigger_ridge() {
        let v: Vec<DVector<f64>> = (0..6).map(|i| DVector::from_vec(vec![i as f64, (i * i) as f64 * 0.1])).collect();
        let l: Vec<usize> = (0..6).collect();
        let fit = plda_fit(&v, &l, 3).unwrap();
        assert!(fit.ridged);
    }

    #[test]
    fn adaptation_with_zero_scales_only_moves_mean() {
        let m = PldaModel {
            mean: DVector::zeros(2),
            between: DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]),
            within: DMatrix::identity(2, 2),
        };
        let data = vec![DVector::from_vec(vec![5.0, 1.0]), DVector::from_vec(vec![-1.0, 3.0]), DVector::from_vec(vec![2.0, -9.0])];
        let cfg = AdaptConfig {
            within_scale: 0.0,
            between_scale: 0.0,
        };
        let a = plda_adapt(&m, &data, &cfg).unwrap();
        assert_eq!(a.between, m.between);
        assert_eq!(a.within, m.within);
        assert_eq!(a.mean, DVector::from_vec(vec![2.0, -5.0 / 3.0]));
        assert!(plda_adapt(&m, &data[..1], &cfg).is_err());
        let bad = AdaptConfig {
            within_scale: 1.5,
            between_scale: 0.0,
        };
        assert!(matches!(plda_adapt(&m, &data, &bad), Err(Error::Config(_))));
    }
}
