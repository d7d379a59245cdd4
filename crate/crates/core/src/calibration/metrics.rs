use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DcfConfig {
    pub p_targets: Vec<f64>,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for DcfConfig {
    fn default() -> Self {
        Self {
            p_targets: vec![0.01, 0.005],
            c_miss: 1.0,
            c_fa: 1.0,
        }
    }
}

impl DcfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p_targets.is_empty() {
            return Err(Error::Config("at least one target prior is required".into()));
        }
        if let Some(p) = self.p_targets.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
            return Err(Error::Config(format!("target prior must lie in (0, 1), got {p}")));
        }
        if !(self.c_miss > 0.0 && self.c_fa > 0.0) {
            return Err(Error::Config("detection costs must be positive".into()));
        }
        Ok(())
    }

    /// Bayes decision threshold on LLRs for prior `p`.
    pub fn threshold(&self, p: f64) -> f64 {
        (self.c_fa * (1.0 - p) / (self.c_miss * p)).ln()
    }

    fn normalizer(&self, p: f64) -> f64 {
        (self.c_miss * p).min(self.c_fa * (1.0 - p))
    }

    fn cost(&self, p: f64, p_miss: f64, p_fa: f64) -> f64 {
        (self.c_miss * p * p_miss + self.c_fa * (1.0 - p) * p_fa) / self.normalizer(p)
    }
}

fn check(tar: &[f64], non: &[f64]) -> Result<()> {
    if tar.is_empty() || non.is_empty() {
        return Err(Error::SingleClass(format!(
            "metrics need both classes ({} targets, {} nontargets)",
            tar.len(),
            non.len()
        )));
    }
    if tar.iter().chain(non).any(|s| !s.is_finite()) {
        return Err(Error::InvalidInput("non-finite score".into()));
    }
    Ok(())
}

/// Operating points `(P_miss, P_fa)` for thresholds below every score, then
/// just above each distinct score in ascending order. A trial is accepted
/// when its score is at least the threshold.
pub fn roc(tar: &[f64], non: &[f64]) -> Result<Vec<(f64, f64)>> {
    check(tar, non)?;
    let mut all: Vec<(f64, bool)> = tar.iter().map(|&s| (s, true)).chain(non.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (nt, nn) = (tar.len() as f64, non.len() as f64);
    let mut points = vec![(0.0, 1.0)];
    let (mut misses, mut fas) = (0usize, non.len());
    let mut i = 0;
    while i < all.len() {
        let v = all[i].0;
        while i < all.len() && all[i].0 == v {
            if all[i].1 {
                misses += 1;
            } else {
                fas -= 1;
            }
            i += 1;
        }
        points.push((misses as f64 / nt, fas as f64 / nn));
    }
    Ok(points)
}

/// Equal error rate in percent, by linear interpolation between the two ROC
/// points where `P_miss − P_fa` changes sign.
pub fn eer(tar: &[f64], non: &[f64]) -> Result<f64> {
    let pts = roc(tar, non)?;
    for w in pts.windows(2) {
        let ((m1, f1), (m2, f2)) = (w[0], w[1]);
        if m1 - f1 <= 0.0 && m2 - f2 >= 0.0 {
            let denom = (m2 - m1) - (f2 - f1);
            let lambda = if denom == 0.0 { 0.0 } else { (f1 - m1) / denom };
            return Ok(100.0 * (m1 + lambda * (m2 - m1)));
        }
    }
    unreachable!("ROC starts at (0, 1) and ends at (1, 0)")
}

/// Normalized minimum detection cost for each target prior.
pub fn min_dcf_points(tar: &[f64], non: &[f64], cfg: &DcfConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let pts = roc(tar, non)?;
    Ok(cfg
        .p_targets
        .iter()
        .map(|&p| {
            pts.iter()
                .map(|&(m, f)| cfg.cost(p, m, f))
                .fold(f64::INFINITY, f64::min)
        })
        .collect())
}

/// Mean over the configured target priors of the normalized minimum cost.
pub fn min_dcf(tar: &[f64], non: &[f64], cfg: &DcfConfig) -> Result<f64> {
    let v = min_dcf_points(tar, non, cfg)?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Normalized cost at the Bayes threshold, treating scores as LLRs.
pub fn act_dcf_points(tar: &[f64], non: &[f64], cfg: &DcfConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    check(tar, non)?;
    Ok(cfg
        .p_targets
        .iter()
        .map(|&p| {
            let t = cfg.threshold(p);
            let p_miss = tar.iter().filter(|&&s| s < t).count() as f64 / tar.len() as f64;
            let p_fa = non.iter().filter(|&&s| s >= t).count() as f64 / non.len() as f64;
            cfg.cost(p, p_miss, p_fa)
        })
        .collect())
}

pub fn act_dcf(tar: &[f64], non: &[f64], cfg: &DcfConfig) -> Result<f64> {
    let v = act_dcf_points(tar, non, cfg)?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}
