use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Posterior clamp applied before converting to log-odds.
pub const POSTERIOR_CLAMP: f64 = 1e-6;

/// Monotone score-to-LLR map. Knots are the score ranges of the isotonic
/// blocks; the map is constant within a block, linear between adjacent
/// blocks, and clamped outside the training range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationMap {
    pub breakpoints: Vec<f64>,
    pub values: Vec<f64>,
}

struct Block {
    lo: f64,
    hi: f64,
    sum: f64,
    weight: f64,
}

impl Block {
    fn mean(&self) -> f64 {
        self.sum / self.weight
    }
}

fn check(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch {
            what: "calibration labels".into(),
            expected: scores.len(),
            actual: labels.len(),
        });
    }
    if !labels.iter().any(|&l| l) || labels.iter().all(|&l| l) {
        return Err(Error::SingleClass("calibration needs targets and nontargets".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidInput("non-finite score".into()));
    }
    Ok(())
}

/// Pool-adjacent-violators over score-sorted labels; equal scores start in
/// one block so the fit is a function of the score.
fn blocks(scores: &[f64], labels: &[bool]) -> Vec<Block> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut stack: Vec<Block> = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let v = scores[order[i]];
        let mut b = Block {
            lo: v,
            hi: v,
            sum: 0.0,
            weight: 0.0,
        };
        while i < order.len() && scores[order[i]] == v {
            b.sum += labels[order[i]] as u8 as f64;
            b.weight += 1.0;
            i += 1;
        }
        while let Some(top) = stack.last() {
            if top.mean() <= b.mean() {
                break;
            }
            let top = stack.pop().unwrap();
            b = Block {
                lo: top.lo,
                hi: b.hi,
                sum: top.sum + b.sum,
                weight: top.weight + b.weight,
            };
        }
        stack.push(b);
    }
    stack
}

/// Isotonic (non-decreasing) least-squares fit of the 0/1 labels on the
/// scores, returned in input order.
pub fn pav_posteriors(scores: &[f64], labels: &[bool]) -> Result<Vec<f64>> {
    check(scores, labels)?;
    let bs = blocks(scores, labels);
    Ok(scores
        .iter()
        .map(|&s| {
            let i = bs.partition_point(|b| b.hi < s);
            bs[i].mean()
        })
        .collect())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn pav_fit(scores: &[f64], labels: &[bool]) -> Result<CalibrationMap> {
    check(scores, labels)?;
    let prior = labels.iter().filter(|&&l| l).count() as f64 / labels.len() as f64;
    let prior_logit = logit(prior);
    let mut map = CalibrationMap {
        breakpoints: Vec::new(),
        values: Vec::new(),
    };
    for b in blocks(scores, labels) {
        let p = b.mean().clamp(POSTERIOR_CLAMP, 1.0 - POSTERIOR_CLAMP);
        let llr = logit(p) - prior_logit;
        map.breakpoints.push(b.lo);
        map.values.push(llr);
        if b.hi > b.lo {
            map.breakpoints.push(b.hi);
            map.values.push(llr);
        }
    }
    Ok(map)
}

impl CalibrationMap {
    pub fn apply(&self, score: f64) -> f64 {
        let x = &self.breakpoints;
        let y = &self.values;
        if score <= x[0] {
            return y[0];
        }
        if score >= x[x.len() - 1] {
            return y[y.len() - 1];
        }
        let i = x.partition_point(|&b| b <= score);
        let (x0, x1, y0, y1) = (x[i - 1], x[i], y[i - 1], y[i]);
        if score == x0 {
            return y0;
        }
        y0 + (y1 - y0) * (score - x0) / (x1 - x0)
    }
}

pub fn pav_apply(map: &CalibrationMap, score: f64) -> f64 {
    map.apply(score)
}
