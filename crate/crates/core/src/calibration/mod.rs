//! Score calibration (PAV), linear fusion and detection metrics, plus the
//! plain-text score and key formats.

mod fusion;
mod metrics;
mod pav;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use log::warn;

pub use fusion::{fusion_fit, FusionConfig, FusionFit, FusionModel};
pub use metrics::{act_dcf, act_dcf_points, eer, min_dcf, min_dcf_points, roc, DcfConfig};
pub use pav::{pav_apply, pav_fit, pav_posteriors, CalibrationMap, POSTERIOR_CLAMP};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrialLabel {
    Target,
    Nontarget,
    Unknown,
}

impl TrialLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            TrialLabel::Target => "target",
            TrialLabel::Nontarget => "nontarget",
            TrialLabel::Unknown => "unknown",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub enroll: String,
    pub test: String,
    pub score: f64,
    pub label: TrialLabel,
}

/// Scored trials with unique `(enroll, test)` pairs and finite scores.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrialScoreSet {
    trials: Vec<Trial>,
}

impl TrialScoreSet {
    pub fn new(trials: Vec<Trial>) -> Result<Self> {
        let mut seen = HashSet::new();
        for t in &trials {
            if !t.score.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "non-finite score for trial {} {}",
                    t.enroll, t.test
                )));
            }
            if !seen.insert((t.enroll.as_str(), t.test.as_str())) {
                return Err(Error::InvalidInput(format!("duplicate trial {} {}", t.enroll, t.test)));
            }
        }
        Ok(Self { trials })
    }

    pub fn trials(&self) -> &[Trial] {
        &self.trials
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    fn with_label(&self, l: TrialLabel) -> Vec<f64> {
        self.trials.iter().filter(|t| t.label == l).map(|t| t.score).collect()
    }

    pub fn target_scores(&self) -> Vec<f64> {
        self.with_label(TrialLabel::Target)
    }

    pub fn nontarget_scores(&self) -> Vec<f64> {
        self.with_label(TrialLabel::Nontarget)
    }

    /// Scores and target flags of the labeled trials, in file order.
    pub fn labeled(&self) -> (Vec<f64>, Vec<bool>) {
        self.trials
            .iter()
            .filter(|t| t.label != TrialLabel::Unknown)
            .map(|t| (t.score, t.label == TrialLabel::Target))
            .unzip()
    }

    pub fn map_scores(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            trials: self
                .trials
                .iter()
                .map(|t| Trial {
                    score: f(t.score),
                    ..t.clone()
                })
                .collect(),
        }
    }
}

/// Parses `<enroll> <test> <score>` lines.
pub fn parse_scores(text: &str, origin: &Path) -> Result<Vec<(String, String, f64)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let [e, t, s] = fields[..] else {
            return Err(Error::format(origin, format!("line {}: expected 3 fields", i + 1)));
        };
        let score: f64 = s
            .parse()
            .map_err(|_| Error::format(origin, format!("line {}: bad score `{s}`", i + 1)))?;
        out.push((e.to_string(), t.to_string(), score));
    }
    Ok(out)
}

/// Parses `<enroll> <test> <target|nontarget>` lines.
pub fn parse_key(text: &str, origin: &Path) -> Result<BTreeMap<(String, String), TrialLabel>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let [e, t, l] = fields[..] else {
            return Err(Error::format(origin, format!("line {}: expected 3 fields", i + 1)));
        };
        let label = match l {
            "target" => TrialLabel::Target,
            "nontarget" => TrialLabel::Nontarget,
            "unknown" => TrialLabel::Unknown,
            other => return Err(Error::format(origin, format!("line {}: bad label `{other}`", i + 1))),
        };
        out.insert((e.to_string(), t.to_string()), label);
    }
    Ok(out)
}

pub fn render_scores(set: &TrialScoreSet) -> String {
    let mut s = String::new();
    for t in set.trials() {
        s.push_str(&format!("{} {} {:.9}\n", t.enroll, t.test, t.score));
    }
    s
}

pub fn render_key(set: &TrialScoreSet) -> String {
    let mut s = String::new();
    for t in set.trials() {
        s.push_str(&format!("{} {} {}\n", t.enroll, t.test, t.label.as_str()));
    }
    s
}

/// Joins scores with a key. Scored trials absent from the key are listed in
/// a warning and excluded.
pub fn join_scores(scores: &[(String, String, f64)], key: &BTreeMap<(String, String), TrialLabel>) -> Result<(TrialScoreSet, Vec<String>)> {
    let mut trials = Vec::new();
    let mut missing = Vec::new();
    for (e, t, s) in scores {
        match key.get(&(e.clone(), t.clone())) {
            Some(&label) => trials.push(Trial {
                enroll: e.clone(),
                test: t.clone(),
                score: *s,
                label,
            }),
            None => missing.push(format!("{e} {t}")),
        }
    }
    if !missing.is_empty() {
        let shown: Vec<&str> = missing.iter().take(10).map(String::as_str).collect();
        warn!(
            "{} scored trials missing from key and excluded: {}{}",
            missing.len(),
            shown.join(", "),
            if missing.len() > 10 { ", ..." } else { "" }
        );
    }
    Ok((TrialScoreSet::new(trials)?, missing))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub targets: usize,
    pub nontargets: usize,
    pub eer_percent: f64,
    pub p_targets: Vec<f64>,
    pub min_dcf_points: Vec<f64>,
    pub min_dcf: f64,
    pub act_dcf_points: Vec<f64>,
    pub act_dcf: f64,
}

pub fn evaluate_set(set: &TrialScoreSet, cfg: &DcfConfig) -> Result<MetricReport> {
    let tar = set.target_scores();
    let non = set.nontarget_scores();
    let mins = min_dcf_points(&tar, &non, cfg)?;
    let acts = act_dcf_points(&tar, &non, cfg)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(MetricReport {
        targets: tar.len(),
        nontargets: non.len(),
        eer_percent: eer(&tar, &non)?,
        p_targets: cfg.p_targets.clone(),
        min_dcf: mean(&mins),
        act_dcf: mean(&acts),
        min_dcf_points: mins,
        act_dcf_points: acts,
    })
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "trials  target={} nontarget={}", self.targets, self.nontargets)?;
        writeln!(f, "EER(%)  {:.2}", self.eer_percent)?;
        for (p, (m, a)) in self.p_targets.iter().zip(self.min_dcf_points.iter().zip(&self.act_dcf_points)) {
            writeln!(f, "p_target={p}  min-DCF {m:.3}  act-DCF {a:.3}")?;
        }
        writeln!(f, "min-DCF {:.3}", self.min_dcf)?;
        write!(f, "act-DCF {:.3}", self.act_dcf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_and_key_round_trip() {
        let set = TrialScoreSet::new(vec![
            Trial {
                enroll: "a".into(),
                test: "b".into(),
                score: 1.25,
                label: TrialLabel::Target,
            },
            Trial {
                enroll: "a".into(),
                test: "c".into(),
                score: -0.5,
                label: TrialLabel::Nontarget,
            },
        ])
        .unwrap();
        let p = Path::new("mem");
        let scores = parse_scores(&render_scores(&set), p).unwrap();
        let key = parse_key(&render_key(&set), p).unwrap();
        let (joined, missing) = join_scores(&scores, &key).unwrap();
        assert!(missing.is_empty());
        assert_eq!(joined, set);
    }

    #[test]
    fn missing_key_entries_excluded() {
        let p = Path::new("mem");
        let scores = parse_scores("a b 1.0\na c 2.0\n", p).unwrap();
        let key = parse_key("a b target\n", p).unwrap();
        let (joined, missing) = join_scores(&scores, &key).unwrap();
        assert_eq!(joined.len(), 1);
        assert_eq!(missing, vec!["a c".to_string()]);
    }

    #[test]
    fn duplicates_rejected() {
        let t = Trial {
            enroll: "a".into(),
            test: "b".into(),
            score: 0.0,
            label: TrialLabel::Target,
        };
        assert!(TrialScoreSet::new(vec![t.clone(), t]).is_err());
    }

    #[test]
    fn report_shape() {
        let set = TrialScoreSet::new(
            (0..4)
                .map(|i| Trial {
                    enroll: format!("e{i}"),
                    test: "t".into(),
                    score: i as f64,
                    label: if i >= 2 { TrialLabel::Target } else { TrialLabel::Nontarget },
                })
                .collect(),
        )
        .unwrap();
        let r = evaluate_set(&set, &DcfConfig::default()).unwrap();
        assert_eq!(r.eer_percent, 0.0);
        assert_eq!(r.min_dcf, 0.0);
        let text = r.to_string();
        assert!(text.contains("EER(%)  0.00") && text.contains("min-DCF 0.000"));
    }
}
