use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::network::{ForwardOutput, Network};
use super::params::Params;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Softmax,
    AmSoftmax,
    ASoftmax,
}

/// `λ_t = max(λ_min, λ_0 (1 + γ t)^(-p))`, blending the angular target logit
/// with the plain one early in training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnealSchedule {
    pub lambda0: f64,
    pub gamma: f64,
    pub power: f64,
    pub lambda_min: f64,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        Self {
            lambda0: 1000.0,
            gamma: 1e-4,
            power: 1.0,
            lambda_min: 5.0,
        }
    }
}

impl AnnealSchedule {
    pub fn at(&self, step: usize) -> f64 {
        (self.lambda0 * (1.0 + self.gamma * step as f64).powf(-self.power)).max(self.lambda_min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Additive cosine margin for `am_softmax`, angular multiplier for `a_softmax`.
    pub margin: f64,
    pub scale: f64,
    /// Weight of the frame-level phonetic term.
    pub multitask_weight: f64,
    pub anneal: AnnealSchedule,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::am_softmax()
    }
}

impl LossConfig {
    pub fn softmax() -> Self {
        Self {
            kind: LossKind::Softmax,
            margin: 0.0,
            scale: 1.0,
            multitask_weight: 0.0,
            anneal: AnnealSchedule::default(),
        }
    }

    pub fn am_softmax() -> Self {
        Self {
            kind: LossKind::AmSoftmax,
            margin: 0.15,
            scale: 30.0,
            ..Self::softmax()
        }
    }

    pub fn a_softmax() -> Self {
        Self {
            kind: LossKind::ASoftmax,
            margin: 4.0,
            ..Self::softmax()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0) {
            return Err(Error::Config(format!("margin must be >= 0, got {}", self.margin)));
        }
        if !(self.scale > 0.0) {
            return Err(Error::Config(format!("scale must be > 0, got {}", self.scale)));
        }
        if !(self.multitask_weight >= 0.0) {
            return Err(Error::Config(format!(
                "multitask weight must be >= 0, got {}",
                self.multitask_weight
            )));
        }
        if self.kind == LossKind::ASoftmax {
            angular_margin(self.margin)?;
        }
        Ok(())
    }
}

fn angular_margin(m: f64) -> Result<u32> {
    if m.fract() != 0.0 || !(1.0..=4.0).contains(&m) {
        return Err(Error::Config(format!("angular margin must be 1, 2, 3 or 4, got {m}")));
    }
    Ok(m as u32)
}

/// Loss value and gradients for one segment-level classification.
#[derive(Debug, Clone)]
pub struct SpeakerLoss {
    pub loss: f64,
    pub d_x: DVector<f64>,
    pub d_w: DMatrix<f64>,
    /// Scores used for the decision (logits or cosines).
    pub scores: DVector<f64>,
}

impl SpeakerLoss {
    pub fn predicted(&self) -> usize {
        self.scores.argmax().0
    }
}

fn check_inputs(x: &DVector<f64>, w: &DMatrix<f64>, label: usize) -> Result<()> {
    if w.ncols() != x.len() {
        return Err(Error::LengthMismatch {
            what: "classifier input".into(),
            expected: w.ncols(),
            actual: x.len(),
        });
    }
    if label >= w.nrows() {
        return Err(Error::InvalidInput(format!(
            "label {label} out of range for {} classes",
            w.nrows()
        )));
    }
    if !x.iter().chain(w.iter()).all(|v| v.is_finite()) {
        return Err(Error::Numerical("non-finite classifier input".into()));
    }
    Ok(())
}

/// Cross-entropy of `softmax(z)` at `label`, and `softmax(z) - onehot`.
fn ce(z: &DVector<f64>, label: usize) -> (f64, DVector<f64>) {
    let (imax, mx) = z.argmax();
    let e = z.map(|v| (v - mx).exp());
    // ln Σ e with the unit term split off, exact for tiny losses
    let rest: f64 = e.iter().enumerate().filter(|(i, _)| *i != imax).map(|(_, v)| v).sum();
    let mut g = &e / (1.0 + rest);
    let loss = (mx - z[label]) + rest.ln_1p();
    g[label] -= 1.0;
    (loss, g)
}

const NORM_FLOOR: f64 = 1e-12;

struct Cosines {
    xn: f64,
    x_hat: DVector<f64>,
    wn: DVector<f64>,
    w_hat: DMatrix<f64>,
    cos: DVector<f64>,
}

fn cosines(x: &DVector<f64>, w: &DMatrix<f64>) -> Cosines {
    let xn = x.norm().max(NORM_FLOOR);
    let x_hat = x / xn;
    let wn = DVector::from_iterator(w.nrows(), w.row_iter().map(|r| r.norm().max(NORM_FLOOR)));
    let mut w_hat = w.clone();
    for (i, mut r) in w_hat.row_iter_mut().enumerate() {
        r /= wn[i];
    }
    let cos = &w_hat * &x_hat;
    Cosines {
        xn,
        x_hat,
        wn,
        w_hat,
        cos,
    }
}

/// Backpropagates `dL/dcos_j` through the two normalizations.
fn cos_backward(c: &Cosines, d_cos: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let dim = c.x_hat.len();
    let mut d_x = DVector::zeros(dim);
    let mut d_w = DMatrix::zeros(c.w_hat.nrows(), dim);
    for j in 0..c.w_hat.nrows() {
        let g = d_cos[j];
        if g == 0.0 {
            continue;
        }
        let wj = c.w_hat.row(j).transpose();
        d_x += (&wj - &c.x_hat * c.cos[j]) * (g / c.xn);
        let dw = (&c.x_hat - &wj * c.cos[j]) * (g / c.wn[j]);
        d_w.row_mut(j).copy_from(&dw.transpose());
    }
    (d_x, d_w)
}

pub fn loss_softmax(x: &DVector<f64>, w: &DMatrix<f64>, label: usize) -> Result<SpeakerLoss> {
    check_inputs(x, w, label)?;
    let z = w * x;
    let (loss, g) = ce(&z, label);
    Ok(SpeakerLoss {
        loss,
        d_x: w.tr_mul(&g),
        d_w: &g * x.transpose(),
        scores: z,
    })
}

/// Additive-margin softmax on cosines between the length-normalized input
/// and length-normalized class rows.
pub fn loss_am_softmax(x: &DVector<f64>, w: &DMatrix<f64>, label: usize, m: f64, s: f64) -> Result<SpeakerLoss> {
    check_inputs(x, w, label)?;
    let c = cosines(x, w);
    let mut z = &c.cos * s;
    z[label] -= s * m;
    let (loss, g) = ce(&z, label);
    let (d_x, d_w) = cos_backward(&c, &(g * s));
    Ok(SpeakerLoss {
        loss,
        d_x,
        d_w,
        scores: c.cos,
    })
}

fn chebyshev(m: u32, c: f64) -> (f64, f64) {
    // T_m(c) and its derivative
    match m {
        1 => (c, 1.0),
        2 => (2.0 * c * c - 1.0, 4.0 * c),
        3 => (4.0 * c.powi(3) - 3.0 * c, 12.0 * c * c - 3.0),
        _ => (8.0 * c.powi(4) - 8.0 * c * c + 1.0, 32.0 * c.powi(3) - 16.0 * c),
    }
}

/// `ψ(θ) = (-1)^k cos(mθ) - 2k` for `θ ∈ [kπ/m, (k+1)π/m]`, as a function of
/// `cos θ`; returns `(ψ, dψ/dcosθ)`.
pub fn a_softmax_psi(cos: f64, m: u32) -> (f64, f64) {
    let c = cos.clamp(-1.0, 1.0);
    let theta = c.acos();
    let k = ((m as f64 * theta) / std::f64::consts::PI).floor().min(m as f64 - 1.0);
    let sign = if k as i64 % 2 == 0 { 1.0 } else { -1.0 };
    let (t, dt) = chebyshev(m, c);
    (sign * t - 2.0 * k, sign * dt)
}

/// Angular softmax with normalized class rows; the target logit is
/// `‖x‖ (λ cosθ_y + ψ(θ_y)) / (1 + λ)`.
pub fn loss_a_softmax(x: &DVector<f64>, w: &DMatrix<f64>, label: usize, m: u32, lambda: f64) -> Result<SpeakerLoss> {
    check_inputs(x, w, label)?;
    if !(1..=4).contains(&m) {
        return Err(Error::Config(format!("angular margin must be 1..=4, got {m}")));
    }
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("annealing weight must be >= 0, got {lambda}")));
    }
    let c = cosines(x, w);
    let r = c.xn;
    let mut z = &c.cos * r;
    let (psi, dpsi) = a_softmax_psi(c.cos[label], m);
    let fy = (lambda * c.cos[label] + psi) / (1.0 + lambda);
    z[label] = r * fy;
    let (loss, g) = ce(&z, label);
    // z_j = r f_j(cos_j): dz/dr = f_j, dz/dcos_j = r f_j'
    let mut d_cos = &g * r;
    d_cos[label] *= (lambda + dpsi) / (1.0 + lambda);
    let mut d_r = g.dot(&c.cos);
    d_r += g[label] * (fy - c.cos[label]);
    let (mut d_x, d_w) = cos_backward(&c, &d_cos);
    d_x += &c.x_hat * d_r;
    Ok(SpeakerLoss {
        loss,
        d_x,
        d_w,
        scores: c.cos,
    })
}

/// Mean per-frame cross-entropy of plain softmax over `h wᵀ`.
pub fn loss_frame_ce(h: &DMatrix<f64>, w: &DMatrix<f64>, labels: &[usize]) -> Result<(f64, DMatrix<f64>, DMatrix<f64>)> {
    let frames = h.nrows();
    if labels.len() != frames {
        return Err(Error::LengthMismatch {
            what: "frame labels".into(),
            expected: frames,
            actual: labels.len(),
        });
    }
    if frames == 0 {
        return Err(Error::EmptyInput("no frames for frame-level loss".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= w.nrows()) {
        return Err(Error::InvalidInput(format!(
            "frame label {bad} out of range for {} classes",
            w.nrows()
        )));
    }
    let z = h * w.transpose();
    let n = frames as f64;
    let mut dz = DMatrix::zeros(frames, w.nrows());
    let mut total = 0.0;
    for t in 0..frames {
        let (l, g) = ce(&z.row(t).transpose(), labels[t]);
        total += l;
        dz.row_mut(t).copy_from(&(g / n).transpose());
    }
    let d_h = &dz * w;
    let d_w = dz.transpose() * h;
    Ok((total / n, d_h, d_w))
}

/// One training example: a feature chunk, its speaker, and optionally one
/// senone label per frame.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub feats: &'a DMatrix<f64>,
    pub speaker: usize,
    pub frame_labels: Option<&'a [usize]>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub speaker: f64,
    pub phonetic: f64,
    pub total: f64,
    pub correct: bool,
}

fn speaker_loss(net: &Network, fwd: &ForwardOutput, cfg: &LossConfig, label: usize, lambda: f64) -> Result<SpeakerLoss> {
    let out = net
        .plan
        .output
        .as_ref()
        .ok_or_else(|| Error::Config(format!("`{}` has no speaker classifier (class count unset)", net.spec.name)))?;
    let w = net.params.tensor(&out.weight);
    let x = &fwd.final_hidden;
    match cfg.kind {
        LossKind::Softmax => loss_softmax(x, w, label),
        LossKind::AmSoftmax => loss_am_softmax(x, w, label, cfg.margin, cfg.scale),
        LossKind::ASoftmax => loss_a_softmax(x, w, label, angular_margin(cfg.margin)?, lambda),
    }
}

/// Speaker loss plus `multitask_weight` times the frame-level phonetic loss.
pub fn objective(
    net: &Network,
    sample: Sample,
    cfg: &LossConfig,
    anneal_lambda: f64,
    grads: Option<&mut Params>,
) -> Result<(LossTerms, ForwardOutput)> {
    objective_weighted(net, sample, cfg, anneal_lambda, 1.0, cfg.multitask_weight, grads)
}

/// As [`objective`] with explicit term weights; a zero weight removes the
/// term from both the total and the gradient.
pub fn objective_weighted(
    net: &Network,
    sample: Sample,
    cfg: &LossConfig,
    anneal_lambda: f64,
    speaker_weight: f64,
    phonetic_weight: f64,
    grads: Option<&mut Params>,
) -> Result<(LossTerms, ForwardOutput)> {
    let fwd = net.forward_tracked(sample.feats, grads.is_none())?;
    let mut terms = LossTerms {
        speaker: 0.0,
        phonetic: 0.0,
        total: 0.0,
        correct: false,
    };
    let mut d_final = None;
    let mut grads = grads;
    if speaker_weight != 0.0 {
        let sl = speaker_loss(net, &fwd, cfg, sample.speaker, anneal_lambda)?;
        terms.speaker = sl.loss;
        terms.correct = sl.predicted() == sample.speaker;
        if let Some(g) = grads.as_deref_mut() {
            g.accumulate(&net.plan.output.as_ref().unwrap().weight, &(sl.d_w * speaker_weight));
            d_final = Some(sl.d_x * speaker_weight);
        }
    }
    let mut d_heads = Vec::new();
    if phonetic_weight != 0.0 && !net.plan.heads.is_empty() {
        let labels = sample
            .frame_labels
            .ok_or_else(|| Error::InvalidInput("frame labels required for the phonetic term".into()))?;
        for (i, head) in net.plan.heads.iter().enumerate() {
            let (l, d_h, d_w) = loss_frame_ce(fwd.head_input(head), net.params.tensor(&head.weight), labels)?;
            terms.phonetic += l;
            if let Some(g) = grads.as_deref_mut() {
                g.accumulate(&head.weight, &(d_w * phonetic_weight));
                d_heads.push((i, d_h * phonetic_weight));
            }
        }
    }
    terms.total = speaker_weight * terms.speaker + phonetic_weight * terms.phonetic;
    if !terms.total.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite loss (speaker {}, phonetic {})",
            terms.speaker, terms.phonetic
        )));
    }
    if let Some(g) = grads {
        net.backward(&fwd, d_final.as_ref(), &d_heads, g);
    }
    Ok((terms, fwd))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn plain_ce(z: &[f64], y: usize) -> f64 {
        let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
        lse - z[y]
    }

    #[test]
    fn am_reduces_to_softmax_on_cosines() {
        let x = DVector::from_vec(vec![3.0, -1.0, 2.0]);
        let w = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 0.5, -1.0, 0.0, 4.0]);
        let am = loss_am_softmax(&x, &w, 1, 0.0, 1.0).unwrap();
        let cos: Vec<f64> = (0..2)
            .map(|j| w.row(j).transpose().dot(&x) / (w.row(j).norm() * x.norm()))
            .collect();
        assert!((am.loss - plain_ce(&cos, 1)).abs() < 1e-9);
    }

    #[test]
    fn am_closed_form_small_loss() {
        // unit class rows aligned so that cos_y = 0.9, cos_other = 0.1
        let x = DVector::from_vec(vec![1.0, 0.0]);
        let a = 0.9f64;
        let b = 0.1f64;
        let w = DMatrix::from_row_slice(2, 2, &[a, (1.0 - a * a).sqrt(), b, (1.0 - b * b).sqrt()]);
        let l = loss_am_softmax(&x, &w, 0, 0.15, 30.0).unwrap().loss;
        let softplus = (1.0 + (30.0f64 * (0.10 - 0.75)).exp()).ln();
        assert!((l - softplus).abs() < 1e-15);
        assert!((l - 3.4e-9).abs() < 1e-10);
    }

    #[test]
    fn margin_increases_loss() {
        let x = DVector::from_vec(vec![0.3, 0.7, -0.2]);
        let w = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.0, 0.0, 1.0, 0.3, -0.5, 0.1, 1.0]);
        let a = loss_am_softmax(&x, &w, 1, 0.0, 30.0).unwrap().loss;
        let b = loss_am_softmax(&x, &w, 1, 0.15, 30.0).unwrap().loss;
        assert!(b > a);
    }

    #[test]
    fn non_finite_input_is_error() {
        let x = DVector::from_vec(vec![f64::NAN, 1.0]);
        let w = DMatrix::identity(2, 2);
        assert!(matches!(loss_am_softmax(&x, &w, 0, 0.15, 30.0), Err(Error::Numerical(_))));
    }

    #[test]
    fn psi_values() {
        for m in 1..=4 {
            assert!((a_softmax_psi(1.0, m).0 - 1.0).abs() < 1e-12);
        }
        let (psi, _) = a_softmax_psi((PI / 3.0).cos(), 4);
        assert!((psi - (-1.5)).abs() < 1e-12);
        // continuity and monotone decrease in θ
        let mut prev = f64::INFINITY;
        for i in 0..=200 {
            let th = PI * i as f64 / 200.0;
            let p = a_softmax_psi(th.cos(), 4).0;
            assert!(p <= prev + 1e-9);
            prev = p;
        }
    }

    #[test]
    fn a_softmax_m1_is_normalized_weight_softmax() {
        let x = DVector::from_vec(vec![0.5, -1.5, 2.0]);
        let w = DMatrix::from_row_slice(3, 3, &[2.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0, -3.0]);
        let a = loss_a_softmax(&x, &w, 2, 1, 0.0).unwrap().loss;
        let z: Vec<f64> = (0..3).map(|j| w.row(j).transpose().dot(&x) / w.row(j).norm()).collect();
        assert!((a - plain_ce(&z, 2)).abs() < 1e-9);
        assert!(loss_a_softmax(&x, &w, 2, 5, 0.0).is_err());
    }

    fn fd_check(f: impl Fn(&DVector<f64>, &DMatrix<f64>) -> SpeakerLoss, x: DVector<f64>, w: DMatrix<f64>) {
        let base = f(&x, &w);
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (f(&xp, &w).loss - f(&xm, &w).loss) / (2.0 * h);
            assert!((fd - base.d_x[i]).abs() < 1e-6, "x[{i}] fd {fd} vs {}", base.d_x[i]);
        }
        for i in 0..w.len() {
            let mut wp = w.clone();
            wp[i] += h;
            let mut wm = w.clone();
            wm[i] -= h;
            let fd = (f(&x, &wp).loss - f(&x, &wm).loss) / (2.0 * h);
            assert!((fd - base.d_w[i]).abs() < 1e-6, "w[{i}] fd {fd} vs {}", base.d_w[i]);
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let x = DVector::from_vec(vec![0.4, -0.3, 0.9, 0.2]);
        let w = DMatrix::from_fn(3, 4, |r, c| ((r * 4 + c) as f64 * 0.77).sin());
        fd_check(|x, w| loss_softmax(x, w, 1).unwrap(), x.clone(), w.clone());
        fd_check(|x, w| loss_am_softmax(x, w, 2, 0.15, 5.0).unwrap(), x.clone(), w.clone());
        for m in 1..=4 {
            fd_check(|x, w| loss_a_softmax(x, w, 0, m, 3.0).unwrap(), x.clone(), w.clone());
        }
    }

    #[test]
    fn frame_ce_mean() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let w = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.5, 0.5]);
        let (l, _, _) = loss_frame_ce(&h, &w, &[0, 2]).unwrap();
        let expect = (plain_ce(&[1.0, 0.0, 0.5], 0) + plain_ce(&[0.0, 1.0, 0.5], 2)) / 2.0;
        assert!((l - expect).abs() < 1e-12);
        assert!(matches!(loss_frame_ce(&h, &w, &[0]), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn anneal_schedule_floor() {
        let s = AnnealSchedule::default();
        assert_eq!(s.at(0), 1000.0);
        assert_eq!(s.at(100_000_000), 5.0);
    }
}
