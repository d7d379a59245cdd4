use std::collections::BTreeSet;

use log::{debug, info};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{objective, LossConfig, Sample};
use super::network::Network;
use super::params::Params;
use super::semiorth::semiorth_step;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct TrainUtterance {
    pub id: String,
    pub feats: DMatrix<f64>,
    pub speaker: usize,
    pub frame_labels: Option<Vec<usize>>,
}

impl TrainUtterance {
    fn sample(&self) -> Sample<'_> {
        Sample {
            feats: &self.feats,
            speaker: self.speaker,
            frame_labels: self.frame_labels.as_deref(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub chunk_frames: usize,
    pub learning_rate: f64,
    /// Per-epoch multiplicative learning-rate decay.
    pub lr_decay: f64,
    pub momentum: f64,
    /// Rescales the batch gradient when its norm exceeds this value.
    pub max_grad_norm: Option<f64>,
    pub semiorth_every: usize,
    pub semiorth_alpha: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            chunk_frames: 200,
            learning_rate: 0.002,
            lr_decay: 0.9,
            momentum: 0.9,
            max_grad_norm: Some(10.0),
            semiorth_every: 4,
            semiorth_alpha: 0.125,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub steps: usize,
    pub epoch_losses: Vec<f64>,
    pub initial_holdout_loss: Option<f64>,
    pub final_holdout_loss: Option<f64>,
    /// Fraction of training utterances (full length) classified correctly.
    pub train_accuracy: f64,
}

fn chunk(u: &TrainUtterance, len: usize, rng: &mut ChaCha8Rng) -> TrainUtterance {
    let frames = u.feats.nrows();
    if frames <= len {
        return u.clone();
    }
    let start = rng.random_range(0..=frames - len);
    TrainUtterance {
        id: u.id.clone(),
        feats: u.feats.rows(start, len).into_owned(),
        speaker: u.speaker,
        frame_labels: u.frame_labels.as_ref().map(|l| l[start..start + len].to_vec()),
    }
}

fn mean_loss(net: &Network, utts: &[TrainUtterance], loss: &LossConfig, lambda: f64) -> Result<(f64, f64)> {
    let results: Vec<Result<_>> = utts
        .par_iter()
        .map(|u| objective(net, u.sample(), loss, lambda, None).map(|(t, _)| t))
        .collect();
    let mut total = 0.0;
    let mut correct = 0usize;
    for r in results {
        let t = r?;
        total += t.total;
        correct += t.correct as usize;
    }
    let n = utts.len().max(1) as f64;
    Ok((total / n, correct as f64 / n))
}

fn check_data(net: &Network, data: &[TrainUtterance]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyInput("no training utterances".into()));
    }
    let out = net
        .plan
        .output
        .as_ref()
        .ok_or_else(|| Error::Config("network has no speaker classifier".into()))?;
    let speakers: BTreeSet<usize> = data.iter().map(|u| u.speaker).collect();
    if speakers.len() < 2 {
        return Err(Error::SingleClass(format!(
            "training needs at least two speakers, found {}",
            speakers.len()
        )));
    }
    if let Some(&s) = speakers.iter().next_back().filter(|&&s| s >= out.classes) {
        return Err(Error::InvalidInput(format!(
            "speaker label {s} exceeds classifier size {}",
            out.classes
        )));
    }
    Ok(())
}

/// Minibatch SGD with momentum. Deterministic for a given seed regardless of
/// thread count: per-sample gradients are computed in parallel but summed in
/// batch order.
pub fn train(
    net: &mut Network,
    data: &[TrainUtterance],
    holdout: &[TrainUtterance],
    loss: &LossConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainReport> {
    loss.validate()?;
    check_data(net, data)?;
    if cfg.batch_size == 0 || cfg.chunk_frames == 0 {
        return Err(Error::Config("batch_size and chunk_frames must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = TrainReport::default();
    if !holdout.is_empty() {
        report.initial_holdout_loss = Some(mean_loss(net, holdout, loss, loss.anneal.at(0))?.0);
    }
    let constrained = net.plan.constrained_factors();
    let mut velocity = net.params.zeros_like();
    let mut lr = cfg.learning_rate;
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let chunks: Vec<TrainUtterance> = batch
                .iter()
                .map(|&i| chunk(&data[i], cfg.chunk_frames, &mut rng))
                .collect();
            let lambda = loss.anneal.at(step);
            let net_ref = &*net;
            let results: Vec<Result<(f64, Params)>> = chunks
                .par_iter()
                .map(|u| {
                    let mut g = Params::new();
                    let (t, _) = objective(net_ref, u.sample(), loss, lambda, Some(&mut g))?;
                    Ok((t.total, g))
                })
                .collect();
            let mut grad = net.params.zeros_like();
            for (r, u) in results.into_iter().zip(&chunks) {
                let (l, g) = r.map_err(|e| match e {
                    Error::Numerical(m) => Error::Numerical(format!(
                        "epoch {epoch}, step {step}, utterance `{}`: {m}",
                        u.id
                    )),
                    other => other,
                })?;
                epoch_loss += l;
                grad.axpy(1.0, &g);
            }
            seen += chunks.len();
            grad.scale(1.0 / chunks.len() as f64);
            let gnorm = grad.norm();
            if !gnorm.is_finite() {
                let bad: Vec<&String> = grad
                    .iter()
                    .filter(|(_, t)| !t.iter().all(|v| v.is_finite()))
                    .map(|(k, _)| k)
                    .collect();
                return Err(Error::Numerical(format!(
                    "non-finite gradient at epoch {epoch}, step {step} in {bad:?}"
                )));
            }
            if let Some(max) = cfg.max_grad_norm {
                if gnorm > max {
                    grad.scale(max / gnorm);
                }
            }
            velocity.scale(cfg.momentum);
            velocity.axpy(1.0, &grad);
            if lr != 0.0 {
                net.params.axpy(-lr, &velocity);
            }
            step += 1;
            if lr != 0.0 && cfg.semiorth_every > 0 && step.is_multiple_of(cfg.semiorth_every) {
                for name in &constrained {
                    if let Some(m) = net.params.get_mut(name) {
                        semiorth_step(m, cfg.semiorth_alpha);
                    }
                }
            }
        }
        let mean = epoch_loss / seen.max(1) as f64;
        debug!("epoch {epoch}: mean loss {mean:.5}, lr {lr:.3e}");
        report.epoch_losses.push(mean);
        lr *= cfg.lr_decay;
    }
    report.steps = step;
    let lambda = loss.anneal.at(step);
    if !holdout.is_empty() {
        report.final_holdout_loss = Some(mean_loss(net, holdout, loss, lambda)?.0);
    }
    report.train_accuracy = mean_loss(net, data, loss, lambda)?.1;
    info!(
        "trained {} for {} steps; accuracy {:.3}, holdout {:?} -> {:?}",
        net.spec.name, step, report.train_accuracy, report.initial_holdout_loss, report.final_holdout_loss
    );
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netspec::builtin;
    use rand_distr::{Distribution, StandardNormal};

    fn toy(n_per: usize, seed: u64) -> Vec<TrainUtterance> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for spk in 0..2 {
            let sign = if spk == 0 { 1.0 } else { -1.0 };
            for i in 0..n_per {
                let feats = DMatrix::from_fn(30, 6, |_, c| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    sign * (c as f64 - 2.5) * 0.8 + 0.5 * z
                });
                out.push(TrainUtterance {
                    id: format!("s{spk}u{i}"),
                    feats,
                    speaker: spk,
                    frame_labels: None,
                });
            }
        }
        out
    }

    fn tiny_net(seed: u64) -> Network {
        let spec = builtin("etdnn").unwrap().scaled(1.0 / 32.0).with_classes("xvector", 2);
        Network::init(spec, 6, seed).unwrap()
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            epochs: 6,
            batch_size: 4,
            chunk_frames: 20,
            learning_rate: 0.01,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn separable_speakers_are_learned() {
        let mut net = tiny_net(1);
        let data = toy(12, 2);
        let held = toy(4, 3);
        let r = train(&mut net, &data, &held, &LossConfig::am_softmax(), &cfg(), 4).unwrap();
        assert!(r.train_accuracy >= 0.99, "{r:?}");
        assert!(r.final_holdout_loss.unwrap() < r.initial_holdout_loss.unwrap(), "{r:?}");
    }

    #[test]
    fn zero_learning_rate_leaves_params() {
        let mut net = tiny_net(1);
        let before = net.params.clone();
        let c = TrainConfig {
            learning_rate: 0.0,
            ..cfg()
        };
        train(&mut net, &toy(3, 2), &[], &LossConfig::am_softmax(), &c, 4).unwrap();
        assert_eq!(net.params, before);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let data = toy(4, 2);
        let c = TrainConfig { epochs: 2, ..cfg() };
        let mut a = tiny_net(1);
        let mut b = tiny_net(1);
        train(&mut a, &data, &[], &LossConfig::am_softmax(), &c, 9).unwrap();
        train(&mut b, &data, &[], &LossConfig::am_softmax(), &c, 9).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn single_speaker_rejected() {
        let mut net = tiny_net(1);
        let data: Vec<_> = toy(3, 2).into_iter().filter(|u| u.speaker == 0).collect();
        assert!(matches!(
            train(&mut net, &data, &[], &LossConfig::am_softmax(), &cfg(), 1),
            Err(Error::SingleClass(_))
        ));
    }
}
