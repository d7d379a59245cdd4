//! Synthetic corpora: Gaussian speakers with a Markov chain of frame-level
//! "senone" labels, and PLDA-distributed embeddings.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backend::PldaModel;
use crate::error::{Error, Result};
use crate::linalg::sym_eigen_desc;

/// Column 0 of every toy frame is a log-energy track (high on speech, low on
/// the silent lead-in and tail); the other columns carry the speaker mean,
/// a senone-dependent offset and isotropic within-speaker noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToySpeakerModel {
    pub num_speakers: usize,
    pub utterances_per_speaker: usize,
    pub feat_dim: usize,
    /// Speaker means are drawn from `N(0, speaker_std² I)`.
    pub speaker_std: f64,
    /// Frames scatter around their speaker mean with `N(0, within_std² I)`.
    pub within_std: f64,
    /// Speech frames per utterance, excluding silence.
    pub frames_per_utterance: usize,
    /// Silent frames added before and after the speech.
    pub silence_frames: usize,
    pub senones: usize,
    pub senone_std: f64,
    /// Probability that the senone chain stays in its current state.
    pub senone_stay: f64,
}

impl Default for ToySpeakerModel {
    fn default() -> Self {
        Self {
            num_speakers: 50,
            utterances_per_speaker: 20,
            feat_dim: 12,
            speaker_std: 2.0,
            within_std: 1.0,
            frames_per_utterance: 100,
            silence_frames: 10,
            senones: 8,
            senone_std: 0.5,
            senone_stay: 0.8,
        }
    }
}

const SPEECH_ENERGY: f64 = 5.0;
const SILENCE_ENERGY: f64 = -5.0;
const ENERGY_STD: f64 = 0.5;

impl ToySpeakerModel {
    pub fn validate(&self) -> Result<()> {
        if self.num_speakers < 2 || self.utterances_per_speaker == 0 || self.frames_per_utterance == 0 {
            return Err(Error::Config(
                "toy corpus needs at least two speakers and one utterance/frame each".into(),
            ));
        }
        if self.feat_dim < 2 {
            return Err(Error::Config("toy features need an energy column plus at least one more".into()));
        }
        if self.senones == 0 {
            return Err(Error::Config("toy corpus needs at least one senone".into()));
        }
        for (name, v) in [
            ("speaker_std", self.speaker_std),
            ("within_std", self.within_std),
            ("senone_std", self.senone_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.senone_stay) {
            return Err(Error::Config("senone_stay must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn speaker_id(&self, s: usize) -> String {
        format!("spk{s:04}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyUtterance {
    pub id: String,
    pub speaker: String,
    pub feats: DMatrix<f64>,
    pub frame_labels: Vec<usize>,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        std * z
    })
}

/// Utterances in speaker-major order. Identical for identical seeds.
pub fn gen_toy_audio(m: &ToySpeakerModel, seed: u64) -> Result<Vec<ToyUtterance>> {
    m.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = m.feat_dim - 1;
    let speaker_means: Vec<DVector<f64>> = (0..m.num_speakers).map(|_| normal_vec(&mut rng, d, m.speaker_std)).collect();
    let senone_means: Vec<DVector<f64>> = (0..m.senones).map(|_| normal_vec(&mut rng, d, m.senone_std)).collect();
    let total = m.frames_per_utterance + 2 * m.silence_frames;
    let mut out = Vec::with_capacity(m.num_speakers * m.utterances_per_speaker);
    for (s, mean) in speaker_means.iter().enumerate() {
        for u in 0..m.utterances_per_speaker {
            let mut feats = DMatrix::zeros(total, m.feat_dim);
            let mut labels = Vec::with_capacity(total);
            let mut state = rng.random_range(0..m.senones);
            for t in 0..total {
                if t > 0 && rng.random::<f64>() >= m.senone_stay {
                    state = rng.random_range(0..m.senones);
                }
                labels.push(state);
                let speech = t >= m.silence_frames && t < m.silence_frames + m.frames_per_utterance;
                let e: f64 = StandardNormal.sample(&mut rng);
                feats[(t, 0)] = if speech { SPEECH_ENERGY } else { SILENCE_ENERGY } + ENERGY_STD * e;
                for c in 0..d {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    let mut v = m.within_std * z;
                    if speech {
                        v += mean[c] + senone_means[state][c];
                    }
                    feats[(t, c + 1)] = v;
                }
            }
            out.push(ToyUtterance {
                id: format!("{}-utt{u:03}", m.speaker_id(s)),
                speaker: m.speaker_id(s),
                feats,
                frame_labels: labels,
            });
        }
    }
    Ok(out)
}

/// Embeddings with their speaker index, speaker-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledEmbeddings {
    pub vectors: Vec<DVector<f64>>,
    pub labels: Vec<usize>,
}

fn psd_sqrt(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if !m.is_square() || m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("{what} must be a finite square matrix")));
    }
    let (vals, vecs) = sym_eigen_desc(m);
    let scale = vals.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    if vals.iter().any(|&v| v < -1e-9 * scale) {
        return Err(Error::InvalidInput(format!("{what} is not positive semi-definite")));
    }
    let root = DMatrix::from_diagonal(&vals.map(|v| v.max(0.0).sqrt()));
    Ok(&vecs * root)
}

/// Speaker means from `N(μ, Φ_b)`, then `per_speaker` draws from
/// `N(mean, Φ_w)` for each.
pub fn gen_toy_embeddings(plda: &PldaModel, speakers: usize, per_speaker: usize, seed: u64) -> Result<LabeledEmbeddings> {
    let d = plda.mean.len();
    if plda.between.shape() != (d, d) || plda.within.shape() != (d, d) {
        return Err(Error::InvalidInput("PLDA covariances do not match the mean dimension".into()));
    }
    let lb = psd_sqrt(&plda.between, "between-class covariance")?;
    let lw = psd_sqrt(&plda.within, "within-class covariance")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = LabeledEmbeddings {
        vectors: Vec::with_capacity(speakers * per_speaker),
        labels: Vec::with_capacity(speakers * per_speaker),
    };
    for s in 0..speakers {
        let y = &plda.mean + &lb * normal_vec(&mut rng, d, 1.0);
        for _ in 0..per_speaker {
            out.vectors.push(&y + &lw * normal_vec(&mut rng, d, 1.0));
            out.labels.push(s);
        }
    }
    Ok(out)
}
