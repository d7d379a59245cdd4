use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::read_text;
use crate::backend::AdaptConfig;
use crate::calibration::{DcfConfig, FusionConfig};
use crate::embedder::{LossConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, VadConfig};
use crate::netspec::{builtin, validate};
use crate::scorenorm::DEFAULT_TOP_K;
use crate::toy::ToySpeakerModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusKind {
    /// Synthetic features generated from `corpus.toy`.
    Toy,
    /// A feature archive plus `utt2spk` (and optionally frame labels).
    Archive,
    /// A list of `<utt> <speaker> <wav path>` lines.
    Wav,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub kind: CorpusKind,
    pub toy: ToySpeakerModel,
    pub archive: Option<PathBuf>,
    pub utt2spk: Option<PathBuf>,
    pub frame_labels: Option<PathBuf>,
    pub wav_list: Option<PathBuf>,
    /// Speakers held out from training, taken from the end of the sorted
    /// speaker list: dev last, eval before it, then the unlabeled in-domain
    /// set used only for PLDA adaptation (none when zero).
    pub dev_speakers: usize,
    pub eval_speakers: usize,
    pub adapt_speakers: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            kind: CorpusKind::Toy,
            toy: ToySpeakerModel::default(),
            archive: None,
            utt2spk: None,
            frame_labels: None,
            wav_list: None,
            dev_speakers: 10,
            eval_speakers: 10,
            adapt_speakers: 0,
        }
    }
}

/// Additive-noise augmentation of wav corpora: each fold adds one noisy
/// copy of every training utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub folds: usize,
    pub noise_list: Option<PathBuf>,
    pub snr_db: Vec<f64>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            folds: 0,
            noise_list: None,
            snr_db: vec![0.0, 5.0, 10.0, 15.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubsystemConfig {
    pub name: String,
    pub architecture: String,
    /// Multiplier on every layer width of the builtin architecture.
    pub width: f64,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl Default for SubsystemConfig {
    fn default() -> Self {
        Self {
            name: "etdnn".into(),
            architecture: "etdnn".into(),
            width: 1.0,
            loss: LossConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub lda_dim: usize,
    pub plda_iters: usize,
    pub adapt: AdaptConfig,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            lda_dim: 150,
            plda_iters: 10,
            adapt: AdaptConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreNormConfig {
    pub enabled: bool,
    pub top_k: usize,
}

impl Default for ScoreNormConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            top_k: DEFAULT_TOP_K,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub features: FeatureConfig,
    pub augment: AugmentConfig,
    pub vad: VadConfig,
    pub subsystems: Vec<SubsystemConfig>,
    pub backend: BackendConfig,
    pub scorenorm: ScoreNormConfig,
    pub fusion: FusionConfig,
    pub dcf: DcfConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus: CorpusConfig::default(),
            features: FeatureConfig::default(),
            augment: AugmentConfig::default(),
            vad: VadConfig::default(),
            subsystems: vec![SubsystemConfig::default()],
            backend: BackendConfig::default(),
            scorenorm: ScoreNormConfig::default(),
            fusion: FusionConfig::default(),
            dcf: DcfConfig::default(),
        }
    }
}

/// Hex SHA-256 of `text`.
pub fn digest(text: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(text.as_ref()))
}

/// Canonical text of any serializable config fragment.
pub(crate) fn canonical<T: Serialize>(v: &T) -> String {
    match toml::Value::try_from(v) {
        Ok(toml::Value::Table(t)) => toml::to_string(&t).unwrap_or_default(),
        Ok(other) => other.to_string(),
        Err(e) => format!("<unencodable: {e}>"),
    }
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let (line, column) = e
                .span()
                .map(|s| {
                    let before = &text[..s.start.min(text.len())];
                    let line = before.matches('\n').count() + 1;
                    (line, s.start - before.rfind('\n').map_or(0, |i| i + 1) + 1)
                })
                .unwrap_or((0, 0));
            Error::Parse {
                line,
                column,
                message: e.message().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?)
    }

    pub fn canonical_text(&self) -> String {
        canonical(self)
    }

    /// Digest of the canonical text, so formatting and comments do not matter.
    pub fn hash(&self) -> String {
        digest(self.canonical_text())
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.corpus;
        match c.kind {
            CorpusKind::Toy => c.toy.validate()?,
            CorpusKind::Archive => {
                if c.archive.is_none() || c.utt2spk.is_none() {
                    return Err(Error::Config("archive corpora need `archive` and `utt2spk`".into()));
                }
            }
            CorpusKind::Wav => {
                if c.wav_list.is_none() {
                    return Err(Error::Config("wav corpora need `wav_list`".into()));
                }
            }
        }
        if c.dev_speakers < 2 || c.eval_speakers < 2 {
            return Err(Error::Config("dev and eval sets need at least two speakers each".into()));
        }
        let held_out = c.dev_speakers + c.eval_speakers + c.adapt_speakers;
        if c.kind == CorpusKind::Toy && c.toy.num_speakers < held_out + 2 {
            return Err(Error::Config(format!(
                "toy corpus has {} speakers; holding out {held_out} leaves fewer than two for training",
                c.toy.num_speakers
            )));
        }
        if self.augment.folds > 0 && (self.augment.noise_list.is_none() || self.augment.snr_db.is_empty()) {
            return Err(Error::Config("augmentation needs `noise_list` and at least one `snr_db`".into()));
        }
        if self.subsystems.is_empty() {
            return Err(Error::Config("at least one subsystem is required".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        for s in &self.subsystems {
            if s.name.is_empty() || !s.name.chars().all(|ch| ch.is_ascii_alphanumeric() || ch == '-' || ch == '_') {
                return Err(Error::Config(format!("subsystem name `{}` must be alphanumeric", s.name)));
            }
            if s.name == "data" || s.name == "fusion" {
                return Err(Error::Config(format!("subsystem name `{}` is reserved", s.name)));
            }
            if !names.insert(s.name.as_str()) {
                return Err(Error::Config(format!("duplicate subsystem `{}`", s.name)));
            }
            if !(s.width > 0.0 && s.width.is_finite()) {
                return Err(Error::Config(format!("subsystem `{}`: width must be positive", s.name)));
            }
            let spec = builtin(&s.architecture)?;
            let report = validate(&spec);
            if !report.is_ok() {
                return Err(Error::Config(format!("builtin `{}` fails validation", s.architecture)));
            }
            s.loss.validate()?;
            let t = &s.train;
            if t.batch_size == 0 || t.chunk_frames == 0 || !(t.learning_rate >= 0.0) || !(0.0..1.0).contains(&t.momentum) {
                return Err(Error::Config(format!("subsystem `{}`: invalid training settings", s.name)));
            }
        }
        if self.backend.lda_dim == 0 {
            return Err(Error::Config("lda_dim must be positive".into()));
        }
        self.backend.adapt.validate()?;
        if self.scorenorm.top_k < 2 {
            return Err(Error::Config("scorenorm.top_k must be at least 2".into()));
        }
        if !(self.fusion.prior > 0.0 && self.fusion.prior < 1.0) {
            return Err(Error::Config("fusion.prior must lie in (0, 1)".into()));
        }
        self.dcf.validate()
    }
}
