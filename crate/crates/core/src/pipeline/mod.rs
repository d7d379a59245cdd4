//! Staged, resumable pipeline from features to metric report.
//!
//! Every stage reads its inputs from and writes its outputs to a work
//! directory. `manifest.toml` records, per stage run, a hash of the config
//! that produced it and content digests of its inputs and outputs. A stage
//! whose record matches the current config and inputs is skipped; a
//! prerequisite produced under a different config is reported as stale.

mod config;
mod manifest;
mod stages;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use log::info;

pub use config::{
    digest, AugmentConfig, BackendConfig, CorpusConfig, CorpusKind, PipelineConfig, ScoreNormConfig,
    SubsystemConfig,
};
pub use manifest::{file_digest, Manifest, StageRecord, MANIFEST_FILE};
pub use stages::{evaluate, load_calibration, summarize, SystemResult};

use crate::error::{Error, Result};
use config::canonical;
use manifest::abs;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Features,
    Vad,
    Train,
    Extract,
    Lda,
    LengthNorm,
    Plda,
    Adapt,
    Score,
    Asnorm,
    Calibrate,
    Fuse,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 13] = [
        Stage::Features,
        Stage::Vad,
        Stage::Train,
        Stage::Extract,
        Stage::Lda,
        Stage::LengthNorm,
        Stage::Plda,
        Stage::Adapt,
        Stage::Score,
        Stage::Asnorm,
        Stage::Calibrate,
        Stage::Fuse,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Features => "features",
            Stage::Vad => "vad",
            Stage::Train => "train",
            Stage::Extract => "extract",
            Stage::Lda => "lda",
            Stage::LengthNorm => "length-norm",
            Stage::Plda => "plda",
            Stage::Adapt => "adapt",
            Stage::Score => "score",
            Stage::Asnorm => "asnorm",
            Stage::Calibrate => "calibrate",
            Stage::Fuse => "fuse",
            Stage::Evaluate => "evaluate",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }

    fn per_subsystem(self) -> bool {
        (Stage::Train..=Stage::Calibrate).contains(&self)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One stage applied to one subsystem (or to the whole run).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Job {
    pub stage: Stage,
    pub sys: Option<usize>,
}

impl Job {
    fn global(stage: Stage) -> Self {
        Self { stage, sys: None }
    }

    fn of(stage: Stage, sys: usize) -> Self {
        Self { stage, sys: Some(sys) }
    }

    pub fn id(&self, cfg: &PipelineConfig) -> String {
        match self.sys {
            Some(i) => format!("{}/{}", self.stage, cfg.subsystems[i].name),
            None => self.stage.to_string(),
        }
    }
}

pub(crate) mod paths {
    pub const FEATS: &str = "data/feats.ark";
    pub const FEATS_IDX: &str = "data/feats.ark.idx";
    pub const UTT2SPK: &str = "data/utt2spk";
    pub const UTT2SPLIT: &str = "data/utt2split";
    pub const LABELS: &str = "data/frame_labels";
    pub const KEY_DEV: &str = "data/trials_dev.key";
    pub const KEY_EVAL: &str = "data/trials_eval.key";
    pub const VAD: &str = "data/vad.ark";
    pub const VAD_IDX: &str = "data/vad.ark.idx";
    pub const VAD_LABELS: &str = "data/vad_labels";
    pub const FUSION_MODEL: &str = "fusion/fusion.toml";
    pub const FUSED_DEV: &str = "fusion/fused_dev.txt";
    pub const FUSED_EVAL: &str = "fusion/fused_eval.txt";
    pub const REPORT: &str = "report.txt";

    pub fn sys(name: &str, file: &str) -> String {
        format!("{name}/{file}")
    }
}

/// Evaluation splits with trial keys.
pub const SPLITS: [&str; 2] = ["dev", "eval"];

fn key_path(split: &str) -> &'static str {
    if split == "dev" {
        paths::KEY_DEV
    } else {
        paths::KEY_EVAL
    }
}

impl PipelineConfig {
    fn sys_file(&self, i: usize, file: &str) -> String {
        paths::sys(&self.subsystems[i].name, file)
    }

    fn fusion_enabled(&self) -> bool {
        self.subsystems.len() >= 2
    }

    /// Inputs of `job` with the job that produces each.
    pub(crate) fn inputs(&self, job: Job) -> Vec<(Job, String)> {
        use paths::*;
        let feat = |p: &str| (Job::global(Stage::Features), p.to_string());
        let vad = |p: &str| (Job::global(Stage::Vad), p.to_string());
        let s = |stage: Stage, i: usize, f: &str| (Job::of(stage, i), self.sys_file(i, f));
        let keys = || vec![feat(KEY_DEV), feat(KEY_EVAL)];
        match (job.stage, job.sys) {
            (Stage::Features, _) => vec![],
            (Stage::Vad, _) => vec![feat(FEATS), feat(FEATS_IDX), feat(LABELS)],
            (Stage::Train, Some(_)) => {
                vec![vad(VAD), vad(VAD_IDX), vad(VAD_LABELS), feat(UTT2SPK), feat(UTT2SPLIT)]
            }
            (Stage::Extract, Some(i)) => vec![s(Stage::Train, i, "model.bin"), vad(VAD), vad(VAD_IDX)],
            (Stage::Lda, Some(i)) => vec![
                s(Stage::Extract, i, "embeddings.ark"),
                s(Stage::Extract, i, "embeddings.ark.idx"),
                feat(UTT2SPK),
                feat(UTT2SPLIT),
            ],
            (Stage::LengthNorm, Some(i)) => vec![
                s(Stage::Lda, i, "lda.bin"),
                s(Stage::Extract, i, "embeddings.ark"),
                s(Stage::Extract, i, "embeddings.ark.idx"),
            ],
            (Stage::Plda, Some(i)) => vec![
                s(Stage::LengthNorm, i, "lnorm.ark"),
                s(Stage::LengthNorm, i, "lnorm.ark.idx"),
                feat(UTT2SPK),
                feat(UTT2SPLIT),
            ],
            (Stage::Adapt, Some(i)) => vec![
                s(Stage::Plda, i, "plda.bin"),
                s(Stage::LengthNorm, i, "lnorm.ark"),
                s(Stage::LengthNorm, i, "lnorm.ark.idx"),
                feat(UTT2SPLIT),
            ],
            (Stage::Score, Some(i)) => {
                let mut v = vec![
                    s(Stage::Adapt, i, "plda_adapted.bin"),
                    s(Stage::LengthNorm, i, "lnorm.ark"),
                    s(Stage::LengthNorm, i, "lnorm.ark.idx"),
                ];
                v.extend(keys());
                v
            }
            (Stage::Asnorm, Some(i)) => vec![
                s(Stage::Score, i, "scores_dev.txt"),
                s(Stage::Score, i, "scores_eval.txt"),
                s(Stage::Adapt, i, "plda_adapted.bin"),
                s(Stage::LengthNorm, i, "lnorm.ark"),
                s(Stage::LengthNorm, i, "lnorm.ark.idx"),
                feat(UTT2SPLIT),
            ],
            (Stage::Calibrate, Some(i)) => {
                let mut v = vec![s(Stage::Asnorm, i, "asnorm_dev.txt"), s(Stage::Asnorm, i, "asnorm_eval.txt")];
                v.extend(keys());
                v
            }
            (Stage::Fuse, _) => {
                let mut v = keys();
                if self.fusion_enabled() {
                    for i in 0..self.subsystems.len() {
                        v.push(s(Stage::Calibrate, i, "calibrated_dev.txt"));
                        v.push(s(Stage::Calibrate, i, "calibrated_eval.txt"));
                    }
                }
                v
            }
            (Stage::Evaluate, _) => {
                let mut v = keys();
                for i in 0..self.subsystems.len() {
                    v.push(s(Stage::Calibrate, i, "calibrated_dev.txt"));
                    v.push(s(Stage::Calibrate, i, "calibrated_eval.txt"));
                }
                if self.fusion_enabled() {
                    v.push((Job::global(Stage::Fuse), FUSED_DEV.into()));
                    v.push((Job::global(Stage::Fuse), FUSED_EVAL.into()));
                }
                v
            }
            (_, None) => unreachable!("per-subsystem stage without a subsystem"),
        }
    }

    pub(crate) fn outputs(&self, job: Job) -> Vec<String> {
        use paths::*;
        let s = |i: usize, files: &[&str]| files.iter().map(|f| self.sys_file(i, f)).collect();
        match (job.stage, job.sys) {
            (Stage::Features, _) => [FEATS, FEATS_IDX, UTT2SPK, UTT2SPLIT, LABELS, KEY_DEV, KEY_EVAL]
                .map(String::from)
                .to_vec(),
            (Stage::Vad, _) => [VAD, VAD_IDX, VAD_LABELS].map(String::from).to_vec(),
            (Stage::Train, Some(i)) => s(i, &["model.bin"]),
            (Stage::Extract, Some(i)) => s(i, &["embeddings.ark", "embeddings.ark.idx"]),
            (Stage::Lda, Some(i)) => s(i, &["lda.bin"]),
            (Stage::LengthNorm, Some(i)) => s(i, &["lnorm.ark", "lnorm.ark.idx"]),
            (Stage::Plda, Some(i)) => s(i, &["plda.bin"]),
            (Stage::Adapt, Some(i)) => s(i, &["plda_adapted.bin"]),
            (Stage::Score, Some(i)) => s(i, &["scores_dev.txt", "scores_eval.txt"]),
            (Stage::Asnorm, Some(i)) => s(i, &["asnorm_dev.txt", "asnorm_eval.txt"]),
            (Stage::Calibrate, Some(i)) => s(i, &["calibration.toml", "calibrated_dev.txt", "calibrated_eval.txt"]),
            (Stage::Fuse, _) if self.fusion_enabled() => {
                [FUSION_MODEL, FUSED_DEV, FUSED_EVAL].map(String::from).to_vec()
            }
            (Stage::Fuse, _) => vec![],
            (Stage::Evaluate, _) => vec![REPORT.into()],
            (_, None) => unreachable!("per-subsystem stage without a subsystem"),
        }
    }

    /// Hash of everything in the config that can influence `job`'s outputs,
    /// chained through the jobs it depends on.
    pub(crate) fn job_hash(&self, job: Job) -> String {
        let own = match (job.stage, job.sys) {
            (Stage::Features, _) => format!(
                "seed={}\n{}\n{}\n{}",
                self.seed,
                canonical(&self.corpus),
                canonical(&self.features),
                canonical(&self.augment)
            ),
            (Stage::Vad, _) => canonical(&self.vad),
            (Stage::Train, Some(i)) => format!("seed={}\n{}", self.seed, canonical(&self.subsystems[i])),
            (Stage::Lda, _) => format!("lda_dim={}", self.backend.lda_dim),
            (Stage::Plda, _) => format!("plda_iters={}", self.backend.plda_iters),
            (Stage::Adapt, _) => canonical(&self.backend.adapt),
            (Stage::Asnorm, _) => canonical(&self.scorenorm),
            (Stage::Fuse, _) => canonical(&self.fusion),
            (Stage::Evaluate, _) => canonical(&self.dcf),
            _ => String::new(),
        };
        let mut parents: Vec<Job> = Vec::new();
        for (p, _) in self.inputs(job) {
            if !parents.contains(&p) {
                parents.push(p);
            }
        }
        let parent_hashes: Vec<String> = parents.iter().map(|&p| self.job_hash(p)).collect();
        digest(format!("{}\n{own}\n{}", job.id(self), parent_hashes.join("\n")))
    }

    /// Seed for training subsystem `i`; depends on the name, not the position.
    pub(crate) fn train_seed(&self, i: usize) -> u64 {
        let d = digest(&self.subsystems[i].name);
        self.seed ^ u64::from_str_radix(&d[..16], 16).unwrap_or(0)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunSummary {
    pub executed: Vec<String>,
    pub skipped: Vec<String>,
}

fn jobs(cfg: &PipelineConfig, from: Stage, to: Stage) -> Vec<Job> {
    let mut out = Vec::new();
    for st in Stage::ALL.into_iter().filter(|s| (from..=to).contains(s)) {
        if st.per_subsystem() {
            out.extend((0..cfg.subsystems.len()).map(|i| Job::of(st, i)));
        } else {
            out.push(Job::global(st));
        }
    }
    out
}

/// Checks that every input exists, was produced under the current config
/// and is unchanged since; returns the input digests.
fn check_inputs(cfg: &PipelineConfig, workdir: &Path, m: &Manifest, job: Job) -> Result<BTreeMap<String, String>> {
    let mut digests = BTreeMap::new();
    for (producer, path) in cfg.inputs(job) {
        let missing = || Error::MissingArtifact {
            stage: job.id(cfg),
            path: abs(workdir, &path),
        };
        let record = m.stages.get(&producer.id(cfg)).ok_or_else(missing)?;
        let recorded = record.outputs.get(&path).ok_or_else(missing)?;
        let full = abs(workdir, &path);
        if !full.exists() {
            return Err(missing());
        }
        let expected = cfg.job_hash(producer);
        if record.config_hash != expected {
            return Err(Error::StaleArtifact {
                path: full,
                expected,
                found: record.config_hash.clone(),
            });
        }
        let actual = file_digest(&full)?;
        if &actual != recorded {
            return Err(Error::StaleArtifact {
                path: full,
                expected: recorded.clone(),
                found: actual,
            });
        }
        digests.insert(path, actual);
    }
    Ok(digests)
}

fn up_to_date(workdir: &Path, record: Option<&StageRecord>, hash: &str, inputs: &BTreeMap<String, String>, outputs: &[String]) -> bool {
    let Some(r) = record else { return false };
    r.config_hash == hash
        && &r.inputs == inputs
        && r.outputs.len() == outputs.len()
        && outputs.iter().all(|o| {
            r.outputs.get(o).is_some_and(|d| file_digest(&abs(workdir, o)).is_ok_and(|a| &a == d))
        })
}

/// Runs stages `from..=to` in order. Completed stages whose config and
/// inputs are unchanged are skipped.
pub fn run_pipeline(cfg: &PipelineConfig, workdir: &Path, from: Stage, to: Stage) -> Result<RunSummary> {
    cfg.validate()?;
    if from > to {
        return Err(Error::Config(format!("stage range {from}..{to} is empty")));
    }
    std::fs::create_dir_all(workdir).map_err(|e| Error::io(workdir, e))?;
    let mut manifest = Manifest::load(workdir)?;
    let mut summary = RunSummary::default();
    for job in jobs(cfg, from, to) {
        let id = job.id(cfg);
        let inputs = check_inputs(cfg, workdir, &manifest, job)?;
        let hash = cfg.job_hash(job);
        let outputs = cfg.outputs(job);
        if up_to_date(workdir, manifest.stages.get(&id), &hash, &inputs, &outputs) {
            info!("{id}: up to date");
            summary.skipped.push(id);
            continue;
        }
        info!("{id}: running");
        stages::execute(cfg, workdir, job)?;
        let mut produced = BTreeMap::new();
        for o in &outputs {
            produced.insert(o.clone(), file_digest(&abs(workdir, o))?);
        }
        manifest.stages.insert(
            id.clone(),
            StageRecord {
                config_hash: hash,
                inputs,
                outputs: produced,
            },
        );
        manifest.save(workdir)?;
        summary.executed.push(id);
    }
    Ok(summary)
}
