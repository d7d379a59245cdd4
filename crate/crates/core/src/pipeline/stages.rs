use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{CorpusConfig, CorpusKind, PipelineConfig};
use super::manifest::abs;
use super::{key_path, paths, Job, Stage, SPLITS};
use crate::archive::{read_archive, read_text, read_vectors, write_archive, write_atomic, write_vectors};
use crate::backend::{length_norm, lda_fit, plda_adapt, plda_fit, PldaScorer};
use crate::calibration::{
    evaluate_set, fusion_fit, join_scores, parse_key, parse_scores, pav_fit, render_scores, CalibrationMap,
    DcfConfig, FusionModel, MetricReport, Trial, TrialLabel, TrialScoreSet,
};
use crate::embedder::{extract_embedding, train, Network, TrainUtterance};
use crate::error::{Error, Result};
use crate::features::wav::read_wav;
use crate::features::{apply_mask, augment_noise, compute_features, energy_vad, FeatureMatrix, Waveform};
use crate::models::{load_lda, load_network, load_plda, save_lda, save_network, save_plda};
use crate::netspec::builtin;
use crate::scorenorm::{asnorm_with, cohort_score_matrix, CohortStats};
use crate::toy::gen_toy_audio;

pub(super) fn execute(cfg: &PipelineConfig, workdir: &Path, job: Job) -> Result<()> {
    let ctx = Ctx { cfg, workdir };
    match (job.stage, job.sys) {
        (Stage::Features, _) => ctx.features(),
        (Stage::Vad, _) => ctx.vad(),
        (Stage::Train, Some(i)) => ctx.train(i),
        (Stage::Extract, Some(i)) => ctx.extract(i),
        (Stage::Lda, Some(i)) => ctx.lda(i),
        (Stage::LengthNorm, Some(i)) => ctx.length_norm(i),
        (Stage::Plda, Some(i)) => ctx.plda(i),
        (Stage::Adapt, Some(i)) => ctx.adapt(i),
        (Stage::Score, Some(i)) => ctx.score(i),
        (Stage::Asnorm, Some(i)) => ctx.asnorm(i),
        (Stage::Calibrate, Some(i)) => ctx.calibrate(i),
        (Stage::Fuse, _) => ctx.fuse(),
        (Stage::Evaluate, _) => ctx.evaluate(),
        (_, None) => unreachable!("per-subsystem stage without a subsystem"),
    }
}

struct Ctx<'a> {
    cfg: &'a PipelineConfig,
    workdir: &'a Path,
}

struct CorpusUtt {
    id: String,
    speaker: String,
    feats: DMatrix<f64>,
    labels: Option<Vec<usize>>,
}

/// `<key> <value>` lines.
fn read_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    read_text(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| match l.split_whitespace().collect::<Vec<_>>()[..] {
            [a, b] => Ok((a.to_string(), b.to_string())),
            _ => Err(Error::format(path, format!("line {}: expected 2 fields", i + 1))),
        })
        .collect()
}

/// `<utt> <label> <label> ...` lines.
fn read_labels(path: &Path) -> Result<HashMap<String, Vec<usize>>> {
    let mut out = HashMap::new();
    for (i, line) in read_text(path)?.lines().enumerate() {
        let mut f = line.split_whitespace();
        let Some(id) = f.next() else { continue };
        let labels = f
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::format(path, format!("line {}: bad frame label", i + 1)))?;
        out.insert(id.to_string(), labels);
    }
    Ok(out)
}

fn render_labels<'a>(rows: impl Iterator<Item = (&'a str, &'a [usize])>) -> String {
    let mut s = String::new();
    for (id, labels) in rows {
        s.push_str(id);
        for l in labels {
            let _ = write!(s, " {l}");
        }
        s.push('\n');
    }
    s
}

fn render_pairs<'a>(rows: impl Iterator<Item = (&'a str, &'a str)>) -> String {
    rows.map(|(a, b)| format!("{a} {b}\n")).collect()
}

/// Speaker → split. Counting back from the last speaker id: dev, eval,
/// adapt; everything before is train.
fn assign_splits(speakers: &BTreeSet<String>, c: &CorpusConfig) -> Result<BTreeMap<String, &'static str>> {
    let n = speakers.len();
    let (dev, eval, adapt) = (c.dev_speakers, c.eval_speakers, c.adapt_speakers);
    if n < dev + eval + adapt + 2 {
        return Err(Error::InvalidInput(format!(
            "{n} speakers cannot cover {dev} dev + {eval} eval + {adapt} adapt speakers and leave two for training"
        )));
    }
    Ok(speakers
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let back = n - i;
            let split = if back <= dev {
                "dev"
            } else if back <= dev + eval {
                "eval"
            } else if back <= dev + eval + adapt {
                "adapt"
            } else {
                "train"
            };
            (s.clone(), split)
        })
        .collect())
}

/// All within-split pairs `(a, b)` with `a < b`.
fn trial_key(utts: &[(String, String)]) -> String {
    let mut s = String::new();
    for (i, (a, sa)) in utts.iter().enumerate() {
        for (b, sb) in &utts[i + 1..] {
            let label = if sa == sb { "target" } else { "nontarget" };
            let _ = writeln!(s, "{a} {b} {label}");
        }
    }
    s
}

fn load_set(scores: &Path, key: &Path) -> Result<TrialScoreSet> {
    let s = parse_scores(&read_text(scores)?, scores)?;
    let k = parse_key(&read_text(key)?, key)?;
    Ok(join_scores(&s, &k)?.0)
}

/// Scores `path` against `key` and computes the detection metrics.
pub fn evaluate(scores: &Path, key: &Path, cfg: &DcfConfig) -> Result<MetricReport> {
    evaluate_set(&load_set(scores, key)?, cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemResult {
    pub name: String,
    pub dev: MetricReport,
    pub eval: MetricReport,
}

/// Metrics of every calibrated subsystem and of the fusion, if present.
pub fn summarize(cfg: &PipelineConfig, workdir: &Path) -> Result<Vec<SystemResult>> {
    let mut files: Vec<(String, String, String)> = cfg
        .subsystems
        .iter()
        .map(|s| {
            (
                s.name.clone(),
                paths::sys(&s.name, "calibrated_dev.txt"),
                paths::sys(&s.name, "calibrated_eval.txt"),
            )
        })
        .collect();
    if cfg.fusion_enabled() {
        files.push(("fusion".into(), paths::FUSED_DEV.into(), paths::FUSED_EVAL.into()));
    }
    files
        .into_iter()
        .map(|(name, dev, eval)| {
            Ok(SystemResult {
                dev: evaluate(&abs(workdir, &dev), &abs(workdir, paths::KEY_DEV), &cfg.dcf)?,
                eval: evaluate(&abs(workdir, &eval), &abs(workdir, paths::KEY_EVAL), &cfg.dcf)?,
                name,
            })
        })
        .collect()
}

fn render_table(rows: &[SystemResult]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<14}{:>12}{:>10}{:>10}{:>12}{:>10}{:>10}",
        "system", "dev EER(%)", "min-DCF", "act-DCF", "eval EER(%)", "min-DCF", "act-DCF"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<14}{:>12.2}{:>10.3}{:>10.3}{:>12.2}{:>10.3}{:>10.3}",
            r.name, r.dev.eer_percent, r.dev.min_dcf, r.dev.act_dcf, r.eval.eer_percent, r.eval.min_dcf, r.eval.act_dcf
        );
    }
    s
}

#[derive(Debug, Serialize, Deserialize)]
struct FusionFile {
    subsystems: Vec<String>,
    model: FusionModel,
}

impl Ctx<'_> {
    fn path(&self, rel: &str) -> std::path::PathBuf {
        abs(self.workdir, rel)
    }

    fn sys_path(&self, i: usize, file: &str) -> std::path::PathBuf {
        self.path(&self.cfg.sys_file(i, file))
    }

    fn write(&self, rel: &str, text: &str) -> Result<()> {
        write_atomic(&self.path(rel), text.as_bytes())
    }

    fn load_corpus(&self) -> Result<Vec<CorpusUtt>> {
        let c = &self.cfg.corpus;
        if self.cfg.augment.folds > 0 && c.kind != CorpusKind::Wav {
            warn!("augmentation operates on waveforms; ignored for {:?} corpora", c.kind);
        }
        match c.kind {
            CorpusKind::Toy => Ok(gen_toy_audio(&c.toy, self.cfg.seed)?
                .into_iter()
                .map(|u| CorpusUtt {
                    id: u.id,
                    speaker: u.speaker,
                    feats: u.feats,
                    labels: Some(u.frame_labels),
                })
                .collect()),
            CorpusKind::Archive => {
                let ark = c.archive.as_deref().unwrap();
                let u2s_path = c.utt2spk.as_deref().unwrap();
                let u2s: HashMap<String, String> = read_pairs(u2s_path)?.into_iter().collect();
                let labels = c.frame_labels.as_deref().map(read_labels).transpose()?;
                read_archive(ark)?
                    .into_iter()
                    .map(|(id, feats)| {
                        let speaker = u2s
                            .get(&id)
                            .cloned()
                            .ok_or_else(|| Error::format(u2s_path, format!("no speaker for `{id}`")))?;
                        let labels = labels.as_ref().and_then(|l| l.get(&id).cloned());
                        Ok(CorpusUtt {
                            id,
                            speaker,
                            feats,
                            labels,
                        })
                    })
                    .collect()
            }
            CorpusKind::Wav => self.load_wav_corpus(),
        }
    }

    fn load_wav_corpus(&self) -> Result<Vec<CorpusUtt>> {
        let c = &self.cfg.corpus;
        let list = c.wav_list.as_deref().unwrap();
        let base = list.parent().unwrap_or(Path::new("."));
        let mut entries = Vec::new();
        for (i, line) in read_text(list)?.lines().enumerate() {
            match line.split_whitespace().collect::<Vec<_>>()[..] {
                [] => continue,
                [u, s, p] => entries.push((u.to_string(), s.to_string(), base.join(p))),
                _ => return Err(Error::format(list, format!("line {}: expected `<utt> <speaker> <wav>`", i + 1))),
            }
        }
        let speakers: BTreeSet<String> = entries.iter().map(|e| e.1.clone()).collect();
        let splits = assign_splits(&speakers, c)?;
        let aug = &self.cfg.augment;
        let noises: Vec<Waveform> = match (&aug.noise_list, aug.folds) {
            (Some(nl), f) if f > 0 => {
                let nbase = nl.parent().unwrap_or(Path::new("."));
                read_text(nl)?
                    .lines()
                    .filter(|l| !l.trim().is_empty())
                    .map(|l| read_wav(&nbase.join(l.trim())))
                    .collect::<Result<_>>()?
            }
            _ => Vec::new(),
        };
        if aug.folds > 0 && noises.is_empty() {
            return Err(Error::EmptyInput("noise list is empty".into()));
        }
        let seed = self.cfg.seed;
        let per_utt: Vec<Vec<CorpusUtt>> = entries
            .par_iter()
            .enumerate()
            .map(|(k, (id, spk, path))| {
                let w = read_wav(path)?;
                let mut out = vec![CorpusUtt {
                    id: id.clone(),
                    speaker: spk.clone(),
                    feats: compute_features(&w, &self.cfg.features)?.values,
                    labels: None,
                }];
                if splits[spk] == "train" {
                    for f in 0..aug.folds {
                        let j = k * aug.folds + f;
                        let noise = &noises[j % noises.len()];
                        let snr = aug.snr_db[j % aug.snr_db.len()];
                        let noisy = augment_noise(&w, noise, snr, seed.wrapping_add(j as u64))?;
                        out.push(CorpusUtt {
                            id: format!("{id}-aug{f}"),
                            speaker: spk.clone(),
                            feats: compute_features(&noisy, &self.cfg.features)?.values,
                            labels: None,
                        });
                    }
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        Ok(per_utt.into_iter().flatten().collect())
    }

    fn features(&self) -> Result<()> {
        let mut utts = self.load_corpus()?;
        if utts.is_empty() {
            return Err(Error::EmptyInput("corpus has no utterances".into()));
        }
        utts.sort_by(|a, b| a.id.cmp(&b.id));
        if let Some(w) = utts.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(Error::InvalidInput(format!("duplicate utterance id `{}`", w[0].id)));
        }
        for u in &utts {
            if let Some(l) = &u.labels {
                if l.len() != u.feats.nrows() {
                    return Err(Error::LengthMismatch {
                        what: format!("frame labels of `{}`", u.id),
                        expected: u.feats.nrows(),
                        actual: l.len(),
                    });
                }
            }
        }
        let speakers: BTreeSet<String> = utts.iter().map(|u| u.speaker.clone()).collect();
        let c = &self.cfg.corpus;
        let splits = assign_splits(&speakers, c)?;
        let records: Vec<(String, DMatrix<f64>)> = utts.iter().map(|u| (u.id.clone(), u.feats.clone())).collect();
        write_archive(&self.path(paths::FEATS), &records)?;
        self.write(paths::UTT2SPK, &render_pairs(utts.iter().map(|u| (u.id.as_str(), u.speaker.as_str()))))?;
        self.write(
            paths::UTT2SPLIT,
            &render_pairs(utts.iter().map(|u| (u.id.as_str(), splits[&u.speaker]))),
        )?;
        self.write(
            paths::LABELS,
            &render_labels(utts.iter().filter_map(|u| u.labels.as_deref().map(|l| (u.id.as_str(), l)))),
        )?;
        for split in SPLITS {
            let members: Vec<(String, String)> = utts
                .iter()
                .filter(|u| splits[&u.speaker] == split)
                .map(|u| (u.id.clone(), u.speaker.clone()))
                .collect();
            self.write(key_path(split), &trial_key(&members))?;
        }
        info!("features: {} utterances from {} speakers", utts.len(), speakers.len());
        Ok(())
    }

    fn vad(&self) -> Result<()> {
        let feats = read_archive(&self.path(paths::FEATS))?;
        let labels = read_labels(&self.path(paths::LABELS))?;
        let v = &self.cfg.vad;
        let kept: Vec<(String, DMatrix<f64>, Option<Vec<usize>>)> = feats
            .par_iter()
            .map(|(id, m)| {
                let f = FeatureMatrix::new(m.clone());
                let mask = energy_vad(&f, v.threshold_offset, v.context);
                if mask.kept() == 0 {
                    return Err(Error::DegenerateEnergy(format!("VAD kept no frames of `{id}`")));
                }
                let out = apply_mask(&f, &mask)?;
                let l = labels
                    .get(id)
                    .map(|l| l.iter().zip(&mask.keep).filter(|(_, &k)| k).map(|(&x, _)| x).collect());
                Ok((id.clone(), out.values, l))
            })
            .collect::<Result<_>>()?;
        let total: usize = feats.iter().map(|(_, m)| m.nrows()).sum();
        let voiced: usize = kept.iter().map(|(_, m, _)| m.nrows()).sum();
        info!("vad: kept {voiced} of {total} frames");
        let records: Vec<(String, DMatrix<f64>)> = kept.iter().map(|(id, m, _)| (id.clone(), m.clone())).collect();
        write_archive(&self.path(paths::VAD), &records)?;
        self.write(
            paths::VAD_LABELS,
            &render_labels(kept.iter().filter_map(|(id, _, l)| l.as_deref().map(|l| (id.as_str(), l)))),
        )
    }

    fn split_map(&self) -> Result<HashMap<String, String>> {
        Ok(read_pairs(&self.path(paths::UTT2SPLIT))?.into_iter().collect())
    }

    fn speaker_map(&self) -> Result<HashMap<String, String>> {
        Ok(read_pairs(&self.path(paths::UTT2SPK))?.into_iter().collect())
    }

    fn train(&self, i: usize) -> Result<()> {
        let sub = &self.cfg.subsystems[i];
        let feats = read_archive(&self.path(paths::VAD))?;
        let labels = read_labels(&self.path(paths::VAD_LABELS))?;
        let split = self.split_map()?;
        let u2s = self.speaker_map()?;
        let train_utts: Vec<&(String, DMatrix<f64>)> =
            feats.iter().filter(|(id, _)| split.get(id).map(String::as_str) == Some("train")).collect();
        let speakers: BTreeSet<&str> = train_utts.iter().map(|(id, _)| u2s[id].as_str()).collect();
        let index: HashMap<&str, usize> = speakers.iter().enumerate().map(|(k, s)| (*s, k)).collect();

        let mut spec = builtin(&sub.architecture)?.scaled(sub.width);
        let tap = spec.tap.branch.clone();
        spec.classes.insert(tap.clone(), speakers.len());
        let head_branches: Vec<String> = spec.classes.keys().filter(|b| **b != tap).cloned().collect();
        let use_labels = !head_branches.is_empty() && sub.loss.multitask_weight > 0.0;
        if use_labels {
            let have = train_utts.iter().all(|(id, _)| labels.contains_key(id));
            if !have {
                return Err(Error::Config(format!(
                    "subsystem `{}` ({}) needs frame labels for every training utterance",
                    sub.name, sub.architecture
                )));
            }
            let senones = train_utts.iter().flat_map(|(id, _)| labels[id].iter()).max().map_or(1, |m| m + 1);
            for b in &head_branches {
                spec.classes.insert(b.clone(), senones);
            }
        }
        let feat_dim = train_utts.first().map(|(_, m)| m.ncols()).unwrap_or(0);
        let seed = self.cfg.train_seed(i);
        let mut net = Network::init(spec, feat_dim, seed)?;
        let data: Vec<TrainUtterance> = train_utts
            .iter()
            .map(|(id, m)| TrainUtterance {
                id: id.clone(),
                feats: m.clone(),
                speaker: index[u2s[id].as_str()],
                frame_labels: if use_labels { labels.get(id).cloned() } else { None },
            })
            .collect();
        let report = train(&mut net, &data, &[], &sub.loss, &sub.train, seed)?;
        info!(
            "train/{}: {} steps, final epoch loss {:.4}, train accuracy {:.3}",
            sub.name,
            report.steps,
            report.epoch_losses.last().copied().unwrap_or(f64::NAN),
            report.train_accuracy
        );
        save_network(&self.sys_path(i, "model.bin"), &net, &sub.loss)
    }

    fn extract(&self, i: usize) -> Result<()> {
        let (net, _) = load_network(&self.sys_path(i, "model.bin"))?;
        let feats = read_archive(&self.path(paths::VAD))?;
        let embs: Vec<(String, DVector<f64>)> = feats
            .par_iter()
            .map(|(id, m)| extract_embedding(&net, m, id).map(|e| (id.clone(), e.vector)))
            .collect::<Result<_>>()?;
        write_vectors(&self.sys_path(i, "embeddings.ark"), &embs)
    }

    /// Training-split vectors with speaker indices.
    fn train_vectors(&self, vecs: &[(String, DVector<f64>)]) -> Result<(Vec<DVector<f64>>, Vec<usize>)> {
        let split = self.split_map()?;
        let u2s = self.speaker_map()?;
        let mut index: BTreeMap<&str, usize> = BTreeMap::new();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (id, v) in vecs {
            if split.get(id).map(String::as_str) != Some("train") {
                continue;
            }
            let spk = u2s
                .get(id)
                .ok_or_else(|| Error::InvalidInput(format!("no speaker for `{id}`")))?;
            let n = index.len();
            let k = *index.entry(spk.as_str()).or_insert(n);
            xs.push(v.clone());
            ys.push(k);
        }
        Ok((xs, ys))
    }

    fn lda(&self, i: usize) -> Result<()> {
        let vecs = read_vectors(&self.sys_path(i, "embeddings.ark"))?;
        let (xs, ys) = self.train_vectors(&vecs)?;
        let m = lda_fit(&xs, &ys, self.cfg.backend.lda_dim)?;
        save_lda(&self.sys_path(i, "lda.bin"), &m)
    }

    fn length_norm(&self, i: usize) -> Result<()> {
        let lda = load_lda(&self.sys_path(i, "lda.bin"))?;
        let vecs = read_vectors(&self.sys_path(i, "embeddings.ark"))?;
        let out: Vec<(String, DVector<f64>)> = vecs
            .iter()
            .map(|(id, v)| Ok((id.clone(), length_norm(&lda.apply(v)?)?)))
            .collect::<Result<_>>()?;
        write_vectors(&self.sys_path(i, "lnorm.ark"), &out)
    }

    fn plda(&self, i: usize) -> Result<()> {
        let vecs = read_vectors(&self.sys_path(i, "lnorm.ark"))?;
        let (xs, ys) = self.train_vectors(&vecs)?;
        let fit = plda_fit(&xs, &ys, self.cfg.backend.plda_iters)?;
        if let (Some(a), Some(b)) = (fit.log_likelihoods.first(), fit.log_likelihoods.last()) {
            info!("plda/{}: log-likelihood {a:.3} -> {b:.3}", self.cfg.subsystems[i].name);
        }
        save_plda(&self.sys_path(i, "plda.bin"), &fit.model)
    }

    fn vectors_of(&self, i: usize, split: &str) -> Result<Vec<(String, DVector<f64>)>> {
        let s = self.split_map()?;
        Ok(read_vectors(&self.sys_path(i, "lnorm.ark"))?
            .into_iter()
            .filter(|(id, _)| s.get(id).map(String::as_str) == Some(split))
            .collect())
    }

    fn adapt(&self, i: usize) -> Result<()> {
        let m = load_plda(&self.sys_path(i, "plda.bin"))?;
        let indomain: Vec<DVector<f64>> = self.vectors_of(i, "adapt")?.into_iter().map(|(_, v)| v).collect();
        let adapted = if indomain.is_empty() {
            info!("adapt/{}: no in-domain speakers, PLDA left unchanged", self.cfg.subsystems[i].name);
            m
        } else {
            plda_adapt(&m, &indomain, &self.cfg.backend.adapt)?
        };
        save_plda(&self.sys_path(i, "plda_adapted.bin"), &adapted)
    }

    fn score(&self, i: usize) -> Result<()> {
        let scorer = PldaScorer::new(&load_plda(&self.sys_path(i, "plda_adapted.bin"))?)?;
        let vecs: HashMap<String, DVector<f64>> = read_vectors(&self.sys_path(i, "lnorm.ark"))?.into_iter().collect();
        for split in SPLITS {
            let kp = self.path(key_path(split));
            let key = parse_key(&read_text(&kp)?, &kp)?;
            let pairs: Vec<(&(String, String), &TrialLabel)> = key.iter().collect();
            let trials: Vec<Trial> = pairs
                .par_iter()
                .map(|((e, t), &label)| {
                    let get = |id: &String| {
                        vecs.get(id)
                            .ok_or_else(|| Error::InvalidInput(format!("trial references unknown utterance `{id}`")))
                    };
                    Ok(Trial {
                        enroll: e.clone(),
                        test: t.clone(),
                        score: scorer.score(get(e)?, get(t)?)?,
                        label,
                    })
                })
                .collect::<Result<_>>()?;
            let set = TrialScoreSet::new(trials)?;
            write_atomic(&self.sys_path(i, &format!("scores_{split}.txt")), render_scores(&set).as_bytes())?;
        }
        Ok(())
    }

    fn asnorm(&self, i: usize) -> Result<()> {
        let name = &self.cfg.subsystems[i].name;
        let sn = &self.cfg.scorenorm;
        let cohort: Vec<DVector<f64>> = self.vectors_of(i, "train")?.into_iter().map(|(_, v)| v).collect();
        let scorer = PldaScorer::new(&load_plda(&self.sys_path(i, "plda_adapted.bin"))?)?;
        let vecs: HashMap<String, DVector<f64>> = read_vectors(&self.sys_path(i, "lnorm.ark"))?.into_iter().collect();
        let k = sn.top_k.min(cohort.len());
        if sn.enabled && k < sn.top_k {
            warn!("asnorm/{name}: top-K reduced from {} to cohort size {k}", sn.top_k);
        }
        for split in SPLITS {
            let sp = self.sys_path(i, &format!("scores_{split}.txt"));
            let raw = parse_scores(&read_text(&sp)?, &sp)?;
            let out = if sn.enabled {
                let ids: Vec<String> = raw
                    .iter()
                    .flat_map(|(e, t, _)| [e.clone(), t.clone()])
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .collect();
                let targets: Vec<DVector<f64>> = ids
                    .iter()
                    .map(|id| {
                        vecs.get(id)
                            .cloned()
                            .ok_or_else(|| Error::InvalidInput(format!("scored utterance `{id}` has no embedding")))
                    })
                    .collect::<Result<_>>()?;
                let cm = cohort_score_matrix(&scorer, &targets, &cohort)?;
                let stats: HashMap<&str, CohortStats> = ids
                    .iter()
                    .enumerate()
                    .map(|(r, id)| {
                        let row: Vec<f64> = cm.row(r).iter().copied().collect();
                        CohortStats::top_k(&row, k).map(|s| (id.as_str(), s))
                    })
                    .collect::<Result<_>>()?;
                let trials: Vec<Trial> = raw
                    .iter()
                    .map(|(e, t, s)| {
                        Ok(Trial {
                            enroll: e.clone(),
                            test: t.clone(),
                            score: asnorm_with(*s, &stats[e.as_str()], &stats[t.as_str()])?,
                            label: TrialLabel::Unknown,
                        })
                    })
                    .collect::<Result<_>>()?;
                render_scores(&TrialScoreSet::new(trials)?)
            } else {
                read_text(&sp)?
            };
            write_atomic(&self.sys_path(i, &format!("asnorm_{split}.txt")), out.as_bytes())?;
        }
        Ok(())
    }

    fn calibrate(&self, i: usize) -> Result<()> {
        let dev = load_set(&self.sys_path(i, "asnorm_dev.txt"), &self.path(paths::KEY_DEV))?;
        let (scores, labels) = dev.labeled();
        let map = pav_fit(&scores, &labels)?;
        let text = toml::to_string(&map).map_err(|e| Error::InvalidInput(format!("cannot encode calibration: {e}")))?;
        write_atomic(&self.sys_path(i, "calibration.toml"), text.as_bytes())?;
        for split in SPLITS {
            let sp = self.sys_path(i, &format!("asnorm_{split}.txt"));
            let raw = parse_scores(&read_text(&sp)?, &sp)?;
            let out: String = raw
                .iter()
                .map(|(e, t, s)| format!("{e} {t} {:.9}\n", map.apply(*s)))
                .collect();
            write_atomic(&self.sys_path(i, &format!("calibrated_{split}.txt")), out.as_bytes())?;
        }
        Ok(())
    }

    /// Rows are the trials of the first subsystem's file; every subsystem
    /// must score exactly the same trials.
    fn fusion_matrix(&self, split: &str) -> Result<(Vec<(String, String)>, DMatrix<f64>)> {
        let n_sys = self.cfg.subsystems.len();
        let mut order: Vec<(String, String)> = Vec::new();
        let mut cols: Vec<HashMap<(String, String), f64>> = Vec::new();
        for i in 0..n_sys {
            let p = self.sys_path(i, &format!("calibrated_{split}.txt"));
            let rows = parse_scores(&read_text(&p)?, &p)?;
            if i == 0 {
                order = rows.iter().map(|(e, t, _)| (e.clone(), t.clone())).collect();
            }
            let map: HashMap<(String, String), f64> = rows.into_iter().map(|(e, t, s)| ((e, t), s)).collect();
            if map.len() != order.len() || order.iter().any(|k| !map.contains_key(k)) {
                return Err(Error::InvalidInput(format!(
                    "subsystem `{}` scores a different {split} trial list",
                    self.cfg.subsystems[i].name
                )));
            }
            cols.push(map);
        }
        let x = DMatrix::from_fn(order.len(), n_sys, |r, c| cols[c][&order[r]]);
        Ok((order, x))
    }

    fn fuse(&self) -> Result<()> {
        if !self.cfg.fusion_enabled() {
            info!("fuse: single subsystem, nothing to fuse");
            return Ok(());
        }
        let kp = self.path(paths::KEY_DEV);
        let key = parse_key(&read_text(&kp)?, &kp)?;
        let (order, x) = self.fusion_matrix("dev")?;
        let labeled: Vec<usize> = (0..order.len())
            .filter(|&r| matches!(key.get(&order[r]), Some(TrialLabel::Target | TrialLabel::Nontarget)))
            .collect();
        let xl = x.select_rows(&labeled);
        let yl: Vec<bool> = labeled.iter().map(|&r| key[&order[r]] == TrialLabel::Target).collect();
        let fit = fusion_fit(&xl, &yl, &self.cfg.fusion)?;
        info!(
            "fuse: weights {:?}, offset {:.4} after {} iterations",
            fit.model.weights, fit.model.offset, fit.iterations
        );
        let file = FusionFile {
            subsystems: self.cfg.subsystems.iter().map(|s| s.name.clone()).collect(),
            model: fit.model.clone(),
        };
        let text = toml::to_string(&file).map_err(|e| Error::InvalidInput(format!("cannot encode fusion: {e}")))?;
        self.write(paths::FUSION_MODEL, &text)?;
        for split in SPLITS {
            let (order, x) = if split == "dev" { (order.clone(), x.clone()) } else { self.fusion_matrix(split)? };
            let mut out = String::new();
            for (r, (e, t)) in order.iter().enumerate() {
                let row: Vec<f64> = x.row(r).iter().copied().collect();
                let _ = writeln!(out, "{e} {t} {:.9}", fit.model.apply(&row)?);
            }
            self.write(if split == "dev" { paths::FUSED_DEV } else { paths::FUSED_EVAL }, &out)?;
        }
        Ok(())
    }

    fn evaluate(&self) -> Result<()> {
        let rows = summarize(self.cfg, self.workdir)?;
        let table = render_table(&rows);
        info!("evaluate:\n{table}");
        self.write(paths::REPORT, &table)
    }
}

/// Loads a calibration map written by the calibrate stage.
pub fn load_calibration(path: &Path) -> Result<CalibrationMap> {
    toml::from_str(&read_text(path)?).map_err(|e| Error::format(path, e.to_string()))
}
