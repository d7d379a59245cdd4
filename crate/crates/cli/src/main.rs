use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use xvec::archive::{read_text, write_archive, write_atomic};
use xvec::embedder::{grad_check, GradCheckConfig, LossConfig};
use xvec::netspec::{builtin, parse_netspec, receptive_field, render_netspec, validate, BUILTIN_NAMES};
use xvec::pipeline::{evaluate, run_pipeline, PipelineConfig, Stage};
use xvec::toy::gen_toy_audio;
use xvec::{Error, Result};

/// Speaker-verification toolkit: embedding training, PLDA back-end,
/// score normalization, calibration, fusion and evaluation.
#[derive(Parser)]
#[command(name = "xvec", version)]
struct Cli {
    /// Pipeline config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-utterance work (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Work directory holding artifacts and the manifest.
    #[arg(long, global = true, default_value = "work")]
    workdir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus (feature archive, utt2spk, frame labels).
    GenToy {
        #[arg(long)]
        out: PathBuf,
    },
    /// Feature extraction and VAD.
    Features,
    /// Train every subsystem's embedding network.
    Train,
    /// Extract embeddings.
    Extract,
    /// LDA, length normalization, PLDA and PLDA adaptation.
    BackendFit,
    /// PLDA scoring of the dev and eval trials.
    Score,
    /// Adaptive symmetric score normalization.
    Asnorm,
    /// PAV calibration on the dev trials.
    Calibrate,
    /// Linear fusion of the calibrated subsystems.
    Fuse,
    /// Metric report; with --scores and --key, evaluates a single score file.
    Evaluate {
        #[arg(long, requires = "key")]
        scores: Option<PathBuf>,
        #[arg(long, requires = "scores")]
        key: Option<PathBuf>,
    },
    /// Run a range of pipeline stages (all by default).
    Run {
        #[arg(long, default_value = "features")]
        from: String,
        #[arg(long, default_value = "evaluate")]
        to: String,
    },
    /// Parse and validate an architecture (builtin name or file).
    ValidateSpec { spec: String },
    /// Finite-difference gradient check of a reduced-width architecture.
    GradCheck {
        #[arg(long)]
        arch: String,
        #[arg(long, default_value = "am_softmax")]
        loss: String,
        #[arg(long, default_value_t = 1.0 / 64.0)]
        width: f64,
    },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn stages(cli: &Cli, from: Stage, to: Stage) -> Result<()> {
    let cfg = load_config(cli)?;
    let s = run_pipeline(&cfg, &cli.workdir, from, to)?;
    for id in &s.executed {
        println!("ran       {id}");
    }
    for id in &s.skipped {
        println!("skipped   {id} (up to date)");
    }
    Ok(())
}

fn gen_toy(cli: &Cli, out: &Path) -> Result<()> {
    let cfg = load_config(cli)?;
    let utts = gen_toy_audio(&cfg.corpus.toy, cfg.seed)?;
    let recs: Vec<_> = utts.iter().map(|u| (u.id.clone(), u.feats.clone())).collect();
    write_archive(&out.join("feats.ark"), &recs)?;
    let mut u2s = String::new();
    let mut labels = String::new();
    for u in &utts {
        u2s.push_str(&format!("{} {}\n", u.id, u.speaker));
        labels.push_str(&u.id);
        for l in &u.frame_labels {
            labels.push_str(&format!(" {l}"));
        }
        labels.push('\n');
    }
    write_atomic(&out.join("utt2spk"), u2s.as_bytes())?;
    write_atomic(&out.join("frame_labels"), labels.as_bytes())?;
    println!("wrote {} utterances to {}", utts.len(), out.display());
    Ok(())
}

fn validate_spec(spec: &str) -> Result<()> {
    let n = if BUILTIN_NAMES.contains(&spec) {
        builtin(spec)?
    } else {
        parse_netspec(&read_text(Path::new(spec))?)?
    };
    let report = validate(&n);
    print!("{}", render_netspec(&n));
    if !report.is_ok() {
        for v in &report.violations {
            println!("violation at {}: {}", v.location, v.message);
        }
        return Err(Error::Config(format!("{} violation(s)", report.violations.len())));
    }
    let (lo, hi) = receptive_field(&n, &n.tap.branch)?;
    println!(
        "ok: pooled dim {}, embedding dim {}, receptive field -{lo}..+{hi}",
        n.pooled_dim().map_or("-".into(), |d| d.to_string()),
        n.embedding_dim().map_or("-".into(), |d| d.to_string())
    );
    Ok(())
}

fn run_grad_check(cli: &Cli, arch: &str, loss: &str, width: f64) -> Result<()> {
    let spec = builtin(arch)?;
    let loss = match loss {
        "softmax" => LossConfig::softmax(),
        "am_softmax" => LossConfig::am_softmax(),
        "a_softmax" => LossConfig::a_softmax(),
        other => return Err(Error::Config(format!("unknown loss `{other}`"))),
    };
    let cfg = GradCheckConfig {
        width,
        ..Default::default()
    };
    let r = grad_check(&spec, &loss, &cfg, cli.seed.unwrap_or(0))?;
    for (name, e) in &r.per_tensor {
        println!("{name:<28} {e:.3e}");
    }
    println!(
        "max relative error {:.3e} at {} ({} probes, {} skipped at kinks)",
        r.max_rel_error, r.worst, r.checked, r.skipped
    );
    if r.max_rel_error >= 1e-4 {
        return Err(Error::Numerical(format!("gradient mismatch {:.3e} at {}", r.max_rel_error, r.worst)));
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    use Stage::*;
    match &cli.command {
        Command::GenToy { out } => gen_toy(cli, out),
        Command::Features => stages(cli, Features, Vad),
        Command::Train => stages(cli, Train, Train),
        Command::Extract => stages(cli, Extract, Extract),
        Command::BackendFit => stages(cli, Lda, Adapt),
        Command::Score => stages(cli, Score, Score),
        Command::Asnorm => stages(cli, Asnorm, Asnorm),
        Command::Calibrate => stages(cli, Calibrate, Calibrate),
        Command::Fuse => stages(cli, Fuse, Fuse),
        Command::Evaluate { scores, key } => match (scores, key) {
            (Some(s), Some(k)) => {
                let cfg = load_config(cli)?;
                println!("{}", evaluate(s, k, &cfg.dcf)?);
                Ok(())
            }
            _ => {
                stages(cli, Evaluate, Evaluate)?;
                print!("{}", read_text(&cli.workdir.join("report.txt"))?);
                Ok(())
            }
        },
        Command::Run { from, to } => stages(cli, Stage::parse(from)?, Stage::parse(to)?),
        Command::ValidateSpec { spec } => validate_spec(spec),
        Command::GradCheck { arch, loss, width } => run_grad_check(cli, arch, loss, *width),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            error!("cannot configure {n} workers: {e}");
            return ExitCode::from(1);
        }
    }
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.class().exit_code() as u8)
        }
    }
}
