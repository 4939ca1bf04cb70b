//! `ffsv`: far-field speaker verification pipeline driver.
//!
//! Exit status: 0 on success, 1 when a row fails or a runtime error occurs,
//! 2 for usage and configuration errors.

mod commands;
mod config;
mod manifest;
mod runlog;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{RunConfig, UsageError};

#[derive(Args, Clone)]
struct ConfigArgs {
    /// File of `key=value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides one key; may be repeated. Applied after `--config`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, UsageError> {
        let mut overrides = self.set.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        RunConfig::resolve(self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the toy corpus, noise bank, manifests and trial list.
    SynthDataset {
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate far-field copies of manifest items.
    Simulate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        noise_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Output manifest; defaults to `<out-dir>/manifest.tsv`.
        #[arg(long)]
        out_manifest: Option<PathBuf>,
    },
    /// Write a feature archive.
    ExtractFeatures {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the gradient-boosted VAD on clean audio and simulated copies.
    TrainVad {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        noise_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the embedding network from one or more manifests.
    Train {
        #[arg(long, required = true)]
        manifest: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Continue training a model at the fine-tuning learning rate.
    Finetune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, required = true)]
        manifest: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed every manifest item.
    ExtractEmbeddings {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit PLDA on embeddings labelled through their manifests.
    TrainPlda {
        #[arg(long, required = true)]
        embeddings: Vec<PathBuf>,
        #[arg(long, required = true)]
        manifest: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a trial list.
    Score {
        #[arg(long)]
        trials: PathBuf,
        #[arg(long, required = true)]
        embeddings: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        plda: Option<PathBuf>,
        /// Embedding model, needed with `eda=true`.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Manifests locating enrollment and test audio for `eda=true`.
        #[arg(long)]
        manifest: Vec<PathBuf>,
        /// GVAD model for finding test non-speech; energy VAD otherwise.
        #[arg(long)]
        vad: Option<PathBuf>,
    },
    /// Print EER and minDCF for a score file.
    Evaluate {
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Parser)]
#[command(name = "ffsv", version, about = "Far-field speaker verification toolkit")]
struct Top {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(subcommand)]
    command: Command,
}

fn run(top: Top) -> anyhow::Result<usize> {
    let cfg = top.cfg.resolve()?;
    log::debug!("resolved config: {:?}", cfg.entries());
    match top.command {
        Command::SynthDataset { out } => commands::synth_dataset(&cfg, &out),
        Command::Simulate {
            manifest,
            noise_dir,
            out_dir,
            out_manifest,
        } => commands::simulate(&cfg, &manifest, &noise_dir, &out_dir, out_manifest.as_deref()),
        Command::ExtractFeatures { manifest, out } => commands::extract_features(&cfg, &manifest, &out),
        Command::TrainVad {
            manifest,
            noise_dir,
            out,
        } => commands::train_vad(&cfg, &manifest, &noise_dir, &out),
        Command::Train { manifest, out } => commands::train(&cfg, &manifest, &out),
        Command::Finetune { model, manifest, out } => commands::finetune(&cfg, &model, &manifest, &out),
        Command::ExtractEmbeddings { model, manifest, out } => {
            commands::extract_embeddings(&cfg, &model, &manifest, &out)
        }
        Command::TrainPlda {
            embeddings,
            manifest,
            out,
        } => commands::train_plda(&cfg, &embeddings, &manifest, &out),
        Command::Score {
            trials,
            embeddings,
            out,
            plda,
            model,
            manifest,
            vad,
        } => commands::score(
            &cfg,
            &commands::ScoreInputs {
                trials: &trials,
                embeddings: &embeddings,
                out: &out,
                plda: plda.as_deref(),
                model: model.as_deref(),
                manifests: &manifest,
                vad: vad.as_deref(),
            },
        ),
        Command::Evaluate { trials, scores, out } => commands::evaluate(&cfg, &trials, &scores, out.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let top = match Top::try_parse() {
        Ok(t) => t,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(top) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(n) => {
            eprintln!("error: {n} row(s) failed");
            ExitCode::from(1)
        }
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
