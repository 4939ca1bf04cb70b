//! `key=value` run configuration. Unknown keys are rejected.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ffsv_core::backend::{EdaConfig, PldaConfig};
use ffsv_core::embed_net::{Pooling, TrainOptions, Variant};
use ffsv_core::eval::{DcfParams, Fusion};
use ffsv_core::features::FeatureConfig;
use ffsv_core::room_sim::{MicLayout, RoomConfig};
use ffsv_core::vad::GvadConfig;
use ffsv_core::{FeatureKind, NetworkConfig, TrainSchedule};

/// A configuration or command-line mistake; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    Cosine,
    Plda,
}

impl FromStr for Backend {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "cosine" => Ok(Backend::Cosine),
            "plda" => Ok(Backend::Plda),
            _ => Err(format!("unknown backend {s:?} (cosine|plda)")),
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backend::Cosine => "cosine",
            Backend::Plda => "plda",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mics {
    Single,
    Circular4,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub feature_kind: FeatureKind,
    pub pre_emphasis: f64,
    pub mean_norm: bool,
    pub n_mels: usize,
    pub n_mfcc: usize,
    pub variant: Variant,
    pub width: f64,
    pub blocks: Option<[usize; 4]>,
    pub embedding_dim: Option<usize>,
    pub pooling: Option<Pooling>,
    pub schedule: TrainSchedule,
    pub batch_size: usize,
    pub crop_frames: usize,
    pub finetune_epochs: usize,
    pub room: RoomConfig,
    pub mics: Mics,
    pub mic_radius: f64,
    pub gvad: GvadConfig,
    pub plda: PldaConfig,
    pub backend: Backend,
    pub fusion: Fusion,
    pub eda: bool,
    pub eda_cfg: EdaConfig,
    pub dcf: DcfParams,
    pub synth_speakers: usize,
    pub synth_utts: usize,
    pub synth_noises: usize,
    pub synth_noise_secs: f64,
    pub simulate_suffix: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            feature_kind: FeatureKind::LogMel,
            pre_emphasis: 0.97,
            mean_norm: true,
            n_mels: 64,
            n_mfcc: 30,
            variant: Variant::ResNet34,
            width: 1.0,
            blocks: None,
            embedding_dim: None,
            pooling: None,
            schedule: TrainSchedule::default(),
            batch_size: 32,
            crop_frames: 300,
            finetune_epochs: 10,
            room: RoomConfig::default(),
            mics: Mics::Single,
            mic_radius: 0.05,
            gvad: GvadConfig::default(),
            plda: PldaConfig::default(),
            backend: Backend::Cosine,
            fusion: Fusion::Multi,
            eda: false,
            eda_cfg: EdaConfig::default(),
            dcf: DcfParams::default(),
            synth_speakers: 20,
            synth_utts: 8,
            synth_noises: 6,
            synth_noise_secs: 3.0,
            simulate_suffix: String::new(),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T, UsageError>
where
    T::Err: fmt::Display,
{
    v.parse()
        .map_err(|e| UsageError(format!("{key}: cannot parse {v:?}: {e}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool, UsageError> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(UsageError(format!("{key}: expected true/false, got {v:?}"))),
    }
}

fn parse_range(key: &str, v: &str) -> Result<(f64, f64), UsageError> {
    let (a, b) = v
        .split_once(',')
        .ok_or_else(|| UsageError(format!("{key}: expected lo,hi, got {v:?}")))?;
    let (lo, hi) = (parse::<f64>(key, a.trim())?, parse::<f64>(key, b.trim())?);
    if lo > hi {
        return Err(UsageError(format!("{key}: lower bound above upper bound")));
    }
    Ok((lo, hi))
}

fn fmt_range((a, b): (f64, f64)) -> String {
    format!("{a},{b}")
}

fn parse_blocks(key: &str, v: &str) -> Result<Option<[usize; 4]>, UsageError> {
    if v == "default" {
        return Ok(None);
    }
    let parts: Vec<usize> = v
        .split(',')
        .map(|p| parse(key, p.trim()))
        .collect::<Result<_, _>>()?;
    let arr: [usize; 4] = parts
        .try_into()
        .map_err(|_| UsageError(format!("{key}: expected four block counts")))?;
    Ok(Some(arr))
}

fn opt<T: fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or("default".to_string(), |x| x.to_string())
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), UsageError> {
        let v = v.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "feature.kind" => self.feature_kind = parse(key, v)?,
            "feature.pre_emphasis" => self.pre_emphasis = parse(key, v)?,
            "feature.mean_norm" => self.mean_norm = parse_bool(key, v)?,
            "feature.n_mels" => self.n_mels = parse(key, v)?,
            "feature.n_mfcc" => self.n_mfcc = parse(key, v)?,
            "net.variant" => self.variant = parse(key, v)?,
            "net.width" => self.width = parse(key, v)?,
            "net.blocks" => self.blocks = parse_blocks(key, v)?,
            "net.embedding_dim" => {
                self.embedding_dim = if v == "default" { None } else { Some(parse(key, v)?) }
            }
            "net.pooling" => self.pooling = if v == "default" { None } else { Some(parse(key, v)?) },
            "train.lr" => self.schedule.initial_lr = parse(key, v)?,
            "train.epochs" => self.schedule.epochs = parse(key, v)?,
            "train.decay_every" => self.schedule.decay_every = parse(key, v)?,
            "train.decay_factor" => self.schedule.decay_factor = parse(key, v)?,
            "train.momentum" => self.schedule.momentum = parse(key, v)?,
            "train.weight_decay" => self.schedule.weight_decay = parse(key, v)?,
            "train.batch_size" => self.batch_size = parse(key, v)?,
            "train.crop_frames" => self.crop_frames = parse(key, v)?,
            "finetune.epochs" => self.finetune_epochs = parse(key, v)?,
            "room.width_range" => self.room.width_range = parse_range(key, v)?,
            "room.depth_range" => self.room.depth_range = parse_range(key, v)?,
            "room.height_range" => self.room.height_range = parse_range(key, v)?,
            "absorption_range" => self.room.absorption_range = parse_range(key, v)?,
            "max_order" => self.room.max_order = parse(key, v)?,
            "snr_range" => self.room.snr_range = parse_range(key, v)?,
            "room.mics" => {
                self.mics = match v {
                    "single" => Mics::Single,
                    "circular4" => Mics::Circular4,
                    _ => return Err(UsageError(format!("{key}: expected single|circular4"))),
                }
            }
            "room.mic_radius" => self.mic_radius = parse(key, v)?,
            "gvad.n_trees" => self.gvad.n_trees = parse(key, v)?,
            "gvad.max_depth" => self.gvad.max_depth = parse(key, v)?,
            "gvad.shrinkage" => self.gvad.shrinkage = parse(key, v)?,
            "gvad.min_leaf" => self.gvad.min_leaf = parse(key, v)?,
            "plda.iters" => self.plda.n_iters = parse(key, v)?,
            "plda.whiten" => self.plda.whiten = parse_bool(key, v)?,
            "plda.length_norm" => self.plda.length_norm = parse_bool(key, v)?,
            "backend" => self.backend = parse(key, v)?,
            "fusion" => self.fusion = parse(key, v)?,
            "eda" => self.eda = parse_bool(key, v)?,
            "eda.snr_range" => self.eda_cfg.snr_range = parse_range(key, v)?,
            "eda.min_noise_secs" => self.eda_cfg.min_noise_secs = parse(key, v)?,
            "dcf.p_target" => self.dcf.p_target = parse(key, v)?,
            "dcf.c_miss" => self.dcf.c_miss = parse(key, v)?,
            "dcf.c_fa" => self.dcf.c_fa = parse(key, v)?,
            "synth.speakers" => self.synth_speakers = parse(key, v)?,
            "synth.utts" => self.synth_utts = parse(key, v)?,
            "synth.noises" => self.synth_noises = parse(key, v)?,
            "synth.noise_secs" => self.synth_noise_secs = parse(key, v)?,
            "simulate.suffix" => self.simulate_suffix = v.to_string(),
            _ => return Err(UsageError(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), UsageError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            self.apply_pair(line)
                .map_err(|e| UsageError(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn apply_pair(&mut self, pair: &str) -> Result<(), UsageError> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| UsageError(format!("expected key=value, got {pair:?}")))?;
        self.set(k.trim(), v)
    }

    /// Defaults, then the optional file, then each override in order.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self, UsageError> {
        let mut cfg = Self::default();
        if let Some(p) = file {
            let text = std::fs::read_to_string(p)
                .map_err(|e| UsageError(format!("cannot read config {}: {e}", p.display())))?;
            cfg.apply_text(&text, &p.display().to_string())?;
        }
        for o in overrides {
            cfg.apply_pair(o)?;
        }
        Ok(cfg)
    }

    /// Every key with its effective value, sorted by key.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let s = &self.schedule;
        let mics = match self.mics {
            Mics::Single => "single",
            Mics::Circular4 => "circular4",
        };
        let mut v = vec![
            ("seed", self.seed.to_string()),
            ("feature.kind", self.feature_kind.to_string()),
            ("feature.pre_emphasis", self.pre_emphasis.to_string()),
            ("feature.mean_norm", self.mean_norm.to_string()),
            ("feature.n_mels", self.n_mels.to_string()),
            ("feature.n_mfcc", self.n_mfcc.to_string()),
            ("net.variant", self.variant.to_string()),
            ("net.width", self.width.to_string()),
            (
                "net.blocks",
                self.blocks.map_or("default".into(), |b| {
                    b.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
                }),
            ),
            ("net.embedding_dim", opt(&self.embedding_dim)),
            ("net.pooling", opt(&self.pooling)),
            ("train.lr", s.initial_lr.to_string()),
            ("train.epochs", s.epochs.to_string()),
            ("train.decay_every", s.decay_every.to_string()),
            ("train.decay_factor", s.decay_factor.to_string()),
            ("train.momentum", s.momentum.to_string()),
            ("train.weight_decay", s.weight_decay.to_string()),
            ("train.batch_size", self.batch_size.to_string()),
            ("train.crop_frames", self.crop_frames.to_string()),
            ("finetune.epochs", self.finetune_epochs.to_string()),
            ("room.width_range", fmt_range(self.room.width_range)),
            ("room.depth_range", fmt_range(self.room.depth_range)),
            ("room.height_range", fmt_range(self.room.height_range)),
            ("absorption_range", fmt_range(self.room.absorption_range)),
            ("max_order", self.room.max_order.to_string()),
            ("snr_range", fmt_range(self.room.snr_range)),
            ("room.mics", mics.to_string()),
            ("room.mic_radius", self.mic_radius.to_string()),
            ("gvad.n_trees", self.gvad.n_trees.to_string()),
            ("gvad.max_depth", self.gvad.max_depth.to_string()),
            ("gvad.shrinkage", self.gvad.shrinkage.to_string()),
            ("gvad.min_leaf", self.gvad.min_leaf.to_string()),
            ("plda.iters", self.plda.n_iters.to_string()),
            ("plda.whiten", self.plda.whiten.to_string()),
            ("plda.length_norm", self.plda.length_norm.to_string()),
            ("backend", self.backend.to_string()),
            ("fusion", self.fusion.to_string()),
            ("eda", self.eda.to_string()),
            ("eda.snr_range", fmt_range(self.eda_cfg.snr_range)),
            ("eda.min_noise_secs", self.eda_cfg.min_noise_secs.to_string()),
            ("dcf.p_target", self.dcf.p_target.to_string()),
            ("dcf.c_miss", self.dcf.c_miss.to_string()),
            ("dcf.c_fa", self.dcf.c_fa.to_string()),
            ("synth.speakers", self.synth_speakers.to_string()),
            ("synth.utts", self.synth_utts.to_string()),
            ("synth.noises", self.synth_noises.to_string()),
            ("synth.noise_secs", self.synth_noise_secs.to_string()),
            ("simulate.suffix", self.simulate_suffix.clone()),
        ];
        v.sort_by_key(|(k, _)| *k);
        v
    }

    pub fn features(&self) -> FeatureConfig {
        let mut f = match self.feature_kind {
            FeatureKind::LogMel => FeatureConfig::default(),
            FeatureKind::Mfcc => FeatureConfig::mfcc(),
        };
        f.pre_emphasis = self.pre_emphasis;
        f.mean_norm = self.mean_norm;
        f.mel.n_mels = self.n_mels;
        f.n_mfcc = self.n_mfcc;
        f
    }

    pub fn room_config(&self) -> RoomConfig {
        RoomConfig {
            mic_layout: match self.mics {
                Mics::Single => MicLayout::Single,
                Mics::Circular4 => MicLayout::Circular4 {
                    radius: self.mic_radius,
                },
            },
            ..self.room.clone()
        }
    }

    pub fn network(&self, n_classes: usize) -> NetworkConfig {
        let mut cfg = match self.variant {
            Variant::ResNet34 => NetworkConfig::resnet34(n_classes),
            Variant::ResNet50 => NetworkConfig::resnet50(n_classes),
        }
        .with_width(self.width)
        .with_input_dim(self.features().output_dim());
        if let Some(b) = self.blocks {
            cfg = cfg.with_blocks(b);
        }
        if let Some(d) = self.embedding_dim {
            cfg = cfg.with_embedding_dim(d);
        }
        if let Some(p) = self.pooling {
            cfg.pooling = p;
        }
        cfg
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            batch_size: self.batch_size,
            crop_frames: self.crop_frames,
        }
    }
}
