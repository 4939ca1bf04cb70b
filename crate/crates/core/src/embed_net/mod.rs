//! ResNet speaker-embedding networks with global statistics pooling.
//!
//! Input features enter as a single-channel image: frequency is the height,
//! frames are the width. Everything runs in `f64`; checkpoints store `f32`.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};

use crate::backend::Embedding;
use crate::binio;
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;

pub mod gradcheck;
pub mod layers;
pub mod resnet;
pub mod train;

pub use gradcheck::{grad_check, GradCheckReport, LinearHead, LossModel, ModelLoss};
pub use layers::{Matrix, Mode, Param, Parameters, Pooling, Tensor};
pub use resnet::{Network, Output, StageShape};
pub use train::{fine_tune, train, TrainLog, TrainOptions, TrainSchedule, FINE_TUNE_LR};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    ResNet34,
    ResNet50,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::ResNet34 => "resnet34",
            Variant::ResNet50 => "resnet50",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resnet34" => Ok(Variant::ResNet34),
            "resnet50" => Ok(Variant::ResNet50),
            _ => Err(Error::invalid(format!("unknown network variant '{s}'"))),
        }
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::MeanStd => "mean_std",
            Pooling::Mean => "mean",
        })
    }
}

impl FromStr for Pooling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean_std" => Ok(Pooling::MeanStd),
            "mean" => Ok(Pooling::Mean),
            _ => Err(Error::invalid(format!("unknown pooling '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub variant: Variant,
    /// Scales every channel count; 1.0 gives the full-size network.
    pub width_multiplier: f64,
    pub block_counts: [usize; 4],
    pub embedding_dim: usize,
    pub n_classes: usize,
    pub pooling: Pooling,
    /// Feature dimension (input height).
    pub input_dim: usize,
}

impl NetworkConfig {
    /// 64-d log-Mel input, base width 32, blocks (3,4,6,3), 128-d embedding.
    pub fn resnet34(n_classes: usize) -> Self {
        Self {
            variant: Variant::ResNet34,
            width_multiplier: 1.0,
            block_counts: [3, 4, 6, 3],
            embedding_dim: 128,
            n_classes,
            pooling: Pooling::MeanStd,
            input_dim: 64,
        }
    }

    /// 30-d MFCC input, base width 64, bottleneck blocks (3,4,6,5),
    /// mean pooling to 2048, 1024-d embedding.
    pub fn resnet50(n_classes: usize) -> Self {
        Self {
            variant: Variant::ResNet50,
            width_multiplier: 1.0,
            block_counts: [3, 4, 6, 5],
            embedding_dim: 1024,
            n_classes,
            pooling: Pooling::Mean,
            input_dim: 30,
        }
    }

    pub fn with_width(mut self, w: f64) -> Self {
        self.width_multiplier = w;
        self
    }

    pub fn with_blocks(mut self, b: [usize; 4]) -> Self {
        self.block_counts = b;
        self
    }

    pub fn with_embedding_dim(mut self, d: usize) -> Self {
        self.embedding_dim = d;
        self
    }

    pub fn with_input_dim(mut self, d: usize) -> Self {
        self.input_dim = d;
        self
    }

    pub fn base_channels(&self) -> usize {
        let full = match self.variant {
            Variant::ResNet34 => 32.0,
            Variant::ResNet50 => 64.0,
        };
        ((full * self.width_multiplier).round() as usize).max(1)
    }

    /// Shortest input (in frames) that survives every stride.
    pub fn min_frames(&self) -> usize {
        match self.variant {
            Variant::ResNet34 => 8,
            Variant::ResNet50 => 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width_multiplier.is_finite() && self.width_multiplier > 0.0) {
            return Err(Error::invalid("width multiplier must be positive"));
        }
        if self.block_counts.contains(&0) {
            return Err(Error::invalid("every layer needs at least one block"));
        }
        if self.embedding_dim == 0 || self.n_classes == 0 || self.input_dim == 0 {
            return Err(Error::invalid(
                "embedding dim, class count and input dim must be positive",
            ));
        }
        Ok(())
    }
}

/// A network plus its configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: NetworkConfig,
    pub net: Network,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: NetworkConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let net = Network::new(&config, rng);
        Ok(Self { config, net })
    }

    /// Stacks equal-length feature matrices into a `[n, 1, dims, frames]` batch.
    pub fn batch(&self, items: &[&FeatureMatrix]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("empty batch"))?;
        let (t, d) = (first.frames, first.dims);
        if d != self.config.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.config.input_dim,
                got: d,
            });
        }
        if t < self.config.min_frames() {
            return Err(Error::TooShort {
                needed: self.config.min_frames(),
                got: t,
            });
        }
        let mut x = Tensor::zeros(items.len(), 1, d, t);
        for (i, f) in items.iter().enumerate() {
            if f.frames != t || f.dims != d {
                return Err(Error::invalid("batch items must share a shape"));
            }
            let dst = x.item_mut(i);
            for (tt, row) in f.rows().enumerate() {
                for (k, v) in row.iter().enumerate() {
                    dst[k * t + tt] = *v;
                }
            }
        }
        Ok(x)
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        self.net
            .validate_input(x, self.config.min_frames(), self.config.input_dim)
    }

    /// Forward a batch. Train mode uses batch statistics and updates the
    /// running statistics, so it needs `&mut self`.
    pub fn forward_batch(&mut self, x: &Tensor, mode: Mode) -> Result<(Output, resnet::Cache)> {
        self.check(x)?;
        self.net.forward(x, mode)
    }

    /// Eval-mode forward with per-stage output shapes.
    pub fn infer(&self, x: &Tensor) -> Result<(Output, Vec<StageShape>)> {
        self.check(x)?;
        self.net.infer_traced(x)
    }

    /// Single-utterance forward: `(embedding, logits)`.
    pub fn forward(&mut self, f: &FeatureMatrix, mode: Mode) -> Result<(Vec<f64>, Vec<f64>)> {
        let x = self.batch(&[f])?;
        let out = match mode {
            Mode::Eval => self.infer(&x)?.0,
            Mode::Train => self.forward_batch(&x, mode)?.0,
        };
        Ok((out.embedding.data, out.logits.data))
    }

    /// Eval-mode embedding of the full utterance (no crop).
    pub fn embed(&self, f: &FeatureMatrix) -> Result<Vec<f64>> {
        let x = self.batch(&[f])?;
        Ok(self.infer(&x)?.0.embedding.data)
    }

    pub fn reset_classifier<R: Rng + ?Sized>(&mut self, n_classes: usize, rng: &mut R) {
        self.config.n_classes = n_classes;
        self.net.reset_classifier(n_classes, rng);
    }

    pub fn parameter_count(&self) -> usize {
        self.net
            .params()
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(_, p)| p.len())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.net.params_mut() {
            p.zero_grad();
        }
    }

    /// Every value finite and every running variance positive.
    pub fn is_healthy(&self) -> bool {
        self.net.params().iter().all(|(n, p)| {
            p.value.iter().all(|v| v.is_finite())
                && (!n.ends_with("running_var") || p.value.iter().all(|&v| v > 0.0))
        })
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        let c = &self.config;
        binio::write_magic(w, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        binio::write_str(w, &c.variant.to_string())?;
        binio::write_f64(w, c.width_multiplier)?;
        for &b in &c.block_counts {
            binio::write_u32(w, binio::len_u32(b)?)?;
        }
        binio::write_u32(w, binio::len_u32(c.embedding_dim)?)?;
        binio::write_u32(w, binio::len_u32(c.n_classes)?)?;
        binio::write_str(w, &c.pooling.to_string())?;
        binio::write_u32(w, binio::len_u32(c.input_dim)?)?;
        let params = self.net.params();
        binio::write_u32(w, binio::len_u32(params.len())?)?;
        for (name, p) in params {
            binio::write_str(w, &name)?;
            binio::write_u32(w, binio::len_u32(p.shape.len())?)?;
            for &d in &p.shape {
                binio::write_u32(w, binio::len_u32(d)?)?;
            }
            binio::write_f32_slice(w, &p.value)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let version = binio::read_magic(r, CHECKPOINT_MAGIC)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedFormat(format!(
                "checkpoint version {version}"
            )));
        }
        let variant: Variant = binio::read_str(r)?.parse()?;
        let width_multiplier = binio::read_f64(r)?;
        let mut block_counts = [0usize; 4];
        for b in block_counts.iter_mut() {
            *b = binio::read_u32(r)? as usize;
        }
        let embedding_dim = binio::read_u32(r)? as usize;
        let n_classes = binio::read_u32(r)? as usize;
        let pooling: Pooling = binio::read_str(r)?.parse()?;
        let input_dim = binio::read_u32(r)? as usize;
        let config = NetworkConfig {
            variant,
            width_multiplier,
            block_counts,
            embedding_dim,
            n_classes,
            pooling,
            input_dim,
        };
        config
            .validate()
            .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        // Build the skeleton with a throwaway generator, then overwrite.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut model = Model::new(config, &mut rng)?;
        let count = binio::read_u32(r)? as usize;
        let mut params = model.net.params_mut();
        if count != params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {count} tensors, architecture needs {}",
                params.len()
            )));
        }
        for (name, p) in params.iter_mut() {
            let stored = binio::read_str(r)?;
            if &stored != name {
                return Err(Error::Format(format!(
                    "expected tensor '{name}', found '{stored}'"
                )));
            }
            let rank = binio::read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(binio::read_u32(r)? as usize);
            }
            if shape != p.shape {
                return Err(Error::Format(format!(
                    "tensor '{name}' has shape {shape:?}, expected {:?}",
                    p.shape
                )));
            }
            p.value = binio::read_f32_vec(r, p.len())?;
        }
        drop(params);
        if !model.is_healthy() {
            return Err(Error::Format("checkpoint holds non-finite values".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(&mut BufReader::new(File::open(path)?))
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"FFSVMODL";
const CHECKPOINT_VERSION: u32 = 1;

/// Eval-mode embedding of one utterance.
pub fn extract_embedding(model: &Model, id: &str, f: &FeatureMatrix) -> Result<Embedding> {
    Ok(Embedding::new(id, model.embed(f)?))
}
