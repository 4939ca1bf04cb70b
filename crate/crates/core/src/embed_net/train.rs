//! Minibatch SGD with momentum on softmax cross-entropy.

use rand::seq::SliceRandom;
use rand::Rng;

use super::layers::{softmax_cross_entropy, Mode, Parameters};
use super::Model;
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;

pub const FINE_TUNE_LR: f64 = 0.001;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSchedule {
    pub initial_lr: f64,
    pub epochs: usize,
    pub decay_every: usize,
    pub decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for TrainSchedule {
    /// 50 epochs from 0.1, divided by ten every 20 epochs.
    fn default() -> Self {
        Self {
            initial_lr: 0.1,
            epochs: 50,
            decay_every: 20,
            decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

impl TrainSchedule {
    pub fn constant(lr: f64, epochs: usize) -> Self {
        Self {
            initial_lr: lr,
            epochs,
            decay_every: usize::MAX,
            decay_factor: 1.0,
            ..Self::default()
        }
    }

    /// Fixed 0.001 for fine-tuning.
    pub fn fine_tune(epochs: usize) -> Self {
        Self::constant(FINE_TUNE_LR, epochs)
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        if self.decay_every == 0 || self.decay_every == usize::MAX {
            return self.initial_lr;
        }
        let steps = (epoch / self.decay_every) as i32;
        // divide by 10^k rather than multiply by 0.1^k: 0.1 / 100 is 0.001 exactly
        self.initial_lr / (1.0 / self.decay_factor).powi(steps)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub batch_size: usize,
    /// Training crop length in frames; shorter utterances are wrapped.
    pub crop_frames: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            batch_size: 32,
            crop_frames: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    /// `(epoch, lr, mean loss)`
    pub epochs: Vec<(usize, f64, f64)>,
}

impl TrainLog {
    /// One `epoch<TAB>lr<TAB>loss` line per epoch.
    pub fn to_tsv(&self) -> String {
        self.epochs
            .iter()
            .map(|(e, lr, loss)| format!("{e}\t{lr}\t{loss:.6}\n"))
            .collect()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.2).collect()
    }
}

/// Random fixed-length window; utterances shorter than `len` wrap around.
pub fn random_crop<R: Rng + ?Sized>(f: &FeatureMatrix, len: usize, rng: &mut R) -> FeatureMatrix {
    if f.frames >= len {
        let start = rng.random_range(0..=f.frames - len);
        return f.slice_frames(start, start + len);
    }
    let start = rng.random_range(0..f.frames);
    let mut data = Vec::with_capacity(len * f.dims);
    for t in 0..len {
        data.extend_from_slice(f.row((start + t) % f.frames));
    }
    FeatureMatrix {
        data,
        frames: len,
        ..f.clone()
    }
}

fn check_dataset(model: &Model, data: &[(FeatureMatrix, usize)], opts: &TrainOptions) -> Result<()> {
    let k = model.config.n_classes;
    if let Some((_, y)) = data.iter().find(|(_, y)| *y >= k) {
        return Err(Error::invalid(format!("label {y} outside [0, {k})")));
    }
    if let Some((f, _)) = data.iter().find(|(f, _)| f.dims != model.config.input_dim) {
        return Err(Error::DimensionMismatch {
            expected: model.config.input_dim,
            got: f.dims,
        });
    }
    if data.iter().any(|(f, _)| f.frames == 0) {
        return Err(Error::invalid("empty utterance in training set"));
    }
    if opts.crop_frames < model.config.min_frames() {
        return Err(Error::TooShort {
            needed: model.config.min_frames(),
            got: opts.crop_frames,
        });
    }
    if opts.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    Ok(())
}

/// Trains in place and returns the per-epoch loss log.
pub fn train<R: Rng + ?Sized>(
    model: &mut Model,
    data: &[(FeatureMatrix, usize)],
    sched: &TrainSchedule,
    opts: &TrainOptions,
    rng: &mut R,
) -> Result<TrainLog> {
    check_dataset(model, data, opts)?;
    let mut log = TrainLog::default();
    if sched.epochs == 0 || data.is_empty() {
        return Ok(log);
    }
    let mut velocity: Vec<Vec<f64>> = model
        .net
        .params()
        .iter()
        .map(|(_, p)| if p.trainable { vec![0.0; p.len()] } else { Vec::new() })
        .collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..sched.epochs {
        let lr = sched.lr(epoch);
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(opts.batch_size) {
            let crops: Vec<FeatureMatrix> = chunk
                .iter()
                .map(|&i| random_crop(&data[i].0, opts.crop_frames, rng))
                .collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data[i].1).collect();
            let refs: Vec<&FeatureMatrix> = crops.iter().collect();
            let x = model.batch(&refs)?;
            model.zero_grad();
            let (out, cache) = model.forward_batch(&x, Mode::Train)?;
            let (loss, d_logits) = softmax_cross_entropy(&out.logits, &labels)?;
            model.net.backward(&cache, &d_logits, None);
            total += loss * chunk.len() as f64;
            for ((_, p), v) in model.net.params_mut().into_iter().zip(velocity.iter_mut()) {
                if !p.trainable {
                    continue;
                }
                let grad = p.grad_mut().to_vec();
                for ((w, g), vel) in p.value.iter_mut().zip(&grad).zip(v.iter_mut()) {
                    let g = g + sched.weight_decay * *w;
                    *vel = sched.momentum * *vel + g;
                    *w -= lr * *vel;
                }
            }
        }
        let mean = total / data.len() as f64;
        if !mean.is_finite() {
            return Err(Error::invalid(format!("training diverged at epoch {epoch}")));
        }
        log::debug!("epoch {epoch} lr {lr} loss {mean:.6}");
        log.epochs.push((epoch, lr, mean));
    }
    Ok(log)
}

/// Continues training at a constant 0.001. The classifier is re-initialized
/// when `n_classes` differs from the model's.
pub fn fine_tune<R: Rng + ?Sized>(
    model: &mut Model,
    data: &[(FeatureMatrix, usize)],
    n_classes: usize,
    epochs: usize,
    opts: &TrainOptions,
    rng: &mut R,
) -> Result<TrainLog> {
    if epochs == 0 {
        return Ok(TrainLog::default());
    }
    if n_classes != model.config.n_classes {
        model.reset_classifier(n_classes, rng);
    }
    train(model, data, &TrainSchedule::fine_tune(epochs), opts, rng)
}
