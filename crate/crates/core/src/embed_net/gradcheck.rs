//! Central finite-difference check of analytic gradients.

use std::collections::HashSet;

use rand::Rng;

use super::layers::{softmax_cross_entropy, Linear, Matrix, Mode, Parameters, Tensor};
use super::Model;
use crate::error::Result;

/// A scalar loss over a set of trainable tensors.
pub trait LossModel {
    /// Element counts of the trainable tensors.
    fn tensor_sizes(&self) -> Vec<usize>;
    fn get(&self, tensor: usize, index: usize) -> f64;
    fn set(&mut self, tensor: usize, index: usize, value: f64);
    /// Loss plus a signature of the piecewise-linear regime (ReLU pattern).
    fn evaluate(&mut self) -> Result<(f64, u64)>;
    /// Analytic gradient per trainable tensor, and the regime signature.
    fn gradients(&mut self) -> Result<(Vec<Vec<f64>>, u64)>;
}

/// Cross-entropy of a full network on one fixed batch.
pub struct ModelLoss {
    pub model: Model,
    pub input: Tensor,
    pub labels: Vec<usize>,
    pub mode: Mode,
}

impl ModelLoss {
    fn trainable(&self) -> Vec<usize> {
        self.model
            .net
            .params()
            .iter()
            .enumerate()
            .filter(|(_, (_, p))| p.trainable)
            .map(|(i, _)| i)
            .collect()
    }
}

impl LossModel for ModelLoss {
    fn tensor_sizes(&self) -> Vec<usize> {
        let params = self.model.net.params();
        self.trainable().iter().map(|&i| params[i].1.len()).collect()
    }

    fn get(&self, tensor: usize, index: usize) -> f64 {
        let t = self.trainable()[tensor];
        self.model.net.params()[t].1.value[index]
    }

    fn set(&mut self, tensor: usize, index: usize, value: f64) {
        let t = self.trainable()[tensor];
        self.model.net.params_mut()[t].1.value[index] = value;
    }

    fn evaluate(&mut self) -> Result<(f64, u64)> {
        // Train-mode forward moves the running statistics; keep them fixed
        // so repeated evaluations see the same model.
        let saved = self.model.clone();
        let (out, cache) = self.model.forward_batch(&self.input, self.mode)?;
        let (loss, _) = softmax_cross_entropy(&out.logits, &self.labels)?;
        self.model = saved;
        Ok((loss, cache.kink_signature()))
    }

    fn gradients(&mut self) -> Result<(Vec<Vec<f64>>, u64)> {
        let saved = self.model.clone();
        self.model.zero_grad();
        let (out, cache) = self.model.forward_batch(&self.input, self.mode)?;
        let (_, d) = softmax_cross_entropy(&out.logits, &self.labels)?;
        self.model.net.backward(&cache, &d, None);
        let trainable = self.trainable();
        let params = self.model.net.params();
        let grads = trainable
            .iter()
            .map(|&i| {
                let p = params[i].1;
                (0..p.len()).map(|k| p.grad_at(k)).collect()
            })
            .collect();
        drop(params);
        self.model = saved;
        Ok((grads, cache.kink_signature()))
    }
}

/// Two stacked linear layers and softmax cross-entropy on fixed inputs.
pub struct LinearHead {
    pub hidden: Linear,
    pub output: Linear,
    pub input: Matrix,
    pub labels: Vec<usize>,
}

impl LinearHead {
    pub fn new<R: Rng + ?Sized>(
        input: Matrix,
        labels: Vec<usize>,
        hidden: usize,
        classes: usize,
        rng: &mut R,
    ) -> Self {
        let mut h = Linear::new(input.cols, hidden, rng);
        let mut o = Linear::new(hidden, classes, rng);
        for b in h.bias.value.iter_mut().chain(o.bias.value.iter_mut()) {
            *b = rng.random_range(-0.5..0.5);
        }
        Self {
            hidden: h,
            output: o,
            input,
            labels,
        }
    }

    fn layer(&self, t: usize) -> &Linear {
        if t < 2 {
            &self.hidden
        } else {
            &self.output
        }
    }

    fn layer_mut(&mut self, t: usize) -> &mut Linear {
        if t < 2 {
            &mut self.hidden
        } else {
            &mut self.output
        }
    }
}

impl LossModel for LinearHead {
    fn tensor_sizes(&self) -> Vec<usize> {
        vec![
            self.hidden.weight.len(),
            self.hidden.bias.len(),
            self.output.weight.len(),
            self.output.bias.len(),
        ]
    }

    fn get(&self, t: usize, i: usize) -> f64 {
        let l = self.layer(t);
        if t % 2 == 0 {
            l.weight.value[i]
        } else {
            l.bias.value[i]
        }
    }

    fn set(&mut self, t: usize, i: usize, v: f64) {
        let l = self.layer_mut(t);
        if t % 2 == 0 {
            l.weight.value[i] = v;
        } else {
            l.bias.value[i] = v;
        }
    }

    fn evaluate(&mut self) -> Result<(f64, u64)> {
        let h = self.hidden.forward(&self.input);
        let logits = self.output.forward(&h);
        Ok((softmax_cross_entropy(&logits, &self.labels)?.0, 0))
    }

    fn gradients(&mut self) -> Result<(Vec<Vec<f64>>, u64)> {
        for l in [&mut self.hidden, &mut self.output] {
            for (_, p) in l.params_mut() {
                p.zero_grad();
            }
        }
        let h = self.hidden.forward(&self.input);
        let logits = self.output.forward(&h);
        let (_, d) = softmax_cross_entropy(&logits, &self.labels)?;
        let dh = self.output.backward(&h, &d);
        self.hidden.backward(&self.input, &dh);
        Ok((
            vec![
                self.hidden.weight.grad.clone(),
                self.hidden.bias.grad.clone(),
                self.output.weight.grad.clone(),
                self.output.bias.grad.clone(),
            ],
            0,
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameters whose ±epsilon probe crossed a ReLU kink.
    pub skipped: usize,
}

/// Denominator floor for the relative error, so parameters with vanishing
/// gradients are judged on absolute agreement.
pub const REL_ERROR_FLOOR: f64 = 1e-7;

/// Compares analytic gradients with central differences on `n_params`
/// sampled scalars (at least one from every tensor when `n_params` allows).
/// Probes that change the ReLU pattern are replaced by fresh samples.
pub fn grad_check<M: LossModel + ?Sized, R: Rng + ?Sized>(
    model: &mut M,
    n_params: usize,
    epsilon: f64,
    rng: &mut R,
) -> Result<GradCheckReport> {
    let sizes = model.tensor_sizes();
    let total: usize = sizes.iter().sum();
    let (grads, signature) = model.gradients()?;
    let mut seen = HashSet::new();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut tensor_cursor = 0;
    let budget = 50 * n_params.max(1);
    let mut attempts = 0;
    while report.checked < n_params.min(total) && seen.len() < total && attempts < budget {
        attempts += 1;
        let (t, i) = if tensor_cursor < sizes.len() {
            tensor_cursor += 1;
            let t = tensor_cursor - 1;
            if sizes[t] == 0 {
                continue;
            }
            (t, rng.random_range(0..sizes[t]))
        } else {
            let mut flat = rng.random_range(0..total);
            let mut t = 0;
            while flat >= sizes[t] {
                flat -= sizes[t];
                t += 1;
            }
            (t, flat)
        };
        if !seen.insert((t, i)) {
            continue;
        }
        let orig = model.get(t, i);
        model.set(t, i, orig + epsilon);
        let (lp, sp) = model.evaluate()?;
        model.set(t, i, orig - epsilon);
        let (lm, sm) = model.evaluate()?;
        model.set(t, i, orig);
        if sp != signature || sm != signature {
            report.skipped += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * epsilon);
        let analytic = grads[t][i];
        let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
        let rel = (analytic - numeric).abs() / denom;
        if rel > report.max_rel_error {
            log::debug!("tensor {t} index {i}: analytic {analytic:e} numeric {numeric:e}");
        }
        report.max_rel_error = report.max_rel_error.max(rel);
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed_net::NetworkConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_head_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let input = Matrix {
            rows: 5,
            cols: 6,
            data: (0..30).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        let mut head = LinearHead::new(input, vec![0, 1, 2, 1, 0], 7, 3, &mut rng);
        let r = grad_check(&mut head, 200, 1e-4, &mut rng).unwrap();
        assert!(r.checked >= 70, "{r:?}");
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn zero_input_gives_zero_conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = NetworkConfig::resnet34(3)
            .with_width(0.125)
            .with_blocks([1, 1, 1, 1])
            .with_embedding_dim(4)
            .with_input_dim(16);
        for mode in [Mode::Train, Mode::Eval] {
            let mut ml = ModelLoss {
                model: Model::new(cfg.clone(), &mut rng).unwrap(),
                input: Tensor::zeros(2, 1, 16, 16),
                labels: vec![0, 2],
                mode,
            };
            let names: Vec<String> = ml
                .model
                .net
                .params()
                .into_iter()
                .filter(|(_, p)| p.trainable)
                .map(|(n, _)| n)
                .collect();
            let (grads, _) = ml.gradients().unwrap();
            for (n, g) in names.iter().zip(&grads) {
                if n.ends_with("weight") && !n.starts_with("embedding") && !n.starts_with("classifier") {
                    assert!(g.iter().all(|v| *v == 0.0), "{n}");
                }
            }
            assert!(grads.last().unwrap().iter().any(|v| *v != 0.0));
        }
    }
}
