//! Residual blocks and the full embedding network.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::Rng;

use super::layers::{
    gsp, gsp_backward, join_params, join_params_mut, relu, relu_backward, BatchNorm2d, BnCache,
    Conv2d, GspCache, Linear, Matrix, Mode, Param, Parameters, Pooling, Tensor,
};
use super::{NetworkConfig, Variant};
use crate::error::{Error, Result};

/// Convolution followed by batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBn {
    fn new<R: Rng + ?Sized>(i: usize, o: usize, k: usize, s: usize, rng: &mut R) -> Self {
        Self {
            conv: Conv2d::new(i, o, k, s, rng),
            bn: BatchNorm2d::new(o),
        }
    }

    fn forward(&mut self, x: &Tensor, mode: Mode) -> (Tensor, BnCache) {
        let y = self.conv.forward(x);
        self.bn.forward(&y, mode)
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        self.bn.infer(&self.conv.forward(x))
    }

    fn backward(&mut self, x: &Tensor, cache: &BnCache, dy: &Tensor) -> Tensor {
        let d = self.bn.backward(cache, dy);
        self.conv.backward(x, &d)
    }

    fn params_named(&self, conv: &str, bn: &str) -> Vec<(String, &Param)> {
        join_params(vec![(conv, self.conv.params()), (bn, self.bn.params())])
    }

    fn params_named_mut(&mut self, conv: &str, bn: &str) -> Vec<(String, &mut Param)> {
        join_params_mut(vec![(conv, self.conv.params_mut()), (bn, self.bn.params_mut())])
    }
}

/// Residual block: a chain of conv-bn units with ReLU between them, an
/// identity or projection shortcut, and a ReLU after the sum. Two 3×3 units
/// make a basic block; 1×1, 3×3, 1×1 make a bottleneck.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub units: Vec<ConvBn>,
    pub shortcut: Option<ConvBn>,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    inputs: Vec<Tensor>,
    bns: Vec<BnCache>,
    masks: Vec<Vec<bool>>,
    shortcut_bn: Option<BnCache>,
    out_mask: Vec<bool>,
}

impl Block {
    pub fn basic<R: Rng + ?Sized>(i: usize, o: usize, stride: usize, rng: &mut R) -> Self {
        Self {
            units: vec![ConvBn::new(i, o, 3, stride, rng), ConvBn::new(o, o, 3, 1, rng)],
            shortcut: (stride != 1 || i != o).then(|| ConvBn::new(i, o, 1, stride, rng)),
        }
    }

    pub fn bottleneck<R: Rng + ?Sized>(
        i: usize,
        mid: usize,
        o: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            units: vec![
                ConvBn::new(i, mid, 1, 1, rng),
                ConvBn::new(mid, mid, 3, stride, rng),
                ConvBn::new(mid, o, 1, 1, rng),
            ],
            shortcut: (stride != 1 || i != o).then(|| ConvBn::new(i, o, 1, stride, rng)),
        }
    }

    fn forward(&mut self, x: &Tensor, mode: Mode) -> (Tensor, BlockCache) {
        let last = self.units.len() - 1;
        let mut inputs = Vec::with_capacity(self.units.len());
        let mut bns = Vec::with_capacity(self.units.len());
        let mut masks = Vec::with_capacity(last);
        let mut h = x.clone();
        for (k, unit) in self.units.iter_mut().enumerate() {
            let (mut y, c) = unit.forward(&h, mode);
            bns.push(c);
            if k < last {
                masks.push(relu(&mut y));
            }
            inputs.push(std::mem::replace(&mut h, y));
        }
        let (skip, shortcut_bn) = match self.shortcut.as_mut() {
            Some(s) => {
                let (y, c) = s.forward(x, mode);
                (y, Some(c))
            }
            None => (x.clone(), None),
        };
        h.data.iter_mut().zip(&skip.data).for_each(|(a, b)| *a += b);
        let out_mask = relu(&mut h);
        (
            h,
            BlockCache {
                inputs,
                bns,
                masks,
                shortcut_bn,
                out_mask,
            },
        )
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        let last = self.units.len() - 1;
        let mut h = x.clone();
        for (k, unit) in self.units.iter().enumerate() {
            h = unit.infer(&h);
            if k < last {
                relu(&mut h);
            }
        }
        let skip = match &self.shortcut {
            Some(s) => s.infer(x),
            None => x.clone(),
        };
        h.data.iter_mut().zip(&skip.data).for_each(|(a, b)| *a += b);
        relu(&mut h);
        h
    }

    fn backward(&mut self, cache: &BlockCache, dy: &Tensor) -> Tensor {
        let mut d = dy.clone();
        relu_backward(&cache.out_mask, &mut d);
        let mut dx = match self.shortcut.as_mut() {
            Some(s) => s.backward(&cache.inputs[0], cache.shortcut_bn.as_ref().expect("cache"), &d),
            None => d.clone(),
        };
        let mut g = d;
        for k in (0..self.units.len()).rev() {
            if k < self.units.len() - 1 {
                relu_backward(&cache.masks[k], &mut g);
            }
            g = self.units[k].backward(&cache.inputs[k], &cache.bns[k], &g);
        }
        dx.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b);
        dx
    }

    fn hash_masks<H: Hasher>(cache: &BlockCache, h: &mut H) {
        cache.masks.hash(h);
        cache.out_mask.hash(h);
    }
}

impl Parameters for Block {
    fn params(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        for (k, u) in self.units.iter().enumerate() {
            out.extend(u.params_named(&format!("conv{}", k + 1), &format!("bn{}", k + 1)));
        }
        if let Some(s) = &self.shortcut {
            out.extend(s.params_named("downsample.0", "downsample.1"));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        for (k, u) in self.units.iter_mut().enumerate() {
            out.extend(u.params_named_mut(&format!("conv{}", k + 1), &format!("bn{}", k + 1)));
        }
        if let Some(s) = self.shortcut.as_mut() {
            out.extend(s.params_named_mut("downsample.0", "downsample.1"));
        }
        out
    }
}

/// Front-end, pooling, embedding and classifier layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub stem: ConvBn,
    pub layers: Vec<Vec<Block>>,
    pub pooling: Pooling,
    pub embedding: Linear,
    pub classifier: Linear,
}

/// Per-item embeddings and logits for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Output {
    pub embedding: Matrix,
    pub logits: Matrix,
}

/// Everything backward needs from one training forward pass.
#[derive(Debug, Clone)]
pub struct Cache {
    input: Tensor,
    stem_bn: BnCache,
    stem_mask: Vec<bool>,
    blocks: Vec<Vec<BlockCache>>,
    pooled_input: Tensor,
    gsp: GspCache,
    encoding: Matrix,
    embedding: Matrix,
}

impl Cache {
    /// Hash of every ReLU activity pattern; equal signatures mean the loss
    /// was evaluated on the same piecewise-smooth region.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.stem_mask.hash(&mut h);
        for layer in &self.blocks {
            for b in layer {
                Block::hash_masks(b, &mut h);
            }
        }
        h.finish()
    }
}

/// Output shape of one stage: `(name, [channels, freq, time])`, or a vector
/// length as `[len, 1, 1]` after pooling.
pub type StageShape = (String, [usize; 3]);

impl Network {
    pub fn new<R: Rng + ?Sized>(cfg: &NetworkConfig, rng: &mut R) -> Self {
        let base = cfg.base_channels();
        let (stem_k, stem_s) = match cfg.variant {
            Variant::ResNet34 => (3, 1),
            Variant::ResNet50 => (7, 2),
        };
        let stem = ConvBn::new(1, base, stem_k, stem_s, rng);
        let mut in_c = base;
        let mut layers = Vec::with_capacity(4);
        for (l, &count) in cfg.block_counts.iter().enumerate() {
            let width = base << l;
            let mut blocks = Vec::with_capacity(count);
            for b in 0..count {
                let stride = if b == 0 && l > 0 { 2 } else { 1 };
                let block = match cfg.variant {
                    Variant::ResNet34 => Block::basic(in_c, width, stride, rng),
                    Variant::ResNet50 => Block::bottleneck(in_c, width, width * 4, stride, rng),
                };
                in_c = match cfg.variant {
                    Variant::ResNet34 => width,
                    Variant::ResNet50 => width * 4,
                };
                blocks.push(block);
            }
            layers.push(blocks);
        }
        let enc = cfg.pooling.output_dim(in_c);
        Self {
            stem,
            layers,
            pooling: cfg.pooling,
            embedding: Linear::new(enc, cfg.embedding_dim, rng),
            classifier: Linear::new(cfg.embedding_dim, cfg.n_classes, rng),
        }
    }

    pub fn encoding_dim(&self) -> usize {
        self.embedding.input_dim()
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<(Output, Cache)> {
        let (mut h, stem_bn) = self.stem.forward(x, mode);
        let stem_mask = relu(&mut h);
        let mut blocks = Vec::with_capacity(self.layers.len());
        for layer in self.layers.iter_mut() {
            let mut caches = Vec::with_capacity(layer.len());
            for b in layer.iter_mut() {
                let (y, c) = b.forward(&h, mode);
                caches.push(c);
                h = y;
            }
            blocks.push(caches);
        }
        let (encoding, gsp_cache) = gsp(&h, self.pooling)?;
        let embedding = self.embedding.forward(&encoding);
        let logits = self.classifier.forward(&embedding);
        Ok((
            Output {
                embedding: embedding.clone(),
                logits,
            },
            Cache {
                input: x.clone(),
                stem_bn,
                stem_mask,
                blocks,
                pooled_input: h,
                gsp: gsp_cache,
                encoding,
                embedding,
            },
        ))
    }

    /// Eval-mode forward through `&self`, also reporting every stage shape.
    pub fn infer_traced(&self, x: &Tensor) -> Result<(Output, Vec<StageShape>)> {
        let mut shapes = Vec::new();
        let mut h = self.stem.infer(x);
        relu(&mut h);
        shapes.push(("conv1".to_string(), [h.c, h.h, h.w]));
        for (l, layer) in self.layers.iter().enumerate() {
            for b in layer {
                h = b.infer(&h);
            }
            shapes.push((format!("layer{}", l + 1), [h.c, h.h, h.w]));
        }
        let (encoding, _) = gsp(&h, self.pooling)?;
        shapes.push(("encoding".to_string(), [encoding.cols, 1, 1]));
        let embedding = self.embedding.forward(&encoding);
        shapes.push(("embedding".to_string(), [embedding.cols, 1, 1]));
        let logits = self.classifier.forward(&embedding);
        shapes.push(("classifier".to_string(), [logits.cols, 1, 1]));
        Ok((Output { embedding, logits }, shapes))
    }

    /// Accumulates parameter gradients given loss gradients w.r.t. the
    /// logits and, optionally, the embedding.
    pub fn backward(&mut self, cache: &Cache, d_logits: &Matrix, d_embedding: Option<&Matrix>) {
        let mut d_emb = self.classifier.backward(&cache.embedding, d_logits);
        if let Some(extra) = d_embedding {
            d_emb.data.iter_mut().zip(&extra.data).for_each(|(a, b)| *a += b);
        }
        let d_enc = self.embedding.backward(&cache.encoding, &d_emb);
        let mut d = gsp_backward(&cache.pooled_input, &cache.gsp, &d_enc, self.pooling);
        for (l, layer) in self.layers.iter_mut().enumerate().rev() {
            for (b, block) in layer.iter_mut().enumerate().rev() {
                d = block.backward(&cache.blocks[l][b], &d);
            }
        }
        relu_backward(&cache.stem_mask, &mut d);
        self.stem.backward(&cache.input, &cache.stem_bn, &d);
    }

    pub fn reset_classifier<R: Rng + ?Sized>(&mut self, n_classes: usize, rng: &mut R) {
        self.classifier = Linear::new(self.embedding.output_dim(), n_classes, rng);
    }

    pub fn validate_input(&self, x: &Tensor, min_frames: usize, input_dim: usize) -> Result<()> {
        if x.c != 1 || x.h != input_dim {
            return Err(Error::DimensionMismatch {
                expected: input_dim,
                got: x.h,
            });
        }
        if x.w < min_frames {
            return Err(Error::TooShort {
                needed: min_frames,
                got: x.w,
            });
        }
        Ok(())
    }
}

impl Parameters for Network {
    fn params(&self) -> Vec<(String, &Param)> {
        let mut out = self.stem.params_named("conv1", "bn1");
        for (l, layer) in self.layers.iter().enumerate() {
            for (b, block) in layer.iter().enumerate() {
                out.extend(join_params(vec![(
                    &format!("layer{}.{b}", l + 1),
                    block.params(),
                )]));
            }
        }
        out.extend(join_params(vec![
            ("embedding", self.embedding.params()),
            ("classifier", self.classifier.params()),
        ]));
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = self.stem.params_named_mut("conv1", "bn1");
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (b, block) in layer.iter_mut().enumerate() {
                let name = format!("layer{}.{b}", l + 1);
                out.extend(join_params_mut(vec![(&name, block.params_mut())]));
            }
        }
        out.extend(join_params_mut(vec![
            ("embedding", self.embedding.params_mut()),
            ("classifier", self.classifier.params_mut()),
        ]));
        out
    }
}
