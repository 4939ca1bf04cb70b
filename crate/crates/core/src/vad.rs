//! Energy-based VAD and a gradient-boosted-trees frame classifier (GVAD).
//!
//! GVAD is trained on simulated far-field features with labels produced by
//! the energy VAD on the clean source, so it learns to find speech in
//! reverberant, noisy audio where a plain energy threshold breaks down.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::audio_io::Waveform;
use crate::binio;
use crate::error::{Error, Result};
use crate::features::{self, FeatureConfig, FeatureKind, FeatureMatrix, FrameConfig, Frames};

/// One decision per feature frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMask {
    pub mask: Vec<bool>,
    pub frame_shift: f64,
}

impl FrameMask {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn speech_frames(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyVadConfig {
    /// Frames more than this many dB below the loudest frame are non-speech.
    pub relative_db: f64,
    /// Absolute frame-energy floor in dB (sum of squares of a windowed frame).
    pub floor_db: f64,
    /// Median smoothing window, in frames (odd).
    pub median_window: usize,
}

impl Default for EnergyVadConfig {
    fn default() -> Self {
        Self {
            relative_db: 30.0,
            floor_db: -60.0,
            median_window: 5,
        }
    }
}

/// Frame energies in dB.
pub fn frame_log_energy(frames: &Frames) -> Vec<f64> {
    frames
        .frames
        .iter()
        .map(|f| 10.0 * (f.iter().map(|x| x * x).sum::<f64>() + 1e-20).log10())
        .collect()
}

/// Thresholds a per-frame log-energy track (dB) and median-smooths the result.
pub fn energy_vad(log_energy: &[f64], frame_shift: f64, cfg: &EnergyVadConfig) -> Result<FrameMask> {
    if log_energy.is_empty() {
        return Err(Error::invalid("energy VAD needs at least one frame"));
    }
    let max = log_energy.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<bool> = log_energy
        .iter()
        .map(|&e| e > max - cfg.relative_db && e > cfg.floor_db)
        .collect();
    Ok(FrameMask {
        mask: median_filter(&raw, cfg.median_window),
        frame_shift,
    })
}

/// Energy VAD straight from a waveform, framed at its own sample rate.
pub fn energy_vad_waveform(
    w: &Waveform,
    frame: &FrameConfig,
    cfg: &EnergyVadConfig,
) -> Result<FrameMask> {
    let frames = features::frame_signal(w, frame)?;
    energy_vad(&frame_log_energy(&frames), frames.frame_shift(), cfg)
}

/// Majority vote over a centred window, with edge frames replicated.
fn median_filter(mask: &[bool], window: usize) -> Vec<bool> {
    if window <= 1 {
        return mask.to_vec();
    }
    let half = (window / 2) as isize;
    let n = mask.len() as isize;
    (0..n)
        .map(|t| {
            let votes = (t - half..=t + half)
                .filter(|&k| mask[k.clamp(0, n - 1) as usize])
                .count();
            2 * votes > (2 * half + 1) as usize
        })
        .collect()
}

/// Builds GVAD input frames: log-Mel energies without mean normalization plus
/// the frame log-energy as a final column.
#[derive(Debug, Clone, PartialEq)]
pub struct GvadFrontEnd {
    pub features: FeatureConfig,
}

impl Default for GvadFrontEnd {
    fn default() -> Self {
        Self {
            features: FeatureConfig {
                kind: FeatureKind::LogMel,
                mean_norm: false,
                ..FeatureConfig::default()
            },
        }
    }
}

impl GvadFrontEnd {
    pub fn dims(&self) -> usize {
        self.features.mel.n_mels + 1
    }

    pub fn extract(&self, w: &Waveform) -> Result<FeatureMatrix> {
        let cond = self.features.condition(w)?;
        let frames = features::frame_signal(&cond, &self.features.frame)?;
        let lm = features::logmel(&frames, &self.features.mel)?;
        let energy = frame_log_energy(&frames);
        let dims = lm.dims + 1;
        let mut data = Vec::with_capacity(lm.frames * dims);
        for (row, e) in lm.rows().zip(&energy) {
            data.extend_from_slice(row);
            data.push(e * std::f64::consts::LN_10 / 10.0);
        }
        Ok(FeatureMatrix {
            data,
            frames: lm.frames,
            dims,
            frame_shift: lm.frame_shift,
            kind: FeatureKind::LogMel,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Leaf(f64),
    /// `x[feature] > threshold` goes right.
    Split {
        feature: u32,
        threshold: f64,
        left: u32,
        right: u32,
    },
}

/// Regression tree stored as an arena; node 0 is the root.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf(value: f64) -> Self {
        Self {
            nodes: vec![Node::Leaf(value)],
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0usize;
        loop {
            match self.nodes[i] {
                Node::Leaf(v) => return v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if x[feature as usize] > threshold {
                        right as usize
                    } else {
                        left as usize
                    };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf(_) => 0,
                Node::Split { left, right, .. } => {
                    1 + walk(nodes, left as usize).max(walk(nodes, right as usize))
                }
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn max_feature(&self) -> Option<u32> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Split { feature, .. } => Some(*feature),
                Node::Leaf(_) => None,
            })
            .max()
    }

    /// Same tree with nodes renumbered in preorder (the file layout).
    pub fn to_preorder(&self) -> Tree {
        fn walk(src: &[Node], i: usize, out: &mut Vec<Node>) -> u32 {
            let id = out.len() as u32;
            match src[i] {
                Node::Leaf(v) => out.push(Node::Leaf(v)),
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    out.push(Node::Leaf(0.0));
                    let l = walk(src, left as usize, out);
                    let r = walk(src, right as usize, out);
                    out[id as usize] = Node::Split {
                        feature,
                        threshold,
                        left: l,
                        right: r,
                    };
                }
            }
            id
        }
        let mut nodes = Vec::with_capacity(self.nodes.len());
        walk(&self.nodes, 0, &mut nodes);
        Tree { nodes }
    }

    fn scale_leaves(&mut self, s: f64) {
        for n in &mut self.nodes {
            if let Node::Leaf(v) = n {
                *v *= s;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GvadConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub shrinkage: f64,
    pub min_leaf: usize,
}

impl Default for GvadConfig {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: 3,
            shrinkage: 0.1,
            min_leaf: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GvadModel {
    pub n_features: usize,
    pub shrinkage: f64,
    pub bias: f64,
    pub trees: Vec<Tree>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `log(1 + e^f) - y f`, evaluated without overflow.
fn logistic_loss(f: f64, y: bool) -> f64 {
    let softplus = if f > 0.0 {
        f + (-f).exp().ln_1p()
    } else {
        f.exp().ln_1p()
    };
    softplus - if y { f } else { 0.0 }
}

const MAX_LEAF_STEP: f64 = 10.0;
const PRIOR_CLAMP: f64 = 1e-6;

impl GvadModel {
    pub fn logit(&self, x: &[f64]) -> f64 {
        self.bias + self.shrinkage * self.trees.iter().map(|t| t.predict(x)).sum::<f64>()
    }

    pub fn predict_proba(&self, f: &FeatureMatrix) -> Result<Vec<f64>> {
        if f.dims != self.n_features {
            return Err(Error::DimensionMismatch {
                expected: self.n_features,
                got: f.dims,
            });
        }
        Ok(f.rows().map(|x| sigmoid(self.logit(x))).collect())
    }
}

/// Trains the classifier; see [`gvad_train_logged`].
pub fn gvad_train(
    features: &[FeatureMatrix],
    labels: &[FrameMask],
    cfg: &GvadConfig,
) -> Result<GvadModel> {
    gvad_train_logged(features, labels, cfg).map(|(m, _)| m)
}

/// Gradient boosting on the logistic loss. Returns the model and the mean
/// training loss before the first tree and after every tree.
///
/// Single-class training data yields a bias-only model with no trees.
pub fn gvad_train_logged(
    features: &[FeatureMatrix],
    labels: &[FrameMask],
    cfg: &GvadConfig,
) -> Result<(GvadModel, Vec<f64>)> {
    if features.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} feature matrices but {} label masks",
            features.len(),
            labels.len()
        )));
    }
    let dims = features.first().map(|f| f.dims).unwrap_or(0);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (f, l) in features.iter().zip(labels) {
        if f.dims != dims {
            return Err(Error::DimensionMismatch {
                expected: dims,
                got: f.dims,
            });
        }
        if f.frames != l.len() {
            return Err(Error::invalid(format!(
                "feature matrix has {} frames but mask has {}",
                f.frames,
                l.len()
            )));
        }
        x.extend_from_slice(&f.data);
        y.extend_from_slice(&l.mask);
    }
    if y.is_empty() || dims == 0 {
        return Err(Error::invalid("GVAD training set is empty"));
    }
    if !(cfg.shrinkage > 0.0) {
        return Err(Error::invalid("shrinkage must be positive"));
    }
    let n = y.len();
    let positives = y.iter().filter(|&&v| v).count();
    let prior = (positives as f64 / n as f64).clamp(PRIOR_CLAMP, 1.0 - PRIOR_CLAMP);
    let bias = (prior / (1.0 - prior)).ln();
    let mut model = GvadModel {
        n_features: dims,
        shrinkage: cfg.shrinkage,
        bias,
        trees: Vec::new(),
    };
    let mut logits = vec![bias; n];
    let mean_loss = |logits: &[f64]| {
        logits.iter().zip(&y).map(|(&f, &t)| logistic_loss(f, t)).sum::<f64>() / n as f64
    };
    let mut losses = vec![mean_loss(&logits)];
    if positives == 0 || positives == n {
        log::warn!("GVAD training labels are single-class; returning a bias-only model");
        return Ok((model, losses));
    }

    let builder = TreeBuilder::new(&x, dims, cfg.max_depth, cfg.min_leaf.max(1));
    let mut residual = vec![0.0; n];
    let mut hessian = vec![0.0; n];
    for _ in 0..cfg.n_trees {
        for i in 0..n {
            let p = sigmoid(logits[i]);
            residual[i] = if y[i] { 1.0 - p } else { -p };
            hessian[i] = p * (1.0 - p);
        }
        let (mut tree, leaf_of) = builder.fit(&residual, &hessian);
        let current = *losses.last().unwrap();
        // Backtrack on the tree's scale so the training loss never rises.
        let mut accepted = false;
        for _ in 0..40 {
            let trial: Vec<f64> = logits
                .iter()
                .zip(&leaf_of)
                .map(|(f, &leaf)| f + cfg.shrinkage * leaf_value(&tree, leaf))
                .collect();
            let loss = mean_loss(&trial);
            if loss <= current {
                logits = trial;
                losses.push(loss);
                accepted = true;
                break;
            }
            tree.scale_leaves(0.5);
        }
        if !accepted {
            tree.scale_leaves(0.0);
            losses.push(current);
        }
        model.trees.push(tree.to_preorder());
    }
    Ok((model, losses))
}

fn leaf_value(tree: &Tree, leaf: u32) -> f64 {
    match tree.nodes[leaf as usize] {
        Node::Leaf(v) => v,
        Node::Split { .. } => unreachable!("sample assigned to an internal node"),
    }
}

/// Exact greedy least-squares tree growth on presorted features, one level
/// at a time.
struct TreeBuilder<'a> {
    x: &'a [f64],
    dims: usize,
    max_depth: usize,
    min_leaf: usize,
    sorted: Vec<Vec<u32>>,
}

#[derive(Clone, Copy)]
struct ScanState {
    count: usize,
    sum: f64,
    last: f64,
}

#[derive(Clone, Copy)]
struct BestSplit {
    gain: f64,
    feature: u32,
    threshold: f64,
}

impl<'a> TreeBuilder<'a> {
    fn new(x: &'a [f64], dims: usize, max_depth: usize, min_leaf: usize) -> Self {
        let n = x.len() / dims;
        let sorted = (0..dims)
            .map(|j| {
                let mut idx: Vec<u32> = (0..n as u32).collect();
                idx.sort_by(|&a, &b| {
                    x[a as usize * dims + j].total_cmp(&x[b as usize * dims + j])
                });
                idx
            })
            .collect();
        Self {
            x,
            dims,
            max_depth,
            min_leaf,
            sorted,
        }
    }

    /// Returns the tree and, per sample, the index of its leaf node.
    fn fit(&self, residual: &[f64], hessian: &[f64]) -> (Tree, Vec<u32>) {
        let n = residual.len();
        let mut nodes = vec![Node::Leaf(0.0)];
        // node index per sample; samples stay attached to the open frontier
        let mut node_of = vec![0u32; n];
        let mut frontier: Vec<u32> = vec![0];
        for _depth in 0..self.max_depth {
            if frontier.is_empty() {
                break;
            }
            let mut slot = vec![usize::MAX; nodes.len()];
            for (k, &id) in frontier.iter().enumerate() {
                slot[id as usize] = k;
            }
            let mut totals = vec![(0usize, 0.0f64); frontier.len()];
            for i in 0..n {
                let k = slot[node_of[i] as usize];
                if k != usize::MAX {
                    totals[k].0 += 1;
                    totals[k].1 += residual[i];
                }
            }
            let mut best: Vec<Option<BestSplit>> = vec![None; frontier.len()];
            let mut state = vec![
                ScanState {
                    count: 0,
                    sum: 0.0,
                    last: 0.0
                };
                frontier.len()
            ];
            for j in 0..self.dims {
                state.iter_mut().for_each(|s| *s = ScanState { count: 0, sum: 0.0, last: 0.0 });
                for &i in &self.sorted[j] {
                    let i = i as usize;
                    let k = slot[node_of[i] as usize];
                    if k == usize::MAX {
                        continue;
                    }
                    let v = self.x[i * self.dims + j];
                    let s = &mut state[k];
                    let (tn, ts) = totals[k];
                    if s.count >= self.min_leaf && tn - s.count >= self.min_leaf && v > s.last {
                        let rn = (tn - s.count) as f64;
                        let rs = ts - s.sum;
                        let gain = s.sum * s.sum / s.count as f64 + rs * rs / rn - ts * ts / tn as f64;
                        if best[k].is_none_or(|b| gain > b.gain) {
                            let mut threshold = s.last + (v - s.last) / 2.0;
                            if threshold >= v {
                                threshold = s.last;
                            }
                            best[k] = Some(BestSplit {
                                gain,
                                feature: j as u32,
                                threshold,
                            });
                        }
                    }
                    s.count += 1;
                    s.sum += residual[i];
                    s.last = v;
                }
            }
            let mut next = Vec::new();
            for (k, &id) in frontier.iter().enumerate() {
                if let Some(b) = best[k] {
                    let left = nodes.len() as u32;
                    nodes.push(Node::Leaf(0.0));
                    nodes.push(Node::Leaf(0.0));
                    nodes[id as usize] = Node::Split {
                        feature: b.feature,
                        threshold: b.threshold,
                        left,
                        right: left + 1,
                    };
                    next.push(left);
                    next.push(left + 1);
                }
            }
            for i in 0..n {
                if let Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } = nodes[node_of[i] as usize]
                {
                    node_of[i] = if self.x[i * self.dims + feature as usize] > threshold {
                        right
                    } else {
                        left
                    };
                }
            }
            frontier = next;
        }

        // Newton step per leaf.
        let mut g = vec![0.0; nodes.len()];
        let mut h = vec![0.0; nodes.len()];
        for i in 0..n {
            g[node_of[i] as usize] += residual[i];
            h[node_of[i] as usize] += hessian[i];
        }
        for (id, node) in nodes.iter_mut().enumerate() {
            if let Node::Leaf(v) = node {
                *v = if h[id] > 1e-12 {
                    (g[id] / h[id]).clamp(-MAX_LEAF_STEP, MAX_LEAF_STEP)
                } else {
                    0.0
                };
            }
        }
        (Tree { nodes }, node_of)
    }
}

/// Frame is speech iff its posterior is strictly above 0.5.
pub fn gvad_predict(m: &GvadModel, f: &FeatureMatrix) -> Result<FrameMask> {
    Ok(FrameMask {
        mask: m.predict_proba(f)?.into_iter().map(|p| p > 0.5).collect(),
        frame_shift: f.frame_shift,
    })
}

/// Splits a waveform into its speech and non-speech parts using hop-sized
/// chunks, frame `t` owning samples `[t*hop, (t+1)*hop)`.
pub fn split_by_mask(w: &Waveform, mask: &FrameMask, hop: usize) -> (Waveform, Waveform) {
    let mut speech = Vec::new();
    let mut nonspeech = Vec::new();
    for (t, &m) in mask.mask.iter().enumerate() {
        let start = (t * hop).min(w.len());
        let end = ((t + 1) * hop).min(w.len());
        let chunk = &w.samples[start..end];
        if m {
            speech.extend_from_slice(chunk);
        } else {
            nonspeech.extend_from_slice(chunk);
        }
    }
    let rate = w.sample_rate;
    (
        Waveform {
            samples: speech,
            sample_rate: rate,
        },
        Waveform {
            samples: nonspeech,
            sample_rate: rate,
        },
    )
}

/// Samples of all frames marked non-speech. May be empty.
pub fn extract_nonspeech(w: &Waveform, mask: &FrameMask, hop: usize) -> Waveform {
    split_by_mask(w, mask, hop).1
}

const GVAD_MAGIC: &[u8; 8] = b"FFSVGVAD";
const GVAD_VERSION: u32 = 1;

pub fn save_gvad(path: impl AsRef<Path>, m: &GvadModel) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_gvad(&mut w, m)?;
    w.flush()?;
    Ok(())
}

pub fn write_gvad<W: Write>(w: &mut W, m: &GvadModel) -> Result<()> {
    binio::write_magic(w, GVAD_MAGIC, GVAD_VERSION)?;
    binio::write_u32(w, binio::len_u32(m.n_features)?)?;
    binio::write_f64(w, m.shrinkage)?;
    binio::write_f64(w, m.bias)?;
    binio::write_u32(w, binio::len_u32(m.trees.len())?)?;
    for t in &m.trees {
        write_node(w, &t.nodes, 0)?;
    }
    Ok(())
}

fn write_node<W: Write>(w: &mut W, nodes: &[Node], i: usize) -> Result<()> {
    match nodes[i] {
        Node::Leaf(v) => {
            binio::write_u8(w, 0)?;
            binio::write_f64(w, v)
        }
        Node::Split {
            feature,
            threshold,
            left,
            right,
        } => {
            binio::write_u8(w, 1)?;
            binio::write_u32(w, feature)?;
            binio::write_f64(w, threshold)?;
            write_node(w, nodes, left as usize)?;
            write_node(w, nodes, right as usize)
        }
    }
}

pub fn load_gvad(path: impl AsRef<Path>) -> Result<GvadModel> {
    read_gvad(&mut BufReader::new(File::open(path)?))
}

pub fn read_gvad<R: Read>(r: &mut R) -> Result<GvadModel> {
    let version = binio::read_magic(r, GVAD_MAGIC)?;
    if version != GVAD_VERSION {
        return Err(Error::Format(format!("unsupported GVAD version {version}")));
    }
    let n_features = binio::read_u32(r)? as usize;
    let shrinkage = binio::read_f64(r)?;
    let bias = binio::read_f64(r)?;
    let count = binio::read_u32(r)?;
    let mut trees = Vec::with_capacity(count.min(1 << 16) as usize);
    for _ in 0..count {
        let mut nodes = Vec::new();
        read_node(r, &mut nodes, 0)?;
        let tree = Tree { nodes };
        if tree.max_feature().is_some_and(|f| f as usize >= n_features) {
            return Err(Error::Format("split feature index out of range".into()));
        }
        trees.push(tree);
    }
    Ok(GvadModel {
        n_features,
        shrinkage,
        bias,
        trees,
    })
}

fn read_node<R: Read>(r: &mut R, nodes: &mut Vec<Node>, depth: usize) -> Result<u32> {
    if depth > 64 {
        return Err(Error::Format("tree deeper than 64 levels".into()));
    }
    let id = nodes.len() as u32;
    match binio::read_u8(r)? {
        0 => nodes.push(Node::Leaf(binio::read_f64(r)?)),
        1 => {
            let feature = binio::read_u32(r)?;
            let threshold = binio::read_f64(r)?;
            nodes.push(Node::Leaf(0.0));
            let left = read_node(r, nodes, depth + 1)?;
            let right = read_node(r, nodes, depth + 1)?;
            nodes[id as usize] = Node::Split {
                feature,
                threshold,
                left,
                right,
            };
        }
        flag => return Err(Error::Format(format!("bad node flag {flag}"))),
    }
    Ok(id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tone(n: usize, amp: f64) -> Vec<f64> {
        (0..n)
            .map(|i| amp * (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 16000.0).sin())
            .collect()
    }

    #[test]
    fn silence_and_tone() {
        let cfg = EnergyVadConfig::default();
        let frame = FrameConfig::default();
        let silence = Waveform::new(vec![0.0; 8000], 16000).unwrap();
        assert_eq!(energy_vad_waveform(&silence, &frame, &cfg).unwrap().speech_frames(), 0);
        let loud = Waveform::new(tone(8000, 0.5), 16000).unwrap();
        let m = energy_vad_waveform(&loud, &frame, &cfg).unwrap();
        assert!(m.mask.iter().all(|&v| v));
    }

    #[test]
    fn silence_to_tone_boundary() {
        let mut s = vec![0.0; 8000];
        s.extend(tone(8000, 0.5));
        let w = Waveform::new(s, 16000).unwrap();
        let m = energy_vad_waveform(&w, &FrameConfig::default(), &EnergyVadConfig::default())
            .unwrap();
        // First frame overlapping the tone starts at sample 7601, i.e. frame 48.
        let first = m.mask.iter().position(|&v| v).unwrap();
        let true_boundary = (8000 - 400) / 160 + 1;
        assert!((first as i64 - true_boundary as i64).abs() <= 2, "first speech frame {first}");
        assert!(m.mask[first..].iter().all(|&v| v));
    }

    #[test]
    fn median_filter_removes_blips() {
        let raw = [false, false, true, false, false, true, true, false, true, true];
        assert_eq!(
            median_filter(&raw, 5),
            vec![false, false, false, false, true, false, true, true, true, true]
        );
    }

    fn stump_model() -> GvadModel {
        GvadModel {
            n_features: 2,
            shrinkage: 1.0,
            bias: 0.0,
            trees: vec![Tree {
                nodes: vec![
                    Node::Split {
                        feature: 0,
                        threshold: 1.0,
                        left: 1,
                        right: 2,
                    },
                    Node::Leaf(-4.0),
                    Node::Leaf(4.0),
                ],
            }],
        }
    }

    #[test]
    fn hand_evaluated_stump() {
        let f = FeatureMatrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 5.0]], 0.01, FeatureKind::LogMel)
            .unwrap();
        assert_eq!(gvad_predict(&stump_model(), &f).unwrap().mask, vec![true, false]);
    }

    #[test]
    fn zero_tree_model_ties_to_nonspeech() {
        let m = GvadModel {
            n_features: 3,
            shrinkage: 0.1,
            bias: 0.0,
            trees: vec![],
        };
        let f = FeatureMatrix::from_rows(&[vec![1.0; 3], vec![-1.0; 3]], 0.01, FeatureKind::LogMel)
            .unwrap();
        assert_eq!(gvad_predict(&m, &f).unwrap().mask, vec![false, false]);
        let wrong = FeatureMatrix::from_rows(&[vec![1.0; 4]], 0.01, FeatureKind::LogMel).unwrap();
        assert!(matches!(gvad_predict(&m, &wrong), Err(Error::DimensionMismatch { .. })));
    }

    fn separable(n: usize, seed: u64) -> (FeatureMatrix, FrameMask) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut mask = Vec::new();
        while rows.len() < n {
            let a: f64 = rng.random_range(-1.0..1.0);
            let b: f64 = rng.random_range(-1.0..1.0);
            let s = a + 0.5 * b;
            if s.abs() < 0.05 {
                continue;
            }
            rows.push(vec![a, b]);
            mask.push(s > 0.0);
        }
        (
            FeatureMatrix::from_rows(&rows, 0.01, FeatureKind::LogMel).unwrap(),
            FrameMask {
                mask,
                frame_shift: 0.01,
            },
        )
    }

    fn accuracy(m: &GvadModel, f: &FeatureMatrix, l: &FrameMask) -> f64 {
        let p = gvad_predict(m, f).unwrap();
        p.mask.iter().zip(&l.mask).filter(|(a, b)| a == b).count() as f64 / l.len() as f64
    }

    #[test]
    fn separable_data_is_learned() {
        let (f, l) = separable(400, 7);
        let cfg = GvadConfig {
            n_trees: 50,
            max_depth: 2,
            ..Default::default()
        };
        let (m, losses) = gvad_train_logged(&[f.clone()], &[l.clone()], &cfg).unwrap();
        assert_eq!(m.trees.len(), 50);
        assert!(m.trees.iter().all(|t| t.depth() <= 2));
        assert!(accuracy(&m, &f, &l) >= 0.99);
        for w in losses.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn single_class_gives_bias_only_model() {
        let f = FeatureMatrix::from_rows(&[vec![0.0], vec![1.0], vec![2.0]], 0.01, FeatureKind::LogMel)
            .unwrap();
        let l = FrameMask {
            mask: vec![true; 3],
            frame_shift: 0.01,
        };
        let m = gvad_train(&[f.clone()], &[l], &GvadConfig::default()).unwrap();
        assert!(m.trees.is_empty());
        assert!(gvad_predict(&m, &f).unwrap().mask.iter().all(|&v| v));
    }

    #[test]
    fn training_input_errors() {
        assert!(gvad_train(&[], &[], &GvadConfig::default()).is_err());
        let f = FeatureMatrix::from_rows(&[vec![0.0], vec![1.0]], 0.01, FeatureKind::LogMel).unwrap();
        let l = FrameMask {
            mask: vec![true],
            frame_shift: 0.01,
        };
        assert!(gvad_train(&[f], &[l], &GvadConfig::default()).is_err());
    }

    #[test]
    fn model_file_round_trip() {
        let (f, l) = separable(200, 3);
        let m = gvad_train(&[f], &[l], &GvadConfig { n_trees: 5, ..Default::default() }).unwrap();
        let mut buf = Vec::new();
        write_gvad(&mut buf, &m).unwrap();
        assert_eq!(&buf[..8], b"FFSVGVAD");
        assert_eq!(read_gvad(&mut &buf[..]).unwrap(), m);
        let mut stump = Vec::new();
        write_gvad(&mut stump, &stump_model()).unwrap();
        assert_eq!(read_gvad(&mut &stump[..]).unwrap(), stump_model());
        assert!(read_gvad(&mut &buf[..buf.len() - 3]).is_err());
    }

    #[test]
    fn nonspeech_extraction() {
        let w = Waveform::new((0..1000).map(|i| i as f64).collect(), 16000).unwrap();
        let all = |v| FrameMask {
            mask: vec![v; 5],
            frame_shift: 0.01,
        };
        assert!(extract_nonspeech(&w, &all(true), 160).is_empty());
        assert_eq!(extract_nonspeech(&w, &all(false), 160).samples, w.samples[..800].to_vec());
        let alt = FrameMask {
            mask: vec![true, false, true, false, true],
            frame_shift: 0.01,
        };
        let expect: Vec<f64> = (160..320).chain(480..640).map(|i| i as f64).collect();
        assert_eq!(extract_nonspeech(&w, &alt, 160).samples, expect);
    }

    #[test]
    fn front_end_appends_energy() {
        let w = Waveform::new(tone(4000, 0.3), 16000).unwrap();
        let fe = GvadFrontEnd::default();
        let f = fe.extract(&w).unwrap();
        assert_eq!(f.dims, 65);
        assert_eq!(f.frames, 23);
    }

    proptest! {
        #[test]
        fn energy_vad_ignores_global_gain(gain in 0.05f64..20.0, seed in 0u64..50) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = vec![0.0; 3000];
            s.extend((0..4000).map(|_| rng.random_range(-0.3..0.3)));
            s.extend(vec![0.001; 2000]);
            let frame = FrameConfig::default();
            let cfg = EnergyVadConfig::default();
            let a = energy_vad_waveform(&Waveform::new(s.clone(), 16000).unwrap(), &frame, &cfg).unwrap();
            let scaled: Vec<f64> = s.iter().map(|x| x * gain).collect();
            let b = energy_vad_waveform(&Waveform::new(scaled, 16000).unwrap(), &frame, &cfg).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn speech_and_nonspeech_partition_the_signal(
            mask in prop::collection::vec(any::<bool>(), 1..30)
        ) {
            let w = Waveform::new((0..mask.len() * 160 + 240).map(|i| i as f64).collect(), 16000).unwrap();
            let m = FrameMask { mask: mask.clone(), frame_shift: 0.01 };
            let (sp, ns) = split_by_mask(&w, &m, 160);
            prop_assert_eq!(sp.len() + ns.len(), mask.len() * 160);
        }
    }
}
