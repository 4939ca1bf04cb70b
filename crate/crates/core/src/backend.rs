//! Embedding scoring: cosine similarity, two-covariance PLDA, multi-channel
//! averaging and enrollment data augmentation (EDA).

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;

use crate::audio_io::Waveform;
use crate::binio;
use crate::embed_net::Model;
use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::room_sim::mix_noise;
use crate::vad::{self, EnergyVadConfig, FrameMask, GvadFrontEnd, GvadModel};

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub id: String,
    pub vector: Vec<f64>,
}

impl Embedding {
    pub fn new(id: impl Into<String>, vector: Vec<f64>) -> Self {
        Self {
            id: id.into(),
            vector,
        }
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

fn same_dim(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(())
}

/// Cosine similarity, clamped to [-1, 1].
pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<f64> {
    same_dim(a, b)?;
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("cosine score of a zero vector"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Component-wise arithmetic mean.
pub fn average_embeddings<V: AsRef<[f64]>>(embs: &[V]) -> Result<Vec<f64>> {
    let first = embs
        .first()
        .ok_or_else(|| Error::invalid("cannot average an empty embedding list"))?
        .as_ref();
    let mut acc = vec![0.0; first.len()];
    for e in embs {
        let e = e.as_ref();
        same_dim(first, e)?;
        acc.iter_mut().zip(e).for_each(|(a, v)| *a += v);
    }
    let n = embs.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// Smallest allowed eigenvalue of the within-speaker covariance.
pub const W_EIGEN_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct PldaConfig {
    pub n_iters: usize,
    /// Whiten with the total covariance before EM.
    pub whiten: bool,
    /// Scale every (centered, whitened) vector to norm sqrt(D).
    pub length_norm: bool,
}

impl Default for PldaConfig {
    fn default() -> Self {
        Self {
            n_iters: 10,
            whiten: true,
            length_norm: true,
        }
    }
}

/// Two-covariance model `x = mu + y + e`, `y ~ N(0, B)`, `e ~ N(0, W)`, in
/// the space produced by centering, the whitener and optional length
/// normalization.
#[derive(Debug, Clone)]
pub struct PldaModel {
    pub center: DVector<f64>,
    pub whitener: DMatrix<f64>,
    pub length_norm: bool,
    pub mu: DVector<f64>,
    pub b: DMatrix<f64>,
    pub w: DMatrix<f64>,
    /// Set when W needed its eigenvalue floor.
    pub degenerate: bool,
    scorer: PairScorer,
}

/// `llr = -1/2 (a'Q1a + b'Q1b + 2a'Q2b) + k` on mean-removed vectors.
#[derive(Debug, Clone)]
struct PairScorer {
    q1: DMatrix<f64>,
    q2: DMatrix<f64>,
    k: f64,
}

fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn spd_inverse_logdet(m: &DMatrix<f64>, what: &str) -> Result<(DMatrix<f64>, f64)> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular(format!("{what} is not positive definite")))?;
    let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok((chol.inverse(), logdet))
}

/// Clamps eigenvalues from below; reports whether any moved.
fn floor_eigen(m: &DMatrix<f64>, floor: f64) -> (DMatrix<f64>, bool) {
    let eig = SymmetricEigen::new(sym(m));
    let mut changed = false;
    let vals = eig.eigenvalues.map(|v| {
        if v < floor {
            changed = true;
            floor
        } else {
            v
        }
    });
    let out = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    (sym(&out), changed)
}

impl PairScorer {
    fn new(b: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<Self> {
        let d = b.nrows();
        let t = b + w;
        let mut same = DMatrix::zeros(2 * d, 2 * d);
        same.view_mut((0, 0), (d, d)).copy_from(&t);
        same.view_mut((d, d), (d, d)).copy_from(&t);
        same.view_mut((0, d), (d, d)).copy_from(b);
        same.view_mut((d, 0), (d, d)).copy_from(b);
        let (same_inv, same_logdet) = spd_inverse_logdet(&same, "same-speaker covariance")?;
        let (t_inv, t_logdet) = spd_inverse_logdet(&t, "total covariance")?;
        let q1 = sym(&(same_inv.view((0, 0), (d, d)) - &t_inv));
        let q2 = same_inv.view((0, d), (d, d)).into_owned();
        Ok(Self {
            q1,
            q2,
            k: -0.5 * (same_logdet - 2.0 * t_logdet),
        })
    }

    fn score(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        let quad = a.dot(&(&self.q1 * a)) + b.dot(&(&self.q1 * b)) + 2.0 * a.dot(&(&self.q2 * b));
        -0.5 * quad + self.k
    }
}

impl PldaModel {
    /// Builds a model directly from its parameters in the given space.
    pub fn from_parts(
        center: DVector<f64>,
        whitener: DMatrix<f64>,
        length_norm: bool,
        mu: DVector<f64>,
        b: DMatrix<f64>,
        w: DMatrix<f64>,
    ) -> Result<Self> {
        let d = mu.len();
        if center.len() != d
            || whitener.shape() != (d, d)
            || b.shape() != (d, d)
            || w.shape() != (d, d)
        {
            return Err(Error::invalid("PLDA parameter shapes disagree"));
        }
        let (w, degenerate) = floor_eigen(&w, W_EIGEN_FLOOR);
        let (b, _) = floor_eigen(&b, 0.0);
        let scorer = PairScorer::new(&b, &w)?;
        Ok(Self {
            center,
            whitener,
            length_norm,
            mu,
            b,
            w,
            degenerate,
            scorer,
        })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Maps a raw embedding into the model space.
    pub fn preprocess(&self, x: &[f64]) -> Result<DVector<f64>> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        let v = &self.whitener * (DVector::from_column_slice(x) - &self.center);
        if self.length_norm {
            length_normalize(v)
        } else {
            Ok(v)
        }
    }

    /// Log-likelihood ratio of same versus different speakers.
    pub fn score(&self, enroll: &[f64], test: &[f64]) -> Result<f64> {
        let a = self.preprocess(enroll)? - &self.mu;
        let b = self.preprocess(test)? - &self.mu;
        Ok(self.scorer.score(&a, &b))
    }

    /// Marginal log-likelihood of one speaker's vectors (model space).
    pub fn speaker_log_likelihood(&self, xs: &[DVector<f64>]) -> Result<f64> {
        let mut cache = HashMap::new();
        speaker_ll(&self.mu, &self.b, &self.w, xs, &mut cache)
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        let d = self.dim();
        binio::write_magic(w, PLDA_MAGIC, PLDA_VERSION)?;
        binio::write_u32(w, binio::len_u32(d)?)?;
        binio::write_f64_slice(w, self.mu.as_slice())?;
        for m in [&self.b, &self.w, &self.whitener] {
            binio::write_f64_slice(w, m.transpose().as_slice())?;
        }
        binio::write_f64_slice(w, self.center.as_slice())?;
        binio::write_u8(w, self.length_norm as u8)?;
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let version = binio::read_magic(r, PLDA_MAGIC)?;
        if version != PLDA_VERSION {
            return Err(Error::UnsupportedFormat(format!("PLDA version {version}")));
        }
        let d = binio::read_u32(r)? as usize;
        let mu = DVector::from_vec(binio::read_f64_vec(r, d)?);
        let mut mats = Vec::with_capacity(3);
        for _ in 0..3 {
            mats.push(DMatrix::from_row_slice(d, d, &binio::read_f64_vec(r, d * d)?));
        }
        let center = DVector::from_vec(binio::read_f64_vec(r, d)?);
        let length_norm = match binio::read_u8(r)? {
            0 => false,
            1 => true,
            f => return Err(Error::Format(format!("bad length-norm flag {f}"))),
        };
        let whitener = mats.pop().expect("three matrices");
        let w = mats.pop().expect("three matrices");
        let b = mats.pop().expect("three matrices");
        Self::from_parts(center, whitener, length_norm, mu, b, w)
            .map_err(|e| Error::Format(format!("PLDA parameters: {e}")))
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

const PLDA_MAGIC: &[u8; 8] = b"FFSVPLDA";
const PLDA_VERSION: u32 = 1;

fn length_normalize(v: DVector<f64>) -> Result<DVector<f64>> {
    let n = v.norm();
    if n == 0.0 {
        return Err(Error::invalid("cannot length-normalize a zero vector"));
    }
    let d = v.len() as f64;
    Ok(v * (d.sqrt() / n))
}

/// Per-count quantities shared by all speakers with `n` vectors.
struct CountTerms {
    w_inv: DMatrix<f64>,
    w_logdet: f64,
    t_inv: DMatrix<f64>,
    t_logdet: f64,
}

fn speaker_ll(
    mu: &DVector<f64>,
    b: &DMatrix<f64>,
    w: &DMatrix<f64>,
    xs: &[DVector<f64>],
    cache: &mut HashMap<usize, CountTerms>,
) -> Result<f64> {
    let n = xs.len();
    let d = mu.len();
    if !cache.contains_key(&n) {
        let (w_inv, w_logdet) = spd_inverse_logdet(w, "within-speaker covariance")?;
        let (t_inv, t_logdet) = spd_inverse_logdet(&(w + b * n as f64), "W + nB")?;
        cache.insert(
            n,
            CountTerms {
                w_inv,
                w_logdet,
                t_inv,
                t_logdet,
            },
        );
    }
    let c = &cache[&n];
    let mean = xs.iter().fold(DVector::zeros(d), |acc, x| acc + x) / n as f64;
    let mut within = 0.0;
    for x in xs {
        let r = x - &mean;
        within += r.dot(&(&c.w_inv * &r));
    }
    let dm = &mean - mu;
    let between = n as f64 * dm.dot(&(&c.t_inv * &dm));
    let nd = (n * d) as f64;
    Ok(-0.5 * nd * (2.0 * std::f64::consts::PI).ln()
        - 0.5 * ((n as f64 - 1.0) * c.w_logdet + c.t_logdet)
        - 0.5 * within
        - 0.5 * between)
}

/// Trained model plus the total log-likelihood after initialization and
/// after each EM iteration.
#[derive(Debug, Clone)]
pub struct PldaTraining {
    pub model: PldaModel,
    pub log_likelihoods: Vec<f64>,
}

fn total_ll(
    mu: &DVector<f64>,
    b: &DMatrix<f64>,
    w: &DMatrix<f64>,
    groups: &[Vec<DVector<f64>>],
) -> Result<f64> {
    let mut cache = HashMap::new();
    groups
        .iter()
        .map(|g| speaker_ll(mu, b, w, g, &mut cache))
        .sum()
}

/// Fits the two-covariance model by EM on embeddings labelled by speaker.
pub fn plda_train<S: AsRef<str>, V: AsRef<[f64]>>(
    data: &[(S, V)],
    cfg: &PldaConfig,
) -> Result<PldaTraining> {
    let first = data
        .first()
        .ok_or_else(|| Error::invalid("no training embeddings"))?;
    let d = first.1.as_ref().len();
    if d == 0 {
        return Err(Error::invalid("zero-dimensional embeddings"));
    }
    let mut by_spk: BTreeMap<&str, Vec<DVector<f64>>> = BTreeMap::new();
    for (s, v) in data {
        let v = v.as_ref();
        if v.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: v.len(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("non-finite embedding value"));
        }
        by_spk
            .entry(s.as_ref())
            .or_default()
            .push(DVector::from_column_slice(v));
    }
    if by_spk.len() < 2 {
        return Err(Error::invalid(format!(
            "PLDA needs at least 2 speakers, got {}",
            by_spk.len()
        )));
    }
    let n_total = data.len();
    if d > n_total {
        return Err(Error::invalid(format!(
            "embedding dimension {d} exceeds sample count {n_total}"
        )));
    }

    let center = by_spk.values().flatten().fold(DVector::zeros(d), |a, x| a + x) / n_total as f64;
    let whitener = if cfg.whiten {
        let mut total = DMatrix::zeros(d, d);
        for x in by_spk.values().flatten() {
            let r = x - &center;
            total += &r * r.transpose();
        }
        total /= n_total as f64;
        let eig = SymmetricEigen::new(sym(&total));
        let max = eig.eigenvalues.max();
        let min = eig.eigenvalues.min();
        if !(min > max * 1e-10 && min > 0.0) {
            return Err(Error::Singular(format!(
                "total covariance of {n_total} embeddings in {d} dimensions is rank deficient \
                 (eigenvalues span [{min:e}, {max:e}]); remove constant or duplicated dimensions \
                 or add training data"
            )));
        }
        let scale = eig.eigenvalues.map(|v| 1.0 / v.sqrt());
        DMatrix::from_diagonal(&scale) * eig.eigenvectors.transpose()
    } else {
        DMatrix::identity(d, d)
    };
    let mut groups: Vec<Vec<DVector<f64>>> = Vec::with_capacity(by_spk.len());
    for xs in by_spk.into_values() {
        let mut g = Vec::with_capacity(xs.len());
        for x in xs {
            let v = &whitener * (x - &center);
            g.push(if cfg.length_norm { length_normalize(v)? } else { v });
        }
        groups.push(g);
    }

    // Initialize from the speaker means and pooled within-speaker scatter.
    let s = groups.len() as f64;
    let n = n_total as f64;
    let means: Vec<DVector<f64>> = groups
        .iter()
        .map(|g| g.iter().fold(DVector::zeros(d), |a, x| a + x) / g.len() as f64)
        .collect();
    let mut mu = means.iter().fold(DVector::zeros(d), |a, m| a + m) / s;
    let mut b = DMatrix::zeros(d, d);
    for m in &means {
        let r = m - &mu;
        b += &r * r.transpose();
    }
    b /= s;
    let mut w = DMatrix::zeros(d, d);
    for (g, m) in groups.iter().zip(&means) {
        for x in g {
            let r = x - m;
            w += &r * r.transpose();
        }
    }
    w /= n;
    let (w0, mut degenerate) = floor_eigen(&w, W_EIGEN_FLOOR);
    w = w0;

    let mut lls = vec![total_ll(&mu, &b, &w, &groups)?];
    for _ in 0..cfg.n_iters {
        // E-step: posterior of each speaker variable.
        let mut per_count: HashMap<usize, (DMatrix<f64>, DMatrix<f64>)> = HashMap::new();
        let mut post_means = Vec::with_capacity(groups.len());
        let mut post_covs_sum = DMatrix::zeros(d, d);
        let mut weighted_covs = DMatrix::zeros(d, d);
        for (g, m) in groups.iter().zip(&means) {
            let k = g.len();
            if !per_count.contains_key(&k) {
                let (inv, _) = spd_inverse_logdet(&(&b + &w / k as f64), "B + W/n")?;
                let gain = &b * inv;
                let cov = sym(&(&b - &gain * &b));
                per_count.insert(k, (gain, cov));
            }
            let (gain, cov) = &per_count[&k];
            post_means.push(&mu + gain * (m - &mu));
            post_covs_sum += cov;
            weighted_covs += cov * k as f64;
        }
        // M-step.
        mu = post_means.iter().fold(DVector::zeros(d), |a, m| a + m) / s;
        let mut nb = post_covs_sum / s;
        for m in &post_means {
            nb += m * m.transpose() / s;
        }
        nb -= &mu * mu.transpose();
        let mut nw = weighted_covs;
        for (g, m) in groups.iter().zip(&post_means) {
            for x in g {
                let r = x - m;
                nw += &r * r.transpose();
            }
        }
        nw /= n;
        b = floor_eigen(&nb, 0.0).0;
        let (fw, floored) = floor_eigen(&nw, W_EIGEN_FLOOR);
        w = fw;
        degenerate |= floored;
        lls.push(total_ll(&mu, &b, &w, &groups)?);
    }
    if degenerate {
        log::warn!("within-speaker covariance hit the eigenvalue floor {W_EIGEN_FLOOR:e}");
    }
    let mut model = PldaModel::from_parts(center, whitener, cfg.length_norm, mu, b, w)?;
    model.degenerate |= degenerate;
    Ok(PldaTraining {
        model,
        log_likelihoods: lls,
    })
}

/// Turns a waveform into an embedding.
pub trait Embedder {
    fn embed_waveform(&self, w: &Waveform) -> Result<Vec<f64>>;
}

/// Feature extraction followed by an eval-mode network forward.
pub struct ModelEmbedder<'a> {
    pub model: &'a Model,
    pub features: FeatureConfig,
}

impl Embedder for ModelEmbedder<'_> {
    fn embed_waveform(&self, w: &Waveform) -> Result<Vec<f64>> {
        self.model.embed(&self.features.extract(w)?)
    }
}

/// Frame-level speech decisions for a waveform.
pub trait VoiceDetector {
    fn speech_mask(&self, w: &Waveform) -> Result<FrameMask>;
}

pub struct GvadDetector<'a> {
    pub model: &'a GvadModel,
    pub front_end: GvadFrontEnd,
}

impl VoiceDetector for GvadDetector<'_> {
    fn speech_mask(&self, w: &Waveform) -> Result<FrameMask> {
        vad::gvad_predict(self.model, &self.front_end.extract(w)?)
    }
}

pub struct EnergyDetector {
    pub frame: crate::features::FrameConfig,
    pub config: EnergyVadConfig,
}

impl VoiceDetector for EnergyDetector {
    fn speech_mask(&self, w: &Waveform) -> Result<FrameMask> {
        vad::energy_vad_waveform(w, &self.frame, &self.config)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdaConfig {
    /// SNR range (dB) for mixing test noise into the enrollment.
    pub snr_range: (f64, f64),
    /// Shorter extracted noise falls back to the plain enrollment embedding.
    pub min_noise_secs: f64,
    /// Decides which enrollment samples count toward speech power.
    pub mix_vad: EnergyVadConfig,
}

impl Default for EdaConfig {
    fn default() -> Self {
        Self {
            snr_range: (5.0, 15.0),
            min_noise_secs: 0.2,
            mix_vad: EnergyVadConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdaOutcome {
    pub embedding: Vec<f64>,
    pub original: Vec<f64>,
    /// Embedding of the noise-augmented enrollment, if one was made.
    pub simulated: Option<Vec<f64>>,
    pub snr_db: Option<f64>,
}

/// Enrollment embedding augmented with background noise taken from the
/// test utterance's non-speech frames.
pub fn enroll_with_eda<E, V, R>(
    enroll: &Waveform,
    test: &Waveform,
    embedder: &E,
    detector: &V,
    cfg: &EdaConfig,
    rng: &mut R,
) -> Result<EdaOutcome>
where
    E: Embedder + ?Sized,
    V: VoiceDetector + ?Sized,
    R: Rng + ?Sized,
{
    if enroll.sample_rate != test.sample_rate {
        return Err(Error::invalid(format!(
            "enrollment at {} Hz, test at {} Hz",
            enroll.sample_rate, test.sample_rate
        )));
    }
    let original = embedder.embed_waveform(enroll)?;
    let fallback = |why: &str, original: Vec<f64>| {
        log::info!("EDA fallback: {why}");
        EdaOutcome {
            embedding: original.clone(),
            original,
            simulated: None,
            snr_db: None,
        }
    };
    let mask = detector.speech_mask(test)?;
    let hop = (mask.frame_shift * test.sample_rate as f64).round() as usize;
    let noise = vad::extract_nonspeech(test, &mask, hop);
    let needed = (cfg.min_noise_secs * test.sample_rate as f64).ceil() as usize;
    if noise.len() < needed.max(1) {
        return Ok(fallback(
            &format!("{} non-speech samples, need {needed}", noise.len()),
            original,
        ));
    }
    if noise.samples.iter().all(|&v| v == 0.0) {
        return Ok(fallback("test non-speech is digital silence", original));
    }
    let (lo, hi) = cfg.snr_range;
    let snr = if hi > lo { rng.random_range(lo..hi) } else { lo };
    let mixed = mix_noise(enroll, &noise, snr, &cfg.mix_vad)?;
    let simulated = embedder.embed_waveform(&mixed.mixture)?;
    let embedding = average_embeddings(&[&original, &simulated])?;
    log::debug!("EDA mixed {} noise samples at {snr:.2} dB", noise.len());
    Ok(EdaOutcome {
        embedding,
        original,
        simulated: Some(simulated),
        snr_db: Some(snr),
    })
}

const EMBD_MAGIC: &[u8; 8] = b"FFSVEMBD";
const EMBD_VERSION: u32 = 1;

pub fn write_embeddings<W: Write>(w: &mut W, embs: &[Embedding]) -> Result<()> {
    let dim = embs.first().map_or(0, |e| e.dim());
    if let Some(e) = embs.iter().find(|e| e.dim() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: e.dim(),
        });
    }
    binio::write_magic(w, EMBD_MAGIC, EMBD_VERSION)?;
    binio::write_u32(w, binio::len_u32(dim)?)?;
    binio::write_u32(w, binio::len_u32(embs.len())?)?;
    for e in embs {
        binio::write_str(w, &e.id)?;
        binio::write_f32_slice(w, &e.vector)?;
    }
    Ok(())
}

pub fn read_embeddings<R: Read>(r: &mut R) -> Result<Vec<Embedding>> {
    let version = binio::read_magic(r, EMBD_MAGIC)?;
    if version != EMBD_VERSION {
        return Err(Error::UnsupportedFormat(format!(
            "embedding archive version {version}"
        )));
    }
    let dim = binio::read_u32(r)? as usize;
    let count = binio::read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let id = binio::read_str(r)?;
        out.push(Embedding::new(id, binio::read_f32_vec(r, dim)?));
    }
    Ok(out)
}

pub fn save_embeddings(path: impl AsRef<Path>, embs: &[Embedding]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_embeddings(&mut w, embs)?;
    w.flush()?;
    Ok(())
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<Vec<Embedding>> {
    read_embeddings(&mut BufReader::new(File::open(path)?))
}
