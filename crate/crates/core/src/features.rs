//! Framing, log-Mel filterbank energies, MFCCs and mean normalization, plus
//! the feature archive format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::audio_io::{self, Waveform};
use crate::binio;
use crate::error::{Error, Result};

pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    LogMel,
    Mfcc,
}

impl FeatureKind {
    fn tag(self) -> &'static str {
        match self {
            FeatureKind::LogMel => "logmel",
            FeatureKind::Mfcc => "mfcc",
        }
    }
}

impl std::str::FromStr for FeatureKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logmel" => Ok(FeatureKind::LogMel),
            "mfcc" => Ok(FeatureKind::Mfcc),
            other => Err(Error::invalid(format!("unknown feature kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// Frames × coefficients, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub data: Vec<f64>,
    pub frames: usize,
    pub dims: usize,
    /// Seconds between frame starts.
    pub frame_shift: f64,
    pub kind: FeatureKind,
}

impl FeatureMatrix {
    pub fn from_rows(rows: &[Vec<f64>], frame_shift: f64, kind: FeatureKind) -> Result<Self> {
        let dims = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dims) {
            return Err(Error::invalid("ragged feature rows"));
        }
        Ok(Self {
            data: rows.concat(),
            frames: rows.len(),
            dims,
            frame_shift,
            kind,
        })
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dims..(t + 1) * self.dims]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dims.max(1)).take(self.frames)
    }

    pub fn column_means(&self) -> Vec<f64> {
        let mut means = vec![0.0; self.dims];
        for row in self.rows() {
            for (m, v) in means.iter_mut().zip(row) {
                *m += v;
            }
        }
        let n = self.frames.max(1) as f64;
        means.iter_mut().for_each(|m| *m /= n);
        means
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_frames(&self, start: usize, end: usize) -> FeatureMatrix {
        FeatureMatrix {
            data: self.data[start * self.dims..end * self.dims].to_vec(),
            frames: end - start,
            dims: self.dims,
            frame_shift: self.frame_shift,
            kind: self.kind,
        }
    }
}

/// Windowed analysis frames of one signal.
#[derive(Debug, Clone)]
pub struct Frames {
    pub frames: Vec<Vec<f64>>,
    pub sample_rate: u32,
    pub hop: usize,
    pub frame_len: usize,
}

impl Frames {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame_shift(&self) -> f64 {
        self.hop as f64 / self.sample_rate as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameConfig {
    pub frame_ms: f64,
    pub hop_ms: f64,
}

impl Default for FrameConfig {
    fn default() -> Self {
        Self {
            frame_ms: 25.0,
            hop_ms: 10.0,
        }
    }
}

impl FrameConfig {
    pub fn frame_len(&self, rate: u32) -> usize {
        (self.frame_ms * rate as f64 / 1000.0).round() as usize
    }

    pub fn hop(&self, rate: u32) -> usize {
        (self.hop_ms * rate as f64 / 1000.0).round() as usize
    }

    /// Number of complete frames in `n` samples, or `None` if `n` is shorter
    /// than one frame.
    pub fn frame_count(&self, n: usize, rate: u32) -> Option<usize> {
        let len = self.frame_len(rate);
        (n >= len).then(|| (n - len) / self.hop(rate) + 1)
    }
}

pub fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Cuts the signal into Hamming-windowed frames. Trailing samples that do not
/// fill a frame are dropped.
pub fn frame_signal(w: &Waveform, cfg: &FrameConfig) -> Result<Frames> {
    let frame_len = cfg.frame_len(w.sample_rate);
    let hop = cfg.hop(w.sample_rate);
    if frame_len == 0 || hop == 0 {
        return Err(Error::invalid("frame length and hop must be at least one sample"));
    }
    let count = cfg
        .frame_count(w.len(), w.sample_rate)
        .ok_or(Error::TooShort {
            needed: frame_len,
            got: w.len(),
        })?;
    let window = hamming(frame_len);
    let frames = (0..count)
        .map(|t| {
            w.samples[t * hop..t * hop + frame_len]
                .iter()
                .zip(&window)
                .map(|(x, h)| x * h)
                .collect()
        })
        .collect();
    Ok(Frames {
        frames,
        sample_rate: w.sample_rate,
        hop,
        frame_len,
    })
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MelConfig {
    pub n_fft: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            n_fft: 512,
            n_mels: 64,
            f_min: 20.0,
            f_max: 8000.0,
        }
    }
}

/// Triangular filters on the HTK Mel scale, one row of `n_fft/2 + 1` bin
/// weights per band.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    weights: Vec<Vec<f64>>,
}

impl MelFilterbank {
    pub fn new(cfg: &MelConfig, sample_rate: u32) -> Result<Self> {
        if cfg.n_mels == 0 {
            return Err(Error::invalid("n_mels must be at least 1"));
        }
        if cfg.n_fft < 2 || !(cfg.f_min >= 0.0 && cfg.f_min < cfg.f_max) {
            return Err(Error::invalid("invalid filterbank band or FFT size"));
        }
        let n_bins = cfg.n_fft / 2 + 1;
        let mel_lo = hz_to_mel(cfg.f_min);
        let mel_hi = hz_to_mel(cfg.f_max);
        let edges: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let bin_hz = sample_rate as f64 / cfg.n_fft as f64;
        let weights = (0..cfg.n_mels)
            .map(|m| {
                let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..n_bins)
                    .map(|k| {
                        let f = k as f64 * bin_hz;
                        if f <= lo || f >= hi {
                            0.0
                        } else if f <= mid {
                            (f - lo) / (mid - lo)
                        } else {
                            (hi - f) / (hi - mid)
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(Self { weights })
    }

    pub fn n_mels(&self) -> usize {
        self.weights.len()
    }

    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|w| w.iter().zip(power).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Power spectra via a zero-padded FFT.
struct PowerSpectrum {
    fft: Arc<dyn Fft<f64>>,
    n_fft: usize,
}

impl PowerSpectrum {
    fn new(n_fft: usize) -> Self {
        Self {
            fft: FftPlanner::new().plan_fft_forward(n_fft),
            n_fft,
        }
    }

    fn compute(&self, frame: &[f64], buf: &mut Vec<Complex<f64>>) -> Vec<f64> {
        buf.clear();
        buf.extend(frame.iter().take(self.n_fft).map(|&x| Complex::new(x, 0.0)));
        buf.resize(self.n_fft, Complex::new(0.0, 0.0));
        self.fft.process(buf);
        buf[..self.n_fft / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
    }
}

pub fn logmel(frames: &Frames, cfg: &MelConfig) -> Result<FeatureMatrix> {
    if frames.frame_len > cfg.n_fft {
        return Err(Error::invalid(format!(
            "frame length {} exceeds FFT size {}",
            frames.frame_len, cfg.n_fft
        )));
    }
    let bank = MelFilterbank::new(cfg, frames.sample_rate)?;
    let spec = PowerSpectrum::new(cfg.n_fft);
    let mut buf = Vec::with_capacity(cfg.n_fft);
    let mut data = Vec::with_capacity(frames.len() * cfg.n_mels);
    for frame in &frames.frames {
        let power = spec.compute(frame, &mut buf);
        data.extend(bank.apply(&power).into_iter().map(|e| e.max(LOG_FLOOR).ln()));
    }
    Ok(FeatureMatrix {
        data,
        frames: frames.len(),
        dims: cfg.n_mels,
        frame_shift: frames.frame_shift(),
        kind: FeatureKind::LogMel,
    })
}

/// Orthonormal DCT-II basis, `n_out` rows of length `n_in`.
pub fn dct_matrix(n_out: usize, n_in: usize) -> Vec<Vec<f64>> {
    let n = n_in as f64;
    (0..n_out)
        .map(|k| {
            let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            (0..n_in)
                .map(|i| {
                    scale
                        * (std::f64::consts::PI * k as f64 * (2 * i + 1) as f64 / (2.0 * n)).cos()
                })
                .collect()
        })
        .collect()
}

/// DCT-II of a log-Mel matrix, keeping the first `n_coef` coefficients
/// (coefficient 0 included).
pub fn mfcc_from_logmel(lm: &FeatureMatrix, n_coef: usize) -> Result<FeatureMatrix> {
    if n_coef == 0 || n_coef > lm.dims {
        return Err(Error::invalid(format!(
            "cannot keep {n_coef} cepstral coefficients from {} bands",
            lm.dims
        )));
    }
    let basis = dct_matrix(n_coef, lm.dims);
    let mut data = Vec::with_capacity(lm.frames * n_coef);
    for row in lm.rows() {
        data.extend(basis.iter().map(|b| b.iter().zip(row).map(|(a, x)| a * x).sum::<f64>()));
    }
    Ok(FeatureMatrix {
        data,
        frames: lm.frames,
        dims: n_coef,
        frame_shift: lm.frame_shift,
        kind: FeatureKind::Mfcc,
    })
}

pub fn mfcc(frames: &Frames, cfg: &MelConfig, n_coef: usize) -> Result<FeatureMatrix> {
    mfcc_from_logmel(&logmel(frames, cfg)?, n_coef)
}

/// Subtracts the per-utterance mean of every coefficient.
pub fn mean_normalize(f: &FeatureMatrix) -> Result<FeatureMatrix> {
    if f.frames == 0 {
        return Err(Error::invalid("cannot normalize an empty feature matrix"));
    }
    let means = f.column_means();
    let mut out = f.clone();
    for row in out.data.chunks_exact_mut(f.dims) {
        for (v, m) in row.iter_mut().zip(&means) {
            *v -= m;
        }
    }
    Ok(out)
}

/// End-to-end front-end: resample, pre-emphasize, frame, filterbank / cepstra,
/// optional mean normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    pub kind: FeatureKind,
    pub sample_rate: u32,
    pub pre_emphasis: f64,
    pub frame: FrameConfig,
    pub mel: MelConfig,
    pub n_mfcc: usize,
    pub mean_norm: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            kind: FeatureKind::LogMel,
            sample_rate: audio_io::PIPELINE_RATE,
            pre_emphasis: audio_io::DEFAULT_PRE_EMPHASIS,
            frame: FrameConfig::default(),
            mel: MelConfig::default(),
            n_mfcc: 30,
            mean_norm: true,
        }
    }
}

impl FeatureConfig {
    pub fn mfcc() -> Self {
        Self {
            kind: FeatureKind::Mfcc,
            ..Self::default()
        }
    }

    pub fn output_dim(&self) -> usize {
        match self.kind {
            FeatureKind::LogMel => self.mel.n_mels,
            FeatureKind::Mfcc => self.n_mfcc,
        }
    }

    /// Resampled and pre-emphasized signal, ready for framing.
    pub fn condition(&self, w: &Waveform) -> Result<Waveform> {
        let w = audio_io::resample(w, self.sample_rate)?;
        audio_io::pre_emphasize(&w, self.pre_emphasis)
    }

    pub fn extract(&self, w: &Waveform) -> Result<FeatureMatrix> {
        let frames = frame_signal(&self.condition(w)?, &self.frame)?;
        let feats = match self.kind {
            FeatureKind::LogMel => logmel(&frames, &self.mel)?,
            FeatureKind::Mfcc => mfcc(&frames, &self.mel, self.n_mfcc)?,
        };
        if self.mean_norm {
            mean_normalize(&feats)
        } else {
            Ok(feats)
        }
    }
}

const FEAT_MAGIC: &[u8; 8] = b"FFSVFEAT";
const FEAT_VERSION: u32 = 1;

/// Writes `(id, matrix)` records. Values are stored as f32.
pub fn write_feature_archive<'a, I>(path: impl AsRef<Path>, items: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a FeatureMatrix)>,
{
    let mut w = BufWriter::new(File::create(path)?);
    binio::write_magic(&mut w, FEAT_MAGIC, FEAT_VERSION)?;
    for (id, m) in items {
        binio::write_str(&mut w, id)?;
        binio::write_u32(&mut w, binio::len_u32(m.frames)?)?;
        binio::write_u32(&mut w, binio::len_u32(m.dims)?)?;
        binio::write_f32_slice(&mut w, &m.data)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads every record. The archive does not record the frame shift or
/// feature kind, so callers supply them.
pub fn read_feature_archive(
    path: impl AsRef<Path>,
    frame_shift: f64,
    kind: FeatureKind,
) -> Result<Vec<(String, FeatureMatrix)>> {
    let mut r = BufReader::new(File::open(path)?);
    read_feature_records(&mut r, frame_shift, kind)
}

pub fn read_feature_records<R: Read>(
    r: &mut R,
    frame_shift: f64,
    kind: FeatureKind,
) -> Result<Vec<(String, FeatureMatrix)>> {
    let version = binio::read_magic(r, FEAT_MAGIC)?;
    if version != FEAT_VERSION {
        return Err(Error::Format(format!("unsupported feature archive version {version}")));
    }
    let mut out = Vec::new();
    while let Some(id) = binio::read_str_or_eof(r)? {
        let frames = binio::read_u32(r)? as usize;
        let dims = binio::read_u32(r)? as usize;
        let n = frames
            .checked_mul(dims)
            .filter(|&n| n < 1 << 31)
            .ok_or_else(|| Error::Format(format!("record {id:?} has implausible shape")))?;
        let data = binio::read_f32_vec(r, n)?;
        out.push((
            id,
            FeatureMatrix {
                data,
                frames,
                dims,
                frame_shift,
                kind,
            },
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(n: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..n).map(|_| rng.random_range(-0.5..0.5)).collect(), 16000).unwrap()
    }

    #[test]
    fn frame_counts() {
        let cfg = FrameConfig::default();
        assert_eq!(frame_signal(&noise(16000, 1), &cfg).unwrap().len(), 98);
        assert_eq!(frame_signal(&noise(400, 1), &cfg).unwrap().len(), 1);
        assert!(matches!(
            frame_signal(&noise(399, 1), &cfg),
            Err(Error::TooShort { needed: 400, got: 399 })
        ));
    }

    #[test]
    fn frames_are_hamming_windowed() {
        let w = Waveform::new(vec![1.0; 400], 16000).unwrap();
        let f = frame_signal(&w, &FrameConfig::default()).unwrap();
        assert_eq!(f.frames[0], hamming(400));
        assert!((f.frames[0][0] - 0.08).abs() < 1e-12);
    }

    #[test]
    fn zero_frames_hit_the_floor() {
        let w = Waveform::new(vec![0.0; 1000], 16000).unwrap();
        let frames = frame_signal(&w, &FrameConfig::default()).unwrap();
        let lm = logmel(&frames, &MelConfig::default()).unwrap();
        assert_eq!((lm.frames, lm.dims), (frames.len(), 64));
        assert!(lm.data.iter().all(|&v| v == LOG_FLOOR.ln()));
    }

    #[test]
    fn logmel_shape() {
        let frames = frame_signal(&noise(16000, 2), &FrameConfig::default()).unwrap();
        let lm = logmel(&frames, &MelConfig::default()).unwrap();
        assert_eq!((lm.frames, lm.dims), (98, 64));
        assert!((lm.frame_shift - 0.01).abs() < 1e-12);
    }

    #[test]
    fn filterbank_bands_are_nonempty() {
        let bank = MelFilterbank::new(&MelConfig::default(), 16000).unwrap();
        for w in &bank.weights {
            assert!(w.iter().sum::<f64>() > 0.0);
        }
        assert!(MelFilterbank::new(&MelConfig { n_mels: 0, ..Default::default() }, 16000).is_err());
    }

    #[test]
    fn mfcc_of_constant_logmel_has_only_c0() {
        let lm = FeatureMatrix::from_rows(&[vec![2.5; 64], vec![-1.0; 64]], 0.01, FeatureKind::LogMel)
            .unwrap();
        let c = mfcc_from_logmel(&lm, 30).unwrap();
        assert_eq!((c.frames, c.dims), (2, 30));
        assert!((c.row(0)[0] - 2.5 * 8.0).abs() < 1e-12);
        for t in 0..2 {
            for v in &c.row(t)[1..] {
                assert!(v.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dct_rows_are_orthonormal() {
        let m = dct_matrix(30, 64);
        for i in 0..30 {
            for j in 0..30 {
                let dot: f64 = m[i].iter().zip(&m[j]).map(|(a, b)| a * b).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-10);
            }
        }
        let full = dct_matrix(64, 64);
        for i in 0..64 {
            for j in 0..64 {
                let dot: f64 = (0..64).map(|k| full[k][i] * full[k][j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn mean_normalize_cases() {
        let m = FeatureMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]], 0.01, FeatureKind::Mfcc)
            .unwrap();
        let n = mean_normalize(&m).unwrap();
        assert_eq!(n.data, vec![-1.0, -1.0, 1.0, 1.0]);
        assert_eq!(mean_normalize(&n).unwrap(), n);
    }

    #[test]
    fn one_hop_shift_shifts_rows() {
        let w = noise(4000, 5);
        let shifted = Waveform::new(w.samples[160..].to_vec(), 16000).unwrap();
        let cfg = FrameConfig::default();
        let a = logmel(&frame_signal(&w, &cfg).unwrap(), &MelConfig::default()).unwrap();
        let b = logmel(&frame_signal(&shifted, &cfg).unwrap(), &MelConfig::default()).unwrap();
        assert_eq!(b.frames, a.frames - 1);
        for t in 0..b.frames {
            for (x, y) in a.row(t + 1).iter().zip(b.row(t)) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn louder_signal_has_larger_energies() {
        let w = noise(2000, 9);
        let loud = Waveform::new(w.samples.iter().map(|x| x * 1.5).collect(), 16000).unwrap();
        let cfg = FrameConfig::default();
        let a = logmel(&frame_signal(&w, &cfg).unwrap(), &MelConfig::default()).unwrap();
        let b = logmel(&frame_signal(&loud, &cfg).unwrap(), &MelConfig::default()).unwrap();
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!(y > x);
        }
    }

    #[test]
    fn pipeline_dims() {
        let w = noise(8000, 4);
        let lm = FeatureConfig::default().extract(&w).unwrap();
        assert_eq!((lm.frames, lm.dims, lm.kind), (48, 64, FeatureKind::LogMel));
        let mf = FeatureConfig::mfcc().extract(&w).unwrap();
        assert_eq!((mf.frames, mf.dims, mf.kind), (48, 30, FeatureKind::Mfcc));
        for m in mf.column_means() {
            assert!(m.abs() < 1e-9);
        }
    }

    #[test]
    fn archive_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.ark");
        let a = FeatureMatrix::from_rows(&[vec![0.5, -1.25], vec![2.0, 3.0]], 0.01, FeatureKind::Mfcc)
            .unwrap();
        let b = FeatureMatrix::from_rows(&[vec![1.0, 0.0]], 0.01, FeatureKind::Mfcc).unwrap();
        write_feature_archive(&path, [("utt-a", &a), ("utt-b", &b)]).unwrap();
        let back = read_feature_archive(&path, 0.01, FeatureKind::Mfcc).unwrap();
        assert_eq!(back, vec![("utt-a".to_string(), a), ("utt-b".to_string(), b)]);

        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], b"FFSVFEAT");
        let cut = &bytes[..bytes.len() - 2];
        assert!(read_feature_records(&mut &cut[..], 0.01, FeatureKind::Mfcc).is_err());
    }

    proptest! {
        #[test]
        fn normalized_columns_have_zero_mean(
            rows in prop::collection::vec(prop::collection::vec(-100.0f64..100.0, 3), 1..40)
        ) {
            let m = FeatureMatrix::from_rows(&rows, 0.01, FeatureKind::LogMel).unwrap();
            for mean in mean_normalize(&m).unwrap().column_means() {
                prop_assert!(mean.abs() < 1e-9);
            }
        }
    }
}
