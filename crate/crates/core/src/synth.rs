//! Deterministic toy corpus: formant-synthesized "speakers" and a small
//! noise bank, enough to exercise the whole pipeline without real data.
//!
//! Each speaker has a pitch range, a vocal-tract length factor that scales
//! every formant, personal formant offsets per vowel, a spectral tilt and a
//! breathiness level. Utterances are strings of vowels separated by pauses,
//! with silence at both ends.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::audio_io::Waveform;
use crate::error::{Error, Result};
use crate::seed::rng_for;

/// Formants (Hz) of the vowel inventory.
const VOWELS: [[f64; 3]; 6] = [
    [730.0, 1090.0, 2440.0],
    [270.0, 2290.0, 3010.0],
    [300.0, 870.0, 2240.0],
    [530.0, 1840.0, 2480.0],
    [570.0, 840.0, 2410.0],
    [660.0, 1720.0, 2410.0],
];
const BANDWIDTHS: [f64; 3] = [80.0, 110.0, 160.0];

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerProfile {
    pub id: String,
    pub f0: f64,
    pub tract_scale: f64,
    /// Multiplicative offsets per vowel and formant.
    pub formant_offsets: Vec<[f64; 3]>,
    /// One-pole low-pass coefficient on the glottal source.
    pub tilt: f64,
    /// Aspiration noise level relative to the voiced source.
    pub breathiness: f64,
}

impl SpeakerProfile {
    pub fn generate(seed: u64, id: &str) -> Self {
        let mut rng = rng_for(seed, &format!("speaker:{id}"));
        let formant_offsets = (0..VOWELS.len())
            .map(|_| {
                [
                    rng.random_range(0.9..1.1),
                    rng.random_range(0.9..1.1),
                    rng.random_range(0.92..1.08),
                ]
            })
            .collect();
        Self {
            id: id.to_string(),
            f0: rng.random_range(85.0..260.0),
            tract_scale: rng.random_range(0.82..1.2),
            formant_offsets,
            tilt: rng.random_range(0.5..0.9),
            breathiness: rng.random_range(0.02..0.15),
        }
    }
}

/// Two-pole resonator with unit gain at DC.
fn resonate(x: &mut [f64], freq: f64, bw: f64, rate: f64) {
    if freq >= 0.45 * rate {
        return;
    }
    let r = (-std::f64::consts::PI * bw / rate).exp();
    let c = 2.0 * r * (2.0 * std::f64::consts::PI * freq / rate).cos();
    let gain = 1.0 - c + r * r;
    let (mut y1, mut y2) = (0.0, 0.0);
    for v in x.iter_mut() {
        let y = gain * *v + c * y1 - r * r * y2;
        y2 = y1;
        y1 = y;
        *v = y;
    }
}

fn vowel<R: Rng + ?Sized>(p: &SpeakerProfile, v: usize, len: usize, rate: f64, rng: &mut R) -> Vec<f64> {
    let mut src = vec![0.0; len];
    let f0 = p.f0 * rng.random_range(0.9..1.1);
    let glide = rng.random_range(-0.15..0.15);
    let mut phase = 0.0;
    let mut lp = 0.0;
    for (n, s) in src.iter_mut().enumerate() {
        let progress = n as f64 / len as f64;
        let z: f64 = StandardNormal.sample(rng);
        let jitter = 1.0 + 0.01 * z;
        phase += f0 * (1.0 + glide * progress) * jitter / rate;
        let pulse = if phase >= 1.0 {
            phase -= 1.0;
            1.0
        } else {
            0.0
        };
        let noise: f64 = StandardNormal.sample(rng);
        lp = p.tilt * lp + (1.0 - p.tilt) * pulse;
        *s = lp + p.breathiness * 0.1 * noise;
    }
    for k in 0..3 {
        let f = VOWELS[v][k] * p.formant_offsets[v][k] * p.tract_scale;
        resonate(&mut src, f, BANDWIDTHS[k], rate);
    }
    // Raised-cosine attack and release.
    let ramp = ((0.02 * rate) as usize).min(len / 2);
    for n in 0..ramp {
        let g = 0.5 - 0.5 * (std::f64::consts::PI * n as f64 / ramp as f64).cos();
        src[n] *= g;
        src[len - 1 - n] *= g;
    }
    src
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceConfig {
    pub sample_rate: u32,
    /// Voiced material between the edge silences, in seconds.
    pub speech_secs: (f64, f64),
    pub edge_silence_secs: (f64, f64),
    pub peak: f64,
}

impl Default for UtteranceConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16000,
            speech_secs: (1.5, 2.5),
            edge_silence_secs: (0.25, 0.5),
            peak: 0.5,
        }
    }
}

/// One utterance; deterministic in `(seed, utt_id)`.
pub fn synth_utterance(
    p: &SpeakerProfile,
    seed: u64,
    utt_id: &str,
    cfg: &UtteranceConfig,
) -> Result<Waveform> {
    let rate = cfg.sample_rate as f64;
    if rate < 8000.0 {
        return Err(Error::invalid("synthesis needs at least 8 kHz"));
    }
    let mut rng = rng_for(seed, &format!("utt:{utt_id}"));
    let secs = |r: (f64, f64), rng: &mut rand_chacha::ChaCha8Rng| {
        if r.1 > r.0 {
            rng.random_range(r.0..r.1)
        } else {
            r.0
        }
    };
    let speech_len = (secs(cfg.speech_secs, &mut rng) * rate) as usize;
    let mut out = vec![0.0; (secs(cfg.edge_silence_secs, &mut rng) * rate) as usize];
    let start = out.len();
    while out.len() - start < speech_len {
        let v = rng.random_range(0..VOWELS.len());
        let len = (rng.random_range(0.12..0.3) * rate) as usize;
        out.extend(vowel(p, v, len, rate, &mut rng));
        let pause = (rng.random_range(0.03..0.15) * rate) as usize;
        out.extend(std::iter::repeat_n(0.0, pause));
    }
    out.extend(std::iter::repeat_n(
        0.0,
        (secs(cfg.edge_silence_secs, &mut rng) * rate) as usize,
    ));
    let max = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max > 0.0 {
        out.iter_mut().for_each(|v| *v *= cfg.peak / max);
    }
    Waveform::new(out, cfg.sample_rate)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    White,
    /// Low-passed noise with mains hum.
    Hum,
    /// A mixture of several unrelated synthetic talkers.
    Babble,
}

pub fn synth_noise(kind: NoiseKind, seed: u64, id: &str, secs: f64, rate: u32) -> Result<Waveform> {
    let n = (secs * rate as f64) as usize;
    if n == 0 {
        return Err(Error::EmptyAudio);
    }
    let mut rng = rng_for(seed, &format!("noise:{id}"));
    let mut x: Vec<f64> = match kind {
        NoiseKind::White => (0..n).map(|_| StandardNormal.sample(&mut rng)).collect(),
        NoiseKind::Hum => {
            let mut lp = 0.0;
            let hum = rng.random_range(48.0..62.0);
            (0..n)
                .map(|i| {
                    let w: f64 = StandardNormal.sample(&mut rng);
                    lp = 0.95 * lp + 0.05 * w;
                    let t = i as f64 / rate as f64;
                    lp * 4.0
                        + 0.3 * (2.0 * std::f64::consts::PI * hum * t).sin()
                        + 0.15 * (4.0 * std::f64::consts::PI * hum * t).sin()
                })
                .collect()
        }
        NoiseKind::Babble => {
            let mut acc = vec![0.0; n];
            let cfg = UtteranceConfig {
                sample_rate: rate,
                speech_secs: (secs, secs),
                edge_silence_secs: (0.0, 0.0),
                peak: 0.5,
            };
            for k in 0..6 {
                let p = SpeakerProfile::generate(seed, &format!("babble:{id}:{k}"));
                let u = synth_utterance(&p, seed, &format!("babble:{id}:{k}"), &cfg)?;
                let off = rng.random_range(0..n);
                for (i, a) in acc.iter_mut().enumerate() {
                    *a += u.samples[(i + off) % u.len()];
                }
            }
            acc
        }
    };
    let max = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max > 0.0 {
        x.iter_mut().for_each(|v| *v *= 0.3 / max);
    }
    Waveform::new(x, rate)
}

/// A small bank cycling through the noise kinds.
pub fn noise_bank(seed: u64, count: usize, secs: f64, rate: u32) -> Result<Vec<(String, Waveform)>> {
    let kinds = [NoiseKind::White, NoiseKind::Hum, NoiseKind::Babble];
    (0..count)
        .map(|k| {
            let id = format!("noise{k:02}");
            let w = synth_noise(kinds[k % kinds.len()], seed, &id, secs, rate)?;
            Ok((id, w))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthUtterance {
    pub utt_id: String,
    pub speaker_id: String,
    pub waveform: Waveform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub seed: u64,
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub utterance: UtteranceConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_speakers: 20,
            utts_per_speaker: 8,
            utterance: UtteranceConfig::default(),
        }
    }
}

pub fn speaker_id(k: usize) -> String {
    format!("spk{k:03}")
}

pub fn utt_id(speaker: usize, k: usize) -> String {
    format!("spk{speaker:03}_u{k:02}")
}

/// Utterances ordered by id.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Vec<SynthUtterance>> {
    let mut out = Vec::with_capacity(cfg.n_speakers * cfg.utts_per_speaker);
    for s in 0..cfg.n_speakers {
        let spk = speaker_id(s);
        let profile = SpeakerProfile::generate(cfg.seed, &spk);
        for u in 0..cfg.utts_per_speaker {
            let id = utt_id(s, u);
            let waveform = synth_utterance(&profile, cfg.seed, &id, &cfg.utterance)?;
            out.push(SynthUtterance {
                utt_id: id,
                speaker_id: spk.clone(),
                waveform,
            });
        }
    }
    Ok(out)
}
