//! Shoebox room simulation with the image-source method, RIR convolution and
//! SNR-controlled noise mixing for far-field augmentation.

use std::f64::consts::PI;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::audio_io::{sinc, Waveform};
use crate::error::{Error, Result};
use crate::features::FrameConfig;
use crate::vad::{self, EnergyVadConfig};

pub const SPEED_OF_SOUND: f64 = 343.0;
/// Length of the windowed-sinc fractional-delay filter.
pub const FRACTIONAL_DELAY_TAPS: usize = 81;
/// Minimum distance between any source and microphone, and to the walls.
pub const WALL_MARGIN: f64 = 0.1;

pub type Point3 = [f64; 3];

fn distance(a: &Point3, b: &Point3) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Absorption coefficients are ordered `[x=0, x=Lx, y=0, y=Ly, z=0, z=Lz]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoomSpec {
    pub dimensions: Point3,
    pub absorption: [f64; 6],
    pub source: Point3,
    pub noise: Point3,
    pub mics: Vec<Point3>,
    pub max_order: usize,
}

impl RoomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dimensions.iter().any(|&d| !(d > 2.0 * WALL_MARGIN)) {
            return Err(Error::invalid("room dimensions too small"));
        }
        if self.absorption.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(Error::invalid("absorption coefficients must lie in (0, 1]"));
        }
        if self.mics.is_empty() {
            return Err(Error::invalid("room has no microphones"));
        }
        for p in self.mics.iter().chain([&self.source, &self.noise]) {
            if !self.contains(p, WALL_MARGIN) {
                return Err(Error::invalid(format!(
                    "position {p:?} is not inside the room with {WALL_MARGIN} m margin"
                )));
            }
        }
        Ok(())
    }

    pub fn contains(&self, p: &Point3, margin: f64) -> bool {
        p.iter()
            .zip(&self.dimensions)
            .all(|(&c, &l)| c >= margin && c <= l - margin)
    }

    pub fn reflection_coefficients(&self) -> [f64; 6] {
        self.absorption.map(|a| (1.0 - a).max(0.0).sqrt())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MicLayout {
    Single,
    /// Four microphones on a horizontal circle around the sampled array centre.
    Circular4 { radius: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoomConfig {
    pub width_range: (f64, f64),
    pub depth_range: (f64, f64),
    pub height_range: (f64, f64),
    pub absorption_range: (f64, f64),
    pub max_order: usize,
    pub snr_range: (f64, f64),
    /// Margin used when sampling positions; at least [`WALL_MARGIN`].
    pub placement_margin: f64,
    /// Minimum source-to-microphone distance when sampling.
    pub min_distance: f64,
    pub mic_layout: MicLayout,
    pub sample_rate: u32,
}

impl Default for RoomConfig {
    fn default() -> Self {
        Self {
            width_range: (6.0, 8.0),
            depth_range: (6.0, 8.0),
            height_range: (2.7, 3.5),
            absorption_range: (0.2, 0.7),
            max_order: 6,
            snr_range: (0.0, 20.0),
            placement_margin: 0.5,
            min_distance: 1.0,
            mic_layout: MicLayout::Single,
            sample_rate: 16_000,
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn check_range(name: &str, (lo, hi): (f64, f64)) -> Result<()> {
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(Error::invalid(format!("{name} range ({lo}, {hi}) is invalid")));
    }
    Ok(())
}

impl RoomConfig {
    pub fn validate(&self) -> Result<()> {
        check_range("width", self.width_range)?;
        check_range("depth", self.depth_range)?;
        check_range("height", self.height_range)?;
        check_range("absorption", self.absorption_range)?;
        check_range("snr", self.snr_range)?;
        if self.absorption_range.0 <= 0.0 || self.absorption_range.1 > 1.0 {
            return Err(Error::invalid("absorption range must lie in (0, 1]"));
        }
        let margin = self.array_margin();
        let smallest = self
            .width_range
            .0
            .min(self.depth_range.0)
            .min(self.height_range.0);
        if smallest <= 2.0 * margin {
            return Err(Error::invalid("rooms too small for the placement margin"));
        }
        Ok(())
    }

    fn array_margin(&self) -> f64 {
        let radius = match self.mic_layout {
            MicLayout::Single => 0.0,
            MicLayout::Circular4 { radius } => radius,
        };
        self.placement_margin.max(WALL_MARGIN) + radius
    }
}

fn sample_point<R: Rng + ?Sized>(rng: &mut R, dims: &Point3, margin: f64) -> Point3 {
    [0, 1, 2].map(|i| uniform(rng, (margin, dims[i] - margin)))
}

/// Draws a random room with speaker, noise source and microphone(s).
pub fn sample_room<R: Rng + ?Sized>(cfg: &RoomConfig, rng: &mut R) -> Result<RoomSpec> {
    cfg.validate()?;
    let dims = [
        uniform(rng, cfg.width_range),
        uniform(rng, cfg.depth_range),
        uniform(rng, cfg.height_range),
    ];
    let absorption = [0; 6].map(|_| uniform(rng, cfg.absorption_range));
    let margin = cfg.placement_margin.max(WALL_MARGIN);
    let array_margin = cfg.array_margin();
    // rejection sampling keeps both sources away from the array
    let mut attempt = 0;
    let (centre, source, noise) = loop {
        let centre = sample_point(rng, &dims, array_margin);
        let source = sample_point(rng, &dims, margin);
        let noise = sample_point(rng, &dims, margin);
        attempt += 1;
        let clear = distance(&centre, &source) >= cfg.min_distance + array_margin - margin
            && distance(&centre, &noise) >= cfg.min_distance + array_margin - margin;
        if clear || attempt > 1000 {
            break (centre, source, noise);
        }
    };
    let mics = match cfg.mic_layout {
        MicLayout::Single => vec![centre],
        MicLayout::Circular4 { radius } => (0..4)
            .map(|k| {
                let a = k as f64 * PI / 2.0;
                [centre[0] + radius * a.cos(), centre[1] + radius * a.sin(), centre[2]]
            })
            .collect(),
    };
    let room = RoomSpec {
        dimensions: dims,
        absorption,
        source,
        noise,
        mics,
        max_order: cfg.max_order,
    };
    room.validate()?;
    Ok(room)
}

/// One mirrored copy of a source as seen from a microphone.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSource {
    pub position: Point3,
    pub order: usize,
    pub distance: f64,
    pub delay_s: f64,
    pub amplitude: f64,
}

/// Enumerates every image with at most `room.max_order` reflections and a
/// non-zero reflection gain.
pub fn image_sources(room: &RoomSpec, src: &Point3, mic: &Point3) -> Result<Vec<ImageSource>> {
    if distance(src, mic) < 1e-9 {
        return Err(Error::invalid("source and microphone coincide"));
    }
    for p in [src, mic] {
        if !room.contains(p, 0.0) {
            return Err(Error::invalid(format!("position {p:?} lies outside the room")));
        }
    }
    let beta = room.reflection_coefficients();
    let n_max = room.max_order as i64;
    // per axis: (coordinate, reflections, gain) for every image index
    let axis_images = |axis: usize| -> Vec<(f64, usize, f64)> {
        let (s, l) = (src[axis], room.dimensions[axis]);
        let (b_lo, b_hi) = (beta[2 * axis], beta[2 * axis + 1]);
        let mut out = Vec::new();
        for n in -n_max..=n_max {
            for q in 0..=1i64 {
                let lo_hits = (n - q).unsigned_abs() as usize;
                let hi_hits = n.unsigned_abs() as usize;
                if lo_hits + hi_hits > room.max_order {
                    continue;
                }
                let coord = (1 - 2 * q) as f64 * s + 2.0 * n as f64 * l;
                let gain = b_lo.powi(lo_hits as i32) * b_hi.powi(hi_hits as i32);
                out.push((coord, lo_hits + hi_hits, gain));
            }
        }
        out
    };
    let (xs, ys, zs) = (axis_images(0), axis_images(1), axis_images(2));
    let mut images = Vec::new();
    for &(x, ox, gx) in &xs {
        for &(y, oy, gy) in &ys {
            if ox + oy > room.max_order {
                continue;
            }
            for &(z, oz, gz) in &zs {
                let order = ox + oy + oz;
                let gain = gx * gy * gz;
                if order > room.max_order || gain == 0.0 {
                    continue;
                }
                let position = [x, y, z];
                let d = distance(&position, mic);
                images.push(ImageSource {
                    position,
                    order,
                    distance: d,
                    delay_s: d / SPEED_OF_SOUND,
                    amplitude: gain / (4.0 * PI * d),
                });
            }
        }
    }
    Ok(images)
}

/// Room impulse response at a fixed sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Rir {
    pub taps: Vec<f64>,
    pub peak_delay_samples: usize,
    pub sample_rate: u32,
}

impl Rir {
    pub fn energy(&self) -> f64 {
        self.taps.iter().map(|x| x * x).sum()
    }
}

/// Image-source RIR. Every image contributes an 81-tap Hann-windowed sinc
/// centred on its fractional delay; taps falling before t = 0 are dropped.
pub fn simulate_rir(room: &RoomSpec, src: &Point3, mic: &Point3, sample_rate: u32) -> Result<Rir> {
    let images = image_sources(room, src, mic)?;
    let fs = sample_rate as f64;
    let half = (FRACTIONAL_DELAY_TAPS / 2) as i64;
    let max_delay = images.iter().map(|i| i.delay_s * fs).fold(0.0, f64::max);
    let len = max_delay.ceil() as usize + half as usize + 1;
    let mut taps = vec![0.0; len];
    for img in &images {
        let tau = img.delay_s * fs;
        let centre = tau.round() as i64;
        for k in centre - half..=centre + half {
            if k < 0 || k as usize >= len {
                continue;
            }
            let u = k as f64 - tau;
            let window = 0.5 * (1.0 + (PI * u / (half + 1) as f64).cos());
            taps[k as usize] += img.amplitude * sinc(u) * window;
        }
    }
    let peak_delay_samples = taps
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .map_or(0, |(i, _)| i);
    Ok(Rir {
        taps,
        peak_delay_samples,
        sample_rate,
    })
}

/// Full linear convolution, `len = x.len() + h.len() - 1`.
pub fn convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    if x.is_empty() || h.is_empty() {
        return Vec::new();
    }
    let out_len = x.len() + h.len() - 1;
    if x.len().min(h.len()) <= 64 {
        let mut y = vec![0.0; out_len];
        for (i, &a) in x.iter().enumerate() {
            for (j, &b) in h.iter().enumerate() {
                y[i + j] += a * b;
            }
        }
        return y;
    }
    let n = out_len.next_power_of_two();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let pad = |v: &[f64]| {
        let mut b: Vec<Complex<f64>> = v.iter().map(|&r| Complex::new(r, 0.0)).collect();
        b.resize(n, Complex::new(0.0, 0.0));
        b
    };
    let mut a = pad(x);
    let mut b = pad(h);
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (p, q) in a.iter_mut().zip(&b) {
        *p *= q;
    }
    inv.process(&mut a);
    let scale = 1.0 / n as f64;
    a[..out_len].iter().map(|c| c.re * scale).collect()
}

pub fn apply_rir(w: &Waveform, h: &Rir) -> Result<Waveform> {
    if w.is_empty() || h.taps.is_empty() {
        return Err(Error::EmptyAudio);
    }
    if w.sample_rate != h.sample_rate {
        return Err(Error::invalid(format!(
            "waveform at {} Hz but RIR at {} Hz",
            w.sample_rate, h.sample_rate
        )));
    }
    Ok(Waveform {
        samples: convolve(&w.samples, &h.taps),
        sample_rate: w.sample_rate,
    })
}

/// Loops or truncates `noise` to `len` samples, starting at `offset`.
pub fn fit_length(noise: &[f64], len: usize, offset: usize) -> Vec<f64> {
    if noise.is_empty() {
        return vec![0.0; len];
    }
    (0..len).map(|i| noise[(offset + i) % noise.len()]).collect()
}

/// Samples covered by at least one active energy-VAD frame of `speech`.
/// Falls back to every sample when no frame is active or the signal is
/// shorter than one frame.
pub fn active_samples(speech: &Waveform, vad_cfg: &EnergyVadConfig) -> Vec<bool> {
    let frame = FrameConfig::default();
    let len = frame.frame_len(speech.sample_rate);
    let hop = frame.hop(speech.sample_rate);
    let mut active = vec![false; speech.len()];
    if let Ok(mask) = vad::energy_vad_waveform(speech, &frame, vad_cfg) {
        for (t, _) in mask.mask.iter().enumerate().filter(|(_, &m)| m) {
            active[t * hop..(t * hop + len).min(speech.len())].fill(true);
        }
    }
    if !active.iter().any(|&a| a) {
        active.fill(true);
    }
    active
}

fn masked_power(x: &[f64], mask: &[bool]) -> f64 {
    let (sum, n) = x
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, n), (v, _)| (s + v * v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// SNR in dB of two separate components, both measured over the active
/// frames of `speech`.
pub fn measure_snr_db(speech: &Waveform, noise: &[f64], vad_cfg: &EnergyVadConfig) -> f64 {
    let active = active_samples(speech, vad_cfg);
    10.0 * (masked_power(&speech.samples, &active) / masked_power(noise, &active)).log10()
}

#[derive(Debug, Clone)]
pub struct MixResult {
    pub mixture: Waveform,
    /// Noise after looping/truncation and gain, i.e. `mixture - speech`.
    pub scaled_noise: Vec<f64>,
    /// Amplitude gain applied to the noise.
    pub gain: f64,
}

/// Mixes `noise` (looped or truncated to the speech length) into `speech`
/// so that the active-frame SNR equals `snr_db`.
pub fn mix_noise(
    speech: &Waveform,
    noise: &Waveform,
    snr_db: f64,
    vad_cfg: &EnergyVadConfig,
) -> Result<MixResult> {
    if speech.is_empty() || speech.samples.iter().all(|&x| x == 0.0) {
        return Err(Error::invalid("speech is silent"));
    }
    if noise.is_empty() || noise.samples.iter().all(|&x| x == 0.0) {
        return Err(Error::invalid("noise is silent"));
    }
    let fitted = fit_length(&noise.samples, speech.len(), 0);
    mix_fitted(speech, &fitted, snr_db, &active_samples(speech, vad_cfg))
}

fn mix_fitted(speech: &Waveform, noise: &[f64], snr_db: f64, active: &[bool]) -> Result<MixResult> {
    let ps = masked_power(&speech.samples, active);
    let pn = masked_power(noise, active);
    if pn <= 0.0 {
        return Err(Error::invalid("noise is silent over the active speech frames"));
    }
    if ps <= 0.0 {
        return Err(Error::invalid("speech is silent over its active frames"));
    }
    let gain = (ps / (pn * 10f64.powf(snr_db / 10.0))).sqrt();
    let scaled_noise: Vec<f64> = noise.iter().map(|x| x * gain).collect();
    let samples = speech
        .samples
        .iter()
        .zip(&scaled_noise)
        .map(|(s, n)| s + n)
        .collect();
    Ok(MixResult {
        mixture: Waveform {
            samples,
            sample_rate: speech.sample_rate,
        },
        scaled_noise,
        gain,
    })
}

/// A simulated far-field copy with its components kept apart.
#[derive(Debug, Clone)]
pub struct Augmented {
    /// Mixture per microphone.
    pub channels: Vec<Waveform>,
    /// Reverberant speech per microphone.
    pub speech: Vec<Waveform>,
    /// Reverberant, scaled noise per microphone.
    pub noise: Vec<Vec<f64>>,
    pub snr_db: f64,
    pub noise_index: usize,
    pub room: RoomSpec,
}

/// Simulates a random room, reverberates speech and a random noise from the
/// bank, mixes them at a random SNR and truncates to the input length.
///
/// The noise gain is computed on the first microphone and shared by the
/// others, so inter-channel level differences are preserved.
pub fn augment<R: Rng + ?Sized>(
    utt: &Waveform,
    noise_bank: &[Waveform],
    cfg: &RoomConfig,
    vad_cfg: &EnergyVadConfig,
    rng: &mut R,
) -> Result<Augmented> {
    if noise_bank.is_empty() {
        return Err(Error::invalid("noise bank is empty"));
    }
    if utt.sample_rate != cfg.sample_rate {
        return Err(Error::invalid(format!(
            "utterance at {} Hz, simulator configured for {} Hz",
            utt.sample_rate, cfg.sample_rate
        )));
    }
    let room = sample_room(cfg, rng)?;
    let noise_index = rng.random_range(0..noise_bank.len());
    let noise_src = &noise_bank[noise_index];
    if noise_src.sample_rate != cfg.sample_rate {
        return Err(Error::invalid("noise sample rate differs from the simulator rate"));
    }
    if noise_src.samples.iter().all(|&x| x == 0.0) {
        return Err(Error::invalid(format!("noise {noise_index} is silent")));
    }
    let offset = rng.random_range(0..noise_src.len());
    let snr_db = uniform(rng, cfg.snr_range);
    let noise_fit = fit_length(&noise_src.samples, utt.len(), offset);
    let n = utt.len();

    let mut speech = Vec::with_capacity(room.mics.len());
    let mut noise = Vec::with_capacity(room.mics.len());
    for mic in &room.mics {
        let hs = simulate_rir(&room, &room.source, mic, cfg.sample_rate)?;
        let hn = simulate_rir(&room, &room.noise, mic, cfg.sample_rate)?;
        let mut s = convolve(&utt.samples, &hs.taps);
        s.truncate(n);
        let mut v = convolve(&noise_fit, &hn.taps);
        v.truncate(n);
        speech.push(Waveform {
            samples: s,
            sample_rate: cfg.sample_rate,
        });
        noise.push(v);
    }
    let active = active_samples(&speech[0], vad_cfg);
    let gain = mix_fitted(&speech[0], &noise[0], snr_db, &active)?.gain;
    let mut channels = Vec::with_capacity(speech.len());
    for (s, v) in speech.iter().zip(noise.iter_mut()) {
        v.iter_mut().for_each(|x| *x *= gain);
        channels.push(Waveform {
            samples: s.samples.iter().zip(v.iter()).map(|(a, b)| a + b).collect(),
            sample_rate: cfg.sample_rate,
        });
    }
    Ok(Augmented {
        channels,
        speech,
        noise,
        snr_db,
        noise_index,
        room,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cube(absorption: f64, max_order: usize) -> RoomSpec {
        RoomSpec {
            dimensions: [6.0, 7.0, 3.0],
            absorption: [absorption; 6],
            source: [2.0, 3.0, 1.5],
            noise: [5.0, 5.0, 1.0],
            mics: vec![[4.0, 3.0, 1.5]],
            max_order,
        }
    }

    #[test]
    fn sampled_rooms_respect_ranges() {
        let cfg = RoomConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let r = sample_room(&cfg, &mut rng).unwrap();
            assert!((6.0..=8.0).contains(&r.dimensions[0]));
            assert!((6.0..=8.0).contains(&r.dimensions[1]));
            assert!((2.7..=3.5).contains(&r.dimensions[2]));
            assert!(r.absorption.iter().all(|a| (0.2..=0.7).contains(a)));
            for p in r.mics.iter().chain([&r.source, &r.noise]) {
                assert!(r.contains(p, WALL_MARGIN));
            }
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let cfg = RoomConfig {
            mic_layout: MicLayout::Circular4 { radius: 0.05 },
            ..Default::default()
        };
        let a = sample_room(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_room(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.mics.len(), 4);
        let d = distance(&a.mics[0], &a.mics[2]);
        assert!((d - 0.1).abs() < 1e-12);
    }

    #[test]
    fn anechoic_direct_path() {
        let mut room = cube(1.0, 6);
        room.source = [1.0, 3.0, 1.5];
        room.mics = vec![[3.0, 3.0, 1.5]];
        let imgs = image_sources(&room, &room.source, &room.mics[0]).unwrap();
        assert_eq!(imgs.len(), 1);
        assert!((imgs[0].amplitude - 1.0 / (8.0 * PI)).abs() < 1e-15);
        assert!((imgs[0].delay_s - 2.0 / 343.0).abs() < 1e-15);

        let rir = simulate_rir(&room, &room.source, &room.mics[0], 16000).unwrap();
        let tau: f64 = 2.0 / 343.0 * 16000.0;
        assert_eq!(rir.peak_delay_samples, tau.round() as usize);
        // A band-limited impulse keeps its area.
        let area: f64 = rir.taps.iter().sum();
        assert!((area - 1.0 / (8.0 * PI)).abs() < 2e-3 / (8.0 * PI));
    }

    #[test]
    fn integer_delay_gives_exact_tap() {
        let mut room = cube(1.0, 0);
        let d = 100.0 * 343.0 / 16000.0;
        room.source = [1.0, 3.0, 1.5];
        room.mics = vec![[1.0 + d, 3.0, 1.5]];
        let rir = simulate_rir(&room, &room.source, &room.mics[0], 16000).unwrap();
        assert_eq!(rir.peak_delay_samples, 100);
        assert!((rir.taps[100] - 1.0 / (4.0 * PI * d)).abs() < 1e-12);
        assert!(rir.taps.iter().enumerate().all(|(i, v)| i == 100 || v.abs() < 1e-12));
    }

    #[test]
    fn rir_tail_decays() {
        let room = cube(0.4, 6);
        let rir = simulate_rir(&room, &room.source, &room.mics[0], 16000).unwrap();
        let peak = rir.taps[rir.peak_delay_samples].abs();
        assert!(rir.taps.last().unwrap().abs() < 1e-4 * peak);
        assert!(rir.taps.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn order_energy_decreases() {
        let room = RoomSpec {
            dimensions: [7.0, 7.0, 3.0],
            absorption: [0.5; 6],
            source: [3.0, 3.5, 1.5],
            noise: [1.0, 1.0, 1.0],
            mics: vec![[4.2, 3.5, 1.5]],
            max_order: 6,
        };
        let imgs = image_sources(&room, &room.source, &room.mics[0]).unwrap();
        let mut energy = vec![0.0; 7];
        for i in &imgs {
            energy[i.order] += i.amplitude * i.amplitude;
        }
        for k in 1..7 {
            assert!(energy[k] <= energy[k - 1], "order {k}: {energy:?}");
        }
    }

    #[test]
    fn coincident_positions_rejected() {
        let room = cube(0.5, 2);
        assert!(simulate_rir(&room, &room.source, &room.source, 16000).is_err());
    }

    #[test]
    fn unit_impulse_is_identity() {
        let w = Waveform::new((0..300).map(|i| (i as f64 * 0.1).sin()).collect(), 16000).unwrap();
        let h = Rir {
            taps: vec![1.0],
            peak_delay_samples: 0,
            sample_rate: 16000,
        };
        assert_eq!(apply_rir(&w, &h).unwrap(), w);
    }

    fn direct_convolution(x: &[f64], h: &[f64]) -> Vec<f64> {
        (0..x.len() + h.len() - 1)
            .map(|n| {
                (0..h.len())
                    .filter(|&k| n >= k && n - k < x.len())
                    .map(|k| h[k] * x[n - k])
                    .sum()
            })
            .collect()
    }

    #[test]
    fn fft_convolution_matches_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..2000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h: Vec<f64> = (0..300).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = convolve(&x, &h);
        let d = direct_convolution(&x, &h);
        assert_eq!(y.len(), 2299);
        for (a, b) in y.iter().zip(&d) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn mix_hits_target_snr() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let speech = Waveform::new(
            (0..16000).map(|i| (2.0 * PI * 220.0 * i as f64 / 16000.0).sin() * 2f64.sqrt()).collect(),
            16000,
        )
        .unwrap();
        let noise =
            Waveform::new((0..5000).map(|_| rng.random_range(-3f64.sqrt()..3f64.sqrt())).collect(), 16000)
                .unwrap();
        let cfg = EnergyVadConfig::default();
        for snr in [0.0, 10.0, 20.0] {
            let m = mix_noise(&speech, &noise, snr, &cfg).unwrap();
            assert_eq!(m.mixture.len(), speech.len());
            assert!((measure_snr_db(&speech, &m.scaled_noise, &cfg) - snr).abs() < 0.01);
            let residual: Vec<f64> =
                m.mixture.samples.iter().zip(&speech.samples).map(|(a, b)| a - b).collect();
            assert!((measure_snr_db(&speech, &residual, &cfg) - snr).abs() < 0.01);
        }
        // unit-power tone and roughly unit-power noise at 20 dB
        let m = mix_noise(&speech, &noise, 20.0, &cfg).unwrap();
        assert!((m.gain - 0.1).abs() < 0.01);
    }

    #[test]
    fn silent_inputs_rejected() {
        let cfg = EnergyVadConfig::default();
        let s = Waveform::new(vec![0.1; 1000], 16000).unwrap();
        let z = Waveform::new(vec![0.0; 1000], 16000).unwrap();
        assert!(mix_noise(&s, &z, 10.0, &cfg).is_err());
        assert!(mix_noise(&z, &s, 10.0, &cfg).is_err());
    }

    fn bank() -> Vec<Waveform> {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        vec![Waveform::new((0..8000).map(|_| rng.random_range(-0.5..0.5)).collect(), 16000).unwrap()]
    }

    fn burst() -> Waveform {
        let mut s = vec![0.0; 3000];
        s.extend((0..9000).map(|i| 0.4 * (2.0 * PI * 300.0 * i as f64 / 16000.0).sin()));
        s.extend(vec![0.0; 3000]);
        Waveform::new(s, 16000).unwrap()
    }

    #[test]
    fn augmentation_contract() {
        let cfg = RoomConfig {
            max_order: 3,
            ..Default::default()
        };
        let vad_cfg = EnergyVadConfig::default();
        let utt = burst();
        let a = augment(&utt, &bank(), &cfg, &vad_cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = augment(&utt, &bank(), &cfg, &vad_cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a.channels, b.channels);
        assert_eq!(a.channels[0].len(), utt.len());
        assert!((0.0..=20.0).contains(&a.snr_db));
        let snr = measure_snr_db(&a.speech[0], &a.noise[0], &vad_cfg);
        assert!((snr - a.snr_db).abs() < 0.01);
        assert!(augment(&utt, &[], &cfg, &vad_cfg, &mut ChaCha8Rng::seed_from_u64(4)).is_err());
    }

    #[test]
    fn four_mic_augmentation() {
        let cfg = RoomConfig {
            max_order: 2,
            mic_layout: MicLayout::Circular4 { radius: 0.05 },
            ..Default::default()
        };
        let a = augment(&burst(), &bank(), &cfg, &EnergyVadConfig::default(), &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        assert_eq!(a.channels.len(), 4);
        assert_ne!(a.channels[0], a.channels[1]);
    }

    #[test]
    fn free_field_distance_law() {
        let mut room = cube(1.0, 0);
        room.source = [1.0, 3.0, 1.5];
        let near = image_sources(&room, &room.source, &[2.0, 3.0, 1.5]).unwrap();
        let far = image_sources(&room, &room.source, &[3.0, 3.0, 1.5]).unwrap();
        assert!((near[0].amplitude / 2.0 - far[0].amplitude).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn convolution_is_linear(
            x in prop::collection::vec(-1.0f64..1.0, 80),
            y in prop::collection::vec(-1.0f64..1.0, 80),
            h in prop::collection::vec(-1.0f64..1.0, 70),
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
        ) {
            let mixed: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
            let lhs = convolve(&mixed, &h);
            let cx = convolve(&x, &h);
            let cy = convolve(&y, &h);
            for i in 0..lhs.len() {
                prop_assert!((lhs[i] - (a * cx[i] + b * cy[i])).abs() < 1e-9);
            }
        }
    }
}
