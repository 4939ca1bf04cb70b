//! WAV ingestion, resampling and pre-emphasis.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Pipeline sample rate.
pub const PIPELINE_RATE: u32 = 16_000;
pub const DEFAULT_PRE_EMPHASIS: f64 = 0.97;

const RESAMPLE_TAPS: usize = 64;
const RESAMPLE_KAISER_BETA: f64 = 8.0;

/// Mono PCM signal with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if samples.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("waveform contains non-finite samples"));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Mean square over all samples.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|x| x * x).sum::<f64>() / self.samples.len() as f64
    }
}

/// Reads a 16-bit PCM WAV file and returns one waveform per channel.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Vec<Waveform>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    parse_wav(&bytes)
}

/// Parses an in-memory RIFF/WAVE container.
pub fn parse_wav(bytes: &[u8]) -> Result<Vec<Waveform>> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::Format("missing RIFF/WAVE header".into()));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_start = pos + 8;
        let body_end = body_start
            .checked_add(size)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format("chunk extends past end of file".into()))?;
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(Error::Format("fmt chunk too short".into()));
                }
                let mut format = u16::from_le_bytes([body[0], body[1]]);
                let channels = u16::from_le_bytes([body[2], body[3]]);
                let rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                let bits = u16::from_le_bytes([body[14], body[15]]);
                // WAVE_FORMAT_EXTENSIBLE carries the real format tag in the sub-format GUID.
                if format == 0xFFFE {
                    if body.len() < 26 {
                        return Err(Error::Format("extensible fmt chunk too short".into()));
                    }
                    format = u16::from_le_bytes([body[24], body[25]]);
                }
                fmt = Some((format, channels, rate, bits));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // chunks are word aligned
        pos = body_end + (size & 1);
    }
    let (format, channels, rate, bits) =
        fmt.ok_or_else(|| Error::Format("missing fmt chunk".into()))?;
    let data = data.ok_or_else(|| Error::Format("missing data chunk".into()))?;
    if format != 1 {
        return Err(Error::UnsupportedFormat(format!(
            "encoding tag {format} is not PCM"
        )));
    }
    if bits != 16 {
        return Err(Error::UnsupportedFormat(format!(
            "{bits}-bit samples; only 16-bit PCM is supported"
        )));
    }
    if channels == 0 || rate == 0 {
        return Err(Error::Format("zero channels or sample rate".into()));
    }
    let channels = channels as usize;
    let frame_bytes = 2 * channels;
    let n = data.len() / frame_bytes;
    if n == 0 {
        return Err(Error::EmptyAudio);
    }
    let mut out = vec![Vec::with_capacity(n); channels];
    for frame in data.chunks_exact(frame_bytes) {
        for (ch, s) in frame.chunks_exact(2).enumerate() {
            let v = i16::from_le_bytes([s[0], s[1]]);
            out[ch].push(v as f64 / 32768.0);
        }
    }
    Ok(out
        .into_iter()
        .map(|samples| Waveform {
            samples,
            sample_rate: rate,
        })
        .collect())
}

fn quantize(x: f64) -> i16 {
    (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Writes the channels interleaved as 16-bit PCM. All channels must share a
/// sample rate and length.
pub fn write_wav(path: impl AsRef<Path>, channels: &[Waveform]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    encode_wav(&mut w, channels)?;
    w.flush()?;
    Ok(())
}

pub fn encode_wav<W: Write>(w: &mut W, channels: &[Waveform]) -> Result<()> {
    let first = channels
        .first()
        .ok_or_else(|| Error::invalid("no channels to write"))?;
    let rate = first.sample_rate;
    let n = first.len();
    if channels.iter().any(|c| c.sample_rate != rate || c.len() != n) {
        return Err(Error::invalid(
            "channels differ in sample rate or length",
        ));
    }
    let n_ch = channels.len() as u32;
    let data_len = n as u64 * 2 * n_ch as u64;
    if data_len > u32::MAX as u64 - 36 {
        return Err(Error::invalid("audio too long for a RIFF container"));
    }
    let data_len = data_len as u32;
    let mut buf = Vec::with_capacity(44 + data_len as usize);
    buf.extend_from_slice(b"RIFF");
    buf.extend_from_slice(&(36 + data_len).to_le_bytes());
    buf.extend_from_slice(b"WAVE");
    buf.extend_from_slice(b"fmt ");
    buf.extend_from_slice(&16u32.to_le_bytes());
    buf.extend_from_slice(&1u16.to_le_bytes());
    buf.extend_from_slice(&(n_ch as u16).to_le_bytes());
    buf.extend_from_slice(&rate.to_le_bytes());
    buf.extend_from_slice(&(rate * 2 * n_ch).to_le_bytes());
    buf.extend_from_slice(&((2 * n_ch) as u16).to_le_bytes());
    buf.extend_from_slice(&16u16.to_le_bytes());
    buf.extend_from_slice(b"data");
    buf.extend_from_slice(&data_len.to_le_bytes());
    for i in 0..n {
        for c in channels {
            buf.extend_from_slice(&quantize(c.samples[i]).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Modified Bessel function of the first kind, order zero.
pub(crate) fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

pub(crate) fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Band-limited resampling with a 64-tap Kaiser-windowed sinc kernel whose
/// cutoff sits at the lower of the two Nyquist frequencies.
pub fn resample(w: &Waveform, target_rate: u32) -> Result<Waveform> {
    if target_rate == 0 {
        return Err(Error::invalid("target rate must be positive"));
    }
    if w.is_empty() {
        return Err(Error::EmptyAudio);
    }
    if w.sample_rate == target_rate {
        return Ok(w.clone());
    }
    let src = w.sample_rate as f64;
    let dst = target_rate as f64;
    let out_len = (w.len() as f64 * dst / src).round() as usize;
    let ratio = (dst / src).min(1.0);
    let half = (RESAMPLE_TAPS / 2) as f64;
    let i0_beta = bessel_i0(RESAMPLE_KAISER_BETA);
    let x = &w.samples;
    let n_in = x.len() as i64;

    let mut out = Vec::with_capacity(out_len);
    for n in 0..out_len {
        let t = n as f64 * src / dst;
        let center = t.floor() as i64;
        let lo = center - (RESAMPLE_TAPS as i64 / 2 - 1);
        let hi = center + RESAMPLE_TAPS as i64 / 2;
        let mut acc = 0.0;
        let mut norm = 0.0;
        for k in lo..=hi {
            let u = t - k as f64;
            let r = u / half;
            if r.abs() >= 1.0 {
                continue;
            }
            let win = bessel_i0(RESAMPLE_KAISER_BETA * (1.0 - r * r).sqrt()) / i0_beta;
            let h = ratio * sinc(ratio * u) * win;
            norm += h;
            if (0..n_in).contains(&k) {
                acc += h * x[k as usize];
            }
        }
        // unit DC gain
        out.push(if norm.abs() > 1e-12 { acc / norm } else { acc });
    }
    Ok(Waveform {
        samples: out,
        sample_rate: target_rate,
    })
}

/// First-order pre-emphasis `y[t] = x[t] - alpha * x[t-1]`, `y[0] = x[0]`.
pub fn pre_emphasize(w: &Waveform, alpha: f64) -> Result<Waveform> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::invalid(format!(
            "pre-emphasis coefficient {alpha} outside [0, 1)"
        )));
    }
    let x = &w.samples;
    let mut y = Vec::with_capacity(x.len());
    if let Some(&first) = x.first() {
        y.push(first);
        y.extend(x.windows(2).map(|p| p[1] - alpha * p[0]));
    }
    Ok(Waveform {
        samples: y,
        sample_rate: w.sample_rate,
    })
}
