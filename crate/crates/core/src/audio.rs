//! WAV decoding/encoding, format normalization, and fixed-length shaping.
//!
//! All audio enters the pipeline as a mono [`Waveform`] with samples in
//! `[-1, 1]`. Files are RIFF WAV, PCM16 or float32, 1 or 2 channels; output
//! is always PCM16 mono little-endian. The canonical model input is 4 s at
//! 16 kHz (64000 samples).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

/// Canonical sample rate of the pipeline.
pub const MODEL_SAMPLE_RATE: u32 = 16_000;
/// Canonical model input length: 4 s at 16 kHz.
pub const MODEL_SAMPLES: usize = 64_000;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("empty waveform")]
    EmptyWaveform,
    #[error("non-finite sample at index {0}")]
    NonFiniteSample(usize),
    #[error("sample rate must be positive")]
    ZeroSampleRate,
    #[error("malformed WAV header: {0}")]
    MalformedHeader(String),
    #[error("unsupported WAV encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("WAV payload is empty")]
    EmptyPayload,
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// Mono audio buffer. Samples are finite, in `[-1, 1]`, and non-empty.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, AudioError> {
        if samples.is_empty() {
            return Err(AudioError::EmptyWaveform);
        }
        if sample_rate == 0 {
            return Err(AudioError::ZeroSampleRate);
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(AudioError::NonFiniteSample(i));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
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

    /// Root-mean-square amplitude over the full buffer.
    pub fn rms(&self) -> f64 {
        rms(&self.samples)
    }
}

pub(crate) fn rms(samples: &[f64]) -> f64 {
    (samples.iter().map(|s| s * s).sum::<f64>() / samples.len() as f64).sqrt()
}

const FORMAT_PCM: u16 = 1;
const FORMAT_IEEE_FLOAT: u16 = 3;

/// Decode a WAV file to a mono waveform.
///
/// Accepts PCM16 and float32, 1 or 2 channels. Stereo is averaged to mono;
/// samples end up in `[-1, 1]`.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform, AudioError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_wav(&bytes)
}

fn decode_wav(bytes: &[u8]) -> Result<Waveform, AudioError> {
    let header = |msg: &str| AudioError::MalformedHeader(msg.to_string());
    if bytes.len() < 12 {
        return Err(header("file shorter than RIFF header"));
    }
    if &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(header("missing RIFF/WAVE magic"));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // (format, channels, rate, bits)
    let mut data: Option<&[u8]> = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_start = pos + 8;
        let body_end = body_start
            .checked_add(size)
            .ok_or_else(|| header("chunk size overflow"))?;
        if body_end > bytes.len() {
            return Err(header("chunk extends past end of file"));
        }
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(header("fmt chunk too small"));
                }
                let format = u16::from_le_bytes(body[0..2].try_into().unwrap());
                let channels = u16::from_le_bytes(body[2..4].try_into().unwrap());
                let rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                let bits = u16::from_le_bytes(body[14..16].try_into().unwrap());
                fmt = Some((format, channels, rate, bits));
            }
            b"data" => data = Some(body),
            _ => {} // skip LIST, fact, etc.
        }
        // chunks are word-aligned
        pos = body_end + (size & 1);
    }

    let (format, channels, rate, bits) = fmt.ok_or_else(|| header("missing fmt chunk"))?;
    let data = data.ok_or_else(|| header("missing data chunk"))?;
    if data.is_empty() {
        return Err(AudioError::EmptyPayload);
    }
    if rate == 0 {
        return Err(AudioError::ZeroSampleRate);
    }
    if channels == 0 || channels > 2 {
        return Err(AudioError::UnsupportedEncoding(format!(
            "{channels} channels (only 1 or 2 supported)"
        )));
    }

    let bytes_per_sample = match (format, bits) {
        (FORMAT_PCM, 16) => 2,
        (FORMAT_IEEE_FLOAT, 32) => 4,
        _ => {
            return Err(AudioError::UnsupportedEncoding(format!(
                "format tag {format} with {bits} bits"
            )))
        }
    };
    let frame_size = bytes_per_sample * channels as usize;
    if data.len() % frame_size != 0 {
        return Err(header("sample data truncated mid-frame"));
    }
    let n_frames = data.len() / frame_size;
    if n_frames == 0 {
        return Err(AudioError::EmptyPayload);
    }

    let mut samples = Vec::with_capacity(n_frames);
    for f in 0..n_frames {
        let mut acc = 0.0f64;
        for c in 0..channels as usize {
            let at = f * frame_size + c * bytes_per_sample;
            let v = match format {
                FORMAT_PCM => {
                    i16::from_le_bytes(data[at..at + 2].try_into().unwrap()) as f64 / 32768.0
                }
                _ => {
                    let raw = f32::from_le_bytes(data[at..at + 4].try_into().unwrap());
                    if !raw.is_finite() {
                        return Err(AudioError::NonFiniteSample(f));
                    }
                    (raw as f64).clamp(-1.0, 1.0)
                }
            };
            acc += v;
        }
        samples.push(acc / channels as f64);
    }
    Waveform::new(samples, rate)
}

/// Encode a waveform as PCM16 mono WAV. Out-of-range samples saturate.
pub fn write_wav(w: &Waveform, path: impl AsRef<Path>) -> Result<(), AudioError> {
    let bytes = encode_wav(w);
    let mut file = std::fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

fn encode_wav(w: &Waveform) -> Vec<u8> {
    let data_size = (w.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + data_size as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_size).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&FORMAT_PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&w.sample_rate().to_le_bytes());
    out.extend_from_slice(&(w.sample_rate() * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits per sample
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_size.to_le_bytes());
    for &s in w.samples() {
        let code = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&code.to_le_bytes());
    }
    out
}

/// Linear-interpolation resampling to `target_rate`.
///
/// Output length is `round(len * target / source)`. Equal rates return the
/// input unchanged.
pub fn resample(w: &Waveform, target_rate: u32) -> Result<Waveform, AudioError> {
    if target_rate == 0 {
        return Err(AudioError::ZeroSampleRate);
    }
    if target_rate == w.sample_rate() {
        return Ok(w.clone());
    }
    let src = w.samples();
    let n_out = ((src.len() as f64 * target_rate as f64 / w.sample_rate() as f64).round()
        as usize)
        .max(1);
    let step = w.sample_rate() as f64 / target_rate as f64;
    let mut out = Vec::with_capacity(n_out);
    for i in 0..n_out {
        let pos = i as f64 * step;
        let i0 = pos.floor() as usize;
        if i0 + 1 >= src.len() {
            out.push(src[src.len() - 1]);
        } else {
            let frac = pos - i0 as f64;
            out.push(src[i0] + frac * (src[i0 + 1] - src[i0]));
        }
    }
    Waveform::new(out, target_rate)
}

/// How [`fix_length`] treats inputs longer than the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LengthMode {
    /// Take the leading window.
    PadRepeat,
    /// Take a seed-deterministic contiguous window.
    CropRandom,
}

/// Force a waveform to exactly `n_samples`.
///
/// Shorter inputs are repeat-tiled and truncated; longer inputs are cropped
/// to a contiguous window (leading under [`LengthMode::PadRepeat`], seeded
/// under [`LengthMode::CropRandom`]). The window is a pure function of
/// `(input, seed)`, so repeated calls agree.
pub fn fix_length(w: &Waveform, n_samples: usize, mode: LengthMode, seed: u64) -> Waveform {
    assert!(n_samples > 0, "n_samples must be positive");
    let src = w.samples();
    let samples = if src.len() == n_samples {
        return w.clone();
    } else if src.len() < n_samples {
        src.iter().copied().cycle().take(n_samples).collect()
    } else {
        let start = match mode {
            LengthMode::PadRepeat => 0,
            LengthMode::CropRandom => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.gen_range(0..=src.len() - n_samples)
            }
        };
        src[start..start + n_samples].to_vec()
    };
    Waveform::new(samples, w.sample_rate()).expect("windowing preserves validity")
}
