//! Audio loading and rate conversion.
//!
//! All downstream processing works on mono `f64` sample buffers in the
//! range [-1, 1]. WAV files of any channel count and common sample formats
//! (8/16/24/32-bit integer PCM and 32-bit float) are decoded, downmixed to
//! mono by channel averaging, and resampled to the target rate with a
//! band-limited windowed-sinc interpolator.

use std::path::Path;

use crate::error::{Error, Result};

/// Half-width of the sinc interpolation kernel, in input samples.
const SINC_TAPS: isize = 32;

/// Fraction of the theoretical cutoff used by the anti-aliasing filter.
/// Slightly below 1.0 to keep the transition band inside Nyquist.
const CUTOFF_MARGIN: f64 = 0.95;

/// A mono audio buffer with an associated sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Waveform {
            samples,
            sample_rate,
        }
    }

    /// All-zero waveform of `len` samples.
    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Waveform::new(vec![0.0; len], sample_rate)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Mean squared sample value. Zero for empty buffers.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64
    }

    /// Largest absolute sample value. Zero for empty buffers.
    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |acc, s| acc.max(s.abs()))
    }

    /// Copy of the samples in `[offset_s, offset_s + duration_s)`, clamped to
    /// the end of the buffer.
    pub fn slice_seconds(&self, offset_s: f64, duration_s: f64) -> Waveform {
        let start = ((offset_s * self.sample_rate as f64).round() as usize).min(self.len());
        let want = (duration_s * self.sample_rate as f64).round() as usize;
        let end = (start + want).min(self.len());
        Waveform::new(self.samples[start..end].to_vec(), self.sample_rate)
    }

    /// Repeat the buffer end-to-end (or truncate it) to exactly `len` samples.
    pub fn tile_to_len(&self, len: usize) -> Result<Waveform> {
        if self.samples.is_empty() && len > 0 {
            return Err(Error::Audio(
                "cannot tile an empty waveform to a non-zero length".into(),
            ));
        }
        let mut out = Vec::with_capacity(len);
        while out.len() < len {
            let take = (len - out.len()).min(self.samples.len());
            out.extend_from_slice(&self.samples[..take]);
        }
        Ok(Waveform::new(out, self.sample_rate))
    }
}

/// Decode a WAV file to mono by averaging channels. No resampling.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path)
        .map_err(|e| Error::Audio(format!("cannot open {}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.channels == 0 {
        return Err(Error::Audio(format!(
            "{} declares zero channels",
            path.display()
        )));
    }
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Audio(format!("decode failure in {}: {e}", path.display())))?,
        hound::SampleFormat::Int => {
            let scale = 1.0 / f64::from(1u32 << (spec.bits_per_sample - 1));
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 * scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Audio(format!("decode failure in {}: {e}", path.display())))?
        }
    };
    let channels = spec.channels as usize;
    let frames = interleaved.len() / channels;
    let mut mono = Vec::with_capacity(frames);
    for frame in interleaved.chunks_exact(channels) {
        mono.push(frame.iter().sum::<f64>() / channels as f64);
    }
    Ok(Waveform::new(mono, spec.sample_rate))
}

/// Write a mono waveform as 16-bit PCM. Samples are clamped to [-1, 1].
pub fn write_wav_pcm16(path: &Path, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)
        .map_err(|e| Error::Audio(format!("cannot create {}: {e}", path.display())))?;
    for &s in &wave.samples {
        let v = (s.clamp(-1.0, 1.0) * 32768.0).round();
        writer
            .write_sample(v.clamp(-32768.0, 32767.0) as i16)
            .map_err(|e| Error::Audio(format!("write failure in {}: {e}", path.display())))?;
    }
    writer
        .finalize()
        .map_err(|e| Error::Audio(format!("finalize failure in {}: {e}", path.display())))
}

/// Resample to `target_rate` with band-limited windowed-sinc interpolation.
///
/// Each output sample is a Hann-windowed sinc sum over [`SINC_TAPS`] input
/// samples on either side of the (rational) source position, low-passed at
/// [`CUTOFF_MARGIN`] of the narrower Nyquist frequency and normalized by the
/// local kernel mass so DC gain is exactly one. Equal input and output rates
/// return the input samples bit-identically.
pub fn resample(wave: &Waveform, target_rate: u32) -> Result<Waveform> {
    if wave.sample_rate == 0 || target_rate == 0 {
        return Err(Error::Audio("sample rates must be positive".into()));
    }
    if wave.sample_rate == target_rate {
        return Ok(wave.clone());
    }
    let from = wave.sample_rate as u64;
    let to = target_rate as u64;
    // Output length: round(len * to / from), computed in integers.
    let out_len = ((wave.len() as u128 * to as u128 + from as u128 / 2) / from as u128) as usize;
    let cutoff = CUTOFF_MARGIN * (to as f64 / from as f64).min(1.0);
    let x = &wave.samples;
    let mut out = Vec::with_capacity(out_len);
    for n in 0..out_len {
        // Source position of output sample n, in input-sample units.
        let pos = n as f64 * from as f64 / to as f64;
        let base = pos.floor() as isize;
        let mut acc = 0.0;
        let mut norm = 0.0;
        for j in (base - SINC_TAPS + 1)..=(base + SINC_TAPS) {
            let u = pos - j as f64;
            let w = 0.5 * (1.0 + (std::f64::consts::PI * u / SINC_TAPS as f64).cos());
            let k = cutoff * sinc(cutoff * u) * w;
            norm += k;
            if j >= 0 && (j as usize) < x.len() {
                acc += x[j as usize] * k;
            }
        }
        out.push(if norm.abs() > f64::EPSILON {
            acc / norm
        } else {
            0.0
        });
    }
    Ok(Waveform::new(out, target_rate))
}

fn sinc(u: f64) -> f64 {
    if u.abs() < 1e-12 {
        1.0
    } else {
        let pu = std::f64::consts::PI * u;
        pu.sin() / pu
    }
}

/// Decode a WAV file, downmix to mono, and resample to `target_rate`.
pub fn load_audio(path: &Path, target_rate: u32) -> Result<Waveform> {
    let wave = read_wav(path)?;
    resample(&wave, target_rate)
}
