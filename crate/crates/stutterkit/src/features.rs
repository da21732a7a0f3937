//! MFCC front-end and binary feature container.
//!
//! The pipeline mirrors a conventional speech front-end: pre-emphasis,
//! 20 ms Hamming windows with a 10 ms hop (no edge padding), magnitude
//! spectrum, a 40-band HTK-mel filterbank, floored natural log, and an
//! orthonormal DCT-II keeping the first 20 coefficients (including
//! coefficient 0), followed by per-utterance cepstral mean normalization.
//!
//! Frame count obeys `T = 1 + floor((L - win) / hop)` exactly, which keeps
//! the model's receptive-field arithmetic testable.

use std::io::{Read as _, Write as _};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Axis};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::error::{Error, Result};

/// Magic tag of the feature container format.
const SKFT_MAGIC: &[u8; 4] = b"SKFT";
const SKFT_VERSION: u32 = 1;

/// Floor applied to mel energies before the log.
const LOG_FLOOR: f64 = 1e-10;

/// What fills coefficient slot 0: the DCT's own first coefficient (the
/// default) or the log energy of the windowed frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum C0Mode {
    #[default]
    Keep,
    LogEnergy,
}

/// Front-end configuration. Defaults match the trained models: 20 MFCCs from
/// 20 ms frames with 10 ms hop at 16 kHz.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub n_mfcc: usize,
    pub n_mels: usize,
    pub win_ms: f64,
    pub hop_ms: f64,
    pub fft_size: usize,
    /// Pre-emphasis coefficient in [0, 1); 0 disables the filter.
    pub preemphasis: f64,
    /// Per-utterance cepstral mean normalization.
    pub cmn: bool,
    /// Coefficient-0 handling; `keep` retains the cepstral c0.
    pub c0: C0Mode,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            sample_rate: 16_000,
            n_mfcc: 20,
            n_mels: 40,
            win_ms: 20.0,
            hop_ms: 10.0,
            fft_size: 512,
            preemphasis: 0.97,
            cmn: true,
            c0: C0Mode::Keep,
        }
    }
}

impl FeatureConfig {
    pub fn win_samples(&self) -> usize {
        (self.win_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.win_ms > self.hop_ms && self.hop_ms > 0.0) {
            return Err(Error::Config(format!(
                "need win_ms > hop_ms > 0, got win {} hop {}",
                self.win_ms, self.hop_ms
            )));
        }
        if self.n_mfcc == 0 || self.n_mfcc > self.n_mels {
            return Err(Error::Config(format!(
                "need 1 <= n_mfcc <= n_mels, got n_mfcc {} n_mels {}",
                self.n_mfcc, self.n_mels
            )));
        }
        if self.fft_size < self.win_samples() {
            return Err(Error::Config(format!(
                "fft_size {} is smaller than the window ({} samples)",
                self.fft_size,
                self.win_samples()
            )));
        }
        if !(0.0..1.0).contains(&self.preemphasis) {
            return Err(Error::Config(format!(
                "preemphasis must lie in [0, 1), got {}",
                self.preemphasis
            )));
        }
        if self.sample_rate == 0 {
            return Err(Error::Config("sample_rate must be positive".into()));
        }
        Ok(())
    }
}

/// A `T x n_mfcc` feature sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub values: Array2<f64>,
    pub frame_hop_ms: f64,
}

impl FeatureMatrix {
    pub fn n_frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_coeffs(&self) -> usize {
        self.values.ncols()
    }
}

/// Precomputed window, filterbank, and DCT basis for a fixed config.
pub struct MfccExtractor {
    cfg: FeatureConfig,
    window: Vec<f64>,
    /// `n_mels x (fft_size/2 + 1)` triangular filterbank on magnitude bins.
    filterbank: Array2<f64>,
    /// `n_mfcc x n_mels` orthonormal DCT-II basis.
    dct: Array2<f64>,
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

impl MfccExtractor {
    pub fn new(cfg: FeatureConfig) -> Result<Self> {
        cfg.validate()?;
        let win = cfg.win_samples();
        // Symmetric Hamming window.
        let window: Vec<f64> = (0..win)
            .map(|n| {
                0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (win as f64 - 1.0)).cos()
            })
            .collect();

        // Triangular mel filterbank between 0 Hz and Nyquist.
        let n_bins = cfg.fft_size / 2 + 1;
        let f_max = cfg.sample_rate as f64 / 2.0;
        let mel_lo = hz_to_mel(0.0);
        let mel_hi = hz_to_mel(f_max);
        let edges: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let mut filterbank = Array2::zeros((cfg.n_mels, n_bins));
        for m in 0..cfg.n_mels {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..n_bins {
                let f = k as f64 * cfg.sample_rate as f64 / cfg.fft_size as f64;
                let w = if f >= lo && f <= mid {
                    (f - lo) / (mid - lo)
                } else if f > mid && f <= hi {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
                filterbank[[m, k]] = w;
            }
        }

        // Orthonormal DCT-II rows.
        let m_total = cfg.n_mels as f64;
        let mut dct = Array2::zeros((cfg.n_mfcc, cfg.n_mels));
        for j in 0..cfg.n_mfcc {
            let alpha = if j == 0 {
                (1.0 / m_total).sqrt()
            } else {
                (2.0 / m_total).sqrt()
            };
            for m in 0..cfg.n_mels {
                dct[[j, m]] = alpha
                    * (std::f64::consts::PI * j as f64 * (2.0 * m as f64 + 1.0) / (2.0 * m_total))
                        .cos();
            }
        }

        Ok(MfccExtractor {
            cfg,
            window,
            filterbank,
            dct,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    /// Number of frames produced for an input of `len` samples.
    pub fn n_frames_for_len(&self, len: usize) -> Option<usize> {
        let win = self.cfg.win_samples();
        let hop = self.cfg.hop_samples();
        if len < win {
            None
        } else {
            Some(1 + (len - win) / hop)
        }
    }

    /// Compute the MFCC sequence for one waveform.
    pub fn mfcc(&self, wave: &Waveform) -> Result<FeatureMatrix> {
        if wave.sample_rate != self.cfg.sample_rate {
            return Err(Error::Audio(format!(
                "waveform rate {} does not match feature config rate {}",
                wave.sample_rate, self.cfg.sample_rate
            )));
        }
        let win = self.cfg.win_samples();
        let hop = self.cfg.hop_samples();
        let n_frames = self.n_frames_for_len(wave.len()).ok_or_else(|| {
            Error::Audio(format!(
                "clip of {} samples is shorter than one window ({win} samples)",
                wave.len()
            ))
        })?;

        // Pre-emphasis over the whole utterance: y[t] = x[t] - a*x[t-1].
        let a = self.cfg.preemphasis;
        let x = &wave.samples;
        let mut emphasized = Vec::with_capacity(x.len());
        emphasized.push(x[0]);
        for t in 1..x.len() {
            emphasized.push(x[t] - a * x[t - 1]);
        }

        let n_bins = self.cfg.fft_size / 2 + 1;
        let mut planner = FftPlanner::<f64>::new();
        let fft = planner.plan_fft_forward(self.cfg.fft_size);
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.fft_size];
        let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];

        let mut values = Array2::zeros((n_frames, self.cfg.n_mfcc));
        let mut mags = vec![0.0f64; n_bins];
        let mut log_mel = vec![0.0f64; self.cfg.n_mels];
        for t in 0..n_frames {
            let start = t * hop;
            let mut frame_energy = 0.0;
            for (i, slot) in buf.iter_mut().enumerate() {
                let v = if i < win {
                    emphasized[start + i] * self.window[i]
                } else {
                    0.0
                };
                frame_energy += v * v;
                *slot = Complex::new(v, 0.0);
            }
            fft.process_with_scratch(&mut buf, &mut scratch);
            for (k, mag) in mags.iter_mut().enumerate() {
                *mag = buf[k].norm();
            }
            for (m, lm) in log_mel.iter_mut().enumerate() {
                let mut e = 0.0;
                for k in 0..n_bins {
                    e += self.filterbank[[m, k]] * mags[k];
                }
                *lm = e.max(LOG_FLOOR).ln();
            }
            for j in 0..self.cfg.n_mfcc {
                let mut c = 0.0;
                for (m, lm) in log_mel.iter().enumerate() {
                    c += self.dct[[j, m]] * lm;
                }
                values[[t, j]] = c;
            }
            if self.cfg.c0 == C0Mode::LogEnergy {
                values[[t, 0]] = frame_energy.max(LOG_FLOOR).ln();
            }
        }

        let mut feats = FeatureMatrix {
            values,
            frame_hop_ms: self.cfg.hop_ms,
        };
        if self.cfg.cmn {
            apply_cmn(&mut feats.values);
        }
        Ok(feats)
    }
}

/// Subtract the per-utterance mean of each coefficient column in place.
pub fn apply_cmn(values: &mut Array2<f64>) {
    let means = values.mean_axis(Axis(0)).expect("non-empty feature matrix");
    for mut row in values.rows_mut() {
        row -= &means;
    }
}

/// Write a feature matrix to the binary SKFT container
/// (magic, version, T, D as little-endian u32, then row-major f32 data).
pub fn write_skft(path: &Path, feats: &FeatureMatrix) -> Result<()> {
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
    );
    out.write_all(SKFT_MAGIC).map_err(|e| Error::io(path, e))?;
    out.write_u32::<LittleEndian>(SKFT_VERSION)
        .map_err(|e| Error::io(path, e))?;
    out.write_u32::<LittleEndian>(feats.n_frames() as u32)
        .map_err(|e| Error::io(path, e))?;
    out.write_u32::<LittleEndian>(feats.n_coeffs() as u32)
        .map_err(|e| Error::io(path, e))?;
    for v in feats.values.iter() {
        out.write_f32::<LittleEndian>(*v as f32)
            .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Read an SKFT container written by [`write_skft`].
pub fn read_skft(path: &Path, frame_hop_ms: f64) -> Result<FeatureMatrix> {
    let mut file = std::io::BufReader::new(
        std::fs::File::open(path).map_err(|e| Error::io(path, e))?,
    );
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != SKFT_MAGIC {
        return Err(Error::Data(format!(
            "{} is not an SKFT feature file",
            path.display()
        )));
    }
    let version = file
        .read_u32::<LittleEndian>()
        .map_err(|e| Error::io(path, e))?;
    if version != SKFT_VERSION {
        return Err(Error::Data(format!(
            "unsupported SKFT version {version} in {}",
            path.display()
        )));
    }
    let t = file
        .read_u32::<LittleEndian>()
        .map_err(|e| Error::io(path, e))? as usize;
    let d = file
        .read_u32::<LittleEndian>()
        .map_err(|e| Error::io(path, e))? as usize;
    let mut values = Array2::zeros((t, d));
    for v in values.iter_mut() {
        *v = file
            .read_f32::<LittleEndian>()
            .map_err(|e| Error::io(path, e))? as f64;
    }
    Ok(FeatureMatrix {
        values,
        frame_hop_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tone(freq: f64, rate: u32, n: usize, amp: f64) -> Waveform {
        let samples = (0..n)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin())
            .collect();
        Waveform::new(samples, rate)
    }

    fn extractor(cmn: bool) -> MfccExtractor {
        MfccExtractor::new(FeatureConfig {
            cmn,
            ..FeatureConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn log_energy_c0_replaces_only_the_first_column() {
        let wave = tone(440.0, 16_000, 16_000, 0.4);
        let base = FeatureConfig {
            cmn: false,
            ..FeatureConfig::default()
        };
        let kept = MfccExtractor::new(base.clone()).unwrap().mfcc(&wave).unwrap();
        let energy = MfccExtractor::new(FeatureConfig {
            c0: C0Mode::LogEnergy,
            ..base
        })
        .unwrap()
        .mfcc(&wave)
        .unwrap();

        // Columns 1.. are untouched; column 0 becomes the log energy of the
        // pre-emphasized, windowed frame.
        assert_eq!(
            kept.values.slice(ndarray::s![.., 1..]),
            energy.values.slice(ndarray::s![.., 1..])
        );
        let cfg = FeatureConfig::default();
        let win = cfg.win_samples();
        let a = cfg.preemphasis;
        let hamming: Vec<f64> = (0..win)
            .map(|n| {
                0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (win as f64 - 1.0)).cos()
            })
            .collect();
        let mut expected = 0.0;
        for i in 0..win {
            let x = wave.samples[i] - if i > 0 { a * wave.samples[i - 1] } else { 0.0 };
            expected += (x * hamming[i]).powi(2);
        }
        assert!((energy.values[[0, 0]] - expected.ln()).abs() < 1e-12);
        assert_ne!(kept.values[[0, 0]], energy.values[[0, 0]]);
    }

    #[test]
    fn frame_count_for_3s_clip_is_299() {
        let ex = extractor(true);
        let wave = Waveform::new(vec![0.1; 48_000], 16_000);
        let feats = ex.mfcc(&wave).unwrap();
        assert_eq!(feats.n_frames(), 299);
        assert_eq!(feats.n_coeffs(), 20);
    }

    #[test]
    fn all_zero_waveform_gives_identical_frames_and_zero_after_cmn() {
        let no_cmn = extractor(false);
        let wave = Waveform::new(vec![0.0; 8_000], 16_000);
        let feats = no_cmn.mfcc(&wave).unwrap();
        let first = feats.values.row(0).to_owned();
        for row in feats.values.rows() {
            assert_eq!(row, first.view());
        }
        let with_cmn = extractor(true);
        let feats = with_cmn.mfcc(&wave).unwrap();
        assert!(feats.values.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn pure_tone_has_constant_interior_trajectory() {
        // 1 kHz at 16 kHz: the 160-sample hop spans exactly 10 periods, so
        // all frames past the pre-emphasis edge see identical samples.
        let ex = extractor(false);
        let wave = tone(1000.0, 16_000, 16_000, 0.5);
        let feats = ex.mfcc(&wave).unwrap();
        let t = feats.n_frames();
        let reference = feats.values.row(t / 2).to_owned();
        for i in 1..t - 1 {
            for (a, b) in feats.values.row(i).iter().zip(reference.iter()) {
                let rel = (a - b).abs() / b.abs().max(1e-6);
                assert!(rel < 1e-3, "frame {i} deviates: {a} vs {b}");
            }
        }
    }

    #[test]
    fn too_short_clip_is_rejected() {
        let ex = extractor(true);
        let wave = Waveform::new(vec![0.1; 200], 16_000);
        assert!(matches!(ex.mfcc(&wave), Err(Error::Audio(_))));
    }

    #[test]
    fn cmn_makes_column_means_zero() {
        let ex = extractor(true);
        let wave = tone(440.0, 16_000, 12_345, 0.6);
        let feats = ex.mfcc(&wave).unwrap();
        for col in feats.values.columns() {
            let mean = col.mean().unwrap();
            assert!(mean.abs() < 1e-6, "column mean {mean} not normalized");
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad_hop = FeatureConfig {
            hop_ms: 25.0,
            ..FeatureConfig::default()
        };
        assert!(MfccExtractor::new(bad_hop).is_err());
        let bad_mfcc = FeatureConfig {
            n_mfcc: 41,
            ..FeatureConfig::default()
        };
        assert!(MfccExtractor::new(bad_mfcc).is_err());
        let bad_fft = FeatureConfig {
            fft_size: 128,
            ..FeatureConfig::default()
        };
        assert!(MfccExtractor::new(bad_fft).is_err());
    }

    #[test]
    fn skft_round_trip_preserves_shape_and_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.skft");
        let ex = extractor(true);
        let wave = tone(700.0, 16_000, 9_600, 0.5);
        let feats = ex.mfcc(&wave).unwrap();
        write_skft(&path, &feats).unwrap();
        let back = read_skft(&path, feats.frame_hop_ms).unwrap();
        assert_eq!(back.n_frames(), feats.n_frames());
        assert_eq!(back.n_coeffs(), feats.n_coeffs());
        for (a, b) in feats.values.iter().zip(back.values.iter()) {
            assert!((a - *b).abs() <= (a.abs() * 1e-6).max(1e-6));
        }
    }

    #[test]
    fn non_skft_file_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.skft");
        std::fs::write(&path, b"not a feature file").unwrap();
        assert!(matches!(read_skft(&path, 10.0), Err(Error::Data(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn frame_count_law_holds(len in 320usize..24_000) {
            let ex = extractor(true);
            let wave = Waveform::new(vec![0.3; len], 16_000);
            let feats = ex.mfcc(&wave).unwrap();
            prop_assert_eq!(feats.n_frames(), 1 + (len - 320) / 160);
        }

        #[test]
        fn cmn_is_idempotent(seed in 0u64..1000) {
            use rand::Rng;
            let mut rng = crate::rng::rng_for(seed, "cmn-prop", 0);
            let wave = Waveform::new(
                (0..4_000).map(|_| rng.random_range(-0.8..0.8)).collect(),
                16_000,
            );
            let ex = extractor(true);
            let feats = ex.mfcc(&wave).unwrap();
            let mut twice = feats.values.clone();
            apply_cmn(&mut twice);
            for (a, b) in feats.values.iter().zip(twice.iter()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn gain_shifts_only_c0_before_cmn(seed in 0u64..1000, c in 0.1f64..8.0) {
            use rand::Rng;
            let mut rng = crate::rng::rng_for(seed, "gain-prop", 0);
            let samples: Vec<f64> = (0..4_000).map(|_| rng.random_range(-0.5..0.5)).collect();
            let scaled: Vec<f64> = samples.iter().map(|s| s * c).collect();
            let ex = extractor(false);
            let base = ex.mfcc(&Waveform::new(samples, 16_000)).unwrap();
            let gained = ex.mfcc(&Waveform::new(scaled, 16_000)).unwrap();
            // A global gain adds ln(c) to every log-mel energy, which the
            // orthonormal DCT routes entirely into coefficient 0.
            let shift = (40f64).sqrt() * c.ln();
            for (t, (ra, rb)) in base.values.rows().into_iter()
                .zip(gained.values.rows()).enumerate()
            {
                prop_assert!((rb[0] - ra[0] - shift).abs() < 1e-5,
                    "frame {t}: c0 shift {} vs expected {shift}", rb[0] - ra[0]);
                for j in 1..ra.len() {
                    prop_assert!((ra[j] - rb[j]).abs() < 1e-5,
                        "frame {t} coeff {j} moved by {}", (ra[j] - rb[j]).abs());
                }
            }
            // And CMN removes the shift entirely.
            let mut a = base.values.clone();
            let mut b = gained.values.clone();
            apply_cmn(&mut a);
            apply_cmn(&mut b);
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() < 1e-5);
            }
        }
    }
}
