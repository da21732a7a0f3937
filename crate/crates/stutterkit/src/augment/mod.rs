//! SNR-controlled data augmentation.
//!
//! Four augmentations expand a clean training manifest five-fold:
//!
//! 1. **Music**: one music file looped/trimmed to the clip, mixed at
//!    SNR ~ U[5, 15] dB.
//! 2. **Noise**: an independent noise sample mixed into each successive
//!    1-second interval at SNR ~ U[0, 15] dB (per-interval clean power).
//! 3. **Babble**: 3-7 distinct speech files summed, mixed at U[13, 20] dB.
//! 4. **Reverberation**: convolution with a measured or image-source
//!    simulated room impulse response, truncated to clip length and
//!    peak-matched to the clean clip.
//!
//! Every op is a pure function of (inputs, RNG state); identical seeds give
//! byte-identical outputs, and output length always equals input length.

pub mod rir;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::{load_audio, write_wav_pcm16, Waveform};
use crate::dataset::{AugmentKind, Manifest, SegmentRecord};
use crate::error::{Error, Result};
use crate::rng::{hash_str, rng_for};

pub use rir::{default_rooms, simulate_rir, RoomConfig};

/// How many random pool picks to attempt before giving up on unreadable files.
const POOL_RETRIES: usize = 5;

/// An inclusive SNR range in dB.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnrSpec {
    pub min_db: f64,
    pub max_db: f64,
}

impl SnrSpec {
    pub fn new(min_db: f64, max_db: f64) -> Result<Self> {
        if min_db > max_db {
            return Err(Error::Config(format!(
                "SNR range is empty: min {min_db} > max {max_db}"
            )));
        }
        Ok(SnrSpec { min_db, max_db })
    }

    pub fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.min_db == self.max_db {
            self.min_db
        } else {
            rng.random_range(self.min_db..=self.max_db)
        }
    }
}

/// SNR range for music mixing (dB).
pub const MUSIC_SNR: SnrSpec = SnrSpec {
    min_db: 5.0,
    max_db: 15.0,
};
/// SNR range for interval noise (dB).
pub const NOISE_SNR: SnrSpec = SnrSpec {
    min_db: 0.0,
    max_db: 15.0,
};
/// SNR range for babble (dB).
pub const BABBLE_SNR: SnrSpec = SnrSpec {
    min_db: 13.0,
    max_db: 20.0,
};

/// Where a room impulse response comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RirSource {
    File(PathBuf),
    Simulated(RoomConfig),
}

/// Audio material the augmentations draw from.
///
/// Loaded files are cached per (path, rate) so repeated draws don't re-read
/// or re-resample; the cache is thread-safe for parallel expansion.
#[derive(Debug)]
pub struct NoisePool {
    pub music: Vec<PathBuf>,
    pub noises: Vec<PathBuf>,
    pub speech: Vec<PathBuf>,
    pub rirs: Vec<RirSource>,
    cache: Mutex<HashMap<(PathBuf, u32), Arc<Waveform>>>,
}

impl NoisePool {
    pub fn new(
        music: Vec<PathBuf>,
        noises: Vec<PathBuf>,
        speech: Vec<PathBuf>,
        rirs: Vec<RirSource>,
    ) -> Self {
        NoisePool {
            music,
            noises,
            speech,
            rirs,
            cache: Mutex::new(HashMap::new()),
        }
    }

    /// Scan `root/music`, `root/noise`, `root/speech`, and `root/rir` for
    /// WAV files (sorted by name). When `root/rir` is absent or empty, a
    /// default set of simulated rooms stands in.
    pub fn from_dir(root: &Path) -> Result<Self> {
        let scan = |sub: &str| -> Result<Vec<PathBuf>> {
            let dir = root.join(sub);
            if !dir.is_dir() {
                return Ok(Vec::new());
            }
            let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
                .map_err(|e| Error::io(&dir, e))?
                .filter_map(|entry| entry.ok().map(|e| e.path()))
                .filter(|p| {
                    p.extension()
                        .map(|e| e.eq_ignore_ascii_case("wav"))
                        .unwrap_or(false)
                })
                .collect();
            paths.sort();
            Ok(paths)
        };
        let rir_files = scan("rir")?;
        let rirs = if rir_files.is_empty() {
            default_rooms().into_iter().map(RirSource::Simulated).collect()
        } else {
            rir_files.into_iter().map(RirSource::File).collect()
        };
        Ok(NoisePool::new(
            scan("music")?,
            scan("noise")?,
            scan("speech")?,
            rirs,
        ))
    }

    /// Build from plain-text listing files, one path per line per category
    /// (blank lines and `#` comments ignored). A missing RIR listing falls
    /// back to the default simulated rooms.
    pub fn from_listings(
        music: Option<&Path>,
        noise: Option<&Path>,
        speech: Option<&Path>,
        rir: Option<&Path>,
    ) -> Result<Self> {
        let read_listing = |path: Option<&Path>| -> Result<Vec<PathBuf>> {
            let Some(path) = path else {
                return Ok(Vec::new());
            };
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            Ok(text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(PathBuf::from)
                .collect())
        };
        let rir_files = read_listing(rir)?;
        let rirs = if rir_files.is_empty() {
            default_rooms().into_iter().map(RirSource::Simulated).collect()
        } else {
            rir_files.into_iter().map(RirSource::File).collect()
        };
        Ok(NoisePool::new(
            read_listing(music)?,
            read_listing(noise)?,
            read_listing(speech)?,
            rirs,
        ))
    }

    /// Load (or fetch from cache) one pool file resampled to `rate`.
    fn load(&self, path: &Path, rate: u32) -> Result<Arc<Waveform>> {
        let key = (path.to_path_buf(), rate);
        if let Some(hit) = self.cache.lock().expect("pool cache lock").get(&key) {
            return Ok(Arc::clone(hit));
        }
        let wave = Arc::new(load_audio(path, rate)?);
        self.cache
            .lock()
            .expect("pool cache lock")
            .insert(key, Arc::clone(&wave));
        Ok(wave)
    }

    /// Randomly choose a pool entry, retrying a bounded number of times on
    /// unreadable files.
    fn choose(&self, list: &[PathBuf], rate: u32, rng: &mut ChaCha8Rng) -> Result<Arc<Waveform>> {
        if list.is_empty() {
            return Err(Error::Data("augmentation pool category is empty".into()));
        }
        let mut last_err = None;
        for _ in 0..POOL_RETRIES {
            let path = &list[rng.random_range(0..list.len())];
            match self.load(path, rate) {
                Ok(wave) => return Ok(wave),
                Err(e) => {
                    log::warn!("skipping unreadable pool file {}: {e}", path.display());
                    last_err = Some(e);
                }
            }
        }
        Err(Error::Data(format!(
            "pool exhausted after {POOL_RETRIES} attempts; last error: {}",
            last_err.expect("at least one attempt")
        )))
    }
}

/// The gain applied to an interferer so the clean/interferer power ratio
/// hits `snr_db`: `g = sqrt(P_clean / (P_interferer * 10^(snr/10)))`.
pub fn snr_gain(p_clean: f64, p_interferer: f64, snr_db: f64) -> f64 {
    (p_clean / (p_interferer * 10f64.powf(snr_db / 10.0))).sqrt()
}

/// Mix `interferer` into `clean` at exactly `snr_db` dB.
///
/// Powers are mean squares over the full buffers, which the caller has
/// already length-matched.
pub fn mix_at_snr(clean: &Waveform, interferer: &Waveform, snr_db: f64) -> Result<Waveform> {
    if clean.sample_rate != interferer.sample_rate {
        return Err(Error::Shape(format!(
            "mix_at_snr rate mismatch: clean {} vs interferer {}",
            clean.sample_rate, interferer.sample_rate
        )));
    }
    if clean.len() != interferer.len() {
        return Err(Error::Shape(format!(
            "mix_at_snr length mismatch: clean {} vs interferer {}",
            clean.len(),
            interferer.len()
        )));
    }
    let p_clean = clean.power();
    if p_clean == 0.0 {
        return Err(Error::Data(
            "mix_at_snr needs a clean signal with nonzero power".into(),
        ));
    }
    let p_int = interferer.power();
    if p_int == 0.0 {
        return Err(Error::Data("zero-power interferer".into()));
    }
    let g = snr_gain(p_clean, p_int, snr_db);
    let samples = clean
        .samples
        .iter()
        .zip(&interferer.samples)
        .map(|(c, i)| c + g * i)
        .collect();
    Ok(Waveform::new(samples, clean.sample_rate))
}

/// Cut or loop `source` to exactly `len` samples: longer sources yield a
/// random contiguous slice (one RNG draw), shorter ones repeat end-to-end.
pub fn length_match(source: &Waveform, len: usize, rng: &mut ChaCha8Rng) -> Result<Waveform> {
    if source.len() > len {
        let start = rng.random_range(0..=source.len() - len);
        Ok(Waveform::new(
            source.samples[start..start + len].to_vec(),
            source.sample_rate,
        ))
    } else {
        source.tile_to_len(len)
    }
}

/// Mix one randomly chosen music file over the whole clip at U[5, 15] dB.
pub fn music_augment(clean: &Waveform, pool: &NoisePool, rng: &mut ChaCha8Rng) -> Result<Waveform> {
    let music = pool.choose(&pool.music, clean.sample_rate, rng)?;
    let matched = length_match(&music, clean.len(), rng)?;
    let snr = MUSIC_SNR.draw(rng);
    mix_at_snr(clean, &matched, snr)
}

/// Whether interval-noise SNR references the interval's own clean power
/// (default) or the whole clip's.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSnrScope {
    PerInterval,
    PerClip,
}

/// Bookkeeping from a noise augmentation pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseStats {
    /// Number of 1-second intervals processed (= ceil(duration)).
    pub placements: usize,
    /// Intervals skipped (copied unchanged) because the clean audio there
    /// had zero power.
    pub silent_intervals: usize,
}

/// Mix an independently chosen noise sample into each successive 1-second
/// interval at U[0, 15] dB, measured on that interval's clean power.
pub fn noise_augment(clean: &Waveform, pool: &NoisePool, rng: &mut ChaCha8Rng) -> Result<Waveform> {
    noise_augment_with_stats(clean, pool, rng, NoiseSnrScope::PerInterval).map(|(w, _)| w)
}

/// [`noise_augment`] with interval statistics and an SNR-scope switch.
pub fn noise_augment_with_stats(
    clean: &Waveform,
    pool: &NoisePool,
    rng: &mut ChaCha8Rng,
    scope: NoiseSnrScope,
) -> Result<(Waveform, NoiseStats)> {
    if clean.is_empty() {
        return Err(Error::Data("cannot noise-augment an empty clip".into()));
    }
    let interval = clean.sample_rate as usize;
    let placements = clean.len().div_ceil(interval);
    let clip_power = clean.power();
    // In per-clip scope one SNR draw governs the whole clip.
    let clip_snr = match scope {
        NoiseSnrScope::PerClip => Some(NOISE_SNR.draw(rng)),
        NoiseSnrScope::PerInterval => None,
    };
    let mut out = clean.samples.clone();
    let mut silent_intervals = 0;
    for i in 0..placements {
        let lo = i * interval;
        let hi = ((i + 1) * interval).min(clean.len());
        let seg = Waveform::new(clean.samples[lo..hi].to_vec(), clean.sample_rate);
        let seg_power = seg.power();
        let p_ref = match scope {
            NoiseSnrScope::PerInterval => seg_power,
            NoiseSnrScope::PerClip => clip_power,
        };
        if seg_power == 0.0 || p_ref == 0.0 {
            silent_intervals += 1;
            continue;
        }
        let noise = pool.choose(&pool.noises, clean.sample_rate, rng)?;
        let matched = length_match(&noise, hi - lo, rng)?;
        let p_noise = matched.power();
        if p_noise == 0.0 {
            return Err(Error::Data("zero-power noise segment".into()));
        }
        let snr = clip_snr.unwrap_or_else(|| NOISE_SNR.draw(rng));
        let g = snr_gain(p_ref, p_noise, snr);
        for (slot, n) in out[lo..hi].iter_mut().zip(&matched.samples) {
            *slot += g * n;
        }
    }
    Ok((
        Waveform::new(out, clean.sample_rate),
        NoiseStats {
            placements,
            silent_intervals,
        },
    ))
}

/// Detail returned by the babble mix, used by tests to verify the contract.
#[cfg_attr(not(test), allow(dead_code))]
struct BabbleDetail {
    mixed: Waveform,
    babble: Waveform,
    snr_db: f64,
    k: usize,
    chosen: Vec<usize>,
}

fn babble_augment_detailed(
    clean: &Waveform,
    pool: &NoisePool,
    rng: &mut ChaCha8Rng,
) -> Result<BabbleDetail> {
    if pool.speech.len() < 7 {
        return Err(Error::Data(format!(
            "babble needs at least 7 speech files in the pool, found {}",
            pool.speech.len()
        )));
    }
    let k = rng.random_range(3..=7usize);
    let chosen: Vec<usize> = rand::seq::index::sample(rng, pool.speech.len(), k).into_vec();
    let mut sum = vec![0.0; clean.len()];
    for &idx in &chosen {
        let speech = pool.load(&pool.speech[idx], clean.sample_rate)?;
        let matched = length_match(&speech, clean.len(), rng)?;
        for (s, v) in sum.iter_mut().zip(&matched.samples) {
            *s += v;
        }
    }
    let babble = Waveform::new(sum, clean.sample_rate);
    if babble.power() == 0.0 {
        return Err(Error::Data("summed babble has zero power".into()));
    }
    let snr_db = BABBLE_SNR.draw(rng);
    let mixed = mix_at_snr(clean, &babble, snr_db)?;
    Ok(BabbleDetail {
        mixed,
        babble,
        snr_db,
        k,
        chosen,
    })
}

/// Sum 3-7 distinct speech files and mix the sum at U[13, 20] dB.
pub fn babble_augment(
    clean: &Waveform,
    pool: &NoisePool,
    rng: &mut ChaCha8Rng,
) -> Result<Waveform> {
    babble_augment_detailed(clean, pool, rng).map(|d| d.mixed)
}

/// Full convolution (length `x + h - 1`) via FFT.
pub fn fft_convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    if x.is_empty() || h.is_empty() {
        return Vec::new();
    }
    let out_len = x.len() + h.len() - 1;
    let size = out_len.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);

    let mut fx: Vec<Complex<f64>> = x
        .iter()
        .map(|&v| Complex::new(v, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(size)
        .collect();
    let mut fh: Vec<Complex<f64>> = h
        .iter()
        .map(|&v| Complex::new(v, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(size)
        .collect();
    fwd.process(&mut fx);
    fwd.process(&mut fh);
    for (a, b) in fx.iter_mut().zip(&fh) {
        *a *= b;
    }
    inv.process(&mut fx);
    fx[..out_len].iter().map(|c| c.re / size as f64).collect()
}

/// Convolve with a given RIR, truncate to the clip length, and peak-match
/// the result to the clean clip.
pub fn reverb_with_rir(clean: &Waveform, rir: &[f64]) -> Result<Waveform> {
    if rir.iter().all(|&a| a == 0.0) {
        return Err(Error::Data("degenerate all-zero room impulse response".into()));
    }
    let full = fft_convolve(&clean.samples, rir);
    let mut out: Vec<f64> = full[..clean.len()].to_vec();
    let clean_peak = clean.peak();
    let out_peak = out.iter().fold(0.0f64, |acc, s| acc.max(s.abs()));
    if clean_peak > 0.0 && out_peak > 0.0 {
        let scale = clean_peak / out_peak;
        for s in &mut out {
            *s *= scale;
        }
    }
    Ok(Waveform::new(out, clean.sample_rate))
}

/// Convolve the clip with a randomly chosen (measured or simulated) RIR.
pub fn reverb_augment(
    clean: &Waveform,
    pool: &NoisePool,
    rng: &mut ChaCha8Rng,
) -> Result<Waveform> {
    if pool.rirs.is_empty() {
        return Err(Error::Data(
            "reverb needs impulse responses or room configs in the pool".into(),
        ));
    }
    let source = &pool.rirs[rng.random_range(0..pool.rirs.len())];
    let rir: Vec<f64> = match source {
        RirSource::File(path) => pool.load(path, clean.sample_rate)?.samples.clone(),
        RirSource::Simulated(room) => simulate_rir(room, clean.sample_rate)?,
    };
    reverb_with_rir(clean, &rir)
}

/// Apply one augmentation kind. `Clean` is the identity.
pub fn apply_augment(
    kind: AugmentKind,
    clean: &Waveform,
    pool: &NoisePool,
    rng: &mut ChaCha8Rng,
) -> Result<Waveform> {
    match kind {
        AugmentKind::Clean => Ok(clean.clone()),
        AugmentKind::Music => music_augment(clean, pool, rng),
        AugmentKind::Noise => noise_augment(clean, pool, rng),
        AugmentKind::Babble => babble_augment(clean, pool, rng),
        AugmentKind::Reverb => reverb_augment(clean, pool, rng),
    }
}

/// All four non-identity augmentation kinds, in canonical order.
pub const ALL_AUGMENTS: [AugmentKind; 4] = [
    AugmentKind::Music,
    AugmentKind::Noise,
    AugmentKind::Babble,
    AugmentKind::Reverb,
];

fn sanitize_id(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_alphanumeric() || c == '-' || c == '_' || c == '.' {
            c
        } else {
            '-'
        })
        .collect()
}

/// Materialize augmented copies of every clean record.
///
/// For each record and each kind in `kinds`, the record's audio segment is
/// loaded at 16 kHz, augmented under an RNG derived from
/// `(base_seed, record id, kind)`, and written to `out_dir` as 16-bit PCM.
/// The returned manifest holds the original records plus one record per
/// augmentation (labels and podcast ids inherited), sorted by source id and
/// augmentation kind — `|kinds| + 1` times the input size.
pub fn expand_manifest(
    clean: &Manifest,
    pool: &NoisePool,
    base_seed: u64,
    out_dir: &Path,
    kinds: &[AugmentKind],
) -> Result<Manifest> {
    let mut kinds: Vec<AugmentKind> = kinds
        .iter()
        .copied()
        .filter(|k| *k != AugmentKind::Clean)
        .collect();
    kinds.sort();
    kinds.dedup();

    if !clean.is_empty() {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    }
    let mut sorted: Vec<&SegmentRecord> = clean.records.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));

    let expanded: Vec<Vec<(String, AugmentKind, SegmentRecord)>> = sorted
        .par_iter()
        .map(|record| -> Result<Vec<(String, AugmentKind, SegmentRecord)>> {
            let mut out = vec![(record.id.clone(), AugmentKind::Clean, (*record).clone())];
            if kinds.is_empty() {
                return Ok(out);
            }
            let full = load_audio(&record.audio_path, 16_000)?;
            let segment = full.slice_seconds(record.offset_s, record.duration_s);
            if segment.is_empty() {
                return Err(Error::Data(format!(
                    "record '{}' selects an empty audio segment",
                    record.id
                )));
            }
            for &kind in &kinds {
                let stream = hash_str(&format!("{}|{}", record.id, kind.name()));
                let mut rng = rng_for(base_seed, "augment", stream);
                let augmented = apply_augment(kind, &segment, pool, &mut rng)?;
                debug_assert_eq!(augmented.len(), segment.len());
                let aug_id = format!("{}__{}", record.id, kind.name());
                let path = out_dir.join(format!("{}.wav", sanitize_id(&aug_id)));
                write_wav_pcm16(&path, &augmented)?;
                out.push((
                    record.id.clone(),
                    kind,
                    SegmentRecord {
                        id: aug_id,
                        audio_path: path,
                        offset_s: 0.0,
                        duration_s: augmented.duration_s(),
                        label: record.label,
                        podcast_id: record.podcast_id.clone(),
                        augmentation: kind,
                    },
                ));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let mut records: Vec<(String, AugmentKind, SegmentRecord)> =
        expanded.into_iter().flatten().collect();
    records.sort_by(|a, b| (&a.0, a.1).cmp(&(&b.0, b.1)));
    Ok(Manifest {
        records: records.into_iter().map(|(_, _, r)| r).collect(),
        source_name: format!("{}-augmented", clean.source_name),
        n_excluded: 0,
    })
}
