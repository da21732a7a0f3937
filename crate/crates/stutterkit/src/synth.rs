//! Deterministic synthetic toy corpus: five tone-based classes whose
//! signatures mirror the label taxonomy's structure (bursts, sustains,
//! leading silence, inserted chirps, smooth sequences).
//!
//! The corpus exists to make desk-scale end-to-end runs meaningful: the
//! classes are separable by construction, so a model that fails to learn
//! them is broken. It validates mechanisms, never clinical claims.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{write_wav_pcm16, Waveform};
use crate::dataset::{write_manifest, AugmentKind, Label, Manifest, SegmentRecord};
use crate::rng::rng_for;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_per_class: usize,
    pub clip_s: f64,
    pub rate: u32,
    pub n_podcasts: usize,
    pub seed: u64,
    /// Per-label count multipliers (default 1): `{"Fluent": 4}` produces a
    /// majority-fluent corpus shaped like real distributions.
    pub class_imbalance: BTreeMap<Label, u32>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_per_class: 40,
            clip_s: 3.0,
            rate: 16_000,
            n_podcasts: 10,
            seed: 7,
            class_imbalance: BTreeMap::new(),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_per_class == 0 {
            return Err(Error::Config("n_per_class must be at least 1".into()));
        }
        if self.n_podcasts == 0 {
            return Err(Error::Config("n_podcasts must be at least 1".into()));
        }
        if self.rate == 0 {
            return Err(Error::Config("rate must be positive".into()));
        }
        // Class signatures need room: a block's 0.8 s leading silence, a
        // prolongation's 1.5 s sustain plus onset/tail.
        if self.clip_s < 3.0 {
            return Err(Error::Config(format!(
                "clip_s {} too short for the class signatures (minimum 3.0)",
                self.clip_s
            )));
        }
        for (label, mult) in &self.class_imbalance {
            if *mult == 0 {
                return Err(Error::Config(format!(
                    "class_imbalance multiplier for {} must be at least 1",
                    label.name()
                )));
            }
        }
        Ok(())
    }

    pub fn count_for(&self, label: Label) -> usize {
        let mult = self.class_imbalance.get(&label).copied().unwrap_or(1);
        self.n_per_class * mult as usize
    }

    pub fn total_records(&self) -> usize {
        Label::ALL.iter().map(|l| self.count_for(*l)).sum()
    }
}

fn file_prefix(label: Label) -> &'static str {
    match label {
        Label::Repetition => "rep",
        Label::Prolongation => "pro",
        Label::Block => "blk",
        Label::Interjection => "inj",
        Label::Fluent => "flu",
    }
}

/// Adds a sine tone over `[start_s, start_s + dur_s)` with 10 ms raised-
/// cosine on/off ramps; anything past the buffer end is dropped.
fn add_tone(buf: &mut [f64], rate: u32, start_s: f64, dur_s: f64, freq: f64, amp: f64) {
    let s0 = (start_s * rate as f64).round() as usize;
    let s1 = ((start_s + dur_s) * rate as f64).round() as usize;
    let s1 = s1.min(buf.len());
    if s0 >= s1 {
        return;
    }
    let n = s1 - s0;
    let ramp = ((0.010 * rate as f64).round() as usize).max(1).min(n / 2);
    for i in 0..n {
        let env = if i < ramp {
            0.5 * (1.0 - (std::f64::consts::PI * i as f64 / ramp as f64).cos())
        } else if i >= n - ramp {
            let j = n - 1 - i;
            0.5 * (1.0 - (std::f64::consts::PI * j as f64 / ramp as f64).cos())
        } else {
            1.0
        };
        let t = i as f64 / rate as f64;
        buf[s0 + i] += amp * env * (2.0 * std::f64::consts::PI * freq * t).sin();
    }
}

/// Synthesizes one clip. Layout margins are chosen so hand-crafted features
/// separate the classes: only Block has ≥ 0.8 s leading silence (others
/// ≤ 0.3 s), and only Prolongation has a contiguous tonal run ≥ 1.5 s
/// (others ≤ 0.5 s).
fn synth_clip(label: Label, spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let rate = spec.rate;
    let n = (spec.clip_s * rate as f64).round() as usize;
    let mut buf = vec![0.0; n];
    let f0 = rng.random_range(220.0..660.0);
    let amp = rng.random_range(0.18..0.30);

    match label {
        Label::Repetition => {
            // 2-4 identical bursts separated by gaps.
            let lead = rng.random_range(0.05..0.15);
            let bursts = rng.random_range(2..=4usize);
            let dur = rng.random_range(0.25..0.40);
            let mut t = lead;
            for k in 0..bursts {
                add_tone(&mut buf, rate, t, dur, f0, amp);
                t += dur;
                if k + 1 < bursts {
                    t += rng.random_range(0.15..0.30);
                }
            }
        }
        Label::Prolongation => {
            // One sustained tone, well past the 1.5 s threshold.
            let lead = rng.random_range(0.05..0.25);
            let max_sustain = (spec.clip_s - lead - 0.05).min(2.6);
            let sustain = rng.random_range(1.7..max_sustain.max(1.7001));
            add_tone(&mut buf, rate, lead, sustain, f0, amp);
        }
        Label::Block => {
            // Long leading silence, then short bursts.
            let lead = rng.random_range(0.9..1.4);
            let bursts = rng.random_range(2..=3usize);
            let mut t = lead;
            for k in 0..bursts {
                let dur = rng.random_range(0.20..0.35);
                add_tone(&mut buf, rate, t, dur, f0, amp);
                t += dur;
                if k + 1 < bursts {
                    t += rng.random_range(0.10..0.20);
                }
            }
        }
        Label::Interjection => {
            // Tone run, a distinct two-tone chirp, tone run.
            let mut t = rng.random_range(0.03..0.10);
            for _ in 0..rng.random_range(1..=2usize) {
                let dur = rng.random_range(0.25..0.40);
                let f = f0 * 2f64.powf(rng.random_range(-0.2..0.2));
                add_tone(&mut buf, rate, t, dur, f, amp);
                t += dur + rng.random_range(0.06..0.09);
            }
            // The chirp alternates two fixed high tones.
            for k in 0..4 {
                let f = if k % 2 == 0 { 1200.0 } else { 1600.0 };
                add_tone(&mut buf, rate, t, 0.08, f, amp);
                t += 0.08;
            }
            t += rng.random_range(0.06..0.09);
            for _ in 0..rng.random_range(1..=2usize) {
                let dur = rng.random_range(0.25..0.40);
                let f = f0 * 2f64.powf(rng.random_range(-0.2..0.2));
                add_tone(&mut buf, rate, t, dur, f, amp);
                t += dur + rng.random_range(0.06..0.09);
            }
        }
        Label::Fluent => {
            // A smooth sequence of short notes with small gaps.
            let mut t = rng.random_range(0.03..0.10);
            loop {
                let dur = rng.random_range(0.20..0.40);
                if t + dur > spec.clip_s - 0.05 {
                    break;
                }
                let f = f0 * 2f64.powf(rng.random_range(-0.2..0.2));
                add_tone(&mut buf, rate, t, dur, f, amp);
                t += dur + rng.random_range(0.05..0.09);
            }
        }
    }
    buf
}

/// Generates the corpus under `out_dir`: one WAV per record plus
/// `manifest.csv`. Fully deterministic in `spec.seed` — per-clip RNG streams
/// make the output independent of write order and parallelism.
pub fn generate(spec: &SynthSpec, out_dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    // Interleaved schedule (one of each class per round, classes with
    // higher counts continue in later rounds). Podcasts are striped: each
    // class fills consecutive podcasts starting where the previous class
    // stopped, so both per-class and total podcast loads stay maximally
    // even no matter how the counts divide.
    let counts: Vec<usize> = Label::ALL.iter().map(|l| spec.count_for(*l)).collect();
    let max_count = counts.iter().copied().max().unwrap_or(0);
    let mut schedule: Vec<(Label, usize)> = Vec::with_capacity(spec.total_records());
    for round in 0..max_count {
        for (li, label) in Label::ALL.iter().enumerate() {
            if round < counts[li] {
                schedule.push((*label, round));
            }
        }
    }
    let mut class_starts = [0usize; Label::ALL.len()];
    let mut running = 0usize;
    for (li, &count) in counts.iter().enumerate() {
        class_starts[li] = running % spec.n_podcasts;
        running += count;
    }

    let records: Result<Vec<SegmentRecord>> = schedule
        .par_iter()
        .map(|(label, k)| {
            let mut rng = rng_for(
                spec.seed,
                &format!("synth-{}", file_prefix(*label)),
                *k as u64,
            );
            let samples = synth_clip(*label, spec, &mut rng);
            let id = format!("{}_{:04}", file_prefix(*label), k);
            let path = out_dir.join(format!("{id}.wav"));
            write_wav_pcm16(
                &path,
                &Waveform {
                    samples,
                    sample_rate: spec.rate,
                },
            )?;
            Ok(SegmentRecord {
                id,
                audio_path: path,
                offset_s: 0.0,
                duration_s: spec.clip_s,
                label: *label,
                podcast_id: format!(
                    "pod{:02}",
                    (class_starts[label.index()] + k) % spec.n_podcasts
                ),
                augmentation: AugmentKind::Clean,
            })
        })
        .collect();

    let manifest = Manifest {
        records: records?,
        source_name: "synthetic".to_string(),
        n_excluded: 0,
    };
    write_manifest(&out_dir.join("manifest.csv"), &manifest)?;
    Ok(manifest)
}
