//! Segment manifests, label taxonomy, grouped splits, and class weights.
//!
//! The dataset unit is a labeled clip ("segment") belonging to a podcast.
//! Splits are built over podcast identities, never individual records, so a
//! speaker/show can never leak across train/valid/test within a fold.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of target classes.
pub const N_CLASSES: usize = 5;

/// The five-class stuttering taxonomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Repetition,
    Prolongation,
    Block,
    Interjection,
    Fluent,
}

impl Label {
    pub const ALL: [Label; N_CLASSES] = [
        Label::Repetition,
        Label::Prolongation,
        Label::Block,
        Label::Interjection,
        Label::Fluent,
    ];

    pub fn index(self) -> usize {
        match self {
            Label::Repetition => 0,
            Label::Prolongation => 1,
            Label::Block => 2,
            Label::Interjection => 3,
            Label::Fluent => 4,
        }
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Label::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Repetition => "Repetition",
            Label::Prolongation => "Prolongation",
            Label::Block => "Block",
            Label::Interjection => "Interjection",
            Label::Fluent => "Fluent",
        }
    }

    /// Parse a manifest label. Returns `None` for out-of-taxonomy labels
    /// (e.g. "NoSpeech", "Music"), which callers drop and count.
    pub fn parse(s: &str) -> Option<Label> {
        match s.trim() {
            "Repetition" => Some(Label::Repetition),
            "Prolongation" => Some(Label::Prolongation),
            "Block" => Some(Label::Block),
            "Interjection" => Some(Label::Interjection),
            "Fluent" => Some(Label::Fluent),
            _ => None,
        }
    }
}

/// Binary pseudo-label for the FluentBranch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PseudoLabel {
    Fluent,
    Disfluent,
}

impl PseudoLabel {
    pub fn index(self) -> usize {
        match self {
            PseudoLabel::Fluent => 0,
            PseudoLabel::Disfluent => 1,
        }
    }
}

/// Fluent maps to Fluent; every disfluency class maps to Disfluent.
pub fn fluent_pseudo_label(label: Label) -> PseudoLabel {
    match label {
        Label::Fluent => PseudoLabel::Fluent,
        _ => PseudoLabel::Disfluent,
    }
}

/// Provenance tag for augmented copies of a clean record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentKind {
    Clean,
    Music,
    Noise,
    Babble,
    Reverb,
}

impl AugmentKind {
    pub fn name(self) -> &'static str {
        match self {
            AugmentKind::Clean => "clean",
            AugmentKind::Music => "music",
            AugmentKind::Noise => "noise",
            AugmentKind::Babble => "babble",
            AugmentKind::Reverb => "reverb",
        }
    }

    pub fn parse(s: &str) -> Option<AugmentKind> {
        match s.trim() {
            "clean" => Some(AugmentKind::Clean),
            "music" => Some(AugmentKind::Music),
            "noise" => Some(AugmentKind::Noise),
            "babble" => Some(AugmentKind::Babble),
            "reverb" => Some(AugmentKind::Reverb),
            _ => None,
        }
    }
}

/// One labeled clip: a time span within an audio file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub id: String,
    pub audio_path: PathBuf,
    pub offset_s: f64,
    pub duration_s: f64,
    pub label: Label,
    pub podcast_id: String,
    pub augmentation: AugmentKind,
}

/// An ordered collection of segment records.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub records: Vec<SegmentRecord>,
    pub source_name: String,
    /// Rows dropped at parse time because their label was outside the
    /// 5-class taxonomy.
    pub n_excluded: usize,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Distinct podcast ids, sorted.
    pub fn podcast_ids(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.records.iter().map(|r| r.podcast_id.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    /// Records per label.
    pub fn label_counts(&self) -> [usize; N_CLASSES] {
        let mut counts = [0usize; N_CLASSES];
        for r in &self.records {
            counts[r.label.index()] += 1;
        }
        counts
    }

    /// Records whose podcast id belongs to `podcasts`, preserving order.
    pub fn subset_by_podcasts(&self, podcasts: &BTreeSet<String>) -> Manifest {
        Manifest {
            records: self
                .records
                .iter()
                .filter(|r| podcasts.contains(&r.podcast_id))
                .cloned()
                .collect(),
            source_name: self.source_name.clone(),
            n_excluded: 0,
        }
    }

    /// Uniqueness and basic field validation.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Data(format!("duplicate record id '{}'", r.id)));
            }
            if !(r.duration_s > 0.0) {
                return Err(Error::Data(format!(
                    "record '{}' has non-positive duration {}",
                    r.id, r.duration_s
                )));
            }
            if r.offset_s < 0.0 {
                return Err(Error::Data(format!(
                    "record '{}' has negative offset {}",
                    r.id, r.offset_s
                )));
            }
        }
        Ok(())
    }
}

const HEADER_6: [&str; 6] = ["id", "audio_path", "offset_s", "duration_s", "label", "podcast_id"];

/// Parse a CSV manifest.
///
/// Schema: `id,audio_path,offset_s,duration_s,label,podcast_id` with an
/// optional seventh `augmentation` column (defaults to `clean`). Rows whose
/// label falls outside the 5-class taxonomy are dropped and counted in
/// [`Manifest::n_excluded`].
pub fn parse_manifest(path: &Path) -> Result<Manifest> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("cannot read manifest {}: {e}", path.display())))?;

    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("bad manifest header in {}: {e}", path.display())))?
        .clone();
    let has_augmentation = match headers.len() {
        6 => false,
        7 if headers.get(6) == Some("augmentation") => true,
        _ => {
            return Err(Error::Data(format!(
                "manifest {} has unexpected header '{}'",
                path.display(),
                headers.iter().collect::<Vec<_>>().join(",")
            )))
        }
    };
    for (got, want) in headers.iter().zip(HEADER_6.iter()) {
        if got != *want {
            return Err(Error::Data(format!(
                "manifest {} header column '{got}' should be '{want}'",
                path.display()
            )));
        }
    }

    let mut manifest = Manifest {
        source_name: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        ..Manifest::default()
    };
    for (i, row) in reader.records().enumerate() {
        let line = i + 2; // 1-based, after the header
        let row =
            row.map_err(|e| Error::Data(format!("manifest line {line}: malformed row: {e}")))?;
        let expected = if has_augmentation { 7 } else { 6 };
        if row.len() != expected {
            return Err(Error::Data(format!(
                "manifest line {line}: expected {expected} fields, found {}",
                row.len()
            )));
        }
        let label = match Label::parse(&row[4]) {
            Some(l) => l,
            None => {
                manifest.n_excluded += 1;
                continue;
            }
        };
        let offset_s: f64 = row[2]
            .parse()
            .map_err(|e| Error::Data(format!("manifest line {line}: bad offset_s: {e}")))?;
        let duration_s: f64 = row[3]
            .parse()
            .map_err(|e| Error::Data(format!("manifest line {line}: bad duration_s: {e}")))?;
        let augmentation = if has_augmentation {
            AugmentKind::parse(&row[6]).ok_or_else(|| {
                Error::Data(format!(
                    "manifest line {line}: unknown augmentation '{}'",
                    &row[6]
                ))
            })?
        } else {
            AugmentKind::Clean
        };
        manifest.records.push(SegmentRecord {
            id: row[0].to_string(),
            audio_path: PathBuf::from(&row[1]),
            offset_s,
            duration_s,
            label,
            podcast_id: row[5].to_string(),
            augmentation,
        });
    }
    manifest.validate()?;
    if manifest.is_empty() {
        log::warn!("manifest {} contains no usable records", path.display());
    }
    Ok(manifest)
}

/// Write a manifest with the 7-column schema (augmentation always present).
pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::Data(format!("cannot write manifest {}: {e}", path.display())))?;
    writer
        .write_record([
            "id",
            "audio_path",
            "offset_s",
            "duration_s",
            "label",
            "podcast_id",
            "augmentation",
        ])
        .map_err(|e| Error::Data(format!("manifest write failed: {e}")))?;
    for r in &manifest.records {
        writer
            .write_record([
                r.id.as_str(),
                &r.audio_path.to_string_lossy(),
                &format!("{}", r.offset_s),
                &format!("{}", r.duration_s),
                r.label.name(),
                r.podcast_id.as_str(),
                r.augmentation.name(),
            ])
            .map_err(|e| Error::Data(format!("manifest write failed: {e}")))?;
    }
    writer
        .flush()
        .map_err(|e| Error::io(path, e))
}

/// Podcast-id sets for one cross-validation fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSets {
    pub train: BTreeSet<String>,
    pub valid: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

/// A full k-fold rotation over podcasts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub folds: Vec<FoldSets>,
}

impl SplitPlan {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("cannot serialize split plan: {e}")))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<SplitPlan> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("bad split plan {}: {e}", path.display())))
    }
}

/// Split ratios by podcast count. Test size is governed by the fold
/// rotation; `valid` picks how many podcasts are held out for validation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.8,
            valid: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        if self.train <= 0.0 || self.valid <= 0.0 || self.test <= 0.0 {
            return Err(Error::Config("split ratios must all be positive".into()));
        }
        if ((self.train + self.valid + self.test) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratios must sum to 1, got {}",
                self.train + self.valid + self.test
            )));
        }
        Ok(())
    }
}

/// Build an `n_folds` rotation over the manifest's podcasts.
///
/// Podcasts are shuffled once under the caller's RNG and cut into `n_folds`
/// near-equal chunks. Fold `i` tests chunk `i`; the next `round(valid * P)`
/// podcasts (cyclically) validate; the rest train. Whole podcasts move
/// between sets — records never split across sets.
pub fn make_split(
    m: &Manifest,
    ratios: SplitRatios,
    n_folds: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SplitPlan> {
    ratios.validate()?;
    if n_folds < 2 {
        return Err(Error::Config(format!(
            "need at least 2 folds for a rotation, got {n_folds}"
        )));
    }
    let mut podcasts = m.podcast_ids();
    let p = podcasts.len();
    if p < n_folds {
        return Err(Error::Data(format!(
            "infeasible split: {p} podcasts cannot fill {n_folds} folds"
        )));
    }
    podcasts.shuffle(rng);

    let n_valid = ((ratios.valid * p as f64).round() as usize).max(1);
    // Chunk boundaries: chunk i covers [i*p/k, (i+1)*p/k).
    let bounds: Vec<usize> = (0..=n_folds).map(|i| i * p / n_folds).collect();
    let max_chunk = (0..n_folds)
        .map(|i| bounds[i + 1] - bounds[i])
        .max()
        .unwrap_or(0);
    if p < max_chunk + n_valid + 1 {
        return Err(Error::Data(format!(
            "infeasible split: {p} podcasts leave no training podcasts after \
             {max_chunk} test and {n_valid} validation"
        )));
    }

    let mut folds = Vec::with_capacity(n_folds);
    for i in 0..n_folds {
        let test: BTreeSet<String> = podcasts[bounds[i]..bounds[i + 1]].to_vec().into_iter().collect();
        // Walk the shuffled ring starting just past the test chunk.
        let mut valid = BTreeSet::new();
        let mut train = BTreeSet::new();
        for step in 0..p {
            let idx = (bounds[i + 1] + step) % p;
            let pod = &podcasts[idx];
            if test.contains(pod) {
                continue;
            }
            if valid.len() < n_valid {
                valid.insert(pod.clone());
            } else {
                train.insert(pod.clone());
            }
        }
        folds.push(FoldSets { train, valid, test });
    }
    Ok(SplitPlan { folds })
}

/// Inverse-frequency class weights `w_i = N / (C * N_i)` with `C = 5`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub w: [f64; N_CLASSES],
}

impl ClassWeights {
    pub fn uniform() -> Self {
        ClassWeights { w: [1.0; N_CLASSES] }
    }

    pub fn get(&self, label: Label) -> f64 {
        self.w[label.index()]
    }
}

/// Compute class weights from a manifest's label counts.
pub fn class_weights(m: &Manifest) -> Result<ClassWeights> {
    let counts = m.label_counts();
    weights_from_counts(&counts)
}

/// Weight formula on explicit counts; errors if any class is empty.
pub fn weights_from_counts(counts: &[usize; N_CLASSES]) -> Result<ClassWeights> {
    let n: usize = counts.iter().sum();
    let mut w = [0.0; N_CLASSES];
    for (i, &c) in counts.iter().enumerate() {
        if c == 0 {
            return Err(Error::Data(format!(
                "class {} has zero samples; weighted loss is undefined",
                Label::from_index(i).expect("index < N_CLASSES").name()
            )));
        }
        w[i] = n as f64 / (N_CLASSES as f64 * c as f64);
    }
    Ok(ClassWeights { w })
}

/// Binary weights for the FluentBranch from pseudo-label counts:
/// `w_i = N / (2 * N_i)` over {Fluent, Disfluent}.
pub fn pseudo_class_weights(m: &Manifest) -> Result<[f64; 2]> {
    let mut counts = [0usize; 2];
    for r in &m.records {
        counts[fluent_pseudo_label(r.label).index()] += 1;
    }
    let n: usize = counts.iter().sum();
    let mut w = [0.0; 2];
    for (i, &c) in counts.iter().enumerate() {
        if c == 0 {
            let side = if i == 0 { "Fluent" } else { "Disfluent" };
            return Err(Error::Data(format!(
                "pseudo-class {side} has zero samples; weighted loss is undefined"
            )));
        }
        w[i] = n as f64 / (2.0 * c as f64);
    }
    Ok(w)
}

/// Label counts keyed by name, for reports.
pub fn label_count_map(m: &Manifest) -> BTreeMap<String, usize> {
    let counts = m.label_counts();
    Label::ALL
        .iter()
        .map(|l| (l.name().to_string(), counts[l.index()]))
        .collect()
}
