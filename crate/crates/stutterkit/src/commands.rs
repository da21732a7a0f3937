//! Command-line entry points: seven subcommands covering corpus synthesis,
//! augmentation, feature extraction, split planning, training, evaluation,
//! and report inspection.
//!
//! Every command resolves its settings config-file-first (`--config`, with
//! flags overriding single fields and `SK_SEED` overriding the seeds),
//! writes machine-readable artifacts in the formats defined by the library
//! modules, and is idempotent for identical flags and seed apart from
//! wall-clock fields in logs.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 runtime
//! incompatibility (missing files, bad data, incompatible checkpoint),
//! 4 numeric failure (divergence).

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use crate::audio::load_audio;
use crate::augment::{expand_manifest, NoisePool, ALL_AUGMENTS};
use crate::config::{config_hash, write_resolved_config, RunConfigFile};
use crate::dataset::{
    make_split, parse_manifest, write_manifest, AugmentKind, Label, SplitRatios,
};
use crate::error::{Error, Result};
use crate::features::{write_skft, MfccExtractor};
use crate::metrics::RunReport;
use crate::model::checkpoint::Checkpoint;
use crate::model::VariantKind;
use crate::rng::rng_for;
use crate::synth;
use crate::train::{
    evaluate_model, run_cv, run_one_fold, write_epoch_log, CvOutcome, FeatureStore,
    FreezeWorkflow, LossMode,
};

/// Name of the manifest file written into corpus directories.
const MANIFEST_FILE: &str = "manifest.csv";

#[derive(Debug, Parser)]
#[command(
    name = "stutterkit",
    version,
    about = "Training and evaluation toolkit for multi-class stuttering event detection"
)]
pub struct Cli {
    /// Run configuration file (JSON); flags override individual fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Worker threads for fold- and record-level parallelism.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic tone corpus and its manifest.
    Synth(SynthArgs),
    /// Expand a clean manifest with music/noise/babble/reverb copies.
    Augment(AugmentArgs),
    /// Extract MFCC features for every manifest record.
    Features(FeaturesArgs),
    /// Build a podcast-grouped cross-validation split plan.
    Split(SplitArgs),
    /// Train with k-fold cross-validation and write checkpoints + reports.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a test manifest.
    Eval(EvalArgs),
    /// Pretty-print one or more run reports (and their average).
    Report(ReportArgs),
}

#[derive(Debug, Args, Default)]
pub struct SynthArgs {
    /// Output directory for WAV clips and the manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Clips per class before imbalance multipliers.
    #[arg(long)]
    pub n_per_class: Option<usize>,
    /// Clip duration in seconds.
    #[arg(long)]
    pub clip_s: Option<f64>,
    /// Number of synthetic podcasts clips are spread over.
    #[arg(long)]
    pub n_podcasts: Option<usize>,
    /// Corpus seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Per-class count multiplier, e.g. `--imbalance Fluent=4` (repeatable).
    #[arg(long)]
    pub imbalance: Vec<String>,
}

#[derive(Debug, Args, Default)]
pub struct AugmentArgs {
    /// Clean input manifest (falls back to the config's `manifest`).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Noise-pool root with music/, noise/, speech/, and optional rir/
    /// subdirectories (falls back to the config's `pool_dir`).
    #[arg(long)]
    pub pool_dir: Option<PathBuf>,
    /// Output directory for augmented WAVs and the expanded manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Augmentation seed (defaults to the training seed).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated subset of music,noise,babble,reverb (default: all).
    #[arg(long)]
    pub types: Option<String>,
}

#[derive(Debug, Args, Default)]
pub struct FeaturesArgs {
    /// Input manifest (falls back to the config's `manifest`).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Directory receiving one `.skft` file per record.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Default)]
pub struct SplitArgs {
    /// Input manifest (falls back to the config's `manifest`).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Number of folds (falls back to the config's `n_folds`).
    #[arg(long)]
    pub folds: Option<usize>,
    /// Split seed (defaults to the training seed).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output path for the split-plan JSON.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    /// Single-branch StutterNet (one 5-class head).
    Single,
    /// Multi-branch: shared encoder, fluent + disfluent heads.
    Mb,
    /// Multi-contextual: two encoders (contexts 5 and 9), both heads.
    Mc,
}

impl From<VariantArg> for VariantKind {
    fn from(v: VariantArg) -> VariantKind {
        match v {
            VariantArg::Single => VariantKind::SingleBranch,
            VariantArg::Mb => VariantKind::MultiBranch,
            VariantArg::Mc => VariantKind::MultiContext,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Ce,
    Wce,
}

impl From<LossArg> for LossMode {
    fn from(l: LossArg) -> LossMode {
        match l {
            LossArg::Ce => LossMode::Ce,
            LossArg::Wce => LossMode::Wce,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WorkflowArg {
    /// Train the full network from scratch.
    None,
    /// Pretrain, then freeze the encoder and tune both heads.
    EncFrz,
    /// Freeze encoder + disfluent head, train a fresh fluent head.
    EncDisfFrz,
    /// Pretrain via the fluent role, freeze encoder + fluent head.
    EncFluentFrz,
}

impl From<WorkflowArg> for FreezeWorkflow {
    fn from(w: WorkflowArg) -> FreezeWorkflow {
        match w {
            WorkflowArg::None => FreezeWorkflow::None,
            WorkflowArg::EncFrz => FreezeWorkflow::EncFrz,
            WorkflowArg::EncDisfFrz => FreezeWorkflow::EncDisfFrz,
            WorkflowArg::EncFluentFrz => FreezeWorkflow::EncFluentFrz,
        }
    }
}

#[derive(Debug, Args, Default)]
pub struct TrainArgs {
    /// Input manifest (falls back to the config's `manifest`).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Output directory (falls back to the config's `out_dir`).
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Model variant.
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    /// Loss mode.
    #[arg(long, value_enum)]
    pub loss: Option<LossArg>,
    /// Pretrain-then-freeze workflow.
    #[arg(long, value_enum)]
    pub workflow: Option<WorkflowArg>,
    /// Number of cross-validation folds.
    #[arg(long)]
    pub folds: Option<usize>,
    /// Train a single fold index instead of the full rotation.
    #[arg(long)]
    pub fold: Option<usize>,
    /// Training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Adam learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Mini-batch size.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Epoch cap.
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Early-stopping patience.
    #[arg(long)]
    pub patience: Option<usize>,
    /// Disfluent-head width: 5 (default) or 4 (disfluent-only training).
    #[arg(long)]
    pub disfluent_classes: Option<usize>,
}

#[derive(Debug, Args, Default)]
pub struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Manifest to evaluate on.
    #[arg(long)]
    pub test_manifest: PathBuf,
    /// Manifest the checkpoint was trained on; recorded for cross-corpora
    /// provenance in the printed header.
    #[arg(long)]
    pub train_manifest: Option<PathBuf>,
    /// Optional path for the report JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Fold id recorded in the report.
    #[arg(long)]
    pub fold: Option<usize>,
}

#[derive(Debug, Args, Default)]
pub struct ReportArgs {
    /// Report JSON files to print; with several, their average is appended.
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
}

/// Dispatches a parsed command line, mapping errors to exit codes.
pub fn run(cli: Cli) -> i32 {
    if let Some(jobs) = cli.jobs {
        // Fails harmlessly if a global pool already exists (e.g. in tests).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }
    let config = cli.config.as_deref();
    let result = match &cli.command {
        Command::Synth(args) => cmd_synth(config, args),
        Command::Augment(args) => cmd_augment(config, args),
        Command::Features(args) => cmd_features(config, args),
        Command::Split(args) => cmd_split(config, args),
        Command::Train(args) => cmd_train(config, args),
        Command::Eval(args) => cmd_eval(config, args),
        Command::Report(args) => cmd_report(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Loads the run config (or defaults) and applies the `SK_SEED` override.
/// Flag overrides are applied afterwards by each command, so precedence is
/// flag > environment > file > default.
fn load_run_config(path: Option<&Path>) -> Result<RunConfigFile> {
    let mut rc = match path {
        Some(p) => RunConfigFile::load(p)?,
        None => RunConfigFile::default(),
    };
    rc.apply_env_seed()?;
    Ok(rc)
}

fn parse_label(name: &str) -> Result<Label> {
    Label::ALL
        .iter()
        .copied()
        .find(|l| l.name().eq_ignore_ascii_case(name.trim()))
        .ok_or_else(|| {
            Error::Config(format!(
                "unknown label {name:?}; expected one of Repetition, Prolongation, Block, Interjection, Fluent"
            ))
        })
}

/// Generate the synthetic corpus.
pub fn cmd_synth(config: Option<&Path>, args: &SynthArgs) -> Result<()> {
    let rc = load_run_config(config)?;
    let mut spec = rc.synth;
    if let Some(n) = args.n_per_class {
        spec.n_per_class = n;
    }
    if let Some(s) = args.clip_s {
        spec.clip_s = s;
    }
    if let Some(p) = args.n_podcasts {
        spec.n_podcasts = p;
    }
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    for pair in &args.imbalance {
        let (name, mult) = pair.split_once('=').ok_or_else(|| {
            Error::Config(format!("bad --imbalance {pair:?}; expected LABEL=MULTIPLIER"))
        })?;
        let mult: u32 = mult.trim().parse().map_err(|_| {
            Error::Config(format!("bad --imbalance multiplier in {pair:?}"))
        })?;
        spec.class_imbalance.insert(parse_label(name)?, mult);
    }
    spec.validate()?;
    let manifest = synth::generate(&spec, &args.out)?;
    println!(
        "wrote {} clips across {} podcasts under {}",
        manifest.records.len(),
        manifest.podcast_ids().len(),
        args.out.display()
    );
    println!("{}", args.out.join(MANIFEST_FILE).display());
    Ok(())
}

/// Expand a clean manifest with augmented copies.
pub fn cmd_augment(config: Option<&Path>, args: &AugmentArgs) -> Result<()> {
    let rc = load_run_config(config)?;
    let manifest_path = args.manifest.clone().or(rc.manifest).ok_or_else(|| {
        Error::Config("no input manifest: pass --manifest or set `manifest` in the config".into())
    })?;
    let pool_dir = args.pool_dir.clone().or(rc.pool_dir).ok_or_else(|| {
        Error::Config("no noise pool: pass --pool-dir or set `pool_dir` in the config".into())
    })?;
    if !pool_dir.is_dir() {
        return Err(Error::Config(format!(
            "noise pool directory {} is missing",
            pool_dir.display()
        )));
    }
    let kinds: Vec<AugmentKind> = match &args.types {
        None => ALL_AUGMENTS.to_vec(),
        Some(list) => list
            .split(',')
            .map(|tok| match AugmentKind::parse(tok) {
                Some(AugmentKind::Clean) => Err(Error::Config(
                    "clean copies are always kept; list only music,noise,babble,reverb".into(),
                )),
                Some(kind) => Ok(kind),
                None => Err(Error::Config(format!("unknown augmentation type {tok:?}"))),
            })
            .collect::<Result<_>>()?,
    };
    let pool = NoisePool::from_dir(&pool_dir)?;
    for kind in &kinds {
        let (n, sub) = match kind {
            AugmentKind::Music => (pool.music.len(), "music"),
            AugmentKind::Noise => (pool.noises.len(), "noise"),
            AugmentKind::Babble => (pool.speech.len(), "speech"),
            AugmentKind::Reverb | AugmentKind::Clean => (pool.rirs.len(), "rir"),
        };
        if n == 0 {
            return Err(Error::Config(format!(
                "noise pool {} has no WAV files under {sub}/ (needed for {})",
                pool_dir.display(),
                kind.name()
            )));
        }
    }

    let clean = parse_manifest(&manifest_path)?;
    let seed = args.seed.unwrap_or(rc.train.seed);
    let expanded = expand_manifest(&clean, &pool, seed, &args.out, &kinds)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let out_manifest = args.out.join(MANIFEST_FILE);
    write_manifest(&out_manifest, &expanded)?;
    println!(
        "expanded {} records to {} ({}x)",
        clean.records.len(),
        expanded.records.len(),
        kinds.len() + 1
    );
    println!("{}", out_manifest.display());
    Ok(())
}

/// Extract features for every manifest record into `.skft` files.
pub fn cmd_features(config: Option<&Path>, args: &FeaturesArgs) -> Result<()> {
    let rc = load_run_config(config)?;
    let manifest_path = args.manifest.clone().or(rc.manifest).ok_or_else(|| {
        Error::Config("no input manifest: pass --manifest or set `manifest` in the config".into())
    })?;
    let cfg = rc.train.features;
    cfg.validate()?;
    let m = parse_manifest(&manifest_path)?;
    std::fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;
    let extractor = MfccExtractor::new(cfg.clone())?;
    m.records
        .par_iter()
        .map(|record| {
            let wave = load_audio(&record.audio_path, cfg.sample_rate)?
                .slice_seconds(record.offset_s, record.duration_s);
            let feats = extractor.mfcc(&wave)?;
            write_skft(&args.out_dir.join(format!("{}.skft", record.id)), &feats)
        })
        .collect::<Result<Vec<()>>>()?;
    println!(
        "wrote {} feature files ({} coefficients/frame) to {}",
        m.records.len(),
        cfg.n_mfcc,
        args.out_dir.display()
    );
    Ok(())
}

/// Build and save a cross-validation split plan.
pub fn cmd_split(config: Option<&Path>, args: &SplitArgs) -> Result<()> {
    let rc = load_run_config(config)?;
    let manifest_path = args.manifest.clone().or(rc.manifest).ok_or_else(|| {
        Error::Config("no input manifest: pass --manifest or set `manifest` in the config".into())
    })?;
    let folds = args.folds.unwrap_or(rc.n_folds);
    let seed = args.seed.unwrap_or(rc.train.seed);
    let m = parse_manifest(&manifest_path)?;
    let plan = make_split(
        &m,
        SplitRatios::default(),
        folds,
        &mut rng_for(seed, "split", 0),
    )?;
    let text = serde_json::to_string_pretty(&plan)
        .map_err(|e| Error::Data(format!("plan serialization: {e}")))?;
    std::fs::write(&args.out, text).map_err(|e| Error::io(&args.out, e))?;
    println!(
        "split {} podcasts into {} folds",
        m.podcast_ids().len(),
        plan.folds.len()
    );
    println!("{}", args.out.display());
    Ok(())
}

/// Train with cross-validation, writing checkpoints, logs, and reports.
pub fn cmd_train(config: Option<&Path>, args: &TrainArgs) -> Result<()> {
    let mut rc = load_run_config(config)?;
    if let Some(v) = args.variant {
        rc.train.model.kind = v.into();
    }
    if let Some(l) = args.loss {
        rc.train.loss_mode = l.into();
    }
    if let Some(w) = args.workflow {
        rc.train.freeze_workflow = w.into();
    }
    if let Some(k) = args.disfluent_classes {
        rc.train.model.disfluent_classes = k;
    }
    if let Some(s) = args.seed {
        rc.train.seed = s;
    }
    if let Some(lr) = args.lr {
        rc.train.lr = lr;
    }
    if let Some(b) = args.batch_size {
        rc.train.batch_size = b;
    }
    if let Some(e) = args.max_epochs {
        rc.train.max_epochs = e;
    }
    if let Some(p) = args.patience {
        rc.train.patience = p;
    }
    if let Some(f) = args.folds {
        rc.n_folds = f;
    }
    if let Some(m) = &args.manifest {
        rc.manifest = Some(m.clone());
    }
    if let Some(o) = &args.out_dir {
        rc.out_dir = o.clone();
    }
    // All configuration violations surface here, before any data is read.
    rc.validate()?;
    if let Some(k) = args.fold {
        if k >= rc.n_folds {
            return Err(Error::Config(format!(
                "--fold {k} out of range for {} folds",
                rc.n_folds
            )));
        }
    }
    let manifest_path = rc.manifest.clone().ok_or_else(|| {
        Error::Config("no input manifest: pass --manifest or set `manifest` in the config".into())
    })?;

    let m = parse_manifest(&manifest_path)?;
    let out_dir = rc.out_dir.clone();
    let hash = write_resolved_config(&out_dir, &rc)?;
    let plan = make_split(
        &m,
        SplitRatios::default(),
        rc.n_folds,
        &mut rng_for(rc.train.seed, "split", 0),
    )?;

    let outcome = match args.fold {
        Some(k) => {
            let run = run_one_fold(&rc.train, &m, &plan.folds[k], k, &hash)?;
            let average = RunReport::average(&[run.report.clone()]);
            CvOutcome {
                folds: vec![run],
                failures: Vec::new(),
                average,
                partial: false,
            }
        }
        None => run_cv(&rc.train, &m, &plan, &hash),
    };

    for run in &outcome.folds {
        let fold_dir = out_dir.join(format!("fold-{:02}", run.fold));
        std::fs::create_dir_all(&fold_dir).map_err(|e| Error::io(&fold_dir, e))?;
        run.outcome
            .checkpoint
            .save(&fold_dir.join("checkpoint.json"))?;
        write_epoch_log(&fold_dir.join("log.jsonl"), &run.outcome.log)?;
        run.report.save(&fold_dir.join("report.json"))?;
        println!(
            "fold {:2}: best epoch {:3} (val loss {:.4}), test accuracy {:.4}, macro F1 {:.4}",
            run.fold,
            run.outcome.best_epoch,
            run.outcome.best_val_loss,
            run.report.total_accuracy,
            run.report.macro_f1
        );
    }
    for failure in &outcome.failures {
        eprintln!("fold {:2}: FAILED: {}", failure.fold, failure.message);
    }
    if !outcome.failures.is_empty() {
        let text = serde_json::to_string_pretty(&outcome.failures)
            .map_err(|e| Error::Data(format!("failure serialization: {e}")))?;
        let path = out_dir.join("failures.json");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    match &outcome.average {
        Some(avg) => {
            avg.save(&out_dir.join("report-average.json"))?;
            let scope = if outcome.partial {
                format!("partial average over {} folds", outcome.folds.len())
            } else {
                format!("average over {} folds", outcome.folds.len())
            };
            println!(
                "{scope}: accuracy {:.4}, macro F1 {:.4}",
                avg.total_accuracy, avg.macro_f1
            );
            println!("{}", out_dir.display());
            Ok(())
        }
        None => Err(Error::Data(format!(
            "all {} folds failed; first failure: {}",
            outcome.failures.len(),
            outcome.failures[0].message
        ))),
    }
}

/// Evaluate a checkpoint on a manifest.
pub fn cmd_eval(config: Option<&Path>, args: &EvalArgs) -> Result<()> {
    let rc = load_run_config(config)?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let feat_cfg = rc.train.features.clone();
    feat_cfg.validate()?;
    if ckpt.model.encoder.feat_dim != feat_cfg.n_mfcc {
        return Err(Error::Data(format!(
            "incompatible checkpoint: model expects {}-dim features, extractor is configured for {}",
            ckpt.model.encoder.feat_dim, feat_cfg.n_mfcc
        )));
    }
    let mut model = ckpt.restore()?;
    let test_m = parse_manifest(&args.test_manifest)?;
    let train_name = match &args.train_manifest {
        Some(p) => Some(parse_manifest(p)?.source_name),
        None => None,
    };
    let store = FeatureStore::new(feat_cfg)?;
    let hash = config_hash(&rc)?;
    let report = evaluate_model(
        &mut model,
        &store,
        &test_m,
        &hash,
        args.fold,
        rc.train.batch_size,
    )?;
    println!(
        "checkpoint {} (epoch {})",
        args.checkpoint.display(),
        ckpt.epoch
    );
    if let Some(name) = train_name {
        println!("train corpus: {name}");
    }
    println!("test corpus:  {}", test_m.source_name);
    print_report(&report);
    if let Some(out) = &args.out {
        report.save(out)?;
        println!("{}", out.display());
    }
    Ok(())
}

/// Pretty-print reports; with several, append their average.
pub fn cmd_report(args: &ReportArgs) -> Result<()> {
    let mut reports = Vec::new();
    for path in &args.reports {
        let report = RunReport::load(path)?;
        println!("== {}", path.display());
        print_report(&report);
        reports.push(report);
    }
    if reports.len() > 1 {
        if let Some(avg) = RunReport::average(&reports) {
            println!("== average over {} reports", reports.len());
            print_report(&avg);
        }
    }
    Ok(())
}

/// Human-readable dump of a run report.
fn print_report(r: &RunReport) {
    match r.fold {
        Some(fold) => println!("fold {fold}: {} segments evaluated", r.n),
        None => println!("{} segments evaluated", r.n),
    }
    if r.coverage < 1.0 {
        println!(
            "coverage {:.1}% ({} records skipped as unreadable)",
            100.0 * r.coverage,
            r.skipped
        );
    }
    println!("total accuracy {:.4}", r.total_accuracy);
    println!("macro F1       {:.4}", r.macro_f1);
    println!("per-class accuracy:");
    for class in &r.classes {
        match r.per_class_accuracy.get(class) {
            Some(acc) => println!("  {class:<14} {acc:.4}"),
            None => println!("  {class:<14} (no support)"),
        }
    }
    println!("confusion (rows = truth):");
    let width = r
        .confusion
        .iter()
        .flatten()
        .map(|c| c.to_string().len())
        .max()
        .unwrap_or(1)
        .max(3);
    for (k, row) in r.confusion.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|c| format!("{c:>width$}")).collect();
        let name = r.classes.get(k).map(String::as_str).unwrap_or("?");
        println!("  {name:<14} {}", cells.join(" "));
    }
    println!("config {}", &r.config_hash[..r.config_hash.len().min(12)]);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Manifest, SegmentRecord, SplitPlan};
    use crate::features::FeatureConfig;
    use crate::model::{HeadConfig, ModelConfig};
    use tempfile::tempdir;

    /// A tiny but trainable configuration for command-level tests.
    fn micro_config_file(dir: &Path) -> PathBuf {
        let mut rc = RunConfigFile::default();
        rc.train.model = ModelConfig {
            kind: VariantKind::MultiBranch,
            ..ModelConfig::default()
        };
        rc.train.model.encoder.feat_dim = 13;
        rc.train.model.encoder.tdnn_dims = [8, 8, 8, 8, 12];
        rc.train.model.encoder.bilstm_hidden = 6;
        rc.train.model.encoder.bilstm_layers = 1;
        rc.train.model.head = HeadConfig {
            hidden: [8, 8],
            dropout: 0.3,
        };
        rc.train.features = FeatureConfig {
            n_mfcc: 13,
            win_ms: 32.0,
            hop_ms: 30.0,
            ..FeatureConfig::default()
        };
        rc.train.batch_size = 8;
        rc.train.max_epochs = 2;
        rc.synth.n_per_class = 4;
        rc.synth.n_podcasts = 4;
        rc.n_folds = 2;
        let path = dir.join("run.json");
        std::fs::write(&path, serde_json::to_string_pretty(&rc).unwrap()).unwrap();
        path
    }

    fn synth_corpus(config: &Path, dir: &Path) -> PathBuf {
        let out = dir.join("corpus");
        cmd_synth(
            Some(config),
            &SynthArgs {
                out: out.clone(),
                ..SynthArgs::default()
            },
        )
        .unwrap();
        out.join(MANIFEST_FILE)
    }

    #[test]
    fn synth_writes_manifest() {
        let dir = tempdir().unwrap();
        let config = micro_config_file(dir.path());
        let manifest = synth_corpus(&config, dir.path());
        let m = parse_manifest(&manifest).unwrap();
        assert_eq!(m.records.len(), 20);
        assert!(m.records.iter().all(|r| r.audio_path.is_file()));
    }

    #[test]
    fn synth_rejects_bad_imbalance_flag() {
        let dir = tempdir().unwrap();
        let args = SynthArgs {
            out: dir.path().join("x"),
            imbalance: vec!["Fluent~4".into()],
            ..SynthArgs::default()
        };
        let err = cmd_synth(None, &args).unwrap_err();
        assert_eq!(err.exit_code(), 2);

        let args = SynthArgs {
            out: dir.path().join("x"),
            imbalance: vec!["Filler=4".into()],
            ..SynthArgs::default()
        };
        let err = cmd_synth(None, &args).unwrap_err();
        assert!(err.to_string().contains("Filler"), "{err}");
    }

    #[test]
    fn augment_requires_existing_pool() {
        let dir = tempdir().unwrap();
        let config = micro_config_file(dir.path());
        let manifest = synth_corpus(&config, dir.path());
        let args = AugmentArgs {
            manifest: Some(manifest),
            pool_dir: Some(dir.path().join("no-such-pool")),
            out: dir.path().join("aug"),
            ..AugmentArgs::default()
        };
        let err = cmd_augment(Some(&config), &args).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("missing"), "{err}");
    }

    /// Builds a pool directory of steady tones (no silent stretches) so
    /// augmentation has usable material for every category. Babble draws
    /// seven speakers, so speech is the deepest pool.
    fn build_pool(dir: &Path) -> PathBuf {
        let pool = dir.join("pool");
        for sub in ["music", "noise", "speech"] {
            std::fs::create_dir_all(pool.join(sub)).unwrap();
        }
        let rate = 16_000u32;
        let tone = |sub: &str, i: usize, hz: f64| {
            let samples: Vec<f64> = (0..4 * rate as usize)
                .map(|t| 0.25 * (2.0 * std::f64::consts::PI * hz * t as f64 / rate as f64).sin())
                .collect();
            let wave = crate::audio::Waveform {
                samples,
                sample_rate: rate,
            };
            crate::audio::write_wav_pcm16(&pool.join(sub).join(format!("p{i:02}.wav")), &wave)
                .unwrap();
        };
        for (i, hz) in [130.0, 170.0].iter().enumerate() {
            tone("music", i, *hz);
            tone("noise", i, *hz + 25.0);
        }
        for i in 0..8 {
            tone("speech", i, 220.0 + 30.0 * i as f64);
        }
        pool
    }

    #[test]
    fn augment_expands_five_fold_and_subsets() {
        let dir = tempdir().unwrap();
        let config = micro_config_file(dir.path());
        let manifest = synth_corpus(&config, dir.path());
        let pool = build_pool(dir.path());

        let args = AugmentArgs {
            manifest: Some(manifest.clone()),
            pool_dir: Some(pool.clone()),
            out: dir.path().join("aug-all"),
            ..AugmentArgs::default()
        };
        cmd_augment(Some(&config), &args).unwrap();
        let expanded = parse_manifest(&dir.path().join("aug-all").join(MANIFEST_FILE)).unwrap();
        assert_eq!(expanded.records.len(), 5 * 20);

        let args = AugmentArgs {
            manifest: Some(manifest),
            pool_dir: Some(pool),
            out: dir.path().join("aug-reverb"),
            types: Some("reverb".into()),
            ..AugmentArgs::default()
        };
        cmd_augment(Some(&config), &args).unwrap();
        let expanded =
            parse_manifest(&dir.path().join("aug-reverb").join(MANIFEST_FILE)).unwrap();
        assert_eq!(expanded.records.len(), 2 * 20);
    }

    #[test]
    fn augment_of_empty_manifest_is_empty_success() {
        let dir = tempdir().unwrap();
        let config = micro_config_file(dir.path());
        synth_corpus(&config, dir.path());
        let pool = build_pool(dir.path());
        let empty = Manifest {
            records: Vec::new(),
            source_name: "empty".into(),
            n_excluded: 0,
        };
        let empty_path = dir.path().join("empty.csv");
        write_manifest(&empty_path, &empty).unwrap();

        let args = AugmentArgs {
            manifest: Some(empty_path),
            pool_dir: Some(pool),
            out: dir.path().join("aug-empty"),
            ..AugmentArgs::default()
        };
        cmd_augment(Some(&config), &args).unwrap();
        let out = parse_manifest(&dir.path().join("aug-empty").join(MANIFEST_FILE)).unwrap();
        assert!(out.records.is_empty());
    }

    #[test]
    fn features_writes_one_file_per_record() {
        let dir = tempdir().unwrap();
        let config = micro_config_file(dir.path());
        let manifest = synth_corpus(&config, dir.path());
        let out_dir = dir.path().join("feats");
        cmd_features(
            Some(&config),
            &FeaturesArgs {
                manifest: Some(manifest.clone()),
                out_dir: out_dir.clone(),
            },
        )
        .unwrap();
        let m = parse_manifest(&manifest).unwrap();
        for rec in &m.records {
            let path = out_dir.join(format!("{}.skft", rec.id));
            let feats = crate::features::read_skft(&path, 30.0).unwrap();
            assert_eq!(feats.values.ncols(), 13);
        }
    }

    #[test]
    fn split_plan_round_trips() {
        let dir = tempdir().unwrap();
        let config = micro_config_file(dir.path());
        let manifest = synth_corpus(&config, dir.path());
        let out = dir.path().join("plan.json");
        cmd_split(
            Some(&config),
            &SplitArgs {
                manifest: Some(manifest),
                folds: Some(2),
                seed: None,
                out: out.clone(),
            },
        )
        .unwrap();
        let plan: SplitPlan =
            serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
        assert_eq!(plan.folds.len(), 2);
    }

    #[test]
    fn train_writes_artifacts_and_eval_reads_them() {
        let dir = tempdir().unwrap();
        let config = micro_config_file(dir.path());
        let manifest = synth_corpus(&config, dir.path());
        let out_dir = dir.path().join("run");
        cmd_train(
            Some(&config),
            &TrainArgs {
                manifest: Some(manifest.clone()),
                out_dir: Some(out_dir.clone()),
                fold: Some(0),
                ..TrainArgs::default()
            },
        )
        .unwrap();

        assert!(out_dir.join("resolved-config.json").is_file());
        let fold_dir = out_dir.join("fold-00");
        assert!(fold_dir.join("checkpoint.json").is_file());
        assert!(fold_dir.join("log.jsonl").is_file());
        let report = RunReport::load(&fold_dir.join("report.json")).unwrap();
        assert_eq!(report.fold, Some(0));
        let avg = RunReport::load(&out_dir.join("report-average.json")).unwrap();
        assert_eq!(avg.n, report.n);

        cmd_eval(
            Some(&config),
            &EvalArgs {
                checkpoint: fold_dir.join("checkpoint.json"),
                test_manifest: manifest.clone(),
                train_manifest: Some(manifest),
                out: Some(dir.path().join("eval-report.json")),
                fold: None,
            },
        )
        .unwrap();
        let eval_report = RunReport::load(&dir.path().join("eval-report.json")).unwrap();
        assert_eq!(eval_report.n, 20);

        cmd_report(&ReportArgs {
            reports: vec![
                fold_dir.join("report.json"),
                dir.path().join("eval-report.json"),
            ],
        })
        .unwrap();
    }

    #[test]
    fn train_rejects_bad_config_before_compute() {
        let dir = tempdir().unwrap();
        let config = micro_config_file(dir.path());
        let err = cmd_train(
            Some(&config),
            &TrainArgs {
                manifest: Some(dir.path().join("never-read.csv")),
                out_dir: Some(dir.path().join("run")),
                lr: Some(0.0),
                ..TrainArgs::default()
            },
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 2);
        // Nothing was written: the config failed validation first.
        assert!(!dir.path().join("run").exists());
    }

    #[test]
    fn train_rejects_out_of_range_fold() {
        let dir = tempdir().unwrap();
        let config = micro_config_file(dir.path());
        let err = cmd_train(
            Some(&config),
            &TrainArgs {
                manifest: Some(dir.path().join("never-read.csv")),
                fold: Some(7),
                ..TrainArgs::default()
            },
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("--fold 7"), "{err}");
    }

    #[test]
    fn eval_rejects_incompatible_checkpoint() {
        let dir = tempdir().unwrap();
        let config = micro_config_file(dir.path());
        let manifest = synth_corpus(&config, dir.path());
        let out_dir = dir.path().join("run");
        cmd_train(
            Some(&config),
            &TrainArgs {
                manifest: Some(manifest.clone()),
                out_dir: Some(out_dir.clone()),
                fold: Some(0),
                ..TrainArgs::default()
            },
        )
        .unwrap();
        // Default config expects 20-dim features; the checkpoint is 13-dim.
        let err = cmd_eval(
            None,
            &EvalArgs {
                checkpoint: out_dir.join("fold-00").join("checkpoint.json"),
                test_manifest: manifest,
                ..EvalArgs::default()
            },
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("incompatible checkpoint"), "{err}");
    }

    #[test]
    fn eval_soft_skips_missing_audio() {
        let dir = tempdir().unwrap();
        let config = micro_config_file(dir.path());
        let manifest = synth_corpus(&config, dir.path());
        let out_dir = dir.path().join("run");
        cmd_train(
            Some(&config),
            &TrainArgs {
                manifest: Some(manifest.clone()),
                out_dir: Some(out_dir.clone()),
                fold: Some(0),
                ..TrainArgs::default()
            },
        )
        .unwrap();

        let mut m = parse_manifest(&manifest).unwrap();
        m.records.push(SegmentRecord {
            id: "ghost".into(),
            audio_path: dir.path().join("ghost.wav"),
            ..m.records[0].clone()
        });
        let broken = dir.path().join("broken.csv");
        write_manifest(&broken, &m).unwrap();

        let report_path = dir.path().join("soft.json");
        cmd_eval(
            Some(&config),
            &EvalArgs {
                checkpoint: out_dir.join("fold-00").join("checkpoint.json"),
                test_manifest: broken,
                out: Some(report_path.clone()),
                ..EvalArgs::default()
            },
        )
        .unwrap();
        let report = RunReport::load(&report_path).unwrap();
        assert_eq!(report.skipped, 1);
        assert!(report.coverage < 1.0);
    }

    #[test]
    fn cli_parses_spec_examples() {
        let cli = Cli::try_parse_from([
            "stutterkit", "train", "--variant", "mc", "--loss", "ce", "--folds", "10",
        ])
        .unwrap();
        match cli.command {
            Command::Train(args) => {
                assert_eq!(args.variant, Some(VariantArg::Mc));
                assert_eq!(args.loss, Some(LossArg::Ce));
                assert_eq!(args.folds, Some(10));
            }
            other => panic!("parsed {other:?}"),
        }

        let cli = Cli::try_parse_from([
            "stutterkit", "train", "--variant", "single", "--loss", "wce",
        ])
        .unwrap();
        match cli.command {
            Command::Train(args) => {
                assert_eq!(args.variant, Some(VariantArg::Single));
                assert_eq!(args.loss, Some(LossArg::Wce));
            }
            other => panic!("parsed {other:?}"),
        }

        // Invalid variant and missing required flags are usage errors.
        assert!(Cli::try_parse_from(["stutterkit", "train", "--variant", "dual"]).is_err());
        assert!(Cli::try_parse_from(["stutterkit", "synth"]).is_err());
        assert!(
            Cli::try_parse_from(["stutterkit", "eval", "--checkpoint", "c.json"]).is_err(),
            "eval requires --test-manifest"
        );
    }

    #[test]
    fn workflow_flag_maps_to_train_config() {
        for (flag, expected) in [
            ("none", FreezeWorkflow::None),
            ("enc-frz", FreezeWorkflow::EncFrz),
            ("enc-disf-frz", FreezeWorkflow::EncDisfFrz),
            ("enc-fluent-frz", FreezeWorkflow::EncFluentFrz),
        ] {
            let cli =
                Cli::try_parse_from(["stutterkit", "train", "--workflow", flag]).unwrap();
            match cli.command {
                Command::Train(args) => {
                    assert_eq!(FreezeWorkflow::from(args.workflow.unwrap()), expected)
                }
                other => panic!("parsed {other:?}"),
            }
        }
    }
}
