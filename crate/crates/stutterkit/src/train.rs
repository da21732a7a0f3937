//! Training and evaluation: epoch loop with early stopping, k-fold
//! cross-validation, pretrain-freeze-finetune workflows, and report
//! generation.

use std::collections::{BTreeSet, HashMap};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use ndarray::{s, Array2, Array3};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::load_audio;
use crate::dataset::{
    class_weights, fluent_pseudo_label, pseudo_class_weights, Label, Manifest, SegmentRecord,
    SplitPlan,
};
use crate::features::{FeatureConfig, MfccExtractor};
use crate::loss::{uniform_weights, wce_from_logits};
use crate::metrics::{combined_prediction, EvalCounts, RunReport};
use crate::model::checkpoint::Checkpoint;
use crate::model::{BranchRole, FreezeMask, Model, ModelConfig, ModelOutput, VariantKind};
use crate::nn::{Adam, AdamConfig, Mode, Visit};
use crate::rng::{derive_seed, rng_for};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    #[default]
    Ce,
    Wce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FreezeWorkflow {
    #[default]
    None,
    /// Pretrain encoder + disfluent head (WCE), freeze the encoder,
    /// fine-tune both heads.
    EncFrz,
    /// Same pretrain; freeze encoder and disfluent head, train a fresh
    /// fluent head.
    EncDisfFrz,
    /// Pretrain encoder + fluent head (WCE), freeze both, fine-tune the
    /// disfluent head.
    EncFluentFrz,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub loss_mode: LossMode,
    pub freeze_workflow: FreezeWorkflow,
    pub model: ModelConfig,
    pub features: FeatureConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-2,
            batch_size: 128,
            max_epochs: 50,
            patience: 7,
            seed: 7,
            loss_mode: LossMode::Ce,
            freeze_workflow: FreezeWorkflow::None,
            model: ModelConfig::default(),
            features: FeatureConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.model.encoder.feat_dim != self.features.n_mfcc {
            return Err(Error::Config(format!(
                "model feat_dim {} does not match features n_mfcc {}",
                self.model.encoder.feat_dim, self.features.n_mfcc
            )));
        }
        self.model.validate()?;
        self.features.validate()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// Feature loader with an in-memory cache and an access log. The log backs
/// the fold-isolation assertion: a fold's training loop must never touch its
/// test records.
pub struct FeatureStore {
    extractor: MfccExtractor,
    cache: Mutex<HashMap<String, Arc<Array2<f64>>>>,
    accessed: Mutex<BTreeSet<String>>,
}

impl FeatureStore {
    pub fn new(cfg: FeatureConfig) -> Result<FeatureStore> {
        Ok(FeatureStore {
            extractor: MfccExtractor::new(cfg)?,
            cache: Mutex::new(HashMap::new()),
            accessed: Mutex::new(BTreeSet::new()),
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        self.extractor.config()
    }

    pub fn features(&self, record: &SegmentRecord) -> Result<Arc<Array2<f64>>> {
        self.accessed
            .lock()
            .expect("access log lock")
            .insert(record.id.clone());
        if let Some(hit) = self.cache.lock().expect("cache lock").get(&record.id) {
            return Ok(hit.clone());
        }
        let rate = self.extractor.config().sample_rate;
        let wave = load_audio(&record.audio_path, rate)?
            .slice_seconds(record.offset_s, record.duration_s);
        let feats = Arc::new(self.extractor.mfcc(&wave)?.values);
        self.cache
            .lock()
            .expect("cache lock")
            .insert(record.id.clone(), feats.clone());
        Ok(feats)
    }

    pub fn accessed_ids(&self) -> BTreeSet<String> {
        self.accessed.lock().expect("access log lock").clone()
    }

    pub fn reset_access_log(&self) {
        self.accessed.lock().expect("access log lock").clear();
    }
}

/// Errors if any of `test`'s record ids appear in the store's access log.
pub fn assert_fold_isolation(store: &FeatureStore, test: &Manifest) -> Result<()> {
    let seen = store.accessed_ids();
    let leaked: Vec<&str> = test
        .records
        .iter()
        .filter(|r| seen.contains(&r.id))
        .map(|r| r.id.as_str())
        .collect();
    if leaked.is_empty() {
        Ok(())
    } else {
        Err(Error::Data(format!(
            "fold isolation violated: test record(s) touched during training: {}",
            leaked.join(", ")
        )))
    }
}

/// Stacks per-record `(T, D)` features into `(B, T_min, D)`. Clips are
/// fixed-length by pipeline design, so trimming to the batch minimum is a
/// no-op in practice.
fn assemble_batch(feats: &[Arc<Array2<f64>>]) -> Array3<f64> {
    let b = feats.len();
    let t = feats.iter().map(|f| f.nrows()).min().unwrap_or(0);
    let d = feats.first().map(|f| f.ncols()).unwrap_or(0);
    Array3::from_shape_fn((b, t, d), |(i, j, k)| feats[i][[j, k]])
}

fn shuffled_indices(n: usize, seed: u64, phase: &str, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = rng_for(seed, &format!("{phase}-shuffle"), epoch as u64);
    idx.shuffle(&mut rng);
    idx
}

pub(crate) fn ensure_finite(loss: f64, epoch: usize, batch: usize, lr: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "non-finite loss ({loss}) at epoch {epoch}, batch {batch} (lr {lr}); \
             reduce the learning rate in the config and rerun"
        )))
    }
}

/// Per-head loss weights, present for the heads the model carries.
struct HeadWeights {
    fluent: Option<Vec<f64>>,
    disfluent: Option<Vec<f64>>,
}

fn head_weights(mode: LossMode, model_cfg: &ModelConfig, train: &Manifest) -> Result<HeadWeights> {
    let fluent = if model_cfg.has_fluent_head() {
        Some(match mode {
            LossMode::Ce => uniform_weights(2),
            LossMode::Wce => pseudo_class_weights(train)?.to_vec(),
        })
    } else {
        None
    };
    let disfluent = if model_cfg.has_disfluent_head() {
        let c = model_cfg.disfluent_classes;
        Some(match mode {
            LossMode::Ce => uniform_weights(c),
            LossMode::Wce if c == 5 => class_weights(train)?.w.to_vec(),
            LossMode::Wce => {
                // 4-class head: weights over the disfluent labels only.
                let counts = train.label_counts();
                let n: usize = counts[..4].iter().sum();
                let mut w = vec![0.0; 4];
                for (i, &cnt) in counts[..4].iter().enumerate() {
                    if cnt == 0 {
                        return Err(Error::Data(format!(
                            "class {} has zero samples; weighted loss is undefined",
                            Label::from_index(i).expect("disfluent index").name()
                        )));
                    }
                    w[i] = n as f64 / (4.0 * cnt as f64);
                }
                w
            }
        })
    } else {
        None
    };
    Ok(HeadWeights { fluent, disfluent })
}

/// Loss pieces of one batch: `(value, weight_normalizer)` per present head.
struct BatchLossParts {
    joint: f64,
    fluent: Option<(f64, f64)>,
    disfluent: Option<(f64, f64)>,
}

/// Computes per-head losses and logit gradients for one forward output.
/// With a 4-class disfluent head, only disfluent-labeled rows contribute;
/// an all-fluent batch yields a zero part and no gradient for that head.
fn head_losses(
    out: &ModelOutput,
    labels: &[Label],
    weights: &HeadWeights,
    disfluent_classes: usize,
) -> Result<(BatchLossParts, Option<Array2<f64>>, Option<Array2<f64>>)> {
    let mut fluent_part = None;
    let mut dl_fluent = None;
    if let Some(logits) = &out.fluent {
        let lab: Vec<usize> = labels
            .iter()
            .map(|l| fluent_pseudo_label(*l).index())
            .collect();
        let w = weights.fluent.as_ref().expect("fluent weights");
        let (bl, dl) = wce_from_logits(logits, &lab, w)?;
        fluent_part = Some((bl.value, bl.weight_normalizer));
        dl_fluent = Some(dl);
    }

    let mut disfluent_part = None;
    let mut dl_disfluent = None;
    if let Some(logits) = &out.disfluent {
        let w = weights.disfluent.as_ref().expect("disfluent weights");
        if disfluent_classes == 5 {
            let lab: Vec<usize> = labels.iter().map(|l| l.index()).collect();
            let (bl, dl) = wce_from_logits(logits, &lab, w)?;
            disfluent_part = Some((bl.value, bl.weight_normalizer));
            dl_disfluent = Some(dl);
        } else {
            let sel: Vec<usize> = (0..labels.len())
                .filter(|i| labels[*i] != Label::Fluent)
                .collect();
            if sel.is_empty() {
                disfluent_part = Some((0.0, 0.0));
            } else {
                let sub = logits.select(ndarray::Axis(0), &sel);
                let lab: Vec<usize> = sel.iter().map(|i| labels[*i].index()).collect();
                let (bl, sub_dl) = wce_from_logits(&sub, &lab, w)?;
                let mut full = Array2::zeros(logits.dim());
                for (k, i) in sel.iter().enumerate() {
                    full.slice_mut(s![*i, ..]).assign(&sub_dl.slice(s![k, ..]));
                }
                disfluent_part = Some((bl.value, bl.weight_normalizer));
                dl_disfluent = Some(full);
            }
        }
    }

    let joint = fluent_part.map_or(0.0, |(v, _)| v) + disfluent_part.map_or(0.0, |(v, _)| v);
    Ok((
        BatchLossParts {
            joint,
            fluent: fluent_part,
            disfluent: disfluent_part,
        },
        dl_fluent,
        dl_disfluent,
    ))
}

/// Weighted loss accumulator over an epoch: summing `value * normalizer`
/// and dividing by the summed normalizers reproduces the exact whole-split
/// weighted loss, independent of batching.
#[derive(Default)]
struct LossAgg {
    vf: f64,
    nf: f64,
    vd: f64,
    nd: f64,
    has_fluent: bool,
    has_disfluent: bool,
}

impl LossAgg {
    fn add(&mut self, parts: &BatchLossParts) {
        if let Some((v, n)) = parts.fluent {
            self.vf += v * n;
            self.nf += n;
            self.has_fluent = true;
        }
        if let Some((v, n)) = parts.disfluent {
            self.vd += v * n;
            self.nd += n;
            self.has_disfluent = true;
        }
    }

    fn stats(&self) -> EpochStats {
        let f = (self.nf > 0.0).then(|| self.vf / self.nf);
        let d = (self.nd > 0.0).then(|| self.vd / self.nd);
        EpochStats {
            total: f.unwrap_or(0.0) + d.unwrap_or(0.0),
            fluent: self.has_fluent.then(|| f.unwrap_or(0.0)),
            disfluent: self.has_disfluent.then(|| d.unwrap_or(0.0)),
        }
    }
}

/// Epoch-level losses: `total` is the optimized objective (the joint loss
/// for branched variants, the single head's loss otherwise).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub total: f64,
    pub fluent: Option<f64>,
    pub disfluent: Option<f64>,
}

/// One training-log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLogRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub fluent_loss: Option<f64>,
    pub disfluent_loss: Option<f64>,
    pub elapsed_s: f64,
}

/// Early-stopping bookkeeping.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub epoch: usize,
    pub best_val_loss: Option<f64>,
    pub epochs_since_improve: usize,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Snapshot at the best-validation epoch (not the last).
    pub checkpoint: Checkpoint,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub epochs_run: usize,
    pub log: Vec<EpochLogRecord>,
}

/// The epoch-level callbacks `run_early_stopped` drives. Production code
/// uses [`FoldDriver`]; tests may inject synthetic loss sequences.
pub trait EpochDriver {
    fn train_epoch(&mut self, epoch: usize) -> Result<EpochStats>;
    fn validate(&mut self, epoch: usize) -> Result<EpochStats>;
    fn snapshot(&mut self, epoch: usize, val_loss: f64) -> Result<Checkpoint>;
}

/// Runs up to `max_epochs` epochs, tracking the best validation loss under
/// strict improvement (any margin), and stops once `patience` epochs pass
/// without improvement. Returns the best-epoch checkpoint.
pub fn run_early_stopped(
    max_epochs: usize,
    patience: usize,
    driver: &mut dyn EpochDriver,
) -> Result<TrainOutcome> {
    if max_epochs == 0 || patience == 0 {
        return Err(Error::Config(
            "max_epochs and patience must be at least 1".into(),
        ));
    }
    let mut state = TrainState {
        epoch: 0,
        best_val_loss: None,
        epochs_since_improve: 0,
    };
    let mut best: Option<(usize, f64, Checkpoint)> = None;
    let mut log = Vec::new();
    for epoch in 1..=max_epochs {
        let t0 = Instant::now();
        let train = driver.train_epoch(epoch)?;
        ensure_finite(train.total, epoch, 0, f64::NAN).map_err(|_| {
            Error::Numeric(format!("non-finite training loss at epoch {epoch}"))
        })?;
        let val = driver.validate(epoch)?;
        if !val.total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite validation loss at epoch {epoch}"
            )));
        }
        state.epoch = epoch;
        let improved = state.best_val_loss.is_none_or(|b| val.total < b);
        if improved {
            state.best_val_loss = Some(val.total);
            state.epochs_since_improve = 0;
            best = Some((epoch, val.total, driver.snapshot(epoch, val.total)?));
        } else {
            state.epochs_since_improve += 1;
        }
        debug_assert!(state.epochs_since_improve <= patience);
        log.push(EpochLogRecord {
            epoch,
            train_loss: train.total,
            val_loss: val.total,
            fluent_loss: train.fluent,
            disfluent_loss: train.disfluent,
            elapsed_s: t0.elapsed().as_secs_f64(),
        });
        if state.epochs_since_improve >= patience {
            break;
        }
    }
    let (best_epoch, best_val_loss, checkpoint) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        checkpoint,
        best_epoch,
        best_val_loss,
        epochs_run: state.epoch,
        log,
    })
}

/// The real driver: shuffled mini-batches, forward/backward, Adam updates
/// honoring the model's freeze mask, weighted validation loss.
struct FoldDriver<'a> {
    cfg: &'a TrainConfig,
    phase: String,
    store: &'a FeatureStore,
    train_m: &'a Manifest,
    valid_m: &'a Manifest,
    weights: HeadWeights,
    model: &'a mut Model,
    adam: Adam,
}

impl<'a> FoldDriver<'a> {
    fn new(
        cfg: &'a TrainConfig,
        phase: &str,
        store: &'a FeatureStore,
        train_m: &'a Manifest,
        valid_m: &'a Manifest,
        model: &'a mut Model,
    ) -> Result<FoldDriver<'a>> {
        if train_m.records.is_empty() || valid_m.records.is_empty() {
            return Err(Error::Data(
                "training and validation manifests must be non-empty".into(),
            ));
        }
        let weights = head_weights(cfg.loss_mode, model.config(), train_m)?;
        Ok(FoldDriver {
            cfg,
            phase: phase.to_string(),
            store,
            train_m,
            valid_m,
            weights,
            model,
            adam: Adam::new(cfg.adam()),
        })
    }

    fn batch_records<'m>(manifest: &'m Manifest, idx: &[usize]) -> Vec<&'m SegmentRecord> {
        idx.iter().map(|i| &manifest.records[*i]).collect()
    }

    fn load_batch(&self, records: &[&SegmentRecord]) -> Result<(Array3<f64>, Vec<Label>)> {
        let feats = records
            .iter()
            .map(|r| self.store.features(r))
            .collect::<Result<Vec<_>>>()?;
        let labels = records.iter().map(|r| r.label).collect();
        Ok((assemble_batch(&feats), labels))
    }
}

impl EpochDriver for FoldDriver<'_> {
    fn train_epoch(&mut self, epoch: usize) -> Result<EpochStats> {
        let order = shuffled_indices(
            self.train_m.records.len(),
            self.cfg.seed,
            &self.phase,
            epoch,
        );
        let mut drop_rng = rng_for(
            self.cfg.seed,
            &format!("{}-dropout", self.phase),
            epoch as u64,
        );
        let freeze = self.model.freeze_mask();
        let disfluent_classes = self.model.config().disfluent_classes;
        let mut agg = LossAgg::default();
        for (bi, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            let records = Self::batch_records(self.train_m, chunk);
            let (x, labels) = self.load_batch(&records)?;
            self.model.zero_grads();
            let out = self.model.forward(&x, Mode::Train, &mut drop_rng)?;
            let (parts, dl_f, dl_d) = head_losses(&out, &labels, &self.weights, disfluent_classes)?;
            ensure_finite(parts.joint, epoch, bi, self.adam.lr())?;
            agg.add(&parts);
            if dl_f.is_none() && dl_d.is_none() {
                continue;
            }
            self.model.backward(dl_f.as_ref(), dl_d.as_ref());
            self.adam
                .step(self.model, &move |path| freeze.path_frozen(path));
        }
        Ok(agg.stats())
    }

    fn validate(&mut self, _epoch: usize) -> Result<EpochStats> {
        let disfluent_classes = self.model.config().disfluent_classes;
        let mut rng = rng_for(self.cfg.seed, "eval-noop", 0);
        let mut agg = LossAgg::default();
        let n = self.valid_m.records.len();
        let idx: Vec<usize> = (0..n).collect();
        for chunk in idx.chunks(self.cfg.batch_size) {
            let records = Self::batch_records(self.valid_m, chunk);
            let (x, labels) = self.load_batch(&records)?;
            let out = self.model.forward(&x, Mode::Eval, &mut rng)?;
            let (parts, _, _) = head_losses(&out, &labels, &self.weights, disfluent_classes)?;
            agg.add(&parts);
        }
        Ok(agg.stats())
    }

    fn snapshot(&mut self, epoch: usize, val_loss: f64) -> Result<Checkpoint> {
        Ok(Checkpoint::capture(self.model, epoch, Some(val_loss), None))
    }
}

/// Trains one fold from fresh parameters and returns the best checkpoint
/// plus the epoch log. Under a freeze workflow this is the full
/// pretrain-transplant-finetune sequence and the fine-tune outcome is
/// returned.
pub fn train_fold(
    cfg: &TrainConfig,
    store: &FeatureStore,
    train_m: &Manifest,
    valid_m: &Manifest,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    match cfg.freeze_workflow {
        FreezeWorkflow::None => {
            let mut rng = rng_for(cfg.seed, "init", 0);
            let mut model = Model::new(&cfg.model, &mut rng)?;
            train_phase(cfg, "main", store, train_m, valid_m, &mut model)
        }
        _ => Ok(pretrain_finetune(cfg, store, train_m, valid_m)?.finetune),
    }
}

fn train_phase(
    cfg: &TrainConfig,
    phase: &str,
    store: &FeatureStore,
    train_m: &Manifest,
    valid_m: &Manifest,
    model: &mut Model,
) -> Result<TrainOutcome> {
    let mut driver = FoldDriver::new(cfg, phase, store, train_m, valid_m, model)?;
    run_early_stopped(cfg.max_epochs, cfg.patience, &mut driver)
}

#[derive(Debug)]
pub struct WorkflowOutcome {
    pub pretrain: TrainOutcome,
    pub finetune: TrainOutcome,
}

/// The freeze workflows: pretrain a single-branch model with WCE, transplant
/// its tensors into the branched target, freeze the pretrained groups, and
/// fine-tune the rest under the configured loss.
pub fn pretrain_finetune(
    cfg: &TrainConfig,
    store: &FeatureStore,
    train_m: &Manifest,
    valid_m: &Manifest,
) -> Result<WorkflowOutcome> {
    cfg.validate()?;
    let workflow = cfg.freeze_workflow;
    if workflow == FreezeWorkflow::None {
        return Err(Error::Config(
            "pretrain_finetune requires a freeze workflow".into(),
        ));
    }
    if cfg.model.kind == VariantKind::SingleBranch {
        return Err(Error::Config(
            "freeze workflows need a branched target variant".into(),
        ));
    }

    let role = match workflow {
        FreezeWorkflow::EncFluentFrz => BranchRole::Fluent,
        _ => BranchRole::Disfluent,
    };
    let mut pre_cfg = cfg.clone();
    pre_cfg.model = ModelConfig {
        kind: VariantKind::SingleBranch,
        single_branch_role: role,
        ..cfg.model.clone()
    };
    pre_cfg.loss_mode = LossMode::Wce;
    pre_cfg.freeze_workflow = FreezeWorkflow::None;

    let mut pre_rng = rng_for(cfg.seed, "pretrain-init", 0);
    let mut pre_model = Model::new(&pre_cfg.model, &mut pre_rng)?;
    let pretrain = train_phase(&pre_cfg, "pretrain", store, train_m, valid_m, &mut pre_model)?;

    let mut rng = rng_for(cfg.seed, "init", 0);
    let mut model = Model::new(&cfg.model, &mut rng)?;
    model.transplant(&pretrain.checkpoint.params, &pretrain.checkpoint.buffers)?;
    let mask = match workflow {
        FreezeWorkflow::None => unreachable!("checked above"),
        FreezeWorkflow::EncFrz => FreezeMask {
            encoder: true,
            ..FreezeMask::none()
        },
        FreezeWorkflow::EncDisfFrz => FreezeMask {
            encoder: true,
            disfluent_branch: true,
            ..FreezeMask::none()
        },
        FreezeWorkflow::EncFluentFrz => FreezeMask {
            encoder: true,
            fluent_branch: true,
            ..FreezeMask::none()
        },
    };
    model.apply_freeze(mask)?;
    let finetune = train_phase(cfg, "finetune", store, train_m, valid_m, &mut model)?;
    Ok(WorkflowOutcome { pretrain, finetune })
}

/// How predictions map to report classes for a given model configuration.
pub fn report_classes(model_cfg: &ModelConfig) -> Vec<&'static str> {
    match (model_cfg.kind, model_cfg.single_branch_role) {
        (VariantKind::SingleBranch, BranchRole::Fluent) => vec!["Fluent", "Disfluent"],
        (VariantKind::SingleBranch, BranchRole::Disfluent) if model_cfg.disfluent_classes == 4 => {
            Label::ALL[..4].iter().map(|l| l.name()).collect()
        }
        _ => Label::ALL.iter().map(|l| l.name()).collect(),
    }
}

/// Predicted class index (in [`report_classes`] order) from per-head
/// probability rows, applying the combined two-branch decision rule where
/// the variant calls for it.
pub fn predict_row(
    model_cfg: &ModelConfig,
    fluent: Option<&[f64]>,
    disfluent: Option<&[f64]>,
) -> usize {
    fn argmax(v: &[f64]) -> usize {
        let mut best = 0;
        for (i, x) in v.iter().enumerate() {
            if *x > v[best] {
                best = i;
            }
        }
        best
    }
    match model_cfg.kind {
        VariantKind::SingleBranch => match model_cfg.single_branch_role {
            BranchRole::Fluent => argmax(fluent.expect("fluent head output")),
            BranchRole::Disfluent => argmax(disfluent.expect("disfluent head output")),
        },
        _ => {
            let f = fluent.expect("fluent head output");
            let d = disfluent.expect("disfluent head output");
            if model_cfg.disfluent_classes == 5 {
                combined_prediction(f, d).index()
            } else if argmax(f) == 0 {
                Label::Fluent.index()
            } else {
                argmax(d)
            }
        }
    }
}

/// True-class index for the report's class layout; `None` means the record
/// cannot be scored by this model (counted as skipped).
fn truth_index(model_cfg: &ModelConfig, label: Label) -> Option<usize> {
    match (model_cfg.kind, model_cfg.single_branch_role) {
        (VariantKind::SingleBranch, BranchRole::Fluent) => {
            Some(fluent_pseudo_label(label).index())
        }
        (VariantKind::SingleBranch, BranchRole::Disfluent) if model_cfg.disfluent_classes == 4 => {
            (label != Label::Fluent).then(|| label.index())
        }
        _ => Some(label.index()),
    }
}

/// Inference over a test manifest: evaluation mode, combined decision rule
/// for branched variants, soft-skip of unreadable records (flagged via
/// coverage in the report).
pub fn evaluate_model(
    model: &mut Model,
    store: &FeatureStore,
    test: &Manifest,
    config_hash: &str,
    fold: Option<usize>,
    batch_size: usize,
) -> Result<RunReport> {
    let model_cfg = model.config().clone();
    let classes = report_classes(&model_cfg);
    let mut counts = EvalCounts::new(classes.len());
    let mut skipped: u64 = 0;
    let mut rng = rng_for(0, "eval-noop", 0);
    let batch = batch_size.max(1);

    let mut pending: Vec<(&SegmentRecord, Arc<Array2<f64>>, usize)> = Vec::new();
    let mut flush = |pending: &mut Vec<(&SegmentRecord, Arc<Array2<f64>>, usize)>,
                     counts: &mut EvalCounts|
     -> Result<()> {
        if pending.is_empty() {
            return Ok(());
        }
        let feats: Vec<Arc<Array2<f64>>> = pending.iter().map(|(_, f, _)| f.clone()).collect();
        let x = assemble_batch(&feats);
        let out = model.forward(&x, Mode::Eval, &mut rng)?;
        let fluent = out.fluent_probs();
        let disfluent = out.disfluent_probs();
        for (row, (_, _, truth)) in pending.iter().enumerate() {
            let f = fluent.as_ref().map(|p| p.row(row).to_vec());
            let d = disfluent.as_ref().map(|p| p.row(row).to_vec());
            let predicted = predict_row(&model_cfg, f.as_deref(), d.as_deref());
            counts.record(*truth, predicted);
        }
        pending.clear();
        Ok(())
    };

    for record in &test.records {
        let truth = match truth_index(&model_cfg, record.label) {
            Some(t) => t,
            None => {
                skipped += 1;
                continue;
            }
        };
        match store.features(record) {
            Ok(f) => pending.push((record, f, truth)),
            Err(Error::Io { .. }) | Err(Error::Audio(_)) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        }
        if pending.len() == batch {
            flush(&mut pending, &mut counts)?;
        }
    }
    flush(&mut pending, &mut counts)?;
    Ok(RunReport::from_counts(
        &counts,
        &classes,
        fold,
        config_hash,
        skipped,
    ))
}

#[derive(Debug)]
pub struct FoldRun {
    pub fold: usize,
    pub outcome: TrainOutcome,
    pub report: RunReport,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FoldFailure {
    pub fold: usize,
    pub message: String,
}

#[derive(Debug)]
pub struct CvOutcome {
    pub folds: Vec<FoldRun>,
    pub failures: Vec<FoldFailure>,
    /// Unweighted mean metrics over completed folds; `None` when every fold
    /// failed.
    pub average: Option<RunReport>,
    /// True when some folds failed and the average covers a subset.
    pub partial: bool,
}

/// Trains and evaluates a single cross-validation fold end to end.
pub fn run_one_fold(
    cfg: &TrainConfig,
    m: &Manifest,
    sets: &crate::dataset::FoldSets,
    fold: usize,
    config_hash: &str,
) -> Result<FoldRun> {
    let store = FeatureStore::new(cfg.features.clone())?;
    let train_m = m.subset_by_podcasts(&sets.train);
    let valid_m = m.subset_by_podcasts(&sets.valid);
    let test_m = m.subset_by_podcasts(&sets.test);
    if test_m.records.is_empty() {
        return Err(Error::Data(format!("fold {fold}: empty test split")));
    }

    let mut fold_cfg = cfg.clone();
    fold_cfg.seed = derive_seed(cfg.seed, "fold", fold as u64);
    let outcome = train_fold(&fold_cfg, &store, &train_m, &valid_m)?;

    // The training loop must never have touched this fold's test records.
    assert_fold_isolation(&store, &test_m)?;

    let mut model = outcome.checkpoint.restore()?;
    let report = evaluate_model(
        &mut model,
        &store,
        &test_m,
        config_hash,
        Some(fold),
        fold_cfg.batch_size,
    )?;
    Ok(FoldRun {
        fold,
        outcome,
        report,
    })
}

/// K-fold cross-validation: trains and evaluates every fold independently
/// (fresh parameters, per-fold derived seeds), tolerating individual fold
/// failures.
pub fn run_cv(cfg: &TrainConfig, m: &Manifest, plan: &SplitPlan, config_hash: &str) -> CvOutcome {
    let results: Vec<(usize, Result<FoldRun>)> = plan
        .folds
        .par_iter()
        .enumerate()
        .map(|(i, sets)| (i, run_one_fold(cfg, m, sets, i, config_hash)))
        .collect();

    let mut folds = Vec::new();
    let mut failures = Vec::new();
    for (i, result) in results {
        match result {
            Ok(run) => folds.push(run),
            Err(e) => failures.push(FoldFailure {
                fold: i,
                message: e.to_string(),
            }),
        }
    }
    let reports: Vec<RunReport> = folds.iter().map(|f| f.report.clone()).collect();
    let average = RunReport::average(&reports);
    let partial = !failures.is_empty();
    CvOutcome {
        folds,
        failures,
        average,
        partial,
    }
}

/// Writes the per-epoch log as JSON lines.
pub fn write_epoch_log(path: &std::path::Path, log: &[EpochLogRecord]) -> Result<()> {
    let mut out = String::new();
    for rec in log {
        let line = serde_json::to_string(rec)
            .map_err(|e| Error::Data(format!("epoch log serialization: {e}")))?;
        out.push_str(&line);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
