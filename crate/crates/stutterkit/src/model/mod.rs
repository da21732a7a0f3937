//! The detection network: TDNN + BiLSTM contextual encoders, statistics
//! pooling, branch heads, and the three wiring variants.

pub mod checkpoint;

use std::collections::BTreeMap;

use ndarray::{s, Array2, Array3};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{
    dropout_backward, dropout_forward, relu_backward, relu_forward, BatchNorm, BiLstm, Linear,
    Mode, ParamRef, StatPool, TdnnLayer, Visit,
};
use crate::{loss, Error, Result};

/// First-layer temporal context selector: the frame window of TDNN1 is 5
/// (dense taps `[-2..+2]`) or 9 (dense taps `[-4..+4]`); layers 2-5 are
/// shared between the two.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Context {
    C5,
    C9,
}

impl Context {
    pub fn layer_taps(self) -> [Vec<i64>; 5] {
        let first = match self {
            Context::C5 => vec![-2, -1, 0, 1, 2],
            Context::C9 => vec![-4, -3, -2, -1, 0, 1, 2, 3, 4],
        };
        [first, vec![-2, 0, 2], vec![-3, 0, 3], vec![0], vec![0]]
    }
}

/// One TDNN layer's shape contract. Every layer is followed by ReLU and
/// batch normalization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TdnnLayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub taps: Vec<i64>,
}

impl TdnnLayerSpec {
    /// `position` is the 1-based layer index; layers 1-3 must have taps
    /// symmetric around 0, layers 4-5 exactly `{0}`.
    pub fn validate(&self, position: usize) -> Result<()> {
        if self.out_dim == 0 || self.in_dim == 0 {
            return Err(Error::Config(format!("tdnn{position}: zero dimension")));
        }
        if self.taps.is_empty() || self.taps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "tdnn{position}: taps must be non-empty and strictly ascending"
            )));
        }
        match position {
            1..=3 => {
                let mirrored: Vec<i64> = self.taps.iter().rev().map(|t| -t).collect();
                if mirrored != self.taps {
                    return Err(Error::Config(format!(
                        "tdnn{position}: taps {:?} are not symmetric around 0",
                        self.taps
                    )));
                }
            }
            4 | 5 => {
                if self.taps != [0] {
                    return Err(Error::Config(format!(
                        "tdnn{position}: taps must be {{0}}, got {:?}",
                        self.taps
                    )));
                }
            }
            _ => return Err(Error::Config(format!("tdnn layer position {position}"))),
        }
        Ok(())
    }
}

/// Shape of one contextual encoder: five TDNN layers followed by a stacked
/// bidirectional LSTM whose per-frame output is pooled to mean-and-std.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub context: Context,
    pub feat_dim: usize,
    pub tdnn_dims: [usize; 5],
    pub bilstm_hidden: usize,
    pub bilstm_layers: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            context: Context::C5,
            feat_dim: 20,
            tdnn_dims: [64, 64, 64, 64, 192],
            bilstm_hidden: 64,
            bilstm_layers: 2,
        }
    }
}

impl EncoderConfig {
    pub fn layer_specs(&self) -> [TdnnLayerSpec; 5] {
        let taps = self.context.layer_taps();
        let mut in_dim = self.feat_dim;
        let mut specs = Vec::with_capacity(5);
        for (i, t) in taps.into_iter().enumerate() {
            specs.push(TdnnLayerSpec {
                in_dim,
                out_dim: self.tdnn_dims[i],
                taps: t,
            });
            in_dim = self.tdnn_dims[i];
        }
        specs.try_into().expect("five layers")
    }

    pub fn validate(&self) -> Result<()> {
        if self.feat_dim == 0 {
            return Err(Error::Config("encoder feat_dim must be positive".into()));
        }
        if self.bilstm_hidden == 0 || self.bilstm_layers == 0 {
            return Err(Error::Config("bilstm dims must be positive".into()));
        }
        for (i, spec) in self.layer_specs().iter().enumerate() {
            spec.validate(i + 1)?;
        }
        Ok(())
    }

    /// Receptive-field half-width: sum of each layer's max |offset|
    /// (C5: 2+2+3 = 7, C9: 4+2+3 = 9).
    pub fn half_width(&self) -> usize {
        self.layer_specs()
            .iter()
            .map(|s| s.taps.iter().map(|t| t.unsigned_abs() as usize).max().unwrap_or(0))
            .sum()
    }

    /// Total context in frames: `2 * half_width + 1` (15 for C5, 19 for C9).
    pub fn total_context(&self) -> usize {
        2 * self.half_width() + 1
    }

    /// Valid output frames of the TDNN stack for `t` input frames.
    pub fn out_frames(&self, t: usize) -> Option<usize> {
        t.checked_sub(2 * self.half_width()).filter(|&n| n > 0)
    }

    /// Per-frame width after the BiLSTM.
    pub fn frame_dim(&self) -> usize {
        2 * self.bilstm_hidden
    }

    /// Pooled embedding width: mean and std of the BiLSTM frames.
    pub fn pooled_dim(&self) -> usize {
        2 * self.frame_dim()
    }
}

/// Pool a single `(T, D)` sequence to its `2D`-dim mean-and-std vector
/// (population std). Errors when `T < 2`, where the std is degenerate.
pub fn stat_pool(seq: &Array2<f64>) -> Result<Vec<f64>> {
    let (t, d) = seq.dim();
    if t < 2 {
        return Err(Error::Shape(format!(
            "pooling degenerate: {t} frame(s), need at least 2"
        )));
    }
    let batched = seq
        .clone()
        .into_shape_with_order((1, t, d))
        .expect("shape");
    let pooled = StatPool::new().forward(&batched, false);
    Ok(pooled.row(0).to_vec())
}

/// One TDNN + BiLSTM encoder with its pooling layer.
pub struct ContextEncoder {
    cfg: EncoderConfig,
    tdnn: Vec<TdnnLayer>,
    bn: Vec<BatchNorm>,
    lstm: BiLstm,
    pool: StatPool,
    relu_masks: Vec<Vec<bool>>,
    layer_shapes: Vec<(usize, usize, usize)>,
}

impl ContextEncoder {
    pub fn new(cfg: EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut tdnn = Vec::with_capacity(5);
        let mut bn = Vec::with_capacity(5);
        for spec in cfg.layer_specs() {
            tdnn.push(TdnnLayer::new(spec.in_dim, spec.out_dim, &spec.taps, rng));
            bn.push(BatchNorm::new(spec.out_dim));
        }
        let lstm = BiLstm::new(cfg.tdnn_dims[4], cfg.bilstm_hidden, cfg.bilstm_layers, rng);
        Ok(ContextEncoder {
            cfg,
            tdnn,
            bn,
            lstm,
            pool: StatPool::new(),
            relu_masks: vec![Vec::new(); 5],
            layer_shapes: vec![(0, 0, 0); 5],
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn pooled_dim(&self) -> usize {
        self.cfg.pooled_dim()
    }

    /// The five TDNN layers with their ReLU + batch-norm stages. Batch norm
    /// pools statistics over batch and time jointly.
    pub fn tdnn_forward(&mut self, x: &Array3<f64>, mode: Mode, cache: bool) -> Array3<f64> {
        let mut cur = x.clone();
        for i in 0..5 {
            let y3 = self.tdnn[i].forward(&cur, cache);
            let (b, t, f) = y3.dim();
            let mut y2 = y3.into_shape_with_order((b * t, f)).expect("shape");
            let mask = relu_forward(y2.as_slice_mut().expect("contiguous"));
            if cache {
                self.relu_masks[i] = mask;
                self.layer_shapes[i] = (b, t, f);
            }
            let y2 = self.bn[i].forward(&y2, mode);
            cur = y2.into_shape_with_order((b, t, f)).expect("shape");
        }
        cur
    }

    /// Full per-frame embedding: TDNN stack then BiLSTM.
    pub fn encode(&mut self, x: &Array3<f64>, mode: Mode, cache: bool) -> Array3<f64> {
        let frames = self.tdnn_forward(x, mode, cache);
        self.lstm.forward(&frames, cache)
    }

    /// Pooled utterance embedding, `(B, pooled_dim)`.
    pub fn forward(&mut self, x: &Array3<f64>, mode: Mode, cache: bool) -> Array2<f64> {
        let seq = self.encode(x, mode, cache);
        self.pool.forward(&seq, cache)
    }

    /// Backward from pooled-embedding gradients; accumulates parameter
    /// gradients (input gradients are discarded at the feature boundary).
    pub fn backward(&mut self, d_pooled: &Array2<f64>) {
        let d_seq = self.pool.backward(d_pooled);
        let mut d3 = self.lstm.backward(&d_seq);
        for i in (0..5).rev() {
            let (b, t, f) = self.layer_shapes[i];
            let d2 = d3.into_shape_with_order((b * t, f)).expect("shape");
            let mut d2 = self.bn[i].backward(&d2);
            relu_backward(
                d2.as_slice_mut().expect("contiguous"),
                &self.relu_masks[i],
            );
            let d_in = d2.into_shape_with_order((b, t, f)).expect("shape");
            d3 = self.tdnn[i].backward(&d_in);
        }
    }
}

impl Visit for ContextEncoder {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamRef<'_>)) {
        for i in 0..5 {
            let n = i + 1;
            self.tdnn[i].visit_params(&crate::nn::join_path(prefix, &format!("tdnn{n}")), f);
            self.bn[i].visit_params(&crate::nn::join_path(prefix, &format!("bn{n}")), f);
        }
        self.lstm
            .visit_params(&crate::nn::join_path(prefix, "lstm"), f);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(crate::nn::BufRef<'_>)) {
        for i in 0..5 {
            let n = i + 1;
            self.bn[i].visit_buffers(&crate::nn::join_path(prefix, &format!("bn{n}")), f);
        }
    }
}

/// Branch-head shape: two hidden FC layers then the class layer. Each hidden
/// layer is FC -> ReLU -> batch norm -> dropout; the class layer emits raw
/// logits (softmax is applied by the loss / at prediction).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub hidden: [usize; 2],
    pub dropout: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            hidden: [64, 64],
            dropout: 0.3,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.iter().any(|d| *d == 0) {
            return Err(Error::Config("head hidden dims must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "head dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

pub struct BranchHead {
    fc: Vec<Linear>,
    bn: Vec<BatchNorm>,
    dropout: f64,
    n_classes: usize,
    relu_masks: Vec<Vec<bool>>,
    drop_masks: Vec<Option<Vec<f64>>>,
}

impl BranchHead {
    pub fn new(in_dim: usize, cfg: &HeadConfig, n_classes: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(n_classes >= 2);
        let dims = [in_dim, cfg.hidden[0], cfg.hidden[1], n_classes];
        let fc = (0..3)
            .map(|i| Linear::new(dims[i], dims[i + 1], rng))
            .collect();
        let bn = (0..2).map(|i| BatchNorm::new(dims[i + 1])).collect();
        BranchHead {
            fc,
            bn,
            dropout: cfg.dropout,
            n_classes,
            relu_masks: vec![Vec::new(); 2],
            drop_masks: vec![None, None],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn forward(
        &mut self,
        x: &Array2<f64>,
        mode: Mode,
        cache: bool,
        rng: &mut ChaCha8Rng,
    ) -> Array2<f64> {
        let mut h = x.clone();
        for i in 0..2 {
            h = self.fc[i].forward(&h, cache);
            let mask = relu_forward(h.as_slice_mut().expect("contiguous"));
            h = self.bn[i].forward(&h, mode);
            let drop = if mode == Mode::Train && self.dropout > 0.0 {
                Some(dropout_forward(
                    h.as_slice_mut().expect("contiguous"),
                    self.dropout,
                    rng,
                ))
            } else {
                None
            };
            if cache {
                self.relu_masks[i] = mask;
                self.drop_masks[i] = drop;
            }
        }
        self.fc[2].forward(&h, cache)
    }

    pub fn backward(&mut self, dlogits: &Array2<f64>) -> Array2<f64> {
        let mut d = self.fc[2].backward(dlogits);
        for i in (0..2).rev() {
            if let Some(mask) = &self.drop_masks[i] {
                dropout_backward(d.as_slice_mut().expect("contiguous"), mask);
            }
            d = self.bn[i].backward(&d);
            relu_backward(d.as_slice_mut().expect("contiguous"), &self.relu_masks[i]);
            d = self.fc[i].backward(&d);
        }
        d
    }
}

impl Visit for BranchHead {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamRef<'_>)) {
        for i in 0..3 {
            let n = i + 1;
            self.fc[i].visit_params(&crate::nn::join_path(prefix, &format!("fc{n}")), f);
            if i < 2 {
                self.bn[i].visit_params(&crate::nn::join_path(prefix, &format!("bn{n}")), f);
            }
        }
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(crate::nn::BufRef<'_>)) {
        for i in 0..2 {
            let n = i + 1;
            self.bn[i].visit_buffers(&crate::nn::join_path(prefix, &format!("bn{n}")), f);
        }
    }
}

/// Wiring variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    /// One encoder, one head.
    SingleBranch,
    /// One encoder; fluent (2-class) and disfluent heads share its embedding.
    MultiBranch,
    /// Two encoders (contexts 5 and 9) whose pooled embeddings concatenate
    /// before the two heads.
    MultiContext,
}

/// Which head a single-branch model carries: the standard 5-class stutter
/// head, or the 2-class fluent/disfluent head used when pretraining for the
/// fluent-frozen workflow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BranchRole {
    #[default]
    Disfluent,
    Fluent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: VariantKind,
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    /// 5 (default) trains the disfluent head on all samples with the full
    /// label set; 4 trains it on disfluent samples only (Fluent excluded).
    pub disfluent_classes: usize,
    /// Only read for `SingleBranch`.
    pub single_branch_role: BranchRole,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: VariantKind::MultiContext,
            encoder: EncoderConfig::default(),
            head: HeadConfig::default(),
            disfluent_classes: 5,
            single_branch_role: BranchRole::Disfluent,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.head.validate()?;
        if !matches!(self.disfluent_classes, 4 | 5) {
            return Err(Error::Config(format!(
                "disfluent_classes must be 4 or 5, got {}",
                self.disfluent_classes
            )));
        }
        if self.kind == VariantKind::MultiContext && self.encoder.context != Context::C5 {
            return Err(Error::Config(
                "multi-context wiring fixes the encoder contexts to C5 and C9; set context to c5"
                    .into(),
            ));
        }
        Ok(())
    }

    pub fn contexts(&self) -> Vec<Context> {
        match self.kind {
            VariantKind::MultiContext => vec![Context::C5, Context::C9],
            _ => vec![self.encoder.context],
        }
    }

    pub fn has_fluent_head(&self) -> bool {
        match self.kind {
            VariantKind::SingleBranch => self.single_branch_role == BranchRole::Fluent,
            _ => true,
        }
    }

    pub fn has_disfluent_head(&self) -> bool {
        match self.kind {
            VariantKind::SingleBranch => self.single_branch_role == BranchRole::Disfluent,
            _ => true,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.contexts().len() * self.encoder.pooled_dim()
    }

    /// Largest total context over this variant's encoders.
    pub fn total_context(&self) -> usize {
        self.contexts()
            .iter()
            .map(|c| {
                EncoderConfig {
                    context: *c,
                    ..self.encoder.clone()
                }
                .total_context()
            })
            .max()
            .expect("at least one encoder")
    }

    /// Minimum input frames for a well-defined forward: the widest encoder's
    /// total context plus one extra frame so pooling sees at least 2.
    pub fn min_frames(&self) -> usize {
        self.total_context() + 1
    }
}

/// Parameter groups that can be excluded from optimization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FreezeMask {
    pub encoder: bool,
    pub fluent_branch: bool,
    pub disfluent_branch: bool,
}

impl FreezeMask {
    pub fn none() -> Self {
        FreezeMask::default()
    }

    pub fn any(&self) -> bool {
        self.encoder || self.fluent_branch || self.disfluent_branch
    }

    /// Whether the parameter at `path` belongs to a frozen group.
    pub fn path_frozen(&self, path: &str) -> bool {
        if path.starts_with("enc") {
            self.encoder
        } else if path.starts_with("fluent") {
            self.fluent_branch
        } else if path.starts_with("disfluent") {
            self.disfluent_branch
        } else {
            false
        }
    }
}

/// Raw head outputs (pre-softmax).
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub fluent: Option<Array2<f64>>,
    pub disfluent: Option<Array2<f64>>,
}

impl ModelOutput {
    pub fn fluent_probs(&self) -> Option<Array2<f64>> {
        self.fluent.as_ref().map(loss::softmax)
    }

    pub fn disfluent_probs(&self) -> Option<Array2<f64>> {
        self.disfluent.as_ref().map(loss::softmax)
    }
}

/// A tensor snapshot used by checkpoints and transplants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Parameter totals per top-level component.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ParamCountReport {
    pub per_component: BTreeMap<String, usize>,
    pub total: usize,
}

pub struct Model {
    cfg: ModelConfig,
    encoders: Vec<ContextEncoder>,
    fluent: Option<BranchHead>,
    disfluent: Option<BranchHead>,
    freeze: FreezeMask,
}

impl Model {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Model> {
        cfg.validate()?;
        let mut encoders = Vec::new();
        for ctx in cfg.contexts() {
            let enc_cfg = EncoderConfig {
                context: ctx,
                ..cfg.encoder.clone()
            };
            encoders.push(ContextEncoder::new(enc_cfg, rng)?);
        }
        let emb = cfg.embedding_dim();
        let fluent = cfg
            .has_fluent_head()
            .then(|| BranchHead::new(emb, &cfg.head, 2, rng));
        let disfluent = cfg
            .has_disfluent_head()
            .then(|| BranchHead::new(emb, &cfg.head, cfg.disfluent_classes, rng));
        Ok(Model {
            cfg: cfg.clone(),
            encoders,
            fluent,
            disfluent,
            freeze: FreezeMask::none(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn freeze_mask(&self) -> FreezeMask {
        self.freeze
    }

    pub fn embedding_dim(&self) -> usize {
        self.cfg.embedding_dim()
    }

    /// Marks parameter groups as frozen. Frozen groups run in evaluation
    /// mode during training (fixed batch-norm statistics, no dropout) and
    /// are excluded from optimizer updates; forward semantics in `Eval`
    /// mode are unchanged.
    pub fn apply_freeze(&mut self, mask: FreezeMask) -> Result<()> {
        if mask.fluent_branch && self.fluent.is_none() {
            return Err(Error::Config(
                "cannot freeze fluent branch: this variant has none".into(),
            ));
        }
        if mask.disfluent_branch && self.disfluent.is_none() {
            return Err(Error::Config(
                "cannot freeze disfluent branch: this variant has none".into(),
            ));
        }
        self.freeze = mask;
        Ok(())
    }

    fn check_input(&self, x: &Array3<f64>) -> Result<()> {
        let (_, t, d) = x.dim();
        if d != self.cfg.encoder.feat_dim {
            return Err(Error::Shape(format!(
                "feature dim {d}, model expects {}",
                self.cfg.encoder.feat_dim
            )));
        }
        let tc = self.cfg.total_context();
        if t < tc {
            return Err(Error::Shape(format!(
                "input too short: {t} frames < total context {tc}"
            )));
        }
        if t < self.cfg.min_frames() {
            return Err(Error::Shape(format!(
                "pooling degenerate: {t} frames leave a single pooled frame; need at least {}",
                self.cfg.min_frames()
            )));
        }
        Ok(())
    }

    /// Forward over a `(B, T, feat_dim)` batch. In `Train` mode, activations
    /// are cached wherever a later `backward` needs them; frozen groups run
    /// in evaluation mode regardless.
    pub fn forward(
        &mut self,
        x: &Array3<f64>,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<ModelOutput> {
        self.check_input(x)?;
        let b = x.dim().0;
        let train = mode == Mode::Train;

        let enc_mode = if self.freeze.encoder { Mode::Eval } else { mode };
        let enc_cache = train && !self.freeze.encoder;
        let mut embedding = Array2::zeros((b, self.embedding_dim()));
        let mut off = 0;
        for enc in &mut self.encoders {
            let w = enc.pooled_dim();
            let pooled = enc.forward(x, enc_mode, enc_cache);
            embedding.slice_mut(s![.., off..off + w]).assign(&pooled);
            off += w;
        }

        let freeze = self.freeze;
        let run_head = |head: &mut BranchHead, frozen: bool, rng: &mut ChaCha8Rng| {
            let head_mode = if frozen { Mode::Eval } else { mode };
            let head_cache = train && !(frozen && freeze.encoder);
            head.forward(&embedding, head_mode, head_cache, rng)
        };
        let fluent = self
            .fluent
            .as_mut()
            .map(|h| run_head(h, freeze.fluent_branch, rng));
        let disfluent = self
            .disfluent
            .as_mut()
            .map(|h| run_head(h, freeze.disfluent_branch, rng));
        Ok(ModelOutput { fluent, disfluent })
    }

    /// Backward from per-head logit gradients. Branches that are frozen
    /// together with the encoder are skipped outright (nothing below them is
    /// trainable); a frozen encoder receives no gradients at all.
    pub fn backward(&mut self, d_fluent: Option<&Array2<f64>>, d_disfluent: Option<&Array2<f64>>) {
        let b = d_fluent
            .or(d_disfluent)
            .expect("backward needs at least one head gradient")
            .dim()
            .0;
        let mut d_emb = Array2::zeros((b, self.embedding_dim()));
        if let (Some(head), Some(dl)) = (self.fluent.as_mut(), d_fluent) {
            if !(self.freeze.fluent_branch && self.freeze.encoder) {
                d_emb += &head.backward(dl);
            }
        }
        if let (Some(head), Some(dl)) = (self.disfluent.as_mut(), d_disfluent) {
            if !(self.freeze.disfluent_branch && self.freeze.encoder) {
                d_emb += &head.backward(dl);
            }
        }
        if !self.freeze.encoder {
            let mut off = 0;
            for enc in &mut self.encoders {
                let w = enc.pooled_dim();
                let slice = d_emb.slice(s![.., off..off + w]).to_owned();
                enc.backward(&slice);
                off += w;
            }
        }
    }

    /// Pre-pooling TDNN-stack output of one encoder, in evaluation mode;
    /// the receptive-field probe works on this.
    pub fn tdnn_stack_output(&mut self, encoder_idx: usize, x: &Array3<f64>) -> Array3<f64> {
        self.encoders[encoder_idx].tdnn_forward(x, Mode::Eval, false)
    }

    pub fn n_encoders(&self) -> usize {
        self.encoders.len()
    }

    pub fn param_count(&mut self) -> ParamCountReport {
        let mut per_component: BTreeMap<String, usize> = BTreeMap::new();
        let mut total = 0;
        self.visit_params("", &mut |p| {
            let component = p.path.split('.').next().unwrap_or("").to_string();
            *per_component.entry(component).or_insert(0) += p.data.len();
            total += p.data.len();
        });
        ParamCountReport {
            per_component,
            total,
        }
    }

    pub fn export_params(&mut self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        self.visit_params("", &mut |p| {
            out.insert(
                p.path.clone(),
                Tensor {
                    shape: p.shape.clone(),
                    data: p.data.to_vec(),
                },
            );
        });
        out
    }

    pub fn export_buffers(&mut self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        self.visit_buffers("", &mut |b| {
            out.insert(
                b.path.clone(),
                Tensor {
                    shape: b.shape.clone(),
                    data: b.data.to_vec(),
                },
            );
        });
        out
    }

    /// Loads a complete parameter set: every model parameter must be present
    /// with a matching shape and no extras may remain. Offending keys are
    /// listed in the error.
    pub fn import_params(&mut self, src: &BTreeMap<String, Tensor>) -> Result<()> {
        self.import_map(src, true, false)
    }

    pub fn import_buffers(&mut self, src: &BTreeMap<String, Tensor>) -> Result<()> {
        self.import_map(src, true, true)
    }

    /// Loads a subset of parameters and buffers from a donor model (the
    /// pretrain-transplant path). Every donor key must exist here with a
    /// matching shape; parameters this model has but the donor lacks stay at
    /// their fresh initialization.
    pub fn transplant(
        &mut self,
        params: &BTreeMap<String, Tensor>,
        buffers: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        self.import_map(params, false, false)?;
        self.import_map(buffers, false, true)
    }

    fn import_map(
        &mut self,
        src: &BTreeMap<String, Tensor>,
        complete: bool,
        buffers: bool,
    ) -> Result<()> {
        let mut offending: Vec<String> = Vec::new();
        let mut consumed: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();
        let mut apply = |path: &str, shape: &[usize], data: &mut [f64]| match src.get(path) {
            Some(t) if t.shape == shape => {
                data.copy_from_slice(&t.data);
                consumed.insert(path.to_string());
            }
            Some(t) => {
                offending.push(format!("{path} (shape {:?} vs {:?})", t.shape, shape));
                consumed.insert(path.to_string());
            }
            None => {
                if complete {
                    offending.push(format!("{path} (missing)"));
                }
            }
        };
        if buffers {
            self.visit_buffers("", &mut |b| apply(&b.path, &b.shape, b.data));
        } else {
            self.visit_params("", &mut |p| apply(&p.path, &p.shape, p.data));
        }
        for key in src.keys() {
            if !consumed.contains(key) {
                offending.push(format!("{key} (no such parameter here)"));
            }
        }
        if offending.is_empty() {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "incompatible parameter set: {}",
                offending.join(", ")
            )))
        }
    }
}

impl Visit for Model {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamRef<'_>)) {
        for (i, enc) in self.encoders.iter_mut().enumerate() {
            enc.visit_params(&crate::nn::join_path(prefix, &format!("enc{i}")), f);
        }
        if let Some(h) = self.fluent.as_mut() {
            h.visit_params(&crate::nn::join_path(prefix, "fluent"), f);
        }
        if let Some(h) = self.disfluent.as_mut() {
            h.visit_params(&crate::nn::join_path(prefix, "disfluent"), f);
        }
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(crate::nn::BufRef<'_>)) {
        for (i, enc) in self.encoders.iter_mut().enumerate() {
            enc.visit_buffers(&crate::nn::join_path(prefix, &format!("enc{i}")), f);
        }
        if let Some(h) = self.fluent.as_mut() {
            h.visit_buffers(&crate::nn::join_path(prefix, "fluent"), f);
        }
        if let Some(h) = self.disfluent.as_mut() {
            h.visit_buffers(&crate::nn::join_path(prefix, "disfluent"), f);
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::rng::rng_for;
    use ndarray::Array3;
    use rand::Rng;

    /// Small dims so tests stay fast; contexts and wiring are the real ones.
    pub(crate) fn tiny_config(kind: VariantKind) -> ModelConfig {
        ModelConfig {
            kind,
            encoder: EncoderConfig {
                context: Context::C5,
                feat_dim: 6,
                tdnn_dims: [5, 5, 5, 5, 6],
                bilstm_hidden: 3,
                bilstm_layers: 1,
            },
            head: HeadConfig {
                hidden: [4, 4],
                dropout: 0.0,
            },
            disfluent_classes: 5,
            single_branch_role: BranchRole::Disfluent,
        }
    }

    fn random_input(b: usize, t: usize, d: usize, seed: u64) -> Array3<f64> {
        let mut rng = rng_for(seed, "model-in", 0);
        Array3::from_shape_fn((b, t, d), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn context_receptive_fields() {
        let c5 = EncoderConfig::default();
        assert_eq!(c5.half_width(), 7);
        assert_eq!(c5.total_context(), 15);
        let c9 = EncoderConfig {
            context: Context::C9,
            ..EncoderConfig::default()
        };
        assert_eq!(c9.half_width(), 9);
        assert_eq!(c9.total_context(), 19);
        // 299 input frames -> 285 valid frames for C5.
        assert_eq!(c5.out_frames(299), Some(285));
    }

    #[test]
    fn layer_spec_invariants_enforced() {
        let ok = TdnnLayerSpec {
            in_dim: 4,
            out_dim: 4,
            taps: vec![-2, 0, 2],
        };
        assert!(ok.validate(2).is_ok());
        let asym = TdnnLayerSpec {
            in_dim: 4,
            out_dim: 4,
            taps: vec![-1, 0, 2],
        };
        assert!(asym.validate(2).is_err());
        let wide5 = TdnnLayerSpec {
            in_dim: 4,
            out_dim: 4,
            taps: vec![-1, 0, 1],
        };
        assert!(wide5.validate(5).is_err());
    }

    #[test]
    fn default_dims_match_the_architecture_table() {
        let mut rng = rng_for(1, "model", 0);
        let mut model = Model::new(&ModelConfig::default(), &mut rng).unwrap();
        // MC: two encoders, each pooling 2*(2*64) = 256; embedding 512.
        assert_eq!(model.n_encoders(), 2);
        assert_eq!(model.embedding_dim(), 512);

        let report = model.param_count();
        // C5 TDNN1: 64 x (20 x 5 taps) weights + 64 biases = 6464.
        let mut tdnn1 = 0;
        model.visit_params("", &mut |p| {
            if p.path.starts_with("enc0.tdnn1.") {
                tdnn1 += p.data.len();
            }
        });
        assert_eq!(tdnn1, 6464);
        assert_eq!(
            report.total,
            report.per_component.values().sum::<usize>()
        );
        assert!(report.per_component.contains_key("enc1"));

        // MB embedding is the single C5 pooled vector.
        let mb = ModelConfig {
            kind: VariantKind::MultiBranch,
            ..ModelConfig::default()
        };
        assert_eq!(mb.embedding_dim(), 256);
    }

    #[test]
    fn doubling_hidden_width_increases_param_count() {
        let mut rng = rng_for(2, "model", 0);
        let small = tiny_config(VariantKind::SingleBranch);
        let mut big = small.clone();
        big.encoder.bilstm_hidden *= 2;
        let n_small = Model::new(&small, &mut rng).unwrap().param_count().total;
        let n_big = Model::new(&big, &mut rng).unwrap().param_count().total;
        assert!(n_big > n_small);
    }

    #[test]
    fn multicontext_count_composes_from_parts() {
        let mut rng = rng_for(3, "model", 0);
        let mc_cfg = tiny_config(VariantKind::MultiContext);
        let mut mc = Model::new(&mc_cfg, &mut rng).unwrap();
        let report = mc.param_count();

        // Encoder components must equal single-context encoder counts.
        for (i, ctx) in [Context::C5, Context::C9].iter().enumerate() {
            let enc_cfg = EncoderConfig {
                context: *ctx,
                ..mc_cfg.encoder.clone()
            };
            let mut enc = ContextEncoder::new(enc_cfg, &mut rng).unwrap();
            let mut n = 0;
            enc.visit_params("", &mut |p| n += p.data.len());
            assert_eq!(report.per_component[&format!("enc{i}")], n);
        }
        assert_eq!(report.total, report.per_component.values().sum::<usize>());
    }

    #[test]
    fn heads_emit_valid_distributions_for_every_variant() {
        for kind in [
            VariantKind::SingleBranch,
            VariantKind::MultiBranch,
            VariantKind::MultiContext,
        ] {
            let cfg = tiny_config(kind);
            let mut rng = rng_for(4, "model", 0);
            let mut model = Model::new(&cfg, &mut rng).unwrap();
            let x = random_input(3, cfg.min_frames() + 4, 6, 7);
            let out = model.forward(&x, Mode::Eval, &mut rng).unwrap();
            for probs in [out.fluent_probs(), out.disfluent_probs()]
                .into_iter()
                .flatten()
            {
                for row in probs.rows() {
                    assert!((row.sum() - 1.0).abs() < 1e-6);
                    assert!(row.iter().all(|v| *v >= 0.0));
                }
            }
            match kind {
                VariantKind::SingleBranch => {
                    assert!(out.fluent.is_none());
                    assert_eq!(out.disfluent.as_ref().unwrap().ncols(), 5);
                }
                _ => {
                    assert_eq!(out.fluent.as_ref().unwrap().ncols(), 2);
                    assert_eq!(out.disfluent.as_ref().unwrap().ncols(), 5);
                }
            }
        }
    }

    #[test]
    fn short_inputs_error_distinctly() {
        let cfg = tiny_config(VariantKind::SingleBranch);
        let mut rng = rng_for(5, "model", 0);
        let mut model = Model::new(&cfg, &mut rng).unwrap();
        // Total context is 15: 14 frames -> too short, 15 -> degenerate pooling.
        let err = model
            .forward(&random_input(1, 14, 6, 1), Mode::Eval, &mut rng)
            .unwrap_err();
        assert!(err.to_string().contains("too short"), "{err}");
        let err = model
            .forward(&random_input(1, 15, 6, 1), Mode::Eval, &mut rng)
            .unwrap_err();
        assert!(err.to_string().contains("pooling degenerate"), "{err}");
        assert!(model
            .forward(&random_input(1, 16, 6, 1), Mode::Eval, &mut rng)
            .is_ok());
    }

    #[test]
    fn stat_pool_helper_contract() {
        // Constant sequence -> [v, 0].
        let seq = Array2::from_elem((5, 2), 3.0);
        let pooled = stat_pool(&seq).unwrap();
        assert_eq!(pooled, vec![3.0, 3.0, 0.0, 0.0]);

        // Permutation invariance.
        let mut rng = rng_for(6, "model", 0);
        let seq = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
        let mut perm = seq.clone();
        perm.swap((0, 0), (3, 0));
        perm.swap((0, 1), (3, 1));
        perm.swap((0, 2), (3, 2));
        let a = stat_pool(&seq).unwrap();
        let b = stat_pool(&perm).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }

        // Two-pass oracle on a 4-frame sequence.
        for d in 0..3 {
            let col: Vec<f64> = (0..4).map(|t| seq[[t, d]]).collect();
            let mean = col.iter().sum::<f64>() / 4.0;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!((a[d] - mean).abs() < 1e-6);
            assert!((a[3 + d] - var.sqrt()).abs() < 1e-6);
        }

        assert!(stat_pool(&Array2::zeros((1, 2))).is_err());
    }

    #[test]
    fn batch_of_one_matches_batch_row_in_eval_mode() {
        let cfg = tiny_config(VariantKind::MultiBranch);
        let mut rng = rng_for(7, "model", 0);
        let mut model = Model::new(&cfg, &mut rng).unwrap();
        let x = random_input(4, 20, 6, 11);
        let full = model.forward(&x, Mode::Eval, &mut rng).unwrap();
        for i in 0..4 {
            let xi = x.slice(s![i..i + 1, .., ..]).to_owned();
            let one = model.forward(&xi, Mode::Eval, &mut rng).unwrap();
            let (a, b) = (one.disfluent.unwrap(), full.disfluent.as_ref().unwrap());
            for j in 0..5 {
                assert!((a[[0, j]] - b[[i, j]]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn freeze_mask_validation_and_path_mapping() {
        let cfg = tiny_config(VariantKind::SingleBranch);
        let mut rng = rng_for(8, "model", 0);
        let mut model = Model::new(&cfg, &mut rng).unwrap();
        // SingleBranch has no fluent head.
        let bad = FreezeMask {
            fluent_branch: true,
            ..FreezeMask::none()
        };
        assert!(model.apply_freeze(bad).is_err());
        let ok = FreezeMask {
            encoder: true,
            disfluent_branch: true,
            ..FreezeMask::none()
        };
        model.apply_freeze(ok).unwrap();
        assert!(ok.path_frozen("enc0.tdnn1.w"));
        assert!(ok.path_frozen("enc1.lstm.l0.fwd.w_ih"));
        assert!(ok.path_frozen("disfluent.fc3.b"));
        assert!(!ok.path_frozen("fluent.fc1.w"));
    }

    #[test]
    fn freezing_does_not_change_eval_forward() {
        let cfg = tiny_config(VariantKind::MultiBranch);
        let mut rng = rng_for(9, "model", 0);
        let mut model = Model::new(&cfg, &mut rng).unwrap();
        let x = random_input(2, 20, 6, 3);
        let before = model.forward(&x, Mode::Eval, &mut rng).unwrap();
        model
            .apply_freeze(FreezeMask {
                encoder: true,
                fluent_branch: true,
                disfluent_branch: false,
            })
            .unwrap();
        let after = model.forward(&x, Mode::Eval, &mut rng).unwrap();
        assert_eq!(before.disfluent, after.disfluent);
        assert_eq!(before.fluent, after.fluent);
    }

    #[test]
    fn export_import_round_trips() {
        let cfg = tiny_config(VariantKind::MultiBranch);
        let mut rng = rng_for(10, "model", 0);
        let mut a = Model::new(&cfg, &mut rng).unwrap();
        let mut b = Model::new(&cfg, &mut rng).unwrap(); // different init

        let x = random_input(2, 20, 6, 5);
        let out_a = a.forward(&x, Mode::Eval, &mut rng).unwrap();

        b.import_params(&a.export_params()).unwrap();
        b.import_buffers(&a.export_buffers()).unwrap();
        let out_b = b.forward(&x, Mode::Eval, &mut rng).unwrap();
        assert_eq!(out_a.disfluent, out_b.disfluent);
        assert_eq!(out_a.fluent, out_b.fluent);
    }

    #[test]
    fn incompatible_imports_list_offending_keys() {
        let mut rng = rng_for(11, "model", 0);
        let mut mb =
            Model::new(&tiny_config(VariantKind::MultiBranch), &mut rng).unwrap();
        let mut mc =
            Model::new(&tiny_config(VariantKind::MultiContext), &mut rng).unwrap();
        // MB head input is half of MC's: head fc1 shapes clash, and MC has
        // enc1 keys MB lacks.
        let err = mb
            .transplant(&mc.export_params(), &mc.export_buffers())
            .unwrap_err()
            .to_string();
        assert!(err.contains("disfluent.fc1.w"), "{err}");
        assert!(err.contains("enc1."), "{err}");
    }

    #[test]
    fn transplant_preserves_donor_branch_outputs() {
        let mut rng = rng_for(12, "model", 0);
        // Donor: single-branch encoder + 5-class head, as after pretraining.
        let donor_cfg = tiny_config(VariantKind::SingleBranch);
        let mut donor = Model::new(&donor_cfg, &mut rng).unwrap();
        let x = random_input(2, 20, 6, 6);
        let donor_out = donor.forward(&x, Mode::Eval, &mut rng).unwrap();

        let mut target =
            Model::new(&tiny_config(VariantKind::MultiBranch), &mut rng).unwrap();
        target
            .transplant(&donor.export_params(), &donor.export_buffers())
            .unwrap();
        let target_out = target.forward(&x, Mode::Eval, &mut rng).unwrap();
        let (a, b) = (donor_out.disfluent.unwrap(), target_out.disfluent.unwrap());
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        // The fresh fluent head exists and emits 2 classes.
        assert_eq!(target_out.fluent.unwrap().ncols(), 2);
    }

    #[test]
    fn gradients_match_finite_differences_end_to_end() {
        use crate::nn::gradcheck::check_param_grads;
        let cfg = tiny_config(VariantKind::MultiBranch);
        let mut rng = rng_for(13, "model", 0);
        let mut model = Model::new(&cfg, &mut rng).unwrap();
        let x = random_input(2, 17, 6, 8);
        let proj_f = Array2::from_shape_fn((2, 2), |_| {
            rng_for(14, "proj", 0).random_range(-1.0..1.0)
        });
        let mut prng = rng_for(15, "proj", 1);
        let proj_d = Array2::from_shape_fn((2, 5), |_| prng.random_range(-1.0..1.0));

        model.zero_grads();
        let mut drng = rng_for(16, "drop", 0);
        model.forward(&x, Mode::Train, &mut drng).unwrap();
        model.backward(Some(&proj_f), Some(&proj_d));

        let proj_f2 = proj_f.clone();
        let proj_d2 = proj_d.clone();
        let x2 = x.clone();
        check_param_grads(
            &mut model,
            move |m| {
                let mut r = rng_for(16, "drop", 0);
                let out = m.forward(&x2, Mode::Train, &mut r).unwrap();
                (out.fluent.as_ref().unwrap() * &proj_f2).sum()
                    + (out.disfluent.as_ref().unwrap() * &proj_d2).sum()
            },
            1e-5,
            2e-5,
        );
    }
}
