//! C ABI for the stutterkit toolkit.
//!
//! The surface is a thin shim over the Rust crate: opaque handles, integer
//! status codes, and a header generated by cbindgen into
//! `include/stutterkit.h` at build time.
//!
//! Conventions, uniform across the API:
//!
//! - Constructors write a handle through an `out` pointer and return
//!   `SkStatus::Ok`; each handle is released with its matching
//!   `sk_*_free`, and freeing a null handle is a no-op.
//! - On failure the function returns a status code and stores a message
//!   retrievable with `sk_last_error_message`. The message is
//!   thread-local and stays valid until the next failing call on the same
//!   thread.
//! - Pointer arguments must be non-null unless documented otherwise; null
//!   is reported as `SkStatus::NullArgument`, never dereferenced.
//! - Panics never unwind across the boundary: they are caught and reported
//!   as `SkStatus::Panic`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use ndarray::Array3;
use stutterkit::audio::{load_audio, Waveform};
use stutterkit::config::config_hash;
use stutterkit::dataset::{parse_manifest, weights_from_counts, N_CLASSES};
use stutterkit::features::{read_skft, write_skft, FeatureConfig, FeatureMatrix, MfccExtractor};
use stutterkit::model::checkpoint::Checkpoint;
use stutterkit::model::Model;
use stutterkit::nn::Mode;
use stutterkit::rng::rng_for;
use stutterkit::train::{evaluate_model, predict_row, report_classes, FeatureStore};
use stutterkit::Error;

/// Status code returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkStatus {
    /// Success.
    Ok = 0,
    /// Invalid configuration or argument values.
    Config = 1,
    /// Tensor or feature dimensions do not fit together.
    Shape = 2,
    /// Filesystem failure.
    Io = 3,
    /// Audio that cannot be decoded or violates format requirements.
    Audio = 4,
    /// Manifest, label, checkpoint, or other data-level problem.
    Data = 5,
    /// Numeric breakdown (non-finite values).
    Numeric = 6,
    /// A required pointer argument was null.
    NullArgument = 7,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 8,
    /// An internal panic was caught at the boundary.
    Panic = 9,
}

/// Decoded audio: mono `f64` samples at a fixed sample rate.
pub struct SkWaveform(Waveform);

/// An MFCC matrix (`n_frames x n_coeffs`, row-major).
pub struct SkFeatures(FeatureMatrix);

/// A restored model plus the evaluation-mode RNG it runs with.
pub struct SkModel {
    model: Model,
    rng: rand_chacha::ChaCha8Rng,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &Error) -> SkStatus {
    match err {
        Error::Config(_) => SkStatus::Config,
        Error::Shape(_) => SkStatus::Shape,
        Error::Io { .. } => SkStatus::Io,
        Error::Audio(_) => SkStatus::Audio,
        Error::Data(_) => SkStatus::Data,
        Error::Numeric(_) => SkStatus::Numeric,
    }
}

fn fail(err: &Error) -> SkStatus {
    set_error(&err.to_string());
    status_of(err)
}

/// Runs `f` with panics confined to this side of the boundary.
fn guarded(f: impl FnOnce() -> SkStatus) -> SkStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic with non-string payload".to_string());
            set_error(&format!("internal panic: {msg}"));
            SkStatus::Panic
        }
    }
}

/// # Safety
/// `ptr` must be null or a NUL-terminated string.
unsafe fn str_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, SkStatus> {
    if ptr.is_null() {
        set_error(&format!("{what} must not be null"));
        return Err(SkStatus::NullArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error(&format!("{what} is not valid UTF-8"));
        SkStatus::InvalidUtf8
    })
}

fn out_arg<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, SkStatus> {
    if ptr.is_null() {
        set_error(&format!("{what} must not be null"));
        return Err(SkStatus::NullArgument);
    }
    Ok(unsafe { &mut *ptr })
}

fn handle_arg<'a, T>(ptr: *const T, what: &str) -> Result<&'a T, SkStatus> {
    if ptr.is_null() {
        set_error(&format!("{what} must not be null"));
        return Err(SkStatus::NullArgument);
    }
    Ok(unsafe { &*ptr })
}

/// Rewrites the matrix into contiguous row-major storage so that
/// `sk_features_data` can hand out a flat slice.
fn standardized(f: FeatureMatrix) -> FeatureMatrix {
    FeatureMatrix {
        values: f.values.as_standard_layout().into_owned(),
        frame_hop_ms: f.frame_hop_ms,
    }
}

/// Library version as a static NUL-terminated string; never freed.
#[no_mangle]
pub extern "C" fn sk_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message from the most recent failure on this thread (empty string if
/// none yet). Owned by the library: do not free; copy it out before the
/// next failing call.
#[no_mangle]
pub extern "C" fn sk_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Frees a string returned through a `char **out` parameter.
///
/// # Safety
/// `s` must be null or a string obtained from this library.
#[no_mangle]
pub unsafe extern "C" fn sk_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

// ---------------------------------------------------------------------------
// Waveforms
// ---------------------------------------------------------------------------

/// Loads a WAV file, downmixing to mono and resampling to `target_rate`
/// (pass 0 for the native 16 kHz pipeline rate).
///
/// # Safety
/// `path` must be NUL-terminated; `out` must point to writable storage.
#[no_mangle]
pub unsafe extern "C" fn sk_waveform_load(
    path: *const c_char,
    target_rate: u32,
    out: *mut *mut SkWaveform,
) -> SkStatus {
    guarded(|| {
        let out = match out_arg(out, "out") {
            Ok(o) => o,
            Err(s) => return s,
        };
        let path = match str_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let rate = if target_rate == 0 { 16_000 } else { target_rate };
        match load_audio(Path::new(path), rate) {
            Ok(w) => {
                *out = Box::into_raw(Box::new(SkWaveform(w)));
                SkStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Wraps caller-provided samples (copied) as a waveform.
///
/// # Safety
/// `samples` must point to `len` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sk_waveform_from_samples(
    samples: *const f64,
    len: usize,
    sample_rate: u32,
    out: *mut *mut SkWaveform,
) -> SkStatus {
    guarded(|| {
        let out = match out_arg(out, "out") {
            Ok(o) => o,
            Err(s) => return s,
        };
        if samples.is_null() && len > 0 {
            set_error("samples must not be null when len > 0");
            return SkStatus::NullArgument;
        }
        if sample_rate == 0 {
            set_error("sample_rate must be positive");
            return SkStatus::Config;
        }
        let copied = if len == 0 {
            Vec::new()
        } else {
            std::slice::from_raw_parts(samples, len).to_vec()
        };
        *out = Box::into_raw(Box::new(SkWaveform(Waveform::new(copied, sample_rate))));
        SkStatus::Ok
    })
}

/// Number of samples; 0 for a null handle.
#[no_mangle]
pub extern "C" fn sk_waveform_len(w: *const SkWaveform) -> usize {
    match handle_arg(w, "waveform") {
        Ok(w) => w.0.samples.len(),
        Err(_) => 0,
    }
}

/// Sample rate in Hz; 0 for a null handle.
#[no_mangle]
pub extern "C" fn sk_waveform_sample_rate(w: *const SkWaveform) -> u32 {
    match handle_arg(w, "waveform") {
        Ok(w) => w.0.sample_rate,
        Err(_) => 0,
    }
}

/// Borrowed pointer to the sample buffer (length `sk_waveform_len`);
/// valid until the handle is freed. Null for a null handle.
#[no_mangle]
pub extern "C" fn sk_waveform_samples(w: *const SkWaveform) -> *const f64 {
    match handle_arg(w, "waveform") {
        Ok(w) => w.0.samples.as_ptr(),
        Err(_) => std::ptr::null(),
    }
}

/// Releases a waveform handle.
///
/// # Safety
/// `w` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sk_waveform_free(w: *mut SkWaveform) {
    if !w.is_null() {
        drop(Box::from_raw(w));
    }
}

// ---------------------------------------------------------------------------
// Features
// ---------------------------------------------------------------------------

/// Computes MFCC features for a waveform. `config_json` configures the
/// front end (same schema as the `features` section of a run config, all
/// fields optional); pass null for the defaults.
///
/// # Safety
/// `wave` must be a live waveform handle; `config_json` null or
/// NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sk_features_compute(
    wave: *const SkWaveform,
    config_json: *const c_char,
    out: *mut *mut SkFeatures,
) -> SkStatus {
    guarded(|| {
        let out = match out_arg(out, "out") {
            Ok(o) => o,
            Err(s) => return s,
        };
        let wave = match handle_arg(wave, "wave") {
            Ok(w) => w,
            Err(s) => return s,
        };
        let cfg = if config_json.is_null() {
            FeatureConfig::default()
        } else {
            let text = match str_arg(config_json, "config_json") {
                Ok(t) => t,
                Err(s) => return s,
            };
            match serde_json::from_str::<FeatureConfig>(text) {
                Ok(c) => c,
                Err(e) => {
                    set_error(&format!("feature config: {e}"));
                    return SkStatus::Config;
                }
            }
        };
        let result = MfccExtractor::new(cfg).and_then(|ex| ex.mfcc(&wave.0));
        match result {
            Ok(f) => {
                *out = Box::into_raw(Box::new(SkFeatures(standardized(f))));
                SkStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Number of frames (rows); 0 for a null handle.
#[no_mangle]
pub extern "C" fn sk_features_n_frames(f: *const SkFeatures) -> usize {
    match handle_arg(f, "features") {
        Ok(f) => f.0.n_frames(),
        Err(_) => 0,
    }
}

/// Number of coefficients per frame (columns); 0 for a null handle.
#[no_mangle]
pub extern "C" fn sk_features_n_coeffs(f: *const SkFeatures) -> usize {
    match handle_arg(f, "features") {
        Ok(f) => f.0.values.ncols(),
        Err(_) => 0,
    }
}

/// Frame hop in milliseconds; NaN for a null handle.
#[no_mangle]
pub extern "C" fn sk_features_frame_hop_ms(f: *const SkFeatures) -> f64 {
    match handle_arg(f, "features") {
        Ok(f) => f.0.frame_hop_ms,
        Err(_) => f64::NAN,
    }
}

/// Borrowed pointer to the row-major `n_frames x n_coeffs` matrix; valid
/// until the handle is freed. Null for a null handle.
#[no_mangle]
pub extern "C" fn sk_features_data(f: *const SkFeatures) -> *const f64 {
    match handle_arg(f, "features") {
        Ok(f) => f
            .0
            .values
            .as_slice()
            .map(|s| s.as_ptr())
            .unwrap_or(std::ptr::null()),
        Err(_) => std::ptr::null(),
    }
}

/// Writes features to the binary `.skft` container.
///
/// # Safety
/// `f` must be a live features handle; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn sk_features_save(f: *const SkFeatures, path: *const c_char) -> SkStatus {
    guarded(|| {
        let f = match handle_arg(f, "features") {
            Ok(f) => f,
            Err(s) => return s,
        };
        let path = match str_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match write_skft(Path::new(path), &f.0) {
            Ok(()) => SkStatus::Ok,
            Err(e) => fail(&e),
        }
    })
}

/// Reads features from a `.skft` file. The container does not store the
/// hop, so the caller supplies `frame_hop_ms`.
///
/// # Safety
/// `path` must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sk_features_load(
    path: *const c_char,
    frame_hop_ms: f64,
    out: *mut *mut SkFeatures,
) -> SkStatus {
    guarded(|| {
        let out = match out_arg(out, "out") {
            Ok(o) => o,
            Err(s) => return s,
        };
        let path = match str_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match read_skft(Path::new(path), frame_hop_ms) {
            Ok(f) => {
                *out = Box::into_raw(Box::new(SkFeatures(standardized(f))));
                SkStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Releases a features handle.
///
/// # Safety
/// `f` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sk_features_free(f: *mut SkFeatures) {
    if !f.is_null() {
        drop(Box::from_raw(f));
    }
}

// ---------------------------------------------------------------------------
// Models
// ---------------------------------------------------------------------------

/// Restores a model from a checkpoint file.
///
/// # Safety
/// `checkpoint_path` must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sk_model_load(
    checkpoint_path: *const c_char,
    out: *mut *mut SkModel,
) -> SkStatus {
    guarded(|| {
        let out = match out_arg(out, "out") {
            Ok(o) => o,
            Err(s) => return s,
        };
        let path = match str_arg(checkpoint_path, "checkpoint_path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let restored = Checkpoint::load(Path::new(path)).and_then(|c| c.restore());
        match restored {
            Ok(model) => {
                // Evaluation mode draws no randomness; the stream only has
                // to exist.
                let rng = rng_for(0, "capi-eval", 0);
                *out = Box::into_raw(Box::new(SkModel { model, rng }));
                SkStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Input feature dimensionality the model expects; 0 for a null handle.
#[no_mangle]
pub extern "C" fn sk_model_feat_dim(m: *const SkModel) -> usize {
    match handle_arg(m, "model") {
        Ok(m) => m.model.config().encoder.feat_dim,
        Err(_) => 0,
    }
}

/// Number of prediction classes; 0 for a null handle.
#[no_mangle]
pub extern "C" fn sk_model_n_classes(m: *const SkModel) -> usize {
    match handle_arg(m, "model") {
        Ok(m) => report_classes(m.model.config()).len(),
        Err(_) => 0,
    }
}

/// Name of prediction class `index` as a static string (never freed);
/// null if the handle is null or the index is out of range.
#[no_mangle]
pub extern "C" fn sk_model_class_name(m: *const SkModel, index: usize) -> *const c_char {
    let model = match handle_arg(m, "model") {
        Ok(m) => m,
        Err(_) => return std::ptr::null(),
    };
    let name = match report_classes(model.model.config()).get(index) {
        Some(n) => *n,
        None => {
            set_error(&format!("class index {index} out of range"));
            return std::ptr::null();
        }
    };
    let c: &CStr = match name {
        "Repetition" => c"Repetition",
        "Prolongation" => c"Prolongation",
        "Block" => c"Block",
        "Interjection" => c"Interjection",
        "Fluent" => c"Fluent",
        _ => c"Disfluent",
    };
    c.as_ptr()
}

/// Classifies one clip: runs the model in evaluation mode on the feature
/// matrix and writes the predicted class index (see
/// `sk_model_class_name`) through `out_class`. Branched variants apply
/// the combined two-head decision rule.
///
/// # Safety
/// `m` and `f` must be live handles; `out_class` writable.
#[no_mangle]
pub unsafe extern "C" fn sk_model_predict(
    m: *mut SkModel,
    f: *const SkFeatures,
    out_class: *mut usize,
) -> SkStatus {
    guarded(|| {
        let out_class = match out_arg(out_class, "out_class") {
            Ok(o) => o,
            Err(s) => return s,
        };
        let handle = match out_arg(m, "model") {
            Ok(h) => h,
            Err(s) => return s,
        };
        let feats = match handle_arg(f, "features") {
            Ok(f) => f,
            Err(s) => return s,
        };
        let feat_dim = handle.model.config().encoder.feat_dim;
        if feats.0.values.ncols() != feat_dim {
            set_error(&format!(
                "feature dimension {} does not match the model's expected {feat_dim}",
                feats.0.values.ncols()
            ));
            return SkStatus::Shape;
        }
        let (t, d) = feats.0.values.dim();
        let x = Array3::from_shape_fn((1, t, d), |(_, i, j)| feats.0.values[[i, j]]);
        let output = match handle.model.forward(&x, Mode::Eval, &mut handle.rng) {
            Ok(o) => o,
            Err(e) => return fail(&e),
        };
        let fluent = output.fluent_probs().map(|p| p.row(0).to_vec());
        let disfluent = output.disfluent_probs().map(|p| p.row(0).to_vec());
        *out_class = predict_row(
            handle.model.config(),
            fluent.as_deref(),
            disfluent.as_deref(),
        );
        SkStatus::Ok
    })
}

/// Releases a model handle.
///
/// # Safety
/// `m` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sk_model_free(m: *mut SkModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

// ---------------------------------------------------------------------------
// Evaluation and class weights
// ---------------------------------------------------------------------------

/// Evaluates a checkpoint over a manifest and returns the run report as a
/// JSON string through `out_report_json` (free with `sk_string_free`).
///
/// Features are extracted on the fly. `feature_config_json` follows the
/// same schema as in `sk_features_compute`; pass null for defaults sized
/// to the model's feature dimension. A config whose coefficient count does
/// not match the model is rejected as `SkStatus::Data`.
///
/// # Safety
/// Path arguments must be NUL-terminated; `feature_config_json` null or
/// NUL-terminated; `out_report_json` writable.
#[no_mangle]
pub unsafe extern "C" fn sk_evaluate_manifest(
    checkpoint_path: *const c_char,
    manifest_path: *const c_char,
    feature_config_json: *const c_char,
    batch_size: usize,
    out_report_json: *mut *mut c_char,
) -> SkStatus {
    guarded(|| {
        let out = match out_arg(out_report_json, "out_report_json") {
            Ok(o) => o,
            Err(s) => return s,
        };
        let ckpt_path = match str_arg(checkpoint_path, "checkpoint_path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let mani_path = match str_arg(manifest_path, "manifest_path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let ckpt = match Checkpoint::load(Path::new(ckpt_path)) {
            Ok(c) => c,
            Err(e) => return fail(&e),
        };
        let feat_cfg = if feature_config_json.is_null() {
            FeatureConfig {
                n_mfcc: ckpt.model.encoder.feat_dim,
                ..FeatureConfig::default()
            }
        } else {
            let text = match str_arg(feature_config_json, "feature_config_json") {
                Ok(t) => t,
                Err(s) => return s,
            };
            match serde_json::from_str::<FeatureConfig>(text) {
                Ok(c) => c,
                Err(e) => {
                    set_error(&format!("feature config: {e}"));
                    return SkStatus::Config;
                }
            }
        };
        if feat_cfg.n_mfcc != ckpt.model.encoder.feat_dim {
            let e = Error::Data(format!(
                "incompatible checkpoint: model expects {}-dim features, extractor is configured for {}",
                ckpt.model.encoder.feat_dim, feat_cfg.n_mfcc
            ));
            return fail(&e);
        }
        let hash = match config_hash(&feat_cfg) {
            Ok(h) => h,
            Err(e) => return fail(&e),
        };
        let run = || -> stutterkit::Result<String> {
            let mut model = ckpt.restore()?;
            let manifest = parse_manifest(Path::new(mani_path))?;
            let store = FeatureStore::new(feat_cfg.clone())?;
            let report = evaluate_model(
                &mut model,
                &store,
                &manifest,
                &hash,
                None,
                batch_size.max(1),
            )?;
            serde_json::to_string_pretty(&report)
                .map_err(|e| Error::Data(format!("report: {e}")))
        };
        match run() {
            Ok(json) => {
                let c = CString::new(json.replace('\0', " ")).unwrap_or_default();
                *out = c.into_raw();
                SkStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Inverse-frequency class weights `w_i = N / (C * N_i)` from per-class
/// sample counts. `n_classes` must be 5, matching the label taxonomy;
/// `out_weights` receives 5 doubles. A zero count is a data error.
///
/// # Safety
/// `counts` must point to `n_classes` readable values; `out_weights` to 5
/// writable doubles.
#[no_mangle]
pub unsafe extern "C" fn sk_class_weights(
    counts: *const u64,
    n_classes: usize,
    out_weights: *mut f64,
) -> SkStatus {
    guarded(|| {
        if counts.is_null() || out_weights.is_null() {
            set_error("counts and out_weights must not be null");
            return SkStatus::NullArgument;
        }
        if n_classes != N_CLASSES {
            set_error(&format!(
                "n_classes must be {N_CLASSES}, got {n_classes}"
            ));
            return SkStatus::Config;
        }
        let raw = std::slice::from_raw_parts(counts, N_CLASSES);
        let mut as_usize = [0usize; N_CLASSES];
        for (dst, &c) in as_usize.iter_mut().zip(raw) {
            *dst = match usize::try_from(c) {
                Ok(v) => v,
                Err(_) => {
                    set_error(&format!("count {c} exceeds the platform word size"));
                    return SkStatus::Config;
                }
            };
        }
        match weights_from_counts(&as_usize) {
            Ok(w) => {
                std::slice::from_raw_parts_mut(out_weights, N_CLASSES).copy_from_slice(&w.w);
                SkStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}
