#ifndef STUTTERKIT_H
#define STUTTERKIT_H

/* Generated by cbindgen from the stutterkit-capi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status code returned by every fallible function.
typedef enum SkStatus {
  // Success.
  SK_STATUS_OK = 0,
  // Invalid configuration or argument values.
  SK_STATUS_CONFIG = 1,
  // Tensor or feature dimensions do not fit together.
  SK_STATUS_SHAPE = 2,
  // Filesystem failure.
  SK_STATUS_IO = 3,
  // Audio that cannot be decoded or violates format requirements.
  SK_STATUS_AUDIO = 4,
  // Manifest, label, checkpoint, or other data-level problem.
  SK_STATUS_DATA = 5,
  // Numeric breakdown (non-finite values).
  SK_STATUS_NUMERIC = 6,
  // A required pointer argument was null.
  SK_STATUS_NULL_ARGUMENT = 7,
  // A string argument was not valid UTF-8.
  SK_STATUS_INVALID_UTF8 = 8,
  // An internal panic was caught at the boundary.
  SK_STATUS_PANIC = 9,
} SkStatus;

// An MFCC matrix (`n_frames x n_coeffs`, row-major).
typedef struct SkFeatures SkFeatures;

// A restored model plus the evaluation-mode RNG it runs with.
typedef struct SkModel SkModel;

// Decoded audio: mono `f64` samples at a fixed sample rate.
typedef struct SkWaveform SkWaveform;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string; never freed.
const char *sk_version(void);

// Message from the most recent failure on this thread (empty string if
// none yet). Owned by the library: do not free; copy it out before the
// next failing call.
const char *sk_last_error_message(void);

// Frees a string returned through a `char **out` parameter.
//
// # Safety
// `s` must be null or a string obtained from this library.
void sk_string_free(char *s);

// Loads a WAV file, downmixing to mono and resampling to `target_rate`
// (pass 0 for the native 16 kHz pipeline rate).
//
// # Safety
// `path` must be NUL-terminated; `out` must point to writable storage.
enum SkStatus sk_waveform_load(const char *path, uint32_t target_rate, struct SkWaveform **out);

// Wraps caller-provided samples (copied) as a waveform.
//
// # Safety
// `samples` must point to `len` readable doubles; `out` must be writable.
enum SkStatus sk_waveform_from_samples(const double *samples,
                                       size_t len,
                                       uint32_t sample_rate,
                                       struct SkWaveform **out);

// Number of samples; 0 for a null handle.
size_t sk_waveform_len(const struct SkWaveform *w);

// Sample rate in Hz; 0 for a null handle.
uint32_t sk_waveform_sample_rate(const struct SkWaveform *w);

// Borrowed pointer to the sample buffer (length `sk_waveform_len`);
// valid until the handle is freed. Null for a null handle.
const double *sk_waveform_samples(const struct SkWaveform *w);

// Releases a waveform handle.
//
// # Safety
// `w` must be null or a handle from this library, not yet freed.
void sk_waveform_free(struct SkWaveform *w);

// Computes MFCC features for a waveform. `config_json` configures the
// front end (same schema as the `features` section of a run config, all
// fields optional); pass null for the defaults.
//
// # Safety
// `wave` must be a live waveform handle; `config_json` null or
// NUL-terminated; `out` writable.
enum SkStatus sk_features_compute(const struct SkWaveform *wave,
                                  const char *config_json,
                                  struct SkFeatures **out);

// Number of frames (rows); 0 for a null handle.
size_t sk_features_n_frames(const struct SkFeatures *f);

// Number of coefficients per frame (columns); 0 for a null handle.
size_t sk_features_n_coeffs(const struct SkFeatures *f);

// Frame hop in milliseconds; NaN for a null handle.
double sk_features_frame_hop_ms(const struct SkFeatures *f);

// Borrowed pointer to the row-major `n_frames x n_coeffs` matrix; valid
// until the handle is freed. Null for a null handle.
const double *sk_features_data(const struct SkFeatures *f);

// Writes features to the binary `.skft` container.
//
// # Safety
// `f` must be a live features handle; `path` NUL-terminated.
enum SkStatus sk_features_save(const struct SkFeatures *f, const char *path);

// Reads features from a `.skft` file. The container does not store the
// hop, so the caller supplies `frame_hop_ms`.
//
// # Safety
// `path` must be NUL-terminated; `out` writable.
enum SkStatus sk_features_load(const char *path, double frame_hop_ms, struct SkFeatures **out);

// Releases a features handle.
//
// # Safety
// `f` must be null or a handle from this library, not yet freed.
void sk_features_free(struct SkFeatures *f);

// Restores a model from a checkpoint file.
//
// # Safety
// `checkpoint_path` must be NUL-terminated; `out` writable.
enum SkStatus sk_model_load(const char *checkpoint_path, struct SkModel **out);

// Input feature dimensionality the model expects; 0 for a null handle.
size_t sk_model_feat_dim(const struct SkModel *m);

// Number of prediction classes; 0 for a null handle.
size_t sk_model_n_classes(const struct SkModel *m);

// Name of prediction class `index` as a static string (never freed);
// null if the handle is null or the index is out of range.
const char *sk_model_class_name(const struct SkModel *m, size_t index);

// Classifies one clip: runs the model in evaluation mode on the feature
// matrix and writes the predicted class index (see
// `sk_model_class_name`) through `out_class`. Branched variants apply
// the combined two-head decision rule.
//
// # Safety
// `m` and `f` must be live handles; `out_class` writable.
enum SkStatus sk_model_predict(struct SkModel *m, const struct SkFeatures *f, size_t *out_class);

// Releases a model handle.
//
// # Safety
// `m` must be null or a handle from this library, not yet freed.
void sk_model_free(struct SkModel *m);

// Evaluates a checkpoint over a manifest and returns the run report as a
// JSON string through `out_report_json` (free with `sk_string_free`).
//
// Features are extracted on the fly. `feature_config_json` follows the
// same schema as in `sk_features_compute`; pass null for defaults sized
// to the model's feature dimension. A config whose coefficient count does
// not match the model is rejected as `SkStatus::Data`.
//
// # Safety
// Path arguments must be NUL-terminated; `feature_config_json` null or
// NUL-terminated; `out_report_json` writable.
enum SkStatus sk_evaluate_manifest(const char *checkpoint_path,
                                   const char *manifest_path,
                                   const char *feature_config_json,
                                   size_t batch_size,
                                   char **out_report_json);

// Inverse-frequency class weights `w_i = N / (C * N_i)` from per-class
// sample counts. `n_classes` must be 5, matching the label taxonomy;
// `out_weights` receives 5 doubles. A zero count is a data error.
//
// # Safety
// `counts` must point to `n_classes` readable values; `out_weights` to 5
// writable doubles.
enum SkStatus sk_class_weights(const uint64_t *counts, size_t n_classes, double *out_weights);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STUTTERKIT_H */
