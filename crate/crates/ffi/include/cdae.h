#ifndef CDAE_H
#define CDAE_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum CdaeStatus {
  CDAE_STATUS_OK = 0,
  // A required pointer argument was null.
  CDAE_STATUS_NULL_POINTER = 1,
  // Bad value, shape or label.
  CDAE_STATUS_INVALID_ARGUMENT = 2,
  // File missing, unreadable or not valid UTF-8.
  CDAE_STATUS_IO = 3,
  // Checkpoint damaged or of an unsupported version.
  CDAE_STATUS_CHECKPOINT = 4,
  // The model cannot serve the request.
  CDAE_STATUS_MODEL = 5,
  // A Rust panic was caught.
  CDAE_STATUS_INTERNAL = 6,
} CdaeStatus;

// Running confusion matrix.
typedef struct CdaeConfusion CdaeConfusion;

// Model restored from a checkpoint.
typedef struct CdaeModel CdaeModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the most recent failure on this thread, or null. The pointer
// stays valid until the next failing call on this thread.
const char *cdae_last_error(void);

// Library version as a static NUL-terminated string.
const char *cdae_version(void);

// Writes `r * x * (1 - x)` for each of the `n` values to `out`. Values must
// lie in [0, 1] and `r` in (0, 4]. `out` may alias `values`.
//
// # Safety
// `values` and `out` must each reference `n` doubles.
enum CdaeStatus cdae_logistic_map(const double *values, double *out, size_t n, double r);

// Creates an empty `k`-class confusion matrix in `*out`.
//
// # Safety
// `out` must be a valid pointer to a handle slot.
enum CdaeStatus cdae_confusion_new(size_t k, struct CdaeConfusion **out);

// Counts `n` (truth, prediction) pairs. Nothing is counted on error.
//
// # Safety
// `cm` must come from [`cdae_confusion_new`]; `truth` and `pred` must each
// reference `n` values.
enum CdaeStatus cdae_confusion_update(struct CdaeConfusion *cm,
                                      const size_t *truth,
                                      const size_t *pred,
                                      size_t n);

// Count of samples with true class `truth` predicted as `pred`.
//
// # Safety
// `cm` must come from [`cdae_confusion_new`]; `out` must be writable.
enum CdaeStatus cdae_confusion_get(const struct CdaeConfusion *cm,
                                   size_t truth,
                                   size_t pred,
                                   uint64_t *out);

// Fraction of correct predictions. Fails on an empty matrix.
//
// # Safety
// `cm` must come from [`cdae_confusion_new`]; `out` must be writable.
enum CdaeStatus cdae_confusion_accuracy(const struct CdaeConfusion *cm, double *out);

// Unweighted mean of per-class F1 scores.
//
// # Safety
// `cm` must come from [`cdae_confusion_new`]; `out` must be writable.
enum CdaeStatus cdae_confusion_macro_f1(const struct CdaeConfusion *cm, double *out);

// Releases a confusion matrix. Null is ignored.
//
// # Safety
// `cm` must be null or come from [`cdae_confusion_new`], and not be used
// afterwards.
void cdae_confusion_free(struct CdaeConfusion *cm);

// Restores a model from the checkpoint at the UTF-8 path `path`.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum CdaeStatus cdae_model_load(const char *path, struct CdaeModel **out);

// Number of classes of a classifier or fusion model; 0 for an autoencoder.
//
// # Safety
// `model` must be null or come from [`cdae_model_load`].
size_t cdae_model_num_classes(const struct CdaeModel *model);

// Predicts a class for each of `n` images laid out as
// `[n][channels][height][width]` doubles in [0, 1].
//
// # Safety
// `model` must come from [`cdae_model_load`]; `pixels` must reference
// `n * channels * height * width` doubles and `labels` `n` values.
enum CdaeStatus cdae_model_predict(const struct CdaeModel *model,
                                   const double *pixels,
                                   size_t n,
                                   size_t channels,
                                   size_t height,
                                   size_t width,
                                   size_t *labels);

// Releases a model. Null is ignored.
//
// # Safety
// `model` must be null or come from [`cdae_model_load`], and not be used
// afterwards.
void cdae_model_free(struct CdaeModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CDAE_H */
