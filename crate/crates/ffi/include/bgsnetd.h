#ifndef BGSNETD_H
#define BGSNETD_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum BgsStatus {
  BGS_STATUS_OK = 0,
  BGS_STATUS_NULL_POINTER = 1,
  BGS_STATUS_INVALID_ARGUMENT = 2,
  BGS_STATUS_IO = 3,
  BGS_STATUS_FORMAT = 4,
  BGS_STATUS_DIMENSION_MISMATCH = 5,
  BGS_STATUS_NO_DATA = 6,
  BGS_STATUS_INTERNAL = 7,
} BgsStatus;

/**
 * Opaque trained classifier.
 */
typedef struct BgsModel BgsModel;

/**
 * Pixel counts of a mask against ground truth.
 */
typedef struct BgsCounts {
  uint64_t tp;
  uint64_t fp;
  uint64_t fn_;
  uint64_t tn;
} BgsCounts;

/**
 * Change-detection metrics. Undefined (0/0) entries are NaN.
 */
typedef struct BgsMetrics {
  double recall;
  double specificity;
  double fpr;
  double fnr;
  double pwc;
  double precision;
  double f_measure;
} BgsMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *bgs_version(void);

/**
 * Message of the last failed call on this thread, or NULL if none. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *bgs_last_error(void);

/**
 * Loads a checkpoint written by `bgsnetd train`. On success `*out` owns a
 * model that must be released with [`bgs_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum BgsStatus bgs_model_load(const char *path, struct BgsModel **out);

/**
 * Releases a model. NULL is a no-op.
 *
 * # Safety
 * `model` must come from [`bgs_model_load`] and not be freed twice.
 */
void bgs_model_free(struct BgsModel *model);

/**
 * Patch side length the model expects, or 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or a live model.
 */
uint32_t bgs_model_patch_size(const struct BgsModel *model);

/**
 * Smallest nonzero and largest depth over `count` frames.
 *
 * # Safety
 * `frames` must hold `width * height * count` values; the outputs must be
 * writable.
 */
enum BgsStatus bgs_depth_stats(const uint16_t *frames,
                               size_t width,
                               size_t height,
                               size_t count,
                               uint16_t *min_valid,
                               uint16_t *max);

/**
 * Normalizes one depth frame into `out`. Absent (0) pixels map to 0.
 *
 * # Safety
 * `depth` and `out` must hold `width * height` values.
 */
enum BgsStatus bgs_normalize(const uint16_t *depth,
                             size_t width,
                             size_t height,
                             uint16_t min_valid,
                             uint16_t max,
                             double alpha,
                             double *out);

/**
 * Per-pixel average of the nonzero observations over `count` frames.
 *
 * # Safety
 * `frames` must hold `width * height * count` values and `out`
 * `width * height`.
 */
enum BgsStatus bgs_extract_background(const uint16_t *frames,
                                      size_t width,
                                      size_t height,
                                      size_t count,
                                      uint16_t *out);

/**
 * Classifies every pixel of a normalized frame against a normalized
 * background. `probs` (may be NULL) receives foreground probabilities,
 * `mask` (may be NULL) receives 255 for foreground and 0 otherwise.
 *
 * # Safety
 * `model` must be a live model; `frame`, `background` and the non-NULL
 * outputs must hold `width * height` values.
 */
enum BgsStatus bgs_predict(const struct BgsModel *model,
                           const double *frame,
                           const double *background,
                           size_t width,
                           size_t height,
                           double threshold,
                           double *probs,
                           uint8_t *mask);

/**
 * Adds the confusion counts of a binary mask (nonzero = foreground)
 * against a ground-truth frame with byte codes 0/50/85/170/255 into
 * `counts`. `roi` may be NULL; otherwise only its nonzero pixels count.
 *
 * # Safety
 * `mask`, `gt` and a non-NULL `roi` must hold `width * height` values;
 * `counts` must be writable.
 */
enum BgsStatus bgs_accumulate(const uint8_t *mask,
                              const uint8_t *gt,
                              const uint8_t *roi,
                              size_t width,
                              size_t height,
                              struct BgsCounts *counts);

/**
 * Metrics from confusion counts.
 *
 * # Safety
 * `out` must be writable.
 */
enum BgsStatus bgs_metrics(struct BgsCounts counts, struct BgsMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BGSNETD_H */
