#ifndef PLADA_H
#define PLADA_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum PladaStatus {
  PLADA_STATUS_OK = 0,
  PLADA_STATUS_NULL_POINTER = 1,
  PLADA_STATUS_INVALID_ARGUMENT = 2,
  PLADA_STATUS_IO = 3,
  PLADA_STATUS_CHECKPOINT = 4,
  PLADA_STATUS_DIVERGENCE = 5,
  PLADA_STATUS_PANIC = 6,
} PladaStatus;

/**
 * A detector restored from a checkpoint.
 */
typedef struct PladaModel PladaModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call on the same thread.
 */
const char *plada_last_error(void);

/**
 * Loads a `.plada` checkpoint into `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum PladaStatus plada_model_load(const char *path, struct PladaModel **out);

/**
 * Releases a model. Null is a no-op.
 *
 * # Safety
 * `model` must come from [`plada_model_load`] and not be used afterwards.
 */
void plada_model_free(struct PladaModel *model);

/**
 * Width of the class-token feature vector.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum PladaStatus plada_model_feature_dim(const struct PladaModel *model, size_t *out);

/**
 * Fake probability of each of `n` images laid out back to back, averaging
 * over the whole prompt pool. Writes `n` values to `probs`.
 *
 * # Safety
 * `rgb` must hold `n * width * height * 3` bytes and `probs` room for `n` doubles.
 */
enum PladaStatus plada_model_predict(const struct PladaModel *model,
                                     const uint8_t *rgb,
                                     size_t n,
                                     size_t width,
                                     size_t height,
                                     double *probs);

/**
 * JPEG round trip of one image at quality `qp` into `out_rgb`.
 *
 * # Safety
 * Both buffers must hold `width * height * 3` bytes.
 */
enum PladaStatus plada_jpeg_compress(const uint8_t *rgb,
                                     size_t width,
                                     size_t height,
                                     uint32_t qp,
                                     uint8_t *out_rgb);

/**
 * 8×8 grid blockiness of one image.
 *
 * # Safety
 * `rgb` must hold `width * height * 3` bytes and `out` be writable.
 */
enum PladaStatus plada_blockiness(const uint8_t *rgb, size_t width, size_t height, double *out);

/**
 * Accuracy at threshold 0.5 and step-interpolated average precision of
 * `n` scores against 0/1 labels (1 = fake).
 *
 * # Safety
 * `scores` and `labels` must hold `n` entries; `acc` and `ap` must be writable.
 */
enum PladaStatus plada_metrics(const double *scores,
                               const uint8_t *labels,
                               size_t n,
                               double *acc,
                               double *ap);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PLADA_H */
