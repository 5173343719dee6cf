#ifndef MAEFACE_H
#define MAEFACE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum MaefaceStatus {
  MAEFACE_STATUS_OK = 0,
  MAEFACE_STATUS_NULL_POINTER = 1,
  MAEFACE_STATUS_INVALID_ARGUMENT = 2,
  MAEFACE_STATUS_IO = 3,
  MAEFACE_STATUS_FORMAT = 4,
  MAEFACE_STATUS_SHAPE = 5,
  MAEFACE_STATUS_NUMERIC = 6,
  MAEFACE_STATUS_PANIC = 7,
} MaefaceStatus;

/**
 * What a loaded model was trained for.
 */
typedef enum MaefaceTask {
  MAEFACE_TASK_PRETRAIN = 0,
  MAEFACE_TASK_DETECT = 1,
  MAEFACE_TASK_INTENSITY = 2,
} MaefaceTask;

/**
 * Opaque model handle.
 */
typedef struct MaefaceModel MaefaceModel;

typedef struct MaefaceModelInfo {
  uint32_t image_size;
  uint32_t channels;
  uint32_t patch_size;
  uint32_t num_aus;
  /**
   * A `MaefaceTask` value.
   */
  uint32_t task;
  uint64_t num_parameters;
} MaefaceModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *maeface_version(void);

/**
 * Message of the last failed call on this thread ("" after a success).
 *
 * The pointer stays valid until the next maeface call on the same thread.
 */
const char *maeface_last_error(void);

/**
 * Loads a checkpoint file; on success `*out` owns a new handle.
 */
enum MaefaceStatus maeface_model_load(const char *path, struct MaefaceModel **out);

/**
 * Releases a handle from `maeface_model_load`; null is ignored.
 */
void maeface_model_free(struct MaefaceModel *model);

enum MaefaceStatus maeface_model_info(const struct MaefaceModel *model,
                                      struct MaefaceModelInfo *out);

/**
 * Runs a fine-tuned model on one 8-bit image stored row-major, channels last.
 *
 * The image is resized to the model input. `out` receives `num_aus` values:
 * occurrence probabilities for a detection model, 0–5 intensities otherwise.
 */
enum MaefaceStatus maeface_model_predict(const struct MaefaceModel *model,
                                         const uint8_t *pixels,
                                         size_t height,
                                         size_t width,
                                         size_t channels,
                                         double *out,
                                         size_t out_len);

/**
 * Number of patches left visible when `n` patches are masked at `ratio`.
 */
size_t maeface_visible_count(size_t n, double ratio);

/**
 * Draws a random mask over `n` patches; `flags[i]` becomes 1 for hidden patches.
 *
 * Draws are reproducible from `seed` and `draw`.
 */
enum MaefaceStatus maeface_sample_mask(size_t n,
                                       double ratio,
                                       uint64_t seed,
                                       uint64_t draw,
                                       uint8_t *flags,
                                       size_t flags_len);

/**
 * Per-AU F1 from 0/1 predictions and labels, both `samples × num_aus` row-major.
 */
enum MaefaceStatus maeface_f1(const uint8_t *pred,
                              const uint8_t *labels,
                              size_t samples,
                              size_t num_aus,
                              double *out);

/**
 * ICC(3,1) between two rating vectors.
 *
 * When both are constant the value is undefined: `*defined` is set to 0 and
 * `*out` to NaN.
 */
enum MaefaceStatus maeface_icc31(const double *pred,
                                 const double *labels,
                                 size_t n,
                                 double *out,
                                 uint8_t *defined);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MAEFACE_H */
