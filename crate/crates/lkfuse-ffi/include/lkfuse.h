#ifndef LKFUSE_H
#define LKFUSE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes of every fallible C API call.
 */
typedef enum LkFuseStatus {
  LK_FUSE_STATUS_OK = 0,
  LK_FUSE_STATUS_NULL_POINTER = 1,
  LK_FUSE_STATUS_INVALID_ARGUMENT = 2,
  LK_FUSE_STATUS_IO_ERROR = 3,
  LK_FUSE_STATUS_CONTRACT_VIOLATION = 4,
  LK_FUSE_STATUS_FINGERPRINT_MISMATCH = 5,
  LK_FUSE_STATUS_DEGENERATE_METRIC = 6,
  LK_FUSE_STATUS_NUMERIC_FAILURE = 7,
  LK_FUSE_STATUS_INTERNAL_ERROR = 8,
} LkFuseStatus;

/**
 * Opaque trained-model handle.
 */
typedef struct LkFuseModel LkFuseModel;

/**
 * Six-metric report for one fused/source triple (0-255 intensity scale).
 * `has_scd` / `has_viff` are false when the metric is degenerate on this
 * input; the corresponding value is then 0.
 */
typedef struct LkFuseMetrics {
  double sd;
  double ag;
  double sf;
  double scd;
  double viff;
  double ssim;
  bool has_scd;
  bool has_viff;
} LkFuseMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Version string of the library; static storage, do not free.
 */
const char *lkfuse_version(void);

/**
 * Error message of the most recent failed call on this thread; valid until
 * the next API call on the same thread. Do not free.
 */
const char *lkfuse_last_error_message(void);

/**
 * Load a model from a checkpoint file written by the trainer.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum LkFuseStatus lkfuse_model_load(const char *path, struct LkFuseModel **out);

/**
 * Create a randomly initialized model (default config; desk-scale widths
 * when `desk_scale` is set). Mainly for binding tests.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum LkFuseStatus lkfuse_model_random(bool desk_scale, uint64_t seed, struct LkFuseModel **out);

/**
 * Release a model handle. Passing NULL is a no-op.
 *
 * # Safety
 * `model` must be a pointer previously returned by a constructor, or NULL.
 */
void lkfuse_model_free(struct LkFuseModel *model);

/**
 * Stable fingerprint of the model configuration.
 *
 * # Safety
 * `model` and `out` must be valid pointers.
 */
enum LkFuseStatus lkfuse_model_fingerprint(const struct LkFuseModel *model, uint64_t *out);

/**
 * Fuse one aligned luminance pair. Arbitrary dimensions are padded
 * internally and cropped back; `fused_out` must hold `height * width`
 * doubles.
 *
 * # Safety
 * All pointers must reference buffers of `height * width` doubles.
 */
enum LkFuseStatus lkfuse_fuse(const struct LkFuseModel *model,
                              const double *src_a,
                              const double *src_b_y,
                              uintptr_t height,
                              uintptr_t width,
                              double *fused_out);

/**
 * Compute the six fusion metrics for a fused/source triple given as [0,1]
 * luminance buffers (rescaled to 0-255 internally).
 *
 * # Safety
 * All pointers must reference buffers of `height * width` doubles and `out`
 * a valid struct pointer.
 */
enum LkFuseStatus lkfuse_evaluate(const double *fused,
                                  const double *src_a,
                                  const double *src_b_y,
                                  uintptr_t height,
                                  uintptr_t width,
                                  struct LkFuseMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LKFUSE_H */
