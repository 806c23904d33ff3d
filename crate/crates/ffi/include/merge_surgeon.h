#ifndef MERGE_SURGEON_H
#define MERGE_SURGEON_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum MsStatus {
  MS_STATUS_OK = 0,
  MS_STATUS_NULL_POINTER = 1,
  MS_STATUS_INVALID_ARGUMENT = 2,
  MS_STATUS_SHAPE_MISMATCH = 3,
  MS_STATUS_IO = 4,
  /**
   * Bad magic, truncated file, malformed header or non-finite value.
   */
  MS_STATUS_FORMAT = 5,
  MS_STATUS_UNKNOWN_ALGORITHM = 6,
  /**
   * Missing tensor, head or adapter.
   */
  MS_STATUS_MISSING = 7,
  MS_STATUS_BUFFER_TOO_SMALL = 8,
  MS_STATUS_PANIC = 9,
  MS_STATUS_OTHER = 10,
} MsStatus;

/**
 * Representation distance used by `ms_representation_bias`.
 */
typedef enum MsLoss {
  MS_LOSS_L1 = 0,
  MS_LOSS_MSE = 1,
  MS_LOSS_NEG_COSINE = 2,
} MsLoss;

/**
 * Opaque named-tensor set.
 */
typedef struct MsParamSet MsParamSet;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the calling thread's last failure; empty if none.
 */
const char *ms_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ms_version(void);

/**
 * New empty set; release with `ms_paramset_free`.
 */
struct MsParamSet *ms_paramset_new(void);

/**
 * # Safety
 * `ps` must be null or a handle from this library that has not been freed.
 */
void ms_paramset_free(struct MsParamSet *ps);

/**
 * Number of tensors; 0 for a null handle.
 *
 * # Safety
 * `ps` must be null or a live handle.
 */
size_t ms_paramset_len(const struct MsParamSet *ps);

/**
 * Reads a checkpoint file into a new handle stored in `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum MsStatus ms_paramset_load(const char *path, struct MsParamSet **out);

/**
 * # Safety
 * `ps` must be a live handle and `path` a NUL-terminated string.
 */
enum MsStatus ms_paramset_save(const struct MsParamSet *ps, const char *path);

/**
 * Copies a row-major tensor into the set, replacing any tensor of that name.
 *
 * # Safety
 * `dims` must point to `ndims` values and `data` to their product of floats.
 */
enum MsStatus ms_paramset_set(struct MsParamSet *ps,
                              const char *name,
                              const size_t *dims,
                              size_t ndims,
                              const float *data);

/**
 * Copies tensor `name` into `out` (capacity `cap` floats) and stores its
 * element count in `*len`. With `out` null only the count is reported.
 *
 * # Safety
 * `out` must be null or hold `cap` floats; `len` must be writable.
 */
enum MsStatus ms_paramset_get(const struct MsParamSet *ps,
                              const char *name,
                              float *out,
                              size_t cap,
                              size_t *len);

/**
 * Mean of `n` expert backbones.
 *
 * # Safety
 * `experts` must point to `n` live handles; `out` must be writable.
 */
enum MsStatus ms_merge_weight_average(const struct MsParamSet *const *experts,
                                      size_t n,
                                      struct MsParamSet **out);

/**
 * `pretrained + lambda * sum(expert - pretrained)` over backbone tensors.
 *
 * # Safety
 * As `ms_merge_weight_average`; `pretrained` must be a live handle.
 */
enum MsStatus ms_merge_task_arithmetic(const struct MsParamSet *pretrained,
                                       const struct MsParamSet *const *experts,
                                       size_t n,
                                       double lambda,
                                       struct MsParamSet **out);

/**
 * Trim, elect sign, disjoint mean; `keep` in (0, 1].
 *
 * # Safety
 * As `ms_merge_task_arithmetic`.
 */
enum MsStatus ms_merge_ties(const struct MsParamSet *pretrained,
                            const struct MsParamSet *const *experts,
                            size_t n,
                            double lambda,
                            double keep,
                            struct MsParamSet **out);

/**
 * Mean absolute difference of two equal-length buffers.
 *
 * # Safety
 * `a` and `b` must each hold `len` floats; `out` must be writable.
 */
enum MsStatus ms_l1_mean_distance(const float *a, const float *b, size_t len, double *out);

/**
 * Bias between two `rows x cols` row-major representations (features as
 * rows, samples as columns).
 *
 * # Safety
 * `z_merged` and `z_expert` must each hold `rows * cols` floats.
 */
enum MsStatus ms_representation_bias(const float *z_merged,
                                     const float *z_expert,
                                     size_t rows,
                                     size_t cols,
                                     enum MsLoss psi,
                                     double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MERGE_SURGEON_H */
