#ifndef LORANPAC_H
#define LORANPAC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LrpStatus {
  LRP_STATUS_OK = 0,
  LRP_STATUS_NULL_POINTER = 1,
  LRP_STATUS_INVALID_ARGUMENT = 2,
  LRP_STATUS_INVALID_INPUT = 3,
  LRP_STATUS_NUMERIC = 4,
  LRP_STATUS_ILL_CONDITIONED = 5,
  LRP_STATUS_SIZE_CAP = 6,
  LRP_STATUS_INVALID_STATE = 7,
  LRP_STATUS_FORMAT = 8,
  LRP_STATUS_IO = 9,
  LRP_STATUS_CONFIG = 10,
  LRP_STATUS_BUFFER_TOO_SMALL = 11,
  LRP_STATUS_PANIC = 12,
} LrpStatus;

/**
 * Opaque in-memory feature file.
 */
typedef struct LrpFeatures LrpFeatures;

/**
 * Opaque continual learner.
 */
typedef struct LrpLearner LrpLearner;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. Valid until the next
 * call into this library from the same thread.
 */
const char *lrp_last_error(void);

/**
 * Library version as a static nul-terminated string.
 */
const char *lrp_version(void);

/**
 * Creates a learner for features of dimension `dim`.
 *
 * # Safety
 * `out` must be valid for writes.
 */
enum LrpStatus lrp_learner_new(size_t dim, double zeta, size_t r_max, struct LrpLearner **out);

/**
 * Releases a learner; null is ignored.
 *
 * # Safety
 * `learner` must come from this library and not be used afterwards.
 */
void lrp_learner_free(struct LrpLearner *learner);

/**
 * Learns one task of `n` labelled samples. The learner is unchanged on failure.
 * `rank_out` may be null.
 *
 * # Safety
 * `h` must hold `dim * n` doubles and `labels` `n` values.
 */
enum LrpStatus lrp_learner_observe(struct LrpLearner *learner,
                                   const double *h,
                                   size_t n,
                                   const uint32_t *labels,
                                   size_t *rank_out);

/**
 * Predicts class ids for `n` samples into `out[0..n]`.
 *
 * # Safety
 * `h` must hold `dim * n` doubles and `out` room for `n` values.
 */
enum LrpStatus lrp_learner_predict(const struct LrpLearner *learner,
                                   const double *h,
                                   size_t n,
                                   uint32_t *out);

/**
 * Feature dimension.
 *
 * # Safety
 * `out` must be valid for writes.
 */
enum LrpStatus lrp_learner_dim(const struct LrpLearner *learner, size_t *out);

/**
 * Rank of the retained factors (0 before the first task).
 *
 * # Safety
 * `out` must be valid for writes.
 */
enum LrpStatus lrp_learner_rank(const struct LrpLearner *learner, size_t *out);

/**
 * Tasks observed so far.
 *
 * # Safety
 * `out` must be valid for writes.
 */
enum LrpStatus lrp_learner_tasks(const struct LrpLearner *learner, size_t *out);

/**
 * Samples observed so far.
 *
 * # Safety
 * `out` must be valid for writes.
 */
enum LrpStatus lrp_learner_samples(const struct LrpLearner *learner, size_t *out);

/**
 * Class ids in weight-row order. Writes the count to `count`; copies the ids
 * when `ids` is non-null and `cap` is large enough, else returns `BufferTooSmall`.
 *
 * # Safety
 * `ids` must have room for `cap` values when non-null; `count` must be valid.
 */
enum LrpStatus lrp_learner_classes(const struct LrpLearner *learner,
                                   uint32_t *ids,
                                   size_t cap,
                                   size_t *count);

/**
 * Classifier weights, `rows = classes`, `cols = dim`, column-major. Writes the
 * shape; copies the values when `out` is non-null and `cap >= rows * cols`.
 *
 * # Safety
 * `out` must have room for `cap` doubles when non-null; `rows`, `cols` must be valid.
 */
enum LrpStatus lrp_learner_weights(const struct LrpLearner *learner,
                                   double *out,
                                   size_t cap,
                                   size_t *rows,
                                   size_t *cols);

/**
 * Writes a checkpoint.
 *
 * # Safety
 * `path` must be a nul-terminated string.
 */
enum LrpStatus lrp_learner_save(const struct LrpLearner *learner, const char *path);

/**
 * Restores a learner from a checkpoint.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` valid for writes.
 */
enum LrpStatus lrp_learner_load(const char *path, struct LrpLearner **out);

/**
 * `relu(P x)` for `n` samples with `P` (`out_dim x in_dim`) drawn from `seed`.
 *
 * # Safety
 * `x` must hold `in_dim * n` doubles and `out` room for `out_dim * n`.
 */
enum LrpStatus lrp_lift(size_t in_dim,
                        size_t out_dim,
                        uint64_t seed,
                        const double *x,
                        size_t n,
                        double *out);

/**
 * Reads a feature file.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` valid for writes.
 */
enum LrpStatus lrp_features_read(const char *path, struct LrpFeatures **out);

/**
 * Writes `n` samples of dimension `dim` as a feature file.
 *
 * # Safety
 * `data` must hold `dim * n` doubles, `labels` `n` values, `path` a nul-terminated string.
 */
enum LrpStatus lrp_features_write(const char *path,
                                  size_t dim,
                                  size_t n,
                                  const double *data,
                                  const uint32_t *labels);

/**
 * Releases a feature file; null is ignored.
 *
 * # Safety
 * `features` must come from this library and not be used afterwards.
 */
void lrp_features_free(struct LrpFeatures *features);

/**
 * Dimension and sample count.
 *
 * # Safety
 * `dim` and `n` must be valid for writes.
 */
enum LrpStatus lrp_features_shape(const struct LrpFeatures *features, size_t *dim, size_t *n);

/**
 * Borrowed column-major values (`dim * n`) valid while `features` lives;
 * null when empty or on error.
 *
 * # Safety
 * `features` must be a live handle.
 */
const double *lrp_features_data(const struct LrpFeatures *features);

/**
 * Borrowed labels (`n`) valid while `features` lives; null when empty.
 *
 * # Safety
 * `features` must be a live handle.
 */
const uint32_t *lrp_features_labels(const struct LrpFeatures *features);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LORANPAC_H */
