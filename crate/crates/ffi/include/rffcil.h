#ifndef RFFCIL_H
#define RFFCIL_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum RffcilStatus {
  RFFCIL_STATUS_OK = 0,
  RFFCIL_STATUS_INVALID_ARGUMENT = 1,
  RFFCIL_STATUS_CONFIG = 2,
  RFFCIL_STATUS_CALIBRATION = 3,
  RFFCIL_STATUS_IO = 4,
  RFFCIL_STATUS_NULL_POINTER = 5,
  RFFCIL_STATUS_SHAPE = 6,
  RFFCIL_STATUS_NUMERIC = 7,
  RFFCIL_STATUS_FORMAT = 8,
  RFFCIL_STATUS_BUFFER_TOO_SMALL = 9,
  RFFCIL_STATUS_PANIC = 10,
} RffcilStatus;

/**
 * Edge of the frame a mask is anchored to.
 */
typedef enum RffcilMaskSide {
  RFFCIL_MASK_SIDE_START = 0,
  RFFCIL_MASK_SIDE_END = 1,
} RffcilMaskSide;

/**
 * Per-class mixture bank.
 */
typedef struct RffcilBank RffcilBank;

/**
 * Fitted diagonal Gaussian mixture.
 */
typedef struct RffcilGmm RffcilGmm;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *rffcil_last_error_message(void);

void rffcil_clear_last_error(void);

/**
 * Library version as a static nul-terminated string.
 */
const char *rffcil_version(void);

/**
 * Bytes needed to store one class's mixture parameters.
 */
size_t rffcil_gmm_storage_bytes(size_t n_components, size_t dim, size_t bytes_per_float);

/**
 * # Safety
 * `logits` and `out` must each hold `n` doubles.
 */
enum RffcilStatus rffcil_softmax(const double *logits, size_t n, double *out);

/**
 * # Safety
 * `p` and `q` must each hold `n` doubles; `out` must be writable.
 */
enum RffcilStatus rffcil_kl_divergence(const double *p, const double *q, size_t n, double *out);

/**
 * Squared 2-Wasserstein distance between two diagonal Gaussians.
 *
 * # Safety
 * All four arrays must hold `dim` doubles; `out` must be writable.
 */
enum RffcilStatus rffcil_w2_diagonal(const double *mean_a,
                                     const double *var_a,
                                     const double *mean_b,
                                     const double *var_b,
                                     size_t dim,
                                     double *out);

/**
 * Mean squared row distance between two row-major `n × dim` batches.
 *
 * # Safety
 * `a` and `b` must each hold `n * dim` doubles; `out` must be writable.
 */
enum RffcilStatus rffcil_mse_align(const double *a,
                                   const double *b,
                                   size_t n,
                                   size_t dim,
                                   double *out);

/**
 * Longest mask allowed for a frame of `len` samples.
 */
size_t rffcil_max_mask_len(size_t len);

/**
 * Zero an edge-anchored run of `length` samples of an interleaved
 * (re, im) frame of `len` complex samples.
 *
 * # Safety
 * `samples` must hold `2 * len` doubles.
 */
enum RffcilStatus rffcil_mask_apply(double *samples,
                                    size_t len,
                                    enum RffcilMaskSide side,
                                    size_t length);

/**
 * Draw a random mask for a frame of `len` samples.
 *
 * # Safety
 * `side` and `length` must be writable.
 */
enum RffcilStatus rffcil_mask_sample(size_t len,
                                     uint64_t seed,
                                     enum RffcilMaskSide *side,
                                     size_t *length);

/**
 * Fit a mixture to `n` row-major samples of dimension `dim`.
 *
 * # Safety
 * `data` must hold `n * dim` doubles; `out` must be writable. The returned
 * handle must be released with [`rffcil_gmm_free`].
 */
enum RffcilStatus rffcil_gmm_fit(const double *data,
                                 size_t n,
                                 size_t dim,
                                 size_t n_components,
                                 uint64_t seed,
                                 struct RffcilGmm **out);

/**
 * # Safety
 * `gmm` must be null or a handle from this library not yet freed.
 */
void rffcil_gmm_free(struct RffcilGmm *gmm);

/**
 * # Safety
 * `gmm` must be null or a live handle.
 */
size_t rffcil_gmm_n_components(const struct RffcilGmm *gmm);

/**
 * # Safety
 * `gmm` must be null or a live handle.
 */
size_t rffcil_gmm_dim(const struct RffcilGmm *gmm);

/**
 * Copy mixture weights into `weights` (capacity `n_components`).
 *
 * # Safety
 * `gmm` must be a live handle; `weights` must hold `n_components` doubles.
 */
enum RffcilStatus rffcil_gmm_weights(const struct RffcilGmm *gmm, double *weights, size_t capacity);

/**
 * # Safety
 * `gmm` must be a live handle; `x` must hold `dim` doubles.
 */
enum RffcilStatus rffcil_gmm_log_density(const struct RffcilGmm *gmm,
                                         const double *x,
                                         size_t dim,
                                         double *out);

/**
 * Draw `n` samples, row-major, into `out` (capacity `capacity` doubles).
 *
 * # Safety
 * `gmm` must be a live handle; `out` must hold `capacity` doubles.
 */
enum RffcilStatus rffcil_gmm_sample(const struct RffcilGmm *gmm,
                                    size_t n,
                                    uint64_t seed,
                                    double *out,
                                    size_t capacity);

/**
 * # Safety
 * `path` must be a nul-terminated string; `out` must be writable. The
 * returned handle must be released with [`rffcil_bank_free`].
 */
enum RffcilStatus rffcil_bank_load(const char *path, struct RffcilBank **out);

/**
 * # Safety
 * `bank` must be a live handle; `path` a nul-terminated string.
 */
enum RffcilStatus rffcil_bank_save(const struct RffcilBank *bank, const char *path);

/**
 * # Safety
 * `bank` must be null or a handle from this library not yet freed.
 */
void rffcil_bank_free(struct RffcilBank *bank);

/**
 * # Safety
 * `bank` must be null or a live handle.
 */
size_t rffcil_bank_len(const struct RffcilBank *bank);

/**
 * # Safety
 * `bank` must be null or a live handle.
 */
size_t rffcil_bank_storage_bytes(const struct RffcilBank *bank, size_t bytes_per_float);

/**
 * Copy class ids in ascending order into `out` (capacity `capacity`).
 *
 * # Safety
 * `bank` must be a live handle; `out` must hold `capacity` values.
 */
enum RffcilStatus rffcil_bank_classes(const struct RffcilBank *bank,
                                      uint32_t *out,
                                      size_t capacity);

/**
 * Copy of the mixture for `class`; release with [`rffcil_gmm_free`].
 *
 * # Safety
 * `bank` must be a live handle; `out` must be writable.
 */
enum RffcilStatus rffcil_bank_get(const struct RffcilBank *bank,
                                  uint32_t class_,
                                  struct RffcilGmm **out);

/**
 * Run a scenario over a saved corpus and backbone. `config_path` may be
 * null for defaults. Writes final and mean accuracy over stages.
 *
 * # Safety
 * Path arguments must be nul-terminated strings (or null where allowed);
 * `a_last` and `a_mean` must be writable.
 */
enum RffcilStatus rffcil_run_scenario(const char *corpus_dir,
                                      const char *backbone_path,
                                      const char *config_path,
                                      double *a_last,
                                      double *a_mean);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RFFCIL_H */
