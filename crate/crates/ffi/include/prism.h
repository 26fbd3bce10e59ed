#ifndef PRISM_H
#define PRISM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

/**
 * Result code of every fallible call.
 */
typedef enum PrismStatus {
  PRISM_STATUS_OK = 0,
  PRISM_STATUS_NULL_POINTER = 1,
  PRISM_STATUS_DOMAIN = 2,
  PRISM_STATUS_DEGENERATE = 3,
  PRISM_STATUS_INSUFFICIENT_DATA = 4,
  PRISM_STATUS_ABSENT_CLASS = 5,
  PRISM_STATUS_DIMENSION_MISMATCH = 6,
  PRISM_STATUS_CONFIG = 7,
  PRISM_STATUS_PARSE = 8,
  PRISM_STATUS_IO = 9,
  PRISM_STATUS_INVALID_UTF8 = 10,
  PRISM_STATUS_PANIC = 11,
} PrismStatus;

/**
 * Clean-probability estimator selector.
 */
typedef enum PrismEstimator {
  PRISM_ESTIMATOR_AVG_SIM_NAIVE = 0,
  PRISM_ESTIMATOR_AVG_SIM_CENTERS = 1,
  PRISM_ESTIMATOR_VMF_SIM = 2,
  PRISM_ESTIMATOR_BATCH_POSITIVE = 3,
  PRISM_ESTIMATOR_MEMORY_POSITIVE = 4,
  PRISM_ESTIMATOR_NO_FILTER = 5,
} PrismEstimator;

/**
 * Memory bank of labelled unit features.
 */
typedef struct PrismBank PrismBank;

/**
 * Experiment configuration for [`prism_train`].
 */
typedef struct PrismConfig PrismConfig;

/**
 * Filtering state: estimator, warm-up and fitted class distributions.
 */
typedef struct PrismFilter PrismFilter;

/**
 * Per-batch threshold policy (fixed, TRM or sTRM).
 */
typedef struct PrismThreshold PrismThreshold;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null if none. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *prism_last_error_message(void);

/**
 * `ln I_order(x)` for `order >= 0`, `x >= 0`.
 *
 * # Safety
 * `out` must be a valid pointer to one `f64`.
 */
enum PrismStatus prism_log_bessel_i(double order, double x, double *out);

/**
 * Log of the von Mises-Fisher normalizing constant on the unit sphere in `dim` dimensions.
 *
 * # Safety
 * `out` must be a valid pointer to one `f64`.
 */
enum PrismStatus prism_vmf_log_normalizer(uintptr_t dim, double kappa, double *out);

/**
 * Fits a von Mises-Fisher distribution to `n` unit rows of length `dim`.
 * Writes the mean direction to `out_mean` (`dim` values) and the
 * concentration to `out_kappa`.
 *
 * # Safety
 * `samples` must point to `n * dim` values, `out_mean` to `dim` writable
 * values and `out_kappa` to one.
 */
enum PrismStatus prism_vmf_fit(const double *samples,
                               uintptr_t n,
                               uintptr_t dim,
                               double *out_mean,
                               double *out_kappa);

/**
 * Creates an empty bank holding at most `capacity` features of length `dim`.
 *
 * # Safety
 * `out` must be a valid pointer; the handle written there is owned by the caller.
 */
enum PrismStatus prism_bank_new(uintptr_t capacity, uintptr_t dim, struct PrismBank **out);

/**
 * # Safety
 * `bank` must be null or a handle from [`prism_bank_new`] not yet freed.
 */
void prism_bank_free(struct PrismBank *bank);

/**
 * Appends `n` labelled features, evicting the oldest entries once full.
 *
 * # Safety
 * `features` must point to `n * dim` values and `labels` to `n` values.
 */
enum PrismStatus prism_bank_enqueue(struct PrismBank *bank,
                                    const double *features,
                                    const uintptr_t *labels,
                                    uintptr_t n);

/**
 * Number of features currently stored.
 *
 * # Safety
 * `bank` must be a live handle and `out` a valid pointer.
 */
enum PrismStatus prism_bank_len(const struct PrismBank *bank, uintptr_t *out);

/**
 * Number of stored features carrying `label`.
 *
 * # Safety
 * `bank` must be a live handle and `out` a valid pointer.
 */
enum PrismStatus prism_bank_class_count(const struct PrismBank *bank,
                                        uintptr_t label,
                                        uintptr_t *out);

/**
 * Keeps samples whose probability exceeds `m`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum PrismStatus prism_threshold_new_fixed(double m, struct PrismThreshold **out);

/**
 * Per-batch percentile threshold dropping the lowest `rate` percent.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum PrismStatus prism_threshold_new_trm(double rate, struct PrismThreshold **out);

/**
 * Percentile threshold averaged over the last `window` batches.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum PrismStatus prism_threshold_new_strm(double rate,
                                          uintptr_t window,
                                          struct PrismThreshold **out);

/**
 * # Safety
 * `policy` must be null or a live handle.
 */
void prism_threshold_free(struct PrismThreshold *policy);

/**
 * Feeds one batch of probabilities to the policy and returns its threshold.
 *
 * # Safety
 * `probs` must point to `n` values and `out` to one writable value.
 */
enum PrismStatus prism_threshold_compute(struct PrismThreshold *policy,
                                         const double *probs,
                                         uintptr_t n,
                                         double *out);

/**
 * Creates filtering state. With [`PrismEstimator::VmfSim`] the first
 * `warmup_iters` iterations fall back to center-based average similarity.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum PrismStatus prism_filter_new(enum PrismEstimator estimator,
                                  uintptr_t warmup_iters,
                                  struct PrismFilter **out);

/**
 * # Safety
 * `filter` must be null or a live handle.
 */
void prism_filter_free(struct PrismFilter *filter);

/**
 * Scores a batch and applies the threshold. Writes each sample's clean
 * probability to `out_probs`, 1 or 0 to `out_kept`, and the threshold used
 * to `out_threshold`. The bank is not modified apart from recording the
 * batch's labels as seen; enqueue kept samples with [`prism_bank_enqueue`].
 *
 * # Safety
 * `features` must point to `n * dim` values (where `dim` is the bank's),
 * `labels`, `out_probs` and `out_kept` to `n` values, and `out_threshold` to one.
 */
enum PrismStatus prism_filter_batch(const struct PrismFilter *filter,
                                    struct PrismBank *bank,
                                    struct PrismThreshold *policy,
                                    const double *features,
                                    const uintptr_t *labels,
                                    uintptr_t n,
                                    double *out_probs,
                                    uint8_t *out_kept,
                                    double *out_threshold);

/**
 * Ends an iteration: refits class distributions from the bank when needed
 * and advances the warm-up counter.
 *
 * # Safety
 * Both handles must be live.
 */
enum PrismStatus prism_filter_finish_iteration(struct PrismFilter *filter,
                                               const struct PrismBank *bank);

/**
 * Current iteration count of the filter.
 *
 * # Safety
 * `filter` must be live and `out` valid.
 */
enum PrismStatus prism_filter_iteration(const struct PrismFilter *filter, uintptr_t *out);

/**
 * Creates a configuration with default values.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum PrismStatus prism_config_new(struct PrismConfig **out);

/**
 * Reads a `key = value` configuration file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum PrismStatus prism_config_load(const char *path, struct PrismConfig **out);

/**
 * # Safety
 * `config` must be null or a live handle.
 */
void prism_config_free(struct PrismConfig *config);

/**
 * Sets one key from its text form.
 *
 * # Safety
 * `key` and `value` must be NUL-terminated strings.
 */
enum PrismStatus prism_config_set(struct PrismConfig *config, const char *key, const char *value);

/**
 * Runs a full training job. When `out_dir` is non-null, all run outputs are
 * written there. The final held-out precision@1 goes to `out_p_at_1`
 * (NaN if no evaluation ran).
 *
 * # Safety
 * `config` must be live, `out_dir` null or NUL-terminated, `out_p_at_1` valid.
 */
enum PrismStatus prism_train(const struct PrismConfig *config,
                             const char *out_dir,
                             double *out_p_at_1);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PRISM_H */
