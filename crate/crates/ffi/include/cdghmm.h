#ifndef CDGHMM_H
#define CDGHMM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Outcome of a library call.
 */
typedef enum CdghmmStatus {
  CDGHMM_STATUS_OK = 0,
  /**
   * Bad argument: unknown name, out-of-range count, shape mismatch.
   */
  CDGHMM_STATUS_INVALID_INPUT = 1,
  /**
   * Malformed or inconsistent data, or a file that cannot be read.
   */
  CDGHMM_STATUS_DATA = 2,
  /**
   * Numerical failure during estimation.
   */
  CDGHMM_STATUS_NUMERIC = 3,
  /**
   * A required pointer was null.
   */
  CDGHMM_STATUS_NULL_POINTER = 4,
  /**
   * A Rust panic was caught at the boundary.
   */
  CDGHMM_STATUS_INTERNAL = 5,
} CdghmmStatus;

/**
 * A loaded panel.
 */
typedef struct CdghmmDataset CdghmmDataset;

/**
 * A fitted model together with its run summary.
 */
typedef struct CdghmmFit CdghmmFit;

/**
 * Estimation settings. Start from `cdghmm_fit_options_default`.
 */
typedef struct CdghmmFitOptions {
  size_t n_starts;
  size_t max_iter;
  double rel_tol;
  uint64_t seed;
  /**
   * Nonzero adds the absorbing dropout state when the data show dropout.
   */
  int32_t dropout;
  /**
   * Nonzero seeds every start with random soft assignments; otherwise the
   * first start comes from k-means.
   */
  int32_t random_init;
} CdghmmFitOptions;

/**
 * Summary of a fit.
 */
typedef struct CdghmmFitSummary {
  size_t states;
  /**
   * Chain states including the absorbing dropout state when present.
   */
  size_t chain_states;
  double loglik;
  double bic;
  double icl;
  size_t free_params;
  size_t iterations;
  int32_t converged;
} CdghmmFitSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *cdghmm_version(void);

/**
 * Message of the last failed call on this thread, or null. The caller owns
 * the copy and frees it with `cdghmm_string_free`.
 */
char *cdghmm_last_error(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed already.
 */
void cdghmm_string_free(char *s);

/**
 * Free covariance parameters of `model` (e.g. `"VVA"`) with `m` states and
 * `p` variables.
 *
 * # Safety
 * `model` must be a NUL-terminated string and `out` writable.
 */
enum CdghmmStatus cdghmm_count_free_params(const char *model, size_t m, size_t p, size_t *out);

/**
 * Loads a long-format CSV panel. `dropout_mode` is `"auto"`, `"column"`,
 * `"off"` or null for auto.
 *
 * # Safety
 * String arguments must be NUL-terminated; `out` must be writable.
 */
enum CdghmmStatus cdghmm_dataset_load(const char *path,
                                      const char *dropout_mode,
                                      struct CdghmmDataset **out);

/**
 * Builds a dataset from an `n × n_times × p` row-major array in which NaN
 * marks a missing cell. With `detect_dropout_flag` nonzero, trailing runs of
 * fully missing rows are treated as dropout.
 *
 * # Safety
 * `values` must point to `n * n_times * p` readable doubles and `out` must
 * be writable.
 */
enum CdghmmStatus cdghmm_dataset_from_array(const double *values,
                                            size_t n,
                                            size_t n_times,
                                            size_t p,
                                            int32_t detect_dropout_flag,
                                            struct CdghmmDataset **out);

/**
 * Writes the subject count, time points and variables of `ds`.
 *
 * # Safety
 * `ds` must be a live dataset handle; each out pointer is written when non-null.
 */
enum CdghmmStatus cdghmm_dataset_dims(const struct CdghmmDataset *ds,
                                      size_t *n,
                                      size_t *n_times,
                                      size_t *p);

/**
 * Number of subjects with a detected dropout time.
 *
 * # Safety
 * `ds` must be a live dataset handle and `out` writable.
 */
enum CdghmmStatus cdghmm_dataset_dropout_count(const struct CdghmmDataset *ds, size_t *out);

/**
 * Releases a dataset. Null is ignored.
 *
 * # Safety
 * `ds` must come from this library and not have been freed already.
 */
void cdghmm_dataset_free(struct CdghmmDataset *ds);

struct CdghmmFitOptions cdghmm_fit_options_default(void);

/**
 * Fits `model` with `states` hidden states under `mechanism` (e.g.
 * `"mar"`, `"state-var"`). `options` may be null for defaults.
 *
 * # Safety
 * `ds` must be a live dataset handle, strings NUL-terminated, `options`
 * null or readable, and `out` writable.
 */
enum CdghmmStatus cdghmm_fit(const struct CdghmmDataset *ds,
                             const char *model,
                             size_t states,
                             const char *mechanism,
                             const struct CdghmmFitOptions *options,
                             struct CdghmmFit **out);

/**
 * # Safety
 * `f` must be a live fit handle and `out` writable.
 */
enum CdghmmStatus cdghmm_fit_summary(const struct CdghmmFit *f, struct CdghmmFitSummary *out);

/**
 * Copies the local decoding of the fitted data into `labels`, `[i][t]`
 * row-major and 0-based; the value `states` marks a dropped cell.
 *
 * # Safety
 * `f` must be a live fit handle and `labels` must hold `len` writable slots.
 */
enum CdghmmStatus cdghmm_fit_labels(const struct CdghmmFit *f, size_t *labels, size_t len);

/**
 * Decodes another panel under a fitted model. `labels` takes `n · n_times`
 * 0-based states and `probs`, when non-null, `n · n_times · chain_states`
 * posterior probabilities.
 *
 * # Safety
 * Handles must be live; buffers must hold the stated number of values.
 */
enum CdghmmStatus cdghmm_decode(const struct CdghmmFit *f,
                                const struct CdghmmDataset *ds,
                                size_t *labels,
                                size_t labels_len,
                                double *probs,
                                size_t probs_len);

/**
 * Serializes the fit in the same JSON format the command-line tool writes.
 * The caller frees the string with `cdghmm_string_free`.
 *
 * # Safety
 * `f` must be a live fit handle and `out` writable.
 */
enum CdghmmStatus cdghmm_fit_to_json(const struct CdghmmFit *f, char **out);

/**
 * Releases a fit. Null is ignored.
 *
 * # Safety
 * `f` must come from this library and not have been freed already.
 */
void cdghmm_fit_free(struct CdghmmFit *f);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CDGHMM_H */
