#ifndef ABCDR_H
#define ABCDR_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by every fallible call.
 */
typedef enum AbcdrStatus {
  Ok = 0,
  /**
   * A pointer was null, a length disagreed, or a value was out of domain.
   */
  InvalidArgument = 1,
  /**
   * The underlying computation failed; see abcdr_last_error.
   */
  RuntimeError = 2,
  /**
   * A panic was caught at the boundary.
   */
  Panic = 3,
} AbcdrStatus;

/**
 * Opaque weighted posterior sample handle.
 */
typedef struct AbcdrSample AbcdrSample;

/**
 * Opaque reference table handle.
 */
typedef struct AbcdrTable AbcdrTable;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the thread-local message for the most recent failing call into
 * `buf` (NUL-terminated, truncated to `len`). Returns the full message
 * length in bytes, excluding the terminator. A zero `len` or null `buf`
 * only queries the length.
 */
uintptr_t abcdr_last_error(char *buf, uintptr_t len);

/**
 * Simulates a reference table. `model_json` is the model spec as JSON, e.g.
 * `{"model_id": "gaussian-toy", "k_noise": 4}`.
 *
 * # Safety
 * `model_json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum AbcdrStatus abcdr_table_generate(const char *model_json,
                                      uintptr_t n,
                                      uint64_t seed,
                                      struct AbcdrTable **out);

/**
 * Loads a table previously written by the library (CSV with the
 * `param_*`/`stat_*` header convention).
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum AbcdrStatus abcdr_table_load_csv(const char *path, struct AbcdrTable **out);

/**
 * Writes the table as CSV.
 *
 * # Safety
 * `table` must be a live handle and `path` a NUL-terminated string.
 */
enum AbcdrStatus abcdr_table_save_csv(const struct AbcdrTable *table, const char *path);

/**
 * Reports (rows, parameter dimension, statistic dimension). Null outputs are
 * skipped.
 *
 * # Safety
 * `table` must be a live handle.
 */
enum AbcdrStatus abcdr_table_shape(const struct AbcdrTable *table,
                                   uintptr_t *n,
                                   uintptr_t *q,
                                   uintptr_t *p);

/**
 * Frees a table handle; null is a no-op.
 *
 * # Safety
 * `table` must be a handle returned by this library, freed at most once.
 */
void abcdr_table_free(struct AbcdrTable *table);

/**
 * Kernel-weighted rejection over all statistics: accepts roughly
 * `acceptance_fraction * n` rows around the observed statistics (length
 * must equal the table's statistic dimension).
 *
 * # Safety
 * `table` must be a live handle, `s_obs` must point to `s_obs_len` doubles
 * and `out` must be a valid pointer.
 */
enum AbcdrStatus abcdr_rejection(const struct AbcdrTable *table,
                                 const double *s_obs,
                                 uintptr_t s_obs_len,
                                 double acceptance_fraction,
                                 struct AbcdrSample **out);

/**
 * Reports (accepted rows, parameter dimension). Null outputs are skipped.
 *
 * # Safety
 * `sample` must be a live handle.
 */
enum AbcdrStatus abcdr_sample_shape(const struct AbcdrSample *sample,
                                    uintptr_t *n_eff,
                                    uintptr_t *q);

/**
 * Writes the kernel-weighted posterior mean into `out` (length must equal
 * the parameter dimension).
 *
 * # Safety
 * `sample` must be a live handle and `out` must point to `out_len` doubles.
 */
enum AbcdrStatus abcdr_sample_posterior_mean(const struct AbcdrSample *sample,
                                             double *out,
                                             uintptr_t out_len);

/**
 * Weighted k-nearest-neighbour entropy estimate of the sample.
 *
 * # Safety
 * `sample` must be a live handle and `out` a valid pointer.
 */
enum AbcdrStatus abcdr_sample_entropy(const struct AbcdrSample *sample, uintptr_t k, double *out);

/**
 * Frees a sample handle; null is a no-op.
 *
 * # Safety
 * `sample` must be a handle returned by this library, freed at most once.
 */
void abcdr_sample_free(struct AbcdrSample *sample);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ABCDR_H */
