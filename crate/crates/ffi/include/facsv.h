#ifndef FACSV_H
#define FACSV_H

#pragma once

/* Generated by cbindgen; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum FacsvStatus {
  FACSV_STATUS_OK = 0,
  FACSV_STATUS_NULL_POINTER = 1,
  FACSV_STATUS_CONTRACT = 2,
  FACSV_STATUS_DOMAIN = 3,
  FACSV_STATUS_NUMERICAL = 4,
  FACSV_STATUS_PARSE = 5,
  FACSV_STATUS_CONFIG = 6,
  FACSV_STATUS_IO = 7,
  FACSV_STATUS_PANIC = 8,
} FacsvStatus;

/**
 * A returns panel (series × dates).
 */
typedef struct FacsvPanel FacsvPanel;

/**
 * Posterior draws from a fit.
 */
typedef struct FacsvStore FacsvStore;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *facsv_last_error(void);

/**
 * Builds a panel from `n_series * n_dates` values, row `i` holding series `i`.
 *
 * # Safety
 * `values` must point to `n_series * n_dates` doubles; `out` must be writable.
 */
enum FacsvStatus facsv_panel_new(const double *values,
                                 size_t n_series,
                                 size_t n_dates,
                                 struct FacsvPanel **out);

/**
 * Reads a CSV with dates in rows and a header of series labels.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum FacsvStatus facsv_panel_load_csv(const char *path, bool demean, struct FacsvPanel **out);

/**
 * # Safety
 * `panel` must come from this library and not be used afterwards.
 */
void facsv_panel_free(struct FacsvPanel *panel);

/**
 * # Safety
 * All pointers must be valid.
 */
enum FacsvStatus facsv_panel_dims(const struct FacsvPanel *panel,
                                  size_t *n_series,
                                  size_t *n_dates);

/**
 * Runs the sampler. `config_toml` holds a configuration document (NULL for
 * defaults); `factors` overrides its factor count when non-negative.
 *
 * # Safety
 * `panel` must be valid, `config_toml` NULL or NUL-terminated, `out` writable.
 */
enum FacsvStatus facsv_fit(const struct FacsvPanel *panel,
                           const char *config_toml,
                           int64_t factors,
                           struct FacsvStore **out);

/**
 * # Safety
 * `path` must be NUL-terminated and `out` writable.
 */
enum FacsvStatus facsv_store_load(const char *path, struct FacsvStore **out);

/**
 * # Safety
 * `store` must be valid and `path` NUL-terminated.
 */
enum FacsvStatus facsv_store_save(const struct FacsvStore *store, const char *path);

/**
 * # Safety
 * `store` must come from this library and not be used afterwards.
 */
void facsv_store_free(struct FacsvStore *store);

/**
 * Number of kept draws, series, factors and dates.
 *
 * # Safety
 * All pointers must be valid.
 */
enum FacsvStatus facsv_store_dims(const struct FacsvStore *store,
                                  size_t *n_draws,
                                  size_t *n_series,
                                  size_t *n_factors,
                                  size_t *n_dates);

/**
 * Σ_t of draw `draw` into `out` (m × m, row-major); `out_len` must be m².
 *
 * # Safety
 * `store` must be valid and `out` point to `out_len` doubles.
 */
enum FacsvStatus facsv_store_covariance(const struct FacsvStore *store,
                                        size_t draw,
                                        size_t date,
                                        double *out,
                                        size_t out_len);

/**
 * Log predictive density of `y` (length m) at `horizon` dates past the fit.
 *
 * # Safety
 * `store` must be valid, `y` point to `n` doubles and `out` be writable.
 */
enum FacsvStatus facsv_store_log_predictive(const struct FacsvStore *store,
                                            const double *y,
                                            size_t n,
                                            size_t horizon,
                                            uint64_t seed,
                                            double *out);

/**
 * Global minimum-variance weights for an m × m covariance (row-major).
 *
 * # Safety
 * `sigma` must point to m² doubles and `weights` to m doubles.
 */
enum FacsvStatus facsv_min_variance_weights(const double *sigma, size_t m, double *weights);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FACSV_H */
