#ifndef CDA_H
#define CDA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum CdaStatus {
  CDA_STATUS_OK = 0,
  CDA_STATUS_NULL_POINTER = 1,
  CDA_STATUS_INVALID_ARGUMENT = 2,
  CDA_STATUS_IO = 3,
  CDA_STATUS_DATA = 4,
  CDA_STATUS_MODEL = 5,
  CDA_STATUS_TRAIN = 6,
  CDA_STATUS_BUFFER_TOO_SMALL = 7,
  CDA_STATUS_PANIC = 8,
} CdaStatus;

/**
 * A dataset of episodes in raw units.
 */
typedef struct CdaDataset CdaDataset;

/**
 * A trained model together with the statistics used to normalise its
 * training data.
 */
typedef struct CdaModel CdaModel;

typedef struct CdaMetrics {
  /**
   * Zero when R² is undefined (constant truth); see `r2_defined`.
   */
  double r2;
  bool r2_defined;
  double rmse;
  double mae;
  size_t n;
} CdaMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. Valid until the
 * next call into the library from the same thread.
 */
const char *cda_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *cda_version(void);

/**
 * Simulates `episodes` episodes of `length` steps from the default
 * structural model.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum CdaStatus cda_dataset_simulate(size_t episodes,
                                    size_t length,
                                    uint64_t seed,
                                    struct CdaDataset **out);

/**
 * Reads a CSV file with the default treatment vocabulary.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum CdaStatus cda_dataset_load_csv(const char *path, bool target, struct CdaDataset **out);

/**
 * Number of episodes; 0 for a null handle.
 *
 * # Safety
 * `ds` must be null or a live handle.
 */
size_t cda_dataset_len(const struct CdaDataset *ds);

/**
 * Total number of (episode, step) records; 0 for a null handle.
 *
 * # Safety
 * `ds` must be null or a live handle.
 */
size_t cda_dataset_records(const struct CdaDataset *ds);

/**
 * # Safety
 * `ds` must be null or a handle not yet freed.
 */
void cda_dataset_free(struct CdaDataset *ds);

/**
 * Trains on `source` and `target` (which may be the same handle).
 * `config_json` may be null for defaults; otherwise it is a run config
 * whose `model` and `train` sections are used.
 *
 * # Safety
 * Handles must be live; `config_json` null or NUL-terminated; `out` writable.
 */
enum CdaStatus cda_model_train(const struct CdaDataset *source,
                               const struct CdaDataset *target,
                               const char *config_json,
                               struct CdaModel **out);

/**
 * Writes a checkpoint of the model and its normalisation statistics.
 *
 * # Safety
 * `model` must be live; `path` NUL-terminated.
 */
enum CdaStatus cda_model_save(const struct CdaModel *model, const char *path);

/**
 * # Safety
 * `path` NUL-terminated; `out` writable.
 */
enum CdaStatus cda_model_load(const char *path, struct CdaModel **out);

/**
 * Number of optimiser steps the model was trained for.
 *
 * # Safety
 * `model` must be null or live.
 */
size_t cda_model_steps(const struct CdaModel *model);

/**
 * Forecasts outcomes of episode `episode` for steps `split..len` from its
 * prefix, in raw units. `*written` receives the number of values; if
 * `capacity` is too small nothing is written and `BufferTooSmall` returned
 * with `*written` set to the required size.
 *
 * # Safety
 * Handles must be live; `out` must hold `capacity` doubles; `written` writable.
 */
enum CdaStatus cda_model_forecast(const struct CdaModel *model,
                                  const struct CdaDataset *data,
                                  size_t episode,
                                  size_t split,
                                  double *out,
                                  size_t capacity,
                                  size_t *written);

/**
 * Estimated effect on the next covariates (raw units) of treatment `z`
 * against `z_ref` at step `t` of an episode. `out` must hold `d_x` values.
 *
 * # Safety
 * Handles must be live; `out` must hold `capacity` doubles.
 */
enum CdaStatus cda_model_cate(const struct CdaModel *model,
                              const struct CdaDataset *data,
                              size_t episode,
                              size_t t,
                              size_t z,
                              size_t z_ref,
                              double *out,
                              size_t capacity);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void cda_model_free(struct CdaModel *model);

/**
 * R², RMSE and MAE of `n` paired values.
 *
 * # Safety
 * `y_true` and `y_pred` must hold `n` doubles; `out` must be writable.
 */
enum CdaStatus cda_metrics(const double *y_true,
                           const double *y_pred,
                           size_t n,
                           struct CdaMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CDA_H */
