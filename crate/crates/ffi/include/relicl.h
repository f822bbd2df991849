#ifndef RELICL_H
#define RELICL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum {
  RL_STATUS_OK = 0,
  RL_STATUS_NULL_POINTER = 1,
  RL_STATUS_INVALID_UTF8 = 2,
  /**
   * Bad query, arguments or input files.
   */
  RL_STATUS_INVALID_INPUT = 3,
  /**
   * Failure while running.
   */
  RL_STATUS_RUNTIME = 4,
  RL_STATUS_PANIC = 5,
  /**
   * The caller's buffer cannot hold the result; nothing was written.
   */
  RL_STATUS_BUFFER_TOO_SMALL = 6,
  RL_STATUS_OUT_OF_RANGE = 7,
} RlStatus;

/**
 * Model parameters and configuration.
 */
typedef struct RlModel RlModel;

/**
 * Results of one prediction call.
 */
typedef struct RlPredictions RlPredictions;

/**
 * A loaded store.
 */
typedef struct RlStore RlStore;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *rl_version(void);

/**
 * Length in bytes of the calling thread's last error message, without the NUL.
 */
size_t rl_last_error_length(void);

/**
 * Copies the last error message, NUL-terminated, into `buf`.
 *
 * # Safety
 * `buf` must be writable for `cap` bytes.
 */
RlStatus rl_last_error_message(char *buf, size_t cap);

/**
 * Ingests a directory of CSV files into a new store.
 *
 * # Safety
 * `dir` is a NUL-terminated path; `out` is writable.
 */
RlStatus rl_store_ingest_dir(const char *dir, RlStore **out);

/**
 * Opens a store file.
 *
 * # Safety
 * `path` is a NUL-terminated path; `out` is writable.
 */
RlStatus rl_store_load(const char *path, RlStore **out);

/**
 * Writes a store file.
 *
 * # Safety
 * `store` is a live handle; `path` is a NUL-terminated path.
 */
RlStatus rl_store_save(const RlStore *store, const char *path);

/**
 * Number of rows of table `table`.
 *
 * # Safety
 * `store` is a live handle; `table` is NUL-terminated; `out` is writable.
 */
RlStatus rl_store_row_count(const RlStore *store, const char *table, size_t *out);

/**
 * # Safety
 * `store` is null or a handle not yet freed.
 */
void rl_store_free(RlStore *store);

/**
 * Creates an untrained model with the preset of `run_mode` ("fast", "normal",
 * "best" or "toy").
 *
 * # Safety
 * `run_mode` is NUL-terminated; `out` is writable.
 */
RlStatus rl_model_new(const char *run_mode, uint64_t seed, RlModel **out);

/**
 * Loads a checkpoint directory.
 *
 * # Safety
 * `dir` is NUL-terminated; `out` is writable.
 */
RlStatus rl_model_load(const char *dir, RlModel **out);

/**
 * Number of scalar parameters.
 *
 * # Safety
 * `model` is a live handle; `out` is writable.
 */
RlStatus rl_model_param_count(const RlModel *model, size_t *out);

/**
 * # Safety
 * `model` is null or a handle not yet freed.
 */
void rl_model_free(RlModel *model);

/**
 * Predicts a query for entity keys `keys[0..n_keys]` (every visible entity when
 * `keys` is null) at `anchor_time` (ISO-8601; may be null for static queries)
 * with per-hop neighbor caps `fanouts[0..n_fanouts]`.
 *
 * # Safety
 * Handles are live; strings are NUL-terminated; `keys` and `fanouts` point to
 * `n_keys` strings and `n_fanouts` values (or are null with a zero count);
 * `out` is writable.
 */
RlStatus rl_predict(const RlModel *model,
                    const RlStore *store,
                    const char *query,
                    const char *anchor_time,
                    const char *const *keys,
                    size_t n_keys,
                    const size_t *fanouts,
                    size_t n_fanouts,
                    uint64_t seed,
                    RlPredictions **out);

/**
 * Number of prediction rows, or 0 for a null handle.
 *
 * # Safety
 * `preds` is null or a live handle.
 */
size_t rl_predictions_len(const RlPredictions *preds);

/**
 * Prediction value and anchor time (epoch ms) of row `i`.
 *
 * # Safety
 * `preds` is a live handle; `value` and `anchor_ms` are writable.
 */
RlStatus rl_predictions_get(const RlPredictions *preds,
                            size_t i,
                            double *value,
                            int64_t *anchor_ms);

/**
 * Copies the entity key of row `i`, NUL-terminated, into `buf`.
 *
 * # Safety
 * `preds` is a live handle; `buf` is writable for `cap` bytes.
 */
RlStatus rl_predictions_entity(const RlPredictions *preds, size_t i, char *buf, size_t cap);

/**
 * # Safety
 * `preds` is null or a handle not yet freed.
 */
void rl_predictions_free(RlPredictions *preds);

/**
 * Area under the ROC curve of `scores` against 0/1 `labels`, both of length `n`.
 *
 * # Safety
 * `scores` and `labels` point to `n` values; `out` is writable.
 */
RlStatus rl_auroc(const double *scores, const double *labels, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RELICL_H */
