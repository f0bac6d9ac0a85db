#ifndef MGNM_H
#define MGNM_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. Zero is success.
 */
typedef enum MgnmStatus {
  MGNM_STATUS_OK = 0,
  MGNM_STATUS_NULL_POINTER = 1,
  MGNM_STATUS_INVALID_ARGUMENT = 2,
  MGNM_STATUS_IO = 3,
  MGNM_STATUS_CHECKPOINT = 4,
  MGNM_STATUS_DATA = 5,
  MGNM_STATUS_NON_FINITE = 6,
  MGNM_STATUS_PANIC = 7,
  MGNM_STATUS_OTHER = 8,
} MgnmStatus;

/**
 * A prepared dataset split.
 */
typedef struct MgnmDataset MgnmDataset;

/**
 * A loaded model.
 */
typedef struct MgnmModel MgnmModel;

/**
 * Ranking metrics for one evaluation.
 */
typedef struct MgnmMetrics {
  double gauc;
  double ndcg_at_k;
  double hit_at_k;
  double mrr_at_k;
  size_t k;
  size_t num_instances;
} MgnmMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *mgnm_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *mgnm_version(void);

/**
 * Loads a checkpoint (`path` plus its `.json` sidecar).
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum MgnmStatus mgnm_model_load(const char *path, struct MgnmModel **out);

/**
 * Releases a model; null is ignored.
 *
 * # Safety
 * `model` must come from [`mgnm_model_load`] and not be used afterwards.
 */
void mgnm_model_free(struct MgnmModel *model);

/**
 * Number of items, excluding the padding index 0. Valid item ids are
 * `1..=num_items`.
 *
 * # Safety
 * `model` must be a live handle or null (returns 0).
 */
size_t mgnm_model_num_items(const struct MgnmModel *model);

/**
 * Number of users the model was trained with.
 *
 * # Safety
 * `model` must be a live handle or null (returns 0).
 */
size_t mgnm_model_num_users(const struct MgnmModel *model);

/**
 * Scores `num_candidates` items for one user. `history` holds item ids,
 * oldest first; only the most recent `capacity` are used. Writes one fused
 * score per candidate to `out_scores`. `seed` fixes the routing
 * initialisation, so equal inputs give equal scores.
 *
 * # Safety
 * `history` and `candidates` must point to the given number of ids, and
 * `out_scores` to `num_candidates` writable doubles.
 */
enum MgnmStatus mgnm_model_score(const struct MgnmModel *model,
                                 size_t user,
                                 const uint32_t *history,
                                 size_t history_len,
                                 const uint32_t *candidates,
                                 size_t num_candidates,
                                 uint64_t seed,
                                 double *out_scores);

/**
 * Loads a split written by `mgnm prepare` or `mgnm synth`.
 *
 * # Safety
 * `dir` must be a NUL-terminated string and `out` a writable pointer.
 */
enum MgnmStatus mgnm_dataset_load(const char *dir, struct MgnmDataset **out);

/**
 * Releases a dataset; null is ignored.
 *
 * # Safety
 * `dataset` must come from [`mgnm_dataset_load`] and not be used afterwards.
 */
void mgnm_dataset_free(struct MgnmDataset *dataset);

/**
 * Evaluates a model on the validation (`segment` 1) or test (`segment` 2)
 * targets. `negatives` of 0 ranks against every unseen item.
 *
 * # Safety
 * Handles must be live and `out` writable.
 */
enum MgnmStatus mgnm_evaluate(const struct MgnmModel *model,
                              const struct MgnmDataset *dataset,
                              uint32_t segment,
                              size_t k,
                              size_t negatives,
                              uint64_t seed,
                              struct MgnmMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MGNM_H */
