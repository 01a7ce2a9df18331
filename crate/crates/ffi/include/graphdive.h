/* C interface for the graphdive library. */

#ifndef GRAPHDIVE_H
#define GRAPHDIVE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible call.
 */
typedef enum GdiveStatus {
  GDIVE_STATUS_OK = 0,
  GDIVE_STATUS_NULL_ARGUMENT = 1,
  GDIVE_STATUS_INVALID_UTF8 = 2,
  GDIVE_STATUS_INVALID_ARGUMENT = 3,
  GDIVE_STATUS_IO_FAILURE = 4,
  GDIVE_STATUS_TRAIN_FAILURE = 5,
  GDIVE_STATUS_EVAL_FAILURE = 6,
  GDIVE_STATUS_GRAD_CHECK_FAILED = 7,
} GdiveStatus;

/**
 * Opaque dataset handle.
 */
typedef struct GdiveDataset GdiveDataset;

/**
 * Opaque trained-model handle: the checkpoint plus the best-epoch model.
 */
typedef struct GdiveModel GdiveModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread. Never null; empty
 * when no failure has occurred. Valid until the next failing call.
 */
const char *gdive_last_error(void);

/**
 * Library version as a static string.
 */
const char *gdive_version(void);

/**
 * Release a string returned by this library.
 *
 * # Safety
 * `s` must be a pointer previously returned through one of this
 * library's string out-parameters, not yet freed.
 */
void gdive_string_free(char *s);

/**
 * Load a dataset file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be a valid pointer.
 */
enum GdiveStatus gdive_dataset_load(const char *path, struct GdiveDataset **out);

/**
 * Generate a synthetic benchmark dataset from a flat key=value spec.
 *
 * # Safety
 * `spec_text` must be a NUL-terminated string; `out` must be valid.
 */
enum GdiveStatus gdive_dataset_synth(const char *spec_text, struct GdiveDataset **out);

/**
 * Write a dataset to a file (atomic).
 *
 * # Safety
 * `ds` must be a live dataset handle; `path` a NUL-terminated string.
 */
enum GdiveStatus gdive_dataset_save(const struct GdiveDataset *ds, const char *path);

/**
 * Number of graphs, or 0 for a null handle.
 *
 * # Safety
 * `ds` must be null or a live dataset handle.
 */
uintptr_t gdive_dataset_len(const struct GdiveDataset *ds);

/**
 * Number of tasks, or 0 for a null handle.
 *
 * # Safety
 * `ds` must be null or a live dataset handle.
 */
uintptr_t gdive_dataset_num_tasks(const struct GdiveDataset *ds);

/**
 * Destroy a dataset handle.
 *
 * # Safety
 * `ds` must be null or a handle produced by this library, not yet freed.
 */
void gdive_dataset_free(struct GdiveDataset *ds);

/**
 * Train a model on `ds` with a flat key=value config.
 *
 * # Safety
 * `ds` must be a live dataset handle; `config_text` a NUL-terminated
 * string; `out` a valid pointer.
 */
enum GdiveStatus gdive_train(const struct GdiveDataset *ds,
                             const char *config_text,
                             struct GdiveModel **out);

/**
 * Load a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` a valid pointer.
 */
enum GdiveStatus gdive_model_load(const char *path, struct GdiveModel **out);

/**
 * Write a checkpoint file (atomic, checksummed).
 *
 * # Safety
 * `model` must be a live model handle; `path` a NUL-terminated string.
 */
enum GdiveStatus gdive_model_save(const struct GdiveModel *model, const char *path);

/**
 * `p(y=1 | graph, task)` for one graph of `ds` under the best-epoch
 * parameters.
 *
 * # Safety
 * `model` and `ds` must be live handles; `out_prob` a valid pointer.
 */
enum GdiveStatus gdive_model_predict(const struct GdiveModel *model,
                                     const struct GdiveDataset *ds,
                                     uintptr_t graph_index,
                                     uintptr_t task,
                                     double *out_prob);

/**
 * Evaluate on a split ("train" | "valid" | "test"); returns the report as
 * a TSV string (free with [`gdive_string_free`]).
 *
 * # Safety
 * `model` and `ds` must be live handles; `split` a NUL-terminated string;
 * `out_report` a valid pointer.
 */
enum GdiveStatus gdive_model_eval(const struct GdiveModel *model,
                                  const struct GdiveDataset *ds,
                                  const char *split,
                                  char **out_report);

/**
 * Per-class mean gate weights on a split, as a TSV string.
 *
 * # Safety
 * Same contracts as [`gdive_model_eval`].
 */
enum GdiveStatus gdive_model_expert_usage(const struct GdiveModel *model,
                                          const struct GdiveDataset *ds,
                                          const char *split,
                                          uintptr_t task,
                                          char **out_report);

/**
 * Destroy a model handle.
 *
 * # Safety
 * `model` must be null or a handle produced by this library, not freed.
 */
void gdive_model_free(struct GdiveModel *model);

/**
 * Run the finite-difference gradient-check suite over `seeds` seeds.
 * Writes the worst relative error and fails unless it is below 1e-4.
 *
 * # Safety
 * `out_max_rel_error` must be a valid pointer.
 */
enum GdiveStatus gdive_gradcheck(uintptr_t seeds, double *out_max_rel_error);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GRAPHDIVE_H */
