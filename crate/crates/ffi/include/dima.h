#ifndef DIMA_H
#define DIMA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Waypoints in a planned trajectory; plans are written as `2 * DIMA_HORIZON` doubles.
 */
#define DIMA_HORIZON 6

typedef enum DimaStatus {
  DIMA_STATUS_OK = 0,
  DIMA_STATUS_NULL_ARGUMENT = 1,
  DIMA_STATUS_INVALID_UTF8 = 2,
  DIMA_STATUS_INVALID_ARGUMENT = 3,
  DIMA_STATUS_IO = 4,
  DIMA_STATUS_PARSE = 5,
  DIMA_STATUS_CHECKPOINT = 6,
  DIMA_STATUS_OUT_OF_RANGE = 7,
  DIMA_STATUS_DIVERGED = 8,
  DIMA_STATUS_FAILED = 9,
  DIMA_STATUS_PANIC = 10,
} DimaStatus;

/**
 * Scenes loaded from a JSON-lines dataset.
 */
typedef struct DimaDataset DimaDataset;

/**
 * A model restored from a checkpoint.
 */
typedef struct DimaModel DimaModel;

/**
 * Aggregate planning metrics. Errors are in meters, `collision_rate` in
 * percent; all are NaN when `count` is 0.
 */
typedef struct DimaMetrics {
  size_t count;
  double l2_1s;
  double l2_2s;
  double l2_3s;
  double ave_123;
  double ave_all;
  double collision_rate;
} DimaMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *dima_version(void);

/**
 * Copies the calling thread's last error message into `buf` (truncated and
 * always NUL-terminated when `len > 0`). Returns the full message length in
 * bytes, excluding the terminator, so callers can size a second attempt.
 *
 * # Safety
 * `buf` must be null or valid for `len` writable bytes.
 */
size_t dima_last_error_message(char *buf, size_t len);

/**
 * Loads a checkpoint written by `dima train` and stores a new model handle in `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DimaStatus dima_model_load(const char *path, struct DimaModel **out);

/**
 * Releases a model handle; null is ignored.
 *
 * # Safety
 * `model` must come from `dima_model_load` and not be used afterwards.
 */
void dima_model_free(struct DimaModel *model);

/**
 * Plans one scene given as a JSON object (one dataset line). Writes
 * `2 * DIMA_HORIZON` doubles, x then y per waypoint, ego frame.
 *
 * # Safety
 * `scene_json` must be NUL-terminated; `out_xy` must hold `2 * DIMA_HORIZON` doubles.
 */
enum DimaStatus dima_model_plan_json(const struct DimaModel *model,
                                     const char *scene_json,
                                     double *out_xy);

/**
 * Loads a JSON-lines dataset and stores a new handle in `*out`.
 *
 * # Safety
 * `path` must be NUL-terminated and `out` valid.
 */
enum DimaStatus dima_dataset_load(const char *path, struct DimaDataset **out);

/**
 * Releases a dataset handle; null is ignored.
 *
 * # Safety
 * `dataset` must come from `dima_dataset_load` and not be used afterwards.
 */
void dima_dataset_free(struct DimaDataset *dataset);

/**
 * Number of scenes, or 0 for a null handle.
 *
 * # Safety
 * `dataset` must be null or a live handle.
 */
size_t dima_dataset_len(const struct DimaDataset *dataset);

/**
 * Scene id at `index`.
 *
 * # Safety
 * `dataset` must be a live handle and `out_id` valid.
 */
enum DimaStatus dima_dataset_scene_id(const struct DimaDataset *dataset,
                                      size_t index,
                                      uint64_t *out_id);

/**
 * Plans the scene at `index`. With a non-null `mllm` the plan fuses both
 * branches the same way as `dima eval --dual`.
 *
 * # Safety
 * Handles must be live (`mllm` may be null); `out_xy` must hold `2 * DIMA_HORIZON` doubles.
 */
enum DimaStatus dima_dataset_plan(const struct DimaModel *model,
                                  const struct DimaModel *mllm,
                                  const struct DimaDataset *dataset,
                                  size_t index,
                                  double *out_xy);

/**
 * Evaluates on a split (`full`, `targeted`, `longtail:<kind>`) under a
 * protocol (`standardized` or `vad`). A null `model` echoes the ground
 * truth, which checks the harness; a non-null `mllm` enables dual fusion.
 *
 * # Safety
 * Strings must be NUL-terminated, handles live or null as described, `out` valid.
 */
enum DimaStatus dima_evaluate(const struct DimaModel *model,
                              const struct DimaModel *mllm,
                              const struct DimaDataset *dataset,
                              const char *split,
                              const char *protocol,
                              struct DimaMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DIMA_H */
