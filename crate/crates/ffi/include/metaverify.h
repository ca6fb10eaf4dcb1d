#ifndef METAVERIFY_H
#define METAVERIFY_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. Zero is success.
 */
typedef enum MvStatus {
  MV_STATUS_OK = 0,
  MV_STATUS_NULL_POINTER = 1,
  MV_STATUS_INVALID_UTF8 = 2,
  MV_STATUS_PARSE = 3,
  MV_STATUS_VALIDATION = 4,
  MV_STATUS_IO = 5,
  /**
   * The run abstained: no candidate response satisfies the constraints.
   */
  MV_STATUS_NO_FEASIBLE_CANDIDATE = 6,
  MV_STATUS_ALL_EXPERTS_FAILED = 7,
  MV_STATUS_INVALID_CONFIG = 8,
  MV_STATUS_PANIC = 9,
} MvStatus;

/**
 * Opaque run result.
 */
typedef struct MvResult MvResult;

/**
 * Opaque validated scenario.
 */
typedef struct MvScenario MvScenario;

/**
 * Overrides for one run. Negative or zero sentinels keep the scenario's
 * (or engine) default; see `mv_run_options_default`.
 */
typedef struct MvRunOptions {
  /**
   * Anchor threshold; 0 keeps the default.
   */
  uint32_t theta;
  /**
   * Verify-call budget; negative keeps the default.
   */
  int64_t budget;
  /**
   * Gate threshold in [0, 1]; negative keeps the default.
   */
  double gate_threshold;
  /**
   * Run seed; negative keeps the default.
   */
  int64_t seed;
  /**
   * Apply facts-consistency gating.
   */
  bool use_facts;
} MvRunOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *mv_version(void);

/**
 * Message for the last failed call on this thread; empty if none.
 */
const char *mv_last_error_message(void);

struct MvRunOptions mv_run_options_default(void);

/**
 * Parses and validates a scenario from a JSON string.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be writable.
 */
enum MvStatus mv_scenario_from_json(const char *json, struct MvScenario **out);

/**
 * Loads and validates a scenario file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum MvStatus mv_scenario_load(const char *path, struct MvScenario **out);

/**
 * # Safety
 * `scenario` must come from this library and not be freed twice.
 */
void mv_scenario_free(struct MvScenario *scenario);

/**
 * Runs the pipeline. A result handle is produced for successful runs and for
 * abstentions (`MV_STATUS_NO_FEASIBLE_CANDIDATE`, answer is NULL) so the
 * audit log can still be read.
 *
 * # Safety
 * `scenario` must be a live handle; `options` may be NULL for defaults;
 * `out` must be writable.
 */
enum MvStatus mv_run(const struct MvScenario *scenario,
                     const struct MvRunOptions *options,
                     struct MvResult **out);

/**
 * Answer summary as a JSON object, or NULL if the run abstained.
 *
 * # Safety
 * `result` must be a live handle or NULL.
 */
const char *mv_result_answer_json(const struct MvResult *result);

/**
 * Audit log, one JSON entry per line.
 *
 * # Safety
 * `result` must be a live handle or NULL.
 */
const char *mv_result_audit_log(const struct MvResult *result);

/**
 * # Safety
 * `result` must be a live handle or NULL.
 */
uint64_t mv_result_verify_calls(const struct MvResult *result);

/**
 * # Safety
 * `result` must come from this library and not be freed twice.
 */
void mv_result_free(struct MvResult *result);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* METAVERIFY_H */
