#ifndef SUPPORT_POLICY_H
#define SUPPORT_POLICY_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SpStatus {
  SP_STATUS_OK = 0,
  SP_STATUS_NULL_POINTER = 1,
  SP_STATUS_INVALID_UTF8 = 2,
  SP_STATUS_INVALID_DATASET = 3,
  SP_STATUS_INVALID_ARGUMENT = 4,
  SP_STATUS_OUT_OF_RANGE = 5,
  SP_STATUS_SESSION_EXHAUSTED = 6,
  SP_STATUS_NO_PENDING_TRIAL = 7,
  SP_STATUS_PANIC = 99,
} SpStatus;

// A validated dataset.
typedef struct SpDataset SpDataset;

// One learning session over a dataset.
typedef struct SpSession SpSession;

// Estimator parameters; see [`sp_engine_params_default`].
typedef struct SpEngineParams {
  double alpha;
  size_t k;
  size_t warmup;
  double gamma;
} SpEngineParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Last error message on this thread; empty after a successful call. The
// pointer stays valid until the next call on this thread.
const char *sp_last_error(void);

struct SpEngineParams sp_engine_params_default(void);

// Parses and validates a dataset document.
//
// # Safety
// `json` must be a NUL-terminated string and `out` a writable pointer.
enum SpStatus sp_dataset_from_json(const char *json, struct SpDataset **out);

// Number of items, or 0 for a null handle.
//
// # Safety
// `ds` must be null or a live handle.
size_t sp_dataset_len(const struct SpDataset *ds);

// # Safety
// `ds` must be null or a handle not yet freed.
void sp_dataset_free(struct SpDataset *ds);

// Starts a session. `policy_kind` is `thread-knn`, `thread-linucb`,
// `random` or `fixed:<action_id>`. A NaN `lambda` optimizes loss alone.
// A null `params` uses the defaults. The session keeps its own reference
// to the dataset.
//
// # Safety
// `ds` must be a live handle, `policy_kind` a NUL-terminated string,
// `params` null or readable, and `out` writable.
enum SpStatus sp_session_new(const struct SpDataset *ds,
                             const char *policy_kind,
                             double lambda,
                             const struct SpEngineParams *params,
                             size_t horizon,
                             uint64_t seed,
                             struct SpSession **out);

// Selects support for dataset item `item_index`; writes the action index
// in dataset order.
//
// # Safety
// `s` must be a live handle and `out_action` writable.
enum SpStatus sp_session_select(struct SpSession *s, size_t item_index, size_t *out_action);

// Records the answer to the pending trial; writes the 0/1 loss.
//
// # Safety
// `s` must be a live handle and `out_loss` null or writable.
enum SpStatus sp_session_record(struct SpSession *s,
                                size_t item_index,
                                size_t human_label,
                                uint8_t *out_loss);

// Index of the upcoming trial (1-based), or 0 for a null handle.
//
// # Safety
// `s` must be null or a live handle.
size_t sp_session_trial(const struct SpSession *s);

// Writes the frozen policy as a JSON string.
//
// # Safety
// `s` must be a live handle and `out` writable.
enum SpStatus sp_session_snapshot_json(const struct SpSession *s, char **out);

// Writes the interaction log as JSON lines.
//
// # Safety
// `s` must be a live handle and `out` writable.
enum SpStatus sp_session_log_jsonl(const struct SpSession *s, char **out);

// # Safety
// `s` must be null or a handle not yet freed.
void sp_session_free(struct SpSession *s);

// # Safety
// `p` must be null or a string returned by this library, not yet freed.
void sp_string_free(char *p);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SUPPORT_POLICY_H */
