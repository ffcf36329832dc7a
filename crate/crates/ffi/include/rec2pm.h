#ifndef REC2PM_H
#define REC2PM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Memory update mode codes.
#define REC2PM_MODE_OVERWRITE 0

#define REC2PM_MODE_APPEND 1

// Result of every fallible call.
typedef enum Rec2pmStatus {
  REC2PM_STATUS_OK = 0,
  REC2PM_STATUS_NULL_POINTER = 1,
  REC2PM_STATUS_INVALID_ARGUMENT = 2,
  REC2PM_STATUS_IO = 3,
  REC2PM_STATUS_FORMAT = 4,
  REC2PM_STATUS_SHAPE = 5,
  REC2PM_STATUS_RUNTIME = 6,
  REC2PM_STATUS_PANIC = 7,
} Rec2pmStatus;

// Loaded model parameters.
typedef struct Rec2pmModel Rec2pmModel;

// Streaming state of one user.
typedef struct Rec2pmSession Rec2pmSession;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread, or null. Valid until the
// next failing call on the same thread.
const char *rec2pm_last_error(void);

// Library version as a static NUL-terminated string.
const char *rec2pm_version(void);

// Reads an `R2PW` parameter file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum Rec2pmStatus rec2pm_model_load(const char *path, struct Rec2pmModel **out);

// Randomly initialised memory model with segment length `l_seg`.
//
// # Safety
// `out` must be writable.
enum Rec2pmStatus rec2pm_model_init(uint32_t n_items,
                                    uint32_t d_model,
                                    uint32_t n_layers,
                                    uint32_t n_heads,
                                    uint32_t slots,
                                    uint32_t l_seg,
                                    uint64_t seed,
                                    struct Rec2pmModel **out);

// Writes the model as an `R2PW` file.
//
// # Safety
// `model` must come from this library; `path` must be NUL-terminated.
enum Rec2pmStatus rec2pm_model_save(const struct Rec2pmModel *model, const char *path);

// Catalog size of the model, 0 for a null handle.
//
// # Safety
// `model` must be null or come from this library.
uint32_t rec2pm_model_n_items(const struct Rec2pmModel *model);

// Segment length of the model, 0 for a null handle.
//
// # Safety
// `model` must be null or come from this library.
uint32_t rec2pm_model_segment_len(const struct Rec2pmModel *model);

// # Safety
// `model` must be null or come from this library, and not be used again.
void rec2pm_model_free(struct Rec2pmModel *model);

// Empty session over a memory model.
//
// # Safety
// `model` must come from this library; `out` must be writable.
enum Rec2pmStatus rec2pm_session_new(const struct Rec2pmModel *model,
                                     uint8_t mode,
                                     struct Rec2pmSession **out);

// Appends `len` interactions; each completed segment updates the memory.
//
// # Safety
// `session` must come from this library; `items` must hold `len` values.
enum Rec2pmStatus rec2pm_session_ingest(struct Rec2pmSession *session,
                                        const uint32_t *items,
                                        size_t len);

// Top `k` items by score. Writes `min(k, n_items)` ids and scores and
// stores that count in `out_len`.
//
// # Safety
// `out_items` and `out_scores` must have room for `k` values.
enum Rec2pmStatus rec2pm_session_predict(struct Rec2pmSession *session,
                                         size_t k,
                                         uint32_t *out_items,
                                         float *out_scores,
                                         size_t *out_len);

// Items waiting in the current, not yet absorbed, segment.
//
// # Safety
// `session` must be null or come from this library.
size_t rec2pm_session_pending(const struct Rec2pmSession *session);

// Segments absorbed into the memory so far.
//
// # Safety
// `session` must be null or come from this library.
size_t rec2pm_session_segments(const struct Rec2pmSession *session);

// Size of the memory file the session would write, 0 before the first
// full segment.
//
// # Safety
// `session` must come from this library; `out` must be writable.
enum Rec2pmStatus rec2pm_session_memory_bytes(const struct Rec2pmSession *session, size_t *out);

// Writes the session memory as an `R2PM` file.
//
// # Safety
// `session` must come from this library; `path` must be NUL-terminated.
enum Rec2pmStatus rec2pm_session_save_memory(const struct Rec2pmSession *session, const char *path);

// Replaces the session memory with an `R2PM` file and clears pending items.
//
// # Safety
// `session` must come from this library; `path` must be NUL-terminated.
enum Rec2pmStatus rec2pm_session_load_memory(struct Rec2pmSession *session, const char *path);

// # Safety
// `session` must be null or come from this library, and not be used again.
void rec2pm_session_free(struct Rec2pmSession *session);

// Float bytes of a token memory; `u64::MAX` for an unknown mode.
uint64_t rec2pm_token_footprint(uint32_t slots, uint32_t dim, uint32_t segments, uint8_t mode);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* REC2PM_H */
