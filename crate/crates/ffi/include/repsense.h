#ifndef REPSENSE_H
#define REPSENSE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Rep-end indices carried inline by one [`RsEvent`].
 */
#define RS_MAX_MARKERS 8

typedef enum RsStatus {
  RS_STATUS_OK = 0,
  RS_STATUS_NULL_POINTER = 1,
  RS_STATUS_IO = 2,
  RS_STATUS_FORMAT = 3,
  RS_STATUS_PARSE = 4,
  RS_STATUS_VALIDATION = 5,
  RS_STATUS_STATE = 6,
  RS_STATUS_VERSION = 7,
  RS_STATUS_INVALID_UTF8 = 8,
  RS_STATUS_PANIC = 9,
} RsStatus;

/**
 * Opaque engine handle.
 */
typedef struct RsEngine RsEngine;

/**
 * One classifier tick.
 */
typedef struct RsEvent {
  uint64_t tick;
  double wall_time_ms;
  uint32_t windows_used;
  float confidence;
  bool near_failure;
  /**
   * Rep ends detected this tick; only the first `RS_MAX_MARKERS` are stored.
   */
  uint32_t marker_count;
  uint64_t markers[RS_MAX_MARKERS];
  double latency_ms;
  uint64_t end_index;
} RsEvent;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *rs_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *rs_version(void);

/**
 * Opens an engine from a classifier weight file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum RsStatus rs_engine_open(const char *path, bool remap_watch, struct RsEngine **out);

/**
 * Opens an engine around a freshly initialized compact model. Useful for
 * integration testing without weight files.
 *
 * # Safety
 * `out` must be a writable pointer.
 */
enum RsStatus rs_engine_new_untrained(uint64_t seed, struct RsEngine **out);

/**
 * Feeds one raw sample: time in seconds, then ax, ay, az, gx, gy, gz.
 *
 * # Safety
 * `engine` must come from an `rs_engine_*` constructor and `values` must
 * point to 6 doubles.
 */
enum RsStatus rs_engine_push(struct RsEngine *engine, double t, const double *values);

/**
 * Flushes buffered samples at the end of a recording.
 *
 * # Safety
 * `engine` must be a live handle.
 */
enum RsStatus rs_engine_finish(struct RsEngine *engine);

/**
 * Number of queued events.
 *
 * # Safety
 * `engine` must be a live handle or null (which yields 0).
 */
size_t rs_engine_pending(const struct RsEngine *engine);

/**
 * Pops the oldest queued event into `out`. `has_event` is set to false
 * when the queue is empty.
 *
 * # Safety
 * `engine` must be a live handle; `out` and `has_event` writable.
 */
enum RsStatus rs_engine_poll(struct RsEngine *engine, struct RsEvent *out, bool *has_event);

/**
 * Releases an engine. Null is ignored.
 *
 * # Safety
 * `engine` must be null or a handle not yet freed.
 */
void rs_engine_free(struct RsEngine *engine);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* REPSENSE_H */
