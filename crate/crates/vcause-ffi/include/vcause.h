#ifndef VCAUSE_H
#define VCAUSE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Query relation: latest version at or before, or earliest at or after.
#define VC_RELATION_LE 0

#define VC_RELATION_GE 1

#define VC_DIRECTION_BACKWARD 0

#define VC_DIRECTION_FORWARD 1

#define VC_DIRECTION_BOTH 2

typedef enum VcStatus {
  VC_STATUS_OK = 0,
  VC_STATUS_NULL_ARGUMENT = 1,
  VC_STATUS_INVALID_UTF8 = 2,
  // Malformed log line.
  VC_STATUS_PARSE = 3,
  VC_STATUS_CLOCK_REGRESSION = 4,
  // Replayed events do not reproduce a signed root.
  VC_STATUS_ROOT_MISMATCH = 5,
  VC_STATUS_UNKNOWN_ENTITY = 6,
  VC_STATUS_UNKNOWN_ENDPOINT = 7,
  VC_STATUS_INVALID_ARGUMENT = 8,
  // Malformed bundle, batch stream or key.
  VC_STATUS_DECODE = 9,
  // Well-formed bundle that failed verification.
  VC_STATUS_REJECTED = 10,
  VC_STATUS_INTERNAL = 11,
  VC_STATUS_PANIC = 12,
} VcStatus;

typedef struct VcCloud VcCloud;

typedef struct VcEndpoint VcEndpoint;

// Heap bytes owned by the caller.
typedef struct VcBuffer {
  uint8_t *data;
  size_t len;
} VcBuffer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or null. The pointer is
// valid until the next call into this library on the same thread.
const char *vc_last_error(void);

// # Safety
// `buf` must be null or a buffer returned by this library, freed once.
void vc_buffer_free(struct VcBuffer *buf);

// Creates an endpoint. `depth` 0 selects unsegmented mode. `seed` is the
// 32-byte signing key seed.
//
// # Safety
// `id` must be a NUL-terminated string, `seed` must point to 32 bytes and
// `out` must be writable.
enum VcStatus vc_endpoint_new(const char *id,
                              uint32_t depth,
                              uint64_t commit_interval,
                              const uint8_t *seed,
                              struct VcEndpoint **out);

// # Safety
// `ep` must be null or a handle from `vc_endpoint_new`, freed once.
void vc_endpoint_free(struct VcEndpoint *ep);

// Writes the 32-byte verification key.
//
// # Safety
// `ep` must be a live handle and `out` must point to 32 writable bytes.
enum VcStatus vc_endpoint_public_key(const struct VcEndpoint *ep, uint8_t *out);

// Records one JSONL log line. Blank lines are ignored. `committed`, if not
// null, is set to 1 when the line triggered a commitment.
//
// # Safety
// `ep` must be a live handle and `line` a NUL-terminated string.
enum VcStatus vc_endpoint_ingest_jsonl_line(struct VcEndpoint *ep,
                                            const char *line,
                                            uint8_t *committed);

// Forces a commitment and writes its epoch.
//
// # Safety
// `ep` must be a live handle; `epoch` may be null.
enum VcStatus vc_endpoint_commit(struct VcEndpoint *ep, uint64_t *epoch);

// Moves the batches committed since the last call into `out`.
//
// # Safety
// `ep` must be a live handle and `out` writable.
enum VcStatus vc_endpoint_take_batches(struct VcEndpoint *ep, struct VcBuffer *out);

// # Safety
// `out` must be writable.
enum VcStatus vc_cloud_new(struct VcCloud **out);

// # Safety
// `cloud` must be null or a handle from `vc_cloud_new`, freed once.
void vc_cloud_free(struct VcCloud *cloud);

// Registers an endpoint; `depth` 0 selects unsegmented mode.
//
// # Safety
// `cloud` must be a live handle and `id` a NUL-terminated string.
enum VcStatus vc_cloud_register(struct VcCloud *cloud, const char *id, uint32_t depth);

// Replays a batch stream from `vc_endpoint_take_batches`.
//
// # Safety
// `cloud` must be a live handle, `id` a NUL-terminated string and `data`
// must point to `len` bytes.
enum VcStatus vc_cloud_replay(struct VcCloud *cloud,
                              const char *id,
                              const uint8_t *data,
                              size_t len);

// Answers a query against the latest commitment and writes the bundle.
//
// # Safety
// `cloud` must be a live handle, `id` and `entity` NUL-terminated strings
// and `out` writable.
enum VcStatus vc_cloud_analyze(const struct VcCloud *cloud,
                               const char *id,
                               const char *entity,
                               uint64_t at,
                               uint8_t relation,
                               uint8_t direction,
                               struct VcBuffer *out);

// Verifies a bundle against a 32-byte verification key and the query the
// caller asked. Returns `VC_STATUS_OK` on acceptance, `VC_STATUS_REJECTED`
// with the failing check in `vc_last_error`, or `VC_STATUS_DECODE`.
// `provably_empty`, if not null, is set to 1 for an accepted empty answer.
//
// # Safety
// `vk` must point to 32 bytes, `bundle` to `len` bytes and `entity` must be
// a NUL-terminated string.
enum VcStatus vc_verify_bundle(const uint8_t *vk,
                               const uint8_t *bundle,
                               size_t len,
                               const char *entity,
                               uint64_t at,
                               uint8_t relation,
                               uint8_t direction,
                               uint8_t *provably_empty);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VCAUSE_H */
