/* SPDX-License-Identifier: Apache-2.0 */

#ifndef SBPF_H
#define SBPF_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Result code of every fallible call.
 */
typedef enum SbpfStatus {
  SBPF_STATUS_OK = 0,
  SBPF_STATUS_NULL_POINTER = 1,
  SBPF_STATUS_INVALID_ARGUMENT = 2,
  SBPF_STATUS_DECODE_FAILED = 3,
  SBPF_STATUS_VERIFICATION_FAILED = 4,
  SBPF_STATUS_EXECUTION_FAILED = 5,
  SBPF_STATUS_INTEGRITY_FAILED = 6,
  SBPF_STATUS_TRANSPORT_FAILED = 7,
  SBPF_STATUS_BUFFER_TOO_SMALL = 8,
  SBPF_STATUS_PANIC = 9,
} SbpfStatus;

/**
 * A connection to a running service.
 */
typedef struct SbpfClient SbpfClient;

/**
 * A library loaded through a client, with a VM bound to its segment.
 */
typedef struct SbpfLibrary SbpfLibrary;

/**
 * A decoded program that passed verification.
 */
typedef struct SbpfProgram SbpfProgram;

/**
 * A process-local perceptron predictor.
 */
typedef struct SbpfPss SbpfPss;

/**
 * A VM with the standard helper table and no shared segment.
 */
typedef struct SbpfVm SbpfVm;

/**
 * Result of a statfs call.
 */
typedef struct SbpfStatRecord {
  uint64_t path_len;
  uint64_t path_hash;
  uint64_t block_size;
  uint64_t blocks;
} SbpfStatRecord;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Static description of `status`.
 */
const char *sbpf_status_message(enum SbpfStatus status);

/**
 * Copies the calling thread's last error message into `buf` (NUL-terminated,
 * truncated to `cap - 1` bytes) and returns its full length.
 */
size_t sbpf_last_error(char *buf, size_t cap);

/**
 * Decodes and verifies raw bytecode against the standard helper table.
 */
enum SbpfStatus sbpf_program_load(const uint8_t *code,
                                  size_t len,
                                  struct SbpfProgram **out_program);

/**
 * Number of 8-byte slots in the program, or 0 for a null pointer.
 */
size_t sbpf_program_len(const struct SbpfProgram *program);

void sbpf_program_free(struct SbpfProgram *program);

struct SbpfVm *sbpf_vm_new(void);

void sbpf_vm_free(struct SbpfVm *vm);

/**
 * Runs `program` with `r1..r5 = args[0..5]` (all zero if `args` is null).
 */
enum SbpfStatus sbpf_vm_execute(const struct SbpfVm *vm,
                                const struct SbpfProgram *program,
                                const uint64_t *args,
                                uint64_t *out_r0);

/**
 * Wraps `payload` into a signed container. `key` points at 32 bytes. The
 * required size is always stored in `out_len`; if it exceeds `cap`, nothing
 * is written and `BufferTooSmall` is returned.
 */
enum SbpfStatus sbpf_library_sign(const uint8_t *key_bytes,
                                  const uint8_t *payload,
                                  size_t payload_len,
                                  uint8_t *out_buf,
                                  size_t cap,
                                  size_t *out_len);

/**
 * `Ok` if `container` parses and its tag matches `key`.
 */
enum SbpfStatus sbpf_library_verify(const uint8_t *key_bytes, const uint8_t *container, size_t len);

size_t sbpf_pss_hash_index(uint64_t feature, uint64_t salt);

/**
 * A zeroed model with threshold `theta` and the default salts.
 */
struct SbpfPss *sbpf_pss_new(int32_t theta);

void sbpf_pss_free(struct SbpfPss *model);

/**
 * Predicts for three features; `out_margin` may be null.
 */
enum SbpfStatus sbpf_pss_predict(const struct SbpfPss *model,
                                 const uint64_t *feature3,
                                 bool *out_decision,
                                 int32_t *out_margin);

/**
 * Trains on one labelled sample; `out_decision` receives the prediction
 * made before training and may be null.
 */
enum SbpfStatus sbpf_pss_update(struct SbpfPss *model,
                                const uint64_t *feature3,
                                bool outcome,
                                bool *out_decision);

/**
 * Weight at `index`, or 0 when out of range or `model` is null.
 */
int16_t sbpf_pss_weight(const struct SbpfPss *model, size_t index);

enum SbpfStatus sbpf_client_connect(const char *socket_path, struct SbpfClient **out_client);

void sbpf_client_free(struct SbpfClient *client);

/**
 * Service-wide copy and round-trip counters.
 */
enum SbpfStatus sbpf_client_stats(struct SbpfClient *client,
                                  uint64_t *out_copy_bytes,
                                  uint64_t *out_round_trips);

/**
 * Copy-based statfs of `path`.
 */
enum SbpfStatus sbpf_client_baseline_statfs(struct SbpfClient *client,
                                            const uint8_t *path,
                                            size_t len,
                                            struct SbpfStatRecord *out_record);

/**
 * Submits a signed container for `task_id` and attaches its segment. The
 * returned library's VM uses thread slot `thread`, or none if negative.
 */
enum SbpfStatus sbpf_client_load(struct SbpfClient *client,
                                 uint64_t task_id,
                                 const uint8_t *container,
                                 size_t len,
                                 int64_t thread,
                                 struct SbpfLibrary **out_library);

/**
 * The segment's base handle, or 0 for a null pointer.
 */
uint64_t sbpf_library_handle(const struct SbpfLibrary *library);

/**
 * Zero-copy statfs through a library loaded from the statfs program.
 */
enum SbpfStatus sbpf_library_statfs(struct SbpfClient *client,
                                    const struct SbpfLibrary *library,
                                    const uint8_t *path,
                                    size_t len,
                                    struct SbpfStatRecord *out_record);

/**
 * Runs the library's program on its segment-bound VM.
 */
enum SbpfStatus sbpf_library_execute(const struct SbpfLibrary *library,
                                     const uint64_t *args,
                                     uint64_t *out_r0);

void sbpf_library_free(struct SbpfLibrary *library);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SBPF_H */
