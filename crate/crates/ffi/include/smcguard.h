#ifndef SMCGUARD_H
#define SMCGUARD_H

/* Generated by cbindgen from smcguard-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible entry point.
 */
typedef enum {
  SMCG_STATUS_OK = 0,
  SMCG_STATUS_NULL_ARGUMENT = 1,
  SMCG_STATUS_UNALIGNED_REGION = 2,
  SMCG_STATUS_INVALID_SELECTOR = 3,
  SMCG_STATUS_EXEC_DENIED = 4,
  SMCG_STATUS_UNSUPPORTED_HOST = 5,
  SMCG_STATUS_UNKNOWN_UNIT = 6,
  SMCG_STATUS_NO_TABLE = 7,
  SMCG_STATUS_KERNEL_FAULT = 8,
  SMCG_STATUS_ORACLE_MISMATCH = 9,
  SMCG_STATUS_INVALID_ARGUMENT = 10,
  SMCG_STATUS_INTERNAL = 11,
} smcg_status;

/**
 * Opaque guard handle.
 */
typedef struct smcg_guard smcg_guard;

/**
 * Verification verdict as plain C data.
 */
typedef struct {
  uint8_t checksum_ok;
  uint8_t timing_ok;
  uint8_t verdict;
  /**
   * Action: 0 continue, 1 warn, 2 fatal, 3 recover.
   */
  uint8_t action;
  uint64_t score;
  uint32_t consecutive_failures;
} smcg_verdict;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *smcg_version(void);

/**
 * Single-site reference checksum over `data..data+len`.
 *
 * `site_byte_offset` is the region-relative offset of the mutable opcode
 * byte, or negative when the site lies outside the region. On success the
 * final sum and selector are stored through the out-pointers.
 *
 * # Safety
 *
 * `data` must point to `len` readable bytes; out-pointers must be valid.
 */
smcg_status smcg_checksum(const uint8_t *data,
                          uintptr_t len,
                          int64_t site_byte_offset,
                          uint8_t init_selector,
                          uint64_t init_sum,
                          uint64_t *out_sum,
                          uint8_t *out_selector);

/**
 * Bitmask of selectors reachable from `init` under the field-bit toggles
 * (bit `n` set means selector `n` is reachable).
 *
 * # Safety
 *
 * `out_mask` must be a valid pointer.
 */
smcg_status smcg_reachable_ops(uint8_t init, uint8_t *out_mask);

/**
 * Create a guard. `k_threshold` is the consecutive-failure limit;
 * `window_low`/`window_high` scale the calibrated q01/q99 into the
 * accepted score window; `action` is the escalation (1 warn, 2 fatal,
 * 3 recover).
 */
smcg_guard *smcg_guard_new(uint32_t k_threshold,
                           double window_low,
                           double window_high,
                           uint8_t action);

/**
 * Destroy a guard created by `smcg_guard_new`.
 *
 * # Safety
 *
 * `guard` must be a pointer from `smcg_guard_new`, not yet freed.
 */
void smcg_guard_free(smcg_guard *guard);

/**
 * Register a static checksum unit over `base..base+len`.
 *
 * # Safety
 *
 * The region must stay readable (and quiescent during verifies) for the
 * guard's lifetime; `out_unit` must be valid.
 */
smcg_status smcg_guard_register_static(smcg_guard *guard,
                                       const uint8_t *base,
                                       uintptr_t len,
                                       uint64_t *out_unit);

/**
 * Precompute validation states for all four reachable selectors and
 * calibrate the unit's timing windows.
 *
 * # Safety
 *
 * `guard` must be a live guard handle.
 */
smcg_status smcg_guard_precompute(smcg_guard *guard, uint64_t unit);

/**
 * Evaluate the predicate for query `t` and store the verdict.
 *
 * # Safety
 *
 * `guard` must be a live guard handle and `out` a valid pointer.
 */
smcg_status smcg_guard_verify(smcg_guard *guard, uint64_t unit, uint64_t t, smcg_verdict *out);

/**
 * Restore a unit's kernel to its canonical bytes and clear its failure
 * counter.
 *
 * # Safety
 *
 * `guard` must be a live guard handle.
 */
smcg_status smcg_guard_reset(smcg_guard *guard, uint64_t unit);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* SMCGUARD_H */
