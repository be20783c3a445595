#ifndef WEIGHTALIGN_H
#define WEIGHTALIGN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Bumped on any incompatible change to this header.
 */
#define WA_ABI_VERSION 1

typedef enum WaStatus {
  WA_STATUS_OK = 0,
  WA_STATUS_NULL_POINTER = 1,
  WA_STATUS_INVALID_ARGUMENT = 2,
  WA_STATUS_SHAPE = 3,
  WA_STATUS_NON_FINITE = 4,
  WA_STATUS_CONFIG = 5,
  WA_STATUS_PANIC = 6,
} WaStatus;

/**
 * Opaque network handle.
 */
typedef struct WaNetwork WaNetwork;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

uint32_t wa_abi_version(void);

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *wa_last_error(void);

/**
 * WeightAlign over `filters` contiguous filters of `len / filters` weights.
 * `gamma` holds one scale per filter. `out` may alias `w`.
 *
 * # Safety
 * `w` and `out` must be valid for `len` doubles, `gamma` for `filters`.
 */
enum WaStatus wa_weight_align(const double *w,
                              size_t len,
                              size_t filters,
                              const double *gamma,
                              bool center,
                              bool scale,
                              double eps,
                              double scale_multiplier,
                              double *out);

/**
 * WeightNorm `g * w / (||w|| + eps)` per filter. `out` may alias `w`.
 *
 * # Safety
 * As for [`wa_weight_align`].
 */
enum WaStatus wa_weight_norm(const double *w,
                             size_t len,
                             size_t filters,
                             const double *g,
                             double eps,
                             double *out);

/**
 * Builds a network from a JSON spec and stores the handle in `*out`.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be writable.
 */
enum WaStatus wa_network_from_json(const char *json, struct WaNetwork **out);

/**
 * # Safety
 * `net` must be null or a handle from [`wa_network_from_json`] not yet freed.
 */
void wa_network_free(struct WaNetwork *net);

/**
 * Values per input sample (C*H*W).
 *
 * # Safety
 * `net` must be a live handle or null (returns 0).
 */
size_t wa_network_input_len(const struct WaNetwork *net);

/**
 * Number of output classes.
 *
 * # Safety
 * `net` must be a live handle or null (returns 0).
 */
size_t wa_network_classes(const struct WaNetwork *net);

/**
 * Forward pass on `batch` NCHW samples. Writes `batch * classes` logits.
 * With `train_mode` set, batch normalization uses batch statistics and
 * updates its running averages.
 *
 * # Safety
 * `net` must be a live handle; `input` valid for `batch * input_len` doubles,
 * `logits` for `batch * classes`.
 */
enum WaStatus wa_network_forward(struct WaNetwork *net,
                                 const double *input,
                                 size_t batch,
                                 bool train_mode,
                                 double *logits);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WEIGHTALIGN_H */
