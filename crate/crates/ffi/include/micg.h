#ifndef MICG_H
#define MICG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum MicgStatus {
  MICG_STATUS_OK = 0,
  MICG_STATUS_NULL_POINTER = 1,
  MICG_STATUS_INVALID_UTF8 = 2,
  MICG_STATUS_INVALID_ARGUMENT = 3,
  MICG_STATUS_PARSE_ERROR = 4,
  MICG_STATUS_VALIDATION = 5,
  MICG_STATUS_INCOMPLETE = 6,
  MICG_STATUS_INTERNAL = 7,
} MicgStatus;

/**
 * Opaque hierarchy configuration.
 */
typedef struct MicgHierarchy MicgHierarchy;

/**
 * Opaque surrogate network.
 */
typedef struct MicgNetwork MicgNetwork;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. Valid until the
 * next call into this library on the same thread; do not free.
 */
const char *micg_last_error_message(void);

/**
 * # Safety
 * `s` must be NULL or a string returned by this library and not yet freed.
 */
void micg_string_free(char *s);

/**
 * # Safety
 * `out` must be a valid pointer to writable storage.
 */
enum MicgStatus micg_hierarchy_default(struct MicgHierarchy **out);

/**
 * Parses and validates a hierarchy JSON document.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be writable.
 */
enum MicgStatus micg_hierarchy_from_json(const char *json, struct MicgHierarchy **out);

/**
 * # Safety
 * `h` must be NULL or a handle from this library not yet freed.
 */
void micg_hierarchy_free(struct MicgHierarchy *h);

/**
 * # Safety
 * `h` must be a live handle; `out` must be writable.
 */
enum MicgStatus micg_hierarchy_indicator_count(const struct MicgHierarchy *h, size_t *out);

/**
 * Writes the violation list as a JSON array to `out_json` (caller frees).
 * Returns `Validation` when the list is non-empty.
 *
 * # Safety
 * `h` must be a live handle; `out_json` must be writable.
 */
enum MicgStatus micg_hierarchy_validate(const struct MicgHierarchy *h, char **out_json);

/**
 * Computes one index report from an indicator-vector JSON object. With
 * `beliefs_json` NULL the hierarchy's default weights are used; otherwise
 * indicator weights come from the belief state. The report's `computed_at`
 * is the observation's `observed_at`.
 *
 * # Safety
 * `h` must be a live handle, strings NUL-terminated, `out_json` writable.
 */
enum MicgStatus micg_compute_index_json(const struct MicgHierarchy *h,
                                        const char *observation_json,
                                        const char *beliefs_json,
                                        char **out_json);

/**
 * # Safety
 * `out` must be writable.
 */
enum MicgStatus micg_certainty_score(double response_time,
                                     double alpha_certainty,
                                     double t_floor,
                                     double t_cap,
                                     double *out);

double micg_sigmoid(double w);

/**
 * Gaussian belief update from `len` binary observations.
 *
 * # Safety
 * `column` must point to `len` readable bytes (may be NULL when `len` is 0);
 * the out pointers must be writable.
 */
enum MicgStatus micg_posterior_update(double prior_mean,
                                      double prior_variance,
                                      const uint8_t *column,
                                      size_t len,
                                      double *out_mean,
                                      double *out_variance);

/**
 * # Safety
 * `json` must be NUL-terminated; `out` writable.
 */
enum MicgStatus micg_network_from_json(const char *json, struct MicgNetwork **out);

/**
 * # Safety
 * `net` must be a live handle; `out` writable.
 */
enum MicgStatus micg_network_input_dim(const struct MicgNetwork *net, size_t *out);

/**
 * # Safety
 * `net` must be a live handle, `input` must point to `len` doubles and
 * `out` must be writable.
 */
enum MicgStatus micg_network_forward(const struct MicgNetwork *net,
                                     const double *input,
                                     size_t len,
                                     double *out);

/**
 * # Safety
 * `net` must be NULL or a handle from this library not yet freed.
 */
void micg_network_free(struct MicgNetwork *net);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MICG_H */
