#ifndef ODESA_H
#define ODESA_H

/* Generated by cbindgen from odesa-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes of every fallible call.
 */
typedef enum OdesaStatus {
  ODESA_STATUS_OK = 0,
  ODESA_STATUS_NULL_POINTER = 1,
  ODESA_STATUS_INVALID_UTF8 = 2,
  /**
   * Bad inputs or violated model invariants.
   */
  ODESA_STATUS_VALIDATION_ERROR = 3,
  /**
   * I/O or solver breakdown.
   */
  ODESA_STATUS_RUNTIME_ERROR = 4,
  /**
   * An output buffer was smaller than the required length.
   */
  ODESA_STATUS_BUFFER_TOO_SMALL = 5,
  /**
   * The library panicked internally; state is still consistent.
   */
  ODESA_STATUS_INTERNAL_PANIC = 6,
} OdesaStatus;

/**
 * Opaque environment handle (model, policies, features, interest).
 */
typedef struct OdesaBundle OdesaBundle;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Returns the most recent error message of this thread, or NULL when none
 * was recorded. The caller owns the string (free with
 * [`odesa_string_free`]); the slot is cleared.
 */
char *odesa_last_error_message(void);

/**
 * Frees a string returned by this library. NULL is a no-op.
 */
void odesa_string_free(char *s);

/**
 * Library version as a static string; do not free.
 */
const char *odesa_version(void);

/**
 * Loads a builtin environment (`divergence_star`, `random_offpolicy`,
 * `tabular_chain`); the seed only affects the random instance.
 *
 * # Safety
 * `name` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum OdesaStatus odesa_bundle_builtin(const char *name, uint64_t seed, struct OdesaBundle **out);

/**
 * Parses a problem document (the same JSON schema the CLI loads from
 * files; policies must include "pi" and "mu").
 *
 * # Safety
 * `json` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum OdesaStatus odesa_bundle_from_json(const char *json, struct OdesaBundle **out);

/**
 * Loads a problem document from a file path.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum OdesaStatus odesa_bundle_from_file(const char *path, struct OdesaBundle **out);

/**
 * Releases a bundle handle. NULL is a no-op.
 *
 * # Safety
 * `bundle` must have been created by this library and not freed before.
 */
void odesa_bundle_free(struct OdesaBundle *bundle);

/**
 * Number of states; 0 on a NULL handle.
 */
size_t odesa_bundle_n_states(const struct OdesaBundle *bundle);

/**
 * Number of actions; 0 on a NULL handle.
 */
size_t odesa_bundle_n_actions(const struct OdesaBundle *bundle);

/**
 * Feature dimension; 0 on a NULL handle.
 */
size_t odesa_bundle_feature_dim(const struct OdesaBundle *bundle);

/**
 * Runs the assumption checklist at the given λ and learning-rate family;
 * writes the report as a JSON string.
 *
 * # Safety
 * `bundle` must be a live handle; `out_json` a valid pointer.
 */
enum OdesaStatus odesa_check_assumptions_json(const struct OdesaBundle *bundle,
                                              double lambda,
                                              double b1,
                                              double b2,
                                              double beta,
                                              char **out_json);

/**
 * Spectral reports (TD mean field, gradient block system, emphatic
 * system) at the given λ, as a JSON string.
 *
 * # Safety
 * `bundle` must be a live handle; `out_json` a valid pointer.
 */
enum OdesaStatus odesa_spectral_reports_json(const struct OdesaBundle *bundle,
                                             double lambda,
                                             char **out_json);

/**
 * Writes the gradient learner's fixed point `−A⁻¹b` into `out`
 * (`len ≥ feature_dim` values).
 *
 * # Safety
 * `bundle` must be a live handle; `out` must point to at least `len` f64s.
 */
enum OdesaStatus odesa_gtd_fixed_point(const struct OdesaBundle *bundle,
                                       double lambda,
                                       double *out,
                                       size_t len);

/**
 * Writes the emphatic learner's fixed point `−A⁻¹b` into `out`
 * (`len ≥ feature_dim` values); unit interest unless the bundle carries one.
 *
 * # Safety
 * `bundle` must be a live handle; `out` must point to at least `len` f64s.
 */
enum OdesaStatus odesa_etd_fixed_point(const struct OdesaBundle *bundle,
                                       double lambda,
                                       double *out,
                                       size_t len);

/**
 * Runs a full batch experiment from a config JSON document (same schema
 * as the CLI `run` subcommand); artifacts land in the config's
 * `output_dir`.
 *
 * # Safety
 * `config_json` must be a valid NUL-terminated string.
 */
enum OdesaStatus odesa_run_experiment_json(const char *config_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ODESA_H */
