#ifndef SVLV_H
#define SVLV_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum {
  SVLV_STATUS_OK = 0,
  SVLV_STATUS_NULL_POINTER = 1,
  SVLV_STATUS_INVALID_ARGUMENT = 2,
  SVLV_STATUS_INVALID_UTF8 = 3,
  SVLV_STATUS_BUDGET_EXCEEDED = 4,
  SVLV_STATUS_BUFFER_TOO_SMALL = 5,
  SVLV_STATUS_PANIC = 6,
  SVLV_STATUS_INTERNAL = 7,
} SvlvStatus;

/**
 * Engine selector for [`svlv_sim_new`].
 */
typedef enum {
  SVLV_ENGINE_AUTO = 0,
  SVLV_ENGINE_DENSE = 1,
  SVLV_ENGINE_THINNING = 2,
} SvlvEngine;

/**
 * Opaque rate model.
 */
typedef struct SvlvModel SvlvModel;

/**
 * Opaque running simulation.
 */
typedef struct SvlvSim SvlvSim;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. Valid until the next failing call.
 */
const char *svlv_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *svlv_version(void);

/**
 * Builds the perturbed model at scale `n`. `table_json` may be NULL for the voter model.
 *
 * # Safety
 * String arguments must be NUL-terminated or NULL; `out` must be writable.
 */
SvlvStatus svlv_model_new(const char *kernel_json,
                          const char *table_json,
                          uint64_t n,
                          SvlvModel **out);

/**
 * Builds a Lotka-Volterra model with parameters `theta0`, `theta1` at scale `n`.
 *
 * # Safety
 * `kernel_json` must be NUL-terminated; `out` must be writable.
 */
SvlvStatus svlv_model_new_lv(const char *kernel_json,
                             double theta0,
                             double theta1,
                             uint64_t n,
                             SvlvModel **out);

/**
 * # Safety
 * `model` must come from `svlv_model_new*` and not be used afterwards. NULL is ignored.
 */
void svlv_model_free(SvlvModel *model);

/**
 * Starts a simulation of `model` from `initial_json` (site list or generator spec).
 * The random stream is `rng::stream(seed, [SIMULATE])`, as for `svlv simulate`.
 *
 * # Safety
 * `model` must be a live handle; `initial_json` NUL-terminated; `out` writable.
 */
SvlvStatus svlv_sim_new(const SvlvModel *model,
                        const char *initial_json,
                        uint64_t seed,
                        SvlvEngine engine,
                        SvlvSim **out);

/**
 * # Safety
 * `sim` must come from [`svlv_sim_new`] and not be used afterwards. NULL is ignored.
 */
void svlv_sim_free(SvlvSim *sim);

/**
 * Advances to `horizon` with at most `budget` flips; writes the number of flips to `events`.
 *
 * # Safety
 * `sim` must be a live handle; `events` may be NULL.
 */
SvlvStatus svlv_sim_run(SvlvSim *sim, double horizon, uint64_t budget, uint64_t *events);

/**
 * Current time.
 *
 * # Safety
 * `sim` must be a live handle.
 */
double svlv_sim_time(const SvlvSim *sim);

/**
 * Number of occupied sites.
 *
 * # Safety
 * `sim` must be a live handle.
 */
uint64_t svlv_sim_occupied(const SvlvSim *sim);

/**
 * Total mass `X_t(1) = |xi_t| / N`.
 *
 * # Safety
 * `sim` must be a live handle.
 */
double svlv_sim_mass(const SvlvSim *sim);

/**
 * Copies occupied sites in lexicographic order as `d` consecutive `int32` per site.
 * `len` receives the number of sites; returns `BufferTooSmall` when `cap < len * d`.
 *
 * # Safety
 * `buf` must hold `cap` writable `int32` (may be NULL when `cap` is 0); `len` writable.
 */
SvlvStatus svlv_sim_sites(const SvlvSim *sim, int32_t *buf, size_t cap, size_t *len);

/**
 * `X_t(phi)` for a test function given as JSON, evaluated at the current time.
 *
 * # Safety
 * `sim` must be a live handle; `phi_json` NUL-terminated; `out` writable.
 */
SvlvStatus svlv_sim_integrate(const SvlvSim *sim, const char *phi_json, double *out);

/**
 * Mean and variance of the Feller diffusion `dZ = theta Z dt + sqrt(b Z) dW` at time `t`.
 *
 * # Safety
 * `mean` and `var` must be writable.
 */
SvlvStatus svlv_feller_moments(double z0,
                               double t,
                               double b,
                               double theta,
                               double *mean,
                               double *var);

/**
 * Richardson-extrapolated escape probability `gamma_e` with its standard error.
 *
 * # Safety
 * `kernel_json` NUL-terminated; `estimate` and `se` writable.
 */
SvlvStatus svlv_estimate_gamma_e(const char *kernel_json,
                                 double horizon,
                                 uint64_t reps,
                                 uint64_t seed,
                                 double *estimate,
                                 double *se);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SVLV_H */
