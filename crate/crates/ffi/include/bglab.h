#ifndef BGLAB_H
#define BGLAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes.
typedef enum BglabStatus {
  BGLAB_STATUS_OK = 0,
  BGLAB_STATUS_NULL_POINTER = 1,
  BGLAB_STATUS_INVALID_ARGUMENT = 2,
  BGLAB_STATUS_DEGENERATE = 3,
  BGLAB_STATUS_RUNAWAY = 4,
  BGLAB_STATUS_OVERFLOW = 5,
  BGLAB_STATUS_OTHER = 6,
  BGLAB_STATUS_PANIC = 7,
} BglabStatus;

// Opaque hard-sphere configuration.
typedef struct BglabConfiguration BglabConfiguration;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Creates a configuration of `count` spheres in dimension `dim` from
// row-major `count * dim` position and velocity arrays.
//
// # Safety
// `positions` and `velocities` must point to `count * dim` doubles; `out`
// must be writable. The handle is released with
// [`bglab_configuration_free`].
enum BglabStatus bglab_configuration_new(size_t dim,
                                         double diameter,
                                         size_t count,
                                         const double *positions,
                                         const double *velocities,
                                         struct BglabConfiguration **out);

// Releases a handle; null is ignored.
//
// # Safety
// `config` must come from this library and not be used afterwards.
void bglab_configuration_free(struct BglabConfiguration *config);

// Number of spheres and dimension.
//
// # Safety
// Pointers must be valid or null.
enum BglabStatus bglab_configuration_shape(const struct BglabConfiguration *config,
                                           size_t *count,
                                           size_t *dim);

// Kinetic energy `sum |v_i|^2 / 2`.
//
// # Safety
// Pointers must be valid or null.
enum BglabStatus bglab_configuration_energy(const struct BglabConfiguration *config, double *out);

// Copies positions and velocities into caller buffers of `len` doubles each.
//
// # Safety
// Buffers must hold `len` doubles.
enum BglabStatus bglab_configuration_state(const struct BglabConfiguration *config,
                                           double *positions,
                                           double *velocities,
                                           size_t len);

// Flows for `duration` (negative runs backward) and returns a new handle
// with the number of collisions.
//
// # Safety
// Pointers must be valid; `out` receives a new handle.
enum BglabStatus bglab_flow(const struct BglabConfiguration *config,
                            double duration,
                            struct BglabConfiguration **out,
                            size_t *events);

// Comparison hierarchy `phi_hat_{N,j}^(s)(t, Z)` with `s` the handle's
// count. `value` receives the exact integer (Overflow if it exceeds 64
// bits), `divisible` whether it is the coefficient times
// `(N-j)..(N-s+1)`.
//
// # Safety
// Pointers must be valid.
enum BglabStatus bglab_hat_value(size_t j,
                                 uint64_t n,
                                 double t,
                                 const struct BglabConfiguration *config,
                                 uint64_t *value,
                                 bool *divisible);

// Membership of the handle in the singular set with `k` reductions over
// `[0, t]`.
//
// # Safety
// Pointers must be valid.
enum BglabStatus bglab_singular_membership(const struct BglabConfiguration *config,
                                           size_t k,
                                           double t,
                                           uint64_t n,
                                           bool *member);

// Copies the last error message of this thread, NUL-terminated and
// truncated to `len`; returns the full length without the terminator.
//
// # Safety
// `buf` must hold `len` bytes or be null (to query the length).
size_t bglab_last_error(char *buf, size_t len);

// Library version as a static NUL-terminated string.
const char *bglab_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BGLAB_H */
