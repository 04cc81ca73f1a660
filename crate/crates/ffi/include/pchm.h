#ifndef PCHM_H
#define PCHM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes of every fallible call.
 */
typedef enum {
  PCHM_STATUS_OK = 0,
  PCHM_STATUS_NULL_POINTER = 1,
  PCHM_STATUS_INVALID_ARGUMENT = 2,
  PCHM_STATUS_VALIDATION = 3,
  PCHM_STATUS_NOT_CONVERGED = 4,
  PCHM_STATUS_IO = 5,
  PCHM_STATUS_FORMAT = 6,
  PCHM_STATUS_EMPTY_GIANT = 7,
  PCHM_STATUS_BUFFER_TOO_SMALL = 8,
  PCHM_STATUS_INTERNAL = 9,
} PchmStatus;

/**
 * A conductance field on a periodic box.
 */
typedef struct PchmField PchmField;

/**
 * Connected components of a field and its giant cluster.
 */
typedef struct PchmLabeling PchmLabeling;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length without the NUL.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t pchm_last_error_message(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *pchm_version(void);

/**
 * Samples a field from a JSON law such as `{"kind":"bernoulli","p":0.7,"value":1.0}`.
 *
 * # Safety
 * `law_json` must be a NUL-terminated string; `out` must be writable.
 */
PchmStatus pchm_field_sample(const char *law_json,
                             uint32_t dim,
                             uint32_t side,
                             double cap,
                             uint64_t seed,
                             PchmField **out);

/**
 * Builds a field from `d · L^d` weights in site-major, axis-minor order.
 *
 * # Safety
 * `weights` must point to `len` readable values; `out` must be writable.
 */
PchmStatus pchm_field_from_weights(uint32_t dim,
                                   uint32_t side,
                                   double cap,
                                   const double *weights,
                                   size_t len,
                                   PchmField **out);

/**
 * Reads a binary field dump (and its metadata file, if present).
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
PchmStatus pchm_field_read(const char *path, PchmField **out);

/**
 * Writes a binary field dump plus its metadata file.
 *
 * # Safety
 * `field` must be a live handle; `path` a NUL-terminated string.
 */
PchmStatus pchm_field_write(const PchmField *field, const char *path);

/**
 * # Safety
 * `field` must be null or a handle not yet freed.
 */
void pchm_field_free(PchmField *field);

/**
 * Dimension and side of a field.
 *
 * # Safety
 * `field` must be a live handle; outputs must be writable.
 */
PchmStatus pchm_field_shape(const PchmField *field, uint32_t *dim, uint32_t *side);

/**
 * Number of weights, `d · L^d`.
 *
 * # Safety
 * `field` must be a live handle.
 */
size_t pchm_field_len(const PchmField *field);

/**
 * Copies the weights into `out`, which must hold at least [`pchm_field_len`] values.
 *
 * # Safety
 * `field` must be a live handle; `out` must point to `len` writable values.
 */
PchmStatus pchm_field_weights(const PchmField *field, double *out, size_t len);

/**
 * Sum of the raw weight bits modulo 2^64, as stored in the dump footer.
 *
 * # Safety
 * `field` must be a live handle; `out` must be writable.
 */
PchmStatus pchm_field_checksum(const PchmField *field, uint64_t *out);

/**
 * Labels connected components of the positive-weight graph.
 *
 * # Safety
 * `field` must be a live handle; `out` must be writable.
 */
PchmStatus pchm_label_components(const PchmField *field, PchmLabeling **out);

/**
 * # Safety
 * `labeling` must be null or a handle not yet freed.
 */
void pchm_labeling_free(PchmLabeling *labeling);

/**
 * Giant-cluster fraction and size.
 *
 * # Safety
 * `labeling` must be a live handle; outputs must be writable.
 */
PchmStatus pchm_labeling_giant(const PchmLabeling *labeling, double *m_hat, size_t *giant_size);

/**
 * Solves the corrector problem and writes `D̂` and `𝒟̂ = D̂ / (2 m̂)` as
 * row-major `d × d` arrays. `tol <= 0` selects the default tolerance.
 *
 * # Safety
 * Handles must be live and belong together; `d_hat` and `dcal_hat` must
 * hold `len ≥ d²` values; `m_hat` must be writable.
 */
PchmStatus pchm_estimate_diffusion(const PchmField *field,
                                   const PchmLabeling *labeling,
                                   double tol,
                                   double *d_hat,
                                   double *dcal_hat,
                                   size_t len,
                                   double *m_hat);

/**
 * Evolves `values` (an `n^dim` grid on the unit torus, first coordinate
 * slowest) under the heat equation with row-major diffusion matrix `dcal`
 * for time `t`, writing the result to `out`.
 *
 * # Safety
 * `values` and `out` must hold `len = n^dim` values; `dcal` must hold `dim²`.
 */
PchmStatus pchm_heat_evolve(uint32_t dim,
                            uint32_t n,
                            const double *values,
                            size_t len,
                            const double *dcal,
                            double t,
                            double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PCHM_H */
