#ifndef FEDRP_H
#define FEDRP_H

#include <stddef.h>
#include <stdint.h>

typedef enum FedrpStatus {
  FEDRP_STATUS_OK = 0,
  FEDRP_STATUS_NULL_POINTER = 1,
  FEDRP_STATUS_INVALID_ARGUMENT = 2,
  FEDRP_STATUS_DIMENSION_MISMATCH = 3,
  FEDRP_STATUS_DECODE = 4,
  FEDRP_STATUS_BUFFER_TOO_SMALL = 5,
  FEDRP_STATUS_PANIC = 6,
} FedrpStatus;

/**
 * Opaque projection operator.
 */
typedef struct FedrpProjection FedrpProjection;

/**
 * Fixed-size frame header as seen by C callers.
 */
typedef struct FedrpFrameHeader {
  uint8_t msg_type;
  uint32_t round;
  uint32_t client_id;
  uint32_t payload_len;
} FedrpFrameHeader;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *fedrp_version(void);

/**
 * Copies the calling thread's last error message into `buf` (NUL
 * terminated, truncated to `cap`). Returns the full message length without
 * the terminator, or 0 if there is no message.
 *
 * # Safety
 * `buf` must be null or valid for `cap` bytes.
 */
size_t fedrp_last_error_message(char *buf, size_t cap);

/**
 * Creates the `m x n` projection for `round_seed`.
 *
 * # Safety
 * `out` must be valid for a pointer write.
 */
enum FedrpStatus fedrp_projection_new(uint64_t round_seed,
                                      size_t m,
                                      size_t n,
                                      struct FedrpProjection **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `h` must be null or come from [`fedrp_projection_new`] and not be used
 * afterwards.
 */
void fedrp_projection_free(struct FedrpProjection *h);

/**
 * Writes the output and input dimensions of the projection.
 *
 * # Safety
 * `h` must be a live handle; `m` and `n` must be valid for writes.
 */
enum FedrpStatus fedrp_projection_dims(const struct FedrpProjection *h, size_t *m, size_t *n);

/**
 * `out = A w`.
 *
 * # Safety
 * `w` must be valid for `w_len` reads and `out` for `out_len` writes.
 */
enum FedrpStatus fedrp_projection_apply(const struct FedrpProjection *h,
                                        const double *w,
                                        size_t w_len,
                                        double *out,
                                        size_t out_len);

/**
 * `out = Aᵀ v`.
 *
 * # Safety
 * `v` must be valid for `v_len` reads and `out` for `out_len` writes.
 */
enum FedrpStatus fedrp_projection_adjoint(const struct FedrpProjection *h,
                                          const double *v,
                                          size_t v_len,
                                          double *out,
                                          size_t out_len);

/**
 * Per-round epsilon of the projected protocol.
 *
 * # Safety
 * `out` must be valid for a write.
 */
enum FedrpStatus fedrp_epsilon_projected(double delta_sensitivity,
                                         double sigma_min,
                                         size_t m,
                                         double delta,
                                         double *out);

/**
 * Epsilon of the classic Gaussian mechanism.
 *
 * # Safety
 * `out` must be valid for a write.
 */
enum FedrpStatus fedrp_epsilon_gaussian(double delta_sensitivity,
                                        double sigma,
                                        double delta,
                                        double *out);

/**
 * Frames `values` as a vector message. `written` receives the frame length;
 * if `cap` is too small nothing is copied, `written` still receives the
 * required length and `BufferTooSmall` is returned.
 *
 * # Safety
 * `values` must be valid for `len` reads, `buf` for `cap` writes, and
 * `written` for a write.
 */
enum FedrpStatus fedrp_encode_vector(uint8_t msg_type,
                                     uint32_t round,
                                     uint32_t client_id,
                                     const double *values,
                                     size_t len,
                                     uint8_t *buf,
                                     size_t cap,
                                     size_t *written);

/**
 * Decodes a frame header without touching the payload.
 *
 * # Safety
 * `bytes` must be valid for `len` reads and `header` for a write.
 */
enum FedrpStatus fedrp_decode_header(const uint8_t *bytes,
                                     size_t len,
                                     struct FedrpFrameHeader *header);

/**
 * Decodes a whole vector frame. `count` receives the number of scalars; if
 * `cap` is too small nothing is copied and `BufferTooSmall` is returned.
 *
 * # Safety
 * `bytes` must be valid for `len` reads, `values` for `cap` writes, and
 * `header` and `count` for writes.
 */
enum FedrpStatus fedrp_decode_vector(const uint8_t *bytes,
                                     size_t len,
                                     struct FedrpFrameHeader *header,
                                     double *values,
                                     size_t cap,
                                     size_t *count);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEDRP_H */
