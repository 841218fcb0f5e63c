#ifndef CINESEG_H
#define CINESEG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every entry point.
 */
typedef enum CsegStatus {
  CSEG_STATUS_OK = 0,
  CSEG_STATUS_NULL_POINTER = 1,
  CSEG_STATUS_INVALID_UTF8 = 2,
  CSEG_STATUS_CONFIG = 3,
  CSEG_STATUS_SHAPE = 4,
  CSEG_STATUS_CONTRACT = 5,
  CSEG_STATUS_NUMERIC = 6,
  CSEG_STATUS_IO = 7,
  CSEG_STATUS_PARSE = 8,
  CSEG_STATUS_INTEGRITY = 9,
  CSEG_STATUS_BUFFER_TOO_SMALL = 10,
  CSEG_STATUS_PANIC = 11,
} CsegStatus;

/**
 * Opaque network handle.
 */
typedef struct CsegNetwork CsegNetwork;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the last failure on this thread, or an empty string.
 * The pointer stays valid until the next call into this library on the
 * same thread.
 */
const char *cseg_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *cseg_version(void);

/**
 * Builds a freshly initialized network from `key = value` config lines
 * (unset keys keep their defaults).
 *
 * # Safety
 * `config` must be a NUL-terminated string and `out` a writable pointer.
 */
enum CsegStatus cseg_network_new(const char *config, uint64_t seed, struct CsegNetwork **out);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum CsegStatus cseg_network_load(const char *path, struct CsegNetwork **out);

/**
 * Writes a checkpoint file.
 *
 * # Safety
 * `network` must come from this library and `path` be a NUL-terminated string.
 */
enum CsegStatus cseg_network_save(struct CsegNetwork *network, const char *path);

/**
 * Releases a network; null is ignored.
 *
 * # Safety
 * `network` must come from this library and not be used afterwards.
 */
void cseg_network_free(struct CsegNetwork *network);

/**
 * Expected input size and the size of the produced masks.
 *
 * # Safety
 * All pointers must be valid for writes.
 */
enum CsegStatus cseg_network_shape(struct CsegNetwork *network,
                                   size_t *in_h,
                                   size_t *in_w,
                                   size_t *out_h,
                                   size_t *out_w);

/**
 * Number of trainable scalars.
 *
 * # Safety
 * `out` must be valid for writes.
 */
enum CsegStatus cseg_network_num_parameters(struct CsegNetwork *network, size_t *out);

/**
 * Eval-mode logits for `n` images of `height × width`. `out` receives
 * `n × out_h × out_w` values (see [`cseg_network_shape`]).
 *
 * # Safety
 * `pixels` must hold `n·height·width` doubles and `out` `out_len` doubles.
 */
enum CsegStatus cseg_network_logits(struct CsegNetwork *network,
                                    const double *pixels,
                                    size_t n,
                                    size_t height,
                                    size_t width,
                                    double *out,
                                    size_t out_len);

/**
 * Binary masks: 1 where `sigmoid(logit) > threshold`.
 *
 * # Safety
 * `pixels` must hold `n·height·width` doubles and `out` `out_len` bytes.
 */
enum CsegStatus cseg_network_predict(struct CsegNetwork *network,
                                     const double *pixels,
                                     size_t n,
                                     size_t height,
                                     size_t width,
                                     double threshold,
                                     uint8_t *out,
                                     size_t out_len);

/**
 * Dice overlap of two `h × w` masks; 1 when both are empty.
 *
 * # Safety
 * `pred` and `truth` must hold `h·w` bytes of 0 / 1; `out` must be writable.
 */
enum CsegStatus cseg_dice(const uint8_t *pred,
                          const uint8_t *truth,
                          size_t h,
                          size_t w,
                          double *out);

/**
 * Average perpendicular distance in mm between the boundaries of two
 * `h × w` masks with the given pixel spacing.
 *
 * # Safety
 * `pred` and `truth` must hold `h·w` bytes of 0 / 1; `out` must be writable.
 */
enum CsegStatus cseg_apd(const uint8_t *pred,
                         const uint8_t *truth,
                         size_t h,
                         size_t w,
                         double spacing_mm,
                         double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CINESEG_H */
