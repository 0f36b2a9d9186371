#ifndef CINET_H
#define CINET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CinStatus {
  CIN_STATUS_OK = 0,
  CIN_STATUS_NULL_POINTER = 1,
  CIN_STATUS_INVALID_ARGUMENT = 2,
  CIN_STATUS_IO = 3,
  CIN_STATUS_CHECKPOINT = 4,
  CIN_STATUS_CONFIG = 5,
  CIN_STATUS_SHAPE = 6,
  /**
   * A Rust panic was caught at the boundary.
   */
  CIN_STATUS_INTERNAL = 7,
} CinStatus;

/**
 * Opaque handle to a loaded model.
 */
typedef struct CinModel CinModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *cin_last_error(void);

/**
 * Load a checkpoint with the model configuration in `config_path`.
 * On success `*out` owns a handle to release with [`cin_model_free`].
 *
 * # Safety
 * Paths must be null or NUL-terminated strings; `out` must be null or writable.
 */
enum CinStatus cin_model_load(const char *config_path,
                              const char *checkpoint_path,
                              struct CinModel **out);

/**
 * Release a handle from [`cin_model_load`]. Null is ignored.
 *
 * # Safety
 * `model` must be null or a live handle; it must not be used afterwards.
 */
void cin_model_free(struct CinModel *model);

/**
 * Side length the model resizes its inputs to.
 *
 * # Safety
 * `model` must be null or a live handle; `out` must be null or writable.
 */
enum CinStatus cin_model_input_size(const struct CinModel *model, size_t *out);

/**
 * Saliency map (`height * width` values in `[0, 1]`) for a planar RGB image.
 *
 * # Safety
 * `rgb` must hold `3 * height * width` floats and `out` `height * width`.
 */
enum CinStatus cin_model_predict(const struct CinModel *model,
                                 const float *rgb,
                                 size_t height,
                                 size_t width,
                                 float *out);

/**
 * Split a binary mask (nonzero = foreground) into the boundary band of
 * radius `radius` and its complement. `band_out` receives 1 for band
 * pixels, 0 otherwise; the two counts are optional.
 *
 * # Safety
 * `mask` and `band_out` must hold `height * width` bytes; the count
 * pointers must be null or writable.
 */
enum CinStatus cin_edge_band(const uint8_t *mask,
                             size_t height,
                             size_t width,
                             size_t radius,
                             uint8_t *band_out,
                             size_t *band_len,
                             size_t *keep_len);

/**
 * Mean absolute error of resizing `planes` planes of `height x width` down to
 * `down_h x down_w` and back.
 *
 * # Safety
 * `data` must hold `planes * height * width` doubles; `out` must be writable.
 */
enum CinStatus cin_roundtrip_distortion(const double *data,
                                        size_t planes,
                                        size_t height,
                                        size_t width,
                                        size_t down_h,
                                        size_t down_w,
                                        double *out);

/**
 * Mean absolute error between a map in `[0, 1]` and a binary mask
 * (nonzero = foreground).
 *
 * # Safety
 * `pred` and `gt` must hold `height * width` values; `out` must be writable.
 */
enum CinStatus cin_mae(const double *pred,
                       const uint8_t *gt,
                       size_t height,
                       size_t width,
                       double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CINET_H */
