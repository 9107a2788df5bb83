#ifndef MAMBAIR_H
#define MAMBAIR_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every entry point.
 */
typedef enum MirStatus {
  MirOk = 0,
  /**
   * Invalid configuration or argument shape.
   */
  MirConfigError = 2,
  /**
   * File or serialization problem.
   */
  MirIoError = 3,
  /**
   * Non-finite values or a numeric contract violation.
   */
  MirNumericError = 4,
  /**
   * Null pointer or malformed UTF-8 argument.
   */
  MirInvalidArgument = 5,
  /**
   * Internal panic caught at the boundary.
   */
  MirPanic = 6,
} MirStatus;

/**
 * Opaque handle to a loaded restoration model.
 */
typedef struct MirModel MirModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread. Valid until the
 * next failing call; never null.
 */
const char *mir_last_error(void);

/**
 * Builds a freshly initialized model from config text (same key=value
 * grammar as the CLI's config files; empty string for defaults).
 *
 * # Safety
 * `config_text` must be null or a valid NUL-terminated string; `out`
 * must be a valid pointer.
 */
enum MirStatus mir_model_new(const char *config_text, uint64_t seed, struct MirModel **out);

/**
 * Loads a model from a checkpoint file written by training (the
 * checkpoint's config echo fixes the architecture).
 *
 * # Safety
 * `path` must be a valid NUL-terminated string; `out` must be valid.
 */
enum MirStatus mir_model_from_checkpoint(const char *path, struct MirModel **out);

/**
 * Frees a model handle. Null is a no-op.
 *
 * # Safety
 * `model` must be null or a pointer returned by a constructor, freed
 * at most once.
 */
void mir_model_free(struct MirModel *model);

/**
 * Upscaling factor of the model's task (1 for denoising).
 *
 * # Safety
 * `model` and `out_scale` must be valid pointers.
 */
enum MirStatus mir_model_scale(const struct MirModel *model, uintptr_t *out_scale);

/**
 * Input channel count the model expects (1 or 3).
 *
 * # Safety
 * `model` and `out_channels` must be valid pointers.
 */
enum MirStatus mir_model_in_channels(const struct MirModel *model, uintptr_t *out_channels);

/**
 * Restores an image. `pixels` is h*w*channels doubles in [0,1];
 * `out_pixels` must hold (scale*h)*(scale*w)*channels doubles.
 * `ensemble` != 0 averages over the eight dihedral transforms.
 *
 * # Safety
 * Buffers must be valid for the stated lengths.
 */
enum MirStatus mir_restore(const struct MirModel *model,
                           const double *pixels,
                           uintptr_t h,
                           uintptr_t w,
                           uintptr_t channels,
                           int32_t ensemble,
                           double *out_pixels);

/**
 * Y-channel PSNR in dB between two same-shape images in [0,1].
 * Identical images return +infinity.
 *
 * # Safety
 * Buffers must hold h*w*channels doubles.
 */
enum MirStatus mir_psnr_y(const double *a,
                          const double *b,
                          uintptr_t h,
                          uintptr_t w,
                          uintptr_t channels,
                          double *out_db);

/**
 * Y-channel SSIM between two same-shape images in [0,1]; requires at
 * least 11x11 pixels.
 *
 * # Safety
 * Buffers must hold h*w*channels doubles.
 */
enum MirStatus mir_ssim_y(const double *a,
                          const double *b,
                          uintptr_t h,
                          uintptr_t w,
                          uintptr_t channels,
                          double *out_ssim);

/**
 * Library version as (major << 16) | (minor << 8) | patch.
 */
uint32_t mir_version(void);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* MAMBAIR_H */
