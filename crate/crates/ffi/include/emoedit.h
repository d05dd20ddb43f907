#ifndef EMOEDIT_H
#define EMOEDIT_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define EMOEDIT_NUM_EMOTIONS 8

#define EMOEDIT_MAX_ITERATIONS 20

typedef enum EmoeditStatus {
  EMOEDIT_STATUS_OK = 0,
  EMOEDIT_STATUS_NULL_POINTER = 1,
  EMOEDIT_STATUS_INVALID_ARGUMENT = 2,
  EMOEDIT_STATUS_VALIDATION = 3,
  EMOEDIT_STATUS_IO = 4,
  EMOEDIT_STATUS_RUNTIME = 5,
  EMOEDIT_STATUS_PANIC = 6,
} EmoeditStatus;

/**
 * Trained editor with its latent codec.
 */
typedef struct EmoeditEditor EmoeditEditor;

/**
 * Owned RGB image.
 */
typedef struct EmoeditImage EmoeditImage;

/**
 * Trained emotion predictor.
 */
typedef struct EmoeditPredictor EmoeditPredictor;

/**
 * Sampler and critic settings for [`emoedit_edit`].
 */
typedef struct EmoeditEditOptions {
  uint32_t steps;
  double guidance_image;
  double guidance_emotion;
  double strength;
  uint64_t seed;
  double ssim_low;
  double ssim_high;
  double min_confidence;
  uint32_t max_iterations;
} EmoeditEditOptions;

/**
 * Outcome of one critic-guided edit.
 */
typedef struct EmoeditEditResult {
  uint32_t iterations;
  /**
   * 1 when the critic accepted an iteration, 0 when the cap was reached.
   */
  uint8_t criteria_met;
  uint32_t predicted;
  double confidence;
  double ssim;
} EmoeditEditResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or null. Valid until
 * the next call into this library on the same thread.
 */
const char *emoedit_last_error(void);

/**
 * Static, NUL-terminated library version.
 */
const char *emoedit_version(void);

/**
 * Static, NUL-terminated emotion name, or null for an out-of-range index.
 */
const char *emoedit_emotion_name(uint32_t index);

/**
 * Looks up an emotion index by name.
 *
 * # Safety
 * `name` must be a valid NUL-terminated string; `out_index` must be writable.
 */
enum EmoeditStatus emoedit_emotion_from_name(const char *name, uint32_t *out_index);

/**
 * # Safety
 * `path` must be a valid NUL-terminated string; `out` must be writable.
 */
enum EmoeditStatus emoedit_predictor_load(const char *path, struct EmoeditPredictor **out);

/**
 * # Safety
 * `handle` must be null or come from [`emoedit_predictor_load`] and not be
 * freed already.
 */
void emoedit_predictor_free(struct EmoeditPredictor *handle);

/**
 * Writes the eight class probabilities to `out_probs` and the top-1 index
 * to `out_top1` (may be null).
 *
 * # Safety
 * `pixels` must hold `height * width * 3` bytes; `out_probs` must have room
 * for [`EMOEDIT_NUM_EMOTIONS`] doubles.
 */
enum EmoeditStatus emoedit_predict(const struct EmoeditPredictor *predictor,
                                   const uint8_t *pixels,
                                   size_t height,
                                   size_t width,
                                   double *out_probs,
                                   uint32_t *out_top1);

/**
 * Loads an editor checkpoint. `codec_path` may be null, in which case the
 * codec recorded in the checkpoint is used.
 *
 * # Safety
 * Paths must be valid NUL-terminated strings; `out` must be writable.
 */
enum EmoeditStatus emoedit_editor_load(const char *editor_path,
                                       const char *codec_path,
                                       struct EmoeditEditor **out);

/**
 * # Safety
 * `handle` must be null or come from [`emoedit_editor_load`] and not be
 * freed already.
 */
void emoedit_editor_free(struct EmoeditEditor *handle);

struct EmoeditEditOptions emoedit_edit_options_default(void);

/**
 * Critic-guided edit towards emotion `target`. On success `*out_image`
 * receives a new image handle and `out_result` (may be null) the summary.
 *
 * # Safety
 * Handles must be live; `pixels` must hold `height * width * 3` bytes;
 * `options` may be null for defaults.
 */
enum EmoeditStatus emoedit_edit(const struct EmoeditEditor *editor,
                                const struct EmoeditPredictor *predictor,
                                const uint8_t *pixels,
                                size_t height,
                                size_t width,
                                uint32_t target,
                                const struct EmoeditEditOptions *options,
                                struct EmoeditImage **out_image,
                                struct EmoeditEditResult *out_result);

/**
 * # Safety
 * `image` must be a live handle.
 */
size_t emoedit_image_height(const struct EmoeditImage *image);

/**
 * # Safety
 * `image` must be a live handle.
 */
size_t emoedit_image_width(const struct EmoeditImage *image);

/**
 * Borrowed pointer to `height * width * 3` pixel bytes, valid while the
 * handle lives.
 *
 * # Safety
 * `image` must be a live handle.
 */
const uint8_t *emoedit_image_data(const struct EmoeditImage *image);

/**
 * # Safety
 * `image` must be null or a handle not freed already.
 */
void emoedit_image_free(struct EmoeditImage *image);

/**
 * SSIM between two images of equal size.
 *
 * # Safety
 * Both buffers must hold `height * width * 3` bytes; `out` must be writable.
 */
enum EmoeditStatus emoedit_ssim(const uint8_t *a,
                                const uint8_t *b,
                                size_t height,
                                size_t width,
                                double *out);

/**
 * Edge-structure difference (0..100) between two images of equal size.
 *
 * # Safety
 * Both buffers must hold `height * width * 3` bytes; `out` must be writable.
 */
enum EmoeditStatus emoedit_ess(const uint8_t *source,
                               const uint8_t *generated,
                               size_t height,
                               size_t width,
                               double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EMOEDIT_H */
