#ifndef SELATTN_H
#define SELATTN_H

#include <stddef.h>
#include <stdint.h>

typedef enum SelattnStatus {
  SELATTN_STATUS_OK = 0,
  SELATTN_STATUS_NULL_POINTER = 1,
  SELATTN_STATUS_INVALID_ARGUMENT = 2,
  /**
   * File missing or unreadable.
   */
  SELATTN_STATUS_IO = 3,
  /**
   * Checkpoint damaged, or its tensors do not fit its config.
   */
  SELATTN_STATUS_BAD_CHECKPOINT = 4,
  /**
   * The pipeline rejected the input.
   */
  SELATTN_STATUS_PIPELINE = 5,
  SELATTN_STATUS_PANIC = 6,
} SelattnStatus;

/**
 * A loaded checkpoint.
 */
typedef struct SelattnModel SelattnModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on the calling thread; empty after a
 * success. Valid until the next call on this thread.
 */
const char *selattn_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *selattn_version(void);

/**
 * Load the checkpoint directory at `path` into `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum SelattnStatus selattn_model_load(const char *path, struct SelattnModel **out);

/**
 * Release a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`selattn_model_load`] and not be freed twice.
 */
void selattn_model_free(struct SelattnModel *model);

/**
 * Number of anchors per grid position the model was trained with.
 *
 * # Safety
 * `model` must be a live handle or null (returns 0).
 */
size_t selattn_model_anchors_per_position(const struct SelattnModel *model);

/**
 * Detect both organs. `*out_json` receives an array of
 * `{"class", "bbox": {"x","y","w","h"}, "confidence"}` objects.
 *
 * # Safety
 * `pixels` must point to `width * height` floats; `out_json` must be writable.
 */
enum SelattnStatus selattn_detect(const struct SelattnModel *model,
                                  const float *pixels,
                                  size_t width,
                                  size_t height,
                                  char **out_json);

/**
 * Scored proposals after NMS and top-N. `*out_json` receives an array of
 * `{"bbox": {...}, "score"}` objects, best first.
 *
 * # Safety
 * As for [`selattn_detect`].
 */
enum SelattnStatus selattn_propose(const struct SelattnModel *model,
                                   const float *pixels,
                                   size_t width,
                                   size_t height,
                                   char **out_json);

/**
 * Release a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be freed twice.
 */
void selattn_string_free(char *s);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* SELATTN_H */
