#ifndef CONSENT_H
#define CONSENT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ConsentStatus {
  CONSENT_STATUS_OK = 0,
  CONSENT_STATUS_NULL_ARGUMENT = 1,
  // Bad sizes, boxes outside the image, invalid parameters.
  CONSENT_STATUS_INVALID_ARGUMENT = 2,
  CONSENT_STATUS_IO = 3,
  // Non-finite values during inference.
  CONSENT_STATUS_NUMERIC = 4,
  // The model file is not a valid model.
  CONSENT_STATUS_MODEL_FORMAT = 5,
  // An internal panic was caught.
  CONSENT_STATUS_INTERNAL = 6,
} ConsentStatus;

// Opaque model handle.
typedef struct ConsentModelHandle ConsentModelHandle;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Loads a model file. On success `*out` owns a handle that must be released
// with [`consent_model_free`].
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum ConsentStatus consent_model_load(const char *path, struct ConsentModelHandle **out);

// Releases a handle. Null is ignored.
//
// # Safety
// `handle` must come from [`consent_model_load`] and not be used afterwards.
void consent_model_free(struct ConsentModelHandle *handle);

// Classifies `n` word boxes of one image. Writes 0/1 labels to `labels_out`
// and, when `p_bold_out` is not null, the bold probabilities.
//
// # Safety
// `rgb` holds `3 * width * height` bytes, `boxes` `4 * n` values, and the
// output arrays `n` elements each.
enum ConsentStatus consent_predict(const struct ConsentModelHandle *handle,
                                   const uint8_t *rgb,
                                   uint32_t width,
                                   uint32_t height,
                                   const uint32_t *boxes,
                                   size_t n,
                                   uint8_t *labels_out,
                                   double *p_bold_out);

// Morphology voting with threshold `alpha` over the image's words.
//
// # Safety
// As for [`consent_predict`].
enum ConsentStatus consent_baseline_vote(const uint8_t *rgb,
                                         uint32_t width,
                                         uint32_t height,
                                         const uint32_t *boxes,
                                         size_t n,
                                         double alpha,
                                         uint8_t *labels_out);

// Copies the calling thread's last error message into `buf` (truncated,
// always NUL-terminated when `len > 0`). Returns the full message length
// plus one, or 0 when there is no error.
//
// # Safety
// `buf` must be writable for `len` bytes or be null with `len == 0`.
size_t consent_last_error(char *buf, size_t len);

// Library version as a static NUL-terminated string.
const char *consent_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CONSENT_H */
