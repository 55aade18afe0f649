#ifndef PANEL_INSPECT_H
#define PANEL_INSPECT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PiStatus {
  PI_STATUS_OK = 0,
  // A required pointer was NULL.
  PI_STATUS_NULL_ARGUMENT = 1,
  // A string was not UTF-8 or a size did not fit.
  PI_STATUS_INVALID_ARGUMENT = 2,
  // Input data or configuration rejected; see the last error code.
  PI_STATUS_INVALID_INPUT = 3,
  // No usable period in the image.
  PI_STATUS_NOT_PERIODIC = 4,
  // A file could not be read or written.
  PI_STATUS_IO = 5,
  // A model artifact is malformed or incompatible.
  PI_STATUS_BAD_ARTIFACT = 6,
  // Any other library error.
  PI_STATUS_FAILED = 7,
  // A panic was caught at the boundary.
  PI_STATUS_PANIC = 8,
} PiStatus;

typedef struct PiClassifier PiClassifier;

typedef struct PiConfig PiConfig;

typedef struct PiDetector PiDetector;

typedef struct PiImage PiImage;

typedef struct PiInspection PiInspection;

typedef struct PiPeriod {
  uint32_t period;
  uint32_t count;
  double confidence;
  // Start column of a defect-free period, or -1.
  int64_t clean_offset;
  uint32_t dirty_intervals;
} PiPeriod;

typedef struct PiBox {
  uint32_t x;
  uint32_t y;
  uint32_t width;
  uint32_t height;
} PiBox;

typedef struct PiDefect {
  struct PiBox patch;
  double detection_score;
  uint64_t defect_pixels;
  // Index into the classifier's class list, or -1 without a classifier.
  int32_t top_class;
  double top_score;
} PiDefect;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version, static storage.
const char *pi_version(void);

// `module/CODE` of this thread's last failure, or NULL. Valid until the
// next failing call on the thread.
const char *pi_last_error_code(void);

// Message of this thread's last failure, or NULL.
const char *pi_last_error_message(void);

// Loads a run configuration from TOML.
//
// # Safety
// `path` is a NUL-terminated string; `out` is writable.
enum PiStatus pi_config_load(const char *path, struct PiConfig **out);

// # Safety
// `cfg` is NULL or came from `pi_config_load`.
void pi_config_free(struct PiConfig *cfg);

// Decodes a PNG or other supported image file.
//
// # Safety
// `path` is a NUL-terminated string; `out` is writable.
enum PiStatus pi_image_load(const char *path, struct PiImage **out);

// Copies an 8-bit image. `channels` is 1 (gray) or 3 (RGB, interleaved);
// rows are `stride` bytes apart.
//
// # Safety
// `data` points to `stride * height` readable bytes; `out` is writable.
enum PiStatus pi_image_from_pixels(const uint8_t *data,
                                   uint32_t width,
                                   uint32_t height,
                                   size_t stride,
                                   uint32_t channels,
                                   struct PiImage **out);

// # Safety
// `img` is a valid image handle or NULL.
enum PiStatus pi_image_size(const struct PiImage *img, uint32_t *width, uint32_t *height);

// # Safety
// `img` is NULL or came from a `pi_image_*` constructor.
void pi_image_free(struct PiImage *img);

// Horizontal period and band classification. `cfg` may be NULL.
//
// # Safety
// `img` is a valid image handle; `out` is writable.
enum PiStatus pi_estimate_period(const struct PiImage *img,
                                 const struct PiConfig *cfg,
                                 struct PiPeriod *out);

// Loads a binary window classifier artifact.
//
// # Safety
// `path` is a NUL-terminated string; `out` is writable.
enum PiStatus pi_detector_load(const char *path, struct PiDetector **out);

// A detector that scores windows by overlap with a ground-truth mask PNG.
//
// # Safety
// `path` is a NUL-terminated string; `out` is writable.
enum PiStatus pi_detector_from_mask(const char *path, struct PiDetector **out);

// # Safety
// `det` is NULL or came from a `pi_detector_*` constructor.
void pi_detector_free(struct PiDetector *det);

// Loads a defect classifier artifact.
//
// # Safety
// `path` is a NUL-terminated string; `out` is writable.
enum PiStatus pi_classifier_load(const char *path, struct PiClassifier **out);

// Number of classes the classifier scores.
//
// # Safety
// `clf` is a valid classifier handle.
enum PiStatus pi_classifier_class_count(const struct PiClassifier *clf, uint32_t *out);

// Class name at `index`, owned by the handle; NULL when out of range.
//
// # Safety
// `clf` is a valid classifier handle.
const char *pi_classifier_class_name(const struct PiClassifier *clf, uint32_t index);

// # Safety
// `clf` is NULL or came from `pi_classifier_load`.
void pi_classifier_free(struct PiClassifier *clf);

// Self-reference segmentation of one patch. `mask_out` receives
// `width * height` bytes of the image frame, 255 for defect pixels; it may
// be NULL. `pixels_out` receives the defect pixel count.
//
// # Safety
// `img` is a valid image handle; `mask_out` is NULL or holds
// `width * height` writable bytes.
enum PiStatus pi_segment(const struct PiImage *img,
                         const struct PiConfig *cfg,
                         struct PiBox patch,
                         uint8_t *mask_out,
                         uint64_t *pixels_out);

// Full pipeline. `clf` and `cfg` may be NULL.
//
// # Safety
// `img` and `det` are valid handles; `out` is writable.
enum PiStatus pi_inspect(const struct PiImage *img,
                         const struct PiDetector *det,
                         const struct PiClassifier *clf,
                         const struct PiConfig *cfg,
                         struct PiInspection **out);

// Whether any defect was found.
//
// # Safety
// `ins` is a valid inspection handle or NULL.
bool pi_inspection_is_defect(const struct PiInspection *ins);

// # Safety
// `ins` is a valid inspection handle or NULL.
uint32_t pi_inspection_defect_count(const struct PiInspection *ins);

// # Safety
// `ins` is a valid inspection handle; `out` is writable.
enum PiStatus pi_inspection_defect(const struct PiInspection *ins,
                                   uint32_t index,
                                   struct PiDefect *out);

// The inspection as JSON, owned by the handle.
//
// # Safety
// `ins` is a valid inspection handle or NULL.
const char *pi_inspection_json(const struct PiInspection *ins);

// # Safety
// `ins` is NULL or came from `pi_inspect`.
void pi_inspection_free(struct PiInspection *ins);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PANEL_INSPECT_H */
