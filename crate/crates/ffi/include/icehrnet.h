#ifndef ICEHRNET_H
#define ICEHRNET_H

/* Generated by cbindgen from the icehrnet-ffi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Pixels with this mask value are excluded from metric accumulation.
#define IHN_IGNORE_LABEL 255

// Result of every fallible API call.
typedef enum {
  // The call succeeded.
  IHN_STATUS_OK = 0,
  // Invalid arguments, malformed files or failed IO.
  IHN_STATUS_VALIDATION = 1,
  // Training diverged (only produced by training entry points).
  IHN_STATUS_DIVERGENCE = 2,
  // A zero-shot contract violation.
  IHN_STATUS_ZERO_SHOT = 3,
  // A required pointer argument was null.
  IHN_STATUS_NULL_POINTER = 4,
  // A string argument was not valid UTF-8.
  IHN_STATUS_INVALID_UTF8 = 5,
  // An internal panic was caught at the boundary.
  IHN_STATUS_PANIC = 6,
} IhnStatus;

// Stylization modes accepted by [`ihn_stylize_image`].
typedef enum {
  // Copy the input unchanged.
  IHN_STYLIZE_MODE_NONE = 0,
  // Whole-image transfer from the bank's designated patch.
  IHN_STYLIZE_MODE_CONVENTIONAL = 1,
  // Per-class transfer: each class region restyled from its own patch.
  IHN_STYLIZE_MODE_ADVANCED = 2,
} IhnStylizeMode;

// Style-transfer backends accepted by [`ihn_stylize_image`].
typedef enum {
  // Closed-form colour-statistics matching.
  IHN_BACKEND_STATISTICAL = 0,
  // Seeded random-feature encoder with blend weight `alpha`.
  IHN_BACKEND_NEURAL = 1,
} IhnBackend;

// Opaque handle to a streaming confusion matrix.
typedef struct IhnConfusion IhnConfusion;

// Opaque handle to a segmentation model restored from a checkpoint.
typedef struct IhnModel IhnModel;

// Opaque handle to a loaded style bank.
typedef struct IhnStyleBank IhnStyleBank;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *ihn_version(void);

// Copy the message of the most recent failure on this thread into `buf`
// (truncated to `cap - 1` bytes, always NUL-terminated when `cap > 0`).
// Returns the full message length in bytes, excluding the terminator.
//
// # Safety
// If non-null, `buf` must point to `cap` writable bytes.
size_t ihn_last_error_message(char *buf, size_t cap);

// Restore a model from `path` (a checkpoint written by the trainer; its
// JSON sidecar must sit next to it). On success stores the handle in
// `*out`.
//
// # Safety
// `path` must be NUL-terminated; `out` must be a valid pointer.
IhnStatus ihn_model_load(const char *path, IhnModel **out);

// Release a model handle. Accepts null.
//
// # Safety
// `model` must be null or a pointer returned by [`ihn_model_load`] that has
// not been freed yet.
void ihn_model_free(IhnModel *model);

// Number of classes the model predicts; 0 if `model` is null.
//
// # Safety
// `model` must be null or a live handle.
size_t ihn_model_num_classes(const IhnModel *model);

// Training iteration recorded in the checkpoint; 0 if `model` is null.
//
// # Safety
// `model` must be null or a live handle.
uint64_t ihn_model_iteration(const IhnModel *model);

// Segment one RGB image: writes the per-pixel class id into `out_mask`
// (`height * width` bytes).
//
// # Safety
// `image` must point to `height * width * 3` readable bytes and `out_mask`
// to `height * width` writable bytes.
IhnStatus ihn_model_predict(const IhnModel *model,
                            const uint8_t *image,
                            size_t height,
                            size_t width,
                            uint8_t *out_mask);

// Load a style bank JSON file (patch files are resolved relative to it).
//
// # Safety
// `path` must be NUL-terminated; `out` must be a valid pointer.
IhnStatus ihn_bank_load(const char *path, IhnStyleBank **out);

// Release a style bank handle. Accepts null.
//
// # Safety
// `bank` must be null or a pointer returned by [`ihn_bank_load`] that has
// not been freed yet.
void ihn_bank_free(IhnStyleBank *bank);

// Number of classes covered by the bank; 0 if `bank` is null.
//
// # Safety
// `bank` must be null or a live handle.
size_t ihn_bank_num_classes(const IhnStyleBank *bank);

// Restyle one RGB image in `mode` using `bank`, writing
// `height * width * 3` bytes to `out_image`. The mask selects the patch per
// pixel in advanced mode (class ids must be covered by the bank); it is
// ignored in the other modes and may be null there. `alpha` is the neural
// backend's blend weight and is ignored by the statistical backend.
//
// # Safety
// `image` must point to `height * width * 3` readable bytes, `mask` (when
// required) to `height * width` readable bytes, and `out_image` to
// `height * width * 3` writable bytes.
IhnStatus ihn_stylize_image(const IhnStyleBank *bank,
                            IhnStylizeMode mode,
                            IhnBackend backend,
                            double alpha,
                            uint64_t seed,
                            const uint8_t *image,
                            const uint8_t *mask,
                            size_t height,
                            size_t width,
                            uint8_t *out_image);

// Create an empty confusion matrix over `num_classes` classes.
//
// # Safety
// `out` must be a valid pointer.
IhnStatus ihn_confusion_new(size_t num_classes, IhnConfusion **out);

// Release a confusion matrix handle. Accepts null.
//
// # Safety
// `confusion` must be null or a pointer returned by [`ihn_confusion_new`]
// that has not been freed yet.
void ihn_confusion_free(IhnConfusion *confusion);

// Accumulate `len` prediction/ground-truth label pairs. Ground-truth pixels
// equal to `IHN_IGNORE_LABEL` are skipped.
//
// # Safety
// `pred` and `truth` must each point to `len` readable bytes.
IhnStatus ihn_confusion_accumulate(IhnConfusion *confusion,
                                   const uint8_t *pred,
                                   const uint8_t *truth,
                                   size_t len);

// Overall pixel accuracy of everything accumulated so far.
//
// # Safety
// `out` must be a valid pointer.
IhnStatus ihn_confusion_accuracy(const IhnConfusion *confusion, double *out);

// Mean intersection-over-union over classes with non-zero union.
//
// # Safety
// `out` must be a valid pointer.
IhnStatus ihn_confusion_miou(const IhnConfusion *confusion, double *out);

// Write per-class IoU into `out` (`num_classes` doubles). Classes with zero
// union are reported as NaN.
//
// # Safety
// `out` must point to as many doubles as the matrix has classes.
IhnStatus ihn_confusion_per_class_iou(const IhnConfusion *confusion, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ICEHRNET_H */
