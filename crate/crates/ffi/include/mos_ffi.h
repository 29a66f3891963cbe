#ifndef MOS_FFI_H
#define MOS_FFI_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum MosStatus {
  MOS_STATUS_OK = 0,
  MOS_STATUS_NULL_POINTER = 1,
  MOS_STATUS_INVALID_ARGUMENT = 2,
  MOS_STATUS_IO = 3,
  MOS_STATUS_NUMERICAL = 4,
  MOS_STATUS_INTERNAL = 5,
} MosStatus;

/**
 * Opaque trained model.
 */
typedef struct MosModel MosModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null if it succeeded.
 * The pointer stays valid until the next call into this library on the same thread.
 */
const char *mos_last_error_message(void);

/**
 * Load a checkpoint written by the trainer. Release it with [`mos_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MosStatus mos_model_load(const char *path, struct MosModel **out);

/**
 * Release a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`mos_model_load`] and not be used afterwards.
 */
void mos_model_free(struct MosModel *model);

/**
 * Number of clusters the model predicts.
 *
 * # Safety
 * Pointers must be valid.
 */
enum MosStatus mos_model_num_classes(const struct MosModel *model, size_t *out);

/**
 * Input resolution expected by the model. Other sizes are resized on the fly.
 *
 * # Safety
 * Pointers must be valid.
 */
enum MosStatus mos_model_input_size(const struct MosModel *model, size_t *height, size_t *width);

/**
 * Predict cluster labels for `n` original images and their extracted objects.
 *
 * `originals` and `objects` each hold `n` planar images back to back;
 * `labels_out` receives `n` entries.
 *
 * # Safety
 * Buffers must hold the stated number of elements.
 */
enum MosStatus mos_model_predict(const struct MosModel *model,
                                 const float *originals,
                                 const float *objects,
                                 size_t n,
                                 size_t height,
                                 size_t width,
                                 size_t *labels_out);

/**
 * Per-channel mean pixel of an image, written to `mu_out[3]`.
 *
 * # Safety
 * `image` must hold `3 * height * width` floats and `mu_out` three.
 */
enum MosStatus mos_mean_fill(const float *image, size_t height, size_t width, float *mu_out);

/**
 * Keep masked pixels and replace the rest with `mu`. If `mu` is null the
 * image's own per-channel mean is used.
 *
 * # Safety
 * `image` and `out` must hold `3 * height * width` floats, `mask`
 * `height * width` bytes and `mu`, when not null, three floats.
 */
enum MosStatus mos_extract_object(const float *image,
                                  const uint8_t *mask,
                                  size_t height,
                                  size_t width,
                                  const float *mu,
                                  float *out);

/**
 * Minimum-cost assignment on a row-major `k x k` cost matrix.
 * `assignment_out[i]` receives the column matched to row `i`.
 *
 * # Safety
 * `cost` must hold `k * k` doubles and `assignment_out` `k` entries.
 */
enum MosStatus mos_assignment_solve(const double *cost, size_t k, size_t *assignment_out);

/**
 * Clustering accuracy under the best one-to-one cluster/class matching.
 *
 * `base_classes` lists the classes labeled during training. Accuracies
 * whose subset is empty are written as NaN.
 *
 * # Safety
 * `y_true` and `y_pred` must hold `n` entries, `base_classes` `n_base`
 * entries and every output pointer must be valid.
 */
enum MosStatus mos_cluster_acc(const size_t *y_true,
                               const size_t *y_pred,
                               size_t n,
                               const size_t *base_classes,
                               size_t n_base,
                               double *acc_all,
                               double *acc_base,
                               double *acc_novel);

/**
 * Mean signed and mean per-row L1 deviation between two `n x d` row-major
 * feature matrices (`v_x - v_o`).
 *
 * # Safety
 * `v_x` and `v_o` must hold `n * d` doubles; outputs must be valid.
 */
enum MosStatus mos_feature_deviation(const double *v_x,
                                     const double *v_o,
                                     size_t n,
                                     size_t d,
                                     double *mean_dev,
                                     double *l1_dev);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MOS_FFI_H */
