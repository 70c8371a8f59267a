#ifndef VOLSEG_H
#define VOLSEG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum VsDtype {
  VS_DTYPE_U8 = 0,
  VS_DTYPE_F32 = 1,
} VsDtype;

typedef enum VsLoss {
  VS_LOSS_DSC = 0,
  VS_LOSS_JACCARD = 1,
  VS_LOSS_WEIGHTED_CE = 2,
  VS_LOSS_CE = 3,
  /**
   * No-square Dice with the exact derivative.
   */
  VS_LOSS_DSC_NO_SQUARE = 4,
} VsLoss;

typedef enum VsStatus {
  VS_STATUS_OK = 0,
  VS_STATUS_NULL_POINTER = 1,
  VS_STATUS_INVALID_ARGUMENT = 2,
  VS_STATUS_DIMS_MISMATCH = 3,
  VS_STATUS_IO = 4,
  VS_STATUS_FORMAT = 5,
  VS_STATUS_EMPTY_MASK = 6,
  VS_STATUS_PANIC = 7,
} VsStatus;

/**
 * Opaque volume handle.
 */
typedef struct VsVolume VsVolume;

/**
 * Evaluation measures. Distances are in millimetres; entries that are
 * undefined for an empty mask are NaN.
 */
typedef struct VsMetrics {
  double dsc;
  double arvd_pct;
  double abd_mm;
  double hd95_mm;
} VsMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or an empty string.
 * The pointer stays valid until the next `vs_*` call on the same thread.
 */
const char *vs_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *vs_version(void);

/**
 * Copies `len` voxels (x fastest, then y, then z) into a new volume.
 *
 * # Safety
 * `data` must point to `len` readable floats and `out` must be writable.
 */
enum VsStatus vs_volume_new(size_t nx,
                            size_t ny,
                            size_t nz,
                            double sx,
                            double sy,
                            double sz,
                            const float *data,
                            size_t len,
                            struct VsVolume **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum VsStatus vs_volume_read(const char *path, struct VsVolume **out);

/**
 * Writes a VVF file.
 *
 * # Safety
 * `vol` must be a live handle and `path` a NUL-terminated string.
 */
enum VsStatus vs_volume_write_vvf(const struct VsVolume *vol, enum VsDtype dtype, const char *path);

/**
 * # Safety
 * `vol` must be a live handle; `dims` and `spacing`, when non-null, must
 * each hold three writable elements.
 */
enum VsStatus vs_volume_shape(const struct VsVolume *vol, size_t *dims, double *spacing);

/**
 * Copies the voxels into `data`, which must hold exactly the voxel count.
 *
 * # Safety
 * `vol` must be a live handle and `data` must point to `len` writable floats.
 */
enum VsStatus vs_volume_copy_data(const struct VsVolume *vol, float *data, size_t len);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `vol` must be null or a handle not yet freed.
 */
void vs_volume_free(struct VsVolume *vol);

/**
 * Evaluates a loss on flat arrays. `grad` may be null; otherwise it receives
 * `n` partial derivatives with respect to `pred`.
 *
 * # Safety
 * `pred` and `truth` must hold `n` readable doubles, `value` must be
 * writable, and `grad` must be null or hold `n` writable doubles.
 */
enum VsStatus vs_loss(enum VsLoss kind,
                      const double *pred,
                      const double *truth,
                      size_t n,
                      double *value,
                      double *grad);

/**
 * Compares a binary prediction with a binary reference.
 *
 * # Safety
 * Both handles must be live and `out` writable.
 */
enum VsStatus vs_metrics(const struct VsVolume *pred,
                         const struct VsVolume *truth,
                         struct VsMetrics *out);

/**
 * `KL(p || q)`; infinite when q vanishes where p does not.
 *
 * # Safety
 * `p` and `q` must hold `n` readable doubles and `out` must be writable.
 */
enum VsStatus vs_kl_divergence(const double *p, const double *q, size_t n, double *out);

/**
 * Supremum distance `max_i |p_i - q_i|`.
 *
 * # Safety
 * `p` and `q` must hold `n` readable doubles and `out` must be writable.
 */
enum VsStatus vs_tv_distance(const double *p, const double *q, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VOLSEG_H */
