#ifndef DYGS_H
#define DYGS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum DygsStatus {
  DYGS_STATUS_OK = 0,
  DYGS_STATUS_NULL_POINTER = 1,
  DYGS_STATUS_INVALID_ARGUMENT = 2,
  DYGS_STATUS_NUMERICALLY_UNSTABLE = 3,
  DYGS_STATUS_DIVERGED = 4,
  DYGS_STATUS_UNDEFINED_METRIC = 5,
  DYGS_STATUS_EMPTY_DATASET = 6,
  DYGS_STATUS_LOAD_FAILED = 7,
  DYGS_STATUS_CORRUPT_CHECKPOINT = 8,
  DYGS_STATUS_UNSUPPORTED_VERSION = 9,
  DYGS_STATUS_IO = 10,
  DYGS_STATUS_PANIC = 11,
} DygsStatus;

/**
 * An RGBD sequence (optionally with ground-truth poses).
 */
typedef struct DygsDataset DygsDataset;

/**
 * The result of a reconstruction run: model segments and trajectory.
 */
typedef struct DygsReconstruction DygsReconstruction;

/**
 * Aggregate scores of a reconstruction against a dataset.
 */
typedef struct DygsScores {
  double mean_psnr;
  double mean_ssim;
  /**
   * Absolute trajectory error in millimeters; NaN without ground truth.
   */
  double ate_mm;
} DygsScores;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * NUL-terminated description of the last failure on this thread (empty
 * after a successful call). Valid until the next call on this thread.
 */
const char *dygs_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *dygs_version(void);

/**
 * Loads the dataset described by the manifest at `manifest_path`, box
 * downsampling images by `downsample` (1 keeps the full resolution).
 *
 * # Safety
 * `manifest_path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DygsStatus dygs_dataset_load(const char *manifest_path,
                                  uint32_t downsample,
                                  struct DygsDataset **out);

/**
 * Generates a synthetic sequence from a JSON scene configuration (NULL for
 * the defaults).
 *
 * # Safety
 * `config_json` must be NULL or NUL-terminated; `out` must be valid.
 */
enum DygsStatus dygs_dataset_synthetic(const char *config_json, struct DygsDataset **out);

/**
 * Number of frames in `dataset`.
 *
 * # Safety
 * `dataset` must be a live handle and `out_len` a valid pointer.
 */
enum DygsStatus dygs_dataset_len(const struct DygsDataset *dataset, size_t *out_len);

/**
 * Releases a dataset handle. NULL is ignored.
 *
 * # Safety
 * `dataset` must be NULL or a handle not yet freed.
 */
void dygs_dataset_free(struct DygsDataset *dataset);

/**
 * Reconstructs `dataset` with a JSON training configuration (NULL for the
 * defaults).
 *
 * # Safety
 * `dataset` must be a live handle, `config_json` NULL or NUL-terminated,
 * `out` valid.
 */
enum DygsStatus dygs_reconstruct(const struct DygsDataset *dataset,
                                 const char *config_json,
                                 struct DygsReconstruction **out);

/**
 * Loads a reconstruction checkpoint.
 *
 * # Safety
 * `path` must be NUL-terminated and `out` valid.
 */
enum DygsStatus dygs_reconstruction_load(const char *path, struct DygsReconstruction **out);

/**
 * Writes a checkpoint of `rec` to `path`.
 *
 * # Safety
 * `rec` must be a live handle and `path` NUL-terminated.
 */
enum DygsStatus dygs_reconstruction_save(const struct DygsReconstruction *rec, const char *path);

/**
 * Writes the estimated trajectory of `rec` to `path` in TUM format.
 *
 * # Safety
 * `rec` must be a live handle and `path` NUL-terminated.
 */
enum DygsStatus dygs_reconstruction_write_trajectory(const struct DygsReconstruction *rec,
                                                     const char *path);

/**
 * Number of poses in the estimated trajectory.
 *
 * # Safety
 * `rec` must be a live handle and `out_len` valid.
 */
enum DygsStatus dygs_reconstruction_frame_count(const struct DygsReconstruction *rec,
                                                size_t *out_len);

/**
 * Estimated world-to-camera pose of frame `index` as a row-major 4×4 matrix
 * written to `out_matrix` (16 doubles), and its timestamp.
 *
 * # Safety
 * `rec` must be a live handle, `out_matrix` must hold 16 doubles and
 * `out_timestamp` must be valid or NULL.
 */
enum DygsStatus dygs_reconstruction_pose(const struct DygsReconstruction *rec,
                                         size_t index,
                                         double *out_matrix,
                                         double *out_timestamp);

/**
 * Image size the reconstruction renders at.
 *
 * # Safety
 * `rec` must be a live handle; `out_width` and `out_height` valid.
 */
enum DygsStatus dygs_reconstruction_image_size(const struct DygsReconstruction *rec,
                                               size_t *out_width,
                                               size_t *out_height);

/**
 * Renders the scene at time `time` from the world-to-camera pose
 * `pose_matrix` (row-major 4×4). Writes interleaved RGB in `[0, 1]`, row by
 * row, into `out_rgb`, which must hold `rgb_len = width·height·3` doubles.
 *
 * # Safety
 * `rec` must be a live handle, `pose_matrix` must point to 16 doubles and
 * `out_rgb` to `rgb_len` doubles.
 */
enum DygsStatus dygs_reconstruction_render(const struct DygsReconstruction *rec,
                                           const double *pose_matrix,
                                           double time,
                                           double *out_rgb,
                                           size_t rgb_len);

/**
 * Scores `rec` against the frames of `dataset` (PSNR over tissue pixels).
 *
 * # Safety
 * Both handles must be live and `out` valid.
 */
enum DygsStatus dygs_reconstruction_evaluate(const struct DygsReconstruction *rec,
                                             const struct DygsDataset *dataset,
                                             struct DygsScores *out);

/**
 * Releases a reconstruction handle. NULL is ignored.
 *
 * # Safety
 * `rec` must be NULL or a handle not yet freed.
 */
void dygs_reconstruction_free(struct DygsReconstruction *rec);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DYGS_H */
