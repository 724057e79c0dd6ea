#ifndef GCM_H
#define GCM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GcmStatus {
  GCM_STATUS_OK = 0,
  GCM_STATUS_NULL_POINTER = 1,
  GCM_STATUS_INVALID_ARGUMENT = 2,
  GCM_STATUS_IO = 3,
  /**
   * Malformed image, pyramid or homography file.
   */
  GCM_STATUS_FORMAT = 4,
  GCM_STATUS_SHAPE_MISMATCH = 5,
  /**
   * Matching ran but found too few matches or no geometric consensus.
   */
  GCM_STATUS_MATCHING_FAILURE = 6,
  GCM_STATUS_OUT_OF_RANGE = 7,
  GCM_STATUS_PANIC = 8,
} GcmStatus;

typedef struct GcmImage GcmImage;

typedef struct GcmMatchResult GcmMatchResult;

typedef struct GcmPyramid GcmPyramid;

typedef struct GcmMatchConfig {
  /**
   * Final ratio-test threshold in (0, 1].
   */
  double ratio;
  /**
   * Non-zero selects whole-map ratio-test candidates instead of the parent patch.
   */
  uint8_t ratio_global;
  size_t levels;
  size_t patch_radius;
  double ransac_threshold;
  size_t ransac_max_iterations;
  double ransac_confidence;
  uint64_t ransac_seed;
  /**
   * Stage-1 RANSAC threshold in deepest-level cells.
   */
  double coarse_threshold_cells;
} GcmMatchConfig;

typedef struct GcmPointPair {
  double xa;
  double ya;
  double xb;
  double yb;
  double distance;
} GcmPointPair;

typedef struct GcmDiagnostics {
  size_t coarse_matches;
  size_t coarse_inliers;
  double inlier_ratio;
  uint8_t fallback;
  uint8_t mixed_features;
  /**
   * Level-0 matches before the ratio test.
   */
  size_t pre_ratio_count;
  /**
   * Level-0 matches after the ratio test.
   */
  size_t level0_count;
  size_t dropped_by_traceback;
} GcmDiagnostics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent failure on this thread, or null. Valid until
 * the next failing call on the same thread.
 */
const char *gcm_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *gcm_version(void);

/**
 * Loads a binary PGM (P5) or PPM (P6) image with maxval 255.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum GcmStatus gcm_image_load(const char *path, struct GcmImage **out);

/**
 * Creates a grayscale image from `height * width` row-major values in [0, 1].
 *
 * # Safety
 * `data` must point to `height * width` floats; `out` must be writable.
 */
enum GcmStatus gcm_image_from_gray(size_t height,
                                   size_t width,
                                   const float *data,
                                   struct GcmImage **out);

/**
 * # Safety
 * `img` must come from this library and not be freed twice. Null is ignored.
 */
void gcm_image_free(struct GcmImage *img);

/**
 * # Safety
 * `img` must be a live handle; the out pointers must be writable.
 */
enum GcmStatus gcm_image_dims(const struct GcmImage *img,
                              size_t *height,
                              size_t *width,
                              size_t *channels);

/**
 * Reads a GCMF feature pyramid; every level is L2-normalized per cell.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum GcmStatus gcm_pyramid_read(const char *path, struct GcmPyramid **out);

/**
 * # Safety
 * `pyr` must come from this library and not be freed twice. Null is ignored.
 */
void gcm_pyramid_free(struct GcmPyramid *pyr);

/**
 * # Safety
 * `pyr` must be a live handle; `levels` must be writable.
 */
enum GcmStatus gcm_pyramid_num_levels(const struct GcmPyramid *pyr, size_t *levels);

/**
 * Dimensions of one level and a pointer to its row-major `h * w * c` data.
 * The data pointer stays valid while `pyr` is alive.
 *
 * # Safety
 * `pyr` must be a live handle; the out pointers must be writable.
 */
enum GcmStatus gcm_pyramid_level(const struct GcmPyramid *pyr,
                                 size_t level,
                                 size_t *height,
                                 size_t *width,
                                 size_t *channels,
                                 const float **data);

/**
 * Fills `cfg` with the library defaults.
 *
 * # Safety
 * `cfg` must be writable.
 */
enum GcmStatus gcm_match_config_default(struct GcmMatchConfig *cfg);

/**
 * Two-stage matching with the built-in descriptor. `cfg` may be null for defaults.
 *
 * # Safety
 * `a` and `b` must be live handles; `out` must be writable.
 */
enum GcmStatus gcm_match_images(const struct GcmImage *a,
                                const struct GcmImage *b,
                                const struct GcmMatchConfig *cfg,
                                struct GcmMatchResult **out);

/**
 * Two-stage matching from ingested pyramids. Stage 2 describes A and the
 * warped image with the built-in descriptor (`mixed_features` is set).
 *
 * # Safety
 * All handles must be live; `out` must be writable. `cfg` may be null.
 */
enum GcmStatus gcm_match_pyramids(const struct GcmPyramid *pyr_a,
                                  const struct GcmPyramid *pyr_b,
                                  const struct GcmImage *a,
                                  const struct GcmImage *b,
                                  const struct GcmMatchConfig *cfg,
                                  struct GcmMatchResult **out);

/**
 * # Safety
 * `res` must come from this library and not be freed twice. Null is ignored.
 */
void gcm_match_result_free(struct GcmMatchResult *res);

/**
 * # Safety
 * `res` must be a live handle; `len` must be writable.
 */
enum GcmStatus gcm_match_result_len(const struct GcmMatchResult *res, size_t *len);

/**
 * # Safety
 * `res` must be a live handle; `pair` must be writable.
 */
enum GcmStatus gcm_match_result_get(const struct GcmMatchResult *res,
                                    size_t index,
                                    struct GcmPointPair *pair);

/**
 * Stage-1 homography (A to B) as 9 row-major values, scaled to unit Frobenius norm.
 *
 * # Safety
 * `res` must be a live handle; `out` must point to 9 writable doubles.
 */
enum GcmStatus gcm_match_result_homography(const struct GcmMatchResult *res, double *out);

/**
 * # Safety
 * `res` must be a live handle; `out` must be writable.
 */
enum GcmStatus gcm_match_result_diagnostics(const struct GcmMatchResult *res,
                                            struct GcmDiagnostics *out);

/**
 * Distillation loss between the level-0 maps of two pyramids.
 *
 * # Safety
 * Both handles must be live; `loss` must be writable.
 */
enum GcmStatus gcm_distillation_loss(const struct GcmPyramid *teacher,
                                     const struct GcmPyramid *student,
                                     double *loss);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GCM_H */
