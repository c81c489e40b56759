#ifndef SERVOTRACK_H
#define SERVOTRACK_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum StStatus {
  ST_STATUS_OK = 0,
  ST_STATUS_NULL_POINTER = 1,
  ST_STATUS_INVALID_INPUT = 2,
  ST_STATUS_PATCH_OUT_OF_FRAME = 3,
  ST_STATUS_DEGENERATE_TEMPLATE = 4,
  ST_STATUS_WEIGHT_LOAD = 5,
  ST_STATUS_CONFIG = 6,
  ST_STATUS_UNCONTROLLABLE = 7,
  ST_STATUS_NUMERICAL = 8,
  ST_STATUS_PANIC = 9,
  ST_STATUS_OTHER = 10,
} StStatus;

/**
 * Where a pose came from.
 */
enum StPoseSource
#if defined(__cplusplus) || __STDC_VERSION__ >= 202311L
  : uint32_t
#endif // defined(__cplusplus) || __STDC_VERSION__ >= 202311L
 {
  ST_POSE_SOURCE_ALIGNED = 0,
  ST_POSE_SOURCE_PREDICTED = 1,
  ST_POSE_SOURCE_HELD = 2,
};
#ifndef __cplusplus
#if __STDC_VERSION__ >= 202311L
typedef enum StPoseSource StPoseSource;
#else
typedef uint32_t StPoseSource;
#endif // __STDC_VERSION__ >= 202311L
#endif // __cplusplus

/**
 * Opaque tracker handle.
 */
typedef struct StTracker StTracker;

/**
 * Per-frame tracker output. `tx, ty` is the template center in frame pixels;
 * `theta` and `scale` are relative to the template.
 */
typedef struct StPose {
  uint64_t frame_index;
  double tx;
  double ty;
  double theta;
  double scale;
  StPoseSource source;
  double op_percent;
  double ncc_score;
  double elapsed_ms;
} StPose;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *st_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *st_version(void);

/**
 * Creates a tracker from an 8-bit grayscale frame (row-major, `width * height`
 * bytes) and the template center. `config_json` may be null for defaults.
 *
 * # Safety
 * `pixels` must point to `width * height` readable bytes, `config_json` must be
 * null or a NUL-terminated string, and `out` must be writable.
 */
enum StStatus st_tracker_new(const uint8_t *pixels,
                             uint32_t width,
                             uint32_t height,
                             double cx,
                             double cy,
                             const char *config_json,
                             struct StTracker **out);

/**
 * Tracks one frame and writes the pose to `out`.
 *
 * # Safety
 * `tracker` must come from [`st_tracker_new`] and not be freed; `pixels` must
 * point to `width * height` readable bytes; `out` must be writable.
 */
enum StStatus st_tracker_track(struct StTracker *tracker,
                               const uint8_t *pixels,
                               uint32_t width,
                               uint32_t height,
                               struct StPose *out);

/**
 * Releases a tracker. Null is ignored.
 *
 * # Safety
 * `tracker` must be null or a live handle from [`st_tracker_new`].
 */
void st_tracker_free(struct StTracker *tracker);

/**
 * One servo step `v = -lambda * pinv(L) * e`. `l` is row-major `rows x cols`,
 * `error` has `rows` entries and `velocity_out` receives `cols` entries.
 *
 * # Safety
 * All pointers must reference arrays of the stated lengths.
 */
enum StStatus st_ibvs_step(const double *error,
                           const double *l,
                           uint32_t rows,
                           uint32_t cols,
                           double lambda,
                           double *velocity_out);

/**
 * Converts interleaved 8-bit RGB to gray with BT.601 weights. `gray_out`
 * receives `width * height` values in `[0, 255]`.
 *
 * # Safety
 * `rgb` must hold `3 * width * height` bytes and `gray_out` `width * height` doubles.
 */
enum StStatus st_rgb_to_gray(const uint8_t *rgb, uint32_t width, uint32_t height, double *gray_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SERVOTRACK_H */
