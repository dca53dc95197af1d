#ifndef MOPFLOW_H
#define MOPFLOW_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum MfStatus {
  MF_STATUS_OK = 0,
  MF_STATUS_NULL_POINTER = 1,
  MF_STATUS_INVALID_ARGUMENT = 2,
  MF_STATUS_SHAPE_MISMATCH = 3,
  MF_STATUS_IO = 4,
  MF_STATUS_FORMAT = 5,
  MF_STATUS_NUMERICAL = 6,
  MF_STATUS_PANIC = 7,
} MfStatus;

/**
 * Opaque flow field.
 */
typedef struct MfFlow MfFlow;

/**
 * Opaque image, row-major with interleaved channels.
 */
typedef struct MfImage MfImage;

/**
 * Opaque binary mask.
 */
typedef struct MfMask MfMask;

/**
 * Opaque trained network.
 */
typedef struct MfSegnet MfSegnet;

typedef struct MfEnergyConfig {
  double epsilon;
  double lambda;
} MfEnergyConfig;

typedef struct MfSolverConfig {
  size_t levels;
  size_t steps_per_level;
  double step_size;
  double adam_beta1;
  double adam_beta2;
  double occlusion_alpha1;
  double occlusion_alpha2;
  bool bidirectional;
  bool occlusion_refine;
} MfSolverConfig;

/**
 * `threshold < 0` selects Otsu; otherwise it is a fixed magnitude threshold.
 */
typedef struct MfMopConfig {
  double threshold;
  size_t morph_radius;
  size_t min_area;
} MfMopConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

struct MfEnergyConfig mopflow_energy_config_default(void);

struct MfSolverConfig mopflow_solver_config_default(void);

struct MfMopConfig mopflow_mop_config_default(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *mopflow_version(void);

/**
 * Message for the last failed call on this thread, or NULL after a success.
 * The pointer stays valid until the next mopflow call on the same thread.
 */
const char *mopflow_last_error(void);

/**
 * Copies `height * width * channels` doubles from `data` into a new image.
 * `channels` must be 1 or 3.
 *
 * # Safety
 * `data` must point to that many readable doubles; `out` must be writable.
 */
enum MfStatus mopflow_image_new(size_t height,
                                size_t width,
                                size_t channels,
                                const double *data,
                                struct MfImage **out);

/**
 * # Safety
 * `img` must be NULL or a handle from this library that has not been freed.
 */
void mopflow_image_free(struct MfImage *img);

/**
 * Copies the two planes into a new flow field of `height * width` vectors.
 *
 * # Safety
 * `u` and `v` must each point to `height * width` readable doubles.
 */
enum MfStatus mopflow_flow_new(size_t height,
                               size_t width,
                               const double *u,
                               const double *v,
                               struct MfFlow **out);

/**
 * # Safety
 * `flow` must be a live handle; `height` and `width` must be writable.
 */
enum MfStatus mopflow_flow_dims(const struct MfFlow *flow, size_t *height, size_t *width);

/**
 * Copies the planes into caller buffers of `len` doubles each; `len` must
 * equal `height * width`.
 *
 * # Safety
 * `flow` must be a live handle; `u` and `v` must each hold `len` doubles.
 */
enum MfStatus mopflow_flow_copy(const struct MfFlow *flow, double *u, double *v, size_t len);

/**
 * # Safety
 * `flow` must be NULL or a handle from this library that has not been freed.
 */
void mopflow_flow_free(struct MfFlow *flow);

/**
 * New mask from `height * width` bytes; nonzero is foreground.
 *
 * # Safety
 * `bits` must point to `height * width` readable bytes.
 */
enum MfStatus mopflow_mask_new(size_t height,
                               size_t width,
                               const uint8_t *bits,
                               struct MfMask **out);

/**
 * # Safety
 * `mask` must be a live handle; the outputs must be writable.
 */
enum MfStatus mopflow_mask_dims(const struct MfMask *mask,
                                size_t *height,
                                size_t *width,
                                size_t *count);

/**
 * Writes 0/1 bytes into a caller buffer of `len == height * width` bytes.
 *
 * # Safety
 * `mask` must be a live handle; `bits` must hold `len` bytes.
 */
enum MfStatus mopflow_mask_copy(const struct MfMask *mask, uint8_t *bits, size_t len);

/**
 * # Safety
 * `mask` must be NULL or a handle from this library that has not been freed.
 */
void mopflow_mask_free(struct MfMask *mask);

/**
 * Coarse-to-fine forward flow from `first` to `second`. Colour frames are
 * converted to gray. NULL configs select the defaults.
 *
 * # Safety
 * Handles must be live; config pointers must be NULL or valid.
 */
enum MfStatus mopflow_solve_pyramid(const struct MfImage *first,
                                    const struct MfImage *second,
                                    const struct MfEnergyConfig *energy,
                                    const struct MfSolverConfig *solver,
                                    struct MfFlow **out);

/**
 * Forward-backward occlusion mask.
 *
 * # Safety
 * Handles must be live; `out` must be writable.
 */
enum MfStatus mopflow_occlusion_mask(const struct MfFlow *forward,
                                     const struct MfFlow *backward,
                                     double alpha1,
                                     double alpha2,
                                     struct MfMask **out);

/**
 * Union of moving-object proposals; `proposals` (nullable) receives their
 * number. NULL config selects the defaults.
 *
 * # Safety
 * `flow` must be live; `config` NULL or valid; `out` writable.
 */
enum MfStatus mopflow_segment_flow(const struct MfFlow *flow,
                                   const struct MfMopConfig *config,
                                   struct MfMask **out,
                                   size_t *proposals);

/**
 * Intersection over union; 1.0 when both masks are empty.
 *
 * # Safety
 * Handles must be live; `out` must be writable.
 */
enum MfStatus mopflow_iou(const struct MfMask *a, const struct MfMask *b, double *out);

/**
 * Reads a Middlebury `.flo` file.
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string; `out` writable.
 */
enum MfStatus mopflow_flo_read(const char *path, struct MfFlow **out);

/**
 * Writes a Middlebury `.flo` file atomically.
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string; `flow` live.
 */
enum MfStatus mopflow_flo_write(const char *path, const struct MfFlow *flow);

/**
 * Loads a network checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string; `out` writable.
 */
enum MfStatus mopflow_segnet_load(const char *path, struct MfSegnet **out);

/**
 * Foreground mask predicted from a flow field, same size as the flow.
 *
 * # Safety
 * Handles must be live; `out` writable.
 */
enum MfStatus mopflow_segnet_predict(const struct MfSegnet *net,
                                     const struct MfFlow *flow,
                                     struct MfMask **out);

/**
 * # Safety
 * `net` must be NULL or a handle from this library that has not been freed.
 */
void mopflow_segnet_free(struct MfSegnet *net);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MOPFLOW_H */
