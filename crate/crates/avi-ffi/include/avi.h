#ifndef AVI_H
#define AVI_H

/* Generated by cbindgen from avi-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by every fallible entry point.
 */
typedef enum AviStatus {
  /**
   * The call succeeded.
   */
  AVI_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  AVI_STATUS_NULL_ARGUMENT = 1,
  /**
   * Inputs were structurally valid but rejected by the pipeline.
   */
  AVI_STATUS_INVALID_ARGUMENT = 2,
  /**
   * An output buffer was too small.
   */
  AVI_STATUS_BUFFER_TOO_SMALL = 3,
  /**
   * The callee panicked; the library state is still consistent.
   */
  AVI_STATUS_PANIC = 4,
} AviStatus;

/**
 * A recovered rigid transform with its convergence diagnostics.
 */
typedef struct AviIcpResult AviIcpResult;

/**
 * An immutable point cloud in workspace meters.
 */
typedef struct AviPointCloud AviPointCloud;

/**
 * Workspace extents plus position/scale bin counts.
 */
typedef struct AviQuantConfig AviQuantConfig;

/**
 * A cubic binary occupancy grid.
 */
typedef struct AviVoxelGrid AviVoxelGrid;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the message for the most recent non-`Ok` status on this thread
 * into `buf` (NUL-terminated, truncated to `cap` bytes) and returns the
 * full message length in bytes, excluding the NUL. `buf` may be null to
 * query the length alone.
 *
 * # Safety
 * `buf`, when non-null, must point to `cap` writable bytes.
 */
size_t avi_last_error(char *buf, size_t cap);

/**
 * Builds a point cloud from `len` points packed as x0,y0,z0,x1,…
 *
 * # Safety
 * `xyz` must point to `3·len` readable doubles; `out` must be writable.
 * The returned handle must be released with `avi_point_cloud_free`.
 */
enum AviStatus avi_point_cloud_new(const double *xyz, size_t len, struct AviPointCloud **out);

/**
 * Number of points; 0 for a null handle.
 *
 * # Safety
 * `cloud` must be a live handle or null.
 */
size_t avi_point_cloud_len(const struct AviPointCloud *cloud);

/**
 * Copies the points back out as x0,y0,z0,x1,… into `out`.
 *
 * # Safety
 * `out` must point to `cap` writable doubles; `cap` must be ≥ 3·len.
 */
enum AviStatus avi_point_cloud_copy_xyz(const struct AviPointCloud *cloud, double *out, size_t cap);

/**
 * # Safety
 * `cloud` must be null or a handle not freed before.
 */
void avi_point_cloud_free(struct AviPointCloud *cloud);

/**
 * Writes the object-normalization cube of `cloud` to `out_min`/`out_max`.
 *
 * # Safety
 * `out_min` and `out_max` must each point to 3 writable doubles.
 */
enum AviStatus avi_object_cube(const struct AviPointCloud *cloud, double *out_min, double *out_max);

/**
 * Voxelizes `cloud` into the box `[box_min, box_max]` at `resolution`.
 * Points outside the box are skipped, matching the lifting pipeline.
 *
 * # Safety
 * `box_min`/`box_max` must point to 3 readable doubles each; the returned
 * handle must be released with `avi_voxel_grid_free`.
 */
enum AviStatus avi_voxelize(const struct AviPointCloud *cloud,
                            const double *box_min,
                            const double *box_max,
                            uint32_t resolution,
                            struct AviVoxelGrid **out);

/**
 * Per-axis resolution; 0 for a null handle.
 *
 * # Safety
 * `grid` must be a live handle or null.
 */
uint32_t avi_voxel_grid_resolution(const struct AviVoxelGrid *grid);

/**
 * Number of occupied voxels; 0 for a null handle.
 *
 * # Safety
 * `grid` must be a live handle or null.
 */
size_t avi_voxel_grid_occupied(const struct AviVoxelGrid *grid);

/**
 * Emits one point per occupied voxel at the voxel center inside
 * `[box_min, box_max]`.
 *
 * # Safety
 * As for `avi_voxelize`; the returned cloud must be freed by the caller.
 */
enum AviStatus avi_devoxelize(const struct AviVoxelGrid *grid,
                              const double *box_min,
                              const double *box_max,
                              struct AviPointCloud **out);

/**
 * # Safety
 * `grid` must be null or a handle not freed before.
 */
void avi_voxel_grid_free(struct AviVoxelGrid *grid);

/**
 * Builds a quantization config over the workspace `[ws_min, ws_max]`.
 *
 * # Safety
 * `ws_min`/`ws_max` must point to 3 readable doubles each; the returned
 * handle must be released with `avi_quant_config_free`.
 */
enum AviStatus avi_quant_config_new(const double *ws_min,
                                    const double *ws_max,
                                    uint16_t position_bins,
                                    uint16_t scale_bins,
                                    bool lq_enabled,
                                    struct AviQuantConfig **out);

/**
 * The default config: unit workspace, 256 position bins, 128 scale bins,
 * location quantization enabled.
 *
 * # Safety
 * `out` must be writable; release the handle with `avi_quant_config_free`.
 */
enum AviStatus avi_quant_config_default(struct AviQuantConfig **out);

/**
 * # Safety
 * `cfg` must be null or a handle not freed before.
 */
void avi_quant_config_free(struct AviQuantConfig *cfg);

/**
 * Quantizes a cloud's location to 1-indexed `[x_bin, y_bin, z_bin, s_bin]`.
 *
 * # Safety
 * `out_bins` must point to 4 writable u16s.
 */
enum AviStatus avi_quantize_location(const struct AviPointCloud *cloud,
                                     const struct AviQuantConfig *cfg,
                                     uint16_t *out_bins);

/**
 * Decodes `[x_bin, y_bin, z_bin, s_bin]` back to a bin-center centroid and
 * a scale fraction of the workspace edge.
 *
 * # Safety
 * `bins` must point to 4 readable u16s, `out_center` to 3 writable
 * doubles, `out_scale` to one writable double.
 */
enum AviStatus avi_dequantize_location(const uint16_t *bins,
                                       const struct AviQuantConfig *cfg,
                                       double *out_center,
                                       double *out_scale);

/**
 * World-space effective resolution for an object covering `scale` of the
 * workspace edge when shapes are voxelized at `base_resolution`.
 *
 * # Safety
 * `out` must point to one writable u32.
 */
enum AviStatus avi_effective_resolution(const struct AviQuantConfig *cfg,
                                        uint32_t base_resolution,
                                        double scale,
                                        uint32_t *out);

/**
 * Width of the location token extension appended to a base vocabulary
 * (three 256-bin position segments plus one 128-bin scale segment).
 */
uint32_t avi_location_extension(void);

/**
 * Aligns `source` onto `target` with the default ICP config from an
 * identity initialization.
 *
 * # Safety
 * The returned handle must be released with `avi_icp_result_free`.
 */
enum AviStatus avi_icp_align(const struct AviPointCloud *source,
                             const struct AviPointCloud *target,
                             struct AviIcpResult **out);

/**
 * Copies the recovered rotation matrix, row-major, into `out`.
 *
 * # Safety
 * `out` must point to 9 writable doubles.
 */
enum AviStatus avi_icp_result_rotation(const struct AviIcpResult *res, double *out);

/**
 * Copies the recovered translation into `out`.
 *
 * # Safety
 * `out` must point to 3 writable doubles.
 */
enum AviStatus avi_icp_result_translation(const struct AviIcpResult *res, double *out);

/**
 * Final root-mean-square residual; NaN for a null handle, +inf when no
 * solve ever ran.
 *
 * # Safety
 * `res` must be a live handle or null.
 */
double avi_icp_result_rmse(const struct AviIcpResult *res);

/**
 * Iterations actually run; 0 for a null handle.
 *
 * # Safety
 * `res` must be a live handle or null.
 */
uint32_t avi_icp_result_iterations(const struct AviIcpResult *res);

/**
 * Whether the alignment converged; false for a null handle.
 *
 * # Safety
 * `res` must be a live handle or null.
 */
bool avi_icp_result_converged(const struct AviIcpResult *res);

/**
 * Applies the recovered transform to one point: `out = R·p + t`. This is
 * how a caller carries the motion over to an end-effector position.
 *
 * # Safety
 * `p` must point to 3 readable doubles, `out` to 3 writable doubles.
 */
enum AviStatus avi_icp_result_apply(const struct AviIcpResult *res, const double *p, double *out);

/**
 * # Safety
 * `res` must be null or a handle not freed before.
 */
void avi_icp_result_free(struct AviIcpResult *res);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AVI_H */
