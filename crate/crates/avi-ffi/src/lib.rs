//! C ABI over the core pipeline.
//!
//! Every handle is an opaque pointer owned by this library and released
//! with its matching `_free` function. Fallible entry points return an
//! [`AviStatus`]; on anything but `Ok` a thread-local message is readable
//! through [`avi_last_error`]. Panics never unwind across the boundary.
//! The C header `include/avi.h` is generated by cbindgen at build time.

use std::ffi::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::cell::RefCell;

use avi_core::geometry::{
    devoxelize, voxelize, Aabb, Point3, PointCloud, RigidTransform, VoxelGrid,
};
use avi_core::icp::{icp_align, IcpConfig, IcpResult};
use avi_core::locquant::{
    dequantize_location, effective_resolution, object_cube, quantize_location,
    LocationDescriptor, QuantConfig, LOCATION_EXTENSION,
};
use avi_core::Error;

/// Status code returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AviStatus {
    /// The call succeeded.
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// Inputs were structurally valid but rejected by the pipeline.
    InvalidArgument = 2,
    /// An output buffer was too small.
    BufferTooSmall = 3,
    /// The callee panicked; the library state is still consistent.
    Panic = 4,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn fail(e: &Error) -> AviStatus {
    set_error(e.to_string());
    AviStatus::InvalidArgument
}

fn null_arg(name: &str) -> AviStatus {
    set_error(format!("{name} must not be null"));
    AviStatus::NullArgument
}

fn guarded(f: impl FnOnce() -> AviStatus) -> AviStatus {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| {
        set_error("panic caught at the FFI boundary");
        AviStatus::Panic
    })
}

/// Copies the message for the most recent non-`Ok` status on this thread
/// into `buf` (NUL-terminated, truncated to `cap` bytes) and returns the
/// full message length in bytes, excluding the NUL. `buf` may be null to
/// query the length alone.
///
/// # Safety
/// `buf`, when non-null, must point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn avi_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// An immutable point cloud in workspace meters.
pub struct AviPointCloud(PointCloud);
/// A cubic binary occupancy grid.
pub struct AviVoxelGrid(VoxelGrid);
/// Workspace extents plus position/scale bin counts.
pub struct AviQuantConfig(QuantConfig);
/// A recovered rigid transform with its convergence diagnostics.
pub struct AviIcpResult(IcpResult);

unsafe fn read_box(min: *const f64, max: *const f64) -> Result<Aabb, Error> {
    let lo = std::slice::from_raw_parts(min, 3);
    let hi = std::slice::from_raw_parts(max, 3);
    Aabb::new(Point3::new(lo[0], lo[1], lo[2]), Point3::new(hi[0], hi[1], hi[2]))
}

unsafe fn write_point(dst: *mut f64, p: &Point3) {
    for a in 0..3 {
        *dst.add(a) = p[a];
    }
}

/// Builds a point cloud from `len` points packed as x0,y0,z0,x1,…
///
/// # Safety
/// `xyz` must point to `3·len` readable doubles; `out` must be writable.
/// The returned handle must be released with `avi_point_cloud_free`.
#[no_mangle]
pub unsafe extern "C" fn avi_point_cloud_new(
    xyz: *const f64,
    len: usize,
    out: *mut *mut AviPointCloud,
) -> AviStatus {
    guarded(|| {
        if out.is_null() {
            return null_arg("out");
        }
        if xyz.is_null() && len > 0 {
            return null_arg("xyz");
        }
        let flat = std::slice::from_raw_parts(xyz, 3 * len);
        let points = flat.chunks_exact(3).map(|c| Point3::new(c[0], c[1], c[2])).collect();
        *out = Box::into_raw(Box::new(AviPointCloud(PointCloud::new(points))));
        AviStatus::Ok
    })
}

/// Number of points; 0 for a null handle.
///
/// # Safety
/// `cloud` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn avi_point_cloud_len(cloud: *const AviPointCloud) -> usize {
    if cloud.is_null() {
        return 0;
    }
    (*cloud).0.len()
}

/// Copies the points back out as x0,y0,z0,x1,… into `out`.
///
/// # Safety
/// `out` must point to `cap` writable doubles; `cap` must be ≥ 3·len.
#[no_mangle]
pub unsafe extern "C" fn avi_point_cloud_copy_xyz(
    cloud: *const AviPointCloud,
    out: *mut f64,
    cap: usize,
) -> AviStatus {
    guarded(|| {
        if cloud.is_null() {
            return null_arg("cloud");
        }
        if out.is_null() {
            return null_arg("out");
        }
        let points = &(*cloud).0.points;
        if cap < 3 * points.len() {
            set_error(format!("need {} doubles, got {cap}", 3 * points.len()));
            return AviStatus::BufferTooSmall;
        }
        for (i, p) in points.iter().enumerate() {
            write_point(out.add(3 * i), p);
        }
        AviStatus::Ok
    })
}

/// # Safety
/// `cloud` must be null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn avi_point_cloud_free(cloud: *mut AviPointCloud) {
    if !cloud.is_null() {
        drop(Box::from_raw(cloud));
    }
}

/// Writes the object-normalization cube of `cloud` to `out_min`/`out_max`.
///
/// # Safety
/// `out_min` and `out_max` must each point to 3 writable doubles.
#[no_mangle]
pub unsafe extern "C" fn avi_object_cube(
    cloud: *const AviPointCloud,
    out_min: *mut f64,
    out_max: *mut f64,
) -> AviStatus {
    guarded(|| {
        if cloud.is_null() {
            return null_arg("cloud");
        }
        if out_min.is_null() || out_max.is_null() {
            return null_arg("out_min/out_max");
        }
        match object_cube(&(*cloud).0) {
            Ok(cube) => {
                write_point(out_min, &cube.min());
                write_point(out_max, &cube.max());
                AviStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Voxelizes `cloud` into the box `[box_min, box_max]` at `resolution`.
/// Points outside the box are skipped, matching the lifting pipeline.
///
/// # Safety
/// `box_min`/`box_max` must point to 3 readable doubles each; the returned
/// handle must be released with `avi_voxel_grid_free`.
#[no_mangle]
pub unsafe extern "C" fn avi_voxelize(
    cloud: *const AviPointCloud,
    box_min: *const f64,
    box_max: *const f64,
    resolution: u32,
    out: *mut *mut AviVoxelGrid,
) -> AviStatus {
    guarded(|| {
        if cloud.is_null() {
            return null_arg("cloud");
        }
        if box_min.is_null() || box_max.is_null() {
            return null_arg("box_min/box_max");
        }
        if out.is_null() {
            return null_arg("out");
        }
        let grid = read_box(box_min, box_max)
            .and_then(|bbox| voxelize(&(*cloud).0, &bbox, resolution));
        match grid {
            Ok(g) => {
                *out = Box::into_raw(Box::new(AviVoxelGrid(g)));
                AviStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Per-axis resolution; 0 for a null handle.
///
/// # Safety
/// `grid` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn avi_voxel_grid_resolution(grid: *const AviVoxelGrid) -> u32 {
    if grid.is_null() {
        return 0;
    }
    (*grid).0.resolution()
}

/// Number of occupied voxels; 0 for a null handle.
///
/// # Safety
/// `grid` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn avi_voxel_grid_occupied(grid: *const AviVoxelGrid) -> usize {
    if grid.is_null() {
        return 0;
    }
    (*grid).0.occupied_count()
}

/// Emits one point per occupied voxel at the voxel center inside
/// `[box_min, box_max]`.
///
/// # Safety
/// As for `avi_voxelize`; the returned cloud must be freed by the caller.
#[no_mangle]
pub unsafe extern "C" fn avi_devoxelize(
    grid: *const AviVoxelGrid,
    box_min: *const f64,
    box_max: *const f64,
    out: *mut *mut AviPointCloud,
) -> AviStatus {
    guarded(|| {
        if grid.is_null() {
            return null_arg("grid");
        }
        if box_min.is_null() || box_max.is_null() {
            return null_arg("box_min/box_max");
        }
        if out.is_null() {
            return null_arg("out");
        }
        let cloud =
            read_box(box_min, box_max).and_then(|bbox| devoxelize(&(*grid).0, &bbox));
        match cloud {
            Ok(c) => {
                *out = Box::into_raw(Box::new(AviPointCloud(c)));
                AviStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// # Safety
/// `grid` must be null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn avi_voxel_grid_free(grid: *mut AviVoxelGrid) {
    if !grid.is_null() {
        drop(Box::from_raw(grid));
    }
}

/// Builds a quantization config over the workspace `[ws_min, ws_max]`.
///
/// # Safety
/// `ws_min`/`ws_max` must point to 3 readable doubles each; the returned
/// handle must be released with `avi_quant_config_free`.
#[no_mangle]
pub unsafe extern "C" fn avi_quant_config_new(
    ws_min: *const f64,
    ws_max: *const f64,
    position_bins: u16,
    scale_bins: u16,
    lq_enabled: bool,
    out: *mut *mut AviQuantConfig,
) -> AviStatus {
    guarded(|| {
        if ws_min.is_null() || ws_max.is_null() {
            return null_arg("ws_min/ws_max");
        }
        if out.is_null() {
            return null_arg("out");
        }
        let cfg = read_box(ws_min, ws_max)
            .and_then(|ws| QuantConfig::new(ws, position_bins, scale_bins, lq_enabled));
        match cfg {
            Ok(c) => {
                *out = Box::into_raw(Box::new(AviQuantConfig(c)));
                AviStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// The default config: unit workspace, 256 position bins, 128 scale bins,
/// location quantization enabled.
///
/// # Safety
/// `out` must be writable; release the handle with `avi_quant_config_free`.
#[no_mangle]
pub unsafe extern "C" fn avi_quant_config_default(out: *mut *mut AviQuantConfig) -> AviStatus {
    guarded(|| {
        if out.is_null() {
            return null_arg("out");
        }
        *out = Box::into_raw(Box::new(AviQuantConfig(QuantConfig::default())));
        AviStatus::Ok
    })
}

/// # Safety
/// `cfg` must be null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn avi_quant_config_free(cfg: *mut AviQuantConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Quantizes a cloud's location to 1-indexed `[x_bin, y_bin, z_bin, s_bin]`.
///
/// # Safety
/// `out_bins` must point to 4 writable u16s.
#[no_mangle]
pub unsafe extern "C" fn avi_quantize_location(
    cloud: *const AviPointCloud,
    cfg: *const AviQuantConfig,
    out_bins: *mut u16,
) -> AviStatus {
    guarded(|| {
        if cloud.is_null() || cfg.is_null() {
            return null_arg("cloud/cfg");
        }
        if out_bins.is_null() {
            return null_arg("out_bins");
        }
        match quantize_location(&(*cloud).0, &(*cfg).0) {
            Ok(d) => {
                for (i, b) in [d.x_bin, d.y_bin, d.z_bin, d.s_bin].into_iter().enumerate() {
                    *out_bins.add(i) = b;
                }
                AviStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Decodes `[x_bin, y_bin, z_bin, s_bin]` back to a bin-center centroid and
/// a scale fraction of the workspace edge.
///
/// # Safety
/// `bins` must point to 4 readable u16s, `out_center` to 3 writable
/// doubles, `out_scale` to one writable double.
#[no_mangle]
pub unsafe extern "C" fn avi_dequantize_location(
    bins: *const u16,
    cfg: *const AviQuantConfig,
    out_center: *mut f64,
    out_scale: *mut f64,
) -> AviStatus {
    guarded(|| {
        if bins.is_null() || cfg.is_null() {
            return null_arg("bins/cfg");
        }
        if out_center.is_null() || out_scale.is_null() {
            return null_arg("out_center/out_scale");
        }
        let b = std::slice::from_raw_parts(bins, 4);
        let desc = LocationDescriptor::new(b[0], b[1], b[2], b[3]);
        match dequantize_location(&desc, &(*cfg).0) {
            Ok((center, scale)) => {
                write_point(out_center, &center);
                *out_scale = scale;
                AviStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// World-space effective resolution for an object covering `scale` of the
/// workspace edge when shapes are voxelized at `base_resolution`.
///
/// # Safety
/// `out` must point to one writable u32.
#[no_mangle]
pub unsafe extern "C" fn avi_effective_resolution(
    cfg: *const AviQuantConfig,
    base_resolution: u32,
    scale: f64,
    out: *mut u32,
) -> AviStatus {
    guarded(|| {
        if cfg.is_null() {
            return null_arg("cfg");
        }
        if out.is_null() {
            return null_arg("out");
        }
        match effective_resolution(&(*cfg).0, base_resolution, scale) {
            Ok(r) => {
                *out = r;
                AviStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Width of the location token extension appended to a base vocabulary
/// (three 256-bin position segments plus one 128-bin scale segment).
#[no_mangle]
pub extern "C" fn avi_location_extension() -> u32 {
    LOCATION_EXTENSION
}

/// Aligns `source` onto `target` with the default ICP config from an
/// identity initialization.
///
/// # Safety
/// The returned handle must be released with `avi_icp_result_free`.
#[no_mangle]
pub unsafe extern "C" fn avi_icp_align(
    source: *const AviPointCloud,
    target: *const AviPointCloud,
    out: *mut *mut AviIcpResult,
) -> AviStatus {
    guarded(|| {
        if source.is_null() || target.is_null() {
            return null_arg("source/target");
        }
        if out.is_null() {
            return null_arg("out");
        }
        let res = icp_align(
            &(*source).0,
            &(*target).0,
            &IcpConfig::default(),
            &RigidTransform::identity(),
        );
        match res {
            Ok(r) => {
                *out = Box::into_raw(Box::new(AviIcpResult(r)));
                AviStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Copies the recovered rotation matrix, row-major, into `out`.
///
/// # Safety
/// `out` must point to 9 writable doubles.
#[no_mangle]
pub unsafe extern "C" fn avi_icp_result_rotation(
    res: *const AviIcpResult,
    out: *mut f64,
) -> AviStatus {
    guarded(|| {
        if res.is_null() {
            return null_arg("res");
        }
        if out.is_null() {
            return null_arg("out");
        }
        let r = (*res).0.transform.rotation();
        for i in 0..3 {
            for j in 0..3 {
                *out.add(3 * i + j) = r[(i, j)];
            }
        }
        AviStatus::Ok
    })
}

/// Copies the recovered translation into `out`.
///
/// # Safety
/// `out` must point to 3 writable doubles.
#[no_mangle]
pub unsafe extern "C" fn avi_icp_result_translation(
    res: *const AviIcpResult,
    out: *mut f64,
) -> AviStatus {
    guarded(|| {
        if res.is_null() {
            return null_arg("res");
        }
        if out.is_null() {
            return null_arg("out");
        }
        let t = (*res).0.transform.translation();
        for a in 0..3 {
            *out.add(a) = t[a];
        }
        AviStatus::Ok
    })
}

/// Final root-mean-square residual; NaN for a null handle, +inf when no
/// solve ever ran.
///
/// # Safety
/// `res` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn avi_icp_result_rmse(res: *const AviIcpResult) -> f64 {
    if res.is_null() {
        return f64::NAN;
    }
    (*res).0.rmse
}

/// Iterations actually run; 0 for a null handle.
///
/// # Safety
/// `res` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn avi_icp_result_iterations(res: *const AviIcpResult) -> u32 {
    if res.is_null() {
        return 0;
    }
    (*res).0.iterations
}

/// Whether the alignment converged; false for a null handle.
///
/// # Safety
/// `res` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn avi_icp_result_converged(res: *const AviIcpResult) -> bool {
    if res.is_null() {
        return false;
    }
    (*res).0.converged
}

/// Applies the recovered transform to one point: `out = R·p + t`. This is
/// how a caller carries the motion over to an end-effector position.
///
/// # Safety
/// `p` must point to 3 readable doubles, `out` to 3 writable doubles.
#[no_mangle]
pub unsafe extern "C" fn avi_icp_result_apply(
    res: *const AviIcpResult,
    p: *const f64,
    out: *mut f64,
) -> AviStatus {
    guarded(|| {
        if res.is_null() {
            return null_arg("res");
        }
        if p.is_null() || out.is_null() {
            return null_arg("p/out");
        }
        let q = std::slice::from_raw_parts(p, 3);
        let moved = (*res).0.transform.apply_point(&Point3::new(q[0], q[1], q[2]));
        write_point(out, &moved);
        AviStatus::Ok
    })
}

/// # Safety
/// `res` must be null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn avi_icp_result_free(res: *mut AviIcpResult) {
    if !res.is_null() {
        drop(Box::from_raw(res));
    }
}
