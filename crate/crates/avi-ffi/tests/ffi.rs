//! Drives the C entry points exactly as a foreign caller would: raw
//! pointers in, status codes out, explicit frees.

use std::ptr;

use avi_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0i8; 256];
    let n = unsafe { avi_last_error(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(buf.len() - 1)].iter().map(|&b| b as u8).collect();
    String::from_utf8(bytes).unwrap()
}

fn cloud_of(points: &[[f64; 3]]) -> *mut AviPointCloud {
    let flat: Vec<f64> = points.iter().flatten().copied().collect();
    let mut cloud = ptr::null_mut();
    let status = unsafe { avi_point_cloud_new(flat.as_ptr(), points.len(), &mut cloud) };
    assert_eq!(status, AviStatus::Ok);
    assert!(!cloud.is_null());
    cloud
}

#[test]
fn point_cloud_round_trips_bitwise() {
    let points = [[0.125, 0.25, 0.5], [0.1, 0.2, 0.3], [0.9, 0.8, 0.7]];
    let cloud = cloud_of(&points);
    unsafe {
        assert_eq!(avi_point_cloud_len(cloud), 3);
        let mut back = vec![0.0f64; 9];
        assert_eq!(avi_point_cloud_copy_xyz(cloud, back.as_mut_ptr(), back.len()), AviStatus::Ok);
        let flat: Vec<f64> = points.iter().flatten().copied().collect();
        for (a, b) in back.iter().zip(flat.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let mut small = [0.0f64; 4];
        assert_eq!(
            avi_point_cloud_copy_xyz(cloud, small.as_mut_ptr(), small.len()),
            AviStatus::BufferTooSmall
        );
        assert!(last_error().contains("doubles"));
        avi_point_cloud_free(cloud);
    }
}

#[test]
fn null_arguments_are_reported_not_fatal() {
    unsafe {
        let mut out = ptr::null_mut();
        assert_eq!(avi_point_cloud_new(ptr::null(), 2, &mut out), AviStatus::NullArgument);
        assert!(last_error().contains("xyz"));
        assert_eq!(avi_icp_align(ptr::null(), ptr::null(), &mut ptr::null_mut()), AviStatus::NullArgument);
        assert_eq!(avi_point_cloud_len(ptr::null()), 0);
        assert_eq!(avi_voxel_grid_resolution(ptr::null()), 0);
        assert!(avi_icp_result_rmse(ptr::null()).is_nan());
        assert!(!avi_icp_result_converged(ptr::null()));
        avi_point_cloud_free(ptr::null_mut());
        avi_voxel_grid_free(ptr::null_mut());
        avi_quant_config_free(ptr::null_mut());
        avi_icp_result_free(ptr::null_mut());
    }
}

#[test]
fn invalid_inputs_surface_pipeline_errors() {
    unsafe {
        let empty = cloud_of(&[]);
        let mut lo = [0.0f64; 3];
        let mut hi = [0.0f64; 3];
        assert_eq!(
            avi_object_cube(empty, lo.as_mut_ptr(), hi.as_mut_ptr()),
            AviStatus::InvalidArgument
        );
        assert!(!last_error().is_empty());
        avi_point_cloud_free(empty);

        // Inverted box.
        let cloud = cloud_of(&[[0.5, 0.5, 0.5]]);
        let mut grid = ptr::null_mut();
        let min = [1.0f64, 1.0, 1.0];
        let max = [0.0f64, 0.0, 0.0];
        assert_eq!(
            avi_voxelize(cloud, min.as_ptr(), max.as_ptr(), 64, &mut grid),
            AviStatus::InvalidArgument
        );
        avi_point_cloud_free(cloud);
    }
}

#[test]
fn voxel_round_trip_through_the_object_cube() {
    let cloud = cloud_of(&[
        [0.30, 0.30, 0.10],
        [0.35, 0.32, 0.12],
        [0.40, 0.30, 0.15],
        [0.33, 0.36, 0.11],
        [0.38, 0.34, 0.13],
    ]);
    unsafe {
        let mut lo = [0.0f64; 3];
        let mut hi = [0.0f64; 3];
        assert_eq!(avi_object_cube(cloud, lo.as_mut_ptr(), hi.as_mut_ptr()), AviStatus::Ok);
        assert!((0..3).all(|a| hi[a] > lo[a]));

        let mut grid = ptr::null_mut();
        assert_eq!(avi_voxelize(cloud, lo.as_ptr(), hi.as_ptr(), 64, &mut grid), AviStatus::Ok);
        assert_eq!(avi_voxel_grid_resolution(grid), 64);
        let occupied = avi_voxel_grid_occupied(grid);
        assert!(occupied >= 1 && occupied <= 5);

        let mut back = ptr::null_mut();
        assert_eq!(avi_devoxelize(grid, lo.as_ptr(), hi.as_ptr(), &mut back), AviStatus::Ok);
        assert_eq!(avi_point_cloud_len(back), occupied);

        avi_point_cloud_free(back);
        avi_voxel_grid_free(grid);
        avi_point_cloud_free(cloud);
    }
}

#[test]
fn quantization_round_trips_within_half_a_bin() {
    unsafe {
        let mut cfg = ptr::null_mut();
        assert_eq!(avi_quant_config_default(&mut cfg), AviStatus::Ok);

        let p = [0.40625, 0.5, 0.25];
        let cloud = cloud_of(&[p]);
        let mut bins = [0u16; 4];
        assert_eq!(avi_quantize_location(cloud, cfg, bins.as_mut_ptr()), AviStatus::Ok);
        assert!(bins.iter().all(|&b| (1..=256).contains(&b)));

        let mut center = [0.0f64; 3];
        let mut scale = 0.0f64;
        assert_eq!(
            avi_dequantize_location(bins.as_ptr(), cfg, center.as_mut_ptr(), &mut scale),
            AviStatus::Ok
        );
        for a in 0..3 {
            assert!((center[a] - p[a]).abs() <= 0.5 / 256.0 + 1e-12);
        }
        assert!(scale > 0.0);

        let mut r = 0u32;
        assert_eq!(avi_effective_resolution(cfg, 64, 1.0, &mut r), AviStatus::Ok);
        assert_eq!(r, 256);
        assert_eq!(avi_effective_resolution(cfg, 64, 0.0, &mut r), AviStatus::InvalidArgument);

        avi_point_cloud_free(cloud);
        avi_quant_config_free(cfg);
    }
}

#[test]
fn location_extension_is_eight_ninety_six() {
    assert_eq!(avi_location_extension(), 896);
}

#[test]
fn icp_recovers_a_pure_shift() {
    // Low-discrepancy scatter: irregular in every axis so the shifted copy
    // has a unique alignment.
    let points: Vec<[f64; 3]> = (1..=50)
        .map(|i| {
            let t = i as f64;
            [
                0.3 + (t * 0.6180339887).fract() * 0.2,
                0.4 + (t * 0.4142135624).fract() * 0.15,
                0.1 + (t * 0.7548776662).fract() * 0.1,
            ]
        })
        .collect();
    // Shift by less than half the nearest-neighbor spacing (~0.019) so the
    // first correspondence set is already the true pairing.
    let shifted: Vec<[f64; 3]> = points.iter().map(|p| [p[0] + 0.008, p[1], p[2]]).collect();
    let source = cloud_of(&points);
    let target = cloud_of(&shifted);
    unsafe {
        let mut res = ptr::null_mut();
        assert_eq!(avi_icp_align(source, target, &mut res), AviStatus::Ok);
        assert!(avi_icp_result_converged(res));
        assert!(avi_icp_result_iterations(res) >= 1);
        assert!(avi_icp_result_rmse(res) <= 1e-9);

        let mut rot = [0.0f64; 9];
        assert_eq!(avi_icp_result_rotation(res, rot.as_mut_ptr()), AviStatus::Ok);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((rot[3 * i + j] - expect).abs() <= 1e-6);
            }
        }
        let mut t = [0.0f64; 3];
        assert_eq!(avi_icp_result_translation(res, t.as_mut_ptr()), AviStatus::Ok);
        assert!((t[0] - 0.008).abs() <= 1e-6 && t[1].abs() <= 1e-6 && t[2].abs() <= 1e-6);

        let probe = [0.5f64, 0.5, 0.5];
        let mut moved = [0.0f64; 3];
        assert_eq!(avi_icp_result_apply(res, probe.as_ptr(), moved.as_mut_ptr()), AviStatus::Ok);
        assert!((moved[0] - 0.508).abs() <= 1e-6);

        avi_icp_result_free(res);
        avi_point_cloud_free(source);
        avi_point_cloud_free(target);
    }
}

#[test]
fn generated_header_covers_the_surface() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/avi.h"))
        .expect("build.rs generates include/avi.h");
    for symbol in [
        "typedef struct AviPointCloud AviPointCloud;",
        "typedef struct AviVoxelGrid AviVoxelGrid;",
        "typedef struct AviQuantConfig AviQuantConfig;",
        "typedef struct AviIcpResult AviIcpResult;",
        "AVI_STATUS_OK",
        "avi_last_error",
        "avi_point_cloud_new",
        "avi_voxelize",
        "avi_devoxelize",
        "avi_quantize_location",
        "avi_effective_resolution",
        "avi_icp_align",
        "avi_icp_result_apply",
    ] {
        assert!(header.contains(symbol), "header is missing {symbol}");
    }
}
