//! Depth + mask lifting: pinhole unprojection and per-object scene
//! decomposition.
//!
//! Masks are inputs, not computed — segmentation is treated as an upstream
//! black box. Each pixel carries at most one label, so the resulting object
//! clouds are disjoint by construction. Points are emitted in pixel
//! row-major order, making every operation deterministic.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud, Pose, UnitQuaternion, Vector3};
use crate::io::{DepthImage, MaskImage};
use crate::locquant::{quantize_location, LocationDescriptor, QuantConfig};

/// Pinhole intrinsics; image dimensions are part of the contract so inputs
/// can be validated against them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "IntrinsicsRaw", into = "IntrinsicsRaw")]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

#[derive(Serialize, Deserialize)]
struct IntrinsicsRaw {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
}

impl TryFrom<IntrinsicsRaw> for CameraIntrinsics {
    type Error = Error;
    fn try_from(r: IntrinsicsRaw) -> Result<Self> {
        CameraIntrinsics::new(r.fx, r.fy, r.cx, r.cy, r.width, r.height)
    }
}

impl From<CameraIntrinsics> for IntrinsicsRaw {
    fn from(c: CameraIntrinsics) -> Self {
        IntrinsicsRaw { fx: c.fx, fy: c.fy, cx: c.cx, cy: c.cy, width: c.width, height: c.height }
    }
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        if !(fx.is_finite() && fy.is_finite() && fx > 0.0 && fy > 0.0) {
            return Err(Error::BadIntrinsics(format!("focal lengths ({fx}, {fy}) must be > 0")));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(Error::BadIntrinsics(format!("principal point ({cx}, {cy}) not finite")));
        }
        if width == 0 || height == 0 {
            return Err(Error::BadIntrinsics(format!("image size {width}x{height} is empty")));
        }
        Ok(CameraIntrinsics { fx, fy, cx, cy, width, height })
    }

    fn check_depth(&self, depth: &DepthImage) -> Result<()> {
        if depth.width() != self.width || depth.height() != self.height {
            return Err(Error::DimensionMismatch {
                context: "depth image vs camera intrinsics",
                expected_w: self.width,
                expected_h: self.height,
                actual_w: depth.width(),
                actual_h: depth.height(),
            });
        }
        Ok(())
    }
}

/// Intrinsics plus a camera-to-world pose, stored on disk as one flat JSON
/// object: `{fx, fy, cx, cy, width, height, position, orientation_wxyz}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraRaw", into = "CameraRaw")]
pub struct Camera {
    pub intrinsics: CameraIntrinsics,
    pub pose: Pose,
}

#[derive(Serialize, Deserialize)]
struct CameraRaw {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
    position: [f64; 3],
    orientation_wxyz: [f64; 4],
}

impl TryFrom<CameraRaw> for Camera {
    type Error = Error;
    fn try_from(r: CameraRaw) -> Result<Self> {
        let intrinsics = CameraIntrinsics::new(r.fx, r.fy, r.cx, r.cy, r.width, r.height)?;
        let [w, x, y, z] = r.orientation_wxyz;
        let q = nalgebra::Quaternion::new(w, x, y, z);
        if !q.norm().is_finite() || q.norm() < 1e-9 {
            return Err(Error::BadIntrinsics("orientation quaternion is near zero".into()));
        }
        Ok(Camera {
            intrinsics,
            pose: Pose::new(r.position.into(), UnitQuaternion::from_quaternion(q)),
        })
    }
}

impl From<Camera> for CameraRaw {
    fn from(c: Camera) -> Self {
        let q = c.pose.orientation.quaternion();
        CameraRaw {
            fx: c.intrinsics.fx,
            fy: c.intrinsics.fy,
            cx: c.intrinsics.cx,
            cy: c.intrinsics.cy,
            width: c.intrinsics.width,
            height: c.intrinsics.height,
            position: c.pose.position.coords.into(),
            orientation_wxyz: [q.w, q.i, q.j, q.k],
        }
    }
}

/// One segmented object: its id, world-frame point cloud, and quantized
/// location descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectSegment {
    pub id: u16,
    pub cloud: PointCloud,
    pub descriptor: LocationDescriptor,
}

/// All surviving object segments plus lifting diagnostics.
#[derive(Debug, Clone)]
pub struct SceneDecomposition {
    /// Segments in ascending id order; every cloud is non-empty and inside
    /// the workspace.
    pub segments: Vec<ObjectSegment>,
    /// Labels present in the mask whose pixels all failed lifting (invalid
    /// depth or outside the workspace).
    pub dropped_labels: Vec<u16>,
    /// Labeled valid-depth points discarded for lying outside the workspace.
    pub discarded_points: usize,
}

impl SceneDecomposition {
    pub fn segment(&self, id: u16) -> Option<&ObjectSegment> {
        self.segments.iter().find(|s| s.id == id)
    }
}

/// Lifts every valid pixel `(u, v)` with depth `d > 0` to the camera-frame
/// point `(d·(u−cx)/fx, d·(v−cy)/fy, d)`, then through `camera_pose` into
/// the world frame. Points come out in pixel row-major order.
pub fn unproject(
    depth: &DepthImage,
    intrinsics: &CameraIntrinsics,
    camera_pose: &Pose,
) -> Result<PointCloud> {
    intrinsics.check_depth(depth)?;
    let mut points = Vec::new();
    for v in 0..depth.height() {
        for u in 0..depth.width() {
            if let Some(p) = lift_pixel(depth, intrinsics, camera_pose, u, v) {
                points.push(p);
            }
        }
    }
    Ok(PointCloud { points })
}

fn lift_pixel(
    depth: &DepthImage,
    intr: &CameraIntrinsics,
    pose: &Pose,
    u: u32,
    v: u32,
) -> Option<Point3> {
    let d = depth.get(u, v) as f64;
    if d <= 0.0 {
        return None;
    }
    let cam = Vector3::new(
        d * (u as f64 - intr.cx) / intr.fx,
        d * (v as f64 - intr.cy) / intr.fy,
        d,
    );
    Some(pose.position + pose.orientation * cam)
}

/// Projects a world point to integer pixel coordinates and camera depth;
/// `None` when the point is behind the camera or off the image. Exact
/// inverse of [`unproject`]'s ray construction up to pixel rounding.
pub fn project_to_pixel(
    point: &Point3,
    intrinsics: &CameraIntrinsics,
    camera_pose: &Pose,
) -> Option<(u32, u32, f64)> {
    let cam = camera_pose.orientation.inverse() * (point - camera_pose.position);
    if cam.z <= 0.0 {
        return None;
    }
    let u = (intrinsics.fx * cam.x / cam.z + intrinsics.cx).round();
    let v = (intrinsics.fy * cam.y / cam.z + intrinsics.cy).round();
    if u < 0.0 || v < 0.0 || u >= intrinsics.width as f64 || v >= intrinsics.height as f64 {
        return None;
    }
    Some((u as u32, v as u32, cam.z))
}

/// Partitions the lifted cloud by mask label.
///
/// Segment `k` holds exactly the unprojected points of pixels labeled `k`
/// that fall inside the (closed) workspace; labels whose points all vanish
/// are dropped and reported. Descriptors come from
/// [`quantize_location`] against `cfg` (which also supplies the workspace).
pub fn lift_masks(
    depth: &DepthImage,
    intrinsics: &CameraIntrinsics,
    camera_pose: &Pose,
    masks: &MaskImage,
    cfg: &QuantConfig,
) -> Result<SceneDecomposition> {
    intrinsics.check_depth(depth)?;
    if masks.width() != depth.width() || masks.height() != depth.height() {
        return Err(Error::DimensionMismatch {
            context: "mask image vs depth image",
            expected_w: depth.width(),
            expected_h: depth.height(),
            actual_w: masks.width(),
            actual_h: masks.height(),
        });
    }
    let mut clouds: BTreeMap<u16, Vec<Point3>> = BTreeMap::new();
    let mut discarded_points = 0usize;
    for v in 0..depth.height() {
        for u in 0..depth.width() {
            let label = masks.get(u, v);
            if label == 0 {
                continue;
            }
            let bucket = clouds.entry(label).or_default();
            if let Some(p) = lift_pixel(depth, intrinsics, camera_pose, u, v) {
                if cfg.workspace().contains(&p) {
                    bucket.push(p);
                } else {
                    discarded_points += 1;
                }
            }
        }
    }
    let mut segments = Vec::new();
    let mut dropped_labels = Vec::new();
    for (id, points) in clouds {
        if points.is_empty() {
            dropped_labels.push(id);
            continue;
        }
        let cloud = PointCloud::new(points);
        let descriptor = quantize_location(&cloud, cfg)?;
        segments.push(ObjectSegment { id, cloud, descriptor });
    }
    if segments.is_empty() {
        return Err(Error::EmptySegmentation);
    }
    Ok(SceneDecomposition { segments, dropped_labels, discarded_points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Aabb;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn plain_intrinsics(width: u32, height: u32) -> CameraIntrinsics {
        CameraIntrinsics::new(
            50.0,
            50.0,
            (width - 1) as f64 / 2.0,
            (height - 1) as f64 / 2.0,
            width,
            height,
        )
        .unwrap()
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 50.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(50.0, -1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(50.0, 50.0, f64::NAN, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(50.0, 50.0, 1.0, 1.0, 0, 4).is_err());
    }

    #[test]
    fn camera_json_round_trip() {
        let text = r#"{"fx":120.0,"fy":120.0,"cx":64.0,"cy":64.0,"width":128,"height":128,
                       "position":[0.5,0.5,2.0],"orientation_wxyz":[0.0,1.0,0.0,0.0]}"#;
        let cam: Camera = serde_json::from_str(text).unwrap();
        assert_eq!(cam.intrinsics.width, 128);
        assert_eq!(cam.pose.position, Point3::new(0.5, 0.5, 2.0));
        let back: Camera = serde_json::from_str(&serde_json::to_string(&cam).unwrap()).unwrap();
        assert_relative_eq!(back.pose.orientation.angle_to(&cam.pose.orientation), 0.0);
        assert_eq!(back.intrinsics, cam.intrinsics);
    }

    #[test]
    fn unproject_principal_point() {
        // Depth 1 at the principal point maps to (0, 0, 1) under identity pose.
        let intr = CameraIntrinsics::new(50.0, 50.0, 1.0, 1.0, 3, 3).unwrap();
        let mut depth = DepthImage::zeros(3, 3).unwrap();
        depth.set(1, 1, 1.0).unwrap();
        let cloud = unproject(&depth, &intr, &Pose::identity()).unwrap();
        assert_eq!(cloud.points, vec![Point3::new(0.0, 0.0, 1.0)]);
    }

    #[test]
    fn unproject_all_zero_depth_is_empty() {
        let intr = plain_intrinsics(8, 8);
        let depth = DepthImage::zeros(8, 8).unwrap();
        assert!(unproject(&depth, &intr, &Pose::identity()).unwrap().is_empty());
    }

    #[test]
    fn unproject_rejects_dimension_mismatch() {
        let intr = plain_intrinsics(8, 8);
        let depth = DepthImage::zeros(4, 8).unwrap();
        assert!(matches!(
            unproject(&depth, &intr, &Pose::identity()),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn unproject_plane_matches_pinhole_closed_form() {
        let intr = plain_intrinsics(8, 8);
        let d = 0.5f32;
        let depth = DepthImage::new(8, 8, vec![d; 64]).unwrap();
        let cloud = unproject(&depth, &intr, &Pose::identity()).unwrap();
        assert_eq!(cloud.len(), 64);
        // Independent per-pixel check in row-major order.
        let mut i = 0;
        for v in 0..8 {
            for u in 0..8 {
                let expect = Point3::new(
                    0.5 * (u as f64 - intr.cx) / intr.fx,
                    0.5 * (v as f64 - intr.cy) / intr.fy,
                    0.5,
                );
                assert_relative_eq!(cloud.points[i], expect, epsilon = 1e-12);
                assert_eq!(cloud.points[i].z, 0.5);
                i += 1;
            }
        }
    }

    #[test]
    fn unproject_applies_camera_pose() {
        // Camera at (0.5, 0.5, 2) looking straight down (180° about x):
        // the principal ray hits (0.5, 0.5, 2 − d).
        let intr = CameraIntrinsics::new(50.0, 50.0, 1.0, 1.0, 3, 3).unwrap();
        let pose = Pose::new(
            Point3::new(0.5, 0.5, 2.0),
            UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI),
        );
        let mut depth = DepthImage::zeros(3, 3).unwrap();
        depth.set(1, 1, 1.5).unwrap();
        let cloud = unproject(&depth, &intr, &pose).unwrap();
        assert_relative_eq!(cloud.points[0], Point3::new(0.5, 0.5, 0.5), epsilon = 1e-12);
    }

    #[test]
    fn project_unproject_round_trip() {
        let intr = plain_intrinsics(64, 64);
        let pose = Pose::new(
            Point3::new(0.5, 0.5, 2.0),
            UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let p = Point3::new(rng.gen(), rng.gen(), rng.gen());
            if let Some((u, v, d)) = project_to_pixel(&p, &intr, &pose) {
                let mut depth = DepthImage::zeros(64, 64).unwrap();
                depth.set(u, v, d as f32).unwrap();
                let back = unproject(&depth, &intr, &pose).unwrap();
                assert_eq!(back.len(), 1);
                // Within the footprint of one pixel at this depth plus
                // f32 depth rounding.
                let pixel = d * (1.0 / intr.fx).max(1.0 / intr.fy);
                assert!((back.points[0] - p).norm() <= pixel + 1e-3);
            }
        }
    }

    fn two_object_fixture() -> (DepthImage, MaskImage, CameraIntrinsics, Pose, QuantConfig) {
        // Flat plane at depth 1.5 under a downward camera; left image half
        // labeled 1, right half labeled 2.
        let intr = plain_intrinsics(8, 8);
        let pose = Pose::new(
            Point3::new(0.5, 0.5, 2.0),
            UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI),
        );
        let depth = DepthImage::new(8, 8, vec![1.5; 64]).unwrap();
        let mut masks = MaskImage::zeros(8, 8).unwrap();
        for v in 0..8 {
            for u in 0..8 {
                masks.set(u, v, if u < 4 { 1 } else { 2 });
            }
        }
        (depth, masks, intr, pose, QuantConfig::default())
    }

    #[test]
    fn lift_single_mask_equals_filtered_unproject() {
        let (depth, _, intr, pose, cfg) = two_object_fixture();
        let mut masks = MaskImage::zeros(8, 8).unwrap();
        for v in 0..8 {
            for u in 0..8 {
                masks.set(u, v, 3);
            }
        }
        let scene = lift_masks(&depth, &intr, &pose, &masks, &cfg).unwrap();
        assert_eq!(scene.segments.len(), 1);
        assert_eq!(scene.segments[0].id, 3);
        let full = unproject(&depth, &intr, &pose).unwrap();
        let filtered: Vec<Point3> = full
            .points
            .iter()
            .copied()
            .filter(|p| cfg.workspace().contains(p))
            .collect();
        assert_eq!(scene.segments[0].cloud.points, filtered);
        assert_eq!(scene.discarded_points, 64 - filtered.len());
    }

    #[test]
    fn lift_two_masks_partition_points() {
        let (depth, masks, intr, pose, cfg) = two_object_fixture();
        let scene = lift_masks(&depth, &intr, &pose, &masks, &cfg).unwrap();
        assert_eq!(scene.segments.len(), 2);
        assert_eq!((scene.segments[0].id, scene.segments[1].id), (1, 2));
        let total: usize = scene.segments.iter().map(|s| s.cloud.len()).sum();
        let lifted_inside = unproject(&depth, &intr, &pose)
            .unwrap()
            .points
            .iter()
            .filter(|p| cfg.workspace().contains(p))
            .count();
        assert_eq!(total + scene.discarded_points, 64);
        assert_eq!(total, lifted_inside);
        // Disjointness: the two clouds share no point.
        for a in &scene.segments[0].cloud.points {
            assert!(!scene.segments[1].cloud.points.contains(a));
        }
        // Workspace filter invariant.
        for s in &scene.segments {
            assert!(s.cloud.points.iter().all(|p| cfg.workspace().contains(p)));
            s.descriptor.validate(&cfg).unwrap();
        }
    }

    #[test]
    fn lift_drops_empty_labels_and_reports() {
        let (mut depth, mut masks, intr, pose, cfg) = two_object_fixture();
        // Label 2's pixels all get invalid depth.
        for v in 0..8 {
            for u in 4..8 {
                depth.set(u, v, 0.0).unwrap();
            }
        }
        masks.set(0, 0, 1); // keep label 1 intact
        let scene = lift_masks(&depth, &intr, &pose, &masks, &cfg).unwrap();
        assert_eq!(scene.segments.len(), 1);
        assert_eq!(scene.segments[0].id, 1);
        assert_eq!(scene.dropped_labels, vec![2]);
    }

    #[test]
    fn lift_all_empty_is_an_error() {
        let (_, masks, intr, pose, cfg) = two_object_fixture();
        let depth = DepthImage::zeros(8, 8).unwrap();
        assert!(matches!(
            lift_masks(&depth, &intr, &pose, &masks, &cfg),
            Err(Error::EmptySegmentation)
        ));
        // Dimension mismatch between mask and depth.
        let (depth, _, intr, pose, cfg) = two_object_fixture();
        let bad_mask = MaskImage::zeros(4, 8).unwrap();
        assert!(matches!(
            lift_masks(&depth, &intr, &pose, &bad_mask, &cfg),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn lift_workspace_filter_discards_outside_points() {
        let (depth, masks, intr, pose, _) = two_object_fixture();
        // Tiny workspace that the plane mostly misses.
        let ws = Aabb::new(Point3::new(0.4, 0.4, 0.4), Point3::new(0.6, 0.6, 0.6)).unwrap();
        let cfg = QuantConfig::new(ws, 64, 64, true).unwrap();
        let scene = lift_masks(&depth, &intr, &pose, &masks, &cfg).unwrap();
        assert!(scene.discarded_points > 0);
        for s in &scene.segments {
            assert!(s.cloud.points.iter().all(|p| ws.contains(p)));
        }
    }
}
