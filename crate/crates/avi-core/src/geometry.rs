//! Point clouds, boxes, rigid transforms, poses, and binary voxel grids.
//!
//! Everything here is a pure value type; all operations are safe to call from
//! any number of threads. Units are meters throughout.

use crate::error::{Error, Result};

pub type Point3 = nalgebra::Point3<f64>;
pub type Vector3 = nalgebra::Vector3<f64>;
pub type Matrix3 = nalgebra::Matrix3<f64>;
pub type UnitQuaternion = nalgebra::UnitQuaternion<f64>;

/// Tolerance for SO(3) membership checks (orthogonality and determinant).
pub const ROTATION_TOL: f64 = 1e-9;

/// Voxel resolutions supported by [`VoxelGrid`] and the AVIV file format.
pub const MIN_RESOLUTION: u32 = 2;
pub const MAX_RESOLUTION: u32 = 1024;

/// An unordered set of 3D points sampled from scene surfaces.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Self {
        PointCloud { points }
    }

    /// Builds a cloud from `[x, y, z]` rows.
    pub fn from_rows(rows: &[[f64; 3]]) -> Self {
        PointCloud { points: rows.iter().map(|r| Point3::new(r[0], r[1], r[2])).collect() }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Arithmetic mean of the points. Errors on an empty cloud.
    pub fn centroid(&self) -> Result<Point3> {
        if self.points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let sum = self
            .points
            .iter()
            .fold(Vector3::zeros(), |acc, p| acc + p.coords);
        Ok(Point3::from(sum / self.points.len() as f64))
    }
}

/// Axis-aligned bounding box; `min ≤ max` componentwise by construction.
///
/// A box may be degenerate (zero extent on some axis) — e.g. the bounding box
/// of a single point. Operations that need volume ([`voxelize`],
/// [`devoxelize`]) reject degenerate boxes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    min: Point3,
    max: Point3,
}

impl Aabb {
    pub fn new(min: Point3, max: Point3) -> Result<Self> {
        if (0..3).any(|a| !(min[a] <= max[a])) {
            return Err(Error::InvalidBox { min: min.coords.into(), max: max.coords.into() });
        }
        Ok(Aabb { min, max })
    }

    /// Axis-aligned cube with the given center and edge length.
    pub fn cube(center: Point3, edge: f64) -> Result<Self> {
        let h = Vector3::repeat(edge / 2.0);
        Aabb::new(center - h, center + h)
    }

    pub fn min(&self) -> Point3 {
        self.min
    }

    pub fn max(&self) -> Point3 {
        self.max
    }

    pub fn center(&self) -> Point3 {
        Point3::from((self.min.coords + self.max.coords) / 2.0)
    }

    pub fn extent(&self) -> Vector3 {
        self.max - self.min
    }

    pub fn largest_edge(&self) -> f64 {
        let e = self.extent();
        e.x.max(e.y).max(e.z)
    }

    /// Closed-box membership test; `NaN` coordinates are never contained.
    pub fn contains(&self, p: &Point3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    /// True when the extent is strictly positive on every axis.
    pub fn has_volume(&self) -> bool {
        (0..3).all(|a| self.max[a] > self.min[a])
    }

    /// True when `other` and `self` share interior volume.
    pub fn intersects(&self, other: &Aabb) -> bool {
        (0..3).all(|a| self.min[a] < other.max[a] && other.min[a] < self.max[a])
    }

    fn require_volume(&self) -> Result<()> {
        if self.has_volume() {
            Ok(())
        } else {
            Err(Error::DegenerateBox { extent: self.extent().into() })
        }
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
struct AabbRaw {
    min: [f64; 3],
    max: [f64; 3],
}

impl serde::Serialize for Aabb {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        AabbRaw { min: self.min.coords.into(), max: self.max.coords.into() }.serialize(s)
    }
}

impl<'de> serde::Deserialize<'de> for Aabb {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = AabbRaw::deserialize(d)?;
        Aabb::new(raw.min.into(), raw.max.into()).map_err(serde::de::Error::custom)
    }
}

/// Componentwise min/max box of a non-empty cloud (closed hull).
pub fn bounding_box(cloud: &PointCloud) -> Result<Aabb> {
    let first = cloud.points.first().ok_or(Error::EmptyCloud)?;
    let (mut lo, mut hi) = (*first, *first);
    for p in &cloud.points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    Aabb::new(lo, hi)
}

/// Proper rigid motion: rotation in SO(3) plus translation.
///
/// The rotation is validated at construction (orthonormal within
/// [`ROTATION_TOL`], determinant +1), so applying a transform can never
/// smuggle in a reflection or shear.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3,
    translation: Vector3,
}

impl RigidTransform {
    pub fn new(rotation: Matrix3, translation: Vector3) -> Result<Self> {
        let gram = rotation.transpose() * rotation;
        let mut ortho: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                ortho = ortho.max((gram[(i, j)] - target).abs());
            }
        }
        let det = rotation.determinant();
        if ortho > ROTATION_TOL || (det - 1.0).abs() > ROTATION_TOL {
            return Err(Error::NotARotation { ortho, det });
        }
        Ok(RigidTransform { rotation, translation })
    }

    pub fn identity() -> Self {
        RigidTransform { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn from_translation(translation: Vector3) -> Self {
        RigidTransform { rotation: Matrix3::identity(), translation }
    }

    pub fn rotation(&self) -> &Matrix3 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3 {
        &self.translation
    }

    pub fn apply_point(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation * p.coords + self.translation)
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
struct RigidTransformRaw {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl serde::Serialize for RigidTransform {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let r = &self.rotation;
        let row = |i: usize| [r[(i, 0)], r[(i, 1)], r[(i, 2)]];
        RigidTransformRaw {
            rotation: [row(0), row(1), row(2)],
            translation: self.translation.into(),
        }
        .serialize(s)
    }
}

impl<'de> serde::Deserialize<'de> for RigidTransform {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = RigidTransformRaw::deserialize(d)?;
        let m = Matrix3::from_fn(|i, j| raw.rotation[i][j]);
        RigidTransform::new(m, raw.translation.into()).map_err(serde::de::Error::custom)
    }
}

/// Maps every point through `R·p + t`. Pairwise distances are preserved
/// within 1e-9 (isometry).
pub fn apply_transform(cloud: &PointCloud, xf: &RigidTransform) -> PointCloud {
    PointCloud { points: cloud.points.iter().map(|p| xf.apply_point(p)).collect() }
}

/// `compose(a, b)` applies `b` first, then `a`.
pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    RigidTransform {
        rotation: a.rotation * b.rotation,
        translation: a.rotation * b.translation + a.translation,
    }
}

/// Two-sided inverse: `compose(invert(a), a)` is the identity within 1e-9.
pub fn invert(a: &RigidTransform) -> RigidTransform {
    let rotation = a.rotation.transpose();
    RigidTransform { rotation, translation: -(rotation * a.translation) }
}

/// A 6-DoF frame: position plus unit quaternion orientation (w, x, y, z).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Point3,
    pub orientation: UnitQuaternion,
}

impl Pose {
    pub fn new(position: Point3, orientation: UnitQuaternion) -> Self {
        Pose { position, orientation }
    }

    pub fn identity() -> Self {
        Pose { position: Point3::origin(), orientation: UnitQuaternion::identity() }
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
struct PoseRaw {
    position: [f64; 3],
    orientation_wxyz: [f64; 4],
}

impl serde::Serialize for Pose {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let q = self.orientation.quaternion();
        PoseRaw {
            position: self.position.coords.into(),
            orientation_wxyz: [q.w, q.i, q.j, q.k],
        }
        .serialize(s)
    }
}

impl<'de> serde::Deserialize<'de> for Pose {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = PoseRaw::deserialize(d)?;
        let [w, x, y, z] = raw.orientation_wxyz;
        let q = nalgebra::Quaternion::new(w, x, y, z);
        if q.norm() < 1e-9 {
            return Err(serde::de::Error::custom("orientation quaternion is near zero"));
        }
        Ok(Pose {
            position: raw.position.into(),
            orientation: UnitQuaternion::from_quaternion(q),
        })
    }
}

/// Moves a pose by a rigid transform: `position' = R·p + t`,
/// `orientation' = quat(R) ⊗ q`, renormalized.
pub fn apply_to_pose(xf: &RigidTransform, pose: &Pose) -> Pose {
    let rot = nalgebra::Rotation3::from_matrix_unchecked(*xf.rotation());
    let q = UnitQuaternion::from_rotation_matrix(&rot);
    let mut orientation = q * pose.orientation;
    orientation.renormalize();
    Pose { position: xf.apply_point(&pose.position), orientation }
}

/// Binary occupancy over a `V³` lattice, index order x-major then y then z:
/// voxel `(x, y, z)` has linear index `(x·V + y)·V + z`.
///
/// Bits are packed LSB-first into bytes in linear-index order, which is also
/// the AVIV on-disk payload layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoxelGrid {
    resolution: u32,
    bits: Vec<u8>,
}

impl VoxelGrid {
    /// All-empty grid. Resolution must lie in `2..=1024`.
    pub fn empty(resolution: u32) -> Result<Self> {
        if !(MIN_RESOLUTION..=MAX_RESOLUTION).contains(&resolution) {
            return Err(Error::BadResolution(resolution));
        }
        let n = (resolution as usize).pow(3);
        Ok(VoxelGrid { resolution, bits: vec![0u8; n.div_ceil(8)] })
    }

    /// Rebuilds a grid from its packed payload; trailing pad bits must be zero.
    pub fn from_bytes(resolution: u32, bits: Vec<u8>) -> Result<Self> {
        if !(MIN_RESOLUTION..=MAX_RESOLUTION).contains(&resolution) {
            return Err(Error::BadResolution(resolution));
        }
        let n = (resolution as usize).pow(3);
        if bits.len() != n.div_ceil(8) {
            return Err(Error::Format {
                format: "voxel grid",
                message: format!("payload is {} bytes, expected {}", bits.len(), n.div_ceil(8)),
            });
        }
        let pad_bits = bits.len() * 8 - n;
        if pad_bits > 0 && bits[bits.len() - 1] >> (8 - pad_bits) != 0 {
            return Err(Error::format("voxel grid", "nonzero padding bits"));
        }
        Ok(VoxelGrid { resolution, bits })
    }

    pub fn resolution(&self) -> u32 {
        self.resolution
    }

    pub fn voxel_count(&self) -> usize {
        (self.resolution as usize).pow(3)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    pub fn linear_index(&self, x: u32, y: u32, z: u32) -> usize {
        debug_assert!(x < self.resolution && y < self.resolution && z < self.resolution);
        ((x as usize * self.resolution as usize) + y as usize) * self.resolution as usize
            + z as usize
    }

    #[inline]
    pub fn get_linear(&self, i: usize) -> bool {
        self.bits[i / 8] >> (i % 8) & 1 == 1
    }

    #[inline]
    pub fn set_linear(&mut self, i: usize, occupied: bool) {
        let mask = 1u8 << (i % 8);
        if occupied {
            self.bits[i / 8] |= mask;
        } else {
            self.bits[i / 8] &= !mask;
        }
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32, z: u32) -> bool {
        self.get_linear(self.linear_index(x, y, z))
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, z: u32, occupied: bool) {
        self.set_linear(self.linear_index(x, y, z), occupied)
    }

    pub fn occupied_count(&self) -> usize {
        self.bits.iter().map(|b| b.count_ones() as usize).sum()
    }

    /// Intersection-over-union against another grid of the same resolution.
    /// Two all-empty grids have IoU 1.
    pub fn iou(&self, other: &VoxelGrid) -> Result<f64> {
        if self.resolution != other.resolution {
            return Err(Error::GridResolutionMismatch {
                actual: other.resolution,
                expected: self.resolution,
            });
        }
        let (mut inter, mut union) = (0usize, 0usize);
        for (a, b) in self.bits.iter().zip(&other.bits) {
            inter += (a & b).count_ones() as usize;
            union += (a | b).count_ones() as usize;
        }
        Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
    }
}

/// Bins points of `cloud` into a `resolution³` occupancy grid over `bbox`.
///
/// Voxel `(i,j,k)` is occupied iff at least one point falls in the half-open
/// cell `[min + i·w, min + (i+1)·w)` per axis (`w = extent/resolution`);
/// points exactly on a max face clamp into the last cell. Points outside the
/// closed box are ignored, so an empty cloud yields an all-zero grid.
pub fn voxelize(cloud: &PointCloud, bbox: &Aabb, resolution: u32) -> Result<VoxelGrid> {
    bbox.require_volume()?;
    let mut grid = VoxelGrid::empty(resolution)?;
    let (min, max, extent) = (bbox.min(), bbox.max(), bbox.extent());
    let res = resolution as f64;
    for p in &cloud.points {
        if !(0..3).all(|a| p[a] >= min[a] && p[a] <= max[a]) {
            continue;
        }
        let mut idx = [0u32; 3];
        for a in 0..3 {
            let t = ((p[a] - min[a]) / extent[a] * res).floor() as i64;
            idx[a] = t.clamp(0, resolution as i64 - 1) as u32;
        }
        grid.set(idx[0], idx[1], idx[2], true);
    }
    Ok(grid)
}

/// One point per occupied voxel, at the voxel's cell center, in ascending
/// linear-index order.
pub fn devoxelize(grid: &VoxelGrid, bbox: &Aabb) -> Result<PointCloud> {
    bbox.require_volume()?;
    let (min, extent) = (bbox.min(), bbox.extent());
    let res = grid.resolution();
    let w = extent / res as f64;
    let mut points = Vec::with_capacity(grid.occupied_count());
    for x in 0..res {
        for y in 0..res {
            for z in 0..res {
                if grid.get(x, y, z) {
                    points.push(Point3::new(
                        min[0] + (x as f64 + 0.5) * w[0],
                        min[1] + (y as f64 + 0.5) * w[1],
                        min[2] + (z as f64 + 0.5) * w[2],
                    ));
                }
            }
        }
    }
    Ok(PointCloud { points })
}
