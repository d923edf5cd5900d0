//! Rigid-transform recovery: closed-form Kabsch on paired points and
//! iterative closest point on unpaired clouds.
//!
//! Conventions: every recovered transform maps the *source* frame into the
//! *target* frame. Usage errors (mismatched inputs, bad configs) are `Err`;
//! data-dependent alignment failures (too few or degenerate
//! correspondences) come back as an `IcpResult` with `converged == false`
//! and a populated `failure`, so callers can record them without
//! unwinding a whole rollout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    apply_transform, compose, Matrix3, PointCloud, RigidTransform, Vector3, VoxelGrid,
};
use crate::kdtree::KdTree;
use crate::locquant::{compose_scene, dequantize_location, LocationDescriptor, QuantConfig};
use crate::segmentation::ObjectSegment;

/// Singular-value ratio below which the cross-covariance is treated as
/// rank-deficient (collinear or coincident points).
const RANK_TOL: f64 = 1e-9;

/// Iteration controls for [`icp_align`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "IcpConfigRaw", into = "IcpConfigRaw")]
pub struct IcpConfig {
    max_iterations: u32,
    convergence_tol: f64,
    max_correspondence_distance: f64,
    min_points: usize,
}

/// On-disk form; `max_correspondence_distance` is omitted (null) when
/// unbounded, since JSON has no infinity literal.
#[derive(Serialize, Deserialize)]
struct IcpConfigRaw {
    #[serde(default = "default_max_iterations")]
    max_iterations: u32,
    #[serde(default = "default_convergence_tol")]
    convergence_tol: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    max_correspondence_distance: Option<f64>,
    #[serde(default = "default_min_points")]
    min_points: usize,
}

fn default_max_iterations() -> u32 {
    50
}

fn default_convergence_tol() -> f64 {
    1e-8
}

fn default_min_points() -> usize {
    3
}

impl TryFrom<IcpConfigRaw> for IcpConfig {
    type Error = Error;
    fn try_from(r: IcpConfigRaw) -> Result<Self> {
        IcpConfig::new(
            r.max_iterations,
            r.convergence_tol,
            r.max_correspondence_distance.unwrap_or(f64::INFINITY),
            r.min_points,
        )
    }
}

impl From<IcpConfig> for IcpConfigRaw {
    fn from(c: IcpConfig) -> Self {
        IcpConfigRaw {
            max_iterations: c.max_iterations,
            convergence_tol: c.convergence_tol,
            max_correspondence_distance: c.max_correspondence_distance.is_finite().then_some(c.max_correspondence_distance),
            min_points: c.min_points,
        }
    }
}

impl Default for IcpConfig {
    fn default() -> Self {
        IcpConfig {
            max_iterations: default_max_iterations(),
            convergence_tol: default_convergence_tol(),
            max_correspondence_distance: f64::INFINITY,
            min_points: default_min_points(),
        }
    }
}

impl IcpConfig {
    pub fn new(
        max_iterations: u32,
        convergence_tol: f64,
        max_correspondence_distance: f64,
        min_points: usize,
    ) -> Result<Self> {
        if max_iterations == 0 {
            return Err(Error::BadIcpConfig("max_iterations must be at least 1".into()));
        }
        if !(convergence_tol > 0.0 && convergence_tol.is_finite()) {
            return Err(Error::BadIcpConfig(format!(
                "convergence_tol {convergence_tol} must be positive and finite"
            )));
        }
        if !(max_correspondence_distance > 0.0) {
            return Err(Error::BadIcpConfig(format!(
                "max_correspondence_distance {max_correspondence_distance} must be positive"
            )));
        }
        if min_points < 3 {
            return Err(Error::BadIcpConfig(format!(
                "min_points {min_points} must be at least 3 (rigid solve needs 3 points)"
            )));
        }
        Ok(IcpConfig { max_iterations, convergence_tol, max_correspondence_distance, min_points })
    }

    pub fn max_iterations(&self) -> u32 {
        self.max_iterations
    }

    pub fn convergence_tol(&self) -> f64 {
        self.convergence_tol
    }

    pub fn max_correspondence_distance(&self) -> f64 {
        self.max_correspondence_distance
    }

    pub fn min_points(&self) -> usize {
        self.min_points
    }
}

/// Least-squares rigid transform between paired clouds (Kabsch).
///
/// Minimizes `Σ‖R·xᵢ + t − yᵢ‖²` over proper rotations: with centered
/// cross-covariance `H = Σ(xᵢ−x̄)(yᵢ−ȳ)ᵀ` and SVD `H = UΣVᵀ`, the optimum
/// is `R = V·diag(1,1,det(VUᵀ))·Uᵀ`, `t = ȳ − R·x̄`. The determinant
/// correction guarantees a rotation (never a reflection), including on
/// planar clouds. Collinear or coincident inputs have no unique solution
/// and error out with the singular values as the diagnostic.
pub fn kabsch(source: &PointCloud, target: &PointCloud) -> Result<RigidTransform> {
    if source.len() != target.len() {
        return Err(Error::SizeMismatch { source_len: source.len(), target_len: target.len() });
    }
    if source.len() < 3 {
        return Err(Error::TooFewPoints { needed: 3, got: source.len() });
    }
    let sc = source.centroid()?;
    let tc = target.centroid()?;
    let mut h = Matrix3::zeros();
    for (x, y) in source.points.iter().zip(&target.points) {
        h += (x - sc) * (y - tc).transpose();
    }
    let svd = h.svd(true, true);
    let sv = svd.singular_values;
    if !(sv[1] > RANK_TOL * sv[0]) {
        return Err(Error::DegenerateGeometry { sv: [sv[0], sv[1], sv[2]] });
    }
    let u = svd.u.expect("svd requested u");
    let v = svd.v_t.expect("svd requested v_t").transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    RigidTransform::new(r, tc - r * sc)
}

/// One matched pair: `distance = ‖source[source_index] − target[target_index]‖`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub source_index: usize,
    pub target_index: usize,
    pub distance: f64,
}

/// Exact nearest neighbor in `target` for every source point, in source
/// order, keeping pairs with `distance <= max_distance`. Ties go to the
/// lowest target index; either cloud being empty yields no pairs.
pub fn nearest_correspondences(
    source: &PointCloud,
    target: &PointCloud,
    max_distance: f64,
) -> Vec<Correspondence> {
    if source.is_empty() || target.is_empty() {
        return Vec::new();
    }
    let tree = KdTree::build(&target.points);
    let mut pairs = Vec::with_capacity(source.len());
    for (i, p) in source.points.iter().enumerate() {
        let (j, d2) = tree.nearest(p).expect("non-empty tree");
        let distance = d2.sqrt();
        if distance <= max_distance {
            pairs.push(Correspondence { source_index: i, target_index: j, distance });
        }
    }
    pairs
}

/// Why an [`icp_align`] run stopped without a usable estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IcpFailure {
    /// Fewer than `min_points` pairs survived the distance gate.
    InsufficientCorrespondences { iteration: u32, found: usize, required: usize },
    /// The surviving pairs were collinear or coincident.
    DegenerateCorrespondences { iteration: u32 },
}

/// Outcome of an alignment. `transform` maps source frame to target frame;
/// `rmse` is the root-mean-square pair residual after the final solve
/// (infinite when no solve ever ran, serialized as null).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IcpResult {
    #[serde(flatten)]
    pub transform: RigidTransform,
    pub rmse: f64,
    pub iterations: u32,
    pub converged: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rmse_history: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<IcpFailure>,
}

impl IcpResult {
    fn failed(
        failure: IcpFailure,
        transform: RigidTransform,
        iterations: u32,
        rmse_history: Vec<f64>,
    ) -> Self {
        IcpResult {
            transform,
            rmse: rmse_history.last().copied().unwrap_or(f64::INFINITY),
            iterations,
            converged: false,
            rmse_history,
            failure: Some(failure),
        }
    }
}

/// Iterative closest point: from `init`, alternate nearest-neighbor
/// matching and Kabsch refinement until the RMSE change drops below
/// `convergence_tol` or `max_iterations` solves have run.
///
/// With an unbounded correspondence distance the RMSE sequence is
/// non-increasing: each re-matching can only shorten per-point distances,
/// and each solve is optimal for its matching.
pub fn icp_align(
    source: &PointCloud,
    target: &PointCloud,
    cfg: &IcpConfig,
    init: &RigidTransform,
) -> Result<IcpResult> {
    for len in [source.len(), target.len()] {
        if len < cfg.min_points {
            return Err(Error::TooFewPoints { needed: cfg.min_points, got: len });
        }
    }
    let mut estimate = *init;
    let mut prev_rmse = f64::INFINITY;
    let mut history: Vec<f64> = Vec::new();
    for iteration in 0..cfg.max_iterations {
        let current = apply_transform(source, &estimate);
        let pairs =
            nearest_correspondences(&current, target, cfg.max_correspondence_distance);
        if pairs.len() < cfg.min_points {
            return Ok(IcpResult::failed(
                IcpFailure::InsufficientCorrespondences {
                    iteration,
                    found: pairs.len(),
                    required: cfg.min_points,
                },
                estimate,
                iteration,
                history,
            ));
        }
        let matched_src = PointCloud::new(
            pairs.iter().map(|c| current.points[c.source_index]).collect(),
        );
        let matched_tgt =
            PointCloud::new(pairs.iter().map(|c| target.points[c.target_index]).collect());
        let delta = match kabsch(&matched_src, &matched_tgt) {
            Ok(t) => t,
            Err(Error::DegenerateGeometry { .. }) => {
                return Ok(IcpResult::failed(
                    IcpFailure::DegenerateCorrespondences { iteration },
                    estimate,
                    iteration,
                    history,
                ));
            }
            Err(e) => return Err(e),
        };
        estimate = compose(&delta, &estimate);
        let sse: f64 = matched_src
            .points
            .iter()
            .zip(&matched_tgt.points)
            .map(|(p, q)| (delta.apply_point(p) - q).norm_squared())
            .sum();
        let rmse = (sse / pairs.len() as f64).sqrt();
        history.push(rmse);
        if (prev_rmse - rmse).abs() < cfg.convergence_tol {
            return Ok(IcpResult {
                transform: estimate,
                rmse,
                iterations: iteration + 1,
                converged: true,
                rmse_history: history,
                failure: None,
            });
        }
        prev_rmse = rmse;
    }
    Ok(IcpResult {
        transform: estimate,
        rmse: prev_rmse,
        iterations: cfg.max_iterations,
        converged: false,
        rmse_history: history,
        failure: None,
    })
}

/// Rigid motion implied by a predicted (grid, location) pair for one
/// object: decodes the prediction into a world-frame cloud, seeds ICP with
/// the decoded-centroid difference, and aligns the object's current cloud
/// to the decoded one.
///
/// Representations that decode to fewer than `min_points` points (an empty
/// predicted grid, a nearly empty segment) are alignment failures, not
/// errors, mirroring [`icp_align`]'s failure contract.
pub fn object_delta(
    before: &ObjectSegment,
    predicted: (&VoxelGrid, &LocationDescriptor),
    quant: &QuantConfig,
    icp: &IcpConfig,
) -> Result<IcpResult> {
    let (grid, loc) = predicted;
    let composed = compose_scene(&[(grid, loc)], quant)?;
    let (predicted_centroid, _) = dequantize_location(loc, quant)?;
    let (before_centroid, _) = dequantize_location(&before.descriptor, quant)?;
    let init = RigidTransform::from_translation(predicted_centroid - before_centroid);
    for cloud in [&before.cloud, &composed.cloud] {
        if cloud.len() < icp.min_points {
            return Ok(IcpResult::failed(
                IcpFailure::InsufficientCorrespondences {
                    iteration: 0,
                    found: cloud.len(),
                    required: icp.min_points,
                },
                init,
                0,
                Vec::new(),
            ));
        }
    }
    icp_align(&before.cloud, &composed.cloud, icp, &init)
}
