//! Synthetic scene simulation and rollout evaluation.
//!
//! Generates desk-scale scenes of primitive objects, renders them from a
//! fixed overhead camera, and drives the full pipeline loop — segment,
//! tokenize, predict, decode, ICP, apply to the end effector — until a
//! goal-region task succeeds or runs out of steps. Aggregates outcomes
//! into mean ± binomial-stderr summaries.
//!
//! The world is kinematic, not physical: the recovered transform is
//! applied verbatim to the gripper pose and the attached object's cloud.
//! That isolates the pipeline's own error from contact dynamics.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    apply_to_pose, apply_transform, voxelize, Aabb, Point3, PointCloud, Pose, Vector3,
};
use crate::icp::{object_delta, IcpConfig, IcpResult};
use crate::io::{tokens_to_text, DepthImage, MaskImage};
use crate::locquant::{object_cube, QuantConfig, Vocabulary};
use crate::predictor::{
    build_sequence, parse_sequence, predict_next, Instruction, PredictorContext,
    PredictorKind, SceneTokens,
};
use crate::segmentation::{lift_masks, project_to_pixel, Camera, CameraIntrinsics};
use crate::vqtok::{train_codebook, Codebook, PatchLayout};

/// Trace directory schema identifier.
pub const TRACE_SCHEMA: &str = "avi-trace/1";

/// Default number of rollouts aggregated per summary.
pub const DEFAULT_TRIALS: usize = 20;

const PLACEMENT_ATTEMPTS: u32 = 1000;
/// Minimum clearance between placed object footprints.
const PLACEMENT_GAP: f64 = 0.01;

/// One simulated object: an id (also its mask label), its point cloud in
/// world coordinates, and whether it is attached to the gripper.
#[derive(Debug, Clone)]
pub struct SceneObject {
    pub id: u16,
    pub cloud: PointCloud,
    pub attached: bool,
}

/// Simulated world state.
#[derive(Debug, Clone)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    pub gripper: Pose,
    pub workspace: Aabb,
    pub step_index: u32,
}

impl Scene {
    pub fn object(&self, id: u16) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    /// Marks `id` as the single attached object.
    pub fn attach(&mut self, id: u16) -> Result<()> {
        if self.object(id).is_none() {
            return Err(Error::BadSceneSpec(format!("no object {id} to attach")));
        }
        for o in &mut self.objects {
            o.attached = o.id == id;
        }
        Ok(())
    }

    /// Checks the scene invariants: unique nonzero ids, nonempty clouds
    /// inside the workspace, at most one attached object.
    pub fn validate(&self) -> Result<()> {
        let mut ids: Vec<u16> = self.objects.iter().map(|o| o.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.objects.len() || ids.contains(&0) {
            return Err(Error::BadSceneSpec("object ids must be unique and nonzero".into()));
        }
        if self.objects.iter().filter(|o| o.attached).count() > 1 {
            return Err(Error::BadSceneSpec("more than one attached object".into()));
        }
        for o in &self.objects {
            if o.cloud.is_empty() {
                return Err(Error::BadSceneSpec(format!("object {} has no points", o.id)));
            }
            if !o.cloud.points.iter().all(|p| self.workspace.contains(p)) {
                return Err(Error::BadSceneSpec(format!(
                    "object {} extends outside the workspace",
                    o.id
                )));
            }
        }
        Ok(())
    }
}

/// Scene-generation config.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSpec {
    pub object_count: u32,
    #[serde(default = "default_min_points")]
    pub min_points: usize,
    #[serde(default = "default_max_points")]
    pub max_points: usize,
    #[serde(default = "default_workspace")]
    pub workspace: Aabb,
}

fn default_min_points() -> usize {
    200
}

fn default_max_points() -> usize {
    2000
}

fn default_workspace() -> Aabb {
    *QuantConfig::default().workspace()
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            object_count: 1,
            min_points: default_min_points(),
            max_points: default_max_points(),
            workspace: default_workspace(),
        }
    }
}

impl SceneSpec {
    fn validate(&self) -> Result<()> {
        if !(1..=16).contains(&self.object_count) {
            return Err(Error::BadSceneSpec(format!(
                "object_count {} outside 1..=16",
                self.object_count
            )));
        }
        if self.min_points < 3 || self.min_points > self.max_points {
            return Err(Error::BadSceneSpec(format!(
                "point range {}..={} invalid",
                self.min_points, self.max_points
            )));
        }
        Ok(())
    }
}

/// A scene plus the synthetic observation it was rendered into.
#[derive(Debug, Clone)]
pub struct GeneratedScene {
    pub scene: Scene,
    pub camera: Camera,
    pub depth: DepthImage,
    pub masks: MaskImage,
}

/// Goal-region task.
#[derive(Debug, Clone)]
pub struct Task {
    pub instruction: Instruction,
    pub target_object: u16,
    pub goal_center: Point3,
    pub goal_radius: f64,
    pub max_steps: u32,
    pub success_epsilon: f64,
}

impl Task {
    pub fn new(
        instruction: Instruction,
        target_object: u16,
        goal_center: Point3,
        goal_radius: f64,
        max_steps: u32,
        success_epsilon: f64,
    ) -> Result<Self> {
        if !(goal_radius > 0.0) {
            return Err(Error::BadTask(format!("goal radius {goal_radius} must be > 0")));
        }
        if max_steps < 1 {
            return Err(Error::BadTask("max_steps must be ≥ 1".into()));
        }
        if !(success_epsilon > 0.0) {
            return Err(Error::BadTask(format!("success_epsilon {success_epsilon} must be > 0")));
        }
        Ok(Task { instruction, target_object, goal_center, goal_radius, max_steps, success_epsilon })
    }
}

/// Serializable task config; [`TaskSpec::materialize`] validates the
/// instruction phrase against a vocabulary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSpec {
    pub instruction: String,
    pub target_object: u16,
    pub goal: [f64; 3],
    #[serde(default = "default_goal_radius")]
    pub goal_radius: f64,
    #[serde(default = "default_max_steps")]
    pub max_steps: u32,
    #[serde(default = "default_success_epsilon")]
    pub success_epsilon: f64,
}

fn default_goal_radius() -> f64 {
    0.1
}

fn default_max_steps() -> u32 {
    12
}

fn default_success_epsilon() -> f64 {
    0.05
}

impl TaskSpec {
    pub fn materialize(&self, vocab: &Vocabulary) -> Result<Task> {
        let instruction = Instruction::from_phrase(0, &self.instruction, vocab)?;
        Task::new(
            instruction,
            self.target_object,
            Point3::new(self.goal[0], self.goal[1], self.goal[2]),
            self.goal_radius,
            self.max_steps,
            self.success_epsilon,
        )
    }
}

/// Why a step or rollout failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    /// Ran out of steps before reaching the goal region.
    Timeout,
    /// ICP did not produce a usable transform.
    IcpFailure,
    /// The target left the workspace (or was never lifted from the masks).
    OutOfWorkspace,
    /// The predicted sequence could not be parsed or decoded.
    MalformedPrediction,
}

impl std::fmt::Display for FailureReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FailureReason::Timeout => "timeout",
            FailureReason::IcpFailure => "icp_failure",
            FailureReason::OutOfWorkspace => "out_of_workspace",
            FailureReason::MalformedPrediction => "malformed_prediction",
        };
        f.write_str(s)
    }
}

/// Terminal state of one rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum Outcome {
    Success { steps: u32 },
    Failure { reason: FailureReason },
}

impl Outcome {
    pub fn is_success(&self) -> bool {
        matches!(self, Outcome::Success { .. })
    }
}

/// One executed step: the ICP result it committed (when it got that far),
/// the gripper pose afterwards, and optional refs into a trace directory.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step_index: u32,
    pub icp: Option<IcpResult>,
    pub gripper: Pose,
    pub target_centroid: Option<Point3>,
    pub failure: Option<FailureReason>,
    pub tokens_ref: Option<PathBuf>,
    pub snapshot_ref: Option<PathBuf>,
}

/// Full record of one rollout.
#[derive(Debug, Clone)]
pub struct RolloutTrace {
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub outcome: Outcome,
}

/// Success statistics over a batch of rollouts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutSummary {
    pub successes: usize,
    pub trials: usize,
    pub mean: f64,
    pub stderr: f64,
}

impl std::fmt::Display for RolloutSummary {
    /// Renders as `M.MM ± S.SS`.
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean, self.stderr)
    }
}

/// Mean and binomial standard error `sqrt(p̂(1−p̂)/n)` of a batch.
pub fn summarize(outcomes: &[bool]) -> Result<RolloutSummary> {
    if outcomes.is_empty() {
        return Err(Error::NoOutcomes);
    }
    let trials = outcomes.len();
    let successes = outcomes.iter().filter(|&&s| s).count();
    let mean = successes as f64 / trials as f64;
    let stderr = (mean * (1.0 - mean) / trials as f64).sqrt();
    Ok(RolloutSummary { successes, trials, mean, stderr })
}

/// Shared per-pipeline configuration for stepping a rollout.
#[derive(Debug, Clone, Copy)]
pub struct PipelineConfig<'a> {
    pub quant: &'a QuantConfig,
    pub icp: &'a IcpConfig,
    pub vocab: &'a Vocabulary,
    pub codebook: &'a Codebook,
    pub layout: &'a PatchLayout,
}

/// The fixed overhead camera for a workspace: centered above it, looking
/// straight down, with focal length chosen so pixel-rounding error stays
/// well under the object voxel size at desk scale.
pub fn fixed_camera(workspace: &Aabb) -> Camera {
    let c = workspace.center();
    let height = workspace.max().z + 1.2 * workspace.extent().z.max(1.0);
    let intrinsics = CameraIntrinsics::new(800.0, 800.0, 224.0, 224.0, 448, 448)
        .expect("static intrinsics are valid");
    // 180° about x: camera +z (viewing axis) points along world −z.
    let down = crate::geometry::UnitQuaternion::from_axis_angle(&Vector3::x_axis(), PI);
    Camera { intrinsics, pose: Pose::new(Point3::new(c.x, c.y, height), down) }
}

/// Renders the scene into a depth/mask pair by z-buffer point splatting:
/// each point paints its pixel if it is nearer than what is already there.
pub fn render_scene(scene: &Scene, camera: &Camera) -> Result<(DepthImage, MaskImage)> {
    let (w, h) = (camera.intrinsics.width, camera.intrinsics.height);
    let mut depth = DepthImage::zeros(w, h)?;
    let mut masks = MaskImage::zeros(w, h)?;
    for object in &scene.objects {
        for p in &object.cloud.points {
            if let Some((u, v, z)) = project_to_pixel(p, &camera.intrinsics, &camera.pose) {
                let cur = depth.get(u, v);
                if cur == 0.0 || (z as f32) < cur {
                    depth.set(u, v, z as f32)?;
                    masks.set(u, v, object.id);
                }
            }
        }
    }
    Ok((depth, masks))
}

/// Surface-sampled primitive, centered at the origin, with its bbox
/// half-extents.
fn sample_primitive(rng: &mut ChaCha8Rng, n: usize) -> (PointCloud, Vector3) {
    match rng.gen_range(0..3u32) {
        0 => {
            // Box: faces sampled proportionally to area.
            let half = Vector3::new(
                rng.gen_range(0.04..0.08),
                rng.gen_range(0.04..0.08),
                rng.gen_range(0.04..0.08),
            );
            let areas = [
                4.0 * half.y * half.z,
                4.0 * half.x * half.z,
                4.0 * half.x * half.y,
            ];
            let total: f64 = 2.0 * areas.iter().sum::<f64>();
            let points = (0..n)
                .map(|_| {
                    let mut pick = rng.gen_range(0.0..total);
                    let mut axis = 0;
                    for (a, &area) in areas.iter().enumerate() {
                        if pick < 2.0 * area {
                            axis = a;
                            break;
                        }
                        pick -= 2.0 * area;
                    }
                    let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                    let mut p = Vector3::new(
                        rng.gen_range(-half.x..half.x),
                        rng.gen_range(-half.y..half.y),
                        rng.gen_range(-half.z..half.z),
                    );
                    p[axis] = sign * half[axis];
                    Point3::origin() + p
                })
                .collect();
            (PointCloud::new(points), half)
        }
        1 => {
            // Sphere: uniform directions via the cylindrical-z trick.
            let r = rng.gen_range(0.05..0.08);
            let points = (0..n)
                .map(|_| {
                    let z = rng.gen_range(-1.0..1.0f64);
                    let phi = rng.gen_range(0.0..2.0 * PI);
                    let s = (1.0 - z * z).sqrt();
                    Point3::new(r * s * phi.cos(), r * s * phi.sin(), r * z)
                })
                .collect();
            (PointCloud::new(points), Vector3::new(r, r, r))
        }
        _ => {
            // Cylinder along z: lateral surface vs caps by area.
            let r = rng.gen_range(0.04..0.07);
            let hh = rng.gen_range(0.04..0.08);
            let lateral = 2.0 * PI * r * 2.0 * hh;
            let caps = 2.0 * PI * r * r;
            let points = (0..n)
                .map(|_| {
                    let theta = rng.gen_range(0.0..2.0 * PI);
                    if rng.gen_range(0.0..lateral + caps) < lateral {
                        Point3::new(r * theta.cos(), r * theta.sin(), rng.gen_range(-hh..hh))
                    } else {
                        let rr = r * rng.gen::<f64>().sqrt();
                        let z = if rng.gen::<bool>() { hh } else { -hh };
                        Point3::new(rr * theta.cos(), rr * theta.sin(), z)
                    }
                })
                .collect();
            (PointCloud::new(points), Vector3::new(r, r, hh))
        }
    }
}

/// Samples a scene of non-overlapping primitives and renders it.
///
/// Objects get ids 1..=count and rest in the lower half of the workspace
/// with disjoint xy footprints (so the overhead render sees every object
/// whole, and 3D bboxes cannot intersect). Deterministic per seed.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<GeneratedScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ws = &spec.workspace;
    let (min, ext) = (ws.min(), ws.extent());
    let mut objects: Vec<SceneObject> = Vec::with_capacity(spec.object_count as usize);
    let mut footprints: Vec<(f64, f64, f64, f64)> = Vec::new();
    for id in 1..=spec.object_count as u16 {
        let n = rng.gen_range(spec.min_points..=spec.max_points);
        let (proto, half) = sample_primitive(&mut rng, n);
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let lo_x = min.x + 0.1 * ext.x + half.x;
            let hi_x = min.x + 0.9 * ext.x - half.x;
            let lo_y = min.y + 0.1 * ext.y + half.y;
            let hi_y = min.y + 0.9 * ext.y - half.y;
            let lo_z = min.z + 0.05 * ext.z + half.z;
            let hi_z = min.z + 0.5 * ext.z - half.z;
            if lo_x >= hi_x || lo_y >= hi_y || lo_z >= hi_z {
                continue; // primitive too large for this workspace
            }
            let center = Point3::new(
                rng.gen_range(lo_x..hi_x),
                rng.gen_range(lo_y..hi_y),
                rng.gen_range(lo_z..hi_z),
            );
            let fp = (
                center.x - half.x - PLACEMENT_GAP,
                center.x + half.x + PLACEMENT_GAP,
                center.y - half.y - PLACEMENT_GAP,
                center.y + half.y + PLACEMENT_GAP,
            );
            let clear = footprints
                .iter()
                .all(|o| fp.1 <= o.0 || o.1 <= fp.0 || fp.3 <= o.2 || o.3 <= fp.2);
            if !clear {
                continue;
            }
            footprints.push(fp);
            let cloud = PointCloud::new(
                proto.points.iter().map(|p| p + center.coords).collect(),
            );
            objects.push(SceneObject { id, cloud, attached: false });
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::PlacementFailed(PLACEMENT_ATTEMPTS));
        }
    }
    let gripper = Pose::new(
        Point3::new(
            min.x + 0.5 * ext.x,
            min.y + 0.5 * ext.y,
            min.z + 0.8 * ext.z,
        ),
        crate::geometry::UnitQuaternion::identity(),
    );
    let scene = Scene { objects, gripper, workspace: *ws, step_index: 0 };
    let camera = fixed_camera(ws);
    let (depth, masks) = render_scene(&scene, &camera)?;
    Ok(GeneratedScene { scene, camera, depth, masks })
}

/// Trains a codebook on the scene's own object grids (the memorization
/// regime: every grid the rollout will re-encode under translation-only
/// motion is already in the training set, so shape decoding is exact when
/// the codebook is large enough to hold every distinct patch).
pub fn scene_codebook(
    scene: &Scene,
    layout: &PatchLayout,
    k: u32,
    seed: u64,
) -> Result<Codebook> {
    let grids = scene
        .objects
        .iter()
        .map(|o| voxelize(&o.cloud, &object_cube(&o.cloud)?, layout.grid_resolution()))
        .collect::<Result<Vec<_>>>()?;
    Ok(train_codebook(&grids, k, seed, layout)?.codebook)
}

/// What one pipeline step did to the scene.
struct StepResult {
    scene: Scene,
    record: StepRecord,
    predicted: Option<SceneTokens>,
    /// A failure the rollout cannot recover from (the target is gone).
    fatal: bool,
}

fn failed_step(scene: &Scene, reason: FailureReason, icp: Option<IcpResult>, fatal: bool) -> StepResult {
    StepResult {
        scene: scene.clone(),
        record: StepRecord {
            step_index: scene.step_index,
            icp,
            gripper: scene.gripper,
            target_centroid: None,
            failure: Some(reason),
            tokens_ref: None,
            snapshot_ref: None,
        },
        predicted: None,
        fatal,
    }
}

/// Executes one pipeline step: render → lift masks → build sequence →
/// predict → parse → object delta (ICP) → apply the recovered transform
/// to the gripper and the target cloud. On any data-dependent failure the
/// scene comes back unchanged with the reason recorded; errors are never
/// raised past the rollout.
fn step(
    scene: &Scene,
    camera: &Camera,
    task: &Task,
    predictor: &PredictorKind,
    cfg: &PipelineConfig,
) -> Result<StepResult> {
    let (depth, masks) = render_scene(scene, camera)?;
    let decomposition =
        match lift_masks(&depth, &camera.intrinsics, &camera.pose, &masks, cfg.quant) {
            Ok(d) => d,
            Err(_) => return Ok(failed_step(scene, FailureReason::OutOfWorkspace, None, true)),
        };
    let object_ids: Vec<u16> = decomposition.segments.iter().map(|s| s.id).collect();
    let target_at = match object_ids.iter().position(|&id| id == task.target_object) {
        Some(i) => i,
        None => return Ok(failed_step(scene, FailureReason::OutOfWorkspace, None, true)),
    };
    let sequence =
        build_sequence(&decomposition, &task.instruction, cfg.vocab, cfg.codebook, cfg.layout)?;
    let ctx = PredictorContext {
        vocab: cfg.vocab,
        codebook: cfg.codebook,
        layout: cfg.layout,
        quant: cfg.quant,
        object_ids: &object_ids,
    };
    let predicted = match predict_next(predictor, &sequence, &ctx) {
        Ok(p) => p,
        Err(Error::TargetAbsent(_)) => {
            return Ok(failed_step(scene, FailureReason::OutOfWorkspace, None, true))
        }
        Err(_) => {
            return Ok(failed_step(scene, FailureReason::MalformedPrediction, None, false))
        }
    };
    let before = &decomposition.segments[target_at];
    let (grid, descriptor) = match parse_sequence(&predicted, cfg.vocab, cfg.layout) {
        Ok(parsed) if parsed.objects.len() == object_ids.len() => {
            let object = &parsed.objects[target_at];
            match object.decode_shape(cfg.codebook, cfg.layout) {
                Ok(grid) => (grid, object.descriptor),
                Err(_) => {
                    return Ok(failed_step(
                        scene,
                        FailureReason::MalformedPrediction,
                        None,
                        false,
                    ))
                }
            }
        }
        _ => return Ok(failed_step(scene, FailureReason::MalformedPrediction, None, false)),
    };
    // A surface scan decodes to at most about one voxel per observed
    // point; a grid far denser than that is corrupted shape data, and
    // feeding it to ICP would be both meaningless and slow.
    if grid.occupied_count() > (8 * before.cloud.len()).max(4096) {
        return Ok(failed_step(scene, FailureReason::MalformedPrediction, None, false));
    }
    let result = match object_delta(before, (&grid, &descriptor), cfg.quant, cfg.icp) {
        Ok(r) => r,
        Err(_) => return Ok(failed_step(scene, FailureReason::MalformedPrediction, None, false)),
    };
    if !result.converged || result.failure.is_some() {
        return Ok(failed_step(scene, FailureReason::IcpFailure, Some(result), false));
    }
    // Commit: move the gripper and its attached target by the recovered
    // transform (kinematic attachment); everything else is untouched.
    let mut next = scene.clone();
    let transform = result.transform;
    let target = next
        .objects
        .iter_mut()
        .find(|o| o.id == task.target_object)
        .expect("target existed in the lifted scene");
    let moved = apply_transform(&target.cloud, &transform);
    let centroid = moved.centroid()?;
    if !scene.workspace.contains(&centroid) {
        return Ok(failed_step(scene, FailureReason::OutOfWorkspace, Some(result), true));
    }
    target.cloud = moved;
    next.gripper = apply_to_pose(&transform, &scene.gripper);
    next.step_index = scene.step_index + 1;
    let record = StepRecord {
        step_index: next.step_index,
        icp: Some(result),
        gripper: next.gripper,
        target_centroid: Some(centroid),
        failure: None,
        tokens_ref: None,
        snapshot_ref: None,
    };
    Ok(StepResult { scene: next, record, predicted: Some(predicted), fatal: false })
}

fn target_reached(scene: &Scene, task: &Task) -> Result<bool> {
    let target = scene
        .object(task.target_object)
        .ok_or(Error::TargetAbsent(task.target_object as u32))?;
    Ok((target.cloud.centroid()? - task.goal_center).norm() <= task.success_epsilon)
}

/// Runs the pipeline loop until the target centroid reaches the goal
/// region or `max_steps` is exhausted. When `trace_dir` is given, writes
/// per-step token streams, ICP results, and scene snapshots plus a
/// manifest (schema [`TRACE_SCHEMA`]).
pub fn run_rollout(
    start: &Scene,
    camera: &Camera,
    task: &Task,
    predictor: &PredictorKind,
    cfg: &PipelineConfig,
    seed: u64,
    trace_dir: Option<&Path>,
) -> Result<RolloutTrace> {
    start.validate()?;
    if start.object(task.target_object).is_none() {
        return Err(Error::BadTask(format!(
            "target object {} not in the scene",
            task.target_object
        )));
    }
    if let Some(dir) = trace_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut scene = start.clone();
    scene.attach(task.target_object)?;
    let mut steps: Vec<StepRecord> = Vec::new();
    let mut outcome = None;
    if target_reached(&scene, task)? {
        outcome = Some(Outcome::Success { steps: 0 });
    }
    for i in 0..task.max_steps {
        if outcome.is_some() {
            break;
        }
        let mut result = step(&scene, camera, task, predictor, cfg)?;
        if let Some(dir) = trace_dir {
            write_step_files(dir, i, &mut result)?;
        }
        scene = result.scene;
        let failed = result.record.failure;
        steps.push(result.record);
        match failed {
            None => {
                if target_reached(&scene, task)? {
                    outcome = Some(Outcome::Success { steps: i + 1 });
                }
            }
            Some(reason) if result.fatal => {
                outcome = Some(Outcome::Failure { reason });
            }
            Some(_) => {} // recoverable: keep stepping
        }
    }
    let outcome = outcome.unwrap_or(Outcome::Failure {
        reason: steps
            .last()
            .and_then(|s| s.failure)
            .unwrap_or(FailureReason::Timeout),
    });
    let trace = RolloutTrace { seed, steps, outcome };
    if let Some(dir) = trace_dir {
        write_manifest(dir, &trace)?;
    }
    Ok(trace)
}

fn write_step_files(dir: &Path, index: u32, result: &mut StepResult) -> Result<()> {
    if let Some(predicted) = &result.predicted {
        let name = format!("step_{index:03}.tokens.txt");
        std::fs::write(dir.join(&name), tokens_to_text(&predicted.tokens))?;
        result.record.tokens_ref = Some(PathBuf::from(name));
    }
    let snapshot = serde_json::json!({
        "step_index": result.record.step_index,
        "gripper": result.record.gripper,
        "target_centroid": result.record.target_centroid.map(|c| [c.x, c.y, c.z]),
        "failure": result.record.failure,
        "icp": result.record.icp,
    });
    let name = format!("step_{index:03}.scene.json");
    std::fs::write(dir.join(&name), serde_json::to_string_pretty(&snapshot)?)?;
    result.record.snapshot_ref = Some(PathBuf::from(name));
    Ok(())
}

fn write_manifest(dir: &Path, trace: &RolloutTrace) -> Result<()> {
    let steps: Vec<serde_json::Value> = trace
        .steps
        .iter()
        .map(|s| {
            serde_json::json!({
                "step_index": s.step_index,
                "tokens": s.tokens_ref,
                "snapshot": s.snapshot_ref,
                "failure": s.failure,
            })
        })
        .collect();
    let manifest = serde_json::json!({
        "schema": TRACE_SCHEMA,
        "seed": trace.seed,
        "outcome": trace.outcome,
        "steps": steps,
    });
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Clone of `kind` with every noise seed offset by `offset`; used to give
/// each trial in a batch its own noise stream while keeping the batch
/// deterministic.
pub fn reseed_predictor(kind: &PredictorKind, offset: u64) -> PredictorKind {
    match kind {
        PredictorKind::Noisy { inner, flip_probability, seed } => PredictorKind::Noisy {
            inner: Box::new(reseed_predictor(inner, offset)),
            flip_probability: *flip_probability,
            seed: seed.wrapping_add(offset),
        },
        other => other.clone(),
    }
}

/// Runs `trials` independent rollouts (scene `t` from `base_seed + t`,
/// noise seeds offset by `t`) and aggregates the outcomes. Each trial
/// trains its own scene codebook sized to the vocabulary. Trials run in
/// parallel; the aggregate is order-independent.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    scene_spec: &SceneSpec,
    task: &Task,
    predictor: &PredictorKind,
    quant: &QuantConfig,
    icp: &IcpConfig,
    vocab: &Vocabulary,
    layout: &PatchLayout,
    trials: usize,
    base_seed: u64,
) -> Result<(Vec<RolloutTrace>, RolloutSummary)> {
    if trials == 0 {
        return Err(Error::NoOutcomes);
    }
    let traces: Vec<RolloutTrace> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let seed = base_seed.wrapping_add(t);
            let generated = generate_scene(scene_spec, seed)?;
            let codebook =
                scene_codebook(&generated.scene, layout, vocab.codebook_size(), seed)?;
            let cfg = PipelineConfig { quant, icp, vocab, codebook: &codebook, layout };
            let kind = reseed_predictor(predictor, t);
            run_rollout(&generated.scene, &generated.camera, task, &kind, &cfg, seed, None)
        })
        .collect::<Result<Vec<_>>>()?;
    let outcomes: Vec<bool> = traces.iter().map(|t| t.outcome.is_success()).collect();
    let summary = summarize(&outcomes)?;
    Ok((traces, summary))
}
