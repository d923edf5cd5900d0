//! Command-line surface for the pipeline: voxelization, scene lifting,
//! location/shape tokenization, prediction, ICP, and rollout evaluation.
//!
//! Every subcommand validates its inputs, writes outputs atomically, and
//! exits 0 on success, 1 on usage errors, 2 on pipeline failures. All
//! randomness flows from explicit `--seed` flags.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rayon::prelude::*;

use avi_core::geometry::{devoxelize, voxelize, Aabb, Point3, RigidTransform};
use avi_core::icp::{icp_align, IcpConfig};
use avi_core::io::{
    load_cloud, load_depth, load_grid, load_json, load_mask, load_tokens, save_cloud,
    save_grid, save_json, save_tokens,
};
use avi_core::locquant::{
    dequantize_location, effective_resolution, extend_vocabulary, object_cube,
    quantize_location, LocationDescriptor, QuantConfig,
};
use avi_core::predictor::{parse_sequence, predict_next, PredictorContext, PredictorSpec, SceneTokens};
use avi_core::rollout::{
    generate_scene, reseed_predictor, run_rollout, scene_codebook, summarize, PipelineConfig,
    SceneSpec, TaskSpec,
};
use avi_core::segmentation::{lift_masks, Camera};
use avi_core::vqtok::{decode_grid, encode_grid, train_codebook, Codebook, PatchLayout};

#[derive(Parser)]
#[command(
    name = "avi",
    version,
    about = "Desk-scale language-to-geometry manipulation pipeline",
    subcommand_required = true,
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Rasterize a point cloud into a binary occupancy grid
    Voxelize {
        /// Input cloud (.xyz: one `x y z` per line)
        cloud: PathBuf,
        /// Grid resolution per axis
        #[arg(long, default_value_t = 64)]
        res: u32,
        /// Bounding box `x0,y0,z0,x1,y1,z1`; defaults to the object's own cube
        #[arg(long = "box", value_name = "BOX")]
        bbox: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Expand an occupancy grid back into voxel-center points
    Devoxelize {
        /// Input grid (.aviv)
        grid: PathBuf,
        /// Bounding box `x0,y0,z0,x1,y1,z1` the grid spans
        #[arg(long = "box", value_name = "BOX")]
        bbox: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Lift a depth/mask pair into per-object point clouds
    Lift {
        /// Depth image (.avid)
        depth: PathBuf,
        /// Mask image (.avim); label 0 is background
        masks: PathBuf,
        /// Camera intrinsics + pose JSON
        camera: PathBuf,
        #[arg(long = "out-dir")]
        out_dir: PathBuf,
        /// Quantization config JSON (defaults to the unit workspace)
        #[arg(long)]
        quant: Option<PathBuf>,
    },
    /// Location quantization: encode, decode, or print the resolution table
    Locquant {
        #[command(subcommand)]
        cmd: LocquantCmd,
    },
    /// Shape codebook training
    Codebook {
        #[command(subcommand)]
        cmd: CodebookCmd,
    },
    /// Shape tokenization against a trained codebook
    Shape {
        #[command(subcommand)]
        cmd: ShapeCmd,
    },
    /// Produce the predicted next-state token sequence
    Predict {
        /// Predictor spec JSON
        #[arg(long)]
        predictor: PathBuf,
        /// Input token sequence (text, whitespace-separated ids)
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Codebook JSON the sequence's shape tokens refer to
        #[arg(long)]
        codebook: PathBuf,
        /// Quantization config JSON
        #[arg(long)]
        quant: Option<PathBuf>,
        /// Text-segment size of the vocabulary the sequence was built with
        #[arg(long = "base-size", default_value_t = 100)]
        base_size: u32,
        /// Patch layout `res,px,py,pz`
        #[arg(long, default_value = "64,4,4,2")]
        layout: String,
        /// Object ids per sequence block, comma-separated (default 1..=N)
        #[arg(long = "object-ids")]
        object_ids: Option<String>,
    },
    /// Align two point clouds and report the rigid transform
    Icp {
        source: PathBuf,
        target: PathBuf,
        /// Initial transform JSON (default identity)
        #[arg(long)]
        init: Option<PathBuf>,
        /// ICP config JSON
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run seeded rollout trials and aggregate success statistics
    Rollout {
        /// Scene generation spec JSON
        #[arg(long)]
        scene: PathBuf,
        /// Task spec JSON
        #[arg(long)]
        task: PathBuf,
        /// Predictor spec JSON
        #[arg(long)]
        predictor: PathBuf,
        #[arg(long, default_value_t = avi_core::rollout::DEFAULT_TRIALS)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write per-trial trace directories and aggregate JSONs here
        #[arg(long = "out-dir")]
        out_dir: Option<PathBuf>,
        /// Quantization config JSON (defaults to 64 position bins, which
        /// keeps oracle steps desk-sized)
        #[arg(long)]
        quant: Option<PathBuf>,
        /// ICP config JSON
        #[arg(long = "icp-config")]
        icp_config: Option<PathBuf>,
        /// Shape codebook size trained per trial
        #[arg(long = "codebook-size", default_value_t = 512)]
        codebook_size: u32,
        /// Text-segment size of the evaluation vocabulary
        #[arg(long = "base-size", default_value_t = 32)]
        base_size: u32,
    },
    /// Print "mean ± stderr" for a JSON array of rollout outcomes
    Summarize {
        /// JSON file holding an array of booleans
        outcomes: PathBuf,
    },
}

#[derive(Subcommand)]
enum LocquantCmd {
    /// Quantize a cloud's location into bin indices
    Encode {
        cloud: PathBuf,
        #[arg(long)]
        quant: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode bin indices back to a workspace position and scale
    Decode {
        descriptor: PathBuf,
        #[arg(long)]
        quant: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the effective world-space resolution table
    Table1,
}

#[derive(Subcommand)]
enum CodebookCmd {
    /// K-means-train a codebook over occupancy-grid patches
    Train {
        /// Training grids (.aviv)
        #[arg(required = true)]
        grids: Vec<PathBuf>,
        #[arg(short, long)]
        k: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Patch layout `res,px,py,pz`
        #[arg(long, default_value = "64,4,4,2")]
        layout: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum ShapeCmd {
    /// Encode a grid into codebook indices
    Encode {
        grid: PathBuf,
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long, default_value = "64,4,4,2")]
        layout: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode codebook indices back into a grid
    Decode {
        tokens: PathBuf,
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long, default_value = "64,4,4,2")]
        layout: String,
        #[arg(long)]
        out: PathBuf,
    },
}

enum CliError {
    /// Bad arguments or unreadable/unparsable referenced files.
    Usage(String),
    /// The pipeline itself rejected or failed on valid-looking inputs.
    Pipeline(avi_core::Error),
}

impl From<avi_core::Error> for CliError {
    fn from(e: avi_core::Error) -> Self {
        CliError::Pipeline(e)
    }
}

type CliResult<T = ()> = Result<T, CliError>;

/// Wraps input loading so failures count as usage errors.
fn input<T>(what: &Path, r: avi_core::Result<T>) -> CliResult<T> {
    r.map_err(|e| CliError::Usage(format!("{}: {e}", what.display())))
}

fn parse_bbox(text: &str) -> CliResult<Aabb> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|f| f.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("--box {text:?} is not six numbers")))?;
    if parts.len() != 6 {
        return Err(CliError::Usage(format!(
            "--box needs six numbers (x0,y0,z0,x1,y1,z1), got {}",
            parts.len()
        )));
    }
    Aabb::new(
        Point3::new(parts[0], parts[1], parts[2]),
        Point3::new(parts[3], parts[4], parts[5]),
    )
    .map_err(|e| CliError::Usage(format!("--box {text:?}: {e}")))
}

fn parse_layout(text: &str) -> CliResult<PatchLayout> {
    let parts: Vec<u32> = text
        .split(',')
        .map(|f| f.trim().parse::<u32>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("--layout {text:?} is not four integers")))?;
    if parts.len() != 4 {
        return Err(CliError::Usage(format!(
            "--layout needs res,px,py,pz, got {} fields",
            parts.len()
        )));
    }
    PatchLayout::new(parts[0], (parts[1], parts[2], parts[3]))
        .map_err(|e| CliError::Usage(format!("--layout {text:?}: {e}")))
}

fn load_quant(path: &Option<PathBuf>) -> CliResult<QuantConfig> {
    match path {
        Some(p) => input(p, load_json(p)),
        None => Ok(QuantConfig::default()),
    }
}

/// The rollout harness default: 64 position bins so a 5-bin oracle step
/// spans ~8 cm of a unit workspace.
fn rollout_quant(path: &Option<PathBuf>) -> CliResult<QuantConfig> {
    match path {
        Some(p) => input(p, load_json(p)),
        None => Ok(QuantConfig::new(*QuantConfig::default().workspace(), 64, 128, true)?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Pipeline(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Cmd) -> CliResult {
    match cmd {
        Cmd::Voxelize { cloud, res, bbox, out } => {
            let points = input(&cloud, load_cloud(&cloud))?;
            let cube = match bbox {
                Some(text) => parse_bbox(&text)?,
                None => object_cube(&points)?,
            };
            let grid = voxelize(&points, &cube, res)?;
            save_grid(&out, &grid)?;
            println!(
                "{} points -> {}^3 grid, {} occupied -> {}",
                points.len(),
                res,
                grid.occupied_count(),
                out.display()
            );
            Ok(())
        }
        Cmd::Devoxelize { grid, bbox, out } => {
            let grid = input(&grid, load_grid(&grid))?;
            let cube = parse_bbox(&bbox)?;
            let cloud = devoxelize(&grid, &cube)?;
            save_cloud(&out, &cloud)?;
            println!("{} voxel centers -> {}", cloud.len(), out.display());
            Ok(())
        }
        Cmd::Lift { depth, masks, camera, out_dir, quant } => {
            let depth_img = input(&depth, load_depth(&depth))?;
            let mask_img = input(&masks, load_mask(&masks))?;
            let cam: Camera = input(&camera, load_json(&camera))?;
            let cfg = load_quant(&quant)?;
            let scene = lift_masks(&depth_img, &cam.intrinsics, &cam.pose, &mask_img, &cfg)?;
            std::fs::create_dir_all(&out_dir)
                .map_err(|e| CliError::Usage(format!("{}: {e}", out_dir.display())))?;
            let mut index = Vec::new();
            for segment in &scene.segments {
                let name = format!("segment_{:03}.xyz", segment.id);
                save_cloud(&out_dir.join(&name), &segment.cloud)?;
                index.push(serde_json::json!({
                    "id": segment.id,
                    "points": segment.cloud.len(),
                    "descriptor": segment.descriptor,
                    "cloud": name,
                }));
            }
            save_json(
                &out_dir.join("segments.json"),
                &serde_json::json!({
                    "segments": index,
                    "dropped_labels": scene.dropped_labels,
                    "discarded_points": scene.discarded_points,
                }),
            )?;
            println!(
                "{} segments, {} dropped labels, {} points outside workspace -> {}",
                scene.segments.len(),
                scene.dropped_labels.len(),
                scene.discarded_points,
                out_dir.display()
            );
            Ok(())
        }
        Cmd::Locquant { cmd } => run_locquant(cmd),
        Cmd::Codebook { cmd } => run_codebook(cmd),
        Cmd::Shape { cmd } => run_shape(cmd),
        Cmd::Predict {
            predictor,
            input: input_path,
            out,
            codebook,
            quant,
            base_size,
            layout,
            object_ids,
        } => {
            let spec: PredictorSpec = input(&predictor, load_json(&predictor))?;
            let book: Codebook = input(&codebook, load_json(&codebook))?;
            let layout = parse_layout(&layout)?;
            let cfg = load_quant(&quant)?;
            let vocab = extend_vocabulary(base_size, book.k())?;
            let tokens = input(&input_path, load_tokens(&input_path))?;
            let sequence = SceneTokens { tokens };
            let ids: Vec<u16> = match object_ids {
                Some(text) => text
                    .split(',')
                    .map(|f| f.trim().parse::<u16>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| {
                        CliError::Usage(format!("--object-ids {text:?} is not a list of ids"))
                    })?,
                None => {
                    let parsed = parse_sequence(&sequence, &vocab, &layout)?;
                    (1..=parsed.objects.len() as u16).collect()
                }
            };
            let kind = spec.materialize(&vocab)?;
            let ctx = PredictorContext {
                vocab: &vocab,
                codebook: &book,
                layout: &layout,
                quant: &cfg,
                object_ids: &ids,
            };
            let predicted = predict_next(&kind, &sequence, &ctx)?;
            save_tokens(&out, &predicted.tokens)?;
            println!("{} tokens -> {}", predicted.tokens.len(), out.display());
            Ok(())
        }
        Cmd::Icp { source, target, init, config, out } => {
            let src = input(&source, load_cloud(&source))?;
            let tgt = input(&target, load_cloud(&target))?;
            let init = match init {
                Some(p) => input(&p, load_json::<RigidTransform>(&p))?,
                None => RigidTransform::identity(),
            };
            let cfg: IcpConfig = match config {
                Some(p) => input(&p, load_json(&p))?,
                None => IcpConfig::default(),
            };
            let result = icp_align(&src, &tgt, &cfg, &init)?;
            save_json(&out, &result)?;
            println!(
                "rmse {:.6} after {} iterations, converged: {} -> {}",
                result.rmse,
                result.iterations,
                result.converged,
                out.display()
            );
            Ok(())
        }
        Cmd::Rollout {
            scene,
            task,
            predictor,
            trials,
            seed,
            out_dir,
            quant,
            icp_config,
            codebook_size,
            base_size,
        } => {
            let scene_spec: SceneSpec = input(&scene, load_json(&scene))?;
            let task_spec: TaskSpec = input(&task, load_json(&task))?;
            let pred_spec: PredictorSpec = input(&predictor, load_json(&predictor))?;
            if trials == 0 {
                return Err(CliError::Usage("--trials must be at least 1".into()));
            }
            let quant = rollout_quant(&quant)?;
            let icp: IcpConfig = match icp_config {
                Some(p) => input(&p, load_json(&p))?,
                None => IcpConfig::default(),
            };
            let vocab = extend_vocabulary(base_size, codebook_size)?;
            let task = task_spec.materialize(&vocab)?;
            let kind = pred_spec.materialize(&vocab)?;
            let layout = PatchLayout::default();
            if let Some(dir) = &out_dir {
                std::fs::create_dir_all(dir)
                    .map_err(|e| CliError::Usage(format!("{}: {e}", dir.display())))?;
            }
            let traces = (0..trials as u64)
                .into_par_iter()
                .map(|t| {
                    let trial_seed = seed.wrapping_add(t);
                    let generated = generate_scene(&scene_spec, trial_seed)?;
                    let codebook =
                        scene_codebook(&generated.scene, &layout, codebook_size, trial_seed)?;
                    let cfg = PipelineConfig {
                        quant: &quant,
                        icp: &icp,
                        vocab: &vocab,
                        codebook: &codebook,
                        layout: &layout,
                    };
                    let trial_kind = reseed_predictor(&kind, t);
                    let dir = out_dir.as_ref().map(|d| d.join(format!("trial_{t:03}")));
                    run_rollout(
                        &generated.scene,
                        &generated.camera,
                        &task,
                        &trial_kind,
                        &cfg,
                        trial_seed,
                        dir.as_deref(),
                    )
                })
                .collect::<avi_core::Result<Vec<_>>>()?;
            let outcomes: Vec<bool> = traces.iter().map(|t| t.outcome.is_success()).collect();
            let summary = summarize(&outcomes)?;
            if let Some(dir) = &out_dir {
                save_json(&dir.join("outcomes.json"), &outcomes)?;
                save_json(&dir.join("summary.json"), &summary)?;
            }
            println!("{summary}");
            Ok(())
        }
        Cmd::Summarize { outcomes } => {
            let values: Vec<bool> = input(&outcomes, load_json(&outcomes))?;
            let summary = summarize(&values)?;
            println!("{summary}");
            Ok(())
        }
    }
}

fn run_locquant(cmd: LocquantCmd) -> CliResult {
    match cmd {
        LocquantCmd::Encode { cloud, quant, out } => {
            let points = input(&cloud, load_cloud(&cloud))?;
            let cfg = load_quant(&quant)?;
            let descriptor = quantize_location(&points, &cfg)?;
            save_json(&out, &descriptor)?;
            println!(
                "bins ({}, {}, {}, {}) -> {}",
                descriptor.x_bin,
                descriptor.y_bin,
                descriptor.z_bin,
                descriptor.s_bin,
                out.display()
            );
            Ok(())
        }
        LocquantCmd::Decode { descriptor, quant, out } => {
            let desc: LocationDescriptor = input(&descriptor, load_json(&descriptor))?;
            let cfg = load_quant(&quant)?;
            let (center, scale) = dequantize_location(&desc, &cfg)?;
            save_json(
                &out,
                &serde_json::json!({
                    "center": [center.x, center.y, center.z],
                    "scale": scale,
                }),
            )?;
            println!(
                "center ({:.4}, {:.4}, {:.4}), scale {:.4} -> {}",
                center.x,
                center.y,
                center.z,
                scale,
                out.display()
            );
            Ok(())
        }
        LocquantCmd::Table1 => {
            let ws = *QuantConfig::default().workspace();
            let no_lq = QuantConfig::new(ws, 256, 128, false)?;
            let with = |bins: u16| QuantConfig::new(ws, bins, 128, true);
            println!("configuration            R_eff");
            println!("no-lq   V=64 s=1.0       {}", effective_resolution(&no_lq, 64, 1.0)?);
            println!("lq B=64 V=64 s=1.0       {}", effective_resolution(&with(64)?, 64, 1.0)?);
            println!("lq B=128 V=64 s=1.0      {}", effective_resolution(&with(128)?, 64, 1.0)?);
            println!("lq B=256 V=64 s=1.0      {}", effective_resolution(&with(256)?, 64, 1.0)?);
            println!(
                "note: no-lq V=64 s=0.5 -> {} (V/s detail inside the object's own region)",
                effective_resolution(&no_lq, 64, 0.5)?
            );
            Ok(())
        }
    }
}

fn run_codebook(cmd: CodebookCmd) -> CliResult {
    match cmd {
        CodebookCmd::Train { grids, k, seed, layout, out } => {
            let layout = parse_layout(&layout)?;
            let loaded = grids
                .iter()
                .map(|p| input(p, load_grid(p)))
                .collect::<CliResult<Vec<_>>>()?;
            let trained = train_codebook(&loaded, k, seed, &layout)?;
            save_json(&out, &trained.codebook)?;
            println!(
                "{} grids -> k={} codebook (dim {}) -> {}",
                loaded.len(),
                trained.codebook.k(),
                trained.codebook.dim(),
                out.display()
            );
            Ok(())
        }
    }
}

fn run_shape(cmd: ShapeCmd) -> CliResult {
    match cmd {
        ShapeCmd::Encode { grid, codebook, layout, out } => {
            let grid = input(&grid, load_grid(&grid))?;
            let book: Codebook = input(&codebook, load_json(&codebook))?;
            let layout = parse_layout(&layout)?;
            let codes = encode_grid(&grid, &book, &layout)?;
            save_tokens(&out, &codes)?;
            println!("{} shape tokens -> {}", codes.len(), out.display());
            Ok(())
        }
        ShapeCmd::Decode { tokens, codebook, layout, out } => {
            let codes = input(&tokens, load_tokens(&tokens))?;
            let book: Codebook = input(&codebook, load_json(&codebook))?;
            let layout = parse_layout(&layout)?;
            let grid = decode_grid(&codes, &book, &layout)?;
            save_grid(&out, &grid)?;
            println!(
                "{}^3 grid, {} occupied -> {}",
                grid.resolution(),
                grid.occupied_count(),
                out.display()
            );
            Ok(())
        }
    }
}
