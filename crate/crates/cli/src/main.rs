use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use bevkit_core::analysis::{benchmark_pipeline, count_flops, parse_mask, parse_shape, BenchResult, FlopsReport};
use bevkit_core::camera::CameraRig;
use bevkit_core::head::{circular_nms, read_detections_jsonl, write_detections_jsonl, NmsRadii};
use bevkit_core::lift_splat::{project_and_splat, splat, LookupTable};
use bevkit_core::pipeline::{FrameInput, Pipeline, PipelineConfig};
use bevkit_core::reparam::{reparam_graph, verify_equivalence, GraphDesc, MergeBudget, VerifyConfig};
use bevkit_core::scene::{camera_exclusive_voxels, generate_scene, localize};
use bevkit_core::temporal::EgoPose;
use bevkit_core::{Error, Tensor};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

const THREADS_VAR: &str = "BEVKIT_THREADS";
/// Peak search half-width, in cells, for the localization report.
const PEAK_WINDOW: usize = 2;
/// Seconds and meters between consecutive synthetic frames.
const FRAME_PERIOD: f64 = 0.5;
const FRAME_STEP: f64 = 1.0;

#[derive(Parser)]
#[command(name = "bevkit", version, about = "Camera-to-BEV perception kernels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build or inspect frustum-to-voxel lookup tables
    #[command(subcommand)]
    Lut(LutCommand),
    /// Merge multi-branch blocks into plain convolutions
    #[command(subcommand)]
    Reparam(ReparamCommand),
    /// Circular non-maximum suppression over JSONL detections
    Nms {
        #[arg(long)]
        dets: PathBuf,
        /// Per-class radii in meters; defaults to the built-in table
        #[arg(long)]
        radii: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Count FLOPs of a graph file or of the configured pipeline
    Flops(FlopsArgs),
    /// Time the pipeline and the table-driven projection
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        frames: usize,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Synthetic demonstrations
    #[command(subcommand)]
    Demo(DemoCommand),
    /// Compare a synthetic frame with and without masked cameras
    MaskViews {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated camera names
        #[arg(long)]
        mask: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 12)]
        objects: usize,
    },
}

#[derive(Subcommand)]
enum LutCommand {
    Build {
        #[arg(long)]
        rig: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    Info { file: PathBuf },
}

#[derive(Subcommand)]
enum ReparamCommand {
    Run {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long = "budget-E", default_value_t = MergeBudget::default().error_post)]
        budget_post: f64,
        #[arg(long = "budget-e", default_value_t = MergeBudget::default().error_pre)]
        budget_pre: f64,
        #[arg(long = "budget-cap", default_value_t = MergeBudget::default().cap)]
        budget_cap: usize,
        #[arg(long)]
        out: PathBuf,
    },
    Verify {
        #[arg(long)]
        original: PathBuf,
        #[arg(long)]
        fused: PathBuf,
        #[arg(long, default_value_t = VerifyConfig::default().trials)]
        trials: usize,
        #[arg(long, default_value_t = VerifyConfig::default().seed)]
        seed: u64,
        #[arg(long, default_value_t = VerifyConfig::default().tol)]
        tol: f32,
    },
}

#[derive(Subcommand)]
enum DemoCommand {
    /// Run one synthetic scene through the full pipeline
    E2e {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        objects: usize,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct FlopsSource {
    #[arg(long)]
    graph: Option<PathBuf>,
    /// Per-module report of the pipeline described by this config
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct FlopsArgs {
    #[command(flatten)]
    source: FlopsSource,
    /// Input shape for --graph, as CxHxW
    #[arg(long, required_unless_present = "config")]
    input_shape: Option<String>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

/// A checked property did not hold; exits with code 3.
#[derive(Debug, thiserror::Error)]
#[error("verification failed: {0}")]
struct VerificationFailed(String);

fn main() -> ExitCode {
    let cli = Cli::parse();
    match configure_threads().and_then(|()| run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

/// 2 for bad input or configuration, 3 for numeric or verification failures.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<VerificationFailed>() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Dimension(_) | Error::InvalidGeometry(_) | Error::Numeric(_) | Error::SingularTransform(_) => 3,
                _ => 2,
            };
        }
    }
    2
}

fn configure_threads() -> Result<()> {
    let Ok(text) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = text
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_VAR} must be a positive integer, got `{text}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot start {n} worker threads: {e}")))?;
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Lut(LutCommand::Build { rig, config, out }) => lut_build(&rig, config.as_deref(), &out),
        Command::Lut(LutCommand::Info { file }) => print_json(&lut_summary(&LookupTable::load(&file)?)),
        Command::Reparam(ReparamCommand::Run {
            graph,
            budget_post,
            budget_pre,
            budget_cap,
            out,
        }) => reparam_run(&graph, &MergeBudget::new(budget_post, budget_pre, budget_cap)?, &out),
        Command::Reparam(ReparamCommand::Verify {
            original,
            fused,
            trials,
            seed,
            tol,
        }) => reparam_verify(&original, &fused, trials, seed, tol),
        Command::Nms { dets, radii, out } => nms(&dets, radii.as_deref(), &out),
        Command::Flops(args) => flops(&args),
        Command::Bench {
            config,
            frames,
            warmup,
            seed,
        } => bench(config.as_deref(), frames, warmup, seed),
        Command::Demo(DemoCommand::E2e { config, seed, objects }) => demo_e2e(config.as_deref(), seed, objects),
        Command::MaskViews {
            config,
            mask,
            seed,
            objects,
        } => mask_views(config.as_deref(), &mask, seed, objects),
    }
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<(PipelineConfig, PathBuf)> {
    match path {
        Some(p) => {
            let cfg = PipelineConfig::load(p)?;
            let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
            Ok((cfg, base))
        }
        None => Ok((PipelineConfig::default(), PathBuf::from("."))),
    }
}

fn load_pipeline(path: Option<&Path>) -> Result<Pipeline> {
    let (cfg, base) = load_config(path)?;
    Ok(Pipeline::from_config(cfg, &base)?)
}

fn lut_summary(lut: &LookupTable) -> serde_json::Value {
    let s = lut.shape();
    json!({
        "cameras": s.cams,
        "bins": s.bins,
        "feature_height": s.h,
        "feature_width": s.w,
        "grid": [s.nx, s.ny],
        "cells": s.cells(),
        "valid_cells": lut.valid_count(),
        "occupied_voxels": lut.num_segments(),
        "fingerprint": format!("{:016x}", lut.fingerprint()),
    })
}

fn lut_build(rig: &Path, config: Option<&Path>, out: &Path) -> Result<()> {
    let (cfg, _) = load_config(config)?;
    let rig = CameraRig::load(rig)?;
    let lut = cfg.geometry(rig)?.build_lut(&cfg.grid)?;
    lut.save(out)?;
    print_json(&lut_summary(&lut))
}

fn reparam_run(graph: &Path, budget: &MergeBudget, out: &Path) -> Result<()> {
    let g = GraphDesc::load(graph)?;
    let fused = reparam_graph(&g, budget)?;
    fused.save(out)?;
    print_json(&json!({
        "blocks": g.blocks.len(),
        "parallel_branches": [g.parallel_branch_count(), fused.parallel_branch_count()],
        "batchnorms": [g.bn_count(), fused.bn_count()],
        "params": [g.param_count(), fused.param_count()],
    }))
}

fn reparam_verify(original: &Path, fused: &Path, trials: usize, seed: u64, tol: f32) -> Result<()> {
    let cfg = VerifyConfig {
        trials,
        seed,
        tol,
        ..VerifyConfig::default()
    };
    let report = verify_equivalence(&GraphDesc::load(original)?, &GraphDesc::load(fused)?, &cfg)?;
    print_json(&serde_json::to_value(report)?)?;
    if !report.pass {
        return Err(VerificationFailed(format!("max abs error {:e} exceeds {tol:e}", report.max_abs_error)).into());
    }
    Ok(())
}

fn nms(dets: &Path, radii: Option<&Path>, out: &Path) -> Result<()> {
    let text = fs::read_to_string(dets).map_err(Error::from)?;
    let dets = read_detections_jsonl(&text)?;
    let radii = match radii {
        Some(p) => NmsRadii::load(p)?,
        None => NmsRadii::default(),
    };
    let kept = circular_nms(&dets, &radii)?;
    fs::write(out, write_detections_jsonl(&kept)?).map_err(Error::from)?;
    eprintln!("kept {} of {} detections", kept.len(), dets.len());
    Ok(())
}

fn emit_report(report: &FlopsReport, format: Format) -> Result<()> {
    match format {
        Format::Json => println!("{}", report.to_json()?),
        Format::Csv => print!("{}", report.to_csv()),
    }
    Ok(())
}

fn flops(args: &FlopsArgs) -> Result<()> {
    let report = match (&args.source.graph, &args.source.config) {
        (Some(graph), _) => {
            let shape = args
                .input_shape
                .as_deref()
                .ok_or_else(|| Error::InvalidArgument("--input-shape is required with --graph".into()))?;
            count_flops(&GraphDesc::load(graph)?, parse_shape(shape)?)?
        }
        (None, config) => load_pipeline(config.as_deref())?.flops()?,
    };
    emit_report(&report, args.format)
}

/// Frame `k` of a drive straight ahead through scene `seed`.
fn synthetic_frame(p: &Pipeline, seed: u64, objects: usize, k: usize) -> Result<FrameInput> {
    let grid = p.config().grid;
    let pose = EgoPose::new(k as f64 * FRAME_STEP, 0.0, 0.0);
    Ok(generate_scene(seed, objects, p.geometry(), &grid, k as f64 * FRAME_PERIOD, pose)?.1)
}

fn bench(config: Option<&Path>, frames: usize, warmup: usize, seed: u64) -> Result<()> {
    let mut p = load_pipeline(config)?;
    let template = synthetic_frame(&p, seed, 6, 0)?;
    let mut k = 0usize;
    let pipeline = benchmark_pipeline(
        || {
            let frame = FrameInput {
                timestamp: k as f64 * FRAME_PERIOD,
                pose: EgoPose::new(k as f64 * FRAME_STEP, 0.0, 0.0),
                views: template.views.clone(),
            };
            k += 1;
            p.run_frame(&frame).map(drop)
        },
        frames,
        warmup,
    )?;

    let feats = p.view_features(&template)?;
    let depths = p.depths(&feats, &template)?;
    let features: Vec<Tensor> = feats.into_iter().map(|f| f.features).collect();
    let grid = p.config().grid;
    let with_lut = benchmark_pipeline(|| splat(&features, &depths, p.lut(), &grid).map(drop), frames, warmup)?;
    let recompute = benchmark_pipeline(
        || project_and_splat(&features, &depths, p.geometry(), &grid).map(drop),
        frames,
        warmup,
    )?;
    let bench_json = |b: &BenchResult| serde_json::to_value(b);
    print_json(&json!({
        "pipeline": bench_json(&pipeline)?,
        "projection": {
            "lookup_table": bench_json(&with_lut)?,
            "recompute": bench_json(&recompute)?,
            "speedup": recompute.wall_seconds / with_lut.wall_seconds,
        },
    }))
}

fn demo_e2e(config: Option<&Path>, seed: u64, objects: usize) -> Result<()> {
    let mut p = load_pipeline(config)?;
    let grid = p.config().grid;
    let (scene, frame) = generate_scene(seed, objects, p.geometry(), &grid, 0.0, EgoPose::identity())?;
    let out = p.run_frame(&frame)?;
    let located = localize(&out.bev, 0, &scene.objects, &grid, PEAK_WINDOW)?;
    let errors: Vec<usize> = located.iter().filter_map(|l| l.error_cells).collect();
    print_json(&json!({
        "seed": seed,
        "objects": scene.objects,
        "detections": out.detections,
        "localization": located,
        "max_error_cells": errors.iter().max(),
        "within_one_cell": located.iter().filter(|l| l.within(1)).count(),
    }))
}

fn mask_views(config: Option<&Path>, mask: &str, seed: u64, objects: usize) -> Result<()> {
    let mut p = load_pipeline(config)?;
    let mask = parse_mask(mask);
    let frame = synthetic_frame(&p, seed, objects, 0)?;
    let full = p.run_frame(&frame)?;
    p.reset()?;
    p.set_mask(mask.clone())?;
    let masked = p.run_frame(&frame)?;

    let plane = p.config().grid.nx() * p.config().grid.ny();
    let channels = p.config().channels;
    let sector_mass = |bev: &Tensor, voxels: &[u32]| -> f64 {
        voxels
            .iter()
            .flat_map(|&v| (0..channels).map(move |c| c * plane + v as usize))
            .map(|i| bev.data()[i].abs() as f64)
            .sum()
    };
    let cameras: Vec<serde_json::Value> = p
        .rig()
        .cameras()
        .iter()
        .enumerate()
        .map(|(k, cam)| {
            let sector = camera_exclusive_voxels(p.lut(), k);
            json!({
                "name": cam.name,
                "masked": mask.contains(&cam.name),
                "exclusive_voxels": sector.len(),
                "exclusive_mass": sector_mass(&full.bev, &sector),
                "exclusive_mass_masked": sector_mass(&masked.bev, &sector),
            })
        })
        .collect();
    print_json(&json!({
        "mask": mask,
        "cameras": cameras,
        "bev_mass": [full.bev.data().iter().map(|v| v.abs() as f64).sum::<f64>(), masked.bev.data().iter().map(|v| v.abs() as f64).sum::<f64>()],
        "detections": [full.detections.len(), masked.detections.len()],
    }))
}
