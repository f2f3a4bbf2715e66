//! `mvpf`: one subcommand per pipeline stage.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "mvpf", version, about = "Depth-warped multi-view video generation at desk scale")]
pub struct Cli {
    /// JSON run configuration; flags given on the command line win.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Worker threads (count) for parallel stages.
    #[arg(long, global = true, env = "MVPF_THREADS", value_name = "N")]
    threads: Option<usize>,

    /// Master seed (integer) for every random draw.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a procedural scene description as JSON.
    MakeScene(MakeScene),
    /// Ray-cast RGB, depth and normals from a ring of cameras.
    RenderGt(RenderGt),
    /// Warp one RGBD frame into another camera (partial render and normal map).
    Warp(Warp),
    /// Align relative depth to metric depth, then refine it with target normals.
    RefineDepth(RefineDepth),
    /// Write the synthetic multi-view training set.
    EmitDataset(EmitDataset),
    /// Two-stage training of the toy denoiser.
    Train(Train),
    /// Generate target-view videos for one sample.
    #[command(alias = "sample")]
    Generate(Generate),
    /// Score generated videos against ground truth.
    Eval(Eval),
    /// Run the built-in example suite.
    Selftest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SceneKind {
    Sphere,
    SphereCapsule,
    Performer,
}

#[derive(Args, Debug)]
pub struct MakeScene {
    /// Output scene JSON.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "sphere-capsule")]
    kind: SceneKind,
    /// Animation length in frames (performer only).
    #[arg(long, default_value_t = 1)]
    frames: usize,
}

#[derive(Args, Debug)]
pub struct RenderGt {
    /// Scene JSON from make-scene.
    #[arg(long)]
    scene: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Cameras on the ring (count).
    #[arg(long)]
    views: Option<usize>,
    /// Ring radius (scene units).
    #[arg(long)]
    radius: Option<f64>,
    /// Camera elevation above the target (scene units).
    #[arg(long)]
    height: Option<f64>,
    /// Image width and height (pixels).
    #[arg(long)]
    size: Option<usize>,
    /// Horizontal field of view (degrees).
    #[arg(long)]
    fov: Option<f64>,
    /// Frames to render (count).
    #[arg(long)]
    frames: Option<usize>,
    /// Also write degraded coarse-metric and relative depth maps.
    #[arg(long)]
    degrade: bool,
}

#[derive(Args, Debug)]
pub struct Warp {
    /// Source RGB frame (PNG).
    #[arg(long)]
    image: PathBuf,
    /// Source depth (PFM, scene units).
    #[arg(long)]
    depth: PathBuf,
    /// Camera list (JSON).
    #[arg(long)]
    cameras: PathBuf,
    /// Index of the source camera.
    #[arg(long, default_value_t = 0)]
    src: usize,
    /// Index of the target camera.
    #[arg(long)]
    dst: usize,
    /// Output directory for partial.png, normal.png, mask.png and zbuffer.pfm.
    #[arg(long)]
    out: PathBuf,
    /// Splat footprint: 1 is one pixel, r covers (2r−1)² pixels.
    #[arg(long)]
    splat_radius: Option<usize>,
    /// Background color of empty pixels (linear RGB, each in [0, 1]).
    #[arg(long, value_delimiter = ',', value_name = "R,G,B")]
    bg_color: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
pub struct RefineDepth {
    /// Relative depth (PFM, arbitrary affine units).
    #[arg(long)]
    relative: PathBuf,
    /// Coarse metric depth (PFM, scene units).
    #[arg(long)]
    metric: PathBuf,
    /// Target world-frame normals (PFM, unit vectors).
    #[arg(long)]
    normals: PathBuf,
    /// Camera list (JSON).
    #[arg(long)]
    cameras: PathBuf,
    /// Index of the camera the maps were taken from.
    #[arg(long, default_value_t = 0)]
    camera: usize,
    /// Refined depth output (PFM); a JSON report is written next to it.
    #[arg(long)]
    out: PathBuf,
    /// Weight of the data term (dimensionless, > 0).
    #[arg(long)]
    lambda: Option<f64>,
    /// Descent iterations (count).
    #[arg(long)]
    iters: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EmitDataset {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Samples (count).
    #[arg(long)]
    samples: Option<usize>,
    /// Target views per sample (count).
    #[arg(long)]
    views: Option<usize>,
    /// Frames per video (count).
    #[arg(long)]
    frames: Option<usize>,
    /// Image width and height (pixels).
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Args, Debug)]
pub struct Train {
    /// Dataset directory from emit-dataset.
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint (MVPF); the model config goes to <ckpt>.json.
    #[arg(long)]
    ckpt: PathBuf,
    /// Which stage(s) to run.
    #[arg(long, value_enum, default_value = "both")]
    stage: StageArg,
    /// Starting checkpoint; required for stage 2 alone.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Stage-1 optimizer steps (count).
    #[arg(long)]
    stage1_steps: Option<usize>,
    /// Stage-2 optimizer steps (count).
    #[arg(long)]
    stage2_steps: Option<usize>,
    /// Initial learning rate (per step).
    #[arg(long)]
    lr_start: Option<f64>,
    /// Final learning rate (per step).
    #[arg(long)]
    lr_end: Option<f64>,
}

#[derive(Args, Debug)]
pub struct Generate {
    /// Trained checkpoint (MVPF) with its <ckpt>.json config.
    #[arg(long)]
    ckpt: PathBuf,
    /// Sample directory providing the reference video, depth and cameras.
    #[arg(long)]
    sample: PathBuf,
    /// Output directory; one view_i per target.
    #[arg(long)]
    out: PathBuf,
    /// Orbit this many targets around the reference instead of the sample's cameras (count).
    #[arg(long)]
    views: Option<usize>,
    /// Euler steps (count).
    #[arg(long)]
    steps: Option<usize>,
    /// Run with the synchronization blocks bypassed.
    #[arg(long)]
    no_sync: bool,
}

#[derive(Args, Debug)]
pub struct Eval {
    /// Directory written by generate.
    #[arg(long)]
    generated: PathBuf,
    /// Ground-truth sample directory.
    #[arg(long)]
    sample: PathBuf,
    /// Report output (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Threshold file (JSON); any violation exits nonzero.
    #[arg(long)]
    thresholds: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
