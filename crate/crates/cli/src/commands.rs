//! Subcommand bodies. Each validates its paths first, then calls exactly
//! one library pipeline.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use mvpf::denoiser::{
    generate_multiview, orbit_targets, sample_from_data, train_stage, Branches, Denoiser, DenoiserConfig, GenerateRequest,
    Stage, StageReport,
};
use mvpf::depth_refine::refine_pipeline;
use mvpf::grad::checkpoint;
use mvpf::harness::{
    degrade_depth, emit_dataset, make_rig, performer, raycast, read_dataset, read_sample, RigSpec, SceneDescription,
};
use mvpf::io;
use mvpf::metrics::{EvalReport, Thresholds};
use mvpf::splat::{warp, SplatSettings};
use serde::Serialize;

use crate::config::RunConfig;
use crate::{Cli, Command, SceneKind, StageArg};

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation: missing inputs, out-of-range indices, invalid flags.
    Usage(String),
    /// Error raised by a library module, reported verbatim.
    Core(mvpf::Error),
    /// The command ran but its checks did not pass.
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(_) | CliError::Failed(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Failed(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<mvpf::Error> for CliError {
    fn from(e: mvpf::Error) -> Self {
        CliError::Core(e)
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn require_file(p: &Path) -> Result<()> {
    if p.is_file() { Ok(()) } else { Err(CliError::Usage(format!("{}: no such file", p.display()))) }
}

fn require_dir(p: &Path) -> Result<()> {
    if p.is_dir() { Ok(()) } else { Err(CliError::Usage(format!("{}: no such directory", p.display()))) }
}

/// Creates the directory holding `p` so the write cannot fail late.
fn prepare_output_file(p: &Path) -> Result<()> {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => fs::create_dir_all(d).map_err(|e| CliError::Usage(format!("{}: {e}", d.display()))),
        _ => Ok(()),
    }
}

fn prepare_output_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn frame_name(prefix: &str, k: usize, ext: &str) -> String {
    format!("{prefix}_{k:04}.{ext}")
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    if let Some(p) = &cli.config {
        require_file(p)?;
    }
    // A malformed config is a usage error, not a pipeline failure.
    let mut cfg = RunConfig::load(cli.config.as_deref()).map_err(|e| CliError::Usage(format!("config: {e}")))?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let cfg = cfg.seeded();
    match cli.command {
        Command::MakeScene(a) => make_scene(&cfg, a),
        Command::RenderGt(a) => render_gt(cfg, a),
        Command::Warp(a) => warp_cmd(&cfg, a),
        Command::RefineDepth(a) => refine_depth(cfg, a),
        Command::EmitDataset(a) => emit(cfg, a),
        Command::Train(a) => train(cfg, a),
        Command::Generate(a) => generate(&cfg, a),
        Command::Eval(a) => eval(a),
        Command::Selftest => selftest(),
    }
}

fn make_scene(cfg: &RunConfig, a: crate::MakeScene) -> Result<()> {
    if a.frames == 0 {
        return Err(CliError::Usage("--frames must be at least 1".into()));
    }
    prepare_output_file(&a.out)?;
    let scene = match a.kind {
        SceneKind::Sphere => SceneDescription::unit_sphere(),
        SceneKind::SphereCapsule => SceneDescription::sphere_and_capsule(),
        SceneKind::Performer => performer(cfg.seed, a.frames),
    };
    scene.validate()?;
    io::write_json(&a.out, &scene)?;
    Ok(())
}

fn render_gt(mut cfg: RunConfig, a: crate::RenderGt) -> Result<()> {
    require_file(&a.scene)?;
    prepare_output_dir(&a.out)?;
    let r = &mut cfg.render;
    r.views = a.views.unwrap_or(r.views);
    r.radius = a.radius.unwrap_or(r.radius);
    r.height = a.height.unwrap_or(r.height);
    r.size = a.size.unwrap_or(r.size);
    r.fov_deg = a.fov.unwrap_or(r.fov_deg);
    r.frames = a.frames.unwrap_or(r.frames);
    let scene: SceneDescription = io::read_json(&a.scene)?;
    scene.validate()?;
    let rig = RigSpec {
        views: r.views,
        radius: r.radius,
        height: r.height,
        target: [0.0; 3],
        image_width: r.size,
        image_height: r.size,
        fov_deg: r.fov_deg,
    };
    let cams = make_rig(&rig)?;
    io::write_cameras(&a.out.join("cameras.json"), &cams)?;
    for (i, cam) in cams.iter().enumerate() {
        let dir = a.out.join(format!("view_{i}"));
        fs::create_dir_all(&dir).map_err(mvpf::Error::from)?;
        for k in 0..r.frames {
            let gt = raycast(&scene, cam, k);
            io::write_png(&dir.join(frame_name("frame", k, "png")), &gt.rgb)?;
            io::write_depth_pfm(&dir.join(frame_name("depth", k, "pfm")), &gt.depth)?;
            io::write_normals_pfm(&dir.join(frame_name("normal", k, "pfm")), &gt.normals)?;
            if a.degrade {
                let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add((i * r.frames + k) as u64);
                let d = degrade_depth(&gt.depth, &cfg.degrade, seed)?;
                io::write_depth_pfm(&dir.join(frame_name("coarse", k, "pfm")), &d.coarse_metric)?;
                io::write_depth_pfm(&dir.join(frame_name("relative", k, "pfm")), &d.relative)?;
            }
        }
    }
    Ok(())
}

fn camera_at(cams: &[mvpf::geometry::Camera], i: usize, flag: &str) -> Result<mvpf::geometry::Camera> {
    cams.get(i)
        .cloned()
        .ok_or_else(|| CliError::Usage(format!("{flag} {i} out of range for {} cameras", cams.len())))
}

fn warp_cmd(cfg: &RunConfig, a: crate::Warp) -> Result<()> {
    for p in [&a.image, &a.depth, &a.cameras] {
        require_file(p)?;
    }
    prepare_output_dir(&a.out)?;
    let cams = io::read_cameras(&a.cameras)?;
    let (src, dst) = (camera_at(&cams, a.src, "--src")?, camera_at(&cams, a.dst, "--dst")?);
    let rgb = io::read_png(&a.image)?;
    let depth = io::read_depth_pfm(&a.depth)?;
    let mut settings = SplatSettings { radius: a.splat_radius.unwrap_or(cfg.splat_radius), ..SplatSettings::default() };
    if let Some(c) = &a.bg_color {
        if c.len() != 3 || c.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(CliError::Usage(format!("--bg-color {c:?}: need three channels in [0, 1]")));
        }
        settings.background = [c[0], c[1], c[2]];
    }
    let (partial, normal) = warp(&rgb, &depth, &src, &dst, &settings)?;
    io::write_png(&a.out.join("partial.png"), &partial.rgb)?;
    io::write_png(&a.out.join("normal.png"), &normal.rgb)?;
    let mask = partial.mask.iter().map(|&m| if m { [1.0; 3] } else { [0.0; 3] }).collect();
    io::write_png(&a.out.join("mask.png"), &mvpf::image::RgbImage::from_pixels(dst.width, dst.height, mask)?)?;
    io::write_depth_pfm(&a.out.join("zbuffer.pfm"), &mvpf::geometry::DepthMap::new(dst.width, dst.height, partial.zbuffer)?)?;
    Ok(())
}

#[derive(Serialize)]
struct RefineReport {
    alpha: f64,
    beta: f64,
    residual_rms: f64,
    energy_start: f64,
    energy_end: f64,
    accepted_steps: usize,
}

fn refine_depth(mut cfg: RunConfig, a: crate::RefineDepth) -> Result<()> {
    for p in [&a.relative, &a.metric, &a.normals, &a.cameras] {
        require_file(p)?;
    }
    prepare_output_file(&a.out)?;
    cfg.refine.lambda = a.lambda.unwrap_or(cfg.refine.lambda);
    cfg.refine.iters = a.iters.unwrap_or(cfg.refine.iters);
    let cam = camera_at(&io::read_cameras(&a.cameras)?, a.camera, "--camera")?;
    let relative = io::read_depth_pfm(&a.relative)?;
    let metric = io::read_depth_pfm(&a.metric)?;
    let normals = io::read_normals_pfm(&a.normals)?;
    let out = refine_pipeline(&relative, &metric, &normals, &cam, &cfg.refine)?;
    io::write_depth_pfm(&a.out, &out.refined)?;
    let report = RefineReport {
        alpha: out.fit.alpha,
        beta: out.fit.beta,
        residual_rms: out.fit.residual_rms,
        energy_start: out.energies[0],
        energy_end: *out.energies.last().unwrap(),
        accepted_steps: out.energies.len() - 1,
    };
    io::write_json(&with_suffix(&a.out, ".json"), &report)?;
    Ok(())
}

fn emit(mut cfg: RunConfig, a: crate::EmitDataset) -> Result<()> {
    prepare_output_dir(&a.out)?;
    let d = &mut cfg.dataset;
    d.samples = a.samples.unwrap_or(d.samples);
    d.views = a.views.unwrap_or(d.views);
    d.frames = a.frames.unwrap_or(d.frames);
    d.size = a.size.unwrap_or(d.size);
    emit_dataset(d, &a.out)?;
    Ok(())
}

fn load_model(ckpt: &Path) -> Result<Denoiser> {
    let sidecar = with_suffix(ckpt, ".json");
    require_file(ckpt)?;
    require_file(&sidecar)?;
    let config: DenoiserConfig = io::read_json(&sidecar)?;
    let mut model = Denoiser::new(config)?;
    model.store.load_records(&checkpoint::load(ckpt)?)?;
    Ok(model)
}

#[derive(Serialize)]
struct TrainReport {
    stages: Vec<StageReport>,
}

fn train(mut cfg: RunConfig, a: crate::Train) -> Result<()> {
    require_dir(&a.data)?;
    if let Some(p) = &a.init {
        require_file(p)?;
    } else if a.stage == StageArg::Two {
        return Err(CliError::Usage("--stage 2 needs --init with a stage-1 checkpoint".into()));
    }
    prepare_output_file(&a.ckpt)?;
    let t = &mut cfg.train;
    t.stage1_steps = a.stage1_steps.unwrap_or(t.stage1_steps);
    t.stage2_steps = a.stage2_steps.unwrap_or(t.stage2_steps);
    t.lr_start = a.lr_start.unwrap_or(t.lr_start);
    t.lr_end = a.lr_end.unwrap_or(t.lr_end);
    let mut model = match &a.init {
        Some(p) => load_model(p)?,
        None => Denoiser::new(cfg.model.clone())?,
    };
    let codec = model.config.codec();
    let data = read_dataset(&a.data)?.iter().map(|s| sample_from_data(&codec, s)).collect::<mvpf::Result<Vec<_>>>()?;
    let stages: &[Stage] = match a.stage {
        StageArg::One => &[Stage::One],
        StageArg::Two => &[Stage::Two],
        StageArg::Both => &[Stage::One, Stage::Two],
    };
    let mut report = TrainReport { stages: Vec::new() };
    for &stage in stages {
        let steps = match stage {
            Stage::One => cfg.train.stage1_steps,
            Stage::Two => cfg.train.stage2_steps,
        };
        let r = train_stage(&mut model, &data, stage, steps, &cfg.train)?;
        println!("stage {:?}: {} steps, loss {:.6} -> {:.6}", stage, r.steps, r.loss_before, r.loss_after);
        report.stages.push(r);
    }
    checkpoint::save(&a.ckpt, &model.store.records())?;
    io::write_json(&with_suffix(&a.ckpt, ".json"), &model.config)?;
    io::write_json(&with_suffix(&a.ckpt, ".train.json"), &report)?;
    Ok(())
}

fn generate(cfg: &RunConfig, a: crate::Generate) -> Result<()> {
    require_dir(&a.sample)?;
    if a.views == Some(0) || a.steps == Some(0) {
        return Err(CliError::Usage("--views and --steps must be at least 1".into()));
    }
    let model = load_model(&a.ckpt)?;
    prepare_output_dir(&a.out)?;
    let sample = read_sample(&a.sample)?;
    let reference = &sample.cameras[0];
    let targets = match a.views {
        Some(n) => orbit_targets(reference, n)?,
        None => sample.cameras[1..].to_vec(),
    };
    let req = GenerateRequest {
        reference: &sample.reference.frames,
        depths: &sample.reference.depths,
        reference_camera: reference,
        targets: &targets,
        steps: a.steps.unwrap_or(cfg.sample_steps),
        seed: cfg.seed,
        splat: SplatSettings { radius: cfg.splat_radius, ..SplatSettings::default() },
        branches: if a.no_sync { Branches::NO_SYNC } else { Branches::ALL },
    };
    let videos = generate_multiview(&model, &req)?;
    let mut cams = vec![reference.clone()];
    cams.extend(targets);
    io::write_cameras(&a.out.join("cameras.json"), &cams)?;
    for (i, video) in videos.iter().enumerate() {
        let dir = a.out.join(format!("view_{}", i + 1));
        fs::create_dir_all(&dir).map_err(mvpf::Error::from)?;
        for (k, frame) in video.iter().enumerate() {
            io::write_png(&dir.join(frame_name("frame", k, "png")), frame)?;
        }
    }
    Ok(())
}

fn read_generated(dir: &Path, views: usize) -> Result<Vec<Vec<mvpf::image::RgbImage>>> {
    (1..=views)
        .map(|i| {
            let d = dir.join(format!("view_{i}"));
            require_dir(&d)?;
            let mut frames = Vec::new();
            while d.join(frame_name("frame", frames.len(), "png")).is_file() {
                frames.push(io::read_png(&d.join(frame_name("frame", frames.len(), "png")))?);
            }
            Ok(frames)
        })
        .collect()
}

fn eval(a: crate::Eval) -> Result<()> {
    require_dir(&a.generated)?;
    require_dir(&a.sample)?;
    if let Some(p) = &a.thresholds {
        require_file(p)?;
    }
    prepare_output_file(&a.out)?;
    let truth = read_sample(&a.sample)?;
    let generated = read_generated(&a.generated, truth.views.len())?;
    let gt_frames: Vec<_> = truth.views.iter().map(|v| v.frames.clone()).collect();
    let depths: Vec<_> = truth.views.iter().map(|v| v.depths.clone()).collect();
    let report = EvalReport::build(&generated, &gt_frames, &depths, &truth.cameras[1..])?;
    io::write_json(&a.out, &report)?;
    if let Some(p) = &a.thresholds {
        let t: Thresholds = io::read_json(p)?;
        let failures = report.check(&t);
        if !failures.is_empty() {
            return Err(CliError::Failed(format!("thresholds not met: {}", failures.join("; "))));
        }
    }
    Ok(())
}

fn selftest() -> Result<()> {
    let checks = mvpf::selftest::run();
    let failed = checks.iter().filter(|c| !c.passed).count();
    for c in &checks {
        if c.passed {
            println!("ok    {}", c.name);
        } else {
            println!("FAIL  {}: {}", c.name, c.detail);
        }
    }
    println!("{} of {} checks passed", checks.len() - failed, checks.len());
    if failed > 0 {
        return Err(CliError::Failed(format!("{failed} selftest checks failed")));
    }
    Ok(())
}
