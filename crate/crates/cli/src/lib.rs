//! Command-line front end. [`run`] parses arguments, dispatches to a
//! subcommand and maps the outcome to a process exit code:
//! 0 on success or help, 1 on usage and validation errors, 2 on runtime
//! failures.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use photosplat::eval::{evaluate, mesh_hausdorff, default_voxel, extract_mesh, EvalError, LpipsSidecar, MeshSettings};
use photosplat::image::{write_png_gray, write_png_normals, write_raw_f32, ImageError};
use photosplat::io::{load_checkpoint, load_config, load_dataset, save_dataset, IoError, SceneDataset};
use photosplat::ply::PlyError;
use photosplat::rasterizer::{render, RenderOptions};
use photosplat::reflectance::AppearanceModel;
use photosplat::splats::{SplatError, SplatSet};
use photosplat::synthscene::{make_dataset, make_terrain, random_splat_scene, DatasetSpec, SynthError, TerrainSpec};
use photosplat::trainer::{fd_check, train, LossConfig, TrainConfig, TrainError};
use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        match e {
            IoError::MissingFile(_)
            | IoError::MalformedPose { .. }
            | IoError::DimensionMismatch(_)
            | IoError::Config(_)
            | IoError::Ply(_)
            | IoError::Splat(_) => CliError::Validation(e.to_string()),
            IoError::Image(_) | IoError::Io(_) => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(_) | TrainError::NoTrainingViews | TrainError::ShapeMismatch(_) => {
                CliError::Validation(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::ShapeMismatch(_) | EvalError::InvalidArgument(_) => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        CliError::Validation(e.to_string())
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Runtime(e.to_string())
            }
        }
    )*};
}

runtime_from!(std::io::Error, ImageError, PlyError, SplatError, serde_json::Error);

#[derive(Debug, Parser)]
#[command(name = "photosplat", version, about = "Gaussian splatting with planetary reflectance models")]
pub struct Cli {
    /// Log verbosity (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with ground truth.
    Synth(SynthArgs),
    /// Train splats on a dataset.
    Train(TrainArgs),
    /// Render one view of a checkpoint to image maps.
    Render(RenderArgs),
    /// Compute the metric report of a checkpoint.
    Eval(EvalArgs),
    /// Extract a surface mesh from a checkpoint.
    Mesh(MeshArgs),
    /// Finite-difference gradient check on a random scene.
    Fdcheck(FdcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Reflectance model of the oracle renderer.
    #[arg(long, default_value = "lambert")]
    pub model: AppearanceModel,
    /// TOML file with optional `[terrain]` and `[dataset]` tables.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Number of views, overriding the spec.
    #[arg(long)]
    pub views: Option<usize>,
    /// Square image size in pixels, overriding the spec.
    #[arg(long)]
    pub size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoints and the training log.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML training configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<AppearanceModel>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Single-threaded, bit-reproducible execution.
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset supplying the camera and sun.
    #[arg(long)]
    pub data: PathBuf,
    /// View name or index.
    #[arg(long)]
    pub view: String,
    /// Output directory for the maps.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for `metrics.json` and `metrics.csv`.
    #[arg(long)]
    pub out: PathBuf,
    /// Also extract a mesh and report its Hausdorff distance.
    #[arg(long)]
    pub mesh: bool,
    /// Voxel size for the mesh metric; defaults to the splat diagonal / 256.
    #[arg(long)]
    pub voxel: Option<f64>,
    /// JSON file with precomputed `{"train": x, "test": y}` LPIPS values.
    #[arg(long)]
    pub lpips: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MeshArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for `mesh.ply` and `mesh.obj`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub voxel: Option<f64>,
    /// Truncation distance in voxels.
    #[arg(long, default_value_t = 4.0)]
    pub trunc_voxels: f64,
}

#[derive(Debug, Args)]
pub struct FdcheckArgs {
    #[arg(long, default_value = "lambert")]
    pub model: AppearanceModel,
    #[arg(long, default_value_t = 3)]
    pub splats: usize,
    /// Square image size in pixels.
    #[arg(long, default_value_t = 8)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub step: f64,
    /// Maximum relative error before the check fails.
    #[arg(long, default_value_t = 1e-3)]
    pub tol: f64,
    /// SSIM weight in the intensity loss.
    #[arg(long, default_value_t = 0.2)]
    pub lambda: f64,
    /// Normal-consistency weight.
    #[arg(long, default_value_t = 0.05)]
    pub beta: f64,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SynthSpec {
    terrain: TerrainSpec,
    dataset: DatasetSpec,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let _ = env_logger::Builder::new().parse_filters(&cli.log_level).format_timestamp(None).try_init();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Render(a) => render_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Mesh(a) => mesh_cmd(a),
        Command::Fdcheck(a) => fdcheck(a),
    }
}

fn synth(a: SynthArgs) -> Result<(), CliError> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Validation(format!("--spec {}: {e}", p.display())))?;
            toml::from_str::<SynthSpec>(&text).map_err(|e| CliError::Validation(format!("--spec {}: {e}", p.display())))?
        }
        None => SynthSpec::default(),
    };
    if let Some(v) = a.views {
        spec.dataset.n_views = v;
    }
    if let Some(s) = a.size {
        if s == 0 {
            return Err(CliError::Usage("--size must be positive".into()));
        }
        spec.dataset.width = s;
        spec.dataset.height = s;
    }
    let h = make_terrain(&spec.terrain, a.seed)?;
    let ds = make_dataset(&h, &spec.dataset, a.model, a.seed)?;
    save_dataset(&a.out, &ds)?;
    info!("wrote {} views to {}", ds.views.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<(), CliError> {
    let mut cfg = match &a.config {
        Some(p) => load_config(p)?,
        None => TrainConfig::default(),
    };
    if let Some(m) = a.model {
        cfg.model = m;
    }
    if let Some(n) = a.iterations {
        cfg.schedule.iterations = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.deterministic |= a.deterministic;
    cfg.validate()?;
    let ds = load_dataset(&a.data)?;
    let every = (cfg.schedule.iterations / 20).max(1);
    let state = train(&ds, &cfg, Some(&a.out), |row| {
        if (row.iteration + 1) % every == 0 {
            info!("iteration {} loss {:.5} splats {}", row.iteration + 1, row.loss, row.splat_count);
        }
    })?;
    info!("finished with {} splats in {}", state.splats.len(), a.out.display());
    Ok(())
}

fn load_pair(checkpoint: &Path, data: &Path) -> Result<(SplatSet, Vec<photosplat::reflectance::ImageCalibration>, SceneDataset), CliError> {
    let (splats, cals) = load_checkpoint(checkpoint)?;
    let ds = load_dataset(data)?;
    if cals.len() != ds.views.len() {
        return Err(CliError::Validation(format!(
            "checkpoint has {} calibrations but the dataset has {} views",
            cals.len(),
            ds.views.len()
        )));
    }
    Ok((splats, cals, ds))
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<fs::File>, CliError> {
    Ok(BufWriter::new(fs::File::create(dir.join(name))?))
}

fn render_cmd(a: RenderArgs) -> Result<(), CliError> {
    let (splats, cals, ds) = load_pair(&a.checkpoint, &a.data)?;
    let i = ds
        .view_index(&a.view)
        .or_else(|| a.view.parse::<usize>().ok().filter(|&i| i < ds.views.len()))
        .ok_or_else(|| CliError::Usage(format!("--view {}: no such view", a.view)))?;
    let mut view = ds.views[i].clone();
    view.calibration = cals[i];
    let b = render(&splats, &view, RenderOptions::default());
    fs::create_dir_all(&a.out)?;
    write_png_gray(create(&a.out, "intensity.png")?, &b.intensity, true)?;
    write_png_gray(create(&a.out, "depth.png")?, &b.depth_normalized(), true)?;
    write_png_gray(create(&a.out, "accumulation.png")?, &b.accumulation, true)?;
    write_png_normals(create(&a.out, "normal.png")?, b.width, b.height, &b.normal, true)?;
    write_raw_f32(create(&a.out, "depth.f32")?, b.width, b.height, 1, &b.depth.data)?;
    if let Some(alb) = &b.albedo {
        let a_map = photosplat::image::Image::from_fn(b.width, b.height, |c, r| {
            let acc = b.accumulation.get(c, r);
            if acc > 0.0 { alb.get(c, r) / acc } else { 0.0 }
        });
        write_png_gray(create(&a.out, "albedo.png")?, &a_map, true)?;
    }
    info!("rendered view {} to {}", view.name, a.out.display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<(), CliError> {
    let (splats, cals, ds) = load_pair(&a.checkpoint, &a.data)?;
    let lpips = match &a.lpips {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Validation(format!("--lpips {}: {e}", p.display())))?;
            Some(serde_json::from_str::<LpipsSidecar>(&text).map_err(|e| CliError::Validation(format!("--lpips {}: {e}", p.display())))?)
        }
        None => None,
    };
    if let Some(v) = a.voxel {
        if !(v > 0.0 && v.is_finite()) {
            return Err(CliError::Usage(format!("--voxel {v}: must be positive")));
        }
    }
    let settings = MeshSettings { voxel: a.voxel, ..Default::default() };
    let report = evaluate(&splats, &cals, &ds, a.mesh.then_some(&settings), lpips)?;
    fs::create_dir_all(&a.out)?;
    serde_json::to_writer_pretty(create(&a.out, "metrics.json")?, &report)?;
    fs::write(a.out.join("metrics.csv"), report.to_csv())?;
    print!("{}", report.to_csv());
    Ok(())
}

fn mesh_cmd(a: MeshArgs) -> Result<(), CliError> {
    let (splats, _, ds) = load_pair(&a.checkpoint, &a.data)?;
    let voxel = match a.voxel {
        Some(v) if v > 0.0 && v.is_finite() => v,
        Some(v) => return Err(CliError::Usage(format!("--voxel {v}: must be positive"))),
        None => default_voxel(&splats).ok_or_else(|| CliError::Validation("checkpoint has no splats".into()))?,
    };
    if !(a.trunc_voxels > 0.0) {
        return Err(CliError::Usage(format!("--trunc-voxels {}: must be positive", a.trunc_voxels)));
    }
    let mesh = match &ds.truth_points {
        Some(t) => {
            let settings = MeshSettings { voxel: Some(voxel), trunc_voxels: a.trunc_voxels, ..Default::default() };
            let (mesh, d) = mesh_hausdorff(&splats, &ds, t, &settings)?;
            info!("normalized Hausdorff distance {d:.5}");
            mesh
        }
        None => extract_mesh(&splats, &ds.views, voxel, a.trunc_voxels * voxel)?,
    };
    fs::create_dir_all(&a.out)?;
    mesh.write_ply(create(&a.out, "mesh.ply")?)?;
    mesh.write_obj(create(&a.out, "mesh.obj")?)?;
    info!("mesh with {} vertices and {} faces", mesh.vertices.len(), mesh.faces.len());
    Ok(())
}

fn fdcheck(a: FdcheckArgs) -> Result<(), CliError> {
    if a.splats == 0 || a.size < 4 {
        return Err(CliError::Usage("--splats must be positive and --size at least 4".into()));
    }
    if !(a.step > 0.0) || !(a.tol > 0.0) {
        return Err(CliError::Usage("--step and --tol must be positive".into()));
    }
    let cfg = LossConfig { lambda: a.lambda, beta: a.beta, ..Default::default() };
    cfg.validate()?;
    let (splats, view) = random_splat_scene(a.model, a.splats, a.size, a.size, a.seed);
    let report = fd_check(&splats, &view, &cfg, a.step)?;
    print!("{report}");
    let worst = report.max_rel_error();
    if report.passes(a.tol) {
        println!("PASS max relative error {worst:.3e} < {:.1e}", a.tol);
        Ok(())
    } else {
        println!("FAIL max relative error {worst:.3e} >= {:.1e}", a.tol);
        Err(CliError::Runtime("gradient check failed".into()))
    }
}
