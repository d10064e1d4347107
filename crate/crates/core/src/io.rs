//! On-disk dataset layout, configuration files and checkpoints.
//!
//! A dataset directory holds:
//!
//! ```text
//! cameras.txt          one line per view (see below)
//! images/<name>.png    8- or 16-bit grayscale (or replicated RGB) image
//! init_points.ply      optional initial point cloud
//! gt/normal_<name>.png optional ground-truth world normals, (n + 1) / 2
//! gt/albedo_<name>.png optional ground-truth albedo
//! gt/mask_<name>.png   optional validity mask
//! gt/points.ply        optional ground-truth surface points
//! ```
//!
//! Each `cameras.txt` line is
//! `name fx fy cx cy r00 r01 r02 r10 r11 r12 r20 r21 r22 t0 t1 t2 s0 s1 s2 split`
//! where `R, t` map world to camera coordinates, `s` is the unit vector from
//! the scene origin toward the sun and `split` is `train` or `test`.
//! Lines starting with `#` are comments, except `#! key=value ...` which
//! carries scene metadata.

use std::fmt;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;
use thiserror::Error;

use crate::geometry::{orthonormality_error, orthonormalize, CameraModel, Mat3, Vec3};
use crate::image::{read_png_gray, read_png_samples, write_png_gray, write_png_normals, Image, ImageError};
use crate::ply::{read_ply, write_ply, PlyData, PlyError};
use crate::rasterizer::ViewContext;
use crate::reflectance::{ImageCalibration, SunSpec};
use crate::splats::{SplatError, SplatSet};
use crate::trainer::TrainConfig;

/// Rotations further than this from orthonormal are rejected.
pub const ORTHONORMAL_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("missing {0}")]
    MissingFile(String),
    #[error("malformed pose on line {line}: {reason}")]
    MalformedPose { line: usize, reason: String },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Ply(#[from] PlyError),
    #[error(transparent)]
    Splat(#[from] SplatError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split tag '{s}'")),
        }
    }
}

/// Ground-truth maps for one view.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewTruth {
    /// World-frame normals, row-major.
    pub normal: Vec<Vec3>,
    pub albedo: Image,
    /// 1 where the ground truth is defined, 0 elsewhere.
    pub mask: Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneDataset {
    pub name: String,
    pub units: String,
    pub views: Vec<ViewContext>,
    pub splits: Vec<Split>,
    pub init_points: Option<Vec<Vec3>>,
    /// Per-view ground truth; empty when the dataset carries none.
    pub truth: Vec<Option<ViewTruth>>,
    pub truth_points: Option<Vec<Vec3>>,
}

impl SceneDataset {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.views.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        self.indices(Split::Train)
    }

    pub fn test_indices(&self) -> Vec<usize> {
        self.indices(Split::Test)
    }

    pub fn view_truth(&self, i: usize) -> Option<&ViewTruth> {
        self.truth.get(i).and_then(|t| t.as_ref())
    }

    pub fn view_index(&self, name: &str) -> Option<usize> {
        self.views.iter().position(|v| v.name == name)
    }

    /// Axis-aligned box around the least-squares intersection of all
    /// boresights, sized by the mean field of view at the mean distance.
    pub fn view_region(&self) -> (Vec3, Vec3) {
        let mut a = Mat3::zeros();
        let mut b = Vec3::zeros();
        for v in &self.views {
            let d = v.camera.boresight();
            let p = Mat3::identity() - d * d.transpose();
            a += p;
            b += p * v.camera.center();
        }
        let target = a.try_inverse().map(|inv| inv * b).unwrap_or_else(Vec3::zeros);
        let n = self.views.len().max(1) as f64;
        let half = self
            .views
            .iter()
            .map(|v| {
                let c = &v.camera;
                let dist = (c.center() - target).norm();
                dist * (c.width as f64 / (2.0 * c.fx)).max(c.height as f64 / (2.0 * c.fy))
            })
            .sum::<f64>()
            / n;
        let h = Vec3::from_element(half.max(1e-6));
        (target - h, target + h)
    }

    pub fn check_invariants(&self) -> Result<(), IoError> {
        if self.splits.len() != self.views.len() {
            return Err(IoError::DimensionMismatch(format!(
                "{} split labels for {} views",
                self.splits.len(),
                self.views.len()
            )));
        }
        for v in &self.views {
            let (w, h) = (v.camera.width, v.camera.height);
            if v.image.width != w || v.image.height != h {
                return Err(IoError::DimensionMismatch(format!(
                    "view {}: image is {}x{} but camera is {w}x{h}",
                    v.name, v.image.width, v.image.height
                )));
            }
        }
        for (i, t) in self.truth.iter().enumerate() {
            if let Some(t) = t {
                let v = &self.views[i];
                let n = v.camera.width * v.camera.height;
                if t.normal.len() != n || t.albedo.len() != n || t.mask.len() != n {
                    return Err(IoError::DimensionMismatch(format!("ground truth of view {} has the wrong size", v.name)));
                }
            }
        }
        Ok(())
    }
}

fn image_path(dir: &Path, name: &str) -> PathBuf {
    dir.join("images").join(format!("{name}.png"))
}

fn open_existing(path: &Path, what: &str) -> Result<BufReader<fs::File>, IoError> {
    match fs::File::open(path) {
        Ok(f) => Ok(BufReader::new(f)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(IoError::MissingFile(format!("{what} ({})", path.display())))
        }
        Err(e) => Err(e.into()),
    }
}

struct PoseLine {
    name: String,
    focal: (f64, f64),
    principal: (f64, f64),
    rotation: Mat3,
    translation: Vec3,
    sun: Vec3,
    split: Split,
}

fn parse_pose_line(line_no: usize, line: &str) -> Result<PoseLine, IoError> {
    let bad = |reason: String| IoError::MalformedPose { line: line_no, reason };
    let tok: Vec<&str> = line.split_whitespace().collect();
    let name = tok[0].to_string();
    if tok.len() == 18 {
        return Err(IoError::MissingFile(format!("sun vector for view {name}")));
    }
    if tok.len() != 21 {
        return Err(bad(format!("expected 21 fields, found {}", tok.len())));
    }
    let nums: Vec<f64> = tok[1..20]
        .iter()
        .map(|t| t.parse::<f64>().map_err(|_| bad(format!("'{t}' is not a number"))))
        .collect::<Result<_, _>>()?;
    if nums.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite value".into()));
    }
    let split = tok[20].parse::<Split>().map_err(bad)?;
    let mut rotation = Mat3::from_row_slice(&nums[4..13]);
    let err = orthonormality_error(&rotation);
    if err > ORTHONORMAL_TOLERANCE || rotation.determinant() <= 0.0 {
        return Err(bad(format!("rotation is not orthonormal (error {err:.3e})")));
    }
    if err > 1e-12 {
        warn!("view {name}: re-orthonormalizing rotation (error {err:.3e})");
        rotation = orthonormalize(&rotation);
    }
    Ok(PoseLine {
        name,
        focal: (nums[0], nums[1]),
        principal: (nums[2], nums[3]),
        rotation,
        translation: Vec3::new(nums[13], nums[14], nums[15]),
        sun: Vec3::new(nums[16], nums[17], nums[18]),
        split,
    })
}

fn load_normals(path: &Path, w: usize, h: usize, what: &str) -> Result<Vec<Vec3>, IoError> {
    let d = read_png_samples(open_existing(path, what)?)?;
    if d.width != w || d.height != h || d.channels < 3 {
        return Err(IoError::DimensionMismatch(format!("{what} must be a {w}x{h} RGB image")));
    }
    Ok(d.samples
        .chunks_exact(d.channels)
        .map(|c| Vec3::new(2.0 * c[0] - 1.0, 2.0 * c[1] - 1.0, 2.0 * c[2] - 1.0))
        .collect())
}

fn load_gray(path: &Path, w: usize, h: usize, what: &str) -> Result<Image, IoError> {
    let img = read_png_gray(open_existing(path, what)?)?;
    if img.width != w || img.height != h {
        return Err(IoError::DimensionMismatch(format!(
            "{what} is {}x{} but the view is {w}x{h}",
            img.width, img.height
        )));
    }
    Ok(img)
}

pub fn read_points(path: &Path) -> Result<Vec<Vec3>, IoError> {
    let f = open_existing(path, "point cloud")?;
    Ok(read_ply(f)?.points()?)
}

pub fn write_points(path: &Path, points: &[Vec3]) -> Result<(), IoError> {
    let f = BufWriter::new(fs::File::create(path)?);
    write_ply(f, &PlyData::from_points(points))?;
    Ok(())
}

/// Reads a dataset directory and validates it.
pub fn load_dataset(dir: &Path) -> Result<SceneDataset, IoError> {
    let cams = dir.join("cameras.txt");
    let text = match fs::read_to_string(&cams) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(IoError::MissingFile(format!("camera file ({})", cams.display())))
        }
        Err(e) => return Err(e.into()),
    };
    let mut name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let mut units = String::from("m");
    let mut poses = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if let Some(meta) = t.strip_prefix("#!") {
            for kv in meta.split_whitespace() {
                match kv.split_once('=') {
                    Some(("name", v)) => name = v.to_string(),
                    Some(("units", v)) => units = v.to_string(),
                    _ => {}
                }
            }
            continue;
        }
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        poses.push(parse_pose_line(i + 1, t)?);
    }
    if poses.is_empty() {
        return Err(IoError::MissingFile(format!("views in {}", cams.display())));
    }

    let gt_dir = dir.join("gt");
    let has_gt = gt_dir.is_dir();
    let mut views = Vec::with_capacity(poses.len());
    let mut splits = Vec::with_capacity(poses.len());
    let mut truth = Vec::new();
    for p in poses {
        let image = read_png_gray(open_existing(&image_path(dir, &p.name), &format!("image for view {}", p.name))?)?;
        let camera = CameraModel::new(p.focal, p.principal, p.rotation, p.translation, image.width, image.height)
            .map_err(|e| IoError::DimensionMismatch(format!("view {}: {e}", p.name)))?;
        let sun = SunSpec::from_direction(p.sun)
            .ok_or_else(|| IoError::MalformedPose { line: 0, reason: format!("view {}: zero sun vector", p.name) })?;
        if has_gt {
            let (w, h) = (image.width, image.height);
            let normal_path = gt_dir.join(format!("normal_{}.png", p.name));
            truth.push(if normal_path.exists() {
                Some(ViewTruth {
                    normal: load_normals(&normal_path, w, h, &format!("normal map for view {}", p.name))?,
                    albedo: load_gray(&gt_dir.join(format!("albedo_{}.png", p.name)), w, h, &format!("albedo map for view {}", p.name))?,
                    mask: load_gray(&gt_dir.join(format!("mask_{}.png", p.name)), w, h, &format!("mask for view {}", p.name))?,
                })
            } else {
                None
            });
        }
        splits.push(p.split);
        views.push(ViewContext { name: p.name, camera, sun, calibration: ImageCalibration::default(), image });
    }
    let init_path = dir.join("init_points.ply");
    let init_points = if init_path.exists() { Some(read_points(&init_path)?) } else { None };
    let gt_points_path = gt_dir.join("points.ply");
    let truth_points = if gt_points_path.exists() { Some(read_points(&gt_points_path)?) } else { None };
    let ds = SceneDataset { name, units, views, splits, init_points, truth, truth_points };
    ds.check_invariants()?;
    Ok(ds)
}

fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes a dataset directory. Images are stored as 16-bit PNG, so images on
/// the 16-bit grid survive a round trip bit-exactly.
pub fn save_dataset(dir: &Path, ds: &SceneDataset) -> Result<(), IoError> {
    ds.check_invariants()?;
    fs::create_dir_all(dir.join("images"))?;
    let mut cams = BufWriter::new(fs::File::create(dir.join("cameras.txt"))?);
    writeln!(cams, "# name fx fy cx cy r00 r01 r02 r10 r11 r12 r20 r21 r22 t0 t1 t2 s0 s1 s2 split")?;
    writeln!(cams, "#! name={} units={}", ds.name.replace(char::is_whitespace, "_"), ds.units)?;
    for (v, split) in ds.views.iter().zip(&ds.splits) {
        let c = &v.camera;
        let mut fields = vec![v.name.clone()];
        fields.extend([c.fx, c.fy, c.cx, c.cy].map(fmt17));
        for r in 0..3 {
            for k in 0..3 {
                fields.push(fmt17(c.rotation[(r, k)]));
            }
        }
        fields.extend(c.translation.iter().map(|&x| fmt17(x)));
        fields.extend(v.sun.direction().iter().map(|&x| fmt17(x)));
        fields.push(split.to_string());
        writeln!(cams, "{}", fields.join(" "))?;
        let f = BufWriter::new(fs::File::create(image_path(dir, &v.name))?);
        write_png_gray(f, &v.image, true)?;
    }
    cams.flush()?;
    if let Some(p) = &ds.init_points {
        write_points(&dir.join("init_points.ply"), p)?;
    }
    let any_truth = ds.truth.iter().any(|t| t.is_some()) || ds.truth_points.is_some();
    if any_truth {
        let gt = dir.join("gt");
        fs::create_dir_all(&gt)?;
        for (v, t) in ds.views.iter().zip(&ds.truth) {
            let Some(t) = t else { continue };
            let (w, h) = (v.camera.width, v.camera.height);
            write_png_normals(BufWriter::new(fs::File::create(gt.join(format!("normal_{}.png", v.name)))?), w, h, &t.normal, true)?;
            write_png_gray(BufWriter::new(fs::File::create(gt.join(format!("albedo_{}.png", v.name)))?), &t.albedo, true)?;
            write_png_gray(BufWriter::new(fs::File::create(gt.join(format!("mask_{}.png", v.name)))?), &t.mask, false)?;
        }
        if let Some(p) = &ds.truth_points {
            write_points(&gt.join("points.ply"), p)?;
        }
    }
    Ok(())
}

/// Rounds a value to the nearest 16-bit PNG code.
pub fn quantize16(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 65535.0).round() / 65535.0
}

/// Rounds a normal to what a 16-bit `(n + 1) / 2` PNG stores.
pub fn quantize_normal16(n: &Vec3) -> Vec3 {
    n.map(|c| 2.0 * quantize16((c + 1.0) / 2.0) - 1.0)
}

/// Rounds each coordinate to `f32`, the PLY storage precision.
pub fn quantize_point(p: &Vec3) -> Vec3 {
    p.map(|c| c as f32 as f64)
}

pub fn load_config(path: &Path) -> Result<TrainConfig, IoError> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => IoError::MissingFile(format!("config file ({})", path.display())),
        _ => e.into(),
    })?;
    let cfg: TrainConfig = toml::from_str(&text).map_err(|e| IoError::Config(e.to_string()))?;
    cfg.validate().map_err(|e| IoError::Config(e.to_string()))?;
    Ok(cfg)
}

pub fn load_checkpoint(path: &Path) -> Result<(SplatSet, Vec<ImageCalibration>), IoError> {
    let f = open_existing(path, "checkpoint")?;
    Ok(SplatSet::read_checkpoint(f)?)
}
