//! Image and geometry metrics, TSDF mesh extraction and ICP alignment.

use std::collections::HashMap;
use std::io::Write;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Mat3, Vec3};
use crate::image::Image;
use crate::io::{SceneDataset, Split};
use crate::rasterizer::{map_indices, render, RenderOptions, ViewContext};
use crate::reflectance::ImageCalibration;
use crate::spatial::PointGrid;
use crate::splats::{bounding_box, SplatSet};
use crate::trainer::{ssim, LossConfig};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("inputs differ in size: {0}")]
    ShapeMismatch(String),
    #[error("no pixels inside the validity mask")]
    EmptyMask,
    #[error("prediction is constant over the mask; affine fit is degenerate")]
    DegenerateFit,
    #[error("no depth samples were integrated")]
    EmptyVolume,
    #[error("point set is empty")]
    EmptySet,
    #[error("points are collinear or coincident")]
    DegenerateGeometry,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Pixels are valid for normal and albedo comparison when both the rendered
/// accumulation and the ground-truth mask exceed this.
pub const MASK_THRESHOLD: f64 = 0.5;

/// Peak signal-to-noise ratio in dB, or infinite for identical inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    Finite(f64),
    Infinite,
}

impl Psnr {
    pub fn db(self) -> Option<f64> {
        match self {
            Psnr::Finite(v) => Some(v),
            Psnr::Infinite => None,
        }
    }
}

pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<Psnr, EvalError> {
    if !a.same_shape(b) || a.is_empty() {
        return Err(EvalError::ShapeMismatch(format!("{}x{} vs {}x{}", a.width, a.height, b.width, b.height)));
    }
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    Ok(if mse == 0.0 { Psnr::Infinite } else { Psnr::Finite(10.0 * (peak * peak / mse).log10()) })
}

/// Mean angle in degrees between normals over the mask. Both inputs are
/// renormalized before comparison.
pub fn normal_error(pred: &[Vec3], truth: &[Vec3], mask: &[bool]) -> Result<f64, EvalError> {
    if pred.len() != truth.len() || pred.len() != mask.len() {
        return Err(EvalError::ShapeMismatch(format!("{} / {} / {}", pred.len(), truth.len(), mask.len())));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..pred.len() {
        if !mask[i] {
            continue;
        }
        let c = pred[i].normalize().dot(&truth[i].normalize()).clamp(-1.0, 1.0);
        sum += c.acos().to_degrees();
        n += 1;
    }
    if n == 0 {
        return Err(EvalError::EmptyMask);
    }
    Ok(sum / n as f64)
}

/// Least-squares `(scale, offset)` mapping `pred` onto `truth` over the mask.
pub fn affine_fit(pred: &[f64], truth: &[f64], mask: &[bool]) -> Result<(f64, f64), EvalError> {
    if pred.len() != truth.len() || pred.len() != mask.len() {
        return Err(EvalError::ShapeMismatch(format!("{} / {} / {}", pred.len(), truth.len(), mask.len())));
    }
    let idx: Vec<usize> = (0..pred.len()).filter(|&i| mask[i]).collect();
    if idx.is_empty() {
        return Err(EvalError::EmptyMask);
    }
    let n = idx.len() as f64;
    let mx = idx.iter().map(|&i| pred[i]).sum::<f64>() / n;
    let my = idx.iter().map(|&i| truth[i]).sum::<f64>() / n;
    let sxx: f64 = idx.iter().map(|&i| (pred[i] - mx).powi(2)).sum();
    let sxy: f64 = idx.iter().map(|&i| (pred[i] - mx) * (truth[i] - my)).sum();
    if !(sxx > 1e-24 * n * (1.0 + mx * mx)) {
        return Err(EvalError::DegenerateFit);
    }
    let scale = sxy / sxx;
    Ok((scale, my - scale * mx))
}

/// Mean relative albedo error `|a − fit(ã)| / a` after an affine fit.
pub fn albedo_error(pred: &[f64], truth: &[f64], mask: &[bool]) -> Result<f64, EvalError> {
    let (s, o) = affine_fit(pred, truth, mask)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..pred.len() {
        if mask[i] {
            sum += (truth[i] - (s * pred[i] + o)).abs() / truth[i];
            n += 1;
        }
    }
    Ok(sum / n as f64)
}

/// Directed Hausdorff distance `sup_a inf_b |a − b|`.
pub fn directed_hausdorff(a: &[Vec3], b: &[Vec3]) -> Result<f64, EvalError> {
    if a.is_empty() || b.is_empty() {
        return Err(EvalError::EmptySet);
    }
    let grid = PointGrid::new(b);
    let d = map_indices(a.len(), true, |i| grid.nearest(&a[i]).map(|(_, d)| d).unwrap_or(f64::INFINITY));
    Ok(d.into_iter().fold(0.0, f64::max))
}

pub fn hausdorff(a: &[Vec3], b: &[Vec3]) -> Result<f64, EvalError> {
    Ok(directed_hausdorff(a, b)?.max(directed_hausdorff(b, a)?))
}

/// Symmetric Hausdorff distance divided by the bounding-box diagonal of
/// `truth`.
pub fn hausdorff_normalized(pred: &[Vec3], truth: &[Vec3]) -> Result<f64, EvalError> {
    let d = hausdorff(pred, truth)?;
    let (lo, hi) = bounding_box(truth).ok_or(EvalError::EmptySet)?;
    let diag = (hi - lo).norm();
    if !(diag > 0.0) {
        return Err(EvalError::DegenerateGeometry);
    }
    Ok(d / diag)
}

/// `x ↦ rotation · x + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { rotation: Mat3::identity(), translation: Vec3::zeros() }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self { rotation: self.rotation * other.rotation, translation: self.rotation * other.translation + self.translation }
    }
}

fn centroid(p: &[Vec3]) -> Vec3 {
    p.iter().fold(Vec3::zeros(), |a, x| a + x) / p.len() as f64
}

fn check_spread(p: &[Vec3]) -> Result<(), EvalError> {
    if p.len() < 3 {
        return Err(EvalError::DegenerateGeometry);
    }
    let c = centroid(p);
    let cov = p.iter().fold(Mat3::zeros(), |a, x| a + (x - c) * (x - c).transpose());
    let sv = cov.singular_values();
    let mut s: Vec<f64> = sv.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    if !(s[0] > 0.0) || s[1] <= 1e-12 * s[0] {
        return Err(EvalError::DegenerateGeometry);
    }
    Ok(())
}

/// Best rigid motion taking `src[i]` to `dst[i]` in the least-squares sense.
pub fn kabsch(src: &[Vec3], dst: &[Vec3]) -> RigidTransform {
    let (cs, cd) = (centroid(src), centroid(dst));
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - cs) * (d - cd).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let v = vt.transpose();
    let det = (v * u.transpose()).determinant();
    let fix = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, det.signum()));
    let rotation = v * fix * u.transpose();
    RigidTransform { rotation, translation: cd - rotation * cs }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpResult {
    pub transform: RigidTransform,
    pub rms: f64,
    pub iterations: usize,
}

/// Point-to-point ICP aligning `source` onto `target`, starting from the
/// centroid offset with identity rotation.
pub fn align_icp(source: &[Vec3], target: &[Vec3], max_iters: usize, tol: f64) -> Result<IcpResult, EvalError> {
    if source.is_empty() || target.is_empty() {
        return Err(EvalError::EmptySet);
    }
    check_spread(source)?;
    check_spread(target)?;
    let grid = PointGrid::new(target);
    let mut tf = RigidTransform { rotation: Mat3::identity(), translation: centroid(target) - centroid(source) };
    let mut prev = f64::INFINITY;
    let mut rms = f64::INFINITY;
    let mut iterations = 0;
    for it in 0..max_iters {
        iterations = it + 1;
        let moved: Vec<Vec3> = source.iter().map(|p| tf.apply(p)).collect();
        let matches = map_indices(moved.len(), true, |i| grid.nearest(&moved[i]).expect("target is non-empty"));
        rms = (matches.iter().map(|(_, d)| d * d).sum::<f64>() / moved.len() as f64).sqrt();
        let dst: Vec<Vec3> = matches.iter().map(|(j, _)| target[*j]).collect();
        let step = kabsch(&moved, &dst);
        tf = step.compose(&tf);
        if (prev - rms).abs() < tol {
            break;
        }
        prev = rms;
    }
    let moved: Vec<Vec3> = source.iter().map(|p| tf.apply(p)).collect();
    let final_rms = (moved.iter().map(|p| grid.nearest(p).unwrap().1.powi(2)).sum::<f64>() / moved.len() as f64).sqrt();
    Ok(IcpResult { transform: tf, rms: final_rms.min(rms), iterations })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
}

impl Mesh {
    pub fn write_ply<W: Write>(&self, w: W) -> Result<(), crate::ply::PlyError> {
        let mut data = crate::ply::PlyData::from_points(&self.vertices);
        data.faces = self.faces.clone();
        crate::ply::write_ply(w, &data)
    }

    pub fn write_obj<W: Write>(&self, w: W) -> std::io::Result<()> {
        crate::ply::write_obj(w, &self.vertices, &self.faces)
    }
}

/// Dense signed-distance volume with per-voxel weights.
#[derive(Debug, Clone)]
pub struct TsdfVolume {
    pub origin: Vec3,
    pub voxel: f64,
    pub dims: [usize; 3],
    pub sdf: Vec<f32>,
    pub weight: Vec<f32>,
}

impl TsdfVolume {
    fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    fn position(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.origin + Vec3::new(i as f64, j as f64, k as f64) * self.voxel
    }
}

/// Largest voxel count [`extract_mesh`] will allocate.
pub const MAX_VOXELS: usize = 64 << 20;

/// Default voxel size: scene bounding-box diagonal / 256.
pub fn default_voxel(splats: &SplatSet) -> Option<f64> {
    splats.bounds().map(|(lo, hi)| (hi - lo).norm() / 256.0)
}

/// Fuses depth maps rendered from `views` into a TSDF over the splat
/// bounding box and extracts its zero level set.
pub fn extract_mesh(splats: &SplatSet, views: &[ViewContext], voxel: f64, trunc: f64) -> Result<Mesh, EvalError> {
    let vol = integrate_tsdf(splats, views, voxel, trunc)?;
    let mesh = marching_tetrahedra(&vol);
    if mesh.faces.is_empty() {
        return Err(EvalError::EmptyVolume);
    }
    Ok(mesh)
}

/// Depth and accumulation at a continuous pixel position. Depth is
/// interpolated bilinearly between pixel centers when all four neighbors are
/// covered and agree to within `spread`; otherwise the containing pixel is
/// used as is. Returns `None` for uncovered pixels.
fn sample_depth(depth: &Image, acc: &Image, x: f64, y: f64, spread: f64) -> Option<(f64, f64)> {
    let (w, h) = (depth.width, depth.height);
    let valid = |c: usize, r: usize| {
        let (a, d) = (acc.get(c, r), depth.get(c, r));
        (a > MASK_THRESHOLD && d >= 0.0).then_some((d, a))
    };
    let nearest = valid(x as usize, y as usize)?;
    let (u, v) = (x - 0.5, y - 0.5);
    if u < 0.0 || v < 0.0 || u >= (w - 1) as f64 || v >= (h - 1) as f64 {
        return Some(nearest);
    }
    let (c0, r0) = (u as usize, v as usize);
    let (fu, fv) = (u - c0 as f64, v - r0 as f64);
    let q = match [valid(c0, r0), valid(c0 + 1, r0), valid(c0, r0 + 1), valid(c0 + 1, r0 + 1)] {
        [Some(a), Some(b), Some(c), Some(d)] => [a, b, c, d],
        _ => return Some(nearest),
    };
    let (lo, hi) = q.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &(d, _)| (l.min(d), h.max(d)));
    if hi - lo > spread {
        return Some(nearest);
    }
    let mix = |f: fn(&(f64, f64)) -> f64| {
        (f(&q[0]) * (1.0 - fu) + f(&q[1]) * fu) * (1.0 - fv) + (f(&q[2]) * (1.0 - fu) + f(&q[3]) * fu) * fv
    };
    Some((mix(|p| p.0), mix(|p| p.1)))
}

pub fn integrate_tsdf(splats: &SplatSet, views: &[ViewContext], voxel: f64, trunc: f64) -> Result<TsdfVolume, EvalError> {
    if views.is_empty() {
        return Err(EvalError::InvalidArgument("at least one view is required".into()));
    }
    if !(voxel > 0.0) || !(trunc >= 2.0 * voxel) {
        return Err(EvalError::InvalidArgument(format!("voxel {voxel} and truncation {trunc} must satisfy trunc ≥ 2·voxel > 0")));
    }
    let (lo, hi) = splats.bounds().ok_or(EvalError::EmptyVolume)?;
    let max_scale = (0..splats.len()).map(|k| splats.scale(k).max()).fold(0.0, f64::max);
    let pad = Vec3::from_element(3.0 * max_scale + trunc + voxel);
    let (lo, hi) = (lo - pad, hi + pad);
    let dims = [0, 1, 2].map(|a| ((hi[a] - lo[a]) / voxel).ceil() as usize + 1);
    let total = dims[0] * dims[1] * dims[2];
    if total > MAX_VOXELS {
        return Err(EvalError::InvalidArgument(format!("volume of {total} voxels exceeds the {MAX_VOXELS} limit")));
    }
    let mut vol = TsdfVolume { origin: lo, voxel, dims, sdf: vec![0.0; total], weight: vec![0.0; total] };
    let mut any = false;
    for view in views {
        let b = render(splats, view, RenderOptions::default());
        let cam = &view.camera;
        let slab = dims[0] * dims[1];
        let updates = map_indices(dims[2], true, |k| {
            let mut out = Vec::new();
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let p = vol.position(i, j, k);
                    let xc = cam.to_camera(&p);
                    if xc.z <= 1e-9 {
                        continue;
                    }
                    let px = cam.pixel_of_camera_point(&xc);
                    if !(px.x >= 0.0 && px.y >= 0.0 && px.x < cam.width as f64 && px.y < cam.height as f64) {
                        continue;
                    }
                    let Some((d, a)) = sample_depth(&b.median_depth, &b.accumulation, px.x, px.y, trunc) else {
                        continue;
                    };
                    let sdf = d - xc.z;
                    if sdf < -trunc {
                        continue;
                    }
                    out.push((j * dims[0] + i, (sdf / trunc).min(1.0), a));
                }
            }
            out
        });
        for (k, ups) in updates.into_iter().enumerate() {
            for (local, s, a) in ups {
                let idx = k * slab + local;
                let w0 = vol.weight[idx] as f64;
                let w1 = w0 + a;
                vol.sdf[idx] = ((vol.sdf[idx] as f64 * w0 + s * a) / w1) as f32;
                vol.weight[idx] = w1 as f32;
                any = true;
            }
        }
    }
    if !any {
        return Err(EvalError::EmptyVolume);
    }
    Ok(vol)
}

/// The six tetrahedra of a cube sharing the main diagonal `0–6`, with cube
/// corners numbered `i + 2j + 4k` as bits `(i, j, k)`.
const TETS: [[usize; 4]; 6] = [[0, 1, 3, 7], [0, 3, 2, 7], [0, 2, 6, 7], [0, 6, 4, 7], [0, 4, 5, 7], [0, 5, 1, 7]];

/// Zero level set of the weighted part of the volume, triangulated per
/// tetrahedron with vertices shared along grid edges.
pub fn marching_tetrahedra(vol: &TsdfVolume) -> Mesh {
    let [nx, ny, nz] = vol.dims;
    let mut mesh = Mesh::default();
    let mut edge_vertex: HashMap<(usize, usize), u32> = HashMap::new();
    if nx < 2 || ny < 2 || nz < 2 {
        return mesh;
    }
    for k in 0..nz - 1 {
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let corners: [usize; 8] = std::array::from_fn(|c| vol.index(i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1)));
                if corners.iter().any(|&c| vol.weight[c] <= 0.0) {
                    continue;
                }
                for tet in TETS {
                    let ids = tet.map(|c| corners[c]);
                    polygonize_tet(vol, ids, &mut mesh, &mut edge_vertex);
                }
            }
        }
    }
    mesh
}

fn polygonize_tet(vol: &TsdfVolume, ids: [usize; 4], mesh: &mut Mesh, cache: &mut HashMap<(usize, usize), u32>) {
    let val = ids.map(|i| vol.sdf[i] as f64);
    let inside: Vec<usize> = (0..4).filter(|&c| val[c] < 0.0).collect();
    let outside: Vec<usize> = (0..4).filter(|&c| val[c] >= 0.0).collect();
    if inside.is_empty() || outside.is_empty() {
        return;
    }
    let mut vertex = |a: usize, b: usize| -> u32 {
        let key = (ids[a].min(ids[b]), ids[a].max(ids[b]));
        *cache.entry(key).or_insert_with(|| {
            let pos = |idx: usize| {
                let i = idx % vol.dims[0];
                let j = (idx / vol.dims[0]) % vol.dims[1];
                let k = idx / (vol.dims[0] * vol.dims[1]);
                vol.position(i, j, k)
            };
            let (pa, pb, va, vb) = if ids[a] < ids[b] { (pos(ids[a]), pos(ids[b]), val[a], val[b]) } else { (pos(ids[b]), pos(ids[a]), val[b], val[a]) };
            let t = va / (va - vb);
            mesh.vertices.push(pa + (pb - pa) * t);
            (mesh.vertices.len() - 1) as u32
        })
    };
    match inside.len() {
        1 | 3 => {
            let (lone, others) = if inside.len() == 1 { (inside[0], outside) } else { (outside[0], inside) };
            let v: Vec<u32> = others.iter().map(|&o| vertex(lone, o)).collect();
            mesh.faces.push([v[0], v[1], v[2]]);
        }
        _ => {
            let (a, b, c, d) = (inside[0], inside[1], outside[0], outside[1]);
            let v0 = vertex(a, c);
            let v1 = vertex(a, d);
            let v2 = vertex(b, d);
            let v3 = vertex(b, c);
            mesh.faces.push([v0, v1, v2]);
            mesh.faces.push([v0, v2, v3]);
        }
    }
}

/// Metrics for one split. Albedo and normal fields are `None` when the
/// model or dataset cannot provide them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub views: usize,
    /// Mean per-view PSNR over views with a finite value.
    pub psnr_db: Option<f64>,
    /// True when at least one view reproduced its image exactly.
    pub psnr_infinite: bool,
    pub ssim: Option<f64>,
    pub normal_error_deg: Option<f64>,
    pub albedo_error: Option<f64>,
    pub valid_pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model: String,
    pub splat_count: usize,
    pub train: SplitMetrics,
    pub test: SplitMetrics,
    /// Normalized Hausdorff distance of the extracted mesh, when computed.
    pub hausdorff: Option<f64>,
    /// Precomputed LPIPS values read from a sidecar file, if one was given.
    pub lpips: Option<LpipsSidecar>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LpipsSidecar {
    pub train: Option<f64>,
    pub test: Option<f64>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

impl MetricReport {
    /// Two-column `metric,train,test` table; absent values are empty cells.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,train,test\n");
        let rows: [(&str, Option<f64>, Option<f64>); 4] = [
            ("psnr_db", self.train.psnr_db, self.test.psnr_db),
            ("ssim", self.train.ssim, self.test.ssim),
            ("normal_error_deg", self.train.normal_error_deg, self.test.normal_error_deg),
            ("albedo_error", self.train.albedo_error, self.test.albedo_error),
        ];
        for (k, a, b) in rows {
            s += &format!("{k},{},{}\n", fmt_opt(a), fmt_opt(b));
        }
        s += &format!("psnr_infinite,{},{}\n", self.train.psnr_infinite, self.test.psnr_infinite);
        s += &format!("valid_pixels,{},{}\n", self.train.valid_pixels, self.test.valid_pixels);
        s += &format!("views,{},{}\n", self.train.views, self.test.views);
        if let Some(l) = self.lpips {
            s += &format!("lpips,{},{}\n", fmt_opt(l.train), fmt_opt(l.test));
        }
        s += &format!("hausdorff,{},\n", fmt_opt(self.hausdorff));
        s
    }
}

/// Per-view maps and masks compared against ground truth.
pub struct ViewComparison {
    pub psnr: Psnr,
    pub ssim: f64,
    pub normal_error: Option<f64>,
    pub albedo_error: Option<f64>,
    pub valid_pixels: usize,
}

/// Renders view `i` with `calibration` and compares it to the dataset.
pub fn compare_view(splats: &SplatSet, dataset: &SceneDataset, i: usize, calibration: ImageCalibration) -> Result<ViewComparison, EvalError> {
    let mut view = dataset.views[i].clone();
    view.calibration = calibration;
    let b = render(splats, &view, RenderOptions::default());
    let p = psnr(&b.intensity, &view.image, 1.0)?;
    let s = ssim(&b.intensity, &view.image, &LossConfig::default()).map_err(|e| EvalError::ShapeMismatch(e.to_string()))?;
    let (mut ne, mut ae, mut valid) = (None, None, 0);
    if let Some(t) = dataset.view_truth(i) {
        let mask: Vec<bool> = (0..b.accumulation.len())
            .map(|k| b.accumulation.data[k] > MASK_THRESHOLD && t.mask.data[k] > MASK_THRESHOLD)
            .collect();
        valid = mask.iter().filter(|&&m| m).count();
        if valid > 0 {
            ne = Some(normal_error(&b.normal, &t.normal, &mask)?);
            if let Some(alb) = &b.albedo {
                let pred: Vec<f64> = alb.data.iter().zip(&b.accumulation.data).map(|(a, w)| if *w > 0.0 { a / w } else { 0.0 }).collect();
                ae = match albedo_error(&pred, &t.albedo.data, &mask) {
                    Ok(v) => Some(v),
                    Err(EvalError::DegenerateFit) => None,
                    Err(e) => return Err(e),
                };
            }
        }
    }
    Ok(ViewComparison { psnr: p, ssim: s, normal_error: ne, albedo_error: ae, valid_pixels: valid })
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Image and ground-truth metrics over one split. Normal and albedo errors
/// are pixel-weighted over all views of the split.
pub fn split_metrics(splats: &SplatSet, calibrations: &[ImageCalibration], dataset: &SceneDataset, split: Split) -> Result<SplitMetrics, EvalError> {
    let idx = dataset.indices(split);
    let (mut ps, mut ss) = (Vec::new(), Vec::new());
    let mut infinite = false;
    let (mut n_sum, mut a_sum, mut n_pix, mut a_pix) = (0.0, 0.0, 0usize, 0usize);
    let mut valid = 0;
    for &i in &idx {
        let cal = calibrations.get(i).copied().unwrap_or_default();
        let c = compare_view(splats, dataset, i, cal)?;
        match c.psnr {
            Psnr::Finite(v) => ps.push(v),
            Psnr::Infinite => infinite = true,
        }
        ss.push(c.ssim);
        valid += c.valid_pixels;
        if let Some(e) = c.normal_error {
            n_sum += e * c.valid_pixels as f64;
            n_pix += c.valid_pixels;
        }
        if let Some(e) = c.albedo_error {
            a_sum += e * c.valid_pixels as f64;
            a_pix += c.valid_pixels;
        }
    }
    Ok(SplitMetrics {
        views: idx.len(),
        psnr_db: mean(&ps),
        psnr_infinite: infinite,
        ssim: mean(&ss),
        normal_error_deg: (n_pix > 0).then(|| n_sum / n_pix as f64),
        albedo_error: (a_pix > 0).then(|| a_sum / a_pix as f64),
        valid_pixels: valid,
    })
}

/// Mesh settings for [`evaluate`]; `None` skips the Hausdorff metric.
#[derive(Debug, Clone, Copy)]
pub struct MeshSettings {
    pub voxel: Option<f64>,
    /// Truncation in voxels.
    pub trunc_voxels: f64,
    pub icp_iters: usize,
    pub icp_tol: f64,
}

impl Default for MeshSettings {
    fn default() -> Self {
        Self { voxel: None, trunc_voxels: 4.0, icp_iters: 50, icp_tol: 1e-9 }
    }
}

/// Mesh from all dataset views, aligned to `truth` by ICP, then compared.
pub fn mesh_hausdorff(splats: &SplatSet, dataset: &SceneDataset, truth: &[Vec3], settings: &MeshSettings) -> Result<(Mesh, f64), EvalError> {
    let voxel = settings.voxel.or_else(|| default_voxel(splats)).ok_or(EvalError::EmptyVolume)?;
    let mesh = extract_mesh(splats, &dataset.views, voxel, settings.trunc_voxels * voxel)?;
    let icp = align_icp(&mesh.vertices, truth, settings.icp_iters, settings.icp_tol)?;
    let aligned: Vec<Vec3> = mesh.vertices.iter().map(|p| icp.transform.apply(p)).collect();
    let d = hausdorff_normalized(&aligned, truth)?;
    Ok((mesh, d))
}

/// Full report for a trained model. The mesh metric runs only when
/// `mesh` is given and the dataset has ground-truth points.
pub fn evaluate(
    splats: &SplatSet,
    calibrations: &[ImageCalibration],
    dataset: &SceneDataset,
    mesh: Option<&MeshSettings>,
    lpips: Option<LpipsSidecar>,
) -> Result<MetricReport, EvalError> {
    let train = split_metrics(splats, calibrations, dataset, Split::Train)?;
    let test = split_metrics(splats, calibrations, dataset, Split::Test)?;
    let hausdorff = match (mesh, &dataset.truth_points) {
        (Some(m), Some(t)) => Some(mesh_hausdorff(splats, dataset, t, m)?.1),
        _ => None,
    };
    Ok(MetricReport { model: splats.model.to_string(), splat_count: splats.len(), train, test, hausdorff, lpips })
}
