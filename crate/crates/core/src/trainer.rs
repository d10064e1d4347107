//! Losses, Adam optimization, densification schedule and checkpointing.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{backward, AutogradError, GradientSet, MapGradients};
use crate::geometry::{CameraModel, Vec3};
use crate::image::Image;
use crate::io::SceneDataset;
use crate::rasterizer::{render, RenderBundle, RenderOptions, ViewContext};
use crate::reflectance::{AppearanceModel, ImageCalibration};
use crate::splats::{InitConfig, Remap, SplatError, SplatSet};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("image shapes differ: {0}")]
    ShapeMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("loss became non-finite at iteration {iteration}")]
    DivergedLoss { iteration: usize },
    #[error("dataset has no training views")]
    NoTrainingViews,
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error(transparent)]
    Splat(#[from] SplatError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// SSIM share of the intensity loss.
    pub lambda: f64,
    /// Weight of the depth-normal consistency loss.
    pub beta: f64,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 0.2, beta: 0.05, ssim_window: 11, ssim_sigma: 1.5, c1: 0.01 * 0.01, c2: 0.03 * 0.03 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(TrainError::InvalidConfig(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.beta >= 0.0) {
            return Err(TrainError::InvalidConfig(format!("beta {} must be non-negative", self.beta)));
        }
        if self.ssim_window < 3 || self.ssim_window.is_multiple_of(2) {
            return Err(TrainError::InvalidConfig(format!("ssim_window {} must be odd and at least 3", self.ssim_window)));
        }
        if !(self.ssim_sigma > 0.0 && self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(TrainError::InvalidConfig("ssim_sigma, c1 and c2 must be positive".into()));
        }
        Ok(())
    }
}

/// Normalized 1D Gaussian window.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let w: Vec<f64> = (0..size).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Index into `0..n` under symmetric (edge-repeating) padding.
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period) as usize;
    if m < n {
        m
    } else {
        2 * n - 1 - m
    }
}

/// Separable correlation with `kernel` along rows and columns.
fn filter(img: &Image, kernel: &[f64]) -> Image {
    let (w, h) = (img.width, img.height);
    let r = (kernel.len() / 2) as isize;
    let mut tmp = Image::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (k, wk) in kernel.iter().enumerate() {
                s += wk * img.get(reflect_index(x as isize + k as isize - r, w), y);
            }
            tmp.set(x, y, s);
        }
    }
    let mut out = Image::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (k, wk) in kernel.iter().enumerate() {
                s += wk * tmp.get(x, reflect_index(y as isize + k as isize - r, h));
            }
            out.set(x, y, s);
        }
    }
    out
}

/// Adjoint of [`filter`].
fn filter_adjoint(img: &Image, kernel: &[f64]) -> Image {
    let (w, h) = (img.width, img.height);
    let r = (kernel.len() / 2) as isize;
    let mut tmp = Image::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let v = img.get(x, y);
            for (k, wk) in kernel.iter().enumerate() {
                let yy = reflect_index(y as isize + k as isize - r, h);
                tmp.data[yy * w + x] += wk * v;
            }
        }
    }
    let mut out = Image::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let v = tmp.get(x, y);
            for (k, wk) in kernel.iter().enumerate() {
                let xx = reflect_index(x as isize + k as isize - r, w);
                out.data[y * w + xx] += wk * v;
            }
        }
    }
    out
}

fn check_shape(a: &Image, b: &Image) -> Result<(), TrainError> {
    if !a.same_shape(b) || a.data.len() != a.width * a.height {
        return Err(TrainError::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// Mean SSIM of `x` against `y`, and optionally its gradient with respect to `x`.
pub fn ssim_with_grad(x: &Image, y: &Image, cfg: &LossConfig, want_grad: bool) -> Result<(f64, Option<Vec<f64>>), TrainError> {
    check_shape(x, y)?;
    let k = gaussian_window(cfg.ssim_window, cfg.ssim_sigma);
    let (c1, c2) = (cfg.c1, cfg.c2);
    let xx = Image { data: x.data.iter().map(|v| v * v).collect(), ..x.clone() };
    let yy = Image { data: y.data.iter().map(|v| v * v).collect(), ..y.clone() };
    let xy = Image { data: x.data.iter().zip(&y.data).map(|(a, b)| a * b).collect(), ..x.clone() };
    let (mx, my) = (filter(x, &k), filter(y, &k));
    let (exx, eyy, exy) = (filter(&xx, &k), filter(&yy, &k), filter(&xy, &k));
    let n = x.len();
    let mut total = 0.0;
    let (mut g_mu, mut g_exx, mut g_exy) = (Image::zeros(x.width, x.height), Image::zeros(x.width, x.height), Image::zeros(x.width, x.height));
    for i in 0..n {
        let (ux, uy) = (mx.data[i], my.data[i]);
        let num1 = 2.0 * ux * uy + c1;
        let den1 = ux * ux + uy * uy + c1;
        let num2 = 2.0 * (exy.data[i] - ux * uy) + c2;
        let den2 = (exx.data[i] - ux * ux) + (eyy.data[i] - uy * uy) + c2;
        let s = num1 * num2 / (den1 * den2);
        total += s;
        if want_grad {
            // Written so that every partial vanishes exactly when x == y.
            let dd = den1 * den2;
            g_mu.data[i] = (2.0 * uy * (num2 - num1) - 2.0 * ux * s * (den2 - den1)) / dd;
            g_exx.data[i] = -s / den2;
            g_exy.data[i] = if num2 != 0.0 { 2.0 * s / num2 } else { 2.0 * num1 / dd };
        }
    }
    let mean = total / n as f64;
    if !want_grad {
        return Ok((mean, None));
    }
    let (a, b, c) = (filter_adjoint(&g_mu, &k), filter_adjoint(&g_exx, &k), filter_adjoint(&g_exy, &k));
    let inv_n = 1.0 / n as f64;
    let grad = (0..n).map(|i| (a.data[i] + 2.0 * x.data[i] * b.data[i] + y.data[i] * c.data[i]) * inv_n).collect();
    Ok((mean, Some(grad)))
}

pub fn ssim(x: &Image, y: &Image, cfg: &LossConfig) -> Result<f64, TrainError> {
    Ok(ssim_with_grad(x, y, cfg, false)?.0)
}

/// Intensity loss `(1 − λ)·L1 + λ·(1 − SSIM)` with partials.
#[derive(Debug, Clone)]
pub struct IntensityLoss {
    pub value: f64,
    pub l1: f64,
    pub ssim: Option<f64>,
    pub grad: Vec<f64>,
}

pub fn loss_intensity(render: &Image, truth: &Image, cfg: &LossConfig) -> Result<IntensityLoss, TrainError> {
    check_shape(render, truth)?;
    let n = render.len() as f64;
    let l1 = render.data.iter().zip(&truth.data).map(|(r, t)| (r - t).abs()).sum::<f64>() / n;
    let w1 = 1.0 - cfg.lambda;
    let mut grad: Vec<f64> = render
        .data
        .iter()
        .zip(&truth.data)
        .map(|(r, t)| {
            let d = r - t;
            let s = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            w1 * s / n
        })
        .collect();
    if cfg.lambda == 0.0 {
        return Ok(IntensityLoss { value: l1, l1, ssim: None, grad });
    }
    let (s, g) = ssim_with_grad(render, truth, cfg, true)?;
    for (gi, si) in grad.iter_mut().zip(g.unwrap()) {
        *gi -= cfg.lambda * si;
    }
    Ok(IntensityLoss { value: w1 * l1 + cfg.lambda * (1.0 - s), l1, ssim: Some(s), grad })
}

fn camera_ray(cam: &CameraModel, col: usize, row: usize) -> Vec3 {
    Vec3::new((col as f64 + 0.5 - cam.cx) / cam.fx, (row as f64 + 0.5 - cam.cy) / cam.fy, 1.0)
}

/// World-frame normals from central differences of the back-projected depth
/// map, oriented toward the camera; `None` where a neighbour is invalid.
pub fn depth_normals(depth: &Image, cam: &CameraModel) -> Vec<Option<Vec3>> {
    let (w, h) = (depth.width, depth.height);
    let mut out = vec![None; w * h];
    for row in 1..h.saturating_sub(1) {
        for col in 1..w.saturating_sub(1) {
            if let Some(n) = depth_normal_at(depth, cam, col, row) {
                out[row * w + col] = Some(cam.rotation.transpose() * n.0);
            }
        }
    }
    out
}

/// Camera-frame unit normal plus `(dx, dy, |m|)` at an interior pixel.
fn depth_normal_at(depth: &Image, cam: &CameraModel, col: usize, row: usize) -> Option<(Vec3, Vec3, Vec3, f64)> {
    let d = |c: usize, r: usize| depth.get(c, r);
    if d(col, row) < 0.0 || d(col - 1, row) < 0.0 || d(col + 1, row) < 0.0 || d(col, row - 1) < 0.0 || d(col, row + 1) < 0.0 {
        return None;
    }
    let p = |c: usize, r: usize| camera_ray(cam, c, r) * d(c, r);
    let dx = p(col + 1, row) - p(col - 1, row);
    let dy = p(col, row + 1) - p(col, row - 1);
    let m = dy.cross(&dx);
    let len = m.norm();
    if !(len > 0.0) {
        return None;
    }
    Some((m / len, dx, dy, len))
}

/// `mean over pixels of Σ ω_i (1 − n_iᵀ n_d)`, which equals
/// `A − N̄ᵀ n_d` per pixel, with partials for depth, normal and
/// accumulation maps.
#[derive(Debug, Clone)]
pub struct NormalLoss {
    pub value: f64,
    pub depth: Vec<f64>,
    pub normal: Vec<Vec3>,
    pub accumulation: Vec<f64>,
    pub valid: Vec<bool>,
}

pub fn loss_normal(bundle: &RenderBundle, cam: &CameraModel) -> NormalLoss {
    let (w, h) = (bundle.width, bundle.height);
    let n = (w * h) as f64;
    let mut out = NormalLoss {
        value: 0.0,
        depth: vec![0.0; w * h],
        normal: vec![Vec3::zeros(); w * h],
        accumulation: vec![0.0; w * h],
        valid: vec![false; w * h],
    };
    let rt = cam.rotation.transpose();
    for row in 1..h.saturating_sub(1) {
        for col in 1..w.saturating_sub(1) {
            let Some((nc, dx, dy, len)) = depth_normal_at(&bundle.depth, cam, col, row) else { continue };
            let i = row * w + col;
            let nd = rt * nc;
            let nbar = bundle.normal[i];
            out.valid[i] = true;
            out.value += bundle.accumulation.data[i] - nbar.dot(&nd);
            out.accumulation[i] += 1.0 / n;
            out.normal[i] -= nd / n;
            let g_nc = cam.rotation * (-nbar / n);
            let g_m = (g_nc - nc * nc.dot(&g_nc)) / len;
            let g_dy = dx.cross(&g_m);
            let g_dx = g_m.cross(&dy);
            let mut push = |c: usize, r: usize, g: Vec3| {
                out.depth[r * w + c] += camera_ray(cam, c, r).dot(&g);
            };
            push(col + 1, row, g_dx);
            push(col - 1, row, -g_dx);
            push(col, row + 1, g_dy);
            push(col, row - 1, -g_dy);
        }
    }
    out.value /= n;
    out
}

/// Total per-view loss with map partials, plus the discrete choices made
/// while computing it (L1 signs and normal-loss validity).
pub struct ViewLoss {
    pub total: f64,
    pub intensity: f64,
    pub normal: f64,
    pub grads: MapGradients,
    pub kinks: Vec<u32>,
}

pub fn view_loss(bundle: &RenderBundle, truth: &Image, cam: &CameraModel, cfg: &LossConfig, beta: f64) -> Result<ViewLoss, TrainError> {
    let li = loss_intensity(&bundle.intensity, truth, cfg)?;
    let mut kinks: Vec<u32> = bundle.intensity.data.iter().zip(&truth.data).map(|(r, t)| (r > t) as u32 + 2 * (r == t) as u32).collect();
    let mut grads = MapGradients::zeros(bundle.intensity.len());
    grads.intensity = li.grad;
    let mut normal = 0.0;
    if beta > 0.0 {
        let ln = loss_normal(bundle, cam);
        normal = ln.value;
        grads.depth = Some(ln.depth.iter().map(|g| g * beta).collect());
        grads.normal = Some(ln.normal.iter().map(|g| g * beta).collect());
        grads.accumulation = Some(ln.accumulation.iter().map(|g| g * beta).collect());
        kinks.extend(ln.valid.iter().map(|&v| v as u32));
    }
    let total = if beta > 0.0 { li.value + beta * normal } else { li.value };
    Ok(ViewLoss { total, intensity: li.value, normal, grads, kinks })
}

/// Finite-difference check of the full per-view loss on one scene.
pub fn fd_check(
    splats: &SplatSet,
    view: &ViewContext,
    cfg: &LossConfig,
    step: f64,
) -> Result<crate::autograd::FdReport, TrainError> {
    use crate::autograd::{flatten_params, fd_check_fn, unflatten_params, Evaluation};
    let opts = RenderOptions { keep_tape: true, parallel: false };
    let b = render(splats, view, opts);
    let vl = view_loss(&b, &view.image, &view.camera, cfg, cfg.beta)?;
    if !vl.total.is_finite() {
        return Err(AutogradError::NonFiniteLoss.into());
    }
    let g = backward(splats, view, &b, &vl.grads, false)?;
    let (x0, classes) = flatten_params(splats, view);
    let rep = fd_check_fn(&x0, &classes, &g.flatten(), step, |x| {
        let mut s = splats.clone();
        let mut v = view.clone();
        unflatten_params(x, &mut s, &mut v);
        let b = render(&s, &v, opts);
        match view_loss(&b, &v.image, &v.camera, cfg, cfg.beta) {
            Ok(l) => {
                let mut signature = b.tape.expect("tape requested").signature();
                signature.extend(l.kinks);
                Evaluation { loss: l.total, signature }
            }
            Err(_) => Evaluation { loss: f64::NAN, signature: vec![u32::MAX] },
        }
    })?;
    Ok(rep)
}

/// Learning rates and densification schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub iterations: usize,
    pub position_lr_init: f64,
    pub position_lr_final: f64,
    pub scale_lr: f64,
    pub rotation_lr: f64,
    pub opacity_lr: f64,
    pub appearance_lr: f64,
    pub calibration_lr: f64,
    /// Iterations over which the normal-loss weight ramps up from zero.
    pub beta_ramp: usize,
    pub densify_from: usize,
    pub densify_until: usize,
    pub densify_interval: usize,
    pub densify_grad_threshold: f64,
    pub prune_opacity: f64,
    pub opacity_reset_interval: usize,
    pub opacity_reset_value: f64,
    pub checkpoint_interval: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            iterations: 30_000,
            position_lr_init: 1.6e-4,
            position_lr_final: 1.6e-6,
            scale_lr: 5e-3,
            rotation_lr: 1e-3,
            opacity_lr: 5e-2,
            appearance_lr: 2.5e-3,
            calibration_lr: 1e-3,
            beta_ramp: 7000,
            densify_from: 500,
            densify_until: 15_000,
            densify_interval: 100,
            densify_grad_threshold: 2e-4,
            prune_opacity: 5e-3,
            opacity_reset_interval: 3000,
            opacity_reset_value: 0.01,
            checkpoint_interval: 5000,
        }
    }
}

impl Schedule {
    /// Position learning rate at `it`, log-linear from init to final,
    /// multiplied by the scene extent.
    pub fn position_lr(&self, it: usize, extent: f64) -> f64 {
        let t = if self.iterations == 0 { 1.0 } else { (it as f64 / self.iterations as f64).clamp(0.0, 1.0) };
        let lr = (self.position_lr_init.ln() * (1.0 - t) + self.position_lr_final.ln() * t).exp();
        lr * extent
    }

    pub fn beta_at(&self, it: usize, beta: f64) -> f64 {
        if self.beta_ramp == 0 {
            beta
        } else {
            beta * (it as f64 / self.beta_ramp as f64).min(1.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitSettings {
    pub opacity: f64,
    pub albedo: f64,
    pub sh_intensity: f64,
    /// Random splats used when the dataset has no initial point cloud.
    pub random_count: usize,
}

impl Default for InitSettings {
    fn default() -> Self {
        let d = InitConfig::default();
        Self { opacity: d.opacity, albedo: d.albedo, sh_intensity: d.sh_intensity, random_count: 10_000 }
    }
}

/// Everything `train` needs besides the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: AppearanceModel,
    pub seed: u64,
    /// Single-threaded rendering and gradient reduction.
    pub deterministic: bool,
    pub loss: LossConfig,
    pub schedule: Schedule,
    pub init: InitSettings,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: AppearanceModel::Lambert,
            seed: 0,
            deterministic: false,
            loss: LossConfig::default(),
            schedule: Schedule::default(),
            init: InitSettings::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.loss.validate()?;
        let s = &self.schedule;
        if s.densify_interval == 0 || s.opacity_reset_interval == 0 || s.checkpoint_interval == 0 {
            return Err(TrainError::InvalidConfig("intervals must be positive".into()));
        }
        let lrs = [s.position_lr_init, s.position_lr_final, s.scale_lr, s.rotation_lr, s.opacity_lr, s.appearance_lr, s.calibration_lr];
        if lrs.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
            return Err(TrainError::InvalidConfig("learning rates must be finite and non-negative".into()));
        }
        if s.position_lr_init <= 0.0 || s.position_lr_final <= 0.0 {
            return Err(TrainError::InvalidConfig("position learning rates must be positive".into()));
        }
        Ok(())
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-15;

/// First and second moments for one parameter group.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    fn zeros(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n] }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, t: u64) {
        let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            params[i] -= lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + ADAM_EPS);
        }
    }

    fn remap(&mut self, remap: &Remap, width: usize) {
        let mut m = Vec::with_capacity(remap.len() * width);
        let mut v = Vec::with_capacity(remap.len() * width);
        for r in remap {
            match r {
                Some(k) => {
                    m.extend_from_slice(&self.m[k * width..(k + 1) * width]);
                    v.extend_from_slice(&self.v[k * width..(k + 1) * width]);
                }
                None => {
                    m.extend(std::iter::repeat_n(0.0, width));
                    v.extend(std::iter::repeat_n(0.0, width));
                }
            }
        }
        self.m = m;
        self.v = v;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub positions: Moments,
    pub scales: Moments,
    pub rotations: Moments,
    pub opacity: Moments,
    pub appearance: Moments,
    /// `(scale, bias)` moments per view and the number of steps taken on it.
    pub calibration: Vec<(Moments, u64)>,
}

impl AdamState {
    fn new(splats: &SplatSet, views: usize) -> Self {
        let n = splats.len();
        Self {
            positions: Moments::zeros(3 * n),
            scales: Moments::zeros(2 * n),
            rotations: Moments::zeros(4 * n),
            opacity: Moments::zeros(n),
            appearance: Moments::zeros(splats.appearance.len()),
            calibration: vec![(Moments::zeros(2), 0); views],
        }
    }

    fn remap(&mut self, remap: &Remap, pc: usize) {
        self.positions.remap(remap, 3);
        self.scales.remap(remap, 2);
        self.rotations.remap(remap, 4);
        self.opacity.remap(remap, 1);
        self.appearance.remap(remap, pc);
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub loss: f64,
    pub loss_intensity: f64,
    pub loss_normal: f64,
    pub splat_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub iteration: usize,
    pub splats: SplatSet,
    /// One calibration per dataset view (test views keep the default).
    pub calibrations: Vec<ImageCalibration>,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    pub extent: f64,
    pub log: Vec<LogRow>,
}

/// `1.1 ×` the largest distance of a training camera from their centroid,
/// floored by the splat bounding-box diagonal.
pub fn scene_extent(dataset: &SceneDataset, splats: &SplatSet) -> f64 {
    let centers: Vec<Vec3> = dataset.train_indices().iter().map(|&i| dataset.views[i].camera.center()).collect();
    let mut ext = 0.0;
    if !centers.is_empty() {
        let mean = centers.iter().fold(Vec3::zeros(), |a, c| a + c) / centers.len() as f64;
        ext = centers.iter().map(|c| (c - mean).norm()).fold(0.0, f64::max) * 1.1;
    }
    if let Some((lo, hi)) = splats.bounds() {
        ext = ext.max((hi - lo).norm());
    }
    if ext > 0.0 {
        ext
    } else {
        1.0
    }
}

impl TrainState {
    /// Initial splats from the dataset point cloud (or random splats inside
    /// the camera-target region when there is none).
    pub fn new(dataset: &SceneDataset, cfg: &TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        if dataset.train_indices().is_empty() {
            return Err(TrainError::NoTrainingViews);
        }
        let mut init = InitConfig {
            opacity: cfg.init.opacity,
            albedo: cfg.init.albedo,
            sh_intensity: cfg.init.sh_intensity,
            random_count: Some(cfg.init.random_count),
            ..InitConfig::default()
        };
        let points: &[Vec3] = dataset.init_points.as_deref().unwrap_or(&[]);
        if points.is_empty() {
            init.random_bounds = dataset.view_region();
        }
        let splats = SplatSet::init_from_points(points, cfg.model, cfg.seed, &init)?;
        Self::from_splats(dataset, cfg, splats)
    }

    /// Starts from given splats with default calibrations and zero moments.
    pub fn from_splats(dataset: &SceneDataset, cfg: &TrainConfig, splats: SplatSet) -> Result<Self, TrainError> {
        cfg.validate()?;
        if dataset.train_indices().is_empty() {
            return Err(TrainError::NoTrainingViews);
        }
        if splats.model != cfg.model {
            return Err(TrainError::InvalidConfig(format!("splats use {} but the config asks for {}", splats.model, cfg.model)));
        }
        let extent = scene_extent(dataset, &splats);
        Ok(Self {
            iteration: 0,
            adam: AdamState::new(&splats, dataset.views.len()),
            calibrations: vec![ImageCalibration::default(); dataset.views.len()],
            splats,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_7a1e),
            extent,
            log: Vec::new(),
        })
    }

    /// The dataset view with this state's learned calibration.
    pub fn view(&self, dataset: &SceneDataset, i: usize) -> ViewContext {
        let mut v = dataset.views[i].clone();
        v.calibration = self.calibrations[i];
        v
    }

    pub fn write_checkpoint(&self, path: &Path) -> Result<(), TrainError> {
        let f = BufWriter::new(fs::File::create(path)?);
        self.splats.write_checkpoint(f, &self.calibrations)?;
        Ok(())
    }

    /// One optimization step on a uniformly drawn training view.
    pub fn step(&mut self, dataset: &SceneDataset, cfg: &TrainConfig) -> Result<LogRow, TrainError> {
        let train = dataset.train_indices();
        let vi = train[self.rng.random_range(0..train.len())];
        let view = self.view(dataset, vi);
        let it = self.iteration;
        let sched = &cfg.schedule;
        let parallel = !cfg.deterministic;
        let bundle = render(&self.splats, &view, RenderOptions { keep_tape: true, parallel });
        let beta = sched.beta_at(it, cfg.loss.beta);
        let vl = view_loss(&bundle, &view.image, &view.camera, &cfg.loss, beta)?;
        if !vl.total.is_finite() {
            return Err(TrainError::DivergedLoss { iteration: it });
        }
        let g = backward(&self.splats, &view, &bundle, &vl.grads, parallel)?;
        drop(bundle);
        if !g.all_finite() {
            return Err(TrainError::DivergedLoss { iteration: it });
        }
        if it < sched.densify_until {
            for k in 0..self.splats.len() {
                if g.visible[k] {
                    self.splats.grad_accum[k] += g.screen[k];
                    self.splats.grad_count[k] += 1;
                }
            }
        }
        self.apply(&g, vi, cfg);

        let next = it + 1;
        if next >= sched.densify_from && next < sched.densify_until && next.is_multiple_of(sched.densify_interval) {
            let remap = self.splats.densify_and_prune(
                sched.densify_grad_threshold,
                sched.prune_opacity,
                self.extent,
                &mut self.rng,
            );
            self.adam.remap(&remap, self.splats.params_per_splat());
        }
        if next < sched.densify_until && next.is_multiple_of(sched.opacity_reset_interval) {
            self.splats.reset_opacity(sched.opacity_reset_value);
            self.adam.opacity = Moments::zeros(self.splats.len());
        }
        self.iteration = next;
        let row = LogRow {
            iteration: it,
            loss: vl.total,
            loss_intensity: vl.intensity,
            loss_normal: vl.normal,
            splat_count: self.splats.len(),
        };
        self.log.push(row);
        Ok(row)
    }

    fn apply(&mut self, g: &GradientSet, view: usize, cfg: &TrainConfig) {
        let sched = &cfg.schedule;
        let t = self.iteration as u64 + 1;
        let s = &mut self.splats;
        let flat = |v: &mut Vec<Vec3>| -> Vec<f64> { v.iter().flat_map(|p| [p.x, p.y, p.z]).collect() };
        let mut pos = flat(&mut s.positions);
        let gpos: Vec<f64> = g.positions.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
        self.adam.positions.step(&mut pos, &gpos, sched.position_lr(self.iteration, self.extent), t);
        for (p, c) in s.positions.iter_mut().zip(pos.chunks_exact(3)) {
            *p = Vec3::new(c[0], c[1], c[2]);
        }
        let mut sc: Vec<f64> = s.log_scales.iter().flatten().copied().collect();
        let gsc: Vec<f64> = g.log_scales.iter().flatten().copied().collect();
        self.adam.scales.step(&mut sc, &gsc, sched.scale_lr, t);
        for (p, c) in s.log_scales.iter_mut().zip(sc.chunks_exact(2)) {
            *p = [c[0], c[1]];
        }
        let mut rot: Vec<f64> = s.rotations.iter().flatten().copied().collect();
        let grot: Vec<f64> = g.rotations.iter().flatten().copied().collect();
        self.adam.rotations.step(&mut rot, &grot, sched.rotation_lr, t);
        for (p, c) in s.rotations.iter_mut().zip(rot.chunks_exact(4)) {
            *p = [c[0], c[1], c[2], c[3]];
        }
        s.normalize_rotations();
        self.adam.opacity.step(&mut s.opacity_logits, &g.opacity_logits, sched.opacity_lr, t);
        self.adam.appearance.step(&mut s.appearance, &g.appearance, sched.appearance_lr, t);

        let (mom, steps) = &mut self.adam.calibration[view];
        *steps += 1;
        let cal = &mut self.calibrations[view];
        let mut p = [cal.scale, cal.bias];
        mom.step(&mut p, &[g.calibration_scale, g.calibration_bias], sched.calibration_lr, *steps);
        cal.scale = p[0].max(ImageCalibration::MIN_SCALE);
        cal.bias = p[1];
    }
}

/// Files written by [`train`] into its output directory.
pub const LOG_FILE: &str = "train_log.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn checkpoint_name(iteration: usize) -> String {
    format!("iter_{iteration:06}.ckpt")
}

/// Runs the full schedule. With `out_dir`, writes the CSV log, periodic
/// checkpoints and the final checkpoint; on divergence a checkpoint of the
/// last good state is written before the error is returned.
pub fn train(
    dataset: &SceneDataset,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    mut progress: impl FnMut(&LogRow),
) -> Result<TrainState, TrainError> {
    let mut state = TrainState::new(dataset, cfg)?;
    info!(
        "training {} on {} views with {} initial splats (extent {:.3})",
        cfg.model,
        dataset.train_indices().len(),
        state.splats.len(),
        state.extent
    );
    let mut log = match out_dir {
        Some(d) => {
            fs::create_dir_all(d)?;
            let mut f = BufWriter::new(fs::File::create(d.join(LOG_FILE))?);
            writeln!(f, "iteration,loss,loss_intensity,loss_normal,splat_count")?;
            Some(f)
        }
        None => None,
    };
    while state.iteration < cfg.schedule.iterations {
        let before = state.clone_light();
        match state.step(dataset, cfg) {
            Ok(row) => {
                if let Some(f) = log.as_mut() {
                    writeln!(f, "{},{},{},{},{}", row.iteration, row.loss, row.loss_intensity, row.loss_normal, row.splat_count)?;
                }
                progress(&row);
            }
            Err(e @ TrainError::DivergedLoss { .. }) => {
                if let Some(d) = out_dir {
                    let path = d.join("diverged.ckpt");
                    warn!("loss diverged; writing last good state to {}", path.display());
                    let f = BufWriter::new(fs::File::create(path)?);
                    before.0.write_checkpoint(f, &before.1)?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        }
        if let Some(d) = out_dir {
            if state.iteration % cfg.schedule.checkpoint_interval == 0 {
                state.write_checkpoint(&d.join(checkpoint_name(state.iteration)))?;
            }
        }
    }
    if let Some(f) = log.as_mut() {
        f.flush()?;
    }
    if let Some(d) = out_dir {
        state.write_checkpoint(&d.join(FINAL_CHECKPOINT))?;
    }
    Ok(state)
}

impl TrainState {
    fn clone_light(&self) -> (SplatSet, Vec<ImageCalibration>) {
        (self.splats.clone(), self.calibrations.clone())
    }
}

/// Final checkpoint path inside a training output directory.
pub fn final_checkpoint(dir: &Path) -> PathBuf {
    dir.join(FINAL_CHECKPOINT)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Mat3;
    use crate::reflectance::SunSpec;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
        Image::from_fn(w, h, |_, _| rng.random_range(0.0..1.0))
    }

    /// Direct 2D windowed SSIM with explicit padding, independent of the
    /// separable implementation.
    fn ssim_oracle(x: &Image, y: &Image, cfg: &LossConfig) -> f64 {
        let k1 = gaussian_window(cfg.ssim_window, cfg.ssim_sigma);
        let r = (cfg.ssim_window / 2) as isize;
        let mut total = 0.0;
        for py in 0..x.height {
            for px in 0..x.width {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in -r..=r {
                    for dx in -r..=r {
                        let w = k1[(dx + r) as usize] * k1[(dy + r) as usize];
                        let qx = reflect_index(px as isize + dx, x.width);
                        let qy = reflect_index(py as isize + dy, x.height);
                        let (a, b) = (x.get(qx, qy), y.get(qx, qy));
                        mx += w * a;
                        my += w * b;
                        sxx += w * a * a;
                        syy += w * b * b;
                        sxy += w * a * b;
                    }
                }
                let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                total += ((2.0 * mx * my + cfg.c1) * (2.0 * cxy + cfg.c2)) / ((mx * mx + my * my + cfg.c1) * (vx + vy + cfg.c2));
            }
        }
        total / x.len() as f64
    }

    #[test]
    fn reflect_index_is_symmetric_padding() {
        let got: Vec<usize> = (-3..7).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1]);
        assert_eq!(reflect_index(-7, 2), 1);
    }

    #[test]
    fn intensity_loss_examples() {
        let cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_image(&mut rng, 12, 9);
        assert!(loss_intensity(&a, &a, &cfg).unwrap().value.abs() < 1e-15);
        let pure = LossConfig { lambda: 0.0, ..cfg };
        let l = loss_intensity(&Image::filled(6, 6, 0.5), &Image::zeros(6, 6), &pure).unwrap();
        assert_eq!(l.value, 0.5);
        assert!(matches!(loss_intensity(&a, &Image::zeros(3, 3), &cfg), Err(TrainError::ShapeMismatch(_))));
    }

    #[test]
    fn ssim_matches_direct_oracle() {
        let cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (w, h) in [(16, 16), (9, 13), (4, 5)] {
            let a = random_image(&mut rng, w, h);
            let b = random_image(&mut rng, w, h);
            let s = ssim(&a, &b, &cfg).unwrap();
            assert!((s - ssim_oracle(&a, &b, &cfg)).abs() < 1e-12);
            let l = loss_intensity(&a, &b, &cfg).unwrap();
            let l1 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
            assert!((l.value - (0.8 * l1 + 0.2 * (1.0 - ssim_oracle(&a, &b, &cfg)))).abs() < 1e-12);
        }
    }

    #[test]
    fn intensity_gradient_matches_finite_differences() {
        let cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_image(&mut rng, 10, 7);
        let b = random_image(&mut rng, 10, 7);
        let g = loss_intensity(&a, &b, &cfg).unwrap().grad;
        let h = 1e-6;
        for i in 0..a.len() {
            let mut p = a.clone();
            p.data[i] += h;
            let mut m = a.clone();
            m.data[i] -= h;
            let fd = (loss_intensity(&p, &b, &cfg).unwrap().value - loss_intensity(&m, &b, &cfg).unwrap().value) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-7, "pixel {i}: {fd} vs {}", g[i]);
        }
    }

    fn plane_bundle(cam: &CameraModel, normal_w: Vec3, point_w: Vec3, blended_normal: Vec3) -> RenderBundle {
        let (w, h) = (cam.width, cam.height);
        let center = cam.center();
        let mut depth = Image::zeros(w, h);
        for row in 0..h {
            for col in 0..w {
                let ray = crate::geometry::pixel_ray(cam, &crate::geometry::pixel_center(col, row));
                let t = normal_w.dot(&(point_w - center)) / normal_w.dot(&ray.direction);
                depth.set(col, row, cam.to_camera(&ray.at(t)).z);
            }
        }
        RenderBundle {
            width: w,
            height: h,
            intensity: Image::zeros(w, h),
            blended: Image::zeros(w, h),
            median_depth: depth.clone(),
            depth,
            normal: vec![blended_normal; w * h],
            albedo: None,
            accumulation: Image::filled(w, h, 1.0),
            tape: None,
        }
    }

    fn test_camera() -> CameraModel {
        CameraModel::look_at(&Vec3::new(0.3, -0.2, 6.0), &Vec3::zeros(), &Vec3::y(), 20.0, 16, 12).unwrap()
    }

    #[test]
    fn fronto_parallel_plane_has_zero_normal_loss() {
        let cam = CameraModel::new((20.0, 20.0), (8.0, 6.0), Mat3::identity(), Vec3::zeros(), 16, 12).unwrap();
        let b = plane_bundle(&cam, Vec3::z(), Vec3::new(0.0, 0.0, 4.0), -Vec3::z());
        let l = loss_normal(&b, &cam);
        assert!(l.value.abs() < 1e-6);
        let orth = plane_bundle(&cam, Vec3::z(), Vec3::new(0.0, 0.0, 4.0), Vec3::x());
        let lo = loss_normal(&orth, &cam);
        let valid = lo.valid.iter().filter(|&&v| v).count() as f64;
        assert!((lo.value - valid / (16.0 * 12.0)).abs() < 1e-12);
    }

    #[test]
    fn tilted_plane_depth_normal_matches_analytic() {
        let cam = test_camera();
        let n = Vec3::new(0.3, 0.2, 1.0).normalize();
        let b = plane_bundle(&cam, n, Vec3::new(0.0, 0.0, 0.5), Vec3::zeros());
        let facing = if n.dot(&(cam.center() - Vec3::new(0.0, 0.0, 0.5))) > 0.0 { n } else { -n };
        for nd in depth_normals(&b.depth, &cam).into_iter().flatten() {
            assert!(nd.dot(&facing).clamp(-1.0, 1.0).acos().to_degrees() < 0.5);
        }
    }

    #[test]
    fn normal_loss_gradient_matches_finite_differences() {
        let cam = test_camera();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut b = plane_bundle(&cam, Vec3::new(0.1, -0.2, 1.0).normalize(), Vec3::zeros(), Vec3::zeros());
        for d in b.depth.data.iter_mut() {
            *d += rng.random_range(-0.05..0.05);
        }
        for n in b.normal.iter_mut() {
            *n = Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
        }
        for a in b.accumulation.data.iter_mut() {
            *a = rng.random_range(0.2..1.0);
        }
        let l = loss_normal(&b, &cam);
        let h = 1e-6;
        for i in (0..b.depth.len()).step_by(7) {
            let mut p = b.clone();
            p.depth.data[i] += h;
            let mut m = b.clone();
            m.depth.data[i] -= h;
            let fd = (loss_normal(&p, &cam).value - loss_normal(&m, &cam).value) / (2.0 * h);
            assert!((fd - l.depth[i]).abs() < 1e-7, "depth {i}: {fd} vs {}", l.depth[i]);
            for axis in 0..3 {
                let mut p = b.clone();
                p.normal[i][axis] += h;
                let mut m = b.clone();
                m.normal[i][axis] -= h;
                let fd = (loss_normal(&p, &cam).value - loss_normal(&m, &cam).value) / (2.0 * h);
                assert!((fd - l.normal[i][axis]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig { lambda: 1.5, ..Default::default() }.validate().is_err());
        assert!(LossConfig { ssim_window: 4, ..Default::default() }.validate().is_err());
        assert!(LossConfig { beta: -0.1, ..Default::default() }.validate().is_err());
        assert!(LossConfig::default().validate().is_ok());
        let cfg: TrainConfig = toml::from_str("model = \"lommel-seeliger\"\nseed = 3\n[schedule]\niterations = 10\n").unwrap();
        assert_eq!(cfg.model, AppearanceModel::LommelSeeliger);
        assert_eq!(cfg.schedule.iterations, 10);
        assert_eq!(cfg.schedule.scale_lr, 5e-3);
        assert!(toml::from_str::<TrainConfig>("bogus = 1\n").is_err());
    }

    #[test]
    fn schedules() {
        let s = Schedule { iterations: 100, ..Default::default() };
        assert!((s.position_lr(0, 2.0) - 3.2e-4).abs() < 1e-15);
        assert!((s.position_lr(100, 2.0) - 3.2e-6).abs() < 1e-15);
        assert!((s.position_lr(50, 1.0) - 1.6e-5).abs() < 1e-15);
        assert_eq!(s.beta_at(0, 0.05), 0.0);
        assert_eq!(s.beta_at(3500, 0.05), 0.025);
        assert_eq!(s.beta_at(9000, 0.05), 0.05);
    }

    fn small_dataset(model: AppearanceModel) -> SceneDataset {
        use crate::synthscene::{make_dataset, make_terrain, DatasetSpec, TerrainSpec};
        let h = make_terrain(&TerrainSpec { resolution: 33, crater_count: 2, ..Default::default() }, 4).unwrap();
        let spec = DatasetSpec {
            n_views: 5,
            width: 24,
            height: 24,
            init_points_per_side: 10,
            truth_points_per_side: 12,
            ..Default::default()
        };
        make_dataset(&h, &spec, model, 4).unwrap()
    }

    fn short_config(model: AppearanceModel, iterations: usize) -> TrainConfig {
        let mut cfg = TrainConfig { model, seed: 9, deterministic: true, ..Default::default() };
        cfg.schedule.iterations = iterations;
        cfg.schedule.densify_from = 50;
        cfg.schedule.densify_interval = 50;
        cfg.schedule.densify_grad_threshold = 1e-6;
        cfg.schedule.beta_ramp = 100;
        cfg
    }

    #[test]
    fn zero_iterations_return_the_initial_state() {
        let ds = small_dataset(AppearanceModel::Lambert);
        let cfg = short_config(AppearanceModel::Lambert, 0);
        let trained = train(&ds, &cfg, None, |_| panic!("no steps expected")).unwrap();
        assert_eq!(trained, TrainState::new(&ds, &cfg).unwrap());
    }

    #[test]
    fn deterministic_runs_are_bit_identical() {
        let ds = small_dataset(AppearanceModel::LommelSeeliger);
        let cfg = short_config(AppearanceModel::LommelSeeliger, 200);
        let mut rows = Vec::new();
        let a = train(&ds, &cfg, None, |r| rows.push(*r)).unwrap();
        let b = train(&ds, &cfg, None, |_| {}).unwrap();
        assert_eq!(a.splats, b.splats);
        assert_eq!(a.calibrations, b.calibrations);
        assert_eq!(a.adam, b.adam);
        assert!(rows.iter().any(|r| r.splat_count != rows[0].splat_count), "densification never ran");

        let median = |xs: &[LogRow]| {
            let mut v: Vec<f64> = xs.iter().map(|r| r.loss).collect();
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        };
        assert!(median(&rows[100..200]) <= median(&rows[..100]));
    }

    #[test]
    fn single_splat_scene_is_a_fixed_point() {
        use crate::geometry::{UnitQuaternion, Vec2};
        use crate::io::Split;
        use crate::synthscene::ring_views;
        let mut splat = SplatSet::empty(AppearanceModel::Lambert);
        splat.push(Vec3::zeros(), Vec2::new(1.0, 0.7), UnitQuaternion::from_axis_angle(&Vec3::x(), 0.2), 0.9, &[0.5]);
        let mut views = ring_views(&Vec3::zeros(), 10.0, 60.0, 4, 40.0, 24);
        for v in &mut views {
            v.sun = SunSpec::from_azimuth_elevation(30.0, 70.0);
            v.image = render(&splat, v, RenderOptions { keep_tape: false, parallel: false }).intensity;
        }
        let n = views.len();
        let ds = SceneDataset {
            name: "one".into(),
            units: "m".into(),
            views,
            splits: vec![Split::Train; n],
            init_points: None,
            truth: vec![None; n],
            truth_points: None,
        };
        let mut cfg = short_config(AppearanceModel::Lambert, 100);
        cfg.loss.beta = 0.0;
        let mut st = TrainState::from_splats(&ds, &cfg, splat.clone()).unwrap();
        let first = st.step(&ds, &cfg).unwrap();
        assert!(first.loss < 1e-8, "initial loss {}", first.loss);
        while st.iteration < 100 {
            st.step(&ds, &cfg).unwrap();
        }
        assert_eq!(st.splats.len(), 1);
        let (a, b) = (flat(&splat), flat(&st.splats));
        let drift = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(drift < 1e-6, "drift {drift}");
        for c in &st.calibrations {
            assert!((c.scale - 1.0).abs() < 1e-6 && c.bias.abs() < 1e-6);
        }
    }

    fn flat(s: &SplatSet) -> Vec<f64> {
        let mut v = Vec::new();
        for k in 0..s.len() {
            v.extend(s.positions[k].iter());
            v.extend(s.log_scales[k]);
            v.extend(s.rotations[k]);
            v.push(s.opacity_logits[k]);
        }
        v.extend(&s.appearance);
        v
    }

    #[test]
    fn zero_weights_reduce_the_loss_exactly() {
        let ds = small_dataset(AppearanceModel::Lambert);
        let st = TrainState::new(&ds, &short_config(AppearanceModel::Lambert, 0)).unwrap();
        let v = st.view(&ds, 0);
        let b = render(&st.splats, &v, RenderOptions { keep_tape: false, parallel: false });
        let cfg = LossConfig::default();
        let l = view_loss(&b, &v.image, &v.camera, &cfg, 0.0).unwrap();
        assert_eq!(l.total, l.intensity);
        let zero = |g: &Option<Vec<f64>>| g.as_ref().is_none_or(|g| g.iter().all(|&x| x == 0.0));
        assert!(zero(&l.grads.depth) && zero(&l.grads.accumulation));
        assert!(l.grads.normal.as_ref().is_none_or(|g| g.iter().all(|n| *n == Vec3::zeros())));
        let l1_only = LossConfig { lambda: 0.0, ..cfg };
        let l = view_loss(&b, &v.image, &v.camera, &l1_only, 0.0).unwrap();
        let li = loss_intensity(&b.intensity, &v.image, &l1_only).unwrap();
        assert_eq!(li.value, li.l1);
        assert_eq!(l.total, li.l1);
        let with_normal = view_loss(&b, &v.image, &v.camera, &cfg, 0.3).unwrap();
        assert!((with_normal.total - (with_normal.intensity + 0.3 * with_normal.normal)).abs() < 1e-15);
    }

    #[test]
    fn calibration_moves_only_for_sampled_views() {
        let ds = small_dataset(AppearanceModel::Lambert);
        let cfg = short_config(AppearanceModel::Lambert, 1);
        let mut st = TrainState::new(&ds, &cfg).unwrap();
        for _ in 0..3 {
            let before = st.calibrations.clone();
            st.step(&ds, &cfg).unwrap();
            let changed: Vec<usize> = (0..before.len()).filter(|&i| before[i] != st.calibrations[i]).collect();
            assert_eq!(changed.len(), 1, "{changed:?}");
            assert!(ds.train_indices().contains(&changed[0]));
        }
        for &i in &ds.test_indices() {
            assert_eq!(st.calibrations[i], ImageCalibration::default());
        }
    }
}
