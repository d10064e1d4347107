//! Procedural cratered terrain with an independent ray-marched renderer,
//! used to fabricate datasets whose normals and albedos are known exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraModel, Mat3, Ray, UnitQuaternion, Vec2, Vec3};
use crate::image::Image;
use crate::io::{quantize16, quantize_normal16, quantize_point, SceneDataset, Split, ViewTruth};
use crate::rasterizer::{map_indices, ViewContext};
use crate::reflectance::{angles, disk, AppearanceModel, ImageCalibration, SunSpec};
use crate::splats::SplatSet;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("the oracle renders physics models only, not {0}")]
    UnsupportedModel(AppearanceModel),
    #[error("invalid scene specification: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Crater {
    pub center: [f64; 2],
    pub radius: f64,
    pub depth: f64,
    pub rim_height: f64,
}

impl Crater {
    /// Parabolic bowl from `−depth` at the center up to `rim_height` at the
    /// radius, then a smooth fall-off over `rim_width` radii.
    pub fn elevation(&self, x: f64, y: f64, rim_width: f64) -> f64 {
        let r = ((x - self.center[0]).powi(2) + (y - self.center[1]).powi(2)).sqrt() / self.radius;
        if r <= 1.0 {
            -self.depth + (self.depth + self.rim_height) * r * r
        } else if r < 1.0 + rim_width {
            let t = (r - 1.0) / rim_width;
            self.rim_height * (1.0 - t * t * (3.0 - 2.0 * t))
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlbedoSpot {
    pub center: [f64; 2],
    pub radius: f64,
    /// Relative change at the spot center; the factor is `1 + strength·G`.
    pub strength: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TerrainSpec {
    /// Side length of the square patch.
    pub size: f64,
    /// Grid samples per side.
    pub resolution: usize,
    pub crater_count: usize,
    pub crater_radius: (f64, f64),
    /// Bowl depth as a fraction of the radius.
    pub depth_ratio: (f64, f64),
    /// Rim height as a fraction of the bowl depth.
    pub rim_ratio: f64,
    /// Rim fall-off width in radii.
    pub rim_width: f64,
    pub spot_count: usize,
    pub spot_radius: (f64, f64),
    pub spot_strength: f64,
    pub base_albedo: f64,
}

impl Default for TerrainSpec {
    fn default() -> Self {
        Self {
            size: 64.0,
            resolution: 257,
            crater_count: 6,
            crater_radius: (4.0, 11.0),
            depth_ratio: (0.12, 0.2),
            rim_ratio: 0.2,
            rim_width: 0.5,
            spot_count: 8,
            spot_radius: (3.0, 9.0),
            spot_strength: 0.35,
            base_albedo: 0.3,
        }
    }
}

impl TerrainSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let ranges = [self.crater_radius, self.depth_ratio, self.spot_radius];
        let ok = self.size > 0.0
            && self.resolution >= 2
            && ranges.iter().all(|(a, b)| *a > 0.0 && b >= a)
            && self.rim_ratio >= 0.0
            && self.rim_width > 0.0
            && self.spot_strength.abs() < 1.0
            && self.base_albedo > 0.0
            && self.base_albedo <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(SynthError::InvalidSpec(format!("{self:?}")))
        }
    }
}

/// Square elevation grid centered on the local origin with `z` up, placed
/// in the world by `world = rotation · local + translation`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heightfield {
    pub size: f64,
    pub resolution: usize,
    /// Row-major `resolution²` elevations, row index along `y`.
    pub heights: Vec<f64>,
    /// Albedo at the same grid points, in `(0, 1]`.
    pub albedo: Vec<f64>,
    pub craters: Vec<Crater>,
    pub spots: Vec<AlbedoSpot>,
    pub base_albedo: f64,
    pub rotation: Mat3,
    pub translation: Vec3,
    z_range: (f64, f64),
}

fn uniform(rng: &mut ChaCha8Rng, r: (f64, f64)) -> f64 {
    if r.1 > r.0 {
        rng.random_range(r.0..r.1)
    } else {
        r.0
    }
}

/// Builds the terrain for a spec and seed.
pub fn make_terrain(spec: &TerrainSpec, seed: u64) -> Result<Heightfield, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = spec.size / 2.0;
    let craters: Vec<Crater> = (0..spec.crater_count)
        .map(|_| {
            let radius = uniform(&mut rng, spec.crater_radius);
            let depth = radius * uniform(&mut rng, spec.depth_ratio);
            let margin = (half - radius).max(0.0) * 0.9;
            Crater {
                center: [rng.random_range(-margin..=margin), rng.random_range(-margin..=margin)],
                radius,
                depth,
                rim_height: depth * spec.rim_ratio,
            }
        })
        .collect();
    let spots: Vec<AlbedoSpot> = (0..spec.spot_count)
        .map(|_| AlbedoSpot {
            center: [rng.random_range(-half..=half), rng.random_range(-half..=half)],
            radius: uniform(&mut rng, spec.spot_radius),
            strength: spec.spot_strength * if rng.random_bool(0.5) { 1.0 } else { -1.0 },
        })
        .collect();
    Ok(Heightfield::from_features(spec, craters, spots))
}

impl Heightfield {
    pub fn from_features(spec: &TerrainSpec, craters: Vec<Crater>, spots: Vec<AlbedoSpot>) -> Self {
        let n = spec.resolution;
        let cell = spec.size / (n - 1) as f64;
        let half = spec.size / 2.0;
        let mut heights = Vec::with_capacity(n * n);
        let mut albedo = Vec::with_capacity(n * n);
        for j in 0..n {
            for i in 0..n {
                let (x, y) = (-half + i as f64 * cell, -half + j as f64 * cell);
                heights.push(craters.iter().map(|c| c.elevation(x, y, spec.rim_width)).sum());
                let a = spots.iter().fold(spec.base_albedo, |a, s| {
                    let d2 = (x - s.center[0]).powi(2) + (y - s.center[1]).powi(2);
                    a * (1.0 + s.strength * (-d2 / (2.0 * s.radius * s.radius)).exp())
                });
                albedo.push(a.clamp(1e-3, 1.0));
            }
        }
        let lo = heights.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = heights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self {
            size: spec.size,
            resolution: n,
            heights,
            albedo,
            craters,
            spots,
            base_albedo: spec.base_albedo,
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
            z_range: (lo, hi),
        }
    }

    /// Same terrain with its local frame moved by the rigid motion `(r, t)`.
    pub fn transformed(&self, r: &Mat3, t: &Vec3) -> Self {
        let mut h = self.clone();
        h.rotation = r * self.rotation;
        h.translation = r * self.translation + t;
        h
    }

    pub fn cell(&self) -> f64 {
        self.size / (self.resolution - 1) as f64
    }

    fn locate(&self, x: f64, y: f64) -> Option<(usize, usize, f64, f64)> {
        let half = self.size / 2.0;
        let (gx, gy) = ((x + half) / self.cell(), (y + half) / self.cell());
        let last = (self.resolution - 1) as f64;
        if !(gx >= 0.0 && gy >= 0.0 && gx <= last && gy <= last) {
            return None;
        }
        let i = (gx.floor() as usize).min(self.resolution - 2);
        let j = (gy.floor() as usize).min(self.resolution - 2);
        Some((i, j, gx - i as f64, gy - j as f64))
    }

    fn bilinear(&self, grid: &[f64], x: f64, y: f64) -> Option<f64> {
        let (i, j, fx, fy) = self.locate(x, y)?;
        let n = self.resolution;
        let (a, b, c, d) = (grid[j * n + i], grid[j * n + i + 1], grid[(j + 1) * n + i], grid[(j + 1) * n + i + 1]);
        Some(a * (1.0 - fx) * (1.0 - fy) + b * fx * (1.0 - fy) + c * (1.0 - fx) * fy + d * fx * fy)
    }

    /// Local elevation at local `(x, y)`; `None` outside the patch.
    pub fn height_at(&self, x: f64, y: f64) -> Option<f64> {
        self.bilinear(&self.heights, x, y)
    }

    pub fn albedo_at(&self, x: f64, y: f64) -> Option<f64> {
        self.bilinear(&self.albedo, x, y)
    }

    /// Local-frame unit normal of the bilinear surface.
    pub fn local_normal_at(&self, x: f64, y: f64) -> Option<Vec3> {
        let (i, j, fx, fy) = self.locate(x, y)?;
        let n = self.resolution;
        let h = &self.heights;
        let (a, b, c, d) = (h[j * n + i], h[j * n + i + 1], h[(j + 1) * n + i], h[(j + 1) * n + i + 1]);
        let hx = ((b - a) * (1.0 - fy) + (d - c) * fy) / self.cell();
        let hy = ((c - a) * (1.0 - fx) + (d - b) * fx) / self.cell();
        Some(Vec3::new(-hx, -hy, 1.0).normalize())
    }

    pub fn to_world(&self, local: &Vec3) -> Vec3 {
        self.rotation * local + self.translation
    }

    pub fn to_local(&self, world: &Vec3) -> Vec3 {
        self.rotation.transpose() * (world - self.translation)
    }

    /// World point on the surface above local `(x, y)`.
    pub fn surface_point(&self, x: f64, y: f64) -> Option<Vec3> {
        Some(self.to_world(&Vec3::new(x, y, self.height_at(x, y)?)))
    }

    /// First intersection of a world ray with the surface, returned as the
    /// ray parameter and the local hit point. Marches in half-cell steps and
    /// refines a bracketed sign change by bisection, finishing with one
    /// linear interpolation inside the final bracket.
    pub fn intersect(&self, ray: &Ray) -> Option<(f64, Vec3)> {
        let o = self.to_local(&ray.origin);
        let d = self.rotation.transpose() * ray.direction;
        let half = self.size / 2.0;
        let pad = 1e-9 * self.size;
        let lo = Vec3::new(-half, -half, self.z_range.0 - pad);
        let hi = Vec3::new(half, half, self.z_range.1 + pad);
        let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
        for a in 0..3 {
            if d[a].abs() < 1e-300 {
                if o[a] < lo[a] || o[a] > hi[a] {
                    return None;
                }
            } else {
                let (ta, tb) = ((lo[a] - o[a]) / d[a], (hi[a] - o[a]) / d[a]);
                t0 = t0.max(ta.min(tb));
                t1 = t1.min(ta.max(tb));
            }
        }
        if t0 > t1 {
            return None;
        }
        let f = |t: f64| -> Option<f64> {
            let p = o + d * t;
            let x = p.x.clamp(-half, half);
            let y = p.y.clamp(-half, half);
            Some(p.z - self.height_at(x, y)?)
        };
        let dxy = (d.x * d.x + d.y * d.y).sqrt();
        let step = if dxy > 1e-12 { (0.5 * self.cell() / dxy).min(t1 - t0) } else { t1 - t0 };
        let step = step.max(1e-12);
        let mut ta = t0;
        let mut fa = f(ta)?;
        if fa < 0.0 {
            return None;
        }
        let tol = 1e-6 * self.size;
        loop {
            let tb = (ta + step).min(t1);
            let fb = f(tb)?;
            if fb <= 0.0 {
                let (mut a, mut b, mut fa_, mut fb_) = (ta, tb, fa, fb);
                while (b - a) > tol {
                    let m = 0.5 * (a + b);
                    let fm = f(m)?;
                    if fm > 0.0 {
                        a = m;
                        fa_ = fm;
                    } else {
                        b = m;
                        fb_ = fm;
                    }
                }
                let t = if fa_ - fb_ > 0.0 { a + (b - a) * fa_ / (fa_ - fb_) } else { b };
                let p = o + d * t;
                return Some((t, Vec3::new(p.x.clamp(-half, half), p.y.clamp(-half, half), self.height_at(p.x.clamp(-half, half), p.y.clamp(-half, half))?)));
            }
            if tb >= t1 {
                return None;
            }
            ta = tb;
            fa = fb;
        }
    }

    /// Regular grid of world surface points, `n × n` over the patch.
    pub fn sample_surface(&self, n: usize) -> Vec<Vec3> {
        let half = self.size / 2.0;
        let mut pts = Vec::with_capacity(n * n);
        for j in 0..n {
            for i in 0..n {
                let x = -half + self.size * (i as f64 + 0.5) / n as f64;
                let y = -half + self.size * (j as f64 + 0.5) / n as f64;
                pts.extend(self.surface_point(x, y));
            }
        }
        pts
    }
}

/// Per-pixel oracle outputs. Invalid pixels have depth `−1`, zero normal,
/// zero albedo, zero mask and background intensity 0.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleRender {
    pub intensity: Image,
    pub depth: Image,
    /// World-frame unit normals.
    pub normal: Vec<Vec3>,
    pub albedo: Image,
    pub mask: Image,
    /// World hit points.
    pub points: Vec<Option<Vec3>>,
}

/// Ray-traces the terrain and shades each hit with `albedo · disk`, then
/// applies the calibration. With `shadows`, hits that cannot see the sun
/// receive zero radiance.
pub fn oracle_render(
    h: &Heightfield,
    cam: &CameraModel,
    sun: &SunSpec,
    model: AppearanceModel,
    calibration: ImageCalibration,
    shadows: bool,
) -> Result<OracleRender, SynthError> {
    if !model.is_physical() {
        return Err(SynthError::UnsupportedModel(model));
    }
    let (w, hgt) = (cam.width, cam.height);
    let center = cam.center();
    let rows = map_indices(hgt, true, |row| {
        (0..w)
            .map(|col| {
                let ray = crate::geometry::pixel_ray(cam, &crate::geometry::pixel_center(col, row));
                let (_, local) = h.intersect(&ray)?;
                let p = h.to_world(&local);
                let n = h.rotation * h.local_normal_at(local.x, local.y)?;
                let a = h.albedo_at(local.x, local.y)?;
                let e = (center - p).normalize();
                let lit = !shadows || {
                    let s = sun.direction();
                    let start = p + s * (1e-4 * h.size) + n * (1e-4 * h.size);
                    h.intersect(&Ray { origin: start, direction: s }).is_none()
                };
                let radiance = if lit { a * disk(model, &angles(&n, sun, &e)) } else { 0.0 };
                Some((cam.to_camera(&p).z, n, a, radiance, p))
            })
            .collect::<Vec<_>>()
    });
    let mut out = OracleRender {
        intensity: Image::zeros(w, hgt),
        depth: Image::filled(w, hgt, -1.0),
        normal: vec![Vec3::zeros(); w * hgt],
        albedo: Image::zeros(w, hgt),
        mask: Image::zeros(w, hgt),
        points: vec![None; w * hgt],
    };
    for (row, cols) in rows.into_iter().enumerate() {
        for (col, hit) in cols.into_iter().enumerate() {
            let i = row * w + col;
            if let Some((z, n, a, rad, p)) = hit {
                out.intensity.data[i] = calibration.apply(rad);
                out.depth.data[i] = z;
                out.normal[i] = n;
                out.albedo.data[i] = a;
                out.mask.data[i] = 1.0;
                out.points[i] = Some(p);
            }
        }
    }
    Ok(out)
}

/// Viewing and illumination geometry of a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_views: usize,
    /// Held-out views taken from the end; default `max(1, n_views / 10)`.
    pub n_test: Option<usize>,
    pub width: usize,
    pub height: usize,
    /// Camera distance from the look-at target.
    pub distance: f64,
    /// Camera elevation range above the patch plane, degrees.
    pub elevation_deg: (f64, f64),
    /// Fraction of the patch side covered by the image at nadir.
    pub footprint: f64,
    /// Look-at target jitter as a fraction of the patch side.
    pub target_jitter: f64,
    pub phase_deg: (f64, f64),
    pub min_sun_elevation_deg: f64,
    /// Per-view exposure: scale drawn from `1 ± exposure_jitter`.
    pub exposure_jitter: f64,
    pub init_points_per_side: usize,
    /// Gaussian noise on initial points as a fraction of the grid cell.
    pub init_noise: f64,
    pub truth_points_per_side: usize,
    pub shadows: bool,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_views: 22,
            n_test: None,
            width: 128,
            height: 128,
            distance: 100.0,
            elevation_deg: (55.0, 80.0),
            footprint: 0.55,
            target_jitter: 0.03,
            phase_deg: (20.0, 50.0),
            min_sun_elevation_deg: 35.0,
            exposure_jitter: 0.0,
            init_points_per_side: 64,
            init_noise: 0.25,
            truth_points_per_side: 128,
            shadows: false,
        }
    }
}

impl DatasetSpec {
    pub fn test_count(&self) -> usize {
        self.n_test.unwrap_or((self.n_views / 10).max(1))
    }
}

/// Golden-angle azimuth sequence in degrees.
fn golden_azimuth(i: usize) -> f64 {
    (i as f64 * 137.507_764_050_037_85) % 360.0
}

/// Sun direction at the requested phase angle from `e`, preferring
/// directions at least `min_elevation` above the `xy` plane of `up`.
fn pick_sun(rng: &mut ChaCha8Rng, e: &Vec3, up: &Vec3, phase_deg: f64, min_elevation_deg: f64) -> Vec3 {
    let a = e.cross(up);
    let a = if a.norm() < 1e-9 { e.cross(&Vec3::x()) } else { a }.normalize();
    let b = e.cross(&a);
    let phi = phase_deg.to_radians();
    let min_sin = min_elevation_deg.to_radians().sin();
    let at = |psi: f64| e * phi.cos() + (a * psi.cos() + b * psi.sin()) * phi.sin();
    for _ in 0..64 {
        let s = at(rng.random_range(0.0..std::f64::consts::TAU));
        if s.dot(up) >= min_sin {
            return s;
        }
    }
    (0..360).map(|k| at((k as f64).to_radians())).max_by(|p, q| p.dot(up).total_cmp(&q.dot(up))).unwrap()
}

/// Renders a full dataset with ground truth from the terrain.
pub fn make_dataset(
    h: &Heightfield,
    spec: &DatasetSpec,
    model: AppearanceModel,
    seed: u64,
) -> Result<SceneDataset, SynthError> {
    if spec.n_views < 3 {
        return Err(SynthError::InvalidSpec(format!("need at least 3 views, got {}", spec.n_views)));
    }
    if spec.test_count() >= spec.n_views {
        return Err(SynthError::InvalidSpec("no training views left".into()));
    }
    if !model.is_physical() {
        return Err(SynthError::UnsupportedModel(model));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let up = h.rotation * Vec3::z();
    let focal = spec.distance * spec.width as f64 / (spec.footprint * h.size);
    let n_train = spec.n_views - spec.test_count();
    let mut views = Vec::with_capacity(spec.n_views);
    let mut truth = Vec::with_capacity(spec.n_views);
    let mut splits = Vec::with_capacity(spec.n_views);
    for i in 0..spec.n_views {
        let az = golden_azimuth(i).to_radians();
        let el = uniform(&mut rng, spec.elevation_deg).to_radians();
        let jitter = spec.target_jitter * h.size;
        let tx = rng.random_range(-jitter..=jitter);
        let ty = rng.random_range(-jitter..=jitter);
        let target_local = Vec3::new(tx, ty, h.height_at(tx, ty).unwrap_or(0.0));
        let dir_local = Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
        let target = h.to_world(&target_local);
        let center = target + h.rotation * dir_local * spec.distance;
        let cam_up = {
            let forward = -(h.rotation * dir_local);
            let u = h.rotation * Vec3::new(-az.sin(), az.cos(), 0.0);
            if forward.cross(&u).norm() < 1e-9 { h.rotation * Vec3::y() } else { u }
        };
        let camera = CameraModel::look_at(&center, &target, &cam_up, focal, spec.width, spec.height)
            .map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
        let phase = uniform(&mut rng, spec.phase_deg);
        let e = (center - target).normalize();
        let s = pick_sun(&mut rng, &e, &up, phase, spec.min_sun_elevation_deg);
        let sun = SunSpec::from_direction(s).expect("unit sun direction");
        let calibration = if spec.exposure_jitter > 0.0 {
            ImageCalibration { scale: 1.0 + rng.random_range(-spec.exposure_jitter..=spec.exposure_jitter), bias: 0.0 }
        } else {
            ImageCalibration::default()
        };
        let r = oracle_render(h, &camera, &sun, model, calibration, spec.shadows)?;
        let name = format!("{i:05}");
        views.push(ViewContext {
            name,
            camera,
            sun,
            calibration: ImageCalibration::default(),
            image: r.intensity.map(quantize16),
        });
        truth.push(Some(ViewTruth {
            normal: r.normal.iter().map(quantize_normal16).collect(),
            albedo: r.albedo.map(quantize16),
            mask: r.mask,
        }));
        splits.push(if i < n_train { Split::Train } else { Split::Test });
    }
    let init_points = if spec.init_points_per_side > 0 {
        let normal = rand_distr::Normal::new(0.0, spec.init_noise * h.size / spec.init_points_per_side as f64)
            .map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
        let pts = h
            .sample_surface(spec.init_points_per_side)
            .into_iter()
            .map(|p| {
                let jitter = Vec3::new(rng.sample(normal), rng.sample(normal), rng.sample(normal));
                quantize_point(&(p + jitter))
            })
            .collect();
        Some(pts)
    } else {
        None
    };
    let truth_points = Some(h.sample_surface(spec.truth_points_per_side).iter().map(quantize_point).collect());
    Ok(SceneDataset {
        name: "synthetic-terrain".into(),
        units: "m".into(),
        views,
        splits,
        init_points,
        truth,
        truth_points,
    })
}

/// Evenly spread points on the spherical cap `|p − center| = radius`,
/// within `half_angle_deg` of the `+z` pole.
pub fn sphere_cap_points(center: &Vec3, radius: f64, half_angle_deg: f64, n: usize) -> Vec<Vec3> {
    let cos_max = half_angle_deg.to_radians().cos();
    (0..n)
        .map(|k| {
            let z = 1.0 - (1.0 - cos_max) * (k as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = k as f64 * 2.399_963_229_728_653;
            center + Vec3::new(r * phi.cos(), r * phi.sin(), z) * radius
        })
        .collect()
}

/// Opaque tangent splats tiling a spherical cap, one per sample point, with
/// isotropic scale `overlap ×` the mean point spacing.
pub fn sphere_cap_splats(center: &Vec3, radius: f64, half_angle_deg: f64, n: usize, overlap: f64) -> SplatSet {
    let pts = sphere_cap_points(center, radius, half_angle_deg, n);
    let area = std::f64::consts::TAU * radius * radius * (1.0 - half_angle_deg.to_radians().cos());
    let spacing = (area / n as f64).sqrt();
    let mut set = SplatSet::empty(AppearanceModel::Lambert);
    for p in pts {
        let nrm = (p - center).normalize();
        let q = UnitQuaternion::from_rotation_matrix(&tangent_frame(&nrm));
        set.push(p, Vec2::new(spacing * overlap, spacing * overlap), q, 0.99, &[0.5]);
    }
    set
}

/// Rotation whose third column is `n`.
fn tangent_frame(n: &Vec3) -> Mat3 {
    let helper = if n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let u = helper.cross(n).normalize();
    let v = n.cross(&u);
    Mat3::from_columns(&[u, v, *n])
}

/// Cameras on a ring above `target`, looking at it.
pub fn ring_views(target: &Vec3, distance: f64, elevation_deg: f64, n: usize, focal: f64, size: usize) -> Vec<ViewContext> {
    let el = elevation_deg.to_radians();
    (0..n)
        .map(|i| {
            let az = (i as f64 / n as f64) * std::f64::consts::TAU;
            let dir = Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
            let up = Vec3::new(-az.sin(), az.cos(), 0.0);
            let camera = CameraModel::look_at(&(target + dir * distance), target, &up, focal, size, size)
                .expect("ring camera");
            ViewContext {
                name: format!("{i:05}"),
                camera,
                sun: SunSpec::from_direction(Vec3::z()).unwrap(),
                calibration: ImageCalibration::default(),
                image: Image::zeros(size, size),
            }
        })
        .collect()
}

/// Small random scene in front of an identity camera with focal length
/// equal to the image width: `n` splats at depths 2 to 4 with random raw
/// (non-unit) quaternions, a random target image and a random calibration.
/// Used for gradient checks and demos.
pub fn random_splat_scene(model: AppearanceModel, n: usize, width: usize, height: usize, seed: u64) -> (SplatSet, ViewContext) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = SplatSet::empty(model);
    for _ in 0..n {
        s.positions.push(Vec3::new(rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6), rng.random_range(2.0..4.0)));
        s.log_scales.push([rng.random_range(-2.0f64..-0.7), rng.random_range(-2.0f64..-0.7)]);
        let m: f64 = rng.random_range(0.5..1.5);
        s.rotations.push(crate::splats::random_quaternion(&mut rng).to_array().map(|c| c * m));
        s.opacity_logits.push(rng.random_range(-1.0..3.0));
        for _ in 0..model.param_count() {
            s.appearance.push(rng.random_range(-0.6..0.4));
        }
        s.grad_accum.push(0.0);
        s.grad_count.push(0);
    }
    let w = width as f64;
    let camera = CameraModel::new((w, w), (w / 2.0, height as f64 / 2.0), Mat3::identity(), Vec3::zeros(), width, height)
        .expect("valid camera");
    let sun = SunSpec::from_direction(Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), -1.0)).expect("non-zero sun");
    let calibration = ImageCalibration { scale: rng.random_range(0.8..1.2), bias: rng.random_range(-0.05..0.05) };
    let image = Image::from_fn(width, height, |_, _| rng.random_range(0.0..0.8));
    (s, ViewContext { name: "random".into(), camera, sun, calibration, image })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reflectance::phase_weight;

    fn flat_spec() -> TerrainSpec {
        TerrainSpec { crater_count: 0, spot_count: 0, resolution: 17, size: 10.0, base_albedo: 0.4, ..Default::default() }
    }

    fn nadir_camera(h: &Heightfield, size: usize) -> CameraModel {
        CameraModel::look_at(&h.to_world(&Vec3::new(0.0, 0.0, 20.0)), &h.to_world(&Vec3::zeros()), &(h.rotation * Vec3::y()), 3.0 * size as f64, size, size).unwrap()
    }

    #[test]
    fn flat_terrain_is_flat_and_uniform() {
        let h = make_terrain(&flat_spec(), 1).unwrap();
        assert!(h.heights.iter().all(|&z| z == 0.0));
        assert!(h.albedo.iter().all(|&a| a == 0.4));
    }

    #[test]
    fn single_crater_profile() {
        let spec = TerrainSpec { crater_count: 0, spot_count: 0, resolution: 201, size: 40.0, ..Default::default() };
        let c = Crater { center: [0.0, 0.0], radius: 8.0, depth: 2.0, rim_height: 0.4 };
        let h = Heightfield::from_features(&spec, vec![c], vec![]);
        let n = h.resolution;
        let argmin = (0..h.heights.len()).min_by(|&a, &b| h.heights[a].total_cmp(&h.heights[b])).unwrap();
        assert_eq!((argmin % n, argmin / n), (n / 2, n / 2));
        let profile: Vec<f64> = (0..200).map(|k| h.height_at(k as f64 * 0.1, 0.0).unwrap()).collect();
        let peak = (0..profile.len()).max_by(|&a, &b| profile[a].total_cmp(&profile[b])).unwrap();
        assert!((peak as f64 * 0.1 - 8.0).abs() <= 0.2);
    }

    #[test]
    fn terrain_is_deterministic() {
        let a = make_terrain(&TerrainSpec::default(), 7).unwrap();
        let b = make_terrain(&TerrainSpec::default(), 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn lambert_flat_plane_values() {
        let h = make_terrain(&flat_spec(), 0).unwrap();
        let cam = nadir_camera(&h, 16);
        let cal = ImageCalibration { scale: 1.5, bias: 0.0 };
        let overhead = oracle_render(&h, &cam, &SunSpec::from_direction(Vec3::z()).unwrap(), AppearanceModel::Lambert, cal, false).unwrap();
        assert!(overhead.mask.data.iter().all(|&m| m == 1.0));
        for v in &overhead.intensity.data {
            assert!((v - 1.5 * 0.4).abs() < 1e-12);
        }
        let tilted = SunSpec::from_azimuth_elevation(10.0, 30.0);
        let r = oracle_render(&h, &cam, &tilted, AppearanceModel::Lambert, cal, false).unwrap();
        for v in &r.intensity.data {
            assert!((v - 1.5 * 0.4 / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn lommel_seeliger_with_sun_behind_distant_camera_is_albedo() {
        let h = make_terrain(&TerrainSpec { resolution: 65, size: 64.0, ..Default::default() }, 3).unwrap();
        // Nearly orthographic view: e varies across the image by < 1e-5 rad.
        let dir = Vec3::new(0.3, -0.2, 1.0).normalize();
        let cam = CameraModel::look_at(&(dir * 1e7), &Vec3::zeros(), &Vec3::y(), 1e7 * 32.0 / 40.0, 32, 32).unwrap();
        let r = oracle_render(&h, &cam, &SunSpec::from_direction(dir).unwrap(), AppearanceModel::LommelSeeliger, ImageCalibration::default(), false)
            .unwrap();
        let mut count = 0;
        for i in 0..r.mask.len() {
            if r.mask.data[i] > 0.0 {
                count += 1;
                assert!((r.intensity.data[i] - r.albedo.data[i]).abs() < 1e-4 * r.albedo.data[i]);
            }
        }
        assert!(count > 900);
    }

    #[test]
    fn lunar_lambert_is_phase_weighted_mix() {
        let h = make_terrain(&TerrainSpec { resolution: 129, ..Default::default() }, 4).unwrap();
        let cam = CameraModel::look_at(&Vec3::new(30.0, -40.0, 80.0), &Vec3::zeros(), &Vec3::y(), 60.0, 40, 40).unwrap();
        let sun = SunSpec::from_azimuth_elevation(40.0, 55.0);
        let cal = ImageCalibration { scale: 1.2, bias: 0.01 };
        let render = |m| oracle_render(&h, &cam, &sun, m, cal, false).unwrap();
        let (l, ls, ll) = (render(AppearanceModel::Lambert), render(AppearanceModel::LommelSeeliger), render(AppearanceModel::LunarLambert));
        for i in 0..ll.mask.len() {
            let Some(p) = ll.points[i] else { continue };
            let e = (cam.center() - p).normalize();
            let g = phase_weight(sun.direction().dot(&e).clamp(-1.0, 1.0).acos());
            let expect = (1.0 - g) * l.intensity.data[i] + g * ls.intensity.data[i];
            assert!((ll.intensity.data[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_is_rotation_covariant() {
        let h = make_terrain(&TerrainSpec { resolution: 129, ..Default::default() }, 5).unwrap();
        let cam = CameraModel::look_at(&Vec3::new(-20.0, 35.0, 70.0), &Vec3::new(2.0, 1.0, 0.0), &Vec3::y(), 50.0, 32, 32).unwrap();
        let sun = SunSpec::from_azimuth_elevation(-70.0, 50.0);
        let q = UnitQuaternion::from_axis_angle(&Vec3::new(1.0, 2.0, -0.5).normalize(), 1.1).to_rotation_matrix();
        let t = Vec3::new(3.0, -7.0, 11.0);
        let h2 = h.transformed(&q, &t);
        let r_cw = cam.rotation * q.transpose();
        let cam2 = CameraModel::new((cam.fx, cam.fy), (cam.cx, cam.cy), r_cw, cam.translation - r_cw * t, 32, 32).unwrap();
        let sun2 = SunSpec::from_direction(q * sun.direction()).unwrap();
        for model in [AppearanceModel::Lambert, AppearanceModel::LommelSeeliger] {
            let a = oracle_render(&h, &cam, &sun, model, ImageCalibration::default(), false).unwrap();
            let b = oracle_render(&h2, &cam2, &sun2, model, ImageCalibration::default(), false).unwrap();
            assert_eq!(a.mask, b.mask);
            for i in 0..a.mask.len() {
                assert!((a.intensity.data[i] - b.intensity.data[i]).abs() < 1e-9);
                assert!((q * a.normal[i] - b.normal[i]).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn lambert_is_view_independent() {
        let h = make_terrain(&TerrainSpec { resolution: 129, ..Default::default() }, 6).unwrap();
        let sun = SunSpec::from_azimuth_elevation(20.0, 60.0);
        let cams = [
            CameraModel::look_at(&Vec3::new(0.0, 0.0, 90.0), &Vec3::zeros(), &Vec3::y(), 40.0, 24, 24).unwrap(),
            CameraModel::look_at(&Vec3::new(40.0, 10.0, 80.0), &Vec3::zeros(), &Vec3::y(), 40.0, 24, 24).unwrap(),
        ];
        for cam in cams {
            let r = oracle_render(&h, &cam, &sun, AppearanceModel::Lambert, ImageCalibration::default(), false).unwrap();
            for i in 0..r.mask.len() {
                let Some(p) = r.points[i] else { continue };
                let local = h.to_local(&p);
                let n = h.local_normal_at(local.x, local.y).unwrap();
                let expect = h.albedo_at(local.x, local.y).unwrap() * n.dot(&sun.direction()).max(0.0);
                assert!((r.intensity.data[i] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn misses_are_background() {
        let h = make_terrain(&flat_spec(), 0).unwrap();
        let cam = CameraModel::look_at(&Vec3::new(0.0, 0.0, 20.0), &Vec3::zeros(), &Vec3::y(), 4.0, 16, 16).unwrap();
        let r = oracle_render(&h, &cam, &SunSpec::from_direction(Vec3::z()).unwrap(), AppearanceModel::Lambert, ImageCalibration { scale: 1.0, bias: 0.2 }, false)
            .unwrap();
        assert_eq!(r.intensity.get(0, 0), 0.0);
        assert_eq!(r.depth.get(0, 0), -1.0);
        assert_eq!(r.mask.get(8, 8), 1.0);
        assert!(oracle_render(&h, &cam, &SunSpec::from_direction(Vec3::z()).unwrap(), AppearanceModel::SphericalHarmonics, ImageCalibration::default(), false).is_err());
    }

    #[test]
    fn shadows_darken_crater_walls() {
        let spec = TerrainSpec { crater_count: 0, spot_count: 0, resolution: 129, size: 40.0, ..Default::default() };
        let c = Crater { center: [0.0, 0.0], radius: 10.0, depth: 5.0, rim_height: 1.0 };
        let h = Heightfield::from_features(&spec, vec![c], vec![]);
        let cam = CameraModel::look_at(&Vec3::new(0.0, 0.0, 80.0), &Vec3::zeros(), &Vec3::y(), 60.0, 32, 32).unwrap();
        let sun = SunSpec::from_azimuth_elevation(0.0, 15.0);
        let lit = oracle_render(&h, &cam, &sun, AppearanceModel::Lambert, ImageCalibration::default(), false).unwrap();
        let shadowed = oracle_render(&h, &cam, &sun, AppearanceModel::Lambert, ImageCalibration::default(), true).unwrap();
        let dark = (0..lit.mask.len()).filter(|&i| shadowed.intensity.data[i] == 0.0 && lit.intensity.data[i] > 0.0).count();
        assert!(dark > 0);
        assert!(shadowed.intensity.data.iter().zip(&lit.intensity.data).all(|(s, l)| s <= l));
    }

    fn small_dataset_spec(n: usize) -> DatasetSpec {
        DatasetSpec { n_views: n, width: 24, height: 24, init_points_per_side: 8, truth_points_per_side: 16, ..Default::default() }
    }

    #[test]
    fn dataset_split_and_determinism() {
        let h = make_terrain(&TerrainSpec { resolution: 65, ..Default::default() }, 2).unwrap();
        let a = make_dataset(&h, &small_dataset_spec(3), AppearanceModel::Lambert, 9).unwrap();
        assert_eq!(a.splits, vec![Split::Train, Split::Train, Split::Test]);
        let b = make_dataset(&h, &small_dataset_spec(3), AppearanceModel::Lambert, 9).unwrap();
        assert_eq!(a, b);
        assert!(make_dataset(&h, &small_dataset_spec(2), AppearanceModel::Lambert, 9).is_err());
        assert_eq!(DatasetSpec::default().test_count(), 2);
    }

    #[test]
    fn views_respect_phase_and_sun_elevation() {
        let h = make_terrain(&TerrainSpec { resolution: 65, ..Default::default() }, 2).unwrap();
        let spec = small_dataset_spec(12);
        let d = make_dataset(&h, &spec, AppearanceModel::Lambert, 1).unwrap();
        for v in &d.views {
            let s = v.sun.direction();
            assert!(s.z.asin().to_degrees() >= spec.min_sun_elevation_deg - 1e-9);
            let e = v.camera.center().normalize();
            let phase = s.dot(&e).acos().to_degrees();
            assert!(phase > 15.0 && phase < 55.0, "phase {phase}");
            assert!(d.view_truth(0).unwrap().mask.data.iter().all(|&m| m == 1.0));
        }
    }

    #[test]
    fn truth_points_reproject_to_rendered_depth() {
        let h = make_terrain(&TerrainSpec { resolution: 129, ..Default::default() }, 8).unwrap();
        let cam = CameraModel::look_at(&Vec3::new(10.0, -30.0, 90.0), &Vec3::zeros(), &Vec3::y(), 80.0, 48, 48).unwrap();
        let r = oracle_render(&h, &cam, &SunSpec::from_direction(Vec3::z()).unwrap(), AppearanceModel::Lambert, ImageCalibration::default(), false).unwrap();
        for i in 0..r.mask.len() {
            let Some(p) = r.points[i] else { continue };
            let local = h.to_local(&p);
            let surf = h.surface_point(local.x, local.y).unwrap();
            assert!((cam.to_camera(&surf).z - r.depth.data[i]).abs() < 1e-4 * h.size);
        }
        for p in h.sample_surface(20) {
            let xc = cam.to_camera(&p);
            let px = cam.pixel_of_camera_point(&xc);
            let (c, rr) = (px.x.floor() as usize, px.y.floor() as usize);
            if c >= 48 || rr >= 48 || px.x < 0.0 || px.y < 0.0 {
                continue;
            }
            let ray = crate::geometry::pixel_ray(&cam, &px);
            let (_, hit) = h.intersect(&ray).unwrap();
            assert!((cam.to_camera(&h.to_world(&hit)).z - xc.z).abs() < 1e-4 * h.size);
        }
    }

    #[test]
    fn sphere_cap_splats_lie_on_sphere() {
        let c = Vec3::new(0.0, 0.0, -1.0);
        let s = sphere_cap_splats(&c, 2.0, 40.0, 200, 0.6);
        for k in 0..s.len() {
            let f = s.frame(k);
            assert!(((f.position - c).norm() - 2.0).abs() < 1e-12);
            let (_, _, tw) = f.axes();
            assert!((tw - (f.position - c) / 2.0).norm() < 1e-9);
        }
    }
}
