//! The learned scene: planar Gaussians in structure-of-arrays layout.
//!
//! Parameters are stored unconstrained: scales as logarithms, opacity as a
//! logit, physics albedo as a logarithm, orientation as a raw quaternion that
//! is renormalized after every update.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::geometry::{rotation_from_raw, SplatFrame, UnitQuaternion, Vec2, Vec3};
use crate::ply::{self, PlyData};
use crate::reflectance::{AppearanceModel, AppearanceRef, ImageCalibration, SH_COEFFS, SH_DC, SH_OFFSET};

const CHECKPOINT_MAGIC: &[u8; 8] = b"PSPLAT01";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SplatError {
    #[error("no initial points and no random splat count given")]
    EmptyInit,
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Ply(#[from] ply::PlyError),
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Initialization settings for [`SplatSet::init_from_points`].
#[derive(Debug, Clone, PartialEq)]
pub struct InitConfig {
    pub opacity: f64,
    pub albedo: f64,
    /// Mean image intensity matched by the SH DC term.
    pub sh_intensity: f64,
    /// Number of random splats when no points are given.
    pub random_count: Option<usize>,
    /// Box sampled by random initialization.
    pub random_bounds: (Vec3, Vec3),
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            opacity: 0.1,
            albedo: 0.5,
            sh_intensity: 0.5,
            random_count: None,
            random_bounds: (Vec3::from_element(-1.0), Vec3::from_element(1.0)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplatSet {
    pub model: AppearanceModel,
    pub positions: Vec<Vec3>,
    pub log_scales: Vec<[f64; 2]>,
    /// Raw `(w, x, y, z)` passive quaternions `q_WS`.
    pub rotations: Vec<[f64; 4]>,
    pub opacity_logits: Vec<f64>,
    /// `model.param_count()` values per splat: SH coefficients or log-albedo.
    pub appearance: Vec<f64>,
    /// Running sum of the screen-space gradient norm, for densification.
    pub grad_accum: Vec<f64>,
    pub grad_count: Vec<u32>,
}

/// For every splat after a densify/prune step: the index it continues, or
/// `None` for a newly created splat.
pub type Remap = Vec<Option<usize>>;

impl SplatSet {
    pub fn empty(model: AppearanceModel) -> Self {
        Self {
            model,
            positions: Vec::new(),
            log_scales: Vec::new(),
            rotations: Vec::new(),
            opacity_logits: Vec::new(),
            appearance: Vec::new(),
            grad_accum: Vec::new(),
            grad_count: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn params_per_splat(&self) -> usize {
        self.model.param_count()
    }

    /// Appends one splat with constrained (squashed) parameter values.
    pub fn push(
        &mut self,
        position: Vec3,
        scale: Vec2,
        orientation: UnitQuaternion,
        opacity: f64,
        appearance: &[f64],
    ) {
        assert_eq!(appearance.len(), self.params_per_splat());
        self.positions.push(position);
        self.log_scales.push([scale.x.ln(), scale.y.ln()]);
        self.rotations.push(orientation.to_array());
        self.opacity_logits.push(logit(opacity));
        if self.model.is_physical() {
            self.appearance.push(appearance[0].ln());
        } else {
            self.appearance.extend_from_slice(appearance);
        }
        self.grad_accum.push(0.0);
        self.grad_count.push(0);
    }

    pub fn opacity(&self, k: usize) -> f64 {
        sigmoid(self.opacity_logits[k])
    }

    pub fn scale(&self, k: usize) -> Vec2 {
        Vec2::new(self.log_scales[k][0].exp(), self.log_scales[k][1].exp())
    }

    pub fn frame(&self, k: usize) -> SplatFrame {
        SplatFrame {
            position: self.positions[k],
            scale: self.scale(k),
            orientation: UnitQuaternion::from_array(self.rotations[k]),
        }
    }

    /// Splat normal `t_w` (unoriented).
    pub fn normal(&self, k: usize) -> Vec3 {
        rotation_from_raw(&self.rotations[k]).column(2).into()
    }

    /// Relative albedo of a physics splat; `None` for SH.
    pub fn albedo(&self, k: usize) -> Option<f64> {
        self.model.is_physical().then(|| self.appearance[k].exp())
    }

    pub fn sh_coeffs(&self, k: usize) -> &[f64; SH_COEFFS] {
        self.appearance[k * SH_COEFFS..(k + 1) * SH_COEFFS].try_into().unwrap()
    }

    pub fn appearance_ref(&self, k: usize) -> AppearanceRef<'_> {
        if self.model.is_physical() {
            AppearanceRef::Albedo(self.model, self.appearance[k].exp())
        } else {
            AppearanceRef::Sh(self.sh_coeffs(k))
        }
    }

    /// One splat per point, isotropic scale from the 3 nearest neighbours,
    /// random orientation.
    pub fn init_from_points(
        points: &[Vec3],
        model: AppearanceModel,
        seed: u64,
        cfg: &InitConfig,
    ) -> Result<Self, SplatError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let generated;
        let points = if points.is_empty() {
            let n = cfg.random_count.filter(|&n| n > 0).ok_or(SplatError::EmptyInit)?;
            let (lo, hi) = cfg.random_bounds;
            generated = (0..n)
                .map(|_| {
                    Vec3::new(
                        rng.random_range(lo.x..=hi.x),
                        rng.random_range(lo.y..=hi.y),
                        rng.random_range(lo.z..=hi.z),
                    )
                })
                .collect::<Vec<_>>();
            &generated[..]
        } else {
            points
        };

        let scales = knn_scales(points);
        let appearance: Vec<f64> = if model.is_physical() {
            vec![cfg.albedo]
        } else {
            let mut c = vec![0.0; SH_COEFFS];
            c[0] = (cfg.sh_intensity - SH_OFFSET) / SH_DC;
            c
        };
        let mut set = SplatSet::empty(model);
        for (p, s) in points.iter().zip(scales) {
            let q = random_quaternion(&mut rng);
            set.push(*p, Vec2::new(s, s), q, cfg.opacity, &appearance);
        }
        Ok(set)
    }

    /// Clones or splits splats with a large mean screen gradient and prunes
    /// nearly transparent ones. Resets the gradient statistics.
    pub fn densify_and_prune<R: Rng>(
        &mut self,
        grad_threshold: f64,
        opacity_floor: f64,
        scene_extent: f64,
        rng: &mut R,
    ) -> Remap {
        let n = self.len();
        let p = self.params_per_splat();
        let mut out = SplatSet::empty(self.model);
        let mut remap: Remap = Vec::with_capacity(n);
        let mut clones = Vec::new();
        for k in 0..n {
            let mean = if self.grad_count[k] > 0 {
                self.grad_accum[k] / self.grad_count[k] as f64
            } else {
                0.0
            };
            let app = &self.appearance[k * p..(k + 1) * p];
            if mean > grad_threshold {
                let s = self.scale(k);
                if s.max() < 0.01 * scene_extent {
                    out.copy_raw(self, k);
                    remap.push(Some(k));
                    clones.push(k);
                } else {
                    let r = rotation_from_raw(&self.rotations[k]);
                    let child_log = [self.log_scales[k][0] - 1.6f64.ln(), self.log_scales[k][1] - 1.6f64.ln()];
                    for _ in 0..2 {
                        let a: f64 = rng.sample(StandardNormal);
                        let b: f64 = rng.sample(StandardNormal);
                        let offset = r * Vec3::new(a * s.x, b * s.y, 0.0);
                        out.positions.push(self.positions[k] + offset);
                        out.log_scales.push(child_log);
                        out.rotations.push(self.rotations[k]);
                        out.opacity_logits.push(self.opacity_logits[k]);
                        out.appearance.extend_from_slice(app);
                        out.grad_accum.push(0.0);
                        out.grad_count.push(0);
                        remap.push(None);
                    }
                }
            } else {
                out.copy_raw(self, k);
                remap.push(Some(k));
            }
        }
        for k in clones {
            out.copy_raw(self, k);
            remap.push(None);
        }
        // prune
        let keep: Vec<bool> = out.opacity_logits.iter().map(|&l| sigmoid(l) >= opacity_floor).collect();
        let mut pruned = SplatSet::empty(self.model);
        let mut pruned_remap = Vec::with_capacity(remap.len());
        for (i, &kept) in keep.iter().enumerate() {
            if kept {
                pruned.copy_raw(&out, i);
                pruned_remap.push(remap[i]);
            }
        }
        for (a, c) in pruned.grad_accum.iter_mut().zip(pruned.grad_count.iter_mut()) {
            *a = 0.0;
            *c = 0;
        }
        *self = pruned;
        pruned_remap
    }

    fn copy_raw(&mut self, src: &SplatSet, k: usize) {
        let p = src.params_per_splat();
        self.positions.push(src.positions[k]);
        self.log_scales.push(src.log_scales[k]);
        self.rotations.push(src.rotations[k]);
        self.opacity_logits.push(src.opacity_logits[k]);
        self.appearance.extend_from_slice(&src.appearance[k * p..(k + 1) * p]);
        self.grad_accum.push(src.grad_accum[k]);
        self.grad_count.push(src.grad_count[k]);
    }

    /// Caps every opacity at `max_opacity`.
    pub fn reset_opacity(&mut self, max_opacity: f64) {
        let cap = logit(max_opacity);
        for l in &mut self.opacity_logits {
            *l = l.min(cap);
        }
    }

    /// Renormalizes all quaternions to unit length.
    pub fn normalize_rotations(&mut self) {
        for q in &mut self.rotations {
            *q = UnitQuaternion::from_array(*q).to_array();
        }
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        let n = self.len();
        let p = self.params_per_splat();
        if self.log_scales.len() != n
            || self.rotations.len() != n
            || self.opacity_logits.len() != n
            || self.appearance.len() != n * p
            || self.grad_accum.len() != n
            || self.grad_count.len() != n
        {
            return Err("per-splat arrays differ in length".into());
        }
        for k in 0..n {
            let o = self.opacity(k);
            if !(o > 0.0 && o < 1.0) {
                return Err(format!("splat {k}: opacity {o} outside (0, 1)"));
            }
            let s = self.scale(k);
            if !(s.x > 0.0 && s.y > 0.0 && s.x.is_finite() && s.y.is_finite()) {
                return Err(format!("splat {k}: non-positive scale {s:?}"));
            }
            let qn = UnitQuaternion { w: self.rotations[k][0], x: self.rotations[k][1], y: self.rotations[k][2], z: self.rotations[k][3] }.norm();
            if (qn - 1.0).abs() > 1e-9 {
                return Err(format!("splat {k}: quaternion norm {qn}"));
            }
            if !self.positions[k].iter().all(|v| v.is_finite()) {
                return Err(format!("splat {k}: non-finite position"));
            }
        }
        Ok(())
    }

    /// Axis-aligned bounds of the splat centers.
    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        bounding_box(&self.positions)
    }

    /// Binary checkpoint: header, column-major little-endian `f32` arrays,
    /// then per-image calibration.
    pub fn write_checkpoint<W: Write>(&self, mut w: W, calibrations: &[ImageCalibration]) -> Result<(), SplatError> {
        let n = self.len();
        let p = self.params_per_splat();
        let mut buf = Vec::with_capacity(28 + n * (10 + p) * 4 + calibrations.len() * 8);
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        for v in [CHECKPOINT_VERSION, self.model.code(), n as u32, p as u32, calibrations.len() as u32] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut col = |f: &dyn Fn(usize) -> f64| {
            for k in 0..n {
                buf.extend_from_slice(&(f(k) as f32).to_le_bytes());
            }
        };
        for a in 0..3 {
            col(&|k| self.positions[k][a]);
        }
        for a in 0..2 {
            col(&|k| self.log_scales[k][a]);
        }
        for a in 0..4 {
            col(&|k| self.rotations[k][a]);
        }
        col(&|k| self.opacity_logits[k]);
        for a in 0..p {
            col(&|k| self.appearance[k * p + a]);
        }
        for c in calibrations {
            buf.extend_from_slice(&(c.scale as f32).to_le_bytes());
        }
        for c in calibrations {
            buf.extend_from_slice(&(c.bias as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(Self, Vec<ImageCalibration>), SplatError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let bad = |m: &str| SplatError::Checkpoint(m.to_string());
        if bytes.len() < 28 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("missing magic"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        if u32_at(8) != CHECKPOINT_VERSION {
            return Err(bad("unsupported version"));
        }
        let model = AppearanceModel::from_code(u32_at(12)).ok_or_else(|| bad("unknown appearance model"))?;
        let n = u32_at(16) as usize;
        let p = u32_at(20) as usize;
        let views = u32_at(24) as usize;
        if p != model.param_count() {
            return Err(bad("appearance width does not match model"));
        }
        let need = 28 + n * (10 + p) * 4 + views * 8;
        if bytes.len() != need {
            return Err(SplatError::Checkpoint(format!("expected {need} bytes, found {}", bytes.len())));
        }
        let f = |i: usize| f32::from_le_bytes(bytes[28 + 4 * i..32 + 4 * i].try_into().unwrap()) as f64;
        let at = |c: usize, k: usize| f(c * n + k);
        let mut set = SplatSet::empty(model);
        for k in 0..n {
            set.positions.push(Vec3::new(at(0, k), at(1, k), at(2, k)));
            set.log_scales.push([at(3, k), at(4, k)]);
            set.rotations.push([at(5, k), at(6, k), at(7, k), at(8, k)]);
            set.opacity_logits.push(at(9, k));
            for a in 0..p {
                set.appearance.push(at(10 + a, k));
            }
            set.grad_accum.push(0.0);
            set.grad_count.push(0);
        }
        let base = n * (10 + p);
        let cals = (0..views)
            .map(|v| ImageCalibration { scale: f(base + v), bias: f(base + views + v) })
            .collect();
        Ok((set, cals))
    }

    /// Point cloud with position, normal `t_w`, opacity and (physics) albedo.
    pub fn to_ply(&self) -> PlyData {
        let mut d = PlyData::from_points(&self.positions);
        let normals: Vec<Vec3> = (0..self.len()).map(|k| self.normal(k)).collect();
        for (a, name) in ["nx", "ny", "nz"].iter().enumerate() {
            d.push_column(name, normals.iter().map(|n| n[a]).collect());
        }
        d.push_column("opacity", (0..self.len()).map(|k| self.opacity(k)).collect());
        if self.model.is_physical() {
            d.push_column("albedo", (0..self.len()).map(|k| self.albedo(k).unwrap()).collect());
        }
        d
    }
}

pub fn bounding_box(points: &[Vec3]) -> Option<(Vec3, Vec3)> {
    let first = *points.first()?;
    Some(points.iter().fold((first, first), |(lo, hi), p| (lo.inf(p), hi.sup(p))))
}

/// Uniform random rotation (Shoemake).
pub fn random_quaternion<R: Rng>(rng: &mut R) -> UnitQuaternion {
    let (u1, u2, u3): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
    let tau = std::f64::consts::TAU;
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    UnitQuaternion::new_normalize(b * (tau * u3).cos(), a * (tau * u2).sin(), a * (tau * u2).cos(), b * (tau * u3).sin())
}

/// Mean distance to the (up to) three nearest neighbours of every point;
/// falls back to 1% of the bounding-box diagonal when no neighbour exists.
fn knn_scales(points: &[Vec3]) -> Vec<f64> {
    let n = points.len();
    let diag = bounding_box(points).map_or(0.0, |(lo, hi)| (hi - lo).norm());
    let fallback = 0.01 * if diag > 0.0 { diag } else { 1.0 };
    if n < 2 {
        return vec![fallback; n];
    }
    let grid = crate::spatial::PointGrid::new(points);
    let k = 3.min(n - 1);
    (0..n)
        .map(|i| {
            let nn = grid.k_nearest(&points[i], k + 1);
            let dists: Vec<f64> = nn.iter().filter(|&&(j, _)| j != i).take(k).map(|&(_, d)| d).collect();
            let m = dists.iter().sum::<f64>() / dists.len().max(1) as f64;
            if m > 0.0 {
                m
            } else {
                fallback
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn tetrahedron() -> Vec<Vec3> {
        vec![
            Vec3::new(1.0, 1.0, 1.0),
            Vec3::new(1.0, -1.0, -1.0),
            Vec3::new(-1.0, 1.0, -1.0),
            Vec3::new(-1.0, -1.0, 1.0),
        ]
    }

    #[test]
    fn tetrahedron_scales_equal_edge_length() {
        let pts = tetrahedron();
        // brute-force nearest-neighbour oracle
        let edge = (0..4)
            .flat_map(|i| (0..4).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| (pts[i] - pts[j]).norm())
            .fold(f64::INFINITY, f64::min);
        let set = SplatSet::init_from_points(&pts, AppearanceModel::Lambert, 3, &InitConfig::default()).unwrap();
        assert_eq!(set.len(), 4);
        for k in 0..4 {
            assert_relative_eq!(set.scale(k).x, edge, epsilon = 1e-9);
            assert_relative_eq!(set.scale(k).y, edge, epsilon = 1e-9);
            assert_relative_eq!(set.opacity(k), 0.1, epsilon = 1e-12);
            assert_relative_eq!(set.albedo(k).unwrap(), 0.5, epsilon = 1e-12);
        }
        set.check_invariants().unwrap();
    }

    #[test]
    fn single_point_uses_fallback_scale() {
        let set = SplatSet::init_from_points(&[Vec3::new(2.0, 0.0, 1.0)], AppearanceModel::LommelSeeliger, 1, &InitConfig::default()).unwrap();
        assert_relative_eq!(set.scale(0).x, 0.01, epsilon = 1e-15);
    }

    #[test]
    fn init_is_deterministic() {
        let pts = tetrahedron();
        let a = SplatSet::init_from_points(&pts, AppearanceModel::SphericalHarmonics, 11, &InitConfig::default()).unwrap();
        let b = SplatSet::init_from_points(&pts, AppearanceModel::SphericalHarmonics, 11, &InitConfig::default()).unwrap();
        assert_eq!(a, b);
        let c = SplatSet::init_from_points(&pts, AppearanceModel::SphericalHarmonics, 12, &InitConfig::default()).unwrap();
        assert_ne!(a.rotations, c.rotations);
    }

    #[test]
    fn sh_dc_matches_target_intensity() {
        let cfg = InitConfig { sh_intensity: 0.37, ..Default::default() };
        let set = SplatSet::init_from_points(&tetrahedron(), AppearanceModel::SphericalHarmonics, 0, &cfg).unwrap();
        let v = crate::reflectance::eval_sh(set.sh_coeffs(0), &Vec3::new(0.2, 0.3, -0.9).normalize());
        assert_relative_eq!(v, 0.37, epsilon = 1e-12);
    }

    #[test]
    fn empty_init_errors_without_random_count() {
        let r = SplatSet::init_from_points(&[], AppearanceModel::Lambert, 0, &InitConfig::default());
        assert!(matches!(r, Err(SplatError::EmptyInit)));
        let cfg = InitConfig { random_count: Some(7), ..Default::default() };
        let set = SplatSet::init_from_points(&[], AppearanceModel::Lambert, 0, &cfg).unwrap();
        assert_eq!(set.len(), 7);
        set.check_invariants().unwrap();
    }

    fn grid_set(n: usize) -> SplatSet {
        let pts: Vec<Vec3> = (0..n).map(|i| Vec3::new(i as f64, (i * 7 % 5) as f64, 0.0)).collect();
        let cfg = InitConfig { opacity: 0.5, ..Default::default() };
        SplatSet::init_from_points(&pts, AppearanceModel::Lambert, 5, &cfg).unwrap()
    }

    #[test]
    fn densify_identity_when_nothing_crosses() {
        let mut s = grid_set(6);
        let before = s.clone();
        let remap = s.densify_and_prune(2e-4, 5e-3, 10.0, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(s, before);
        assert_eq!(remap, (0..6).map(Some).collect::<Vec<_>>());
    }

    #[test]
    fn prune_removes_exactly_one() {
        let mut s = grid_set(6);
        s.opacity_logits[2] = logit(1e-3);
        let remap = s.densify_and_prune(2e-4, 5e-3, 10.0, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(s.len(), 5);
        assert_eq!(remap, vec![Some(0), Some(1), Some(3), Some(4), Some(5)]);
    }

    #[test]
    fn split_large_splat() {
        let mut s = grid_set(4);
        let parent = s.scale(1);
        s.grad_accum[1] = 1.0;
        s.grad_count[1] = 2;
        s.densify_and_prune(2e-4, 5e-3, 10.0, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(s.len(), 5);
        for k in [1, 2] {
            assert_relative_eq!(s.scale(k).x, parent.x / 1.6, epsilon = 1e-12);
            assert_relative_eq!(s.scale(k).y, parent.y / 1.6, epsilon = 1e-12);
        }
        s.check_invariants().unwrap();
    }

    #[test]
    fn clone_small_splat() {
        let mut s = grid_set(4);
        s.log_scales[0] = [(0.01f64).ln(); 2];
        s.grad_accum[0] = 1.0;
        s.grad_count[0] = 1;
        let remap = s.densify_and_prune(2e-4, 5e-3, 10.0, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(s.len(), 5);
        assert_eq!(remap.last(), Some(&None));
        assert_eq!(s.positions[0], s.positions[4]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let s = grid_set(5);
        let cals = vec![ImageCalibration { scale: 1.25, bias: -0.5 }, ImageCalibration::default()];
        let mut buf = Vec::new();
        s.write_checkpoint(&mut buf, &cals).unwrap();
        assert_eq!(buf.len(), 28 + 5 * 11 * 4 + 16);
        let (back, cb) = SplatSet::read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(cb, cals);
        assert_eq!(back.len(), 5);
        for k in 0..5 {
            assert!((back.positions[k] - s.positions[k]).amax() < 1e-5);
            assert!((back.opacity_logits[k] - s.opacity_logits[k]).abs() < 1e-6);
        }
        assert!(SplatSet::read_checkpoint(&buf[..buf.len() - 1]).is_err());
    }

    #[derive(Debug, Clone)]
    enum Op {
        Densify(f64),
        Prune(f64),
        Reset,
        Stats(usize, f64),
        Perturb(usize, f64),
    }

    fn arb_op() -> impl Strategy<Value = Op> {
        prop_oneof![
            (1e-5f64..1e-2).prop_map(Op::Densify),
            (1e-3f64..0.6).prop_map(Op::Prune),
            Just(Op::Reset),
            (0usize..64, 0.0f64..1e-2).prop_map(|(k, g)| Op::Stats(k, g)),
            (0usize..64, -3.0f64..3.0).prop_map(|(k, v)| Op::Perturb(k, v)),
        ]
    }

    proptest! {
        #[test]
        fn invariants_survive_random_operation_sequences(ops in prop::collection::vec(arb_op(), 1..25), seed in 0u64..100) {
            let mut s = grid_set(12);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for op in ops {
                match op {
                    Op::Densify(t) => { s.densify_and_prune(t, 0.0, 5.0, &mut rng); }
                    Op::Prune(floor) => {
                        let before: Vec<f64> = (0..s.len()).map(|k| s.opacity(k)).filter(|&o| o >= floor).collect();
                        s.densify_and_prune(f64::INFINITY, floor, 5.0, &mut rng);
                        let after: Vec<f64> = (0..s.len()).map(|k| s.opacity(k)).collect();
                        prop_assert_eq!(before, after);
                    }
                    Op::Reset => s.reset_opacity(0.01),
                    Op::Stats(k, g) => if !s.is_empty() { let k = k % s.len(); s.grad_accum[k] += g; s.grad_count[k] += 1; },
                    Op::Perturb(k, v) => if !s.is_empty() {
                        let k = k % s.len();
                        s.opacity_logits[k] += v;
                        s.rotations[k][1] += v;
                        s.normalize_rotations();
                    },
                }
                prop_assert!(s.check_invariants().is_ok(), "{:?}", s.check_invariants());
            }
        }
    }
}
