//! Photometric angles, disk functions and the spherical-harmonics baseline.
//!
//! Physics models shade a splat as `albedo · d(ι, ε, φ)`; the per-image
//! scale and bias are applied to the blended image by the rasterizer, and
//! they also absorb the phase function and the unknown solar flux.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Vec3;

/// Lommel-Seeliger denominator floor near the limb.
pub const LS_DENOMINATOR_FLOOR: f64 = 1e-4;
/// Offset added to the SH expansion before clamping.
pub const SH_OFFSET: f64 = 0.5;
pub const SH_COEFFS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AppearanceModel {
    #[serde(rename = "sh")]
    SphericalHarmonics,
    Lambert,
    LommelSeeliger,
    /// Also known as the McEwen model.
    #[serde(alias = "mcewen")]
    LunarLambert,
}

impl AppearanceModel {
    pub const ALL: [AppearanceModel; 4] = [
        AppearanceModel::SphericalHarmonics,
        AppearanceModel::Lambert,
        AppearanceModel::LommelSeeliger,
        AppearanceModel::LunarLambert,
    ];

    pub fn is_physical(self) -> bool {
        !matches!(self, AppearanceModel::SphericalHarmonics)
    }

    /// Appearance scalars per splat.
    pub fn param_count(self) -> usize {
        if self.is_physical() {
            1
        } else {
            SH_COEFFS
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AppearanceModel::SphericalHarmonics => "sh",
            AppearanceModel::Lambert => "lambert",
            AppearanceModel::LommelSeeliger => "lommel-seeliger",
            AppearanceModel::LunarLambert => "lunar-lambert",
        }
    }

    pub fn code(self) -> u32 {
        match self {
            AppearanceModel::SphericalHarmonics => 0,
            AppearanceModel::Lambert => 1,
            AppearanceModel::LommelSeeliger => 2,
            AppearanceModel::LunarLambert => 3,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.code() == code)
    }
}

impl fmt::Display for AppearanceModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown appearance model '{0}' (expected sh, lambert, lommel-seeliger or lunar-lambert)")]
pub struct UnknownModel(pub String);

impl FromStr for AppearanceModel {
    type Err = UnknownModel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "sh" | "spherical-harmonics" => Ok(AppearanceModel::SphericalHarmonics),
            "lambert" | "l" => Ok(AppearanceModel::Lambert),
            "lommel-seeliger" | "ls" | "l-s" => Ok(AppearanceModel::LommelSeeliger),
            "lunar-lambert" | "ll" | "l-l" | "mcewen" => Ok(AppearanceModel::LunarLambert),
            _ => Err(UnknownModel(s.to_string())),
        }
    }
}

/// Incidence, emission and phase angles in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhotometricAngles {
    pub incidence: f64,
    pub emission: f64,
    pub phase: f64,
}

impl PhotometricAngles {
    pub fn from_degrees(incidence: f64, emission: f64, phase: f64) -> Self {
        Self {
            incidence: incidence.to_radians(),
            emission: emission.to_radians(),
            phase: phase.to_radians(),
        }
    }
}

/// Unit vector from the surface toward the Sun, world frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SunSpec(Vec3);

impl SunSpec {
    /// Normalizes `v`; `None` for a zero or non-finite vector. Vectors that
    /// are already unit length to within rounding are kept bit-for-bit.
    pub fn from_direction(v: Vec3) -> Option<Self> {
        let n = v.norm();
        if !(n > 0.0 && n.is_finite()) {
            return None;
        }
        Some(SunSpec(if (n - 1.0).abs() <= 4.0 * f64::EPSILON { v } else { v / n }))
    }

    /// Sun at the given azimuth (from +x toward +y) and elevation above the
    /// `xy` plane, both in degrees.
    pub fn from_azimuth_elevation(azimuth_deg: f64, elevation_deg: f64) -> Self {
        let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
        SunSpec(Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()))
    }

    pub fn direction(&self) -> Vec3 {
        self.0
    }
}

/// Per-image affine intensity correction `I = scale · render + bias`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageCalibration {
    pub scale: f64,
    pub bias: f64,
}

impl Default for ImageCalibration {
    fn default() -> Self {
        Self { scale: 1.0, bias: 0.0 }
    }
}

impl ImageCalibration {
    pub const MIN_SCALE: f64 = 1e-6;

    pub fn apply(&self, value: f64) -> f64 {
        self.scale * value + self.bias
    }
}

#[inline]
fn clamp_cos(c: f64) -> f64 {
    c.clamp(-1.0, 1.0)
}

/// Angles between normal, sun and emission (toward-camera) vectors.
pub fn angles(n: &Vec3, s: &SunSpec, e: &Vec3) -> PhotometricAngles {
    let sd = s.direction();
    PhotometricAngles {
        incidence: clamp_cos(n.dot(&sd)).acos(),
        emission: clamp_cos(n.dot(e)).acos(),
        phase: clamp_cos(sd.dot(e)).acos(),
    }
}

/// `g(φ) = exp(−φ/60°)` with `φ` given in radians.
pub fn phase_weight(phase: f64) -> f64 {
    (-phase.to_degrees() / 60.0).exp()
}

pub fn disk_lambert(a: &PhotometricAngles) -> f64 {
    a.incidence.cos().max(0.0)
}

pub fn disk_lommel_seeliger(a: &PhotometricAngles) -> f64 {
    ls_from_cos(a.incidence.cos(), a.emission.cos())
}

pub fn disk_lunar_lambert(a: &PhotometricAngles) -> f64 {
    let g = phase_weight(a.phase);
    (1.0 - g) * disk_lambert(a) + g * disk_lommel_seeliger(a)
}

/// Disk function of a physics model evaluated from angles.
pub fn disk(model: AppearanceModel, a: &PhotometricAngles) -> f64 {
    match model {
        AppearanceModel::Lambert => disk_lambert(a),
        AppearanceModel::LommelSeeliger => disk_lommel_seeliger(a),
        AppearanceModel::LunarLambert => disk_lunar_lambert(a),
        AppearanceModel::SphericalHarmonics => {
            panic!("disk() called for the spherical-harmonics model")
        }
    }
}

fn ls_from_cos(cos_i: f64, cos_e: f64) -> f64 {
    let ci = cos_i.max(0.0);
    if ci == 0.0 {
        return 0.0;
    }
    let ce = cos_e.max(0.0);
    2.0 * ci / (ci + ce).max(LS_DENOMINATOR_FLOOR)
}

/// Disk value and its partials with respect to `n·s`, `n·e` and `s·e`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DiskEval {
    pub value: f64,
    pub d_cos_i: f64,
    pub d_cos_e: f64,
    pub d_cos_phase: f64,
}

fn lambert_eval(cos_i: f64) -> (f64, f64) {
    let c = clamp_cos(cos_i);
    if c > 0.0 && cos_i < 1.0 {
        (c, 1.0)
    } else if c > 0.0 {
        (c, 0.0)
    } else {
        (0.0, 0.0)
    }
}

fn ls_eval(cos_i: f64, cos_e: f64) -> (f64, f64, f64) {
    let ci = clamp_cos(cos_i);
    let ce = clamp_cos(cos_e);
    if ci <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let di_live = cos_i < 1.0;
    let ce_pos = ce.max(0.0);
    let de_live = ce > 0.0 && cos_e < 1.0;
    let den = ci + ce_pos;
    if den < LS_DENOMINATOR_FLOOR {
        let v = 2.0 * ci / LS_DENOMINATOR_FLOOR;
        return (v, if di_live { 2.0 / LS_DENOMINATOR_FLOOR } else { 0.0 }, 0.0);
    }
    let v = 2.0 * ci / den;
    let dv_dci = 2.0 * ce_pos / (den * den);
    let dv_dce = -2.0 * ci / (den * den);
    (v, if di_live { dv_dci } else { 0.0 }, if de_live { dv_dce } else { 0.0 })
}

/// Disk function from cosines, with partials for reverse-mode use.
pub fn disk_eval(model: AppearanceModel, cos_i: f64, cos_e: f64, cos_phase: f64) -> DiskEval {
    match model {
        AppearanceModel::Lambert => {
            let (v, d) = lambert_eval(cos_i);
            DiskEval { value: v, d_cos_i: d, ..Default::default() }
        }
        AppearanceModel::LommelSeeliger => {
            let (v, di, de) = ls_eval(cos_i, cos_e);
            DiskEval { value: v, d_cos_i: di, d_cos_e: de, d_cos_phase: 0.0 }
        }
        AppearanceModel::LunarLambert => {
            let (vl, dl) = lambert_eval(cos_i);
            let (vs, dsi, dse) = ls_eval(cos_i, cos_e);
            let cp = clamp_cos(cos_phase);
            let phase = cp.acos();
            let g = phase_weight(phase);
            // dg/dcosφ = g · (−1/60) · dφ°/dcosφ with dφ°/dcosφ = −(180/π)/sin φ
            let sin_phase = (1.0 - cp * cp).sqrt();
            let dg_dcp = if sin_phase > 1e-12 && cos_phase.abs() < 1.0 {
                g * (180.0 / std::f64::consts::PI) / (60.0 * sin_phase)
            } else {
                0.0
            };
            DiskEval {
                value: (1.0 - g) * vl + g * vs,
                d_cos_i: (1.0 - g) * dl + g * dsi,
                d_cos_e: g * dse,
                d_cos_phase: dg_dcp * (vs - vl),
            }
        }
        AppearanceModel::SphericalHarmonics => DiskEval::default(),
    }
}

/// Physics shading `albedo · d` with partials with respect to the normal,
/// the toward-camera vector, and the albedo.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShadeEval {
    pub value: f64,
    pub d_normal: Vec3,
    pub d_to_camera: Vec3,
    pub d_albedo: f64,
}

pub fn shade_physical(model: AppearanceModel, albedo: f64, n: &Vec3, s: &Vec3, e: &Vec3) -> ShadeEval {
    let d = disk_eval(model, n.dot(s), n.dot(e), s.dot(e));
    ShadeEval {
        value: albedo * d.value,
        d_normal: (s * d.d_cos_i + e * d.d_cos_e) * albedo,
        d_to_camera: (n * d.d_cos_e + s * d.d_cos_phase) * albedo,
        d_albedo: d.value,
    }
}

const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// `Y₀₀`, the constant degree-0 basis value.
pub const SH_DC: f64 = SH_C0;

/// Real spherical-harmonic basis up to degree 3 (Condon-Shortley phase),
/// ordered by degree then order `m = −l..l`.
pub fn sh_basis(d: &Vec3) -> [f64; SH_COEFFS] {
    let (x, y, z) = (d.x, d.y, d.z);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    [
        SH_C0,
        -SH_C1 * y,
        SH_C1 * z,
        -SH_C1 * x,
        SH_C2[0] * x * y,
        SH_C2[1] * y * z,
        SH_C2[2] * (2.0 * zz - xx - yy),
        SH_C2[3] * x * z,
        SH_C2[4] * (xx - yy),
        SH_C3[0] * y * (3.0 * xx - yy),
        SH_C3[1] * x * y * z,
        SH_C3[2] * y * (4.0 * zz - xx - yy),
        SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
        SH_C3[4] * x * (4.0 * zz - xx - yy),
        SH_C3[5] * z * (xx - yy),
        SH_C3[6] * x * (xx - 3.0 * yy),
    ]
}

/// Jacobian of [`sh_basis`] with respect to `(x, y, z)`, treating the basis as
/// polynomials on ℝ³.
fn sh_basis_jacobian(d: &Vec3) -> [[f64; 3]; SH_COEFFS] {
    let (x, y, z) = (d.x, d.y, d.z);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (k0, k1, k2, k3, k4) = (SH_C2[0], SH_C2[1], SH_C2[2], SH_C2[3], SH_C2[4]);
    let (m0, m1, m2, m3, m4, m5, m6) =
        (SH_C3[0], SH_C3[1], SH_C3[2], SH_C3[3], SH_C3[4], SH_C3[5], SH_C3[6]);
    [
        [0.0, 0.0, 0.0],
        [0.0, -SH_C1, 0.0],
        [0.0, 0.0, SH_C1],
        [-SH_C1, 0.0, 0.0],
        [k0 * y, k0 * x, 0.0],
        [0.0, k1 * z, k1 * y],
        [-2.0 * k2 * x, -2.0 * k2 * y, 4.0 * k2 * z],
        [k3 * z, 0.0, k3 * x],
        [2.0 * k4 * x, -2.0 * k4 * y, 0.0],
        [6.0 * m0 * x * y, m0 * (3.0 * xx - 3.0 * yy), 0.0],
        [m1 * y * z, m1 * x * z, m1 * x * y],
        [-2.0 * m2 * x * y, m2 * (4.0 * zz - xx - 3.0 * yy), 8.0 * m2 * y * z],
        [-6.0 * m3 * x * z, -6.0 * m3 * y * z, m3 * (6.0 * zz - 3.0 * xx - 3.0 * yy)],
        [m4 * (4.0 * zz - 3.0 * xx - yy), -2.0 * m4 * x * y, 8.0 * m4 * x * z],
        [2.0 * m5 * x * z, -2.0 * m5 * y * z, m5 * (xx - yy)],
        [m6 * (3.0 * xx - 3.0 * yy), -6.0 * m6 * x * y, 0.0],
    ]
}

/// `max(Σ cᵢ Yᵢ(dir) + 0.5, 0)`.
pub fn eval_sh(coeffs: &[f64; SH_COEFFS], view_dir: &Vec3) -> f64 {
    let b = sh_basis(view_dir);
    let s: f64 = coeffs.iter().zip(b.iter()).map(|(c, y)| c * y).sum();
    (s + SH_OFFSET).max(0.0)
}

/// SH value with partials with respect to the coefficients and the direction.
pub struct ShEval {
    pub value: f64,
    pub d_coeffs: [f64; SH_COEFFS],
    pub d_dir: Vec3,
}

pub fn eval_sh_grad(coeffs: &[f64; SH_COEFFS], view_dir: &Vec3) -> ShEval {
    let b = sh_basis(view_dir);
    let s: f64 = coeffs.iter().zip(b.iter()).map(|(c, y)| c * y).sum::<f64>() + SH_OFFSET;
    if s <= 0.0 {
        return ShEval { value: 0.0, d_coeffs: [0.0; SH_COEFFS], d_dir: Vec3::zeros() };
    }
    let jac = sh_basis_jacobian(view_dir);
    let mut d_dir = Vec3::zeros();
    for (c, j) in coeffs.iter().zip(jac.iter()) {
        d_dir += Vec3::new(j[0], j[1], j[2]) * *c;
    }
    ShEval { value: s, d_coeffs: b, d_dir }
}

/// Borrowed per-splat appearance parameters.
#[derive(Debug, Clone, Copy)]
pub enum AppearanceRef<'a> {
    Sh(&'a [f64; SH_COEFFS]),
    Albedo(AppearanceModel, f64),
}

/// Shaded intensity `c_k` of one splat before blending and calibration.
///
/// `n` is the splat normal, `s` the sun, `e` the unit vector from the splat
/// toward the camera. SH evaluates along the viewing direction `−e`.
pub fn splat_intensity(appearance: AppearanceRef<'_>, n: &Vec3, s: &SunSpec, e: &Vec3) -> f64 {
    match appearance {
        AppearanceRef::Sh(c) => eval_sh(c, &(-e)),
        AppearanceRef::Albedo(model, albedo) => shade_physical(model, albedo, n, &s.direction(), e).value,
    }
}
