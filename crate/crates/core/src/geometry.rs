//! Frames and transforms connecting splat, world, camera and pixel coordinates.
//!
//! Rotations follow the passive attitude convention: a quaternion describes
//! the rotation of a *frame*, and [`UnitQuaternion::to_rotation_matrix`] maps
//! coordinates expressed in the rotated frame back into the reference frame.
//! For a splat this is `R_WS`, whose columns are the splat axes `t_u, t_v, t_w`
//! written in world coordinates.
//!
//! Pixel coordinates are continuous: `x` runs along image columns (width),
//! `y` along rows (height), and the center of pixel `(col, row)` sits at
//! `(col + 0.5, row + 0.5)`.

use nalgebra::{Matrix3, Matrix4, Vector2, Vector3, Vector4};
use thiserror::Error;

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Near-plane distance below which points are treated as behind the camera.
pub const EPS_DEPTH: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point is behind the camera (z = {depth})")]
    BehindCamera { depth: f64 },
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
}

/// Unit quaternion `(w, x, y, z)` in the passive convention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitQuaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for UnitQuaternion {
    fn default() -> Self {
        Self::identity()
    }
}

impl UnitQuaternion {
    pub const fn identity() -> Self {
        Self { w: 1.0, x: 0.0, y: 0.0, z: 0.0 }
    }

    /// Normalizes the raw components. A zero quaternion maps to identity.
    pub fn new_normalize(w: f64, x: f64, y: f64, z: f64) -> Self {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if n == 0.0 || !n.is_finite() {
            return Self::identity();
        }
        Self { w: w / n, x: x / n, y: y / n, z: z / n }
    }

    pub fn from_array(q: [f64; 4]) -> Self {
        Self::new_normalize(q[0], q[1], q[2], q[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    /// Quaternion of a frame rotated by `angle` (radians) about `axis`.
    ///
    /// Its matrix is the passive (coordinate) rotation, i.e. the transpose of
    /// the active rotation that turns vectors by `angle` about `axis`.
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        let a = axis.normalize();
        let (s, c) = (0.5 * angle).sin_cos();
        Self::new_normalize(c, s * a.x, s * a.y, s * a.z)
    }

    pub fn conjugate(self) -> Self {
        Self { w: self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    pub fn norm(self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    /// Passive rotation matrix `(w² − v·v) I + 2 v vᵀ − 2 w [v]ₓ`.
    ///
    /// This is the only quaternion → matrix conversion in the crate.
    pub fn to_rotation_matrix(self) -> Mat3 {
        passive_matrix(self.w, self.x, self.y, self.z)
    }

    /// Inverse of [`to_rotation_matrix`](Self::to_rotation_matrix) (Shepperd's method).
    pub fn from_rotation_matrix(m: &Mat3) -> Self {
        // m is the transpose of the active matrix A; read A(i, j) as m[(j, i)].
        let a = |i: usize, j: usize| m[(j, i)];
        let tr = a(0, 0) + a(1, 1) + a(2, 2);
        let (w, x, y, z);
        if tr > 0.0 {
            let s = (tr + 1.0).sqrt() * 2.0;
            w = 0.25 * s;
            x = (a(2, 1) - a(1, 2)) / s;
            y = (a(0, 2) - a(2, 0)) / s;
            z = (a(1, 0) - a(0, 1)) / s;
        } else if a(0, 0) > a(1, 1) && a(0, 0) > a(2, 2) {
            let s = (1.0 + a(0, 0) - a(1, 1) - a(2, 2)).sqrt() * 2.0;
            w = (a(2, 1) - a(1, 2)) / s;
            x = 0.25 * s;
            y = (a(0, 1) + a(1, 0)) / s;
            z = (a(0, 2) + a(2, 0)) / s;
        } else if a(1, 1) > a(2, 2) {
            let s = (1.0 + a(1, 1) - a(0, 0) - a(2, 2)).sqrt() * 2.0;
            w = (a(0, 2) - a(2, 0)) / s;
            x = (a(0, 1) + a(1, 0)) / s;
            y = 0.25 * s;
            z = (a(1, 2) + a(2, 1)) / s;
        } else {
            let s = (1.0 + a(2, 2) - a(0, 0) - a(1, 1)).sqrt() * 2.0;
            w = (a(1, 0) - a(0, 1)) / s;
            x = (a(0, 2) + a(2, 0)) / s;
            y = (a(1, 2) + a(2, 1)) / s;
            z = 0.25 * s;
        }
        Self::new_normalize(w, x, y, z)
    }
}

fn passive_matrix(w: f64, x: f64, y: f64, z: f64) -> Mat3 {
    let d = w * w - (x * x + y * y + z * z);
    Mat3::new(
        d + 2.0 * x * x,
        2.0 * x * y + 2.0 * w * z,
        2.0 * x * z - 2.0 * w * y,
        2.0 * y * x - 2.0 * w * z,
        d + 2.0 * y * y,
        2.0 * y * z + 2.0 * w * x,
        2.0 * z * x + 2.0 * w * y,
        2.0 * z * y - 2.0 * w * x,
        d + 2.0 * z * z,
    )
}

/// Rotation matrix from raw (not necessarily unit) quaternion components,
/// normalizing first.
pub fn rotation_from_raw(q: &[f64; 4]) -> Mat3 {
    UnitQuaternion::from_array(*q).to_rotation_matrix()
}

/// Pulls `dL/dR` back to the raw quaternion components of [`rotation_from_raw`],
/// including the normalization (so the result is tangent to the sphere
/// through `q`, scaled by `1/|q|`).
pub fn rotation_from_raw_grad(q: &[f64; 4], d_r: &Mat3) -> [f64; 4] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    let g = |i: usize, j: usize| d_r[(i, j)];
    // dR/dw = 2w I − 2[v]x ; dR/dv_i = −2 v_i I + 2(e_i vᵀ + v e_iᵀ) − 2w [e_i]x
    let trace_g = g(0, 0) + g(1, 1) + g(2, 2);
    // <G, [a]x> for [a]x = [[0,-a3,a2],[a3,0,-a1],[-a2,a1,0]]
    let skew_dot = |a: [f64; 3]| {
        -a[2] * g(0, 1) + a[1] * g(0, 2) + a[2] * g(1, 0) - a[0] * g(1, 2) - a[1] * g(2, 0)
            + a[0] * g(2, 1)
    };
    let v = [x, y, z];
    let dw = 2.0 * w * trace_g - 2.0 * skew_dot(v);
    let mut dv = [0.0; 3];
    for (i, dvi) in dv.iter_mut().enumerate() {
        let mut e = [0.0; 3];
        e[i] = 1.0;
        // <G, e_i vᵀ + v e_iᵀ> = Σ_j G(i,j) v_j + Σ_j G(j,i) v_j
        let outer: f64 = (0..3).map(|j| (g(i, j) + g(j, i)) * v[j]).sum();
        *dvi = -2.0 * v[i] * trace_g + 2.0 * outer - 2.0 * w * skew_dot(e);
    }
    let du = [dw, dv[0], dv[1], dv[2]];
    let u = [w, x, y, z];
    // Through normalization: d(q/|q|) = (I − u uᵀ)/|q|
    let dot: f64 = du.iter().zip(u.iter()).map(|(a, b)| a * b).sum();
    [
        (du[0] - dot * u[0]) / n,
        (du[1] - dot * u[1]) / n,
        (du[2] - dot * u[2]) / n,
        (du[3] - dot * u[3]) / n,
    ]
}

/// Nearest rotation matrix (polar decomposition via SVD).
pub fn orthonormalize(m: &Mat3) -> Mat3 {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut u2 = u;
        u2.column_mut(2).neg_mut();
        r = u2 * vt;
    }
    r
}

/// Largest deviation of `mᵀm` from the identity.
pub fn orthonormality_error(m: &Mat3) -> f64 {
    (m.transpose() * m - Mat3::identity()).amax()
}

/// Local frame of one planar Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplatFrame {
    pub position: Vec3,
    pub scale: Vec2,
    pub orientation: UnitQuaternion,
}

impl SplatFrame {
    pub fn rotation(&self) -> Mat3 {
        self.orientation.to_rotation_matrix()
    }

    /// `(t_u, t_v, t_w)` in world coordinates; `t_w = t_u × t_v`.
    pub fn axes(&self) -> (Vec3, Vec3, Vec3) {
        let r = self.rotation();
        let tu: Vec3 = r.column(0).into();
        let tv: Vec3 = r.column(1).into();
        (tu, tv, tu.cross(&tv))
    }

    /// Homogeneous `T_WS` with the third column zeroed.
    pub fn world_from_splat_matrix(&self) -> Matrix4<f64> {
        let (tu, tv, _) = self.axes();
        let mut t = Matrix4::zeros();
        t.fixed_view_mut::<3, 1>(0, 0).copy_from(&(tu * self.scale.x));
        t.fixed_view_mut::<3, 1>(0, 1).copy_from(&(tv * self.scale.y));
        t.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.position);
        t[(3, 3)] = 1.0;
        t
    }
}

/// Maps splat-plane coordinates `(u, v)` into the world frame.
pub fn world_from_splat(frame: &SplatFrame, u: &Vec2) -> Vec3 {
    let (tu, tv, _) = frame.axes();
    frame.position + tu * (frame.scale.x * u.x) + tv * (frame.scale.y * u.y)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// Pinhole camera: `x_C = R_CW x_W + t`, pixel `= K x_C / z_C`.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// `R_CW`, world → camera.
    pub rotation: Mat3,
    /// Translation in camera coordinates (world origin expressed in `C`).
    pub translation: Vec3,
    pub width: usize,
    pub height: usize,
}

impl CameraModel {
    pub fn new(
        focal: (f64, f64),
        principal: (f64, f64),
        rotation: Mat3,
        translation: Vec3,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let cam = Self {
            fx: focal.0,
            fy: focal.1,
            cx: principal.0,
            cy: principal.1,
            rotation,
            translation,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `center` looking at `target`, image `y` axis pointing along
    /// the projection of `-up`.
    pub fn look_at(
        center: &Vec3,
        target: &Vec3,
        up: &Vec3,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let z = (target - center).normalize();
        let x = z.cross(up);
        if x.norm() < 1e-12 {
            return Err(GeometryError::InvalidCamera("up vector parallel to view axis".into()));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let r = Mat3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let t = -(r * center);
        Self::new(
            (focal, focal),
            (width as f64 / 2.0, height as f64 / 2.0),
            r,
            t,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidCamera(format!(
                "focal lengths must be positive, got ({}, {})",
                self.fx, self.fy
            )));
        }
        if !(self.cx >= 0.0
            && self.cy >= 0.0
            && self.cx <= self.width as f64
            && self.cy <= self.height as f64)
        {
            return Err(GeometryError::InvalidCamera(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        let err = orthonormality_error(&self.rotation);
        if err > 1e-9 || (self.rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(GeometryError::InvalidCamera(format!(
                "rotation is not a proper rotation (orthonormality error {err:e})"
            )));
        }
        Ok(())
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    /// Unit boresight (camera `+z`) in world coordinates.
    pub fn boresight(&self) -> Vec3 {
        self.rotation.row(2).transpose()
    }

    pub fn to_camera(&self, x_w: &Vec3) -> Vec3 {
        self.rotation * x_w + self.translation
    }

    /// Pixel coordinates of a camera-frame point (no depth check).
    pub fn pixel_of_camera_point(&self, x_c: &Vec3) -> Vec2 {
        Vec2::new(
            self.fx * x_c.x / x_c.z + self.cx,
            self.fy * x_c.y / x_c.z + self.cy,
        )
    }

    /// `T_PC · T_CW` as a 3×4 matrix acting on homogeneous world points.
    pub fn projection_matrix(&self) -> nalgebra::Matrix3x4<f64> {
        let k = Mat3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0);
        let mut t = Matrix4::identity();
        t.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        t.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        let mut k34 = nalgebra::Matrix3x4::zeros();
        k34.fixed_view_mut::<3, 3>(0, 0).copy_from(&k);
        k34 * t
    }

    pub fn contains_pixel(&self, p: &Vec2) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x <= self.width as f64 && p.y <= self.height as f64
    }
}

/// Pixel position and camera-frame depth of a projected point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: Vec2,
    pub depth: f64,
}

pub fn project(cam: &CameraModel, x_w: &Vec3) -> Result<Projection, GeometryError> {
    let xc = cam.to_camera(x_w);
    if xc.z <= EPS_DEPTH {
        return Err(GeometryError::BehindCamera { depth: xc.z });
    }
    Ok(Projection { pixel: cam.pixel_of_camera_point(&xc), depth: xc.z })
}

/// World-frame ray from the camera center through a (continuous) pixel position.
pub fn pixel_ray(cam: &CameraModel, pixel: &Vec2) -> Ray {
    let dir_c = Vec3::new((pixel.x - cam.cx) / cam.fx, (pixel.y - cam.cy) / cam.fy, 1.0);
    let dir_w = cam.rotation.transpose() * dir_c;
    Ray { origin: cam.center(), direction: dir_w.normalize() }
}

/// Continuous coordinates of the center of pixel `(col, row)`.
pub fn pixel_center(col: usize, row: usize) -> Vec2 {
    Vec2::new(col as f64 + 0.5, row as f64 + 0.5)
}

/// Homogeneous helper used by tests and the mesh exporter.
pub fn homogeneous(x: &Vec3) -> Vector4<f64> {
    Vector4::new(x.x, x.y, x.z, 1.0)
}
