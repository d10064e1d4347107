//! Forward rendering of a [`SplatSet`] into intensity, depth, normal, albedo
//! and accumulation maps.
//!
//! Splats are culled and bounded per view, sorted once by center depth
//! (ties by index) and binned into 16×16 pixel tiles. Every pixel walks its
//! tile list front to back. [`render_reference`] performs the same blend
//! without bounding boxes or tiles and serves as the test oracle.

use crate::geometry::{pixel_center, pixel_ray, CameraModel, Mat3, Ray, SplatFrame, Vec2, Vec3, EPS_DEPTH};
use crate::image::Image;
use crate::reflectance::{
    eval_sh, shade_physical, AppearanceModel, ImageCalibration, SunSpec, LS_DENOMINATOR_FLOOR, SH_OFFSET,
};
use crate::splats::SplatSet;

pub const TILE: usize = 16;
/// Contributions with `α·Ĝ` below this are skipped.
pub const ALPHA_SKIP: f64 = 1.0 / 255.0;
/// Blending stops once transmittance falls below this.
pub const TRANSMITTANCE_STOP: f64 = 1e-4;
/// `|t_wᵀd|` below this counts as a ray parallel to the splat plane.
pub const PARALLEL_EPS: f64 = 1e-9;
/// Marker bit on tape entries whose `Ĝ` came from the screen-space filter.
pub const FILTER_BIT: u32 = 1 << 31;

/// One image: camera, sun, learned calibration and observed pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewContext {
    pub name: String,
    pub camera: CameraModel,
    pub sun: SunSpec,
    pub calibration: ImageCalibration,
    pub image: Image,
}

/// Ray–splat-plane hit in splat coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intersection {
    pub u: Vec2,
    /// Camera-frame z of the hit point.
    pub depth: f64,
    /// Ray parameter of the hit point.
    pub t: f64,
}

/// Intersects `ray` with the plane of `frame`; `None` when the ray is
/// parallel to the plane or the hit lies at `t ≤ EPS_DEPTH`.
pub fn intersect(frame: &SplatFrame, ray: &Ray, cam: &CameraModel) -> Option<Intersection> {
    let (tu, tv, tw) = frame.axes();
    let den = tw.dot(&ray.direction);
    if den.abs() < PARALLEL_EPS {
        return None;
    }
    let t = tw.dot(&(frame.position - ray.origin)) / den;
    if t <= EPS_DEPTH {
        return None;
    }
    let x = ray.at(t);
    let w = x - frame.position;
    Some(Intersection {
        u: Vec2::new(tu.dot(&w) / frame.scale.x, tv.dot(&w) / frame.scale.y),
        depth: cam.to_camera(&x).z,
        t,
    })
}

/// `exp(−(u² + v²)/2)`.
pub fn gaussian_value(u: &Vec2) -> f64 {
    (-0.5 * u.norm_squared()).exp()
}

/// Inclusive pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
}

impl PixelRect {
    #[inline]
    pub fn contains(&self, col: usize, row: usize) -> bool {
        col >= self.x0 && col <= self.x1 && row >= self.y0 && row <= self.y1
    }
}

fn intrinsics(cam: &CameraModel) -> Mat3 {
    Mat3::new(cam.fx, 0.0, cam.cx, 0.0, cam.fy, cam.cy, 0.0, 0.0, 1.0)
}

/// Screen rectangle outside of which `α·Ĝ` of this splat stays below
/// [`ALPHA_SKIP`].
///
/// The splat-plane cutoff radius is `√(2 ln(255 α))` standard deviations
/// (about 3.3 at full opacity) and the filter radius is `√(ln(255 α))` px
/// around the projected center. The conic outline of the disk is bounded
/// exactly and then padded by one pixel. Splats whose center lies behind the
/// camera are culled; disks reaching behind the camera plane get the full
/// image extent.
pub fn bound(frame: &SplatFrame, cam: &CameraModel, opacity: f64) -> Option<PixelRect> {
    if cam.width == 0 || cam.height == 0 {
        return None;
    }
    let xc = cam.to_camera(&frame.position);
    if xc.z <= EPS_DEPTH {
        return None;
    }
    let kappa = 2.0 * (255.0 * opacity).ln();
    if kappa.is_nan() || kappa < 0.0 {
        return None;
    }
    let r = frame.rotation();
    let k = intrinsics(cam);
    let m = k * cam.rotation;
    let a = m * (r.column(0) * frame.scale.x);
    let b = m * (r.column(1) * frame.scale.y);
    let c = k * xc;
    let center = cam.pixel_of_camera_point(&xc);
    let filter = (kappa / 2.0).sqrt();
    let extent = |row: usize, limit: usize| -> Option<(usize, usize)> {
        let (s0, s1, s2) = (a[2], b[2], c[2]);
        let (t0, t1, t2) = (a[row], b[row], c[row]);
        let qa = kappa * (s0 * s0 + s1 * s1) - s2 * s2;
        let (mut lo, mut hi) = (center[row] - filter, center[row] + filter);
        if qa >= 0.0 {
            return Some((0, limit - 1));
        }
        let qb = kappa * (t0 * s0 + t1 * s1) - t2 * s2;
        let qc = kappa * (t0 * t0 + t1 * t1) - t2 * t2;
        let disc = (qb * qb - qa * qc).max(0.0).sqrt();
        let (r1, r2) = ((qb + disc) / qa, (qb - disc) / qa);
        lo = lo.min(r1.min(r2));
        hi = hi.max(r1.max(r2));
        let first = (lo - 1.5).ceil();
        let last = (hi + 0.5).floor();
        if last < 0.0 || first > (limit - 1) as f64 || first.is_nan() || last.is_nan() {
            return None;
        }
        Some((first.max(0.0) as usize, (last as usize).min(limit - 1)))
    };
    let (x0, x1) = extent(0, cam.width)?;
    let (y0, y1) = extent(1, cam.height)?;
    Some(PixelRect { x0, x1, y0, y1 })
}

pub const FLAG_FLIPPED: u8 = 1;
pub const FLAG_SHADE_CLAMPED: u8 = 2;
pub const FLAG_LS_FLOOR: u8 = 4;

/// Per-view quantities of one visible splat, shared by forward and backward.
#[derive(Debug, Clone)]
pub(crate) struct Prepared {
    pub k: usize,
    pub p: Vec3,
    pub tu: Vec3,
    pub tv: Vec3,
    pub tw: Vec3,
    pub su: f64,
    pub sv: f64,
    pub alpha: f64,
    /// Center depth (sort key).
    pub zc: f64,
    pub center_px: Vec2,
    /// Unit vector from the splat center toward the camera.
    pub e: Vec3,
    pub dist: f64,
    /// ±1 so that `sign·t_w` faces the camera.
    pub sign: f64,
    pub normal: Vec3,
    pub color: f64,
    pub albedo: f64,
    pub rect: PixelRect,
    tw_po: f64,
    tu_op: f64,
    tv_op: f64,
}

pub(crate) struct Prepass {
    pub active: Vec<Prepared>,
    /// Flags per splat in storage order; `u8::MAX` for culled splats.
    pub flags: Vec<u8>,
}

fn shade_flags(model: AppearanceModel, splats: &SplatSet, k: usize, n: &Vec3, s: &Vec3, e: &Vec3) -> u8 {
    if model.is_physical() {
        let ci = n.dot(s);
        let mut f = 0;
        if ci <= 0.0 {
            f |= FLAG_SHADE_CLAMPED;
        }
        if model != AppearanceModel::Lambert && ci + n.dot(e).max(0.0) < LS_DENOMINATOR_FLOOR {
            f |= FLAG_LS_FLOOR;
        }
        f
    } else {
        let b = crate::reflectance::sh_basis(&(-e));
        let s: f64 = splats.sh_coeffs(k).iter().zip(b.iter()).map(|(c, y)| c * y).sum::<f64>() + SH_OFFSET;
        if s <= 0.0 {
            FLAG_SHADE_CLAMPED
        } else {
            0
        }
    }
}

pub(crate) fn prepare(splats: &SplatSet, view: &ViewContext) -> Prepass {
    let cam = &view.camera;
    let origin = cam.center();
    let sun = view.sun.direction();
    let mut flags = vec![u8::MAX; splats.len()];
    let mut active = Vec::new();
    for k in 0..splats.len() {
        let frame = splats.frame(k);
        let alpha = splats.opacity(k);
        let Some(rect) = bound(&frame, cam, alpha) else { continue };
        let rot = frame.rotation();
        let (tu, tv, tw): (Vec3, Vec3, Vec3) = (rot.column(0).into(), rot.column(1).into(), rot.column(2).into());
        let p = frame.position;
        let xc = cam.to_camera(&p);
        let to_cam = origin - p;
        let dist = to_cam.norm();
        let e = if dist > 0.0 { to_cam / dist } else { cam.boresight() * -1.0 };
        let sign = if tw.dot(&e) < 0.0 { -1.0 } else { 1.0 };
        let normal = tw * sign;
        let (color, albedo) = if splats.model.is_physical() {
            let a = splats.appearance[k].exp();
            (shade_physical(splats.model, a, &normal, &sun, &e).value, a)
        } else {
            (eval_sh(splats.sh_coeffs(k), &(-e)), 0.0)
        };
        let mut f = shade_flags(splats.model, splats, k, &normal, &sun, &e);
        if sign < 0.0 {
            f |= FLAG_FLIPPED;
        }
        flags[k] = f;
        active.push(Prepared {
            k,
            p,
            tu,
            tv,
            tw,
            su: frame.scale.x,
            sv: frame.scale.y,
            alpha,
            zc: xc.z,
            center_px: cam.pixel_of_camera_point(&xc),
            e,
            dist,
            sign,
            normal,
            color,
            albedo,
            rect,
            tw_po: tw.dot(&(p - origin)),
            tu_op: tu.dot(&to_cam),
            tv_op: tv.dot(&to_cam),
        });
    }
    active.sort_by(|a, b| a.zc.total_cmp(&b.zc).then(a.k.cmp(&b.k)));
    Prepass { active, flags }
}

/// Per-pixel ray data.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PixelRay {
    pub pix: Vec2,
    pub d: Vec3,
    /// Camera-frame z per unit ray length.
    pub dz: f64,
}

pub(crate) fn pixel_ray_data(cam: &CameraModel, col: usize, row: usize) -> PixelRay {
    let pix = pixel_center(col, row);
    let d = pixel_ray(cam, &pix).direction;
    let dz = cam.rotation.row(2).dot(&d.transpose());
    PixelRay { pix, d, dz }
}

/// Evaluation of `Ĝ` for one pixel and splat.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Hit {
    pub value: f64,
    pub filter: bool,
    pub u: f64,
    pub v: f64,
    pub t: f64,
    pub depth: f64,
}

#[inline]
pub(crate) fn eval_hit(s: &Prepared, r: &PixelRay) -> Hit {
    let mut g3 = -1.0;
    let (mut u, mut v, mut t) = (0.0, 0.0, 0.0);
    let den = s.tw.dot(&r.d);
    if den.abs() >= PARALLEL_EPS {
        t = s.tw_po / den;
        if t > EPS_DEPTH {
            u = (s.tu_op + t * s.tu.dot(&r.d)) / s.su;
            v = (s.tv_op + t * s.tv.dot(&r.d)) / s.sv;
            g3 = (-0.5 * (u * u + v * v)).exp();
        }
    }
    let dp = r.pix - s.center_px;
    let f = (-dp.norm_squared()).exp();
    if g3 >= f {
        Hit { value: g3, filter: false, u, v, t, depth: t * r.dz }
    } else {
        Hit { value: f, filter: true, u, v, t, depth: s.zc }
    }
}

/// Retained forward state for one tile.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TileTape {
    /// Indices into the view's sorted active list.
    pub splats: Vec<u32>,
    /// CSR offsets into `entries`, one per tile pixel plus one.
    pub offsets: Vec<u32>,
    /// Position in `splats`, with [`FILTER_BIT`] set for filter-branch hits.
    pub entries: Vec<u32>,
}

/// Backward tape: per-tile contributor lists plus per-splat flags.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Tape {
    pub tiles: Vec<TileTape>,
    pub splat_flags: Vec<u8>,
    /// Storage index of each active splat, in blend order.
    pub active: Vec<u32>,
}

impl Tape {
    /// Contributor structure in storage indices, used to detect discrete
    /// changes between two renders.
    pub fn signature(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for t in &self.tiles {
            for e in &t.entries {
                let local = (e & !FILTER_BIT) as usize;
                out.push(self.active[t.splats[local] as usize] | (e & FILTER_BIT));
            }
            out.push(u32::MAX);
            out.extend(t.offsets.iter().copied());
        }
        out.extend(self.splat_flags.iter().map(|&f| f as u32));
        out
    }
}

/// Rasterizer output. `depth` holds −1 where nothing accumulated.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderBundle {
    pub width: usize,
    pub height: usize,
    /// Calibrated intensity `scale · blended + bias`.
    pub intensity: Image,
    /// Blended intensity before calibration.
    pub blended: Image,
    pub depth: Image,
    /// Depth of the contribution at which accumulation first reaches 0.5,
    /// or −1. Not differentiated.
    pub median_depth: Image,
    pub normal: Vec<Vec3>,
    /// Absent for the SH model.
    pub albedo: Option<Image>,
    pub accumulation: Image,
    pub tape: Option<Tape>,
}

impl RenderBundle {
    fn empty(width: usize, height: usize, physical: bool) -> Self {
        Self {
            width,
            height,
            intensity: Image::zeros(width, height),
            blended: Image::zeros(width, height),
            depth: Image::filled(width, height, -1.0),
            median_depth: Image::filled(width, height, -1.0),
            normal: vec![Vec3::zeros(); width * height],
            albedo: physical.then(|| Image::zeros(width, height)),
            accumulation: Image::zeros(width, height),
            tape: None,
        }
    }

    /// Depth scaled by the largest valid depth; invalid pixels map to 0.
    pub fn depth_normalized(&self) -> Image {
        let max = self.depth.data.iter().copied().fold(0.0, f64::max);
        self.depth.map(|d| if d >= 0.0 && max > 0.0 { d / max } else { 0.0 })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RenderOptions {
    pub keep_tape: bool,
    pub parallel: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { keep_tape: false, parallel: true }
    }
}

/// Runs `f` over `0..n`, on the rayon pool when enabled. Output order is
/// always index order.
pub(crate) fn map_indices<T, F>(n: usize, parallel: bool, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = parallel;
    (0..n).map(f).collect()
}

#[derive(Clone, Copy)]
struct PixelAccum {
    color: f64,
    depth: f64,
    normal: Vec3,
    albedo: f64,
    weight: f64,
    median: f64,
}

impl Default for PixelAccum {
    fn default() -> Self {
        Self { color: 0.0, depth: 0.0, normal: Vec3::zeros(), albedo: 0.0, weight: 0.0, median: -1.0 }
    }
}

#[inline]
fn blend_step(acc: &mut PixelAccum, trans: &mut f64, s: &Prepared, a: f64, depth: f64) {
    let w = a * *trans;
    acc.color += w * s.color;
    acc.depth += w * depth;
    acc.normal += s.normal * w;
    acc.albedo += w * s.albedo;
    acc.weight += w;
    if acc.median < 0.0 && acc.weight >= 0.5 {
        acc.median = depth;
    }
    *trans *= 1.0 - a;
}

pub(crate) struct TileGrid {
    pub nx: usize,
    pub ny: usize,
}

impl TileGrid {
    pub fn new(width: usize, height: usize) -> Self {
        Self { nx: width.div_ceil(TILE), ny: height.div_ceil(TILE) }
    }

    pub fn count(&self) -> usize {
        self.nx * self.ny
    }

    /// Pixel ranges `(cols, rows)` of tile `i`.
    pub fn span(&self, i: usize, width: usize, height: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let (tx, ty) = (i % self.nx, i / self.nx);
        (tx * TILE..((tx + 1) * TILE).min(width), ty * TILE..((ty + 1) * TILE).min(height))
    }
}

pub(crate) fn bin_tiles(active: &[Prepared], grid: &TileGrid) -> Vec<Vec<u32>> {
    let mut bins = vec![Vec::new(); grid.count()];
    for (i, s) in active.iter().enumerate() {
        for ty in s.rect.y0 / TILE..=s.rect.y1 / TILE {
            for tx in s.rect.x0 / TILE..=s.rect.x1 / TILE {
                bins[ty * grid.nx + tx].push(i as u32);
            }
        }
    }
    bins
}

struct TileOut {
    pixels: Vec<PixelAccum>,
    tape: Option<TileTape>,
}

fn finish(bundle: &mut RenderBundle, idx: usize, acc: &PixelAccum, cal: &ImageCalibration) {
    bundle.blended.data[idx] = acc.color;
    bundle.intensity.data[idx] = cal.apply(acc.color);
    bundle.accumulation.data[idx] = acc.weight;
    bundle.depth.data[idx] = if acc.weight > 0.0 { acc.depth / acc.weight } else { -1.0 };
    bundle.median_depth.data[idx] = acc.median;
    bundle.normal[idx] = acc.normal;
    if let Some(a) = bundle.albedo.as_mut() {
        a.data[idx] = acc.albedo;
    }
}

/// Tile-binned renderer.
pub fn render(splats: &SplatSet, view: &ViewContext, opts: RenderOptions) -> RenderBundle {
    let cam = &view.camera;
    let (w, h) = (cam.width, cam.height);
    let mut bundle = RenderBundle::empty(w, h, splats.model.is_physical());
    let pre = prepare(splats, view);
    let grid = TileGrid::new(w, h);
    let bins = bin_tiles(&pre.active, &grid);
    let outs = map_indices(grid.count(), opts.parallel, |ti| {
        let (cols, rows) = grid.span(ti, w, h);
        let list = &bins[ti];
        let mut tape = opts.keep_tape.then(|| TileTape {
            splats: list.clone(),
            offsets: vec![0],
            entries: Vec::new(),
        });
        let mut pixels = Vec::with_capacity(cols.len() * rows.len());
        for row in rows.clone() {
            for col in cols.clone() {
                let ray = pixel_ray_data(cam, col, row);
                let mut acc = PixelAccum::default();
                let mut trans = 1.0;
                for (li, &ai) in list.iter().enumerate() {
                    let s = &pre.active[ai as usize];
                    if !s.rect.contains(col, row) {
                        continue;
                    }
                    let hit = eval_hit(s, &ray);
                    let a = s.alpha * hit.value;
                    if a < ALPHA_SKIP {
                        continue;
                    }
                    blend_step(&mut acc, &mut trans, s, a, hit.depth);
                    if let Some(t) = tape.as_mut() {
                        t.entries.push(li as u32 | if hit.filter { FILTER_BIT } else { 0 });
                    }
                    if trans < TRANSMITTANCE_STOP {
                        break;
                    }
                }
                if let Some(t) = tape.as_mut() {
                    t.offsets.push(t.entries.len() as u32);
                }
                pixels.push(acc);
            }
        }
        TileOut { pixels, tape }
    });
    let mut tiles = Vec::with_capacity(outs.len());
    for (ti, out) in outs.into_iter().enumerate() {
        let (cols, rows) = grid.span(ti, w, h);
        let mut it = out.pixels.iter();
        for row in rows {
            for col in cols.clone() {
                finish(&mut bundle, row * w + col, it.next().unwrap(), &view.calibration);
            }
        }
        if let Some(t) = out.tape {
            tiles.push(t);
        }
    }
    if opts.keep_tape {
        bundle.tape = Some(Tape {
            tiles,
            splat_flags: pre.flags,
            active: pre.active.iter().map(|s| s.k as u32).collect(),
        });
    }
    bundle
}

/// Exhaustive single-threaded oracle: every pixel visits every visible
/// splat, with no bounding rectangles and no tiles.
pub fn render_reference(splats: &SplatSet, view: &ViewContext) -> RenderBundle {
    let cam = &view.camera;
    let (w, h) = (cam.width, cam.height);
    let mut bundle = RenderBundle::empty(w, h, splats.model.is_physical());
    let pre = prepare(splats, view);
    for row in 0..h {
        for col in 0..w {
            let ray = pixel_ray_data(cam, col, row);
            let mut acc = PixelAccum::default();
            let mut trans = 1.0;
            for s in &pre.active {
                let hit = eval_hit(s, &ray);
                let a = s.alpha * hit.value;
                if a < ALPHA_SKIP {
                    continue;
                }
                blend_step(&mut acc, &mut trans, s, a, hit.depth);
                if trans < TRANSMITTANCE_STOP {
                    break;
                }
            }
            finish(&mut bundle, row * w + col, &acc, &view.calibration);
        }
    }
    bundle
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::geometry::UnitQuaternion;
    use crate::splats::logit;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub fn camera(w: usize, h: usize) -> CameraModel {
        CameraModel::new(
            (w as f64, w as f64),
            (w as f64 / 2.0, h as f64 / 2.0),
            Mat3::identity(),
            Vec3::zeros(),
            w,
            h,
        )
        .unwrap()
    }

    pub fn view(cam: CameraModel) -> ViewContext {
        ViewContext {
            name: "v".into(),
            image: Image::zeros(cam.width, cam.height),
            camera: cam,
            sun: SunSpec::from_direction(Vec3::new(0.3, -0.2, -1.0)).unwrap(),
            calibration: ImageCalibration::default(),
        }
    }

    /// Constant-intensity SH splat facing the camera at the given position.
    fn flat_splat(set: &mut SplatSet, p: Vec3, scale: f64, opacity: f64, intensity: f64) {
        let mut sh = [0.0; 16];
        sh[0] = (intensity - SH_OFFSET) / crate::reflectance::SH_DC;
        set.positions.push(p);
        set.log_scales.push([scale.ln(), scale.ln()]);
        set.rotations.push([1.0, 0.0, 0.0, 0.0]);
        set.opacity_logits.push(logit(opacity));
        set.appearance.extend_from_slice(&sh);
        set.grad_accum.push(0.0);
        set.grad_count.push(0);
    }

    pub fn random_scene(rng: &mut ChaCha8Rng, model: AppearanceModel, n: usize) -> SplatSet {
        let mut s = SplatSet::empty(model);
        for _ in 0..n {
            s.positions.push(Vec3::new(rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6), rng.random_range(2.0..4.0)));
            s.log_scales.push([rng.random_range(-2.5f64..-0.8), rng.random_range(-2.5f64..-0.8)]);
            let q = crate::splats::random_quaternion(rng).to_array();
            let m: f64 = rng.random_range(0.5..1.5);
            s.rotations.push(q.map(|c| c * m));
            s.opacity_logits.push(rng.random_range(-1.5..3.0));
            for _ in 0..model.param_count() {
                s.appearance.push(rng.random_range(-0.6..0.4));
            }
            s.grad_accum.push(0.0);
            s.grad_count.push(0);
        }
        s
    }

    #[test]
    fn intersect_head_on() {
        let frame = SplatFrame { position: Vec3::zeros(), scale: Vec2::new(1.0, 1.0), orientation: UnitQuaternion::identity() };
        let cam = CameraModel::look_at(&Vec3::new(0.0, 0.0, 5.0), &Vec3::zeros(), &Vec3::y(), 10.0, 8, 8).unwrap();
        let ray = Ray { origin: Vec3::new(0.0, 0.0, 5.0), direction: Vec3::new(0.0, 0.0, -1.0) };
        let hit = intersect(&frame, &ray, &cam).unwrap();
        assert_relative_eq!(hit.u, Vec2::zeros(), epsilon = 1e-15);
        assert_relative_eq!(hit.depth, 5.0, epsilon = 1e-12);
    }

    #[test]
    fn intersect_parallel_misses() {
        let frame = SplatFrame { position: Vec3::zeros(), scale: Vec2::new(1.0, 1.0), orientation: UnitQuaternion::identity() };
        let cam = camera(8, 8);
        let ray = Ray { origin: Vec3::new(0.0, 0.0, 1.0), direction: Vec3::x() };
        assert!(intersect(&frame, &ray, &cam).is_none());
    }

    #[test]
    fn gaussian_examples() {
        assert_eq!(gaussian_value(&Vec2::zeros()), 1.0);
        assert_relative_eq!(gaussian_value(&Vec2::new(1.0, 1.0)), 0.367_879_441_171_442_3, epsilon = 1e-15);
        assert_eq!(gaussian_value(&Vec2::new(3.0, 4.0)), (-12.5f64).exp());
    }

    proptest! {
        #[test]
        fn intersection_reprojects_onto_ray(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let frame = SplatFrame {
                position: Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(3.0..6.0)),
                scale: Vec2::new(rng.random_range(0.1..2.0), rng.random_range(0.1..2.0)),
                orientation: crate::splats::random_quaternion(&mut rng),
            };
            let cam = camera(32, 32);
            let ray = pixel_ray(&cam, &Vec2::new(rng.random_range(0.0..32.0), rng.random_range(0.0..32.0)));
            if let Some(hit) = intersect(&frame, &ray, &cam) {
                let x = crate::geometry::world_from_splat(&frame, &hit.u);
                let along = (x - ray.origin).dot(&ray.direction);
                prop_assert!((ray.at(along) - x).norm() < 1e-9 * (1.0 + hit.u.norm() * 2.0));
                prop_assert!((cam.to_camera(&x).z - hit.depth).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn far_splat_is_culled() {
        let frame = SplatFrame { position: Vec3::new(100.0, 0.0, 1.0), scale: Vec2::new(0.1, 0.1), orientation: UnitQuaternion::identity() };
        assert!(bound(&frame, &camera(16, 16), 1.0).is_none());
        let behind = SplatFrame { position: Vec3::new(0.0, 0.0, -1.0), ..frame };
        assert!(bound(&behind, &camera(16, 16), 1.0).is_none());
        let zero = CameraModel { width: 0, height: 0, ..camera(16, 16) };
        let centered = SplatFrame { position: Vec3::new(0.0, 0.0, 2.0), ..frame };
        assert!(bound(&centered, &zero, 1.0).is_none());
    }

    #[test]
    fn centered_box_width_is_tight() {
        // Opacity chosen so the cutoff is exactly 3σ.
        let opacity = 4.5f64.exp() / 255.0;
        let cam = camera(64, 64);
        let frame = SplatFrame { position: Vec3::new(0.0, 0.0, 4.0), scale: Vec2::new(0.1, 0.1), orientation: UnitQuaternion::identity() };
        let r = 3.0 * 0.1 * 64.0 / 4.0;
        let rect = bound(&frame, &cam, opacity).unwrap();
        let half = (rect.x1 - rect.x0 + 1) as f64 / 2.0;
        assert!(half >= r && half <= r + 3.0, "half-width {half} vs radius {r}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn box_is_sound_against_dense_scan(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_scene(&mut rng, AppearanceModel::Lambert, 1);
            let v = view(camera(24, 24));
            let pre = prepare(&s, &v);
            if let Some(sp) = pre.active.first() {
                for row in 0..24 {
                    for col in 0..24 {
                        if !sp.rect.contains(col, row) {
                            let hit = eval_hit(sp, &pixel_ray_data(&v.camera, col, row));
                            prop_assert!(sp.alpha * hit.value < ALPHA_SKIP);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn empty_scene_renders_bias() {
        let mut v = view(camera(8, 8));
        v.calibration.bias = 0.25;
        let b = render(&SplatSet::empty(AppearanceModel::Lambert), &v, RenderOptions::default());
        assert!(b.intensity.data.iter().all(|&x| x == 0.25));
        assert!(b.accumulation.data.iter().all(|&x| x == 0.0));
        assert!(b.depth.data.iter().all(|&x| x < 0.0));
    }

    #[test]
    fn single_and_stacked_splats() {
        let cam = camera(9, 9);
        // Pixel (4,4) center maps exactly onto the optical axis offset by half a pixel.
        let px = pixel_center(4, 4);
        let dir = pixel_ray(&cam, &px).direction;
        let p1 = dir * (2.0 / dir.z);
        let p2 = dir * (3.0 / dir.z);
        let mut s = SplatSet::empty(AppearanceModel::SphericalHarmonics);
        flat_splat(&mut s, p1, 0.5, 0.6, 0.8);
        let v = view(cam);
        let one = render(&s, &v, RenderOptions::default());
        assert_relative_eq!(one.intensity.get(4, 4), 0.8 * 0.6, epsilon = 1e-12);
        flat_splat(&mut s, p2, 0.5, 0.7, 0.3);
        let two = render(&s, &v, RenderOptions::default());
        assert_relative_eq!(two.intensity.get(4, 4), 0.8 * 0.6 + 0.3 * 0.7 * 0.4, epsilon = 1e-12);
        s.opacity_logits[0] = 40.0;
        let opaque = render(&s, &v, RenderOptions::default());
        assert_relative_eq!(opaque.intensity.get(4, 4), 0.8, epsilon = 1e-12);
    }

    #[test]
    fn tiled_matches_reference_on_random_scenes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for model in AppearanceModel::ALL {
            for _ in 0..5 {
                let s = random_scene(&mut rng, model, 5);
                let v = view(camera(16, 16));
                let a = render(&s, &v, RenderOptions::default());
                let b = render_reference(&s, &v);
                for i in 0..a.intensity.len() {
                    assert!((a.intensity.data[i] - b.intensity.data[i]).abs() < 1e-6);
                    assert!((a.accumulation.data[i] - b.accumulation.data[i]).abs() < 1e-6);
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn blend_invariants(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_scene(&mut rng, AppearanceModel::LunarLambert, 6);
            let v = view(camera(16, 16));
            let b = render(&s, &v, RenderOptions { keep_tape: true, parallel: false });
            let pre = prepare(&s, &v);
            let tape = b.tape.as_ref().unwrap();
            let grid = TileGrid::new(16, 16);
            for (ti, t) in tape.tiles.iter().enumerate() {
                let (cols, rows) = grid.span(ti, 16, 16);
                let mut p = 0;
                for row in rows {
                    for col in cols.clone() {
                        let idx = row * 16 + col;
                        let ray = pixel_ray_data(&v.camera, col, row);
                        let mut prod = 1.0;
                        for e in &t.entries[t.offsets[p] as usize..t.offsets[p + 1] as usize] {
                            let sp = &pre.active[t.splats[(e & !FILTER_BIT) as usize] as usize];
                            prod *= 1.0 - sp.alpha * eval_hit(sp, &ray).value;
                        }
                        let acc = b.accumulation.data[idx];
                        prop_assert!((0.0..=1.0).contains(&acc));
                        prop_assert!((acc - (1.0 - prod)).abs() < 1e-6);
                        let nn = b.normal[idx].norm();
                        prop_assert!(nn <= 1.0 + 1e-12);
                        if acc > 0.0 { prop_assert!(nn > 0.0); }
                        p += 1;
                    }
                }
            }
            // Storage order does not matter.
            let mut perm = s.clone();
            let n = perm.len();
            for k in 0..n / 2 {
                perm.positions.swap(k, n - 1 - k);
                perm.log_scales.swap(k, n - 1 - k);
                perm.rotations.swap(k, n - 1 - k);
                perm.opacity_logits.swap(k, n - 1 - k);
                perm.appearance.swap(k, n - 1 - k);
            }
            let bp = render(&perm, &v, RenderOptions::default());
            for i in 0..256 {
                prop_assert!((bp.intensity.data[i] - b.intensity.data[i]).abs() < 1e-12);
            }
            // Adding a splat never lowers accumulation beyond what early termination allows.
            let mut more = s.clone();
            let extra = random_scene(&mut rng, AppearanceModel::LunarLambert, 1);
            more.positions.push(extra.positions[0]);
            more.log_scales.push(extra.log_scales[0]);
            more.rotations.push(extra.rotations[0]);
            more.opacity_logits.push(extra.opacity_logits[0]);
            more.appearance.push(extra.appearance[0]);
            more.grad_accum.push(0.0);
            more.grad_count.push(0);
            let bm = render(&more, &v, RenderOptions::default());
            for i in 0..256 {
                prop_assert!(bm.accumulation.data[i] >= b.accumulation.data[i] - TRANSMITTANCE_STOP);
            }
        }
    }
}
