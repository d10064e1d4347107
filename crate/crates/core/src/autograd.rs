//! Reverse-mode gradients of a per-view loss through the rasterizer, and a
//! central-difference checker.
//!
//! The backward pass replays the forward blend of every pixel from the
//! retained contributor lists, recomputing intersections, then runs the
//! back-to-front recurrence
//!
//! ```text
//! r_{i-1} = a_i (g·f_i) + (1 − a_i) r_i,    ∂L/∂a_i = T_i (g·f_i − r_i)
//! ```
//!
//! which needs no division by `1 − a_i`. Per-splat partial sums are kept per
//! tile and reduced in tile order, so parallel and serial runs agree bit for
//! bit.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::geometry::{rotation_from_raw_grad, Mat3, Vec2, Vec3};
use crate::rasterizer::{
    eval_hit, map_indices, pixel_ray_data, prepare, Prepared, RenderBundle, TileGrid, ViewContext,
    FILTER_BIT,
};
use crate::reflectance::{eval_sh_grad, shade_physical};
use crate::splats::SplatSet;

#[derive(Debug, Error, PartialEq)]
pub enum AutogradError {
    #[error("render was run without retaining contributor lists")]
    MissingContributors,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss is not finite at the evaluation point")]
    NonFiniteLoss,
}

/// Partials of the loss with respect to each output map (row-major).
/// `intensity` refers to the calibrated map; `depth` to the normalized depth.
#[derive(Debug, Clone, PartialEq)]
pub struct MapGradients {
    pub intensity: Vec<f64>,
    pub depth: Option<Vec<f64>>,
    pub normal: Option<Vec<Vec3>>,
    pub albedo: Option<Vec<f64>>,
    pub accumulation: Option<Vec<f64>>,
}

impl MapGradients {
    pub fn zeros(pixels: usize) -> Self {
        Self { intensity: vec![0.0; pixels], depth: None, normal: None, albedo: None, accumulation: None }
    }
}

/// Partials for every learned parameter, laid out like [`SplatSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub positions: Vec<Vec3>,
    pub log_scales: Vec<[f64; 2]>,
    pub rotations: Vec<[f64; 4]>,
    pub opacity_logits: Vec<f64>,
    pub appearance: Vec<f64>,
    pub calibration_scale: f64,
    pub calibration_bias: f64,
    /// Norm of the gradient with respect to the projected center in NDC.
    pub screen: Vec<f64>,
    /// Whether the splat was inside the view (not culled).
    pub visible: Vec<bool>,
}

impl GradientSet {
    pub fn zeros(splats: &SplatSet) -> Self {
        let n = splats.len();
        Self {
            positions: vec![Vec3::zeros(); n],
            log_scales: vec![[0.0; 2]; n],
            rotations: vec![[0.0; 4]; n],
            opacity_logits: vec![0.0; n],
            appearance: vec![0.0; splats.appearance.len()],
            calibration_scale: 0.0,
            calibration_bias: 0.0,
            screen: vec![0.0; n],
            visible: vec![false; n],
        }
    }

    /// All learned partials flattened in [`flatten_params`] order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::new();
        v.extend(self.positions.iter().flat_map(|p| [p.x, p.y, p.z]));
        v.extend(self.log_scales.iter().flatten());
        v.extend(self.rotations.iter().flatten());
        v.extend(&self.opacity_logits);
        v.extend(&self.appearance);
        v.push(self.calibration_scale);
        v.push(self.calibration_bias);
        v
    }

    pub fn all_finite(&self) -> bool {
        self.flatten().iter().all(|x| x.is_finite())
    }
}

#[derive(Clone, Copy, Default)]
struct SplatAcc {
    alpha: f64,
    color: f64,
    albedo: f64,
    normal: Vec3,
    p: Vec3,
    tu: Vec3,
    tv: Vec3,
    tw: Vec3,
    su: f64,
    sv: f64,
    center_px: Vec2,
    zc: f64,
}

impl SplatAcc {
    fn add(&mut self, o: &SplatAcc) {
        self.alpha += o.alpha;
        self.color += o.color;
        self.albedo += o.albedo;
        self.normal += o.normal;
        self.p += o.p;
        self.tu += o.tu;
        self.tv += o.tv;
        self.tw += o.tw;
        self.su += o.su;
        self.sv += o.sv;
        self.center_px += o.center_px;
        self.zc += o.zc;
    }
}

struct Replay {
    local: usize,
    filter: bool,
    a: f64,
    trans: f64,
    value: f64,
    u: f64,
    v: f64,
    t: f64,
    depth: f64,
}

/// Gradient of the per-view loss given its partials with respect to the
/// rendered maps. `bundle` must come from `render` with `keep_tape` on the
/// same splats and view.
pub fn backward(
    splats: &SplatSet,
    view: &ViewContext,
    bundle: &RenderBundle,
    grads: &MapGradients,
    parallel: bool,
) -> Result<GradientSet, AutogradError> {
    let tape = bundle.tape.as_ref().ok_or(AutogradError::MissingContributors)?;
    let cam = &view.camera;
    let (w, h) = (cam.width, cam.height);
    let npix = w * h;
    if grads.intensity.len() != npix || bundle.width != w || bundle.height != h {
        return Err(AutogradError::ShapeMismatch("gradient maps do not match the view".into()));
    }
    let grid = TileGrid::new(w, h);
    if tape.tiles.len() != grid.count() {
        return Err(AutogradError::ShapeMismatch("tape tile count does not match the view".into()));
    }
    let pre = prepare(splats, view);
    if pre.active.len() != tape.active.len() {
        return Err(AutogradError::ShapeMismatch("tape was recorded for a different scene".into()));
    }
    let origin = cam.center();
    let cal = view.calibration;

    let tile_accs = map_indices(grid.count(), parallel, |ti| {
        let tt = &tape.tiles[ti];
        let mut acc = vec![SplatAcc::default(); tt.splats.len()];
        let (cols, rows) = grid.span(ti, w, h);
        let mut replay: Vec<Replay> = Vec::new();
        let mut p = 0;
        for row in rows {
            for col in cols.clone() {
                let idx = row * w + col;
                let entries = &tt.entries[tt.offsets[p] as usize..tt.offsets[p + 1] as usize];
                p += 1;
                if entries.is_empty() {
                    continue;
                }
                let g_color = cal.scale * grads.intensity[idx];
                let weight = bundle.accumulation.data[idx];
                let mut g_acc = grads.accumulation.as_ref().map_or(0.0, |g| g[idx]);
                let mut g_depth = 0.0;
                if let Some(gd) = grads.depth.as_ref() {
                    if weight > 0.0 {
                        g_depth = gd[idx] / weight;
                        g_acc -= gd[idx] * bundle.depth.data[idx] / weight;
                    }
                }
                let g_normal = grads.normal.as_ref().map_or(Vec3::zeros(), |g| g[idx]);
                let g_albedo = grads.albedo.as_ref().map_or(0.0, |g| g[idx]);

                let ray = pixel_ray_data(cam, col, row);
                replay.clear();
                let mut trans = 1.0;
                for &e in entries {
                    let local = (e & !FILTER_BIT) as usize;
                    let s = &pre.active[tt.splats[local] as usize];
                    let hit = eval_hit(s, &ray);
                    let a = s.alpha * hit.value;
                    replay.push(Replay {
                        local,
                        filter: hit.filter,
                        a,
                        trans,
                        value: hit.value,
                        u: hit.u,
                        v: hit.v,
                        t: hit.t,
                        depth: hit.depth,
                    });
                    trans *= 1.0 - a;
                }
                let mut r = 0.0;
                for rp in replay.iter().rev() {
                    let s: &Prepared = &pre.active[tt.splats[rp.local] as usize];
                    let gf = g_color * s.color + g_depth * rp.depth + g_normal.dot(&s.normal) + g_albedo * s.albedo + g_acc;
                    let d_a = rp.trans * (gf - r);
                    r = rp.a * gf + (1.0 - rp.a) * r;
                    let omega = rp.trans * rp.a;
                    let sa = &mut acc[rp.local];
                    sa.color += omega * g_color;
                    sa.normal += g_normal * omega;
                    sa.albedo += omega * g_albedo;
                    sa.alpha += d_a * rp.value;
                    let d_g = d_a * s.alpha;
                    let d_z = omega * g_depth;
                    if rp.filter {
                        let off = ray.pix - s.center_px;
                        sa.center_px += off * (2.0 * d_g * rp.value);
                        sa.zc += d_z;
                    } else {
                        let g_u = -d_g * rp.u * rp.value;
                        let g_v = -d_g * rp.v * rp.value;
                        let wv = (origin - s.p) + ray.d * rp.t;
                        sa.tu += wv * (g_u / s.su);
                        sa.tv += wv * (g_v / s.sv);
                        sa.su -= g_u * rp.u / s.su;
                        sa.sv -= g_v * rp.v / s.sv;
                        let g_x = s.tu * (g_u / s.su) + s.tv * (g_v / s.sv);
                        sa.p -= g_x;
                        let g_t = g_x.dot(&ray.d) + d_z * ray.dz;
                        let den = s.tw.dot(&ray.d);
                        sa.p += s.tw * (g_t / den);
                        sa.tw -= wv * (g_t / den);
                    }
                }
            }
        }
        acc
    });

    let mut total = vec![SplatAcc::default(); pre.active.len()];
    for (ti, accs) in tile_accs.iter().enumerate() {
        for (local, a) in accs.iter().enumerate() {
            total[tape.tiles[ti].splats[local] as usize].add(a);
        }
    }

    let mut out = GradientSet::zeros(splats);
    let (mut d_scale, mut d_bias) = (0.0, 0.0);
    for i in 0..npix {
        d_scale += grads.intensity[i] * bundle.blended.data[i];
        d_bias += grads.intensity[i];
    }
    out.calibration_scale = d_scale;
    out.calibration_bias = d_bias;

    let sun = view.sun.direction();
    let pc = splats.params_per_splat();
    for (s, a) in pre.active.iter().zip(total.iter()) {
        let k = s.k;
        out.visible[k] = true;
        out.opacity_logits[k] = a.alpha * s.alpha * (1.0 - s.alpha);
        let mut d_normal = a.normal;
        let d_e;
        if splats.model.is_physical() {
            let sh = shade_physical(splats.model, s.albedo, &s.normal, &sun, &s.e);
            d_normal += sh.d_normal * a.color;
            d_e = sh.d_to_camera * a.color;
            out.appearance[k] = (a.albedo + a.color * sh.d_albedo) * s.albedo;
        } else {
            let ev = eval_sh_grad(splats.sh_coeffs(k), &(-s.e));
            for (j, b) in ev.d_coeffs.iter().enumerate() {
                out.appearance[k * pc + j] = a.color * b;
            }
            d_e = -ev.d_dir * a.color;
        }
        let d_tw = a.tw + d_normal * s.sign;
        let mut d_p = a.p;
        if s.dist > 0.0 {
            d_p -= (d_e - s.e * s.e.dot(&d_e)) / s.dist;
        }
        let xc = cam.to_camera(&s.p);
        let inv_z = 1.0 / xc.z;
        let g_xc = Vec3::new(
            cam.fx * inv_z * a.center_px.x,
            cam.fy * inv_z * a.center_px.y,
            -(cam.fx * xc.x * a.center_px.x + cam.fy * xc.y * a.center_px.y) * inv_z * inv_z + a.zc,
        );
        d_p += cam.rotation.transpose() * g_xc;
        out.positions[k] = d_p;

        let d_r = Mat3::from_columns(&[a.tu, a.tv, d_tw]);
        out.rotations[k] = rotation_from_raw_grad(&splats.rotations[k], &d_r);
        out.log_scales[k] = [a.su * s.su, a.sv * s.sv];

        let r0 = cam.rotation.row(0).transpose();
        let r1 = cam.rotation.row(1).transpose();
        let g_px = Vec2::new(xc.z / cam.fx * r0.dot(&d_p), xc.z / cam.fy * r1.dot(&d_p));
        out.screen[k] = Vec2::new(g_px.x * w as f64 / 2.0, g_px.y * h as f64 / 2.0).norm();
    }
    Ok(out)
}

/// Parameter groups reported separately by the checker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamClass {
    Position,
    Scale,
    Rotation,
    Opacity,
    Appearance,
    Calibration,
}

impl fmt::Display for ParamClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ParamClass::Position => "position",
            ParamClass::Scale => "scale",
            ParamClass::Rotation => "rotation",
            ParamClass::Opacity => "opacity",
            ParamClass::Appearance => "appearance",
            ParamClass::Calibration => "calibration",
        };
        f.write_str(s)
    }
}

/// Flattens all learned parameters (including the view calibration) and
/// labels each entry with its class.
pub fn flatten_params(splats: &SplatSet, view: &ViewContext) -> (Vec<f64>, Vec<ParamClass>) {
    let mut x = Vec::new();
    let mut c = Vec::new();
    let mut put = |vals: &mut dyn Iterator<Item = f64>, class| {
        for v in vals {
            x.push(v);
            c.push(class);
        }
    };
    put(&mut splats.positions.iter().flat_map(|p| [p.x, p.y, p.z]), ParamClass::Position);
    put(&mut splats.log_scales.iter().flatten().copied(), ParamClass::Scale);
    put(&mut splats.rotations.iter().flatten().copied(), ParamClass::Rotation);
    put(&mut splats.opacity_logits.iter().copied(), ParamClass::Opacity);
    put(&mut splats.appearance.iter().copied(), ParamClass::Appearance);
    put(&mut [view.calibration.scale, view.calibration.bias].into_iter(), ParamClass::Calibration);
    (x, c)
}

/// Inverse of [`flatten_params`].
pub fn unflatten_params(x: &[f64], splats: &mut SplatSet, view: &mut ViewContext) {
    let n = splats.len();
    let mut it = x.iter().copied();
    for p in splats.positions.iter_mut() {
        *p = Vec3::new(it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
    }
    for s in splats.log_scales.iter_mut().flatten() {
        *s = it.next().unwrap();
    }
    for q in splats.rotations.iter_mut().flatten() {
        *q = it.next().unwrap();
    }
    for o in splats.opacity_logits.iter_mut() {
        *o = it.next().unwrap();
    }
    for a in splats.appearance.iter_mut() {
        *a = it.next().unwrap();
    }
    view.calibration.scale = it.next().unwrap();
    view.calibration.bias = it.next().unwrap();
    debug_assert_eq!(splats.len(), n);
}

/// Absolute differences below this always pass.
pub const FD_ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassReport {
    pub class: ParamClass,
    pub checked: usize,
    pub excluded: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FdReport {
    pub classes: Vec<ClassReport>,
}

impl FdReport {
    pub fn max_rel_error(&self) -> f64 {
        self.classes.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    pub fn class(&self, class: ParamClass) -> Option<&ClassReport> {
        self.classes.iter().find(|c| c.class == class)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error() < tol
    }
}

impl fmt::Display for FdReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<12} {:>8} {:>9} {:>14} {:>14}", "class", "checked", "excluded", "max_rel_err", "max_abs_err")?;
        for c in &self.classes {
            writeln!(
                f,
                "{:<12} {:>8} {:>9} {:>14.3e} {:>14.3e}",
                c.class.to_string(),
                c.checked,
                c.excluded,
                c.max_rel_error,
                c.max_abs_error
            )?;
        }
        Ok(())
    }
}

/// One loss evaluation for the checker. `signature` captures every discrete
/// choice made while computing the loss; a parameter whose `±step`
/// evaluations produce different signatures sits on a nondifferentiable
/// locus and is excluded.
pub struct Evaluation {
    pub loss: f64,
    pub signature: Vec<u32>,
}

/// Compares `analytic` against central differences of `f` around `x0`.
pub fn fd_check_fn<F>(
    x0: &[f64],
    classes: &[ParamClass],
    analytic: &[f64],
    step: f64,
    mut f: F,
) -> Result<FdReport, AutogradError>
where
    F: FnMut(&[f64]) -> Evaluation,
{
    assert_eq!(x0.len(), classes.len());
    assert_eq!(x0.len(), analytic.len());
    let base = f(x0);
    if !base.loss.is_finite() {
        return Err(AutogradError::NonFiniteLoss);
    }
    let mut per: BTreeMap<ParamClass, ClassReport> = BTreeMap::new();
    let mut x = x0.to_vec();
    for i in 0..x0.len() {
        x[i] = x0[i] + step;
        let plus = f(&x);
        x[i] = x0[i] - step;
        let minus = f(&x);
        x[i] = x0[i];
        let rep = per.entry(classes[i]).or_insert(ClassReport {
            class: classes[i],
            checked: 0,
            excluded: 0,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
        });
        if plus.signature != base.signature || minus.signature != base.signature {
            rep.excluded += 1;
            continue;
        }
        let numeric = (plus.loss - minus.loss) / (2.0 * step);
        let diff = (numeric - analytic[i]).abs();
        let rel = if diff <= FD_ABS_FLOOR { 0.0 } else { diff / numeric.abs().max(analytic[i].abs()) };
        rep.checked += 1;
        rep.max_rel_error = rep.max_rel_error.max(rel);
        rep.max_abs_error = rep.max_abs_error.max(diff);
    }
    Ok(FdReport { classes: per.into_values().collect() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rasterizer::tests::{camera, random_scene, view};
    use crate::rasterizer::{render, RenderOptions};
    use crate::reflectance::AppearanceModel;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_loss_is_exact() {
        let x0 = vec![0.3, -1.2, 2.5, 0.7];
        let classes = vec![ParamClass::Position, ParamClass::Scale, ParamClass::Opacity, ParamClass::Calibration];
        let a = [1.0, 2.0, 3.0, 4.0];
        let loss = |x: &[f64]| x.iter().zip(a.iter()).map(|(xi, ai)| ai * xi * xi + xi).sum::<f64>();
        let grad: Vec<f64> = x0.iter().zip(a.iter()).map(|(xi, ai)| 2.0 * ai * xi + 1.0).collect();
        let rep = fd_check_fn(&x0, &classes, &grad, 1e-4, |x| Evaluation { loss: loss(x), signature: vec![] }).unwrap();
        assert!(rep.classes.iter().all(|c| c.max_abs_error < 1e-8), "{rep}");
    }

    #[test]
    fn non_finite_base_loss_is_rejected() {
        let r = fd_check_fn(&[0.0], &[ParamClass::Opacity], &[0.0], 1e-4, |_| Evaluation { loss: f64::NAN, signature: vec![] });
        assert_eq!(r.unwrap_err(), AutogradError::NonFiniteLoss);
    }

    #[test]
    fn signature_change_excludes_parameter() {
        let rep = fd_check_fn(&[0.0, 1.0], &[ParamClass::Position, ParamClass::Position], &[0.0, 1.0], 1e-4, |x| Evaluation {
            loss: x[0].abs() + x[1],
            signature: vec![(x[0] > 0.0) as u32],
        })
        .unwrap();
        assert_eq!(rep.classes[0].excluded, 1);
        assert_eq!(rep.classes[0].checked, 1);
    }

    #[test]
    fn missing_tape_is_an_error() {
        let s = SplatSet::empty(AppearanceModel::Lambert);
        let v = view(camera(4, 4));
        let b = render(&s, &v, RenderOptions::default());
        let e = backward(&s, &v, &b, &MapGradients::zeros(16), false).unwrap_err();
        assert_eq!(e, AutogradError::MissingContributors);
    }

    #[test]
    fn zero_map_gradients_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_scene(&mut rng, AppearanceModel::LommelSeeliger, 4);
        let v = view(camera(8, 8));
        let b = render(&s, &v, RenderOptions { keep_tape: true, parallel: false });
        let g = backward(&s, &v, &b, &MapGradients::zeros(64), false).unwrap();
        assert!(g.flatten().iter().all(|&x| x == 0.0));
    }

    /// Linear functional of all maps with random weights, for checking the
    /// rasterizer backward on its own.
    fn linear_probe(model: AppearanceModel, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s0 = random_scene(&mut rng, model, 3);
        let mut v0 = view(camera(8, 8));
        v0.calibration.scale = 1.3;
        v0.calibration.bias = 0.1;
        let n = 64;
        let wi: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wd: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wn: Vec<Vec3> = (0..n).map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
        let wa: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wacc: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let eval = |s: &SplatSet, v: &ViewContext| {
            let b = render(s, v, RenderOptions { keep_tape: true, parallel: false });
            let mut l = 0.0;
            for i in 0..n {
                l += wi[i] * b.intensity.data[i] + wacc[i] * b.accumulation.data[i] + wn[i].dot(&b.normal[i]);
                if b.depth.data[i] >= 0.0 {
                    l += wd[i] * b.depth.data[i];
                }
                if let Some(a) = &b.albedo {
                    l += wa[i] * a.data[i];
                }
            }
            (l, b)
        };
        let (_, b) = eval(&s0, &v0);
        let mg = MapGradients {
            intensity: wi.clone(),
            depth: Some((0..n).map(|i| if b.depth.data[i] >= 0.0 { wd[i] } else { 0.0 }).collect()),
            normal: Some(wn.clone()),
            albedo: Some(wa.clone()),
            accumulation: Some(wacc.clone()),
        };
        let g = backward(&s0, &v0, &b, &mg, false).unwrap();
        let (x0, classes) = flatten_params(&s0, &v0);
        let rep = fd_check_fn(&x0, &classes, &g.flatten(), 1e-5, |x| {
            let mut s = s0.clone();
            let mut v = v0.clone();
            unflatten_params(x, &mut s, &mut v);
            let (l, b) = eval(&s, &v);
            let valid: Vec<u32> = b.depth.data.iter().map(|&d| (d >= 0.0) as u32).collect();
            let mut sig = b.tape.unwrap().signature();
            sig.extend(valid);
            Evaluation { loss: l, signature: sig }
        })
        .unwrap();
        assert!(rep.passes(1e-4), "{model} seed {seed}\n{rep}");
        let checked: usize = rep.classes.iter().map(|c| c.checked).sum();
        let excluded: usize = rep.classes.iter().map(|c| c.excluded).sum();
        assert!(checked > 4 * excluded, "{model} seed {seed}: too many exclusions\n{rep}");
        if seed == 0 {
            eprintln!("{model}\n{rep}");
        }
    }

    #[test]
    fn linear_probe_matches_finite_differences() {
        for model in AppearanceModel::ALL {
            for seed in 0..6 {
                linear_probe(model, seed);
            }
        }
    }

    #[test]
    fn parallel_and_serial_backward_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = random_scene(&mut rng, AppearanceModel::SphericalHarmonics, 12);
        let v = view(camera(40, 24));
        let b = render(&s, &v, RenderOptions { keep_tape: true, parallel: true });
        let mut mg = MapGradients::zeros(40 * 24);
        for (i, g) in mg.intensity.iter_mut().enumerate() {
            *g = ((i * 37) % 11) as f64 - 5.0;
        }
        let a = backward(&s, &v, &b, &mg, true).unwrap();
        let c = backward(&s, &v, &b, &mg, false).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn bias_gradient_is_sum_of_intensity_partials() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = random_scene(&mut rng, AppearanceModel::Lambert, 3);
        let v = view(camera(8, 8));
        let b = render(&s, &v, RenderOptions { keep_tape: true, parallel: false });
        let mut mg = MapGradients::zeros(64);
        for g in mg.intensity.iter_mut() {
            *g = rng.random_range(-1.0..1.0);
        }
        let g = backward(&s, &v, &b, &mg, false).unwrap();
        let sum: f64 = mg.intensity.iter().sum();
        assert!((g.calibration_bias - sum).abs() < 1e-12);
    }

    #[test]
    fn transparent_splat_gets_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut s = random_scene(&mut rng, AppearanceModel::Lambert, 3);
        s.opacity_logits[1] = -40.0;
        let v = view(camera(8, 8));
        let b = render(&s, &v, RenderOptions { keep_tape: true, parallel: false });
        let mut mg = MapGradients::zeros(64);
        mg.intensity.iter_mut().for_each(|g| *g = 1.0);
        let g = backward(&s, &v, &b, &mg, false).unwrap();
        assert_eq!(g.positions[1], Vec3::zeros());
        assert_eq!(g.opacity_logits[1], 0.0);
        assert_eq!(g.appearance[1], 0.0);
    }
}
