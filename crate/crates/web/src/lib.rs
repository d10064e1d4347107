//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Three operations are exposed: disk-function curves, a ray-traced terrain
//! under a movable sun, and a splat rasterization of a lit sphere cap.
//! Everything here also compiles natively so the same code is tested with
//! `cargo test`.

use photosplat::geometry::{CameraModel, Vec3};
use photosplat::image::Image;
use photosplat::rasterizer::{render, RenderOptions, ViewContext};
use photosplat::reflectance::{disk, AppearanceModel, ImageCalibration, PhotometricAngles, SunSpec};
use photosplat::splats::SplatSet;
use photosplat::synthscene::{make_terrain, oracle_render, sphere_cap_splats, Heightfield, TerrainSpec};
use wasm_bindgen::prelude::*;

fn parse_model(name: &str) -> Result<AppearanceModel, JsError> {
    let m: AppearanceModel = name.parse().map_err(|e: photosplat::reflectance::UnknownModel| JsError::new(&e.to_string()))?;
    if m.is_physical() {
        Ok(m)
    } else {
        Err(JsError::new("the demo shades with physical models only"))
    }
}

/// Gray image in `[0, 1]` as RGBA bytes for `ImageData`.
pub fn to_rgba(img: &Image) -> Vec<u8> {
    img.data
        .iter()
        .flat_map(|&v| {
            let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            [g, g, g, 255]
        })
        .collect()
}

/// Disk functions of the three physical models sampled at `samples`
/// incidence angles from 0° to 90°, with the camera at `emission_deg` in
/// the same vertical plane as the sun. Returns Lambert, Lommel-Seeliger and
/// Lunar-Lambert values back to back.
#[wasm_bindgen]
pub fn disk_curves(emission_deg: f64, samples: usize) -> Vec<f64> {
    let samples = samples.max(2);
    let models = [AppearanceModel::Lambert, AppearanceModel::LommelSeeliger, AppearanceModel::LunarLambert];
    let mut out = Vec::with_capacity(3 * samples);
    for m in models {
        for k in 0..samples {
            let inc = 90.0 * k as f64 / (samples - 1) as f64;
            let a = PhotometricAngles::from_degrees(inc, emission_deg, (inc - emission_deg).abs());
            out.push(disk(m, &a));
        }
    }
    out
}

fn sun(azimuth_deg: f64, elevation_deg: f64) -> SunSpec {
    SunSpec::from_azimuth_elevation(azimuth_deg, elevation_deg)
}

/// Procedural cratered terrain seen from an oblique camera.
#[wasm_bindgen]
pub struct TerrainDemo {
    terrain: Heightfield,
    camera: CameraModel,
}

#[wasm_bindgen]
impl TerrainDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, size: usize) -> Result<TerrainDemo, JsError> {
        let spec = TerrainSpec { resolution: 129, ..Default::default() };
        let terrain = make_terrain(&spec, seed).map_err(|e| JsError::new(&e.to_string()))?;
        let size = size.clamp(16, 512);
        let camera = CameraModel::look_at(
            &Vec3::new(0.0, -45.0, 80.0),
            &Vec3::zeros(),
            &Vec3::y(),
            1.8 * size as f64,
            size,
            size,
        )
        .map_err(|e| JsError::new(&e.to_string()))?;
        Ok(TerrainDemo { terrain, camera })
    }

    pub fn size(&self) -> usize {
        self.camera.width
    }

    /// Ray-traced intensity as RGBA bytes. `gain` scales the image for
    /// display.
    pub fn render(&self, model: &str, sun_azimuth_deg: f64, sun_elevation_deg: f64, gain: f64) -> Result<Vec<u8>, JsError> {
        let m = parse_model(model)?;
        let cal = ImageCalibration { scale: gain, bias: 0.0 };
        let r = oracle_render(&self.terrain, &self.camera, &sun(sun_azimuth_deg, sun_elevation_deg), m, cal, false)
            .map_err(|e| JsError::new(&e.to_string()))?;
        Ok(to_rgba(&r.intensity))
    }
}

/// Sphere cap tiled with surfels, rendered by the splat rasterizer.
#[wasm_bindgen]
pub struct SplatDemo {
    splats: SplatSet,
    size: usize,
}

#[wasm_bindgen]
impl SplatDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(count: usize, size: usize) -> SplatDemo {
        let splats = sphere_cap_splats(&Vec3::zeros(), 1.0, 80.0, count.clamp(16, 20_000), 0.8);
        SplatDemo { splats, size: size.clamp(16, 512) }
    }

    pub fn count(&self) -> usize {
        self.splats.len()
    }

    fn view(&self, sun_azimuth_deg: f64, sun_elevation_deg: f64, camera_azimuth_deg: f64) -> Result<ViewContext, JsError> {
        let az = camera_azimuth_deg.to_radians();
        let el = 50f64.to_radians();
        let eye = Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()) * 4.0;
        let camera = CameraModel::look_at(&eye, &Vec3::new(0.0, 0.0, 0.4), &Vec3::z(), 1.6 * self.size as f64, self.size, self.size)
            .map_err(|e| JsError::new(&e.to_string()))?;
        Ok(ViewContext {
            name: "demo".into(),
            camera,
            sun: sun(sun_azimuth_deg, sun_elevation_deg),
            calibration: ImageCalibration::default(),
            image: Image::zeros(self.size, self.size),
        })
    }

    /// Rendered intensity (`map = "intensity"`), normal map (`"normal"`)
    /// or accumulated opacity (`"accumulation"`) as RGBA bytes.
    pub fn render(
        &mut self,
        model: &str,
        map: &str,
        sun_azimuth_deg: f64,
        sun_elevation_deg: f64,
        camera_azimuth_deg: f64,
    ) -> Result<Vec<u8>, JsError> {
        self.splats.model = parse_model(model)?;
        let view = self.view(sun_azimuth_deg, sun_elevation_deg, camera_azimuth_deg)?;
        let b = render(&self.splats, &view, RenderOptions { keep_tape: false, parallel: false });
        match map {
            "intensity" => Ok(to_rgba(&b.intensity.map(|v| 1.6 * v))),
            "accumulation" => Ok(to_rgba(&b.accumulation)),
            "normal" => Ok(b
                .normal
                .iter()
                .zip(&b.accumulation.data)
                .flat_map(|(n, &a)| {
                    let c = |x: f64| if a > 0.0 { ((x / a + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8 } else { 0 };
                    [c(n.x), c(n.y), c(n.z), 255]
                })
                .collect()),
            other => Err(JsError::new(&format!("unknown map '{other}'"))),
        }
    }
}
