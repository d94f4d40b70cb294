//! Ray-cast renderer for box cities: linear RGB, metric depth and semantic labels.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Point2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::city::{Building, CityScene, EnvironmentCondition, SemanticLabel};
use crate::error::{Error, Result};
use crate::geom::Camera;

pub const HORIZON_SKY: [f64; 3] = [0.78, 0.84, 0.92];
pub const ZENITH_SKY: [f64; 3] = [0.32, 0.52, 0.86];

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    pub rgb_linear: Vec<[f64; 3]>,
    /// Camera-frame z; `f64::INFINITY` for sky.
    pub depth: Vec<f64>,
    pub labels: Vec<SemanticLabel>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExposureMode {
    Aerial,
    Ground,
}

impl ExposureMode {
    /// (luminance percentile, target value) per view type.
    pub fn key(&self) -> (f64, f64) {
        match self {
            ExposureMode::Aerial => (0.95, 0.90),
            ExposureMode::Ground => (0.95, 0.90),
        }
    }
}

/// Analytic sky color for a (not necessarily normalized) world direction.
pub fn sky_color(dir: &Vector3<f64>) -> [f64; 3] {
    let elev = (dir.z / dir.norm()).clamp(0.0, 1.0).sqrt();
    let mut c = [0.0; 3];
    for k in 0..3 {
        c[k] = HORIZON_SKY[k] + (ZENITH_SKY[k] - HORIZON_SKY[k]) * elev;
    }
    c
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub normal: Vector3<f64>,
    pub label: SemanticLabel,
    pub albedo: [f64; 3],
}

/// Entry parameter and outward normal of a ray against a box, if the ray
/// enters it at `t > 0`.
pub fn ray_box(origin: &Vector3<f64>, dir: &Vector3<f64>, b: &Building) -> Option<(f64, Vector3<f64>)> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut axis = 0;
    let mut sign = 0.0;
    for k in 0..3 {
        if dir[k] == 0.0 {
            if origin[k] < b.min[k] || origin[k] > b.max[k] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[k];
        let (t0, t1) = ((b.min[k] - origin[k]) * inv, (b.max[k] - origin[k]) * inv);
        let (lo, hi, s) = if t0 < t1 { (t0, t1, -1.0) } else { (t1, t0, 1.0) };
        if lo > t_near {
            t_near = lo;
            axis = k;
            sign = s;
        }
        t_far = t_far.min(hi);
    }
    if t_near > t_far || !(t_near > 0.0) {
        return None;
    }
    let mut n = Vector3::zeros();
    n[axis] = sign;
    Some((t_near, n))
}

/// Nearest scene intersection along `origin + t·dir`.
pub fn trace(scene: &CityScene, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    if dir.z < 0.0 && origin.z > 0.0 {
        let t = -origin.z / dir.z;
        let p = origin + dir * t;
        let (label, albedo) = match scene.roads.iter().find(|r| r.rect().contains(p.x, p.y)) {
            Some(r) => (SemanticLabel::Road, r.albedo),
            None => (SemanticLabel::Ground, scene.ground_albedo),
        };
        best = Some(Hit {
            t,
            normal: Vector3::z(),
            label,
            albedo,
        });
    }
    for b in &scene.buildings {
        if let Some((t, normal)) = ray_box(origin, dir, b) {
            if best.is_none_or(|h| t < h.t) {
                best = Some(Hit {
                    t,
                    normal,
                    label: SemanticLabel::Building,
                    albedo: b.albedo,
                });
            }
        }
    }
    best
}

fn shade(hit: &Hit, env: &EnvironmentCondition) -> [f64; 3] {
    let sun = Vector3::from(env.sun_direction);
    let lambert = (-sun.dot(&hit.normal)).max(0.0);
    let k = env.ambient + (1.0 - env.ambient) * lambert;
    [hit.albedo[0] * k, hit.albedo[1] * k, hit.albedo[2] * k]
}

/// Render one view. Each pixel casts a single ray through its center.
pub fn render(scene: &CityScene, camera: &Camera, env: &EnvironmentCondition) -> RenderOutput {
    let (w, h) = (camera.width() as usize, camera.height() as usize);
    let origin = camera.center();
    let mut rows: Vec<Vec<([f64; 3], f64, SemanticLabel)>> = Vec::with_capacity(h);
    (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    let dir = camera.world_ray(&Point2::new(x as f64 + 0.5, y as f64 + 0.5));
                    match trace(scene, &origin, &dir) {
                        Some(hit) => {
                            let mut c = shade(&hit, env);
                            // `dir` has unit camera-frame z, so `t` is the depth.
                            let depth = hit.t;
                            let fog = 1.0 - (-env.fog_density * depth).exp();
                            if fog > 0.0 {
                                for k in 0..3 {
                                    c[k] += (HORIZON_SKY[k] - c[k]) * fog;
                                }
                            }
                            (c, depth, hit.label)
                        }
                        None => (sky_color(&dir), f64::INFINITY, SemanticLabel::Sky),
                    }
                })
                .collect()
        })
        .collect_into_vec(&mut rows);
    let mut out = RenderOutput {
        width: w,
        height: h,
        rgb_linear: Vec::with_capacity(w * h),
        depth: Vec::with_capacity(w * h),
        labels: Vec::with_capacity(w * h),
    };
    for row in rows {
        for (c, d, l) in row {
            out.rgb_linear.push(c);
            out.depth.push(d);
            out.labels.push(l);
        }
    }
    out
}

fn luminance(c: &[f64; 3]) -> f64 {
    0.2126 * c[0] + 0.7152 * c[1] + 0.0722 * c[2]
}

/// Exposure scale mapping the chosen luminance percentile to the mode's target.
/// Falls back to 1 when that percentile is zero (an all-black image).
pub fn exposure_scale(rgb_linear: &[[f64; 3]], mode: ExposureMode) -> f64 {
    if rgb_linear.is_empty() {
        return 1.0;
    }
    let (pct, target) = mode.key();
    let mut lum: Vec<f64> = rgb_linear.iter().map(luminance).collect();
    lum.sort_by(f64::total_cmp);
    // Nearest-rank percentile.
    let rank = ((pct * lum.len() as f64).ceil() as usize).clamp(1, lum.len());
    let p = lum[rank - 1];
    if p > 0.0 {
        target / p
    } else {
        1.0
    }
}

/// Per-image auto exposure followed by gamma 1/2.2 and 8-bit quantization.
pub fn auto_expose(rgb_linear: &[[f64; 3]], width: usize, height: usize, mode: ExposureMode) -> image::RgbImage {
    assert_eq!(rgb_linear.len(), width * height, "image size mismatch");
    let s = exposure_scale(rgb_linear, mode);
    let mut out = image::RgbImage::new(width as u32, height as u32);
    for (dst, src) in out.pixels_mut().zip(rgb_linear) {
        for k in 0..3 {
            let v = (s * src[k]).clamp(0.0, 1.0).powf(1.0 / 2.2);
            dst[k] = (v * 255.0).round() as u8;
        }
    }
    out
}

impl RenderOutput {
    pub fn exposed(&self, mode: ExposureMode) -> image::RgbImage {
        auto_expose(&self.rgb_linear, self.width, self.height, mode)
    }

    pub fn segmentation(&self) -> image::GrayImage {
        let mut img = image::GrayImage::new(self.width as u32, self.height as u32);
        for (dst, l) in img.pixels_mut().zip(&self.labels) {
            dst[0] = *l as u8;
        }
        img
    }

    pub fn depth_map(&self) -> DepthMap {
        DepthMap {
            width: self.width,
            height: self.height,
            values: self
                .depth
                .iter()
                .map(|&d| if d.is_finite() { d as f32 } else { 0.0 })
                .collect(),
        }
    }
}

/// Metric depth image; `0.0` marks sky.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
}

const DEPTH_MAGIC: &[u8; 4] = b"AGD1";

impl DepthMap {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(12 + 4 * self.values.len());
        buf.extend_from_slice(DEPTH_MAGIC);
        buf.extend_from_slice(&(self.width as u32).to_le_bytes());
        buf.extend_from_slice(&(self.height as u32).to_le_bytes());
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != DEPTH_MAGIC {
            return Err(Error::data("depth file: bad magic"));
        }
        let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let n = width * height;
        if bytes.len() != 12 + 4 * n {
            return Err(Error::data(format!(
                "depth file: expected {} bytes for {width}x{height}, got {}",
                12 + 4 * n,
                bytes.len()
            )));
        }
        let values = bytes[12..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { width, height, values })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
