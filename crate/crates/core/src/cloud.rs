//! Depth-map fusion into a colored point cloud, z-buffered point rendering and PLY I/O.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::{Point2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Camera;
use crate::imaging::{quantize, RgbImage};
use crate::render::DepthMap;

/// Where each fused point came from. Absent for clouds loaded from PLY.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Provenance {
    pub view_ids: Vec<String>,
    /// Index into `view_ids`, one per point.
    pub source_view: Vec<u32>,
    /// Source pixel `(x, y)`, one per point.
    pub source_pixel: Vec<[u32; 2]>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub positions: Vec<Vector3<f64>>,
    /// RGB in `[0, 1]`.
    pub colors: Vec<[f64; 3]>,
    pub provenance: Option<Provenance>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    fn select(&self, keep: &[usize]) -> PointCloud {
        PointCloud {
            positions: keep.iter().map(|&i| self.positions[i]).collect(),
            colors: keep.iter().map(|&i| self.colors[i]).collect(),
            provenance: self.provenance.as_ref().map(|p| Provenance {
                view_ids: p.view_ids.clone(),
                source_view: keep.iter().map(|&i| p.source_view[i]).collect(),
                source_pixel: keep.iter().map(|&i| p.source_pixel[i]).collect(),
            }),
        }
    }

    pub fn bounds(&self) -> Option<(Vector3<f64>, Vector3<f64>)> {
        let first = *self.positions.first()?;
        Some(self.positions.iter().fold((first, first), |(lo, hi), p| (lo.inf(p), hi.sup(p))))
    }
}

/// One posed view contributing to fusion.
#[derive(Debug, Clone)]
pub struct FuseView {
    pub view_id: String,
    pub camera: Camera,
    pub depth: DepthMap,
    pub rgb: RgbImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FuseParams {
    pub stride: usize,
    pub max_points: usize,
    /// Voxel edge for deduplication; `0` disables it.
    pub dedup_cell: f64,
    pub seed: u64,
}

impl Default for FuseParams {
    fn default() -> Self {
        Self {
            stride: 4,
            max_points: 200_000,
            dedup_cell: 0.25,
            seed: 0,
        }
    }
}

/// Back-project every `stride`-th non-sky pixel of every view, deduplicate on a
/// voxel grid (first point per voxel wins) and subsample to `max_points`.
pub fn fuse_depth(views: &[FuseView], params: &FuseParams) -> Result<PointCloud> {
    if views.is_empty() {
        return Err(Error::Empty("no views to fuse".into()));
    }
    if params.stride == 0 {
        return Err(Error::config("stride must be >= 1"));
    }
    if params.max_points == 0 {
        return Err(Error::config("max_points must be >= 1"));
    }
    if !(params.dedup_cell >= 0.0) || !params.dedup_cell.is_finite() {
        return Err(Error::config("dedup_cell must be finite and >= 0"));
    }
    for v in views {
        let (w, h) = (v.camera.width() as usize, v.camera.height() as usize);
        if v.depth.width != w || v.depth.height != h || v.rgb.width != w || v.rgb.height != h {
            return Err(Error::Shape(format!(
                "view {}: camera {w}x{h}, depth {}x{}, rgb {}x{}",
                v.view_id, v.depth.width, v.depth.height, v.rgb.width, v.rgb.height
            )));
        }
    }

    let per_view: Vec<Result<Vec<(Vector3<f64>, [f64; 3], [u32; 2])>>> = views
        .par_iter()
        .map(|v| {
            let mut pts = Vec::new();
            for y in (0..v.depth.height).step_by(params.stride) {
                for x in (0..v.depth.width).step_by(params.stride) {
                    let d = v.depth.get(x, y) as f64;
                    if d <= 0.0 {
                        continue;
                    }
                    let p = v.camera.backproject(&Point2::new(x as f64 + 0.5, y as f64 + 0.5), d)?;
                    pts.push((p, v.rgb.get(x, y), [x as u32, y as u32]));
                }
            }
            Ok(pts)
        })
        .collect();

    let mut cloud = PointCloud {
        provenance: Some(Provenance {
            view_ids: views.iter().map(|v| v.view_id.clone()).collect(),
            ..Default::default()
        }),
        ..Default::default()
    };
    for (vi, pts) in per_view.into_iter().enumerate() {
        let prov = cloud.provenance.as_mut().unwrap();
        for (p, c, px) in pts? {
            cloud.positions.push(p);
            cloud.colors.push(c);
            prov.source_view.push(vi as u32);
            prov.source_pixel.push(px);
        }
    }
    if cloud.is_empty() {
        return Err(Error::Empty("every pixel of every view is sky".into()));
    }

    if params.dedup_cell > 0.0 {
        let (lo, _) = cloud.bounds().unwrap();
        let mut seen = HashMap::new();
        let mut keep = Vec::new();
        for (i, p) in cloud.positions.iter().enumerate() {
            let key = [0, 1, 2].map(|k| ((p[k] - lo[k]) / params.dedup_cell).floor() as i64);
            if seen.insert(key, ()).is_none() {
                keep.push(i);
            }
        }
        cloud = cloud.select(&keep);
    }

    if cloud.len() > params.max_points {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let mut keep = rand::seq::index::sample(&mut rng, cloud.len(), params.max_points).into_vec();
        keep.sort_unstable();
        cloud = cloud.select(&keep);
    }
    Ok(cloud)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointRenderSettings {
    pub point_radius_px: u32,
    pub background: [f64; 3],
}

impl Default for PointRenderSettings {
    fn default() -> Self {
        Self {
            point_radius_px: 2,
            background: [0.0; 3],
        }
    }
}

/// Z-buffered disc splatting of `cloud` into `camera`. Each pixel whose center
/// lies within `point_radius_px` of a projected point is a candidate; the
/// smallest depth wins, ties going to the lower point index.
pub fn render_points(cloud: &PointCloud, camera: &Camera, settings: &PointRenderSettings) -> Result<RgbImage> {
    if cloud.is_empty() {
        return Err(Error::Empty("point cloud is empty".into()));
    }
    if settings.point_radius_px < 1 {
        return Err(Error::config("point_radius_px must be >= 1"));
    }
    let (w, h) = (camera.width() as usize, camera.height() as usize);
    let r = settings.point_radius_px as f64;
    let projected: Vec<Option<(f64, f64, f64)>> = cloud
        .positions
        .par_iter()
        .map(|p| {
            let pc = camera.world_to_camera(p);
            if pc.z <= 1e-9 {
                return None;
            }
            let (px, d) = camera.project(p).ok()?;
            Some((px.x, px.y, d))
        })
        .collect();

    let mut zbuf = vec![(f64::INFINITY, usize::MAX); w * h];
    for (i, proj) in projected.iter().enumerate() {
        let Some((u, v, d)) = *proj else { continue };
        let x0 = (u - r - 0.5).ceil().max(0.0);
        let x1 = (u + r - 0.5).floor().min(w as f64 - 1.0);
        let y0 = (v - r - 0.5).ceil().max(0.0);
        let y1 = (v + r - 0.5).floor().min(h as f64 - 1.0);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        for y in y0 as usize..=y1 as usize {
            let dy = y as f64 + 0.5 - v;
            for x in x0 as usize..=x1 as usize {
                let dx = x as f64 + 0.5 - u;
                if dx * dx + dy * dy > r * r {
                    continue;
                }
                let slot = &mut zbuf[y * w + x];
                if d < slot.0 || (d == slot.0 && i < slot.1) {
                    *slot = (d, i);
                }
            }
        }
    }
    let pixels = zbuf
        .iter()
        .map(|&(_, i)| if i == usize::MAX { settings.background } else { cloud.colors[i] })
        .collect();
    RgbImage::from_pixels(w, h, pixels)
}

pub fn write_ply<W: Write>(cloud: &PointCloud, mut out: W) -> std::io::Result<()> {
    write!(
        out,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        cloud.len()
    )?;
    let mut buf = Vec::with_capacity(15 * cloud.len());
    for (p, c) in cloud.positions.iter().zip(&cloud.colors) {
        for k in 0..3 {
            buf.extend_from_slice(&(p[k] as f32).to_le_bytes());
        }
        buf.extend(c.iter().map(|&v| quantize(v)));
    }
    out.write_all(&buf)
}

/// Read a PLY written by [`write_ply`] (binary little-endian, xyz float + rgb uchar).
pub fn read_ply<R: Read>(input: R) -> Result<PointCloud> {
    let mut r = BufReader::new(input);
    let mut line = String::new();
    let mut header = Vec::new();
    loop {
        line.clear();
        let n = r.read_line(&mut line).map_err(|e| Error::data(format!("ply header: {e}")))?;
        if n == 0 {
            return Err(Error::data("ply: missing end_header"));
        }
        let t = line.trim().to_string();
        if t == "end_header" {
            break;
        }
        header.push(t);
    }
    if header.first().map(String::as_str) != Some("ply") {
        return Err(Error::data("ply: bad magic"));
    }
    if !header.iter().any(|l| l == "format binary_little_endian 1.0") {
        return Err(Error::data("ply: only binary_little_endian 1.0 is supported"));
    }
    let count: usize = header
        .iter()
        .find_map(|l| l.strip_prefix("element vertex "))
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::data("ply: missing vertex count"))?;
    let props: Vec<&str> = header.iter().filter_map(|l| l.strip_prefix("property ")).collect();
    let expected = [
        "float x", "float y", "float z", "uchar red", "uchar green", "uchar blue",
    ];
    if props != expected {
        return Err(Error::data(format!("ply: unsupported properties {props:?}")));
    }
    let mut body = vec![0u8; 15 * count];
    r.read_exact(&mut body).map_err(|e| Error::data(format!("ply body: {e}")))?;
    let mut cloud = PointCloud::default();
    for rec in body.chunks_exact(15) {
        let f = |o: usize| f32::from_le_bytes(rec[o..o + 4].try_into().unwrap()) as f64;
        cloud.positions.push(Vector3::new(f(0), f(4), f(8)));
        cloud.colors.push([rec[12], rec[13], rec[14]].map(|b| b as f64 / 255.0));
    }
    Ok(cloud)
}

pub fn save_ply(cloud: &PointCloud, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    write_ply(cloud, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_ply(path: &Path) -> Result<PointCloud> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_ply(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{look_at, Intrinsics, Pose};

    fn axis_camera() -> Camera {
        Camera::new(Intrinsics::new(100.0, 100.0, 32.0, 32.0, 64, 64).unwrap(), Pose::identity())
    }

    fn cloud_of(points: &[([f64; 3], [f64; 3])]) -> PointCloud {
        PointCloud {
            positions: points.iter().map(|(p, _)| Vector3::from(*p)).collect(),
            colors: points.iter().map(|(_, c)| *c).collect(),
            provenance: None,
        }
    }

    #[test]
    fn flat_ground_fuses_to_plane() {
        let pose = look_at(Vector3::new(0.0, 0.0, 50.0), Vector3::zeros(), Vector3::y()).unwrap();
        let cam = Camera::new(Intrinsics::from_hfov(16, 16, 1.0).unwrap(), pose);
        let view = FuseView {
            view_id: "v0".into(),
            camera: cam,
            depth: DepthMap { width: 16, height: 16, values: vec![50.0; 256] },
            rgb: RgbImage::filled(16, 16, [0.2, 0.3, 0.4]),
        };
        let params = FuseParams { stride: 1, dedup_cell: 0.0, ..Default::default() };
        let cloud = fuse_depth(std::slice::from_ref(&view), &params).unwrap();
        assert_eq!(cloud.len(), 256);
        assert!(cloud.positions.iter().all(|p| p.z.abs() < 1e-6));

        let huge = FuseParams { stride: 1, dedup_cell: 1e6, ..Default::default() };
        assert_eq!(fuse_depth(&[view], &huge).unwrap().len(), 1);
        assert!(fuse_depth(&[], &params).is_err());
    }

    #[test]
    fn single_point_disc() {
        let cloud = cloud_of(&[([0.0, 0.0, 2.0], [1.0, 0.0, 0.0])]);
        let img = render_points(&cloud, &axis_camera(), &PointRenderSettings { point_radius_px: 1, background: [0.0; 3] }).unwrap();
        // Projects to (32, 32), a pixel corner: the four touching pixels are within radius 1.
        let lit: Vec<(usize, usize)> = (0..64)
            .flat_map(|y| (0..64).map(move |x| (x, y)))
            .filter(|&(x, y)| img.get(x, y) != [0.0; 3])
            .collect();
        assert_eq!(lit, vec![(31, 31), (32, 31), (31, 32), (32, 32)]);
    }

    #[test]
    fn nearest_point_wins_regardless_of_order() {
        let a = ([0.0, 0.0, 1.0], [1.0, 0.0, 0.0]);
        let b = ([0.0, 0.0, 2.0], [0.0, 1.0, 0.0]);
        let s = PointRenderSettings::default();
        let i1 = render_points(&cloud_of(&[a, b]), &axis_camera(), &s).unwrap();
        let i2 = render_points(&cloud_of(&[b, a]), &axis_camera(), &s).unwrap();
        assert_eq!(i1.get(32, 32), [1.0, 0.0, 0.0]);
        assert_eq!(i1, i2);
    }

    #[test]
    fn ply_round_trip() {
        let cloud = cloud_of(&[([1.5, -2.0, 3.25], [1.0, 0.0, 0.2]), ([0.0, 0.0, 0.0], [0.0, 1.0, 1.0])]);
        let mut bytes = Vec::new();
        write_ply(&cloud, &mut bytes).unwrap();
        let back = read_ply(&bytes[..]).unwrap();
        assert_eq!(back.positions, cloud.positions);
        assert_eq!(back.colors[0], [1.0, 0.0, 51.0 / 255.0]);
        assert!(read_ply(&b"ply\nformat ascii 1.0\nend_header\n"[..]).is_err());
    }
}
