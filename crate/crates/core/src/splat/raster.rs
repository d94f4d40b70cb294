//! Differentiable Gaussian rasterizer: perspective projection with a
//! first-order covariance transform, one global depth sort per image and
//! front-to-back alpha compositing.
//!
//! Tiles only bound the work per pixel. A Gaussian contributes to a pixel iff
//! its alpha there is at least [`ALPHA_MIN`], and the tile lists are built from
//! a radius that provably contains every such pixel, so the result equals the
//! untiled sum.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use super::gaussian::{quat_matrix_partials, quat_to_matrix, Gaussian, PARAMS, SH_C0, SH_C1};
use crate::error::{Error, Result};
use crate::geom::Camera;
use crate::imaging::RgbImage;

/// Screen-space low-pass added to every projected covariance (pixels²).
pub const DILATION: f64 = 0.3;
pub const ALPHA_MIN: f64 = 1e-4;
/// Compositing stops once transmittance falls below this.
pub const T_MIN: f64 = 1e-4;
pub const NEAR: f64 = 0.01;
/// Centers beyond this multiple of the half-image extent are culled.
pub const GUARD: f64 = 1.3;
const TILE: usize = 4;

/// Everything computed while projecting one Gaussian.
#[derive(Debug, Clone)]
struct Proj {
    id: u32,
    depth: f64,
    mean: Vector2<f64>,
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
    radius: f64,
    /// Exponent below which alpha falls under `ALPHA_MIN`.
    cut: f64,
}

/// Intermediates needed again for the chain rule.
struct ProjFull {
    t: Vector3<f64>,
    w: Matrix3<f64>,
    m: Matrix2x3<f64>,
    sigma3: Matrix3<f64>,
    rot: Matrix3<f64>,
    scale: Vector3<f64>,
    qn: [f64; 4],
    qnorm: f64,
    conic: Matrix2<f64>,
    dir: Vector3<f64>,
    dist: f64,
    raw: [f64; 3],
    opacity: f64,
}

fn project_full(g: &Gaussian, cam: &Camera) -> Option<ProjFull> {
    let p = Vector3::from(g.position);
    let w = cam.pose.rotation.transpose();
    let t = w * (p - cam.pose.translation);
    if !(t.z > NEAR) {
        return None;
    }
    let k = &cam.intrinsics;
    let (fx, fy) = (k.fx, k.fy);
    // Off-screen centers near the camera plane would get unbounded footprints.
    let (gx, gy) = (t.x / t.z * fx, t.y / t.z * fy);
    let (iw, ih) = (cam.width() as f64, cam.height() as f64);
    if gx < -GUARD * k.cx || gx > GUARD * (iw - k.cx) || gy < -GUARD * k.cy || gy > GUARD * (ih - k.cy) {
        return None;
    }
    let j = Matrix2x3::new(fx / t.z, 0.0, -fx * t.x / (t.z * t.z), 0.0, fy / t.z, -fy * t.y / (t.z * t.z));
    let qnorm = g.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(qnorm > 0.0) {
        return None;
    }
    let qn = g.rotation.map(|v| v / qnorm);
    let rot = quat_to_matrix(&qn);
    let scale = Vector3::from(g.log_scale.map(f64::exp));
    let a = rot * Matrix3::from_diagonal(&scale);
    let sigma3 = a * a.transpose();
    let m = j * w;
    let cov = m * sigma3 * m.transpose() + Matrix2::identity() * DILATION;
    let conic = cov.try_inverse()?;
    let d = p - cam.pose.translation;
    let dist = d.norm();
    let dir = d / dist;
    Some(ProjFull {
        t,
        w,
        m,
        sigma3,
        rot,
        scale,
        qn,
        qnorm,
        conic,
        dir,
        dist,
        raw: g.raw_color(&dir),
        opacity: g.opacity(),
    })
}

fn project(id: u32, g: &Gaussian, cam: &Camera) -> Option<Proj> {
    let f = project_full(g, cam)?;
    if f.opacity < ALPHA_MIN {
        return None;
    }
    let k = &cam.intrinsics;
    let mean = Vector2::new(k.fx * f.t.x / f.t.z + k.cx, k.fy * f.t.y / f.t.z + k.cy);
    // Largest eigenvalue of the 2D covariance bounds the footprint.
    let cov = f.conic.try_inverse()?;
    let (a, b, c) = (cov[(0, 0)], cov[(0, 1)], cov[(1, 1)]);
    let lmax = 0.5 * (a + c) + (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let radius = (2.0 * lmax * (f.opacity / ALPHA_MIN).ln()).sqrt();
    let (w, h) = (cam.width() as f64, cam.height() as f64);
    if mean.x + radius < 0.0 || mean.y + radius < 0.0 || mean.x - radius > w || mean.y - radius > h || !radius.is_finite() {
        return None;
    }
    Some(Proj {
        id,
        depth: f.t.z,
        mean,
        conic: [f.conic[(0, 0)], f.conic[(0, 1)], f.conic[(1, 1)]],
        opacity: f.opacity,
        color: f.raw.map(|v| v.max(0.0)),
        radius,
        cut: (ALPHA_MIN / f.opacity).ln(),
    })
}

struct Raster {
    width: usize,
    height: usize,
    tiles_x: usize,
    sorted: Vec<Proj>,
    tiles: Vec<Vec<u32>>,
}

fn prepare(parts: &[&[Gaussian]], cam: &Camera) -> Raster {
    let all: Vec<(u32, &Gaussian)> = parts
        .iter()
        .flat_map(|p| p.iter())
        .enumerate()
        .map(|(i, g)| (i as u32, g))
        .collect();
    let mut sorted: Vec<Proj> = all.par_iter().filter_map(|&(i, g)| project(i, g, cam)).collect();
    sorted.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.id.cmp(&b.id)));
    let (width, height) = (cam.width() as usize, cam.height() as usize);
    let (tiles_x, tiles_y) = (width.div_ceil(TILE), height.div_ceil(TILE));
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for (s, p) in sorted.iter().enumerate() {
        // Pixel centres x + 0.5 within [mean - r, mean + r].
        let lo = |m: f64| ((m - p.radius - 0.5).ceil().max(0.0)) as usize;
        let hi = |m: f64, n: usize| ((m + p.radius - 0.5).floor().min(n as f64 - 1.0)) as isize;
        let (x0, y0) = (lo(p.mean.x), lo(p.mean.y));
        let (x1, y1) = (hi(p.mean.x, width), hi(p.mean.y, height));
        if x1 < x0 as isize || y1 < y0 as isize {
            continue;
        }
        for ty in y0 / TILE..=y1 as usize / TILE {
            for tx in x0 / TILE..=x1 as usize / TILE {
                tiles[ty * tiles_x + tx].push(s as u32);
            }
        }
    }
    Raster { width, height, tiles_x, sorted, tiles }
}

#[inline]
fn alpha_at(p: &Proj, px: f64, py: f64) -> Option<(f64, f64, f64, f64)> {
    let (dx, dy) = (px - p.mean.x, py - p.mean.y);
    let [a, b, c] = p.conic;
    let power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy;
    if power > 0.0 || power < p.cut {
        return None;
    }
    let g = power.exp();
    let alpha = p.opacity * g;
    (alpha >= ALPHA_MIN).then_some((alpha, g, dx, dy))
}

impl Raster {
    fn tile_pixels(&self, tile: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let (tx, ty) = (tile % self.tiles_x, tile / self.tiles_x);
        let (x0, y0) = (tx * TILE, ty * TILE);
        let (x1, y1) = ((x0 + TILE).min(self.width), (y0 + TILE).min(self.height));
        (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
    }
}

/// Rendered image with per-pixel compositing diagnostics.
#[derive(Debug, Clone)]
pub struct RenderDetail {
    pub image: RgbImage,
    /// Transmittance left after the last composited Gaussian.
    pub transmittance: Vec<f64>,
    /// Sum of compositing weights `T_k α_k`.
    pub weight_sum: Vec<f64>,
}

pub fn render_detail(parts: &[&[Gaussian]], cam: &Camera, background: [f64; 3]) -> RenderDetail {
    let r = prepare(parts, cam);
    let n = r.width * r.height;
    let per_tile: Vec<Vec<(usize, [f64; 3], f64, f64)>> = (0..r.tiles.len())
        .into_par_iter()
        .map(|tile| {
            let list = &r.tiles[tile];
            r.tile_pixels(tile)
                .map(|(x, y)| {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let mut t = 1.0;
                    let mut col = [0.0; 3];
                    let mut wsum = 0.0;
                    for &s in list {
                        let p = &r.sorted[s as usize];
                        let Some((alpha, ..)) = alpha_at(p, px, py) else { continue };
                        let w = t * alpha;
                        for c in 0..3 {
                            col[c] += w * p.color[c];
                        }
                        wsum += w;
                        t *= 1.0 - alpha;
                        if t < T_MIN {
                            break;
                        }
                    }
                    for c in 0..3 {
                        col[c] += t * background[c];
                    }
                    (y * r.width + x, col, t, wsum)
                })
                .collect()
        })
        .collect();
    let mut image = RgbImage::new(r.width, r.height);
    let mut transmittance = vec![1.0; n];
    let mut weight_sum = vec![0.0; n];
    for (i, col, t, w) in per_tile.into_iter().flatten() {
        image.pixels[i] = col;
        transmittance[i] = t;
        weight_sum[i] = w;
    }
    RenderDetail { image, transmittance, weight_sum }
}

pub fn render_gaussians(parts: &[&[Gaussian]], cam: &Camera, background: [f64; 3]) -> RgbImage {
    render_detail(parts, cam, background).image
}

/// Screen-space gradient slots: color (3), opacity, mean (2), conic (3).
type Grad2d = [f64; 9];

/// Gradient of a scalar loss with respect to every Gaussian parameter, given
/// `d loss / d pixel`. Rows follow the concatenation of `parts`.
pub fn render_backward(
    parts: &[&[Gaussian]],
    cam: &Camera,
    background: [f64; 3],
    grad_image: &[[f64; 3]],
) -> Result<Vec<[f64; PARAMS]>> {
    let r = prepare(parts, cam);
    if grad_image.len() != r.width * r.height {
        return Err(Error::Shape(format!(
            "pixel gradient has {} entries for a {}x{} image",
            grad_image.len(),
            r.width,
            r.height
        )));
    }
    let per_tile: Vec<Vec<Grad2d>> = (0..r.tiles.len())
        .into_par_iter()
        .map(|tile| {
            let list = &r.tiles[tile];
            let mut local = vec![[0.0; 9]; list.len()];
            let mut stack: Vec<(usize, f64, f64, f64, f64, f64)> = Vec::new();
            for (x, y) in r.tile_pixels(tile) {
                let dl = grad_image[y * r.width + x];
                if dl == [0.0; 3] {
                    continue;
                }
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                stack.clear();
                let mut t = 1.0;
                for (slot, &s) in list.iter().enumerate() {
                    let p = &r.sorted[s as usize];
                    let Some((alpha, g, dx, dy)) = alpha_at(p, px, py) else { continue };
                    stack.push((slot, alpha, t, g, dx, dy));
                    t *= 1.0 - alpha;
                    if t < T_MIN {
                        break;
                    }
                }
                // Color behind the current Gaussian, normalized by the
                // transmittance just after it.
                let mut behind = background;
                for &(slot, alpha, t, g, dx, dy) in stack.iter().rev() {
                    let p = &r.sorted[list[slot] as usize];
                    let acc = &mut local[slot];
                    let mut dalpha = 0.0;
                    for c in 0..3 {
                        acc[c] += t * alpha * dl[c];
                        dalpha += t * (p.color[c] - behind[c]) * dl[c];
                        behind[c] = alpha * p.color[c] + (1.0 - alpha) * behind[c];
                    }
                    acc[3] += dalpha * g;
                    let dpow = dalpha * alpha;
                    let [a, b, c] = p.conic;
                    acc[4] += dpow * (a * dx + b * dy);
                    acc[5] += dpow * (b * dx + c * dy);
                    acc[6] += dpow * -0.5 * dx * dx;
                    acc[7] += dpow * -dx * dy;
                    acc[8] += dpow * -0.5 * dy * dy;
                }
            }
            local
        })
        .collect();
    let mut g2d = vec![[0.0; 9]; r.sorted.len()];
    for (tile, local) in per_tile.into_iter().enumerate() {
        for (slot, v) in local.into_iter().enumerate() {
            let dst = &mut g2d[r.tiles[tile][slot] as usize];
            for k in 0..9 {
                dst[k] += v[k];
            }
        }
    }
    let all: Vec<&Gaussian> = parts.iter().flat_map(|p| p.iter()).collect();
    let rows: Vec<(u32, [f64; PARAMS])> = r
        .sorted
        .par_iter()
        .zip(g2d.par_iter())
        .filter(|(_, g)| g.iter().any(|&v| v != 0.0))
        .map(|(p, g)| (p.id, chain(all[p.id as usize], cam, g)))
        .collect();
    let mut out = vec![[0.0; PARAMS]; all.len()];
    for (id, row) in rows {
        out[id as usize] = row;
    }
    Ok(out)
}

/// Carry screen-space gradients back to the Gaussian's own parameters.
fn chain(g: &Gaussian, cam: &Camera, g2: &Grad2d) -> [f64; PARAMS] {
    let mut out = [0.0; PARAMS];
    let f = project_full(g, cam).expect("contributing Gaussian must project");
    let k = &cam.intrinsics;
    let (fx, fy) = (k.fx, k.fy);

    out[10] = g2[3] * f.opacity * (1.0 - f.opacity);

    // Spherical harmonics and the view direction.
    let s = &g.sh;
    let d = f.dir;
    let mut gdir = Vector3::zeros();
    for c in 0..3 {
        if f.raw[c] < 0.0 {
            continue;
        }
        let gc = g2[c];
        out[11 + c] = gc * SH_C0;
        out[14 + c] = -gc * SH_C1 * d.y;
        out[17 + c] = gc * SH_C1 * d.z;
        out[20 + c] = -gc * SH_C1 * d.x;
        gdir += gc * SH_C1 * Vector3::new(-s[9 + c], -s[3 + c], s[6 + c]);
    }
    let mut gpos = (gdir - d * d.dot(&gdir)) / f.dist;

    // Conic -> 2D covariance -> 3D covariance and the projection Jacobian.
    let q = f.conic;
    let gq = Matrix2::new(g2[6], 0.5 * g2[7], 0.5 * g2[7], g2[8]);
    let gcov = -(q * gq * q);
    let gsigma3 = f.m.transpose() * gcov * f.m;
    let gm = 2.0 * gcov * f.m * f.sigma3;
    let gj = gm * f.w.transpose();

    let a = f.rot * Matrix3::from_diagonal(&f.scale);
    let ga = 2.0 * gsigma3 * a;
    let grot = ga * Matrix3::from_diagonal(&f.scale);
    let rtga = f.rot.transpose() * ga;
    for i in 0..3 {
        out[3 + i] = rtga[(i, i)] * f.scale[i];
    }
    let parts = quat_matrix_partials(&f.qn);
    let gqn: [f64; 4] = parts.map(|pm| pm.component_mul(&grot).sum());
    let dot: f64 = (0..4).map(|i| gqn[i] * f.qn[i]).sum();
    for i in 0..4 {
        out[6 + i] = (gqn[i] - f.qn[i] * dot) / f.qnorm;
    }

    let t = f.t;
    let (tz2, tz3) = (t.z * t.z, t.z * t.z * t.z);
    let mut gt = Vector3::zeros();
    gt.x += gj[(0, 2)] * (-fx / tz2);
    gt.y += gj[(1, 2)] * (-fy / tz2);
    gt.z += gj[(0, 0)] * (-fx / tz2)
        + gj[(0, 2)] * (2.0 * fx * t.x / tz3)
        + gj[(1, 1)] * (-fy / tz2)
        + gj[(1, 2)] * (2.0 * fy * t.y / tz3);
    let (gu, gv) = (g2[4], g2[5]);
    gt.x += gu * fx / t.z;
    gt.y += gv * fy / t.z;
    gt.z += -gu * fx * t.x / tz2 - gv * fy * t.y / tz2;
    gpos += f.w.transpose() * gt;
    out[0..3].copy_from_slice(gpos.as_slice());
    out
}
