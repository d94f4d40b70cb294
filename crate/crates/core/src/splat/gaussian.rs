//! Gaussian primitives, degree-1 spherical-harmonic color and point-cloud
//! initialization.

use std::collections::HashMap;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
/// 4 basis functions × 3 colors.
pub const SH_LEN: usize = 12;
/// Flat parameter count of one Gaussian.
pub const PARAMS: usize = 23;
pub const INIT_OPACITY: f64 = 0.1;

/// Ranges of each parameter group inside the flat parameter array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Position,
    Scale,
    Rotation,
    Opacity,
    Sh,
}

impl Group {
    pub const ALL: [Group; 5] = [Group::Position, Group::Scale, Group::Rotation, Group::Opacity, Group::Sh];

    pub fn range(self) -> std::ops::Range<usize> {
        match self {
            Group::Position => 0..3,
            Group::Scale => 3..6,
            Group::Rotation => 6..10,
            Group::Opacity => 10..11,
            Group::Sh => 11..23,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian {
    pub position: [f64; 3],
    pub log_scale: [f64; 3],
    /// `(w, x, y, z)`; normalized before use.
    pub rotation: [f64; 4],
    pub opacity_logit: f64,
    /// `[dc, y1-1, y10, y11]`, each an RGB triple.
    pub sh: [f64; SH_LEN],
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// DC coefficient that evaluates to `c` when the directional terms vanish.
pub fn rgb_to_dc(c: f64) -> f64 {
    (c - 0.5) / SH_C0
}

impl Gaussian {
    pub fn new(position: [f64; 3], scale: f64, color: [f64; 3], opacity: f64) -> Self {
        let mut sh = [0.0; SH_LEN];
        for c in 0..3 {
            sh[c] = rgb_to_dc(color[c]);
        }
        Self {
            position,
            log_scale: [scale.ln(); 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: logit(opacity),
            sh,
        }
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn to_array(&self) -> [f64; PARAMS] {
        let mut a = [0.0; PARAMS];
        a[0..3].copy_from_slice(&self.position);
        a[3..6].copy_from_slice(&self.log_scale);
        a[6..10].copy_from_slice(&self.rotation);
        a[10] = self.opacity_logit;
        a[11..23].copy_from_slice(&self.sh);
        a
    }

    pub fn from_array(a: &[f64]) -> Self {
        Self {
            position: a[0..3].try_into().unwrap(),
            log_scale: a[3..6].try_into().unwrap(),
            rotation: a[6..10].try_into().unwrap(),
            opacity_logit: a[10],
            sh: a[11..23].try_into().unwrap(),
        }
    }

    /// Color seen along unit direction `d` (from the camera towards the
    /// Gaussian), before clamping.
    pub fn raw_color(&self, d: &Vector3<f64>) -> [f64; 3] {
        let s = &self.sh;
        [0, 1, 2].map(|c| 0.5 + SH_C0 * s[c] + SH_C1 * (-d.y * s[3 + c] + d.z * s[6 + c] - d.x * s[9 + c]))
    }

    /// Color seen along `d`, clamped at zero.
    pub fn color(&self, d: &Vector3<f64>) -> [f64; 3] {
        self.raw_color(d).map(|v| v.max(0.0))
    }

    pub fn renormalize(&mut self) {
        let n = self.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 && n.is_finite() {
            self.rotation.iter_mut().for_each(|v| *v /= n);
        } else {
            self.rotation = [1.0, 0.0, 0.0, 0.0];
        }
    }
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quat_to_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Partial derivatives of [`quat_to_matrix`] with respect to `w, x, y, z`.
pub fn quat_matrix_partials(q: &[f64; 4]) -> [Matrix3<f64>; 4] {
    let [w, x, y, z] = *q;
    [
        Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0,
        Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0,
        Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0,
        Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0,
    ]
}

/// Uniform-grid nearest-neighbour index over a fixed point set.
pub struct PointGrid<'a> {
    points: &'a [Vector3<f64>],
    cell: f64,
    min: Vector3<f64>,
    cells: HashMap<[i64; 3], Vec<u32>>,
}

impl<'a> PointGrid<'a> {
    pub fn new(points: &'a [Vector3<f64>], cell: f64) -> Self {
        let min = points.iter().fold(Vector3::repeat(f64::INFINITY), |m, p| m.inf(p));
        let mut cells: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
        let mut grid = Self { points, cell, min, cells: HashMap::new() };
        for (i, p) in points.iter().enumerate() {
            cells.entry(grid.key(p)).or_default().push(i as u32);
        }
        grid.cells = cells;
        grid
    }

    /// Cell size giving roughly `per_cell` points per occupied cell for a
    /// set of `n` points spread over `extent`.
    pub fn auto_cell(points: &[Vector3<f64>], per_cell: f64) -> f64 {
        let (lo, hi) = points.iter().fold(
            (Vector3::repeat(f64::INFINITY), Vector3::repeat(f64::NEG_INFINITY)),
            |(lo, hi), p| (lo.inf(p), hi.sup(p)),
        );
        let ext = hi - lo;
        // Surfaces dominate city clouds, so size cells from the two largest extents.
        let mut e = [ext.x, ext.y, ext.z];
        e.sort_by(|a, b| b.total_cmp(a));
        let area = (e[0] * e[1]).max(e[0] * e[0] * 1e-6).max(1e-12);
        (area * per_cell / points.len().max(1) as f64).sqrt().max(1e-9)
    }

    fn key(&self, p: &Vector3<f64>) -> [i64; 3] {
        let r = (p - self.min) / self.cell;
        [r.x.floor() as i64, r.y.floor() as i64, r.z.floor() as i64]
    }

    /// Distances to the `k` nearest other points of point `i`, ascending.
    pub fn knn_distances(&self, i: usize, k: usize) -> Vec<f64> {
        let p = self.points[i];
        let c = self.key(&p);
        let mut best: Vec<f64> = Vec::with_capacity(k + 1);
        let mut ring = 0i64;
        loop {
            for dx in -ring..=ring {
                for dy in -ring..=ring {
                    for dz in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        if let Some(ids) = self.cells.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                            for &j in ids {
                                if j as usize != i {
                                    let d = (self.points[j as usize] - p).norm();
                                    let pos = best.partition_point(|&b| b <= d);
                                    if pos < k {
                                        best.insert(pos, d);
                                        best.truncate(k);
                                    }
                                }
                            }
                        }
                    }
                }
            }
            // Everything within `ring * cell` of `p` has been visited.
            let covered = ring as f64 * self.cell;
            if best.len() == k && best[k - 1] <= covered {
                return best;
            }
            if best.len() + 1 >= self.points.len() && ring as f64 * self.cell > self.span() {
                return best;
            }
            ring += 1;
        }
    }

    fn span(&self) -> f64 {
        self.points
            .iter()
            .map(|p| (p - self.min).norm())
            .fold(0.0, f64::max)
            + self.cell
    }
}

/// One Gaussian per point with its color, identity rotation, opacity 0.1 and
/// an isotropic scale equal to the mean distance to the 3 nearest neighbours.
pub fn init_from_cloud(cloud: &PointCloud) -> Result<Vec<Gaussian>> {
    if cloud.is_empty() {
        return Err(Error::Empty("cannot initialize Gaussians from an empty point cloud".into()));
    }
    let pts = &cloud.positions;
    let grid = PointGrid::new(pts, PointGrid::auto_cell(pts, 4.0));
    let fallback = 0.01;
    use rayon::prelude::*;
    Ok((0..pts.len())
        .into_par_iter()
        .map(|i| {
            let d = grid.knn_distances(i, 3);
            let mut scale = if d.is_empty() { fallback } else { d.iter().sum::<f64>() / d.len() as f64 };
            if !(scale > 0.0) {
                scale = fallback;
            }
            let p = pts[i];
            Gaussian::new([p.x, p.y, p.z], scale, cloud.colors[i], INIT_OPACITY)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partials_match_finite_differences() {
        let q = [0.8, -0.3, 0.4, 0.33];
        let parts = quat_matrix_partials(&q);
        for k in 0..4 {
            let (mut a, mut b) = (q, q);
            a[k] += 1e-6;
            b[k] -= 1e-6;
            let fd = (quat_to_matrix(&a) - quat_to_matrix(&b)) / 2e-6;
            assert!((fd - parts[k]).abs().max() < 1e-8);
        }
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let r = quat_to_matrix(&q.map(|v| v / n));
        assert!((r.transpose() * r - Matrix3::identity()).abs().max() < 1e-12);
    }

    #[test]
    fn grid_knn_matches_brute_force() {
        let mut pts = Vec::new();
        for i in 0..300u32 {
            let f = i as f64;
            pts.push(Vector3::new((f * 0.37).sin() * 10.0, (f * 1.71).cos() * 7.0, (f * 0.13).sin()));
        }
        let grid = PointGrid::new(&pts, 0.9);
        for i in [0, 17, 299] {
            let mut brute: Vec<f64> = (0..pts.len()).filter(|&j| j != i).map(|j| (pts[j] - pts[i]).norm()).collect();
            brute.sort_by(f64::total_cmp);
            assert_eq!(grid.knn_distances(i, 3), brute[..3].to_vec());
        }
    }
}
