//! Fixed (non-learned) conditioning features: camera vectors, timestep
//! sinusoids and point-render tokens.

use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::geom::Camera;
use crate::imaging::RgbImage;

pub const CAMERA_FEATURES: usize = 20;
pub const EMBED_DIM: usize = 128;
pub const TOKEN_GRID: usize = 16;
pub const NUM_TOKENS: usize = TOKEN_GRID * TOKEN_GRID;
pub const PATCH: usize = 16;
pub const PATCH_LEN: usize = PATCH * PATCH * 3;
pub const TOKEN_DIM: usize = 128;
const PROJECTION_SEED: u64 = 0x7a11_5eed;

/// Flattened world-from-camera matrix (translation divided by the scene
/// diameter) followed by `fx/w, fy/h, cx/w, cy/h`.
pub fn camera_features(camera: &Camera, scene_diameter: f64) -> [f64; CAMERA_FEATURES] {
    let mut m = camera.pose.to_matrix();
    for r in 0..3 {
        m[(r, 3)] /= scene_diameter;
    }
    let k = &camera.intrinsics;
    let (w, h) = (k.width as f64, k.height as f64);
    let mut f = [0.0; CAMERA_FEATURES];
    for r in 0..4 {
        for c in 0..4 {
            f[r * 4 + c] = m[(r, c)];
        }
    }
    f[16] = k.fx / w;
    f[17] = k.fy / h;
    f[18] = k.cx / w;
    f[19] = k.cy / h;
    f
}

/// Standard transformer sinusoid of a timestep.
pub fn timestep_sinusoid(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
        out[i] = (t * freq).sin();
        out[half + i] = (t * freq).cos();
    }
    out
}

/// Seeded `TOKEN_DIM × PATCH_LEN` matrix with orthonormal rows.
pub fn token_projection() -> &'static [f64] {
    static P: OnceLock<Vec<f64>> = OnceLock::new();
    P.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(PROJECTION_SEED);
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(TOKEN_DIM);
        while rows.len() < TOKEN_DIM {
            let mut v: Vec<f64> = (0..PATCH_LEN)
                .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                .collect();
            // Modified Gram-Schmidt, applied twice for numerical orthogonality.
            for _ in 0..2 {
                for r in &rows {
                    let d: f64 = r.iter().zip(&v).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(r).for_each(|(x, y)| *x -= d * y);
                }
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-6 {
                v.iter_mut().for_each(|x| *x /= n);
                rows.push(v);
            }
        }
        rows.concat()
    })
}

/// `NUM_TOKENS × TOKEN_DIM` unit-norm tokens, one per 16×16 patch in
/// row-major patch order. An all-zero patch yields an all-zero token.
pub fn point_tokens(img: &RgbImage) -> Result<Vec<f64>> {
    let side = TOKEN_GRID * PATCH;
    if img.width != side || img.height != side {
        return Err(Error::Shape(format!(
            "point render must be {side}x{side}, got {}x{}",
            img.width, img.height
        )));
    }
    let proj = token_projection();
    let mut out = vec![0.0; NUM_TOKENS * TOKEN_DIM];
    let mut patch = vec![0.0; PATCH_LEN];
    for py in 0..TOKEN_GRID {
        for px in 0..TOKEN_GRID {
            for y in 0..PATCH {
                for x in 0..PATCH {
                    let p = img.get(px * PATCH + x, py * PATCH + y);
                    patch[(y * PATCH + x) * 3..(y * PATCH + x) * 3 + 3].copy_from_slice(&p);
                }
            }
            let tok = &mut out[(py * TOKEN_GRID + px) * TOKEN_DIM..(py * TOKEN_GRID + px + 1) * TOKEN_DIM];
            for (d, row) in tok.iter_mut().zip(proj.chunks(PATCH_LEN)) {
                *d = row.iter().zip(&patch).map(|(a, b)| a * b).sum();
            }
            let n = tok.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                tok.iter_mut().for_each(|v| *v /= n);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{look_at, Intrinsics};
    use nalgebra::Vector3;

    #[test]
    fn projection_rows_are_orthonormal() {
        let p = token_projection();
        for i in [0, 17, 127] {
            for j in [0, 17, 127] {
                let d: f64 = p[i * PATCH_LEN..(i + 1) * PATCH_LEN]
                    .iter()
                    .zip(&p[j * PATCH_LEN..(j + 1) * PATCH_LEN])
                    .map(|(a, b)| a * b)
                    .sum();
                assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tokens_are_unit_and_local() {
        let mut img = RgbImage::filled(256, 256, [0.4, 0.5, 0.6]);
        let a = point_tokens(&img).unwrap();
        for t in a.chunks(TOKEN_DIM) {
            assert!((t.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
        }
        img.set(40, 20, [1.0, 0.0, 0.0]);
        let b = point_tokens(&img).unwrap();
        let changed: Vec<usize> = (0..NUM_TOKENS)
            .filter(|&i| a[i * TOKEN_DIM..(i + 1) * TOKEN_DIM] != b[i * TOKEN_DIM..(i + 1) * TOKEN_DIM])
            .collect();
        assert_eq!(changed, vec![16 + 2]);
    }

    #[test]
    fn camera_features_scale_invariant() {
        let k = Intrinsics::from_hfov(64, 64, 1.0).unwrap();
        let cam = |s: f64| {
            let p = Vector3::new(3.0, 4.0, 5.0) * s;
            Camera::new(k, look_at(p, p + Vector3::new(1.0, 0.0, -0.2), Vector3::z()).unwrap())
        };
        let (a, b) = (camera_features(&cam(1.0), 50.0), camera_features(&cam(3.0), 150.0));
        for i in 0..CAMERA_FEATURES {
            assert!((a[i] - b[i]).abs() < 1e-12);
        }
    }
}
