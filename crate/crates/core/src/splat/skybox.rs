//! Frozen-geometry sky shell: a Fibonacci lattice of flat Gaussians on a
//! sphere far outside the scene.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3, Vector4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::gaussian::{logit, rgb_to_dc, Gaussian, SH_LEN};
use crate::error::{Error, Result};

pub const DEFAULT_SKYBOX_COUNT: usize = 100_000;
/// Sphere diameter as a multiple of the scene diameter.
pub const SKYBOX_DIAMETER_FACTOR: f64 = 10.0;
pub const SKYBOX_OPACITY: f64 = 0.9;

/// Mean lattice spacing of `count` points on a sphere of `radius`.
pub fn lattice_spacing(radius: f64, count: usize) -> f64 {
    radius * (4.0 * std::f64::consts::PI / count as f64).sqrt()
}

/// `count` unit directions on a golden-angle spiral, rotated by a seeded
/// random rotation.
pub fn fibonacci_directions(count: usize, seed: u64) -> Vec<Vector3<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q: Vector4<f64> = Vector4::from_fn(|_, _| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng));
    let rot = UnitQuaternion::from_quaternion(nalgebra::Quaternion::from(q));
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..count)
        .map(|i| {
            let z = 1.0 - (2 * i + 1) as f64 / count as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64;
            rot * Vector3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

/// Quaternion `(w, x, y, z)` whose local z axis maps onto `normal`.
fn facing(normal: &Vector3<f64>) -> [f64; 4] {
    let helper = if normal.z.abs() < 0.9 { Vector3::z() } else { Vector3::x() };
    let t1 = helper.cross(normal).normalize();
    let t2 = normal.cross(&t1);
    let m = Matrix3::from_columns(&[t1, t2, *normal]);
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(m));
    [q.w, q.i, q.j, q.k]
}

/// Initial color of every sky Gaussian; only training adapts it to the views.
pub const SKYBOX_INIT_COLOR: [f64; 3] = [0.53, 0.81, 0.92];

/// Skybox Gaussians on a sphere of diameter `10 × diameter` around `center`.
/// Each is flat along the sphere normal and sized to the lattice spacing.
pub fn make_skybox(center: Vector3<f64>, diameter: f64, count: usize, seed: u64) -> Result<Vec<Gaussian>> {
    if !(diameter > 0.0 && diameter.is_finite()) {
        return Err(Error::config(format!("skybox diameter must be > 0, got {diameter}")));
    }
    if count < 1 {
        return Err(Error::config("skybox count must be >= 1"));
    }
    let radius = 0.5 * SKYBOX_DIAMETER_FACTOR * diameter;
    let spacing = lattice_spacing(radius, count);
    let tangent = (0.5 * spacing).ln();
    let normal = (0.01 * spacing).ln();
    Ok(fibonacci_directions(count, seed)
        .into_iter()
        .map(|d| {
            let p = center + d * radius;
            let mut sh = [0.0; SH_LEN];
            for c in 0..3 {
                sh[c] = rgb_to_dc(SKYBOX_INIT_COLOR[c]);
            }
            Gaussian {
                position: [p.x, p.y, p.z],
                log_scale: [tangent, tangent, normal],
                rotation: facing(&d),
                opacity_logit: logit(SKYBOX_OPACITY),
                sh,
            }
        })
        .collect())
}
