//! Pinhole cameras and rigid poses.
//!
//! Conventions used throughout the crate:
//!
//! * world frame: right-handed, z up, meters;
//! * camera frame: x right, y down, z forward along the optical axis;
//! * poses are stored world-from-camera, so the columns of the rotation are
//!   the camera axes expressed in world coordinates.

use nalgebra::{Matrix3, Matrix4, Point2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let intr = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    /// Square-pixel intrinsics with the principal point at the image center.
    pub fn from_hfov(width: u32, height: u32, hfov: f64) -> Result<Self> {
        if !(hfov > 0.0 && hfov < std::f64::consts::PI) {
            return Err(Error::config(format!("hfov must be in (0, pi), got {hfov}")));
        }
        let f = 0.5 * width as f64 / (0.5 * hfov).tan();
        Self::new(f, f, 0.5 * width as f64, 0.5 * height as f64, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::config(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::config("image size must be non-zero"));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64) {
            return Err(Error::config(format!(
                "cx={} outside (0, {})",
                self.cx, self.width
            )));
        }
        if !(self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(Error::config(format!(
                "cy={} outside (0, {})",
                self.cy, self.height
            )));
        }
        Ok(())
    }

    /// Same field of view at a different resolution.
    pub fn resized(&self, width: u32, height: u32) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
        }
    }
}

/// Rigid world-from-camera transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

const ORTHO_TOL: f64 = 1e-9;

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let pose = Self {
            rotation,
            translation,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn validate(&self) -> Result<()> {
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        if err > ORTHO_TOL {
            return Err(Error::Degenerate(format!(
                "rotation is not orthonormal (max |RᵀR - I| = {err:e})"
            )));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > ORTHO_TOL {
            return Err(Error::Degenerate(format!("rotation determinant {det} != 1")));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::Degenerate("non-finite translation".into()));
        }
        Ok(())
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse_transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Re-orthonormalize a nearly orthonormal rotation (polar projection via SVD).
    pub fn orthonormalized(&self) -> Self {
        let svd = self.rotation.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            let mut u2 = u;
            u2.column_mut(2).neg_mut();
            r = u2 * vt;
        }
        Self {
            rotation: r,
            translation: self.translation,
        }
    }
}

/// Camera-frame axis `i` (0 = right, 1 = down, 2 = forward) in world coordinates.
fn axis(pose: &Pose, i: usize) -> Vector3<f64> {
    pose.rotation.column(i).into_owned()
}

/// Build a world-from-camera pose looking from `position` toward `target`.
///
/// The camera x axis is `forward × up_hint`, which points to the right of the
/// view direction when `up_hint` points up.
pub fn look_at(position: Vector3<f64>, target: Vector3<f64>, up_hint: Vector3<f64>) -> Result<Pose> {
    let dir = target - position;
    let len = dir.norm();
    if !(len > 1e-12) {
        return Err(Error::Degenerate(
            "look_at: target coincides with position".into(),
        ));
    }
    let z = dir / len;
    let up_len = up_hint.norm();
    if !(up_len > 1e-12) {
        return Err(Error::Degenerate("look_at: up_hint is a zero vector".into()));
    }
    let x = z.cross(&up_hint);
    let xn = x.norm();
    if xn < 1e-9 * up_len {
        return Err(Error::Degenerate(
            "look_at: up_hint is parallel to the view direction".into(),
        ));
    }
    let x = x / xn;
    let y = z.cross(&x);
    let rotation = Matrix3::from_columns(&[x, y, z]);
    Ok(Pose {
        rotation,
        translation: position,
    })
}

/// Angle between two nonzero vectors, in `[0, π]`.
pub fn direction_angle(a: &Vector3<f64>, b: &Vector3<f64>) -> Result<f64> {
    let (na, nb) = (a.norm(), b.norm());
    if !(na > 0.0 && nb > 0.0) {
        return Err(Error::Degenerate("direction_angle of a zero vector".into()));
    }
    let c = (a.dot(b) / (na * nb)).clamp(-1.0, 1.0);
    Ok(c.acos())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub pose: Pose,
}

impl Camera {
    pub fn new(intrinsics: Intrinsics, pose: Pose) -> Self {
        Self { intrinsics, pose }
    }

    pub fn width(&self) -> u32 {
        self.intrinsics.width
    }

    pub fn height(&self) -> u32 {
        self.intrinsics.height
    }

    pub fn center(&self) -> Vector3<f64> {
        self.pose.translation
    }

    pub fn optical_axis(&self) -> Vector3<f64> {
        axis(&self.pose, 2)
    }

    pub fn right(&self) -> Vector3<f64> {
        axis(&self.pose, 0)
    }

    pub fn down(&self) -> Vector3<f64> {
        axis(&self.pose, 1)
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.pose.inverse_transform_point(p)
    }

    /// Pixel coordinates and camera-frame depth of a world point.
    pub fn project(&self, world_point: &Vector3<f64>) -> Result<(Point2<f64>, f64)> {
        let pc = self.world_to_camera(world_point);
        if !(pc.z > 0.0) {
            return Err(Error::BehindCamera { z: pc.z });
        }
        let k = &self.intrinsics;
        let u = k.fx * pc.x / pc.z + k.cx;
        let v = k.fy * pc.y / pc.z + k.cy;
        Ok((Point2::new(u, v), pc.z))
    }

    /// World point at the given pixel and camera-frame depth.
    pub fn backproject(&self, pixel: &Point2<f64>, depth: f64) -> Result<Vector3<f64>> {
        if !(depth > 0.0 && depth.is_finite()) {
            return Err(Error::InvalidDepth(depth));
        }
        let pc = self.camera_ray(pixel) * depth;
        Ok(self.pose.transform_point(&pc))
    }

    /// Camera-frame ray through a pixel, scaled so its z component is 1.
    pub fn camera_ray(&self, pixel: &Point2<f64>) -> Vector3<f64> {
        let k = &self.intrinsics;
        Vector3::new((pixel.x - k.cx) / k.fx, (pixel.y - k.cy) / k.fy, 1.0)
    }

    /// World-frame ray direction through a pixel whose camera-frame z is 1,
    /// so a hit at parameter `t` has depth `t`.
    pub fn world_ray(&self, pixel: &Point2<f64>) -> Vector3<f64> {
        self.pose.rotation * self.camera_ray(pixel)
    }

    pub fn with_resolution(&self, width: u32, height: u32) -> Self {
        Self {
            intrinsics: self.intrinsics.resized(width, height),
            pose: self.pose,
        }
    }

    pub fn to_record(&self) -> CameraRecord {
        let m = self.pose.to_matrix();
        let mut wfc = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                wfc[r * 4 + c] = m[(r, c)];
            }
        }
        let k = &self.intrinsics;
        CameraRecord {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            width: k.width,
            height: k.height,
            world_from_camera: wfc,
        }
    }

    pub fn from_record(rec: &CameraRecord) -> Result<Self> {
        let intr = Intrinsics::new(rec.fx, rec.fy, rec.cx, rec.cy, rec.width, rec.height)?;
        let m = &rec.world_from_camera;
        let rotation = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        let translation = Vector3::new(m[3], m[7], m[11]);
        let bottom = [m[12], m[13], m[14], m[15]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::data(format!(
                "world_from_camera bottom row must be [0,0,0,1], got {bottom:?}"
            )));
        }
        Ok(Self::new(intr, Pose::new(rotation, translation)?))
    }
}

/// JSON form of a camera: intrinsics plus a row-major 4×4 world-from-camera matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRecord {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub world_from_camera: [f64; 16],
}

impl Serialize for Camera {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_record().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Camera {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rec = CameraRecord::deserialize(d)?;
        Camera::from_record(&rec).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam100() -> Camera {
        let k = Intrinsics::new(100.0, 100.0, 64.0, 64.0, 128, 128).unwrap();
        Camera::new(k, Pose::identity())
    }

    #[test]
    fn on_axis_point_hits_principal_point() {
        let (px, d) = cam100().project(&Vector3::new(0.0, 0.0, 2.0)).unwrap();
        assert_eq!((px.x, px.y, d), (64.0, 64.0, 2.0));
    }

    #[test]
    fn off_axis_projection_matches_hand_multiply() {
        let (px, d) = cam100().project(&Vector3::new(0.5, 0.0, 1.0)).unwrap();
        assert_eq!((px.x, px.y, d), (114.0, 64.0, 1.0));
    }

    #[test]
    fn behind_camera_is_an_error() {
        let err = cam100().project(&Vector3::new(0.0, 0.0, -1.0)).unwrap_err();
        assert!(matches!(err, Error::BehindCamera { .. }));
    }

    #[test]
    fn backproject_rejects_nonpositive_depth() {
        let cam = cam100();
        assert!(matches!(
            cam.backproject(&Point2::new(1.0, 1.0), 0.0),
            Err(Error::InvalidDepth(_))
        ));
        assert!(cam.backproject(&Point2::new(1.0, 1.0), -2.0).is_err());
    }

    #[test]
    fn principal_point_backprojects_along_axis() {
        let pose = look_at(
            Vector3::new(3.0, -2.0, 40.0),
            Vector3::new(10.0, 5.0, 0.0),
            Vector3::z(),
        )
        .unwrap();
        let cam = Camera::new(cam100().intrinsics, pose);
        let p = cam.backproject(&Point2::new(64.0, 64.0), 7.5).unwrap();
        let expected = cam.center() + cam.optical_axis() * 7.5;
        assert!((p - expected).norm() < 1e-12);
    }

    #[test]
    fn backproject_inverts_the_hand_example_from_an_elevated_camera() {
        let pose = Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 50.0)).unwrap();
        let cam = Camera::new(cam100().intrinsics, pose);
        let p = cam.backproject(&Point2::new(114.0, 64.0), 1.0).unwrap();
        assert!((p - Vector3::new(0.5, 0.0, 51.0)).norm() < 1e-12);
    }

    #[test]
    fn look_at_down() {
        let pose = look_at(Vector3::new(0.0, 0.0, 10.0), Vector3::zeros(), Vector3::y()).unwrap();
        let axis = pose.rotation.column(2);
        assert!((axis - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-15);
        pose.validate().unwrap();
    }

    #[test]
    fn look_at_degenerate_inputs() {
        let p = Vector3::new(1.0, 2.0, 3.0);
        let e = look_at(p, p, Vector3::z()).unwrap_err();
        assert!(e.to_string().contains("target coincides"));
        let e = look_at(Vector3::zeros(), Vector3::new(0.0, 0.0, 5.0), Vector3::z()).unwrap_err();
        assert!(e.to_string().contains("parallel"));
    }

    #[test]
    fn angles() {
        let x = Vector3::x();
        assert_eq!(direction_angle(&x, &x).unwrap(), 0.0);
        assert!((direction_angle(&x, &-x).unwrap() - std::f64::consts::PI).abs() < 1e-15);
        assert!((direction_angle(&x, &Vector3::y()).unwrap() - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
        assert!(direction_angle(&x, &Vector3::zeros()).is_err());
    }

    #[test]
    fn invalid_intrinsics() {
        assert!(Intrinsics::new(0.0, 1.0, 5.0, 5.0, 10, 10).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 10.0, 5.0, 10, 10).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 5.0, 0.0, 10, 10).is_err());
    }

    #[test]
    fn camera_json_round_trip() {
        let pose = look_at(
            Vector3::new(12.25, -3.5, 101.0),
            Vector3::new(0.3, 0.7, 0.0),
            Vector3::z(),
        )
        .unwrap();
        let cam = Camera::new(Intrinsics::from_hfov(128, 96, 1.1).unwrap(), pose);
        let json = serde_json::to_string(&cam).unwrap();
        assert!(json.contains("\"world_from_camera\""));
        let back: Camera = serde_json::from_str(&json).unwrap();
        let (a, b) = (cam.to_record(), back.to_record());
        for (x, y) in a.world_from_camera.iter().zip(b.world_from_camera.iter()) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
        assert_eq!(a.width, b.width);
        assert!((a.fx - b.fx).abs() <= 1e-12 * a.fx);
    }
}
