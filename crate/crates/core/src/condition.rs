//! Reference aerial view selection and conditioning bundles for ground-view synthesis.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::cloud::{render_points, PointCloud, PointRenderSettings};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::geom::{direction_angle, Camera};
use crate::imaging::RgbImage;
use crate::trajectory::RigCameraRole;

pub const DEFAULT_NUM_REFS: usize = 3;
/// Side length of bundle images.
pub const BUNDLE_SIZE: usize = 256;

/// The five posed views of one aerial rig position.
#[derive(Debug, Clone)]
pub struct RigViews {
    pub rig_id: usize,
    pub position: Vector3<f64>,
    /// `(role, camera, view id)` in any order; exactly one `Down`.
    pub views: Vec<(RigCameraRole, Camera, String)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefChoice {
    /// Index into the rig's `views`.
    pub slot: usize,
    pub role: RigCameraRole,
    pub angle: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Index into the `rigs` slice given to [`select_references`].
    pub rig: usize,
    /// Ordered by ascending angle to the ground camera's axis.
    pub refs: Vec<RefChoice>,
}

/// Pick the closest rig (3D distance, lower index on ties), rank its views by
/// the angle between optical axes, keep the best `n` and make sure the down
/// view is among them by swapping it in for the worst pick.
pub fn select_references(rigs: &[RigViews], ground: &Camera, n: usize) -> Result<Selection> {
    if !(1..=5).contains(&n) {
        return Err(Error::config(format!("number of reference views must be in 1..=5, got {n}")));
    }
    if rigs.is_empty() {
        return Err(Error::Empty("no aerial rigs to select from".into()));
    }
    let c = ground.center();
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, r) in rigs.iter().enumerate() {
        let d = (r.position - c).norm();
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    let rig = &rigs[best];
    let downs = rig.views.iter().filter(|v| v.0 == RigCameraRole::Down).count();
    if downs != 1 || rig.views.len() < n {
        return Err(Error::data(format!(
            "rig {} has {} views with {downs} down views",
            rig.rig_id,
            rig.views.len()
        )));
    }
    let axis = ground.optical_axis();
    let mut ranked = rig
        .views
        .iter()
        .enumerate()
        .map(|(slot, (role, cam, _))| {
            Ok(RefChoice {
                slot,
                role: *role,
                angle: direction_angle(&cam.optical_axis(), &axis)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| a.angle.total_cmp(&b.angle));
    let mut refs = ranked[..n].to_vec();
    if !refs.iter().any(|r| r.role == RigCameraRole::Down) {
        refs[n - 1] = *ranked.iter().find(|r| r.role == RigCameraRole::Down).unwrap();
    }
    Ok(Selection { rig: best, refs })
}

/// Conditioning inputs for synthesizing one ground view.
#[derive(Debug, Clone)]
pub struct ConditioningBundle {
    pub ref_view_ids: Vec<String>,
    pub ref_roles: Vec<RigCameraRole>,
    pub ref_angles: Vec<f64>,
    pub ref_images: Vec<RgbImage>,
    pub ref_cameras: Vec<Camera>,
    pub ground_camera: Camera,
    pub point_render: RgbImage,
    pub rig_id: usize,
}

impl ConditioningBundle {
    pub fn num_refs(&self) -> usize {
        self.ref_images.len()
    }

    pub fn check(&self) -> Result<()> {
        let n = self.ref_images.len();
        if self.ref_cameras.len() != n || self.ref_view_ids.len() != n || self.ref_roles.len() != n {
            return Err(Error::Shape("bundle reference lists are misaligned".into()));
        }
        if self.ref_roles.iter().filter(|r| **r == RigCameraRole::Down).count() != 1 {
            return Err(Error::data("bundle must hold exactly one down view"));
        }
        for img in self.ref_images.iter().chain([&self.point_render]) {
            if img.width != BUNDLE_SIZE || img.height != BUNDLE_SIZE {
                return Err(Error::Shape(format!(
                    "bundle image is {}x{}, expected {BUNDLE_SIZE}x{BUNDLE_SIZE}",
                    img.width, img.height
                )));
            }
        }
        Ok(())
    }
}

/// Gather references for `ground_camera` from a captured dataset and render the
/// point cloud from it, all at bundle resolution.
pub fn build_bundle(
    dataset: &Dataset,
    rigs: &[RigViews],
    ground_camera: &Camera,
    cloud: &PointCloud,
    settings: &PointRenderSettings,
    n: usize,
) -> Result<ConditioningBundle> {
    let sel = select_references(rigs, ground_camera, n)?;
    let rig = &rigs[sel.rig];
    let side = BUNDLE_SIZE as u32;
    let mut bundle = ConditioningBundle {
        ref_view_ids: Vec::with_capacity(n),
        ref_roles: Vec::with_capacity(n),
        ref_angles: Vec::with_capacity(n),
        ref_images: Vec::with_capacity(n),
        ref_cameras: Vec::with_capacity(n),
        ground_camera: ground_camera.with_resolution(side, side),
        point_render: RgbImage::new(0, 0),
        rig_id: rig.rig_id,
    };
    for r in &sel.refs {
        let (role, cam, id) = &rig.views[r.slot];
        let img = dataset.load_rgb(id)?;
        bundle.ref_images.push(img.resized(BUNDLE_SIZE, BUNDLE_SIZE));
        bundle.ref_cameras.push(cam.with_resolution(side, side));
        bundle.ref_view_ids.push(id.clone());
        bundle.ref_roles.push(*role);
        bundle.ref_angles.push(r.angle);
    }
    bundle.point_render = render_points(cloud, &bundle.ground_camera, settings)?;
    Ok(bundle)
}

/// Auditable record of one bundle, written beside its point render.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleManifest {
    pub version: u32,
    pub ground_view_id: String,
    pub rig_id: usize,
    pub refs: Vec<BundleRef>,
    pub ground_camera: Camera,
    /// Point render path, relative to the bundle directory.
    pub point_render: String,
    /// Ground-truth ground view, relative to the dataset root, when captured.
    pub target: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleRef {
    pub view_id: String,
    pub role: RigCameraRole,
    pub angle: f64,
    /// Image path relative to the dataset root.
    pub path: String,
    pub camera: Camera,
}
