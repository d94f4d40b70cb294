//! On-disk capture datasets: rendering trajectories into posed views and
//! reading them back.
//!
//! Layout under the dataset root:
//!
//! ```text
//! scene.json
//! trajectories/aerial.json, trajectories/ground.json
//! views/{aerial|ground}/{view_id}.png       exposed 8-bit RGB
//! views/{aerial|ground}/{view_id}.agd       depth (AGD1)
//! views/{aerial|ground}/{view_id}.seg.png   semantic labels
//! views/{aerial|ground}/{view_id}.json      camera + capture metadata
//! manifest.json
//! ```

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::city::{CityScene, EnvironmentCondition};
use crate::cloud::FuseView;
use crate::condition::RigViews;
use crate::error::{Error, Result};
use crate::fsio::{read_artifact, write_atomic, write_json, write_png};
use crate::geom::{Camera, Intrinsics};
use crate::imaging::RgbImage;
use crate::render::{render, DepthMap, ExposureMode};
use crate::trajectory::{path_cameras, rig_cameras, AerialTrajectory, GroundTrajectory, RigCameraRole};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Aerial,
    Ground,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Aerial => "aerial",
            Split::Ground => "ground",
        }
    }

    pub fn exposure(&self) -> ExposureMode {
        match self {
            Split::Aerial => ExposureMode::Aerial,
            Split::Ground => ExposureMode::Ground,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LensConfig {
    pub width: u32,
    pub height: u32,
    pub hfov_deg: f64,
}

impl LensConfig {
    pub fn intrinsics(&self) -> Result<Intrinsics> {
        Intrinsics::from_hfov(self.width, self.height, self.hfov_deg.to_radians())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptureConfig {
    pub version: u32,
    pub aerial: LensConfig,
    pub ground: LensConfig,
}

impl Default for CaptureConfig {
    fn default() -> Self {
        Self {
            version: 1,
            aerial: LensConfig { width: 256, height: 256, hfov_deg: 60.0 },
            ground: LensConfig { width: 256, height: 256, hfov_deg: 75.0 },
        }
    }
}

impl CaptureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != 1 {
            return Err(Error::config("capture.version must be 1"));
        }
        for (name, l) in [("aerial", &self.aerial), ("ground", &self.ground)] {
            if l.width == 0 || l.height == 0 {
                return Err(Error::config(format!("capture.{name}: image size must be positive")));
            }
            if !(l.hfov_deg > 0.0 && l.hfov_deg < 180.0) {
                return Err(Error::config(format!("capture.{name}.hfov_deg must be in (0, 180)")));
            }
        }
        Ok(())
    }
}

/// Per-view metadata written beside each image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewSidecar {
    pub view_id: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rig_id: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub path_id: Option<String>,
    pub role: String,
    pub mode: ExposureMode,
    pub env: EnvironmentCondition,
    pub camera: Camera,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewEntry {
    pub view_id: String,
    pub split: Split,
    pub role: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rig_id: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub path_id: Option<String>,
    pub camera: Camera,
    pub rgb: String,
    pub depth: String,
    pub seg: String,
    pub sidecar: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub scene: String,
    pub env: EnvironmentCondition,
    pub capture: CaptureConfig,
    pub views: Vec<ViewEntry>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    index: HashMap<String, usize>,
}

struct PlannedView {
    entry: ViewEntry,
    sidecar: ViewSidecar,
}

pub fn aerial_view_id(rig: usize, role: RigCameraRole) -> String {
    format!("r{rig:04}_{}", role.as_str())
}

pub fn ground_view_id(path_id: &str, index: usize) -> String {
    format!("{path_id}_{index:04}")
}

/// Every camera of both trajectories, in capture order.
fn plan_views(
    aerial: &AerialTrajectory,
    ground: &GroundTrajectory,
    env: &EnvironmentCondition,
    cfg: &CaptureConfig,
) -> Result<Vec<PlannedView>> {
    let mut out = Vec::new();
    let ka = cfg.aerial.intrinsics()?;
    for (ri, rig) in aerial.rigs.iter().enumerate() {
        for (role, camera) in rig_cameras(rig, &ka) {
            let id = aerial_view_id(ri, role);
            out.push(planned(id, Split::Aerial, role.as_str().into(), Some(ri), None, camera, env));
        }
    }
    let kg = cfg.ground.intrinsics()?;
    for route in &ground.routes {
        for (i, camera) in path_cameras(&route.path, &kg)?.into_iter().enumerate() {
            let id = ground_view_id(&route.path_id, i);
            out.push(planned(id, Split::Ground, "ground".into(), None, Some(route.path_id.clone()), camera, env));
        }
    }
    Ok(out)
}

fn planned(
    view_id: String,
    split: Split,
    role: String,
    rig_id: Option<usize>,
    path_id: Option<String>,
    camera: Camera,
    env: &EnvironmentCondition,
) -> PlannedView {
    let base = format!("views/{}/{view_id}", split.as_str());
    PlannedView {
        sidecar: ViewSidecar {
            view_id: view_id.clone(),
            rig_id,
            path_id: path_id.clone(),
            role: role.clone(),
            mode: split.exposure(),
            env: env.clone(),
            camera,
        },
        entry: ViewEntry {
            view_id,
            split,
            role,
            rig_id,
            path_id,
            camera,
            rgb: format!("{base}.png"),
            depth: format!("{base}.agd"),
            seg: format!("{base}.seg.png"),
            sidecar: format!("{base}.json"),
        },
    }
}

/// Render every trajectory camera and write a dataset directory at `out`.
pub fn capture(
    scene: &CityScene,
    aerial: &AerialTrajectory,
    ground: &GroundTrajectory,
    env: &EnvironmentCondition,
    cfg: &CaptureConfig,
    out: &Path,
) -> Result<Dataset> {
    cfg.validate()?;
    env.validate()?;
    let views = plan_views(aerial, ground, env, cfg)?;
    write_json(&out.join("scene.json"), scene)?;
    write_json(&out.join("trajectories/aerial.json"), aerial)?;
    write_json(&out.join("trajectories/ground.json"), ground)?;
    for v in &views {
        let r = render(scene, &v.entry.camera, env);
        write_png(&out.join(&v.entry.rgb), &r.exposed(v.sidecar.mode))?;
        write_atomic(&out.join(&v.entry.depth), &r.depth_map().to_bytes())?;
        write_png(&out.join(&v.entry.seg), &r.segmentation())?;
        write_json(&out.join(&v.entry.sidecar), &v.sidecar)?;
    }
    let manifest = Manifest {
        version: 1,
        scene: "scene.json".into(),
        env: env.clone(),
        capture: cfg.clone(),
        views: views.into_iter().map(|v| v.entry).collect(),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(Dataset::from_manifest(out, manifest))
}

impl Dataset {
    fn from_manifest(root: &Path, manifest: Manifest) -> Self {
        let index = manifest
            .views
            .iter()
            .enumerate()
            .map(|(i, v)| (v.view_id.clone(), i))
            .collect();
        Self {
            root: root.to_path_buf(),
            manifest,
            index,
        }
    }

    pub fn open(root: &Path) -> Result<Self> {
        let manifest: Manifest = read_artifact(&root.join("manifest.json"))?;
        if manifest.version != 1 {
            return Err(Error::data(format!("unsupported manifest version {}", manifest.version)));
        }
        Ok(Self::from_manifest(root, manifest))
    }

    pub fn scene(&self) -> Result<CityScene> {
        read_artifact(&self.root.join(&self.manifest.scene))
    }

    pub fn entry(&self, view_id: &str) -> Result<&ViewEntry> {
        self.index
            .get(view_id)
            .map(|&i| &self.manifest.views[i])
            .ok_or_else(|| Error::data(format!("view {view_id} not in dataset {}", self.root.display())))
    }

    pub fn views(&self, split: Split) -> impl Iterator<Item = &ViewEntry> {
        self.manifest.views.iter().filter(move |v| v.split == split)
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn load_rgb(&self, view_id: &str) -> Result<RgbImage> {
        let e = self.entry(view_id)?;
        let p = self.path(&e.rgb);
        if !p.exists() {
            return Err(Error::io(&p, std::io::ErrorKind::NotFound.into()));
        }
        RgbImage::load_png(&p)
    }

    pub fn load_depth(&self, view_id: &str) -> Result<DepthMap> {
        DepthMap::load(&self.path(&self.entry(view_id)?.depth))
    }

    pub fn load_sidecar(&self, view_id: &str) -> Result<ViewSidecar> {
        read_artifact(&self.path(&self.entry(view_id)?.sidecar))
    }

    /// Aerial views grouped by rig, in rig order.
    pub fn rigs(&self) -> Result<Vec<RigViews>> {
        let mut rigs: Vec<RigViews> = Vec::new();
        for v in self.views(Split::Aerial) {
            let rig_id = v.rig_id.ok_or_else(|| Error::data(format!("aerial view {} has no rig_id", v.view_id)))?;
            let role: RigCameraRole = serde_json::from_value(serde_json::Value::String(v.role.clone()))
                .map_err(|_| Error::data(format!("view {}: unknown role {}", v.view_id, v.role)))?;
            if rigs.last().is_none_or(|r| r.rig_id != rig_id) {
                rigs.push(RigViews {
                    rig_id,
                    position: v.camera.center(),
                    views: Vec::with_capacity(5),
                });
            }
            rigs.last_mut().unwrap().views.push((role, v.camera, v.view_id.clone()));
        }
        Ok(rigs)
    }

    /// Load depth and color for fusion.
    pub fn fuse_views(&self, split: Split) -> Result<Vec<FuseView>> {
        self.views(split)
            .map(|v| {
                Ok(FuseView {
                    view_id: v.view_id.clone(),
                    camera: v.camera,
                    depth: self.load_depth(&v.view_id)?,
                    rgb: self.load_rgb(&v.view_id)?,
                })
            })
            .collect()
    }

    pub fn rig_center(&self, rig_id: usize) -> Option<Vector3<f64>> {
        self.views(Split::Aerial)
            .find(|v| v.rig_id == Some(rig_id))
            .map(|v| v.camera.center())
    }
}
