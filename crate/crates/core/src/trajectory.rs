//! Aerial rig sweeps and ground-level road paths.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_6, PI};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::city::{CityScene, Rect};
use crate::error::{Error, Result};
use crate::geom::{look_at, Camera, Intrinsics};

/// Oblique camera pitch below the horizon.
pub const OBLIQUE_PITCH: f64 = PI / 3.0;
/// Arc keypoints inserted per quarter turn.
pub const TURN_KEYPOINTS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigPose {
    pub position: [f64; 3],
    /// Heading of the rig's forward direction, counter-clockwise from +x.
    pub yaw: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RigCameraRole {
    Down,
    Front,
    Back,
    Left,
    Right,
}

impl RigCameraRole {
    pub const ALL: [RigCameraRole; 5] = [
        RigCameraRole::Down,
        RigCameraRole::Front,
        RigCameraRole::Back,
        RigCameraRole::Left,
        RigCameraRole::Right,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            RigCameraRole::Down => "down",
            RigCameraRole::Front => "front",
            RigCameraRole::Back => "back",
            RigCameraRole::Left => "left",
            RigCameraRole::Right => "right",
        }
    }

    /// Yaw offset of an oblique camera relative to the rig heading.
    fn yaw_offset(&self) -> Option<f64> {
        match self {
            RigCameraRole::Down => None,
            RigCameraRole::Front => Some(0.0),
            RigCameraRole::Back => Some(PI),
            RigCameraRole::Left => Some(FRAC_PI_2),
            RigCameraRole::Right => Some(-FRAC_PI_2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AerialConfig {
    #[serde(default = "version_one")]
    pub version: u32,
    pub base_altitude: f64,
    pub altitude_margin: f64,
    pub spacing_base: f64,
    /// Fraction of the along-track spacing shared by adjacent sweep rows.
    pub overlap_factor: f64,
    /// Footprint coverage at which the along-track spacing halves.
    #[serde(default = "default_density_reference")]
    pub density_reference: f64,
}

fn version_one() -> u32 {
    1
}

fn default_density_reference() -> f64 {
    0.25
}

impl Default for AerialConfig {
    fn default() -> Self {
        Self {
            version: 1,
            base_altitude: 80.0,
            altitude_margin: 30.0,
            spacing_base: 30.0,
            overlap_factor: 0.3,
            density_reference: 0.25,
        }
    }
}

impl AerialConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != 1 {
            return Err(Error::config("aerial.version must be 1"));
        }
        if !(self.base_altitude > 0.0) {
            return Err(Error::config("aerial.base_altitude must be > 0"));
        }
        if !(self.altitude_margin >= 0.0) {
            return Err(Error::config("aerial.altitude_margin must be >= 0"));
        }
        if !(self.spacing_base > 0.0) {
            return Err(Error::config("aerial.spacing_base must be > 0"));
        }
        if !(0.0..1.0).contains(&self.overlap_factor) {
            return Err(Error::config("aerial.overlap_factor must be in [0, 1)"));
        }
        if !(self.density_reference > 0.0) {
            return Err(Error::config("aerial.density_reference must be > 0"));
        }
        Ok(())
    }
}

/// Radius on the ground seen by the oblique cameras from `altitude`.
pub fn footprint_radius(altitude: f64) -> f64 {
    altitude * FRAC_PI_6.tan()
}

/// Smallest altitude ≥ `base` that clears every building within its own
/// footprint radius by `margin`.
fn adapted_altitude(scene: &CityScene, x: f64, y: f64, cfg: &AerialConfig) -> f64 {
    let mut alt = cfg.base_altitude;
    loop {
        let tallest = scene.tallest_within(x, y, footprint_radius(alt));
        let needed = cfg.base_altitude.max(tallest + cfg.altitude_margin);
        if needed <= alt {
            return alt;
        }
        alt = needed;
    }
}

fn local_density(scene: &CityScene, x: f64, y: f64, altitude: f64) -> f64 {
    let r = footprint_radius(altitude);
    scene.footprint_fraction(&Rect {
        min: [x - r, y - r],
        max: [x + r, y + r],
    })
}

/// Lawnmower sweep over the scene bounding box with altitude and along-track
/// spacing adapted to the buildings under each rig.
pub fn plan_aerial(scene: &CityScene, cfg: &AerialConfig) -> Result<Vec<RigPose>> {
    cfg.validate()?;
    if scene.is_empty() {
        return Err(Error::Empty("cannot plan over an empty scene".into()));
    }
    let (xmin, ymin) = (scene.aabb.min[0], scene.aabb.min[1]);
    let (xmax, ymax) = (scene.aabb.max[0], scene.aabb.max[1]);
    let row_spacing = cfg.spacing_base * (1.0 - cfg.overlap_factor);
    let n_rows = ((ymax - ymin) / row_spacing + 1e-9).floor() as usize + 1;
    let mut rigs = Vec::new();
    for row in 0..n_rows {
        let y = ymin + row as f64 * row_spacing;
        let forward = row % 2 == 0;
        let (mut x, sign, yaw) = if forward { (xmin, 1.0, 0.0) } else { (xmax, -1.0, PI) };
        loop {
            let alt = adapted_altitude(scene, x, y, cfg);
            rigs.push(RigPose {
                position: [x, y, alt],
                yaw,
            });
            let density = local_density(scene, x, y, alt);
            let step = cfg.spacing_base / (1.0 + density / cfg.density_reference);
            x += sign * step;
            if (forward && x > xmax + 1e-9) || (!forward && x < xmin - 1e-9) {
                break;
            }
        }
    }
    Ok(rigs)
}

/// The five rig cameras in role order down, front, back, left, right.
pub fn rig_cameras(rig: &RigPose, intr: &Intrinsics) -> [(RigCameraRole, Camera); 5] {
    let pos = Vector3::from(rig.position);
    RigCameraRole::ALL.map(|role| {
        let pose = match role.yaw_offset() {
            None => {
                let forward = Vector3::new(rig.yaw.cos(), rig.yaw.sin(), 0.0);
                // Image "up" (−y) points along the rig heading.
                look_at(pos, pos - Vector3::z(), forward)
            }
            Some(offset) => {
                let psi = rig.yaw + offset;
                let (cp, sp) = (OBLIQUE_PITCH.cos(), OBLIQUE_PITCH.sin());
                let dir = Vector3::new(cp * psi.cos(), cp * psi.sin(), -sp);
                look_at(pos, pos + dir, Vector3::z())
            }
        }
        .expect("rig camera directions are never parallel to their up hints");
        (role, Camera::new(*intr, pose))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundConfig {
    #[serde(default = "version_one")]
    pub version: u32,
    pub spacing: f64,
    pub camera_height: f64,
    pub turn_radius: f64,
    pub clearance: f64,
}

impl Default for GroundConfig {
    fn default() -> Self {
        Self {
            version: 1,
            spacing: 8.0,
            camera_height: 1.7,
            turn_radius: 3.0,
            clearance: 1.0,
        }
    }
}

impl GroundConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != 1 {
            return Err(Error::config("ground.version must be 1"));
        }
        if !(self.spacing > 0.0) {
            return Err(Error::config("ground.spacing must be > 0"));
        }
        if !(self.camera_height > 0.0) {
            return Err(Error::config("ground.camera_height must be > 0"));
        }
        if !(self.turn_radius > 0.0) {
            return Err(Error::config("ground.turn_radius must be > 0"));
        }
        if !(self.clearance > 0.0) {
            return Err(Error::config("ground.clearance must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundPath {
    pub waypoints: Vec<[f64; 3]>,
    /// Indices of waypoints inserted on turn arcs.
    pub turn_keypoints: Vec<usize>,
}

struct PathBuilder {
    points: Vec<[f64; 3]>,
    turns: Vec<usize>,
    z: f64,
}

impl PathBuilder {
    fn push(&mut self, p: [f64; 2], turn: bool) {
        if let Some(last) = self.points.last() {
            if (last[0] - p[0]).hypot(last[1] - p[1]) < 1e-9 {
                return;
            }
        }
        if turn {
            self.turns.push(self.points.len());
        }
        self.points.push([p[0], p[1], self.z]);
    }

    /// Samples `from + (offset + k·spacing)·dir` for k ≥ 0 strictly before `until`.
    fn straight(&mut self, from: [f64; 2], dir: [f64; 2], offset: f64, until: f64, spacing: f64) {
        let mut k = 0usize;
        loop {
            let s = offset + k as f64 * spacing;
            if s >= until - 1e-9 {
                break;
            }
            self.push([from[0] + s * dir[0], from[1] + s * dir[1]], false);
            k += 1;
        }
    }
}

fn unit2(a: [f64; 2], b: [f64; 2]) -> ([f64; 2], f64) {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len = dx.hypot(dy);
    ([dx / len, dy / len], len)
}

fn build_route(start: [f64; 2], corner: Option<[f64; 2]>, end: [f64; 2], cfg: &GroundConfig) -> Result<GroundPath> {
    let mut b = PathBuilder {
        points: Vec::new(),
        turns: Vec::new(),
        z: cfg.camera_height,
    };
    match corner {
        None => {
            let (dir, len) = unit2(start, end);
            b.straight(start, dir, 0.0, len, cfg.spacing);
            b.push(end, false);
        }
        Some(c) => {
            let (d1, l1) = unit2(start, c);
            let (d2, l2) = unit2(c, end);
            let r = cfg.turn_radius;
            if r >= l1 || r >= l2 {
                return Err(Error::PathPlanning(format!(
                    "turn radius {r} does not fit legs of length {l1:.3} and {l2:.3}"
                )));
            }
            b.straight(start, d1, 0.0, l1 - r, cfg.spacing);
            let center = [c[0] - r * d1[0] + r * d2[0], c[1] - r * d1[1] + r * d2[1]];
            for i in 0..TURN_KEYPOINTS {
                let theta = FRAC_PI_2 * i as f64 / (TURN_KEYPOINTS - 1) as f64;
                let (ct, st) = (theta.cos(), theta.sin());
                b.push(
                    [
                        center[0] + r * (-d2[0] * ct + d1[0] * st),
                        center[1] + r * (-d2[1] * ct + d1[1] * st),
                    ],
                    true,
                );
            }
            b.straight(c, d2, r + cfg.spacing, l2, cfg.spacing);
            b.push(end, false);
        }
    }
    Ok(GroundPath {
        waypoints: b.points,
        turn_keypoints: b.turns,
    })
}

/// First place along the path where the horizontal clearance to buildings drops
/// below `clearance`, as `(segment index, clearance)`.
fn clearance_violation(scene: &CityScene, path: &GroundPath, clearance: f64) -> Option<(usize, f64)> {
    let step = (0.5 * clearance).min(0.25);
    for (i, w) in path.waypoints.windows(2).enumerate() {
        let (a, b) = (w[0], w[1]);
        let len = (b[0] - a[0]).hypot(b[1] - a[1]);
        let n = (len / step).ceil().max(1.0) as usize;
        for k in 0..=n {
            let t = k as f64 / n as f64;
            let (x, y) = (a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]));
            let c = scene.horizontal_clearance(x, y);
            if c < clearance {
                return Some((i, c));
            }
        }
    }
    None
}

/// Plan a straight or single-turn route between two road points.
///
/// Routes that do not share an x or y coordinate turn once, trying the
/// x-first corner before the y-first one.
pub fn plan_ground(scene: &CityScene, endpoints: ([f64; 2], [f64; 2]), cfg: &GroundConfig) -> Result<GroundPath> {
    cfg.validate()?;
    let (start, end) = endpoints;
    for (name, p) in [("start", start), ("end", end)] {
        if !scene.on_road(p[0], p[1]) {
            return Err(Error::PathPlanning(format!("{name} point ({}, {}) is not on a road", p[0], p[1])));
        }
    }
    if (start[0] - end[0]).hypot(start[1] - end[1]) < 1e-9 {
        return Err(Error::PathPlanning("start and end coincide".into()));
    }
    let aligned = (start[0] - end[0]).abs() < 1e-9 || (start[1] - end[1]).abs() < 1e-9;
    let candidates: Vec<Option<[f64; 2]>> = if aligned {
        vec![None]
    } else {
        vec![Some([end[0], start[1]]), Some([start[0], end[1]])]
    };
    let mut first_failure = None;
    for corner in candidates {
        let path = build_route(start, corner, end, cfg)?;
        match clearance_violation(scene, &path, cfg.clearance) {
            None => return Ok(path),
            Some((seg, c)) => {
                if first_failure.is_none() {
                    let (a, b) = (path.waypoints[seg], path.waypoints[seg + 1]);
                    first_failure = Some(format!(
                        "segment {seg} from ({:.2}, {:.2}) to ({:.2}, {:.2}) has clearance {c:.3} < {}",
                        a[0], a[1], b[0], b[1], cfg.clearance
                    ));
                }
            }
        }
    }
    Err(Error::PathPlanning(first_failure.unwrap_or_default()))
}

/// One horizon-level camera per waypoint, looking along the path tangent.
pub fn path_cameras(path: &GroundPath, intr: &Intrinsics) -> Result<Vec<Camera>> {
    let w = &path.waypoints;
    if w.len() < 2 {
        return Err(Error::Empty("path needs at least two waypoints".into()));
    }
    let dir = |a: &[f64; 3], b: &[f64; 3]| {
        let d = Vector3::new(b[0] - a[0], b[1] - a[1], 0.0);
        d / d.norm()
    };
    let n = w.len();
    (0..n)
        .map(|i| {
            let tangent = if i == 0 {
                dir(&w[0], &w[1])
            } else if i == n - 1 {
                dir(&w[n - 2], &w[n - 1])
            } else {
                let (din, dout) = (dir(&w[i - 1], &w[i]), dir(&w[i], &w[i + 1]));
                let avg = (din + dout) * 0.5;
                if avg.norm() < 1e-9 {
                    din
                } else {
                    avg.normalize()
                }
            };
            let pos = Vector3::from(w[i]);
            Ok(Camera::new(*intr, look_at(pos, pos + tangent, Vector3::z())?))
        })
        .collect()
}

/// Start/end points running along the spine of every road, inset from the
/// scene border by half a road width.
pub fn road_spans(scene: &CityScene) -> Vec<([f64; 2], [f64; 2])> {
    scene
        .roads
        .iter()
        .map(|r| {
            let (a, b) = (r.spine[0], r.spine[r.spine.len() - 1]);
            let (d, len) = unit2(a, b);
            let inset = (0.5 * r.width).min(0.25 * len);
            (
                [a[0] + inset * d[0], a[1] + inset * d[1]],
                [b[0] - inset * d[0], b[1] - inset * d[1]],
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AerialTrajectory {
    pub version: u32,
    pub config: AerialConfig,
    pub rigs: Vec<RigPose>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundRoute {
    pub path_id: String,
    pub start: [f64; 2],
    pub end: [f64; 2],
    pub path: GroundPath,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTrajectory {
    pub version: u32,
    pub config: GroundConfig,
    pub routes: Vec<GroundRoute>,
}
