//! Procedural box-and-road cities with exact geometric queries.
//!
//! Blocks are laid out on a regular grid with a road between every pair of
//! adjacent blocks and around the border. Each block is split into a lot grid;
//! lots are filled with an axis-aligned building when a per-lot uniform draw
//! falls below `fill_density`. The per-lot draws do not depend on the density,
//! so raising the density only ever adds buildings.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[repr(u8)]
pub enum SemanticLabel {
    Sky = 0,
    Ground = 1,
    Road = 2,
    Building = 3,
}

impl SemanticLabel {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Self::Sky),
            1 => Some(Self::Ground),
            2 => Some(Self::Road),
            3 => Some(Self::Building),
            _ => None,
        }
    }
}

/// Lighting and atmosphere for a capture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentCondition {
    /// Unit vector pointing from the sun toward the scene.
    pub sun_direction: [f64; 3],
    pub ambient: f64,
    /// Extinction per meter.
    pub fog_density: f64,
    #[serde(default)]
    pub tag: String,
}

impl EnvironmentCondition {
    pub fn noon() -> Self {
        let d = Vector3::new(0.3, 0.2, -1.0).normalize();
        Self {
            sun_direction: [d.x, d.y, d.z],
            ambient: 0.35,
            fog_density: 0.0,
            tag: "noon".into(),
        }
    }

    pub fn sunset() -> Self {
        let d = Vector3::new(-1.0, 0.4, -0.35).normalize();
        Self {
            sun_direction: [d.x, d.y, d.z],
            ambient: 0.25,
            fog_density: 0.002,
            tag: "sunset".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = Vector3::from(self.sun_direction);
        if (d.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::config("env.sun_direction must be a unit vector"));
        }
        if !(d.z < 0.0) {
            return Err(Error::config("env.sun_direction must have negative z"));
        }
        if !(0.0..=1.0).contains(&self.ambient) {
            return Err(Error::config("env.ambient must be in [0, 1]"));
        }
        if !(self.fog_density >= 0.0 && self.fog_density.is_finite()) {
            return Err(Error::config("env.fog_density must be >= 0"));
        }
        Ok(())
    }
}

/// Axis-aligned box standing on the ground.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Building {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub albedo: [f64; 3],
}

impl Building {
    pub fn height(&self) -> f64 {
        self.max[2]
    }

    pub fn footprint(&self) -> Rect {
        Rect {
            min: [self.min[0], self.min[1]],
            max: [self.max[0], self.max[1]],
        }
    }

    /// Unsigned distance from `p` to the box surface.
    pub fn surface_distance(&self, p: &Vector3<f64>) -> f64 {
        let mut outside = 0.0;
        let mut inside = f64::INFINITY;
        for k in 0..3 {
            let below = self.min[k] - p[k];
            let above = p[k] - self.max[k];
            let d = below.max(above);
            if d > 0.0 {
                outside += d * d;
            }
            inside = inside.min((-below).min(-above));
        }
        if outside > 0.0 {
            outside.sqrt()
        } else {
            inside.max(0.0)
        }
    }
}

/// Axis-aligned rectangle in the ground plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Rect {
    pub fn area(&self) -> f64 {
        (self.max[0] - self.min[0]).max(0.0) * (self.max[1] - self.min[1]).max(0.0)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.min[0] && x <= self.max[0] && y >= self.min[1] && y <= self.max[1]
    }

    pub fn intersection_area(&self, other: &Rect) -> f64 {
        let w = self.max[0].min(other.max[0]) - self.min[0].max(other.min[0]);
        let h = self.max[1].min(other.max[1]) - self.min[1].max(other.min[1]);
        w.max(0.0) * h.max(0.0)
    }

    /// Distance from a point to the rectangle (0 inside).
    pub fn distance(&self, x: f64, y: f64) -> f64 {
        let dx = (self.min[0] - x).max(x - self.max[0]).max(0.0);
        let dy = (self.min[1] - y).max(y - self.max[1]).max(0.0);
        dx.hypot(dy)
    }

    /// Signed distance: negative inside (depth to the nearest edge).
    pub fn signed_distance(&self, x: f64, y: f64) -> f64 {
        if self.contains(x, y) {
            -(x - self.min[0])
                .min(self.max[0] - x)
                .min(y - self.min[1])
                .min(self.max[1] - y)
        } else {
            self.distance(x, y)
        }
    }

    pub fn intersects_disk(&self, x: f64, y: f64, r: f64) -> bool {
        self.distance(x, y) <= r
    }
}

/// Straight road on the ground plane: a two-point spine swept by `width`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Road {
    pub spine: Vec<[f64; 2]>,
    pub width: f64,
    pub albedo: [f64; 3],
}

impl Road {
    /// Axis-aligned rectangle covered by the road.
    pub fn rect(&self) -> Rect {
        let h = 0.5 * self.width;
        let (a, b) = (self.spine[0], self.spine[self.spine.len() - 1]);
        if (a[1] - b[1]).abs() <= (a[0] - b[0]).abs() {
            Rect {
                min: [a[0].min(b[0]), a[1] - h],
                max: [a[0].max(b[0]), a[1] + h],
            }
        } else {
            Rect {
                min: [a[0] - h, a[1].min(b[1])],
                max: [a[0] + h, a[1].max(b[1])],
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn center(&self) -> Vector3<f64> {
        (Vector3::from(self.min) + Vector3::from(self.max)) * 0.5
    }

    pub fn diagonal(&self) -> f64 {
        (Vector3::from(self.max) - Vector3::from(self.min)).norm()
    }

    pub fn corners(&self) -> [Vector3<f64>; 8] {
        let mut out = [Vector3::zeros(); 8];
        for (i, c) in out.iter_mut().enumerate() {
            for k in 0..3 {
                c[k] = if i >> k & 1 == 1 { self.max[k] } else { self.min[k] };
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CityConfig {
    #[serde(default = "config_version")]
    pub version: u32,
    pub blocks_x: u32,
    pub blocks_y: u32,
    pub block_size: f64,
    pub road_width: f64,
    pub height_min: f64,
    pub height_max: f64,
    pub fill_density: f64,
    /// Lots per block side.
    #[serde(default = "default_lots")]
    pub lots_per_side: u32,
}

fn config_version() -> u32 {
    1
}

fn default_lots() -> u32 {
    2
}

impl Default for CityConfig {
    fn default() -> Self {
        Self {
            version: 1,
            blocks_x: 2,
            blocks_y: 2,
            block_size: 40.0,
            road_width: 12.0,
            height_min: 10.0,
            height_max: 45.0,
            fill_density: 1.0,
            lots_per_side: 2,
        }
    }
}

impl CityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != 1 {
            return Err(Error::config(format!("city.version {} unsupported", self.version)));
        }
        if self.blocks_x < 1 {
            return Err(Error::config("city.blocks_x must be >= 1"));
        }
        if self.blocks_y < 1 {
            return Err(Error::config("city.blocks_y must be >= 1"));
        }
        if !(self.block_size > 0.0) {
            return Err(Error::config("city.block_size must be > 0"));
        }
        if !(self.road_width > 0.0) {
            return Err(Error::config("city.road_width must be > 0"));
        }
        if !(self.height_min > 0.0) {
            return Err(Error::config("city.height_min must be > 0"));
        }
        if !(self.height_max >= self.height_min) {
            return Err(Error::config("city.height_max must be >= height_min"));
        }
        if !(self.fill_density > 0.0 && self.fill_density <= 1.0) {
            return Err(Error::config("city.fill_density must be in (0, 1]"));
        }
        if self.lots_per_side < 1 {
            return Err(Error::config("city.lots_per_side must be >= 1"));
        }
        Ok(())
    }
}

pub const GROUND_ALBEDO: [f64; 3] = [0.32, 0.42, 0.26];
pub const ROAD_ALBEDO: [f64; 3] = [0.22, 0.22, 0.25];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CityScene {
    pub seed: u64,
    pub config: CityConfig,
    pub buildings: Vec<Building>,
    pub roads: Vec<Road>,
    pub ground_albedo: [f64; 3],
    pub aabb: Aabb,
    /// Block cells (footprint rectangles between roads), row-major by block.
    pub blocks: Vec<Rect>,
}

/// Generate a city; a pure function of `(seed, cfg)`.
pub fn generate_city(seed: u64, cfg: &CityConfig) -> Result<CityScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (bs, rw) = (cfg.block_size, cfg.road_width);
    let pitch = bs + rw;
    let extent_x = cfg.blocks_x as f64 * pitch + rw;
    let extent_y = cfg.blocks_y as f64 * pitch + rw;

    let mut roads = Vec::new();
    for j in 0..=cfg.blocks_y {
        let y = j as f64 * pitch + 0.5 * rw;
        roads.push(Road {
            spine: vec![[0.0, y], [extent_x, y]],
            width: rw,
            albedo: ROAD_ALBEDO,
        });
    }
    for i in 0..=cfg.blocks_x {
        let x = i as f64 * pitch + 0.5 * rw;
        roads.push(Road {
            spine: vec![[x, 0.0], [x, extent_y]],
            width: rw,
            albedo: ROAD_ALBEDO,
        });
    }

    let lots = cfg.lots_per_side as usize;
    let lot = bs / lots as f64;
    let mut blocks = Vec::new();
    let mut buildings = Vec::new();
    for by in 0..cfg.blocks_y {
        for bx in 0..cfg.blocks_x {
            let x0 = rw + bx as f64 * pitch;
            let y0 = rw + by as f64 * pitch;
            blocks.push(Rect {
                min: [x0, y0],
                max: [x0 + bs, y0 + bs],
            });
            let mut block_buildings = Vec::new();
            let mut fallback = None;
            for ly in 0..lots {
                for lx in 0..lots {
                    // All draws happen for every lot so the stream does not depend on density.
                    let fill: f64 = rng.random();
                    let height = rng.random_range(cfg.height_min..=cfg.height_max);
                    let insets: [f64; 4] = [
                        rng.random_range(0.08..0.2),
                        rng.random_range(0.08..0.2),
                        rng.random_range(0.08..0.2),
                        rng.random_range(0.08..0.2),
                    ];
                    let albedo = [
                        rng.random_range(0.35..0.85),
                        rng.random_range(0.35..0.85),
                        rng.random_range(0.35..0.85),
                    ];
                    let lx0 = x0 + lx as f64 * lot;
                    let ly0 = y0 + ly as f64 * lot;
                    let b = Building {
                        min: [lx0 + insets[0] * lot, ly0 + insets[1] * lot, 0.0],
                        max: [lx0 + lot - insets[2] * lot, ly0 + lot - insets[3] * lot, height],
                        albedo,
                    };
                    if fallback.is_none() {
                        fallback = Some(b);
                    }
                    if fill < cfg.fill_density {
                        block_buildings.push(b);
                    }
                }
            }
            if block_buildings.is_empty() {
                block_buildings.extend(fallback);
            }
            buildings.extend(block_buildings);
        }
    }

    let max_h = buildings.iter().map(|b| b.height()).fold(0.0, f64::max);
    Ok(CityScene {
        seed,
        config: cfg.clone(),
        buildings,
        roads,
        ground_albedo: GROUND_ALBEDO,
        aabb: Aabb {
            min: [0.0, 0.0, 0.0],
            max: [extent_x, extent_y, max_h],
        },
        blocks,
    })
}

impl CityScene {
    /// Scene with only ground and the given boxes; the bounding box covers the
    /// buildings plus `ground_extent` in the ground plane.
    pub fn from_parts(buildings: Vec<Building>, roads: Vec<Road>, ground_extent: Rect) -> Self {
        let mut min = [ground_extent.min[0], ground_extent.min[1], 0.0];
        let mut max = [ground_extent.max[0], ground_extent.max[1], 0.0];
        for b in &buildings {
            for k in 0..3 {
                min[k] = min[k].min(b.min[k]);
                max[k] = max[k].max(b.max[k]);
            }
        }
        for r in &roads {
            let rect = r.rect();
            for k in 0..2 {
                min[k] = min[k].min(rect.min[k]);
                max[k] = max[k].max(rect.max[k]);
            }
        }
        Self {
            seed: 0,
            config: CityConfig::default(),
            buildings,
            roads,
            ground_albedo: GROUND_ALBEDO,
            aabb: Aabb { min, max },
            blocks: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.buildings.is_empty() && self.roads.is_empty() && self.aabb.diagonal() == 0.0
    }

    pub fn max_building_height(&self) -> f64 {
        self.buildings.iter().map(|b| b.height()).fold(0.0, f64::max)
    }

    /// Tallest building whose footprint meets the disk of radius `r` around `(x, y)`.
    pub fn tallest_within(&self, x: f64, y: f64, r: f64) -> f64 {
        self.buildings
            .iter()
            .filter(|b| b.footprint().intersects_disk(x, y, r))
            .map(|b| b.height())
            .fold(0.0, f64::max)
    }

    /// Fraction of `window` covered by building footprints.
    pub fn footprint_fraction(&self, window: &Rect) -> f64 {
        let area = window.area();
        if area <= 0.0 {
            return 0.0;
        }
        // Footprints never overlap, so areas add.
        self.buildings
            .iter()
            .map(|b| b.footprint().intersection_area(window))
            .sum::<f64>()
            / area
    }

    /// Horizontal clearance from `(x, y)` to the nearest building footprint;
    /// negative when inside one.
    pub fn horizontal_clearance(&self, x: f64, y: f64) -> f64 {
        self.buildings
            .iter()
            .map(|b| b.footprint().signed_distance(x, y))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn on_road(&self, x: f64, y: f64) -> bool {
        self.roads.iter().any(|r| r.rect().contains(x, y))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::data(e.to_string()))
    }
}

/// Diagonal length of the scene bounding box.
pub fn scene_diameter(scene: &CityScene) -> Result<f64> {
    if scene.is_empty() {
        return Err(Error::Empty("scene has no geometry".into()));
    }
    Ok(scene.aabb.diagonal())
}

/// Minimum unsigned distance from `p` to the ground plane or any building face.
///
/// Road tops coincide with the ground plane, so they never change the minimum.
pub fn distance_to_surface(scene: &CityScene, p: &Vector3<f64>) -> f64 {
    scene
        .buildings
        .iter()
        .map(|b| b.surface_distance(p))
        .fold(p.z.abs(), f64::min)
}
